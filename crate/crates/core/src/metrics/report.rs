//! Artifact emission: RD-point CSVs with a pairwise BD-rate matrix, and
//! 16-bit PGM renderings of bit-allocation maps.

use super::{bd_rate_matrix, RDCurve, RDPoint};
use crate::codec::BitMap;
use crate::error::{Error, Result};
use crate::imageio::write_pgm16;
use std::fmt::Write as _;
use std::path::Path;

/// Write `rd_points.csv` and `bd_matrix.csv` under `dir`; returns the
/// matrix. Float formatting is shortest-roundtrip, so a reload reproduces
/// the same numbers bit for bit.
pub fn emit_rd_report(
    curves: &[RDCurve],
    dir: &Path,
    header_comment: &str,
) -> Result<Vec<Vec<f64>>> {
    std::fs::create_dir_all(dir)?;
    let mut points = String::new();
    if !header_comment.is_empty() {
        writeln!(points, "# {header_comment}").expect("string write");
    }
    writeln!(points, "curve,point,bpp,quality").expect("string write");
    for c in curves {
        for p in &c.points {
            writeln!(points, "{},{},{},{}", c.label, p.label, p.bpp, p.quality)
                .expect("string write");
        }
    }
    std::fs::write(dir.join("rd_points.csv"), points)?;

    let matrix = bd_rate_matrix(curves)?;
    let mut out = String::new();
    if !header_comment.is_empty() {
        writeln!(out, "# {header_comment}").expect("string write");
    }
    write!(out, "anchor").expect("string write");
    for c in curves {
        write!(out, ",{}", c.label).expect("string write");
    }
    out.push('\n');
    for (i, c) in curves.iter().enumerate() {
        write!(out, "{}", c.label).expect("string write");
        for v in &matrix[i] {
            write!(out, ",{v}").expect("string write");
        }
        out.push('\n');
    }
    std::fs::write(dir.join("bd_matrix.csv"), out)?;
    Ok(matrix)
}

/// Reload curves from an `rd_points.csv`.
pub fn load_rd_points(path: &Path) -> Result<Vec<RDCurve>> {
    let text = std::fs::read_to_string(path)?;
    let mut order: Vec<String> = Vec::new();
    let mut grouped: std::collections::BTreeMap<String, Vec<RDPoint>> = Default::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("curve,") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Config(format!(
                "{}:{}: expected 4 fields, got {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| {
                Error::Config(format!(
                    "{}:{}: bad number {s:?}",
                    path.display(),
                    lineno + 1
                ))
            })
        };
        let curve = fields[0].to_string();
        if !grouped.contains_key(&curve) {
            order.push(curve.clone());
        }
        grouped.entry(curve).or_default().push(RDPoint {
            label: fields[1].to_string(),
            bpp: parse(fields[2])?,
            quality: parse(fields[3])?,
        });
    }
    order
        .into_iter()
        .map(|label| {
            let pts = grouped.remove(&label).expect("grouped by construction");
            RDCurve::new(label, pts)
        })
        .collect()
}

/// Absolute bit map as 16-bit PGM, normalized by its max. The header
/// comment records bits-per-unit so absolute totals reconstruct.
pub fn emit_bitmap(map: &BitMap, path: &Path) -> Result<()> {
    let max = map.values.iter().cloned().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 65535.0 / max } else { 0.0 };
    let pixels: Vec<u16> = map
        .values
        .iter()
        .map(|&v| ((v * scale).round() as i64).clamp(0, 65535) as u16)
        .collect();
    write_pgm16(
        path,
        &pixels,
        map.h,
        map.w,
        &[
            format!("max_bits_per_cell={max}"),
            format!("total_bits={}", map.total()),
            "pixel = bits / max_bits_per_cell * 65535".to_string(),
        ],
    )
}

/// Signed difference map: 32768 is zero, red/blue rendering is left to
/// external tools. The absolute scale is recorded in the header.
pub fn emit_bitmap_diff(a: &BitMap, b: &BitMap, path: &Path) -> Result<()> {
    let diff = crate::codec::bit_map_diff(a, b)?;
    let absmax = diff.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if absmax > 0.0 { 32767.0 / absmax } else { 0.0 };
    let pixels: Vec<u16> = diff
        .values
        .iter()
        .map(|&v| (32768.0 + (v * scale)).round().clamp(0.0, 65535.0) as u16)
        .collect();
    write_pgm16(
        path,
        &pixels,
        diff.h,
        diff.w,
        &[
            format!("absmax_bits={absmax}"),
            "pixel = 32768 + bits_diff / absmax_bits * 32767".to_string(),
        ],
    )
}
