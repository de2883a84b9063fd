//! PNG and PGM helpers shared by the dataset exporter, the metrics
//! reports and the CLI.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

/// Write a [3,H,W] tensor in [0,1] as an 8-bit RGB PNG.
pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::InvalidArgument {
            op: "write_png",
            msg: format!("expected [3,H,W], got {:?}", shape),
        });
    }
    let (h, w) = (shape[1], shape[2]);
    let mut rgb = vec![0u8; h * w * 3];
    let data = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = data[c * h * w + y * w + x].clamp(0.0, 1.0);
                rgb[(y * w + x) * 3 + c] = (v * 255.0).round() as u8;
            }
        }
    }
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(&rgb)?;
    Ok(())
}

/// Read an 8-bit RGB(A) PNG into a [3,H,W] tensor in [0,1].
pub fn read_png(path: &Path) -> Result<Tensor> {
    let decoder = png::Decoder::new(std::io::BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => {
            return Err(Error::Png(format!("unsupported color type {other:?}")))
        }
    };
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!(
            "unsupported bit depth {:?}",
            info.bit_depth
        )));
    }
    let mut data = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[c * h * w + y * w + x] =
                    buf[(y * w + x) * stride + c] as f32 / 255.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// 8-bit binary PGM (P5), for class masks.
pub fn write_pgm8(path: &Path, values: &[u8], h: usize, w: usize) -> Result<()> {
    debug_assert_eq!(values.len(), h * w);
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    out.write_all(values)?;
    Ok(())
}

/// 16-bit binary PGM (P5, big-endian samples per the format). Comment lines
/// carry the normalization so absolute quantities can be recovered.
pub fn write_pgm16(
    path: &Path,
    values: &[u16],
    h: usize,
    w: usize,
    comments: &[String],
) -> Result<()> {
    debug_assert_eq!(values.len(), h * w);
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "P5")?;
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    writeln!(out, "{w} {h}")?;
    writeln!(out, "65535")?;
    for v in values {
        out.write_all(&v.to_be_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_exact_at_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let data: Vec<f32> = (0..3 * 8 * 8).map(|i| (i % 256) as f32 / 255.0).collect();
        let img = Tensor::new(vec![3, 8, 8], data).unwrap();
        write_png(&path, &img).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(back.shape(), &[3, 8, 8]);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 0.5 / 255.0);
        }
    }
}
