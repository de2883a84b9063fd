//! Per-location bit-allocation maps: how many estimated bits each latent
//! cell consumes, and signed differences between two maps.

use super::entropy::EntropySnapshot;
use super::LatentCode;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BitMap {
    pub h: usize,
    pub w: usize,
    /// Row-major bits per latent cell; signed for difference maps.
    pub values: Vec<f64>,
}

impl BitMap {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.total() / self.values.len() as f64
    }

    /// Mean over cells selected by a binary mask, or None if the mask is
    /// empty.
    pub fn masked_mean(&self, mask: &[bool]) -> Option<f64> {
        assert_eq!(mask.len(), self.values.len());
        let mut acc = 0.0;
        let mut n = 0usize;
        for (v, &m) in self.values.iter().zip(mask) {
            if m {
                acc += v;
                n += 1;
            }
        }
        (n > 0).then(|| acc / n as f64)
    }
}

/// bits(i,j) = -sum_c log2 p_c(v[c,i,j]); the map regroups the exact rate
/// estimate, so its total matches `rate_bits_exact` on the same latent.
pub fn bit_allocation_map(snapshot: &EntropySnapshot, code: &LatentCode) -> Result<BitMap> {
    if code.model_digest != snapshot.digest() {
        return Err(Error::ModelMismatch {
            stream: code.model_digest,
            model: snapshot.digest(),
        });
    }
    let (c, h, w) = (code.channels, code.h, code.w);
    let mut values = vec![0.0f64; h * w];
    for ci in 0..c {
        for p in 0..h * w {
            let v = code.values[ci * h * w + p];
            values[p] -= snapshot.likelihood(ci, v as f64).log2();
        }
    }
    Ok(BitMap { h, w, values })
}

/// Elementwise a - b.
pub fn bit_map_diff(a: &BitMap, b: &BitMap) -> Result<BitMap> {
    if a.h != b.h || a.w != b.w {
        return Err(Error::ShapeMismatch {
            op: "bit_map_diff",
            lhs: vec![a.h, a.w],
            rhs: vec![b.h, b.w],
        });
    }
    Ok(BitMap {
        h: a.h,
        w: a.w,
        values: a
            .values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| x - y)
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap() -> EntropySnapshot {
        EntropySnapshot {
            support: 8,
            mu: vec![0.0, 0.3],
            scale: vec![1.0, 0.7],
        }
    }

    fn code(snapshot: &EntropySnapshot, values: Vec<i32>, h: usize, w: usize) -> LatentCode {
        LatentCode {
            channels: snapshot.channels(),
            h,
            w,
            values,
            model_digest: snapshot.digest(),
        }
    }

    #[test]
    fn constant_latent_gives_constant_map() {
        let s = snap();
        let c = code(&s, vec![0; 2 * 3 * 3], 3, 3);
        let m = bit_allocation_map(&s, &c).unwrap();
        let first = m.values[0];
        assert!(m.values.iter().all(|&v| (v - first).abs() < 1e-12));
    }

    #[test]
    fn map_total_matches_exact_rate() {
        let s = snap();
        let values: Vec<i32> = (0..2 * 4 * 4).map(|i| (i as i32 % 9) - 4).collect();
        let c = code(&s, values.clone(), 4, 4);
        let m = bit_allocation_map(&s, &c).unwrap();
        let exact = s.rate_bits_exact(&values, 2);
        assert!((m.total() - exact).abs() < 1e-9);
    }

    #[test]
    fn high_magnitude_cells_cost_more() {
        let s = snap();
        let mut values = vec![0i32; 2 * 2 * 2];
        values[0] = 6; // channel 0, cell 0
        values[4] = 6; // channel 1, cell 0
        let c = code(&s, values, 2, 2);
        let m = bit_allocation_map(&s, &c).unwrap();
        assert!(m.values[0] > m.values[1]);
    }

    #[test]
    fn diff_is_antisymmetric_and_sums_to_rate_gap() {
        let s = snap();
        let a = code(&s, (0..8).map(|i| i % 3).collect(), 2, 2);
        let b = code(&s, (0..8).map(|i| (i + 1) % 4).collect(), 2, 2);
        let ma = bit_allocation_map(&s, &a).unwrap();
        let mb = bit_allocation_map(&s, &b).unwrap();
        let d1 = bit_map_diff(&ma, &mb).unwrap();
        let d2 = bit_map_diff(&mb, &ma).unwrap();
        for (x, y) in d1.values.iter().zip(&d2.values) {
            assert_eq!(*x, -*y);
        }
        assert!((d1.total() - (ma.total() - mb.total())).abs() < 1e-12);
        let zero = bit_map_diff(&ma, &ma).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));
    }
}
