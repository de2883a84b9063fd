//! Task-quality metrics, RD curves and BD-rate.

mod bdrate;
mod eval;
mod report;

pub use bdrate::{bd_rate, bd_rate_matrix, BdRateOutcome};
pub use eval::{eval_model, EvalConfig, EvalDetail, EvalSummary};
pub use report::{emit_bitmap, emit_bitmap_diff, emit_rd_report, load_rd_points};

use crate::error::{Error, Result};

/// Mean intersection-over-union across the classes present in either the
/// prediction or the ground truth; classes absent from both are excluded.
pub fn miou(pred: &[u32], gt: &[u32], n_classes: usize) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "miou",
            lhs: vec![pred.len()],
            rhs: vec![gt.len()],
        });
    }
    let mut inter = vec![0u64; n_classes];
    let mut union = vec![0u64; n_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if p >= n_classes || g >= n_classes {
            return Err(Error::InvalidArgument {
                op: "miou",
                msg: format!("label {} exceeds {} classes", p.max(g), n_classes),
            });
        }
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for c in 0..n_classes {
        if union[c] > 0 {
            total += inter[c] as f64 / union[c] as f64;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::InvalidArgument {
            op: "miou",
            msg: "no classes present".into(),
        });
    }
    Ok(total / counted as f64)
}

/// Fraction of presence flags predicted correctly.
pub fn presence_accuracy(pred: &[bool], gt: &[bool]) -> f64 {
    debug_assert_eq!(pred.len(), gt.len());
    let correct = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    correct as f64 / pred.len().max(1) as f64
}

/// One operating point of a codec: coded size against task quality.
#[derive(Clone, Debug, PartialEq)]
pub struct RDPoint {
    pub bpp: f64,
    pub quality: f64,
    pub label: String,
}

/// Points of one codec variant, sorted by bpp with distinct bpp values.
#[derive(Clone, Debug, PartialEq)]
pub struct RDCurve {
    pub label: String,
    pub points: Vec<RDPoint>,
}

impl RDCurve {
    pub fn new(label: impl Into<String>, mut points: Vec<RDPoint>) -> Result<RDCurve> {
        if points.len() < 2 {
            return Err(Error::InvalidArgument {
                op: "rd_curve",
                msg: format!("need at least 2 points, got {}", points.len()),
            });
        }
        points.sort_by(|a, b| a.bpp.partial_cmp(&b.bpp).expect("finite bpp"));
        for w in points.windows(2) {
            if w[0].bpp == w[1].bpp {
                return Err(Error::InvalidArgument {
                    op: "rd_curve",
                    msg: format!("duplicate bpp {}", w[0].bpp),
                });
            }
        }
        if points.iter().any(|p| p.bpp <= 0.0) {
            return Err(Error::InvalidArgument {
                op: "rd_curve",
                msg: "bpp must be positive".into(),
            });
        }
        Ok(RDCurve {
            label: label.into(),
            points,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miou_identical_masks() {
        let m = vec![0u32, 1, 2, 1];
        assert_eq!(miou(&m, &m, 3).unwrap(), 1.0);
    }

    #[test]
    fn miou_disjoint_single_class() {
        // prediction says class 1 everywhere gt says class 2
        let pred = vec![1u32; 4];
        let gt = vec![2u32; 4];
        assert_eq!(miou(&pred, &gt, 3).unwrap(), 0.0);
    }

    #[test]
    fn miou_half_overlap_geometry() {
        // 4x4 grid: gt forground = columns 0..2, pred = columns 1..3.
        // fg: inter 4, union 12 -> 1/3. bg: inter 4, union 12 -> 1/3.
        let mut gt = vec![0u32; 16];
        let mut pred = vec![0u32; 16];
        for y in 0..4 {
            for x in 0..2 {
                gt[y * 4 + x] = 1;
            }
            for x in 1..3 {
                pred[y * 4 + x] = 1;
            }
        }
        let got = miou(&pred, &gt, 2).unwrap();
        let want = (1.0 / 3.0 + 1.0 / 3.0) / 2.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn curves_sort_and_reject_duplicates() {
        let p = |bpp: f64, q: f64| RDPoint {
            bpp,
            quality: q,
            label: String::new(),
        };
        let c = RDCurve::new("x", vec![p(0.9, 0.8), p(0.3, 0.5), p(0.6, 0.7)]).unwrap();
        assert_eq!(c.points[0].bpp, 0.3);
        assert!(RDCurve::new("y", vec![p(0.5, 0.1), p(0.5, 0.2)]).is_err());
    }
}
