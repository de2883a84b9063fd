//! Bjøntegaard delta rate via monotone piecewise-cubic interpolation of
//! log-rate as a function of quality, integrated over the overlapping
//! quality interval.

use super::RDCurve;
use crate::error::{Error, Result};

const INTEGRATION_POINTS: usize = 1000;

#[derive(Clone, Debug)]
pub struct BdRateOutcome {
    /// Percent rate change of `test` vs `anchor` at equal quality; negative
    /// means the test codec is cheaper.
    pub percent: f64,
    /// Set when a curve needed a monotone projection of its quality values.
    pub monotonicity_warning: bool,
}

/// Monotone cubic Hermite interpolant (harmonic-mean slopes, Fritsch-
/// Butland). Knots must be strictly increasing in x; values never overshoot
/// the enclosing knot interval.
struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    fn new(x: Vec<f64>, y: Vec<f64>) -> Pchip {
        let n = x.len();
        debug_assert!(n >= 2);
        let h: Vec<f64> = (0..n - 1).map(|i| x[i + 1] - x[i]).collect();
        let s: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        let mut d = vec![0.0; n];
        d[0] = s[0];
        d[n - 1] = s[n - 2];
        for i in 1..n - 1 {
            if s[i - 1] * s[i] <= 0.0 {
                d[i] = 0.0;
            } else {
                // weighted harmonic mean of neighbor slopes
                let w1 = 2.0 * h[i] + h[i - 1];
                let w2 = h[i] + 2.0 * h[i - 1];
                d[i] = (w1 + w2) / (w1 / s[i - 1] + w2 / s[i]);
            }
        }
        Pchip { x, y, d }
    }

    fn eval(&self, xq: f64) -> f64 {
        let n = self.x.len();
        let i = match self
            .x
            .binary_search_by(|v| v.partial_cmp(&xq).expect("finite"))
        {
            Ok(i) => i.min(n - 2),
            Err(0) => 0,
            Err(i) if i >= n => n - 2,
            Err(i) => i - 1,
        };
        let h = self.x[i + 1] - self.x[i];
        let t = ((xq - self.x[i]) / h).clamp(0.0, 1.0);
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.y[i] + h10 * h * self.d[i] + h01 * self.y[i + 1] + h11 * h * self.d[i + 1]
    }
}

/// Quality-indexed log-rate knots of one curve. Rates are normalized by a
/// shared reference so that rescaling both curves by the same power of two
/// leaves every knot bit-identical.
fn curve_knots(curve: &RDCurve, rate_ref: f64) -> (Vec<f64>, Vec<f64>, bool) {
    // points arrive sorted by bpp; quality should rise along them
    let mut q: Vec<f64> = curve.points.iter().map(|p| p.quality).collect();
    let r: Vec<f64> = curve
        .points
        .iter()
        .map(|p| (p.bpp / rate_ref).ln())
        .collect();
    let mut warned = false;
    for i in 1..q.len() {
        if q[i] <= q[i - 1] {
            q[i] = q[i - 1] + 1e-9;
            warned = true;
        }
    }
    (q, r, warned)
}

/// BD-rate of `test` against `anchor`, in percent.
pub fn bd_rate(anchor: &RDCurve, test: &RDCurve) -> Result<BdRateOutcome> {
    let rate_ref = anchor.points[0].bpp;
    let (qa, ra, warn_a) = curve_knots(anchor, rate_ref);
    let (qt, rt, warn_t) = curve_knots(test, rate_ref);
    let lo = qa.first().unwrap().max(*qt.first().unwrap());
    let hi = qa.last().unwrap().min(*qt.last().unwrap());
    if !(hi > lo) {
        return Err(Error::NoQualityOverlap);
    }
    let pa = Pchip::new(qa, ra);
    let pt = Pchip::new(qt, rt);
    // trapezoid over the overlap
    let n = INTEGRATION_POINTS;
    let step = (hi - lo) / n as f64;
    let mut acc = 0.0;
    for i in 0..=n {
        let q = lo + step * i as f64;
        let diff = pt.eval(q) - pa.eval(q);
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        acc += w * diff;
    }
    let mean_diff = acc / n as f64;
    Ok(BdRateOutcome {
        percent: (mean_diff.exp() - 1.0) * 100.0,
        monotonicity_warning: warn_a || warn_t,
    })
}

/// Pairwise BD-rate matrix: entry (i, j) = bd_rate(anchor=i, test=j).
pub fn bd_rate_matrix(curves: &[RDCurve]) -> Result<Vec<Vec<f64>>> {
    let n = curves.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                m[i][j] = bd_rate(&curves[i], &curves[j])?.percent;
            }
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::RDPoint;

    fn curve(label: &str, pts: &[(f64, f64)]) -> RDCurve {
        RDCurve::new(
            label,
            pts.iter()
                .map(|&(bpp, q)| RDPoint {
                    bpp,
                    quality: q,
                    label: String::new(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn anchor() -> RDCurve {
        curve(
            "anchor",
            &[(0.2, 0.55), (0.4, 0.70), (0.8, 0.82), (1.6, 0.90)],
        )
    }

    #[test]
    fn identical_curves_give_zero() {
        let a = anchor();
        let out = bd_rate(&a, &a).unwrap();
        assert_eq!(out.percent, 0.0);
        assert!(!out.monotonicity_warning);
    }

    #[test]
    fn halved_rate_is_minus_fifty_percent() {
        let a = anchor();
        let t = curve(
            "test",
            &a.points
                .iter()
                .map(|p| (p.bpp * 0.5, p.quality))
                .collect::<Vec<_>>(),
        );
        let out = bd_rate(&a, &t).unwrap();
        assert!((out.percent + 50.0).abs() < 1e-6, "{}", out.percent);
    }

    #[test]
    fn quarter_up_is_plus_twentyfive_percent() {
        let a = anchor();
        let t = curve(
            "test",
            &a.points
                .iter()
                .map(|p| (p.bpp * 1.25, p.quality))
                .collect::<Vec<_>>(),
        );
        let out = bd_rate(&a, &t).unwrap();
        assert!((out.percent - 25.0).abs() < 1e-6, "{}", out.percent);
    }

    #[test]
    fn scale_invariance_is_exact_for_power_of_two_scales() {
        let a = anchor();
        let t = curve(
            "test",
            &[(0.25, 0.57), (0.5, 0.72), (0.9, 0.83), (1.7, 0.89)],
        );
        let base = bd_rate(&a, &t).unwrap().percent;
        for scale in [0.25, 0.5, 2.0, 4.0] {
            let a2 = curve(
                "anchor",
                &a.points
                    .iter()
                    .map(|p| (p.bpp * scale, p.quality))
                    .collect::<Vec<_>>(),
            );
            let t2 = curve(
                "test",
                &t.points
                    .iter()
                    .map(|p| (p.bpp * scale, p.quality))
                    .collect::<Vec<_>>(),
            );
            let scaled = bd_rate(&a2, &t2).unwrap().percent;
            assert_eq!(scaled, base, "scale {scale}");
        }
    }

    #[test]
    fn no_overlap_is_an_error() {
        let a = curve("a", &[(0.2, 0.1), (0.4, 0.2)]);
        let b = curve("b", &[(0.2, 0.8), (0.4, 0.9)]);
        assert!(matches!(bd_rate(&a, &b), Err(Error::NoQualityOverlap)));
    }

    #[test]
    fn non_monotone_quality_warns_but_computes() {
        let a = anchor();
        let t = curve(
            "test",
            &[(0.2, 0.60), (0.4, 0.58), (0.8, 0.80), (1.6, 0.88)],
        );
        let out = bd_rate(&a, &t).unwrap();
        assert!(out.monotonicity_warning);
        assert!(out.percent.is_finite());
    }

    #[test]
    fn interpolation_stays_within_knot_hull() {
        // monotone data: interpolant must not overshoot neighbors
        let x = vec![0.0, 1.0, 2.0, 5.0];
        let y = vec![0.0, 0.1, 3.0, 3.2];
        let p = Pchip::new(x.clone(), y.clone());
        for i in 0..x.len() - 1 {
            for k in 0..=20 {
                let q = x[i] + (x[i + 1] - x[i]) * k as f64 / 20.0;
                let v = p.eval(q);
                assert!(
                    v >= y[i] - 1e-12 && v <= y[i + 1] + 1e-12,
                    "overshoot at {q}: {v} outside [{}, {}]",
                    y[i],
                    y[i + 1]
                );
            }
        }
    }

    #[test]
    fn antisymmetry_identity_holds() {
        let a = anchor();
        let t = curve(
            "test",
            &[(0.25, 0.57), (0.5, 0.72), (0.9, 0.83), (1.7, 0.89)],
        );
        let ab = bd_rate(&a, &t).unwrap().percent;
        let ba = bd_rate(&t, &a).unwrap().percent;
        let reconstructed = -ba / (1.0 + ba / 100.0);
        assert!(
            (ab - reconstructed).abs() < 0.5,
            "ab={ab} reconstructed={reconstructed}"
        );
    }
}
