//! Central-finite-difference verification of analytic gradients.

use super::real::Real;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
    /// (flat index, analytic, numeric) of the worst element.
    pub worst: Option<(usize, f64, f64)>,
}

/// Compare the tape gradient of a scalar-valued function against central
/// differences at `x`. Relative error uses max(|a|,|n|) as denominator;
/// elements where both magnitudes fall below `abs_floor` auto-pass (they sit
/// under finite-difference resolution).
pub fn grad_check<T: Real>(
    f: impl Fn(&mut Tape<T>, Var) -> Result<Var>,
    x: &Tensor<T>,
    eps: f64,
    tol: f64,
    abs_floor: f64,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let xv = tape.var(x.clone());
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<f64> = match grads.get(xv) {
        Some(gs) => gs.iter().map(|v| v.to_f64()).collect(),
        None => vec![0.0; x.numel()],
    };

    let eval = |probe: &Tensor<T>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.var(probe.clone());
        let l = f(&mut t, v)?;
        Ok(t.scalar_f64(l))
    };

    let mut max_rel = 0.0f64;
    let mut worst = None;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += T::from_f64(eps);
        let mut minus = x.clone();
        minus.data_mut()[i] -= T::from_f64(eps);
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let a = analytic[i];
        if a.abs() < abs_floor && numeric.abs() < abs_floor {
            continue;
        }
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
        if rel > max_rel {
            max_rel = rel;
            worst = Some((i, a, numeric));
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        checked: x.numel(),
        tol,
        passed: max_rel <= tol,
        worst,
    })
}
