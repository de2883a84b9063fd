//! Quantization bridges the continuous encoder output and the discrete
//! symbols the coder ships: additive uniform noise for the rate term during
//! training, straight-through rounding for paths that must stay
//! differentiable, and plain rounding at evaluation.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use crate::rng::DetRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantizeMode {
    /// y + u, u ~ Uniform(-0.5, 0.5); training-only surrogate for rounding.
    Noise,
    /// Nearest integer (ties to even), no gradient.
    Round,
    /// Nearest integer forward, identity gradient backward.
    Ste,
}

pub fn quantize(
    tape: &mut Tape,
    y: Var,
    mode: QuantizeMode,
    rng: Option<&mut DetRng>,
) -> Result<Var> {
    match mode {
        QuantizeMode::Noise => {
            let rng = rng.expect("noise quantization needs an rng");
            let shape = tape.shape(y).to_vec();
            let n: usize = shape.iter().product();
            let noise: Vec<f64> = (0..n).map(|_| rng.uniform_in(-0.5, 0.5)).collect();
            let u = tape.constant(Tensor::from_f64_slice(&shape, &noise)?);
            tape.add(y, u)
        }
        QuantizeMode::Round => {
            let r = tape.ste_round(y);
            Ok(tape.detach(r))
        }
        QuantizeMode::Ste => Ok(tape.ste_round(y)),
    }
}
