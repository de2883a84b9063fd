//! Per-channel factorized entropy model: a discretized logistic with learned
//! location and log-scale per latent channel. The same distribution drives
//! the differentiable rate term, the exact f64 rate/bit-map path, and the
//! range coder's frequency tables.

use crate::autodiff::{Group, ParamId, Params, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::fnv1a;

/// Probabilities below this are clamped so rate stays finite.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

/// Fresh models start with scale 4: wide enough that the coder's
/// frequency-floored tails stay a negligible share of the mass, and in the
/// range of typical latent magnitudes early in training.
pub const DEFAULT_LOG_SCALE: f64 = 1.3862943611198906; // ln 4

#[derive(Clone, Debug)]
pub struct FactorizedEntropyModel {
    pub channels: usize,
    /// Symbols live in [-support, support].
    pub support: i32,
    pub mu: ParamId,
    pub log_scale: ParamId,
}

impl FactorizedEntropyModel {
    pub fn init(params: &mut Params, prefix: &str, channels: usize, support: i32) -> Self {
        let mu = params.add(
            format!("{prefix}.mu"),
            Group::EntropyModel,
            Tensor::zeros(&[channels]),
        );
        let log_scale = params.add(
            format!("{prefix}.log_scale"),
            Group::EntropyModel,
            Tensor::full(&[channels], DEFAULT_LOG_SCALE as f32),
        );
        FactorizedEntropyModel {
            channels,
            support,
            mu,
            log_scale,
        }
    }

    pub fn bind(params: &Params, prefix: &str, channels: usize, support: i32) -> Result<Self> {
        let find = |name: String| {
            params
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        Ok(FactorizedEntropyModel {
            channels,
            support,
            mu: find(format!("{prefix}.mu"))?,
            log_scale: find(format!("{prefix}.log_scale"))?,
        })
    }

    /// p(v) = sigma((v+0.5-mu)/s) - sigma((v-0.5-mu)/s), floored. Valid for
    /// noisy (training) and integer (eval) inputs. Differentiable w.r.t. v,
    /// mu and log-scale.
    pub fn likelihood(&self, tape: &mut Tape, params: &Params, v: Var) -> Result<Var> {
        let rank = tape.shape(v).len();
        debug_assert!(rank == 3 || rank == 4, "latent must be [C,h,w] or [N,C,h,w]");
        let mu = tape.param(params, self.mu);
        let mu = tape.reshape(mu, &[self.channels, 1, 1])?;
        let log_s = tape.param(params, self.log_scale);
        let neg_log_s = tape.neg(log_s);
        let inv_s = tape.exp(neg_log_s);
        let inv_s = tape.reshape(inv_s, &[self.channels, 1, 1])?;

        let centered = tape.sub(v, mu)?;
        let hi_arg = tape.add_scalar(centered, 0.5);
        let hi_arg = tape.mul(hi_arg, inv_s)?;
        let hi = tape.sigmoid(hi_arg);
        let lo_arg = tape.add_scalar(centered, -0.5);
        let lo_arg = tape.mul(lo_arg, inv_s)?;
        let lo = tape.sigmoid(lo_arg);
        let p = tape.sub(hi, lo)?;
        Ok(tape.clamp_min(p, LIKELIHOOD_FLOOR))
    }

    /// R = -sum(log2 p(v)), in bits.
    pub fn rate_bits(&self, tape: &mut Tape, params: &Params, v: Var) -> Result<Var> {
        let p = self.likelihood(tape, params, v)?;
        let s = tape.sum_log2(p)?;
        Ok(tape.neg(s))
    }

    /// Capture current parameter values for the non-tape f64 evaluation path
    /// (exact rates, bit maps, coder tables, digests).
    pub fn snapshot(&self, params: &Params) -> EntropySnapshot {
        EntropySnapshot {
            support: self.support,
            mu: params.value(self.mu).map_to_f64(),
            scale: params
                .value(self.log_scale)
                .map_to_f64()
                .into_iter()
                .map(f64::exp)
                .collect(),
        }
    }
}

/// Frozen f64 view of the entropy model.
#[derive(Clone, Debug)]
pub struct EntropySnapshot {
    pub support: i32,
    pub mu: Vec<f64>,
    pub scale: Vec<f64>,
}

fn logistic_cdf(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl EntropySnapshot {
    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    pub fn n_symbols(&self) -> usize {
        (2 * self.support + 1) as usize
    }

    /// Likelihood of value `v` on channel `c`, same formula as the training
    /// graph (floored logistic bin mass, tails not folded).
    pub fn likelihood(&self, c: usize, v: f64) -> f64 {
        let (mu, s) = (self.mu[c], self.scale[c]);
        let p = logistic_cdf((v + 0.5 - mu) / s) - logistic_cdf((v - 0.5 - mu) / s);
        p.max(LIKELIHOOD_FLOOR)
    }

    /// Discretized PMF over the support with both tail masses folded into the
    /// endpoint bins; sums to 1 by construction.
    pub fn pmf_folded(&self, c: usize) -> Vec<f64> {
        let (mu, s) = (self.mu[c], self.scale[c]);
        let lo = -self.support;
        let hi = self.support;
        let mut pmf = Vec::with_capacity(self.n_symbols());
        for v in lo..=hi {
            let upper = if v == hi {
                1.0
            } else {
                logistic_cdf((v as f64 + 0.5 - mu) / s)
            };
            let lower = if v == lo {
                0.0
            } else {
                logistic_cdf((v as f64 - 0.5 - mu) / s)
            };
            pmf.push((upper - lower).max(0.0));
        }
        pmf
    }

    /// Exact code-length estimate in bits for an integer latent, matching
    /// the differentiable rate term evaluated at the same values.
    pub fn rate_bits_exact(&self, values: &[i32], channels: usize) -> f64 {
        let per_channel = values.len() / channels;
        let mut bits = 0.0;
        for c in 0..channels {
            for &v in &values[c * per_channel..(c + 1) * per_channel] {
                bits -= self.likelihood(c, v as f64).log2();
            }
        }
        bits
    }

    pub fn digest(&self) -> u64 {
        let mut bytes = Vec::with_capacity(16 + self.mu.len() * 8);
        bytes.extend_from_slice(&(self.channels() as u32).to_le_bytes());
        bytes.extend_from_slice(&self.support.to_le_bytes());
        for &m in &self.mu {
            bytes.extend_from_slice(&(m as f32).to_le_bytes());
        }
        for &s in &self.scale {
            bytes.extend_from_slice(&(s as f32).to_le_bytes());
        }
        fnv1a(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_snapshot(channels: usize) -> EntropySnapshot {
        EntropySnapshot {
            support: 64,
            mu: vec![0.0; channels],
            scale: vec![1.0; channels],
        }
    }

    #[test]
    fn centered_likelihood_matches_logistic_mass() {
        let snap = default_snapshot(1);
        // sigma(0.5) - sigma(-0.5)
        let expect = logistic_cdf(0.5) - logistic_cdf(-0.5);
        assert!((snap.likelihood(0, 0.0) - expect).abs() < 1e-12);
        assert!((expect - 0.2449).abs() < 1e-4);
    }

    #[test]
    fn folded_pmf_sums_to_one() {
        let snap = EntropySnapshot {
            support: 64,
            mu: vec![0.0, 1.7, -3.2],
            scale: vec![1.0, 0.3, 5.0],
        };
        for c in 0..3 {
            let total: f64 = snap.pmf_folded(c).iter().sum();
            assert!((total - 1.0).abs() < 1e-6, "channel {c}: {total}");
        }
    }

    #[test]
    fn likelihood_in_unit_interval() {
        let snap = default_snapshot(1);
        for v in -64..=64 {
            let p = snap.likelihood(0, v as f64);
            assert!(p > 0.0 && p <= 1.0);
        }
    }

    #[test]
    fn graph_likelihood_matches_snapshot() {
        use crate::autodiff::Params;
        let mut params = Params::new();
        let model = FactorizedEntropyModel::init(&mut params, "entropy", 2, 64);
        params.value_mut(model.mu).data_mut()[1] = 0.7;
        params.value_mut(model.log_scale).data_mut()[0] = -0.4;
        let snap = model.snapshot(&params);

        let mut tape = Tape::new();
        let v = tape.constant(
            Tensor::from_f64_slice(&[2, 1, 2], &[0.0, 3.0, -2.0, 1.0]).unwrap(),
        );
        let p = model.likelihood(&mut tape, &params, v).unwrap();
        let got = tape.value(p);
        let want = [
            snap.likelihood(0, 0.0),
            snap.likelihood(0, 3.0),
            snap.likelihood(1, -2.0),
            snap.likelihood(1, 1.0),
        ];
        for (g, w) in got.iter().zip(want) {
            assert!((*g as f64 - w).abs() < 1e-6, "{g} vs {w}");
        }
    }

    #[test]
    fn digest_tracks_parameters() {
        let a = default_snapshot(2);
        let mut b = default_snapshot(2);
        assert_eq!(a.digest(), b.digest());
        b.mu[0] = 0.25;
        assert_ne!(a.digest(), b.digest());
    }
}
