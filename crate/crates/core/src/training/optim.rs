//! Adam with bias correction, plus the polynomial learning-rate decay.

use crate::autodiff::{ParamId, Params, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Slot {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Optimizer state; slots materialize lazily per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    slots: BTreeMap<ParamId, Slot>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over the given gradients. Parameters without a gradient
    /// entry are untouched.
    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<ParamId, Tensor>, lr: f64) {
        self.step_scaled(params, grads, |_| lr)
    }

    /// Update with a per-parameter learning rate (e.g. a higher rate for the
    /// entropy model's scalar distribution parameters).
    pub fn step_scaled(
        &mut self,
        params: &mut Params,
        grads: &BTreeMap<ParamId, Tensor>,
        lr_for: impl Fn(ParamId) -> f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.cfg.beta1 as f32;
        let b2 = self.cfg.beta2 as f32;
        let eps = self.cfg.eps as f32;
        let bias1 = 1.0 - (self.cfg.beta1 as f32).powi(t);
        let bias2 = 1.0 - (self.cfg.beta2 as f32).powi(t);
        for (&pid, g) in grads {
            let lr = lr_for(pid) as f32;
            let slot = self.slots.entry(pid).or_insert_with(|| Slot {
                m: vec![0.0; g.numel()],
                v: vec![0.0; g.numel()],
            });
            let value = params.value_mut(pid);
            debug_assert_eq!(value.numel(), g.numel());
            let data = value.data_mut();
            for i in 0..data.len() {
                let gi = g.data()[i];
                slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * gi;
                slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * gi * gi;
                let mhat = slot.m[i] / bias1;
                let vhat = slot.v[i] / bias2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Binary state serialization: step counter plus (id, m, v) triples.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.slots.len() as u32).to_le_bytes());
        for (pid, slot) in &self.slots {
            out.extend_from_slice(&(pid.index() as u32).to_le_bytes());
            out.extend_from_slice(&(slot.m.len() as u32).to_le_bytes());
            for &x in &slot.m {
                out.extend_from_slice(&x.to_le_bytes());
            }
            for &x in &slot.v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(cfg: AdamConfig, bytes: &[u8], params: &Params) -> Option<Self> {
        let mut pos = 0usize;
        let rd_u64 = |pos: &mut usize| {
            let v = u64::from_le_bytes(bytes.get(*pos..*pos + 8)?.try_into().ok()?);
            *pos += 8;
            Some(v)
        };
        let rd_u32 = |pos: &mut usize| {
            let v = u32::from_le_bytes(bytes.get(*pos..*pos + 4)?.try_into().ok()?);
            *pos += 4;
            Some(v)
        };
        let step = rd_u64(&mut pos)?;
        let n = rd_u32(&mut pos)? as usize;
        let mut slots = BTreeMap::new();
        for _ in 0..n {
            let idx = rd_u32(&mut pos)? as usize;
            let len = rd_u32(&mut pos)? as usize;
            let rd_vec = |pos: &mut usize| -> Option<Vec<f32>> {
                let mut v = Vec::with_capacity(len);
                for _ in 0..len {
                    let x = f32::from_le_bytes(bytes.get(*pos..*pos + 4)?.try_into().ok()?);
                    *pos += 4;
                    v.push(x);
                }
                Some(v)
            };
            let m = rd_vec(&mut pos)?;
            let v = rd_vec(&mut pos)?;
            let pid = params.ids().nth(idx)?;
            slots.insert(pid, Slot { m, v });
        }
        Some(Adam { cfg, step, slots })
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Poly { power: f64, start_epoch: usize },
}

/// Learning rate at `epoch` of `total_epochs`: constant until the decay
/// start, then lr0 * (1 - (e-start)/(total-start))^power. Strictly positive
/// at the final epoch, monotone non-increasing.
pub fn poly_lr(lr0: f64, schedule: Schedule, epoch: usize, total_epochs: usize) -> f64 {
    match schedule {
        Schedule::Constant => lr0,
        Schedule::Poly { power, start_epoch } => {
            if epoch < start_epoch || total_epochs <= start_epoch {
                lr0
            } else {
                let frac =
                    (epoch - start_epoch) as f64 / (total_epochs - start_epoch) as f64;
                lr0 * (1.0 - frac).max(0.0).powf(power)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Group;

    fn one_param() -> (Params, ParamId) {
        let mut p = Params::new();
        let id = p.add("w", Group::Encoder, Tensor::full(&[1], 1.0));
        (p, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut params, id) = one_param();
        let mut adam = Adam::new(AdamConfig::default());
        let mut grads = BTreeMap::new();
        grads.insert(id, Tensor::zeros(&[1]));
        adam.step(&mut params, &grads, 0.1);
        assert_eq!(params.value(id).data(), &[1.0]);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // g=1, beta1=0.9, beta2=0.999: m=0.1, v=0.001, mhat=1, vhat=1,
        // delta = lr / (1 + eps)
        let (mut params, id) = one_param();
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg);
        let mut grads = BTreeMap::new();
        grads.insert(id, Tensor::full(&[1], 1.0));
        let lr = 0.01;
        adam.step(&mut params, &grads, lr);
        let expected = {
            let m = 0.1f32;
            let v = 0.001f32;
            let mhat = m / (1.0 - 0.9);
            let vhat = v / (1.0 - 0.999);
            1.0 - 0.01 * mhat / (vhat.sqrt() + 1e-8)
        };
        assert!((params.value(id).data()[0] - expected).abs() < 1e-7);
        // magnitude is lr times the gradient sign
        assert!((params.value(id).data()[0] - (1.0 - lr as f32)).abs() < 1e-4);
    }

    #[test]
    fn state_serialization_roundtrips_exactly() {
        let (mut params, id) = one_param();
        let mut adam = Adam::new(AdamConfig::default());
        let mut grads = BTreeMap::new();
        grads.insert(id, Tensor::full(&[1], 0.37));
        for _ in 0..5 {
            adam.step(&mut params, &grads, 0.003);
        }
        let bytes = adam.to_bytes();
        let back = Adam::from_bytes(AdamConfig::default(), &bytes, &params).unwrap();
        assert_eq!(back.step, adam.step);
        assert_eq!(back.to_bytes(), bytes);

        // trajectories continue identically
        let mut p2 = params.clone();
        let mut a1 = adam;
        let mut a2 = back;
        a1.step(&mut params, &grads, 0.003);
        a2.step(&mut p2, &grads, 0.003);
        assert_eq!(params.value(id).data(), p2.value(id).data());
    }

    #[test]
    fn poly_schedule_shape() {
        let s = Schedule::Poly {
            power: 1.0,
            start_epoch: 0,
        };
        assert_eq!(poly_lr(0.1, s, 0, 10), 0.1);
        assert!((poly_lr(0.1, s, 5, 10) - 0.05).abs() < 1e-12);
        let last = poly_lr(0.1, s, 9, 10);
        assert!(last > 0.0 && last < 0.011);

        let delayed = Schedule::Poly {
            power: 2.0,
            start_epoch: 4,
        };
        assert_eq!(poly_lr(0.1, delayed, 3, 10), 0.1);
        assert!(poly_lr(0.1, delayed, 8, 10) < 0.1);

        // monotone non-increasing
        let mut prev = f64::INFINITY;
        for e in 0..10 {
            let lr = poly_lr(0.1, s, e, 10);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
