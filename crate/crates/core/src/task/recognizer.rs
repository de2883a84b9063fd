//! The frozen recognition model: a small conv backbone with named feature
//! taps, a segmentation head and a presence head. Pretrained once on clean
//! synthetic images, then used only through gradient-frozen forwards.

use super::data::{self, SyntheticSample, IMAGE_SIZE, NUM_SEG_CLASSES, NUM_SHAPE_CLASSES};
use crate::autodiff::{Group, Params, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{Conv, ConvT, ResBlock, LEAKY_SLOPE};
use crate::rng::{derive_seed, DetRng};
use crate::training::optim::{Adam, AdamConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RecognizerArch {
    pub stage_channels: [usize; 3],
    /// Residual blocks after each strided stage conv. Depth here is what
    /// makes encoder-side optimization through the frozen model hard.
    pub blocks_per_stage: usize,
}

impl Default for RecognizerArch {
    fn default() -> Self {
        RecognizerArch {
            stage_channels: [16, 32, 64],
            blocks_per_stage: 2,
        }
    }
}

pub const TAP_NAMES: [&str; 3] = ["stage1", "stage2", "stage3"];

#[derive(Clone, Debug)]
pub struct RecognitionModel {
    pub arch: RecognizerArch,
    stages: [Conv; 3],
    blocks: Vec<ResBlock>,
    seg_head: [ConvT; 3],
    presence_head: Conv,
}

/// Forward products: both heads plus the named intermediate features.
pub struct RecognizerOutput {
    pub seg_logits: Var,
    pub presence_logits: Var,
    pub taps: Vec<(&'static str, Var)>,
}

impl RecognitionModel {
    pub fn init(params: &mut Params, arch: &RecognizerArch, rng: &mut DetRng) -> Self {
        let [c1, c2, c3] = arch.stage_channels;
        let g = Group::Recognizer;
        let mut blocks = Vec::with_capacity(3 * arch.blocks_per_stage);
        for (stage, &c) in [c1, c2, c3].iter().enumerate() {
            for b in 0..arch.blocks_per_stage {
                blocks.push(ResBlock::init(
                    params,
                    &format!("recog.stage{}.rb{}", stage + 1, b),
                    g,
                    c,
                    rng,
                ));
            }
        }
        RecognitionModel {
            arch: arch.clone(),
            stages: [
                Conv::init(params, "recog.stage1", g, 3, c1, 3, 2, 1, rng),
                Conv::init(params, "recog.stage2", g, c1, c2, 3, 2, 1, rng),
                Conv::init(params, "recog.stage3", g, c2, c3, 3, 2, 1, rng),
            ],
            blocks,
            seg_head: [
                ConvT::init(params, "recog.seg0", g, c3, c2, 4, 2, 1, rng),
                ConvT::init(params, "recog.seg1", g, c2, c1, 4, 2, 1, rng),
                ConvT::init(params, "recog.seg2", g, c1, NUM_SEG_CLASSES, 4, 2, 1, rng),
            ],
            presence_head: Conv::init(
                params,
                "recog.presence",
                g,
                c3,
                NUM_SHAPE_CLASSES,
                1,
                1,
                0,
                rng,
            ),
        }
    }

    pub fn bind(params: &Params, arch: &RecognizerArch) -> Result<Self> {
        let mut blocks = Vec::with_capacity(3 * arch.blocks_per_stage);
        for stage in 1..=3 {
            for b in 0..arch.blocks_per_stage {
                blocks.push(ResBlock::bind(
                    params,
                    &format!("recog.stage{stage}.rb{b}"),
                )?);
            }
        }
        Ok(RecognitionModel {
            arch: arch.clone(),
            stages: [
                Conv::bind(params, "recog.stage1", 2, 1)?,
                Conv::bind(params, "recog.stage2", 2, 1)?,
                Conv::bind(params, "recog.stage3", 2, 1)?,
            ],
            blocks,
            seg_head: [
                ConvT::bind(params, "recog.seg0", 2, 1)?,
                ConvT::bind(params, "recog.seg1", 2, 1)?,
                ConvT::bind(params, "recog.seg2", 2, 1)?,
            ],
            presence_head: Conv::bind(params, "recog.presence", 1, 0)?,
        })
    }

    /// Expected [C,H,W] of a named tap for 64x64 inputs.
    pub fn tap_shape(&self, name: &str) -> Option<[usize; 3]> {
        let [c1, c2, c3] = self.arch.stage_channels;
        match name {
            "stage1" => Some([c1, 32, 32]),
            "stage2" => Some([c2, 16, 16]),
            "stage3" => Some([c3, 8, 8]),
            _ => None,
        }
    }

    /// Run the recognizer. With `frozen`, parameters enter the tape as
    /// constants: gradients still flow to the input image but never into
    /// recognizer weights.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Params,
        x: Var,
        frozen: bool,
    ) -> Result<RecognizerOutput> {
        let (seg, presence_logits, taps) = self.forward_select(tape, params, x, frozen, true)?;
        Ok(RecognizerOutput {
            seg_logits: seg.expect("requested"),
            presence_logits,
            taps,
        })
    }

    /// Forward with the segmentation head optional, so presence-only
    /// pipelines skip its cost.
    pub fn forward_select(
        &self,
        tape: &mut Tape,
        params: &Params,
        x: Var,
        frozen: bool,
        want_seg: bool,
    ) -> Result<(Option<Var>, Var, Vec<(&'static str, Var)>)> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != IMAGE_SIZE || shape[3] != IMAGE_SIZE {
            return Err(Error::InvalidArgument {
                op: "recognize",
                msg: format!("expected [N,3,{IMAGE_SIZE},{IMAGE_SIZE}], got {shape:?}"),
            });
        }
        let mut taps = Vec::with_capacity(3);
        let mut v = x;
        for (i, (stage, name)) in self.stages.iter().zip(TAP_NAMES).enumerate() {
            v = stage.forward(tape, params, v, frozen)?;
            v = tape.leaky_relu(v, LEAKY_SLOPE);
            for b in 0..self.arch.blocks_per_stage {
                v = self.blocks[i * self.arch.blocks_per_stage + b]
                    .forward(tape, params, v, frozen)?;
            }
            taps.push((name, v));
        }
        let deep = v;
        let seg = if want_seg {
            // decoder with skip connections from the matching stages
            let mut s = self.seg_head[0].forward(tape, params, deep, frozen)?;
            s = tape.add(s, taps[1].1)?;
            s = tape.leaky_relu(s, LEAKY_SLOPE);
            s = self.seg_head[1].forward(tape, params, s, frozen)?;
            s = tape.add(s, taps[0].1)?;
            s = tape.leaky_relu(s, LEAKY_SLOPE);
            Some(self.seg_head[2].forward(tape, params, s, frozen)?)
        } else {
            None
        };
        let p = self.presence_head.forward(tape, params, deep, frozen)?;
        let presence_logits = tape.global_max_pool(p)?;
        Ok((seg, presence_logits, taps))
    }
}

/// Hard labels distilled from the recognizer's own output on the original
/// images; gradient-free by construction (plain integer/float data).
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherLabels {
    /// [N * 64 * 64] argmax classes.
    pub seg: Vec<u32>,
    /// [N, 3] presence flags as 0.0/1.0.
    pub presence: Tensor,
}

pub fn teacher_labels(
    model: &RecognitionModel,
    params: &Params,
    images: &Tensor,
) -> Result<TeacherLabels> {
    teacher_labels_select(model, params, images, true)
}

/// Teacher labels with the segmentation argmax optional, for presence-only
/// pipelines.
pub fn teacher_labels_select(
    model: &RecognitionModel,
    params: &Params,
    images: &Tensor,
    want_seg: bool,
) -> Result<TeacherLabels> {
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let (seg_logits, presence_logits, _) =
        model.forward_select(&mut tape, params, x, true, want_seg)?;
    let seg = seg_logits
        .map(|s| argmax_seg(tape.value(s), tape.shape(s)))
        .unwrap_or_default();
    let pres_shape = tape.shape(presence_logits).to_vec();
    let presence = Tensor::new(
        pres_shape,
        tape.value(presence_logits)
            .iter()
            .map(|&z| if z > 0.0 { 1.0 } else { 0.0 })
            .collect(),
    )?;
    Ok(TeacherLabels { seg, presence })
}

/// Per-position argmax over the class axis of [N,C,H,W] logits.
pub fn argmax_seg(values: &[f32], shape: &[usize]) -> Vec<u32> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let spatial = h * w;
    let mut out = vec![0u32; n * spatial];
    for i in 0..n {
        for s in 0..spatial {
            let mut best = 0u32;
            let mut bestv = values[i * c * spatial + s];
            for cls in 1..c {
                let v = values[i * c * spatial + cls * spatial + s];
                if v > bestv {
                    bestv = v;
                    best = cls as u32;
                }
            }
            out[i * spatial + s] = best;
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub seed: u64,
    pub data_seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub n_train: u64,
    pub n_val: u64,
    pub miou_gate: f64,
    pub acc_gate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            seed: 1,
            data_seed: 1000,
            steps: 750,
            batch_size: 8,
            lr: 1e-3,
            n_train: 256,
            n_val: 48,
            miou_gate: 0.85,
            acc_gate: 0.95,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    pub miou: f64,
    pub presence_acc: f64,
    pub final_loss: f64,
    pub steps: usize,
}

/// Train a fresh recognizer on clean images with ground-truth labels, then
/// verify it clears the quality gate on a held-out seed split. Fails rather
/// than returning a sub-gate model.
pub fn pretrain_recognizer(
    cfg: &PretrainConfig,
    arch: &RecognizerArch,
) -> Result<(Params, RecognitionModel, PretrainReport)> {
    let mut params = Params::new();
    let mut init_rng = DetRng::new(derive_seed(cfg.seed, "recognizer-init"));
    let model = RecognitionModel::init(&mut params, arch, &mut init_rng);
    let mut batch_rng = DetRng::new(derive_seed(cfg.seed, "recognizer-batches"));
    let train_seed = derive_seed(cfg.data_seed, "pretrain");
    let mut adam = Adam::new(AdamConfig::default());

    let samples: Vec<SyntheticSample> = (0..cfg.n_train)
        .map(|i| data::generate_sample(train_seed, i))
        .collect();

    let mut final_loss = f64::NAN;
    for step in 0..cfg.steps {
        let batch: Vec<&SyntheticSample> = (0..cfg.batch_size)
            .map(|_| &samples[batch_rng.below(samples.len())])
            .collect();
        let images = data::batch_images(&batch);
        let seg_labels: Vec<u32> = batch.iter().flat_map(|s| s.seg_mask.clone()).collect();
        let presence: Vec<f32> = batch.iter().flat_map(|s| s.presence_f32()).collect();
        let presence =
            Tensor::new(vec![cfg.batch_size, NUM_SHAPE_CLASSES], presence)?;

        let mut tape = Tape::new();
        let x = tape.constant(images);
        let out = model.forward(&mut tape, &params, x, false)?;
        let seg_loss = tape.softmax_cross_entropy(out.seg_logits, &seg_labels)?;
        let pres_loss = tape.bce_with_logits(out.presence_logits, &presence)?;
        let pres_scaled = tape.scale(pres_loss, 2.0);
        let loss = tape.add(seg_loss, pres_scaled)?;
        let loss_val = tape.scalar_f64(loss);
        if !loss_val.is_finite() {
            let loc = tape
                .first_non_finite()
                .map(|(i, d)| format!("node {i}: {d}"))
                .unwrap_or_else(|| "loss".into());
            return Err(Error::NonFinite {
                step,
                location: loc,
            });
        }
        final_loss = loss_val;
        let grads = tape.backward(loss)?;
        let by_param = tape.param_grads(&grads);
        adam.step(&mut params, &by_param, cfg.lr);
    }

    let (miou_val, presence_acc) = evaluate_recognizer(
        &model,
        &params,
        derive_seed(cfg.data_seed, "pretrain-val"),
        cfg.n_val,
    )?;
    if miou_val < cfg.miou_gate || presence_acc < cfg.acc_gate {
        return Err(Error::PretrainGate {
            miou: miou_val,
            miou_gate: cfg.miou_gate,
            presence_acc,
            acc_gate: cfg.acc_gate,
        });
    }
    Ok((
        params,
        model,
        PretrainReport {
            miou: miou_val,
            presence_acc,
            final_loss,
            steps: cfg.steps,
        },
    ))
}

/// mIoU and presence accuracy of the (frozen) recognizer on clean images.
pub fn evaluate_recognizer(
    model: &RecognitionModel,
    params: &Params,
    val_seed: u64,
    n_val: u64,
) -> Result<(f64, f64)> {
    let mut miou_acc = 0.0;
    let mut pres_pred = Vec::new();
    let mut pres_gt = Vec::new();
    for i in 0..n_val {
        let s = data::generate_sample(val_seed, i);
        let mut tape = Tape::new();
        let x = tape.constant(data::batch_images(&[&s]));
        let out = model.forward(&mut tape, params, x, true)?;
        let pred = argmax_seg(tape.value(out.seg_logits), tape.shape(out.seg_logits));
        miou_acc += metrics::miou(&pred, &s.seg_mask, NUM_SEG_CLASSES)?;
        for (k, &z) in tape.value(out.presence_logits).iter().enumerate() {
            pres_pred.push(z > 0.0);
            pres_gt.push(s.presence[k]);
        }
    }
    Ok((
        miou_acc / n_val as f64,
        metrics::presence_accuracy(&pres_pred, &pres_gt),
    ))
}
