//! Checkpoint evaluation: rounding quantization, exact rate estimates,
//! optional real range coding, and task quality against both ground truth
//! and teacher labels.

use super::{miou, presence_accuracy, RDPoint};
use crate::autodiff::{Params, Tape, Tensor};
use crate::codec::{CodecModel, LatentCode};
use crate::coder::{build_cdf, rc_encode};
use crate::error::Result;
use crate::rng::derive_seed;
use crate::task::{
    self, argmax_seg, teacher_labels_select, RecognitionModel, TaskKind, NUM_SEG_CLASSES,
    NUM_SHAPE_CLASSES,
};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
    pub n_images: u64,
    /// Run the range coder per image and report real payload bits.
    pub real_coding: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 9000,
            n_images: 64,
            real_coding: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalDetail {
    pub index: u64,
    pub estimated_bits: f64,
    pub payload_bits: Option<u64>,
    pub quality_gt: f64,
    pub quality_teacher: f64,
    pub latent: LatentCode,
}

#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub task: TaskKind,
    pub n_images: u64,
    pub bpp_estimated: f64,
    pub bpp_real: Option<f64>,
    pub quality_gt: f64,
    pub quality_teacher: f64,
    pub details: Vec<EvalDetail>,
}

impl EvalSummary {
    /// Headline operating point: real-coded bpp when available, estimated
    /// otherwise; quality against ground truth.
    pub fn rd_point(&self, label: impl Into<String>) -> RDPoint {
        RDPoint {
            bpp: self.bpp_real.unwrap_or(self.bpp_estimated),
            quality: self.quality_gt,
            label: label.into(),
        }
    }
}

/// Evaluate a codec + frozen recognizer pair over a held-out split.
pub fn eval_model(
    params: &Params,
    codec: &CodecModel,
    recognizer: &RecognitionModel,
    task_kind: TaskKind,
    cfg: &EvalConfig,
) -> Result<EvalSummary> {
    let eval_seed = derive_seed(cfg.seed, "eval");
    let snapshot = codec.entropy.snapshot(params);
    let digest = snapshot.digest();
    let table = cfg.real_coding.then(|| build_cdf(&snapshot));
    let pixels = (task::IMAGE_SIZE * task::IMAGE_SIZE) as f64;
    let want_seg = task_kind == TaskKind::Segmentation;

    let mut details = Vec::with_capacity(cfg.n_images as usize);
    let mut est_bits_total = 0.0;
    let mut real_bits_total = 0u64;
    let mut q_gt_acc = 0.0;
    let mut q_teacher_acc = 0.0;
    let mut pres_pred = Vec::new();
    let mut pres_gt = Vec::new();
    let mut pres_teacher = Vec::new();

    for i in 0..cfg.n_images {
        let sample = task::generate_sample(eval_seed, i);
        let images = task::batch_images(&[&sample]);
        let teacher = teacher_labels_select(recognizer, params, &images, want_seg)?;

        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let y = codec.encode(&mut tape, params, x)?;
        let rounded = tape.ste_round(y);
        let latent_tensor =
            Tensor::new(tape.shape(rounded).to_vec(), tape.value(rounded).to_vec())?;
        let latent = LatentCode::from_tensor(&snapshot, &latent_tensor)?;
        let est_bits = snapshot.rate_bits_exact(&latent.values, latent.channels);
        let payload_bits = match &table {
            Some(t) => Some(rc_encode(&latent, t, digest)?.payload_bits()),
            None => None,
        };

        let xhat = codec.decode(&mut tape, params, rounded)?;
        let (seg_logits, presence_logits, _) =
            recognizer.forward_select(&mut tape, params, xhat, true, want_seg)?;

        let (q_gt, q_teacher) = match task_kind {
            TaskKind::Segmentation => {
                let s = seg_logits.expect("requested");
                let pred = argmax_seg(tape.value(s), tape.shape(s));
                (
                    miou(&pred, &sample.seg_mask, NUM_SEG_CLASSES)?,
                    miou(&pred, &teacher.seg, NUM_SEG_CLASSES)?,
                )
            }
            TaskKind::Classification => {
                let logits = tape.value(presence_logits);
                let mut img_pred = Vec::with_capacity(NUM_SHAPE_CLASSES);
                for k in 0..NUM_SHAPE_CLASSES {
                    let p = logits[k] > 0.0;
                    img_pred.push(p);
                    pres_pred.push(p);
                    pres_gt.push(sample.presence[k]);
                    pres_teacher.push(teacher.presence.data()[k] > 0.5);
                }
                let gt: Vec<bool> = sample.presence.to_vec();
                let teach: Vec<bool> = teacher.presence.data().iter().map(|&v| v > 0.5).collect();
                (
                    presence_accuracy(&img_pred, &gt),
                    presence_accuracy(&img_pred, &teach),
                )
            }
        };
        q_gt_acc += q_gt;
        q_teacher_acc += q_teacher;
        est_bits_total += est_bits;
        real_bits_total += payload_bits.unwrap_or(0);

        details.push(EvalDetail {
            index: i,
            estimated_bits: est_bits,
            payload_bits,
            quality_gt: q_gt,
            quality_teacher: q_teacher,
            latent,
        });
    }

    let n = cfg.n_images.max(1) as f64;
    Ok(EvalSummary {
        task: task_kind,
        n_images: cfg.n_images,
        bpp_estimated: est_bits_total / n / pixels,
        bpp_real: cfg
            .real_coding
            .then_some(real_bits_total as f64 / n / pixels),
        quality_gt: q_gt_acc / n,
        quality_teacher: q_teacher_acc / n,
        details,
    })
}
