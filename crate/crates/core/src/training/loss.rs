//! Builds the loss graph for every variant on one batch. The rate term runs
//! on noise-quantized latents during training; the decoder and auxiliary
//! paths consume the straight-through-rounded latent so their task gradients
//! reach the encoder through the bottleneck.

use super::{LossConfig, LossTerms, LossVariant};
use crate::autodiff::{Params, Tape, Tensor, Var};
use crate::codec::{quantize, CodecModel, QuantizeMode};
use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::task::recognizer::TeacherLabels;
use crate::task::{AuxPosition, AuxiliaryBranch, RecognitionModel, TaskKind, AUX_TASK_TAP};

pub struct Models<'a> {
    pub codec: &'a CodecModel,
    pub recognizer: Option<&'a RecognitionModel>,
    pub aux: Option<&'a AuxiliaryBranch>,
}

pub struct LossBuild {
    /// Scalar graph node for backward.
    pub loss: Var,
    /// The additive auxiliary piece lambda*alpha*E_aux, kept separate so the
    /// routing audit can backward it in isolation.
    pub aux_term: Option<Var>,
    /// Decoded image, for metric extraction on evaluation passes.
    pub xhat: Var,
    pub terms: LossTerms,
}

/// Forward one batch under `cfg`. `quant_rng` present means training mode
/// (noise for the rate term, STE for the decode path); absent means
/// evaluation mode (plain rounding everywhere).
#[allow(clippy::too_many_arguments)]
pub fn build_loss(
    tape: &mut Tape,
    params: &Params,
    models: &Models,
    images: &Tensor,
    teachers: Option<&TeacherLabels>,
    task: TaskKind,
    cfg: &LossConfig,
    mut quant_rng: Option<&mut DetRng>,
) -> Result<LossBuild> {
    cfg.validate()?;
    let codec = models.codec;
    let shape = images.shape().to_vec();
    let pixels = (shape[0] * shape[2] * shape[3]) as f64;

    let x = tape.constant(images.clone());
    let y = codec.encode(tape, params, x)?;

    let train_mode = quant_rng.is_some();
    let y_rate = if let Some(rng) = quant_rng.as_deref_mut() {
        quantize(tape, y, QuantizeMode::Noise, Some(rng))?
    } else {
        quantize(tape, y, QuantizeMode::Round, None)?
    };
    let y_hat = if train_mode {
        quantize(tape, y, QuantizeMode::Ste, None)?
    } else {
        quantize(tape, y, QuantizeMode::Round, None)?
    };

    let r_bits = codec.entropy.rate_bits(tape, params, y_rate)?;
    let r_bpp = tape.scale(r_bits, 1.0 / pixels);

    let (xhat, dec_penultimate) = codec.decode_taps(tape, params, y_hat)?;

    let mut terms = LossTerms {
        lambda: cfg.lambda,
        alpha: cfg.alpha,
        r_bits: tape.scalar_f64(r_bits),
        r_bpp: tape.scalar_f64(r_bpp),
        ..LossTerms::default()
    };

    let needs_recognizer = cfg.variant.uses_recognizer();
    let recognizer = match (needs_recognizer, models.recognizer) {
        (true, Some(r)) => Some(r),
        (true, None) => {
            return Err(Error::Config(format!(
                "loss variant {} needs a pretrained recognizer",
                cfg.variant.as_str()
            )))
        }
        (false, _) => None,
    };

    // distortion pieces, all scalar vars
    let mut weighted_d: Option<Var> = None;
    let mut add_weighted = |tape: &mut Tape, term: Var| -> Result<()> {
        weighted_d = Some(match weighted_d {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
        Ok(())
    };
    let mut aux_term_scaled = None;

    match cfg.variant {
        LossVariant::RdImage => {
            let d = tape.mse(xhat, x)?;
            terms.d_image = tape.scalar_f64(d);
            add_weighted(tape, d)?;
        }
        LossVariant::Distill => {
            let recognizer = recognizer.expect("checked above");
            let want_seg = false;
            let (_, _, taps_hat) =
                recognizer.forward_select(tape, params, xhat, true, want_seg)?;
            let (_, _, taps_ref) = recognizer.forward_select(tape, params, x, true, want_seg)?;
            let mut d_total: Option<Var> = None;
            for layer in &cfg.distill_layers {
                let hat = taps_hat
                    .iter()
                    .find(|(n, _)| n == layer)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| Error::Config(format!("unknown tap name {layer}")))?;
                let reference = taps_ref
                    .iter()
                    .find(|(n, _)| n == layer)
                    .map(|(_, v)| *v)
                    .expect("same tap set");
                let reference = tape.detach(reference);
                let d = tape.mse(hat, reference)?;
                d_total = Some(match d_total {
                    Some(acc) => tape.add(acc, d)?,
                    None => d,
                });
            }
            let d = d_total.expect("validated non-empty");
            terms.d_distill = tape.scalar_f64(d);
            add_weighted(tape, d)?;
        }
        LossVariant::Task | LossVariant::TaskAux | LossVariant::TaskAuxMse => {
            let recognizer = recognizer.expect("checked above");
            let teachers = teachers.ok_or_else(|| {
                Error::Config("task-loss variants need teacher labels".into())
            })?;
            let want_seg = task == TaskKind::Segmentation;
            let (seg_logits, presence_logits, taps) =
                recognizer.forward_select(tape, params, xhat, true, want_seg)?;
            let e_main = task_loss(tape, task, seg_logits, presence_logits, teachers)?;
            terms.d_task = tape.scalar_f64(e_main);
            add_weighted(tape, e_main)?;

            if cfg.variant.uses_aux() {
                let aux = models.aux.ok_or_else(|| {
                    Error::Config("TaskAux variants need an auxiliary branch".into())
                })?;
                if aux.position != cfg.position {
                    return Err(Error::Config(format!(
                        "loss config position {} does not match branch position {}",
                        cfg.position.as_str(),
                        aux.position.as_str()
                    )));
                }
                let tap = match cfg.position {
                    AuxPosition::AuxEnc => y_hat,
                    AuxPosition::AuxDec => dec_penultimate,
                    AuxPosition::AuxTask => taps
                        .iter()
                        .find(|(n, _)| *n == AUX_TASK_TAP)
                        .map(|(_, v)| *v)
                        .expect("recognizer taps are static"),
                };
                let aux_logits = aux.forward(tape, params, tap)?;
                let (aux_seg, aux_presence) = match task {
                    TaskKind::Segmentation => (Some(aux_logits), aux_logits),
                    TaskKind::Classification => (None, aux_logits),
                };
                let e_aux = task_loss(tape, task, aux_seg, aux_presence, teachers)?;
                terms.d_aux = tape.scalar_f64(e_aux);
                let scaled = tape.scale(e_aux, cfg.alpha);
                add_weighted(tape, scaled)?;
                aux_term_scaled = Some(tape.scale(e_aux, cfg.lambda * cfg.alpha));
            }
            if cfg.variant == LossVariant::TaskAuxMse {
                let d = tape.mse(xhat, x)?;
                terms.d_image = tape.scalar_f64(d);
                add_weighted(tape, d)?;
            }
        }
    }

    let d = weighted_d.expect("every variant adds a distortion");
    let d_scaled = tape.scale(d, cfg.lambda);
    let loss = tape.add(r_bpp, d_scaled)?;
    terms.total = terms.recombine(cfg.variant);

    Ok(LossBuild {
        loss,
        aux_term: aux_term_scaled,
        xhat,
        terms,
    })
}

/// Concrete task loss: pixelwise softmax cross-entropy against teacher
/// segmentation, or binary cross-entropy on presence logits.
fn task_loss(
    tape: &mut Tape,
    task: TaskKind,
    seg_logits: Option<Var>,
    presence_logits: Var,
    teachers: &TeacherLabels,
) -> Result<Var> {
    match task {
        TaskKind::Segmentation => {
            let logits = seg_logits.expect("segmentation forward keeps the seg head");
            tape.softmax_cross_entropy(logits, &teachers.seg)
        }
        TaskKind::Classification => tape.bce_with_logits(presence_logits, &teachers.presence),
    }
}

/// Concatenate per-sample teacher labels into one batch record.
pub fn combine_teachers(per_sample: &[&TeacherLabels]) -> Result<TeacherLabels> {
    let mut seg = Vec::new();
    let mut presence = Vec::new();
    let mut flags_per_sample = 0;
    for t in per_sample {
        seg.extend_from_slice(&t.seg);
        presence.extend_from_slice(t.presence.data());
        flags_per_sample = t.presence.numel();
    }
    Ok(TeacherLabels {
        seg,
        presence: Tensor::new(vec![per_sample.len(), flags_per_sample], presence)?,
    })
}
