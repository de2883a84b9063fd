//! The training driver: deterministic batching, loss construction, Adam
//! updates, per-epoch validation, and the gradient-routing audit that checks
//! where the auxiliary term's gradients land.

use super::loss::{build_loss, combine_teachers, Models};
use super::optim::{poly_lr, Adam};
use super::{DataConfig, LossConfig, LossTerms, LossVariant, TrainConfig};
use crate::autodiff::{Group, Params, Tape, Var};
use crate::codec::{CodecArch, CodecModel};
use crate::error::{Error, Result};
use crate::metrics;
use crate::rng::{derive_seed, DetRng};
use crate::task::recognizer::{teacher_labels_select, TeacherLabels};
use crate::task::{
    self, argmax_seg, AuxPosition, AuxiliaryBranch, RecognitionModel, RecognizerArch,
    SyntheticSample, TaskKind, NUM_SEG_CLASSES,
};

pub struct TrainSpec<'a> {
    pub task: TaskKind,
    pub codec_arch: CodecArch,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Pretrained recognizer registry and architecture; mandatory for every
    /// variant except RdImage.
    pub recognizer: Option<(&'a Params, &'a RecognizerArch)>,
}

#[derive(Clone, Copy, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub r_bpp: f64,
    pub d_image: f64,
    pub d_task: f64,
    pub d_aux: f64,
    pub total: f64,
    pub val_total: f64,
    pub val_task_metric: f64,
    /// Full evaluation-mode loss decomposition on the validation split
    /// (mean per image); not part of the CSV schema.
    pub val_terms: LossTerms,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str =
        "epoch,lr,R_bpp,D_image,D_task,D_aux,total,val_total,val_task_metric";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.r_bpp,
            self.d_image,
            self.d_task,
            self.d_aux,
            self.total,
            self.val_total,
            self.val_task_metric
        )
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct AuditSummary {
    pub audited_steps: usize,
}

pub struct TrainOutcome {
    pub params: Params,
    pub codec: CodecModel,
    pub recognizer: Option<RecognitionModel>,
    pub aux: Option<AuxiliaryBranch>,
    pub log: Vec<EpochLog>,
    pub audit: AuditSummary,
    pub final_val_total: f64,
}

/// Run one training. Deterministic given the spec: initialization, batch
/// order and quantization noise each draw from their own seeded streams.
pub fn train(spec: &TrainSpec) -> Result<TrainOutcome> {
    spec.loss.validate()?;
    let variant = spec.loss.variant;

    let mut params = Params::new();
    let recognizer = match (variant.uses_recognizer(), spec.recognizer) {
        (true, Some((src, arch))) => {
            for (_, entry) in src.iter() {
                params.add(entry.name.clone(), entry.group, entry.value.clone());
            }
            Some(RecognitionModel::bind(&params, arch)?)
        }
        (true, None) => {
            return Err(Error::Config(format!(
                "variant {} needs a pretrained recognizer",
                variant.as_str()
            )))
        }
        (false, _) => None,
    };

    let mut codec_rng = DetRng::new(derive_seed(spec.train.seed, "codec-init"));
    let codec = CodecModel::init(&mut params, &spec.codec_arch, &mut codec_rng);
    let aux = if variant.uses_aux() {
        let mut aux_rng = DetRng::new(derive_seed(spec.train.seed, "aux-init"));
        Some(AuxiliaryBranch::init(
            &mut params,
            spec.loss.position,
            spec.task,
            &spec.codec_arch,
            recognizer.as_ref().expect("aux variants use the recognizer"),
            &mut aux_rng,
        )?)
    } else {
        None
    };

    let train_seed = derive_seed(spec.data.seed, "train");
    let val_seed = derive_seed(spec.data.seed, "val");
    let train_samples: Vec<SyntheticSample> = (0..spec.data.n_train)
        .map(|i| task::generate_sample(train_seed, i))
        .collect();
    let val_samples: Vec<SyntheticSample> = (0..spec.data.n_val)
        .map(|i| task::generate_sample(val_seed, i))
        .collect();

    let want_seg = spec.task == TaskKind::Segmentation;
    let mut train_teachers: Vec<Option<TeacherLabels>> = vec![None; train_samples.len()];
    let mut val_teachers: Vec<Option<TeacherLabels>> = vec![None; val_samples.len()];

    let mut shuffle_rng = DetRng::new(derive_seed(spec.train.seed, "batches"));
    let mut noise_rng = DetRng::new(derive_seed(spec.train.seed, "noise"));
    let mut adam = Adam::new(spec.train.adam);
    let entropy_ids: std::collections::BTreeSet<_> =
        params.ids_in_group(Group::EntropyModel).into_iter().collect();
    let entropy_scale = spec.train.entropy_lr_scale;
    let audit_interval = spec.train.effective_audit_interval();
    let mut audit = AuditSummary::default();

    let models = Models {
        codec: &codec,
        recognizer: recognizer.as_ref(),
        aux: aux.as_ref(),
    };

    let mut log = Vec::with_capacity(spec.train.epochs);
    let mut indices: Vec<usize> = (0..train_samples.len()).collect();
    let mut global_step = 0usize;

    for epoch in 0..spec.train.epochs {
        let lr = poly_lr(spec.train.lr0, spec.train.schedule, epoch, spec.train.epochs);
        shuffle_rng.shuffle(&mut indices);
        let mut epoch_terms = TermAccumulator::default();

        for chunk in indices.chunks_exact(spec.train.batch_size) {
            let batch: Vec<&SyntheticSample> = chunk.iter().map(|&i| &train_samples[i]).collect();
            let images = task::batch_images(&batch);
            let teachers = if variant.uses_recognizer() && variant != LossVariant::Distill {
                let model = recognizer.as_ref().expect("present");
                for &i in chunk {
                    if train_teachers[i].is_none() {
                        let single = task::batch_images(&[&train_samples[i]]);
                        train_teachers[i] =
                            Some(teacher_labels_select(model, &params, &single, want_seg)?);
                    }
                }
                let per: Vec<&TeacherLabels> = chunk
                    .iter()
                    .map(|&i| train_teachers[i].as_ref().expect("just filled"))
                    .collect();
                Some(combine_teachers(&per)?)
            } else {
                None
            };

            let mut tape = Tape::new();
            let build = build_loss(
                &mut tape,
                &params,
                &models,
                &images,
                teachers.as_ref(),
                spec.task,
                &spec.loss,
                Some(&mut noise_rng),
            )?;
            if !build.terms.total.is_finite() {
                let location = tape
                    .first_non_finite()
                    .map(|(i, d)| format!("node {i} ({d})"))
                    .unwrap_or_else(|| "loss scalar".into());
                return Err(Error::NonFinite {
                    step: global_step,
                    location,
                });
            }

            let grads = tape.backward(build.loss)?;
            let by_param = tape.param_grads(&grads);
            for pid in by_param.keys() {
                if params.get(*pid).group == Group::Recognizer {
                    return Err(Error::AuditFailed {
                        step: global_step,
                        detail: format!(
                            "frozen recognizer parameter {} received a gradient",
                            params.get(*pid).name
                        ),
                    });
                }
            }

            if let Some(aux_term) = build.aux_term {
                if spec.loss.alpha > 0.0 && global_step % audit_interval == 0 {
                    audit_aux_routing(
                        &tape,
                        aux_term,
                        &params,
                        spec.loss.position,
                        global_step,
                    )?;
                    audit.audited_steps += 1;
                }
            }

            adam.step_scaled(&mut params, &by_param, |pid| {
                if entropy_ids.contains(&pid) {
                    lr * entropy_scale
                } else {
                    lr
                }
            });
            epoch_terms.add(&build.terms);
            global_step += 1;
        }

        let (val_total, val_metric, val_terms) = validate(
            &params,
            &models,
            spec,
            &val_samples,
            &mut val_teachers,
            want_seg,
        )?;
        let mean = epoch_terms.mean();
        log.push(EpochLog {
            epoch,
            lr,
            r_bpp: mean.r_bpp,
            d_image: mean.d_image,
            d_task: mean.d_task,
            d_aux: mean.d_aux,
            total: mean.total,
            val_total,
            val_task_metric: val_metric,
            val_terms,
        });
    }

    let final_val_total = log.last().map(|l| l.val_total).unwrap_or(f64::NAN);
    Ok(TrainOutcome {
        params,
        codec,
        recognizer,
        aux,
        log,
        audit,
        final_val_total,
    })
}

/// Backward the auxiliary term alone and check where its gradients land:
/// with the branch on the latent no decoder parameter may receive anything
/// (exact zeros), while the encoder must; decoder-side positions must reach
/// the decoder.
fn audit_aux_routing(
    tape: &Tape,
    aux_term: Var,
    params: &Params,
    position: AuxPosition,
    step: usize,
) -> Result<()> {
    let grads = tape.backward(aux_term)?;
    let by_param = tape.param_grads(&grads);
    let mut enc_nonzero = false;
    let mut dec_nonzero = false;
    for (pid, g) in &by_param {
        let entry = params.get(*pid);
        let any_nonzero = g.data().iter().any(|&v| v != 0.0);
        match entry.group {
            Group::Recognizer => {
                return Err(Error::AuditFailed {
                    step,
                    detail: format!("aux term reached recognizer parameter {}", entry.name),
                })
            }
            Group::Encoder => enc_nonzero |= any_nonzero,
            Group::Decoder => {
                if position == AuxPosition::AuxEnc && any_nonzero {
                    return Err(Error::AuditFailed {
                        step,
                        detail: format!(
                            "aux-enc term leaked a nonzero gradient into decoder parameter {}",
                            entry.name
                        ),
                    });
                }
                dec_nonzero |= any_nonzero;
            }
            Group::EntropyModel | Group::AuxBranch => {}
        }
    }
    match position {
        AuxPosition::AuxEnc => {
            // structural side of the same claim: the term's ancestry holds
            // no decoder parameter at all
            for pid in tape.param_ancestors(aux_term) {
                if params.get(pid).group == Group::Decoder {
                    return Err(Error::AuditFailed {
                        step,
                        detail: format!(
                            "aux-enc term has decoder parameter {} in its ancestry",
                            params.get(pid).name
                        ),
                    });
                }
            }
            if !enc_nonzero {
                return Err(Error::AuditFailed {
                    step,
                    detail: "aux-enc term produced no encoder gradient".into(),
                });
            }
        }
        AuxPosition::AuxDec | AuxPosition::AuxTask => {
            if !dec_nonzero {
                return Err(Error::AuditFailed {
                    step,
                    detail: format!(
                        "{} term produced no decoder gradient",
                        position.as_str()
                    ),
                });
            }
        }
    }
    Ok(())
}

/// Evaluation-mode loss and task quality on the validation split. Rounding
/// quantization, no RNG, no aux execution beyond what the loss variant
/// requires.
fn validate(
    params: &Params,
    models: &Models,
    spec: &TrainSpec,
    val_samples: &[SyntheticSample],
    val_teachers: &mut [Option<TeacherLabels>],
    want_seg: bool,
) -> Result<(f64, f64, LossTerms)> {
    let variant = spec.loss.variant;
    let mut total = 0.0;
    let mut terms_acc = TermAccumulator::default();
    let mut n_images = 0usize;
    let mut metric_acc = 0.0;
    let mut metric_n = 0usize;
    let mut pres_pred: Vec<bool> = Vec::new();
    let mut pres_gt: Vec<bool> = Vec::new();

    for (chunk_idx, chunk) in val_samples.chunks(spec.train.batch_size).enumerate() {
        let refs: Vec<&SyntheticSample> = chunk.iter().collect();
        let images = task::batch_images(&refs);
        let base = chunk_idx * spec.train.batch_size;
        let teachers = if variant.uses_recognizer() && variant != LossVariant::Distill {
            let model = models.recognizer.expect("present");
            for (j, sample) in chunk.iter().enumerate() {
                if val_teachers[base + j].is_none() {
                    let single = task::batch_images(&[sample]);
                    val_teachers[base + j] =
                        Some(teacher_labels_select(model, params, &single, want_seg)?);
                }
            }
            let per: Vec<&TeacherLabels> = (0..chunk.len())
                .map(|j| val_teachers[base + j].as_ref().expect("just filled"))
                .collect();
            Some(combine_teachers(&per)?)
        } else {
            None
        };

        let mut tape = Tape::new();
        let build = build_loss(
            &mut tape,
            params,
            models,
            &images,
            teachers.as_ref(),
            spec.task,
            &spec.loss,
            None,
        )?;
        // validation compares the deployment objective; the auxiliary term
        // exists only during training
        total += build.terms.recombine_main(variant) * chunk.len() as f64;
        terms_acc.add(&build.terms);
        n_images += chunk.len();

        if let Some(recog) = models.recognizer {
            // task quality of the decoded images against ground truth
            let (seg_logits, presence_logits, _) =
                recog.forward_select(&mut tape, params, build.xhat, true, want_seg)?;
            match spec.task {
                TaskKind::Segmentation => {
                    let s = seg_logits.expect("requested");
                    let pred = argmax_seg(tape.value(s), tape.shape(s));
                    let spatial = task::IMAGE_SIZE * task::IMAGE_SIZE;
                    for (j, sample) in chunk.iter().enumerate() {
                        metric_acc += metrics::miou(
                            &pred[j * spatial..(j + 1) * spatial],
                            &sample.seg_mask,
                            NUM_SEG_CLASSES,
                        )?;
                        metric_n += 1;
                    }
                }
                TaskKind::Classification => {
                    let logits = tape.value(presence_logits);
                    for (j, sample) in chunk.iter().enumerate() {
                        for k in 0..task::NUM_SHAPE_CLASSES {
                            pres_pred.push(logits[j * task::NUM_SHAPE_CLASSES + k] > 0.0);
                            pres_gt.push(sample.presence[k]);
                        }
                    }
                }
            }
        }
    }

    let val_total = total / n_images.max(1) as f64;
    let metric = match spec.task {
        TaskKind::Segmentation if metric_n > 0 => metric_acc / metric_n as f64,
        TaskKind::Classification if !pres_pred.is_empty() => {
            metrics::presence_accuracy(&pres_pred, &pres_gt)
        }
        _ => f64::NAN,
    };
    Ok((val_total, metric, terms_acc.mean()))
}

#[derive(Default)]
struct TermAccumulator {
    sum: LossTerms,
    n: usize,
}

impl TermAccumulator {
    fn add(&mut self, t: &LossTerms) {
        self.sum.lambda = t.lambda;
        self.sum.alpha = t.alpha;
        self.sum.r_bits += t.r_bits;
        self.sum.r_bpp += t.r_bpp;
        self.sum.d_image += t.d_image;
        self.sum.d_distill += t.d_distill;
        self.sum.d_task += t.d_task;
        self.sum.d_aux += t.d_aux;
        self.sum.total += t.total;
        self.n += 1;
    }

    fn mean(&self) -> LossTerms {
        let n = self.n.max(1) as f64;
        LossTerms {
            r_bits: self.sum.r_bits / n,
            r_bpp: self.sum.r_bpp / n,
            d_image: self.sum.d_image / n,
            d_distill: self.sum.d_distill / n,
            d_task: self.sum.d_task / n,
            d_aux: self.sum.d_aux / n,
            total: self.sum.total / n,
            lambda: self.sum.lambda,
            alpha: self.sum.alpha,
        }
    }
}
