//! Manual calibration probes, not part of the normal test run:
//! `cargo test -p icm-core --test pilot -- --ignored --nocapture`

use icm_core::codec::CodecArch;
use icm_core::task::{PretrainConfig, RecognizerArch, TaskKind};
use icm_core::training::{
    train, DataConfig, LossConfig, LossVariant, TrainConfig, TrainSpec,
};
use std::time::Instant;

#[test]
#[ignore]
fn pilot_pretrain_quality_and_speed() {
    let cfg = PretrainConfig::default();
    let t0 = Instant::now();
    match icm_core::task::pretrain_recognizer(&cfg, &RecognizerArch::default()) {
        Ok((_, _, report)) => {
            println!(
                "pretrain ok in {:.1}s: miou={:.4} presence_acc={:.4} final_loss={:.4}",
                t0.elapsed().as_secs_f64(),
                report.miou,
                report.presence_acc,
                report.final_loss
            );
        }
        Err(e) => println!("pretrain FAILED in {:.1}s: {e}", t0.elapsed().as_secs_f64()),
    }
}

#[test]
#[ignore]
fn pilot_train_step_speed() {
    let pre = icm_core::task::pretrain_recognizer(
        &PretrainConfig {
            steps: 40,
            miou_gate: 0.0,
            acc_gate: 0.0,
            ..PretrainConfig::default()
        },
        &RecognizerArch::default(),
    )
    .unwrap();
    let (recog_params, _, _) = pre;
    let spec = TrainSpec {
        task: TaskKind::Segmentation,
        codec_arch: CodecArch::default(),
        loss: LossConfig {
            variant: LossVariant::TaskAux,
            lambda: 2.0,
            ..LossConfig::default()
        },
        train: TrainConfig {
            epochs: 2,
            audit_interval: Some(4),
            ..TrainConfig::default()
        },
        data: DataConfig {
            n_train: 48,
            n_val: 8,
            ..DataConfig::default()
        },
        recognizer: Some((&recog_params, &RecognizerArch::default())),
    };
    let t0 = Instant::now();
    let out = train(&spec).unwrap();
    let steps = 2 * (48 / 8);
    println!(
        "train: {} steps in {:.1}s => {:.3}s/step; audited={} final_val={:.4}",
        steps,
        t0.elapsed().as_secs_f64(),
        t0.elapsed().as_secs_f64() / steps as f64,
        out.audit.audited_steps,
        out.final_val_total
    );
    for l in &out.log {
        println!(
            "  epoch {}: total={:.4} r_bpp={:.4} d_task={:.4} d_aux={:.4} val={:.4} metric={:.4}",
            l.epoch, l.total, l.r_bpp, l.d_task, l.d_aux, l.val_total, l.val_task_metric
        );
    }
}

#[test]
#[ignore]
fn pilot_pretrain_loss_trace() {
    use icm_core::autodiff::{Params, Tape};
    use icm_core::rng::{derive_seed, DetRng};
    use icm_core::task::{self, RecognitionModel};
    use icm_core::training::{Adam, AdamConfig};
    use icm_core::autodiff::Tensor;

    let arch = RecognizerArch::default();
    let mut params = Params::new();
    let mut rng = DetRng::new(derive_seed(1, "recognizer-init"));
    let model = RecognitionModel::init(&mut params, &arch, &mut rng);
    let mut batch_rng = DetRng::new(derive_seed(1, "recognizer-batches"));
    let mut adam = Adam::new(AdamConfig::default());
    let train_seed = derive_seed(1000, "pretrain");
    let samples: Vec<_> = (0..256).map(|i| task::generate_sample(train_seed, i)).collect();
    for step in 0..400 {
        let batch: Vec<_> = (0..8).map(|_| &samples[batch_rng.below(samples.len())]).collect();
        let images = task::batch_images(&batch);
        let seg_labels: Vec<u32> = batch.iter().flat_map(|s| s.seg_mask.clone()).collect();
        let presence: Vec<f32> = batch.iter().flat_map(|s| s.presence_f32()).collect();
        let presence = Tensor::new(vec![8, 3], presence).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let out = model.forward(&mut tape, &params, x, false).unwrap();
        let seg_loss = tape.softmax_cross_entropy(out.seg_logits, &seg_labels).unwrap();
        let pres_loss = tape.bce_with_logits(out.presence_logits, &presence).unwrap();
        let loss = tape.add(seg_loss, pres_loss).unwrap();
        if step % 40 == 0 {
            let gnorm: f64 = {
                let grads = tape.backward(loss).unwrap();
                let by = tape.param_grads(&grads);
                by.values().map(|t| t.data().iter().map(|&v| (v as f64)*(v as f64)).sum::<f64>()).sum::<f64>().sqrt()
            };
            println!("step {step}: seg={:.4} pres={:.4} gnorm={gnorm:.6}", tape.scalar_f64(seg_loss), tape.scalar_f64(pres_loss));
        }
        let grads = tape.backward(loss).unwrap();
        let by_param = tape.param_grads(&grads);
        adam.step(&mut params, &by_param, 1e-3);
    }
}

#[test]
#[ignore]
fn pilot_task_vs_taskaux() {
    use icm_core::metrics::{eval_model, EvalConfig};
    let (recog_params, recog, report) = icm_core::task::pretrain_recognizer(
        &PretrainConfig::default(),
        &RecognizerArch::default(),
    )
    .unwrap();
    println!("recognizer: miou={:.4} acc={:.4}", report.miou, report.presence_acc);
    let arch = RecognizerArch::default();
    for variant in [LossVariant::Task, LossVariant::TaskAux] {
        let t0 = Instant::now();
        let spec = TrainSpec {
            task: TaskKind::Segmentation,
            codec_arch: CodecArch::default(),
            loss: LossConfig {
                variant,
                lambda: 2.0,
                alpha: 0.5,
                ..LossConfig::default()
            },
            train: TrainConfig {
                epochs: 10,
                audit_interval: Some(50),
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
            recognizer: Some((&recog_params, &arch)),
        };
        let out = train(&spec).unwrap();
        let ev = eval_model(
            &out.params,
            &out.codec,
            out.recognizer.as_ref().unwrap(),
            TaskKind::Segmentation,
            &EvalConfig { n_images: 24, ..EvalConfig::default() },
        )
        .unwrap();
        println!(
            "{:?}: {:.0}s val_total={:.4} bpp_est={:.4} bpp_real={:.4} miou_gt={:.4} miou_teacher={:.4}",
            variant,
            t0.elapsed().as_secs_f64(),
            out.final_val_total,
            ev.bpp_estimated,
            ev.bpp_real.unwrap(),
            ev.quality_gt,
            ev.quality_teacher
        );
        for l in out.log.iter().step_by(3) {
            println!(
                "  epoch {}: total={:.4} r_bpp={:.4} d_task={:.4} d_aux={:.4} val={:.4} miou={:.4}",
                l.epoch, l.total, l.r_bpp, l.d_task, l.d_aux, l.val_total, l.val_task_metric
            );
        }
    }
}

#[test]
#[ignore]
fn pilot_lambda_spread() {
    use icm_core::metrics::{eval_model, EvalConfig};
    let (recog_params, _recog, _) = icm_core::task::pretrain_recognizer(
        &PretrainConfig::default(),
        &RecognizerArch::default(),
    )
    .unwrap();
    let arch = RecognizerArch::default();
    for lambda in [1.0, 8.0] {
        let t0 = Instant::now();
        let spec = TrainSpec {
            task: TaskKind::Segmentation,
            codec_arch: CodecArch::default(),
            loss: LossConfig {
                variant: LossVariant::Task,
                lambda,
                ..LossConfig::default()
            },
            train: TrainConfig {
                epochs: 20,
                lr0: 2e-3,
                audit_interval: Some(1000),
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
            recognizer: Some((&recog_params, &arch)),
        };
        let out = train(&spec).unwrap();
        let ev = eval_model(
            &out.params,
            &out.codec,
            out.recognizer.as_ref().unwrap(),
            TaskKind::Segmentation,
            &EvalConfig { n_images: 24, ..EvalConfig::default() },
        )
        .unwrap();
        println!(
            "lambda={lambda}: {:.0}s val_total={:.4} bpp={:.4} miou_gt={:.4}",
            t0.elapsed().as_secs_f64(),
            out.final_val_total,
            ev.bpp_real.unwrap(),
            ev.quality_gt,
        );
        for l in out.log.iter().step_by(4) {
            println!(
                "  epoch {}: r_bpp={:.4} d_task={:.4} val={:.4} miou={:.4}",
                l.epoch, l.r_bpp, l.d_task, l.val_total, l.val_task_metric
            );
        }
    }
}

#[test]
#[ignore]
fn pilot_classification_lambdas() {
    use icm_core::metrics::{eval_model, EvalConfig};
    let (recog_params, _recog, _) = icm_core::task::pretrain_recognizer(
        &PretrainConfig::default(),
        &RecognizerArch::default(),
    )
    .unwrap();
    let arch = RecognizerArch::default();
    for lambda in [0.02, 0.1, 0.4] {
        let spec = TrainSpec {
            task: TaskKind::Classification,
            codec_arch: CodecArch::default(),
            loss: LossConfig {
                variant: LossVariant::Task,
                lambda,
                ..LossConfig::default()
            },
            train: TrainConfig {
                epochs: 20,
                audit_interval: Some(1000),
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
            recognizer: Some((&recog_params, &arch)),
        };
        let out = train(&spec).unwrap();
        let ev = eval_model(
            &out.params,
            &out.codec,
            out.recognizer.as_ref().unwrap(),
            TaskKind::Classification,
            &EvalConfig { n_images: 32, ..EvalConfig::default() },
        )
        .unwrap();
        // how non-degenerate are background latents?
        let mut nz_bg = 0usize;
        let mut n_bg = 0usize;
        for d in &ev.details {
            let sample = icm_core::task::generate_sample(
                icm_core::rng::derive_seed(9000, "eval"), d.index);
            let roi = icm_core::roi::mask_to_latent(&sample.seg_mask, 64, 8);
            for c in 0..d.latent.channels {
                for p in 0..64 {
                    if !roi[p] {
                        n_bg += 1;
                        if d.latent.values[c * 64 + p] != 0 { nz_bg += 1; }
                    }
                }
            }
        }
        println!(
            "lambda={lambda}: bpp={:.4} acc_gt={:.4} acc_teacher={:.4} d_task_final={:.4} bg_nonzero={:.3}",
            ev.bpp_real.unwrap(), ev.quality_gt, ev.quality_teacher,
            out.log.last().unwrap().d_task,
            nz_bg as f64 / n_bg as f64,
        );
    }
}

#[test]
#[ignore]
fn pilot_seed_sweep_7a() {
    let (recog_params, _recog, _) = icm_core::task::pretrain_recognizer(
        &PretrainConfig::default(),
        &RecognizerArch::default(),
    )
    .unwrap();
    let arch = RecognizerArch::default();
    for seed in [1u64, 2, 3] {
        let mut finals = Vec::new();
        for variant in [LossVariant::Task, LossVariant::TaskAux] {
            let spec = TrainSpec {
                task: TaskKind::Segmentation,
                codec_arch: CodecArch::default(),
                loss: LossConfig {
                    variant,
                    lambda: 8.0,
                    ..LossConfig::default()
                },
                train: TrainConfig {
                    epochs: 18,
                    seed,
                    audit_interval: Some(1000),
                    ..TrainConfig::default()
                },
                data: DataConfig::default(),
                recognizer: Some((&recog_params, &arch)),
            };
            let out = train(&spec).unwrap();
            finals.push((variant, out.final_val_total, out.log.last().unwrap().val_task_metric));
        }
        println!(
            "seed {seed}: task={:.4} (miou {:.4})  task_aux={:.4} (miou {:.4})  aux_better={}",
            finals[0].1, finals[0].2, finals[1].1, finals[1].2,
            finals[1].1 < finals[0].1
        );
    }
}

#[test]
#[ignore]
fn pilot_high_lambda_7a() {
    let (recog_params, _recog, _) = icm_core::task::pretrain_recognizer(
        &PretrainConfig::default(),
        &RecognizerArch::default(),
    )
    .unwrap();
    let arch = RecognizerArch::default();
    for lambda in [16.0, 32.0] {
        for seed in [1u64, 2] {
            let mut finals = Vec::new();
            for variant in [LossVariant::Task, LossVariant::TaskAux] {
                let spec = TrainSpec {
                    task: TaskKind::Segmentation,
                    codec_arch: CodecArch::default(),
                    loss: LossConfig { variant, lambda, ..LossConfig::default() },
                    train: TrainConfig {
                        epochs: 30,
                        seed,
                        audit_interval: Some(1000),
                        ..TrainConfig::default()
                    },
                    data: DataConfig::default(),
                    recognizer: Some((&recog_params, &arch)),
                };
                let out = train(&spec).unwrap();
                let last = out.log.last().unwrap();
                finals.push((out.final_val_total, last.val_task_metric, last.r_bpp));
            }
            println!(
                "lambda={lambda} seed={seed}: task={:.4} (miou {:.4}, bpp {:.3}) aux={:.4} (miou {:.4}, bpp {:.3}) aux_better={}",
                finals[0].0, finals[0].1, finals[0].2,
                finals[1].0, finals[1].1, finals[1].2,
                finals[1].0 < finals[0].0
            );
        }
    }
}
