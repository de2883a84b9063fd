//! The lightweight auxiliary branch: a position-specific adapter into a
//! shared trunk of residual blocks with upsampling, ending in the head of
//! the active task. Used only during training; a call counter makes the
//! evaluation-absence contract checkable.

use super::recognizer::RecognitionModel;
use super::TaskKind;
use crate::autodiff::{Group, Params, Tape, Var};
use crate::codec::CodecArch;
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvT, ResBlock, LEAKY_SLOPE};
use crate::rng::DetRng;
use crate::task::data::{NUM_SEG_CLASSES, NUM_SHAPE_CLASSES};
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

/// Where the branch attaches: on the quantized latent before the decoder
/// (the proposed position), before the decoder's final layer, or on a
/// mid-stage feature of the recognition model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxPosition {
    #[serde(alias = "AuxEnc")]
    AuxEnc,
    #[serde(alias = "AuxDec")]
    AuxDec,
    #[serde(alias = "AuxTask")]
    AuxTask,
}

impl AuxPosition {
    pub const ALL: [AuxPosition; 3] = [AuxPosition::AuxEnc, AuxPosition::AuxDec, AuxPosition::AuxTask];

    pub fn as_str(self) -> &'static str {
        match self {
            AuxPosition::AuxEnc => "aux_enc",
            AuxPosition::AuxDec => "aux_dec",
            AuxPosition::AuxTask => "aux_task",
        }
    }
}

/// Recognizer tap consumed by the aux-task position.
pub const AUX_TASK_TAP: &str = "stage2";

const TRUNK_C1: usize = 16;
const TRUNK_C2: usize = 8;

#[derive(Clone, Debug)]
enum Adapter {
    /// aux-enc: upsample the 8x8 latent into the trunk.
    Up(ConvT),
    /// aux-dec: downsample the 32x32 penultimate decoder activation.
    Down(Conv),
    /// aux-task: project the 16x16 recognizer tap.
    Proj(Conv),
}

#[derive(Clone, Debug)]
pub struct AuxiliaryBranch {
    pub position: AuxPosition,
    pub task: TaskKind,
    /// [C,H,W] the adapter expects.
    pub input_shape: [usize; 3],
    adapter: Adapter,
    rb1: ResBlock,
    up1: ConvT,
    rb2: ResBlock,
    up2: ConvT,
    head: Conv,
    calls: Arc<AtomicU64>,
}

impl AuxiliaryBranch {
    pub fn init(
        params: &mut Params,
        position: AuxPosition,
        task: TaskKind,
        codec_arch: &CodecArch,
        recognizer: &RecognitionModel,
        rng: &mut DetRng,
    ) -> Result<Self> {
        let g = Group::AuxBranch;
        let (adapter, input_shape) = match position {
            AuxPosition::AuxEnc => (
                Adapter::Up(ConvT::init(
                    params,
                    "aux.adapter",
                    g,
                    codec_arch.latent_channels,
                    TRUNK_C1,
                    2,
                    2,
                    0,
                    rng,
                )),
                [codec_arch.latent_channels, 8, 8],
            ),
            AuxPosition::AuxDec => (
                Adapter::Down(Conv::init(
                    params,
                    "aux.adapter",
                    g,
                    codec_arch.enc_channels[0],
                    TRUNK_C1,
                    3,
                    2,
                    1,
                    rng,
                )),
                [codec_arch.enc_channels[0], 32, 32],
            ),
            AuxPosition::AuxTask => {
                let tap = recognizer.tap_shape(AUX_TASK_TAP).ok_or_else(|| {
                    Error::InvalidArgument {
                        op: "aux_branch",
                        msg: format!("recognizer has no tap {AUX_TASK_TAP}"),
                    }
                })?;
                (
                    Adapter::Proj(Conv::init(
                        params,
                        "aux.adapter",
                        g,
                        tap[0],
                        TRUNK_C1,
                        1,
                        1,
                        0,
                        rng,
                    )),
                    tap,
                )
            }
        };
        let head_out = match task {
            TaskKind::Segmentation => NUM_SEG_CLASSES,
            TaskKind::Classification => NUM_SHAPE_CLASSES,
        };
        Ok(AuxiliaryBranch {
            position,
            task,
            input_shape,
            adapter,
            rb1: ResBlock::init(params, "aux.rb1", g, TRUNK_C1, rng),
            up1: ConvT::init(params, "aux.up1", g, TRUNK_C1, TRUNK_C2, 2, 2, 0, rng),
            rb2: ResBlock::init(params, "aux.rb2", g, TRUNK_C2, rng),
            up2: ConvT::init(params, "aux.up2", g, TRUNK_C2, TRUNK_C2, 2, 2, 0, rng),
            head: Conv::init(params, "aux.head", g, TRUNK_C2, head_out, 1, 1, 0, rng),
            calls: Arc::new(AtomicU64::new(0)),
        })
    }

    pub fn bind(
        params: &Params,
        position: AuxPosition,
        task: TaskKind,
        codec_arch: &CodecArch,
        recognizer: &RecognitionModel,
    ) -> Result<Self> {
        let (adapter, input_shape) = match position {
            AuxPosition::AuxEnc => (
                Adapter::Up(ConvT::bind(params, "aux.adapter", 2, 0)?),
                [codec_arch.latent_channels, 8, 8],
            ),
            AuxPosition::AuxDec => (
                Adapter::Down(Conv::bind(params, "aux.adapter", 2, 1)?),
                [codec_arch.enc_channels[0], 32, 32],
            ),
            AuxPosition::AuxTask => {
                let tap = recognizer
                    .tap_shape(AUX_TASK_TAP)
                    .expect("tap name is static");
                (
                    Adapter::Proj(Conv::bind(params, "aux.adapter", 1, 0)?),
                    tap,
                )
            }
        };
        Ok(AuxiliaryBranch {
            position,
            task,
            input_shape,
            adapter,
            rb1: ResBlock::bind(params, "aux.rb1")?,
            up1: ConvT::bind(params, "aux.up1", 2, 0)?,
            rb2: ResBlock::bind(params, "aux.rb2")?,
            up2: ConvT::bind(params, "aux.up2", 2, 0)?,
            head: Conv::bind(params, "aux.head", 1, 0)?,
            calls: Arc::new(AtomicU64::new(0)),
        })
    }

    /// Task logits from the configured tap: [N,4,64,64] for segmentation,
    /// [N,3] for presence classification.
    pub fn forward(&self, tape: &mut Tape, params: &Params, tap: Var) -> Result<Var> {
        let shape = tape.shape(tap).to_vec();
        let want = &self.input_shape;
        if shape.len() != 4 || shape[1] != want[0] || shape[2] != want[1] || shape[3] != want[2] {
            return Err(Error::InvalidArgument {
                op: "aux_forward",
                msg: format!(
                    "position {} expects [N,{},{},{}], got {:?}",
                    self.position.as_str(),
                    want[0],
                    want[1],
                    want[2],
                    shape
                ),
            });
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut v = match &self.adapter {
            Adapter::Up(l) => l.forward(tape, params, tap, false)?,
            Adapter::Down(l) => l.forward(tape, params, tap, false)?,
            Adapter::Proj(l) => l.forward(tape, params, tap, false)?,
        };
        v = tape.leaky_relu(v, LEAKY_SLOPE);
        v = self.rb1.forward(tape, params, v, false)?;
        v = self.up1.forward(tape, params, v, false)?;
        v = tape.leaky_relu(v, LEAKY_SLOPE);
        v = self.rb2.forward(tape, params, v, false)?;
        v = self.up2.forward(tape, params, v, false)?;
        v = tape.leaky_relu(v, LEAKY_SLOPE);
        let logits = self.head.forward(tape, params, v, false)?;
        match self.task {
            TaskKind::Segmentation => Ok(logits),
            TaskKind::Classification => tape.global_max_pool(logits),
        }
    }

    /// How many forward executions this branch has run.
    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::codec::CodecModel;
    use crate::rng::derive_seed;
    use crate::task::recognizer::RecognizerArch;

    fn setup(position: AuxPosition, task: TaskKind) -> (Params, AuxiliaryBranch) {
        let mut params = Params::new();
        let mut rng = DetRng::new(derive_seed(3, "test"));
        let codec_arch = CodecArch::default();
        let _codec = CodecModel::init(&mut params, &codec_arch, &mut rng);
        let recog = RecognitionModel::init(&mut params, &RecognizerArch::default(), &mut rng);
        let aux =
            AuxiliaryBranch::init(&mut params, position, task, &codec_arch, &recog, &mut rng)
                .unwrap();
        (params, aux)
    }

    #[test]
    fn aux_enc_maps_latent_to_seg_logits() {
        let (params, aux) = setup(AuxPosition::AuxEnc, TaskKind::Segmentation);
        let mut tape = Tape::new();
        let tap = tape.constant(Tensor::zeros(&[2, 32, 8, 8]));
        let out = aux.forward(&mut tape, &params, tap).unwrap();
        assert_eq!(tape.shape(out), &[2, 4, 64, 64]);
        assert_eq!(aux.call_count(), 1);
    }

    #[test]
    fn aux_dec_and_task_shapes() {
        let (params, aux) = setup(AuxPosition::AuxDec, TaskKind::Classification);
        let mut tape = Tape::new();
        let tap = tape.constant(Tensor::zeros(&[1, 32, 32, 32]));
        let out = aux.forward(&mut tape, &params, tap).unwrap();
        assert_eq!(tape.shape(out), &[1, 3]);

        let (params, aux) = setup(AuxPosition::AuxTask, TaskKind::Segmentation);
        let mut tape = Tape::new();
        let tap = tape.constant(Tensor::zeros(&[1, 32, 16, 16]));
        let out = aux.forward(&mut tape, &params, tap).unwrap();
        assert_eq!(tape.shape(out), &[1, 4, 64, 64]);
    }

    #[test]
    fn wrong_tap_shape_is_a_configuration_error() {
        let (params, aux) = setup(AuxPosition::AuxEnc, TaskKind::Segmentation);
        let mut tape = Tape::new();
        let tap = tape.constant(Tensor::zeros(&[1, 32, 16, 16]));
        assert!(aux.forward(&mut tape, &params, tap).is_err());
        assert_eq!(aux.call_count(), 0);
    }

    #[test]
    fn branch_is_lightweight_for_every_position() {
        for position in AuxPosition::ALL {
            let (params, _) = setup(position, TaskKind::Segmentation);
            let aux_n = params.count_in_group(Group::AuxBranch);
            let recog_n = params.count_in_group(Group::Recognizer);
            assert!(
                (aux_n as f64) < 0.25 * recog_n as f64,
                "{}: {aux_n} vs recognizer {recog_n}",
                position.as_str()
            );
        }
    }
}
