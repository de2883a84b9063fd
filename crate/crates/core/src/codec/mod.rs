//! The learned compression model: an analysis transform down to a latent
//! grid, a per-channel factorized entropy model over quantized symbols, and
//! a synthesis transform back to image space.

mod bitmap;
mod entropy;
mod quantize;

pub use bitmap::{bit_allocation_map, bit_map_diff, BitMap};
pub use entropy::{EntropySnapshot, FactorizedEntropyModel, LIKELIHOOD_FLOOR};
pub use quantize::{quantize, QuantizeMode};

use crate::autodiff::{Group, Params, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvT, LEAKY_SLOPE};
use crate::rng::DetRng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CodecArch {
    pub latent_channels: usize,
    pub enc_channels: [usize; 2],
    pub support: i32,
}

impl Default for CodecArch {
    fn default() -> Self {
        CodecArch {
            latent_channels: 32,
            enc_channels: [32, 64],
            support: 64,
        }
    }
}

/// Three stride-2 stages each way.
pub const DOWNSAMPLE_FACTOR: usize = 8;

#[derive(Clone, Debug)]
pub struct CodecModel {
    pub arch: CodecArch,
    enc: [Conv; 3],
    dec: [ConvT; 3],
    pub entropy: FactorizedEntropyModel,
}

impl CodecModel {
    pub fn init(params: &mut Params, arch: &CodecArch, rng: &mut DetRng) -> Self {
        let [c1, c2] = arch.enc_channels;
        let cl = arch.latent_channels;
        let enc = [
            Conv::init(params, "codec.enc0", Group::Encoder, 3, c1, 3, 2, 1, rng),
            Conv::init(params, "codec.enc1", Group::Encoder, c1, c2, 3, 2, 1, rng),
            Conv::init(params, "codec.enc2", Group::Encoder, c2, cl, 3, 2, 1, rng),
        ];
        let dec = [
            ConvT::init(params, "codec.dec0", Group::Decoder, cl, c2, 4, 2, 1, rng),
            ConvT::init(params, "codec.dec1", Group::Decoder, c2, c1, 4, 2, 1, rng),
            ConvT::init(params, "codec.dec2", Group::Decoder, c1, 3, 4, 2, 1, rng),
        ];
        let entropy = FactorizedEntropyModel::init(params, "codec.entropy", cl, arch.support);
        CodecModel {
            arch: arch.clone(),
            enc,
            dec,
            entropy,
        }
    }

    pub fn bind(params: &Params, arch: &CodecArch) -> Result<Self> {
        Ok(CodecModel {
            arch: arch.clone(),
            enc: [
                Conv::bind(params, "codec.enc0", 2, 1)?,
                Conv::bind(params, "codec.enc1", 2, 1)?,
                Conv::bind(params, "codec.enc2", 2, 1)?,
            ],
            dec: [
                ConvT::bind(params, "codec.dec0", 2, 1)?,
                ConvT::bind(params, "codec.dec1", 2, 1)?,
                ConvT::bind(params, "codec.dec2", 2, 1)?,
            ],
            entropy: FactorizedEntropyModel::bind(
                params,
                "codec.entropy",
                arch.latent_channels,
                arch.support,
            )?,
        })
    }

    pub fn downsample_factor(&self) -> usize {
        DOWNSAMPLE_FACTOR
    }

    /// Analysis transform: [N,3,H,W] -> [N,C,H/8,W/8].
    pub fn encode(&self, tape: &mut Tape, params: &Params, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::InvalidArgument {
                op: "encode",
                msg: format!("expected [N,3,H,W], got {:?}", shape),
            });
        }
        let (h, w) = (shape[2], shape[3]);
        if h % DOWNSAMPLE_FACTOR != 0 || w % DOWNSAMPLE_FACTOR != 0 {
            return Err(Error::PaddingRequired {
                h,
                w,
                factor: DOWNSAMPLE_FACTOR,
            });
        }
        let mut v = x;
        for (i, layer) in self.enc.iter().enumerate() {
            v = layer.forward(tape, params, v, false)?;
            if i + 1 < self.enc.len() {
                v = tape.leaky_relu(v, LEAKY_SLOPE);
            }
        }
        Ok(v)
    }

    /// Synthesis transform: [N,C,h,w] -> [N,3,8h,8w], output in [0,1].
    pub fn decode(&self, tape: &mut Tape, params: &Params, y: Var) -> Result<Var> {
        Ok(self.decode_taps(tape, params, y)?.0)
    }

    /// Decode while exposing the penultimate activation (input of the final
    /// synthesis layer), the attachment point for a decoder-side branch.
    pub fn decode_taps(&self, tape: &mut Tape, params: &Params, y: Var) -> Result<(Var, Var)> {
        let shape = tape.shape(y).to_vec();
        if shape.len() != 4 || shape[1] != self.arch.latent_channels {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: shape,
                rhs: vec![0, self.arch.latent_channels, 0, 0],
            });
        }
        let mut v = y;
        v = self.dec[0].forward(tape, params, v, false)?;
        v = tape.leaky_relu(v, LEAKY_SLOPE);
        v = self.dec[1].forward(tape, params, v, false)?;
        let penultimate = tape.leaky_relu(v, LEAKY_SLOPE);
        let v = self.dec[2].forward(tape, params, penultimate, false)?;
        Ok((tape.sigmoid(v), penultimate))
    }
}

/// Quantized integer latent bound to the entropy model that priced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentCode {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub values: Vec<i32>,
    pub model_digest: u64,
}

impl LatentCode {
    /// Round-free capture of an already-integer latent tensor [C,h,w] or
    /// [1,C,h,w]; values are clamped into the model support.
    pub fn from_tensor(snapshot: &EntropySnapshot, t: &Tensor) -> Result<LatentCode> {
        let shape = t.shape();
        let dims: Vec<usize> = match shape.len() {
            3 => shape.to_vec(),
            4 if shape[0] == 1 => shape[1..].to_vec(),
            _ => {
                return Err(Error::InvalidArgument {
                    op: "latent_code",
                    msg: format!("expected [C,h,w] or [1,C,h,w], got {:?}", shape),
                })
            }
        };
        if dims[0] != snapshot.channels() {
            return Err(Error::ShapeMismatch {
                op: "latent_code",
                lhs: dims,
                rhs: vec![snapshot.channels()],
            });
        }
        let s = snapshot.support;
        let values = t
            .data()
            .iter()
            .map(|&v| (v.round_ties_even() as i32).clamp(-s, s))
            .collect();
        Ok(LatentCode {
            channels: dims[0],
            h: dims[1],
            w: dims[2],
            values,
            model_digest: snapshot.digest(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}
