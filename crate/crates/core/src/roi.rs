//! ROI/QF baseline: divide latent values outside a binarized region of
//! interest by a quantization factor before rounding, starving the
//! background of bits. Applied ad hoc to a trained codec at evaluation;
//! the decoder is left untouched.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    GtMask,
    None,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RoiConfig {
    pub qf: f64,
    pub mask_source: MaskSource,
    pub binarize_threshold: f64,
}

impl Default for RoiConfig {
    fn default() -> Self {
        RoiConfig {
            qf: 1.4,
            mask_source: MaskSource::GtMask,
            binarize_threshold: 0.5,
        }
    }
}

impl RoiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.qf > 1.0) {
            return Err(Error::Config(format!(
                "quantization factor must exceed 1, got {}",
                self.qf
            )));
        }
        if !(0.0 < self.binarize_threshold && self.binarize_threshold < 1.0) {
            return Err(Error::Config(format!(
                "binarize threshold must lie in (0,1), got {}",
                self.binarize_threshold
            )));
        }
        Ok(())
    }
}

/// Binarize a soft mask value.
pub fn binarize(value: f64, threshold: f64) -> bool {
    value >= threshold
}

/// Max-pool an image-resolution segmentation mask down to the latent grid:
/// a latent cell is ROI iff any covered pixel belongs to a foreground class.
pub fn mask_to_latent(seg_mask: &[u32], image_size: usize, factor: usize) -> Vec<bool> {
    debug_assert_eq!(seg_mask.len(), image_size * image_size);
    let g = image_size / factor;
    let mut out = vec![false; g * g];
    for y in 0..image_size {
        for x in 0..image_size {
            if seg_mask[y * image_size + x] > 0 {
                out[(y / factor) * g + (x / factor)] = true;
            }
        }
    }
    out
}

/// Scale non-ROI latent values by 1/qf; in-ROI values pass through
/// untouched (bitwise). Accepts [C,h,w] or [1,C,h,w] latents.
pub fn apply_qf(y: &Tensor, roi: &[bool], qf: f64) -> Result<Tensor> {
    if !(qf > 1.0) {
        return Err(Error::Config(format!(
            "quantization factor must exceed 1, got {qf}"
        )));
    }
    let shape = y.shape().to_vec();
    let (c, h, w) = match shape.len() {
        3 => (shape[0], shape[1], shape[2]),
        4 if shape[0] == 1 => (shape[1], shape[2], shape[3]),
        _ => {
            return Err(Error::InvalidArgument {
                op: "apply_qf",
                msg: format!("expected [C,h,w] latent, got {shape:?}"),
            })
        }
    };
    if roi.len() != h * w {
        return Err(Error::ShapeMismatch {
            op: "apply_qf",
            lhs: vec![h, w],
            rhs: vec![roi.len()],
        });
    }
    let inv = (1.0 / qf) as f32;
    let mut data = y.data().to_vec();
    for ci in 0..c {
        for p in 0..h * w {
            if !roi[p] {
                data[ci * h * w + p] *= inv;
            }
        }
    }
    Tensor::new(shape, data)
}
