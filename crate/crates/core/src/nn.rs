//! Thin layer wrappers: parameter registration plus a forward call. A layer
//! owns only ids into the central `Params` registry.

use crate::autodiff::{Group, ParamId, Params, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::DetRng;

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug)]
pub struct ConvT {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

fn missing(name: &str) -> Error {
    Error::Checkpoint(format!("missing parameter {name}"))
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        params: &mut Params,
        name: &str,
        group: Group,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut DetRng,
    ) -> Self {
        let w = params.add(
            format!("{name}.w"),
            group,
            Tensor::randn_scaled(&[cout, cin, k, k], cin * k * k, rng),
        );
        let b = params.add(format!("{name}.b"), group, Tensor::zeros(&[cout]));
        Conv { w, b, stride, pad }
    }

    pub fn bind(params: &Params, name: &str, stride: usize, pad: usize) -> Result<Self> {
        Ok(Conv {
            w: params
                .find(&format!("{name}.w"))
                .ok_or_else(|| missing(&format!("{name}.w")))?,
            b: params
                .find(&format!("{name}.b"))
                .ok_or_else(|| missing(&format!("{name}.b")))?,
            stride,
            pad,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var, frozen: bool) -> Result<Var> {
        let (w, b) = if frozen {
            (tape.frozen_param(params, self.w), tape.frozen_param(params, self.b))
        } else {
            (tape.param(params, self.w), tape.param(params, self.b))
        };
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

impl ConvT {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        params: &mut Params,
        name: &str,
        group: Group,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut DetRng,
    ) -> Self {
        let w = params.add(
            format!("{name}.w"),
            group,
            Tensor::randn_scaled(&[cin, cout, k, k], cin * k * k, rng),
        );
        let b = params.add(format!("{name}.b"), group, Tensor::zeros(&[cout]));
        ConvT { w, b, stride, pad }
    }

    pub fn bind(params: &Params, name: &str, stride: usize, pad: usize) -> Result<Self> {
        Ok(ConvT {
            w: params
                .find(&format!("{name}.w"))
                .ok_or_else(|| missing(&format!("{name}.w")))?,
            b: params
                .find(&format!("{name}.b"))
                .ok_or_else(|| missing(&format!("{name}.b")))?,
            stride,
            pad,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var, frozen: bool) -> Result<Var> {
        let (w, b) = if frozen {
            (tape.frozen_param(params, self.w), tape.frozen_param(params, self.b))
        } else {
            (tape.param(params, self.w), tape.param(params, self.b))
        };
        tape.conv_transpose2d(x, w, b, self.stride, self.pad)
    }
}

/// Residual block: x + conv(lrelu(conv(x))), channel-preserving.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub c1: Conv,
    pub c2: Conv,
}

impl ResBlock {
    pub fn init(
        params: &mut Params,
        name: &str,
        group: Group,
        channels: usize,
        rng: &mut DetRng,
    ) -> Self {
        ResBlock {
            c1: Conv::init(params, &format!("{name}.c1"), group, channels, channels, 3, 1, 1, rng),
            c2: Conv::init(params, &format!("{name}.c2"), group, channels, channels, 3, 1, 1, rng),
        }
    }

    pub fn bind(params: &Params, name: &str) -> Result<Self> {
        Ok(ResBlock {
            c1: Conv::bind(params, &format!("{name}.c1"), 1, 1)?,
            c2: Conv::bind(params, &format!("{name}.c2"), 1, 1)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var, frozen: bool) -> Result<Var> {
        let h = self.c1.forward(tape, params, x, frozen)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let h = self.c2.forward(tape, params, h, frozen)?;
        tape.add(x, h)
    }
}
