//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! The tape records every op executed in a forward pass; `backward` replays
//! it once in reverse. `detach` is a strict gradient barrier and `ste_round`
//! is the straight-through rounding used at the quantization bottleneck.

mod gradcheck;
mod kernels;
mod params;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use kernels::{broadcast_shapes, conv_out_dim, conv_transpose_out_dim};
pub use params::{Group, ParamEntry, ParamId, Params};
pub use real::Real;
pub use tape::{Grads, Tape, Var};
pub use tensor::{numel, Tensor};

#[cfg(test)]
mod tests {
    use super::*;

    fn t32(shape: &[usize], v: &[f64]) -> Tensor<f32> {
        Tensor::from_f64_slice(shape, v).unwrap()
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t32(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y), &[0.5]);
    }

    #[test]
    fn sum_and_sum_log2() {
        let mut tape = Tape::<f64>::new();
        let ones = tape.constant(Tensor::full(&[2, 3], 1.0));
        let s = tape.sum(ones).unwrap();
        assert_eq!(tape.scalar_f64(s), 6.0);

        let p = tape.constant(t32(&[2], &[0.5, 0.25]).map_to_f64_tensor());
        let sl = tape.sum_log2(p).unwrap();
        assert!((tape.scalar_f64(sl) - (-3.0)).abs() < 1e-12);
    }

    #[test]
    fn mean_gradient_broadcasts() {
        let mut tape = Tape::<f32>::new();
        let x = tape.var(Tensor::full(&[3, 4], 2.0));
        let m = tape.mean(x).unwrap();
        let grads = tape.backward(m).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.len(), 12);
        for &g in gx {
            assert!((g - 1.0 / 12.0).abs() < 1e-7);
        }
    }

    #[test]
    fn mse_basics() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t32(&[2], &[0.0, 0.0]).map_to_f64_tensor());
        let b = tape.constant(t32(&[2], &[2.0, 2.0]).map_to_f64_tensor());
        let m = tape.mse(a, b).unwrap();
        assert_eq!(tape.scalar_f64(m), 4.0);
        let same = tape.mse(a, a).unwrap();
        assert_eq!(tape.scalar_f64(same), 0.0);
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[1, 4]));
        let loss = tape.softmax_cross_entropy(logits, &[2]).unwrap();
        assert!((tape.scalar_f64(loss) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_confident_logit() {
        let mut tape = Tape::<f64>::new();
        let mut t = Tensor::zeros(&[1, 3]);
        t.data_mut()[1] = 100.0;
        let logits = tape.constant(t);
        let loss = tape.softmax_cross_entropy(logits, &[1]).unwrap();
        assert!(tape.scalar_f64(loss) < 1e-9);
    }

    #[test]
    fn softmax_ce_label_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[4]),
            Err(crate::error::Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn backward_linear_in_weights() {
        // loss = sum(w * x) with x constant => grad(w) = x
        let mut tape = Tape::<f32>::new();
        let w = tape.var(t32(&[3], &[0.1, 0.2, 0.3]));
        let x = tape.constant(t32(&[3], &[4.0, 5.0, 6.0]));
        let p = tape.mul(w, x).unwrap();
        let loss = tape.sum(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[4.0, 5.0, 6.0]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn sequential_backward_accumulates() {
        let mut tape = Tape::<f32>::new();
        let w = tape.var(t32(&[2], &[1.0, 2.0]));
        let s = tape.sum(w).unwrap();
        let d = tape.scale(w, 3.0);
        let s2 = tape.sum(d).unwrap();
        let mut grads = tape.backward(s).unwrap();
        tape.backward_into(s2, &mut grads).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn fanout_accumulates_exactly() {
        // f(x) + g(x) gradient equals grad_f + grad_g
        let mut tape = Tape::<f32>::new();
        let x = tape.var(t32(&[2], &[1.5, -2.0]));
        let f = tape.sum(x).unwrap();
        let xx = tape.mul(x, x).unwrap();
        let gsum = tape.sum(xx).unwrap();
        let total = tape.add(f, gsum).unwrap();
        let grads = tape.backward(total).unwrap();
        // d/dx (x + x^2) = 1 + 2x
        assert_eq!(grads.get(x).unwrap(), &[1.0 + 3.0, 1.0 - 4.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.var(t32(&[2], &[1.0, 2.0]));
        let d = tape.detach(x);
        assert_eq!(tape.value(d), tape.value(x));
        let loss = tape.sum(d).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn detach_product_gradient_is_x_not_2x() {
        let mut tape = Tape::<f32>::new();
        let x = tape.var(t32(&[3], &[1.0, -2.0, 3.0]));
        let d = tape.detach(x);
        let p = tape.mul(x, d).unwrap();
        let loss = tape.sum(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn ste_round_values_and_identity_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.var(t32(&[3], &[1.4, -0.5, 2.5]));
        let q = tape.ste_round(x);
        // round-half-to-even
        assert_eq!(tape.value(q), &[1.0, -0.0, 2.0]);
        let loss = tape.sum(q).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t32(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t32(&[1, 1, 1, 1], &[1.0]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv2d_ones_kernel_on_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 5, 5], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        for &v in tape.value(y) {
            assert_eq!(v, 9.0);
        }
    }

    #[test]
    fn conv2d_channel_mismatch_errors() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[2, 4, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.conv2d(x, w, b, 1, 1),
            Err(crate::error::Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn conv_transpose_identity_and_shape() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t32(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t32(&[1, 1, 1, 1], &[1.0]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv_transpose2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let x2 = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let w2 = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let y2 = tape.conv_transpose2d(x2, w2, b, 2, 0).unwrap();
        assert_eq!(tape.shape(y2), &[1, 1, 8, 8]);
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_transpose(y)> with shared weights
        use crate::rng::DetRng;
        let mut rng = DetRng::new(11);
        let rand = |shape: &[usize], rng: &mut DetRng| {
            let n: usize = shape.iter().product();
            Tensor::<f64>::from_f64_slice(
                shape,
                &(0..n).map(|_| rng.normal()).collect::<Vec<_>>(),
            )
            .unwrap()
        };
        // geometry chosen so stride tiles exactly: (ho-1)*s + kh - 2p == h
        let (stride, pad) = (2, 1);
        let xt = rand(&[2, 3, 5, 5], &mut rng);
        let wt = rand(&[4, 3, 3, 3], &mut rng);
        let ho = conv_out_dim(5, 3, stride, pad);
        let yt = rand(&[2, 4, ho, ho], &mut rng);

        let mut tape = Tape::<f64>::new();
        let x = tape.constant(xt.clone());
        let w = tape.constant(wt.clone());
        let b0 = tape.constant(Tensor::zeros(&[4]));
        let cx = tape.conv2d(x, w, b0, stride, pad).unwrap();
        let lhs: f64 = tape
            .value(cx)
            .iter()
            .zip(yt.data())
            .map(|(a, b)| a * b)
            .sum();

        // transpose weight layout [K,Cin,kh,kw] -> [K as Cin-of-transpose...]
        let y = tape.constant(yt);
        let b1 = tape.constant(Tensor::zeros(&[3]));
        // conv_transpose2d wants [Cin=K, K=3, kh, kw]; wt is [4,3,3,3] already
        let w2 = tape.constant(wt);
        let ty = tape.conv_transpose2d(y, w2, b1, stride, pad).unwrap();
        assert_eq!(tape.shape(ty), &[2, 3, 5, 5]);
        let rhs: f64 = tape
            .value(ty)
            .iter()
            .zip(xt.data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-9, "lhs={lhs} rhs={rhs}");
    }

    #[test]
    fn log_domain_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t32(&[2], &[1.0, -1.0]));
        assert!(tape.log(x).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.var(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn broadcast_bias_add() {
        let mut tape = Tape::<f32>::new();
        let x = tape.var(Tensor::zeros(&[2, 3, 2, 2]));
        let bias = tape.var(t32(&[3, 1, 1], &[1.0, 2.0, 3.0]));
        let y = tape.add(x, bias).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 2, 2]);
        assert_eq!(tape.value(y)[0], 1.0);
        assert_eq!(tape.value(y)[4], 2.0);
        assert_eq!(tape.value(y)[8], 3.0);
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s).unwrap();
        // each bias channel covers N*H*W = 8 positions
        assert_eq!(grads.get(bias).unwrap(), &[8.0, 8.0, 8.0]);
    }

    impl Tensor<f32> {
        fn map_to_f64_tensor(&self) -> Tensor<f64> {
            Tensor::from_f64_slice(self.shape(), &self.map_to_f64()).unwrap()
        }
    }
}
