//! Raw numeric kernels behind the tape ops: broadcasting, matmul variants,
//! im2col/col2im. Everything is single-threaded and order-deterministic.

use super::real::Real;

/// Numpy-style trailing-dimension broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() {
            1
        } else {
            a[i - (ndim - a.len())]
        };
        let db = if i < ndim - b.len() {
            1
        } else {
            b[i - (ndim - b.len())]
        };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Row-major strides, with stride 0 on axes the shape broadcasts over.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let ndim = out_shape.len();
    let offset = ndim - shape.len();
    let mut strides = vec![0usize; ndim];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visit every output position of a broadcast binary op, yielding the flat
/// offsets (out, a, b). Odometer walk, row-major.
pub fn for_each_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out_shape.iter().product();
    if n == 0 {
        return;
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let ndim = out_shape.len();
    if ndim == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; ndim];
    let mut oa = 0usize;
    let mut ob = 0usize;
    for oi in 0..n {
        f(oi, oa, ob);
        // increment odometer
        for d in (0..ndim).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
        }
    }
}

/// Sum-reduce `grad` (laid out as `out_shape`) back onto `target_shape`.
pub fn reduce_to_shape<T: Real>(grad: &[T], out_shape: &[usize], target_shape: &[usize]) -> Vec<T> {
    let tn: usize = target_shape.iter().product();
    let mut out = vec![T::ZERO; tn];
    // target offsets follow the same broadcast strides the forward pass used
    for_each_broadcast(out_shape, target_shape, target_shape, |oi, ti, _| {
        out[ti] += grad[oi];
    });
    out
}

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::ZERO {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] * B[n,k]^T
pub fn matmul_a_bt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// C[m,n] = A[k,m]^T * B[k,n]
pub fn matmul_at_b<T: Real>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == T::ZERO {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

pub fn conv_transpose_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

/// Unfold one sample [c,h,w] into columns [c*kh*kw, ho*wo].
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut [T],
) {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    debug_assert_eq!(cols.len(), c * kh * kw * ho * wo);
    let mut row = 0usize;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    let drow = &mut dst[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii >= h as isize {
                        for v in drow.iter_mut() {
                            *v = T::ZERO;
                        }
                        continue;
                    }
                    let srow = &plane[ii as usize * w..(ii as usize + 1) * w];
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        drow[oj] = if jj < 0 || jj >= w as isize {
                            T::ZERO
                        } else {
                            srow[jj as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-add columns back into the [c,h,w] image.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    x: &mut [T],
) {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    debug_assert_eq!(cols.len(), c * kh * kw * ho * wo);
    let mut row = 0usize;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let prow = &mut plane[ii as usize * w..(ii as usize + 1) * w];
                    let srow = &src[oi * wo..(oi + 1) * wo];
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            prow[jj as usize] += srow[oj];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}
