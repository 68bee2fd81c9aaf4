//! Layer-level forward/backward math. Convolutions are lowered to matrix
//! multiplies via im2col so the batched 3×3 kernels run through the fast
//! gemm path.

use crate::scalar::{c, Scalar};
use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4, Axis};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Unfold (N,C,H,W) with 3×3 same-padding into a (C·9, N·H·W) matrix.
/// Column order is (n, y, x) row-major.
pub fn im2col3x3<T: Scalar>(input: &ArrayView4<T>) -> Array2<T> {
    let (n, ch, h, w) = input.dim();
    let mut cols = Array2::<T>::zeros((ch * 9, n * h * w));
    let inp = input.as_standard_layout();
    let inp_slice = inp.as_slice().expect("standard layout");
    let zero = T::zero();
    for ci in 0..ch {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = (ci * 3 + ky) * 3 + kx;
                let mut out_row = cols.row_mut(row);
                let out_slice = out_row.as_slice_mut().expect("contiguous row");
                for ni in 0..n {
                    let base = (ni * ch + ci) * h * w;
                    let out_base = ni * h * w;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        let dst = &mut out_slice[out_base + y * w..out_base + (y + 1) * w];
                        if sy < 0 || sy >= h as isize {
                            dst.fill(zero);
                            continue;
                        }
                        let src_row = &inp_slice[base + sy as usize * w..base + (sy as usize + 1) * w];
                        match kx {
                            0 => {
                                dst[0] = zero;
                                dst[1..].copy_from_slice(&src_row[..w - 1]);
                            }
                            1 => dst.copy_from_slice(src_row),
                            _ => {
                                dst[w - 1] = zero;
                                dst[..w - 1].copy_from_slice(&src_row[1..]);
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3x3`]: scatter-add a (C·9, N·H·W) matrix back into an
/// (N,C,H,W) gradient.
pub fn col2im3x3<T: Scalar>(cols: &ArrayView2<T>, n: usize, ch: usize, h: usize, w: usize) -> Array4<T> {
    let mut grad = Array4::<T>::zeros((n, ch, h, w));
    let g = grad.as_slice_mut().expect("standard layout");
    for ci in 0..ch {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row_idx = (ci * 3 + ky) * 3 + kx;
                let row = cols.row(row_idx);
                let row_slice = row.as_slice().expect("contiguous row");
                for ni in 0..n {
                    let base = (ni * ch + ci) * h * w;
                    let src_base = ni * h * w;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst_off = base + sy as usize * w;
                        let src = &row_slice[src_base + y * w..src_base + (y + 1) * w];
                        match kx {
                            0 => {
                                for x in 1..w {
                                    g[dst_off + x - 1] += src[x];
                                }
                            }
                            1 => {
                                for x in 0..w {
                                    g[dst_off + x] += src[x];
                                }
                            }
                            _ => {
                                for x in 0..w - 1 {
                                    g[dst_off + x + 1] += src[x];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    grad
}

pub struct ConvCache<T: Scalar> {
    pub cols: Array2<T>,
    pub in_shape: (usize, usize, usize, usize),
}

/// 3×3 same-padding convolution. `weight` is (C_out, C_in, 3, 3).
pub fn conv3x3_forward<T: Scalar>(
    input: &ArrayView4<T>,
    weight: &ArrayView4<T>,
    bias: &ArrayView1<T>,
) -> (Array4<T>, ConvCache<T>) {
    let (n, ch, h, w) = input.dim();
    let out_ch = weight.dim().0;
    let cols = im2col3x3(input);
    let w2 = weight
        .to_shape((out_ch, ch * 9))
        .expect("weight reshape")
        .to_owned();
    let mut out2 = w2.dot(&cols); // (out_ch, N*H*W)
    for (mut row, b) in out2.axis_iter_mut(Axis(0)).zip(bias.iter()) {
        row += *b;
    }
    // (out_ch, N, H, W) -> (N, out_ch, H, W)
    let out = out2
        .into_shape_with_order((out_ch, n, h, w))
        .expect("conv output reshape")
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .to_owned();
    (out, ConvCache { cols, in_shape: (n, ch, h, w) })
}

pub struct ConvGrads<T: Scalar> {
    pub d_weight: Array4<T>,
    pub d_bias: Array1<T>,
    pub d_input: Option<Array4<T>>,
}

pub fn conv3x3_backward<T: Scalar>(
    grad_out: &ArrayView4<T>,
    weight: &ArrayView4<T>,
    cache: &ConvCache<T>,
    need_input_grad: bool,
) -> ConvGrads<T> {
    let (n, ch, h, w) = cache.in_shape;
    let (gn, out_ch, gh, gw) = grad_out.dim();
    debug_assert_eq!((gn, gh, gw), (n, h, w));
    let g2 = grad_out
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .to_shape((out_ch, n * h * w))
        .expect("grad reshape")
        .to_owned();
    let d_w2 = g2.dot(&cache.cols.t()); // (out_ch, C*9)
    let d_weight = d_w2
        .into_shape_with_order((out_ch, ch, 3, 3))
        .expect("dW reshape");
    let d_bias = g2.sum_axis(Axis(1));
    let d_input = if need_input_grad {
        let w2 = weight
            .to_shape((out_ch, ch * 9))
            .expect("weight reshape")
            .to_owned();
        let d_cols = w2.t().dot(&g2); // (C*9, N*H*W)
        Some(col2im3x3(&d_cols.view(), n, ch, h, w))
    } else {
        None
    };
    ConvGrads { d_weight, d_bias, d_input }
}

/// ReLU; the cache is the positivity mask of the input.
pub fn relu_forward<T: Scalar>(input: &ArrayView4<T>) -> (Array4<T>, Array4<bool>) {
    let mask = input.mapv(|v| v > T::zero());
    let out = input.mapv(|v| if v > T::zero() { v } else { T::zero() });
    (out, mask)
}

pub fn relu_backward<T: Scalar>(grad_out: &ArrayView4<T>, mask: &Array4<bool>) -> Array4<T> {
    let mut g = grad_out.to_owned();
    g.zip_mut_with(mask, |v, &m| {
        if !m {
            *v = T::zero();
        }
    });
    g
}

pub struct BnCache<T: Scalar> {
    pub x_hat: Array4<T>,
    pub inv_std: Array1<T>,
}

pub struct BnStats<T: Scalar> {
    pub mean: Array1<T>,
    pub var: Array1<T>,
}

/// Batch normalization over (N,H,W) per channel using batch statistics.
/// Returns the batch stats so the caller can fold them into the running
/// averages.
pub fn batchnorm_forward_train<T: Scalar>(
    input: &ArrayView4<T>,
    scale: &ArrayView1<T>,
    shift: &ArrayView1<T>,
) -> (Array4<T>, BnCache<T>, BnStats<T>) {
    let (n, ch, h, w) = input.dim();
    let count = c::<T>((n * h * w) as f64);
    let eps = c::<T>(BN_EPS);
    let mut mean = Array1::<T>::zeros(ch);
    let mut var = Array1::<T>::zeros(ch);
    for ci in 0..ch {
        let slice = input.index_axis(Axis(1), ci);
        let m = slice.iter().copied().sum::<T>() / count;
        let v = slice.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / count;
        mean[ci] = m;
        var[ci] = v;
    }
    let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
    let mut x_hat = input.to_owned();
    let mut out = Array4::<T>::zeros((n, ch, h, w));
    for ci in 0..ch {
        let (m, is, g, b) = (mean[ci], inv_std[ci], scale[ci], shift[ci]);
        let mut xh = x_hat.index_axis_mut(Axis(1), ci);
        xh.mapv_inplace(|x| (x - m) * is);
        let mut o = out.index_axis_mut(Axis(1), ci);
        o.assign(&xh);
        o.mapv_inplace(|x| x * g + b);
    }
    (out, BnCache { x_hat, inv_std }, BnStats { mean, var })
}

/// Evaluation-mode batch normalization using running statistics.
pub fn batchnorm_forward_eval<T: Scalar>(
    input: &ArrayView4<T>,
    scale: &ArrayView1<T>,
    shift: &ArrayView1<T>,
    running_mean: &ArrayView1<T>,
    running_var: &ArrayView1<T>,
) -> Array4<T> {
    let ch = input.dim().1;
    let eps = c::<T>(BN_EPS);
    let mut out = input.to_owned();
    for ci in 0..ch {
        let m = running_mean[ci];
        let is = T::one() / (running_var[ci] + eps).sqrt();
        let (g, b) = (scale[ci], shift[ci]);
        let mut o = out.index_axis_mut(Axis(1), ci);
        o.mapv_inplace(|x| (x - m) * is * g + b);
    }
    out
}

pub struct BnGrads<T: Scalar> {
    pub d_scale: Array1<T>,
    pub d_shift: Array1<T>,
    pub d_input: Array4<T>,
}

pub fn batchnorm_backward<T: Scalar>(
    grad_out: &ArrayView4<T>,
    scale: &ArrayView1<T>,
    cache: &BnCache<T>,
) -> BnGrads<T> {
    let (n, ch, h, w) = grad_out.dim();
    let count = c::<T>((n * h * w) as f64);
    let mut d_scale = Array1::<T>::zeros(ch);
    let mut d_shift = Array1::<T>::zeros(ch);
    let mut d_input = Array4::<T>::zeros((n, ch, h, w));
    for ci in 0..ch {
        let dy = grad_out.index_axis(Axis(1), ci);
        let xh = cache.x_hat.index_axis(Axis(1), ci);
        let sum_dy = dy.iter().copied().sum::<T>();
        let sum_dy_xh = dy.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>();
        d_shift[ci] = sum_dy;
        d_scale[ci] = sum_dy_xh;
        let coeff = scale[ci] * cache.inv_std[ci];
        let mean_dy = sum_dy / count;
        let mean_dy_xh = sum_dy_xh / count;
        let mut di = d_input.index_axis_mut(Axis(1), ci);
        ndarray::Zip::from(&mut di).and(&dy).and(&xh).for_each(|d, &g, &x| {
            *d = coeff * (g - mean_dy - x * mean_dy_xh);
        });
    }
    BnGrads { d_scale, d_shift, d_input }
}

/// 2×2 max pooling, stride 2. Input spatial dims must be even. The cache
/// stores the flat argmax offset (0..4) per output cell.
pub fn maxpool2_forward<T: Scalar>(input: &ArrayView4<T>) -> (Array4<T>, Array4<u8>) {
    let (n, ch, h, w) = input.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even spatial dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::<T>::zeros((n, ch, oh, ow));
    let mut arg = Array4::<u8>::zeros((n, ch, oh, ow));
    for ni in 0..n {
        for ci in 0..ch {
            let plane = input.index_axis(Axis(0), ni);
            let plane = plane.index_axis(Axis(0), ci);
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = plane[[2 * y, 2 * x]];
                    let mut best_k = 0u8;
                    for k in 1..4u8 {
                        let (dy, dx) = ((k / 2) as usize, (k % 2) as usize);
                        let v = plane[[2 * y + dy, 2 * x + dx]];
                        if v > best {
                            best = v;
                            best_k = k;
                        }
                    }
                    out[[ni, ci, y, x]] = best;
                    arg[[ni, ci, y, x]] = best_k;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Scalar>(
    grad_out: &ArrayView4<T>,
    arg: &Array4<u8>,
    in_h: usize,
    in_w: usize,
) -> Array4<T> {
    let (n, ch, oh, ow) = grad_out.dim();
    let mut grad = Array4::<T>::zeros((n, ch, in_h, in_w));
    for ni in 0..n {
        for ci in 0..ch {
            for y in 0..oh {
                for x in 0..ow {
                    let k = arg[[ni, ci, y, x]];
                    let (dy, dx) = ((k / 2) as usize, (k % 2) as usize);
                    grad[[ni, ci, 2 * y + dy, 2 * x + dx]] += grad_out[[ni, ci, y, x]];
                }
            }
        }
    }
    grad
}

/// Global average pooling (N,C,H,W) -> (N,C).
pub fn gap_forward<T: Scalar>(input: &ArrayView4<T>) -> Array2<T> {
    let (n, ch, h, w) = input.dim();
    let count = c::<T>((h * w) as f64);
    let mut out = Array2::<T>::zeros((n, ch));
    for ni in 0..n {
        for ci in 0..ch {
            let s = input
                .index_axis(Axis(0), ni)
                .index_axis(Axis(0), ci)
                .iter()
                .copied()
                .sum::<T>();
            out[[ni, ci]] = s / count;
        }
    }
    out
}

pub fn gap_backward<T: Scalar>(grad_out: &ArrayView2<T>, h: usize, w: usize) -> Array4<T> {
    let (n, ch) = grad_out.dim();
    let scale = T::one() / c::<T>((h * w) as f64);
    let mut grad = Array4::<T>::zeros((n, ch, h, w));
    for ni in 0..n {
        for ci in 0..ch {
            grad.index_axis_mut(Axis(0), ni)
                .index_axis_mut(Axis(0), ci)
                .fill(grad_out[[ni, ci]] * scale);
        }
    }
    grad
}

/// Fully connected layer: y = x Wᵀ + b with `weight` of shape (out, in).
pub fn linear_forward<T: Scalar>(
    input: &ArrayView2<T>,
    weight: &ArrayView2<T>,
    bias: &ArrayView1<T>,
) -> Array2<T> {
    let mut out = input.dot(&weight.t());
    for mut row in out.axis_iter_mut(Axis(0)) {
        row += bias;
    }
    out
}

pub struct LinearGrads<T: Scalar> {
    pub d_weight: Array2<T>,
    pub d_bias: Array1<T>,
    pub d_input: Array2<T>,
}

pub fn linear_backward<T: Scalar>(
    grad_out: &ArrayView2<T>,
    input: &ArrayView2<T>,
    weight: &ArrayView2<T>,
) -> LinearGrads<T> {
    LinearGrads {
        d_weight: grad_out.t().dot(input),
        d_bias: grad_out.sum_axis(Axis(0)),
        d_input: grad_out.dot(weight),
    }
}
