//! Raw array kernels behind the tape ops: im2col-based convolutions,
//! pooling and normalization, each with a matching backward.
//!
//! Layout convention is `[batch, channels, height, width]` throughout.

use super::elem::Elem;
use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4, Axis};

/// Output spatial size of a convolution.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Output spatial size of a transposed convolution.
pub fn convt_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

/// Unfold `x` into a `[C*k*k, B*OH*OW]` matrix (zero padding).
pub fn im2col<E: Elem>(x: &ArrayView4<E>, k: usize, stride: usize, pad: usize) -> Array2<E> {
    let (b, c, h, w) = x.dim();
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let mut cols = Array2::<E>::zeros((c * k * k, b * oh * ow));
    {
        let cs = cols.as_slice_mut().expect("cols is contiguous");
        let ncols = b * oh * ow;
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let row_off = row * ncols;
                    for bi in 0..b {
                        let xs = x.slice(s![bi, ci, .., ..]);
                        let xs = xs.to_slice().expect("input is contiguous");
                        for ohi in 0..oh {
                            let ih = (ohi * stride + ki) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let ih = ih as usize;
                            let dst_base = row_off + (bi * oh + ohi) * ow;
                            // iw = owi*stride + kj - pad must be in [0, w)
                            let mut owi = 0usize;
                            while (owi * stride + kj) < pad {
                                owi += 1;
                            }
                            while owi < ow {
                                let iw = owi * stride + kj - pad;
                                if iw >= w {
                                    break;
                                }
                                cs[dst_base + owi] = xs[ih * w + iw];
                                owi += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the columns back: exact adjoint of [`im2col`].
/// `cols` is `[C*k*k, B*OH*OW]`; the result has shape `[B, C, H, W]`.
pub fn col2im<E: Elem>(
    cols: &ArrayView2<E>,
    (b, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<E> {
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    debug_assert_eq!(cols.dim(), (c * k * k, b * oh * ow));
    let mut out = Array4::<E>::zeros((b, c, h, w));
    let cs = cols.as_slice().expect("cols is contiguous");
    let ncols = b * oh * ow;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let row_off = row * ncols;
                for bi in 0..b {
                    let mut xs = out.slice_mut(s![bi, ci, .., ..]);
                    let xs = xs.as_slice_mut().expect("output is contiguous");
                    for ohi in 0..oh {
                        let ih = (ohi * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let ih = ih as usize;
                        let src_base = row_off + (bi * oh + ohi) * ow;
                        let mut owi = 0usize;
                        while (owi * stride + kj) < pad {
                            owi += 1;
                        }
                        while owi < ow {
                            let iw = owi * stride + kj - pad;
                            if iw >= w {
                                break;
                            }
                            xs[ih * w + iw] = xs[ih * w + iw] + cs[src_base + owi];
                            owi += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Reorder a `[O, B*OH*OW]` matrix into `[B, O, OH, OW]`.
fn mat_to_bchw<E: Elem>(m: Array2<E>, b: usize, oh: usize, ow: usize) -> Array4<E> {
    let o = m.dim().0;
    let m = m.into_shape_with_order((o, b, oh, ow)).expect("shape");
    let mut out = Array4::<E>::zeros((b, o, oh, ow));
    out.assign(&m.permuted_axes([1, 0, 2, 3]));
    out
}

/// Reorder `[B, O, OH, OW]` into `[O, B*OH*OW]`.
fn bchw_to_mat<E: Elem>(x: &ArrayView4<E>) -> Array2<E> {
    let (b, o, oh, ow) = x.dim();
    let mut m = Array4::<E>::zeros((o, b, oh, ow));
    m.assign(&x.permuted_axes([1, 0, 2, 3]));
    m.into_shape_with_order((o, b * oh * ow)).expect("shape")
}

/// `x: [B,C,H,W]`, `w: [O,C,k,k]`, optional bias `[O]`.
pub fn conv2d_fwd<E: Elem>(
    x: &ArrayView4<E>,
    w: &ArrayView4<E>,
    bias: Option<&ArrayView1<E>>,
    stride: usize,
    pad: usize,
) -> Array4<E> {
    let (b, c, h, wd) = x.dim();
    let (o, ci, k, k2) = w.dim();
    assert_eq!(c, ci, "conv2d channel mismatch");
    assert_eq!(k, k2, "square kernels only");
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(wd, k, stride, pad);
    let cols = im2col(x, k, stride, pad);
    let w_mat = w
        .to_shape((o, c * k * k))
        .expect("weight is contiguous")
        .to_owned();
    let out_mat = w_mat.dot(&cols);
    let mut out = mat_to_bchw(out_mat, b, oh, ow);
    if let Some(bias) = bias {
        for mut ob in out.axis_iter_mut(Axis(0)) {
            for (oc, mut map) in ob.axis_iter_mut(Axis(0)).enumerate() {
                let bv = bias[oc];
                map.mapv_inplace(|v| v + bv);
            }
        }
    }
    out
}

/// Gradients of [`conv2d_fwd`]. Returns `(g_x, g_w, g_b)`; `g_x` is only
/// computed when `need_gx` is set.
pub fn conv2d_bwd<E: Elem>(
    x: &ArrayView4<E>,
    w: &ArrayView4<E>,
    g_out: &ArrayView4<E>,
    stride: usize,
    pad: usize,
    need_gx: bool,
) -> (Option<Array4<E>>, Array4<E>, Array1<E>) {
    let (b, c, h, wd) = x.dim();
    let (o, _, k, _) = w.dim();
    let g_mat = bchw_to_mat(g_out); // [O, B*OH*OW]
    let g_b = g_mat.sum_axis(Axis(1));
    let cols = im2col(x, k, stride, pad);
    let g_w_mat = g_mat.dot(&cols.t()); // [O, C*k*k]
    let g_w = g_w_mat
        .into_shape_with_order((o, c, k, k))
        .expect("shape");
    let g_x = if need_gx {
        let w_mat = w
            .to_shape((o, c * k * k))
            .expect("weight is contiguous")
            .to_owned();
        let g_cols = w_mat.t().dot(&g_mat); // [C*k*k, B*OH*OW]
        Some(col2im(&g_cols.view(), (b, c, h, wd), k, stride, pad))
    } else {
        None
    };
    (g_x, g_w, g_b)
}

/// Transposed convolution. `x: [B,C,H,W]`, `w: [C,O,k,k]` (input-major),
/// output `[B,O,(H-1)s+k-2p,(W-1)s+k-2p]`.
pub fn convt2d_fwd<E: Elem>(
    x: &ArrayView4<E>,
    w: &ArrayView4<E>,
    bias: Option<&ArrayView1<E>>,
    stride: usize,
    pad: usize,
) -> Array4<E> {
    let (b, c, h, wd) = x.dim();
    let (ci, o, k, _) = w.dim();
    assert_eq!(c, ci, "conv_transpose2d channel mismatch");
    let oh = convt_out_dim(h, k, stride, pad);
    let ow = convt_out_dim(wd, k, stride, pad);
    let x_mat = bchw_to_mat(x); // [C, B*H*W]
    let w_mat = w
        .to_shape((c, o * k * k))
        .expect("weight is contiguous")
        .to_owned();
    let cols = w_mat.t().dot(&x_mat); // [O*k*k, B*H*W]
    let mut out = col2im(&cols.view(), (b, o, oh, ow), k, stride, pad);
    if let Some(bias) = bias {
        for mut ob in out.axis_iter_mut(Axis(0)) {
            for (oc, mut map) in ob.axis_iter_mut(Axis(0)).enumerate() {
                let bv = bias[oc];
                map.mapv_inplace(|v| v + bv);
            }
        }
    }
    out
}

/// Gradients of [`convt2d_fwd`].
pub fn convt2d_bwd<E: Elem>(
    x: &ArrayView4<E>,
    w: &ArrayView4<E>,
    g_out: &ArrayView4<E>,
    stride: usize,
    pad: usize,
    need_gx: bool,
) -> (Option<Array4<E>>, Array4<E>, Array1<E>) {
    let (b, c, h, wd) = x.dim();
    let (_, o, k, _) = w.dim();
    let g_cols = im2col(g_out, k, stride, pad); // [O*k*k, B*H*W]
    let g_b = g_out
        .sum_axis(Axis(3))
        .sum_axis(Axis(2))
        .sum_axis(Axis(0));
    let x_mat = bchw_to_mat(x); // [C, B*H*W]
    let g_w_mat = x_mat.dot(&g_cols.t()); // [C, O*k*k]
    let g_w = g_w_mat
        .into_shape_with_order((c, o, k, k))
        .expect("shape");
    let g_x = if need_gx {
        let w_mat = w
            .to_shape((c, o * k * k))
            .expect("weight is contiguous")
            .to_owned();
        let g_x_mat = w_mat.dot(&g_cols); // [C, B*H*W]
        Some(mat_to_bchw(g_x_mat, b, h, wd))
    } else {
        None
    };
    (g_x, g_w, g_b)
}

/// 2x2 average pooling with stride 2. Requires even spatial dims.
pub fn avgpool2_fwd<E: Elem>(x: &ArrayView4<E>) -> Array4<E> {
    let (b, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
    let quarter = E::from_f64(0.25);
    let mut out = Array4::<E>::zeros((b, c, h / 2, w / 2));
    for bi in 0..b {
        for ci in 0..c {
            let xs = x.slice(s![bi, ci, .., ..]);
            let mut os = out.slice_mut(s![bi, ci, .., ..]);
            for oi in 0..h / 2 {
                for oj in 0..w / 2 {
                    let sum = xs[[2 * oi, 2 * oj]]
                        + xs[[2 * oi, 2 * oj + 1]]
                        + xs[[2 * oi + 1, 2 * oj]]
                        + xs[[2 * oi + 1, 2 * oj + 1]];
                    os[[oi, oj]] = sum * quarter;
                }
            }
        }
    }
    out
}

pub fn avgpool2_bwd<E: Elem>(g_out: &ArrayView4<E>, h: usize, w: usize) -> Array4<E> {
    let (b, c, oh, ow) = g_out.dim();
    let quarter = E::from_f64(0.25);
    let mut g = Array4::<E>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let gs = g_out.slice(s![bi, ci, .., ..]);
            let mut gx = g.slice_mut(s![bi, ci, .., ..]);
            for oi in 0..oh {
                for oj in 0..ow {
                    let v = gs[[oi, oj]] * quarter;
                    gx[[2 * oi, 2 * oj]] = v;
                    gx[[2 * oi, 2 * oj + 1]] = v;
                    gx[[2 * oi + 1, 2 * oj]] = v;
                    gx[[2 * oi + 1, 2 * oj + 1]] = v;
                }
            }
        }
    }
    g
}

/// Instance normalization without affine parameters, biased variance.
/// Returns the normalized tensor and `inv_std` per `(batch, channel)`.
pub fn instance_norm_fwd<E: Elem>(x: &ArrayView4<E>, eps: E) -> (Array4<E>, Array2<E>) {
    let (b, c, h, w) = x.dim();
    let n = E::from_usize(h * w);
    let mut out = Array4::<E>::zeros((b, c, h, w));
    let mut inv_std = Array2::<E>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let xs = x.slice(s![bi, ci, .., ..]);
            let mean = xs.sum() / n;
            let mut var = E::zero();
            for &v in xs.iter() {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / n;
            let is = (var + eps).sqrt().recip();
            inv_std[[bi, ci]] = is;
            let mut os = out.slice_mut(s![bi, ci, .., ..]);
            os.assign(&xs);
            os.mapv_inplace(|v| (v - mean) * is);
        }
    }
    (out, inv_std)
}

/// Backward of instance norm given the normalized output `y` and cached
/// `inv_std`. `dx = inv_std * (g - mean(g) - y * mean(g*y))`, means over HW.
pub fn instance_norm_bwd<E: Elem>(
    y: &ArrayView4<E>,
    inv_std: &ArrayView2<E>,
    g: &ArrayView4<E>,
) -> Array4<E> {
    let (b, c, h, w) = y.dim();
    let n = E::from_usize(h * w);
    let mut gx = Array4::<E>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let ys = y.slice(s![bi, ci, .., ..]);
            let gs = g.slice(s![bi, ci, .., ..]);
            let mut m1 = E::zero();
            let mut m2 = E::zero();
            for (&yv, &gv) in ys.iter().zip(gs.iter()) {
                m1 = m1 + gv;
                m2 = m2 + gv * yv;
            }
            m1 = m1 / n;
            m2 = m2 / n;
            let is = inv_std[[bi, ci]];
            let mut out = gx.slice_mut(s![bi, ci, .., ..]);
            for ((ov, &yv), &gv) in out.iter_mut().zip(ys.iter()).zip(gs.iter()) {
                *ov = is * (gv - m1 - yv * m2);
            }
        }
    }
    gx
}

/// Layer normalization over (C,H,W) per instance with per-channel affine.
/// Returns `(y, x_hat, inv_std)`.
pub fn layer_norm_fwd<E: Elem>(
    x: &ArrayView4<E>,
    gain: &ArrayView1<E>,
    shift: &ArrayView1<E>,
    eps: E,
) -> (Array4<E>, Array4<E>, Array1<E>) {
    let (b, c, h, w) = x.dim();
    let n = E::from_usize(c * h * w);
    let mut x_hat = Array4::<E>::zeros((b, c, h, w));
    let mut y = Array4::<E>::zeros((b, c, h, w));
    let mut inv_std = Array1::<E>::zeros(b);
    for bi in 0..b {
        let xs = x.slice(s![bi, .., .., ..]);
        let mean = xs.sum() / n;
        let mut var = E::zero();
        for &v in xs.iter() {
            let d = v - mean;
            var = var + d * d;
        }
        var = var / n;
        let is = (var + eps).sqrt().recip();
        inv_std[bi] = is;
        for ci in 0..c {
            let g = gain[ci];
            let s0 = shift[ci];
            let xsc = x.slice(s![bi, ci, .., ..]);
            let mut hs = x_hat.slice_mut(s![bi, ci, .., ..]);
            let mut ys = y.slice_mut(s![bi, ci, .., ..]);
            for ((hv, yv), &xv) in hs.iter_mut().zip(ys.iter_mut()).zip(xsc.iter()) {
                let xh = (xv - mean) * is;
                *hv = xh;
                *yv = g * xh + s0;
            }
        }
    }
    (y, x_hat, inv_std)
}

pub fn layer_norm_bwd<E: Elem>(
    x_hat: &ArrayView4<E>,
    inv_std: &ArrayView1<E>,
    gain: &ArrayView1<E>,
    g: &ArrayView4<E>,
) -> (Array4<E>, Array1<E>, Array1<E>) {
    let (b, c, h, w) = x_hat.dim();
    let n = E::from_usize(c * h * w);
    let mut gx = Array4::<E>::zeros((b, c, h, w));
    let mut g_gain = Array1::<E>::zeros(c);
    let mut g_shift = Array1::<E>::zeros(c);
    for bi in 0..b {
        // dxhat = g * gain[c]; then the usual normalization backward.
        let mut m1 = E::zero();
        let mut m2 = E::zero();
        for ci in 0..c {
            let gc = gain[ci];
            let gs = g.slice(s![bi, ci, .., ..]);
            let hs = x_hat.slice(s![bi, ci, .., ..]);
            for (&gv, &hv) in gs.iter().zip(hs.iter()) {
                let dxh = gv * gc;
                m1 = m1 + dxh;
                m2 = m2 + dxh * hv;
                g_gain[ci] = g_gain[ci] + gv * hv;
                g_shift[ci] = g_shift[ci] + gv;
            }
        }
        m1 = m1 / n;
        m2 = m2 / n;
        let is = inv_std[bi];
        for ci in 0..c {
            let gc = gain[ci];
            let gs = g.slice(s![bi, ci, .., ..]);
            let hs = x_hat.slice(s![bi, ci, .., ..]);
            let mut os = gx.slice_mut(s![bi, ci, .., ..]);
            for ((ov, &gv), &hv) in os.iter_mut().zip(gs.iter()).zip(hs.iter()) {
                let dxh = gv * gc;
                *ov = is * (dxh - m1 - hv * m2);
            }
        }
    }
    (gx, g_gain, g_shift)
}
