//! Convolution, pooling, and resampling kernels.
//!
//! Convolutions run as im2col + a single batch-folded GEMM. Column layout is
//! `[IC*KH*KW, B*OH*OW]` with the batch index major in the column dimension,
//! so the GEMM output `[OC, B*OH*OW]` scatters back to NCHW with one pass.

use ndarray::{Array1, Array2, Array4, ArrayView4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dCfg {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Conv2dCfg {
    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        (input + 2 * self.pad - span) / self.stride + 1
    }
}

pub fn im2col(x: &ArrayView4<f32>, kh: usize, kw: usize, cfg: &Conv2dCfg) -> Array2<f32> {
    let (b, ic, h, w) = x.dim();
    let oh = cfg.out_size(h, kh);
    let ow = cfg.out_size(w, kw);
    let k = ic * kh * kw;
    let mut col = Array2::<f32>::zeros((k, b * oh * ow));
    {
        let col_slice = col.as_slice_mut().unwrap();
        let x_slice = x.as_slice().expect("im2col expects contiguous input");
        let row_stride = b * oh * ow;
        for bi in 0..b {
            let x_base = bi * ic * h * w;
            let col_base = bi * oh * ow;
            for ci in 0..ic {
                let plane = &x_slice[x_base + ci * h * w..x_base + (ci + 1) * h * w];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let row = (ci * kh + ki) * kw + kj;
                        let out_row = &mut col_slice[row * row_stride + col_base
                            ..row * row_stride + col_base + oh * ow];
                        for oy in 0..oh {
                            let iy = (oy * cfg.stride + ki * cfg.dilation) as isize
                                - cfg.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            for ox in 0..ow {
                                let ix = (ox * cfg.stride + kj * cfg.dilation) as isize
                                    - cfg.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                out_row[oy * ow + ox] = plane[iy * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add of column gradients back to the input layout. Inverse of `im2col`.
pub fn col2im(
    dcol: &Array2<f32>,
    b: usize,
    ic: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    cfg: &Conv2dCfg,
) -> Array4<f32> {
    let oh = cfg.out_size(h, kh);
    let ow = cfg.out_size(w, kw);
    let mut dx = Array4::<f32>::zeros((b, ic, h, w));
    let dx_slice = dx.as_slice_mut().unwrap();
    let dcol_slice = dcol.as_slice().expect("col2im expects standard layout");
    let row_stride = b * oh * ow;
    for bi in 0..b {
        let x_base = bi * ic * h * w;
        let col_base = bi * oh * ow;
        for ci in 0..ic {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let in_row =
                        &dcol_slice[row * row_stride + col_base..row * row_stride + col_base + oh * ow];
                    for oy in 0..oh {
                        let iy =
                            (oy * cfg.stride + ki * cfg.dilation) as isize - cfg.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..ow {
                            let ix = (ox * cfg.stride + kj * cfg.dilation) as isize
                                - cfg.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx_slice[x_base + ci * h * w + iy * w + ix as usize] +=
                                in_row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Forward convolution. Returns the output and the column matrix (for reuse
/// in the backward pass) when `keep_col` is set.
pub fn conv2d_forward(
    x: &ArrayView4<f32>,
    w: &ArrayView4<f32>,
    bias: Option<&Array1<f32>>,
    cfg: &Conv2dCfg,
    keep_col: bool,
) -> (Array4<f32>, Option<Array2<f32>>) {
    let (b, _ic, h, wid) = x.dim();
    let (oc, ic_w, kh, kw) = w.dim();
    debug_assert_eq!(_ic, ic_w);
    let oh = cfg.out_size(h, kh);
    let ow = cfg.out_size(wid, kw);
    let col = im2col(x, kh, kw, cfg);
    let w_mat = w
        .to_shape((oc, ic_w * kh * kw))
        .expect("weight reshape")
        .to_owned();
    let out_mat = w_mat.dot(&col); // [OC, B*OH*OW]
    let mut out = Array4::<f32>::zeros((b, oc, oh, ow));
    {
        let out_slice = out.as_slice_mut().unwrap();
        let out_mat_slice = out_mat.as_slice().unwrap();
        let n = oh * ow;
        for bi in 0..b {
            for o in 0..oc {
                let src = &out_mat_slice[o * b * n + bi * n..o * b * n + (bi + 1) * n];
                let dst = &mut out_slice[bi * oc * n + o * n..bi * oc * n + (o + 1) * n];
                if let Some(bias) = bias {
                    let bv = bias[o];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = s + bv;
                    }
                } else {
                    dst.copy_from_slice(src);
                }
            }
        }
    }
    (out, if keep_col { Some(col) } else { None })
}

pub struct ConvGrads {
    pub dx: Array4<f32>,
    pub dw: Array4<f32>,
    pub db: Option<Array1<f32>>,
}

pub fn conv2d_backward(
    dy: &ArrayView4<f32>,
    x: &ArrayView4<f32>,
    w: &ArrayView4<f32>,
    has_bias: bool,
    cfg: &Conv2dCfg,
    saved_col: Option<&Array2<f32>>,
) -> ConvGrads {
    let (b, ic, h, wid) = x.dim();
    let (oc, _, kh, kw) = w.dim();
    let (_, _, oh, ow) = dy.dim();
    let n = oh * ow;

    // [OC, B*OH*OW] view of dy (batch-major columns, matching im2col layout)
    let mut dy_mat = Array2::<f32>::zeros((oc, b * n));
    {
        let dst = dy_mat.as_slice_mut().unwrap();
        let src = dy.as_slice().expect("contiguous dy");
        for bi in 0..b {
            for o in 0..oc {
                dst[o * b * n + bi * n..o * b * n + (bi + 1) * n]
                    .copy_from_slice(&src[bi * oc * n + o * n..bi * oc * n + (o + 1) * n]);
            }
        }
    }

    let owned_col;
    let col = match saved_col {
        Some(c) => c,
        None => {
            owned_col = im2col(x, kh, kw, cfg);
            &owned_col
        }
    };

    let dw_mat = dy_mat.dot(&col.t()); // [OC, K]
    let dw = dw_mat
        .into_shape_with_order((oc, ic, kh, kw))
        .expect("dw reshape");

    let w_mat = w
        .to_shape((oc, ic * kh * kw))
        .expect("weight reshape")
        .to_owned();
    let dcol = w_mat.t().dot(&dy_mat); // [K, B*OH*OW]
    let dx = col2im(&dcol, b, ic, h, wid, kh, kw, cfg);

    let db = has_bias.then(|| {
        let mut db = Array1::<f32>::zeros(oc);
        for o in 0..oc {
            db[o] = dy_mat.row(o).iter().map(|&v| v as f64).sum::<f64>() as f32;
        }
        db
    });

    ConvGrads { dx, dw, db }
}

pub fn max_pool_forward(x: &ArrayView4<f32>, k: usize, s: usize, p: usize) -> Array4<f32> {
    let (b, c, h, w) = x.dim();
    let cfg = Conv2dCfg { stride: s, pad: p, dilation: 1 };
    let oh = cfg.out_size(h, k);
    let ow = cfg.out_size(w, k);
    let mut out = Array4::<f32>::from_elem((b, c, oh, ow), f32::NEG_INFINITY);
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let v = x[[bi, ci, iy as usize, ix as usize]];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out[[bi, ci, oy, ox]] = best;
                }
            }
        }
    }
    out
}

/// Routes each output gradient to the first maximal element of its window
/// (deterministic tie-breaking in scan order).
pub fn max_pool_backward(
    dy: &ArrayView4<f32>,
    x: &ArrayView4<f32>,
    k: usize,
    s: usize,
    p: usize,
) -> Array4<f32> {
    let (b, c, h, w) = x.dim();
    let (_, _, oh, ow) = dy.dim();
    let mut dx = Array4::<f32>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut arg = None;
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let v = x[[bi, ci, iy as usize, ix as usize]];
                            if v > best {
                                best = v;
                                arg = Some((iy as usize, ix as usize));
                            }
                        }
                    }
                    if let Some((iy, ix)) = arg {
                        dx[[bi, ci, iy, ix]] += dy[[bi, ci, oy, ox]];
                    }
                }
            }
        }
    }
    dx
}

/// Sample positions and weights for bilinear resampling along one axis
/// (half-pixel centers, clamped to the border).
fn bilinear_axis(out_len: usize, in_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = (src - i0 as f64).min(1.0) as f32;
            (i0, i1, frac)
        })
        .collect()
}

pub fn resize_bilinear_forward(x: &ArrayView4<f32>, oh: usize, ow: usize) -> Array4<f32> {
    let (b, c, h, w) = x.dim();
    let ys = bilinear_axis(oh, h);
    let xs = bilinear_axis(ow, w);
    let mut out = Array4::<f32>::zeros((b, c, oh, ow));
    for bi in 0..b {
        for ci in 0..c {
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let v00 = x[[bi, ci, y0, x0]];
                    let v01 = x[[bi, ci, y0, x1]];
                    let v10 = x[[bi, ci, y1, x0]];
                    let v11 = x[[bi, ci, y1, x1]];
                    let top = v00 + (v01 - v00) * fx;
                    let bot = v10 + (v11 - v10) * fx;
                    out[[bi, ci, oy, ox]] = top + (bot - top) * fy;
                }
            }
        }
    }
    out
}

pub fn resize_bilinear_backward(
    dy: &ArrayView4<f32>,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Array4<f32> {
    let (_, _, oh, ow) = dy.dim();
    let ys = bilinear_axis(oh, h);
    let xs = bilinear_axis(ow, w);
    let mut dx = Array4::<f32>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let g = dy[[bi, ci, oy, ox]];
                    dx[[bi, ci, y0, x0]] += g * (1.0 - fy) * (1.0 - fx);
                    dx[[bi, ci, y0, x1]] += g * (1.0 - fy) * fx;
                    dx[[bi, ci, y1, x0]] += g * fy * (1.0 - fx);
                    dx[[bi, ci, y1, x1]] += g * fy * fx;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{fill_normal, stream_from_seed};
    use ndarray::Array4;

    fn naive_conv(
        x: &Array4<f32>,
        w: &Array4<f32>,
        bias: Option<&Array1<f32>>,
        cfg: &Conv2dCfg,
    ) -> Array4<f32> {
        let (b, ic, h, wid) = x.dim();
        let (oc, _, kh, kw) = w.dim();
        let oh = cfg.out_size(h, kh);
        let ow = cfg.out_size(wid, kw);
        let mut out = Array4::<f32>::zeros((b, oc, oh, ow));
        for bi in 0..b {
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.map(|bv| bv[o] as f64).unwrap_or(0.0);
                        for ci in 0..ic {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * cfg.stride + ky * cfg.dilation) as isize
                                        - cfg.pad as isize;
                                    let ix = (ox * cfg.stride + kx * cfg.dilation) as isize
                                        - cfg.pad as isize;
                                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= wid as isize {
                                        continue;
                                    }
                                    acc += (x[[bi, ci, iy as usize, ix as usize]]
                                        * w[[o, ci, ky, kx]])
                                        as f64;
                                }
                            }
                        }
                        out[[bi, o, oy, ox]] = acc as f32;
                    }
                }
            }
        }
        out
    }

    fn random4(rng: &mut crate::rng::Stream, dims: (usize, usize, usize, usize)) -> Array4<f32> {
        let mut a = Array4::<f32>::zeros(dims);
        fill_normal(rng, a.as_slice_mut().unwrap());
        a
    }

    #[test]
    fn conv_matches_naive_across_configs() {
        let mut rng = stream_from_seed(42);
        let cases = [
            (1, 1, 1, 3, 3), // stride, pad, dilation, kh, kw
            (2, 1, 1, 3, 3),
            (1, 3, 3, 3, 3),
            (1, 5, 5, 3, 3),
            (2, 1, 1, 4, 4),
            (2, 3, 1, 7, 7),
            (1, 0, 1, 1, 1),
        ];
        for &(s, p, d, kh, kw) in &cases {
            let cfg = Conv2dCfg { stride: s, pad: p, dilation: d };
            let x = random4(&mut rng, (2, 3, 10, 12));
            let w = random4(&mut rng, (4, 3, kh, kw));
            let mut bias = Array1::<f32>::zeros(4);
            fill_normal(&mut rng, bias.as_slice_mut().unwrap());
            let (got, _) = conv2d_forward(&x.view(), &w.view(), Some(&bias), &cfg, false);
            let want = naive_conv(&x, &w, Some(&bias), &cfg);
            let diff = (&got - &want).iter().map(|v| v.abs()).fold(0.0f32, f32::max);
            assert!(diff < 1e-4, "cfg {cfg:?} max diff {diff}");
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = stream_from_seed(7);
        let cfg = Conv2dCfg { stride: 2, pad: 1, dilation: 1 };
        let x = random4(&mut rng, (2, 2, 6, 6));
        let w = random4(&mut rng, (3, 2, 3, 3));
        let mut bias = Array1::<f32>::zeros(3);
        fill_normal(&mut rng, bias.as_slice_mut().unwrap());
        // scalar loss: weighted sum of outputs with fixed projection
        let (y, col) = conv2d_forward(&x.view(), &w.view(), Some(&bias), &cfg, true);
        let proj = random4(&mut rng, y.dim());
        let dy = proj.clone();
        let grads = conv2d_backward(&dy.view(), &x.view(), &w.view(), true, &cfg, col.as_ref());

        let loss = |x: &Array4<f32>, w: &Array4<f32>, b: &Array1<f32>| -> f64 {
            let (y, _) = conv2d_forward(&x.view(), &w.view(), Some(b), &cfg, false);
            y.iter().zip(proj.iter()).map(|(&a, &p)| (a * p) as f64).sum()
        };
        let h = 1e-2f32;
        // spot-check a handful of coordinates in each tensor
        for &(i, j, k, l) in &[(0, 0, 0, 0), (1, 1, 3, 2), (0, 1, 5, 5)] {
            let mut xp = x.clone();
            xp[[i, j, k, l]] += h;
            let mut xm = x.clone();
            xm[[i, j, k, l]] -= h;
            let fd = (loss(&xp, &w, &bias) - loss(&xm, &w, &bias)) / (2.0 * h as f64);
            let an = grads.dx[[i, j, k, l]] as f64;
            assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1.0));
        }
        for &(i, j, k, l) in &[(0, 0, 0, 0), (2, 1, 2, 2), (1, 0, 1, 1)] {
            let mut wp = w.clone();
            wp[[i, j, k, l]] += h;
            let mut wm = w.clone();
            wm[[i, j, k, l]] -= h;
            let fd = (loss(&x, &wp, &bias) - loss(&x, &wm, &bias)) / (2.0 * h as f64);
            let an = grads.dw[[i, j, k, l]] as f64;
            assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1.0));
        }
        let db = grads.db.unwrap();
        for o in 0..3 {
            let mut bp = bias.clone();
            bp[o] += h;
            let mut bm = bias.clone();
            bm[o] -= h;
            let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h as f64);
            assert!((fd - db[o] as f64).abs() <= 1e-3 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn max_pool_matches_reference() {
        let mut rng = stream_from_seed(3);
        let x = random4(&mut rng, (1, 2, 7, 7));
        let y = max_pool_forward(&x.view(), 3, 2, 1);
        assert_eq!(y.dim(), (1, 2, 4, 4));
        // window at (0,0) covers rows/cols -1..2 clipped to 0..2
        let mut want = f32::NEG_INFINITY;
        for iy in 0..2 {
            for ix in 0..2 {
                want = want.max(x[[0, 0, iy, ix]]);
            }
        }
        assert_eq!(y[[0, 0, 0, 0]], want);
    }

    #[test]
    fn bilinear_identity_when_same_size() {
        let mut rng = stream_from_seed(5);
        let x = random4(&mut rng, (1, 3, 8, 8));
        let y = resize_bilinear_forward(&x.view(), 8, 8);
        let diff = (&y - &x).iter().map(|v| v.abs()).fold(0.0f32, f32::max);
        assert!(diff < 1e-6);
    }

    #[test]
    fn bilinear_backward_is_transpose() {
        // <resize(x), p> == <x, resize_backward(p)> for all x, p
        let mut rng = stream_from_seed(9);
        let x = random4(&mut rng, (1, 1, 5, 7));
        let p = random4(&mut rng, (1, 1, 11, 13));
        let y = resize_bilinear_forward(&x.view(), 11, 13);
        let lhs: f64 = y.iter().zip(p.iter()).map(|(&a, &b)| (a * b) as f64).sum();
        let dx = resize_bilinear_backward(&p.view(), 1, 1, 5, 7);
        let rhs: f64 = x.iter().zip(dx.iter()).map(|(&a, &b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0));
    }
}
