//! Forward and backward kernels behind the autograd ops.
//!
//! Every function here is a pure computation on tensors; bookkeeping of the
//! gradient graph lives in [`crate::autograd`].

use crate::scalar::Scalar;
use crate::tensor::{Nchw, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.pad - kernel) / self.stride + 1
    }
}

fn is_pointwise(kh: usize, kw: usize, g: ConvGeom) -> bool {
    kh == 1 && kw == 1 && g.stride == 1 && g.pad == 0
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[ci * h * w + iy as usize * w..ci * h * w + (iy as usize + 1) * w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-d convolution of `x: [N, Cin, H, W]` with `w: [Cout, Cin, kh, kw]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, g: ConvGeom) -> Tensor<T> {
    let s = Nchw::of(x);
    let [cout, cin, kh, kw] = [w.dim(0), w.dim(1), w.dim(2), w.dim(3)];
    assert_eq!(cin, s.c, "conv2d channel mismatch: input {} vs weight {}", s.c, cin);
    let (ho, wo) = (g.out_size(s.h, kh), g.out_size(s.w, kw));
    let k = cin * kh * kw;
    let plane = ho * wo;
    let mut out = vec![T::zero(); s.n * cout * plane];
    let mut cols = if is_pointwise(kh, kw, g) { Vec::new() } else { vec![T::zero(); k * plane] };
    for n in 0..s.n {
        let xin = &x.data()[n * s.c * s.plane()..(n + 1) * s.c * s.plane()];
        let dst = &mut out[n * cout * plane..(n + 1) * cout * plane];
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b.data()[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        if is_pointwise(kh, kw, g) {
            T::gemm(cout, k, plane, w.data(), false, xin, false, dst, beta);
        } else {
            im2col(xin, s.c, s.h, s.w, kh, kw, g, ho, wo, &mut cols);
            T::gemm(cout, k, plane, w.data(), false, &cols, false, dst, beta);
        }
    }
    Tensor::from_vec(&[s.n, cout, ho, wo], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: ConvGeom,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let s = Nchw::of(x);
    let [cout, cin, kh, kw] = [w.dim(0), w.dim(1), w.dim(2), w.dim(3)];
    let (ho, wo) = (dy.dim(2), dy.dim(3));
    let k = cin * kh * kw;
    let plane = ho * wo;
    let pointwise = is_pointwise(kh, kw, g);
    let mut dw = vec![T::zero(); cout * k];
    let mut db = vec![T::zero(); cout];
    let mut dx = if need_dx { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * plane] };
    let mut dcols = if need_dx && !pointwise { vec![T::zero(); k * plane] } else { Vec::new() };
    for n in 0..s.n {
        let xin = &x.data()[n * s.c * s.plane()..(n + 1) * s.c * s.plane()];
        let g_out = &dy.data()[n * cout * plane..(n + 1) * cout * plane];
        for (co, chunk) in g_out.chunks(plane).enumerate() {
            db[co] += chunk.iter().copied().sum::<T>();
        }
        if pointwise {
            T::gemm(cout, plane, k, g_out, false, xin, true, &mut dw, T::one());
            if need_dx {
                let dxn = &mut dx[n * s.c * s.plane()..(n + 1) * s.c * s.plane()];
                T::gemm(k, cout, plane, w.data(), true, g_out, false, dxn, T::zero());
            }
        } else {
            im2col(xin, s.c, s.h, s.w, kh, kw, g, ho, wo, &mut cols);
            T::gemm(cout, plane, k, g_out, false, &cols, true, &mut dw, T::one());
            if need_dx {
                T::gemm(k, cout, plane, w.data(), true, g_out, false, &mut dcols, T::zero());
                let dxn = &mut dx[n * s.c * s.plane()..(n + 1) * s.c * s.plane()];
                col2im(&dcols, s.c, s.h, s.w, kh, kw, g, ho, wo, dxn);
            }
        }
    }
    (
        need_dx.then(|| Tensor::from_vec(x.shape(), dx)),
        Tensor::from_vec(w.shape(), dw),
        Tensor::from_vec(&[cout], db),
    )
}

/// Statistics saved by [`group_norm`] for the backward pass.
pub struct GroupNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

pub fn group_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
    eps: f64,
) -> (Tensor<T>, GroupNormCache<T>) {
    let s = Nchw::of(x);
    assert!(groups > 0 && s.c % groups == 0, "channels {} not divisible by {} groups", s.c, groups);
    let per_group = s.c / groups * s.plane();
    let count = T::lit(per_group as f64);
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(s.n * groups);
    for (gi, chunk) in x.data().chunks(per_group).enumerate() {
        let mean = chunk.iter().copied().sum::<T>() / count;
        let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
        let istd = T::one() / (var + T::lit(eps)).sqrt();
        inv_std.push(istd);
        let base = gi * per_group;
        for (i, &v) in chunk.iter().enumerate() {
            let c = ((base + i) / s.plane()) % s.c;
            let xh = (v - mean) * istd;
            xhat[base + i] = xh;
            y[base + i] = xh * gamma.data()[c] + beta.data()[c];
        }
    }
    (
        Tensor::from_vec(x.shape(), y),
        GroupNormCache { xhat: Tensor::from_vec(x.shape(), xhat), inv_std },
    )
}

pub fn group_norm_backward<T: Scalar>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &GroupNormCache<T>,
    groups: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = Nchw::of(dy);
    let per_group = s.c / groups * s.plane();
    let count = T::lit(per_group as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    let xhat = cache.xhat.data();
    for gi in 0..s.n * groups {
        let base = gi * per_group;
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for i in base..base + per_group {
            let c = (i / s.plane()) % s.c;
            let g = dy.data()[i];
            dgamma[c] += g * xhat[i];
            dbeta[c] += g;
            let dxh = g * gamma.data()[c];
            sum_d += dxh;
            sum_dx += dxh * xhat[i];
        }
        let istd = cache.inv_std[gi];
        for i in base..base + per_group {
            let c = (i / s.plane()) % s.c;
            let dxh = dy.data()[i] * gamma.data()[c];
            dx[i] = istd * (dxh - sum_d / count - xhat[i] * sum_dx / count);
        }
    }
    (
        Tensor::from_vec(dy.shape(), dx),
        Tensor::from_vec(&[s.c], dgamma),
        Tensor::from_vec(&[s.c], dbeta),
    )
}

pub fn upsample_nearest2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = Nchw::of(x);
    let (h2, w2) = (s.h * 2, s.w * 2);
    let mut out = vec![T::zero(); s.n * s.c * h2 * w2];
    for nc in 0..s.n * s.c {
        let src = &x.data()[nc * s.plane()..(nc + 1) * s.plane()];
        let dst = &mut out[nc * h2 * w2..(nc + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * s.w + xx / 2];
            }
        }
    }
    Tensor::from_vec(&[s.n, s.c, h2, w2], out)
}

pub fn upsample_nearest2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let s = Nchw::of(dy);
    let (h, w) = (s.h / 2, s.w / 2);
    let mut out = vec![T::zero(); s.n * s.c * h * w];
    for nc in 0..s.n * s.c {
        let src = &dy.data()[nc * s.plane()..(nc + 1) * s.plane()];
        let dst = &mut out[nc * h * w..(nc + 1) * h * w];
        for y in 0..s.h {
            for xx in 0..s.w {
                dst[(y / 2) * w + xx / 2] += src[y * s.w + xx];
            }
        }
    }
    Tensor::from_vec(&[s.n, s.c, h, w], out)
}

/// One-dimensional linear interpolation taps with half-pixel centers.
fn interp_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling of `[N, C, H, W]` to `[N, C, out_h, out_w]` (half-pixel
/// centers, edge clamped). Equal sizes give the identity.
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let s = Nchw::of(x);
    if s.h == out_h && s.w == out_w {
        return x.clone();
    }
    let ty = interp_taps(s.h, out_h);
    let tx = interp_taps(s.w, out_w);
    let mut out = vec![T::zero(); s.n * s.c * out_h * out_w];
    for nc in 0..s.n * s.c {
        let src = &x.data()[nc * s.plane()..(nc + 1) * s.plane()];
        let dst = &mut out[nc * out_h * out_w..(nc + 1) * out_h * out_w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::lit(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::lit(lx);
                let top = src[y0 * s.w + x0] * (T::one() - lx) + src[y0 * s.w + x1] * lx;
                let bot = src[y1 * s.w + x0] * (T::one() - lx) + src[y1 * s.w + x1] * lx;
                dst[oy * out_w + ox] = top * (T::one() - ly) + bot * ly;
            }
        }
    }
    Tensor::from_vec(&[s.n, s.c, out_h, out_w], out)
}

pub fn bilinear_resize_backward<T: Scalar>(dy: &Tensor<T>, in_h: usize, in_w: usize) -> Tensor<T> {
    let s = Nchw::of(dy);
    if s.h == in_h && s.w == in_w {
        return dy.clone();
    }
    let ty = interp_taps(in_h, s.h);
    let tx = interp_taps(in_w, s.w);
    let mut out = vec![T::zero(); s.n * s.c * in_h * in_w];
    for nc in 0..s.n * s.c {
        let g = &dy.data()[nc * s.plane()..(nc + 1) * s.plane()];
        let dst = &mut out[nc * in_h * in_w..(nc + 1) * in_h * in_w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::lit(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::lit(lx);
                let v = g[oy * s.w + ox];
                dst[y0 * in_w + x0] += v * (T::one() - ly) * (T::one() - lx);
                dst[y0 * in_w + x1] += v * (T::one() - ly) * lx;
                dst[y1 * in_w + x0] += v * ly * (T::one() - lx);
                dst[y1 * in_w + x1] += v * ly * lx;
            }
        }
    }
    Tensor::from_vec(&[s.n, s.c, in_h, in_w], out)
}

/// Sparse bilinear sampling plan for ROI align: for every output cell the
/// list of `(flat input index, weight)` pairs, shared across channels.
pub struct RoiPlan {
    pub out: usize,
    pub cells: Vec<Vec<(usize, f64)>>,
}

/// Builds the sampling plan for boxes given in feature-map coordinates as
/// `(x1, y1, x2, y2)`. Each output bin averages a 2x2 grid of bilinear
/// samples; pixel centers sit at half-integer positions.
pub fn roi_align_plan(rois: &[[f64; 4]], h: usize, w: usize, out: usize) -> RoiPlan {
    const SAMPLES: usize = 2;
    let mut cells = Vec::with_capacity(rois.len() * out * out);
    for r in rois {
        let (x1, y1) = (r[0] - 0.5, r[1] - 0.5);
        let bw = (r[2] - r[0]).max(1e-6) / out as f64;
        let bh = (r[3] - r[1]).max(1e-6) / out as f64;
        for py in 0..out {
            for px in 0..out {
                let mut taps: Vec<(usize, f64)> = Vec::with_capacity(16);
                for iy in 0..SAMPLES {
                    let y = y1 + py as f64 * bh + (iy as f64 + 0.5) * bh / SAMPLES as f64;
                    for ix in 0..SAMPLES {
                        let x = x1 + px as f64 * bw + (ix as f64 + 0.5) * bw / SAMPLES as f64;
                        let wgt = 1.0 / (SAMPLES * SAMPLES) as f64;
                        push_bilinear(&mut taps, y, x, h, w, wgt);
                    }
                }
                cells.push(taps);
            }
        }
    }
    RoiPlan { out, cells }
}

fn push_bilinear(taps: &mut Vec<(usize, f64)>, y: f64, x: f64, h: usize, w: usize, wgt: f64) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let (y, x) = (y.max(0.0), x.max(0.0));
    let (mut y0, mut x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1, ly, lx);
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        ly = 0.0;
    } else {
        y1 = y0 + 1;
        ly = y - y0 as f64;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        lx = 0.0;
    } else {
        x1 = x0 + 1;
        lx = x - x0 as f64;
    }
    for (idx, f) in [
        (y0 * w + x0, (1.0 - ly) * (1.0 - lx)),
        (y0 * w + x1, (1.0 - ly) * lx),
        (y1 * w + x0, ly * (1.0 - lx)),
        (y1 * w + x1, ly * lx),
    ] {
        if f != 0.0 {
            taps.push((idx, f * wgt));
        }
    }
}

/// Pools `x: [1, C, H, W]` into `[R, C, out, out]` following `plan`.
pub fn roi_align<T: Scalar>(x: &Tensor<T>, plan: &RoiPlan) -> Tensor<T> {
    let s = Nchw::of(x);
    assert_eq!(s.n, 1, "roi_align expects a single feature map");
    let cells_per_roi = plan.out * plan.out;
    let rois = plan.cells.len() / cells_per_roi;
    let mut out = vec![T::zero(); rois * s.c * cells_per_roi];
    for r in 0..rois {
        for c in 0..s.c {
            let src = &x.data()[c * s.plane()..(c + 1) * s.plane()];
            let dst = &mut out[(r * s.c + c) * cells_per_roi..(r * s.c + c + 1) * cells_per_roi];
            for (cell, v) in dst.iter_mut().enumerate() {
                let mut acc = T::zero();
                for &(idx, wgt) in &plan.cells[r * cells_per_roi + cell] {
                    acc += src[idx] * T::lit(wgt);
                }
                *v = acc;
            }
        }
    }
    Tensor::from_vec(&[rois, s.c, plan.out, plan.out], out)
}

pub fn roi_align_backward<T: Scalar>(dy: &Tensor<T>, plan: &RoiPlan, input_shape: &[usize]) -> Tensor<T> {
    let (c_n, plane) = (input_shape[1], input_shape[2] * input_shape[3]);
    let cells_per_roi = plan.out * plan.out;
    let rois = plan.cells.len() / cells_per_roi;
    let mut dx = vec![T::zero(); c_n * plane];
    for r in 0..rois {
        for c in 0..c_n {
            let g = &dy.data()[(r * c_n + c) * cells_per_roi..(r * c_n + c + 1) * cells_per_roi];
            let dst = &mut dx[c * plane..(c + 1) * plane];
            for (cell, &gv) in g.iter().enumerate() {
                for &(idx, wgt) in &plan.cells[r * cells_per_roi + cell] {
                    dst[idx] += gv * T::lit(wgt);
                }
            }
        }
    }
    Tensor::from_vec(input_shape, dx)
}

/// `[1, C, H, W]` -> `[H*W, C]`.
pub fn chw_to_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = Nchw::of(x);
    assert_eq!(s.n, 1);
    let mut out = vec![T::zero(); x.len()];
    for c in 0..s.c {
        for p in 0..s.plane() {
            out[p * s.c + c] = x.data()[c * s.plane() + p];
        }
    }
    Tensor::from_vec(&[s.plane(), s.c], out)
}

pub fn rows_to_chw<T: Scalar>(rows: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let s = Nchw { n: shape[0], c: shape[1], h: shape[2], w: shape[3] };
    let mut out = vec![T::zero(); rows.len()];
    for c in 0..s.c {
        for p in 0..s.plane() {
            out[c * s.plane() + p] = rows.data()[p * s.c + c];
        }
    }
    Tensor::from_vec(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, g: ConvGeom) -> Tensor<f64> {
        let s = Nchw::of(x);
        let [co_n, ci_n, kh, kw] = [w.dim(0), w.dim(1), w.dim(2), w.dim(3)];
        let (ho, wo) = (g.out_size(s.h, kh), g.out_size(s.w, kw));
        let mut out = Tensor::zeros(&[s.n, co_n, ho, wo]);
        for n in 0..s.n {
            for co in 0..co_n {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[co];
                        for ci in 0..ci_n {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                                        acc += x.data()[((n * ci_n + ci) * s.h + iy as usize) * s.w + ix as usize]
                                            * w.data()[((co * ci_n + ci) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((n * co_n + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = rand::thread_rng();
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
            let x = Tensor::<f64>::randn(&[2, 3, 7, 6], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&[4, 3, k, k], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
            let g = ConvGeom { stride, pad };
            let got = conv2d(&x, &w, Some(&b), g);
            let want = direct_conv(&x, &w, &b, g);
            assert!(got.max_abs_diff(&want) < 1e-12, "k={k} s={stride} p={pad}");
        }
    }

    #[test]
    fn bilinear_resize_same_size_is_identity_and_preserves_constants() {
        let mut rng = rand::thread_rng();
        let x = Tensor::<f64>::randn(&[1, 2, 5, 5], 1.0, &mut rng);
        assert_eq!(bilinear_resize(&x, 5, 5), x);
        let c = Tensor::<f64>::full(&[1, 1, 8, 8], 0.25);
        let r = bilinear_resize(&c, 3, 5);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn roi_align_of_constant_map_is_constant() {
        let x = Tensor::<f64>::full(&[1, 2, 6, 6], 3.0);
        let plan = roi_align_plan(&[[1.0, 1.0, 4.0, 5.0]], 6, 6, 3);
        let y = roi_align(&x, &plan);
        assert_eq!(y.shape(), &[1, 2, 3, 3]);
        assert!(y.data().iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }
}
