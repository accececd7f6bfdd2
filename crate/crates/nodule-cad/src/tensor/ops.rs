//! Forward and backward kernels, independent of the differentiation tape.
//!
//! Convolutions are lowered to im2col + GEMM; the backward passes reuse the
//! same lowering. Transposed convolution is implemented as the
//! backward-input pass of the matching convolution, which is also the
//! identity its gradient tests rely on.

use super::gemm::{gemm, gemm_at, gemm_bt};
use super::Tensor;
use crate::{Error, Result};

/// Output extent of a convolution along one axis:
/// `floor((ext + 2*pad - k) / stride) + 1`.
pub fn conv_out_extent(ext: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    if k == 0 {
        return Err(Error::Shape("zero kernel extent".into()));
    }
    let padded = ext + 2 * pad;
    if k > padded {
        return Err(Error::Shape(format!(
            "kernel extent {k} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Output extent of a transposed convolution along one axis:
/// `(ext - 1)*stride - 2*pad + k`.
pub fn deconv_out_extent(ext: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    if pad >= k {
        return Err(Error::InvalidArgument(format!(
            "transposed conv requires pad < kernel, got pad {pad}, kernel {k}"
        )));
    }
    let grown = (ext - 1) * stride + k;
    if grown <= 2 * pad {
        return Err(Error::Shape(format!(
            "non-positive transposed conv output: extent {ext}, kernel {k}, stride {stride}, pad {pad}"
        )));
    }
    Ok(grown - 2 * pad)
}

// ---------------------------------------------------------------------------
// im2col lowering, 2D and 3D
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn im2col_2d(
    data: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let l = oh * ow;
    let mut cols = vec![0.0; c_in * kh * kw * l];
    for c in 0..c_in {
        let plane = &data[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * l;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = iy as usize * w;
                    let dst = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cols[dst + ox] = plane[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_2d(
    cols: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [f64],
) {
    let l = oh * ow;
    for c in 0..c_in {
        let plane = c * h * w;
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * l;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = plane + iy as usize * w;
                    let src = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out[dst + ix as usize] += cols[src + ox];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col_3d(
    data: &[f64],
    c_in: usize,
    ext: [usize; 3], // (d, h, w)
    k: [usize; 3],
    stride: usize,
    pad: usize,
    oext: [usize; 3],
) -> Vec<f64> {
    let [d, h, w] = ext;
    let [kd, kh, kw] = k;
    let [od, oh, ow] = oext;
    let l = od * oh * ow;
    let mut cols = vec![0.0; c_in * kd * kh * kw * l];
    for c in 0..c_in {
        let vol = &data[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (((c * kd + kz) * kh + ky) * kw + kx) * l;
                    for oz in 0..od {
                        let iz = (oz * stride + kz) as isize - pad as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = (iz as usize * h + iy as usize) * w;
                            let dst = row + (oz * oh + oy) * ow;
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    cols[dst + ox] = vol[src + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_3d(
    cols: &[f64],
    c_in: usize,
    ext: [usize; 3],
    k: [usize; 3],
    stride: usize,
    pad: usize,
    oext: [usize; 3],
    out: &mut [f64],
) {
    let [d, h, w] = ext;
    let [kd, kh, kw] = k;
    let [od, oh, ow] = oext;
    let l = od * oh * ow;
    for c in 0..c_in {
        let vol = c * d * h * w;
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (((c * kd + kz) * kh + ky) * kw + kx) * l;
                    for oz in 0..od {
                        let iz = (oz * stride + kz) as isize - pad as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst = vol + (iz as usize * h + iy as usize) * w;
                            let src = row + (oz * oh + oy) * ow;
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    out[dst + ix as usize] += cols[src + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// 2D convolution
// ---------------------------------------------------------------------------

fn conv2d_geometry(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    let [c_in, h, w] = expect_rank3(input, "conv2d input")?;
    let ks = kernels.shape();
    if ks.len() != 4 {
        return Err(Error::Shape(format!(
            "conv2d kernels must be rank 4 [C_out,C_in,kH,kW], got {ks:?}"
        )));
    }
    let (c_out, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if kc != c_in {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: kernels expect C_in {kc}, input has {c_in}"
        )));
    }
    let oh = conv_out_extent(h, kh, stride, pad)?;
    let ow = conv_out_extent(w, kw, stride, pad)?;
    Ok((c_in, h, w, c_out, kh, kw, oh, ow))
}

/// `[C_in,H,W] * [C_out,C_in,kH,kW] -> [C_out,H',W']`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (c_in, h, w, c_out, kh, kw, oh, ow) = conv2d_geometry(input, kernels, stride, pad)?;
    let cols = im2col_2d(input.data(), c_in, h, w, kh, kw, stride, pad, oh, ow);
    let kdim = c_in * kh * kw;
    let l = oh * ow;
    let mut out = vec![0.0; c_out * l];
    gemm(c_out, kdim, l, kernels.data(), &cols, &mut out, 0.0);
    Tensor::new(vec![c_out, oh, ow], out)
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_grad_input(
    kernels: &Tensor,
    grad_out: &Tensor,
    input_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor {
    let ks = kernels.shape();
    let (c_out, c_in, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    let (h, w) = (input_shape[1], input_shape[2]);
    let os = grad_out.shape();
    let (oh, ow) = (os[1], os[2]);
    let kdim = c_in * kh * kw;
    let l = oh * ow;
    let mut cols = vec![0.0; kdim * l];
    gemm_at(kdim, c_out, l, kernels.data(), grad_out.data(), &mut cols, 0.0);
    let mut gx = Tensor::zeros(input_shape);
    col2im_2d(&cols, c_in, h, w, kh, kw, stride, pad, oh, ow, gx.data_mut());
    gx
}

/// Gradient of [`conv2d`] with respect to its kernels.
pub fn conv2d_grad_kernels(
    input: &Tensor,
    grad_out: &Tensor,
    kernel_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, kh, kw) = (kernel_shape[0], kernel_shape[2], kernel_shape[3]);
    let os = grad_out.shape();
    let (oh, ow) = (os[1], os[2]);
    let cols = im2col_2d(input.data(), c_in, h, w, kh, kw, stride, pad, oh, ow);
    let kdim = c_in * kh * kw;
    let l = oh * ow;
    let mut gk = Tensor::zeros(kernel_shape);
    gemm_bt(c_out, l, kdim, grad_out.data(), &cols, gk.data_mut(), 0.0);
    gk
}

// ---------------------------------------------------------------------------
// Transposed 2D convolution
// ---------------------------------------------------------------------------

/// `[C_in,H,W] * [C_in,C_out,kH,kW] -> [C_out,(H-1)s-2p+kH,(W-1)s-2p+kW]`.
///
/// Equal to the backward-input pass of the convolution that maps the output
/// back onto the input with the same kernel, stride, and padding.
pub fn transposed_conv2d(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let [c_in, h, w] = expect_rank3(input, "transposed_conv2d input")?;
    let ks = kernels.shape();
    if ks.len() != 4 {
        return Err(Error::Shape(format!(
            "transposed_conv2d kernels must be rank 4 [C_in,C_out,kH,kW], got {ks:?}"
        )));
    }
    if ks[0] != c_in {
        return Err(Error::Shape(format!(
            "transposed_conv2d channel mismatch: kernels expect C_in {}, input has {c_in}",
            ks[0]
        )));
    }
    let (c_out, kh, kw) = (ks[1], ks[2], ks[3]);
    let oh = deconv_out_extent(h, kh, stride, pad)?;
    let ow = deconv_out_extent(w, kw, stride, pad)?;
    // Treat the input as the "grad_out" of a conv [C_out,oh,ow] -> [C_in,h,w].
    let kdim = c_out * kh * kw;
    let l = h * w;
    let mut cols = vec![0.0; kdim * l];
    gemm_at(kdim, c_in, l, kernels.data(), input.data(), &mut cols, 0.0);
    let mut out = Tensor::zeros(&[c_out, oh, ow]);
    col2im_2d(&cols, c_out, oh, ow, kh, kw, stride, pad, h, w, out.data_mut());
    Ok(out)
}

/// Gradient of [`transposed_conv2d`] with respect to its input: a plain
/// convolution of the output gradient with the same kernels.
pub fn transposed_conv2d_grad_input(
    kernels: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Tensor {
    conv2d(grad_out, kernels, stride, pad).expect("geometry checked on forward")
}

/// Gradient of [`transposed_conv2d`] with respect to its kernels.
pub fn transposed_conv2d_grad_kernels(
    input: &Tensor,
    grad_out: &Tensor,
    kernel_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor {
    conv2d_grad_kernels(grad_out, input, kernel_shape, stride, pad)
}

// ---------------------------------------------------------------------------
// 3D convolution
// ---------------------------------------------------------------------------

/// `[C_in,D,H,W] * [C_out,C_in,kD,kH,kW] -> [C_out,D',H',W']`.
pub fn conv3d(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!(
            "conv3d input must be rank 4 [C_in,D,H,W], got {s:?}"
        )));
    }
    let (c_in, ext) = (s[0], [s[1], s[2], s[3]]);
    let ks = kernels.shape();
    if ks.len() != 5 {
        return Err(Error::Shape(format!(
            "conv3d kernels must be rank 5 [C_out,C_in,kD,kH,kW], got {ks:?}"
        )));
    }
    if ks[1] != c_in {
        return Err(Error::Shape(format!(
            "conv3d channel mismatch: kernels expect C_in {}, input has {c_in}",
            ks[1]
        )));
    }
    let (c_out, k) = (ks[0], [ks[2], ks[3], ks[4]]);
    let oext = [
        conv_out_extent(ext[0], k[0], stride, pad)?,
        conv_out_extent(ext[1], k[1], stride, pad)?,
        conv_out_extent(ext[2], k[2], stride, pad)?,
    ];
    let cols = im2col_3d(input.data(), c_in, ext, k, stride, pad, oext);
    let kdim = c_in * k[0] * k[1] * k[2];
    let l = oext[0] * oext[1] * oext[2];
    let mut out = vec![0.0; c_out * l];
    gemm(c_out, kdim, l, kernels.data(), &cols, &mut out, 0.0);
    Tensor::new(vec![c_out, oext[0], oext[1], oext[2]], out)
}

pub fn conv3d_grad_input(
    kernels: &Tensor,
    grad_out: &Tensor,
    input_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor {
    let ks = kernels.shape();
    let (c_out, c_in, k) = (ks[0], ks[1], [ks[2], ks[3], ks[4]]);
    let ext = [input_shape[1], input_shape[2], input_shape[3]];
    let os = grad_out.shape();
    let oext = [os[1], os[2], os[3]];
    let kdim = c_in * k[0] * k[1] * k[2];
    let l = oext[0] * oext[1] * oext[2];
    let mut cols = vec![0.0; kdim * l];
    gemm_at(kdim, c_out, l, kernels.data(), grad_out.data(), &mut cols, 0.0);
    let mut gx = Tensor::zeros(input_shape);
    col2im_3d(&cols, c_in, ext, k, stride, pad, oext, gx.data_mut());
    gx
}

pub fn conv3d_grad_kernels(
    input: &Tensor,
    grad_out: &Tensor,
    kernel_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor {
    let s = input.shape();
    let (c_in, ext) = (s[0], [s[1], s[2], s[3]]);
    let (c_out, k) = (
        kernel_shape[0],
        [kernel_shape[2], kernel_shape[3], kernel_shape[4]],
    );
    let os = grad_out.shape();
    let oext = [os[1], os[2], os[3]];
    let cols = im2col_3d(input.data(), c_in, ext, k, stride, pad, oext);
    let kdim = c_in * k[0] * k[1] * k[2];
    let l = oext[0] * oext[1] * oext[2];
    let mut gk = Tensor::zeros(kernel_shape);
    gemm_bt(c_out, l, kdim, grad_out.data(), &cols, gk.data_mut(), 0.0);
    gk
}

// ---------------------------------------------------------------------------
// Max pooling (2D / 3D), ROI pooling
// ---------------------------------------------------------------------------

/// Max pooling over the trailing spatial axes of `[C, spatial...]`. The
/// number of spatial axes equals `window.len()` (2 or 3). Returns the pooled
/// tensor and the flat input index of each cell's argmax (first maximal
/// element in row-major scan order on ties), which routes the gradient.
pub fn max_pool(
    input: &Tensor,
    window: &[usize],
    stride: &[usize],
) -> Result<(Tensor, Vec<usize>)> {
    let dims = window.len();
    if !(dims == 2 || dims == 3) || stride.len() != dims {
        return Err(Error::InvalidArgument(format!(
            "max_pool supports 2 or 3 spatial dims with matching strides, got window {window:?}, stride {stride:?}"
        )));
    }
    if input.rank() != dims + 1 {
        return Err(Error::Shape(format!(
            "max_pool input rank {} does not match {dims} spatial dims + channels",
            input.rank()
        )));
    }
    if window.iter().any(|&w| w == 0) {
        return Err(Error::InvalidArgument("zero-extent pooling window".into()));
    }
    if stride.iter().any(|&s| s == 0) {
        return Err(Error::InvalidArgument("zero pooling stride".into()));
    }
    let channels = input.shape()[0];
    let ext: Vec<usize> = input.shape()[1..].to_vec();
    for (e, w) in ext.iter().zip(window) {
        if w > e {
            return Err(Error::Shape(format!(
                "pooling window {window:?} exceeds input extents {ext:?}"
            )));
        }
    }
    let oext: Vec<usize> = ext
        .iter()
        .zip(window.iter().zip(stride.iter()))
        .map(|(&e, (&w, &s))| (e - w) / s + 1)
        .collect();

    // Normalize to 3D with a leading unit axis for the 2D case.
    let (e3, w3, s3, o3) = if dims == 2 {
        (
            [1, ext[0], ext[1]],
            [1, window[0], window[1]],
            [1, stride[0], stride[1]],
            [1, oext[0], oext[1]],
        )
    } else {
        (
            [ext[0], ext[1], ext[2]],
            [window[0], window[1], window[2]],
            [stride[0], stride[1], stride[2]],
            [oext[0], oext[1], oext[2]],
        )
    };

    let data = input.data();
    let plane = e3[0] * e3[1] * e3[2];
    let out_len: usize = channels * o3[0] * o3[1] * o3[2];
    let mut out = Vec::with_capacity(out_len);
    let mut argmax = Vec::with_capacity(out_len);
    for c in 0..channels {
        let base = c * plane;
        for oz in 0..o3[0] {
            for oy in 0..o3[1] {
                for ox in 0..o3[2] {
                    let (z0, y0, x0) = (oz * s3[0], oy * s3[1], ox * s3[2]);
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for kz in 0..w3[0] {
                        for ky in 0..w3[1] {
                            for kx in 0..w3[2] {
                                let idx =
                                    base + ((z0 + kz) * e3[1] + (y0 + ky)) * e3[2] + (x0 + kx);
                                let v = data[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    let mut shape = vec![channels];
    shape.extend(&oext);
    Ok((Tensor::new(shape, out)?, argmax))
}

/// Scatter the output gradient back through the recorded argmax indices.
pub fn pool_grad_from_argmax(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(input_shape);
    let g = grad_out.data();
    let gd = gx.data_mut();
    for (i, &idx) in argmax.iter().enumerate() {
        gd[idx] += g[i];
    }
    gx
}

/// Region of interest in feature-map coordinates, corner form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiRect {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Max-pool an ROI of `[C,H,W]` onto a fixed `(grid_w, grid_h)` grid.
///
/// The ROI is clipped to the feature map; cell `i` of a `w`-column region
/// spans columns `floor(i*w/W_g)` to `floor((i+1)*w/W_g)`, clamped to be
/// non-empty, and likewise for rows. Pooling is independent per channel.
pub fn roi_pool(
    featmap: &Tensor,
    roi: RoiRect,
    grid: (usize, usize),
) -> Result<(Tensor, Vec<usize>)> {
    let [c, h, w] = expect_rank3(featmap, "roi_pool feature map")?;
    let (gw, gh) = grid;
    if gw == 0 || gh == 0 {
        return Err(Error::InvalidArgument("zero roi_pool grid".into()));
    }
    let cx1 = roi.x1.max(0.0);
    let cy1 = roi.y1.max(0.0);
    let cx2 = roi.x2.min(w as f64);
    let cy2 = roi.y2.min(h as f64);
    if cx2 - cx1 <= 0.0 || cy2 - cy1 <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "degenerate roi ({}, {}, {}, {}) after clipping to {w}x{h}",
            roi.x1, roi.y1, roi.x2, roi.y2
        )));
    }
    let x0 = cx1.floor() as usize;
    let y0 = cy1.floor() as usize;
    let x_end = (cx2.ceil() as usize).min(w).max(x0 + 1);
    let y_end = (cy2.ceil() as usize).min(h).max(y0 + 1);
    let rw = x_end - x0;
    let rh = y_end - y0;

    let cell_bounds = |i: usize, n: usize, total: usize, base: usize| -> (usize, usize) {
        let a = base + i * total / n;
        let mut b = base + (i + 1) * total / n;
        if b <= a {
            b = a + 1;
        }
        (a, b)
    };

    let data = featmap.data();
    let mut out = Vec::with_capacity(c * gh * gw);
    let mut argmax = Vec::with_capacity(c * gh * gw);
    for ch in 0..c {
        let base = ch * h * w;
        for gy in 0..gh {
            let (ya, yb) = cell_bounds(gy, gh, rh, y0);
            for gx in 0..gw {
                let (xa, xb) = cell_bounds(gx, gw, rw, x0);
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for y in ya..yb {
                    for x in xa..xb {
                        let idx = base + y * w + x;
                        let v = data[idx];
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(vec![c, gh, gw], out)?, argmax))
}

// ---------------------------------------------------------------------------
// Dense layers
// ---------------------------------------------------------------------------

/// `weights[M,N] * input[N] + bias[M] -> [M]`.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = expect_rank1(input, "dense input")?;
    let ws = weights.shape();
    if ws.len() != 2 || ws[1] != n {
        return Err(Error::Shape(format!(
            "dense weights must be [M,{n}], got {ws:?}"
        )));
    }
    let m = ws[0];
    if bias.shape() != [m] {
        return Err(Error::Shape(format!(
            "dense bias must be [{m}], got {:?}",
            bias.shape()
        )));
    }
    let mut out = bias.data().to_vec();
    gemm(m, n, 1, weights.data(), input.data(), &mut out, 1.0);
    Tensor::new(vec![m], out)
}

/// Row-batched dense layer: `input[B,N] * weights[M,N]^T + bias -> [B,M]`.
pub fn dense_batch(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!(
            "dense_batch input must be rank 2, got {s:?}"
        )));
    }
    let (b, n) = (s[0], s[1]);
    let ws = weights.shape();
    if ws.len() != 2 || ws[1] != n {
        return Err(Error::Shape(format!(
            "dense_batch weights must be [M,{n}], got {ws:?}"
        )));
    }
    let m = ws[0];
    if bias.shape() != [m] {
        return Err(Error::Shape(format!(
            "dense_batch bias must be [{m}], got {:?}",
            bias.shape()
        )));
    }
    let mut out = vec![0.0; b * m];
    for row in 0..b {
        out[row * m..(row + 1) * m].copy_from_slice(bias.data());
    }
    gemm_bt(b, n, m, input.data(), weights.data(), &mut out, 1.0);
    Tensor::new(vec![b, m], out)
}

/// Gradients of [`dense_batch`]: returns `(grad_input, grad_weights, grad_bias)`.
pub fn dense_batch_grads(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (b, n) = (input.shape()[0], input.shape()[1]);
    let m = weights.shape()[0];
    let mut gx = Tensor::zeros(&[b, n]);
    gemm(b, m, n, grad_out.data(), weights.data(), gx.data_mut(), 0.0);
    let mut gw = Tensor::zeros(&[m, n]);
    gemm_at(m, b, n, grad_out.data(), input.data(), gw.data_mut(), 0.0);
    let mut gb = Tensor::zeros(&[m]);
    let gbd = gb.data_mut();
    for row in 0..b {
        for (j, g) in grad_out.data()[row * m..(row + 1) * m].iter().enumerate() {
            gbd[j] += g;
        }
    }
    (gx, gw, gb)
}

// ---------------------------------------------------------------------------
// Activations and losses
// ---------------------------------------------------------------------------

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Row-wise softmax cross-entropy over `[B,K]` logits; returns per-row losses
/// `[B]` and the cached softmax probabilities for the backward pass.
pub fn softmax_xent_rows(logits: &Tensor, labels: &[usize]) -> Result<(Tensor, Tensor)> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!(
            "softmax_xent_rows expects [B,K] logits, got {s:?}"
        )));
    }
    let (b, k) = (s[0], s[1]);
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "softmax cross-entropy needs K >= 2 classes, got {k}"
        )));
    }
    if labels.len() != b {
        return Err(Error::Shape(format!(
            "label count {} does not match batch {b}",
            labels.len()
        )));
    }
    let mut losses = Vec::with_capacity(b);
    let mut probs = vec![0.0; b * k];
    for (row, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        let r = &logits.data()[row * k..(row + 1) * k];
        let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &v) in r.iter().enumerate() {
            let e = (v - m).exp();
            probs[row * k + j] = e;
            sum += e;
        }
        for p in &mut probs[row * k..(row + 1) * k] {
            *p /= sum;
        }
        losses.push(sum.ln() - (r[label] - m));
    }
    Ok((
        Tensor::new(vec![b], losses)?,
        Tensor::new(vec![b, k], probs)?,
    ))
}

/// Row-wise smooth-L1: `sum_i f(pred_i - target_i)` per row, with
/// `f(x) = 0.5 x^2` for `|x| < 1` and `|x| - 0.5` otherwise.
pub fn smooth_l1_rows(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "smooth_l1 extents differ: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let s = pred.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!(
            "smooth_l1_rows expects [B,D], got {s:?}"
        )));
    }
    let (b, d) = (s[0], s[1]);
    let mut out = Vec::with_capacity(b);
    for row in 0..b {
        let mut acc = 0.0;
        for i in 0..d {
            let x = pred.data()[row * d + i] - target.data()[row * d + i];
            acc += if x.abs() < 1.0 {
                0.5 * x * x
            } else {
                x.abs() - 0.5
            };
        }
        out.push(acc);
    }
    Tensor::new(vec![b], out)
}

/// Derivative of the smooth-L1 core: `x` in the quadratic zone, `sign(x)` outside.
pub fn smooth_l1_deriv(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

// ---------------------------------------------------------------------------
// Shape helpers
// ---------------------------------------------------------------------------

fn expect_rank3(t: &Tensor, what: &str) -> Result<[usize; 3]> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("{what} must be rank 3, got {s:?}")));
    }
    Ok([s[0], s[1], s[2]])
}

fn expect_rank1(t: &Tensor, what: &str) -> Result<usize> {
    let s = t.shape();
    if s.len() != 1 {
        return Err(Error::Shape(format!("{what} must be rank 1, got {s:?}")));
    }
    Ok(s[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::oracles;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (i, (x, y)) in a.iter().zip(b.iter()).enumerate() {
            assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
        }
    }

    #[test]
    fn conv2d_identity_kernel_preserves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[1, 3, 3], 1.0, &mut rng);
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_all_ones_counts_receptive_field() {
        let x = Tensor::ones(&[1, 4, 4]);
        let k = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert!(y.iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv2d_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(&[2, 8, 8], 1.0, &mut rng);
        let k = Tensor::uniform(&[4, 2, 3, 3], 1.0, &mut rng);
        let y = conv2d(&x, &k, 2, 1).unwrap();
        assert_close(&y, &oracles::conv2d(&x, &k, 2, 1), 1e-12);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let x = Tensor::ones(&[2, 4, 4]);
        let k = Tensor::ones(&[1, 3, 3, 3]);
        let err = conv2d(&x, &k, 1, 0).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
    }

    #[test]
    fn transposed_conv2d_extent_formula() {
        // (H-1)*stride - 2*pad + k with H=37, k=4, s=4, p=2.
        assert_eq!(deconv_out_extent(37, 4, 4, 2).unwrap(), 144);
        let x = Tensor::ones(&[1, 37, 37]);
        let k = Tensor::ones(&[1, 1, 4, 4]);
        let y = transposed_conv2d(&x, &k, 4, 2).unwrap();
        assert_eq!(y.shape(), &[1, 144, 144]);
    }

    #[test]
    fn transposed_conv2d_spreads_single_site() {
        let x = Tensor::new(vec![1, 1, 1], vec![2.5]).unwrap();
        let k = Tensor::ones(&[1, 1, 2, 2]);
        let y = transposed_conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert!(y.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn transposed_conv2d_matches_zero_stuffing_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[3, 5, 6], 1.0, &mut rng);
        let k = Tensor::uniform(&[3, 2, 4, 4], 1.0, &mut rng);
        for (stride, pad) in [(1, 0), (2, 1), (4, 2), (3, 3)] {
            let y = transposed_conv2d(&x, &k, stride, pad).unwrap();
            let z = oracles::transposed_conv2d_zero_stuffed(&x, &k, stride, pad);
            assert_close(&y, &z, 1e-12);
        }
    }

    #[test]
    fn transposed_conv2d_rejects_pad_not_below_kernel() {
        let x = Tensor::ones(&[1, 3, 3]);
        let k = Tensor::ones(&[1, 1, 2, 2]);
        assert!(transposed_conv2d(&x, &k, 1, 2).is_err());
    }

    #[test]
    fn conv3d_all_ones_and_identity() {
        let x = Tensor::ones(&[1, 3, 3, 3]);
        let k = Tensor::ones(&[1, 1, 3, 3, 3]);
        let y = conv3d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 27.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform(&[1, 3, 4, 5], 1.0, &mut rng);
        let id = Tensor::new(vec![1, 1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv3d(&x, &id, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv3d_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(&[2, 6, 8, 8], 1.0, &mut rng);
        let k = Tensor::uniform(&[3, 2, 3, 3, 3], 1.0, &mut rng);
        let y = conv3d(&x, &k, 1, 1).unwrap();
        assert_close(&y, &oracles::conv3d(&x, &k, 1, 1), 1e-12);
    }

    #[test]
    fn max_pool_constant_ties_break_to_first_index() {
        let x = Tensor::full(&[1, 4, 4], 3.0);
        let (y, argmax) = max_pool(&x, &[2, 2], &[2, 2]).unwrap();
        assert!(y.iter().all(|&v| v == 3.0));
        assert_eq!(argmax, vec![0, 2, 8, 10]);
    }

    #[test]
    fn max_pool_picks_forced_maximum() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = max_pool(&x, &[2, 2], &[2, 2]).unwrap();
        assert_eq!(y.item(), 4.0);
    }

    #[test]
    fn max_pool_3d_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::uniform(&[2, 6, 7, 5], 1.0, &mut rng);
        let (y, _) = max_pool(&x, &[2, 2, 2], &[2, 2, 2]).unwrap();
        assert_eq!(y, oracles::max_pool(&x, &[2, 2, 2], &[2, 2, 2]));
    }

    #[test]
    fn max_pool_rejects_zero_window_and_oversize() {
        let x = Tensor::ones(&[1, 4, 4]);
        assert!(max_pool(&x, &[0, 2], &[1, 1]).is_err());
        assert!(max_pool(&x, &[5, 2], &[1, 1]).is_err());
    }

    #[test]
    fn roi_pool_exact_grid_is_identity_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::uniform(&[2, 10, 10], 1.0, &mut rng);
        let roi = RoiRect {
            x1: 2.0,
            y1: 1.0,
            x2: 9.0,
            y2: 8.0,
        };
        let (y, _) = roi_pool(&x, roi, (7, 7)).unwrap();
        for c in 0..2 {
            for gy in 0..7 {
                for gx in 0..7 {
                    let want = x.data()[(c * 10 + gy + 1) * 10 + gx + 2];
                    assert_eq!(y.data()[(c * 7 + gy) * 7 + gx], want);
                }
            }
        }
    }

    #[test]
    fn roi_pool_constant_map_and_oracle_match() {
        let x = Tensor::full(&[3, 14, 14], 1.25);
        let roi = RoiRect {
            x1: 0.0,
            y1: 0.0,
            x2: 14.0,
            y2: 14.0,
        };
        let (y, _) = roi_pool(&x, roi, (7, 7)).unwrap();
        assert!(y.iter().all(|&v| v == 1.25));

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::uniform(&[2, 14, 14], 1.0, &mut rng);
        let roi = RoiRect {
            x1: 1.3,
            y1: 0.4,
            x2: 12.9,
            y2: 13.5,
        };
        let (y, _) = roi_pool(&x, roi, (7, 7)).unwrap();
        assert_eq!(y, oracles::roi_pool(&x, (1.3, 0.4, 12.9, 13.5), (7, 7)));
    }

    #[test]
    fn roi_pool_rejects_degenerate_roi() {
        let x = Tensor::ones(&[1, 8, 8]);
        let roi = RoiRect {
            x1: -5.0,
            y1: 2.0,
            x2: -1.0,
            y2: 6.0,
        };
        let err = roi_pool(&x, roi, (7, 7)).unwrap_err();
        assert!(err.to_string().contains("degenerate roi"), "{err}");
    }

    #[test]
    fn dense_identity_zero_and_oracle() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        let eye = Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let zero_b = Tensor::zeros(&[3]);
        assert_eq!(dense(&x, &eye, &zero_b).unwrap().data(), x.data());

        let w0 = Tensor::zeros(&[3, 3]);
        let b = Tensor::new(vec![3], vec![4.0, 5.0, 6.0]).unwrap();
        assert_eq!(dense(&x, &w0, &b).unwrap().data(), b.data());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::uniform(&[11], 2.0, &mut rng);
        let w = Tensor::uniform(&[5, 11], 2.0, &mut rng);
        let bias = Tensor::uniform(&[5], 2.0, &mut rng);
        assert_close(
            &dense(&x, &w, &bias).unwrap(),
            &oracles::dense(&x, &w, &bias),
            1e-12,
        );
    }

    #[test]
    fn dense_rejects_extent_mismatch() {
        let x = Tensor::ones(&[4]);
        let w = Tensor::ones(&[2, 3]);
        let b = Tensor::ones(&[2]);
        assert!(dense(&x, &w, &b).is_err());
    }

    #[test]
    fn softmax_xent_uniform_and_limit() {
        let logits = Tensor::new(vec![1, 2], vec![0.7, 0.7]).unwrap();
        let (loss, _) = softmax_xent_rows(&logits, &[0]).unwrap();
        assert!((loss.item() - 2.0f64.ln()).abs() < 1e-15);

        let logits = Tensor::new(vec![1, 2], vec![50.0, 0.0]).unwrap();
        let (loss, _) = softmax_xent_rows(&logits, &[0]).unwrap();
        assert!(loss.item() < 1e-20, "loss {}", loss.item());
    }

    #[test]
    fn softmax_xent_matches_compensated_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let logits = Tensor::uniform(&[1, 6], 8.0, &mut rng);
            let (loss, _) = softmax_xent_rows(&logits, &[3]).unwrap();
            let want = oracles::softmax_xent(logits.data(), 3);
            assert!((loss.item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_xent_validates_inputs() {
        let one_class = Tensor::ones(&[1, 1]);
        assert!(softmax_xent_rows(&one_class, &[0]).is_err());
        let two = Tensor::ones(&[1, 2]);
        assert!(softmax_xent_rows(&two, &[2]).is_err());
    }

    #[test]
    fn smooth_l1_closed_forms() {
        let p = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(smooth_l1_rows(&p, &p).unwrap().item(), 0.0);

        let t = Tensor::new(vec![1, 4], vec![1.5, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(smooth_l1_rows(&p, &t).unwrap().item(), 0.125);

        let t = Tensor::new(vec![1, 4], vec![4.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(smooth_l1_rows(&p, &t).unwrap().item(), 2.5);
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
    }
}
