//! Plain-slice compute kernels shared by the differentiable ops and the
//! non-differentiable helpers (sampling, resampling, metrics).

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `out[m×n] += a[m×k] · b[k×n]`.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`, row-by-row dot products.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with four independent accumulators.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out[m×n] += a[m×k] · b[k×n]`, choosing the loop order by the output width.
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    if n >= 16 {
        gemm_nn(m, k, n, a, b, out);
    } else {
        let bt = transpose(k, n, b);
        gemm_nt(m, k, n, a, &bt, out);
    }
}

/// Transpose of a row-major `rows×cols` block.
pub fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Unfolds a `[c, h, w]` image into `[c·k·k, h·w]` columns with zero padding
/// of `k/2` on every side.
pub fn im2col(c: usize, h: usize, w: usize, k: usize, img: &[f64]) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; c * k * k * hw];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[y * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates columns back into `img`.
pub fn col2im(c: usize, h: usize, w: usize, k: usize, cols: &[f64], img: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        img[(ch * h + sy as usize) * w + sx as usize] += src[y * w + x];
                    }
                }
            }
        }
    }
}

/// One-axis linear interpolation taps for half-pixel-centred resampling
/// (`align_corners = false`), clamped at the borders. Each output index maps
/// to `(lo, hi, weight_hi)`.
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let t = if hi == lo { 0.0 } else { pos - lo as f64 };
            (lo, hi, t)
        })
        .collect()
}

/// Bilinear resampling of the trailing two axes of `[planes, h, w]` data.
pub fn resize_bilinear(planes: usize, h: usize, w: usize, oh: usize, ow: usize, src: &[f64]) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let s = &src[p * h * w..(p + 1) * h * w];
        let o = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = s[y0 * w + x0] * (1.0 - fx) + s[y0 * w + x1] * fx;
                let bot = s[y1 * w + x0] * (1.0 - fx) + s[y1 * w + x1] * fx;
                o[y * ow + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_adjoint(
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    grad_out: &[f64],
) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let g = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let o = &mut out[p * h * w..(p + 1) * h * w];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[y * ow + x];
                o[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                o[y0 * w + x1] += v * (1.0 - fy) * fx;
                o[y1 * w + x0] += v * fy * (1.0 - fx);
                o[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    out
}

/// Mean over non-overlapping `f×f` blocks of `[planes, h, w]` data.
pub fn avg_pool(planes: usize, h: usize, w: usize, f: usize, src: &[f64]) -> Vec<f64> {
    let (oh, ow) = (h / f, w / f);
    let inv = 1.0 / (f * f) as f64;
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for dy in 0..f {
                    for dx in 0..f {
                        acc += src[(p * h + y * f + dy) * w + x * f + dx];
                    }
                }
                out[(p * oh + y) * ow + x] = acc * inv;
            }
        }
    }
    out
}

/// Tanh-approximated GELU and its derivative.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Nearest-neighbour resampling of a 2D map.
pub fn resize_nearest(map: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (h, w) = map.hw()?;
    let data = (0..oh * ow)
        .map(|i| {
            let (y, x) = (i / ow, i % ow);
            let sy = ((y as f64 + 0.5) * h as f64 / oh as f64).floor() as usize;
            let sx = ((x as f64 + 0.5) * w as f64 / ow as f64).floor() as usize;
            map.at2(sy.min(h - 1), sx.min(w - 1))
        })
        .collect();
    Ok(Tensor::raw(vec![oh, ow], data))
}

/// Bilinear resampling of a 2D map.
pub fn resize_map(map: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (h, w) = map.hw()?;
    Ok(Tensor::raw(vec![oh, ow], resize_bilinear(1, h, w, oh, ow, map.data())))
}

/// Downsamples an image to `r×r`: block mean when `r` divides the side,
/// bilinear otherwise. Upsampling is bilinear.
pub fn resample_image(img: &Tensor, r: usize) -> Result<Tensor> {
    let (h, w) = img.hw()?;
    if h == r && w == r {
        return Ok(img.clone());
    }
    if h == w && r < h && h % r == 0 {
        let f = h / r;
        return Ok(Tensor::raw(vec![r, r], avg_pool(1, h, w, f, img.data())));
    }
    resize_map(img, r, r)
}

/// Downsamples a binary mask to `r×r` by block majority (fraction ≥ 0.5);
/// falls back to nearest-neighbour for non-integer factors.
pub fn resample_mask(mask: &Tensor, r: usize) -> Result<Tensor> {
    let (h, w) = mask.hw()?;
    if h == r && w == r {
        return Ok(mask.clone());
    }
    if h == w && r < h && h % r == 0 {
        let f = h / r;
        let means = avg_pool(1, h, w, f, mask.data());
        return Ok(Tensor::raw(
            vec![r, r],
            means.into_iter().map(|m| if m >= 0.5 { 1.0 } else { 0.0 }).collect(),
        ));
    }
    resize_nearest(mask, r, r)
}

pub(crate) fn check_binary(mask: &Tensor, op: &'static str) -> Result<()> {
    if mask.data().iter().all(|&v| v == 0.0 || v == 1.0) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{op}: mask is not binary")))
    }
}
