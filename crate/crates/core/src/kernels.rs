//! Forward and backward compute kernels shared by inference and the tape.
//!
//! Convolutions are lowered to im2col plus a GEMM; everything else is plain
//! loops over `[B, C, H, W]` buffers.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, state_err, value_err, Result};
use crate::tensor::Tensor;

/// Running per-channel normalization statistics for one norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
    /// Images folded into the running statistics so far.
    pub count: u64,
}

impl NormStats {
    pub fn zeroed(channels: usize) -> Self {
        NormStats { mu: vec![0.0; channels], var: vec![0.0; channels], count: 0 }
    }

    pub fn reset(&mut self) {
        self.mu.iter_mut().for_each(|v| *v = 0.0);
        self.var.iter_mut().for_each(|v| *v = 0.0);
        self.count = 0;
    }

    pub fn is_initialized(&self) -> bool {
        self.count > 0
    }

    /// Folds one image's per-channel moments into the running average:
    /// with i images seen so far, mu <- (1 - 1/i) mu + (1/i) mu_i.
    pub fn update(&mut self, mu_i: &[f64], var_i: &[f64]) {
        self.count += 1;
        let inv = 1.0 / self.count as f64;
        for c in 0..self.mu.len() {
            self.mu[c] += inv * (mu_i[c] - self.mu[c]);
            self.var[c] += inv * (var_i[c] - self.var[c]);
        }
    }
}

/// How a normalization layer sources its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum NormMode {
    /// Standardize each sample with its own spatial moments.
    #[default]
    PerInstance,
    /// Standardize with the stored running statistics.
    StoredStats,
    /// Behave as PerInstance and fold this input's moments into the stats.
    Accumulate,
}

pub(crate) fn conv_out_dim(inp: usize, k: usize, pad: usize, stride: usize) -> Result<usize> {
    let padded = inp + 2 * pad;
    if padded < k {
        return Err(shape_err!("spatial dim {inp} with pad {pad} smaller than kernel {k}"));
    }
    Ok((padded - k) / stride + 1)
}

fn check_conv_shapes(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (bs, cin, h, win) = x.dims4()?;
    let (cout, wcin, kh, kw) = w.dims4()?;
    if wcin != cin {
        return Err(shape_err!(
            "conv2d input channel mismatch: input has {cin} channels, weight expects {wcin}"
        ));
    }
    if b.shape() != [cout] {
        return Err(shape_err!("conv2d bias shape {:?} != [{cout}]", b.shape()));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(value_err!("conv2d kernel dims must be odd, got {kh}x{kw}"));
    }
    if stride == 0 {
        return Err(value_err!("conv2d stride must be >= 1"));
    }
    let ho = conv_out_dim(h, kh, pad, stride)?;
    let wo = conv_out_dim(win, kw, pad, stride)?;
    Ok((bs, cin, h, win, cout, kh, kw, ho, wo))
}

fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    // cols layout: [cin*kh*kw, ho*wo], row-major
    let n = ho * wo;
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * n;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let out_row = row + oy * wo;
                    if iy < 0 || iy >= h as isize {
                        cols[out_row..out_row + wo].iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src_row = iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        cols[out_row + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            plane[src_row + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(
    cols: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    dx: &mut [f64],
) {
    let n = ho * wo;
    for c in 0..cin {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * n;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[dst_row + ix as usize] += cols[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn dgemm_rm(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize, c: &mut [f64], beta: f64) {
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(),
            n as isize, 1,
        );
    }
}

/// Cross-correlation with zero padding. Output is `[B, Cout, H', W']` with
/// `H' = (H + 2 pad - kh) / stride + 1`.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (bs, cin, h, win, cout, kh, kw, ho, wo) = check_conv_shapes(x, w, b, stride, pad)?;
    let k = cin * kh * kw;
    let n = ho * wo;
    let mut cols = vec![0.0; k * n];
    let mut out = vec![0.0; bs * cout * n];
    for bi in 0..bs {
        let xb = &x.data()[bi * cin * h * win..(bi + 1) * cin * h * win];
        im2col(xb, cin, h, win, kh, kw, pad, stride, ho, wo, &mut cols);
        let ob = &mut out[bi * cout * n..(bi + 1) * cout * n];
        // out[cout, n] = w[cout, k] * cols[k, n]
        dgemm_rm(cout, k, n, w.data(), k as isize, 1, &cols, n as isize, 1, ob, 0.0);
        for co in 0..cout {
            let bias = b.data()[co];
            ob[co * n..(co + 1) * n].iter_mut().for_each(|v| *v += bias);
        }
    }
    let prec = x.precision().combine(w.precision()).combine(b.precision());
    Ok(Tensor::new(vec![bs, cout, ho, wo], out)?.with_precision(prec))
}

/// Gradients of a convolution given the upstream gradient `dy`.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &[f64],
    stride: usize,
    pad: usize,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (bs, cin, h, win) = x.dims4()?;
    let (cout, _, kh, kw) = w.dims4()?;
    let ho = conv_out_dim(h, kh, pad, stride)?;
    let wo = conv_out_dim(win, kw, pad, stride)?;
    let k = cin * kh * kw;
    let n = ho * wo;

    let mut dx = vec![0.0; bs * cin * h * win];
    let mut dw = vec![0.0; cout * k];
    let mut db = vec![0.0; cout];
    let mut cols = vec![0.0; k * n];
    let mut dcols = vec![0.0; k * n];

    for bi in 0..bs {
        let xb = &x.data()[bi * cin * h * win..(bi + 1) * cin * h * win];
        let dyb = &dy[bi * cout * n..(bi + 1) * cout * n];
        im2col(xb, cin, h, win, kh, kw, pad, stride, ho, wo, &mut cols);
        // dw[cout, k] += dy[cout, n] * cols^T[n, k]
        dgemm_rm(cout, n, k, dyb, n as isize, 1, &cols, 1, n as isize, &mut dw, 1.0);
        // dcols[k, n] = w^T[k, cout] * dy[cout, n]
        dgemm_rm(k, cout, n, w.data(), 1, k as isize, dyb, n as isize, 1, &mut dcols, 0.0);
        col2im(
            &dcols,
            cin,
            h,
            win,
            kh,
            kw,
            pad,
            stride,
            ho,
            wo,
            &mut dx[bi * cin * h * win..(bi + 1) * cin * h * win],
        );
        for co in 0..cout {
            db[co] += dyb[co * n..(co + 1) * n].iter().sum::<f64>();
        }
    }
    Ok((dx, dw, db))
}

/// Per-channel spatial moments of each sample: `(mu, var)` with population
/// (1/HW) variance. Returned flat as `[B*C]`.
pub fn spatial_moments(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (b, c, h, w) = x.dims4()?;
    let hw = h * w;
    let mut mu = vec![0.0; b * c];
    let mut var = vec![0.0; b * c];
    for i in 0..b * c {
        let plane = &x.data()[i * hw..(i + 1) * hw];
        let m = plane.iter().sum::<f64>() / hw as f64;
        let v = plane.iter().map(|&p| (p - m) * (p - m)).sum::<f64>() / hw as f64;
        mu[i] = m;
        var[i] = v;
    }
    Ok((mu, var))
}

fn check_affine(c: usize, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err!(
            "instance norm affine shapes {:?}/{:?} do not match {c} channels",
            gamma.shape(),
            beta.shape()
        ));
    }
    Ok(())
}

/// Per-instance normalization. Also returns the per-(sample, channel)
/// moments used, which backward and the statistics update both need.
pub fn instance_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (b, c, h, w) = x.dims4()?;
    check_affine(c, gamma, beta)?;
    let hw = h * w;
    if hw < 2 {
        return Err(shape_err!("instance norm needs H*W >= 2, got {h}x{w}"));
    }
    let (mu, var) = spatial_moments(x)?;
    let mut out = vec![0.0; x.numel()];
    for bi in 0..b {
        for ci in 0..c {
            let i = bi * c + ci;
            let inv = 1.0 / (var[i] + eps).sqrt();
            let (g, bt) = (gamma.data()[ci], beta.data()[ci]);
            let src = &x.data()[i * hw..(i + 1) * hw];
            let dst = &mut out[i * hw..(i + 1) * hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = g * (s - mu[i]) * inv + bt;
            }
        }
    }
    let t = Tensor::new(x.shape().to_vec(), out)?.with_precision(x.precision());
    Ok((t, mu, var))
}

/// Normalization with externally stored per-channel statistics.
pub fn instance_norm_stored_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mu: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    check_affine(c, gamma, beta)?;
    if mu.len() != c || var.len() != c {
        return Err(shape_err!("stored stats length {} does not match {c} channels", mu.len()));
    }
    let hw = h * w;
    let mut out = vec![0.0; x.numel()];
    for bi in 0..b {
        for ci in 0..c {
            let inv = 1.0 / (var[ci] + eps).sqrt();
            let (g, bt) = (gamma.data()[ci], beta.data()[ci]);
            let base = (bi * c + ci) * hw;
            for p in 0..hw {
                out[base + p] = g * (x.data()[base + p] - mu[ci]) * inv + bt;
            }
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), out)?.with_precision(x.precision()))
}

/// Backward of per-instance normalization.
pub fn instance_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    mu: &[f64],
    var: &[f64],
    eps: f64,
    dy: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (b, c, h, w) = x.dims4()?;
    let hw = h * w;
    let m = hw as f64;
    let mut dx = vec![0.0; x.numel()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let i = bi * c + ci;
            let inv = 1.0 / (var[i] + eps).sqrt();
            let g = gamma.data()[ci];
            let base = i * hw;
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for p in 0..hw {
                let xhat = (x.data()[base + p] - mu[i]) * inv;
                sum_dy += dy[base + p];
                sum_dy_xhat += dy[base + p] * xhat;
            }
            dbeta[ci] += sum_dy;
            dgamma[ci] += sum_dy_xhat;
            let mean_dy = sum_dy / m;
            let mean_dy_xhat = sum_dy_xhat / m;
            for p in 0..hw {
                let xhat = (x.data()[base + p] - mu[i]) * inv;
                dx[base + p] = g * inv * (dy[base + p] - mean_dy - xhat * mean_dy_xhat);
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Backward of stored-statistics normalization (stats are constants).
pub fn instance_norm_stored_backward(
    x: &Tensor,
    gamma: &Tensor,
    mu: &[f64],
    var: &[f64],
    eps: f64,
    dy: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (b, c, h, w) = x.dims4()?;
    let hw = h * w;
    let mut dx = vec![0.0; x.numel()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let inv = 1.0 / (var[ci] + eps).sqrt();
            let g = gamma.data()[ci];
            let base = (bi * c + ci) * hw;
            for p in 0..hw {
                let xhat = (x.data()[base + p] - mu[ci]) * inv;
                dgamma[ci] += dy[base + p] * xhat;
                dbeta[ci] += dy[base + p];
                dx[base + p] = g * inv * dy[base + p];
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// The instance-norm operation with a mode selector. `Accumulate` behaves as
/// `PerInstance` and additionally folds this input's per-channel moments
/// (averaged over the batch, one update per sample) into `stats`.
pub fn instance_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mode: NormMode,
    stats: &mut NormStats,
    eps: f64,
) -> Result<Tensor> {
    match mode {
        NormMode::PerInstance => Ok(instance_norm_forward(x, gamma, beta, eps)?.0),
        NormMode::StoredStats => {
            if !stats.is_initialized() {
                return Err(state_err!("stored-stats normalization with uninitialized statistics"));
            }
            instance_norm_stored_forward(x, gamma, beta, &stats.mu, &stats.var, eps)
        }
        NormMode::Accumulate => {
            let (y, mu, var) = instance_norm_forward(x, gamma, beta, eps)?;
            let (b, c, _, _) = x.dims4()?;
            for bi in 0..b {
                stats.update(&mu[bi * c..(bi + 1) * c], &var[bi * c..(bi + 1) * c]);
            }
            Ok(y)
        }
    }
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap().with_precision(x.precision())
}

pub fn relu_backward(x: &Tensor, dy: &[f64]) -> Vec<f64> {
    x.data().iter().zip(dy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect()
}
