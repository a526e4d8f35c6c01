//! Stochastic input transforms, consistency transform pairs, and collages.
//!
//! Spatial transforms (mirror, rotate) move pixels and therefore also apply
//! to prediction targets; augment transforms (gaussian blur, cutout) only
//! ever touch the network input. A `TransformPair` freezes one random draw
//! of each selected transform so input and output chains replay identically.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, usage_err, value_err, Result};
use crate::labelmap::{LabelMap, NO_LABEL};
use crate::tensor::Tensor;

/// One frozen transform. All randomness is drawn at construction; applying
/// the same value twice gives identical results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    /// Mirror the larger side of the image onto the smaller one at column `c`.
    Mirror { c: usize },
    /// Rotation about the image center, degrees.
    Rotate { theta_deg: f64 },
    /// Separable Gaussian blur.
    Gaussian { ks: usize, sigma: f64 },
    /// Zeroed square blocks at the given (row, col) origins.
    Cutout { b: usize, origins: Vec<(usize, usize)> },
}

impl Transform {
    /// Spatial transforms move pixels and belong to the output chain.
    pub fn is_spatial(&self) -> bool {
        matches!(self, Transform::Mirror { .. } | Transform::Rotate { .. })
    }

    pub fn apply_image(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Transform::Mirror { c } => mirror_apply_planes(x, *c),
            Transform::Rotate { theta_deg } => rotate_image(x, *theta_deg),
            Transform::Gaussian { ks, sigma } => gaussian_apply(x, *ks, *sigma),
            Transform::Cutout { b, origins } => cutout_with_origins(x, *b, origins),
        }
    }

    pub fn apply_labels(&self, m: &LabelMap) -> Result<LabelMap> {
        match self {
            Transform::Mirror { c } => mirror_apply_labels(m, *c),
            Transform::Rotate { theta_deg } => Ok(rotate_labels(m, *theta_deg)),
            _ => Err(usage_err!("augment transform applied to a label map")),
        }
    }

    pub fn apply_probs(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Transform::Mirror { c } => mirror_apply_planes(x, *c),
            Transform::Rotate { theta_deg } => rotate_probs(x, *theta_deg),
            _ => Err(usage_err!("augment transform applied to a probability map")),
        }
    }
}

/// An input chain T_i and the output chain T_o obtained by dropping the
/// augment members while preserving order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformPair {
    pub input_chain: Vec<Transform>,
    pub output_chain: Vec<Transform>,
}

impl TransformPair {
    pub fn new(input_chain: Vec<Transform>) -> Result<Self> {
        if input_chain.is_empty() {
            return Err(value_err!("transform pair needs a non-empty input chain"));
        }
        let output_chain = input_chain.iter().filter(|t| t.is_spatial()).cloned().collect();
        Ok(TransformPair { input_chain, output_chain })
    }

    pub fn apply_input(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = x.clone();
        for t in &self.input_chain {
            out = t.apply_image(&out)?;
        }
        Ok(out)
    }

    pub fn apply_output_labels(&self, m: &LabelMap) -> Result<LabelMap> {
        let mut out = m.clone();
        for t in &self.output_chain {
            out = t.apply_labels(&out)?;
        }
        Ok(out)
    }

    pub fn apply_output_probs(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = x.clone();
        for t in &self.output_chain {
            out = t.apply_probs(&out)?;
        }
        Ok(out)
    }
}

/// Sampling ranges and frozen hyper-parameters for transform draws.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformParams {
    pub height: usize,
    pub width: usize,
    pub max_rotate_deg: f64,
    pub gaussian_ks: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub cutout_block: usize,
    pub cutout_frac: f64,
}

impl TransformParams {
    /// Defaults scaled to desk-size images.
    pub fn for_size(height: usize, width: usize) -> Self {
        TransformParams {
            height,
            width,
            max_rotate_deg: 5.0,
            gaussian_ks: 5,
            sigma_min: 0.1,
            sigma_max: 2.0,
            cutout_block: 16,
            cutout_frac: 0.2,
        }
    }
}

/// Draws a uniform non-empty subset of the four transform kinds, freezes one
/// random parameterization of each member, and splits it into input/output
/// chains. Application order within a chain is always mirror, rotate,
/// gaussian, cutout.
pub fn sample_transform_pair(rng: &mut ChaCha8Rng, params: &TransformParams) -> Result<TransformPair> {
    let subset: u8 = rng.gen_range(1..16);
    let mut chain = Vec::new();
    if subset & 1 != 0 {
        chain.push(Transform::Mirror { c: rng.gen_range(1..params.width) });
    }
    if subset & 2 != 0 {
        chain.push(Transform::Rotate {
            theta_deg: rng.gen_range(-params.max_rotate_deg..=params.max_rotate_deg),
        });
    }
    if subset & 4 != 0 {
        chain.push(Transform::Gaussian {
            ks: params.gaussian_ks,
            sigma: rng.gen_range(params.sigma_min..=params.sigma_max),
        });
    }
    if subset & 8 != 0 {
        let (h, w, b) = (params.height, params.width, params.cutout_block);
        if b > h.min(w) {
            return Err(value_err!("cutout block {b} exceeds image size {h}x{w}"));
        }
        let k = (params.cutout_frac * (h * w) as f64 / (b * b) as f64).round() as usize;
        let origins = (0..k).map(|_| (rng.gen_range(0..h), rng.gen_range(0..w))).collect();
        chain.push(Transform::Cutout { b, origins });
    }
    TransformPair::new(chain)
}

fn plane_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    Ok((b * c, h, w))
}

/// Column reflection about split column `c` applied to every channel plane.
/// Whichever side is larger (ties count as left) is copied onto the other.
fn mirror_apply_planes(x: &Tensor, c: usize) -> Result<Tensor> {
    let (planes, h, w) = plane_dims(x)?;
    check_mirror_col(c, w)?;
    let mut out = x.clone();
    for pl in 0..planes {
        for row in 0..h {
            let base = (pl * h + row) * w;
            mirror_row(&x.data()[base..base + w], &mut out.data_mut()[base..base + w], c);
        }
    }
    Ok(out)
}

fn mirror_apply_labels(m: &LabelMap, c: usize) -> Result<LabelMap> {
    let (h, w) = (m.height(), m.width());
    check_mirror_col(c, w)?;
    let mut out = m.clone();
    for row in 0..h {
        let base = row * w;
        mirror_row_u8(&m.data()[base..base + w], &mut out.data_mut()[base..base + w], c);
    }
    Ok(out)
}

fn check_mirror_col(c: usize, w: usize) -> Result<()> {
    if c == 0 || c >= w {
        return Err(value_err!("mirror column {c} out of range for width {w}"));
    }
    Ok(())
}

fn mirror_row(src: &[f64], dst: &mut [f64], c: usize) {
    let w = src.len();
    if c >= w - c {
        // left side at least as large: reflect it rightwards
        for t in 0..w - c {
            dst[c + t] = src[c - 1 - t];
        }
    } else {
        for t in 0..c {
            dst[c - 1 - t] = src[c + t];
        }
    }
}

fn mirror_row_u8(src: &[u8], dst: &mut [u8], c: usize) {
    let w = src.len();
    if c >= w - c {
        for t in 0..w - c {
            dst[c + t] = src[c - 1 - t];
        }
    } else {
        for t in 0..c {
            dst[c - 1 - t] = src[c + t];
        }
    }
}

fn check_rotation(theta_deg: f64) -> Result<()> {
    if !(theta_deg.abs() <= 45.0) {
        return Err(value_err!("rotation angle {theta_deg} outside sanity bound of 45 degrees"));
    }
    Ok(())
}

/// Source coordinates for an output pixel under rotation by `theta` about
/// the image center (inverse mapping).
fn rotate_source(theta_rad: f64, h: usize, w: usize, y: usize, x: usize) -> (f64, f64) {
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (s, c) = theta_rad.sin_cos();
    let dy = y as f64 - cy;
    let dx = x as f64 - cx;
    (cy - s * dx + c * dy, cx + c * dx + s * dy)
}

fn rotate_image(x: &Tensor, theta_deg: f64) -> Result<Tensor> {
    check_rotation(theta_deg)?;
    if theta_deg == 0.0 {
        return Ok(x.clone());
    }
    let (planes, h, w) = plane_dims(x)?;
    let theta = theta_deg.to_radians();
    let mut out = vec![0.0; x.numel()];
    for pl in 0..planes {
        let src = &x.data()[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * h * w..(pl + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let (sy, sx) = rotate_source(theta, h, w, y, xx);
                dst[y * w + xx] = bilinear(src, h, w, sy, sx);
            }
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), out)?.with_precision(x.precision()))
}

fn bilinear(src: &[f64], h: usize, w: usize, sy: f64, sx: f64) -> f64 {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let fy = sy - y0;
    let fx = sx - x0;
    let mut acc = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let weight = wy * wx;
            if weight == 0.0 {
                continue;
            }
            let yy = y0 + dy;
            let xx = x0 + dx;
            if yy >= 0.0 && xx >= 0.0 && (yy as usize) < h && (xx as usize) < w {
                acc += weight * src[yy as usize * w + xx as usize];
            }
            // out-of-bounds taps contribute the fill value 0
        }
    }
    acc
}

fn nearest_source(theta: f64, h: usize, w: usize, y: usize, x: usize) -> Option<(usize, usize)> {
    let (sy, sx) = rotate_source(theta, h, w, y, x);
    let ry = sy.round();
    let rx = sx.round();
    if ry >= 0.0 && rx >= 0.0 && (ry as usize) < h && (rx as usize) < w {
        Some((ry as usize, rx as usize))
    } else {
        None
    }
}

fn rotate_labels(m: &LabelMap, theta_deg: f64) -> LabelMap {
    if theta_deg == 0.0 {
        return m.clone();
    }
    let (h, w) = (m.height(), m.width());
    let theta = theta_deg.to_radians();
    let mut out = LabelMap::filled(h, w, NO_LABEL);
    for y in 0..h {
        for x in 0..w {
            if let Some((sy, sx)) = nearest_source(theta, h, w, y, x) {
                out.set(y, x, m.get(sy, sx));
            }
        }
    }
    out
}

fn rotate_probs(x: &Tensor, theta_deg: f64) -> Result<Tensor> {
    check_rotation(theta_deg)?;
    if theta_deg == 0.0 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    let theta = theta_deg.to_radians();
    let fill = 1.0 / c as f64;
    let mut out = vec![0.0; x.numel()];
    for y in 0..h {
        for xx in 0..w {
            let src = nearest_source(theta, h, w, y, xx);
            for bi in 0..b {
                for ci in 0..c {
                    let plane = (bi * c + ci) * h * w;
                    out[plane + y * w + xx] = match src {
                        Some((sy, sx)) => x.data()[plane + sy * w + sx],
                        None => fill,
                    };
                }
            }
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), out)?.with_precision(x.precision()))
}

/// Normalized 1-D Gaussian taps for a kernel of odd size `ks`.
pub fn gaussian_kernel(ks: usize, sigma: f64) -> Result<Vec<f64>> {
    if ks % 2 == 0 || ks < 3 {
        return Err(value_err!("gaussian kernel size must be odd and >= 3, got {ks}"));
    }
    if !(sigma > 0.0) {
        return Err(value_err!("gaussian sigma must be positive, got {sigma}"));
    }
    let r = (ks / 2) as i64;
    let mut k: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= z);
    Ok(k)
}

/// Reflects an out-of-range index back into `0..n` (edge-inclusive symmetric
/// padding: index -1 maps to 0).
fn reflect(i: i64, n: i64) -> usize {
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable per-channel Gaussian blur with reflect padding.
pub fn gaussian_apply(x: &Tensor, ks: usize, sigma: f64) -> Result<Tensor> {
    let kern = gaussian_kernel(ks, sigma)?;
    let (planes, h, w) = plane_dims(x)?;
    let r = (ks / 2) as i64;
    let mut tmp = vec![0.0; x.numel()];
    // horizontal pass
    for pl in 0..planes {
        let src = &x.data()[pl * h * w..(pl + 1) * h * w];
        let dst = &mut tmp[pl * h * w..(pl + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kern.iter().enumerate() {
                    let sx = reflect(xx as i64 + ki as i64 - r, w as i64);
                    acc += kv * src[y * w + sx];
                }
                dst[y * w + xx] = acc;
            }
        }
    }
    // vertical pass
    let mut out = vec![0.0; x.numel()];
    for pl in 0..planes {
        let src = &tmp[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * h * w..(pl + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kern.iter().enumerate() {
                    let sy = reflect(y as i64 + ki as i64 - r, h as i64);
                    acc += kv * src[sy * w + xx];
                }
                dst[y * w + xx] = acc;
            }
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), out)?.with_precision(x.precision()))
}

fn cutout_with_origins(x: &Tensor, b: usize, origins: &[(usize, usize)]) -> Result<Tensor> {
    let (planes, h, w) = plane_dims(x)?;
    if b > h.min(w) {
        return Err(value_err!("cutout block {b} exceeds image size {h}x{w}"));
    }
    let mut out = x.clone();
    for &(oy, ox) in origins {
        for y in oy..(oy + b).min(h) {
            for xx in ox..(ox + b).min(w) {
                for pl in 0..planes {
                    out.data_mut()[(pl * h + y) * w + xx] = 0.0;
                }
            }
        }
    }
    Ok(out)
}

/// Zeroes `k = round(p*H*W/b^2)` square blocks at uniform origins (overlaps
/// allowed, blocks clipped at the borders).
pub fn cutout_apply(x: &Tensor, b: usize, p: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (_, h, w) = plane_dims(x)?;
    if b > h.min(w) {
        return Err(value_err!("cutout block {b} exceeds image size {h}x{w}"));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(value_err!("cutout fraction must lie in (0, 1), got {p}"));
    }
    let k = (p * (h * w) as f64 / (b * b) as f64).round() as usize;
    let origins: Vec<(usize, usize)> =
        (0..k).map(|_| (rng.gen_range(0..h), rng.gen_range(0..w))).collect();
    cutout_with_origins(x, b, &origins)
}

/// Width-wise collage: left half of `xi`, right half of `xj`, with the label
/// maps concatenated identically.
pub fn make_collage(
    xi: &Tensor,
    xj: &Tensor,
    yi: &LabelMap,
    yj: &LabelMap,
) -> Result<(Tensor, LabelMap)> {
    if xi.shape() != xj.shape() {
        return Err(shape_err!("collage images differ: {:?} vs {:?}", xi.shape(), xj.shape()));
    }
    let (planes, h, w) = plane_dims(xi)?;
    if yi.height() != h || yi.width() != w || yj.height() != h || yj.width() != w {
        return Err(shape_err!("collage label maps do not match image dimensions"));
    }
    let half = w / 2;
    let mut img = xi.clone();
    for pl in 0..planes {
        for y in 0..h {
            let base = (pl * h + y) * w;
            img.data_mut()[base + half..base + w].copy_from_slice(&xj.data()[base + half..base + w]);
        }
    }
    let mut lab = yi.clone();
    for y in 0..h {
        for x in half..w {
            lab.set(y, x, yj.get(y, x));
        }
    }
    Ok((img, lab))
}
