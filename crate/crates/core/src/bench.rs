//! Synthetic two-domain segmentation benchmark: shape-scene generation with
//! pixel-exact labels, an appearance shift between domains, PNG dataset I/O,
//! evaluation metrics, and supervised source training.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{config_err, format_err, shape_err, value_err, Error, Result};
use crate::labelmap::{LabelMap, NO_LABEL};
use crate::model::{update_norm_pass, ArchConfig, Model};
use crate::optim::{poly_lr, sgd_step, OptimizerState};
use crate::tensor::Tensor;

/// Appearance and geometry parameters of one domain. Source and target share
/// the class/geometry definitions and differ only in appearance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Per-class base color, RGB in [0, 1].
    pub palette: Vec<[f64; 3]>,
    /// Hue rotation about the gray axis, degrees.
    pub hue_shift_deg: f64,
    /// Global brightness multiplier.
    pub brightness: f64,
    /// Additive Gaussian pixel noise.
    pub noise_sigma: f64,
    /// Gaussian blur sigma; 0 disables the blur.
    pub blur_sigma: f64,
}

impl DomainSpec {
    /// Clean 5-class source domain at desk scale.
    pub fn source_default() -> Self {
        DomainSpec {
            num_classes: 5,
            height: 64,
            width: 96,
            palette: vec![
                [0.15, 0.18, 0.22], // background
                [0.85, 0.30, 0.25], // disk
                [0.25, 0.70, 0.30], // rectangle
                [0.25, 0.35, 0.85], // triangle
                [0.85, 0.80, 0.30], // stripe
            ],
            hue_shift_deg: 0.0,
            brightness: 1.0,
            noise_sigma: 0.02,
            blur_sigma: 0.0,
        }
    }

    /// Shifted target domain: hue rotation, dimming, noise, and blur.
    pub fn target_default() -> Self {
        DomainSpec {
            hue_shift_deg: 55.0,
            brightness: 0.85,
            noise_sigma: 0.08,
            blur_sigma: 1.0,
            ..DomainSpec::source_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes != self.palette.len() {
            return Err(config_err!(
                "palette size {} does not match {} classes",
                self.palette.len(),
                self.num_classes
            ));
        }
        if self.num_classes > 5 {
            return Err(config_err!("shape vocabulary supports at most 5 classes"));
        }
        if self.height < 16 || self.width < 16 {
            return Err(config_err!("canvas {}x{} too small for the shapes", self.height, self.width));
        }
        Ok(())
    }
}

/// One labeled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub labels: LabelMap,
}

fn render_scene(rng: &mut ChaCha8Rng, spec: &DomainSpec) -> LabelMap {
    let (h, w) = (spec.height, spec.width);
    let mut lab = LabelMap::filled(h, w, 0);
    // one instance per foreground class, composited in random order
    let mut order: Vec<u8> = (1..spec.num_classes as u8).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    for class in order {
        match class {
            1 => {
                let r = rng.gen_range(6.0..14.0);
                let cy = rng.gen_range(0.0..h as f64);
                let cx = rng.gen_range(0.0..w as f64);
                for y in 0..h {
                    for x in 0..w {
                        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                        if dy * dy + dx * dx <= r * r {
                            lab.set(y, x, 1);
                        }
                    }
                }
            }
            2 => {
                let rh = rng.gen_range(10..24.min(h));
                let rw = rng.gen_range(10..28.min(w));
                let y0 = rng.gen_range(0..h - rh + 1);
                let x0 = rng.gen_range(0..w - rw + 1);
                for y in y0..y0 + rh {
                    for x in x0..x0 + rw {
                        lab.set(y, x, 2);
                    }
                }
            }
            3 => {
                // random triangle with a guaranteed minimum area
                let (ay, ax, by, bx, cy, cx) = loop {
                    let ay = rng.gen_range(0.0..h as f64);
                    let ax = rng.gen_range(0.0..w as f64);
                    let by = rng.gen_range(0.0..h as f64);
                    let bx = rng.gen_range(0.0..w as f64);
                    let cy = rng.gen_range(0.0..h as f64);
                    let cx = rng.gen_range(0.0..w as f64);
                    let area2 = ((bx - ax) * (cy - ay) - (cx - ax) * (by - ay)).abs();
                    if area2 >= 300.0 {
                        break (ay, ax, by, bx, cy, cx);
                    }
                };
                let edge = |py: f64, px: f64, qy: f64, qx: f64, y: f64, x: f64| {
                    (qx - px) * (y - py) - (qy - py) * (x - px)
                };
                for y in 0..h {
                    for x in 0..w {
                        let (fy, fx) = (y as f64, x as f64);
                        let d1 = edge(ay, ax, by, bx, fy, fx);
                        let d2 = edge(by, bx, cy, cx, fy, fx);
                        let d3 = edge(cy, cx, ay, ax, fy, fx);
                        let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                        let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                        if !(neg && pos) {
                            lab.set(y, x, 3);
                        }
                    }
                }
            }
            4 => {
                // full-width band with a random orientation
                let theta = rng.gen_range(0.0..std::f64::consts::PI);
                let (s, c) = theta.sin_cos();
                let offset = rng.gen_range(-0.3..0.3)
                    * (h as f64 * s.abs() + w as f64 * c.abs());
                let half = rng.gen_range(2.5..5.0);
                let (cy0, cx0) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
                for y in 0..h {
                    for x in 0..w {
                        let d = (y as f64 - cy0) * s + (x as f64 - cx0) * c - offset;
                        if d.abs() <= half {
                            lab.set(y, x, 4);
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
    }
    lab
}

/// Rotation of RGB space about the gray axis by `deg` degrees.
fn hue_matrix(deg: f64) -> [[f64; 3]; 3] {
    let theta = deg.to_radians();
    let (s, c) = theta.sin_cos();
    let t = 1.0 / 3.0;
    let sq = (1.0f64 / 3.0).sqrt();
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let kron = if i == j { 1.0 } else { 0.0 };
            // Rodrigues rotation about the unit gray axis (1,1,1)/sqrt(3)
            let cross = match (i, j) {
                (0, 1) => -sq,
                (0, 2) => sq,
                (1, 0) => sq,
                (1, 2) => -sq,
                (2, 0) => -sq,
                (2, 1) => sq,
                _ => 0.0,
            };
            m[i][j] = c * kron + (1.0 - c) * t + s * cross;
        }
    }
    m
}

fn quantize_channel(v: f64) -> f64 {
    let k = (v.clamp(0.0, 1.0) * 255.0).round();
    k / 255.0
}

/// Renders one sample of the given domain.
fn gen_sample(rng: &mut ChaCha8Rng, spec: &DomainSpec) -> Result<Sample> {
    let (h, w) = (spec.height, spec.width);
    let lab = render_scene(rng, spec);
    let m = hue_matrix(spec.hue_shift_deg);
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let base = spec.palette[lab.get(y, x) as usize];
            let mut px = [0.0; 3];
            for ch in 0..3 {
                px[ch] = m[ch][0] * base[0] + m[ch][1] * base[1] + m[ch][2] * base[2];
                px[ch] *= spec.brightness;
            }
            for ch in 0..3 {
                let noise: f64 = if spec.noise_sigma > 0.0 {
                    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    spec.noise_sigma
                        * (-2.0 * u1.ln()).sqrt()
                        * (2.0 * std::f64::consts::PI * u2).cos()
                } else {
                    0.0
                };
                data[(ch * h + y) * w + x] = px[ch] + noise;
            }
        }
    }
    let mut img = Tensor::new(vec![1, 3, h, w], data)?;
    if spec.blur_sigma > 0.0 {
        img = crate::transforms::gaussian_apply(&img, 5, spec.blur_sigma)?;
    }
    for v in img.data_mut() {
        *v = quantize_channel(*v);
    }
    Ok(Sample { image: img, labels: lab })
}

/// Generates one split of `n` samples, deterministic per seed.
pub fn gen_split(seed: u64, spec: &DomainSpec, n: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| gen_sample(&mut rng, spec)).collect()
}

/// Generates a labeled source set and a labeled target set (target labels
/// are for evaluation only). The specs must agree on class count and size.
pub fn gen_domain_pair(
    seed: u64,
    spec_source: &DomainSpec,
    spec_target: &DomainSpec,
    n_source: usize,
    n_target: usize,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if spec_source.num_classes != spec_target.num_classes
        || spec_source.height != spec_target.height
        || spec_source.width != spec_target.width
    {
        return Err(config_err!("source and target specs disagree on classes or size"));
    }
    let source = gen_split(seed, spec_source, n_source)?;
    let target = gen_split(seed.wrapping_add(0x5F5A), spec_target, n_target)?;
    Ok((source, target))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub spec: DomainSpec,
    pub files: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub label: String,
}

/// Writes a split to `dir` as 8-bit PNGs plus a manifest JSON. Images are
/// quantized to k/255 at generation, so the round-trip is bit-exact.
pub fn save_dataset(dir: impl AsRef<Path>, samples: &[Sample], spec: &DomainSpec) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let mut files = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let (_, _, h, w) = s.image.dims4()?;
        let mut rgb = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [0, 1, 2].map(|ch| {
                    (s.image.data()[(ch * h + y) * w + x] * 255.0).round() as u8
                });
                rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        let img_rel = format!("images/img_{i:04}.png");
        let lab_rel = format!("labels/lab_{i:04}.png");
        rgb.save(dir.join(&img_rel)).map_err(|e| Error::Format(e.to_string()))?;
        let lab = image::GrayImage::from_raw(w as u32, h as u32, s.labels.data().to_vec())
            .ok_or_else(|| format_err!("label buffer size mismatch"))?;
        lab.save(dir.join(&lab_rel)).map_err(|e| Error::Format(e.to_string()))?;
        files.push(ManifestEntry { image: img_rel, label: lab_rel });
    }
    let manifest = Manifest {
        num_classes: spec.num_classes,
        height: spec.height,
        width: spec.width,
        spec: spec.clone(),
        files,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Loads a split written by [`save_dataset`].
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(Vec<Sample>, Manifest)> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let (h, w) = (manifest.height, manifest.width);
    let mut samples = Vec::with_capacity(manifest.files.len());
    for entry in &manifest.files {
        let rgb = image::open(dir.join(&entry.image))
            .map_err(|e| Error::Format(e.to_string()))?
            .into_rgb8();
        if rgb.width() as usize != w || rgb.height() as usize != h {
            return Err(format_err!("image {} has wrong dimensions", entry.image));
        }
        let mut data = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let px = rgb.get_pixel(x as u32, y as u32);
                for ch in 0..3 {
                    data[(ch * h + y) * w + x] = px.0[ch] as f64 / 255.0;
                }
            }
        }
        let gray = image::open(dir.join(&entry.label))
            .map_err(|e| Error::Format(e.to_string()))?
            .into_luma8();
        if gray.width() as usize != w || gray.height() as usize != h {
            return Err(format_err!("label {} has wrong dimensions", entry.label));
        }
        let labels = LabelMap::new(h, w, gray.into_raw())?;
        labels.validate(manifest.num_classes)?;
        samples.push(Sample { image: Tensor::new(vec![1, 3, h, w], data)?, labels });
    }
    Ok((samples, manifest))
}

/// C x C pixel counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one image's pixels; ground-truth NO_LABEL pixels are skipped.
    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.height() != truth.height() || pred.width() != truth.width() {
            return Err(shape_err!("prediction and truth dimensions differ"));
        }
        for (p, t) in pred.data().iter().zip(truth.data()) {
            if *t == NO_LABEL {
                continue;
            }
            if *p == NO_LABEL || (*p as usize) >= self.num_classes {
                return Err(value_err!("prediction contains invalid class {p}"));
            }
            if (*t as usize) >= self.num_classes {
                return Err(value_err!("ground truth contains invalid class {t}"));
            }
            self.counts[*t as usize * self.num_classes + *p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Per-class IoU (None for classes absent from both prediction and truth)
/// and the mean over defined classes.
pub fn miou(cm: &ConfusionMatrix) -> Result<(Vec<Option<f64>>, f64)> {
    let c = cm.num_classes();
    let mut per_class = vec![None; c];
    let mut sum = 0.0;
    let mut n = 0usize;
    for j in 0..c {
        let tp = cm.get(j, j);
        let row: u64 = (0..c).map(|k| cm.get(j, k)).sum();
        let col: u64 = (0..c).map(|k| cm.get(k, j)).sum();
        let denom = row + col - tp;
        if denom > 0 {
            let iou = tp as f64 / denom as f64;
            per_class[j] = Some(iou);
            sum += iou;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("every class is degenerate".into()));
    }
    Ok((per_class, sum / n as f64))
}

/// Arithmetic mean of member IoUs for each named class group, skipping
/// classes whose IoU is undefined.
pub fn group_miou(
    per_class: &[Option<f64>],
    groups: &[(String, Vec<usize>)],
) -> Result<Vec<(String, Option<f64>)>> {
    let mut out = Vec::with_capacity(groups.len());
    for (name, members) in groups {
        let mut sum = 0.0;
        let mut n = 0usize;
        for &j in members {
            if j >= per_class.len() {
                return Err(value_err!("group {name} references class {j} out of range"));
            }
            if let Some(v) = per_class[j] {
                sum += v;
                n += 1;
            }
        }
        out.push((name.clone(), if n > 0 { Some(sum / n as f64) } else { None }));
    }
    Ok(out)
}

/// Evaluates a model by plain argmax prediction over a labeled split.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<(ConfusionMatrix, f64)> {
    let mut m = model.clone();
    let mut cm = ConfusionMatrix::new(m.num_classes());
    for s in samples {
        let pred = crate::adapt::predict(&mut m, &s.image)?;
        cm.accumulate(&pred, &s.labels)?;
    }
    let (_, mean) = miou(&cm)?;
    Ok((cm, mean))
}

/// Supervised source-training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_power: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        TrainConfig { epochs: 20, base_lr: 1e-3, lr_power: 0.9, seed }
    }
}

/// One source-training log row.
#[derive(Debug, Clone, Serialize)]
pub struct SourceRecord {
    pub epoch: usize,
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Trains a fresh model on labeled source data with hard cross-entropy and
/// the poly-decay SGD stack, then freezes source statistics into the norm
/// layers so the checkpoint ships in stored-stats mode.
pub fn train_source(
    samples: &[Sample],
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<(Model, Vec<SourceRecord>)> {
    if samples.is_empty() {
        return Err(config_err!("source training needs a non-empty dataset"));
    }
    let mut model = crate::model::init_model(arch, cfg.seed)?;
    let n = samples.len();
    let total_iters = cfg.epochs * n;
    let mut log = Vec::with_capacity(total_iters);
    if total_iters > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut opt = OptimizerState::new(cfg.base_lr, cfg.lr_power, total_iters)?;
        let mut order: Vec<usize> = (0..n).collect();
        for epoch in 0..cfg.epochs {
            for i in (1..n).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            for &i in &order {
                let mut tape = Tape::new();
                let fwd = model.forward_on_tape(&mut tape, &samples[i].image)?;
                let (loss, _) = tape.hard_ce_masked(fwd.logits, &samples[i].labels)?;
                tape.backward(loss)?;
                model.apply_tape_grads(&tape, &fwd);
                let lr = poly_lr(&opt);
                sgd_step(&mut model.params_mut(), lr)?;
                log.push(SourceRecord {
                    epoch,
                    iter: opt.current_iter,
                    lr,
                    loss: tape.value(loss).item()?,
                });
                opt.advance();
            }
        }
        model.zero_grads();
    }
    // ship with source statistics frozen into the norm layers
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let model = update_norm_pass(&model, &images)?;
    Ok((model, log))
}
