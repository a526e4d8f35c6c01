//! The segmentation network: conv + instance-norm + ReLU blocks with a 1x1
//! classifier head, per-layer running statistics, and binary checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{accumulate_param_grad, Tape, Var};
use crate::error::{config_err, format_err, shape_err, usage_err, Result};
use crate::kernels::{instance_norm, NormMode, NormStats};
use crate::tensor::{Precision, Tensor};

const MAGIC: &[u8; 4] = b"SFSA";
const FORMAT_VERSION: u32 = 1;

/// Architecture hyper-parameters. Padding preserves resolution, so logits
/// always match the input spatial size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub in_channels: usize,
    /// Channel width of each conv block, in order.
    pub widths: Vec<usize>,
    pub num_classes: usize,
    pub kernel_size: usize,
    #[serde(default)]
    pub precision: Precision,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            in_channels: 3,
            widths: vec![16, 32, 32, 32],
            num_classes: 5,
            kernel_size: 3,
            precision: Precision::Double,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(config_err!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.in_channels == 0 || self.widths.is_empty() {
            return Err(config_err!("empty architecture"));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(config_err!("kernel size must be odd, got {}", self.kernel_size));
        }
        Ok(())
    }
}

/// One conv + instance-norm + ReLU block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub w: Tensor,
    pub b: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: NormStats,
}

/// The segmentation model, usable as both the source model and the target
/// model depending on `norm_mode`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: ArchConfig,
    pub blocks: Vec<ConvBlock>,
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub norm_mode: NormMode,
    pub eps: f64,
}

/// Tape handles produced by a taped forward pass: the parameter leaves (in
/// [`Model::params`] order), the input leaf, and the logits node.
pub struct TapedForward {
    pub param_vars: Vec<Var>,
    pub input: Var,
    pub logits: Var,
}

fn uniform_fan_in(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Deterministic seeded initialization: uniform fan-in conv weights, zero
/// biases, identity norm affine, zeroed statistics, per-instance mode.
pub fn init_model(arch: &ArchConfig, seed: u64) -> Result<Model> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = arch.kernel_size;
    let mut blocks = Vec::with_capacity(arch.widths.len());
    let mut cin = arch.in_channels;
    for &cout in &arch.widths {
        let fan_in = cin * k * k;
        blocks.push(ConvBlock {
            w: uniform_fan_in(&mut rng, vec![cout, cin, k, k], fan_in).with_precision(arch.precision),
            b: Tensor::zeros(vec![cout]).with_precision(arch.precision),
            gamma: Tensor::full(vec![cout], 1.0).with_precision(arch.precision),
            beta: Tensor::zeros(vec![cout]).with_precision(arch.precision),
            stats: NormStats::zeroed(cout),
        });
        cin = cout;
    }
    let head_w = uniform_fan_in(&mut rng, vec![arch.num_classes, cin, 1, 1], cin)
        .with_precision(arch.precision);
    let head_b = Tensor::zeros(vec![arch.num_classes]).with_precision(arch.precision);
    Ok(Model {
        arch: arch.clone(),
        blocks,
        head_w,
        head_b,
        norm_mode: NormMode::PerInstance,
        eps: 1e-5,
    })
}

impl Model {
    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn check_input(&self, image: &Tensor) -> Result<(usize, usize)> {
        let (b, c, h, w) = image.dims4()?;
        if b != 1 {
            return Err(shape_err!("model forward expects batch size 1, got {b}"));
        }
        if c != self.arch.in_channels {
            return Err(shape_err!(
                "input has {c} channels, model expects {}",
                self.arch.in_channels
            ));
        }
        Ok((h, w))
    }

    /// Inference forward pass. In `Accumulate` mode each block folds its
    /// input's moments into the running statistics as a side effect.
    pub fn forward(&mut self, image: &Tensor) -> Result<Tensor> {
        self.check_input(image)?;
        let pad = self.arch.kernel_size / 2;
        let mode = self.norm_mode;
        let eps = self.eps;
        let mut x = image.clone();
        for block in &mut self.blocks {
            let y = crate::kernels::conv2d_forward(&x, &block.w, &block.b, 1, pad)?;
            let n = instance_norm(&y, &block.gamma, &block.beta, mode, &mut block.stats, eps)?;
            x = crate::kernels::relu_forward(&n);
        }
        crate::kernels::conv2d_forward(&x, &self.head_w, &self.head_b, 1, 0)
    }

    /// Forward pass on an autodiff tape for training. `Accumulate` mode is an
    /// inference-time concern and is rejected here.
    pub fn forward_on_tape(&self, tape: &mut Tape, image: &Tensor) -> Result<TapedForward> {
        self.check_input(image)?;
        if self.norm_mode == NormMode::Accumulate {
            return Err(usage_err!("cannot train in statistics-accumulation mode"));
        }
        let pad = self.arch.kernel_size / 2;
        let input = tape.leaf(image.clone());
        let mut param_vars = Vec::new();
        let mut x = input;
        for block in &self.blocks {
            let w = tape.leaf(block.w.clone());
            let b = tape.leaf(block.b.clone());
            let gamma = tape.leaf(block.gamma.clone());
            let beta = tape.leaf(block.beta.clone());
            param_vars.extend([w, b, gamma, beta]);
            let y = tape.conv2d(x, w, b, 1, pad)?;
            let n = match self.norm_mode {
                NormMode::PerInstance => tape.instance_norm_per_instance(y, gamma, beta, self.eps)?,
                NormMode::StoredStats => tape.instance_norm_stored(
                    y,
                    gamma,
                    beta,
                    &block.stats.mu,
                    &block.stats.var,
                    self.eps,
                )?,
                NormMode::Accumulate => unreachable!(),
            };
            x = tape.relu(n);
        }
        let hw = tape.leaf(self.head_w.clone());
        let hb = tape.leaf(self.head_b.clone());
        param_vars.extend([hw, hb]);
        let logits = tape.conv2d(x, hw, hb, 1, 0)?;
        Ok(TapedForward { param_vars, input, logits })
    }

    /// Adds the tape's accumulated gradients into the parameter grad buffers,
    /// in the same order `forward_on_tape` registered the leaves.
    pub fn apply_tape_grads(&mut self, tape: &Tape, fwd: &TapedForward) {
        for (var, param) in fwd.param_vars.iter().zip(self.params_mut()) {
            accumulate_param_grad(tape, *var, param);
        }
    }

    /// All trainable parameters in a fixed deterministic order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([&b.w, &b.b, &b.gamma, &b.beta]);
        }
        out.extend([&self.head_w, &self.head_b]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for b in &mut self.blocks {
            out.extend([&mut b.w, &mut b.b, &mut b.gamma, &mut b.beta]);
        }
        out.extend([&mut self.head_w, &mut self.head_b]);
        out
    }

    /// Only the normalization affine parameters (gamma, beta of each block),
    /// paired with their positions in [`Model::params`] order.
    pub fn norm_affine_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for i in 0..self.blocks.len() {
            out.push(i * 4 + 2);
            out.push(i * 4 + 3);
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.grad = None;
        }
    }
}

/// Recomputes every norm layer's running statistics over a dataset: counts
/// are reset, then each image is forwarded once in `Accumulate` mode so each
/// layer averages the per-image moments of its own input. Weights and affine
/// parameters are untouched; the returned model is in stored-stats mode.
pub fn update_norm_pass(model: &Model, dataset: &[Tensor]) -> Result<Model> {
    if dataset.is_empty() {
        return Err(usage_err!("norm statistics update needs a non-empty dataset"));
    }
    let mut m = model.clone();
    for b in &mut m.blocks {
        b.stats.reset();
    }
    m.norm_mode = NormMode::Accumulate;
    for img in dataset {
        m.forward(img)?;
    }
    m.norm_mode = NormMode::StoredStats;
    Ok(m)
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    arch: ArchConfig,
    norm_mode: NormMode,
    eps: f64,
}

fn write_f64s(w: &mut impl Write, vals: &[f64]) -> Result<()> {
    w.write_all(&(vals.len() as u64).to_le_bytes())?;
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read) -> Result<Vec<f64>> {
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)?;
    let n = u64::from_le_bytes(len8) as usize;
    if n > (1 << 28) {
        return Err(format_err!("implausible vector length {n} in checkpoint"));
    }
    let mut out = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        out.push(f64::from_le_bytes(buf));
    }
    Ok(out)
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Writes the model to the little-endian binary checkpoint format:
/// magic, format version, length-prefixed JSON metadata, then per layer the
/// length-prefixed raw f64 parameter vectors (norm layers also store their
/// running statistics and image count).
pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let meta = serde_json::to_vec(&CheckpointMeta {
        arch: model.arch.clone(),
        norm_mode: model.norm_mode,
        eps: model.eps,
    })?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(&meta)?;
    for b in &model.blocks {
        write_f64s(&mut w, b.w.data())?;
        write_f64s(&mut w, b.b.data())?;
        write_f64s(&mut w, b.gamma.data())?;
        write_f64s(&mut w, b.beta.data())?;
        write_f64s(&mut w, &b.stats.mu)?;
        write_f64s(&mut w, &b.stats.var)?;
        w.write_all(&b.stats.count.to_le_bytes())?;
    }
    write_f64s(&mut w, model.head_w.data())?;
    write_f64s(&mut w, model.head_b.data())?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(format_err!("bad checkpoint magic {magic:?}"));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)?;
    let version = u32::from_le_bytes(ver);
    if version != FORMAT_VERSION {
        return Err(format_err!("unsupported checkpoint format version {version}"));
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4)?;
    let mut meta_buf = vec![0u8; u32::from_le_bytes(len4) as usize];
    r.read_exact(&mut meta_buf)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_buf)?;
    meta.arch.validate()?;

    let mut model = init_model(&meta.arch, 0)?;
    model.norm_mode = meta.norm_mode;
    model.eps = meta.eps;
    let fill = |t: &mut Tensor, vals: Vec<f64>| -> Result<()> {
        if vals.len() != t.numel() {
            return Err(format_err!(
                "checkpoint vector length {} does not match expected {}",
                vals.len(),
                t.numel()
            ));
        }
        t.data_mut().copy_from_slice(&vals);
        Ok(())
    };
    for b in &mut model.blocks {
        fill(&mut b.w, read_f64s(&mut r)?)?;
        fill(&mut b.b, read_f64s(&mut r)?)?;
        fill(&mut b.gamma, read_f64s(&mut r)?)?;
        fill(&mut b.beta, read_f64s(&mut r)?)?;
        let mu = read_f64s(&mut r)?;
        let var = read_f64s(&mut r)?;
        if mu.len() != b.stats.mu.len() || var.len() != b.stats.var.len() {
            return Err(format_err!("checkpoint statistics length mismatch"));
        }
        b.stats.mu = mu;
        b.stats.var = var;
        b.stats.count = read_u64(&mut r)?;
    }
    fill(&mut model.head_w, read_f64s(&mut r)?)?;
    fill(&mut model.head_b, read_f64s(&mut r)?)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(format_err!("trailing bytes after checkpoint payload"));
    }
    Ok(model)
}
