//! Dense N-dimensional tensors, double precision by default.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, usage_err, value_err, Result};

/// Storage precision of a tensor. `Single` stores every value rounded to
/// `f32` precision while keeping the `f64` in-memory representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Precision {
    #[default]
    Double,
    Single,
}

impl Precision {
    pub fn combine(self, other: Precision) -> Precision {
        if self == Precision::Single || other == Precision::Single {
            Precision::Single
        } else {
            Precision::Double
        }
    }
}

/// Dense tensor with row-major contiguous storage. Layout convention for
/// feature maps is `[batch, channel, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    precision: Precision,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
            precision: Precision::Double,
        })
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        if precision == Precision::Single {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
        self
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
            precision: Precision::Double,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
            precision: Precision::Double,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).unwrap()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Re-applies storage precision after in-place mutation.
    pub fn quantize(&mut self) {
        if self.precision == Precision::Single {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn ensure_grad(&mut self) -> &mut Vec<f64> {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self.grad.as_mut().unwrap()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(usage_err!("item() on tensor with {} elements", self.data.len()));
        }
        Ok(self.data[0])
    }

    /// Debug assertion that every stored value is finite.
    pub fn assert_finite(&self) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(value_err!("non-finite value {v} at flat index {i}"));
            }
        }
        Ok(())
    }

    /// Interprets the shape as `[B, C, H, W]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(shape_err!("expected 4-d tensor, got shape {:?}", self.shape));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }
}

/// Per-pixel channel softmax over a `[B, C, H, W]` tensor, stabilized by max
/// subtraction so each pixel's channel vector sums to 1 within 1e-12.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    if c < 2 {
        return Err(shape_err!("softmax needs at least 2 channels, got {c}"));
    }
    let hw = h * w;
    let chw = c * hw;
    let src = logits.data();
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for p in 0..hw {
            let base = bi * chw + p;
            let mut m = f64::NEG_INFINITY;
            for ci in 0..c {
                m = m.max(src[base + ci * hw]);
            }
            let mut z = 0.0;
            for ci in 0..c {
                let e = (src[base + ci * hw] - m).exp();
                out[base + ci * hw] = e;
                z += e;
            }
            for ci in 0..c {
                out[base + ci * hw] /= z;
            }
        }
    }
    let mut t = Tensor::new(logits.shape().to_vec(), out)?;
    t = t.with_precision(logits.precision());
    Ok(t)
}
