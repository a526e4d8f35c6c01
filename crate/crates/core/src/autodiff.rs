//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! Nodes are appended in execution order, so walking the tape backwards
//! visits every node after all of its consumers; gradients propagate in a
//! single reverse sweep. Each backward call runs an independent sweep and
//! adds its result into the persistent per-node gradient buffers.

use crate::error::{shape_err, usage_err, value_err, Result};
use crate::kernels;
use crate::labelmap::{LabelMap, NO_LABEL};
use crate::tensor::{softmax, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    InstanceNorm { x: Var, gamma: Var, beta: Var, mu: Vec<f64>, var: Vec<f64>, eps: f64, stored: bool },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, k: f64 },
    Mul { a: Var, b: Var },
    Sum { x: Var },
    HardCeMasked { logits: Var, labels: LabelMap, count: usize },
    SoftCe { logits: Var, target: Var },
    EntropyFromLogits { logits: Var },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Ordered record of primitive operations with enough saved state for a
/// backward sweep. Gradients accumulate across backward calls until the tape
/// is dropped or [`Tape::zero_grads`] is called.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    pending_seeds: Vec<(usize, Vec<f64>)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers a value as a leaf (input, parameter, or detached constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Detached constant: same as a leaf; gradients stop here by construction.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a node, if any backward sweep reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.pending_seeds.clear();
    }

    /// Queues an external gradient seed for the next backward sweep. Used by
    /// stop-gradient probes: seeding a detached constant must not change any
    /// parameter gradient.
    pub fn seed_grad(&mut self, v: Var, seed: &[f64]) -> Result<()> {
        let numel = self.nodes[v.0].value.numel();
        if seed.len() != numel {
            return Err(shape_err!("seed length {} != node numel {}", seed.len(), numel));
        }
        self.pending_seeds.push((v.0, seed.to_vec()));
        Ok(())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad)?;
        Ok(self.push(y, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn instance_norm_per_instance(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (y, mu, var) =
            kernels::instance_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(y, Op::InstanceNorm { x, gamma, beta, mu, var, eps, stored: false }))
    }

    pub fn instance_norm_stored(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mu: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let y = kernels::instance_norm_stored_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            mu,
            var,
            eps,
        )?;
        Ok(self.push(
            y,
            Op::InstanceNorm { x, gamma, beta, mu: mu.to_vec(), var: var.to_vec(), eps, stored: true },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = kernels::relu_forward(self.value(x));
        self.push(y, Op::Relu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err!(
                "add shapes differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * k).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        self.push(t, Op::Scale { x, k })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err!("mul shapes differ"));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul { a, b }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    /// Mean over labeled pixels of the negative log-softmax probability at
    /// the label. Pixels marked `NO_LABEL` contribute nothing (and receive
    /// zero gradient). Returns the loss node and the labeled pixel count; an
    /// all-`NO_LABEL` map yields loss 0 with zero gradient.
    pub fn hard_ce_masked(&mut self, logits: Var, labels: &LabelMap) -> Result<(Var, usize)> {
        let lv = self.value(logits);
        let (b, c, h, w) = lv.dims4()?;
        if b != 1 {
            return Err(shape_err!("hard_ce_masked expects batch size 1, got {b}"));
        }
        if labels.height() != h || labels.width() != w {
            return Err(shape_err!(
                "label map {}x{} does not match logits {h}x{w}",
                labels.height(),
                labels.width()
            ));
        }
        labels.validate(c)?;
        let hw = h * w;
        let mut total = 0.0;
        let mut count = 0usize;
        for p in 0..hw {
            let lab = labels.data()[p];
            if lab == NO_LABEL {
                continue;
            }
            total += -log_softmax_at(lv.data(), c, hw, p, lab as usize);
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let node = self.push(
            Tensor::scalar(loss),
            Op::HardCeMasked { logits, labels: labels.clone(), count },
        );
        Ok((node, count))
    }

    /// Mean over all pixels of the cross-entropy against a fixed probability
    /// target. The target enters as a tape node (normally a detached
    /// constant); no gradient is ever propagated into it.
    pub fn soft_ce(&mut self, logits: Var, target: Var) -> Result<Var> {
        let lv = self.value(logits);
        let tv = self.value(target);
        let (b, c, h, w) = lv.dims4()?;
        if tv.shape() != lv.shape() {
            return Err(shape_err!(
                "soft_ce target shape {:?} != logits shape {:?}",
                tv.shape(),
                lv.shape()
            ));
        }
        let hw = h * w;
        // target rows must live on the probability simplex
        for bi in 0..b {
            for p in 0..hw {
                let mut s = 0.0;
                for ci in 0..c {
                    let t = tv.data()[(bi * c + ci) * hw + p];
                    if t < 0.0 {
                        return Err(value_err!("soft_ce target has negative entry {t}"));
                    }
                    s += t;
                }
                if (s - 1.0).abs() > 1e-6 {
                    return Err(value_err!("soft_ce target row sums to {s}, expected 1"));
                }
            }
        }
        let n_pix = (b * hw) as f64;
        let mut total = 0.0;
        for bi in 0..b {
            for p in 0..hw {
                for ci in 0..c {
                    let t = tv.data()[(bi * c + ci) * hw + p];
                    if t != 0.0 {
                        total -= t * log_softmax_at(
                            &lv.data()[bi * c * hw..(bi + 1) * c * hw],
                            c,
                            hw,
                            p,
                            ci,
                        );
                    }
                }
            }
        }
        Ok(self.push(Tensor::scalar(total / n_pix), Op::SoftCe { logits, target }))
    }

    /// Mean per-pixel Shannon entropy of `softmax(logits)`, differentiable
    /// through the softmax.
    pub fn entropy_from_logits(&mut self, logits: Var) -> Result<Var> {
        let p = softmax(self.value(logits))?;
        let (b, c, h, w) = p.dims4()?;
        let hw = h * w;
        let mut total = 0.0;
        for i in 0..b * hw {
            let bi = i / hw;
            let px = i % hw;
            for ci in 0..c {
                let q = p.data()[(bi * c + ci) * hw + px];
                if q > 0.0 {
                    total -= q * q.ln();
                }
            }
        }
        let loss = total / (b * hw) as f64;
        Ok(self.push(Tensor::scalar(loss), Op::EntropyFromLogits { logits }))
    }

    /// Propagates gradients from a scalar loss back to every reachable node,
    /// adding this sweep's result into the persistent gradient buffers.
    /// Pending seeds queued with [`Tape::seed_grad`] join the same sweep.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(usage_err!(
                "backward from non-scalar node with {} elements",
                self.nodes[loss.0].value.numel()
            ));
        }
        self.seed_grad(loss, &[1.0])?;
        self.sweep()
    }

    /// Runs a reverse sweep from the queued seeds alone.
    pub fn sweep(&mut self) -> Result<()> {
        let n = self.nodes.len();
        let mut g: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        for (idx, seed) in self.pending_seeds.drain(..) {
            add_into(&mut g[idx], &seed);
        }
        for i in (0..n).rev() {
            let Some(dy) = g[i].take() else { continue };
            self.dispatch(i, &dy, &mut g)?;
            g[i] = Some(dy);
        }
        for (node, sweep_grad) in self.nodes.iter_mut().zip(g) {
            if let Some(sg) = sweep_grad {
                add_into(&mut node.grad, &sg);
            }
        }
        Ok(())
    }

    fn dispatch(&self, i: usize, dy: &[f64], g: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.value(*x), self.value(*w), dy, *stride, *pad)?;
                add_into(&mut g[x.0], &dx);
                add_into(&mut g[w.0], &dw);
                add_into(&mut g[b.0], &db);
            }
            Op::InstanceNorm { x, gamma, beta, mu, var, eps, stored } => {
                let (dx, dg, db) = if *stored {
                    kernels::instance_norm_stored_backward(
                        self.value(*x),
                        self.value(*gamma),
                        mu,
                        var,
                        *eps,
                        dy,
                    )?
                } else {
                    kernels::instance_norm_backward(
                        self.value(*x),
                        self.value(*gamma),
                        mu,
                        var,
                        *eps,
                        dy,
                    )?
                };
                add_into(&mut g[x.0], &dx);
                add_into(&mut g[gamma.0], &dg);
                add_into(&mut g[beta.0], &db);
            }
            Op::Relu { x } => {
                let dx = kernels::relu_backward(self.value(*x), dy);
                add_into(&mut g[x.0], &dx);
            }
            Op::Add { a, b } => {
                add_into(&mut g[a.0], dy);
                add_into(&mut g[b.0], dy);
            }
            Op::Scale { x, k } => {
                let dx: Vec<f64> = dy.iter().map(|v| v * k).collect();
                add_into(&mut g[x.0], &dx);
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> = dy.iter().zip(self.value(*b).data()).map(|(gv, v)| gv * v).collect();
                let db: Vec<f64> = dy.iter().zip(self.value(*a).data()).map(|(gv, v)| gv * v).collect();
                add_into(&mut g[a.0], &da);
                add_into(&mut g[b.0], &db);
            }
            Op::Sum { x } => {
                let dx = vec![dy[0]; self.value(*x).numel()];
                add_into(&mut g[x.0], &dx);
            }
            Op::HardCeMasked { logits, labels, count } => {
                if *count > 0 {
                    let scale = dy[0] / *count as f64;
                    let lv = self.value(*logits);
                    let (_, c, h, w) = lv.dims4()?;
                    let hw = h * w;
                    let probs = softmax(lv)?;
                    let mut dl = vec![0.0; lv.numel()];
                    for p in 0..hw {
                        let lab = labels.data()[p];
                        if lab == NO_LABEL {
                            continue;
                        }
                        for ci in 0..c {
                            let one = if ci == lab as usize { 1.0 } else { 0.0 };
                            dl[ci * hw + p] = scale * (probs.data()[ci * hw + p] - one);
                        }
                    }
                    add_into(&mut g[logits.0], &dl);
                }
            }
            Op::SoftCe { logits, target } => {
                let lv = self.value(*logits);
                let (b, c, h, w) = lv.dims4()?;
                let hw = h * w;
                let scale = dy[0] / (b * hw) as f64;
                let probs = softmax(lv)?;
                let tv = self.value(*target);
                let dl: Vec<f64> =
                    probs.data().iter().zip(tv.data()).map(|(p, t)| scale * (p - t)).collect();
                add_into(&mut g[logits.0], &dl);
                let _ = c;
                // stop-gradient: nothing flows into the target node
            }
            Op::EntropyFromLogits { logits } => {
                let lv = self.value(*logits);
                let (b, c, h, w) = lv.dims4()?;
                let hw = h * w;
                let scale = dy[0] / (b * hw) as f64;
                let probs = softmax(lv)?;
                let mut dl = vec![0.0; lv.numel()];
                for bi in 0..b {
                    for px in 0..hw {
                        let mut ent = 0.0;
                        for ci in 0..c {
                            let q = probs.data()[(bi * c + ci) * hw + px];
                            if q > 0.0 {
                                ent -= q * q.ln();
                            }
                        }
                        for ci in 0..c {
                            let q = probs.data()[(bi * c + ci) * hw + px];
                            if q > 0.0 {
                                dl[(bi * c + ci) * hw + px] = scale * (-q * (q.ln() + ent));
                            }
                        }
                    }
                }
                add_into(&mut g[logits.0], &dl);
            }
        }
        Ok(())
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta.to_vec()),
    }
}

fn log_softmax_at(logits: &[f64], c: usize, hw: usize, pixel: usize, class: usize) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for ci in 0..c {
        m = m.max(logits[ci * hw + pixel]);
    }
    let mut z = 0.0;
    for ci in 0..c {
        z += (logits[ci * hw + pixel] - m).exp();
    }
    logits[class * hw + pixel] - m - z.ln()
}

/// Adds a leaf's accumulated tape gradient into a parameter tensor's grad
/// buffer. A parameter the loss never touched gets an (exactly zero) buffer.
pub fn accumulate_param_grad(tape: &Tape, leaf: Var, param: &mut Tensor) {
    if let Some(g) = tape.grad(leaf) {
        let buf = param.ensure_grad();
        buf.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    } else {
        param.ensure_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::central_difference_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros(vec![2, 2]));
        assert!(matches!(tape.backward(v), Err(crate::error::Error::Usage(_))));
    }

    #[test]
    fn grad_of_untouched_param_is_zero() {
        let mut tape = Tape::new();
        let used = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let unused = tape.leaf(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let s = tape.sum(used);
        tape.backward(s).unwrap();
        assert!(tape.grad(unused).is_none());
        let mut p = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        accumulate_param_grad(&tape, unused, &mut p);
        assert_eq!(p.grad.as_deref().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn linear_loss_grad_is_input() {
        // loss = sum(w * x), fixed x => grad(w) = x exactly
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let x = tape.leaf(Tensor::new(vec![3], vec![3.0, 7.0, -2.0]).unwrap());
        let prod = tape.mul(w, x).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[3.0, 7.0, -2.0]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::new(vec![1], vec![2.0]).unwrap());
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0]);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0]);
        tape.zero_grads();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn hard_ce_closed_forms() {
        // 2 pixels, C=2, uniform logits, correct labels -> ln 2
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![1, 2, 1, 2]));
        let labels = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        let (loss, count) = tape.hard_ce_masked(logits, &labels).unwrap();
        assert_eq!(count, 2);
        assert!((tape.value(loss).item().unwrap() - 2f64.ln()).abs() < 1e-14);

        // all NO_LABEL -> 0 loss, 0 count, zero gradient
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![1, 2, 1, 2]).requires_grad(true));
        let labels = LabelMap::filled(1, 2, NO_LABEL);
        let (loss, count) = tape.hard_ce_masked(logits, &labels).unwrap();
        assert_eq!(count, 0);
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);
        tape.backward(loss).unwrap();
        assert!(tape.grad(logits).is_none());

        // strongly peaked at the correct label -> loss < 1e-3
        let mut tape = Tape::new();
        let mut t = Tensor::zeros(vec![1, 2, 1, 1]);
        t.data_mut()[0] = 20.0;
        let logits = tape.leaf(t);
        let labels = LabelMap::new(1, 1, vec![0]).unwrap();
        let (loss, _) = tape.hard_ce_masked(logits, &labels).unwrap();
        assert!(tape.value(loss).item().unwrap() < 1e-3);
    }

    #[test]
    fn hard_ce_rejects_label_out_of_range() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![1, 2, 1, 1]));
        let labels = LabelMap::new(1, 1, vec![2]).unwrap();
        assert!(tape.hard_ce_masked(logits, &labels).is_err());
    }

    #[test]
    fn no_label_pixels_get_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![1, 2, 2, 2], data).unwrap());
        let labels = LabelMap::new(2, 2, vec![0, NO_LABEL, 1, NO_LABEL]).unwrap();
        let (loss, _) = tape.hard_ce_masked(logits, &labels).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(logits).unwrap();
        // pixels 1 and 3 are NO_LABEL: columns 1, 3 of each channel plane
        for ci in 0..2 {
            assert_eq!(g[ci * 4 + 1], 0.0);
            assert_eq!(g[ci * 4 + 3], 0.0);
        }
    }

    #[test]
    fn soft_ce_one_hot_reduces_to_hard_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels = LabelMap::new(2, 2, vec![0, 2, 1, 0]).unwrap();
        let mut one_hot = Tensor::zeros(vec![1, 3, 2, 2]);
        for p in 0..4 {
            one_hot.data_mut()[labels.data()[p] as usize * 4 + p] = 1.0;
        }
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![1, 3, 2, 2], data).unwrap());
        let target = tape.constant(one_hot);
        let soft = tape.soft_ce(logits, target).unwrap();
        let (hard, _) = tape.hard_ce_masked(logits, &labels).unwrap();
        let a = tape.value(soft).item().unwrap();
        let b = tape.value(hard).item().unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn soft_ce_self_target_is_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let logits_t = Tensor::new(vec![1, 3, 2, 2], data).unwrap();
        let p = softmax(&logits_t).unwrap();
        let mut tape = Tape::new();
        let logits = tape.leaf(logits_t);
        let target = tape.constant(p);
        let soft = tape.soft_ce(logits, target).unwrap();
        let ent = tape.entropy_from_logits(logits).unwrap();
        let a = tape.value(soft).item().unwrap();
        let b = tape.value(ent).item().unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn soft_ce_hand_oracle() {
        // softmax = (0.6, 0.4), target (0.5, 0.5) -> -0.5 (ln .6 + ln .4)
        let logits = Tensor::new(vec![1, 2, 1, 1], vec![0.6f64.ln(), 0.4f64.ln()]).unwrap();
        let target = Tensor::new(vec![1, 2, 1, 1], vec![0.5, 0.5]).unwrap();
        let mut tape = Tape::new();
        let l = tape.leaf(logits);
        let t = tape.constant(target);
        let loss = tape.soft_ce(l, t).unwrap();
        let expect = -0.5 * (0.6f64.ln() + 0.4f64.ln());
        assert!((tape.value(loss).item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn soft_ce_rejects_off_simplex_target() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(vec![1, 2, 1, 1]));
        let t = tape.constant(Tensor::new(vec![1, 2, 1, 1], vec![0.7, 0.7]).unwrap());
        assert!(matches!(tape.soft_ce(l, t), Err(crate::error::Error::Value(_))));
    }

    #[test]
    fn entropy_closed_forms() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(vec![1, 4, 1, 1]));
        let e = tape.entropy_from_logits(l).unwrap();
        assert!((tape.value(e).item().unwrap() - 4f64.ln()).abs() < 1e-12);

        let l = tape.leaf(Tensor::new(vec![1, 2, 1, 1], vec![0.6f64.ln(), 0.4f64.ln()]).unwrap());
        let e = tape.entropy_from_logits(l).unwrap();
        let expect = -(0.6 * 0.6f64.ln() + 0.4 * 0.4f64.ln());
        assert!((tape.value(e).item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn seeding_a_detached_constant_changes_no_other_gradient() {
        let run = |probe: bool| -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let data: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let raw = Tensor::new(vec![1, 2, 2, 2], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let target = softmax(&raw).unwrap();
            let mut tape = Tape::new();
            let logits = tape.leaf(Tensor::new(vec![1, 2, 2, 2], data).unwrap());
            let t = tape.constant(target);
            let loss = tape.soft_ce(logits, t).unwrap();
            if probe {
                tape.seed_grad(t, &[0.37; 8]).unwrap();
            }
            tape.backward(loss).unwrap();
            tape.grad(logits).unwrap().to_vec()
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let init: Vec<f64> = (0..18).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let labels = LabelMap::new(2, 3, vec![0, NO_LABEL, 2, 1, 1, NO_LABEL]).unwrap();
        let target_data: Vec<f64> = {
            let raw = Tensor::new(
                vec![1, 3, 2, 3],
                (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            softmax(&raw).unwrap().data().to_vec()
        };
        let max_rel = central_difference_check(
            &init,
            |vals| {
                let mut tape = Tape::new();
                let logits = tape.leaf(Tensor::new(vec![1, 3, 2, 3], vals.to_vec()).unwrap());
                let target =
                    tape.constant(Tensor::new(vec![1, 3, 2, 3], target_data.clone()).unwrap());
                let (hard, _) = tape.hard_ce_masked(logits, &labels).unwrap();
                let soft = tape.soft_ce(logits, target).unwrap();
                let ent = tape.entropy_from_logits(logits).unwrap();
                let a = tape.add(hard, soft).unwrap();
                let loss = tape.add(a, ent).unwrap();
                let value = tape.value(loss).item().unwrap();
                tape.backward(loss).unwrap();
                (value, tape.grad(logits).unwrap().to_vec())
            },
            1e-5,
        );
        assert!(max_rel < 1e-6, "max relative error {max_rel}");
    }
}
