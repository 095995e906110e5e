use std::sync::atomic::{AtomicUsize, Ordering};

use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: usize, w: usize, b: usize },
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Softmax(usize),
    LogSoftmax(usize),
    // Per-row sum of q ln q, caches softmax and log-softmax of the logits.
    NegEntropy { x: usize, probs: Vec<f64>, logp: Vec<f64> },
    Pick { x: usize, idx: Vec<usize> },
    Reduce { x: usize, how: Reduction, axis: Option<usize> },
    KlToPrior { mu: usize, log_std: usize, prior: Vec<f64> },
    StopGradient,
    LinComb(Vec<(usize, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in evaluation order for one reverse sweep.
///
/// A tape is rebuilt for every minibatch. Nodes are appended only after
/// their inputs, so the node vector is already a topological order.
#[derive(Debug)]
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffers produced by a backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    tape: usize,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "variable {} belongs to a detached tape",
                v.index
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Trainable leaf; receives a gradient buffer on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf (inputs, labels, frozen noise).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.check(v)?;
        self.nodes[v.index].value.item()
    }

    /// `x · w + b` for `x: [batch, in]`, `w: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (xt, wt, bt) = (
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            &self.nodes[bi].value,
        );
        if xt.rank() != 2 || wt.rank() != 2 || xt.shape()[1] != wt.shape()[0] {
            return Err(Error::shape("affine", xt.shape(), wt.shape()));
        }
        let (m, k, n) = (xt.shape()[0], xt.shape()[1], wt.shape()[1]);
        if bt.len() != n {
            return Err(Error::shape("affine bias", wt.shape(), bt.shape()));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bt.data());
        }
        gemm(
            m,
            k,
            n,
            xt.data(),
            (k as isize, 1),
            wt.data(),
            (n as isize, 1),
            &mut out,
        );
        let rg = self.rg(xi) || self.rg(wi) || self.rg(bi);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::Affine { x: xi, w: wi, b: bi }, rg))
    }

    pub fn activate(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let xi = self.check(x)?;
        let (value, op) = match kind {
            Activation::Relu => (self.nodes[xi].value.map(|v| v.max(0.0)), Op::Relu(xi)),
            Activation::Tanh => (self.nodes[xi].value.map(f64::tanh), Op::Tanh(xi)),
        };
        let rg = self.rg(xi);
        Ok(self.push(value, op, rg))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.map(f64::exp);
        let rg = self.rg(xi);
        Ok(self.push(value, Op::Exp(xi), rg))
    }

    /// Elementwise clamp; the gradient is zero where the input lies outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.map(|v| v.clamp(lo, hi));
        let rg = self.rg(xi);
        Ok(self.push(value, Op::Clamp { x: xi, lo, hi }, rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (at, bt) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if at.shape() != bt.shape() {
            return Err(Error::shape(name, at.shape(), bt.shape()));
        }
        let data = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(at.shape().to_vec(), data)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(value, op(ai, bi), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.map(|v| v * c);
        let rg = self.rg(xi);
        Ok(self.push(value, Op::Scale(xi, c), rg))
    }

    fn logits(&self, x: Var, name: &str) -> Result<usize> {
        let xi = self.check(x)?;
        let t = &self.nodes[xi].value;
        if t.rank() != 2 {
            return Err(Error::shape("softmax", t.shape(), &[0, 2]));
        }
        if t.cols() < 2 {
            return Err(Error::Contract(format!("{name} needs at least 2 classes")));
        }
        if !t.is_finite() {
            return Err(Error::Numeric(format!("non-finite logits in {name}")));
        }
        Ok(xi)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.logits(x, "softmax")?;
        let t = &self.nodes[xi].value;
        let (probs, _) = softmax_rows(t);
        let value = Tensor::new(t.shape().to_vec(), probs)?;
        let rg = self.rg(xi);
        Ok(self.push(value, Op::Softmax(xi), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.logits(x, "log_softmax")?;
        let t = &self.nodes[xi].value;
        let (_, logp) = softmax_rows(t);
        let value = Tensor::new(t.shape().to_vec(), logp)?;
        let rg = self.rg(xi);
        Ok(self.push(value, Op::LogSoftmax(xi), rg))
    }

    /// Per-row `Σ_j q_j ln q_j` with `q = softmax(x)`, using the fused log-softmax
    /// for `ln q`. Output shape `[batch]`.
    pub fn neg_entropy(&mut self, x: Var) -> Result<Var> {
        let xi = self.logits(x, "neg_entropy")?;
        let t = &self.nodes[xi].value;
        let (probs, logp) = softmax_rows(t);
        let (r, c) = (t.rows(), t.cols());
        let out: Vec<f64> = (0..r)
            .map(|i| {
                (0..c)
                    .map(|j| probs[i * c + j] * logp[i * c + j])
                    .sum::<f64>()
            })
            .collect();
        let rg = self.rg(xi);
        let op = Op::NegEntropy { x: xi, probs, logp };
        Ok(self.push(Tensor::vector(out), op, rg))
    }

    /// Gathers `x[i, idx[i]]` for every row. Output shape `[batch]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let t = &self.nodes[xi].value;
        if t.rank() != 2 || t.rows() != idx.len() {
            return Err(Error::shape("pick", t.shape(), &[idx.len()]));
        }
        let c = t.cols();
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::Contract(format!("class index {bad} out of range {c}")));
        }
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| t.get(i, j)).collect();
        let rg = self.rg(xi);
        let op = Op::Pick {
            x: xi,
            idx: idx.to_vec(),
        };
        Ok(self.push(Tensor::vector(out), op, rg))
    }

    /// Sum or mean over all elements (`axis = None`) or one axis of a rank-1/2 tensor.
    pub fn reduce(&mut self, x: Var, how: Reduction, axis: Option<usize>) -> Result<Var> {
        let xi = self.check(x)?;
        let t = &self.nodes[xi].value;
        let value = match axis {
            None => {
                let s: f64 = t.data().iter().sum();
                let v = match how {
                    Reduction::Sum => s,
                    Reduction::Mean => s / t.len().max(1) as f64,
                };
                Tensor::scalar(v)
            }
            Some(ax) => {
                if ax >= t.rank() || t.rank() > 2 {
                    return Err(Error::Axis {
                        axis: ax,
                        rank: t.rank(),
                    });
                }
                if t.rank() == 1 {
                    let s: f64 = t.data().iter().sum();
                    let v = match how {
                        Reduction::Sum => s,
                        Reduction::Mean => s / t.len().max(1) as f64,
                    };
                    Tensor::scalar(v)
                } else {
                    let (r, c) = (t.rows(), t.cols());
                    let (len, count) = if ax == 0 { (c, r) } else { (r, c) };
                    let mut out = vec![0.0; len];
                    for i in 0..r {
                        for j in 0..c {
                            out[if ax == 0 { j } else { i }] += t.get(i, j);
                        }
                    }
                    if how == Reduction::Mean {
                        let n = count.max(1) as f64;
                        out.iter_mut().for_each(|v| *v /= n);
                    }
                    Tensor::vector(out)
                }
            }
        };
        let rg = self.rg(xi);
        Ok(self.push(value, Op::Reduce { x: xi, how, axis }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Reduction::Sum, None)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Reduction::Mean, None)
    }

    /// Per-row closed-form `KL(N(mu, diag(exp(log_std)²)) || N(prior, I))`.
    /// Output shape `[batch]`.
    pub fn kl_to_prior(&mut self, mu: Var, log_std: Var, prior: &[f64]) -> Result<Var> {
        let (mi, li) = (self.check(mu)?, self.check(log_std)?);
        let (mt, lt) = (&self.nodes[mi].value, &self.nodes[li].value);
        if mt.shape() != lt.shape() || mt.rank() != 2 {
            return Err(Error::shape("kl_to_prior", mt.shape(), lt.shape()));
        }
        if mt.cols() != prior.len() {
            return Err(Error::shape("kl_to_prior prior", mt.shape(), &[prior.len()]));
        }
        let (r, c) = (mt.rows(), mt.cols());
        let out: Vec<f64> = (0..r)
            .map(|i| {
                0.5 * (0..c)
                    .map(|j| {
                        let (m, l) = (mt.get(i, j), lt.get(i, j));
                        let d = m - prior[j];
                        (2.0 * l).exp() + d * d - 1.0 - 2.0 * l
                    })
                    .sum::<f64>()
            })
            .collect();
        let rg = self.rg(mi) || self.rg(li);
        let op = Op::KlToPrior {
            mu: mi,
            log_std: li,
            prior: prior.to_vec(),
        };
        Ok(self.push(Tensor::vector(out), op, rg))
    }

    /// Identity in the forward pass; blocks all gradient flow to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.clone();
        Ok(self.push(value, Op::StopGradient, false))
    }

    /// `Σ c_i · v_i` over same-shaped inputs.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| Error::Contract("empty linear combination".into()))?;
        let shape = self.nodes[self.check(first.0)?].value.shape().to_vec();
        let mut out = Tensor::zeros(&shape);
        let mut idx = Vec::with_capacity(terms.len());
        let mut rg = false;
        for &(v, c) in terms {
            let i = self.check(v)?;
            let t = &self.nodes[i].value;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("lin_comb", &shape, t.shape()));
            }
            for (o, x) in out.data_mut().iter_mut().zip(t.data()) {
                *o += c * x;
            }
            rg |= self.rg(i);
            idx.push((i, c));
        }
        Ok(self.push(out, Op::LinComb(idx), rg))
    }

    /// Reverse sweep from a scalar loss; consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        self.gradients(&[(loss, 1.0)])
    }

    /// Reverse sweep seeded with `Σ c_i · ∂(v_i)`; every seed must be a scalar.
    ///
    /// Leaves the tape intact so several seedings can be compared.
    pub fn gradients(&self, seeds: &[(Var, f64)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for &(v, c) in seeds {
            let i = self.check(v)?;
            let t = &self.nodes[i].value;
            if t.len() != 1 {
                return Err(Error::Contract(format!(
                    "backward requires a scalar loss, got shape {:?}",
                    t.shape()
                )));
            }
            match &mut grads[i] {
                Some(g) => g[0] += c,
                slot => *slot = Some(vec![c]),
            }
            top = top.max(i + 1);
        }

        for i in (0..top).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let out = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                if !node.requires_grad {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                Some(match g {
                    Some(data) => Tensor::new(shape, data).expect("grad shape"),
                    None => Tensor::zeros(&shape),
                })
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads: out,
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Affine { x, w, b } => {
                let (xt, wt) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let (m, k, n) = (xt.shape()[0], xt.shape()[1], wt.shape()[1]);
                if self.rg(*x) {
                    let dx = self.slot(*x, grads);
                    // dx += g · wᵀ
                    gemm(m, n, k, g, (n as isize, 1), wt.data(), (1, n as isize), dx);
                }
                if self.rg(*w) {
                    let dw = self.slot(*w, grads);
                    // dw += xᵀ · g
                    gemm(k, m, n, xt.data(), (1, k as isize), g, (n as isize, 1), dw);
                }
                if self.rg(*b) {
                    let db = self.slot(*b, grads);
                    for row in g.chunks_exact(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Relu(x) => self.unary(*x, grads, |j| if y[j] > 0.0 { g[j] } else { 0.0 }),
            Op::Tanh(x) => self.unary(*x, grads, |j| g[j] * (1.0 - y[j] * y[j])),
            Op::Exp(x) => self.unary(*x, grads, |j| g[j] * y[j]),
            Op::Clamp { x, lo, hi } => {
                let xv = self.nodes[*x].value.data();
                self.unary(*x, grads, |j| {
                    if xv[j] >= *lo && xv[j] <= *hi {
                        g[j]
                    } else {
                        0.0
                    }
                })
            }
            Op::Add(a, b) => {
                self.unary(*a, grads, |j| g[j]);
                self.unary(*b, grads, |j| g[j]);
            }
            Op::Sub(a, b) => {
                self.unary(*a, grads, |j| g[j]);
                self.unary(*b, grads, |j| -g[j]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                self.unary(*a, grads, |j| g[j] * bv[j]);
                self.unary(*b, grads, |j| g[j] * av[j]);
            }
            Op::Scale(x, c) => self.unary(*x, grads, |j| g[j] * c),
            Op::Softmax(x) => {
                let c = node.value.cols();
                let dots: Vec<f64> = g
                    .chunks_exact(c)
                    .zip(y.chunks_exact(c))
                    .map(|(gr, yr)| gr.iter().zip(yr).map(|(a, b)| a * b).sum())
                    .collect();
                self.unary(*x, grads, |j| y[j] * (g[j] - dots[j / c]));
            }
            Op::LogSoftmax(x) => {
                let c = node.value.cols();
                let sums: Vec<f64> = g.chunks_exact(c).map(|r| r.iter().sum()).collect();
                self.unary(*x, grads, |j| g[j] - y[j].exp() * sums[j / c]);
            }
            Op::NegEntropy { x, probs, logp } => {
                let c = self.nodes[*x].value.cols();
                self.unary(*x, grads, |j| {
                    let r = j / c;
                    g[r] * probs[j] * (logp[j] - y[r])
                });
            }
            Op::Pick { x, idx } => {
                if self.rg(*x) {
                    let c = self.nodes[*x].value.cols();
                    let dx = self.slot(*x, grads);
                    for (r, &j) in idx.iter().enumerate() {
                        dx[r * c + j] += g[r];
                    }
                }
            }
            Op::Reduce { x, how, axis } => {
                let t = &self.nodes[*x].value;
                let (r, c) = (t.rows(), t.cols());
                let total = t.len().max(1) as f64;
                match (axis, t.rank()) {
                    (None, _) | (Some(_), 1) => {
                        let s = match how {
                            Reduction::Sum => g[0],
                            Reduction::Mean => g[0] / total,
                        };
                        self.unary(*x, grads, |_| s);
                    }
                    (Some(0), _) => {
                        let d = if *how == Reduction::Mean { r.max(1) as f64 } else { 1.0 };
                        self.unary(*x, grads, |j| g[j % c] / d);
                    }
                    (Some(_), _) => {
                        let d = if *how == Reduction::Mean { c.max(1) as f64 } else { 1.0 };
                        self.unary(*x, grads, |j| g[j / c] / d);
                    }
                }
            }
            Op::KlToPrior { mu, log_std, prior } => {
                let c = prior.len();
                let mv = self.nodes[*mu].value.data();
                let lv = self.nodes[*log_std].value.data();
                self.unary(*mu, grads, |j| g[j / c] * (mv[j] - prior[j % c]));
                self.unary(*log_std, grads, |j| g[j / c] * ((2.0 * lv[j]).exp() - 1.0));
            }
            Op::LinComb(terms) => {
                for &(x, c) in terms {
                    self.unary(x, grads, |j| g[j] * c);
                }
            }
        }
    }

    fn slot<'a>(&self, x: usize, grads: &'a mut [Option<Vec<f64>>]) -> &'a mut Vec<f64> {
        let len = self.nodes[x].value.len();
        grads[x].get_or_insert_with(|| vec![0.0; len])
    }

    fn unary(&self, x: usize, grads: &mut [Option<Vec<f64>>], f: impl Fn(usize) -> f64) {
        if !self.rg(x) {
            return;
        }
        let dx = self.slot(x, grads);
        for (j, d) in dx.iter_mut().enumerate() {
            *d += f(j);
        }
    }
}

/// Row-wise softmax and log-softmax, both max-shifted.
pub(crate) fn softmax_rows(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let c = t.cols();
    let mut probs = Vec::with_capacity(t.len());
    let mut logp = Vec::with_capacity(t.len());
    for row in t.data().chunks_exact(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for &v in row {
            let l = v - lse;
            logp.push(l);
            probs.push(l.exp());
        }
    }
    (probs, logp)
}

/// `c += a · b` with `a: m×k`, `b: k×n` given by (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index reachable through the strides,
    // which describe dense row- or column-major views of the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
