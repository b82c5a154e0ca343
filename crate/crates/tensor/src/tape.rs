//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends one node holding its output value and the information
//! its gradient rule needs. Parents always precede children, so the node
//! list is already a topological order and `backward` is a single reverse
//! sweep that visits each node once.
//!
//! ```
//! use mmvt_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_f64_slice(vec![3], &[1.0, -2.0, 3.0]).unwrap().with_grad());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

use crate::kernels;
use crate::tensor::{inverse_permutation, permute_into, split_at_axis};
use crate::{Element, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<E> {
    Leaf,
    MatMul { a: Var, b: Var },
    Bmm { a: Var, b: Var, trans_b: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: E },
    Sum { x: Var },
    Mean { x: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<E>,
        rstd: Vec<E>,
    },
    Gelu { x: Var },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: E,
        probs: Vec<E>,
    },
}

impl<E> Op<E> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Linear { .. } => "linear",
            Op::Add { .. } => "add",
            Op::AddBias { .. } => "add_bias",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Bmm { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::Linear { x, w, b } => {
                let mut p = vec![*x, *w];
                p.extend(b);
                p
            }
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Scale { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::Softmax { x, .. }
            | Op::Gelu { x }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Narrow { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to the leaves that require them.
#[derive(Debug)]
pub struct Gradients<E> {
    by_node: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient for a leaf; `None` if the leaf does not require grad or the
    /// loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but yields zeros for leaves the loss does not reach.
    pub fn get_or_zeros(&self, tape: &Tape<E>, v: Var) -> Tensor<E> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).dims().to_vec()))
    }
}

/// Single-threaded recording of one forward pass.
pub struct Tape<E> {
    nodes: Vec<Node<E>>,
    grad_enabled: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn accumulate<E: Element>(
    grads: &mut [Option<Vec<E>>],
    v: Var,
    numel: usize,
    f: impl FnOnce(&mut [E]),
) {
    let slot = grads[v.0].get_or_insert_with(|| vec![E::zero(); numel]);
    f(slot);
}

fn add_into<E: Element>(dst: &mut [E], src: &[E]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never tracks gradients; leaves are recorded as constants.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    /// Drops every node recorded after the first `len`, so the tape can be
    /// replayed from a shared prefix (e.g. bound parameters).
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Mutable access to a leaf's value. Nodes computed from it are not
    /// updated; truncate the tape past the leaf before reusing it.
    pub fn leaf_value_mut(&mut self, v: Var) -> Result<&mut Tensor<E>> {
        let node = &mut self.nodes[v.0];
        match node.op {
            Op::Leaf => Ok(&mut node.value),
            _ => Err(TensorError::InvalidArgument(format!("node {} is not a leaf", v.0))),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<E>) -> Var {
        let requires_grad = self.grad_enabled && t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor<E>) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>) -> Result<Var> {
        if cfg!(any(debug_assertions, test, feature = "check-finite")) && !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn make(&self, dims: Vec<usize>, data: Vec<E>) -> Result<Tensor<E>> {
        Tensor::new(dims, data)
    }

    /// `[m×k] · [k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
            return Err(shape_err("matmul", ad, bd));
        }
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        let mut out = vec![E::zero(); m * n];
        kernels::matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = self.make(vec![m, n], out)?;
        self.push(t, Op::MatMul { a, b })
    }

    /// Batched product of `[B×m×k]` with `[B×k×n]`, or with `[B×n×k]`
    /// transposed when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        let ok = ad.len() == 3
            && bd.len() == 3
            && ad[0] == bd[0]
            && if trans_b { ad[2] == bd[2] } else { ad[2] == bd[1] };
        if !ok {
            return Err(shape_err("bmm", ad, bd));
        }
        let (batch, m, k) = (ad[0], ad[1], ad[2]);
        let n = if trans_b { bd[1] } else { bd[2] };
        let mut out = vec![E::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let a_blk = &av[i * m * k..(i + 1) * m * k];
            let b_blk = &bv[i * k * n..(i + 1) * k * n];
            let c_blk = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                kernels::matmul_nt(a_blk, b_blk, c_blk, m, k, n);
            } else {
                kernels::matmul_nn(a_blk, b_blk, c_blk, m, k, n);
            }
        }
        let t = self.make(vec![batch, m, n], out)?;
        self.push(t, Op::Bmm { a, b, trans_b })
    }

    /// `x · wᵀ + b` over the last axis of `x`; `w` is `[out × in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xd, wd) = (self.dims(x), self.dims(w));
        let width = *xd.last().expect("rank >= 1");
        if wd.len() != 2 || wd[1] != width {
            return Err(shape_err("linear", xd, wd));
        }
        let out_f = wd[0];
        if let Some(b) = b {
            if self.dims(b) != [out_f] {
                return Err(shape_err("linear bias", wd, self.dims(b)));
            }
        }
        let rows = self.value(x).numel() / width;
        let mut out = vec![E::zero(); rows * out_f];
        kernels::matmul_nt(self.value(x).data(), self.value(w).data(), &mut out, rows, width, out_f);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(out_f) {
                add_into(row, bias);
            }
        }
        let mut dims = xd.to_vec();
        *dims.last_mut().expect("rank >= 1") = out_f;
        let t = self.make(dims, out)?;
        self.push(t, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err("add", self.dims(a), self.dims(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = self.make(self.dims(a).to_vec(), data)?;
        self.push(t, Op::Add { a, b })
    }

    /// Adds a `[d]` vector to every row of a tensor whose last axis is `d`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let width = *self.dims(x).last().expect("rank >= 1");
        if self.dims(bias) != [width] {
            return Err(shape_err("add_bias", self.dims(x), self.dims(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(width) {
            add_into(row, b);
        }
        let t = self.make(self.dims(x).to_vec(), data)?;
        self.push(t, Op::AddBias { x, bias })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err("mul", self.dims(a), self.dims(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = self.make(self.dims(a).to_vec(), data)?;
        self.push(t, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let factor = E::from_f64(factor);
        let data = self.value(x).data().iter().map(|&v| v * factor).collect();
        let t = self.make(self.dims(x).to_vec(), data)?;
        self.push(t, Op::Scale { x, factor })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<E>() / E::from_f64(v.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean { x })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = split_at_axis(self.dims(x), axis)?;
        let mut out = vec![E::zero(); self.value(x).numel()];
        kernels::softmax(self.value(x).data(), &mut out, outer, len, inner);
        let t = self.make(self.dims(x).to_vec(), out)?;
        self.push(t, Op::Softmax { x, axis })
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let width = *self.dims(x).last().expect("rank >= 1");
        if self.dims(gamma) != [width] || self.dims(beta) != [width] {
            return Err(shape_err("layer_norm", self.dims(x), self.dims(gamma)));
        }
        let mut out = vec![E::zero(); self.value(x).numel()];
        let (mean, rstd) = kernels::layer_norm(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            E::from_f64(eps),
            &mut out,
            width,
        );
        let t = self.make(self.dims(x).to_vec(), out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
        )
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| kernels::gelu(v)).collect();
        let t = self.make(self.dims(x).to_vec(), data)?;
        self.push(t, Op::Gelu { x })
    }

    pub fn reshape(&mut self, x: Var, dims: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).reshape(dims)?;
        self.push(t, Op::Reshape { x })
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(x).permute(axes)?;
        self.push(
            t,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<E>> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat(&tensors, axis)?;
        self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).narrow(axis, start, len)?;
        self.push(t, Op::Narrow { x, axis, start })
    }

    /// Mean cross-entropy of `[B×C]` logits against label-smoothed targets:
    /// `1 − s` on the true class and `s / (C − 1)` on every other class.
    pub fn cross_entropy_smoothed(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: f64,
    ) -> Result<Var> {
        let dims = self.dims(logits).to_vec();
        if dims.len() != 2 || dims[0] != targets.len() {
            return Err(shape_err("cross_entropy", &dims, &[targets.len()]));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(TensorError::InvalidArgument(format!(
                "smoothing must lie in [0, 1), got {smoothing}"
            )));
        }
        let (batch, classes) = (dims[0], dims[1]);
        if smoothing > 0.0 && classes < 2 {
            return Err(TensorError::InvalidArgument(
                "label smoothing needs at least two classes".into(),
            ));
        }
        if let Some(&index) = targets.iter().find(|&&t| t >= classes) {
            return Err(TensorError::ClassOutOfRange { index, classes });
        }
        let logp = kernels::log_softmax_rows(self.value(logits).data(), classes);
        let on = E::from_f64(1.0 - smoothing);
        let off = if classes > 1 {
            E::from_f64(smoothing / (classes - 1) as f64)
        } else {
            E::zero()
        };
        let mut total = E::zero();
        for (row, &t) in logp.chunks_exact(classes).zip(targets) {
            for (c, &lp) in row.iter().enumerate() {
                let q = if c == t { on } else { off };
                if q != E::zero() {
                    total = total - q * lp;
                }
            }
        }
        let loss = total / E::from_f64(batch as f64);
        let probs = logp.iter().map(|&v| v.exp()).collect();
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing: E::from_f64(smoothing),
                probs,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(TensorError::NonScalarLoss(loss_value.dims().to_vec()));
        }
        let mut grads: Vec<Option<Vec<E>>> = (0..=loss.0).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![E::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.apply_rule(node, &g, &mut grads)?;
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor::new(node.value.dims().to_vec(), g)?);
            }
        }
        Ok(Gradients { by_node: leaves })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn apply_rule(&self, node: &Node<E>, g: &[E], grads: &mut [Option<Vec<E>>]) -> Result<()> {
        let numel = |v: Var| self.value(v).numel();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ad, bd) = (self.dims(*a), self.dims(*b));
                let (m, k, n) = (ad[0], ad[1], bd[1]);
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    accumulate(grads, *a, m * k, |da| kernels::matmul_nt(g, bv, da, m, n, k));
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    accumulate(grads, *b, k * n, |db| kernels::matmul_tn(av, g, db, k, m, n));
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (ad, bd) = (self.dims(*a), self.dims(*b));
                let (batch, m, k) = (ad[0], ad[1], ad[2]);
                let n = if *trans_b { bd[1] } else { bd[2] };
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate(grads, *a, batch * m * k, |da| {
                        for i in 0..batch {
                            let g_blk = &g[i * m * n..(i + 1) * m * n];
                            let b_blk = &bv[i * k * n..(i + 1) * k * n];
                            let da_blk = &mut da[i * m * k..(i + 1) * m * k];
                            if *trans_b {
                                kernels::matmul_nn(g_blk, b_blk, da_blk, m, n, k);
                            } else {
                                kernels::matmul_nt(g_blk, b_blk, da_blk, m, n, k);
                            }
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate(grads, *b, batch * k * n, |db| {
                        for i in 0..batch {
                            let g_blk = &g[i * m * n..(i + 1) * m * n];
                            let a_blk = &av[i * m * k..(i + 1) * m * k];
                            let db_blk = &mut db[i * k * n..(i + 1) * k * n];
                            if *trans_b {
                                kernels::matmul_tn(g_blk, a_blk, db_blk, n, m, k);
                            } else {
                                kernels::matmul_tn(a_blk, g_blk, db_blk, k, m, n);
                            }
                        }
                    });
                }
            }
            Op::Linear { x, w, b } => {
                let wd = self.dims(*w);
                let (out_f, in_f) = (wd[0], wd[1]);
                let rows = numel(*x) / in_f;
                if self.wants(*x) {
                    let wv = self.value(*w).data();
                    accumulate(grads, *x, rows * in_f, |dx| {
                        kernels::matmul_nn(g, wv, dx, rows, out_f, in_f)
                    });
                }
                if self.wants(*w) {
                    let xv = self.value(*x).data();
                    accumulate(grads, *w, out_f * in_f, |dw| {
                        kernels::matmul_tn(g, xv, dw, out_f, rows, in_f)
                    });
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    accumulate(grads, b, out_f, |db| {
                        for row in g.chunks_exact(out_f) {
                            add_into(db, row);
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                for p in [*a, *b] {
                    if self.wants(p) {
                        accumulate(grads, p, g.len(), |d| add_into(d, g));
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.len(), |d| add_into(d, g));
                }
                if self.wants(*bias) {
                    let width = numel(*bias);
                    accumulate(grads, *bias, width, |d| {
                        for row in g.chunks_exact(width) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate(grads, *a, g.len(), |d| {
                        for ((d, &gi), &bi) in d.iter_mut().zip(g).zip(bv) {
                            *d = *d + gi * bi;
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.len(), |d| {
                        for ((d, &gi), &ai) in d.iter_mut().zip(g).zip(av) {
                            *d = *d + gi * ai;
                        }
                    });
                }
            }
            Op::Scale { x, factor } => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.len(), |d| {
                        for (d, &gi) in d.iter_mut().zip(g) {
                            *d = *d + gi * *factor;
                        }
                    });
                }
            }
            Op::Sum { x } | Op::Mean { x } => {
                if self.wants(*x) {
                    let n = numel(*x);
                    let upstream = if let Op::Mean { .. } = node.op {
                        g[0] / E::from_f64(n as f64)
                    } else {
                        g[0]
                    };
                    accumulate(grads, *x, n, |d| {
                        for d in d.iter_mut() {
                            *d = *d + upstream;
                        }
                    });
                }
            }
            Op::Softmax { x, axis } => {
                if self.wants(*x) {
                    let (outer, len, inner) = split_at_axis(self.dims(*x), *axis)?;
                    let y = node.value.data();
                    accumulate(grads, *x, g.len(), |d| {
                        kernels::softmax_backward(y, g, d, outer, len, inner)
                    });
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let width = numel(*gamma);
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let n = E::from_f64(width as f64);
                let xhat = |r: usize, j: usize| (xv[r * width + j] - mean[r]) * rstd[r];
                if self.wants(*x) {
                    accumulate(grads, *x, xv.len(), |dx| {
                        for r in 0..mean.len() {
                            let gr = &g[r * width..(r + 1) * width];
                            let mut mean_dxhat = E::zero();
                            let mut mean_dxhat_xhat = E::zero();
                            for j in 0..width {
                                let dxh = gr[j] * gv[j];
                                mean_dxhat = mean_dxhat + dxh;
                                mean_dxhat_xhat = mean_dxhat_xhat + dxh * xhat(r, j);
                            }
                            mean_dxhat = mean_dxhat / n;
                            mean_dxhat_xhat = mean_dxhat_xhat / n;
                            for j in 0..width {
                                let dxh = gr[j] * gv[j];
                                dx[r * width + j] = dx[r * width + j]
                                    + rstd[r] * (dxh - mean_dxhat - xhat(r, j) * mean_dxhat_xhat);
                            }
                        }
                    });
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, width, |dg| {
                        for r in 0..mean.len() {
                            for j in 0..width {
                                dg[j] = dg[j] + g[r * width + j] * xhat(r, j);
                            }
                        }
                    });
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, width, |db| {
                        for row in g.chunks_exact(width) {
                            add_into(db, row);
                        }
                    });
                }
            }
            Op::Gelu { x } => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    accumulate(grads, *x, g.len(), |d| {
                        for ((d, &gi), &xi) in d.iter_mut().zip(g).zip(xv) {
                            *d = *d + gi * kernels::gelu_grad(xi);
                        }
                    });
                }
            }
            Op::Reshape { x } => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.len(), |d| add_into(d, g));
                }
            }
            Op::Permute { x, axes } => {
                if self.wants(*x) {
                    let inv = inverse_permutation(axes);
                    let mut buf = vec![E::zero(); g.len()];
                    permute_into(g, node.value.dims(), &inv, &mut buf);
                    accumulate(grads, *x, g.len(), |d| add_into(d, &buf));
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_at_axis(node.value.dims(), *axis)?;
                let mut offset = 0;
                for &p in parts {
                    let size = self.dims(p)[*axis];
                    if self.wants(p) {
                        accumulate(grads, p, outer * size * inner, |d| {
                            for o in 0..outer {
                                let src = (o * total + offset) * inner;
                                add_into(
                                    &mut d[o * size * inner..(o + 1) * size * inner],
                                    &g[src..src + size * inner],
                                );
                            }
                        });
                    }
                    offset += size;
                }
            }
            Op::Narrow { x, axis, start } => {
                if self.wants(*x) {
                    let (outer, size, inner) = split_at_axis(self.dims(*x), *axis)?;
                    let len = node.value.dims()[*axis];
                    accumulate(grads, *x, outer * size * inner, |d| {
                        for o in 0..outer {
                            let dst = (o * size + start) * inner;
                            add_into(
                                &mut d[dst..dst + len * inner],
                                &g[o * len * inner..(o + 1) * len * inner],
                            );
                        }
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                if self.wants(*logits) {
                    let classes = self.dims(*logits)[1];
                    let batch = targets.len();
                    let scale = g[0] / E::from_f64(batch as f64);
                    let on = E::one() - *smoothing;
                    let off = if classes > 1 {
                        *smoothing / E::from_f64((classes - 1) as f64)
                    } else {
                        E::zero()
                    };
                    accumulate(grads, *logits, probs.len(), |d| {
                        for (b, &t) in targets.iter().enumerate() {
                            for c in 0..classes {
                                let q = if c == t { on } else { off };
                                let i = b * classes + c;
                                d[i] = d[i] + scale * (probs[i] - q);
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }

    /// Checks the tape's structural invariant: every parent precedes its child.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, n)| n.op.parents().iter().all(|p| p.0 < i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(dims.to_vec(), v).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let c = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn row_times_column() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1., 2.]));
        let b = tape.constant(t(&[2, 1], &[3., 4.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[3], &[0., 0., 0.]));
        let s = tape.softmax(z, 0).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = tape.constant(t(&[2], &[1000., 0.]));
        let s = tape.softmax(big, 0).unwrap();
        let v = tape.value(s).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_on_inner_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1., 2., 3., 0., 0., 0.]));
        let s = tape.softmax(x, 0).unwrap();
        let v = tape.value(s).data().to_vec();
        for col in 0..3 {
            assert!((v[col] + v[3 + col] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_degenerate_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[5., 5., 5., 5.]));
        let ones = tape.constant(t(&[4], &[1.; 4]));
        let zeros = tape.constant(t(&[4], &[0.; 4]));
        let y = tape.layer_norm(x, ones, zeros, 1e-6).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let r = tape.constant(t(&[1, 4], &[0.3, -1.2, 4.0, 2.2]));
        let c = tape.constant(t(&[4], &[2.5; 4]));
        let y = tape.layer_norm(r, zeros, c, 1e-6).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 2.5));

        let y = tape.layer_norm(r, ones, zeros, 1e-6).unwrap();
        let v = tape.value(y).data();
        let mean = v.iter().sum::<f64>() / 4.0;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() <= 1e-6);
        assert!((var - 1.0).abs() <= 1e-4);
    }

    #[test]
    fn layer_norm_rejects_wrong_gamma() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![2, 4]));
        let g = tape.constant(Tensor::zeros(vec![3]));
        assert!(tape.layer_norm(x, g, g, 1e-6).is_err());
    }

    #[test]
    fn gelu_basics() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0., 10.]));
        let y = tape.gelu(x).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_analytic_cases() {
        let mut tape = Tape::new();
        let uniform = tape.constant(t(&[2, 4], &[0.0; 8]));
        let loss = tape.cross_entropy_smoothed(uniform, &[0, 3], 0.0).unwrap();
        assert!((tape.value(loss).data()[0] - 4f64.ln()).abs() < 1e-12);

        let peaked = tape.constant(t(&[1, 3], &[0., 60., 0.]));
        let loss = tape.cross_entropy_smoothed(peaked, &[1], 0.0).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-20);
    }

    #[test]
    fn cross_entropy_rejects_bad_targets() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(vec![1, 3]));
        assert!(matches!(
            tape.cross_entropy_smoothed(l, &[3], 0.1),
            Err(TensorError::ClassOutOfRange { index: 3, classes: 3 })
        ));
        assert!(tape.cross_entropy_smoothed(l, &[0], 1.0).is_err());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &[1., -2., 0.5, 3.]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2., -4., 1., 6.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]).with_grad());
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn no_grad_tape_tracks_nothing() {
        let mut tape = Tape::no_grad();
        let x = tape.leaf(t(&[2], &[1., 2.]).with_grad());
        let s = tape.sum(x).unwrap();
        assert!(!tape.requires_grad(s));
        assert!(tape.backward(s).unwrap().get(x).is_none());
    }

    #[test]
    fn non_finite_is_reported() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[1e300]));
        let y = tape.mul(x, x);
        assert!(matches!(y, Err(TensorError::NonFinite { op: "mul" })));
    }

    #[test]
    fn tape_is_topological() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]).with_grad());
        let b = tape.matmul(a, a).unwrap();
        let c = tape.concat(&[a, b, a], 0).unwrap();
        let s = tape.sum(c).unwrap();
        assert!(tape.is_topologically_ordered());
        assert!(tape.backward(s).is_ok());
    }
}
