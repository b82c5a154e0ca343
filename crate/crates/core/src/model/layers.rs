//! Transformer building blocks recorded onto a [`Tape`].
//!
//! Layers hold [`ParamId`]s only; a forward pass receives the tape and the
//! bound parameter variables (`p[id]`).

use mmvt_tensor::{Element, Tape, Var};
use rand::Rng;

use super::params::{ParamId, ParamKind, ParamStore};
use crate::error::Result;
use crate::model_spec::EncoderDims;

pub const LN_EPS: f64 = 1e-6;

/// Registers parameters in a fixed order with a caller-supplied initializer.
pub struct Builder<'a, E> {
    pub store: ParamStore<E>,
    pub init: &'a mut dyn FnMut(ParamKind, &[usize]) -> mmvt_tensor::Tensor<E>,
}

impl<E: Element> Builder<'_, E> {
    pub fn param(&mut self, name: String, kind: ParamKind, dims: &[usize]) -> ParamId {
        let value = (self.init)(kind, dims);
        self.store.add(name, kind, value)
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.param(format!("{name}.weight"), ParamKind::Weight, &[fan_out, fan_in]),
            b: self.param(format!("{name}.bias"), ParamKind::Bias, &[fan_out]),
        }
    }

    pub fn norm(&mut self, name: &str, width: usize) -> Norm {
        Norm {
            scale: self.param(format!("{name}.scale"), ParamKind::NormScale, &[width]),
            shift: self.param(format!("{name}.shift"), ParamKind::NormShift, &[width]),
        }
    }

    pub fn attention(&mut self, name: &str, hidden: usize, heads: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.query"), hidden, hidden),
            k: self.linear(&format!("{name}.key"), hidden, hidden),
            v: self.linear(&format!("{name}.value"), hidden, hidden),
            o: self.linear(&format!("{name}.out"), hidden, hidden),
            heads,
        }
    }

    pub fn block(&mut self, name: &str, dims: &EncoderDims) -> Block {
        Block {
            ln1: self.norm(&format!("{name}.ln1"), dims.hidden),
            attn: self.attention(&format!("{name}.attn"), dims.hidden, dims.heads),
            ln2: self.norm(&format!("{name}.ln2"), dims.hidden),
            fc1: self.linear(&format!("{name}.mlp.fc1"), dims.hidden, dims.mlp_dim),
            fc2: self.linear(&format!("{name}.mlp.fc2"), dims.mlp_dim, dims.hidden),
        }
    }
}

/// `y = x·Wᵀ + b` with `W: [out × in]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward<E: Element>(&self, t: &mut Tape<E>, p: &[Var], x: Var) -> Result<Var> {
        Ok(t.linear(x, p[self.w.0], Some(p[self.b.0]))?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl Norm {
    pub fn forward<E: Element>(&self, t: &mut Tape<E>, p: &[Var], x: Var) -> Result<Var> {
        Ok(t.layer_norm(x, p[self.scale.0], p[self.shift.0], LN_EPS)?)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

fn split_heads<E: Element>(t: &mut Tape<E>, x: Var, heads: usize) -> Result<Var> {
    let d = t.dims(x).to_vec();
    let (b, n, w) = (d[0], d[1], d[2]);
    let x = t.reshape(x, vec![b, n, heads, w / heads])?;
    let x = t.permute(x, &[0, 2, 1, 3])?;
    Ok(t.reshape(x, vec![b * heads, n, w / heads])?)
}

fn merge_heads<E: Element>(t: &mut Tape<E>, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let d = t.dims(x).to_vec();
    let (n, dh) = (d[1], d[2]);
    let x = t.reshape(x, vec![batch, heads, n, dh])?;
    let x = t.permute(x, &[0, 2, 1, 3])?;
    Ok(t.reshape(x, vec![batch, n, heads * dh])?)
}

impl Attention {
    /// `queries: [B, Nq, d]`, `context: [B, Nk, d]` → `[B, Nq, d]`.
    pub fn forward<E: Element>(&self, t: &mut Tape<E>, p: &[Var], queries: Var, context: Var) -> Result<Var> {
        let d = t.dims(queries).to_vec();
        let (batch, width) = (d[0], d[2]);
        if width % self.heads != 0 {
            return Err(crate::error::invalid(format!(
                "hidden {width} not divisible by {} heads",
                self.heads
            )));
        }
        let q = self.q.forward(t, p, queries)?;
        let k = self.k.forward(t, p, context)?;
        let v = self.v.forward(t, p, context)?;
        let (q, k, v) = (
            split_heads(t, q, self.heads)?,
            split_heads(t, k, self.heads)?,
            split_heads(t, v, self.heads)?,
        );
        let scores = t.bmm(q, k, true)?;
        let scores = t.scale(scores, 1.0 / ((width / self.heads) as f64).sqrt())?;
        let weights = t.softmax(scores, 2)?;
        let mixed = t.bmm(weights, v, false)?;
        let mixed = merge_heads(t, mixed, batch, self.heads)?;
        self.o.forward(t, p, mixed)
    }
}

/// How a block treats stochastic depth on this pass.
pub enum Depth<'a> {
    /// Residual branches scaled by the survival probability.
    Eval { survival: f64 },
    /// The whole block is skipped with probability `1 − survival`.
    Train { survival: f64, rng: &'a mut dyn rand::RngCore },
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
/// Attention runs independently over the leading (batch) axis.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: Norm,
    pub attn: Attention,
    pub ln2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn forward<E: Element>(&self, t: &mut Tape<E>, p: &[Var], x: Var, depth: Depth<'_>) -> Result<Var> {
        let branch_scale = match depth {
            Depth::Eval { survival } => survival,
            Depth::Train { survival, rng } => {
                if survival < 1.0 && !rng.random_bool(survival) {
                    return Ok(x);
                }
                1.0
            }
        };
        let h = self.ln1.forward(t, p, x)?;
        let a = self.attn.forward(t, p, h, h)?;
        let a = if branch_scale != 1.0 { t.scale(a, branch_scale)? } else { a };
        let x = t.add(x, a)?;
        let h = self.ln2.forward(t, p, x)?;
        let h = self.fc1.forward(t, p, h)?;
        let h = t.gelu(h)?;
        let m = self.fc2.forward(t, p, h)?;
        let m = if branch_scale != 1.0 { t.scale(m, branch_scale)? } else { m };
        Ok(t.add(x, m)?)
    }
}

/// Survival probability of block `l` (0-based) out of `depth` under a linear
/// drop ramp `rate·(l+1)/depth`.
pub fn survival(rate: f64, l: usize, depth: usize) -> f64 {
    1.0 - rate * (l + 1) as f64 / depth as f64
}
