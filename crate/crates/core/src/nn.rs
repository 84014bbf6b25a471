//! Pre-norm transformer blocks shared by the text encoder and the ID backbones.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::LabRng;
use crate::tensor::Tensor;

pub const LN_EPS: f32 = 1e-5;
const MASKED: f32 = -1e9;

pub fn normal_tensor<R: Rng + ?Sized>(shape: Vec<usize>, std: f32, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = dist.sample(rng));
    t
}

/// Additive attention mask `[batch * heads, seq, seq]`: padded keys (and,
/// when `causal`, future keys) get a large negative bias.
pub fn attention_mask(batch: usize, seq: usize, heads: usize, lens: &[usize], causal: bool) -> Tensor {
    let mut data = vec![0.0f32; batch * heads * seq * seq];
    for b in 0..batch {
        let len = lens[b];
        for h in 0..heads {
            let base = (b * heads + h) * seq * seq;
            for q in 0..seq {
                for k in 0..seq {
                    if k >= len || (causal && k > q) {
                        data[base + q * seq + k] = MASKED;
                    }
                }
            }
        }
    }
    Tensor::new(vec![batch * heads, seq, seq], data).expect("mask shape")
}

/// Per-forward settings: batch geometry, the shared attention mask and an
/// optional dropout stream (training mode when present).
pub struct Pass<'a> {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub mask: Var,
    pub dropout: f32,
    pub rng: Option<&'a mut LabRng>,
}

impl Pass<'_> {
    pub fn drop(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => g.dropout(x, self.dropout, rng),
            _ => Ok(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{prefix}.gamma"), Tensor::filled(vec![dim], 1.0))?,
            beta: store.add(&format!("{prefix}.beta"), Tensor::zeros(vec![dim]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        std: f32,
        rng: &mut LabRng,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(
                &format!("{prefix}.weight"),
                normal_tensor(vec![fan_in, fan_out], std, rng),
            )?,
            bias: store.add(&format!("{prefix}.bias"), Tensor::zeros(vec![fan_out]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// `x + attn(ln1(x))`, then `x + ffn(ln2(x))`, GELU activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln2: LayerNormParams,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

/// Scalar parameters in one block of width `dim` and feed-forward width `ffn`.
pub fn block_param_count(dim: usize, ffn: usize) -> usize {
    let attn = 4 * (dim * dim + dim);
    let norms = 2 * (2 * dim);
    let ffn = dim * ffn + ffn + ffn * dim + dim;
    attn + norms + ffn
}

impl Block {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        ffn: usize,
        layers: usize,
        rng: &mut LabRng,
    ) -> Result<Self> {
        let std_in = 1.0 / libm::sqrtf(dim as f32);
        let resid = 1.0 / libm::sqrtf(2.0 * layers as f32);
        Ok(Self {
            ln1: LayerNormParams::init(store, &format!("{prefix}.ln1"), dim)?,
            query: Linear::init(store, &format!("{prefix}.attn.query"), dim, dim, std_in, rng)?,
            key: Linear::init(store, &format!("{prefix}.attn.key"), dim, dim, std_in, rng)?,
            value: Linear::init(store, &format!("{prefix}.attn.value"), dim, dim, std_in, rng)?,
            out: Linear::init(store, &format!("{prefix}.attn.out"), dim, dim, std_in * resid, rng)?,
            ln2: LayerNormParams::init(store, &format!("{prefix}.ln2"), dim)?,
            ffn_in: Linear::init(store, &format!("{prefix}.ffn.in"), dim, ffn, std_in, rng)?,
            ffn_out: Linear::init(
                store,
                &format!("{prefix}.ffn.out"),
                ffn,
                dim,
                resid / libm::sqrtf(ffn as f32),
                rng,
            )?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.ln1.gamma,
            self.ln1.beta,
            self.query.weight,
            self.query.bias,
            self.key.weight,
            self.key.bias,
            self.value.weight,
            self.value.bias,
            self.out.weight,
            self.out.bias,
            self.ln2.gamma,
            self.ln2.beta,
            self.ffn_in.weight,
            self.ffn_in.bias,
            self.ffn_out.weight,
            self.ffn_out.bias,
        ]
    }

    /// Returns the block output `[batch * seq, dim]` and the post-softmax
    /// attention weights `[batch * heads, seq, seq]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        pass: &mut Pass<'_>,
    ) -> Result<(Var, Var)> {
        let dim = *g.shape(x).last().unwrap_or(&0);
        let (b, t, h) = (pass.batch, pass.seq, pass.heads);
        if !dim.is_multiple_of(h) || g.value(x).len() != b * t * dim {
            return Err(Error::shape(
                "block",
                format!("input {:?} for batch {b} x seq {t}, {h} heads", g.shape(x)),
            ));
        }
        let dh = dim / h;
        let normed = self.ln1.forward(g, store, x)?;
        let split = |g: &mut Graph, v: Var| -> Result<Var> {
            let s = g.swap_axes12(v, [b, t, h, dh])?;
            g.reshape(s, vec![b * h, t, dh])
        };
        let q = self.query.forward(g, store, normed)?;
        let k = self.key.forward(g, store, normed)?;
        let v = self.value.forward(g, store, normed)?;
        let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
        let scores = g.bmm_nt(q, k)?;
        let scores = g.scale(scores, 1.0 / libm::sqrtf(dh as f32));
        let scores = g.add(scores, pass.mask)?;
        let probs = g.softmax(scores, 2)?;
        let attn = pass.drop(g, probs)?;
        let ctx = g.bmm(attn, v)?;
        let ctx = g.swap_axes12(ctx, [b, h, t, dh])?;
        let ctx = g.reshape(ctx, vec![b * t, dim])?;
        let o = self.out.forward(g, store, ctx)?;
        let o = pass.drop(g, o)?;
        let x = g.add(x, o)?;

        let normed = self.ln2.forward(g, store, x)?;
        let f = self.ffn_in.forward(g, store, normed)?;
        let f = g.gelu(f);
        let f = self.ffn_out.forward(g, store, f)?;
        let f = pass.drop(g, f)?;
        let x = g.add(x, f)?;
        Ok((x, probs))
    }
}
