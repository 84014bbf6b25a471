//! Tokenizer, history flattening and the bidirectional text encoder.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::corpus::{Item, ItemCatalog, ItemId};
use crate::error::{Error, Result};
use crate::nn::{attention_mask, normal_tensor, Block, LayerNormParams, Pass};
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, LabRng};
use crate::tensor::Tensor;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const MASK: u32 = 2;
pub const UNK: u32 = 3;
/// First id handed to a learned token.
pub const FIRST_LEARNED: u32 = 4;

pub const TYPE_CLS: u32 = 0;
pub const TYPE_KEY: u32 = 1;
pub const TYPE_VALUE: u32 = 2;

const SPECIALS: [&str; 4] = ["[PAD]", "[CLS]", "[MASK]", "[UNK]"];

/// Lowercased whitespace tokenizer with a frequency-thresholded vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: BTreeMap<String, u32>,
    tokens: Vec<String>,
    pub min_frequency: usize,
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|w| w.to_lowercase())
}

impl Tokenizer {
    /// Learns a vocabulary from every key and value of the given catalogs.
    /// Learned ids follow lexicographic token order, so they do not depend on
    /// catalog order.
    pub fn build(catalogs: &[&ItemCatalog], min_frequency: usize) -> Result<Self> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for cat in catalogs {
            for item in cat.items() {
                for (k, v) in &item.attrs {
                    for w in words(k).chain(words(v)) {
                        *counts.entry(w).or_insert(0) += 1;
                    }
                }
            }
        }
        let learned: Vec<String> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_frequency.max(1))
            .map(|(w, _)| w)
            .collect();
        if learned.is_empty() {
            return Err(Error::Empty("learned vocabulary"));
        }
        let entries = learned
            .into_iter()
            .enumerate()
            .map(|(i, w)| (w, FIRST_LEARNED + i as u32))
            .collect();
        let mut t = Self::from_entries(entries)?;
        t.min_frequency = min_frequency;
        Ok(t)
    }

    /// Rebuilds a tokenizer from its learned `(token, id)` pairs; ids must be
    /// exactly `FIRST_LEARNED..FIRST_LEARNED + n`.
    pub fn from_entries(entries: Vec<(String, u32)>) -> Result<Self> {
        let n = entries.len();
        let mut tokens: Vec<Option<String>> = vec![None; n];
        let mut vocab = BTreeMap::new();
        for (w, id) in entries {
            let slot = id
                .checked_sub(FIRST_LEARNED)
                .map(|s| s as usize)
                .filter(|&s| s < n)
                .ok_or_else(|| Error::invalid(format!("token id {id} outside learned range")))?;
            if tokens[slot].is_some() || vocab.insert(w.clone(), id).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary entry {w:?} / {id}")));
            }
            tokens[slot] = Some(w);
        }
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(|t| t.expect("filled")));
        Ok(Self {
            vocab,
            tokens: all,
            min_frequency: 1,
        })
    }

    /// Total id space including special tokens.
    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.vocab.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        words(text).map(|w| self.id(&w)).collect()
    }

    /// Learned `(token, id)` pairs in id order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, u32)> + '_ {
        self.tokens
            .iter()
            .enumerate()
            .skip(FIRST_LEARNED as usize)
            .map(|(i, t)| (t.as_str(), i as u32))
    }
}

/// One flattened encoder input. `item_positions` is 0 on the CLS slot and
/// `1, 2, ...` on the tokens of the most recent, second most recent, ... item.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FlatInput {
    pub tokens: Vec<u32>,
    pub types: Vec<u32>,
    pub item_positions: Vec<u32>,
    /// 1 for real tokens, 0 for padding.
    pub attention: Vec<u8>,
}

impl FlatInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of non-padding tokens.
    pub fn real_len(&self) -> usize {
        self.attention.iter().filter(|&&a| a != 0).count()
    }

    fn push(&mut self, token: u32, ty: u32, item_pos: u32) {
        self.tokens.push(token);
        self.types.push(ty);
        self.item_positions.push(item_pos);
        self.attention.push(1);
    }
}

/// Tokens and type ids of one item, without CLS.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Fragment {
    pub tokens: Vec<u32>,
    pub types: Vec<u32>,
}

pub fn flatten_item(item: &Item, tok: &Tokenizer) -> Fragment {
    let mut f = Fragment::default();
    for (k, v) in &item.attrs {
        for t in tok.tokenize(k) {
            f.tokens.push(t);
            f.types.push(TYPE_KEY);
        }
        for t in tok.tokenize(v) {
            f.tokens.push(t);
            f.types.push(TYPE_VALUE);
        }
    }
    f
}

/// `[CLS]` followed by the item fragments, most recent first. Whole oldest
/// items are dropped until the layout fits `max_tokens`; a lone remaining
/// item is cut at its tail.
pub fn flatten_history(
    prefix: &[ItemId],
    catalog: &ItemCatalog,
    tok: &Tokenizer,
    max_tokens: usize,
) -> Result<FlatInput> {
    if prefix.is_empty() {
        return Err(Error::Empty("history prefix"));
    }
    if max_tokens < 2 {
        return Err(Error::invalid("max_tokens must leave room for CLS and one token"));
    }
    let mut frags = Vec::new();
    let mut used = 1;
    for &id in prefix.iter().rev() {
        let f = flatten_item(catalog.get(id)?, tok);
        if !frags.is_empty() && used + f.tokens.len() > max_tokens {
            break;
        }
        used += f.tokens.len();
        frags.push(f);
    }
    let mut out = FlatInput::default();
    out.push(CLS, TYPE_CLS, 0);
    for (i, f) in frags.iter().enumerate() {
        for (&t, &ty) in f.tokens.iter().zip(&f.types) {
            if out.len() == max_tokens {
                break;
            }
            out.push(t, ty, i as u32 + 1);
        }
    }
    Ok(out)
}

/// Per-layer, per-head attention of the CLS query over the input tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub layers: usize,
    pub heads: usize,
    pub tokens: usize,
    /// `[layers, heads, tokens]`, row-major.
    pub weights: Vec<f32>,
    pub item_positions: Vec<u32>,
    pub token_types: Vec<u32>,
}

impl AttentionTrace {
    pub fn row(&self, layer: usize, head: usize) -> &[f32] {
        let start = (layer * self.heads + head) * self.tokens;
        &self.weights[start..start + self.tokens]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn: usize,
    pub max_tokens: usize,
    pub vocab_size: usize,
    pub dropout: f32,
}

impl EncoderConfig {
    /// Desk-scale defaults for a given vocabulary.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            layers: 6,
            heads: 4,
            dim: 64,
            ffn: 256,
            max_tokens: 128,
            vocab_size,
            dropout: 0.0,
        }
    }

    /// Full-size geometry, only used for shape checks.
    pub fn full_scale(vocab_size: usize) -> Self {
        Self {
            layers: 12,
            heads: 12,
            dim: 768,
            ffn: 3072,
            max_tokens: 1024,
            vocab_size,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.dim == 0 || self.ffn == 0 {
            return Err(Error::invalid("encoder sizes must be positive"));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.max_tokens < 2 || self.vocab_size <= FIRST_LEARNED as usize {
            return Err(Error::invalid("max_tokens or vocab_size too small"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token: ParamId,
    pub position: ParamId,
    pub token_type: ParamId,
    pub item_position: ParamId,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNormParams,
    pub mlm_bias: ParamId,
}

/// Pre-norm transformer over flattened text; the MLM head is tied to the
/// token embedding.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub store: ParamStore,
    pub params: EncoderParams,
}

/// Graph handles produced by [`Encoder::forward`].
pub struct EncoderOutput {
    /// Final hidden states `[batch * seq, dim]`.
    pub hidden: Var,
    /// L2-normalised CLS vectors `[batch, dim]`.
    pub cls: Var,
    pub seq: usize,
    /// Post-softmax attention per layer, `[batch * heads, seq, seq]`.
    pub attention: Vec<Var>,
}

const EMB_STD: f32 = 0.1;
const ENCODE_BATCH: usize = 64;

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "encoder-init", 0);
        let mut store = ParamStore::new();
        let d = config.dim;
        let token = store.add("emb.token", normal_tensor(vec![config.vocab_size, d], EMB_STD, &mut r))?;
        let position = store.add("emb.position", normal_tensor(vec![config.max_tokens, d], EMB_STD, &mut r))?;
        let token_type = store.add("emb.type", normal_tensor(vec![3, d], EMB_STD, &mut r))?;
        let item_position = store.add(
            "emb.item_position",
            normal_tensor(vec![config.max_tokens, d], EMB_STD, &mut r),
        )?;
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            blocks.push(Block::init(&mut store, &format!("layer{l}"), d, config.ffn, config.layers, &mut r)?);
        }
        let final_ln = LayerNormParams::init(&mut store, "final_ln", d)?;
        let mlm_bias = store.add("mlm.bias", Tensor::zeros(vec![config.vocab_size]))?;
        Ok(Self {
            config,
            store,
            params: EncoderParams {
                token,
                position,
                token_type,
                item_position,
                blocks,
                final_ln,
                mlm_bias,
            },
        })
    }

    /// Reattaches a parameter store loaded from disk, checking that every
    /// expected tensor is present with the right shape.
    pub fn from_store(config: EncoderConfig, store: ParamStore) -> Result<Self> {
        let template = Self::new(config, 0)?;
        for (_, name, t) in template.store.iter() {
            let id = store.require(name)?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::shape(
                    "encoder load",
                    format!("{name}: {:?} vs {:?}", store.get(id).shape(), t.shape()),
                ));
            }
        }
        if store.len() != template.store.len() {
            return Err(Error::invalid("encoder store has unexpected tensors"));
        }
        let params = template.params.clone();
        let remap = |id: ParamId| store.require(template.store.name(id));
        let blocks = params
            .blocks
            .iter()
            .map(|b| {
                Ok(Block {
                    ln1: LayerNormParams { gamma: remap(b.ln1.gamma)?, beta: remap(b.ln1.beta)? },
                    query: lin(&remap, &b.query)?,
                    key: lin(&remap, &b.key)?,
                    value: lin(&remap, &b.value)?,
                    out: lin(&remap, &b.out)?,
                    ln2: LayerNormParams { gamma: remap(b.ln2.gamma)?, beta: remap(b.ln2.beta)? },
                    ffn_in: lin(&remap, &b.ffn_in)?,
                    ffn_out: lin(&remap, &b.ffn_out)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = EncoderParams {
            token: remap(params.token)?,
            position: remap(params.position)?,
            token_type: remap(params.token_type)?,
            item_position: remap(params.item_position)?,
            blocks,
            final_ln: LayerNormParams {
                gamma: remap(params.final_ln.gamma)?,
                beta: remap(params.final_ln.beta)?,
            },
            mlm_bias: remap(params.mlm_bias)?,
        };
        Ok(Self { config, store, params })
    }

    pub fn embedding_ids(&self) -> Vec<ParamId> {
        let p = &self.params;
        vec![p.token, p.position, p.token_type, p.item_position]
    }

    pub fn layer_ids(&self, layer: usize) -> Vec<ParamId> {
        self.params.blocks[layer].param_ids()
    }

    /// Ids outside the embeddings and the blocks: final norm and MLM bias.
    pub fn head_ids(&self) -> Vec<ParamId> {
        let p = &self.params;
        vec![p.final_ln.gamma, p.final_ln.beta, p.mlm_bias]
    }

    /// Ablation hook: zeroes the token-type and item-position tables, which
    /// reduces the input layer to token plus absolute position.
    pub fn zero_structure_embeddings(&mut self) {
        for id in [self.params.token_type, self.params.item_position] {
            self.store.get_mut(id).data_mut().fill(0.0);
        }
    }

    fn check_input(&self, x: &FlatInput) -> Result<()> {
        let n = x.len();
        if n == 0 {
            return Err(Error::Empty("encoder input"));
        }
        if n > self.config.max_tokens {
            return Err(Error::invalid(format!(
                "input of {n} tokens exceeds max_tokens {}",
                self.config.max_tokens
            )));
        }
        if x.types.len() != n || x.item_positions.len() != n || x.attention.len() != n {
            return Err(Error::shape("encoder input", "field lengths differ"));
        }
        if x.attention.first() != Some(&1) {
            return Err(Error::invalid("position 0 must be a real token"));
        }
        if let Some(&t) = x.tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::OutOfRange {
                what: "token id",
                index: t as usize,
                size: self.config.vocab_size,
            });
        }
        if x.types.iter().any(|&t| t > TYPE_VALUE)
            || x.item_positions.iter().any(|&p| p as usize >= self.config.max_tokens)
        {
            return Err(Error::invalid("token type or item position out of range"));
        }
        Ok(())
    }

    /// Builds the forward graph for a batch. Inputs are right-padded to the
    /// longest one; padded keys are masked. Dropout is active iff `rng` is
    /// given.
    pub fn forward(
        &self,
        g: &mut Graph,
        inputs: &[FlatInput],
        rng: Option<&mut LabRng>,
    ) -> Result<EncoderOutput> {
        if inputs.is_empty() {
            return Err(Error::Empty("encoder batch"));
        }
        for x in inputs {
            self.check_input(x)?;
        }
        let b = inputs.len();
        let t = inputs.iter().map(FlatInput::len).max().unwrap_or(1);
        let mut tok = vec![PAD as usize; b * t];
        let mut ty = vec![0usize; b * t];
        let mut ip = vec![0usize; b * t];
        let mut pos = vec![0usize; b * t];
        let mut lens = Vec::with_capacity(b);
        let mut key_ok = vec![false; b * t];
        for (i, x) in inputs.iter().enumerate() {
            for j in 0..t {
                pos[i * t + j] = j;
            }
            for j in 0..x.len() {
                tok[i * t + j] = x.tokens[j] as usize;
                ty[i * t + j] = x.types[j] as usize;
                ip[i * t + j] = x.item_positions[j] as usize;
                key_ok[i * t + j] = x.attention[j] != 0;
            }
            lens.push(t);
        }
        let p = &self.params;
        let s = &self.store;
        let te = g.param(s, p.token);
        let pe = g.param(s, p.position);
        let tye = g.param(s, p.token_type);
        let ipe = g.param(s, p.item_position);
        let mut x = g.gather_rows(te, &tok)?;
        let e = g.gather_rows(pe, &pos)?;
        x = g.add(x, e)?;
        let e = g.gather_rows(tye, &ty)?;
        x = g.add(x, e)?;
        let e = g.gather_rows(ipe, &ip)?;
        x = g.add(x, e)?;

        let heads = self.config.heads;
        let mut mask = attention_mask(b, t, heads, &lens, false);
        {
            let data = mask.data_mut();
            for bi in 0..b {
                for h in 0..heads {
                    let base = (bi * heads + h) * t * t;
                    for q in 0..t {
                        for k in 0..t {
                            if !key_ok[bi * t + k] {
                                data[base + q * t + k] = -1e9;
                            }
                        }
                    }
                }
            }
        }
        let mask = g.constant(mask);
        let mut pass = Pass {
            batch: b,
            seq: t,
            heads,
            mask,
            dropout: self.config.dropout,
            rng,
        };
        x = pass.drop(g, x)?;
        let mut attention = Vec::with_capacity(self.config.layers);
        for block in &p.blocks {
            let (y, probs) = block.forward(g, s, x, &mut pass)?;
            x = y;
            attention.push(probs);
        }
        let hidden = p.final_ln.forward(g, s, x)?;
        let cls_rows: Vec<usize> = (0..b).map(|i| i * t).collect();
        let cls = g.gather_rows(hidden, &cls_rows)?;
        let cls = g.l2_normalize(cls);
        Ok(EncoderOutput {
            hidden,
            cls,
            seq: t,
            attention,
        })
    }

    /// MLM logits `[rows.len(), vocab]` for the given flat hidden-state rows.
    pub fn mlm_logits(&self, g: &mut Graph, hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = g.gather_rows(hidden, rows)?;
        let te = g.param(&self.store, self.params.token);
        let bias = g.param(&self.store, self.params.mlm_bias);
        let logits = g.matmul_nt(h, te)?;
        g.add_bias(logits, bias)
    }

    /// Evaluation-mode encoding of one input, optionally with the CLS
    /// attention trace.
    pub fn encode(&self, input: &FlatInput, capture: bool) -> Result<(Vec<f32>, Option<AttentionTrace>)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, core::slice::from_ref(input), None)?;
        let v = g.value(out.cls).to_vec();
        if !capture {
            return Ok((v, None));
        }
        let (l, h, t) = (self.config.layers, self.config.heads, out.seq);
        let n = input.len();
        let mut weights = Vec::with_capacity(l * h * n);
        for &a in &out.attention {
            let probs = g.value(a);
            for head in 0..h {
                // query 0 is the CLS slot
                let start = head * t * t;
                weights.extend_from_slice(&probs[start..start + n]);
            }
        }
        Ok((
            v,
            Some(AttentionTrace {
                layers: l,
                heads: h,
                tokens: n,
                weights,
                item_positions: input.item_positions.clone(),
                token_types: input.types.clone(),
            }),
        ))
    }

    /// Evaluation-mode CLS vectors for many inputs, in input order.
    pub fn encode_batch(&self, inputs: &[FlatInput]) -> Result<Vec<Vec<f32>>> {
        let d = self.config.dim;
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(ENCODE_BATCH) {
            let mut g = Graph::new();
            let o = self.forward(&mut g, chunk, None)?;
            out.extend(g.value(o.cls).chunks(d).map(<[f32]>::to_vec));
        }
        Ok(out)
    }

    pub fn item_input(&self, id: ItemId, catalog: &ItemCatalog, tok: &Tokenizer) -> Result<FlatInput> {
        flatten_history(&[id], catalog, tok, self.config.max_tokens)
    }

    pub fn encode_item(&self, id: ItemId, catalog: &ItemCatalog, tok: &Tokenizer) -> Result<Vec<f32>> {
        Ok(self.encode(&self.item_input(id, catalog, tok)?, false)?.0)
    }

    /// Every catalog item as a `[len, dim]` matrix.
    pub fn encode_catalog(&self, catalog: &ItemCatalog, tok: &Tokenizer) -> Result<Tensor> {
        let inputs = (0..catalog.len() as ItemId)
            .map(|i| self.item_input(i, catalog, tok))
            .collect::<Result<Vec<_>>>()?;
        let rows = self.encode_batch(&inputs)?;
        Tensor::new(
            vec![catalog.len(), self.config.dim],
            rows.into_iter().flatten().collect(),
        )
    }
}

fn lin(
    remap: &impl Fn(ParamId) -> Result<ParamId>,
    l: &crate::nn::Linear,
) -> Result<crate::nn::Linear> {
    Ok(crate::nn::Linear {
        weight: remap(l.weight)?,
        bias: remap(l.bias)?,
    })
}
