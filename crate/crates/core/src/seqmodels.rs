//! ID-based sequence backbones (SASRec, BERT4Rec) over a pluggable item table.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::corpus::ItemId;
use crate::error::{Error, Result};
use crate::eval::Scorer;
use crate::nn::{attention_mask, normal_tensor, Block, LayerNormParams, Pass};
use crate::params::{hex, ParamId, ParamStore};
use crate::rng::{self, LabRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Provenance {
    Random,
    Lf,
    Pt,
    Ft,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Random => "random",
            Provenance::Lf => "LF",
            Provenance::Pt => "PT",
            Provenance::Ft => "FT",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(Provenance::Random),
            "lf" => Ok(Provenance::Lf),
            "pt" => Ok(Provenance::Pt),
            "ft" => Ok(Provenance::Ft),
            _ => Err(Error::Variant(format!("unknown provenance {s:?}"))),
        }
    }
}

/// Catalog-aligned item matrix with its origin.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    matrix: Tensor,
    provenance: Provenance,
    pub trainable: bool,
    /// Content hash of the encoder checkpoint the rows came from.
    pub source: Option<String>,
}

impl EmbeddingTable {
    pub fn new(matrix: Tensor, provenance: Provenance, trainable: bool) -> Result<Self> {
        if matrix.shape().len() != 2 {
            return Err(Error::shape("embedding table", format!("{:?} is not a matrix", matrix.shape())));
        }
        Ok(Self {
            matrix,
            provenance,
            trainable,
            source: None,
        })
    }

    /// Gaussian rows with standard deviation `1/sqrt(dim)`.
    pub fn random(items: usize, dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "random-table", 0);
        let m = normal_tensor(vec![items, dim], 1.0 / libm::sqrtf(dim as f32), &mut r);
        Self {
            matrix: m,
            provenance: Provenance::Random,
            trainable: true,
            source: None,
        }
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn checksum(&self) -> String {
        let mut s = ParamStore::new();
        let id = s.add("table", self.matrix.clone()).expect("fresh store");
        hex(&s.hash_of([id]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    SasRec,
    Bert4Rec,
}

impl BackboneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::SasRec => "sasrec",
            BackboneKind::Bert4Rec => "bert4rec",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sasrec" => Ok(BackboneKind::SasRec),
            "bert4rec" => Ok(BackboneKind::Bert4Rec),
            _ => Err(Error::Variant(format!("unknown backbone {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub max_items: usize,
    pub dropout: f32,
    /// Cloze corruption rate (BERT4Rec only).
    pub mask_prob: f32,
}

impl BackboneConfig {
    pub fn sasrec(dim: usize) -> Self {
        Self {
            kind: BackboneKind::SasRec,
            layers: 2,
            heads: 1,
            dim,
            max_items: 50,
            dropout: 0.1,
            mask_prob: 0.2,
        }
    }

    pub fn bert4rec(dim: usize) -> Self {
        Self {
            kind: BackboneKind::Bert4Rec,
            heads: 2,
            ..Self::sasrec(dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "backbone needs layers >= 1 and dim {} divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.max_items < 2 {
            return Err(Error::invalid("max_items must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.mask_prob) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("mask_prob and dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// A backbone together with its item table. Output projections are tied to
/// the (effective) item table.
#[derive(Debug, Clone)]
pub struct SeqModel {
    pub config: BackboneConfig,
    pub store: ParamStore,
    pub table: ParamId,
    /// Trainable ID rows added to the table rows when present.
    pub id_table: Option<ParamId>,
    /// Embedding of the Cloze mask item (BERT4Rec).
    pub mask_item: Option<ParamId>,
    pub position: ParamId,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNormParams,
    provenance: Provenance,
    pub source: Option<String>,
}

/// Rows of the hidden-state matrix and the item each one must predict.
struct Targets {
    rows: Vec<usize>,
    items: Vec<usize>,
}

impl SeqModel {
    pub fn new(config: BackboneConfig, table: EmbeddingTable, seed: u64) -> Result<Self> {
        config.validate()?;
        if table.dim() != config.dim {
            return Err(Error::shape(
                "seq model",
                format!("table dim {} vs backbone dim {}", table.dim(), config.dim),
            ));
        }
        let mut r = rng::stream(seed, "backbone-init", 0);
        let mut store = ParamStore::new();
        let d = config.dim;
        let provenance = table.provenance();
        let source = table.source.clone();
        let trainable = table.trainable;
        let table_id = store.add("item.table", table.matrix)?;
        store.set_trainable(table_id, trainable);
        let mask_item = match config.kind {
            BackboneKind::Bert4Rec => Some(store.add(
                "item.mask",
                normal_tensor(vec![1, d], 1.0 / libm::sqrtf(d as f32), &mut r),
            )?),
            BackboneKind::SasRec => None,
        };
        let position = store.add("position", normal_tensor(vec![config.max_items, d], 0.1, &mut r))?;
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            blocks.push(Block::init(&mut store, &format!("layer{l}"), d, 4 * d, config.layers, &mut r)?);
        }
        let final_ln = LayerNormParams::init(&mut store, "final_ln", d)?;
        Ok(Self {
            config,
            store,
            table: table_id,
            id_table: None,
            mask_item,
            position,
            blocks,
            final_ln,
            provenance,
            source,
        })
    }

    /// Adds a trainable random ID table on top of the (now frozen) text rows.
    pub fn with_additive_ids(mut self, seed: u64) -> Result<Self> {
        if self.id_table.is_some() {
            return Err(Error::invalid("additive ID table already present"));
        }
        let n = self.num_items();
        let ids = EmbeddingTable::random(n, self.config.dim, rng::derive(seed, "additive-ids", 0));
        let id = self.store.add("item.ids", ids.matrix)?;
        self.store.set_trainable(self.table, false);
        self.id_table = Some(id);
        Ok(self)
    }

    /// Reattaches a parameter store loaded from disk. The store must hold
    /// exactly the tensors `new` creates (plus `item.ids` for additive-ID
    /// models), in creation order and with matching shapes.
    pub fn from_store(config: BackboneConfig, provenance: Provenance, source: Option<String>, store: ParamStore) -> Result<Self> {
        let rows = store.get(store.require("item.table")?).rows();
        let placeholder = EmbeddingTable::new(Tensor::zeros(vec![rows, config.dim]), provenance, false)?;
        let mut template = Self::new(config, placeholder, 0)?;
        if store.id("item.ids").is_some() {
            template = template.with_additive_ids(0)?;
        }
        if store.len() != template.store.len() {
            return Err(Error::invalid(format!(
                "backbone store has {} tensors, expected {}",
                store.len(),
                template.store.len()
            )));
        }
        for ((_, a, x), (_, b, y)) in template.store.iter().zip(store.iter()) {
            if a != b || x.shape() != y.shape() {
                return Err(Error::shape("backbone load", format!("{b} {:?} where {a} {:?} expected", y.shape(), x.shape())));
            }
        }
        // ids are positional, so the template's handles address the loaded store
        template.store = store;
        template.source = source;
        Ok(template)
    }

    pub fn num_items(&self) -> usize {
        self.store.get(self.table).rows()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// The current text/ID table rows (without any additive ID rows).
    pub fn table(&self) -> EmbeddingTable {
        EmbeddingTable {
            matrix: self.store.get(self.table).clone(),
            provenance: self.provenance,
            trainable: self.store.is_trainable(self.table),
            source: self.source.clone(),
        }
    }

    pub fn set_table_trainable(&mut self, flag: bool) {
        self.store.set_trainable(self.table, flag);
    }

    /// Every parameter except the item tables.
    pub fn backbone_ids(&self) -> Vec<ParamId> {
        let item: Vec<ParamId> = [Some(self.table), self.id_table].into_iter().flatten().collect();
        self.store.ids().filter(|id| !item.contains(id)).collect()
    }

    /// Item vectors used for both input and output, `[n, d]`.
    pub fn item_matrix(&self, g: &mut Graph) -> Result<Var> {
        let t = g.param(&self.store, self.table);
        match self.id_table {
            Some(id) => {
                let i = g.param(&self.store, id);
                g.add(t, i)
            }
            None => Ok(t),
        }
    }

    /// Effective item vectors as plain data.
    pub fn effective_table(&self) -> Tensor {
        let mut m = self.store.get(self.table).clone();
        if let Some(id) = self.id_table {
            for (a, b) in m.data_mut().iter_mut().zip(self.store.get(id).data()) {
                *a += *b;
            }
        }
        m.set_requires_grad(false);
        m
    }

    fn mask_token(&self) -> usize {
        self.num_items()
    }

    /// Runs the transformer over right-padded id sequences (ids may include
    /// the mask token for BERT4Rec). Returns hidden states `[B * T, d]`, `T`.
    fn hidden(&self, g: &mut Graph, seqs: &[Vec<usize>], rng: Option<&mut LabRng>) -> Result<(Var, usize)> {
        if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
            return Err(Error::Empty("item sequence"));
        }
        let b = seqs.len();
        let t = seqs.iter().map(Vec::len).max().unwrap_or(1);
        if t > self.config.max_items {
            return Err(Error::invalid(format!(
                "sequence of {t} items exceeds max_items {}",
                self.config.max_items
            )));
        }
        let limit = self.num_items() + usize::from(self.mask_item.is_some());
        let mut ids = vec![0usize; b * t];
        let mut pos = vec![0usize; b * t];
        let mut lens = Vec::with_capacity(b);
        for (i, s) in seqs.iter().enumerate() {
            if let Some(&bad) = s.iter().find(|&&x| x >= limit) {
                return Err(Error::OutOfRange {
                    what: "item id",
                    index: bad,
                    size: limit,
                });
            }
            ids[i * t..i * t + s.len()].copy_from_slice(s);
            for j in 0..t {
                pos[i * t + j] = j;
            }
            lens.push(s.len());
        }
        let mut items = self.item_matrix(g)?;
        if let Some(m) = self.mask_item {
            let m = g.param(&self.store, m);
            items = g.concat_rows(items, m)?;
        }
        let x = g.gather_rows(items, &ids)?;
        let pe = g.param(&self.store, self.position);
        let p = g.gather_rows(pe, &pos)?;
        let mut x = g.add(x, p)?;
        let causal = self.config.kind == BackboneKind::SasRec;
        let mask = g.constant(attention_mask(b, t, self.config.heads, &lens, causal));
        let mut pass = Pass {
            batch: b,
            seq: t,
            heads: self.config.heads,
            mask,
            dropout: self.config.dropout,
            rng,
        };
        x = pass.drop(g, x)?;
        for block in &self.blocks {
            x = block.forward(g, &self.store, x, &mut pass)?.0;
        }
        Ok((self.final_ln.forward(g, &self.store, x)?, t))
    }

    /// Per-position user vectors `[B * T, d]` of the causal model, with
    /// sequences truncated to their most recent `max_items` entries.
    pub fn sasrec_forward(&self, g: &mut Graph, seqs: &[&[ItemId]], rng: Option<&mut LabRng>) -> Result<(Var, usize)> {
        if self.config.kind != BackboneKind::SasRec {
            return Err(Error::Variant("sasrec_forward on a BERT4Rec model".into()));
        }
        let seqs: Vec<Vec<usize>> = seqs.iter().map(|s| self.recent(s, self.config.max_items)).collect();
        self.hidden(g, &seqs, rng)
    }

    /// Catalog logits at the masked slots of `masked` (mask token id =
    /// catalog size). Returns the logits and the `(sequence, slot)` pairs in
    /// row order.
    pub fn bert4rec_forward(
        &self,
        g: &mut Graph,
        masked: &[Vec<usize>],
        rng: Option<&mut LabRng>,
    ) -> Result<(Var, Vec<(usize, usize)>)> {
        if self.config.kind != BackboneKind::Bert4Rec {
            return Err(Error::Variant("bert4rec_forward on a SASRec model".into()));
        }
        let mt = self.mask_token();
        let slots: Vec<(usize, usize)> = masked
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.iter().enumerate().filter(|(_, &x)| x == mt).map(move |(j, _)| (i, j)))
            .collect();
        if slots.is_empty() {
            return Err(Error::invalid("no masked position"));
        }
        let (h, t) = self.hidden(g, masked, rng)?;
        let rows: Vec<usize> = slots.iter().map(|&(i, j)| i * t + j).collect();
        let h = g.gather_rows(h, &rows)?;
        let items = self.item_matrix(g)?;
        Ok((g.matmul_nt(h, items)?, slots))
    }

    fn recent(&self, s: &[ItemId], keep: usize) -> Vec<usize> {
        s[s.len().saturating_sub(keep)..].iter().map(|&x| x as usize).collect()
    }

    /// Training loss on a batch of item sequences (each of length >= 2).
    ///
    /// SASRec: full-softmax cross-entropy at every position of the causal
    /// model, predicting the next item. BERT4Rec: Cloze corruption with
    /// `mask_prob` (at least one slot per sequence) and cross-entropy at the
    /// masked slots.
    pub fn loss(&self, g: &mut Graph, batch: &[&[ItemId]], rng: &mut LabRng, dropout: bool) -> Result<Var> {
        if batch.iter().any(|s| s.len() < 2) {
            return Err(Error::invalid("training sequences need at least two items"));
        }
        let mut drop_rng = if dropout { Some(rng::stream(rng.random(), "dropout", 0)) } else { None };
        match self.config.kind {
            BackboneKind::SasRec => {
                let windows: Vec<Vec<usize>> = batch.iter().map(|s| self.recent(s, self.config.max_items + 1)).collect();
                let inputs: Vec<Vec<usize>> = windows.iter().map(|w| w[..w.len() - 1].to_vec()).collect();
                let (h, t) = self.hidden(g, &inputs, drop_rng.as_mut())?;
                let mut tg = Targets {
                    rows: Vec::new(),
                    items: Vec::new(),
                };
                for (i, w) in windows.iter().enumerate() {
                    for j in 0..w.len() - 1 {
                        tg.rows.push(i * t + j);
                        tg.items.push(w[j + 1]);
                    }
                }
                let rows = g.gather_rows(h, &tg.rows)?;
                let items = self.item_matrix(g)?;
                let logits = g.matmul_nt(rows, items)?;
                g.cross_entropy(logits, &tg.items)
            }
            BackboneKind::Bert4Rec => {
                let mt = self.mask_token();
                let mut masked = Vec::with_capacity(batch.len());
                let mut targets = Vec::new();
                for s in batch {
                    let orig = self.recent(s, self.config.max_items);
                    let mut m = orig.clone();
                    let mut any = false;
                    for x in m.iter_mut() {
                        if rng.random::<f32>() < self.config.mask_prob {
                            *x = mt;
                            any = true;
                        }
                    }
                    if !any {
                        let last = m.len() - 1;
                        m[last] = mt;
                    }
                    targets.extend(orig.iter().zip(&m).filter(|(_, &x)| x == mt).map(|(&o, _)| o));
                    masked.push(m);
                }
                let (logits, _) = self.bert4rec_forward(g, &masked, drop_rng.as_mut())?;
                g.cross_entropy(logits, &targets)
            }
        }
    }

    /// Evaluation-mode user vectors for next-item prediction after each prefix.
    pub fn user_vectors(&self, prefixes: &[&[ItemId]]) -> Result<Vec<Vec<f32>>> {
        let d = self.config.dim;
        let mut g = Graph::new();
        let (h, rows) = match self.config.kind {
            BackboneKind::SasRec => {
                let seqs: Vec<Vec<usize>> = prefixes.iter().map(|s| self.recent(s, self.config.max_items)).collect();
                let (h, t) = self.hidden(&mut g, &seqs, None)?;
                let rows: Vec<usize> = seqs.iter().enumerate().map(|(i, s)| i * t + s.len() - 1).collect();
                (h, rows)
            }
            BackboneKind::Bert4Rec => {
                let seqs: Vec<Vec<usize>> = prefixes
                    .iter()
                    .map(|s| {
                        let mut v = self.recent(s, self.config.max_items - 1);
                        v.push(self.mask_token());
                        v
                    })
                    .collect();
                let (h, t) = self.hidden(&mut g, &seqs, None)?;
                let rows: Vec<usize> = seqs.iter().enumerate().map(|(i, s)| i * t + s.len() - 1).collect();
                (h, rows)
            }
        };
        let v = g.value(h);
        Ok(rows.iter().map(|&r| v[r * d..(r + 1) * d].to_vec()).collect())
    }
}

/// `score_c = dot(user, table[c])` for each candidate.
pub fn score_candidates(user: &[f32], table: &Tensor, candidates: &[ItemId]) -> Result<Vec<f32>> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidates"));
    }
    if user.len() != table.cols() {
        return Err(Error::shape(
            "score_candidates",
            format!("user dim {} vs table dim {}", user.len(), table.cols()),
        ));
    }
    candidates
        .iter()
        .map(|&c| {
            if c as usize >= table.rows() {
                return Err(Error::OutOfRange {
                    what: "candidate id",
                    index: c as usize,
                    size: table.rows(),
                });
            }
            Ok(crate::kernels::dot(user, table.row(c as usize)))
        })
        .collect()
}

impl Scorer for SeqModel {
    fn num_items(&self) -> usize {
        SeqModel::num_items(self)
    }

    fn score_all(&self, prefixes: &[&[ItemId]]) -> Result<Vec<Vec<f32>>> {
        let users = self.user_vectors(prefixes)?;
        let table = self.effective_table();
        let all: Vec<ItemId> = (0..self.num_items() as ItemId).collect();
        users.iter().map(|u| score_candidates(u, &table, &all)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(kind: BackboneKind) -> SeqModel {
        let cfg = BackboneConfig {
            kind,
            layers: 1,
            heads: 1,
            dim: 4,
            max_items: 6,
            dropout: 0.0,
            mask_prob: 0.2,
        };
        SeqModel::new(cfg, EmbeddingTable::random(5, 4, 1), 2).unwrap()
    }

    #[test]
    fn causal_prefix_invariance() {
        let m = model(BackboneKind::SasRec);
        let d = 4;
        let run = |s: &[ItemId]| {
            let mut g = Graph::new();
            let (h, _) = m.sasrec_forward(&mut g, &[s], None).unwrap();
            g.value(h).to_vec()
        };
        let a = run(&[0, 1, 2, 3]);
        let b = run(&[0, 1, 4, 2]);
        assert_eq!(a[..2 * d], b[..2 * d]);
        assert_ne!(a[2 * d..3 * d], b[2 * d..3 * d]);
    }

    #[test]
    fn tied_logits_are_dot_products() {
        let m = model(BackboneKind::Bert4Rec);
        let mut g = Graph::new();
        let masked = vec![vec![0, 5, 2]];
        let (logits, slots) = m.bert4rec_forward(&mut g, &masked, None).unwrap();
        assert_eq!(slots, vec![(0, 1)]);
        let user = m.user_vectors(&[&[0]]).unwrap();
        assert_eq!(user[0].len(), 4);
        assert_eq!(g.value(logits).len(), 5);
        assert!(m.bert4rec_forward(&mut Graph::new(), &[vec![0, 1]], None).is_err());
    }

    #[test]
    fn scoring_matches_loop() {
        let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]).unwrap();
        let s = score_candidates(&[0.0, 1.0], &t, &[0, 1, 2]).unwrap();
        assert_eq!(s, vec![0.0, 1.0, 0.8]);
        assert!(score_candidates(&[0.0, 1.0], &t, &[3]).is_err());
        assert!(score_candidates(&[0.0, 1.0], &t, &[]).is_err());
    }

    #[test]
    fn dim_mismatch_rejected() {
        let cfg = BackboneConfig::sasrec(8);
        assert!(SeqModel::new(cfg, EmbeddingTable::random(5, 4, 1), 0).is_err());
    }
}
