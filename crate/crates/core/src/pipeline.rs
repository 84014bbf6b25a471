//! The text-encoder training stages, layer masks and the shared training
//! loop with early stopping.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::corpus::{EvalInstance, ItemCatalog, ItemId, SequenceDataset, UserSequence};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalProtocol, Scorer};
use crate::optim::{clip_grad_norm_all, AdamConfig, AdamState};
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, LabRng};
use crate::seqmodels::{EmbeddingTable, Provenance};
use crate::tensor::Tensor;
use crate::textenc::{flatten_history, Encoder, FlatInput, Tokenizer, FIRST_LEARNED, MASK};

pub const CLIP_NORM: f32 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// MLM on catalog text only, from random weights.
    Lf,
    Pt,
    Ft1,
    Ft2,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Lf => "LF",
            Stage::Pt => "PT",
            Stage::Ft1 => "FT1",
            Stage::Ft2 => "FT2",
        }
    }
}

/// Which encoder layers are tuned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSet {
    All,
    None,
    Layers(BTreeSet<usize>),
}

impl LayerSet {
    pub fn of(layers: &[usize]) -> Self {
        LayerSet::Layers(layers.iter().copied().collect())
    }

    /// `ALL`, `NONE` or a comma-separated index list.
    pub fn parse(s: &str) -> Result<Self> {
        let t = s.trim();
        match t.to_ascii_uppercase().as_str() {
            "ALL" => return Ok(LayerSet::All),
            "NONE" => return Ok(LayerSet::None),
            _ => {}
        }
        let mut set = BTreeSet::new();
        for part in t.split(',') {
            let v = part
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad layer index {part:?} in {s:?}")))?;
            set.insert(v);
        }
        Ok(LayerSet::Layers(set))
    }

    pub fn describe(&self) -> String {
        match self {
            LayerSet::All => "ALL".to_string(),
            LayerSet::None => "NONE".to_string(),
            LayerSet::Layers(s) => s.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","),
        }
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if let LayerSet::Layers(s) = self {
            if s.is_empty() {
                return Err(Error::invalid("empty layer set; use NONE"));
            }
            if let Some(&l) = s.iter().find(|&&l| l >= layers) {
                return Err(Error::OutOfRange {
                    what: "tuned layer",
                    index: l,
                    size: layers,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub tau: f32,
    pub mlm_rate: f32,
    pub patience: usize,
    pub tuned_layers: LayerSet,
    pub seed: u64,
}

impl StageConfig {
    pub fn new(stage: Stage, seed: u64) -> Self {
        Self {
            stage,
            epochs: match stage {
                Stage::Lf | Stage::Pt => 10,
                Stage::Ft1 | Stage::Ft2 => 50,
            },
            batch_size: match stage {
                Stage::Pt => 32,
                _ => 64,
            },
            lr: 1e-3,
            tau: 0.05,
            mlm_rate: 0.15,
            patience: 10,
            tuned_layers: LayerSet::All,
            seed,
        }
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.patience == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs, batch_size and patience must be positive"));
        }
        if !(self.lr > 0.0) || !(self.tau > 0.0) {
            return Err(Error::invalid("lr and tau must be positive"));
        }
        if !(self.mlm_rate > 0.0 && self.mlm_rate < 1.0) {
            return Err(Error::invalid(format!("mlm_rate {} outside (0, 1)", self.mlm_rate)));
        }
        self.tuned_layers.validate(layers)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss; `None` when nothing was trained.
    pub train_loss: Option<f64>,
    pub valid_ndcg10: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    Patience,
    NothingToTrain,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::MaxEpochs => "max_epochs",
            StopReason::Patience => "patience",
            StopReason::NothingToTrain => "nothing_to_train",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub label: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop: StopReason,
    /// Filled in by callers that have a clock.
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn best_ndcg10(&self) -> Option<f64> {
        self.epochs.get(self.best_epoch).and_then(|e| e.valid_ndcg10)
    }
}

/// Result of [`mlm_mask`]: corrupted ids and `(position, original id)` labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Masked {
    pub ids: Vec<u32>,
    pub labels: Vec<(usize, u32)>,
}

/// Selects each learned (non-special) token with probability `rate`; a
/// selected token becomes `[MASK]` 80% of the time, a random learned token
/// 10%, and stays unchanged 10%. `None` when no token is maskable.
pub fn mlm_mask<R: Rng + ?Sized>(tokens: &[u32], rate: f32, vocab_size: usize, rng: &mut R) -> Result<Option<Masked>> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::invalid(format!("mlm_rate {rate} outside (0, 1)")));
    }
    if vocab_size <= FIRST_LEARNED as usize {
        return Err(Error::invalid("vocabulary has no learned tokens"));
    }
    if !tokens.iter().any(|&t| t >= FIRST_LEARNED) {
        return Ok(None);
    }
    let mut ids = tokens.to_vec();
    let mut labels = Vec::new();
    for (i, &t) in tokens.iter().enumerate() {
        if t < FIRST_LEARNED || rng.random::<f32>() >= rate {
            continue;
        }
        labels.push((i, t));
        let r: f32 = rng.random();
        if r < 0.8 {
            ids[i] = MASK;
        } else if r < 0.9 {
            ids[i] = rng.random_range(FIRST_LEARNED..vocab_size as u32);
        }
    }
    Ok(Some(Masked { ids, labels }))
}

/// In-batch contrastive loss: row `i` of `seq` should match row `i` of
/// `next` against every other row, with similarities divided by `tau`.
pub fn iic_loss(g: &mut Graph, seq: Var, next: Var, tau: f32) -> Result<Var> {
    let b = g.shape(seq)[0];
    if b < 2 {
        return Err(Error::invalid("contrastive loss needs at least two rows"));
    }
    if g.shape(next)[0] != b {
        return Err(Error::shape("iic_loss", format!("{:?} vs {:?}", g.shape(seq), g.shape(next))));
    }
    let sims = g.matmul_nt(seq, next)?;
    let logits = g.scale(sims, 1.0 / tau);
    let targets: Vec<usize> = (0..b).collect();
    g.cross_entropy(logits, &targets)
}

/// Marks exactly the parameters of the listed layers trainable. `ALL` also
/// unfreezes embeddings and the output head; any other set freezes them.
/// Returns the number of trainable scalars.
pub fn apply_layer_mask(enc: &mut Encoder, set: &LayerSet) -> Result<usize> {
    set.validate(enc.config.layers)?;
    match set {
        LayerSet::All => enc.store.set_all_trainable(true),
        LayerSet::None => enc.store.set_all_trainable(false),
        LayerSet::Layers(ls) => {
            enc.store.set_all_trainable(false);
            for &l in ls {
                for id in enc.layer_ids(l) {
                    enc.store.set_trainable(id, true);
                }
            }
        }
    }
    Ok(enc.store.trainable_count())
}

// ---- generic loop --------------------------------------------------------

/// Something the shared loop can optimise.
pub trait Trainee {
    fn stores(&self) -> Vec<&ParamStore>;
    fn stores_mut(&mut self) -> Vec<&mut ParamStore>;
    /// Prepares the epoch's batches and returns how many there are.
    fn begin_epoch(&mut self, epoch: usize, rng: &mut LabRng) -> Result<usize>;
    /// Loss of one batch, or `None` to skip it.
    fn step(&self, g: &mut Graph, batch: usize, rng: &mut LabRng) -> Result<Option<Var>>;
    /// Validation NDCG@10, or `None` for stages without a validation signal.
    fn validate(&mut self) -> Result<Option<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub label: String,
    pub epochs: usize,
    pub patience: usize,
    pub lr: f32,
    pub seed: u64,
    pub clip: f32,
}

type Snapshot = Vec<Vec<(ParamId, Vec<f32>)>>;

fn snapshot(stores: &[&ParamStore]) -> Snapshot {
    stores
        .iter()
        .map(|s| s.trainable_ids().into_iter().map(|id| (id, s.get(id).data().to_vec())).collect())
        .collect()
}

/// Adam with global-norm clipping; validation after every epoch; stops
/// `patience` epochs after the best one and restores the best parameters.
/// Without a validation signal it runs all epochs and keeps the last state.
pub fn fit<T: Trainee>(t: &mut T, cfg: &LoopConfig) -> Result<TrainReport> {
    let mut report = TrainReport {
        label: cfg.label.clone(),
        epochs: Vec::new(),
        best_epoch: 0,
        stop: StopReason::MaxEpochs,
        wall_time_secs: 0.0,
    };
    if t.stores().iter().all(|s| s.trainable_count() == 0) {
        let v = t.validate()?;
        report.epochs.push(EpochRecord {
            epoch: 0,
            train_loss: None,
            valid_ndcg10: v,
        });
        report.stop = StopReason::NothingToTrain;
        return Ok(report);
    }
    let n_stores = t.stores().len();
    let mut adams = vec![AdamState::new(AdamConfig::with_lr(cfg.lr)); n_stores];
    let mut best: Option<(usize, f64, Snapshot)> = None;
    for epoch in 0..cfg.epochs {
        let mut er = rng::stream(cfg.seed, "epoch", epoch as u64);
        let batches = t.begin_epoch(epoch, &mut er)?;
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for b in 0..batches {
            let mut sr = rng::stream(cfg.seed, "step", ((epoch as u64) << 32) | b as u64);
            let mut g = Graph::new();
            let Some(loss_var) = t.step(&mut g, b, &mut sr)? else {
                continue;
            };
            let loss = g.scalar(loss_var);
            if !loss.is_finite() {
                return Err(Error::NonFinite);
            }
            let grads = g.backward(loss_var)?;
            drop(g);
            let mut stores = t.stores_mut();
            for s in stores.iter_mut() {
                grads.accumulate_into(s)?;
            }
            drop(grads);
            clip_grad_norm_all(&mut stores, cfg.clip);
            for (a, s) in adams.iter_mut().zip(stores.iter_mut()) {
                a.step(s)?;
            }
            sum += loss as f64;
            count += 1;
        }
        let v = t.validate()?;
        report.epochs.push(EpochRecord {
            epoch,
            train_loss: (count > 0).then(|| sum / count as f64),
            valid_ndcg10: v,
        });
        match v {
            Some(v) => {
                if best.as_ref().is_none_or(|b| v > b.1) {
                    best = Some((epoch, v, snapshot(&t.stores())));
                } else if epoch - best.as_ref().map_or(0, |b| b.0) >= cfg.patience {
                    report.stop = StopReason::Patience;
                    break;
                }
            }
            None => report.best_epoch = epoch,
        }
    }
    if let Some((epoch, _, snap)) = best {
        report.best_epoch = epoch;
        let mut stores = t.stores_mut();
        for (store, params) in stores.iter_mut().zip(snap) {
            for (id, data) in params {
                store.get_mut(id).data_mut().copy_from_slice(&data);
            }
        }
    }
    Ok(report)
}

// ---- text stages ---------------------------------------------------------

/// Downstream data seen by the fine-tuning stages.
#[derive(Debug, Clone, Copy)]
pub struct TextTask<'a> {
    pub catalog: &'a ItemCatalog,
    pub tokenizer: &'a Tokenizer,
    pub train: &'a [UserSequence],
    /// Validation instances (with negatives when `protocol` is sampled).
    pub valid: &'a [EvalInstance],
    pub protocol: &'a EvalProtocol,
}

/// Scores histories by the cosine between their encoding and table rows.
pub struct TextScorer<'a> {
    pub encoder: &'a Encoder,
    pub table: &'a Tensor,
    pub catalog: &'a ItemCatalog,
    pub tokenizer: &'a Tokenizer,
}

impl Scorer for TextScorer<'_> {
    fn num_items(&self) -> usize {
        self.table.rows()
    }

    fn score_all(&self, prefixes: &[&[ItemId]]) -> Result<Vec<Vec<f32>>> {
        let inputs = prefixes
            .iter()
            .map(|p| flatten_history(p, self.catalog, self.tokenizer, self.encoder.config.max_tokens))
            .collect::<Result<Vec<_>>>()?;
        let users = self.encoder.encode_batch(&inputs)?;
        let mut g = Graph::new();
        let d = self.table.cols();
        let u = g.constant(Tensor::new(vec![users.len(), d], users.concat())?);
        let tb = g.constant(self.table.clone());
        let s = g.matmul_nt(u, tb)?;
        Ok(g.value(s).chunks(self.table.rows()).map(<[f32]>::to_vec).collect())
    }
}

fn ndcg10(report: &crate::eval::MetricsReport) -> Result<f64> {
    report
        .ndcg_at(10)
        .ok_or_else(|| Error::invalid("validation protocol must include k = 10"))
}

fn loop_config(cfg: &StageConfig) -> LoopConfig {
    LoopConfig {
        label: cfg.stage.as_str().to_string(),
        epochs: cfg.epochs,
        patience: cfg.patience,
        lr: cfg.lr,
        seed: cfg.seed,
        clip: CLIP_NORM,
    }
}

/// Cuts every sequence at a random point `t in [1, len)`: history `s[..t]`,
/// target `s[t]`. Sequences shorter than two are skipped.
fn cut_batches(seqs: &[UserSequence], batch: usize, rng: &mut LabRng) -> Vec<Vec<(Vec<ItemId>, ItemId)>> {
    let mut order: Vec<usize> = (0..seqs.len()).filter(|&i| seqs[i].items.len() >= 2).collect();
    order.shuffle(rng);
    let pairs: Vec<(Vec<ItemId>, ItemId)> = order
        .into_iter()
        .map(|i| {
            let s = &seqs[i].items;
            let t = rng.random_range(1..s.len());
            (s[..t].to_vec(), s[t])
        })
        .collect();
    pairs.chunks(batch).map(<[_]>::to_vec).collect()
}

fn mlm_batch(
    enc: &Encoder,
    inputs: &[FlatInput],
    rate: f32,
    rng: &mut LabRng,
) -> Result<(Vec<FlatInput>, Vec<(usize, usize)>, Vec<usize>)> {
    let mut out = Vec::with_capacity(inputs.len());
    let mut labels = Vec::new();
    for (i, x) in inputs.iter().enumerate() {
        let mut x = x.clone();
        if let Some(m) = mlm_mask(&x.tokens, rate, enc.config.vocab_size, rng)? {
            x.tokens = m.ids;
            labels.extend(m.labels.into_iter().map(|(p, t)| (i, p, t as usize)));
        }
        out.push(x);
    }
    let (pos, tgt) = labels.into_iter().map(|(i, p, t)| ((i, p), t)).unzip();
    Ok((out, pos, tgt))
}

struct LfTrainee<'a> {
    enc: &'a mut Encoder,
    items: Vec<FlatInput>,
    cfg: &'a StageConfig,
    batches: Vec<Vec<usize>>,
}

impl Trainee for LfTrainee<'_> {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.enc.store]
    }
    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.enc.store]
    }
    fn begin_epoch(&mut self, _epoch: usize, rng: &mut LabRng) -> Result<usize> {
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        order.shuffle(rng);
        self.batches = order.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect();
        Ok(self.batches.len())
    }
    fn step(&self, g: &mut Graph, batch: usize, rng: &mut LabRng) -> Result<Option<Var>> {
        let inputs: Vec<FlatInput> = self.batches[batch].iter().map(|&i| self.items[i].clone()).collect();
        let (corrupt, pos, tgt) = mlm_batch(self.enc, &inputs, self.cfg.mlm_rate, rng)?;
        if tgt.is_empty() {
            return Ok(None);
        }
        let mut drop = rng::stream(rng.random(), "dropout", 0);
        let out = self.enc.forward(g, &corrupt, Some(&mut drop))?;
        let rows: Vec<usize> = pos.iter().map(|&(i, p)| i * out.seq + p).collect();
        let logits = self.enc.mlm_logits(g, out.hidden, &rows)?;
        Ok(Some(g.cross_entropy(logits, &tgt)?))
    }
    fn validate(&mut self) -> Result<Option<f64>> {
        Ok(None)
    }
}

/// MLM on single-item texts of the given catalogs.
pub fn stage_lf(enc: &mut Encoder, catalogs: &[&ItemCatalog], tok: &Tokenizer, cfg: &StageConfig) -> Result<TrainReport> {
    cfg.validate(enc.config.layers)?;
    let mut items = Vec::new();
    for c in catalogs {
        for i in 0..c.len() as ItemId {
            items.push(flatten_history(&[i], c, tok, enc.config.max_tokens)?);
        }
    }
    if items.is_empty() {
        return Err(Error::Empty("catalog text"));
    }
    enc.store.set_all_trainable(true);
    let lc = loop_config(cfg);
    let mut t = LfTrainee {
        enc,
        items,
        cfg,
        batches: Vec::new(),
    };
    fit(&mut t, &lc)
}

/// MLM + IIC loss of one batch of `(history, next item)` pairs; `None` for
/// batches too small to have in-batch negatives. Dropout follows the
/// encoder config.
pub fn pt_loss(
    enc: &Encoder,
    g: &mut Graph,
    pairs: &[(Vec<ItemId>, ItemId)],
    catalog: &ItemCatalog,
    tok: &Tokenizer,
    cfg: &StageConfig,
    rng: &mut LabRng,
) -> Result<Option<Var>> {
    if pairs.len() < 2 {
        return Ok(None);
    }
    let max = enc.config.max_tokens;
    let hist = pairs
        .iter()
        .map(|(h, _)| flatten_history(h, catalog, tok, max))
        .collect::<Result<Vec<_>>>()?;
    let next = pairs
        .iter()
        .map(|(_, n)| flatten_history(&[*n], catalog, tok, max))
        .collect::<Result<Vec<_>>>()?;
    let (corrupt, pos, tgt) = mlm_batch(enc, &hist, cfg.mlm_rate, rng)?;
    let mut drop = rng::stream(rng.random(), "dropout", 0);
    let h = enc.forward(g, &corrupt, Some(&mut drop))?;
    let n = enc.forward(g, &next, Some(&mut drop))?;
    let mut loss = iic_loss(g, h.cls, n.cls, cfg.tau)?;
    if !tgt.is_empty() {
        let rows: Vec<usize> = pos.iter().map(|&(i, p)| i * h.seq + p).collect();
        let logits = enc.mlm_logits(g, h.hidden, &rows)?;
        let mlm = g.cross_entropy(logits, &tgt)?;
        loss = g.add(loss, mlm)?;
    }
    Ok(Some(loss))
}

struct PtTrainee<'a> {
    enc: &'a mut Encoder,
    data: &'a SequenceDataset,
    catalog: &'a ItemCatalog,
    tok: &'a Tokenizer,
    cfg: &'a StageConfig,
    batches: Vec<Vec<(Vec<ItemId>, ItemId)>>,
}

impl Trainee for PtTrainee<'_> {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.enc.store]
    }
    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.enc.store]
    }
    fn begin_epoch(&mut self, _epoch: usize, rng: &mut LabRng) -> Result<usize> {
        self.batches = cut_batches(&self.data.users, self.cfg.batch_size, rng);
        Ok(self.batches.len())
    }
    fn step(&self, g: &mut Graph, batch: usize, rng: &mut LabRng) -> Result<Option<Var>> {
        let loss = pt_loss(self.enc, g, &self.batches[batch], self.catalog, self.tok, self.cfg, rng)?;
        Ok(loss)
    }
    fn validate(&mut self) -> Result<Option<f64>> {
        Ok(None)
    }
}

/// MLM plus in-batch item-item contrastive loss (unit weights) on
/// behaviour sequences.
pub fn stage_pt(
    enc: &mut Encoder,
    data: &SequenceDataset,
    catalog: &ItemCatalog,
    tok: &Tokenizer,
    cfg: &StageConfig,
) -> Result<TrainReport> {
    cfg.validate(enc.config.layers)?;
    if data.users.iter().all(|u| u.items.len() < 2) {
        return Err(Error::Empty("pre-training sequences"));
    }
    enc.store.set_all_trainable(true);
    let lc = loop_config(cfg);
    let mut t = PtTrainee {
        enc,
        data,
        catalog,
        tok,
        cfg,
        batches: Vec::new(),
    };
    fit(&mut t, &lc)
}

/// Full-softmax cross-entropy of each history's CLS vector against every
/// row of `table` (a graph node, so callers decide whether it is trained),
/// with cosine logits divided by `tau`.
#[allow(clippy::too_many_arguments)]
pub fn ft_loss(
    enc: &Encoder,
    g: &mut Graph,
    pairs: &[(Vec<ItemId>, ItemId)],
    table: Var,
    catalog: &ItemCatalog,
    tok: &Tokenizer,
    tau: f32,
    rng: &mut LabRng,
) -> Result<Var> {
    let hist = pairs
        .iter()
        .map(|(h, _)| flatten_history(h, catalog, tok, enc.config.max_tokens))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<usize> = pairs.iter().map(|&(_, t)| t as usize).collect();
    let mut drop = rng::stream(rng.random(), "dropout", 0);
    let out = enc.forward(g, &hist, Some(&mut drop))?;
    let sims = g.matmul_nt(out.cls, table)?;
    let logits = g.scale(sims, 1.0 / tau);
    g.cross_entropy(logits, &targets)
}

struct FtTrainee<'a> {
    enc: &'a mut Encoder,
    task: TextTask<'a>,
    cfg: &'a StageConfig,
    /// Re-encode the table from the encoder every epoch (FT1).
    refresh: bool,
    table: Tensor,
    /// Present when the table itself is trained.
    table_store: Option<(ParamStore, ParamId)>,
    fresh: bool,
    batches: Vec<Vec<(Vec<ItemId>, ItemId)>>,
}

impl FtTrainee<'_> {
    fn current_table(&self) -> &Tensor {
        match &self.table_store {
            Some((s, id)) => s.get(*id),
            None => &self.table,
        }
    }
}

impl Trainee for FtTrainee<'_> {
    fn stores(&self) -> Vec<&ParamStore> {
        let mut v = vec![&self.enc.store];
        if let Some((s, _)) = &self.table_store {
            v.push(s);
        }
        v
    }
    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        let mut v = vec![&mut self.enc.store];
        if let Some((s, _)) = &mut self.table_store {
            v.push(s);
        }
        v
    }
    fn begin_epoch(&mut self, _epoch: usize, rng: &mut LabRng) -> Result<usize> {
        if self.refresh && !self.fresh {
            self.table = self.enc.encode_catalog(self.task.catalog, self.task.tokenizer)?;
        }
        self.fresh = false;
        self.batches = cut_batches(self.task.train, self.cfg.batch_size, rng);
        Ok(self.batches.len())
    }
    fn step(&self, g: &mut Graph, batch: usize, rng: &mut LabRng) -> Result<Option<Var>> {
        let table = match &self.table_store {
            Some((s, id)) => g.param(s, *id),
            None => g.constant(self.table.clone()),
        };
        let loss = ft_loss(
            self.enc,
            g,
            &self.batches[batch],
            table,
            self.task.catalog,
            self.task.tokenizer,
            self.cfg.tau,
            rng,
        )?;
        Ok(Some(loss))
    }
    fn validate(&mut self) -> Result<Option<f64>> {
        if self.refresh {
            self.table = self.enc.encode_catalog(self.task.catalog, self.task.tokenizer)?;
            self.fresh = true;
        }
        let scorer = TextScorer {
            encoder: self.enc,
            table: self.current_table(),
            catalog: self.task.catalog,
            tokenizer: self.task.tokenizer,
        };
        Ok(Some(ndcg10(&evaluate(&scorer, self.task.valid, self.task.protocol)?)?))
    }
}

fn check_task(enc: &Encoder, task: &TextTask<'_>) -> Result<()> {
    if task.valid.is_empty() {
        return Err(Error::Empty("validation instances"));
    }
    if task.tokenizer.vocab_size() != enc.config.vocab_size {
        return Err(Error::invalid(format!(
            "tokenizer has {} ids, encoder expects {}",
            task.tokenizer.vocab_size(),
            enc.config.vocab_size
        )));
    }
    Ok(())
}

/// Fine-tuning against a table re-encoded before every epoch and detached
/// from the graph. Returns the report and the final table (encoded with
/// the best parameters).
pub fn stage_ft1(enc: &mut Encoder, task: &TextTask<'_>, cfg: &StageConfig) -> Result<(TrainReport, EmbeddingTable)> {
    cfg.validate(enc.config.layers)?;
    check_task(enc, task)?;
    apply_layer_mask(enc, &cfg.tuned_layers)?;
    let table = enc.encode_catalog(task.catalog, task.tokenizer)?;
    let lc = loop_config(cfg);
    let mut t = FtTrainee {
        enc,
        task: *task,
        cfg,
        refresh: true,
        table,
        table_store: None,
        fresh: true,
        batches: Vec::new(),
    };
    let report = fit(&mut t, &lc)?;
    let table = enc.encode_catalog(task.catalog, task.tokenizer)?;
    Ok((report, EmbeddingTable::new(table, Provenance::Ft, false)?))
}

/// Fine-tuning against a fixed table. The table is bit-frozen unless
/// `table.trainable`, in which case it is optimised alongside the tuned
/// layers and written back.
pub fn stage_ft2(
    enc: &mut Encoder,
    table: &mut EmbeddingTable,
    task: &TextTask<'_>,
    cfg: &StageConfig,
) -> Result<TrainReport> {
    cfg.validate(enc.config.layers)?;
    check_task(enc, task)?;
    if table.rows() != task.catalog.len() || table.dim() != enc.config.dim {
        return Err(Error::shape(
            "stage_ft2",
            format!(
                "table {}x{} for catalog {} and dim {}",
                table.rows(),
                table.dim(),
                task.catalog.len(),
                enc.config.dim
            ),
        ));
    }
    apply_layer_mask(enc, &cfg.tuned_layers)?;
    let table_store = if table.trainable {
        let mut s = ParamStore::new();
        let id = s.add("table", table.matrix().clone())?;
        Some((s, id))
    } else {
        None
    };
    let lc = loop_config(cfg);
    let mut t = FtTrainee {
        enc,
        task: *task,
        cfg,
        refresh: false,
        table: table.matrix().clone(),
        table_store,
        fresh: true,
        batches: Vec::new(),
    };
    let report = fit(&mut t, &lc)?;
    if let Some((s, id)) = t.table_store {
        let mut m = s.get(id).clone();
        m.set_requires_grad(false);
        let source = table.source.take();
        *table = EmbeddingTable::new(m, table.provenance(), true)?;
        table.source = source;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_set_parse() {
        assert_eq!(LayerSet::parse("all").unwrap(), LayerSet::All);
        assert_eq!(LayerSet::parse("NONE").unwrap(), LayerSet::None);
        assert_eq!(LayerSet::parse("3, 7,11").unwrap(), LayerSet::of(&[3, 7, 11]));
        assert_eq!(LayerSet::of(&[1, 3, 5]).describe(), "1,3,5");
        assert!(LayerSet::parse("x").is_err());
        assert!(LayerSet::of(&[6]).validate(6).is_err());
    }

    #[test]
    fn mlm_respects_specials() {
        let mut r = rng::stream(0, "t", 0);
        assert_eq!(mlm_mask(&[1, 0, 0], 0.5, 10, &mut r).unwrap(), None);
        let toks: Vec<u32> = (0..200).map(|i| if i % 2 == 0 { 1 } else { 5 }).collect();
        let m = mlm_mask(&toks, 0.5, 10, &mut r).unwrap().unwrap();
        assert!(m.labels.iter().all(|&(p, t)| p % 2 == 1 && t == 5));
        assert!(mlm_mask(&toks, 0.0, 10, &mut r).is_err());
    }

    #[test]
    fn iic_uniform_is_ln_b() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::filled(vec![4, 3], 0.5));
        let l = iic_loss(&mut g, v, v, 0.05).unwrap();
        assert!((g.scalar(l) - libm::logf(4.0)).abs() < 1e-5);
        let one = g.constant(Tensor::filled(vec![1, 3], 0.5));
        assert!(iic_loss(&mut g, one, one, 0.05).is_err());
    }
}
