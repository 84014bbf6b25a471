//! Item-table initialisation variants: build tables from encoder
//! checkpoints, assemble backbones around them, train, evaluate, compare.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::autograd::{Graph, Var};
use crate::corpus::{EvalInstance, ItemCatalog, ItemId, UserSequence};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalProtocol, MetricsReport};
use crate::params::ParamStore;
use crate::pipeline::{fit, stage_ft2, LayerSet, LoopConfig, Stage, StageConfig, TextScorer, TextTask, Trainee, TrainReport, CLIP_NORM};
use crate::rng::{self, LabRng};
use crate::seqmodels::{BackboneConfig, BackboneKind, EmbeddingTable, Provenance, SeqModel};
use crate::textenc::{Encoder, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Freeze,
    Trainable,
    FurtherAll,
    FurtherEmb,
    AdditiveId,
    RecformerTrainable,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Freeze => "freeze",
            Mode::Trainable => "trainable",
            Mode::FurtherAll => "further_all",
            Mode::FurtherEmb => "further_emb",
            Mode::AdditiveId => "additive_id",
            Mode::RecformerTrainable => "recformer_trainable",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "freeze" => Mode::Freeze,
            "trainable" => Mode::Trainable,
            "further_all" => Mode::FurtherAll,
            "further_emb" => Mode::FurtherEmb,
            "additive_id" => Mode::AdditiveId,
            "recformer_trainable" => Mode::RecformerTrainable,
            _ => return Err(Error::Variant(format!("unknown mode {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Candidate learning rates; the one with the best validation NDCG@10 wins.
    pub lr_grid: Vec<f32>,
}

impl TrainSettings {
    /// Defaults with the backbone's batch size: 256 for BERT4Rec, 128 for SASRec.
    pub fn for_backbone(kind: BackboneKind) -> Self {
        Self {
            batch_size: match kind {
                BackboneKind::Bert4Rec => 256,
                BackboneKind::SasRec => 128,
            },
            ..Self::default()
        }
    }
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 200,
            patience: 10,
            batch_size: 128,
            lr_grid: vec![3e-4, 1e-3, 3e-3, 1e-2],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantSpec {
    pub name: String,
    pub backbone: BackboneConfig,
    pub provenance: Provenance,
    pub mode: Mode,
    pub seed: u64,
    pub train: TrainSettings,
}

impl VariantSpec {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        match self.mode {
            Mode::FurtherAll | Mode::FurtherEmb if self.provenance != Provenance::Ft => Err(Error::Variant(format!(
                "{}: {} starts from a trained FT-freeze model, provenance must be FT",
                self.name,
                self.mode.as_str()
            ))),
            Mode::AdditiveId | Mode::RecformerTrainable if self.provenance == Provenance::Random => {
                Err(Error::Variant(format!("{}: {} needs a text table", self.name, self.mode.as_str())))
            }
            _ if self.train.lr_grid.is_empty() || self.train.lr_grid.iter().any(|&l| !(l > 0.0)) => {
                Err(Error::Variant(format!("{}: learning-rate grid must be positive and nonempty", self.name)))
            }
            _ if self.train.epochs == 0 || self.train.patience == 0 || self.train.batch_size == 0 => {
                Err(Error::Variant(format!("{}: epochs, patience and batch size must be positive", self.name)))
            }
            _ => Ok(()),
        }
    }
}

/// Row `i` is the encoder's vector for catalog item `i`.
pub fn build_item_table(
    encoder: &Encoder,
    catalog: &ItemCatalog,
    tok: &Tokenizer,
    provenance: Provenance,
    source: Option<String>,
) -> Result<EmbeddingTable> {
    if tok.vocab_size() != encoder.config.vocab_size {
        return Err(Error::invalid("tokenizer does not match the encoder vocabulary"));
    }
    let mut t = EmbeddingTable::new(encoder.encode_catalog(catalog, tok)?, provenance, false)?;
    t.source = source;
    Ok(t)
}

/// Builds the trainable model for `spec`. `base` is the trained FT-freeze
/// model required by the `further_*` modes.
pub fn assemble(spec: &VariantSpec, table: EmbeddingTable, base: Option<&SeqModel>) -> Result<SeqModel> {
    spec.validate()?;
    if table.provenance() != spec.provenance {
        return Err(Error::Variant(format!(
            "{}: table provenance {} but spec asks for {}",
            spec.name,
            table.provenance().as_str(),
            spec.provenance.as_str()
        )));
    }
    let mut table = table;
    match spec.mode {
        Mode::Freeze => {
            table.trainable = false;
            SeqModel::new(spec.backbone, table, spec.seed)
        }
        Mode::Trainable => {
            table.trainable = true;
            SeqModel::new(spec.backbone, table, spec.seed)
        }
        Mode::AdditiveId => {
            table.trainable = false;
            SeqModel::new(spec.backbone, table, spec.seed)?.with_additive_ids(spec.seed)
        }
        Mode::FurtherAll | Mode::FurtherEmb => {
            let base = base.ok_or_else(|| {
                Error::Variant(format!("{}: {} needs a trained FT-freeze model", spec.name, spec.mode.as_str()))
            })?;
            check_lineage(base)?;
            let mut m = base.clone();
            if spec.mode == Mode::FurtherAll {
                m.store.set_all_trainable(true);
            } else {
                m.store.set_all_trainable(false);
                m.set_table_trainable(true);
            }
            Ok(m)
        }
        Mode::RecformerTrainable => Err(Error::Variant(format!(
            "{}: recformer_trainable runs on the text encoder, not a backbone",
            spec.name
        ))),
    }
}

/// A `further_*` base must be an FT-initialised model whose table stayed frozen.
pub fn check_lineage(base: &SeqModel) -> Result<()> {
    if base.provenance() != Provenance::Ft || base.store.is_trainable(base.table) || base.id_table.is_some() {
        return Err(Error::Variant(
            "further-training base must be a trained FT-freeze model".to_string(),
        ));
    }
    Ok(())
}

/// Data shared by every variant of one comparison.
#[derive(Debug, Clone, Copy)]
pub struct LabData<'a> {
    pub catalog: &'a ItemCatalog,
    pub tokenizer: &'a Tokenizer,
    pub train: &'a [UserSequence],
    pub valid: &'a [EvalInstance],
    pub test: &'a [EvalInstance],
    pub protocol: &'a EvalProtocol,
}

struct SeqTrainee<'a> {
    model: SeqModel,
    data: LabData<'a>,
    batch_size: usize,
    batches: Vec<Vec<usize>>,
}

impl Trainee for SeqTrainee<'_> {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.model.store]
    }
    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.model.store]
    }
    fn begin_epoch(&mut self, _epoch: usize, rng: &mut LabRng) -> Result<usize> {
        let mut order: Vec<usize> = (0..self.data.train.len())
            .filter(|&i| self.data.train[i].items.len() >= 2)
            .collect();
        order.shuffle(rng);
        self.batches = order.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        Ok(self.batches.len())
    }
    fn step(&self, g: &mut Graph, batch: usize, rng: &mut LabRng) -> Result<Option<Var>> {
        let seqs: Vec<&[ItemId]> = self.batches[batch]
            .iter()
            .map(|&i| self.data.train[i].items.as_slice())
            .collect();
        Ok(Some(self.model.loss(g, &seqs, rng, true)?))
    }
    fn validate(&mut self) -> Result<Option<f64>> {
        let r = evaluate(&self.model, self.data.valid, self.data.protocol)?;
        Ok(Some(r.ndcg_at(10).ok_or_else(|| Error::invalid("validation protocol must include k = 10"))?))
    }
}

/// Trains an assembled model with early stopping on validation NDCG@10.
pub fn train_model(model: SeqModel, data: &LabData<'_>, settings: &TrainSettings, lr: f32, seed: u64) -> Result<(SeqModel, TrainReport)> {
    let mut t = SeqTrainee {
        model,
        data: *data,
        batch_size: settings.batch_size,
        batches: Vec::new(),
    };
    let report = fit(
        &mut t,
        &LoopConfig {
            label: "backbone".to_string(),
            epochs: settings.epochs,
            patience: settings.patience,
            lr,
            seed,
            clip: CLIP_NORM,
        },
    )?;
    Ok((t.model, report))
}

#[derive(Debug, Clone)]
pub struct VariantOutcome {
    pub name: String,
    pub lr: f32,
    pub report: TrainReport,
    pub metrics: MetricsReport,
    /// Trained backbone (absent for `recformer_trainable`).
    pub model: Option<SeqModel>,
}

/// Runs `spec` over its learning-rate grid, keeps the run with the best
/// validation NDCG@10 (first on ties) and evaluates it on the test set.
pub fn run_variant(
    spec: &VariantSpec,
    data: &LabData<'_>,
    table: EmbeddingTable,
    base: Option<&SeqModel>,
) -> Result<VariantOutcome> {
    spec.validate()?;
    let source = table.source.clone();
    let mut best: Option<(f64, f32, SeqModel, TrainReport)> = None;
    for &lr in &spec.train.lr_grid {
        let model = assemble(spec, table.clone(), base)?;
        let (model, report) = train_model(model, data, &spec.train, lr, spec.seed)?;
        let v = report.best_ndcg10().unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|b| v > b.0) {
            best = Some((v, lr, model, report));
        }
    }
    let (_, lr, model, report) = best.expect("nonempty grid");
    let mut metrics = evaluate(&model, data.test, data.protocol)?;
    metrics.checkpoint = source;
    Ok(VariantOutcome {
        name: spec.name.clone(),
        lr,
        report,
        metrics,
        model: Some(model),
    })
}

/// The text encoder fine-tuned with a trainable fixed table (stage-FT2 with
/// the table unfrozen), evaluated on the test set.
pub fn run_recformer_trainable(
    spec: &VariantSpec,
    data: &LabData<'_>,
    encoder: &Encoder,
    table: EmbeddingTable,
    tau: f32,
) -> Result<VariantOutcome> {
    spec.validate()?;
    if spec.mode != Mode::RecformerTrainable {
        return Err(Error::Variant(format!("{} is not a recformer_trainable spec", spec.name)));
    }
    let task = TextTask {
        catalog: data.catalog,
        tokenizer: data.tokenizer,
        train: data.train,
        valid: data.valid,
        protocol: data.protocol,
    };
    let source = table.source.clone();
    let mut best: Option<(f64, f32, Encoder, EmbeddingTable, TrainReport)> = None;
    for &lr in &spec.train.lr_grid {
        let mut enc = encoder.clone();
        let mut t = table.clone();
        t.trainable = true;
        let cfg = StageConfig {
            epochs: spec.train.epochs,
            batch_size: spec.train.batch_size,
            lr,
            tau,
            patience: spec.train.patience,
            tuned_layers: LayerSet::All,
            ..StageConfig::new(Stage::Ft2, spec.seed)
        };
        let report = stage_ft2(&mut enc, &mut t, &task, &cfg)?;
        let v = report.best_ndcg10().unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|b| v > b.0) {
            best = Some((v, lr, enc, t, report));
        }
    }
    let (_, lr, enc, t, report) = best.expect("nonempty grid");
    let scorer = TextScorer {
        encoder: &enc,
        table: t.matrix(),
        catalog: data.catalog,
        tokenizer: data.tokenizer,
    };
    let mut metrics = evaluate(&scorer, data.test, data.protocol)?;
    metrics.checkpoint = source;
    Ok(VariantOutcome {
        name: spec.name.clone(),
        lr,
        report,
        metrics,
        model: None,
    })
}

/// Encoders a comparison may draw item tables from, with checkpoint hashes.
#[derive(Debug, Clone, Default)]
pub struct Inits {
    pub lf: Option<(Encoder, String)>,
    pub pt: Option<(Encoder, String)>,
    pub ft: Option<(Encoder, String)>,
}

impl Inits {
    pub fn encoder(&self, p: Provenance) -> Result<&(Encoder, String)> {
        let slot = match p {
            Provenance::Random => None,
            Provenance::Lf => self.lf.as_ref(),
            Provenance::Pt => self.pt.as_ref(),
            Provenance::Ft => self.ft.as_ref(),
        };
        slot.ok_or_else(|| Error::Variant(format!("no {} encoder available", p.as_str())))
    }

    pub fn table(&self, spec: &VariantSpec, catalog: &ItemCatalog, tok: &Tokenizer) -> Result<EmbeddingTable> {
        match spec.provenance {
            Provenance::Random => Ok(EmbeddingTable::random(
                catalog.len(),
                spec.backbone.dim,
                rng::derive(spec.seed, "table", 0),
            )),
            p => {
                let (enc, hash) = self.encoder(p)?;
                build_item_table(enc, catalog, tok, p, Some(hash.clone()))
            }
        }
    }
}

/// Runs every spec in order. `further_*` specs reuse the most recent
/// FT-freeze outcome with the same backbone kind, training one first if
/// the list has none.
pub fn run_specs(specs: &[VariantSpec], data: &LabData<'_>, inits: &Inits, tau: f32) -> Result<Vec<VariantOutcome>> {
    let mut out: Vec<VariantOutcome> = Vec::with_capacity(specs.len());
    let mut bases: Vec<(crate::seqmodels::BackboneKind, SeqModel)> = Vec::new();
    for spec in specs {
        let outcome = match spec.mode {
            Mode::RecformerTrainable => {
                let (enc, _) = inits.encoder(spec.provenance)?;
                let table = inits.table(spec, data.catalog, data.tokenizer)?;
                run_recformer_trainable(spec, data, enc, table, tau)?
            }
            Mode::FurtherAll | Mode::FurtherEmb => {
                let kind = spec.backbone.kind;
                if !bases.iter().any(|(k, _)| *k == kind) {
                    let base_spec = VariantSpec {
                        name: format!("{}-base", spec.name),
                        mode: Mode::Freeze,
                        ..spec.clone()
                    };
                    let table = inits.table(&base_spec, data.catalog, data.tokenizer)?;
                    let o = run_variant(&base_spec, data, table, None)?;
                    bases.push((kind, o.model.expect("backbone outcome")));
                }
                let base = &bases.iter().rev().find(|(k, _)| *k == kind).expect("base present").1;
                let table = inits.table(spec, data.catalog, data.tokenizer)?;
                run_variant(spec, data, table, Some(base))?
            }
            _ => {
                let table = inits.table(spec, data.catalog, data.tokenizer)?;
                run_variant(spec, data, table, None)?
            }
        };
        if spec.mode == Mode::Freeze && spec.provenance == Provenance::Ft {
            if let Some(m) = &outcome.model {
                bases.push((spec.backbone.kind, m.clone()));
            }
        }
        out.push(outcome);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRow {
    pub name: String,
    pub metrics: MetricsReport,
    /// Relative change of each metric vs the baseline, in metric order
    /// `HR@k..., NDCG@k...`; `None` where the baseline value is zero.
    pub improv: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparativeReport {
    pub baseline: String,
    pub rows: Vec<MatrixRow>,
}

/// `(v - base) / base` for every metric against the named baseline row.
pub fn compare(rows: &[(String, MetricsReport)], baseline: &str) -> Result<ComparativeReport> {
    let base = &rows
        .iter()
        .find(|(n, _)| n == baseline)
        .ok_or_else(|| Error::Variant(format!("baseline {baseline:?} not among the variants")))?
        .1;
    let flat = |m: &MetricsReport| -> Vec<f64> { m.hr.iter().chain(&m.ndcg).copied().collect() };
    let b = flat(base);
    let mut out = Vec::with_capacity(rows.len());
    for (name, m) in rows {
        if m.ks != base.ks {
            return Err(Error::Variant(format!("{name}: cutoffs differ from the baseline")));
        }
        let improv = flat(m)
            .iter()
            .zip(&b)
            .map(|(&v, &bv)| (bv != 0.0).then(|| (v - bv) / bv))
            .collect();
        out.push(MatrixRow {
            name: name.clone(),
            metrics: m.clone(),
            improv,
        });
    }
    Ok(ComparativeReport {
        baseline: baseline.to_string(),
        rows: out,
    })
}
