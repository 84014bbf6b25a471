//! Experiment state shared by the commands: corpora, tokenizer, the frozen
//! dataset snapshot and lazily trained LF, PT and FT encoders.
//!
//! Lineage: random encoder, then LF (MLM on both catalogs), then PT
//! (MLM + item-item contrastive on pre-training behaviour), then FT1 on the
//! target data. An `init.*` path replaces the corresponding stage.

use std::path::Path;
use std::time::Instant;

use recinit_core::corpus::{
    attach_negatives, exclude_cold_eval, filter_and_build, generate_synthetic, leave_one_out, subsample_users,
    trained_items, InteractionLog, ItemCatalog, SequenceDataset,
};
use recinit_core::eval::{EvalProtocol, MetricsReport, ProtocolKind};
use recinit_core::initlab::{self, compare, run_specs, ComparativeReport, Inits, LabData, VariantOutcome, VariantSpec};
use recinit_core::pipeline::{stage_ft1, stage_ft2, stage_lf, stage_pt, TextTask, TrainReport};
use recinit_core::probe::{capture, layer_blocks, layer_sweep, similarity, stratification_score, SimilarityMatrix, SweepRow};
use recinit_core::rng;
use recinit_core::seqmodels::{EmbeddingTable, Provenance};
use recinit_core::textenc::{AttentionTrace, Encoder, Tokenizer};

use crate::artifacts::short_hash;
use crate::ckpt::{self, encoder_from_ckpt, encoder_to_ckpt, Checkpoint, DatasetSnapshot};
use crate::config::{DataConfig, DataSource, ExperimentConfig};
use crate::error::{Error, Result};
use crate::ingest::{self, IdMap};

#[derive(Debug, Clone)]
pub struct Corpus {
    pub catalog: ItemCatalog,
    pub log: InteractionLog,
    /// Raw ids for TSV sources.
    pub items: Option<IdMap>,
    pub users: Option<IdMap>,
    /// Ground-truth clusters for synthetic sources.
    pub item_cluster: Option<Vec<usize>>,
    pub skipped_unknown_item: usize,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(d: &DataConfig) -> Result<Corpus> {
    match &d.source {
        DataSource::Synth(p) => {
            let s = generate_synthetic(p)?;
            Ok(Corpus {
                catalog: s.catalog,
                log: s.log,
                items: None,
                users: None,
                item_cluster: Some(s.item_cluster),
                skipped_unknown_item: 0,
            })
        }
        DataSource::Tsv { catalog, interactions } => {
            let (cat, items) = ingest::parse_catalog(&read(catalog)?, &catalog.display().to_string())?;
            let parsed = ingest::parse_interactions(&read(interactions)?, &interactions.display().to_string(), &cat, &items)?;
            if parsed.skipped_unknown_item > 0 {
                log::warn!(
                    "{}: skipped {} interactions with items missing from the catalog",
                    interactions.display(),
                    parsed.skipped_unknown_item
                );
            }
            Ok(Corpus {
                catalog: cat,
                log: parsed.log,
                items: Some(items),
                users: Some(parsed.users),
                item_cluster: None,
                skipped_unknown_item: parsed.skipped_unknown_item,
            })
        }
    }
}

/// A trained encoder with the short hash of its checkpoint bytes.
#[derive(Debug, Clone)]
pub struct Trained {
    pub encoder: Encoder,
    pub hash: String,
    pub checkpoint: Vec<u8>,
    /// Reports of the stages run in this process, oldest first.
    pub reports: Vec<TrainReport>,
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub fraction: f64,
    pub users: usize,
    pub pt: Trained,
    pub outcome: VariantOutcome,
}

#[derive(Debug, Clone)]
pub struct ProbeRow {
    pub user: u32,
    pub prefix: Vec<u32>,
    pub trace: AttentionTrace,
    pub similarity: SimilarityMatrix,
    pub within: f64,
    pub between: f64,
}

pub struct Lab {
    pub cfg: ExperimentConfig,
    pub target: Corpus,
    pub pretrain: Corpus,
    pub tokenizer: Tokenizer,
    pub tokenizer_hash: String,
    pub snapshot: DatasetSnapshot,
    /// Filtered pre-training sequences after the configured subsample.
    pub pretrain_ds: SequenceDataset,
    lf: Option<Trained>,
    pt: Option<Trained>,
    ft: Option<(Trained, EmbeddingTable)>,
}

fn timed<T>(what: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let out = f()?;
    log::info!("{what} took {:.1}s", t.elapsed().as_secs_f64());
    Ok(out)
}

/// Filters, splits, drops cold evaluation items and freezes negatives.
pub fn build_snapshot(corpus: &Corpus, cfg: &ExperimentConfig) -> Result<DatasetSnapshot> {
    let n = corpus.catalog.len();
    let ds = filter_and_build(&corpus.log, n, cfg.data.min_user, cfg.data.min_item)?;
    let ds = if cfg.data.fraction < 1.0 {
        subsample_users(&ds, cfg.data.fraction, rng::derive(cfg.seed, "data-fraction", 0))?
    } else {
        ds
    };
    let split = leave_one_out(&ds);
    let (mut valid, mut test) = (split.valid, split.test);
    if cfg.exclude_cold {
        let trained = trained_items(&split.train);
        valid = exclude_cold_eval(&valid, &trained);
        test = exclude_cold_eval(&test, &trained);
    }
    if let ProtocolKind::Sampled { n_negatives } = cfg.protocol.kind {
        valid = attach_negatives(&valid, n, n_negatives, rng::derive(cfg.seed, "negatives-valid", 0))?;
        test = attach_negatives(&test, n, n_negatives, rng::derive(cfg.seed, "negatives-test", 0))?;
    }
    if valid.is_empty() || test.is_empty() {
        return Err(Error::Core(recinit_core::Error::Empty("evaluation instances after filtering")));
    }
    Ok(DatasetSnapshot {
        dataset: ds,
        train: split.train,
        valid,
        test,
    })
}

impl Lab {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let target = load_corpus(&cfg.data)?;
        let pretrain = load_corpus(&cfg.pretrain_data)?;
        let tokenizer = Tokenizer::build(&[&pretrain.catalog, &target.catalog], cfg.min_frequency)?;
        let tokenizer_hash = short_hash(ingest::tokenizer_to_text(&tokenizer).as_bytes());
        let snapshot = build_snapshot(&target, &cfg)?;
        let pd = &cfg.pretrain_data;
        let pre = filter_and_build(&pretrain.log, pretrain.catalog.len(), pd.min_user, pd.min_item)?;
        let pretrain_ds = if pd.fraction < 1.0 {
            subsample_users(&pre, pd.fraction, rng::derive(cfg.seed, "pretrain-fraction", 0))?
        } else {
            pre
        };
        log::info!(
            "target: {} items, {} users, {} valid / {} test instances; pre-training: {} users; vocabulary {}",
            target.catalog.len(),
            snapshot.dataset.users.len(),
            snapshot.valid.len(),
            snapshot.test.len(),
            pretrain_ds.users.len(),
            tokenizer.vocab_size()
        );
        Ok(Self {
            cfg,
            target,
            pretrain,
            tokenizer,
            tokenizer_hash,
            snapshot,
            pretrain_ds,
            lf: None,
            pt: None,
            ft: None,
        })
    }

    pub fn protocol(&self) -> &EvalProtocol {
        &self.cfg.protocol
    }

    pub fn task(&self) -> TextTask<'_> {
        TextTask {
            catalog: &self.target.catalog,
            tokenizer: &self.tokenizer,
            train: &self.snapshot.train,
            valid: &self.snapshot.valid,
            protocol: &self.cfg.protocol,
        }
    }

    pub fn data(&self) -> LabData<'_> {
        LabData {
            catalog: &self.target.catalog,
            tokenizer: &self.tokenizer,
            train: &self.snapshot.train,
            valid: &self.snapshot.valid,
            test: &self.snapshot.test,
            protocol: &self.cfg.protocol,
        }
    }

    pub fn trained(&self, encoder: Encoder, reports: Vec<TrainReport>) -> Result<Trained> {
        let checkpoint = encoder_to_ckpt(&encoder, &self.tokenizer_hash).to_bytes()?;
        Ok(Trained {
            encoder,
            hash: short_hash(&checkpoint),
            checkpoint,
            reports,
        })
    }

    fn load_init(&self, path: &Path) -> Result<Trained> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (encoder, tok) = encoder_from_ckpt(Checkpoint::from_bytes(&bytes)?)?;
        if tok != self.tokenizer_hash {
            return Err(Error::Format(format!(
                "{} was built for tokenizer {tok}, this run uses {}",
                path.display(),
                self.tokenizer_hash
            )));
        }
        if encoder.config.dim != self.cfg.backbone.dim {
            return Err(Error::Format(format!(
                "{} has dim {}, the backbone expects {}",
                path.display(),
                encoder.config.dim,
                self.cfg.backbone.dim
            )));
        }
        Ok(Trained {
            encoder,
            hash: short_hash(&bytes),
            checkpoint: bytes,
            reports: Vec::new(),
        })
    }

    pub fn fresh_encoder(&self) -> Result<Encoder> {
        let cfg = self.cfg.encoder.config(self.tokenizer.vocab_size());
        Ok(Encoder::new(cfg, rng::derive(self.cfg.seed, "encoder", 0))?)
    }

    pub fn lf(&mut self) -> Result<Trained> {
        if self.lf.is_none() {
            let t = match &self.cfg.init_lf {
                Some(p) => self.load_init(p)?,
                None => {
                    let mut enc = self.fresh_encoder()?;
                    let r = timed("LF", || {
                        Ok(stage_lf(&mut enc, &[&self.pretrain.catalog, &self.target.catalog], &self.tokenizer, &self.cfg.lf)?)
                    })?;
                    self.trained(enc, vec![r])?
                }
            };
            self.lf = Some(t);
        }
        Ok(self.lf.clone().expect("set above"))
    }

    /// Stage-PT from the LF encoder on `data`.
    pub fn pt_on(&mut self, data: &SequenceDataset) -> Result<Trained> {
        let lf = self.lf()?;
        let mut enc = lf.encoder;
        let r = timed("PT", || {
            Ok(stage_pt(&mut enc, data, &self.pretrain.catalog, &self.tokenizer, &self.cfg.pt)?)
        })?;
        let mut reports = lf.reports;
        reports.push(r);
        self.trained(enc, reports)
    }

    pub fn pt(&mut self) -> Result<Trained> {
        if self.pt.is_none() {
            let t = match &self.cfg.init_pt {
                Some(p) => self.load_init(p)?,
                None => {
                    let ds = self.pretrain_ds.clone();
                    self.pt_on(&ds)?
                }
            };
            self.pt = Some(t);
        }
        Ok(self.pt.clone().expect("set above"))
    }

    /// Stage-FT1 from `base`, returning the encoder and its final table.
    pub fn ft1_from(&self, base: &Trained) -> Result<(Trained, EmbeddingTable)> {
        let mut enc = base.encoder.clone();
        let (r, mut table) = timed("FT1", || Ok(stage_ft1(&mut enc, &self.task(), &self.cfg.ft1)?))?;
        let mut reports = base.reports.clone();
        reports.push(r);
        let t = self.trained(enc, reports)?;
        table.source = Some(t.hash.clone());
        Ok((t, table))
    }

    pub fn ft(&mut self) -> Result<(Trained, EmbeddingTable)> {
        if self.ft.is_none() {
            let v = match &self.cfg.init_ft {
                Some(p) => {
                    let t = self.load_init(p)?;
                    let table = self.table_from(&t, Provenance::Ft)?;
                    (t, table)
                }
                None => {
                    let pt = self.pt()?;
                    self.ft1_from(&pt)?
                }
            };
            self.ft = Some(v);
        }
        Ok(self.ft.clone().expect("set above"))
    }

    pub fn encoder(&mut self, p: Provenance) -> Result<Trained> {
        match p {
            Provenance::Lf => self.lf(),
            Provenance::Pt => self.pt(),
            Provenance::Ft => Ok(self.ft()?.0),
            Provenance::Random => Err(Error::Usage("random provenance has no encoder".into())),
        }
    }

    pub fn table_from(&self, t: &Trained, p: Provenance) -> Result<EmbeddingTable> {
        Ok(initlab::build_item_table(
            &t.encoder,
            &self.target.catalog,
            &self.tokenizer,
            p,
            Some(t.hash.clone()),
        )?)
    }

    /// Item table of the given provenance; random tables use the backbone seed.
    pub fn table(&mut self, p: Provenance) -> Result<EmbeddingTable> {
        match p {
            Provenance::Random => Ok(EmbeddingTable::random(
                self.target.catalog.len(),
                self.cfg.backbone.dim,
                rng::derive(self.cfg.backbone_seed, "table", 0),
            )),
            p => {
                let t = self.encoder(p)?;
                self.table_from(&t, p)
            }
        }
    }

    /// Encoders the given specs need, trained on demand.
    pub fn inits_for(&mut self, specs: &[VariantSpec]) -> Result<Inits> {
        let mut inits = Inits::default();
        for s in specs {
            let slot = match s.provenance {
                Provenance::Random => continue,
                Provenance::Lf => &mut inits.lf,
                Provenance::Pt => &mut inits.pt,
                Provenance::Ft => &mut inits.ft,
            };
            if slot.is_none() {
                let t = self.encoder(s.provenance)?;
                *slot = Some((t.encoder, t.hash));
            }
        }
        Ok(inits)
    }

    /// Every configured variant plus the comparison against the baseline.
    pub fn matrix(&mut self) -> Result<(ComparativeReport, Vec<VariantOutcome>)> {
        let specs = self.cfg.variants.clone();
        let outcomes = self.run_specs(&specs)?;
        let rows: Vec<(String, MetricsReport)> = outcomes.iter().map(|o| (o.name.clone(), o.metrics.clone())).collect();
        Ok((compare(&rows, &self.cfg.baseline)?, outcomes))
    }

    /// Runs the specs in one call so `further_*` variants reuse an FT-freeze
    /// run from the same list.
    pub fn run_specs(&mut self, specs: &[VariantSpec]) -> Result<Vec<VariantOutcome>> {
        let inits = self.inits_for(specs)?;
        timed("variants", || Ok(run_specs(specs, &self.data(), &inits, self.cfg.ft2.tau)?))
    }

    /// Stage-FT2 from the configured base with the FT2 layer set. The table
    /// is `init.table` when given, else the base encoder's own table.
    pub fn ft2(&mut self) -> Result<(Trained, EmbeddingTable, MetricsReport)> {
        let base = self.encoder(self.cfg.ft2_base)?;
        let mut table = match &self.cfg.init_table {
            Some(p) => ckpt::table_from_ckpt(Checkpoint::load(p)?)?,
            None => self.table_from(&base, self.cfg.ft2_base)?,
        };
        table.trainable = self.cfg.ft2_table_trainable;
        let mut enc = base.encoder.clone();
        let r = timed("FT2", || Ok(stage_ft2(&mut enc, &mut table, &self.task(), &self.cfg.ft2)?))?;
        let mut reports = base.reports;
        reports.push(r);
        let t = self.trained(enc, reports)?;
        let metrics = self.score_text(&t.encoder, &table, table.source.clone())?;
        Ok((t, table, metrics))
    }

    /// Test metrics of the text encoder scoring against `table`.
    pub fn score_text(&self, enc: &Encoder, table: &EmbeddingTable, checkpoint: Option<String>) -> Result<MetricsReport> {
        let scorer = recinit_core::pipeline::TextScorer {
            encoder: enc,
            table: table.matrix(),
            catalog: &self.target.catalog,
            tokenizer: &self.tokenizer,
        };
        let mut m = recinit_core::eval::evaluate(&scorer, &self.snapshot.test, &self.cfg.protocol)?;
        m.checkpoint = checkpoint;
        Ok(m)
    }

    /// Stage-FT2 once per configured layer set from the sweep base encoder
    /// and its own fixed table.
    pub fn sweep(&mut self) -> Result<(Trained, Vec<SweepRow>)> {
        let base = self.encoder(self.cfg.sweep_base)?;
        let table = self.table_from(&base, self.cfg.sweep_base)?;
        let rows = timed("layer sweep", || {
            Ok(layer_sweep(
                &base.encoder,
                &table,
                &self.task(),
                &self.snapshot.test,
                &self.cfg.sweep_sets,
                &self.cfg.ft2,
            )?)
        })?;
        Ok((base, rows))
    }

    /// Stage-PT on each fraction of the pre-training users, then the
    /// configured downstream variant on the target data.
    pub fn ablation(&mut self) -> Result<Vec<AblationRow>> {
        let prov = self.cfg.ablation_provenance;
        let mode = self.cfg.ablation_mode;
        let name = format!("{}-{}", prov.as_str(), mode.as_str());
        let spec = self.cfg.spec(&name, prov, mode, self.cfg.backbone.kind);
        let base = self.pretrain_ds.clone();
        let mut rows = Vec::new();
        for &fraction in &self.cfg.fractions.clone() {
            let ds = if fraction < 1.0 {
                subsample_users(&base, fraction, rng::derive(self.cfg.seed, "ablation", 0))?
            } else {
                base.clone()
            };
            // the full fraction is the regular PT stage unless an init replaced it
            let pt = if fraction >= 1.0 && self.cfg.init_pt.is_none() {
                self.pt()?
            } else {
                self.pt_on(&ds)?
            };
            let mut inits = Inits::default();
            match prov {
                Provenance::Pt => inits.pt = Some((pt.encoder.clone(), pt.hash.clone())),
                Provenance::Ft => {
                    let (ft, _) = self.ft1_from(&pt)?;
                    inits.ft = Some((ft.encoder, ft.hash));
                }
                Provenance::Lf => {
                    let lf = self.lf()?;
                    inits.lf = Some((lf.encoder, lf.hash));
                }
                Provenance::Random => {}
            }
            let outcome = timed(&format!("ablation {fraction}"), || {
                Ok(run_specs(std::slice::from_ref(&spec), &self.data(), &inits, self.cfg.ft2.tau)?)
            })?
            .pop()
            .expect("one spec");
            rows.push(AblationRow {
                fraction,
                users: ds.users.len(),
                pt,
                outcome,
            });
        }
        Ok(rows)
    }

    /// CLS attention on the most recent items of the first test histories.
    pub fn probe(&mut self) -> Result<(Trained, Vec<ProbeRow>)> {
        let t = self.encoder(self.cfg.probe.encoder)?;
        let c = self.cfg.encoder;
        let blocks = layer_blocks(c.layers, c.heads, self.cfg.probe.blocks)?;
        let mut rows = Vec::new();
        for inst in self.snapshot.test.iter().take(self.cfg.probe.instances) {
            let start = inst.prefix.len().saturating_sub(self.cfg.probe.prefix_len);
            let prefix = inst.prefix[start..].to_vec();
            let trace = capture(&t.encoder, &prefix, &self.target.catalog, &self.tokenizer)?;
            let sim = similarity(&trace, self.cfg.probe.metric)?;
            let (within, between) = stratification_score(&sim, &blocks)?;
            rows.push(ProbeRow {
                user: inst.user,
                prefix,
                trace,
                similarity: sim,
                within,
                between,
            });
        }
        Ok((t, rows))
    }
}
