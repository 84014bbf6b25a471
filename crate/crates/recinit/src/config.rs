//! Flat `key = value` experiment configs with dotted section keys.
//!
//! Blank lines and lines starting with `#` are ignored. Relative paths in a
//! file resolve against the file's directory. Precedence, lowest first:
//! built-in defaults, the config file, `--set key=value` overrides, then the
//! dedicated `--seed` and `--out` flags. `RECINIT_OUT` supplies the output
//! root only when neither the file nor the command line names one.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use recinit_core::corpus::SynthParams;
use recinit_core::eval::{EvalProtocol, ProtocolKind, TieRule};
use recinit_core::initlab::{Mode, TrainSettings, VariantSpec};
use recinit_core::pipeline::{LayerSet, Stage, StageConfig};
use recinit_core::probe::{default_layer_sets, SimilarityMetric};
use recinit_core::rng;
use recinit_core::seqmodels::{BackboneConfig, BackboneKind, Provenance};
use recinit_core::textenc::EncoderConfig;

use crate::error::{Error, Result};

pub const OUT_ENV: &str = "RECINIT_OUT";

#[derive(Debug, Clone, PartialEq, Eq)]
struct Entry {
    value: String,
    /// Directory relative paths resolve against.
    base: Option<PathBuf>,
}

/// Parsed but untyped configuration.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawConfig {
    entries: BTreeMap<String, Entry>,
}

impl RawConfig {
    pub fn parse(text: &str, origin: &str, base: Option<&Path>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let Some((k, v)) = t.split_once('=') else {
                return Err(Error::parse(origin, i + 1, format!("expected `key = value`, found {t:?}")));
            };
            let k = k.trim();
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(Error::parse(origin, i + 1, format!("bad key {k:?}")));
            }
            let entry = Entry {
                value: v.trim().to_string(),
                base: base.map(Path::to_path_buf),
            };
            if entries.insert(k.to_string(), entry).is_some() {
                return Err(Error::parse(origin, i + 1, format!("duplicate key `{k}`")));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string(), path.parent())
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(
            key.to_string(),
            Entry {
                value: value.to_string(),
                base: None,
            },
        );
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v.trim());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// One invariant violation, named by its field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synth(SynthParams),
    Tsv { catalog: PathBuf, interactions: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub min_user: usize,
    pub min_item: usize,
    /// Fraction of users kept after filtering.
    pub fraction: f64,
}

/// Encoder hyperparameters; the vocabulary size comes from the tokenizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderShape {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn: usize,
    pub max_tokens: usize,
    pub dropout: f32,
}

impl EncoderShape {
    pub fn config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            heads: self.heads,
            dim: self.dim,
            ffn: self.ffn,
            max_tokens: self.max_tokens,
            vocab_size,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub encoder: Provenance,
    pub instances: usize,
    pub prefix_len: usize,
    pub metric: SimilarityMetric,
    pub blocks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub pretrain_data: DataConfig,
    pub min_frequency: usize,
    pub encoder: EncoderShape,
    pub backbone: BackboneConfig,
    pub lf: StageConfig,
    pub pt: StageConfig,
    pub ft1: StageConfig,
    pub ft2: StageConfig,
    pub ft2_base: Provenance,
    pub ft2_table_trainable: bool,
    pub table_provenance: Provenance,
    pub protocol: EvalProtocol,
    pub exclude_cold: bool,
    /// Downstream training settings; the batch size follows the backbone
    /// unless `train_batch` overrides it.
    pub train: TrainSettings,
    pub train_batch: Option<usize>,
    /// Shared by every variant so only the item table differs.
    pub backbone_seed: u64,
    pub variants: Vec<VariantSpec>,
    pub baseline: String,
    pub init_lf: Option<PathBuf>,
    pub init_pt: Option<PathBuf>,
    pub init_ft: Option<PathBuf>,
    pub init_table: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub sweep_base: Provenance,
    pub sweep_sets: Vec<LayerSet>,
    pub fractions: Vec<f64>,
    pub ablation_provenance: Provenance,
    pub ablation_mode: Mode,
    pub probe: ProbeConfig,
}

impl ExperimentConfig {
    pub fn variant(&self, name: &str) -> Option<&VariantSpec> {
        self.variants.iter().find(|v| v.name == name)
    }

    /// Backbone for `kind`, keeping the configured sizes when the kind matches.
    pub fn backbone_of(&self, kind: BackboneKind) -> BackboneConfig {
        if kind == self.backbone.kind {
            self.backbone
        } else {
            BackboneConfig {
                max_items: self.backbone.max_items,
                dropout: self.backbone.dropout,
                mask_prob: self.backbone.mask_prob,
                ..backbone_for(kind, self.backbone.dim)
            }
        }
    }

    pub fn spec(&self, name: &str, provenance: Provenance, mode: Mode, kind: BackboneKind) -> VariantSpec {
        VariantSpec {
            name: name.to_string(),
            backbone: self.backbone_of(kind),
            provenance,
            mode,
            seed: self.backbone_seed,
            train: TrainSettings {
                batch_size: self.train_batch.unwrap_or(TrainSettings::for_backbone(kind).batch_size),
                ..self.train.clone()
            },
        }
    }

    /// Stage config by stage.
    pub fn stage(&self, s: Stage) -> &StageConfig {
        match s {
            Stage::Lf => &self.lf,
            Stage::Pt => &self.pt,
            Stage::Ft1 => &self.ft1,
            Stage::Ft2 => &self.ft2,
        }
    }
}

pub const DEFAULT_VARIANTS: &str = "random-trainable, LF-freeze, LF-trainable, PT-freeze, PT-trainable, FT-freeze, FT-trainable, FT-further_all, FT-further_emb";

/// Typed reads that record violations instead of stopping at the first one.
struct Reader<'a> {
    raw: &'a RawConfig,
    used: BTreeSet<String>,
    violations: Vec<Violation>,
}

impl<'a> Reader<'a> {
    fn violate(&mut self, field: &str, message: impl Into<String>) {
        self.violations.push(Violation {
            field: field.to_string(),
            message: message.into(),
        });
    }

    fn text(&mut self, key: &str) -> Option<&'a str> {
        self.used.insert(key.to_string());
        self.raw.get(key)
    }

    fn with<T>(&mut self, key: &str, default: T, parse: impl Fn(&str) -> std::result::Result<T, String>) -> T {
        match self.text(key) {
            None => default,
            Some(v) => match parse(v) {
                Ok(x) => x,
                Err(e) => {
                    self.violate(key, e);
                    default
                }
            },
        }
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> T {
        self.with(key, default, |v| v.parse().map_err(|_| format!("cannot parse {v:?}")))
    }

    fn opt<T: FromStr>(&mut self, key: &str) -> Option<T> {
        self.with(key, None, |v| v.parse().map(Some).map_err(|_| format!("cannot parse {v:?}")))
    }

    fn path(&mut self, key: &str) -> Option<PathBuf> {
        self.used.insert(key.to_string());
        let e = self.raw.entries.get(key)?;
        let p = PathBuf::from(&e.value);
        Some(match &e.base {
            Some(b) if p.is_relative() => b.join(p),
            _ => p,
        })
    }

    fn existing(&mut self, key: &str) -> Option<PathBuf> {
        let p = self.path(key)?;
        if !p.exists() {
            self.violate(key, format!("{} does not exist", p.display()));
        }
        Some(p)
    }

    fn list<T>(&mut self, key: &str, default: Vec<T>, sep: char, parse: impl Fn(&str) -> std::result::Result<T, String>) -> Vec<T> {
        self.with(key, default, |v| {
            v.split(sep)
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(&parse)
                .collect()
        })
    }
}

fn synth_params(r: &mut Reader<'_>, prefix: &str, defaults: SynthParams) -> SynthParams {
    let k = |f: &str| format!("{prefix}.synth.{f}");
    let p = SynthParams {
        clusters: r.get(&k("clusters"), defaults.clusters),
        items_per_cluster: r.get(&k("items_per_cluster"), defaults.items_per_cluster),
        users: r.get(&k("users"), defaults.users),
        min_len: r.get(&k("min_len"), defaults.min_len),
        max_len: r.get(&k("max_len"), defaults.max_len),
        intra_cluster_prob: r.get(&k("intra_cluster_prob"), defaults.intra_cluster_prob),
        vocab_per_cluster: r.get(&k("vocab_per_cluster"), defaults.vocab_per_cluster),
        shared_vocab: r.get(&k("shared_vocab"), defaults.shared_vocab),
        seed: r.get(&k("seed"), defaults.seed),
    };
    if p.min_len == 0 || p.min_len > p.max_len {
        r.violate(&k("min_len"), format!("length range [{}, {}] is empty", p.min_len, p.max_len));
    }
    if !(0.0..=1.0).contains(&p.intra_cluster_prob) {
        r.violate(&k("intra_cluster_prob"), "must lie in [0, 1]");
    }
    for (f, v) in [
        ("clusters", p.clusters),
        ("items_per_cluster", p.items_per_cluster),
        ("users", p.users),
        ("vocab_per_cluster", p.vocab_per_cluster),
        ("shared_vocab", p.shared_vocab),
    ] {
        if v == 0 {
            r.violate(&k(f), "must be positive");
        }
    }
    p
}

fn data_section(r: &mut Reader<'_>, prefix: &str, synth: SynthParams, min_user: usize, min_item: usize) -> DataConfig {
    // synth keys are checked even when unused so a later switch back is valid
    let synth = synth_params(r, prefix, synth);
    let source = match r.text(&format!("{prefix}.source")).unwrap_or("synth") {
        "synth" => DataSource::Synth(synth),
        "tsv" => {
            let mut need = |f: &str| {
                let key = format!("{prefix}.{f}");
                r.existing(&key).unwrap_or_else(|| {
                    r.violate(&key, "required when source = tsv");
                    PathBuf::new()
                })
            };
            DataSource::Tsv {
                catalog: need("catalog"),
                interactions: need("interactions"),
            }
        }
        other => {
            r.violate(&format!("{prefix}.source"), format!("unknown source {other:?}; use synth or tsv"));
            DataSource::Synth(synth)
        }
    };
    let fraction = r.get(&format!("{prefix}.fraction"), 1.0);
    if !(fraction > 0.0 && fraction <= 1.0) {
        r.violate(&format!("{prefix}.fraction"), "must lie in (0, 1]");
    }
    DataConfig {
        source,
        min_user: r.get(&format!("{prefix}.min_user"), min_user),
        min_item: r.get(&format!("{prefix}.min_item"), min_item),
        fraction,
    }
}

fn stage_section(r: &mut Reader<'_>, stage: Stage, name: &str, master: u64, layers: usize) -> StageConfig {
    let d = StageConfig::new(stage, rng::derive(master, &format!("stage-{name}"), 0));
    let k = |f: &str| format!("{name}.{f}");
    let c = StageConfig {
        epochs: r.get(&k("epochs"), d.epochs),
        batch_size: r.get(&k("batch_size"), d.batch_size),
        lr: r.get(&k("lr"), d.lr),
        tau: r.get(&k("tau"), d.tau),
        mlm_rate: r.get(&k("mlm_rate"), d.mlm_rate),
        patience: r.get(&k("patience"), d.patience),
        tuned_layers: r.with(&k("layers"), d.tuned_layers.clone(), |v| LayerSet::parse(v).map_err(|e| e.to_string())),
        ..d
    };
    if let Err(e) = c.validate(layers) {
        r.violate(name, e.to_string());
    }
    c
}

fn parse_provenance(v: &str) -> std::result::Result<Provenance, String> {
    Provenance::parse(v).map_err(|e| e.to_string())
}

fn parse_mode(v: &str) -> std::result::Result<Mode, String> {
    Mode::parse(v).map_err(|e| e.to_string())
}

fn backbone_for(kind: BackboneKind, dim: usize) -> BackboneConfig {
    match kind {
        BackboneKind::SasRec => BackboneConfig::sasrec(dim),
        BackboneKind::Bert4Rec => BackboneConfig::bert4rec(dim),
    }
}

/// Typed config, or every violation found.
pub fn resolve(raw: &RawConfig) -> std::result::Result<ExperimentConfig, Vec<Violation>> {
    let mut r = Reader {
        raw,
        used: BTreeSet::new(),
        violations: Vec::new(),
    };
    let seed: u64 = match r.opt("seed") {
        Some(s) => s,
        None => {
            if raw.get("seed").is_none() {
                r.violate("seed", "required");
            }
            0
        }
    };
    let out = r.path("out");

    let data = data_section(
        &mut r,
        "data",
        SynthParams {
            seed: rng::derive(seed, "synth-target", 0),
            ..SynthParams::default()
        },
        4,
        0,
    );
    let pretrain_data = data_section(
        &mut r,
        "pretrain_data",
        SynthParams {
            users: 1000,
            seed: rng::derive(seed, "synth-pretrain", 0),
            ..SynthParams::default()
        },
        5,
        5,
    );
    let min_frequency = r.get("tokenizer.min_frequency", 1);

    let desk = EncoderConfig::desk(0);
    let encoder = EncoderShape {
        layers: r.get("encoder.layers", desk.layers),
        heads: r.get("encoder.heads", desk.heads),
        dim: r.get("encoder.dim", desk.dim),
        ffn: r.get("encoder.ffn", desk.ffn),
        max_tokens: r.get("encoder.max_tokens", desk.max_tokens),
        dropout: r.get("encoder.dropout", desk.dropout),
    };
    if encoder.layers == 0 || encoder.heads == 0 || !encoder.dim.is_multiple_of(encoder.heads) {
        r.violate("encoder.heads", format!("dim {} must be a positive multiple of heads {}", encoder.dim, encoder.heads));
    }
    if !(0.0..1.0).contains(&encoder.dropout) {
        r.violate("encoder.dropout", "must lie in [0, 1)");
    }

    let kind = r.with("backbone.kind", BackboneKind::SasRec, |v| BackboneKind::parse(v).map_err(|e| e.to_string()));
    let bd = backbone_for(kind, encoder.dim);
    let backbone = BackboneConfig {
        kind,
        layers: r.get("backbone.layers", bd.layers),
        heads: r.get("backbone.heads", bd.heads),
        dim: r.get("backbone.dim", bd.dim),
        max_items: r.get("backbone.max_items", bd.max_items),
        dropout: r.get("backbone.dropout", bd.dropout),
        mask_prob: r.get("backbone.mask_prob", bd.mask_prob),
    };
    if backbone.dim != encoder.dim {
        r.violate(
            "backbone.dim",
            format!("{} differs from encoder.dim {}; text tables must fit the backbone", backbone.dim, encoder.dim),
        );
    } else if let Err(e) = backbone.validate() {
        r.violate("backbone", e.to_string());
    }

    let lf = stage_section(&mut r, Stage::Lf, "lf", seed, encoder.layers);
    let pt = stage_section(&mut r, Stage::Pt, "pt", seed, encoder.layers);
    let ft1 = stage_section(&mut r, Stage::Ft1, "ft1", seed, encoder.layers);
    let ft2 = stage_section(&mut r, Stage::Ft2, "ft2", seed, encoder.layers);

    let td = TrainSettings::default();
    let train_epochs = r.get("train.epochs", td.epochs);
    let train_patience = r.get("train.patience", td.patience);
    let train_batch: Option<usize> = r.opt("train.batch_size");
    let lr_grid = r.list("train.lr_grid", td.lr_grid.clone(), ',', |v| v.parse::<f32>().map_err(|_| format!("bad learning rate {v:?}")));
    let train = TrainSettings {
        epochs: train_epochs,
        patience: train_patience,
        batch_size: td.batch_size,
        lr_grid,
    };
    let backbone_seed = rng::derive(seed, "backbone", 0);
    let ft2_base = r.with("ft2.base", Provenance::Ft, parse_provenance);
    let ft2_table_trainable = r.get("ft2.table_trainable", false);
    let table_provenance = r.with("table.provenance", Provenance::Ft, parse_provenance);
    if ft2_base == Provenance::Random {
        r.violate("ft2.base", "needs a trained encoder");
    }

    let negatives = r.get("eval.negatives", 100usize);
    let mut protocol = match r.text("eval.protocol").unwrap_or("sampled") {
        "sampled" => EvalProtocol::sampled(negatives),
        "full" => EvalProtocol::full(),
        other => {
            r.violate("eval.protocol", format!("unknown protocol {other:?}; use sampled or full"));
            EvalProtocol::sampled(negatives)
        }
    };
    if let ProtocolKind::Full { exclude_history } = &mut protocol.kind {
        *exclude_history = r.get("eval.exclude_history", false);
    }
    protocol.ks = r.list("eval.ks", protocol.ks.clone(), ',', |v| v.parse::<usize>().map_err(|_| format!("bad cutoff {v:?}")));
    protocol.tie = r.with("eval.tie", TieRule::Pessimistic, |v| match v {
        "pessimistic" => Ok(TieRule::Pessimistic),
        "optimistic" => Ok(TieRule::Optimistic),
        _ => Err(format!("unknown tie rule {v:?}")),
    });
    if protocol.ks.is_empty() || protocol.ks.contains(&0) {
        r.violate("eval.ks", "cutoffs must be positive and nonempty");
    }
    if let ProtocolKind::Sampled { n_negatives } = protocol.kind {
        if let Some(k) = protocol.ks.iter().find(|&&k| k > n_negatives + 1) {
            r.violate("eval.ks", format!("cutoff {k} exceeds the {} candidates", n_negatives + 1));
        }
    }
    if !protocol.ks.contains(&10) {
        r.violate("eval.ks", "must include 10; validation selects on NDCG@10");
    }
    let exclude_cold = r.get("eval.exclude_cold", true);

    let names = r.list("variants", Vec::new(), ',', |v| Ok(v.to_string()));
    let names = if raw.get("variants").is_none() {
        DEFAULT_VARIANTS.split(',').map(|s| s.trim().to_string()).collect()
    } else {
        names
    };
    let mut variants = Vec::new();
    for name in &names {
        let (p, m) = name.split_once('-').unwrap_or((name.as_str(), ""));
        let key = |f: &str| format!("variant.{name}.{f}");
        let provenance = r.with(&key("provenance"), parse_provenance(p).ok(), |v| parse_provenance(v).map(Some));
        let mode = r.with(&key("mode"), parse_mode(m).ok(), |v| parse_mode(v).map(Some));
        let vkind = r.with(&key("backbone"), kind, |v| BackboneKind::parse(v).map_err(|e| e.to_string()));
        let (Some(provenance), Some(mode)) = (provenance, mode) else {
            r.violate(
                &format!("variant.{name}"),
                "name is not `<provenance>-<mode>`; set variant.<name>.provenance and .mode",
            );
            continue;
        };
        let spec = VariantSpec {
            name: name.clone(),
            backbone: BackboneConfig {
                max_items: backbone.max_items,
                dropout: backbone.dropout,
                mask_prob: backbone.mask_prob,
                ..if vkind == kind { backbone } else { backbone_for(vkind, backbone.dim) }
            },
            provenance,
            mode,
            seed: backbone_seed,
            train: TrainSettings {
                batch_size: train_batch.unwrap_or(TrainSettings::for_backbone(vkind).batch_size),
                ..train.clone()
            },
        };
        if let Err(e) = spec.validate() {
            r.violate(&format!("variant.{name}"), e.to_string());
        }
        variants.push(spec);
    }
    let mut seen = BTreeSet::new();
    for n in &names {
        if !seen.insert(n) {
            r.violate("variants", format!("duplicate variant {n:?}"));
        }
    }
    let baseline = r.get("matrix.baseline", "random-trainable".to_string());

    let init_lf = r.existing("init.lf");
    let init_pt = r.existing("init.pt");
    let init_ft = r.existing("init.ft");
    let init_table = r.existing("init.table");
    let model = r.existing("eval.model");

    let sweep_base = r.with("sweep.base", Provenance::Pt, parse_provenance);
    let default_sets = default_layer_sets(encoder.layers).unwrap_or_else(|_| vec![LayerSet::None, LayerSet::All]);
    let sweep_sets = r.list("sweep.sets", default_sets, ';', |v| LayerSet::parse(v).map_err(|e| e.to_string()));
    for s in &sweep_sets {
        if let Err(e) = s.validate(encoder.layers) {
            r.violate("sweep.sets", e.to_string());
        }
    }
    let fractions = r.list("ablation.fractions", vec![0.01, 0.1, 1.0], ',', |v| {
        v.parse::<f64>().map_err(|_| format!("bad fraction {v:?}"))
    });
    if fractions.is_empty() || fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        r.violate("ablation.fractions", "fractions must be nonempty and lie in (0, 1]");
    }
    let ablation_provenance = r.with("ablation.provenance", Provenance::Pt, parse_provenance);
    let ablation_mode = r.with("ablation.mode", Mode::Trainable, parse_mode);
    if ablation_provenance == Provenance::Random || !matches!(ablation_mode, Mode::Freeze | Mode::Trainable) {
        r.violate("ablation", "downstream variant must be a text table in freeze or trainable mode");
    }

    let probe = ProbeConfig {
        encoder: r.with("probe.encoder", Provenance::Ft, parse_provenance),
        instances: r.get("probe.instances", 1),
        prefix_len: r.get("probe.prefix_len", 3),
        metric: r.with("probe.metric", SimilarityMetric::Cosine, |v| match v {
            "cosine" => Ok(SimilarityMetric::Cosine),
            "js" | "jensen_shannon" => Ok(SimilarityMetric::JensenShannon),
            _ => Err(format!("unknown metric {v:?}; use cosine or js")),
        }),
        blocks: r.get("probe.blocks", 3),
    };
    if probe.encoder == Provenance::Random || probe.instances == 0 || probe.prefix_len == 0 {
        r.violate("probe", "needs a trained encoder and positive instance count and prefix length");
    }
    if probe.blocks == 0 || probe.blocks > encoder.layers {
        r.violate("probe.blocks", format!("must lie in 1..={}", encoder.layers));
    }

    let unknown: Vec<String> = raw.keys().filter(|k| !r.used.contains(*k)).map(str::to_string).collect();
    for k in unknown {
        r.violate(&k, "unknown key");
    }
    if !r.violations.is_empty() {
        return Err(r.violations);
    }
    Ok(ExperimentConfig {
        seed,
        out,
        data,
        pretrain_data,
        min_frequency,
        encoder,
        backbone,
        lf,
        pt,
        ft1,
        ft2,
        ft2_base,
        ft2_table_trainable,
        table_provenance,
        protocol,
        exclude_cold,
        train,
        train_batch,
        backbone_seed,
        variants,
        baseline,
        init_lf,
        init_pt,
        init_ft,
        init_table,
        model,
        sweep_base,
        sweep_sets,
        fractions,
        ablation_provenance,
        ablation_mode,
        probe,
    })
}

/// Every violation; empty means the config is dispatchable.
pub fn validate(raw: &RawConfig) -> Vec<Violation> {
    resolve(raw).err().unwrap_or_default()
}

pub fn resolve_or_error(raw: &RawConfig) -> Result<ExperimentConfig> {
    resolve(raw).map_err(Error::Config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(text: &str) -> RawConfig {
        RawConfig::parse(text, "test.cfg", None).unwrap()
    }

    #[test]
    fn minimal_config_is_valid() {
        assert!(validate(&raw("seed = 3\n")).is_empty());
        let c = resolve(&raw("seed = 3\n")).unwrap();
        assert_eq!(c.variants.len(), 9);
        assert_eq!(c.backbone.dim, c.encoder.dim);
        assert_eq!(c.data.min_user, 4);
        assert_eq!(c.pretrain_data.min_item, 5);
    }

    #[test]
    fn missing_seed_is_one_violation() {
        let v = validate(&raw("# nothing else\n"));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "seed");
    }

    #[test]
    fn dim_mismatch_is_one_violation() {
        let v = validate(&raw("seed = 1\nencoder.dim = 32\nbackbone.dim = 16\n"));
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].field, "backbone.dim");
    }

    #[test]
    fn every_violation_is_listed() {
        let v = validate(&raw(
            "seed = x\nencoder.layers = two\nbogus.key = 1\nvariants = random-trainable, oops\neval.ks = 5\n",
        ));
        let fields: BTreeSet<&str> = v.iter().map(|v| v.field.as_str()).collect();
        for f in ["seed", "encoder.layers", "bogus.key", "variant.oops", "eval.ks"] {
            assert!(fields.contains(f), "{f} missing from {v:?}");
        }
    }

    #[test]
    fn parse_errors_name_the_line() {
        let e = RawConfig::parse("seed = 1\njust words\n", "x.cfg", None).unwrap_err();
        assert_eq!(e.to_string(), "x.cfg:2: expected `key = value`, found \"just words\"");
        let e = RawConfig::parse("a = 1\na = 2\n", "x.cfg", None).unwrap_err();
        assert!(e.to_string().starts_with("x.cfg:2:"));
    }

    #[test]
    fn overrides_win_and_variant_names_parse() {
        let mut r = raw("seed = 1\nvariants = FT-trainable, LF-freeze\nvariant.LF-freeze.backbone = bert4rec\n");
        r.set_pair("seed=9").unwrap();
        let c = resolve(&r).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.variants[0].provenance, Provenance::Ft);
        assert_eq!(c.variants[0].mode, Mode::Trainable);
        assert_eq!(c.variants[1].backbone.kind, BackboneKind::Bert4Rec);
        assert_eq!(c.variants[1].train.batch_size, 256);
        assert_eq!(c.variants[0].seed, c.variants[1].seed);
    }

    #[test]
    fn relative_paths_resolve_against_the_file() {
        let dir = std::env::temp_dir();
        let r = RawConfig::parse("seed = 1\nout = runs\n", "c", Some(&dir)).unwrap();
        assert_eq!(resolve(&r).unwrap().out, Some(dir.join("runs")));
    }
}
