//! Command-line driver: one command per process, artifacts under the output
//! directory named `<label>-<hash>.<ext>`.

use std::ffi::OsString;
use std::fmt::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use recinit_core::eval::{evaluate, MetricsReport};
use recinit_core::probe::SimilarityMetric;

use crate::artifacts::{Artifact, OutDir};
use crate::ckpt::{self, Checkpoint};
use crate::config::{self, RawConfig, OUT_ENV};
use crate::error::{Error, Result};
use crate::ingest;
use crate::lab::{load_corpus, Lab, Trained};
use crate::report::{self, Report};

pub const DEFAULT_OUT: &str = "recinit-out";

const PRECEDENCE: &str = "Settings resolve in this order, later winning: built-in defaults, \
the RECINIT_OUT environment variable (output root only), the --config file, --set KEY=VALUE \
overrides, then --seed and --out.";

#[derive(Debug, Parser)]
#[command(name = "recinit", version, about = "Item-embedding initialisation experiments for sequential recommenders", after_help = PRECEDENCE)]
pub struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides `out` in the config and RECINIT_OUT.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overrides any config key, e.g. `--set encoder.layers=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Parse the corpora and write the tokenizer, id maps and dataset snapshot.
    Ingest,
    /// Generate the synthetic target and pre-training corpora as TSV files.
    Synth,
    /// Run LF then PT and write both encoder checkpoints.
    Pretrain,
    /// Fine-tune with a re-encoded table; writes the encoder and its table.
    Ft1,
    /// Fine-tune the configured layers against a fixed table.
    Ft2,
    /// Encode the catalog into an item table of `table.provenance`.
    BuildTable,
    /// Train and test one configured variant.
    RunVariant {
        #[arg(long)]
        variant: String,
    },
    /// Train and test every configured variant and compare with the baseline.
    RunMatrix,
    /// Test a saved backbone checkpoint (`eval.model`).
    Eval,
    /// Export CLS attention traces and their layer/head similarity.
    ProbeAttention,
    /// Stage-FT2 once per layer set in `sweep.sets`.
    SweepLayers,
    /// Stage-PT on fractions of the pre-training users, each followed by a downstream run.
    PretrainSizeAblation,
    /// List every config violation.
    Validate,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Synth => "synth",
            Command::Pretrain => "pretrain",
            Command::Ft1 => "ft1",
            Command::Ft2 => "ft2",
            Command::BuildTable => "build-table",
            Command::RunVariant { .. } => "run-variant",
            Command::RunMatrix => "run-matrix",
            Command::Eval => "eval",
            Command::ProbeAttention => "probe-attention",
            Command::SweepLayers => "sweep-layers",
            Command::PretrainSizeAblation => "pretrain-size-ablation",
            Command::Validate => "validate",
        }
    }
}

/// What a command produced: written files and the human summary.
#[derive(Debug)]
pub struct Outcome {
    pub artifacts: Vec<Artifact>,
    pub summary: String,
}

/// Applies the documented precedence to build the raw config.
pub fn raw_config(cli: &Cli, env_out: Option<String>) -> Result<RawConfig> {
    let mut raw = match &cli.config {
        Some(p) => RawConfig::load(p)?,
        None => RawConfig::default(),
    };
    if raw.get("out").is_none() {
        if let Some(o) = env_out.filter(|o| !o.is_empty()) {
            raw.set("out", &o);
        }
    }
    for pair in &cli.set {
        raw.set_pair(pair)?;
    }
    if let Some(s) = cli.seed {
        raw.set("seed", &s.to_string());
    }
    if let Some(o) = &cli.out {
        raw.set("out", &o.to_string_lossy());
    }
    Ok(raw)
}

/// Parses `args` (including the program name) and dispatches.
pub fn run<I, T>(args: I) -> Result<Outcome>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Usage(e.to_string()))?;
    dispatch(&cli)
}

pub fn dispatch(cli: &Cli) -> Result<Outcome> {
    let raw = raw_config(cli, std::env::var(OUT_ENV).ok())?;
    if let Command::Validate = cli.command {
        let v = config::validate(&raw);
        if !v.is_empty() {
            return Err(Error::Config(v));
        }
        return Ok(Outcome {
            artifacts: Vec::new(),
            summary: "config is valid\n".into(),
        });
    }
    let cfg = config::resolve_or_error(&raw)?;
    let root = cfg.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let mut out = OutDir::create(&root)?;
    let name = cli.command.name();
    log::info!("{name}: seed {}, output {}", cfg.seed, root.display());
    let mut rep = Report::new(name);
    rep.record("run", &[("command", name.to_string()), ("seed", cfg.seed.to_string())]);

    if let Command::Synth = cli.command {
        synth(&cfg, &mut out, &mut rep)?;
        return finish(out, rep, name);
    }
    let mut lab = Lab::new(cfg)?;
    rep.record("tokenizer", &[("hash", lab.tokenizer_hash.clone()), ("vocab", lab.tokenizer.vocab_size().to_string())]);
    match &cli.command {
        Command::Ingest => ingest_cmd(&lab, &mut out, &mut rep)?,
        Command::Pretrain => {
            let lf = lab.lf()?;
            let pt = lab.pt()?;
            save_encoder(&mut out, &mut rep, "encoder-lf", &lf)?;
            save_encoder(&mut out, &mut rep, "encoder-pt", &pt)?;
            rep.text(&format!("LF encoder {}\nPT encoder {}\n", lf.hash, pt.hash));
        }
        Command::Ft1 => {
            let (ft, table) = lab.ft()?;
            save_encoder(&mut out, &mut rep, "encoder-ft", &ft)?;
            save_table(&mut out, &mut rep, "table-ft", &table)?;
            let m = lab.score_text(&ft.encoder, &table, Some(ft.hash.clone()))?;
            metrics_section(&mut out, &mut rep, "ft1", &[("FT encoder".into(), m)])?;
        }
        Command::Ft2 => {
            let (t, table, m) = lab.ft2()?;
            save_encoder(&mut out, &mut rep, "encoder-ft2", &t)?;
            save_table(&mut out, &mut rep, "table-ft2", &table)?;
            let label = format!("FT2 layers {}", lab.cfg.ft2.tuned_layers.describe());
            metrics_section(&mut out, &mut rep, "ft2", &[(label, m)])?;
        }
        Command::BuildTable => {
            let p = lab.cfg.table_provenance;
            let table = lab.table(p)?;
            let label = format!("table-{}", p.as_str().to_lowercase());
            save_table(&mut out, &mut rep, &label, &table)?;
            let mat = out.write(&label, "mat", &ckpt::table_to_matrix_file(&table))?;
            rep.record("artifact", &[("kind", "matrix".into()), ("file", mat.file_name())]);
            rep.text(&format!(
                "{} table: {} x {}, source {}\n",
                p.as_str(),
                table.rows(),
                table.dim(),
                table.source.as_deref().unwrap_or("none")
            ));
        }
        Command::RunVariant { variant } => {
            let spec = lab.cfg.variant(variant).cloned().ok_or_else(|| {
                let known: Vec<&str> = lab.cfg.variants.iter().map(|v| v.name.as_str()).collect();
                Error::Usage(format!("unknown variant {variant:?}; configured: {}", known.join(", ")))
            })?;
            let o = lab.run_specs(std::slice::from_ref(&spec))?.pop().expect("one spec");
            save_outcome(&mut out, &mut rep, &o)?;
            metrics_section(&mut out, &mut rep, "variant", &[(o.name.clone(), o.metrics.clone())])?;
        }
        Command::RunMatrix => {
            let (cmp, outcomes) = lab.matrix()?;
            for o in &outcomes {
                save_outcome(&mut out, &mut rep, o)?;
            }
            rep.text(&report::comparative_table(&cmp));
            report::comparative_records(&mut rep, &cmp);
            let rows: Vec<(String, &MetricsReport)> = cmp.rows.iter().map(|r| (r.name.clone(), &r.metrics)).collect();
            let tsv = out.write("matrix-metrics", "tsv", report::metrics_tsv(&rows).as_bytes())?;
            rep.record("artifact", &[("kind", "metrics_tsv".into()), ("file", tsv.file_name())]);
        }
        Command::Eval => {
            let path = lab
                .cfg
                .model
                .clone()
                .ok_or_else(|| Error::Usage("eval needs eval.model = <backbone checkpoint>".into()))?;
            let model = ckpt::model_from_ckpt(Checkpoint::load(&path)?)?;
            if model.num_items() != lab.target.catalog.len() {
                return Err(Error::Format(format!(
                    "model covers {} items, the catalog has {}",
                    model.num_items(),
                    lab.target.catalog.len()
                )));
            }
            let mut m = evaluate(&model, &lab.snapshot.test, lab.protocol())?;
            m.checkpoint = model.source.clone();
            let label = format!("{} {}", model.config.kind.as_str(), model.provenance().as_str());
            metrics_section(&mut out, &mut rep, "eval", &[(label, m)])?;
        }
        Command::ProbeAttention => probe_cmd(&mut lab, &mut out, &mut rep)?,
        Command::SweepLayers => {
            let (base, rows) = lab.sweep()?;
            rep.text(&format!(
                "base {} encoder {}\n{}",
                lab.cfg.sweep_base.as_str(),
                base.hash,
                report::sweep_table(&rows)
            ));
            rep.record("base", &[("provenance", lab.cfg.sweep_base.as_str().into()), ("encoder", base.hash.clone())]);
            report::sweep_records(&mut rep, &rows);
        }
        Command::PretrainSizeAblation => {
            let rows = lab.ablation()?;
            let mut body = Vec::new();
            for r in &rows {
                let a = save_encoder(&mut out, &mut rep, &format!("encoder-pt-f{}", r.fraction), &r.pt)?;
                let m = &r.outcome.metrics;
                body.push(vec![
                    r.fraction.to_string(),
                    r.users.to_string(),
                    a.hash.clone(),
                    format!("{:.2}", m.hr_at(10).unwrap_or(f64::NAN) * 100.0),
                    format!("{:.2}", m.ndcg_at(10).unwrap_or(f64::NAN) * 100.0),
                ]);
                rep.record(
                    "ablation",
                    &[
                        ("fraction", r.fraction.to_string()),
                        ("users", r.users.to_string()),
                        ("encoder", r.pt.hash.clone()),
                    ],
                );
                rep.metrics(&format!("fraction:{}", r.fraction), m);
                rep.training(&r.outcome.report);
            }
            let h: Vec<String> = ["fraction", "users", "PT encoder", "HR@10", "NDCG@10"].map(String::from).into();
            rep.text(&format!(
                "downstream {}-{}\n{}",
                lab.cfg.ablation_provenance.as_str(),
                lab.cfg.ablation_mode.as_str(),
                report::table(&h, &body)
            ));
        }
        Command::Synth | Command::Validate => unreachable!("handled above"),
    }
    finish(out, rep, name)
}

fn finish(mut out: OutDir, rep: Report, name: &str) -> Result<Outcome> {
    let text = rep.render();
    let summary = text
        .split(report::RECORDS_MARKER)
        .next()
        .unwrap_or_default()
        .to_string();
    out.write(&format!("{name}-report"), "txt", text.as_bytes())?;
    Ok(Outcome {
        artifacts: out.written().to_vec(),
        summary,
    })
}

fn save_encoder(out: &mut OutDir, rep: &mut Report, label: &str, t: &Trained) -> Result<Artifact> {
    let a = out.write(label, "ckpt", &t.checkpoint)?;
    rep.record("artifact", &[("kind", "encoder".into()), ("file", a.file_name())]);
    for r in &t.reports {
        rep.training(r);
    }
    Ok(a)
}

fn save_table(out: &mut OutDir, rep: &mut Report, label: &str, t: &recinit_core::seqmodels::EmbeddingTable) -> Result<Artifact> {
    let a = out.write(label, "ckpt", &ckpt::table_to_ckpt(t).to_bytes()?)?;
    rep.record(
        "artifact",
        &[
            ("kind", "table".into()),
            ("file", a.file_name()),
            ("source", t.source.clone().unwrap_or_else(|| "none".into())),
        ],
    );
    Ok(a)
}

fn save_outcome(out: &mut OutDir, rep: &mut Report, o: &recinit_core::initlab::VariantOutcome) -> Result<()> {
    if let Some(m) = &o.model {
        let a = out.write(&format!("model-{}", o.name), "ckpt", &ckpt::model_to_ckpt(m).to_bytes()?)?;
        rep.record("artifact", &[("kind", "backbone".into()), ("file", a.file_name()), ("variant", o.name.clone())]);
    }
    rep.record("variant", &[("name", o.name.clone()), ("lr", o.lr.to_string())]);
    rep.training(&o.report);
    Ok(())
}

fn metrics_section(out: &mut OutDir, rep: &mut Report, label: &str, rows: &[(String, MetricsReport)]) -> Result<()> {
    let refs: Vec<(String, &MetricsReport)> = rows.iter().map(|(n, m)| (n.clone(), m)).collect();
    rep.text(&report::metrics_table(&refs));
    for (n, m) in rows {
        rep.metrics(n, m);
    }
    let a = out.write(&format!("{label}-metrics"), "tsv", report::metrics_tsv(&refs).as_bytes())?;
    rep.record("artifact", &[("kind", "metrics_tsv".into()), ("file", a.file_name())]);
    Ok(())
}

fn synth(cfg: &config::ExperimentConfig, out: &mut OutDir, rep: &mut Report) -> Result<()> {
    let mut human = String::new();
    for (prefix, d) in [("", &cfg.data), ("pretrain-", &cfg.pretrain_data)] {
        let c = load_corpus(d)?;
        let cat = out.write(&format!("{prefix}catalog"), "tsv", ingest::catalog_to_tsv(&c.catalog)?.as_bytes())?;
        let log = out.write(&format!("{prefix}interactions"), "tsv", ingest::log_to_tsv(&c.log).as_bytes())?;
        let clusters: String = c
            .item_cluster
            .iter()
            .flatten()
            .enumerate()
            .map(|(i, k)| format!("{i}\t{k}\n"))
            .collect();
        let cl = out.write(&format!("{prefix}clusters"), "tsv", clusters.as_bytes())?;
        for a in [&cat, &log, &cl] {
            rep.record("artifact", &[("file", a.file_name())]);
        }
        let which = if prefix.is_empty() { "target" } else { "pre-training" };
        rep.record(
            "corpus",
            &[
                ("which", which.into()),
                ("items", c.catalog.len().to_string()),
                ("interactions", c.log.records.len().to_string()),
            ],
        );
        let _ = writeln!(human, "{which}: {} items, {} interactions", c.catalog.len(), c.log.records.len());
    }
    rep.text(&human);
    Ok(())
}

fn ingest_cmd(lab: &Lab, out: &mut OutDir, rep: &mut Report) -> Result<()> {
    let tok = out.write("tokenizer", "txt", ingest::tokenizer_to_text(&lab.tokenizer).as_bytes())?;
    let ds = out.write("dataset", "ckpt", &ckpt::dataset_to_ckpt(&lab.snapshot)?.to_bytes()?)?;
    for a in [&tok, &ds] {
        rep.record("artifact", &[("file", a.file_name())]);
    }
    for (label, ids) in [("item-ids", &lab.target.items), ("user-ids", &lab.target.users)] {
        if let Some(ids) = ids {
            let a = out.write(label, "tsv", ids.to_text().as_bytes())?;
            rep.record("artifact", &[("file", a.file_name())]);
        }
    }
    let s = &lab.snapshot;
    let fields = [
        ("items", lab.target.catalog.len()),
        ("log_records", lab.target.log.records.len()),
        ("skipped_unknown_item", lab.target.skipped_unknown_item),
        ("users", s.dataset.users.len()),
        ("interactions", s.dataset.interactions()),
        ("valid", s.valid.len()),
        ("test", s.test.len()),
        ("pretrain_users", lab.pretrain_ds.users.len()),
        ("pretrain_interactions", lab.pretrain_ds.interactions()),
    ];
    let rows: Vec<Vec<String>> = fields.iter().map(|(k, v)| vec![k.to_string(), v.to_string()]).collect();
    rep.text(&report::table(&["field".into(), "count".into()], &rows));
    rep.record("dataset", &fields.map(|(k, v)| (k, v.to_string())));
    Ok(())
}

fn probe_cmd(lab: &mut Lab, out: &mut OutDir, rep: &mut Report) -> Result<()> {
    let (t, rows) = lab.probe()?;
    let mut traces = String::new();
    let mut sims = String::new();
    let mut body = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let tsv = report::trace_tsv(&i.to_string(), &r.trace);
        traces.push_str(if i == 0 { &tsv } else { tsv.split_once('\n').map_or("", |x| x.1) });
        let _ = writeln!(sims, "# instance {i} user {}", r.user);
        sims.push_str(&report::similarity_tsv(&r.similarity));
        let prefix: Vec<String> = r.prefix.iter().map(u32::to_string).collect();
        rep.record(
            "probe",
            &[
                ("instance", i.to_string()),
                ("user", r.user.to_string()),
                ("prefix", prefix.join(",")),
                ("within", r.within.to_string()),
                ("between", r.between.to_string()),
            ],
        );
        body.push(vec![
            i.to_string(),
            prefix.join(","),
            format!("{:.4}", r.within),
            format!("{:.4}", r.between),
            format!("{:.4}", r.within - r.between),
        ]);
    }
    let a = out.write("attention-trace", "tsv", traces.as_bytes())?;
    let b = out.write("attention-similarity", "tsv", sims.as_bytes())?;
    for x in [&a, &b] {
        rep.record("artifact", &[("file", x.file_name())]);
    }
    let metric = match lab.cfg.probe.metric {
        SimilarityMetric::Cosine => "cosine",
        SimilarityMetric::JensenShannon => "jensen-shannon",
    };
    let h: Vec<String> = ["instance", "prefix", "within", "between", "evidence"].map(String::from).into();
    rep.text(&format!(
        "{} encoder {}, {metric} similarity over {} layer blocks\n{}",
        lab.cfg.probe.encoder.as_str(),
        t.hash,
        lab.cfg.probe.blocks,
        report::table(&h, &body)
    ));
    Ok(())
}
