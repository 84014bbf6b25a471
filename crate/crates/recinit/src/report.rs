//! Plain-text reports: a human table on top, machine records below.
//!
//! Records are tab-separated lines `<kind>\t<key>=<value>...`. Metrics are
//! stored as fractions; the human tables print them as percentages. Wall
//! time is never written so reruns produce identical bytes.

use std::fmt::Write;

use recinit_core::eval::MetricsReport;
use recinit_core::initlab::ComparativeReport;
use recinit_core::pipeline::TrainReport;
use recinit_core::probe::{SimilarityMatrix, SweepRow};
use recinit_core::textenc::AttentionTrace;

pub const RECORDS_MARKER: &str = "-- records --";

#[derive(Debug, Default)]
pub struct Report {
    title: String,
    human: String,
    records: String,
}

impl Report {
    pub fn new(title: &str) -> Self {
        Self {
            title: title.to_string(),
            ..Self::default()
        }
    }

    /// Appends a human-readable block.
    pub fn text(&mut self, block: &str) -> &mut Self {
        if !self.human.is_empty() {
            self.human.push('\n');
        }
        self.human.push_str(block);
        if !block.ends_with('\n') {
            self.human.push('\n');
        }
        self
    }

    pub fn record(&mut self, kind: &str, fields: &[(&str, String)]) -> &mut Self {
        self.records.push_str(kind);
        for (k, v) in fields {
            let _ = write!(self.records, "\t{k}={v}");
        }
        self.records.push('\n');
        self
    }

    pub fn metrics(&mut self, name: &str, m: &MetricsReport) -> &mut Self {
        let mut f = vec![
            ("name", name.to_string()),
            ("protocol", m.protocol.clone()),
            ("instances", m.instances.to_string()),
            ("checkpoint", m.checkpoint.clone().unwrap_or_else(|| "none".into())),
        ];
        for (i, k) in m.ks.iter().enumerate() {
            f.push((leak(format!("hr@{k}")), m.hr[i].to_string()));
        }
        for (i, k) in m.ks.iter().enumerate() {
            f.push((leak(format!("ndcg@{k}")), m.ndcg[i].to_string()));
        }
        self.record("metrics", &f)
    }

    pub fn training(&mut self, r: &TrainReport) -> &mut Self {
        for e in &r.epochs {
            self.record(
                "epoch",
                &[
                    ("label", r.label.clone()),
                    ("epoch", e.epoch.to_string()),
                    ("train_loss", opt(e.train_loss)),
                    ("valid_ndcg@10", opt(e.valid_ndcg10)),
                ],
            );
        }
        self.record(
            "training",
            &[
                ("label", r.label.clone()),
                ("epochs", r.epochs.len().to_string()),
                ("best_epoch", r.best_epoch.to_string()),
                ("stop", r.stop.as_str().to_string()),
            ],
        )
    }

    pub fn render(&self) -> String {
        format!("== {} ==\n{}\n{RECORDS_MARKER}\n{}", self.title, self.human, self.records)
    }
}

// record keys are few and short-lived; owning them is not worth a second type
fn leak(s: String) -> &'static str {
    Box::leak(s.into_boxed_str())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".into(), |x| x.to_string())
}

fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

/// Left-aligned first column, right-aligned rest.
pub fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut w = vec![0; cols];
    for r in std::iter::once(header).chain(rows.iter().map(Vec::as_slice)) {
        for (i, c) in r.iter().enumerate().take(cols) {
            w[i] = w[i].max(c.chars().count());
        }
    }
    let line = |r: &[String]| {
        let mut s = String::new();
        for (i, c) in r.iter().enumerate().take(cols) {
            if i == 0 {
                let _ = write!(s, "{c:<width$}", width = w[0]);
            } else {
                let _ = write!(s, "  {c:>width$}", width = w[i]);
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    out.push_str(&"-".repeat(w.iter().sum::<usize>() + 2 * (cols.saturating_sub(1))));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

fn metric_header(first: &str, ks: &[usize]) -> Vec<String> {
    let mut h = vec![first.to_string()];
    h.extend(ks.iter().map(|k| format!("HR@{k}")));
    h.extend(ks.iter().map(|k| format!("NDCG@{k}")));
    h
}

fn metric_cells(m: &MetricsReport) -> Vec<String> {
    m.hr.iter().chain(&m.ndcg).map(|&x| pct(x)).collect()
}

/// One row per named report, values in percent.
pub fn metrics_table(rows: &[(String, &MetricsReport)]) -> String {
    let ks = rows.first().map(|r| r.1.ks.clone()).unwrap_or_default();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(n, m)| std::iter::once(n.clone()).chain(metric_cells(m)).collect())
        .collect();
    table(&metric_header("model", &ks), &body)
}

/// Rows like the variant comparison tables, with relative change vs the baseline.
pub fn comparative_table(c: &ComparativeReport) -> String {
    let ks = c.rows.first().map(|r| r.metrics.ks.clone()).unwrap_or_default();
    let mut h = metric_header("variant", &ks);
    h.extend(ks.iter().map(|k| format!("Improv.HR@{k}")));
    h.extend(ks.iter().map(|k| format!("Improv.NDCG@{k}")));
    let body: Vec<Vec<String>> = c
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![r.name.clone()];
            row.extend(metric_cells(&r.metrics));
            row.extend(r.improv.iter().map(|v| v.map_or_else(|| "n/a".into(), |x| format!("{:+.2}%", x * 100.0))));
            row
        })
        .collect();
    format!("baseline: {}\n{}", c.baseline, table(&h, &body))
}

pub fn comparative_records(rep: &mut Report, c: &ComparativeReport) {
    for r in &c.rows {
        rep.metrics(&r.name, &r.metrics);
        let ks = &r.metrics.ks;
        let mut f = vec![("name", r.name.clone()), ("baseline", c.baseline.clone())];
        let names = ks.iter().map(|k| format!("hr@{k}")).chain(ks.iter().map(|k| format!("ndcg@{k}")));
        for (n, v) in names.zip(&r.improv) {
            f.push((leak(format!("improv.{n}")), opt(*v)));
        }
        rep.record("improv", &f);
    }
}

/// One row per cutoff per metric: `name  metric  k  value`.
pub fn metrics_tsv(rows: &[(String, &MetricsReport)]) -> String {
    let mut out = String::from("name\tmetric\tk\tvalue\n");
    for (n, m) in rows {
        for (i, k) in m.ks.iter().enumerate() {
            let _ = writeln!(out, "{n}\tHR\t{k}\t{}", m.hr[i]);
        }
        for (i, k) in m.ks.iter().enumerate() {
            let _ = writeln!(out, "{n}\tNDCG\t{k}\t{}", m.ndcg[i]);
        }
    }
    out
}

/// Metrics as rows and layer sets as columns.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let Some(first) = rows.first() else {
        return String::new();
    };
    let mut h = vec!["Metric".to_string()];
    h.extend(rows.iter().map(|r| r.layers.describe()));
    let mut body = Vec::new();
    for (i, k) in first.metrics.ks.iter().enumerate() {
        body.push(std::iter::once(format!("H@{k}")).chain(rows.iter().map(|r| pct(r.metrics.hr[i]))).collect());
    }
    for (i, k) in first.metrics.ks.iter().enumerate() {
        body.push(std::iter::once(format!("N@{k}")).chain(rows.iter().map(|r| pct(r.metrics.ndcg[i]))).collect());
    }
    body.push(
        std::iter::once("params".to_string())
            .chain(rows.iter().map(|r| r.trainable_params.to_string()))
            .collect(),
    );
    format!("Tuned layers\n{}", table(&h, &body))
}

pub fn sweep_records(rep: &mut Report, rows: &[SweepRow]) {
    for r in rows {
        let name = format!("layers:{}", r.layers.describe());
        rep.record(
            "sweep",
            &[("layers", r.layers.describe()), ("trainable_params", r.trainable_params.to_string())],
        );
        rep.metrics(&name, &r.metrics);
        rep.training(&r.report);
    }
}

/// One record per `(layer, head, token)` with its annotations.
pub fn trace_tsv(instance: &str, t: &AttentionTrace) -> String {
    let mut out = String::from("instance\tlayer\thead\ttoken\titem_position\ttoken_type\tweight\n");
    for l in 0..t.layers {
        for h in 0..t.heads {
            for (i, w) in t.row(l, h).iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{instance}\t{l}\t{h}\t{i}\t{}\t{}\t{w}",
                    t.item_positions[i], t.token_types[i]
                );
            }
        }
    }
    out
}

/// Square matrix over flattened `(layer, head)` indices.
pub fn similarity_tsv(m: &SimilarityMatrix) -> String {
    let mut out = String::new();
    for i in 0..m.n {
        let row: Vec<String> = (0..m.n).map(|j| format!("{:.6}", m.get(i, j))).collect();
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    out
}
