//! CLS attention capture, head/layer similarity and stratification, and the
//! selective-layer tuning sweep.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::{EvalInstance, ItemCatalog, ItemId};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::pipeline::{stage_ft2, LayerSet, StageConfig, TextScorer, TextTask, TrainReport};
use crate::seqmodels::EmbeddingTable;
use crate::textenc::{flatten_history, Encoder, Tokenizer};

pub use crate::textenc::AttentionTrace;

/// Evaluation-mode CLS attention for one history.
pub fn capture(encoder: &Encoder, prefix: &[ItemId], catalog: &ItemCatalog, tok: &Tokenizer) -> Result<AttentionTrace> {
    if tok.vocab_size() != encoder.config.vocab_size {
        return Err(Error::invalid("tokenizer does not match the encoder vocabulary"));
    }
    let x = flatten_history(prefix, catalog, tok, encoder.config.max_tokens)?;
    let (_, trace) = encoder.encode(&x, true)?;
    Ok(trace.expect("capture requested"))
}

/// Token index ranges `[start, end)` of each item span, most recent first.
pub fn item_spans(trace: &AttentionTrace) -> Vec<(usize, usize)> {
    let mut spans: Vec<(usize, usize)> = Vec::new();
    for (i, &p) in trace.item_positions.iter().enumerate() {
        if p == 0 {
            continue;
        }
        match spans.last_mut() {
            Some(last) if trace.item_positions[last.0] == p => last.1 = i + 1,
            _ => spans.push((i, i + 1)),
        }
    }
    spans
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SimilarityMetric {
    #[default]
    Cosine,
    /// `1 - JS(p, q) / ln 2`, so identical rows score 1 and disjoint ones 0.
    JensenShannon,
}

/// `n x n` similarities between the flattened `(layer, head)` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        ab += x as f64 * y as f64;
        aa += x as f64 * x as f64;
        bb += y as f64 * y as f64;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::invalid("zero-norm attention row"));
    }
    Ok((ab / libm::sqrt(aa * bb)).clamp(-1.0, 1.0))
}

fn kl(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &mi)| pi * libm::log(pi / mi))
        .sum()
}

fn js_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    let sa: f64 = a.iter().map(|&x| x as f64).sum();
    let sb: f64 = b.iter().map(|&x| x as f64).sum();
    if sa <= 0.0 || sb <= 0.0 {
        return Err(Error::invalid("attention row has no mass"));
    }
    let p: Vec<f64> = a.iter().map(|&x| x as f64 / sa).collect();
    let q: Vec<f64> = b.iter().map(|&x| x as f64 / sb).collect();
    let m: Vec<f64> = p.iter().zip(&q).map(|(x, y)| 0.5 * (x + y)).collect();
    let js = 0.5 * kl(&p, &m) + 0.5 * kl(&q, &m);
    Ok((1.0 - js / core::f64::consts::LN_2).clamp(0.0, 1.0))
}

pub fn similarity(trace: &AttentionTrace, metric: SimilarityMetric) -> Result<SimilarityMatrix> {
    let n = trace.layers * trace.heads;
    if n == 0 || trace.tokens == 0 {
        return Err(Error::Empty("attention trace"));
    }
    let rows: Vec<&[f32]> = (0..trace.layers)
        .flat_map(|l| (0..trace.heads).map(move |h| (l, h)))
        .map(|(l, h)| trace.row(l, h))
        .collect();
    let mut values = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i..n {
            let v = if i == j {
                1.0
            } else {
                match metric {
                    SimilarityMetric::Cosine => cosine(rows[i], rows[j])?,
                    SimilarityMetric::JensenShannon => js_similarity(rows[i], rows[j])?,
                }
            };
            if i == j {
                // still reject degenerate rows
                match metric {
                    SimilarityMetric::Cosine => cosine(rows[i], rows[i]).map(|_| ())?,
                    SimilarityMetric::JensenShannon => js_similarity(rows[i], rows[i]).map(|_| ())?,
                }
            }
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    Ok(SimilarityMatrix { n, values })
}

/// Mean similarity over distinct pairs inside the same block and across
/// blocks. Evidence of stratification is `within - between`.
pub fn stratification_score(m: &SimilarityMatrix, blocks: &[Vec<usize>]) -> Result<(f64, f64)> {
    let mut owner = vec![usize::MAX; m.n];
    for (b, block) in blocks.iter().enumerate() {
        if block.is_empty() {
            return Err(Error::Empty("partition block"));
        }
        for &i in block {
            if i >= m.n || owner[i] != usize::MAX {
                return Err(Error::invalid(format!("index {i} out of range or in two blocks")));
            }
            owner[i] = b;
        }
    }
    if owner.contains(&usize::MAX) {
        return Err(Error::invalid("partition does not cover every (layer, head)"));
    }
    let (mut ws, mut wn, mut bs, mut bn) = (0.0f64, 0usize, 0.0f64, 0usize);
    for i in 0..m.n {
        for j in 0..m.n {
            if i == j {
                continue;
            }
            if owner[i] == owner[j] {
                ws += m.get(i, j);
                wn += 1;
            } else {
                bs += m.get(i, j);
                bn += 1;
            }
        }
    }
    if wn == 0 || bn == 0 {
        return Err(Error::invalid("partition needs pairs both within and between blocks"));
    }
    Ok((ws / wn as f64, bs / bn as f64))
}

/// Partition of the `(layer, head)` indices into `parts` contiguous groups
/// of layers.
pub fn layer_blocks(layers: usize, heads: usize, parts: usize) -> Result<Vec<Vec<usize>>> {
    if parts == 0 || parts > layers {
        return Err(Error::invalid(format!("cannot split {layers} layers into {parts} blocks")));
    }
    Ok((0..parts)
        .map(|p| {
            let (lo, hi) = (p * layers / parts, (p + 1) * layers / parts);
            (lo * heads..hi * heads).collect()
        })
        .collect())
}

/// One layer per equal third, offset `o`: `{o, o + L/3, o + 2L/3}`.
pub fn thirds_set(layers: usize, offset: usize) -> Result<LayerSet> {
    let step = layers / 3;
    if step == 0 || offset >= step {
        return Err(Error::invalid(format!("no third-offset {offset} for {layers} layers")));
    }
    Ok(LayerSet::Layers((0..3).map(|k| offset + k * step).collect::<BTreeSet<_>>()))
}

/// `NONE`, `ALL`, every thirds set, then each layer of the last thirds set
/// alone. At 12 layers this is the familiar
/// `{0,4,8} {1,5,9} {2,6,10} {3,7,11} {3} {7} {11}`.
pub fn default_layer_sets(layers: usize) -> Result<Vec<LayerSet>> {
    let step = layers / 3;
    if step == 0 {
        return Err(Error::invalid("layer sweep needs at least three layers"));
    }
    let mut out = vec![LayerSet::None, LayerSet::All];
    for o in 0..step {
        out.push(thirds_set(layers, o)?);
    }
    if let LayerSet::Layers(last) = thirds_set(layers, step - 1)? {
        out.extend(last.into_iter().map(|l| LayerSet::of(&[l])));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub layers: LayerSet,
    pub trainable_params: usize,
    pub report: TrainReport,
    pub metrics: MetricsReport,
}

/// Stage-FT2 from the same base encoder once per layer set, each scored on
/// `test` against the fixed table.
pub fn layer_sweep(
    base: &Encoder,
    table: &EmbeddingTable,
    task: &TextTask<'_>,
    test: &[EvalInstance],
    sets: &[LayerSet],
    cfg: &StageConfig,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(sets.len());
    for set in sets {
        set.validate(base.config.layers)?;
        let mut enc = base.clone();
        let mut t = table.clone();
        t.trainable = false;
        let c = StageConfig {
            tuned_layers: set.clone(),
            ..cfg.clone()
        };
        let report = stage_ft2(&mut enc, &mut t, task, &c)?;
        let trainable_params = enc.store.trainable_count();
        let scorer = TextScorer {
            encoder: &enc,
            table: t.matrix(),
            catalog: task.catalog,
            tokenizer: task.tokenizer,
        };
        let mut metrics = evaluate(&scorer, test, task.protocol)?;
        metrics.checkpoint = table.source.clone();
        rows.push(SweepRow {
            layers: set.clone(),
            trainable_params,
            report,
            metrics,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(rows: &[&[f32]], layers: usize, heads: usize) -> AttentionTrace {
        AttentionTrace {
            layers,
            heads,
            tokens: rows[0].len(),
            weights: rows.concat(),
            item_positions: (0..rows[0].len() as u32).map(|i| i.div_ceil(2)).collect(),
            token_types: vec![0; rows[0].len()],
        }
    }

    #[test]
    fn default_sets_at_twelve_and_six() {
        let s = default_layer_sets(12).unwrap();
        assert_eq!(s.len(), 9);
        assert_eq!(s[5], LayerSet::of(&[3, 7, 11]));
        assert_eq!(&s[6..], &[LayerSet::of(&[3]), LayerSet::of(&[7]), LayerSet::of(&[11])]);
        let s = default_layer_sets(6).unwrap();
        assert_eq!(s[2], LayerSet::of(&[0, 2, 4]));
        assert_eq!(s[3], LayerSet::of(&[1, 3, 5]));
        assert_eq!(s.len(), 7);
    }

    #[test]
    fn identical_rows_have_no_evidence() {
        let r: &[f32] = &[0.2, 0.3, 0.5];
        let t = trace(&[r, r, r, r], 2, 2);
        let m = similarity(&t, SimilarityMetric::Cosine).unwrap();
        let (w, b) = stratification_score(&m, &layer_blocks(2, 2, 2).unwrap()).unwrap();
        assert!((w - 1.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12);
        let mj = similarity(&t, SimilarityMetric::JensenShannon).unwrap();
        assert!((mj.get(0, 3) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spans_partition_tokens() {
        let t = trace(&[&[0.2, 0.2, 0.2, 0.2, 0.2]], 1, 1);
        // positions 0,1,1,2,2
        assert_eq!(item_spans(&t), vec![(1, 3), (3, 5)]);
    }

    #[test]
    fn bad_partitions_rejected() {
        let r: &[f32] = &[0.5, 0.5];
        let m = similarity(&trace(&[r, r], 2, 1), SimilarityMetric::Cosine).unwrap();
        assert!(stratification_score(&m, &[vec![0], vec![]]).is_err());
        assert!(stratification_score(&m, &[vec![0]]).is_err());
    }
}
