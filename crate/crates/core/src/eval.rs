//! Ranking metrics and the sampled / full-ranking evaluation protocols.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::{EvalInstance, ItemId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieRule {
    /// Ties with negatives count against the positive.
    #[default]
    Pessimistic,
    Optimistic,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProtocolKind {
    Sampled { n_negatives: usize },
    Full { exclude_history: bool },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalProtocol {
    pub kind: ProtocolKind,
    pub ks: Vec<usize>,
    pub tie: TieRule,
}

impl EvalProtocol {
    pub fn sampled(n_negatives: usize) -> Self {
        Self {
            kind: ProtocolKind::Sampled { n_negatives },
            ks: vec![5, 10],
            tie: TieRule::Pessimistic,
        }
    }

    pub fn full() -> Self {
        Self {
            kind: ProtocolKind::Full {
                exclude_history: false,
            },
            ks: vec![5, 10, 50],
            tie: TieRule::Pessimistic,
        }
    }

    pub fn describe(&self) -> String {
        match self.kind {
            ProtocolKind::Sampled { n_negatives } => format!("sampled(n={n_negatives})"),
            ProtocolKind::Full { exclude_history } => {
                format!("full(exclude_history={exclude_history})")
            }
        }
    }
}

/// HR and NDCG at each cutoff, as fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub ks: Vec<usize>,
    pub hr: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub instances: usize,
    pub protocol: String,
    /// Content hash of the checkpoint that initialised the model, if any.
    pub checkpoint: Option<String>,
}

impl MetricsReport {
    pub fn hr_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.hr[i])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.ndcg[i])
    }
}

/// Anything that can score the whole catalog for a batch of histories.
pub trait Scorer {
    fn num_items(&self) -> usize;

    /// One row of `num_items` scores per prefix.
    fn score_all(&self, prefixes: &[&[ItemId]]) -> Result<Vec<Vec<f32>>>;
}

/// 1-based rank of `scores[positive]`.
pub fn rank_of_positive(scores: &[f32], positive: usize, tie: TieRule) -> Result<usize> {
    if positive >= scores.len() {
        return Err(Error::OutOfRange {
            what: "positive index",
            index: positive,
            size: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite);
    }
    let sp = scores[positive];
    let mut higher = 0;
    let mut ties = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > sp {
            higher += 1;
        } else if s == sp && i != positive {
            ties += 1;
        }
    }
    Ok(match tie {
        TieRule::Pessimistic => 1 + higher + ties,
        TieRule::Optimistic => 1 + higher,
    })
}

fn check_ranks(ranks: &[usize]) -> Result<()> {
    if ranks.is_empty() {
        return Err(Error::Empty("ranks"));
    }
    if ranks.contains(&0) {
        return Err(Error::invalid("ranks are 1-based"));
    }
    Ok(())
}

pub fn hr_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check_ranks(ranks)?;
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(hits as f64 / ranks.len() as f64)
}

pub fn ndcg_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check_ranks(ranks)?;
    let mut total = 0.0f64;
    for &r in ranks {
        if r <= k {
            total += 1.0 / libm::log2(r as f64 + 1.0);
        }
    }
    Ok(total / ranks.len() as f64)
}

const EVAL_BATCH: usize = 256;

/// Ranks every instance's positive under the protocol and aggregates.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    instances: &[EvalInstance],
    protocol: &EvalProtocol,
) -> Result<MetricsReport> {
    let ranks = ranks(scorer, instances, protocol)?;
    report_from_ranks(&ranks, protocol)
}

pub fn report_from_ranks(ranks: &[usize], protocol: &EvalProtocol) -> Result<MetricsReport> {
    let mut hr = Vec::with_capacity(protocol.ks.len());
    let mut ndcg = Vec::with_capacity(protocol.ks.len());
    for &k in &protocol.ks {
        hr.push(hr_at_k(ranks, k)?);
        ndcg.push(ndcg_at_k(ranks, k)?);
    }
    Ok(MetricsReport {
        ks: protocol.ks.clone(),
        hr,
        ndcg,
        instances: ranks.len(),
        protocol: protocol.describe(),
        checkpoint: None,
    })
}

pub fn ranks<S: Scorer + ?Sized>(
    scorer: &S,
    instances: &[EvalInstance],
    protocol: &EvalProtocol,
) -> Result<Vec<usize>> {
    if instances.is_empty() {
        return Err(Error::Empty("evaluation instances"));
    }
    let n_items = scorer.num_items();
    let candidates = match protocol.kind {
        ProtocolKind::Sampled { n_negatives } => n_negatives + 1,
        ProtocolKind::Full { .. } => n_items,
    };
    if let Some(&k) = protocol.ks.iter().find(|&&k| k == 0 || k > candidates) {
        return Err(Error::invalid(format!(
            "cutoff {k} invalid for {candidates} candidates"
        )));
    }
    let mut out = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(EVAL_BATCH) {
        let prefixes: Vec<&[ItemId]> = chunk.iter().map(|i| i.prefix.as_slice()).collect();
        let scores = scorer.score_all(&prefixes)?;
        for (inst, row) in chunk.iter().zip(scores) {
            if row.len() != n_items {
                return Err(Error::shape(
                    "evaluate",
                    format!("scorer returned {} scores for {n_items} items", row.len()),
                ));
            }
            let rank = match protocol.kind {
                ProtocolKind::Sampled { n_negatives } => {
                    if inst.negatives.len() != n_negatives {
                        return Err(Error::invalid(format!(
                            "instance for user {} carries {} negatives, protocol expects {n_negatives}",
                            inst.user,
                            inst.negatives.len()
                        )));
                    }
                    let mut cand = Vec::with_capacity(n_negatives + 1);
                    cand.push(row[inst.positive as usize]);
                    for &n in &inst.negatives {
                        cand.push(*row.get(n as usize).ok_or(Error::OutOfRange {
                            what: "negative item",
                            index: n as usize,
                            size: n_items,
                        })?);
                    }
                    rank_of_positive(&cand, 0, protocol.tie)?
                }
                ProtocolKind::Full { exclude_history } => {
                    let mut row = row;
                    if exclude_history {
                        for &h in &inst.prefix {
                            if h != inst.positive {
                                row[h as usize] = f32::NEG_INFINITY;
                            }
                        }
                    }
                    rank_of_positive(&row, inst.positive as usize, protocol.tie)?
                }
            };
            out.push(rank);
        }
    }
    Ok(out)
}
