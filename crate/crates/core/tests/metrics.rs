use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recinit_core::corpus::{EvalInstance, ItemId};
use recinit_core::eval::{
    evaluate, hr_at_k, ndcg_at_k, rank_of_positive, EvalProtocol, ProtocolKind, Scorer, TieRule,
};
use recinit_core::seqmodels::{BackboneConfig, EmbeddingTable, SeqModel};
use recinit_core::Result;

/// Sort-based oracle: place the positive after every candidate with an equal
/// or higher score, then read off its 1-based position.
fn oracle_rank(scores: &[f32], positive: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then_with(|| (a == positive).cmp(&(b == positive)))
    });
    order.iter().position(|&i| i == positive).unwrap() + 1
}

fn oracle_metrics(ranks: &[usize], k: usize) -> (f64, f64) {
    let mut hits = 0usize;
    let mut gain = 0.0f64;
    for &r in ranks {
        if r <= k {
            hits += 1;
            gain += 1.0 / ((r + 1) as f64).log2();
        }
    }
    (hits as f64 / ranks.len() as f64, gain / ranks.len() as f64)
}

#[test]
fn worked_values() {
    assert_eq!(hr_at_k(&[1, 3, 12], 10).unwrap(), 2.0 / 3.0);
    assert_eq!(ndcg_at_k(&[1, 3, 12], 10).unwrap(), 0.5);
    assert_eq!(ndcg_at_k(&[3], 5).unwrap(), 0.5);
}

#[test]
fn random_vectors_match_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut ranks = Vec::new();
    for _ in 0..1000 {
        let n = rng.random_range(2..120);
        // coarse grid so ties are common
        let scores: Vec<f32> = (0..n).map(|_| rng.random_range(0..12) as f32 * 0.25).collect();
        let pos = rng.random_range(0..n);
        let r = rank_of_positive(&scores, pos, TieRule::Pessimistic).unwrap();
        assert_eq!(r, oracle_rank(&scores, pos));
        ranks.push(r);
    }
    for k in [1, 5, 10, 20, 50] {
        let (hr, ndcg) = oracle_metrics(&ranks, k);
        assert_eq!(hr_at_k(&ranks, k).unwrap(), hr);
        assert_eq!(ndcg_at_k(&ranks, k).unwrap(), ndcg);
    }
}

#[test]
fn optimistic_ignores_ties() {
    assert_eq!(rank_of_positive(&[1.0, 1.0, 1.0], 1, TieRule::Optimistic).unwrap(), 1);
    assert_eq!(rank_of_positive(&[1.0, 1.0, 1.0], 1, TieRule::Pessimistic).unwrap(), 3);
    assert!(rank_of_positive(&[f32::NAN, 1.0], 1, TieRule::Pessimistic).is_err());
}

/// Scores from a fixed hash of (history length, last item, candidate), with
/// deliberate ties.
struct HashScorer {
    n: usize,
}

impl Scorer for HashScorer {
    fn num_items(&self) -> usize {
        self.n
    }
    fn score_all(&self, prefixes: &[&[ItemId]]) -> Result<Vec<Vec<f32>>> {
        Ok(prefixes
            .iter()
            .map(|p| {
                let last = *p.last().unwrap_or(&0) as u64;
                (0..self.n as u64)
                    .map(|c| ((c * 2654435761 + last * 40503 + p.len() as u64) % 7) as f32)
                    .collect()
            })
            .collect())
    }
}

fn instances(n_items: usize, count: usize, seed: u64) -> Vec<EvalInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|u| {
            let len = rng.random_range(1..6);
            EvalInstance {
                user: u as u32,
                prefix: (0..len).map(|_| rng.random_range(0..n_items as u32)).collect(),
                positive: rng.random_range(0..n_items as u32),
                negatives: Vec::new(),
            }
        })
        .collect()
}

fn all_but_positive(insts: &[EvalInstance], n: usize) -> Vec<EvalInstance> {
    insts
        .iter()
        .map(|i| EvalInstance {
            negatives: (0..n as u32).filter(|&c| c != i.positive).collect(),
            ..i.clone()
        })
        .collect()
}

#[test]
fn sampled_with_whole_catalog_equals_full_ranking() {
    let n = 60;
    let insts = instances(n, 300, 3);
    let full = EvalProtocol::full();
    let sampled = EvalProtocol {
        kind: ProtocolKind::Sampled { n_negatives: n - 1 },
        ..full.clone()
    };
    let scorer = HashScorer { n };
    let a = evaluate(&scorer, &insts, &full).unwrap();
    let b = evaluate(&scorer, &all_but_positive(&insts, n), &sampled).unwrap();
    assert_eq!(a.hr, b.hr);
    assert_eq!(a.ndcg, b.ndcg);

    let model = SeqModel::new(BackboneConfig::sasrec(16), EmbeddingTable::random(n, 16, 1), 2).unwrap();
    let a = evaluate(&model, &insts, &full).unwrap();
    let b = evaluate(&model, &all_but_positive(&insts, n), &sampled).unwrap();
    assert_eq!((a.hr, a.ndcg), (b.hr, b.ndcg));
}

/// Scores independent of the candidate's identity: uniform random.
struct NoiseScorer {
    n: usize,
    seed: u64,
}

impl Scorer for NoiseScorer {
    fn num_items(&self) -> usize {
        self.n
    }
    fn score_all(&self, prefixes: &[&[ItemId]]) -> Result<Vec<Vec<f32>>> {
        Ok(prefixes
            .iter()
            .map(|p| {
                let mut r = ChaCha8Rng::seed_from_u64(self.seed ^ (p.iter().map(|&x| x as u64).sum::<u64>() << 8) ^ p.len() as u64);
                (0..self.n).map(|_| r.random::<f32>()).collect()
            })
            .collect())
    }
}

#[test]
fn random_scorer_hits_at_chance() {
    let n = 500;
    let insts = recinit_core::corpus::attach_negatives(&instances(n, 4000, 9), n, 100, 5).unwrap();
    let rep = evaluate(&NoiseScorer { n, seed: 17 }, &insts, &EvalProtocol::sampled(100)).unwrap();
    let hr = rep.hr_at(10).unwrap();
    // binomial sd at p = 10/101, n = 4000 is about 0.0047
    assert!((hr - 10.0 / 101.0).abs() < 0.02, "hr@10 {hr}");
}

#[test]
fn protocol_rejects_bad_cutoffs_and_counts() {
    let n = 20;
    let insts = instances(n, 5, 1);
    assert!(evaluate(&HashScorer { n }, &insts, &EvalProtocol::full()).is_err()); // k = 50 > 20
    let wrong = recinit_core::corpus::attach_negatives(&insts, n, 8, 1).unwrap();
    assert!(evaluate(&HashScorer { n }, &wrong, &EvalProtocol::sampled(9)).is_err());
}
