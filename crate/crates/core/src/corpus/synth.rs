use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use super::{Interaction, InteractionLog, Item, ItemCatalog, ItemId};
use crate::error::{Error, Result};
use crate::rng;

/// Knobs of the clustered synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub clusters: usize,
    pub items_per_cluster: usize,
    pub users: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub intra_cluster_prob: f64,
    pub vocab_per_cluster: usize,
    /// Size of the vocabulary shared by every cluster.
    pub shared_vocab: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            clusters: 8,
            items_per_cluster: 50,
            users: 2000,
            min_len: 5,
            max_len: 10,
            intra_cluster_prob: 0.8,
            vocab_per_cluster: 24,
            shared_vocab: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub catalog: ItemCatalog,
    pub log: InteractionLog,
    /// Cluster of each item.
    pub item_cluster: Vec<usize>,
}

fn cluster_word(c: usize, w: usize) -> String {
    format!("c{c}w{w}")
}

fn shared_word(w: usize) -> String {
    format!("s{w}")
}

/// Items carry a title of two cluster words plus one shared word, a brand
/// word from the cluster vocabulary and a shared category word. Each user
/// walks a cluster-level Markov chain: stay with `intra_cluster_prob`, else
/// jump uniformly to another cluster, then pick an item uniformly inside the
/// current cluster.
pub fn generate_synthetic(p: &SynthParams) -> Result<SyntheticCorpus> {
    if !(0.0..=1.0).contains(&p.intra_cluster_prob) {
        return Err(Error::invalid(format!(
            "intra_cluster_prob {} outside [0, 1]",
            p.intra_cluster_prob
        )));
    }
    if p.clusters == 0 || p.items_per_cluster == 0 || p.vocab_per_cluster == 0 || p.shared_vocab == 0 {
        return Err(Error::invalid("clusters, items and vocabularies must be positive"));
    }
    if p.min_len == 0 || p.min_len > p.max_len {
        return Err(Error::invalid(format!(
            "sequence length range [{}, {}] is empty",
            p.min_len, p.max_len
        )));
    }
    let mut r = rng::stream(p.seed, "synth-items", 0);
    let n_items = p.clusters * p.items_per_cluster;
    let mut items = Vec::with_capacity(n_items);
    let mut item_cluster = Vec::with_capacity(n_items);
    for i in 0..n_items {
        let c = i / p.items_per_cluster;
        let w1 = r.random_range(0..p.vocab_per_cluster);
        let w2 = r.random_range(0..p.vocab_per_cluster);
        let s1 = r.random_range(0..p.shared_vocab);
        let brand = r.random_range(0..p.vocab_per_cluster);
        let category = r.random_range(0..p.shared_vocab);
        items.push(Item {
            attrs: alloc::vec![
                (
                    String::from("title"),
                    format!("{} {} {}", cluster_word(c, w1), shared_word(s1), cluster_word(c, w2)),
                ),
                (String::from("brand"), cluster_word(c, brand)),
                (String::from("category"), shared_word(category)),
            ],
        });
        item_cluster.push(c);
    }
    let catalog = ItemCatalog::new(items)?;

    let mut records = Vec::new();
    for u in 0..p.users {
        let mut r = rng::stream(p.seed, "synth-user", u as u64);
        let len = r.random_range(p.min_len..=p.max_len);
        let mut cluster = r.random_range(0..p.clusters);
        let mut seen: Vec<ItemId> = Vec::with_capacity(len);
        for step in 0..len {
            if step > 0 && p.clusters > 1 && !r.random_bool(p.intra_cluster_prob) {
                let other = r.random_range(0..p.clusters - 1);
                cluster = if other >= cluster { other + 1 } else { other };
            }
            // avoid repeating an item within one user when the cluster allows it
            let mut item = 0;
            for _ in 0..8 {
                item = (cluster * p.items_per_cluster + r.random_range(0..p.items_per_cluster)) as ItemId;
                if !seen.contains(&item) {
                    break;
                }
            }
            seen.push(item);
            records.push(Interaction {
                user: u as u32,
                item,
                timestamp: step as i64,
            });
        }
    }
    let log = InteractionLog::new(records, &catalog)?;
    Ok(SyntheticCorpus {
        catalog,
        log,
        item_cluster,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::filter_and_build;

    fn small(p: f64, seed: u64) -> SynthParams {
        SynthParams {
            clusters: 4,
            items_per_cluster: 10,
            users: 400,
            min_len: 6,
            max_len: 10,
            intra_cluster_prob: p,
            vocab_per_cluster: 8,
            shared_vocab: 4,
            seed,
        }
    }

    #[test]
    fn full_stickiness_stays_in_one_cluster() {
        let c = generate_synthetic(&small(1.0, 3)).unwrap();
        let ds = filter_and_build(&c.log, c.catalog.len(), 0, 0).unwrap();
        for u in &ds.users {
            let first = c.item_cluster[u.items[0] as usize];
            assert!(u.items.iter().all(|&i| c.item_cluster[i as usize] == first));
        }
    }

    #[test]
    fn stickiness_one_over_k_gives_uniform_transitions() {
        let p = small(0.25, 5);
        let c = generate_synthetic(&SynthParams { users: 4000, ..p }).unwrap();
        let ds = filter_and_build(&c.log, c.catalog.len(), 0, 0).unwrap();
        let mut counts = [[0usize; 4]; 4];
        for u in &ds.users {
            for w in u.items.windows(2) {
                counts[c.item_cluster[w[0] as usize]][c.item_cluster[w[1] as usize]] += 1;
            }
        }
        for row in counts {
            let total: usize = row.iter().sum();
            for cnt in row {
                let f = cnt as f64 / total as f64;
                // binomial 4-sigma band around 1/4
                let sigma = (0.25 * 0.75 / total as f64).sqrt();
                assert!((f - 0.25).abs() < 4.0 * sigma, "{f} vs 0.25 (n={total})");
            }
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        assert_eq!(generate_synthetic(&small(0.8, 1)).unwrap(), generate_synthetic(&small(0.8, 1)).unwrap());
        assert_ne!(generate_synthetic(&small(0.8, 1)).unwrap(), generate_synthetic(&small(0.8, 2)).unwrap());
    }

    #[test]
    fn invalid_probability_rejected() {
        assert!(generate_synthetic(&small(1.5, 1)).is_err());
        assert!(generate_synthetic(&small(-0.1, 1)).is_err());
    }
}
