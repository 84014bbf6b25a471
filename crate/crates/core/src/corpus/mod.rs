//! Catalogs, interaction logs, filtering, leave-one-out splits and
//! evaluation candidates.

mod synth;

pub use synth::{generate_synthetic, SynthParams, SyntheticCorpus};

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

pub type ItemId = u32;
pub type UserId = u32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Item {
    /// Ordered `(key, value)` attribute pairs.
    pub attrs: Vec<(String, String)>,
}

/// Items indexed by dense id `0..len`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ItemCatalog {
    items: Vec<Item>,
}

impl ItemCatalog {
    pub fn new(items: Vec<Item>) -> Result<Self> {
        if let Some(i) = items.iter().position(|it| it.attrs.is_empty()) {
            return Err(Error::invalid(format!("item {i} has no attributes")));
        }
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: ItemId) -> Result<&Item> {
        self.items.get(id as usize).ok_or(Error::OutOfRange {
            what: "item id",
            index: id as usize,
            size: self.items.len(),
        })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
}

impl InteractionLog {
    pub fn new(records: Vec<Interaction>, catalog: &ItemCatalog) -> Result<Self> {
        if let Some(r) = records.iter().find(|r| r.item as usize >= catalog.len()) {
            return Err(Error::OutOfRange {
                what: "interaction item id",
                index: r.item as usize,
                size: catalog.len(),
            });
        }
        Ok(Self { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user: UserId,
    pub items: Vec<ItemId>,
}

/// Chronological per-user item sequences over a catalog of `num_items`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceDataset {
    pub users: Vec<UserSequence>,
    pub num_items: usize,
}

impl SequenceDataset {
    pub fn interactions(&self) -> usize {
        self.users.iter().map(|u| u.items.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalInstance {
    pub user: UserId,
    pub prefix: Vec<ItemId>,
    pub positive: ItemId,
    /// Empty under full ranking.
    pub negatives: Vec<ItemId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<UserSequence>,
    pub valid: Vec<EvalInstance>,
    pub test: Vec<EvalInstance>,
    /// Users dropped because their sequence had fewer than three items.
    pub skipped_short: usize,
}

/// Drops users and items below the thresholds until nothing changes, then
/// orders each user's items by timestamp (ties keep log order).
pub fn filter_and_build(
    log: &InteractionLog,
    num_items: usize,
    min_user: usize,
    min_item: usize,
) -> Result<SequenceDataset> {
    let mut alive: Vec<bool> = alloc::vec![true; log.records.len()];
    loop {
        let mut per_user: BTreeMap<UserId, usize> = BTreeMap::new();
        let mut per_item: BTreeMap<ItemId, usize> = BTreeMap::new();
        for (r, _) in log.records.iter().zip(&alive).filter(|(_, a)| **a) {
            *per_user.entry(r.user).or_default() += 1;
            *per_item.entry(r.item).or_default() += 1;
        }
        let mut changed = false;
        for (r, a) in log.records.iter().zip(alive.iter_mut()) {
            if *a && (per_user[&r.user] < min_user || per_item[&r.item] < min_item) {
                *a = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut grouped: BTreeMap<UserId, Vec<(i64, ItemId)>> = BTreeMap::new();
    for (r, _) in log.records.iter().zip(&alive).filter(|(_, a)| **a) {
        grouped.entry(r.user).or_default().push((r.timestamp, r.item));
    }
    if grouped.is_empty() {
        return Err(Error::Empty("dataset after filtering"));
    }
    let users = grouped
        .into_iter()
        .map(|(user, mut events)| {
            events.sort_by_key(|e| e.0);
            UserSequence {
                user,
                items: events.into_iter().map(|e| e.1).collect(),
            }
        })
        .collect();
    Ok(SequenceDataset { users, num_items })
}

/// Last item is the test target, the one before it the validation target,
/// everything earlier is training data.
pub fn leave_one_out(dataset: &SequenceDataset) -> Split {
    let mut split = Split {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        skipped_short: 0,
    };
    for u in &dataset.users {
        let n = u.items.len();
        if n < 3 {
            split.skipped_short += 1;
            continue;
        }
        split.train.push(UserSequence {
            user: u.user,
            items: u.items[..n - 2].to_vec(),
        });
        split.valid.push(EvalInstance {
            user: u.user,
            prefix: u.items[..n - 2].to_vec(),
            positive: u.items[n - 2],
            negatives: Vec::new(),
        });
        split.test.push(EvalInstance {
            user: u.user,
            prefix: u.items[..n - 1].to_vec(),
            positive: u.items[n - 1],
            negatives: Vec::new(),
        });
    }
    split
}

pub fn trained_items(train: &[UserSequence]) -> BTreeSet<ItemId> {
    train.iter().flat_map(|u| u.items.iter().copied()).collect()
}

/// Keeps instances whose positive and every prefix item were seen in training.
pub fn exclude_cold_eval(instances: &[EvalInstance], trained: &BTreeSet<ItemId>) -> Vec<EvalInstance> {
    instances
        .iter()
        .filter(|i| trained.contains(&i.positive) && i.prefix.iter().all(|p| trained.contains(p)))
        .cloned()
        .collect()
}

/// `n` distinct items drawn uniformly from the catalog without the positive.
pub fn sample_negatives(
    instance: &EvalInstance,
    catalog_size: usize,
    n: usize,
    seed: u64,
) -> Result<EvalInstance> {
    if catalog_size == 0 || n > catalog_size - 1 {
        return Err(Error::invalid(format!(
            "cannot draw {n} negatives from a catalog of {catalog_size}"
        )));
    }
    if instance.positive as usize >= catalog_size {
        return Err(Error::OutOfRange {
            what: "positive item",
            index: instance.positive as usize,
            size: catalog_size,
        });
    }
    let mut r = rng::stream(seed, "negatives", instance.user as u64);
    let mut negatives: Vec<ItemId> = rand::seq::index::sample(&mut r, catalog_size - 1, n)
        .into_iter()
        .map(|i| {
            let i = i as ItemId;
            if i >= instance.positive {
                i + 1
            } else {
                i
            }
        })
        .collect();
    negatives.sort_unstable();
    Ok(EvalInstance {
        negatives,
        ..instance.clone()
    })
}

pub fn attach_negatives(
    instances: &[EvalInstance],
    catalog_size: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<EvalInstance>> {
    instances
        .iter()
        .map(|i| sample_negatives(i, catalog_size, n, seed))
        .collect()
}

/// Keeps `floor(fraction * users)` users chosen by a seeded permutation;
/// survivors keep their original order.
pub fn subsample_users(dataset: &SequenceDataset, fraction: f64, seed: u64) -> Result<SequenceDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction {fraction} outside (0, 1]")));
    }
    let n = dataset.users.len();
    let keep = libm::floor(fraction * n as f64) as usize;
    if keep == 0 {
        return Err(Error::Empty("subsample keeps no users"));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, "subsample", 0));
    let mut kept = perm[..keep].to_vec();
    kept.sort_unstable();
    Ok(SequenceDataset {
        users: kept.into_iter().map(|i| dataset.users[i].clone()).collect(),
        num_items: dataset.num_items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn log_of(records: &[(u32, u32, i64)]) -> InteractionLog {
        InteractionLog {
            records: records
                .iter()
                .map(|&(user, item, timestamp)| Interaction {
                    user,
                    item,
                    timestamp,
                })
                .collect(),
        }
    }

    /// Brute-force fixed point: repeatedly rescan from scratch, removing one
    /// violating record at a time.
    fn brute_fixed_point(log: &InteractionLog, mu: usize, mi: usize) -> BTreeSet<(u32, u32, i64)> {
        let mut set: Vec<(u32, u32, i64)> =
            log.records.iter().map(|r| (r.user, r.item, r.timestamp)).collect();
        loop {
            let bad = set.iter().position(|&(u, i, _)| {
                set.iter().filter(|r| r.0 == u).count() < mu
                    || set.iter().filter(|r| r.1 == i).count() < mi
            });
            match bad {
                Some(p) => {
                    set.remove(p);
                }
                None => break,
            }
        }
        set.into_iter().collect()
    }

    #[test]
    fn short_user_removed() {
        let log = log_of(&[(0, 0, 1), (0, 1, 2), (0, 2, 3), (1, 0, 1), (1, 1, 2), (1, 2, 3), (1, 0, 4)]);
        let ds = filter_and_build(&log, 3, 4, 0).unwrap();
        assert_eq!(ds.users.len(), 1);
        assert_eq!(ds.users[0].user, 1);
    }

    #[test]
    fn zero_thresholds_are_identity() {
        let log = log_of(&[(0, 2, 5), (0, 1, 3), (1, 0, 1)]);
        let ds = filter_and_build(&log, 3, 0, 0).unwrap();
        assert_eq!(ds.interactions(), 3);
        assert_eq!(ds.users[0].items, vec![1, 2]);
    }

    #[test]
    fn cascading_filter_matches_brute_force() {
        // Removing item 9 (only 1 interaction) drops user 2 below 3, which
        // then drops item 4 below 2.
        let log = log_of(&[
            (0, 1, 1), (0, 2, 2), (0, 3, 3),
            (1, 1, 1), (1, 2, 2), (1, 3, 3),
            (2, 9, 1), (2, 4, 2), (2, 1, 3),
            (0, 4, 4),
        ]);
        let ds = filter_and_build(&log, 10, 3, 2).unwrap();
        let got: BTreeSet<(u32, u32)> = ds
            .users
            .iter()
            .flat_map(|u| u.items.iter().map(move |&i| (u.user, i)))
            .collect();
        let expect: BTreeSet<(u32, u32)> =
            brute_fixed_point(&log, 3, 2).into_iter().map(|(u, i, _)| (u, i)).collect();
        assert_eq!(got, expect);
        assert!(!got.iter().any(|&(u, _)| u == 2));
    }

    #[test]
    fn empty_after_filter_is_error() {
        let log = log_of(&[(0, 0, 1)]);
        assert!(matches!(filter_and_build(&log, 1, 5, 0), Err(Error::Empty(_))));
    }

    #[test]
    fn ties_keep_log_order() {
        let log = log_of(&[(0, 5, 2), (0, 3, 1), (0, 4, 1)]);
        let ds = filter_and_build(&log, 6, 0, 0).unwrap();
        assert_eq!(ds.users[0].items, vec![3, 4, 5]);
    }

    #[test]
    fn leave_one_out_examples() {
        let ds = SequenceDataset {
            users: vec![
                UserSequence { user: 0, items: vec![10, 11, 12, 13] },
                UserSequence { user: 1, items: vec![20, 21, 22] },
                UserSequence { user: 2, items: vec![30, 31] },
            ],
            num_items: 40,
        };
        let s = leave_one_out(&ds);
        assert_eq!(s.train[0].items, vec![10, 11]);
        assert_eq!((s.valid[0].prefix.clone(), s.valid[0].positive), (vec![10, 11], 12));
        assert_eq!((s.test[0].prefix.clone(), s.test[0].positive), (vec![10, 11, 12], 13));
        assert_eq!(s.train[1].items, vec![20]);
        assert_eq!(s.valid[1].positive, 21);
        assert_eq!(s.test[1].positive, 22);
        assert_eq!(s.skipped_short, 1);
    }

    fn inst(user: u32, prefix: &[u32], positive: u32) -> EvalInstance {
        EvalInstance { user, prefix: prefix.to_vec(), positive, negatives: vec![] }
    }

    #[test]
    fn cold_instances_dropped() {
        let trained: BTreeSet<u32> = [1, 2, 3].into_iter().collect();
        let insts = vec![inst(0, &[1, 2], 3), inst(1, &[1], 7), inst(2, &[9], 1)];
        let kept = exclude_cold_eval(&insts, &trained);
        assert_eq!(kept, vec![insts[0].clone()]);
        assert_eq!(exclude_cold_eval(&kept, &trained), kept);
    }

    #[test]
    fn mixed_instances_match_membership_scan() {
        let trained: BTreeSet<u32> = [0, 2, 4, 6, 8].into_iter().collect();
        let insts: Vec<EvalInstance> = (0..10u32)
            .map(|u| inst(u, &[u % 9, (u * 3) % 9], (u * 7) % 10))
            .collect();
        let kept = exclude_cold_eval(&insts, &trained);
        let mut oracle = Vec::new();
        for i in &insts {
            let mut ok = trained.iter().any(|t| *t == i.positive);
            for p in &i.prefix {
                ok &= trained.iter().any(|t| t == p);
            }
            if ok {
                oracle.push(i.clone());
            }
        }
        assert_eq!(kept, oracle);
    }

    #[test]
    fn forced_complement_and_determinism() {
        let i = inst(3, &[1], 42);
        let s = sample_negatives(&i, 101, 100, 9).unwrap();
        let expect: Vec<u32> = (0..101).filter(|&x| x != 42).collect();
        assert_eq!(s.negatives, expect);
        let a = sample_negatives(&i, 500, 100, 9).unwrap();
        let b = sample_negatives(&i, 500, 100, 9).unwrap();
        assert_eq!(a, b);
        assert!(!a.negatives.contains(&42));
        let distinct: BTreeSet<_> = a.negatives.iter().collect();
        assert_eq!(distinct.len(), 100);
        assert!(sample_negatives(&i, 100, 100, 9).is_err());
    }

    #[test]
    fn subsample_counts_and_identity() {
        let ds = SequenceDataset {
            users: (0..1000).map(|u| UserSequence { user: u, items: vec![1, 2, 3] }).collect(),
            num_items: 4,
        };
        assert_eq!(subsample_users(&ds, 1.0, 1).unwrap(), ds);
        assert_eq!(subsample_users(&ds, 0.1, 1).unwrap().users.len(), 100);
        assert!(subsample_users(&ds, 0.0001, 1).is_err());
        assert!(subsample_users(&ds, 1.5, 1).is_err());
    }
}
