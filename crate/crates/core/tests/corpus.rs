use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recinit_core::corpus::{
    exclude_cold_eval, filter_and_build, generate_synthetic, leave_one_out, sample_negatives,
    subsample_users, trained_items, EvalInstance, Interaction, InteractionLog, Item, ItemCatalog,
    SynthParams,
};

fn catalog(n: usize) -> ItemCatalog {
    ItemCatalog::new(
        (0..n)
            .map(|i| Item {
                attrs: vec![("title".into(), format!("item {i}"))],
            })
            .collect(),
    )
    .unwrap()
}

/// Random log with heavy-tailed user and item activity so the iterative
/// filter has work to do.
fn random_log(users: u32, items: usize, seed: u64) -> (ItemCatalog, InteractionLog) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cat = catalog(items);
    let mut recs = Vec::new();
    for u in 0..users {
        let len = if rng.random_bool(0.3) { rng.random_range(1..5) } else { rng.random_range(5..15) };
        for _ in 0..len {
            let skew: f64 = rng.random();
            let item = ((skew * skew) * items as f64) as u32;
            recs.push(Interaction {
                user: u,
                item: item.min(items as u32 - 1),
                timestamp: rng.random_range(0..1_000_000),
            });
        }
    }
    let log = InteractionLog::new(recs, &cat).unwrap();
    (cat, log)
}

#[test]
fn five_five_filter_postconditions() {
    let (cat, log) = random_log(1000, 300, 1);
    let ds = filter_and_build(&log, cat.len(), 5, 5).unwrap();
    let mut per_item: BTreeMap<u32, usize> = BTreeMap::new();
    for u in &ds.users {
        assert!(u.items.len() >= 5, "user {} has {}", u.user, u.items.len());
        for &i in &u.items {
            *per_item.entry(i).or_default() += 1;
        }
    }
    assert!(per_item.values().all(|&c| c >= 5));
    // sequences are chronological: timestamps of the surviving records of
    // each user, sorted, give the same item order
    let users: BTreeSet<u32> = ds.users.iter().map(|u| u.user).collect();
    let items: BTreeSet<u32> = per_item.keys().copied().collect();
    for u in &ds.users {
        let mut ev: Vec<(i64, u32)> = log
            .records
            .iter()
            .filter(|r| r.user == u.user && items.contains(&r.item))
            .map(|r| (r.timestamp, r.item))
            .collect();
        ev.sort_by_key(|e| e.0);
        assert_eq!(ev.iter().map(|e| e.1).collect::<Vec<_>>(), u.items);
    }
    // the heavy tail guarantees the filter had something to remove
    assert!(users.len() < 1000);
}

#[test]
fn leave_one_out_disjoint_and_reconstructs() {
    let s = generate_synthetic(&SynthParams {
        users: 1000,
        min_len: 1,
        max_len: 12,
        seed: 4,
        ..SynthParams::default()
    })
    .unwrap();
    let ds = filter_and_build(&s.log, s.catalog.len(), 1, 1).unwrap();
    let split = leave_one_out(&ds);
    let short = ds.users.iter().filter(|u| u.items.len() < 3).count();
    assert_eq!(split.skipped_short, short);
    assert_eq!(split.train.len(), ds.users.len() - short);
    let full: BTreeMap<u32, &Vec<u32>> = ds.users.iter().map(|u| (u.user, &u.items)).collect();
    for ((tr, va), te) in split.train.iter().zip(&split.valid).zip(&split.test) {
        assert!(tr.user == va.user && va.user == te.user);
        let mut rebuilt = tr.items.clone();
        rebuilt.push(va.positive);
        rebuilt.push(te.positive);
        assert_eq!(&rebuilt, full[&tr.user]);
        assert_eq!(va.prefix, tr.items);
        assert_eq!(te.prefix[..te.prefix.len() - 1], tr.items[..]);
        assert_eq!(*te.prefix.last().unwrap(), va.positive);
        // training never sees the held-out positions
        assert_eq!(tr.items.len() + 2, full[&tr.user].len());
    }
}

#[test]
fn cold_exclusion_is_idempotent() {
    let (cat, log) = random_log(400, 3000, 7);
    let ds = filter_and_build(&log, cat.len(), 3, 1).unwrap();
    let split = leave_one_out(&ds);
    let trained = trained_items(&split.train);
    let once = exclude_cold_eval(&split.test, &trained);
    let twice = exclude_cold_eval(&once, &trained);
    assert_eq!(once, twice);
    assert!(once.iter().all(|i| trained.contains(&i.positive)));
    assert!(once.len() < split.test.len());
}

#[test]
fn negatives_distinct_exclude_positive_and_are_uniform() {
    let n_items = 50usize;
    let mut counts = vec![0usize; n_items];
    let draws = 4000;
    for u in 0..draws {
        let inst = EvalInstance {
            user: u,
            prefix: vec![1],
            positive: 7,
            negatives: vec![],
        };
        let s = sample_negatives(&inst, n_items, 10, 3).unwrap();
        let set: BTreeSet<u32> = s.negatives.iter().copied().collect();
        assert_eq!(set.len(), 10);
        assert!(!set.contains(&7));
        for &x in &s.negatives {
            counts[x as usize] += 1;
        }
    }
    // chi-square over the 49 eligible items, 48 degrees of freedom; the
    // 0.999 quantile is about 84.0
    let expect = draws as f64 * 10.0 / 49.0;
    let chi2: f64 = counts
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != 7)
        .map(|(_, &c)| (c as f64 - expect).powi(2) / expect)
        .sum();
    assert!(chi2 < 84.0, "chi2 {chi2}");
    assert_eq!(counts[7], 0);
}

#[test]
fn negatives_are_frozen_by_seed() {
    let inst = EvalInstance {
        user: 3,
        prefix: vec![],
        positive: 0,
        negatives: vec![],
    };
    let a = sample_negatives(&inst, 100, 20, 9).unwrap();
    assert_eq!(a, sample_negatives(&inst, 100, 20, 9).unwrap());
    assert_ne!(a, sample_negatives(&inst, 100, 20, 10).unwrap());
    assert!(sample_negatives(&inst, 10, 10, 1).is_err());
}

#[test]
fn subsampling_keeps_floor_fraction_in_order() {
    let s = generate_synthetic(&SynthParams {
        users: 101,
        ..SynthParams::default()
    })
    .unwrap();
    let ds = filter_and_build(&s.log, s.catalog.len(), 1, 1).unwrap();
    let sub = subsample_users(&ds, 0.5, 2).unwrap();
    assert_eq!(sub.users.len(), ds.users.len() / 2);
    assert!(sub.users.windows(2).all(|w| w[0].user < w[1].user));
    assert!(subsample_users(&ds, 0.0, 2).is_err());
    assert_eq!(subsample_users(&ds, 1.0, 2).unwrap(), ds);
}

#[test]
fn synthetic_corpus_is_seeded() {
    let p = SynthParams::default();
    let a = generate_synthetic(&p).unwrap();
    let b = generate_synthetic(&p).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.catalog.len(), 400);
    let c = generate_synthetic(&SynthParams { seed: 1, ..p }).unwrap();
    assert_ne!(a.log, c.log);
}
