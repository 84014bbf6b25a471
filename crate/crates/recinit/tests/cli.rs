use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Parser;
use recinit::cli::{raw_config, run, Cli, Outcome};
use recinit::config::{resolve, validate, RawConfig};
use recinit::Error;

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/tiny.cfg")
}

fn cmd(out: &Path, args: &[&str]) -> recinit::Result<Outcome> {
    let tiny = tiny();
    let mut v = vec!["recinit", "--config", tiny.to_str().unwrap(), "--out", out.to_str().unwrap()];
    v.extend_from_slice(args);
    run(v)
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect()
}

fn report(o: &Outcome) -> String {
    let p = &o.artifacts.last().unwrap().path;
    assert!(p.file_name().unwrap().to_string_lossy().contains("-report-"));
    std::fs::read_to_string(p).unwrap()
}

fn records<'a>(report: &'a str, kind: &str) -> Vec<&'a str> {
    report.lines().filter(|l| l.split('\t').next() == Some(kind)).collect()
}

#[test]
fn synth_writes_catalog_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let o = cmd(dir.path(), &["synth"]).unwrap();
    let names: Vec<String> = o.artifacts.iter().map(|a| a.file_name()).collect();
    for prefix in ["catalog-", "interactions-", "pretrain-catalog-", "pretrain-interactions-"] {
        assert!(names.iter().any(|n| n.starts_with(prefix)), "{prefix} missing from {names:?}");
    }
    // the written TSVs ingest back into the same corpus
    let cat = o.artifacts.iter().find(|a| a.file_name().starts_with("catalog-")).unwrap();
    let log = o.artifacts.iter().find(|a| a.file_name().starts_with("interactions-")).unwrap();
    let again = cmd(
        dir.path(),
        &[
            "ingest",
            "--set",
            "data.source=tsv",
            "--set",
            &format!("data.catalog={}", cat.path.display()),
            "--set",
            &format!("data.interactions={}", log.path.display()),
        ],
    )
    .unwrap();
    let synth_ingest = cmd(dir.path(), &["ingest"]).unwrap();
    let ds = |o: &Outcome| std::fs::read(&o.artifacts.iter().find(|a| a.file_name().starts_with("dataset-")).unwrap().path).unwrap();
    assert_eq!(ds(&again), ds(&synth_ingest));
}

#[test]
fn run_matrix_with_two_variants_has_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = cmd(dir.path(), &["run-matrix"]).unwrap();
    let r = report(&o);
    assert_eq!(records(&r, "metrics").len(), 2, "{r}");
    let improv = records(&r, "improv");
    assert!(improv[0].contains("improv.ndcg@10=0"), "{r}");
    let tsv = o.artifacts.iter().find(|a| a.file_name().starts_with("matrix-metrics-")).unwrap();
    // two variants, two metrics, two cutoffs, plus the header
    assert_eq!(std::fs::read_to_string(&tsv.path).unwrap().lines().count(), 9);
}

#[test]
fn ablation_writes_one_checkpoint_and_row_per_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let o = cmd(
        dir.path(),
        &[
            "pretrain-size-ablation",
            "--set",
            "ablation.fractions=0.01,0.1,1.0",
            "--set",
            "pretrain_data.synth.users=300",
        ],
    )
    .unwrap();
    let ckpts = o.artifacts.iter().filter(|a| a.file_name().starts_with("encoder-pt-f")).count();
    assert_eq!(ckpts, 3);
    assert_eq!(records(&report(&o), "ablation").len(), 3);
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [a.path(), b.path()] {
        for c in ["ingest", "pretrain", "ft1", "ft2", "run-matrix", "probe-attention", "sweep-layers"] {
            cmd(dir, &[c]).unwrap();
        }
    }
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert!(fa.len() >= 20, "{:?}", fa.keys());
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (name, bytes) in &fa {
        assert!(bytes == &fb[name], "{name} differs");
    }
    // and rerunning into the same directory leaves the bytes unchanged
    cmd(a.path(), &["pretrain"]).unwrap();
    assert_eq!(files(a.path()), fa);
}

#[test]
fn saved_model_reevaluates_to_the_reported_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let o = cmd(dir.path(), &["run-variant", "--variant", "PT-freeze"]).unwrap();
    let model = o.artifacts.iter().find(|a| a.file_name().starts_with("model-PT-freeze-")).unwrap();
    let e = cmd(dir.path(), &["eval", "--set", &format!("eval.model={}", model.path.display())]).unwrap();
    let field = |r: &str| {
        let m = records(r, "metrics")[0];
        m.split('\t').filter(|f| f.starts_with("hr@") || f.starts_with("ndcg@") || f.starts_with("checkpoint=")).map(str::to_string).collect::<Vec<_>>()
    };
    assert_eq!(field(&report(&o)), field(&report(&e)));
}

#[test]
fn usage_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(run(["recinit", "teleport"]), Err(Error::Usage(_))));
    match cmd(dir.path(), &["run-variant", "--variant", "nope"]) {
        Err(Error::Usage(m)) => assert!(m.contains("random-trainable"), "{m}"),
        other => panic!("{other:?}"),
    }
    match cmd(dir.path(), &["validate", "--set", "backbone.dim=16"]) {
        Err(Error::Config(v)) => {
            assert_eq!(v.len(), 1, "{v:?}");
            assert_eq!(v[0].field, "backbone.dim");
        }
        other => panic!("{other:?}"),
    }
    match run(["recinit", "validate", "--set", "encoder.layers=3"]) {
        Err(Error::Config(v)) => assert_eq!(v.iter().map(|v| v.field.as_str()).collect::<Vec<_>>(), ["seed"]),
        other => panic!("{other:?}"),
    }
    let missing = dir.path().join("absent.ckpt");
    match cmd(dir.path(), &["eval", "--set", &format!("eval.model={}", missing.display())]) {
        Err(Error::Config(v)) => assert_eq!(v[0].field, "eval.model"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn flags_override_file_and_environment() {
    let cfg = tiny();
    let base = ["recinit", "--config", cfg.to_str().unwrap()];
    let parse = |extra: &[&str], env: Option<&str>| {
        let mut v = base.to_vec();
        v.extend_from_slice(extra);
        v.push("validate");
        let raw = raw_config(&Cli::parse_from(v), env.map(str::to_string)).unwrap();
        resolve(&raw).unwrap()
    };
    let c = parse(&[], None);
    assert_eq!((c.seed, c.out), (7, None));
    assert_eq!(parse(&[], Some("/env")).out, Some(PathBuf::from("/env")));
    let c = parse(&["--set", "seed=8", "--set", "out=/set"], Some("/env"));
    assert_eq!((c.seed, c.out), (8, Some(PathBuf::from("/set"))));
    let c = parse(&["--set", "seed=8", "--seed", "9", "--out", "/flag"], Some("/env"));
    assert_eq!((c.seed, c.out), (9, Some(PathBuf::from("/flag"))));

    // a file that names its own output beats the environment
    let raw = RawConfig::parse("seed = 1\nout = /file\n", "c", None).unwrap();
    assert!(validate(&raw).is_empty());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.cfg");
    std::fs::write(&p, "seed = 1\nout = /file\n").unwrap();
    let raw = raw_config(&Cli::parse_from(["recinit", "--config", p.to_str().unwrap(), "validate"]), Some("/env".into())).unwrap();
    assert_eq!(resolve(&raw).unwrap().out, Some(PathBuf::from("/file")));
}

#[test]
fn config_file_parse_error_names_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.cfg");
    std::fs::write(&p, "seed = 1\n\nencoder.layers 3\n").unwrap();
    let e = run(["recinit", "--config", p.to_str().unwrap(), "validate"]).unwrap_err();
    assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
}
