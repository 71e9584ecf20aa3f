use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use paretopic::synthetic::{planted_corpus, PlantedConfig};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_paretopic"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small planted corpus as JSONL, labeled by dominant topic.
fn write_corpus(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = PlantedConfig {
        topics: 3,
        words_per_topic: 10,
        train_docs: 120,
        test_docs: 40,
        min_len: 20,
        max_len: 30,
        ..Default::default()
    };
    let c = planted_corpus(&cfg, 3).unwrap();
    let write = |name: &str, texts: &[String], mixtures: &[Vec<f64>]| {
        let mut out = String::new();
        for (t, m) in texts.iter().zip(mixtures) {
            let label = (0..m.len()).fold(0, |b, k| if m[k] > m[b] { k } else { b });
            out.push_str(&serde_json::json!({"text": t, "label": format!("topic{label}")}).to_string());
            out.push('\n');
        }
        let p = dir.join(name);
        fs::write(&p, out).unwrap();
        p
    };
    (
        write("train.jsonl", &c.train_texts, &c.train_mixtures),
        write("test.jsonl", &c.test_texts, &c.test_mixtures),
    )
}

fn ok(out: Output) -> Output {
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    out
}

struct Pipeline {
    vocab: PathBuf,
    checkpoint: PathBuf,
    topics: PathBuf,
    metrics: PathBuf,
    log: PathBuf,
    features: PathBuf,
}

fn pipeline(dir: &Path, train: &Path, test: &Path, tag: &str) -> Pipeline {
    let p = |name: &str| dir.join(format!("{tag}_{name}"));
    let out = Pipeline {
        vocab: p("vocab.json"),
        checkpoint: p("model.json"),
        topics: p("topics.txt"),
        metrics: p("metrics.json"),
        log: p("log.jsonl"),
        features: p("features.csv"),
    };
    let cache = p("cache.jsonl");
    ok(run(&["build-vocab", "--corpus", s(train), "-o", s(&out.vocab), "--min-df", "1", "--max-df-frac", "1.0"]));
    ok(run(&["augment", "--corpus", s(train), "--vocab", s(&out.vocab), "-o", s(&cache), "--mode", "tfidf", "--seed", "5"]));
    ok(run(&[
        "train", "--corpus", s(train), "--vocab", s(&out.vocab), "--cache", s(&cache), "-o", s(&out.checkpoint),
        "--log", s(&out.log), "--seed", "9", "--set", "model.T=3", "--set", "model.H=8", "--set", "train.batch_size=40",
        "--set", "train.epochs=3", "--set", "train.optimizer=adam",
    ]));
    ok(run(&["topics", "--checkpoint", s(&out.checkpoint), "--vocab", s(&out.vocab), "-o", s(&out.topics), "-n", "5"]));
    ok(run(&["eval", "--topics", s(&out.topics), "--vocab", s(&out.vocab), "--reference", s(test), "-o", s(&out.metrics)]));
    ok(run(&["classify", "--checkpoint", s(&out.checkpoint), "--vocab", s(&out.vocab), "--corpus", s(test), "-o", s(&out.features)]));
    out
}

#[test]
fn selftest_exits_zero() {
    let out = run(&["selftest"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn set_size_above_batch_size_is_usage_error() {
    let out = run(&[
        "train", "--corpus", "c.jsonl", "--vocab", "v.json", "--cache", "a.jsonl", "-o", "m.json", "--seed", "1",
        "--set", "setcl.K=8", "--set", "train.batch_size=4",
    ]);
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    assert!(err.contains("K=8") && err.contains("B=4"), "{err}");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&run(&["no-such-command"])), 1);
    assert_eq!(code(&run(&["selftest", "--unknown-flag"])), 1);
    assert_eq!(code(&run(&["train", "--corpus", "c", "--vocab", "v", "--cache", "a", "-o", "m"])), 1, "missing seed");
    assert_eq!(code(&run(&["train", "--corpus", "c", "--vocab", "v", "--cache", "a", "-o", "m", "--seed", "1", "--set", "no.such=1"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
}

#[test]
fn help_lists_every_config_key() {
    let out = ok(run(&["train", "--help"]));
    let text = String::from_utf8_lossy(&out.stdout);
    for (key, _, _) in paretopic::trainer::CONFIG_KEYS {
        assert!(text.contains(key), "{key} missing from help");
    }
    assert!(text.contains("default 0.002"));
    let classify = ok(run(&["classify", "--help"]));
    assert!(String::from_utf8_lossy(&classify.stdout).contains("Random Forest"));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = write_corpus(dir.path());
    let vocab = dir.path().join("vocab.json");
    ok(run(&["build-vocab", "--corpus", s(&train), "-o", s(&vocab), "--min-df", "1", "--max-df-frac", "1.0"]));

    let topics = dir.path().join("topics.txt");
    fs::write(&topics, "t0w000 t0w001\nt1w000 notaword\n").unwrap();
    let out = run(&["eval", "--topics", s(&topics), "--vocab", s(&vocab), "--reference", s(&test)]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("notaword"));

    let missing = dir.path().join("missing.jsonl");
    assert_eq!(code(&run(&["build-vocab", "--corpus", s(&missing), "-o", s(&vocab)])), 2);

    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "not json\n{\"text\": \"a\"}\n").unwrap();
    assert_eq!(code(&run(&["build-vocab", "--corpus", s(&bad), "-o", s(&vocab)])), 2);
}

#[test]
fn pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = write_corpus(dir.path());
    let a = pipeline(dir.path(), &train, &test, "a");
    let b = pipeline(dir.path(), &train, &test, "b");
    for (x, y) in [
        (&a.vocab, &b.vocab),
        (&a.checkpoint, &b.checkpoint),
        (&a.topics, &b.topics),
        (&a.metrics, &b.metrics),
        (&a.log, &b.log),
        (&a.features, &b.features),
    ] {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{} differs", x.display());
    }
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(&a.metrics).unwrap()).unwrap();
    assert_eq!(metrics["num_topics"], 3);
    assert!(metrics["td"].as_f64().unwrap() > 0.0);
    let topics = fs::read_to_string(&a.topics).unwrap();
    assert_eq!(topics.lines().count(), 3);
    assert!(topics.lines().all(|l| l.split(' ').count() == 5));
    let header = fs::read_to_string(&a.features).unwrap();
    assert!(header.starts_with("theta_0,theta_1,theta_2,label\n"));
    // 120 docs / B=40 = 3 steps per epoch
    assert_eq!(fs::read_to_string(&a.log).unwrap().lines().count(), 9);

    let align = ok(run(&["align", "--vocab", s(&a.vocab), "--a", s(&a.checkpoint), "--b", s(&b.checkpoint)]));
    let report: serde_json::Value = serde_json::from_slice(&align.stdout).unwrap();
    let matched = report["matched"].as_array().unwrap();
    assert_eq!(matched.len(), 3);
    assert!(matched.iter().all(|m| m["a"] == m["b"] && m["js"].as_f64().unwrap() == 0.0));

    let probe = ok(run(&["probe", "--checkpoint", s(&a.checkpoint), "--vocab", s(&a.vocab), "t0w001 t0w002", "t0w001 t0w002"]));
    let sim: f64 = String::from_utf8_lossy(&probe.stdout).trim().parse().unwrap();
    assert!((sim - 1.0).abs() < 1e-6);
    let empty = run(&["probe", "--checkpoint", s(&a.checkpoint), "--vocab", s(&a.vocab), "zzz", "t0w001"]);
    assert_eq!(code(&empty), 2);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = write_corpus(dir.path());
    let vocab = dir.path().join("vocab.json");
    let cache = dir.path().join("cache.jsonl");
    ok(run(&["build-vocab", "--corpus", s(&train), "-o", s(&vocab), "--min-df", "1", "--max-df-frac", "1.0"]));
    ok(run(&["augment", "--corpus", s(&train), "--vocab", s(&vocab), "-o", s(&cache), "--mode", "dropout"]));
    let config = dir.path().join("train.cfg");
    fs::write(&config, "# small run\nmodel.T=3\nmodel.H=8\ntrain.batch_size=40\ntrain.epochs=4\ntrain.seed=2\n").unwrap();
    let train_to = |out: &Path, epochs: &str, resume: Option<&Path>| {
        let mut args = vec![
            "train", "--corpus", s(&train), "--vocab", s(&vocab), "--cache", s(&cache), "-o", s(out), "--config",
            s(&config), "--set",
        ];
        let set = format!("train.epochs={epochs}");
        args.push(&set);
        if let Some(r) = resume {
            args.extend(["--resume", s(r)]);
        }
        ok(run(&args))
    };
    let full = dir.path().join("full.json");
    let part = dir.path().join("part.json");
    train_to(&full, "4", None);
    train_to(&part, "2", None);
    train_to(&part, "4", Some(&part.clone()));
    assert_eq!(fs::read(&full).unwrap(), fs::read(&part).unwrap());

    // wrong vocabulary hash is a data error
    let other_vocab = dir.path().join("other.json");
    ok(run(&["build-vocab", "--corpus", s(&train), "-o", s(&other_vocab), "--min-df", "1", "--max-size", "20"]));
    let out = run(&["topics", "--checkpoint", s(&full), "--vocab", s(&other_vocab), "-o", s(&dir.path().join("t.txt"))]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn llm_mode_against_unreachable_endpoint_fails_at_runtime() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = write_corpus(dir.path());
    let vocab = dir.path().join("vocab.json");
    ok(run(&["build-vocab", "--corpus", s(&train), "-o", s(&vocab), "--min-df", "1", "--max-df-frac", "1.0"]));
    let out = run(&[
        "augment", "--corpus", s(&train), "--vocab", s(&vocab), "-o", s(&dir.path().join("c.jsonl")), "--mode", "llm",
        "--endpoint", "http://127.0.0.1:9/v1", "--max-attempts", "1", "--timeout-secs", "2",
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}
