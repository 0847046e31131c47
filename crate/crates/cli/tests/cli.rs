use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rosepo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rosepo"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = rosepo(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// A small synthetic dataset prepared into `data/`.
fn fixture(dir: &Path) {
    ok(dir, &["synth", "--n-users", "200", "--n-items", "100", "--emb-dim", "16", "--seed", "2", "--out", "syn"]);
    ok(
        dir,
        &[
            "prepare",
            "--interactions",
            "syn/interactions.tsv",
            "--items",
            "syn/items.tsv",
            "--embeddings",
            "syn/embeddings.tsv",
            "--seed",
            "2",
            "--out",
            "data",
        ],
    );
}

fn sft(dir: &Path, run: &str, seed: &str) {
    ok(
        dir,
        &["train-sft", "--data", "data", "--run-dir", run, "--seed", seed, "--d", "8", "--batch-size", "64"],
    );
}

#[test]
fn prepare_errors_carry_line_numbers() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    fs::write(d.join("items.tsv"), "item_id\ttitle\na\tA\nb\tB\n").unwrap();
    fs::write(
        d.join("inter.tsv"),
        "user_id\titem_id\trating\ttimestamp\nu\ta\t5\t1\nu\tb\tfive\t2\n",
    )
    .unwrap();
    let out = rosepo(d, &["prepare", "--interactions", "inter.tsv", "--items", "items.tsv", "--out", "o"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("inter.tsv:3:"), "{err}");
}

#[test]
fn prepare_is_idempotent_and_notes_fallback_embeddings() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &["synth", "--n-users", "150", "--n-items", "80", "--emb-dim", "16", "--seed", "4", "--out", "syn"]);
    for out in ["a", "b"] {
        ok(
            d,
            &["prepare", "--interactions", "syn/interactions.tsv", "--items", "syn/items.tsv", "--seed", "4", "--out", out],
        );
    }
    for f in ["items.tsv", "records.tsv", "examples.tsv", "popularity.tsv", "embeddings.tsv", "manifest.txt"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    let manifest = fs::read_to_string(d.join("a/manifest.txt")).unwrap();
    assert!(manifest.contains("embeddings = co-occurrence"), "{manifest}");
    assert!(manifest.contains("input.interactions = interactions.tsv sha256:"));
}

#[test]
fn build_prefs_dependency_rules() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    fixture(d);
    let out = rosepo(d, &["build-prefs", "--data", "data", "--strategy", "self-hard", "--out", "p"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("requires --sft-ckpt"));

    ok(d, &["build-prefs", "--data", "data", "--strategy", "uniform", "--seed", "1", "--out", "u"]);
    let text = fs::read_to_string(d.join("u/prefs.tsv")).unwrap();
    assert!(text.lines().skip(1).all(|l| l.split('\t').nth(5) == Some("-")));

    sft(d, "sft", "1");
    ok(
        d,
        &["train-oracle", "--data", "data", "--run-dir", "oracle", "--d", "8", "--epochs", "2", "--seed", "1"],
    );
    ok(
        d,
        &[
            "build-prefs",
            "--data",
            "data",
            "--strategy",
            "mixed",
            "--sft-ckpt",
            "sft/checkpoints/sft.ckpt",
            "--oracle-ckpt",
            "oracle/checkpoints/oracle.ckpt",
            "--seed",
            "1",
            "--out",
            "m",
        ],
    );
    let text = fs::read_to_string(d.join("m/prefs.tsv")).unwrap();
    let mut tags = std::collections::BTreeSet::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        let eps: f64 = f[5].parse().unwrap();
        assert!(eps > 0.0 && eps < 1.0, "{eps}");
        assert_eq!(f[5].split('.').nth(1).unwrap().len(), 6);
        tags.insert(f[6].to_string());
    }
    assert_eq!(tags.into_iter().collect::<Vec<_>>(), ["popular", "self-hard", "semantic"]);

    // Oracle checkpoints cannot stand in for SFT ones.
    let out = rosepo(
        d,
        &["build-prefs", "--data", "data", "--strategy", "self-hard", "--sft-ckpt", "oracle/checkpoints/oracle.ckpt", "--out", "x"],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    fixture(d);
    fs::write(d.join("sft.txt"), "# sft run\nseed = 9\nd = 8\nlr = 0.01\nbatch_size = 64\n").unwrap();
    ok(d, &["train-sft", "--data", "data", "--config", "sft.txt", "--lr", "0.002", "--run-dir", "r"]);
    let config = fs::read_to_string(d.join("r/config.txt")).unwrap();
    assert!(config.contains("lr = 0.002\n"), "{config}");
    assert!(config.contains("seed = 9\n"));
    for f in ["checkpoints/sft.ckpt", "metrics.csv", "report.csv", "manifest.txt"] {
        assert!(d.join("r").join(f).is_file(), "{f}");
    }
    assert!(fs::read_to_string(d.join("r/metrics.csv")).unwrap().starts_with("step,loss,lr\n"));
    let out = rosepo(d, &["train-sft", "--data", "data", "--set", "learning_rate=1", "--run-dir", "r2"]);
    assert!(!out.status.success());
}

#[test]
fn report_merges_seeds_and_fractions() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    fixture(d);
    sft(d, "sft", "1");
    ok(
        d,
        &["build-prefs", "--data", "data", "--strategy", "uniform", "--seed", "1", "--out", "prefs"],
    );
    let mut dirs = Vec::new();
    for (seed, frac) in [("1", "1"), ("2", "1"), ("3", "0.2"), ("4", "0.6")] {
        let run = format!("po{seed}");
        ok(
            d,
            &[
                "train-po",
                "--data",
                "data",
                "--prefs",
                "prefs/prefs.tsv",
                "--sft-ckpt",
                "sft/checkpoints/sft.ckpt",
                "--objective",
                "dpo",
                "--seed",
                seed,
                "--data-fraction",
                frac,
                "--batch-size",
                "32",
                "--run-dir",
                &run,
            ],
        );
        ok(
            d,
            &["evaluate", "--data", "data", "--ckpt", &format!("{run}/checkpoints/po.ckpt"), "--out", &format!("{run}/eval")],
        );
        dirs.push(run);
    }
    let mut args = vec!["report", "--out", "rep", "--run-dirs", "missing"];
    args.extend(dirs.iter().map(String::as_str));
    ok(d, &args);

    let hr1 = |run: &str| -> f64 {
        let t = fs::read_to_string(d.join(run).join("eval/metrics_given.csv")).unwrap();
        t.lines().find(|l| l.starts_with("HR,1,")).unwrap()[5..].parse().unwrap()
    };
    let by_frac = fs::read_to_string(d.join("rep/by_fraction.csv")).unwrap();
    let rows: Vec<Vec<&str>> = by_frac.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), ["0.2", "0.6", "1"]);
    let (a, b) = (hr1("po1"), hr1("po2"));
    let mean = (a + b) / 2.0;
    let sd = ((a - mean).powi(2) + (b - mean).powi(2)).sqrt();
    assert_eq!(rows[2][1], "2");
    assert!((rows[2][2].parse::<f64>().unwrap() - mean).abs() < 1e-6);
    assert!((rows[2][3].parse::<f64>().unwrap() - sd).abs() < 1e-6);

    let summary = fs::read_to_string(d.join("rep/summary.txt")).unwrap();
    assert!(summary.starts_with("4 runs merged, 1 skipped"), "{summary}");
    assert!(summary.contains("skipped missing"));
    assert!(summary.contains("dpo/uniform"));
}
