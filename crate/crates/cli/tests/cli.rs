use std::path::Path;
use std::process::{Command, Output};

fn kws(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kws")).args(args).output().expect("spawn kws")
}

fn ok(args: &[&str]) -> Output {
    let out = kws(args);
    assert!(
        out.status.success(),
        "kws {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn data_rows(csv: &Path) -> usize {
    std::fs::read_to_string(csv).unwrap().lines().count() - 1
}

/// Three keywords, three clips each, one negative per clip.
fn small_corpus(dir: &Path, name: &str, extra: &[&str]) -> std::path::PathBuf {
    let kw = dir.join("kw.txt");
    std::fs::write(&kw, "light\nright\ntimer\n").unwrap();
    let out = dir.join(name);
    let mut args = vec!["synth", "--keywords", p(&kw), "--out", p(&out), "--n-per-kw", "3"];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

#[test]
fn synth_defaults_row_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    ok(&["synth", "--out", p(&out)]);
    // 10 default keywords, 20 clips each, neg_ratio 1
    assert_eq!(data_rows(&out.join("trials.csv")), 20 * 10 * 2);
    assert_eq!(std::fs::read_dir(out.join("audio")).unwrap().count(), 200);
    assert!(out.join("lexicon.txt").exists());
}

#[test]
fn synth_row_count_follows_flags() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_corpus(dir.path(), "c", &["--neg-ratio", "2"]);
    assert_eq!(data_rows(&c.join("trials.csv")), 3 * 3 * 3);
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_corpus(dir.path(), "a", &["--seed", "5"]);
    let b = small_corpus(dir.path(), "b", &["--seed", "5"]);
    let c = small_corpus(dir.path(), "c", &["--seed", "6"]);
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(&a, "trials.csv"), read(&b, "trials.csv"));
    assert_eq!(read(&a, "audio/kw01_u002.wav"), read(&b, "audio/kw01_u002.wav"));
    assert_ne!(read(&a, "audio/kw01_u002.wav"), read(&c, "audio/kw01_u002.wav"));
}

#[test]
fn synth_errors_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let out = kws(&["synth", "--out", p(&blocker.join("corpus"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error[IoError]"), "{}", stderr(&out));

    let kw = dir.path().join("one.txt");
    std::fs::write(&kw, "light\n").unwrap();
    let out = kws(&["synth", "--keywords", p(&kw), "--out", p(&dir.path().join("c"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("error[InsufficientKeywords]"), "{}", stderr(&out));
}

#[test]
fn train_zero_epochs_writes_initial_checkpoint_and_empty_log() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_corpus(dir.path(), "c", &[]);
    let ckpt = dir.path().join("m.ckpt");
    let out = ok(&["train", "--corpus", p(&c), "--out", p(&ckpt), "--epochs", "0"]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let n: usize = stdout.trim().strip_prefix("parameters: ").unwrap().parse().unwrap();
    assert!((400_000..=1_000_000).contains(&n), "{n}");
    assert_eq!(std::fs::read_to_string(dir.path().join("m.log.jsonl")).unwrap(), "");
    assert!(ckpt.exists());
}

#[test]
fn train_log_is_reproducible_and_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_corpus(dir.path(), "c", &[]);
    let cfg = dir.path().join("train.json");
    std::fs::write(&cfg, r#"{"epochs": 7, "batch_size": 6, "ucl_minibatch": 2, "seed": 3}"#).unwrap();
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let ckpt = dir.path().join(format!("{run}.ckpt"));
        ok(&["train", "--corpus", p(&c), "--config", p(&cfg), "--epochs", "1", "--out", p(&ckpt)]);
        logs.push(std::fs::read_to_string(dir.path().join(format!("{run}.log.jsonl"))).unwrap());
        assert!(ckpt.exists());
    }
    let lines: Vec<&str> = logs[0].lines().collect();
    assert_eq!(lines.len(), 2, "--epochs 1 must win over the file");
    assert!(lines[1].starts_with(r#"{"epoch":1,"utt":"#));
    assert_eq!(logs[0], logs[1]);
    assert_eq!(
        std::fs::read(dir.path().join("a.ckpt")).unwrap(),
        std::fs::read(dir.path().join("b.ckpt")).unwrap()
    );
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_corpus(dir.path(), "c", &[]);
    let cfg = dir.path().join("train.json");
    std::fs::write(&cfg, r#"{"epochs": 1, "learning_rat": 0.1}"#).unwrap();
    let out = kws(&["train", "--corpus", p(&c), "--config", p(&cfg), "--out", p(&dir.path().join("m.ckpt"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("error[JsonError]"), "{}", stderr(&out));
}

#[test]
fn eval_writes_reproducible_metrics_and_figures() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_corpus(dir.path(), "c", &[]);
    let ckpt = dir.path().join("m.ckpt");
    ok(&["train", "--corpus", p(&c), "--out", p(&ckpt), "--epochs", "0"]);
    let trials = c.join("trials.csv");
    let mut metrics = Vec::new();
    for run in ["e1", "e2"] {
        let out = dir.path().join(run);
        ok(&["eval", "--ckpt", p(&ckpt), "--trials", p(&trials), "--out", p(&out)]);
        for f in ["scores.csv", "far_frr.csv", "similarity.csv", "similarity.svg", "alignment.csv", "alignment.svg"] {
            assert!(out.join(f).exists(), "missing {f}");
        }
        assert_eq!(data_rows(&out.join("scores.csv")), 18);
        metrics.push(std::fs::read_to_string(out.join("metrics.json")).unwrap());
    }
    assert_eq!(metrics[0], metrics[1]);
    let m: serde_json::Value = serde_json::from_str(&metrics[0]).unwrap();
    assert_eq!(m["n_trials"], 18);
    assert_eq!(m["threshold"], 0.5);
    assert!(m["auc"].as_f64().is_some());
}

#[test]
fn eval_without_negatives_marks_far_na() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_corpus(dir.path(), "c", &["--neg-ratio", "0"]);
    let ckpt = dir.path().join("m.ckpt");
    ok(&["train", "--corpus", p(&c), "--out", p(&ckpt), "--epochs", "0"]);
    let out = dir.path().join("e");
    ok(&["eval", "--ckpt", p(&ckpt), "--trials", p(&c.join("trials.csv")), "--out", p(&out)]);
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["far_at_threshold"], "n/a");
    assert_eq!(m["n_negative"], 0);
}

#[test]
fn eval_rejects_corrupt_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_corpus(dir.path(), "c", &[]);
    let ckpt = dir.path().join("m.ckpt");
    ok(&["train", "--corpus", p(&c), "--out", p(&ckpt), "--epochs", "0"]);
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    std::fs::write(&ckpt, bytes).unwrap();
    let out = kws(&["eval", "--ckpt", p(&ckpt), "--trials", p(&c.join("trials.csv")), "--out", p(&dir.path().join("e"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error[CrcMismatch]"), "{}", stderr(&out));
}

#[test]
fn ablate_drops_exactly_one_term() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_corpus(dir.path(), "c", &[]);
    let out = dir.path().join("ab");
    ok(&[
        "ablate", "--corpus", p(&c), "--out", p(&out), "--drop", "fa", "--epochs", "1", "--batch-size", "6",
        "--ucl-minibatch", "2",
    ]);
    let log = |run: &str| -> Vec<serde_json::Value> {
        std::fs::read_to_string(out.join(run).join("train.log.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    };
    let (full, variant) = (log("full"), log("no_fa"));
    let keys = |v: &serde_json::Value| v.as_object().unwrap().keys().cloned().collect::<Vec<_>>();
    assert!(keys(&full[0]).contains(&"fa".to_string()));
    assert!(!keys(&variant[0]).contains(&"fa".to_string()));
    for k in ["utt", "phon", "ctc", "pcl", "ucl"] {
        assert_eq!(full[0][k], variant[0][k], "epoch-0 {k}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(report["dropped"], "fa");
    assert!(report["full"]["auc"].is_number() && report["variant"]["auc"].is_number());
}

#[test]
fn ablate_rejects_core_terms() {
    let dir = tempfile::tempdir().unwrap();
    let out = kws(&["ablate", "--corpus", p(dir.path()), "--out", p(dir.path()), "--drop", "ctc"]);
    assert!(!out.status.success());
}

#[test]
fn align_emits_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_corpus(dir.path(), "c", &[]);
    let ckpt = dir.path().join("m.ckpt");
    ok(&["train", "--corpus", p(&c), "--out", p(&ckpt), "--epochs", "0"]);
    let stem = dir.path().join("heat");
    let out = ok(&[
        "align", "--ckpt", p(&ckpt), "--wav", p(&c.join("audio/kw00_u000.wav")), "--keyword", "light", "--out",
        p(&stem),
    ]);
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("q_utt "));
    let csv = std::fs::read_to_string(dir.path().join("heat.csv")).unwrap();
    // header plus one row per phoneme of L AY T
    assert_eq!(csv.lines().count(), 4);
    assert!(dir.path().join("heat.svg").exists());

    let out = kws(&["align", "--ckpt", p(&ckpt), "--wav", p(&c.join("audio/kw00_u000.wav")), "--keyword", "zzyx"]);
    assert!(stderr(&out).starts_with("error[OutOfVocabulary]"), "{}", stderr(&out));
}
