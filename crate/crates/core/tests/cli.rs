use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nfa_core::checkpoint::Checkpoint;

fn nfa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nfa"))
        .args(args)
        .env_remove("NFA_SEED")
        .output()
        .expect("run nfa")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synthetic(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let out = nfa(&[
        "prepare",
        "synthetic",
        "--train-docs",
        "80",
        "--test-docs",
        "20",
        "--vocab",
        "60",
        "--latent",
        "3",
        "--mean-length",
        "12",
        "--out",
        s(&data),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

fn write_config(dir: &Path, epochs: usize) -> PathBuf {
    let p = dir.join("run.cfg");
    fs::write(
        &p,
        format!(
            "# small hybrid run\nmode = hybrid\nM = 3\nepochs = {epochs}\nbatch_size = 16\nlatent_dim = 3\n\
             generator_hidden = 8\nencoder_hidden = 8,8\neval_inner_steps = 3\n"
        ),
    )
    .unwrap();
    p
}

fn train(dir: &Path, data: &Path, out: &str, epochs: usize, extra: &[&str]) -> Output {
    let cfg = write_config(dir, epochs);
    let out_dir = dir.join(out);
    let train = data.join("train.txt");
    let valid = data.join("test.txt");
    let mut args = vec![
        "--config",
        s(&cfg),
        "--seed",
        "3",
        "--out",
        s(&out_dir),
        "train",
        "--train-data",
        s(&train),
        "--valid-data",
        s(&valid),
    ];
    args.extend_from_slice(extra);
    nfa(&args)
}

#[test]
fn missing_training_data_exits_with_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no_such_file.txt");
    let out = nfa(&["--out", s(&dir.path().join("run")), "train", "--train-data", s(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_file.txt"));
}

#[test]
fn unknown_config_key_exits_with_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "epochs = 2\nwarp_factor = 9\n").unwrap();
    let out = nfa(&["--config", s(&cfg), "train"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("warp_factor"), "{err}");
}

#[test]
fn two_epoch_run_writes_header_and_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic(dir.path());
    let out = train(dir.path(), &data, "run", 2, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "epoch,mode,train_elbo,train_kl,updates");
    assert!(lines[1].starts_with("1,hybrid,"));
    assert!(lines[2].starts_with("2,hybrid,"));
    for f in ["config.txt", "validation.csv", "timing.csv", "last.ckpt", "best.ckpt"] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }
}

#[test]
fn identical_runs_and_resume_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic(dir.path());
    assert!(train(dir.path(), &data, "a", 3, &[]).status.success());
    assert!(train(dir.path(), &data, "b", 3, &[]).status.success());
    let read = |p: &str| fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/metrics.csv"), read("b/metrics.csv"));
    assert_eq!(read("a/validation.csv"), read("b/validation.csv"));
    // checkpoints embed the run config, which differs only in out_dir
    let a = Checkpoint::load(dir.path().join("a/last.ckpt")).unwrap();
    let mut b = Checkpoint::load(dir.path().join("b/last.ckpt")).unwrap();
    b.config.out_dir = a.config.out_dir.clone();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());

    assert!(train(dir.path(), &data, "c", 1, &[]).status.success());
    let ck = dir.path().join("c/last.ckpt");
    let out = train(dir.path(), &data, "c", 3, &["--resume", s(&ck)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read("a/metrics.csv"), read("c/metrics.csv"));
    assert_eq!(read("a/validation.csv"), read("c/validation.csv"));
}

#[test]
fn seed_flag_overrides_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic(dir.path());
    let cfg = write_config(dir.path(), 1);
    let run = |out: &str, env_seed: &str, flag: Option<&str>| {
        let out_dir = dir.path().join(out);
        let train = data.join("train.txt");
        let mut args = vec!["--config", s(&cfg), "--out", s(&out_dir)];
        if let Some(f) = flag {
            args.extend(["--seed", f]);
        }
        args.extend(["train", "--train-data", s(&train)]);
        let o = Command::new(env!("CARGO_BIN_EXE_nfa"))
            .args(&args)
            .env("NFA_SEED", env_seed)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(out_dir.join("metrics.csv")).unwrap()
    };
    let env_only = run("e", "5", None);
    let flag_wins = run("f", "9", Some("5"));
    let other = run("g", "9", None);
    assert_eq!(env_only, flag_wins);
    assert_ne!(env_only, other);
}

#[test]
fn evaluate_diagnose_and_recommend() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic(dir.path());
    assert!(train(dir.path(), &data, "run", 2, &[]).status.success());
    let ck = dir.path().join("run/last.ckpt");
    let test = data.join("test.txt");
    let out_dir = dir.path().join("eval");

    let out = nfa(&["--out", s(&out_dir), "evaluate", "--checkpoint", s(&ck), "--data", s(&test)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ppl = fs::read_to_string(out_dir.join("perplexity.csv")).unwrap();
    assert!(ppl.lines().count() >= 2, "{ppl}");

    let out = nfa(&["--out", s(&out_dir), "diagnose", "--checkpoint", s(&ck), "--which", "spectrum"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let spectrum = fs::read_to_string(out_dir.join("spectrum.csv")).unwrap();
    assert_eq!(spectrum.lines().next(), Some("rank,singular_value,log10_value"));
    assert_eq!(spectrum.lines().count(), 1 + 3);

    let out = nfa(&[
        "--out",
        s(&out_dir),
        "diagnose",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&test),
        "--which",
        "kl_rare",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let kl = fs::read_to_string(out_dir.join("kl_rare.csv")).unwrap();
    assert!(kl.lines().last().unwrap().starts_with("spearman_rho,"), "{kl}");

    let out = nfa(&["recommend", "--checkpoint", s(&ck), "--feedback", s(&test), "-n", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(!text.is_empty());
    for line in text.lines() {
        assert_eq!(line.split('\t').count(), 6, "{line}");
    }

    let out = nfa(&["evaluate", "--checkpoint", s(&dir.path().join("missing.ckpt")), "--data", s(&test)]);
    assert_eq!(out.status.code(), Some(2));
}
