use std::fs;
use std::path::{Path, PathBuf};

use tmow_core::cli::{run, run_dir, run_root};
use tmow_core::config::RunConfig;

fn tiny(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.env.seen.truncate(2);
    cfg.env.unseen.truncate(1);
    cfg.env.episodes_per_domain = 5;
    cfg.router.k = 2;
    cfg.model.layers = 3;
    cfg.model.hidden = 16;
    cfg.training.base.steps = 3;
    cfg.training.adapter.steps = 3;
    cfg.training.contrastive.steps = 3;
    cfg.training.joint.steps = 3;
    cfg.training.fewshot.steps = 2;
    cfg.eval.episodes_per_domain = 1;
    cfg.eval.heldout_per_domain = 1;
    cfg.eval.shots = vec![1];
    cfg.eval.k_sweep = vec![1];
    cfg.eval.continuous_phases = 1;
    cfg.eval.continuous_shots = 1;
    cfg.paths.root = root.join("runs");
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

fn tmow(config: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["tmow".to_string(), "--config".into(), config.display().to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    run(argv)
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(run(["tmow", "train-everything"]), 2);
    assert_eq!(run(["tmow"]), 2);
}

#[test]
fn augment_rejects_unsupported_shot_counts() {
    let args = ["tmow", "augment", "--mixture", "m", "--router", "r", "--fewshot", "f", "--shots", "3", "--out", "o"];
    assert_eq!(run(args), 2);
}

#[test]
fn environment_override_replaces_configured_root() {
    let cfg = RunConfig::default();
    assert_eq!(run_root(&cfg, None), PathBuf::from("runs"));
    assert_eq!(run_root(&cfg, Some("/tmp/elsewhere".into())), PathBuf::from("/tmp/elsewhere"));
    let dir = run_dir(Path::new("/r"), &cfg, 4);
    assert_eq!(dir, PathBuf::from(format!("/r/{}-s4", cfg.hash())));
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny(tmp.path()));
    let a = tmp.path().join("a.jsonl");
    let b = tmp.path().join("b.jsonl");
    for out in [&a, &b] {
        let code = tmow(&cfg, &["gen-data", "--seed", "3", "--episodes-per-domain", "2", "--out", out.to_str().unwrap()]);
        assert_eq!(code, 0);
    }
    let bytes = fs::read(&a).unwrap();
    assert!(!bytes.is_empty());
    assert_eq!(bytes, fs::read(&b).unwrap());
}

#[test]
fn gen_data_rejects_more_domains_than_configured() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny(tmp.path()));
    assert_eq!(tmow(&cfg, &["gen-data", "--seen-domains", "9"]), 1);
}

#[test]
fn eval_before_training_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny(tmp.path()));
    assert_eq!(tmow(&cfg, &["eval-zero-shot"]), 1);
    assert_eq!(tmow(&cfg, &["train-base"]), 1);
    assert_eq!(tmow(&cfg, &["report"]), 1);
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny(tmp.path());
    let cfg = write_config(tmp.path(), &config);
    for stage in [
        "gen-data",
        "train-base",
        "train-adapters",
        "pretrain-router",
        "extract-prototypes",
        "joint-train",
        "eval-zero-shot",
        "eval-few-shot",
        "eval-continuous",
        "ablate",
        "report",
    ] {
        assert_eq!(tmow(&cfg, &[stage]), 0, "stage {stage}");
    }
    let dir = run_dir(&config.paths.root, &config, config.seed);
    for f in [
        "config.toml",
        "data.jsonl",
        "base.ckpt.json",
        "adapters.ckpt.json",
        "router-pretrained.ckpt.json",
        "router.ckpt.json",
        "mixture.ckpt.json",
        "report.md",
        "eval/zero-shot/metrics.csv",
        "eval/few-shot-1/augment.json",
        "eval/continuous/heatmap.csv",
        "eval/top-k-1/metrics.csv",
    ] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    let echoed = RunConfig::from_toml(&fs::read_to_string(dir.join("config.toml")).unwrap()).unwrap();
    assert_eq!(echoed, config);

    // completed stages are not redone without --force
    assert_eq!(tmow(&cfg, &["train-base"]), 1);
    assert_eq!(tmow(&cfg, &["eval-zero-shot"]), 1);
    assert_eq!(tmow(&cfg, &["--force", "eval-zero-shot"]), 0);

    let out = tmp.path().join("grown.json");
    let fewshot = tmp.path().join("few.jsonl");
    let data = fs::read_to_string(dir.join("data.jsonl")).unwrap();
    let unseen: Vec<&str> = data.lines().filter(|l| l.contains("\"seen\":false")).collect();
    assert!(!unseen.is_empty());
    fs::write(&fewshot, unseen.join("\n")).unwrap();
    let code = tmow(
        &cfg,
        &[
            "augment",
            "--mixture",
            dir.join("mixture.ckpt.json").to_str().unwrap(),
            "--router",
            dir.join("router.ckpt.json").to_str().unwrap(),
            "--fewshot",
            fewshot.to_str().unwrap(),
            "--shots",
            "1",
            "--out",
            out.to_str().unwrap(),
        ],
    );
    assert_eq!(code, 0);
    assert!(out.exists());
    assert!(tmp.path().join("grown.router.json").exists());
}
