//! Command-line front end. Every stage reads and writes artifacts in one run directory,
//! `<root>/<config hash>-s<seed>`, where the root comes from `TMOW_RUN_DIR` or `paths.root`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use serde::Serialize;

use crate::adapt::{augment_model, AdapterInit, AugmentSettings, AugmentationRequest};
use crate::checkpoint::Checkpoint;
use crate::config::{load_config, RunConfig};
use crate::error::{Result, TmowError};
use crate::graphworld::{read_jsonl, Dataset, Vocabulary};
use crate::harness::{emit_report, scenario_continuous, scenario_few_shot, scenario_zero_shot, Artifacts, ScenarioRun};
use crate::pipeline::{
    ablation_runs, dataset_from_records, extract_prototypes_stage, generate_data, joint_train_stage, pretrain_router_stage,
    stage_seed, train_adapters_stage, train_base_stage, Traces, TrainedRun,
};
use crate::router::Router;
use crate::worldmodel::Mixture;

pub const RUN_DIR_ENV: &str = "TMOW_RUN_DIR";

const DATA: &str = "data.jsonl";
const BASE: &str = "base.ckpt.json";
const ADAPTERS: &str = "adapters.ckpt.json";
const PROCESSOR: &str = "router-pretrained.ckpt.json";
const ROUTER: &str = "router.ckpt.json";
const MIXTURE: &str = "mixture.ckpt.json";
const REPORT: &str = "report.md";

#[derive(Debug, Parser)]
#[command(name = "tmow", version, about = "Test-time mixture of world models")]
pub struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Replace artifacts that already exist.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate expert demonstrations for every configured domain.
    GenData {
        /// Keep only the first N configured seen domains.
        #[arg(long)]
        seen_domains: Option<usize>,
        /// Keep only the first N configured unseen domains.
        #[arg(long)]
        unseen_domains: Option<usize>,
        #[arg(long)]
        episodes_per_domain: Option<usize>,
        /// Write the JSONL file here instead of into the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    TrainBase,
    TrainAdapters,
    PretrainRouter,
    ExtractPrototypes,
    JointTrain,
    EvalZeroShot,
    EvalFewShot {
        /// Shot count; every configured count when omitted.
        #[arg(long)]
        shots: Option<usize>,
        /// Start new adapters from the standard initialization instead of the routed mixture.
        #[arg(long)]
        scratch: bool,
    },
    EvalContinuous,
    /// Routing ablations, scratch adapters and the top-K sweep.
    Ablate,
    /// Add one expert for the domain of a few demonstrations.
    Augment {
        #[arg(long)]
        mixture: PathBuf,
        #[arg(long)]
        router: PathBuf,
        #[arg(long)]
        fewshot: PathBuf,
        #[arg(long, value_parser = ["1", "5"])]
        shots: String,
        /// Augmented mixture checkpoint; the router goes next to it as `<stem>.router.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect every scenario summary of the run into report.md.
    Report,
}

/// Parses `args` and runs the command. Returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Output root: the environment override when set, the configured root otherwise.
pub fn run_root(cfg: &RunConfig, env_override: Option<PathBuf>) -> PathBuf {
    env_override.unwrap_or_else(|| cfg.paths.root.clone())
}

pub fn run_dir(root: &Path, cfg: &RunConfig, seed: u64) -> PathBuf {
    root.join(format!("{}-s{seed}", cfg.hash()))
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    dir: PathBuf,
    force: bool,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Creates the run directory and echoes the configuration into it.
    fn prepare(&self) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| TmowError::io(&self.dir, e))?;
        let path = self.path("config.toml");
        let text = self.cfg.to_toml()?;
        if !path.exists() {
            fs::write(&path, text).map_err(|e| TmowError::io(&path, e))?;
        }
        Ok(())
    }

    fn writable(&self, path: &Path) -> Result<()> {
        if path.exists() && !self.force {
            return Err(TmowError::Config(format!(
                "{} already exists; pass --force to replace it",
                path.display()
            )));
        }
        Ok(())
    }

    fn require(&self, names: &[&str]) -> Result<()> {
        let missing: Vec<PathBuf> = names.iter().map(|n| self.path(n)).filter(|p| !p.exists()).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(TmowError::MissingArtifact(missing))
        }
    }

    fn dataset(&self) -> Result<Dataset> {
        self.require(&[DATA])?;
        dataset_from_records(&self.cfg, self.seed, read_jsonl(&self.path(DATA))?)
    }

    fn mixture(&self, name: &str, vocab: &Vocabulary) -> Result<Mixture> {
        Mixture::from_checkpoint(&Checkpoint::load(&self.path(name))?, &vocab.hash())
    }

    fn router(&self, name: &str) -> Result<Router> {
        Router::from_checkpoint(&Checkpoint::load(&self.path(name))?)
    }

    fn save_mixture(&self, name: &str, m: &Mixture, vocab: &Vocabulary) -> Result<()> {
        let path = self.path(name);
        m.to_checkpoint(&vocab.hash(), self.seed)?.save(&path)?;
        info!("wrote {}", path.display());
        Ok(())
    }

    fn save_router(&self, name: &str, r: &Router) -> Result<()> {
        let path = self.path(name);
        r.to_checkpoint(self.seed, &self.cfg.hash())?.save(&path)?;
        info!("wrote {}", path.display());
        Ok(())
    }

    fn save_json(&self, rel: &str, value: &impl Serialize) -> Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| TmowError::io(parent, e))?;
        }
        fs::write(&path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| TmowError::io(&path, e))
    }

    fn artifacts(&self) -> Result<Artifacts> {
        self.require(&[DATA, MIXTURE, ROUTER])?;
        let vocab = Vocabulary::new();
        Ok(Artifacts {
            dataset: self.dataset()?,
            mixture: self.mixture(MIXTURE, &vocab)?,
            router: self.router(ROUTER)?,
            vocab,
        })
    }

    fn emit(&self, runs: &[ScenarioRun]) -> Result<()> {
        for run in runs {
            let dir = self.path("eval").join(&run.report.scenario);
            self.writable(&dir.join("metrics.csv"))?;
            emit_report(&run.report, &dir)?;
            if !run.augmentations.is_empty() {
                let rel = format!("eval/{}/augment.json", run.report.scenario);
                self.save_json(&rel, &run.augmentations)?;
            }
            println!("{}", run.report.summary());
        }
        Ok(())
    }
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Command::Augment { mixture, router, fewshot, shots, out } = &cli.command {
        let shots: usize = shots.parse().map_err(|_| TmowError::param("shots", "must be 1 or 5"))?;
        return augment(&cfg, cli.seed.unwrap_or(cfg.seed), mixture, router, fewshot, shots, out, cli.force);
    }
    if let Command::GenData { seen_domains, unseen_domains, episodes_per_domain, .. } = &cli.command {
        if let Some(n) = seen_domains {
            truncate("seen-domains", &mut cfg.env.seen, *n)?;
        }
        if let Some(n) = unseen_domains {
            truncate("unseen-domains", &mut cfg.env.unseen, *n)?;
        }
        if let Some(n) = episodes_per_domain {
            cfg.env.episodes_per_domain = *n;
        }
        cfg.validate()?;
    }
    let seed = cli.seed.unwrap_or(cfg.seed);
    let root = run_root(&cfg, std::env::var_os(RUN_DIR_ENV).map(PathBuf::from));
    let ctx = Ctx {
        dir: run_dir(&root, &cfg, seed),
        cfg,
        seed,
        force: cli.force,
    };
    info!("run directory {}", ctx.dir.display());
    let vocab = Vocabulary::new();
    match &cli.command {
        Command::GenData { out, .. } => {
            let path = match out {
                Some(p) => p.clone(),
                None => {
                    ctx.prepare()?;
                    ctx.path(DATA)
                }
            };
            ctx.writable(&path)?;
            let ds = generate_data(&ctx.cfg, seed)?;
            ds.write_jsonl(&path)?;
            println!("{} demonstrations written to {}", ds.demos.len(), path.display());
        }
        Command::TrainBase => {
            ctx.prepare()?;
            ctx.writable(&ctx.path(BASE))?;
            let ds = ctx.dataset()?;
            let (base, trace) = train_base_stage(&ctx.cfg, &vocab, &ds, seed)?;
            ctx.save_mixture(BASE, &Mixture::new(base, Vec::new())?, &vocab)?;
            ctx.save_json("traces/base.json", &trace)?;
        }
        Command::TrainAdapters => {
            ctx.prepare()?;
            ctx.writable(&ctx.path(ADAPTERS))?;
            ctx.require(&[DATA, BASE])?;
            let ds = ctx.dataset()?;
            let base = ctx.mixture(BASE, &vocab)?.base;
            let (m, traces) = train_adapters_stage(&ctx.cfg, &vocab, &ds, &base, seed)?;
            ctx.save_mixture(ADAPTERS, &m, &vocab)?;
            ctx.save_json("traces/adapters.json", &traces)?;
        }
        Command::PretrainRouter => {
            ctx.prepare()?;
            ctx.writable(&ctx.path(PROCESSOR))?;
            let ds = ctx.dataset()?;
            let (p, trace) = pretrain_router_stage(&ctx.cfg, &vocab, &ds, seed)?;
            ctx.save_router(PROCESSOR, &Router::new(p))?;
            ctx.save_json("traces/contrastive.json", &trace)?;
        }
        Command::ExtractPrototypes => {
            ctx.prepare()?;
            ctx.writable(&ctx.path(ROUTER))?;
            ctx.require(&[DATA, PROCESSOR])?;
            let ds = ctx.dataset()?;
            let processor = ctx.router(PROCESSOR)?.processor;
            let prototypes = extract_prototypes_stage(&ctx.cfg, &vocab, &ds, &processor)?;
            ctx.save_router(ROUTER, &Router { processor, prototypes })?;
        }
        Command::JointTrain => {
            ctx.prepare()?;
            ctx.writable(&ctx.path(MIXTURE))?;
            ctx.require(&[DATA, ADAPTERS, ROUTER])?;
            let ds = ctx.dataset()?;
            let mut m = ctx.mixture(ADAPTERS, &vocab)?;
            let router = ctx.router(ROUTER)?;
            let trace = joint_train_stage(&ctx.cfg, &vocab, &ds, &mut m, &router, ctx.cfg.router.k, seed)?;
            ctx.save_mixture(MIXTURE, &m, &vocab)?;
            ctx.save_json("traces/joint.json", &trace)?;
        }
        Command::EvalZeroShot => {
            let art = ctx.artifacts()?;
            let run = scenario_zero_shot(&art, &ctx.cfg.eval_settings(seed), &serde_json::to_value(&ctx.cfg)?)?;
            ctx.emit(&[run])?;
        }
        Command::EvalFewShot { shots, scratch } => {
            let art = ctx.artifacts()?;
            let settings = ctx.cfg.eval_settings(seed);
            let snapshot = serde_json::to_value(&ctx.cfg)?;
            let init = if *scratch { AdapterInit::Scratch } else { AdapterInit::Distilled };
            let counts = shots.map(|s| vec![s]).unwrap_or_else(|| ctx.cfg.eval.shots.clone());
            let runs = counts
                .iter()
                .map(|s| scenario_few_shot(&art, &settings, *s, init, &snapshot))
                .collect::<Result<Vec<_>>>()?;
            ctx.emit(&runs)?;
        }
        Command::EvalContinuous => {
            let art = ctx.artifacts()?;
            let run = scenario_continuous(&art, &ctx.cfg.eval_settings(seed), &serde_json::to_value(&ctx.cfg)?)?;
            ctx.emit(&[run])?;
        }
        Command::Ablate => {
            ctx.require(&[DATA, ADAPTERS, MIXTURE, ROUTER])?;
            let run = TrainedRun {
                artifacts: ctx.artifacts()?,
                adapters: ctx.mixture(ADAPTERS, &vocab)?,
                traces: Traces::default(),
            };
            ctx.emit(&ablation_runs(&ctx.cfg, &run, seed)?)?;
        }
        Command::Report => {
            let eval = ctx.path("eval");
            let mut summaries = Vec::new();
            if let Ok(entries) = fs::read_dir(&eval) {
                for e in entries.flatten() {
                    let p = e.path().join("summary.txt");
                    if p.exists() {
                        summaries.push(p);
                    }
                }
            }
            if summaries.is_empty() {
                return Err(TmowError::MissingArtifact(vec![eval.join("<scenario>/summary.txt")]));
            }
            summaries.sort();
            let mut text = format!("# Run {}\n\nseed {seed}, config {}\n", ctx.dir.display(), ctx.cfg.hash());
            for p in &summaries {
                let body = fs::read_to_string(p).map_err(|e| TmowError::io(p, e))?;
                text.push_str(&format!("\n```\n{}```\n", body));
            }
            let path = ctx.path(REPORT);
            fs::write(&path, &text).map_err(|e| TmowError::io(&path, e))?;
            print!("{text}");
        }
        Command::Augment { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn truncate<T>(flag: &'static str, list: &mut Vec<T>, n: usize) -> Result<()> {
    if n > list.len() {
        return Err(TmowError::param(flag, format!("at most {} domains are configured", list.len())));
    }
    list.truncate(n);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn augment(
    cfg: &RunConfig,
    seed: u64,
    mixture_path: &Path,
    router_path: &Path,
    fewshot: &Path,
    shots: usize,
    out: &Path,
    force: bool,
) -> Result<()> {
    let missing: Vec<PathBuf> = [mixture_path, router_path, fewshot]
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.to_path_buf())
        .collect();
    if !missing.is_empty() {
        return Err(TmowError::MissingArtifact(missing));
    }
    let router_out = out.with_extension("router.json");
    for p in [out, router_out.as_path()] {
        if p.exists() && !force {
            return Err(TmowError::Config(format!("{} already exists; pass --force to replace it", p.display())));
        }
    }
    let vocab = Vocabulary::new();
    let mut mixture = Mixture::from_checkpoint(&Checkpoint::load(mixture_path)?, &vocab.hash())?;
    let mut router = Router::from_checkpoint(&Checkpoint::load(router_path)?)?;
    let demos: Vec<_> = read_jsonl(fewshot)?.into_iter().map(|(_, d)| d).take(shots).collect();
    if demos.len() < shots {
        return Err(TmowError::Config(format!("{} holds {} demonstrations, {shots} requested", fewshot.display(), demos.len())));
    }
    if let Some(other) = demos.iter().find(|d| d.domain_id != demos[0].domain_id) {
        return Err(TmowError::Input(format!(
            "few-shot demonstrations mix domains {} and {}",
            demos[0].domain_id, other.domain_id
        )));
    }
    let settings = cfg.eval_settings(seed);
    let request = AugmentationRequest {
        lr: settings.fewshot_lr,
        optimizer: settings.fewshot_optimizer,
        freeze_down: settings.fewshot_freeze_down,
        clip_norm: settings.fewshot_clip_norm,
        steps: settings.fewshot_steps,
        seed: stage_seed(seed, &format!("augment/{}", demos[0].domain_id)),
        demos,
    };
    let aug = AugmentSettings {
        k: settings.k,
        tau: settings.tau,
        relation_weights: settings.relation_weights.clone(),
        init: AdapterInit::Distilled,
    };
    let report = augment_model(&mut mixture, &mut router, &vocab, &request, &aug)?;
    mixture.to_checkpoint(&vocab.hash(), seed)?.save(out)?;
    router.to_checkpoint(seed, &cfg.hash())?.save(&router_out)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
