//! Run configuration: one flat TOML file holding every hyperparameter of a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::RefinementConfig;
use crate::error::{Result, TmowError};
use crate::graphworld::{
    default_seen_domains, default_unseen_domains, GenerationParams, RelationWeights, TaskCategory, Vocabulary,
};
use crate::harness::EvalSettings;
use crate::nncore::Optimizer;
use crate::router::{default_message_passing_layers, ContrastiveParams, ProcessorDims};
use crate::worldmodel::{ModelDims, TrainParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainRef {
    pub scene: usize,
    pub task: TaskCategory,
}

fn refs(list: Vec<(usize, TaskCategory)>) -> Vec<DomainRef> {
    list.into_iter().map(|(scene, task)| DomainRef { scene, task }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub seen: Vec<DomainRef>,
    pub unseen: Vec<DomainRef>,
    pub episodes_per_domain: usize,
    pub max_steps: usize,
    pub relation_weights: RelationWeights,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            seen: refs(default_seen_domains()),
            unseen: refs(default_unseen_domains()),
            episodes_per_domain: 30,
            max_steps: 20,
            relation_weights: RelationWeights::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub rank: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            hidden: 64,
            rank: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterConfig {
    pub k: usize,
    pub tau: f64,
    /// Width of the query/key projections in the edge gate.
    pub proj_dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message_passing_layers: Option<Vec<usize>>,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            k: 3,
            tau: 1.0,
            proj_dim: 8,
            message_passing_layers: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub warmup: usize,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub freeze_down: bool,
    /// Global gradient-norm ceiling; unclipped when absent.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub warmup: usize,
    pub tau: f64,
    pub lambda: f64,
    pub feature_drop: f64,
    pub edge_drop: f64,
    pub optimizer: Optimizer,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        let p = ContrastiveParams::default();
        Self {
            steps: 300,
            lr: p.lr,
            batch: p.batch,
            warmup: 20,
            tau: p.tau,
            lambda: p.lambda,
            feature_drop: p.feature_drop,
            edge_drop: p.edge_drop,
            optimizer: p.optimizer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FewShotConfig {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub freeze_down: bool,
    /// Global gradient-norm ceiling; unclipped when absent.
    pub clip_norm: Option<f64>,
    /// Few-shot rate used at full scale; recorded for reference only.
    pub full_scale_lr: f64,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            steps: 60,
            lr: 1e-4,
            optimizer: Optimizer::Sgd,
            freeze_down: false,
            clip_norm: None,
            full_scale_lr: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub base: StageConfig,
    pub adapter: StageConfig,
    pub joint: StageConfig,
    pub contrastive: ContrastiveConfig,
    pub fewshot: FewShotConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            base: StageConfig {
                steps: 40,
                lr: 0.05,
                batch: 16,
                warmup: 5,
                optimizer: Optimizer::Sgd,
                freeze_down: false,
                clip_norm: None,
            },
            adapter: StageConfig {
                steps: 500,
                lr: 1e-3,
                batch: 16,
                warmup: 20,
                optimizer: Optimizer::Sgd,
                freeze_down: false,
                clip_norm: None,
            },
            joint: StageConfig {
                steps: 200,
                lr: 0.05,
                batch: 16,
                warmup: 10,
                optimizer: Optimizer::Sgd,
                freeze_down: false,
                clip_norm: None,
            },
            contrastive: ContrastiveConfig::default(),
            fewshot: FewShotConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes_per_domain: usize,
    /// Fresh observations per seen domain for the routing identifiability check.
    pub heldout_per_domain: usize,
    pub shots: Vec<usize>,
    /// K values of the top-K sweep; the expert count is always added.
    pub k_sweep: Vec<usize>,
    pub continuous_phases: usize,
    pub continuous_shots: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes_per_domain: 20,
            heldout_per_domain: 10,
            shots: vec![1, 5],
            k_sweep: vec![1, 3, 5],
            continuous_phases: 3,
            continuous_shots: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Parent of all run directories.
    pub root: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { root: PathBuf::from("runs") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Seeds of the repeated experiments.
    pub seeds: Vec<u64>,
    pub env: EnvConfig,
    pub model: ModelConfig,
    pub router: RouterConfig,
    pub refinement: RefinementConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            env: EnvConfig::default(),
            model: ModelConfig::default(),
            router: RouterConfig::default(),
            refinement: RefinementConfig::default(),
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn positive(name: &'static str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(TmowError::param(name, "must be positive"))
    }
}

fn at_least_one(name: &'static str, x: usize) -> Result<()> {
    if x >= 1 {
        Ok(())
    } else {
        Err(TmowError::param(name, "must be at least 1"))
    }
}

fn unit_interval(name: &'static str, x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(TmowError::param(name, "must lie in [0, 1]"))
    }
}

fn stage(names: [&'static str; 2], s: &StageConfig) -> Result<()> {
    positive(names[0], s.lr)?;
    at_least_one(names[1], s.batch)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| TmowError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| TmowError::Parse(e.to_string()))
    }

    /// Short stable digest of the full configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..6])
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(TmowError::param("seeds", "must list at least one seed"));
        }
        if self.env.seen.is_empty() {
            return Err(TmowError::param("env.seen", "must list at least one domain"));
        }
        at_least_one("env.episodes_per_domain", self.env.episodes_per_domain)?;
        at_least_one("env.max_steps", self.env.max_steps)?;
        at_least_one("model.layers", self.model.layers)?;
        if self.model.rank == 0 || self.model.rank >= self.model.hidden {
            return Err(TmowError::param("model.rank", "must lie in [1, model.hidden)"));
        }
        at_least_one("router.k", self.router.k)?;
        positive("router.tau", self.router.tau)?;
        at_least_one("router.proj_dim", self.router.proj_dim)?;
        if let Some(mp) = &self.router.message_passing_layers {
            if mp.windows(2).any(|w| w[0] >= w[1]) || mp.iter().any(|l| *l >= self.model.layers) {
                return Err(TmowError::param(
                    "router.message_passing_layers",
                    "must be strictly increasing and below model.layers",
                ));
            }
        }
        unit_interval("refinement.alpha", self.refinement.alpha)?;
        positive("refinement.tau_r", self.refinement.tau_r)?;
        let t = &self.training;
        stage(["training.base.lr", "training.base.batch"], &t.base)?;
        stage(["training.adapter.lr", "training.adapter.batch"], &t.adapter)?;
        stage(["training.joint.lr", "training.joint.batch"], &t.joint)?;
        positive("training.contrastive.lr", t.contrastive.lr)?;
        positive("training.contrastive.tau", t.contrastive.tau)?;
        if !(t.contrastive.lambda >= 0.0) {
            return Err(TmowError::param("training.contrastive.lambda", "must be nonnegative"));
        }
        if t.contrastive.batch < 2 {
            return Err(TmowError::param("training.contrastive.batch", "must be at least 2"));
        }
        unit_interval("training.contrastive.feature_drop", t.contrastive.feature_drop)?;
        unit_interval("training.contrastive.edge_drop", t.contrastive.edge_drop)?;
        positive("training.fewshot.lr", t.fewshot.lr)?;
        at_least_one("eval.episodes_per_domain", self.eval.episodes_per_domain)?;
        at_least_one("eval.continuous_phases", self.eval.continuous_phases)?;
        at_least_one("eval.continuous_shots", self.eval.continuous_shots)?;
        for s in self.eval.shots.iter().chain([&self.eval.continuous_shots]) {
            if *s == 0 || *s > self.env.episodes_per_domain {
                return Err(TmowError::param("eval.shots", "must lie in [1, env.episodes_per_domain]"));
            }
        }
        for k in &self.eval.k_sweep {
            at_least_one("eval.k_sweep", *k)?;
        }
        Ok(())
    }

    pub fn n_experts(&self) -> usize {
        self.env.seen.len()
    }

    pub fn generation_params(&self, seed: u64) -> GenerationParams {
        GenerationParams {
            seed,
            seen: self.env.seen.iter().map(|d| (d.scene, d.task)).collect(),
            unseen: self.env.unseen.iter().map(|d| (d.scene, d.task)).collect(),
            episodes_per_domain: self.env.episodes_per_domain,
            max_steps: self.env.max_steps,
        }
    }

    pub fn model_dims(&self, vocab: &Vocabulary) -> ModelDims {
        ModelDims::new(self.model.layers, self.model.hidden, self.model.rank, vocab)
    }

    pub fn processor_dims(&self, vocab: &Vocabulary) -> ProcessorDims {
        ProcessorDims {
            layers: self.model.layers,
            hidden: self.model.hidden,
            proj_dim: self.router.proj_dim,
            feature_width: crate::graphworld::catalog::feature_width(),
            vocab_size: vocab.len(),
        }
    }

    pub fn message_passing_layers(&self) -> Vec<usize> {
        self.router
            .message_passing_layers
            .clone()
            .unwrap_or_else(|| default_message_passing_layers(self.model.layers))
    }

    pub fn train_params(&self, s: &StageConfig, seed: u64) -> TrainParams {
        TrainParams {
            steps: s.steps,
            lr: s.lr,
            batch: s.batch,
            warmup: s.warmup,
            seed,
            optimizer: s.optimizer,
            freeze_down: s.freeze_down,
            clip_norm: s.clip_norm,
        }
    }

    pub fn contrastive_params(&self, seed: u64) -> ContrastiveParams {
        let c = &self.training.contrastive;
        ContrastiveParams {
            steps: c.steps,
            lr: c.lr,
            batch: c.batch,
            warmup: c.warmup,
            tau: c.tau,
            lambda: c.lambda,
            feature_drop: c.feature_drop,
            edge_drop: c.edge_drop,
            seed,
            optimizer: c.optimizer,
        }
    }

    pub fn eval_settings(&self, seed: u64) -> EvalSettings {
        EvalSettings {
            k: self.router.k,
            tau: self.router.tau,
            refinement: self.refinement,
            max_steps: self.env.max_steps,
            episodes_per_domain: self.eval.episodes_per_domain,
            relation_weights: self.env.relation_weights.clone(),
            seed,
            fewshot_steps: self.training.fewshot.steps,
            fewshot_lr: self.training.fewshot.lr,
            fewshot_optimizer: self.training.fewshot.optimizer,
            fewshot_freeze_down: self.training.fewshot.freeze_down,
            fewshot_clip_norm: self.training.fewshot.clip_norm,
            continuous_phases: self.eval.continuous_phases,
            continuous_shots: self.eval.continuous_shots,
        }
    }

    /// K values of the sweep with the expert count appended, deduplicated in order.
    pub fn k_sweep(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for k in self.eval.k_sweep.iter().copied().chain([self.n_experts()]) {
            if !out.contains(&k) {
                out.push(k);
            }
        }
        out
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    if !path.exists() {
        return Err(TmowError::MissingArtifact(vec![path.to_path_buf()]));
    }
    let text = std::fs::read_to_string(path).map_err(|e| TmowError::io(path, e))?;
    RunConfig::from_toml(&text).map_err(|e| match e {
        TmowError::Parse(m) => TmowError::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_gets_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg.router.k, 3);
        assert_eq!(cfg.router.tau, 1.0);
        assert_eq!(cfg.refinement.alpha, 0.5);
        assert_eq!(cfg.n_experts(), 12);
        assert_eq!(cfg.k_sweep(), vec![1, 3, 5, 12]);
    }

    #[test]
    fn desk_config_is_valid() {
        let cfg = RunConfig::from_toml(include_str!("../../../configs/desk.toml")).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seeds.len(), 5);
        assert_eq!(cfg.n_experts(), 12);
        assert_eq!(cfg.refinement.persistence, crate::adapt::Persistence::PerEpisode);
    }

    #[test]
    fn negative_tau_names_field_and_bound() {
        let err = RunConfig::from_toml("[router]\ntau = -1.0\n").unwrap_err().to_string();
        assert!(err.contains("router.tau") && err.contains("must be positive"), "{err}");
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml("[router]\ntemperature = 1.0\n").unwrap_err().to_string();
        assert!(err.contains("temperature"), "{err}");
        let err = RunConfig::from_toml("seed = 1\n\nbogus = 3\n").unwrap_err().to_string();
        assert!(err.contains("bogus") && err.contains("line 3"), "{err}");
    }

    #[test]
    fn echo_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.router.message_passing_layers = Some(vec![0, 3]);
        cfg.env.unseen.truncate(2);
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_tables_keep_other_defaults() {
        let cfg = RunConfig::from_toml("[training.adapter]\nsteps = 7\nlr = 0.2\nbatch = 4\nwarmup = 0\n").unwrap();
        assert_eq!(cfg.training.adapter.steps, 7);
        assert_eq!(cfg.training.base, TrainingConfig::default().base);
        assert!(RunConfig::from_toml("[refinement]\nalpha = 2.0\n").is_err());
    }
}
