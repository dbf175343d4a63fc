//! Episode execution, metrics, evaluation scenarios and report files.

mod report;
mod scenario;

pub use report::{emit_report, MetricRow, ScenarioReport};
pub use scenario::{
    augment_domain, evaluate_domains, run_ablations, scenario_continuous, scenario_few_shot, scenario_zero_shot, Artifacts,
    EvalSettings, ScenarioRun, Variant,
};

use serde::{Deserialize, Serialize};

use crate::adapt::{refine_prototypes, RefinementConfig};
use crate::error::{Result, TmowError};
use crate::graphworld::{Action, Episode, RelationWeights, Vocabulary, WorldState};
use crate::router::{route, GraphProcessor, PrototypeSet, RouterInput, RoutingDecision};
use crate::worldmodel::{LayerWeights, Mixture};

/// Which granularity of routing scores drives every layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoutingAblation {
    #[default]
    Full,
    /// Scores of the first message-passing layer broadcast to all layers.
    Object,
    /// Scores of the final layer broadcast to all layers.
    Scene,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOptions {
    pub k: usize,
    pub tau: f64,
    pub max_steps: usize,
    pub refine: Option<RefinementConfig>,
    pub ablation: RoutingAblation,
    pub relation_weights: RelationWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub domain_id: String,
    pub success: bool,
    pub steps: usize,
    pub max_steps: usize,
    /// Mixture weights used at every step, `[step][layer][expert]`.
    pub decisions: Vec<LayerWeights>,
    pub refine: bool,
    pub seed: u64,
    /// Per-layer mean entropy over the visited observations under the prototypes held at
    /// episode start and at episode end (refinement runs only).
    pub entropy_shift: Option<(Vec<f64>, Vec<f64>)>,
}

impl EpisodeResult {
    pub fn pending_steps(&self) -> usize {
        if self.success {
            self.steps
        } else {
            self.max_steps
        }
    }
}

/// Steps `step` from the episode's initial state until the goal holds or `max_steps`
/// actions have been taken. Returns (success, steps taken).
pub fn episode_loop(
    episode: &Episode,
    max_steps: usize,
    mut step: impl FnMut(&WorldState) -> Result<Action>,
) -> Result<(bool, usize)> {
    let mut state = episode.initial.clone();
    for t in 0..max_steps {
        if state.satisfies(&episode.goal)? {
            return Ok((true, t));
        }
        let action = step(&state)?;
        state = state.step(&action).state;
    }
    Ok((state.satisfies(&episode.goal)?, max_steps))
}

fn check_consistent(mixture: &Mixture, processor: &GraphProcessor, prototypes: &PrototypeSet) -> Result<()> {
    let l = mixture.dims().layers;
    if processor.n_layers() != l || prototypes.n_layers() != l {
        return Err(TmowError::Contract(format!(
            "mixture has {l} layers, router {} and prototypes {}",
            processor.n_layers(),
            prototypes.n_layers()
        )));
    }
    if prototypes.n_experts() != mixture.n_experts() {
        return Err(TmowError::Contract(format!(
            "{} prototypes for {} adapters",
            prototypes.n_experts(),
            mixture.n_experts()
        )));
    }
    Ok(())
}

/// Routed decision for one layer stack of embeddings, with the ablation applied.
pub fn decide(
    embeddings: &[Vec<f64>],
    processor: &GraphProcessor,
    prototypes: &PrototypeSet,
    options: &EpisodeOptions,
) -> Result<RoutingDecision> {
    let d = route(embeddings, prototypes, options.k, options.tau)?;
    Ok(match options.ablation {
        RoutingAblation::Full => d,
        RoutingAblation::Object => d.broadcast(processor.message_passing_layers().first().copied().unwrap_or(0)),
        RoutingAblation::Scene => d.broadcast(embeddings.len() - 1),
    })
}

/// One routed episode: route, act with the mixture, step the world, optionally refine.
pub fn run_episode(
    mixture: &Mixture,
    processor: &GraphProcessor,
    prototypes: &mut PrototypeSet,
    vocab: &Vocabulary,
    episode: &Episode,
    options: &EpisodeOptions,
    seed: u64,
) -> Result<EpisodeResult> {
    check_consistent(mixture, processor, prototypes)?;
    if let Some(cfg) = &options.refine {
        cfg.validate()?;
    }
    let start = options.refine.is_some().then(|| prototypes.clone());
    let mut decisions = Vec::new();
    let mut visited = Vec::new();
    let (success, steps) = episode_loop(episode, options.max_steps, |state| {
        let input = RouterInput::new(vocab, &options.relation_weights, &episode.instruction, state)?;
        let e = processor.embed(&input)?;
        let decision = decide(&e, processor, prototypes, options)?;
        let action = mixture.act(vocab, &episode.instruction, state, Some(&decision.weights))?;
        decisions.push(decision.weights);
        if let Some(cfg) = &options.refine {
            refine_prototypes(prototypes, &e, cfg)?;
            visited.push(e);
        }
        Ok(action)
    })?;
    let entropy_shift = match start {
        Some(start) if !visited.is_empty() => Some((
            mean_layer_entropy(&visited, processor, &start, options)?,
            mean_layer_entropy(&visited, processor, prototypes, options)?,
        )),
        _ => None,
    };
    Ok(EpisodeResult {
        domain_id: episode.domain_id.clone(),
        success,
        steps,
        max_steps: options.max_steps,
        decisions,
        refine: options.refine.is_some(),
        seed,
        entropy_shift,
    })
}

fn mean_layer_entropy(
    embeddings: &[Vec<Vec<f64>>],
    processor: &GraphProcessor,
    prototypes: &PrototypeSet,
    options: &EpisodeOptions,
) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; prototypes.n_layers()];
    for e in embeddings {
        let h = routing_entropy(&decide(e, processor, prototypes, options)?);
        sum.iter_mut().zip(h).for_each(|(s, x)| *s += x);
    }
    Ok(sum.into_iter().map(|s| s / embeddings.len() as f64).collect())
}

/// Episode driven by the frozen base model alone.
pub fn run_base_episode(
    mixture: &Mixture,
    vocab: &Vocabulary,
    episode: &Episode,
    max_steps: usize,
    seed: u64,
) -> Result<EpisodeResult> {
    let (success, steps) = episode_loop(episode, max_steps, |state| mixture.act(vocab, &episode.instruction, state, None))?;
    Ok(EpisodeResult {
        domain_id: episode.domain_id.clone(),
        success,
        steps,
        max_steps,
        decisions: Vec::new(),
        refine: false,
        seed,
        entropy_shift: None,
    })
}

/// Fraction of successful episodes.
pub fn metric_sr(results: &[EpisodeResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(TmowError::Config("success rate of zero episodes".into()));
    }
    Ok(results.iter().filter(|r| r.success).count() as f64 / results.len() as f64)
}

/// Mean steps per episode; failures count as `max_steps`.
pub fn metric_ps(results: &[EpisodeResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(TmowError::Config("pending steps of zero episodes".into()));
    }
    Ok(results.iter().map(|r| r.pending_steps() as f64).sum::<f64>() / results.len() as f64)
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn weight_entropy(w: &[f64]) -> f64 {
    -w.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Entropy of the normalized weights at every layer.
pub fn routing_entropy(decision: &RoutingDecision) -> Vec<f64> {
    decision.weights.iter().map(|w| weight_entropy(w)).collect()
}

/// First step index whose recorded loss is at or below `threshold`.
pub fn steps_to_threshold(losses: &[f64], threshold: f64) -> Option<usize> {
    losses.iter().position(|l| *l <= threshold)
}
