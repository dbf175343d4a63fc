use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::report::{MetricRow, ScenarioReport};
use super::{run_base_episode, run_episode, EpisodeOptions, EpisodeResult, RoutingAblation};
use crate::adapt::{augment_model, AdapterInit, AugmentReport, AugmentSettings, AugmentationRequest, Persistence, RefinementConfig};
use crate::error::{Result, TmowError};
use crate::nncore::Optimizer;
use crate::graphworld::{Dataset, DomainSpec, Episode, RelationWeights, Vocabulary};
use crate::router::Router;
use crate::worldmodel::Mixture;

/// Everything an evaluation needs: data, trained mixture and router with prototypes.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub vocab: Vocabulary,
    pub dataset: Dataset,
    pub mixture: Mixture,
    pub router: Router,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub k: usize,
    pub tau: f64,
    pub refinement: RefinementConfig,
    pub max_steps: usize,
    pub episodes_per_domain: usize,
    pub relation_weights: RelationWeights,
    pub seed: u64,
    pub fewshot_steps: usize,
    pub fewshot_lr: f64,
    pub fewshot_optimizer: Optimizer,
    pub fewshot_freeze_down: bool,
    pub fewshot_clip_norm: Option<f64>,
    pub continuous_phases: usize,
    pub continuous_shots: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Base,
    Routed { refine: bool, ablation: RoutingAblation },
}

impl Variant {
    pub const TMOW: Variant = Variant::Routed {
        refine: true,
        ablation: RoutingAblation::Full,
    };
    pub const NO_REFINE: Variant = Variant::Routed {
        refine: false,
        ablation: RoutingAblation::Full,
    };
}

/// Report plus the raw episodes behind it, keyed by variant label.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub report: ScenarioReport,
    pub results: BTreeMap<String, Vec<EpisodeResult>>,
    pub augmentations: Vec<(String, AugmentReport)>,
}

fn stream_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn domain_episodes(domain: &DomainSpec, settings: &EvalSettings) -> Result<Vec<(u64, Episode)>> {
    let seed = stream_seed(settings.seed, &format!("eval/{}", domain.domain_id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..settings.episodes_per_domain)
        .map(|i| Ok((seed.wrapping_add(i as u64), domain.sample_episode(&mut rng)?)))
        .collect()
}

fn options(settings: &EvalSettings, refine: bool, ablation: RoutingAblation) -> EpisodeOptions {
    EpisodeOptions {
        k: settings.k,
        tau: settings.tau,
        max_steps: settings.max_steps,
        refine: refine.then_some(settings.refinement),
        ablation,
        relation_weights: settings.relation_weights.clone(),
    }
}

/// Runs `episodes_per_domain` episodes on every domain. Refinement state is private to
/// each domain and, under `Persist`, carried across that domain's episodes.
pub fn evaluate_domains(
    mixture: &Mixture,
    router: &Router,
    vocab: &Vocabulary,
    domains: &[&DomainSpec],
    variant: Variant,
    settings: &EvalSettings,
) -> Result<Vec<EpisodeResult>> {
    let per_domain = domains
        .par_iter()
        .map(|d| {
            let episodes = domain_episodes(d, settings)?;
            match variant {
                Variant::Base => episodes
                    .iter()
                    .map(|(s, ep)| run_base_episode(mixture, vocab, ep, settings.max_steps, *s))
                    .collect::<Result<Vec<_>>>(),
                Variant::Routed { refine, ablation } => {
                    let opts = options(settings, refine, ablation);
                    let mut protos = router.prototypes.clone();
                    let mut out = Vec::with_capacity(episodes.len());
                    for (s, ep) in &episodes {
                        if settings.refinement.persistence == Persistence::PerEpisode {
                            protos = router.prototypes.clone();
                        }
                        out.push(run_episode(mixture, &router.processor, &mut protos, vocab, ep, &opts, *s)?);
                    }
                    Ok(out)
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_domain.into_iter().flatten().collect())
}

fn push_rows(
    report: &mut ScenarioReport,
    label: &str,
    results: &[EpisodeResult],
    art: &Artifacts,
) -> Result<()> {
    let mut ids: Vec<&str> = Vec::new();
    for r in results {
        if !ids.contains(&r.domain_id.as_str()) {
            ids.push(&r.domain_id);
        }
    }
    for id in &ids {
        let rs: Vec<EpisodeResult> = results.iter().filter(|r| r.domain_id == *id).cloned().collect();
        report.rows.push(MetricRow::from_results(label, id, &rs)?);
    }
    let (seen, unseen): (Vec<EpisodeResult>, Vec<EpisodeResult>) =
        results.iter().cloned().partition(|r| art.dataset.is_seen(&r.domain_id));
    if !seen.is_empty() && !unseen.is_empty() {
        report.rows.push(MetricRow::from_results(label, "seen", &seen)?);
        report.rows.push(MetricRow::from_results(label, "unseen", &unseen)?);
    }
    report.rows.push(MetricRow::from_results(label, "all", results)?);
    Ok(())
}

fn all_domains(art: &Artifacts) -> Vec<&DomainSpec> {
    art.dataset.seen.iter().chain(&art.dataset.unseen).collect()
}

fn new_run(name: &str, config: &serde_json::Value, settings: &EvalSettings) -> ScenarioRun {
    ScenarioRun {
        report: ScenarioReport::new(name, config.clone(), vec![settings.seed]),
        results: BTreeMap::new(),
        augmentations: Vec::new(),
    }
}

fn add_variant(
    run: &mut ScenarioRun,
    art: &Artifacts,
    label: &str,
    results: Vec<EpisodeResult>,
) -> Result<()> {
    push_rows(&mut run.report, label, &results, art)?;
    run.results.insert(label.to_string(), results);
    Ok(())
}

/// Seen and unseen domains under the frozen base, routed mixture with refinement and
/// routed mixture without refinement.
pub fn scenario_zero_shot(art: &Artifacts, settings: &EvalSettings, config: &serde_json::Value) -> Result<ScenarioRun> {
    let mut run = new_run("zero-shot", config, settings);
    let domains = all_domains(art);
    let base = Mixture::new(art.mixture.base.clone(), Vec::new())?;
    for (label, variant) in [("base", Variant::Base), ("tmow", Variant::TMOW), ("no-refine", Variant::NO_REFINE)] {
        let m = if variant == Variant::Base { &base } else { &art.mixture };
        let rs = evaluate_domains(m, &art.router, &art.vocab, &domains, variant, settings)?;
        add_variant(&mut run, art, label, rs)?;
    }
    run.report.set_routing_summary(&run.results["tmow"]);
    Ok(run)
}

/// Augments `mixture` and `router` in place with an expert for `domain` from its first `shots` demonstrations.
pub fn augment_domain(
    mixture: &mut Mixture,
    router: &mut Router,
    art: &Artifacts,
    domain: &DomainSpec,
    shots: usize,
    init: AdapterInit,
    settings: &EvalSettings,
) -> Result<AugmentReport> {
    let demos: Vec<_> = art.dataset.demos_for(&domain.domain_id).take(shots).cloned().collect();
    if demos.len() < shots {
        return Err(TmowError::Config(format!(
            "domain {} has {} demonstrations, {shots} requested",
            domain.domain_id,
            demos.len()
        )));
    }
    let request = AugmentationRequest {
        demos,
        lr: settings.fewshot_lr,
        optimizer: settings.fewshot_optimizer,
        freeze_down: settings.fewshot_freeze_down,
        clip_norm: settings.fewshot_clip_norm,
        steps: settings.fewshot_steps,
        seed: stream_seed(settings.seed, &format!("augment/{}", domain.domain_id)),
    };
    let aug = AugmentSettings {
        k: settings.k,
        tau: settings.tau,
        relation_weights: settings.relation_weights.clone(),
        init,
    };
    augment_model(mixture, router, &art.vocab, &request, &aug)
}

/// Each unseen domain gets its own expert from `shots` demonstrations and is then
/// evaluated with refinement.
pub fn scenario_few_shot(
    art: &Artifacts,
    settings: &EvalSettings,
    shots: usize,
    init: AdapterInit,
    config: &serde_json::Value,
) -> Result<ScenarioRun> {
    let name = match init {
        AdapterInit::Distilled => format!("few-shot-{shots}"),
        AdapterInit::Scratch => format!("few-shot-{shots}-scratch"),
    };
    let mut run = new_run(&name, config, settings);
    let per_domain = art
        .dataset
        .unseen
        .par_iter()
        .map(|d| {
            let mut mixture = art.mixture.clone();
            let mut router = art.router.clone();
            let aug = augment_domain(&mut mixture, &mut router, art, d, shots, init, settings)?;
            let rs = evaluate_domains(&mixture, &router, &art.vocab, &[d], Variant::TMOW, settings)?;
            Ok((d.domain_id.clone(), aug, rs))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut all = Vec::new();
    for (id, aug, rs) in per_domain {
        run.augmentations.push((id, aug));
        all.extend(rs);
    }
    add_variant(&mut run, art, "tmow", all)?;
    run.report.set_routing_summary(&run.results["tmow"]);
    Ok(run)
}

/// Unseen domains arrive in `continuous_phases` groups; after each group is added the
/// growing mixture is evaluated on the seen domains and every domain added so far.
pub fn scenario_continuous(art: &Artifacts, settings: &EvalSettings, config: &serde_json::Value) -> Result<ScenarioRun> {
    if settings.continuous_phases == 0 {
        return Err(TmowError::param("continuous_phases", "must be at least 1"));
    }
    let mut run = new_run("continuous", config, settings);
    let mut mixture = art.mixture.clone();
    let mut router = art.router.clone();
    let unseen = &art.dataset.unseen;
    let per_phase = unseen.len().div_ceil(settings.continuous_phases).max(1);
    let mut arrived: Vec<&DomainSpec> = Vec::new();
    let mut last = Vec::new();
    for (p, group) in unseen.chunks(per_phase).enumerate() {
        for d in group {
            let aug = augment_domain(&mut mixture, &mut router, art, d, settings.continuous_shots, AdapterInit::Distilled, settings)?;
            run.augmentations.push((d.domain_id.clone(), aug));
            arrived.push(d);
        }
        let domains: Vec<&DomainSpec> = art.dataset.seen.iter().chain(arrived.iter().copied()).collect();
        let rs = evaluate_domains(&mixture, &router, &art.vocab, &domains, Variant::TMOW, settings)?;
        last = rs.clone();
        add_variant(&mut run, art, &format!("phase-{}", p + 1), rs)?;
    }
    run.report.set_routing_summary(&last);
    Ok(run)
}

/// Object, Scene, NoRefine and Scratch variants, plus one report per entry of the
/// top-K sweep. Each sweep entry brings the artifacts trained for that K.
pub fn run_ablations(
    art: &Artifacts,
    settings: &EvalSettings,
    k_sweep: &[(usize, &Artifacts)],
    config: &serde_json::Value,
) -> Result<Vec<ScenarioRun>> {
    let domains = all_domains(art);
    let mut runs = Vec::new();
    for (name, variant) in [
        ("ablation-object", Variant::Routed { refine: true, ablation: RoutingAblation::Object }),
        ("ablation-scene", Variant::Routed { refine: true, ablation: RoutingAblation::Scene }),
        ("ablation-no-refine", Variant::NO_REFINE),
    ] {
        let mut run = new_run(name, config, settings);
        let rs = evaluate_domains(&art.mixture, &art.router, &art.vocab, &domains, variant, settings)?;
        add_variant(&mut run, art, "tmow", rs)?;
        run.report.set_routing_summary(&run.results["tmow"]);
        runs.push(run);
    }
    runs.push(scenario_few_shot(art, settings, 5, AdapterInit::Scratch, config)?);
    for (k, a) in k_sweep {
        let s = EvalSettings { k: *k, ..settings.clone() };
        let mut run = new_run(&format!("top-k-{k}"), config, &s);
        let rs = evaluate_domains(&a.mixture, &a.router, &a.vocab, &all_domains(a), Variant::TMOW, &s)?;
        add_variant(&mut run, a, "tmow", rs)?;
        run.report.set_routing_summary(&run.results["tmow"]);
        runs.push(run);
    }
    Ok(runs)
}
