//! Training and evaluation stages wired from a [`RunConfig`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::adapt::AdapterInit;
use crate::config::RunConfig;
use crate::error::{Result, TmowError};
use crate::graphworld::{demonstrate, Dataset, Demonstration, Vocabulary};
use crate::harness::{
    run_ablations, scenario_continuous, scenario_few_shot, scenario_zero_shot, Artifacts, ScenarioRun,
};
use crate::router::{
    contrastive_pretrain, extract_prototypes, GraphProcessor, PrototypeSet, Router, RouterInput,
};
use crate::worldmodel::{
    joint_train_mixture, samples_from_demo, train_adapter, train_base, Adapter, BaseModel, LayerWeights, Mixture,
    Sample, TrainTrace,
};

/// Derives an independent seed for one named use of the run seed.
pub fn stage_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(b"stage");
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn generate_data(cfg: &RunConfig, seed: u64) -> Result<Dataset> {
    Dataset::generate(&cfg.generation_params(seed))
}

/// Domain specs regenerated from the config, demonstrations from a JSONL file.
pub fn dataset_from_records(cfg: &RunConfig, seed: u64, records: Vec<(bool, Demonstration)>) -> Result<Dataset> {
    let mut params = cfg.generation_params(seed);
    params.episodes_per_domain = 0;
    let mut dataset = Dataset::generate(&params)?;
    for (seen, demo) in records {
        if dataset.is_seen(&demo.domain_id) != seen || dataset.domain(&demo.domain_id).is_none() {
            return Err(TmowError::Contract(format!(
                "demonstration for domain {} does not match the configured domain lists",
                demo.domain_id
            )));
        }
        dataset.demos.push(demo);
    }
    Ok(dataset)
}

fn domain_samples(vocab: &Vocabulary, dataset: &Dataset, id: &str) -> Result<Vec<Sample>> {
    Ok(dataset
        .demos_for(id)
        .map(|d| samples_from_demo(vocab, d))
        .collect::<Result<Vec<_>>>()?
        .concat())
}

fn seen_samples(vocab: &Vocabulary, dataset: &Dataset) -> Result<Vec<Sample>> {
    Ok(dataset
        .seen
        .iter()
        .map(|d| domain_samples(vocab, dataset, &d.domain_id))
        .collect::<Result<Vec<_>>>()?
        .concat())
}

/// Brief base pretraining on the pooled seen-domain demonstrations.
pub fn train_base_stage(cfg: &RunConfig, vocab: &Vocabulary, dataset: &Dataset, seed: u64) -> Result<(BaseModel, TrainTrace)> {
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(seed, "base-init"));
    let mut base = BaseModel::new(cfg.model_dims(vocab), &mut rng)?;
    let samples = seen_samples(vocab, dataset)?;
    let trace = train_base(&mut base, &samples, &cfg.train_params(&cfg.training.base, stage_seed(seed, "base")))?;
    Ok((base, trace))
}

/// One adapter per seen domain. All adapters start from the same initialization.
pub fn train_adapters_stage(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    dataset: &Dataset,
    base: &BaseModel,
    seed: u64,
) -> Result<(Mixture, Vec<TrainTrace>)> {
    let init = Adapter::new(&base.dims, &mut ChaCha8Rng::seed_from_u64(stage_seed(seed, "adapter-init")));
    let trained = dataset
        .seen
        .par_iter()
        .map(|d| {
            let samples = domain_samples(vocab, dataset, &d.domain_id)?;
            let params = cfg.train_params(&cfg.training.adapter, stage_seed(seed, &format!("adapter/{}", d.domain_id)));
            train_adapter(base, init.clone(), &samples, &params)
        })
        .collect::<Result<Vec<_>>>()?;
    let (adapters, traces): (Vec<Adapter>, Vec<TrainTrace>) = trained.into_iter().unzip();
    Ok((Mixture::new(base.clone(), adapters)?, traces))
}

/// Every observation of the seen-domain demonstrations, labelled with its domain index.
pub fn router_items(cfg: &RunConfig, vocab: &Vocabulary, dataset: &Dataset) -> Result<Vec<(RouterInput, usize)>> {
    let mut out = Vec::new();
    for (j, d) in dataset.seen.iter().enumerate() {
        for demo in dataset.demos_for(&d.domain_id) {
            for s in &demo.trajectory.steps {
                out.push((
                    RouterInput::new(vocab, &cfg.env.relation_weights, &demo.instruction, &s.observation)?,
                    j,
                ));
            }
        }
    }
    Ok(out)
}

/// Observations from fresh expert episodes of every seen domain.
pub fn heldout_items(cfg: &RunConfig, vocab: &Vocabulary, dataset: &Dataset, seed: u64) -> Result<Vec<(RouterInput, usize)>> {
    let mut out = Vec::new();
    for (j, d) in dataset.seen.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(seed, &format!("heldout/{}", d.domain_id)));
        for _ in 0..cfg.eval.heldout_per_domain {
            let ep = d.sample_episode(&mut rng)?;
            let demo = demonstrate(&ep, cfg.env.max_steps)?;
            for s in &demo.trajectory.steps {
                out.push((RouterInput::new(vocab, &cfg.env.relation_weights, &demo.instruction, &s.observation)?, j));
            }
        }
    }
    Ok(out)
}

pub fn pretrain_router_stage(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    dataset: &Dataset,
    seed: u64,
) -> Result<(GraphProcessor, TrainTrace)> {
    let mut processor = GraphProcessor::new(
        cfg.processor_dims(vocab),
        &cfg.message_passing_layers(),
        stage_seed(seed, "router-init"),
    )?;
    let items = router_items(cfg, vocab, dataset)?;
    let trace = contrastive_pretrain(&mut processor, &items, &cfg.contrastive_params(stage_seed(seed, "contrastive")))?;
    Ok((processor, trace))
}

/// Mean embedding of every seen domain's demonstration observations.
pub fn extract_prototypes_stage(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    dataset: &Dataset,
    processor: &GraphProcessor,
) -> Result<PrototypeSet> {
    let items = router_items(cfg, vocab, dataset)?;
    let mut set = PrototypeSet::empty(processor.n_layers());
    for j in 0..dataset.seen.len() {
        let inputs: Vec<RouterInput> = items.iter().filter(|(_, d)| *d == j).map(|(x, _)| x.clone()).collect();
        set.push_expert(extract_prototypes(processor, &inputs)?)?;
    }
    Ok(set)
}

/// Fraction of items whose final-layer best-scoring expert is their own domain.
pub fn identifiability(router: &Router, items: &[(RouterInput, usize)]) -> Result<f64> {
    if items.is_empty() {
        return Err(TmowError::Config("identifiability over zero observations".into()));
    }
    let hits = items
        .par_iter()
        .map(|(x, j)| {
            let d = router.route(x, 1, 1.0)?;
            let last = d.scores.last().expect("at least one layer");
            let best = (0..last.len()).fold(0, |b, i| if last[i] > last[b] { i } else { b });
            Ok(usize::from(best == *j))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / items.len() as f64)
}

/// Routes every seen-domain training sample once and trains all adapters jointly
/// under those fixed weights.
pub fn joint_train_stage(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    dataset: &Dataset,
    mixture: &mut Mixture,
    router: &Router,
    k: usize,
    seed: u64,
) -> Result<TrainTrace> {
    let mut pairs = Vec::new();
    for d in &dataset.seen {
        for demo in dataset.demos_for(&d.domain_id) {
            for s in &demo.trajectory.steps {
                pairs.push((demo, s));
            }
        }
    }
    let routed = pairs
        .par_iter()
        .map(|(demo, s)| {
            let input = RouterInput::new(vocab, &cfg.env.relation_weights, &demo.instruction, &s.observation)?;
            let w: LayerWeights = router.route(&input, k, cfg.router.tau)?.weights;
            Ok((Sample::from_step(vocab, &demo.instruction, s)?, w))
        })
        .collect::<Result<Vec<_>>>()?;
    let (samples, weights): (Vec<Sample>, Vec<LayerWeights>) = routed.into_iter().unzip();
    joint_train_mixture(
        mixture,
        &samples,
        &weights,
        &cfg.train_params(&cfg.training.joint, stage_seed(seed, &format!("joint/k{k}"))),
    )
}

#[derive(Debug, Clone, Default)]
pub struct Traces {
    pub base: TrainTrace,
    pub adapters: Vec<TrainTrace>,
    pub contrastive: TrainTrace,
    pub joint: TrainTrace,
}

/// Result of the full training pipeline for one seed.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub artifacts: Artifacts,
    /// Adapters before joint training, the starting point of every K retrain.
    pub adapters: Mixture,
    pub traces: Traces,
}

pub fn train_pipeline(cfg: &RunConfig, seed: u64) -> Result<TrainedRun> {
    cfg.validate()?;
    let vocab = Vocabulary::new();
    let dataset = generate_data(cfg, seed)?;
    let (base, base_trace) = train_base_stage(cfg, &vocab, &dataset, seed)?;
    let (adapters, adapter_traces) = train_adapters_stage(cfg, &vocab, &dataset, &base, seed)?;
    let (processor, cl_trace) = pretrain_router_stage(cfg, &vocab, &dataset, seed)?;
    let prototypes = extract_prototypes_stage(cfg, &vocab, &dataset, &processor)?;
    let router = Router { processor, prototypes };
    let mut mixture = adapters.clone();
    let joint = joint_train_stage(cfg, &vocab, &dataset, &mut mixture, &router, cfg.router.k, seed)?;
    Ok(TrainedRun {
        artifacts: Artifacts {
            vocab,
            dataset,
            mixture,
            router,
        },
        adapters,
        traces: Traces {
            base: base_trace,
            adapters: adapter_traces,
            contrastive: cl_trace,
            joint,
        },
    })
}

/// Artifacts with the joint phase redone at another K from the same adapters.
pub fn retrain_for_k(cfg: &RunConfig, run: &TrainedRun, k: usize, seed: u64) -> Result<Artifacts> {
    let a = &run.artifacts;
    let mut mixture = run.adapters.clone();
    joint_train_stage(cfg, &a.vocab, &a.dataset, &mut mixture, &a.router, k, seed)?;
    Ok(Artifacts {
        mixture,
        ..a.clone()
    })
}

/// Every scenario and ablation for one seed, in report order.
pub fn evaluate_all(cfg: &RunConfig, run: &TrainedRun, seed: u64) -> Result<Vec<ScenarioRun>> {
    let art = &run.artifacts;
    let settings = cfg.eval_settings(seed);
    let snapshot = serde_json::to_value(cfg)?;
    let mut runs = vec![scenario_zero_shot(art, &settings, &snapshot)?];
    for shots in &cfg.eval.shots {
        runs.push(scenario_few_shot(art, &settings, *shots, AdapterInit::Distilled, &snapshot)?);
    }
    runs.push(scenario_continuous(art, &settings, &snapshot)?);
    runs.extend(ablation_runs(cfg, run, seed)?);
    Ok(runs)
}

/// Ablation variants and the top-K sweep, retraining the joint phase for every other K.
pub fn ablation_runs(cfg: &RunConfig, run: &TrainedRun, seed: u64) -> Result<Vec<ScenarioRun>> {
    let art = &run.artifacts;
    let swept: Vec<(usize, Artifacts)> = cfg
        .k_sweep()
        .into_iter()
        .map(|k| {
            if k == cfg.router.k {
                Ok((k, art.clone()))
            } else {
                Ok((k, retrain_for_k(cfg, run, k, seed)?))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<(usize, &Artifacts)> = swept.iter().map(|(k, a)| (*k, a)).collect();
    run_ablations(art, &cfg.eval_settings(seed), &refs, &serde_json::to_value(cfg)?)
}
