use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TmowError};
use crate::graphworld::{Demonstration, ObservationGraph, RelationWeights, Vocabulary};
use crate::router::{route, Router, RouterInput};
use crate::worldmodel::{
    one_hot_weights, samples_from_demo, train_adapter, Adapter, AdapterLayer, LayerWeights, Mixture, Routing,
    Sample, TrainParams,
};
use crate::nncore::{Optimizer, Tensor};

/// Union of several observation graphs: nodes are merged by label with averaged
/// features, `A` is the edge union and `R` the elementwise maximum.
pub fn combined_graph(graphs: &[ObservationGraph]) -> Result<ObservationGraph> {
    let first = graphs
        .first()
        .ok_or_else(|| TmowError::Config("combined graph needs at least one observation".into()))?;
    let d = first.feature_width;
    let mut labels: Vec<String> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for g in graphs {
        g.validate()?;
        if g.feature_width != d {
            return Err(TmowError::Contract(format!(
                "observation feature width {} differs from {d}",
                g.feature_width
            )));
        }
        for name in &g.labels {
            if !index.contains_key(name.as_str()) {
                index.insert(name, labels.len());
                labels.push(name.clone());
            }
        }
    }
    let n = labels.len();
    let mut sums = vec![0.0; n * d];
    let mut counts = vec![0usize; n];
    let mut adjacency = vec![0.0; n * n];
    let mut relation = vec![0.0; n * n];
    for g in graphs {
        let map: Vec<usize> = g.labels.iter().map(|l| index[l.as_str()]).collect();
        for (u, &gu) in map.iter().enumerate() {
            counts[gu] += 1;
            for f in 0..d {
                sums[gu * d + f] += g.features[u * d + f];
            }
            for (v, &gv) in map.iter().enumerate() {
                let (src, dst) = (u * g.n + v, gu * n + gv);
                adjacency[dst] = f64::max(adjacency[dst], g.adjacency[src]);
                relation[dst] = f64::max(relation[dst], g.relation[src]);
            }
        }
    }
    for (u, c) in counts.iter().enumerate() {
        for f in 0..d {
            sums[u * d + f] /= *c as f64;
        }
    }
    Ok(ObservationGraph {
        n,
        feature_width: d,
        features: sums,
        adjacency,
        relation,
        labels,
    })
}

/// Combined graph over a demonstration's observations, paired with its instruction.
pub fn demo_router_input(vocab: &Vocabulary, weights: &RelationWeights, demo: &Demonstration) -> Result<RouterInput> {
    let mut graphs: Vec<ObservationGraph> = demo.trajectory.observations().map(|s| s.observe(weights)).collect();
    if graphs.is_empty() {
        graphs.push(demo.trajectory.initial.observe(weights));
    }
    Ok(RouterInput {
        graph: combined_graph(&graphs)?,
        instruction: vocab.encode_instruction(&demo.instruction)?,
    })
}

/// Per-layer convex combination of the adapters, factor by factor.
pub fn distill_init(adapters: &[Adapter], weights: &LayerWeights) -> Result<Adapter> {
    let first = adapters
        .first()
        .ok_or_else(|| TmowError::Contract("distillation needs at least one adapter".into()))?;
    let layers = first.layers.len();
    for a in adapters {
        if a.layers.len() != layers || a.rank != first.rank {
            return Err(TmowError::Contract("adapters differ in layer count or rank".into()));
        }
    }
    if weights.len() != layers {
        return Err(TmowError::Contract(format!(
            "{} routing layers for {layers} adapter layers",
            weights.len()
        )));
    }
    let mut out = Vec::with_capacity(layers);
    for (l, w) in weights.iter().enumerate() {
        if w.len() != adapters.len() {
            return Err(TmowError::Contract(format!(
                "layer {l} has {} weights for {} adapters",
                w.len(),
                adapters.len()
            )));
        }
        let combine = |pick: fn(&AdapterLayer) -> &Tensor| {
            let shape = pick(&first.layers[l]).shape().to_vec();
            let mut acc = vec![0.0; shape.iter().product()];
            for (a, wj) in adapters.iter().zip(w) {
                if *wj == 0.0 {
                    continue;
                }
                for (x, y) in acc.iter_mut().zip(pick(&a.layers[l]).data()) {
                    *x += wj * y;
                }
            }
            Tensor::new(shape, acc)
        };
        out.push(AdapterLayer {
            down: combine(|a| &a.down)?,
            up: combine(|a| &a.up)?,
        });
    }
    Ok(Adapter {
        rank: first.rank,
        layers: out,
    })
}

/// Few-shot demonstrations from one novel domain plus the fine-tune schedule.
#[derive(Debug, Clone)]
pub struct AugmentationRequest {
    pub demos: Vec<Demonstration>,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub freeze_down: bool,
    pub clip_norm: Option<f64>,
}

impl AugmentationRequest {
    pub fn validate(&self) -> Result<()> {
        if self.demos.is_empty() {
            return Err(TmowError::Config("augmentation needs at least one demonstration".into()));
        }
        if !(self.lr > 0.0) {
            return Err(TmowError::param("few-shot lr", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterInit {
    #[default]
    Distilled,
    /// Fresh adapter with the standard initialization (random first factor, zero second).
    Scratch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSettings {
    pub k: usize,
    pub tau: f64,
    pub relation_weights: RelationWeights,
    pub init: AdapterInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentReport {
    pub init: AdapterInit,
    pub expert: usize,
    /// Routing weights used to initialize the new adapter, per layer.
    pub distill_weights: LayerWeights,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Full-batch loss before every fine-tune step.
    pub losses: Vec<f64>,
}

/// Appends one expert and its prototypes for the domain of `request.demos`.
/// Existing adapters and prototypes are left untouched.
pub fn augment_model(
    mixture: &mut Mixture,
    router: &mut Router,
    vocab: &Vocabulary,
    request: &AugmentationRequest,
    settings: &AugmentSettings,
) -> Result<AugmentReport> {
    request.validate()?;
    let n = mixture.n_experts();
    if router.prototypes.n_experts() != n || router.prototypes.n_layers() != mixture.dims().layers {
        return Err(TmowError::Contract(format!(
            "router holds {} experts over {} layers, mixture has {n} over {}",
            router.prototypes.n_experts(),
            router.prototypes.n_layers(),
            mixture.dims().layers
        )));
    }
    let mut embedding = vec![vec![0.0; router.processor.hidden]; router.processor.n_layers()];
    for demo in &request.demos {
        let input = demo_router_input(vocab, &settings.relation_weights, demo)?;
        for (m, e) in embedding.iter_mut().zip(router.processor.embed(&input)?) {
            m.iter_mut().zip(e).for_each(|(a, b)| *a += b);
        }
    }
    let count = request.demos.len() as f64;
    embedding.iter_mut().flatten().for_each(|x| *x /= count);

    let distill_weights = route(&embedding, &router.prototypes, settings.k, settings.tau)?.weights;
    let adapter = match settings.init {
        AdapterInit::Distilled => distill_init(&mixture.adapters, &distill_weights)?,
        AdapterInit::Scratch => Adapter::new(mixture.dims(), &mut ChaCha8Rng::seed_from_u64(request.seed)),
    };
    let samples: Vec<Sample> = request
        .demos
        .iter()
        .map(|d| samples_from_demo(vocab, d))
        .collect::<Result<Vec<_>>>()?
        .concat();
    if samples.is_empty() {
        return Err(TmowError::Config("few-shot demonstrations contain no steps".into()));
    }
    let single_loss = |a: &Adapter| -> Result<f64> {
        let m = Mixture::new(mixture.base.clone(), vec![a.clone()])?;
        let w = one_hot_weights(mixture.dims().layers, 1, 0);
        Ok(m.loss(&samples, Routing::Shared(&w))?.total)
    };
    let initial_loss = single_loss(&adapter)?;
    let (adapter, losses) = if request.steps == 0 {
        (adapter, Vec::new())
    } else {
        let params = TrainParams {
            steps: request.steps,
            lr: request.lr,
            batch: samples.len(),
            warmup: 0,
            seed: request.seed,
            optimizer: request.optimizer,
            freeze_down: request.freeze_down,
            clip_norm: request.clip_norm,
        };
        let (a, trace) = train_adapter(&mixture.base, adapter, &samples, &params)?;
        (a, trace.losses)
    };
    let final_loss = single_loss(&adapter)?;

    let mut prototypes = router.prototypes.clone();
    prototypes.push_expert(embedding)?;
    mixture.adapters.push(adapter);
    router.prototypes = prototypes;
    Ok(AugmentReport {
        init: settings.init,
        expert: n,
        distill_weights,
        initial_loss,
        final_loss,
        losses,
    })
}
