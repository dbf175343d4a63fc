use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::processor::{GraphProcessor, RouterInput};
use crate::error::{Result, TmowError};
use crate::graphworld::catalog::CATALOG;
use crate::graphworld::ObservationGraph;
use crate::nncore::{LrSchedule, Optimizer, OptimizerState, Tape, Var};
use crate::worldmodel::TrainTrace;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveParams {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub warmup: usize,
    pub tau: f64,
    pub lambda: f64,
    pub feature_drop: f64,
    pub edge_drop: f64,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: Optimizer,
}

impl Default for ContrastiveParams {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.05,
            batch: 24,
            warmup: 50,
            tau: 0.1,
            lambda: 1.0,
            feature_drop: 0.1,
            edge_drop: 0.2,
            seed: 0,
            optimizer: Optimizer::Adam,
        }
    }
}

impl ContrastiveParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(TmowError::param("contrastive tau", "must be positive"));
        }
        if !(self.lambda >= 0.0) {
            return Err(TmowError::param("lambda", "must be nonnegative"));
        }
        if !(self.lr > 0.0) {
            return Err(TmowError::param("contrastive lr", "must be positive"));
        }
        if self.batch < 2 {
            return Err(TmowError::param("contrastive batch", "must be at least 2"));
        }
        Ok(())
    }
}

/// Stochastic view of a graph: attribute/state bits of non-agent nodes are dropped at
/// `feature_drop` (the identity one-hot is kept) and undirected edges at `edge_drop`.
pub fn augment_graph(g: &ObservationGraph, feature_drop: f64, edge_drop: f64, seed: u64) -> ObservationGraph {
    let (fp, ep) = (feature_drop.clamp(0.0, 1.0), edge_drop.clamp(0.0, 1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = g.clone();
    let (n, d) = (g.n, g.feature_width);
    let identity = CATALOG.len().min(d);
    for node in 1..n {
        for f in identity..d {
            if fp > 0.0 && rng.random_bool(fp) {
                out.features[node * d + f] = 0.0;
            }
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            if g.adjacency[i * n + j] != 0.0 && ep > 0.0 && rng.random_bool(ep) {
                for (a, b) in [(i, j), (j, i)] {
                    out.adjacency[a * n + b] = 0.0;
                    out.relation[a * n + b] = 0.0;
                }
            }
        }
    }
    out
}

/// Contrastive loss values on one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClLoss {
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
}

/// Builds `L1`, `L2` and `L_CL` over final-layer embeddings `z1` (Ψ1 views, rows) and
/// `z2` (Ψ2 views, columns, the anchors).
pub fn cl_on_tape(
    tape: &mut Tape,
    z1: Var,
    z2: Var,
    domains: &[usize],
    tau: f64,
    lambda: f64,
) -> Result<(Var, Var, Var)> {
    if lambda > 0.0 && domains.iter().all(|d| *d == domains[0]) {
        return Err(TmowError::Degenerate(
            "domain-aware contrastive loss needs a batch from at least two domains".into(),
        ));
    }
    cl_on_tape_unguarded(tape, z1, z2, domains, tau, lambda)
}

pub(crate) fn cl_on_tape_unguarded(
    tape: &mut Tape,
    z1: Var,
    z2: Var,
    domains: &[usize],
    tau: f64,
    lambda: f64,
) -> Result<(Var, Var, Var)> {
    let b = domains.len();
    let s = tape.cosine_rows(z1, z2)?;
    let instance: Vec<bool> = (0..b * b).map(|k| k / b == k % b).collect();
    let domain: Vec<bool> = (0..b * b).map(|k| domains[k / b] == domains[k % b]).collect();
    let l1 = tape.info_nce(s, &instance, tau)?;
    let l2 = tape.info_nce(s, &domain, tau)?;
    let total = if lambda == 0.0 {
        l1
    } else {
        let a = tape.scale(l1, 1.0 / (lambda + 1.0));
        let c = tape.scale(l2, lambda / (lambda + 1.0));
        tape.add(a, c)?
    };
    Ok((l1, l2, total))
}

fn view_seed(seed: u64, step: usize, item: usize, view: u64) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D)
        ^ ((step as u64) << 24)
        ^ ((item as u64) << 2)
        ^ view
}

struct Views {
    tape: Tape,
    params: Vec<Var>,
    l1: Var,
    l2: Var,
    total: Var,
}

fn build_views(
    processor: &GraphProcessor,
    batch: &[(&RouterInput, usize)],
    params: &ContrastiveParams,
    step: usize,
    trainable: bool,
) -> Result<Views> {
    let views: Vec<(RouterInput, RouterInput)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, (x, _))| {
            let view = |v| RouterInput {
                graph: augment_graph(&x.graph, params.feature_drop, params.edge_drop, view_seed(params.seed, step, i, v)),
                instruction: x.instruction.clone(),
            };
            (view(1), view(2))
        })
        .collect();
    let mut tape = Tape::new();
    let p = processor.to_tape(&mut tape, trainable);
    let mut rows1 = Vec::with_capacity(batch.len());
    let mut rows2 = Vec::with_capacity(batch.len());
    for (a, b) in &views {
        for (x, rows) in [(a, &mut rows1), (b, &mut rows2)] {
            let hs = processor.layers_on_tape(&mut tape, &p, x)?;
            let last = *hs.last().expect("at least one layer");
            rows.push(tape.mean_rows(last)?);
        }
    }
    let z1 = tape.stack_rows(&rows1)?;
    let z2 = tape.stack_rows(&rows2)?;
    let domains: Vec<usize> = batch.iter().map(|(_, d)| *d).collect();
    let (l1, l2, total) = cl_on_tape(&mut tape, z1, z2, &domains, params.tau, params.lambda)?;
    Ok(Views {
        tape,
        params: p,
        l1,
        l2,
        total,
    })
}

/// Loss values on a fixed batch with augmentation stream `step`.
pub fn contrastive_losses(
    processor: &GraphProcessor,
    batch: &[(&RouterInput, usize)],
    params: &ContrastiveParams,
    step: usize,
) -> Result<ClLoss> {
    params.validate()?;
    let v = build_views(processor, batch, params, step, false)?;
    Ok(ClLoss {
        l1: v.tape.scalar(v.l1),
        l2: v.tape.scalar(v.l2),
        total: v.tape.scalar(v.total),
    })
}

/// Trains every processor parameter on `L_CL` over `(input, domain label)` items.
pub fn contrastive_pretrain(
    processor: &mut GraphProcessor,
    items: &[(RouterInput, usize)],
    params: &ContrastiveParams,
) -> Result<TrainTrace> {
    params.validate()?;
    let distinct = {
        let mut d: Vec<usize> = items.iter().map(|(_, d)| *d).collect();
        d.sort_unstable();
        d.dedup();
        d.len()
    };
    if items.len() < 2 || (params.lambda > 0.0 && distinct < 2) {
        return Err(TmowError::Degenerate(
            "contrastive pretraining needs items from at least two domains".into(),
        ));
    }
    let schedule = LrSchedule::cosine(params.lr, params.warmup.min(params.steps), params.steps);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let b = params.batch.min(items.len());
    let mut trace = TrainTrace::default();
    let sizes: Vec<usize> = processor.tensors_mut().iter().map(|t| t.numel()).collect();
    let mut opt = OptimizerState::new(params.optimizer, &sizes);
    for step in 0..params.steps {
        let batch: Vec<(&RouterInput, usize)> = loop {
            let idx = sample(&mut rng, items.len(), b).into_vec();
            let first = items[idx[0]].1;
            if params.lambda == 0.0 || idx.iter().any(|i| items[*i].1 != first) {
                break idx.iter().map(|i| (&items[*i].0, items[*i].1)).collect();
            }
        };
        let v = build_views(processor, &batch, params, step, true)?;
        trace.record(step, v.tape.scalar(v.total))?;
        let grads = v.tape.backward(v.total)?;
        let g: Vec<Option<&[f64]>> = v.params.iter().map(|var| grads.get(*var)).collect();
        opt.step(processor.tensors_mut(), &g, schedule.lr_at(step))?;
    }
    Ok(trace)
}
