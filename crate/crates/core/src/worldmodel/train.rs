use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{loss_and_vars, Adapter, BaseModel, LayerWeights, Mixture, Routing, Sample};
use crate::error::{Result, TmowError};
use crate::nncore::{Gradients, LrSchedule, Optimizer, OptimizerState, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub warmup: usize,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Adapters keep their down-projection factors fixed and train only the up factors.
    #[serde(default)]
    pub freeze_down: bool,
    /// Rescales each step's adapter gradients to at most this global norm.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(TmowError::param("lr", "must be positive"));
        }
        if self.batch == 0 {
            return Err(TmowError::param("batch", "must be positive"));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(TmowError::param("clip_norm", "must be positive"));
        }
        Ok(())
    }

    fn schedule(&self) -> LrSchedule {
        LrSchedule::cosine(self.lr, self.warmup.min(self.steps), self.steps)
    }
}

/// Mini-batch loss recorded at every step, before that step's update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
}

impl TrainTrace {
    /// Records one step's loss; a non-finite loss means training diverged.
    pub(crate) fn record(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(TmowError::Degenerate(format!("training loss is {loss} at step {step}")));
        }
        self.losses.push(loss);
        Ok(())
    }

    /// Mean of the first and last `window` recorded losses.
    pub fn endpoints(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.losses.len();
        if n == 0 {
            return None;
        }
        let w = window.clamp(1, n);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.losses[..w]), mean(&self.losses[n - w..])))
    }
}

/// Uniform sampling with replacement from a fixed seed; a batch at least as large as
/// the sample set yields every index once, in order.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    n: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            n,
            batch,
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.batch >= self.n {
            return (0..self.n).collect();
        }
        (0..self.batch).map(|_| self.rng.random_range(0..self.n)).collect()
    }
}

fn apply(opt: &mut OptimizerState, grads: &Gradients, vars: &[Var], tensors: Vec<&mut Tensor>, lr: f64) -> Result<()> {
    let g: Vec<Option<&[f64]>> = vars.iter().map(|v| grads.get(*v)).collect();
    opt.step(tensors, &g, lr)
}

fn sizes(tensors: Vec<&mut Tensor>) -> Vec<usize> {
    tensors.iter().map(|t| t.numel()).collect()
}

/// Factor that brings the global norm of `grads` down to `clip`, or 1.
fn clip_scale(clip: Option<f64>, grads: &[Vec<Option<&[f64]>>]) -> f64 {
    let Some(c) = clip else { return 1.0 };
    let norm = grads.iter().flatten().flatten().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > c {
        c / norm
    } else {
        1.0
    }
}

fn require_samples(samples: &[Sample], what: &str) -> Result<()> {
    if samples.is_empty() {
        return Err(TmowError::Config(format!("no demonstrations to {what}")));
    }
    Ok(())
}

/// Trains every base parameter on a mixed pool of samples.
pub fn train_base(base: &mut BaseModel, samples: &[Sample], params: &TrainParams) -> Result<TrainTrace> {
    params.validate()?;
    require_samples(samples, "pretrain the base model")?;
    let schedule = params.schedule();
    let mut sampler = BatchSampler::new(samples.len(), params.batch, params.seed);
    let mut trace = TrainTrace::default();
    let mut opt = OptimizerState::new(params.optimizer, &sizes(base.tensors_mut()));
    for step in 0..params.steps {
        let batch: Vec<&Sample> = sampler.next_batch().into_iter().map(|i| &samples[i]).collect();
        let mut tape = Tape::new();
        let (_, _, total, f) = loss_and_vars(&mut tape, base, &[], true, &[], &batch, Routing::Base)?;
        trace.record(step, tape.scalar(total))?;
        let grads = tape.backward(total)?;
        apply(&mut opt, &grads, &f.base_vars, base.tensors_mut(), schedule.lr_at(step))?;
    }
    Ok(trace)
}

/// Trains one adapter on a frozen base with the adapter fully weighted at every layer.
pub fn train_adapter(
    base: &BaseModel,
    adapter: Adapter,
    samples: &[Sample],
    params: &TrainParams,
) -> Result<(Adapter, TrainTrace)> {
    params.validate()?;
    require_samples(samples, "train an adapter")?;
    let mut mixture = Mixture::new(base.clone(), vec![adapter])?;
    let weights = super::one_hot_weights(base.dims.layers, 1, 0);
    let routing = vec![weights; samples.len()];
    let trace = joint_train_mixture(&mut mixture, samples, &routing, params)?;
    let adapter = mixture.adapters.pop().expect("one adapter");
    Ok((adapter, trace))
}

/// Trains all adapters jointly under fixed per-sample routing weights; the base stays frozen.
pub fn joint_train_mixture(
    mixture: &mut Mixture,
    samples: &[Sample],
    routing: &[LayerWeights],
    params: &TrainParams,
) -> Result<TrainTrace> {
    params.validate()?;
    require_samples(samples, "train the mixture")?;
    if routing.len() != samples.len() {
        return Err(TmowError::Contract(format!(
            "{} routing decisions for {} samples",
            routing.len(),
            samples.len()
        )));
    }
    let n = mixture.n_experts();
    if let Some(w) = routing.iter().flatten().find(|w| w.len() != n) {
        return Err(TmowError::Contract(format!(
            "routing over {} experts but the mixture has {n} adapters",
            w.len()
        )));
    }
    let schedule = params.schedule();
    let mut sampler = BatchSampler::new(samples.len(), params.batch, params.seed);
    let mut trace = TrainTrace::default();
    let mut opts: Vec<OptimizerState> = mixture
        .adapters
        .iter_mut()
        .map(|a| OptimizerState::new(params.optimizer, &sizes(a.tensors_mut())))
        .collect();
    for step in 0..params.steps {
        let idx = sampler.next_batch();
        let batch: Vec<&Sample> = idx.iter().map(|i| &samples[*i]).collect();
        let weights: Vec<LayerWeights> = idx.iter().map(|i| routing[*i].clone()).collect();
        let active: Vec<usize> = (0..n)
            .filter(|j| weights.iter().flatten().any(|row| row[*j] != 0.0))
            .collect();
        let mut tape = Tape::new();
        let (_, _, total, f) = loss_and_vars(
            &mut tape,
            &mixture.base,
            &mixture.adapters,
            false,
            &active,
            &batch,
            Routing::PerSample(&weights),
        )?;
        trace.record(step, tape.scalar(total))?;
        let grads = tape.backward(total)?;
        let lr = schedule.lr_at(step);
        let per: Vec<Vec<Option<&[f64]>>> = active
            .iter()
            .map(|j| {
                f.adapter_vars[*j]
                    .iter()
                    .flat_map(|(a, b)| [(!params.freeze_down).then(|| grads.get(*a)).flatten(), grads.get(*b)])
                    .collect()
            })
            .collect();
        let scale = clip_scale(params.clip_norm, &per);
        for (j, g) in active.iter().zip(&per) {
            if scale < 1.0 {
                let owned: Vec<Option<Vec<f64>>> = g.iter().map(|s| s.map(|s| s.iter().map(|x| x * scale).collect())).collect();
                let g: Vec<Option<&[f64]>> = owned.iter().map(|s| s.as_deref()).collect();
                opts[*j].step(mixture.adapters[*j].tensors_mut(), &g, lr)?;
            } else {
                opts[*j].step(mixture.adapters[*j].tensors_mut(), g, lr)?;
            }
        }
    }
    Ok(trace)
}

/// Gradients of the routed loss on one batch, per adapter and layer, as `(d down, d up)`.
pub fn adapter_gradients(
    mixture: &Mixture,
    samples: &[Sample],
    routing: &[LayerWeights],
) -> Result<Vec<Vec<(Tensor, Tensor)>>> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let all: Vec<usize> = (0..mixture.n_experts()).collect();
    let mut tape = Tape::new();
    let (_, _, total, f) = loss_and_vars(
        &mut tape,
        &mixture.base,
        &mixture.adapters,
        false,
        &all,
        &refs,
        Routing::PerSample(routing),
    )?;
    let grads = tape.backward(total)?;
    Ok(f.adapter_vars
        .iter()
        .map(|layers| {
            layers
                .iter()
                .map(|(a, b)| (grads.tensor(*a), grads.tensor(*b)))
                .collect()
        })
        .collect())
}
