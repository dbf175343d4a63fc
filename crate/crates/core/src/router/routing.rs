use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::processor::{GraphProcessor, RouterInput};
use crate::error::{Result, TmowError};
use crate::nncore::{cosine_similarity, norm, softmax};

/// Per-layer, per-expert prototype vectors, indexed `[layer][expert]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub layers: Vec<Vec<Vec<f64>>>,
}

impl PrototypeSet {
    pub fn empty(layers: usize) -> Self {
        Self {
            layers: vec![Vec::new(); layers],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_experts(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn get(&self, layer: usize, expert: usize) -> &[f64] {
        &self.layers[layer][expert]
    }

    /// Appends one expert's per-layer prototypes.
    pub fn push_expert(&mut self, per_layer: Vec<Vec<f64>>) -> Result<()> {
        if per_layer.len() != self.layers.len() {
            return Err(TmowError::Dimension {
                op: "push_expert",
                lhs: vec![per_layer.len()],
                rhs: vec![self.layers.len()],
            });
        }
        for (l, p) in per_layer.into_iter().enumerate() {
            self.layers[l].push(p);
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_experts();
        for (l, row) in self.layers.iter().enumerate() {
            if row.len() != n {
                return Err(TmowError::Contract(format!("layer {l} has {} prototypes, expected {n}", row.len())));
            }
            for (j, p) in row.iter().enumerate() {
                if p.iter().any(|x| !x.is_finite()) || norm(p) == 0.0 {
                    return Err(TmowError::Degenerate(format!(
                        "prototype of expert {j} at layer {l} is zero or non-finite"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Raw cosine scores and sparse normalized weights for every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub scores: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    /// Effective K after clamping to the expert count.
    pub k: usize,
    pub tau: f64,
    /// Set when the requested K exceeded the expert count.
    pub k_clamped: bool,
}

impl RoutingDecision {
    /// Copy in which every layer uses the scores and weights of `layer`.
    pub fn broadcast(&self, layer: usize) -> Self {
        let n = self.scores.len();
        Self {
            scores: vec![self.scores[layer].clone(); n],
            weights: vec![self.weights[layer].clone(); n],
            ..self.clone()
        }
    }
}

/// Keeps the `k` largest scores (ties to the lowest index) and softmaxes them at `tau`.
pub fn top_k_softmax(scores: &[f64], k: usize, tau: f64) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(TmowError::param("K", "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
    order.truncate(k.min(scores.len()));
    order.sort_unstable();
    let kept: Vec<f64> = order.iter().map(|i| scores[*i]).collect();
    let probs = softmax(&kept, tau)?;
    let mut out = vec![0.0; scores.len()];
    for (i, p) in order.into_iter().zip(probs) {
        out[i] = p;
    }
    Ok(out)
}

/// Cosine scores against every prototype, then top-K softmax, layer by layer.
pub fn route(embeddings: &[Vec<f64>], prototypes: &PrototypeSet, k: usize, tau: f64) -> Result<RoutingDecision> {
    if embeddings.len() != prototypes.n_layers() {
        return Err(TmowError::Dimension {
            op: "route",
            lhs: vec![embeddings.len()],
            rhs: vec![prototypes.n_layers()],
        });
    }
    let n = prototypes.n_experts();
    if n == 0 {
        return Err(TmowError::Contract("routing over zero experts".into()));
    }
    if !(tau > 0.0) {
        return Err(TmowError::param("tau", "must be positive"));
    }
    let k_clamped = k > n;
    if k_clamped {
        log::warn!("K={k} exceeds {n} experts; clamping to {n}");
    }
    let k_eff = k.min(n);
    let mut scores = Vec::with_capacity(embeddings.len());
    let mut weights = Vec::with_capacity(embeddings.len());
    for (e, protos) in embeddings.iter().zip(&prototypes.layers) {
        let s = protos
            .iter()
            .map(|p| cosine_similarity(e, p))
            .collect::<Result<Vec<_>>>()?;
        weights.push(top_k_softmax(&s, k_eff, tau)?);
        scores.push(s);
    }
    Ok(RoutingDecision {
        scores,
        weights,
        k: k_eff,
        tau,
        k_clamped,
    })
}

/// Mean per-layer embedding over a batch of inputs: one expert's prototypes.
pub fn extract_prototypes(processor: &GraphProcessor, inputs: &[RouterInput]) -> Result<Vec<Vec<f64>>> {
    if inputs.is_empty() {
        return Err(TmowError::Config("prototype extraction needs at least one observation".into()));
    }
    let embeddings = inputs
        .par_iter()
        .map(|x| processor.embed(x))
        .collect::<Result<Vec<_>>>()?;
    let mut mean = vec![vec![0.0; processor.hidden]; processor.n_layers()];
    for e in &embeddings {
        for (m, v) in mean.iter_mut().zip(e) {
            for (a, b) in m.iter_mut().zip(v) {
                *a += b;
            }
        }
    }
    let count = embeddings.len() as f64;
    for m in &mut mean {
        m.iter_mut().for_each(|x| *x /= count);
    }
    Ok(mean)
}
