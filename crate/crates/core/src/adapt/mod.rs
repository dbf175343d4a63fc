//! Test-time prototype refinement and distilled model augmentation.

mod augment;

pub use augment::{
    augment_model, combined_graph, demo_router_input, distill_init, AdapterInit, AugmentReport,
    AugmentSettings, AugmentationRequest,
};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TmowError};
use crate::nncore::{cosine_similarity, softmax};
use crate::router::PrototypeSet;

/// Whether refined prototypes survive into the next episode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Persistence {
    PerEpisode,
    #[default]
    Persist,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinementConfig {
    pub alpha: f64,
    pub tau_r: f64,
    pub persistence: Persistence,
    /// Raw blend coefficient `α·sim`; when false it is clamped to `[0, 1]`.
    pub exact: bool,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            tau_r: 1.0,
            persistence: Persistence::Persist,
            exact: true,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TmowError::param("alpha", "must lie in [0, 1]"));
        }
        if !(self.tau_r > 0.0) || !self.tau_r.is_finite() {
            return Err(TmowError::param("tau_r", "must be positive"));
        }
        Ok(())
    }
}

/// Softmax at `tau_r` of the cosine similarity between expert `j` and every expert
/// (itself included) at one layer.
pub fn refinement_weights(prototypes: &PrototypeSet, layer: usize, expert: usize, tau_r: f64) -> Result<Vec<f64>> {
    let row = prototypes
        .layers
        .get(layer)
        .ok_or_else(|| TmowError::Input(format!("layer {layer} out of range")))?;
    let pj = row
        .get(expert)
        .ok_or_else(|| TmowError::Input(format!("expert {expert} out of range")))?;
    let sims = row
        .iter()
        .map(|pk| cosine_similarity(pj, pk))
        .collect::<Result<Vec<_>>>()?;
    softmax(&sims, tau_r)
}

/// One refinement step over every expert and layer, driven by the live embeddings.
/// All experts at a layer are updated from the same pre-step prototypes.
pub fn refine_prototypes(prototypes: &mut PrototypeSet, embeddings: &[Vec<f64>], config: &RefinementConfig) -> Result<()> {
    config.validate()?;
    if embeddings.len() != prototypes.n_layers() {
        return Err(TmowError::Dimension {
            op: "refine_prototypes",
            lhs: vec![embeddings.len()],
            rhs: vec![prototypes.n_layers()],
        });
    }
    if config.alpha == 0.0 {
        return Ok(());
    }
    let mut next = Vec::with_capacity(prototypes.n_layers());
    for (l, e) in embeddings.iter().enumerate() {
        let row = &prototypes.layers[l];
        let mut refined = Vec::with_capacity(row.len());
        for (j, pj) in row.iter().enumerate() {
            let r = refinement_weights(prototypes, l, j, config.tau_r)?;
            let mut delta = vec![0.0; pj.len()];
            for (w, pk) in r.iter().zip(row) {
                for (d, x) in delta.iter_mut().zip(pk) {
                    *d += w * x;
                }
            }
            let mut c = config.alpha * cosine_similarity(e, pj)?;
            if !config.exact {
                c = c.clamp(0.0, 1.0);
            }
            refined.push(pj.iter().zip(&delta).map(|(p, d)| (1.0 - c) * p + c * d).collect());
        }
        next.push(refined);
    }
    prototypes.layers = next;
    Ok(())
}
