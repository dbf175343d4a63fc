//! Multi-granular graph-prototype router.
//!
//! A hybrid message-passing / dense graph processor maps an (observation graph,
//! instruction) pair to one pooled embedding per layer. Routing compares each
//! layer's embedding with per-expert prototypes by cosine similarity and keeps a
//! top-K softmax.

mod contrastive;
mod processor;
mod routing;

pub use contrastive::{
    augment_graph, cl_on_tape, contrastive_losses, contrastive_pretrain, ClLoss, ContrastiveParams,
};
pub use processor::{
    adjust, context_edge_matrix, default_message_passing_layers, dense_layer, mpnn_layer,
    GraphProcessor, LayerKind, ProcessorDims, ProcessorLayer, Projections, RouterInput,
};
pub use routing::{extract_prototypes, route, top_k_softmax, PrototypeSet, RoutingDecision};

use crate::checkpoint::Checkpoint;
use crate::error::{Result, TmowError};

pub const ROUTER_KIND: &str = "tmow-router";

/// Processor plus prototype set, stored together.
#[derive(Debug, Clone, PartialEq)]
pub struct Router {
    pub processor: GraphProcessor,
    pub prototypes: PrototypeSet,
}

impl Router {
    pub fn new(processor: GraphProcessor) -> Self {
        let layers = processor.n_layers();
        Self {
            processor,
            prototypes: PrototypeSet::empty(layers),
        }
    }

    pub fn route(&self, input: &RouterInput, k: usize, tau: f64) -> Result<RoutingDecision> {
        let e = self.processor.embed(input)?;
        route(&e, &self.prototypes, k, tau)
    }

    pub fn to_checkpoint(&self, seed: u64, config_hash: &str) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(ROUTER_KIND);
        c.set_meta("L", self.processor.n_layers())?;
        c.set_meta("N", self.prototypes.n_experts())?;
        c.set_meta("d_h", self.processor.hidden)?;
        c.set_meta("dims", self.processor.dims())?;
        c.set_meta("layer_kinds", self.processor.layer_kinds())?;
        c.set_meta("prototypes", &self.prototypes)?;
        c.set_meta("seed", seed)?;
        c.set_meta("config_hash", config_hash)?;
        for (name, t) in self.processor.named_tensors() {
            c.put(name, t);
        }
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(ROUTER_KIND)?;
        let dims: ProcessorDims = c.meta("dims")?;
        let kinds: Vec<LayerKind> = c.meta("layer_kinds")?;
        if kinds.len() != dims.layers {
            return Err(TmowError::Contract("layer_kinds length differs from L".into()));
        }
        let mp: Vec<usize> = (0..kinds.len())
            .filter(|l| kinds[*l] == LayerKind::MessagePassing)
            .collect();
        let mut processor = GraphProcessor::new(dims, &mp, 0)?;
        let names: Vec<String> = processor.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, t) in names.iter().zip(processor.tensors_mut()) {
            *t = c.take(name)?;
        }
        let prototypes: PrototypeSet = c.meta("prototypes")?;
        if prototypes.n_layers() != dims.layers {
            return Err(TmowError::Contract("prototype layers differ from L".into()));
        }
        Ok(Self {
            processor,
            prototypes,
        })
    }
}

#[cfg(test)]
mod tests;
