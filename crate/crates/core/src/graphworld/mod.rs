//! Deterministic synthetic embodied environment.
//!
//! Domains combine a task category with a scene category. States are sets of
//! relational triples, rendered as [`ObservationGraph`]s for the router and as
//! token sequences for the world model.

pub mod catalog;
pub mod dataset;
pub mod domain;
pub mod expert;
pub mod state;
pub mod vocab;

use rand::Rng;

pub use dataset::{parse_jsonl, read_jsonl, Dataset, GenerationParams};
pub use domain::{
    default_seen_domains, default_unseen_domains, generate_domain, generate_scene, DomainSpec,
    Episode, Instruction, TaskCategory,
};
pub use expert::{demonstrate, script_expert, Demonstration, Step, Trajectory, DEFAULT_MAX_STEPS};
pub use state::{
    Action, ObservationGraph, Relation, RelationWeights, StepOutcome, Triple, Verb, WorldState,
};
pub use vocab::{action_vocab_size, decode_action, tokenize_action, EncodedIo, Vocabulary};

use crate::error::Result;
use crate::nncore::Tensor;

/// Learned per-token embedding table `Φ` for instructions.
#[derive(Debug, Clone, PartialEq)]
pub struct InstructionEmbedding {
    pub table: Tensor,
}

impl InstructionEmbedding {
    pub fn new<R: Rng + ?Sized>(vocab_size: usize, width: usize, rng: &mut R) -> Self {
        Self {
            table: Tensor::randn(&[vocab_size, width], 1.0 / (width as f64).sqrt(), rng),
        }
    }

    /// `t × d` matrix of table rows for the instruction's tokens.
    pub fn encode(&self, vocab: &Vocabulary, instruction: &Instruction) -> Result<Tensor> {
        let ids = vocab.encode_instruction(instruction)?;
        let rows: Vec<Vec<f64>> = ids.iter().map(|i| self.table.row(*i).to_vec()).collect();
        Tensor::from_rows(&rows)
    }
}
