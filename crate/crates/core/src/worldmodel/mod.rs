//! Residual feed-forward base model with per-domain low-rank adapters.
//!
//! Layer `l` of a mixture computes
//! `y ← y + W2·relu(W1·y + b1) + b2 + Σ_j w_j · (y A_j) B_j`,
//! where `w` is that layer's routing weight vector for the current input.

mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Result, TmowError};
use crate::graphworld::{
    action_vocab_size, decode_action, Action, Demonstration, EncodedIo, Instruction, Step,
    Vocabulary, WorldState,
};
use crate::nncore::{Tape, Tensor, Var};

pub use train::{
    adapter_gradients, joint_train_mixture, train_adapter, train_base, BatchSampler, TrainParams,
    TrainTrace,
};

pub const MIXTURE_KIND: &str = "tmow-mixture";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub layers: usize,
    pub hidden: usize,
    pub rank: usize,
    pub vocab_size: usize,
    pub action_size: usize,
    pub max_positions: usize,
}

impl ModelDims {
    pub fn new(layers: usize, hidden: usize, rank: usize, vocab: &Vocabulary) -> Self {
        Self {
            layers,
            hidden,
            rank,
            vocab_size: vocab.len(),
            action_size: action_vocab_size(),
            max_positions: crate::graphworld::vocab::MAX_SEQ_LEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 {
            return Err(TmowError::param("layers/hidden", "must be positive"));
        }
        if self.rank == 0 || self.rank >= self.hidden {
            return Err(TmowError::param("rank", "must satisfy 0 < r < d_h"));
        }
        Ok(())
    }
}

/// One supervised step: the input, the expert action class and the next-observation tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub io: EncodedIo,
    pub action: usize,
    pub observation: Vec<usize>,
}

impl Sample {
    pub fn from_step(vocab: &Vocabulary, instruction: &Instruction, step: &Step) -> Result<Self> {
        Ok(Self {
            io: vocab.encode_io(instruction, &step.observation)?,
            action: crate::graphworld::tokenize_action(&step.action)?[0],
            observation: vocab.observation_targets(&step.next_observation)?,
        })
    }
}

pub fn samples_from_demo(vocab: &Vocabulary, demo: &Demonstration) -> Result<Vec<Sample>> {
    demo.trajectory
        .steps
        .iter()
        .map(|s| Sample::from_step(vocab, &demo.instruction, s))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    pub dims: ModelDims,
    pub emb_instruction: Tensor,
    pub emb_subject: Tensor,
    pub emb_relation: Tensor,
    pub emb_object: Tensor,
    pub emb_bias: Tensor,
    pub blocks: Vec<Block>,
    pub action_weight: Tensor,
    pub action_bias: Tensor,
    pub obs_weight: Tensor,
    pub obs_position: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayer {
    /// d_h × r
    pub down: Tensor,
    /// r × d_h
    pub up: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub rank: usize,
    pub layers: Vec<AdapterLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub base: BaseModel,
    pub adapters: Vec<Adapter>,
}

/// Per-layer expert weights for one input: `weights[l][j]`.
pub type LayerWeights = Vec<Vec<f64>>;

/// How adapters are weighted for a batch.
#[derive(Debug, Clone, Copy)]
pub enum Routing<'a> {
    /// No adapters.
    Base,
    /// The same per-layer weights for every sample.
    Shared(&'a LayerWeights),
    /// One weight set per sample.
    PerSample(&'a [LayerWeights]),
}

impl Routing<'_> {
    fn for_sample(&self, s: usize) -> Option<&LayerWeights> {
        match self {
            Routing::Base => None,
            Routing::Shared(w) => Some(w),
            Routing::PerSample(ws) => Some(&ws[s]),
        }
    }
}

pub fn one_hot_weights(layers: usize, n: usize, j: usize) -> LayerWeights {
    (0..layers)
        .map(|_| (0..n).map(|k| if k == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

pub fn validate_weights(w: &LayerWeights, layers: usize, n: usize) -> Result<()> {
    if w.len() != layers {
        return Err(TmowError::Dimension {
            op: "mixture weights (layers)",
            lhs: vec![w.len()],
            rhs: vec![layers],
        });
    }
    for row in w {
        if row.len() != n {
            return Err(TmowError::Dimension {
                op: "mixture weights (experts)",
                lhs: vec![row.len()],
                rhs: vec![n],
            });
        }
        if let Some(x) = row.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
            return Err(TmowError::Contract(format!(
                "mixture weight {x} is negative or non-finite"
            )));
        }
        let s: f64 = row.iter().sum();
        if s != 0.0 && (s - 1.0).abs() > 1e-9 {
            return Err(TmowError::Contract(format!(
                "mixture weights sum to {s}, expected 1 or 0"
            )));
        }
    }
    Ok(())
}

fn scaled<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
}

impl BaseModel {
    pub fn new<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let (d, v) = (dims.hidden, dims.vocab_size);
        let emb = |rng: &mut R| Tensor::randn(&[v, d], 1.0, rng);
        Ok(Self {
            dims,
            emb_instruction: emb(rng),
            emb_subject: emb(rng),
            emb_relation: emb(rng),
            emb_object: emb(rng),
            emb_bias: Tensor::zeros(&[1, d]),
            blocks: (0..dims.layers)
                .map(|_| Block {
                    w1: scaled(d, d, rng),
                    b1: Tensor::zeros(&[1, d]),
                    w2: Tensor::randn(&[d, d], 0.5 / (d as f64).sqrt(), rng),
                    b2: Tensor::zeros(&[1, d]),
                })
                .collect(),
            action_weight: scaled(d, dims.action_size, rng),
            action_bias: Tensor::zeros(&[1, dims.action_size]),
            obs_weight: scaled(d, v, rng),
            obs_position: Tensor::zeros(&[dims.max_positions, v]),
        })
    }

    /// Parameters in a fixed order shared by [`Self::tensors_mut`] and checkpoint names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("emb_instruction".to_string(), &self.emb_instruction),
            ("emb_subject".to_string(), &self.emb_subject),
            ("emb_relation".to_string(), &self.emb_relation),
            ("emb_object".to_string(), &self.emb_object),
            ("emb_bias".to_string(), &self.emb_bias),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{l}.w1"), &b.w1));
            out.push((format!("block{l}.b1"), &b.b1));
            out.push((format!("block{l}.w2"), &b.w2));
            out.push((format!("block{l}.b2"), &b.b2));
        }
        out.push(("action_weight".to_string(), &self.action_weight));
        out.push(("action_bias".to_string(), &self.action_bias));
        out.push(("obs_weight".to_string(), &self.obs_weight));
        out.push(("obs_position".to_string(), &self.obs_position));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.emb_instruction,
            &mut self.emb_subject,
            &mut self.emb_relation,
            &mut self.emb_object,
            &mut self.emb_bias,
        ];
        for b in &mut self.blocks {
            out.extend([&mut b.w1, &mut b.b1, &mut b.w2, &mut b.b2]);
        }
        out.extend([
            &mut self.action_weight,
            &mut self.action_bias,
            &mut self.obs_weight,
            &mut self.obs_position,
        ]);
        out
    }

    fn to_tape(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.named_tensors()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect()
    }

    /// Output of the frozen base alone.
    pub fn forward(&self, inputs: &[&EncodedIo]) -> Result<Outputs> {
        Mixture::forward_parts(self, &[], inputs, Routing::Base)
    }
}

impl Adapter {
    /// Random first factor and zero second factor, so the initial delta is zero.
    pub fn new<R: Rng + ?Sized>(dims: &ModelDims, rng: &mut R) -> Self {
        Self {
            rank: dims.rank,
            layers: (0..dims.layers)
                .map(|_| AdapterLayer {
                    down: scaled(dims.hidden, dims.rank, rng),
                    up: Tensor::zeros(&[dims.rank, dims.hidden]),
                })
                .collect(),
        }
    }

    pub fn zeros(dims: &ModelDims) -> Self {
        Self {
            rank: dims.rank,
            layers: (0..dims.layers)
                .map(|_| AdapterLayer {
                    down: Tensor::zeros(&[dims.hidden, dims.rank]),
                    up: Tensor::zeros(&[dims.rank, dims.hidden]),
                })
                .collect(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.down, &mut l.up])
            .collect()
    }

    fn to_tape(&self, tape: &mut Tape, trainable: bool) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.param(&l.down), tape.param(&l.up))
                } else {
                    (tape.constant(&l.down), tape.constant(&l.up))
                }
            })
            .collect()
    }

    /// Layer delta `(y A) B` for a batch of row vectors.
    pub fn layer_delta(&self, layer: usize, y: &Tensor) -> Result<Tensor> {
        let l = &self.layers[layer];
        crate::nncore::matmul(&crate::nncore::matmul(y, &l.down)?, &l.up)
    }

    fn check(&self, dims: &ModelDims) -> Result<()> {
        let ok = self.layers.len() == dims.layers
            && self.layers.iter().all(|l| {
                l.down.shape() == [dims.hidden, self.rank] && l.up.shape() == [self.rank, dims.hidden]
            });
        if !ok {
            return Err(TmowError::Contract(format!(
                "adapter does not match base dims (L={}, d_h={})",
                dims.layers, dims.hidden
            )));
        }
        Ok(())
    }
}

/// Values produced by a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs {
    /// Hidden state after every layer, `layers + 1` entries (index 0 is the embedding).
    pub hidden: Vec<Tensor>,
    pub action_logits: Tensor,
}

pub(crate) struct TapeForward {
    pub hidden: Vec<Var>,
    pub action_logits: Var,
    pub base_vars: Vec<Var>,
    pub adapter_vars: Vec<Vec<(Var, Var)>>,
}

/// Teacher-forcing loss components; `total` is the mean of the two.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TfLoss {
    pub action: f64,
    pub observation: f64,
    pub total: f64,
}

impl Mixture {
    pub fn new(base: BaseModel, adapters: Vec<Adapter>) -> Result<Self> {
        for a in &adapters {
            a.check(&base.dims)?;
        }
        Ok(Self { base, adapters })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.base.dims
    }

    pub fn n_experts(&self) -> usize {
        self.adapters.len()
    }

    /// Mixture forward for a batch of inputs.
    pub fn forward(&self, inputs: &[&EncodedIo], routing: Routing) -> Result<Outputs> {
        Self::forward_parts(&self.base, &self.adapters, inputs, routing)
    }

    fn forward_parts(
        base: &BaseModel,
        adapters: &[Adapter],
        inputs: &[&EncodedIo],
        routing: Routing,
    ) -> Result<Outputs> {
        let mut tape = Tape::new();
        let f = forward_on_tape(&mut tape, base, adapters, false, &[], inputs, routing)?;
        Ok(Outputs {
            hidden: f.hidden.iter().map(|v| tape.value(*v)).collect(),
            action_logits: tape.value(f.action_logits),
        })
    }

    /// Greedy action among those whose target exists in `state`; ties go to the lowest class.
    pub fn act(
        &self,
        vocab: &Vocabulary,
        instruction: &Instruction,
        state: &WorldState,
        weights: Option<&LayerWeights>,
    ) -> Result<Action> {
        let io = vocab.encode_io(instruction, state)?;
        let routing = weights.map_or(Routing::Base, Routing::Shared);
        let out = self.forward(&[&io], routing)?;
        let logits = out.action_logits.row(0);
        let mut best: Option<(usize, f64)> = None;
        for (id, &z) in logits.iter().enumerate() {
            let action = decode_action(id)?;
            if state.index(&action.target).is_none() {
                continue;
            }
            if best.is_none_or(|(_, b)| z > b) {
                best = Some((id, z));
            }
        }
        let (id, _) = best.ok_or_else(|| TmowError::Input("state has no entities".into()))?;
        decode_action(id)
    }

    /// Teacher-forcing loss without gradients.
    pub fn loss(&self, samples: &[Sample], routing: Routing) -> Result<TfLoss> {
        let mut tape = Tape::new();
        let refs: Vec<&Sample> = samples.iter().collect();
        let (a, o, t) = loss_on_tape(&mut tape, &self.base, &self.adapters, false, &[], &refs, routing)?;
        Ok(TfLoss {
            action: tape.scalar(a),
            observation: tape.scalar(o),
            total: tape.scalar(t),
        })
    }

    pub fn to_checkpoint(&self, vocab_hash: &str, seed: u64) -> Result<Checkpoint> {
        let d = self.dims();
        let mut c = Checkpoint::new(MIXTURE_KIND);
        c.set_meta("L", d.layers)?;
        c.set_meta("d_h", d.hidden)?;
        c.set_meta("r", d.rank)?;
        c.set_meta("N", self.n_experts())?;
        c.set_meta("dims", d)?;
        c.set_meta("vocab_hash", vocab_hash)?;
        c.set_meta("seed", seed)?;
        for (name, t) in self.base.named_tensors() {
            c.put(format!("base.{name}"), t);
        }
        for (j, a) in self.adapters.iter().enumerate() {
            for (l, layer) in a.layers.iter().enumerate() {
                c.put(format!("adapter{j}.layer{l}.down"), &layer.down);
                c.put(format!("adapter{j}.layer{l}.up"), &layer.up);
            }
        }
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint, vocab_hash: &str) -> Result<Self> {
        c.expect_kind(MIXTURE_KIND)?;
        let stored: String = c.meta("vocab_hash")?;
        if stored != vocab_hash {
            return Err(TmowError::Contract(format!(
                "checkpoint vocabulary {stored} differs from {vocab_hash}"
            )));
        }
        let dims: ModelDims = c.meta("dims")?;
        let n: usize = c.meta("N")?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut base = BaseModel::new(dims, &mut rng)?;
        let names: Vec<String> = base.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, t) in names.iter().zip(base.tensors_mut()) {
            *t = c.take(&format!("base.{name}"))?;
        }
        let adapters = (0..n)
            .map(|j| {
                Ok(Adapter {
                    rank: dims.rank,
                    layers: (0..dims.layers)
                        .map(|l| {
                            Ok(AdapterLayer {
                                down: c.take(&format!("adapter{j}.layer{l}.down"))?,
                                up: c.take(&format!("adapter{j}.layer{l}.up"))?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(base, adapters)
    }
}

/// Builds the forward graph. Adapters listed in `trainable` become parameters.
pub(crate) fn forward_on_tape(
    tape: &mut Tape,
    base: &BaseModel,
    adapters: &[Adapter],
    base_trainable: bool,
    trainable: &[usize],
    inputs: &[&EncodedIo],
    routing: Routing,
) -> Result<TapeForward> {
    let dims = &base.dims;
    if inputs.is_empty() {
        return Err(TmowError::Input("forward over an empty batch".into()));
    }
    for s in 0..inputs.len() {
        if let Some(w) = routing.for_sample(s) {
            validate_weights(w, dims.layers, adapters.len())?;
        }
    }
    let bv = base.to_tape(tape, base_trainable);
    let adapter_vars: Vec<Vec<(Var, Var)>> = adapters
        .iter()
        .enumerate()
        .map(|(j, a)| a.to_tape(tape, trainable.contains(&j)))
        .collect();

    let (mut inst_ids, mut inst_lens) = (Vec::new(), Vec::new());
    let (mut subj, mut rel, mut obj, mut trip_lens) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for io in inputs {
        if io.instruction.is_empty() {
            return Err(TmowError::Input("empty instruction".into()));
        }
        inst_ids.extend_from_slice(&io.instruction);
        inst_lens.push(io.instruction.len());
        if io.triples.is_empty() {
            return Err(TmowError::Input("observation without triples".into()));
        }
        for t in &io.triples {
            subj.push(t[0]);
            rel.push(t[1]);
            obj.push(t[2]);
        }
        trip_lens.push(io.triples.len());
    }
    let inst = tape.gather_rows(bv[0], &inst_ids)?;
    let inst = tape.segment_mean(inst, &inst_lens)?;
    let s = tape.gather_rows(bv[1], &subj)?;
    let r = tape.gather_rows(bv[2], &rel)?;
    let o = tape.gather_rows(bv[3], &obj)?;
    let t = tape.add(s, r)?;
    let t = tape.add(t, o)?;
    let t = tape.add_row(t, bv[4])?;
    let t = tape.relu(t);
    let t = tape.segment_mean(t, &trip_lens)?;
    let mut y = tape.add(inst, t)?;

    let mut hidden = vec![y];
    for l in 0..dims.layers {
        let p = 5 + 4 * l;
        let h = tape.matmul(y, bv[p])?;
        let h = tape.add_row(h, bv[p + 1])?;
        let h = tape.relu(h);
        let h = tape.matmul(h, bv[p + 2])?;
        let h = tape.add_row(h, bv[p + 3])?;
        let mut next = tape.add(y, h)?;
        for (j, av) in adapter_vars.iter().enumerate() {
            let col: Vec<f64> = (0..inputs.len())
                .map(|s| routing.for_sample(s).map_or(0.0, |w| w[l][j]))
                .collect();
            if col.iter().all(|w| *w == 0.0) {
                continue;
            }
            let (down, up) = av[l];
            let d = tape.matmul(y, down)?;
            let d = tape.matmul(d, up)?;
            let c = tape.constant_raw(inputs.len(), 1, col);
            let d = tape.mul_col(d, c)?;
            next = tape.add(next, d)?;
        }
        y = next;
        hidden.push(y);
    }
    let p = 5 + 4 * dims.layers;
    let logits = tape.matmul(y, bv[p])?;
    let action_logits = tape.add_row(logits, bv[p + 1])?;
    Ok(TapeForward {
        hidden,
        action_logits,
        base_vars: bv,
        adapter_vars,
    })
}

/// Returns `(action CE, observation-token CE, total)` where total is their mean.
pub(crate) fn loss_on_tape(
    tape: &mut Tape,
    base: &BaseModel,
    adapters: &[Adapter],
    base_trainable: bool,
    trainable: &[usize],
    samples: &[&Sample],
    routing: Routing,
) -> Result<(Var, Var, Var)> {
    let (a, o, t, _) = loss_and_vars(tape, base, adapters, base_trainable, trainable, samples, routing)?;
    Ok((a, o, t))
}

pub(crate) fn loss_and_vars(
    tape: &mut Tape,
    base: &BaseModel,
    adapters: &[Adapter],
    base_trainable: bool,
    trainable: &[usize],
    samples: &[&Sample],
    routing: Routing,
) -> Result<(Var, Var, Var, TapeForward)> {
    let dims = base.dims;
    let inputs: Vec<&EncodedIo> = samples.iter().map(|s| &s.io).collect();
    let f = forward_on_tape(tape, base, adapters, base_trainable, trainable, &inputs, routing)?;
    let action_targets: Vec<(usize, usize)> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (i, s.action))
        .collect();
    let action = tape.cross_entropy(f.action_logits, &action_targets)?;

    let p = 5 + 4 * dims.layers;
    let obs = tape.matmul(*f.hidden.last().expect("layers"), f.base_vars[p + 2])?;
    let (mut rows, mut positions, mut targets) = (Vec::new(), Vec::new(), Vec::new());
    for (i, s) in samples.iter().enumerate() {
        if s.observation.len() > dims.max_positions {
            return Err(TmowError::Truncation {
                len: s.observation.len(),
                max: dims.max_positions,
            });
        }
        for (pos, tok) in s.observation.iter().enumerate() {
            if *tok >= dims.vocab_size {
                return Err(TmowError::Input(format!("observation token {tok} outside vocabulary")));
            }
            targets.push((rows.len(), *tok));
            rows.push(i);
            positions.push(pos);
        }
    }
    let observation = if targets.is_empty() {
        tape.constant_raw(1, 1, vec![0.0])
    } else {
        let per_token = tape.gather_rows(obs, &rows)?;
        let pos = tape.gather_rows(f.base_vars[p + 3], &positions)?;
        let logits = tape.add(per_token, pos)?;
        tape.cross_entropy(logits, &targets)?
    };
    let total = tape.add(action, observation)?;
    let total = tape.scale(total, 0.5);
    Ok((action, observation, total, f))
}

#[cfg(test)]
mod tests;
