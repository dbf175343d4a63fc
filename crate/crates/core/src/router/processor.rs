use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TmowError};
use crate::graphworld::{
    InstructionEmbedding, Instruction, ObservationGraph, RelationWeights, Vocabulary, WorldState,
};
use crate::nncore::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    MessagePassing,
    Dense,
}

/// `{0, L/4, L/2, 3L/4}`, deduplicated for small `L`.
pub fn default_message_passing_layers(layers: usize) -> Vec<usize> {
    let mut v: Vec<usize> = [0, layers / 4, layers / 2, 3 * layers / 4]
        .into_iter()
        .filter(|l| *l < layers)
        .collect();
    v.dedup();
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projections {
    pub w_qh: Tensor,
    pub w_qi: Tensor,
    pub w_kh: Tensor,
    pub w_ki: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcessorLayer {
    pub kind: LayerKind,
    pub w_m: Tensor,
    pub w_u: Tensor,
    pub proj: Option<Projections>,
}

/// Graph processor `f`: hybrid message-passing / dense stack producing one pooled
/// embedding per layer for an (observation graph, instruction) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphProcessor {
    pub feature_width: usize,
    pub hidden: usize,
    pub proj_dim: usize,
    pub phi: InstructionEmbedding,
    pub layers: Vec<ProcessorLayer>,
}

/// Router input: observation graph plus instruction token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterInput {
    pub graph: ObservationGraph,
    pub instruction: Vec<usize>,
}

impl RouterInput {
    pub fn new(
        vocab: &Vocabulary,
        weights: &RelationWeights,
        instruction: &Instruction,
        state: &WorldState,
    ) -> Result<Self> {
        Ok(Self {
            graph: state.observe(weights),
            instruction: vocab.encode_instruction(instruction)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessorDims {
    pub layers: usize,
    pub hidden: usize,
    pub proj_dim: usize,
    pub feature_width: usize,
    pub vocab_size: usize,
}

/// Sigmoid slope is at most 1/4; without the gain, node variance collapses with depth.
const UPDATE_GAIN: f64 = 4.0;

fn scaled<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
}

impl GraphProcessor {
    /// Key projections equal the query projections. Update weights start at
    /// `UPDATE_GAIN` times the fan-in scale so the sigmoid stack keeps its spread.
    pub fn new(dims: ProcessorDims, message_passing: &[usize], seed: u64) -> Result<Self> {
        if dims.layers == 0 || dims.hidden == 0 || dims.proj_dim == 0 {
            return Err(TmowError::param("router dims", "must be positive"));
        }
        if !message_passing.windows(2).all(|w| w[0] < w[1])
            || message_passing.last().is_some_and(|l| *l >= dims.layers)
        {
            return Err(TmowError::param(
                "message_passing_layers",
                "must be strictly increasing and below the layer count",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = InstructionEmbedding::new(dims.vocab_size, dims.hidden, &mut rng);
        let layers = (0..dims.layers)
            .map(|l| {
                let input = if l == 0 { dims.feature_width } else { dims.hidden };
                let kind = if message_passing.contains(&l) {
                    LayerKind::MessagePassing
                } else {
                    LayerKind::Dense
                };
                let proj = (kind == LayerKind::MessagePassing).then(|| {
                    let w_qh = scaled(input, dims.proj_dim, &mut rng);
                    let w_qi = scaled(dims.hidden, dims.proj_dim, &mut rng);
                    Projections {
                        w_kh: w_qh.clone(),
                        w_ki: w_qi.clone(),
                        w_qh,
                        w_qi,
                    }
                });
                ProcessorLayer {
                    kind,
                    w_m: scaled(input, dims.hidden, &mut rng),
                    w_u: {
                        let mut t = scaled(dims.hidden, dims.hidden, &mut rng);
                        t.data_mut().iter_mut().for_each(|x| *x *= UPDATE_GAIN);
                        t
                    },
                    proj,
                }
            })
            .collect();
        Ok(Self {
            feature_width: dims.feature_width,
            hidden: dims.hidden,
            proj_dim: dims.proj_dim,
            phi,
            layers,
        })
    }

    pub fn dims(&self) -> ProcessorDims {
        ProcessorDims {
            layers: self.layers.len(),
            hidden: self.hidden,
            proj_dim: self.proj_dim,
            feature_width: self.feature_width,
            vocab_size: self.phi.table.rows(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(|l| l.kind).collect()
    }

    pub fn message_passing_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|l| self.layers[*l].kind == LayerKind::MessagePassing)
            .collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("phi".to_string(), &self.phi.table)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.w_m"), &layer.w_m));
            out.push((format!("layer{l}.w_u"), &layer.w_u));
            if let Some(p) = &layer.proj {
                out.push((format!("layer{l}.w_qh"), &p.w_qh));
                out.push((format!("layer{l}.w_qi"), &p.w_qi));
                out.push((format!("layer{l}.w_kh"), &p.w_kh));
                out.push((format!("layer{l}.w_ki"), &p.w_ki));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.phi.table];
        for layer in &mut self.layers {
            out.push(&mut layer.w_m);
            out.push(&mut layer.w_u);
            if let Some(p) = &mut layer.proj {
                out.extend([&mut p.w_qh, &mut p.w_qi, &mut p.w_kh, &mut p.w_ki]);
            }
        }
        out
    }

    /// Key projections share the query vars, so training keeps them tied and the gate
    /// stays a Gram form with a nonnegative diagonal.
    pub(crate) fn to_tape(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        let mut put = |t: &Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        let mut out = vec![put(&self.phi.table)];
        for layer in &self.layers {
            out.push(put(&layer.w_m));
            out.push(put(&layer.w_u));
            if let Some(p) = &layer.proj {
                let (qh, qi) = (put(&p.w_qh), put(&p.w_qi));
                out.extend([qh, qi, qh, qi]);
            }
        }
        out
    }

    /// Node-matrix outputs `H^(l)` of every layer, built on `tape` from parameter vars `p`.
    pub(crate) fn layers_on_tape(
        &self,
        tape: &mut Tape,
        p: &[Var],
        input: &RouterInput,
    ) -> Result<Vec<Var>> {
        let g = &input.graph;
        if g.feature_width != self.feature_width {
            return Err(TmowError::Dimension {
                op: "graph features",
                lhs: vec![g.n, g.feature_width],
                rhs: vec![g.n, self.feature_width],
            });
        }
        if g.n == 0 {
            return Err(TmowError::Input("graph without nodes".into()));
        }
        if input.instruction.is_empty() {
            return Err(TmowError::Input("empty instruction".into()));
        }
        let n = g.n;
        let mut base = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let a = g.adjacency[i * n + j] + if i == j { 1.0 } else { 0.0 };
                base[i * n + j] = a * g.relation[i * n + j];
            }
        }
        let base = tape.constant_raw(n, n, base);
        let phi_i = tape.gather_rows(p[0], &input.instruction)?;
        let mut h = tape.constant_raw(n, self.feature_width, g.features.clone());
        let mut out = Vec::with_capacity(self.layers.len());
        let mut k = 1;
        for layer in &self.layers {
            let (w_m, w_u) = (p[k], p[k + 1]);
            k += 2;
            h = match layer.kind {
                LayerKind::MessagePassing => {
                    let proj = [p[k], p[k + 1], p[k + 2], p[k + 3]];
                    k += 4;
                    let gate = gate_on_tape(tape, h, phi_i, proj, self.proj_dim)?;
                    let e = tape.mul(base, gate)?;
                    mpnn_on_tape(tape, h, e, w_m, w_u)?
                }
                LayerKind::Dense => dense_on_tape(tape, h, w_m, w_u)?,
            };
            out.push(h);
        }
        Ok(out)
    }

    /// Per-layer domain embeddings: node means of every layer output.
    pub fn embed(&self, input: &RouterInput) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let p = self.to_tape(&mut tape, false);
        let hs = self.layers_on_tape(&mut tape, &p, input)?;
        hs.into_iter()
            .map(|h| {
                let m = tape.mean_rows(h)?;
                Ok(tape.data(m).to_vec())
            })
            .collect()
    }

    /// Node matrices `H^(l)` of every layer.
    pub fn node_states(&self, input: &RouterInput) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let p = self.to_tape(&mut tape, false);
        let hs = self.layers_on_tape(&mut tape, &p, input)?;
        Ok(hs.into_iter().map(|h| tape.value(h)).collect())
    }
}

pub(crate) fn gate_on_tape(
    tape: &mut Tape,
    h: Var,
    phi_i: Var,
    [w_qh, w_qi, w_kh, w_ki]: [Var; 4],
    proj_dim: usize,
) -> Result<Var> {
    let qh = tape.matmul(h, w_qh)?;
    let qi = tape.matmul(phi_i, w_qi)?;
    let kh = tape.matmul(h, w_kh)?;
    let ki = tape.matmul(phi_i, w_ki)?;
    let qi_t = tape.transpose(qi);
    let ki_t = tape.transpose(ki);
    let x = tape.matmul(qh, qi_t)?;
    let y = tape.matmul(kh, ki_t)?;
    let y_t = tape.transpose(y);
    let g = tape.matmul(x, y_t)?;
    let g = tape.scale(g, 1.0 / (proj_dim as f64).sqrt());
    Ok(tape.relu(g))
}

pub(crate) fn mpnn_on_tape(tape: &mut Tape, h: Var, e: Var, w_m: Var, w_u: Var) -> Result<Var> {
    let norm = tape.sym_normalize(e)?;
    let m = tape.matmul(h, w_m)?;
    let agg = tape.matmul(norm, m)?;
    let u = tape.matmul(agg, w_u)?;
    Ok(tape.sigmoid(u))
}

pub(crate) fn dense_on_tape(tape: &mut Tape, h: Var, w_m: Var, w_u: Var) -> Result<Var> {
    let m = tape.matmul(h, w_m)?;
    let u = tape.matmul(m, w_u)?;
    Ok(tape.sigmoid(u))
}

/// Instruction-conditioned edge gate `ReLU((Q_H Q_iᵀ)(K_H K_iᵀ)ᵀ / √d)`, n × n.
pub fn adjust(h: &Tensor, phi_i: &Tensor, proj: &Projections) -> Result<Tensor> {
    if phi_i.rows() == 0 || phi_i.numel() == 0 {
        return Err(TmowError::Input("empty instruction".into()));
    }
    let mut tape = Tape::new();
    let d = proj.w_qh.cols();
    let vars = [
        tape.constant(&proj.w_qh),
        tape.constant(&proj.w_qi),
        tape.constant(&proj.w_kh),
        tape.constant(&proj.w_ki),
    ];
    let hv = tape.constant(h);
    let pv = tape.constant(phi_i);
    let g = gate_on_tape(&mut tape, hv, pv, vars, d)?;
    Ok(tape.value(g))
}

/// `(A + I) ⊙ R ⊙ gate`.
pub fn context_edge_matrix(a: &Tensor, r: &Tensor, gate: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    for (name, t) in [("relation mask", r), ("gate", gate)] {
        if t.shape() != a.shape() || a.cols() != n {
            return Err(TmowError::Dimension {
                op: if name == "gate" { "context_edge_matrix gate" } else { "context_edge_matrix mask" },
                lhs: a.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let ai = a.get(i, j) + if i == j { 1.0 } else { 0.0 };
            out[i * n + j] = ai * r.get(i, j) * gate.get(i, j);
        }
    }
    Tensor::matrix(n, n, out)
}

/// `σ(D̃^-½ Ẽ D̃^-½ H W_M W_U)`.
pub fn mpnn_layer(h: &Tensor, e: &Tensor, w_m: &Tensor, w_u: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (hv, ev, mv, uv) = (tape.constant(h), tape.constant(e), tape.constant(w_m), tape.constant(w_u));
    let out = mpnn_on_tape(&mut tape, hv, ev, mv, uv)?;
    Ok(tape.value(out))
}

/// `σ(H W_M W_U)`.
pub fn dense_layer(h: &Tensor, w_m: &Tensor, w_u: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (hv, mv, uv) = (tape.constant(h), tape.constant(w_m), tape.constant(w_u));
    let out = dense_on_tape(&mut tape, hv, mv, uv)?;
    Ok(tape.value(out))
}
