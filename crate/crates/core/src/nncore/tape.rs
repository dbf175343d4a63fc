//! Reverse-mode differentiation over a fixed set of matrix operations.
//!
//! Every value on the tape is a dense row-major matrix. Ops are appended in
//! execution order, so the node list is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep.

use super::tensor::{matmul_into, Tensor};
use crate::error::{Result, TmowError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a (m×n) + row (1×n)` broadcast over rows.
    AddRow(Var, Var),
    /// `a (m×n)` with row `i` scaled by `col[i]` (`col` is m×1).
    MulCol(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Sigmoid(Var),
    Relu(Var),
    SoftmaxRows(Var, f64),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SegmentMean(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    StackRows(Vec<Var>),
    SymNormalize(Var),
    CosineRows(Var, Var),
    CrossEntropy(Var, Vec<(usize, usize)>),
    InfoNce(Var, Vec<bool>, f64),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed ops with parent links.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward sweep: one optional gradient buffer per tape node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    dims: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like the node; zeros when no gradient reached it.
    pub fn tensor(&self, var: Var) -> Tensor {
        let (r, c) = self.dims[var.0];
        let data = self
            .get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; r * c]);
        Tensor::matrix(r, c, data).expect("consistent dims")
    }

    /// Writes the gradient of `var` into `tensor.grad`.
    pub fn populate(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        let g = self.tensor(var).into_data();
        tensor.set_grad(g)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("consistent dims")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    fn needs(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> TmowError {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        TmowError::Dimension {
            op,
            lhs: vec![ar, ac],
            rhs: vec![br, bc],
        }
    }

    /// Records a tensor; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        let (r, c) = tensor.dims2().expect("tape values are at most 2-D");
        self.push(r, c, tensor.data().to_vec(), Op::Leaf, tensor.requires_grad())
    }

    /// Records a trainable value.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let (r, c) = tensor.dims2().expect("tape values are at most 2-D");
        self.push(r, c, tensor.data().to_vec(), Op::Leaf, true)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        let (r, c) = tensor.dims2().expect("tape values are at most 2-D");
        self.push(r, c, tensor.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_raw(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(rows * cols, data.len(), "constant_raw dims");
        self.push(rows, cols, data, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.dim_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.data(a), self.data(b), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), ng))
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(self.dim_err(name, a, b));
        }
        let (r, c) = self.dims(a);
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "hadamard", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(row) != (1, n) {
            return Err(self.dim_err("add_row", a, row));
        }
        let rv = self.data(row).to_vec();
        let out = self
            .data(a)
            .chunks(n.max(1))
            .flat_map(|r| r.iter().zip(&rv).map(|(x, y)| x + y).collect::<Vec<_>>())
            .collect::<Vec<_>>();
        let out = if n == 0 { Vec::new() } else { out };
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(m, n, out, Op::AddRow(a, row), ng))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(col) != (m, 1) {
            return Err(self.dim_err("mul_col", a, col));
        }
        let cv = self.data(col);
        let mut out = self.data(a).to_vec();
        for i in 0..m {
            for v in &mut out[i * n..(i + 1) * n] {
                *v *= cv[i];
            }
        }
        let ng = self.needs(a) || self.needs(col);
        Ok(self.push(m, n, out, Op::MulCol(a, col), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.data(a).iter().map(|x| x * k).collect();
        let ng = self.needs(a);
        self.push(r, c, out, Op::Scale(a, k), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let src = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.needs(a);
        self.push(c, r, out, Op::Transpose(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.data(a).iter().map(|x| sigmoid(*x)).collect();
        let ng = self.needs(a);
        self.push(r, c, out, Op::Sigmoid(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.data(a).iter().map(|x| x.max(0.0)).collect();
        let ng = self.needs(a);
        self.push(r, c, out, Op::Relu(a), ng)
    }

    /// Row-wise softmax of `a / temperature`.
    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        let (r, c) = self.dims(a);
        let mut out = Vec::with_capacity(r * c);
        for row in self.data(a).chunks(c.max(1)) {
            out.extend(super::tensor::softmax(row, temperature)?);
        }
        let ng = self.needs(a);
        Ok(self.push(r, c, out, Op::SoftmaxRows(a, temperature), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let ng = self.needs(a);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len().max(1) as f64;
        let ng = self.needs(a);
        self.push(1, 1, vec![s], Op::Mean(a), ng)
    }

    /// Column means: m×n → 1×n.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if m == 0 {
            return Err(TmowError::Input("mean over zero rows".into()));
        }
        let mut out = vec![0.0; n];
        for row in self.data(a).chunks(n.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let ng = self.needs(a);
        Ok(self.push(1, n, out, Op::MeanRows(a), ng))
    }

    /// Means over consecutive row groups of the given lengths: Σlens×n → S×n.
    pub fn segment_mean(&mut self, a: Var, lens: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if lens.iter().sum::<usize>() != m || lens.contains(&0) {
            return Err(TmowError::Dimension {
                op: "segment_mean",
                lhs: vec![m, n],
                rhs: lens.to_vec(),
            });
        }
        let src = self.data(a);
        let mut out = vec![0.0; lens.len() * n];
        let mut start = 0;
        for (s, len) in lens.iter().enumerate() {
            for i in start..start + len {
                for j in 0..n {
                    out[s * n + j] += src[i * n + j];
                }
            }
            for j in 0..n {
                out[s * n + j] /= *len as f64;
            }
            start += len;
        }
        let ng = self.needs(a);
        Ok(self.push(lens.len(), n, out, Op::SegmentMean(a, lens.to_vec()), ng))
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(table);
        if let Some(bad) = idx.iter().find(|i| **i >= m) {
            return Err(TmowError::Input(format!(
                "row index {bad} out of range for table with {m} rows"
            )));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let ng = self.needs(table);
        Ok(self.push(idx.len(), n, out, Op::GatherRows(table, idx.to_vec()), ng))
    }

    /// Concatenates values with equal column counts along the row axis.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(TmowError::Input("stack of zero parts".into()));
        };
        let n = self.dims(*first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (r, c) = self.dims(*p);
            if c != n {
                return Err(self.dim_err("stack_rows", *first, *p));
            }
            rows += r;
            out.extend_from_slice(self.data(*p));
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(rows, n, out, Op::StackRows(parts.to_vec()), ng))
    }

    /// `D^{-1/2} E D^{-1/2}` with `D_ii = Σ_k E_ik`.
    pub fn sym_normalize(&mut self, e: Var) -> Result<Var> {
        let (n, c) = self.dims(e);
        if n != c {
            return Err(self.dim_err("sym_normalize", e, e));
        }
        let src = self.data(e);
        let mut inv_sqrt = vec![0.0; n];
        for i in 0..n {
            let d: f64 = src[i * n..(i + 1) * n].iter().sum();
            if !(d > 0.0) {
                return Err(TmowError::Degenerate(format!(
                    "edge matrix row sum is {d} at node {i}"
                )));
            }
            inv_sqrt[i] = 1.0 / d.sqrt();
        }
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = src[i * n + j] * inv_sqrt[i] * inv_sqrt[j];
            }
        }
        let ng = self.needs(e);
        Ok(self.push(n, n, out, Op::SymNormalize(e), ng))
    }

    /// Pairwise cosine similarities between the rows of `a` and the rows of `b`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = self.dims(a);
        let (n, d2) = self.dims(b);
        if d != d2 {
            return Err(self.dim_err("cosine_rows", a, b));
        }
        let ad = self.data(a);
        let bd = self.data(b);
        let an = row_norms(ad, m, d)?;
        let bn = row_norms(bd, n, d)?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let dotp: f64 = ad[i * d..(i + 1) * d]
                    .iter()
                    .zip(&bd[j * d..(j + 1) * d])
                    .map(|(x, y)| x * y)
                    .sum();
                out[i * n + j] = dotp / (an[i] * bn[j]);
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, Op::CosineRows(a, b), ng))
    }

    /// Mean over `(row, class)` pairs of `-log softmax(logits[row])[class]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let (m, v) = self.dims(logits);
        if targets.is_empty() {
            return Err(TmowError::Input("cross entropy with no targets".into()));
        }
        if let Some(&(r, c)) = targets.iter().find(|(r, c)| *r >= m || *c >= v) {
            return Err(TmowError::Input(format!(
                "target ({r}, {c}) outside logits of shape [{m}, {v}]"
            )));
        }
        let src = self.data(logits);
        let lse: Vec<f64> = src
            .chunks(v)
            .map(|row| log_sum_exp(row.iter().cloned()))
            .collect();
        let total: f64 = targets
            .iter()
            .map(|&(r, c)| lse[r] - src[r * v + c])
            .sum();
        let loss = total / targets.len() as f64;
        let ng = self.needs(logits);
        Ok(self.push(1, 1, vec![loss], Op::CrossEntropy(logits, targets.to_vec()), ng))
    }

    /// Masked contrastive loss over a similarity matrix `s` (m×n):
    /// `-(1/n) Σ_j log( Σ_i mask_ij e^{s_ij/τ} / Σ_i e^{s_ij/τ} )`.
    ///
    /// Columns index anchors and rows index candidates.
    pub fn info_nce(&mut self, s: Var, mask: &[bool], temperature: f64) -> Result<Var> {
        let (m, n) = self.dims(s);
        if mask.len() != m * n {
            return Err(TmowError::Dimension {
                op: "info_nce",
                lhs: vec![m, n],
                rhs: vec![mask.len()],
            });
        }
        if !(temperature > 0.0) {
            return Err(TmowError::param("temperature", "must be positive"));
        }
        let src = self.data(s);
        let mut total = 0.0;
        for j in 0..n {
            let col = (0..m).map(|i| src[i * n + j] / temperature);
            let pos = (0..m)
                .filter(|i| mask[i * n + j])
                .map(|i| src[i * n + j] / temperature);
            if (0..m).all(|i| !mask[i * n + j]) {
                return Err(TmowError::Degenerate(format!(
                    "contrastive column {j} has no positive"
                )));
            }
            total += log_sum_exp(col) - log_sum_exp(pos);
        }
        let loss = total / n as f64;
        let ng = self.needs(s);
        Ok(self.push(1, 1, vec![loss], Op::InfoNce(s, mask.to_vec(), temperature), ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = self.node(loss);
        if ln.rows * ln.cols != 1 {
            return Err(TmowError::Contract(format!(
                "backward needs a scalar loss, got [{}, {}]",
                ln.rows, ln.cols
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            dims: self.nodes.iter().map(|n| (n.rows, n.cols)).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.needs(*a) {
                    // dA = G Bᵀ
                    let bd = self.data(*b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for t in 0..k {
                                da[i * k + t] += gv * bd[t * n + j];
                            }
                        }
                    }
                    acc(*a, da);
                }
                if self.needs(*b) {
                    // dB = Aᵀ G
                    let ad = self.data(*a);
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for t in 0..k {
                            let av = ad[i * k + t];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[t * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let ad = self.data(*a);
                let bd = self.data(*b);
                acc(*a, g.iter().zip(bd).map(|(x, y)| x * y).collect());
                acc(*b, g.iter().zip(ad).map(|(x, y)| x * y).collect());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.to_vec());
                let n = self.dims(*row).1;
                let mut dr = vec![0.0; n];
                for r in g.chunks(n.max(1)) {
                    for (d, v) in dr.iter_mut().zip(r) {
                        *d += v;
                    }
                }
                acc(*row, dr);
            }
            Op::MulCol(a, col) => {
                let (m, n) = self.dims(*a);
                let cd = self.data(*col);
                let ad = self.data(*a);
                let mut da = g.to_vec();
                let mut dc = vec![0.0; m];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] *= cd[i];
                        dc[i] += g[i * n + j] * ad[i * n + j];
                    }
                }
                acc(*a, da);
                acc(*col, dc);
            }
            Op::Scale(a, k) => acc(*a, g.iter().map(|x| x * k).collect()),
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                acc(*a, da);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, g.iter().zip(y).map(|(gv, s)| gv * s * (1.0 - s)).collect());
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                acc(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                );
            }
            Op::SoftmaxRows(a, t) => {
                let c = node.cols;
                let y = &node.value;
                let mut da = vec![0.0; y.len()];
                for (i, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                    let inner: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        da[i * c + j] = yr[j] * (gr[j] - inner) / t;
                    }
                }
                acc(*a, da);
            }
            Op::Sum(a) => {
                let n = self.data(*a).len();
                acc(*a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.data(*a).len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::MeanRows(a) => {
                let (m, n) = self.dims(*a);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j] / m as f64;
                    }
                }
                acc(*a, da);
            }
            Op::SegmentMean(a, lens) => {
                let (m, n) = self.dims(*a);
                let mut da = vec![0.0; m * n];
                let mut start = 0;
                for (s, len) in lens.iter().enumerate() {
                    for i in start..start + len {
                        for j in 0..n {
                            da[i * n + j] = g[s * n + j] / *len as f64;
                        }
                    }
                    start += len;
                }
                acc(*a, da);
            }
            Op::GatherRows(table, idx) => {
                let (m, n) = self.dims(*table);
                let mut dt = vec![0.0; m * n];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        dt[i * n + j] += g[k * n + j];
                    }
                }
                acc(*table, dt);
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.data(*p).len();
                    acc(*p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::SymNormalize(e) => {
                let n = node.rows;
                let ed = self.data(*e);
                let s: Vec<f64> = (0..n)
                    .map(|i| 1.0 / ed[i * n..(i + 1) * n].iter().sum::<f64>().sqrt())
                    .collect();
                // Direct term plus the dependence of each degree on its row.
                let mut ds = vec![0.0; n];
                for i in 0..n {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        ds[i] += gij * ed[i * n + j] * s[j];
                        ds[j] += gij * ed[i * n + j] * s[i];
                    }
                }
                let mut de = vec![0.0; n * n];
                for i in 0..n {
                    let dd = ds[i] * (-0.5) * s[i].powi(3);
                    for j in 0..n {
                        de[i * n + j] = g[i * n + j] * s[i] * s[j] + dd;
                    }
                }
                acc(*e, de);
            }
            Op::CosineRows(a, b) => {
                let (m, d) = self.dims(*a);
                let n = self.dims(*b).0;
                let ad = self.data(*a);
                let bd = self.data(*b);
                let an = row_norms(ad, m, d).expect("checked in forward");
                let bn = row_norms(bd, n, d).expect("checked in forward");
                let sv = &node.value;
                let mut da = vec![0.0; m * d];
                let mut db = vec![0.0; n * d];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let sij = sv[i * n + j];
                        let inv = 1.0 / (an[i] * bn[j]);
                        for t in 0..d {
                            let x = ad[i * d + t];
                            let y = bd[j * d + t];
                            da[i * d + t] += gij * (y * inv - sij * x / (an[i] * an[i]));
                            db[j * d + t] += gij * (x * inv - sij * y / (bn[j] * bn[j]));
                        }
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::CrossEntropy(logits, targets) => {
                let (m, v) = self.dims(*logits);
                let src = self.data(*logits);
                let mut probs = vec![0.0; m * v];
                for (i, row) in src.chunks(v).enumerate() {
                    let lse = log_sum_exp(row.iter().cloned());
                    for j in 0..v {
                        probs[i * v + j] = (row[j] - lse).exp();
                    }
                }
                let mut counts = vec![0usize; m];
                for &(r, _) in targets {
                    counts[r] += 1;
                }
                let scale = g[0] / targets.len() as f64;
                let mut dl = vec![0.0; m * v];
                for i in 0..m {
                    if counts[i] == 0 {
                        continue;
                    }
                    for j in 0..v {
                        dl[i * v + j] = scale * counts[i] as f64 * probs[i * v + j];
                    }
                }
                for &(r, c) in targets {
                    dl[r * v + c] -= scale;
                }
                acc(*logits, dl);
            }
            Op::InfoNce(s, mask, t) => {
                let (m, n) = self.dims(*s);
                let src = self.data(*s);
                let mut ds = vec![0.0; m * n];
                let scale = g[0] / (n as f64 * t);
                for j in 0..n {
                    let all = log_sum_exp((0..m).map(|i| src[i * n + j] / t));
                    let pos = log_sum_exp(
                        (0..m)
                            .filter(|i| mask[i * n + j])
                            .map(|i| src[i * n + j] / t),
                    );
                    for i in 0..m {
                        let z = src[i * n + j] / t;
                        let p_all = (z - all).exp();
                        let p_pos = if mask[i * n + j] { (z - pos).exp() } else { 0.0 };
                        ds[i * n + j] = scale * (p_all - p_pos);
                    }
                }
                acc(*s, ds);
            }
        }
    }
}

fn row_norms(data: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    (0..rows)
        .map(|i| {
            let n = data[i * cols..(i + 1) * cols]
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            if n > 0.0 && n.is_finite() {
                Ok(n)
            } else {
                Err(TmowError::Degenerate(format!(
                    "cosine similarity of zero-norm row {i}"
                )))
            }
        })
        .collect()
}
