use crate::error::TensorError;
use crate::tensor::{gemm, gemm_strided, Tensor};
use crate::Result;

/// Rows whose norm falls below this are treated as having this norm.
const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recordable operation kinds and their shape rules. No kind broadcasts
/// implicitly; the bias and block operations spell out their expansion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    /// `[m,k] × [k,n] → [m,n]`.
    MatMul,
    /// `[m,n] → [n,m]`.
    Transpose,
    /// Two inputs of identical shape, same shape out.
    Add,
    /// Two inputs of identical shape, same shape out.
    Sub,
    /// Elementwise product; identical shapes.
    Mul,
    /// Multiply every element by a constant.
    Scale(f64),
    /// Add a constant to every element.
    AddScalar(f64),
    /// `[n,d] + [d] → [n,d]`, the vector is added to every row.
    AddBias,
    /// Concatenate along the last axis. Rank 1: lengths add. Rank 2: row
    /// counts must agree and column counts add.
    Concat,
    Relu,
    Tanh,
    Exp,
    /// Natural log; every input element must be positive.
    Log,
    /// `max(x, floor)` elementwise; gradient is zero where clamped.
    ClampMin(f64),
    /// Any shape to scalar `[]`.
    Sum,
    /// Any non-empty shape to scalar `[]`.
    Mean,
    /// Sum of squares, any shape to scalar `[]`.
    SumSq,
    /// `[n,m] → [n]`.
    SumRows,
    /// Cosine similarity of two same-shaped inputs. Rank 1 gives a scalar;
    /// rank 2 `[n,d]` gives `[n]`, one value per row pair.
    CosineSim,
    /// Scale each row (rank 2) or the whole vector (rank 1) to unit L2 norm.
    NormalizeRows,
    /// `[n,d] → [b·n,d]`, stacking `b` copies vertically.
    RepeatRows(usize),
    /// `[b·n,d] → [n,d]`, mean of the `b` vertical blocks.
    MeanBlocks(usize),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::AddBias => "add_bias",
            OpKind::Concat => "concat",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::ClampMin(_) => "clamp_min",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumSq => "sum_sq",
            OpKind::SumRows => "sum_rows",
            OpKind::CosineSim => "cosine_sim",
            OpKind::NormalizeRows => "normalize_rows",
            OpKind::RepeatRows(_) => "repeat_rows",
            OpKind::MeanBlocks(_) => "mean_blocks",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Concat => None,
            OpKind::MatMul
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::AddBias
            | OpKind::CosineSim => Some(2),
            _ => Some(1),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Apply(OpKind, Vec<Var>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Define-by-run record of a computation.
///
/// Nodes are appended in execution order, so parents always precede their
/// children and reverse index order is a valid topological order.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node of a tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; exact zeros when `var` does not reach the root.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
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

    /// Records an input. Leaves are the only nodes whose values come from
    /// outside the tape (parameters, data, constants).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Executes `kind` on `inputs` and records the result.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = kind.arity() {
            if inputs.len() != n {
                return Err(TensorError::Arity {
                    op: kind.name(),
                    expected: n,
                    got: inputs.len(),
                });
            }
        } else if inputs.is_empty() {
            return Err(TensorError::Arity {
                op: kind.name(),
                expected: 1,
                got: 0,
            });
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = forward(kind, &values)?;
        if !out.all_finite() {
            return Err(TensorError::NonFinite { op: kind.name() });
        }
        self.nodes.push(Node {
            value: out,
            op: Op::Apply(kind, inputs.to_vec()),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[a])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.apply(OpKind::Scale(factor), &[a])
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::AddScalar(c), &[a])
    }
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.apply(OpKind::AddBias, &[x, bias])
    }
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(OpKind::Concat, parts)
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Tanh, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Log, &[a])
    }
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.apply(OpKind::ClampMin(floor), &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[a])
    }
    pub fn sum_sq(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::SumSq, &[a])
    }
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::SumRows, &[a])
    }
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::CosineSim, &[a, b])
    }
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::NormalizeRows, &[a])
    }
    pub fn repeat_rows(&mut self, a: Var, copies: usize) -> Result<Var> {
        self.apply(OpKind::RepeatRows(copies), &[a])
    }
    pub fn mean_blocks(&mut self, a: Var, blocks: usize) -> Result<Var> {
        self.apply(OpKind::MeanBlocks(blocks), &[a])
    }

    /// Reverse pass from a scalar `root`. Nodes recorded after `root` are
    /// ignored; every node at or before it is visited exactly once.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Op::Apply(kind, inputs) = &node.op {
                let values: Vec<&Tensor> =
                    inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let contributions = vjp(*kind, &values, &node.value, &upstream);
                for (input, contrib) in inputs.iter().zip(contributions) {
                    accumulate(&mut grads[input.0], contrib);
                }
            }
            grads[idx] = Some(upstream);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, contrib: Tensor) {
    match slot {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(contrib.data())
            .for_each(|(a, b)| *a += b),
        None => *slot = Some(contrib),
    }
}

fn shape_err(kind: OpKind, inputs: &[&Tensor]) -> TensorError {
    TensorError::Shape {
        op: kind.name(),
        shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn row_view(t: &Tensor) -> (usize, usize) {
    match t.rank() {
        1 => (1, t.len()),
        _ => (t.shape()[0], t.shape()[1]),
    }
}

fn forward(kind: OpKind, x: &[&Tensor]) -> Result<Tensor> {
    let err = || shape_err(kind, x);
    let out = match kind {
        OpKind::MatMul => {
            let (a, b) = (x[0], x[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(err());
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, a.data(), b.data(), &mut c);
            Tensor::new(vec![m, n], c)?
        }
        OpKind::Transpose => {
            if x[0].rank() != 2 {
                return Err(err());
            }
            x[0].transpose()
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            if x[0].shape() != x[1].shape() {
                return Err(err());
            }
            match kind {
                OpKind::Add => zip_map(x[0], x[1], |a, b| a + b),
                OpKind::Sub => zip_map(x[0], x[1], |a, b| a - b),
                _ => zip_map(x[0], x[1], |a, b| a * b),
            }
        }
        OpKind::Scale(s) => x[0].map(|v| v * s),
        OpKind::AddScalar(c) => x[0].map(|v| v + c),
        OpKind::AddBias => {
            let (m, b) = (x[0], x[1]);
            if m.rank() != 2 || b.rank() != 1 || m.shape()[1] != b.len() {
                return Err(err());
            }
            let mut out = m.clone();
            let cols = b.len();
            for row in out.data_mut().chunks_exact_mut(cols.max(1)) {
                row.iter_mut().zip(b.data()).for_each(|(v, bb)| *v += bb);
            }
            out
        }
        OpKind::Concat => {
            let rank = x[0].rank();
            if !(rank == 1 || rank == 2) || x.iter().any(|t| t.rank() != rank) {
                return Err(err());
            }
            if rank == 1 {
                Tensor::vector(x.iter().flat_map(|t| t.data().iter().copied()).collect())
            } else {
                let rows = x[0].shape()[0];
                if x.iter().any(|t| t.shape()[0] != rows) {
                    return Err(err());
                }
                let cols: usize = x.iter().map(|t| t.shape()[1]).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for t in x {
                        data.extend_from_slice(t.row(r));
                    }
                }
                Tensor::new(vec![rows, cols], data)?
            }
        }
        OpKind::Relu => x[0].map(|v| if v > 0.0 { v } else { 0.0 }),
        OpKind::Tanh => x[0].map(f64::tanh),
        OpKind::Exp => x[0].map(f64::exp),
        OpKind::Log => {
            if x[0].data().iter().any(|&v| v <= 0.0) {
                return Err(TensorError::InvalidArgument {
                    op: "log",
                    msg: "non-positive input".into(),
                });
            }
            x[0].map(f64::ln)
        }
        OpKind::ClampMin(floor) => x[0].map(|v| if v < floor { floor } else { v }),
        OpKind::Sum => Tensor::scalar(x[0].data().iter().sum()),
        OpKind::Mean => {
            if x[0].is_empty() {
                return Err(err());
            }
            Tensor::scalar(x[0].data().iter().sum::<f64>() / x[0].len() as f64)
        }
        OpKind::SumSq => Tensor::scalar(x[0].data().iter().map(|v| v * v).sum()),
        OpKind::SumRows => {
            if x[0].rank() != 2 {
                return Err(err());
            }
            let cols = x[0].shape()[1];
            let rows = x[0].shape()[0];
            Tensor::vector((0..rows).map(|r| x[0].data()[r * cols..(r + 1) * cols].iter().sum()).collect())
        }
        OpKind::CosineSim => {
            let (a, b) = (x[0], x[1]);
            if a.shape() != b.shape() || !(a.rank() == 1 || a.rank() == 2) {
                return Err(err());
            }
            let (rows, cols) = row_view(a);
            let sims: Vec<f64> = (0..rows)
                .map(|r| {
                    let (u, v) = (&a.data()[r * cols..(r + 1) * cols], &b.data()[r * cols..(r + 1) * cols]);
                    cosine_parts(u, v).0
                })
                .collect();
            if a.rank() == 1 {
                Tensor::scalar(sims[0])
            } else {
                Tensor::vector(sims)
            }
        }
        OpKind::NormalizeRows => {
            let a = x[0];
            if !(a.rank() == 1 || a.rank() == 2) {
                return Err(err());
            }
            let (_, cols) = row_view(a);
            let mut out = a.clone();
            for row in out.data_mut().chunks_exact_mut(cols.max(1)) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
                row.iter_mut().for_each(|v| *v /= norm);
            }
            out
        }
        OpKind::RepeatRows(copies) => {
            let a = x[0];
            if a.rank() != 2 || copies == 0 {
                return Err(err());
            }
            let mut data = Vec::with_capacity(a.len() * copies);
            for _ in 0..copies {
                data.extend_from_slice(a.data());
            }
            Tensor::new(vec![a.shape()[0] * copies, a.shape()[1]], data)?
        }
        OpKind::MeanBlocks(blocks) => {
            let a = x[0];
            if a.rank() != 2 || blocks == 0 || !a.shape()[0].is_multiple_of(blocks) {
                return Err(err());
            }
            let block_len = a.len() / blocks;
            let mut data = vec![0.0; block_len];
            for block in a.data().chunks_exact(block_len.max(1)) {
                data.iter_mut().zip(block).for_each(|(acc, v)| *acc += v);
            }
            let inv = 1.0 / blocks as f64;
            data.iter_mut().for_each(|v| *v *= inv);
            Tensor::new(vec![a.shape()[0] / blocks, a.shape()[1]], data)?
        }
    };
    Ok(out)
}

/// Returns (cosine, dot, |u|, |v|) with norms floored.
fn cosine_parts(u: &[f64], v: &[f64]) -> (f64, f64, f64, f64) {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt().max(NORM_FLOOR);
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(NORM_FLOOR);
    (dot / (nu * nv), dot, nu, nv)
}

/// Vector-Jacobian products: contribution of `g` (gradient w.r.t. the
/// output) to each input's gradient.
fn vjp(kind: OpKind, x: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Tensor> {
    match kind {
        OpKind::MatMul => {
            let (a, b) = (x[0], x[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            // dA = G·Bᵀ, dB = Aᵀ·G
            let mut da = vec![0.0; m * k];
            gemm_strided(m, n, k, g.data(), (n, 1), b.data(), (1, n), &mut da, 0.0);
            let mut db = vec![0.0; k * n];
            gemm_strided(k, m, n, a.data(), (1, k), g.data(), (n, 1), &mut db, 0.0);
            vec![
                Tensor::new(vec![m, k], da).unwrap(),
                Tensor::new(vec![k, n], db).unwrap(),
            ]
        }
        OpKind::Transpose => vec![g.transpose()],
        OpKind::Add => vec![g.clone(), g.clone()],
        OpKind::Sub => vec![g.clone(), g.map(|v| -v)],
        OpKind::Mul => vec![
            zip_map(g, x[1], |gv, b| gv * b),
            zip_map(g, x[0], |gv, a| gv * a),
        ],
        OpKind::Scale(s) => vec![g.map(|v| v * s)],
        OpKind::AddScalar(_) => vec![g.clone()],
        OpKind::AddBias => {
            let cols = x[1].len();
            let mut db = vec![0.0; cols];
            for row in g.data().chunks_exact(cols.max(1)) {
                db.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
            }
            vec![g.clone(), Tensor::vector(db)]
        }
        OpKind::Concat => {
            if x[0].rank() == 1 {
                let mut offset = 0;
                x.iter()
                    .map(|t| {
                        let part = Tensor::vector(g.data()[offset..offset + t.len()].to_vec());
                        offset += t.len();
                        part
                    })
                    .collect()
            } else {
                let rows = x[0].shape()[0];
                let mut parts: Vec<Vec<f64>> = x.iter().map(|t| Vec::with_capacity(t.len())).collect();
                for r in 0..rows {
                    let grow = g.row(r);
                    let mut offset = 0;
                    for (part, t) in parts.iter_mut().zip(x) {
                        let w = t.shape()[1];
                        part.extend_from_slice(&grow[offset..offset + w]);
                        offset += w;
                    }
                }
                parts
                    .into_iter()
                    .zip(x)
                    .map(|(p, t)| Tensor::new(t.shape().to_vec(), p).unwrap())
                    .collect()
            }
        }
        // relu'(0) = 0
        OpKind::Relu => vec![zip_map(g, x[0], |gv, v| if v > 0.0 { gv } else { 0.0 })],
        OpKind::Tanh => vec![zip_map(g, out, |gv, y| gv * (1.0 - y * y))],
        OpKind::Exp => vec![zip_map(g, out, |gv, y| gv * y)],
        OpKind::Log => vec![zip_map(g, x[0], |gv, v| gv / v)],
        OpKind::ClampMin(floor) => vec![zip_map(g, x[0], |gv, v| if v < floor { 0.0 } else { gv })],
        OpKind::Sum => vec![Tensor::full(x[0].shape(), g.item())],
        OpKind::Mean => vec![Tensor::full(x[0].shape(), g.item() / x[0].len() as f64)],
        OpKind::SumSq => {
            let gv = g.item();
            vec![x[0].map(|v| 2.0 * v * gv)]
        }
        OpKind::SumRows => {
            let cols = x[0].shape()[1];
            let mut d = Vec::with_capacity(x[0].len());
            for &gv in g.data() {
                d.extend(std::iter::repeat_n(gv, cols));
            }
            vec![Tensor::new(x[0].shape().to_vec(), d).unwrap()]
        }
        OpKind::CosineSim => {
            let (a, b) = (x[0], x[1]);
            let (rows, cols) = row_view(a);
            let mut da = vec![0.0; a.len()];
            let mut db = vec![0.0; b.len()];
            for r in 0..rows {
                let span = r * cols..(r + 1) * cols;
                let (u, v) = (&a.data()[span.clone()], &b.data()[span.clone()]);
                let (c, _, nu, nv) = cosine_parts(u, v);
                let gr = g.data()[r];
                for j in 0..cols {
                    da[span.start + j] = gr * (v[j] / (nu * nv) - c * u[j] / (nu * nu));
                    db[span.start + j] = gr * (u[j] / (nu * nv) - c * v[j] / (nv * nv));
                }
            }
            vec![
                Tensor::new(a.shape().to_vec(), da).unwrap(),
                Tensor::new(b.shape().to_vec(), db).unwrap(),
            ]
        }
        OpKind::NormalizeRows => {
            let a = x[0];
            let (_, cols) = row_view(a);
            let mut d = vec![0.0; a.len()];
            let chunks = a
                .data()
                .chunks_exact(cols.max(1))
                .zip(out.data().chunks_exact(cols.max(1)))
                .zip(g.data().chunks_exact(cols.max(1)))
                .zip(d.chunks_exact_mut(cols.max(1)));
            for (((xr, yr), gr), dr) in chunks {
                let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
                let yg: f64 = yr.iter().zip(gr).map(|(y, gv)| y * gv).sum();
                for j in 0..dr.len() {
                    dr[j] = (gr[j] - yr[j] * yg) / norm;
                }
            }
            vec![Tensor::new(a.shape().to_vec(), d).unwrap()]
        }
        OpKind::RepeatRows(_) => {
            let block = x[0].len();
            let mut d = vec![0.0; block];
            for chunk in g.data().chunks_exact(block.max(1)) {
                d.iter_mut().zip(chunk).for_each(|(acc, v)| *acc += v);
            }
            vec![Tensor::new(x[0].shape().to_vec(), d).unwrap()]
        }
        OpKind::MeanBlocks(blocks) => {
            let inv = 1.0 / blocks as f64;
            let mut d = Vec::with_capacity(x[0].len());
            for _ in 0..blocks {
                d.extend(g.data().iter().map(|v| v * inv));
            }
            vec![Tensor::new(x[0].shape().to_vec(), d).unwrap()]
        }
    }
}
