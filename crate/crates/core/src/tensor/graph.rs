use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::Tensor;
use crate::error::{MoleError, Result};
use crate::losses::ctc;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Expert evaluation counters, updated by the MoE and MoLE layers.
///
/// `expert_flops` counts multiply-adds of expert FFN evaluations only.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExpertCounters {
    pub lse_evals: u64,
    pub lae_evals: u64,
    pub moe_expert_evals: u64,
    pub common_evals: u64,
    pub expert_rows: u64,
    pub expert_flops: u64,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRows(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    Row(Var, usize),
    StackRows(Vec<Var>),
    Index(Var, usize),
    Cosine(Var, Var),
    Ctc {
        logp: Var,
        target: Vec<usize>,
        len: usize,
        alpha: Vec<f64>,
    },
}

#[derive(Debug)]
enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Tape of the operations executed during one forward pass.
///
/// Parameters are read from a borrowed [`ParamStore`]; gradients for them
/// are handed back through [`Graph::param_grads`] so the store can be
/// updated once the graph is dropped.
#[derive(Debug)]
pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, Var>,
    backward_done: bool,
    counters: ExpertCounters,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[0], shape[1]),
    }
}

fn lse(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
            backward_done: false,
            counters: ExpertCounters::default(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Graph {
            store: Some(store),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn counters(&self) -> ExpertCounters {
        self.counters
    }

    pub fn counters_mut(&mut self) -> &mut ExpertCounters {
        &mut self.counters
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input leaf.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Non-differentiable constant leaf.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.push(vec![], vec![v], Op::Leaf, false)
    }

    /// Leaf bound to a parameter of the attached store. Repeated calls with
    /// the same id return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store attached");
        let shape = store.get(id).shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Value::Param(id),
            op: Op::Param,
            requires_grad: true,
            grad: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_leaves.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self
                .store
                .expect("param node without store")
                .get(*id)
                .data(),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("consistent node")
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(MoleError::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(MoleError::dim(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    // ---- forward operations ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(MoleError::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix("transpose", a)?;
        let av = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), rg))
    }

    /// Same data under a new shape of equal size.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(MoleError::dim("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), rg))
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// `a[m×n] + b[n]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, n) = rows_cols(self.shape(a));
        if self.shape(b) != [n] {
            return Err(MoleError::dim("add_row", self.shape(a), self.shape(b)));
        }
        let bv = self.value(b).to_vec();
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % n])
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::AddRow(a, b), rg))
    }

    /// Scales row `i` of `a[m×n]` by `w[i]`.
    pub fn mul_rows(&mut self, a: Var, w: Var) -> Result<Var> {
        let (m, n) = self.matrix("mul_rows", a)?;
        if self.shape(w) != [m] {
            return Err(MoleError::dim("mul_rows", self.shape(a), self.shape(w)));
        }
        let wv = self.value(w).to_vec();
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * wv[i / n])
            .collect();
        let rg = self.rg(a) || self.rg(w);
        Ok(self.push(vec![m, n], out, Op::MulRows(a, w), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Scale(a, c), rg))
    }

    /// `a * s` for a scalar node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(MoleError::dim("mul_scalar", self.shape(a), self.shape(s)));
        }
        let sv = self.value(s)[0];
        let out = self.value(a).iter().map(|x| x * sv).collect();
        let rg = self.rg(a) || self.rg(s);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::MulScalar(a, s), rg))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        Ok(self.map(a, Op::Relu(a), |x| x.max(0.0)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        Ok(self.map(a, Op::Tanh(a), f64::tanh))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        Ok(self.map(a, Op::Sigmoid(a), sigmoid))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        Ok(self.map(a, Op::Exp(a), f64::exp))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|&x| x <= 0.0 || x.is_nan()) {
            return Err(MoleError::Numeric("log of non-positive value".into()));
        }
        Ok(self.map(a, Op::Log(a), f64::ln))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        Ok(self.push(vec![], vec![s], Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(MoleError::Contract("mean of empty tensor".into()));
        }
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        Ok(self.push(vec![], vec![s], Op::Mean(a), rg))
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a), rows_cols(self.shape(a)).1)?;
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Softmax(a), rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let n = rows_cols(self.shape(a)).1;
        let v = self.value(a);
        if v.iter().any(|x| x.is_nan()) {
            return Err(MoleError::Numeric("NaN input to log_softmax".into()));
        }
        let mut out = Vec::with_capacity(v.len());
        for row in v.chunks(n) {
            let l = lse(row.iter().copied());
            out.extend(row.iter().map(|x| x - l));
        }
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::LogSoftmax(a), rg))
    }

    /// Per-row layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (_, n) = rows_cols(self.shape(x));
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(MoleError::dim(
                "layer_norm",
                self.shape(x),
                self.shape(gain),
            ));
        }
        let g = self.value(gain).to_vec();
        let b = self.value(bias).to_vec();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            out.extend(
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mu) * inv * g[j] + b[j]),
            );
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::LayerNorm { x, gain, bias, eps }, rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(a));
        if start > end || end > n {
            return Err(MoleError::dim("slice_cols", self.shape(a), &[start, end]));
        }
        let w = end - start;
        let av = self.value(a);
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&av[i * n + start..i * n + end]);
        }
        let shape = if self.shape(a).len() == 1 {
            vec![w]
        } else {
            vec![m, w]
        };
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::SliceCols(a, start, end), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| MoleError::Contract("concat of nothing".into()))?;
        let (m, _) = self.matrix("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mi, ni) = self.matrix("concat_cols", p)?;
            if mi != m {
                return Err(MoleError::dim(
                    "concat_cols",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            widths.push(ni);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for i in 0..m {
                out[i * total + off..i * total + off + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Selects rows `idx` of a matrix (duplicates allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix("gather_rows", a)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(MoleError::dim("gather_rows", self.shape(a), &[bad]));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&av[i * n..(i + 1) * n]);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![idx.len(), n], out, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// Places row `r` of `a` at row `idx[r]` of a zero matrix with `total` rows.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], total: usize) -> Result<Var> {
        let (m, n) = self.matrix("scatter_rows", a)?;
        if m != idx.len() || idx.iter().any(|&i| i >= total) {
            return Err(MoleError::dim(
                "scatter_rows",
                self.shape(a),
                &[idx.len(), total],
            ));
        }
        let av = self.value(a);
        let mut out = vec![0.0; total * n];
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..n {
                out[i * n + j] += av[r * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![total, n], out, Op::ScatterRows(a, idx.to_vec()), rg))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let (m, n) = self.matrix("row", a)?;
        if i >= m {
            return Err(MoleError::dim("row", self.shape(a), &[i]));
        }
        let out = self.value(a)[i * n..(i + 1) * n].to_vec();
        let rg = self.rg(a);
        Ok(self.push(vec![n], out, Op::Row(a, i), rg))
    }

    /// Stacks equally shaped vectors into a matrix, or scalars into a vector.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| MoleError::Contract("stack of nothing".into()))?;
        let s0 = self.shape(first).to_vec();
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p) != s0.as_slice() {
                return Err(MoleError::dim("stack", &s0, self.shape(p)));
            }
            out.extend_from_slice(self.value(p));
        }
        let shape = match s0.len() {
            0 => vec![parts.len()],
            1 => vec![parts.len(), s0[0]],
            _ => return Err(MoleError::dim("stack", &s0, &[])),
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(shape, out, Op::StackRows(parts.to_vec()), rg))
    }

    /// Element `i` of the flattened tensor as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let v = self
            .value(a)
            .get(i)
            .copied()
            .ok_or_else(|| MoleError::dim("index", self.shape(a), &[i]))?;
        let rg = self.rg(a);
        Ok(self.push(vec![], vec![v], Op::Index(a, i), rg))
    }

    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        if self.shape(u).len() != 1 {
            return Err(MoleError::dim("cosine", self.shape(u), self.shape(v)));
        }
        self.same_shape("cosine", u, v)?;
        let c = cosine_raw(self.value(u), self.value(v))?;
        let rg = self.rg(u) || self.rg(v);
        Ok(self.push(vec![], vec![c], Op::Cosine(u, v), rg))
    }

    /// CTC negative log-likelihood of `target` (labels in `1..V`, blank 0)
    /// given per-frame log-probabilities over the first `len` rows.
    /// Infeasible targets yield `+inf` with zero gradient.
    pub fn ctc(&mut self, logp: Var, target: &[usize], len: usize) -> Result<Var> {
        let (t, v) = self.matrix("ctc", logp)?;
        if len == 0 || len > t {
            return Err(MoleError::Contract(format!(
                "ctc length {len} outside 1..={t}"
            )));
        }
        if let Some(&bad) = target.iter().find(|&&k| k == 0 || k >= v) {
            return Err(MoleError::Contract(format!(
                "ctc target label {bad} outside 1..{v}"
            )));
        }
        let alpha = ctc::log_alpha(&self.value(logp)[..len * v], v, target);
        let loss = -ctc::total_log_prob(&alpha, len, target.len());
        let rg = self.rg(logp);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::Ctc {
                logp,
                target: target.to_vec(),
                len,
                alpha,
            },
            rg,
        ))
    }

    // ---- backward ----

    /// Reverse pass from scalar `root`. May be called once per graph until
    /// [`Graph::reset_grads`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(MoleError::Graph(
                "backward called twice without reset".into(),
            ));
        }
        if self.value(root).len() != 1 {
            return Err(MoleError::Contract(format!(
                "backward requires a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        self.backward_done = true;
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let res = self.propagate(Var(i), &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
            res?;
        }
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Gradients of every parameter leaf touched by the last backward pass.
    pub fn param_grads(&self, num_params: usize) -> Gradients {
        let mut slots = vec![None; num_params];
        for (&id, &v) in &self.param_leaves {
            if let Some(g) = self.grad(v) {
                slots[id.0] = Some(g.to_vec());
            }
        }
        Gradients { slots }
    }

    fn acc(&mut self, v: Var, g: impl IntoIterator<Item = f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].shape.iter().product::<usize>();
        let slot = self.nodes[v.0].grad.get_or_insert_with(|| vec![0.0; n]);
        for (s, x) in slot.iter_mut().zip(g) {
            *s += x;
        }
    }

    fn propagate(&mut self, out: Var, op: &Op, g: &[f64]) -> Result<()> {
        match op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(self.shape(*a));
                let n = rows_cols(self.shape(*b)).1;
                if self.rg(*a) {
                    // dA = dY · Bᵀ
                    let bv = self.value(*b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    self.acc(*a, da);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · dY
                    let av = self.value(*a);
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            let row = &mut db[p * n..(p + 1) * n];
                            for (d, gy) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *d += x * gy;
                            }
                        }
                    }
                    self.acc(*b, db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = rows_cols(self.shape(*a));
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                self.acc(*a, da);
            }
            Op::Reshape(a) => self.acc(*a, g.iter().copied()),
            Op::Add(a, b) => {
                self.acc(*a, g.iter().copied());
                self.acc(*b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.acc(*a, g.iter().copied());
                self.acc(*b, g.iter().map(|x| -x));
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b).to_vec();
                let av = self.value(*a).to_vec();
                self.acc(*a, g.iter().zip(&bv).map(|(x, y)| x * y));
                self.acc(*b, g.iter().zip(&av).map(|(x, y)| x * y));
            }
            Op::AddRow(a, b) => {
                self.acc(*a, g.iter().copied());
                let n = self.shape(*b)[0];
                let mut db = vec![0.0; n];
                for (i, x) in g.iter().enumerate() {
                    db[i % n] += x;
                }
                self.acc(*b, db);
            }
            Op::MulRows(a, w) => {
                let (m, n) = rows_cols(self.shape(*a));
                let wv = self.value(*w).to_vec();
                let av = self.value(*a).to_vec();
                self.acc(*a, g.iter().enumerate().map(|(i, x)| x * wv[i / n]));
                let mut dw = vec![0.0; m];
                for i in 0..m {
                    for j in 0..n {
                        dw[i] += g[i * n + j] * av[i * n + j];
                    }
                }
                self.acc(*w, dw);
            }
            Op::Scale(a, c) => self.acc(*a, g.iter().map(|x| x * c)),
            Op::MulScalar(a, s) => {
                let sv = self.value(*s)[0];
                let ds: f64 = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).sum();
                self.acc(*a, g.iter().map(|x| x * sv));
                self.acc(*s, [ds]);
            }
            Op::Relu(a) => {
                let av = self.value(*a).to_vec();
                self.acc(
                    *a,
                    g.iter()
                        .zip(&av)
                        .map(|(x, &y)| if y > 0.0 { *x } else { 0.0 }),
                );
            }
            Op::Tanh(a) => {
                let y = self.value(out).to_vec();
                self.acc(*a, g.iter().zip(&y).map(|(x, y)| x * (1.0 - y * y)));
            }
            Op::Sigmoid(a) => {
                let y = self.value(out).to_vec();
                self.acc(*a, g.iter().zip(&y).map(|(x, y)| x * y * (1.0 - y)));
            }
            Op::Exp(a) => {
                let y = self.value(out).to_vec();
                self.acc(*a, g.iter().zip(&y).map(|(x, y)| x * y));
            }
            Op::Log(a) => {
                let av = self.value(*a).to_vec();
                self.acc(*a, g.iter().zip(&av).map(|(x, y)| x / y));
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.acc(*a, std::iter::repeat_n(g[0], n));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.acc(*a, std::iter::repeat_n(g[0] / n as f64, n));
            }
            Op::Softmax(a) => {
                let n = rows_cols(self.shape(*a)).1;
                let y = self.value(out).to_vec();
                let mut da = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    da.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                self.acc(*a, da);
            }
            Op::LogSoftmax(a) => {
                let n = rows_cols(self.shape(*a)).1;
                let y = self.value(out).to_vec();
                let mut da = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                    let s: f64 = gr.iter().sum();
                    da.extend(yr.iter().zip(gr).map(|(y, g)| g - y.exp() * s));
                }
                self.acc(*a, da);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let n = rows_cols(self.shape(*x)).1;
                let xv = self.value(*x).to_vec();
                let gv = self.value(*gain).to_vec();
                let mut dx = Vec::with_capacity(xv.len());
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                for (row, gr) in xv.chunks(n).zip(g.chunks(n)) {
                    let mu = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mu) * inv).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(&gv).map(|(a, b)| a * b).collect();
                    let m1 = dxhat.iter().sum::<f64>() / n as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx.push(inv * (dxhat[j] - m1 - xhat[j] * m2));
                        dg[j] += gr[j] * xhat[j];
                        db[j] += gr[j];
                    }
                }
                self.acc(*x, dx);
                self.acc(*gain, dg);
                self.acc(*bias, db);
            }
            Op::SliceCols(a, start, end) => {
                let (m, n) = rows_cols(self.shape(*a));
                let w = end - start;
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + start..i * n + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                self.acc(*a, da);
            }
            Op::ConcatCols(parts) => {
                let total = rows_cols(self.shape(out)).1;
                let m = rows_cols(self.shape(out)).0;
                let mut off = 0;
                for &p in parts {
                    let w = rows_cols(self.shape(p)).1;
                    let mut dp = Vec::with_capacity(m * w);
                    for i in 0..m {
                        dp.extend_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    self.acc(p, dp);
                    off += w;
                }
            }
            Op::GatherRows(a, idx) => {
                let (m, n) = rows_cols(self.shape(*a));
                let mut da = vec![0.0; m * n];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        da[i * n + j] += g[r * n + j];
                    }
                }
                self.acc(*a, da);
            }
            Op::ScatterRows(a, idx) => {
                let n = rows_cols(self.shape(*a)).1;
                let mut da = Vec::with_capacity(idx.len() * n);
                for &i in idx {
                    da.extend_from_slice(&g[i * n..(i + 1) * n]);
                }
                self.acc(*a, da);
            }
            Op::Row(a, i) => {
                let (m, n) = rows_cols(self.shape(*a));
                let mut da = vec![0.0; m * n];
                da[i * n..(i + 1) * n].copy_from_slice(g);
                self.acc(*a, da);
            }
            Op::StackRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).len();
                    self.acc(p, g[off..off + w].iter().copied());
                    off += w;
                }
            }
            Op::Index(a, i) => {
                let n = self.value(*a).len();
                let mut da = vec![0.0; n];
                da[*i] = g[0];
                self.acc(*a, da);
            }
            Op::Cosine(u, v) => {
                let uv = self.value(*u).to_vec();
                let vv = self.value(*v).to_vec();
                let nu = uv.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nv = vv.iter().map(|x| x * x).sum::<f64>().sqrt();
                let c = self.value(out)[0];
                let gs = g[0];
                let du: Vec<f64> = uv
                    .iter()
                    .zip(&vv)
                    .map(|(a, b)| gs * (b / (nu * nv) - c * a / (nu * nu)))
                    .collect();
                let dv: Vec<f64> = uv
                    .iter()
                    .zip(&vv)
                    .map(|(a, b)| gs * (a / (nu * nv) - c * b / (nv * nv)))
                    .collect();
                self.acc(*u, du);
                self.acc(*v, dv);
            }
            Op::Ctc {
                logp,
                target,
                len,
                alpha,
            } => {
                let (t, v) = rows_cols(self.shape(*logp));
                let mut d = vec![0.0; t * v];
                if self.value(out)[0].is_finite() {
                    let dl =
                        ctc::log_alpha_adjoint(&self.value(*logp)[..len * v], v, target, alpha);
                    for (slot, x) in d.iter_mut().zip(dl) {
                        *slot = g[0] * x;
                    }
                }
                self.acc(*logp, d);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, y) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += x * y;
            }
        }
    }
    out
}

pub(crate) fn softmax_rows(v: &[f64], n: usize) -> Result<Vec<f64>> {
    if v.iter().any(|x| x.is_nan()) {
        return Err(MoleError::Numeric("NaN input to softmax".into()));
    }
    let mut out = Vec::with_capacity(v.len());
    for row in v.chunks(n) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut s = 0.0;
        for &x in row {
            let e = (x - m).exp();
            s += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= s);
    }
    Ok(out)
}

pub(crate) fn cosine_raw(u: &[f64], v: &[f64]) -> Result<f64> {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(MoleError::Degenerate(
            "cosine similarity of a zero vector".into(),
        ));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}
