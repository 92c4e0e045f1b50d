//! Operation graph with two interpreters.
//!
//! Model code is written once against [`Graph`]. [`EvalGraph`] just computes
//! values; [`Tape`] records every operation so [`Tape::backward`] can run
//! reverse-mode differentiation. Both call the same value kernels, so a
//! forward pass produces identical bits under either interpreter.

use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::numerics::{dot, log_sum_exp, matvec_into, sigmoid, softmax_into, stable_decay};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Gradients aligned index-for-index with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Primitive operations available to model code.
///
/// Shapes are the caller's responsibility; interpreters only debug-assert
/// them.
pub trait Graph {
    type Var: Clone;

    fn input(&mut self, t: Tensor) -> Self::Var;
    fn param(&mut self, id: ParamId) -> Self::Var;
    fn value<'v>(&'v self, v: &'v Self::Var) -> &'v Tensor;

    /// `w · x` with `w` a matrix and `x` a vector.
    fn matvec(&mut self, w: &Self::Var, x: &Self::Var) -> Self::Var;
    /// Row `i` of a matrix, as a vector.
    fn row(&mut self, table: &Self::Var, i: usize) -> Self::Var;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var;
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var;
    /// Vector times a length-1 variable.
    fn scale(&mut self, a: &Self::Var, s: &Self::Var) -> Self::Var;
    fn dot(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var;
    fn sigmoid(&mut self, a: &Self::Var) -> Self::Var;
    /// `exp(−softplus(raw))` element-wise.
    fn decay(&mut self, raw: &Self::Var) -> Self::Var;
    /// Single-query softmax attention `Σ softmax(scale·q·k_i)_i v_i`.
    /// Returns the output and the attention weights.
    fn attend(
        &mut self,
        q: &Self::Var,
        keys: &[Self::Var],
        values: &[Self::Var],
        scale: f64,
    ) -> (Self::Var, Vec<f64>);
    fn max_pool(&mut self, xs: &[Self::Var]) -> Self::Var;
    fn mean_pool(&mut self, xs: &[Self::Var]) -> Self::Var;
    /// `−log softmax(logits)[target]` as a length-1 variable.
    fn cross_entropy(&mut self, logits: &Self::Var, target: usize) -> Self::Var;
    /// Mean of length-1 variables.
    fn mean(&mut self, xs: &[Self::Var]) -> Self::Var;
}

// ---------------------------------------------------------------------------
// Value kernels shared by both interpreters.

fn k_matvec(w: &Tensor, x: &Tensor) -> Tensor {
    let (rows, cols) = (w.rows(), w.cols());
    debug_assert_eq!(x.len(), cols, "matvec shape");
    let mut out = vec![0.0; rows];
    matvec_into(w.data(), rows, cols, x.data(), &mut out);
    Tensor::vector(out)
}

fn k_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.len(), b.len(), "elementwise shape");
    Tensor::vector(a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

fn k_scale(a: &Tensor, s: &Tensor) -> Tensor {
    let s = s.data()[0];
    Tensor::vector(a.data().iter().map(|&x| x * s).collect())
}

fn k_attend(q: &Tensor, keys: &[&Tensor], values: &[&Tensor], scale: f64) -> (Tensor, Vec<f64>) {
    debug_assert!(!keys.is_empty() && keys.len() == values.len());
    let logits: Vec<f64> = keys.iter().map(|k| scale * dot(q.data(), k.data())).collect();
    let mut w = vec![0.0; logits.len()];
    softmax_into(&logits, 1.0, &mut w);
    let d = values[0].len();
    let mut out = vec![0.0; d];
    for (wi, v) in w.iter().zip(values) {
        for (o, &x) in out.iter_mut().zip(v.data()) {
            *o += wi * x;
        }
    }
    (Tensor::vector(out), w)
}

fn k_max_pool(xs: &[&Tensor]) -> (Tensor, Vec<usize>) {
    let d = xs[0].len();
    let mut out = xs[0].data().to_vec();
    let mut arg = vec![0usize; d];
    for (i, x) in xs.iter().enumerate().skip(1) {
        for j in 0..d {
            if x.data()[j] > out[j] {
                out[j] = x.data()[j];
                arg[j] = i;
            }
        }
    }
    (Tensor::vector(out), arg)
}

fn k_mean_pool(xs: &[&Tensor]) -> Tensor {
    let d = xs[0].len();
    let mut out = vec![0.0; d];
    for x in xs {
        for (o, &v) in out.iter_mut().zip(x.data()) {
            *o += v;
        }
    }
    let n = xs.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Tensor::vector(out)
}

fn k_mean(xs: &[&Tensor]) -> Tensor {
    let mut s = 0.0;
    for x in xs {
        s += x.data()[0];
    }
    Tensor::scalar(s / xs.len() as f64)
}

fn k_cross_entropy(logits: &Tensor, target: usize) -> (Tensor, Vec<f64>) {
    let lse = log_sum_exp(logits.data());
    let loss = lse - logits.data()[target];
    let probs = logits.data().iter().map(|&l| (l - lse).exp()).collect();
    (Tensor::scalar(loss), probs)
}

// ---------------------------------------------------------------------------

/// Value-only interpreter.
pub struct EvalGraph<'a> {
    store: Option<&'a ParamStore>,
}

#[derive(Clone, Debug)]
pub enum EvalVar<'a> {
    Borrowed(&'a Tensor),
    Owned(Rc<Tensor>),
}

impl<'a> EvalVar<'a> {
    fn get(&self) -> &Tensor {
        match self {
            EvalVar::Borrowed(t) => t,
            EvalVar::Owned(t) => t,
        }
    }
}

impl<'a> EvalGraph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { store: Some(store) }
    }

    /// A graph with no parameters; everything enters through `input`.
    pub fn detached() -> Self {
        Self { store: None }
    }

    fn own(t: Tensor) -> EvalVar<'a> {
        EvalVar::Owned(Rc::new(t))
    }
}

impl<'a> Graph for EvalGraph<'a> {
    type Var = EvalVar<'a>;

    fn input(&mut self, t: Tensor) -> Self::Var {
        Self::own(t)
    }

    fn param(&mut self, id: ParamId) -> Self::Var {
        EvalVar::Borrowed(self.store.expect("graph has no parameter store").get(id))
    }

    fn value<'v>(&'v self, v: &'v Self::Var) -> &'v Tensor {
        v.get()
    }

    fn matvec(&mut self, w: &Self::Var, x: &Self::Var) -> Self::Var {
        Self::own(k_matvec(w.get(), x.get()))
    }

    fn row(&mut self, table: &Self::Var, i: usize) -> Self::Var {
        Self::own(Tensor::vector(table.get().row(i).to_vec()))
    }

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var {
        Self::own(k_zip(a.get(), b.get(), |x, y| x + y))
    }

    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var {
        Self::own(k_zip(a.get(), b.get(), |x, y| x * y))
    }

    fn scale(&mut self, a: &Self::Var, s: &Self::Var) -> Self::Var {
        Self::own(k_scale(a.get(), s.get()))
    }

    fn dot(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var {
        Self::own(Tensor::scalar(dot(a.get().data(), b.get().data())))
    }

    fn sigmoid(&mut self, a: &Self::Var) -> Self::Var {
        Self::own(a.get().map(sigmoid))
    }

    fn decay(&mut self, raw: &Self::Var) -> Self::Var {
        Self::own(raw.get().map(stable_decay))
    }

    fn attend(
        &mut self,
        q: &Self::Var,
        keys: &[Self::Var],
        values: &[Self::Var],
        scale: f64,
    ) -> (Self::Var, Vec<f64>) {
        let ks: Vec<&Tensor> = keys.iter().map(EvalVar::get).collect();
        let vs: Vec<&Tensor> = values.iter().map(EvalVar::get).collect();
        let (out, w) = k_attend(q.get(), &ks, &vs, scale);
        (Self::own(out), w)
    }

    fn max_pool(&mut self, xs: &[Self::Var]) -> Self::Var {
        let ts: Vec<&Tensor> = xs.iter().map(EvalVar::get).collect();
        Self::own(k_max_pool(&ts).0)
    }

    fn mean_pool(&mut self, xs: &[Self::Var]) -> Self::Var {
        let ts: Vec<&Tensor> = xs.iter().map(EvalVar::get).collect();
        Self::own(k_mean_pool(&ts))
    }

    fn cross_entropy(&mut self, logits: &Self::Var, target: usize) -> Self::Var {
        Self::own(k_cross_entropy(logits.get(), target).0)
    }

    fn mean(&mut self, xs: &[Self::Var]) -> Self::Var {
        let ts: Vec<&Tensor> = xs.iter().map(EvalVar::get).collect();
        Self::own(k_mean(&ts))
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Input,
    Param(ParamId),
    MatVec(usize, usize),
    Row(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, usize),
    Dot(usize, usize),
    Sigmoid(usize),
    Decay(usize),
    Attend {
        q: usize,
        keys: Vec<usize>,
        values: Vec<usize>,
        scale: f64,
        weights: Vec<f64>,
    },
    MaxPool {
        inputs: Vec<usize>,
        arg: Vec<usize>,
    },
    MeanPool(Vec<usize>),
    CrossEntropy {
        logits: usize,
        target: usize,
        probs: Vec<f64>,
    },
    Mean(Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording interpreter for reverse-mode differentiation.
pub struct Tape<'a> {
    store: Option<&'a ParamStore>,
    nodes: Vec<Node>,
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
        }
    }

    pub fn detached() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    /// Gradients of the scalar node `loss` with respect to every parameter in
    /// the store, plus the gradient of each node listed in `inspect`.
    pub fn backward_with(&self, loss: NodeId, inspect: &[NodeId]) -> Result<(Gradients, Vec<Tensor>)> {
        let store = self.store;
        if self.val(loss.0).len() != 1 {
            return Err(dim_err("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut param_grads: Vec<Option<Vec<f64>>> = match store {
            Some(s) => vec![None; s.len()],
            None => Vec::new(),
        };
        let mut inspected: Vec<Option<Vec<f64>>> = vec![None; inspect.len()];

        fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], i: usize, len: usize) -> &'g mut Vec<f64> {
            grads[i].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            for (slot, want) in inspected.iter_mut().zip(inspect) {
                if want.0 == idx {
                    *slot = Some(g.clone());
                }
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let dst = acc(&mut param_grads, id.0, g.len());
                    for (d, v) in dst.iter_mut().zip(&g) {
                        *d += v;
                    }
                }
                Op::MatVec(w, x) => {
                    let (w, x) = (*w, *x);
                    let wv = self.val(w);
                    let xv = self.val(x).data().to_vec();
                    let (rows, cols) = (wv.rows(), wv.cols());
                    {
                        let gx = acc(&mut grads, x, cols);
                        for i in 0..rows {
                            let gi = g[i];
                            if gi == 0.0 {
                                continue;
                            }
                            for (gxj, &wij) in gx.iter_mut().zip(wv.row(i)) {
                                *gxj += gi * wij;
                            }
                        }
                    }
                    let gw = acc(&mut grads, w, rows * cols);
                    for i in 0..rows {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        let row = &mut gw[i * cols..(i + 1) * cols];
                        for (r, &xj) in row.iter_mut().zip(&xv) {
                            *r += gi * xj;
                        }
                    }
                }
                Op::Row(table, i) => {
                    let t = self.val(*table);
                    let cols = t.cols();
                    let gt = acc(&mut grads, *table, t.len());
                    for (d, v) in gt[i * cols..(i + 1) * cols].iter_mut().zip(&g) {
                        *d += v;
                    }
                }
                Op::Add(a, b) => {
                    for p in [*a, *b] {
                        let ga = acc(&mut grads, p, g.len());
                        for (d, v) in ga.iter_mut().zip(&g) {
                            *d += v;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let av = self.val(a).data().to_vec();
                    let bv = self.val(b).data().to_vec();
                    let ga = acc(&mut grads, a, g.len());
                    for ((d, v), y) in ga.iter_mut().zip(&g).zip(&bv) {
                        *d += v * y;
                    }
                    let gb = acc(&mut grads, b, g.len());
                    for ((d, v), x) in gb.iter_mut().zip(&g).zip(&av) {
                        *d += v * x;
                    }
                }
                Op::Scale(a, s) => {
                    let (a, s) = (*a, *s);
                    let sv = self.val(s).data()[0];
                    let gs: f64 = dot(&g, self.val(a).data());
                    let ga = acc(&mut grads, a, g.len());
                    for (d, v) in ga.iter_mut().zip(&g) {
                        *d += v * sv;
                    }
                    acc(&mut grads, s, 1)[0] += gs;
                }
                Op::Dot(a, b) => {
                    let (a, b) = (*a, *b);
                    let g0 = g[0];
                    let bv = self.val(b).data().to_vec();
                    let av = self.val(a).data().to_vec();
                    let ga = acc(&mut grads, a, av.len());
                    for (d, y) in ga.iter_mut().zip(&bv) {
                        *d += g0 * y;
                    }
                    let gb = acc(&mut grads, b, bv.len());
                    for (d, x) in gb.iter_mut().zip(&av) {
                        *d += g0 * x;
                    }
                }
                Op::Sigmoid(a) => {
                    let out = node.value.data();
                    let ga = acc(&mut grads, *a, g.len());
                    for ((d, v), &o) in ga.iter_mut().zip(&g).zip(out) {
                        *d += v * o * (1.0 - o);
                    }
                }
                Op::Decay(r) => {
                    let out = node.value.data();
                    let raw = self.val(*r).data().to_vec();
                    let gr = acc(&mut grads, *r, g.len());
                    for (((d, v), &o), &x) in gr.iter_mut().zip(&g).zip(out).zip(&raw) {
                        *d -= v * o * sigmoid(x);
                    }
                }
                Op::Attend {
                    q,
                    keys,
                    values,
                    scale,
                    weights,
                } => {
                    // dL/dw_i = g · v_i ; dL/dlogit_i = w_i (dL/dw_i − Σ_j w_j dL/dw_j)
                    let gw: Vec<f64> = values.iter().map(|&v| dot(&g, self.val(v).data())).collect();
                    let mean: f64 = weights.iter().zip(&gw).map(|(w, x)| w * x).sum();
                    let glogit: Vec<f64> = weights.iter().zip(&gw).map(|(w, x)| w * (x - mean)).collect();
                    for (&v, &w) in values.iter().zip(weights) {
                        let gv = acc(&mut grads, v, g.len());
                        for (d, x) in gv.iter_mut().zip(&g) {
                            *d += w * x;
                        }
                    }
                    let qv = self.val(*q).data().to_vec();
                    let mut gq = vec![0.0; qv.len()];
                    for (&k, &gl) in keys.iter().zip(&glogit) {
                        let kv = self.val(k).data();
                        for (d, &x) in gq.iter_mut().zip(kv) {
                            *d += scale * gl * x;
                        }
                        let gk = acc(&mut grads, k, qv.len());
                        for (d, &x) in gk.iter_mut().zip(&qv) {
                            *d += scale * gl * x;
                        }
                    }
                    let dst = acc(&mut grads, *q, qv.len());
                    for (d, x) in dst.iter_mut().zip(&gq) {
                        *d += x;
                    }
                }
                Op::MaxPool { inputs, arg } => {
                    for (j, (&src, v)) in arg.iter().zip(&g).enumerate() {
                        acc(&mut grads, inputs[src], g.len())[j] += v;
                    }
                }
                Op::MeanPool(inputs) => {
                    let n = inputs.len() as f64;
                    for &p in inputs {
                        let gp = acc(&mut grads, p, g.len());
                        for (d, v) in gp.iter_mut().zip(&g) {
                            *d += v / n;
                        }
                    }
                }
                Op::CrossEntropy { logits, target, probs } => {
                    let g0 = g[0];
                    let gl = acc(&mut grads, *logits, probs.len());
                    for (d, p) in gl.iter_mut().zip(probs) {
                        *d += g0 * p;
                    }
                    gl[*target] -= g0;
                }
                Op::Mean(inputs) => {
                    let n = inputs.len() as f64;
                    for &p in inputs {
                        acc(&mut grads, p, 1)[0] += g[0] / n;
                    }
                }
            }
        }

        let tensors = match store {
            Some(s) => s
                .tensors()
                .iter()
                .zip(param_grads)
                .map(|(t, g)| match g {
                    Some(g) => Tensor::new(t.shape().to_vec(), g).expect("gradient shape"),
                    None => Tensor::zeros(t.shape()),
                })
                .collect(),
            None => Vec::new(),
        };
        let inspected = inspected
            .into_iter()
            .zip(inspect)
            .map(|(g, id)| {
                let shape = self.val(id.0).shape().to_vec();
                match g {
                    Some(g) => Tensor::new(shape, g).expect("gradient shape"),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect();
        Ok((Gradients { tensors }, inspected))
    }

    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        Ok(self.backward_with(loss, &[])?.0)
    }
}

impl<'a> Graph for Tape<'a> {
    type Var = NodeId;

    fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input)
    }

    fn param(&mut self, id: ParamId) -> NodeId {
        let t = self.store.expect("tape has no parameter store").get(id).clone();
        self.push(t, Op::Param(id))
    }

    fn value<'v>(&'v self, v: &'v NodeId) -> &'v Tensor {
        self.val(v.0)
    }

    fn matvec(&mut self, w: &NodeId, x: &NodeId) -> NodeId {
        let v = k_matvec(self.val(w.0), self.val(x.0));
        self.push(v, Op::MatVec(w.0, x.0))
    }

    fn row(&mut self, table: &NodeId, i: usize) -> NodeId {
        let v = Tensor::vector(self.val(table.0).row(i).to_vec());
        self.push(v, Op::Row(table.0, i))
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = k_zip(self.val(a.0), self.val(b.0), |x, y| x + y);
        self.push(v, Op::Add(a.0, b.0))
    }

    fn mul(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = k_zip(self.val(a.0), self.val(b.0), |x, y| x * y);
        self.push(v, Op::Mul(a.0, b.0))
    }

    fn scale(&mut self, a: &NodeId, s: &NodeId) -> NodeId {
        let v = k_scale(self.val(a.0), self.val(s.0));
        self.push(v, Op::Scale(a.0, s.0))
    }

    fn dot(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = Tensor::scalar(dot(self.val(a.0).data(), self.val(b.0).data()));
        self.push(v, Op::Dot(a.0, b.0))
    }

    fn sigmoid(&mut self, a: &NodeId) -> NodeId {
        let v = self.val(a.0).map(sigmoid);
        self.push(v, Op::Sigmoid(a.0))
    }

    fn decay(&mut self, raw: &NodeId) -> NodeId {
        let v = self.val(raw.0).map(stable_decay);
        self.push(v, Op::Decay(raw.0))
    }

    fn attend(&mut self, q: &NodeId, keys: &[NodeId], values: &[NodeId], scale: f64) -> (NodeId, Vec<f64>) {
        let ks: Vec<&Tensor> = keys.iter().map(|k| self.val(k.0)).collect();
        let vs: Vec<&Tensor> = values.iter().map(|v| self.val(v.0)).collect();
        let (out, weights) = k_attend(self.val(q.0), &ks, &vs, scale);
        let op = Op::Attend {
            q: q.0,
            keys: keys.iter().map(|k| k.0).collect(),
            values: values.iter().map(|v| v.0).collect(),
            scale,
            weights: weights.clone(),
        };
        (self.push(out, op), weights)
    }

    fn max_pool(&mut self, xs: &[NodeId]) -> NodeId {
        let ts: Vec<&Tensor> = xs.iter().map(|x| self.val(x.0)).collect();
        let (out, arg) = k_max_pool(&ts);
        let op = Op::MaxPool {
            inputs: xs.iter().map(|x| x.0).collect(),
            arg,
        };
        self.push(out, op)
    }

    fn mean_pool(&mut self, xs: &[NodeId]) -> NodeId {
        let ts: Vec<&Tensor> = xs.iter().map(|x| self.val(x.0)).collect();
        let out = k_mean_pool(&ts);
        self.push(out, Op::MeanPool(xs.iter().map(|x| x.0).collect()))
    }

    fn cross_entropy(&mut self, logits: &NodeId, target: usize) -> NodeId {
        let (loss, probs) = k_cross_entropy(self.val(logits.0), target);
        self.push(
            loss,
            Op::CrossEntropy {
                logits: logits.0,
                target,
                probs,
            },
        )
    }

    fn mean(&mut self, xs: &[NodeId]) -> NodeId {
        let ts: Vec<&Tensor> = xs.iter().map(|x| self.val(x.0)).collect();
        let out = k_mean(&ts);
        self.push(out, Op::Mean(xs.iter().map(|x| x.0).collect()))
    }
}
