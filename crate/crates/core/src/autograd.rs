//! A small reverse-mode automatic differentiation tape over [`Matrix`].
//!
//! A [`Graph`] is built per sample: every op appends a node holding its
//! forward value, and [`Graph::backward`] walks the tape in reverse.
//! Parameters are borrowed from a [`ParamStore`] and never copied into the
//! tape; their gradients come back as [`ParamGrads`].

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{AvdfError, Result};
use crate::tensor::{gemm, Matrix};

const LAYER_NORM_EPS: f64 = 1e-5;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a new tensor. Panics on duplicate names (a programming error).
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`]; untouched
/// parameters stay `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Option<Matrix>>,
}

impl ParamGrads {
    pub fn empty(n: usize) -> Self {
        ParamGrads {
            grads: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Matrix) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    fn accumulate_owned(&mut self, id: ParamId, g: Matrix) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// `self += other`.
    pub fn merge(&mut self, other: &ParamGrads) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_in_place(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(Matrix::sum_squares)
            .sum::<f64>()
            .sqrt()
    }

    pub fn clear(&mut self, id: ParamId) {
        self.grads[id.0] = None;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Matrix::all_finite)
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Matrix),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Matrix>,
    },
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    Row(Var, usize),
    L2NormRows {
        x: Var,
        eps: f64,
        norms: Vec<f64>,
    },
    /// Scalar loss whose gradient w.r.t. its input was computed alongside
    /// the value.
    Loss(Var, Matrix),
}

struct Node {
    value: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.get(*id),
            (None, _) => unreachable!("non-param node without a value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    /// Parameter by name; panics if absent (model wiring bug).
    pub fn param_named(&mut self, name: &str) -> Var {
        let id = self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.param(id)
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.cols() != wv.rows() {
            return Err(AvdfError::Shape(format!(
                "linear: input {:?} vs weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let mut out = Matrix::zeros(xv.rows(), wv.cols());
        gemm(xv, false, wv, false, &mut out, 0.0);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != (1, wv.cols()) {
                return Err(AvdfError::Shape(format!("linear: bias {:?}", bv.shape())));
            }
            let bias = bv.row(0).to_vec();
            for r in 0..out.rows() {
                for (o, bb) in out.row_mut(r).iter_mut().zip(&bias) {
                    *o += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(AvdfError::Shape(format!(
                "matmul: {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = av.matmul(bv);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(AvdfError::Shape(format!(
                "add: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = av.add(bv);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_in_place(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Elementwise product with a constant (e.g. a dropout mask).
    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Result<Var> {
        let av = self.value(a);
        if av.shape() != c.shape() {
            return Err(AvdfError::Shape("mul_const shape mismatch".into()));
        }
        let data = av
            .as_slice()
            .iter()
            .zip(c.as_slice())
            .map(|(x, m)| x * m)
            .collect();
        let out = Matrix::from_vec(av.rows(), av.cols(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::MulConst(a, c), rg))
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (each 1×d).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let d = xv.cols();
        if g.shape() != (1, d) || b.shape() != (1, d) {
            return Err(AvdfError::Shape("layer_norm affine shape".into()));
        }
        let mut xhat = Matrix::zeros(xv.rows(), d);
        let mut out = Matrix::zeros(xv.rows(), d);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat.set(r, c, h);
                out.set(r, c, h * g.get(0, c) + b.get(0, c));
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.as_slice().iter().map(|&v| gelu(v)).collect();
        let out = Matrix::from_vec(xv.rows(), xv.cols(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Multi-head scaled dot-product self-attention over already-projected
    /// `q`, `k`, `v` (each T×d). Returns the concatenated head outputs (T×d).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = qv.shape();
        if kv.shape() != (t, d) || vv.shape() != (t, d) {
            return Err(AvdfError::Shape("attention q/k/v shapes differ".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(AvdfError::Shape(format!("{d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(t, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = head_slice(qv, h, dh);
            let kh = head_slice(kv, h, dh);
            let vh = head_slice(vv, h, dh);
            let mut s = Matrix::zeros(t, t);
            gemm(&qh, false, &kh, true, &mut s, 0.0);
            s.scale_in_place(scale);
            softmax_rows_in_place(&mut s);
            let oh = s.matmul(&vh);
            for r in 0..t {
                out.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(oh.row(r));
            }
            probs.push(s);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// `[a | b]` along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(AvdfError::Shape("concat_cols row mismatch".into()));
        }
        let (ca, cb) = (av.cols(), bv.cols());
        let out = Matrix::from_fn(av.rows(), ca + cb, |r, c| {
            if c < ca {
                av.get(r, c)
            } else {
                bv.get(r, c - ca)
            }
        });
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ConcatCols(a, b), rg))
    }

    /// `a` stacked above `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(AvdfError::Shape("concat_rows col mismatch".into()));
        }
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(av.as_slice());
        data.extend_from_slice(bv.as_slice());
        let out = Matrix::from_vec(av.rows() + bv.rows(), av.cols(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ConcatRows(a, b), rg))
    }

    /// Row `index` of `x` as a 1×d matrix.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        if index >= xv.rows() {
            return Err(AvdfError::Shape(format!(
                "row {index} out of {} rows",
                xv.rows()
            )));
        }
        let out = xv.slice_rows(index, index + 1);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Row(x, index), rg))
    }

    /// `x[t] / max(‖x[t]‖₂, eps)` for every row.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = n.max(eps);
            out.row_mut(r).iter_mut().for_each(|v| *v /= denom);
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push(out, Op::L2NormRows { x, eps, norms }, rg)
    }

    /// Attach a scalar loss `value` computed outside the tape, together with
    /// its gradient w.r.t. `x`.
    pub fn loss(&mut self, x: Var, value: f64, grad: Matrix) -> Result<Var> {
        if self.value(x).shape() != grad.shape() {
            return Err(AvdfError::Shape("loss gradient shape".into()));
        }
        let rg = self.rg(x);
        Ok(self.push(Matrix::filled(1, 1, value), Op::Loss(x, grad), rg))
    }

    /// Reverse sweep from the scalar `root`; returns parameter gradients.
    pub fn backward(&self, root: Var) -> ParamGrads {
        let mut param_grads = ParamGrads::empty(self.params.len());
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_shape = self.value(root).shape();
        grads[root.0] = Some(Matrix::filled(root_shape.0, root_shape.1, 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => param_grads.accumulate_owned(*id, g),
                Op::Linear { x, w, b } => {
                    if self.rg(*x) {
                        let wv = self.value(*w);
                        let mut dx = Matrix::zeros(g.rows(), wv.rows());
                        gemm(&g, false, wv, true, &mut dx, 0.0);
                        acc(&mut grads, *x, dx);
                    }
                    if self.rg(*w) {
                        let xv = self.value(*x);
                        let mut dw = Matrix::zeros(xv.cols(), g.cols());
                        gemm(xv, true, &g, false, &mut dw, 0.0);
                        acc(&mut grads, *w, dw);
                    }
                    if let Some(b) = b {
                        if self.rg(*b) {
                            acc(&mut grads, *b, column_sums(&g));
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let bv = self.value(*b);
                        let mut da = Matrix::zeros(g.rows(), bv.rows());
                        gemm(&g, false, bv, true, &mut da, 0.0);
                        acc(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        let av = self.value(*a);
                        let mut db = Matrix::zeros(av.cols(), g.cols());
                        gemm(av, true, &g, false, &mut db, 0.0);
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Scale(a, s) => {
                    let mut da = g;
                    da.scale_in_place(*s);
                    acc(&mut grads, *a, da);
                }
                Op::MulConst(a, c) => {
                    let data = g
                        .as_slice()
                        .iter()
                        .zip(c.as_slice())
                        .map(|(x, m)| x * m)
                        .collect();
                    acc(
                        &mut grads,
                        *a,
                        Matrix::from_vec(g.rows(), g.cols(), data).expect("shape"),
                    );
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    let d = g.cols();
                    if self.rg(*gamma) {
                        let mut dg = Matrix::zeros(1, d);
                        for r in 0..g.rows() {
                            for c in 0..d {
                                dg.as_mut_slice()[c] += g.get(r, c) * xhat.get(r, c);
                            }
                        }
                        acc(&mut grads, *gamma, dg);
                    }
                    if self.rg(*beta) {
                        acc(&mut grads, *beta, column_sums(&g));
                    }
                    if self.rg(*x) {
                        let mut dx = Matrix::zeros(g.rows(), d);
                        let n = d as f64;
                        for r in 0..g.rows() {
                            let dxh: Vec<f64> =
                                (0..d).map(|c| g.get(r, c) * gv.get(0, c)).collect();
                            let sum_d = dxh.iter().sum::<f64>();
                            let sum_dx = (0..d).map(|c| dxh[c] * xhat.get(r, c)).sum::<f64>();
                            for c in 0..d {
                                let v = inv_std[r] / n
                                    * (n * dxh[c] - sum_d - xhat.get(r, c) * sum_dx);
                                dx.set(r, c, v);
                            }
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let data = xv
                        .as_slice()
                        .iter()
                        .zip(g.as_slice())
                        .map(|(&v, &dy)| dy * gelu_grad(v))
                        .collect();
                    acc(
                        &mut grads,
                        *x,
                        Matrix::from_vec(g.rows(), g.cols(), data).expect("shape"),
                    );
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (t, d) = qv.shape();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Matrix::zeros(t, d);
                    let mut dk = Matrix::zeros(t, d);
                    let mut dv = Matrix::zeros(t, d);
                    for (h, p) in probs.iter().enumerate() {
                        let qh = head_slice(qv, h, dh);
                        let kh = head_slice(kv, h, dh);
                        let vh = head_slice(vv, h, dh);
                        let doh = head_slice(&g, h, dh);
                        // dV = Pᵀ dO
                        let mut dvh = Matrix::zeros(t, dh);
                        gemm(p, true, &doh, false, &mut dvh, 0.0);
                        // dP = dO Vᵀ
                        let mut dp = Matrix::zeros(t, t);
                        gemm(&doh, false, &vh, true, &mut dp, 0.0);
                        // softmax backward, folded with the 1/sqrt(dh) scale
                        let mut ds = Matrix::zeros(t, t);
                        for r in 0..t {
                            let dot: f64 = (0..t).map(|c| dp.get(r, c) * p.get(r, c)).sum();
                            for c in 0..t {
                                ds.set(r, c, p.get(r, c) * (dp.get(r, c) - dot) * scale);
                            }
                        }
                        let dqh = ds.matmul(&kh);
                        let mut dkh = Matrix::zeros(t, dh);
                        gemm(&ds, true, &qh, false, &mut dkh, 0.0);
                        for r in 0..t {
                            dq.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(dqh.row(r));
                            dk.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(dkh.row(r));
                            dv.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(dvh.row(r));
                        }
                    }
                    if self.rg(*q) {
                        acc(&mut grads, *q, dq);
                    }
                    if self.rg(*k) {
                        acc(&mut grads, *k, dk);
                    }
                    if self.rg(*v) {
                        acc(&mut grads, *v, dv);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    if self.rg(*a) {
                        acc(&mut grads, *a, Matrix::from_fn(g.rows(), ca, |r, c| g.get(r, c)));
                    }
                    if self.rg(*b) {
                        acc(
                            &mut grads,
                            *b,
                            Matrix::from_fn(g.rows(), cb, |r, c| g.get(r, ca + c)),
                        );
                    }
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.value(*a).rows();
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.slice_rows(0, ra));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.slice_rows(ra, g.rows()));
                    }
                }
                Op::Row(x, index) => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    dx.row_mut(*index).copy_from_slice(g.row(0));
                    acc(&mut grads, *x, dx);
                }
                Op::L2NormRows { x, eps, norms } => {
                    let y = node.value.as_ref().expect("value");
                    let mut dx = Matrix::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let n = norms[r];
                        if n > *eps {
                            let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                            for c in 0..g.cols() {
                                dx.set(r, c, (g.get(r, c) - y.get(r, c) * dot) / n);
                            }
                        } else {
                            for c in 0..g.cols() {
                                dx.set(r, c, g.get(r, c) / eps);
                            }
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Loss(x, local) => {
                    let s = g.get(0, 0);
                    let mut dx = local.clone();
                    dx.scale_in_place(s);
                    acc(&mut grads, *x, dx);
                }
            }
        }
        param_grads
    }
}

fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.as_mut_slice().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

fn head_slice(m: &Matrix, h: usize, dh: usize) -> Matrix {
    Matrix::from_fn(m.rows(), dh, |r, c| m.get(r, h * dh + c))
}

pub(crate) fn softmax_rows_in_place(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
}

pub fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let th = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}
