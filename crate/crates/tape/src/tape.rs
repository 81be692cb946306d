//! The recording tape and its reverse pass.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    MulScalarVar(Var, Var),
    MulConst(Var, Arc<Tensor>),
    Scale(Var, f64),
    AddScalar(Var, #[allow(dead_code)] f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var, f64),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    PickPerRow(Var, Vec<usize>),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
}

/// Per-parameter gradients produced by [`Tape::backward`], grouped by
/// store namespace.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<u32, Vec<Option<Tensor>>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads
            .get(&id.namespace())
            .and_then(|v| v.get(id.index()))
            .and_then(Option::as_ref)
    }

    fn slot(&mut self, id: ParamId) -> &mut Option<Tensor> {
        let v = self.grads.entry(id.namespace()).or_default();
        if v.len() <= id.index() {
            v.resize(id.index() + 1, None);
        }
        &mut v[id.index()]
    }

    pub fn add_to(&mut self, id: ParamId, g: &Tensor) {
        match self.slot(id) {
            Some(t) => t.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Adds every gradient of `other` into `self`.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in other.iter() {
            self.add_to(id, g);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.grads.values_mut().flatten().flatten() {
            g.scale_in_place(k);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flatten()
            .flatten()
            .map(Tensor::sum_squares)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`. Returns the
    /// norm before clipping.
    pub fn clip_to_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().flat_map(|(&ns, v)| {
            v.iter().enumerate().filter_map(move |(i, g)| {
                g.as_ref().map(|g| {
                    (
                        ParamId {
                            namespace: ns,
                            index: i,
                        },
                        g,
                    )
                })
            })
        })
    }

    /// Gradients belonging to one namespace.
    pub fn for_namespace(&self, namespace: u32) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.iter()
            .filter(move |(id, _)| id.namespace() == namespace)
    }

    pub fn is_empty(&self) -> bool {
        self.iter().next().is_none()
    }
}

/// Vars for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bindings {
    namespace: u32,
    vars: Vec<Var>,
}

impl std::ops::Index<ParamId> for Bindings {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        debug_assert_eq!(id.namespace(), self.namespace, "binding from another store");
        &self.vars[id.index()]
    }
}

/// A single-use record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.push_shared(Arc::new(value), op)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// A constant (or an input whose gradient is read back via
    /// [`Tape::backward_with_inputs`]).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    /// Binds one parameter; gradients flow back to the store when
    /// `trainable`, otherwise it is recorded as a constant.
    pub fn param(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
        let op = if trainable { Op::Param(id) } else { Op::Leaf };
        self.push_shared(store.shared(id), op)
    }

    pub fn bind(&mut self, store: &ParamStore, trainable: bool) -> Bindings {
        let ids: Vec<ParamId> = store.ids().collect();
        Bindings {
            namespace: store.namespace(),
            vars: ids
                .into_iter()
                .map(|id| self.param(store, id, trainable))
                .collect(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// `a (r x c) + row (1 x c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.shape(), (1, ta.cols()), "add_row shape mismatch");
        let mut v = ta.clone();
        for r in 0..v.rows() {
            for (x, b) in v.row_mut(r).iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    /// `a (r x c) * row (1 x c)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.shape(), (1, ta.cols()), "mul_row shape mismatch");
        let mut v = ta.clone();
        for r in 0..v.rows() {
            for (x, b) in v.row_mut(r).iter_mut().zip(tr.data()) {
                *x *= b;
            }
        }
        self.push(v, Op::MulRow(a, row))
    }

    /// `a (r x c) * col (r x 1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (ta, tc) = (self.value(a), self.value(col));
        assert_eq!(tc.shape(), (ta.rows(), 1), "mul_col shape mismatch");
        let mut v = ta.clone();
        for r in 0..v.rows() {
            let k = tc.data()[r];
            for x in v.row_mut(r) {
                *x *= k;
            }
        }
        self.push(v, Op::MulCol(a, col))
    }

    /// `a * s` where `s` is a `1 x 1` var.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        let k = self.value(s).item();
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::MulScalarVar(a, s))
    }

    /// Elementwise product with a constant mask (e.g. dropout).
    pub fn mul_const(&mut self, a: Var, mask: Tensor) -> Var {
        let v = self.value(a).zip_map(&mask, |x, m| x * m);
        self.push(v, Op::MulConst(a, Arc::new(mask)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddScalar(a, k))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut v = t.clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let lse = log_sum_exp(row);
            for x in row {
                *x -= lse;
            }
        }
        self.push(v, Op::LogSoftmaxRows(a))
    }

    /// Normalizes every row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let (mean, inv_std) = row_moments(row, eps);
            for x in row {
                *x = (*x - mean) * inv_std;
            }
        }
        self.push(v, Op::LayerNormRows(a, eps))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums over rows, producing `1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut v = Tensor::zeros(1, t.cols());
        for r in 0..t.rows() {
            for (o, x) in v.data_mut().iter_mut().zip(t.row(r)) {
                *o += x;
            }
        }
        self.push(v, Op::SumRows(a))
    }

    /// Sums over columns, producing `r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let v = Tensor::from_vec(t.rows(), 1, data);
        self.push(v, Op::SumCols(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), rows, "concat_cols row mismatch");
                v.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
                off += t.cols();
            }
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        self.push(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols(), "slice_cols out of range");
        let mut v = Tensor::zeros(t.rows(), len);
        for r in 0..t.rows() {
            v.row_mut(r).copy_from_slice(&t.row(r)[start..start + len]);
        }
        self.push(v, Op::SliceCols(a, start, len))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.rows(), "slice_rows out of range");
        let c = t.cols();
        let v = Tensor::from_vec(len, c, t.data()[start * c..(start + len) * c].to_vec());
        self.push(v, Op::SliceRows(a, start, len))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        self.slice_rows(a, r, 1)
    }

    /// Embedding-style lookup: output row `i` is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * t.cols());
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::from_vec(idx.len(), t.cols(), data);
        self.push(v, Op::GatherRows(a, idx.to_vec()))
    }

    /// Output `r x 1` holding `a[i, idx[i]]`.
    pub fn pick_per_row(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = self.value(a);
        assert_eq!(idx.len(), t.rows(), "pick_per_row index count mismatch");
        let data = idx.iter().enumerate().map(|(r, &c)| t.get(r, c)).collect();
        let v = Tensor::from_vec(idx.len(), 1, data);
        self.push(v, Op::PickPerRow(a, idx.to_vec()))
    }

    /// `x W + b` for a row-major batch `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    /// Reverse pass from a `1 x 1` loss; returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        self.backward_with_inputs(loss, &[]).0
    }

    /// Reverse pass that also returns the gradient of the loss with respect
    /// to each var in `inputs` (zeros when unreachable).
    pub fn backward_with_inputs(&self, loss: Var, inputs: &[Var]) -> (Gradients, Vec<Tensor>) {
        assert_eq!(
            self.value(loss).shape(),
            (1, 1),
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut params = Gradients::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &*node.value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Param(id) => params.add_to(*id, &g),
                Op::MatMul(a, b) => {
                    let ta = self.value(*a);
                    let tb = self.value(*b);
                    let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                    gemm(
                        1.0,
                        g.data(),
                        g.shape(),
                        false,
                        tb.data(),
                        tb.shape(),
                        true,
                        ga.data_mut(),
                    );
                    let mut gb = Tensor::zeros(tb.rows(), tb.cols());
                    gemm(
                        1.0,
                        ta.data(),
                        ta.shape(),
                        true,
                        g.data(),
                        g.shape(),
                        false,
                        gb.data_mut(),
                    );
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|x| -x));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let ta = self.value(*a);
                    let tr = self.value(*row);
                    let mut ga = g.clone();
                    let mut gr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            ga.set(r, c, g.get(r, c) * tr.data()[c]);
                            gr.data_mut()[c] += g.get(r, c) * ta.get(r, c);
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *row, gr);
                }
                Op::MulCol(a, col) => {
                    let ta = self.value(*a);
                    let tc = self.value(*col);
                    let mut ga = g.clone();
                    let mut gc = Tensor::zeros(g.rows(), 1);
                    for r in 0..g.rows() {
                        let k = tc.data()[r];
                        let mut s = 0.0;
                        for c in 0..g.cols() {
                            ga.set(r, c, g.get(r, c) * k);
                            s += g.get(r, c) * ta.get(r, c);
                        }
                        gc.data_mut()[r] = s;
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *col, gc);
                }
                Op::MulScalarVar(a, s) => {
                    let k = self.value(*s).item();
                    let ta = self.value(*a);
                    let gs: f64 = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).sum();
                    acc(&mut grads, *s, Tensor::scalar(gs));
                    acc(&mut grads, *a, g.map(|x| x * k));
                }
                Op::MulConst(a, m) => acc(&mut grads, *a, g.zip_map(m, |x, y| x * y)),
                Op::Scale(a, k) => {
                    let k = *k;
                    acc(&mut grads, *a, g.map(|x| x * k))
                }
                Op::AddScalar(a, _) => acc(&mut grads, *a, g),
                Op::Tanh(a) => acc(&mut grads, *a, g.zip_map(y, |gx, t| gx * (1.0 - t * t))),
                Op::Sigmoid(a) => acc(&mut grads, *a, g.zip_map(y, |gx, s| gx * s * (1.0 - s))),
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |gx, x| if x > 0.0 { gx } else { 0.0 });
                    acc(&mut grads, *a, ga)
                }
                Op::Exp(a) => acc(&mut grads, *a, g.zip_map(y, |gx, e| gx * e)),
                Op::Log(a) => acc(&mut grads, *a, g.zip_map(self.value(*a), |gx, x| gx / x)),
                Op::SoftmaxRows(a) => {
                    let mut ga = g.clone();
                    for r in 0..g.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for (o, s) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                            *o = s * (*o - dot);
                        }
                    }
                    acc(&mut grads, *a, ga)
                }
                Op::LogSoftmaxRows(a) => {
                    let mut ga = g.clone();
                    for r in 0..g.rows() {
                        let total: f64 = g.row(r).iter().sum();
                        for (o, ly) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                            *o -= ly.exp() * total;
                        }
                    }
                    acc(&mut grads, *a, ga)
                }
                Op::LayerNormRows(a, eps) => {
                    let x = self.value(*a);
                    let mut ga = g.clone();
                    let n = x.cols() as f64;
                    for r in 0..x.rows() {
                        let (_, inv_std) = row_moments(x.row(r), *eps);
                        let xh = y.row(r);
                        let gr = g.row(r);
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gx = gr.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((o, gi), xi) in ga.row_mut(r).iter_mut().zip(gr).zip(xh) {
                            *o = inv_std * (gi - mean_g - xi * mean_gx);
                        }
                    }
                    acc(&mut grads, *a, ga)
                }
                Op::SumAll(a) => {
                    let (r, c) = self.shape(*a);
                    acc(&mut grads, *a, Tensor::filled(r, c, g.item()))
                }
                Op::SumRows(a) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i).copy_from_slice(g.data());
                    }
                    acc(&mut grads, *a, ga)
                }
                Op::SumCols(a) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        let k = g.data()[i];
                        ga.row_mut(i).iter_mut().for_each(|o| *o = k);
                    }
                    acc(&mut grads, *a, ga)
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        let mut gp = Tensor::zeros(r, c);
                        for i in 0..r {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        off += c;
                        acc(&mut grads, p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        let gp = Tensor::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec());
                        off += r;
                        acc(&mut grads, p, gp);
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i)[*start..*start + *len].copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, *a, ga)
                }
                Op::SliceRows(a, start, len) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Tensor::zeros(r, c);
                    ga.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                    acc(&mut grads, *a, ga)
                }
                Op::GatherRows(a, idx) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Tensor::zeros(r, c);
                    for (i, &src) in idx.iter().enumerate() {
                        for (o, x) in ga.row_mut(src).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *a, ga)
                }
                Op::PickPerRow(a, idx) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Tensor::zeros(r, c);
                    for (i, &j) in idx.iter().enumerate() {
                        ga.set(i, j, g.data()[i]);
                    }
                    acc(&mut grads, *a, ga)
                }
            }
        }

        let inputs = inputs
            .iter()
            .map(|v| {
                grads.get(v.0).and_then(|g| g.clone()).unwrap_or_else(|| {
                    let (r, c) = self.shape(*v);
                    Tensor::zeros(r, c)
                })
            })
            .collect();
        (params, inputs)
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_rows(t: &Tensor) -> Tensor {
    let mut v = t.clone();
    for r in 0..v.rows() {
        let row = v.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            s += *x;
        }
        for x in row.iter_mut() {
            *x /= s;
        }
    }
    v
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}
