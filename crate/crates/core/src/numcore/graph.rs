//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records operations in creation order, which is a valid
//! topological order by construction. [`Graph::gradient`] walks the record
//! backwards and accumulates vector-Jacobian products into every parameter
//! leaf.

use std::cell::Cell;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::pwl;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_values(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Gradients for every parameter of a store, zero for untouched ones.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .values
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// `[n, m] + [1, m]`
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[n, m] * [n, 1]`
    MulCol(Var, Var),
    /// `[n, m] * [1, m]`
    MulRow(Var, Var),
    /// `a * x + b`
    Affine(Var, f64),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sigmoid(Var),
    Elu(Var),
    Relu(Var),
    Logit(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    SumCols(Var),
    LogSumExpCols(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    GatherRows(Var, Vec<usize>),
    GroupSumRows(Var, usize),
    SegmentSum(Var, Vec<usize>),
    Reshape(Var),
    PwlForward(Var, Var, usize),
    PwlInverse(Var, Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A recorded computation.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    unit_clamps: Cell<usize>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            unit_clamps: Cell::new(0),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Times a piecewise-linear op had to pull a coordinate off the
    /// interval boundary.
    pub fn unit_clamps(&self) -> usize {
        self.unit_clamps.get()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf for a trainable parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn expect_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.shape(a);
        let [k2, n] = self.shape(b);
        if k != k2 {
            return Err(Error::Dimension(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = Tensor::zeros(m, n);
        gemm(
            m,
            k,
            n,
            1.0,
            (self.value(a).data(), k as isize, 1),
            (self.value(b).data(), n as isize, 1),
            0.0,
            out.data_mut(),
        );
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let [n, m] = self.shape(a);
        if self.shape(row) != [1, m] {
            return Err(Error::Dimension(format!(
                "row broadcast of {:?} onto {n}x{m}",
                self.shape(row)
            )));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..n {
            for (o, b) in out.row_slice_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let [n, m] = self.shape(a);
        if self.shape(col) != [n, 1] {
            return Err(Error::Dimension(format!(
                "column broadcast of {:?} onto {n}x{m}",
                self.shape(col)
            )));
        }
        let mut out = self.value(a).clone();
        let c = self.value(col).data().to_vec();
        for (i, &s) in c.iter().enumerate() {
            for o in out.row_slice_mut(i) {
                *o *= s;
            }
        }
        Ok(self.push(out, Op::MulCol(a, col)))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let [n, m] = self.shape(a);
        if self.shape(row) != [1, m] {
            return Err(Error::Dimension(format!(
                "row scaling of {:?} onto {n}x{m}",
                self.shape(row)
            )));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..n {
            for (o, s) in out.row_slice_mut(i).iter_mut().zip(&r) {
                *o *= s;
            }
        }
        Ok(self.push(out, Op::MulRow(a, row)))
    }

    /// `factor * a + offset`
    pub fn affine(&mut self, a: Var, factor: f64, offset: f64) -> Var {
        let out = self.value(a).map(|x| factor * x + offset);
        self.push(out, Op::Affine(a, factor))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.affine(a, factor, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { x.exp_m1() });
        self.push(out, Op::Elu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn logit(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|u| u.ln() - (-u).ln_1p());
        self.push(out, Op::Logit(a))
    }

    /// `ln(1 + exp(a))`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping bites.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums, `[n, m] -> [n, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(t.rows(), 1);
        for i in 0..t.rows() {
            out.data_mut()[i] = t.row_slice(i).iter().sum();
        }
        self.push(out, Op::SumCols(a))
    }

    /// Per-row log-sum-exp with max shift, `[n, m] -> [n, 1]`.
    pub fn logsumexp_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(t.rows(), 1);
        for i in 0..t.rows() {
            out.data_mut()[i] = logsumexp(t.row_slice(i));
        }
        self.push(out, Op::LogSumExpCols(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|&p| self.shape(p)[0])
            .ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let mut cols = 0;
        for &p in parts {
            let [r, c] = self.shape(p);
            if r != n {
                return Err(Error::Dimension(format!("concat rows {r} vs {n}")));
            }
            cols += c;
        }
        let mut out = Tensor::zeros(n, cols);
        for i in 0..n {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row_slice(i);
                out.row_slice_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let [n, m] = self.shape(a);
        if start + len > m {
            return Err(Error::Dimension(format!(
                "slice {start}..{} of {m} columns",
                start + len
            )));
        }
        let t = self.value(a);
        let mut out = Tensor::zeros(n, len);
        for i in 0..n {
            out.row_slice_mut(i)
                .copy_from_slice(&t.row_slice(i)[start..start + len]);
        }
        Ok(self.push(out, Op::Slice(a, start)))
    }

    /// Rows picked by index (repeats allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let n = self.shape(a)[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Dimension(format!("gather row {bad} of {n}")));
        }
        let out = self.value(a).select_rows(&idx);
        Ok(self.push(out, Op::GatherRows(a, idx)))
    }

    /// Each row repeated `times` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let n = self.shape(a)[0];
        let idx = (0..n).flat_map(|i| std::iter::repeat(i).take(times)).collect();
        self.gather_rows(a, idx)
    }

    /// Sums consecutive groups of `group` rows, `[n * g, m] -> [n, m]`.
    pub fn group_sum_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let [r, m] = self.shape(a);
        if group == 0 || r % group != 0 {
            return Err(Error::Dimension(format!("{r} rows in groups of {group}")));
        }
        let t = self.value(a);
        let mut out = Tensor::zeros(r / group, m);
        for i in 0..r {
            let dst = i / group;
            let src = t.row_slice(i);
            for (o, v) in out.row_slice_mut(dst).iter_mut().zip(src) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::GroupSumRows(a, group)))
    }

    /// Row `k` of `a` is added into output row `seg[k]`; the output has
    /// `segments` rows. Rows are accumulated in increasing `k`.
    pub fn segment_sum(&mut self, a: Var, seg: Vec<usize>, segments: usize) -> Result<Var> {
        let [r, m] = self.shape(a);
        if seg.len() != r {
            return Err(Error::Dimension(format!("{} segment ids for {r} rows", seg.len())));
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= segments) {
            return Err(Error::Dimension(format!("segment {bad} of {segments}")));
        }
        let t = self.value(a);
        let mut out = Tensor::zeros(segments, m);
        for (k, &s) in seg.iter().enumerate() {
            for (o, v) in out.row_slice_mut(s).iter_mut().zip(t.row_slice(k)) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::SegmentSum(a, seg)))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::from_vec(rows, cols, t.data().to_vec())?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Piecewise-linear CDF over `bins` equal bins per column of `u`.
    /// Output is `[n, 2T]`: mapped coordinates, then per-coordinate log slopes.
    pub fn pwl_forward(&mut self, u: Var, logits: Var, bins: usize) -> Result<Var> {
        self.pwl(u, logits, bins, false)
    }

    /// Inverse of [`Graph::pwl_forward`], same output layout.
    pub fn pwl_inverse(&mut self, v: Var, logits: Var, bins: usize) -> Result<Var> {
        self.pwl(v, logits, bins, true)
    }

    fn pwl(&mut self, u: Var, logits: Var, bins: usize, inverse: bool) -> Result<Var> {
        let [n, t] = self.shape(u);
        if self.shape(logits) != [n, t * bins] {
            return Err(Error::Dimension(format!(
                "pwl logits {:?}, expected {n}x{}",
                self.shape(logits),
                t * bins
            )));
        }
        let mut out = Tensor::zeros(n, 2 * t);
        let mut probs = vec![0.0; bins];
        let mut clamps = 0;
        {
            let uv = self.value(u);
            let lv = self.value(logits);
            for i in 0..n {
                for j in 0..t {
                    pwl::softmax(&lv.row_slice(i)[j * bins..(j + 1) * bins], &mut probs);
                    let x = uv.get(i, j);
                    let p = if inverse {
                        pwl::inverse(x, &probs)
                    } else {
                        pwl::forward(x, &probs)
                    };
                    clamps += usize::from(p.clamped);
                    out.set(i, j, p.value);
                    out.set(i, t + j, p.log_det);
                }
            }
        }
        self.unit_clamps.set(self.unit_clamps.get() + clamps);
        let op = if inverse {
            Op::PwlInverse(u, logits, bins)
        } else {
            Op::PwlForward(u, logits, bins)
        };
        Ok(self.push(out, op))
    }

    /// Gradients of a scalar node with respect to every parameter in the store.
    pub fn gradient(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != [1, 1] {
            return Err(Error::Contract(format!(
                "gradient of a non-scalar {:?} node",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::zeros_like(self.store);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.grads[id.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    // dA = G B^T, dB = A^T G
                    let mut da = Tensor::zeros(m, k);
                    gemm(m, n, k, 1.0, (g.data(), n as isize, 1), (bv.data(), 1, n as isize), 0.0, da.data_mut());
                    let mut db = Tensor::zeros(k, n);
                    gemm(k, m, n, 1.0, (av.data(), 1, k as isize), (g.data(), n as isize, 1), 0.0, db.data_mut());
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(a, r) => {
                    let mut dr = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, v) in dr.data_mut().iter_mut().zip(g.row_slice(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *r, dr);
                    accumulate(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |gv, bv| gv * bv);
                    let db = g.zip_map(self.value(*a), |gv, av| gv * av);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MulCol(a, c) => {
                    let av = self.value(*a);
                    let cv = self.value(*c);
                    let mut da = g.clone();
                    let mut dc = Tensor::zeros(cv.rows(), 1);
                    for i in 0..g.rows() {
                        let s = cv.data()[i];
                        let mut acc = 0.0;
                        for (j, d) in da.row_slice_mut(i).iter_mut().enumerate() {
                            acc += *d * av.get(i, j);
                            *d *= s;
                        }
                        dc.data_mut()[i] = acc;
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *c, dc);
                }
                Op::MulRow(a, r) => {
                    let av = self.value(*a);
                    let rv = self.value(*r);
                    let mut da = g.clone();
                    let mut dr = Tensor::zeros(1, rv.cols());
                    for i in 0..g.rows() {
                        for (j, d) in da.row_slice_mut(i).iter_mut().enumerate() {
                            dr.data_mut()[j] += *d * av.get(i, j);
                            *d *= rv.data()[j];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *r, dr);
                }
                Op::Affine(a, f) => accumulate(&mut grads, *a, g.map(|v| v * f)),
                Op::Exp(a) => accumulate(&mut grads, *a, g.zip_map(y, |gv, yv| gv * yv)),
                Op::Log(a) => {
                    accumulate(&mut grads, *a, g.zip_map(self.value(*a), |gv, x| gv / x))
                }
                Op::Square(a) => {
                    accumulate(&mut grads, *a, g.zip_map(self.value(*a), |gv, x| 2.0 * gv * x))
                }
                Op::Sigmoid(a) => {
                    accumulate(&mut grads, *a, g.zip_map(y, |gv, s| gv * s * (1.0 - s)))
                }
                Op::Elu(a) => {
                    let d = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { gv * x.exp() });
                    accumulate(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let d = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads, *a, d);
                }
                Op::Logit(a) => {
                    let d = g.zip_map(self.value(*a), |gv, u| gv / (u * (1.0 - u)));
                    accumulate(&mut grads, *a, d);
                }
                Op::Softplus(a) => {
                    accumulate(&mut grads, *a, g.zip_map(self.value(*a), |gv, x| gv * sigmoid(x)))
                }
                Op::Clamp(a, lo, hi) => {
                    let d = g.zip_map(self.value(*a), |gv, x| if x > *lo && x < *hi { gv } else { 0.0 });
                    accumulate(&mut grads, *a, d);
                }
                Op::SumAll(a) => {
                    let [r, c] = self.shape(*a);
                    accumulate(&mut grads, *a, Tensor::filled(r, c, g.item()));
                }
                Op::SumCols(a) => {
                    let [r, c] = self.shape(*a);
                    let mut d = Tensor::zeros(r, c);
                    for i in 0..r {
                        let gi = g.data()[i];
                        d.row_slice_mut(i).iter_mut().for_each(|v| *v = gi);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::LogSumExpCols(a) => {
                    let av = self.value(*a);
                    let mut d = Tensor::zeros(av.rows(), av.cols());
                    for i in 0..av.rows() {
                        let (gi, yi) = (g.data()[i], y.data()[i]);
                        for (o, &x) in d.row_slice_mut(i).iter_mut().zip(av.row_slice(i)) {
                            *o = gi * (x - yi).exp();
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let [r, c] = self.shape(p);
                        let mut d = Tensor::zeros(r, c);
                        for i in 0..r {
                            d.row_slice_mut(i)
                                .copy_from_slice(&g.row_slice(i)[off..off + c]);
                        }
                        off += c;
                        accumulate(&mut grads, p, d);
                    }
                }
                Op::Slice(a, start) => {
                    let [r, c] = self.shape(*a);
                    let mut d = Tensor::zeros(r, c);
                    for i in 0..r {
                        d.row_slice_mut(i)[*start..*start + g.cols()]
                            .copy_from_slice(g.row_slice(i));
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::GatherRows(a, idx) => {
                    let [r, c] = self.shape(*a);
                    let mut d = Tensor::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, v) in d.row_slice_mut(i).iter_mut().zip(g.row_slice(k)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::GroupSumRows(a, group) => {
                    let [r, c] = self.shape(*a);
                    let mut d = Tensor::zeros(r, c);
                    for i in 0..r {
                        d.row_slice_mut(i).copy_from_slice(g.row_slice(i / group));
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::SegmentSum(a, seg) => {
                    let [r, c] = self.shape(*a);
                    let mut d = Tensor::zeros(r, c);
                    for (k, &s) in seg.iter().enumerate() {
                        d.row_slice_mut(k).copy_from_slice(g.row_slice(s));
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Reshape(a) => {
                    let [r, c] = self.shape(*a);
                    accumulate(&mut grads, *a, Tensor::from_vec(r, c, g.into_vec())?);
                }
                Op::PwlForward(u, l, bins) | Op::PwlInverse(u, l, bins) => {
                    let inverse = matches!(node.op, Op::PwlInverse(..));
                    let (du, dl) = self.pwl_backward(*u, *l, *bins, inverse, &g);
                    accumulate(&mut grads, *u, du);
                    accumulate(&mut grads, *l, dl);
                }
            }
        }
        Ok(out)
    }

    fn pwl_backward(&self, u: Var, logits: Var, bins: usize, inverse: bool, g: &Tensor) -> (Tensor, Tensor) {
        let uv = self.value(u);
        let lv = self.value(logits);
        let (n, t) = (uv.rows(), uv.cols());
        let mut du = Tensor::zeros(n, t);
        let mut dl = Tensor::zeros(n, t * bins);
        let mut probs = vec![0.0; bins];
        let bf = bins as f64;
        for i in 0..n {
            for j in 0..t {
                pwl::softmax(&lv.row_slice(i)[j * bins..(j + 1) * bins], &mut probs);
                let x = uv.get(i, j);
                let g_val = g.get(i, j);
                let g_ld = g.get(i, t + j);
                let dlog = &mut dl.row_slice_mut(i)[j * bins..(j + 1) * bins];
                if inverse {
                    // u = (b + (v - C_b) / q_b) / B
                    let p = pwl::inverse(x, &probs);
                    let qb = probs[p.bin];
                    let frac = p.value * bf - p.bin as f64;
                    if !p.clamped {
                        du.set(i, j, g_val / (bf * qb));
                    }
                    for (k, d) in dlog.iter_mut().enumerate() {
                        let w = if k < p.bin {
                            1.0
                        } else if k == p.bin {
                            frac
                        } else {
                            0.0
                        };
                        let ind = if k == p.bin { 1.0 } else { 0.0 };
                        *d = -g_val * probs[k] * (w - p.input) / (bf * qb) - g_ld * (ind - probs[k]);
                    }
                } else {
                    let p = pwl::forward(x, &probs);
                    let qb = probs[p.bin];
                    let frac = p.input * bf - p.bin as f64;
                    if !p.clamped {
                        du.set(i, j, g_val * bf * qb);
                    }
                    for (k, d) in dlog.iter_mut().enumerate() {
                        let w = if k < p.bin {
                            1.0
                        } else if k == p.bin {
                            frac
                        } else {
                            0.0
                        };
                        let ind = if k == p.bin { 1.0 } else { 0.0 };
                        *d = g_val * probs[k] * (w - p.value) + g_ld * (ind - probs[k]);
                    }
                }
            }
        }
        (du, dl)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, d: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
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

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln(sum(exp(xs)))` with the max shifted out. Empty input gives `-inf`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values.iter().map(|(n, t)| s.add(*n, t.clone())).collect();
        (s, ids)
    }

    #[test]
    fn gradient_of_identity_is_one() {
        let (store, ids) = store_with(&[("p", Tensor::scalar(2.5))]);
        let mut g = Graph::new(&store);
        let p = g.param(ids[0]);
        let grads = g.gradient(p).unwrap();
        assert_eq!(grads.get(ids[0]).item(), 1.0);
    }

    #[test]
    fn gradient_of_square() {
        let (store, ids) = store_with(&[("p", Tensor::scalar(3.0))]);
        let mut g = Graph::new(&store);
        let p = g.param(ids[0]);
        let loss = g.square(p);
        assert_eq!(g.gradient(loss).unwrap().get(ids[0]).item(), 6.0);
    }

    #[test]
    fn untouched_parameters_get_zero() {
        let (store, ids) = store_with(&[("a", Tensor::scalar(1.0)), ("b", Tensor::row(&[1.0, 2.0]))]);
        let mut g = Graph::new(&store);
        let a = g.param(ids[0]);
        let loss = g.exp(a);
        let grads = g.gradient(loss).unwrap();
        assert_eq!(grads.get(ids[1]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let (store, ids) = store_with(&[("b", Tensor::row(&[1.0, 2.0]))]);
        let mut g = Graph::new(&store);
        let b = g.param(ids[0]);
        assert!(matches!(g.gradient(b), Err(Error::Contract(_))));
    }

    #[test]
    fn logsumexp_is_shift_stable() {
        assert!((logsumexp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
    }
}
