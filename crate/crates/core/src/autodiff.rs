//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Graph`] records every operation eagerly (values are computed as nodes
//! are added) and [`Graph::backward`] walks the tape in reverse. Parameters
//! are pulled from a bound [`ParamSet`] on first use and deduplicated, so a
//! weight used by several conversations in one batch accumulates a single
//! gradient.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::scalar::{lit, Scalar};
use crate::tensor::{dot, softmax_in_place, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    MulConst(NodeId, Mat<T>),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    LogEps(NodeId, T),
    Softmax(NodeId),
    MaskedSoftmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Mat<T>,
        inv_std: Vec<T>,
    },
    SelectRows(NodeId, Vec<usize>),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize),
    SumAll(NodeId),
    SumRows(NodeId),
    PearsonRows {
        a: NodeId,
        b: NodeId,
        /// Per row: None when the zero-variance guard fired, else (ā/|ā|, b̄/|b̄|, |ā|, |b̄|, p).
        cache: Vec<Option<PearsonCache<T>>>,
    },
    Nll(NodeId, Vec<usize>),
}

#[derive(Clone, Debug)]
struct PearsonCache<T> {
    a_unit: Vec<T>,
    b_unit: Vec<T>,
    a_norm: T,
    b_norm: T,
    corr: T,
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Variance floor for the Pearson zero-variance guard.
pub const PEARSON_VARIANCE_EPS: f64 = 1e-8;

pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Option<&'p ParamSet<T>>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_nodes: Vec::new(),
        }
    }

    /// A graph whose [`Graph::param`] calls read from `params`.
    pub fn with_params(params: &'p ParamSet<T>) -> Self {
        Self {
            nodes: Vec::new(),
            params: Some(params),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn value(&self, id: NodeId) -> &Mat<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value.get(0, 0)
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Mat<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A free input whose gradient is tracked (used by gradient checks).
    pub fn input(&mut self, value: Mat<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes.get(id.0).copied().flatten() {
            return n;
        }
        let params = self.params.expect("graph has no bound parameter set");
        let node = self.push(params.get(id).clone(), Op::Param, true);
        self.param_nodes[id.0] = Some(node);
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::MatMulNt(a, b), ng))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        let ng = self.ng(&[a]);
        self.push(v, Op::Transpose(a), ng)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), f)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, op, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds the `1 × n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        if self.shape(row) != (1, ac) {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + broadcast {:?}", (ar, ac), self.shape(row)),
            ));
        }
        let mut v = self.value(a).clone();
        let r = self.value(row).as_slice().to_vec();
        for i in 0..ar {
            for (x, &b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let ng = self.ng(&[a, row]);
        Ok(self.push(v, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// Elementwise product with a fixed matrix (dropout masks).
    pub fn mul_const(&mut self, a: NodeId, m: Mat<T>) -> Result<NodeId> {
        let v = self.value(a).zip_map(&m, |x, y| x * y)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::MulConst(a, m), ng))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(&[a]);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.tanh());
        let ng = self.ng(&[a]);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { T::zero() });
        let ng = self.ng(&[a]);
        self.push(v, Op::Relu(a), ng)
    }

    /// `ln(a + eps)`
    pub fn log_eps(&mut self, a: NodeId, eps: T) -> NodeId {
        let v = self.value(a).map(|x| (x + eps).ln());
        let ng = self.ng(&[a]);
        self.push(v, Op::LogEps(a, eps), ng)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).softmax_rows();
        let ng = self.ng(&[a]);
        self.push(v, Op::Softmax(a), ng)
    }

    /// Row softmax where column `j` is excluded (probability exactly zero)
    /// whenever `keep[j]` is false.
    pub fn masked_softmax_rows(&mut self, a: NodeId, keep: &[bool]) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if keep.len() != c {
            return Err(Error::shape(
                "masked_softmax_rows",
                format!("mask of {} for {c} columns", keep.len()),
            ));
        }
        let mut v = self.value(a).clone();
        for i in 0..r {
            softmax_in_place(v.row_mut(i), Some(keep));
        }
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::MaskedSoftmax(a), ng))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let mut v = src.clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let ng = self.ng(&[a]);
        self.push(v, Op::LogSoftmax(a), ng)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (both `1 × n`).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    (r, c),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let n = T::from_usize(c).unwrap();
        let mut xhat = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xhat.row_mut(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let g = self.value(gamma).as_slice().to_vec();
        let b = self.value(beta).as_slice().to_vec();
        let mut out = xhat.clone();
        for i in 0..r {
            for ((v, &gg), &bb) in out.row_mut(i).iter_mut().zip(&g).zip(&b) {
                *v = *v * gg + bb;
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn select_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let r = self.shape(a).0;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape(
                "select_rows",
                format!("row {bad} of a {r}-row matrix"),
            ));
        }
        let v = self.value(a).select_rows(idx);
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::SelectRows(a, idx.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = Mat::zeros(rows, total);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(i);
                v.row_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.shape(parts[0]).1;
        if parts.iter().any(|&p| self.shape(p).1 != cols) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).as_slice());
        }
        let rows = data.len() / cols.max(1);
        let v = Mat::from_vec(rows, cols, data)?;
        let ng = self.ng(parts);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) of {c} columns", start + len),
            ));
        }
        let mut v = Mat::zeros(r, len);
        for i in 0..r {
            v.row_mut(i)
                .copy_from_slice(&self.value(a).row(i)[start..start + len]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::SliceCols(a, start), ng))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Mat::full(1, 1, self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(v, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = T::from_usize(self.value(a).len().max(1)).unwrap();
        let s = self.sum_all(a);
        self.scale(s, T::one() / n)
    }

    /// `n × m → n × 1` row sums.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let data = (0..src.rows())
            .map(|i| src.row(i).iter().copied().sum())
            .collect();
        let v = Mat::from_vec(src.rows(), 1, data).unwrap();
        let ng = self.ng(&[a]);
        self.push(v, Op::SumRows(a), ng)
    }

    /// Pearson distance `1 − corr(a_i, b_i)` for every row pair, as an `n × 1` column.
    ///
    /// When either row has variance below [`PEARSON_VARIANCE_EPS`] the distance is
    /// 0 if both rows are constant and 1 otherwise, with zero gradient.
    pub fn pearson_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if self.shape(b) != (r, c) {
            return Err(Error::shape(
                "pearson_rows",
                format!("{:?} vs {:?}", (r, c), self.shape(b)),
            ));
        }
        if c < 2 {
            return Err(Error::Input(format!(
                "pearson distance needs vectors of length >= 2, got {c}"
            )));
        }
        let mut out = Vec::with_capacity(r);
        let mut cache = Vec::with_capacity(r);
        for i in 0..r {
            let (d, cch) = pearson_row(self.value(a).row(i), self.value(b).row(i));
            out.push(d);
            cache.push(cch);
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            Mat::from_vec(r, 1, out).unwrap(),
            Op::PearsonRows { a, b, cache },
            ng,
        ))
    }

    /// Mean negative log-likelihood of `labels` under row log-probabilities `logp`.
    pub fn nll(&mut self, logp: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (r, c) = self.shape(logp);
        if labels.len() != r {
            return Err(Error::shape(
                "nll",
                format!("{} labels for {r} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Input(format!("label {bad} outside [0, {c})")));
        }
        let total: T = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -self.value(logp).get(i, y))
            .sum();
        let v = Mat::full(1, 1, total / T::from_usize(r.max(1)).unwrap());
        let ng = self.ng(&[logp]);
        Ok(self.push(v, Op::Nll(logp, labels.to_vec()), ng))
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be 1x1, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Mat<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::full(1, 1, T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(idx, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        let mut param_grads = Vec::new();
        for (pid, n) in self.param_nodes.iter().enumerate() {
            if let Some(n) = n {
                if let Some(g) = &grads[n.0] {
                    param_grads.push((ParamId(pid), g.clone()));
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params: param_grads,
        })
    }

    fn propagate(&self, idx: usize, gy: &Mat<T>, grads: &mut [Option<Mat<T>>]) -> Result<()> {
        let val = |n: NodeId| &self.nodes[n.0].value;
        let wants = |n: NodeId| self.nodes[n.0].needs_grad;
        let acc = |n: NodeId, g: Mat<T>, grads: &mut [Option<Mat<T>>]| {
            if !self.nodes[n.0].needs_grad {
                return;
            }
            match &mut grads[n.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        let y = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    acc(*a, gy.matmul_nt(val(*b))?, grads);
                }
                if wants(*b) {
                    acc(*b, val(*a).matmul_tn(gy)?, grads);
                }
            }
            Op::MatMulNt(a, b) => {
                if wants(*a) {
                    acc(*a, gy.matmul(val(*b))?, grads);
                }
                if wants(*b) {
                    acc(*b, gy.matmul_tn(val(*a))?, grads);
                }
            }
            Op::Transpose(a) => acc(*a, gy.transpose(), grads),
            Op::Add(a, b) => {
                acc(*a, gy.clone(), grads);
                acc(*b, gy.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, gy.clone(), grads);
                acc(*b, gy.map(|x| -x), grads);
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, gy.zip_map(val(*b), |g, v| g * v)?, grads);
                }
                if wants(*b) {
                    acc(*b, gy.zip_map(val(*a), |g, v| g * v)?, grads);
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, gy.clone(), grads);
                if wants(*row) {
                    let mut s = Mat::zeros(1, gy.cols());
                    for i in 0..gy.rows() {
                        for (o, &g) in s.as_mut_slice().iter_mut().zip(gy.row(i)) {
                            *o += g;
                        }
                    }
                    acc(*row, s, grads);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                acc(*a, gy.map(|g| g * s), grads);
            }
            Op::MulConst(a, m) => acc(*a, gy.zip_map(m, |g, v| g * v)?, grads),
            Op::Sigmoid(a) => acc(*a, gy.zip_map(y, |g, s| g * s * (T::one() - s))?, grads),
            Op::Tanh(a) => acc(*a, gy.zip_map(y, |g, t| g * (T::one() - t * t))?, grads),
            Op::Relu(a) => acc(
                *a,
                gy.zip_map(val(*a), |g, x| if x > T::zero() { g } else { T::zero() })?,
                grads,
            ),
            Op::LogEps(a, eps) => {
                let eps = *eps;
                acc(*a, gy.zip_map(val(*a), |g, x| g / (x + eps))?, grads);
            }
            Op::Softmax(a) | Op::MaskedSoftmax(a) => {
                let mut ga = Mat::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let s = dot(gy.row(i), y.row(i));
                    for ((o, &g), &p) in ga.row_mut(i).iter_mut().zip(gy.row(i)).zip(y.row(i)) {
                        *o = p * (g - s);
                    }
                }
                acc(*a, ga, grads);
            }
            Op::LogSoftmax(a) => {
                let mut ga = Mat::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let s: T = gy.row(i).iter().copied().sum();
                    for ((o, &g), &lp) in ga.row_mut(i).iter_mut().zip(gy.row(i)).zip(y.row(i)) {
                        *o = g - lp.exp() * s;
                    }
                }
                acc(*a, ga, grads);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = xhat.shape();
                let g = val(*gamma).as_slice();
                if wants(*gamma) || wants(*beta) {
                    let mut gg = Mat::zeros(1, c);
                    let mut gb = Mat::zeros(1, c);
                    for i in 0..r {
                        for j in 0..c {
                            gg.as_mut_slice()[j] += gy.get(i, j) * xhat.get(i, j);
                            gb.as_mut_slice()[j] += gy.get(i, j);
                        }
                    }
                    acc(*gamma, gg, grads);
                    acc(*beta, gb, grads);
                }
                if wants(*x) {
                    let n = T::from_usize(c).unwrap();
                    let mut gx = Mat::zeros(r, c);
                    for i in 0..r {
                        let gxh: Vec<T> = (0..c).map(|j| gy.get(i, j) * g[j]).collect();
                        let s1: T = gxh.iter().copied().sum();
                        let s2: T = gxh.iter().zip(xhat.row(i)).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            gx.set(
                                i,
                                j,
                                inv_std[i] / n * (n * gxh[j] - s1 - xhat.get(i, j) * s2),
                            );
                        }
                    }
                    acc(*x, gx, grads);
                }
            }
            Op::SelectRows(a, idxs) => {
                let (r, c) = val(*a).shape();
                let mut ga = Mat::zeros(r, c);
                for (o, &i) in idxs.iter().enumerate() {
                    for (d, &g) in ga.row_mut(i).iter_mut().zip(gy.row(o)) {
                        *d += g;
                    }
                }
                acc(*a, ga, grads);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    if wants(p) {
                        let mut gp = Mat::zeros(r, c);
                        for i in 0..r {
                            gp.row_mut(i).copy_from_slice(&gy.row(i)[off..off + c]);
                        }
                        acc(p, gp, grads);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    if wants(p) {
                        let gp =
                            Mat::from_vec(r, c, gy.as_slice()[off * c..(off + r) * c].to_vec())?;
                        acc(p, gp, grads);
                    }
                    off += r;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut ga = Mat::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i)[*start..*start + gy.cols()].copy_from_slice(gy.row(i));
                }
                acc(*a, ga, grads);
            }
            Op::SumAll(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Mat::full(r, c, gy.get(0, 0)), grads);
            }
            Op::SumRows(a) => {
                let (r, c) = val(*a).shape();
                let mut ga = Mat::zeros(r, c);
                for i in 0..r {
                    let g = gy.get(i, 0);
                    ga.row_mut(i).iter_mut().for_each(|v| *v = g);
                }
                acc(*a, ga, grads);
            }
            Op::PearsonRows { a, b, cache } => {
                let (r, c) = val(*a).shape();
                let mut ga = Mat::zeros(r, c);
                let mut gb = Mat::zeros(r, c);
                for (i, entry) in cache.iter().enumerate() {
                    let Some(pc) = entry else { continue };
                    // d = 1 - <â, b̂>; ∂d/∂a = -(b̂ - p·â)/|ā|, symmetric in b.
                    let g = gy.get(i, 0);
                    for j in 0..c {
                        let (au, bu) = (pc.a_unit[j], pc.b_unit[j]);
                        ga.set(i, j, -g * (bu - pc.corr * au) / pc.a_norm);
                        gb.set(i, j, -g * (au - pc.corr * bu) / pc.b_norm);
                    }
                }
                acc(*a, ga, grads);
                acc(*b, gb, grads);
            }
            Op::Nll(logp, labels) => {
                let (r, c) = val(*logp).shape();
                let mut g = Mat::zeros(r, c);
                let scale = gy.get(0, 0) / T::from_usize(r.max(1)).unwrap();
                for (i, &yv) in labels.iter().enumerate() {
                    g.set(i, yv, -scale);
                }
                acc(*logp, g, grads);
            }
        }
        Ok(())
    }
}

fn pearson_row<T: Scalar>(a: &[T], b: &[T]) -> (T, Option<PearsonCache<T>>) {
    let n = T::from_usize(a.len()).unwrap();
    let ma = a.iter().copied().sum::<T>() / n;
    let mb = b.iter().copied().sum::<T>() / n;
    let ac: Vec<T> = a.iter().map(|&x| x - ma).collect();
    let bc: Vec<T> = b.iter().map(|&x| x - mb).collect();
    let va = dot(&ac, &ac);
    let vb = dot(&bc, &bc);
    let eps: T = lit(PEARSON_VARIANCE_EPS);
    let a_const = va / n < eps;
    let b_const = vb / n < eps;
    if a_const || b_const {
        let d = if a_const && b_const {
            T::zero()
        } else {
            T::one()
        };
        return (d, None);
    }
    let a_norm = va.sqrt();
    let b_norm = vb.sqrt();
    let a_unit: Vec<T> = ac.iter().map(|&x| x / a_norm).collect();
    let b_unit: Vec<T> = bc.iter().map(|&x| x / b_norm).collect();
    let corr = dot(&a_unit, &b_unit).max(-T::one()).min(T::one());
    (
        T::one() - corr,
        Some(PearsonCache {
            a_unit,
            b_unit,
            a_norm,
            b_norm,
            corr,
        }),
    )
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Mat<T>>>,
    params: Vec<(ParamId, Mat<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, node: NodeId) -> Option<&Mat<T>> {
        self.nodes[node.0].as_ref()
    }

    /// Gradients of every parameter that took part in the graph.
    pub fn params(&self) -> &[(ParamId, Mat<T>)] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }
}

/// Central finite-difference gradient of a scalar function of one matrix.
pub fn numerical_gradient<T: Scalar>(
    x: &Mat<T>,
    h: f64,
    mut f: impl FnMut(&Mat<T>) -> T,
) -> Mat<T> {
    let mut g = Mat::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    let h_t: T = lit(h);
    for k in 0..x.len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + h_t;
        let up = f(&probe);
        probe.as_mut_slice()[k] = orig - h_t;
        let down = f(&probe);
        probe.as_mut_slice()[k] = orig;
        g.as_mut_slice()[k] = (up - down) / (h_t + h_t);
    }
    g
}

/// `max |a − b| / max(max|a|, max|b|, floor)`
pub fn relative_error<T: Scalar>(analytic: &Mat<T>, numeric: &Mat<T>, floor: f64) -> f64 {
    let diff = analytic
        .zip_map(numeric, |a, b| a - b)
        .expect("same shape")
        .max_abs()
        .to_f64_lossy();
    let scale = analytic
        .max_abs()
        .to_f64_lossy()
        .max(numeric.max_abs().to_f64_lossy())
        .max(floor);
    diff / scale
}
