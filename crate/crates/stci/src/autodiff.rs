//! Minimal reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! A [`Graph`] is a tape of operation records built dynamically during a
//! forward pass. Every tensor is a 2-D array of `f64`; higher-rank model
//! quantities (e.g. N x T x d embeddings) are stored flattened as
//! `(N*T) x d` matrices by convention. `backward` visits the tape exactly
//! once in reverse topological order, which the append-only construction
//! guarantees.
//!
//! The op set is exactly what the imputation model needs: dense matmuls,
//! broadcastable elementwise arithmetic, row softmax (plain and masked),
//! row layer-norm, row gather/scatter, column slicing/concat, and two
//! pair-structured ops (`pairwise_sum_rows`, `weighted_pair_sum`) that keep
//! per-query attention messages vectorized.

use ndarray::Array2;

use crate::error::AutodiffError;

/// Identifier of a node in the active [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Neg(TensorId),
    Scale(TensorId, f64),
    MatMul(TensorId, TensorId),
    /// a * b^T without materializing the transpose.
    MatMulNT(TensorId, TensorId),
    Sigmoid(TensorId),
    Gelu(TensorId),
    Exp(TensorId),
    Ln(TensorId),
    Abs(TensorId),
    SoftmaxRows(TensorId),
    /// Softmax restricted to mask==1 entries per row; masked entries are
    /// exactly zero in the output and never touch the max/sum.
    MaskedSoftmaxRows(TensorId, Array2<f64>),
    LayerNormRows {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SumAll(TensorId),
    RowSum(TensorId),
    SelectRows(TensorId, Vec<usize>),
    SliceCols(TensorId, usize),
    ConcatRows(Vec<TensorId>),
    ConcatCols(Vec<TensorId>),
    Reshape(TensorId),
    PairwiseSumRows(TensorId, TensorId),
    WeightedPairSum(TensorId, TensorId),
    ClampMin(TensorId, f64),
}

struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Dynamically built computation graph (tape).
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn bcast_dim(a: usize, b: usize, op: &'static str, l: (usize, usize), r: (usize, usize)) -> Result<usize, AutodiffError> {
    if a == b || b == 1 {
        Ok(a.max(b))
    } else if a == 1 {
        Ok(b)
    } else {
        Err(AutodiffError::DimensionMismatch { op, left: l, right: r })
    }
}

fn dims(a: &Array2<f64>) -> (usize, usize) {
    (a.nrows(), a.ncols())
}

/// Elementwise combine with numpy-style broadcasting over size-1 axes.
fn broadcast_zip(a: &Array2<f64>, b: &Array2<f64>, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Array2<f64>, AutodiffError> {
    let (ar, ac) = dims(a);
    let (br, bc) = dims(b);
    let rows = bcast_dim(ar, br, op, (ar, ac), (br, bc))?;
    let cols = bcast_dim(ac, bc, op, (ar, ac), (br, bc))?;
    let mut out = Array2::zeros((rows, cols));
    for i in 0..rows {
        for j in 0..cols {
            let av = a[[if ar == 1 { 0 } else { i }, if ac == 1 { 0 } else { j }]];
            let bv = b[[if br == 1 { 0 } else { i }, if bc == 1 { 0 } else { j }]];
            out[[i, j]] = f(av, bv);
        }
    }
    Ok(out)
}

/// Sum `g` down to `shape` by collapsing the axes that were broadcast.
fn reduce_to_shape(g: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let (gr, gc) = dims(g);
    let (r, c) = shape;
    if (gr, gc) == (r, c) {
        return g.clone();
    }
    let mut out = Array2::zeros((r, c));
    for i in 0..gr {
        for j in 0..gc {
            out[[if r == 1 { 0 } else { i }, if c == 1 { 0 } else { j }]] += g[[i, j]];
        }
    }
    out
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, requires_grad: bool, op: Op) -> TensorId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Array2<f64>) -> TensorId {
        self.push(value, true, Op::Leaf)
    }

    /// Non-differentiable input (data, masks, noise).
    pub fn constant(&mut self, value: Array2<f64>) -> TensorId {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> Option<&Array2<f64>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn scalar(&self, id: TensorId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        dims(&self.nodes[id.0].value)
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutodiffError> {
        let v = broadcast_zip(self.value(a), self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(v, self.rg(a) || self.rg(b), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutodiffError> {
        let v = broadcast_zip(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(v, self.rg(a) || self.rg(b), Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutodiffError> {
        let v = broadcast_zip(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(v, self.rg(a) || self.rg(b), Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutodiffError> {
        let v = broadcast_zip(self.value(a), self.value(b), "div", |x, y| x / y)?;
        Ok(self.push(v, self.rg(a) || self.rg(b), Op::Div(a, b)))
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(|x| -x);
        self.push(v, self.rg(a), Op::Neg(a))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, self.rg(a), Op::Scale(a, c))
    }

    /// Matrix product `a[m x k] * b[k x n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutodiffError> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(AutodiffError::DimensionMismatch {
                op: "matmul",
                left: (ar, ac),
                right: (br, bc),
            });
        }
        let v = self.value(a).dot(self.value(b));
        Ok(self.push(v, self.rg(a) || self.rg(b), Op::MatMul(a, b)))
    }

    /// `a[m x k] * b[n x k]^T`, the usual "apply weight matrix to rows" form.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutodiffError> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != bc {
            return Err(AutodiffError::DimensionMismatch {
                op: "matmul_nt",
                left: (ar, ac),
                right: (br, bc),
            });
        }
        let v = self.value(a).dot(&self.value(b).t());
        Ok(self.push(v, self.rg(a) || self.rg(b), Op::MatMulNT(a, b)))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, self.rg(a), Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(gelu_scalar);
        self.push(v, self.rg(a), Op::Gelu(a))
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, self.rg(a), Op::Exp(a))
    }

    pub fn ln(&mut self, a: TensorId) -> Result<TensorId, AutodiffError> {
        if let Some(bad) = self.value(a).iter().find(|x| **x <= 0.0) {
            return Err(AutodiffError::NumericDomain {
                op: "ln",
                message: format!("log of non-positive value {bad}"),
            });
        }
        let v = self.value(a).mapv(f64::ln);
        Ok(self.push(v, self.rg(a), Op::Ln(a)))
    }

    /// Absolute value; the subgradient at 0 is taken as 0.
    pub fn abs(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, self.rg(a), Op::Abs(a))
    }

    /// Numerically stabilized softmax along each row.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId, AutodiffError> {
        let (_, c) = self.shape(a);
        if c == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "softmax_rows",
                message: "empty reduction axis".into(),
            });
        }
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|s| (s - m).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|e| e / sum);
        }
        Ok(self.push(v, self.rg(a), Op::SoftmaxRows(a)))
    }

    /// Row softmax over the entries where `mask == 1`; other entries are
    /// exactly zero and do not enter the max or the normalizer. A row with an
    /// all-zero mask produces an all-zero row.
    pub fn masked_softmax_rows(&mut self, a: TensorId, mask: Array2<f64>) -> Result<TensorId, AutodiffError> {
        let sa = self.shape(a);
        if sa != dims(&mask) {
            return Err(AutodiffError::DimensionMismatch {
                op: "masked_softmax_rows",
                left: sa,
                right: dims(&mask),
            });
        }
        if sa.1 == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "masked_softmax_rows",
                message: "empty reduction axis".into(),
            });
        }
        let x = self.value(a);
        let mut v = Array2::zeros(sa);
        for i in 0..sa.0 {
            let mut m = f64::NEG_INFINITY;
            for j in 0..sa.1 {
                if mask[[i, j]] != 0.0 {
                    m = m.max(x[[i, j]]);
                }
            }
            if m == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for j in 0..sa.1 {
                if mask[[i, j]] != 0.0 {
                    let e = (x[[i, j]] - m).exp();
                    v[[i, j]] = e;
                    sum += e;
                }
            }
            for j in 0..sa.1 {
                if mask[[i, j]] != 0.0 {
                    v[[i, j]] /= sum;
                }
            }
        }
        Ok(self.push(v, self.rg(a), Op::MaskedSoftmaxRows(a, mask)))
    }

    /// Per-row layer normalization followed by an affine transform.
    /// `gain` and `bias` are `1 x d` row vectors.
    pub fn layer_norm_rows(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId, AutodiffError> {
        let (r, d) = self.shape(x);
        if d < 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "layer_norm_rows",
                message: format!("normalized width must be >= 2, got {d}"),
            });
        }
        for (name, id) in [("gain", gain), ("bias", bias)] {
            if self.shape(id) != (1, d) {
                return Err(AutodiffError::DimensionMismatch {
                    op: if name == "gain" { "layer_norm_rows gain" } else { "layer_norm_rows bias" },
                    left: (r, d),
                    right: self.shape(id),
                });
            }
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let mut out = Array2::zeros((r, d));
        let mut means = Vec::with_capacity(r);
        let mut inv_stds = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                out[[i, j]] = (xv[[i, j]] - mean) * inv_std * gv[[0, j]] + bv[[0, j]];
            }
            means.push(mean);
            inv_stds.push(inv_std);
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            rg,
            Op::LayerNormRows {
                x,
                gain,
                bias,
                mean: means,
                inv_std: inv_stds,
            },
        ))
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), self.rg(a), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise sum, `m x n -> m x 1`.
    pub fn row_sum(&mut self, a: TensorId) -> TensorId {
        let (r, _) = self.shape(a);
        let mut v = Array2::zeros((r, 1));
        for (i, row) in self.value(a).rows().into_iter().enumerate() {
            v[[i, 0]] = row.sum();
        }
        self.push(v, self.rg(a), Op::RowSum(a))
    }

    /// Gather rows by index; backward scatter-adds.
    pub fn select_rows(&mut self, a: TensorId, indices: &[usize]) -> Result<TensorId, AutodiffError> {
        let (r, c) = self.shape(a);
        if let Some(bad) = indices.iter().find(|i| **i >= r) {
            return Err(AutodiffError::InvalidArgument {
                op: "select_rows",
                message: format!("row index {bad} out of bounds for {r} rows"),
            });
        }
        let xv = self.value(a);
        let mut v = Array2::zeros((indices.len(), c));
        for (k, &i) in indices.iter().enumerate() {
            v.row_mut(k).assign(&xv.row(i));
        }
        Ok(self.push(v, self.rg(a), Op::SelectRows(a, indices.to_vec())))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId, AutodiffError> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_cols",
                message: format!("slice {start}..{} out of bounds for {c} columns", start + len),
            });
        }
        let v = self.value(a).slice(ndarray::s![.., start..start + len]).to_owned();
        Ok(self.push(v, self.rg(a), Op::SliceCols(a, start)))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "concat_rows",
                message: "no tensors to concatenate".into(),
            });
        }
        let c = self.shape(parts[0]).1;
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.1 != c {
                return Err(AutodiffError::DimensionMismatch {
                    op: "concat_rows",
                    left: self.shape(parts[0]),
                    right: s,
                });
            }
            rows += s.0;
        }
        let mut v = Array2::zeros((rows, c));
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            v.slice_mut(ndarray::s![at..at + pv.nrows(), ..]).assign(pv);
            at += pv.nrows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(v, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "concat_cols",
                message: "no tensors to concatenate".into(),
            });
        }
        let r = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != r {
                return Err(AutodiffError::DimensionMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]),
                    right: s,
                });
            }
            cols += s.1;
        }
        let mut v = Array2::zeros((r, cols));
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            v.slice_mut(ndarray::s![.., at..at + pv.ncols()]).assign(pv);
            at += pv.ncols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(v, rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: TensorId, rows: usize, cols: usize) -> Result<TensorId, AutodiffError> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return Err(AutodiffError::InvalidArgument {
                op: "reshape",
                message: format!("cannot reshape {r}x{c} into {rows}x{cols}"),
            });
        }
        let v = Array2::from_shape_vec((rows, cols), self.value(a).iter().cloned().collect()).expect("element count checked");
        Ok(self.push(v, self.rg(a), Op::Reshape(a)))
    }

    /// `out[i*n + j] = a[i] + b[j]` over rows; `a: m x d`, `b: n x d`.
    pub fn pairwise_sum_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutodiffError> {
        let (m, d) = self.shape(a);
        let (n, d2) = self.shape(b);
        if d != d2 {
            return Err(AutodiffError::DimensionMismatch {
                op: "pairwise_sum_rows",
                left: (m, d),
                right: (n, d2),
            });
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut v = Array2::zeros((m * n, d));
        for i in 0..m {
            for j in 0..n {
                for k in 0..d {
                    v[[i * n + j, k]] = av[[i, k]] + bv[[j, k]];
                }
            }
        }
        Ok(self.push(v, self.rg(a) || self.rg(b), Op::PairwiseSumRows(a, b)))
    }

    /// `out[i] = sum_j w[i, j] * v[i*n + j]`; `w: m x n`, `v: (m*n) x d`.
    /// Exactly-zero weights are skipped so a zero-gated context contributes
    /// nothing to the accumulation at the bit level.
    pub fn weighted_pair_sum(&mut self, w: TensorId, v: TensorId) -> Result<TensorId, AutodiffError> {
        let (m, n) = self.shape(w);
        let (rows, d) = self.shape(v);
        if rows != m * n {
            return Err(AutodiffError::DimensionMismatch {
                op: "weighted_pair_sum",
                left: (m, n),
                right: (rows, d),
            });
        }
        let wv = self.value(w);
        let vv = self.value(v);
        let mut out = Array2::zeros((m, d));
        for i in 0..m {
            for j in 0..n {
                let wij = wv[[i, j]];
                if wij == 0.0 {
                    continue;
                }
                for k in 0..d {
                    out[[i, k]] += wij * vv[[i * n + j, k]];
                }
            }
        }
        Ok(self.push(out, self.rg(w) || self.rg(v), Op::WeightedPairSum(w, v)))
    }

    /// `max(x, min)` elementwise; gradient passes through only where `x > min`.
    pub fn clamp_min(&mut self, a: TensorId, min: f64) -> TensorId {
        let v = self.value(a).mapv(|x| x.max(min));
        self.push(v, self.rg(a), Op::ClampMin(a, min))
    }

    fn accumulate(&mut self, id: TensorId, delta: &Array2<f64>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let shape = dims(&self.nodes[id.0].value);
        let g = self.nodes[id.0]
            .grad
            .get_or_insert_with(|| Array2::zeros(shape));
        *g += delta;
    }

    /// Reverse sweep from a scalar loss node. Repeated calls accumulate into
    /// existing leaf gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), AutodiffError> {
        if self.shape(loss) != (1, 1) {
            return Err(AutodiffError::InvalidArgument {
                op: "backward",
                message: format!("loss must be scalar (1x1), got {:?}", self.shape(loss)),
            });
        }
        // Seed with the existing grad untouched: add 1 to the loss grad.
        let seed = Array2::from_elem((1, 1), 1.0);
        if !self.nodes[loss.0].requires_grad {
            return Ok(()); // loss independent of every leaf
        }
        // Local grads for the sweep; leaves accumulate into persistent grads.
        let mut local: Vec<Option<Array2<f64>>> = (0..=loss.0).map(|_| None).collect();
        local[loss.0] = Some(seed);
        for idx in (0..=loss.0).rev() {
            let g = match local[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            let mut send = |graph: &Graph, local: &mut Vec<Option<Array2<f64>>>, to: TensorId, delta: Array2<f64>| {
                if !graph.nodes[to.0].requires_grad {
                    return;
                }
                match &mut local[to.0] {
                    Some(acc) => *acc += &delta,
                    slot => *slot = Some(delta),
                }
            };
            match op {
                Op::Leaf => {
                    self.accumulate(TensorId(idx), &g.clone());
                    continue;
                }
                Op::Add(a, b) => {
                    let ga = reduce_to_shape(&g, self.shape(a));
                    let gb = reduce_to_shape(&g, self.shape(b));
                    send(self, &mut local, a, ga);
                    send(self, &mut local, b, gb);
                }
                Op::Sub(a, b) => {
                    let ga = reduce_to_shape(&g, self.shape(a));
                    let gb = reduce_to_shape(&g.mapv(|x| -x), self.shape(b));
                    send(self, &mut local, a, ga);
                    send(self, &mut local, b, gb);
                }
                Op::Mul(a, b) => {
                    let gb_full = broadcast_zip(&g, self.value(a), "mul", |x, y| x * y)?;
                    let ga_full = broadcast_zip(&g, self.value(b), "mul", |x, y| x * y)?;
                    send(self, &mut local, a, reduce_to_shape(&ga_full, self.shape(a)));
                    send(self, &mut local, b, reduce_to_shape(&gb_full, self.shape(b)));
                }
                Op::Div(a, b) => {
                    let ga_full = broadcast_zip(&g, self.value(b), "div", |x, y| x / y)?;
                    let av = self.value(a).clone();
                    let bv = self.value(b).clone();
                    let quotient = broadcast_zip(&av, &bv, "div", |x, y| x / (y * y))?;
                    let gb_full = broadcast_zip(&g, &quotient, "div", |x, y| -x * y)?;
                    send(self, &mut local, a, reduce_to_shape(&ga_full, self.shape(a)));
                    send(self, &mut local, b, reduce_to_shape(&gb_full, self.shape(b)));
                }
                Op::Neg(a) => send(self, &mut local, a, g.mapv(|x| -x)),
                Op::Scale(a, c) => send(self, &mut local, a, g.mapv(|x| x * c)),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(b).t());
                    let gb = self.value(a).t().dot(&g);
                    send(self, &mut local, a, ga);
                    send(self, &mut local, b, gb);
                }
                Op::MatMulNT(a, b) => {
                    let ga = g.dot(self.value(b));
                    let gb = g.t().dot(self.value(a));
                    send(self, &mut local, a, ga);
                    send(self, &mut local, b, gb);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[idx].value;
                    let d = broadcast_zip(&g, &y.mapv(|v| v * (1.0 - v)), "mul", |x, y| x * y)?;
                    send(self, &mut local, a, d);
                }
                Op::Gelu(a) => {
                    let d = broadcast_zip(&g, &self.value(a).mapv(gelu_grad_scalar), "mul", |x, y| x * y)?;
                    send(self, &mut local, a, d);
                }
                Op::Exp(a) => {
                    let y = self.nodes[idx].value.clone();
                    send(self, &mut local, a, &g * &y);
                }
                Op::Ln(a) => {
                    let d = &g / self.value(a);
                    send(self, &mut local, a, d);
                }
                Op::Abs(a) => {
                    let sign = self.value(a).mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    send(self, &mut local, a, &g * &sign);
                }
                Op::SoftmaxRows(a) | Op::MaskedSoftmaxRows(a, _) => {
                    let y = self.nodes[idx].value.clone();
                    let (r, c) = dims(&y);
                    let mut d = Array2::zeros((r, c));
                    for i in 0..r {
                        let dot: f64 = (0..c).map(|j| g[[i, j]] * y[[i, j]]).sum();
                        for j in 0..c {
                            d[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    send(self, &mut local, a, d);
                }
                Op::LayerNormRows {
                    x,
                    gain,
                    bias,
                    ref mean,
                    ref inv_std,
                } => {
                    let xv = self.value(x).clone();
                    let gv = self.value(gain).clone();
                    let (r, d) = dims(&xv);
                    let mut dx = Array2::zeros((r, d));
                    let mut dgain = Array2::zeros((1, d));
                    let mut dbias = Array2::zeros((1, d));
                    for i in 0..r {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        let mut hhat = vec![0.0; d];
                        let mut dh = vec![0.0; d];
                        for j in 0..d {
                            hhat[j] = (xv[[i, j]] - mean[i]) * inv_std[i];
                            dh[j] = g[[i, j]] * gv[[0, j]];
                            sum_dh += dh[j];
                            sum_dh_h += dh[j] * hhat[j];
                            dgain[[0, j]] += g[[i, j]] * hhat[j];
                            dbias[[0, j]] += g[[i, j]];
                        }
                        for j in 0..d {
                            dx[[i, j]] = inv_std[i] / d as f64 * (d as f64 * dh[j] - sum_dh - hhat[j] * sum_dh_h);
                        }
                    }
                    send(self, &mut local, x, dx);
                    send(self, &mut local, gain, dgain);
                    send(self, &mut local, bias, dbias);
                }
                Op::SumAll(a) => {
                    let s = g[[0, 0]];
                    let d = Array2::from_elem(self.shape(a), s);
                    send(self, &mut local, a, d);
                }
                Op::RowSum(a) => {
                    let (r, c) = self.shape(a);
                    let mut d = Array2::zeros((r, c));
                    for i in 0..r {
                        for j in 0..c {
                            d[[i, j]] = g[[i, 0]];
                        }
                    }
                    send(self, &mut local, a, d);
                }
                Op::SelectRows(a, ref indices) => {
                    let (r, c) = self.shape(a);
                    let mut d = Array2::zeros((r, c));
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..c {
                            d[[i, j]] += g[[k, j]];
                        }
                    }
                    send(self, &mut local, a, d);
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(a);
                    let mut d = Array2::zeros((r, c));
                    d.slice_mut(ndarray::s![.., start..start + g.ncols()]).assign(&g);
                    send(self, &mut local, a, d);
                }
                Op::ConcatRows(ref parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let rows = self.shape(p).0;
                        let d = g.slice(ndarray::s![at..at + rows, ..]).to_owned();
                        send(self, &mut local, p, d);
                        at += rows;
                    }
                }
                Op::ConcatCols(ref parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let cols = self.shape(p).1;
                        let d = g.slice(ndarray::s![.., at..at + cols]).to_owned();
                        send(self, &mut local, p, d);
                        at += cols;
                    }
                }
                Op::Reshape(a) => {
                    let (r, c) = self.shape(a);
                    let d = Array2::from_shape_vec((r, c), g.iter().cloned().collect()).expect("reshape grad");
                    send(self, &mut local, a, d);
                }
                Op::PairwiseSumRows(a, b) => {
                    let (m, d) = self.shape(a);
                    let (n, _) = self.shape(b);
                    let mut ga = Array2::zeros((m, d));
                    let mut gb = Array2::zeros((n, d));
                    for i in 0..m {
                        for j in 0..n {
                            for k in 0..d {
                                let gv = g[[i * n + j, k]];
                                ga[[i, k]] += gv;
                                gb[[j, k]] += gv;
                            }
                        }
                    }
                    send(self, &mut local, a, ga);
                    send(self, &mut local, b, gb);
                }
                Op::WeightedPairSum(w, v) => {
                    let (m, n) = self.shape(w);
                    let (_, d) = self.shape(v);
                    let wv = self.value(w).clone();
                    let vv = self.value(v).clone();
                    let mut gw = Array2::zeros((m, n));
                    let mut gv = Array2::zeros((m * n, d));
                    for i in 0..m {
                        for j in 0..n {
                            let mut dot = 0.0;
                            for k in 0..d {
                                dot += g[[i, k]] * vv[[i * n + j, k]];
                            }
                            gw[[i, j]] = dot;
                            let wij = wv[[i, j]];
                            if wij != 0.0 {
                                for k in 0..d {
                                    gv[[i * n + j, k]] = wij * g[[i, k]];
                                }
                            }
                        }
                    }
                    send(self, &mut local, w, gw);
                    send(self, &mut local, v, gv);
                }
                Op::ClampMin(a, min) => {
                    let mask = self.value(a).mapv(|x| if x > min { 1.0 } else { 0.0 });
                    send(self, &mut local, a, &g * &mask);
                }
            }
        }
        Ok(())
    }
}

/// Central-finite-difference gradient verification.
///
/// Builds the graph with `f` at `point`, runs backward, then compares every
/// leaf coordinate against `(f(x+eps) - f(x-eps)) / (2 eps)`. Returns the
/// max over coordinates of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(point: &[Array2<f64>], f: F, epsilon: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph, &[TensorId]) -> Result<TensorId, AutodiffError>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(AutodiffError::InvalidArgument {
            op: "grad_check",
            message: format!("epsilon {epsilon} outside [1e-7, 1e-3]"),
        });
    }
    let eval = |pt: &[Array2<f64>]| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = pt.iter().map(|a| g.constant(a.clone())).collect();
        let out = f(&mut g, &ids)?;
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(AutodiffError::NumericDomain {
                op: "grad_check",
                message: format!("non-finite evaluation {v}"),
            });
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let ids: Vec<TensorId> = point.iter().map(|a| g.leaf(a.clone())).collect();
    let out = f(&mut g, &ids)?;
    if g.shape(out) != (1, 1) {
        return Err(AutodiffError::InvalidArgument {
            op: "grad_check",
            message: "function must be scalar-valued".into(),
        });
    }
    g.backward(out)?;
    let analytic: Vec<Array2<f64>> = ids
        .iter()
        .zip(point)
        .map(|(&id, p)| g.grad(id).cloned().unwrap_or_else(|| Array2::zeros(dims(p))))
        .collect();

    let mut max_err: f64 = 0.0;
    let mut perturbed: Vec<Array2<f64>> = point.to_vec();
    for (ti, p) in point.iter().enumerate() {
        let (r, c) = dims(p);
        for i in 0..r {
            for j in 0..c {
                let orig = perturbed[ti][[i, j]];
                perturbed[ti][[i, j]] = orig + epsilon;
                let up = eval(&perturbed)?;
                perturbed[ti][[i, j]] = orig - epsilon;
                let down = eval(&perturbed)?;
                perturbed[ti][[i, j]] = orig;
                let numeric = (up - down) / (2.0 * epsilon);
                let a = analytic[ti][[i, j]];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                max_err = max_err.max((a - numeric).abs() / denom);
            }
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_mat(rng: &mut ChaCha20Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut g = Graph::new();
        let i = g.constant(array![[1.0, 0.0], [0.0, 1.0]]);
        let v = g.constant(array![[3.0], [4.0]]);
        let p = g.matmul(i, v).unwrap();
        assert_eq!(g.value(p), &array![[3.0], [4.0]]);

        let a = g.constant(array![[2.0]]);
        let b = g.constant(array![[3.0]]);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.scalar(c), 6.0);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Array2::zeros((2, 3)));
        let b = g.constant(Array2::zeros((2, 3)));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let a = rand_mat(&mut rng, 4, 3);
        let b = rand_mat(&mut rng, 3, 2);
        let err = grad_check(
            &[a, b],
            |g, ids| {
                let p = g.matmul(ids[0], ids[1])?;
                Ok(g.sum_all(p))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new();
        let x = g.constant(array![[0.0]]);
        let y = g.sigmoid(x);
        assert_eq!(g.scalar(y), 0.5);
    }

    #[test]
    fn hadamard_masks() {
        let mut g = Graph::new();
        let a = g.constant(array![[1.0, 2.0, 3.0]]);
        let m = g.constant(array![[0.0, 1.0, 0.0]]);
        let y = g.mul(a, m).unwrap();
        assert_eq!(g.value(y), &array![[0.0, 2.0, 0.0]]);
    }

    #[test]
    fn abs_gradient_signs() {
        for (x, expected) in [(2.0, 1.0), (-2.0, -1.0)] {
            let mut g = Graph::new();
            let v = g.leaf(array![[x]]);
            let a = g.abs(v);
            let s = g.sum_all(a);
            g.backward(s).unwrap();
            assert_eq!(g.grad(v).unwrap()[[0, 0]], expected);
        }
    }

    #[test]
    fn softmax_uniform_exact_and_stable() {
        let mut g = Graph::new();
        let c = g.constant(array![[5.0, 5.0, 5.0, 5.0]]);
        let y = g.softmax_rows(c).unwrap();
        for v in g.value(y) {
            assert!((v - 0.25).abs() < 1e-15);
        }

        let x = g.constant(array![[1f64.ln(), 3f64.ln()]]);
        let y = g.softmax_rows(x).unwrap();
        assert!((g.value(y)[[0, 0]] - 0.25).abs() < 1e-12);
        assert!((g.value(y)[[0, 1]] - 0.75).abs() < 1e-12);

        let big = g.constant(array![[1000.0, 0.0]]);
        let y = g.softmax_rows(big).unwrap();
        assert!(g.value(y).iter().all(|v| v.is_finite()));
        assert!(g.value(y)[[0, 0]] > 0.999999);
    }

    #[test]
    fn softmax_empty_axis_errors() {
        let mut g = Graph::new();
        let x = g.constant(Array2::zeros((2, 0)));
        assert!(g.softmax_rows(x).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(array![[3.0, 3.0, 3.0, 3.0]]);
        let gain = g.constant(Array2::ones((1, 4)));
        let bias = g.constant(Array2::zeros((1, 4)));
        let y = g.layer_norm_rows(x, gain, bias).unwrap();
        for v in g.value(y) {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_already_normalized() {
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, -1.0]]);
        let gain = g.constant(Array2::ones((1, 2)));
        let bias = g.constant(Array2::zeros((1, 2)));
        let y = g.layer_norm_rows(x, gain, bias).unwrap();
        assert!((g.value(y)[[0, 0]] - 1.0).abs() < 1e-4);
        assert!((g.value(y)[[0, 1]] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let x = rand_mat(&mut rng, 3, 4);
        let gain = rand_mat(&mut rng, 1, 4);
        let bias = rand_mat(&mut rng, 1, 4);
        let probe = rand_mat(&mut rng, 3, 4);
        let err = grad_check(
            &[x, gain, bias],
            |g, ids| {
                let y = g.layer_norm_rows(ids[0], ids[1], ids[2])?;
                let p = g.constant(probe.clone());
                let m = g.mul(y, p)?;
                Ok(g.sum_all(m))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn backward_square_and_l1() {
        let mut g = Graph::new();
        let x = g.leaf(array![[3.0]]);
        let sq = g.mul(x, x).unwrap();
        g.backward(sq).unwrap();
        assert_eq!(g.grad(x).unwrap()[[0, 0]], 6.0);

        let mut g = Graph::new();
        let x = g.leaf(array![[1.0, -2.0]]);
        let a = g.abs(x);
        let s = g.sum_all(a);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &array![[1.0, -1.0]]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(array![[1.0, 2.0]]);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn backward_accumulates_on_repeat() {
        let mut g = Graph::new();
        let x = g.leaf(array![[3.0]]);
        let sq = g.mul(x, x).unwrap();
        g.backward(sq).unwrap();
        g.backward(sq).unwrap();
        assert_eq!(g.grad(x).unwrap()[[0, 0]], 12.0);
    }

    #[test]
    fn independent_leaf_gets_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(array![[2.0]]);
        let unused = g.leaf(array![[5.0]]);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(unused).is_none());
    }

    #[test]
    fn grad_check_simple_square() {
        let err = grad_check(
            &[array![[1.0]]],
            |g, ids| g.mul(ids[0], ids[0]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn grad_check_softmax_dot() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x = rand_mat(&mut rng, 1, 6);
        let w = rand_mat(&mut rng, 1, 6);
        let err = grad_check(
            &[x],
            |g, ids| {
                let s = g.softmax_rows(ids[0])?;
                let wc = g.constant(w.clone());
                let m = g.mul(s, wc)?;
                Ok(g.sum_all(m))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "err {err}");
    }

    #[test]
    fn grad_check_epsilon_bounds() {
        assert!(grad_check(&[array![[1.0]]], |g, ids| g.mul(ids[0], ids[0]), 1e-2).is_err());
    }

    /// Every registered op passes grad_check on random small instances.
    #[test]
    fn all_ops_pass_grad_check() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        for trial in 0..20 {
            let a = rand_mat(&mut rng, 3, 4);
            let b = rand_mat(&mut rng, 3, 4);
            // keep abs away from the kink at 0
            let a_abs = a.mapv(|x| if x.abs() < 1e-3 { x + 0.01 } else { x });
            let pos = a.mapv(|x| x.abs() + 0.5);
            let w34 = rand_mat(&mut rng, 3, 4);
            let w43 = rand_mat(&mut rng, 4, 3);
            let pair_b = rand_mat(&mut rng, 2, 4);
            let weights = rand_mat(&mut rng, 3, 2);
            let pair_v = rand_mat(&mut rng, 6, 4);

            let cases: Vec<(&str, f64)> = vec![
                ("add", grad_check(&[a.clone(), b.clone()], |g, ids| { let y = g.add(ids[0], ids[1])?; Ok(g.sum_all(y)) }, 1e-5).unwrap()),
                ("sub", grad_check(&[a.clone(), b.clone()], |g, ids| { let y = g.sub(ids[0], ids[1])?; Ok(g.sum_all(y)) }, 1e-5).unwrap()),
                ("mul", grad_check(&[a.clone(), b.clone()], |g, ids| { let y = g.mul(ids[0], ids[1])?; Ok(g.sum_all(y)) }, 1e-5).unwrap()),
                ("div", grad_check(&[a.clone(), pos.clone()], |g, ids| { let y = g.div(ids[0], ids[1])?; Ok(g.sum_all(y)) }, 1e-5).unwrap()),
                ("neg", grad_check(&[a.clone()], |g, ids| { let y = g.neg(ids[0]); Ok(g.sum_all(y)) }, 1e-5).unwrap()),
                ("scale", grad_check(&[a.clone()], |g, ids| { let y = g.scale(ids[0], 2.5); Ok(g.sum_all(y)) }, 1e-5).unwrap()),
                ("matmul", grad_check(&[a.clone(), w43.clone()], |g, ids| { let y = g.matmul(ids[0], ids[1])?; Ok(g.sum_all(y)) }, 1e-5).unwrap()),
                ("matmul_nt", grad_check(&[a.clone(), w34.clone()], |g, ids| { let y = g.matmul_nt(ids[0], ids[1])?; Ok(g.sum_all(y)) }, 1e-5).unwrap()),
                ("sigmoid", grad_check(&[a.clone()], |g, ids| { let y = g.sigmoid(ids[0]); Ok(g.sum_all(y)) }, 1e-5).unwrap()),
                ("gelu", grad_check(&[a.clone()], |g, ids| { let y = g.gelu(ids[0]); Ok(g.sum_all(y)) }, 1e-5).unwrap()),
                ("exp", grad_check(&[a.clone()], |g, ids| { let y = g.exp(ids[0]); Ok(g.sum_all(y)) }, 1e-5).unwrap()),
                ("ln", grad_check(&[pos.clone()], |g, ids| { let y = g.ln(ids[0])?; Ok(g.sum_all(y)) }, 1e-5).unwrap()),
                ("abs", grad_check(&[a_abs.clone()], |g, ids| { let y = g.abs(ids[0]); Ok(g.sum_all(y)) }, 1e-5).unwrap()),
                ("softmax", grad_check(&[a.clone()], |g, ids| { let y = g.softmax_rows(ids[0])?; let p = g.constant(w34.clone()); let m = g.mul(y, p)?; Ok(g.sum_all(m)) }, 1e-5).unwrap()),
                ("row_sum", grad_check(&[a.clone()], |g, ids| { let y = g.row_sum(ids[0]); let sq = g.mul(y, y)?; Ok(g.sum_all(sq)) }, 1e-5).unwrap()),
                ("select_rows", grad_check(&[a.clone()], |g, ids| { let y = g.select_rows(ids[0], &[2, 0, 0])?; let sq = g.mul(y, y)?; Ok(g.sum_all(sq)) }, 1e-5).unwrap()),
                ("slice_cols", grad_check(&[a.clone()], |g, ids| { let y = g.slice_cols(ids[0], 1, 2)?; let sq = g.mul(y, y)?; Ok(g.sum_all(sq)) }, 1e-5).unwrap()),
                ("concat", grad_check(&[a.clone(), b.clone()], |g, ids| { let r = g.concat_rows(&[ids[0], ids[1]])?; let c = g.concat_cols(&[ids[0], ids[1]])?; let s1 = g.mul(r, r)?; let s2 = g.mul(c, c)?; let t1 = g.sum_all(s1); let t2 = g.sum_all(s2); g.add(t1, t2) }, 1e-5).unwrap()),
                ("reshape", grad_check(&[a.clone()], |g, ids| { let y = g.reshape(ids[0], 4, 3)?; let sq = g.mul(y, y)?; Ok(g.sum_all(sq)) }, 1e-5).unwrap()),
                ("pairwise_sum", grad_check(&[a.clone(), pair_b.clone()], |g, ids| { let y = g.pairwise_sum_rows(ids[0], ids[1])?; let sq = g.mul(y, y)?; Ok(g.sum_all(sq)) }, 1e-5).unwrap()),
                ("weighted_pair_sum", grad_check(&[weights.clone(), pair_v.clone()], |g, ids| { let y = g.weighted_pair_sum(ids[0], ids[1])?; let sq = g.mul(y, y)?; Ok(g.sum_all(sq)) }, 1e-5).unwrap()),
                ("clamp_min", grad_check(&[pos.clone()], |g, ids| { let y = g.clamp_min(ids[0], 0.1); let sq = g.mul(y, y)?; Ok(g.sum_all(sq)) }, 1e-5).unwrap()),
                ("masked_softmax", grad_check(&[a.clone()], |g, ids| {
                    let mask = array![[1.0, 0.0, 1.0, 1.0], [0.0, 1.0, 1.0, 0.0], [1.0, 1.0, 1.0, 1.0]];
                    let y = g.masked_softmax_rows(ids[0], mask)?;
                    let p = g.constant(w34.clone());
                    let m = g.mul(y, p)?;
                    Ok(g.sum_all(m))
                }, 1e-5).unwrap()),
            ];
            for (name, err) in cases {
                assert!(err < 1e-4, "trial {trial}, op {name}: max rel err {err}");
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha20Rng::seed_from_u64(99);
            let a = rand_mat(&mut rng, 5, 5);
            let b = rand_mat(&mut rng, 5, 5);
            let mut g = Graph::new();
            let ia = g.constant(a);
            let ib = g.constant(b);
            let m = g.matmul(ia, ib).unwrap();
            let s = g.softmax_rows(m).unwrap();
            g.value(s).clone()
        };
        let x = run();
        let y = run();
        assert_eq!(x, y);
    }

    #[test]
    fn masked_softmax_excluded_entries_inert() {
        // Perturbing a masked-out score leaves every other output bit unchanged.
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let scores = rand_mat(&mut rng, 2, 5);
        let mask = array![[1.0, 0.0, 1.0, 1.0, 0.0], [1.0, 1.0, 0.0, 1.0, 1.0]];
        let mut g = Graph::new();
        let s = g.constant(scores.clone());
        let y1 = g.masked_softmax_rows(s, mask.clone()).unwrap();
        let out1 = g.value(y1).clone();

        let mut scores2 = scores;
        scores2[[0, 1]] += 1234.5;
        let mut g2 = Graph::new();
        let s2 = g2.constant(scores2);
        let y2 = g2.masked_softmax_rows(s2, mask).unwrap();
        let out2 = g2.value(y2).clone();
        for (a, b) in out1.iter().zip(out2.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 2..24)) {
                let n = vals.len();
                let mut g = Graph::new();
                let x = g.constant(Array2::from_shape_vec((1, n), vals).unwrap());
                let y = g.softmax_rows(x).unwrap();
                let sum: f64 = g.value(y).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(g.value(y).iter().all(|v| *v > 0.0));
            }

            #[test]
            fn softmax_shift_invariant(vals in proptest::collection::vec(-10.0f64..10.0, 2..12), shift in -100.0f64..100.0) {
                let n = vals.len();
                let mut g = Graph::new();
                let x = g.constant(Array2::from_shape_vec((1, n), vals.clone()).unwrap());
                let y1 = g.softmax_rows(x).unwrap();
                let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
                let xs = g.constant(Array2::from_shape_vec((1, n), shifted).unwrap());
                let y2 = g.softmax_rows(xs).unwrap();
                for (a, b) in g.value(y1).iter().zip(g.value(y2).iter()) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }
}
