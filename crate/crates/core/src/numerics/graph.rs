//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape index is already a
//! topological order and `backward` is a single reverse sweep.
//!
//! Gradient contract: every call to [`Graph::backward`] recomputes the
//! gradients of interior nodes from scratch and **adds** the result into the
//! leaf gradient buffers. Calling it twice on the same loss therefore doubles
//! the leaf gradients. Callers that want fresh gradients build a new graph
//! (the training loop does this every step) and zero parameter buffers in the
//! optimizer step.

use super::tensor::{matmul_a_bt, matmul_at_b, matmul_raw, Tensor};
use crate::error::{Error, Result};

/// Epsilon floor used in norm denominators.
pub const NORM_EPS: f64 = 1e-8;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        floored: Vec<bool>,
    },
    Transpose(Var),
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    PickMean(Var, Vec<usize>),
    L2NormalizeRows {
        a: Var,
        norms: Vec<f64>,
    },
    Cosine {
        a: Var,
        b: Var,
        na: f64,
        nb: f64,
        dot: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Exp(..) => "exp",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Transpose(..) => "transpose",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SelectRows(..) => "select_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::PickMean(..) => "pick_mean",
            Op::L2NormalizeRows { .. } => "l2_normalize",
            Op::Cosine { .. } => "cosine_similarity",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered record of the operations of one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its `requires_grad` flag is taken from the tensor.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: Tensor::new(t.shape().to_vec(), t.into_data()).expect("shape already valid"),
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Copies a parameter into the graph as a leaf.
    pub fn param(&mut self, p: &Tensor) -> Var {
        let t = Tensor::new(p.shape().to_vec(), p.data().to_vec())
            .expect("shape already valid")
            .with_requires_grad(p.requires_grad());
        self.leaf(t)
    }

    /// Copies a tensor as a leaf with an explicit gradient flag.
    pub fn param_with(&mut self, p: &Tensor, trainable: bool) -> Var {
        let t = Tensor::new(p.shape().to_vec(), p.data().to_vec())
            .expect("shape already valid")
            .with_requires_grad(trainable);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{} (element {bad} = {})",
                op.name(),
                data[bad]
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::new(shape, data)?,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: [{m},{k}] x [{k2},{n}]"
            )));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let shape = self.value(a).shape().to_vec();
        self.push(shape, out, Op::Add(a, b), &[a, b])
    }

    /// `a[r, :] + row` for every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let (rr, rc) = self.dims(row)?;
        if rr != 1 || rc != c {
            return Err(Error::dim(format!(
                "add_row: row of shape [{rr},{rc}] for matrix [{r},{c}]"
            )));
        }
        let rowv = self.value(row).data();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + rowv[i % c])
            .collect();
        self.push(vec![r, c], out, Op::AddRow(a, row), &[a, row])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let shape = self.value(a).shape().to_vec();
        self.push(shape, out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let shape = self.value(a).shape().to_vec();
        self.push(shape, out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).data().iter().map(|x| x * s).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(shape, out, Op::Scale(a, s), &[a])
    }

    /// Multiplies every element of `a` by the one-element node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self
            .value(s)
            .item()
            .map_err(|_| Error::dim("scale_by expects a one-element scale"))?;
        let out = self.value(a).data().iter().map(|x| x * sv).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(shape, out, Op::ScaleBy(a, s), &[a, s])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).data().iter().map(|x| x.exp()).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(shape, out, Op::Exp(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(shape, out, Op::Relu(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(shape, out, Op::Gelu(a), &[a])
    }

    /// Softmax along `axis`. For 2-D inputs axis 1 is the row direction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let rank = self.value(a).shape().len();
        match (rank, axis) {
            (1, 0) | (2, 1) => self.softmax_rows(a),
            (2, 0) => {
                let t = self.transpose(a)?;
                let s = self.softmax_rows(t)?;
                self.transpose(s)
            }
            _ => Err(Error::dim(format!("softmax axis {axis} for rank {rank}"))),
        }
    }

    /// Softmax of every row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if c == 0 || r == 0 {
            return Err(Error::dim("softmax over an empty axis"));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(r * c);
        for row in x.chunks(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut sum = 0.0;
            for v in row {
                let e = (v - max).exp();
                sum += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= sum);
        }
        let shape = self.value(a).shape().to_vec();
        self.push(shape, out, Op::Softmax(a), &[a])
    }

    /// Log-softmax of every row.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if c == 0 || r == 0 {
            return Err(Error::dim("log_softmax over an empty axis"));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(r * c);
        for row in x.chunks(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let shape = self.value(a).shape().to_vec();
        self.push(shape, out, Op::LogSoftmax(a), &[a])
    }

    /// Row-wise layer normalization with affine `gain` and `bias` rows.
    ///
    /// The variance is floored at [`NORM_EPS`], so a constant row maps to
    /// `bias` instead of raising an error.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if c < 2 {
            return Err(Error::dim(
                "layer_norm needs a last dimension of at least 2",
            ));
        }
        for (name, v) in [("gain", gain), ("bias", bias)] {
            let d = self.dims(v)?;
            if d != (1, c) {
                return Err(Error::dim(format!(
                    "layer_norm {name} has shape {d:?}, want (1, {c})"
                )));
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let mut floored = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in xv.chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is_floored = var < NORM_EPS;
            let istd = 1.0 / var.max(NORM_EPS).sqrt();
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * istd;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
            inv_std.push(istd);
            floored.push(is_floored);
        }
        let shape = self.value(x).shape().to_vec();
        self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                floored,
            },
            &[x, gain, bias],
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        self.push(vec![c, r], out, Op::Transpose(a), &[a])
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if start + len > c || len == 0 {
            return Err(Error::dim(format!(
                "slice_cols {start}..{} out of {c} columns",
                start + len
            )));
        }
        let x = self.value(a).data();
        let out = (0..r)
            .flat_map(|i| x[i * c + start..i * c + start + len].iter().copied())
            .collect();
        self.push(vec![r, len], out, Op::SliceCols { a, start }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_cols of nothing"));
        }
        let rows = self.dims(parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if r != rows {
                return Err(Error::dim(format!("concat_cols: {r} rows vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(
            vec![rows, total],
            out,
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_rows of nothing"));
        }
        let cols = self.dims(parts[0])?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if c != cols {
                return Err(Error::dim(format!("concat_rows: {c} columns vs {cols}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Gathers rows by index; repeated indices are allowed.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::dim(format!("select_rows: row {bad} of {r}")));
        }
        if rows.is_empty() {
            return Err(Error::dim("select_rows with no rows"));
        }
        let x = self.value(a).data();
        let out = rows
            .iter()
            .flat_map(|&i| x[i * c..(i + 1) * c].iter().copied())
            .collect();
        self.push(
            vec![rows.len(), c],
            out,
            Op::SelectRows(a, rows.to_vec()),
            &[a],
        )
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.select_rows(a, &[i])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(vec![1, 1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a).data();
        if x.is_empty() {
            return Err(Error::dim("mean of an empty tensor"));
        }
        let m = x.iter().sum::<f64>() / x.len() as f64;
        self.push(vec![1, 1], vec![m], Op::Mean(a), &[a])
    }

    /// `mean_i a[i, cols[i]]`, one pick per row.
    pub fn pick_mean(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if cols.len() != r || r == 0 {
            return Err(Error::dim(format!(
                "pick_mean: {} picks for {r} rows",
                cols.len()
            )));
        }
        if let Some(bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::dim(format!("pick_mean: column {bad} of {c}")));
        }
        let x = self.value(a).data();
        let m = cols
            .iter()
            .enumerate()
            .map(|(i, &j)| x[i * c + j])
            .sum::<f64>()
            / r as f64;
        self.push(vec![1, 1], vec![m], Op::PickMean(a, cols.to_vec()), &[a])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Divides each row by `max(||row||, NORM_EPS)`.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (_, c) = self.dims(a)?;
        let x = self.value(a).data();
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = n.max(NORM_EPS);
            out.extend(row.iter().map(|v| v / d));
            norms.push(n);
        }
        let shape = self.value(a).shape().to_vec();
        self.push(shape, out, Op::L2NormalizeRows { a, norms }, &[a])
    }

    /// Cosine similarity of two equal-length vectors as a one-element node.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims(a)?;
        let (rb, cb) = self.dims(b)?;
        if ra != 1 || rb != 1 || ca != cb || ca == 0 {
            return Err(Error::dim(format!(
                "cosine_similarity of [{ra},{ca}] and [{rb},{cb}]"
            )));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let na = av.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = bv.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::degenerate("cosine similarity of a zero-norm vector"));
        }
        let (na, nb) = (na.max(NORM_EPS), nb.max(NORM_EPS));
        let dot: f64 = av.iter().zip(bv).map(|(x, y)| x * y).sum();
        let value = (dot / (na * nb)).clamp(-1.0, 1.0);
        self.push(
            vec![1, 1],
            vec![value],
            Op::Cosine { a, b, na, nb, dot },
            &[a, b],
        )
    }

    /// Reverse sweep from the one-element node `loss`.
    ///
    /// Every node that requires a gradient and is reachable from `loss` is
    /// visited once; leaf gradients are accumulated (see module docs).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Contract(
                "loss is not connected to any tensor that requires a gradient".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let buf = self.nodes[i].grad.get_or_insert_with(|| vec![0.0; g.len()]);
                for (b, v) in buf.iter_mut().zip(&g) {
                    *b += v;
                }
                continue;
            }
            let node = &self.nodes[i];
            let mut contribs: Vec<(Var, Vec<f64>)> = Vec::new();
            match &node.op {
                Op::Leaf => unreachable!("leaves handled above"),
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(*a)?;
                    let n = self.dims(*b)?.1;
                    if self.requires_grad(*a) {
                        contribs.push((*a, matmul_a_bt(&g, self.value(*b).data(), m, n, k)));
                    }
                    if self.requires_grad(*b) {
                        contribs.push((*b, matmul_at_b(self.value(*a).data(), &g, m, k, n)));
                    }
                }
                Op::Add(a, b) => {
                    contribs.push((*a, g.clone()));
                    contribs.push((*b, g));
                }
                Op::AddRow(a, row) => {
                    let c = self.dims(*a)?.1;
                    let mut gr = vec![0.0; c];
                    for (j, v) in g.iter().enumerate() {
                        gr[j % c] += v;
                    }
                    contribs.push((*row, gr));
                    contribs.push((*a, g));
                }
                Op::Sub(a, b) => {
                    contribs.push((*b, g.iter().map(|v| -v).collect()));
                    contribs.push((*a, g));
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    contribs.push((*a, g.iter().zip(bv).map(|(x, y)| x * y).collect()));
                    contribs.push((*b, g.iter().zip(av).map(|(x, y)| x * y).collect()));
                }
                Op::Scale(a, s) => contribs.push((*a, g.iter().map(|v| v * s).collect())),
                Op::ScaleBy(a, s) => {
                    let sv = self.value(*s).data()[0];
                    let av = self.value(*a).data();
                    let gs: f64 = g.iter().zip(av).map(|(x, y)| x * y).sum();
                    contribs.push((*s, vec![gs]));
                    contribs.push((*a, g.iter().map(|v| v * sv).collect()));
                }
                Op::Exp(a) => {
                    let y = node.value.data();
                    contribs.push((*a, g.iter().zip(y).map(|(x, y)| x * y).collect()));
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    contribs.push((
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                            .collect(),
                    ));
                }
                Op::Gelu(a) => {
                    let x = self.value(*a).data();
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(gv, &xv)| {
                            let t = (GELU_C * (xv + GELU_K * xv * xv * xv)).tanh();
                            let dydx = 0.5 * (1.0 + t)
                                + 0.5
                                    * xv
                                    * (1.0 - t * t)
                                    * GELU_C
                                    * (1.0 + 3.0 * GELU_K * xv * xv);
                            gv * dydx
                        })
                        .collect();
                    contribs.push((*a, d));
                }
                Op::Softmax(a) => {
                    let c = self.dims(*a)?.1;
                    let y = node.value.data();
                    let mut d = vec![0.0; y.len()];
                    for ((dr, yr), gr) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] = yr[j] * (gr[j] - s);
                        }
                    }
                    contribs.push((*a, d));
                }
                Op::LogSoftmax(a) => {
                    let c = self.dims(*a)?.1;
                    let y = node.value.data();
                    let mut d = vec![0.0; y.len()];
                    for ((dr, yr), gr) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..c {
                            dr[j] = gr[j] - yr[j].exp() * s;
                        }
                    }
                    contribs.push((*a, d));
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                    floored,
                } => {
                    let c = self.dims(*x)?.1;
                    let gv = self.value(*gain).data();
                    let mut dgain = vec![0.0; c];
                    let mut dbias = vec![0.0; c];
                    let mut dx = vec![0.0; g.len()];
                    for (r, ((gr, hr), dxr)) in g
                        .chunks(c)
                        .zip(xhat.chunks(c))
                        .zip(dx.chunks_mut(c))
                        .enumerate()
                    {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..c {
                            dgain[j] += gr[j] * hr[j];
                            dbias[j] += gr[j];
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= c as f64;
                        mean_dh_h /= c as f64;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            dxr[j] = if floored[r] {
                                inv_std[r] * (dh - mean_dh)
                            } else {
                                inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h)
                            };
                        }
                    }
                    contribs.push((*x, dx));
                    contribs.push((*gain, dgain));
                    contribs.push((*bias, dbias));
                }
                Op::Transpose(a) => {
                    let (r, c) = self.dims(*a)?;
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] = g[j * r + i];
                        }
                    }
                    contribs.push((*a, d));
                }
                Op::SliceCols { a, start } => {
                    let (r, c) = self.dims(*a)?;
                    let len = node.value.dims2()?.1;
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        d[i * c + start..i * c + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    contribs.push((*a, d));
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.dims2()?.1;
                    let rows = node.value.dims2()?.0;
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.dims(p)?.1;
                        let mut d = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            d.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        offset += w;
                        contribs.push((p, d));
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).numel();
                        contribs.push((p, g[offset..offset + n].to_vec()));
                        offset += n;
                    }
                }
                Op::SelectRows(a, rows) => {
                    let (r, c) = self.dims(*a)?;
                    let mut d = vec![0.0; r * c];
                    for (k, &i) in rows.iter().enumerate() {
                        for j in 0..c {
                            d[i * c + j] += g[k * c + j];
                        }
                    }
                    contribs.push((*a, d));
                }
                Op::Sum(a) => {
                    let n = self.value(*a).numel();
                    contribs.push((*a, vec![g[0]; n]));
                }
                Op::Mean(a) => {
                    let n = self.value(*a).numel();
                    contribs.push((*a, vec![g[0] / n as f64; n]));
                }
                Op::PickMean(a, cols) => {
                    let (r, c) = self.dims(*a)?;
                    let mut d = vec![0.0; r * c];
                    for (i, &j) in cols.iter().enumerate() {
                        d[i * c + j] += g[0] / r as f64;
                    }
                    contribs.push((*a, d));
                }
                Op::L2NormalizeRows { a, norms } => {
                    let c = self.dims(*a)?.1;
                    let y = node.value.data();
                    let mut d = vec![0.0; y.len()];
                    for (r, ((dr, yr), gr)) in d
                        .chunks_mut(c)
                        .zip(y.chunks(c))
                        .zip(g.chunks(c))
                        .enumerate()
                    {
                        if norms[r] < NORM_EPS {
                            for j in 0..c {
                                dr[j] = gr[j] / NORM_EPS;
                            }
                        } else {
                            let yg: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                dr[j] = (gr[j] - yr[j] * yg) / norms[r];
                            }
                        }
                    }
                    contribs.push((*a, d));
                }
                Op::Cosine { a, b, na, nb, dot } => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let c = dot / (na * nb);
                    let da = av
                        .iter()
                        .zip(bv)
                        .map(|(x, y)| g[0] * (y / (na * nb) - c * x / (na * na)))
                        .collect();
                    let db = av
                        .iter()
                        .zip(bv)
                        .map(|(x, y)| g[0] * (x / (na * nb) - c * y / (nb * nb)))
                        .collect();
                    contribs.push((*a, da));
                    contribs.push((*b, db));
                }
            }

            for (v, d) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(d),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, shape: Vec<usize>, data: Vec<f64>) -> Var {
        g.leaf(Tensor::new(shape, data).unwrap().with_requires_grad(true))
    }

    #[test]
    fn identity_matmul_and_hand_product() {
        let mut g = Graph::new();
        let i3 = g.constant(Tensor::identity(3));
        let a = g.constant(Tensor::matrix(3, 3, (1..=9).map(f64::from).collect()).unwrap());
        let p = g.matmul(i3, a).unwrap();
        assert_eq!(g.value(p).data(), g.value(a).data());

        let x = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.constant(Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap());
        let z = g.matmul(x, y).unwrap();
        assert_eq!(g.value(z).shape(), &[2, 1]);
        assert_eq!(g.value(z).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::row(vec![0.0, 0.0, 0.0]));
        let s = g.softmax(z, 1).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        for c in [-40.0, 0.0, 3.5, 700.0] {
            let z = g.constant(Tensor::row(vec![c, c + 2f64.ln()]));
            let s = g.softmax(z, 1).unwrap();
            let d = g.value(s).data();
            assert!((d[0] - 1.0 / 3.0).abs() < 1e-12, "{c}: {d:?}");
            assert!((d[1] - 2.0 / 3.0).abs() < 1e-12);
        }
        // scalar-formula oracle
        let z = g.constant(Tensor::row(vec![0.5, 0.1]));
        let s = g.softmax(z, 1).unwrap();
        let denom = 0.5f64.exp() + 0.1f64.exp();
        assert!((g.value(s).data()[0] - 0.5f64.exp() / denom).abs() < 1e-15);
        assert!((g.value(s).data()[1] - 0.1f64.exp() / denom).abs() < 1e-15);

        let e = g.constant(Tensor::zeros(vec![1, 0]));
        assert!(matches!(g.softmax(e, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_axis_zero_normalizes_columns() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 0.0, -1.0, 5.0]).unwrap());
        let s = g.softmax(z, 0).unwrap();
        let d = g.value(s).data();
        for j in 0..3 {
            assert!((d[j] + d[3 + j] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_examples() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::row(vec![0.3, -2.0, 5.0]));
        let c = g.cosine_similarity(v, v).unwrap();
        assert!((g.scalar(c).unwrap() - 1.0).abs() < 1e-15);
        let e1 = g.constant(Tensor::row(vec![1.0, 0.0]));
        let e2 = g.constant(Tensor::row(vec![0.0, 1.0]));
        let c = g.cosine_similarity(e1, e2).unwrap();
        assert_eq!(g.scalar(c).unwrap(), 0.0);
        let z = g.constant(Tensor::row(vec![0.0, 0.0]));
        assert!(matches!(
            g.cosine_similarity(e1, z),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::row(vec![1.0; 4]));
        let bias = g.constant(Tensor::row(vec![0.0; 4]));
        let x = g.constant(Tensor::row(vec![5.0; 4]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);

        let gain = g.constant(Tensor::row(vec![1.0; 2]));
        let bias = g.constant(Tensor::row(vec![0.0; 2]));
        let x = g.constant(Tensor::row(vec![1.0, -1.0]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        // mean 0, variance 1 already: the row is unchanged.
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-12);
        assert!((g.value(y).data()[1] + 1.0).abs() < 1e-12);

        let one = g.constant(Tensor::row(vec![1.0]));
        let b1 = g.constant(Tensor::row(vec![0.0]));
        assert!(g.layer_norm(one, one, b1).is_err());
    }

    #[test]
    fn backward_sum_and_dot() {
        let mut g = Graph::new();
        let p = leaf(&mut g, vec![1, 3], vec![1.0, -2.0, 0.5]);
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let p = leaf(&mut g, vec![1, 3], vec![1.0, -2.0, 0.5]);
        let d = g.dot(p, p).unwrap();
        g.backward(d).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut g = Graph::new();
        let p = leaf(&mut g, vec![1, 2], vec![1.0, 2.0]);
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_disconnected() {
        let mut g = Graph::new();
        let p = leaf(&mut g, vec![1, 2], vec![1.0, 2.0]);
        assert!(matches!(g.backward(p), Err(Error::Contract(_))));
        let c = g.constant(Tensor::row(vec![1.0, 2.0]));
        let s = g.sum(c).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_leaves_are_untouched() {
        let mut g = Graph::new();
        let p = leaf(&mut g, vec![1, 2], vec![1.0, 2.0]);
        let q = leaf(&mut g, vec![1, 2], vec![3.0, 4.0]);
        let s = g.sum(p).unwrap();
        let _other = g.sum(q).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(q).is_none());
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![1000.0]));
        assert!(matches!(g.exp(x), Err(Error::NonFinite(_))));
    }
}
