//! Reverse-mode differentiation over a linear operation tape.
//!
//! A `Tape` records every executed operation in order; `backward` walks the
//! record once in reverse and accumulates exact analytic gradients into every
//! ancestor that requires them. A tape lives for one forward/backward pass and
//! is confined to a single thread; parameter tensors themselves are plain
//! values that can be shared freely for inference.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Probabilities fed to the cross-entropy are clamped to this band so the
/// loss stays finite; inside the clamp the gradient is zero.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    ScalarMul(TensorId, f64),
    ScalarAdd(TensorId),
    MatMul(TensorId, TensorId),
    Transpose(TensorId),
    ConcatCols(Vec<TensorId>),
    ConcatRows(Vec<TensorId>),
    SliceCols(TensorId, usize, usize),
    Row(TensorId, usize),
    PadTo(TensorId),
    AddRowBroadcast(TensorId, TensorId),
    Sigmoid(TensorId),
    Tanh(TensorId),
    Relu(TensorId),
    RowSoftmaxMasked {
        x: TensorId,
        mask: Rc<Vec<bool>>,
    },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        rstd: Vec<f64>,
        normed: Vec<f64>,
    },
    SumAxis0(TensorId),
    MeanAll(TensorId),
    Bce {
        prob: TensorId,
        target: f64,
        clamped: bool,
    },
    L1Masked {
        x: TensorId,
        mask: Rc<Vec<bool>>,
        count: usize,
    },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, needs_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            needs_grad,
            op,
        });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        let n = self.node(id);
        (n.rows, n.cols)
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.node(id).value
    }

    pub fn value_at(&self, id: TensorId, r: usize, c: usize) -> f64 {
        let n = self.node(id);
        n.value[r * n.cols + c]
    }

    /// Scalar convenience: value of a `1x1` node.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.node(id).value.len(), 1);
        self.node(id).value[0]
    }

    pub fn to_tensor(&self, id: TensorId) -> Tensor {
        let n = self.node(id);
        Tensor {
            rows: n.rows,
            cols: n.cols,
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Gradient accumulated at `id` by the last `backward` call.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Adds the accumulated gradient at `id` into `param.grad`.
    pub fn accumulate_into(&self, id: TensorId, param: &mut Tensor) {
        if let Some(g) = self.grad(id) {
            param.accumulate_grad(g);
        }
    }

    // ---- node constructors -------------------------------------------------

    /// Copies a tensor onto the tape as a leaf; gradient flows back to it iff
    /// `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor) -> TensorId {
        self.push(
            tensor.rows,
            tensor.cols,
            tensor.data.clone(),
            tensor.requires_grad,
            Op::Leaf,
        )
    }

    /// A non-differentiable leaf built in place.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<TensorId> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "constant data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        Ok(self.push(rows, cols, data, false, Op::Leaf))
    }

    pub fn scalar_constant(&mut self, v: f64) -> TensorId {
        self.push(1, 1, vec![v], false, Op::Leaf)
    }

    // ---- elementwise -------------------------------------------------------

    fn check_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.rows != nb.rows || na.cols != nb.cols {
            return Err(Error::ShapeMismatch {
                op,
                lhs: format!("{}x{}", na.rows, na.cols),
                rhs: format!("{}x{}", nb.rows, nb.cols),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("add", a, b)?;
        let (na, nb) = (self.node(a), self.node(b));
        let value: Vec<f64> = na.value.iter().zip(&nb.value).map(|(x, y)| x + y).collect();
        let ng = na.needs_grad || nb.needs_grad;
        Ok(self.push(na.rows, na.cols, value, ng, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("sub", a, b)?;
        let (na, nb) = (self.node(a), self.node(b));
        let value: Vec<f64> = na.value.iter().zip(&nb.value).map(|(x, y)| x - y).collect();
        let ng = na.needs_grad || nb.needs_grad;
        Ok(self.push(na.rows, na.cols, value, ng, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("mul", a, b)?;
        let (na, nb) = (self.node(a), self.node(b));
        let value: Vec<f64> = na.value.iter().zip(&nb.value).map(|(x, y)| x * y).collect();
        let ng = na.needs_grad || nb.needs_grad;
        Ok(self.push(na.rows, na.cols, value, ng, Op::Mul(a, b)))
    }

    pub fn scalar_mul(&mut self, a: TensorId, c: f64) -> TensorId {
        let na = self.node(a);
        let value: Vec<f64> = na.value.iter().map(|x| x * c).collect();
        let (rows, cols, ng) = (na.rows, na.cols, na.needs_grad);
        self.push(rows, cols, value, ng, Op::ScalarMul(a, c))
    }

    pub fn scalar_add(&mut self, a: TensorId, c: f64) -> TensorId {
        let na = self.node(a);
        let value: Vec<f64> = na.value.iter().map(|x| x + c).collect();
        let (rows, cols, ng) = (na.rows, na.cols, na.needs_grad);
        self.push(rows, cols, value, ng, Op::ScalarAdd(a))
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.cols != nb.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: format!("{}x{}", na.rows, na.cols),
                rhs: format!("{}x{}", nb.rows, nb.cols),
            });
        }
        let (m, k, n) = (na.rows, na.cols, nb.cols);
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = na.value[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &nb.value[p * n..(p + 1) * n];
                let crow = &mut value[i * n..(i + 1) * n];
                for j in 0..n {
                    crow[j] += aip * brow[j];
                }
            }
        }
        let ng = na.needs_grad || nb.needs_grad;
        Ok(self.push(m, n, value, ng, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let na = self.node(a);
        let (m, n) = (na.rows, na.cols);
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                value[j * m + i] = na.value[i * n + j];
            }
        }
        let ng = na.needs_grad;
        self.push(n, m, value, ng, Op::Transpose(a))
    }

    /// Concatenation along the last axis; all inputs share the row count.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols of zero tensors"));
        }
        let rows = self.node(parts[0]).rows;
        let mut cols = 0;
        let mut ng = false;
        for &p in parts {
            let n = self.node(p);
            if n.rows != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: format!("{}x{}", rows, self.node(parts[0]).cols),
                    rhs: format!("{}x{}", n.rows, n.cols),
                });
            }
            cols += n.cols;
            ng |= n.needs_grad;
        }
        let mut value = vec![0.0; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let n = self.node(p);
            for r in 0..rows {
                value[r * cols + offset..r * cols + offset + n.cols]
                    .copy_from_slice(&n.value[r * n.cols..(r + 1) * n.cols]);
            }
            offset += n.cols;
        }
        Ok(self.push(rows, cols, value, ng, Op::ConcatCols(parts.to_vec())))
    }

    /// Stacks row blocks; all inputs share the column count.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows of zero tensors"));
        }
        let cols = self.node(parts[0]).cols;
        let mut rows = 0;
        let mut ng = false;
        for &p in parts {
            let n = self.node(p);
            if n.cols != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: format!("{}x{}", self.node(parts[0]).rows, cols),
                    rhs: format!("{}x{}", n.rows, n.cols),
                });
            }
            rows += n.rows;
            ng |= n.needs_grad;
        }
        let mut value = Vec::with_capacity(rows * cols);
        for &p in parts {
            value.extend_from_slice(&self.node(p).value);
        }
        Ok(self.push(rows, cols, value, ng, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let na = self.node(a);
        if start + len > na.cols {
            return Err(Error::invalid(format!(
                "slice_cols [{start}, {}) out of range for {} columns",
                start + len,
                na.cols
            )));
        }
        let rows = na.rows;
        let mut value = vec![0.0; rows * len];
        for r in 0..rows {
            value[r * len..(r + 1) * len]
                .copy_from_slice(&na.value[r * na.cols + start..r * na.cols + start + len]);
        }
        let ng = na.needs_grad;
        Ok(self.push(rows, len, value, ng, Op::SliceCols(a, start, len)))
    }

    /// Extracts row `r` as a `1 x cols` tensor.
    pub fn row(&mut self, a: TensorId, r: usize) -> Result<TensorId> {
        let na = self.node(a);
        if r >= na.rows {
            return Err(Error::invalid(format!(
                "row {r} out of range for {} rows",
                na.rows
            )));
        }
        let value = na.value[r * na.cols..(r + 1) * na.cols].to_vec();
        let (cols, ng) = (na.cols, na.needs_grad);
        Ok(self.push(1, cols, value, ng, Op::Row(a, r)))
    }

    /// Zero-pads to `rows x cols`, placing the input in the top-left block.
    pub fn pad_to(&mut self, a: TensorId, rows: usize, cols: usize) -> Result<TensorId> {
        let na = self.node(a);
        if na.rows > rows || na.cols > cols {
            return Err(Error::ShapeMismatch {
                op: "pad_to",
                lhs: format!("{}x{}", na.rows, na.cols),
                rhs: format!("{rows}x{cols}"),
            });
        }
        let mut value = vec![0.0; rows * cols];
        for r in 0..na.rows {
            value[r * cols..r * cols + na.cols]
                .copy_from_slice(&na.value[r * na.cols..(r + 1) * na.cols]);
        }
        let ng = na.needs_grad;
        Ok(self.push(rows, cols, value, ng, Op::PadTo(a)))
    }

    /// `[m x n] + [1 x n]`, the bias-broadcast used by affine layers.
    pub fn add_row_broadcast(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        let (na, nv) = (self.node(a), self.node(v));
        if nv.rows != 1 || nv.cols != na.cols {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: format!("{}x{}", na.rows, na.cols),
                rhs: format!("{}x{}", nv.rows, nv.cols),
            });
        }
        let (m, n) = (na.rows, na.cols);
        let mut value = na.value.clone();
        for r in 0..m {
            for c in 0..n {
                value[r * n + c] += nv.value[c];
            }
        }
        let ng = na.needs_grad || nv.needs_grad;
        Ok(self.push(m, n, value, ng, Op::AddRowBroadcast(a, v)))
    }

    /// `x @ w + b` with `x: [m x k]`, `w: [k x n]`, `b: [1 x n]`.
    pub fn affine(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let xw = self.matmul(x, w)?;
        self.add_row_broadcast(xw, b)
    }

    // ---- nonlinearities ----------------------------------------------------

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let na = self.node(a);
        let value: Vec<f64> = na.value.iter().map(|&x| sigmoid_scalar(x)).collect();
        let (rows, cols, ng) = (na.rows, na.cols, na.needs_grad);
        self.push(rows, cols, value, ng, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let na = self.node(a);
        let value: Vec<f64> = na.value.iter().map(|x| x.tanh()).collect();
        let (rows, cols, ng) = (na.rows, na.cols, na.needs_grad);
        self.push(rows, cols, value, ng, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let na = self.node(a);
        let value: Vec<f64> = na.value.iter().map(|x| x.max(0.0)).collect();
        let (rows, cols, ng) = (na.rows, na.cols, na.needs_grad);
        self.push(rows, cols, value, ng, Op::Relu(a))
    }

    /// Row-wise softmax over the unmasked positions; masked positions are
    /// exactly zero in the output. Errors if any row is fully masked.
    pub fn row_softmax_masked(&mut self, a: TensorId, mask: Rc<Vec<bool>>) -> Result<TensorId> {
        let na = self.node(a);
        if mask.len() != na.value.len() {
            return Err(Error::ShapeMismatch {
                op: "row_softmax_masked",
                lhs: format!("{}x{}", na.rows, na.cols),
                rhs: format!("mask of {} entries", mask.len()),
            });
        }
        let (m, n) = (na.rows, na.cols);
        let mut value = vec![0.0; m * n];
        for r in 0..m {
            let xrow = &na.value[r * n..(r + 1) * n];
            let mrow = &mask[r * n..(r + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for (x, &keep) in xrow.iter().zip(mrow) {
                if keep && *x > max {
                    max = *x;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::FullyMaskedRow { row: r });
            }
            let mut z = 0.0;
            let vrow = &mut value[r * n..(r + 1) * n];
            for j in 0..n {
                if mrow[j] {
                    let e = (xrow[j] - max).exp();
                    vrow[j] = e;
                    z += e;
                }
            }
            for j in 0..n {
                if mrow[j] {
                    vrow[j] /= z;
                }
            }
        }
        let ng = na.needs_grad;
        Ok(self.push(m, n, value, ng, Op::RowSoftmaxMasked { x: a, mask }))
    }

    /// Per-row layer normalization with learnable gain and bias.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (nx, ngm, nbt) = (self.node(x), self.node(gamma), self.node(beta));
        if ngm.rows != 1 || ngm.cols != nx.cols || nbt.rows != 1 || nbt.cols != nx.cols {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: format!("{}x{}", nx.rows, nx.cols),
                rhs: format!(
                    "gamma {}x{}, beta {}x{}",
                    ngm.rows, ngm.cols, nbt.rows, nbt.cols
                ),
            });
        }
        let (m, n) = (nx.rows, nx.cols);
        let mut value = vec![0.0; m * n];
        let mut normed = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        for r in 0..m {
            let xrow = &nx.value[r * n..(r + 1) * n];
            let mu = xrow.iter().sum::<f64>() / n as f64;
            let var = xrow.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let xh = (xrow[j] - mu) * rs;
                normed[r * n + j] = xh;
                value[r * n + j] = ngm.value[j] * xh + nbt.value[j];
            }
        }
        let ng = nx.needs_grad || ngm.needs_grad || nbt.needs_grad;
        Ok(self.push(
            m,
            n,
            value,
            ng,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd,
                normed,
            },
        ))
    }

    // ---- reductions and losses ----------------------------------------------

    /// Column sums: `[m x n] -> [1 x n]`.
    pub fn sum_axis0(&mut self, a: TensorId) -> TensorId {
        let na = self.node(a);
        let (m, n) = (na.rows, na.cols);
        let mut value = vec![0.0; n];
        for r in 0..m {
            for c in 0..n {
                value[c] += na.value[r * n + c];
            }
        }
        let ng = na.needs_grad;
        self.push(1, n, value, ng, Op::SumAxis0(a))
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let na = self.node(a);
        let v = na.value.iter().sum::<f64>() / na.value.len() as f64;
        let ng = na.needs_grad;
        self.push(1, 1, vec![v], ng, Op::MeanAll(a))
    }

    /// Binary cross entropy of one probability (a `1x1` node) against a
    /// fixed 0/1 target; the probability form with clamped inputs.
    pub fn binary_cross_entropy(&mut self, prob: TensorId, target: f64) -> Result<TensorId> {
        let np = self.node(prob);
        if np.value.len() != 1 {
            return Err(Error::invalid(format!(
                "binary_cross_entropy expects a scalar probability, got {}x{}",
                np.rows, np.cols
            )));
        }
        let p = np.value[0];
        let clamped = !(BCE_EPS..=1.0 - BCE_EPS).contains(&p);
        let ph = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        let loss = -(target * ph.ln() + (1.0 - target) * (1.0 - ph).ln());
        let ng = np.needs_grad;
        Ok(self.push(
            1,
            1,
            vec![loss],
            ng,
            Op::Bce {
                prob,
                target,
                clamped,
            },
        ))
    }

    /// Mean absolute value over the positions where `mask` is true; yields 0
    /// when the mask selects nothing.
    pub fn l1_masked(&mut self, a: TensorId, mask: Rc<Vec<bool>>) -> Result<TensorId> {
        let na = self.node(a);
        if mask.len() != na.value.len() {
            return Err(Error::ShapeMismatch {
                op: "l1_masked",
                lhs: format!("{}x{}", na.rows, na.cols),
                rhs: format!("mask of {} entries", mask.len()),
            });
        }
        let count = mask.iter().filter(|&&b| b).count();
        let mut sum = 0.0;
        for (x, &keep) in na.value.iter().zip(mask.iter()) {
            if keep {
                sum += x.abs();
            }
        }
        let v = if count == 0 { 0.0 } else { sum / count as f64 };
        let ng = na.needs_grad;
        Ok(self.push(1, 1, vec![v], ng, Op::L1Masked { x: a, mask, count }))
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse traversal from a scalar loss node, visiting each recorded
    /// operation exactly once in reverse execution order.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let nl = self.node(loss);
        if nl.value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got {}x{}",
                nl.rows, nl.cols
            )));
        }
        if !nl.value[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let (before, rest) = self.grads.split_at_mut(i);
            let Some(gout) = rest[0].as_deref() else {
                continue;
            };
            let node = &self.nodes[i];
            let nodes = &self.nodes;
            let mut acc = |id: TensorId, f: &mut dyn FnMut(&mut [f64])| {
                if !nodes[id.0].needs_grad {
                    return;
                }
                let slot =
                    before[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].value.len()]);
                f(slot);
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(*a, &mut |g| {
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    });
                    acc(*b, &mut |g| {
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    });
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |g| {
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    });
                    acc(*b, &mut |g| {
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi -= go;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    acc(*a, &mut |g| {
                        for k in 0..g.len() {
                            g[k] += gout[k] * vb[k];
                        }
                    });
                    acc(*b, &mut |g| {
                        for k in 0..g.len() {
                            g[k] += gout[k] * va[k];
                        }
                    });
                }
                Op::ScalarMul(a, c) => {
                    let c = *c;
                    acc(*a, &mut |g| {
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi += go * c;
                        }
                    });
                }
                Op::ScalarAdd(a) => {
                    acc(*a, &mut |g| {
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    });
                }
                Op::MatMul(a, b) => {
                    let (na, nb) = (&nodes[a.0], &nodes[b.0]);
                    let (m, k, n) = (na.rows, na.cols, nb.cols);
                    // dA = dC . B^T
                    acc(*a, &mut |g| {
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                let grow = &gout[i * n..(i + 1) * n];
                                let brow = &nb.value[p * n..(p + 1) * n];
                                for j in 0..n {
                                    s += grow[j] * brow[j];
                                }
                                g[i * k + p] += s;
                            }
                        }
                    });
                    // dB = A^T . dC
                    acc(*b, &mut |g| {
                        for i in 0..m {
                            for p in 0..k {
                                let aip = na.value[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                let grow = &gout[i * n..(i + 1) * n];
                                let gbrow = &mut g[p * n..(p + 1) * n];
                                for j in 0..n {
                                    gbrow[j] += aip * grow[j];
                                }
                            }
                        }
                    });
                }
                Op::Transpose(a) => {
                    let na = &nodes[a.0];
                    let (m, n) = (na.rows, na.cols);
                    acc(*a, &mut |g| {
                        for i in 0..m {
                            for j in 0..n {
                                g[i * n + j] += gout[j * m + i];
                            }
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let out_cols = node.cols;
                    let rows = node.rows;
                    let mut offset = 0;
                    for &p in parts {
                        let pc = nodes[p.0].cols;
                        acc(p, &mut |g| {
                            for r in 0..rows {
                                for c in 0..pc {
                                    g[r * pc + c] += gout[r * out_cols + offset + c];
                                }
                            }
                        });
                        offset += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let cols = node.cols;
                    let mut offset = 0;
                    for &p in parts {
                        let pr = nodes[p.0].rows;
                        acc(p, &mut |g| {
                            g.iter_mut()
                                .zip(&gout[offset * cols..(offset + pr) * cols])
                                .for_each(|(gi, &go)| *gi += go);
                        });
                        offset += pr;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let na_cols = nodes[a.0].cols;
                    let rows = node.rows;
                    let (start, len) = (*start, *len);
                    acc(*a, &mut |g| {
                        for r in 0..rows {
                            for c in 0..len {
                                g[r * na_cols + start + c] += gout[r * len + c];
                            }
                        }
                    });
                }
                Op::Row(a, r) => {
                    let cols = node.cols;
                    let r = *r;
                    acc(*a, &mut |g| {
                        for c in 0..cols {
                            g[r * cols + c] += gout[c];
                        }
                    });
                }
                Op::PadTo(a) => {
                    let na = &nodes[a.0];
                    let (ir, ic, oc) = (na.rows, na.cols, node.cols);
                    acc(*a, &mut |g| {
                        for r in 0..ir {
                            for c in 0..ic {
                                g[r * ic + c] += gout[r * oc + c];
                            }
                        }
                    });
                }
                Op::AddRowBroadcast(a, v) => {
                    let (m, n) = (node.rows, node.cols);
                    acc(*a, &mut |g| {
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    });
                    acc(*v, &mut |g| {
                        for r in 0..m {
                            for c in 0..n {
                                g[c] += gout[r * n + c];
                            }
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(*a, &mut |g| {
                        for k in 0..g.len() {
                            g[k] += gout[k] * y[k] * (1.0 - y[k]);
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(*a, &mut |g| {
                        for k in 0..g.len() {
                            g[k] += gout[k] * (1.0 - y[k] * y[k]);
                        }
                    });
                }
                Op::Relu(a) => {
                    let x = &nodes[a.0].value;
                    acc(*a, &mut |g| {
                        for k in 0..g.len() {
                            if x[k] > 0.0 {
                                g[k] += gout[k];
                            }
                        }
                    });
                }
                Op::RowSoftmaxMasked { x, mask } => {
                    let y = &node.value;
                    let (m, n) = (node.rows, node.cols);
                    acc(*x, &mut |g| {
                        for r in 0..m {
                            let yrow = &y[r * n..(r + 1) * n];
                            let grow = &gout[r * n..(r + 1) * n];
                            let mrow = &mask[r * n..(r + 1) * n];
                            let dot: f64 = (0..n)
                                .filter(|&j| mrow[j])
                                .map(|j| grow[j] * yrow[j])
                                .sum();
                            for j in 0..n {
                                if mrow[j] {
                                    g[r * n + j] += yrow[j] * (grow[j] - dot);
                                }
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    rstd,
                    normed,
                    ..
                } => {
                    let (m, n) = (node.rows, node.cols);
                    let gm = &nodes[gamma.0].value;
                    acc(*beta, &mut |g| {
                        for r in 0..m {
                            for j in 0..n {
                                g[j] += gout[r * n + j];
                            }
                        }
                    });
                    acc(*gamma, &mut |g| {
                        for r in 0..m {
                            for j in 0..n {
                                g[j] += gout[r * n + j] * normed[r * n + j];
                            }
                        }
                    });
                    acc(*x, &mut |g| {
                        for r in 0..m {
                            let xh = &normed[r * n..(r + 1) * n];
                            let grow = &gout[r * n..(r + 1) * n];
                            let mut sum_dxh = 0.0;
                            let mut sum_dxh_xh = 0.0;
                            for j in 0..n {
                                let dxh = grow[j] * gm[j];
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xh[j];
                            }
                            let inv_n = 1.0 / n as f64;
                            for j in 0..n {
                                let dxh = grow[j] * gm[j];
                                g[r * n + j] += rstd[r]
                                    * (dxh - inv_n * sum_dxh - xh[j] * inv_n * sum_dxh_xh);
                            }
                        }
                    });
                }
                Op::SumAxis0(a) => {
                    let na_rows = nodes[a.0].rows;
                    let n = node.cols;
                    acc(*a, &mut |g| {
                        for r in 0..na_rows {
                            for c in 0..n {
                                g[r * n + c] += gout[c];
                            }
                        }
                    });
                }
                Op::MeanAll(a) => {
                    let inv = 1.0 / nodes[a.0].value.len() as f64;
                    acc(*a, &mut |g| {
                        for gi in g.iter_mut() {
                            *gi += gout[0] * inv;
                        }
                    });
                }
                Op::Bce {
                    prob,
                    target,
                    clamped,
                } => {
                    if !clamped {
                        let p = nodes[prob.0].value[0];
                        let d = (p - target) / (p * (1.0 - p));
                        acc(*prob, &mut |g| {
                            g[0] += gout[0] * d;
                        });
                    }
                }
                Op::L1Masked { x, mask, count } => {
                    if *count > 0 {
                        let vx = &nodes[x.0].value;
                        let inv = 1.0 / *count as f64;
                        acc(*x, &mut |g| {
                            for k in 0..g.len() {
                                if mask[k] {
                                    g[k] += gout[0] * inv * vx[k].signum() * ((vx[k] != 0.0) as i32 as f64);
                                }
                            }
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(rows, cols, data).unwrap().with_grad()
    }

    #[test]
    fn sigmoid_value_and_gradient_at_zero() {
        let x = t(1, 1, vec![0.0]);
        let mut tape = Tape::new();
        let xi = tape.leaf(&x);
        let y = tape.sigmoid(xi);
        assert_eq!(tape.scalar_value(y), 0.5);
        tape.backward(y).unwrap();
        assert!((tape.grad(xi).unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn relu_values_and_gradients() {
        let x = t(1, 2, vec![-1.0, 2.0]);
        let mut tape = Tape::new();
        let xi = tape.leaf(&x);
        let y = tape.relu(xi);
        assert_eq!(tape.value(y), &[0.0, 2.0]);
        let m = tape.mean_all(y);
        tape.backward(m).unwrap();
        let g = tape.grad(xi).unwrap();
        assert_eq!(g, &[0.0, 0.5]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = t(2, 3, vec![0.0; 6]);
        let b = t(3, 3, vec![0.0; 9]);
        let mut tape = Tape::new();
        let (ai, bi) = (tape.leaf(&a), tape.leaf(&b));
        let err = tape.add(ai, bi).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("3x3"), "{err}");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_mask_is_exact_zero() {
        let x = t(2, 3, vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.25]);
        let mask = Rc::new(vec![true, true, false, true, true, true]);
        let mut tape = Tape::new();
        let xi = tape.leaf(&x);
        let y = tape.row_softmax_masked(xi, mask).unwrap();
        let v = tape.value(y);
        assert_eq!(v[2], 0.0);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-12);
        assert!((v[3] + v[4] + v[5] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_row_errors() {
        let x = t(1, 2, vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let xi = tape.leaf(&x);
        let err = tape
            .row_softmax_masked(xi, Rc::new(vec![false, false]))
            .unwrap_err();
        assert!(matches!(err, Error::FullyMaskedRow { row: 0 }));
    }

    #[test]
    fn gradient_accumulates_across_reuses_of_the_same_leaf() {
        // y = x*x + x => dy/dx = 2x + 1
        let x = t(1, 1, vec![3.0]);
        let mut tape = Tape::new();
        let xi = tape.leaf(&x);
        let sq = tape.mul(xi, xi).unwrap();
        let y = tape.add(sq, xi).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(xi).unwrap()[0], 7.0);
    }

    #[test]
    fn backward_is_reproducible_bit_for_bit() {
        let run = || {
            let a = t(3, 4, (0..12).map(|i| (i as f64) * 0.37 - 1.1).collect());
            let b = t(4, 2, (0..8).map(|i| (i as f64) * -0.21 + 0.4).collect());
            let mut tape = Tape::new();
            let (ai, bi) = (tape.leaf(&a), tape.leaf(&b));
            let c = tape.matmul(ai, bi).unwrap();
            let s = tape.tanh(c);
            let l = tape.mean_all(s);
            tape.backward(l).unwrap();
            (tape.grad(ai).unwrap().to_vec(), tape.grad(bi).unwrap().to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn bce_matches_analytic_value() {
        let p = t(1, 1, vec![0.99]);
        let mut tape = Tape::new();
        let pi = tape.leaf(&p);
        let l = tape.binary_cross_entropy(pi, 1.0).unwrap();
        assert!((tape.scalar_value(l) - (-(0.99f64).ln())).abs() < 1e-15);
    }

    #[test]
    fn l1_masked_mean_and_unmasked_positions_ignored() {
        let x = t(2, 2, vec![1.0, -2.0, 3.0, -4.0]);
        let mask = Rc::new(vec![true, true, false, false]);
        let mut tape = Tape::new();
        let xi = tape.leaf(&x);
        let l = tape.l1_masked(xi, mask).unwrap();
        assert_eq!(tape.scalar_value(l), 1.5);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(xi).unwrap(), &[0.5, -0.5, 0.0, 0.0]);
    }
}
