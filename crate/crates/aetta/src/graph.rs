//! Reverse-mode automatic differentiation over dense f64 arrays.
//!
//! A [`Graph`] is a tape: every operation appends a node holding the result
//! values, the producing op, and the parent handles, so reverse iteration
//! over the tape is already a reverse topological order. Values are computed
//! eagerly. Graphs are single-use: one [`Graph::backward`] call per graph,
//! rebuild for the next step.
//!
//! Shapes must conform exactly; there is no implicit broadcasting. The only
//! broadcast-like operations are explicit: [`Graph::add_row`] (row vector
//! over a matrix), [`Graph::div_scalar`] (divide by a scalar node), and the
//! constant [`Graph::scalar_mul`].

use crate::error::{Error, Result};
use crate::kernels;

/// Floor applied inside [`Graph::log`]: `log(x)` computes `ln(max(x, LOG_FLOOR))`.
/// This pins the 0·log 0 := 0 convention for entropy terms and keeps the
/// gradient bounded when attention mass vanishes.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node inside one [`Graph`]. Only valid for the graph that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    id: usize,
}

impl Tensor {
    pub fn id(&self) -> usize {
        self.id
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Tensor, Tensor),
    Add(Tensor, Tensor),
    Mul(Tensor, Tensor),
    AddRow(Tensor, Tensor),
    ScalarMul(Tensor, f64),
    DivScalar(Tensor, Tensor),
    Gelu(Tensor),
    LayerNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        eps: f64,
    },
    SoftmaxLastDim(Tensor),
    Log(Tensor),
    SumAll(Tensor),
    SumAxis(Tensor, usize),
    Transpose(Tensor),
    Reshape(Tensor),
    SliceRows {
        x: Tensor,
        start: usize,
    },
    SliceCols {
        x: Tensor,
        start: usize,
    },
    ConcatRows(Vec<Tensor>),
    ConcatCols(Vec<Tensor>),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    /// Lazily allocated by backward; `None` means "never reached", which
    /// reads as an exactly-zero gradient.
    grad: Option<Vec<f64>>,
    op: Op,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Single-use reverse-mode computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.id].shape
    }

    pub fn values(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.id].values
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, t: Tensor) -> f64 {
        debug_assert_eq!(self.nodes[t.id].values.len(), 1);
        self.nodes[t.id].values[0]
    }

    /// Gradient of `t`, or `None` when backward never reached it.
    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.nodes[t.id].grad.as_deref()
    }

    /// Gradient of `t`, materializing zeros for unreached nodes.
    pub fn grad_or_zeros(&self, t: Tensor) -> Vec<f64> {
        match &self.nodes[t.id].grad {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[t.id].values.len()],
        }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op) -> Tensor {
        debug_assert_eq!(values.len(), numel(&shape));
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape,
            values,
            grad: None,
            op,
        });
        Tensor { id }
    }

    /// New input node. Leaves are where gradients are read back from.
    pub fn leaf(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if values.len() != numel(shape) {
            return Err(Error::InvalidOperand {
                op: "leaf",
                shape: shape.to_vec(),
                reason: format!("expected {} values, got {}", numel(shape), values.len()),
            });
        }
        Ok(self.push(shape.to_vec(), values, Op::Leaf))
    }

    pub fn scalar(&mut self, v: f64) -> Tensor {
        self.push(Vec::new(), vec![v], Op::Leaf)
    }

    fn require_2d(&self, op: &'static str, t: Tensor) -> Result<(usize, usize)> {
        let s = self.shape(t);
        if s.len() != 2 {
            return Err(Error::InvalidOperand {
                op,
                shape: s.to_vec(),
                reason: "expected a rank-2 tensor".into(),
            });
        }
        Ok((s[0], s[1]))
    }

    // ---- forward ops -----------------------------------------------------

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, k) = self.require_2d("matmul", a)?;
        let (k2, n) = self.require_2d("matmul", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let values = kernels::matmul(self.values(a), m, k, self.values(b), n);
        Ok(self.push(vec![m, n], values, Op::Matmul(a, b)))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Tensor,
        b: Tensor,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(self.shape(a).to_vec(), values, op))
    }

    /// Add a length-c vector to every row of an r×c matrix (explicit
    /// row broadcast, used for biases).
    pub fn add_row(&mut self, m: Tensor, v: Tensor) -> Result<Tensor> {
        let (rows, cols) = self.require_2d("add_row", m)?;
        let vs = self.shape(v);
        if vs != [cols] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(m).to_vec(),
                rhs: vs.to_vec(),
            });
        }
        let mv = self.values(m);
        let vv = self.values(v);
        let mut values = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                values[r * cols + c] = mv[r * cols + c] + vv[c];
            }
        }
        Ok(self.push(vec![rows, cols], values, Op::AddRow(m, v)))
    }

    pub fn scalar_mul(&mut self, x: Tensor, c: f64) -> Result<Tensor> {
        let values = self.values(x).iter().map(|&v| v * c).collect();
        Ok(self.push(self.shape(x).to_vec(), values, Op::ScalarMul(x, c)))
    }

    /// Divide every element of `x` by the single-element tensor `s`.
    pub fn div_scalar(&mut self, x: Tensor, s: Tensor) -> Result<Tensor> {
        if self.values(s).len() != 1 {
            return Err(Error::InvalidOperand {
                op: "div_scalar",
                shape: self.shape(s).to_vec(),
                reason: "divisor must be a single-element tensor".into(),
            });
        }
        let d = self.values(s)[0];
        let values = self.values(x).iter().map(|&v| v / d).collect();
        Ok(self.push(self.shape(x).to_vec(), values, Op::DivScalar(x, s)))
    }

    pub fn gelu(&mut self, x: Tensor) -> Result<Tensor> {
        let values = self.values(x).iter().map(|&v| kernels::gelu(v)).collect();
        Ok(self.push(self.shape(x).to_vec(), values, Op::Gelu(x)))
    }

    /// Layer normalization over the last dimension of a rank-2 tensor.
    pub fn layernorm(&mut self, x: Tensor, gamma: Tensor, beta: Tensor, eps: f64) -> Result<Tensor> {
        let (rows, cols) = self.require_2d("layernorm", x)?;
        for (name, t) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(t) != [cols] {
                return Err(Error::InvalidOperand {
                    op: "layernorm",
                    shape: self.shape(t).to_vec(),
                    reason: format!("{name} must have shape [{cols}]"),
                });
            }
        }
        let values = kernels::layernorm_rows(
            self.values(x),
            rows,
            cols,
            self.values(gamma),
            self.values(beta),
            eps,
        );
        Ok(self.push(
            vec![rows, cols],
            values,
            Op::LayerNorm { x, gamma, beta, eps },
        ))
    }

    /// Row-wise softmax over the last dimension of a rank-2 tensor.
    pub fn softmax_lastdim(&mut self, x: Tensor) -> Result<Tensor> {
        let (rows, cols) = self.require_2d("softmax_lastdim", x)?;
        let values = kernels::softmax_rows(self.values(x), rows, cols);
        Ok(self.push(vec![rows, cols], values, Op::SoftmaxLastDim(x)))
    }

    /// Elementwise natural log with the [`LOG_FLOOR`] floor.
    pub fn log(&mut self, x: Tensor) -> Result<Tensor> {
        let values = self
            .values(x)
            .iter()
            .map(|&v| kernels::log_floored(v, LOG_FLOOR))
            .collect();
        Ok(self.push(self.shape(x).to_vec(), values, Op::Log(x)))
    }

    /// Sum of all elements; the result is a scalar (shape []).
    pub fn sum_all(&mut self, x: Tensor) -> Result<Tensor> {
        let total: f64 = self.values(x).iter().sum();
        Ok(self.push(Vec::new(), vec![total], Op::SumAll(x)))
    }

    /// Sum over one axis of a rank-2 tensor; the summed axis is dropped.
    pub fn sum_axis(&mut self, x: Tensor, axis: usize) -> Result<Tensor> {
        let (rows, cols) = self.require_2d("sum_axis", x)?;
        if axis > 1 {
            return Err(Error::InvalidOperand {
                op: "sum_axis",
                shape: self.shape(x).to_vec(),
                reason: format!("axis {axis} out of range"),
            });
        }
        let v = self.values(x);
        let values = if axis == 0 {
            let mut out = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    out[c] += v[r * cols + c];
                }
            }
            out
        } else {
            (0..rows)
                .map(|r| v[r * cols..(r + 1) * cols].iter().sum())
                .collect()
        };
        let len = if axis == 0 { cols } else { rows };
        Ok(self.push(vec![len], values, Op::SumAxis(x, axis)))
    }

    /// Mean over one axis, composed from [`Graph::sum_axis`].
    pub fn mean_axis(&mut self, x: Tensor, axis: usize) -> Result<Tensor> {
        let (rows, cols) = self.require_2d("mean_axis", x)?;
        let dim = if axis == 0 { rows } else { cols };
        let summed = self.sum_axis(x, axis)?;
        self.scalar_mul(summed, 1.0 / dim as f64)
    }

    pub fn transpose(&mut self, x: Tensor) -> Result<Tensor> {
        let (rows, cols) = self.require_2d("transpose", x)?;
        let values = kernels::transpose(self.values(x), rows, cols);
        Ok(self.push(vec![cols, rows], values, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Tensor, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.values(x).len() {
            return Err(Error::InvalidOperand {
                op: "reshape",
                shape: self.shape(x).to_vec(),
                reason: format!("cannot reshape to {shape:?}"),
            });
        }
        let values = self.values(x).to_vec();
        Ok(self.push(shape.to_vec(), values, Op::Reshape(x)))
    }

    pub fn slice_rows(&mut self, x: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (rows, cols) = self.require_2d("slice_rows", x)?;
        if start + len > rows || len == 0 {
            return Err(Error::InvalidOperand {
                op: "slice_rows",
                shape: self.shape(x).to_vec(),
                reason: format!("row range {start}..{} out of bounds", start + len),
            });
        }
        let values = self.values(x)[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(vec![len, cols], values, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (rows, cols) = self.require_2d("slice_cols", x)?;
        if start + len > cols || len == 0 {
            return Err(Error::InvalidOperand {
                op: "slice_cols",
                shape: self.shape(x).to_vec(),
                reason: format!("column range {start}..{} out of bounds", start + len),
            });
        }
        let v = self.values(x);
        let mut values = Vec::with_capacity(rows * len);
        for r in 0..rows {
            values.extend_from_slice(&v[r * cols + start..r * cols + start + len]);
        }
        Ok(self.push(vec![rows, len], values, Op::SliceCols { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument {
                message: "concat_rows of zero tensors".into(),
            });
        }
        let (_, cols) = self.require_2d("concat_rows", parts[0])?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.require_2d("concat_rows", p)?;
            if c != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
        }
        let mut values = Vec::with_capacity(rows * cols);
        for &p in parts {
            values.extend_from_slice(self.values(p));
        }
        Ok(self.push(vec![rows, cols], values, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument {
                message: "concat_cols of zero tensors".into(),
            });
        }
        let (rows, _) = self.require_2d("concat_cols", parts[0])?;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.require_2d("concat_cols", p)?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            cols += c;
        }
        let mut values = vec![0.0; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let (_, c) = self.require_2d("concat_cols", p)?;
            let pv = self.values(p);
            for r in 0..rows {
                values[r * cols + offset..r * cols + offset + c]
                    .copy_from_slice(&pv[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        Ok(self.push(vec![rows, cols], values, Op::ConcatCols(parts.to_vec())))
    }

    // ---- backward --------------------------------------------------------

    fn add_grad(&mut self, t: Tensor, contrib: &[f64]) {
        let node = &mut self.nodes[t.id];
        let grad = node
            .grad
            .get_or_insert_with(|| vec![0.0; node.values.len()]);
        debug_assert_eq!(grad.len(), contrib.len());
        for (g, c) in grad.iter_mut().zip(contrib) {
            *g += c;
        }
    }

    /// Backpropagate from a scalar loss. Single use: a second call on the
    /// same graph is an error. Visits each node at most once, in reverse
    /// tape (= reverse topological) order.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if !self.shape(loss).is_empty() {
            return Err(Error::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.consumed = true;
        self.nodes[loss.id].grad = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            if self.nodes[id].grad.is_none() {
                continue;
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[1];
                    let g = self.nodes[id].grad.clone().unwrap();
                    let mut da = vec![0.0; m * k];
                    kernels::acc_matmul_nt(&mut da, &g, m, n, self.values(b), k);
                    let mut db = vec![0.0; k * n];
                    kernels::acc_matmul_tn(&mut db, self.values(a), m, k, &g, n);
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                Op::Add(a, b) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    self.add_grad(a, &g);
                    self.add_grad(b, &g);
                }
                Op::Mul(a, b) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let da: Vec<f64> = g.iter().zip(self.values(b)).map(|(&g, &y)| g * y).collect();
                    let db: Vec<f64> = g.iter().zip(self.values(a)).map(|(&g, &x)| g * x).collect();
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                Op::AddRow(m_t, v_t) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let cols = self.shape(v_t)[0];
                    let rows = g.len() / cols;
                    let mut dv = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dv[c] += g[r * cols + c];
                        }
                    }
                    self.add_grad(m_t, &g);
                    self.add_grad(v_t, &dv);
                }
                Op::ScalarMul(x, c) => {
                    let dx: Vec<f64> = self.nodes[id]
                        .grad
                        .as_ref()
                        .unwrap()
                        .iter()
                        .map(|&g| g * c)
                        .collect();
                    self.add_grad(x, &dx);
                }
                Op::DivScalar(x, s) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let d = self.values(s)[0];
                    let out = &self.nodes[id].values;
                    let ds: f64 = -g.iter().zip(out).map(|(&g, &o)| g * o).sum::<f64>() / d;
                    let dx: Vec<f64> = g.iter().map(|&g| g / d).collect();
                    self.add_grad(x, &dx);
                    self.add_grad(s, &[ds]);
                }
                Op::Gelu(x) => {
                    let dx: Vec<f64> = self.nodes[id]
                        .grad
                        .as_ref()
                        .unwrap()
                        .iter()
                        .zip(self.values(x))
                        .map(|(&g, &v)| g * kernels::gelu_prime(v))
                        .collect();
                    self.add_grad(x, &dx);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let (rows, cols) = (self.shape(x)[0], self.shape(x)[1]);
                    let xv = self.values(x);
                    let gam = self.values(gamma);
                    let mut dx = vec![0.0; rows * cols];
                    let mut dgamma = vec![0.0; cols];
                    let mut dbeta = vec![0.0; cols];
                    for r in 0..rows {
                        let row = &xv[r * cols..(r + 1) * cols];
                        let grow = &g[r * cols..(r + 1) * cols];
                        let (mean, var) = kernels::row_mean_var(row);
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut gh_mean = 0.0;
                        let mut ghxh_mean = 0.0;
                        let mut xhat = vec![0.0; cols];
                        for c in 0..cols {
                            xhat[c] = (row[c] - mean) * inv;
                            let gh = grow[c] * gam[c];
                            gh_mean += gh;
                            ghxh_mean += gh * xhat[c];
                        }
                        gh_mean /= cols as f64;
                        ghxh_mean /= cols as f64;
                        for c in 0..cols {
                            let gh = grow[c] * gam[c];
                            dx[r * cols + c] = (gh - gh_mean - xhat[c] * ghxh_mean) * inv;
                            dgamma[c] += grow[c] * xhat[c];
                            dbeta[c] += grow[c];
                        }
                    }
                    self.add_grad(x, &dx);
                    self.add_grad(gamma, &dgamma);
                    self.add_grad(beta, &dbeta);
                }
                Op::SoftmaxLastDim(x) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let (rows, cols) = (self.shape(x)[0], self.shape(x)[1]);
                    let y = &self.nodes[id].values;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                        for c in 0..cols {
                            dx[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    self.add_grad(x, &dx);
                }
                Op::Log(x) => {
                    let dx: Vec<f64> = self.nodes[id]
                        .grad
                        .as_ref()
                        .unwrap()
                        .iter()
                        .zip(self.values(x))
                        .map(|(&g, &v)| if v > LOG_FLOOR { g / v } else { 0.0 })
                        .collect();
                    self.add_grad(x, &dx);
                }
                Op::SumAll(x) => {
                    let g = self.nodes[id].grad.as_ref().unwrap()[0];
                    let dx = vec![g; self.values(x).len()];
                    self.add_grad(x, &dx);
                }
                Op::SumAxis(x, axis) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let (rows, cols) = (self.shape(x)[0], self.shape(x)[1]);
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] = if axis == 0 { g[c] } else { g[r] };
                        }
                    }
                    self.add_grad(x, &dx);
                }
                Op::Transpose(x) => {
                    let (rows, cols) = (self.shape(x)[0], self.shape(x)[1]);
                    let g = self.nodes[id].grad.as_ref().unwrap();
                    // grad has shape [cols, rows]; transpose back.
                    let dx = kernels::transpose(g, cols, rows);
                    self.add_grad(x, &dx);
                }
                Op::Reshape(x) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    self.add_grad(x, &g);
                }
                Op::SliceRows { x, start } => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let cols = self.shape(x)[1];
                    let mut dx = vec![0.0; self.values(x).len()];
                    dx[start * cols..start * cols + g.len()].copy_from_slice(&g);
                    self.add_grad(x, &dx);
                }
                Op::SliceCols { x, start } => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let (rows, cols) = (self.shape(x)[0], self.shape(x)[1]);
                    let len = self.nodes[id].shape[1];
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    self.add_grad(x, &dx);
                }
                Op::ConcatRows(parts) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let mut offset = 0;
                    for p in parts {
                        let len = self.values(p).len();
                        let slice = g[offset..offset + len].to_vec();
                        self.add_grad(p, &slice);
                        offset += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let cols = self.nodes[id].shape[1];
                    let rows = self.nodes[id].shape[0];
                    let mut offset = 0;
                    for p in parts {
                        let c = self.shape(p)[1];
                        let mut dp = vec![0.0; rows * c];
                        for r in 0..rows {
                            dp[r * c..(r + 1) * c]
                                .copy_from_slice(&g[r * cols + offset..r * cols + offset + c]);
                        }
                        self.add_grad(p, &dp);
                        offset += c;
                    }
                }
            }
        }
        Ok(())
    }
}
