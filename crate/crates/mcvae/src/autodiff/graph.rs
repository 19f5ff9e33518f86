//! Define-by-run reverse-mode differentiation graph.
//!
//! A [`Graph`] is rebuilt for every forward pass: leaves are registered with
//! [`Graph::input`] (constants) or [`Graph::param`] (trainable), operations
//! append nodes in topological order, and [`Graph::backward`] walks the node
//! list in reverse accumulating adjoints. Gradient accumulation across fan-out
//! is additive; constants never receive a gradient.
//!
//! All values are `f64`. `log`, `sqrt` and division denominators are guarded
//! by the single [`EPSILON`] constant; softmax and log-sum-exp subtract the
//! row maximum before exponentiating.

use statrs::function::erf::erf;

use super::tensor::Tensor;
use crate::error::{fmt_shape, McvaeError, Result};

/// Global numerical-stability constant applied inside `log`, `sqrt` and
/// division denominators. Inputs below this magnitude are clamped to it and
/// the corresponding gradient is treated as zero (the forward value is
/// constant over the clamped region).
pub const EPSILON: f64 = 1e-8;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// [m,k] x [k,n] -> [m,n]
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    /// Elementwise a / b with the denominator magnitude clamped to EPSILON.
    Div { a: Var, b: Var },
    AddScalar { x: Var },
    MulScalar { x: Var, c: f64 },
    /// x scaled by a scalar-valued graph node (gradient flows to both).
    ScaleByVar { x: Var, s: Var },
    Relu { x: Var },
    Gelu { x: Var },
    Sigmoid { x: Var },
    Exp { x: Var },
    Log { x: Var },
    Sqrt { x: Var },
    Square { x: Var },
    Negate { x: Var },
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum { x: Var, axis: Option<usize> },
    Mean { x: Var, axis: Option<usize> },
    /// [d] -> [rows, d]
    BroadcastRow { x: Var },
    /// [n] -> [n, cols]
    BroadcastCol { x: Var },
    Concat { xs: Vec<Var>, axis: usize },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    /// Rows of x placed at `rows` in a zero matrix of `out_rows` rows.
    ScatterRows { x: Var, rows: Vec<usize> },
    SoftmaxRows { x: Var },
    LogSumExp { x: Var },
    LogSumExpRows { x: Var },
    /// Each row divided by max(its L2 norm, EPSILON).
    RowNormalize { x: Var },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
}

/// Reverse-mode differentiation tape over dense tensors.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
        }
    }

    /// Register a constant leaf. Never accumulates gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.into_data(), false)
    }

    /// Register a trainable leaf; `backward` writes its gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.into_data(), true)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.input(Tensor::scalar(v))
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            shape,
            values,
            grad: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(op, shape, values, needs)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].values.len(), 1);
        self.nodes[v.0].values[0]
    }

    /// Gradient accumulated on `v`, if any flowed to it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of a trainable leaf, zeros if untouched by the loss.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[v.0].values.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        if s.len() == 2 {
            (s[0], s[1])
        } else {
            (1, s.iter().product())
        }
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(McvaeError::ShapeMismatch {
                op,
                lhs: fmt_shape(&self.nodes[a.0].shape),
                rhs: fmt_shape(&self.nodes[b.0].shape),
            });
        }
        Ok(())
    }

    // ── Elementwise binary ──────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.derived(Op::Add { a, b }, shape, values, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.derived(Op::Sub { a, b }, shape, values, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("elementwise-mul", a, b)?;
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.derived(Op::Mul { a, b }, shape, values, &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("div", a, b)?;
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x / clamp_denom(*y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.derived(Op::Div { a, b }, shape, values, &[a, b]))
    }

    // ── Scalar broadcasts ───────────────────────────────────────────────

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let values: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v + c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.derived(Op::AddScalar { x }, shape, values, &[x])
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let values: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.derived(Op::MulScalar { x, c }, shape, values, &[x])
    }

    /// Multiply every element of `x` by the scalar node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].values.len() != 1 {
            return Err(McvaeError::ShapeMismatch {
                op: "scale-by",
                lhs: fmt_shape(&self.nodes[x.0].shape),
                rhs: fmt_shape(&self.nodes[s.0].shape),
            });
        }
        let sv = self.nodes[s.0].values[0];
        let values: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v * sv).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.derived(Op::ScaleByVar { x, s }, shape, values, &[x, s]))
    }

    // ── Elementwise unary ───────────────────────────────────────────────

    pub fn relu(&mut self, x: Var) -> Var {
        let values: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.derived(Op::Relu { x }, shape, values, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let values: Vec<f64> = self.nodes[x.0]
            .values
            .iter()
            .map(|&v| 0.5 * v * (1.0 + erf(v * FRAC_1_SQRT_2)))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.derived(Op::Gelu { x }, shape, values, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let values: Vec<f64> = self.nodes[x.0].values.iter().map(|&v| sigmoid(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.derived(Op::Sigmoid { x }, shape, values, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let values: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v.exp()).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.derived(Op::Exp { x }, shape, values, &[x])
    }

    /// Natural log of `max(x, EPSILON)`.
    pub fn log(&mut self, x: Var) -> Var {
        let values: Vec<f64> = self.nodes[x.0]
            .values
            .iter()
            .map(|v| v.max(EPSILON).ln())
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.derived(Op::Log { x }, shape, values, &[x])
    }

    /// Square root of `max(x, EPSILON)`.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let values: Vec<f64> = self.nodes[x.0]
            .values
            .iter()
            .map(|v| v.max(EPSILON).sqrt())
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.derived(Op::Sqrt { x }, shape, values, &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let values: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v * v).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.derived(Op::Square { x }, shape, values, &[x])
    }

    pub fn negate(&mut self, x: Var) -> Var {
        let values: Vec<f64> = self.nodes[x.0].values.iter().map(|v| -v).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.derived(Op::Negate { x }, shape, values, &[x])
    }

    /// Elementwise clamp to `[lo, hi]`; gradient is zero outside the band.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let values: Vec<f64> = self.nodes[x.0]
            .values
            .iter()
            .map(|v| v.clamp(lo, hi))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.derived(Op::Clamp { x, lo, hi }, shape, values, &[x])
    }

    // ── Reductions ──────────────────────────────────────────────────────

    /// Sum over all elements (`axis: None`, scalar output) or along one
    /// axis of a 2-D tensor (`0` -> per-column, `1` -> per-row).
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce("sum", x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce("mean", x, axis, true)
    }

    fn reduce(&mut self, name: &'static str, x: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let (values, shape) = match axis {
            None => {
                let total: f64 = self.nodes[x.0].values.iter().sum();
                let n = self.nodes[x.0].values.len() as f64;
                (vec![if mean { total / n } else { total }], vec![1])
            }
            Some(ax) => {
                if self.nodes[x.0].shape.len() != 2 || ax > 1 {
                    return Err(McvaeError::ShapeMismatch {
                        op: name,
                        lhs: fmt_shape(&self.nodes[x.0].shape),
                        rhs: format!("axis {ax}"),
                    });
                }
                let (r, c) = self.rows_cols(x);
                let data = &self.nodes[x.0].values;
                if ax == 0 {
                    let mut out = vec![0.0; c];
                    for i in 0..r {
                        for (j, o) in out.iter_mut().enumerate() {
                            *o += data[i * c + j];
                        }
                    }
                    if mean {
                        out.iter_mut().for_each(|o| *o /= r as f64);
                    }
                    (out, vec![c])
                } else {
                    let mut out = vec![0.0; r];
                    for (i, o) in out.iter_mut().enumerate() {
                        *o = data[i * c..(i + 1) * c].iter().sum();
                        if mean {
                            *o /= c as f64;
                        }
                    }
                    (out, vec![r])
                }
            }
        };
        let op = if mean {
            Op::Mean { x, axis }
        } else {
            Op::Sum { x, axis }
        };
        Ok(self.derived(op, shape, values, &[x]))
    }

    // ── Shape ops ───────────────────────────────────────────────────────

    /// Repeat a vector `[d]` as every row of an `[rows, d]` matrix.
    pub fn broadcast_row(&mut self, x: Var, rows: usize) -> Result<Var> {
        if self.nodes[x.0].shape.len() != 1 {
            return Err(McvaeError::ShapeMismatch {
                op: "broadcast",
                lhs: fmt_shape(&self.nodes[x.0].shape),
                rhs: format!("[{rows}x_]"),
            });
        }
        let d = self.nodes[x.0].values.len();
        let mut values = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            values.extend_from_slice(&self.nodes[x.0].values);
        }
        Ok(self.derived(Op::BroadcastRow { x }, vec![rows, d], values, &[x]))
    }

    /// Repeat a vector `[n]` as every column of an `[n, cols]` matrix.
    pub fn broadcast_col(&mut self, x: Var, cols: usize) -> Result<Var> {
        if self.nodes[x.0].shape.len() != 1 {
            return Err(McvaeError::ShapeMismatch {
                op: "broadcast",
                lhs: fmt_shape(&self.nodes[x.0].shape),
                rhs: format!("[_x{cols}]"),
            });
        }
        let n = self.nodes[x.0].values.len();
        let mut values = Vec::with_capacity(n * cols);
        for i in 0..n {
            let v = self.nodes[x.0].values[i];
            values.extend(std::iter::repeat_n(v, cols));
        }
        Ok(self.derived(Op::BroadcastCol { x }, vec![n, cols], values, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.nodes[x.0].shape.len() != 2 {
            return Err(McvaeError::ShapeMismatch {
                op: "transpose",
                lhs: fmt_shape(&self.nodes[x.0].shape),
                rhs: "[rxc]".to_string(),
            });
        }
        let (r, c) = self.rows_cols(x);
        let data = &self.nodes[x.0].values;
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                values[j * r + i] = data[i * c + j];
            }
        }
        Ok(self.derived(Op::Transpose { x }, vec![c, r], values, &[x]))
    }

    /// Concatenate along `axis` (0 = stack rows, 1 = side by side).
    /// 1-D tensors concatenate end to end with `axis = 0`.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(McvaeError::InvalidArgument("concat of zero tensors".into()));
        }
        let one_d = self.nodes[xs[0].0].shape.len() == 1;
        if one_d {
            if axis != 0 {
                return Err(McvaeError::ShapeMismatch {
                    op: "concat",
                    lhs: fmt_shape(&self.nodes[xs[0].0].shape),
                    rhs: format!("axis {axis}"),
                });
            }
            let mut values = Vec::new();
            for v in xs {
                if self.nodes[v.0].shape.len() != 1 {
                    return Err(McvaeError::ShapeMismatch {
                        op: "concat",
                        lhs: fmt_shape(&self.nodes[xs[0].0].shape),
                        rhs: fmt_shape(&self.nodes[v.0].shape),
                    });
                }
                values.extend_from_slice(&self.nodes[v.0].values);
            }
            let n = values.len();
            return Ok(self.derived(Op::Concat { xs: xs.to_vec(), axis }, vec![n], values, xs));
        }

        let (r0, c0) = self.rows_cols(xs[0]);
        match axis {
            0 => {
                let mut rows = 0;
                let mut values = Vec::new();
                for v in xs {
                    let (r, c) = self.rows_cols(*v);
                    if c != c0 || self.nodes[v.0].shape.len() != 2 {
                        return Err(McvaeError::ShapeMismatch {
                            op: "concat",
                            lhs: fmt_shape(&self.nodes[xs[0].0].shape),
                            rhs: fmt_shape(&self.nodes[v.0].shape),
                        });
                    }
                    rows += r;
                    values.extend_from_slice(&self.nodes[v.0].values);
                }
                Ok(self.derived(Op::Concat { xs: xs.to_vec(), axis }, vec![rows, c0], values, xs))
            }
            1 => {
                let mut cols = 0;
                for v in xs {
                    let (r, c) = self.rows_cols(*v);
                    if r != r0 || self.nodes[v.0].shape.len() != 2 {
                        return Err(McvaeError::ShapeMismatch {
                            op: "concat",
                            lhs: fmt_shape(&self.nodes[xs[0].0].shape),
                            rhs: fmt_shape(&self.nodes[v.0].shape),
                        });
                    }
                    cols += c;
                }
                let mut values = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for v in xs {
                        let (_, c) = self.rows_cols(*v);
                        values.extend_from_slice(&self.nodes[v.0].values[i * c..(i + 1) * c]);
                    }
                }
                Ok(self.derived(Op::Concat { xs: xs.to_vec(), axis }, vec![r0, cols], values, xs))
            }
            _ => Err(McvaeError::InvalidArgument(format!("concat axis {axis}"))),
        }
    }

    /// Rows `[start, end)` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        if self.nodes[x.0].shape.len() != 2 || start >= end || end > r {
            return Err(McvaeError::ShapeMismatch {
                op: "slice",
                lhs: fmt_shape(&self.nodes[x.0].shape),
                rhs: format!("rows {start}..{end}"),
            });
        }
        let values = self.nodes[x.0].values[start * c..end * c].to_vec();
        Ok(self.derived(Op::SliceRows { x, start }, vec![end - start, c], values, &[x]))
    }

    /// Element range `[start, end)` of a 1-D tensor, or column range of a 2-D one.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        if start >= end || end > c {
            return Err(McvaeError::ShapeMismatch {
                op: "slice",
                lhs: fmt_shape(&self.nodes[x.0].shape),
                rhs: format!("cols {start}..{end}"),
            });
        }
        let w = end - start;
        let mut values = Vec::with_capacity(r * w);
        for i in 0..r {
            values.extend_from_slice(&self.nodes[x.0].values[i * c + start..i * c + end]);
        }
        let shape = if self.nodes[x.0].shape.len() == 1 {
            vec![w]
        } else {
            vec![r, w]
        };
        Ok(self.derived(Op::SliceCols { x, start }, shape, values, &[x]))
    }

    /// Place rows of `x` at the given indices of an otherwise-zero
    /// `[out_rows, d]` matrix.
    pub fn scatter_rows(&mut self, x: Var, rows: &[usize], out_rows: usize) -> Result<Var> {
        let (m, d) = self.rows_cols(x);
        if self.nodes[x.0].shape.len() != 2 || rows.len() != m {
            return Err(McvaeError::ShapeMismatch {
                op: "scatter-rows",
                lhs: fmt_shape(&self.nodes[x.0].shape),
                rhs: format!("{} row indices", rows.len()),
            });
        }
        if rows.iter().any(|&r| r >= out_rows) {
            return Err(McvaeError::InvalidArgument(
                "scatter-rows index out of range".into(),
            ));
        }
        let mut values = vec![0.0; out_rows * d];
        for (p, &r) in rows.iter().enumerate() {
            values[r * d..(r + 1) * d].copy_from_slice(&self.nodes[x.0].values[p * d..(p + 1) * d]);
        }
        Ok(self.derived(
            Op::ScatterRows { x, rows: rows.to_vec() },
            vec![out_rows, d],
            values,
            &[x],
        ))
    }

    // ── Structured ops ──────────────────────────────────────────────────

    /// Row-wise softmax with max subtraction (1-D input is one row).
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.rows_cols(x);
        let data = &self.nodes[x.0].values;
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            let row = &data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                values[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                values[i * c + j] /= sum;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        self.derived(Op::SoftmaxRows { x }, shape, values, &[x])
    }

    /// log(sum(exp(x))) over all elements, max-subtracted.
    pub fn logsumexp(&mut self, x: Var) -> Var {
        let v = stable_lse(&self.nodes[x.0].values);
        self.derived(Op::LogSumExp { x }, vec![1], vec![v], &[x])
    }

    /// Row-wise log-sum-exp of a 2-D tensor -> `[rows]`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        if self.nodes[x.0].shape.len() != 2 {
            return Err(McvaeError::ShapeMismatch {
                op: "logsumexp-rows",
                lhs: fmt_shape(&self.nodes[x.0].shape),
                rhs: "[rxc]".to_string(),
            });
        }
        let (r, c) = self.rows_cols(x);
        let data = &self.nodes[x.0].values;
        let values: Vec<f64> = (0..r).map(|i| stable_lse(&data[i * c..(i + 1) * c])).collect();
        Ok(self.derived(Op::LogSumExpRows { x }, vec![r], values, &[x]))
    }

    /// Divide each row by max(its L2 norm, EPSILON).
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let (r, c) = self.rows_cols(x);
        let data = &self.nodes[x.0].values;
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            let row = &data[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(EPSILON);
            for j in 0..c {
                values[i * c + j] = row[j] / norm;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        self.derived(Op::RowNormalize { x }, shape, values, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rows_cols(a);
        let (k2, n) = self.rows_cols(b);
        if self.nodes[a.0].shape.len() != 2 || self.nodes[b.0].shape.len() != 2 || k != k2 {
            return Err(McvaeError::ShapeMismatch {
                op: "matmul",
                lhs: fmt_shape(&self.nodes[a.0].shape),
                rhs: fmt_shape(&self.nodes[b.0].shape),
            });
        }
        let mut values = vec![0.0; m * n];
        mm_nn(
            &self.nodes[a.0].values,
            &self.nodes[b.0].values,
            &mut values,
            m,
            k,
            n,
        );
        Ok(self.derived(Op::Matmul { a, b }, vec![m, n], values, &[a, b]))
    }

    // ── Composition helpers ─────────────────────────────────────────────

    /// L2 norm over all elements: sqrt(sum(x^2)) with the sqrt epsilon guard.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let sq = self.square(x);
        let s = self.sum(sq, None)?;
        Ok(self.sqrt(s))
    }

    /// Row-wise cosine similarity of two equal-shape 2-D tensors -> `[rows]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("cosine-similarity", a, b)?;
        let an = self.row_normalize(a);
        let bn = self.row_normalize(b);
        let prod = self.mul(an, bn)?;
        if self.nodes[prod.0].shape.len() == 1 {
            self.sum(prod, None)
        } else {
            self.sum(prod, Some(1))
        }
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse accumulation from a scalar loss. Every trainable leaf the
    /// loss depends on receives its adjoint; constants are never written.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(McvaeError::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {}",
                fmt_shape(&self.nodes[loss.0].shape)
            )));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            self.backprop_node(id, &op);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: Var, contrib: &[f64]) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        match &mut self.nodes[target.0].grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => self.nodes[target.0].grad = Some(contrib.to_vec()),
        }
    }

    fn backprop_node(&mut self, id: usize, op: &Op) {
        let g = self.nodes[id].grad.clone().expect("grad present");
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.rows_cols(*a);
                let (_, n) = self.rows_cols(*b);
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; m * k];
                    mm_nt(&g, &self.nodes[b.0].values, &mut da, m, n, k);
                    self.accumulate(*a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; k * n];
                    mm_tn(&self.nodes[a.0].values, &g, &mut db, m, k, n);
                    self.accumulate(*b, &db);
                }
            }
            Op::Transpose { x } => {
                let (r, c) = self.rows_cols(id_var(id));
                // output is [r, c]; input is [c, r]
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = g[i * c + j];
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::Add { a, b } => {
                self.accumulate(*a, &g);
                self.accumulate(*b, &g);
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, &g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].needs_grad {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[b.0].values)
                        .map(|(gi, bv)| gi * bv)
                        .collect();
                    self.accumulate(*a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].values)
                        .map(|(gi, av)| gi * av)
                        .collect();
                    self.accumulate(*b, &db);
                }
            }
            Op::Div { a, b } => {
                if self.nodes[a.0].needs_grad {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[b.0].values)
                        .map(|(gi, bv)| gi / clamp_denom(*bv))
                        .collect();
                    self.accumulate(*a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[a.0].values.iter().zip(&self.nodes[b.0].values))
                        .map(|(gi, (av, bv))| {
                            if bv.abs() > EPSILON {
                                -gi * av / (bv * bv)
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.accumulate(*b, &db);
                }
            }
            Op::AddScalar { x } => self.accumulate(*x, &g),
            Op::MulScalar { x, c } => {
                let dx: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                self.accumulate(*x, &dx);
            }
            Op::ScaleByVar { x, s } => {
                let sv = self.nodes[s.0].values[0];
                if self.nodes[x.0].needs_grad {
                    let dx: Vec<f64> = g.iter().map(|gi| gi * sv).collect();
                    self.accumulate(*x, &dx);
                }
                if self.nodes[s.0].needs_grad {
                    let ds: f64 = g
                        .iter()
                        .zip(&self.nodes[x.0].values)
                        .map(|(gi, xv)| gi * xv)
                        .sum();
                    self.accumulate(*s, &[ds]);
                }
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x.0].values)
                    .map(|(gi, xv)| if *xv > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Gelu { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x.0].values)
                    .map(|(gi, &xv)| {
                        let cdf = 0.5 * (1.0 + erf(xv * FRAC_1_SQRT_2));
                        let pdf = INV_SQRT_2PI * (-0.5 * xv * xv).exp();
                        gi * (cdf + xv * pdf)
                    })
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Sigmoid { x } => {
                let out = self.nodes[id].values.clone();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&out)
                    .map(|(gi, y)| gi * y * (1.0 - y))
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Exp { x } => {
                let out = self.nodes[id].values.clone();
                let dx: Vec<f64> = g.iter().zip(&out).map(|(gi, y)| gi * y).collect();
                self.accumulate(*x, &dx);
            }
            Op::Log { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x.0].values)
                    .map(|(gi, &xv)| if xv > EPSILON { gi / xv } else { 0.0 })
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Sqrt { x } => {
                let out = self.nodes[id].values.clone();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[x.0].values.iter().zip(&out))
                    .map(|(gi, (&xv, y))| if xv > EPSILON { gi * 0.5 / y } else { 0.0 })
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Square { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x.0].values)
                    .map(|(gi, xv)| gi * 2.0 * xv)
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Negate { x } => {
                let dx: Vec<f64> = g.iter().map(|gi| -gi).collect();
                self.accumulate(*x, &dx);
            }
            Op::Clamp { x, lo, hi } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x.0].values)
                    .map(|(gi, xv)| if *xv >= *lo && *xv <= *hi { *gi } else { 0.0 })
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let mean = matches!(op, Op::Mean { .. });
                let (r, c) = self.rows_cols(*x);
                let n = self.nodes[x.0].values.len();
                let mut dx = vec![0.0; n];
                match axis {
                    None => {
                        let scale = if mean { g[0] / n as f64 } else { g[0] };
                        dx.iter_mut().for_each(|v| *v = scale);
                    }
                    Some(0) => {
                        for i in 0..r {
                            for j in 0..c {
                                dx[i * c + j] = if mean { g[j] / r as f64 } else { g[j] };
                            }
                        }
                    }
                    Some(_) => {
                        for i in 0..r {
                            for j in 0..c {
                                dx[i * c + j] = if mean { g[i] / c as f64 } else { g[i] };
                            }
                        }
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::BroadcastRow { x } => {
                let d = self.nodes[x.0].values.len();
                let rows = self.nodes[id].values.len() / d;
                let mut dx = vec![0.0; d];
                for i in 0..rows {
                    for (j, v) in dx.iter_mut().enumerate() {
                        *v += g[i * d + j];
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::BroadcastCol { x } => {
                let n = self.nodes[x.0].values.len();
                let cols = self.nodes[id].values.len() / n;
                let dx: Vec<f64> = (0..n).map(|i| g[i * cols..(i + 1) * cols].iter().sum()).collect();
                self.accumulate(*x, &dx);
            }
            Op::Concat { xs, axis } => {
                let one_d = self.nodes[xs[0].0].shape.len() == 1;
                if one_d || *axis == 0 {
                    let mut offset = 0;
                    for v in xs {
                        let len = self.nodes[v.0].values.len();
                        if self.nodes[v.0].needs_grad {
                            self.accumulate(*v, &g[offset..offset + len]);
                        }
                        offset += len;
                    }
                } else {
                    let (rows, total_cols) = self.rows_cols(id_var(id));
                    let mut offset = 0;
                    for v in xs {
                        let (_, c) = self.rows_cols(*v);
                        if self.nodes[v.0].needs_grad {
                            let mut dv = vec![0.0; rows * c];
                            for i in 0..rows {
                                dv[i * c..(i + 1) * c].copy_from_slice(
                                    &g[i * total_cols + offset..i * total_cols + offset + c],
                                );
                            }
                            self.accumulate(*v, &dv);
                        }
                        offset += c;
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let (r, c) = self.rows_cols(*x);
                let out_rows = self.nodes[id].values.len() / c;
                let mut dx = vec![0.0; r * c];
                dx[start * c..(start + out_rows) * c].copy_from_slice(&g);
                self.accumulate(*x, &dx);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.rows_cols(*x);
                let w = self.nodes[id].values.len() / r;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                self.accumulate(*x, &dx);
            }
            Op::ScatterRows { x, rows } => {
                let (_, d) = self.rows_cols(*x);
                let mut dx = vec![0.0; rows.len() * d];
                for (p, &r) in rows.iter().enumerate() {
                    dx[p * d..(p + 1) * d].copy_from_slice(&g[r * d..(r + 1) * d]);
                }
                self.accumulate(*x, &dx);
            }
            Op::SoftmaxRows { x } => {
                let (r, c) = self.rows_cols(*x);
                let y = self.nodes[id].values.clone();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let base = i * c;
                    let dot: f64 = (0..c).map(|j| g[base + j] * y[base + j]).sum();
                    for j in 0..c {
                        dx[base + j] = y[base + j] * (g[base + j] - dot);
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::LogSumExp { x } => {
                let out = self.nodes[id].values[0];
                let dx: Vec<f64> = self.nodes[x.0]
                    .values
                    .iter()
                    .map(|&xv| g[0] * (xv - out).exp())
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::LogSumExpRows { x } => {
                let (r, c) = self.rows_cols(*x);
                let out = self.nodes[id].values.clone();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[i] * (self.nodes[x.0].values[i * c + j] - out[i]).exp();
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::RowNormalize { x } => {
                let (r, c) = self.rows_cols(*x);
                let y = self.nodes[id].values.clone();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let row = &self.nodes[x.0].values[i * c..(i + 1) * c];
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let base = i * c;
                    if norm > EPSILON {
                        let dot: f64 = (0..c).map(|j| g[base + j] * y[base + j]).sum();
                        for j in 0..c {
                            dx[base + j] = (g[base + j] - y[base + j] * dot) / norm;
                        }
                    } else {
                        for j in 0..c {
                            dx[base + j] = g[base + j] / EPSILON;
                        }
                    }
                }
                self.accumulate(*x, &dx);
            }
        }
    }
}

fn id_var(id: usize) -> Var {
    Var(id)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn clamp_denom(b: f64) -> f64 {
    if b.abs() >= EPSILON {
        b
    } else if b.is_sign_negative() {
        -EPSILON
    } else {
        EPSILON
    }
}

fn stable_lse(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

// out[m,n] += a[m,k] @ b[k,n]
fn mm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

// out[m,k] += a[m,n] @ b[n,k]^T  i.e. out[i][j] = dot(a_row_i, b_row_j)
fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            *o += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// out[k,n] += a[m,k]^T @ b[m,n]
fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: Vec<f64>) -> Tensor {
        Tensor::vector(v)
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.input(t(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut g = Graph::new();
        let x = g.input(t(vec![0.0, 0.0, 0.0]));
        let y = g.softmax_rows(x);
        for v in g.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let sum: f64 = g.value(y).iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.input(Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let a_data = vec![2., -1., 3., 0.5, 4., -2., 7., 1., 9.];
        let a = g.input(Tensor::matrix(3, 3, a_data.clone()).unwrap());
        let y = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(y), a_data.as_slice());
    }

    #[test]
    fn square_gradient_analytic() {
        // loss = x^2 at x = 3 -> dloss/dx = 6
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.square(x);
        g.backward(y).unwrap();
        assert!((g.grad(x).unwrap()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn fanout_accumulates() {
        // loss = x + x at x = 1 -> gradient 2
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.0));
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert!((g.grad(x).unwrap()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn detached_tensor_not_written() {
        let mut g = Graph::new();
        let c = g.input(t(vec![1.0, 2.0]));
        let p = g.param(t(vec![3.0, 4.0]));
        let prod = g.mul(c, p).unwrap();
        let loss = g.sum(prod, None).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(p).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(t(vec![1.0, 2.0]));
        let y = g.relu(x);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn shape_mismatch_diagnostic_names_op() {
        let mut g = Graph::new();
        let a = g.input(t(vec![1.0, 2.0]));
        let b = g.input(t(vec![1.0, 2.0, 3.0]));
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn identical_passes_bitwise_equal() {
        let run = || {
            let mut g = Graph::new();
            let x = g.input(t(vec![0.3, -1.7, 2.2]));
            let w = g.input(Tensor::matrix(3, 3, vec![0.1; 9]).unwrap());
            let xm = g.input(Tensor::matrix(1, 3, vec![0.3, -1.7, 2.2]).unwrap());
            let h = g.matmul(xm, w).unwrap();
            let s = g.sigmoid(h);
            let _ = x;
            let l = g.sum(s, None).unwrap();
            g.scalar_value(l).to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn logsumexp_matches_naive_on_moderate_values() {
        let mut g = Graph::new();
        let x = g.input(t(vec![0.1, -0.5, 1.7]));
        let l = g.logsumexp(x);
        let naive = (0.1f64.exp() + (-0.5f64).exp() + 1.7f64.exp()).ln();
        assert!((g.scalar_value(l) - naive).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_stable_for_large_inputs() {
        let mut g = Graph::new();
        let x = g.input(t(vec![1000.0, 999.0]));
        let l = g.logsumexp(x);
        assert!((g.scalar_value(l) - (1000.0 + (1.0 + (-1.0f64).exp()).ln())).abs() < 1e-9);
    }

    #[test]
    fn scatter_rows_roundtrip() {
        let mut g = Graph::new();
        let x = g.param(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let s = g.scatter_rows(x, &[2, 0], 3).unwrap();
        assert_eq!(g.value(s), &[3., 4., 0., 0., 1., 2.]);
        let total = g.sum(s, None).unwrap();
        g.backward(total).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn transpose_and_concat() {
        let mut g = Graph::new();
        let a = g.input(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let at = g.transpose(a).unwrap();
        assert_eq!(g.shape(at), &[3, 2]);
        assert_eq!(g.value(at), &[1., 4., 2., 5., 3., 6.]);

        let b = g.input(Tensor::matrix(2, 1, vec![7., 8.]).unwrap());
        let cat = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(cat), &[2, 4]);
        assert_eq!(g.value(cat), &[1., 2., 3., 7., 4., 5., 6., 8.]);
    }
}
