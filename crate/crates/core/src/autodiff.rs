//! Minimal reverse-mode differentiation over dense f64 matrices.
//!
//! A [`Tape`] records define-by-run; every operation computes its value
//! immediately and remembers enough to produce exact analytic gradients on
//! [`Tape::backward`]. Tapes are rebuilt every epoch and owned by a single
//! training session, so there is no shared state between sessions.
//!
//! Shapes are two-dimensional. Binary elementwise operations broadcast a
//! scalar (1, 1), a row (1, c) or a column (r, 1) against a full matrix.

use crate::error::{Error, Result};
use crate::linalg::{matmul_a_bt_accum, matmul_at_b_accum, matmul_into, Mat};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    Transpose(Var),
    SumAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    VarianceAxis(Var, usize),
    L2Norm(Var),
    /// base^M elementwise for a scalar base and a fixed exponent matrix.
    ScalarPowerBase { base: Var, exponents: Mat },
    /// Per-column geometric accumulation: y[0] = x[0], y[t] = p .* y[t-1] + x[t].
    DecayFilter { p: Var, x: Var },
    /// Rows shifted down by one; the first row is a constant fill.
    ShiftRows { x: Var },
    SliceCols { x: Var, c0: usize },
    SliceRows { x: Var, r0: usize },
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Recording of one differentiable computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn value_mat(&self, v: Var) -> Mat {
        let n = &self.nodes[v.0];
        Mat::from_vec(n.rows, n.cols, n.data.clone())
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.shape(v), (1, 1));
        self.nodes[v.0].data[0]
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node {
            rows,
            cols,
            data,
            grad,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A learnable leaf; gradients are accumulated for it.
    pub fn leaf(&mut self, value: &Mat) -> Var {
        self.push(value.rows, value.cols, value.data.clone(), true, Op::Leaf)
    }

    /// A constant leaf; no gradient is propagated into it.
    pub fn constant(&mut self, value: &Mat) -> Var {
        self.push(value.rows, value.cols, value.data.clone(), false, Op::Leaf)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.push(1, 1, vec![value], false, Op::Leaf)
    }

    fn binary_shape(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let out = if sa == sb {
            sa
        } else if sa == (1, 1) {
            sb
        } else if sb == (1, 1) {
            sa
        } else if sa.1 == sb.1 && (sa.0 == 1 || sb.0 == 1) {
            (sa.0.max(sb.0), sa.1)
        } else if sa.0 == sb.0 && (sa.1 == 1 || sb.1 == 1) {
            (sa.0, sa.1.max(sb.1))
        } else {
            return Err(Error::ShapeMismatch { op, lhs: sa, rhs: sb });
        };
        Ok(out)
    }

    #[inline]
    fn fetch(data: &[f64], shape: (usize, usize), i: usize, j: usize) -> f64 {
        match shape {
            (1, 1) => data[0],
            (1, c) => {
                debug_assert!(j < c);
                data[j]
            }
            (_, 1) => data[i],
            (_, c) => data[i * c + j],
        }
    }

    fn binary<F>(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: F) -> Result<Var>
    where
        F: Fn(f64, f64) -> f64,
    {
        let (rows, cols) = self.binary_shape(name, a, b)?;
        let sa = self.shape(a);
        let sb = self.shape(b);
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let x = Self::fetch(&self.nodes[a.0].data, sa, i, j);
                let y = Self::fetch(&self.nodes[b.0].data, sb, i, j);
                data.push(f(x, y));
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(rows, cols, data, needs, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[b.0].data.contains(&0.0) {
            return Err(Error::DomainError {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn unary<F>(&mut self, a: Var, op: Op, f: F) -> Var
    where
        F: Fn(f64) -> f64,
    {
        let (rows, cols) = self.shape(a);
        let data = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let needs = self.needs(a);
        self.push(rows, cols, data, needs, op)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].data.iter().any(|&v| v <= 0.0) {
            return Err(Error::DomainError {
                op: "log",
                msg: "log of a non-positive value".into(),
            });
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].data.iter().any(|&v| v < 0.0) {
            return Err(Error::DomainError {
                op: "sqrt",
                msg: "sqrt of a negative value".into(),
            });
        }
        Ok(self.unary(a, Op::Sqrt(a), f64::sqrt))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.1 != sb.0 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut data = vec![0.0; sa.0 * sb.1];
        matmul_into(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            &mut data,
            sa.0,
            sa.1,
            sb.1,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(sa.0, sb.1, data, needs, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (rows, cols) = self.shape(a);
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = self.nodes[a.0].data[i * cols + j];
            }
        }
        let needs = self.needs(a);
        self.push(cols, rows, data, needs, Op::Transpose(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total: f64 = self.nodes[a.0].data.iter().sum();
        let needs = self.needs(a);
        self.push(1, 1, vec![total], needs, Op::SumAll(a))
    }

    /// Sum along an axis: axis 0 collapses rows into a (1, c) row, axis 1
    /// collapses columns into an (r, 1) column.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        let (or, oc, data) = match axis {
            0 => {
                let mut out = vec![0.0; cols];
                for i in 0..rows {
                    for j in 0..cols {
                        out[j] += self.nodes[a.0].data[i * cols + j];
                    }
                }
                (1, cols, out)
            }
            1 => {
                let mut out = vec![0.0; rows];
                for i in 0..rows {
                    out[i] = self.nodes[a.0].data[i * cols..(i + 1) * cols].iter().sum();
                }
                (rows, 1, out)
            }
            _ => {
                return Err(Error::DomainError {
                    op: "sum_axis",
                    msg: format!("axis {axis} out of range"),
                })
            }
        };
        let needs = self.needs(a);
        Ok(self.push(or, oc, data, needs, Op::SumAxis(a, axis)))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        let node = &self.nodes[a.0];
        let (or, oc, data) = match axis {
            0 => {
                let mut out = vec![0.0; cols];
                for i in 0..rows {
                    for j in 0..cols {
                        out[j] += node.data[i * cols + j];
                    }
                }
                out.iter_mut().for_each(|v| *v /= rows as f64);
                (1, cols, out)
            }
            1 => {
                let out = (0..rows)
                    .map(|i| {
                        node.data[i * cols..(i + 1) * cols].iter().sum::<f64>() / cols as f64
                    })
                    .collect();
                (rows, 1, out)
            }
            _ => {
                return Err(Error::DomainError {
                    op: "mean_axis",
                    msg: format!("axis {axis} out of range"),
                })
            }
        };
        let needs = self.needs(a);
        Ok(self.push(or, oc, data, needs, Op::MeanAxis(a, axis)))
    }

    /// Population variance along an axis (same collapse convention as
    /// [`Tape::sum_axis`]).
    pub fn variance_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        let node = &self.nodes[a.0];
        let (or, oc, data) = match axis {
            0 => {
                let mut out = vec![0.0; cols];
                for j in 0..cols {
                    let mean: f64 =
                        (0..rows).map(|i| node.data[i * cols + j]).sum::<f64>() / rows as f64;
                    out[j] = (0..rows)
                        .map(|i| {
                            let d = node.data[i * cols + j] - mean;
                            d * d
                        })
                        .sum::<f64>()
                        / rows as f64;
                }
                (1, cols, out)
            }
            1 => {
                let mut out = vec![0.0; rows];
                for i in 0..rows {
                    let row = &node.data[i * cols..(i + 1) * cols];
                    let mean: f64 = row.iter().sum::<f64>() / cols as f64;
                    out[i] = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                        / cols as f64;
                }
                (rows, 1, out)
            }
            _ => {
                return Err(Error::DomainError {
                    op: "variance_axis",
                    msg: format!("axis {axis} out of range"),
                })
            }
        };
        let needs = self.needs(a);
        Ok(self.push(or, oc, data, needs, Op::VarianceAxis(a, axis)))
    }

    /// Global L2 norm over all entries, as a scalar.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let norm = self.nodes[a.0]
            .data
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let needs = self.needs(a);
        self.push(1, 1, vec![norm], needs, Op::L2Norm(a))
    }

    /// base^M elementwise, computed as exp(M * ln base); base must be a
    /// positive scalar. Integer exponent matrices take a fast path.
    pub fn scalar_power_base(&mut self, base: Var, exponents: &Mat) -> Result<Var> {
        if self.shape(base) != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "scalar_power_base",
                lhs: self.shape(base),
                rhs: (1, 1),
            });
        }
        let c = self.nodes[base.0].data[0];
        if c <= 0.0 {
            return Err(Error::DomainError {
                op: "scalar_power_base",
                msg: format!("base {c} must be positive"),
            });
        }
        let max_int = exponents
            .data
            .iter()
            .all(|&m| m >= 0.0 && m.fract() == 0.0 && m < 4096.0)
            .then(|| exponents.data.iter().fold(0.0f64, |a, &b| a.max(b)) as usize);
        let data: Vec<f64> = if let Some(max_m) = max_int {
            let mut powers = Vec::with_capacity(max_m + 1);
            powers.push(1.0);
            for m in 1..=max_m {
                powers.push(powers[m - 1] * c);
            }
            exponents.data.iter().map(|&m| powers[m as usize]).collect()
        } else {
            let ln_c = c.ln();
            exponents.data.iter().map(|&m| (m * ln_c).exp()).collect()
        };
        let needs = self.needs(base);
        Ok(self.push(
            exponents.rows,
            exponents.cols,
            data,
            needs,
            Op::ScalarPowerBase {
                base,
                exponents: exponents.clone(),
            },
        ))
    }

    /// Per-column geometric accumulation along rows (time):
    /// y[0][j] = x[0][j], y[t][j] = p[j] * y[t-1][j] + x[t][j].
    ///
    /// This is the matrix form exp(B ln p) . x of a lower-triangular decay
    /// kernel, evaluated without materializing the T x T kernel.
    pub fn decay_filter(&mut self, p: Var, x: Var) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if self.shape(p) != (1, cols) {
            return Err(Error::ShapeMismatch {
                op: "decay_filter",
                lhs: self.shape(p),
                rhs: (1, cols),
            });
        }
        let pv = self.nodes[p.0].data.clone();
        let xv = &self.nodes[x.0].data;
        let mut data = vec![0.0; rows * cols];
        for j in 0..cols {
            let mut acc = 0.0;
            for t in 0..rows {
                acc = pv[j] * acc + xv[t * cols + j];
                data[t * cols + j] = acc;
            }
        }
        let needs = self.needs(p) || self.needs(x);
        Ok(self.push(rows, cols, data, needs, Op::DecayFilter { p, x }))
    }

    /// Rows shifted down by one; row 0 becomes the fill value, the last input
    /// row falls off.
    pub fn shift_rows(&mut self, x: Var, fill: f64) -> Var {
        let (rows, cols) = self.shape(x);
        let mut data = vec![fill; rows * cols];
        for t in 1..rows {
            let src = &self.nodes[x.0].data[(t - 1) * cols..t * cols];
            data[t * cols..(t + 1) * cols].copy_from_slice(src);
        }
        let needs = self.needs(x);
        self.push(rows, cols, data, needs, Op::ShiftRows { x })
    }

    pub fn slice_cols(&mut self, x: Var, c0: usize, c1: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if c0 >= c1 || c1 > cols {
            return Err(Error::DomainError {
                op: "slice_cols",
                msg: format!("range {c0}..{c1} invalid for {cols} columns"),
            });
        }
        let w = c1 - c0;
        let mut data = Vec::with_capacity(rows * w);
        for i in 0..rows {
            data.extend_from_slice(&self.nodes[x.0].data[i * cols + c0..i * cols + c1]);
        }
        let needs = self.needs(x);
        Ok(self.push(rows, w, data, needs, Op::SliceCols { x, c0 }))
    }

    pub fn slice_rows(&mut self, x: Var, r0: usize, r1: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if r0 >= r1 || r1 > rows {
            return Err(Error::DomainError {
                op: "slice_rows",
                msg: format!("range {r0}..{r1} invalid for {rows} rows"),
            });
        }
        let data = self.nodes[x.0].data[r0 * cols..r1 * cols].to_vec();
        let needs = self.needs(x);
        Ok(self.push(r1 - r0, cols, data, needs, Op::SliceRows { x, r0 }))
    }

    /// Zero every gradient buffer.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad.fill(0.0);
        }
    }

    /// Backpropagate from a scalar loss. Leaf gradients accumulate across
    /// passes; call [`Tape::zero_grad`] between passes if accumulation is
    /// not wanted. Intermediate gradients are scratch space per pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::NotScalar(self.shape(loss)));
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad.fill(0.0);
            }
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize) {
        let op = self.nodes[idx].op.clone();
        let (before, rest) = self.nodes.split_at_mut(idx);
        let node = &rest[0];
        let g = &node.grad;
        let out_shape = (node.rows, node.cols);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate_broadcast(before, a, g, out_shape, |go, _, _| go);
                accumulate_broadcast(before, b, g, out_shape, |go, _, _| go);
            }
            Op::Sub(a, b) => {
                accumulate_broadcast(before, a, g, out_shape, |go, _, _| go);
                accumulate_broadcast(before, b, g, out_shape, |go, _, _| -go);
            }
            Op::Mul(a, b) => {
                let (bd, bs) = (before[b.0].data.clone(), {
                    let nb = &before[b.0];
                    (nb.rows, nb.cols)
                });
                let (ad, as_) = (before[a.0].data.clone(), {
                    let na = &before[a.0];
                    (na.rows, na.cols)
                });
                accumulate_broadcast(before, a, g, out_shape, |go, i, j| {
                    go * Self::fetch(&bd, bs, i, j)
                });
                accumulate_broadcast(before, b, g, out_shape, |go, i, j| {
                    go * Self::fetch(&ad, as_, i, j)
                });
            }
            Op::Div(a, b) => {
                let (bd, bs) = (before[b.0].data.clone(), {
                    let nb = &before[b.0];
                    (nb.rows, nb.cols)
                });
                let (ad, as_) = (before[a.0].data.clone(), {
                    let na = &before[a.0];
                    (na.rows, na.cols)
                });
                accumulate_broadcast(before, a, g, out_shape, |go, i, j| {
                    go / Self::fetch(&bd, bs, i, j)
                });
                accumulate_broadcast(before, b, g, out_shape, |go, i, j| {
                    let bv = Self::fetch(&bd, bs, i, j);
                    -go * Self::fetch(&ad, as_, i, j) / (bv * bv)
                });
            }
            Op::Neg(a) => {
                if before[a.0].needs_grad {
                    for (ga, &go) in before[a.0].grad.iter_mut().zip(g) {
                        *ga -= go;
                    }
                }
            }
            Op::Exp(a) => {
                if before[a.0].needs_grad {
                    let y = &node.data;
                    let target = &mut before[a.0];
                    for ((ga, &go), &yv) in target.grad.iter_mut().zip(g).zip(y) {
                        *ga += go * yv;
                    }
                }
            }
            Op::Log(a) => {
                if before[a.0].needs_grad {
                    let target = &mut before[a.0];
                    for i in 0..g.len() {
                        target.grad[i] += g[i] / target.data[i];
                    }
                }
            }
            Op::Sqrt(a) => {
                if before[a.0].needs_grad {
                    let y = &node.data;
                    let target = &mut before[a.0];
                    for i in 0..g.len() {
                        target.grad[i] += g[i] * 0.5 / y[i].max(1e-300);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if before[a.0].needs_grad {
                    let y = &node.data;
                    let target = &mut before[a.0];
                    for i in 0..g.len() {
                        target.grad[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (before[a.0].rows, before[a.0].cols);
                let p = before[b.0].cols;
                if before[a.0].needs_grad {
                    let bd = before[b.0].data.clone();
                    matmul_a_bt_accum(g, &bd, &mut before[a.0].grad, m, p, k);
                }
                if before[b.0].needs_grad {
                    let ad = before[a.0].data.clone();
                    matmul_at_b_accum(&ad, g, &mut before[b.0].grad, m, k, p);
                }
            }
            Op::Transpose(a) => {
                if before[a.0].needs_grad {
                    let (rows, cols) = out_shape;
                    let target = &mut before[a.0];
                    for i in 0..rows {
                        for j in 0..cols {
                            target.grad[j * rows + i] += g[i * cols + j];
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if before[a.0].needs_grad {
                    let go = g[0];
                    for ga in before[a.0].grad.iter_mut() {
                        *ga += go;
                    }
                }
            }
            Op::SumAxis(a, axis) => {
                if before[a.0].needs_grad {
                    let target = &mut before[a.0];
                    let (rows, cols) = (target.rows, target.cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            target.grad[i * cols + j] += if axis == 0 { g[j] } else { g[i] };
                        }
                    }
                }
            }
            Op::MeanAxis(a, axis) => {
                if before[a.0].needs_grad {
                    let target = &mut before[a.0];
                    let (rows, cols) = (target.rows, target.cols);
                    let m = if axis == 0 { rows } else { cols } as f64;
                    for i in 0..rows {
                        for j in 0..cols {
                            target.grad[i * cols + j] +=
                                (if axis == 0 { g[j] } else { g[i] }) / m;
                        }
                    }
                }
            }
            Op::VarianceAxis(a, axis) => {
                if before[a.0].needs_grad {
                    let target = &mut before[a.0];
                    let (rows, cols) = (target.rows, target.cols);
                    match axis {
                        0 => {
                            for j in 0..cols {
                                let mean: f64 = (0..rows)
                                    .map(|i| target.data[i * cols + j])
                                    .sum::<f64>()
                                    / rows as f64;
                                for i in 0..rows {
                                    target.grad[i * cols + j] += g[j]
                                        * 2.0
                                        * (target.data[i * cols + j] - mean)
                                        / rows as f64;
                                }
                            }
                        }
                        _ => {
                            for i in 0..rows {
                                let row = &target.data[i * cols..(i + 1) * cols];
                                let mean: f64 = row.iter().sum::<f64>() / cols as f64;
                                for j in 0..cols {
                                    target.grad[i * cols + j] += g[i]
                                        * 2.0
                                        * (target.data[i * cols + j] - mean)
                                        / cols as f64;
                                }
                            }
                        }
                    }
                }
            }
            Op::L2Norm(a) => {
                if before[a.0].needs_grad {
                    let norm = node.data[0].max(1e-300);
                    let go = g[0];
                    let target = &mut before[a.0];
                    for i in 0..target.grad.len() {
                        target.grad[i] += go * target.data[i] / norm;
                    }
                }
            }
            Op::ScalarPowerBase { base, exponents } => {
                if before[base.0].needs_grad {
                    let c = before[base.0].data[0];
                    // d(c^m)/dc = m * c^(m-1) = m * y / c.
                    let mut acc = 0.0;
                    for i in 0..g.len() {
                        acc += g[i] * exponents.data[i] * node.data[i] / c;
                    }
                    before[base.0].grad[0] += acc;
                }
            }
            Op::DecayFilter { p, x } => {
                let (rows, cols) = out_shape;
                let pv = before[p.0].data.clone();
                let y = &node.data;
                if before[x.0].needs_grad {
                    // dL/dx[t] = g[t] + p * dL/dx[t+1], walked backwards.
                    let target = &mut before[x.0];
                    let mut h = vec![0.0; cols];
                    for t in (0..rows).rev() {
                        for j in 0..cols {
                            h[j] = g[t * cols + j] + pv[j] * h[j];
                            target.grad[t * cols + j] += h[j];
                        }
                    }
                }
                if before[p.0].needs_grad {
                    // w[t] = dy[t]/dp = y[t-1] + p * w[t-1].
                    let mut acc = vec![0.0; cols];
                    let mut w = vec![0.0; cols];
                    for t in 0..rows {
                        for j in 0..cols {
                            if t > 0 {
                                w[j] = y[(t - 1) * cols + j] + pv[j] * w[j];
                            }
                            acc[j] += g[t * cols + j] * w[j];
                        }
                    }
                    for (gp, a) in before[p.0].grad.iter_mut().zip(acc) {
                        *gp += a;
                    }
                }
            }
            Op::ShiftRows { x } => {
                if before[x.0].needs_grad {
                    let (rows, cols) = out_shape;
                    let target = &mut before[x.0];
                    for t in 1..rows {
                        for j in 0..cols {
                            target.grad[(t - 1) * cols + j] += g[t * cols + j];
                        }
                    }
                }
            }
            Op::SliceCols { x, c0 } => {
                if before[x.0].needs_grad {
                    let (rows, w) = out_shape;
                    let target = &mut before[x.0];
                    let cols = target.cols;
                    for i in 0..rows {
                        for j in 0..w {
                            target.grad[i * cols + c0 + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::SliceRows { x, r0 } => {
                if before[x.0].needs_grad {
                    let (rows, cols) = out_shape;
                    let target = &mut before[x.0];
                    for i in 0..rows {
                        for j in 0..cols {
                            target.grad[(r0 + i) * cols + j] += g[i * cols + j];
                        }
                    }
                }
            }
        }
    }
}

/// Accumulate an output gradient into an input that may have been broadcast.
fn accumulate_broadcast<F>(
    nodes: &mut [Node],
    input: Var,
    g: &[f64],
    out_shape: (usize, usize),
    f: F,
) where
    F: Fn(f64, usize, usize) -> f64,
{
    if !nodes[input.0].needs_grad {
        return;
    }
    let target = &mut nodes[input.0];
    let in_shape = (target.rows, target.cols);
    let (rows, cols) = out_shape;
    for i in 0..rows {
        for j in 0..cols {
            let v = f(g[i * cols + j], i, j);
            let idx = match in_shape {
                (1, 1) => 0,
                (1, _) => j,
                (_, 1) => i,
                (_, c) => i * c + j,
            };
            target.grad[idx] += v;
        }
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment buffers and step counter for one parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        OptimizerState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One Adam update with bias correction, in place.
pub fn adam_step(cfg: &AdamConfig, params: &mut [f64], grads: &[f64], state: &mut OptimizerState) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// Central finite difference of f at x along coordinate i.
pub fn central_difference<F>(f: &mut F, x: &mut [f64], i: usize, h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let saved = x[i];
    x[i] = saved + h;
    let hi = f(x);
    x[i] = saved - h;
    let lo = f(x);
    x[i] = saved;
    (hi - lo) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(t: &mut Tape, v: f64) -> Var {
        t.leaf(&Mat::from_vec(1, 1, vec![v]))
    }

    #[test]
    fn sigmoid_value_and_gradient() {
        let mut t = Tape::new();
        let x = scalar(&mut t, 0.0);
        let y = t.sigmoid(x);
        t.backward(y).unwrap();
        assert_eq!(t.data(y)[0], 0.5);
        assert_eq!(t.grad(x)[0], 0.25);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = scalar(&mut t, 3.0);
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x)[0], 6.0);
    }

    #[test]
    fn variance_of_constant_vector_is_zero_with_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(&Mat::from_vec(1, 4, vec![2.5; 4]));
        let v = t.variance_axis(x, 1).unwrap();
        t.backward(v).unwrap();
        assert_eq!(t.data(v)[0], 0.0);
        assert!(t.grad(x).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let w = t.leaf(&Mat::from_vec(2, 3, vec![1.0, -2.0, 0.5, 4.0, 0.0, 9.0]));
        let s = t.sum_all(w);
        t.backward(s).unwrap();
        assert!(t.grad(w).iter().all(|&g| g == 1.0));
    }

    #[test]
    fn least_squares_gradient_matches_analytic_form() {
        // loss = ||W x - y||_2^2, grad_W = 2 (W x - y) x^T.
        let w_mat = Mat::from_vec(2, 2, vec![0.7, -0.3, 1.2, 0.4]);
        let x_mat = Mat::from_vec(2, 1, vec![0.5, -1.5]);
        let y_mat = Mat::from_vec(2, 1, vec![1.0, 0.2]);
        let mut t = Tape::new();
        let w = t.leaf(&w_mat);
        let x = t.constant(&x_mat);
        let y = t.constant(&y_mat);
        let wx = t.matmul(w, x).unwrap();
        let r = t.sub(wx, y).unwrap();
        let sq = t.mul(r, r).unwrap();
        let loss = t.sum_all(sq);
        t.backward(loss).unwrap();

        let r0 = 0.7 * 0.5 + -0.3 * -1.5 - 1.0;
        let r1 = 1.2 * 0.5 + 0.4 * -1.5 - 0.2;
        let expect = [
            2.0 * r0 * 0.5,
            2.0 * r0 * -1.5,
            2.0 * r1 * 0.5,
            2.0 * r1 * -1.5,
        ];
        for (g, e) in t.grad(w).iter().zip(expect) {
            assert!((g - e).abs() < 1e-10, "{g} vs {e}");
        }
    }

    #[test]
    fn broadcast_row_and_column() {
        let mut t = Tape::new();
        let m = t.leaf(&Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let row = t.leaf(&Mat::from_vec(1, 3, vec![10.0, 20.0, 30.0]));
        let col = t.leaf(&Mat::from_vec(2, 1, vec![100.0, 200.0]));
        let a = t.add(m, row).unwrap();
        let b = t.mul(a, col).unwrap();
        let s = t.sum_all(b);
        t.backward(s).unwrap();
        assert_eq!(t.data(b), &[1100.0, 2200.0, 3300.0, 2800.0, 5000.0, 7200.0]);
        // d s / d row_j = sum_i col_i.
        assert_eq!(t.grad(row), &[300.0, 300.0, 300.0]);
        // d s / d col_i = sum_j (m + row)_ij.
        assert_eq!(t.grad(col), &[66.0, 75.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut t = Tape::new();
        let a = t.leaf(&Mat::zeros(2, 3));
        let b = t.leaf(&Mat::zeros(3, 2));
        assert!(matches!(t.add(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(t.matmul(a, a), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn domain_errors_rejected() {
        let mut t = Tape::new();
        let a = t.leaf(&Mat::from_vec(1, 2, vec![1.0, -1.0]));
        assert!(t.log(a).is_err());
        assert!(t.sqrt(a).is_err());
        let z = t.leaf(&Mat::from_vec(1, 2, vec![1.0, 0.0]));
        assert!(t.div(a, z).is_err());
        let big = t.leaf(&Mat::zeros(2, 2));
        assert!(matches!(t.backward(big), Err(Error::NotScalar(_))));
    }

    #[test]
    fn scalar_power_base_matches_decay_filter() {
        // The filter is the matrix form e^{B ln p} applied to x.
        let t_len = 6;
        let p_val = 0.83;
        let x_mat = Mat::from_vec(t_len, 1, vec![0.1, 0.3, 0.05, 0.0, 0.2, 0.07]);
        let mut b_mat = Mat::zeros(t_len, t_len);
        let mut mask = Mat::zeros(t_len, t_len);
        for t in 0..t_len {
            for s in 0..=t {
                b_mat[(t, s)] = (t - s) as f64;
                mask[(t, s)] = 1.0;
            }
        }
        let mut tape = Tape::new();
        let p_scalar = tape.leaf(&Mat::from_vec(1, 1, vec![p_val]));
        let kernel = tape.scalar_power_base(p_scalar, &b_mat).unwrap();
        let mask_c = tape.constant(&mask);
        let masked = tape.mul(kernel, mask_c).unwrap();
        let x = tape.constant(&x_mat);
        let via_matrix = tape.matmul(masked, x).unwrap();

        let p_row = tape.leaf(&Mat::from_vec(1, 1, vec![p_val]));
        let x2 = tape.constant(&x_mat);
        let via_filter = tape.decay_filter(p_row, x2).unwrap();

        for (a, b) in tape.data(via_matrix).iter().zip(tape.data(via_filter)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }

        // Gradients along both routes must agree too.
        let s1 = tape.sum_all(via_matrix);
        let s2 = tape.sum_all(via_filter);
        tape.backward(s1).unwrap();
        tape.backward(s2).unwrap();
        let g1 = tape.grad(p_scalar)[0];
        let g2 = tape.grad(p_row)[0];
        assert!((g1 - g2).abs() < 1e-10, "{g1} vs {g2}");
    }

    #[test]
    fn gradients_match_finite_differences_on_composed_graph() {
        let build = |vals: &[f64]| -> (Tape, Var, Var) {
            let mut t = Tape::new();
            let w = t.leaf(&Mat::from_vec(2, 3, vals.to_vec()));
            let c = t.constant(&Mat::from_vec(3, 2, vec![0.2, -0.4, 1.0, 0.3, -0.7, 0.9]));
            let mm = t.matmul(w, c).unwrap();
            let sg = t.sigmoid(mm);
            let e = t.exp(sg);
            let tr = t.transpose(e);
            let v = t.variance_axis(tr, 0).unwrap();
            let n = t.l2_norm(v);
            let m = t.mean_axis(sg, 1).unwrap();
            let sm = t.sum_all(m);
            let loss = t.add(n, sm).unwrap();
            (t, w, loss)
        };
        let mut x = vec![0.3, -0.8, 0.5, 1.1, -0.2, 0.6];
        let (mut t, w, loss) = build(&x);
        t.backward(loss).unwrap();
        let grads = t.grad(w).to_vec();
        let mut f = |vals: &[f64]| {
            let (t, _, loss) = build(vals);
            t.scalar_value(loss)
        };
        for i in 0..x.len() {
            let fd = central_difference(&mut f, &mut x, i, 1e-5);
            let rel = (grads[i] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-6, "coord {i}: ad {} vs fd {fd}", grads[i]);
        }
    }

    #[test]
    fn decay_filter_gradients_match_finite_differences() {
        let x_mat = Mat::from_vec(5, 2, vec![0.1, 0.2, 0.0, 0.3, 0.4, 0.1, 0.2, 0.0, 0.05, 0.6]);
        let build = |p_vals: &[f64]| -> (Tape, Var, Var) {
            let mut t = Tape::new();
            let p = t.leaf(&Mat::from_vec(1, 2, p_vals.to_vec()));
            let x = t.constant(&x_mat);
            let y = t.decay_filter(p, x).unwrap();
            let sq = t.mul(y, y).unwrap();
            let loss = t.sum_all(sq);
            (t, p, loss)
        };
        let mut p_vals = vec![0.9, 0.4];
        let (mut t, p, loss) = build(&p_vals);
        t.backward(loss).unwrap();
        let grads = t.grad(p).to_vec();
        let mut f = |vals: &[f64]| {
            let (t, _, loss) = build(vals);
            t.scalar_value(loss)
        };
        for i in 0..2 {
            let fd = central_difference(&mut f, &mut p_vals, i, 1e-6);
            let rel = (grads[i] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-6, "coord {i}: ad {} vs fd {fd}", grads[i]);
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = Tape::new();
        let x = scalar(&mut t, 2.0);
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x)[0], 8.0);
        t.zero_grad();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x)[0], 4.0);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let cfg = AdamConfig::default();
        let mut params = vec![1.0, -2.0, 3.0];
        let mut state = OptimizerState::new(3);
        adam_step(&cfg, &mut params, &[0.0, 0.0, 0.0], &mut state);
        assert_eq!(params, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_moves_against_gradient_sign() {
        let cfg = AdamConfig::default();
        let mut params = vec![0.0, 0.0];
        let mut state = OptimizerState::new(2);
        for _ in 0..10 {
            adam_step(&cfg, &mut params, &[0.5, -0.25], &mut state);
        }
        assert!(params[0] < 0.0);
        assert!(params[1] > 0.0);
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        let cfg = AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        };
        let mut x = vec![1.0];
        let mut state = OptimizerState::new(1);
        for _ in 0..500 {
            let g = vec![2.0 * x[0]];
            adam_step(&cfg, &mut x, &g, &mut state);
        }
        assert!(x[0].abs() < 1e-2, "x = {}", x[0]);
    }

    #[test]
    fn tapes_are_isolated_across_threads() {
        let handles: Vec<_> = (0..4)
            .map(|i| {
                std::thread::spawn(move || {
                    let mut t = Tape::new();
                    let x = t.leaf(&Mat::from_vec(1, 1, vec![i as f64 + 1.0]));
                    let y = t.mul(x, x).unwrap();
                    for _ in 0..100 {
                        t.zero_grad();
                        t.backward(y).unwrap();
                    }
                    t.grad(x)[0]
                })
            })
            .collect();
        for (i, h) in handles.into_iter().enumerate() {
            assert_eq!(h.join().unwrap(), 2.0 * (i as f64 + 1.0));
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let cfg = AdamConfig::default();
        let run = || {
            let mut p = vec![0.3, -0.1];
            let mut s = OptimizerState::new(2);
            for i in 0..50 {
                let g = vec![(i as f64).sin(), (i as f64).cos()];
                adam_step(&cfg, &mut p, &g, &mut s);
            }
            p
        };
        assert_eq!(run(), run());
    }
}
