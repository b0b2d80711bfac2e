//! Differentiable primitives and their vector-Jacobian products.
//!
//! Every backward rule is written in terms of these same primitives, so a
//! gradient computed with `create_graph` is itself differentiable.

use crate::error::{Error, Result};

use super::tape::{record, Node, Op, Tape};
use super::tensor::{Shape, Tensor};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Dimension {
            op,
            operand: "rhs",
            expected: a.shape.to_string(),
            got: b.shape.to_string(),
        });
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect()
}

impl Tensor {
    /// Matrix product `self · rhs`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (n, k) = self.expect_matrix("matmul", "lhs")?;
        let (k2, m) = rhs.expect_matrix("matmul", "rhs")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                operand: "rhs",
                expected: format!("{k} rows"),
                got: rhs.shape.to_string(),
            });
        }
        let (a, b) = (&self.data, &rhs.data);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * m..(p + 1) * m];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        record(Op::MatMul, &[self, rhs], Shape::matrix_unchecked(n, m), out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (n, m) = self.expect_matrix("transpose", "input")?;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        record(Op::Transpose, &[self], Shape::matrix_unchecked(m, n), out)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("add", self, rhs)?;
        record(Op::Add, &[self, rhs], self.shape.clone(), zip_map(self, rhs, |a, b| a + b))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, rhs)?;
        record(Op::Sub, &[self, rhs], self.shape.clone(), zip_map(self, rhs, |a, b| a - b))
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, rhs)?;
        record(Op::Mul, &[self, rhs], self.shape.clone(), zip_map(self, rhs, |a, b| a * b))
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let out = self.data.iter().map(|v| v * c).collect();
        record(Op::Scale(c), &[self], self.shape.clone(), out)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    /// Adds a length-`m` bias to every row of an `n×m` matrix.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (n, m) = self.expect_matrix("add_bias", "x")?;
        if bias.shape.dims() != [m] {
            return Err(Error::Dimension {
                op: "add_bias",
                operand: "b",
                expected: format!("[{m}]"),
                got: bias.shape.to_string(),
            });
        }
        let mut out = self.data.to_vec();
        for row in out.chunks_mut(m) {
            for (o, b) in row.iter_mut().zip(bias.data.iter()) {
                *o += b;
            }
        }
        debug_assert_eq!(out.len(), n * m);
        record(Op::AddBias, &[self, bias], self.shape.clone(), out)
    }

    pub fn relu(&self) -> Result<Tensor> {
        let out = self.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        record(Op::Relu, &[self], self.shape.clone(), out)
    }

    pub fn exp(&self) -> Result<Tensor> {
        let out = self.data.iter().map(|v| v.exp()).collect();
        record(Op::Exp, &[self], self.shape.clone(), out)
    }

    /// Row-wise log-softmax of an `n×K` matrix, stabilised by the row max.
    pub fn log_softmax(&self) -> Result<Tensor> {
        let (_, k) = self.expect_matrix("log_softmax", "logits")?;
        let mut out = Vec::with_capacity(self.numel());
        for row in self.data.chunks(k) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        record(Op::LogSoftmax, &[self], self.shape.clone(), out)
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let s = self.data.iter().sum();
        record(Op::Sum, &[self], Shape::scalar(), vec![s])
    }

    pub fn mean(&self) -> Result<Tensor> {
        self.sum()?.scale(1.0 / self.numel() as f64)
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&self, shape: &Shape) -> Result<Tensor> {
        if self.numel() != 1 {
            return Err(Error::Dimension {
                op: "expand",
                operand: "input",
                expected: "[1]".into(),
                got: self.shape.to_string(),
            });
        }
        record(Op::Expand, &[self], shape.clone(), vec![self.data[0]; shape.numel()])
    }

    /// Column sums of an `n×m` matrix: the result has shape `[m]`.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (_, m) = self.expect_matrix("sum_rows", "input")?;
        let mut out = vec![0.0; m];
        for row in self.data.chunks(m) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        record(Op::SumRows, &[self], Shape::vector_unchecked(m), out)
    }

    /// Repeats a `[m]` vector as each of `n` rows.
    pub fn broadcast_rows(&self, n: usize) -> Result<Tensor> {
        let m = self.expect_vector("broadcast_rows")?;
        let shape = Shape::new(vec![n, m])?;
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(&self.data);
        }
        record(Op::BroadcastRows, &[self], shape, out)
    }

    /// Row sums of an `n×m` matrix: the result has shape `[n]`.
    pub fn row_sum(&self) -> Result<Tensor> {
        let (n, m) = self.expect_matrix("row_sum", "input")?;
        let out = self.data.chunks(m).map(|r| r.iter().sum()).collect();
        record(Op::RowSum, &[self], Shape::vector_unchecked(n), out)
    }

    /// Repeats each element of a `[n]` vector across `m` columns.
    pub fn broadcast_cols(&self, m: usize) -> Result<Tensor> {
        let n = self.expect_vector("broadcast_cols")?;
        let shape = Shape::new(vec![n, m])?;
        let out = self.data.iter().flat_map(|&v| std::iter::repeat_n(v, m)).collect();
        record(Op::BroadcastCols, &[self], shape, out)
    }

    /// Picks `self[i, labels[i]]` from each row of an `n×K` matrix.
    pub fn pick(&self, labels: &[usize]) -> Result<Tensor> {
        let (n, k) = self.expect_matrix("pick", "input")?;
        check_labels("pick", labels, n, k)?;
        let out = labels.iter().enumerate().map(|(i, &y)| self.data[i * k + y]).collect();
        record(Op::Pick(labels.into()), &[self], Shape::vector_unchecked(n), out)
    }

    /// Inverse of [`Tensor::pick`]: places `self[i]` at `(i, labels[i])` in an `n×k` zero matrix.
    pub fn scatter(&self, labels: &[usize], k: usize) -> Result<Tensor> {
        let n = self.expect_vector("scatter")?;
        check_labels("scatter", labels, n, k)?;
        let mut out = vec![0.0; n * k];
        for (i, &y) in labels.iter().enumerate() {
            out[i * k + y] = self.data[i];
        }
        record(Op::Scatter(labels.into()), &[self], Shape::matrix_unchecked(n, k), out)
    }

    /// Squared Euclidean distances between rows of `self` (`n×d`) and rows
    /// of `centers` (`K×d`), formed by direct subtraction.
    pub fn pairwise_sq_dist(&self, centers: &Tensor) -> Result<Tensor> {
        let (n, d) = self.expect_matrix("pairwise_sq_dist", "queries")?;
        let (k, d2) = centers.expect_matrix("pairwise_sq_dist", "centers")?;
        if d != d2 {
            return Err(Error::Dimension {
                op: "pairwise_sq_dist",
                operand: "centers",
                expected: format!("{d} columns"),
                got: centers.shape.to_string(),
            });
        }
        let mut out = Vec::with_capacity(n * k);
        for q in self.data.chunks(d) {
            for c in centers.data.chunks(d) {
                out.push(q.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum());
            }
        }
        record(Op::PairwiseSqDist, &[self, centers], Shape::matrix_unchecked(n, k), out)
    }

    fn expect_vector(&self, op: &'static str) -> Result<usize> {
        match self.shape.dims() {
            [n] => Ok(*n),
            _ => Err(Error::Dimension {
                op,
                operand: "input",
                expected: "a rank-1 tensor".into(),
                got: self.shape.to_string(),
            }),
        }
    }
}

fn check_labels(op: &str, labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::validation(format!(
            "{op}: {} labels for {n} rows",
            labels.len()
        )));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= k) {
        return Err(Error::validation(format!(
            "{op}: label {y} at row {i} is outside 0..{k}"
        )));
    }
    Ok(())
}

/// Affine map `x·W + b` applied to each row of `x`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, d_in) = x.expect_matrix("linear", "x")?;
    let (w_in, d_out) = w.expect_matrix("linear", "W")?;
    if w_in != d_in {
        return Err(Error::Dimension {
            op: "linear",
            operand: "W",
            expected: format!("{d_in} rows"),
            got: w.shape.to_string(),
        });
    }
    if b.shape.dims() != [d_out] {
        return Err(Error::Dimension {
            op: "linear",
            operand: "b",
            expected: format!("[{d_out}]"),
            got: b.shape.to_string(),
        });
    }
    x.matmul(w)?.add_bias(b)
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    x.relu()
}

/// Mean over rows of `-log softmax(logits)[label]`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k) = logits.expect_matrix("softmax_cross_entropy", "logits")?;
    if labels.len() != n {
        return Err(Error::validation(format!(
            "softmax_cross_entropy: {} labels for {n} rows",
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::validation(format!(
            "softmax_cross_entropy: label {y} is outside 0..{k}"
        )));
    }
    logits.log_softmax()?.pick(labels)?.sum()?.scale(-1.0 / n as f64)
}

/// Vector-Jacobian product of `node` for upstream gradient `g`.
///
/// With `tape` set, inputs and outputs are re-attached to their nodes so the
/// returned gradients are recorded; otherwise everything stays constant.
pub(crate) fn vjp(node: &Node, g: &Tensor, tape: Option<&Tape>) -> Result<Vec<Option<Tensor>>> {
    let input = |i: usize| node.inputs[i].rehydrate(tape);
    let shape_of = |i: usize| &node.inputs[i].shape;
    let grads = match &node.op {
        Op::Leaf => Vec::new(),
        Op::MatMul => {
            let (a, b) = (input(0), input(1));
            vec![Some(g.matmul(&b.transpose()?)?), Some(a.transpose()?.matmul(g)?)]
        }
        Op::Transpose => vec![Some(g.transpose()?)],
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), Some(g.neg()?)],
        Op::Mul => {
            let (a, b) = (input(0), input(1));
            vec![Some(g.mul(&b)?), Some(g.mul(&a)?)]
        }
        Op::Scale(c) => vec![Some(g.scale(*c)?)],
        Op::AddBias => vec![Some(g.clone()), Some(g.sum_rows()?)],
        Op::Relu => {
            let mask = node.inputs[0]
                .data
                .iter()
                .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
                .collect();
            let mask = Tensor::constant(shape_of(0).clone(), mask);
            vec![Some(g.mul(&mask)?)]
        }
        Op::Exp => {
            let out = node.output.rehydrate(tape);
            vec![Some(g.mul(&out)?)]
        }
        Op::LogSoftmax => {
            // d/dx = g - softmax(x) * rowsum(g)
            let (_, k) = shape_of(0).matrix().expect("log_softmax input is a matrix");
            let softmax = node.output.rehydrate(tape).exp()?;
            let spread = g.row_sum()?.broadcast_cols(k)?;
            vec![Some(g.sub(&softmax.mul(&spread)?)?)]
        }
        Op::Sum => vec![Some(g.expand(shape_of(0))?)],
        Op::Expand => vec![Some(g.sum()?)],
        Op::SumRows => {
            let (n, _) = shape_of(0).matrix().expect("sum_rows input is a matrix");
            vec![Some(g.broadcast_rows(n)?)]
        }
        Op::BroadcastRows => vec![Some(g.sum_rows()?)],
        Op::RowSum => {
            let (_, m) = shape_of(0).matrix().expect("row_sum input is a matrix");
            vec![Some(g.broadcast_cols(m)?)]
        }
        Op::BroadcastCols => vec![Some(g.row_sum()?)],
        Op::Pick(labels) => {
            let (_, k) = shape_of(0).matrix().expect("pick input is a matrix");
            vec![Some(g.scatter(labels, k)?)]
        }
        Op::Scatter(labels) => vec![Some(g.pick(labels)?)],
        Op::PairwiseSqDist => {
            // D_ik = |q_i - c_k|^2
            // dq_i = 2 (sum_k g_ik) q_i - 2 sum_k g_ik c_k
            // dc_k = 2 (sum_i g_ik) c_k - 2 sum_i g_ik q_i
            let (q, c) = (input(0), input(1));
            let (_, d) = shape_of(0).matrix().expect("queries are a matrix");
            let gq = g
                .row_sum()?
                .broadcast_cols(d)?
                .mul(&q)?
                .sub(&g.matmul(&c)?)?
                .scale(2.0)?;
            let gc = g
                .sum_rows()?
                .broadcast_cols(d)?
                .mul(&c)?
                .sub(&g.transpose()?.matmul(&q)?)?
                .scale(2.0)?;
            vec![Some(gq), Some(gc)]
        }
    };
    Ok(grads)
}
