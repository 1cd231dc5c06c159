//! Reverse-mode gradient propagation over a recorded operation sequence.
//!
//! A [`Tape`] is built fresh for every optimizer step: leaves go in first
//! (constants for data, params for learnables), operations record their
//! inputs, and [`Tape::backward`] walks the sequence once in reverse.

use crate::error::{Error, Result};

use super::matrix::{sigmoid_scalar, Matrix, Real};

/// Handle to a tape node. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Scale(usize, Real),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    RowSoftmax(usize),
    MeanRows(usize),
    SumAll(usize),
    ConcatCols(usize, usize),
    StackRows(Vec<usize>),
    MaskRows {
        x: usize,
        p: usize,
        rows: Vec<usize>,
    },
    /// Mean binary cross-entropy of `sigmoid(logits)` against a fixed 0/1
    /// target, evaluated in the logit-stable form.
    BceWithLogitsMean {
        logits: usize,
        target: Vec<Real>,
    },
    /// Cross-entropy of `softmax(logits)` against a fixed distribution.
    CeWithLogits {
        logits: usize,
        target: Vec<Real>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    /// Data leaf; no gradient is propagated into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Learnable leaf; `backward` accumulates a gradient for it.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Result<Real> {
        let m = self.value(v);
        if m.shape() != (1, 1) {
            return Err(Error::InvalidArgument {
                op: "Tape::scalar",
                msg: format!("expected 1x1, got {}x{}", m.rows(), m.cols()),
            });
        }
        Ok(m.get(0, 0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, Op::MatMul(a.0, b.0), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let needs = self.needs(a.0);
        self.push(value, Op::Transpose(a.0), needs)
    }

    pub fn scale(&mut self, a: Var, c: Real) -> Var {
        let value = self.value(a).scale(c);
        let needs = self.needs(a.0);
        self.push(value, Op::Scale(a.0, c), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, Op::Add(a.0, b.0), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, Op::Sub(a.0, b.0), needs))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, Op::Hadamard(a.0, b.0), needs))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).relu();
        let needs = self.needs(a.0);
        self.push(value, Op::Relu(a.0), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).sigmoid();
        let needs = self.needs(a.0);
        self.push(value, Op::Sigmoid(a.0), needs)
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let value = self.value(a).row_softmax();
        let needs = self.needs(a.0);
        self.push(value, Op::RowSoftmax(a.0), needs)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        assert!(self.value(a).rows() > 0, "mean_rows over empty matrix");
        let value = self.value(a).mean_rows();
        let needs = self.needs(a.0);
        self.push(value, Op::MeanRows(a.0), needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::from_vec(1, 1, vec![self.value(a).sum()]).unwrap();
        let needs = self.needs(a.0);
        self.push(value, Op::SumAll(a.0), needs)
    }

    /// Horizontal concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, mb) = (self.value(a), self.value(b));
        if ma.rows() != mb.rows() {
            return Err(Error::DimMismatch {
                op: "concat_cols",
                lhs: format!("{}x{}", ma.rows(), ma.cols()),
                rhs: format!("{}x{}", mb.rows(), mb.cols()),
            });
        }
        let mut out = Matrix::zeros(ma.rows(), ma.cols() + mb.cols());
        for r in 0..ma.rows() {
            let row = out.row_mut(r);
            row[..ma.cols()].copy_from_slice(ma.row(r));
            row[ma.cols()..].copy_from_slice(mb.row(r));
        }
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(out, Op::ConcatCols(a.0, b.0), needs))
    }

    /// Stack single-row vectors into one matrix, one input per output row.
    pub fn stack_rows(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument {
                op: "stack_rows",
                msg: "no rows to stack".into(),
            });
        }
        let cols = self.value(inputs[0]).cols();
        let mut out = Matrix::zeros(inputs.len(), cols);
        for (r, &v) in inputs.iter().enumerate() {
            let m = self.value(v);
            if m.shape() != (1, cols) {
                return Err(Error::DimMismatch {
                    op: "stack_rows",
                    lhs: format!("1x{cols}"),
                    rhs: format!("{}x{}", m.rows(), m.cols()),
                });
            }
            out.row_mut(r).copy_from_slice(m.row(0));
        }
        let needs = inputs.iter().any(|v| self.needs(v.0));
        let idxs = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(out, Op::StackRows(idxs), needs))
    }

    /// Replace the listed rows of `x` with the single-row vector `p`.
    /// Gradient into `p` is the sum over all replaced rows.
    pub fn mask_rows(&mut self, x: Var, p: Var, rows: &[usize]) -> Result<Var> {
        let (mx, mp) = (self.value(x), self.value(p));
        if mp.shape() != (1, mx.cols()) {
            return Err(Error::DimMismatch {
                op: "mask_rows",
                lhs: format!("{}x{}", mx.rows(), mx.cols()),
                rhs: format!("{}x{}", mp.rows(), mp.cols()),
            });
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= mx.rows()) {
            return Err(Error::InvalidArgument {
                op: "mask_rows",
                msg: format!("row {bad} out of bounds for {} rows", mx.rows()),
            });
        }
        let mut out = mx.clone();
        let p_row = mp.row(0).to_vec();
        for &r in rows {
            out.row_mut(r).copy_from_slice(&p_row);
        }
        let needs = self.needs(x.0) || self.needs(p.0);
        Ok(self.push(
            out,
            Op::MaskRows {
                x: x.0,
                p: p.0,
                rows: rows.to_vec(),
            },
            needs,
        ))
    }

    /// `-(1/n) sum_i [t_i ln s(z_i) + (1-t_i) ln(1-s(z_i))]` with `s` the
    /// logistic function, evaluated as `max(z,0) - z t + ln(1+exp(-|z|))`.
    pub fn bce_with_logits_mean(&mut self, logits: Var, target: &[Real]) -> Result<Var> {
        let z = self.value(logits);
        if z.data().len() != target.len() {
            return Err(Error::DimMismatch {
                op: "bce_with_logits_mean",
                lhs: format!("{} logits", z.data().len()),
                rhs: format!("{} targets", target.len()),
            });
        }
        let mut acc = 0.0;
        for (&zi, &ti) in z.data().iter().zip(target) {
            acc += zi.max(0.0) - zi * ti + (-zi.abs()).exp().ln_1p();
        }
        let value = Matrix::from_vec(1, 1, vec![acc / target.len() as Real]).unwrap();
        let needs = self.needs(logits.0);
        Ok(self.push(
            value,
            Op::BceWithLogitsMean {
                logits: logits.0,
                target: target.to_vec(),
            },
            needs,
        ))
    }

    /// `lse(z) - sum_i q_i z_i` for a target distribution `q` summing to 1,
    /// i.e. the cross-entropy of `softmax(z)` against `q`.
    pub fn ce_with_logits(&mut self, logits: Var, target: &[Real]) -> Result<Var> {
        let z = self.value(logits);
        if z.data().len() != target.len() {
            return Err(Error::DimMismatch {
                op: "ce_with_logits",
                lhs: format!("{} logits", z.data().len()),
                rhs: format!("{} targets", target.len()),
            });
        }
        let max = z.data().iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let lse = max + z.data().iter().map(|&v| (v - max).exp()).sum::<Real>().ln();
        let dot: Real = z.data().iter().zip(target).map(|(&zi, &qi)| zi * qi).sum();
        let value = Matrix::from_vec(1, 1, vec![lse - dot]).unwrap();
        let needs = self.needs(logits.0);
        Ok(self.push(
            value,
            Op::CeWithLogits {
                logits: logits.0,
                target: target.to_vec(),
            },
            needs,
        ))
    }

    /// Propagate from a scalar loss back to every gradient-bearing leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_val = self.scalar(loss)?;
        if !loss_val.is_finite() {
            return Err(Error::NonFinite {
                what: format!("loss before backward ({loss_val})"),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            // Inputs always precede their consumers on the tape.
            let (before, rest) = grads.split_at_mut(idx);
            let g = match rest[0].as_ref() {
                Some(g) => g,
                None => continue,
            };
            let value_of = |j: usize| &self.nodes[j].value;
            let mut add_to = |j: usize, delta: Matrix| {
                if !self.nodes[j].needs_grad {
                    return;
                }
                match &mut before[j] {
                    Some(existing) => {
                        for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                            *e += d;
                        }
                    }
                    slot => *slot = Some(delta),
                }
            };

            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.nodes[*a].needs_grad {
                        add_to(*a, g.matmul(&value_of(*b).transpose())?);
                    }
                    if self.nodes[*b].needs_grad {
                        add_to(*b, value_of(*a).transpose().matmul(g)?);
                    }
                }
                Op::Transpose(a) => add_to(*a, g.transpose()),
                Op::Scale(a, c) => add_to(*a, g.scale(*c)),
                Op::Add(a, b) => {
                    add_to(*a, g.clone());
                    add_to(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    add_to(*a, g.clone());
                    add_to(*b, g.scale(-1.0));
                }
                Op::Hadamard(a, b) => {
                    if self.nodes[*a].needs_grad {
                        add_to(*a, g.hadamard(value_of(*b))?);
                    }
                    if self.nodes[*b].needs_grad {
                        add_to(*b, g.hadamard(value_of(*a))?);
                    }
                }
                Op::Relu(a) => {
                    let x = value_of(*a);
                    let mut delta = g.clone();
                    for (d, &xi) in delta.data_mut().iter_mut().zip(x.data()) {
                        if xi <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    add_to(*a, delta);
                }
                Op::Sigmoid(a) => {
                    let s = &node.value;
                    let mut delta = g.clone();
                    for (d, &si) in delta.data_mut().iter_mut().zip(s.data()) {
                        *d *= si * (1.0 - si);
                    }
                    add_to(*a, delta);
                }
                Op::RowSoftmax(a) => {
                    // Per row: dx = s * (g - <g, s>)
                    let s = &node.value;
                    let mut delta = Matrix::zeros(s.rows(), s.cols());
                    for r in 0..s.rows() {
                        let dot: Real = g.row(r).iter().zip(s.row(r)).map(|(a, b)| a * b).sum();
                        for c in 0..s.cols() {
                            delta.set(r, c, s.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    add_to(*a, delta);
                }
                Op::MeanRows(a) => {
                    let rows = value_of(*a).rows();
                    let inv = 1.0 / rows as Real;
                    let mut delta = Matrix::zeros(rows, g.cols());
                    for r in 0..rows {
                        for c in 0..g.cols() {
                            delta.set(r, c, g.get(0, c) * inv);
                        }
                    }
                    add_to(*a, delta);
                }
                Op::SumAll(a) => {
                    let shape = value_of(*a).shape();
                    add_to(*a, Matrix::filled(shape.0, shape.1, g.get(0, 0)));
                }
                Op::ConcatCols(a, b) => {
                    let ca = value_of(*a).cols();
                    let cb = value_of(*b).cols();
                    let mut da = Matrix::zeros(g.rows(), ca);
                    let mut db = Matrix::zeros(g.rows(), cb);
                    for r in 0..g.rows() {
                        da.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                        db.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    add_to(*a, da);
                    add_to(*b, db);
                }
                Op::StackRows(inputs) => {
                    for (r, &j) in inputs.iter().enumerate() {
                        let mut delta = Matrix::zeros(1, g.cols());
                        delta.row_mut(0).copy_from_slice(g.row(r));
                        add_to(j, delta);
                    }
                }
                Op::MaskRows { x, p, rows } => {
                    if self.nodes[*x].needs_grad {
                        let mut dx = g.clone();
                        for &r in rows {
                            dx.row_mut(r).fill(0.0);
                        }
                        add_to(*x, dx);
                    }
                    if self.nodes[*p].needs_grad {
                        let mut dp = Matrix::zeros(1, g.cols());
                        for &r in rows {
                            for (d, &gi) in dp.row_mut(0).iter_mut().zip(g.row(r)) {
                                *d += gi;
                            }
                        }
                        add_to(*p, dp);
                    }
                }
                Op::BceWithLogitsMean { logits, target } => {
                    let z = value_of(*logits);
                    let scale = g.get(0, 0) / target.len() as Real;
                    let mut delta = Matrix::zeros(z.rows(), z.cols());
                    for (i, (d, &zi)) in delta.data_mut().iter_mut().zip(z.data()).enumerate() {
                        *d = (sigmoid_scalar(zi) - target[i]) * scale;
                    }
                    add_to(*logits, delta);
                }
                Op::CeWithLogits { logits, target } => {
                    let z = value_of(*logits);
                    let probs = z.row_softmax_flat();
                    let scale = g.get(0, 0);
                    let mut delta = Matrix::zeros(z.rows(), z.cols());
                    for (i, d) in delta.data_mut().iter_mut().enumerate() {
                        *d = (probs[i] - target[i]) * scale;
                    }
                    add_to(*logits, delta);
                }
            }
        }

        Ok(Gradients { grads })
    }
}

/// Gradients indexed by the `Var` handles of one backward pass.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of the given shape when the loss did not
    /// depend on it.
    pub fn wrt_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Matrix {
        match self.wrt(v) {
            Some(g) => g.clone(),
            None => Matrix::zeros(rows, cols),
        }
    }
}

impl Matrix {
    /// Softmax over all entries, treating the matrix as one flat vector.
    fn row_softmax_flat(&self) -> Vec<Real> {
        let max = self
            .data()
            .iter()
            .copied()
            .fold(Real::NEG_INFINITY, Real::max);
        let mut out: Vec<Real> = self.data().iter().map(|&v| (v - max).exp()).collect();
        let sum: Real = out.iter().sum();
        for v in out.iter_mut() {
            *v /= sum;
        }
        out
    }
}
