//! Reverse-mode differentiation over whole-matrix operations.
//!
//! A [`Tape`] records every operation in execution order. Leaves are either
//! parameters (gradients wanted) or constants; gradients only flow into
//! nodes that transitively depend on a parameter.

use crate::error::{CodaError, Result};
use crate::soft_topk::{self, EpsSchedule, ScoreVector};
use crate::tensor::{self, matmul, LayerNormStats, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    RowSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: LayerNormStats,
    },
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    /// `x` (n×d) with row i scaled by `w[i]` (`w` is n×1).
    ScaleRows(Var, Var),
    /// Elementwise product with a constant mask.
    Mask(Var, Vec<f64>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    /// Column of scores to column of soft top-k weights.
    SoftTopk {
        s: Var,
        k: usize,
        sched: EpsSchedule,
    },
    MeanRows(Var),
    /// `x` (n×d) plus a broadcast 1×d row.
    AddRow(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` for nodes not on a parameter path.
#[derive(Debug, Clone)]
pub struct Gradients(Vec<Option<Matrix>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the given shape if nothing flowed there.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Matrix, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::MatMul(a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        let tracked = self.tracked(a);
        self.push(value, Op::Scale(a, factor), tracked)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let tracked = self.tracked(a);
        self.push(value, Op::Relu(a), tracked)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let tracked = self.tracked(a);
        self.push(value, Op::Sigmoid(a), tracked)
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let value = tensor::row_softmax(self.value(a));
        let tracked = self.tracked(a);
        self.push(value, Op::RowSoftmax(a), tracked)
    }

    /// Layer norm with `gain` and `bias` given as 1×d rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (value, stats) = tensor::layer_norm_with_stats(
            self.value(x),
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
        )?;
        let tracked = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, stats }, tracked))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let tracked = self.tracked(a);
        self.push(value, Op::Transpose(a), tracked)
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(a).gather_rows(indices)?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::GatherRows(a, indices.to_vec()), tracked))
    }

    pub fn scatter_rows(&mut self, a: Var, indices: &[usize], n: usize) -> Result<Var> {
        let value = self.value(a).scatter_rows(indices, n)?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::ScatterRows(a, indices.to_vec()), tracked))
    }

    pub fn scale_rows(&mut self, x: Var, weights: Var) -> Result<Var> {
        let w = self.value(weights);
        if w.cols() != 1 {
            return Err(CodaError::dim("scale_rows", self.value(x).shape(), w.shape()));
        }
        let value = self.value(x).scale_rows(w.data())?;
        let tracked = self.tracked(x) || self.tracked(weights);
        Ok(self.push(value, Op::ScaleRows(x, weights), tracked))
    }

    pub fn mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let src = self.value(a);
        if mask.len() != src.len() {
            return Err(CodaError::dim("mask", src.shape(), (mask.len(), 1)));
        }
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Matrix::new(src.rows(), src.cols(), data)?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Mask(a, mask), tracked))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, len)?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::SliceCols(a, start), tracked))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_cols(&mats)?;
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), tracked))
    }

    /// Soft top-k over an n×1 column of scores.
    pub fn soft_topk(&mut self, s: Var, k: usize, sched: EpsSchedule) -> Result<Var> {
        let scores = self.value(s);
        if scores.cols() != 1 {
            return Err(CodaError::dim("soft_topk", scores.shape(), (scores.rows(), 1)));
        }
        let sv = ScoreVector::new(scores.data().to_vec())?;
        let res = soft_topk::soft_topk(&sv, k, &sched)?;
        let value = Matrix::column_vector(&res.lambda);
        let tracked = self.tracked(s);
        Ok(self.push(value, Op::SoftTopk { s, k, sched }, tracked))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_rows();
        let tracked = self.tracked(a);
        self.push(value, Op::MeanRows(a), tracked)
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(CodaError::dim("add_row", xv.shape(), rv.shape()));
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (v, b) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *v += b;
            }
        }
        let tracked = self.tracked(x) || self.tracked(row);
        Ok(self.push(value, Op::AddRow(x, row), tracked))
    }

    /// Backpropagates `seed` (the cotangent of `output`) through the tape.
    pub fn backward(&self, output: Var, seed: &Matrix) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(CodaError::dim("backward", self.value(output).shape(), seed.shape()));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.clone());
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients(grads))
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
        if !self.tracked(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let out = &self.nodes[idx].value;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    let ga = matmul(g, &self.value(*b).transpose())?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.tracked(*b) {
                    let gb = matmul(&self.value(*a).transpose(), g)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.scale(*f))?,
            Op::Relu(a) => {
                let mask = self.value(*a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(grads, *a, g.hadamard(&mask)?)?;
            }
            Op::Sigmoid(a) => {
                let d = out.map(|y| y * (1.0 - y));
                self.accumulate(grads, *a, g.hadamard(&d)?)?;
            }
            Op::RowSoftmax(a) => {
                let mut ga = g.clone();
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let dot: f64 = y.iter().zip(g.row(r)).map(|(p, q)| p * q).sum();
                    for (c, v) in ga.row_mut(r).iter_mut().enumerate() {
                        *v = y[c] * (*v - dot);
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let xhat = &stats.normalized;
                let gain_v = self.value(*gain).data();
                let d = xhat.cols();
                if self.tracked(*gain) || self.tracked(*bias) {
                    let mut gg = Matrix::zeros(1, d);
                    let mut gb = Matrix::zeros(1, d);
                    for r in 0..xhat.rows() {
                        for c in 0..d {
                            let gv = g.get(r, c);
                            gg.data_mut()[c] += gv * xhat.get(r, c);
                            gb.data_mut()[c] += gv;
                        }
                    }
                    self.accumulate(grads, *gain, gg)?;
                    self.accumulate(grads, *bias, gb)?;
                }
                if self.tracked(*x) {
                    let mut gx = Matrix::zeros(xhat.rows(), d);
                    for r in 0..xhat.rows() {
                        let dxhat: Vec<f64> = g.row(r).iter().zip(gain_v).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx =
                            dxhat.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let is = stats.inv_std[r];
                        for (c, v) in gx.row_mut(r).iter_mut().enumerate() {
                            *v = is * (dxhat[c] - mean_d - xhat.get(r, c) * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, gx)?;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose())?,
            Op::GatherRows(a, indices) => {
                let n = self.value(*a).rows();
                self.accumulate(grads, *a, g.scatter_rows(indices, n)?)?;
            }
            Op::ScatterRows(a, indices) => {
                self.accumulate(grads, *a, g.gather_rows(indices)?)?;
            }
            Op::ScaleRows(x, w) => {
                let wv = self.value(*w);
                if self.tracked(*x) {
                    self.accumulate(grads, *x, g.scale_rows(wv.data())?)?;
                }
                if self.tracked(*w) {
                    let xv = self.value(*x);
                    let gw: Vec<f64> = (0..xv.rows())
                        .map(|r| xv.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *w, Matrix::column_vector(&gw))?;
                }
            }
            Op::Mask(a, mask) => {
                let data = g.data().iter().zip(mask).map(|(v, m)| v * m).collect();
                self.accumulate(grads, *a, Matrix::new(g.rows(), g.cols(), data)?)?;
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.tracked(p) {
                        self.accumulate(grads, p, g.slice_cols(offset, w)?)?;
                    }
                    offset += w;
                }
            }
            Op::SoftTopk { s, k, sched } => {
                let sv = ScoreVector::new(self.value(*s).data().to_vec())?;
                let gs = soft_topk::soft_topk_backward(&sv, *k, sched, g.data())?;
                self.accumulate(grads, *s, Matrix::column_vector(&gs))?;
            }
            Op::MeanRows(a) => {
                let n = self.value(*a).rows();
                let mut ga = Matrix::zeros(n, g.cols());
                let inv = 1.0 / n as f64;
                for r in 0..n {
                    for (v, gv) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *v = gv * inv;
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.tracked(*row) {
                    self.accumulate(grads, *row, g.mean_rows().scale(g.rows() as f64))?;
                }
            }
        }
        Ok(())
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    /// Central-difference check of `sum(seed ⊙ f(param))` against the tape.
    fn check(build: impl Fn(&mut Tape, Var) -> Var, shape: (usize, usize), seed: u64) {
        let mut rng = Rng::new(seed);
        let p0 = rng.gaussian_matrix(shape.0, shape.1, 1.0);
        let mut tape = Tape::new();
        let p = tape.param(p0.clone());
        let out = build(&mut tape, p);
        let cot = rng.gaussian_matrix(tape.value(out).rows(), tape.value(out).cols(), 1.0);
        let grads = tape.backward(out, &cot).unwrap();
        let analytic = grads.get_or_zeros(p, shape);
        let f = |m: Matrix| {
            let mut t = Tape::new();
            let v = t.param(m);
            let o = build(&mut t, v);
            t.value(o).hadamard(&cot).unwrap().sum()
        };
        let h = 1e-6;
        for i in 0..p0.len() {
            let mut plus = p0.clone();
            let mut minus = p0.clone();
            plus.data_mut()[i] += h;
            minus.data_mut()[i] -= h;
            let numeric = (f(plus) - f(minus)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (numeric - a).abs() <= 1e-6 * (1.0 + numeric.abs()),
                "entry {i}: numeric {numeric} analytic {a}"
            );
        }
    }

    #[test]
    fn matmul_and_transpose_grads() {
        let mut rng = Rng::new(1);
        let b = rng.gaussian_matrix(3, 2, 1.0);
        check(
            move |t, p| {
                let c = t.constant(b.clone());
                let m = t.matmul(p, c).unwrap();
                t.transpose(m)
            },
            (4, 3),
            10,
        );
    }

    #[test]
    fn softmax_relu_sigmoid_grads() {
        check(|t, p| t.row_softmax(p), (3, 5), 11);
        check(|t, p| t.relu(p), (3, 5), 12);
        check(|t, p| t.sigmoid(p), (3, 5), 13);
        check(|t, p| t.mean_rows(p), (4, 3), 14);
    }

    #[test]
    fn layer_norm_grads() {
        check(
            |t, p| {
                let g = t.constant(Matrix::row_vector(&[1.0, 0.5, -2.0, 1.5]));
                let b = t.constant(Matrix::row_vector(&[0.1, 0.2, 0.3, 0.4]));
                t.layer_norm(p, g, b, 1e-6).unwrap()
            },
            (3, 4),
            15,
        );
        check(
            |t, p| {
                let x = t.constant(Rng::new(3).gaussian_matrix(3, 4, 1.0));
                let b = t.constant(Matrix::zeros(1, 4));
                t.layer_norm(x, p, b, 1e-6).unwrap()
            },
            (1, 4),
            16,
        );
    }

    #[test]
    fn indexing_grads() {
        check(
            |t, p| {
                let g = t.gather_rows(p, &[3, 0]).unwrap();
                t.scatter_rows(g, &[1, 2], 5).unwrap()
            },
            (4, 3),
            17,
        );
        check(
            |t, p| {
                let a = t.slice_cols(p, 1, 2).unwrap();
                let b = t.slice_cols(p, 0, 1).unwrap();
                t.concat_cols(&[a, b, a]).unwrap()
            },
            (3, 4),
            18,
        );
        check(|t, p| t.mask(p, vec![1.0, 0.0, 0.5, 2.0, 1.0, 0.0]).unwrap(), (3, 2), 19);
    }

    #[test]
    fn scale_rows_grads_both_sides() {
        check(
            |t, p| {
                let w = t.constant(Matrix::column_vector(&[0.5, -1.0, 2.0]));
                t.scale_rows(p, w).unwrap()
            },
            (3, 4),
            20,
        );
        check(
            |t, p| {
                let x = t.constant(Rng::new(9).gaussian_matrix(3, 4, 1.0));
                t.scale_rows(x, p).unwrap()
            },
            (3, 1),
            21,
        );
        check(
            |t, p| {
                let x = t.constant(Rng::new(9).gaussian_matrix(3, 4, 1.0));
                t.add_row(x, p).unwrap()
            },
            (1, 4),
            22,
        );
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Matrix::filled(2, 2, 1.0));
        let p = t.param(Matrix::filled(2, 2, 2.0));
        let y = t.matmul(c, p).unwrap();
        let g = t.backward(y, &Matrix::filled(2, 2, 1.0)).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(p).is_some());
    }
}
