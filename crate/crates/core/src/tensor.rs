//! Dense row-major matrices, the handful of kernels the layer needs, a
//! multiply-add counter used for FLOPs instrumentation, and a seeded RNG.

use std::cell::Cell;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{CodaError, Result};

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CodaError::dim("Matrix::new", (rows, cols), (data.len(), 1)));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals and tests.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn column_vector(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(CodaError::dim(op, self.shape(), other.shape()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|v| v * factor)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(CodaError::dim("add_assign", self.shape(), other.shape()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Column-wise mean over rows, as a 1 x cols matrix.
    pub fn mean_rows(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, v) in out.data.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / self.rows as f64;
        out.data.iter_mut().for_each(|v| *v *= inv);
        out
    }

    /// Rows `[start, start+len)` of columns, i.e. a column slice.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Matrix> {
        if start + len > self.cols {
            return Err(CodaError::dim("slice_cols", self.shape(), (start, len)));
        }
        let mut out = Matrix::zeros(self.rows, len);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + len]);
        }
        Ok(out)
    }

    pub fn concat_cols(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        let cols: usize = parts.iter().map(|m| m.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            if p.rows != rows {
                return Err(CodaError::dim("concat_cols", (rows, cols), p.shape()));
            }
            for r in 0..rows {
                out.row_mut(r)[offset..offset + p.cols].copy_from_slice(p.row(r));
            }
            offset += p.cols;
        }
        Ok(out)
    }

    /// Rows at `indices`, in that order.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Matrix> {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (i, &j) in indices.iter().enumerate() {
            if j >= self.rows {
                return Err(CodaError::Input(format!(
                    "row index {j} out of range for {} rows",
                    self.rows
                )));
            }
            out.row_mut(i).copy_from_slice(self.row(j));
        }
        Ok(out)
    }

    /// Inverse of [`Matrix::gather_rows`]: row `i` of `self` lands on row
    /// `indices[i]` of an `n`-row zero matrix.
    pub fn scatter_rows(&self, indices: &[usize], n: usize) -> Result<Matrix> {
        if indices.len() != self.rows {
            return Err(CodaError::dim("scatter_rows", self.shape(), (indices.len(), n)));
        }
        let mut out = Matrix::zeros(n, self.cols);
        for (i, &j) in indices.iter().enumerate() {
            if j >= n {
                return Err(CodaError::Input(format!("row index {j} out of range for {n} rows")));
            }
            out.row_mut(j).copy_from_slice(self.row(i));
        }
        Ok(out)
    }

    /// Scales row `i` by `weights[i]`.
    pub fn scale_rows(&self, weights: &[f64]) -> Result<Matrix> {
        if weights.len() != self.rows {
            return Err(CodaError::dim("scale_rows", self.shape(), (weights.len(), 1)));
        }
        let mut out = self.clone();
        for (r, &w) in weights.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|v| *v *= w);
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {}", self.rows, self.cols);
        for r in 0..self.rows {
            let line: Vec<String> = self.row(r).iter().map(|v| format!("{v:?}")).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    /// Parses the text fixture format: a `rows cols` header followed by
    /// `rows` lines of whitespace-separated reals. Lines starting with `#`
    /// and blank lines are skipped.
    pub fn from_text(text: &str) -> Result<Matrix> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| CodaError::Parse("missing header line".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| CodaError::Parse(format!("bad header {header:?}: {e}")))?;
        let [rows, cols] = dims[..] else {
            return Err(CodaError::Parse(format!("header must be `rows cols`, got {header:?}")));
        };
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let line = lines
                .next()
                .ok_or_else(|| CodaError::Parse(format!("expected {rows} rows, found {r}")))?;
            let before = data.len();
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|e| CodaError::Parse(format!("row {r}: {tok:?}: {e}")))?;
                data.push(v);
            }
            if data.len() - before != cols {
                return Err(CodaError::Parse(format!(
                    "row {r} has {} values, expected {cols}",
                    data.len() - before
                )));
            }
        }
        Matrix::new(rows, cols, data)
    }

    pub fn read_text_file(path: impl AsRef<Path>) -> Result<Matrix> {
        Matrix::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn write_text_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Matrix product. Multiply-adds are recorded on the thread-local counter.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(CodaError::dim("matmul", a.shape(), b.shape()));
    }
    let (n, m, p) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        let out_row = &mut out[i * p..(i + 1) * p];
        for k in 0..m {
            let aik = a.data[i * m + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * p..(k + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    flops::record((n * m * p) as u64);
    Ok(Matrix {
        rows: n,
        cols: p,
        data: out,
    })
}

/// Row-wise softmax with max subtraction.
pub fn row_softmax(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `ln(sum(exp(v)))` with max subtraction.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-row normalization statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormStats {
    /// Normalized input before gain and bias.
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64], eps: f64) -> Result<Matrix> {
    layer_norm_with_stats(x, gain, bias, eps).map(|(y, _)| y)
}

pub fn layer_norm_with_stats(
    x: &Matrix,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> Result<(Matrix, LayerNormStats)> {
    if gain.len() != x.cols || bias.len() != x.cols {
        return Err(CodaError::dim("layer_norm", x.shape(), (gain.len(), bias.len())));
    }
    if eps <= 0.0 {
        return Err(CodaError::Input(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let d = x.cols as f64;
    let mut normalized = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = normalized.row_mut(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let is = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv_std.push(is);
    }
    let mut y = normalized.clone();
    for r in 0..y.rows {
        for ((v, g), b) in y.row_mut(r).iter_mut().zip(gain).zip(bias) {
            *v = *v * g + b;
        }
    }
    Ok((y, LayerNormStats { normalized, inv_std }))
}

/// Thread-local multiply-add counter. Every [`matmul`] records
/// `rows * inner * cols`; the soft top-k iterations record their scalar work.
pub mod flops {
    use super::Cell;

    thread_local! {
        static COUNTER: Cell<u64> = const { Cell::new(0) };
    }

    pub fn record(n: u64) {
        COUNTER.with(|c| c.set(c.get() + n));
    }

    pub fn read() -> u64 {
        COUNTER.with(Cell::get)
    }

    pub fn reset() {
        COUNTER.with(|c| c.set(0));
    }

    /// Runs `f` and returns its result with the multiply-adds it executed on
    /// this thread.
    pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
        let before = read();
        let out = f();
        (out, read() - before)
    }
}

/// Seeded deterministic RNG (ChaCha8 stream).
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream derived from this seed and a tag.
    pub fn fork(&self, tag: u64) -> Rng {
        Rng::new(self.seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `count` distinct indices from `0..n`, ascending.
    pub fn distinct(&mut self, n: usize, count: usize) -> Vec<usize> {
        let mut all: Vec<usize> = (0..n).collect();
        self.shuffle(&mut all);
        let mut picked = all[..count.min(n)].to_vec();
        picked.sort_unstable();
        picked
    }

    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| std * self.normal()).collect();
        Matrix { rows, cols, data }
    }

    pub fn uniform_matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| self.uniform_range(lo, hi)).collect();
        Matrix { rows, cols, data }
    }

    pub fn uniform_vec(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.uniform_range(lo, hi)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let m = Matrix::from_rows(&[vec![1.5, -2.0], vec![0.25, 3.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Matrix::column_vector(&[1.0, 1.0]);
        assert_eq!(matmul(&a, &b).unwrap(), Matrix::column_vector(&[3.0, 7.0]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(11);
        let a = rng.gaussian_matrix(8, 8, 1.0);
        let b = rng.gaussian_matrix(8, 8, 1.0);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3 vs 2x3"), "{msg}");
    }

    #[test]
    fn matmul_associativity() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let a = rng.gaussian_matrix(5, 7, 1.0);
            let b = rng.gaussian_matrix(7, 3, 1.0);
            let c = rng.gaussian_matrix(3, 6, 1.0);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let rel = left.max_abs_diff(&right) / left.max_abs().max(1.0);
            assert!(rel < 1e-9);
        }
    }

    #[test]
    fn matmul_counts_multiply_adds() {
        let a = Matrix::filled(3, 4, 1.0);
        let b = Matrix::filled(4, 5, 1.0);
        let (_, n) = flops::measure(|| matmul(&a, &b).unwrap());
        assert_eq!(n, 60);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Matrix::filled(1, 4, 3.7);
        let y = layer_norm(&x, &[1.0; 4], &[0.0; 4], LAYER_NORM_EPS).unwrap();
        assert!(y.max_abs() < 1e-12);
    }

    #[test]
    fn layer_norm_already_normalized() {
        let x = Matrix::row_vector(&[1.0, -1.0]);
        let y = layer_norm(&x, &[1.0; 2], &[0.0; 2], 1e-15).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = Rng::new(3);
        let x = rng.gaussian_matrix(4, 8, 2.0);
        let y = layer_norm(&x, &[1.0; 8], &[0.0; 8], LAYER_NORM_EPS).unwrap();
        for r in 0..4 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_shift_invariant() {
        let mut rng = Rng::new(4);
        let x = rng.gaussian_matrix(3, 6, 1.0);
        let shifted = x.map(|v| v + 12.5);
        let g = vec![1.0; 6];
        let b = vec![0.0; 6];
        let y1 = layer_norm(&x, &g, &b, LAYER_NORM_EPS).unwrap();
        let y2 = layer_norm(&shifted, &g, &b, LAYER_NORM_EPS).unwrap();
        assert!(y1.max_abs_diff(&y2) < 1e-9);
    }

    #[test]
    fn layer_norm_length_mismatch() {
        let x = Matrix::zeros(2, 3);
        assert!(matches!(
            layer_norm(&x, &[1.0; 2], &[0.0; 3], 1e-6),
            Err(CodaError::Dimension { .. })
        ));
    }

    #[test]
    fn softmax_cases() {
        let y = row_softmax(&Matrix::filled(1, 5, 0.3));
        assert!(y.data().iter().all(|v| (v - 0.2).abs() < 1e-15));
        let y = row_softmax(&Matrix::row_vector(&[0.0, 3f64.ln()]));
        assert!((y.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((y.get(0, 1) - 0.75).abs() < 1e-15);
        let y = row_softmax(&Matrix::row_vector(&[1e4, -1e4, 1e4 - 1.0]));
        assert!(y.is_finite());
        assert!((y.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rng_reproducible() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::new(43);
        assert_ne!(Rng::new(42).next_u64(), c.next_u64());
    }

    #[test]
    fn text_format_round_trip_and_errors() {
        let mut rng = Rng::new(8);
        let m = rng.gaussian_matrix(3, 4, 1.0);
        assert_eq!(Matrix::from_text(&m.to_text()).unwrap(), m);
        assert!(Matrix::from_text("2 2\n1 2\n3\n").is_err());
        assert!(Matrix::from_text("2 x\n").is_err());
        assert!(Matrix::from_text("").is_err());
        let with_comment = "# grid 1 2\n1 2\n0.5 1.5\n";
        assert_eq!(
            Matrix::from_text(with_comment).unwrap(),
            Matrix::row_vector(&[0.5, 1.5])
        );
    }

    #[test]
    fn gather_scatter_rows() {
        let m = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]);
        let g = m.gather_rows(&[1, 3]).unwrap();
        assert_eq!(g, Matrix::column_vector(&[2.0, 4.0]));
        let s = g.scatter_rows(&[1, 3], 4).unwrap();
        assert_eq!(s, Matrix::column_vector(&[0.0, 2.0, 0.0, 4.0]));
    }
}
