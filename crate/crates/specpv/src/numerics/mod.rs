//! Dense numeric kernels shared by the model, drafter, and cache code.
//!
//! Everything is plain f32 with f64 accumulation for dot products and
//! reductions, which keeps results deterministic for a fixed input order.

pub mod rng;
pub mod rope;

use crate::error::{Error, Result};

/// Row-major 2-D tensor of f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2D {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                context: "Tensor2D::from_vec",
                expected: format!("{} values", rows * cols),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Tensor2D { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    context: "Tensor2D::from_rows",
                    expected: format!("{cols} columns"),
                    actual: format!("{} columns", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor2D {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Empty tensor that rows of width `cols` can be pushed onto.
    pub fn with_cols(cols: usize) -> Self {
        Tensor2D {
            rows: 0,
            cols,
            data: Vec::new(),
        }
    }

    pub fn push_row(&mut self, row: &[f32]) {
        debug_assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// New tensor holding rows `[start, end)` of `self`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor2D {
        Tensor2D {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Columns `[start, end)` of every row, as a new tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor2D {
        let w = end - start;
        let mut data = Vec::with_capacity(self.rows * w);
        for r in 0..self.rows {
            let row = self.row(r);
            data.extend_from_slice(&row[start..end]);
        }
        Tensor2D {
            rows: self.rows,
            cols: w,
            data,
        }
    }

    /// Matrix product with f64 accumulation.
    pub fn matmul(&self, rhs: &Tensor2D) -> Result<Tensor2D> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch {
                context: "Tensor2D::matmul",
                expected: format!("lhs cols == rhs rows ({} )", self.cols),
                actual: format!("{}", rhs.rows),
            });
        }
        let mut out = Tensor2D::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let lhs_row = self.row(i);
            let out_row = out.row_mut(i);
            for (k, &l) in lhs_row.iter().enumerate() {
                if l == 0.0 {
                    continue;
                }
                let rhs_row = rhs.row(k);
                for (j, &r) in rhs_row.iter().enumerate() {
                    // f32 fma path kept simple; determinism comes from fixed order
                    out_row[j] += l * r;
                }
            }
        }
        Ok(out)
    }
}

/// Dot product with f64 accumulation, rounded to f32 at the end.
pub fn dot_f64(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += *x as f64 * *y as f64;
    }
    acc as f32
}

/// Row vector times matrix: `x` (len = w.rows) -> output (len = w.cols).
pub fn vec_matmul(x: &[f32], w: &Tensor2D) -> Result<Vec<f32>> {
    if x.len() != w.rows {
        return Err(Error::ShapeMismatch {
            context: "vec_matmul",
            expected: format!("input of length {}", w.rows),
            actual: format!("{}", x.len()),
        });
    }
    let mut out = vec![0.0f64; w.cols];
    for (k, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        let row = w.row(k);
        let xv = xv as f64;
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xv * wv as f64;
        }
    }
    Ok(out.into_iter().map(|v| v as f32).collect())
}

/// Dense boolean matrix used for attention masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMatrix {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BoolMatrix {
    pub fn new(rows: usize, cols: usize, value: bool) -> Self {
        BoolMatrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: bool) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Count of true cells in a row.
    pub fn row_count(&self, r: usize) -> usize {
        self.row(r).iter().filter(|&&b| b).count()
    }
}

/// Numerically stabilized softmax. Errors on empty input.
pub fn softmax(v: &[f32]) -> Result<Vec<f32>> {
    if v.is_empty() {
        return Err(Error::EmptyInput("empty logits"));
    }
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !max.is_finite() {
        return Err(Error::EmptyInput("non-finite logits"));
    }
    let mut exps = Vec::with_capacity(v.len());
    let mut sum = 0.0f64;
    for &x in v {
        let e = (x - max).exp() as f64;
        exps.push(e);
        sum += e;
    }
    Ok(exps.into_iter().map(|e| (e / sum) as f32).collect())
}

/// RMS normalization: `y_d = x_d * weight_d / sqrt(mean(x^2) + eps)`.
pub fn rmsnorm(x: &[f32], weight: &[f32], eps: f32) -> Result<Vec<f32>> {
    if x.len() != weight.len() {
        return Err(Error::ShapeMismatch {
            context: "rmsnorm",
            expected: format!("weight of length {}", x.len()),
            actual: format!("{}", weight.len()),
        });
    }
    if x.is_empty() {
        return Err(Error::EmptyInput("empty rmsnorm input"));
    }
    let mut ss = 0.0f64;
    for &v in x {
        ss += v as f64 * v as f64;
    }
    let inv = 1.0 / (ss / x.len() as f64 + eps as f64).sqrt();
    Ok(x.iter()
        .zip(weight)
        .map(|(&v, &w)| (v as f64 * inv * w as f64) as f32)
        .collect())
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Row-wise masked scaled-dot-product attention.
///
/// `mask[i][j] == true` lets query row `i` attend to key row `j`. A fully
/// masked query row is an error rather than a NaN.
pub fn masked_attention(
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
    mask: &BoolMatrix,
    scale: f32,
) -> Result<Tensor2D> {
    if q.cols() != k.cols() {
        return Err(Error::ShapeMismatch {
            context: "masked_attention q/k",
            expected: format!("{} cols", q.cols()),
            actual: format!("{} cols", k.cols()),
        });
    }
    if k.rows() != v.rows() {
        return Err(Error::ShapeMismatch {
            context: "masked_attention k/v",
            expected: format!("{} rows", k.rows()),
            actual: format!("{} rows", v.rows()),
        });
    }
    if mask.rows() != q.rows() || mask.cols() != k.rows() {
        return Err(Error::ShapeMismatch {
            context: "masked_attention mask",
            expected: format!("{}x{}", q.rows(), k.rows()),
            actual: format!("{}x{}", mask.rows(), mask.cols()),
        });
    }
    let mut out = Tensor2D::zeros(q.rows(), v.cols());
    let mut scores: Vec<(usize, f32)> = Vec::with_capacity(k.rows());
    for i in 0..q.rows() {
        scores.clear();
        let qi = q.row(i);
        for j in 0..k.rows() {
            if mask.get(i, j) {
                scores.push((j, dot_f64(qi, k.row(j)) * scale));
            }
        }
        if scores.is_empty() {
            return Err(Error::IsolatedQuery { row: i });
        }
        let max = scores
            .iter()
            .map(|&(_, s)| s)
            .fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f64;
        let mut weights: Vec<f64> = Vec::with_capacity(scores.len());
        for &(_, s) in &scores {
            let e = (s - max).exp() as f64;
            weights.push(e);
            denom += e;
        }
        let out_row = out.row_mut(i);
        let mut acc = vec![0.0f64; v.cols()];
        for (&(j, _), &w) in scores.iter().zip(&weights) {
            let vw = w / denom;
            for (a, &vv) in acc.iter_mut().zip(v.row(j)) {
                *a += vw * vv as f64;
            }
        }
        for (o, a) in out_row.iter_mut().zip(acc) {
            *o = a as f32;
        }
    }
    Ok(out)
}

/// Attention with every key visible to every query.
pub fn full_attention(q: &Tensor2D, k: &Tensor2D, v: &Tensor2D, scale: f32) -> Result<Tensor2D> {
    let mask = BoolMatrix::new(q.rows(), k.rows(), true);
    masked_attention(q, k, v, &mask, scale)
}
