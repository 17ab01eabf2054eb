//! Dense numeric kernel shared by the model, the losses and the optimizer.
//!
//! Vectors are plain `&[f64]` / `Vec<f64>`; matrices are row-major [`Mat64`].
//! Everything here is pure: identical inputs give bit-identical outputs.

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Mat64::from_vec",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(
                    "Mat64::from_rows",
                    format!("row 0 has {cols} columns"),
                    format!("row {i} has {}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Appends rows at the bottom; `extra` is row-major with `cols` columns.
    pub(crate) fn push_rows(&mut self, extra: &[f64]) {
        debug_assert_eq!(extra.len() % self.cols.max(1), 0);
        if let Some(rows) = extra.len().checked_div(self.cols) {
            self.rows += rows;
        }
        self.data.extend_from_slice(extra);
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    /// `W x` without shape checks; callers guarantee `x.len() == cols`.
    pub(crate) fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `Wᵀ g` without shape checks; callers guarantee `g.len() == rows`.
    pub(crate) fn mul_vec_t(&self, g: &[f64]) -> Vec<f64> {
        debug_assert_eq!(g.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &gr) in g.iter().enumerate() {
            if gr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += gr * w;
            }
        }
        out
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `W x + b`.
pub fn affine(x: &[f64], w: &Mat64, b: &[f64]) -> Result<Vec<f64>> {
    if w.cols != x.len() {
        return Err(Error::shape(
            "affine",
            format!("W {}", w.shape_str()),
            format!("x len {}", x.len()),
        ));
    }
    if b.len() != w.rows {
        return Err(Error::shape(
            "affine",
            format!("W {}", w.shape_str()),
            format!("b len {}", b.len()),
        ));
    }
    let mut out = w.mul_vec(x);
    for (o, bi) in out.iter_mut().zip(b) {
        *o += bi;
    }
    Ok(out)
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(s: &[f64]) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Err(Error::contract("softmax of an empty vector"));
    }
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = s.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `log softmax(s)[k]` via log-sum-exp.
pub fn log_softmax_at(s: &[f64], k: usize) -> f64 {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + s.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    s[k] - lse
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Element-wise mean of equally sized vectors. `vs` must be nonempty.
pub(crate) fn mean_of<'a>(vs: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for v in vs {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
        n += 1;
    }
    let inv = 1.0 / n as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    acc
}

/// A collection of parameter tensors visited in a fixed declaration order.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn zero_gradients(&self) -> Gradients {
        Gradients {
            tensors: self.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

impl ParamSet for Vec<f64> {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.as_slice()]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.as_mut_slice()]
    }
}

/// Per-tensor gradients, shape-congruent with some [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn check_congruent<P: ParamSet + ?Sized>(&self, params: &P) -> Result<()> {
        let ps = params.tensors();
        if ps.len() != self.tensors.len() {
            return Err(Error::contract(format!(
                "gradient has {} tensors, parameter set has {}",
                self.tensors.len(),
                ps.len()
            )));
        }
        for (i, (p, g)) in ps.iter().zip(&self.tensors).enumerate() {
            if p.len() != g.len() {
                return Err(Error::contract(format!(
                    "tensor {i}: parameter length {} vs gradient length {}",
                    p.len(),
                    g.len()
                )));
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|g| g.is_finite())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flatten().copied().collect()
    }
}

/// Plain SGD: `p ← p − lr · g` for every coordinate.
pub fn sgd_step<P: ParamSet + ?Sized>(params: &mut P, grads: &Gradients, lr: f64) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::contract(format!(
            "learning rate must be nonnegative, got {lr}"
        )));
    }
    grads.check_congruent(params)?;
    if lr == 0.0 {
        return Ok(());
    }
    for (p, g) in params.tensors_mut().into_iter().zip(&grads.tensors) {
        for (pi, gi) in p.iter_mut().zip(g) {
            *pi -= lr * gi;
        }
    }
    Ok(())
}

/// Central finite differences of `f` at `params`, one coordinate at a time.
pub fn finite_diff_grad<P, F>(mut f: F, params: &P, eps: f64) -> Result<Gradients>
where
    P: ParamSet + Clone,
    F: FnMut(&P) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::Oracle(format!("eps must be positive, got {eps}")));
    }
    let mut probe = params.clone();
    let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut out = Vec::with_capacity(shapes.len());
    for (ti, &len) in shapes.iter().enumerate() {
        let mut g = vec![0.0; len];
        for (k, gk) in g.iter_mut().enumerate() {
            let orig = probe.tensors()[ti][k];
            probe.tensors_mut()[ti][k] = orig + eps;
            let up = f(&probe);
            probe.tensors_mut()[ti][k] = orig - eps;
            let down = f(&probe);
            probe.tensors_mut()[ti][k] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Oracle(format!(
                    "non-finite evaluation at tensor {ti}, coordinate {k}"
                )));
            }
            *gk = (up - down) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(Gradients { tensors: out })
}

/// `max |a−b| / max(|a|, |b|, floor)` over all coordinates.
pub fn max_relative_error(a: &Gradients, b: &Gradients, floor: f64) -> f64 {
    a.tensors
        .iter()
        .flatten()
        .zip(b.tensors.iter().flatten())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
