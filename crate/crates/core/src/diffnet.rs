//! Dense 64-bit numerics with hand-written backward passes.
//!
//! Every forward primitive here has a matching `*_backward` function that maps
//! an upstream gradient to gradients of the inputs. Nothing else in the crate
//! computes derivatives of primitives on its own.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} entries, expected {}x{}={}",
                data.len(),
                rows,
                cols,
                rows * cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::invalid(format!(
                    "ragged matrix: row {i} has {} entries, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Entries drawn uniformly from `[-scale, scale]`.
    pub fn uniform<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-scale..=scale))
            .collect();
        Matrix { rows, cols, data }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self · other`. Zero entries of `self` are skipped, which makes sparse
    /// bag-of-words inputs cheap.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape {
                op: "t_matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let b_row = other.row(r);
            for i in 0..self.cols {
                let a = self.data[r * self.cols + i];
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape {
                op: "matmul_t",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a_row, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn column_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for i in 0..self.rows {
            for (o, &v) in out.data.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: "add_assign",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }
}

impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        Matrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Flattened gradient (or parameter point) tagged with the layout it was
/// flattened from.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    pub values: Vec<f64>,
    pub layout_id: String,
}

impl GradientVector {
    pub fn new(values: Vec<f64>, layout_id: impl Into<String>) -> Self {
        GradientVector {
            values,
            layout_id: layout_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dot(&self, other: &GradientVector) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.values, &self.values)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn check_compatible(&self, other: &GradientVector) -> Result<()> {
        if self.values.len() != other.values.len() || self.layout_id != other.layout_id {
            return Err(Error::invalid(format!(
                "gradient layouts differ: {} ({} values) vs {} ({} values)",
                self.layout_id,
                self.values.len(),
                other.layout_id,
                other.values.len()
            )));
        }
        Ok(())
    }
}

pub struct AffineGrads {
    pub dx: Matrix,
    pub dw: Matrix,
    pub db: Matrix,
}

/// `y = x·W + b` with `b` broadcast over rows.
pub fn affine(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    if b.rows() != 1 || b.cols() != w.cols() {
        return Err(Error::Shape {
            op: "affine bias",
            left: w.shape(),
            right: b.shape(),
        });
    }
    let mut y = x.matmul(w)?;
    for i in 0..y.rows() {
        for (v, &bias) in y.row_mut(i).iter_mut().zip(b.as_slice()) {
            *v += bias;
        }
    }
    Ok(y)
}

pub fn affine_backward(x: &Matrix, w: &Matrix, dy: &Matrix) -> Result<AffineGrads> {
    if dy.rows() != x.rows() || dy.cols() != w.cols() {
        return Err(Error::Shape {
            op: "affine_backward",
            left: (x.rows(), w.cols()),
            right: dy.shape(),
        });
    }
    Ok(AffineGrads {
        dx: dy.matmul_t(w)?,
        dw: x.t_matmul(dy)?,
        db: dy.column_sums(),
    })
}

/// Parameter gradients of an affine layer only, skipping `∂L/∂x`.
pub fn affine_param_grads(x: &Matrix, dy: &Matrix) -> Result<(Matrix, Matrix)> {
    Ok((x.t_matmul(dy)?, dy.column_sums()))
}

#[inline]
fn softplus_scalar(v: f64) -> f64 {
    // log(1 + e^v) without overflow for large v
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: &Matrix) -> Matrix {
    x.map(softplus_scalar)
}

/// `dx = dy ⊙ σ(x)`; takes the pre-activation input.
pub fn softplus_backward(x: &Matrix, dy: &Matrix) -> Result<Matrix> {
    check_same("softplus_backward", x, dy)?;
    let mut dx = dy.clone();
    for (d, &v) in dx.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *d *= sigmoid(v);
    }
    Ok(dx)
}

/// Row-wise softmax, stabilized by subtracting the row max.
pub fn softmax(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Takes the softmax output `y`: `dx = y ⊙ (dy − ⟨dy, y⟩)` row-wise.
pub fn softmax_backward(y: &Matrix, dy: &Matrix) -> Result<Matrix> {
    check_same("softmax_backward", y, dy)?;
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        let (yr, dyr) = (y.row(i), dy.row(i));
        let inner = dot(yr, dyr);
        for ((d, &p), &g) in dx.row_mut(i).iter_mut().zip(yr).zip(dyr) {
            *d = p * (g - inner);
        }
    }
    Ok(dx)
}

pub fn log_softmax(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Takes the log-softmax output: `dx = dy − softmax(x)·Σdy` row-wise.
pub fn log_softmax_backward(log_y: &Matrix, dy: &Matrix) -> Result<Matrix> {
    check_same("log_softmax_backward", log_y, dy)?;
    let mut dx = dy.clone();
    for i in 0..dx.rows() {
        let total: f64 = dy.row(i).iter().sum();
        for (d, &lp) in dx.row_mut(i).iter_mut().zip(log_y.row(i)) {
            *d -= lp.exp() * total;
        }
    }
    Ok(dx)
}

fn check_same(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Min,
    Max,
    Mean,
    Sum,
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolMode::Min => "min",
            PoolMode::Max => "max",
            PoolMode::Mean => "mean",
            PoolMode::Sum => "sum",
        })
    }
}

impl FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "min" => Ok(PoolMode::Min),
            "max" => Ok(PoolMode::Max),
            "mean" => Ok(PoolMode::Mean),
            "sum" => Ok(PoolMode::Sum),
            other => Err(Error::invalid(format!(
                "unknown pooling mode '{other}' (expected min|max|mean|sum)"
            ))),
        }
    }
}

/// Result of pooling a set of rows. For min/max, `winners[t]` is the row
/// that supplied component `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pooled {
    pub value: Vec<f64>,
    pub mode: PoolMode,
    pub set_size: usize,
    pub winners: Vec<usize>,
}

pub fn pool(rows: &[&[f64]], mode: PoolMode) -> Result<Pooled> {
    let first = rows
        .first()
        .ok_or_else(|| Error::invalid("cannot pool an empty set"))?;
    let dim = first.len();
    if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::invalid(format!(
            "pooled rows differ in dimension: {dim} vs {}",
            bad.len()
        )));
    }
    let mut value = first.to_vec();
    let mut winners = Vec::new();
    match mode {
        PoolMode::Min | PoolMode::Max => {
            winners = vec![0; dim];
            for (k, row) in rows.iter().enumerate().skip(1) {
                for t in 0..dim {
                    // strict comparison keeps the lowest row index on ties
                    let better = match mode {
                        PoolMode::Max => row[t] > value[t],
                        _ => row[t] < value[t],
                    };
                    if better {
                        value[t] = row[t];
                        winners[t] = k;
                    }
                }
            }
        }
        PoolMode::Mean | PoolMode::Sum => {
            for row in &rows[1..] {
                for (v, &r) in value.iter_mut().zip(row.iter()) {
                    *v += r;
                }
            }
            if mode == PoolMode::Mean {
                let k = rows.len() as f64;
                for v in &mut value {
                    *v /= k;
                }
            }
        }
    }
    Ok(Pooled {
        value,
        mode,
        set_size: rows.len(),
        winners,
    })
}

/// Gradient with respect to each pooled row, `set_size × dim`.
pub fn pool_backward(pooled: &Pooled, upstream: &[f64]) -> Vec<Vec<f64>> {
    let dim = pooled.value.len();
    let mut grads = vec![vec![0.0; dim]; pooled.set_size];
    match pooled.mode {
        PoolMode::Min | PoolMode::Max => {
            for t in 0..dim {
                grads[pooled.winners[t]][t] = upstream[t];
            }
        }
        PoolMode::Sum => {
            for g in &mut grads {
                g.copy_from_slice(upstream);
            }
        }
        PoolMode::Mean => {
            let k = pooled.set_size as f64;
            for g in &mut grads {
                for (d, &u) in g.iter_mut().zip(upstream) {
                    *d = u / k;
                }
            }
        }
    }
    grads
}

/// `uᵀv / (‖u‖‖v‖τ)`.
pub fn cosine_sim_tau(u: &[f64], v: &[f64], tau: f64) -> Result<f64> {
    check_cosine_args(u, v, tau)?;
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm("cosine_sim_tau"));
    }
    Ok(dot(u, v) / (nu * nv * tau))
}

/// Returns `(f, ∂f/∂u, ∂f/∂v)`.
pub fn cosine_sim_tau_grad(u: &[f64], v: &[f64], tau: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_cosine_args(u, v, tau)?;
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm("cosine_sim_tau"));
    }
    let cos = dot(u, v) / (nu * nv);
    let du = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| (b / nv - cos * a / nu) / (nu * tau))
        .collect();
    let dv = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| (a / nu - cos * b / nv) / (nv * tau))
        .collect();
    Ok((cos / tau, du, dv))
}

fn check_cosine_args(u: &[f64], v: &[f64], tau: f64) -> Result<()> {
    if u.len() != v.len() {
        return Err(Error::invalid(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub probes: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-3,
            probes: 100,
            seed: 0,
        }
    }
}

/// `|a − f| / max(1e−8, |a| + |f|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `gradient(params)` against central finite differences of `loss`
/// on randomly chosen coordinates and returns the largest relative error.
pub fn grad_check<L, G>(loss: L, gradient: G, params: &[f64], opts: &GradCheckOptions) -> Result<f64>
where
    L: Fn(&[f64]) -> Result<f64>,
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if params.is_empty() {
        return Err(Error::invalid("grad_check needs at least one parameter"));
    }
    let base = loss(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss at base point is {base}")));
    }
    let analytic = gradient(params)?;
    if analytic.len() != params.len() {
        return Err(Error::invalid(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut point = params.to_vec();
    let mut worst = 0.0_f64;
    for _ in 0..opts.probes {
        let i = rng.random_range(0..params.len());
        let orig = point[i];
        let mut at = |offset: f64| {
            point[i] = orig + offset * opts.step;
            loss(&point)
        };
        let (p2, p1, m1, m2) = (at(2.0)?, at(1.0)?, at(-1.0)?, at(-2.0)?);
        point[i] = orig;
        if ![p2, p1, m1, m2].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "loss is not finite near coordinate {i}"
            )));
        }
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * opts.step);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn affine_identity() {
        let y = affine(&Matrix::identity(2), &Matrix::identity(2), &Matrix::zeros(1, 2)).unwrap();
        assert_eq!(y, Matrix::identity(2));
    }

    #[test]
    fn affine_hand_multiply() {
        let y = affine(&m(&[&[1.0, 2.0]]), &m(&[&[1.0], &[1.0]]), &m(&[&[3.0]])).unwrap();
        assert_eq!(y.as_slice(), &[6.0]);
    }

    #[test]
    fn affine_bias_gradient_is_column_sum() {
        let x = m(&[&[0.3, -1.0], &[2.0, 0.5]]);
        let w = m(&[&[1.0], &[2.0]]);
        let g = affine_backward(&x, &w, &m(&[&[1.0], &[1.0]])).unwrap();
        assert_eq!(g.db.as_slice(), &[2.0]);
    }

    #[test]
    fn affine_shape_mismatch_names_shapes() {
        let err = affine(&Matrix::zeros(2, 3), &Matrix::zeros(2, 2), &Matrix::zeros(1, 2)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)") && msg.contains("(2, 2)"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&m(&[&[0.0, 0.0], &[1000.0, 0.0]]));
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert_abs_diff_eq!(s.get(1, 0), 1.0, epsilon = 1e-12);
        assert!(s.get(1, 1) >= 0.0 && s.get(1, 1) < 1e-300);
        assert!(s.is_finite());
        let ls = log_softmax(&m(&[&[1000.0, 0.0]]));
        assert_abs_diff_eq!(ls.get(0, 1), -1000.0, epsilon = 1e-9);
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let s = softplus(&m(&[&[0.0, 800.0, -800.0]]));
        assert_abs_diff_eq!(s.get(0, 0), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(s.get(0, 1), 800.0, epsilon = 1e-12);
        assert!(s.get(0, 2) >= 0.0 && s.get(0, 2) < 1e-300);
    }

    #[test]
    fn pool_examples() {
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        assert_eq!(pool(&[&a, &b], PoolMode::Max).unwrap().value, vec![1.0, 1.0]);
        assert_eq!(pool(&[&a, &b], PoolMode::Min).unwrap().value, vec![0.0, 0.0]);
        let c = [2.0, 2.0];
        let d = [0.0, 0.0];
        assert_eq!(pool(&[&c, &d], PoolMode::Mean).unwrap().value, vec![1.0, 1.0]);
        assert!(pool(&[], PoolMode::Sum).is_err());
    }

    #[test]
    fn pool_ties_route_to_lowest_row() {
        let a = [1.0, 5.0];
        let b = [1.0, 5.0];
        let p = pool(&[&a, &b], PoolMode::Max).unwrap();
        let g = pool_backward(&p, &[2.0, 3.0]);
        assert_eq!(g, vec![vec![2.0, 3.0], vec![0.0, 0.0]]);
        let p = pool(&[&a, &b], PoolMode::Min).unwrap();
        assert_eq!(pool_backward(&p, &[2.0, 3.0])[1], vec![0.0, 0.0]);
    }

    #[test]
    fn cosine_examples() {
        assert_abs_diff_eq!(cosine_sim_tau(&[1.0, 0.0], &[1.0, 0.0], 0.2).unwrap(), 5.0, epsilon = 1e-12);
        assert_eq!(cosine_sim_tau(&[1.0, 0.0], &[0.0, 1.0], 0.2).unwrap(), 0.0);
        assert_abs_diff_eq!(
            cosine_sim_tau(&[1.0, 1.0], &[1.0, 0.0], 1.0).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-12
        );
        assert!(matches!(
            cosine_sim_tau(&[0.0, 0.0], &[1.0, 0.0], 1.0),
            Err(Error::ZeroNorm(_))
        ));
    }

    #[test]
    fn grad_check_quadratic_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
        let err = grad_check(
            |x| Ok(0.5 * dot(x, x)),
            |x| Ok(x.to_vec()),
            &p,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
        let err = grad_check(|_| Ok(4.2), |x| Ok(vec![0.0; x.len()]), &p, &GradCheckOptions::default()).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_rejects_non_finite_loss() {
        let r = grad_check(|_| Ok(f64::NAN), |x| Ok(x.to_vec()), &[1.0], &GradCheckOptions::default());
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    /// affine → softmax → cross-entropy on a 3-class toy net, all
    /// parameters packed into one vector.
    #[test]
    fn grad_check_toy_classifier() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Matrix::uniform(4, 3, 1.0, &mut rng);
        let targets = [0usize, 2, 1, 2];
        let unpack = |p: &[f64]| {
            (
                Matrix::from_vec(3, 3, p[..9].to_vec()).unwrap(),
                Matrix::from_vec(1, 3, p[9..].to_vec()).unwrap(),
            )
        };
        let loss = |p: &[f64]| {
            let (w, b) = unpack(p);
            let lp = log_softmax(&affine(&x, &w, &b)?);
            Ok(-targets.iter().enumerate().map(|(i, &t)| lp.get(i, t)).sum::<f64>())
        };
        let grad = |p: &[f64]| {
            let (w, b) = unpack(p);
            let lp = log_softmax(&affine(&x, &w, &b)?);
            let mut dlp = Matrix::zeros(4, 3);
            for (i, &t) in targets.iter().enumerate() {
                dlp.set(i, t, -1.0);
            }
            let dy = log_softmax_backward(&lp, &dlp)?;
            let g = affine_backward(&x, &w, &dy)?;
            let mut out = g.dw.into_vec();
            out.extend(g.db.into_vec());
            Ok(out)
        };
        let p: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = grad_check(loss, grad, &p, &GradCheckOptions::default()).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn brute_pool(rows: &[Vec<f64>], mode: PoolMode) -> Vec<f64> {
        let dim = rows[0].len();
        (0..dim)
            .map(|t| {
                let col = rows.iter().map(|r| r[t]);
                match mode {
                    PoolMode::Max => col.fold(f64::NEG_INFINITY, f64::max),
                    PoolMode::Min => col.fold(f64::INFINITY, f64::min),
                    PoolMode::Sum => col.sum(),
                    PoolMode::Mean => col.sum::<f64>() / rows.len() as f64,
                }
            })
            .collect()
    }

    fn set_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..=6, 1usize..=8).prop_flat_map(|(k, t)| {
            prop::collection::vec(prop::collection::vec(-10.0f64..10.0, t), k)
        })
    }

    proptest! {
        #[test]
        fn pool_matches_brute_force(rows in set_strategy()) {
            let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
            for mode in [PoolMode::Min, PoolMode::Max, PoolMode::Mean, PoolMode::Sum] {
                let got = pool(&refs, mode).unwrap().value;
                let want = brute_pool(&rows, mode);
                for (g, w) in got.iter().zip(&want) {
                    prop_assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()));
                }
            }
        }

        #[test]
        fn softmax_rows_are_distributions(rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 1..10), 1..5)) {
            let cols = rows[0].len();
            let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(cols, 0.0); r }).collect();
            let s = softmax(&Matrix::from_rows(&rows).unwrap());
            for i in 0..s.rows() {
                prop_assert!(s.row(i).iter().all(|&p| p >= 0.0));
                prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    /// Every primitive against finite differences at 100 random points.
    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let opts = GradCheckOptions { probes: 10, ..Default::default() };
        for trial in 0..100u64 {
            // a fixed random upstream makes each primitive a scalar loss
            let up: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let as_mat = |p: &[f64]| Matrix::from_vec(2, 3, p.to_vec()).unwrap();
            let upm = as_mat(&up);
            let weighted = |y: &Matrix| dot(y.as_slice(), &up);
            let o = GradCheckOptions { seed: trial, ..opts.clone() };

            let e = grad_check(
                |p| Ok(weighted(&softplus(&as_mat(p)))),
                |p| Ok(softplus_backward(&as_mat(p), &upm)?.into_vec()),
                &x,
                &o,
            )
            .unwrap();
            assert!(e < 1e-4, "softplus {e}");

            let e = grad_check(
                |p| Ok(weighted(&softmax(&as_mat(p)))),
                |p| Ok(softmax_backward(&softmax(&as_mat(p)), &upm)?.into_vec()),
                &x,
                &o,
            )
            .unwrap();
            assert!(e < 1e-4, "softmax {e}");

            let e = grad_check(
                |p| Ok(weighted(&log_softmax(&as_mat(p)))),
                |p| Ok(log_softmax_backward(&log_softmax(&as_mat(p)), &upm)?.into_vec()),
                &x,
                &o,
            )
            .unwrap();
            assert!(e < 1e-4, "log_softmax {e}");

            // affine: params are x (2x3) and W (3x2) and b (1x2)
            let pw: Vec<f64> = (0..14).map(|_| rng.random_range(-1.0..1.0)).collect();
            let up2: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let split = |p: &[f64]| {
                (
                    Matrix::from_vec(2, 3, p[..6].to_vec()).unwrap(),
                    Matrix::from_vec(3, 2, p[6..12].to_vec()).unwrap(),
                    Matrix::from_vec(1, 2, p[12..].to_vec()).unwrap(),
                )
            };
            let e = grad_check(
                |p| {
                    let (a, w, b) = split(p);
                    Ok(dot(affine(&a, &w, &b)?.as_slice(), &up2))
                },
                |p| {
                    let (a, w, _) = split(p);
                    let g = affine_backward(&a, &w, &Matrix::from_vec(2, 2, up2.clone())?)?;
                    let mut out = g.dx.into_vec();
                    out.extend(g.dw.into_vec());
                    out.extend(g.db.into_vec());
                    Ok(out)
                },
                &pw,
                &o,
            )
            .unwrap();
            assert!(e < 1e-4, "affine {e}");

            // cosine over (u, v) packed
            let tau = rng.random_range(0.1..1.0);
            let e = grad_check(
                |p| cosine_sim_tau(&p[..3], &p[3..], tau),
                |p| {
                    let (_, du, dv) = cosine_sim_tau_grad(&p[..3], &p[3..], tau)?;
                    Ok([du, dv].concat())
                },
                &x,
                &o,
            )
            .unwrap();
            assert!(e < 1e-4, "cosine {e}");

            // pooling over 3 rows of width 2 (ties have probability zero here)
            for mode in [PoolMode::Min, PoolMode::Max, PoolMode::Mean, PoolMode::Sum] {
                let rows = |p: &[f64]| [p[0..2].to_vec(), p[2..4].to_vec(), p[4..6].to_vec()];
                let e = grad_check(
                    |p| {
                        let r = rows(p);
                        let refs: Vec<&[f64]> = r.iter().map(Vec::as_slice).collect();
                        Ok(dot(&pool(&refs, mode)?.value, &up[..2]))
                    },
                    |p| {
                        let r = rows(p);
                        let refs: Vec<&[f64]> = r.iter().map(Vec::as_slice).collect();
                        Ok(pool_backward(&pool(&refs, mode)?, &up[..2]).concat())
                    },
                    &x,
                    &o,
                )
                .unwrap();
                assert!(e < 1e-4, "pool {mode} {e}");
            }
        }
    }
}
