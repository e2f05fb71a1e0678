//! Dense kernels shared by every other module: a row-major `f64` matrix,
//! stable log-sum-exp / softmax, a jittered PSD square root and seeded
//! multivariate Gaussian sampling.

use std::ops::{Index, IndexMut};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    /// Builds a matrix from equally long rows. An empty slice gives a 0x0 matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Mat {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Mat::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
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
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    /// Copies rows `start..end` into a new matrix.
    pub fn row_block(&self, start: usize, end: usize) -> Mat {
        Mat {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Mat]) -> Result<Mat> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::shape(format!(
                    "vstack of {} and {} columns",
                    cols, p.cols
                )));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.cols {
            return Err(Error::shape(format!(
                "matmul_t {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Mat::from_fn(self.rows, other.rows, |r, c| {
            dot(self.row(r), other.row(c))
        }))
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Mat) -> Result<Mat> {
        if self.rows != other.rows {
            return Err(Error::shape(format!(
                "t_matmul ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            for (i, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(other.row(r)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn mat_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(Error::shape(format!(
                "mat_vec {}x{} by vector of {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    /// `vᵀ · self · v` for a square matrix.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        debug_assert_eq!(self.rows, self.cols);
        debug_assert_eq!(self.cols, v.len());
        (0..self.rows).map(|r| v[r] * dot(self.row(r), v)).sum()
    }

    pub fn scaled(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn add_assign_scaled(&mut self, other: &Mat, s: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// Max absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|r| self.row(r).iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `(self + selfᵀ) / 2`.
    pub fn symmetrized(&self) -> Mat {
        Mat::from_fn(self.rows, self.cols, |r, c| {
            0.5 * (self[(r, c)] + self[(c, r)])
        })
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Smallest eigenvalue of a symmetric matrix (cyclic Jacobi sweeps).
    pub fn min_eigenvalue(&self) -> f64 {
        symmetric_eigenvalues(self)
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotation.
pub fn symmetric_eigenvalues(m: &Mat) -> Vec<f64> {
    let n = m.rows();
    let mut a = m.symmetrized();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| (0..n).filter(move |&q| q != p).map(move |q| (p, q)))
            .map(|(p, q)| a[(p, q)] * a[(p, q)])
            .sum();
        let scale: f64 = a.as_slice().iter().map(|x| x * x).sum();
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[(i, i)]).collect()
}

/// `log Σ exp(v_k)` with a max shift.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::EmptyVector);
    }
    Ok(log_sum_exp_unchecked(v))
}

#[inline]
pub(crate) fn log_sum_exp_unchecked(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax of `v / tau`.
pub fn softmax(v: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidTemperature(tau));
    }
    if v.is_empty() {
        return Err(Error::EmptyVector);
    }
    Ok(softmax_unchecked(v, tau))
}

#[inline]
pub(crate) fn softmax_unchecked(v: &[f64], tau: f64) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| ((x - max) / tau).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}

/// `log softmax(v / tau)`.
pub fn log_softmax(v: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidTemperature(tau));
    }
    if v.is_empty() {
        return Err(Error::EmptyVector);
    }
    let scaled: Vec<f64> = v.iter().map(|x| x / tau).collect();
    let lse = log_sum_exp_unchecked(&scaled);
    Ok(scaled.into_iter().map(|x| x - lse).collect())
}

/// Version tag of the random stream. Bump whenever the generator or the
/// normal sampler changes, since seeded outputs change with it.
pub const RNG_VERSION: &str = "chacha8-ziggurat-v1";

/// Seeded random source: ChaCha8 with 64-bit seeds and independent streams.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent generator for sub-task `stream` of the same seed.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.uniform() * n as f64) as usize % n
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn normal_mat(&mut self, rows: usize, cols: usize, std: f64) -> Mat {
        Mat::from_fn(rows, cols, |_, _| std * self.normal())
    }

    /// Draws an index according to nonnegative `weights`.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        weights.len() - 1
    }
}

const JITTER_LEVELS: [f64; 4] = [0.0, 1e-12, 1e-10, 1e-8];

/// Lower-triangular factor `L` with `L·Lᵀ ≈ cov + jitter·I`.
#[derive(Debug, Clone)]
pub struct PsdFactor {
    pub lower: Mat,
    /// Absolute jitter added to the diagonal.
    pub jitter: f64,
}

/// Square root of a symmetric PSD matrix.
///
/// The input is symmetrized first. Jitter escalates through
/// 0, 1e-12, 1e-10, 1e-8 times the mean diagonal; each attempt must satisfy
/// `‖L·Lᵀ − (cov + jitter·I)‖_∞ ≤ 1e-9·(1 + ‖cov‖_∞)`.
pub fn psd_sqrt(cov: &Mat) -> Result<PsdFactor> {
    if !cov.is_square() {
        return Err(Error::shape(format!(
            "covariance is {}x{}",
            cov.rows(),
            cov.cols()
        )));
    }
    let n = cov.rows();
    let sym = cov.symmetrized();
    let mean_diag = if n == 0 { 0.0 } else { sym.trace() / n as f64 };
    let tol = 1e-9 * (1.0 + sym.norm_inf());
    for level in JITTER_LEVELS {
        let jitter = level * mean_diag.abs();
        let mut target = sym.clone();
        for i in 0..n {
            target[(i, i)] += jitter;
        }
        if let Some(lower) = semidefinite_cholesky(&target) {
            let recon = lower.matmul_t(&lower)?;
            if recon.max_abs_diff(&target) * n.max(1) as f64 <= tol {
                return Ok(PsdFactor { lower, jitter });
            }
        }
    }
    Err(Error::NotPsd)
}

/// Cholesky that tolerates zero pivots whose trailing column is also zero.
fn semidefinite_cholesky(a: &Mat) -> Option<Mat> {
    let n = a.rows();
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
    let eps = 1e-13 * scale.max(f64::MIN_POSITIVE);
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let d = a[(j, j)] - dot(&l.row(j)[..j], &l.row(j)[..j]);
        if d < -eps {
            return None;
        }
        if d <= eps {
            for i in j + 1..n {
                let r = a[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j]);
                if r.abs() > 1e3 * eps.sqrt() * scale.sqrt().max(1.0) {
                    return None;
                }
            }
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let r = a[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j]);
            l[(i, j)] = r / ljj;
        }
    }
    Some(l)
}

/// Gaussian sampler with a precomputed factor of `scale · cov`.
#[derive(Debug, Clone)]
pub struct MvnSampler {
    mean: Vec<f64>,
    lower: Option<Mat>,
}

impl MvnSampler {
    pub fn new(mean: &[f64], cov: &Mat, scale: f64) -> Result<Self> {
        if !cov.is_square() || cov.rows() != mean.len() {
            return Err(Error::shape(format!(
                "mean of length {} with {}x{} covariance",
                mean.len(),
                cov.rows(),
                cov.cols()
            )));
        }
        if !(scale >= 0.0) {
            return Err(Error::InvalidArgument(format!("negative scale {scale}")));
        }
        let lower = if scale == 0.0 || cov.as_slice().iter().all(|&x| x == 0.0) {
            None
        } else {
            Some(psd_sqrt(&cov.scaled(scale))?.lower)
        };
        Ok(MvnSampler {
            mean: mean.to_vec(),
            lower,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Writes one draw into `out`.
    pub fn sample_into(&self, rng: &mut Rng, out: &mut [f64]) {
        out.copy_from_slice(&self.mean);
        if let Some(l) = &self.lower {
            let z = rng.normal_vec(self.mean.len());
            for (r, o) in out.iter_mut().enumerate() {
                *o += dot(&l.row(r)[..=r], &z[..=r]);
            }
        }
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Mat {
        let mut out = Mat::zeros(n, self.dim());
        for r in 0..n {
            self.sample_into(rng, out.row_mut(r));
        }
        out
    }
}

/// `n` i.i.d. rows from `N(mean, scale·cov)`.
pub fn sample_mvn(mean: &[f64], cov: &Mat, scale: f64, n: usize, rng: &mut Rng) -> Result<Mat> {
    Ok(MvnSampler::new(mean, cov, scale)?.sample(n, rng))
}
