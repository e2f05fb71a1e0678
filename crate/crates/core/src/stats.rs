//! Streaming per-class feature statistics and the λ ramp.
//!
//! Each class keeps the exact population mean and covariance (divisor `n`)
//! of every non-ignored feature row seen so far. Batches are merged with
//! the pairwise update
//!
//! ```text
//! μ' = (n μ + m μ_b) / (n + m)
//! Σ' = [n Σ + m Σ_b + n m / (n + m) · (μ − μ_b)(μ − μ_b)ᵀ] / (n + m)
//! ```
//!
//! so any partition of the same samples yields the same statistics up to
//! rounding.
//!
//! # Snapshot format
//!
//! Plain text, whitespace separated, one record per line:
//!
//! ```text
//! fakd-class-stats v1
//! <C> <A> <full|diagonal>
//! <n_0>
//! <μ_0[0]> ... <μ_0[A-1]>
//! <Σ_0 row-major, A·A values on one line>
//! <n_1>
//! ...
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! save/load cycle is bit-exact.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::Mat;

/// Marks a pixel without supervision.
pub const IGNORE_LABEL: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    Full,
    /// Off-diagonal entries are kept at zero.
    Diagonal,
}

#[derive(Debug, Clone, PartialEq)]
struct ClassStats {
    count: u64,
    mean: Vec<f64>,
    cov: Mat,
}

impl ClassStats {
    fn empty(dim: usize) -> Self {
        ClassStats {
            count: 0,
            mean: vec![0.0; dim],
            cov: Mat::zeros(dim, dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassCovarianceStore {
    dim: usize,
    mode: CovarianceMode,
    classes: Vec<ClassStats>,
}

impl ClassCovarianceStore {
    pub fn new(num_classes: usize, dim: usize) -> Self {
        Self::with_mode(num_classes, dim, CovarianceMode::Full)
    }

    pub fn with_mode(num_classes: usize, dim: usize, mode: CovarianceMode) -> Self {
        ClassCovarianceStore {
            dim,
            mode,
            classes: (0..num_classes).map(|_| ClassStats::empty(dim)).collect(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> CovarianceMode {
        self.mode
    }

    /// Merges the non-ignored rows of `features` into their classes.
    pub fn update(&mut self, features: &Mat, labels: &[usize]) -> Result<()> {
        if features.cols() != self.dim {
            return Err(Error::shape(format!(
                "feature width {} for a store of dimension {}",
                features.cols(),
                self.dim
            )));
        }
        if labels.len() != features.rows() {
            return Err(Error::shape(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.rows()
            )));
        }
        let c = self.classes.len();
        if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE_LABEL && l >= c) {
            return Err(Error::UnknownClass {
                class: bad,
                num_classes: c,
            });
        }

        for class in 0..c {
            let rows: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == class)
                .map(|(i, _)| i)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let (batch_mean, batch_cov) = self.batch_moments(features, &rows);
            self.merge(class, rows.len() as u64, &batch_mean, &batch_cov);
        }
        Ok(())
    }

    fn batch_moments(&self, features: &Mat, rows: &[usize]) -> (Vec<f64>, Mat) {
        let a = self.dim;
        let m = rows.len() as f64;
        let mut mean = vec![0.0; a];
        for &r in rows {
            for (mu, x) in mean.iter_mut().zip(features.row(r)) {
                *mu += x;
            }
        }
        for mu in &mut mean {
            *mu /= m;
        }
        let mut cov = Mat::zeros(a, a);
        let mut centered = vec![0.0; a];
        for &r in rows {
            for ((d, x), mu) in centered.iter_mut().zip(features.row(r)).zip(&mean) {
                *d = x - mu;
            }
            for p in 0..a {
                match self.mode {
                    CovarianceMode::Full => {
                        for q in 0..a {
                            cov[(p, q)] += centered[p] * centered[q];
                        }
                    }
                    CovarianceMode::Diagonal => cov[(p, p)] += centered[p] * centered[p],
                }
            }
        }
        (mean, cov.scaled(1.0 / m))
    }

    fn merge(&mut self, class: usize, m: u64, batch_mean: &[f64], batch_cov: &Mat) {
        let diagonal = self.mode == CovarianceMode::Diagonal;
        let stats = &mut self.classes[class];
        let n = stats.count;
        let total = (n + m) as f64;
        let (nf, mf) = (n as f64, m as f64);
        let delta: Vec<f64> = stats.mean.iter().zip(batch_mean).map(|(a, b)| a - b).collect();
        let cross = nf * mf / total;
        let a = delta.len();
        let mut cov = Mat::zeros(a, a);
        for p in 0..a {
            for q in 0..a {
                if diagonal && p != q {
                    continue;
                }
                cov[(p, q)] = (nf * stats.cov[(p, q)]
                    + mf * batch_cov[(p, q)]
                    + cross * delta[p] * delta[q])
                    / total;
            }
        }
        // exact symmetry regardless of summation order
        stats.cov = cov.symmetrized();
        for (mu, b) in stats.mean.iter_mut().zip(batch_mean) {
            *mu = (nf * *mu + mf * b) / total;
        }
        stats.count = n + m;
    }

    /// Covariance of `class`; the zero matrix while the class is unseen.
    pub fn get_cov(&self, class: usize) -> Result<&Mat> {
        self.classes
            .get(class)
            .map(|s| &s.cov)
            .ok_or(Error::UnknownClass {
                class,
                num_classes: self.classes.len(),
            })
    }

    pub fn get_mean(&self, class: usize) -> Result<&[f64]> {
        self.classes
            .get(class)
            .map(|s| s.mean.as_slice())
            .ok_or(Error::UnknownClass {
                class,
                num_classes: self.classes.len(),
            })
    }

    pub fn count(&self, class: usize) -> Result<u64> {
        self.classes
            .get(class)
            .map(|s| s.count)
            .ok_or(Error::UnknownClass {
                class,
                num_classes: self.classes.len(),
            })
    }

    /// Largest entry-wise difference in means and covariances, or `None` when
    /// the shapes or counts differ.
    pub fn max_abs_diff(&self, other: &ClassCovarianceStore) -> Option<f64> {
        if self.dim != other.dim || self.classes.len() != other.classes.len() {
            return None;
        }
        let mut worst: f64 = 0.0;
        for (a, b) in self.classes.iter().zip(&other.classes) {
            if a.count != b.count {
                return None;
            }
            worst = worst.max(a.cov.max_abs_diff(&b.cov));
            for (x, y) in a.mean.iter().zip(&b.mean) {
                worst = worst.max((x - y).abs());
            }
        }
        Some(worst)
    }

    pub fn to_snapshot(&self) -> String {
        let mut out = String::from("fakd-class-stats v1\n");
        let mode = match self.mode {
            CovarianceMode::Full => "full",
            CovarianceMode::Diagonal => "diagonal",
        };
        let _ = writeln!(out, "{} {} {}", self.classes.len(), self.dim, mode);
        for s in &self.classes {
            let _ = writeln!(out, "{}", s.count);
            out.push_str(&join_floats(&s.mean));
            out.push('\n');
            out.push_str(&join_floats(s.cov.as_slice()));
            out.push('\n');
        }
        out
    }

    pub fn from_snapshot(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Parse(format!("snapshot truncated before {what}")))
        };
        if next("header")?.trim() != "fakd-class-stats v1" {
            return Err(Error::Parse("unrecognized snapshot header".into()));
        }
        let dims: Vec<&str> = next("dimensions")?.split_whitespace().collect();
        if dims.len() != 3 {
            return Err(Error::Parse("expected `<C> <A> <mode>`".into()));
        }
        let c: usize = parse_num(dims[0])?;
        let a: usize = parse_num(dims[1])?;
        let mode = match dims[2] {
            "full" => CovarianceMode::Full,
            "diagonal" => CovarianceMode::Diagonal,
            other => return Err(Error::Parse(format!("unknown covariance mode `{other}`"))),
        };
        let mut classes = Vec::with_capacity(c);
        for class in 0..c {
            let count: u64 = parse_num(next("count")?.trim())?;
            let mean = parse_floats(next("mean")?, a)?;
            let cov = Mat::from_vec(a, a, parse_floats(next("covariance")?, a * a)?)?;
            if count == 0 && (mean.iter().any(|&x| x != 0.0) || cov.as_slice().iter().any(|&x| x != 0.0)) {
                return Err(Error::Parse(format!(
                    "class {class} has zero count but nonzero statistics"
                )));
            }
            classes.push(ClassStats { count, mean, cov });
        }
        Ok(ClassCovarianceStore {
            dim: a,
            mode,
            classes,
        })
    }
}

fn join_floats(v: &[f64]) -> String {
    let mut s = String::new();
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{x:?}");
    }
    s
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Parse(format!("invalid number `{s}`")))
}

fn parse_floats(line: &str, expected: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = line
        .split_whitespace()
        .map(parse_num)
        .collect::<Result<_>>()?;
    if v.len() != expected {
        return Err(Error::Parse(format!(
            "expected {expected} values, found {}",
            v.len()
        )));
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RampShape {
    /// `λ₀ (1 − cos(π t / T)) / 2`
    Cosine,
    /// `λ₀ t / T`
    Linear,
}

/// Ramp of the augmentation strength from 0 to `lambda0` over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaSchedule {
    pub lambda0: f64,
    pub total_steps: usize,
    pub shape: RampShape,
}

impl LambdaSchedule {
    pub fn cosine(lambda0: f64, total_steps: usize) -> Self {
        LambdaSchedule {
            lambda0,
            total_steps,
            shape: RampShape::Cosine,
        }
    }

    pub fn at(&self, step: usize) -> Result<f64> {
        lambda_schedule(step, self)
    }
}

pub fn lambda_schedule(step: usize, sched: &LambdaSchedule) -> Result<f64> {
    let total = sched.total_steps;
    if total == 0 || step > total {
        return Err(Error::InvalidStep { step, total });
    }
    if step == total {
        return Ok(sched.lambda0);
    }
    let frac = step as f64 / total as f64;
    let ramp = match sched.shape {
        RampShape::Cosine => 0.5 * (1.0 - (std::f64::consts::PI * frac).cos()),
        RampShape::Linear => frac,
    };
    Ok(sched.lambda0 * ramp.clamp(0.0, 1.0))
}
