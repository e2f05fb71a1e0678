//! Distillation objectives with analytic gradients.
//!
//! All losses act on one image: `M` pixels with `A`-dimensional student
//! features, a linear head with `C` classes, and the teacher's logits for the
//! same pixels. Teacher logits are constants; no gradient flows to them.
//!
//! * PD: per-pixel class softmax, cross-entropy against the teacher,
//!   averaged over pixels.
//! * CWD: per-channel softmax over spatial positions at temperature `τ`,
//!   cross-entropy against the teacher's spatial map, scaled by `τ²/C`.
//! * AUG_PD / AUG_CWD: closed-form upper bounds of the expected PD / CWD
//!   loss when each student feature `s_i` is replaced by
//!   `ŝ_i ~ N(s_i, λ Σ_{κ(i)})`. Jensen moves the expectation inside the
//!   log, and the Gaussian moment-generating function turns
//!   `E[exp(aᵀŝ)]` into `exp(aᵀs + aᵀΣa/2)`.
//!
//! `κ(i)` is the ground-truth class of pixel `i`, or the teacher's argmax
//! class when the pixel is unlabeled or ignored.

use crate::error::{Error, Result};
use crate::numerics::{dot, log_sum_exp_unchecked, softmax_unchecked, Mat};
use crate::stats::{ClassCovarianceStore, IGNORE_LABEL};

/// Student features of one image plus optional per-pixel class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    pub features: Mat,
    /// Class id per pixel, or [`IGNORE_LABEL`].
    pub pixel_class: Option<Vec<usize>>,
}

impl FeatureBatch {
    pub fn new(features: Mat) -> Self {
        FeatureBatch {
            features,
            pixel_class: None,
        }
    }

    pub fn with_classes(features: Mat, classes: Vec<usize>) -> Self {
        FeatureBatch {
            features,
            pixel_class: Some(classes),
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Linear classifier `z = W s + b`, `W` is `C × A`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weights: Mat,
    pub bias: Vec<f64>,
}

impl ClassifierHead {
    pub fn new(weights: Mat, bias: Vec<f64>) -> Result<Self> {
        if weights.rows() != bias.len() {
            return Err(Error::shape(format!(
                "{} weight rows with {} biases",
                weights.rows(),
                bias.len()
            )));
        }
        if weights.rows() == 0 || weights.cols() == 0 {
            return Err(Error::shape("empty classifier head"));
        }
        Ok(ClassifierHead { weights, bias })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    /// `features · Wᵀ + b`, one row per pixel.
    pub fn logits(&self, features: &Mat) -> Result<Mat> {
        let mut z = features.matmul_t(&self.weights)?;
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Pd,
    Cwd,
    AugPd,
    AugCwd,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [
        LossVariant::Pd,
        LossVariant::Cwd,
        LossVariant::AugPd,
        LossVariant::AugCwd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Pd => "pd",
            LossVariant::Cwd => "cwd",
            LossVariant::AugPd => "aug_pd",
            LossVariant::AugCwd => "aug_cwd",
        }
    }

    /// The un-augmented loss this variant bounds (itself for base losses).
    pub fn base(self) -> LossVariant {
        match self {
            LossVariant::Pd | LossVariant::AugPd => LossVariant::Pd,
            LossVariant::Cwd | LossVariant::AugCwd => LossVariant::Cwd,
        }
    }

    pub fn is_augmented(self) -> bool {
        matches!(self, LossVariant::AugPd | LossVariant::AugCwd)
    }

    pub fn is_channel_wise(self) -> bool {
        self.base() == LossVariant::Cwd
    }
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown loss variant `{s}`")))
    }
}

/// How the `k = i` term of the augmented channel-wise bound is treated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagonalMode {
    /// Every term gets the variance correction, including `k = i`.
    #[default]
    PaperForm,
    /// `ŝ_i − ŝ_i = 0`, so the `k = i` term is exactly `exp(0) = 1`.
    ExactDiagonal,
}

/// Denominator of the variance correction in the channel-wise bound.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceDenominator {
    /// `wᵀ(λΣ_i + λΣ_k)w / (2τ²)`, the moment-generating-function value.
    #[default]
    TauSquared,
    /// `wᵀ(λΣ_i + λΣ_k)w / (2τ)`. Still a bound for `τ ≥ 1`, not below.
    Tau,
}

/// Options of the augmented channel-wise bound.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CwdBoundForm {
    pub diagonal: DiagonalMode,
    pub denominator: VarianceDenominator,
}

impl CwdBoundForm {
    fn alpha(&self, lambda: f64, tau: f64) -> f64 {
        match self.denominator {
            VarianceDenominator::TauSquared => lambda / (2.0 * tau * tau),
            VarianceDenominator::Tau => lambda / (2.0 * tau),
        }
    }
}

/// Selects one distillation objective and its hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillLossSpec {
    pub variant: LossVariant,
    pub tau: f64,
    pub lambda: f64,
    pub diagonal_mode: DiagonalMode,
    pub variance_denominator: VarianceDenominator,
}

impl DistillLossSpec {
    pub fn new(variant: LossVariant, tau: f64, lambda: f64) -> Self {
        DistillLossSpec {
            variant,
            tau,
            lambda,
            diagonal_mode: DiagonalMode::default(),
            variance_denominator: VarianceDenominator::default(),
        }
    }

    pub fn cwd_form(&self) -> CwdBoundForm {
        CwdBoundForm {
            diagonal: self.diagonal_mode,
            denominator: self.variance_denominator,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidTemperature(self.tau));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lambda must be finite and nonnegative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Loss value with gradients w.r.t. student features and head parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_features: Mat,
    pub grad_weights: Mat,
    pub grad_bias: Vec<f64>,
}

impl LossOutput {
    pub fn zeros(m: usize, a: usize, c: usize) -> Self {
        LossOutput {
            value: 0.0,
            grad_features: Mat::zeros(m, a),
            grad_weights: Mat::zeros(c, a),
            grad_bias: vec![0.0; c],
        }
    }

    /// `self += s · other`.
    pub fn accumulate(&mut self, other: &LossOutput, s: f64) {
        self.value += s * other.value;
        self.grad_features.add_assign_scaled(&other.grad_features, s);
        self.grad_weights.add_assign_scaled(&other.grad_weights, s);
        for (a, b) in self.grad_bias.iter_mut().zip(&other.grad_bias) {
            *a += s * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad_features.is_finite()
            && self.grad_weights.is_finite()
            && self.grad_bias.iter().all(|x| x.is_finite())
    }
}

fn check_shapes(student: &FeatureBatch, teacher_logits: Option<&Mat>, head: &ClassifierHead) -> Result<()> {
    let (m, a) = student.features.shape();
    if m == 0 || a == 0 {
        return Err(Error::shape(format!("empty feature batch {m}x{a}")));
    }
    if head.dim() != a || head.bias.len() != head.num_classes() {
        return Err(Error::shape(format!(
            "features of width {a} with a {}x{} head and {} biases",
            head.num_classes(),
            head.dim(),
            head.bias.len()
        )));
    }
    if let Some(t) = teacher_logits {
        if t.shape() != (m, head.num_classes()) {
            return Err(Error::shape(format!(
                "teacher logits {}x{} for {m} pixels and {} classes",
                t.rows(),
                t.cols(),
                head.num_classes()
            )));
        }
    }
    if let Some(classes) = &student.pixel_class {
        if classes.len() != m {
            return Err(Error::shape(format!(
                "{} pixel classes for {m} pixels",
                classes.len()
            )));
        }
        let c = head.num_classes();
        if let Some(&bad) = classes.iter().find(|&&l| l != IGNORE_LABEL && l >= c) {
            return Err(Error::UnknownClass {
                class: bad,
                num_classes: c,
            });
        }
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidTemperature(tau))
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "lambda must be finite and nonnegative, got {lambda}"
        )))
    }
}

/// Turns a gradient w.r.t. logits into gradients w.r.t. features and head.
fn backprop_logits(value: f64, dlogits: &Mat, features: &Mat, head: &ClassifierHead) -> LossOutput {
    let grad_features = dlogits.matmul(&head.weights).expect("shapes checked");
    let grad_weights = dlogits.t_matmul(features).expect("shapes checked");
    let grad_bias = (0..dlogits.cols())
        .map(|c| (0..dlogits.rows()).map(|r| dlogits[(r, c)]).sum())
        .collect();
    LossOutput {
        value,
        grad_features,
        grad_weights,
        grad_bias,
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Class whose covariance augments each pixel: its label when present,
/// otherwise the teacher's argmax.
pub fn covariance_assignment(student: &FeatureBatch, teacher_logits: &Mat) -> Vec<usize> {
    (0..student.num_pixels())
        .map(|i| match &student.pixel_class {
            Some(classes) if classes[i] != IGNORE_LABEL => classes[i],
            _ => argmax(teacher_logits.row(i)),
        })
        .collect()
}

/// Per-class `W Σ_κ` (row `c` is `Σ_κ w_c`), computed for classes in `used`.
fn weighted_covariances(
    head: &ClassifierHead,
    covs: &ClassCovarianceStore,
    used: &[bool],
) -> Result<Vec<Option<Mat>>> {
    if covs.dim() != head.dim() {
        return Err(Error::shape(format!(
            "covariance dimension {} for features of width {}",
            covs.dim(),
            head.dim()
        )));
    }
    used.iter()
        .enumerate()
        .map(|(k, &u)| {
            if !u {
                return Ok(None);
            }
            let cov = covs.get_cov(k).map_err(|_| Error::MissingClassStats {
                class: k,
                available: covs.num_classes(),
            })?;
            Ok(Some(head.weights.matmul(cov)?))
        })
        .collect()
}

fn assignment_mask(assign: &[usize], covs: &ClassCovarianceStore) -> Result<Vec<bool>> {
    let available = covs.num_classes();
    let size = assign.iter().copied().max().map_or(0, |m| m + 1).max(available);
    let mut used = vec![false; size];
    for &k in assign {
        if k >= available {
            return Err(Error::MissingClassStats {
                class: k,
                available,
            });
        }
        used[k] = true;
    }
    Ok(used)
}

/// Pixel-wise distillation: mean over pixels of the cross-entropy between
/// the teacher's and the student's per-pixel class distributions.
pub fn pd_loss(student: &FeatureBatch, teacher_logits: &Mat, head: &ClassifierHead) -> Result<LossOutput> {
    check_shapes(student, Some(teacher_logits), head)?;
    let m = student.num_pixels();
    let z = head.logits(&student.features)?;
    let mut dz = Mat::zeros(m, head.num_classes());
    let mut value = 0.0;
    let inv_m = 1.0 / m as f64;
    // Same operation order as `aug_pd_loss`, so λ = 0 reproduces this loss
    // bit for bit (and with it whole training trajectories).
    for i in 0..m {
        let pt = softmax_unchecked(teacher_logits.row(i), 1.0);
        let zi = z.row(i);
        let lse = log_sum_exp_unchecked(zi);
        let ps = softmax_unchecked(zi, 1.0);
        for c in 0..zi.len() {
            value += pt[c] * (lse - zi[c]);
            for k in 0..zi.len() {
                dz[(i, k)] += pt[c] * ps[k] * inv_m;
            }
            dz[(i, c)] -= pt[c] * inv_m;
        }
    }
    Ok(backprop_logits(value * inv_m, &dz, &student.features, head))
}

/// Channel-wise distillation at temperature `tau`.
pub fn cwd_loss(
    student: &FeatureBatch,
    teacher_logits: &Mat,
    head: &ClassifierHead,
    tau: f64,
) -> Result<LossOutput> {
    check_tau(tau)?;
    check_shapes(student, Some(teacher_logits), head)?;
    let (m, c_count) = (student.num_pixels(), head.num_classes());
    let z = head.logits(&student.features)?;
    let scale = tau * tau / c_count as f64;
    let mut dz = Mat::zeros(m, c_count);
    let mut value = 0.0;
    for c in 0..c_count {
        let q = softmax_unchecked(&teacher_logits.column(c), tau);
        let u: Vec<f64> = z.column(c).iter().map(|x| x / tau).collect();
        let lse = log_sum_exp_unchecked(&u);
        let p = softmax_unchecked(&u, 1.0);
        let q_sum: f64 = q.iter().sum();
        for i in 0..m {
            value += q[i] * (lse - u[i]);
            // d/du_i, then d u_i / d z_i = 1/τ
            dz[(i, c)] = scale * (q_sum * p[i] - q[i]) / tau;
        }
    }
    Ok(backprop_logits(scale * value, &dz, &student.features, head))
}

/// Upper bound of the expected PD loss under Gaussian feature augmentation.
pub fn aug_pd_loss(
    student: &FeatureBatch,
    teacher_logits: &Mat,
    head: &ClassifierHead,
    covs: &ClassCovarianceStore,
    lambda: f64,
) -> Result<LossOutput> {
    check_lambda(lambda)?;
    check_shapes(student, Some(teacher_logits), head)?;
    let (m, c_count) = (student.num_pixels(), head.num_classes());
    let assign = covariance_assignment(student, teacher_logits);
    let used = assignment_mask(&assign, covs)?;
    let projected = weighted_covariances(head, covs, &used)?;

    // Q^κ_{ck} = (w_k − w_c)ᵀ Σ_κ (w_k − w_c)
    let w = &head.weights;
    let quad: Vec<Option<Mat>> = projected
        .iter()
        .map(|p| {
            p.as_ref().map(|p| {
                Mat::from_fn(c_count, c_count, |c, k| {
                    let mut acc = 0.0;
                    for a in 0..w.cols() {
                        acc += (w[(k, a)] - w[(c, a)]) * (p[(k, a)] - p[(c, a)]);
                    }
                    acc
                })
            })
        })
        .collect();

    let z = head.logits(&student.features)?;
    let mut dz = Mat::zeros(m, c_count);
    // accumulated q_c π_ck / M per covariance class
    let mut coef: Vec<Option<Mat>> = quad
        .iter()
        .map(|q| q.as_ref().map(|_| Mat::zeros(c_count, c_count)))
        .collect();
    let mut value = 0.0;
    let mut exps = vec![0.0; c_count];
    let inv_m = 1.0 / m as f64;
    for i in 0..m {
        let kappa = assign[i];
        let q_kappa = quad[kappa].as_ref().expect("assigned class present");
        let g = coef[kappa].as_mut().expect("assigned class present");
        let pt = softmax_unchecked(teacher_logits.row(i), 1.0);
        let zi = z.row(i);
        for c in 0..c_count {
            // log Σ_k exp(z_k − z_c + λQ_ck/2) = LSE_k(z_k + λQ_ck/2) − z_c
            for k in 0..c_count {
                exps[k] = zi[k] + 0.5 * lambda * q_kappa[(c, k)];
            }
            value += pt[c] * (log_sum_exp_unchecked(&exps) - zi[c]);
            let pi = softmax_unchecked(&exps, 1.0);
            for k in 0..c_count {
                let w_ck = pt[c] * pi[k] * inv_m;
                dz[(i, k)] += w_ck;
                g[(c, k)] += w_ck;
            }
            dz[(i, c)] -= pt[c] * inv_m;
        }
    }

    let mut out = backprop_logits(value * inv_m, &dz, &student.features, head);
    if lambda != 0.0 {
        for (g, p) in coef.iter().zip(&projected) {
            let (Some(g), Some(p)) = (g, p) else { continue };
            // grad w_j += λ Σ_c (G_cj + G_jc)(P_j − P_c)
            for j in 0..c_count {
                for c in 0..c_count {
                    let h = g[(c, j)] + g[(j, c)];
                    if h == 0.0 {
                        continue;
                    }
                    for a in 0..w.cols() {
                        out.grad_weights[(j, a)] += lambda * h * (p[(j, a)] - p[(c, a)]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Upper bound of the expected CWD loss under Gaussian feature augmentation.
pub fn aug_cwd_loss(
    student: &FeatureBatch,
    teacher_logits: &Mat,
    head: &ClassifierHead,
    covs: &ClassCovarianceStore,
    lambda: f64,
    tau: f64,
    form: CwdBoundForm,
) -> Result<LossOutput> {
    check_tau(tau)?;
    check_lambda(lambda)?;
    check_shapes(student, Some(teacher_logits), head)?;
    let (m, c_count) = (student.num_pixels(), head.num_classes());
    let assign = covariance_assignment(student, teacher_logits);
    let used = assignment_mask(&assign, covs)?;
    let projected = weighted_covariances(head, covs, &used)?;
    let alpha = form.alpha(lambda, tau);
    let scale = tau * tau / c_count as f64;
    let w = &head.weights;

    let z = head.logits(&student.features)?;
    let mut dz = Mat::zeros(m, c_count);
    let mut value = 0.0;
    // Σ_j dv_j grouped by covariance class, per channel
    let mut dv_by_class = vec![vec![0.0; projected.len()]; c_count];

    for c in 0..c_count {
        let q = softmax_unchecked(&teacher_logits.column(c), tau);
        let q_sum: f64 = q.iter().sum();
        let u: Vec<f64> = z.column(c).iter().map(|x| x / tau).collect();
        // v_i = w_cᵀ Σ_κ(i) w_c
        let v: Vec<f64> = assign
            .iter()
            .map(|&k| {
                let p = projected[k].as_ref().expect("assigned class present");
                dot(w.row(c), p.row(c))
            })
            .collect();
        let mut du = vec![0.0; m];
        let mut dv = vec![0.0; m];
        match form.diagonal {
            DiagonalMode::PaperForm => {
                // log Σ_k exp(u_k − u_i + α(v_i + v_k)) = −u_i + α v_i + LSE_k(u_k + α v_k)
                let r: Vec<f64> = u.iter().zip(&v).map(|(u, v)| u + alpha * v).collect();
                let lse = log_sum_exp_unchecked(&r);
                let pi = softmax_unchecked(&r, 1.0);
                for i in 0..m {
                    value += q[i] * (lse - u[i] + alpha * v[i]);
                    du[i] = q_sum * pi[i] - q[i];
                    dv[i] = alpha * (q[i] + q_sum * pi[i]);
                }
            }
            // a single position: the spatial softmax is log 1 = 0 for every draw
            DiagonalMode::ExactDiagonal if m == 1 => {}
            DiagonalMode::ExactDiagonal => {
                // row i: −u_i + α v_i + LSE_k(r_k), with r_k = u_k + α v_k for
                // k ≠ i and r_i = u_i − α v_i so the k = i term is exp(0)
                let mut e: Vec<f64> = u.iter().zip(&v).map(|(u, v)| u + alpha * v).collect();
                for i in 0..m {
                    let kept = e[i];
                    e[i] = u[i] - alpha * v[i];
                    value += q[i] * (log_sum_exp_unchecked(&e) - u[i] + alpha * v[i]);
                    let pi = softmax_unchecked(&e, 1.0);
                    e[i] = kept;
                    for k in 0..m {
                        du[k] += q[i] * pi[k];
                        if k != i {
                            dv[k] += alpha * q[i] * pi[k];
                        }
                    }
                    du[i] -= q[i];
                    dv[i] += alpha * q[i] * (1.0 - pi[i]);
                }
            }
        }
        for i in 0..m {
            dz[(i, c)] = scale * du[i] / tau;
            dv_by_class[c][assign[i]] += scale * dv[i];
        }
    }

    let mut out = backprop_logits(scale * value, &dz, &student.features, head);
    if alpha != 0.0 {
        // ∂v/∂w_c = 2 Σ_κ w_c
        for (c, per_class) in dv_by_class.iter().enumerate() {
            for (k, &d) in per_class.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let p = projected[k].as_ref().expect("assigned class present");
                for a in 0..w.cols() {
                    out.grad_weights[(c, a)] += 2.0 * d * p[(c, a)];
                }
            }
        }
    }
    Ok(out)
}

/// Mean per-pixel cross-entropy against hard labels, skipping ignored pixels.
pub fn segmentation_ce_loss(student: &FeatureBatch, head: &ClassifierHead, labels: &[usize]) -> Result<LossOutput> {
    check_shapes(student, None, head)?;
    let (m, c_count) = (student.num_pixels(), head.num_classes());
    if labels.len() != m {
        return Err(Error::shape(format!("{} labels for {m} pixels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE_LABEL && l >= c_count) {
        return Err(Error::UnknownClass {
            class: bad,
            num_classes: c_count,
        });
    }
    let valid = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    if valid == 0 {
        return Err(Error::EmptySupervision);
    }
    let z = head.logits(&student.features)?;
    let mut dz = Mat::zeros(m, c_count);
    let mut value = 0.0;
    let inv = 1.0 / valid as f64;
    for (i, &y) in labels.iter().enumerate() {
        if y == IGNORE_LABEL {
            continue;
        }
        let zi = z.row(i);
        value += log_sum_exp_unchecked(zi) - zi[y];
        let p = softmax_unchecked(zi, 1.0);
        for c in 0..c_count {
            dz[(i, c)] = (p[c] - if c == y { 1.0 } else { 0.0 }) * inv;
        }
    }
    Ok(backprop_logits(value * inv, &dz, &student.features, head))
}

/// Evaluates the objective selected by `spec`.
pub fn distill_loss(
    spec: &DistillLossSpec,
    student: &FeatureBatch,
    teacher_logits: &Mat,
    head: &ClassifierHead,
    covs: &ClassCovarianceStore,
) -> Result<LossOutput> {
    match spec.variant {
        LossVariant::Pd => pd_loss(student, teacher_logits, head),
        LossVariant::Cwd => cwd_loss(student, teacher_logits, head, spec.tau),
        LossVariant::AugPd => aug_pd_loss(student, teacher_logits, head, covs, spec.lambda),
        LossVariant::AugCwd => aug_cwd_loss(
            student,
            teacher_logits,
            head,
            covs,
            spec.lambda,
            spec.tau,
            spec.cwd_form(),
        ),
    }
}
