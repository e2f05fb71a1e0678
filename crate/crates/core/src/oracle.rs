//! Brute-force checks for the closed-form losses.
//!
//! Everything here is deliberately naive: Monte Carlo draws of the
//! augmented features evaluated with the *base* losses, and central finite
//! differences. None of it shares code paths with the closed-form bounds
//! beyond the base losses themselves.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{
    aug_cwd_loss, aug_pd_loss, covariance_assignment, cwd_loss, pd_loss, ClassifierHead, CwdBoundForm,
    DiagonalMode, FeatureBatch, LossOutput, LossVariant, VarianceDenominator,
};
use crate::numerics::{dot, Mat, MvnSampler, Rng};
use crate::stats::ClassCovarianceStore;

/// Mean and standard error of a Monte Carlo average.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_samples: usize,
}

impl McEstimate {
    /// Welford accumulation; the standard error uses the unbiased variance.
    pub fn from_samples(samples: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut n = 0usize;
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for x in samples {
            n += 1;
            let delta = x - mean;
            mean += delta / n as f64;
            m2 += delta * (x - mean);
        }
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "Monte Carlo estimate needs at least 2 samples, got {n}"
            )));
        }
        let var = (m2 / (n - 1) as f64).max(0.0);
        Ok(McEstimate {
            mean,
            stderr: (var / n as f64).sqrt(),
            n_samples: n,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MgfCheck {
    pub mc: McEstimate,
    pub closed_form: f64,
}

impl MgfCheck {
    pub fn within(&self, k_stderr: f64) -> bool {
        (self.mc.mean - self.closed_form).abs() <= k_stderr * self.mc.stderr
    }
}

/// Monte Carlo `E[exp(aᵀx)]`, `x ~ N(mu, sigma)`, next to `exp(aᵀμ + aᵀΣa/2)`.
pub fn mgf_expectation(a: &[f64], mu: &[f64], sigma: &Mat, n: usize, rng: &mut Rng) -> Result<MgfCheck> {
    if a.len() != mu.len() {
        return Err(Error::shape(format!(
            "direction of length {} with mean of length {}",
            a.len(),
            mu.len()
        )));
    }
    let sampler = MvnSampler::new(mu, sigma, 1.0)?;
    let mut x = vec![0.0; mu.len()];
    let mc = McEstimate::from_samples((0..n).map(|_| {
        sampler.sample_into(rng, &mut x);
        dot(a, &x).exp()
    }))?;
    let closed_form = (dot(a, mu) + 0.5 * sigma.quad_form(a)).exp();
    Ok(MgfCheck { mc, closed_form })
}

/// One distillation problem: student features, teacher logits, head, stats.
#[derive(Debug, Clone)]
pub struct Instance {
    pub student: FeatureBatch,
    pub teacher_logits: Mat,
    pub head: ClassifierHead,
    pub covs: ClassCovarianceStore,
}

impl Instance {
    /// Random problem with labeled pixels and PSD per-class covariances
    /// estimated from a handful of Gaussian samples per class.
    pub fn random(rng: &mut Rng, m: usize, a: usize, c: usize) -> Instance {
        let features = rng.normal_mat(m, a, 1.0);
        let teacher_logits = rng.normal_mat(m, c, 2.0);
        let head = ClassifierHead::new(rng.normal_mat(c, a, 0.8), rng.normal_vec(c))
            .expect("consistent head shapes");
        let labels: Vec<usize> = (0..m).map(|_| rng.below(c)).collect();
        let per_class = a + 3;
        let mut covs = ClassCovarianceStore::new(c, a);
        let mut sample_labels = Vec::with_capacity(per_class * c);
        let mut rows = Vec::with_capacity(per_class * c);
        for class in 0..c {
            let spread = 0.3 + rng.uniform();
            for _ in 0..per_class {
                rows.push(rng.normal_vec(a).into_iter().map(|x| spread * x).collect());
                sample_labels.push(class);
            }
        }
        covs.update(&Mat::from_rows(&rows).expect("equal rows"), &sample_labels)
            .expect("consistent shapes");
        Instance {
            student: FeatureBatch::with_classes(features, labels),
            teacher_logits,
            head,
            covs,
        }
    }

    /// Stress instance for the channel-wise bound: the first half of the
    /// pixels belongs to class 0 with almost no feature variance, the rest to
    /// the other classes with variance that puts `wᵀΣw` near 1. The teacher
    /// concentrates every spatial map on the low-variance half, so any
    /// under-estimate of the variance correction on the high-variance half is
    /// not hidden by Jensen slack. Needs `c ≥ 2`.
    pub fn variance_contrast(rng: &mut Rng, m: usize, a: usize, c: usize) -> Instance {
        let features = rng.normal_mat(m, a, 0.1);
        let head = ClassifierHead::new(rng.normal_mat(c, a, 0.8), vec![0.0; c]).expect("consistent head shapes");
        let half = m.div_ceil(2);
        let labels: Vec<usize> = (0..m)
            .map(|i| if i < half || c < 2 { 0 } else { 1 + (i - half) % (c - 1) })
            .collect();
        let teacher_logits = Mat::from_fn(m, c, |i, _| if labels[i] == 0 { 4.0 } else { 0.0 });
        let mean_norm = (0..c).map(|k| dot(head.weights.row(k), head.weights.row(k))).sum::<f64>() / c as f64;
        let mut covs = ClassCovarianceStore::new(c, a);
        // ±σ along each axis: population covariance σ²I
        let mut rows = Vec::with_capacity(2 * a * c);
        let mut sample_labels = Vec::with_capacity(2 * a * c);
        for class in 0..c {
            let sigma = if class == 0 { 0.05 } else { (1.0 / mean_norm).sqrt() };
            for axis in 0..a {
                for sign in [-1.0, 1.0] {
                    let mut r = vec![0.0; a];
                    r[axis] = sign * sigma * (a as f64).sqrt();
                    rows.push(r);
                    sample_labels.push(class);
                }
            }
        }
        covs.update(&Mat::from_rows(&rows).expect("equal rows"), &sample_labels)
            .expect("consistent shapes");
        Instance {
            student: FeatureBatch::with_classes(features, labels),
            teacher_logits,
            head,
            covs,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (
            self.student.num_pixels(),
            self.student.dim(),
            self.head.num_classes(),
        )
    }

    /// Closed-form value of `variant` (base losses ignore `lambda` and `form`).
    pub fn closed_form(&self, variant: LossVariant, lambda: f64, tau: f64, form: CwdBoundForm) -> Result<LossOutput> {
        match variant {
            LossVariant::Pd => pd_loss(&self.student, &self.teacher_logits, &self.head),
            LossVariant::Cwd => cwd_loss(&self.student, &self.teacher_logits, &self.head, tau),
            LossVariant::AugPd => aug_pd_loss(&self.student, &self.teacher_logits, &self.head, &self.covs, lambda),
            LossVariant::AugCwd => aug_cwd_loss(
                &self.student,
                &self.teacher_logits,
                &self.head,
                &self.covs,
                lambda,
                tau,
                form,
            ),
        }
    }
}

/// Monte Carlo estimate of the expected base loss when every pixel is
/// jointly re-drawn as `ŝ_j ~ N(s_j, λ Σ_{κ(j)})` in each of `n` draws.
///
/// `variant` may be a base or an augmented variant; the base loss is what
/// gets evaluated on each draw.
pub fn mc_loss_estimate(
    variant: LossVariant,
    instance: &Instance,
    lambda: f64,
    tau: f64,
    n: usize,
    rng: &mut Rng,
) -> Result<McEstimate> {
    let base = variant.base();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need n >= 2 draws, got {n}")));
    }
    // validates shapes and temperature up front
    instance.closed_form(base, lambda, tau, CwdBoundForm::default())?;
    let (m, a, _) = instance.dims();
    let assign = covariance_assignment(&instance.student, &instance.teacher_logits);
    let mut samplers: Vec<Option<MvnSampler>> = vec![None; instance.covs.num_classes()];
    for &k in &assign {
        if k >= samplers.len() {
            return Err(Error::MissingClassStats {
                class: k,
                available: samplers.len(),
            });
        }
        if samplers[k].is_none() {
            let cov = instance.covs.get_cov(k)?;
            samplers[k] = Some(MvnSampler::new(&vec![0.0; a], cov, lambda)?);
        }
    }

    let mut draw = instance.student.clone();
    let mut noise = vec![0.0; a];
    let eval = |batch: &FeatureBatch| -> Result<f64> {
        Ok(match base {
            LossVariant::Pd => pd_loss(batch, &instance.teacher_logits, &instance.head)?.value,
            _ => cwd_loss(batch, &instance.teacher_logits, &instance.head, tau)?.value,
        })
    };
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        for j in 0..m {
            let sampler = samplers[assign[j]].as_ref().expect("sampler built");
            sampler.sample_into(rng, &mut noise);
            let src = instance.student.features.row(j);
            for ((d, s), e) in draw.features.row_mut(j).iter_mut().zip(src).zip(&noise) {
                *d = s + e;
            }
        }
        values.push(eval(&draw)?);
    }
    McEstimate::from_samples(values)
}

/// Closed-form bound against its Monte Carlo target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub closed_form: f64,
    pub mc: McEstimate,
    pub margin: f64,
    pub holds: bool,
}

impl BoundReport {
    pub fn new(closed_form: f64, mc: McEstimate) -> Self {
        let margin = closed_form - mc.mean;
        BoundReport {
            closed_form,
            mc,
            margin,
            holds: margin >= -3.0 * mc.stderr,
        }
    }
}

/// Checks `closed_form ≥ MC mean − 3·stderr` for an augmented variant.
pub fn verify_upper_bound(
    variant: LossVariant,
    instance: &Instance,
    lambda: f64,
    tau: f64,
    form: CwdBoundForm,
    n: usize,
    rng: &mut Rng,
) -> Result<BoundReport> {
    let closed = instance.closed_form(variant, lambda, tau, form)?.value;
    let mc = mc_loss_estimate(variant, instance, lambda, tau, n, rng)?;
    Ok(BoundReport::new(closed, mc))
}

/// Label of a bound form as written to reports, e.g. `paper_form/tau_squared`.
pub fn form_label(form: CwdBoundForm) -> String {
    let d = match form.diagonal {
        DiagonalMode::PaperForm => "paper_form",
        DiagonalMode::ExactDiagonal => "exact_diagonal",
    };
    let v = match form.denominator {
        VarianceDenominator::TauSquared => "tau_squared",
        VarianceDenominator::Tau => "tau",
    };
    format!("{d}/{v}")
}

/// One line of the bound-report CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow {
    pub variant: String,
    pub seed: u64,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "A")]
    pub a: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub lambda: f64,
    pub tau: f64,
    pub mode: String,
    pub closed_form: f64,
    pub mc_mean: f64,
    pub mc_stderr: f64,
    pub margin: f64,
    pub holds: bool,
}

impl BoundRow {
    pub fn new(
        variant: LossVariant,
        seed: u64,
        instance: &Instance,
        lambda: f64,
        tau: f64,
        form: CwdBoundForm,
        report: &BoundReport,
    ) -> Self {
        let (m, a, c) = instance.dims();
        BoundRow {
            variant: variant.name().to_string(),
            seed,
            m,
            a,
            c,
            lambda,
            tau,
            mode: form_label(form),
            closed_form: report.closed_form,
            mc_mean: report.mc.mean,
            mc_stderr: report.mc.stderr,
            margin: report.margin,
            holds: report.holds,
        }
    }
}

/// Worst `|fd − analytic| / max(1, |analytic|)` over all coordinates of `x`,
/// with central differences of step `step`.
pub fn max_relative_error(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    step: f64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    if x.len() != analytic.len() {
        return Err(Error::shape(format!(
            "{} coordinates with {} analytic partials",
            x.len(),
            analytic.len()
        )));
    }
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe);
        probe[i] = x[i] - step;
        let down = f(&probe);
        probe[i] = x[i];
        let fd = (up - down) / (2.0 * step);
        worst = worst.max((fd - analytic[i]).abs() / analytic[i].abs().max(1.0));
    }
    Ok(worst)
}

/// Finite-difference check of a loss over every coordinate of the student
/// features, the head weights and the head biases.
pub fn finite_diff_grad_check<F>(loss_fn: F, features: &Mat, head: &ClassifierHead, step: f64) -> Result<f64>
where
    F: Fn(&Mat, &ClassifierHead) -> Result<LossOutput>,
{
    let analytic = loss_fn(features, head)?;
    let (m, a) = features.shape();
    let c = head.num_classes();

    let features_err = max_relative_error(
        |x| {
            let f = Mat::from_vec(m, a, x.to_vec()).expect("same shape");
            loss_fn(&f, head).map_or(f64::NAN, |o| o.value)
        },
        features.as_slice(),
        analytic.grad_features.as_slice(),
        step,
    )?;
    let weights_err = max_relative_error(
        |x| {
            let h = ClassifierHead {
                weights: Mat::from_vec(c, a, x.to_vec()).expect("same shape"),
                bias: head.bias.clone(),
            };
            loss_fn(features, &h).map_or(f64::NAN, |o| o.value)
        },
        head.weights.as_slice(),
        analytic.grad_weights.as_slice(),
        step,
    )?;
    let bias_err = max_relative_error(
        |x| {
            let h = ClassifierHead {
                weights: head.weights.clone(),
                bias: x.to_vec(),
            };
            loss_fn(features, &h).map_or(f64::NAN, |o| o.value)
        },
        &head.bias,
        &analytic.grad_bias,
        step,
    )?;
    let worst = features_err.max(weights_err).max(bias_err);
    // NaN from a failing evaluation must not pass as a small error
    Ok(if worst.is_nan() { f64::INFINITY } else { worst })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mc_estimate_basic() {
        let e = McEstimate::from_samples([1.0, 3.0]).unwrap();
        assert_eq!(e.mean, 2.0);
        // unbiased variance 2, stderr sqrt(2/2)
        assert!((e.stderr - 1.0).abs() < 1e-15);
        assert!(McEstimate::from_samples([1.0]).is_err());
    }

    #[test]
    fn mgf_degenerate_cases() {
        let mut rng = Rng::new(1);
        let a = [0.3, -0.7];
        let mu = [1.0, 2.0];
        let check = mgf_expectation(&a, &mu, &Mat::zeros(2, 2), 100, &mut rng).unwrap();
        assert_eq!(check.mc.mean, dot(&a, &mu).exp());
        assert_eq!(check.mc.stderr, 0.0);
        assert_eq!(check.closed_form, check.mc.mean);

        let check = mgf_expectation(&[0.0, 0.0], &mu, &Mat::identity(2), 100, &mut rng).unwrap();
        assert_eq!(check.closed_form, 1.0);
        assert_eq!(check.mc.mean, 1.0);
        assert!(matches!(
            mgf_expectation(&[1.0], &mu, &Mat::identity(2), 10, &mut rng),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn mgf_unit_direction_converges() {
        let mut rng = Rng::new(2);
        let check = mgf_expectation(&[1.0, 0.0], &[0.0, 0.0], &Mat::identity(2), 1_000_000, &mut rng).unwrap();
        assert!((check.closed_form - 0.5f64.exp()).abs() < 1e-15);
        assert!((check.closed_form - 1.64872).abs() < 1e-5);
        assert!(check.within(3.0), "{check:?}");
    }

    #[test]
    fn mc_zero_lambda_is_exact() {
        let mut rng = Rng::new(3);
        let inst = Instance::random(&mut rng, 4, 3, 3);
        for variant in [LossVariant::AugPd, LossVariant::AugCwd] {
            let est = mc_loss_estimate(variant, &inst, 0.0, 4.0, 50, &mut rng).unwrap();
            let base = inst.closed_form(variant.base(), 0.0, 4.0, CwdBoundForm::default()).unwrap().value;
            assert_eq!(est.mean, base);
            assert_eq!(est.stderr, 0.0);
            let report = verify_upper_bound(variant, &inst, 0.0, 4.0, CwdBoundForm::default(), 50, &mut rng).unwrap();
            assert!(report.holds);
            assert!(report.margin.abs() <= 1e-12 * (1.0 + base.abs()));
        }
    }

    #[test]
    fn mc_is_deterministic_for_a_seed() {
        let inst = Instance::random(&mut Rng::new(4), 3, 2, 3);
        let a = mc_loss_estimate(LossVariant::AugCwd, &inst, 1.0, 2.0, 500, &mut Rng::new(99)).unwrap();
        let b = mc_loss_estimate(LossVariant::AugCwd, &inst, 1.0, 2.0, 500, &mut Rng::new(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn aug_pd_small_instance_bounds_mc() {
        let mut rng = Rng::new(5);
        let mut inst = Instance::random(&mut rng, 2, 2, 3);
        let mut covs = ClassCovarianceStore::new(3, 2);
        // ±√2·e_1, ±√2·e_2 have population covariance I
        let pts = Mat::from_rows(&[
            vec![2f64.sqrt(), 0.0],
            vec![-(2f64.sqrt()), 0.0],
            vec![0.0, 2f64.sqrt()],
            vec![0.0, -(2f64.sqrt())],
        ])
        .unwrap();
        for class in 0..3 {
            covs.update(&pts, &[class; 4]).unwrap();
        }
        assert!(covs.get_cov(0).unwrap().max_abs_diff(&Mat::identity(2)) < 1e-15);
        inst.covs = covs;
        let report = verify_upper_bound(
            LossVariant::AugPd,
            &inst,
            0.5,
            1.0,
            CwdBoundForm::default(),
            100_000,
            &mut rng,
        )
        .unwrap();
        assert!(report.holds, "{report:?}");
    }

    #[test]
    fn stderr_scales_with_sample_count() {
        let inst = Instance::random(&mut Rng::new(6), 4, 3, 2);
        let mut errs = Vec::new();
        for n in [1_000, 10_000, 100_000] {
            let e = mc_loss_estimate(LossVariant::AugCwd, &inst, 1.0, 4.0, n, &mut Rng::new(n as u64)).unwrap();
            errs.push(e.stderr);
        }
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            let expected = 10f64.sqrt();
            assert!((ratio / expected - 1.0).abs() < 0.3, "ratio {ratio}");
        }
    }

    #[test]
    fn checker_on_quadratic() {
        // f(x) = ½ xᵀ Q x + bᵀ x, ∇f = Q x + b
        let q = Mat::from_rows(&[vec![3.0, 1.0, 0.0], vec![1.0, 2.0, 0.5], vec![0.0, 0.5, 1.0]]).unwrap();
        let b = [0.5, -1.0, 2.0];
        let x = [0.3, -0.2, 1.1];
        let f = |v: &[f64]| 0.5 * q.quad_form(v) + dot(&b, v);
        let mut grad = q.mat_vec(&x).unwrap();
        for (g, bi) in grad.iter_mut().zip(&b) {
            *g += bi;
        }
        assert!(max_relative_error(f, &x, &grad, 1e-5).unwrap() <= 1e-10);
        let mut wrong = grad.clone();
        wrong[1] += 0.1;
        assert!(max_relative_error(f, &x, &wrong, 1e-5).unwrap() > 0.05);
        assert!(max_relative_error(f, &x, &grad, 0.0).is_err());
    }

    #[test]
    fn loss_gradients_pass_checker() {
        let mut rng = Rng::new(7);
        let inst = Instance::random(&mut rng, 5, 3, 3);
        let labels = inst.student.pixel_class.clone();
        let t = &inst.teacher_logits;
        let covs = &inst.covs;
        let with = |f: &Mat| FeatureBatch {
            features: f.clone(),
            pixel_class: labels.clone(),
        };
        let e = finite_diff_grad_check(|f, h| pd_loss(&with(f), t, h), &inst.student.features, &inst.head, 1e-5).unwrap();
        assert!(e <= 1e-5, "pd {e}");
        for diagonal in [DiagonalMode::PaperForm, DiagonalMode::ExactDiagonal] {
            let form = CwdBoundForm {
                diagonal,
                ..Default::default()
            };
            let e = finite_diff_grad_check(
                |f, h| aug_cwd_loss(&with(f), t, h, covs, 1.0, 4.0, form),
                &inst.student.features,
                &inst.head,
                1e-5,
            )
            .unwrap();
            assert!(e <= 1e-5, "aug_cwd {diagonal:?} {e}");
        }
        let e = finite_diff_grad_check(|f, h| aug_pd_loss(&with(f), t, h, covs, 0.7), &inst.student.features, &inst.head, 1e-5)
            .unwrap();
        assert!(e <= 1e-5, "aug_pd {e}");
    }

    #[test]
    fn bound_report_holds_flag() {
        let mc = McEstimate {
            mean: 1.0,
            stderr: 0.1,
            n_samples: 10,
        };
        assert!(BoundReport::new(0.71, mc).holds);
        assert!(!BoundReport::new(0.69, mc).holds);
    }
}
