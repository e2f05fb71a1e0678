//! Experiment and verification configuration.
//!
//! Every section has defaults and rejects unknown keys, so a typo in a
//! hyper-parameter name is a hard error instead of a silently ignored field.
//! [`ExperimentConfig::validate`] reports problems with a dotted field path.

use serde::{Deserialize, Serialize};

use crate::data::TaskSpec;
use crate::error::{Error, Result};
use crate::losses::{DiagonalMode, LossVariant, VarianceDenominator};
use crate::model::ExtractorSpec;
use crate::stats::{CovarianceMode, RampShape};

/// A student training recipe: plain supervision or one distillation loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentVariant {
    #[serde(alias = "none", alias = "no-distill")]
    NoDistill,
    Pd,
    AugPd,
    Cwd,
    AugCwd,
}

impl StudentVariant {
    pub const ALL: [StudentVariant; 5] = [
        StudentVariant::NoDistill,
        StudentVariant::Pd,
        StudentVariant::AugPd,
        StudentVariant::Cwd,
        StudentVariant::AugCwd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StudentVariant::NoDistill => "no_distill",
            StudentVariant::Pd => "pd",
            StudentVariant::AugPd => "aug_pd",
            StudentVariant::Cwd => "cwd",
            StudentVariant::AugCwd => "aug_cwd",
        }
    }

    pub fn loss(self) -> Option<LossVariant> {
        match self {
            StudentVariant::NoDistill => None,
            StudentVariant::Pd => Some(LossVariant::Pd),
            StudentVariant::AugPd => Some(LossVariant::AugPd),
            StudentVariant::Cwd => Some(LossVariant::Cwd),
            StudentVariant::AugCwd => Some(LossVariant::AugCwd),
        }
    }
}

impl std::fmt::Display for StudentVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for StudentVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "no-distill" => Ok(StudentVariant::NoDistill),
            _ => StudentVariant::ALL
                .into_iter()
                .find(|v| v.name() == s)
                .ok_or_else(|| Error::Parse(format!("unknown student variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Student training images: the first `train_images` of the teacher's set.
    pub train_images: usize,
    /// Teacher training images; 0 means the same images as the student.
    pub teacher_train_images: usize,
    pub val_images: usize,
}

impl DataConfig {
    pub fn teacher_images(&self) -> usize {
        self.teacher_train_images.max(self.train_images)
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_images: 200,
            teacher_train_images: 0,
            val_images: 50,
        }
    }
}

/// Network architecture plus its SGD recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ExtractorSpec,
    pub steps: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub poly_power: f64,
    /// Images per SGD step.
    pub batch_images: usize,
}

impl TrainConfig {
    pub fn teacher_default() -> Self {
        TrainConfig {
            model: ExtractorSpec::Mlp {
                hidden: 64,
                feature_dim: 8,
            },
            steps: 2000,
            base_lr: 0.05,
            momentum: 0.9,
            poly_power: 0.9,
            batch_images: 4,
        }
    }

    pub fn student_default() -> Self {
        TrainConfig {
            model: ExtractorSpec::Linear { feature_dim: 8 },
            ..TrainConfig::teacher_default()
        }
    }

    fn validate(&self, path: &str) -> Result<()> {
        match self.model {
            ExtractorSpec::Identity => {}
            ExtractorSpec::Linear { feature_dim } => positive(feature_dim, &format!("{path}.model.feature_dim"))?,
            ExtractorSpec::Mlp { hidden, feature_dim } => {
                positive(hidden, &format!("{path}.model.hidden"))?;
                positive(feature_dim, &format!("{path}.model.feature_dim"))?;
            }
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!("{path}.base_lr"), "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("{path}.momentum"), "must be in [0, 1)"));
        }
        if !(self.poly_power >= 0.0 && self.poly_power.is_finite()) {
            return Err(Error::config(format!("{path}.poly_power"), "must be nonnegative"));
        }
        positive(self.batch_images, &format!("{path}.batch_images"))
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::student_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub variants: Vec<StudentVariant>,
    /// Final augmentation strength of the λ ramp.
    pub lambda0: f64,
    pub ramp: RampShape,
    pub tau_pd: f64,
    pub tau_cwd: f64,
    pub weight_pd: f64,
    pub weight_cwd: f64,
    pub diagonal_mode: DiagonalMode,
    pub variance_denominator: VarianceDenominator,
    pub covariance_mode: CovarianceMode,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            variants: StudentVariant::ALL.to_vec(),
            lambda0: 1.0,
            ramp: RampShape::Cosine,
            tau_pd: 1.0,
            tau_cwd: 4.0,
            weight_pd: 1.0,
            weight_cwd: 3.0,
            diagonal_mode: DiagonalMode::PaperForm,
            variance_denominator: VarianceDenominator::TauSquared,
            covariance_mode: CovarianceMode::Full,
        }
    }
}

impl DistillConfig {
    /// Temperature used by `variant` (PD ignores it in the loss but it is
    /// still reported).
    pub fn tau(&self, variant: StudentVariant) -> Option<f64> {
        match variant.loss()? {
            v if v.is_channel_wise() => Some(self.tau_cwd),
            _ => Some(self.tau_pd),
        }
    }

    pub fn weight(&self, variant: StudentVariant) -> f64 {
        match variant.loss() {
            None => 0.0,
            Some(v) if v.is_channel_wise() => self.weight_cwd,
            Some(_) => self.weight_pd,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::config("distill.variants", "must list at least one variant"));
        }
        for (i, v) in self.variants.iter().enumerate() {
            if self.variants[..i].contains(v) {
                return Err(Error::config(format!("distill.variants[{i}]"), format!("duplicate variant `{v}`")));
            }
        }
        nonnegative(self.lambda0, "distill.lambda0")?;
        for (value, path) in [(self.tau_pd, "distill.tau_pd"), (self.tau_cwd, "distill.tau_cwd")] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::config(path, "temperature must be positive"));
            }
        }
        nonnegative(self.weight_pd, "distill.weight_pd")?;
        nonnegative(self.weight_cwd, "distill.weight_cwd")
    }
}

/// Options of the bound / gradient / reduction verification campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Random instances per (variant, λ, τ, mode) cell of the bound check.
    pub bound_instances: usize,
    /// Extra structured instances per cell (see `Instance::variance_contrast`).
    pub stress_instances: usize,
    pub mc_samples: usize,
    pub lambdas: Vec<f64>,
    pub taus: Vec<f64>,
    pub diagonal_modes: Vec<DiagonalMode>,
    pub variance_denominator: VarianceDenominator,
    /// Pixels, feature width and classes of random instances.
    pub pixels: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub reduction_instances: usize,
    pub mgf_instances: usize,
    pub mgf_samples: usize,
    pub gradient_instances: usize,
    pub covariance_partitions: usize,
    pub monotonicity_instances: usize,
    /// Width of the acceptance band in Monte Carlo standard errors.
    pub stderr_band: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 0,
            bound_instances: 50,
            stress_instances: 10,
            mc_samples: 10_000,
            lambdas: vec![0.25, 1.0],
            taus: vec![1.0, 4.0],
            diagonal_modes: vec![DiagonalMode::PaperForm, DiagonalMode::ExactDiagonal],
            variance_denominator: VarianceDenominator::TauSquared,
            pixels: 6,
            feature_dim: 3,
            num_classes: 3,
            reduction_instances: 100,
            mgf_instances: 20,
            mgf_samples: 1_000_000,
            gradient_instances: 20,
            covariance_partitions: 50,
            monotonicity_instances: 50,
            stderr_band: 3.0,
        }
    }
}

impl VerifyConfig {
    fn validate(&self) -> Result<()> {
        if self.mc_samples < 2 {
            return Err(Error::config("verify.mc_samples", "needs at least 2 samples"));
        }
        if self.mgf_samples < 2 {
            return Err(Error::config("verify.mgf_samples", "needs at least 2 samples"));
        }
        for (i, &l) in self.lambdas.iter().enumerate() {
            nonnegative(l, &format!("verify.lambdas[{i}]"))?;
        }
        for (i, &t) in self.taus.iter().enumerate() {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::config(format!("verify.taus[{i}]"), "temperature must be positive"));
            }
        }
        positive(self.pixels, "verify.pixels")?;
        positive(self.feature_dim, "verify.feature_dim")?;
        positive(self.num_classes, "verify.num_classes")?;
        if self.stress_instances > 0 && self.num_classes < 2 {
            return Err(Error::config("verify.stress_instances", "stress instances need num_classes >= 2"));
        }
        nonnegative(self.stderr_band, "verify.stderr_band")
    }
}

/// Everything needed to run, verify or sweep one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task_id: String,
    /// One teacher and one set of students per seed. The seed replaces
    /// `task.seed`, so every seed is a fresh draw of the synthetic task.
    pub seeds: Vec<u64>,
    /// Worker threads for independent (seed, variant) cells; 0 = all cores.
    pub jobs: usize,
    pub output_dir: String,
    /// Wall-clock time is nondeterministic, so it is only written on request.
    pub record_wall_time: bool,
    pub task: TaskSpec,
    pub data: DataConfig,
    pub teacher: TrainConfig,
    pub student: TrainConfig,
    pub distill: DistillConfig,
    pub verify: VerifyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task_id: "reference".into(),
            seeds: vec![0, 1, 2, 3, 4],
            jobs: 1,
            output_dir: "out".into(),
            record_wall_time: false,
            task: TaskSpec::default(),
            data: DataConfig::default(),
            teacher: TrainConfig::teacher_default(),
            student: TrainConfig::student_default(),
            distill: DistillConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.task_id.is_empty() || self.task_id.contains([',', '\n', '"']) {
            return Err(Error::config("task_id", "must be nonempty without commas, quotes or newlines"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(Error::config(format!("seeds[{i}]"), format!("duplicate seed {s}")));
            }
        }
        self.task.validate().map_err(|e| match e {
            Error::InvalidTaskSpec(msg) => Error::config("task", msg),
            other => other,
        })?;
        positive(self.data.train_images, "data.train_images")?;
        positive(self.data.val_images, "data.val_images")?;
        if self.data.teacher_train_images != 0 && self.data.teacher_train_images < self.data.train_images {
            return Err(Error::config(
                "data.teacher_train_images",
                "must be 0 or at least data.train_images",
            ));
        }
        self.teacher.validate("teacher")?;
        self.student.validate("student")?;
        if self.distill.variants.iter().any(|v| v.loss().is_some()) && self.student.steps == 0 {
            return Err(Error::config("student.steps", "distillation needs at least one step"));
        }
        self.distill.validate()?;
        self.verify.validate()
    }

    /// Replaces the seed list with a single seed.
    pub fn with_seed_override(mut self, seed: u64) -> Self {
        self.seeds = vec![seed];
        self
    }
}

fn positive(value: usize, path: &str) -> Result<()> {
    if value == 0 {
        Err(Error::config(path, "must be at least 1"))
    } else {
        Ok(())
    }
}

fn nonnegative(value: f64, path: &str) -> Result<()> {
    if value >= 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::config(path, format!("must be finite and nonnegative, got {value}")))
    }
}
