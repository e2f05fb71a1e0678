//! Synthetic pixel-labeling tasks.
//!
//! Every image is a `side × side` grid split into Voronoi regions. Each
//! region gets a class (drawn from the class weights) and one of that
//! class's mixture components; every pixel in it is an independent draw from
//! that component's Gaussian. Regions give the spatial structure that the
//! channel-wise losses need.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, psd_sqrt, Mat, Rng};

/// Generative description of a task. All fields have defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub image_side: usize,
    /// Standard deviation of the component means around the origin.
    pub class_separation: f64,
    /// Gaussian components per class.
    pub modes_per_class: usize,
    /// Within-class standard deviation (per input dimension on average).
    pub noise: f64,
    /// Share of the within-class variance along one random direction per
    /// class, in `[0, 1)`.
    pub anisotropy: f64,
    /// Class `c` has prior weight proportional to `imbalance_ratio^c`.
    pub imbalance_ratio: f64,
    pub regions_per_image: usize,
    /// Fraction of training pixels whose label is replaced by a uniform class.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            num_classes: 6,
            input_dim: 8,
            image_side: 16,
            class_separation: 1.0,
            modes_per_class: 1,
            noise: 1.0,
            anisotropy: 0.0,
            imbalance_ratio: 1.0,
            regions_per_image: 6,
            label_noise: 0.0,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidTaskSpec(msg.to_string()));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.input_dim == 0 || self.image_side == 0 || self.regions_per_image == 0 || self.modes_per_class == 0 {
            return bad("input_dim, image_side, regions_per_image and modes_per_class must be positive");
        }
        if !(self.class_separation > 0.0) || !self.class_separation.is_finite() {
            return bad("class_separation must be positive");
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad("noise must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.anisotropy) {
            return bad("anisotropy must be in [0, 1)");
        }
        if !(self.imbalance_ratio > 0.0) || self.imbalance_ratio > 1.0 {
            return bad("imbalance_ratio must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return bad("label_noise must be in [0, 1]");
        }
        Ok(())
    }

    pub fn pixels_per_image(&self) -> usize {
        self.image_side * self.image_side
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    /// `M × A_in`, pixels in row-major grid order.
    pub pixels: Mat,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn num_pixels(&self) -> usize {
        self.images.iter().map(|i| i.labels.len()).sum()
    }
}

/// A materialized task: component means, within-class covariances and priors.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    /// Per class, `modes_per_class × A_in`.
    pub means: Vec<Mat>,
    /// Per class, `A_in × A_in`.
    pub covs: Vec<Mat>,
    pub weights: Vec<f64>,
    factors: Vec<Mat>,
    precisions: Vec<Mat>,
    log_dets: Vec<f64>,
}

impl SyntheticTask {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::stream(spec.seed, 0);
        let d = spec.input_dim;
        let mut means = Vec::with_capacity(spec.num_classes);
        for _ in 0..spec.num_classes {
            means.push(rng.normal_mat(spec.modes_per_class, d, spec.class_separation));
        }
        for c in 0..spec.num_classes {
            for k in 0..c {
                for a in 0..spec.modes_per_class {
                    for b in 0..spec.modes_per_class {
                        if means[c].row(a) == means[k].row(b) {
                            return Err(Error::InvalidTaskSpec("class means are not distinct".into()));
                        }
                    }
                }
            }
        }

        // Σ_c = σ² ((1 − a) I + a d u uᵀ), trace σ² d
        let (beta, gamma) = (1.0 - spec.anisotropy, spec.anisotropy * d as f64);
        let sigma2 = spec.noise * spec.noise;
        let mut covs = Vec::new();
        let mut precisions = Vec::new();
        let mut log_dets = Vec::new();
        let mut factors = Vec::new();
        for _ in 0..spec.num_classes {
            let mut u = rng.normal_vec(d);
            let norm = dot(&u, &u).sqrt();
            u.iter_mut().for_each(|x| *x /= norm);
            let shape = Mat::from_fn(d, d, |r, c| {
                (if r == c { beta } else { 0.0 }) + gamma * u[r] * u[c]
            });
            let cov = shape.scaled(sigma2);
            factors.push(psd_sqrt(&cov)?.lower);
            // Sherman–Morrison inverse of the shape matrix
            let inv = Mat::from_fn(d, d, |r, c| {
                (if r == c { 1.0 / beta } else { 0.0 }) - gamma / (beta * (beta + gamma)) * u[r] * u[c]
            });
            precisions.push(inv);
            log_dets.push((d - 1) as f64 * beta.ln() + (beta + gamma).ln());
            covs.push(cov);
        }

        let raw: Vec<f64> = (0..spec.num_classes)
            .map(|c| spec.imbalance_ratio.powi(c as i32))
            .collect();
        let total: f64 = raw.iter().sum();
        let weights = raw.into_iter().map(|w| w / total).collect();

        Ok(SyntheticTask {
            spec,
            means,
            covs,
            weights,
            factors,
            precisions,
            log_dets,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Class log-likelihood up to a constant shared by all classes.
    fn class_log_likelihood(&self, class: usize, x: &[f64]) -> f64 {
        let sigma2 = self.spec.noise * self.spec.noise;
        let modes = &self.means[class];
        let mut terms = Vec::with_capacity(modes.rows());
        let mut diff = vec![0.0; x.len()];
        for m in 0..modes.rows() {
            for ((d, xi), mu) in diff.iter_mut().zip(x).zip(modes.row(m)) {
                *d = xi - mu;
            }
            terms.push(-0.5 * self.precisions[class].quad_form(&diff) / sigma2);
        }
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
        lse - 0.5 * self.log_dets[class] - (modes.rows() as f64).ln()
    }

    /// Bayes-optimal class for a pixel under the generative model and the
    /// class priors. With zero noise this is the nearest component mean.
    pub fn bayes_predict(&self, x: &[f64]) -> usize {
        let score = |c: usize| {
            if self.spec.noise == 0.0 {
                let modes = &self.means[c];
                -(0..modes.rows())
                    .map(|m| modes.row(m).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
            } else {
                self.weights[c].ln() + self.class_log_likelihood(c, x)
            }
        };
        let mut best = (0, f64::NEG_INFINITY);
        for c in 0..self.num_classes() {
            let s = score(c);
            if s > best.1 {
                best = (c, s);
            }
        }
        best.0
    }

    /// `n_images` images of the given split; deterministic in the task seed.
    pub fn generate(&self, n_images: usize, split: Split) -> Result<Dataset> {
        if n_images == 0 {
            return Err(Error::InvalidTaskSpec("n_images must be at least 1".into()));
        }
        let spec = &self.spec;
        let mut rng = Rng::stream(spec.seed, split.stream());
        let side = spec.image_side;
        let d = spec.input_dim;
        let mut images = Vec::with_capacity(n_images);
        for _ in 0..n_images {
            let regions: Vec<(f64, f64, usize, usize)> = (0..spec.regions_per_image)
                .map(|_| {
                    let (r, c) = (rng.uniform() * side as f64, rng.uniform() * side as f64);
                    let class = rng.categorical(&self.weights);
                    let mode = rng.below(spec.modes_per_class);
                    (r, c, class, mode)
                })
                .collect();
            let mut pixels = Mat::zeros(side * side, d);
            let mut labels = Vec::with_capacity(side * side);
            let mut z = vec![0.0; d];
            for p in 0..side * side {
                let (pr, pc) = ((p / side) as f64 + 0.5, (p % side) as f64 + 0.5);
                let &(_, _, class, mode) = regions
                    .iter()
                    .min_by(|a, b| {
                        let da = (a.0 - pr).powi(2) + (a.1 - pc).powi(2);
                        let db = (b.0 - pr).powi(2) + (b.1 - pc).powi(2);
                        da.total_cmp(&db)
                    })
                    .expect("at least one region");
                for zi in z.iter_mut() {
                    *zi = rng.normal();
                }
                let l = &self.factors[class];
                let mean = self.means[class].row(mode);
                for (a, out) in pixels.row_mut(p).iter_mut().enumerate() {
                    *out = mean[a] + dot(&l.row(a)[..=a], &z[..=a]);
                }
                let label = if split == Split::Train && spec.label_noise > 0.0 && rng.uniform() < spec.label_noise {
                    rng.below(spec.num_classes)
                } else {
                    class
                };
                labels.push(label);
            }
            images.push(Image { pixels, labels });
        }
        Ok(Dataset {
            num_classes: spec.num_classes,
            images,
        })
    }
}

/// Training split of `spec` with `n_images` images.
pub fn generate_task(spec: &TaskSpec, n_images: usize) -> Result<Dataset> {
    SyntheticTask::new(spec.clone())?.generate(n_images, Split::Train)
}
