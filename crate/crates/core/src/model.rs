//! Per-pixel networks: a feature extractor followed by a linear head.
//!
//! Backpropagation is written out by hand; `forward_train` keeps the
//! activations that `backward` needs.
//!
//! # Snapshot format
//!
//! ```text
//! fakd-pixelnet v1
//! extractor <identity|linear|mlp> <input_dim>
//! param <name> <rows> <cols>
//! <rows·cols values, row-major, one line>
//! ...
//! ```
//!
//! Parameters appear in the order of [`PixelNet::param_shapes`].

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ClassifierHead, LossOutput};
use crate::numerics::{Mat, Rng};

/// Architecture of the feature extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ExtractorSpec {
    /// Features are the raw inputs.
    Identity,
    /// `f = W x + b`.
    Linear { feature_dim: usize },
    /// `f = W₂ relu(W₁ x + b₁) + b₂`.
    Mlp { hidden: usize, feature_dim: usize },
}

impl ExtractorSpec {
    pub fn feature_dim(&self, input_dim: usize) -> usize {
        match *self {
            ExtractorSpec::Identity => input_dim,
            ExtractorSpec::Linear { feature_dim } | ExtractorSpec::Mlp { feature_dim, .. } => feature_dim,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExtractorSpec::Identity => "identity",
            ExtractorSpec::Linear { .. } => "linear",
            ExtractorSpec::Mlp { .. } => "mlp",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Extractor {
    Identity,
    Linear { weights: Mat, bias: Vec<f64> },
    Mlp { w1: Mat, b1: Vec<f64>, w2: Mat, b2: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
struct ForwardCache {
    input: Mat,
    hidden_pre: Option<Mat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Pre-classifier activations, `M × A`.
    pub features: Mat,
    /// `M × C`.
    pub logits: Mat,
}

/// Parameter gradients in the order of [`PixelNet::param_shapes`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub tensors: Vec<Vec<f64>>,
}

impl NetGrads {
    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|x| x.is_finite())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelNet {
    input_dim: usize,
    pub extractor: Extractor,
    pub head: ClassifierHead,
    cache: Option<ForwardCache>,
}

fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Result<Mat> {
    let mut out = x.matmul_t(w)?;
    for r in 0..out.rows() {
        for (o, bi) in out.row_mut(r).iter_mut().zip(b) {
            *o += bi;
        }
    }
    Ok(out)
}

fn column_sums(m: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, x) in out.iter_mut().zip(m.row(r)) {
            *o += x;
        }
    }
    out
}

fn relu(m: &Mat) -> Mat {
    Mat::from_vec(m.rows(), m.cols(), m.as_slice().iter().map(|&x| x.max(0.0)).collect())
        .expect("same shape")
}

fn init_weights(rng: &mut Rng, rows: usize, cols: usize) -> Mat {
    rng.normal_mat(rows, cols, (2.0 / cols as f64).sqrt())
}

impl PixelNet {
    /// Random initialization: He-scaled Gaussian weights and zero biases.
    pub fn init(spec: ExtractorSpec, input_dim: usize, num_classes: usize, rng: &mut Rng) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::InvalidArgument("input width and class count must be positive".into()));
        }
        let extractor = match spec {
            ExtractorSpec::Identity => Extractor::Identity,
            ExtractorSpec::Linear { feature_dim } => {
                if feature_dim == 0 {
                    return Err(Error::InvalidArgument("feature_dim must be positive".into()));
                }
                Extractor::Linear {
                    weights: init_weights(rng, feature_dim, input_dim),
                    bias: vec![0.0; feature_dim],
                }
            }
            ExtractorSpec::Mlp { hidden, feature_dim } => {
                if feature_dim == 0 || hidden == 0 {
                    return Err(Error::InvalidArgument("hidden and feature_dim must be positive".into()));
                }
                Extractor::Mlp {
                    w1: init_weights(rng, hidden, input_dim),
                    b1: vec![0.0; hidden],
                    w2: init_weights(rng, feature_dim, hidden),
                    b2: vec![0.0; feature_dim],
                }
            }
        };
        let feature_dim = spec.feature_dim(input_dim);
        let head = ClassifierHead::new(
            rng.normal_mat(num_classes, feature_dim, (1.0 / feature_dim as f64).sqrt()),
            vec![0.0; num_classes],
        )?;
        Ok(PixelNet {
            input_dim,
            extractor,
            head,
            cache: None,
        })
    }

    pub fn from_parts(input_dim: usize, extractor: Extractor, head: ClassifierHead) -> Result<Self> {
        let net = PixelNet {
            input_dim,
            extractor,
            head,
            cache: None,
        };
        let feature_dim = net.feature_dim();
        if net.head.dim() != feature_dim {
            return Err(Error::shape(format!(
                "head width {} for features of width {feature_dim}",
                net.head.dim()
            )));
        }
        match &net.extractor {
            Extractor::Identity => {}
            Extractor::Linear { weights, bias } => {
                if weights.cols() != input_dim || bias.len() != weights.rows() {
                    return Err(Error::shape("linear extractor shapes"));
                }
            }
            Extractor::Mlp { w1, b1, w2, b2 } => {
                if w1.cols() != input_dim || b1.len() != w1.rows() || w2.cols() != w1.rows() || b2.len() != w2.rows()
                {
                    return Err(Error::shape("mlp extractor shapes"));
                }
            }
        }
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        match &self.extractor {
            Extractor::Identity => self.input_dim,
            Extractor::Linear { weights, .. } => weights.rows(),
            Extractor::Mlp { w2, .. } => w2.rows(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn spec(&self) -> ExtractorSpec {
        match &self.extractor {
            Extractor::Identity => ExtractorSpec::Identity,
            Extractor::Linear { weights, .. } => ExtractorSpec::Linear {
                feature_dim: weights.rows(),
            },
            Extractor::Mlp { w1, w2, .. } => ExtractorSpec::Mlp {
                hidden: w1.rows(),
                feature_dim: w2.rows(),
            },
        }
    }

    fn run(&self, pixels: &Mat) -> Result<(ForwardOutput, Option<Mat>)> {
        if pixels.cols() != self.input_dim {
            return Err(Error::shape(format!(
                "input width {} for a network expecting {}",
                pixels.cols(),
                self.input_dim
            )));
        }
        let (features, hidden_pre) = match &self.extractor {
            Extractor::Identity => (pixels.clone(), None),
            Extractor::Linear { weights, bias } => (affine(pixels, weights, bias)?, None),
            Extractor::Mlp { w1, b1, w2, b2 } => {
                let pre = affine(pixels, w1, b1)?;
                let features = affine(&relu(&pre), w2, b2)?;
                (features, Some(pre))
            }
        };
        let logits = self.head.logits(&features)?;
        Ok((ForwardOutput { features, logits }, hidden_pre))
    }

    /// Inference forward pass; keeps no state.
    pub fn forward(&self, pixels: &Mat) -> Result<ForwardOutput> {
        Ok(self.run(pixels)?.0)
    }

    /// Forward pass that records what [`PixelNet::backward`] needs.
    pub fn forward_train(&mut self, pixels: &Mat) -> Result<ForwardOutput> {
        let (out, hidden_pre) = self.run(pixels)?;
        self.cache = Some(ForwardCache {
            input: pixels.clone(),
            hidden_pre,
        });
        Ok(out)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Parameter gradients given gradients w.r.t. the features and the head,
    /// for the input of the last `forward_train`.
    pub fn backward(&self, upstream: &LossOutput) -> Result<NetGrads> {
        let cache = self.cache.as_ref().ok_or(Error::NoForwardState)?;
        let d_features = &upstream.grad_features;
        if d_features.shape() != (cache.input.rows(), self.feature_dim())
            || upstream.grad_weights.shape() != self.head.weights.shape()
            || upstream.grad_bias.len() != self.head.bias.len()
        {
            return Err(Error::shape("upstream gradients do not match the last forward pass"));
        }
        let mut tensors = Vec::new();
        match &self.extractor {
            Extractor::Identity => {}
            Extractor::Linear { .. } => {
                tensors.push(d_features.t_matmul(&cache.input)?.into_vec());
                tensors.push(column_sums(d_features));
            }
            Extractor::Mlp { w2, .. } => {
                let pre = cache.hidden_pre.as_ref().ok_or(Error::NoForwardState)?;
                let hidden = relu(pre);
                let d_w2 = d_features.t_matmul(&hidden)?;
                let d_b2 = column_sums(d_features);
                let mut d_pre = d_features.matmul(w2)?;
                for (d, &p) in d_pre.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    if p <= 0.0 {
                        *d = 0.0;
                    }
                }
                tensors.push(d_pre.t_matmul(&cache.input)?.into_vec());
                tensors.push(column_sums(&d_pre));
                tensors.push(d_w2.into_vec());
                tensors.push(d_b2);
            }
        }
        tensors.push(upstream.grad_weights.as_slice().to_vec());
        tensors.push(upstream.grad_bias.clone());
        Ok(NetGrads { tensors })
    }

    /// `(name, rows, cols)` of every parameter tensor, extractor first.
    pub fn param_shapes(&self) -> Vec<(&'static str, usize, usize)> {
        let mut shapes = Vec::new();
        match &self.extractor {
            Extractor::Identity => {}
            Extractor::Linear { weights, .. } => {
                shapes.push(("extractor.weight", weights.rows(), weights.cols()));
                shapes.push(("extractor.bias", 1, weights.rows()));
            }
            Extractor::Mlp { w1, w2, .. } => {
                shapes.push(("extractor.w1", w1.rows(), w1.cols()));
                shapes.push(("extractor.b1", 1, w1.rows()));
                shapes.push(("extractor.w2", w2.rows(), w2.cols()));
                shapes.push(("extractor.b2", 1, w2.rows()));
            }
        }
        shapes.push(("head.weight", self.head.weights.rows(), self.head.weights.cols()));
        shapes.push(("head.bias", 1, self.head.bias.len()));
        shapes
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        match &self.extractor {
            Extractor::Identity => {}
            Extractor::Linear { weights, bias } => {
                out.push(weights.as_slice());
                out.push(bias);
            }
            Extractor::Mlp { w1, b1, w2, b2 } => {
                out.push(w1.as_slice());
                out.push(b1);
                out.push(w2.as_slice());
                out.push(b2);
            }
        }
        out.push(self.head.weights.as_slice());
        out.push(&self.head.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        match &mut self.extractor {
            Extractor::Identity => {}
            Extractor::Linear { weights, bias } => {
                out.push(weights.as_mut_slice());
                out.push(bias);
            }
            Extractor::Mlp { w1, b1, w2, b2 } => {
                out.push(w1.as_mut_slice());
                out.push(b1);
                out.push(w2.as_mut_slice());
                out.push(b2);
            }
        }
        out.push(self.head.weights.as_mut_slice());
        out.push(&mut self.head.bias);
        out
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().into_iter().flatten().copied().collect()
    }

    /// Overwrites every parameter from a flat vector in `param_shapes` order.
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.params().iter().map(|p| p.len()).sum();
        if flat.len() != total {
            return Err(Error::shape(format!("{} values for {total} parameters", flat.len())));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        self.cache = None;
        Ok(())
    }

    pub fn to_snapshot(&self) -> String {
        let mut out = String::from("fakd-pixelnet v1\n");
        let _ = writeln!(out, "extractor {} {}", self.spec().name(), self.input_dim);
        for ((name, rows, cols), values) in self.param_shapes().into_iter().zip(self.params()) {
            let _ = writeln!(out, "param {name} {rows} {cols}");
            let line: Vec<String> = values.iter().map(|x| format!("{x:?}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_snapshot(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut next = || lines.next().ok_or_else(|| Error::Parse("snapshot truncated".into()));
        if next()?.trim() != "fakd-pixelnet v1" {
            return Err(Error::Parse("unrecognized snapshot header".into()));
        }
        let head_line: Vec<&str> = next()?.split_whitespace().collect();
        if head_line.len() != 3 || head_line[0] != "extractor" {
            return Err(Error::Parse("expected `extractor <kind> <input_dim>`".into()));
        }
        let kind = head_line[1].to_string();
        let input_dim: usize = head_line[2]
            .parse()
            .map_err(|_| Error::Parse(format!("invalid input width `{}`", head_line[2])))?;
        let mut tensors: Vec<(String, Mat)> = Vec::new();
        while let Ok(line) = next() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "param" {
                return Err(Error::Parse(format!("expected `param <name> <rows> <cols>`, got `{line}`")));
            }
            let rows: usize = parts[2].parse().map_err(|_| Error::Parse("invalid rows".into()))?;
            let cols: usize = parts[3].parse().map_err(|_| Error::Parse("invalid cols".into()))?;
            let values: Vec<f64> = next()?
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| Error::Parse(format!("invalid value `{v}`"))))
                .collect::<Result<_>>()?;
            tensors.push((parts[1].to_string(), Mat::from_vec(rows, cols, values)?));
        }
        let mut take = |name: &str| -> Result<Mat> {
            let pos = tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Parse(format!("missing parameter `{name}`")))?;
            Ok(tensors.remove(pos).1)
        };
        let extractor = match kind.as_str() {
            "identity" => Extractor::Identity,
            "linear" => Extractor::Linear {
                weights: take("extractor.weight")?,
                bias: take("extractor.bias")?.into_vec(),
            },
            "mlp" => Extractor::Mlp {
                w1: take("extractor.w1")?,
                b1: take("extractor.b1")?.into_vec(),
                w2: take("extractor.w2")?,
                b2: take("extractor.b2")?.into_vec(),
            },
            other => return Err(Error::Parse(format!("unknown extractor `{other}`"))),
        };
        let head = ClassifierHead::new(take("head.weight")?, take("head.bias")?.into_vec())?;
        if let Some((name, _)) = tensors.first() {
            return Err(Error::Parse(format!("unexpected parameter `{name}`")));
        }
        PixelNet::from_parts(input_dim, extractor, head)
    }
}

/// Momentum SGD with the poly learning-rate policy
/// `lr(t) = base_lr · (1 − t / max_iter)^power`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdOptimizer {
    pub base_lr: f64,
    pub momentum: f64,
    pub power: f64,
    pub max_iter: usize,
    velocity: Vec<Vec<f64>>,
}

impl SgdOptimizer {
    pub fn new(base_lr: f64, momentum: f64, max_iter: usize) -> Result<Self> {
        Self::with_power(base_lr, momentum, 0.9, max_iter)
    }

    pub fn with_power(base_lr: f64, momentum: f64, power: f64, max_iter: usize) -> Result<Self> {
        if !(base_lr > 0.0) || !base_lr.is_finite() {
            return Err(Error::InvalidArgument(format!("base_lr must be positive, got {base_lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum must be in [0, 1), got {momentum}")));
        }
        if !(power >= 0.0) {
            return Err(Error::InvalidArgument(format!("power must be nonnegative, got {power}")));
        }
        if max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be positive".into()));
        }
        Ok(SgdOptimizer {
            base_lr,
            momentum,
            power,
            max_iter,
            velocity: Vec::new(),
        })
    }

    pub fn learning_rate(&self, step: usize) -> Result<f64> {
        if step >= self.max_iter {
            return Err(Error::ScheduleExhausted {
                step,
                max_iter: self.max_iter,
            });
        }
        Ok(self.base_lr * (1.0 - step as f64 / self.max_iter as f64).powf(self.power))
    }

    /// `v ← m·v + g`, `p ← p − lr·v`. Returns the learning rate used.
    pub fn step(&mut self, net: &mut PixelNet, grads: &NetGrads, step: usize) -> Result<f64> {
        let lr = self.learning_rate(step)?;
        let params = net.params_mut();
        if params.len() != grads.tensors.len()
            || params.iter().zip(&grads.tensors).any(|(p, g)| p.len() != g.len())
        {
            return Err(Error::shape("gradients do not match the network parameters"));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.tensors.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        for ((p, g), v) in params.into_iter().zip(&grads.tensors).zip(&mut self.velocity) {
            for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= lr * *vi;
            }
        }
        net.clear_cache();
        Ok(lr)
    }
}
