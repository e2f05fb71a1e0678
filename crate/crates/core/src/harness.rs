//! Teacher training, teacher→student distillation and ablation runs on
//! synthetic pixel-labeling tasks.
//!
//! One distillation iteration: frozen teacher forward, student forward,
//! per-class covariance update with the current student features and
//! labels, λ from the ramp, `CE + weight · distillation loss` averaged over
//! the images of the batch, backpropagation and one SGD step. The augmented
//! losses use the student head's current weights.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::config::{ExperimentConfig, StudentVariant, TrainConfig};
use crate::data::{Dataset, Split, SyntheticTask, TaskSpec};
use crate::error::{Error, Result};
use crate::losses::{distill_loss, segmentation_ce_loss, DistillLossSpec, FeatureBatch, LossOutput};
use crate::metrics::{evaluate, EvalResult};
use crate::model::{PixelNet, SgdOptimizer};
use crate::numerics::{Mat, Rng};
use crate::stats::{ClassCovarianceStore, LambdaSchedule};

const TEACHER_INIT_STREAM: u64 = 100;
const TEACHER_BATCH_STREAM: u64 = 101;
const STUDENT_INIT_STREAM: u64 = 102;
const STUDENT_BATCH_STREAM: u64 = 103;

/// Training and validation images of one task draw.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    /// Teacher training images.
    pub teacher_train: Dataset,
    /// Student training images, a prefix of `teacher_train`.
    pub train: Dataset,
    pub val: Dataset,
}

impl TaskData {
    /// Teacher and student share the training images.
    pub fn generate(spec: &TaskSpec, train_images: usize, val_images: usize) -> Result<Self> {
        Self::generate_with_teacher_set(spec, train_images, train_images, val_images)
    }

    /// The teacher sees `teacher_images ≥ train_images` training images,
    /// the student only the first `train_images` of them.
    pub fn generate_with_teacher_set(
        spec: &TaskSpec,
        train_images: usize,
        teacher_images: usize,
        val_images: usize,
    ) -> Result<Self> {
        if teacher_images < train_images {
            return Err(Error::InvalidArgument(format!(
                "teacher set of {teacher_images} images is smaller than the student set of {train_images}"
            )));
        }
        let task = SyntheticTask::new(spec.clone())?;
        let teacher_train = task.generate(teacher_images, Split::Train)?;
        let train = Dataset {
            num_classes: teacher_train.num_classes,
            images: teacher_train.images[..train_images].to_vec(),
        };
        Ok(TaskData {
            teacher_train,
            train,
            val: task.generate(val_images, Split::Val)?,
        })
    }
}

/// Draws `count` image indices per step, cycling through shuffled epochs.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n_images: usize, rng: Rng) -> Self {
        BatchSampler {
            rng,
            order: (0..n_images).collect(),
            pos: n_images,
        }
    }

    pub fn next_batch(&mut self, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.pos == self.order.len() {
                for i in (1..self.order.len()).rev() {
                    let j = self.rng.below(i + 1);
                    self.order.swap(i, j);
                }
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn stack_pixels(data: &Dataset, batch: &[usize]) -> Result<(Mat, Vec<usize>, usize)> {
    let m = data.images[batch[0]].pixels.rows();
    let blocks: Vec<&Mat> = batch.iter().map(|&i| &data.images[i].pixels).collect();
    let labels = batch.iter().flat_map(|&i| data.images[i].labels.iter().copied()).collect();
    Ok((Mat::vstack(&blocks)?, labels, m))
}

fn optimizer(cfg: &TrainConfig) -> Result<SgdOptimizer> {
    SgdOptimizer::with_power(cfg.base_lr, cfg.momentum, cfg.poly_power, cfg.steps)
}

/// A trained teacher and its final metrics.
#[derive(Debug, Clone)]
pub struct TrainedTeacher {
    pub net: PixelNet,
    pub train_metrics: EvalResult,
    pub val_metrics: EvalResult,
    /// Mean batch cross-entropy per step.
    pub losses: Vec<f64>,
}

/// Plain supervised training of a network with segmentation cross-entropy.
pub fn train_teacher(data: &TaskData, cfg: &TrainConfig, seed: u64) -> Result<TrainedTeacher> {
    let n_classes = data.teacher_train.num_classes;
    let input_dim = data.teacher_train.images[0].pixels.cols();
    let mut net = PixelNet::init(cfg.model, input_dim, n_classes, &mut Rng::stream(seed, TEACHER_INIT_STREAM))?;
    let mut losses = Vec::with_capacity(cfg.steps);
    if cfg.steps > 0 {
        let mut opt = optimizer(cfg)?;
        let mut sampler = BatchSampler::new(data.teacher_train.images.len(), Rng::stream(seed, TEACHER_BATCH_STREAM));
        for step in 0..cfg.steps {
            let batch = sampler.next_batch(cfg.batch_images);
            let (pixels, labels, _) = stack_pixels(&data.teacher_train, &batch)?;
            let out = net.forward_train(&pixels)?;
            let loss = segmentation_ce_loss(&FeatureBatch::new(out.features), &net.head, &labels)?;
            let grads = net.backward(&loss)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::TrainingDiverged(step));
            }
            opt.step(&mut net, &grads, step)?;
            losses.push(loss.value);
        }
    }
    Ok(TrainedTeacher {
        train_metrics: evaluate(&net, &data.teacher_train)?,
        val_metrics: evaluate(&net, &data.val)?,
        net,
        losses,
    })
}

/// Distillation objective of one student plus its λ ramp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillSetup {
    /// `None` trains with cross-entropy only.
    pub loss: Option<DistillLossSpec>,
    pub weight: f64,
    pub schedule: LambdaSchedule,
}

/// Loss values of one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub segmentation: f64,
    pub distillation: f64,
    pub total: f64,
    pub lambda: f64,
    pub lr: f64,
}

/// One full distillation iteration on the images `batch` of `data`.
///
/// The covariance store is updated with the student's features of this batch
/// before the losses are evaluated. The teacher is only read.
#[allow(clippy::too_many_arguments)]
pub fn distill_step(
    teacher: &PixelNet,
    student: &mut PixelNet,
    data: &Dataset,
    batch: &[usize],
    store: &mut ClassCovarianceStore,
    setup: &DistillSetup,
    step: usize,
    opt: &mut SgdOptimizer,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (pixels, labels, m) = stack_pixels(data, batch)?;
    let out = student.forward_train(&pixels)?;
    store.update(&out.features, &labels)?;
    let lambda = setup.schedule.at(step)?;
    let (a, c) = (student.feature_dim(), student.num_classes());
    let mut total = LossOutput::zeros(pixels.rows(), a, c);
    let inv = 1.0 / batch.len() as f64;
    let (mut seg_sum, mut distill_sum) = (0.0, 0.0);
    for (b, &img) in batch.iter().enumerate() {
        let rows = b * m..(b + 1) * m;
        let image_labels = &labels[rows.clone()];
        let feats = FeatureBatch::with_classes(out.features.row_block(rows.start, rows.end), image_labels.to_vec());
        let mut image_loss = segmentation_ce_loss(&feats, &student.head, image_labels)?;
        seg_sum += image_loss.value;
        if let Some(mut spec) = setup.loss {
            spec.lambda = lambda;
            let teacher_logits = teacher.forward(&data.images[img].pixels)?.logits;
            let d = distill_loss(&spec, &feats, &teacher_logits, &student.head, store)?;
            distill_sum += d.value;
            image_loss.accumulate(&d, setup.weight);
        }
        total.value += inv * image_loss.value;
        for (i, r) in rows.enumerate() {
            for (dst, src) in total.grad_features.row_mut(r).iter_mut().zip(image_loss.grad_features.row(i)) {
                *dst = inv * src;
            }
        }
        total.grad_weights.add_assign_scaled(&image_loss.grad_weights, inv);
        for (dst, src) in total.grad_bias.iter_mut().zip(&image_loss.grad_bias) {
            *dst += inv * src;
        }
    }
    let grads = student.backward(&total)?;
    if !total.is_finite() || !grads.is_finite() {
        return Err(Error::TrainingDiverged(step));
    }
    let lr = opt.step(student, &grads, step)?;
    Ok(StepLosses {
        segmentation: seg_sum * inv,
        distillation: distill_sum * inv,
        total: total.value,
        lambda,
        lr,
    })
}

/// A trained student with its per-step losses and final covariance store.
#[derive(Debug, Clone)]
pub struct StudentRun {
    pub net: PixelNet,
    pub store: ClassCovarianceStore,
    pub losses: Vec<StepLosses>,
    pub val_metrics: EvalResult,
}

/// Trains one student from the seed's shared initialization.
pub fn train_student(
    data: &TaskData,
    teacher: &PixelNet,
    cfg: &ExperimentConfig,
    setup: &DistillSetup,
    seed: u64,
) -> Result<StudentRun> {
    let train = &data.train;
    let input_dim = train.images[0].pixels.cols();
    let mut net = PixelNet::init(
        cfg.student.model,
        input_dim,
        train.num_classes,
        &mut Rng::stream(seed, STUDENT_INIT_STREAM),
    )?;
    let mut store = ClassCovarianceStore::with_mode(train.num_classes, net.feature_dim(), cfg.distill.covariance_mode);
    let mut losses = Vec::with_capacity(cfg.student.steps);
    if cfg.student.steps > 0 {
        let mut opt = optimizer(&cfg.student)?;
        let mut sampler = BatchSampler::new(train.images.len(), Rng::stream(seed, STUDENT_BATCH_STREAM));
        for step in 0..cfg.student.steps {
            let batch = sampler.next_batch(cfg.student.batch_images);
            losses.push(distill_step(teacher, &mut net, train, &batch, &mut store, setup, step, &mut opt)?);
        }
    }
    Ok(StudentRun {
        val_metrics: evaluate(&net, &data.val)?,
        net,
        store,
        losses,
    })
}

/// The loss setup of `variant` under `cfg`.
pub fn variant_setup(cfg: &ExperimentConfig, variant: StudentVariant) -> DistillSetup {
    let d = &cfg.distill;
    let lambda0 = if variant.loss().is_some_and(|l| l.is_augmented()) {
        d.lambda0
    } else {
        0.0
    };
    DistillSetup {
        loss: variant.loss().map(|v| DistillLossSpec {
            variant: v,
            tau: d.tau(variant).unwrap_or(1.0),
            lambda: 0.0,
            diagonal_mode: d.diagonal_mode,
            variance_denominator: d.variance_denominator,
        }),
        weight: d.weight(variant),
        schedule: LambdaSchedule {
            lambda0,
            total_steps: cfg.student.steps.max(1),
            shape: d.ramp,
        },
    }
}

/// One line of the results CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub task_id: String,
    pub seed: u64,
    pub variant: StudentVariant,
    /// Grouping key for reports; the variant name unless a sweep relabels it.
    pub group: String,
    pub lambda0: Option<f64>,
    pub tau: Option<f64>,
    pub steps: usize,
    pub miou: f64,
    pub macc: f64,
    pub per_class_iou: Vec<f64>,
    pub wall_time_s: Option<f64>,
}

impl ResultRow {
    pub const HEADER: [&'static str; 10] = [
        "task_id",
        "seed",
        "variant",
        "lambda0",
        "tau",
        "steps",
        "mIoU",
        "mAcc",
        "per_class_iou",
        "wall_time_s",
    ];

    /// CSV fields in [`ResultRow::HEADER`] order. Floats use the shortest
    /// representation that round-trips.
    pub fn record(&self) -> [String; 10] {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        [
            self.task_id.clone(),
            self.seed.to_string(),
            self.variant.name().to_string(),
            opt(self.lambda0),
            opt(self.tau),
            self.steps.to_string(),
            format!("{:?}", self.miou),
            format!("{:?}", self.macc),
            self.per_class_iou.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(";"),
            opt(self.wall_time_s),
        ]
    }
}

/// Teacher metrics of one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSummary {
    pub seed: u64,
    pub train_miou: f64,
    pub val_miou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    /// Sorted by seed, then by the order of `distill.variants`.
    pub rows: Vec<ResultRow>,
    pub teachers: Vec<TeacherSummary>,
}

/// Runs every variant of every config in `cfgs` for one seed, sharing the
/// task draw and the teacher (the configs agree on both).
fn run_seed(cfgs: &[ExperimentConfig], seed: u64, jobs: usize) -> Result<Vec<(TeacherSummary, Vec<ResultRow>)>> {
    let base = &cfgs[0];
    let spec = TaskSpec { seed, ..base.task.clone() };
    let data = TaskData::generate_with_teacher_set(
        &spec,
        base.data.train_images,
        base.data.teacher_images(),
        base.data.val_images,
    )?;
    let teacher = train_teacher(&data, &base.teacher, seed)?;
    let summary = TeacherSummary {
        seed,
        train_miou: teacher.train_metrics.miou,
        val_miou: teacher.val_metrics.miou,
    };
    let cells: Vec<(usize, StudentVariant)> = cfgs
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.distill.variants.iter().map(move |&v| (i, v)))
        .collect();
    let run_cell = |&(i, variant): &(usize, StudentVariant)| -> Result<ResultRow> {
        let cfg = &cfgs[i];
        let start = Instant::now();
        let setup = variant_setup(cfg, variant);
        let run = train_student(&data, &teacher.net, cfg, &setup, seed)?;
        Ok(ResultRow {
            task_id: cfg.task_id.clone(),
            seed,
            variant,
            group: variant.name().to_string(),
            lambda0: variant.loss().filter(|l| l.is_augmented()).map(|_| cfg.distill.lambda0),
            tau: cfg.distill.tau(variant),
            steps: cfg.student.steps,
            miou: run.val_metrics.miou,
            macc: run.val_metrics.macc,
            per_class_iou: run.val_metrics.per_class_iou,
            wall_time_s: cfg.record_wall_time.then(|| start.elapsed().as_secs_f64()),
        })
    };
    let mut rows = parallel_map(&cells, jobs, run_cell)?.into_iter();
    Ok(cfgs
        .iter()
        .map(|c| (summary.clone(), rows.by_ref().take(c.distill.variants.len()).collect()))
        .collect())
}

/// Maps `f` over `items` on up to `jobs` threads, keeping input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(f).collect())
}

/// Trains one teacher per seed, then every configured student variant from
/// the same initialization, and evaluates all of them on the validation set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    Ok(run_sweep(std::slice::from_ref(cfg))?.remove(0))
}

/// One report per config. The configs may differ only in their `distill`
/// section and `task_id`, so each seed's task and teacher are built once and
/// shared by all of them.
pub fn run_sweep(cfgs: &[ExperimentConfig]) -> Result<Vec<ExperimentReport>> {
    let Some(base) = cfgs.first() else {
        return Err(Error::InvalidArgument("no configs to run".into()));
    };
    for cfg in cfgs {
        cfg.validate()?;
        if cfg.seeds != base.seeds
            || cfg.task != base.task
            || cfg.data != base.data
            || cfg.teacher != base.teacher
            || cfg.student != base.student
        {
            return Err(Error::InvalidArgument(
                "swept configs may only differ in the distill section".into(),
            ));
        }
    }
    let jobs = if base.jobs == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        base.jobs
    };
    // Seeds in parallel; cells inside a seed share the remaining budget.
    let seed_jobs = jobs.min(base.seeds.len()).max(1);
    let inner = (jobs / seed_jobs).max(1);
    let per_seed = parallel_map(&base.seeds, seed_jobs, |&s| run_seed(cfgs, s, inner))?;
    let mut reports: Vec<ExperimentReport> = cfgs
        .iter()
        .map(|_| ExperimentReport {
            rows: Vec::new(),
            teachers: Vec::new(),
        })
        .collect();
    for seed_results in per_seed {
        for (report, (t, rows)) in reports.iter_mut().zip(seed_results) {
            report.teachers.push(t);
            report.rows.extend(rows);
        }
    }
    Ok(reports)
}

/// Mean validation mIoU per report group, in first-appearance order.
pub fn mean_miou_by_group(rows: &[ResultRow]) -> Vec<(String, f64)> {
    let mut order: Vec<String> = Vec::new();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in rows {
        if !sums.contains_key(&r.group) {
            order.push(r.group.clone());
        }
        let e = sums.entry(r.group.clone()).or_insert((0.0, 0));
        e.0 += r.miou;
        e.1 += 1;
    }
    order
        .into_iter()
        .map(|g| {
            let (s, n) = sums[&g];
            (g, s / n as f64)
        })
        .collect()
}

/// Per-class IoU deltas of every group against the no-distillation baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct ImprovementReport {
    /// Compared groups, in first-appearance order.
    pub groups: Vec<String>,
    pub rows: Vec<ImprovementRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImprovementRow {
    pub class: usize,
    /// Seed-averaged IoU of the no-distillation student.
    pub baseline_iou: f64,
    /// `group IoU − baseline IoU`, aligned with [`ImprovementReport::groups`].
    pub deltas: Vec<f64>,
}

fn mean_ignoring_nan(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.filter(|v| !v.is_nan()) {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Per-class improvement table sorted by baseline IoU, hardest class first.
///
/// Per-class IoUs are averaged over seeds (skipping classes absent from a
/// seed's validation set). Classes that are absent everywhere sort last.
pub fn per_class_improvement_report(results: &[ResultRow]) -> Result<ImprovementReport> {
    let bad = |msg: String| Err(Error::InconsistentResults(msg));
    let Some(first) = results.first() else {
        return bad("no results".into());
    };
    let c = first.per_class_iou.len();
    if let Some(r) = results.iter().find(|r| r.per_class_iou.len() != c) {
        return bad(format!(
            "group `{}` seed {} has {} classes, expected {c}",
            r.group,
            r.seed,
            r.per_class_iou.len()
        ));
    }
    let baseline: Vec<&ResultRow> = results.iter().filter(|r| r.variant == StudentVariant::NoDistill).collect();
    if baseline.is_empty() {
        return bad("no no_distill baseline rows".into());
    }
    let mut groups: Vec<String> = Vec::new();
    for r in results.iter().filter(|r| r.variant != StudentVariant::NoDistill) {
        if !groups.contains(&r.group) {
            groups.push(r.group.clone());
        }
    }
    let mut baseline_seeds: Vec<u64> = baseline.iter().map(|r| r.seed).collect();
    baseline_seeds.sort_unstable();
    baseline_seeds.dedup();
    for g in &groups {
        let mut seeds: Vec<u64> = results.iter().filter(|r| &r.group == g).map(|r| r.seed).collect();
        seeds.sort_unstable();
        if seeds != baseline_seeds {
            return bad(format!("group `{g}` seeds {seeds:?} differ from baseline seeds {baseline_seeds:?}"));
        }
    }
    let mut rows: Vec<ImprovementRow> = (0..c)
        .map(|k| {
            let base = mean_ignoring_nan(baseline.iter().map(|r| r.per_class_iou[k]));
            let deltas = groups
                .iter()
                .map(|g| mean_ignoring_nan(results.iter().filter(|r| &r.group == g).map(|r| r.per_class_iou[k])) - base)
                .collect();
            ImprovementRow {
                class: k,
                baseline_iou: base,
                deltas,
            }
        })
        .collect();
    rows.sort_by(|a, b| match (a.baseline_iou.is_nan(), b.baseline_iou.is_nan()) {
        (false, false) => a.baseline_iou.total_cmp(&b.baseline_iou).then(a.class.cmp(&b.class)),
        (x, y) => x.cmp(&y).then(a.class.cmp(&b.class)),
    });
    Ok(ImprovementReport { groups, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ExtractorSpec;

    fn small_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.seeds = vec![3];
        cfg.task.image_side = 6;
        cfg.task.num_classes = 3;
        cfg.task.input_dim = 4;
        cfg.task.regions_per_image = 3;
        cfg.data.train_images = 6;
        cfg.data.val_images = 3;
        cfg.teacher.steps = 40;
        cfg.teacher.model = ExtractorSpec::Mlp {
            hidden: 8,
            feature_dim: 4,
        };
        cfg.student.steps = 12;
        cfg.student.model = ExtractorSpec::Linear { feature_dim: 3 };
        cfg.student.batch_images = 2;
        cfg
    }

    fn row(variant: StudentVariant, seed: u64, ious: &[f64]) -> ResultRow {
        ResultRow {
            task_id: "t".into(),
            seed,
            variant,
            group: variant.name().into(),
            lambda0: None,
            tau: None,
            steps: 1,
            miou: 0.0,
            macc: 0.0,
            per_class_iou: ious.to_vec(),
            wall_time_s: None,
        }
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(5, Rng::new(1));
        let mut epoch = s.next_batch(5);
        epoch.sort_unstable();
        assert_eq!(epoch, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.next_batch(7).len(), 7);
    }

    #[test]
    fn zero_step_teacher_is_initialization() {
        let cfg = small_config();
        let spec = TaskSpec { seed: 3, ..cfg.task.clone() };
        let data = TaskData::generate(&spec, 4, 2).unwrap();
        let mut tcfg = cfg.teacher.clone();
        tcfg.steps = 0;
        let t = train_teacher(&data, &tcfg, 9).unwrap();
        let init = PixelNet::init(tcfg.model, 4, 3, &mut Rng::stream(9, TEACHER_INIT_STREAM)).unwrap();
        assert_eq!(t.net.flat_params(), init.flat_params());
        assert!(t.losses.is_empty());
    }

    #[test]
    fn teacher_training_is_reproducible() {
        let cfg = small_config();
        let data = TaskData::generate(&TaskSpec { seed: 3, ..cfg.task.clone() }, 6, 2).unwrap();
        let a = train_teacher(&data, &cfg.teacher, 1).unwrap();
        let b = train_teacher(&data, &cfg.teacher, 1).unwrap();
        assert_eq!(a.net.flat_params(), b.net.flat_params());
        assert!(a.losses.last().unwrap() < &a.losses[0]);
    }

    #[test]
    fn diverging_teacher_is_reported() {
        let cfg = small_config();
        let data = TaskData::generate(&TaskSpec { seed: 3, ..cfg.task.clone() }, 6, 2).unwrap();
        let mut tcfg = cfg.teacher.clone();
        tcfg.base_lr = 1e6;
        assert!(matches!(train_teacher(&data, &tcfg, 1), Err(Error::TrainingDiverged(_))));
    }

    fn teacher_and_data(cfg: &ExperimentConfig) -> (TaskData, PixelNet) {
        let data = TaskData::generate(&TaskSpec { seed: 3, ..cfg.task.clone() }, 6, 3).unwrap();
        let t = train_teacher(&data, &cfg.teacher, 3).unwrap();
        (data, t.net)
    }

    #[test]
    fn teacher_is_frozen_and_store_matches_feature_stream() {
        let cfg = small_config();
        let (data, teacher) = teacher_and_data(&cfg);
        let before = teacher.to_snapshot();
        let setup = variant_setup(&cfg, StudentVariant::AugCwd);
        let mut student = PixelNet::init(cfg.student.model, 4, 3, &mut Rng::new(5)).unwrap();
        let mut store = ClassCovarianceStore::new(3, 3);
        let mut opt = optimizer(&cfg.student).unwrap();
        let mut sampler = BatchSampler::new(6, Rng::new(6));
        let mut logged = Vec::new();
        for step in 0..cfg.student.steps {
            let batch = sampler.next_batch(2);
            let (pixels, labels, _) = stack_pixels(&data.train, &batch).unwrap();
            logged.push((student.forward(&pixels).unwrap().features, labels));
            distill_step(&teacher, &mut student, &data.train, &batch, &mut store, &setup, step, &mut opt).unwrap();
        }
        assert_eq!(teacher.to_snapshot(), before);
        let mut recomputed = ClassCovarianceStore::new(3, 3);
        let (feats, labels): (Vec<Mat>, Vec<Vec<usize>>) = logged.into_iter().unzip();
        recomputed
            .update(&Mat::vstack(&feats.iter().collect::<Vec<_>>()).unwrap(), &labels.concat())
            .unwrap();
        assert!(store.max_abs_diff(&recomputed).unwrap() <= 1e-10);
    }

    #[test]
    fn zero_weight_matches_plain_training() {
        let cfg = small_config();
        let (data, teacher) = teacher_and_data(&cfg);
        let plain = train_student(&data, &teacher, &cfg, &variant_setup(&cfg, StudentVariant::NoDistill), 3).unwrap();
        for v in [StudentVariant::Pd, StudentVariant::AugCwd] {
            let mut setup = variant_setup(&cfg, v);
            setup.weight = 0.0;
            let run = train_student(&data, &teacher, &cfg, &setup, 3).unwrap();
            assert_eq!(run.net.flat_params(), plain.net.flat_params());
            let a: Vec<f64> = run.losses.iter().map(|l| l.total).collect();
            let b: Vec<f64> = plain.losses.iter().map(|l| l.total).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_lambda_aug_matches_base() {
        let mut cfg = small_config();
        cfg.distill.lambda0 = 0.0;
        let (data, teacher) = teacher_and_data(&cfg);
        for (aug, base) in [
            (StudentVariant::AugCwd, StudentVariant::Cwd),
            (StudentVariant::AugPd, StudentVariant::Pd),
        ] {
            let a = train_student(&data, &teacher, &cfg, &variant_setup(&cfg, aug), 3).unwrap();
            let b = train_student(&data, &teacher, &cfg, &variant_setup(&cfg, base), 3).unwrap();
            let la: Vec<f64> = a.losses.iter().map(|l| l.total).collect();
            let lb: Vec<f64> = b.losses.iter().map(|l| l.total).collect();
            assert_eq!(la, lb, "{aug} vs {base}");
        }
    }

    #[test]
    fn lambda_follows_schedule() {
        let cfg = small_config();
        let (data, teacher) = teacher_and_data(&cfg);
        let setup = variant_setup(&cfg, StudentVariant::AugPd);
        let run = train_student(&data, &teacher, &cfg, &setup, 3).unwrap();
        for (t, l) in run.losses.iter().enumerate() {
            assert_eq!(l.lambda, setup.schedule.at(t).unwrap());
            assert!(l.distillation > 0.0);
        }
        let plain = variant_setup(&cfg, StudentVariant::Cwd);
        assert_eq!(plain.schedule.lambda0, 0.0);
    }

    #[test]
    fn experiment_rows_and_parallel_determinism() {
        let mut cfg = small_config();
        cfg.seeds = vec![1, 2];
        let serial = run_experiment(&cfg).unwrap();
        assert_eq!(serial.rows.len(), 2 * StudentVariant::ALL.len());
        assert_eq!(serial.rows[0].seed, 1);
        assert_eq!(serial.rows[0].variant, StudentVariant::NoDistill);
        cfg.jobs = 4;
        let parallel = run_experiment(&cfg).unwrap();
        assert_eq!(serial, parallel);
        for r in &serial.rows {
            assert!((0.0..=1.0).contains(&r.miou) && (0.0..=1.0).contains(&r.macc));
            assert!(r.wall_time_s.is_none());
        }
    }

    #[test]
    fn sweep_shares_teachers_and_matches_single_runs() {
        let mut cfg = small_config();
        cfg.distill.variants = vec![StudentVariant::NoDistill, StudentVariant::AugPd];
        let mut other = cfg.clone();
        other.distill.lambda0 = 2.0;
        let swept = run_sweep(&[cfg.clone(), other.clone()]).unwrap();
        assert_eq!(swept[0], run_experiment(&cfg).unwrap());
        assert_eq!(swept[1], run_experiment(&other).unwrap());
        assert_ne!(swept[0].rows[1].lambda0, swept[1].rows[1].lambda0);
        let mut bad = cfg.clone();
        bad.teacher.steps += 1;
        assert!(run_sweep(&[cfg, bad]).is_err());
    }

    #[test]
    fn single_no_distill_variant_gives_one_row() {
        let mut cfg = small_config();
        cfg.distill.variants = vec![StudentVariant::NoDistill];
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].record()[2], "no_distill");
        assert_eq!(report.rows[0].record()[3], "");
    }

    #[test]
    fn report_of_identical_variants_is_zero() {
        let ious = [0.9, 0.2, 0.5];
        let rows = vec![
            row(StudentVariant::NoDistill, 0, &ious),
            row(StudentVariant::Pd, 0, &ious),
            row(StudentVariant::AugCwd, 0, &ious),
        ];
        let rep = per_class_improvement_report(&rows).unwrap();
        assert_eq!(rep.rows.len(), 3);
        assert_eq!(rep.rows.iter().map(|r| r.class).collect::<Vec<_>>(), vec![1, 2, 0]);
        assert!(rep.rows.iter().all(|r| r.deltas.iter().all(|&d| d == 0.0)));
    }

    #[test]
    fn report_deltas_from_confusions() {
        use crate::metrics::ConfusionMatrix;
        let iou = |rows: &[Vec<u64>]| EvalResult::from_confusion(ConfusionMatrix::from_rows(rows).unwrap()).per_class_iou;
        // baseline: IoU 0.5, 2/3; distilled: IoU 0.8, 0.9
        let base = iou(&[vec![50, 50], vec![0, 100]]);
        let better = iou(&[vec![80, 20], vec![0, 180]]);
        let rows = vec![row(StudentVariant::NoDistill, 0, &base), row(StudentVariant::AugPd, 0, &better)];
        let rep = per_class_improvement_report(&rows).unwrap();
        assert_eq!(rep.groups, vec!["aug_pd".to_string()]);
        assert_eq!(rep.rows[0].class, 0);
        assert!((rep.rows[0].deltas[0] - (0.8 - 0.5)).abs() < 1e-15);
        assert!((rep.rows[1].deltas[0] - (0.9 - 100.0 / 150.0)).abs() < 1e-15);
    }

    #[test]
    fn report_rejects_mismatches() {
        let rows = vec![row(StudentVariant::NoDistill, 0, &[0.5, 0.5]), row(StudentVariant::Pd, 0, &[0.5])];
        assert!(matches!(per_class_improvement_report(&rows), Err(Error::InconsistentResults(_))));
        let rows = vec![row(StudentVariant::Pd, 0, &[0.5])];
        assert!(matches!(per_class_improvement_report(&rows), Err(Error::InconsistentResults(_))));
        let rows = vec![row(StudentVariant::NoDistill, 0, &[0.5]), row(StudentVariant::Pd, 1, &[0.5])];
        assert!(matches!(per_class_improvement_report(&rows), Err(Error::InconsistentResults(_))));
    }
}
