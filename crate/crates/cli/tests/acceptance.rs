//! Acceptance suite: one test per criterion, named `criterion_NN_*`, so the
//! test runner prints one pass/fail line per criterion. Each test also prints
//! a `criterion N: PASS|FAIL ...` summary line with the measured numbers
//! (visible with `--nocapture` or on failure).
//!
//! The desk-scale reproductions (7–9) read the shipped configs in `configs/`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use fakd_cli::load_config;
use fakd_core::campaign::{
    check_bounds, check_covariance, check_gradients, check_mgf, check_monotonicity, check_reductions, CheckResult,
};
use fakd_core::config::{ExperimentConfig, StudentVariant, VerifyConfig};
use fakd_core::harness::{mean_miou_by_group, run_experiment, run_sweep};
use fakd_core::losses::{ClassifierHead, DiagonalMode};
use fakd_core::metrics::{evaluate, evaluate_predictions, ConfusionMatrix, EvalResult};
use fakd_core::model::Extractor;
use fakd_core::data::{Dataset, Image};
use fakd_core::{Mat, PixelNet};

const SWEEP_LAMBDAS: [f64; 4] = [0.5, 1.0, 1.5, 2.5];

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn reference_config() -> ExperimentConfig {
    load_config(&configs_dir().join("reference.toml")).unwrap_or_else(|e| panic!("{}", e.message))
}

/// Prints the criterion line and fails the test when `ok` is false.
fn verdict(n: u32, ok: bool, detail: String) {
    let line = format!("criterion {n}: {} {detail}", if ok { "PASS" } else { "FAIL" });
    println!("{line}");
    assert!(ok, "{line}");
}

fn within(elapsed: Duration, limit_s: u64) -> (bool, String) {
    (elapsed.as_secs() < limit_s, format!("runtime {:.1}s (limit {limit_s}s)", elapsed.as_secs_f64()))
}

fn check_line(r: &CheckResult) -> String {
    let first = r.failures.first().map(|f| format!("; first failure: {f}")).unwrap_or_default();
    format!("{} cases, worst {:e}, {} failures{first}", r.cases, r.worst, r.failures.len())
}

/// The campaign settings pinned by the acceptance criteria.
fn verify_config() -> VerifyConfig {
    let cfg = VerifyConfig::default();
    assert_eq!(cfg.reduction_instances, 100);
    assert_eq!(cfg.bound_instances, 50);
    assert_eq!(cfg.mc_samples, 10_000);
    assert_eq!(cfg.lambdas, vec![0.25, 1.0]);
    assert_eq!(cfg.taus, vec![1.0, 4.0]);
    assert_eq!(cfg.diagonal_modes, vec![DiagonalMode::PaperForm, DiagonalMode::ExactDiagonal]);
    assert_eq!((cfg.mgf_instances, cfg.mgf_samples), (20, 1_000_000));
    assert_eq!(cfg.gradient_instances, 20);
    assert_eq!(cfg.covariance_partitions, 50);
    assert_eq!(cfg.monotonicity_instances, 50);
    assert_eq!(cfg.stderr_band, 3.0);
    cfg
}

#[test]
fn criterion_01_reduction_identities() {
    let start = Instant::now();
    let r = check_reductions(&verify_config()).unwrap();
    let (fast, time) = within(start.elapsed(), 10);
    // λ = 0 and Σ = 0 cases for ≥ 100 instances per augmented variant
    let enough = r.cases >= 2 * 100;
    verdict(1, r.passed() && fast && enough, format!("{}; {time}", check_line(&r)));
}

#[test]
fn criterion_02_upper_bound_holds() {
    let cfg = verify_config();
    let start = Instant::now();
    let (r, rows) = check_bounds(&cfg).unwrap();
    let (fast, time) = within(start.elapsed(), 120);
    // 2 variants × 2 λ × 2 τ × 2 modes × 50 random instances at least
    let random_rows = rows.len() - 16 * cfg.stress_instances;
    let enough = random_rows == 16 * 50;
    verdict(2, r.passed() && fast && enough, format!("{}; min margin {:.2} stderr; {time}", check_line(&r), r.worst));
}

#[test]
fn criterion_03_mgf_identity() {
    let start = Instant::now();
    let r = check_mgf(&verify_config()).unwrap();
    let (fast, time) = within(start.elapsed(), 60);
    verdict(3, r.passed() && fast && r.cases == 40, format!("{}; {time}", check_line(&r)));
}

#[test]
fn criterion_04_gradients() {
    let start = Instant::now();
    let r = check_gradients(&verify_config()).unwrap();
    let (fast, time) = within(start.elapsed(), 60);
    // four losses and two architectures, 20 instances each
    verdict(4, r.passed() && fast && r.cases == 6 * 20, format!("{}; {time}", check_line(&r)));
}

#[test]
fn criterion_05_covariance_streaming() {
    let start = Instant::now();
    let r = check_covariance(&verify_config()).unwrap();
    let (fast, time) = within(start.elapsed(), 30);
    verdict(5, r.passed() && fast && r.cases == 50, format!("{}; {time}", check_line(&r)));
}

#[test]
fn criterion_06_monotone_in_lambda() {
    let start = Instant::now();
    let r = check_monotonicity(&verify_config()).unwrap();
    let (fast, time) = within(start.elapsed(), 30);
    verdict(6, r.passed() && fast && r.cases >= 2 * 50, format!("{}; {time}", check_line(&r)));
}

#[test]
fn criterion_07_augmentation_improves_distillation() {
    let cfg = reference_config();
    assert_eq!(cfg.seeds.len(), 5);
    assert_eq!(cfg.distill.variants, StudentVariant::ALL.to_vec());
    let start = Instant::now();
    let report = run_experiment(&cfg).unwrap();
    let (fast, time) = within(start.elapsed(), 15 * 60);
    let means = mean_miou_by_group(&report.rows);
    let m = |v: StudentVariant| means.iter().find(|(g, _)| g == v.name()).map(|(_, x)| *x).unwrap();
    let base = m(StudentVariant::NoDistill);
    let ok_pd = m(StudentVariant::AugPd) >= m(StudentVariant::Pd);
    let ok_cwd = m(StudentVariant::AugCwd) >= m(StudentVariant::Cwd);
    let ok_base = [StudentVariant::Pd, StudentVariant::AugPd, StudentVariant::Cwd, StudentVariant::AugCwd]
        .iter()
        .all(|&v| m(v) >= base);
    let table: Vec<String> = means.iter().map(|(g, x)| format!("{g}={x:.4}")).collect();
    verdict(
        7,
        ok_pd && ok_cwd && ok_base && fast,
        format!(
            "mean mIoU {}; aug_pd>=pd {ok_pd}, aug_cwd>=cwd {ok_cwd}, distilled>=no_distill {ok_base}; {time}",
            table.join(" ")
        ),
    );
}

#[test]
fn criterion_08_large_lambda_is_worst() {
    let base = load_config(&configs_dir().join("lambda_sweep.toml")).unwrap_or_else(|e| panic!("{}", e.message));
    let cfgs: Vec<ExperimentConfig> = SWEEP_LAMBDAS
        .iter()
        .map(|&l| {
            let mut c = base.clone();
            c.distill.lambda0 = l;
            c
        })
        .collect();
    let start = Instant::now();
    let reports = run_sweep(&cfgs).unwrap();
    let (fast, time) = within(start.elapsed(), 30 * 60);
    let means: Vec<f64> = reports
        .iter()
        .map(|r| {
            let aug: Vec<f64> = r.rows.iter().filter(|row| row.variant == StudentVariant::AugCwd).map(|row| row.miou).collect();
            assert_eq!(aug.len(), base.seeds.len());
            aug.iter().sum::<f64>() / aug.len() as f64
        })
        .collect();
    let last = means[means.len() - 1];
    let ok = means[..means.len() - 1].iter().all(|&m| m > last);
    let table: Vec<String> = SWEEP_LAMBDAS.iter().zip(&means).map(|(l, m)| format!("{l}={m:.4}")).collect();
    verdict(8, ok && fast, format!("aug_cwd mean mIoU by lambda0 {}; {time}", table.join(" ")));
}

#[test]
fn criterion_09_distill_is_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = configs_dir().join("reference.toml");
    let start = Instant::now();
    let mut outputs = Vec::new();
    for (run, jobs) in [("a", "1"), ("b", "2")] {
        let out = dir.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_fakd"))
            .args(["distill", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .args(["--seed-override", "0", "--jobs", jobs])
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        outputs.push(std::fs::read(out.join("results.csv")).unwrap());
    }
    let (fast, time) = within(start.elapsed(), 5 * 60);
    let same = outputs[0] == outputs[1];
    verdict(9, same && fast, format!("results.csv identical: {same} ({} bytes); {time}", outputs[0].len()));
}

fn identity_net(classes: usize) -> PixelNet {
    let head = ClassifierHead::new(Mat::identity(classes), vec![0.0; classes]).unwrap();
    PixelNet::from_parts(classes, Extractor::Identity, head).unwrap()
}

/// One-hot pixels so that an identity network predicts `pred`.
fn dataset(classes: usize, truth: &[usize], pred: &[usize]) -> Dataset {
    Dataset {
        num_classes: classes,
        images: vec![Image {
            pixels: Mat::from_fn(pred.len(), classes, |i, k| if pred[i] == k { 1.0 } else { 0.0 }),
            labels: truth.to_vec(),
        }],
    }
}

fn pairs_from_confusion(rows: &[Vec<u64>]) -> (Vec<usize>, Vec<usize>) {
    let (mut truth, mut pred) = (Vec::new(), Vec::new());
    for (t, row) in rows.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            truth.extend(std::iter::repeat_n(t, n as usize));
            pred.extend(std::iter::repeat_n(p, n as usize));
        }
    }
    (truth, pred)
}

#[test]
fn criterion_10_metrics_match_hand_computation() {
    let mut checks = Vec::new();

    // predictions equal labels
    let truth = [0, 1, 2, 2, 1, 0, 2];
    let r = evaluate(&identity_net(3), &dataset(3, &truth, &truth)).unwrap();
    checks.push(("perfect", r.miou == 1.0 && r.macc == 1.0));

    // confusion [[50, 50], [0, 100]]: IoU 50/100 and 100/150, recalls 0.5 and 1
    let confusion = vec![vec![50, 50], vec![0, 100]];
    let (truth, pred) = pairs_from_confusion(&confusion);
    let r = evaluate(&identity_net(2), &dataset(2, &truth, &pred)).unwrap();
    let expect_iou = [50.0 / 100.0, 100.0 / 150.0];
    let ok = r.per_class_iou == expect_iou
        && r.miou == (expect_iou[0] + expect_iou[1]) / 2.0
        && r.macc == (0.5 + 1.0) / 2.0
        && r == EvalResult::from_confusion(ConfusionMatrix::from_rows(&confusion).unwrap());
    checks.push(("binary [[50,50],[0,100]]", ok));

    // no prediction ever right
    let r = evaluate_predictions(3, &[0, 1, 2, 0], &[1, 2, 0, 2]).unwrap();
    checks.push(("empty intersection", r.miou == 0.0 && r.macc == 0.0));

    // three classes with one absent from truth and prediction: excluded from the mean
    let confusion = vec![vec![3, 1, 0], vec![2, 4, 0], vec![0, 0, 0]];
    let r = EvalResult::from_confusion(ConfusionMatrix::from_rows(&confusion).unwrap());
    let iou = [3.0 / 6.0, 4.0 / 7.0];
    let ok = r.per_class_iou[..2] == iou
        && r.per_class_iou[2].is_nan()
        && r.miou == (iou[0] + iou[1]) / 2.0
        && r.macc == (3.0 / 4.0 + 4.0 / 6.0) / 2.0;
    checks.push(("absent class", ok));

    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    verdict(10, failed.is_empty(), format!("{} constructed cases, failing: {failed:?}", checks.len()));
}
