use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
task_id = "tiny"
seeds = [0, 1]

[task]
num_classes = 3
input_dim = 4
image_side = 6
regions_per_image = 3

[data]
train_images = 4
val_images = 2

[teacher]
steps = 30
model = { kind = "mlp", hidden = 8, feature_dim = 4 }

[student]
steps = 10
batch_images = 2
model = { kind = "linear", feature_dim = 3 }
"#;

const QUICK_VERIFY: &str = r#"
[verify]
bound_instances = 3
stress_instances = 2
mc_samples = 2000
reduction_instances = 5
mgf_instances = 2
mgf_samples = 20000
gradient_instances = 2
covariance_partitions = 4
monotonicity_instances = 4
"#;

fn fakd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fakd")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", &format!("{TINY}\n[distill]\nlamda0 = 1.0\n"));
    let o = fakd(&["distill", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lamda0"), "{}", stderr(&o));
}

#[test]
fn invalid_value_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", &format!("{TINY}\n[distill]\ntau_cwd = -1.0\n"));
    let o = fakd(&["verify", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("distill.tau_cwd"), "{}", stderr(&o));
    let o = fakd(&["distill", "--config", s(&dir.path().join("missing.toml"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn dry_run_validates_without_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let out = dir.path().join("out");
    let o = fakd(&["distill", "--config", s(&cfg), "--out", s(&out), "--dry-run"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("rows: 10"));
    assert!(!out.exists());
}

#[test]
fn distill_writes_one_row_per_seed_and_variant_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = fakd(&["distill", "--config", s(&cfg), "--out", s(&a)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = fakd(&["distill", "--config", s(&cfg), "--out", s(&b), "--jobs", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv_a = std::fs::read(a.join("results.csv")).unwrap();
    assert_eq!(csv_a, std::fs::read(b.join("results.csv")).unwrap());
    let text = String::from_utf8(csv_a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "task_id,seed,variant,lambda0,tau,steps,mIoU,mAcc,per_class_iou,wall_time_s");
    assert_eq!(lines.len(), 1 + 2 * 5);
    assert!(a.join("summary.txt").exists());

    let o = fakd(&["report", "--results", s(&a.join("results.csv"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = std::fs::read_to_string(a.join("improvement_report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 3);
    assert!(report.starts_with("class,baseline_iou,delta_pd,delta_aug_pd,delta_cwd,delta_aug_cwd"));
}

#[test]
fn seed_override_runs_a_single_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "one.toml",
        &TINY.replace("seeds = [0, 1]", "seeds = [0, 1]\n[distill]\nvariants = [\"no_distill\"]\n"),
    );
    let o = fakd(&["distill", "--config", s(&cfg), "--out", s(dir.path()), "--seed-override", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("tiny,7,no_distill,,,10,"));
}

#[test]
fn default_style_campaign_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "verify.toml", QUICK_VERIFY);
    let o = fakd(&["verify", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    let report = std::fs::read_to_string(dir.path().join("bound_report.csv")).unwrap();
    assert!(report.starts_with("variant,seed,M,A,C,lambda,tau,mode,closed_form,mc_mean,mc_stderr,margin,holds"));
    // 2 variants × 2 λ × 2 τ × 2 modes × 5 instances
    assert_eq!(report.lines().count(), 1 + 80);
}

#[test]
fn loosened_bound_below_unit_temperature_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{QUICK_VERIFY}variance_denominator = \"tau\"\ntaus = [0.5]\n");
    let cfg = write_config(dir.path(), "loose.toml", &text);
    let o = fakd(&["verify", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1), "{}{}", stdout(&o), stderr(&o));
    assert!(stderr(&o).contains("aug_cwd"));
    let failures = std::fs::read_to_string(dir.path().join("verify_failures.txt")).unwrap();
    assert!(failures.contains("[bound] aug_cwd") && failures.contains("tau=0.5"));
    let report = std::fs::read_to_string(dir.path().join("bound_report.csv")).unwrap();
    assert!(report.lines().any(|l| l.starts_with("aug_cwd") && l.ends_with("false")));
}

#[test]
fn lambda_sweep_feeds_the_improvement_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "sweep.toml",
        &TINY.replace("seeds = [0, 1]", "seeds = [0]\n[distill]\nvariants = [\"no_distill\", \"aug_cwd\"]\n"),
    );
    let o = fakd(&[
        "sweep", "--config", s(&cfg), "--out", s(dir.path()), "--param", "lambda0", "--values", "0.5,1.0,1.5,2.5",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let merged = std::fs::read_to_string(dir.path().join("sweep_results.csv")).unwrap();
    assert_eq!(merged.lines().count(), 1 + 4 * 2);
    let report = std::fs::read_to_string(dir.path().join("improvement_report.csv")).unwrap();
    let header = report.lines().next().unwrap();
    for v in ["0.5", "1", "1.5", "2.5"] {
        assert!(header.contains(&format!("delta_aug_cwd@lambda0={v}")), "{header}");
    }
    assert_eq!(report.lines().count(), 1 + 3);

    // the merged CSV can be re-read: aug_cwd rows are told apart by lambda0
    let o = fakd(&["report", "--results", s(&dir.path().join("sweep_results.csv")), "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let again = std::fs::read_to_string(dir.path().join("r/improvement_report.csv")).unwrap();
    assert!(again.lines().next().unwrap().contains("aug_cwd[lambda0=2.5,tau=4]"));
}

#[test]
fn sweep_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let o = fakd(&["sweep", "--config", s(&cfg), "--param", "lambda0", "--values"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = fakd(&["sweep", "--config", s(&cfg), "--param", "momentum", "--values", "0.5"]);
    assert_eq!(o.status.code(), Some(2));
    let o = fakd(&["sweep", "--config", s(&cfg), "--param", "tau", "--values", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("tau"));
}

#[test]
fn weight_sweep_rows_cannot_be_regrouped_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "w.toml",
        &TINY.replace("seeds = [0, 1]", "seeds = [0]\n[distill]\nvariants = [\"no_distill\", \"pd\"]\n"),
    );
    let o = fakd(&["sweep", "--config", s(&cfg), "--out", s(dir.path()), "--param", "weight", "--values", "0,1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = fakd(&["report", "--results", s(&dir.path().join("sweep_results.csv"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("inconsistent-results"), "{}", stderr(&o));
}
