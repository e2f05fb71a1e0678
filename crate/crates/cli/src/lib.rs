//! `fakd` command-line driver: verification campaigns, distillation runs,
//! hyper-parameter sweeps and per-class improvement reports.
//!
//! Exit codes: 0 success, 1 failed check or run, 2 usage or config error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use fakd_core::campaign::{run_campaign, CampaignReport};
use fakd_core::config::{ExperimentConfig, StudentVariant};
use fakd_core::harness::{per_class_improvement_report, run_experiment, run_sweep, ImprovementReport, ResultRow};
use fakd_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "fakd", version, about = "Feature-augmented knowledge distillation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML configuration file.
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Output directory (overrides `output_dir`).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Validate the configuration and print the plan without running it.
    #[arg(long)]
    pub dry_run: bool,
    /// Worker threads (overrides `jobs`; 0 = all cores).
    #[arg(long, value_name = "N")]
    pub jobs: Option<usize>,
    /// Run a single seed instead of the configured list.
    #[arg(long, value_name = "K")]
    pub seed_override: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Lambda0,
    Tau,
    Weight,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check bounds, reductions, gradients, covariance streaming and
    /// monotonicity against their oracles; writes `bound_report.csv`.
    Verify(CommonArgs),
    /// Train teachers and every student variant; writes `results.csv` and
    /// `summary.txt`.
    Distill(CommonArgs),
    /// One experiment per value of a hyper-parameter; writes
    /// `sweep_results.csv` and `improvement_report.csv`.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
    },
    /// Per-class improvement table from an existing results CSV.
    Report {
        /// Results CSV written by `distill` or `sweep`.
        #[arg(long, value_name = "PATH")]
        results: PathBuf,
        /// Output directory; defaults to the directory of the results file.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

/// Error with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn failure(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_FAILURE,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidConfig { .. } | Error::Parse(_) | Error::InvalidTaskSpec(_) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses and validates a TOML configuration. Unknown keys and invalid
/// values are usage errors.
pub fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: ExperimentConfig = toml::from_str(&text)
        .map_err(|e| CliError::from(Error::config(path.display().to_string(), e.to_string())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn prepare(common: &CommonArgs) -> CliResult<(ExperimentConfig, PathBuf)> {
    let mut cfg = load_config(&common.config)?;
    if let Some(jobs) = common.jobs {
        cfg.jobs = jobs;
    }
    if let Some(seed) = common.seed_override {
        cfg = cfg.with_seed_override(seed);
        cfg.verify.seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    Ok((cfg, out))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::failure(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::failure(format!("cannot write {}: {e}", path.display())))
}

fn csv_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::failure(format!("cannot write {}: {e}", path.display()))
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(ResultRow::HEADER).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(r.record()).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| csv_error(path, e))
}

fn parse_opt(field: &str, what: &str) -> CliResult<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| CliError::usage(format!("bad {what} value `{field}`")))
}

/// Reads a results CSV. Rows are grouped by variant, or by variant and
/// `(lambda0, tau)` when one variant appears with several settings.
pub fn read_results_csv(path: &Path) -> CliResult<Vec<ResultRow>> {
    let mut rdr =
        csv::Reader::from_path(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| CliError::usage(e.to_string()))?.clone();
    if headers.iter().ne(ResultRow::HEADER) {
        return Err(CliError::usage(format!(
            "{} does not have the results header {}",
            path.display(),
            ResultRow::HEADER.join(",")
        )));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::usage(e.to_string()))?;
        let bad = |what: &str| CliError::usage(format!("bad {what} in {}: {:?}", path.display(), rec));
        let variant: StudentVariant = rec[2].parse().map_err(|_| bad("variant"))?;
        let per_class_iou = if rec[8].is_empty() {
            Vec::new()
        } else {
            rec[8].split(';').map(str::parse).collect::<Result<Vec<f64>, _>>().map_err(|_| bad("per_class_iou"))?
        };
        rows.push(ResultRow {
            task_id: rec[0].to_string(),
            seed: rec[1].parse().map_err(|_| bad("seed"))?,
            variant,
            group: variant.name().to_string(),
            lambda0: parse_opt(&rec[3], "lambda0")?,
            tau: parse_opt(&rec[4], "tau")?,
            steps: rec[5].parse().map_err(|_| bad("steps"))?,
            miou: rec[6].parse().map_err(|_| bad("mIoU"))?,
            macc: rec[7].parse().map_err(|_| bad("mAcc"))?,
            per_class_iou,
            wall_time_s: parse_opt(&rec[9], "wall_time_s")?,
        });
    }
    let settings = |r: &ResultRow| (r.lambda0.map(f64::to_bits), r.tau.map(f64::to_bits));
    let labels: Vec<String> = rows
        .iter()
        .map(|r| {
            let several = rows
                .iter()
                .any(|o| o.variant == r.variant && settings(o) != settings(r));
            if several && r.variant != StudentVariant::NoDistill {
                let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x}"));
                format!("{}[lambda0={},tau={}]", r.variant, fmt(r.lambda0), fmt(r.tau))
            } else {
                r.variant.name().to_string()
            }
        })
        .collect();
    for (r, l) in rows.iter_mut().zip(labels) {
        r.group = l;
    }
    let mut seen = std::collections::BTreeSet::new();
    for r in &rows {
        if r.variant != StudentVariant::NoDistill && !seen.insert((r.group.clone(), r.seed)) {
            return Err(CliError::from(Error::InconsistentResults(format!(
                "`{}` seed {} appears more than once; rows differing only in loss weight cannot be told apart",
                r.group, r.seed
            ))));
        }
    }
    Ok(rows)
}

/// Mean and sample standard deviation.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Variant comparison table: mean ± std over seeds, and the gain over the
/// no-distillation student when present.
pub fn summary_table(rows: &[ResultRow]) -> String {
    let mut groups: Vec<&str> = Vec::new();
    for r in rows {
        if !groups.contains(&r.group.as_str()) {
            groups.push(&r.group);
        }
    }
    let baseline: Vec<f64> = rows
        .iter()
        .filter(|r| r.variant == StudentVariant::NoDistill)
        .map(|r| r.miou)
        .collect();
    let base_mean = (!baseline.is_empty()).then(|| mean_std(&baseline).0);
    let width = groups.iter().map(|g| g.len()).max().unwrap_or(7).max(7);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>5}  {:>16}  {:>16}  {:>8}",
        "variant", "seeds", "mIoU (%)", "mAcc (%)", "ΔmIoU"
    );
    for g in groups {
        let sel: Vec<&ResultRow> = rows.iter().filter(|r| r.group == g).collect();
        let (mi, si) = mean_std(&sel.iter().map(|r| r.miou).collect::<Vec<_>>());
        let (ma, sa) = mean_std(&sel.iter().map(|r| r.macc).collect::<Vec<_>>());
        let delta = base_mean.map_or("-".to_string(), |b| format!("{:+.2}", 100.0 * (mi - b)));
        let _ = writeln!(
            out,
            "{:<width$}  {:>5}  {:>7.2} ± {:<6.2}  {:>7.2} ± {:<6.2}  {:>8}",
            g,
            sel.len(),
            100.0 * mi,
            100.0 * si,
            100.0 * ma,
            100.0 * sa,
            delta
        );
    }
    out
}

pub fn write_improvement_csv(path: &Path, report: &ImprovementReport) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["class".to_string(), "baseline_iou".to_string()];
    header.extend(report.groups.iter().map(|g| format!("delta_{g}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for r in &report.rows {
        let mut rec = vec![r.class.to_string(), format!("{:?}", r.baseline_iou)];
        rec.extend(r.deltas.iter().map(|d| format!("{d:?}")));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| csv_error(path, e))
}

pub fn improvement_table(report: &ImprovementReport) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:>5}  {:>8}", "class", "baseline");
    for g in &report.groups {
        let _ = write!(out, "  {g:>12}");
    }
    out.push('\n');
    for r in &report.rows {
        let _ = write!(out, "{:>5}  {:>8.4}", r.class, r.baseline_iou);
        for d in &r.deltas {
            let _ = write!(out, "  {:>+12.4}", d);
        }
        out.push('\n');
    }
    out
}

fn plan(cfg: &ExperimentConfig, out: &Path, what: &str) -> String {
    let variants: Vec<&str> = cfg.distill.variants.iter().map(|v| v.name()).collect();
    format!(
        "plan: {what}\n  task_id: {}\n  seeds: {:?}\n  variants: {}\n  teacher: {:?}, {} steps\n  student: {:?}, {} steps\n  \
         lambda0: {}, tau_pd: {}, tau_cwd: {}, weight_pd: {}, weight_cwd: {}\n  jobs: {}\n  output: {}\n",
        cfg.task_id,
        cfg.seeds,
        variants.join(", "),
        cfg.teacher.model,
        cfg.teacher.steps,
        cfg.student.model,
        cfg.student.steps,
        cfg.distill.lambda0,
        cfg.distill.tau_pd,
        cfg.distill.tau_cwd,
        cfg.distill.weight_pd,
        cfg.distill.weight_cwd,
        cfg.jobs,
        out.display()
    )
}

fn campaign_summary(report: &CampaignReport) -> String {
    let mut out = String::new();
    for c in &report.checks {
        let _ = writeln!(
            out,
            "{:<13} {:>6} cases  worst {:>12.4e}  {}",
            c.name,
            c.cases,
            c.worst,
            if c.passed() { "PASS" } else { "FAIL" }
        );
    }
    out
}

pub fn cmd_verify(common: &CommonArgs) -> CliResult<i32> {
    let (cfg, out) = prepare(common)?;
    let v = &cfg.verify;
    if common.dry_run {
        print!(
            "plan: verify\n  seed: {}\n  bound cells: 2 variants x {} lambdas x {} taus x {} modes, {} random + {} stress instances, {} draws\n  \
             variance_denominator: {:?}\n  output: {}\n",
            v.seed,
            v.lambdas.len(),
            v.taus.len(),
            v.diagonal_modes.len(),
            v.bound_instances,
            v.stress_instances,
            v.mc_samples,
            v.variance_denominator,
            out.display()
        );
        return Ok(EXIT_OK);
    }
    let report = run_campaign(v)?;
    create_dir(&out)?;
    let path = out.join("bound_report.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    for row in &report.bound_rows {
        w.serialize(row).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| csv_error(&path, e))?;
    let summary = campaign_summary(&report);
    print!("{summary}");
    write_file(&out.join("verify_summary.txt"), &summary)?;
    let failures: Vec<String> = report
        .checks
        .iter()
        .flat_map(|c| c.failures.iter().map(move |f| format!("[{}] {f}", c.name)))
        .collect();
    write_file(&out.join("verify_failures.txt"), &failures.iter().map(|f| format!("{f}\n")).collect::<String>())?;
    if report.all_passed() {
        Ok(EXIT_OK)
    } else {
        eprintln!("{} failing case(s); reproduction details:", failures.len());
        for f in failures.iter().take(20) {
            eprintln!("  {f}");
        }
        if failures.len() > 20 {
            eprintln!("  ... see {}", out.join("verify_failures.txt").display());
        }
        Ok(EXIT_FAILURE)
    }
}

pub fn cmd_distill(common: &CommonArgs) -> CliResult<i32> {
    let (cfg, out) = prepare(common)?;
    if common.dry_run {
        print!("{}", plan(&cfg, &out, "distill"));
        println!("  rows: {}", cfg.seeds.len() * cfg.distill.variants.len());
        return Ok(EXIT_OK);
    }
    let report = run_experiment(&cfg)?;
    create_dir(&out)?;
    write_results_csv(&out.join("results.csv"), &report.rows)?;
    let mut summary = summary_table(&report.rows);
    for t in &report.teachers {
        let _ = writeln!(
            summary,
            "teacher seed {}: train mIoU {:.2}, val mIoU {:.2}",
            t.seed,
            100.0 * t.train_miou,
            100.0 * t.val_miou
        );
    }
    print!("{summary}");
    write_file(&out.join("summary.txt"), &summary)?;
    Ok(EXIT_OK)
}

fn apply_sweep(cfg: &mut ExperimentConfig, param: SweepParam, value: f64) {
    match param {
        SweepParam::Lambda0 => cfg.distill.lambda0 = value,
        SweepParam::Tau => {
            cfg.distill.tau_pd = value;
            cfg.distill.tau_cwd = value;
        }
        SweepParam::Weight => {
            cfg.distill.weight_pd = value;
            cfg.distill.weight_cwd = value;
        }
    }
}

fn param_name(param: SweepParam) -> &'static str {
    match param {
        SweepParam::Lambda0 => "lambda0",
        SweepParam::Tau => "tau",
        SweepParam::Weight => "weight",
    }
}

pub fn cmd_sweep(common: &CommonArgs, param: SweepParam, values: &[f64]) -> CliResult<i32> {
    if values.is_empty() {
        return Err(CliError::usage("sweep needs at least one value (--values a,b,...)"));
    }
    let (base, out) = prepare(common)?;
    let name = param_name(param);
    let mut configs = Vec::with_capacity(values.len());
    for &v in values {
        let mut cfg = base.clone();
        apply_sweep(&mut cfg, param, v);
        cfg.validate().map_err(|e| match e {
            Error::InvalidConfig { path, message } => {
                CliError::usage(format!("invalid-config: {name}={v} makes {path} invalid: {message}"))
            }
            other => CliError::from(other),
        })?;
        configs.push((v, cfg));
    }
    if common.dry_run {
        print!("{}", plan(&base, &out, "sweep"));
        println!("  sweep {name}: {values:?} ({} result blocks)", values.len());
        return Ok(EXIT_OK);
    }
    let cfgs: Vec<ExperimentConfig> = configs.iter().map(|(_, c)| c.clone()).collect();
    let reports = run_sweep(&cfgs)?;
    let mut rows = Vec::new();
    for ((v, _), report) in configs.iter().zip(reports) {
        for mut r in report.rows {
            if r.variant != StudentVariant::NoDistill {
                r.group = format!("{}@{name}={v}", r.variant);
            }
            rows.push(r);
        }
    }
    create_dir(&out)?;
    write_results_csv(&out.join("sweep_results.csv"), &rows)?;
    let improvement = per_class_improvement_report(&rows)?;
    write_improvement_csv(&out.join("improvement_report.csv"), &improvement)?;
    let text = format!("{}\n{}", summary_table(&rows), improvement_table(&improvement));
    print!("{text}");
    write_file(&out.join("sweep_summary.txt"), &text)?;
    Ok(EXIT_OK)
}

pub fn cmd_report(results: &Path, out: Option<&Path>) -> CliResult<i32> {
    let rows = read_results_csv(results)?;
    let report = per_class_improvement_report(&rows)?;
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| results.parent().map(Path::to_path_buf).unwrap_or_default());
    if !dir.as_os_str().is_empty() {
        create_dir(&dir)?;
    }
    write_improvement_csv(&dir.join("improvement_report.csv"), &report)?;
    print!("{}\n{}", summary_table(&rows), improvement_table(&report));
    Ok(EXIT_OK)
}

/// Runs a parsed command and returns its exit code, printing errors.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Verify(c) => cmd_verify(c),
        Command::Distill(c) => cmd_distill(c),
        Command::Sweep { common, param, values } => cmd_sweep(common, *param, values),
        Command::Report { results, out } => cmd_report(results, out.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
