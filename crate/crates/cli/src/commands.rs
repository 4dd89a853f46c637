//! The subcommands, callable without going through argument parsing.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dualzsl::autodiff::checkpoint::{param_set, read_tensors};
use dualzsl::datagen::{export_benchmark, generate, import_benchmark};
use dualzsl::dual_channel::{TrainHistory, EXTRACTOR};
use dualzsl::eval::{improvement_rate, parse_report_tsv, project_2d, report_table, EvalReport};
use log::{info, warn};

use crate::config::RunConfig;
use crate::pipeline::{
    build_task, run_regime, test_features, write_run, Regime, RunOutput, CHECKPOINT_FILE, HISTORY_FILE,
    PROJECTION_FILE, REPORT_FILE,
};

/// Defaults, then the config file if any, then `key=value` overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = path {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        cfg.apply(&text).with_context(|| format!("in config {}", path.display()))?;
    }
    for o in overrides {
        cfg.override_with(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Where `run` writes the artifacts of one regime and seed.
pub fn run_dir(cfg: &RunConfig, regime: Regime, seed: u64) -> PathBuf {
    cfg.output_dir.join(regime.name()).join(format!("seed-{seed}"))
}

/// Generate the benchmark into the configured directory. Returns a
/// one-line summary.
pub fn cmd_gen(cfg: &RunConfig) -> Result<String> {
    let b = generate(&cfg.gen).context("generating benchmark")?;
    export_benchmark(&b, &cfg.benchmark_dir)
        .with_context(|| format!("writing benchmark to {}", cfg.benchmark_dir.display()))?;
    let s = &b.split;
    Ok(format!(
        "{} classes ({} seen, {} unseen, {} auxiliary), {} samples -> {}",
        b.taxonomy.len(),
        s.seen.len(),
        s.unseen.len(),
        s.aux_low.len() + s.aux_middle.len() + s.aux_high.len(),
        b.samples.labels.len(),
        cfg.benchmark_dir.display()
    ))
}

/// Train and evaluate one regime, write its artifacts into `dir`, and read
/// the report and history back as a format check.
pub fn cmd_run(cfg: &RunConfig, regime: Regime, seed: u64, dir: &Path) -> Result<RunOutput> {
    let b = import_benchmark(&cfg.benchmark_dir)
        .with_context(|| format!("loading benchmark from {}", cfg.benchmark_dir.display()))?;
    let out = run_regime(&b, cfg, regime, seed)?;
    write_run(&out, dir)?;
    let report = fs::read_to_string(dir.join(REPORT_FILE))?;
    parse_report_tsv(&report).context("validating the written report")?;
    TrainHistory::from_tsv(&fs::read_to_string(dir.join(HISTORY_FILE))?).context("validating the written history")?;
    info!(
        "{regime} seed {seed}: As {:.1} Au {:.1} H {:.1}",
        out.report.seen_accuracy, out.report.unseen_accuracy, out.report.harmonic_mean
    );
    Ok(out)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// One row per method. Several runs of a method are merged by the
/// column-wise median.
pub fn merge_reports(dirs: &[PathBuf]) -> Result<Vec<EvalReport>> {
    if dirs.is_empty() {
        bail!("no run directories given");
    }
    let mut groups: Vec<(String, Vec<[f64; 3]>)> = Vec::new();
    for dir in dirs {
        let path = dir.join(REPORT_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("no report in {}", dir.display()))?;
        let rows = parse_report_tsv(&text).with_context(|| format!("bad report in {}", dir.display()))?;
        for (method, a_s, a_u, h) in rows {
            match groups.iter_mut().find(|(m, _)| *m == method) {
                Some((_, v)) => v.push([a_s, a_u, h]),
                None => groups.push((method, vec![[a_s, a_u, h]])),
            }
        }
    }
    // baseline first, the rest in order of appearance
    groups.sort_by_key(|(m, _)| m != Regime::Baseline.name());
    Ok(groups
        .into_iter()
        .map(|(method, rows)| {
            let col = |k: usize| median(rows.iter().map(|r| r[k]).collect());
            EvalReport {
                method,
                per_class: Vec::new(),
                seen_accuracy: col(0),
                unseen_accuracy: col(1),
                harmonic_mean: col(2),
                separability: None,
            }
        })
        .collect())
}

/// Improvement of each method's H over the baseline's, both taken at the
/// one decimal the table prints.
pub fn improvement_rates(reports: &[EvalReport]) -> Result<Vec<(String, f64)>> {
    let Some(base) = reports.iter().find(|r| r.method == Regime::Baseline.name()) else {
        return Ok(Vec::new());
    };
    let base_h = round1(base.harmonic_mean);
    reports
        .iter()
        .filter(|r| r.method != base.method)
        .map(|r| Ok((r.method.clone(), improvement_rate(round1(r.harmonic_mean), base_h)?)))
        .collect()
}

pub fn cmd_report(dirs: &[PathBuf]) -> Result<String> {
    let reports = merge_reports(dirs)?;
    let mut out = report_table(&reports);
    let base_h = reports.iter().find(|r| r.method == Regime::Baseline.name()).map(|r| round1(r.harmonic_mean));
    if base_h == Some(0.0) {
        out.push_str("improvement rates undefined: baseline H is 0.0\n");
        return Ok(out);
    }
    let rates = improvement_rates(&reports)?;
    if rates.is_empty() && reports.len() > 1 {
        warn!("no baseline run among the inputs; improvement rates omitted");
    }
    for (method, rate) in rates {
        out.push_str(&format!("{method} vs baseline: {rate:+.1}%\n"));
    }
    Ok(out)
}

/// Run `regime` once per λ in `grid`. Each run lands in
/// `<output>/sweep/lambda-<λ>`; the returned TSV lists H against λ.
pub fn cmd_sweep_lambda(cfg: &RunConfig, grid: &[f64], regime: Regime, seed: u64) -> Result<String> {
    if grid.is_empty() {
        bail!("empty λ grid");
    }
    let mut out = String::from("lambda\tAs\tAu\tH\n");
    for &lambda in grid {
        let mut c = cfg.clone();
        c.train.lambda = lambda;
        c.validate()?;
        let dir = cfg.output_dir.join("sweep").join(format!("lambda-{lambda}"));
        let r = cmd_run(&c, regime, seed, &dir).with_context(|| format!("λ = {lambda}"))?.report;
        out.push_str(&format!("{lambda}\t{}\t{}\t{}\n", r.seen_accuracy, r.unseen_accuracy, r.harmonic_mean));
    }
    let path = cfg.output_dir.join("sweep").join("sweep.tsv");
    fs::write(&path, &out).with_context(|| format!("writing {}", path.display()))?;
    Ok(out)
}

/// Recompute the test-feature projection from a run's checkpointed
/// extractor and write it to `dest`.
pub fn cmd_project(cfg: &RunConfig, run: &Path, dest: &Path) -> Result<()> {
    let bytes = fs::read(run.join(CHECKPOINT_FILE)).with_context(|| format!("no checkpoint in {}", run.display()))?;
    let tensors = read_tensors(bytes.as_slice()).context("reading checkpoint")?;
    let extractor = param_set(&tensors, EXTRACTOR).context("reading checkpoint")?;
    let b = import_benchmark(&cfg.benchmark_dir)
        .with_context(|| format!("loading benchmark from {}", cfg.benchmark_dir.display()))?;
    let task = build_task(&b, cfg.test_fraction)?;
    let test = test_features(&task, &extractor)?;
    let projection = project_2d(&test.features, &test.labels).context("projection")?;
    let ids = &task.class_ids;
    fs::write(dest, projection.to_tsv(&|c| ids[c].clone())).with_context(|| format!("writing {}", dest.display()))?;
    Ok(())
}

/// Default destination of `project`: the run's own projection file.
pub fn default_projection_path(run: &Path) -> PathBuf {
    run.join(PROJECTION_FILE)
}
