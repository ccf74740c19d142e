//! Baseline vs regularized training on the 8-mode ring, several seeds per arm.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use lfm_core::data::{DatasetSpec, RingSpec};
use lfm_core::nets::LfmMode;
use lfm_core::train::{train, Arch, EvalPoint, RunOutputs, TrainConfig};

use crate::args::BenchArgs;
use crate::error::{CliError, Result};
use crate::manifest::{now_ms, RunManifest};
use crate::overrides::{is_config_key, parse_sets};
use crate::plot::{line_chart, Series, PALETTE};

pub const SUMMARY_HEADER: &str = "arm,seed,steps,min_fid,min_fid_iteration,final_fid,final_coverage,final_hq_fraction,wall_ms";
pub const AGGREGATE_HEADER: &str = "arm,runs,median_final_coverage,median_min_fid,best_min_fid";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Baseline,
    Lfm,
    GOnly,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Lfm => "lfm",
            Arm::GOnly => "g_only",
        }
    }

    fn configure(self, cfg: &mut TrainConfig) {
        match self {
            Arm::Baseline => {
                cfg.lfm_mode = LfmMode::Off;
                cfg.lambda_d = 0.0;
                cfg.lambda_g = 0.0;
            }
            Arm::Lfm => cfg.lfm_mode = LfmMode::Full,
            Arm::GOnly => {
                cfg.lfm_mode = LfmMode::GOnly;
                cfg.lambda_d = 0.0;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchRun {
    pub arm: Arm,
    pub seed: u64,
    pub steps: u64,
    pub min_fid: f64,
    pub min_fid_iteration: u64,
    pub final_fid: f64,
    pub final_coverage: usize,
    pub final_hq_fraction: f64,
    pub wall_ms: u128,
    pub curve: Vec<EvalPoint>,
    pub metrics_path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct ArmSummary {
    pub arm: Arm,
    pub runs: usize,
    pub median_final_coverage: f64,
    pub median_min_fid: f64,
    pub best_min_fid: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub runs: Vec<BenchRun>,
    pub arms: Vec<ArmSummary>,
    pub summary_csv: PathBuf,
    pub aggregate_csv: PathBuf,
    pub plots: Vec<PathBuf>,
    pub manifest: PathBuf,
    pub wall_ms: u128,
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        (xs[m - 1] + xs[m]) / 2.0
    }
}

/// The shared configuration before the arm-specific settings.
pub fn base_config(args: &BenchArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    cfg.dataset = DatasetSpec::Ring(RingSpec::default());
    cfg.arch = Arch::Mlp;
    cfg.z_dim = args.z_dim;
    cfg.hidden = args.hidden;
    cfg.feature_dim = args.feature_dim;
    cfg.adam.lr = args.lr;
    cfg.batch_size = args.batch_size;
    cfg.iterations = args.steps;
    cfg.eval_every = args.eval_every;
    cfg.eval_n = args.eval_n;
    cfg.checkpoint_every = 0;
    for (k, v) in parse_sets(&args.set)? {
        if !is_config_key(&k) {
            return Err(CliError::Config(format!("unknown config key `{k}`")));
        }
        cfg.set(&k, &v)?;
    }
    if cfg.eval_every == 0 || cfg.eval_every > cfg.iterations {
        return Err(CliError::Config("bench2d needs 0 < eval_every <= steps".into()));
    }
    if !matches!(cfg.dataset, DatasetSpec::Ring(_)) {
        return Err(CliError::Config("bench2d runs on the ring dataset".into()));
    }
    Ok(cfg)
}

pub fn cmd_bench2d(args: &BenchArgs) -> Result<BenchReport> {
    let started = now_ms();
    let clock = Instant::now();
    if args.seeds.is_empty() {
        return Err(CliError::Config("bench2d needs at least one seed".into()));
    }
    let base = base_config(args)?;
    let mut arms = vec![Arm::Baseline, Arm::Lfm];
    if args.g_only {
        arms.push(Arm::GOnly);
    }
    fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;

    let mut runs = Vec::new();
    let mut files = Vec::new();
    for &arm in &arms {
        for &seed in &args.seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            arm.configure(&mut cfg);
            let dir = args.out.join(format!("{}_seed{seed}", arm.name()));
            cfg.checkpoint_dir = Some(dir.clone());
            let metrics_path = dir.join("metrics.csv");
            let outputs = RunOutputs { metrics_path: Some(metrics_path.clone()), dump_dir: Some(dir.clone()) };
            let t = Instant::now();
            let (_, summary) = train(&cfg, &outputs)?;
            let wall_ms = t.elapsed().as_millis();
            let best = summary.evals.iter().min_by(|a, b| a.fid.total_cmp(&b.fid)).copied();
            let last = summary.evals.last().copied();
            let (Some(best), Some(last)) = (best, last) else {
                return Err(CliError::Runtime(format!("{} seed {seed} produced no evaluations", arm.name())));
            };
            let cov = last.coverage.ok_or_else(|| CliError::Runtime("ring evaluation without coverage".into()))?;
            log::info!("{} seed {seed}: min fid {:.4}, final coverage {}", arm.name(), best.fid, cov.modes_covered);
            files.push(metrics_path.clone());
            files.extend(summary.checkpoints.iter().cloned());
            runs.push(BenchRun {
                arm,
                seed,
                steps: summary.final_iteration,
                min_fid: best.fid,
                min_fid_iteration: best.iteration,
                final_fid: last.fid,
                final_coverage: cov.modes_covered,
                final_hq_fraction: cov.high_quality_fraction,
                wall_ms,
                curve: summary.evals,
                metrics_path,
            });
        }
    }

    let mut summary = format!("{SUMMARY_HEADER}\n");
    for r in &runs {
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{},{},{},{}",
            r.arm.name(),
            r.seed,
            r.steps,
            r.min_fid,
            r.min_fid_iteration,
            r.final_fid,
            r.final_coverage,
            r.final_hq_fraction,
            r.wall_ms
        );
    }
    let arm_summaries: Vec<ArmSummary> = arms
        .iter()
        .map(|&arm| {
            let mine: Vec<&BenchRun> = runs.iter().filter(|r| r.arm == arm).collect();
            ArmSummary {
                arm,
                runs: mine.len(),
                median_final_coverage: median(mine.iter().map(|r| r.final_coverage as f64).collect()),
                median_min_fid: median(mine.iter().map(|r| r.min_fid).collect()),
                best_min_fid: mine.iter().map(|r| r.min_fid).fold(f64::INFINITY, f64::min),
            }
        })
        .collect();
    let mut aggregate = format!("{AGGREGATE_HEADER}\n");
    for a in &arm_summaries {
        let _ = writeln!(aggregate, "{},{},{},{},{}", a.arm.name(), a.runs, a.median_final_coverage, a.median_min_fid, a.best_min_fid);
    }
    let summary_csv = args.out.join("summary.csv");
    let aggregate_csv = args.out.join("aggregate.csv");
    fs::write(&summary_csv, summary).map_err(|e| CliError::io(&summary_csv, e))?;
    fs::write(&aggregate_csv, &aggregate).map_err(|e| CliError::io(&aggregate_csv, e))?;

    let curves = |pick: &dyn Fn(&EvalPoint) -> f64| -> Vec<Series> {
        runs.iter()
            .map(|r| Series {
                label: format!("{} s{}", r.arm.name(), r.seed),
                color: PALETTE[arms.iter().position(|&a| a == r.arm).unwrap_or(0) % PALETTE.len()].into(),
                points: r.curve.iter().map(|e| (e.iteration as f64, pick(e))).collect(),
            })
            .collect()
    };
    let fid_svg = args.out.join("fid.svg");
    let cov_svg = args.out.join("coverage.svg");
    let fid_chart = line_chart("Fréchet distance on the ring", "iteration", "fid", &curves(&|e| e.fid));
    let cov_chart = line_chart(
        "modes covered",
        "iteration",
        "modes",
        &curves(&|e| e.coverage.map(|c| c.modes_covered as f64).unwrap_or(f64::NAN)),
    );
    fs::write(&fid_svg, fid_chart).map_err(|e| CliError::io(&fid_svg, e))?;
    fs::write(&cov_svg, cov_chart).map_err(|e| CliError::io(&cov_svg, e))?;
    let plots = vec![fid_svg, cov_svg];

    let mut all = vec![summary_csv.clone(), aggregate_csv.clone()];
    all.extend(plots.iter().cloned());
    all.extend(files);
    let arm_names: Vec<&str> = arms.iter().map(|a| a.name()).collect();
    let seeds: Vec<String> = args.seeds.iter().map(u64::to_string).collect();
    let config = format!("# arms = {}\n# seeds = {}\n{}", arm_names.join(","), seeds.join(","), base.to_text());
    let manifest = RunManifest::new("bench2d", args.seeds[0], config, started).finish(&args.out, &all)?;

    print!("{aggregate}");
    Ok(BenchReport {
        runs,
        arms: arm_summaries,
        summary_csv,
        aggregate_csv,
        plots,
        manifest,
        wall_ms: clock.elapsed().as_millis(),
    })
}
