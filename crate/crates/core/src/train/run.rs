use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::autograd::AutogradError;
use crate::data::{tensor_to_points, Dataset};
use crate::eval::{feature_stats, frechet_distance, mode_coverage, ExtractorTag, FeatureExtractor, GaussianStats, Identity, ModeSpec, RandomCnn};

use super::{save_checkpoint, EvalPoint, Result, StepMetrics, TrainConfig, TrainError, TrainState};

pub const METRICS_HEADER: &str = "iteration,loss_d,loss_g,lfm_value,d_real_mean,d_fake_mean,fid,wall_ms";

/// Scores generated samples against fixed reference statistics.
pub struct Evaluator {
    extractor: Box<dyn FeatureExtractor>,
    reference: GaussianStats,
    modes: Option<ModeSpec>,
}

impl Evaluator {
    pub fn new(extractor: Box<dyn FeatureExtractor>, reference: GaussianStats, modes: Option<ModeSpec>) -> Self {
        Evaluator { extractor, reference, modes }
    }

    /// The default extractor for samples of this shape.
    pub fn default_extractor(sample_shape: &[usize]) -> ExtractorTag {
        if sample_shape.len() == 3 {
            ExtractorTag::RandomCnn { seed: 0 }
        } else {
            ExtractorTag::Identity
        }
    }

    pub fn build_extractor(tag: &ExtractorTag, sample_shape: &[usize]) -> Result<Box<dyn FeatureExtractor>> {
        match tag {
            ExtractorTag::Identity => Ok(Box::new(Identity::new(sample_shape.iter().product()))),
            ExtractorTag::RandomCnn { seed } => Ok(Box::new(RandomCnn::new(*seed))),
            ExtractorTag::TrainedDf { checkpoint } => {
                let state = super::load_checkpoint(checkpoint)?;
                let tag = tag.to_string();
                Ok(Box::new(crate::eval::DiscriminatorFeatures::new(state.discriminator, tag)))
            }
        }
    }

    /// Reference statistics from `cfg.ref_stats` or from the dataset.
    pub fn for_dataset(cfg: &TrainConfig, dataset: &Dataset) -> Result<Self> {
        let shape = dataset.sample_shape();
        let tag = cfg.extractor.clone().unwrap_or_else(|| Evaluator::default_extractor(&shape));
        let mut extractor = Evaluator::build_extractor(&tag, &shape)?;
        let reference = match &cfg.ref_stats {
            Some(path) => {
                let (stats, stored) = GaussianStats::load(path)?;
                if stored != extractor.tag() {
                    return Err(super::ConfigError::Invalid(format!(
                        "{} was computed with extractor {stored}, the run uses {}",
                        path.display(),
                        extractor.tag()
                    ))
                    .into());
                }
                stats
            }
            None => feature_stats(&dataset.reference_samples(cfg.seed, cfg.ref_n), extractor.as_mut())?,
        };
        let modes = match dataset {
            Dataset::Ring(r) => Some(r.mode_spec(coverage_threshold(cfg.eval_n, r.modes))),
            Dataset::Tensor(_) => None,
        };
        Ok(Evaluator { extractor, reference, modes })
    }

    pub fn reference(&self) -> &GaussianStats {
        &self.reference
    }

    pub fn evaluate(&mut self, state: &mut TrainState) -> Result<EvalPoint> {
        let z = state.eval_latents(state.iteration)?;
        let samples = state.generate_from(&z)?;
        let stats = feature_stats(&samples, self.extractor.as_mut())?;
        let fid = frechet_distance(&stats, &self.reference)?;
        let coverage = match (&self.modes, tensor_to_points(&samples)) {
            (Some(spec), Some(points)) => Some(mode_coverage(&points, spec)?),
            _ => None,
        };
        Ok(EvalPoint { iteration: state.iteration, fid, n: samples.shape()[0], coverage })
    }
}

/// A mode counts as covered at a fifth of its uniform share of the
/// evaluation set.
pub fn coverage_threshold(n: usize, modes: usize) -> usize {
    (n / modes.max(1) / 5).max(1)
}

#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    pub metrics_path: Option<PathBuf>,
    /// Where a divergence dump goes; falls back to the checkpoint directory.
    pub dump_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub steps: u64,
    pub final_iteration: u64,
    pub last: Option<StepMetrics>,
    pub evals: Vec<EvalPoint>,
    pub checkpoints: Vec<PathBuf>,
    pub metrics_path: Option<PathBuf>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.display().to_string(), source }
}

fn cell(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

pub fn metrics_row(m: &StepMetrics, fid: Option<f64>, wall_ms: u128) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        m.iteration,
        cell(m.loss_d),
        cell(m.loss_g),
        cell(m.lfm_value),
        cell(m.d_real_mean),
        cell(m.d_fake_mean),
        fid.map(cell).unwrap_or_default(),
        wall_ms
    )
}

fn open_metrics(path: &Path, resume: bool) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let existing = resume && path.metadata().map(|m| m.len() > 0).unwrap_or(false);
    let file = if existing {
        OpenOptions::new().append(true).open(path).map_err(io(path))?
    } else {
        File::create(path).map_err(io(path))?
    };
    let mut w = BufWriter::new(file);
    if !existing {
        writeln!(w, "{METRICS_HEADER}").map_err(io(path))?;
    }
    Ok(w)
}

/// Opens the dataset, builds a fresh state and runs `cfg.iterations` steps.
pub fn train(cfg: &TrainConfig, outputs: &RunOutputs) -> Result<(TrainState, RunSummary)> {
    cfg.validate()?;
    let mut dataset = Dataset::open(&cfg.dataset, cfg.image_size, cfg.subset_n)?;
    let mut state = TrainState::new(cfg.clone(), &dataset.sample_shape())?;
    let mut evaluator = if cfg.eval_every > 0 { Some(Evaluator::for_dataset(cfg, &dataset)?) } else { None };
    let summary = run(&mut state, &mut dataset, evaluator.as_mut(), outputs)?;
    Ok((state, summary))
}

/// Continues `state` up to `state.config.iterations`. A state that has
/// already run appends to an existing metrics file.
pub fn run(
    state: &mut TrainState,
    dataset: &mut Dataset,
    mut evaluator: Option<&mut Evaluator>,
    outputs: &RunOutputs,
) -> Result<RunSummary> {
    let cfg = state.config.clone();
    let start = Instant::now();
    let mut metrics = match &outputs.metrics_path {
        Some(p) => Some(open_metrics(p, state.iteration > 0)?),
        None => None,
    };
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let mut summary = RunSummary { metrics_path: outputs.metrics_path.clone(), ..RunSummary::default() };
    while state.iteration < cfg.iterations {
        let real = dataset.batch(cfg.seed, state.iteration, cfg.batch_size);
        let m = match state.train_step(&real) {
            Ok(m) => m,
            Err(e) => {
                if let (Some(w), Some(p)) = (metrics.as_mut(), &outputs.metrics_path) {
                    w.flush().map_err(io(p))?;
                }
                return Err(diverged(state, e, outputs));
            }
        };
        if ![m.loss_d, m.loss_g].iter().all(|v| v.is_finite()) {
            return Err(diverged(state, TrainError::Autograd(AutogradError::NonFinite { op: "loss" }), outputs));
        }
        summary.steps += 1;
        let mut fid = None;
        if let Some(ev) = evaluator.as_deref_mut().filter(|_| cfg.eval_every > 0 && m.iteration % cfg.eval_every == 0) {
            let point = ev.evaluate(state)?;
            fid = Some(point.fid);
            state.evals.push(point);
            summary.evals.push(point);
        }
        if let (Some(w), Some(p)) = (metrics.as_mut(), &outputs.metrics_path) {
            let wall = if cfg.wall_clock { start.elapsed().as_millis() } else { 0 };
            writeln!(w, "{}", metrics_row(&m, fid, wall)).map_err(io(p))?;
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.checkpoint_every > 0 && m.iteration % cfg.checkpoint_every == 0 {
                let path = dir.join(format!("ckpt_{:08}.lfmg", m.iteration));
                save_checkpoint(state, &path)?;
                summary.checkpoints.push(path);
            }
        }
        if m.iteration % 500 == 0 {
            log::info!("iteration {} loss_d {:.4} loss_g {:.4} lfm {:.4}", m.iteration, m.loss_d, m.loss_g, m.lfm_value);
        }
        summary.last = Some(m);
    }
    if let (Some(w), Some(p)) = (metrics.as_mut(), &outputs.metrics_path) {
        w.flush().map_err(io(p))?;
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        let path = dir.join("final.lfmg");
        save_checkpoint(state, &path)?;
        summary.checkpoints.push(path);
    }
    summary.final_iteration = state.iteration;
    Ok(summary)
}

/// Writes a plain-text diagnostic next to the run and wraps the failure.
/// Existing checkpoints are left as they are.
fn diverged(state: &TrainState, cause: TrainError, outputs: &RunOutputs) -> TrainError {
    let iteration = state.iteration + 1;
    let dir = outputs
        .dump_dir
        .clone()
        .or_else(|| state.config.checkpoint_dir.clone())
        .or_else(|| outputs.metrics_path.as_ref().and_then(|p| p.parent().map(Path::to_path_buf)));
    let mut text = format!("diverged at iteration {iteration}: {cause}\n\n[recent metrics]\n{METRICS_HEADER}\n");
    for m in state.history.iter().rev().take(10).rev() {
        let _ = writeln!(text, "{}", metrics_row(m, None, 0));
    }
    text.push_str("\n[parameters] name min max mean non_finite\n");
    for store in [state.generator.params(), state.discriminator.params()] {
        for (name, t) in store.iter() {
            let d = t.data();
            let bad = d.iter().filter(|v| !v.is_finite()).count();
            let (lo, hi) = d.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let mean = d.iter().sum::<f64>() / d.len().max(1) as f64;
            let _ = writeln!(text, "{name} {lo} {hi} {mean} {bad}");
        }
    }
    let _ = writeln!(text, "\n[config]\n{}", state.config.to_text());
    let dump = dir.and_then(|dir| {
        let path = dir.join(format!("nan_dump_{iteration:08}.txt"));
        fs::create_dir_all(&dir).ok()?;
        fs::write(&path, text).ok()?;
        Some(path.display().to_string())
    });
    TrainError::Diverged { iteration, cause: cause.to_string(), dump }
}
