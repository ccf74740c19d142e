use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use lfm_core::autograd::Tensor;
use lfm_core::data::{keyed_rng, tensor_to_points, write_ppm, write_tensor_dataset, Dataset, DatasetSpec, Image};
use lfm_core::eval::{feature_stats, frechet_distance, ExtractorTag, GaussianStats};
use lfm_core::latent::{orthogonal_pairs, rejection_rate, PairVariant, RejectionEstimate};
use lfm_core::train::{load_checkpoint, run, Evaluator, RunOutputs, RunSummary, TrainConfig, TrainState, CONFIG_KEYS};

use crate::args::{FidArgs, PairsArgs, SampleArgs, StatsArgs, TrainArgs};
use crate::error::{CliError, Result};
use crate::manifest::{now_ms, RunManifest};
use crate::overrides::{is_config_key, parse_flags, parse_sets, text_sets_key};
use crate::plot::{line_chart, Series, PALETTE};
use crate::resolve_seed;

const PURPOSE_PAIRS: u64 = 20;
const PURPOSE_PROBE: u64 = 21;

/// Keys that may change when a run is resumed.
const RESUMABLE_KEYS: [&str; 5] = ["iterations", "eval_every", "checkpoint_every", "checkpoint_dir", "wall_clock"];

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn parse_extractor(s: &str) -> Result<ExtractorTag> {
    ExtractorTag::parse(s).ok_or_else(|| CliError::Config(format!("unknown extractor {s:?}")))
}

/// What `cmd_train` produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub summary: RunSummary,
    pub manifest: PathBuf,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let started = now_ms();
    let mut args = args.clone();
    let mut overrides = parse_sets(&args.set)?;
    // Known flags that came after the first config-key flag.
    for (key, value) in parse_flags(&args.flags)? {
        match key.as_str() {
            "out" => args.out = value.into(),
            "config" => args.config = Some(value.into()),
            "resume" => args.resume = Some(value.into()),
            "set" => overrides.extend(parse_sets(&[value])?),
            _ => overrides.push((key, value)),
        }
    }
    if let Some((key, _)) = overrides.iter().find(|(k, _)| !is_config_key(k)) {
        return Err(CliError::Config(format!("unknown config key `{key}`")));
    }

    let out = args.out.clone();
    let (mut state, mut dataset) = match &args.resume {
        Some(ckpt) => {
            let mut state = load_checkpoint(ckpt)?;
            let before = state.config.clone();
            for (k, v) in &overrides {
                state.config.set(k, v)?;
            }
            if let Some(k) = CONFIG_KEYS.iter().find(|k| !RESUMABLE_KEYS.contains(k) && before.get(k) != state.config.get(k)) {
                return Err(CliError::Config(format!("`{k}` cannot change when resuming")));
            }
            state.config.validate()?;
            let c = &state.config;
            let dataset = Dataset::open(&c.dataset, c.image_size, c.subset_n)?;
            (state, dataset)
        }
        None => {
            let mut cfg = TrainConfig::default();
            let mut seeded = false;
            if let Some(path) = &args.config {
                let text = read_text(path)?;
                cfg.apply_text(&text)?;
                seeded = text_sets_key(&text, "seed");
            }
            for (k, v) in &overrides {
                cfg.set(k, v)?;
            }
            seeded |= overrides.iter().any(|(k, _)| k == "seed");
            if !seeded {
                cfg.seed = resolve_seed(None)?;
            }
            if cfg.checkpoint_dir.is_none() {
                cfg.checkpoint_dir = Some(out.join("checkpoints"));
            }
            cfg.validate()?;
            let dataset = Dataset::open(&cfg.dataset, cfg.image_size, cfg.subset_n)?;
            (TrainState::new(cfg, &dataset.sample_shape())?, dataset)
        }
    };
    let cfg = state.config.clone();
    create_dir(&out)?;
    let config_path = out.join("config.txt");
    write_file(&config_path, cfg.to_text().as_bytes())?;

    let mut evaluator = if cfg.eval_every > 0 { Some(Evaluator::for_dataset(&cfg, &dataset)?) } else { None };
    let metrics_path = out.join("metrics.csv");
    let outputs = RunOutputs { metrics_path: Some(metrics_path.clone()), dump_dir: Some(out.clone()) };
    let summary = run(&mut state, &mut dataset, evaluator.as_mut(), &outputs)?;

    let mut files = vec![config_path, metrics_path.clone()];
    files.extend(plot_metrics(&metrics_path, &out)?);
    files.extend(summary.checkpoints.iter().cloned());
    let manifest = RunManifest::new("train", cfg.seed, cfg.to_text(), started).finish(&out, &files)?;
    match summary.evals.last() {
        Some(e) => println!("trained to iteration {}; last fid {:.6} at iteration {}", summary.final_iteration, e.fid, e.iteration),
        None => println!("trained to iteration {}", summary.final_iteration),
    }
    Ok(TrainOutcome { summary, manifest })
}

/// Columns of a metrics file as `(iteration, value)` series.
pub(crate) fn read_metric_columns(path: &Path, names: &[&str]) -> Result<Vec<Vec<(f64, f64)>>> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let idx: Vec<usize> = names
        .iter()
        .map(|n| header.iter().position(|h| h == n).ok_or_else(|| CliError::Io(format!("{} has no column {n}", path.display()))))
        .collect::<Result<_>>()?;
    let mut out = vec![Vec::new(); names.len()];
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        let it: f64 = cells[0].parse().unwrap_or(f64::NAN);
        for (k, &i) in idx.iter().enumerate() {
            if let Some(Ok(v)) = cells.get(i).filter(|c| !c.is_empty()).map(|c| c.parse::<f64>()) {
                out[k].push((it, v));
            }
        }
    }
    Ok(out)
}

fn plot_metrics(metrics: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let cols = read_metric_columns(metrics, &["loss_d", "loss_g", "lfm_value", "fid"])?;
    let series = |i: usize, label: &str| Series { label: label.into(), color: PALETTE[i].into(), points: cols[i].clone() };
    let mut written = Vec::new();
    let losses = line_chart("losses", "iteration", "loss", &[series(0, "loss_d"), series(1, "loss_g"), series(2, "lfm_value")]);
    let p = out.join("losses.svg");
    write_file(&p, losses.as_bytes())?;
    written.push(p);
    if !cols[3].is_empty() {
        let p = out.join("fid.svg");
        write_file(&p, line_chart("Fréchet distance", "iteration", "fid", &[series(3, "fid")]).as_bytes())?;
        written.push(p);
    }
    Ok(written)
}

fn parse_variant(s: &str) -> Result<PairVariant> {
    PairVariant::parse(s).ok_or_else(|| CliError::Config(format!("unknown pair variant {s:?}; expected abs or no_abs")))
}

/// Rejection-probability estimates for both variants.
pub fn rejection_report(z_dim: usize, trials: usize, seed: u64) -> Result<Vec<(PairVariant, RejectionEstimate)>> {
    [PairVariant::Abs, PairVariant::NoAbs]
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let est = rejection_rate(v, z_dim, trials, &mut keyed_rng(seed, PURPOSE_PROBE, i as u64))
                .map_err(|e| CliError::Config(e.to_string()))?;
            Ok((v, est))
        })
        .collect()
}

pub fn cmd_pairs(args: &PairsArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let variant = parse_variant(&args.variant)?;
    let batch = orthogonal_pairs(2 * args.count, args.z_dim, variant, &mut keyed_rng(seed, PURPOSE_PAIRS, 0))
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut csv = String::from("pair,member");
    for i in 0..args.z_dim {
        let _ = write!(csv, ",v{i}");
    }
    csv.push('\n');
    for j in 0..batch.num_pairs() {
        let (a, b) = batch.pair(j);
        for (member, row) in [("a", a), ("b", b)] {
            let _ = write!(csv, "{j},{member}");
            for v in row {
                let _ = write!(csv, ",{v}");
            }
            csv.push('\n');
        }
    }
    let max_dot = batch.pair_dots().iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let mut report = format!("pairs {} z_dim {} variant {} max |dot| {max_dot:e}\n", batch.num_pairs(), args.z_dim, variant.name());
    let mut rows = String::from("variant,z_dim,trials,rejected,rate,ci_low,ci_high,ci_width\n");
    if args.trials > 0 {
        for (v, e) in rejection_report(args.z_dim, args.trials, seed)? {
            let _ = writeln!(
                report,
                "rejection {}: {:.5} (95% CI [{:.5}, {:.5}], width {:.5}, {} trials)",
                v.name(),
                e.rate,
                e.ci_low,
                e.ci_high,
                e.ci_width(),
                e.trials
            );
            let _ = writeln!(rows, "{},{},{},{},{},{},{},{}", v.name(), args.z_dim, e.trials, e.rejected, e.rate, e.ci_low, e.ci_high, e.ci_width());
        }
    }
    match &args.out {
        Some(p) => {
            write_file(p, csv.as_bytes())?;
            print!("{report}");
        }
        None => {
            print!("{csv}");
            eprint!("{report}");
        }
    }
    if let Some(p) = &args.report {
        write_file(p, rows.as_bytes())?;
    }
    Ok(())
}

fn first_n(samples: Tensor, n: usize) -> Tensor {
    let total = samples.shape()[0];
    if n >= total {
        return samples;
    }
    let per: usize = samples.shape()[1..].iter().product();
    let mut shape = samples.shape().to_vec();
    shape[0] = n;
    Tensor::new(shape, samples.data()[..n * per].to_vec()).expect("prefix")
}

fn parse_dataset(s: &str) -> Result<DatasetSpec> {
    Ok(DatasetSpec::parse(s)?)
}

pub fn cmd_fid(args: &FidArgs) -> Result<f64> {
    let seed = resolve_seed(args.seed)?;
    let (source, samples) = match (&args.samples, &args.checkpoint) {
        (Some(spec), None) => {
            let ds = Dataset::open(&parse_dataset(spec)?, args.image_size, None)?;
            (spec.clone(), first_n(ds.reference_samples(seed, args.n), args.n))
        }
        (None, Some(ckpt)) => {
            let mut state = load_checkpoint(ckpt)?;
            (ckpt.display().to_string(), state.sample(args.n, seed)?)
        }
        _ => return Err(CliError::Config("give exactly one of --samples or --checkpoint".into())),
    };
    let shape = samples.shape()[1..].to_vec();
    let explicit = args.extractor.as_deref().map(parse_extractor).transpose()?;
    let (reference, ref_label, tag) = match (&args.ref_stats, &args.reference) {
        (Some(path), None) => {
            let (stats, stored) = GaussianStats::load(path)?;
            let tag = match explicit {
                Some(t) if t.to_string() != stored => {
                    return Err(CliError::Config(format!("{} was computed with extractor {stored}, not {t}", path.display())));
                }
                Some(t) => t,
                None => parse_extractor(&stored)?,
            };
            (Some(stats), path.display().to_string(), tag)
        }
        (None, Some(spec)) => (None, spec.clone(), explicit.unwrap_or_else(|| Evaluator::default_extractor(&shape))),
        _ => return Err(CliError::Config("give exactly one of --ref-stats or --reference".into())),
    };
    let mut extractor = Evaluator::build_extractor(&tag, &shape)?;
    let reference = match reference {
        Some(r) => r,
        None => {
            let ds = Dataset::open(&parse_dataset(&ref_label)?, args.image_size, None)?;
            feature_stats(&ds.reference_samples(seed, args.ref_n), extractor.as_mut())?
        }
    };
    let stats = feature_stats(&samples, extractor.as_mut())?;
    let fid = frechet_distance(&stats, &reference)?;
    println!("{fid}");
    if let Some(path) = &args.csv {
        let fresh = path.metadata().map(|m| m.len() == 0).unwrap_or(true);
        let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| CliError::io(path, e))?;
        let mut text = String::new();
        if fresh {
            text.push_str("source,reference,extractor,n,fid\n");
        }
        let _ = writeln!(text, "{source},{ref_label},{},{},{fid}", extractor.tag(), stats.n());
        f.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))?;
    }
    Ok(fid)
}

/// Files written by `cmd_sample`.
pub fn cmd_sample(args: &SampleArgs) -> Result<Vec<PathBuf>> {
    let started = now_ms();
    let seed = resolve_seed(args.seed)?;
    let mut state = load_checkpoint(&args.checkpoint)?;
    let samples = state.sample(args.n, seed)?;
    create_dir(&args.out)?;
    let mut files = Vec::new();
    let raw = args.out.join("samples.lfmd");
    write_tensor_dataset(&raw, &samples)?;
    files.push(raw);
    if let Some(points) = tensor_to_points(&samples) {
        let mut csv = String::from("x,y\n");
        for p in points {
            let _ = writeln!(csv, "{},{}", p[0], p[1]);
        }
        let path = args.out.join("samples.csv");
        write_file(&path, csv.as_bytes())?;
        files.push(path);
    } else if let [n, 3, h, w] = samples.shape() {
        let per = 3 * h * w;
        for i in 0..*n {
            let img = Image::from_normalized(&samples.data()[i * per..(i + 1) * per], *w, *h);
            let path = args.out.join(format!("sample_{i:04}.ppm"));
            write_ppm(&path, &img)?;
            files.push(path);
        }
    }
    let note = format!("checkpoint = {}\nn = {}\n", args.checkpoint.display(), args.n);
    RunManifest::new("sample", seed, note, started).finish(&args.out, &files)?;
    println!("wrote {} samples to {}", args.n, args.out.display());
    Ok(files)
}

pub fn cmd_stats(args: &StatsArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let ds = Dataset::open(&parse_dataset(&args.dataset)?, args.image_size, args.subset_n)?;
    let shape = ds.sample_shape();
    let tag = match &args.extractor {
        Some(s) => parse_extractor(s)?,
        None => Evaluator::default_extractor(&shape),
    };
    let mut extractor = Evaluator::build_extractor(&tag, &shape)?;
    let stats = feature_stats(&ds.reference_samples(seed, args.ref_n), extractor.as_mut())?;
    stats.save(&args.out, &extractor.tag())?;
    println!("{} samples, {} features, extractor {} -> {}", stats.n(), stats.dim(), extractor.tag(), args.out.display());
    Ok(())
}
