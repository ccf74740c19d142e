use std::fs;
use std::path::Path;

use lfm_core::autograd::{BatchNormMode, ParamStore, Precision, Tape, Tensor};
use lfm_core::data::{keyed_rng, write_tensor_dataset, Dataset, DatasetSpec};
use lfm_core::latent::{orthogonal_pairs, sample_gaussian};
use lfm_core::nets::{FeatureGrad, ForwardCtx, LfmMode};
use lfm_core::train::{
    build_networks, load_checkpoint, run, save_checkpoint, train, DScope, Evaluator, RunOutputs, TrainConfig,
    TrainError, TrainState, PURPOSE_NOISE,
};

fn ring_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.z_dim = 4;
    c.hidden = 16;
    c.feature_dim = 8;
    c.batch_size = 16;
    c.iterations = 10;
    c.eval_every = 0;
    c.eval_n = 64;
    c.ref_n = 256;
    c.wall_clock = false;
    c.seed = 7;
    c
}

/// A tiny image run so batch-norm buffers are exercised.
fn image_config(dir: &Path) -> TrainConfig {
    let path = dir.join("images.lfmd");
    let imgs = Tensor::from_fn(vec![12, 3, 16, 16], |i| ((i * 7919) % 255) as f64 / 127.5 - 1.0);
    write_tensor_dataset(&path, &imgs).unwrap();
    let mut c = ring_config();
    c.dataset = DatasetSpec::Raw(path);
    c.image_size = 16;
    c.base_channels = 4;
    c.z_dim = 8;
    c.feature_dim = 6;
    c.batch_size = 4;
    c.iterations = 6;
    c
}

fn max_param_diff(a: &ParamStore, b: &ParamStore) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, t) in a.iter() {
        let Some(u) = b.find(name) else { continue };
        for (x, y) in t.data().iter().zip(u.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

fn outputs(dir: &Path, name: &str) -> RunOutputs {
    RunOutputs { metrics_path: Some(dir.join(name)), dump_dir: Some(dir.to_path_buf()) }
}

#[test]
fn identical_configs_give_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ring_config();
    cfg.iterations = 30;
    cfg.eval_every = 10;
    let (a, _) = train(&cfg, &outputs(dir.path(), "a.csv")).unwrap();
    let (b, _) = train(&cfg, &outputs(dir.path(), "b.csv")).unwrap();
    let ca = fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(ca, fs::read(dir.path().join("b.csv")).unwrap());
    assert_eq!(a.generator.params().fingerprint(), b.generator.params().fingerprint());
    let text = String::from_utf8(ca).unwrap();
    assert_eq!(text.lines().count(), 31);
    assert_eq!(text.lines().filter(|l| !l.split(',').nth(6).unwrap().is_empty()).count(), 4);

    cfg.seed += 1;
    let (c, _) = train(&cfg, &outputs(dir.path(), "c.csv")).unwrap();
    assert_ne!(c.generator.params().fingerprint(), a.generator.params().fingerprint());
}

#[test]
fn checkpoint_bytes_are_stable_and_checked() {
    let dir = tempfile::tempdir().unwrap();
    for cfg in [ring_config(), image_config(dir.path())] {
        let (state, _) = train(&cfg, &RunOutputs::default()).unwrap();
        let (p1, p2) = (dir.path().join("one.lfmg"), dir.path().join("two.lfmg"));
        save_checkpoint(&state, &p1).unwrap();
        save_checkpoint(&load_checkpoint(&p1).unwrap(), &p2).unwrap();
        let bytes = fs::read(&p1).unwrap();
        assert_eq!(bytes, fs::read(&p2).unwrap());
        assert_eq!(&bytes[..4], b"LFMG");

        fs::write(&p2, &bytes[..bytes.len() - 9]).unwrap();
        assert!(load_checkpoint(&p2).is_err());
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 1;
        fs::write(&p2, flipped).unwrap();
        assert!(matches!(load_checkpoint(&p2), Err(TrainError::Record(_))));
    }
}

fn resume_matches_straight_run(cfg: TrainConfig) {
    let dir = tempfile::tempdir().unwrap();
    let (straight, _) = train(&cfg, &outputs(dir.path(), "straight.csv")).unwrap();

    let mut first = cfg.clone();
    first.iterations = cfg.iterations / 2;
    first.checkpoint_dir = Some(dir.path().join("ckpt"));
    train(&first, &outputs(dir.path(), "resumed.csv")).unwrap();
    let mut state = load_checkpoint(&dir.path().join("ckpt/final.lfmg")).unwrap();
    state.config.iterations = cfg.iterations;
    state.config.checkpoint_dir = None;
    let mut dataset = Dataset::open(&cfg.dataset, cfg.image_size, cfg.subset_n).unwrap();
    let mut evaluator = (cfg.eval_every > 0).then(|| Evaluator::for_dataset(&cfg, &dataset).unwrap());
    run(&mut state, &mut dataset, evaluator.as_mut(), &outputs(dir.path(), "resumed.csv")).unwrap();

    assert!(max_param_diff(straight.generator.params(), state.generator.params()) <= 1e-12);
    assert!(max_param_diff(straight.discriminator.params(), state.discriminator.params()) <= 1e-12);
    assert_eq!(straight.generator.buffers(), state.generator.buffers());
    assert_eq!(
        fs::read_to_string(dir.path().join("straight.csv")).unwrap(),
        fs::read_to_string(dir.path().join("resumed.csv")).unwrap()
    );
}

#[test]
fn resumed_ring_run_matches_straight_run() {
    let mut cfg = ring_config();
    cfg.iterations = 20;
    cfg.eval_every = 5;
    resume_matches_straight_run(cfg);
}

#[test]
fn resumed_image_run_matches_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    resume_matches_straight_run(image_config(dir.path()));
}

#[test]
fn sixty_four_bit_and_rounded_runs_differ_but_both_finish() {
    let mut cfg = ring_config();
    let (a, _) = train(&cfg, &RunOutputs::default()).unwrap();
    cfg.precision = Precision::F32;
    let (b, _) = train(&cfg, &RunOutputs::default()).unwrap();
    assert!(b.generator.params().tensors().iter().all(|t| t.data().iter().all(|v| *v == (*v as f32) as f64)));
    assert_ne!(a.generator.params().fingerprint(), b.generator.params().fingerprint());
}

/// Hand-written Adam with the run's defaults.
struct RefAdam {
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl RefAdam {
    fn new(p: &ParamStore) -> Self {
        let z: Vec<Vec<f64>> = p.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        RefAdam { step: 0, m: z.clone(), v: z }
    }

    fn apply(&mut self, p: &mut ParamStore, lr: f64) {
        let (b1, b2, eps) = (0.5f64, 0.999f64, 1e-8);
        self.step += 1;
        for (k, t) in p.tensors_mut().iter_mut().enumerate() {
            let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                self.m[k][i] = b1 * self.m[k][i] + (1.0 - b1) * g[i];
                self.v[k][i] = b2 * self.v[k][i] + (1.0 - b2) * g[i] * g[i];
                let mh = self.m[k][i] / (1.0 - b1.powi(self.step));
                let vh = self.v[k][i] / (1.0 - b2.powi(self.step));
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Plain non-saturating GAN steps with the same networks, data and noise
/// draws as the trainer, but none of its loss composition.
fn reference_gan(cfg: &TrainConfig, steps: u64) -> (ParamStore, ParamStore, Vec<(f64, f64)>) {
    let mut dataset = Dataset::open(&cfg.dataset, cfg.image_size, cfg.subset_n).unwrap();
    let (mut g, mut d) = build_networks(cfg, &dataset.sample_shape()).unwrap();
    let (mut adam_g, mut adam_d) = (RefAdam::new(g.params()), RefAdam::new(d.params()));
    let mut noise = keyed_rng(cfg.seed, PURPOSE_NOISE, 0);
    let mut losses = Vec::new();
    let draw = |rng: &mut _| {
        if cfg.lfm_mode == LfmMode::Off {
            sample_gaussian(cfg.batch_size, cfg.z_dim, rng).unwrap()
        } else {
            orthogonal_pairs(cfg.batch_size, cfg.z_dim, cfg.pair_variant, rng).unwrap()
        }
    };
    for it in 0..steps {
        let real = dataset.batch(cfg.seed, it, cfg.batch_size);
        let z = draw(&mut noise);
        let mut tape = Tape::new(Precision::F64);
        let fake = g.generate(&mut tape, &z, ForwardCtx::train(false)).unwrap();
        let fake = tape.detach(fake).unwrap();
        let rv = tape.constant(&real).unwrap();
        let sr = d.forward(&mut tape, rv, ForwardCtx::train(true)).unwrap().score;
        let sf = d.forward(&mut tape, fake, ForwardCtx::train(true)).unwrap().score;
        let (lr, lf) = (tape.bce_const(sr, 1.0).unwrap(), tape.bce_const(sf, 0.0).unwrap());
        let loss = tape.add(lr, lf).unwrap();
        tape.backward(loss).unwrap();
        d.params_mut().zero_grad();
        tape.accumulate_param_grads(d.params_mut());
        adam_d.apply(d.params_mut(), cfg.adam.lr);
        let loss_d = tape.item(loss);

        let z = draw(&mut noise);
        let mut tape = Tape::new(Precision::F64);
        let fake = g.generate(&mut tape, &z, ForwardCtx::train(true)).unwrap();
        let frozen = ForwardCtx { track_params: false, bn: BatchNormMode::Train { update_running: false }, feature_grad: FeatureGrad::Full };
        let s = d.forward(&mut tape, fake, frozen).unwrap().score;
        let loss = tape.bce_const(s, 1.0).unwrap();
        tape.backward(loss).unwrap();
        g.params_mut().zero_grad();
        tape.accumulate_param_grads(g.params_mut());
        adam_g.apply(g.params_mut(), cfg.adam.lr);
        losses.push((loss_d, tape.item(loss)));
    }
    (g.params().clone(), d.params().clone(), losses)
}

#[test]
fn zero_weight_training_is_a_plain_gan() {
    let dir = tempfile::tempdir().unwrap();
    for base in [ring_config(), image_config(dir.path())] {
        for mode in [LfmMode::Full, LfmMode::GOnly, LfmMode::Off] {
            let mut cfg = base.clone();
            cfg.lfm_mode = mode;
            cfg.lambda_d = 0.0;
            cfg.lambda_g = 0.0;
            cfg.iterations = 10;
            let (state, _) = train(&cfg, &RunOutputs::default()).unwrap();
            let (g, d, losses) = reference_gan(&cfg, 10);
            for (m, (ld, lg)) in state.history.iter().zip(&losses) {
                assert!((m.loss_d - ld).abs() <= 1e-12 && (m.loss_g - lg).abs() <= 1e-12, "{mode:?} step {}", m.iteration);
            }
            let dg = max_param_diff(state.generator.params(), &g);
            let dd = max_param_diff(state.discriminator.params(), &d);
            assert!(dg <= 1e-12 && dd <= 1e-12, "{mode:?}: {dg} {dd}");
        }
    }
}

#[test]
fn steps_alternate_between_players() {
    let cfg = ring_config();
    let mut state = TrainState::new(cfg.clone(), &[2]).unwrap();
    let mut dataset = Dataset::open(&cfg.dataset, cfg.image_size, None).unwrap();
    let (g0, d0) = (state.generator.params().fingerprint(), state.discriminator.params().fingerprint());
    let m = state.train_step(&dataset.batch(cfg.seed, 0, cfg.batch_size)).unwrap();
    assert_eq!(m.iteration, 1);
    assert_ne!(state.generator.params().fingerprint(), g0);
    assert_ne!(state.discriminator.params().fingerprint(), d0);
    assert!(m.lfm_value >= 0.0 && m.lfm_value <= cfg.feature_dim as f64 / 2.0);
    assert!((0.0..1.0).contains(&m.d_real_mean) && (0.0..1.0).contains(&m.d_fake_mean));
}

fn one_step(cfg: &TrainConfig) -> TrainState {
    let mut state = TrainState::new(cfg.clone(), &[2]).unwrap();
    let mut dataset = Dataset::open(&cfg.dataset, cfg.image_size, None).unwrap();
    state.train_step(&dataset.batch(cfg.seed, 0, cfg.batch_size)).unwrap();
    state
}

#[test]
fn generator_only_mode_leaves_the_discriminator_alone() {
    let mut cfg = ring_config();
    cfg.lfm_mode = LfmMode::GOnly;
    let with = one_step(&cfg);
    cfg.lambda_g = 0.0;
    let without = one_step(&cfg);
    assert_eq!(with.discriminator.params().fingerprint(), without.discriminator.params().fingerprint());
    assert_ne!(with.generator.params().fingerprint(), without.generator.params().fingerprint());
}

#[test]
fn layer_only_scope_confines_the_discriminator_penalty() {
    let mut cfg = ring_config();
    cfg.lfm_d_scope = DScope::FOnly;
    cfg.lambda_g = 0.0;
    let with = one_step(&cfg);
    cfg.lambda_d = 0.0;
    let without = one_step(&cfg);
    for (name, t) in with.discriminator.params().iter() {
        let same = without.discriminator.params().find(name).unwrap() == t;
        assert_eq!(same, !name.starts_with("d.lfm_f"), "{name}");
    }
}

#[test]
fn divergence_aborts_with_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ring_config();
    let mut state = TrainState::new(cfg.clone(), &[2]).unwrap();
    state.generator.params_mut().tensors_mut()[0].data_mut()[0] = f64::NAN;
    let mut dataset = Dataset::open(&cfg.dataset, cfg.image_size, None).unwrap();
    let err = run(&mut state, &mut dataset, None, &outputs(dir.path(), "m.csv")).unwrap_err();
    let TrainError::Diverged { iteration, dump: Some(dump), .. } = err else { panic!("{err}") };
    assert_eq!(iteration, 1);
    let text = fs::read_to_string(dump).unwrap();
    assert!(text.contains("g.0.weight") && text.contains("[config]"));
}

#[test]
fn wrong_batch_shape_is_rejected() {
    let mut state = TrainState::new(ring_config(), &[2]).unwrap();
    assert!(matches!(state.train_step(&Tensor::zeros(vec![16, 3])), Err(TrainError::BatchShape { .. })));
}
