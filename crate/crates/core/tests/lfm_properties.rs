use lfm_core::autograd::{check_gradients, Precision, Tape, Tensor, Var};
use lfm_core::lfm::{d_total_loss, g_total_loss, lfm_base, lfm_loss, LfmConfig, Side};
use lfm_core::nets::LfmMode;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn base_of(features: &Tensor) -> f64 {
    let mut tape = Tape::new(Precision::F64);
    let f = tape.constant(features).unwrap();
    let b = lfm_base(&mut tape, f).unwrap();
    tape.item(b)
}

/// The loop in its literal form: accumulate pair dot products, then scale.
fn loop_oracle(rows: &[Vec<f64>]) -> f64 {
    let hb = rows.len() / 2;
    let mut dot = 0.0;
    let mut base = 0.0;
    for i in 0..hb {
        dot += rows[i].iter().zip(&rows[i + hb]).map(|(a, b)| a * b).sum::<f64>();
        base = (dot / hb as f64 / 2.0).abs();
    }
    base
}

fn features(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(vec![rows, cols], |_| rng.random_range(-1.0..=1.0))
}

fn swapped(t: &Tensor) -> Tensor {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let hb = rows / 2;
    Tensor::from_fn(vec![rows, cols], |i| {
        let (r, c) = (i / cols, i % cols);
        let src = if r < hb { r + hb } else { r - hb };
        t.data()[src * cols + c]
    })
}

fn scores(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(vec![n, 1], |_| rng.random_range(0.05..0.95))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn matches_the_loop_and_its_bounds(half in 1usize..12, f_dim in 1usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = features(2 * half, f_dim, &mut rng);
        let rows: Vec<Vec<f64>> = t.data().chunks(f_dim).map(<[f64]>::to_vec).collect();
        let b = base_of(&t);
        prop_assert!((b - loop_oracle(&rows)).abs() <= 1e-12 * (1.0 + b));
        prop_assert!(b >= 0.0 && b <= f_dim as f64 / 2.0);
    }

    #[test]
    fn swap_and_negation_invariance(half in 1usize..12, f_dim in 1usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = features(2 * half, f_dim, &mut rng);
        let b = base_of(&t);
        prop_assert_eq!(base_of(&swapped(&t)).to_bits(), b.to_bits());
        let neg = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| -v).collect()).unwrap();
        prop_assert_eq!(base_of(&neg).to_bits(), b.to_bits());
    }

    #[test]
    fn gradients_are_opposite(half in 1usize..8, f_dim in 1usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = features(2 * half, f_dim, &mut rng);
        t.set_requires_grad(true);
        let cfg = LfmConfig { feature_dim: f_dim, ..LfmConfig::default() };
        let grad = |side: Side| {
            let mut tape = Tape::new(Precision::F64);
            let f = tape.leaf(&t).unwrap();
            let l = lfm_loss(&mut tape, f, side, &cfg).unwrap();
            tape.backward(l).unwrap();
            tape.grad(f).unwrap().to_vec()
        };
        let g = grad(Side::Generator);
        let d = grad(Side::Discriminator);
        for (a, b) in g.iter().zip(&d) {
            prop_assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn zero_weights_reduce_to_the_plain_losses(half in 1usize..8, f_dim in 1usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (sr, sf, f) = (scores(2 * half, &mut rng), scores(2 * half, &mut rng), features(2 * half, f_dim, &mut rng));
        for mode in [LfmMode::Full, LfmMode::GOnly, LfmMode::Off] {
            let cfg = LfmConfig { lambda_d: 0.0, lambda_g: 0.0, feature_dim: f_dim, mode, ..LfmConfig::default() };
            let mut tape = Tape::new(Precision::F64);
            let (r, fk, fv) = (tape.constant(&sr).unwrap(), tape.constant(&sf).unwrap(), tape.constant(&f).unwrap());
            let d = d_total_loss(&mut tape, r, fk, fv, &cfg).unwrap();
            let g = g_total_loss(&mut tape, fk, fv, &cfg, false).unwrap();
            let plain_d = {
                let a = tape.bce_const(r, 1.0).unwrap();
                let b = tape.bce_const(fk, 0.0).unwrap();
                tape.add(a, b).unwrap()
            };
            let plain_g = tape.bce_const(fk, 1.0).unwrap();
            prop_assert_eq!(tape.item(d.total).to_bits(), tape.item(plain_d).to_bits());
            prop_assert_eq!(tape.item(g.total).to_bits(), tape.item(plain_g).to_bits());
        }
    }
}

#[test]
fn total_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for mode in [LfmMode::Full, LfmMode::GOnly] {
        for _ in 0..10 {
            let cfg = LfmConfig { lambda_d: 0.7, lambda_g: 1.3, feature_dim: 5, mode, ..LfmConfig::default() };
            let inputs = [scores(6, &mut rng), scores(6, &mut rng), features(6, 5, &mut rng)];
            let d = check_gradients(&inputs, 1e-6, |t: &mut Tape, v: &[Var]| Ok(d_total_loss(t, v[0], v[1], v[2], &cfg).unwrap().total)).unwrap();
            assert!(d.max_rel_error <= 1e-4, "d: {d:?}");
            for saturating in [false, true] {
                let g = check_gradients(&inputs[1..], 1e-6, |t: &mut Tape, v: &[Var]| {
                    Ok(g_total_loss(t, v[0], v[1], &cfg, saturating).unwrap().total)
                })
                .unwrap();
                assert!(g.max_rel_error <= 1e-4, "g: {g:?}");
            }
        }
    }
}

#[test]
fn growing_alignment_moves_the_players_apart() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let first = features(4, 10, &mut rng);
    let cfg = LfmConfig { feature_dim: 10, ..LfmConfig::default() };
    let score = Tensor::new(vec![8, 1], vec![0.4; 8]).unwrap();
    let mut last: Option<(f64, f64)> = None;
    for step in 0..=10 {
        let alpha = step as f64 / 10.0;
        // Second half = alpha · first half, so every pair dot is alpha·|f|².
        let data: Vec<f64> = first.data().iter().copied().chain(first.data().iter().map(|v| alpha * v)).collect();
        let f = Tensor::new(vec![8, 10], data).unwrap();
        let mut tape = Tape::new(Precision::F64);
        let (s, fv) = (tape.constant(&score).unwrap(), tape.constant(&f).unwrap());
        let d = d_total_loss(&mut tape, s, s, fv, &cfg).unwrap().total;
        let g = g_total_loss(&mut tape, s, fv, &cfg, false).unwrap().total;
        let (d, g) = (tape.item(d), tape.item(g));
        if let Some((pd, pg)) = last {
            assert!(d < pd && g > pg, "alpha {alpha}: d {pd} -> {d}, g {pg} -> {g}");
        }
        last = Some((d, g));
    }
}

#[test]
fn bounds_hold_on_many_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = LfmConfig::default();
    for _ in 0..2_000 {
        let t = features(8, 100, &mut rng);
        let b = base_of(&t);
        assert!((0.0..=50.0).contains(&b));
        let mut tape = Tape::new(Precision::F64);
        let f = tape.constant(&t).unwrap();
        let d = lfm_loss(&mut tape, f, Side::Discriminator, &cfg).unwrap();
        assert!(tape.item(d) >= 50.0 && tape.item(d) <= 100.0);
    }
    let ones = Tensor::new(vec![2, 100], vec![1.0; 200]).unwrap();
    assert_eq!(base_of(&ones), 50.0);
}
