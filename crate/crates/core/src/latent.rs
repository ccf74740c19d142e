//! Gaussian latent codes and orthogonal latent pairs.
//!
//! A pair is built from two i.i.d. standard normal vectors by overwriting
//! the last coordinate of the second so that the two are orthogonal:
//! `n2[last] = -dot(n1[..last], n2[..last]) / n1[last]`. The candidate is
//! kept only if the solved coordinate is small enough (see
//! [`PairVariant`]), otherwise both vectors are redrawn.
//!
//! Paired batches of size `B` lay pair `j` out on rows `j` and `j + B/2`.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autograd::Tensor;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LatentError {
    #[error("paired batches need an even size, got {0}")]
    OddBatch(usize),
    #[error("batch size must be at least 1")]
    EmptyBatch,
    #[error("latent dimension must be at least {min}, got {got}")]
    ZDimTooSmall { min: usize, got: usize },
    #[error("rejection probe needs at least {min} trials, got {got}")]
    TooFewTrials { min: usize, got: usize },
}

/// Acceptance rule applied to the solved last coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairVariant {
    /// Accept iff `|last| <= 1`.
    #[default]
    Abs,
    /// Accept iff `last <= 1`.
    NoAbs,
}

impl PairVariant {
    pub fn accepts(self, last: f64) -> bool {
        match self {
            PairVariant::Abs => last.abs() <= 1.0,
            PairVariant::NoAbs => last <= 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PairVariant::Abs => "abs",
            PairVariant::NoAbs => "no_abs",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "abs" => Some(PairVariant::Abs),
            "no_abs" | "noabs" => Some(PairVariant::NoAbs),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentVariant {
    Paired(PairVariant),
    PlainRandom,
}

/// `batch × z_dim` matrix of latent codes, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    values: Vec<f64>,
    batch: usize,
    z_dim: usize,
    variant: LatentVariant,
}

impl LatentBatch {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn z_dim(&self) -> usize {
        self.z_dim
    }

    pub fn variant(&self) -> LatentVariant {
        self.variant
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.z_dim..(i + 1) * self.z_dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.z_dim)
    }

    /// Number of pairs; zero for plain batches.
    pub fn num_pairs(&self) -> usize {
        match self.variant {
            LatentVariant::Paired(_) => self.batch / 2,
            LatentVariant::PlainRandom => 0,
        }
    }

    /// Members of pair `j`: rows `j` and `j + batch/2`.
    pub fn pair(&self, j: usize) -> (&[f64], &[f64]) {
        (self.row(j), self.row(j + self.batch / 2))
    }

    /// Dot product of every pair.
    pub fn pair_dots(&self) -> Vec<f64> {
        (0..self.num_pairs())
            .map(|j| {
                let (a, b) = self.pair(j);
                a.iter().zip(b).map(|(x, y)| x * y).sum()
            })
            .collect()
    }

    /// Reorders pairs so that new pair `j` is old pair `order[j]`.
    pub fn permute_pairs(&self, order: &[usize]) -> LatentBatch {
        let half = self.batch / 2;
        assert_eq!(order.len(), half, "permutation must cover every pair");
        let mut values = vec![0.0; self.values.len()];
        for (j, &src) in order.iter().enumerate() {
            let (a, b) = self.pair(src);
            values[j * self.z_dim..(j + 1) * self.z_dim].copy_from_slice(a);
            values[(j + half) * self.z_dim..(j + half + 1) * self.z_dim].copy_from_slice(b);
        }
        LatentBatch { values, ..self.clone() }
    }

    /// `[batch, z_dim]` tensor.
    pub fn to_matrix(&self) -> Tensor {
        Tensor::new(vec![self.batch, self.z_dim], self.values.clone()).expect("consistent shape")
    }

    /// `[batch, z_dim, 1, 1]` tensor, the generator input layout.
    pub fn to_image_input(&self) -> Tensor {
        Tensor::new(vec![self.batch, self.z_dim, 1, 1], self.values.clone()).expect("consistent shape")
    }
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// I.i.d. standard normal codes. Evaluation always samples this way.
pub fn sample_gaussian<R: Rng + ?Sized>(batch: usize, z_dim: usize, rng: &mut R) -> Result<LatentBatch, LatentError> {
    if batch == 0 {
        return Err(LatentError::EmptyBatch);
    }
    if z_dim == 0 {
        return Err(LatentError::ZDimTooSmall { min: 1, got: 0 });
    }
    Ok(LatentBatch {
        values: normal_vec(rng, batch * z_dim),
        batch,
        z_dim,
        variant: LatentVariant::PlainRandom,
    })
}

/// One orthogonal candidate before the acceptance test. A zero pivot
/// `n1[last]` is redrawn rather than divided by.
pub fn candidate_pair<R: Rng + ?Sized>(z_dim: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let last = z_dim - 1;
    loop {
        let n1 = normal_vec(rng, z_dim);
        let mut n2 = normal_vec(rng, z_dim);
        if n1[last] == 0.0 {
            continue;
        }
        let dr: f64 = n1[..last].iter().zip(&n2[..last]).map(|(a, b)| a * b).sum();
        n2[last] = -dr / n1[last];
        return (n1, n2);
    }
}

/// `batch / 2` accepted orthogonal pairs, pair `j` on rows `j` and `j + batch/2`.
pub fn orthogonal_pairs<R: Rng + ?Sized>(
    batch: usize,
    z_dim: usize,
    variant: PairVariant,
    rng: &mut R,
) -> Result<LatentBatch, LatentError> {
    if batch == 0 {
        return Err(LatentError::EmptyBatch);
    }
    if batch % 2 != 0 {
        return Err(LatentError::OddBatch(batch));
    }
    if z_dim < 2 {
        return Err(LatentError::ZDimTooSmall { min: 2, got: z_dim });
    }
    let half = batch / 2;
    let mut values = vec![0.0; batch * z_dim];
    let mut count = 0;
    while count < half {
        let (n1, n2) = candidate_pair(z_dim, rng);
        if !variant.accepts(n2[z_dim - 1]) {
            continue;
        }
        values[count * z_dim..(count + 1) * z_dim].copy_from_slice(&n1);
        values[(count + half) * z_dim..(count + half + 1) * z_dim].copy_from_slice(&n2);
        count += 1;
    }
    Ok(LatentBatch { values, batch, z_dim, variant: LatentVariant::Paired(variant) })
}

/// Monte-Carlo estimate of the candidate rejection probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RejectionEstimate {
    pub rate: f64,
    pub trials: usize,
    pub rejected: usize,
    /// Lower end of the 95% Wilson score interval.
    pub ci_low: f64,
    /// Upper end of the 95% Wilson score interval.
    pub ci_high: f64,
}

impl RejectionEstimate {
    pub fn ci_width(&self) -> f64 {
        self.ci_high - self.ci_low
    }
}

pub const MIN_REJECTION_TRIALS: usize = 10_000;

pub fn rejection_rate<R: Rng + ?Sized>(
    variant: PairVariant,
    z_dim: usize,
    trials: usize,
    rng: &mut R,
) -> Result<RejectionEstimate, LatentError> {
    if z_dim < 2 {
        return Err(LatentError::ZDimTooSmall { min: 2, got: z_dim });
    }
    if trials < MIN_REJECTION_TRIALS {
        return Err(LatentError::TooFewTrials { min: MIN_REJECTION_TRIALS, got: trials });
    }
    let rejected = (0..trials)
        .filter(|_| {
            let (_, n2) = candidate_pair(z_dim, rng);
            !variant.accepts(n2[z_dim - 1])
        })
        .count();
    let (ci_low, ci_high) = wilson_interval(rejected, trials, 1.959_963_984_540_054);
    Ok(RejectionEstimate { rate: rejected as f64 / trials as f64, trials, rejected, ci_low, ci_high })
}

fn wilson_interval(successes: usize, n: usize, z: f64) -> (f64, f64) {
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gaussian_shape_and_determinism() {
        let a = sample_gaussian(128, 100, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_gaussian(128, 100, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!((a.batch(), a.z_dim()), (128, 100));
        assert_eq!(a, b);
        assert_eq!(a.variant(), LatentVariant::PlainRandom);
        assert!(sample_gaussian(0, 3, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn gaussian_moments() {
        let z = sample_gaussian(1000, 100, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let n = z.values().len() as f64;
        let mean = z.values().iter().sum::<f64>() / n;
        let var = z.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn two_dim_construction_is_exactly_orthogonal_on_hand_values() {
        // n1 = (a, b), n2 = (c, -ac/b)
        let (a, b, c) = (0.75, -1.25, 2.0);
        let last = -(a * c) / b;
        assert_eq!(a * c + b * last, 0.0);
    }

    #[test]
    fn hand_trace_of_acceptance() {
        // n1 = (1, 2), raw n2 = (3, .): dr = 3, last = -1.5
        let last = -(1.0 * 3.0) / 2.0;
        assert_eq!(last, -1.5);
        assert!(!PairVariant::Abs.accepts(last));
        assert!(PairVariant::NoAbs.accepts(last));
        assert!(!PairVariant::NoAbs.accepts(1.5));
    }

    #[test]
    fn layout_pairs_rows_j_and_j_plus_half() {
        let z = orthogonal_pairs(4, 8, PairVariant::Abs, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(z.num_pairs(), 2);
        for (j, partner) in [(0usize, 2usize), (1, 3)] {
            let d: f64 = z.row(j).iter().zip(z.row(partner)).map(|(a, b)| a * b).sum();
            assert!(d.abs() <= 1e-12, "pair ({j},{partner}) dot {d}");
        }
    }

    #[test]
    fn pair_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(orthogonal_pairs(3, 4, PairVariant::Abs, &mut rng), Err(LatentError::OddBatch(3)));
        assert!(matches!(
            orthogonal_pairs(4, 1, PairVariant::Abs, &mut rng),
            Err(LatentError::ZDimTooSmall { .. })
        ));
        assert!(matches!(
            rejection_rate(PairVariant::Abs, 10, 100, &mut rng),
            Err(LatentError::TooFewTrials { .. })
        ));
    }

    #[test]
    fn permuting_pairs_keeps_pairing() {
        let z = orthogonal_pairs(8, 16, PairVariant::NoAbs, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let p = z.permute_pairs(&[3, 0, 2, 1]);
        assert_eq!(p.pair(0), z.pair(3));
        assert!(p.pair_dots().iter().all(|d| d.abs() <= 1e-10));
    }

    #[test]
    fn wilson_interval_contains_estimate() {
        let (lo, hi) = wilson_interval(230, 1000, 1.96);
        assert!(lo < 0.23 && 0.23 < hi);
        assert!(hi - lo < 0.06);
    }
}
