//! Fréchet distance between feature distributions, feature extractors, and
//! mode coverage for the 2-D benchmark.

mod extract;
pub mod linalg;

pub use extract::{DiscriminatorFeatures, ExtractorTag, FeatureExtractor, Identity, RandomCnn};

use std::path::Path;

use thiserror::Error;

use crate::autograd::{AutogradError, Tensor};
use crate::nets::NetError;
use crate::records::{Record, RecordError, RecordFile};

/// Eigenvalues of a covariance product down to `-CLIP_TOL · max(1, max|λ|)`
/// count as numerical zero.
pub const CLIP_TOL: f64 = 1e-10;
/// Generated-sample count per evaluation.
pub const DEFAULT_EVAL_N: usize = 128;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("feature dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("eigen-solver did not converge within {0} sweeps")]
    NoConvergence(usize),
    #[error("covariance product has eigenvalue {0}, beyond the clipping tolerance")]
    NegativeEigenvalue(f64),
    #[error("non-finite value in statistics")]
    NonFinite,
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Record(#[from] RecordError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Mean and covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    mean: Vec<f64>,
    /// Row-major `d × d`.
    cov: Vec<f64>,
    n: usize,
}

impl GaussianStats {
    /// Validates shapes and symmetrizes `cov`.
    pub fn new(mean: Vec<f64>, mut cov: Vec<f64>, n: usize) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(EvalError::Invalid("zero-dimensional statistics".into()));
        }
        if cov.len() != d * d {
            return Err(EvalError::DimMismatch(d * d, cov.len()));
        }
        if n < 2 {
            return Err(EvalError::TooFewSamples(n));
        }
        if mean.iter().chain(&cov).any(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite);
        }
        for i in 0..d {
            for j in i + 1..d {
                let s = 0.5 * (cov[i * d + j] + cov[j * d + i]);
                cov[i * d + j] = s;
                cov[j * d + i] = s;
            }
        }
        Ok(GaussianStats { mean, cov, n })
    }

    /// Mean and unbiased covariance of `n` row-major feature vectors.
    pub fn from_features(features: &[f64], n: usize, d: usize) -> Result<Self> {
        if n < 2 {
            return Err(EvalError::TooFewSamples(n));
        }
        if d == 0 || features.len() != n * d {
            return Err(EvalError::Invalid(format!("{} values do not form {n} rows of width {d}", features.len())));
        }
        let mut mean = vec![0.0; d];
        for row in features.chunks_exact(d) {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        let mut centred = vec![0.0; d];
        for row in features.chunks_exact(d) {
            for ((c, x), m) in centred.iter_mut().zip(row).zip(&mean) {
                *c = x - m;
            }
            for i in 0..d {
                let ci = centred[i];
                for j in i..d {
                    cov[i * d + j] += ci * centred[j];
                }
            }
        }
        let denom = (n - 1) as f64;
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / denom;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        GaussianStats::new(mean, cov, n)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &[f64] {
        &self.cov
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn trace(&self) -> f64 {
        let d = self.dim();
        (0..d).map(|i| self.cov[i * d + i]).sum()
    }

    /// Stats-cache file with the extractor tag in the header.
    pub fn to_record_file(&self, extractor_tag: &str) -> RecordFile {
        let d = self.dim();
        let mut f = RecordFile::new(format!("kind = gaussian_stats\nextractor = {extractor_tag}\n"));
        f.push(Record::f64("mean", vec![d], self.mean.clone()).expect("shape"));
        f.push(Record::f64("cov", vec![d, d], self.cov.clone()).expect("shape"));
        f.push(Record::u64s("n", vec![self.n as u64]));
        f
    }

    /// Returns the stats and the extractor tag they were computed with.
    pub fn from_record_file(f: &RecordFile) -> Result<(Self, String)> {
        let mut kind = None;
        let mut tag = None;
        for line in f.header.lines() {
            if let Some((k, v)) = line.split_once('=') {
                match k.trim() {
                    "kind" => kind = Some(v.trim().to_string()),
                    "extractor" => tag = Some(v.trim().to_string()),
                    _ => {}
                }
            }
        }
        if kind.as_deref() != Some("gaussian_stats") {
            return Err(EvalError::Invalid("file does not hold Gaussian statistics".into()));
        }
        let (_, mean) = f.require_f64("mean")?;
        let (cshape, cov) = f.require_f64("cov")?;
        let d = mean.len();
        if cshape != [d, d] {
            return Err(EvalError::Invalid(format!("covariance shape {cshape:?} for {d} features")));
        }
        let n = f.require_u64("n")?.first().copied().unwrap_or(0) as usize;
        Ok((GaussianStats::new(mean, cov, n)?, tag.unwrap_or_default()))
    }

    pub fn save(&self, path: &Path, extractor_tag: &str) -> Result<()> {
        Ok(self.to_record_file(extractor_tag).write(path)?)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        GaussianStats::from_record_file(&RecordFile::read(path)?)
    }
}

/// `‖μa − μb‖² + Tr Σa + Tr Σb − 2 Tr (Σa^{1/2} Σb Σa^{1/2})^{1/2}`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(EvalError::DimMismatch(d, b.dim()));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let sa = linalg::psd_sqrt(&a.cov, d, CLIP_TOL)?;
    let inner = linalg::matmul(&linalg::matmul(&sa, &b.cov, d), &sa, d);
    let (mut evals, _) = linalg::symmetric_eigen(&inner, d)?;
    linalg::clip_negative(&mut evals, CLIP_TOL)?;
    let cross: f64 = evals.iter().map(|e| e.sqrt()).sum();
    let fd = mean_term + a.trace() + b.trace() - 2.0 * cross;
    if !fd.is_finite() {
        return Err(EvalError::NonFinite);
    }
    Ok(fd.max(0.0))
}

/// Extracts features from `samples` (leading axis = sample) and fits them.
pub fn feature_stats(samples: &Tensor, extractor: &mut dyn FeatureExtractor) -> Result<GaussianStats> {
    let n = samples.shape().first().copied().unwrap_or(0);
    if n < 2 {
        return Err(EvalError::TooFewSamples(n));
    }
    let feats = extractor.extract(samples)?;
    GaussianStats::from_features(feats.data(), n, extractor.output_dim())
}

/// Mixture layout scored by [`mode_coverage`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSpec {
    pub centers: Vec<[f64; 2]>,
    pub sigma: f64,
    /// High-quality samples a mode needs to count as covered.
    pub count_threshold: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeCoverage {
    pub modes_covered: usize,
    pub high_quality_fraction: f64,
}

/// A sample is high-quality when within `3σ` of its nearest center.
pub fn mode_coverage(points: &[[f64; 2]], spec: &ModeSpec) -> Result<ModeCoverage> {
    if spec.centers.is_empty() || !(spec.sigma > 0.0) {
        return Err(EvalError::Invalid("mode spec needs at least one center and sigma > 0".into()));
    }
    let radius2 = (3.0 * spec.sigma).powi(2);
    let mut counts = vec![0usize; spec.centers.len()];
    let mut hq = 0usize;
    for p in points {
        let (best, d2) = spec
            .centers
            .iter()
            .map(|c| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2))
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (k, d2)| if d2 < acc.1 { (k, d2) } else { acc });
        if d2 <= radius2 {
            hq += 1;
            counts[best] += 1;
        }
    }
    let modes_covered = counts.iter().filter(|&&c| c >= spec.count_threshold.max(1)).count();
    let high_quality_fraction = if points.is_empty() { 0.0 } else { hq as f64 / points.len() as f64 };
    Ok(ModeCoverage { modes_covered, high_quality_fraction })
}
