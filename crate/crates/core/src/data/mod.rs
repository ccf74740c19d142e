//! Dataset ingestion: PPM image folders, raw tensor files and the
//! synthetic ring of Gaussians.

mod ppm;

pub use ppm::{decode_ppm, encode_ppm};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autograd::Tensor;
use crate::eval::ModeSpec;
use crate::records::{io_err, Record, RecordError, RecordFile};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("no usable samples in {0}")]
    Empty(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Record(#[from] RecordError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Independent generator for one `(seed, purpose, index)` triple, so any
/// batch can be regenerated without replaying earlier ones.
pub fn keyed_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

const PURPOSE_SHUFFLE: u64 = 1;
const PURPOSE_RING: u64 = 2;
const PURPOSE_REFERENCE: u64 = 3;

/// Planar RGB image, `data[c * h * w + y * w + x]`, values in pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// The largest centred square; offsets round down.
    pub fn center_crop(&self) -> Image {
        let side = self.width.min(self.height);
        let x0 = (self.width - side) / 2;
        let y0 = (self.height - side) / 2;
        let mut data = Vec::with_capacity(3 * side * side);
        for c in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    data.push(self.at(c, y0 + y, x0 + x));
                }
            }
        }
        Image { width: side, height: side, data }
    }

    /// Bilinear resampling with pixel centres at `(i + 0.5) / n`.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        let axis = |dst: usize, src: usize| -> Vec<(usize, usize, f64)> {
            (0..dst)
                .map(|i| {
                    let s = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
                    let lo = s.floor() as usize;
                    let hi = (lo + 1).min(src - 1);
                    (lo, hi, s - lo as f64)
                })
                .collect()
        };
        let xs = axis(width, self.width);
        let ys = axis(height, self.height);
        let mut data = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let top = self.at(c, y0, x0) * (1.0 - fx) + self.at(c, y0, x1) * fx;
                    let bottom = self.at(c, y1, x0) * (1.0 - fx) + self.at(c, y1, x1) * fx;
                    data.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        Image { width, height, data }
    }

    /// Pixel values `0..=255` mapped to `[-1, 1]`.
    pub fn normalized(&self) -> Vec<f64> {
        self.data.iter().map(|v| v / 127.5 - 1.0).collect()
    }

    /// Inverse of [`Image::normalized`] for one `[3, h, w]` sample.
    pub fn from_normalized(values: &[f64], width: usize, height: usize) -> Image {
        let data = values.iter().map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).clamp(0.0, 255.0)).collect();
        Image { width, height, data }
    }
}

pub fn center_crop_resize(img: &Image, target: usize) -> Image {
    img.center_crop().resize(target, target)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&fs::read(path).map_err(|e| DataError::from(io_err(path, e)))?)
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| io_err(path, e).into())
}

/// Images or points held in memory as one `[N, ...]` tensor.
#[derive(Debug, Clone)]
pub struct TensorDataset {
    pub source: String,
    /// Files that contributed, in load order (empty for raw tensor files).
    pub files: Vec<PathBuf>,
    pub samples: Tensor,
    shuffled: Option<(u64, u64, Vec<usize>)>,
}

impl TensorDataset {
    pub fn new(source: impl Into<String>, files: Vec<PathBuf>, samples: Tensor) -> Result<Self> {
        let source = source.into();
        if samples.shape().first().copied().unwrap_or(0) == 0 {
            return Err(DataError::Empty(source));
        }
        if samples.data().iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid(format!("{source} contains non-finite values")));
        }
        Ok(TensorDataset { source, files, samples, shuffled: None })
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    fn permutation(&mut self, seed: u64, epoch: u64) -> &[usize] {
        let stale = !matches!(&self.shuffled, Some((s, e, _)) if *s == seed && *e == epoch);
        if stale {
            let mut order: Vec<usize> = (0..self.len()).collect();
            order.shuffle(&mut keyed_rng(seed, PURPOSE_SHUFFLE, epoch));
            self.shuffled = Some((seed, epoch, order));
        }
        &self.shuffled.as_ref().expect("just set").2
    }

    /// Batch `iteration` of an endless stream of seeded per-epoch shuffles.
    pub fn batch(&mut self, seed: u64, iteration: u64, batch: usize) -> Tensor {
        let n = self.len() as u64;
        let per: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(batch * per);
        for k in 0..batch as u64 {
            let pos = iteration * batch as u64 + k;
            let idx = self.permutation(seed, pos / n)[(pos % n) as usize];
            data.extend_from_slice(&self.samples.data()[idx * per..(idx + 1) * per]);
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(self.sample_shape());
        Tensor::new(shape, data).expect("shape")
    }
}

/// Loads the first `subset_n` decodable `.ppm` files of `dir` in
/// lexicographic order as `[N, 3, S, S]` images in `[-1, 1]`.
pub fn load_image_folder(dir: &Path, image_size: usize, subset_n: Option<usize>) -> Result<TensorDataset> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| DataError::from(io_err(dir, e)))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    files.sort();
    let limit = subset_n.unwrap_or(usize::MAX);
    let mut used = Vec::new();
    let mut data = Vec::new();
    for path in files {
        if used.len() >= limit {
            break;
        }
        match read_ppm(&path) {
            Ok(img) => {
                data.extend(center_crop_resize(&img, image_size).normalized());
                used.push(path);
            }
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if used.is_empty() {
        return Err(DataError::Empty(dir.display().to_string()));
    }
    let samples = Tensor::new(vec![used.len(), 3, image_size, image_size], data).expect("shape");
    TensorDataset::new(dir.display().to_string(), used, samples)
}

/// Writes `samples` as a raw tensor dataset file.
pub fn write_tensor_dataset(path: &Path, samples: &Tensor) -> Result<()> {
    let mut f = RecordFile::new("kind = tensor_dataset\n");
    f.push(Record::f64("samples", samples.shape().to_vec(), samples.data().to_vec())?);
    Ok(f.write(path)?)
}

pub fn read_tensor_dataset(path: &Path) -> Result<TensorDataset> {
    let f = RecordFile::read(path)?;
    if !f.header.lines().any(|l| l.split_once('=').is_some_and(|(k, v)| k.trim() == "kind" && v.trim() == "tensor_dataset")) {
        return Err(DataError::Invalid(format!("{} is not a tensor dataset file", path.display())));
    }
    let (shape, data) = f.require_f64("samples")?;
    if shape.len() < 2 {
        return Err(DataError::Invalid(format!("samples need rank >= 2, got {shape:?}")));
    }
    if shape.len() == 4 && data.iter().any(|v| v.abs() > 1.0) {
        return Err(DataError::Invalid("image samples must lie in [-1, 1]".into()));
    }
    TensorDataset::new(path.display().to_string(), Vec::new(), Tensor::new(shape, data).expect("validated by record"))
}

/// `modes` isotropic Gaussians evenly spaced on a circle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RingSpec {
    pub modes: usize,
    pub radius: f64,
    pub sigma: f64,
}

impl Default for RingSpec {
    fn default() -> Self {
        RingSpec { modes: 8, radius: 2.0, sigma: 0.05 }
    }
}

impl RingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.modes == 0 || !(self.sigma > 0.0) || !self.radius.is_finite() {
            return Err(DataError::Invalid(format!("ring needs modes >= 1 and sigma > 0, got {self:?}")));
        }
        Ok(())
    }

    pub fn centers(&self) -> Vec<[f64; 2]> {
        (0..self.modes)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / self.modes as f64;
                [self.radius * a.cos(), self.radius * a.sin()]
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<[f64; 2]> {
        let centers = self.centers();
        (0..n)
            .map(|_| {
                let c = centers[rng.random_range(0..self.modes)];
                let dx: f64 = rng.sample(StandardNormal);
                let dy: f64 = rng.sample(StandardNormal);
                [c[0] + self.sigma * dx, c[1] + self.sigma * dy]
            })
            .collect()
    }

    pub fn mode_spec(&self, count_threshold: usize) -> ModeSpec {
        ModeSpec { centers: self.centers(), sigma: self.sigma, count_threshold }
    }
}

pub fn points_to_tensor(points: &[[f64; 2]]) -> Tensor {
    Tensor::new(vec![points.len(), 2], points.iter().flatten().copied().collect()).expect("shape")
}

pub fn tensor_to_points(t: &Tensor) -> Option<Vec<[f64; 2]>> {
    (t.shape().len() == 2 && t.shape()[1] == 2).then(|| t.data().chunks_exact(2).map(|c| [c[0], c[1]]).collect())
}

/// Textual dataset selection: `ring[:modes=K,radius=R,sigma=S]`,
/// `folder:PATH` or `raw:PATH`.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Ring(RingSpec),
    Folder(PathBuf),
    Raw(PathBuf),
}

impl DatasetSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        match (kind, arg) {
            ("ring", arg) => {
                let mut spec = RingSpec::default();
                for kv in arg.unwrap_or("").split(',').filter(|p| !p.trim().is_empty()) {
                    let (k, v) = kv.split_once('=').ok_or_else(|| DataError::Invalid(format!("ring option {kv:?}")))?;
                    let bad = || DataError::Invalid(format!("ring option {kv:?}"));
                    match k.trim() {
                        "modes" => spec.modes = v.trim().parse().map_err(|_| bad())?,
                        "radius" => spec.radius = v.trim().parse().map_err(|_| bad())?,
                        "sigma" => spec.sigma = v.trim().parse().map_err(|_| bad())?,
                        _ => return Err(bad()),
                    }
                }
                spec.validate()?;
                Ok(DatasetSpec::Ring(spec))
            }
            ("folder", Some(p)) if !p.is_empty() => Ok(DatasetSpec::Folder(p.into())),
            ("raw", Some(p)) if !p.is_empty() => Ok(DatasetSpec::Raw(p.into())),
            _ => Err(DataError::Invalid(format!("unknown dataset {s:?}; expected ring, folder:PATH or raw:PATH"))),
        }
    }
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSpec::Ring(r) => write!(f, "ring:modes={},radius={},sigma={}", r.modes, r.radius, r.sigma),
            DatasetSpec::Folder(p) => write!(f, "folder:{}", p.display()),
            DatasetSpec::Raw(p) => write!(f, "raw:{}", p.display()),
        }
    }
}

/// A resolved training data source.
#[derive(Debug, Clone)]
pub enum Dataset {
    Ring(RingSpec),
    Tensor(TensorDataset),
}

impl Dataset {
    pub fn open(spec: &DatasetSpec, image_size: usize, subset_n: Option<usize>) -> Result<Self> {
        match spec {
            DatasetSpec::Ring(r) => {
                r.validate()?;
                Ok(Dataset::Ring(*r))
            }
            DatasetSpec::Folder(p) => Ok(Dataset::Tensor(load_image_folder(p, image_size, subset_n)?)),
            DatasetSpec::Raw(p) => {
                let mut ds = read_tensor_dataset(p)?;
                let s = ds.sample_shape().to_vec();
                if s.len() == 3 && (s[0] != 3 || s[1] != image_size || s[2] != image_size) {
                    return Err(DataError::Invalid(format!("{} holds {s:?} images, expected [3, {image_size}, {image_size}]", p.display())));
                }
                if let Some(n) = subset_n.filter(|&n| n < ds.len()) {
                    let per: usize = s.iter().product();
                    let mut shape = vec![n];
                    shape.extend_from_slice(&s);
                    ds.samples = Tensor::new(shape, ds.samples.data()[..n * per].to_vec()).expect("shape");
                }
                Ok(Dataset::Tensor(ds))
            }
        }
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        match self {
            Dataset::Ring(_) => vec![2],
            Dataset::Tensor(t) => t.sample_shape().to_vec(),
        }
    }

    /// The real batch for `iteration`; a pure function of its arguments.
    pub fn batch(&mut self, seed: u64, iteration: u64, batch: usize) -> Tensor {
        match self {
            Dataset::Ring(r) => points_to_tensor(&r.sample(batch, &mut keyed_rng(seed, PURPOSE_RING, iteration))),
            Dataset::Tensor(t) => t.batch(seed, iteration, batch),
        }
    }

    /// Every stored sample, or `ring_n` fresh ring points from a fixed
    /// stream.
    pub fn reference_samples(&self, seed: u64, ring_n: usize) -> Tensor {
        match self {
            Dataset::Ring(r) => points_to_tensor(&r.sample(ring_n, &mut keyed_rng(seed, PURPOSE_REFERENCE, 0))),
            Dataset::Tensor(t) => t.samples.clone(),
        }
    }
}
