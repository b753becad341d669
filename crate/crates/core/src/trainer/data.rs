//! Desk-scale datasets.
//!
//! External image sets use a raw little-endian binary file:
//!
//! ```text
//! u32 count, u32 c, u32 h, u32 w
//! f32 × count·c·h·w   samples, NCHW
//! u16 × count         labels
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{DenseTensor4, Shape4};

fn default_validation() -> f64 {
    0.1
}

/// Dataset source plus the validation fraction carved from training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    #[serde(flatten)]
    pub source: DatasetSource,
    #[serde(default = "default_validation")]
    pub validation_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    /// Single-channel images with one Gaussian blob whose position encodes
    /// the class.
    SyntheticImages {
        classes: usize,
        size: usize,
        train: usize,
        test: usize,
        /// Standard deviation of the pixel noise.
        noise: f64,
        /// Maximum shift of the blob centre from its class anchor, pixels.
        jitter: f64,
    },
    /// Multichannel sequences driven by a few latent sinusoids; anomalous
    /// samples carry level shifts on some channels.
    #[serde(rename = "synthetic-1d")]
    Synthetic1d {
        channels: usize,
        length: usize,
        train: usize,
        test: usize,
        anomaly_rate: f64,
    },
    TinyImageSubset {
        train_path: PathBuf,
        test_path: PathBuf,
        classes: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification { classes: usize },
    /// Labels are 1 for anomalous samples.
    Anomaly,
}

/// Inputs with one label per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub x: DenseTensor4<T>,
    pub labels: Vec<u16>,
}

impl<T: Scalar> Split<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn gather(&self, idx: &[usize]) -> Split<T> {
        Split {
            x: self.x.gather_batch(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn slice(&self, r: std::ops::Range<usize>) -> Split<T> {
        Split {
            x: self.x.slice_batch(r.clone()),
            labels: self.labels[r].to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub task: Task,
    pub train: Split<T>,
    pub validation: Split<T>,
    pub test: Split<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn split(&self, kind: SplitKind) -> &Split<T> {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Validation => &self.validation,
            SplitKind::Test => &self.test,
        }
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.train.x.shape();
        [s.c, s.h, s.w]
    }
}

fn validation_count(n: usize, fraction: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(invalid!("validation fraction {fraction} outside [0, 1)"));
    }
    let v = (n as f64 * fraction).round() as usize;
    if v == 0 || v >= n {
        return Err(invalid!("validation fraction {fraction} leaves an empty split of {n} samples"));
    }
    Ok(v)
}

/// Deterministic datasets for `config`.
pub fn make_datasets<T: Scalar>(config: &DatasetConfig, seed: u64) -> Result<Dataset<T>> {
    let frac = config.validation_fraction;
    match &config.source {
        DatasetSource::SyntheticImages { classes, size, train, test, noise, jitter } => {
            let gen = BlobImages::new(*classes, *size, *noise, *jitter)?;
            let val = validation_count(*train, frac)?;
            Ok(Dataset {
                task: Task::Classification { classes: *classes },
                train: gen.generate(train - val, seed ^ 0x7452_4149)?,
                validation: gen.generate(val, seed ^ 0x5641_4c49)?,
                test: gen.generate(*test, seed ^ 0x5445_5354)?,
            })
        }
        DatasetSource::Synthetic1d { channels, length, train, test, anomaly_rate } => {
            let gen = LatentSequences::new(*channels, *length, *anomaly_rate, seed)?;
            let val = validation_count(*train, frac)?;
            Ok(Dataset {
                task: Task::Anomaly,
                train: gen.generate(train - val, seed ^ 0x7452_4149)?,
                validation: gen.generate(val, seed ^ 0x5641_4c49)?,
                test: gen.generate(*test, seed ^ 0x5445_5354)?,
            })
        }
        DatasetSource::TinyImageSubset { train_path, test_path, classes } => {
            let full = read_image_file::<T>(train_path)?;
            let test = read_image_file::<T>(test_path)?;
            for s in [&full, &test] {
                if let Some(&bad) = s.labels.iter().find(|&&l| l as usize >= *classes) {
                    return Err(Error::Format(format!("label {bad} outside {classes} classes")));
                }
            }
            let val = validation_count(full.len(), frac)?;
            let mut order: Vec<usize> = (0..full.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            Ok(Dataset {
                task: Task::Classification { classes: *classes },
                validation: full.gather(&order[..val]),
                train: full.gather(&order[val..]),
                test,
            })
        }
    }
}

struct BlobImages {
    classes: usize,
    size: usize,
    noise: f64,
    jitter: f64,
}

impl BlobImages {
    fn new(classes: usize, size: usize, noise: f64, jitter: f64) -> Result<Self> {
        if classes < 2 || classes > u16::MAX as usize || size < 4 || noise < 0.0 || jitter < 0.0 {
            return Err(invalid!("bad synthetic-images parameters"));
        }
        Ok(BlobImages { classes, size, noise, jitter })
    }

    /// Class anchors sit evenly on a circle around the image centre.
    fn anchor(&self, class: usize) -> (f64, f64) {
        let c = (self.size as f64 - 1.0) / 2.0;
        let r = self.size as f64 / 4.0;
        let a = std::f64::consts::TAU * class as f64 / self.classes as f64;
        (c + r * a.sin(), c + r * a.cos())
    }

    fn generate<T: Scalar>(&self, n: usize, seed: u64) -> Result<Split<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, self.noise).map_err(|e| invalid!("{e}"))?;
        let s = self.size;
        let mut data = Vec::with_capacity(n * s * s);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % self.classes;
            let (ay, ax) = self.anchor(class);
            let cy = ay + rng.gen_range(-1.0..=1.0) * self.jitter;
            let cx = ax + rng.gen_range(-1.0..=1.0) * self.jitter;
            let width = rng.gen_range(1.2..2.0);
            for y in 0..s {
                for x in 0..s {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let v = (-d2 / (2.0 * width * width)).exp() + noise.sample(&mut rng);
                    data.push(T::lit(v));
                }
            }
            labels.push(class as u16);
        }
        let mut split = Split { x: DenseTensor4::from_vec(Shape4::new(n, 1, s, s), data)?, labels };
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        split = split.gather(&order);
        Ok(split)
    }
}

const LATENTS: usize = 3;

struct LatentSequences {
    channels: usize,
    length: usize,
    rate: f64,
    mixing: Vec<f64>,
}

impl LatentSequences {
    fn new(channels: usize, length: usize, rate: f64, seed: u64) -> Result<Self> {
        if channels < 4 || length < 16 || !(0.0..=1.0).contains(&rate) {
            return Err(invalid!("bad synthetic-1d parameters"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4d49_5849);
        let unit = Normal::new(0.0, 1.0 / (LATENTS as f64).sqrt()).map_err(|e| invalid!("{e}"))?;
        let mixing = (0..channels * LATENTS).map(|_| unit.sample(&mut rng)).collect();
        Ok(LatentSequences { channels, length, rate, mixing })
    }

    /// Exactly `round(rate·n)` samples are anomalous, at random positions.
    fn generate<T: Scalar>(&self, n: usize, seed: u64) -> Result<Split<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.05).map_err(|e| invalid!("{e}"))?;
        let anomalies = (self.rate * n as f64).round() as usize;
        let mut labels = vec![0u16; n];
        labels[..anomalies].fill(1);
        labels.shuffle(&mut rng);
        let (c, l) = (self.channels, self.length);
        let mut data = Vec::with_capacity(n * c * l);
        let mut sample = vec![0.0f64; c * l];
        for &label in &labels {
            let mut latent = [[0.0f64; LATENTS]; 2];
            for k in 0..LATENTS {
                latent[0][k] = rng.gen_range(0.02..0.12) * std::f64::consts::TAU;
                latent[1][k] = rng.gen_range(0.0..std::f64::consts::TAU);
            }
            let amp: [f64; LATENTS] = std::array::from_fn(|_| rng.gen_range(0.5..1.5));
            for ch in 0..c {
                let mix = &self.mixing[ch * LATENTS..(ch + 1) * LATENTS];
                for t in 0..l {
                    let mut v = noise.sample(&mut rng);
                    for k in 0..LATENTS {
                        v += mix[k] * amp[k] * (latent[0][k] * t as f64 + latent[1][k]).sin();
                    }
                    sample[ch * l + t] = v;
                }
            }
            if label == 1 {
                let seg = rng.gen_range(l / 5..=l / 3);
                let start = rng.gen_range(0..=l - seg);
                for _ in 0..4 {
                    let ch = rng.gen_range(0..c);
                    let shift = rng.gen_range(1.5..2.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    sample[ch * l + start..ch * l + start + seg].iter_mut().for_each(|v| *v += shift);
                }
            }
            data.extend(sample.iter().map(|&v| T::lit(v)));
        }
        Ok(Split { x: DenseTensor4::from_vec(Shape4::new(n, c, l, 1), data)?, labels })
    }
}

/// Reads the raw binary image format documented at module level.
pub fn read_image_file<T: Scalar>(path: &Path) -> Result<Split<T>> {
    let file = File::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut word = [0u8; 4];
    let mut dims = [0usize; 4];
    for d in &mut dims {
        r.read_exact(&mut word)?;
        *d = u32::from_le_bytes(word) as usize;
    }
    let [n, c, h, w] = dims;
    let shape = Shape4::new(n, c, h, w);
    let mut raw = vec![0u8; shape.len() * 4];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    let mut lab = vec![0u8; n * 2];
    r.read_exact(&mut lab)?;
    let labels = lab.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
    if r.read(&mut word)? != 0 {
        return Err(Error::Format(format!("{}: trailing bytes", path.display())));
    }
    Ok(Split { x: DenseTensor4::from_vec(shape, data)?, labels })
}

pub fn write_image_file<T: Scalar>(path: &Path, split: &Split<T>) -> Result<()> {
    let s = split.x.shape();
    if s.n != split.labels.len() {
        return Err(shape_err!("{} labels for {} samples", split.labels.len(), s.n));
    }
    let mut w = BufWriter::new(File::create(path)?);
    for d in [s.n, s.c, s.h, s.w] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in split.x.data() {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    for l in &split.labels {
        w.write_all(&l.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}
