//! Datasets: IDX image files, the synthetic temporal-pattern set, and minibatching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, Error, Result};
use crate::network::Input;
use crate::rng::{Purpose, RngStream, StreamKey};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Sample storage: one vector per sample, or one frame per timestep per sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Samples<S> {
    /// `[n × d]`
    Static(Tensor<S>),
    /// `[T × n × d]`
    Temporal(Tensor<S>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S> {
    samples: Samples<S>,
    labels: Vec<usize>,
    num_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<S> {
    pub input: Input<S>,
    pub labels: Vec<usize>,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(samples: Samples<S>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let n = match &samples {
            Samples::Static(x) if x.shape().len() == 2 => x.shape()[0],
            Samples::Temporal(x) if x.shape().len() == 3 => x.shape()[1],
            Samples::Static(x) | Samples::Temporal(x) => {
                return dim_err(format!("unexpected sample tensor shape {:?}", x.shape()))
            }
        };
        if n != labels.len() {
            return Err(Error::Format(format!(
                "{n} samples but {} labels",
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Domain(format!(
                "label {l} outside [0, {num_classes})"
            )));
        }
        Ok(Dataset {
            samples,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        match &self.samples {
            Samples::Static(x) | Samples::Temporal(x) => x.cols(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn samples(&self) -> &Samples<S> {
        &self.samples
    }

    /// Number of frames for temporal data, `None` for static data.
    pub fn timesteps(&self) -> Option<usize> {
        match &self.samples {
            Samples::Static(_) => None,
            Samples::Temporal(x) => Some(x.shape()[0]),
        }
    }

    /// Gathers the listed samples into a network input.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch<S>> {
        if indices.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Domain(format!("sample index {i} out of range")));
        }
        let d = self.dim();
        let b = indices.len();
        let input = match &self.samples {
            Samples::Static(x) => {
                let mut data = Vec::with_capacity(b * d);
                for &i in indices {
                    data.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
                }
                Input::Static(Tensor::new(vec![b, d], data)?)
            }
            Samples::Temporal(x) => {
                let (t_steps, n) = (x.shape()[0], x.shape()[1]);
                let mut data = Vec::with_capacity(t_steps * b * d);
                for t in 0..t_steps {
                    for &i in indices {
                        let start = (t * n + i) * d;
                        data.extend_from_slice(&x.data()[start..start + d]);
                    }
                }
                Input::Temporal(Tensor::new(vec![t_steps, b, d], data)?)
            }
        };
        Ok(Batch {
            input,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Dataset restricted to the listed samples, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let b = self.batch(indices)?;
        let samples = match b.input {
            Input::Static(x) => Samples::Static(x),
            Input::Temporal(x) => Samples::Temporal(x),
        };
        Dataset::new(samples, b.labels, self.num_classes)
    }

    /// Global mean and standard deviation over every stored value.
    pub fn value_stats(&self) -> (f64, f64) {
        let data = match &self.samples {
            Samples::Static(x) | Samples::Temporal(x) => x.data(),
        };
        let n = data.len() as f64;
        let mean = data.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let var = data
            .iter()
            .map(|v| (v.as_f64() - mean).powi(2))
            .sum::<f64>()
            / n;
        (mean, var.sqrt())
    }

    /// `x ← (x − mean) / std` in place.
    pub fn standardize(&mut self, mean: f64, std: f64) -> Result<()> {
        if !(std > 0.0) {
            return Err(Error::Domain(format!(
                "standard deviation {std} must be positive"
            )));
        }
        let (m, s) = (S::lit(mean), S::lit(std));
        let x = match &mut self.samples {
            Samples::Static(x) | Samples::Temporal(x) => x,
        };
        for v in x.data_mut() {
            *v = (*v - m) / s;
        }
        Ok(())
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parsed rank-3 `u8` IDX payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = read_u32_be(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "images: bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_u32_be(bytes, 4, "images")? as usize;
    let rows = read_u32_be(bytes, 8, "images")? as usize;
    let cols = read_u32_be(bytes, 12, "images")? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Format(format!(
            "images: truncated, header promises {need} bytes but {} remain",
            body.len()
        )));
    }
    if body.len() > need {
        return Err(Error::Format(format!(
            "images: {} trailing bytes after payload",
            body.len() - need
        )));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32_be(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "labels: bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = read_u32_be(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Format(format!(
            "labels: truncated, header promises {count} bytes but {} remain",
            body.len()
        )));
    }
    if body.len() > count {
        return Err(Error::Format(format!(
            "labels: {} trailing bytes after payload",
            body.len() - count
        )));
    }
    Ok(body.to_vec())
}

/// Serializes images in IDX rank-3 `u8` layout.
pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IDX_IMAGES_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

/// Serializes labels in IDX rank-1 `u8` layout.
pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a static dataset from parsed IDX payloads. With `normalize`, bytes map to `[0, 1]`.
pub fn dataset_from_idx<S: Scalar>(
    images: &IdxImages,
    labels: &[u8],
    normalize: bool,
) -> Result<Dataset<S>> {
    if images.count != labels.len() {
        return Err(Error::Format(format!(
            "count mismatch: {} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    if images.count == 0 {
        return Err(Error::Format("IDX files contain no samples".into()));
    }
    let data: Vec<S> = images
        .pixels
        .iter()
        .map(|&b| {
            S::lit(if normalize {
                b as f64 / 255.0
            } else {
                b as f64
            })
        })
        .collect();
    let x = Tensor::new(vec![images.count, images.rows * images.cols], data)?;
    let num_classes = labels
        .iter()
        .copied()
        .max()
        .map_or(0, |m| m as usize + 1)
        .max(10);
    Dataset::new(
        Samples::Static(x),
        labels.iter().map(|&l| l as usize).collect(),
        num_classes,
    )
}

pub fn load_idx<S: Scalar>(
    images_path: &Path,
    labels_path: &Path,
    normalize: bool,
) -> Result<Dataset<S>> {
    let read = |p: &Path| fs::read(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())));
    let images = parse_idx_images(&read(images_path)?)?;
    let labels = parse_idx_labels(&read(labels_path)?)?;
    dataset_from_idx(&images, &labels, normalize)
}

/// Class-prototype patterns that only appear from `window_start` onwards; earlier frames
/// are pure noise.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub dim: usize,
    pub timesteps: usize,
    pub window_start: usize,
    pub noise_sigma: f64,
    pub pattern_scale: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 4,
            dim: 32,
            timesteps: 8,
            window_start: 4,
            noise_sigma: 0.2,
            pattern_scale: 1.0,
            train_per_class: 250,
            test_per_class: 100,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim == 0 || self.timesteps == 0 {
            return Err(Error::Domain(format!(
                "synthetic data needs ≥2 classes, dim ≥1 and ≥1 timestep: {self:?}"
            )));
        }
        if self.window_start >= self.timesteps {
            return Err(Error::Domain(format!(
                "informative window start {} must be below T = {}",
                self.window_start, self.timesteps
            )));
        }
        if !(self.noise_sigma >= 0.0) || !(self.pattern_scale >= 0.0) {
            return Err(Error::Domain(
                "noise sigma and pattern scale must be non-negative".into(),
            ));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Domain(
                "each split needs at least one sample per class".into(),
            ));
        }
        Ok(())
    }

    /// `[classes × dim]` prototypes, shared by both splits.
    pub fn prototypes(&self) -> Vec<f64> {
        let stream = RngStream::new(self.seed, StreamKey::new(Purpose::Synthetic, 0, 0, 0));
        let mut rng = stream.rng();
        (0..self.classes * self.dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                self.pattern_scale * z
            })
            .collect()
    }
}

/// Temporal dataset `[T × n × d]`; sample `i` belongs to class `i mod K`.
pub fn generate_synthetic<S: Scalar>(spec: &SynthSpec, split: Split) -> Result<Dataset<S>> {
    spec.validate()?;
    let protos = spec.prototypes();
    let per_class = match split {
        Split::Train => spec.train_per_class,
        Split::Test => spec.test_per_class,
    };
    let n = per_class * spec.classes;
    let d = spec.dim;
    let labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    let key = StreamKey::new(Purpose::Synthetic, 0, 1 + split as u64, 0);
    let mut rng = RngStream::new(spec.seed, key).rng();
    let mut data = Vec::with_capacity(spec.timesteps * n * d);
    for t in 0..spec.timesteps {
        let informative = t >= spec.window_start;
        for &c in &labels {
            for j in 0..d {
                let noise = if spec.noise_sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    spec.noise_sigma * z
                } else {
                    0.0
                };
                let base = if informative { protos[c * d + j] } else { 0.0 };
                data.push(S::lit(base + noise));
            }
        }
    }
    let x = Tensor::new(vec![spec.timesteps, n, d], data)?;
    Dataset::new(Samples::Temporal(x), labels, spec.classes)
}

/// Sample order for one epoch: a keyed permutation, or natural order without a stream.
pub fn epoch_order(n: usize, shuffle: Option<&RngStream>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(stream) = shuffle {
        order.shuffle(&mut stream.rng());
    }
    order
}

/// Minibatches covering every sample once; the last batch may be smaller.
pub fn batches<'a, S: Scalar>(
    dataset: &'a Dataset<S>,
    batch_size: usize,
    shuffle: Option<&RngStream>,
) -> Result<impl Iterator<Item = Result<Batch<S>>> + 'a> {
    if batch_size == 0 {
        return Err(Error::Domain("batch size must be at least 1".into()));
    }
    let order = epoch_order(dataset.len(), shuffle);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().map(move |idx| dataset.batch(&idx)))
}

pub fn num_batches(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}
