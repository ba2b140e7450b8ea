//! Datasets and the client side of federated learning.
//!
//! Images are stored in `[0, 1]`; models see them after per-channel
//! normalization. [`Update`]s are what an honest-but-curious server observes.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{loss_and_grads, GradientReport, ModelSpec, Params, TensorMap};
use crate::rng;
use crate::tensor::Tensor;

/// Per-channel affine map between pixel space and model space.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Channel statistics of an `n × c × h × w` batch. Near-constant channels get std 1.
    pub fn from_images(images: &Tensor) -> Self {
        let s = images.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let vals = (0..n).flat_map(|i| {
                let off = (i * c + ch) * hw;
                images.data()[off..off + hw].iter().copied()
            });
            let (mut sum, mut sq, mut cnt) = (0.0, 0.0, 0.0);
            for v in vals {
                sum += v;
                sq += v * v;
                cnt += 1.0;
            }
            let m = sum / cnt;
            let var = (sq / cnt - m * m).max(0.0);
            mean[ch] = m;
            std[ch] = if var.sqrt() < 1e-6 { 1.0 } else { var.sqrt() };
        }
        Self { mean, std }
    }

    fn apply(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let s = x.shape();
        let (c, hw) = (s[1], s[2] * s[3]);
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / hw) % c;
            *v = f(*v, self.mean[ch], self.std[ch]);
        }
        out
    }

    pub fn normalize(&self, x: &Tensor) -> Tensor {
        self.apply(x, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, x: &Tensor) -> Tensor {
        self.apply(x, |v, m, s| v * s + m)
    }

    /// Back to pixel space, clamped to `[0, 1]`.
    pub fn to_pixels(&self, x: &Tensor) -> Tensor {
        self.denormalize(x).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    /// `n × c × h × w`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub name: String,
    pub norm: Normalization,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, name: impl Into<String>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Shape(format!("dataset images must be n×c×h×w, got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Shape(format!("{} images but {} labels", images.shape()[0], labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Invalid(format!("label {bad} out of range for {classes} classes")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("dataset pixels must lie in [0, 1]".into()));
        }
        let norm = Normalization::from_images(&images);
        Ok(Self { images, labels, classes, name: name.into(), norm })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[c, h, w]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Rows `idx` in pixel space with their labels.
    pub fn select(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.images.select_rows(idx)?;
        Ok((x, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let (x, y) = self.select(idx)?;
        Ok(Dataset { images: x, labels: y, classes: self.classes, name: self.name.clone(), norm: self.norm.clone() })
    }

    /// Replaces the normalization, e.g. to share a client's statistics with an auxiliary set.
    pub fn with_norm(mut self, norm: Normalization) -> Self {
        self.norm = norm;
        self
    }

    /// Indices of samples with label `y`.
    pub fn indices_of(&self, y: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == y).collect()
    }
}

pub const CIFAR_RECORD: usize = 3073;

/// Reads the CIFAR-10 binary layout: a label byte then 3072 channel-major pixels per record.
pub fn load_cifar10(path: &Path, subset: Option<&[usize]>) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    parse_cifar10(&bytes, subset)
}

pub fn parse_cifar10(bytes: &[u8], subset: Option<&[usize]>) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "CIFAR-10 file size {} is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let all: Vec<usize> = (0..n).collect();
    let idx = subset.unwrap_or(&all);
    if idx.is_empty() {
        return Err(Error::Invalid("empty CIFAR-10 subset".into()));
    }
    let mut data = Vec::with_capacity(idx.len() * 3072);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        if i >= n {
            return Err(Error::Invalid(format!("subset index {i} out of range for {n} records")));
        }
        let rec = &bytes[i * CIFAR_RECORD..(i + 1) * CIFAR_RECORD];
        if rec[0] > 9 {
            return Err(Error::Format(format!("record {i}: label byte {} > 9", rec[0])));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    let images = Tensor::new(vec![idx.len(), 3, 32, 32], data)?;
    Dataset::new(images, labels, 10, "cifar10")
}

/// Knobs for the synthetic blob distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthOptions {
    /// Selects the class prototypes; different families are different distributions.
    pub family: u64,
    /// Multiplies prototype blob widths.
    pub width_scale: f64,
    /// Per-sample jitter strength relative to the default.
    pub jitter: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { family: 0, width_scale: 1.0, jitter: 1.0 }
    }
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    amp: f64,
}

const BLOBS: usize = 3;

fn prototypes(classes: usize, c: usize, opts: &SynthOptions) -> Vec<Blob> {
    let mut r = rng::stream(0x5eed_b10b ^ opts.family, 1);
    (0..classes * c * BLOBS)
        .map(|_| Blob {
            cy: r.random_range(0.15..0.85),
            cx: r.random_range(0.15..0.85),
            sigma: r.random_range(0.12..0.35) * opts.width_scale,
            amp: r.random_range(0.3..1.0) * if r.random_bool(0.5) { 1.0 } else { -1.0 },
        })
        .collect()
}

/// Smooth images built from three Gaussian blobs per channel.
///
/// Blob layouts are class prototypes fixed by the family; each sample jitters
/// them with its own randomness and each channel is min-max scaled to `[0, 1]`.
/// Labels are assigned round-robin.
pub fn synth_dataset(n: usize, c: usize, h: usize, w: usize, classes: usize, seed: u64) -> Result<Dataset> {
    synth_dataset_with(n, c, h, w, classes, seed, &SynthOptions::default())
}

pub fn synth_dataset_with(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    classes: usize,
    seed: u64,
    opts: &SynthOptions,
) -> Result<Dataset> {
    if n == 0 || c == 0 || h == 0 || w == 0 || classes == 0 {
        return Err(Error::Invalid("synthetic dataset dimensions must be positive".into()));
    }
    let protos = prototypes(classes, c, opts);
    let mut r = rng::stream(seed, 2);
    let j = 0.08 * opts.jitter;
    let mut data = Vec::with_capacity(n * c * h * w);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut plane = vec![0.0; h * w];
    for &y in &labels {
        for ch in 0..c {
            plane.iter_mut().for_each(|v| *v = 0.0);
            for b in &protos[(y * c + ch) * BLOBS..(y * c + ch + 1) * BLOBS] {
                let cy = (b.cy + j * rng::normal(&mut r)) * h as f64;
                let cx = (b.cx + j * rng::normal(&mut r)) * w as f64;
                let sigma = b.sigma * (0.15 * opts.jitter * rng::normal(&mut r)).exp() * h.max(w) as f64;
                let amp = b.amp + 0.2 * opts.jitter * rng::normal(&mut r);
                for py in 0..h {
                    for px in 0..w {
                        let d2 = (py as f64 + 0.5 - cy).powi(2) + (px as f64 + 0.5 - cx).powi(2);
                        plane[py * w + px] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
            let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi - lo < 1e-12 {
                data.extend(std::iter::repeat_n(0.5, h * w));
            } else {
                data.extend(plane.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)));
            }
        }
    }
    let images = Tensor::new(vec![n, c, h, w], data)?;
    Dataset::new(images, labels, classes, format!("synth-f{}", opts.family))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateKind {
    FedSgdGradient,
    FedAvgDelta,
}

/// What the client sends to the server.
#[derive(Clone, Debug)]
pub struct Update {
    pub kind: UpdateKind,
    pub tensors: TensorMap,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Number of local samples behind the update.
    pub samples: usize,
}

/// The client's private batch, kept only for evaluation.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    /// Normalized inputs as fed to the model.
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl ClientConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Invalid(format!(
                "client config needs B ≥ 1, E ≥ 1, η ≥ 0; got B={}, E={}, η={}",
                self.batch_size, self.epochs, self.lr
            )));
        }
        Ok(())
    }

    /// Local SGD steps for `n` samples.
    pub fn steps(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch_size)
    }
}

/// Gradient update for an explicit normalized batch.
pub fn client_gradient(spec: &ModelSpec, params: &Params, x: &Tensor, labels: &[usize]) -> Result<Update> {
    let (_, g) = loss_and_grads(spec, params, x, labels)?;
    Ok(Update { kind: UpdateKind::FedSgdGradient, tensors: g, batch_size: labels.len(), epochs: 1, lr: 0.0, samples: labels.len() })
}

/// Samples `b` distinct examples as a function of `(seed, round)`.
pub fn sample_batch(n: usize, b: usize, seed: u64, round: u64) -> Result<Vec<usize>> {
    if b == 0 || b > n {
        return Err(Error::Invalid(format!("batch size {b} must be in 1..={n}")));
    }
    let mut r = rng::stream(seed, 1000 + round);
    Ok(rand::seq::index::sample(&mut r, n, b).into_vec())
}

/// One FedSGD round on a sampled batch.
pub fn fedsgd_round(
    spec: &ModelSpec,
    params: &Params,
    data: &Dataset,
    b: usize,
    seed: u64,
) -> Result<(Update, GroundTruth)> {
    let idx = sample_batch(data.len(), b, seed, 0)?;
    let (x, y) = data.select(&idx)?;
    let x = data.norm.normalize(&x);
    let update = client_gradient(spec, params, &x, &y)?;
    Ok((update, GroundTruth { x, labels: y, indices: idx }))
}

/// Local training record for replaying a FedAvg client.
#[derive(Clone, Debug)]
pub struct FedAvgTrace {
    /// Index lists into the client's data, one per SGD step.
    pub steps: Vec<Vec<usize>>,
    pub truth: GroundTruth,
}

/// Per-epoch shuffles derived from the seed.
pub fn epoch_batches(n: usize, cfg: &ClientConfig) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for e in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, 2000 + e as u64));
        out.extend(order.chunks(cfg.batch_size).map(<[usize]>::to_vec));
    }
    out
}

/// Plain SGD over explicit steps; returns the final parameters.
pub fn local_sgd(
    spec: &ModelSpec,
    params: &Params,
    x: &Tensor,
    labels: &[usize],
    steps: &[Vec<usize>],
    lr: f64,
) -> Result<Params> {
    let mut p = params.clone();
    for idx in steps {
        let xb = x.select_rows(idx)?;
        let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let (_, g) = loss_and_grads(spec, &p, &xb, &yb)?;
        p = p.zip_map(&g, |a, b| a - lr * b)?;
    }
    Ok(p)
}

/// Runs `E` epochs of minibatch SGD on the whole client dataset and reports `θ_after − θ_before`.
pub fn fedavg_round(
    spec: &ModelSpec,
    params: &Params,
    data: &Dataset,
    cfg: &ClientConfig,
) -> Result<(Update, FedAvgTrace)> {
    cfg.validate()?;
    if cfg.batch_size > data.len() {
        return Err(Error::Invalid(format!("batch size {} exceeds {} local samples", cfg.batch_size, data.len())));
    }
    let x = data.norm.normalize(&data.images);
    let steps = epoch_batches(data.len(), cfg);
    let after = local_sgd(spec, params, &x, &data.labels, &steps, cfg.lr)?;
    let delta = after.zip_map(params, |a, b| a - b)?;
    let update = Update {
        kind: UpdateKind::FedAvgDelta,
        tensors: delta,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        lr: cfg.lr,
        samples: data.len(),
    };
    let truth = GroundTruth { x, labels: data.labels.clone(), indices: (0..data.len()).collect() };
    Ok((update, FedAvgTrace { steps, truth }))
}

/// Trains a model with minibatch SGD; used to produce "trained" targets.
pub fn train(
    spec: &ModelSpec,
    params: &Params,
    data: &Dataset,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<Params> {
    let cfg = ClientConfig { batch_size: batch_size.min(data.len()), epochs, lr, seed };
    cfg.validate()?;
    let x = data.norm.normalize(&data.images);
    local_sgd(spec, params, &x, &data.labels, &epoch_batches(data.len(), &cfg), lr)
}

/// Mean of per-sample reports.
pub fn mean_report(reports: &[GradientReport]) -> Result<GradientReport> {
    let first = reports.first().ok_or_else(|| Error::Invalid("no reports to average".into()))?;
    let mut acc = first.clone();
    for r in &reports[1..] {
        acc = acc.zip_map(r, |a, b| a + b)?;
    }
    Ok(acc.scale(1.0 / reports.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_robin_labels_and_range() {
        let d = synth_dataset(4, 1, 8, 8, 2, 3).unwrap();
        assert_eq!(d.labels, vec![0, 1, 0, 1]);
        assert!(d.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let again = synth_dataset(4, 1, 8, 8, 2, 3).unwrap();
        assert_eq!(d.images, again.images);
        let other = synth_dataset(4, 1, 8, 8, 2, 4).unwrap();
        assert_ne!(d.images, other.images);
    }

    #[test]
    fn normalization_round_trip() {
        let d = synth_dataset(6, 3, 4, 4, 3, 1).unwrap();
        let z = d.norm.normalize(&d.images);
        assert!(d.norm.denormalize(&z).max_abs_diff(&d.images) < 1e-12);
        let back = Normalization::from_images(&z);
        assert!(back.mean.iter().all(|m| m.abs() < 1e-9));
        assert!(back.std.iter().all(|s| (s - 1.0).abs() < 1e-9));
    }

    #[test]
    fn cifar_parse_errors() {
        assert!(parse_cifar10(&[0u8; 3072], None).is_err());
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 10;
        assert!(parse_cifar10(&rec, None).is_err());
        rec[0] = 3;
        let mut two = rec.clone();
        two.extend(&rec);
        two[CIFAR_RECORD] = 7;
        let d = parse_cifar10(&two, Some(&[1])).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.labels, vec![7]);
        assert!(d.images.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sampling_depends_on_seed_and_round() {
        assert_eq!(sample_batch(10, 3, 1, 0).unwrap(), sample_batch(10, 3, 1, 0).unwrap());
        assert_ne!(sample_batch(100, 5, 1, 0).unwrap(), sample_batch(100, 5, 1, 1).unwrap());
        assert!(sample_batch(3, 4, 1, 0).is_err());
    }
}
