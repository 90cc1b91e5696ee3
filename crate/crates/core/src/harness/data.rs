use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::audio::{logmel_extract, read_wav, resample_linear, LogMelOptions};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// Labelled `(1, bands, frames)` feature maps stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f32>,
    labels: Vec<usize>,
    splits: Vec<Split>,
    shape: [usize; 3],
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f32>,
        labels: Vec<usize>,
        splits: Vec<Split>,
        shape: [usize; 3],
        num_classes: usize,
    ) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 || features.len() != labels.len() * per || splits.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature values, {} labels, {} split tags for sample shape {shape:?}",
                features.len(),
                labels.len(),
                splits.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        for split in [Split::Train, Split::Val] {
            let mut seen = vec![false; num_classes];
            for (l, s) in labels.iter().zip(&splits) {
                if *s == split {
                    seen[*l] = true;
                }
            }
            if let Some(c) = seen.iter().position(|s| !s) {
                return Err(Error::InvalidArgument(format!(
                    "class {c} missing from the {split:?} split"
                )));
            }
        }
        Ok(Self {
            features,
            labels,
            splits,
            shape,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split_of(&self, index: usize) -> Split {
        self.splits[index]
    }

    pub fn sample(&self, index: usize) -> &[f32] {
        let per = self.sample_len();
        &self.features[index * per..(index + 1) * per]
    }

    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// `(N, c, h, w)` batch of the given samples.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let [c, h, w] = self.shape;
        Tensor::new(vec![indices.len(), c, h, w], data).expect("sized by construction")
    }
}

/// Per-class split into train and validation, `train_fraction` of each
/// class (rounded) going to training.
pub fn stratified_split(labels: &[usize], num_classes: usize, train_fraction: f64, rng: &mut ChaCha8Rng) -> Vec<Split> {
    let mut splits = vec![Split::Val; labels.len()];
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(rng);
        let n_train = (members.len() as f64 * train_fraction).round() as usize;
        for &i in &members[..n_train.min(members.len())] {
            splits[i] = Split::Train;
        }
    }
    splits
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    #[serde(default = "default_bands")]
    pub mel_bands: usize,
    pub frames: usize,
    /// Noise standard deviation relative to the template RMS.
    pub noise_level: f64,
    pub seed: u64,
}

fn default_bands() -> usize {
    40
}

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SynthSpec),
    /// CSV of `wav_path,label` rows, paths relative to the CSV's directory.
    Features(FeatureSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub path: PathBuf,
    pub num_classes: usize,
    /// Waveforms are linearly resampled to this rate first.
    #[serde(default = "default_rate")]
    pub sample_rate: u32,
    /// Feature maps are cropped or zero-padded to this many frames.
    pub frames: usize,
    #[serde(default)]
    pub logmel: LogMelOptions,
    #[serde(default)]
    pub seed: u64,
}

fn default_rate() -> u32 {
    44_100
}

impl DatasetSpec {
    pub fn load(&self, train_fraction: f64) -> Result<Dataset> {
        match self {
            DatasetSpec::Synthetic(s) => synth_dataset(s, train_fraction),
            DatasetSpec::Features(f) => load_feature_dataset(f, train_fraction),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSpec::Synthetic(s) => s.num_classes,
            DatasetSpec::Features(f) => f.num_classes,
        }
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        match self {
            DatasetSpec::Synthetic(s) => [1, s.mel_bands, s.frames],
            DatasetSpec::Features(f) => [1, f.logmel.n_mels, f.frames],
        }
    }
}

/// Class templates over the band × frame grid, each a sum of a few Gaussian
/// band bumps with slow temporal modulation on top of a shared background.
fn class_templates(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    let (bands, frames) = (spec.mel_bands, spec.frames);
    let bump = |rng: &mut ChaCha8Rng| {
        let center = rng.random_range(0.0..bands as f64);
        let width = rng.random_range(1.0..4.0);
        let amp = rng.random_range(0.5..1.5);
        let freq = rng.random_range(0.0..3.0);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        move |b: usize, t: usize| {
            let d = (b as f64 - center) / width;
            let m = 1.0 + 0.5 * (std::f64::consts::TAU * freq * t as f64 / frames as f64 + phase).sin();
            amp * (-0.5 * d * d).exp() * m
        }
    };
    let shared: Vec<_> = (0..3).map(|_| bump(rng)).collect();
    (0..spec.num_classes)
        .map(|_| {
            let own: Vec<_> = (0..3).map(|_| bump(rng)).collect();
            let mut t = vec![0f32; bands * frames];
            for b in 0..bands {
                for f in 0..frames {
                    let v: f64 = shared.iter().chain(&own).map(|g| g(b, f)).sum();
                    t[b * frames + f] = v as f32;
                }
            }
            let mean = t.iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64;
            for v in &mut t {
                *v -= mean as f32;
            }
            t
        })
        .collect()
}

/// Class templates plus Gaussian noise with a stratified split.
pub fn synth_dataset(spec: &SynthSpec, train_fraction: f64) -> Result<Dataset> {
    if spec.num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {}",
            spec.num_classes
        )));
    }
    let per_split_min = |n: usize| {
        let train = (n as f64 * train_fraction).round() as usize;
        train.min(n - train)
    };
    if spec.samples_per_class < 4 || per_split_min(spec.samples_per_class) < 2 {
        return Err(Error::InvalidArgument(format!(
            "{} samples per class leaves fewer than 2 per split",
            spec.samples_per_class
        )));
    }
    if spec.mel_bands == 0 || spec.frames == 0 || spec.noise_level.is_nan() || spec.noise_level < 0.0 {
        return Err(Error::InvalidArgument(
            "bands and frames must be positive, noise >= 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let templates = class_templates(spec, &mut rng);
    let per = spec.mel_bands * spec.frames;
    let n = spec.num_classes * spec.samples_per_class;
    let mut features = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for (class, template) in templates.iter().enumerate() {
        let rms = (template.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / per as f64).sqrt();
        let sigma = spec.noise_level * rms;
        for _ in 0..spec.samples_per_class {
            for &v in template {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push((v as f64 + sigma * z) as f32);
            }
            labels.push(class);
        }
    }
    let splits = stratified_split(&labels, spec.num_classes, train_fraction, &mut rng);
    Dataset::new(
        features,
        labels,
        splits,
        [1, spec.mel_bands, spec.frames],
        spec.num_classes,
    )
}

/// Accuracy of assigning each validation sample to the nearest training
/// class mean.
pub fn nearest_centroid_accuracy(data: &Dataset) -> f64 {
    let per = data.sample_len();
    let mut centroids = vec![vec![0f64; per]; data.num_classes()];
    let mut counts = vec![0usize; data.num_classes()];
    for i in data.indices(Split::Train) {
        let l = data.labels()[i];
        counts[l] += 1;
        for (c, &v) in centroids[l].iter_mut().zip(data.sample(i)) {
            *c += v as f64;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let val = data.indices(Split::Val);
    let correct = val
        .iter()
        .filter(|&&i| {
            let x = data.sample(i);
            let best = centroids
                .iter()
                .map(|c| c.iter().zip(x).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>())
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k);
            best == Some(data.labels()[i])
        })
        .count();
    correct as f64 / val.len().max(1) as f64
}

#[derive(Deserialize)]
struct FeatureRow {
    wav_path: PathBuf,
    label: usize,
}

fn fit_frames(feat: &Tensor<f32>, frames: usize) -> Vec<f32> {
    let (bands, have) = (feat.shape()[0], feat.shape()[1]);
    let mut out = vec![0f32; bands * frames];
    let copy = have.min(frames);
    for b in 0..bands {
        out[b * frames..b * frames + copy].copy_from_slice(&feat.data()[b * have..b * have + copy]);
    }
    out
}

/// Reads WAV files listed in a `wav_path,label` CSV and converts each to a
/// log-mel map.
pub fn load_feature_dataset(spec: &FeatureSpec, train_fraction: f64) -> Result<Dataset> {
    let base = spec.path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(&spec.path)?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for row in reader.deserialize() {
        let row: FeatureRow = row?;
        let path = if row.wav_path.is_absolute() {
            row.wav_path
        } else {
            base.join(row.wav_path)
        };
        let (samples, rate) = read_wav(&path)?;
        let samples = resample_linear(&samples, rate, spec.sample_rate);
        let feat = logmel_extract(&samples, spec.sample_rate, &spec.logmel)?;
        features.extend(fit_frames(&feat, spec.frames));
        labels.push(row.label);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let splits = stratified_split(&labels, spec.num_classes, train_fraction, &mut rng);
    Dataset::new(
        features,
        labels,
        splits,
        [1, spec.logmel.n_mels, spec.frames],
        spec.num_classes,
    )
}
