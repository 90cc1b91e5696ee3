use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Beta(α, α) parameter; `0` disables mixup.
    pub mixup_alpha: f64,
    /// Maximum mel-band mask width.
    pub freq_mask: usize,
    /// Maximum frame mask width.
    pub time_mask: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mixup_alpha: 0.4,
            freq_mask: 4,
            time_mask: 40,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self, bands: usize, frames: usize) -> Result<()> {
        if !(self.mixup_alpha >= 0.0 && self.mixup_alpha.is_finite()) {
            return Err(Error::Config(format!(
                "mixup_alpha {} must be finite and ≥ 0",
                self.mixup_alpha
            )));
        }
        if self.freq_mask > bands {
            return Err(Error::Config(format!(
                "freq mask {} exceeds {bands} bands",
                self.freq_mask
            )));
        }
        if self.time_mask > frames {
            return Err(Error::Config(format!(
                "time mask {} exceeds {frames} frames",
                self.time_mask
            )));
        }
        Ok(())
    }
}

/// Mixes each row of `x` (and its label row) with `x[partner[i]]`:
/// `μ·x_i + (1−μ)·x_partner`.
pub fn mixup_with(x: &mut Tensor<f32>, labels: &mut Tensor<f32>, mu: f64, partner: &[usize]) -> Result<()> {
    let n = x.shape()[0];
    if labels.shape()[0] != n || partner.len() != n {
        return Err(Error::LengthMismatch(n, partner.len().min(labels.shape()[0])));
    }
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::InvalidArgument(format!("mixing weight {mu} outside [0, 1]")));
    }
    if let Some(&p) = partner.iter().find(|&&p| p >= n) {
        return Err(Error::InvalidArgument(format!("partner index {p} out of range")));
    }
    mix_rows(x, mu, partner);
    mix_rows(labels, mu, partner);
    Ok(())
}

fn mix_rows(t: &mut Tensor<f32>, mu: f64, partner: &[usize]) {
    let row = t.len() / t.shape()[0];
    let src = t.data().to_vec();
    let (a, b) = (mu as f32, (1.0 - mu) as f32);
    for (i, dst) in t.data_mut().chunks_mut(row).enumerate() {
        let other = &src[partner[i] * row..(partner[i] + 1) * row];
        for ((d, &s), &o) in dst.iter_mut().zip(&src[i * row..(i + 1) * row]).zip(other) {
            *d = a * s + b * o;
        }
    }
}

/// Batch mixup with `μ ~ Beta(α, α)` and a random permutation as
/// partners. Returns `μ`.
pub fn mixup<R: Rng>(x: &mut Tensor<f32>, labels: &mut Tensor<f32>, alpha: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::InvalidArgument(format!("mixup alpha {alpha}: {e}")))?;
    let mu = beta.sample(rng);
    let mut partner: Vec<usize> = (0..x.shape()[0]).collect();
    partner.shuffle(rng);
    mixup_with(x, labels, mu, &partner)?;
    Ok(mu)
}

/// Zeroes mel bands `[f0, f0+fw)` and frames `[t0, t0+tw)` of a
/// `(bands, frames)` feature map stored row-major.
pub fn apply_masks(
    feature: &mut [f32],
    bands: usize,
    frames: usize,
    freq: (usize, usize),
    time: (usize, usize),
) -> Result<()> {
    if feature.len() != bands * frames {
        return Err(Error::LengthMismatch(feature.len(), bands * frames));
    }
    let (f0, fw) = freq;
    let (t0, tw) = time;
    if f0 + fw > bands || t0 + tw > frames {
        return Err(Error::InvalidArgument(format!(
            "mask bands {f0}+{fw} / frames {t0}+{tw} exceed {bands}×{frames}"
        )));
    }
    for row in &mut feature[f0 * frames..(f0 + fw) * frames] {
        *row = 0.0;
    }
    for b in 0..bands {
        for v in &mut feature[b * frames + t0..b * frames + t0 + tw] {
            *v = 0.0;
        }
    }
    Ok(())
}

/// One frequency mask of width `U{0..=freq_mask}` and one time mask of
/// width `U{0..=time_mask}` at uniform offsets.
pub fn specaugment<R: Rng>(
    feature: &mut [f32],
    bands: usize,
    frames: usize,
    freq_mask: usize,
    time_mask: usize,
    rng: &mut R,
) -> Result<()> {
    if freq_mask > bands || time_mask > frames {
        return Err(Error::InvalidArgument(format!(
            "mask widths {freq_mask}/{time_mask} exceed {bands}×{frames}"
        )));
    }
    let fw = rng.random_range(0..=freq_mask);
    let f0 = rng.random_range(0..=bands - fw);
    let tw = rng.random_range(0..=time_mask);
    let t0 = rng.random_range(0..=frames - tw);
    apply_masks(feature, bands, frames, (f0, fw), (t0, tw))
}
