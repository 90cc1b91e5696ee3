//! BN scaling-factor collection and the Weight Skewness sparsity metric.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Network;
use crate::tensor::Scalar;

/// Default `|γ|` threshold below which a channel counts as near zero.
pub const NEAR_ZERO_THRESHOLD: f64 = 1e-3;

/// Every BN scaling factor of a network with its `(layer, channel)` origin.
///
/// `layer` is the BN layer's ordinal in graph order and `channel` is the
/// channel's id from the unpruned network, so provenance survives pruning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaSnapshot {
    pub values: Vec<f64>,
    pub provenance: Vec<(usize, usize)>,
}

impl GammaSnapshot {
    pub fn total_count(&self) -> usize {
        self.values.len()
    }

    pub fn contains(&self, layer: usize, channel: usize) -> bool {
        self.provenance.contains(&(layer, channel))
    }

    pub fn weight_skewness(&self) -> Result<f64> {
        weight_skewness(&self.values)
    }

    /// Writes `layer_index,channel_index,gamma` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer_index", "channel_index", "gamma"])?;
        for (&(layer, channel), value) in self.provenance.iter().zip(&self.values) {
            w.write_record([layer.to_string(), channel.to_string(), format!("{value:.9}")])?;
        }
        w.flush().map_err(|e| Error::io("<gamma csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

pub fn collect_gammas<F: Scalar>(net: &Network<F>) -> Result<GammaSnapshot> {
    let mut values = Vec::new();
    let mut provenance = Vec::new();
    for (layer, _, bn) in net.batch_norms() {
        for (g, &id) in bn.gamma.iter().zip(&bn.channel_ids) {
            values.push(g.as_f64());
            provenance.push((layer, id as usize));
        }
    }
    if values.is_empty() {
        return Err(Error::NoBatchNorm);
    }
    Ok(GammaSnapshot { values, provenance })
}

/// Neumaier-compensated sum.
fn accurate_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `Σ(γ − γ̄)³ / ((n − 1)·σ³)` where `σ` is the population standard
/// deviation (divides by `n`).
///
/// This mixes normalizations: the textbook sample skewness would use either
/// `n` in both places or the adjusted Fisher–Pearson factor. The result
/// equals the population skewness scaled by `n / (n − 1)`.
pub fn weight_skewness(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return Err(Error::TooFewValues { needed: 2, got: n });
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let nf = n as f64;
    let mean = accurate_sum(values.iter().copied()) / nf;
    let var = accurate_sum(values.iter().map(|v| (v - mean).powi(2))) / nf;
    let std = var.sqrt();
    let rel = std / mean.abs().max(f64::MIN_POSITIVE);
    if std == 0.0 || rel.is_nan() || rel <= 1e-15 {
        return Err(Error::DegenerateDistribution);
    }
    let third = accurate_sum(values.iter().map(|v| (v - mean).powi(3)));
    Ok(third / ((nf - 1.0) * std.powi(3)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` ascending bin edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Equal-width bins over `[min, max]`; the last bin is closed. A point mass
/// gets a unit-wide range centred on the value.
pub fn gamma_histogram(values: &[f64], num_bins: usize) -> Histogram {
    let bins = num_bins.max(1);
    if values.is_empty() {
        return Histogram {
            edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
            counts: vec![0; bins],
        };
    }
    let (mut lo, mut hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 })
        .collect();
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = (((v - lo) / width).floor() as isize).clamp(0, bins as isize - 1) as usize;
        counts[idx] += 1;
    }
    Histogram { edges, counts }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub ws: f64,
    pub gamma_mean: f64,
    /// Population standard deviation.
    pub gamma_std: f64,
    pub near_zero_fraction: f64,
    pub near_zero_threshold: f64,
    pub total_count: usize,
    pub histogram: Histogram,
}

impl SparsityReport {
    pub fn from_snapshot(snap: &GammaSnapshot, near_zero_threshold: f64, bins: usize) -> Result<Self> {
        let ws = snap.weight_skewness()?;
        let n = snap.values.len() as f64;
        let mean = accurate_sum(snap.values.iter().copied()) / n;
        let var = accurate_sum(snap.values.iter().map(|v| (v - mean).powi(2))) / n;
        let near = snap.values.iter().filter(|v| v.abs() < near_zero_threshold).count();
        Ok(Self {
            ws,
            gamma_mean: mean,
            gamma_std: var.sqrt(),
            near_zero_fraction: near as f64 / n,
            near_zero_threshold,
            total_count: snap.values.len(),
            histogram: gamma_histogram(&snap.values, bins),
        })
    }

    pub fn for_network<F: Scalar>(net: &Network<F>) -> Result<Self> {
        Self::from_snapshot(&collect_gammas(net)?, NEAR_ZERO_THRESHOLD, 20)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_network, ArchSpec};
    use crate::nn::NetworkBuilder;
    use proptest::prelude::*;

    #[test]
    fn symmetric_values_have_zero_skew() {
        assert!(weight_skewness(&[0.2, 0.4, 0.6]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn hand_evaluated_fixture() {
        // mean 0.25, σ = 0.4330127, Σ(γ−γ̄)³ = 0.375, denominator 3σ³.
        let ws = weight_skewness(&[0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((ws - 1.539_600_717_839_002).abs() < 1e-12, "{ws}");
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(weight_skewness(&[0.5; 4]), Err(Error::DegenerateDistribution)));
        assert!(matches!(weight_skewness(&[0.5]), Err(Error::TooFewValues { .. })));
        assert!(matches!(weight_skewness(&[0.5, f64::NAN]), Err(Error::NonFinite(1))));
    }

    #[test]
    fn snapshot_counts_and_initial_values() {
        let mut b = NetworkBuilder::<f32>::new([1, 6, 6], 3, 0);
        let x = b.conv_bn(0, 4, 3, 1, 1).unwrap();
        let x = b.relu(x).unwrap();
        let x = b.conv_bn(x, 4, 3, 1, 1).unwrap();
        let x = b.global_avg_pool(x).unwrap();
        b.dense(x, 3).unwrap();
        let snap = collect_gammas(&b.finish().unwrap()).unwrap();
        assert_eq!(snap.total_count(), 8);
        assert!(snap.values.iter().all(|&g| g == 0.5));
        assert_eq!(snap.provenance[5], (1, 1));

        let net = build_network::<f32>(&ArchSpec::resnet(11), 0).unwrap();
        let snap = collect_gammas(&net).unwrap();
        let mut seen = snap.provenance.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), snap.total_count());
    }

    #[test]
    fn bn_free_network_rejected() {
        let mut b = NetworkBuilder::<f32>::new([1, 2, 2], 2, 0);
        b.dense(0, 2).unwrap();
        assert!(matches!(collect_gammas(&b.finish().unwrap()), Err(Error::NoBatchNorm)));
    }

    #[test]
    fn histogram_edge_cases() {
        let h = gamma_histogram(&[0.5; 7], 4);
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.counts.iter().sum::<usize>(), 7);
        assert_eq!(gamma_histogram(&[0.0, 1.0], 2).counts, vec![1, 1]);
    }

    #[test]
    fn uniform_histogram_within_binomial_bound() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let mut values: Vec<f64> = (0..998).map(|_| rng.random::<f64>()).collect();
        // Pin the range to [0, 1] so bins are exactly tenths.
        values.extend([0.0, 1.0]);
        let h = gamma_histogram(&values, 10);
        // Binomial(1000, 0.1): σ = √90 ≈ 9.49, 4σ ≈ 37.9.
        let bound = 4.0 * (1000.0f64 * 0.1 * 0.9).sqrt();
        for c in &h.counts {
            assert!((*c as f64 - 100.0).abs() <= bound, "{:?}", h.counts);
        }
    }

    #[test]
    fn report_fields() {
        let snap = GammaSnapshot {
            values: vec![0.0, 0.0, 0.5, 1.0],
            provenance: vec![(0, 0), (0, 1), (1, 0), (1, 1)],
        };
        let r = SparsityReport::from_snapshot(&snap, 1e-3, 5).unwrap();
        assert_eq!(r.near_zero_fraction, 0.5);
        assert!((r.gamma_mean - 0.375).abs() < 1e-15);
        assert_eq!(r.histogram.counts.iter().sum::<usize>(), 4);
        let mut buf = Vec::new();
        snap.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("layer_index,channel_index,gamma\n0,0,0.000000000\n"));
    }

    fn skewed_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 3..200).prop_map(|v| v.into_iter().map(|u| u * u * u).collect())
    }

    proptest! {
        #[test]
        fn affine_invariance(v in skewed_vec(), a in 0.01f64..100.0, c in -10.0f64..10.0) {
            prop_assume!(weight_skewness(&v).is_ok());
            let ws = weight_skewness(&v).unwrap();
            let moved: Vec<f64> = v.iter().map(|g| a * g + c).collect();
            let ws2 = weight_skewness(&moved).unwrap();
            prop_assert!((ws - ws2).abs() < 1e-9, "{} vs {}", ws, ws2);
            let neg: Vec<f64> = v.iter().map(|g| -g).collect();
            prop_assert!((weight_skewness(&neg).unwrap() + ws).abs() < 1e-9);
        }

        #[test]
        fn permutation_invariance(v in skewed_vec(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            prop_assume!(weight_skewness(&v).is_ok());
            let mut w = v.clone();
            w.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert!((weight_skewness(&v).unwrap() - weight_skewness(&w).unwrap()).abs() < 1e-12);
        }
    }
}
