use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prune::PruningCurve;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Increasing,
    Decreasing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Curvature {
    Concave,
    Convex,
}

/// Sampled curve with strictly increasing, finite x.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve2D {
    x: Vec<f64>,
    y: Vec<f64>,
    pub direction: Direction,
    pub curvature: Curvature,
}

impl Curve2D {
    pub fn new(x: Vec<f64>, y: Vec<f64>, direction: Direction, curvature: Curvature) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::LengthMismatch(x.len(), y.len()));
        }
        if x.len() < 3 {
            return Err(Error::TooFewValues {
                needed: 3,
                got: x.len(),
            });
        }
        if let Some(i) = x.iter().zip(&y).position(|(a, b)| !a.is_finite() || !b.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        if let Some(i) = x.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::NonMonotoneX(i + 1));
        }
        Ok(Self {
            x,
            y,
            direction,
            curvature,
        })
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Spacing term subtracted (times ψ) from each local maximum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// Mean gap between consecutive normalized x values.
    #[default]
    MeanSpacing,
    /// `Σ (x[i+1] − x[n−1]) / (n − 1)` taken literally; it is not a spacing
    /// and makes the threshold exceed the maximum.
    LiteralLastPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KneeOptions {
    pub psi: f64,
    pub threshold: ThresholdRule,
    /// Window-3 moving average over the normalized y before differencing.
    pub smooth: bool,
}

impl Default for KneeOptions {
    fn default() -> Self {
        Self {
            psi: 1.0,
            threshold: ThresholdRule::MeanSpacing,
            smooth: false,
        }
    }
}

impl KneeOptions {
    pub fn with_psi(psi: f64) -> Self {
        Self { psi, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KneeResult {
    pub found: bool,
    pub knee_index: Option<usize>,
    /// Original (un-normalized) coordinates of the knee.
    pub knee_x: Option<f64>,
    pub knee_y: Option<f64>,
    /// `(x, y − x)` in the normalized, orientation-corrected frame, listed
    /// in input order.
    pub difference_curve: Vec<(f64, f64)>,
    /// Input indices of strict local maxima of the difference curve.
    pub local_maxima: Vec<usize>,
    pub psi: f64,
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if hi == lo {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

fn moving_average(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            v[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

pub fn kneedle(curve: &Curve2D, psi: f64) -> KneeResult {
    kneedle_with(curve, &KneeOptions::with_psi(psi))
}

/// Knee detection on the difference curve of the normalized samples.
///
/// Both axes are min-max normalized, then flipped so the curve becomes
/// concave and increasing. A strict local maximum of `y − x` is the knee
/// if the difference curve falls below `y_max − ψ·spacing` before the next
/// local maximum.
pub fn kneedle_with(curve: &Curve2D, opts: &KneeOptions) -> KneeResult {
    let n = curve.len();
    let xn = normalize(&curve.x);
    let mut yn = normalize(&curve.y);
    if opts.smooth {
        yn = moving_average(&yn);
    }
    let reversed = matches!(
        (curve.direction, curve.curvature),
        (Direction::Decreasing, Curvature::Concave) | (Direction::Increasing, Curvature::Convex)
    );
    let flip_x = reversed;
    let flip_y = curve.curvature == Curvature::Convex;
    // position in the canonical frame -> input index
    let order: Vec<usize> = if reversed {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    };
    let xc: Vec<f64> = order
        .iter()
        .map(|&i| if flip_x { 1.0 - xn[i] } else { xn[i] })
        .collect();
    let yc: Vec<f64> = order
        .iter()
        .map(|&i| if flip_y { 1.0 - yn[i] } else { yn[i] })
        .collect();
    let yd: Vec<f64> = yc.iter().zip(&xc).map(|(y, x)| y - x).collect();

    let maxima: Vec<usize> = (1..n.saturating_sub(1))
        .filter(|&j| yd[j] > yd[j - 1] && yd[j] > yd[j + 1])
        .collect();
    let spacing = match opts.threshold {
        ThresholdRule::MeanSpacing => xc.windows(2).map(|w| w[1] - w[0]).sum::<f64>() / (n - 1) as f64,
        ThresholdRule::LiteralLastPoint => {
            let last = xc[n - 1];
            xc[1..].iter().map(|x| x - last).sum::<f64>() / (n - 1) as f64
        }
    };

    let mut knee = None;
    'search: for (k, &lm) in maxima.iter().enumerate() {
        let threshold = yd[lm] - opts.psi * spacing;
        let end = maxima.get(k + 1).copied().unwrap_or(n);
        for &value in &yd[lm + 1..end] {
            if value < threshold {
                knee = Some(lm);
                break 'search;
            }
        }
    }

    let mut difference_curve = vec![(0.0, 0.0); n];
    for (j, &i) in order.iter().enumerate() {
        difference_curve[i] = (xc[j], yd[j]);
    }
    let mut local_maxima: Vec<usize> = maxima.iter().map(|&j| order[j]).collect();
    local_maxima.sort_unstable();
    let knee_index = knee.map(|j| order[j]);
    KneeResult {
        found: knee_index.is_some(),
        knee_index,
        knee_x: knee_index.map(|i| curve.x[i]),
        knee_y: knee_index.map(|i| curve.y[i]),
        difference_curve,
        local_maxima,
        psi: opts.psi,
    }
}

/// Largest accuracy loss at which the no-knee fallback still accepts a point.
pub const FALLBACK_MAX_LOSS: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneKnee {
    /// Parameter prune fraction at the knee.
    pub pk: f64,
    /// False when the fallback point was used.
    pub knee_found: bool,
    /// Index into the pruning curve's points.
    pub point_index: usize,
    pub accuracy: f64,
    pub accuracy_loss: f64,
    pub knee: KneeResult,
}

/// Knee of accuracy versus parameter prune fraction, read as a decreasing
/// concave curve. Without a knee, falls back to the largest prune fraction
/// whose accuracy loss stays within [`FALLBACK_MAX_LOSS`].
///
/// Points whose parameter fraction does not exceed the previous one are
/// skipped.
pub fn prune_knee(curve: &PruningCurve, opts: &KneeOptions) -> Result<PruneKnee> {
    if curve.points.len() < 3 {
        return Err(Error::TooFewValues {
            needed: 3,
            got: curve.points.len(),
        });
    }
    let mut kept: Vec<usize> = Vec::with_capacity(curve.points.len());
    for (i, p) in curve.points.iter().enumerate() {
        if kept
            .last()
            .is_none_or(|&j| p.param_prune_fraction > curve.points[j].param_prune_fraction)
        {
            kept.push(i);
        }
    }
    let x = kept.iter().map(|&i| curve.points[i].param_prune_fraction).collect();
    let y = kept.iter().map(|&i| curve.points[i].accuracy).collect();
    let c2 = Curve2D::new(x, y, Direction::Decreasing, Curvature::Concave)?;
    let knee = kneedle_with(&c2, opts);
    let (point_index, knee_found) = match knee.knee_index {
        Some(k) => (kept[k], true),
        None => {
            let idx = curve
                .points
                .iter()
                .enumerate()
                .filter(|(_, p)| p.accuracy_loss <= FALLBACK_MAX_LOSS + 1e-9)
                .max_by(|a, b| a.1.param_prune_fraction.total_cmp(&b.1.param_prune_fraction))
                .map_or(0, |(i, _)| i);
            (idx, false)
        }
    };
    let p = &curve.points[point_index];
    Ok(PruneKnee {
        pk: p.param_prune_fraction,
        knee_found,
        point_index,
        accuracy: p.accuracy,
        accuracy_loss: p.accuracy_loss,
        knee,
    })
}
