use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::TooFewValues {
            needed: 2,
            got: x.len(),
        });
    }
    if let Some(i) = x.iter().chain(y).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i % x.len()));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&a| a == v[0])
}

/// `(Sxy, Sxx, Syy, x̄, ȳ)` about the sample means.
fn centered_sums(x: &[f64], y: &[f64]) -> (f64, f64, f64, f64, f64) {
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    (sxy, sxx, syy, mx, my)
}

/// Least-squares `(slope, intercept)` of `y` on `x`.
pub fn linear_regression(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    check_pair(x, y)?;
    let (sxy, sxx, _, mx, my) = centered_sums(x, y);
    if is_constant(x) || sxx == 0.0 {
        return Err(Error::DegenerateRegressor);
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Pearson product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let (sxy, sxx, syy, _, _) = centered_sums(x, y);
    if is_constant(x) || sxx == 0.0 {
        return Err(Error::ZeroVariance("ws"));
    }
    if is_constant(y) || syy == 0.0 {
        return Err(Error::ZeroVariance("pk"));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Regression and correlation of prune knees on weight skewness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub slope_m: f64,
    pub intercept_b: f64,
    pub pearson_r: f64,
    pub n: usize,
    pub mean_ws: f64,
    pub mean_pk: f64,
}

impl CorrelationReport {
    pub fn compute(ws: &[f64], pk: &[f64]) -> Result<Self> {
        let (slope_m, intercept_b) = linear_regression(ws, pk)?;
        let pearson_r = pearson(ws, pk)?;
        Ok(Self {
            slope_m,
            intercept_b,
            pearson_r,
            n: ws.len(),
            mean_ws: mean(ws),
            mean_pk: mean(pk),
        })
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&ranks(x), &ranks(y))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}
