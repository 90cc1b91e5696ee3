use std::collections::BTreeMap;

use super::graph::{Gradients, Network, ParamKind};
use super::loss::loss_with_penalty;
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Also compare the gradient with respect to the input batch.
    pub check_input: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            check_input: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Keyed by layer type: `conv`, `depthwise_conv`, `batch_norm`, `dense`, `input`.
    pub per_layer: BTreeMap<&'static str, LayerCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.per_layer.values().all(|c| c.failures == 0)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.per_layer.values().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn layer_type(kind: ParamKind) -> &'static str {
    match kind {
        ParamKind::ConvWeight => "conv",
        ParamKind::DepthwiseWeight => "depthwise_conv",
        ParamKind::Gamma | ParamKind::Beta => "batch_norm",
        ParamKind::DenseWeight | ParamKind::DenseBias => "dense",
    }
}

fn loss_at(net: &Network<f64>, batch: &Tensor<f64>, labels: &Tensor<f64>, lambda: f64) -> Result<f64> {
    let pass = net.forward_train_pure(batch, false)?;
    loss_with_penalty(&pass.logits, labels, net, lambda)
}

/// Compares backprop gradients of the penalized train-mode loss against
/// central finite differences for every parameter.
pub fn gradient_check(
    net: &Network<f64>,
    batch: &Tensor<f64>,
    labels: &Tensor<f64>,
    lambda: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let pass = net.forward_train_pure(batch, true)?;
    let analytic = net.backward(&pass, labels, lambda)?;
    compare_gradients(net, batch, labels, lambda, &analytic, opts)
}

/// Checks a supplied gradient set against finite differences. Exposed so
/// deliberately corrupted gradients can be fed through the same check.
pub fn compare_gradients(
    net: &Network<f64>,
    batch: &Tensor<f64>,
    labels: &Tensor<f64>,
    lambda: f64,
    analytic: &Gradients<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut per_layer: BTreeMap<&'static str, LayerCheck> = BTreeMap::new();
    let mut record = |key: &'static str, a: f64, n: f64| {
        let entry = per_layer.entry(key).or_default();
        let err = relative_error(a, n);
        entry.checked += 1;
        entry.max_rel_err = entry.max_rel_err.max(err);
        if err > opts.tolerance {
            entry.failures += 1;
        }
    };
    let h = opts.step;
    let mut probe = net.clone();
    let layout: Vec<(usize, usize)> = net.params().iter().map(|p| (p.node, p.values.len())).collect();
    for (idx, &(_, len)) in layout.iter().enumerate() {
        let grad = &analytic.params[idx];
        for j in 0..len {
            let original = probe.params()[idx].values[j];
            probe.params_mut()[idx].values[j] = original + h;
            let plus = loss_at(&probe, batch, labels, lambda)?;
            probe.params_mut()[idx].values[j] = original - h;
            let minus = loss_at(&probe, batch, labels, lambda)?;
            probe.params_mut()[idx].values[j] = original;
            record(layer_type(grad.kind), grad.values[j], (plus - minus) / (2.0 * h));
        }
    }
    if opts.check_input {
        let mut x = batch.clone();
        for j in 0..x.len() {
            let original = x.data()[j];
            x.data_mut()[j] = original + h;
            let plus = loss_at(net, &x, labels, lambda)?;
            x.data_mut()[j] = original - h;
            let minus = loss_at(net, &x, labels, lambda)?;
            x.data_mut()[j] = original;
            record("input", analytic.input.data()[j], (plus - minus) / (2.0 * h));
        }
    }
    Ok(GradCheckReport {
        per_layer,
        tolerance: opts.tolerance,
    })
}
