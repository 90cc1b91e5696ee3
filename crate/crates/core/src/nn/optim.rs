use serde::{Deserialize, Serialize};

use super::graph::{param_name, ParamGrad, ParamViewMut};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Sparse-training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Weight of the L1 penalty on BN scaling factors.
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; never applied to γ or β.
    pub weight_decay: f64,
    /// Optional heavy-ball momentum on top of the adaptive step. `None`
    /// reads "momentum" as `beta1`.
    pub momentum: Option<f64>,
    pub lr_schedule: LrSchedule,
}

/// Learning-rate multiplier over the optimizer steps of one training call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from the base rate to zero.
    Cosine,
}

impl LrSchedule {
    /// Multiplier at step `step` of `total`.
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine if total == 0 => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()),
        }
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            momentum: None,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainingConfig {
    /// The full-scale setup: 100 epochs, batch 32, lr 0.1, β1 0.9,
    /// weight decay 1e-4.
    pub fn full_scale() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if let Some(m) = self.momentum {
            if !(0.0..1.0).contains(&m) {
                return bad(format!("momentum must lie in [0, 1), got {m}"));
            }
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.eps.is_nan() || self.eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("eps must be > 0 and weight_decay >= 0".into());
        }
        Ok(())
    }
}

/// First/second moment accumulators, one buffer per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState<F> {
    pub first: Vec<Vec<F>>,
    pub second: Vec<Vec<F>>,
    pub velocity: Vec<Vec<F>>,
    pub step: u64,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new() -> Self {
        Self {
            first: Vec::new(),
            second: Vec::new(),
            velocity: Vec::new(),
            step: 0,
        }
    }

    fn ensure_shapes(&mut self, params: &[ParamViewMut<'_, F>]) -> Result<()> {
        if self.first.is_empty() {
            let zeros = |p: &ParamViewMut<'_, F>| vec![F::zero(); p.values.len()];
            self.first = params.iter().map(zeros).collect();
            self.second = params.iter().map(zeros).collect();
            self.velocity = params.iter().map(zeros).collect();
            return Ok(());
        }
        let ok =
            self.first.len() == params.len() && params.iter().zip(&self.first).all(|(p, m)| p.values.len() == m.len());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "optimizer state does not match parameter shapes".into(),
            ))
        }
    }
}

/// One bias-corrected adaptive-moment update with decoupled weight decay.
///
/// All gradients are checked before any parameter is touched, so a rejected
/// step leaves parameters and state unchanged.
pub fn optimizer_step<F: Scalar>(
    params: &mut [ParamViewMut<'_, F>],
    grads: &[ParamGrad<F>],
    state: &mut OptimizerState<F>,
    cfg: &TrainingConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.values.len() != g.values.len() || p.kind != g.kind || p.node != g.node {
            return Err(Error::InvalidArgument(format!(
                "gradient layout mismatch for {}",
                param_name(p.node, p.kind)
            )));
        }
        if g.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(param_name(g.node, g.kind)));
        }
    }
    state.ensure_shapes(params)?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let lr = cfg.learning_rate;
    for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let decay = if p.kind.decays() { cfg.weight_decay } else { 0.0 };
        let m = &mut state.first[idx];
        let v = &mut state.second[idx];
        let u = &mut state.velocity[idx];
        for j in 0..p.values.len() {
            let gj = g.values[j].as_f64();
            let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
            let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
            m[j] = F::of(mj);
            v[j] = F::of(vj);
            let mut step = lr * (mj / bc1) / ((vj / bc2).sqrt() + cfg.eps);
            if let Some(mu) = cfg.momentum {
                let uj = mu * u[j].as_f64() + step;
                u[j] = F::of(uj);
                step = uj;
            }
            let pj = p.values[j].as_f64();
            p.values[j] = F::of(pj - lr * decay * pj - step);
        }
    }
    Ok(())
}
