use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{mixup, specaugment, AugmentConfig};
use super::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::{loss_with_penalty, one_hot, optimizer_step, Mode, Network, OptimizerState, TrainingConfig};
use crate::sparsity::SparsityReport;

/// Samples per eval-mode forward call.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean penalized training loss over the epoch's batches.
    pub loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights after the last epoch.
    pub network: Network,
    /// Weights at the epoch with the highest validation accuracy.
    pub best_network: Network,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
    /// Computed on the final weights.
    pub sparsity: SparsityReport,
}

/// Top-1 accuracy on one split, eval-mode BN.
pub fn evaluate(net: &Network, data: &Dataset, split: Split) -> Result<f64> {
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(Error::Evaluation(format!("{split:?} split is empty")));
    }
    let labels = data.labels();
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let logits = net.forward_eval(&data.batch(chunk))?;
        if !logits.all_finite() {
            return Err(Error::Evaluation("non-finite logits".into()));
        }
        correct += logits
            .argmax_rows()
            .iter()
            .zip(chunk)
            .filter(|(p, &i)| **p == labels[i])
            .count();
    }
    Ok(correct as f64 / idx.len() as f64)
}

/// Runs `epochs` passes over the training split. The last batch of an
/// epoch is dropped when it would hold a single sample.
fn run_epochs(
    net: &mut Network,
    data: &Dataset,
    cfg: &TrainingConfig,
    epochs: usize,
    augment: Option<&AugmentConfig>,
    mut on_epoch: impl FnMut(&Network, usize, f64) -> Result<()>,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new();
    let mut order = data.indices(Split::Train);
    let [_, bands, frames] = data.shape();
    let classes = data.num_classes();
    let per_epoch = order.chunks(cfg.batch_size).filter(|c| c.len() >= 2).count();
    let total_steps = per_epoch * epochs;
    let mut global_step = 0usize;
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let mut x = data.batch(chunk);
            let targets: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
            let mut y = one_hot::<f32>(&targets, classes);
            if let Some(aug) = augment {
                if aug.freq_mask > 0 || aug.time_mask > 0 {
                    for sample in x.data_mut().chunks_mut(bands * frames) {
                        specaugment(sample, bands, frames, aug.freq_mask, aug.time_mask, &mut rng)?;
                    }
                }
                if aug.mixup_alpha > 0.0 {
                    mixup(&mut x, &mut y, aug.mixup_alpha, &mut rng)?;
                }
            }
            let pass = net.forward(&x, Mode::Train, true)?;
            let loss = loss_with_penalty(&pass.logits, &y, net, cfg.lambda)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step, loss });
            }
            let grads = net.backward(&pass, &y, cfg.lambda)?;
            let step_cfg = TrainingConfig {
                learning_rate: cfg.learning_rate * cfg.lr_schedule.factor(global_step, total_steps),
                ..cfg.clone()
            };
            global_step += 1;
            optimizer_step(&mut net.params_mut(), &grads.params, &mut state, &step_cfg).map_err(|e| match e {
                Error::NonFiniteGradient(_) => Error::Divergence { epoch, step, loss },
                other => other,
            })?;
            total += loss;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::Config(
                "training split yields no batch of at least 2 samples".into(),
            ));
        }
        on_epoch(net, epoch, total / batches as f64)?;
    }
    Ok(())
}

/// Sparse training with the L1 penalty on γ. Keeps the best-validation
/// snapshot alongside the final weights.
pub fn train_sparse(
    mut net: Network,
    data: &Dataset,
    cfg: &TrainingConfig,
    augment: Option<&AugmentConfig>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(aug) = augment {
        let [_, bands, frames] = data.shape();
        aug.validate(bands, frames)?;
    }
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Network)> = None;
    run_epochs(&mut net, data, cfg, cfg.epochs, augment, |n, epoch, loss| {
        let acc = evaluate(n, data, Split::Val)?;
        history.push(EpochStats {
            epoch,
            loss,
            val_accuracy: acc,
        });
        if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            best = Some((acc, epoch, n.clone()));
        }
        Ok(())
    })?;
    let (best_accuracy, best_epoch, best_network) = best.expect("at least one epoch");
    let final_accuracy = history.last().map_or(0.0, |h| h.val_accuracy);
    let sparsity = SparsityReport::for_network(&net)?;
    Ok(TrainOutcome {
        network: net,
        best_network,
        final_accuracy,
        best_accuracy,
        best_epoch,
        history,
        sparsity,
    })
}

/// Fine-tuning setup derived from a training config: learning rate ×0.1,
/// no L1 penalty.
pub fn finetune_config(cfg: &TrainingConfig) -> TrainingConfig {
    TrainingConfig {
        lambda: 0.0,
        learning_rate: cfg.learning_rate * 0.1,
        ..cfg.clone()
    }
}

/// Continues training a (pruned) network for `epochs` with a fresh
/// optimizer state, without augmentation.
pub fn finetune(net: &mut Network, data: &Dataset, cfg: &TrainingConfig, epochs: usize) -> Result<()> {
    if epochs == 0 {
        return Ok(());
    }
    let ft = finetune_config(cfg);
    ft.validate()?;
    run_epochs(net, data, &ft, epochs, None, |_, _, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_network, ArchSpec};
    use crate::harness::data::{synth_dataset, SynthSpec};

    fn tiny() -> (Network, Dataset) {
        let spec = SynthSpec {
            num_classes: 3,
            samples_per_class: 20,
            mel_bands: 8,
            frames: 8,
            noise_level: 0.3,
            seed: 1,
        };
        let data = synth_dataset(&spec, 0.7).unwrap();
        let arch = ArchSpec::vgg(8)
            .with_input([1, 8, 8])
            .with_classes(3)
            .with_base_channels(4);
        (build_network(&arch, 5).unwrap(), data)
    }

    fn cfg(lambda: f64) -> TrainingConfig {
        TrainingConfig {
            lambda,
            learning_rate: 0.01,
            epochs: 6,
            batch_size: 8,
            seed: 2,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn learns_separable_toy_task() {
        let (net, data) = tiny();
        let before = evaluate(&net, &data, Split::Val).unwrap();
        let out = train_sparse(net, &data, &cfg(0.0), None).unwrap();
        assert_eq!(out.history.len(), 6);
        assert!(out.best_accuracy >= out.final_accuracy);
        assert!(out.best_accuracy > before.max(0.6), "{before} -> {}", out.best_accuracy);
        assert_eq!(
            evaluate(&out.best_network, &data, Split::Val).unwrap(),
            out.best_accuracy
        );
    }

    #[test]
    fn training_is_deterministic() {
        let (net, data) = tiny();
        let a = train_sparse(net.clone(), &data, &cfg(1e-3), None).unwrap();
        let b = train_sparse(net, &data, &cfg(1e-3), None).unwrap();
        assert_eq!(a.network, b.network);
        assert_eq!(a.sparsity.ws, b.sparsity.ws);
    }

    #[test]
    fn l1_pressure_shrinks_gammas() {
        let (net, data) = tiny();
        let mean_abs = |n: &Network| {
            let g = crate::sparsity::collect_gammas(n).unwrap().values;
            g.iter().map(|v| v.abs()).sum::<f64>() / g.len() as f64
        };
        let free = train_sparse(net.clone(), &data, &cfg(0.0), None).unwrap();
        let sparse = train_sparse(net, &data, &cfg(0.05), None).unwrap();
        assert!(mean_abs(&sparse.network) < mean_abs(&free.network));
    }

    #[test]
    fn divergence_is_reported() {
        let (net, data) = tiny();
        let wild = TrainingConfig {
            learning_rate: 1e30,
            ..cfg(0.0)
        };
        match train_sparse(net, &data, &wild, None) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|o| o.final_accuracy)),
        }
    }

    #[test]
    fn augmentation_runs_and_rejects_oversized_masks() {
        let (net, data) = tiny();
        let aug = AugmentConfig {
            mixup_alpha: 0.4,
            freq_mask: 2,
            time_mask: 3,
        };
        train_sparse(net.clone(), &data, &cfg(0.0), Some(&aug)).unwrap();
        assert!(train_sparse(net, &data, &cfg(0.0), Some(&AugmentConfig::default())).is_err());
    }

    #[test]
    fn finetune_changes_weights_but_not_structure() {
        let (mut net, data) = tiny();
        let before = net.clone();
        finetune(&mut net, &data, &cfg(0.1), 1).unwrap();
        assert_ne!(net, before);
        assert_eq!(
            crate::arch::count_parameters(&net),
            crate::arch::count_parameters(&before)
        );
        let mut same = before.clone();
        finetune(&mut same, &data, &cfg(0.1), 0).unwrap();
        assert_eq!(same, before);
    }
}
