//! Deterministic mini-batch SGD with the fault-tolerance regularized loss,
//! plus unscaled-dropout training (crash masks drawn at training time, no
//! `1/(1-p)` rescaling, clean evaluation).

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::injection::{sample_mask, CrashModel};
use crate::network::{LossKind, LossSpec, Network};
use crate::regularizer::{batch_loss_and_grad, penalty_and_grad, regularized_loss, RegWeights};
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub reg: RegWeights,
    pub loss_kind: LossKind,
    /// Per-layer crash probabilities applied during training steps
    /// (unscaled dropout); evaluation always uses the clean network.
    pub dropout: Option<CrashModel>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self, net: &Network) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        self.reg.validate()?;
        if let Some(d) = &self.dropout {
            d.validate(net)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// The best-checkpoint network (lowest regularized full-train loss).
    pub network: Network,
    /// Regularized full-train loss after each epoch.
    pub loss_history: Vec<f64>,
    pub best_epoch: usize,
    pub best_loss: f64,
}

/// Train with plain SGD at a fixed learning rate. Deterministic for a
/// fixed `(config, dataset, seed)`; returns the best checkpoint by
/// regularized train loss.
pub fn train(net: &Network, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate(net)?;
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("dataset must be nonempty".into()));
    }
    let specs: Vec<LossSpec> = (0..dataset.len())
        .map(|i| dataset.loss_spec(i, cfg.loss_kind))
        .collect();
    let mut current = net.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Network)> = None;
    let mut dropout_counter = 0u64;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        RngStream::new(cfg.seed, 0x5_0000_0000 + epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let inputs: Vec<Vec<f64>> =
                chunk.iter().map(|&i| dataset.inputs[i].clone()).collect();
            let batch_specs: Vec<LossSpec> = chunk.iter().map(|&i| specs[i].clone()).collect();
            let masks = match &cfg.dropout {
                Some(model) => Some(
                    chunk
                        .iter()
                        .map(|_| {
                            let mut s = RngStream::new(cfg.seed, 0x0D0_0000_0000 + dropout_counter);
                            dropout_counter += 1;
                            sample_mask(&current, model, &mut s)
                        })
                        .collect::<Vec<_>>(),
                ),
                None => None,
            };
            let (_, mut grads) =
                batch_loss_and_grad(&current, &inputs, &batch_specs, masks.as_deref())?;
            if !cfg.reg.is_zero() {
                let (_, reg_grads) =
                    penalty_and_grad(&current, &inputs, &batch_specs, &cfg.reg)?;
                grads.axpy(1.0, &reg_grads)?;
            }
            for (m, layer) in current.layers_mut().iter_mut().enumerate() {
                let gw = &grads.weights[m];
                for i in 0..layer.weights.rows() {
                    for j in 0..layer.weights.cols() {
                        let v = layer.weights.get(i, j) - cfg.learning_rate * gw.get(i, j);
                        layer.weights.set(i, j, v);
                    }
                }
                for (b, g) in layer.bias.iter_mut().zip(&grads.bias[m]) {
                    *b -= cfg.learning_rate * g;
                }
            }
            if current
                .layers()
                .iter()
                .any(|l| l.weights.data().iter().any(|v| !v.is_finite())
                    || l.bias.iter().any(|v| !v.is_finite()))
            {
                return Err(Error::Diverged(format!(
                    "non-finite parameters at epoch {epoch}; reduce the learning rate or \
                     regularizer weights"
                )));
            }
        }
        let epoch_loss = regularized_loss(&current, &dataset.inputs, &specs, &cfg.reg)?;
        if !epoch_loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss at epoch {epoch}")));
        }
        history.push(epoch_loss);
        let better = best.as_ref().map_or(true, |(b, _, _)| epoch_loss < *b);
        if better {
            best = Some((epoch_loss, epoch, current.clone()));
        }
    }
    let (best_loss, best_epoch, network) = best.expect("at least one epoch ran");
    Ok(TrainResult { network, loss_history: history, best_epoch, best_loss })
}

/// Train with unscaled dropout at the configured crash probabilities.
pub fn train_with_dropout(
    net: &Network,
    dataset: &Dataset,
    cfg: &TrainConfig,
    dropout: CrashModel,
) -> Result<TrainResult> {
    let cfg = TrainConfig { dropout: Some(dropout), ..cfg.clone() };
    train(net, dataset, &cfg)
}

/// Fraction of incorrectly ordered pairs between a score sequence and a
/// reference order, halved so the worst (fully reversed) value is 0.5 and
/// random scores sit near 0.25; ties count half.
pub fn rank_loss(scores: &[f64], reference: &[f64]) -> Result<f64> {
    if scores.len() != reference.len() {
        return Err(Error::dim(format!(
            "rank_loss needs equal lengths, got {} and {}",
            scores.len(),
            reference.len()
        )));
    }
    if scores.len() < 2 {
        return Err(Error::InvalidConfig("rank_loss needs at least 2 items".into()));
    }
    let n = scores.len();
    let mut weight = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            pairs += 1;
            let r = reference[i] - reference[j];
            let s = scores[i] - scores[j];
            if r == 0.0 || s == 0.0 {
                weight += 0.5;
            } else if (r > 0.0) != (s > 0.0) {
                weight += 1.0;
            }
        }
    }
    Ok(weight / (2.0 * pairs as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthKind, SynthSpec};
    use crate::fixtures::random_sigmoid_net;
    use crate::math::Matrix;
    use crate::network::{Activation, Layer, Target};

    fn linear_toy() -> (Network, Dataset) {
        let net = Network::new(vec![
            Layer::new(Matrix::new(1, 1, vec![0.0]).unwrap(), vec![0.0], Activation::Linear)
                .unwrap(),
        ])
        .unwrap();
        let xs: Vec<Vec<f64>> = (0..64).map(|i| vec![i as f64 / 64.0]).collect();
        let ts: Vec<Target> = xs.iter().map(|x| Target::Values(vec![2.0 * x[0]])).collect();
        (net, Dataset::new(xs, ts).unwrap())
    }

    fn base_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 300,
            batch_size: 8,
            learning_rate: 0.5,
            reg: RegWeights::default(),
            loss_kind: LossKind::BoundedMse,
            dropout: None,
            seed: 42,
        }
    }

    #[test]
    fn linear_regression_converges() {
        let (net, ds) = linear_toy();
        let result = train(&net, &ds, &base_cfg()).unwrap();
        let w = result.network.layers()[0].weights.get(0, 0);
        assert!((w - 2.0).abs() < 1e-3, "w={w}");
        assert!(result.best_loss <= result.loss_history[0]);
    }

    #[test]
    fn determinism_bit_identical() {
        let (net, ds) = linear_toy();
        let cfg = TrainConfig { epochs: 20, ..base_cfg() };
        let a = train(&net, &ds, &cfg).unwrap();
        let b = train(&net, &ds, &cfg).unwrap();
        assert_eq!(a.network, b.network);
        assert_eq!(a.loss_history, b.loss_history);
    }

    #[test]
    fn zero_reg_equals_plain_erm() {
        let (net, ds) = linear_toy();
        let cfg = TrainConfig { epochs: 10, ..base_cfg() };
        let plain = train(&net, &ds, &cfg).unwrap();
        let with_explicit_zero = train(
            &net,
            &ds,
            &TrainConfig { reg: RegWeights::default(), ..cfg },
        )
        .unwrap();
        assert_eq!(plain.network, with_explicit_zero.network);
    }

    #[test]
    fn dropout_zero_equals_plain_training() {
        let net = random_sigmoid_net(&[1, 6, 1], 3);
        let ds = synth_dataset(&SynthSpec {
            kind: SynthKind::Smooth1d,
            n_samples: 32,
            noise: 0.0,
            seed: 5,
        })
        .unwrap();
        let cfg = TrainConfig { epochs: 15, learning_rate: 0.3, ..base_cfg() };
        let plain = train(&net, &ds, &cfg).unwrap();
        let zero_dropout = CrashModel::broadcast(&net, 0.0).unwrap();
        let dropped = train_with_dropout(&net, &ds, &cfg, zero_dropout).unwrap();
        assert_eq!(plain.network, dropped.network);
    }

    #[test]
    fn lambda_reduces_r1() {
        let net = random_sigmoid_net(&[1, 8, 1], 9);
        // Noisy targets keep the fitted residuals (and hence R1) positive.
        let ds = synth_dataset(&SynthSpec {
            kind: SynthKind::Smooth1d,
            n_samples: 48,
            noise: 0.05,
            seed: 2,
        })
        .unwrap();
        let cfg = TrainConfig { epochs: 80, learning_rate: 0.4, ..base_cfg() };
        let baseline = train(&net, &ds, &cfg).unwrap();
        let reg = RegWeights { lambda: 0.5, ..Default::default() };
        let regd = train(&net, &ds, &TrainConfig { reg, ..cfg }).unwrap();
        let specs: Vec<LossSpec> = (0..ds.len())
            .map(|i| ds.loss_spec(i, LossKind::BoundedMse))
            .collect();
        let r1 = |n: &Network| {
            crate::regularizer::reg_terms(n, &ds.inputs, &specs, &RegWeights::default())
                .unwrap()
                .per_layer
                .iter()
                .map(|t| t.r1)
                .sum::<f64>()
        };
        let (r_base, r_reg) = (r1(&baseline.network), r1(&regd.network));
        assert!(r_reg < r_base, "R1 with lambda {r_reg} !< baseline {r_base}");
    }

    #[test]
    fn divergence_detected() {
        let (net, ds) = linear_toy();
        let cfg = TrainConfig { learning_rate: f64::INFINITY, epochs: 3, ..base_cfg() };
        // An infinite step makes the parameters non-finite immediately.
        let err = train(&net, &ds, &cfg);
        assert!(matches!(err, Err(Error::Diverged(_))), "{err:?}");
    }

    #[test]
    fn rank_loss_values() {
        let r = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(rank_loss(&[10.0, 20.0, 30.0, 40.0], &r).unwrap(), 0.0);
        assert_eq!(rank_loss(&[40.0, 30.0, 20.0, 10.0], &r).unwrap(), 0.5);
        // All ties: halfway between concordant and discordant.
        assert_eq!(rank_loss(&[5.0, 5.0, 5.0, 5.0], &r).unwrap(), 0.25);
        assert!(rank_loss(&[1.0], &[1.0]).is_err());
        assert!(rank_loss(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn rank_loss_random_scores_near_quarter() {
        let mut rng = RngStream::new(31, 0);
        let reference: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let mut total = 0.0;
        let runs = 200;
        for _ in 0..runs {
            let scores: Vec<f64> = (0..30).map(|_| rng.next_f64()).collect();
            total += rank_loss(&scores, &reference).unwrap();
        }
        let mean = total / runs as f64;
        assert!((mean - 0.25).abs() < 0.02, "mean rank loss {mean}");
    }
}
