//! The iterative certification loop: train, measure the gate quantities
//! (q, delta_0, R3, first-order moments, delta), adjust exactly one knob
//! per iteration (mu, width, psi, or width+lambda), and finish with a
//! median-replication plan for the target `delta'`.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fixtures::balanced_sigmoid_net;
use crate::guarantees::{
    chebyshev_certificate, crash_delta0, dataset_taylor_moments, layer_q, median_repetitions,
    Certificate,
};
use crate::injection::{median_empirical_tail, CrashModel, TailEstimate};
use crate::network::{LossKind, Network};
use crate::regularizer::{smoothness, RegWeights};
use crate::trainer::{train, TrainConfig};
use serde::{Deserialize, Serialize};

/// Gate constants from the certification procedure (kept as published;
/// the asymptotics do not depend on them).
pub const Q_MIN: f64 = 1e-2;
pub const DELTA_MAX: f64 = 1.0 / 3.0;

/// Seeds used when a multiplicative knob starts at zero.
const MU_SEED: f64 = 1e-8;
const LAMBDA_SEED: f64 = 1e-6;
const PSI_DERIV_SEED: f64 = 1e-4;
const PSI_SMOOTH_SEED: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyConfig {
    pub epsilon: f64,
    pub delta_prime: f64,
    /// Maximal complexity guess `C` gating the smoothness metric R3.
    pub complexity_c: f64,
    pub initial_widths: Vec<usize>,
    /// Per-activation-layer crash probabilities (length = hidden layers + 2).
    pub p: Vec<f64>,
    pub max_iterations: usize,
    pub width_increment: usize,
    pub mu_multiplier: f64,
    pub psi_multiplier: f64,
    pub lambda_multiplier: f64,
    /// Perturbation-tail alpha; `None` defaults to `e^2 p` per layer.
    pub alpha: Option<f64>,
    pub initial_reg: RegWeights,
    pub train: TrainSettings,
}

impl CertifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("epsilon must be > 0".into()));
        }
        if !(self.delta_prime > 0.0 && self.delta_prime < 1.0) {
            return Err(Error::InvalidConfig("delta_prime must lie in (0,1)".into()));
        }
        if self.initial_widths.is_empty() {
            return Err(Error::InvalidConfig("need at least one hidden layer".into()));
        }
        if self.p.len() != self.initial_widths.len() + 2 {
            return Err(Error::InvalidConfig(format!(
                "p has {} entries; need one per activation layer ({})",
                self.p.len(),
                self.initial_widths.len() + 2
            )));
        }
        if self.p.iter().any(|v| !(0.0..1.0).contains(v)) {
            return Err(Error::InvalidConfig("crash probabilities must lie in [0,1)".into()));
        }
        if self.max_iterations == 0 || self.width_increment == 0 {
            return Err(Error::InvalidConfig(
                "max_iterations and width_increment must be >= 1".into(),
            ));
        }
        for m in [self.mu_multiplier, self.psi_multiplier, self.lambda_multiplier] {
            if !(m > 1.0) {
                return Err(Error::InvalidConfig("knob multipliers must exceed 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertifyStatus {
    Certified,
    Infeasible,
    IterationCap,
}

/// The single knob adjusted after an iteration's gate checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnobAction {
    IncreaseMu,
    IncreaseWidth,
    IncreasePsi,
    IncreaseWidthAndLambda,
    Accept,
    ReportInfeasible,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub widths: Vec<usize>,
    pub reg: RegWeights,
    pub q_min: f64,
    pub delta0: Option<f64>,
    pub r3: Option<f64>,
    pub mean: Option<f64>,
    pub variance: Option<f64>,
    pub delta: Option<f64>,
    pub action: KnobAction,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificationResult {
    pub status: CertifyStatus,
    pub epsilon: f64,
    pub delta_prime: f64,
    /// Median replication count (certified runs only).
    pub r: Option<u32>,
    pub widths: Vec<usize>,
    pub reg: RegWeights,
    pub certificate: Option<Certificate>,
    pub iterations: Vec<IterationLog>,
}

fn bump(value: f64, seed: f64, multiplier: f64) -> f64 {
    if value == 0.0 {
        seed
    } else {
        value * multiplier
    }
}

/// Run the certification loop on a dataset. Returns the result together
/// with the final trained network (for certified and iteration-cap
/// outcomes).
pub fn certify(
    dataset: &Dataset,
    loss_kind: LossKind,
    cfg: &CertifyConfig,
) -> Result<(CertificationResult, Option<Network>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("dataset must be nonempty".into()));
    }
    let input_dim = dataset.input_dim();
    let output_dim = match &dataset.targets[0] {
        crate::network::Target::Values(v) => v.len(),
        crate::network::Target::Class(_) => {
            return Err(Error::InvalidConfig(
                "certify uses value targets; one-hot encode class datasets first".into(),
            ))
        }
    };
    let mut widths = cfg.initial_widths.clone();
    let mut reg = cfg.initial_reg;
    let mut log: Vec<IterationLog> = Vec::new();
    let mut last_net: Option<Network> = None;

    for iteration in 0..cfg.max_iterations {
        let dims: Vec<usize> = std::iter::once(input_dim)
            .chain(widths.iter().copied())
            .chain(std::iter::once(output_dim))
            .collect();
        let init = balanced_sigmoid_net(&dims, cfg.train.seed);
        // Plain SGD needs a step inversely proportional to the layer width
        // (the squared gradient norm grows linearly with it), so the
        // configured rate refers to the initial widths and is scaled down
        // as the loop widens the network.
        let width_scale = cfg.initial_widths.iter().copied().max().unwrap_or(1) as f64
            / widths.iter().copied().max().unwrap_or(1) as f64;
        let trained = train(
            &init,
            dataset,
            &TrainConfig {
                epochs: cfg.train.epochs,
                batch_size: cfg.train.batch_size,
                learning_rate: cfg.train.learning_rate * width_scale,
                reg,
                loss_kind,
                dropout: None,
                seed: cfg.train.seed,
            },
        )?
        .network;
        let crash = CrashModel::new(cfg.p.clone())?;
        crash.validate(&trained)?;

        let mut entry = IterationLog {
            iteration,
            widths: widths.clone(),
            reg,
            q_min: 0.0,
            delta0: None,
            r3: None,
            mean: None,
            variance: None,
            delta: None,
            action: KnobAction::Accept,
        };

        // Gate 1: the balance factor q over crash-exposed layers.
        let q_min = crash
            .crashable_layers()
            .iter()
            .map(|&l| layer_q(&trained, l).unwrap_or(0.0))
            .fold(1.0f64, f64::min);
        entry.q_min = q_min;
        if q_min < Q_MIN {
            reg.mu = bump(reg.mu, MU_SEED, cfg.mu_multiplier);
            entry.action = KnobAction::IncreaseMu;
            log.push(entry);
            last_net = Some(trained);
            continue;
        }

        // Gate 2: the weight-perturbation tail delta_0.
        let delta0 = crash_delta0(&trained, &crash, cfg.alpha)?;
        entry.delta0 = Some(delta0);
        if delta0 > DELTA_MAX {
            for w in &mut widths {
                *w += cfg.width_increment;
            }
            entry.action = KnobAction::IncreaseWidth;
            log.push(entry);
            last_net = Some(trained);
            continue;
        }

        // Gate 3: the smoothness metric R3 against the complexity guess.
        let mut r3 = 0.0;
        for layer in trained.layers() {
            let sigma = reg.sigma_for(layer.weights.cols());
            r3 += smoothness(&layer.weights, sigma)?;
        }
        entry.r3 = Some(r3);
        if r3 > cfg.complexity_c {
            reg.psi_deriv = bump(reg.psi_deriv, PSI_DERIV_SEED, cfg.psi_multiplier);
            reg.psi_smooth = bump(reg.psi_smooth, PSI_SMOOTH_SEED, cfg.psi_multiplier);
            entry.action = KnobAction::IncreasePsi;
            log.push(entry);
            last_net = Some(trained);
            continue;
        }

        // First-order moments over the dataset.
        let (mean, variance) = dataset_taylor_moments(&trained, dataset, &crash, loss_kind)?;
        entry.mean = Some(mean);
        entry.variance = Some(variance);
        if mean > cfg.epsilon {
            // No tail bound can do better than the mean.
            entry.action = KnobAction::ReportInfeasible;
            log.push(entry);
            return Ok((
                CertificationResult {
                    status: CertifyStatus::Infeasible,
                    epsilon: cfg.epsilon,
                    delta_prime: cfg.delta_prime,
                    r: None,
                    widths,
                    reg,
                    certificate: None,
                    iterations: log,
                },
                Some(trained),
            ));
        }

        // Gate 4: the certified delta before replication.
        let delta0_opt = Some(delta0);
        let certificate = chebyshev_certificate(mean, variance, cfg.epsilon, delta0_opt)?;
        entry.delta = Some(certificate.delta);
        if certificate.delta > DELTA_MAX {
            for w in &mut widths {
                *w += cfg.width_increment;
            }
            reg.lambda = bump(reg.lambda, LAMBDA_SEED, cfg.lambda_multiplier);
            entry.action = KnobAction::IncreaseWidthAndLambda;
            log.push(entry);
            last_net = Some(trained);
            continue;
        }

        // Certified below 1/3: plan the median replication from the
        // conservative 1/3 base.
        let r = median_repetitions(DELTA_MAX, cfg.delta_prime)?;
        entry.action = KnobAction::Accept;
        log.push(entry);
        return Ok((
            CertificationResult {
                status: CertifyStatus::Certified,
                epsilon: cfg.epsilon,
                delta_prime: cfg.delta_prime,
                r: Some(r),
                widths,
                reg,
                certificate: Some(certificate),
                iterations: log,
            },
            Some(trained),
        ));
    }

    Ok((
        CertificationResult {
            status: CertifyStatus::IterationCap,
            epsilon: cfg.epsilon,
            delta_prime: cfg.delta_prime,
            r: None,
            widths,
            reg,
            certificate: None,
            iterations: log,
        },
        last_net,
    ))
}

/// Empirical validation of a certified result: measures the median-of-R
/// failure rate over the dataset for a ladder of replica counts ending at
/// the certified `R`, and checks the final upper confidence bound against
/// `10 * delta_prime` (the Monte-Carlo floor slack).
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub per_r: Vec<(u32, TailEstimate)>,
    pub final_estimate: TailEstimate,
    pub threshold: f64,
    pub passed: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn replicate_and_validate(
    result: &CertificationResult,
    net: &Network,
    dataset: &Dataset,
    crash: &CrashModel,
    loss_kind: LossKind,
    samples: usize,
    seed: u64,
    workers: usize,
) -> Result<ValidationReport> {
    if result.status != CertifyStatus::Certified {
        return Err(Error::InvalidConfig(
            "replicate_and_validate needs a certified result".into(),
        ));
    }
    let r_final = result.r.expect("certified results carry R");
    let mut ladder: Vec<u32> = vec![1, 3, 5];
    if !ladder.contains(&r_final) {
        ladder.push(r_final);
    }
    ladder.sort_unstable();
    ladder.dedup();
    let mut per_r = Vec::with_capacity(ladder.len());
    for (i, &r) in ladder.iter().enumerate() {
        let est = median_empirical_tail(
            net,
            dataset,
            crash,
            loss_kind,
            r as usize,
            result.epsilon,
            samples,
            seed.wrapping_add(i as u64),
            workers,
        )?;
        per_r.push((r, est));
    }
    let final_estimate = per_r.last().expect("ladder nonempty").1;
    let threshold = 10.0 * result.delta_prime;
    let passed = final_estimate.upper_ci(1.96) <= threshold;
    Ok(ValidationReport { per_r, final_estimate, threshold, passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthKind, SynthSpec};

    fn smooth_task(n: usize, seed: u64) -> Dataset {
        synth_dataset(&SynthSpec { kind: SynthKind::Smooth1d, n_samples: n, noise: 0.0, seed })
            .unwrap()
    }

    fn easy_cfg() -> CertifyConfig {
        CertifyConfig {
            epsilon: 0.5,
            delta_prime: 1e-3,
            complexity_c: 200.0,
            initial_widths: vec![8],
            p: vec![0.0, 1e-3, 0.0],
            max_iterations: 10,
            width_increment: 8,
            mu_multiplier: 10.0,
            psi_multiplier: 10.0,
            lambda_multiplier: 2.0,
            alpha: Some(0.3),
            initial_reg: RegWeights {
                mu: 1e-6,
                psi_deriv: 1e-4,
                psi_smooth: 1e-3,
                ..Default::default()
            },
            train: TrainSettings { epochs: 60, batch_size: 8, learning_rate: 0.3, seed: 11 },
        }
    }

    #[test]
    fn easy_target_certifies() {
        let ds = smooth_task(48, 3);
        let (result, net) = certify(&ds, LossKind::BoundedMse, &easy_cfg()).unwrap();
        assert_eq!(result.status, CertifyStatus::Certified, "{:?}", result.iterations);
        let cert = result.certificate.as_ref().unwrap();
        assert!(cert.delta <= DELTA_MAX);
        let r = result.r.unwrap();
        assert!(r % 2 == 1);
        assert!(
            crate::guarantees::replicated_failure_bound(DELTA_MAX, r) <= result.delta_prime
        );
        assert!(net.is_some());
    }

    #[test]
    fn impossible_epsilon_reports_infeasible() {
        let ds = smooth_task(24, 4);
        // Substantial crash probability, short training (so crashes raise
        // the loss) and an absurd budget: the mean error alone exceeds
        // epsilon and the mean gate fires.
        let cfg = CertifyConfig {
            epsilon: 1e-12,
            p: vec![0.0, 0.5, 0.0],
            alpha: Some(0.8),
            max_iterations: 4,
            initial_widths: vec![32],
            train: TrainSettings { epochs: 20, batch_size: 8, learning_rate: 0.08, seed: 1 },
            ..easy_cfg()
        };
        let (result, _) = certify(&ds, LossKind::BoundedMse, &cfg).unwrap();
        // Either the mean gate fires (infeasible) or the delta gate keeps
        // widening until the cap; the mean gate is expected with p = 0.9.
        assert_eq!(result.status, CertifyStatus::Infeasible, "{:?}", result.iterations);
        assert_eq!(
            result.iterations.last().unwrap().action,
            KnobAction::ReportInfeasible
        );
    }

    #[test]
    fn each_iteration_changes_exactly_one_knob() {
        let ds = smooth_task(48, 5);
        let cfg = CertifyConfig {
            epsilon: 2e-2,
            max_iterations: 12,
            ..easy_cfg()
        };
        let (result, _) = certify(&ds, LossKind::BoundedMse, &cfg).unwrap();
        let mut prev_widths = cfg.initial_widths.clone();
        let mut prev_reg = cfg.initial_reg;
        for entry in &result.iterations {
            // The logged state is the state the iteration ran with.
            assert_eq!(entry.widths, prev_widths, "widths changed outside the log");
            // Apply the action to predict the next state.
            match entry.action {
                KnobAction::IncreaseMu => {
                    assert!(entry.q_min < Q_MIN);
                    prev_reg.mu = bump(prev_reg.mu, MU_SEED, cfg.mu_multiplier);
                }
                KnobAction::IncreaseWidth => {
                    assert!(entry.delta0.unwrap() > DELTA_MAX);
                    for w in &mut prev_widths {
                        *w += cfg.width_increment;
                    }
                }
                KnobAction::IncreasePsi => {
                    assert!(entry.r3.unwrap() > cfg.complexity_c);
                    prev_reg.psi_deriv =
                        bump(prev_reg.psi_deriv, PSI_DERIV_SEED, cfg.psi_multiplier);
                    prev_reg.psi_smooth =
                        bump(prev_reg.psi_smooth, PSI_SMOOTH_SEED, cfg.psi_multiplier);
                }
                KnobAction::IncreaseWidthAndLambda => {
                    assert!(entry.delta.unwrap() > DELTA_MAX);
                    for w in &mut prev_widths {
                        *w += cfg.width_increment;
                    }
                    prev_reg.lambda = bump(prev_reg.lambda, LAMBDA_SEED, cfg.lambda_multiplier);
                }
                KnobAction::Accept | KnobAction::ReportInfeasible => {}
            }
        }
        // Gate order: q before delta0 before r3 before mean/delta.
        for entry in &result.iterations {
            if entry.delta0.is_some() {
                assert!(entry.q_min >= Q_MIN);
            }
            if entry.r3.is_some() {
                assert!(entry.delta0.unwrap() <= DELTA_MAX);
            }
            if entry.delta.is_some() {
                assert!(entry.r3.unwrap() <= cfg.complexity_c);
            }
        }
    }

    #[test]
    fn validation_on_certified_fixture() {
        let ds = smooth_task(32, 6);
        let cfg = easy_cfg();
        let (result, net) = certify(&ds, LossKind::BoundedMse, &cfg).unwrap();
        assert_eq!(result.status, CertifyStatus::Certified);
        let net = net.unwrap();
        let crash = CrashModel::new(cfg.p.clone()).unwrap();
        let report = replicate_and_validate(
            &result,
            &net,
            &ds,
            &crash,
            LossKind::BoundedMse,
            4000,
            9,
            0,
        )
        .unwrap();
        // Failure rate must not increase along the replication ladder.
        for pair in report.per_r.windows(2) {
            assert!(
                pair[1].1.freq <= pair[0].1.freq + 4.0 * pair[0].1.std_error.max(1e-4),
                "{:?}",
                report.per_r
            );
        }
    }

    #[test]
    fn validation_requires_certified_status() {
        let ds = smooth_task(16, 7);
        let result = CertificationResult {
            status: CertifyStatus::IterationCap,
            epsilon: 0.1,
            delta_prime: 1e-5,
            r: None,
            widths: vec![8],
            reg: RegWeights::default(),
            certificate: None,
            iterations: vec![],
        };
        let net = crate::fixtures::random_sigmoid_net(&[1, 8, 1], 0);
        let crash = CrashModel::broadcast(&net, 0.01).unwrap();
        assert!(replicate_and_validate(
            &result,
            &net,
            &ds,
            &crash,
            LossKind::BoundedMse,
            100,
            0,
            0
        )
        .is_err());
    }
}
