//! Crash-mask sampling and empirical estimation of the error moments:
//! Monte Carlo, exact enumeration (the NP-hard brute force behind a size
//! cap), the single-crash first-order sweep (b4), error-superposition
//! checks, median-replication simulation, and tail estimates.
//!
//! Every sampling operation assigns one RNG stream per sample index and
//! reduces over an index-ordered buffer, so results are bit-identical for
//! any worker count.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{CrashMask, Head, LossKind, Network};
use crate::parallel::{pairwise_sum, parallel_map};
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};

/// Exact enumeration is refused above this many crashable neurons.
pub const ENUMERATION_CAP: usize = 24;

/// Per-layer Bernoulli crash probabilities, indexed by activation layer
/// (0 = input, L = output). The output layer entry is conventionally 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrashModel {
    p: Vec<f64>,
}

impl CrashModel {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::domain("crash probabilities must lie in [0,1]"));
        }
        Ok(CrashModel { p })
    }

    /// The same probability at every layer except the output.
    pub fn broadcast(net: &Network, p: f64) -> Result<Self> {
        let mut v = vec![p; net.depth() + 1];
        *v.last_mut().unwrap() = 0.0;
        CrashModel::new(v)
    }

    /// Crashes only at the input layer.
    pub fn input_only(net: &Network, p: f64) -> Result<Self> {
        let mut v = vec![0.0; net.depth() + 1];
        v[0] = p;
        CrashModel::new(v)
    }

    /// Crashes only at one activation layer.
    pub fn single_layer(net: &Network, layer: usize, p: f64) -> Result<Self> {
        if layer > net.depth() {
            return Err(Error::dim(format!("layer {layer} out of range")));
        }
        let mut v = vec![0.0; net.depth() + 1];
        v[layer] = p;
        CrashModel::new(v)
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.p
    }

    pub fn p(&self, layer: usize) -> f64 {
        self.p.get(layer).copied().unwrap_or(0.0)
    }

    pub fn validate(&self, net: &Network) -> Result<()> {
        if self.p.len() != net.depth() + 1 {
            return Err(Error::dim(format!(
                "crash model has {} layers, network has {}",
                self.p.len(),
                net.depth() + 1
            )));
        }
        Ok(())
    }

    /// Activation layers with nonzero crash probability.
    pub fn crashable_layers(&self) -> Vec<usize> {
        (0..self.p.len()).filter(|&l| self.p[l] > 0.0).collect()
    }

    /// Number of neurons that can crash under this model.
    pub fn crashable_count(&self, net: &Network) -> usize {
        self.crashable_layers()
            .iter()
            .map(|&l| net.layer_width(l))
            .sum()
    }

    /// Model with probabilities zeroed outside `layers`.
    pub fn restrict(&self, layers: &[usize]) -> CrashModel {
        let p = (0..self.p.len())
            .map(|l| if layers.contains(&l) { self.p[l] } else { 0.0 })
            .collect();
        CrashModel { p }
    }
}

/// Sample a crash mask: each neuron of layer `l` crashes independently
/// with probability `p_l`. Draw order is fixed (layers ascending, neurons
/// ascending) so a stream identifies a mask.
pub fn sample_mask(net: &Network, crash: &CrashModel, stream: &mut RngStream) -> CrashMask {
    let widths = net.layer_widths();
    let layers = widths
        .iter()
        .enumerate()
        .map(|(l, &w)| {
            let p = crash.p(l);
            (0..w).map(|_| stream.bernoulli(p)).collect()
        })
        .collect();
    CrashMask { layers }
}

/// Moments of the crash error `Delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMoments {
    pub mean: f64,
    pub variance: f64,
    /// `sqrt(variance / samples)`; 0 for exact results.
    pub std_error_of_mean: f64,
    /// Monte-Carlo sample count, or the number of enumerated configurations.
    pub samples: u64,
    /// Empirical `P{Delta >= epsilon}` when a threshold was requested.
    pub tail_freq: Option<TailFreq>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailFreq {
    pub epsilon: f64,
    pub freq: f64,
}

/// Binomial frequency estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub freq: f64,
    pub failures: u64,
    pub trials: u64,
    pub std_error: f64,
}

impl TailEstimate {
    pub fn from_counts(failures: u64, trials: u64) -> Self {
        let f = failures as f64 / trials.max(1) as f64;
        TailEstimate {
            freq: f,
            failures,
            trials,
            std_error: (f * (1.0 - f) / trials.max(1) as f64).sqrt(),
        }
    }

    /// Wilson score upper bound at confidence `z` standard normal quantiles
    /// (z = 1.96 for 97.5% one-sided).
    pub fn upper_ci(&self, z: f64) -> f64 {
        let n = self.trials.max(1) as f64;
        let p = self.freq;
        let z2 = z * z;
        ((p + z2 / (2.0 * n) + z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt())
            / (1.0 + z2 / n))
            .min(1.0)
    }
}

/// Per-sample head-level errors over i.i.d. masks. Sample `i` uses stream
/// `(seed, i)`; the output is index-ordered.
pub fn monte_carlo_deltas(
    net: &Network,
    x: &[f64],
    crash: &CrashModel,
    head: &Head,
    samples: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<f64>> {
    if samples < 2 {
        return Err(Error::InvalidConfig("need at least 2 samples".into()));
    }
    crash.validate(net)?;
    let clean = crate::network::head_value(net, x, None, head)?;
    Ok(parallel_map(samples, workers, |i| {
        let mut stream = RngStream::new(seed, i as u64);
        let mask = sample_mask(net, crash, &mut stream);
        let crashed = crate::network::head_value(net, x, Some(&mask), head)
            .expect("shapes validated before sampling");
        crashed - clean
    }))
}

/// Unbiased sample moments from per-sample errors (Bessel-corrected
/// variance, deterministic pairwise reductions).
pub fn moments_from_deltas(deltas: &[f64], tail_epsilon: Option<f64>) -> ErrorMoments {
    let n = deltas.len();
    let mean = pairwise_sum(deltas) / n as f64;
    let sq: Vec<f64> = deltas.iter().map(|d| (d - mean) * (d - mean)).collect();
    let variance = if n > 1 { pairwise_sum(&sq) / (n - 1) as f64 } else { 0.0 };
    let tail_freq = tail_epsilon.map(|eps| TailFreq {
        epsilon: eps,
        freq: deltas.iter().filter(|&&d| d >= eps).count() as f64 / n as f64,
    });
    ErrorMoments {
        mean,
        variance,
        std_error_of_mean: (variance / n as f64).sqrt(),
        samples: n as u64,
        tail_freq,
    }
}

/// Monte-Carlo estimate of the error moments over i.i.d. crash masks.
/// Deterministic per seed and independent of the worker count.
pub fn monte_carlo_moments(
    net: &Network,
    x: &[f64],
    crash: &CrashModel,
    head: &Head,
    samples: usize,
    seed: u64,
    workers: usize,
    tail_epsilon: Option<f64>,
) -> Result<ErrorMoments> {
    let deltas = monte_carlo_deltas(net, x, crash, head, samples, seed, workers)?;
    Ok(moments_from_deltas(&deltas, tail_epsilon))
}

/// Exact error moments by weighted enumeration of every crash
/// configuration in the given activation layers. Refused above
/// [`ENUMERATION_CAP`] crashable neurons (the cost is `2^n` forward
/// passes). Uses population formulas (no Bessel correction).
pub fn exact_moments(
    net: &Network,
    x: &[f64],
    crash: &CrashModel,
    head: &Head,
    layer_subset: &[usize],
    tail_epsilon: Option<f64>,
) -> Result<ErrorMoments> {
    crash.validate(net)?;
    let mut layers: Vec<usize> = layer_subset.to_vec();
    layers.sort_unstable();
    layers.dedup();
    if layers.iter().any(|&l| l > net.depth()) {
        return Err(Error::dim("layer subset index out of range"));
    }
    let units: Vec<(usize, usize, f64)> = layers
        .iter()
        .filter(|&&l| crash.p(l) > 0.0)
        .flat_map(|&l| (0..net.layer_width(l)).map(move |i| (l, i, 0.0)))
        .map(|(l, i, _)| (l, i, crash.p(l)))
        .collect();
    let n = units.len();
    if n > ENUMERATION_CAP {
        return Err(Error::EnumerationInfeasible { count: n, cap: ENUMERATION_CAP });
    }
    let clean = crate::network::head_value(net, x, None, head)?;
    let mut mask = CrashMask::all_false(net);
    // Kahan-compensated accumulators.
    let mut acc = [KahanSum::default(), KahanSum::default(), KahanSum::default()];
    for bits in 0u64..(1u64 << n) {
        let mut weight = 1.0;
        for (b, &(l, i, p)) in units.iter().enumerate() {
            let crashed = bits >> b & 1 == 1;
            weight *= if crashed { p } else { 1.0 - p };
            mask.layers[l][i] = crashed;
        }
        if weight == 0.0 {
            continue;
        }
        let d = crate::network::head_value(net, x, Some(&mask), head)? - clean;
        acc[0].add(weight * d);
        acc[1].add(weight * d * d);
        if let Some(eps) = tail_epsilon {
            if d >= eps {
                acc[2].add(weight);
            }
        }
    }
    let mean = acc[0].value();
    let variance = (acc[1].value() - mean * mean).max(0.0);
    Ok(ErrorMoments {
        mean,
        variance,
        std_error_of_mean: 0.0,
        samples: 1u64 << n,
        tail_freq: tail_epsilon.map(|eps| TailFreq { epsilon: eps, freq: acc[2].value() }),
    })
}

#[derive(Default)]
struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    fn add(&mut self, v: f64) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum
    }
}

/// First-order exact single-crash sweep over layer `l` ("b4"): one forward
/// pass per neuron. `mean = p * sum_i Delta_i`, `variance = p * sum_i
/// Delta_i^2`; the `(p sum Delta_i)^2` term is dropped as second order in
/// `p`.
pub fn single_crash_sweep(
    net: &Network,
    x: &[f64],
    l: usize,
    head: &Head,
    p_l: f64,
) -> Result<ErrorMoments> {
    if l > net.depth() {
        return Err(Error::dim(format!("layer {l} out of range")));
    }
    if !(0.0..=1.0).contains(&p_l) {
        return Err(Error::domain("p must lie in [0,1]"));
    }
    let clean = crate::network::head_value(net, x, None, head)?;
    let width = net.layer_width(l);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for i in 0..width {
        let mask = CrashMask::single(net, l, i)?;
        let d = crate::network::head_value(net, x, Some(&mask), head)? - clean;
        sum += d;
        sum_sq += d * d;
    }
    Ok(ErrorMoments {
        mean: p_l * sum,
        variance: p_l * sum_sq,
        std_error_of_mean: 0.0,
        samples: width as u64 + 1,
        tail_freq: None,
    })
}

/// Relative additivity error of error superposition across two disjoint
/// layer subsets.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SuperpositionReport {
    pub mean_rel_err: f64,
    pub variance_rel_err: f64,
    /// Whether exact enumeration (rather than Monte Carlo) was used.
    pub exact: bool,
}

/// Check `Delta_{a u b} ~= Delta_a + Delta_b` (means and variances):
/// returns the relative errors. Uses exact enumeration when the union
/// stays within the cap, Monte Carlo otherwise.
pub fn superposition_check(
    net: &Network,
    x: &[f64],
    crash: &CrashModel,
    head: &Head,
    a: &[usize],
    b: &[usize],
    samples: usize,
    seed: u64,
) -> Result<SuperpositionReport> {
    if a.iter().any(|l| b.contains(l)) {
        return Err(Error::InvalidConfig("layer subsets must be disjoint".into()));
    }
    let union: Vec<usize> = a.iter().chain(b).copied().collect();
    let exact = crash.restrict(&union).crashable_count(net) <= 20;
    let run = |subset: &[usize], tag: u64| -> Result<ErrorMoments> {
        let restricted = crash.restrict(subset);
        if exact {
            exact_moments(net, x, &restricted, head, subset, None)
        } else {
            monte_carlo_moments(net, x, &restricted, head, samples, seed ^ tag, 0, None)
        }
    };
    let ma = run(a, 0xA)?;
    let mb = run(b, 0xB)?;
    let mab = run(&union, 0xAB)?;
    let rel = |whole: f64, parts: f64| {
        if whole == parts {
            0.0
        } else {
            (whole - parts).abs() / whole.abs().max(1e-12)
        }
    };
    Ok(SuperpositionReport {
        mean_rel_err: rel(mab.mean, ma.mean + mb.mean),
        variance_rel_err: rel(mab.variance, ma.variance + mb.variance),
        exact,
    })
}

/// Simulate `R`-fold replication with median aggregation: per trial, draw
/// `R` independent masks, take the median of the `R` head errors, and count
/// the fraction `>= epsilon`. `R` must be odd (median ties).
pub fn median_replica_sim(
    net: &Network,
    x: &[f64],
    crash: &CrashModel,
    head: &Head,
    r: usize,
    epsilon: f64,
    samples: usize,
    seed: u64,
    workers: usize,
) -> Result<TailEstimate> {
    if r == 0 || r % 2 == 0 {
        return Err(Error::InvalidConfig(format!(
            "replica count must be odd (got {r}); even counts make the median ambiguous"
        )));
    }
    crash.validate(net)?;
    let clean = crate::network::head_value(net, x, None, head)?;
    let hits = parallel_map(samples, workers, |t| {
        let mut stream = RngStream::new(seed, t as u64);
        let mut values: Vec<f64> = (0..r)
            .map(|_| {
                let mask = sample_mask(net, crash, &mut stream);
                crate::network::head_value(net, x, Some(&mask), head)
                    .expect("shapes validated before sampling")
                    - clean
            })
            .collect();
        values.sort_by(|p, q| p.partial_cmp(q).expect("finite head values"));
        if values[r / 2] >= epsilon {
            1.0
        } else {
            0.0
        }
    });
    let failures = pairwise_sum(&hits) as u64;
    Ok(TailEstimate::from_counts(failures, samples as u64))
}

/// Median-replication tail over a dataset: trial `t` uses example
/// `t % len`, draws `r` independent masks, medians the loss errors, and
/// counts the fraction `>= epsilon` over all trials (a joint (x, crash)
/// estimate of the replicated system's failure probability).
#[allow(clippy::too_many_arguments)]
pub fn median_empirical_tail(
    net: &Network,
    dataset: &Dataset,
    crash: &CrashModel,
    loss_kind: LossKind,
    r: usize,
    epsilon: f64,
    trials: usize,
    seed: u64,
    workers: usize,
) -> Result<TailEstimate> {
    if r == 0 || r % 2 == 0 {
        return Err(Error::InvalidConfig(format!(
            "replica count must be odd (got {r}); even counts make the median ambiguous"
        )));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("dataset must be nonempty".into()));
    }
    crash.validate(net)?;
    let heads: Vec<Head> = (0..dataset.len())
        .map(|i| Head::Loss(dataset.loss_spec(i, loss_kind)))
        .collect();
    let clean: Vec<f64> = (0..dataset.len())
        .map(|i| crate::network::head_value(net, &dataset.inputs[i], None, &heads[i]))
        .collect::<Result<_>>()?;
    let hits = parallel_map(trials, workers, |t| {
        let example = t % dataset.len();
        let mut stream = RngStream::new(seed, t as u64);
        let mut values: Vec<f64> = (0..r)
            .map(|_| {
                let mask = sample_mask(net, crash, &mut stream);
                crate::network::head_value(
                    net,
                    &dataset.inputs[example],
                    Some(&mask),
                    &heads[example],
                )
                .expect("shapes validated before sampling")
                    - clean[example]
            })
            .collect();
        values.sort_by(|p, q| p.partial_cmp(q).expect("finite loss values"));
        if values[r / 2] >= epsilon {
            1.0
        } else {
            0.0
        }
    });
    let failures = pairwise_sum(&hits) as u64;
    Ok(TailEstimate::from_counts(failures, trials as u64))
}

/// Empirical estimate of `P{Delta_loss >= epsilon}` over the joint
/// (input, crash) distribution: `samples_per_input` masks per dataset
/// example.
pub fn empirical_tail(
    net: &Network,
    dataset: &Dataset,
    crash: &CrashModel,
    loss_kind: LossKind,
    epsilon: f64,
    samples_per_input: usize,
    seed: u64,
    workers: usize,
) -> Result<TailEstimate> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("dataset must be nonempty".into()));
    }
    crash.validate(net)?;
    let heads: Vec<Head> = (0..dataset.len())
        .map(|i| Head::Loss(dataset.loss_spec(i, loss_kind)))
        .collect();
    let clean: Vec<f64> = (0..dataset.len())
        .map(|i| crate::network::head_value(net, &dataset.inputs[i], None, &heads[i]))
        .collect::<Result<_>>()?;
    let total = dataset.len() * samples_per_input;
    let hits = parallel_map(total, workers, |t| {
        let example = t / samples_per_input;
        let mut stream = RngStream::new(seed, t as u64);
        let mask = sample_mask(net, crash, &mut stream);
        let loss = crate::network::head_value(
            net,
            &dataset.inputs[example],
            Some(&mask),
            &heads[example],
        )
        .expect("shapes validated before sampling");
        if loss - clean[example] >= epsilon {
            1.0
        } else {
            0.0
        }
    });
    let failures = pairwise_sum(&hits) as u64;
    Ok(TailEstimate::from_counts(failures, total as u64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{averaging_net, first_coordinate_net, random_sigmoid_net};

    #[test]
    fn mask_extremes() {
        let net = averaging_net(5);
        let mut s = RngStream::new(0, 0);
        let m = sample_mask(&net, &CrashModel::broadcast(&net, 0.0).unwrap(), &mut s);
        assert!(!m.any());
        let full = CrashModel::new(vec![1.0, 1.0]).unwrap();
        let m = sample_mask(&net, &full, &mut s);
        assert_eq!(m.crashed_count(), 6);
    }

    #[test]
    fn mask_rate_matches_p() {
        let net = averaging_net(100);
        let crash = CrashModel::input_only(&net, 0.1).unwrap();
        let mut crashed = 0usize;
        let trials = 100_000;
        for t in 0..trials {
            let mut s = RngStream::new(3, t);
            crashed += sample_mask(&net, &crash, &mut s).layers[0]
                .iter()
                .filter(|&&b| b)
                .count();
        }
        let rate = crashed as f64 / (trials as f64 * 100.0);
        assert!((rate - 0.1).abs() < 0.003, "rate={rate}");
    }

    #[test]
    fn averaging_net_moments() {
        let net = averaging_net(4);
        let crash = CrashModel::input_only(&net, 0.1).unwrap();
        let m = monte_carlo_moments(
            &net,
            &[1.0; 4],
            &crash,
            &Head::Output(0),
            100_000,
            7,
            0,
            None,
        )
        .unwrap();
        let exact_var = 0.1 * 0.9 / 4.0;
        assert!((m.mean + 0.1).abs() < 4.0 * m.std_error_of_mean, "mean {}", m.mean);
        assert!((m.variance - exact_var).abs() < 0.1 * exact_var, "var {}", m.variance);
    }

    #[test]
    fn projection_net_moments() {
        let net = first_coordinate_net(3);
        let crash = CrashModel::input_only(&net, 0.1).unwrap();
        let m =
            monte_carlo_moments(&net, &[1.0; 3], &crash, &Head::Output(0), 100_000, 5, 0, None)
                .unwrap();
        assert!((m.mean + 0.1).abs() < 4.0 * m.std_error_of_mean);
        assert!((m.variance - 0.09).abs() < 0.01);
    }

    #[test]
    fn zero_p_gives_zero_moments() {
        let net = averaging_net(4);
        let crash = CrashModel::input_only(&net, 0.0).unwrap();
        let m = monte_carlo_moments(&net, &[1.0; 4], &crash, &Head::Output(0), 100, 1, 0, None)
            .unwrap();
        assert_eq!(m.mean, 0.0);
        assert_eq!(m.variance, 0.0);
    }

    #[test]
    fn monte_carlo_worker_invariance() {
        let net = random_sigmoid_net(&[4, 6, 2], 11);
        let crash = CrashModel::broadcast(&net, 0.05).unwrap();
        let x = crate::fixtures::random_input(4, 2);
        let head = Head::Output(1);
        let m1 = monte_carlo_moments(&net, &x, &crash, &head, 5000, 9, 1, None).unwrap();
        let m2 = monte_carlo_moments(&net, &x, &crash, &head, 5000, 9, 2, None).unwrap();
        let m8 = monte_carlo_moments(&net, &x, &crash, &head, 5000, 9, 8, None).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1, m8);
    }

    #[test]
    fn exact_single_crash_unit() {
        let net = first_coordinate_net(1);
        let crash = CrashModel::input_only(&net, 0.1).unwrap();
        let m = exact_moments(&net, &[2.0], &crash, &Head::Output(0), &[0], None).unwrap();
        assert!((m.mean + 0.2).abs() < 1e-15);
        assert!((m.variance - 0.36).abs() < 1e-15);
    }

    #[test]
    fn exact_averaging_net() {
        let net = averaging_net(4);
        let crash = CrashModel::input_only(&net, 0.1).unwrap();
        let m = exact_moments(&net, &[1.0; 4], &crash, &Head::Output(0), &[0], None).unwrap();
        assert!((m.mean + 0.1).abs() < 1e-12);
        assert!((m.variance - 0.1 * 0.9 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn enumeration_cap_enforced() {
        let net = averaging_net(30);
        let crash = CrashModel::input_only(&net, 0.1).unwrap();
        let err = exact_moments(&net, &[1.0; 30], &crash, &Head::Output(0), &[0], None)
            .unwrap_err();
        assert!(matches!(err, Error::EnumerationInfeasible { count: 30, cap: 24 }));
    }

    #[test]
    fn exact_matches_monte_carlo() {
        for seed in 0..5 {
            let net = random_sigmoid_net(&[3, 4, 2], seed);
            let crash = CrashModel::broadcast(&net, 0.05).unwrap();
            let x = crate::fixtures::random_input(3, seed);
            let head = Head::Output(0);
            let ex = exact_moments(&net, &x, &crash, &head, &[0, 1], None).unwrap();
            let mc =
                monte_carlo_moments(&net, &x, &crash, &head, 40_000, seed + 50, 0, None).unwrap();
            assert!(
                (ex.mean - mc.mean).abs() <= 4.0 * mc.std_error_of_mean,
                "seed {seed}: exact {} vs mc {} (se {})",
                ex.mean,
                mc.mean,
                mc.std_error_of_mean
            );
        }
    }

    #[test]
    fn b4_averaging_net() {
        let net = averaging_net(4);
        let m = single_crash_sweep(&net, &[1.0; 4], 0, &Head::Output(0), 0.1).unwrap();
        assert!((m.mean + 0.1).abs() < 1e-15);
        assert!((m.variance - 0.025).abs() < 1e-15);
    }

    #[test]
    fn b4_equals_exact_linear_first_order() {
        // For a linear head, Delta is additive over single crashes, so b4's
        // mean matches the first-order expansion of the exact mean.
        let net = first_coordinate_net(2);
        let p = 1e-4;
        let crash = CrashModel::input_only(&net, p).unwrap();
        let b4 = single_crash_sweep(&net, &[1.5, -0.5], 0, &Head::Output(0), p).unwrap();
        let ex = exact_moments(&net, &[1.5, -0.5], &crash, &Head::Output(0), &[0], None).unwrap();
        assert!((b4.mean - ex.mean).abs() < 1e-12);
    }

    #[test]
    fn b4_dead_neuron_contributes_nothing() {
        let net = first_coordinate_net(3);
        let m = single_crash_sweep(&net, &[1.0, 9.9, 9.9], 0, &Head::Output(0), 0.2).unwrap();
        assert!((m.mean + 0.2).abs() < 1e-15); // only x_0 matters
        assert!((m.variance - 0.2).abs() < 1e-15);
    }

    #[test]
    fn superposition_zero_subset() {
        let net = random_sigmoid_net(&[3, 4, 1], 2);
        let mut p = vec![0.0; 3];
        p[0] = 0.02;
        let crash = CrashModel::new(p).unwrap();
        // b has zero probability everywhere, so additivity is exact.
        let rep = superposition_check(
            &net,
            &crate::fixtures::random_input(3, 0),
            &crash,
            &Head::Output(0),
            &[0],
            &[1],
            1000,
            3,
        )
        .unwrap();
        assert_eq!(rep.mean_rel_err, 0.0);
        assert_eq!(rep.variance_rel_err, 0.0);
    }

    #[test]
    fn superposition_small_p_few_percent() {
        let net = random_sigmoid_net(&[5, 5, 5, 5, 1], 4);
        let crash = CrashModel::new(vec![0.01, 0.01, 0.01, 0.01, 0.0]).unwrap();
        let rep = superposition_check(
            &net,
            &crate::fixtures::random_input(5, 4),
            &crash,
            &Head::Output(0),
            &[0, 1],
            &[2, 3],
            0,
            0,
        )
        .unwrap();
        assert!(rep.exact);
        assert!(rep.mean_rel_err <= 0.05, "mean rel err {}", rep.mean_rel_err);
        assert!(rep.variance_rel_err <= 0.05, "var rel err {}", rep.variance_rel_err);
    }

    #[test]
    fn superposition_rejects_overlap() {
        let net = averaging_net(3);
        let crash = CrashModel::input_only(&net, 0.1).unwrap();
        assert!(superposition_check(
            &net,
            &[1.0; 3],
            &crash,
            &Head::Output(0),
            &[0],
            &[0],
            10,
            0
        )
        .is_err());
    }

    #[test]
    fn median_sim_rejects_even_r() {
        let net = averaging_net(3);
        let crash = CrashModel::input_only(&net, 0.1).unwrap();
        assert!(median_replica_sim(&net, &[1.0; 3], &crash, &Head::Output(0), 2, 0.1, 10, 0, 0)
            .is_err());
    }

    #[test]
    fn median_sim_r1_equals_single_tail() {
        let net = first_coordinate_net(2);
        let crash = CrashModel::input_only(&net, 0.3).unwrap();
        // Delta = +x_0 * xi with x_0 = -1, so Delta >= 0.5 iff x_0 crashed.
        let est = median_replica_sim(
            &net,
            &[-1.0, 0.0],
            &crash,
            &Head::Output(0),
            1,
            0.5,
            20_000,
            1,
            0,
        )
        .unwrap();
        assert!((est.freq - 0.3).abs() < 4.0 * est.std_error.max(1e-4), "freq {}", est.freq);
    }

    #[test]
    fn median_sim_deterministic_and_decreasing_in_r() {
        let net = first_coordinate_net(2);
        let crash = CrashModel::input_only(&net, 0.3).unwrap();
        let run = |r, workers| {
            median_replica_sim(
                &net,
                &[-1.0, 0.0],
                &crash,
                &Head::Output(0),
                r,
                0.5,
                20_000,
                2,
                workers,
            )
            .unwrap()
        };
        assert_eq!(run(3, 1), run(3, 8));
        let freqs: Vec<f64> = [1, 3, 5, 7].iter().map(|&r| run(r, 0).freq).collect();
        for w in freqs.windows(2) {
            assert!(w[1] <= w[0] + 4.0 * 0.004, "not decreasing: {freqs:?}");
        }
    }

    #[test]
    fn median_sim_zero_p() {
        let net = averaging_net(3);
        let crash = CrashModel::input_only(&net, 0.0).unwrap();
        let est =
            median_replica_sim(&net, &[1.0; 3], &crash, &Head::Output(0), 3, 0.01, 500, 0, 0)
                .unwrap();
        assert_eq!(est.freq, 0.0);
    }

    #[test]
    fn empirical_tail_epsilon_above_loss_cap() {
        let net = averaging_net(3);
        let crash = CrashModel::input_only(&net, 0.5).unwrap();
        let ds = crate::data::Dataset::new(
            vec![vec![1.0; 3]; 4],
            vec![crate::network::Target::Values(vec![1.0]); 4],
        )
        .unwrap();
        // The bounded loss cannot move by more than 2.
        let est =
            empirical_tail(&net, &ds, &crash, LossKind::BoundedMse, 2.5, 200, 0, 0).unwrap();
        assert_eq!(est.freq, 0.0);
        let est0 =
            empirical_tail(&net, &ds, &crash, LossKind::BoundedMse, 1e-6, 200, 0, 0).unwrap();
        assert!(est0.freq > 0.0);
        let none = CrashModel::input_only(&net, 0.0).unwrap();
        let estp =
            empirical_tail(&net, &ds, &none, LossKind::BoundedMse, 1e-6, 200, 0, 0).unwrap();
        assert_eq!(estp.freq, 0.0);
    }
}
