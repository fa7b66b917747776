//! Tail-bound machinery: the q-balance factor, the Chernoff bound on the
//! weight-perturbation probability (`delta_0`), the one-sided Chebyshev
//! `(epsilon, delta)` certificate, and median-replication planning.

use crate::bounds::bound_taylor;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::injection::{empirical_tail, CrashModel, TailEstimate};
use crate::math::{kl_bernoulli, Matrix};
use crate::network::{Head, LossKind, Network};
use crate::parallel::pairwise_mean;
use serde::{Deserialize, Serialize};

/// Default `alpha = e^2 * p` for the perturbation tail.
pub fn default_alpha(p: f64) -> f64 {
    (std::f64::consts::E * std::f64::consts::E * p).min(0.5)
}

/// Balance factor of the per-neuron weight masses `W^i = sum_j |W^{ij}|`
/// (rows): `q = min_i W^i / max_i W^i` in `[0, 1]`.
pub fn q_factor(w: &Matrix) -> Result<f64> {
    q_of_masses(w.row_abs_sums())
}

/// Balance factor over column masses (the outgoing weights of the source
/// layer; used for input-layer crashes).
pub fn q_factor_columns(w: &Matrix) -> Result<f64> {
    q_of_masses(w.col_abs_sums())
}

fn q_of_masses(masses: Vec<f64>) -> Result<f64> {
    let max = masses.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(Error::domain("q_factor of an all-zero matrix is degenerate"));
    }
    let min = masses.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(min / max)
}

/// Chernoff bound on the probability that the crashed weight mass at a
/// layer of `n_l` q-balanced neurons exceeds an `alpha` fraction of the
/// total mass: `delta_0 <= exp(-n_l q d_KL(alpha || p_l))`, valid for
/// `alpha > p_l`.
pub fn perturbation_tail_delta0(n_l: usize, q: f64, alpha: f64, p_l: f64) -> Result<f64> {
    if n_l == 0 {
        return Err(Error::domain("n_l must be at least 1"));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::domain(format!("q must lie in (0,1], got {q}")));
    }
    if !(p_l > 0.0 && p_l < 1.0 && alpha < 1.0) {
        return Err(Error::domain(format!(
            "need 0 < p < alpha < 1, got p={p_l}, alpha={alpha}"
        )));
    }
    if alpha <= p_l {
        return Err(Error::domain(format!(
            "alpha={alpha} must exceed p={p_l}; the bound direction is invalid otherwise"
        )));
    }
    let kl = kl_bernoulli(alpha, p_l)?;
    Ok((-(n_l as f64) * q * kl).exp().clamp(0.0, 1.0))
}

/// Per-layer q factors and the union-bound `delta_0` for every crashable
/// layer of the model. Layer `l >= 1` uses the row masses of `W_l`
/// (incoming weights); the input layer uses the column masses of `W_1`.
pub fn crash_delta0(net: &Network, crash: &CrashModel, alpha: Option<f64>) -> Result<f64> {
    crash.validate(net)?;
    let mut total = 0.0;
    for l in crash.crashable_layers() {
        let p = crash.p(l);
        let q = layer_q(net, l)?;
        if q == 0.0 {
            total += 1.0; // degenerate balance: no concentration
            continue;
        }
        let a = alpha.unwrap_or_else(|| default_alpha(p));
        if a <= p {
            total += 1.0; // the bound direction is invalid; no concentration
            continue;
        }
        total += perturbation_tail_delta0(net.layer_width(l), q, a, p)?;
    }
    Ok(total.min(1.0))
}

/// q factor attached to activation layer `l` (see [`crash_delta0`]).
pub fn layer_q(net: &Network, l: usize) -> Result<f64> {
    if l == 0 {
        q_factor_columns(&net.layers()[0].weights)
    } else if l <= net.depth() {
        q_factor(&net.layers()[l - 1].weights)
    } else {
        Err(Error::dim(format!("layer {l} out of range")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertMethod {
    /// `delta = Var/t^2` (main-text form).
    Chebyshev,
    /// `delta = delta_0 + Var/t^2` (conservative form; the default).
    ChebyshevPlusDelta0,
}

/// An `(epsilon, delta)` fault-tolerance certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub epsilon: f64,
    pub delta: f64,
    /// Chebyshev margin `t = epsilon - E Delta` (> 0).
    pub t: f64,
    pub mean: f64,
    pub variance: f64,
    pub delta0: f64,
    pub method: CertMethod,
}

/// One-sided Chebyshev certificate: for `t = epsilon - mean > 0`,
/// `P{Delta >= epsilon} <= delta_0 + variance / t^2`.
pub fn chebyshev_certificate(
    mean: f64,
    variance: f64,
    epsilon: f64,
    delta0: Option<f64>,
) -> Result<Certificate> {
    if variance < 0.0 {
        return Err(Error::domain("variance must be non-negative"));
    }
    let t = epsilon - mean;
    if t <= 0.0 {
        return Err(Error::Infeasible {
            detail: format!(
                "epsilon {epsilon} does not exceed the mean error {mean}; no tail bound can \
                 do better than the mean"
            ),
        });
    }
    let d0 = delta0.unwrap_or(0.0);
    let delta = (d0 + variance / (t * t)).min(1.0);
    Ok(Certificate {
        epsilon,
        delta,
        t,
        mean,
        variance,
        delta0: d0,
        method: if delta0.is_some() {
            CertMethod::ChebyshevPlusDelta0
        } else {
            CertMethod::Chebyshev
        },
    })
}

/// Failure bound guaranteed by `r`-fold median replication of a system
/// whose base failure probability is `delta_base`: `delta_base` itself for
/// `r = 1`, `delta_base^{r/2}` for odd `r >= 3`.
pub fn replicated_failure_bound(delta_base: f64, r: u32) -> f64 {
    if r <= 1 {
        delta_base
    } else {
        delta_base.powf(r as f64 / 2.0)
    }
}

/// Smallest odd replica count whose median guarantee meets `delta_target`.
/// Requires `delta_base <= 1/3` (established by certification first).
/// Returns 1 when the base system already meets the target.
pub fn median_repetitions(delta_base: f64, delta_target: f64) -> Result<u32> {
    if !(delta_base > 0.0 && delta_base <= 1.0 / 3.0) {
        return Err(Error::domain(format!(
            "median planning needs a base failure probability in (0, 1/3], got {delta_base}; \
             certify the base system below 1/3 first"
        )));
    }
    if !(delta_target > 0.0 && delta_target < 1.0) {
        return Err(Error::domain("delta_target must lie in (0, 1)"));
    }
    if delta_base <= delta_target {
        return Ok(1);
    }
    // delta_base^{r/2} <= target  <=>  r >= 2 ln(target) / ln(delta_base)
    let raw = 2.0 * delta_target.ln() / delta_base.ln();
    let mut r = raw.ceil() as u32;
    if r % 2 == 0 {
        r += 1;
    }
    r = r.max(3);
    // Guard against floating rounding at the boundary.
    while replicated_failure_bound(delta_base, r) > delta_target {
        r += 2;
    }
    while r > 3 && replicated_failure_bound(delta_base, r - 2) <= delta_target {
        r -= 2;
    }
    Ok(r)
}

/// Dataset-level first-order moments of the loss error: the mean over
/// inputs and the total variance by the law of total variance
/// (`E_x Var + Var_x E`).
pub fn dataset_taylor_moments(
    net: &Network,
    dataset: &Dataset,
    crash: &CrashModel,
    loss_kind: LossKind,
) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("dataset must be nonempty".into()));
    }
    let mut means = Vec::with_capacity(dataset.len());
    let mut vars = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let head = Head::Loss(dataset.loss_spec(i, loss_kind));
        let rep = bound_taylor(net, &dataset.inputs[i], crash, &head, None)?;
        means.push(rep.mean_bound.scalar().expect("b3 mean is scalar"));
        vars.push(rep.variance_estimate.expect("b3 reports variance"));
    }
    let mean = pairwise_mean(&means);
    let centered: Vec<f64> = means.iter().map(|m| (m - mean) * (m - mean)).collect();
    let total_var = pairwise_mean(&vars) + pairwise_mean(&centered);
    Ok((mean, total_var))
}

/// Full fault-tolerance check of a network on a dataset: first-order
/// moments, `delta_0`, the Chebyshev certificate, and an empirical
/// cross-check of the tail.
#[derive(Debug, Clone, Serialize)]
pub struct FtReport {
    pub certificate: Certificate,
    pub empirical: TailEstimate,
    pub q_min: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn check_ft(
    net: &Network,
    dataset: &Dataset,
    crash: &CrashModel,
    loss_kind: LossKind,
    epsilon: f64,
    alpha: Option<f64>,
    samples_per_input: usize,
    seed: u64,
    workers: usize,
) -> Result<FtReport> {
    let (mean, variance) = dataset_taylor_moments(net, dataset, crash, loss_kind)?;
    let delta0 = crash_delta0(net, crash, alpha)?;
    let certificate = chebyshev_certificate(mean, variance, epsilon, Some(delta0))?;
    let empirical = empirical_tail(
        net,
        dataset,
        crash,
        loss_kind,
        epsilon,
        samples_per_input,
        seed,
        workers,
    )?;
    let q_min = crash
        .crashable_layers()
        .iter()
        .map(|&l| layer_q(net, l).unwrap_or(0.0))
        .fold(1.0, f64::min);
    Ok(FtReport { certificate, empirical, q_min })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn q_factor_balanced_rows() {
        let w = Matrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        assert_eq!(q_factor(&w).unwrap(), 1.0);
    }

    #[test]
    fn q_factor_row_sums() {
        let w = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![4.0]]).unwrap();
        assert_eq!(q_factor(&w).unwrap(), 0.25);
    }

    #[test]
    fn q_factor_zero_row() {
        let w = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(q_factor(&w).unwrap(), 0.0);
        let zero = Matrix::zeros(2, 2);
        assert!(q_factor(&zero).is_err());
    }

    #[test]
    fn q_factor_invariances() {
        let mut rng = RngStream::new(2, 2);
        let data: Vec<f64> = (0..12).map(|_| rng.gaussian()).collect();
        let w = Matrix::new(4, 3, data).unwrap();
        let q = q_factor(&w).unwrap();
        // Row permutation.
        let mut rows = w.to_rows();
        rows.rotate_left(2);
        assert!((q_factor(&Matrix::from_rows(&rows).unwrap()).unwrap() - q).abs() < 1e-15);
        // Uniform positive scaling.
        let mut scaled = w.clone();
        scaled.scale(3.7);
        assert!((q_factor(&scaled).unwrap() - q).abs() < 1e-12);
    }

    #[test]
    fn delta0_reference_value() {
        let d = perturbation_tail_delta0(100, 1.0, 0.1, 0.01).unwrap();
        assert!((d - (-14.447935_f64).exp()).abs() < 1e-9);
        assert!((d - 5.3e-7).abs() < 0.1e-7, "delta0={d}");
    }

    #[test]
    fn delta0_approaches_one_as_alpha_meets_p() {
        let d = perturbation_tail_delta0(50, 0.8, 0.010001, 0.01).unwrap();
        assert!(d > 0.999, "delta0={d}");
        assert!(perturbation_tail_delta0(50, 0.8, 0.01, 0.01).is_err());
    }

    #[test]
    fn delta0_log_linear_in_n() {
        let d1 = perturbation_tail_delta0(60, 0.5, 0.2, 0.02).unwrap();
        let d2 = perturbation_tail_delta0(120, 0.5, 0.2, 0.02).unwrap();
        assert!((d2 - d1 * d1).abs() < 1e-12 * d1.max(1e-30));
    }

    #[test]
    fn chebyshev_arithmetic() {
        let c = chebyshev_certificate(0.0, 0.01, 0.5, None).unwrap();
        assert!((c.delta - 0.04).abs() < 1e-15);
        assert_eq!(c.method, CertMethod::Chebyshev);

        let c = chebyshev_certificate(0.1, 0.0, 0.5, Some(0.02)).unwrap();
        assert_eq!(c.delta, 0.02);
        assert_eq!(c.method, CertMethod::ChebyshevPlusDelta0);

        // The averaging-net substitution: mean p, variance p/n, epsilon 2p.
        let (p, n) = (0.01, 100.0);
        let c = chebyshev_certificate(p, p / n, 2.0 * p, None).unwrap();
        assert!((c.t - p).abs() < 1e-15);
        assert!((c.delta - 1.0 / (n * p)).abs() < 1e-12);
    }

    #[test]
    fn chebyshev_infeasible_when_mean_exceeds_budget() {
        let err = chebyshev_certificate(0.2, 0.01, 0.1, None).unwrap_err();
        assert!(matches!(err, Error::Infeasible { .. }));
    }

    #[test]
    fn median_solver_reference_values() {
        assert_eq!(median_repetitions(1.0 / 3.0, 1e-5).unwrap(), 21);
        assert_eq!(median_repetitions(1.0 / 3.0, 1e-10).unwrap(), 43);
        assert_eq!(median_repetitions(0.2, 0.2).unwrap(), 1);
        assert_eq!(median_repetitions(0.2, 0.5).unwrap(), 1);
    }

    #[test]
    fn median_solver_guarantee_holds_exactly() {
        for &target in &[1e-3, 1e-5, 1e-7, 1e-9] {
            for &base in &[1.0 / 3.0, 0.2, 0.05] {
                let r = median_repetitions(base, target).unwrap();
                assert!(r % 2 == 1);
                assert!(replicated_failure_bound(base, r) <= target);
                if r > 1 {
                    assert!(replicated_failure_bound(base, r.saturating_sub(2).max(1)) > target);
                }
            }
        }
    }

    #[test]
    fn median_solver_monotone_in_target() {
        // Tighter targets need at least as many replicas.
        let mut last = 0u32;
        for &target in &[1e-2, 1e-3, 1e-4] {
            let r = median_repetitions(1.0 / 3.0, target).unwrap();
            assert!(r >= last, "R({target}) = {r} < {last}");
            last = r;
        }
        let loose = median_repetitions(1.0 / 3.0, 1e-2).unwrap();
        let tight = median_repetitions(1.0 / 3.0, 1e-8).unwrap();
        assert!(tight > loose);
    }

    #[test]
    fn median_solver_rejects_uncertified_base() {
        assert!(median_repetitions(0.4, 1e-5).is_err());
    }

    #[test]
    fn binomial_grid_never_violates_chernoff() {
        // Pure-binomial case (q = 1): empirical P{fraction >= alpha} vs the
        // Chernoff bound, 1e6 trials per grid point.
        for &(n, p, alpha) in &[(50usize, 0.01, 0.1), (200usize, 0.001, 0.05)] {
            let bound = perturbation_tail_delta0(n, 1.0, alpha, p).unwrap();
            let trials = 1_000_000u64;
            let threshold = (alpha * n as f64).ceil() as usize;
            let mut hits = 0u64;
            for t in 0..trials {
                let mut s = RngStream::new(77, t);
                let crashed = (0..n).filter(|_| s.bernoulli(p)).count();
                if crashed >= threshold {
                    hits += 1;
                }
            }
            let freq = hits as f64 / trials as f64;
            assert!(freq <= bound, "grid ({n},{p},{alpha}): freq {freq} > bound {bound}");
        }
    }
}
