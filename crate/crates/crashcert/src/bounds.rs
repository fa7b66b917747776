//! Analytic bounds on the crash error: the spectral product bound (b1),
//! the absolute-value matrix-product bound (b2), and the first-order
//! Taylor moment estimates (b3) in activation and weight form, with
//! optional remainder diagnostics.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gradients::{backprop, weight_saliency_from, xi_derivative_from};
use crate::injection::CrashModel;
use crate::math::{inf_norm, l2_norm, matrix_norm, NormKind};
use crate::network::{CrashMask, Head, LossKind, Network};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMethod {
    /// Spectral product (worst case) + first-order infinity-norm mean form.
    B1,
    /// Component-wise absolute-value product bound on `E|Delta|`.
    B2,
    /// First-order Taylor moments from crash-direction derivatives.
    B3,
    /// b3 computed through weight gradients (identical by the
    /// weight-activation identity).
    B3WeightForm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanBound {
    Scalar(f64),
    PerOutput(Vec<f64>),
}

impl MeanBound {
    pub fn scalar(&self) -> Option<f64> {
        match self {
            MeanBound::Scalar(v) => Some(*v),
            MeanBound::PerOutput(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundWarning {
    /// The network contains a non-smooth activation; Taylor-based numbers
    /// carry reduced trust.
    NonSmoothActivation,
    /// No derivative bound was supplied; remainders are omitted.
    FirstOrderOnly,
}

/// Remainder magnitudes for b3 given a user-supplied bound `D12` on the
/// operator derivatives, with `r_l = p_l + 1/n_l` per crashable layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemainderDiagnostics {
    pub d12: f64,
    /// `sum_l D12 * r_l^2` (mean remainder scale).
    pub mean_term: f64,
    /// `sum_l D12 * r_l^3` (variance remainder scale).
    pub variance_term: f64,
    pub note: String,
}

/// Result of one analytic bound evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub method: BoundMethod,
    /// b1: first-order bound on `E ||Delta||_inf`; b2: per-output bound on
    /// `E |Delta|`; b3: signed first-order estimate of `E Delta`.
    pub mean_bound: MeanBound,
    pub variance_estimate: Option<f64>,
    /// b1 only: norm-product bound valid for every mask supported by the
    /// crash model.
    pub worst_case: Option<f64>,
    pub remainder: Option<RemainderDiagnostics>,
    pub warnings: Vec<BoundWarning>,
}

/// Spectral bound (b1). `worst_case` bounds `||Delta_L||_2` for any crash
/// configuration at the layers with nonzero probability; `mean_bound` is
/// the first-order infinity-norm form
/// `sum_l p_l n_l ||y_l||_inf prod_{k>l} ||W_k||_2-free-inf-norms`.
pub fn bound_spectral(net: &Network, x: &[f64], crash: &CrashModel) -> Result<BoundReport> {
    crash.validate(net)?;
    let trace = net.forward(x)?;
    let spectral: Vec<f64> = net
        .layers()
        .iter()
        .map(|l| matrix_norm(&l.weights, NormKind::SpectralUpper))
        .collect::<Result<_>>()?;
    let inf: Vec<f64> = net
        .layers()
        .iter()
        .map(|l| matrix_norm(&l.weights, NormKind::Inf))
        .collect::<Result<_>>()?;

    // Worst case over every mask in the model's support: a crash at layer l
    // perturbs the running activation by at most its own norm plus whatever
    // deviation has accumulated.
    let mut worst = if crash.p(0) > 0.0 { l2_norm(&trace.activations[0]) } else { 0.0 };
    for l in 1..=net.depth() {
        worst *= spectral[l - 1];
        if crash.p(l) > 0.0 {
            worst += l2_norm(&trace.activations[l]) + worst;
        }
    }

    // First-order mean form: E||Delta||_inf <= sum_l p_l n_l ||y_l||_inf
    // prod_{k>l} ||W_k||_inf.
    let mut mean = 0.0;
    for l in 0..=net.depth() {
        let p = crash.p(l);
        if p == 0.0 {
            continue;
        }
        let tail: f64 = inf[l..].iter().product();
        mean += p * net.layer_width(l) as f64 * inf_norm(&trace.activations[l]) * tail;
    }

    let mut warnings = vec![BoundWarning::FirstOrderOnly];
    if net.has_relu() {
        warnings.push(BoundWarning::NonSmoothActivation);
    }
    Ok(BoundReport {
        method: BoundMethod::B1,
        mean_bound: MeanBound::Scalar(mean),
        variance_estimate: None,
        worst_case: Some(worst),
        remainder: None,
        warnings,
    })
}

/// Spectral bound specialized to one concrete mask:
/// `||Delta_L||_2 <= prod ||W_l||_2 * ||xi (.) x - x||_2` for input masks,
/// extended layer-by-layer for deeper crashes.
pub fn spectral_mask_bound(net: &Network, x: &[f64], mask: &CrashMask) -> Result<f64> {
    mask.validate(net)?;
    let trace = net.forward(x)?;
    let crashed_norm = |l: usize| {
        l2_norm(
            &trace.activations[l]
                .iter()
                .zip(&mask.layers[l])
                .map(|(y, &dead)| if dead { *y } else { 0.0 })
                .collect::<Vec<f64>>(),
        )
    };
    let mut bound = crashed_norm(0);
    for l in 1..=net.depth() {
        let s = matrix_norm(&net.layers()[l - 1].weights, NormKind::SpectralUpper)?;
        bound *= s;
        if mask.layers[l].iter().any(|&b| b) {
            bound += crashed_norm(l) + bound;
        }
    }
    Ok(bound)
}

/// Absolute-value bound (b2): component-wise bound on `E |Delta_L|`. For
/// input-only crashes this is exactly `p |W_L| ... |W_1| |x|`; crashes at
/// deeper layers extend the recursion
/// `e_l = (1 + p_l) |W_l| e_{l-1} + p_l |y_l|`.
pub fn bound_absolute(net: &Network, x: &[f64], crash: &CrashModel) -> Result<BoundReport> {
    crash.validate(net)?;
    let trace = net.forward(x)?;
    let mut e: Vec<f64> = trace.activations[0]
        .iter()
        .map(|v| crash.p(0) * v.abs())
        .collect();
    for l in 1..=net.depth() {
        let aw = net.layers()[l - 1].weights.abs();
        let mut propagated = aw.matvec(&e)?;
        let p = crash.p(l);
        if p > 0.0 {
            for (ei, y) in propagated.iter_mut().zip(&trace.activations[l]) {
                *ei = (1.0 + p) * *ei + p * y.abs();
            }
        }
        e = propagated;
    }
    Ok(BoundReport {
        method: BoundMethod::B2,
        mean_bound: MeanBound::PerOutput(e),
        variance_estimate: None,
        worst_case: None,
        remainder: None,
        warnings: vec![],
    })
}

fn remainder_for(
    net: &Network,
    crash: &CrashModel,
    d12: Option<f64>,
) -> Option<RemainderDiagnostics> {
    let d12 = d12?;
    let mut mean_term = 0.0;
    let mut variance_term = 0.0;
    for l in crash.crashable_layers() {
        let r = crash.p(l) + 1.0 / net.layer_width(l) as f64;
        mean_term += d12 * r * r;
        variance_term += d12 * r * r * r;
    }
    Some(RemainderDiagnostics {
        d12,
        mean_term,
        variance_term,
        note: "variance remainder reported as D12 r^3; the derivation also \
               admits a D12^2 r^3 reading"
            .into(),
    })
}

/// First-order Taylor moments (b3) at the given head:
/// `E Delta ~= sum_l p_l sum_i v_l^i`, `Var Delta ~= sum_l p_l sum_i (v_l^i)^2`
/// with `v_l^i = -(d head / d y_l^i) y_l^i`. With `d12` supplied, the
/// remainder magnitudes are reported; otherwise the report is first-order
/// only.
pub fn bound_taylor(
    net: &Network,
    x: &[f64],
    crash: &CrashModel,
    head: &Head,
    d12: Option<f64>,
) -> Result<BoundReport> {
    crash.validate(net)?;
    let bundle = backprop(net, x, head)?;
    let mut mean = 0.0;
    let mut variance = 0.0;
    for l in crash.crashable_layers() {
        let p = crash.p(l);
        let v = xi_derivative_from(&bundle, l);
        mean += p * v.iter().sum::<f64>();
        variance += p * v.iter().map(|a| a * a).sum::<f64>();
    }
    let mut warnings = Vec::new();
    if net.has_relu() {
        warnings.push(BoundWarning::NonSmoothActivation);
    }
    if d12.is_none() {
        warnings.push(BoundWarning::FirstOrderOnly);
    }
    Ok(BoundReport {
        method: BoundMethod::B3,
        mean_bound: MeanBound::Scalar(mean),
        variance_estimate: Some(variance),
        worst_case: None,
        remainder: remainder_for(net, crash, d12),
        warnings,
    })
}

/// b3 computed through weight gradients:
/// `E Delta = -p sum_ij (d head / d W^{ij}) W^{ij}`,
/// `Var Delta = p sum_j z_j^2` with `z` the negated column sums of
/// `W (.) d head/d W`. Numerically identical to [`bound_taylor`] by the
/// weight-activation identity. Crashes at the output layer (which has no
/// outgoing matrix) fall back to the activation form.
pub fn bound_taylor_weightform(
    net: &Network,
    x: &[f64],
    crash: &CrashModel,
    head: &Head,
) -> Result<BoundReport> {
    crash.validate(net)?;
    let bundle = backprop(net, x, head)?;
    let mut mean = 0.0;
    let mut variance = 0.0;
    for l in crash.crashable_layers() {
        let p = crash.p(l);
        let z = if l < net.depth() {
            weight_saliency_from(net, &bundle, l).1
        } else {
            xi_derivative_from(&bundle, l)
        };
        mean += p * z.iter().sum::<f64>();
        variance += p * z.iter().map(|a| a * a).sum::<f64>();
    }
    let mut warnings = Vec::new();
    if net.has_relu() {
        warnings.push(BoundWarning::NonSmoothActivation);
    }
    Ok(BoundReport {
        method: BoundMethod::B3WeightForm,
        mean_bound: MeanBound::Scalar(mean),
        variance_estimate: Some(variance),
        worst_case: None,
        remainder: None,
        warnings,
    })
}

/// First-order dataset mean of the loss error,
/// `sum_l -p_l E_x (grad_{W_{l+1}} L, W_{l+1})`. Near a stationary point of
/// the batch loss this tends to zero.
pub fn stationarity_mean(
    net: &Network,
    dataset: &Dataset,
    crash: &CrashModel,
    loss_kind: LossKind,
) -> Result<f64> {
    crash.validate(net)?;
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("dataset must be nonempty".into()));
    }
    let mut total = 0.0;
    for i in 0..dataset.len() {
        let head = Head::Loss(dataset.loss_spec(i, loss_kind));
        let bundle = backprop(net, &dataset.inputs[i], &head)?;
        for l in crash.crashable_layers() {
            let p = crash.p(l);
            if l < net.depth() {
                let w = &net.layers()[l].weights;
                let dw = &bundle.d_weights[l];
                let mut inner = 0.0;
                for k in 0..w.rows() {
                    for j in 0..w.cols() {
                        inner += w.get(k, j) * dw.get(k, j);
                    }
                }
                total += -p * inner;
            } else {
                // Output-layer crashes have no outgoing matrix; use the
                // activation form directly.
                total += p * xi_derivative_from(&bundle, l).iter().sum::<f64>();
            }
        }
    }
    Ok(total / dataset.len() as f64)
}
