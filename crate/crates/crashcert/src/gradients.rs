//! Reverse-mode gradients of a scalar head (one output component or the
//! loss) with respect to activations, weights and biases, plus the
//! crash-direction derivatives and finite-difference Hessian diagnostics.
//!
//! Gradients are computed one scalar head at a time; vector Jacobians are
//! loops over heads.

use crate::error::{Error, Result};
use crate::math::{matrix_norm, Matrix, NormKind};
use crate::network::{CrashMask, ForwardTrace, Head, LossKind, Network, Target};

/// Gradients of one head for one input.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    /// The forward trace the gradients were computed on.
    pub trace: ForwardTrace,
    /// `d head / d y_l` for activation layers `0..=L` (post-mask values).
    pub d_act: Vec<Vec<f64>>,
    /// `d head / d W_m` for weight matrices `0..L`.
    pub d_weights: Vec<Matrix>,
    /// `d head / d b_m` for weight matrices `0..L`.
    pub d_bias: Vec<Vec<f64>>,
    pub head_value: f64,
}

/// Seed gradient of the head with respect to the output vector.
fn head_seed(output: &[f64], head: &Head) -> Result<(f64, Vec<f64>)> {
    let value = head.value(output)?;
    let mut seed = vec![0.0; output.len()];
    match head {
        Head::Output(k) => seed[*k] = 1.0,
        Head::Loss(spec) => match (&spec.kind, &spec.target) {
            (LossKind::BoundedMse, Target::Values(t)) => {
                let m = output.len() as f64;
                let mse: f64 =
                    output.iter().zip(t).map(|(y, t)| (y - t) * (y - t)).sum::<f64>() / m;
                if mse < 1.0 {
                    for ((s, y), t) in seed.iter_mut().zip(output).zip(t) {
                        *s = 2.0 * (y - t) / m;
                    }
                }
            }
            (LossKind::BoundedMargin { scale }, Target::Class(c)) => {
                let mut best = usize::MAX;
                let mut best_v = f64::NEG_INFINITY;
                for (k, v) in output.iter().enumerate() {
                    if k != *c && *v > best_v {
                        best = k;
                        best_v = *v;
                    }
                }
                let raw = scale * (best_v - output[*c]);
                if raw.abs() < 1.0 {
                    seed[best] = *scale;
                    seed[*c] = -scale;
                }
            }
            _ => return Err(Error::InvalidConfig("loss kind/target mismatch".into())),
        },
    }
    Ok((value, seed))
}

/// Backward pass over layers `start..L` of a trace produced by
/// `forward_from(start, ..)` (or a full trace with `start = 0`).
fn backward(
    net: &Network,
    trace: &ForwardTrace,
    start: usize,
    mask: Option<&CrashMask>,
    head: &Head,
) -> Result<GradientBundle> {
    let depth = net.depth();
    let (head_value, seed) = head_seed(trace.output(), head)?;
    let n_layers = depth - start;
    let mut d_act: Vec<Vec<f64>> = vec![Vec::new(); n_layers + 1];
    let mut d_weights: Vec<Matrix> = Vec::with_capacity(n_layers);
    let mut d_bias: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
    d_act[n_layers] = seed;
    for m in (start..depth).rev() {
        let layer = &net.layers()[m];
        let z = &trace.pre_activations[m - start];
        let y_in = &trace.activations[m - start];
        let mut d_pre: Vec<f64> = d_act[m + 1 - start]
            .iter()
            .zip(z)
            .map(|(d, &zv)| d * layer.activation.derivative(zv))
            .collect();
        if let Some(msk) = mask {
            for (d, &dead) in d_pre.iter_mut().zip(&msk.layers[m + 1]) {
                if dead {
                    *d = 0.0;
                }
            }
        }
        let mut dw = Matrix::zeros(layer.weights.rows(), layer.weights.cols());
        for (i, &dp) in d_pre.iter().enumerate() {
            let row = dw.row_mut(i);
            for (j, &yj) in y_in.iter().enumerate() {
                row[j] = dp * yj;
            }
        }
        d_act[m - start] = layer.weights.matvec_transpose(&d_pre)?;
        d_weights.push(dw);
        d_bias.push(d_pre);
    }
    d_weights.reverse();
    d_bias.reverse();
    Ok(GradientBundle { trace: trace.clone(), d_act, d_weights, d_bias, head_value })
}

/// Gradients of the head on a clean forward pass.
pub fn backprop(net: &Network, x: &[f64], head: &Head) -> Result<GradientBundle> {
    let trace = net.forward(x)?;
    backward(net, &trace, 0, None, head)
}

/// Gradients of the head with a crash mask held fixed (used by dropout
/// training): crashed neurons stay at 0 and pass no gradient.
pub fn backprop_masked(
    net: &Network,
    x: &[f64],
    head: &Head,
    mask: Option<&CrashMask>,
) -> Result<GradientBundle> {
    let trace = match mask {
        Some(m) => net.forward_crashed(x, m)?,
        None => net.forward(x)?,
    };
    backward(net, &trace, 0, mask, head)
}

/// Gradient of the head with respect to the activations of layer `from`,
/// holding those activations as the free input.
pub fn tail_gradient(net: &Network, from: usize, y_from: &[f64], head: &Head) -> Result<Vec<f64>> {
    let trace = net.forward_from(from, y_from)?;
    let bundle = backward(net, &trace, from, None, head)?;
    Ok(bundle.d_act[0].clone())
}

/// Crash-direction derivative of the head at layer `l` evaluated at xi = 0:
/// `v_i = -(d head / d y_l^i) * y_l^i` (layer 0 uses the input entries).
pub fn xi_derivative(net: &Network, x: &[f64], l: usize, head: &Head) -> Result<Vec<f64>> {
    if l > net.depth() {
        return Err(Error::dim(format!(
            "layer {l} out of range (0..={})",
            net.depth()
        )));
    }
    let bundle = backprop(net, x, head)?;
    Ok(xi_derivative_from(&bundle, l))
}

/// Same as [`xi_derivative`] but reusing an existing bundle.
pub fn xi_derivative_from(bundle: &GradientBundle, l: usize) -> Vec<f64> {
    bundle.d_act[l]
        .iter()
        .zip(&bundle.trace.activations[l])
        .map(|(d, y)| -d * y)
        .collect()
}

/// Weight-form saliency of weight matrix `m`: `X = W_m (.) d head/d W_m`
/// and the column sums `z_j = -sum_i X^{ij}`. By the weight-activation
/// identity, `z` equals [`xi_derivative`] at activation layer `m` exactly.
pub fn weight_saliency(
    net: &Network,
    x: &[f64],
    m: usize,
    head: &Head,
) -> Result<(Matrix, Vec<f64>)> {
    if m >= net.depth() {
        return Err(Error::dim(format!(
            "weight matrix {m} out of range (0..{})",
            net.depth()
        )));
    }
    let bundle = backprop(net, x, head)?;
    Ok(weight_saliency_from(net, &bundle, m))
}

pub fn weight_saliency_from(
    net: &Network,
    bundle: &GradientBundle,
    m: usize,
) -> (Matrix, Vec<f64>) {
    let w = &net.layers()[m].weights;
    let dw = &bundle.d_weights[m];
    let mut x_mat = Matrix::zeros(w.rows(), w.cols());
    let mut z = vec![0.0; w.cols()];
    for i in 0..w.rows() {
        for j in 0..w.cols() {
            let v = w.get(i, j) * dw.get(i, j);
            x_mat.set(i, j, v);
            z[j] -= v;
        }
    }
    (x_mat, z)
}

/// Diagonal of the Hessian `d^2 head / d(y_l^i)^2` by central finite
/// differences of tail gradients, step `1e-3 * (1 + |y_l^i|)`. Smooth
/// activations only.
pub fn hessian_diag(net: &Network, x: &[f64], l: usize, head: &Head) -> Result<Vec<f64>> {
    if net.has_relu() {
        return Err(Error::domain(
            "hessian_diag requires smooth activations; the network contains relu",
        ));
    }
    if l > net.depth() {
        return Err(Error::dim(format!("layer {l} out of range")));
    }
    let trace = net.forward(x)?;
    let y_l = trace.activations[l].clone();
    let mut diag = vec![0.0; y_l.len()];
    for i in 0..y_l.len() {
        let h = 1e-3 * (1.0 + y_l[i].abs());
        let mut plus = y_l.clone();
        plus[i] += h;
        let mut minus = y_l.clone();
        minus[i] -= h;
        let gp = tail_gradient(net, l, &plus, head)?[i];
        let gm = tail_gradient(net, l, &minus, head)?[i];
        diag[i] = (gp - gm) / (2.0 * h);
    }
    Ok(diag)
}

/// One row of the derivative-decay table.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DecayRow {
    /// Characteristic width (minimum hidden-layer width; input width if none).
    pub width: usize,
    /// Mean `|d head / d x_i|` over inputs and the batch.
    pub avg_abs_derivative: f64,
    /// Mean `|H_ii|` over inputs and the batch; `None` for non-smooth nets.
    pub avg_abs_hessian_diag: Option<f64>,
    /// Product of per-layer operator infinity norms.
    pub inf_norm_product: f64,
}

/// Derivative-decay diagnostics over a family of networks sharing
/// input/output dimensions: under a continuous limit, `avg|D_i|` decays
/// like `1/n` and `avg|H_ii|` like `1/n^2`, while the norm product stays
/// constant.
pub fn derivative_decay_report(
    nets: &[Network],
    xs: &[Vec<f64>],
    head: &Head,
) -> Result<Vec<DecayRow>> {
    if nets.is_empty() || xs.is_empty() {
        return Err(Error::InvalidConfig("need at least one network and input".into()));
    }
    let in_dim = nets[0].input_dim();
    let out_dim = nets[0].output_dim();
    for net in nets {
        if net.input_dim() != in_dim || net.output_dim() != out_dim {
            return Err(Error::dim("networks must share input/output dims"));
        }
    }
    let mut rows = Vec::with_capacity(nets.len());
    for net in nets {
        let width = (1..net.depth())
            .map(|l| net.layer_width(l))
            .min()
            .unwrap_or(in_dim);
        let mut d_sum = 0.0;
        let mut d_count = 0usize;
        let mut h_sum = 0.0;
        let mut h_count = 0usize;
        for x in xs {
            let bundle = backprop(net, x, head)?;
            for d in &bundle.d_act[0] {
                d_sum += d.abs();
                d_count += 1;
            }
            if !net.has_relu() {
                for h in hessian_diag(net, x, 0, head)? {
                    h_sum += h.abs();
                    h_count += 1;
                }
            }
        }
        let mut norm_product = 1.0;
        for layer in net.layers() {
            norm_product *= matrix_norm(&layer.weights, NormKind::Inf)?;
        }
        rows.push(DecayRow {
            width,
            avg_abs_derivative: d_sum / d_count as f64,
            avg_abs_hessian_diag: if h_count > 0 { Some(h_sum / h_count as f64) } else { None },
            inf_norm_product: norm_product,
        });
    }
    Ok(rows)
}
