//! The fault-tolerance regularizer and its ingredients: the variance term
//! R1, the row-balance term R2, the continuity/smoothness terms C1 + C2 +
//! C3 (R3), and the infinity-norm term R4.
//!
//! R1's weight gradient needs second-order information (the gradient of a
//! function of gradients); it is computed with a finite-difference
//! Hessian-vector product, two extra backprops per example.

use crate::error::{Error, Result};
use crate::gradients::{backprop, GradientBundle};
use crate::math::{matrix_norm, Matrix, NormKind};
use crate::network::{Head, LossSpec, Network};
use serde::{Deserialize, Serialize};

/// Degenerate row-balance penalty (a zero row-sum) clamps here instead of
/// infinity so optimizers see a finite, steep value.
pub const R2_CAP: f64 = 1e12;

/// Regularizer weights. `psi_deriv` multiplies the discrete-derivative
/// metrics C1 + C2, `psi_smooth` the Gaussian-residual metric C3.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegWeights {
    pub lambda: f64,
    pub mu: f64,
    pub psi_deriv: f64,
    pub psi_smooth: f64,
    pub nu: f64,
    /// C3 kernel width in entries; `None` picks `max(1, cols/32)` per layer.
    pub smoothing_sigma: Option<f64>,
}

impl Default for RegWeights {
    fn default() -> Self {
        RegWeights {
            lambda: 0.0,
            mu: 0.0,
            psi_deriv: 0.0,
            psi_smooth: 0.0,
            nu: 0.0,
            smoothing_sigma: None,
        }
    }
}

impl RegWeights {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.lambda, self.mu, self.psi_deriv, self.psi_smooth, self.nu];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig("regularizer weights must be >= 0".into()));
        }
        if let Some(s) = self.smoothing_sigma {
            if !(s > 0.0) {
                return Err(Error::InvalidConfig("smoothing_sigma must be > 0".into()));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.lambda == 0.0
            && self.mu == 0.0
            && self.psi_deriv == 0.0
            && self.psi_smooth == 0.0
            && self.nu == 0.0
    }

    pub fn sigma_for(&self, cols: usize) -> f64 {
        self.smoothing_sigma.unwrap_or_else(|| default_sigma(cols))
    }
}

/// Default C3 kernel width for a row of `cols` entries.
pub fn default_sigma(cols: usize) -> f64 {
    (cols as f64 / 32.0).max(1.0)
}

/// Adjacent-row discontinuity: `C1 = sum_ij |W^{i+1,j} - W^{ij}|`. Under
/// the continuous correspondence (weights carrying a `1/fan_in` factor)
/// the raw sum approximates the integral of `|dW/dt|` and is
/// width-invariant; duplicated rows contribute nothing.
pub fn continuity_c1(w: &Matrix) -> f64 {
    if w.rows() < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..w.rows() - 1 {
        let (a, b) = (w.row(i), w.row(i + 1));
        for j in 0..w.cols() {
            sum += (b[j] - a[j]).abs();
        }
    }
    sum
}

/// Adjacent-column discontinuity with the transpose scale factor:
/// `C2 = (cols/rows) * sum_ij |W^{i,j+1} - W^{ij}|`.
pub fn continuity_c2(w: &Matrix) -> f64 {
    if w.cols() < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..w.rows() {
        let row = w.row(i);
        for j in 0..w.cols() - 1 {
            sum += (row[j + 1] - row[j]).abs();
        }
    }
    sum * w.cols() as f64 / w.rows() as f64
}

/// Gaussian kernel of the given sigma truncated at 3 sigma, normalized.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    for v in &mut k {
        *v /= total;
    }
    k
}

#[inline]
fn reflect(idx: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = idx;
    // mirror without repeating the boundary sample more than once per fold
    while i < 0 || i >= n {
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - i - 1;
        }
    }
    i as usize
}

fn smooth_row(row: &[f64], kernel: &[f64]) -> Vec<f64> {
    let radius = kernel.len() / 2;
    (0..row.len())
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(t, k)| k * row[reflect(i as isize + t as isize - radius as isize, row.len())])
                .sum()
        })
        .collect()
}

/// Transpose of the smoothing operator applied to `s` (scatter form).
fn smooth_row_transpose(s: &[f64], kernel: &[f64]) -> Vec<f64> {
    let radius = kernel.len() / 2;
    let mut out = vec![0.0; s.len()];
    for (i, &si) in s.iter().enumerate() {
        for (t, k) in kernel.iter().enumerate() {
            let j = reflect(i as isize + t as isize - radius as isize, s.len());
            out[j] += k * si;
        }
    }
    out
}

/// Gaussian-smoothing residual: mean absolute difference between each row
/// (as a 1-D signal) and its smoothed version, normalized per entry. The
/// residual is accumulated as `sum_d k_d (row_j - row_{j+d})`, so constant
/// rows give exactly 0.
pub fn continuity_c3(w: &Matrix, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::domain("sigma must be > 0"));
    }
    if w.cols() < 2 {
        return Ok(0.0);
    }
    let kernel = gaussian_kernel(sigma);
    let radius = kernel.len() / 2;
    let mut sum = 0.0;
    for i in 0..w.rows() {
        let row = w.row(i);
        for j in 0..row.len() {
            let mut residual = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                let nb = reflect(j as isize + t as isize - radius as isize, row.len());
                residual += k * (row[j] - row[nb]);
            }
            sum += residual.abs();
        }
    }
    Ok(sum / (w.rows() * w.cols()) as f64)
}

/// Total smoothness metric `C1 + C2 + C3` of one matrix (the R3 quantity
/// gated by the certification loop).
pub fn smoothness(w: &Matrix, sigma: f64) -> Result<f64> {
    Ok(continuity_c1(w) + continuity_c2(w) + continuity_c3(w, sigma)?)
}

/// Per-matrix regularizer terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerTerms {
    /// Batch mean of `sum_j (dL/dy^j * y^j)^2` at the source activation
    /// layer of this matrix (equals the b3 variance divided by `p`).
    pub r1: f64,
    /// `(max_i W^i / min_i W^i)^2` over row masses; `R2_CAP` when a row
    /// mass is zero.
    pub r2: f64,
    /// C1 + C2 (discrete derivative metrics).
    pub r3_deriv: f64,
    /// C3 (Gaussian residual).
    pub r3_smooth: f64,
    /// Operator infinity norm of the matrix.
    pub r4: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegTerms {
    pub per_layer: Vec<LayerTerms>,
}

impl RegTerms {
    /// Weighted penalty this adds to the loss.
    pub fn penalty(&self, w: &RegWeights) -> f64 {
        self.per_layer
            .iter()
            .map(|t| {
                w.lambda * t.r1
                    + w.mu * t.r2
                    + w.psi_deriv * t.r3_deriv
                    + w.psi_smooth * t.r3_smooth
                    + w.nu * t.r4
            })
            .sum()
    }
}

fn r2_of(w: &Matrix) -> f64 {
    let masses = w.row_abs_sums();
    let max = masses.iter().cloned().fold(0.0, f64::max);
    let min = masses.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        R2_CAP
    } else {
        let ratio = max / min;
        (ratio * ratio).min(R2_CAP)
    }
}

/// Column sums of `W_m (.) dHead/dW_m`, negated: the crash-direction
/// derivative vector in weight form.
fn saliency_z(net: &Network, bundle: &GradientBundle, m: usize) -> Vec<f64> {
    crate::gradients::weight_saliency_from(net, bundle, m).1
}

/// Evaluate all regularizer terms on a batch (R1 is batch-averaged; the
/// structural terms depend only on the weights).
pub fn reg_terms(
    net: &Network,
    inputs: &[Vec<f64>],
    specs: &[LossSpec],
    weights: &RegWeights,
) -> Result<RegTerms> {
    if inputs.is_empty() || inputs.len() != specs.len() {
        return Err(Error::InvalidConfig("batch inputs/specs must be nonempty and paired".into()));
    }
    weights.validate()?;
    let depth = net.depth();
    let mut r1 = vec![0.0; depth];
    for (x, spec) in inputs.iter().zip(specs) {
        let bundle = backprop(net, x, &Head::Loss(spec.clone()))?;
        for (m, r) in r1.iter_mut().enumerate() {
            let z = saliency_z(net, &bundle, m);
            *r += z.iter().map(|v| v * v).sum::<f64>();
        }
    }
    for r in &mut r1 {
        *r /= inputs.len() as f64;
    }
    let per_layer = net
        .layers()
        .iter()
        .enumerate()
        .map(|(m, layer)| {
            let w = &layer.weights;
            let sigma = weights.sigma_for(w.cols());
            Ok(LayerTerms {
                r1: r1[m],
                r2: r2_of(w),
                r3_deriv: continuity_c1(w) + continuity_c2(w),
                r3_smooth: continuity_c3(w, sigma)?,
                r4: matrix_norm(w, NormKind::Inf)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RegTerms { per_layer })
}

/// Gradients with respect to every weight matrix and bias vector.
#[derive(Debug, Clone)]
pub struct Grads {
    pub weights: Vec<Matrix>,
    pub bias: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros(net: &Network) -> Self {
        Grads {
            weights: net
                .layers()
                .iter()
                .map(|l| Matrix::zeros(l.weights.rows(), l.weights.cols()))
                .collect(),
            bias: net.layers().iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn axpy(&mut self, s: f64, other: &Grads) -> Result<()> {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.axpy(s, b)?;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
        Ok(())
    }

    pub fn inf_norm(&self) -> f64 {
        let w = self
            .weights
            .iter()
            .map(|m| m.data().iter().fold(0.0f64, |acc, v| acc.max(v.abs())))
            .fold(0.0f64, f64::max);
        let b = self
            .bias
            .iter()
            .map(|v| v.iter().fold(0.0f64, |acc, x| acc.max(x.abs())))
            .fold(0.0f64, f64::max);
        w.max(b)
    }
}

/// The regularized loss of a batch.
pub fn regularized_loss(
    net: &Network,
    inputs: &[Vec<f64>],
    specs: &[LossSpec],
    weights: &RegWeights,
) -> Result<f64> {
    let mut base = 0.0;
    for (x, spec) in inputs.iter().zip(specs) {
        base += crate::network::head_value(net, x, None, &Head::Loss(spec.clone()))?;
    }
    base /= inputs.len() as f64;
    if weights.is_zero() {
        return Ok(base);
    }
    let terms = reg_terms(net, inputs, specs, weights)?;
    Ok(base + terms.penalty(weights))
}

/// Mean loss of a batch and its gradient, with optional per-example crash
/// masks held fixed (unscaled dropout).
pub fn batch_loss_and_grad(
    net: &Network,
    inputs: &[Vec<f64>],
    specs: &[LossSpec],
    masks: Option<&[crate::network::CrashMask]>,
) -> Result<(f64, Grads)> {
    if inputs.is_empty() || inputs.len() != specs.len() {
        return Err(Error::InvalidConfig("batch inputs/specs must be nonempty and paired".into()));
    }
    if let Some(ms) = masks {
        if ms.len() != inputs.len() {
            return Err(Error::dim("one mask per batch example required"));
        }
    }
    let batch = inputs.len() as f64;
    let mut grads = Grads::zeros(net);
    let mut value = 0.0;
    for (i, (x, spec)) in inputs.iter().zip(specs).enumerate() {
        let head = Head::Loss(spec.clone());
        let bundle = crate::gradients::backprop_masked(net, x, &head, masks.map(|ms| &ms[i]))?;
        value += bundle.head_value / batch;
        for m in 0..net.depth() {
            grads.weights[m].axpy(1.0 / batch, &bundle.d_weights[m])?;
            for (g, d) in grads.bias[m].iter_mut().zip(&bundle.d_bias[m]) {
                *g += d / batch;
            }
        }
    }
    Ok((value, grads))
}

/// The regularizer penalty (R1 batch-averaged on clean passes, plus the
/// structural terms) and its gradient.
///
/// The R1 term is differentiated with the decomposition
/// `R1 = phi(G, W)`, `grad R1 = (d phi/d W)|_G + H . V` where
/// `V = d phi / d G` and `H . V` is a central finite-difference
/// Hessian-vector product with step `1e-4 (1 + ||W||_inf)`.
pub fn penalty_and_grad(
    net: &Network,
    inputs: &[Vec<f64>],
    specs: &[LossSpec],
    weights: &RegWeights,
) -> Result<(f64, Grads)> {
    if inputs.is_empty() || inputs.len() != specs.len() {
        return Err(Error::InvalidConfig("batch inputs/specs must be nonempty and paired".into()));
    }
    weights.validate()?;
    let batch = inputs.len() as f64;
    let mut grads = Grads::zeros(net);
    let mut r1_total = 0.0;

    if weights.lambda > 0.0 {
        let theta_inf = net
            .layers()
            .iter()
            .map(|l| matrix_norm(&l.weights, NormKind::Inf).unwrap_or(0.0))
            .fold(0.0f64, f64::max);
        let fd_step = 1e-4 * (1.0 + theta_inf);
        for (x, spec) in inputs.iter().zip(specs) {
            let head = Head::Loss(spec.clone());
            let bundle = backprop(net, x, &head)?;
            r1_total += add_r1_gradient(
                net,
                x,
                &head,
                &bundle,
                weights.lambda / batch,
                fd_step,
                &mut grads,
            )? / batch;
        }
    }

    let mut penalty = weights.lambda * r1_total;
    for (m, layer) in net.layers().iter().enumerate() {
        let w = &layer.weights;
        let sigma = weights.sigma_for(w.cols());
        penalty += weights.mu * r2_of(w)
            + weights.psi_deriv * (continuity_c1(w) + continuity_c2(w))
            + weights.psi_smooth * continuity_c3(w, sigma)?
            + weights.nu * matrix_norm(w, NormKind::Inf)?;
        add_structural_gradients(w, weights, sigma, &mut grads.weights[m]);
    }
    Ok((penalty, grads))
}

/// The regularized loss and its parameter gradient (clean passes).
pub fn regularized_loss_and_grad(
    net: &Network,
    inputs: &[Vec<f64>],
    specs: &[LossSpec],
    weights: &RegWeights,
) -> Result<(f64, Grads)> {
    let (base, mut grads) = batch_loss_and_grad(net, inputs, specs, None)?;
    if weights.is_zero() {
        return Ok((base, grads));
    }
    let (penalty, reg_grads) = penalty_and_grad(net, inputs, specs, weights)?;
    grads.axpy(1.0, &reg_grads)?;
    Ok((base + penalty, grads))
}

/// Adds `scale * grad R1(x)` into `grads` and returns `R1(x)`.
fn add_r1_gradient(
    net: &Network,
    x: &[f64],
    head: &Head,
    bundle: &GradientBundle,
    scale: f64,
    fd_step: f64,
    grads: &mut Grads,
) -> Result<f64> {
    let depth = net.depth();
    // s_m = column sums of W_m (.) G_m (negated saliency), R1 = sum s^2.
    let mut s_all: Vec<Vec<f64>> = Vec::with_capacity(depth);
    let mut r1 = 0.0;
    for m in 0..depth {
        let z = saliency_z(net, bundle, m);
        r1 += z.iter().map(|v| v * v).sum::<f64>();
        s_all.push(z);
    }
    // Direct term and the HVP direction V.
    let mut v_dir = Grads::zeros(net);
    let mut v_norm = 0.0f64;
    for m in 0..depth {
        let w = &net.layers()[m].weights;
        let g = &bundle.d_weights[m];
        // saliency z_j = -sum_i W^{ij} G^{ij}; with phi = sum_j z_j^2 the
        // chain rule gives d phi/d G^{ij} = -2 z_j W^{ij} and
        // d phi/d W^{ij}|_G = -2 z_j G^{ij}.
        for i in 0..w.rows() {
            for j in 0..w.cols() {
                let zj = s_all[m][j];
                let direct = -2.0 * zj * g.get(i, j);
                grads.weights[m].add_at(i, j, scale * direct);
                v_dir.weights[m].set(i, j, -2.0 * zj * w.get(i, j));
            }
        }
        v_norm = v_norm.max(
            v_dir.weights[m]
                .data()
                .iter()
                .fold(0.0f64, |acc, v| acc.max(v.abs())),
        );
    }
    if v_norm == 0.0 {
        return Ok(r1);
    }
    // H.V by central differences of the loss gradient along V.
    let h = fd_step;
    let eval = |sign: f64| -> Result<GradientBundle> {
        let mut perturbed = net.clone();
        for m in 0..depth {
            let mut dir = v_dir.weights[m].clone();
            dir.scale(sign * h / v_norm);
            perturbed.layers_mut()[m].weights.axpy(1.0, &dir)?;
        }
        backprop(&perturbed, x, head)
    };
    let plus = eval(1.0)?;
    let minus = eval(-1.0)?;
    let factor = scale * v_norm / (2.0 * h);
    for m in 0..depth {
        for i in 0..grads.weights[m].rows() {
            for j in 0..grads.weights[m].cols() {
                let hv = (plus.d_weights[m].get(i, j) - minus.d_weights[m].get(i, j)) * factor;
                grads.weights[m].add_at(i, j, hv);
            }
        }
        for (gb, (p, q)) in grads.bias[m]
            .iter_mut()
            .zip(plus.d_bias[m].iter().zip(&minus.d_bias[m]))
        {
            *gb += (p - q) * factor;
        }
    }
    Ok(r1)
}

/// Subgradients of R2, C1, C2, C3 and R4 for one matrix.
fn add_structural_gradients(w: &Matrix, weights: &RegWeights, sigma: f64, grad: &mut Matrix) {
    let (rows, cols) = (w.rows(), w.cols());
    // R2 = (max row mass / min row mass)^2, first index on ties.
    if weights.mu > 0.0 {
        let masses = w.row_abs_sums();
        let (mut imax, mut imin) = (0usize, 0usize);
        for (i, &m) in masses.iter().enumerate() {
            if m > masses[imax] {
                imax = i;
            }
            if m < masses[imin] {
                imin = i;
            }
        }
        let (smax, smin) = (masses[imax], masses[imin]);
        if smin > 0.0 && imax != imin && smax / smin < R2_CAP.sqrt() {
            let d_max = 2.0 * smax / (smin * smin);
            let d_min = -2.0 * smax * smax / (smin * smin * smin);
            for j in 0..cols {
                grad.add_at(imax, j, weights.mu * d_max * w.get(imax, j).signum_or_zero());
                grad.add_at(imin, j, weights.mu * d_min * w.get(imin, j).signum_or_zero());
            }
        }
    }
    // C1.
    if weights.psi_deriv > 0.0 && rows >= 2 {
        for i in 0..rows - 1 {
            for j in 0..cols {
                let s = (w.get(i + 1, j) - w.get(i, j)).signum_or_zero();
                grad.add_at(i + 1, j, weights.psi_deriv * s);
                grad.add_at(i, j, -weights.psi_deriv * s);
            }
        }
    }
    // C2 (with its cols/rows scale).
    if weights.psi_deriv > 0.0 && cols >= 2 {
        let scale = weights.psi_deriv * cols as f64 / rows as f64;
        for i in 0..rows {
            for j in 0..cols - 1 {
                let s = (w.get(i, j + 1) - w.get(i, j)).signum_or_zero();
                grad.add_at(i, j + 1, scale * s);
                grad.add_at(i, j, -scale * s);
            }
        }
    }
    // C3: grad = (I - S)^T sign(residual) / (rows*cols) per row.
    if weights.psi_smooth > 0.0 && cols >= 2 {
        let kernel = gaussian_kernel(sigma);
        let norm = weights.psi_smooth / (rows * cols) as f64;
        for i in 0..rows {
            let row = w.row(i).to_vec();
            let smoothed = smooth_row(&row, &kernel);
            let signs: Vec<f64> = row
                .iter()
                .zip(&smoothed)
                .map(|(a, b)| (a - b).signum_or_zero())
                .collect();
            let st = smooth_row_transpose(&signs, &kernel);
            for j in 0..cols {
                grad.add_at(i, j, norm * (signs[j] - st[j]));
            }
        }
    }
    // R4 = ||W||_inf: subgradient on the max row (first index on ties).
    if weights.nu > 0.0 {
        let masses = w.row_abs_sums();
        let mut imax = 0usize;
        for (i, &m) in masses.iter().enumerate() {
            if m > masses[imax] {
                imax = i;
            }
        }
        for j in 0..cols {
            grad.add_at(imax, j, weights.nu * w.get(imax, j).signum_or_zero());
        }
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self == 0.0 {
            0.0
        } else {
            self.signum()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{averaging_net, random_input, random_sigmoid_net};
    use crate::injection::CrashModel;
    use crate::network::duplicate_network;

    #[test]
    fn c1_constant_matrix() {
        let w = Matrix::new(4, 3, vec![0.7; 12]).unwrap();
        assert_eq!(continuity_c1(&w), 0.0);
        assert_eq!(continuity_c2(&w), 0.0);
        assert_eq!(continuity_c3(&w, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn c1_alternating_rows_is_maximal() {
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }; 3])
            .collect();
        let w = Matrix::from_rows(&rows).unwrap();
        // Entries bounded by 1: each adjacent pair can differ by at most 2.
        assert_eq!(continuity_c1(&w), 2.0 * 3.0 * 3.0);
    }

    #[test]
    fn c1_row_duplication_never_increases() {
        let mut rng = crate::rng::RngStream::new(1, 1);
        let base = Matrix::new(3, 4, (0..12).map(|_| rng.gaussian()).collect()).unwrap();
        let mut dup_rows = Vec::new();
        for i in 0..3 {
            dup_rows.push(base.row(i).to_vec());
            dup_rows.push(base.row(i).to_vec());
        }
        let dup = Matrix::from_rows(&dup_rows).unwrap();
        assert!((continuity_c1(&dup) - continuity_c1(&base)).abs() < 1e-12);
        // Appending a duplicate of the last row changes nothing.
        let mut appended = base.to_rows();
        appended.push(base.row(2).to_vec());
        let app = Matrix::from_rows(&appended).unwrap();
        assert_eq!(continuity_c1(&app), continuity_c1(&base));
    }

    #[test]
    fn c2_is_scaled_transpose_c1() {
        let mut rng = crate::rng::RngStream::new(8, 0);
        let w = Matrix::new(3, 5, (0..15).map(|_| rng.gaussian()).collect()).unwrap();
        let expected = continuity_c1(&w.transpose()) * w.cols() as f64 / w.rows() as f64;
        assert!((continuity_c2(&w) - expected).abs() < 1e-12);
    }

    #[test]
    fn continuity_invariant_under_network_duplication() {
        let net = random_sigmoid_net(&[3, 4, 1], 21);
        let dup = duplicate_network(&net, 3).unwrap();
        for (a, b) in net.layers().iter().zip(dup.layers()) {
            assert!(
                (continuity_c1(&a.weights) - continuity_c1(&b.weights)).abs() < 1e-12,
                "C1 changed under duplication"
            );
            assert!(
                (continuity_c2(&a.weights) - continuity_c2(&b.weights)).abs() < 1e-12,
                "C2 changed under duplication"
            );
        }
    }

    #[test]
    fn c3_spike_row() {
        let n = 33;
        let mut data = vec![0.0; n];
        data[n / 2] = 1.0;
        let w = Matrix::new(1, n, data.clone()).unwrap();
        let sigma = 1.5;
        let c3 = continuity_c3(&w, sigma).unwrap();
        // Independent direct-convolution oracle.
        let kernel = gaussian_kernel(sigma);
        let radius = kernel.len() / 2;
        let mut residual_sum = 0.0;
        for i in 0..n {
            let mut sm = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                sm += k * data[reflect(i as isize + t as isize - radius as isize, n)];
            }
            residual_sum += (data[i] - sm).abs();
        }
        assert!((c3 - residual_sum / n as f64).abs() < 1e-14);
        // The residual at the spike itself is (1 - center weight).
        let center = kernel[radius];
        let mid_residual = (1.0 - center).abs();
        assert!((residual_sum - 2.0 * mid_residual).abs() < 1e-12);
    }

    #[test]
    fn c3_linear_ramp_small() {
        let n = 64;
        let data: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let w = Matrix::new(1, n, data).unwrap();
        let c3 = continuity_c3(&w, 1.0).unwrap();
        // Smoothing preserves linear trends except near the boundary folds.
        assert!(c3 < 5e-3, "ramp residual {c3}");
    }

    #[test]
    fn r2_values() {
        let w = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![4.0]]).unwrap();
        assert_eq!(r2_of(&w), 16.0);
        let z = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(r2_of(&z), R2_CAP);
    }

    #[test]
    fn r1_times_p_equals_b3_variance() {
        for seed in 0..10 {
            let net = random_sigmoid_net(&[3, 5, 2], seed);
            let x = random_input(3, seed);
            let spec = LossSpec::mse(vec![0.3, -0.2]);
            let terms =
                reg_terms(&net, &[x.clone()], &[spec.clone()], &RegWeights::default()).unwrap();
            for m in 0..net.depth() {
                let p = 0.01;
                let crash = CrashModel::single_layer(&net, m, p).unwrap();
                let b3 = crate::bounds::bound_taylor(
                    &net,
                    &x,
                    &crash,
                    &Head::Loss(spec.clone()),
                    None,
                )
                .unwrap();
                let lhs = terms.per_layer[m].r1 * p;
                let rhs = b3.variance_estimate.unwrap();
                assert!(
                    (lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1e-12),
                    "seed {seed} layer {m}: {lhs} vs {rhs}"
                );
            }
        }
    }

    #[test]
    fn r2_is_inverse_q_squared() {
        let net = random_sigmoid_net(&[4, 6, 3], 3);
        let terms = reg_terms(
            &net,
            &[random_input(4, 0)],
            &[LossSpec::mse(vec![0.0; 3])],
            &RegWeights::default(),
        )
        .unwrap();
        for (m, t) in terms.per_layer.iter().enumerate() {
            let q = crate::guarantees::q_factor(&net.layers()[m].weights).unwrap();
            assert!((t.r2 - 1.0 / (q * q)).abs() < 1e-9 * t.r2);
        }
    }

    #[test]
    fn averaging_net_terms() {
        let net = averaging_net(4);
        let terms = reg_terms(
            &net,
            &[vec![1.0; 4]],
            &[LossSpec::mse(vec![0.5])],
            &RegWeights::default(),
        )
        .unwrap();
        // One output row: perfectly balanced.
        assert_eq!(terms.per_layer[0].r2, 1.0);
        assert_eq!(terms.per_layer[0].r3_deriv, 0.0); // constant row
    }

    #[test]
    fn zero_weights_reduce_to_plain_loss() {
        let net = random_sigmoid_net(&[3, 4, 2], 12);
        let xs = vec![random_input(3, 1), random_input(3, 2)];
        let specs = vec![LossSpec::mse(vec![0.1, 0.2]); 2];
        let w0 = RegWeights::default();
        let plain: f64 = xs
            .iter()
            .zip(&specs)
            .map(|(x, s)| {
                crate::network::head_value(&net, x, None, &Head::Loss(s.clone())).unwrap()
            })
            .sum::<f64>()
            / 2.0;
        let (l, g) = regularized_loss_and_grad(&net, &xs, &specs, &w0).unwrap();
        assert!((l - plain).abs() < 1e-15);
        // Gradient equals the mean backprop gradient.
        let mut expected = Grads::zeros(&net);
        for (x, s) in xs.iter().zip(&specs) {
            let b = backprop(&net, x, &Head::Loss(s.clone())).unwrap();
            for m in 0..net.depth() {
                expected.weights[m].axpy(0.5, &b.d_weights[m]).unwrap();
            }
        }
        for m in 0..net.depth() {
            for (a, b) in g.weights[m].data().iter().zip(expected.weights[m].data()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn lambda_increases_the_loss_when_r1_positive() {
        let net = random_sigmoid_net(&[3, 4, 1], 6);
        let xs = vec![random_input(3, 5)];
        let specs = vec![LossSpec::mse(vec![0.9])];
        let l0 = regularized_loss(&net, &xs, &specs, &RegWeights::default()).unwrap();
        let l1 = regularized_loss(
            &net,
            &xs,
            &specs,
            &RegWeights { lambda: 1.0, ..Default::default() },
        )
        .unwrap();
        let l2 = regularized_loss(
            &net,
            &xs,
            &specs,
            &RegWeights { lambda: 2.0, ..Default::default() },
        )
        .unwrap();
        assert!(l1 > l0);
        assert!(l2 > l1);
        assert!((l2 - l1) - (l1 - l0) < 1e-12); // linear in lambda
    }

    #[test]
    fn gradient_matches_finite_differences_of_regularized_loss() {
        let net = random_sigmoid_net(&[3, 4, 2], 9);
        let xs = vec![random_input(3, 3), random_input(3, 4)];
        let specs = vec![LossSpec::mse(vec![0.2, -0.3]); 2];
        let w = RegWeights {
            lambda: 0.05,
            mu: 1e-4,
            psi_deriv: 1e-3,
            psi_smooth: 1e-2,
            nu: 1e-3,
            smoothing_sigma: Some(1.0),
        };
        let (_, grads) = regularized_loss_and_grad(&net, &xs, &specs, &w).unwrap();
        let mut worst = 0.0f64;
        for m in 0..net.depth() {
            for i in 0..net.layers()[m].weights.rows() {
                for j in 0..net.layers()[m].weights.cols() {
                    let w0 = net.layers()[m].weights.get(i, j);
                    let h = 1e-5 * (1.0 + w0.abs());
                    let mut np = net.clone();
                    np.layers_mut()[m].weights.set(i, j, w0 + h);
                    let mut nm = net.clone();
                    nm.layers_mut()[m].weights.set(i, j, w0 - h);
                    let fp = regularized_loss(&np, &xs, &specs, &w).unwrap();
                    let fm = regularized_loss(&nm, &xs, &specs, &w).unwrap();
                    let fd = (fp - fm) / (2.0 * h);
                    let g = grads.weights[m].get(i, j);
                    worst = worst.max((g - fd).abs() / (1.0 + fd.abs()));
                }
            }
        }
        assert!(worst < 1e-4, "relative gradient error {worst}");
    }
}
