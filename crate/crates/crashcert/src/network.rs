//! Layered feed-forward networks, crash masks, and the bounded loss layer.
//!
//! A network with `L` weight matrices has `L + 1` *activation layers*
//! indexed `0..=L`: layer `0` is the input, layer `L` is the (linear)
//! output. Weight matrix `m` (0-based) connects activation layer `m` to
//! `m + 1`. Crash masks and per-layer crash probabilities are indexed by
//! activation layer; a crashed neuron emits `0` after its activation
//! (stuck-at-0), and input crashes zero the corresponding `x` entries.

use crate::error::{Error, Result};
use crate::math::Matrix;
use serde::{Deserialize, Serialize};

/// Element-wise activation function. All variants are 1-Lipschitz; `Relu`
/// is non-smooth, which downgrades the trust of Taylor-based bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Relu,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Relu => z.max(0.0),
            Activation::Linear => z,
        }
    }

    /// First derivative; the ReLU derivative at exactly 0 is defined as 0.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = self.apply(z);
                s * (1.0 - s)
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }

    pub fn is_smooth(self) -> bool {
        !matches!(self, Activation::Relu)
    }
}

/// One dense layer: `y = activation(W x + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::dim(format!(
                "bias length {} != weight rows {}",
                bias.len(),
                weights.rows()
            )));
        }
        if bias.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("bias entries must be finite"));
        }
        Ok(Layer { weights, bias, activation })
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }
}

/// A feed-forward network. Adjacent layer dimensions chain and the last
/// layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::dim("network needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[1].in_dim() != w[0].out_dim() {
                return Err(Error::dim(format!(
                    "layer dims do not chain: {} -> {}",
                    w[0].out_dim(),
                    w[1].in_dim()
                )));
            }
        }
        if layers.last().unwrap().activation != Activation::Linear {
            return Err(Error::InvalidConfig("last layer must be linear".into()));
        }
        Ok(Network { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut Vec<Layer> {
        &mut self.layers
    }

    /// Number of weight matrices, `L`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// Width of activation layer `l` for `l in 0..=L`.
    pub fn layer_width(&self, l: usize) -> usize {
        if l == 0 {
            self.input_dim()
        } else {
            self.layers[l - 1].out_dim()
        }
    }

    /// Widths of all activation layers, `0..=L`.
    pub fn layer_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(Layer::out_dim));
        w
    }

    pub fn has_relu(&self) -> bool {
        self.layers.iter().any(|l| l.activation == Activation::Relu)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.rows() * l.weights.cols() + l.bias.len())
            .sum()
    }

    /// Clean forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        self.forward_crashed_opt(x, None)
    }

    /// Forward pass with crashed neurons forced to 0 after their activation.
    pub fn forward_crashed(&self, x: &[f64], mask: &CrashMask) -> Result<ForwardTrace> {
        self.forward_crashed_opt(x, Some(mask))
    }

    fn forward_crashed_opt(&self, x: &[f64], mask: Option<&CrashMask>) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::dim(format!(
                "input length {} != input dim {}",
                x.len(),
                self.input_dim()
            )));
        }
        if let Some(m) = mask {
            m.validate(self)?;
        }
        let mut activations = Vec::with_capacity(self.depth() + 1);
        let mut pre_activations = Vec::with_capacity(self.depth());
        let mut cur = x.to_vec();
        if let Some(m) = mask {
            apply_mask(&mut cur, &m.layers[0]);
        }
        activations.push(cur.clone());
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weights.matvec(&cur)?;
            for (zi, b) in z.iter_mut().zip(&layer.bias) {
                *zi += b;
            }
            let mut y: Vec<f64> = z.iter().map(|&v| layer.activation.apply(v)).collect();
            if let Some(m) = mask {
                apply_mask(&mut y, &m.layers[idx + 1]);
            }
            pre_activations.push(z);
            activations.push(y.clone());
            cur = y;
        }
        Ok(ForwardTrace { activations, pre_activations })
    }

    /// Run layers `from+1..=L` starting from given activations of layer `from`.
    pub fn forward_from(&self, from: usize, y_from: &[f64]) -> Result<ForwardTrace> {
        if from > self.depth() {
            return Err(Error::dim(format!("layer {from} out of range")));
        }
        if y_from.len() != self.layer_width(from) {
            return Err(Error::dim("forward_from: activation length mismatch"));
        }
        let mut activations = vec![y_from.to_vec()];
        let mut pre_activations = Vec::new();
        let mut cur = y_from.to_vec();
        for layer in &self.layers[from..] {
            let mut z = layer.weights.matvec(&cur)?;
            for (zi, b) in z.iter_mut().zip(&layer.bias) {
                *zi += b;
            }
            let y: Vec<f64> = z.iter().map(|&v| layer.activation.apply(v)).collect();
            pre_activations.push(z);
            activations.push(y.clone());
            cur = y;
        }
        Ok(ForwardTrace { activations, pre_activations })
    }
}

fn apply_mask(values: &mut [f64], crashed: &[bool]) {
    for (v, &dead) in values.iter_mut().zip(crashed) {
        if dead {
            *v = 0.0;
        }
    }
}

/// Per-layer crash indicators (`true` = neuron crashed). `layers[0]`
/// applies to the input; `layers[L]` to the output layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashMask {
    pub layers: Vec<Vec<bool>>,
}

impl CrashMask {
    pub fn all_false(net: &Network) -> Self {
        CrashMask {
            layers: net.layer_widths().iter().map(|&w| vec![false; w]).collect(),
        }
    }

    /// Single crashed neuron at `(layer, index)`.
    pub fn single(net: &Network, layer: usize, index: usize) -> Result<Self> {
        let mut m = CrashMask::all_false(net);
        if layer >= m.layers.len() || index >= m.layers[layer].len() {
            return Err(Error::dim(format!("no neuron ({layer}, {index})")));
        }
        m.layers[layer][index] = true;
        Ok(m)
    }

    pub fn validate(&self, net: &Network) -> Result<()> {
        let widths = net.layer_widths();
        if self.layers.len() != widths.len() {
            return Err(Error::dim(format!(
                "mask has {} layers, network has {}",
                self.layers.len(),
                widths.len()
            )));
        }
        for (l, (m, w)) in self.layers.iter().zip(&widths).enumerate() {
            if m.len() != *w {
                return Err(Error::dim(format!(
                    "mask layer {l} has {} entries, width is {w}",
                    m.len()
                )));
            }
        }
        Ok(())
    }

    pub fn any(&self) -> bool {
        self.layers.iter().any(|l| l.iter().any(|&b| b))
    }

    pub fn crashed_count(&self) -> usize {
        self.layers.iter().map(|l| l.iter().filter(|&&b| b).count()).sum()
    }
}

/// Per-layer pre-activations and activations from one evaluation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Activations `y_0..=y_L`; `y_0` is the (possibly masked) input.
    pub activations: Vec<Vec<f64>>,
    /// Pre-activations `z_1..=z_L` (index `l-1` holds `z_l`).
    pub pre_activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().unwrap()
    }
}

/// Regression or classification target of one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Values(Vec<f64>),
    Class(usize),
}

/// Loss family; the returned loss always lies in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossKind {
    /// `clamp(mean squared error, 0, 1)`.
    BoundedMse,
    /// `clamp(scale * (max wrong logit - true logit), -1, 1)`.
    BoundedMargin { scale: f64 },
}

/// A loss bound to a concrete target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub target: Target,
}

impl LossSpec {
    pub fn mse(target: Vec<f64>) -> Self {
        LossSpec { kind: LossKind::BoundedMse, target: Target::Values(target) }
    }

    pub fn margin(class: usize, scale: f64) -> Self {
        LossSpec { kind: LossKind::BoundedMargin { scale }, target: Target::Class(class) }
    }
}

/// Bounded loss of an output vector against the spec.
pub fn loss(output: &[f64], spec: &LossSpec) -> Result<f64> {
    match (&spec.kind, &spec.target) {
        (LossKind::BoundedMse, Target::Values(t)) => {
            if t.len() != output.len() {
                return Err(Error::dim(format!(
                    "loss target length {} != output length {}",
                    t.len(),
                    output.len()
                )));
            }
            let mse = output
                .iter()
                .zip(t)
                .map(|(y, t)| (y - t) * (y - t))
                .sum::<f64>()
                / output.len() as f64;
            Ok(mse.clamp(0.0, 1.0))
        }
        (LossKind::BoundedMargin { scale }, Target::Class(c)) => {
            if *c >= output.len() {
                return Err(Error::dim(format!(
                    "class index {c} out of range for {} outputs",
                    output.len()
                )));
            }
            if output.len() < 2 {
                return Err(Error::dim("margin loss needs at least 2 outputs"));
            }
            let wrong = output
                .iter()
                .enumerate()
                .filter(|(k, _)| k != c)
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            Ok((scale * (wrong - output[*c])).clamp(-1.0, 1.0))
        }
        (LossKind::BoundedMse, Target::Class(_)) => {
            Err(Error::InvalidConfig("bounded_mse needs a value target".into()))
        }
        (LossKind::BoundedMargin { .. }, Target::Values(_)) => {
            Err(Error::InvalidConfig("bounded_margin needs a class target".into()))
        }
    }
}

/// The scalar a computation is differentiated against or whose crash error
/// is measured: one output component, or the loss layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Head {
    Output(usize),
    Loss(LossSpec),
}

impl Head {
    pub fn value(&self, output: &[f64]) -> Result<f64> {
        match self {
            Head::Output(k) => output
                .get(*k)
                .copied()
                .ok_or_else(|| Error::dim(format!("output index {k} out of range"))),
            Head::Loss(spec) => loss(output, spec),
        }
    }
}

/// Scalar head value for an input, under an optional crash mask.
pub fn head_value(net: &Network, x: &[f64], mask: Option<&CrashMask>, head: &Head) -> Result<f64> {
    let trace = match mask {
        Some(m) => net.forward_crashed(x, m)?,
        None => net.forward(x)?,
    };
    head.value(trace.output())
}

/// Output-level error `Delta_L = y(crashed) - y(clean)`.
pub fn delta_output(net: &Network, x: &[f64], mask: &CrashMask) -> Result<Vec<f64>> {
    let clean = net.forward(x)?;
    let crashed = net.forward_crashed(x, mask)?;
    Ok(crashed
        .output()
        .iter()
        .zip(clean.output())
        .map(|(a, b)| a - b)
        .collect())
}

/// Head-level error `head(crashed) - head(clean)`.
pub fn delta_head(net: &Network, x: &[f64], mask: &CrashMask, head: &Head) -> Result<f64> {
    Ok(head_value(net, x, Some(mask), head)? - head_value(net, x, None, head)?)
}

/// Duplicate every non-output neuron `k` times, rescaling outgoing weights
/// by `1/k` so the function (on a `k`-duplicated input) is preserved; input
/// duplication rescales the first weight matrix instead. The product of
/// per-layer infinity norms is invariant under this construction.
pub fn duplicate_network(net: &Network, k: usize) -> Result<Network> {
    if k == 0 {
        return Err(Error::InvalidConfig("duplication factor must be >= 1".into()));
    }
    let depth = net.depth();
    let mut layers = Vec::with_capacity(depth);
    for (m, layer) in net.layers().iter().enumerate() {
        let dup_rows = m + 1 != depth; // the output layer is not duplicated
        let dup_cols = true; // source layer m always is (input included)
        let rows = layer.weights.rows();
        let cols = layer.weights.cols();
        let new_rows = if dup_rows { rows * k } else { rows };
        let new_cols = if dup_cols { cols * k } else { cols };
        let mut w = Matrix::zeros(new_rows, new_cols);
        for i in 0..new_rows {
            let src_i = if dup_rows { i / k } else { i };
            for j in 0..new_cols {
                let src_j = j / k;
                w.set(i, j, layer.weights.get(src_i, src_j) / k as f64);
            }
        }
        let bias = if dup_rows {
            let mut b = Vec::with_capacity(rows * k);
            for i in 0..rows * k {
                b.push(layer.bias[i / k]);
            }
            b
        } else {
            layer.bias.clone()
        };
        layers.push(Layer::new(w, bias, layer.activation)?);
    }
    Network::new(layers)
}

/// Repeat each entry of `x` `k` times (the duplicated-network input).
pub fn duplicate_input(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() * k);
    for &v in x {
        for _ in 0..k {
            out.push(v);
        }
    }
    out
}
