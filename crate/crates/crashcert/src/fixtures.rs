//! Small reference networks used in tests, docs, and the experiment
//! protocols.

use crate::math::Matrix;
use crate::network::{Activation, Layer, Network};
use crate::rng::RngStream;

/// The n-input averaging network `y = sum(x_i) / n` (the most fault-tolerant
/// single-layer network: crashing any input moves the output by `1/n`).
pub fn averaging_net(n: usize) -> Network {
    let w = Matrix::new(1, n, vec![1.0 / n as f64; n]).expect("valid shape");
    Network::new(vec![Layer::new(w, vec![0.0], Activation::Linear).expect("valid layer")])
        .expect("valid net")
}

/// The worst-case single-layer network `y = x_0` (all other inputs unused).
pub fn first_coordinate_net(n: usize) -> Network {
    let mut data = vec![0.0; n];
    data[0] = 1.0;
    let w = Matrix::new(1, n, data).expect("valid shape");
    Network::new(vec![Layer::new(w, vec![0.0], Activation::Linear).expect("valid layer")])
        .expect("valid net")
}

/// Random dense network with the given activation on hidden layers and a
/// linear output. Weights are `N(0, 1/fan_in)`, biases `N(0, 0.01)`.
pub fn random_net(dims: &[usize], activation: Activation, seed: u64) -> Network {
    assert!(dims.len() >= 2, "need at least input and output dims");
    let mut rng = RngStream::new(seed, 0xF15);
    let mut layers = Vec::new();
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let scale = 1.0 / (fan_in as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gaussian() * scale).collect();
        let bias: Vec<f64> = (0..fan_out).map(|_| rng.gaussian() * 0.1).collect();
        let act = if layers.len() + 1 == dims.len() - 1 {
            Activation::Linear
        } else {
            activation
        };
        layers.push(
            Layer::new(Matrix::new(fan_out, fan_in, data).expect("shape"), bias, act)
                .expect("layer"),
        );
    }
    Network::new(layers).expect("net")
}

/// Random sigmoid network (hidden layers sigmoid, output linear).
pub fn random_sigmoid_net(dims: &[usize], seed: u64) -> Network {
    random_net(dims, Activation::Sigmoid, seed)
}

/// Sigmoid network with row-balanced weights: every entry has magnitude
/// `1/sqrt(fan_in)` with a random sign, so per-neuron weight masses start
/// equal (q-factor 1). Biases are spread uniformly in `[-1, 1]`.
pub fn balanced_sigmoid_net(dims: &[usize], seed: u64) -> Network {
    assert!(dims.len() >= 2, "need at least input and output dims");
    let mut rng = RngStream::new(seed, 0xBA1A);
    let mut layers = Vec::new();
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let scale = 1.0 / (fan_in as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| if rng.bernoulli(0.5) { scale } else { -scale })
            .collect();
        let bias: Vec<f64> = (0..fan_out)
            .map(|i| {
                let spread = 2.0 * (i as f64 + 0.5) / fan_out as f64 - 1.0;
                spread + 0.05 * rng.gaussian()
            })
            .collect();
        let act = if layers.len() + 1 == dims.len() - 1 {
            Activation::Linear
        } else {
            Activation::Sigmoid
        };
        layers.push(
            Layer::new(Matrix::new(fan_out, fan_in, data).expect("shape"), bias, act)
                .expect("layer"),
        );
    }
    Network::new(layers).expect("net")
}

/// A random input vector with entries in `[-1, 1]`.
pub fn random_input(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = RngStream::new(seed, 0x1257);
    (0..dim).map(|_| rng.next_f64() * 2.0 - 1.0).collect()
}

/// A width-`n` discretization of a fixed continuous one-hidden-layer
/// network for scalar inputs in `[0, 1]`: every hidden unit shares the
/// input slope, biases place the sigmoid ridges on a uniform grid, and the
/// zero output layer is left for training. Widening the net refines the
/// grid without changing the represented function class.
pub fn ridge_basis_net(n: usize, slope: f64) -> Network {
    let w1 = Matrix::new(n, 1, vec![slope; n]).expect("shape");
    let b1: Vec<f64> = (0..n)
        .map(|i| -slope * (i as f64 + 0.5) / n as f64)
        .collect();
    let w2 = Matrix::zeros(1, n);
    let layers = vec![
        Layer::new(w1, b1, Activation::Sigmoid).expect("layer"),
        Layer::new(w2, vec![0.0], Activation::Linear).expect("layer"),
    ];
    Network::new(layers).expect("net")
}
