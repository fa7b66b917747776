//! Counter-based splittable random streams.
//!
//! A stream is identified by `(seed, stream_id)`; the draw sequence is a
//! pure function of that pair. Parallel consumers assign one stream per
//! work item (e.g. one per Monte-Carlo sample index), which makes results
//! independent of how work is split across threads.

use serde::{Deserialize, Serialize};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic random stream (SplitMix64 over a mixed `(seed, stream_id)` state).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    state: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let state = mix(seed ^ GOLDEN) ^ mix(stream_id.wrapping_mul(GOLDEN) ^ 0xD6E8_FEB8_6659_FD93);
        RngStream { seed, stream_id, state }
    }

    /// A derived stream for sub-tasks (e.g. per-sample streams of a run).
    pub fn substream(&self, index: u64) -> RngStream {
        RngStream::new(self.seed, self.stream_id ^ mix(index.wrapping_add(1)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal draw (Box-Muller).
    pub fn gaussian(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in `[0, n)`.
    pub fn next_below(&mut self, n: usize) -> usize {
        (self.next_f64() * n as f64) as usize % n.max(1)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i + 1);
            xs.swap(i, j);
        }
    }
}

/// Draw `n` uniforms in `[0, 1)` from the stream identified by `(seed, stream_id)`.
pub fn rng_draw(seed: u64, stream_id: u64, n: usize) -> Vec<f64> {
    let mut s = RngStream::new(seed, stream_id);
    (0..n).map(|_| s.next_f64()).collect()
}
