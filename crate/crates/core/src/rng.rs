//! Reproducible random streams.
//!
//! Every stream is a ChaCha8 keystream addressed by `(root_seed, stream_id)`:
//! the key is expanded from the root seed with SplitMix64 and the stream id
//! selects the ChaCha nonce. Block `b` of stream `s` is therefore a pure
//! function of `(root_seed, s, b)`, so chain `i` sees the same numbers no
//! matter how many other chains run or in which order.
//!
//! Uniforms use the top 53 bits of a `u64`. Normals use the Box–Muller
//! transform (cosine branch first, sine branch cached for the next call).

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Stream id reserved for the limit-process samplers (chains use `0..chains`).
pub const LIMIT_SAMPLER_STREAM: u64 = 1 << 62;
/// Stream id reserved for the SDE integrator.
pub const SDE_STREAM: u64 = (1 << 62) + (1 << 40);

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct RngStream {
    root_seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn next_uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal variate.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u lies in (0, 1], so the logarithm is finite.
        let u1 = 1.0 - self.next_uniform();
        let u2 = self.next_uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for z in out {
            *z = self.next_normal();
        }
    }
}

/// Derives the stream identified by `(root_seed, stream_id)`.
pub fn derive_stream(root_seed: u64, stream_id: u64) -> RngStream {
    let mut sm = root_seed;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut sm).to_le_bytes());
    }
    let mut inner = ChaCha8Rng::from_seed(key);
    inner.set_stream(stream_id);
    RngStream {
        root_seed,
        stream_id,
        inner,
        spare_normal: None,
    }
}
