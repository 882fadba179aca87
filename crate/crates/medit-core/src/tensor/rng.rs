//! Deterministic random source. Every stochastic component takes one of
//! these rather than a global RNG, so a run is a pure function of its seed.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream labels. A (seed, label, index) triple addresses an independent
/// stream, so e.g. data-order shuffling never perturbs weight init.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Init,
    Noise,
    Data,
    Scene,
    Dropout,
}

impl StreamKind {
    fn tag(self) -> u64 {
        match self {
            StreamKind::Init => 0x11,
            StreamKind::Noise => 0x22,
            StreamKind::Data => 0x33,
            StreamKind::Scene => 0x44,
            StreamKind::Dropout => 0x55,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The seed a derived stream starts from. Exposed so batch drivers can hand
/// out one independent seed per item under a single run seed.
pub fn child_seed(seed: u64, kind: StreamKind, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(kind.tag())) ^ splitmix64(index))
}

pub struct Rng {
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl Rng {
    /// Root stream for a run.
    pub fn seeded(seed: u64) -> Self {
        Self { inner: ChaCha8Rng::seed_from_u64(seed), spare_normal: None }
    }

    /// Derived stream: independent of the root and of any other
    /// (kind, index) pair under the same seed.
    pub fn stream(seed: u64, kind: StreamKind, index: u64) -> Self {
        Self::seeded(child_seed(seed, kind, index))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f32 {
        ((self.inner.next_u32() >> 8) as f32) * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). n must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Rejection-free modulo bias is negligible for the tiny ranges used
        // here, but stay exact anyway via widening multiply.
        let x = self.inner.next_u64() as u128;
        ((x * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller, computed in f64 then narrowed.
    pub fn normal(&mut self) -> f32 {
        if let Some(z) = self.spare_normal.take() {
            return z as f32;
        }
        let u1 = ((self.inner.next_u32() >> 8) as f64 + 1.0) * (1.0 / (1u64 << 24) as f64);
        let u2 = ((self.inner.next_u32() >> 8) as f64) * (1.0 / (1u64 << 24) as f64);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        (r * theta.cos()) as f32
    }

    pub fn fill_normal(&mut self, out: &mut [f32], mean: f32, std: f32) {
        for v in out.iter_mut() {
            *v = mean + std * self.normal();
        }
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Pick one element uniformly.
    pub fn pick<'a, T>(&mut self, xs: &'a [T]) -> &'a T {
        &xs[self.below(xs.len())]
    }
}
