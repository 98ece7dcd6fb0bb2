//! Counter-based random number generation for reproducible parallel simulation.
//!
//! Every random draw in a run is addressed by a key `(iteration, role, m, n)`
//! plus a draw counter, and hashed together with the run seed. A draw is a pure
//! function of its address, so worker threads can consume the same streams in
//! any order and the trajectory never depends on scheduling or thread count.
//!
//! Not cryptographically secure; statistical quality is what the simulation
//! tests require (SplitMix64-style finalizers have full avalanche).

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline(always)]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline(always)]
fn absorb(state: u64, word: u64) -> u64 {
    mix(state.wrapping_add(GOLDEN).wrapping_add(word))
}

/// Which independent Gaussian/uniform family a draw belongs to.
///
/// Streams with distinct roles are independent even at equal `(iter, m, n)`.
/// By convention a given key is used either for Gaussian draws or for uniform
/// draws, never both (they share the raw counter space).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseRole {
    /// `W^alpha_k` in the parameter update.
    ThetaAlpha,
    /// `W^beta_k` in the parameter update.
    ThetaBeta,
    /// `W^{m,n}_k` in the posterior particle update.
    Particle,
    /// Initial particle cloud draw.
    ParticleInit,
    /// Prior ULA chain increments.
    PriorChain,
    /// Prior ULA chain initialization.
    PriorInit,
    /// Mini-batch era all-particle noise addition.
    EpochNoise,
    /// Warmup corrector increments.
    WarmupCorrector,
    /// Posterior short-run MCMC (baseline) increments.
    PosteriorChain,
    /// Posterior short-run MCMC (baseline) initialization.
    PosteriorInit,
    /// Sample-generation chains (evaluation).
    Generate,
    /// Sample-generation chain initialization.
    GenerateInit,
    /// Observation noise optionally added to generated samples.
    GenerateObsNoise,
    /// MAP-latent restart initialization.
    MapRestart,
    /// Epoch permutation shuffling (uniform draws).
    Shuffle,
    /// Network / decoder weight initialization (uniform draws).
    WeightInit,
    /// Swiss-roll arc-length positions (uniform draws).
    DataArcLength,
    /// Swiss-roll latent jitter.
    DataNoise,
    /// Free-form diagnostic streams.
    Diagnostic,
}

impl NoiseRole {
    #[inline(always)]
    fn tag(self) -> u64 {
        match self {
            NoiseRole::ThetaAlpha => 1,
            NoiseRole::ThetaBeta => 2,
            NoiseRole::Particle => 3,
            NoiseRole::ParticleInit => 4,
            NoiseRole::PriorChain => 5,
            NoiseRole::PriorInit => 6,
            NoiseRole::EpochNoise => 7,
            NoiseRole::WarmupCorrector => 8,
            NoiseRole::PosteriorChain => 9,
            NoiseRole::PosteriorInit => 10,
            NoiseRole::Generate => 11,
            NoiseRole::GenerateInit => 12,
            NoiseRole::GenerateObsNoise => 13,
            NoiseRole::MapRestart => 14,
            NoiseRole::Shuffle => 15,
            NoiseRole::WeightInit => 16,
            NoiseRole::DataArcLength => 17,
            NoiseRole::DataNoise => 18,
            NoiseRole::Diagnostic => 19,
        }
    }
}

/// Address of one draw family: `(iteration, role, data index m, particle index n)`.
#[derive(Clone, Copy, Debug)]
pub struct NoiseKey {
    pub iter: u64,
    pub role: NoiseRole,
    pub m: u64,
    pub n: u64,
}

impl NoiseKey {
    pub fn new(iter: u64, role: NoiseRole, m: u64, n: u64) -> Self {
        Self { iter, role, m, n }
    }
}

/// Keyed source of all randomness in a run.
#[derive(Clone, Debug)]
pub struct NoiseStream {
    seed: u64,
    zero_noise: bool,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            zero_noise: false,
        }
    }

    /// Diagnostic stream whose Gaussian draws are all zero. Uniform draws
    /// (shuffles, initial weights, data generation) are unaffected, so the
    /// drift-only dynamics stay well defined.
    pub fn zeroed(seed: u64) -> Self {
        Self {
            seed,
            zero_noise: true,
        }
    }

    pub fn is_zero_noise(&self) -> bool {
        self.zero_noise
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Raw 64-bit word at `(key, counter)`.
    #[inline(always)]
    pub fn raw_u64(&self, key: NoiseKey, counter: u64) -> u64 {
        let mut h = mix(self.seed ^ GOLDEN);
        h = absorb(h, key.role.tag());
        h = absorb(h, key.iter);
        h = absorb(h, key.m);
        h = absorb(h, key.n);
        h = absorb(h, counter);
        mix(h)
    }

    /// Uniform draw in `[0, 1)`.
    #[inline(always)]
    pub fn uniform(&self, key: NoiseKey, counter: u64) -> f64 {
        (self.raw_u64(key, counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard Gaussian draws via Box-Muller on counters `(2i, 2i+1)`;
    /// `gaussian(key, i)` and `fill_gaussian` agree positionally.
    #[inline]
    pub fn gaussian(&self, key: NoiseKey, idx: u64) -> f64 {
        if self.zero_noise {
            return 0.0;
        }
        let pair = idx / 2;
        let (z0, z1) = self.gaussian_pair(key, pair);
        if idx % 2 == 0 {
            z0
        } else {
            z1
        }
    }

    #[inline(always)]
    fn gaussian_pair(&self, key: NoiseKey, pair: u64) -> (f64, f64) {
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.raw_u64(key, 2 * pair) >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.raw_u64(key, 2 * pair + 1) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        (r * c, r * s)
    }

    /// Fill `out` with standard Gaussians at draw indices `offset..offset+len`.
    pub fn fill_gaussian_from(&self, key: NoiseKey, offset: u64, out: &mut [f64]) {
        if self.zero_noise {
            out.fill(0.0);
            return;
        }
        let mut i = 0usize;
        let mut idx = offset;
        // Leading odd index uses the second half of its pair.
        if idx % 2 == 1 && i < out.len() {
            out[i] = self.gaussian_pair(key, idx / 2).1;
            i += 1;
            idx += 1;
        }
        while i + 1 < out.len() {
            let (z0, z1) = self.gaussian_pair(key, idx / 2);
            out[i] = z0;
            out[i + 1] = z1;
            i += 2;
            idx += 2;
        }
        if i < out.len() {
            out[i] = self.gaussian_pair(key, idx / 2).0;
        }
    }

    pub fn fill_gaussian(&self, key: NoiseKey, out: &mut [f64]) {
        self.fill_gaussian_from(key, 0, out);
    }

    /// Fisher-Yates shuffle driven by uniform draws under `key`.
    /// Modulo bias is negligible for the index ranges used here.
    pub fn shuffle<T>(&self, key: NoiseKey, items: &mut [T]) {
        let len = items.len();
        for i in (1..len).rev() {
            let j = (self.raw_u64(key, (len - 1 - i) as u64) % (i as u64 + 1)) as usize;
            items.swap(i, j);
        }
    }
}

/// Expand a 64-bit master seed into independent per-run seeds.
/// `split_seed(s, i) != split_seed(s, j)` for `i != j` up to hash collisions.
pub fn split_seed(master: u64, stream: u64) -> u64 {
    mix(absorb(mix(master ^ GOLDEN), stream))
}
