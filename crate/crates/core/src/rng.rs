//! Counter-based randomness.
//!
//! Every random value in the engine is a pure function of a key tuple
//! `(seed, stream, counter)`. There is no generator state shared between
//! threads, so results do not depend on scheduling or worker count.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const MUL_B: u64 = 0xD6E8_FEB8_6659_FD93;
const MUL_C: u64 = 0xA076_1D64_78BD_642F;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash of a three-word counter.
#[inline]
pub fn hash3(seed: u64, stream: u64, counter: u64) -> u64 {
    let h = mix64(seed.wrapping_add(GOLDEN));
    let h = mix64(h ^ stream.wrapping_mul(MUL_B).wrapping_add(GOLDEN));
    mix64(h ^ counter.wrapping_mul(MUL_C).wrapping_add(GOLDEN))
}

/// Maps 64 random bits to `[0, 1)` using the top 53 bits.
#[inline]
pub fn to_unit(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in `[0, 1)` addressed by `(seed, stream, counter)`.
#[inline]
pub fn uniform(seed: u64, stream: u64, counter: u64) -> f64 {
    to_unit(hash3(seed, stream, counter))
}

/// Sequential view over one counter stream.
///
/// Cloning a `CounterRng` forks an identical stream; two streams with the
/// same `(seed, stream)` always yield the same values.
#[derive(Debug, Clone)]
pub struct CounterRng {
    seed: u64,
    stream: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream, counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = hash3(self.seed, self.stream, self.counter);
        self.counter += 1;
        v
    }

    pub fn next_f64(&mut self) -> f64 {
        to_unit(self.next_u64())
    }

    /// Uniform integer in `[0, bound)`. `bound` must be positive.
    pub fn below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        // Lemire's multiply-shift; the bias is < bound / 2^64.
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal draw (Box-Muller, one value per two uniforms).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
