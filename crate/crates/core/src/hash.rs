//! splitmix64: the single hash and random-number primitive.
//!
//! Every hashed structure and every stochastic choice in the simulator draws
//! from these two functions, so results are reproducible bit-for-bit.

pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// First splitmix64 output for seed `x`.
#[inline]
pub fn mix64(x: u64) -> u64 {
    finalize(x.wrapping_add(GOLDEN_GAMMA))
}

/// One step of the splitmix64 stream: `(value, next_state)`.
#[inline]
pub fn rng_next(state: u64) -> (u64, u64) {
    let next = state.wrapping_add(GOLDEN_GAMMA);
    (finalize(next), next)
}

/// Stateful wrapper around [`rng_next`].
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        let (v, s) = rng_next(self.state);
        self.state = s;
        v
    }

    /// Uniform value in `0..bound` (modulo reduction; bias is negligible for
    /// the bounds used here and keeps the stream trivially portable).
    pub fn below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        self.next_u64() % bound
    }

    pub fn state(&self) -> u64 {
        self.state
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix64_reference_vectors() {
        assert_eq!(mix64(0), 0xE220_A839_7B1D_CDAF);
        assert_eq!(mix64(1), 0x910A_2DEC_8902_5CC1);
        assert_eq!(mix64(0), mix64(0));
        assert_ne!(mix64(0), mix64(1));
    }

    #[test]
    fn rng_next_reference_vector() {
        assert_eq!(rng_next(0), (0xE220_A839_7B1D_CDAF, 0x9E37_79B9_7F4A_7C15));
        assert_eq!(rng_next(12345), rng_next(12345));
    }

    #[test]
    fn stream_mean_is_centered() {
        let mut rng = SplitMix64::new(0);
        let n = 1_000_000;
        let sum: f64 = (0..n).map(|_| rng.next_u64() as f64 / 2f64.powi(64)).sum();
        let mean = sum / n as f64;
        assert!((0.499..=0.501).contains(&mean), "mean {mean}");
    }
}
