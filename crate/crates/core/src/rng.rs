//! The xorshift64* generator used everywhere a random stream is needed.
//!
//! Streams are keyed by `(seed, stream)` so that parallel consumers (pyramid
//! levels, K-means restarts, per-image rendering) are schedule-independent.

const SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;
const STREAM_MIX: u64 = 0xA24B_AED4_963E_E407;
const OUTPUT_MUL: u64 = 0x2545_F491_4F6C_DD1D;

#[derive(Debug, Clone)]
pub struct XorShift64Star {
    state: u64,
}

impl XorShift64Star {
    /// `state = seed ^ 0x9E3779B97F4A7C15 ^ (stream * 0xA24BAED4963EE407)`.
    pub fn for_stream(seed: u64, stream: u64) -> Self {
        let state = seed ^ SEED_MIX ^ stream.wrapping_mul(STREAM_MIX);
        // The all-zero state is a fixed point of the xorshift step.
        let state = if state == 0 { SEED_MIX } else { state };
        Self { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(OUTPUT_MUL)
    }

    /// Uniform in `[0, 1)` with 24 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 40) as f64 / (1u64 << 24) as f64
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform index in `0..n`. `n` must be non-zero.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_f64() * n as f64) as usize).min(n - 1)
    }

    /// Standard normal sample (Box-Muller, one value per call).
    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
