use std::f64::consts::PI;

const MULTIPLIER: u64 = 6364136223846793005;

/// PCG-XSH-RR 32-bit generator with a Box-Muller normal sampler.
///
/// The full state, including the cached second normal variate, is exposed
/// through [`Pcg32::to_state`] so a stream can be suspended and resumed exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Pcg32 {
    state: u64,
    increment: u64,
    spare: Option<f64>,
}

impl Pcg32 {
    /// Seeds with the reference `pcg32_srandom_r` procedure.
    pub fn new(seed: u64, seq: u64) -> Self {
        let mut rng = Pcg32 {
            state: 0,
            increment: (seq << 1) | 1,
            spare: None,
        };
        rng.next_u32();
        rng.state = rng.state.wrapping_add(seed);
        rng.next_u32();
        rng
    }

    pub fn next_u32(&mut self) -> u32 {
        let old = self.state;
        self.state = old.wrapping_mul(MULTIPLIER).wrapping_add(self.increment);
        let xorshifted = (((old >> 18) ^ old) >> 27) as u32;
        let rot = (old >> 59) as u32;
        xorshifted.rotate_right(rot)
    }

    /// Uniform in (0, 1], 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        let hi = (self.next_u32() >> 5) as u64;
        let lo = (self.next_u32() >> 6) as u64;
        ((hi << 26 | lo) + 1) as f64 / (1u64 << 53) as f64
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, bound)` via Lemire-free rejection.
    pub fn below(&mut self, bound: u32) -> u32 {
        assert!(bound > 0);
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let r = self.next_u32();
            if r >= threshold {
                return r % bound;
            }
        }
    }

    /// Standard normal via Box-Muller; the second variate is cached.
    pub fn gauss(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * PI * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u32 + 1) as usize;
            items.swap(i, j);
        }
    }

    pub fn to_state(&self) -> (u64, u64, Option<f64>) {
        (self.state, self.increment, self.spare)
    }

    pub fn from_state(state: u64, increment: u64, spare: Option<f64>) -> Self {
        Pcg32 {
            state,
            increment: increment | 1,
            spare,
        }
    }
}
