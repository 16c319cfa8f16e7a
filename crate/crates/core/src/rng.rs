//! Deterministic pseudo-random numbers.
//!
//! xoshiro256++ seeded through splitmix64. Hand-rolled so that seeded runs
//! are bit-reproducible regardless of external crate versions; every module
//! takes an explicit `&mut Rng` instead of reaching for global randomness.

use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Rng {
    state: [u64; 4],
    spare_normal: Option<f64>,
}

fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes two seeds into one; used to derive independent per-fold streams.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut s = a ^ b.rotate_left(17).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    splitmix64(&mut s)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut s = seed;
        let state = [splitmix64(&mut s), splitmix64(&mut s), splitmix64(&mut s), splitmix64(&mut s)];
        Rng { state, spare_normal: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller; the second deviate is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let mut u1 = self.next_f64();
        while u1 == 0.0 {
            u1 = self.next_f64();
        }
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Uniform integer in `[0, n)` without modulo bias.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is undefined");
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<E>(&mut self, xs: &mut [E]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    pub fn uniform_matrix<T: Scalar>(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix<T> {
        let mut m = Matrix::zeros(rows, cols);
        for x in m.data_mut() {
            *x = T::c(self.uniform(lo, hi));
        }
        m
    }

    pub fn normal_matrix<T: Scalar>(&mut self, rows: usize, cols: usize, mean: f64, sigma: f64) -> Matrix<T> {
        let mut m = Matrix::zeros(rows, cols);
        for x in m.data_mut() {
            *x = T::c(mean + sigma * self.normal());
        }
        m
    }

    /// Glorot-style uniform init with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot_matrix<T: Scalar>(&mut self, rows: usize, cols: usize) -> Matrix<T> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        self.uniform_matrix(rows, cols, -a, a)
    }
}
