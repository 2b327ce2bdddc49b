//! Counter-based random streams.
//!
//! A stream is identified by `(root_seed, stream_id)` and positioned by a
//! counter of consumed 64-bit words. The words come from ChaCha8 keyed by the
//! root seed with the stream id selecting the ChaCha stream, so any state can
//! be reconstructed from its three integers.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct RngStream {
    root_seed: u64,
    stream_id: u64,
    counter: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(root_seed: u64, stream_id: u64) -> Self {
        Self::at(root_seed, stream_id, 0)
    }

    /// Reconstructs the stream positioned after `counter` words.
    pub fn at(root_seed: u64, stream_id: u64, counter: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(root_seed);
        inner.set_stream(stream_id);
        // one u64 is two 32-bit ChaCha words
        inner.set_word_pos(u128::from(counter) * 2);
        Self {
            root_seed,
            stream_id,
            counter,
            inner,
        }
    }

    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Derives an independent child stream.
    pub fn fork(&self, child: u64) -> RngStream {
        let id = self
            .stream_id
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(child.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
        RngStream::new(self.root_seed, id)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in the inclusive range `[lo, hi]`.
    pub fn int_range(&mut self, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo <= hi);
        let span = (hi - lo + 1) as f64;
        // one word per draw keeps the counter exact; bias is below 2^-40 for small spans
        lo + ((self.uniform() * span) as u64).min(hi - lo)
    }

    /// One standard normal draw via Box-Muller on two uniforms (cosine branch).
    pub fn normal(&mut self) -> f64 {
        // 1 - u keeps the log argument in (0, 1]
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn gaussian(&mut self, dims: &[usize]) -> Tensor {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| self.normal()).collect();
        Tensor::new(dims, data).expect("dims product matches data length")
    }
}

/// Standard normal tensor drawn from `stream`.
pub fn gaussian(stream: &mut RngStream, dims: &[usize]) -> Tensor {
    stream.gaussian(dims)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_state_same_tensor() {
        let a = RngStream::at(7, 3, 11).gaussian(&[4, 5]);
        let b = RngStream::at(7, 3, 11).gaussian(&[4, 5]);
        assert_eq!(a, b);
    }

    #[test]
    fn reconstruct_from_counter() {
        let mut s = RngStream::new(1, 2);
        for _ in 0..17 {
            s.next_u64();
        }
        let mut r = RngStream::at(1, 2, s.counter());
        assert_eq!(s.next_u64(), r.next_u64());
    }

    #[test]
    fn moments_of_normal() {
        let t = RngStream::new(42, 0).gaussian(&[100_000]);
        let mean = t.mean();
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn distinct_streams_uncorrelated() {
        let a = RngStream::new(42, 0).gaussian(&[100_000]);
        let b = RngStream::new(42, 1).gaussian(&[100_000]);
        let n = a.len() as f64;
        let (ma, mb) = (a.mean(), b.mean());
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            cov += (x - ma) * (y - mb);
            va += (x - ma).powi(2);
            vb += (y - mb).powi(2);
        }
        let corr = cov / (va.sqrt() * vb.sqrt());
        assert!(corr.abs() < 0.02, "corr {corr} over {n} pairs");
    }

    #[test]
    fn int_range_bounds() {
        let mut s = RngStream::new(5, 5);
        for _ in 0..1000 {
            let v = s.int_range(3, 7);
            assert!((3..=7).contains(&v));
        }
    }
}
