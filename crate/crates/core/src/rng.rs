//! Counter-addressed random streams.
//!
//! A stream is identified by `(seed, stream_id)` and positioned by a draw
//! counter. Every draw (uniform, bounded integer, or standard normal)
//! consumes exactly one 128-bit block of ChaCha20 keystream, so the value
//! of draw `k` depends only on `(seed, stream_id, k)` and can be replayed
//! with [`RngStream::at`]. The normal transform goes through `libm` rather
//! than the platform math library, which keeps draws bit-identical across
//! hosts.

use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// 32-bit keystream words consumed per draw.
const WORDS_PER_DRAW: u128 = 4;

const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

#[derive(Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    counter: u64,
    core: ChaCha20Rng,
}

impl fmt::Debug for RngStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RngStream")
            .field("seed", &self.seed)
            .field("stream_id", &self.stream_id)
            .field("counter", &self.counter)
            .finish()
    }
}

impl PartialEq for RngStream {
    fn eq(&self, other: &Self) -> bool {
        (self.seed, self.stream_id, self.counter) == (other.seed, other.stream_id, other.counter)
    }
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self::at(seed, stream_id, 0)
    }

    /// A stream positioned so that its next draw is draw number `counter`.
    pub fn at(seed: u64, stream_id: u64, counter: u64) -> Self {
        let mut core = ChaCha20Rng::seed_from_u64(seed);
        core.set_stream(stream_id);
        core.set_word_pos(counter as u128 * WORDS_PER_DRAW);
        RngStream {
            seed,
            stream_id,
            counter,
            core,
        }
    }

    /// A fresh stream with the same seed and a different id.
    pub fn fork(&self, stream_id: u64) -> Self {
        Self::new(self.seed, stream_id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    #[inline]
    fn block(&mut self) -> (u64, u64) {
        self.counter += 1;
        (self.core.next_u64(), self.core.next_u64())
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        let (a, _) = self.block();
        (a >> 11) as f64 * TWO_POW_NEG_53
    }

    /// Integer in `[0, n)` by 128-bit multiply-shift. `n` must be positive.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        let (a, _) = self.block();
        ((a as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal draw (Box-Muller, cosine branch).
    #[inline]
    pub fn normal(&mut self) -> f64 {
        let (a, b) = self.block();
        let u1 = ((a >> 11) + 1) as f64 * TWO_POW_NEG_53;
        let u2 = (b >> 11) as f64 * TWO_POW_NEG_53;
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(std::f64::consts::TAU * u2)
    }

    pub fn fill_normal<T: Scalar>(&mut self, out: &mut [T]) {
        for v in out {
            *v = T::of(self.normal());
        }
    }
}

/// I.i.d. standard normal entries; advances the stream by `shape.numel()` draws.
pub fn gaussian_sample<T: Scalar>(stream: &mut RngStream, shape: &Shape) -> Tensor<T> {
    let mut data = vec![T::zero(); shape.numel()];
    stream.fill_normal(&mut data);
    Tensor::from_parts_unchecked(shape.clone(), data)
}
