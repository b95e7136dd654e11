//! Counter-based deterministic RNG.
//!
//! Draw `i` of a stream is a pure hash of `(seed, stream_id, i)`, so any
//! consumer — in-process sampler, remote worker, test oracle — can reproduce
//! the exact same sequence from the logical coordinates alone. Substreams are
//! derived by rehashing the parent key with an index, which is how per-example
//! generators are built: worker count and scheduling never influence the data.

/// Weyl increment (golden-ratio constant) used by the splitmix64 generator.
const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Stafford "mix13" finalizer: a bijective avalanche over u64.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn key_of(seed: u64, stream_id: u64) -> u64 {
    mix(seed.wrapping_add(GOLDEN) ^ mix(stream_id.wrapping_add(GOLDEN)))
}

/// A deterministic random stream addressed by `(seed, stream_id)` with an
/// explicit draw counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    key: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngStream { key: key_of(seed, stream_id), counter: 0 }
    }

    /// Derive an independent child stream. Children of distinct indices, and
    /// children vs. the parent, produce unrelated sequences.
    pub fn substream(&self, index: u64) -> Self {
        RngStream { key: key_of(self.key, index), counter: 0 }
    }

    /// Number of u64 draws consumed so far.
    /// Hash key identifying this stream (seed and stream id mixed in).
    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Next raw 64-bit draw: `mix(key ^ GOLDEN * (counter + 1))`.
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        mix(self.key ^ GOLDEN.wrapping_mul(self.counter))
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). n = 0 is a contract violation.
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Standard normal via Box-Muller; consumes exactly two draws.
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
    }
}
