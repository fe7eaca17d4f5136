//! Counter-based noise.
//!
//! Every Gaussian draw is a pure function of `(seed, stream, step, node)`,
//! computed with the Philox4x32-10 block cipher. Nothing is carried between
//! draws, so the order in which particles or steps are visited (and the
//! number of worker threads) cannot change the numbers produced.
//!
//! Brownian increments are built over a fixed "path" grid. When the
//! integration step is a dyadic refinement of that grid the finer
//! increments are filled in with a Brownian bridge, so runs at `dt` and
//! `dt/2` see the same Brownian path at the coarse times.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

#[inline(always)]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = u64::from(a) * u64::from(b);
    ((p >> 32) as u32, p as u32)
}

/// Philox4x32 with 10 rounds.
#[inline]
pub fn philox4x32_10(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = counter;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, c[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

/// A short-lived generator producing the word sequence of one
/// `(seed, stream, step, node)` key. Block `b` of the sequence is the Philox
/// output for counter `[b | node << 16, stream, step_lo, step_hi]`, so one
/// key yields at most `2^16` blocks (`2^18` words).
#[derive(Debug, Clone)]
pub struct KeyedStream {
    key: [u32; 2],
    stream: u32,
    step: u64,
    node: u32,
    block: u32,
    buf: [u32; 4],
    used: usize,
}

impl KeyedStream {
    pub fn new(seed: u64, stream: u64, step: u64, node: u32) -> Self {
        assert!(node < (1 << 16), "node {node} out of range");
        Self {
            key: [seed as u32, (seed >> 32) as u32],
            // Stream ids above 2^32 fold into the high counter word.
            stream: (stream as u32) ^ ((stream >> 32) as u32).rotate_left(16),
            step,
            node,
            block: 0,
            buf: [0; 4],
            used: 4,
        }
    }

    fn refill(&mut self) {
        assert!(self.block < (1 << 16), "keyed stream exhausted");
        let ctr = [
            self.block | (self.node << 16),
            self.stream,
            self.step as u32,
            (self.step >> 32) as u32,
        ];
        self.buf = philox4x32_10(ctr, self.key);
        self.block += 1;
        self.used = 0;
    }
}

impl RngCore for KeyedStream {
    fn next_u32(&mut self) -> u32 {
        if self.used == 4 {
            self.refill();
        }
        let v = self.buf[self.used];
        self.used += 1;
        v
    }

    fn next_u64(&mut self) -> u64 {
        let lo = u64::from(self.next_u32());
        let hi = u64::from(self.next_u32());
        lo | (hi << 32)
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        for chunk in dest.chunks_mut(4) {
            let w = self.next_u32().to_le_bytes();
            chunk.copy_from_slice(&w[..chunk.len()]);
        }
    }
}

/// Standard normal draw keyed by `(seed, stream, step, node)`.
#[inline]
pub fn keyed_normal(seed: u64, stream: u64, step: u64, node: u32) -> f64 {
    let mut rng = KeyedStream::new(seed, stream, step, node);
    StandardNormal.sample(&mut rng)
}

/// Uniform draw on `[0, 1)` keyed like [`keyed_normal`].
#[inline]
pub fn keyed_uniform(seed: u64, stream: u64, step: u64, node: u32) -> f64 {
    let mut rng = KeyedStream::new(seed, stream, step, node);
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Brownian increments of one stream over one path interval of length
/// `path_dt`, split into `2^levels` equal sub-intervals.
///
/// Node 0 draws the full-interval increment; heap node `n >= 1` draws the
/// bridge midpoint of its interval, with children `2n` and `2n + 1`.
pub fn bridge_increments(
    seed: u64,
    stream: u64,
    path_step: u64,
    path_dt: f64,
    levels: u32,
    out: &mut [f64],
) {
    let width = 1usize << levels;
    debug_assert_eq!(out.len(), width);
    out[0] = path_dt.sqrt() * keyed_normal(seed, stream, path_step, 0);
    let mut span = width;
    let mut h = path_dt;
    for level in 0..levels {
        let first_node = 1u32 << level;
        let half = span / 2;
        // Interval totals at this level sit at multiples of `span`.
        for i in 0..(1usize << level) {
            let start = i * span;
            let total = out[start];
            let z = keyed_normal(seed, stream, path_step, first_node + i as u32);
            let left = 0.5 * total + 0.5 * h.sqrt() * z;
            out[start] = left;
            out[start + half] = total - left;
        }
        span = half;
        h *= 0.5;
    }
}
