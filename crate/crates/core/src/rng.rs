//! Seeded, platform-independent randomness.
//!
//! [`Rng`] wraps ChaCha8, a counter-based generator: the whole state is the
//! 64-bit seed plus the position in the keystream, so it can be checkpointed
//! and restored exactly. Independent sub-streams are derived by hashing a
//! textual key (for example a sample id) together with the parent seed, which
//! keeps per-sample randomness independent of processing order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// Serializable snapshot of an [`Rng`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Position in the ChaCha keystream, in 32-bit words.
    pub word_pos: u128,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator keyed by `key`. Does not advance `self`.
    pub fn derive(&self, key: &str) -> Rng {
        Rng::new(derive_seed(self.seed, key))
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = Rng::new(state.seed);
        rng.inner.set_word_pos(state.word_pos);
        rng
    }
}

pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        let xs: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        assert_ne!(Rng::new(43).next_u64(), xs[0]);
    }

    #[test]
    fn known_first_draw_is_stable() {
        // Pinned so a dependency upgrade that changes the stream is noticed.
        let mut r = Rng::new(0);
        let first = r.next_u64();
        assert_eq!(first, 13_080_132_717_333_068_652);
        let again = Rng::from_state(RngState { seed: 0, word_pos: 0 }).next_u64();
        assert_eq!(first, again);
    }

    #[test]
    fn state_round_trip_resumes_stream() {
        let mut r = Rng::new(9);
        for _ in 0..37 {
            r.next_u32();
        }
        let snap = r.state();
        let expect: Vec<f64> = (0..10).map(|_| r.random()).collect();
        let mut resumed = Rng::from_state(snap);
        let got: Vec<f64> = (0..10).map(|_| resumed.random()).collect();
        assert_eq!(expect, got);
    }

    #[test]
    fn derived_streams_differ_and_are_stable() {
        let r = Rng::new(5);
        let mut a = r.derive("img-1");
        let mut b = r.derive("img-2");
        assert_ne!(a.next_u64(), b.next_u64());
        assert_eq!(r.derive("img-1").next_u64(), Rng::new(5).derive("img-1").next_u64());
    }
}
