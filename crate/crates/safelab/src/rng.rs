//! Named, reproducible random streams.
//!
//! Every source of randomness in a run is a ChaCha stream derived from the
//! global seed plus a stream name. Adding a new consumer of randomness never
//! perturbs an existing one, and any stream can be reconstructed from
//! `(global_seed, name)` alone.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive the 32-byte ChaCha key for `(global_seed, name)`.
pub fn stream_key(global_seed: u64, name: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update([0x1f]);
    h.update(name.as_bytes());
    h.finalize().into()
}

/// A seeded RNG for the named substream of `global_seed`.
pub fn substream(global_seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(stream_key(global_seed, name))
}

/// Collapse `(global_seed, name)` to a single u64 seed, for APIs that take one.
pub fn derive_seed(global_seed: u64, name: &str) -> u64 {
    let key = stream_key(global_seed, name);
    u64::from_le_bytes(key[..8].try_into().unwrap())
}

/// Serializable position of a ChaCha stream: the key plus the word offset.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StreamState {
    pub key_hex: String,
    /// ChaCha word position, stored as decimal text (u128 is not portable JSON).
    pub word_pos: String,
}

impl StreamState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        StreamState {
            key_hex: hex_encode(&rng.get_seed()),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, String> {
        let key = hex_decode(&self.key_hex).ok_or("bad stream key hex")?;
        let pos: u128 = self.word_pos.parse().map_err(|_| "bad stream word_pos")?;
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for i in 0..32 {
        out[i] = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}
