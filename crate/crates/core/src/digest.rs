//! Stable, platform-independent hashing used for pipeline identity, seeds and
//! cache keys.

use sha2::{Digest, Sha256};

/// Hex digits kept from SHA-256 for identifiers (128 bits).
pub const ID_HEX_LEN: usize = 32;

pub fn hex_id(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(ID_HEX_LEN);
    for b in &digest[..ID_HEX_LEN / 2] {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Hashes a sequence of labelled parts into a `u64`. Parts are length-prefixed
/// so that `["ab", "c"]` and `["a", "bc"]` differ.
pub fn stable_u64(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has at least 8 bytes"))
}

/// Seed of one run instance: depends on the global seed, the pipeline and the
/// repetition index.
pub fn run_seed(global_seed: u64, pipeline_hash: &str, mult_index: usize) -> u64 {
    stable_u64(&[
        b"run",
        &global_seed.to_le_bytes(),
        pipeline_hash.as_bytes(),
        &(mult_index as u64).to_le_bytes(),
    ])
}

/// Seed of the dataset of a pipeline: shared by all repetitions.
pub fn data_seed(global_seed: u64, pipeline_hash: &str) -> u64 {
    stable_u64(&[b"data", &global_seed.to_le_bytes(), pipeline_hash.as_bytes()])
}

/// Derives an independent sub-seed (`"init"`, `"shuffle"`, ...) from a seed.
pub fn sub_seed(seed: u64, purpose: &str) -> u64 {
    stable_u64(&[b"sub", &seed.to_le_bytes(), purpose.as_bytes()])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_values() {
        // SHA-256("abc") starts with ba7816bf8f01cfea414140de5dae2223.
        assert_eq!(hex_id(b"abc"), "ba7816bf8f01cfea414140de5dae2223");
        assert_eq!(run_seed(7, "h", 0), run_seed(7, "h", 0));
        assert_ne!(run_seed(7, "h", 0), run_seed(7, "h", 1));
        assert_ne!(run_seed(7, "h", 0), run_seed(8, "h", 0));
        assert_ne!(data_seed(7, "h"), data_seed(7, "g"));
        assert_ne!(stable_u64(&[b"ab", b"c"]), stable_u64(&[b"a", b"bc"]));
    }
}
