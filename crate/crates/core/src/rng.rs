//! Deterministic random-number streams.
//!
//! Every stochastic decision in the crate (parameter init, data order,
//! gate draws, subsampling, rendering) pulls from a named ChaCha stream
//! derived from a master seed. Streams are independent: consuming one
//! never perturbs another, which is what makes reductions such as
//! "p = 0 training equals vanilla fine-tuning" hold bit-for-bit.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive an independent RNG from `(seed, label)`.
///
/// The label namespaces the stream; the same `(seed, label)` pair always
/// yields the same sequence on every platform.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Derive a per-item RNG, e.g. one stream per rendered image.
pub fn item_stream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    stream(seed, &format!("{label}/{index}"))
}

/// Standard normal draw via Box-Muller; deterministic given the stream.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Avoid ln(0) by shifting the open interval.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Truncated normal: resample until the draw falls within `clip` standard
/// deviations, then scale by `std`.
pub fn trunc_normal(rng: &mut ChaCha8Rng, std: f64, clip: f64) -> f64 {
    loop {
        let z = standard_normal(rng);
        if z.abs() <= clip {
            return z * std;
        }
    }
}

/// Hex-encode a byte slice (used for parameter hashes).
pub fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
