//! Deterministic random-number plumbing for the simulators.
//!
//! Every replication owns independent ChaCha streams derived from
//! `(base_seed, replication index, purpose)`, so results are bitwise
//! reproducible regardless of how replications are scheduled across worker
//! threads. ChaCha is counter-based: distinct `set_stream` values yield
//! independent sequences from the same key.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// Purpose of a random stream within one replication.
///
/// Keeping purposes on separate streams means, e.g., that adding one more
/// context draw never perturbs the arm or noise sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Nuisance covariate draws (Z).
    Contexts = 1,
    /// The single uniform per round that picks the arm.
    Arms = 2,
    /// Response noise (Gaussian ε or the Bernoulli uniform).
    Noise = 3,
    /// Once-per-experiment parameter draws (β*).
    Params = 4,
}

/// RNG for one `(replication, purpose)` pair. Replication `r` uses the key
/// `base_seed + r` (wrapping), with the purpose selecting the stream.
pub fn stream_rng(base_seed: u64, replication: u64, stream: Stream) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(base_seed.wrapping_add(replication));
    rng.set_stream(stream as u64);
    rng
}

/// One standard normal draw.
pub fn standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Inverse-CDF lookup for the categorical arm distribution, ordered
/// `(p0, p[0], …, p[d0-1])`. Returns an arm index in `0..=d0`; index 0 is
/// the reference arm. The last arm absorbs any floating-point slack in the
/// cumulative sum.
pub fn categorical_index(u: f64, p0: f64, p: &[f64]) -> usize {
    let mut cum = p0;
    if u < cum {
        return 0;
    }
    for (k, &pk) in p.iter().enumerate() {
        cum += pk;
        if u < cum {
            return k + 1;
        }
    }
    p.len()
}

/// Draws one arm index using a single uniform from `rng`.
pub fn sample_categorical(rng: &mut ChaCha12Rng, p0: f64, p: &[f64]) -> usize {
    let u: f64 = rng.gen::<f64>();
    categorical_index(u, p0, p)
}
