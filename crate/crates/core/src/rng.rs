//! Deterministic random streams.
//!
//! Every run has one root seed. Independent child streams (environment, policy
//! noise, replay sampling, network initialization) are ChaCha8 streams keyed by
//! a fixed label, so adding draws to one stream never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamLabel {
    Environment = 1,
    PolicyNoise = 2,
    ReplaySampling = 3,
    NetworkInit = 4,
}

pub fn child_rng(root_seed: u64, label: StreamLabel) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(label as u64);
    rng
}

/// Standard normal draw, independent of the scalar type in use.
pub fn standard_normal(rng: &mut SimRng) -> f64 {
    use rand_distr::Distribution;
    rand_distr::StandardNormal.sample(rng)
}
