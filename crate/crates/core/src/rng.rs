//! Deterministic random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream whose seed is
//! `SHA-256(master || domain || indices...)`. Streams are therefore
//! independent of evaluation order and thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Named purposes for derived streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Init,
    TrainData,
    TrainNoise,
    TestData,
    EvalSample,
    Probe,
    Analysis,
    Export,
    Trajectory,
}

impl Domain {
    fn tag(self) -> &'static [u8] {
        match self {
            Domain::Init => b"init",
            Domain::TrainData => b"train-data",
            Domain::TrainNoise => b"train-noise",
            Domain::TestData => b"test-data",
            Domain::EvalSample => b"eval-sample",
            Domain::Probe => b"probe",
            Domain::Analysis => b"analysis",
            Domain::Export => b"export",
            Domain::Trajectory => b"trajectory",
        }
    }
}

pub fn stream(master: u64, domain: Domain, indices: &[u64]) -> Rng {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(domain.tag());
    for i in indices {
        h.update(i.to_le_bytes());
    }
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Seed value (not a stream) derived the same way, for APIs that take `u64`.
pub fn derive_seed(master: u64, domain: Domain, indices: &[u64]) -> u64 {
    use rand::RngCore;
    stream(master, domain, indices).next_u64()
}
