//! Early approximate analytics: run aggregate jobs over a growing uniform
//! sample, estimate accuracy by bootstrap and stop once the error target
//! is met.

pub mod audit;
pub mod bootstrap;
pub mod datastore;
pub mod delta;
pub mod engine;
pub mod error;
pub mod generate;
pub mod jobs;
pub mod sampling;
pub mod ssabe;
pub mod stats;

pub use datastore::{open_dataset, BlockFile, Origin, Record, Split, Value};
pub use engine::{full_scan, run_job, FinalResult, ResultMode, RuntimeConfig};
pub use error::{EarlError, Result};
pub use jobs::Job;
pub use sampling::{Sample, SamplerMode};
pub use ssabe::EstimatorConfig;

/// The generator used throughout; seeded runs are reproducible across platforms.
pub type EarlRng = rand_chacha::ChaCha8Rng;

/// Derives an independent generator for a numbered sub-task.
pub fn derive_rng(seed: u64, stream: &[u64]) -> EarlRng {
    use rand::SeedableRng;
    let mut s = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &x in stream {
        s = splitmix(s ^ splitmix(x.wrapping_add(0xD1B5_4A32_D192_ED03)));
    }
    EarlRng::seed_from_u64(s)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
