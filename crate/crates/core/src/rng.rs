//! Seeded random streams.
//!
//! Every stochastic component draws from its own ChaCha8 stream derived
//! from `(seed, stream id)`, so results never depend on call interleaving
//! between components.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64, stream_id: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Normal sample with standard deviation `std`, resampled until it lies
/// within two standard deviations of zero.
pub fn trunc_normal(rng: &mut impl Rng, std: f32) -> f32 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return (z * std as f64) as f32;
        }
    }
}

/// Serializable position of a stream.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StreamState {
    pub seed: u64,
    pub stream: u64,
    /// Word position as a decimal string (u128 does not fit TOML integers).
    pub word_pos: String,
}

impl StreamState {
    pub fn capture(seed: u64, rng: &StreamRng) -> Self {
        StreamState { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> crate::Result<StreamRng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| crate::Error::Format(format!("bad rng word position {:?}", self.word_pos)))?;
        let mut rng = stream(self.seed, self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}
