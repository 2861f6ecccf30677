//! Conditioned delay-Doppler channel synthesis.
//!
//! A sample is a [`ScenarioParams`] draw, its 20-entry [`ConditioningVector`],
//! and a [`ChannelFrameSequence`] of `F` consecutive `M x N x L` frames whose
//! taps are sum-of-sinusoids Jakes processes running continuously across
//! frame boundaries.

mod dataset;
mod jakes;
mod scenario;

pub use dataset::{
    build_dataset, force_doppler, read_dataset, split_dataset, verify_dataset_file, write_dataset,
    Dataset, GenerationConfig, Sample,
};
pub use jakes::{
    flatten_channel, generate_frame_sequence, power_delay_profile, unflatten_channel,
    ChannelFrameSequence, SosProcess, SINUSOIDS_PER_TAP,
};
pub use scenario::{
    derive_doppler, sample_scenario, ConditioningVector, ScenarioParams, ANTENNA_COUNTS,
    CARRIERS_HZ, CP_LENGTHS, E_DIM, MAX_DOPPLER_HZ, SCS_HZ, SPEED_OF_LIGHT,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions of the delay-Doppler grid and of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Delay bins.
    pub m: usize,
    /// Doppler (time) bins.
    pub n: usize,
    /// Delay taps.
    pub l: usize,
    /// Frames per sample.
    pub f: usize,
    /// Conditioning dimension.
    pub e_dim: usize,
}

impl GridConfig {
    /// 32 x 32 grid with 6 taps and 11 frames (enough for a 10-frame horizon).
    pub const FULL: GridConfig = GridConfig {
        m: 32,
        n: 32,
        l: 6,
        f: 11,
        e_dim: E_DIM,
    };

    pub const DESK: GridConfig = GridConfig {
        m: 8,
        n: 8,
        l: 4,
        f: 11,
        e_dim: E_DIM,
    };

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::Usage(format!(
                "grid needs M, N >= 1, got {}x{}",
                self.m, self.n
            )));
        }
        if self.l == 0 || self.l > self.m {
            return Err(Error::Usage(format!(
                "grid needs 1 <= L <= M, got L = {} with M = {}",
                self.l, self.m
            )));
        }
        if self.f < 2 {
            return Err(Error::Usage(format!("grid needs F >= 2, got {}", self.f)));
        }
        if self.e_dim != E_DIM {
            return Err(Error::Usage(format!(
                "conditioning dimension must be {E_DIM}, got {}",
                self.e_dim
            )));
        }
        Ok(())
    }

    /// Samples per frame, `M * N`.
    pub fn mn(&self) -> usize {
        self.m * self.n
    }

    /// Complex channel vector length `D = M * N * L`.
    pub fn d(&self) -> usize {
        self.m * self.n * self.l
    }

    /// Real feature length `2D`.
    pub fn feature_len(&self) -> usize {
        2 * self.d()
    }
}

/// Independent stream `stream` of sample `index` under `base_seed`.
///
/// The ChaCha key is the base seed followed by the sample index, so any
/// sample can be regenerated without touching the others. Stream 0 draws the
/// scenario, stream `l + 1` drives tap `l`.
pub fn sample_stream(base_seed: u64, index: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&base_seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}
