//! Signal conditioning applied to every sample before cropping:
//! resample, band-pass, then pad with low-amplitude noise.

use sha2::{Digest, Sha256};

use crate::error::{contract_err, Result};
use crate::signal::{bandpass, noise_pad_to_length, resample, Signal};
use crate::training::{mix_seed, LabeledSample};

#[derive(Clone, Debug, PartialEq)]
pub struct PrepSpec {
    pub resample_hz: Option<f64>,
    pub band_hz: Option<(f64, f64)>,
    pub target_frames: Option<usize>,
    /// Mixed into the per-sample padding seed.
    pub noise_salt: u64,
}

impl Default for PrepSpec {
    fn default() -> Self {
        PrepSpec {
            resample_hz: Some(150.0),
            band_hz: Some((0.5, 50.0)),
            target_frames: Some(3000),
            noise_salt: 0,
        }
    }
}

/// Stable 64-bit digest of a string.
pub fn hash_str(s: &str) -> u64 {
    let digest = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl PrepSpec {
    /// Leaves signals untouched.
    pub fn identity() -> Self {
        PrepSpec {
            resample_hz: None,
            band_hz: None,
            target_frames: None,
            noise_salt: 0,
        }
    }

    /// Padding noise depends only on the sample id and the salt, so a
    /// sample is conditioned the same way in every split and every run.
    pub fn apply(&self, id: &str, signal: &Signal) -> Result<Signal> {
        let mut s = match self.resample_hz {
            Some(hz) if hz != signal.sample_rate_hz() => resample(signal, hz)?,
            _ => signal.clone(),
        };
        if let Some((lo, hi)) = self.band_hz {
            s = bandpass(&s, lo, hi)?;
        }
        if let Some(n) = self.target_frames {
            if s.frames() > n {
                return Err(contract_err!(
                    "sample `{id}` has {} frames after resampling, longer than target_frames = {n}",
                    s.frames()
                ));
            }
            s = noise_pad_to_length(&s, n, mix_seed(&[hash_str(id), self.noise_salt]))?;
        }
        Ok(s)
    }

    pub fn apply_all(&self, samples: &[LabeledSample]) -> Result<Vec<LabeledSample>> {
        samples
            .iter()
            .map(|s| {
                Ok(LabeledSample {
                    signal: self.apply(&s.id, &s.signal)?,
                    ..s.clone()
                })
            })
            .collect()
    }
}
