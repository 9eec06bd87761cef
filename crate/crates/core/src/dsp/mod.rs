//! Signal-processing front end: framing, mel analysis, companding, pitch
//! estimation and phase reconstruction.

mod f0;
mod griffin_lim;
mod mel;
mod mulaw;
mod stft;

pub use f0::{extract_f0, F0Config, PitchFrame};
pub use griffin_lim::{griffin_lim, GriffinLimOutput};
pub use mel::{mel_filterbank, mel_spectrogram, mel_to_hz, hz_to_mel};
pub use mulaw::{mu_law, mu_law_inverse};
pub use stft::{frame_count, stft_magnitude};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("waveform is empty")]
    EmptyWaveform,
    #[error("waveform contains non-finite samples")]
    NonFinite,
    #[error("sample {value} at index {index} is outside [-1, 1]")]
    SampleOutOfRange { index: usize, value: f64 },
    #[error("level {level} at index {index} exceeds the quantizer range")]
    LevelOutOfRange { index: usize, level: u32 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Mono audio at a fixed sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, DspError> {
        if samples.is_empty() {
            return Err(DspError::EmptyWaveform);
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(DspError::NonFinite);
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}

/// Whether the filterbank pools magnitudes or squared magnitudes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergyMode {
    Power,
    Magnitude,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub win_length_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    pub energy: EnergyMode,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            fft_size: 1024,
            win_length_ms: 50.0,
            hop_ms: 10.0,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-10,
            energy: EnergyMode::Power,
        }
    }
}

impl MelConfig {
    pub fn win_length(&self) -> usize {
        (self.win_length_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_length(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frame_secs(&self) -> f64 {
        self.hop_ms / 1000.0
    }

    pub fn validate(&self) -> Result<(), DspError> {
        let bad = |m: &str| Err(DspError::InvalidConfig(m.to_string()));
        if self.hop_length() == 0 || self.win_length() < self.hop_length() {
            return bad("win_length must be at least hop and hop must be positive");
        }
        if self.win_length() > self.fft_size {
            return bad("win_length exceeds fft_size");
        }
        if self.n_mels == 0 || self.n_mels >= self.n_bins() {
            return bad("n_mels must be in 1..fft_size/2+1");
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0)
        {
            return bad("require 0 <= fmin < fmax <= sample_rate/2");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        Ok(())
    }
}

/// Periodic Hann window.
pub(crate) fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}
