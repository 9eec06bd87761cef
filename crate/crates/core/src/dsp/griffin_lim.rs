use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

use super::mel::mel_filterbank;
use super::stft::StftEngine;
use super::{DspError, EnergyMode, MelConfig, Waveform};
use crate::features::FeatureSequence;

#[derive(Clone, Debug)]
pub struct GriffinLimOutput {
    /// Peak-normalised reconstruction; left unscaled when the raw peak is
    /// below `1e-8`.
    pub waveform: Waveform,
    /// Peak absolute sample before normalisation.
    pub raw_peak: f64,
    /// Spectral convergence `‖|STFT(x)| − M‖ / ‖M‖` after each iteration.
    pub convergence: Vec<f64>,
}

/// Invert a log-mel spectrogram: the filterbank pseudo-inverse recovers a
/// linear-frequency magnitude estimate and Griffin-Lim iterations recover a
/// consistent phase. The initial phase is drawn from a fixed seed.
pub fn griffin_lim(
    mel: &FeatureSequence,
    cfg: &MelConfig,
    iterations: usize,
) -> Result<GriffinLimOutput, DspError> {
    cfg.validate()?;
    if mel.dims() != cfg.n_mels {
        return Err(DspError::InvalidConfig(format!(
            "mel has {} bands, configuration expects {}",
            mel.dims(),
            cfg.n_mels
        )));
    }
    if mel.data().iter().any(|v| !v.is_finite()) {
        return Err(DspError::NonFinite);
    }
    let target = linear_magnitude(mel, cfg)?;
    let frames = mel.frames();
    let hop = cfg.hop_length();
    let engine = StftEngine::new(cfg);
    let pad = engine.win_length() / 2;
    let padded_len = (frames - 1) * hop + engine.win_length();

    let mut rng = ChaCha8Rng::seed_from_u64(0x6c1f);
    let mut spectra: Vec<Vec<Complex<f64>>> = target
        .iter()
        .map(|row| {
            row.iter()
                .map(|m| Complex::from_polar(*m, rng.random_range(0.0..std::f64::consts::TAU)))
                .collect()
        })
        .collect();
    let target_norm = target.iter().flatten().map(|m| m * m).sum::<f64>().sqrt();

    let mut convergence = Vec::with_capacity(iterations);
    let mut signal = engine.synthesize(&spectra, padded_len);
    for _ in 0..iterations {
        let estimate = engine.analyze(&signal, frames);
        let mut err = 0.0;
        for ((spec, est), mag) in spectra.iter_mut().zip(&estimate).zip(&target) {
            for ((s, e), m) in spec.iter_mut().zip(est).zip(mag) {
                let a = e.norm();
                err += (a - m) * (a - m);
                *s = if a > 1e-12 { e * (m / a) } else { Complex::new(*m, 0.0) };
            }
        }
        convergence.push(err.sqrt() / target_norm.max(1e-300));
        signal = engine.synthesize(&spectra, padded_len);
    }

    let n_samples = (frames - 1) * hop + 1;
    let mut samples: Vec<f64> = signal[pad..pad + n_samples].to_vec();
    let raw_peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if raw_peak >= 1e-8 {
        samples.iter_mut().for_each(|s| *s /= raw_peak);
    }
    Ok(GriffinLimOutput {
        waveform: Waveform::new(samples, cfg.sample_rate)?,
        raw_peak,
        convergence,
    })
}

/// Non-negative least-squares-style magnitude estimate per frame and bin.
fn linear_magnitude(mel: &FeatureSequence, cfg: &MelConfig) -> Result<Vec<Vec<f64>>, DspError> {
    let fb = mel_filterbank(cfg)?;
    let fb = DMatrix::from_row_slice(fb.rows(), fb.cols(), fb.data());
    let pinv = fb
        .pseudo_inverse(1e-10)
        .map_err(|e| DspError::InvalidConfig(e.to_string()))?;
    Ok(mel
        .iter_frames()
        .map(|frame| {
            let energy = nalgebra::DVector::from_iterator(frame.len(), frame.iter().map(|v| v.exp()));
            let bins = &pinv * energy;
            bins.iter()
                .map(|e| match cfg.energy {
                    EnergyMode::Power => e.max(0.0).sqrt(),
                    EnergyMode::Magnitude => e.max(0.0),
                })
                .collect()
        })
        .collect())
}
