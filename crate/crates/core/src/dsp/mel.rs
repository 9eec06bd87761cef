use super::stft::stft_magnitude;
use super::{DspError, EnergyMode, MelConfig, Waveform};
use crate::features::FeatureSequence;
use crate::numerics::Tensor;

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters, `n_mels × (fft_size/2 + 1)`, with centres evenly
/// spaced on the mel axis between `fmin` and `fmax` and unit peak height.
///
/// A filter narrower than one bin spacing would otherwise be empty; it is
/// given a single unit weight at the bin closest to its centre.
pub fn mel_filterbank(cfg: &MelConfig) -> Result<Tensor, DspError> {
    cfg.validate()?;
    let bins = cfg.n_bins();
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut fb = Tensor::zeros(cfg.n_mels, bins);
    for m in 0..cfg.n_mels {
        let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = fb.row_mut(m);
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let up = (f - left) / (centre - left);
            let down = (right - f) / (right - centre);
            *w = up.min(down).max(0.0);
        }
        if row.iter().all(|w| *w == 0.0) {
            let k = ((centre / bin_hz).round() as usize).min(bins - 1);
            row[k] = 1.0;
        }
    }
    Ok(fb)
}

/// Pool per-bin energies (`frames × bins`) through the filterbank and apply
/// `ln(max(·, log_floor))`.
pub(crate) fn log_mel_from_energy(energy: &Tensor, fb: &Tensor, floor: f64) -> FeatureSequence {
    let (frames, n_mels) = (energy.rows(), fb.rows());
    let mut out = Tensor::zeros(frames, n_mels);
    for t in 0..frames {
        let e = energy.row(t);
        for m in 0..n_mels {
            let v: f64 = fb.row(m).iter().zip(e).map(|(w, x)| w * x).sum();
            out.set(t, m, v.max(floor).ln());
        }
    }
    out.into()
}

/// Log-mel spectrogram, `frames × n_mels`.
pub fn mel_spectrogram(w: &Waveform, cfg: &MelConfig) -> Result<FeatureSequence, DspError> {
    if w.sample_rate() != cfg.sample_rate {
        return Err(DspError::InvalidConfig(format!(
            "waveform rate {} differs from configured {}",
            w.sample_rate(),
            cfg.sample_rate
        )));
    }
    let mag = stft_magnitude(w, cfg)?;
    let fb = mel_filterbank(cfg)?;
    let energy = match cfg.energy {
        EnergyMode::Power => mag.map(|v| v * v),
        EnergyMode::Magnitude => mag,
    };
    Ok(log_mel_from_energy(&energy, &fb, cfg.log_floor))
}
