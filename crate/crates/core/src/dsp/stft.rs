use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{hann, DspError, MelConfig, Waveform};
use crate::numerics::Tensor;

/// Number of analysis frames for `n_samples` samples: frames are centred at
/// `t · hop` for every `t · hop ≤ n_samples`.
pub fn frame_count(n_samples: usize, cfg: &MelConfig) -> usize {
    n_samples / cfg.hop_length() + 1
}

/// Mirror `samples` by `pad` on both sides (edge sample not repeated).
/// Signals shorter than the pad are folded back and forth.
pub(crate) fn reflect_pad(samples: &[f64], pad: usize) -> Vec<f64> {
    let n = samples.len() as isize;
    let fold = |i: isize| -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let m = i.rem_euclid(period);
        (if m < n { m } else { period - m }) as usize
    };
    (-(pad as isize)..n + pad as isize)
        .map(|i| samples[fold(i)])
        .collect()
}

/// Forward/inverse short-time transform over an already padded signal.
pub(crate) struct StftEngine {
    fft_size: usize,
    hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl StftEngine {
    pub(crate) fn new(cfg: &MelConfig) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            fft_size: cfg.fft_size,
            hop: cfg.hop_length(),
            window: hann(cfg.win_length()),
            forward: planner.plan_fft_forward(cfg.fft_size),
            inverse: planner.plan_fft_inverse(cfg.fft_size),
        }
    }

    pub(crate) fn win_length(&self) -> usize {
        self.window.len()
    }

    /// Complex spectra (`fft_size/2 + 1` bins) of `n_frames` frames, frame
    /// `t` reading `padded[t·hop .. t·hop + win]`.
    pub(crate) fn analyze(&self, padded: &[f64], n_frames: usize) -> Vec<Vec<Complex<f64>>> {
        let bins = self.fft_size / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_size];
        (0..n_frames)
            .map(|t| {
                buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
                let start = t * self.hop;
                for (k, w) in self.window.iter().enumerate() {
                    let s = padded.get(start + k).copied().unwrap_or(0.0);
                    buf[k] = Complex::new(s * w, 0.0);
                }
                self.forward.process(&mut buf);
                buf[..bins].to_vec()
            })
            .collect()
    }

    /// Least-squares inverse of [`StftEngine::analyze`] onto a signal of
    /// `len` samples.
    pub(crate) fn synthesize(&self, spectra: &[Vec<Complex<f64>>], len: usize) -> Vec<f64> {
        let n = self.fft_size;
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for (t, spec) in spectra.iter().enumerate() {
            buf[..spec.len()].copy_from_slice(spec);
            for k in 1..n - spec.len() + 1 {
                buf[n - k] = spec[k].conj();
            }
            self.inverse.process(&mut buf);
            let start = t * self.hop;
            for (k, w) in self.window.iter().enumerate() {
                if start + k >= len {
                    break;
                }
                out[start + k] += w * buf[k].re / n as f64;
                norm[start + k] += w * w;
            }
        }
        for (o, w) in out.iter_mut().zip(&norm) {
            *o = if *w > 1e-10 { *o / w } else { 0.0 };
        }
        out
    }
}

/// Magnitude spectrogram, `frames × (fft_size/2 + 1)`, using Hann-windowed
/// frames centred on multiples of the hop (reflect padding at the edges).
pub fn stft_magnitude(w: &Waveform, cfg: &MelConfig) -> Result<Tensor, DspError> {
    cfg.validate()?;
    let engine = StftEngine::new(cfg);
    let pad = engine.win_length() / 2;
    let padded = reflect_pad(w.samples(), pad);
    let n_frames = frame_count(w.len(), cfg);
    let spectra = engine.analyze(&padded, n_frames);
    let bins = cfg.n_bins();
    let data = spectra
        .iter()
        .flat_map(|s| s.iter().map(|c| c.norm()))
        .collect();
    Ok(Tensor::from_vec(n_frames, bins, data).expect("consistent spectrogram shape"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, secs: f64, sr: u32) -> Waveform {
        let n = (secs * sr as f64) as usize;
        let s = (0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
            .collect();
        Waveform::new(s, sr).unwrap()
    }

    fn argmax(row: &[f64]) -> usize {
        row.iter()
            .enumerate()
            .fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
            .0
    }

    #[test]
    fn zero_signal_has_zero_magnitude() {
        let cfg = MelConfig::default();
        let w = Waveform::new(vec![0.0; 4000], 16_000).unwrap();
        let s = stft_magnitude(&w, &cfg).unwrap();
        assert!(s.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bin_centred_sine_peaks_at_its_bin() {
        let cfg = MelConfig::default();
        for k in [10usize, 37, 100, 300] {
            let f = k as f64 * 16_000.0 / 1024.0;
            let s = stft_magnitude(&sine(f, 0.5, 16_000), &cfg).unwrap();
            for t in 3..s.rows() - 3 {
                assert_eq!(argmax(s.row(t)), k, "bin {k} frame {t}");
            }
        }
    }

    #[test]
    fn dc_peaks_at_bin_zero() {
        let cfg = MelConfig::default();
        let w = Waveform::new(vec![0.3; 8000], 16_000).unwrap();
        let s = stft_magnitude(&w, &cfg).unwrap();
        for t in 0..s.rows() {
            assert_eq!(argmax(s.row(t)), 0);
        }
    }

    #[test]
    fn frame_count_law() {
        let cfg = MelConfig::default();
        for n in [1usize, 159, 160, 161, 1000, 16_000] {
            let w = Waveform::new(vec![0.1; n], 16_000).unwrap();
            let s = stft_magnitude(&w, &cfg).unwrap();
            assert_eq!(s.rows(), n / 160 + 1);
            assert_eq!(s.rows(), frame_count(n, &cfg));
        }
    }

    #[test]
    fn reflect_padding_mirrors_without_repeating_edges() {
        assert_eq!(reflect_pad(&[1.0, 2.0, 3.0], 2), vec![3.0, 2.0, 1.0, 2.0, 3.0, 2.0, 1.0]);
        assert_eq!(reflect_pad(&[5.0], 2), vec![5.0; 5]);
    }

    #[test]
    fn synthesis_inverts_analysis() {
        let cfg = MelConfig::default();
        let engine = StftEngine::new(&cfg);
        let x: Vec<f64> = sine(440.0, 0.3, 16_000).samples().to_vec();
        let padded = reflect_pad(&x, 400);
        let n_frames = frame_count(x.len(), &cfg);
        let spec = engine.analyze(&padded, n_frames);
        let y = engine.synthesize(&spec, padded.len());
        for i in 400..400 + x.len() - 400 {
            assert!((y[i] - padded[i]).abs() < 1e-9, "sample {i}");
        }
    }
}
