use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::Waveform;

/// Autocorrelation pitch tracker settings. Frames share the mel analysis
/// grid: frame `t` is centred on sample `t · hop`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct F0Config {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub fmin: f64,
    pub fmax: f64,
    /// Minimum normalised autocorrelation peak for a voiced frame.
    pub threshold: f64,
}

impl Default for F0Config {
    fn default() -> Self {
        Self {
            window_ms: 40.0,
            hop_ms: 10.0,
            fmin: 60.0,
            fmax: 400.0,
            threshold: 0.45,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PitchFrame {
    /// Hz; 0 when unvoiced.
    pub f0: f64,
    pub voiced: bool,
    /// Normalised autocorrelation at the chosen lag.
    pub strength: f64,
}

impl PitchFrame {
    const UNVOICED: Self = Self {
        f0: 0.0,
        voiced: false,
        strength: 0.0,
    };
}

/// Per-frame F0 from the normalised autocorrelation of a rectangular
/// window. The smallest lag whose local peak reaches 90% of the best peak
/// wins, which suppresses sub-harmonic (octave-down) picks.
pub fn extract_f0(w: &Waveform, cfg: &F0Config) -> Vec<PitchFrame> {
    let sr = w.sample_rate() as f64;
    let win = ((cfg.window_ms * sr / 1000.0).round() as usize).max(4);
    let hop = ((cfg.hop_ms * sr / 1000.0).round() as usize).max(1);
    let lag_min = ((sr / cfg.fmax).floor() as usize).max(2);
    let lag_max = ((sr / cfg.fmin).ceil() as usize).min(win - 2);
    let n_frames = w.len() / hop + 1;
    if lag_min + 2 > lag_max {
        return vec![PitchFrame::UNVOICED; n_frames];
    }

    let nfft = (2 * win).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(nfft);
    let inv = planner.plan_fft_inverse(nfft);
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    let mut frame = vec![0.0; win];
    let mut prefix = vec![0.0; win + 1];
    let mut r = vec![0.0; lag_max + 2];

    (0..n_frames)
        .map(|t| {
            let start = (t * hop) as isize - (win / 2) as isize;
            for (k, v) in frame.iter_mut().enumerate() {
                let i = start + k as isize;
                *v = if i >= 0 && (i as usize) < w.len() {
                    w.samples()[i as usize]
                } else {
                    0.0
                };
            }
            for k in 0..win {
                prefix[k + 1] = prefix[k] + frame[k] * frame[k];
            }
            if prefix[win] < 1e-12 {
                return PitchFrame::UNVOICED;
            }
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (b, v) in buf.iter_mut().zip(&frame) {
                b.re = *v;
            }
            fwd.process(&mut buf);
            buf.iter_mut().for_each(|c| *c = Complex::new(c.norm_sqr(), 0.0));
            inv.process(&mut buf);
            for (tau, slot) in r.iter_mut().enumerate().take(lag_max + 2).skip(lag_min - 1) {
                let head = prefix[win - tau];
                let tail = prefix[win] - prefix[tau];
                let denom = (head * tail).sqrt();
                *slot = if denom > 1e-12 {
                    buf[tau].re / nfft as f64 / denom
                } else {
                    0.0
                };
            }
            pick(&r, lag_min, lag_max, sr, cfg.threshold)
        })
        .collect()
}

fn pick(r: &[f64], lag_min: usize, lag_max: usize, sr: f64, threshold: f64) -> PitchFrame {
    let peaks: Vec<usize> = (lag_min..=lag_max)
        .filter(|&t| r[t] > 0.0 && r[t] >= r[t - 1] && r[t] >= r[t + 1])
        .collect();
    let Some(best) = peaks.iter().map(|&t| r[t]).reduce(f64::max) else {
        return PitchFrame::UNVOICED;
    };
    let tau = peaks
        .into_iter()
        .find(|&t| r[t] >= 0.9 * best)
        .expect("best peak qualifies");
    let (a, b, c) = (r[tau - 1], r[tau], r[tau + 1]);
    let curvature = a - 2.0 * b + c;
    let offset = if curvature < 0.0 {
        (0.5 * (a - c) / curvature).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    let voiced = b >= threshold;
    PitchFrame {
        f0: if voiced { sr / (tau as f64 + offset) } else { 0.0 },
        voiced,
        strength: b,
    }
}
