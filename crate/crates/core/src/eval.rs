//! Objective metrics and alignment diagnostics.
//!
//! Spectral distance is measured on cepstra obtained by an orthonormal
//! DCT-II of log-mel frames. Coefficient 0 carries overall level and is
//! excluded from [`mcd`]; at most coefficients 1 to 24 are compared.

use std::f64::consts::{LN_10, PI};
use std::fmt::Write as _;

use thiserror::Error;

use crate::align::{dtw, AlignError, Distance, DtwPath};
use crate::features::{AlignmentMatrix, FeatureSequence};

/// Highest cepstral index compared by [`mcd`].
pub const MAX_MCD_COEFF: usize = 24;
/// Largest forward jump of the attention argmax not counted as a skip.
pub const JUMP_THRESHOLD: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("requested {requested} cepstral coefficients from {available} mel bands")]
    TooManyCoefficients { requested: usize, available: usize },
    #[error("nothing left to compare after alignment")]
    Empty,
    #[error("no frames are voiced in both utterances")]
    NoVoicedFrames,
    #[error("{converted} converted items against {target} targets")]
    Unpaired { converted: usize, target: usize },
    #[error(transparent)]
    Align(#[from] AlignError),
}

fn dct_basis(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|k| {
            let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            (0..n)
                .map(|i| s * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos())
                .collect()
        })
        .collect()
}

/// First `n_coeffs` orthonormal DCT-II coefficients of every frame.
pub fn mel_cepstra(mel: &FeatureSequence, n_coeffs: usize) -> Result<FeatureSequence, EvalError> {
    let n = mel.dims();
    if n_coeffs > n {
        return Err(EvalError::TooManyCoefficients {
            requested: n_coeffs,
            available: n,
        });
    }
    let basis = dct_basis(n);
    let mut out = FeatureSequence::zeros(mel.frames(), n_coeffs);
    for t in 0..mel.frames() {
        let x = mel.frame(t);
        for (k, c) in out.frame_mut(t).iter_mut().enumerate() {
            *c = basis[k].iter().zip(x).map(|(b, v)| b * v).sum();
        }
    }
    Ok(out)
}

/// Inverse of [`mel_cepstra`] for a full set of coefficients.
pub fn inverse_cepstra(cep: &FeatureSequence) -> FeatureSequence {
    let n = cep.dims();
    let basis = dct_basis(n);
    let mut out = FeatureSequence::zeros(cep.frames(), n);
    for t in 0..cep.frames() {
        let c = cep.frame(t);
        for (i, x) in out.frame_mut(t).iter_mut().enumerate() {
            *x = (0..n).map(|k| basis[k][i] * c[k]).sum();
        }
    }
    out
}

/// `(10 / ln 10) · √(2 · Σ d²)` for one pair of cepstral frames.
pub fn frame_distortion(a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    10.0 / LN_10 * (2.0 * sq).sqrt()
}

fn compared_cepstra(mel: &FeatureSequence) -> Result<FeatureSequence, EvalError> {
    let n = mel.dims().min(MAX_MCD_COEFF + 1);
    if n < 2 {
        return Err(EvalError::Empty);
    }
    Ok(mel_cepstra(mel, n)?.select_dims(1, n - 1))
}

/// Mel-cepstral distortion with its DTW path.
#[derive(Clone, Debug, PartialEq)]
pub struct Distortion {
    pub mcd: f64,
    /// Pairs of (converted, reference) frames.
    pub path: DtwPath,
}

/// Mean distortion over the DTW alignment of the two log-mel sequences.
pub fn mcd(converted: &FeatureSequence, reference: &FeatureSequence) -> Result<Distortion, EvalError> {
    if converted.frames() == 0 || reference.frames() == 0 {
        return Err(EvalError::Empty);
    }
    let a = compared_cepstra(converted)?;
    let b = compared_cepstra(reference)?;
    let path = dtw(&a, &b, Distance::Euclidean)?;
    Ok(Distortion {
        mcd: mcd_along(&a, &b, &path),
        path,
    })
}

/// Mean distortion between two cepstral sequences along a fixed path.
pub fn mcd_along(a: &FeatureSequence, b: &FeatureSequence, path: &DtwPath) -> f64 {
    let pairs = path.pairs();
    pairs
        .iter()
        .map(|&(i, j)| frame_distortion(a.frame(i), b.frame(j)))
        .sum::<f64>()
        / pairs.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct F0Error {
    pub rmse: f64,
    pub voiced_frames: usize,
    pub aligned_frames: usize,
}

/// RMSE over path pairs voiced (nonzero F0) on both sides. Without a path
/// frames are paired by index over the shorter length.
pub fn f0_rmse(converted: &[f64], reference: &[f64], path: Option<&DtwPath>) -> Result<F0Error, EvalError> {
    let pairs: Vec<(usize, usize)> = match path {
        Some(p) => p.pairs().to_vec(),
        None => (0..converted.len().min(reference.len())).map(|i| (i, i)).collect(),
    };
    let (mut sq, mut n) = (0.0, 0usize);
    for &(i, j) in &pairs {
        let (a, b) = (converted[i], reference[j]);
        if a > 0.0 && b > 0.0 {
            sq += (a - b) * (a - b);
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::NoVoicedFrames);
    }
    Ok(F0Error {
        rmse: (sq / n as f64).sqrt(),
        voiced_frames: n,
        aligned_frames: pairs.len(),
    })
}

/// Mean absolute duration difference in seconds.
pub fn ddur(converted: &[f64], target: &[f64]) -> Result<f64, EvalError> {
    if converted.len() != target.len() {
        return Err(EvalError::Unpaired {
            converted: converted.len(),
            target: target.len(),
        });
    }
    if converted.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(converted.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>() / converted.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentDiagnostics {
    /// Mean natural-log entropy of the alignment rows.
    pub mean_entropy: f64,
    /// Steps whose argmax moves backwards or forwards by more than `jump`.
    pub violations: usize,
    /// Mean `|argmax(α_t) − reference[t]|` in encoder states.
    pub mean_deviation: f64,
}

/// Compares an alignment with a reference track of encoder indices, one
/// per decoder step (see [`DtwPath::encoder_track`]). Steps past the end of
/// the reference compare against its last entry.
pub fn alignment_diagnostics(a: &AlignmentMatrix, reference: &[usize], jump: usize) -> AlignmentDiagnostics {
    let steps = a.steps();
    if steps == 0 {
        return AlignmentDiagnostics {
            mean_entropy: 0.0,
            violations: 0,
            mean_deviation: 0.0,
        };
    }
    let mut entropy = 0.0;
    let mut violations = 0;
    let mut deviation = 0.0;
    let mut prev: Option<usize> = None;
    for t in 0..steps {
        entropy -= a.row(t).iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        let k = a.argmax(t);
        if let Some(p) = prev {
            if k < p || k > p + jump {
                violations += 1;
            }
        }
        prev = Some(k);
        if let Some(last) = reference.len().checked_sub(1) {
            deviation += (k as f64 - reference[t.min(last)] as f64).abs();
        }
    }
    AlignmentDiagnostics {
        mean_entropy: entropy / steps as f64,
        violations,
        mean_deviation: deviation / steps as f64,
    }
}

/// Metrics of one converted utterance.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct UtteranceMetrics {
    pub id: String,
    pub mcd: Option<f64>,
    pub f0_rmse: Option<f64>,
    pub voiced_frames: usize,
    pub aligned_frames: usize,
    pub converted_secs: f64,
    pub target_secs: f64,
    /// Why a metric is missing.
    pub error: Option<String>,
}

/// Per-utterance metrics plus aggregates over the successful items.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct MetricReport {
    pub label: String,
    pub utterances: Vec<UtteranceMetrics>,
}

impl MetricReport {
    fn mean_of(&self, f: impl Fn(&UtteranceMetrics) -> Option<f64>) -> Option<f64> {
        let v: Vec<f64> = self.utterances.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mcd(&self) -> Option<f64> {
        self.mean_of(|u| u.mcd)
    }

    /// Pooled over all mutually voiced frames.
    pub fn f0_rmse(&self) -> Option<f64> {
        let n: usize = self.utterances.iter().filter(|u| u.f0_rmse.is_some()).map(|u| u.voiced_frames).sum();
        let sq: f64 = self
            .utterances
            .iter()
            .filter_map(|u| u.f0_rmse.map(|r| r * r * u.voiced_frames as f64))
            .sum();
        (n > 0).then(|| (sq / n as f64).sqrt())
    }

    pub fn ddur(&self) -> Option<f64> {
        let (c, t): (Vec<f64>, Vec<f64>) = self
            .utterances
            .iter()
            .filter(|u| u.error.is_none() || u.mcd.is_some())
            .map(|u| (u.converted_secs, u.target_secs))
            .unzip();
        ddur(&c, &t).ok()
    }

    pub fn voiced_frames(&self) -> usize {
        self.utterances.iter().map(|u| u.voiced_frames).sum()
    }

    pub fn failures(&self) -> usize {
        self.utterances.iter().filter(|u| u.error.is_some()).count()
    }

    /// `key = value` lines: one block per utterance, then the aggregate.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"));
        let mut s = String::new();
        for u in &self.utterances {
            writeln!(s, "[utterance {}]", u.id).unwrap();
            writeln!(s, "mcd_db = {}", opt(u.mcd)).unwrap();
            writeln!(s, "f0_rmse_hz = {}", opt(u.f0_rmse)).unwrap();
            writeln!(s, "voiced_frames = {}", u.voiced_frames).unwrap();
            writeln!(s, "aligned_frames = {}", u.aligned_frames).unwrap();
            writeln!(s, "converted_secs = {:.6}", u.converted_secs).unwrap();
            writeln!(s, "target_secs = {:.6}", u.target_secs).unwrap();
            if let Some(e) = &u.error {
                writeln!(s, "error = {e}").unwrap();
            }
            s.push('\n');
        }
        writeln!(s, "[aggregate {}]", self.label).unwrap();
        writeln!(s, "utterances = {}", self.utterances.len()).unwrap();
        writeln!(s, "failures = {}", self.failures()).unwrap();
        writeln!(s, "mcd_db = {}", opt(self.mcd())).unwrap();
        writeln!(s, "f0_rmse_hz = {}", opt(self.f0_rmse())).unwrap();
        writeln!(s, "ddur_secs = {}", opt(self.ddur())).unwrap();
        writeln!(s, "voiced_frames = {}", self.voiced_frames()).unwrap();
        s
    }
}

/// Binary greyscale image, one row per decoder step and one column per
/// encoder state. Each row is scaled so its peak is white.
pub fn alignment_pgm(a: &AlignmentMatrix) -> Vec<u8> {
    let (h, w) = (a.steps(), a.states());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for t in 0..h {
        let row = a.row(t);
        let peak = row.iter().copied().fold(0.0, f64::max);
        out.extend(row.iter().map(|p| if peak > 0.0 { (255.0 * p / peak).round() as u8 } else { 0 }));
    }
    out
}

/// Tab-separated matrix, one decoder step per line.
pub fn alignment_tsv(a: &AlignmentMatrix) -> String {
    let mut s = String::new();
    for t in 0..a.steps() {
        let row: Vec<String> = a.row(t).iter().map(|p| format!("{p:.6}")).collect();
        writeln!(s, "{}", row.join("\t")).unwrap();
    }
    s
}

/// `step\tstate` overlay with one reference point per decoder step.
pub fn overlay_tsv(track: &[usize]) -> String {
    let mut s = String::from("step\tstate\n");
    for (t, k) in track.iter().enumerate() {
        writeln!(s, "{t}\t{k}").unwrap();
    }
    s
}
