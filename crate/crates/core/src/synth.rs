//! Synthetic paired-speaker corpus with known ground truth.
//!
//! Content is a string of symbols from a 16-symbol alphabet. Each symbol
//! owns a spectral envelope (three resonances for voiced symbols, a noise
//! band for the four unvoiced ones) and a small pitch offset. A
//! [`VoiceSpec`] renders that content with its own pitch, resonance scale,
//! spectral tilt and noise floor; a source voice may also neutralise some
//! symbol contrasts, rendering symbol `2k + 1` exactly like `2k`. The
//! auxiliary channel carries the symbol identity frame by frame, so it
//! stays informative where the source audio is not.
//!
//! Target timing is a piecewise-linear warp of source timing with one knot
//! per symbol boundary, which makes the frame alignment of every pair known
//! exactly.
//!
//! ```
//! use scent::synth::{generate_pair, ContentSpec, VoiceSpec, WarpSpec};
//! use scent::dsp::MelConfig;
//!
//! let content = ContentSpec::new(vec![0, 5, 12], vec![6, 8, 5]).unwrap();
//! let mel = MelConfig { n_mels: 16, ..MelConfig::default() };
//! let pair = generate_pair(
//!     7,
//!     &content,
//!     &VoiceSpec::source_default(),
//!     &VoiceSpec::target_default(),
//!     &WarpSpec::identity(),
//!     &mel,
//! )
//! .unwrap();
//! assert_eq!(pair.source.mel.frames(), 19);
//! assert_eq!(pair.target.mel.frames(), 19);
//! ```

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{AlignError, DtwPath};
use crate::dsp::{mel_spectrogram, DspError, MelConfig, Waveform};
use crate::features::FeatureSequence;
use crate::io::{self, FormatError};

pub const ALPHABET: usize = 16;
/// Symbols `12..16` are rendered without a harmonic source.
pub const FIRST_UNVOICED: u8 = 12;
/// Rendered as the noise floor alone; random content opens and closes
/// with it.
pub const SILENCE: u8 = 15;
/// Source length of the closing silence of random content.
pub const TRAILING_SILENCE: usize = 6;
pub const MANIFEST_HEADER: &str = "#scent-manifest v1";

const MAX_HARMONIC_HZ: f64 = 7800.0;
const NOISE_SPACING_HZ: f64 = 50.0;
const GAIN: f64 = 0.05;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid content: {0}")]
    Content(String),
    #[error("degenerate warp: {0}")]
    DegenerateWarp(String),
    #[error("output already exists: {0} (pass force to overwrite)")]
    Exists(PathBuf),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// How a speaker renders symbols.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoiceSpec {
    pub f0_hz: f64,
    /// Resonance frequencies are multiplied by this.
    pub formant_scale: f64,
    pub tilt_db_per_octave: f64,
    /// Relative speaking rate; a faster voice spends fewer frames per symbol.
    pub rate: f64,
    /// Standard deviation of additive white noise.
    pub noise_level: f64,
    /// Odd symbols rendered exactly like their even partner.
    pub neutralized: Vec<u8>,
}

impl VoiceSpec {
    pub fn source_default() -> Self {
        Self {
            f0_hz: 110.0,
            formant_scale: 1.0,
            tilt_db_per_octave: -6.0,
            rate: 1.0,
            noise_level: 2e-3,
            neutralized: vec![1, 3, 5, 7],
        }
    }

    pub fn target_default() -> Self {
        Self {
            f0_hz: 210.0,
            formant_scale: 1.15,
            tilt_db_per_octave: -3.0,
            rate: 1.25,
            noise_level: 2e-3,
            neutralized: Vec::new(),
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let ok = self.f0_hz > 40.0
            && self.f0_hz < 500.0
            && self.formant_scale > 0.5
            && self.formant_scale < 1.6
            && self.rate > 0.0
            && self.noise_level >= 0.0
            && self.tilt_db_per_octave.is_finite()
            && self.neutralized.iter().all(|s| *s % 2 == 1 && (*s as usize) < ALPHABET);
        if ok {
            Ok(())
        } else {
            Err(SynthError::Content(format!("voice spec out of range: {self:?}")))
        }
    }

    fn rendered_symbol(&self, s: u8) -> u8 {
        if self.neutralized.contains(&s) {
            s ^ 1
        } else {
            s
        }
    }
}

/// Symbol string with per-symbol source durations in frames.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentSpec {
    symbols: Vec<u8>,
    durations: Vec<usize>,
}

impl ContentSpec {
    pub fn new(symbols: Vec<u8>, durations: Vec<usize>) -> Result<Self, SynthError> {
        if symbols.is_empty() || symbols.len() != durations.len() {
            return Err(SynthError::Content("need one duration per symbol".into()));
        }
        if symbols.iter().any(|s| *s as usize >= ALPHABET) {
            return Err(SynthError::Content("symbol outside the alphabet".into()));
        }
        if durations.contains(&0) {
            return Err(SynthError::Content("zero-length symbol".into()));
        }
        Ok(Self { symbols, durations })
    }

    /// 5 to 20 symbols of 4 to 20 frames each, redrawn until the total
    /// length falls in `frames`. The first and last symbols are
    /// [`SILENCE`], the last one lasting [`TRAILING_SILENCE`] frames; the
    /// ones between are never silent.
    pub fn random(rng: &mut impl Rng, frames: std::ops::RangeInclusive<usize>) -> Self {
        loop {
            let n = rng.random_range(5..=20);
            let symbols: Vec<u8> = (0..n)
                .map(|i| if i == 0 || i == n - 1 { SILENCE } else { rng.random_range(0..SILENCE) })
                .collect();
            let durations: Vec<usize> = (0..n)
                .map(|i| if i == n - 1 { TRAILING_SILENCE } else { rng.random_range(4..=20) })
                .collect();
            if frames.contains(&durations.iter().sum()) {
                return Self { symbols, durations };
            }
        }
    }

    pub fn symbols(&self) -> &[u8] {
        &self.symbols
    }

    pub fn durations(&self) -> &[usize] {
        &self.durations
    }

    pub fn frames(&self) -> usize {
        self.durations.iter().sum()
    }
}

/// Source-to-target timing: every symbol's duration is scaled by
/// `ratio · symbol_stretch[symbol]`, then shifted by up to `jitter_frames`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpSpec {
    pub ratio: f64,
    pub symbol_stretch: Vec<f64>,
    pub jitter_frames: usize,
    pub seed: u64,
}

impl WarpSpec {
    pub fn identity() -> Self {
        Self {
            ratio: 1.0,
            symbol_stretch: vec![1.0; ALPHABET],
            jitter_frames: 0,
            seed: 0,
        }
    }

    pub fn uniform(ratio: f64, jitter_frames: usize, seed: u64) -> Self {
        Self {
            ratio,
            jitter_frames,
            seed,
            ..Self::identity()
        }
    }

    /// Per-symbol stretch factors with mean one: half the alphabet is
    /// spoken 30% slower, the other half 30% faster.
    pub fn default_stretch() -> Vec<f64> {
        (0..ALPHABET)
            .map(|s| if (5 * s) % ALPHABET < ALPHABET / 2 { 1.3 } else { 0.7 })
            .collect()
    }

    fn validate(&self) -> Result<(), SynthError> {
        if !(0.5..=2.0).contains(&self.ratio) {
            return Err(SynthError::DegenerateWarp(format!("ratio {} outside [0.5, 2]", self.ratio)));
        }
        if self.symbol_stretch.len() != ALPHABET || self.symbol_stretch.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(SynthError::DegenerateWarp("stretch needs one positive factor per symbol".into()));
        }
        Ok(())
    }

    /// Target durations for `content`.
    pub fn target_durations(&self, content: &ContentSpec) -> Result<Vec<usize>, SynthError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let j = self.jitter_frames as i64;
        let out: Vec<usize> = content
            .symbols
            .iter()
            .zip(&content.durations)
            .map(|(s, d)| {
                let base = (self.ratio * self.symbol_stretch[*s as usize] * *d as f64).round() as i64;
                let shift = if j > 0 { rng.random_range(-j..=j) } else { 0 };
                (base + shift).max(1) as usize
            })
            .collect();
        let total: usize = out.iter().sum();
        let r = total as f64 / content.frames() as f64;
        if !(0.5..=2.0).contains(&r) {
            return Err(SynthError::DegenerateWarp(format!("length ratio {r:.3} outside [0.5, 2]")));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticUtterance {
    pub waveform: Waveform,
    pub mel: FeatureSequence,
    /// `T × ALPHABET` smoothed symbol identity; rows sum to one.
    pub aux: FeatureSequence,
    /// Ground-truth F0 per frame, 0 where unvoiced.
    pub f0: Vec<f64>,
    pub symbols: Vec<u8>,
    /// First frame of every symbol followed by the total frame count.
    pub boundaries: Vec<usize>,
}

impl SyntheticUtterance {
    pub fn frames(&self) -> usize {
        self.mel.frames()
    }

    /// Symbol under every frame.
    pub fn frame_symbols(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.frames());
        for (k, w) in self.boundaries.windows(2).enumerate() {
            out.extend(std::iter::repeat_n(self.symbols[k], w[1] - w[0]));
        }
        out
    }

    /// `[mel | aux]` model input.
    pub fn input_features(&self) -> FeatureSequence {
        self.mel.concat_dims(&self.aux).expect("mel and aux share the frame count")
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub source: SyntheticUtterance,
    pub target: SyntheticUtterance,
    /// Ground-truth frame alignment; pairs never cross a symbol boundary.
    pub path: DtwPath,
}

fn resonances(s: u8) -> [f64; 3] {
    let s = s as usize;
    [
        280.0 + 45.0 * ((7 * s) % 12) as f64,
        900.0 + 130.0 * ((5 * s) % 12) as f64,
        2400.0 + 90.0 * ((3 * s) % 8) as f64,
    ]
}

fn pitch_offset(s: u8) -> f64 {
    0.03 * (((3 * s as usize) % 5) as f64 - 2.0)
}

/// Linear-amplitude envelope of symbol `s` at `hz`.
fn envelope(voice: &VoiceSpec, s: u8, hz: f64) -> f64 {
    let tilt = 10f64.powf(voice.tilt_db_per_octave * (hz.max(50.0) / 100.0).log2() / 20.0);
    let shape = if s == SILENCE {
        0.0
    } else if s >= FIRST_UNVOICED {
        let centre = (3000.0 + 700.0 * (s - FIRST_UNVOICED) as f64) * voice.formant_scale;
        (-0.5 * ((hz - centre) / 600.0).powi(2)).exp() + 0.02
    } else {
        let amps = [1.0, 0.6, 0.35];
        let widths = [90.0, 130.0, 170.0];
        resonances(s)
            .iter()
            .zip(amps)
            .zip(widths)
            .map(|((f, a), b)| a * (-0.5 * ((hz - f * voice.formant_scale) / b).powi(2)).exp())
            .sum::<f64>()
            + 0.02
    };
    shape * tilt
}

fn smoothed_one_hot(frame_symbols: &[u8]) -> FeatureSequence {
    let t = frame_symbols.len();
    let mut aux = FeatureSequence::zeros(t, ALPHABET);
    for i in 0..t {
        let taps = [(i.saturating_sub(1), 0.25), (i, 0.5), ((i + 1).min(t - 1), 0.25)];
        for (j, w) in taps {
            aux.frame_mut(i)[frame_symbols[j] as usize] += w;
        }
    }
    aux
}

/// Linear interpolation of per-frame values onto sample `n`, frames being
/// centred on multiples of `hop`.
fn at_sample(frames: &[f64], n: usize, hop: usize) -> (usize, usize, f64) {
    let pos = n as f64 / hop as f64;
    let lo = (pos.floor() as usize).min(frames.len() - 1);
    let hi = (lo + 1).min(frames.len() - 1);
    (lo, hi, pos - lo as f64)
}

fn render(
    symbols: &[u8],
    durations: &[usize],
    voice: &VoiceSpec,
    mel_cfg: &MelConfig,
    noise_seed: u64,
) -> Result<SyntheticUtterance, SynthError> {
    voice.validate()?;
    let hop = mel_cfg.hop_length();
    let sr = mel_cfg.sample_rate as f64;
    let mut boundaries = vec![0];
    for d in durations {
        boundaries.push(boundaries.last().unwrap() + d);
    }
    let t = *boundaries.last().unwrap();
    let mut frame_symbols = Vec::with_capacity(t);
    for (s, d) in symbols.iter().zip(durations) {
        frame_symbols.extend(std::iter::repeat_n(*s, *d));
    }

    let f0: Vec<f64> = frame_symbols
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if *s >= FIRST_UNVOICED {
                0.0
            } else {
                let s = voice.rendered_symbol(*s);
                voice.f0_hz * (1.0 + pitch_offset(s)) * (1.0 - 0.1 * i as f64 / t as f64)
            }
        })
        .collect();
    // Carrier pitch keeps running through unvoiced stretches.
    let mut carrier = f0.clone();
    let first_voiced = f0.iter().copied().find(|v| *v > 0.0).unwrap_or(voice.f0_hz);
    let mut last = first_voiced;
    for c in carrier.iter_mut() {
        if *c > 0.0 {
            last = *c;
        } else {
            *c = last;
        }
    }

    let n_harm = (MAX_HARMONIC_HZ / (voice.f0_hz * 0.8)).floor() as usize;
    let harmonic_amps: Vec<Vec<f64>> = (0..t)
        .map(|i| {
            let s = voice.rendered_symbol(frame_symbols[i]);
            (1..=n_harm)
                .map(|k| {
                    let hz = k as f64 * carrier[i];
                    if f0[i] > 0.0 && hz < MAX_HARMONIC_HZ {
                        envelope(voice, s, hz)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let noise_freqs: Vec<f64> = (2..)
        .map(|m| m as f64 * NOISE_SPACING_HZ)
        .take_while(|f| *f < MAX_HARMONIC_HZ)
        .collect();
    let noise_amps: Vec<Vec<f64>> = (0..t)
        .map(|i| {
            let s = voice.rendered_symbol(frame_symbols[i]);
            noise_freqs
                .iter()
                .map(|hz| if s >= FIRST_UNVOICED { 0.5 * envelope(voice, s, *hz) } else { 0.0 })
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise_phase: Vec<f64> = noise_freqs.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let white = Normal::new(0.0, voice.noise_level.max(f64::MIN_POSITIVE)).expect("valid deviation");

    let n_samples = ((t - 1) * hop).max(1);
    let mut samples = vec![0.0; n_samples];
    let mut phase = 0.0f64;
    let mut sines = vec![0.0; n_harm + 1];
    for (n, out) in samples.iter_mut().enumerate() {
        let (lo, hi, a) = at_sample(&carrier, n, hop);
        let hz = carrier[lo] * (1.0 - a) + carrier[hi] * a;
        phase = (phase + 2.0 * PI * hz / sr) % (2.0 * PI);
        let (s1, c1) = phase.sin_cos();
        sines[0] = 0.0;
        sines[1] = s1;
        for k in 2..=n_harm {
            sines[k] = 2.0 * c1 * sines[k - 1] - sines[k - 2];
        }
        let (al, ah) = (&harmonic_amps[lo], &harmonic_amps[hi]);
        let mut acc = 0.0;
        for k in 0..n_harm {
            acc += (al[k] * (1.0 - a) + ah[k] * a) * sines[k + 1];
        }
        let (nl, nh) = (&noise_amps[lo], &noise_amps[hi]);
        if nl.iter().chain(nh).any(|v| *v > 0.0) {
            let time = n as f64 / sr;
            for (m, f) in noise_freqs.iter().enumerate() {
                let amp = nl[m] * (1.0 - a) + nh[m] * a;
                if amp > 0.0 {
                    acc += amp * (2.0 * PI * f * time + noise_phase[m]).sin();
                }
            }
        }
        *out = GAIN * acc + white.sample(&mut rng);
    }

    let waveform = Waveform::new(samples, mel_cfg.sample_rate)?;
    let mel = mel_spectrogram(&waveform, mel_cfg)?;
    debug_assert_eq!(mel.frames(), t);
    Ok(SyntheticUtterance {
        waveform,
        mel,
        aux: smoothed_one_hot(&frame_symbols),
        f0,
        symbols: symbols.to_vec(),
        boundaries,
    })
}

/// Staircase from `(0, 0)` to `(a − 1, b − 1)` hugging the straight line,
/// preferring the diagonal on ties.
fn segment_path(a: usize, b: usize) -> Vec<(usize, usize)> {
    let (mut i, mut j) = (0, 0);
    let mut out = vec![(0, 0)];
    let err = |i: usize, j: usize| ((i * (b - 1)) as i64 - (j * (a - 1)) as i64).abs();
    while (i, j) != (a - 1, b - 1) {
        let moves = [(i + 1, j + 1), (i, j + 1), (i + 1, j)];
        let next = moves
            .into_iter()
            .filter(|(x, y)| *x < a && *y < b)
            .min_by_key(|(x, y)| err(*x, *y))
            .expect("an in-bounds move always exists");
        (i, j) = next;
        out.push(next);
    }
    out
}

fn ground_truth_path(src: &[usize], tgt: &[usize]) -> Result<DtwPath, SynthError> {
    let mut pairs = Vec::new();
    let (mut s0, mut t0) = (0, 0);
    for (a, b) in src.iter().zip(tgt) {
        pairs.extend(segment_path(*a, *b).into_iter().map(|(i, j)| (s0 + i, t0 + j)));
        s0 += a;
        t0 += b;
    }
    Ok(DtwPath::new(pairs, 0.0)?)
}

/// Render `content` with both voices and the target timing given by `warp`.
/// Both renderings share one noise seed.
pub fn generate_pair(
    seed: u64,
    content: &ContentSpec,
    source_voice: &VoiceSpec,
    target_voice: &VoiceSpec,
    warp: &WarpSpec,
    mel: &MelConfig,
) -> Result<SyntheticPair, SynthError> {
    mel.validate()?;
    let target_durations = warp.target_durations(content)?;
    let source = render(&content.symbols, &content.durations, source_voice, mel, seed)?;
    let target = render(&content.symbols, &target_durations, target_voice, mel, seed)?;
    let path = ground_truth_path(&content.durations, &target_durations)?;
    Ok(SyntheticPair { source, target, path })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn code(self) -> u64 {
        self as u64 + 1
    }
}

impl std::str::FromStr for Split {
    type Err = SynthError;
    fn from_str(s: &str) -> Result<Self, SynthError> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| SynthError::Manifest(format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Source => "source",
            Role::Target => "target",
        }
    }
}

/// Corpus generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub jitter_frames: usize,
    pub symbol_stretch: Vec<f64>,
    pub source: VoiceSpec,
    pub target: VoiceSpec,
    pub mel: MelConfig,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            n_train: 200,
            n_val: 20,
            n_test: 20,
            min_frames: 60,
            max_frames: 240,
            jitter_frames: 1,
            symbol_stretch: WarpSpec::default_stretch(),
            source: VoiceSpec::source_default(),
            target: VoiceSpec::target_default(),
            mel: MelConfig {
                n_mels: 16,
                ..MelConfig::default()
            },
        }
    }
}

impl CorpusSpec {
    /// Generator duration ratio, target frames over source frames.
    pub fn ratio(&self) -> f64 {
        self.source.rate / self.target.rate
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    /// Seed of item `index` in `split`; distinct splits never share seeds.
    pub fn item_seed(&self, split: Split, index: usize) -> u64 {
        let mut z = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(split.code() << 40)
            .wrapping_add(index as u64);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn item_id(split: Split, index: usize) -> String {
        format!("{}{index:04}", split.as_str())
    }

    pub fn generate_item(&self, split: Split, index: usize) -> Result<SyntheticPair, SynthError> {
        let seed = self.item_seed(split, index);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let content = ContentSpec::random(&mut rng, self.min_frames..=self.max_frames);
        let warp = WarpSpec {
            ratio: self.ratio(),
            symbol_stretch: self.symbol_stretch.clone(),
            jitter_frames: self.jitter_frames,
            seed: rng.random(),
        };
        generate_pair(seed, &content, &self.source, &self.target, &warp, &self.mel)
    }
}

/// One row of the corpus manifest. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    pub role: Role,
    pub frames: usize,
    pub duration_secs: f64,
    pub mel: String,
    pub aux: String,
    pub f0: String,
    pub wav: String,
    /// `symbol:frames` per segment.
    pub segments: Vec<(u8, usize)>,
    /// Ground-truth alignment file on target rows.
    pub truth: Option<String>,
}

const COLUMNS: [&str; 11] = [
    "id", "split", "role", "frames", "duration_secs", "mel", "aux", "f0", "wav", "segments", "truth",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\n{}\n", COLUMNS.join("\t"));
        for r in &self.records {
            let segments: Vec<String> = r.segments.iter().map(|(s, d)| format!("{s}:{d}")).collect();
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.2}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.id,
                r.split.as_str(),
                r.role.as_str(),
                r.frames,
                r.duration_secs,
                r.mel,
                r.aux,
                r.f0,
                r.wav,
                segments.join(","),
                r.truth.as_deref().unwrap_or("-"),
            )
            .expect("writing to a String");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, SynthError> {
        let bad = |line: usize, m: &str| SynthError::Manifest(format!("line {line}: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(bad(1, "missing version header"));
        }
        if lines.next().map(|l| l.split('\t').collect::<Vec<_>>()) != Some(COLUMNS.to_vec()) {
            return Err(bad(2, "unexpected column header"));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let no = i + 3;
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != COLUMNS.len() {
                return Err(bad(no, "wrong number of fields"));
            }
            let role = match f[2] {
                "source" => Role::Source,
                "target" => Role::Target,
                other => return Err(bad(no, &format!("unknown role `{other}`"))),
            };
            let num = |s: &str| s.parse::<usize>().map_err(|e| bad(no, &e.to_string()));
            let segments = f[9]
                .split(',')
                .map(|seg| {
                    let (s, d) = seg.split_once(':').ok_or_else(|| bad(no, "bad segment"))?;
                    Ok((s.parse::<u8>().map_err(|e| bad(no, &e.to_string()))?, num(d)?))
                })
                .collect::<Result<Vec<_>, SynthError>>()?;
            records.push(ManifestRecord {
                id: f[0].to_string(),
                split: f[1].parse()?,
                role,
                frames: num(f[3])?,
                duration_secs: f[4].parse().map_err(|_| bad(no, "bad duration"))?,
                mel: f[5].to_string(),
                aux: f[6].to_string(),
                f0: f[7].to_string(),
                wav: f[8].to_string(),
                segments,
                truth: (f[10] != "-").then(|| f[10].to_string()),
            });
        }
        Ok(Self { records })
    }

    pub fn read(path: &Path) -> Result<Self, SynthError> {
        let text = fs::read_to_string(path).map_err(|source| SynthError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// `(source, target)` record pairs of one split in manifest order.
    pub fn pairs(&self, split: Split) -> Vec<(&ManifestRecord, &ManifestRecord)> {
        let src = self.records.iter().filter(|r| r.split == split && r.role == Role::Source);
        src.filter_map(|s| {
            self.records
                .iter()
                .find(|t| t.id == s.id && t.role == Role::Target)
                .map(|t| (s, t))
        })
        .collect()
    }

    /// Checks that every referenced feature file exists and has the
    /// recorded frame count.
    pub fn validate(&self, dir: &Path) -> Result<(), SynthError> {
        for r in &self.records {
            for (file, dims) in [(&r.mel, None), (&r.aux, Some(ALPHABET)), (&r.f0, Some(1))] {
                let f = io::read_features(&dir.join(file))?;
                if f.frames() != r.frames || dims.is_some_and(|d| d != f.dims()) {
                    return Err(SynthError::Manifest(format!("{file}: shape {}x{}", f.frames(), f.dims())));
                }
            }
            if r.segments.iter().map(|s| s.1).sum::<usize>() != r.frames {
                return Err(SynthError::Manifest(format!("{}: segments do not cover the frames", r.id)));
            }
        }
        Ok(())
    }
}

/// A loaded training or evaluation pair.
#[derive(Clone, Debug)]
pub struct CorpusPair {
    pub id: String,
    /// `[mel | aux]` source frames.
    pub source: FeatureSequence,
    pub target: FeatureSequence,
    pub target_aux: FeatureSequence,
    pub source_secs: f64,
    pub target_secs: f64,
    /// Ground-truth alignment from source frames to target frames.
    pub truth: DtwPath,
    pub target_wav: PathBuf,
}

pub fn load_split(manifest: &Manifest, dir: &Path, split: Split) -> Result<Vec<CorpusPair>, SynthError> {
    manifest
        .pairs(split)
        .into_iter()
        .map(|(s, t)| {
            let mel = io::read_features(&dir.join(&s.mel))?;
            let aux = io::read_features(&dir.join(&s.aux))?;
            let source = mel.concat_dims(&aux).ok_or_else(|| SynthError::Manifest(format!("{}: aux length", s.id)))?;
            let truth_file = t.truth.as_ref().ok_or_else(|| SynthError::Manifest(format!("{}: no truth", t.id)))?;
            let truth = read_path(&dir.join(truth_file))?;
            Ok(CorpusPair {
                id: s.id.clone(),
                source,
                target: io::read_features(&dir.join(&t.mel))?,
                target_aux: io::read_features(&dir.join(&t.aux))?,
                source_secs: s.duration_secs,
                target_secs: t.duration_secs,
                truth,
                target_wav: dir.join(&t.wav),
            })
        })
        .collect()
}

/// Reads a two-column `source\ttarget` alignment file.
pub fn read_path(path: &Path) -> Result<DtwPath, SynthError> {
    let text = fs::read_to_string(path).map_err(|source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let pairs = text
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (a, b) = l.split_once('\t')?;
            Some((a.parse().ok()?, b.parse().ok()?))
        })
        .collect::<Option<Vec<(usize, usize)>>>()
        .ok_or_else(|| SynthError::Manifest(format!("{}: bad path row", path.display())))?;
    Ok(DtwPath::new(pairs, 0.0)?)
}

fn write_utterance(
    dir: &Path,
    stem: &str,
    u: &SyntheticUtterance,
) -> Result<(String, String, String, String), SynthError> {
    let names = (
        format!("{stem}.mel.fea"),
        format!("{stem}.aux.fea"),
        format!("{stem}.f0.fea"),
        format!("{stem}.wav"),
    );
    io::write_features(&dir.join(&names.0), &u.mel)?;
    io::write_features(&dir.join(&names.1), &u.aux)?;
    let f0 = FeatureSequence::new(u.f0.len(), 1, u.f0.clone()).expect("one value per frame");
    io::write_features(&dir.join(&names.2), &f0)?;
    io::write_wav(&dir.join(&names.3), &u.waveform)?;
    Ok(names)
}

/// Generate every split into `dir` and write `manifest.tsv`. Refuses to
/// touch an existing manifest unless `force` is set.
pub fn build_corpus(spec: &CorpusSpec, dir: &Path, force: bool) -> Result<Manifest, SynthError> {
    let manifest_path = dir.join("manifest.tsv");
    if manifest_path.exists() && !force {
        return Err(SynthError::Exists(manifest_path));
    }
    fs::create_dir_all(dir).map_err(|source| SynthError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let frame_secs = spec.mel.frame_secs();
    let mut records = Vec::new();
    let mut ids = BTreeSet::new();
    for split in Split::ALL {
        for index in 0..spec.count(split) {
            let id = CorpusSpec::item_id(split, index);
            if !ids.insert(id.clone()) {
                return Err(SynthError::Exists(dir.join(id)));
            }
            let pair = spec.generate_item(split, index)?;
            let truth = format!("{id}.truth.tsv");
            fs::write(dir.join(&truth), pair.path.to_tsv()).map_err(|source| SynthError::Io {
                path: dir.join(&truth),
                source,
            })?;
            for (role, u) in [(Role::Source, &pair.source), (Role::Target, &pair.target)] {
                let stem = format!("{id}.{}", if role == Role::Source { "src" } else { "tgt" });
                let (mel, aux, f0, wav) = write_utterance(dir, &stem, u)?;
                records.push(ManifestRecord {
                    id: id.clone(),
                    split,
                    role,
                    frames: u.frames(),
                    duration_secs: u.frames() as f64 * frame_secs,
                    mel,
                    aux,
                    f0,
                    wav,
                    segments: u
                        .symbols
                        .iter()
                        .zip(u.boundaries.windows(2))
                        .map(|(s, w)| (*s, w[1] - w[0]))
                        .collect(),
                    truth: (role == Role::Target).then(|| truth.clone()),
                });
            }
        }
    }
    let manifest = Manifest { records };
    fs::write(&manifest_path, manifest.to_tsv()).map_err(|source| SynthError::Io {
        path: manifest_path,
        source,
    })?;
    Ok(manifest)
}
