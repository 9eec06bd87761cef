//! On-disk formats: feature files, waveforms and model checkpoints.
//!
//! A feature file is the 8-byte magic `SCENTFEA`, a little-endian `u32`
//! format version, `u32` row and column counts, then `rows · cols`
//! little-endian `f32` values in row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::Waveform;
use crate::features::FeatureSequence;
use crate::model::ModelConfig;
use crate::numerics::{ParamStore, Tensor};
use crate::train::{FeatureStats, TrainConfig};

pub const FEATURE_MAGIC: &[u8; 8] = b"SCENTFEA";
pub const FEATURE_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SCENTCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file is truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed content: {0}")]
    Malformed(String),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.display().to_string(),
        source,
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.buf.len() < n {
            return Err(FormatError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let raw = self.take(n.checked_mul(4).ok_or(FormatError::Truncated)?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    fn magic(&mut self, magic: &'static [u8; 8]) -> Result<(), FormatError> {
        if self.take(8)? != magic {
            return Err(FormatError::BadMagic {
                expected: std::str::from_utf8(magic).expect("ascii magic"),
            });
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

pub fn encode_features(features: &FeatureSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * features.data().len());
    out.extend_from_slice(FEATURE_MAGIC);
    put_u32(&mut out, FEATURE_VERSION);
    put_u32(&mut out, features.frames() as u32);
    put_u32(&mut out, features.dims() as u32);
    put_f32s(&mut out, features.data());
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSequence, FormatError> {
    let mut r = Reader { buf: bytes };
    r.magic(FEATURE_MAGIC)?;
    let version = r.u32()?;
    if version != FEATURE_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
    let data = r.f32s(rows * cols)?;
    if !r.buf.is_empty() {
        return Err(FormatError::Malformed(format!("{} trailing bytes", r.buf.len())));
    }
    FeatureSequence::new(rows, cols, data).map_err(|e| FormatError::Malformed(e.to_string()))
}

pub fn write_features(path: &Path, features: &FeatureSequence) -> Result<(), FormatError> {
    fs::write(path, encode_features(features)).map_err(io_err(path))
}

pub fn read_features(path: &Path) -> Result<FeatureSequence, FormatError> {
    decode_features(&fs::read(path).map_err(io_err(path))?)
}

/// Mono 32-bit float WAV.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<(), FormatError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut out = hound::WavWriter::create(path, spec)?;
    for s in w.samples() {
        out.write_sample(*s as f32)?;
    }
    out.finalize()?;
    Ok(())
}

/// Reads the first channel of a float or integer PCM WAV, scaled to [-1, 1].
pub fn read_wav(path: &Path) -> Result<Waveform, FormatError> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let ch = spec.channels.max(1) as usize;
    let samples: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .step_by(ch)
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .step_by(ch)
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()?
        }
    };
    Waveform::new(samples, spec.sample_rate).map_err(|e| FormatError::Malformed(e.to_string()))
}

/// Everything needed to resume training or run conversion.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer updates applied so far.
    pub step: u64,
    pub stats: Option<FeatureStats>,
    pub params: ParamStore,
    /// Adam first and second moments, keyed like `params`.
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    step: u64,
    stats: Option<FeatureStats>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rows() as u32);
    put_u32(out, t.cols() as u32);
    put_f32s(out, t.data());
}

fn take_tensor(r: &mut Reader<'_>) -> Result<(String, Tensor), FormatError> {
    let len = r.u32()? as usize;
    let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| FormatError::Malformed(e.to_string()))?;
    let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
    let data = r.f32s(rows * cols)?;
    let t = Tensor::from_vec(rows, cols, data).map_err(|e| FormatError::Malformed(e.to_string()))?;
    Ok((name, t))
}

impl Checkpoint {
    /// Layout: magic, version, TOML header length and text, parameter
    /// count, parameters in name order, a moment flag byte and the moment
    /// pairs, then a CRC-32 of everything before it.
    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let header = toml::to_string(&Header {
            model: self.model.clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            step: self.step,
            stats: self.stats.clone(),
        })
        .map_err(|e| FormatError::Malformed(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(header.as_bytes());
        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in self.params.iter() {
            put_tensor(&mut out, name, t);
        }
        put_u32(&mut out, self.moments.len() as u32);
        for (name, (m, v)) in &self.moments {
            put_tensor(&mut out, name, m);
            put_tensor(&mut out, name, v);
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < 4 {
            return Err(FormatError::Truncated);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(FormatError::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body };
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| FormatError::Malformed(e.to_string()))?;
        let header: Header = toml::from_str(text).map_err(|e| FormatError::Malformed(e.to_string()))?;
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let (name, t) = take_tensor(&mut r)?;
            params
                .insert(name, t)
                .map_err(|e| FormatError::Malformed(e.to_string()))?;
        }
        let mut moments = BTreeMap::new();
        for _ in 0..r.u32()? {
            let (name, m) = take_tensor(&mut r)?;
            let (_, v) = take_tensor(&mut r)?;
            moments.insert(name, (m, v));
        }
        if !r.buf.is_empty() {
            return Err(FormatError::Malformed("trailing bytes".into()));
        }
        Ok(Self {
            model: header.model,
            train: header.train,
            epoch: header.epoch,
            step: header.step,
            stats: header.stats,
            params,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn features_round_trip_through_f32(rows in 1usize..20, cols in 1usize..9, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-50.0f32..50.0) as f64).collect();
            let f = FeatureSequence::new(rows, cols, data).unwrap();
            let bytes = encode_features(&f);
            prop_assert_eq!(bytes.len(), 20 + 4 * rows * cols);
            prop_assert_eq!(decode_features(&bytes).unwrap(), f);
        }
    }

    #[test]
    fn feature_header_layout() {
        let f = FeatureSequence::new(2, 1, vec![1.0, -2.0]).unwrap();
        let b = encode_features(&f);
        assert_eq!(&b[..8], b"SCENTFEA");
        assert_eq!(&b[8..20], &[1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
    }

    #[test]
    fn corrupt_feature_files_are_rejected() {
        let f = FeatureSequence::new(2, 2, vec![0.0; 4]).unwrap();
        let mut b = encode_features(&f);
        assert!(matches!(decode_features(&b[..b.len() - 1]), Err(FormatError::Truncated)));
        b[8] = 9;
        assert!(matches!(decode_features(&b), Err(FormatError::UnsupportedVersion(9))));
        b[0] = b'X';
        assert!(matches!(decode_features(&b), Err(FormatError::BadMagic { .. })));
    }

    fn sample_checkpoint() -> Checkpoint {
        let cfg = ModelConfig {
            d_mel: 4,
            d_aux: 2,
            encoder_units: 4,
            prenet_units: 4,
            attn_units: 4,
            attn_v_dim: 4,
            decoder_units: 4,
            postnet_kernels: 2,
            postnet_channels: 4,
            ..ModelConfig::default()
        };
        let mut params = crate::model::init_params(&cfg, 3).unwrap();
        for (_, t) in params.grads_mut() {
            t.data_mut().fill(0.0);
        }
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for n in &names {
            let t = params.get_mut(n).unwrap();
            let rounded = t.map(|v| v as f32 as f64);
            *t = rounded;
        }
        let moments = names
            .iter()
            .map(|n| {
                let t = params.get(n).unwrap();
                (n.clone(), (t.map(|v| v * 0.5), t.map(|v| v * v)))
            })
            .map(|(n, (m, v))| (n, (m.map(|x| x as f32 as f64), v.map(|x| x as f32 as f64))))
            .collect();
        Checkpoint {
            model: cfg,
            train: TrainConfig::default(),
            epoch: 7,
            step: 91,
            stats: None,
            params,
            moments,
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let ck = sample_checkpoint();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn checkpoint_checksum_detects_corruption() {
        let mut bytes = sample_checkpoint().to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(FormatError::Checksum { .. })));
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.0, 0.5, -0.25, 1.0], 16_000).unwrap();
        write_wav(&path, &w).unwrap();
        assert_eq!(read_wav(&path).unwrap(), w);
    }
}
