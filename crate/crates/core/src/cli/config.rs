use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::model::{InputChannels, ModelConfig, OutputMode};
use crate::synth::CorpusSpec;
use crate::train::TrainConfig;

/// Which parts of the network are switched off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Frame-by-frame decoding on DTW-aligned pairs.
    pub no_att: bool,
    pub no_locc: bool,
    pub no_aux: bool,
    pub no_mel: bool,
}

impl Ablation {
    pub fn set(&mut self, flag: AblationFlag) {
        match flag {
            AblationFlag::NoAtt => self.no_att = true,
            AblationFlag::NoLocc => self.no_locc = true,
            AblationFlag::NoAux => self.no_aux = true,
            AblationFlag::NoMel => self.no_mel = true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum AblationFlag {
    NoAtt,
    NoLocc,
    NoAux,
    NoMel,
}

/// Source-duration interpolation applied before conversion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Interp {
    Ratio(f64),
    /// Mean target/source duration ratio over the training split.
    Auto,
}

impl std::str::FromStr for Interp {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(Self::Auto);
        }
        match s.parse::<f64>() {
            Ok(r) if r.is_finite() && r > 0.0 => Ok(Self::Ratio(r)),
            _ => Err(format!("interpolation ratio must be `auto` or a positive number, got `{s}`")),
        }
    }
}

impl TryFrom<String> for Interp {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Interp> for String {
    fn from(i: Interp) -> String {
        match i {
            Interp::Ratio(r) => r.to_string(),
            Interp::Auto => "auto".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub run: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "corpus".into(),
            run: "run".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvertOptions {
    pub interp: Option<Interp>,
    /// Griffin-Lim iterations; 0 skips audio reconstruction.
    pub griffin_lim: usize,
    pub max_steps: Option<usize>,
}

/// Everything a command needs, resolved from defaults, an optional TOML
/// file and command-line flags, in increasing priority.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: Ablation,
    pub convert: ConvertOptions,
}

/// Values given on the command line. `None` and empty lists leave the
/// lower layers untouched.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub corpus_dir: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    pub corpus_seed: Option<u64>,
    pub train_seed: Option<u64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub mode: Option<OutputMode>,
    pub ablate: Vec<AblationFlag>,
    pub interp: Option<Interp>,
    pub griffin_lim: Option<usize>,
    pub max_steps: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serialises")
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn resolve(file: Option<&Path>, o: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(o);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.corpus_dir {
            self.paths.corpus = v.clone();
        }
        if let Some(v) = &o.run_dir {
            self.paths.run = v.clone();
        }
        if let Some(v) = o.corpus_seed {
            self.corpus.seed = v;
        }
        if let Some(v) = o.train_seed {
            self.train.seed = v;
        }
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = o.lr {
            self.train.lr = v;
        }
        if let Some(v) = o.batch {
            self.train.batch = v;
        }
        if let Some(v) = o.mode {
            self.model.output = v;
        }
        for f in &o.ablate {
            self.ablation.set(*f);
        }
        if let Some(v) = o.interp {
            self.convert.interp = Some(v);
        }
        if let Some(v) = o.griffin_lim {
            self.convert.griffin_lim = v;
        }
        if let Some(v) = o.max_steps {
            self.convert.max_steps = Some(v);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.ablation.no_aux && self.ablation.no_mel {
            return Err(CliError::Config("no-aux and no-mel together leave no encoder input".into()));
        }
        if self.model.d_mel != self.corpus.mel.n_mels {
            return Err(CliError::Config(format!(
                "model.d_mel = {} but the corpus has {} mel bands",
                self.model.d_mel, self.corpus.mel.n_mels
            )));
        }
        self.effective_model().validate()?;
        self.train.validate()?;
        self.corpus.mel.validate()?;
        Ok(())
    }

    /// The model configuration with ablations folded in.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        let a = self.ablation;
        if a.no_att {
            m.attention = false;
        }
        if a.no_locc {
            m.location_code = false;
        }
        if a.no_aux {
            m.inputs = InputChannels::MelOnly;
        }
        if a.no_mel {
            m.inputs = InputChannels::AuxOnly;
        }
        m
    }
}
