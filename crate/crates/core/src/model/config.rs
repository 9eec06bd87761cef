use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Decoder loss and output parameterisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum OutputMode {
    Mse,
    Gmm { mixtures: usize },
}

impl OutputMode {
    pub fn is_gmm(self) -> bool {
        matches!(self, Self::Gmm { .. })
    }
}

impl fmt::Display for OutputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Mse => f.write_str("mse"),
            Self::Gmm { mixtures } => write!(f, "gmm:{mixtures}"),
        }
    }
}

impl FromStr for OutputMode {
    type Err = String;

    /// `mse`, or `gmm:<m>` for an `m`-component mixture.
    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            None if s == "mse" => Ok(Self::Mse),
            Some(("gmm", m)) => match m.parse::<usize>() {
                Ok(mixtures) if mixtures >= 1 => Ok(Self::Gmm { mixtures }),
                _ => Err(format!("invalid mixture count in `{s}`")),
            },
            _ => Err(format!("unknown output mode `{s}` (expected mse or gmm:<m>)")),
        }
    }
}

impl TryFrom<String> for OutputMode {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<OutputMode> for String {
    fn from(m: OutputMode) -> String {
        m.to_string()
    }
}

/// Which columns of a `[mel | aux]` source sequence feed the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputChannels {
    Both,
    MelOnly,
    AuxOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_mel: usize,
    pub d_aux: usize,
    pub inputs: InputChannels,
    pub encoder_layers: usize,
    pub encoder_units: usize,
    pub per_layer_factor: usize,
    pub prenet_units: usize,
    pub attn_units: usize,
    pub attn_filters: usize,
    pub attn_kernel: usize,
    pub attn_v_dim: usize,
    pub decoder_layers: usize,
    pub decoder_units: usize,
    /// Frames emitted per decoder step.
    pub r: usize,
    pub output: OutputMode,
    pub zoneout: f64,
    pub prenet_dropout: f64,
    pub prenet_dropout_at_inference: bool,
    /// Conv bank holds kernels of width `1..=postnet_kernels`.
    pub postnet_kernels: usize,
    pub postnet_channels: usize,
    /// Sinusoidal location codes on encoder outputs and decoder inputs.
    pub location_code: bool,
    /// When false, step `t` reads encoder state `⌊t·r/M⌋` instead of
    /// attending.
    pub attention: bool,
    pub stop_threshold: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_mel: 16,
            d_aux: 16,
            inputs: InputChannels::Both,
            encoder_layers: 2,
            encoder_units: 32,
            per_layer_factor: 2,
            prenet_units: 32,
            attn_units: 32,
            attn_filters: 10,
            attn_kernel: 32,
            attn_v_dim: 32,
            decoder_layers: 2,
            decoder_units: 32,
            r: 2,
            output: OutputMode::Mse,
            zoneout: 0.2,
            prenet_dropout: 0.5,
            prenet_dropout_at_inference: false,
            postnet_kernels: 8,
            postnet_channels: 32,
            location_code: true,
            attention: true,
            stop_threshold: 0.5,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Full-size network for 80-band mel with 512-dim bottleneck inputs.
    pub fn full_scale() -> Self {
        Self {
            d_mel: 80,
            d_aux: 512,
            encoder_units: 256,
            prenet_units: 256,
            attn_units: 256,
            attn_v_dim: 256,
            decoder_units: 256,
            postnet_channels: 256,
            ..Self::default()
        }
    }

    /// Overall encoder downsampling ratio `M`.
    pub fn downsample(&self) -> usize {
        self.per_layer_factor.pow(self.encoder_layers as u32)
    }

    pub fn input_dims(&self) -> usize {
        match self.inputs {
            InputChannels::Both => self.d_mel + self.d_aux,
            InputChannels::MelOnly => self.d_mel,
            InputChannels::AuxOnly => self.d_aux,
        }
    }

    /// Width of one encoder state.
    pub fn encoder_dims(&self) -> usize {
        2 * self.encoder_units
    }

    /// Values predicted per step: `r · d_mel`.
    pub fn block_dims(&self) -> usize {
        self.r * self.d_mel
    }

    pub fn mixtures(&self) -> usize {
        match self.output {
            OutputMode::Mse => 1,
            OutputMode::Gmm { mixtures } => mixtures,
        }
    }

    /// Length of the output projection.
    pub fn output_dims(&self) -> usize {
        match self.output {
            OutputMode::Mse => self.block_dims(),
            OutputMode::Gmm { mixtures } => (2 * self.block_dims() + 1) * mixtures,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        let positive = [
            self.d_mel,
            self.encoder_layers,
            self.encoder_units,
            self.per_layer_factor,
            self.prenet_units,
            self.attn_units,
            self.attn_filters,
            self.attn_kernel,
            self.attn_v_dim,
            self.decoder_layers,
            self.decoder_units,
            self.r,
            self.postnet_kernels,
            self.postnet_channels,
        ];
        if positive.contains(&0) {
            return bad("all sizes must be positive");
        }
        if self.input_dims() == 0 {
            return bad("selected input channels are empty");
        }
        if self.mixtures() == 0 {
            return bad("mixture count must be at least 1");
        }
        if self.location_code && self.d_mel % 2 != 0 {
            return bad("location codes need an even d_mel");
        }
        if !(0.0..1.0).contains(&self.zoneout) || !(0.0..1.0).contains(&self.prenet_dropout) {
            return bad("zoneout and dropout probabilities must lie in [0, 1)");
        }
        if !(self.stop_threshold > 0.0 && self.stop_threshold < 1.0) {
            return bad("stop_threshold must lie in (0, 1)");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_mode_text_round_trip() {
        for m in [OutputMode::Mse, OutputMode::Gmm { mixtures: 4 }] {
            assert_eq!(m.to_string().parse::<OutputMode>().unwrap(), m);
        }
        assert!("gmm:0".parse::<OutputMode>().is_err());
        assert!("mdn".parse::<OutputMode>().is_err());
    }

    #[test]
    fn derived_sizes() {
        let mut c = ModelConfig::default();
        assert_eq!(c.downsample(), 4);
        assert_eq!(c.output_dims(), 32);
        c.output = OutputMode::Gmm { mixtures: 2 };
        assert_eq!(c.output_dims(), (2 * 32 + 1) * 2);
        c.inputs = InputChannels::AuxOnly;
        assert_eq!(c.input_dims(), 16);
        assert!(c.validate().is_ok());
        c.d_mel = 15;
        assert!(c.validate().is_err());
    }
}
