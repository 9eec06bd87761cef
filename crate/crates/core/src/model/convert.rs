use super::decoder::{decoder_step, DecoderState};
use super::encoder::pyramid_encode;
use super::layers::Masks;
use super::postnet::postnet_refine;
use super::{ModelConfig, ModelError};
use crate::features::{AlignmentMatrix, FeatureSequence};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// Bounds on free-running decoding.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ConvertLimits {
    /// Hard cap on decoder steps; `None` means `3 · ⌈T_x / r⌉`.
    pub max_steps: Option<usize>,
}

impl ConvertLimits {
    pub fn with_max_steps(max_steps: usize) -> Self {
        Self {
            max_steps: Some(max_steps),
        }
    }

    pub fn step_cap(&self, cfg: &ModelConfig, source_frames: usize) -> usize {
        self.max_steps
            .unwrap_or(3 * source_frames.div_ceil(cfg.r))
            .max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    /// `p_end` exceeded the stop threshold.
    EndFlag,
    /// Without attention the step count is fixed to `⌈T_x / r⌉` and the
    /// output is trimmed to `T_x` frames.
    FixedLength,
    /// The step cap was reached first; outputs are partial.
    StepCap,
}

#[derive(Clone, Debug)]
pub struct Conversion {
    /// PostNet output.
    pub mel: FeatureSequence,
    /// Decoder output before the PostNet.
    pub decoder: FeatureSequence,
    pub alignment: AlignmentMatrix,
    pub p_end: Vec<f64>,
    pub stop: StopReason,
}

impl Conversion {
    pub fn hit_step_cap(&self) -> bool {
        self.stop == StopReason::StepCap
    }
}

/// Free-running conversion of a `[mel | aux]` source sequence. Each step
/// feeds back the last frame it predicted; the PostNet runs once over the
/// whole decoder output.
pub fn convert(
    cfg: &ModelConfig,
    params: &ParamStore,
    source: &FeatureSequence,
    limits: ConvertLimits,
) -> Result<Conversion, ModelError> {
    cfg.validate()?;
    let mut g = Graph::new(params);
    let mut masks = Masks::inference(cfg);
    let enc = pyramid_encode(&mut g, cfg, source, &mut masks)?;
    let cap = limits.step_cap(cfg, source.frames());
    let fixed = (!cfg.attention).then(|| source.frames().div_ceil(cfg.r));

    let mut state = DecoderState::initial(&mut g, cfg, &enc);
    let mut prev: Var = g.input(Tensor::zeros(1, cfg.d_mel));
    let mut frames = Vec::new();
    let mut rows = Vec::new();
    let mut p_end = Vec::new();
    let mut stop = StopReason::StepCap;
    for t in 0..cap {
        let (out, next) = decoder_step(&mut g, cfg, prev, t, &state, &enc, &mut masks)?;
        frames.push(out.frames);
        rows.push(g.value(out.alignment).clone());
        let p = g.value(out.p_end).item();
        p_end.push(p);
        prev = g.slice_rows(out.frames, cfg.r - 1, 1)?;
        state = next;
        match fixed {
            Some(n) if t + 1 == n => {
                stop = StopReason::FixedLength;
                break;
            }
            None if p > cfg.stop_threshold => {
                stop = StopReason::EndFlag;
                break;
            }
            _ => {}
        }
    }
    let mut all = g.concat_rows(&frames)?;
    if stop == StopReason::FixedLength {
        all = g.slice_rows(all, 0, source.frames())?;
    }
    let z = postnet_refine(&mut g, cfg, all)?;
    Ok(Conversion {
        mel: g.value(z).clone().into(),
        decoder: g.value(all).clone().into(),
        alignment: AlignmentMatrix::new(Tensor::vstack(&rows)?),
        p_end,
        stop,
    })
}
