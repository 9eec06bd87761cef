use super::attention::{attention_scores, context, forward_attention_step, initial_alignment};
use super::encoder::{location_code, pyramid_encode};
use super::gmm::{gmm_partition, select_mean};
use super::layers::{linear, Lstm, LstmState, Masks};
use super::postnet::postnet_refine;
use super::{EncoderStates, GmmFrameParams, ModelConfig, ModelError, OutputMode};
use crate::features::FeatureSequence;
use crate::numerics::{Graph, Tensor, Var};

/// Recurrent state carried between decoder steps.
#[derive(Clone, Debug)]
pub struct DecoderState {
    attention_cell: LstmState,
    cells: Vec<LstmState>,
    alignment: Var,
    context: Var,
}

impl DecoderState {
    /// Zero recurrent states, zero context and the one-hot alignment on the
    /// first encoder state.
    pub fn initial(g: &mut Graph, cfg: &ModelConfig, enc: &EncoderStates) -> Self {
        Self {
            attention_cell: LstmState::zeros(g, cfg.attn_units),
            cells: (0..cfg.decoder_layers)
                .map(|_| LstmState::zeros(g, cfg.decoder_units))
                .collect(),
            alignment: initial_alignment(g, enc.t_h),
            context: g.input(Tensor::zeros(1, cfg.encoder_dims())),
        }
    }

    pub fn alignment(&self) -> Var {
        self.alignment
    }
}

/// Everything one decoder step produces, as graph nodes.
#[derive(Clone, Debug)]
pub struct DecoderStepOutput {
    /// `r × d_mel` predicted frames (the selected mixture mean in GMM mode).
    pub frames: Var,
    /// Raw output projection `o`.
    pub output: Var,
    pub end_logit: Var,
    pub p_end: Var,
    /// `1 × T_h` alignment row.
    pub alignment: Var,
    pub context: Var,
    pub query: Var,
    /// Mixture component whose mean became `frames`.
    pub component: Option<usize>,
}

impl DecoderStepOutput {
    pub fn gmm(&self, g: &Graph, cfg: &ModelConfig) -> Option<GmmFrameParams> {
        match cfg.output {
            OutputMode::Mse => None,
            OutputMode::Gmm { mixtures } => {
                gmm_partition(g.value(self.output).data(), mixtures, cfg.block_dims()).ok()
            }
        }
    }
}

/// One autoregressive step: PreNet on the previous frame (plus the step's
/// location code), attention LSTM producing the query, forward attention,
/// context, the decoder LSTM stack, then the frame projection from
/// `[c, q, decoder output]` and the completion logit from `[c, q]`.
#[allow(clippy::too_many_arguments)]
pub fn decoder_step(
    g: &mut Graph,
    cfg: &ModelConfig,
    prev_frame: Var,
    t: usize,
    state: &DecoderState,
    enc: &EncoderStates,
    masks: &mut Masks,
) -> Result<(DecoderStepOutput, DecoderState), ModelError> {
    let mut x = prev_frame;
    if cfg.location_code {
        let code = g.input(Tensor::row_vector(location_code(t, cfg.d_mel)?));
        x = g.add(x, code)?;
    }
    for layer in 0..2 {
        let a = linear(g, x, &format!("prenet.l{layer}"))?;
        x = g.relu(a)?;
        if let Some(m) = masks.dropout(cfg.prenet_units) {
            x = g.mask(x, m)?;
        }
    }

    let att_cell = Lstm::bind(g, "dec.att_lstm", cfg.attn_units, cfg.ln_eps)?;
    let att_in = g.concat_cols(&[x, state.context])?;
    let attention_cell = att_cell.step_input(g, att_in, state.attention_cell, masks)?;
    let q = attention_cell.h;

    let alignment = if cfg.attention {
        let e = attention_scores(g, cfg, q, enc, state.alignment)?;
        forward_attention_step(g, e, state.alignment, t)?
    } else {
        let idx = (t * cfg.r / cfg.downsample()).min(enc.t_h - 1);
        let mut a = Tensor::zeros(1, enc.t_h);
        a.set(0, idx, 1.0);
        g.input(a)
    };
    let c = context(g, alignment, enc)?;

    let mut cells = Vec::with_capacity(cfg.decoder_layers);
    let mut input = g.concat_cols(&[c, q])?;
    for (j, prev) in state.cells.iter().enumerate() {
        let cell = Lstm::bind(g, &format!("dec.lstm{j}"), cfg.decoder_units, cfg.ln_eps)?;
        let s = cell.step_input(g, input, *prev, masks)?;
        input = if j > 0 { g.add(s.h, input)? } else { s.h };
        cells.push(s);
    }

    let proj_in = g.concat_cols(&[c, q, input])?;
    let output = linear(g, proj_in, "dec.proj")?;
    let end_in = g.concat_cols(&[c, q])?;
    let end_logit = linear(g, end_in, "dec.end")?;
    let p_end = g.sigmoid(end_logit)?;

    let (block, component) = match cfg.output {
        OutputMode::Mse => (output, None),
        OutputMode::Gmm { mixtures } => {
            let (mean, i) = select_mean(g, output, mixtures, cfg.block_dims())?;
            (mean, Some(i))
        }
    };
    let frames = g.reshape(block, cfg.r, cfg.d_mel)?;

    let out = DecoderStepOutput {
        frames,
        output,
        end_logit,
        p_end,
        alignment,
        context: c,
        query: q,
        component,
    };
    let next = DecoderState {
        attention_cell,
        cells,
        alignment,
        context: c,
    };
    Ok((out, next))
}

/// Teacher-forced pass over one source/target pair.
#[derive(Clone, Debug)]
pub struct TeacherForced {
    pub encoder: EncoderStates,
    pub steps: Vec<DecoderStepOutput>,
    /// Decoder frames trimmed to `T_y × d_mel`.
    pub decoder_frames: Var,
    /// PostNet output, `T_y × d_mel`.
    pub postnet: Var,
}

/// Run the decoder for `⌈T_y / r⌉` steps, feeding step `t` the natural
/// target frame `t·r − 1` (zeros at `t = 0`).
pub fn teacher_forced(
    g: &mut Graph,
    cfg: &ModelConfig,
    source: &FeatureSequence,
    target: &FeatureSequence,
    masks: &mut Masks,
) -> Result<TeacherForced, ModelError> {
    if target.dims() != cfg.d_mel {
        return Err(ModelError::InputDims {
            expected: cfg.d_mel,
            got: target.dims(),
        });
    }
    if target.frames() == 0 {
        return Err(ModelError::EmptySequence);
    }
    let encoder = pyramid_encode(g, cfg, source, masks)?;
    let n_steps = target.frames().div_ceil(cfg.r);
    let mut state = DecoderState::initial(g, cfg, &encoder);
    let mut steps = Vec::with_capacity(n_steps);
    for t in 0..n_steps {
        let prev = if t == 0 {
            Tensor::zeros(1, cfg.d_mel)
        } else {
            Tensor::row_vector(target.frame(t * cfg.r - 1).to_vec())
        };
        let prev = g.input(prev);
        let (out, next) = decoder_step(g, cfg, prev, t, &state, &encoder, masks)?;
        steps.push(out);
        state = next;
    }
    let frames: Vec<Var> = steps.iter().map(|s| s.frames).collect();
    let all = g.concat_rows(&frames)?;
    let decoder_frames = g.slice_rows(all, 0, target.frames())?;
    let postnet = postnet_refine(g, cfg, decoder_frames)?;
    Ok(TeacherForced {
        encoder,
        steps,
        decoder_frames,
        postnet,
    })
}
