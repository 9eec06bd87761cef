use super::layers::{Lstm, LstmState, Masks};
use super::{InputChannels, ModelConfig, ModelError};
use crate::features::FeatureSequence;
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// Sinusoidal position code: entry `2i` is `sin(n / 10000^(2i/d))` and entry
/// `2i+1` the matching cosine.
///
/// ```
/// let code = scent::model::location_code(0, 6).unwrap();
/// assert_eq!(code, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
/// ```
pub fn location_code(n: usize, d: usize) -> Result<Vec<f64>, ModelError> {
    if d % 2 != 0 {
        return Err(ModelError::Config(format!("location code width {d} is odd")));
    }
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let angle = n as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Ok(out)
}

/// Rows `0..len` of location codes stacked into a matrix.
pub(crate) fn location_matrix(len: usize, d: usize) -> Result<Tensor, ModelError> {
    let rows = (0..len)
        .map(|n| location_code(n, d))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Tensor::from_rows(&rows)?)
}

/// Encoder output on a graph: `h` is `T_h × 2·encoder_units`, `h_t` its
/// transpose.
#[derive(Clone, Copy, Debug)]
pub struct EncoderStates {
    pub h: Var,
    pub h_t: Var,
    pub t_h: usize,
    pub t_x: usize,
}

/// Columns of a `[mel | aux]` source sequence selected by `cfg.inputs`.
pub(crate) fn select_inputs(cfg: &ModelConfig, x: &FeatureSequence) -> Result<Tensor, ModelError> {
    let full = cfg.d_mel + cfg.d_aux;
    if x.dims() != full {
        return Err(ModelError::InputDims {
            expected: full,
            got: x.dims(),
        });
    }
    if x.frames() == 0 {
        return Err(ModelError::EmptySequence);
    }
    let sel = match cfg.inputs {
        InputChannels::Both => x.clone(),
        InputChannels::MelOnly => x.select_dims(0, cfg.d_mel),
        InputChannels::AuxOnly => x.select_dims(cfg.d_mel, cfg.d_aux),
    };
    Ok(sel.into_tensor())
}

/// Repeat the last frame until the length is a multiple of `m`.
pub(crate) fn pad_to_multiple(x: &Tensor, m: usize) -> Tensor {
    let t = x.rows();
    let padded = t.div_ceil(m) * m;
    let mut out = Tensor::zeros(padded, x.cols());
    for r in 0..padded {
        out.row_mut(r).copy_from_slice(x.row(r.min(t - 1)));
    }
    out
}

fn bidirectional(
    g: &mut Graph,
    cfg: &ModelConfig,
    layer: usize,
    x: Var,
    masks: &mut Masks,
) -> Result<Var, ModelError> {
    let u = cfg.encoder_units;
    let t = g.shape(x).0;
    let mut outputs = Vec::with_capacity(2);
    for dir in ["fw", "bw"] {
        let cell = Lstm::bind(g, &format!("enc.l{layer}.{dir}"), u, cfg.ln_eps)?;
        let xw = cell.project(g, x)?;
        let mut state = LstmState::zeros(g, u);
        let mut hs = vec![state.h; t];
        let order: Vec<usize> = if dir == "fw" {
            (0..t).collect()
        } else {
            (0..t).rev().collect()
        };
        for i in order {
            let row = g.slice_rows(xw, i, 1)?;
            state = cell.step(g, row, state, masks)?;
            hs[i] = state.h;
        }
        outputs.push(g.concat_rows(&hs)?);
    }
    Ok(g.concat_cols(&outputs)?)
}

/// Pyramid bidirectional encoder. Each layer first concatenates
/// `per_layer_factor` consecutive rows of its input, so `T_h = ⌈T_x / M⌉`
/// after right-padding by repetition; location codes are added to the top
/// layer.
pub fn pyramid_encode(
    g: &mut Graph,
    cfg: &ModelConfig,
    x: &FeatureSequence,
    masks: &mut Masks,
) -> Result<EncoderStates, ModelError> {
    let input = select_inputs(cfg, x)?;
    let t_x = input.rows();
    let padded = pad_to_multiple(&input, cfg.downsample());
    let mut cur = g.input(padded);
    for layer in 0..cfg.encoder_layers {
        let (rows, cols) = g.shape(cur);
        let f = cfg.per_layer_factor;
        cur = g.reshape(cur, rows / f, cols * f)?;
        cur = bidirectional(g, cfg, layer, cur, masks)?;
    }
    let t_h = g.shape(cur).0;
    if cfg.location_code {
        let codes = g.input(location_matrix(t_h, cfg.encoder_dims())?);
        cur = g.add(cur, codes)?;
    }
    let h_t = g.transpose(cur)?;
    Ok(EncoderStates {
        h: cur,
        h_t,
        t_h,
        t_x,
    })
}

/// Encoder states as a plain matrix under inference masks.
pub fn encode(cfg: &ModelConfig, params: &ParamStore, x: &FeatureSequence) -> Result<Tensor, ModelError> {
    let mut g = Graph::new(params);
    let enc = pyramid_encode(&mut g, cfg, x, &mut Masks::inference(cfg))?;
    Ok(g.value(enc.h).clone())
}
