use super::{EncoderStates, ModelConfig, ModelError};
use crate::numerics::{Graph, Tensor, Var};

/// Added to the forward-variable mass before renormalising.
pub const ATTENTION_FLOOR: f64 = 1e-20;
/// Unfloored mass below which a step is reported as degenerate.
pub const DEGENERATE_MASS: f64 = 1e-12;

/// One-hot alignment on the first encoder state.
pub fn initial_alignment(g: &mut Graph, t_h: usize) -> Var {
    let mut a = Tensor::zeros(1, t_h);
    a.set(0, 0, 1.0);
    g.input(a)
}

/// Hybrid scores `e_n = qᵀ W h_n + vᵀ tanh(U f_n + b)`, where `f` stacks the
/// outputs of `attn_filters` zero-padded filters of width `attn_kernel`
/// run over the previous alignment row. Returns a `1 × T_h` row.
pub fn attention_scores(
    g: &mut Graph,
    cfg: &ModelConfig,
    q: Var,
    enc: &EncoderStates,
    prev: Var,
) -> Result<Var, ModelError> {
    let w = g.param("att.W")?;
    let filters = g.param("att.F")?;
    let u = g.param("att.U")?;
    let b = g.param("att.b")?;
    let v = g.param("att.v")?;

    let qw = g.matmul(q, w)?;
    let content = g.matmul(qw, enc.h_t)?;

    let prev_col = g.transpose(prev)?;
    let f = g.conv1d(prev_col, filters, cfg.attn_kernel)?;
    let uf = g.affine(f, u, b)?;
    let act = g.tanh(uf)?;
    let loc = g.matmul(act, v)?;
    let loc = g.transpose(loc)?;
    Ok(g.add(content, loc)?)
}

/// Forward-attention update: `α̂_n = softmax(e)_n · (α_{n} + α_{n−1})` over
/// the previous row, then renormalised. Mass moves at most one state per
/// step.
pub fn forward_attention_step(
    g: &mut Graph,
    e: Var,
    prev: Var,
    step: usize,
) -> Result<Var, ModelError> {
    let probs = g.softmax(e)?;
    let shifted = g.shift_right(prev)?;
    let paths = g.add(prev, shifted)?;
    let mass = g.mul(probs, paths)?;
    if g.value(mass).sum() < DEGENERATE_MASS {
        return Err(ModelError::DegenerateAlignment { step });
    }
    Ok(g.normalize_rows(mass, ATTENTION_FLOOR)?)
}

/// `c = Σ_n α_n h_n`.
pub fn context(g: &mut Graph, alpha: Var, enc: &EncoderStates) -> Result<Var, ModelError> {
    Ok(g.matmul(alpha, enc.h)?)
}
