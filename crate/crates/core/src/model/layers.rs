use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::numerics::{Graph, NumericsError, Tensor, Var};

type Result<T> = std::result::Result<T, NumericsError>;

/// Source of zoneout and dropout masks.
///
/// In training mode masks are Bernoulli draws. At inference zoneout uses
/// its expectation (`keep = p` everywhere) and PreNet dropout is disabled
/// unless the configuration asks to keep it.
pub struct Masks {
    rng: ChaCha8Rng,
    training: bool,
    zoneout: f64,
    dropout: f64,
    dropout_at_inference: bool,
}

impl Masks {
    pub fn training(cfg: &ModelConfig, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            training: true,
            zoneout: cfg.zoneout,
            dropout: cfg.prenet_dropout,
            dropout_at_inference: cfg.prenet_dropout_at_inference,
        }
    }

    pub fn inference(cfg: &ModelConfig) -> Self {
        Self {
            training: false,
            ..Self::training(cfg, 0)
        }
    }

    /// No zoneout and no dropout in either mode.
    pub fn none() -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(0),
            training: false,
            zoneout: 0.0,
            dropout: 0.0,
            dropout_at_inference: false,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Keep-mask for a `1 × n` recurrent state, or `None` when zoneout is off.
    pub(crate) fn zoneout_keep(&mut self, n: usize) -> Option<Tensor> {
        if self.zoneout == 0.0 {
            return None;
        }
        if !self.training {
            return Some(Tensor::filled(1, n, self.zoneout));
        }
        let p = self.zoneout;
        let data = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { 1.0 } else { 0.0 })
            .collect();
        Some(Tensor::from_vec(1, n, data).expect("positive width"))
    }

    /// Inverted-dropout mask (`0` or `1/(1−p)`), or `None` when inactive.
    pub(crate) fn dropout(&mut self, n: usize) -> Option<Tensor> {
        let active = self.training || self.dropout_at_inference;
        if self.dropout == 0.0 || !active {
            return None;
        }
        let p = self.dropout;
        let scale = 1.0 / (1.0 - p);
        let data = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { scale })
            .collect();
        Some(Tensor::from_vec(1, n, data).expect("positive width"))
    }
}

/// `x · w + b` for parameters `{prefix}.w` and `{prefix}.b`.
pub(crate) fn linear(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    g.affine(x, w, b)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(g: &mut Graph, units: usize) -> Self {
        let h = g.input(Tensor::zeros(1, units));
        let c = g.input(Tensor::zeros(1, units));
        Self { h, c }
    }
}

/// Layer-normalised LSTM cell with gate order `[i, f, o, g]`:
/// `z = LN(x·Wx + h·Wh) ⊙ γ + β`, `c' = σ(f)⊙c + σ(i)⊙tanh(g)`,
/// `h' = σ(o) ⊙ tanh(LN(c') ⊙ γc + βc)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Lstm {
    wx: Var,
    wh: Var,
    gain: Var,
    bias: Var,
    cell_gain: Var,
    cell_bias: Var,
    units: usize,
    eps: f64,
}

impl Lstm {
    pub fn bind(g: &mut Graph, prefix: &str, units: usize, eps: f64) -> Result<Self> {
        let mut p = |s: &str| g.param(&format!("{prefix}.{s}"));
        Ok(Self {
            wx: p("wx")?,
            wh: p("wh")?,
            gain: p("gain")?,
            bias: p("bias")?,
            cell_gain: p("cell_gain")?,
            cell_bias: p("cell_bias")?,
            units,
            eps,
        })
    }

    /// Input projection `x · Wx` for any number of rows.
    pub fn project(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.matmul(x, self.wx)
    }

    /// One step from a pre-projected `1 × 4u` input row.
    pub fn step(&self, g: &mut Graph, xw: Var, s: LstmState, masks: &mut Masks) -> Result<LstmState> {
        let u = self.units;
        let hw = g.matmul(s.h, self.wh)?;
        let z = g.add(xw, hw)?;
        let z = g.layer_norm(z, self.eps)?;
        let z = g.mul(z, self.gain)?;
        let z = g.add(z, self.bias)?;
        let sig_in = g.slice_cols(z, 0, 3 * u)?;
        let sig = g.sigmoid(sig_in)?;
        let cand_in = g.slice_cols(z, 3 * u, u)?;
        let cand = g.tanh(cand_in)?;
        let i = g.slice_cols(sig, 0, u)?;
        let f = g.slice_cols(sig, u, u)?;
        let o = g.slice_cols(sig, 2 * u, u)?;
        let keep_old = g.mul(f, s.c)?;
        let write = g.mul(i, cand)?;
        let c_new = g.add(keep_old, write)?;
        let cn = g.layer_norm(c_new, self.eps)?;
        let cn = g.mul(cn, self.cell_gain)?;
        let cn = g.add(cn, self.cell_bias)?;
        let ct = g.tanh(cn)?;
        let h_new = g.mul(o, ct)?;
        let (h, c) = match (masks.zoneout_keep(u), masks.zoneout_keep(u)) {
            (Some(kh), Some(kc)) => (g.zoneout(h_new, s.h, kh)?, g.zoneout(c_new, s.c, kc)?),
            _ => (h_new, c_new),
        };
        Ok(LstmState { h, c })
    }

    pub fn step_input(&self, g: &mut Graph, x: Var, s: LstmState, masks: &mut Masks) -> Result<LstmState> {
        let xw = self.project(g, x)?;
        self.step(g, xw, s, masks)
    }
}
