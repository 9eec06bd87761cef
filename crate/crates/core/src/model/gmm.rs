use std::f64::consts::PI;

use super::ModelError;
use crate::numerics::{Graph, Tensor, Var};

/// Mixture parameters for one decoder step.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmFrameParams {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub sigmas: Vec<Vec<f64>>,
}

impl GmmFrameParams {
    pub fn mixtures(&self) -> usize {
        self.weights.len()
    }

    /// Negative log-likelihood of `y` under the diagonal mixture.
    pub fn nll(&self, y: &[f64]) -> f64 {
        let logs: Vec<f64> = (0..self.mixtures())
            .map(|i| {
                let density: f64 = y
                    .iter()
                    .zip(&self.means[i])
                    .zip(&self.sigmas[i])
                    .map(|((y, mu), s)| -0.5 * ((y - mu) / s).powi(2) - s.ln() - 0.5 * (2.0 * PI).ln())
                    .sum();
                self.weights[i].ln() + density
            })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        -(max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln())
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Split `o = [w logits (m) | σ pre-activations (m·dims) | means (m·dims)]`
/// into softmax weights, softplus deviations and identity means.
pub fn gmm_partition(o: &[f64], mixtures: usize, dims: usize) -> Result<GmmFrameParams, ModelError> {
    let expected = (2 * dims + 1) * mixtures;
    if o.len() != expected || mixtures == 0 {
        return Err(ModelError::OutputLength {
            expected,
            got: o.len(),
        });
    }
    let sig = &o[mixtures..mixtures + mixtures * dims];
    let mu = &o[mixtures + mixtures * dims..];
    Ok(GmmFrameParams {
        weights: softmax(&o[..mixtures]),
        sigmas: sig.chunks(dims).map(|c| c.iter().map(|v| softplus(*v)).collect()).collect(),
        means: mu.chunks(dims).map(<[f64]>::to_vec).collect(),
    })
}

fn argmax_first(w: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in w.iter().enumerate() {
        if *v > w[best] {
            best = i;
        }
    }
    best
}

/// Mean of the heaviest component; equal weights resolve to the lowest
/// index.
pub fn gmm_select_mean(p: &GmmFrameParams) -> &[f64] {
    &p.means[argmax_first(&p.weights)]
}

/// Graph version of [`gmm_select_mean`]: the chosen component is fixed
/// from the current values, so gradients reach only that mean's slice of
/// `o`. Returns the `1 × dims` mean and the component index.
pub fn select_mean(g: &mut Graph, o: Var, mixtures: usize, dims: usize) -> Result<(Var, usize), ModelError> {
    let weights = softmax(&g.value(o).data()[..mixtures]);
    let i = argmax_first(&weights);
    let mean = g.slice_cols(o, mixtures + mixtures * dims + i * dims, dims)?;
    Ok((mean, i))
}

/// `−log Σ_i w_i N(y; μ_i, diag σ_i²)` for a `1 × (2·dims+1)·m` output row.
/// Only the first `valid` dimensions of `y` enter the density, which
/// marginalises the padded tail of a partial final frame group.
pub fn gmm_nll(
    g: &mut Graph,
    o: Var,
    y: &[f64],
    valid: usize,
    mixtures: usize,
    dims: usize,
) -> Result<Var, ModelError> {
    let expected = (2 * dims + 1) * mixtures;
    let got = g.shape(o).1;
    if got != expected || y.len() != dims {
        return Err(ModelError::OutputLength { expected, got });
    }
    let m = mixtures;
    let logits = g.slice_cols(o, 0, m)?;
    let lse = g.logsumexp(logits)?;
    let log_w = g.sub(logits, lse)?;

    let pre = g.slice_cols(o, m, m * dims)?;
    let pre = g.reshape(pre, m, dims)?;
    let sigma = g.softplus(pre)?;
    let mu = g.slice_cols(o, m + m * dims, m * dims)?;
    let mu = g.reshape(mu, m, dims)?;

    let target = g.input(Tensor::row_vector(y.to_vec()));
    let diff = g.sub(mu, target)?;
    let z = g.div(diff, sigma)?;
    let sq = g.square(z)?;
    let quad = g.scale(sq, -0.5)?;
    let log_sigma = g.log(sigma)?;
    let term = g.sub(quad, log_sigma)?;
    let mut term = g.add_scalar(term, -0.5 * (2.0 * PI).ln())?;
    if valid < dims {
        let mut mask = Tensor::zeros(m, dims);
        for r in 0..m {
            mask.row_mut(r)[..valid].iter_mut().for_each(|v| *v = 1.0);
        }
        term = g.mask(term, mask)?;
    }
    let per_comp = g.sum_rows(term)?;
    let per_comp = g.transpose(per_comp)?;
    let joint = g.add(per_comp, log_w)?;
    let ll = g.logsumexp(joint)?;
    Ok(g.scale(ll, -1.0)?)
}
