use super::{ModelConfig, ModelError};
use crate::features::FeatureSequence;
use crate::numerics::{Graph, ParamStore, Var};

fn conv(g: &mut Graph, x: Var, prefix: &str, width: usize) -> Result<Var, ModelError> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    let y = g.conv1d(x, w, width)?;
    Ok(g.add(y, b)?)
}

/// Residual convolutional refiner over a whole `T × d_mel` sequence:
/// a ReLU bank of widths `1..=postnet_kernels` whose outputs are stacked,
/// a width-3 ReLU layer, and a linear width-3 layer back to `d_mel` that is
/// added to the input.
pub fn postnet_refine(g: &mut Graph, cfg: &ModelConfig, y: Var) -> Result<Var, ModelError> {
    let (_, d) = g.shape(y);
    if d != cfg.d_mel {
        return Err(ModelError::InputDims {
            expected: cfg.d_mel,
            got: d,
        });
    }
    let mut bank = Vec::with_capacity(cfg.postnet_kernels);
    for k in 1..=cfg.postnet_kernels {
        let c = conv(g, y, &format!("post.bank{k}"), k)?;
        bank.push(g.relu(c)?);
    }
    let stacked = g.concat_cols(&bank)?;
    let hidden = conv(g, stacked, "post.conv0", 3)?;
    let hidden = g.relu(hidden)?;
    let delta = conv(g, hidden, "post.conv1", 3)?;
    Ok(g.add(y, delta)?)
}

/// [`postnet_refine`] on plain features.
pub fn refine(cfg: &ModelConfig, params: &ParamStore, y: &FeatureSequence) -> Result<FeatureSequence, ModelError> {
    let mut g = Graph::new(params);
    let v = g.input(y.tensor().clone());
    let z = postnet_refine(&mut g, cfg, v)?;
    Ok(g.value(z).clone().into())
}
