use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError};
use crate::numerics::{ParamStore, Tensor};

struct Init {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Init {
    /// Glorot-uniform matrix.
    fn glorot(&mut self, name: String, rows: usize, cols: usize) -> Result<(), ModelError> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.rng.random_range(-a..a)).collect();
        self.put(name, Tensor::from_vec(rows, cols, data)?)
    }

    fn fill(&mut self, name: String, cols: usize, value: f64) -> Result<(), ModelError> {
        self.put(name, Tensor::filled(1, cols, value))
    }

    fn put(&mut self, name: String, t: Tensor) -> Result<(), ModelError> {
        Ok(self.store.insert(name, t)?)
    }

    fn linear(&mut self, prefix: &str, inp: usize, out: usize) -> Result<(), ModelError> {
        self.glorot(format!("{prefix}.w"), inp, out)?;
        self.fill(format!("{prefix}.b"), out, 0.0)
    }

    fn conv(&mut self, prefix: &str, width: usize, inp: usize, out: usize) -> Result<(), ModelError> {
        self.glorot(format!("{prefix}.w"), width * inp, out)?;
        self.fill(format!("{prefix}.b"), out, 0.0)
    }

    /// Forget-gate bias starts at 1.
    fn lstm(&mut self, prefix: &str, inp: usize, u: usize) -> Result<(), ModelError> {
        self.glorot(format!("{prefix}.wx"), inp, 4 * u)?;
        self.glorot(format!("{prefix}.wh"), u, 4 * u)?;
        self.fill(format!("{prefix}.gain"), 4 * u, 1.0)?;
        let mut bias = Tensor::zeros(1, 4 * u);
        bias.row_mut(0)[u..2 * u].iter_mut().for_each(|v| *v = 1.0);
        self.put(format!("{prefix}.bias"), bias)?;
        self.fill(format!("{prefix}.cell_gain"), u, 1.0)?;
        self.fill(format!("{prefix}.cell_bias"), u, 0.0)
    }
}

/// Freshly initialised parameters for `cfg`, deterministic in `seed`.
/// Attention parameters are omitted when attention is disabled.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore, ModelError> {
    cfg.validate()?;
    let mut p = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
        store: ParamStore::new(),
    };
    let f = cfg.per_layer_factor;
    let (u, dh) = (cfg.encoder_units, cfg.encoder_dims());
    for l in 0..cfg.encoder_layers {
        let inp = f * if l == 0 { cfg.input_dims() } else { dh };
        for dir in ["fw", "bw"] {
            p.lstm(&format!("enc.l{l}.{dir}"), inp, u)?;
        }
    }
    p.linear("prenet.l0", cfg.d_mel, cfg.prenet_units)?;
    p.linear("prenet.l1", cfg.prenet_units, cfg.prenet_units)?;
    p.lstm("dec.att_lstm", cfg.prenet_units + dh, cfg.attn_units)?;
    if cfg.attention {
        p.put("att.W".into(), Tensor::zeros(cfg.attn_units, dh))?;
        p.glorot("att.F".into(), cfg.attn_kernel, cfg.attn_filters)?;
        p.glorot("att.U".into(), cfg.attn_filters, cfg.attn_v_dim)?;
        p.fill("att.b".into(), cfg.attn_v_dim, 0.0)?;
        p.put("att.v".into(), Tensor::zeros(cfg.attn_v_dim, 1))?;
    }
    let du = cfg.decoder_units;
    for j in 0..cfg.decoder_layers {
        let inp = if j == 0 { dh + cfg.attn_units } else { du };
        p.lstm(&format!("dec.lstm{j}"), inp, du)?;
    }
    p.linear("dec.proj", dh + cfg.attn_units + du, cfg.output_dims())?;
    p.linear("dec.end", dh + cfg.attn_units, 1)?;
    let ch = cfg.postnet_channels;
    for k in 1..=cfg.postnet_kernels {
        p.conv(&format!("post.bank{k}"), k, cfg.d_mel, ch)?;
    }
    p.conv("post.conv0", 3, cfg.postnet_kernels * ch, ch)?;
    p.conv("post.conv1", 3, ch, cfg.d_mel)?;
    Ok(p.store)
}
