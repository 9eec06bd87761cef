//! Teacher-forced training.
//!
//! The objective is `w_dec·L_dec + w_post·L_post + w_end·L_end` plus an L2
//! penalty `l2·‖θ‖²`. `L_dec` is the frame MSE or, for a mixture head, the
//! mean per-step negative log-likelihood. `L_post` is always the MSE of
//! the PostNet output and `L_end` is the mean binary cross-entropy of the
//! completion flag against [`end_labels`]. Every mean is taken over the
//! valid frames or steps of the whole batch.
//!
//! Each utterance is recorded on its own tape; gradients are accumulated in
//! the [`ParamStore`] with the batch-level normalisers already applied, so a
//! batch step is exactly the gradient of the batch mean.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureSequence;
use crate::io::Checkpoint;
use crate::model::{gmm_nll, init_params, teacher_forced, Masks, ModelConfig, ModelError, OutputMode};
use crate::numerics::{Graph, NumericsError, ParamStore, Tensor, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("end labels need at least one decoder step")]
    NoSteps,
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint does not match the model: {0}")]
    Checkpoint(String),
    #[error("writing the training log: {0}")]
    Log(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_dec: f64,
    pub w_post: f64,
    pub w_end: f64,
}

impl LossWeights {
    pub fn for_mode(mode: OutputMode) -> Self {
        Self {
            w_dec: if mode.is_gmm() { 0.01 } else { 1.0 },
            w_post: 1.0,
            w_end: 0.005,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Parameters stay in 64-bit between epochs.
    F64,
    /// Parameters are rounded to 32-bit after every update.
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub decay: f64,
    /// Last epoch trained at the base rate.
    pub decay_after: usize,
    pub l2: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub precision: Precision,
    /// `None` selects [`LossWeights::for_mode`].
    pub weights: Option<LossWeights>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            decay: 0.95,
            decay_after: 50,
            l2: 1e-6,
            batch: 4,
            epochs: 60,
            seed: 1,
            clip_norm: 5.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            precision: Precision::F64,
            weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and nonnegative");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad("decay must lie in (0, 1]");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if self.l2 < 0.0 || self.clip_norm <= 0.0 {
            return bad("l2 must be nonnegative and clip_norm positive");
        }
        if let Some(w) = self.weights {
            if [w.w_dec, w.w_post, w.w_end].iter().any(|v| !(*v >= 0.0)) {
                return bad("loss weights must be nonnegative");
            }
        }
        Ok(())
    }

    pub fn weights_for(&self, mode: OutputMode) -> LossWeights {
        self.weights.unwrap_or_else(|| LossWeights::for_mode(mode))
    }

    /// Learning rate for 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi(epoch.saturating_sub(self.decay_after) as i32)
    }
}

/// `1e-3` through epoch 50, then decayed by 0.95 per epoch.
pub fn lr_schedule(epoch: usize) -> f64 {
    TrainConfig::default().lr_at(epoch)
}

/// Completion targets: one for the final decoder step, zero elsewhere.
pub fn end_labels(steps: usize) -> Result<Vec<f64>, TrainError> {
    if steps == 0 {
        return Err(TrainError::NoSteps);
    }
    let mut labels = vec![0.0; steps];
    labels[steps - 1] = 1.0;
    Ok(labels)
}

/// Per-dimension mean and standard deviation of the training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub source_mean: Vec<f64>,
    pub source_std: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
}

const STD_FLOOR: f64 = 1e-3;

fn moments<'a>(seqs: impl Iterator<Item = &'a FeatureSequence>, dims: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; dims];
    let mut sq = vec![0.0; dims];
    let mut n = 0usize;
    for s in seqs {
        for row in s.iter_frames() {
            for (d, v) in row.iter().enumerate() {
                sum[d] += v;
                sq[d] += v * v;
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(STD_FLOOR))
        .collect();
    (mean, std)
}

fn apply(x: &FeatureSequence, mean: &[f64], std: &[f64], forward: bool) -> FeatureSequence {
    let mut out = x.clone();
    for t in 0..out.frames() {
        for (d, v) in out.frame_mut(t).iter_mut().enumerate() {
            *v = if forward { (*v - mean[d]) / std[d] } else { *v * std[d] + mean[d] };
        }
    }
    out
}

impl FeatureStats {
    pub fn fit(pairs: &[TrainPair]) -> Self {
        let sd = pairs.first().map_or(0, |p| p.source.dims());
        let td = pairs.first().map_or(0, |p| p.target.dims());
        let (source_mean, source_std) = moments(pairs.iter().map(|p| &p.source), sd);
        let (target_mean, target_std) = moments(pairs.iter().map(|p| &p.target), td);
        Self {
            source_mean,
            source_std,
            target_mean,
            target_std,
        }
    }

    pub fn normalize_source(&self, x: &FeatureSequence) -> FeatureSequence {
        apply(x, &self.source_mean, &self.source_std, true)
    }

    pub fn normalize_target(&self, y: &FeatureSequence) -> FeatureSequence {
        apply(y, &self.target_mean, &self.target_std, true)
    }

    pub fn denormalize_target(&self, y: &FeatureSequence) -> FeatureSequence {
        apply(y, &self.target_mean, &self.target_std, false)
    }
}

/// A source/target pair, possibly padded beyond its valid lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub source: FeatureSequence,
    pub target: FeatureSequence,
    pub source_len: usize,
    pub target_len: usize,
}

impl TrainPair {
    pub fn new(source: FeatureSequence, target: FeatureSequence) -> Self {
        Self {
            source_len: source.frames(),
            target_len: target.frames(),
            source,
            target,
        }
    }

    /// Extends both sequences to the given frame counts by repeating their
    /// last frame; valid lengths are unchanged.
    pub fn padded_to(&self, source_frames: usize, target_frames: usize) -> Self {
        let pad = |x: &FeatureSequence, n: usize| {
            let rows: Vec<Vec<f64>> = (0..n.max(x.frames()))
                .map(|t| x.frame(t.min(x.frames() - 1)).to_vec())
                .collect();
            FeatureSequence::from_frames(&rows).expect("rows share a width")
        };
        Self {
            source: pad(&self.source, source_frames),
            target: pad(&self.target, target_frames),
            ..self.clone()
        }
    }

    fn valid(&self) -> (FeatureSequence, FeatureSequence) {
        (self.source.truncate(self.source_len), self.target.truncate(self.target_len))
    }

    pub fn normalized(&self, stats: &FeatureStats) -> Self {
        Self {
            source: stats.normalize_source(&self.source),
            target: stats.normalize_target(&self.target),
            ..self.clone()
        }
    }
}

/// Pads every pair to the batch maximum.
pub fn pad_batch(pairs: &[TrainPair]) -> Vec<TrainPair> {
    let ms = pairs.iter().map(|p| p.source.frames()).max().unwrap_or(0);
    let mt = pairs.iter().map(|p| p.target.frames()).max().unwrap_or(0);
    pairs.iter().map(|p| p.padded_to(ms, mt)).collect()
}

/// Graph nodes a loss is computed from.
pub struct LossInputs {
    /// Decoder frames trimmed to `T_y × d_mel`.
    pub decoder_frames: Var,
    /// Raw output projections, one per decoder step.
    pub outputs: Vec<Var>,
    pub postnet: Var,
    pub end_logits: Vec<Var>,
}

/// Unnormalised loss sums with the counts they are averaged over.
#[derive(Clone, Copy, Debug)]
pub struct TermSums {
    pub dec: Var,
    pub post: Var,
    pub end: Var,
    pub counts: LossCounts,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LossCounts {
    pub dec: usize,
    pub post: usize,
    pub end: usize,
}

impl std::ops::AddAssign for LossCounts {
    fn add_assign(&mut self, o: Self) {
        self.dec += o.dec;
        self.post += o.post;
        self.end += o.end;
    }
}

fn squared_error_sum(g: &mut Graph, pred: Var, target: &FeatureSequence) -> Result<Var, TrainError> {
    let y = g.input(target.tensor().clone());
    let d = g.sub(pred, y)?;
    let sq = g.square(d)?;
    Ok(g.sum(sq)?)
}

/// `Σ_t softplus(z_t) − y_t·z_t`, the cross-entropy of `sigmoid(z)`.
fn bce_sum(g: &mut Graph, logits: &[Var], labels: &[f64]) -> Result<Var, TrainError> {
    let mut terms = Vec::with_capacity(logits.len());
    for (z, y) in logits.iter().zip(labels) {
        let sp = g.softplus(*z)?;
        let yz = g.scale(*z, *y)?;
        terms.push(g.sub(sp, yz)?);
    }
    let all = g.concat_rows(&terms)?;
    Ok(g.sum(all)?)
}

/// Loss sums of one utterance against its natural target.
pub fn loss_terms(
    g: &mut Graph,
    cfg: &ModelConfig,
    inputs: &LossInputs,
    target: &FeatureSequence,
) -> Result<TermSums, TrainError> {
    let steps = inputs.outputs.len();
    let (t_y, d) = (target.frames(), cfg.d_mel);
    let labels = end_labels(steps)?;
    let dec = match cfg.output {
        OutputMode::Mse => squared_error_sum(g, inputs.decoder_frames, target)?,
        OutputMode::Gmm { mixtures } => {
            let block = cfg.block_dims();
            let mut terms = Vec::with_capacity(steps);
            for (t, o) in inputs.outputs.iter().enumerate() {
                let mut y = Vec::with_capacity(block);
                for k in 0..cfg.r {
                    y.extend_from_slice(target.frame((t * cfg.r + k).min(t_y - 1)));
                }
                let valid = (t_y - t * cfg.r).min(cfg.r) * d;
                terms.push(gmm_nll(g, *o, &y, valid, mixtures, block)?);
            }
            let all = g.concat_rows(&terms)?;
            g.sum(all)?
        }
    };
    let post = squared_error_sum(g, inputs.postnet, target)?;
    let end = bce_sum(g, &inputs.end_logits, &labels)?;
    let counts = LossCounts {
        dec: if cfg.output.is_gmm() { steps } else { t_y * d },
        post: t_y * d,
        end: steps,
    };
    Ok(TermSums { dec, post, end, counts })
}

/// Per-term loss values; `total` is their weighted sum plus `l2`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub dec: f64,
    pub post: f64,
    pub end: f64,
    pub l2: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn from_sums(sums: [f64; 3], counts: LossCounts, w: LossWeights, l2: f64) -> Self {
        let dec = sums[0] / counts.dec as f64;
        let post = sums[1] / counts.post as f64;
        let end = sums[2] / counts.end as f64;
        Self {
            dec,
            post,
            end,
            l2,
            total: w.w_dec * dec + w.w_post * post + w.w_end * end + l2,
        }
    }
}

fn counts_of(cfg: &ModelConfig, t_y: usize) -> LossCounts {
    let steps = t_y.div_ceil(cfg.r);
    LossCounts {
        dec: if cfg.output.is_gmm() { steps } else { t_y * cfg.d_mel },
        post: t_y * cfg.d_mel,
        end: steps,
    }
}

/// `l2·‖θ‖²`; adds its gradient `2·l2·θ` into the accumulators.
pub fn apply_l2(params: &mut ParamStore, l2: f64) -> f64 {
    if l2 == 0.0 {
        return 0.0;
    }
    let value: f64 = params.iter().map(|(_, t)| t.squared_norm()).sum();
    let values: BTreeMap<String, Tensor> = params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    for (name, g) in params.grads_mut() {
        for (gv, tv) in g.data_mut().iter_mut().zip(values[name].data()) {
            *gv += 2.0 * l2 * tv;
        }
    }
    l2 * value
}

/// Runs teacher forcing over every pair, accumulating parameter gradients
/// of the batch loss into `params`. Returns the breakdown without L2.
fn accumulate_batch(
    params: &mut ParamStore,
    cfg: &ModelConfig,
    weights: LossWeights,
    batch: &[TrainPair],
    masks: &mut dyn FnMut(usize) -> Masks,
    with_grads: bool,
) -> Result<LossBreakdown, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut counts = LossCounts::default();
    for p in batch {
        counts += counts_of(cfg, p.target_len);
    }
    let coef = [
        weights.w_dec / counts.dec as f64,
        weights.w_post / counts.post as f64,
        weights.w_end / counts.end as f64,
    ];
    let mut sums = [0.0; 3];
    for (i, p) in batch.iter().enumerate() {
        let (source, target) = p.valid();
        let mut m = masks(i);
        let grads = {
            let mut g = Graph::new(params);
            let tf = teacher_forced(&mut g, cfg, &source, &target, &mut m)?;
            let inputs = LossInputs {
                decoder_frames: tf.decoder_frames,
                outputs: tf.steps.iter().map(|s| s.output).collect(),
                postnet: tf.postnet,
                end_logits: tf.steps.iter().map(|s| s.end_logit).collect(),
            };
            let t = loss_terms(&mut g, cfg, &inputs, &target)?;
            for (s, v) in sums.iter_mut().zip([t.dec, t.post, t.end]) {
                *s += g.value(v).item();
            }
            if with_grads {
                let a = g.scale(t.dec, coef[0])?;
                let b = g.scale(t.post, coef[1])?;
                let c = g.scale(t.end, coef[2])?;
                let ab = g.add(a, b)?;
                let loss = g.add(ab, c)?;
                Some(g.backward(loss)?)
            } else {
                None
            }
        };
        if let Some(grads) = grads {
            params.accumulate(&grads, 1.0);
        }
    }
    let b = LossBreakdown::from_sums(sums, counts, weights, 0.0);
    if !b.total.is_finite() {
        return Err(TrainError::NonFiniteLoss);
    }
    Ok(b)
}

/// Batch loss at the current parameters with inference-mode masks.
pub fn evaluate_loss(
    cfg: &ModelConfig,
    params: &ParamStore,
    weights: LossWeights,
    batch: &[TrainPair],
) -> Result<LossBreakdown, TrainError> {
    let mut p = params.clone();
    accumulate_batch(&mut p, cfg, weights, batch, &mut |_| Masks::inference(cfg), false)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    fn update(&mut self, params: &mut ParamStore, cfg: &TrainConfig, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (name, theta, g) in params.iter_with_grads_mut() {
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(g.rows(), g.cols()), Tensor::zeros(g.rows(), g.cols())));
            let iter = theta.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((th, gv), (mv, vv)) in iter {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *th -= lr * (*mv / c1) / ((*vv / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Set when the gradient was non-finite and no update was applied.
    pub skipped: bool,
}

impl StepRecord {
    pub const TSV_HEADER: &'static str = "step\tepoch\tlr\ttotal\tdec\tpost\tend\tl2\tgrad_norm\tskipped";

    pub fn to_tsv(&self) -> String {
        let l = &self.loss;
        format!(
            "{}\t{}\t{:.6e}\t{:.8e}\t{:.8e}\t{:.8e}\t{:.8e}\t{:.8e}\t{:.6e}\t{}",
            self.step,
            self.epoch,
            self.lr,
            l.total,
            l.dec,
            l.post,
            l.end,
            l.l2,
            self.grad_norm,
            u8::from(self.skipped)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_total: f64,
    pub skipped: usize,
    pub validation: Option<LossBreakdown>,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn round_f32(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
}

/// Owns the parameters and optimizer state of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: ModelConfig,
    pub cfg: TrainConfig,
    pub params: ParamStore,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub stats: Option<FeatureStats>,
}

impl Trainer {
    pub fn new(model: ModelConfig, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let params = init_params(&model, cfg.seed)?;
        Ok(Self {
            model,
            cfg,
            params,
            adam: Adam::default(),
            epoch: 0,
            stats: None,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, TrainError> {
        ck.train.validate()?;
        let fresh = init_params(&ck.model, 0)?;
        for (name, t) in fresh.iter() {
            match ck.params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(TrainError::Checkpoint(format!("parameter `{name}` missing or misshapen"))),
            }
        }
        if fresh.len() != ck.params.len() {
            return Err(TrainError::Checkpoint("unexpected parameters".into()));
        }
        Ok(Self {
            model: ck.model,
            cfg: ck.train,
            params: ck.params,
            adam: Adam {
                step: ck.step,
                moments: ck.moments,
            },
            epoch: ck.epoch,
            stats: ck.stats,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: self.cfg.clone(),
            epoch: self.epoch,
            step: self.adam.step,
            stats: self.stats.clone(),
            params: self.params.clone(),
            moments: self.adam.moments.clone(),
        }
    }

    pub fn weights(&self) -> LossWeights {
        self.cfg.weights_for(self.model.output)
    }

    fn masks_seed(&self, idx: usize) -> u64 {
        mix(mix(mix(self.cfg.seed, self.epoch as u64), self.adam.step), idx as u64)
    }

    /// One update on `batch` at learning rate `lr`.
    pub fn train_step(&mut self, batch: &[TrainPair], lr: f64) -> Result<StepRecord, TrainError> {
        let weights = self.weights();
        let seeds: Vec<u64> = (0..batch.len()).map(|i| self.masks_seed(i)).collect();
        let model = self.model.clone();
        self.params.zero_grads();
        let mut loss = match accumulate_batch(
            &mut self.params,
            &model,
            weights,
            batch,
            &mut |i| Masks::training(&model, seeds[i]),
            true,
        ) {
            Ok(l) => l,
            Err(TrainError::NonFiniteLoss | TrainError::Numerics(NumericsError::NonFinite { .. }))
            | Err(TrainError::Model(ModelError::Numerics(NumericsError::NonFinite { .. }))) => {
                return Ok(self.skipped(f64::NAN, lr));
            }
            Err(e) => return Err(e),
        };
        loss.l2 = apply_l2(&mut self.params, self.cfg.l2);
        loss.total += loss.l2;
        let grad_norm = self.params.grad_norm();
        if !grad_norm.is_finite() {
            let mut r = self.skipped(grad_norm, lr);
            r.loss = loss;
            return Ok(r);
        }
        if grad_norm > self.cfg.clip_norm {
            let s = self.cfg.clip_norm / grad_norm;
            for (_, g) in self.params.grads_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        self.adam.update(&mut self.params, &self.cfg, lr);
        if self.cfg.precision == Precision::F32 {
            self.round_state();
        }
        Ok(StepRecord {
            step: self.adam.step,
            epoch: self.epoch,
            lr,
            loss,
            grad_norm,
            skipped: false,
        })
    }

    fn skipped(&self, grad_norm: f64, lr: f64) -> StepRecord {
        StepRecord {
            step: self.adam.step,
            epoch: self.epoch,
            lr,
            loss: LossBreakdown {
                total: f64::NAN,
                ..LossBreakdown::default()
            },
            grad_norm,
            skipped: true,
        }
    }

    fn round_state(&mut self) {
        let names: Vec<String> = self.params.names().map(str::to_string).collect();
        for n in &names {
            round_f32(self.params.get_mut(n).expect("name from store"));
        }
        for (m, v) in self.adam.moments.values_mut() {
            round_f32(m);
            round_f32(v);
        }
    }

    /// One shuffled pass over `data`. Parameters and moments are rounded
    /// to 32-bit afterwards, which is what a checkpoint stores, so a
    /// resumed run continues exactly.
    pub fn train_epoch(
        &mut self,
        data: &[TrainPair],
        validation: &[TrainPair],
        log: &mut dyn Write,
    ) -> Result<EpochSummary, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let lr = self.cfg.lr_at(self.epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.cfg.seed ^ 0x5eed, self.epoch as u64)));
        let (mut sum, mut n, mut skipped) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(self.cfg.batch) {
            let batch: Vec<TrainPair> = chunk.iter().map(|i| data[*i].clone()).collect();
            let rec = self.train_step(&batch, lr)?;
            writeln!(log, "{}", rec.to_tsv())?;
            if rec.skipped {
                skipped += 1;
            } else {
                sum += rec.loss.total;
                n += 1;
            }
        }
        self.round_state();
        self.epoch += 1;
        let validation = if validation.is_empty() {
            None
        } else {
            Some(evaluate_loss(&self.model, &self.params, self.weights(), validation)?)
        };
        Ok(EpochSummary {
            epoch: self.epoch,
            mean_total: sum / n.max(1) as f64,
            skipped,
            validation,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InputChannels;
    use rand::Rng;

    fn tiny(output: OutputMode) -> ModelConfig {
        ModelConfig {
            d_mel: 4,
            d_aux: 2,
            encoder_units: 8,
            prenet_units: 8,
            attn_units: 8,
            attn_filters: 2,
            attn_kernel: 3,
            attn_v_dim: 8,
            decoder_units: 8,
            postnet_kernels: 3,
            postnet_channels: 4,
            output,
            ..ModelConfig::default()
        }
    }

    fn random_seq(rng: &mut ChaCha8Rng, t: usize, d: usize) -> FeatureSequence {
        FeatureSequence::new(t, d, (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn pair(seed: u64, tx: usize, ty: usize) -> TrainPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TrainPair::new(random_seq(&mut rng, tx, 6), random_seq(&mut rng, ty, 4))
    }

    #[test]
    fn end_label_cases() {
        assert_eq!(end_labels(1).unwrap(), vec![1.0]);
        assert_eq!(end_labels(4).unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
        for n in 1..50 {
            assert_eq!(end_labels(n).unwrap().iter().sum::<f64>(), 1.0);
        }
        assert!(matches!(end_labels(0), Err(TrainError::NoSteps)));
    }

    #[test]
    fn learning_rate_schedule() {
        assert_eq!(lr_schedule(10), 1e-3);
        assert_eq!(lr_schedule(30), 1e-3);
        assert_eq!(lr_schedule(50), 1e-3);
        assert!((lr_schedule(51) - 9.5e-4).abs() < 1e-15);
        assert!((lr_schedule(60) - 1e-3 * 0.95f64.powi(10)).abs() < 1e-15);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            TrainConfig { decay: 0.0, ..TrainConfig::default() },
            TrainConfig { decay: 1.5, ..TrainConfig::default() },
            TrainConfig { lr: f64::NAN, ..TrainConfig::default() },
            TrainConfig { batch: 0, ..TrainConfig::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    fn perfect_inputs(
        g: &mut Graph,
        cfg: &ModelConfig,
        y: &FeatureSequence,
        eps: f64,
    ) -> LossInputs {
        let steps = y.frames().div_ceil(cfg.r);
        let frames = g.input(y.tensor().clone());
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let end_logits = (0..steps)
            .map(|t| g.input(Tensor::scalar(logit(if t + 1 == steps { 1.0 - eps } else { eps }))))
            .collect();
        LossInputs {
            decoder_frames: frames,
            outputs: vec![frames; steps],
            postnet: frames,
            end_logits,
        }
    }

    #[test]
    fn perfect_predictions_leave_only_the_end_term() {
        let cfg = tiny(OutputMode::Mse);
        let y = pair(1, 3, 7).target;
        let params = ParamStore::new();
        let mut previous = f64::INFINITY;
        for eps in [1e-2, 1e-4, 1e-8] {
            let mut g = Graph::new(&params);
            let inputs = perfect_inputs(&mut g, &cfg, &y, eps);
            let t = loss_terms(&mut g, &cfg, &inputs, &y).unwrap();
            let v = [t.dec, t.post, t.end].map(|v| g.value(v).item());
            let b = LossBreakdown::from_sums(v, t.counts, LossWeights::for_mode(cfg.output), 0.0);
            assert_eq!(b.dec, 0.0);
            assert_eq!(b.post, 0.0);
            let want = 0.005 * -(1.0 - eps).ln();
            assert!((b.total - want).abs() < 1e-12 * want.max(1.0), "{} vs {want}", b.total);
            assert!(b.total < previous);
            previous = b.total;
        }
    }

    #[test]
    fn unit_gaussian_at_its_mean_gives_the_log_normaliser() {
        let cfg = ModelConfig {
            r: 2,
            ..tiny(OutputMode::Gmm { mixtures: 1 })
        };
        let y = pair(2, 3, 6).target;
        let params = ParamStore::new();
        let mut g = Graph::new(&params);
        // softplus(pre) = 1 at pre = ln(e − 1).
        let pre = (std::f64::consts::E - 1.0).ln();
        let block = cfg.block_dims();
        let outputs: Vec<Var> = (0..3)
            .map(|t| {
                let mut o = vec![0.0];
                o.extend(std::iter::repeat_n(pre, block));
                o.extend_from_slice(y.frame(2 * t));
                o.extend_from_slice(y.frame(2 * t + 1));
                g.input(Tensor::row_vector(o))
            })
            .collect();
        let frames = g.input(y.tensor().clone());
        let z = g.input(Tensor::scalar(0.0));
        let inputs = LossInputs {
            decoder_frames: frames,
            outputs,
            postnet: frames,
            end_logits: vec![z; 3],
        };
        let t = loss_terms(&mut g, &cfg, &inputs, &y).unwrap();
        let per_step = g.value(t.dec).item() / t.counts.dec as f64;
        let want = block as f64 / 2.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((per_step - want).abs() < 1e-10);
    }

    #[test]
    fn decomposition_is_exact() {
        for mode in [OutputMode::Mse, OutputMode::Gmm { mixtures: 2 }] {
            let cfg = tiny(mode);
            let mut tr = Trainer::new(cfg, TrainConfig::default()).unwrap();
            let batch = [pair(3, 9, 7), pair(4, 12, 10)];
            let r = tr.train_step(&batch, 1e-3).unwrap();
            let w = tr.weights();
            let l = r.loss;
            let sum = w.w_dec * l.dec + w.w_post * l.post + w.w_end * l.end + l.l2;
            assert!((l.total - sum).abs() <= 1e-12 * l.total.abs().max(1.0));
        }
    }

    #[test]
    fn padding_does_not_change_the_loss() {
        for mode in [OutputMode::Mse, OutputMode::Gmm { mixtures: 2 }] {
            let cfg = ModelConfig { r: 3, ..tiny(mode) };
            let params = init_params(&cfg, 5).unwrap();
            let w = LossWeights::for_mode(mode);
            let batch = vec![pair(6, 9, 7), pair(7, 14, 11)];
            let plain = evaluate_loss(&cfg, &params, w, &batch).unwrap();
            let padded = evaluate_loss(&cfg, &params, w, &pad_batch(&batch)).unwrap();
            for (a, b) in [(plain.dec, padded.dec), (plain.post, padded.post), (plain.end, padded.end)] {
                assert!((a - b).abs() < 1e-9);
            }
            assert_eq!(pad_batch(&batch)[0].target.frames(), 11);
        }
    }

    #[test]
    fn l2_gradient_is_twice_l2_theta() {
        let cfg = tiny(OutputMode::Mse);
        let mut params = init_params(&cfg, 1).unwrap();
        params.zero_grads();
        let l2 = 1e-3;
        let value = apply_l2(&mut params, l2);
        let norm: f64 = params.iter().map(|(_, t)| t.squared_norm()).sum();
        assert!((value - l2 * norm).abs() < 1e-15);
        for (name, t) in params.iter() {
            let g = params.grad(name).unwrap();
            for (gv, tv) in g.data().iter().zip(t.data()) {
                assert!((gv - 2.0 * l2 * tv).abs() < 1e-18);
            }
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut tr = Trainer::new(tiny(OutputMode::Mse), TrainConfig::default()).unwrap();
        let before = tr.params.clone();
        tr.train_step(&[pair(8, 8, 6)], 0.0).unwrap();
        for (name, t) in before.iter() {
            assert_eq!(tr.params.get(name).unwrap(), t);
        }
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let data = vec![pair(1, 10, 8), pair(2, 9, 9), pair(3, 12, 7)];
        let run = || {
            let cfg = TrainConfig { batch: 2, ..TrainConfig::default() };
            let mut tr = Trainer::new(tiny(OutputMode::Gmm { mixtures: 2 }), cfg).unwrap();
            let mut log = Vec::new();
            for _ in 0..2 {
                tr.train_epoch(&data, &data[..1], &mut log).unwrap();
            }
            (tr.params, log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(la, lb);
        for (name, t) in a.iter() {
            let u = b.get(name).unwrap();
            assert!(t.data().iter().zip(u.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn overfits_a_single_pair() {
        let cfg = ModelConfig {
            zoneout: 0.0,
            prenet_dropout: 0.0,
            inputs: InputChannels::Both,
            ..tiny(OutputMode::Mse)
        };
        let tc = TrainConfig { lr: 3e-3, ..TrainConfig::default() };
        let mut tr = Trainer::new(cfg, tc).unwrap();
        let p = [pair(9, 10, 8)];
        let losses: Vec<f64> = (0..200).map(|_| tr.train_step(&p, 3e-3).unwrap().loss.total).collect();
        let decreasing = losses.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(decreasing as f64 >= 0.9 * 199.0, "{decreasing} decreasing steps");
        assert!(losses[199] < 0.1 * losses[0], "{} -> {}", losses[0], losses[199]);
    }

    #[test]
    fn nan_inputs_skip_the_step() {
        let mut tr = Trainer::new(tiny(OutputMode::Mse), TrainConfig::default()).unwrap();
        let mut p = pair(1, 8, 6);
        p.target.frame_mut(2)[0] = f64::NAN;
        p.target_len = 6;
        let before = tr.params.clone();
        let r = tr.train_step(&[p], 1e-3).unwrap();
        assert!(r.skipped);
        assert_eq!(tr.adam.step, 0);
        assert_eq!(tr.params, before);
    }

    #[test]
    fn checkpoint_resume_continues_exactly() {
        let data = vec![pair(1, 10, 8), pair(2, 9, 9)];
        let cfg = TrainConfig { batch: 1, ..TrainConfig::default() };
        let mut a = Trainer::new(tiny(OutputMode::Mse), cfg).unwrap();
        let mut sink = Vec::new();
        a.train_epoch(&data, &[], &mut sink).unwrap();
        let bytes = a.checkpoint().to_bytes().unwrap();
        let mut b = Trainer::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        let (mut la, mut lb) = (Vec::new(), Vec::new());
        a.train_epoch(&data, &[], &mut la).unwrap();
        b.train_epoch(&data, &[], &mut lb).unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn feature_stats_normalise_and_invert() {
        let data = vec![pair(1, 10, 8), pair(2, 9, 9)];
        let stats = FeatureStats::fit(&data);
        let n = data[0].normalized(&stats);
        let back = stats.denormalize_target(&n.target);
        assert!(back.tensor().max_abs_diff(data[0].target.tensor()) < 1e-12);
    }
}
