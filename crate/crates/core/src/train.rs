//! Training loops: the Adam optimizer over the named-tensor traversal, the
//! masked-reconstruction pretraining loop, and downstream classifier
//! finetuning with an optional frozen encoder. Everything is deterministic
//! given a seed: shuffling, mask sampling, and dropout draw from separate
//! rng streams.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stack_windows, SensorWindow, WindowSet};
use crate::error::{Error, Result};
use crate::masking::{batch_mask, StrategyConfig};
use crate::model::ModelParams;
use crate::objective::LossBreakdown;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Pretraining schedule. Reference values: 150 epochs, batch 256, Adam 1e-3,
/// loss weight alpha 0.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub strategy: StrategyConfig,
    pub alpha: f64,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn with_strategy(strategy: StrategyConfig, seed: u64) -> Self {
        Self {
            epochs: 150,
            batch_size: 256,
            lr: 1e-3,
            strategy,
            alpha: 0.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Downstream schedule. Reference values: 100 epochs, batch 1024, Adam 1e-3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn frozen(seed: u64) -> Self {
        Self {
            epochs: 100,
            batch_size: 1024,
            lr: 1e-3,
            freeze_encoder: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

struct MomentEntry {
    name: String,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam first/second moments for every trainable tensor, plus the step count.
pub struct OptimizerState {
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    entries: Vec<MomentEntry>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let entries = params
            .tensors()
            .iter()
            .filter(|t| t.kind.trainable())
            .map(|t| MomentEntry {
                name: t.name.clone(),
                m: vec![0.0; t.data.len()],
                v: vec![0.0; t.data.len()],
            })
            .collect();
        Self {
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            entries,
        }
    }
}

/// One Adam update with bias correction. Tensors in frozen groups are left
/// bit-identical (their moments are not advanced either).
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    let frozen = params.frozen;
    let gts: Vec<_> = grads.tensors().into_iter().filter(|t| t.kind.trainable()).collect();
    let mut pts: Vec<_> = params
        .tensors_mut()
        .into_iter()
        .filter(|t| t.kind.trainable())
        .collect();
    if pts.len() != gts.len() || pts.len() != state.entries.len() {
        return Err(Error::Argument(
            "optimizer state does not match the parameter layout".into(),
        ));
    }
    for ((p, g), e) in pts.iter_mut().zip(gts.iter()).zip(state.entries.iter_mut()) {
        if p.name != g.name || p.name != e.name {
            return Err(Error::Argument(format!(
                "optimizer state out of sync at tensor '{}'",
                p.name
            )));
        }
        if frozen.is_frozen(p.group) {
            continue;
        }
        if g.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in '{}'", p.name)));
        }
        for i in 0..p.data.len() {
            let gv = g.data[i];
            e.m[i] = state.beta1 * e.m[i] + (1.0 - state.beta1) * gv;
            e.v[i] = state.beta2 * e.v[i] + (1.0 - state.beta2) * gv * gv;
            let mhat = e.m[i] / bc1;
            let vhat = e.v[i] / bc2;
            p.data[i] -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// One line of the run log. Reconstruction steps fill the loss triple;
/// classification steps fill ce_loss, and epoch-end records add val_f1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_time: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_channel: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub combined: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ce_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_f1: Option<f64>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gather<'a>(set: &'a WindowSet, idx: &[usize]) -> Vec<&'a SensorWindow> {
    idx.iter().map(|&i| &set.windows[i]).collect()
}

/// Masked-reconstruction pretraining. Per epoch: seeded shuffle, batch, mask,
/// forward, backward, Adam. Emits one record per step through `log` and
/// returns the per-epoch mean loss curve. The caller owns checkpointing.
pub fn pretrain(
    params: &mut ModelParams,
    cfg: &PretrainConfig,
    train: &WindowSet,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<Vec<LossBreakdown>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Argument("pretraining needs a nonempty window set".into()));
    }
    params.ensure_compatible(train.channel_count, params.num_classes)?;
    cfg.strategy.validate(train.channel_count)?;
    let mut state = OptimizerState::new(params);
    let mut shuffle_rng = stream_rng(cfg.seed, 1);
    let mut mask_rng = stream_rng(cfg.seed, 2);
    let mut seed_rng = stream_rng(cfg.seed, 3);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut lt_sum = 0.0;
        let mut lc_sum = 0.0;
        let mut alpha_seen = cfg.alpha;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let ctx = |e: Error| e.with_context(&format!("epoch {epoch} step {step}"));
            let refs = gather(train, chunk);
            let batch: Vec<SensorWindow> = refs.iter().map(|&w| w.clone()).collect();
            let (masked, specs) = batch_mask(&batch, &cfg.strategy, &mut mask_rng).map_err(ctx)?;
            let raw3 = stack_windows(&refs)?;
            let masked3 = stack_windows(&masked.iter().collect::<Vec<_>>())?;
            let dropout_seed = seed_rng.gen::<u64>();
            let (breakdown, grads, updates) = params
                .reconstruction_gradients(raw3.view(), masked3.view(), &specs, cfg.alpha, dropout_seed)
                .map_err(ctx)?;
            params.commit_bn_updates(&updates);
            adam_step(params, &grads, &mut state, cfg.lr).map_err(ctx)?;
            log(&StepRecord {
                epoch,
                step,
                loss_time: Some(breakdown.loss_time),
                loss_channel: Some(breakdown.loss_channel),
                combined: Some(breakdown.combined),
                ce_loss: None,
                val_f1: None,
            });
            lt_sum += breakdown.loss_time;
            lc_sum += breakdown.loss_channel;
            alpha_seen = breakdown.alpha;
            steps += 1;
        }
        let lt = lt_sum / steps as f64;
        let lc = lc_sum / steps as f64;
        curve.push(LossBreakdown {
            loss_time: lt,
            loss_channel: lc,
            combined: alpha_seen * lt + (1.0 - alpha_seen) * lc,
            alpha: alpha_seen,
        });
    }
    Ok(curve)
}

/// Per-epoch finetuning summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub mean_ce: f64,
    pub val_f1: Option<f64>,
}

/// Trains the classifier head (freshly reinitialized) with cross entropy.
/// With `freeze_encoder` the encoder and reconstruction head stay
/// bit-identical and the encoder runs in eval mode; without it the whole
/// network trains end to end (the supervised baseline). Validation F1 is
/// logged per epoch for monitoring only; there is no early stopping.
pub fn finetune(
    params: &mut ModelParams,
    cfg: &FinetuneConfig,
    labeled: &WindowSet,
    val: &WindowSet,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<Vec<EpochSummary>> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::Argument("finetuning needs a nonempty labeled set".into()));
    }
    if labeled.num_classes != params.num_classes {
        return Err(Error::Config(format!(
            "model expects {} classes but the labeled set has {}",
            params.num_classes, labeled.num_classes
        )));
    }
    if !val.is_empty() && val.num_classes != labeled.num_classes {
        return Err(Error::Config(format!(
            "validation set has {} classes but the labeled set has {}",
            val.num_classes, labeled.num_classes
        )));
    }
    params.ensure_compatible(labeled.channel_count, params.num_classes)?;

    params.frozen.encoder = cfg.freeze_encoder;
    params.frozen.recon = true;
    params.frozen.cls = false;
    let mut seed_rng = stream_rng(cfg.seed, 4);
    params.reinit_classifier(seed_rng.gen());
    let mut state = OptimizerState::new(params);
    let mut shuffle_rng = stream_rng(cfg.seed, 5);

    let truth: Vec<usize> = val.labels();
    let mut summaries = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut ce_sum = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let ctx = |e: Error| e.with_context(&format!("epoch {epoch} step {step}"));
            let refs = gather(labeled, chunk);
            let batch3 = stack_windows(&refs)?;
            let labels: Vec<usize> = refs.iter().map(|w| w.label).collect();
            let (loss, _logits, grads, updates) = params
                .classification_gradients(batch3.view(), &labels, seed_rng.gen())
                .map_err(ctx)?;
            params.commit_bn_updates(&updates);
            adam_step(params, &grads, &mut state, cfg.lr).map_err(ctx)?;
            log(&StepRecord {
                epoch,
                step,
                loss_time: None,
                loss_channel: None,
                combined: None,
                ce_loss: Some(loss),
                val_f1: None,
            });
            ce_sum += loss;
            steps += 1;
        }
        let mean_ce = ce_sum / steps as f64;
        let val_f1 = if val.is_empty() {
            None
        } else {
            let preds = crate::eval::predict_labels(params, val, cfg.batch_size)?;
            let (f1, _) = crate::eval::macro_f1(&preds, &truth, labeled.num_classes)?;
            Some(f1)
        };
        log(&StepRecord {
            epoch,
            step: steps,
            loss_time: None,
            loss_channel: None,
            combined: None,
            ce_loss: Some(mean_ce),
            val_f1,
        });
        summaries.push(EpochSummary { mean_ce, val_f1 });
    }
    Ok(summaries)
}
