//! The network: a pointwise embedding into d_model, sinusoidal positional
//! encoding, pre-norm transformer blocks, and two per-step MLP heads (window
//! reconstruction and, after temporal mean pooling, classification). Forward
//! passes are pure; batch-norm running statistics are returned as explicit
//! updates and committed separately, which keeps gradient checks honest.

pub mod checkpoint;
pub mod layers;

use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::MaskSpec;
use crate::objective::{batch_combined_loss_grad, cross_entropy_grad, LossBreakdown};
use layers::*;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl EncoderConfig {
    /// Reference architecture: width 128, 3 blocks, 4 heads, feed-forward 256,
    /// dropout 0.1.
    pub fn with_max_len(max_len: usize) -> Self {
        Self {
            d_model: 128,
            num_blocks: 3,
            num_heads: 4,
            ff_dim: 256,
            dropout: 0.1,
            max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || self.ff_dim == 0 || self.max_len == 0 {
            return Err(Error::Config(
                "d_model, num_heads, ff_dim, and max_len must be positive".into(),
            ));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Hidden widths of both MLP heads; (256, 128) at the reference width.
    pub fn head_widths(&self) -> (usize, usize) {
        (2 * self.d_model, self.d_model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Eval,
}

/// Parameter groups that can be frozen independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Encoder,
    Recon,
    Cls,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl TensorKind {
    /// Running statistics are state, not parameters; the optimizer skips them.
    pub fn trainable(&self) -> bool {
        !matches!(self, TensorKind::RunningMean | TensorKind::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: Norm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
}

/// Three linear layers with batch norm, ReLU, and dropout between them.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead {
    pub l1: Linear,
    pub bn1: BatchNorm,
    pub l2: Linear,
    pub bn2: BatchNorm,
    pub l3: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FrozenFlags {
    pub encoder: bool,
    pub recon: bool,
    pub cls: bool,
}

impl FrozenFlags {
    pub fn is_frozen(&self, group: Group) -> bool {
        match group {
            Group::Encoder => self.encoder,
            Group::Recon => self.recon,
            Group::Cls => self.cls,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cfg: EncoderConfig,
    pub input_channels: usize,
    pub num_classes: usize,
    pub embed: Linear,
    pub blocks: Vec<Block>,
    pub recon: MlpHead,
    pub cls: MlpHead,
    pub frozen: FrozenFlags,
}

pub struct TensorRef<'a> {
    pub name: String,
    pub group: Group,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub group: Group,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

/// Per-layer batch-norm statistics refreshed by one training step, keyed by
/// the layer's tensor name prefix.
#[derive(Debug, Clone, Default)]
pub struct BnUpdates(pub Vec<(String, Array1<f64>, Array1<f64>)>);

fn uniform_fan_in(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let bound = 1.0 / (cols as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..bound))
}

fn linear_init(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Linear {
    Linear {
        w: uniform_fan_in(out_dim, in_dim, rng),
        b: Array1::zeros(out_dim),
    }
}

fn norm_init(dim: usize) -> Norm {
    Norm {
        gamma: Array1::ones(dim),
        beta: Array1::zeros(dim),
    }
}

fn batch_norm_init(dim: usize) -> BatchNorm {
    BatchNorm {
        gamma: Array1::ones(dim),
        beta: Array1::zeros(dim),
        running_mean: Array1::zeros(dim),
        running_var: Array1::ones(dim),
    }
}

fn head_init(in_dim: usize, h1: usize, h2: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> MlpHead {
    MlpHead {
        l1: linear_init(h1, in_dim, rng),
        bn1: batch_norm_init(h1),
        l2: linear_init(h2, h1, rng),
        bn2: batch_norm_init(h2),
        l3: linear_init(out_dim, h2, rng),
    }
}

/// Scaled-uniform fan-in initialization, deterministic in the seed. Biases
/// start at zero, norm scales at one, running stats at (0, 1).
pub fn init_params(
    cfg: &EncoderConfig,
    input_channels: usize,
    num_classes: usize,
    seed: u64,
) -> Result<ModelParams> {
    cfg.validate()?;
    if input_channels == 0 || num_classes == 0 {
        return Err(Error::Config(
            "input_channels and num_classes must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let (h1, h2) = cfg.head_widths();
    let embed = linear_init(d, input_channels, &mut rng);
    let blocks = (0..cfg.num_blocks)
        .map(|_| Block {
            ln1: norm_init(d),
            wq: linear_init(d, d, &mut rng),
            wk: linear_init(d, d, &mut rng),
            wv: linear_init(d, d, &mut rng),
            wo: linear_init(d, d, &mut rng),
            ln2: norm_init(d),
            ff1: linear_init(cfg.ff_dim, d, &mut rng),
            ff2: linear_init(d, cfg.ff_dim, &mut rng),
        })
        .collect();
    let recon = head_init(d, h1, h2, input_channels, &mut rng);
    let cls = head_init(d, h1, h2, num_classes, &mut rng);
    Ok(ModelParams {
        cfg: *cfg,
        input_channels,
        num_classes,
        embed,
        blocks,
        recon,
        cls,
        frozen: FrozenFlags::default(),
    })
}

impl ModelParams {
    /// Read-only traversal of every tensor in a stable order.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        macro_rules! t {
            ($out:ident, $name:expr, $group:expr, $kind:expr, $arr:expr) => {
                $out.push(TensorRef {
                    name: $name,
                    group: $group,
                    kind: $kind,
                    shape: $arr.shape().to_vec(),
                    data: $arr.as_slice().expect("tensor is standard layout"),
                });
            };
        }
        let mut out = Vec::new();
        t!(out, "embed.w".into(), Group::Encoder, TensorKind::Weight, self.embed.w);
        t!(out, "embed.b".into(), Group::Encoder, TensorKind::Bias, self.embed.b);
        for (i, blk) in self.blocks.iter().enumerate() {
            t!(out, format!("block{i}.ln1.gamma"), Group::Encoder, TensorKind::Gamma, blk.ln1.gamma);
            t!(out, format!("block{i}.ln1.beta"), Group::Encoder, TensorKind::Beta, blk.ln1.beta);
            for (nm, lin) in [("wq", &blk.wq), ("wk", &blk.wk), ("wv", &blk.wv), ("wo", &blk.wo), ("ff1", &blk.ff1), ("ff2", &blk.ff2)] {
                t!(out, format!("block{i}.{nm}.w"), Group::Encoder, TensorKind::Weight, lin.w);
                t!(out, format!("block{i}.{nm}.b"), Group::Encoder, TensorKind::Bias, lin.b);
            }
            t!(out, format!("block{i}.ln2.gamma"), Group::Encoder, TensorKind::Gamma, blk.ln2.gamma);
            t!(out, format!("block{i}.ln2.beta"), Group::Encoder, TensorKind::Beta, blk.ln2.beta);
        }
        for (prefix, group, head) in [("recon", Group::Recon, &self.recon), ("cls", Group::Cls, &self.cls)] {
            t!(out, format!("{prefix}.l1.w"), group, TensorKind::Weight, head.l1.w);
            t!(out, format!("{prefix}.l1.b"), group, TensorKind::Bias, head.l1.b);
            t!(out, format!("{prefix}.bn1.gamma"), group, TensorKind::Gamma, head.bn1.gamma);
            t!(out, format!("{prefix}.bn1.beta"), group, TensorKind::Beta, head.bn1.beta);
            t!(out, format!("{prefix}.bn1.running_mean"), group, TensorKind::RunningMean, head.bn1.running_mean);
            t!(out, format!("{prefix}.bn1.running_var"), group, TensorKind::RunningVar, head.bn1.running_var);
            t!(out, format!("{prefix}.l2.w"), group, TensorKind::Weight, head.l2.w);
            t!(out, format!("{prefix}.l2.b"), group, TensorKind::Bias, head.l2.b);
            t!(out, format!("{prefix}.bn2.gamma"), group, TensorKind::Gamma, head.bn2.gamma);
            t!(out, format!("{prefix}.bn2.beta"), group, TensorKind::Beta, head.bn2.beta);
            t!(out, format!("{prefix}.bn2.running_mean"), group, TensorKind::RunningMean, head.bn2.running_mean);
            t!(out, format!("{prefix}.bn2.running_var"), group, TensorKind::RunningVar, head.bn2.running_var);
            t!(out, format!("{prefix}.l3.w"), group, TensorKind::Weight, head.l3.w);
            t!(out, format!("{prefix}.l3.b"), group, TensorKind::Bias, head.l3.b);
        }
        out
    }

    /// Mutable traversal; same order as `tensors`.
    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        macro_rules! t {
            ($out:ident, $name:expr, $group:expr, $kind:expr, $arr:expr) => {
                $out.push(TensorMut {
                    name: $name,
                    group: $group,
                    kind: $kind,
                    shape: $arr.shape().to_vec(),
                    data: $arr.as_slice_mut().expect("tensor is standard layout"),
                });
            };
        }
        let mut out = Vec::new();
        t!(out, "embed.w".into(), Group::Encoder, TensorKind::Weight, self.embed.w);
        t!(out, "embed.b".into(), Group::Encoder, TensorKind::Bias, self.embed.b);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            t!(out, format!("block{i}.ln1.gamma"), Group::Encoder, TensorKind::Gamma, blk.ln1.gamma);
            t!(out, format!("block{i}.ln1.beta"), Group::Encoder, TensorKind::Beta, blk.ln1.beta);
            for (nm, lin) in [("wq", &mut blk.wq), ("wk", &mut blk.wk), ("wv", &mut blk.wv), ("wo", &mut blk.wo), ("ff1", &mut blk.ff1), ("ff2", &mut blk.ff2)] {
                t!(out, format!("block{i}.{nm}.w"), Group::Encoder, TensorKind::Weight, lin.w);
                t!(out, format!("block{i}.{nm}.b"), Group::Encoder, TensorKind::Bias, lin.b);
            }
            t!(out, format!("block{i}.ln2.gamma"), Group::Encoder, TensorKind::Gamma, blk.ln2.gamma);
            t!(out, format!("block{i}.ln2.beta"), Group::Encoder, TensorKind::Beta, blk.ln2.beta);
        }
        for (prefix, group, head) in [("recon", Group::Recon, &mut self.recon), ("cls", Group::Cls, &mut self.cls)] {
            t!(out, format!("{prefix}.l1.w"), group, TensorKind::Weight, head.l1.w);
            t!(out, format!("{prefix}.l1.b"), group, TensorKind::Bias, head.l1.b);
            t!(out, format!("{prefix}.bn1.gamma"), group, TensorKind::Gamma, head.bn1.gamma);
            t!(out, format!("{prefix}.bn1.beta"), group, TensorKind::Beta, head.bn1.beta);
            t!(out, format!("{prefix}.bn1.running_mean"), group, TensorKind::RunningMean, head.bn1.running_mean);
            t!(out, format!("{prefix}.bn1.running_var"), group, TensorKind::RunningVar, head.bn1.running_var);
            t!(out, format!("{prefix}.l2.w"), group, TensorKind::Weight, head.l2.w);
            t!(out, format!("{prefix}.l2.b"), group, TensorKind::Bias, head.l2.b);
            t!(out, format!("{prefix}.bn2.gamma"), group, TensorKind::Gamma, head.bn2.gamma);
            t!(out, format!("{prefix}.bn2.beta"), group, TensorKind::Beta, head.bn2.beta);
            t!(out, format!("{prefix}.bn2.running_mean"), group, TensorKind::RunningMean, head.bn2.running_mean);
            t!(out, format!("{prefix}.bn2.running_var"), group, TensorKind::RunningVar, head.bn2.running_var);
            t!(out, format!("{prefix}.l3.w"), group, TensorKind::Weight, head.l3.w);
            t!(out, format!("{prefix}.l3.b"), group, TensorKind::Bias, head.l3.b);
        }
        out
    }

    /// A same-shaped parameter set with every value zeroed; used as a
    /// gradient accumulator.
    pub fn zeros_like(&self) -> ModelParams {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data.fill(0.0);
        }
        out
    }

    /// Errors when the model was built for different data dimensions,
    /// naming the offending array.
    pub fn ensure_compatible(&self, input_channels: usize, num_classes: usize) -> Result<()> {
        if self.input_channels != input_channels {
            return Err(Error::Format(format!(
                "embed.w expects {} input channels but the data has {}",
                self.input_channels, input_channels
            )));
        }
        if self.num_classes != num_classes {
            return Err(Error::Format(format!(
                "cls.l3.w expects {} classes but the data has {}",
                self.num_classes, num_classes
            )));
        }
        Ok(())
    }

    /// Commits refreshed batch-norm running statistics, skipping frozen groups.
    pub fn commit_bn_updates(&mut self, updates: &BnUpdates) {
        for (prefix, mean, var) in &updates.0 {
            let (group, bn) = match prefix.as_str() {
                "recon.bn1" => (Group::Recon, &mut self.recon.bn1),
                "recon.bn2" => (Group::Recon, &mut self.recon.bn2),
                "cls.bn1" => (Group::Cls, &mut self.cls.bn1),
                "cls.bn2" => (Group::Cls, &mut self.cls.bn2),
                other => unreachable!("unknown batch-norm prefix {other}"),
            };
            if self.frozen.is_frozen(group) {
                continue;
            }
            bn.running_mean.assign(mean);
            bn.running_var.assign(var);
        }
    }

    fn zero_frozen(&self, grads: &mut ModelParams) {
        let frozen = self.frozen;
        for t in grads.tensors_mut() {
            if frozen.is_frozen(t.group) {
                t.data.fill(0.0);
            }
        }
    }
}

fn flat(x: Array3<f64>) -> Array2<f64> {
    let (b, n, d) = x.dim();
    x.into_shape((b * n, d)).expect("standard layout")
}

fn unflat(x: Array2<f64>, b: usize, n: usize) -> Array3<f64> {
    let d = x.ncols();
    x.into_shape((b, n, d)).expect("standard layout")
}

fn maybe_dropout(
    x: &Array2<f64>,
    p: f64,
    mode: ForwardMode,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    match mode {
        ForwardMode::Eval => Ok((x.clone(), Array2::ones(x.raw_dim()))),
        ForwardMode::Train if p == 0.0 => Ok((x.clone(), Array2::ones(x.raw_dim()))),
        ForwardMode::Train => match rng.as_deref_mut() {
            Some(r) => Ok(dropout_forward(x, p, r)),
            None => Err(Error::Argument(
                "train-mode forward requires an rng for dropout".into(),
            )),
        },
    }
}

struct BlockCache {
    ln1: NormCache,
    u1: Array2<f64>,
    q3: Array3<f64>,
    k3: Array3<f64>,
    v3: Array3<f64>,
    probs: Vec<Array2<f64>>,
    ctx2: Array2<f64>,
    attn_mask: Array2<f64>,
    ln2: NormCache,
    u2: Array2<f64>,
    z1: Array2<f64>,
    a1: Array2<f64>,
    ff_mask: Array2<f64>,
}

struct EncodeCaches {
    emb_in: Array2<f64>,
    blocks: Vec<BlockCache>,
}

struct HeadCache {
    x_in: Array2<f64>,
    bn1: BatchNormCache,
    r1: Array2<f64>,
    d1_mask: Array2<f64>,
    a1: Array2<f64>,
    bn2: BatchNormCache,
    r2: Array2<f64>,
    d2_mask: Array2<f64>,
    a2: Array2<f64>,
}

/// Forward through one MLP head on a 2D slab (rows, in_dim). Train mode uses
/// batch statistics and returns a cache for the backward pass; eval mode uses
/// running statistics and returns no cache.
fn head_forward(
    head: &MlpHead,
    x: &Array2<f64>,
    p_drop: f64,
    mode: ForwardMode,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<(Array2<f64>, Option<HeadCache>)> {
    let z1 = linear_forward(x, &head.l1.w, &head.l1.b);
    match mode {
        ForwardMode::Eval => {
            let r1 = batch_norm_eval_forward(
                &z1,
                &head.bn1.gamma,
                &head.bn1.beta,
                &head.bn1.running_mean,
                &head.bn1.running_var,
            );
            let a1 = relu_forward(&r1);
            let z2 = linear_forward(&a1, &head.l2.w, &head.l2.b);
            let r2 = batch_norm_eval_forward(
                &z2,
                &head.bn2.gamma,
                &head.bn2.beta,
                &head.bn2.running_mean,
                &head.bn2.running_var,
            );
            let a2 = relu_forward(&r2);
            Ok((linear_forward(&a2, &head.l3.w, &head.l3.b), None))
        }
        ForwardMode::Train => {
            let (r1, bn1) = batch_norm_train_forward(
                &z1,
                &head.bn1.gamma,
                &head.bn1.beta,
                &head.bn1.running_mean,
                &head.bn1.running_var,
            );
            let relu1 = relu_forward(&r1);
            let (a1, d1_mask) = maybe_dropout(&relu1, p_drop, mode, rng)?;
            let z2 = linear_forward(&a1, &head.l2.w, &head.l2.b);
            let (r2, bn2) = batch_norm_train_forward(
                &z2,
                &head.bn2.gamma,
                &head.bn2.beta,
                &head.bn2.running_mean,
                &head.bn2.running_var,
            );
            let relu2 = relu_forward(&r2);
            let (a2, d2_mask) = maybe_dropout(&relu2, p_drop, mode, rng)?;
            let out = linear_forward(&a2, &head.l3.w, &head.l3.b);
            Ok((
                out,
                Some(HeadCache {
                    x_in: x.clone(),
                    bn1,
                    r1,
                    d1_mask,
                    a1,
                    bn2,
                    r2,
                    d2_mask,
                    a2,
                }),
            ))
        }
    }
}

/// Backward through one MLP head. Writes parameter gradients into `gout`
/// (same field layout, zero-initialized) and returns dx.
fn head_backward(
    head: &MlpHead,
    cache: &HeadCache,
    dy: &Array2<f64>,
    gout: &mut MlpHead,
) -> Array2<f64> {
    let (d_a2, dw3, db3) = linear_backward(&cache.a2, &head.l3.w, dy);
    gout.l3.w += &dw3;
    gout.l3.b += &db3;
    let d_relu2 = dropout_backward(&cache.d2_mask, &d_a2);
    let d_r2 = relu_backward(&cache.r2, &d_relu2);
    let (d_z2, dg2, dbeta2) = batch_norm_train_backward(&cache.bn2, &head.bn2.gamma, &d_r2);
    gout.bn2.gamma += &dg2;
    gout.bn2.beta += &dbeta2;
    let (d_a1, dw2, db2) = linear_backward(&cache.a1, &head.l2.w, &d_z2);
    gout.l2.w += &dw2;
    gout.l2.b += &db2;
    let d_relu1 = dropout_backward(&cache.d1_mask, &d_a1);
    let d_r1 = relu_backward(&cache.r1, &d_relu1);
    let (d_z1, dg1, dbeta1) = batch_norm_train_backward(&cache.bn1, &head.bn1.gamma, &d_r1);
    gout.bn1.gamma += &dg1;
    gout.bn1.beta += &dbeta1;
    let (dx, dw1, db1) = linear_backward(&cache.x_in, &head.l1.w, &d_z1);
    gout.l1.w += &dw1;
    gout.l1.b += &db1;
    dx
}

fn head_bn_updates(prefix: &str, cache: &HeadCache, out: &mut BnUpdates) {
    out.0.push((
        format!("{prefix}.bn1"),
        cache.bn1.new_running_mean.clone(),
        cache.bn1.new_running_var.clone(),
    ));
    out.0.push((
        format!("{prefix}.bn2"),
        cache.bn2.new_running_mean.clone(),
        cache.bn2.new_running_var.clone(),
    ));
}

impl ModelParams {
    fn check_batch_shape(&self, dim: (usize, usize, usize), expect_features: bool) -> Result<()> {
        let (_, n, width) = dim;
        let want = if expect_features {
            self.cfg.d_model
        } else {
            self.input_channels
        };
        if width != want {
            return Err(Error::Argument(format!(
                "batch has width {width} but the model expects {want}"
            )));
        }
        if n > self.cfg.max_len {
            return Err(Error::Argument(format!(
                "window length {n} exceeds max_len {}",
                self.cfg.max_len
            )));
        }
        if n == 0 || dim.0 == 0 {
            return Err(Error::Argument("empty batch".into()));
        }
        Ok(())
    }

    fn encode_with_caches(
        &self,
        batch: ArrayView3<f64>,
        mode: ForwardMode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array3<f64>, EncodeCaches)> {
        self.check_batch_shape(batch.dim(), false)?;
        let (b, n, _) = batch.dim();
        let d = self.cfg.d_model;
        let heads = self.cfg.num_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let emb_in = flat(batch.to_owned());
        let mut x2 = linear_forward(&emb_in, &self.embed.w, &self.embed.b);
        let pe = positional_encoding(n, d);
        for w in 0..b {
            let mut rows = x2.slice_mut(s![w * n..(w + 1) * n, ..]);
            rows += &pe;
        }

        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (u1, ln1) = layer_norm_forward(&x2, &blk.ln1.gamma, &blk.ln1.beta);
            let q3 = unflat(linear_forward(&u1, &blk.wq.w, &blk.wq.b), b, n);
            let k3 = unflat(linear_forward(&u1, &blk.wk.w, &blk.wk.b), b, n);
            let v3 = unflat(linear_forward(&u1, &blk.wv.w, &blk.wv.b), b, n);
            let mut ctx3 = Array3::zeros((b, n, d));
            let mut probs = Vec::with_capacity(b * heads);
            for w in 0..b {
                for h in 0..heads {
                    let cols = h * dh..(h + 1) * dh;
                    let qh = q3.slice(s![w, .., cols.clone()]);
                    let kh = k3.slice(s![w, .., cols.clone()]);
                    let vh = v3.slice(s![w, .., cols.clone()]);
                    let scores = qh.dot(&kh.t()).mapv(|v| v * scale);
                    let p = softmax_rows(&scores);
                    let c = p.dot(&vh);
                    ctx3.slice_mut(s![w, .., cols]).assign(&c);
                    probs.push(p);
                }
            }
            let ctx2 = flat(ctx3);
            let attn_out = linear_forward(&ctx2, &blk.wo.w, &blk.wo.b);
            let (attn_dropped, attn_mask) =
                maybe_dropout(&attn_out, self.cfg.dropout, mode, &mut rng)?;
            let h_mid = &x2 + &attn_dropped;

            let (u2, ln2) = layer_norm_forward(&h_mid, &blk.ln2.gamma, &blk.ln2.beta);
            let z1 = linear_forward(&u2, &blk.ff1.w, &blk.ff1.b);
            let a1 = relu_forward(&z1);
            let ff_out = linear_forward(&a1, &blk.ff2.w, &blk.ff2.b);
            let (ff_dropped, ff_mask) =
                maybe_dropout(&ff_out, self.cfg.dropout, mode, &mut rng)?;
            let x_next = &h_mid + &ff_dropped;

            block_caches.push(BlockCache {
                ln1,
                u1,
                q3,
                k3,
                v3,
                probs,
                ctx2,
                attn_mask,
                ln2,
                u2,
                z1,
                a1,
                ff_mask,
            });
            x2 = x_next;
        }
        Ok((
            unflat(x2, b, n),
            EncodeCaches {
                emb_in,
                blocks: block_caches,
            },
        ))
    }

    /// Backward through the transformer blocks and the embedding. Writes
    /// parameter gradients into `grads` and returns the input gradient.
    fn encode_backward(
        &self,
        caches: &EncodeCaches,
        dfeat: Array3<f64>,
        grads: &mut ModelParams,
    ) -> Array3<f64> {
        let (b, n, d) = dfeat.dim();
        let heads = self.cfg.num_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut dx2 = flat(dfeat);
        // blocks unwind in reverse order
        for (blk, gblk, cache) in self
            .blocks
            .iter()
            .zip(grads.blocks.iter_mut())
            .zip(caches.blocks.iter())
            .map(|((a, g), c)| (a, g, c))
            .rev()
        {
            // feed-forward sublayer
            let d_ff_out = dropout_backward(&cache.ff_mask, &dx2);
            let (d_a1, dw_ff2, db_ff2) = linear_backward(&cache.a1, &blk.ff2.w, &d_ff_out);
            gblk.ff2.w += &dw_ff2;
            gblk.ff2.b += &db_ff2;
            let d_z1 = relu_backward(&cache.z1, &d_a1);
            let (d_u2, dw_ff1, db_ff1) = linear_backward(&cache.u2, &blk.ff1.w, &d_z1);
            gblk.ff1.w += &dw_ff1;
            gblk.ff1.b += &db_ff1;
            let (d_h_norm, dg2, dbeta2) = layer_norm_backward(&cache.ln2, &blk.ln2.gamma, &d_u2);
            gblk.ln2.gamma += &dg2;
            gblk.ln2.beta += &dbeta2;
            let dh_mid = &dx2 + &d_h_norm;

            // attention sublayer
            let d_attn_out = dropout_backward(&cache.attn_mask, &dh_mid);
            let (d_ctx2, dw_o, db_o) = linear_backward(&cache.ctx2, &blk.wo.w, &d_attn_out);
            gblk.wo.w += &dw_o;
            gblk.wo.b += &db_o;
            let d_ctx3 = unflat(d_ctx2, b, n);
            let mut dq3 = Array3::zeros((b, n, d));
            let mut dk3 = Array3::zeros((b, n, d));
            let mut dv3 = Array3::zeros((b, n, d));
            for w in 0..b {
                for h in 0..heads {
                    let cols = h * dh..(h + 1) * dh;
                    let p = &cache.probs[w * heads + h];
                    let dch = d_ctx3.slice(s![w, .., cols.clone()]);
                    let qh = cache.q3.slice(s![w, .., cols.clone()]);
                    let kh = cache.k3.slice(s![w, .., cols.clone()]);
                    let vh = cache.v3.slice(s![w, .., cols.clone()]);
                    let dp = dch.dot(&vh.t());
                    let dv = p.t().dot(&dch);
                    let ds = softmax_rows_backward(p, &dp);
                    dq3.slice_mut(s![w, .., cols.clone()])
                        .assign(&ds.dot(&kh).mapv(|v| v * scale));
                    dk3.slice_mut(s![w, .., cols.clone()])
                        .assign(&ds.t().dot(&qh).mapv(|v| v * scale));
                    dv3.slice_mut(s![w, .., cols]).assign(&dv);
                }
            }
            let (d_u1_q, dw_q, db_q) = linear_backward(&cache.u1, &blk.wq.w, &flat(dq3));
            gblk.wq.w += &dw_q;
            gblk.wq.b += &db_q;
            let (d_u1_k, dw_k, db_k) = linear_backward(&cache.u1, &blk.wk.w, &flat(dk3));
            gblk.wk.w += &dw_k;
            gblk.wk.b += &db_k;
            let (d_u1_v, dw_v, db_v) = linear_backward(&cache.u1, &blk.wv.w, &flat(dv3));
            gblk.wv.w += &dw_v;
            gblk.wv.b += &db_v;
            let d_u1 = &d_u1_q + &d_u1_k + &d_u1_v;
            let (d_x_norm, dg1, dbeta1) = layer_norm_backward(&cache.ln1, &blk.ln1.gamma, &d_u1);
            gblk.ln1.gamma += &dg1;
            gblk.ln1.beta += &dbeta1;
            dx2 = &dh_mid + &d_x_norm;
        }
        // positional encoding is additive, so the gradient passes through
        let (d_in, dw_e, db_e) = linear_backward(&caches.emb_in, &self.embed.w, &dx2);
        grads.embed.w += &dw_e;
        grads.embed.b += &db_e;
        unflat(d_in, b, n)
    }

    /// Embeds and encodes a batch of raw windows into per-step features.
    pub fn encode(
        &self,
        batch: ArrayView3<f64>,
        mode: ForwardMode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Array3<f64>> {
        let (out, _) = self.encode_with_caches(batch, mode, rng)?;
        Ok(out)
    }

    /// Per-step reconstruction of the input channels from encoder features.
    pub fn reconstruct(
        &self,
        features: ArrayView3<f64>,
        mode: ForwardMode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Array3<f64>> {
        self.check_batch_shape(features.dim(), true)?;
        let (b, n, _) = features.dim();
        let x2 = flat(features.to_owned());
        let (out, _) = head_forward(&self.recon, &x2, self.cfg.dropout, mode, &mut rng)?;
        Ok(unflat(out, b, n))
    }

    /// Mean-pools features over time and classifies; returns logits (B, A).
    pub fn classify(
        &self,
        features: ArrayView3<f64>,
        mode: ForwardMode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Array2<f64>> {
        self.check_batch_shape(features.dim(), true)?;
        let pooled = features.mean_axis(Axis(1)).expect("nonempty time axis");
        let (logits, _) = head_forward(&self.cls, &pooled, self.cfg.dropout, mode, &mut rng)?;
        Ok(logits)
    }

    /// Encode then reconstruct, end to end.
    pub fn reconstruct_input(
        &self,
        batch: ArrayView3<f64>,
        mode: ForwardMode,
        dropout_seed: u64,
    ) -> Result<Array3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let feats = self.encode(batch, mode, Some(&mut rng))?;
        self.reconstruct(feats.view(), mode, Some(&mut rng))
    }

    /// Encode then classify, end to end. A frozen encoder always runs in
    /// eval mode so its dropout is disabled.
    pub fn classify_input(
        &self,
        batch: ArrayView3<f64>,
        mode: ForwardMode,
        dropout_seed: u64,
    ) -> Result<Array2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let enc_mode = if self.frozen.encoder { ForwardMode::Eval } else { mode };
        let feats = self.encode(batch, enc_mode, Some(&mut rng))?;
        self.classify(feats.view(), mode, Some(&mut rng))
    }

    /// Reconstruction loss of a masked batch against the unmasked original.
    pub fn reconstruction_loss(
        &self,
        raw: ArrayView3<f64>,
        masked: ArrayView3<f64>,
        specs: &[MaskSpec],
        alpha: f64,
        mode: ForwardMode,
        dropout_seed: u64,
    ) -> Result<LossBreakdown> {
        let rec = self.reconstruct_input(masked, mode, dropout_seed)?;
        let (breakdown, _) = batch_combined_loss_grad(raw, rec.view(), specs, alpha)?;
        Ok(breakdown)
    }

    /// One train-mode forward/backward pass of the reconstruction task.
    /// Returns the loss, parameter gradients (zeros for frozen groups), and
    /// the batch-norm updates to commit.
    pub fn reconstruction_gradients(
        &self,
        raw: ArrayView3<f64>,
        masked: ArrayView3<f64>,
        specs: &[MaskSpec],
        alpha: f64,
        dropout_seed: u64,
    ) -> Result<(LossBreakdown, Box<ModelParams>, BnUpdates)> {
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let mut rng_opt = Some(&mut rng);
        let (b, n, _) = masked.dim();
        let (feats, enc_caches) =
            self.encode_with_caches(masked, ForwardMode::Train, rng_opt.as_deref_mut())?;
        let (rec2, head_cache) = head_forward(
            &self.recon,
            &flat(feats),
            self.cfg.dropout,
            ForwardMode::Train,
            &mut rng_opt,
        )?;
        let head_cache = head_cache.expect("train mode returns a cache");
        let rec3 = unflat(rec2, b, n);
        let (breakdown, drec) = batch_combined_loss_grad(raw, rec3.view(), specs, alpha)?;
        if !breakdown.combined.is_finite() {
            return Err(Error::Numeric("non-finite reconstruction loss".into()));
        }
        let mut grads = Box::new(self.zeros_like());
        let dfeat2 = head_backward(&self.recon, &head_cache, &flat(drec), &mut grads.recon);
        self.encode_backward(&enc_caches, unflat(dfeat2, b, n), &mut grads);
        self.zero_frozen(&mut grads);
        let mut updates = BnUpdates::default();
        head_bn_updates("recon", &head_cache, &mut updates);
        Ok((breakdown, grads, updates))
    }

    /// Classification loss (and logits) on labeled windows.
    pub fn classification_loss(
        &self,
        batch: ArrayView3<f64>,
        labels: &[usize],
        mode: ForwardMode,
        dropout_seed: u64,
    ) -> Result<(f64, Array2<f64>)> {
        let logits = self.classify_input(batch, mode, dropout_seed)?;
        let (loss, _) = cross_entropy_grad(logits.view(), labels)?;
        Ok((loss, logits))
    }

    /// One train-mode forward/backward pass of the classification task.
    /// A frozen encoder is run in eval mode and skipped in the backward pass.
    pub fn classification_gradients(
        &self,
        batch: ArrayView3<f64>,
        labels: &[usize],
        dropout_seed: u64,
    ) -> Result<(f64, Array2<f64>, Box<ModelParams>, BnUpdates)> {
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let mut rng_opt = Some(&mut rng);
        let (b, n, _) = batch.dim();
        let enc_mode = if self.frozen.encoder { ForwardMode::Eval } else { ForwardMode::Train };
        let (feats, enc_caches) =
            self.encode_with_caches(batch, enc_mode, rng_opt.as_deref_mut())?;
        let pooled = feats.mean_axis(Axis(1)).expect("nonempty time axis");
        let (logits, head_cache) = head_forward(
            &self.cls,
            &pooled,
            self.cfg.dropout,
            ForwardMode::Train,
            &mut rng_opt,
        )?;
        let head_cache = head_cache.expect("train mode returns a cache");
        let (loss, dlogits) = cross_entropy_grad(logits.view(), labels)?;
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite classification loss".into()));
        }
        let mut grads = Box::new(self.zeros_like());
        let dpooled = head_backward(&self.cls, &head_cache, &dlogits, &mut grads.cls);
        if !self.frozen.encoder {
            // mean-pool backward: spread evenly over the time axis
            let mut dfeat = Array3::zeros((b, n, self.cfg.d_model));
            for w in 0..b {
                for i in 0..n {
                    for (j, v) in dpooled.row(w).iter().enumerate() {
                        dfeat[[w, i, j]] = v / n as f64;
                    }
                }
            }
            self.encode_backward(&enc_caches, dfeat, &mut grads);
        }
        self.zero_frozen(&mut grads);
        let mut updates = BnUpdates::default();
        head_bn_updates("cls", &head_cache, &mut updates);
        Ok((loss, logits, grads, updates))
    }

    /// Reinitializes the classifier head from a seed, leaving the rest of the
    /// model untouched.
    pub fn reinit_classifier(&mut self, seed: u64) {
        let (h1, h2) = self.cfg.head_widths();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.cls = head_init(self.cfg.d_model, h1, h2, self.num_classes, &mut rng);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            num_blocks: 2,
            num_heads: 2,
            ff_dim: 16,
            dropout: 0.1,
            max_len: 6,
        }
    }

    fn tiny_model(seed: u64) -> ModelParams {
        init_params(&tiny_cfg(), 3, 4, seed).unwrap()
    }

    fn rand_batch(b: usize, n: usize, k: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((b, n, k), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn init_is_deterministic() {
        let a = tiny_model(42);
        let b = tiny_model(42);
        for (ta, tb) in a.tensors().iter().zip(b.tensors().iter()) {
            assert_eq!(ta.name, tb.name);
            assert_eq!(ta.data, tb.data);
        }
        let c = tiny_model(43);
        let differs = a
            .tensors()
            .iter()
            .zip(c.tensors().iter())
            .any(|(x, y)| x.data != y.data);
        assert!(differs);
    }

    #[test]
    fn reference_shapes() {
        let cfg = EncoderConfig::with_max_len(100);
        let m = init_params(&cfg, 6, 12, 0).unwrap();
        assert_eq!(m.embed.w.dim(), (128, 6));
        assert_eq!(m.recon.l1.w.dim(), (256, 128));
        assert_eq!(m.recon.l2.w.dim(), (128, 256));
        assert_eq!(m.recon.l3.w.dim(), (6, 128));
        assert_eq!(m.cls.l3.w.dim(), (12, 128));
        assert_eq!(m.blocks.len(), 3);
        assert_eq!(m.blocks[0].ff1.w.dim(), (256, 128));
    }

    #[test]
    fn encode_output_shape() {
        let cfg = EncoderConfig {
            d_model: 128,
            num_blocks: 3,
            num_heads: 4,
            ff_dim: 256,
            dropout: 0.1,
            max_len: 4,
        };
        let m = init_params(&cfg, 2, 3, 1).unwrap();
        let batch = rand_batch(1, 4, 2, 5);
        let out = m.encode(batch.view(), ForwardMode::Eval, None).unwrap();
        assert_eq!(out.dim(), (1, 4, 128));
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encode_has_no_cross_sample_coupling() {
        let m = tiny_model(7);
        let batch = rand_batch(4, 5, 3, 9);
        let out = m.encode(batch.view(), ForwardMode::Eval, None).unwrap();
        // reverse the batch and compare per-sample outputs
        let mut rev = Array3::zeros(batch.raw_dim());
        for w in 0..4 {
            rev.slice_mut(s![w, .., ..]).assign(&batch.slice(s![3 - w, .., ..]));
        }
        let out_rev = m.encode(rev.view(), ForwardMode::Eval, None).unwrap();
        for w in 0..4 {
            assert_eq!(out.slice(s![w, .., ..]), out_rev.slice(s![3 - w, .., ..]));
        }
    }

    #[test]
    fn zero_input_encodes_the_positional_signal() {
        // With no blocks and zero-initialized embed bias, the encoder output
        // of an all-zero window is exactly the positional encoding table.
        let cfg = EncoderConfig {
            d_model: 8,
            num_blocks: 0,
            num_heads: 2,
            ff_dim: 16,
            dropout: 0.0,
            max_len: 5,
        };
        let m = init_params(&cfg, 3, 2, 3).unwrap();
        let batch = Array3::zeros((2, 5, 3));
        let out = m.encode(batch.view(), ForwardMode::Eval, None).unwrap();
        let pe = positional_encoding(5, 8);
        for w in 0..2 {
            assert_eq!(out.slice(s![w, .., ..]), pe.view());
        }
    }

    #[test]
    fn reconstruct_shapes_and_determinism() {
        let m = tiny_model(11);
        let feats = rand_batch(3, 5, 8, 12);
        let a = m.reconstruct(feats.view(), ForwardMode::Eval, None).unwrap();
        assert_eq!(a.dim(), (3, 5, 3));
        let b = m.reconstruct(feats.view(), ForwardMode::Eval, None).unwrap();
        assert_eq!(a, b);
        // train mode replays identically under the same seed
        let mut r1 = ChaCha8Rng::seed_from_u64(99);
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        let t1 = m.reconstruct(feats.view(), ForwardMode::Train, Some(&mut r1)).unwrap();
        let t2 = m.reconstruct(feats.view(), ForwardMode::Train, Some(&mut r2)).unwrap();
        assert_eq!(t1, t2);
        // and differs across seeds
        let mut r3 = ChaCha8Rng::seed_from_u64(100);
        let t3 = m.reconstruct(feats.view(), ForwardMode::Train, Some(&mut r3)).unwrap();
        assert_ne!(t1, t3);
    }

    #[test]
    fn train_mode_without_rng_is_an_error() {
        let m = tiny_model(11);
        let feats = rand_batch(2, 4, 8, 13);
        assert!(matches!(
            m.reconstruct(feats.view(), ForwardMode::Train, None),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn classify_shape_and_per_sample_independence() {
        let m = tiny_model(17);
        let feats = rand_batch(2, 5, 8, 18);
        let logits = m.classify(feats.view(), ForwardMode::Eval, None).unwrap();
        assert_eq!(logits.dim(), (2, 4));
        // duplicating a window duplicates its logits
        let mut dup = Array3::zeros((3, 5, 8));
        dup.slice_mut(s![0, .., ..]).assign(&feats.slice(s![0, .., ..]));
        dup.slice_mut(s![1, .., ..]).assign(&feats.slice(s![1, .., ..]));
        dup.slice_mut(s![2, .., ..]).assign(&feats.slice(s![0, .., ..]));
        let logits_dup = m.classify(dup.view(), ForwardMode::Eval, None).unwrap();
        assert_eq!(logits_dup.row(0), logits_dup.row(2));
        assert_eq!(logits_dup.row(0), logits.row(0));
    }

    #[test]
    fn constant_features_pool_to_themselves() {
        let m = tiny_model(19);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let vector = Array1::from_shape_simple_fn(8, || rng.gen_range(-1.0..1.0));
        let mut const_feats = Array3::zeros((1, 5, 8));
        for i in 0..5 {
            const_feats.slice_mut(s![0, i, ..]).assign(&vector);
        }
        let mut single = Array3::zeros((1, 1, 8));
        single.slice_mut(s![0, 0, ..]).assign(&vector);
        let a = m.classify(const_feats.view(), ForwardMode::Eval, None).unwrap();
        let b = m.classify(single.view(), ForwardMode::Eval, None).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn specs_for(b: usize) -> Vec<MaskSpec> {
        let mut out = Vec::new();
        for w in 0..b {
            let t: BTreeSet<usize> = if w % 2 == 0 { BTreeSet::from([0, 2]) } else { BTreeSet::from([1]) };
            let c: BTreeSet<usize> = if w % 2 == 0 { BTreeSet::from([1]) } else { BTreeSet::new() };
            out.push(MaskSpec::new(t, c));
        }
        out
    }

    /// Central finite differences over a sample of coordinates.
    fn check_model_grads(
        model: &ModelParams,
        analytic: &ModelParams,
        loss_of: impl Fn(&ModelParams) -> f64,
        coords_per_tensor: usize,
        tol: f64,
    ) {
        let eps = 1e-4;
        let mut probe = model.clone();
        let names: Vec<(String, usize, bool)> = model
            .tensors()
            .iter()
            .map(|t| (t.name.clone(), t.data.len(), t.kind.trainable()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(777);
        for (ti, (name, len, trainable)) in names.iter().enumerate() {
            if !trainable {
                continue;
            }
            for _ in 0..coords_per_tensor {
                let ei = rng.gen_range(0..*len);
                let orig = probe.tensors()[ti].data[ei];
                probe.tensors_mut()[ti].data[ei] = orig + eps;
                let up = loss_of(&probe);
                probe.tensors_mut()[ti].data[ei] = orig - eps;
                let down = loss_of(&probe);
                probe.tensors_mut()[ti].data[ei] = orig;
                let fd = (up - down) / (2.0 * eps);
                let a = analytic.tensors()[ti].data[ei];
                let denom = (fd.abs() + a.abs()).max(1e-6);
                assert!(
                    ((fd - a) / denom).abs() < tol,
                    "{name}[{ei}]: fd {fd} vs analytic {a}"
                );
            }
        }
    }

    #[test]
    fn reconstruction_gradients_match_finite_differences() {
        let model = tiny_model(23);
        let raw = rand_batch(2, 5, 3, 24);
        let masked = rand_batch(2, 5, 3, 25);
        let specs = specs_for(2);
        let (_, grads, _) = model
            .reconstruction_gradients(raw.view(), masked.view(), &specs, 0.4, 555)
            .unwrap();
        let loss_of = |p: &ModelParams| {
            p.reconstruction_loss(raw.view(), masked.view(), &specs, 0.4, ForwardMode::Train, 555)
                .unwrap()
                .combined
        };
        check_model_grads(&model, &grads, loss_of, 3, 1e-3);
    }

    #[test]
    fn classification_gradients_match_finite_differences() {
        let model = tiny_model(29);
        let batch = rand_batch(3, 5, 3, 30);
        let labels = vec![1usize, 0, 3];
        let (_, _, grads, _) = model
            .classification_gradients(batch.view(), &labels, 556)
            .unwrap();
        let loss_of = |p: &ModelParams| {
            p.classification_loss(batch.view(), &labels, ForwardMode::Train, 556)
                .unwrap()
                .0
        };
        check_model_grads(&model, &grads, loss_of, 3, 1e-3);
    }

    #[test]
    fn classifier_is_untouched_by_reconstruction_loss() {
        let model = tiny_model(31);
        let raw = rand_batch(2, 4, 3, 32);
        let masked = rand_batch(2, 4, 3, 33);
        let (_, grads, _) = model
            .reconstruction_gradients(raw.view(), masked.view(), &specs_for(2), 0.5, 1)
            .unwrap();
        for t in grads.tensors() {
            if t.group == Group::Cls {
                assert!(t.data.iter().all(|&v| v == 0.0), "{} nonzero", t.name);
            }
        }
    }

    #[test]
    fn frozen_encoder_gets_zero_gradients() {
        let mut model = tiny_model(37);
        model.frozen.encoder = true;
        let batch = rand_batch(2, 4, 3, 38);
        let (_, _, grads, _) = model
            .classification_gradients(batch.view(), &[0, 2], 2)
            .unwrap();
        for t in grads.tensors() {
            match t.group {
                Group::Encoder => assert!(t.data.iter().all(|&v| v == 0.0), "{}", t.name),
                Group::Cls => {}
                Group::Recon => assert!(t.data.iter().all(|&v| v == 0.0)),
            }
        }
        // classifier still learns
        let cls_nonzero = grads
            .tensors()
            .iter()
            .any(|t| t.group == Group::Cls && t.data.iter().any(|&v| v != 0.0));
        assert!(cls_nonzero);
    }

    #[test]
    fn non_finite_loss_is_a_numeric_error() {
        let mut model = tiny_model(41);
        model.recon.l3.b[0] = f64::NAN;
        let raw = rand_batch(1, 4, 3, 42);
        let err = model
            .reconstruction_gradients(raw.view(), raw.view(), &specs_for(1), 0.5, 3)
            .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn bn_updates_move_running_stats() {
        let mut model = tiny_model(43);
        let before = model.recon.bn1.running_mean.clone();
        let raw = rand_batch(2, 4, 3, 44);
        let masked = rand_batch(2, 4, 3, 45);
        let (_, _, updates) = model
            .reconstruction_gradients(raw.view(), masked.view(), &specs_for(2), 0.5, 4)
            .unwrap();
        model.commit_bn_updates(&updates);
        assert_ne!(model.recon.bn1.running_mean, before);
        // frozen recon head refuses the commit
        let frozen_snapshot = model.recon.bn1.running_mean.clone();
        model.frozen.recon = true;
        let (_, _, updates) = model
            .reconstruction_gradients(raw.view(), masked.view(), &specs_for(2), 0.5, 5)
            .unwrap();
        model.commit_bn_updates(&updates);
        assert_eq!(model.recon.bn1.running_mean, frozen_snapshot);
    }

    #[test]
    fn reinit_classifier_changes_only_the_classifier() {
        let mut model = tiny_model(47);
        let encoder_before = model.embed.w.clone();
        let recon_before = model.recon.l1.w.clone();
        let cls_before = model.cls.l1.w.clone();
        model.reinit_classifier(1234);
        assert_eq!(model.embed.w, encoder_before);
        assert_eq!(model.recon.l1.w, recon_before);
        assert_ne!(model.cls.l1.w, cls_before);
        // and is itself deterministic
        let mut model2 = tiny_model(47);
        model2.reinit_classifier(1234);
        assert_eq!(model.cls.l1.w, model2.cls.l1.w);
    }

    #[test]
    fn mismatched_width_is_an_argument_error() {
        let m = tiny_model(53);
        let batch = rand_batch(1, 4, 5, 54);
        assert!(matches!(
            m.encode(batch.view(), ForwardMode::Eval, None),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn compatibility_check_names_the_array() {
        let m = tiny_model(59);
        let err = m.ensure_compatible(9, 4).unwrap_err();
        assert!(err.to_string().contains("embed.w"), "{err}");
        let err = m.ensure_compatible(3, 7).unwrap_err();
        assert!(err.to_string().contains("cls.l3.w"), "{err}");
        assert!(m.ensure_compatible(3, 4).is_ok());
    }
}
