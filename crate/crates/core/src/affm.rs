//! Adaptive feature fusion.
//!
//! Concatenates the VQ encoder features of the flare-corrupted input with
//! the VQ decoder features of the restored latent, refines them with plain
//! convolutions and residual-in-residual dense blocks, lets every position
//! attend to the others under the luminance attention mask, and predicts a
//! pixel-space correction to the decoded restoration:
//!
//! ```text
//! out = clip(D_VQ(z_0) + head(attn(RRDB^n(conv^m([enc, dec])))), 0, 1)
//! ```
//!
//! The head's last convolution starts at zero, so an untrained module
//! returns the plain decode.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, D};
use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    audit_partition, from_tokens, l1, leaky_relu, scalar, to_tokens, Adam, Checkpoint, Conv2d, FrozenGuard, Init,
    Linear, ParamPath, ParamStore,
};
use crate::rng::keyed_rng;

pub const CHECKPOINT_KIND: &str = "affm";

/// Value used in place of minus infinity by the additive mask variant.
const MASKED_SCORE: f64 = -1e4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// Plain convolutions after concatenation.
    pub m: usize,
    /// Residual-in-residual dense blocks.
    pub n: usize,
    pub attention_heads: usize,
    pub attention_layers: usize,
    pub width: usize,
    /// Growth channels inside the dense blocks.
    pub growth: usize,
    /// Mask scores by adding -inf at zero-mask keys instead of multiplying.
    pub additive_mask: bool,
    /// Use the luminance mask to steer attention and the fidelity loss.
    /// Turning it off gives the unguided ablation.
    pub lgp_guidance: bool,
    /// Luminance threshold for the flare-free mask.
    pub threshold: f32,
    /// Weight of the flare-free fidelity term.
    pub lambda: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub check_every: usize,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            m: 2,
            n: 2,
            attention_heads: 1,
            attention_layers: 1,
            width: 64,
            growth: 32,
            additive_mask: false,
            lgp_guidance: true,
            threshold: crate::lgp::DEFAULT_THRESHOLD,
            lambda: 1.0,
            lr: 1e-3,
            steps: 2000,
            batch: 16,
            check_every: 100,
            seed: 0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::Config("affm.m and affm.n must be at least 1".into()));
        }
        if self.attention_heads == 0 || self.width % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "affm.width {} must split evenly into {} heads",
                self.width, self.attention_heads
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("affm.threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if self.growth == 0 || self.batch == 0 || self.lambda < 0.0 {
            return Err(Error::Config("affm.growth and affm.batch must be positive, affm.lambda >= 0".into()));
        }
        Ok(())
    }
}

/// `softmax(mask(Q K^T / sqrt(d))) V` for `q (B, Nq, d)`, `k (B, Nk, d)`,
/// `v (B, Nk, dv)` and an optional mask broadcastable to `(B, Nq, Nk)`.
///
/// The default multiplies the scaled scores by the mask; `additive` instead
/// sends scores at zero-mask entries to a large negative value.
pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>, additive: bool) -> Result<Tensor> {
    let (b, nq, d) = q.dims3()?;
    let nk = k.dim(1)?;
    if k.dims() != [b, nk, d] || v.rank() != 3 || v.dim(0)? != b || v.dim(1)? != nk {
        return Err(Error::Dimension(format!(
            "attention operands disagree: q {:?}, k {:?}, v {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    let scores = (q.matmul(&k.t()?)? / (d as f64).sqrt())?;
    let scores = match mask {
        None => scores,
        Some(m) => {
            let m = m
                .broadcast_as((b, nq, nk))
                .map_err(|_| Error::Dimension(format!("mask {:?} does not fit {nq}x{nk} scores", m.dims())))?;
            let m = m.to_dtype(scores.dtype())?;
            if additive {
                let blocked = m.eq(0.0)?;
                blocked.where_cond(&Tensor::full(MASKED_SCORE, (b, nq, nk), q.device())?.to_dtype(scores.dtype())?, &scores)?
            } else {
                (scores * m)?
            }
        }
    };
    Ok(candle_nn::ops::softmax(&scores, D::Minus1)?.matmul(v)?)
}

/// Multi-head self-attention with square projections and a residual.
pub struct AttentionLayer {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    heads: usize,
    additive: bool,
}

impl AttentionLayer {
    pub fn new(p: &ParamPath, width: usize, heads: usize, additive: bool) -> Result<Self> {
        Ok(Self {
            wq: Linear::no_bias(&p.pp("wq"), width, width)?,
            wk: Linear::no_bias(&p.pp("wk"), width, width)?,
            wv: Linear::no_bias(&p.pp("wv"), width, width)?,
            heads,
            additive,
        })
    }

    /// Tokens `(B, N, width)` in and out.
    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, n, w) = x.dims3()?;
        let d = w / self.heads;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, n, self.heads, d))?.transpose(1, 2)?.contiguous()?.reshape((b * self.heads, n, d))?)
        };
        let q = split(self.wq.forward(x)?)?;
        let k = split(self.wk.forward(x)?)?;
        let v = split(self.wv.forward(x)?)?;
        let mask = match mask {
            Some(m) if self.heads > 1 => {
                let m = m.broadcast_as((b, n, n))?;
                Some(m.unsqueeze(1)?.broadcast_as((b, self.heads, n, n))?.reshape((b * self.heads, n, n))?)
            }
            Some(m) => Some(m.clone()),
            None => None,
        };
        let y = masked_attention(&q, &k, &v, mask.as_ref(), self.additive)?;
        let y = y.reshape((b, self.heads, n, d))?.transpose(1, 2)?.contiguous()?.reshape((b, n, w))?;
        Ok((x + y)?)
    }
}

struct DenseBlock {
    convs: Vec<Conv2d>,
}

impl DenseBlock {
    fn new(p: &ParamPath, nf: usize, gc: usize) -> Result<Self> {
        let mut convs = Vec::with_capacity(5);
        for i in 0..5 {
            let cin = nf + i * gc;
            let cout = if i == 4 { nf } else { gc };
            convs.push(Conv2d::with_init(
                &p.pp(format!("conv{i}")),
                cin,
                cout,
                3,
                1,
                Init::Kaiming { fan_in: cin * 9, gain: 0.1_f64.sqrt() },
            )?);
        }
        Ok(Self { convs })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut feats = vec![x.clone()];
        for conv in &self.convs[..4] {
            let y = leaky_relu(&conv.forward(&Tensor::cat(&feats, 1)?)?, 0.2)?;
            feats.push(y);
        }
        let out = self.convs[4].forward(&Tensor::cat(&feats, 1)?)?;
        Ok(((out * 0.2)? + x)?)
    }
}

/// Residual-in-residual dense block: three dense blocks and an outer
/// scaled residual.
pub struct Rrdb {
    blocks: Vec<DenseBlock>,
}

impl Rrdb {
    pub fn new(p: &ParamPath, nf: usize, gc: usize) -> Result<Self> {
        Ok(Self {
            blocks: (0..3).map(|i| DenseBlock::new(&p.pp(format!("rdb{i}")), nf, gc)).collect::<Result<_>>()?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        Ok(((h * 0.2)? + x)?)
    }
}

/// Everything the fusion network consumes for one batch.
#[derive(Clone, Debug)]
pub struct FusionInputs {
    /// Encoder tap of the corrupted input, `(B, Ce, h, w)`.
    pub enc: Tensor,
    /// Decoder tap of the restored latent, `(B, Cd, h, w)`.
    pub dec: Tensor,
    /// Decoded restoration `(B, 3, H, W)`.
    pub base: Tensor,
    /// Attention mask rows `(B, 1, N)`; stacked to `(B, N, N)` on use.
    pub mask_rows: Option<Tensor>,
}

impl FusionInputs {
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            enc: self.enc.narrow(0, start, len)?,
            dec: self.dec.narrow(0, start, len)?,
            base: self.base.narrow(0, start, len)?,
            mask_rows: self.mask_rows.as_ref().map(|m| m.narrow(0, start, len)).transpose()?,
        })
    }

    pub fn index_select(&self, idx: &Tensor) -> Result<Self> {
        Ok(Self {
            enc: self.enc.index_select(idx, 0)?,
            dec: self.dec.index_select(idx, 0)?,
            base: self.base.index_select(idx, 0)?,
            mask_rows: self.mask_rows.as_ref().map(|m| m.index_select(idx, 0)).transpose()?,
        })
    }
}

pub struct Affm {
    cfg: FusionConfig,
    store: ParamStore,
    tap_channels: (usize, usize),
    factor: usize,
    convs: Vec<Conv2d>,
    rrdbs: Vec<Rrdb>,
    attention: Vec<AttentionLayer>,
    head: Conv2d,
    head_out: Conv2d,
}

impl Affm {
    /// `tap_channels` are the encoder and decoder tap widths; `factor` is
    /// the VQ downsampling factor the head upsamples by.
    pub fn new(cfg: &FusionConfig, tap_channels: (usize, usize), factor: usize, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(cfg.seed, dtype);
        let root = store.root();
        let w = cfg.width;
        let mut convs = Vec::with_capacity(cfg.m);
        let mut cin = tap_channels.0 + tap_channels.1;
        for i in 0..cfg.m {
            convs.push(Conv2d::new(&root.pp(format!("conv{i}")), cin, w, 3, 1)?);
            cin = w;
        }
        let rrdbs = (0..cfg.n)
            .map(|i| Rrdb::new(&root.pp(format!("rrdb{i}")), w, cfg.growth))
            .collect::<Result<_>>()?;
        let attention = (0..cfg.attention_layers)
            .map(|i| AttentionLayer::new(&root.pp(format!("attn{i}")), w, cfg.attention_heads, cfg.additive_mask))
            .collect::<Result<_>>()?;
        let head = Conv2d::new(&root.pp("head"), w, w, 3, 1)?;
        let head_out = Conv2d::zeroed(&root.pp("head_out"), w, 3 * factor * factor, 3)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            tap_channels,
            factor,
            convs,
            rrdbs,
            attention,
            head,
            head_out,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Unclipped fused output `(B, 3, H, W)`.
    pub fn fuse_raw(&self, inputs: &FusionInputs) -> Result<Tensor> {
        let (b, ce, h, w) = inputs.enc.dims4()?;
        let (bd, cd, hd, wd) = inputs.dec.dims4()?;
        if (bd, hd, wd) != (b, h, w) || (ce, cd) != self.tap_channels {
            return Err(Error::Dimension(format!(
                "taps {:?} and {:?} do not match the fusion network ({} + {} channels)",
                inputs.enc.dims(),
                inputs.dec.dims(),
                self.tap_channels.0,
                self.tap_channels.1
            )));
        }
        let f = self.factor;
        if inputs.base.dims() != [b, 3, h * f, w * f] {
            return Err(Error::Dimension(format!("base image {:?} does not match taps", inputs.base.dims())));
        }
        let mut x = Tensor::cat(&[&inputs.enc, &inputs.dec], 1)?;
        for conv in &self.convs {
            x = leaky_relu(&conv.forward(&x)?, 0.2)?;
        }
        for r in &self.rrdbs {
            x = r.forward(&x)?;
        }
        let mask = match (&inputs.mask_rows, self.cfg.lgp_guidance) {
            (Some(rows), true) => {
                let n = h * w;
                if rows.dims() != [b, 1, n] {
                    return Err(Error::Dimension(format!("mask rows {:?} do not fit {n} tokens", rows.dims())));
                }
                Some(rows.broadcast_as((b, n, n))?)
            }
            _ => None,
        };
        let mut t = to_tokens(&x)?;
        for a in &self.attention {
            t = a.forward(&t, mask.as_ref())?;
        }
        let x = from_tokens(&t, h, w)?;
        let y = self.head_out.forward(&leaky_relu(&self.head.forward(&x)?, 0.2)?)?;
        // depth-to-space: (B, 3 f f, h, w) -> (B, 3, h f, w f)
        let y = y
            .reshape((b, 3, f, f, h, w))?
            .permute((0, 1, 4, 2, 5, 3))?
            .reshape((b, 3, h * f, w * f))?;
        Ok((&inputs.base + y)?)
    }

    /// Fused output clipped to `[0, 1]`.
    pub fn fuse(&self, inputs: &FusionInputs) -> Result<Tensor> {
        Ok(self.fuse_raw(inputs)?.clamp(0.0, 1.0)?)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut extras = BTreeMap::new();
        extras.insert("tap_channels".to_string(), serde_json::json!([self.tap_channels.0, self.tap_channels.1]));
        extras.insert("factor".to_string(), serde_json::json!(self.factor));
        Checkpoint::from_store(CHECKPOINT_KIND, &self.store, serde_json::to_value(&self.cfg)?, extras)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let cfg: FusionConfig = serde_json::from_value(ck.header.config.clone())?;
        let taps: (usize, usize) = ck.extra("tap_channels")?;
        let model = Self::new(&cfg, taps, ck.extra("factor")?, DType::F32)?;
        ck.restore_into(&model.store)?;
        model.store.set_frozen(true);
        Ok(model)
    }
}

/// Precomputed training or validation material for the fusion network.
#[derive(Clone, Debug)]
pub struct FusionPool {
    pub inputs: FusionInputs,
    /// Flare-corrupted input `(B, 3, H, W)`.
    pub x_in: Tensor,
    pub gt: Tensor,
    /// Pixel-level luminance mask `(B, 1, H, W)`, 1 = flare-free.
    pub pixel_mask: Tensor,
}

impl FusionPool {
    pub fn len(&self) -> usize {
        self.x_in.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `L1(out, GT) + lambda * L1(out * mask, x_in * mask)`; the second term
/// is dropped when `guided` is false.
pub fn fusion_loss(out: &Tensor, gt: &Tensor, x_in: &Tensor, mask: &Tensor, lambda: f64, guided: bool) -> Result<Tensor> {
    let base = l1(out, gt)?;
    if !guided || lambda == 0.0 {
        return Ok(base);
    }
    let fidelity = l1(&out.broadcast_mul(mask)?, &x_in.broadcast_mul(mask)?)?;
    Ok((base + (fidelity * lambda)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffmTrainReport {
    pub ema_loss: Vec<f64>,
    /// Mean L1 to ground truth on the validation pool.
    pub val_initial: f64,
    pub val_final: f64,
    pub frozen_hashes: Vec<(String, String)>,
}

fn validation_l1(model: &Affm, pool: &FusionPool) -> Result<f64> {
    let n = pool.len();
    let mut total = 0.0;
    for start in (0..n).step_by(32) {
        let len = 32.min(n - start);
        let out = model.fuse(&pool.inputs.narrow(start, len)?)?;
        total += scalar(&l1(&out, &pool.gt.narrow(0, start, len)?)?)? * len as f64;
    }
    Ok(total / n as f64)
}

/// Trains the fusion network on a precomputed pool while every upstream
/// store in `frozen` stays hash-identical.
pub fn train_affm(
    train: &FusionPool,
    val: &FusionPool,
    frozen: &[(&str, &ParamStore)],
    cfg: &FusionConfig,
) -> Result<(Affm, AffmTrainReport)> {
    use rand::Rng;
    let n = train.len();
    if n == 0 || val.is_empty() {
        return Err(Error::Corpus("AFFM training needs training and validation pools".into()));
    }
    let guard = FrozenGuard::new(frozen)?;
    let (_, ce, _, _) = train.inputs.enc.dims4()?;
    let (_, cd, _, _) = train.inputs.dec.dims4()?;
    let factor = train.x_in.dim(2)? / train.inputs.enc.dim(2)?;
    let model = Affm::new(cfg, (ce, cd), factor, DType::F32)?;
    let vars = model.store.trainable_vars();
    let mut audited = vec![("affm", &model.store)];
    audited.extend(frozen.iter().copied());
    audit_partition(&audited, &vars)?;

    let val_initial = validation_l1(&model, val)?;
    let mut opt = Adam::new(vars, cfg.lr)?;
    let mut ema_loss = Vec::with_capacity(cfg.steps);
    let mut ema = f64::NAN;
    for step in 0..cfg.steps {
        // cosine decay keeps the late steps from bouncing around
        let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
        opt.set_lr(lr);
        let mut rng = keyed_rng(cfg.seed, "affm-batch", step as u64);
        let idx: Vec<u32> = (0..cfg.batch).map(|_| rng.random_range(0..n as u32)).collect();
        let idx = Tensor::from_vec(idx, cfg.batch, train.x_in.device())?;
        let out = model.fuse_raw(&train.inputs.index_select(&idx)?)?;
        let loss = fusion_loss(
            &out,
            &train.gt.index_select(&idx, 0)?,
            &train.x_in.index_select(&idx, 0)?,
            &train.pixel_mask.index_select(&idx, 0)?,
            cfg.lambda,
            cfg.lgp_guidance,
        )?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::Training {
                stage: "train-affm".into(),
                step,
                detail: format!("loss became {value}"),
            });
        }
        opt.backward_step(&loss)?;
        ema = if step == 0 { value } else { 0.98 * ema + 0.02 * value };
        ema_loss.push(ema);
        if (step + 1) % cfg.check_every.max(1) == 0 {
            guard.verify()?;
        }
        if step % 100 == 0 {
            info!("train-affm step {step}: loss {value:.4} ema {ema:.4}");
        }
    }
    guard.verify()?;
    let val_final = validation_l1(&model, val)?;
    model.store.set_frozen(true);
    Ok((
        model,
        AffmTrainReport {
            ema_loss,
            val_initial,
            val_final,
            frozen_hashes: guard.hashes(),
        },
    ))
}
