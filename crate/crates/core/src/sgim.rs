//! Structural guidance injection.
//!
//! A small strided encoder turns the latent of the flare-corrupted input
//! into a feature pyramid, one level per denoiser resolution. At every
//! residual block of the frozen denoiser, a pair of convolutions predicts a
//! per-pixel scale and shift from the matching pyramid level and applies
//! them to the block's normalized input:
//!
//! ```text
//! h' = norm(h) * (1 + gamma(Fea_i)) + beta(Fea_i)
//! ```
//!
//! Both convolutions start at zero, so an untrained module leaves the
//! denoiser's output bit-for-bit unchanged.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use log::info;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Condition, Denoiser, FeatureModulator, SpadeSite, UNetConfig, ValidationDraw, CLEAN_TOKEN};
use crate::error::{Error, Result};
use crate::nn::{audit_partition, group_norm, mse, scalar, Adam, Checkpoint, Conv2d, FrozenGuard, ParamPath, ParamStore};
use crate::rng::{keyed_rng, normal_vec};

pub const CHECKPOINT_KIND: &str = "sgim";

/// Groups used when [`modulate`] normalizes a raw feature.
pub const NORM_GROUPS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgimConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// Frozen hashes are re-verified every this many steps.
    pub check_every: usize,
    pub seed: u64,
}

impl Default for SgimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 2000,
            batch: 32,
            check_every: 100,
            seed: 0,
        }
    }
}

/// Multi-scale features of one batch of input latents, finest level first.
#[derive(Clone, Debug)]
pub struct GuidancePyramid {
    pub features: Vec<Tensor>,
}

impl GuidancePyramid {
    pub fn levels(&self) -> usize {
        self.features.len()
    }

    pub fn batch(&self) -> Result<usize> {
        Ok(self.features[0].dim(0)?)
    }

    /// Spatial size of every level.
    pub fn shapes(&self) -> Result<Vec<(usize, usize)>> {
        self.features
            .iter()
            .map(|f| {
                let (_, _, h, w) = f.dims4()?;
                Ok((h, w))
            })
            .collect()
    }

    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            features: self.features.iter().map(|f| f.narrow(0, start, len)).collect::<candle_core::Result<_>>()?,
        })
    }
}

/// The two modulation convolutions of one site.
pub struct SpadeLayer {
    pub gamma: Conv2d,
    pub beta: Conv2d,
}

impl SpadeLayer {
    /// Zero-initialized 3x3 convolutions from `guide_channels` to
    /// `feature_channels`.
    pub fn new(p: &ParamPath, guide_channels: usize, feature_channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Conv2d::zeroed(&p.pp("gamma"), guide_channels, feature_channels, 3)?,
            beta: Conv2d::zeroed(&p.pp("beta"), guide_channels, feature_channels, 3)?,
        })
    }

    /// Scale and shift an already normalized feature.
    pub fn apply(&self, normed: &Tensor, guide: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = normed.dims4()?;
        let (gb, _, gh, gw) = guide.dims4()?;
        if (gh, gw) != (h, w) {
            return Err(Error::Config(format!(
                "guidance level is {gh}x{gw} but the denoiser feature is {h}x{w}"
            )));
        }
        if gb != b && gb != 1 {
            return Err(Error::Dimension(format!("guidance batch {gb} does not match feature batch {b}")));
        }
        let gamma = self.gamma.forward(guide)?;
        let beta = self.beta.forward(guide)?;
        if gamma.dim(1)? != c {
            return Err(Error::Dimension(format!("modulation has {} channels, feature {c}", gamma.dim(1)?)));
        }
        Ok(normed.broadcast_mul(&(gamma + 1.0)?)?.broadcast_add(&beta)?)
    }
}

/// `group_norm(h) * (1 + gamma(fea)) + beta(fea)`.
pub fn modulate(h: &Tensor, fea: &Tensor, layer: &SpadeLayer) -> Result<Tensor> {
    let c = h.dim(1)?;
    layer.apply(&group_norm(h, NORM_GROUPS.min(c))?, fea)
}

struct EncoderLevel {
    conv_a: Conv2d,
    conv_b: Conv2d,
}

pub struct Sgim {
    cfg: SgimConfig,
    unet: UNetConfig,
    store: ParamStore,
    encoder: Vec<EncoderLevel>,
    spade: BTreeMap<String, SpadeLayer>,
}

impl Sgim {
    /// Builds an encoder mirroring the denoiser widths and one zeroed
    /// modulation pair per site.
    pub fn new(cfg: &SgimConfig, unet: &UNetConfig, sites: &[SpadeSite], dtype: DType) -> Result<Self> {
        let store = ParamStore::new(cfg.seed, dtype);
        let root = store.root();
        let mut encoder = Vec::new();
        let mut cin = unet.channels;
        for (i, &w) in unet.widths.iter().enumerate() {
            let p = root.pp(format!("encoder{i}"));
            encoder.push(EncoderLevel {
                conv_a: Conv2d::new(&p.pp("conv_a"), cin, w, 3, if i == 0 { 1 } else { 2 })?,
                conv_b: Conv2d::new(&p.pp("conv_b"), w, w, 3, 1)?,
            });
            cin = w;
        }
        let mut spade = BTreeMap::new();
        for site in sites {
            let Some(&gw) = unet.widths.get(site.level) else {
                return Err(Error::Config(format!("site `{}` sits at missing level {}", site.name, site.level)));
            };
            spade.insert(site.name.clone(), SpadeLayer::new(&root.pp("spade").pp(&site.name), gw, site.channels)?);
        }
        Ok(Self {
            cfg: cfg.clone(),
            unet: unet.clone(),
            store,
            encoder,
            spade,
        })
    }

    pub fn for_denoiser(cfg: &SgimConfig, denoiser: &Denoiser) -> Result<Self> {
        Self::new(cfg, &denoiser.config().unet, &denoiser.unet().spade_sites(), denoiser.dtype())
    }

    pub fn config(&self) -> &SgimConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn spade_layer(&self, site: &str) -> Option<&SpadeLayer> {
        self.spade.get(site)
    }

    /// Feature pyramid of input latents `(B, c, h, w)`.
    pub fn extract_guidance(&self, z_in: &Tensor) -> Result<GuidancePyramid> {
        let (_, c, h, w) = z_in.dims4()?;
        if c != self.unet.channels {
            return Err(Error::Dimension(format!("guidance input has {c} channels, expected {}", self.unet.channels)));
        }
        let m = 1 << (self.encoder.len() - 1);
        if h % m != 0 || w % m != 0 {
            return Err(Error::Config(format!("latent {h}x{w} does not support {} levels", self.encoder.len())));
        }
        let mut x = z_in.clone();
        let mut features = Vec::with_capacity(self.encoder.len());
        for level in &self.encoder {
            x = level.conv_b.forward(&level.conv_a.forward(&x)?.silu()?)?.silu()?;
            features.push(x.clone());
        }
        Ok(GuidancePyramid { features })
    }

    /// Binds a pyramid to the modulation layers for one denoiser call.
    pub fn injection<'a>(&'a self, pyramid: &'a GuidancePyramid) -> Injection<'a> {
        Injection { sgim: self, pyramid }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut extras = BTreeMap::new();
        extras.insert("unet".to_string(), serde_json::to_value(&self.unet)?);
        Checkpoint::from_store(CHECKPOINT_KIND, &self.store, serde_json::to_value(&self.cfg)?, extras)
    }

    pub fn from_checkpoint(ck: &Checkpoint, denoiser: &Denoiser) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let cfg: SgimConfig = serde_json::from_value(ck.header.config.clone())?;
        let unet: UNetConfig = ck.extra("unet")?;
        if unet != denoiser.config().unet {
            return Err(Error::Config("SGIM checkpoint was trained against a different denoiser".into()));
        }
        let model = Self::for_denoiser(&cfg, denoiser)?;
        ck.restore_into(&model.store)?;
        model.store.set_frozen(true);
        Ok(model)
    }
}

pub struct Injection<'a> {
    sgim: &'a Sgim,
    pyramid: &'a GuidancePyramid,
}

impl FeatureModulator for Injection<'_> {
    fn modulate(&self, site: &SpadeSite, h: &Tensor) -> Result<Tensor> {
        let layer = self
            .sgim
            .spade
            .get(&site.name)
            .ok_or_else(|| Error::Config(format!("no modulation layer for site `{}`", site.name)))?;
        let fea = self.pyramid.features.get(site.level).ok_or_else(|| {
            Error::Config(format!(
                "guidance pyramid has {} levels, site `{}` needs level {}",
                self.pyramid.levels(),
                site.name,
                site.level
            ))
        })?;
        layer.apply(h, fea)
    }
}

/// Clean/corrupted latent pairs `(N, c, h, w)` from the frozen VQ encoder.
#[derive(Clone, Debug)]
pub struct LatentPairs {
    pub clean: Tensor,
    pub corrupted: Tensor,
}

impl LatentPairs {
    pub fn len(&self) -> usize {
        self.clean.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgimTrainReport {
    pub ema_loss: Vec<f64>,
    pub val_initial: f64,
    pub val_final: f64,
    pub frozen_hashes: Vec<(String, String)>,
}

/// Guided epsilon-prediction loss on a fixed validation draw; the draw's
/// clean latents are noised and `corrupted` supplies the guidance.
pub fn guided_validation_loss(
    denoiser: &Denoiser,
    sgim: &Sgim,
    draw: &ValidationDraw,
    corrupted: &Tensor,
) -> Result<f64> {
    let b = draw.z0.dim(0)?;
    let mut total = 0.0;
    for start in (0..b).step_by(32) {
        let n = 32.min(b - start);
        let t = &draw.t[start..start + n];
        let eps = draw.eps.narrow(0, start, n)?;
        let zt = denoiser.schedule().q_sample_batch(&draw.z0.narrow(0, start, n)?, t, &eps)?;
        let pyramid = sgim.extract_guidance(&corrupted.narrow(0, start, n)?)?;
        let pred = denoiser.unet().forward(&zt, t, &[Condition::Null], Some(&sgim.injection(&pyramid)))?;
        total += scalar(&mse(&pred, &eps)?)? * n as f64;
    }
    Ok(total / b as f64)
}

/// Trains the guidance encoder and modulation layers against a frozen
/// denoiser, with the denoiser's condition dropout. `frozen` lists every
/// upstream store whose hash must stay fixed (the denoiser is always
/// included).
pub fn train_sgim(
    train: &LatentPairs,
    val: &LatentPairs,
    denoiser: &Denoiser,
    frozen: &[(&str, &ParamStore)],
    cfg: &SgimConfig,
) -> Result<(Sgim, SgimTrainReport)> {
    use rand::Rng;
    let n = train.len();
    if n == 0 || val.is_empty() {
        return Err(Error::Corpus("SGIM training needs training and validation pairs".into()));
    }
    let mut guarded = vec![("denoiser", denoiser.store())];
    guarded.extend(frozen.iter().copied());
    let guard = FrozenGuard::new(&guarded)?;
    let sgim = Sgim::for_denoiser(cfg, denoiser)?;
    let vars = sgim.store.trainable_vars();
    let mut audited = vec![("sgim", &sgim.store)];
    audited.extend(guarded.iter().copied());
    audit_partition(&audited, &vars)?;

    let steps = denoiser.schedule().steps();
    let dropout = denoiser.config().cond_dropout;
    let draw = ValidationDraw::new(&val.clean, steps, cfg.seed)?;
    let val_initial = guided_validation_loss(denoiser, &sgim, &draw, &val.corrupted)?;
    let mut opt = Adam::new(vars, cfg.lr)?;
    let mut ema_loss = Vec::with_capacity(cfg.steps);
    let mut ema = f64::NAN;
    for step in 0..cfg.steps {
        let mut rng = keyed_rng(cfg.seed, "sgim-batch", step as u64);
        let idx: Vec<u32> = (0..cfg.batch).map(|_| rng.random_range(0..n as u32)).collect();
        let idx = Tensor::from_vec(idx, cfg.batch, train.clean.device())?;
        let z0 = train.clean.index_select(&idx, 0)?;
        let z_in = train.corrupted.index_select(&idx, 0)?;
        let t: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..steps)).collect();
        let eps = Tensor::from_vec(normal_vec(&mut rng, z0.elem_count()), z0.dims(), z0.device())?;
        let zt = denoiser.schedule().q_sample_batch(&z0, &t, &eps)?;
        // same condition dropout as the denoiser saw, so both branches of
        // classifier-free guidance learn to use the injected structure
        let cond: Vec<Condition> = (0..cfg.batch)
            .map(|_| {
                if rng.random::<f64>() < dropout {
                    Condition::Null
                } else {
                    Condition::Token(CLEAN_TOKEN)
                }
            })
            .collect();
        let pyramid = sgim.extract_guidance(&z_in)?;
        let pred = denoiser.unet().forward(&zt, &t, &cond, Some(&sgim.injection(&pyramid)))?;
        let loss = mse(&pred, &eps)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::Training {
                stage: "train-sgim".into(),
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
            info!("train-sgim step {step}: loss {value:.4} ema {ema:.4}");
        }
    }
    guard.verify()?;
    let val_final = guided_validation_loss(denoiser, &sgim, &draw, &val.corrupted)?;
    sgim.store.set_frozen(true);
    let report = SgimTrainReport {
        ema_loss,
        val_initial,
        val_final,
        frozen_hashes: guard.hashes(),
    };
    Ok((sgim, report))
}
