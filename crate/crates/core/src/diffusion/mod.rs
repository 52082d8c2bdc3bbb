//! DDPM over VQ latents: noise schedule, conditional denoiser, classifier-free
//! guidance, and the ancestral sampler.

mod unet;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{mse, scalar, tensor_f32, Adam, Checkpoint, ParamStore};
use crate::rng::{keyed_rng, normal_vec};
use crate::vq::LatentTensor;

pub use unet::{FeatureModulator, SpadeSite, UNet, UNetConfig, VOCAB_SIZE};

pub const CHECKPOINT_KIND: &str = "diffusion";

/// Token that stands in for the positive ("clean, high quality") prompt.
pub const CLEAN_TOKEN: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    /// Unconditional; embeds to the zero vector.
    Null,
    Token(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// Linear beta schedule from `beta_start` to `beta_end` over `t` steps.
pub fn build_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t == 0 || !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Parameter(format!(
            "schedule needs T > 0 and 0 < beta_start <= beta_end < 1, got T={t}, {beta_start}, {beta_end}"
        )));
    }
    let beta = (0..t)
        .map(|i| {
            if t == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64
            }
        })
        .collect();
    Ok(NoiseSchedule::from_beta(beta))
}

/// Cosine schedule (Nichol & Dhariwal) with betas capped at 0.999.
pub fn build_cosine_schedule(t: usize) -> Result<NoiseSchedule> {
    if t == 0 {
        return Err(Error::Parameter("schedule needs T > 0".into()));
    }
    let s = 0.008;
    let f = |i: usize| ((i as f64 / t as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    let beta = (0..t).map(|i| (1.0 - f(i + 1) / f(i)).clamp(1e-5, 0.999)).collect();
    Ok(NoiseSchedule::from_beta(beta))
}

impl NoiseSchedule {
    fn from_beta(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Self { beta, alpha, alpha_bar }
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::Parameter(format!("timestep {t} outside [0, {})", self.steps())));
        }
        Ok(())
    }

    /// `sqrt(ab_t) z0 + sqrt(1 - ab_t) eps` with one timestep per batch
    /// element of `z0 (B, c, h, w)`.
    pub fn q_sample_batch(&self, z0: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor> {
        let b = z0.dim(0)?;
        if t.len() != b {
            return Err(Error::Dimension(format!("{} timesteps for a batch of {b}", t.len())));
        }
        for &ti in t {
            self.check_t(ti)?;
        }
        let coef = |f: &dyn Fn(f64) -> f64| -> Result<Tensor> {
            let v: Vec<f64> = t.iter().map(|&ti| f(self.alpha_bar[ti])).collect();
            Ok(Tensor::from_vec(v, (b, 1, 1, 1), z0.device())?.to_dtype(z0.dtype())?)
        };
        let a = coef(&|ab| ab.sqrt())?;
        let s = coef(&|ab| (1.0 - ab).sqrt())?;
        Ok((z0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
    }

    pub fn q_sample(&self, z0: &LatentTensor, t: usize, eps: &Tensor) -> Result<LatentTensor> {
        self.check_t(t)?;
        if eps.dims() != z0.values().dims() {
            return Err(Error::Dimension("noise shape differs from latent shape".into()));
        }
        let ab = self.alpha_bar[t];
        let zt = ((z0.values() * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?;
        LatentTensor::new(zt, z0.factor())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    #[serde(rename = "T")]
    pub t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub schedule: ScheduleKind,
    pub unet: UNetConfig,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// Probability of replacing the condition with NULL during training.
    pub cond_dropout: f64,
    /// The sampler clamps its running x0 estimate to `[-x0_clip, x0_clip]`.
    pub x0_clip: f64,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            t: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            schedule: ScheduleKind::Linear,
            unet: UNetConfig::default(),
            lr: 1e-3,
            steps: 4000,
            batch: 32,
            cond_dropout: 0.1,
            x0_clip: 4.0,
            seed: 0,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config("diffusion.cond_dropout must lie in [0, 1]".into()));
        }
        if !(self.x0_clip > 0.0) || self.batch == 0 {
            return Err(Error::Config("diffusion.x0_clip and diffusion.batch must be positive".into()));
        }
        self.schedule().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        match self.schedule {
            ScheduleKind::Linear => build_schedule(self.t, self.beta_start, self.beta_end),
            ScheduleKind::Cosine => build_cosine_schedule(self.t),
        }
    }
}

/// Denoiser weights plus the schedule they were trained with.
pub struct Denoiser {
    cfg: DiffusionConfig,
    store: ParamStore,
    unet: UNet,
    schedule: NoiseSchedule,
}

impl Denoiser {
    pub fn new(cfg: &DiffusionConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(cfg.seed, dtype);
        let unet = UNet::new(&store, &cfg.unet)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            unet,
            schedule: cfg.schedule()?,
        })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Noise estimate for `z_t (B, c, h, w)`; `guidance` feeds the SPADE
    /// sites when present.
    pub fn predict_noise(
        &self,
        z_t: &Tensor,
        t: &[usize],
        cond: Condition,
        guidance: Option<&dyn FeatureModulator>,
    ) -> Result<Tensor> {
        for &ti in t {
            self.schedule.check_t(ti)?;
        }
        self.unet.forward(z_t, t, &[cond], guidance)
    }

    /// Classifier-free guidance: `(1 + s) eps(cond) - s eps(NULL)`.
    ///
    /// With a NULL condition both terms coincide and the unconditional
    /// estimate is returned as is; with `s = 0` the conditional estimate is.
    pub fn cfg_noise(
        &self,
        z_t: &Tensor,
        t: &[usize],
        cond: Condition,
        scale: f64,
        guidance: Option<&dyn FeatureModulator>,
    ) -> Result<Tensor> {
        if !(scale >= 0.0) {
            return Err(Error::Parameter(format!("guidance scale must be >= 0, got {scale}")));
        }
        let eps_c = self.predict_noise(z_t, t, cond, guidance)?;
        if cond == Condition::Null || scale == 0.0 {
            return Ok(eps_c);
        }
        let eps_null = self.predict_noise(z_t, t, Condition::Null, guidance)?;
        Ok(((eps_c * (1.0 + scale))? - (eps_null * scale)?)?)
    }

    /// Ancestral DDPM sampling over every step of the schedule. One latent
    /// is drawn per entry of `seeds`; each image's noise depends only on its
    /// own seed.
    pub fn sample(
        &self,
        latent_hw: (usize, usize),
        seeds: &[u64],
        cond: Condition,
        scale: f64,
        guidance: Option<&dyn FeatureModulator>,
    ) -> Result<Tensor> {
        let b = seeds.len();
        if b == 0 {
            return Err(Error::Parameter("sample needs at least one seed".into()));
        }
        let c = self.cfg.unet.channels;
        let (h, w) = latent_hw;
        let n = c * h * w;
        let noise = |label: &str, counter: u64| -> Result<Tensor> {
            let mut data = Vec::with_capacity(b * n);
            for &s in seeds {
                data.extend(normal_vec(&mut keyed_rng(s, label, counter), n));
            }
            Ok(Tensor::from_vec(data, (b, c, h, w), &Device::Cpu)?.to_dtype(self.dtype())?)
        };
        let mut x = noise("sample-init", 0)?;
        let sch = &self.schedule;
        let clip = self.cfg.x0_clip;
        for t in (0..sch.steps()).rev() {
            // detached so the chain does not keep every step's activations alive
            let eps = self.cfg_noise(&x, &[t], cond, scale, guidance)?.detach();
            let ab = sch.alpha_bar[t];
            let ab_prev = if t > 0 { sch.alpha_bar[t - 1] } else { 1.0 };
            let x0 = ((&x - (eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?.clamp(-clip, clip)?;
            let c0 = ab_prev.sqrt() * sch.beta[t] / (1.0 - ab);
            let ct = sch.alpha[t].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            let mean = ((x0 * c0)? + (&x * ct)?)?;
            x = if t > 0 {
                (mean + (noise("sample-step", t as u64)? * sch.beta[t].sqrt())?)?
            } else {
                mean
            };
            if tensor_f32(&x)?.iter().any(|v| !v.is_finite()) {
                return Err(Error::Sampling { step: t });
            }
        }
        Ok(x)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_store(CHECKPOINT_KIND, &self.store, serde_json::to_value(&self.cfg)?, BTreeMap::new())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let cfg: DiffusionConfig = serde_json::from_value(ck.header.config.clone())?;
        let model = Self::new(&cfg, DType::F32)?;
        ck.restore_into(&model.store)?;
        model.store.set_frozen(true);
        Ok(model)
    }
}

/// A fixed set of (timestep, noise) draws for measuring epsilon-prediction
/// loss the same way before and after training.
pub struct ValidationDraw {
    pub z0: Tensor,
    pub t: Vec<usize>,
    pub eps: Tensor,
}

impl ValidationDraw {
    pub fn new(z0: &Tensor, steps: usize, seed: u64) -> Result<Self> {
        use rand::Rng;
        let b = z0.dim(0)?;
        let mut rng = keyed_rng(seed, "validation-draw", 0);
        // stratified timesteps so every part of the schedule is represented
        let t = (0..b).map(|i| (i * steps / b + rng.random_range(0..steps.div_ceil(b))).min(steps - 1)).collect();
        let eps = Tensor::from_vec(normal_vec(&mut rng, z0.elem_count()), z0.dims(), z0.device())?.to_dtype(z0.dtype())?;
        Ok(Self { z0: z0.clone(), t, eps })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainReport {
    pub ema_loss: Vec<f64>,
    pub val_initial: f64,
    pub val_final: f64,
}

/// Epsilon-prediction loss of `model` on a validation draw.
pub fn validation_loss(
    model: &Denoiser,
    draw: &ValidationDraw,
    cond: Condition,
    guidance: Option<&dyn FeatureModulator>,
) -> Result<f64> {
    let b = draw.z0.dim(0)?;
    let mut total = 0.0;
    let chunk = 32;
    for start in (0..b).step_by(chunk) {
        let n = chunk.min(b - start);
        let z0 = draw.z0.narrow(0, start, n)?;
        let eps = draw.eps.narrow(0, start, n)?;
        let t = &draw.t[start..start + n];
        let zt = model.schedule.q_sample_batch(&z0, t, &eps)?;
        let guidance = guidance.map(|g| g as &dyn FeatureModulator);
        let pred = model.unet.forward(&zt, t, &[cond], guidance)?;
        total += scalar(&mse(&pred, &eps)?)? * n as f64;
    }
    Ok(total / b as f64)
}

/// Trains the denoiser on clean latents `(N, c, h, w)`; `val` is a held-out
/// set of clean latents for the before/after loss.
pub fn pretrain_diffusion(latents: &Tensor, val: &Tensor, cfg: &DiffusionConfig) -> Result<(Denoiser, DiffusionTrainReport)> {
    use rand::Rng;
    let n = latents.dim(0)?;
    if n == 0 {
        return Err(Error::Corpus("diffusion pretraining needs latents".into()));
    }
    let model = Denoiser::new(cfg, DType::F32)?;
    model.unet.check_latent(latents)?;
    let draw = ValidationDraw::new(val, cfg.t, cfg.seed)?;
    let val_initial = validation_loss(&model, &draw, Condition::Token(CLEAN_TOKEN), None)?;
    let mut opt = Adam::new(model.store.trainable_vars(), cfg.lr)?;
    let mut ema_loss = Vec::with_capacity(cfg.steps);
    let mut ema = f64::NAN;
    for step in 0..cfg.steps {
        let mut rng = keyed_rng(cfg.seed, "diffusion-batch", step as u64);
        let idx: Vec<u32> = (0..cfg.batch).map(|_| rng.random_range(0..n as u32)).collect();
        let idx_t = Tensor::from_vec(idx, cfg.batch, latents.device())?;
        let z0 = latents.index_select(&idx_t, 0)?;
        let t: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..cfg.t)).collect();
        let cond: Vec<Condition> = (0..cfg.batch)
            .map(|_| {
                if rng.random::<f64>() < cfg.cond_dropout {
                    Condition::Null
                } else {
                    Condition::Token(CLEAN_TOKEN)
                }
            })
            .collect();
        let eps = Tensor::from_vec(normal_vec(&mut rng, z0.elem_count()), z0.dims(), z0.device())?;
        let zt = model.schedule.q_sample_batch(&z0, &t, &eps)?;
        let pred = model.unet.forward(&zt, &t, &cond, None)?;
        let loss = mse(&pred, &eps)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::Training {
                stage: "train-diffusion".into(),
                step,
                detail: format!("loss became {value}"),
            });
        }
        opt.backward_step(&loss)?;
        ema = if step == 0 { value } else { 0.98 * ema + 0.02 * value };
        ema_loss.push(ema);
        if step % 100 == 0 {
            info!("train-diffusion step {step}: loss {value:.4} ema {ema:.4}");
        }
    }
    let val_final = validation_loss(&model, &draw, Condition::Token(CLEAN_TOKEN), None)?;
    model.store.set_frozen(true);
    Ok((
        model,
        DiffusionTrainReport {
            ema_loss,
            val_initial,
            val_final,
        },
    ))
}
