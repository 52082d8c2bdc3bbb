//! Vector-quantized autoencoder that defines the latent space.
//!
//! Diffusion runs on the continuous encoder output, rescaled to unit
//! variance with a constant measured after pretraining. The codebook is only
//! applied on the decode path. Once pretrained, the model is frozen and every
//! later stage verifies its content hash.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, D};
use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageRgb;
use crate::nn::{
    images_to_tensor, l1, mse, scalar, tensor_f32, tensor_to_images, upsample2x, Adam, Checkpoint, Conv2d, Init,
    ParamPath, ParamStore,
};
use crate::rng::keyed_rng;

pub const CHECKPOINT_KIND: &str = "vq";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqConfig {
    /// Latent channels `c`.
    pub channels: usize,
    /// Spatial downsampling factor `f`, a power of two.
    pub factor: usize,
    /// Width of the latent-resolution blocks; higher resolutions use half of
    /// it per octave, but never fewer than 8 channels.
    pub base_width: usize,
    pub codebook_size: usize,
    pub commitment: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// Steps trained without the quantizer before the codebook is seeded.
    pub warmup_steps: usize,
    /// Unused codes are re-seeded from encoder outputs every this many steps.
    pub restart_every: usize,
    pub seed: u64,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            factor: 4,
            base_width: 64,
            codebook_size: 256,
            commitment: 0.25,
            lr: 2e-3,
            steps: 3000,
            batch: 16,
            warmup_steps: 300,
            restart_every: 100,
            seed: 0,
        }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.factor.is_power_of_two() || self.factor < 2 {
            return Err(Error::Config(format!("vq.factor must be a power of two >= 2, got {}", self.factor)));
        }
        if self.codebook_size < 16 {
            return Err(Error::Config("vq.codebook_size must be at least 16".into()));
        }
        if self.channels == 0 || self.base_width < 8 || self.batch == 0 {
            return Err(Error::Config("vq.channels, vq.base_width and vq.batch must be positive".into()));
        }
        Ok(())
    }

    fn levels(&self) -> usize {
        self.factor.trailing_zeros() as usize
    }

    /// Width at octave `level` (0 = full resolution, `levels()` = latent).
    fn width(&self, level: usize) -> usize {
        (self.base_width >> (self.levels() - level)).max(8)
    }

    /// Channel count of the encoder and decoder feature taps.
    pub fn tap_width(&self) -> usize {
        self.base_width
    }
}

/// A diffusion-domain latent `(c, h_l, w_l)` for one image.
#[derive(Clone, Debug)]
pub struct LatentTensor {
    values: Tensor,
    factor: usize,
}

impl LatentTensor {
    pub fn new(values: Tensor, factor: usize) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::Dimension(format!("latent must be (c, h, w), got {:?}", values.dims())));
        }
        Ok(Self { values, factor })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.dims3().expect("rank checked at construction")
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        tensor_f32(&self.values)
    }

    pub fn is_finite(&self) -> Result<bool> {
        Ok(self.to_vec()?.iter().all(|v| v.is_finite()))
    }
}

struct ResConv {
    conv: Conv2d,
}

impl ResConv {
    fn new(p: &ParamPath, ch: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::with_init(p, ch, ch, 3, 1, Init::Kaiming { fan_in: ch * 9, gain: 0.5 })?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x + self.conv.forward(&x.silu()?)?)?)
    }
}

struct Encoder {
    conv_in: Conv2d,
    downs: Vec<(Conv2d, ResConv)>,
    to_latent: Conv2d,
}

struct Decoder {
    from_latent: Conv2d,
    top: ResConv,
    ups: Vec<(Conv2d, ResConv)>,
    conv_out: Conv2d,
}

pub struct VqAutoencoder {
    cfg: VqConfig,
    store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    codebook: Tensor,
    latent_scale: f64,
}

impl VqAutoencoder {
    pub fn new(cfg: &VqConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(cfg.seed, dtype);
        let root = store.root();
        let levels = cfg.levels();

        let e = root.pp("encoder");
        let conv_in = Conv2d::new(&e.pp("conv_in"), 3, cfg.width(0), 3, 1)?;
        let mut downs = Vec::new();
        for l in 1..=levels {
            let p = e.pp(format!("down{l}"));
            downs.push((
                Conv2d::new(&p.pp("conv"), cfg.width(l - 1), cfg.width(l), 3, 2)?,
                ResConv::new(&p.pp("res"), cfg.width(l))?,
            ));
        }
        let to_latent = Conv2d::new(&e.pp("to_latent"), cfg.width(levels), cfg.channels, 1, 1)?;

        let d = root.pp("decoder");
        let from_latent = Conv2d::new(&d.pp("from_latent"), cfg.channels, cfg.width(levels), 3, 1)?;
        let top = ResConv::new(&d.pp("top"), cfg.width(levels))?;
        let mut ups = Vec::new();
        for l in (0..levels).rev() {
            let p = d.pp(format!("up{l}"));
            ups.push((
                Conv2d::new(&p.pp("conv"), cfg.width(l + 1), cfg.width(l), 3, 1)?,
                ResConv::new(&p.pp("res"), cfg.width(l))?,
            ));
        }
        let conv_out = Conv2d::new(&d.pp("conv_out"), cfg.width(0), 3, 3, 1)?;
        let codebook = root.get("codebook", &[cfg.codebook_size, cfg.channels], Init::Normal(1.0))?;

        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder: Encoder {
                conv_in,
                downs,
                to_latent,
            },
            decoder: Decoder {
                from_latent,
                top,
                ups,
                conv_out,
            },
            codebook,
            latent_scale: 1.0,
        })
    }

    pub fn config(&self) -> &VqConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn factor(&self) -> usize {
        self.cfg.factor
    }

    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    pub fn latent_shape(&self, height: usize, width: usize) -> (usize, usize, usize) {
        (self.cfg.channels, height / self.cfg.factor, width / self.cfg.factor)
    }

    fn check_image_dims(&self, h: usize, w: usize) -> Result<()> {
        if h % self.cfg.factor != 0 || w % self.cfg.factor != 0 {
            return Err(Error::Dimension(format!(
                "{h}x{w} is not divisible by the downsampling factor {}",
                self.cfg.factor
            )));
        }
        Ok(())
    }

    /// Raw (unscaled) encoder output and the last encoder block's features.
    fn encode_raw(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::Dimension(format!("encoder expects 3 channels, got {c}")));
        }
        self.check_image_dims(h, w)?;
        let mut h = self.encoder.conv_in.forward(x)?;
        for (down, res) in &self.encoder.downs {
            h = res.forward(&down.forward(&h.silu()?)?)?;
        }
        let tap = h.silu()?;
        Ok((self.encoder.to_latent.forward(&tap)?, tap))
    }

    /// Diffusion-domain latents `(B, c, h_l, w_l)` and the encoder tap.
    pub fn encode_with_tap(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (z, tap) = self.encode_raw(x)?;
        Ok(((z * self.latent_scale)?, tap))
    }

    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.encode_with_tap(x)?.0)
    }

    pub fn encode(&self, img: &ImageRgb) -> Result<LatentTensor> {
        let x = images_to_tensor(&[img], self.dtype())?;
        LatentTensor::new(self.encode_batch(&x)?.squeeze(0)?, self.cfg.factor)
    }

    /// Nearest-code assignment of unscaled latents. Returns the quantized
    /// tensor and the code index of every latent position.
    pub fn quantize(&self, z: &Tensor) -> Result<(Tensor, Vec<u32>)> {
        let (b, c, h, w) = z.dims4()?;
        if c != self.cfg.channels {
            return Err(Error::Dimension(format!("latent has {c} channels, codebook {}", self.cfg.channels)));
        }
        let flat = z.permute((0, 2, 3, 1))?.reshape((b * h * w, c))?;
        let idx = nearest_codes(&flat.detach(), &self.codebook.detach())?;
        let zq = self
            .codebook
            .index_select(&idx, 0)?
            .reshape((b, h, w, c))?
            .permute((0, 3, 1, 2))?
            .contiguous()?;
        Ok((zq, idx.to_vec1::<u32>()?))
    }

    fn decode_raw(&self, zq: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.decoder.from_latent.forward(zq)?;
        let tap = self.decoder.top.forward(&h.silu()?)?.silu()?;
        let mut h = tap.clone();
        for (conv, res) in &self.decoder.ups {
            h = res.forward(&conv.forward(&upsample2x(&h)?)?)?.silu()?;
        }
        Ok((self.decoder.conv_out.forward(&h)?, tap))
    }

    fn check_latent(&self, z: &Tensor) -> Result<()> {
        let (_, c, _, _) = z.dims4()?;
        if c != self.cfg.channels {
            return Err(Error::Dimension(format!(
                "latent has {c} channels, model expects {}",
                self.cfg.channels
            )));
        }
        Ok(())
    }

    /// Unclipped reconstruction `(B, 3, H, W)` and the decoder tap, from
    /// diffusion-domain latents.
    pub fn decode_with_tap(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_latent(z)?;
        let (zq, _) = self.quantize(&(z / self.latent_scale)?)?;
        self.decode_raw(&zq)
    }

    pub fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.decode_with_tap(z)?.0.clamp(0.0, 1.0)?)
    }

    pub fn decode(&self, z: &LatentTensor) -> Result<ImageRgb> {
        let out = self.decode_batch(&z.values.unsqueeze(0)?)?;
        Ok(tensor_to_images(&out)?.remove(0))
    }

    /// Reconstruction through the continuous latent, bypassing the
    /// quantizer; the differentiable path used for gradient checks.
    pub fn reconstruct_continuous(&self, x: &Tensor) -> Result<Tensor> {
        let (z, _) = self.encode_raw(x)?;
        Ok(self.decoder_from_unscaled(&z)?)
    }

    /// Decoder applied directly to an unscaled latent, no quantization.
    pub fn decoder_from_unscaled(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.decode_raw(z)?.0)
    }

    pub fn encoder_output_unscaled(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.encode_raw(x)?.0)
    }

    /// Fraction of codebook entries selected at least once for `images`.
    pub fn codebook_usage(&self, images: &Tensor) -> Result<f64> {
        let (z, _) = self.encode_raw(images)?;
        let (_, idx) = self.quantize(&z)?;
        let mut used = vec![false; self.cfg.codebook_size];
        for i in idx {
            used[i as usize] = true;
        }
        Ok(used.iter().filter(|&&u| u).count() as f64 / used.len() as f64)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut extras = BTreeMap::new();
        extras.insert("latent_scale".to_string(), serde_json::json!(self.latent_scale));
        Checkpoint::from_store(CHECKPOINT_KIND, &self.store, serde_json::to_value(&self.cfg)?, extras)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let cfg: VqConfig = serde_json::from_value(ck.header.config.clone())?;
        let mut model = Self::new(&cfg, DType::F32)?;
        ck.restore_into(&model.store)?;
        model.latent_scale = ck.extra("latent_scale")?;
        model.store.set_frozen(true);
        Ok(model)
    }
}

fn nearest_codes(flat: &Tensor, codebook: &Tensor) -> Result<Tensor> {
    // |z|^2 - 2 z.e + |e|^2, the |z|^2 term is constant per row
    let cross = flat.matmul(&codebook.t()?)?;
    let e2 = codebook.sqr()?.sum(1)?.unsqueeze(0)?;
    let d = e2.broadcast_sub(&(cross * 2.0)?)?;
    Ok(d.argmin(D::Minus1)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqTrainReport {
    /// Exponential moving average of the reconstruction L1, one per step.
    pub ema_loss: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub codebook_usage: f64,
    pub latent_scale: f64,
}

/// Trains the autoencoder on flare-free images, then measures the latent
/// scale and freezes the model.
pub fn pretrain_vq(images: &[ImageRgb], cfg: &VqConfig) -> Result<(VqAutoencoder, VqTrainReport)> {
    use rand::Rng;
    if images.is_empty() {
        return Err(Error::Corpus("VQ pretraining needs at least one image".into()));
    }
    let model = VqAutoencoder::new(cfg, DType::F32)?;
    let mut opt = Adam::new(model.store.trainable_vars(), cfg.lr)?;
    let codebook_var = model.store.get("codebook").expect("codebook registered");
    let mut usage = vec![0u32; cfg.codebook_size];
    let mut ema_loss = Vec::with_capacity(cfg.steps);
    let mut ema = f64::NAN;
    let mut first = f64::NAN;

    for step in 0..cfg.steps {
        let mut rng = keyed_rng(cfg.seed, "vq-batch", step as u64);
        let batch: Vec<&ImageRgb> = (0..cfg.batch).map(|_| &images[rng.random_range(0..images.len())]).collect();
        let x = images_to_tensor(&batch, DType::F32)?;
        let (z, _) = model.encode_raw(&x)?;

        if step == cfg.warmup_steps {
            seed_codes(&codebook_var, &z, &(0..cfg.codebook_size).collect::<Vec<_>>(), cfg.seed, step)?;
        }
        // the reconstruction term is reported on its own so the curve is
        // comparable across the warmup boundary
        let (loss, recon_term) = if step < cfg.warmup_steps {
            let recon = l1(&model.decode_raw(&z)?.0, &x)?;
            (recon.clone(), recon)
        } else {
            let (zq, idx) = model.quantize(&z)?;
            for i in idx {
                usage[i as usize] += 1;
            }
            let z_st = (&z + (&zq - &z)?.detach())?;
            let recon = model.decode_raw(&z_st)?.0;
            let codebook_loss = mse(&z.detach(), &zq)?;
            let commit = mse(&z, &zq.detach())?;
            let recon = l1(&recon, &x)?;
            (((&recon + codebook_loss)? + (commit * cfg.commitment)?)?, recon)
        };
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::Training {
                stage: "train-vq".into(),
                step,
                detail: format!("loss became {value}"),
            });
        }
        opt.backward_step(&loss)?;

        if step >= cfg.warmup_steps && (step + 1 - cfg.warmup_steps) % cfg.restart_every == 0 {
            let dead: Vec<usize> = usage.iter().enumerate().filter(|(_, &u)| u == 0).map(|(i, _)| i).collect();
            if !dead.is_empty() {
                seed_codes(&codebook_var, &z.detach(), &dead, cfg.seed, step)?;
            }
            usage.iter_mut().for_each(|u| *u = 0);
        }

        let recon_only = scalar(&recon_term)?;
        if step == 0 {
            first = recon_only;
            ema = recon_only;
        } else {
            ema = 0.95 * ema + 0.05 * recon_only;
        }
        ema_loss.push(ema);
        if step % 100 == 0 {
            info!("train-vq step {step}: loss {value:.4} recon-ema {ema:.4}");
        }
    }

    let mut model = model;
    model.latent_scale = measure_latent_scale(&model, images)?;
    model.store.set_frozen(true);
    let probe: Vec<&ImageRgb> = images.iter().take(32).collect();
    let usage = model.codebook_usage(&images_to_tensor(&probe, DType::F32)?)?;
    let report = VqTrainReport {
        initial_loss: first,
        final_loss: *ema_loss.last().unwrap_or(&first),
        ema_loss,
        codebook_usage: usage,
        latent_scale: model.latent_scale,
    };
    Ok((model, report))
}

/// Re-seeds the listed codebook rows with random encoder outputs from `z`.
fn seed_codes(codebook: &candle_core::Var, z: &Tensor, rows: &[usize], seed: u64, step: usize) -> Result<()> {
    use rand::Rng;
    let (b, c, h, w) = z.dims4()?;
    let flat = tensor_f32(&z.permute((0, 2, 3, 1))?.contiguous()?)?;
    let n = b * h * w;
    let mut book = tensor_f32(codebook.as_tensor())?;
    let mut rng = keyed_rng(seed, "vq-codes", step as u64);
    for &r in rows {
        let src = rng.random_range(0..n);
        for k in 0..c {
            let jitter: f32 = rng.random_range(-0.01..0.01);
            book[r * c + k] = flat[src * c + k] + jitter;
        }
    }
    let t = Tensor::from_vec(book, codebook.dims(), codebook.device())?.to_dtype(codebook.dtype())?;
    codebook.set(&t)?;
    Ok(())
}

fn measure_latent_scale(model: &VqAutoencoder, images: &[ImageRgb]) -> Result<f64> {
    let mut values = Vec::new();
    for chunk in images.chunks(32).take(8) {
        let refs: Vec<&ImageRgb> = chunk.iter().collect();
        let (z, _) = model.encode_raw(&images_to_tensor(&refs, DType::F32)?)?;
        values.extend(tensor_f32(&z)?);
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::Training {
            stage: "train-vq".into(),
            step: 0,
            detail: "degenerate latent variance".into(),
        });
    }
    Ok(1.0 / var.sqrt())
}
