//! End-to-end restoration with loaded models.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use super::config::InferConfig;
use super::manifest::{RunManifest, Stage};
use crate::affm::{Affm, FusionInputs, FusionPool};
use crate::diffusion::{Condition, Denoiser};
use crate::error::{Error, Result};
use crate::imaging::ImageRgb;
use crate::lgp::{luminance_mask, mask_as_f32, to_attention_mask};
use crate::nn::{images_to_tensor, tensor_to_images, Checkpoint};
use crate::sgim::Sgim;
use crate::vq::VqAutoencoder;

pub const VQ_CHECKPOINT: &str = "vq/vq.ckpt";
pub const DIFFUSION_CHECKPOINT: &str = "diffusion/diffusion.ckpt";
pub const SGIM_CHECKPOINT: &str = "sgim/sgim.ckpt";
pub const AFFM_CHECKPOINT: &str = "affm/affm.ckpt";
pub const AFFM_UNGUIDED_CHECKPOINT: &str = "affm/affm-unguided.ckpt";

/// The frozen upstream models every restoration needs.
pub struct Backbone {
    pub vq: VqAutoencoder,
    pub denoiser: Denoiser,
    pub sgim: Sgim,
}

impl Backbone {
    pub fn load(root: &Path, manifest: &RunManifest, needed_by: &str) -> Result<Self> {
        manifest.require(root, Stage::TrainVq, needed_by)?;
        manifest.require(root, Stage::TrainDiffusion, needed_by)?;
        manifest.require(root, Stage::TrainSgim, needed_by)?;
        let vq = VqAutoencoder::from_checkpoint(&Checkpoint::load(&root.join(VQ_CHECKPOINT))?)?;
        let denoiser = Denoiser::from_checkpoint(&Checkpoint::load(&root.join(DIFFUSION_CHECKPOINT))?)?;
        let sgim = Sgim::from_checkpoint(&Checkpoint::load(&root.join(SGIM_CHECKPOINT))?, &denoiser)?;
        Ok(Self { vq, denoiser, sgim })
    }
}

/// Loads a fusion checkpoint written by `train-affm`.
pub fn load_affm(root: &Path, manifest: &RunManifest, rel: &str, needed_by: &str) -> Result<Affm> {
    let record = manifest.require(root, Stage::TrainAffm, needed_by)?;
    if !record.outputs.iter().any(|o| o.path == Path::new(rel)) {
        return Err(Error::Dependency {
            required: Stage::TrainAffm.name().into(),
            detail: format!("the recorded run did not produce {rel}"),
        });
    }
    Affm::from_checkpoint(&Checkpoint::load(&root.join(rel))?)
}

pub fn condition(cfg: &InferConfig) -> Condition {
    match cfg.prompt_token {
        Some(t) => Condition::Token(t),
        None => Condition::Null,
    }
}

/// Encodes the inputs, samples restored latents under structural guidance
/// and classifier-free guidance, and decodes them. The result carries
/// everything the fusion network consumes.
pub fn restore_batch(
    models: &Backbone,
    images: &[&ImageRgb],
    seeds: &[u64],
    cfg: &InferConfig,
    threshold: f32,
) -> Result<FusionInputs> {
    if images.len() != seeds.len() || images.is_empty() {
        return Err(Error::Parameter("restore_batch needs one seed per image".into()));
    }
    let x = images_to_tensor(images, DType::F32)?;
    let (z_in, enc_tap) = models.vq.encode_with_tap(&x)?;
    let (_, _, h, w) = z_in.dims4()?;
    let pyramid = models.sgim.extract_guidance(&z_in)?;
    let injection = models.sgim.injection(&pyramid);
    let z0 = models
        .denoiser
        .sample((h, w), seeds, condition(cfg), cfg.guidance_scale, Some(&injection))?;
    let (decoded, dec_tap) = models.vq.decode_with_tap(&z0)?;
    let rows = images
        .iter()
        .map(|img| {
            let m = to_attention_mask(&luminance_mask(img, threshold)?, (h, w))?;
            Ok(Tensor::from_slice(m.row(), (1, 1, h * w), &Device::Cpu)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FusionInputs {
        enc: enc_tap.detach(),
        dec: dec_tap.detach(),
        base: decoded.clamp(0.0, 1.0)?.detach(),
        mask_rows: Some(Tensor::cat(&rows, 0)?),
    })
}

/// Pixel-level luminance masks `(B, 1, H, W)`.
pub fn pixel_masks(images: &[&ImageRgb], threshold: f32) -> Result<Tensor> {
    let masks = images
        .iter()
        .map(|img| {
            let lm = luminance_mask(img, threshold)?;
            Ok(Tensor::from_vec(mask_as_f32(&lm), (1, 1, lm.height(), lm.width()), &Device::Cpu)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&masks, 0)?)
}

/// Restores `inputs` in batches and packs them with their targets into a
/// fusion training pool.
pub fn build_pool(
    models: &Backbone,
    inputs: &[&ImageRgb],
    targets: &[&ImageRgb],
    seeds: &[u64],
    cfg: &InferConfig,
    threshold: f32,
) -> Result<FusionPool> {
    let mut parts = Vec::new();
    for (chunk, (imgs, sds)) in inputs.chunks(cfg.batch).zip(seeds.chunks(cfg.batch)).enumerate() {
        log::info!("restoring pool batch {} of {}", chunk + 1, inputs.len().div_ceil(cfg.batch));
        parts.push(restore_batch(models, imgs, sds, cfg, threshold)?);
    }
    let cat = |f: &dyn Fn(&FusionInputs) -> Tensor| -> Result<Tensor> {
        Ok(Tensor::cat(&parts.iter().map(f).collect::<Vec<_>>(), 0)?)
    };
    let inputs_t = FusionInputs {
        enc: cat(&|p| p.enc.clone())?,
        dec: cat(&|p| p.dec.clone())?,
        base: cat(&|p| p.base.clone())?,
        mask_rows: Some(cat(&|p| p.mask_rows.clone().expect("restore_batch sets mask rows"))?),
    };
    Ok(FusionPool {
        inputs: inputs_t,
        x_in: images_to_tensor(inputs, DType::F32)?,
        gt: images_to_tensor(targets, DType::F32)?,
        pixel_mask: pixel_masks(inputs, threshold)?,
    })
}

/// Full inference on a set of images: restoration, then fusion unless
/// `affm` is `None`.
pub fn infer(
    models: &Backbone,
    affm: Option<&Affm>,
    images: &[&ImageRgb],
    seeds: &[u64],
    cfg: &InferConfig,
) -> Result<Vec<ImageRgb>> {
    let threshold = affm.map(|a| a.config().threshold).unwrap_or(crate::lgp::DEFAULT_THRESHOLD);
    let mut out = Vec::with_capacity(images.len());
    for (imgs, sds) in images.chunks(cfg.batch).zip(seeds.chunks(cfg.batch)) {
        let restored = restore_batch(models, imgs, sds, cfg, threshold)?;
        let t = match affm {
            Some(a) => a.fuse(&restored)?,
            None => restored.base,
        };
        out.extend(tensor_to_images(&t)?);
    }
    Ok(out)
}
