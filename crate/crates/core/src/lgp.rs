//! Luminance prior masks.
//!
//! Flare cores are near-saturated, so thresholding BT.601 luma separates
//! them from the rest of the frame. The pixel mask marks flare-free pixels
//! with 1; the attention mask is its pooled, SiLU-activated latent-resolution
//! version, replicated across query rows.

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::imaging::{luma, ImageRgb};

pub const DEFAULT_THRESHOLD: f32 = 0.85;

#[derive(Clone, Debug, PartialEq)]
pub struct LuminanceMask {
    height: usize,
    width: usize,
    mask: Vec<u8>,
    threshold: f32,
}

impl LuminanceMask {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn threshold(&self) -> f32 {
        self.threshold
    }

    pub fn values(&self) -> &[u8] {
        &self.mask
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.mask[y * self.width + x]
    }

    pub fn flare_free_fraction(&self) -> f64 {
        self.mask.iter().map(|&m| m as f64).sum::<f64>() / self.mask.len() as f64
    }

    /// Grey PNG-ready image: white where flare-free.
    pub fn to_image(&self) -> Result<ImageRgb> {
        let px = self.mask.iter().flat_map(|&m| [m as f32; 3]).collect();
        ImageRgb::new(self.height, self.width, px)
    }
}

fn check_threshold(s: f32) -> Result<()> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::Parameter(format!("luminance threshold must lie in (0,1), got {s}")));
    }
    Ok(())
}

/// Binary flare-free mask: 1 where luma is strictly below `s`.
///
/// The defining equation writes the mask symbol on both sides of the
/// comparison; the compared quantity is read here as the pixel's luma.
pub fn luminance_mask(img: &ImageRgb, s: f32) -> Result<LuminanceMask> {
    check_threshold(s)?;
    let mask = luma(img).into_iter().map(|y| u8::from(y < s)).collect();
    Ok(LuminanceMask {
        height: img.height(),
        width: img.width(),
        mask,
        threshold: s,
    })
}

/// Like [`luminance_mask`], then additionally clears flare-free pixels that
/// touch the flare region across a strong luma edge (Sobel magnitude above
/// `grad_threshold`). Off by default in the pipeline.
pub fn luminance_mask_dilated(img: &ImageRgb, s: f32, grad_threshold: f32) -> Result<LuminanceMask> {
    let mut lm = luminance_mask(img, s)?;
    let (h, w) = (lm.height, lm.width);
    let y = luma(img);
    let at = |r: isize, c: isize| -> f32 {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        y[r * w + c]
    };
    let original = lm.mask.clone();
    for r in 0..h as isize {
        for c in 0..w as isize {
            let idx = r as usize * w + c as usize;
            if original[idx] == 0 {
                continue;
            }
            let gx = at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1)
                - at(r - 1, c - 1)
                - 2.0 * at(r, c - 1)
                - at(r + 1, c - 1);
            let gy = at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1)
                - at(r - 1, c - 1)
                - 2.0 * at(r - 1, c)
                - at(r - 1, c + 1);
            if (gx * gx + gy * gy).sqrt() <= grad_threshold {
                continue;
            }
            let touches_flare = (-1..=1).any(|dr| {
                (-1..=1).any(|dc| {
                    let (rr, cc) = (r + dr, c + dc);
                    rr >= 0
                        && cc >= 0
                        && (rr as usize) < h
                        && (cc as usize) < w
                        && original[rr as usize * w + cc as usize] == 0
                })
            });
            if touches_flare {
                lm.mask[idx] = 0;
            }
        }
    }
    Ok(lm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    latent_shape: (usize, usize),
    row: Vec<f32>,
}

impl AttentionMask {
    /// A mask whose every entry equals `value`; mostly useful for ablations.
    pub fn constant(latent_shape: (usize, usize), value: f32) -> Self {
        Self {
            latent_shape,
            row: vec![value; latent_shape.0 * latent_shape.1],
        }
    }

    pub fn tokens(&self) -> usize {
        self.row.len()
    }

    pub fn latent_shape(&self) -> (usize, usize) {
        self.latent_shape
    }

    /// The shared row: pooled and activated mask, flattened.
    pub fn row(&self) -> &[f32] {
        &self.row
    }

    /// Entry `[0, i, j]` of the stacked `(1, N, N)` mask.
    pub fn get(&self, _i: usize, j: usize) -> f32 {
        self.row[j]
    }

    /// Materialized `(1, N, N)` mask.
    pub fn dense(&self) -> Vec<f32> {
        let n = self.row.len();
        let mut out = Vec::with_capacity(n * n);
        for _ in 0..n {
            out.extend_from_slice(&self.row);
        }
        out
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let n = self.row.len();
        Ok(Tensor::from_slice(&self.row, (1, 1, n), device)?.broadcast_as((1, n, n))?.contiguous()?)
    }

    /// Stacks a batch of masks into `(B, N, N)`.
    pub fn batch_tensor(masks: &[AttentionMask], device: &Device) -> Result<Tensor> {
        let rows = masks
            .iter()
            .map(|m| m.to_tensor(device))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&rows, 0)?)
    }
}

pub(crate) fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Average-pools `lm` to `latent_shape` (adaptive bins), applies SiLU, and
/// stacks the flattened result into an attention mask with identical rows.
pub fn to_attention_mask(lm: &LuminanceMask, latent_shape: (usize, usize)) -> Result<AttentionMask> {
    let (hl, wl) = latent_shape;
    if hl == 0 || wl == 0 || hl > lm.height || wl > lm.width {
        return Err(Error::Dimension(format!(
            "latent {hl}x{wl} cannot be pooled from a {}x{} mask",
            lm.height, lm.width
        )));
    }
    let pooled = adaptive_avg_pool(&lm.mask, lm.height, lm.width, hl, wl);
    Ok(AttentionMask {
        latent_shape,
        row: pooled.into_iter().map(silu).collect(),
    })
}

/// Adaptive average pooling with bins `[floor(i*H/h), ceil((i+1)*H/h))`.
fn adaptive_avg_pool(src: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let y0 = i * h / oh;
        let y1 = ((i + 1) * h).div_ceil(oh);
        for j in 0..ow {
            let x0 = j * w / ow;
            let x1 = ((j + 1) * w).div_ceil(ow);
            let mut acc = 0u32;
            for y in y0..y1 {
                for x in x0..x1 {
                    acc += src[y * w + x] as u32;
                }
            }
            out.push(acc as f32 / ((y1 - y0) * (x1 - x0)) as f32);
        }
    }
    out
}

pub fn mask_as_f32(lm: &LuminanceMask) -> Vec<f32> {
    lm.mask.iter().map(|&m| m as f32).collect()
}
