//! Paired training data: flare-free ground truth and its flare-corrupted input.
//!
//! A sample is assembled from a background `B`, a light source `L`, and two
//! flare layers (reflective `F_r`, scattering `F_s`):
//!
//! ```text
//! GT   = B ⊕ L
//! x_in = B ⊕ L ⊕ F_r ⊕ F_s
//! ```
//!
//! where `⊕` adds in linear light (gamma 2.2) and clips.

mod corpus;
mod procedural;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageRgb;
use crate::rng::keyed_rng;

pub use corpus::{
    dataset_stream, AssetBank, CorpusConfig, CorpusManifest, CorpusSource, DatasetStream, ManifestEntry,
    Split,
};
pub use procedural::{
    procedural_background, procedural_flare, procedural_light, FlareKind, FlareParams, ReflectiveParams,
    ScatteringParams,
};

const GAMMA: f64 = 2.2;

pub fn srgb_to_linear(v: f32) -> f64 {
    (v.max(0.0) as f64).powf(GAMMA)
}

pub fn linear_to_srgb(v: f64) -> f32 {
    v.clamp(0.0, 1.0).powf(1.0 / GAMMA) as f32
}

/// Element-wise combination of sRGB layers: decode, add, clip, re-encode.
///
/// Per element the decoded terms are summed in ascending order, so the result
/// does not depend on the order of `parts`.
pub fn composite(parts: &[&ImageRgb]) -> Result<ImageRgb> {
    let Some(first) = parts.first() else {
        return Err(Error::Dimension("composite needs at least one layer".into()));
    };
    if parts.iter().any(|p| p.shape() != first.shape()) {
        return Err(Error::Dimension("composite layers differ in shape".into()));
    }
    let n = first.pixels().len();
    let mut terms = vec![0.0f64; parts.len()];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        for (t, p) in terms.iter_mut().zip(parts) {
            *t = srgb_to_linear(p.pixels()[i]);
        }
        terms.sort_by(f64::total_cmp);
        let sum: f64 = terms.iter().sum();
        out.push(linear_to_srgb(sum));
    }
    ImageRgb::new(first.height(), first.width(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentRanges {
    pub scale: (f32, f32),
    /// Maximum translation of the light source, as a fraction of the crop side.
    pub translate_frac: f32,
    pub flare_gain: (f32, f32),
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            scale: (0.8, 1.5),
            translate_frac: 0.3,
            flare_gain: (0.8, 3.0),
        }
    }
}

impl AugmentRanges {
    pub fn validate(&self) -> Result<()> {
        let ok = self.scale.0 > 0.0
            && self.scale.0 <= self.scale.1
            && (0.0..=0.5).contains(&self.translate_frac)
            && self.flare_gain.0 >= 0.0
            && self.flare_gain.0 <= self.flare_gain.1;
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid augmentation ranges {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub rotation_deg: f32,
    pub scale: f32,
    pub translate: (f32, f32),
    pub flip: bool,
    pub flare_gain: f32,
    pub crop_origin: (usize, usize),
}

impl AugmentSpec {
    /// Draws augmentation parameters for a `crop`-sized window inside a
    /// background of `bg_shape`.
    pub fn sample(seed: u64, ranges: &AugmentRanges, bg_shape: (usize, usize), crop: usize) -> Self {
        use rand::Rng;
        let mut rng = keyed_rng(seed, "augment", 0);
        let t = ranges.translate_frac * crop as f32;
        let rotation_deg = rng.random_range(0.0..360.0);
        let scale = uniform(&mut rng, ranges.scale);
        let translate = (uniform(&mut rng, (-t, t)), uniform(&mut rng, (-t, t)));
        let flip = rng.random::<bool>();
        let flare_gain = uniform(&mut rng, ranges.flare_gain);
        let crop_origin = (
            rng.random_range(0..=bg_shape.0 - crop),
            rng.random_range(0..=bg_shape.1 - crop),
        );
        Self {
            rotation_deg,
            scale,
            translate,
            flip,
            flare_gain,
            crop_origin,
        }
    }
}

fn uniform(rng: &mut impl rand::Rng, (lo, hi): (f32, f32)) -> f32 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlareSample {
    pub background: ImageRgb,
    pub light_source: ImageRgb,
    pub reflective: ImageRgb,
    pub scattering: ImageRgb,
    pub gt: ImageRgb,
    pub input: ImageRgb,
    pub seed: u64,
    pub augment: AugmentSpec,
    pub asset_ids: AssetIds,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetIds {
    pub background: String,
    pub scattering: String,
    pub reflective: String,
    pub light: String,
}

impl FlareSample {
    /// True where both flare layers are exactly zero in every channel.
    pub fn flare_free_pixels(&self) -> Vec<bool> {
        self.reflective
            .pixels()
            .chunks_exact(3)
            .zip(self.scattering.pixels().chunks_exact(3))
            .map(|(r, s)| r.iter().chain(s).all(|&v| v == 0.0))
            .collect()
    }
}

/// Assembles one training pair. `background` must be at least `crop` on each
/// side; all randomness is drawn from `seed`.
pub fn make_sample(
    background: &ImageRgb,
    background_id: &str,
    assets: &AssetBank,
    seed: u64,
    crop: usize,
    ranges: &AugmentRanges,
) -> Result<FlareSample> {
    use rand::Rng;
    if background.height() < crop || background.width() < crop {
        return Err(Error::Dimension(format!(
            "background {}x{} smaller than crop {crop}",
            background.height(),
            background.width()
        )));
    }
    if assets.scattering.is_empty() || assets.reflective.is_empty() || assets.light.is_empty() {
        return Err(Error::Asset("asset bank is missing a flare or light-source layer".into()));
    }
    let aug = AugmentSpec::sample(seed, ranges, background.shape(), crop);
    let mut pick = keyed_rng(seed, "asset-pick", 0);
    let si = pick.random_range(0..assets.scattering.len());
    let ri = pick.random_range(0..assets.reflective.len());
    // the light source belongs to its scattering flare
    let li = si % assets.light.len();

    let (oy, ox) = aug.crop_origin;
    let mut b = background.crop(oy, ox, crop, crop)?;
    if aug.flip {
        b = b.flip_horizontal();
    }
    let c = crop as f32 / 2.0 - 0.5;
    let geom = Warp {
        rotation_deg: aug.rotation_deg,
        scale: aug.scale,
        translate: aug.translate,
        center: (c, c),
    };
    let l = warp(&fit(&assets.light[li].1, crop)?, &geom, 1.0)?;
    let fs = warp(&fit(&assets.scattering[si].1, crop)?, &geom, aug.flare_gain)?;
    let reflect_geom = Warp {
        rotation_deg: aug.rotation_deg,
        scale: 1.0,
        translate: (0.0, 0.0),
        center: (c, c),
    };
    let fr = warp(&fit(&assets.reflective[ri].1, crop)?, &reflect_geom, aug.flare_gain)?;

    let gt = composite(&[&b, &l])?;
    let input = composite(&[&b, &l, &fr, &fs])?;
    Ok(FlareSample {
        background: b,
        light_source: l,
        reflective: fr,
        scattering: fs,
        gt,
        input,
        seed,
        augment: aug,
        asset_ids: AssetIds {
            background: background_id.to_string(),
            scattering: assets.scattering[si].0.clone(),
            reflective: assets.reflective[ri].0.clone(),
            light: assets.light[li].0.clone(),
        },
    })
}

struct Warp {
    rotation_deg: f32,
    scale: f32,
    translate: (f32, f32),
    center: (f32, f32),
}

/// Resamples `img` under a similarity transform about `center`, bilinear with
/// zero outside, then multiplies linear-light intensity by `gain`.
fn warp(img: &ImageRgb, w: &Warp, gain: f32) -> Result<ImageRgb> {
    let (h, wd) = img.shape();
    let (sin, cos) = (w.rotation_deg.to_radians() as f64).sin_cos();
    let (cy, cx) = (w.center.0 as f64, w.center.1 as f64);
    let inv_scale = 1.0 / w.scale as f64;
    let src = img.pixels();
    let fetch = |y: isize, x: isize, c: usize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= wd as isize {
            0.0
        } else {
            src[(y as usize * wd + x as usize) * 3 + c] as f64
        }
    };
    let mut out = Vec::with_capacity(h * wd * 3);
    for y in 0..h {
        for x in 0..wd {
            let dx = x as f64 - cx - w.translate.1 as f64;
            let dy = y as f64 - cy - w.translate.0 as f64;
            let sx = (cos * dx + sin * dy) * inv_scale + cx;
            let sy = (-sin * dx + cos * dy) * inv_scale + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for c in 0..3 {
                let v = fetch(y0, x0, c) * (1.0 - fx) * (1.0 - fy)
                    + fetch(y0, x0 + 1, c) * fx * (1.0 - fy)
                    + fetch(y0 + 1, x0, c) * (1.0 - fx) * fy
                    + fetch(y0 + 1, x0 + 1, c) * fx * fy;
                let v = if gain == 1.0 {
                    v as f32
                } else {
                    linear_to_srgb(srgb_to_linear(v as f32) * gain as f64)
                };
                out.push(v);
            }
        }
    }
    ImageRgb::new(h, wd, out)
}

/// Brings an asset to `crop x crop`: center crop when larger in both sides,
/// bilinear resize otherwise.
fn fit(img: &ImageRgb, crop: usize) -> Result<ImageRgb> {
    let (h, w) = img.shape();
    if h == crop && w == crop {
        return Ok(img.clone());
    }
    resize_bilinear(img, crop, crop)
}

pub(crate) fn resize_bilinear(img: &ImageRgb, oh: usize, ow: usize) -> Result<ImageRgb> {
    let (h, w) = img.shape();
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    ImageRgb::from_fn(oh, ow, |y, x| {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let (a, b, c, d) = (img.get(y0, x0), img.get(y0, x1), img.get(y1, x0), img.get(y1, x1));
        let mut px = [0.0f32; 3];
        for k in 0..3 {
            px[k] = ((a[k] as f64 * (1.0 - tx) + b[k] as f64 * tx) * (1.0 - ty)
                + (c[k] as f64 * (1.0 - tx) + d[k] as f64 * tx) * ty) as f32;
        }
        px
    })
}
