//! Evaluation report: per-image and aggregate metrics for each variant.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::Variant;
use crate::error::{Error, Result};
use crate::imaging::{metrics, ImageRgb};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub psnr_db: f64,
    pub ssim: f64,
    /// Mean absolute error to ground truth over the pixels where both
    /// flare layers are exactly zero; absent when there are none.
    pub flare_free_mae: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub index: usize,
    /// Corpus seed of the test sample.
    pub seed: u64,
    pub flare_free_pixels: usize,
    pub metrics: BTreeMap<Variant, VariantMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_psnr_db: f64,
    pub median_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_flare_free_mae: Option<f64>,
    /// Fraction of images whose PSNR beats the corrupted input's.
    pub psnr_above_input: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Runtime {
    pub restore_s: f64,
    pub total_s: f64,
    pub per_image_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub guidance_scale: f64,
    pub prompt_token: Option<u32>,
    pub images: Vec<ImageEval>,
    pub aggregate: BTreeMap<Variant, Aggregate>,
    /// Wall-clock figures; the only part of the report that varies between
    /// identical runs.
    pub runtime: Runtime,
}

impl EvalReport {
    pub fn aggregate(&self, v: Variant) -> Option<&Aggregate> {
        self.aggregate.get(&v)
    }
}

/// Mean absolute error over the pixels flagged in `region`.
pub fn masked_mae(a: &ImageRgb, b: &ImageRgb, region: &[bool]) -> Result<Option<f64>> {
    if a.shape() != b.shape() || region.len() != a.height() * a.width() {
        return Err(Error::Dimension("masked_mae needs equal shapes and one flag per pixel".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((pa, pb), &keep) in a.pixels().chunks_exact(3).zip(b.pixels().chunks_exact(3)).zip(region) {
        if keep {
            total += pa.iter().zip(pb).map(|(x, y)| (x - y).abs() as f64).sum::<f64>();
            count += 3;
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

pub fn score(out: &ImageRgb, gt: &ImageRgb, flare_free: &[bool]) -> Result<VariantMetrics> {
    let m = metrics(out, gt)?;
    Ok(VariantMetrics {
        psnr_db: m.psnr_db,
        ssim: m.ssim,
        flare_free_mae: masked_mae(out, gt, flare_free)?,
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Aggregates are plain arithmetic means (and the median) of the per-image
/// values. `input_psnr` holds the corrupted input's PSNR per image.
pub fn aggregate(images: &[ImageEval], input_psnr: &[f64]) -> Result<BTreeMap<Variant, Aggregate>> {
    if images.is_empty() {
        return Err(Error::Corpus("cannot aggregate an empty evaluation".into()));
    }
    let n = images.len() as f64;
    let mut out = BTreeMap::new();
    for &v in images[0].metrics.keys() {
        let rows: Vec<&VariantMetrics> = images.iter().map(|i| &i.metrics[&v]).collect();
        let psnr: Vec<f64> = rows.iter().map(|m| m.psnr_db).collect();
        let maes: Vec<f64> = rows.iter().filter_map(|m| m.flare_free_mae).collect();
        let above = psnr.iter().zip(input_psnr).filter(|(p, i)| p > i).count() as f64;
        out.insert(
            v,
            Aggregate {
                mean_psnr_db: psnr.iter().sum::<f64>() / n,
                median_psnr_db: median(psnr),
                mean_ssim: rows.iter().map(|m| m.ssim).sum::<f64>() / n,
                mean_flare_free_mae: (!maes.is_empty()).then(|| maes.iter().sum::<f64>() / maes.len() as f64),
                psnr_above_input: above / n,
            },
        );
    }
    Ok(out)
}
