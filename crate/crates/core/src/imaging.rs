//! Pixel-space images, YCbCr conversion, and full-reference quality metrics.
//!
//! Images are stored row-major, interleaved RGB (`H x W x 3`) as `f32` in
//! `[0, 1]`. Every constructor clips, so no public operation can produce an
//! out-of-range pixel.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_SIDE: usize = 8;
pub const PSNR_CAP_DB: f64 = 100.0;
const PSNR_ZERO_MSE: f64 = 1e-10;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    Srgb,
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
    colorspace: ColorSpace,
}

impl ImageRgb {
    /// Builds an sRGB image from interleaved pixels, clipping into `[0, 1]`.
    /// Non-finite values are mapped to 0.
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        Self::with_colorspace(height, width, pixels, ColorSpace::Srgb)
    }

    pub fn with_colorspace(
        height: usize,
        width: usize,
        mut pixels: Vec<f32>,
        colorspace: ColorSpace,
    ) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::Dimension(format!(
                "image must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "expected {} values for {height}x{width}x3, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        for p in &mut pixels {
            *p = clip_unit(*p);
        }
        Ok(Self {
            height,
            width,
            pixels,
            colorspace,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, pixels)
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::filled(height, width, [0.0; 3])
    }

    /// Builds an image by evaluating `f(y, x)` at every pixel.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(y, x));
            }
        }
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn colorspace(&self) -> ColorSpace {
        self.colorspace
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.pixels[i + c] = clip_unit(rgb[c]);
        }
    }

    /// Planar `C x H x W` copy, the layout used by the networks.
    pub fn to_chw(&self) -> Vec<f32> {
        let n = self.height * self.width;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c];
            }
        }
        out
    }

    pub fn from_chw(height: usize, width: usize, planes: &[f32]) -> Result<Self> {
        let n = height * width;
        if planes.len() != 3 * n {
            return Err(Error::Dimension(format!(
                "expected {} planar values, got {}",
                3 * n,
                planes.len()
            )));
        }
        let mut pixels = vec![0.0; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                pixels[i * 3 + c] = planes[c * n + i];
            }
        }
        Self::new(height, width, pixels)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Dimension(format!(
                "crop {height}x{width}+{top}+{left} exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in top..top + height {
            let start = (y * self.width + left) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + width * 3]);
        }
        Self::with_colorspace(height, width, pixels, self.colorspace)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, x, self.get(y, self.width - 1 - x));
            }
        }
        out
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        let var = self
            .pixels
            .iter()
            .map(|&v| (v as f64 - m).powi(2))
            .sum::<f64>()
            / self.pixels.len() as f64;
        var.sqrt()
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Self::new(h as usize, w as usize, pixels)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.pixels.iter().map(|&v| quantize_u8(v)).collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions");
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Concatenates same-height images left to right.
    pub fn hstack(images: &[&ImageRgb]) -> Result<Self> {
        let Some(first) = images.first() else {
            return Err(Error::Dimension("hstack of zero images".into()));
        };
        let h = first.height;
        if images.iter().any(|im| im.height != h) {
            return Err(Error::Dimension("hstack needs equal heights".into()));
        }
        let w: usize = images.iter().map(|im| im.width).sum();
        let mut pixels = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for im in images {
                let start = y * im.width * 3;
                pixels.extend_from_slice(&im.pixels[start..start + im.width * 3]);
            }
        }
        Self::new(h, w, pixels)
    }
}

fn clip_unit(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

fn quantize_u8(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Full-range BT.601 luma/chroma planes, interleaved like [`ImageRgb`].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageYCbCr {
    height: usize,
    width: usize,
    planes: Vec<f32>,
}

impl ImageYCbCr {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.planes[i], self.planes[i + 1], self.planes[i + 2]]
    }

    pub fn luma(&self) -> Vec<f32> {
        self.planes.chunks_exact(3).map(|p| p[0]).collect()
    }
}

pub fn rgb_to_ycbcr(img: &ImageRgb) -> ImageYCbCr {
    let planes = img
        .pixels
        .chunks_exact(3)
        .flat_map(|p| {
            let (r, g, b) = (p[0] as f64, p[1] as f64, p[2] as f64);
            let y = 0.299 * r + 0.587 * g + 0.114 * b;
            let cb = (b - y) / 1.772;
            let cr = (r - y) / 1.402;
            [y as f32, cb as f32, cr as f32]
        })
        .collect();
    ImageYCbCr {
        height: img.height,
        width: img.width,
        planes,
    }
}

pub fn ycbcr_to_rgb(img: &ImageYCbCr) -> ImageRgb {
    let pixels = img
        .planes
        .chunks_exact(3)
        .flat_map(|p| {
            let (y, cb, cr) = (p[0] as f64, p[1] as f64, p[2] as f64);
            let r = y + 1.402 * cr;
            let b = y + 1.772 * cb;
            let g = (y - 0.299 * r - 0.114 * b) / 0.587;
            [r as f32, g as f32, b as f32]
        })
        .collect();
    ImageRgb::new(img.height, img.width, pixels).expect("shape carried over from a valid image")
}

/// BT.601 luma of every pixel, row-major.
pub fn luma(img: &ImageRgb) -> Vec<f32> {
    rgb_to_ycbcr(img).luma()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
}

pub fn metrics(a: &ImageRgb, b: &ImageRgb) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr_db: psnr(a, b)?,
        ssim: ssim(a, b)?,
    })
}

fn check_same_shape(a: &ImageRgb, b: &ImageRgb) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "image shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn mse(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    check_same_shape(a, b)?;
    let sum: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(sum / a.pixels.len() as f64)
}

/// PSNR in dB for unit dynamic range, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    let m = mse(a, b)?;
    if m < PSNR_ZERO_MSE {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

/// Mean SSIM over the three channels, 11x11 Gaussian window (sigma 1.5),
/// evaluated on the valid region only.
pub fn ssim(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    check_same_shape(a, b)?;
    let (h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let kernel = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);

    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.pixels.iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let y: Vec<f64> = b.pixels.iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();

        let mu_x = filter_valid(&x, h, w, &kernel);
        let mu_y = filter_valid(&y, h, w, &kernel);
        let e_xx = filter_valid(&xx, h, w, &kernel);
        let e_yy = filter_valid(&yy, h, w, &kernel);
        let e_xy = filter_valid(&xy, h, w, &kernel);

        let mut acc = 0.0;
        for i in 0..mu_x.len() {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let sx = e_xx[i] - mx * mx;
            let sy = e_yy[i] - my * my;
            let sxy = e_xy[i] - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * sxy + c2))
                / ((mx * mx + my * my + c1) * (sx + sy + c2));
        }
        total += acc / mu_x.len() as f64;
    }
    Ok(total / 3.0)
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering with a 1-D kernel applied on both axes.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed_rng;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageRgb {
        let mut rng = keyed_rng(seed, "test-image", 0);
        ImageRgb::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap()
    }

    #[test]
    fn ycbcr_reference_points() {
        let black = ImageRgb::zeros(8, 8).unwrap();
        assert_eq!(rgb_to_ycbcr(&black).get(0, 0), [0.0, 0.0, 0.0]);
        let white = ImageRgb::filled(8, 8, [1.0; 3]).unwrap();
        let ycc = rgb_to_ycbcr(&white).get(3, 3);
        assert!((ycc[0] - 1.0).abs() < 1e-6);
        assert!(ycc[1].abs() < 1e-6 && ycc[2].abs() < 1e-6);
        let red = ImageRgb::filled(8, 8, [1.0, 0.0, 0.0]).unwrap();
        assert!((rgb_to_ycbcr(&red).get(0, 0)[0] - 0.299).abs() < 1e-6);
    }

    #[test]
    fn ycbcr_inverse_reference_points() {
        let zero = rgb_to_ycbcr(&ImageRgb::zeros(8, 8).unwrap());
        assert_eq!(ycbcr_to_rgb(&zero).get(0, 0), [0.0, 0.0, 0.0]);
        let one = rgb_to_ycbcr(&ImageRgb::filled(8, 8, [1.0; 3]).unwrap());
        for v in ycbcr_to_rgb(&one).get(2, 5) {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ycbcr_roundtrip_bound() {
        // 1024 random pixels
        let img = random_image(32, 32, 11);
        let back = ycbcr_to_rgb(&rgb_to_ycbcr(&img));
        let worst = img
            .pixels()
            .iter()
            .zip(back.pixels())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst < 1e-4, "max roundtrip error {worst}");
    }

    #[test]
    fn chroma_ranges() {
        let img = random_image(16, 16, 3);
        let ycc = rgb_to_ycbcr(&img);
        for y in 0..16 {
            for x in 0..16 {
                let [l, cb, cr] = ycc.get(y, x);
                assert!((0.0..=1.0).contains(&l));
                assert!((-0.5..=0.5).contains(&cb) && (-0.5..=0.5).contains(&cr));
            }
        }
    }

    #[test]
    fn psnr_closed_forms() {
        let a = ImageRgb::filled(16, 16, [0.3, 0.4, 0.5]).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let b = ImageRgb::filled(16, 16, [0.4, 0.5, 0.6]).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
        let c = ImageRgb::filled(16, 16, [0.31, 0.41, 0.51]).unwrap();
        assert!((psnr(&a, &c).unwrap() - 40.0).abs() < 1e-3);
    }

    #[test]
    fn psnr_symmetric_and_monotone() {
        let a = random_image(16, 16, 5);
        let mut prev = f64::INFINITY;
        for (k, amp) in [0.01f32, 0.05, 0.1].into_iter().enumerate() {
            let mut rng = keyed_rng(9, "noise", k as u64);
            let b = ImageRgb::from_fn(16, 16, |y, x| {
                let p = a.get(y, x);
                // mirror the offset so it never clips
                p.map(|v| {
                    let d = amp * if rng.random::<bool>() { 1.0 } else { -1.0 };
                    if (0.0..=1.0).contains(&(v + d)) { v + d } else { v - d }
                })
            })
            .unwrap();
            let p_ab = psnr(&a, &b).unwrap();
            assert_eq!(p_ab, psnr(&b, &a).unwrap());
            assert!(p_ab < prev);
            prev = p_ab;
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        let a = ImageRgb::zeros(16, 16).unwrap();
        let b = ImageRgb::zeros(16, 17).unwrap();
        assert!(matches!(psnr(&a, &b), Err(Error::Dimension(_))));
        assert!(matches!(ssim(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn ssim_requires_window() {
        let a = ImageRgb::zeros(10, 16).unwrap();
        assert!(matches!(ssim(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = random_image(24, 20, 1);
        let b = random_image(24, 20, 2);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn too_small_image_rejected() {
        assert!(ImageRgb::zeros(7, 8).is_err());
    }

    #[test]
    fn constructor_clips() {
        let img = ImageRgb::new(8, 8, vec![2.0; 192]).unwrap();
        assert!(img.pixels().iter().all(|&v| v == 1.0));
        let img = ImageRgb::new(8, 8, vec![f32::NAN; 192]).unwrap();
        assert!(img.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn png_roundtrip_is_8bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = ImageRgb::from_fn(9, 12, |y, x| [(y * 20) as f32 / 255.0, (x * 10) as f32 / 255.0, 1.0]).unwrap();
        img.save_png(&path).unwrap();
        assert_eq!(ImageRgb::load_png(&path).unwrap(), img);
    }

    #[test]
    fn chw_roundtrip() {
        let img = random_image(8, 10, 4);
        assert_eq!(ImageRgb::from_chw(8, 10, &img.to_chw()).unwrap(), img);
    }
}
