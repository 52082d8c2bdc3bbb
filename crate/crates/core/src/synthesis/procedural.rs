//! Procedural stand-ins for captured flare assets and background photographs.
//!
//! Scattering flares are radial streak fans around the light source;
//! reflective flares are chains of faint discs or polygons on a line through
//! the frame centre. Both have compact support, so most pixels are exactly 0.

use std::f32::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageRgb;
use crate::rng::keyed_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlareKind {
    Scattering,
    Reflective,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatteringParams {
    pub size: usize,
    /// Light position `(y, x)` in pixels.
    pub center: (f32, f32),
    /// Peak value in `[0, 1]`.
    pub intensity: f32,
    /// Support radius in pixels; the flare is exactly zero beyond it.
    pub radius: f32,
    /// Number of streaks, `0..=64`.
    pub streaks: u32,
    /// Fraction of the peak carried by the isotropic glow, `[0, 1]`.
    pub glow: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReflectiveParams {
    pub size: usize,
    /// Opacity of every ghost in `[0, 1]`.
    pub intensity: f32,
    /// Number of ghosts, `1..=16`.
    pub count: u32,
    /// Nominal ghost radius in pixels; each ghost is jittered to `[0.7, 1.0]` of it.
    pub radius: f32,
    /// Centre-to-centre distance between neighbouring ghosts.
    pub spacing: f32,
    /// Direction of the ghost line through the frame centre.
    pub angle_deg: f32,
    /// 0 for discs, otherwise polygon side count (`3..=8`).
    pub sides: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum FlareParams {
    Scattering(ScatteringParams),
    Reflective(ReflectiveParams),
}

impl FlareParams {
    pub fn kind(&self) -> FlareKind {
        match self {
            FlareParams::Scattering(_) => FlareKind::Scattering,
            FlareParams::Reflective(_) => FlareKind::Reflective,
        }
    }

    /// Random parameters in the ranges used by the procedural asset bank.
    pub fn random(kind: FlareKind, size: usize, seed: u64) -> Self {
        let mut rng = keyed_rng(seed, "flare-params", kind as u64);
        let s = size as f32;
        let c = s / 2.0 - 0.5;
        match kind {
            FlareKind::Scattering => FlareParams::Scattering(ScatteringParams {
                size,
                center: (c, c),
                intensity: rng.random_range(0.7..1.0),
                radius: rng.random_range(0.45 * s..0.8 * s),
                streaks: rng.random_range(4..=12),
                glow: rng.random_range(0.4..0.8),
            }),
            FlareKind::Reflective => {
                let count = rng.random_range(2..=4);
                let radius = rng.random_range(0.05 * s..0.09 * s);
                FlareParams::Reflective(ReflectiveParams {
                    size,
                    intensity: rng.random_range(0.45..0.75),
                    count,
                    radius,
                    spacing: rng.random_range(2.3 * radius..3.0 * radius),
                    angle_deg: rng.random_range(0.0..180.0),
                    sides: if rng.random::<bool>() { 0 } else { rng.random_range(5..=8) },
                })
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Parameter(format!("{msg}: {self:?}")));
        match self {
            FlareParams::Scattering(p) => {
                if p.size < 8 {
                    return bad("flare canvas must be at least 8 pixels");
                }
                if !(0.0..=1.0).contains(&p.intensity) || !(0.0..=1.0).contains(&p.glow) {
                    return bad("intensity and glow must lie in [0,1]");
                }
                if !(p.radius > 0.0) || p.streaks > 64 {
                    return bad("radius must be positive and streaks at most 64");
                }
            }
            FlareParams::Reflective(p) => {
                if p.size < 8 {
                    return bad("flare canvas must be at least 8 pixels");
                }
                if !(0.0..=1.0).contains(&p.intensity) {
                    return bad("intensity must lie in [0,1]");
                }
                if !(1..=16).contains(&p.count) || !(p.radius > 0.0) {
                    return bad("need 1..=16 ghosts with positive radius");
                }
                if p.sides != 0 && !(3..=8).contains(&p.sides) {
                    return bad("polygon ghosts need 3..=8 sides");
                }
                if p.count > 1 && p.spacing <= 2.0 * p.radius {
                    return bad("ghost spacing must exceed twice the radius");
                }
            }
        }
        Ok(())
    }
}

/// Renders one flare layer. `seed` drives per-ghost jitter and colour tint.
pub fn procedural_flare(params: &FlareParams, seed: u64) -> Result<ImageRgb> {
    params.validate()?;
    match params {
        FlareParams::Scattering(p) => Ok(scattering(p, seed)),
        FlareParams::Reflective(p) => Ok(reflective(p, seed)),
    }
}

fn tint(rng: &mut impl Rng) -> [f32; 3] {
    // warm-to-neutral tints; the brightest channel is always 1
    let g = rng.random_range(0.75..1.0);
    let b = rng.random_range(0.45..g);
    [1.0, g, b]
}

fn scattering(p: &ScatteringParams, seed: u64) -> ImageRgb {
    let mut rng = keyed_rng(seed, "scattering", 0);
    let col = tint(&mut rng);
    let phase = rng.random_range(0.0..PI);
    let k = p.streaks as f32;
    ImageRgb::from_fn(p.size, p.size, |y, x| {
        let dy = y as f32 - p.center.0;
        let dx = x as f32 - p.center.1;
        let r = (dx * dx + dy * dy).sqrt();
        if r >= p.radius {
            return [0.0; 3];
        }
        let fall = (1.0 - r / p.radius).powf(1.5);
        let streak = if r == 0.0 || p.streaks == 0 {
            1.0
        } else {
            (0.5 * k * dy.atan2(dx) + phase).cos().abs().powi(16)
        };
        let v = p.intensity * fall * (p.glow * fall + (1.0 - p.glow) * streak);
        col.map(|c| c * v)
    })
    .expect("canvas validated")
}

fn reflective(p: &ReflectiveParams, seed: u64) -> ImageRgb {
    let mut rng = keyed_rng(seed, "reflective", 0);
    let s = p.size as f32;
    let c = s / 2.0 - 0.5;
    let (dir_y, dir_x) = p.angle_deg.to_radians().sin_cos();
    let ghosts: Vec<((f32, f32), f32, [f32; 3], f32)> = (0..p.count)
        .map(|i| {
            let offset = (i as f32 - (p.count as f32 - 1.0) / 2.0) * p.spacing;
            let radius = p.radius * rng.random_range(0.7..1.0);
            let rot = rng.random_range(0.0..2.0 * PI);
            ((c + offset * dir_y, c + offset * dir_x), radius, tint(&mut rng), rot)
        })
        .collect();
    ImageRgb::from_fn(p.size, p.size, |y, x| {
        let mut px = [0.0f32; 3];
        for &((gy, gx), radius, col, rot) in &ghosts {
            let dy = y as f32 - gy;
            let dx = x as f32 - gx;
            let mut r = (dx * dx + dy * dy).sqrt();
            if p.sides >= 3 {
                // distance normalized by the regular polygon's support function
                let seg = 2.0 * PI / p.sides as f32;
                let a = (dy.atan2(dx) + rot).rem_euclid(seg) - seg / 2.0;
                r /= (PI / p.sides as f32).cos() / a.cos();
            }
            if r >= radius {
                continue;
            }
            let edge = ((radius - r) / (0.3 * radius)).min(1.0);
            for k in 0..3 {
                px[k] = px[k].max(p.intensity * edge * col[k]);
            }
        }
        px
    })
    .expect("canvas validated")
}

/// Gaussian light source with peak value `peak` (at least 0.9) at `center`.
pub fn procedural_light(size: usize, center: (f32, f32), sigma: f32, peak: f32) -> Result<ImageRgb> {
    if !(0.9..=1.0).contains(&peak) || !(sigma > 0.0) {
        return Err(Error::Parameter(format!("light source needs peak in [0.9,1] and sigma > 0, got {peak}, {sigma}")));
    }
    ImageRgb::from_fn(size, size, |y, x| {
        let d2 = (y as f32 - center.0).powi(2) + (x as f32 - center.1).powi(2);
        let v = peak * (-d2 / (2.0 * sigma * sigma)).exp();
        // cut the tail so the light has compact support as well
        let v = if v < 1e-3 { 0.0 } else { v };
        [v; 3]
    })
}

/// Smooth synthetic scene: a two-colour gradient, a few soft shapes, and a
/// faint ripple texture. Values stay in roughly `[0.02, 0.7]`.
pub fn procedural_background(height: usize, width: usize, seed: u64) -> Result<ImageRgb> {
    let mut rng = keyed_rng(seed, "background", 0);
    let color = |rng: &mut rand_chacha::ChaCha8Rng| -> [f32; 3] {
        [rng.random_range(0.03..0.6), rng.random_range(0.03..0.6), rng.random_range(0.03..0.6)]
    };
    let top = color(&mut rng);
    let bottom = color(&mut rng);
    let angle: f32 = rng.random_range(0.0..2.0 * PI);
    struct Shape {
        cy: f32,
        cx: f32,
        ry: f32,
        rx: f32,
        rect: bool,
        col: [f32; 3],
        alpha: f32,
    }
    let n_shapes = rng.random_range(3..=6);
    let (hf, wf) = (height as f32, width as f32);
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| Shape {
            cy: rng.random_range(0.0..hf),
            cx: rng.random_range(0.0..wf),
            ry: rng.random_range(0.08 * hf..0.3 * hf),
            rx: rng.random_range(0.08 * wf..0.3 * wf),
            rect: rng.random::<bool>(),
            col: color(&mut rng),
            alpha: rng.random_range(0.5..0.9),
        })
        .collect();
    let ripple_f = rng.random_range(0.1..0.3);
    let ripple_a = rng.random_range(0.0..0.03);
    let ripple_dir: f32 = rng.random_range(0.0..PI);
    ImageRgb::from_fn(height, width, |y, x| {
        let (yf, xf) = (y as f32, x as f32);
        let t = ((yf / hf - 0.5) * angle.cos() + (xf / wf - 0.5) * angle.sin() + 0.5).clamp(0.0, 1.0);
        let mut px = [0.0f32; 3];
        for k in 0..3 {
            px[k] = top[k] * (1.0 - t) + bottom[k] * t;
        }
        for s in &shapes {
            let dy = (yf - s.cy) / s.ry;
            let dx = (xf - s.cx) / s.rx;
            let d = if s.rect { dy.abs().max(dx.abs()) } else { (dy * dy + dx * dx).sqrt() };
            // soft edge about two pixels wide
            let edge = ((1.0 - d) * s.ry.min(s.rx) / 2.0).clamp(0.0, 1.0) * s.alpha;
            for k in 0..3 {
                px[k] = px[k] * (1.0 - edge) + s.col[k] * edge;
            }
        }
        let ripple = ripple_a * (ripple_f * (yf * ripple_dir.sin() + xf * ripple_dir.cos())).sin();
        px.map(|v| (v + ripple).clamp(0.02, 0.7))
    })
}
