//! Independent reference implementations shared by the integration tests
//! and the acceptance run.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use difflare::imaging::ImageRgb;
use difflare::nn::ParamStore;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn noise_image(h: usize, w: usize, seed: u64) -> ImageRgb {
    // xorshift keeps the oracle independent of the crate's generators
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let mut next = move || {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 40) as f32 / (1u64 << 24) as f32
    };
    ImageRgb::from_fn(h, w, |_, _| [next(), next(), next()]).unwrap()
}

/// SSIM by direct 2-D windowed sums, per channel, valid positions only.
pub fn ssim_oracle(a: &ImageRgb, b: &ImageRgb) -> f64 {
    let (h, w) = a.shape();
    let size = 11usize;
    let sigma = 1.5f64;
    let mut g = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            g[i * size + j] = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
        }
    }
    let norm: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= norm);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for c in 0..3 {
        let mut acc = 0.0;
        let mut count = 0;
        for y in 0..=h - size {
            for x in 0..=w - size {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..size {
                    for j in 0..size {
                        let k = g[i * size + j];
                        let p = a.get(y + i, x + j)[c] as f64;
                        let q = b.get(y + i, x + j)[c] as f64;
                        mx += k * p;
                        my += k * q;
                        xx += k * p * p;
                        yy += k * q * q;
                        xy += k * p * q;
                    }
                }
                let (sx, sy, sxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                acc += ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sx + sy + c2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    total / 3.0
}

pub const COORDS: usize = 50;
pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-2;

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            // Box-Muller from two uniforms
            let (u1, u2): (f64, f64) = (rng.random_range(1e-12..1.0), rng.random());
            scale * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

/// Replaces every parameter (including zero-initialized ones) with random
/// values so no gradient is trivially zero.
pub fn randomize(store: &ParamStore, rng: &mut ChaCha8Rng, scale: f64) -> Vec<(String, Var)> {
    store
        .names()
        .into_iter()
        .map(|name| {
            let var = store.get(&name).unwrap();
            var.set(&randn(rng, var.dims(), scale)).unwrap();
            (name, var)
        })
        .collect()
}

pub fn values(var: &Var) -> Vec<f64> {
    var.as_tensor().flatten_all().unwrap().to_vec1().unwrap()
}

/// Compares d(loss)/d(var) at `COORDS` random coordinates spread over
/// `vars`; returns the worst relative error.
pub fn check(vars: &[(String, Var)], loss: impl Fn() -> Tensor, rng: &mut ChaCha8Rng) -> f64 {
    let grads = loss().backward().unwrap();
    let sizes: Vec<usize> = vars.iter().map(|(_, v)| v.elem_count()).collect();
    let total: usize = sizes.iter().sum();
    let mut worst: f64 = 0.0;
    for _ in 0..COORDS {
        let mut pick = rng.random_range(0..total);
        let mut which = 0;
        while pick >= sizes[which] {
            pick -= sizes[which];
            which += 1;
        }
        let (name, var) = &vars[which];
        let analytic: f64 = grads
            .get(var)
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[pick])
            .unwrap_or(0.0);
        let base = values(var);
        let eval = |delta: f64| {
            let mut v = base.clone();
            v[pick] += delta;
            var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap()).unwrap();
            loss().to_scalar::<f64>().unwrap()
        };
        let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
        var.set(&Tensor::from_vec(base, var.dims(), &Device::Cpu).unwrap()).unwrap();
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(rel < TOLERANCE, "{name}[{pick}]: analytic {analytic} numeric {numeric}");
        worst = worst.max(rel);
    }
    worst
}

pub fn weighted_sum(out: &Tensor, probe: &Tensor) -> Tensor {
    (out * probe).unwrap().sum_all().unwrap()
}

pub struct Case {
    pub b: usize,
    pub n: usize,
    pub d: usize,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub mask: Vec<f64>,
}

pub fn random_case(rng: &mut ChaCha8Rng, binary_mask: bool) -> Case {
    let b = rng.random_range(1..=3);
    let n = rng.random_range(1..=8);
    let d = rng.random_range(1..=8);
    let mut draw = |len: usize| (0..len).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
    let (q, k, v) = (draw(b * n * d), draw(b * n * d), draw(b * n * d));
    let mask = (0..b * n * n)
        .map(|_| {
            if binary_mask {
                f64::from(rng.random_bool(0.7))
            } else {
                rng.random_range(0.0..1.0)
            }
        })
        .collect();
    Case { b, n, d, q, k, v, mask }
}

/// Scalar reference: one query row at a time, max-shifted softmax.
pub fn attention_oracle(c: &Case, mask: Option<&[f64]>, additive: bool) -> Vec<f64> {
    let (n, d) = (c.n, c.d);
    let mut out = vec![0.0; c.b * n * d];
    for b in 0..c.b {
        for i in 0..n {
            let mut scores = vec![0.0; n];
            for j in 0..n {
                let mut s = 0.0;
                for e in 0..d {
                    s += c.q[(b * n + i) * d + e] * c.k[(b * n + j) * d + e];
                }
                s /= (d as f64).sqrt();
                if let Some(m) = mask {
                    let mij = m[(b * n + i) * n + j];
                    s = if additive {
                        if mij == 0.0 {
                            -1e4
                        } else {
                            s
                        }
                    } else {
                        s * mij
                    };
                }
                scores[j] = s;
            }
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = weights.iter().sum();
            for e in 0..d {
                out[(b * n + i) * d + e] = (0..n).map(|j| weights[j] / z * c.v[(b * n + j) * d + e]).sum();
            }
        }
    }
    out
}

pub fn tensors(c: &Case) -> (Tensor, Tensor, Tensor, Tensor) {
    let dev = Device::Cpu;
    let t = |v: &[f64], shape: (usize, usize, usize)| Tensor::from_slice(v, shape, &dev).unwrap();
    (
        t(&c.q, (c.b, c.n, c.d)),
        t(&c.k, (c.b, c.n, c.d)),
        t(&c.v, (c.b, c.n, c.d)),
        t(&c.mask, (c.b, c.n, c.n)),
    )
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
}

pub fn max_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

