mod common;

use common::{noise_image, ssim_oracle};
use difflare::imaging::{psnr, ssim, ImageRgb};
use proptest::prelude::*;

#[test]
fn psnr_uniform_offsets() {
    let a = ImageRgb::filled(16, 16, [0.4; 3]).unwrap();
    let b = ImageRgb::filled(16, 16, [0.5; 3]).unwrap();
    let c = ImageRgb::filled(16, 16, [0.41; 3]).unwrap();
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
    assert!((psnr(&a, &c).unwrap() - 40.0).abs() < 1e-3);
}

#[test]
fn ssim_of_identical_images_is_one() {
    let a = noise_image(24, 20, 3);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn ssim_matches_direct_window_sums() {
    for seed in 0..4 {
        let a = noise_image(16, 19, seed);
        let b = noise_image(16, 19, seed + 100);
        let mixed = ImageRgb::from_fn(16, 19, |y, x| {
            let (p, q) = (a.get(y, x), b.get(y, x));
            [0.7 * p[0] + 0.3 * q[0], 0.7 * p[1] + 0.3 * q[1], 0.7 * p[2] + 0.3 * q[2]]
        })
        .unwrap();
        for other in [&b, &mixed] {
            let ours = ssim(&a, other).unwrap();
            let oracle = ssim_oracle(&a, other);
            assert!((ours - oracle).abs() < 1e-9, "seed {seed}: {ours} vs {oracle}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn psnr_follows_mse(level in 0.0f32..0.9, offset in 0.001f32..0.1) {
        let a = ImageRgb::filled(12, 12, [level; 3]).unwrap();
        let b = ImageRgb::filled(12, 12, [level + offset; 3]).unwrap();
        let d = ((level + offset) as f64) - level as f64;
        let expected = -10.0 * (d * d).log10();
        prop_assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-6);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(s1 in 0u64..1000, s2 in 0u64..1000) {
        let a = noise_image(12, 12, s1);
        let b = noise_image(12, 12, s2);
        let ab = ssim(&a, &b).unwrap();
        prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
    }
}
