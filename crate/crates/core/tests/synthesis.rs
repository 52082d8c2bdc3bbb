use std::collections::BTreeSet;

use difflare::imaging::ImageRgb;
use difflare::synthesis::{composite, dataset_stream, CorpusConfig, CorpusManifest, CorpusSource, Split};
use difflare::Error;
use proptest::prelude::*;

fn config(train: usize, test: usize, per_background: usize) -> CorpusConfig {
    CorpusConfig {
        source: CorpusSource::Procedural {
            train_backgrounds: train,
            test_backgrounds: test,
            flare_assets: 12,
        },
        seed: 77,
        crop: 32,
        background_size: 40,
        samples_per_background: per_background,
        ..CorpusConfig::default()
    }
}

fn oracle(values: &[f32]) -> f32 {
    let sum: f64 = values.iter().map(|&v| (v.max(0.0) as f64).powf(2.2)).sum();
    sum.min(1.0).powf(1.0 / 2.2) as f32
}

fn layer() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(prop_oneof![Just(0.0f32), Just(1.0f32), 0.0f32..=1.0], 8 * 8 * 3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composite_matches_linear_light_sum(layers in prop::collection::vec(layer(), 1..5)) {
        let images: Vec<ImageRgb> = layers.iter().map(|p| ImageRgb::new(8, 8, p.clone()).unwrap()).collect();
        let refs: Vec<&ImageRgb> = images.iter().collect();
        let out = composite(&refs).unwrap();
        for (i, &got) in out.pixels().iter().enumerate() {
            let column: Vec<f32> = layers.iter().map(|l| l[i]).collect();
            prop_assert!((got - oracle(&column)).abs() < 1e-6);
        }
        let mut reversed = refs.clone();
        reversed.reverse();
        prop_assert_eq!(composite(&reversed).unwrap(), out);
    }
}

#[test]
fn composite_identities() {
    let a = ImageRgb::from_fn(8, 8, |y, x| [y as f32 / 8.0, x as f32 / 8.0, 0.3]).unwrap();
    let black = ImageRgb::zeros(8, 8).unwrap();
    let out = composite(&[&a, &black]).unwrap();
    for (p, q) in out.pixels().iter().zip(a.pixels()) {
        assert!((p - q).abs() < 1e-6);
    }
    let white = ImageRgb::filled(8, 8, [1.0; 3]).unwrap();
    assert!(composite(&[&a, &white]).unwrap().pixels().iter().all(|&v| v == 1.0));
    assert!(composite(&[]).is_err());
    assert!(composite(&[&a, &ImageRgb::zeros(8, 9).unwrap()]).is_err());
}

#[test]
fn thousand_samples_keep_flare_free_pixels_intact() {
    let stream = dataset_stream(&config(250, 4, 4), Split::Train).unwrap();
    assert_eq!(stream.len(), 1000);
    let mut free = 0usize;
    for s in stream {
        let s = s.unwrap();
        assert_eq!(s.gt, composite(&[&s.background, &s.light_source]).unwrap());
        assert_eq!(s.input, composite(&[&s.background, &s.light_source, &s.reflective, &s.scattering]).unwrap());
        for (i, clean) in s.flare_free_pixels().into_iter().enumerate() {
            if clean {
                free += 1;
                assert_eq!(s.input.pixels()[3 * i..3 * i + 3], s.gt.pixels()[3 * i..3 * i + 3], "sample {}", s.seed);
            }
        }
        assert!(s.input.pixels().iter().zip(s.gt.pixels()).all(|(x, g)| x >= g));
    }
    assert!(free > 0, "no flare-free pixels in 1000 samples");
}

#[test]
fn manifest_regenerates_bit_identical_samples() {
    let dir = tempfile::tempdir().unwrap();
    for split in [Split::Train, Split::Test] {
        let stream = dataset_stream(&config(6, 3, 2), split).unwrap().with_epoch(2);
        let path = dir.path().join("manifest.json");
        stream.manifest().unwrap().save(&path).unwrap();
        let manifest = CorpusManifest::load(&path).unwrap();
        assert_eq!(manifest.samples.len(), stream.len());
        for entry in &manifest.samples {
            let again = manifest.regenerate(entry).unwrap();
            let original = stream.sample(entry.index).unwrap();
            assert_eq!(again, original);
            assert_eq!(again.seed, entry.seed);
            assert_eq!(again.asset_ids, entry.assets);
        }
    }
}

#[test]
fn epochs_and_splits_differ() {
    let cfg = config(6, 6, 1);
    let train = dataset_stream(&cfg, Split::Train).unwrap();
    let test = dataset_stream(&cfg, Split::Test).unwrap();
    let ids = |s: &difflare::synthesis::DatasetStream| -> BTreeSet<String> {
        (0..s.len()).map(|i| s.sample(i).unwrap().asset_ids.background).collect()
    };
    assert!(ids(&train).is_disjoint(&ids(&test)));
    let later = dataset_stream(&cfg, Split::Train).unwrap().with_epoch(1);
    assert_ne!(train.sample(0).unwrap().input, later.sample(0).unwrap().input);
    assert!(matches!(train.sample(6), Err(Error::Corpus(_))));
}

#[test]
fn folder_source_requires_backgrounds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CorpusConfig {
        source: CorpusSource::Folder {
            root: dir.path().to_path_buf(),
            test_backgrounds: 1,
        },
        ..config(1, 1, 1)
    };
    assert!(matches!(dataset_stream(&cfg, Split::Train), Err(Error::Corpus(_))));
}
