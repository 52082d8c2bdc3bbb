//! Background pools, flare asset banks, and the deterministic sample stream.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::procedural::{procedural_background, procedural_flare, procedural_light, FlareKind, FlareParams};
use super::{make_sample, AugmentRanges, AugmentSpec, AssetIds, FlareSample};
use crate::error::{Error, Result};
use crate::imaging::ImageRgb;
use crate::rng::{derive_seed, keyed_rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CorpusSource {
    /// Synthetic backgrounds and flares generated from the corpus seed.
    Procedural {
        train_backgrounds: usize,
        test_backgrounds: usize,
        flare_assets: usize,
    },
    /// `root/backgrounds/*.png`, `root/flares/{scattering,reflective}/*.png`,
    /// `root/light/*.png`. The first `test_backgrounds` files (sorted by
    /// name) form the test pool.
    Folder { root: PathBuf, test_backgrounds: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub source: CorpusSource,
    pub seed: u64,
    /// Side of the square training crop.
    pub crop: usize,
    /// Side of generated backgrounds; must be at least `crop`.
    pub background_size: usize,
    pub samples_per_background: usize,
    pub augment: AugmentRanges,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            source: CorpusSource::Procedural {
                train_backgrounds: 512,
                test_backgrounds: 32,
                flare_assets: 48,
            },
            seed: 0,
            crop: 64,
            background_size: 80,
            samples_per_background: 1,
            augment: AugmentRanges::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop < 16 || self.crop % 4 != 0 {
            return Err(Error::Config(format!("crop must be a multiple of 4 and at least 16, got {}", self.crop)));
        }
        if self.background_size < self.crop {
            return Err(Error::Config("background_size must be at least crop".into()));
        }
        if self.samples_per_background == 0 {
            return Err(Error::Config("samples_per_background must be positive".into()));
        }
        self.augment.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Flare layers keyed by asset id. Light sources pair with scattering
/// flares by index.
#[derive(Clone, Debug, Default)]
pub struct AssetBank {
    pub scattering: Vec<(String, ImageRgb)>,
    pub reflective: Vec<(String, ImageRgb)>,
    pub light: Vec<(String, ImageRgb)>,
}

impl AssetBank {
    pub fn procedural(size: usize, count: usize, seed: u64) -> Result<Self> {
        let mut bank = AssetBank::default();
        let centre = (size / 2) as f32;
        for i in 0..count as u64 {
            let s = derive_seed(seed, "asset", i);
            let FlareParams::Scattering(mut sp) = FlareParams::random(FlareKind::Scattering, size, s) else {
                unreachable!()
            };
            sp.center = (centre, centre);
            bank.scattering
                .push((format!("scattering-{i:04}"), procedural_flare(&FlareParams::Scattering(sp), s)?));
            let rp = FlareParams::random(FlareKind::Reflective, size, s);
            bank.reflective.push((format!("reflective-{i:04}"), procedural_flare(&rp, s)?));
            let sigma = keyed_rng(s, "light-sigma", 0).random_range(1.8..2.8);
            bank.light
                .push((format!("light-{i:04}"), procedural_light(size, (centre, centre), sigma, 1.0)?));
        }
        Ok(bank)
    }

    pub fn from_folder(root: &Path) -> Result<Self> {
        let load = |sub: &str| -> Result<Vec<(String, ImageRgb)>> {
            let files = list_pngs(&root.join(sub))?;
            if files.is_empty() {
                return Err(Error::Asset(format!("no PNG assets under {}", root.join(sub).display())));
            }
            files
                .into_iter()
                .map(|p| Ok((asset_id(&p), ImageRgb::load_png(&p)?)))
                .collect()
        };
        Ok(Self {
            scattering: load("flares/scattering")?,
            reflective: load("flares/reflective")?,
            light: load("light")?,
        })
    }
}

fn asset_id(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

enum BackgroundPool {
    Procedural { ids: Vec<u64>, size: usize, seed: u64 },
    Files(Vec<PathBuf>),
}

impl BackgroundPool {
    fn len(&self) -> usize {
        match self {
            BackgroundPool::Procedural { ids, .. } => ids.len(),
            BackgroundPool::Files(f) => f.len(),
        }
    }

    fn load(&self, i: usize) -> Result<(String, ImageRgb)> {
        match self {
            BackgroundPool::Procedural { ids, size, seed } => {
                let id = ids[i];
                let img = procedural_background(*size, *size, derive_seed(*seed, "background", id))?;
                Ok((format!("background-{id:05}"), img))
            }
            BackgroundPool::Files(files) => Ok((asset_id(&files[i]), ImageRgb::load_png(&files[i])?)),
        }
    }
}

/// One epoch of samples for a split, in a fixed order.
pub struct DatasetStream {
    config: CorpusConfig,
    split: Split,
    epoch: u64,
    pool: BackgroundPool,
    assets: AssetBank,
    cursor: usize,
}

pub fn dataset_stream(config: &CorpusConfig, split: Split) -> Result<DatasetStream> {
    DatasetStream::new(config, split)
}

impl DatasetStream {
    pub fn new(config: &CorpusConfig, split: Split) -> Result<Self> {
        config.validate()?;
        let (pool, assets) = match &config.source {
            CorpusSource::Procedural {
                train_backgrounds,
                test_backgrounds,
                flare_assets,
            } => {
                // test ids come first, train ids follow: the pools never overlap
                let ids: Vec<u64> = match split {
                    Split::Test => (0..*test_backgrounds as u64).collect(),
                    Split::Train => (*test_backgrounds as u64..(*test_backgrounds + *train_backgrounds) as u64).collect(),
                };
                let pool = BackgroundPool::Procedural {
                    ids,
                    size: config.background_size,
                    seed: config.seed,
                };
                (pool, AssetBank::procedural(config.crop, *flare_assets, config.seed)?)
            }
            CorpusSource::Folder { root, test_backgrounds } => {
                let bg_dir = root.join("backgrounds");
                if !bg_dir.is_dir() {
                    return Err(Error::Corpus(format!("missing background folder {}", bg_dir.display())));
                }
                let files = list_pngs(&bg_dir)?;
                let cut = (*test_backgrounds).min(files.len());
                let files = match split {
                    Split::Test => files[..cut].to_vec(),
                    Split::Train => files[cut..].to_vec(),
                };
                (BackgroundPool::Files(files), AssetBank::from_folder(root)?)
            }
        };
        if pool.len() == 0 {
            return Err(Error::Corpus(format!("the {} split has no backgrounds", split.label())));
        }
        Ok(Self {
            config: config.clone(),
            split,
            epoch: 0,
            pool,
            assets,
            cursor: 0,
        })
    }

    /// Restarts the stream at the beginning of `epoch`; each epoch draws
    /// fresh augmentations over the same backgrounds.
    pub fn with_epoch(mut self, epoch: u64) -> Self {
        self.epoch = epoch;
        self.cursor = 0;
        self
    }

    pub fn len(&self) -> usize {
        self.pool.len() * self.config.samples_per_background
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn assets(&self) -> &AssetBank {
        &self.assets
    }

    pub fn sample_seed(&self, index: usize) -> u64 {
        let counter = self.epoch * self.len() as u64 + index as u64;
        derive_seed(self.config.seed, self.split.label(), counter)
    }

    /// Random access into the current epoch.
    pub fn sample(&self, index: usize) -> Result<FlareSample> {
        if index >= self.len() {
            return Err(Error::Corpus(format!("sample index {index} beyond epoch of {}", self.len())));
        }
        let (bg_id, bg) = self.pool.load(index / self.config.samples_per_background)?;
        make_sample(
            &bg,
            &bg_id,
            &self.assets,
            self.sample_seed(index),
            self.config.crop,
            &self.config.augment,
        )
    }

    pub fn manifest(&self) -> Result<CorpusManifest> {
        let samples = (0..self.len())
            .map(|i| {
                let s = self.sample(i)?;
                Ok(ManifestEntry {
                    split: self.split,
                    epoch: self.epoch,
                    index: i,
                    seed: s.seed,
                    assets: s.asset_ids,
                    augment: s.augment,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CorpusManifest {
            corpus: self.config.clone(),
            samples,
        })
    }
}

impl Iterator for DatasetStream {
    type Item = Result<FlareSample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.len() {
            return None;
        }
        let s = self.sample(self.cursor);
        self.cursor += 1;
        Some(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: Split,
    pub epoch: u64,
    pub index: usize,
    pub seed: u64,
    pub assets: AssetIds,
    pub augment: AugmentSpec,
}

/// Everything needed to regenerate a split exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub corpus: CorpusConfig,
    pub samples: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn regenerate(&self, entry: &ManifestEntry) -> Result<FlareSample> {
        DatasetStream::new(&self.corpus, entry.split)?
            .with_epoch(entry.epoch)
            .sample(entry.index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
