//! Staged training, inference and evaluation on disk.
//!
//! A run directory holds one subdirectory per stage plus `manifest.json`,
//! which records each stage's input and output hashes, seed and wall time.
//! Stages run in the order synth, train-vq, train-diffusion, train-sgim,
//! train-affm; each refuses to start unless the stages it reads from are
//! recorded and unchanged.

mod config;
mod eval;
mod manifest;
mod restore;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use log::info;
use serde::Serialize;

pub use config::{config_hash, AffmSection, EvalConfig, InferConfig, Preset, RunConfig, Variant, HOME_ENV};
pub use eval::{aggregate, masked_mae, score, Aggregate, EvalReport, ImageEval, Runtime, VariantMetrics};
pub use manifest::{FileHash, RunManifest, Stage, StageRecord, MANIFEST_FILE};
pub use restore::{
    build_pool, condition, infer, load_affm, pixel_masks, restore_batch, Backbone, AFFM_CHECKPOINT,
    AFFM_UNGUIDED_CHECKPOINT, DIFFUSION_CHECKPOINT, SGIM_CHECKPOINT, VQ_CHECKPOINT,
};

use crate::affm::{train_affm, FusionConfig};
use crate::diffusion::{pretrain_diffusion, Denoiser};
use crate::error::{Error, Result};
use crate::imaging::ImageRgb;
use crate::nn::{images_to_tensor, tensor_to_images, Checkpoint};
use crate::rng::derive_seed;
use crate::sgim::{train_sgim, LatentPairs};
use crate::synthesis::{CorpusManifest, DatasetStream, FlareSample, Split};
use crate::vq::{pretrain_vq, VqAutoencoder};

pub const TRAIN_MANIFEST: &str = "corpus/train.json";
pub const TEST_MANIFEST: &str = "corpus/test.json";
pub const EVAL_REPORT: &str = "eval/report.json";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

/// A run directory and the configuration it is driven by.
pub struct Run {
    cfg: RunConfig,
    root: PathBuf,
}

impl Run {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let root = cfg.resolved_out_dir();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { cfg, root })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        RunManifest::load(&self.root)
    }

    fn write(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        self.write(rel, serde_json::to_string_pretty(value)?.as_bytes())
    }

    fn save_checkpoint(&self, rel: &str, ck: &Checkpoint) -> Result<()> {
        self.write(rel, &ck.to_bytes()?)
    }

    /// Writes the resolved configuration at the run root and, frozen, into
    /// `dir`; returns the frozen copy's relative path. The output location
    /// is left out so a run directory hashes the same wherever it lives.
    fn freeze_config(&self, dir: &str) -> Result<String> {
        let text = RunConfig {
            out_dir: None,
            ..self.cfg.clone()
        }
        .to_toml_string()?;
        self.write(RESOLVED_CONFIG, text.as_bytes())?;
        let rel = format!("{dir}/config.toml");
        self.write(&rel, text.as_bytes())?;
        Ok(rel)
    }

    fn hashes(&self, rels: &[String]) -> Result<Vec<FileHash>> {
        rels.iter().map(|r| FileHash::of(&self.root, r)).collect()
    }

    /// Runs one stage and records it in the manifest.
    pub fn run_stage(&self, stage: Stage) -> Result<StageRecord> {
        let mut manifest = self.manifest()?;
        manifest.require_all(&self.root, stage)?;
        let started = Instant::now();
        info!("stage {stage} starting in {}", self.root.display());
        let (seed, config_hash, inputs, mut outputs) = match stage {
            Stage::Synth => self.synth()?,
            Stage::TrainVq => self.train_vq()?,
            Stage::TrainDiffusion => self.train_diffusion()?,
            Stage::TrainSgim => self.train_sgim()?,
            Stage::TrainAffm => self.train_affm()?,
        };
        outputs.push(self.freeze_config(stage.dir())?);
        let record = StageRecord {
            stage,
            seed,
            config_hash,
            inputs: self.hashes(&inputs)?,
            outputs: self.hashes(&outputs)?,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        // a rebuilt stage invalidates everything downstream of it
        manifest.records.retain(|s, _| !s.dependencies().contains(&stage));
        manifest.records.insert(stage, record.clone());
        manifest.save(&self.root)?;
        info!("stage {stage} finished in {:.1} s", record.wall_time_s);
        Ok(record)
    }

    /// Every stage in order.
    pub fn run_all(&self) -> Result<Vec<StageRecord>> {
        Stage::ALL.iter().map(|&s| self.run_stage(s)).collect()
    }

    /// Regenerates a split from its recorded corpus manifest.
    pub fn load_split(&self, split: Split) -> Result<Vec<FlareSample>> {
        let rel = match split {
            Split::Train => TRAIN_MANIFEST,
            Split::Test => TEST_MANIFEST,
        };
        let manifest = CorpusManifest::load(&self.root.join(rel))?;
        let stream = DatasetStream::new(&manifest.corpus, split)?;
        manifest
            .samples
            .iter()
            .map(|entry| {
                if entry.epoch != 0 || entry.split != split {
                    return Err(Error::Integrity(format!("unexpected manifest entry {entry:?}")));
                }
                let sample = stream.sample(entry.index)?;
                if sample.seed != entry.seed || sample.asset_ids != entry.assets {
                    return Err(Error::Integrity(format!(
                        "sample {} of the {rel} corpus no longer regenerates as recorded",
                        entry.index
                    )));
                }
                Ok(sample)
            })
            .collect()
    }

    fn synth(&self) -> Result<(u64, String, Vec<String>, Vec<String>)> {
        let corpus = self.cfg.effective_corpus();
        let mut outputs = Vec::new();
        for (split, rel) in [(Split::Train, TRAIN_MANIFEST), (Split::Test, TEST_MANIFEST)] {
            let stream = DatasetStream::new(&corpus, split)?;
            let manifest = stream.manifest()?;
            self.write_json(rel, &manifest)?;
            outputs.push(rel.to_string());
            if split == Split::Test {
                for i in 0..stream.len() {
                    let s = stream.sample(i)?;
                    for (name, img) in [("input", &s.input), ("gt", &s.gt)] {
                        let rel = format!("corpus/test/{i:03}-{name}.png");
                        let path = self.root.join(&rel);
                        std::fs::create_dir_all(path.parent().expect("has parent"))
                            .map_err(|e| Error::io(&path, e))?;
                        img.save_png(&path)?;
                        outputs.push(rel);
                    }
                }
            }
        }
        Ok((corpus.seed, config_hash(&corpus)?, vec![], outputs))
    }

    fn train_vq(&self) -> Result<(u64, String, Vec<String>, Vec<String>)> {
        let cfg = self.cfg.effective_vq();
        let train = self.load_split(Split::Train)?;
        let gt: Vec<ImageRgb> = train.into_iter().map(|s| s.gt).collect();
        let (model, report) = pretrain_vq(&gt, &cfg)?;
        self.save_checkpoint(VQ_CHECKPOINT, &model.checkpoint()?)?;
        self.write_json("vq/report.json", &report)?;
        Ok((
            cfg.seed,
            config_hash(&cfg)?,
            vec![TRAIN_MANIFEST.into()],
            vec![VQ_CHECKPOINT.into(), "vq/report.json".into()],
        ))
    }

    fn load_vq(&self) -> Result<VqAutoencoder> {
        VqAutoencoder::from_checkpoint(&Checkpoint::load(&self.root.join(VQ_CHECKPOINT))?)
    }

    fn train_diffusion(&self) -> Result<(u64, String, Vec<String>, Vec<String>)> {
        let cfg = self.cfg.effective_diffusion();
        let vq = self.load_vq()?;
        let train = self.load_split(Split::Train)?;
        let test = self.load_split(Split::Test)?;
        let latents = encode_all(&vq, &train.iter().map(|s| &s.gt).collect::<Vec<_>>())?;
        let val = encode_all(&vq, &test.iter().map(|s| &s.gt).collect::<Vec<_>>())?;
        let (model, report) = pretrain_diffusion(&latents, &val, &cfg)?;
        self.save_checkpoint(DIFFUSION_CHECKPOINT, &model.checkpoint()?)?;
        self.write_json("diffusion/report.json", &report)?;
        Ok((
            cfg.seed,
            config_hash(&cfg)?,
            vec![TRAIN_MANIFEST.into(), TEST_MANIFEST.into(), VQ_CHECKPOINT.into()],
            vec![DIFFUSION_CHECKPOINT.into(), "diffusion/report.json".into()],
        ))
    }

    fn train_sgim(&self) -> Result<(u64, String, Vec<String>, Vec<String>)> {
        let cfg = self.cfg.effective_sgim();
        let vq = self.load_vq()?;
        let denoiser = Denoiser::from_checkpoint(&Checkpoint::load(&self.root.join(DIFFUSION_CHECKPOINT))?)?;
        let pairs = |samples: &[FlareSample]| -> Result<LatentPairs> {
            Ok(LatentPairs {
                clean: encode_all(&vq, &samples.iter().map(|s| &s.gt).collect::<Vec<_>>())?,
                corrupted: encode_all(&vq, &samples.iter().map(|s| &s.input).collect::<Vec<_>>())?,
            })
        };
        let train = pairs(&self.load_split(Split::Train)?)?;
        let val = pairs(&self.load_split(Split::Test)?)?;
        let (sgim, report) = train_sgim(&train, &val, &denoiser, &[("vq", vq.store())], &cfg)?;
        self.save_checkpoint(SGIM_CHECKPOINT, &sgim.checkpoint()?)?;
        self.write_json("sgim/report.json", &report)?;
        Ok((
            cfg.seed,
            config_hash(&cfg)?,
            vec![TRAIN_MANIFEST.into(), TEST_MANIFEST.into(), VQ_CHECKPOINT.into(), DIFFUSION_CHECKPOINT.into()],
            vec![SGIM_CHECKPOINT.into(), "sgim/report.json".into()],
        ))
    }

    fn train_affm(&self) -> Result<(u64, String, Vec<String>, Vec<String>)> {
        let section = &self.cfg.affm;
        let fusion = self.cfg.effective_fusion();
        let manifest = self.manifest()?;
        let models = Backbone::load(&self.root, &manifest, Stage::TrainAffm.name())?;
        let train = self.load_split(Split::Train)?;
        let need = section.pool_size + section.val_size;
        if train.len() < need {
            return Err(Error::Config(format!(
                "affm needs {need} training images for its pools but the corpus has {}",
                train.len()
            )));
        }
        let infer = &self.cfg.infer;
        let pool = |range: std::ops::Range<usize>, label: &str| {
            let samples = &train[range];
            let inputs: Vec<&ImageRgb> = samples.iter().map(|s| &s.input).collect();
            let targets: Vec<&ImageRgb> = samples.iter().map(|s| &s.gt).collect();
            let seeds: Vec<u64> = samples.iter().map(|s| derive_seed(fusion.seed, label, s.seed)).collect();
            build_pool(&models, &inputs, &targets, &seeds, infer, fusion.threshold)
        };
        let started = Instant::now();
        let train_pool = pool(0..section.pool_size, "pool")?;
        let val_pool = pool(section.pool_size..need, "val-pool")?;
        info!("fusion pools restored in {:.1} s", started.elapsed().as_secs_f64());

        let frozen = [
            ("vq", models.vq.store()),
            ("denoiser", models.denoiser.store()),
            ("sgim", models.sgim.store()),
        ];
        let mut reports = BTreeMap::new();
        let (full, report) = train_affm(&train_pool, &val_pool, &frozen, &fusion)?;
        self.save_checkpoint(AFFM_CHECKPOINT, &full.checkpoint()?)?;
        reports.insert("full", report);
        let mut outputs = vec![AFFM_CHECKPOINT.to_string()];
        if section.train_unguided {
            let unguided_cfg = FusionConfig {
                lgp_guidance: false,
                ..fusion.clone()
            };
            let (unguided, report) = train_affm(&train_pool, &val_pool, &frozen, &unguided_cfg)?;
            self.save_checkpoint(AFFM_UNGUIDED_CHECKPOINT, &unguided.checkpoint()?)?;
            reports.insert("unguided", report);
            outputs.push(AFFM_UNGUIDED_CHECKPOINT.into());
        }
        self.write_json("affm/report.json", &reports)?;
        outputs.push("affm/report.json".into());
        Ok((
            fusion.seed,
            config_hash(&(section, infer))?,
            vec![
                TRAIN_MANIFEST.into(),
                VQ_CHECKPOINT.into(),
                DIFFUSION_CHECKPOINT.into(),
                SGIM_CHECKPOINT.into(),
            ],
            outputs,
        ))
    }

    fn sample_seeds(&self, samples: &[FlareSample]) -> Vec<u64> {
        let base = self.cfg.infer_seed();
        samples.iter().map(|s| derive_seed(base, "restore", s.seed)).collect()
    }

    /// Restores the first `eval.images` test images and scores every
    /// requested variant. Writes `eval/report.json` and PNG panels
    /// (input, variants..., ground truth).
    pub fn evaluate(&self) -> Result<EvalReport> {
        let started = Instant::now();
        let manifest = self.manifest()?;
        let models = Backbone::load(&self.root, &manifest, "eval")?;
        let variants = &self.cfg.eval.variants;
        let full = variants
            .contains(&Variant::Full)
            .then(|| load_affm(&self.root, &manifest, AFFM_CHECKPOINT, "eval"))
            .transpose()?;
        let unguided = variants
            .contains(&Variant::UnguidedAffm)
            .then(|| load_affm(&self.root, &manifest, AFFM_UNGUIDED_CHECKPOINT, "eval"))
            .transpose()?;
        let mut test = self.load_split(Split::Test)?;
        test.truncate(self.cfg.eval.images);
        if test.is_empty() {
            return Err(Error::Corpus("the test split is empty".into()));
        }
        let threshold = full
            .as_ref()
            .or(unguided.as_ref())
            .map(|a| a.config().threshold)
            .unwrap_or(crate::lgp::DEFAULT_THRESHOLD);
        let seeds = self.sample_seeds(&test);
        let infer = &self.cfg.infer;

        let mut outputs: BTreeMap<Variant, Vec<ImageRgb>> = BTreeMap::new();
        let mut restore_s = 0.0;
        for (chunk, sds) in test.chunks(infer.batch).zip(seeds.chunks(infer.batch)) {
            let inputs: Vec<&ImageRgb> = chunk.iter().map(|s| &s.input).collect();
            let t0 = Instant::now();
            let restored = restore_batch(&models, &inputs, sds, infer, threshold)?;
            restore_s += t0.elapsed().as_secs_f64();
            for &v in variants {
                let imgs = match v {
                    Variant::Input => inputs.iter().map(|&i| i.clone()).collect(),
                    Variant::NoAffm => tensor_to_images(&restored.base)?,
                    Variant::UnguidedAffm => tensor_to_images(&unguided.as_ref().expect("loaded above").fuse(&restored)?)?,
                    Variant::Full => tensor_to_images(&full.as_ref().expect("loaded above").fuse(&restored)?)?,
                };
                outputs.entry(v).or_default().extend(imgs);
            }
        }

        let mut images = Vec::with_capacity(test.len());
        let mut input_psnr = Vec::with_capacity(test.len());
        for (i, s) in test.iter().enumerate() {
            let region = s.flare_free_pixels();
            input_psnr.push(crate::imaging::psnr(&s.input, &s.gt)?);
            let metrics = outputs
                .iter()
                .map(|(&v, imgs)| Ok((v, score(&imgs[i], &s.gt, &region)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            images.push(ImageEval {
                index: i,
                seed: s.seed,
                flare_free_pixels: region.iter().filter(|&&f| f).count(),
                metrics,
            });
            if i < self.cfg.eval.panels {
                let mut row: Vec<&ImageRgb> = vec![&s.input];
                row.extend(outputs.iter().filter(|(&v, _)| v != Variant::Input).map(|(_, imgs)| &imgs[i]));
                row.push(&s.gt);
                let path = self.root.join(format!("eval/panels/{i:03}.png"));
                std::fs::create_dir_all(path.parent().expect("has parent")).map_err(|e| Error::io(&path, e))?;
                ImageRgb::hstack(&row)?.save_png(&path)?;
            }
        }
        let total_s = started.elapsed().as_secs_f64();
        let report = EvalReport {
            guidance_scale: infer.guidance_scale,
            prompt_token: infer.prompt_token,
            aggregate: aggregate(&images, &input_psnr)?,
            runtime: Runtime {
                restore_s,
                total_s,
                per_image_s: total_s / test.len() as f64,
            },
            images,
        };
        self.write_json(EVAL_REPORT, &report)?;
        self.freeze_config("eval")?;
        Ok(report)
    }

    /// Restores arbitrary images with the trained models; the fusion
    /// network is skipped when `infer.no_affm` is set.
    pub fn infer_images(&self, images: &[&ImageRgb]) -> Result<Vec<ImageRgb>> {
        let manifest = self.manifest()?;
        let models = Backbone::load(&self.root, &manifest, "infer")?;
        let affm = (!self.cfg.infer.no_affm)
            .then(|| load_affm(&self.root, &manifest, AFFM_CHECKPOINT, "infer"))
            .transpose()?;
        let base = self.cfg.infer_seed();
        let seeds: Vec<u64> = (0..images.len() as u64).map(|i| derive_seed(base, "infer", i)).collect();
        infer(&models, affm.as_ref(), images, &seeds, &self.cfg.infer)
    }
}

/// Diffusion-domain latents of `images`, encoded in chunks.
pub fn encode_all(vq: &VqAutoencoder, images: &[&ImageRgb]) -> Result<Tensor> {
    let mut parts = Vec::new();
    for chunk in images.chunks(64) {
        parts.push(vq.encode_batch(&images_to_tensor(chunk, DType::F32)?)?.detach());
    }
    if parts.is_empty() {
        return Err(Error::Corpus("nothing to encode".into()));
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Runs `stage` for `cfg`.
pub fn run_stage(stage: Stage, cfg: &RunConfig) -> Result<StageRecord> {
    Run::new(cfg.clone())?.run_stage(stage)
}

pub fn evaluate(cfg: &RunConfig) -> Result<EvalReport> {
    Run::new(cfg.clone())?.evaluate()
}
