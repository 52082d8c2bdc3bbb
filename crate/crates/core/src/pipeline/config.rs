//! Run configuration: one TOML document with a section per stage.
//!
//! A file names a `preset` (`desk` or `ci`) and overrides any subset of its
//! keys; the preset is expanded first and the file merged on top, so a key
//! that the preset does not know is rejected instead of silently ignored.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::affm::FusionConfig;
use crate::diffusion::{DiffusionConfig, UNetConfig};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::sgim::SgimConfig;
use crate::synthesis::{CorpusConfig, CorpusSource};
use crate::vq::VqConfig;

/// Environment variable naming the default artifact root.
pub const HOME_ENV: &str = "DIFFLARE_HOME";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Sized for a workstation CPU in about two hours.
    Desk,
    /// Small widths and short schedules for continuous integration.
    Ci,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffmSection {
    /// Training images restored by guided sampling to train the fusion
    /// network on.
    pub pool_size: usize,
    /// Further training images restored for the validation loss.
    pub val_size: usize,
    /// Also train the ablation without luminance guidance.
    pub train_unguided: bool,
    pub fusion: FusionConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    /// Classifier-free guidance scale `s`.
    pub guidance_scale: f64,
    /// Conditioning token; absent means the NULL condition.
    pub prompt_token: Option<u32>,
    /// Skip the fusion network and return the plain decode.
    pub no_affm: bool,
    /// Images restored per sampling batch.
    pub batch: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Input,
    NoAffm,
    UnguidedAffm,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Input, Variant::NoAffm, Variant::UnguidedAffm, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Input => "input",
            Variant::NoAffm => "no-affm",
            Variant::UnguidedAffm => "unguided-affm",
            Variant::Full => "full",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out images to evaluate; at most the size of the test split.
    pub images: usize,
    pub variants: Vec<Variant>,
    /// Side-by-side PNG panels to write (the first `panels` images).
    pub panels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Global seed; every stage seed is derived from it and the stage's own
    /// `seed` key.
    pub seed: u64,
    /// Artifact directory; defaults to `$DIFFLARE_HOME/run` or `./difflare-run`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub vq: VqConfig,
    pub diffusion: DiffusionConfig,
    pub sgim: SgimConfig,
    pub affm: AffmSection,
    pub infer: InferConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self::desk(),
            Preset::Ci => Self::ci(),
        }
    }

    fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            seed: 0,
            out_dir: None,
            corpus: CorpusConfig {
                source: CorpusSource::Procedural {
                    train_backgrounds: 2048,
                    test_backgrounds: 32,
                    flare_assets: 64,
                },
                ..CorpusConfig::default()
            },
            vq: VqConfig::default(),
            diffusion: DiffusionConfig::default(),
            sgim: SgimConfig::default(),
            affm: AffmSection {
                pool_size: 512,
                val_size: 32,
                train_unguided: true,
                fusion: FusionConfig::default(),
            },
            infer: InferConfig {
                guidance_scale: 1.0,
                prompt_token: Some(crate::diffusion::CLEAN_TOKEN),
                no_affm: false,
                batch: 32,
                seed: 0,
            },
            eval: EvalConfig {
                images: 32,
                variants: Variant::ALL.to_vec(),
                panels: 32,
            },
        }
    }

    fn ci() -> Self {
        let desk = Self::desk();
        Self {
            preset: Preset::Ci,
            corpus: CorpusConfig {
                source: CorpusSource::Procedural {
                    train_backgrounds: 512,
                    test_backgrounds: 32,
                    flare_assets: 48,
                },
                ..desk.corpus
            },
            vq: VqConfig {
                base_width: 32,
                codebook_size: 256,
                steps: 800,
                warmup_steps: 200,
                batch: 16,
                ..desk.vq
            },
            diffusion: DiffusionConfig {
                t: 100,
                beta_start: 1e-4,
                beta_end: 0.04,
                unet: UNetConfig {
                    widths: vec![32, 48, 64],
                    time_dim: 64,
                    cond_dim: 16,
                    ..UNetConfig::default()
                },
                steps: 1500,
                batch: 32,
                ..desk.diffusion
            },
            sgim: SgimConfig {
                steps: 800,
                batch: 32,
                ..desk.sgim
            },
            affm: AffmSection {
                pool_size: 128,
                val_size: 16,
                train_unguided: true,
                fusion: FusionConfig {
                    width: 32,
                    growth: 16,
                    n: 1,
                    steps: 800,
                    batch: 16,
                    ..desk.affm.fusion
                },
            },
            eval: EvalConfig {
                panels: 8,
                ..desk.eval
            },
            ..desk
        }
    }

    /// Parses a config document: the named preset (default `desk`) with the
    /// document's keys merged over it.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let preset = match doc.get("preset") {
            None => Preset::Desk,
            Some(v) => Preset::deserialize(v.clone()).map_err(|e| Error::Config(format!("preset: {e}")))?,
        };
        let mut base = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, doc);
        let cfg = Self::deserialize(toml::Value::Table(base)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.vq.validate()?;
        self.diffusion.validate()?;
        self.affm.fusion.validate()?;
        if self.corpus.crop % (self.vq.factor << (self.diffusion.unet.levels() - 1)) != 0 {
            return Err(Error::Config(format!(
                "crop {} must be divisible by the VQ factor times the denoiser's downsampling",
                self.corpus.crop
            )));
        }
        if self.diffusion.unet.channels != self.vq.channels {
            return Err(Error::Config("diffusion.unet.channels must equal vq.channels".into()));
        }
        if self.affm.pool_size == 0 || self.affm.val_size == 0 {
            return Err(Error::Config("affm.pool_size and affm.val_size must be positive".into()));
        }
        if self.infer.batch == 0 || !(self.infer.guidance_scale >= 0.0) {
            return Err(Error::Config("infer.batch must be positive and infer.guidance_scale >= 0".into()));
        }
        if self.eval.images == 0 || self.eval.variants.is_empty() {
            return Err(Error::Config("eval needs at least one image and one variant".into()));
        }
        Ok(())
    }

    /// The artifact directory after applying the environment default.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match &self.out_dir {
            Some(p) => p.clone(),
            None => match std::env::var_os(HOME_ENV) {
                Some(home) => PathBuf::from(home).join("run"),
                None => PathBuf::from("difflare-run"),
            },
        }
    }

    /// Seed actually used by `stage`, mixing the global seed with the
    /// section's own.
    pub fn stage_seed(&self, stage: &str, local: u64) -> u64 {
        derive_seed(self.seed, stage, local)
    }

    pub fn effective_corpus(&self) -> CorpusConfig {
        CorpusConfig {
            seed: self.stage_seed("corpus", self.corpus.seed),
            ..self.corpus.clone()
        }
    }

    pub fn effective_vq(&self) -> VqConfig {
        VqConfig {
            seed: self.stage_seed("vq", self.vq.seed),
            ..self.vq.clone()
        }
    }

    pub fn effective_diffusion(&self) -> DiffusionConfig {
        DiffusionConfig {
            seed: self.stage_seed("diffusion", self.diffusion.seed),
            ..self.diffusion.clone()
        }
    }

    pub fn effective_sgim(&self) -> SgimConfig {
        SgimConfig {
            seed: self.stage_seed("sgim", self.sgim.seed),
            ..self.sgim.clone()
        }
    }

    pub fn effective_fusion(&self) -> FusionConfig {
        FusionConfig {
            seed: self.stage_seed("affm", self.affm.fusion.seed),
            ..self.affm.fusion.clone()
        }
    }

    pub fn infer_seed(&self) -> u64 {
        self.stage_seed("infer", self.infer.seed)
    }
}

/// Recursively overlays `top` onto `base`; tables merge, anything else
/// replaces.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// SHA-256 of a value's canonical JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&json)))
}
