//! Stage records: what each stage read, what it wrote, and with which
//! seed. Later stages refuse to run unless the records of the stages they
//! depend on exist and still match the files on disk.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::file_hash;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Synth,
    TrainVq,
    TrainDiffusion,
    TrainSgim,
    TrainAffm,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Synth, Stage::TrainVq, Stage::TrainDiffusion, Stage::TrainSgim, Stage::TrainAffm];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::TrainVq => "train-vq",
            Stage::TrainDiffusion => "train-diffusion",
            Stage::TrainSgim => "train-sgim",
            Stage::TrainAffm => "train-affm",
        }
    }

    /// Stages whose outputs this one reads.
    pub fn dependencies(self) -> &'static [Stage] {
        match self {
            Stage::Synth => &[],
            Stage::TrainVq => &[Stage::Synth],
            Stage::TrainDiffusion => &[Stage::Synth, Stage::TrainVq],
            Stage::TrainSgim => &[Stage::Synth, Stage::TrainVq, Stage::TrainDiffusion],
            Stage::TrainAffm => &[Stage::Synth, Stage::TrainVq, Stage::TrainDiffusion, Stage::TrainSgim],
        }
    }

    /// Directory under the run root holding this stage's artifacts.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::Synth => "corpus",
            Stage::TrainVq => "vq",
            Stage::TrainDiffusion => "diffusion",
            Stage::TrainSgim => "sgim",
            Stage::TrainAffm => "affm",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A file relative to the run root and its SHA-256.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileHash {
    pub fn of(root: &Path, rel: impl Into<PathBuf>) -> Result<Self> {
        let path = rel.into();
        Ok(Self {
            sha256: file_hash(&root.join(&path))?,
            path,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub seed: u64,
    pub config_hash: String,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub records: BTreeMap<Stage, StageRecord>,
}

impl RunManifest {
    /// Loads `root/manifest.json`, or an empty manifest when none exists.
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Confirms `stage` ran and its outputs are unchanged on disk.
    pub fn require(&self, root: &Path, stage: Stage, needed_by: &str) -> Result<&StageRecord> {
        let record = self.records.get(&stage).ok_or_else(|| Error::Dependency {
            required: stage.name().into(),
            detail: format!("{needed_by} needs its artifacts in {}", root.display()),
        })?;
        for out in &record.outputs {
            let path = root.join(&out.path);
            if !path.exists() {
                return Err(Error::Dependency {
                    required: stage.name().into(),
                    detail: format!("{} is missing", path.display()),
                });
            }
            if file_hash(&path)? != out.sha256 {
                return Err(Error::Dependency {
                    required: stage.name().into(),
                    detail: format!("{} changed since the stage ran", path.display()),
                });
            }
        }
        Ok(record)
    }

    /// Every dependency of `stage`, checked.
    pub fn require_all(&self, root: &Path, stage: Stage) -> Result<()> {
        for &dep in stage.dependencies() {
            self.require(root, dep, stage.name())?;
        }
        Ok(())
    }

    /// Checks the whole chain: every recorded output exists unchanged, and
    /// every input a stage recorded is the current output of the stage that
    /// produced it.
    pub fn validate(&self, root: &Path) -> Result<()> {
        for (&stage, record) in &self.records {
            self.require(root, stage, "validation")?;
            for input in &record.inputs {
                let producer = stage
                    .dependencies()
                    .iter()
                    .filter_map(|d| self.records.get(d))
                    .find(|r| r.outputs.iter().any(|o| o.path == input.path));
                match producer {
                    Some(p) => {
                        let current = p.outputs.iter().find(|o| o.path == input.path).expect("matched above");
                        if current.sha256 != input.sha256 {
                            return Err(Error::Dependency {
                                required: p.stage.name().into(),
                                detail: format!(
                                    "{} was rebuilt after {stage} consumed it; rerun {stage}",
                                    input.path.display()
                                ),
                            });
                        }
                    }
                    None => {
                        return Err(Error::Integrity(format!(
                            "{stage} read {} but no upstream stage recorded it",
                            input.path.display()
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}
