//! The staged pipeline. Each stage reads its inputs from a run directory,
//! writes its outputs there, and records itself in `manifest.json`.

mod config;
mod stages;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use config::{
    DataConfig, EvaluateConfig, MergeConfig, NegativeConfig, NegativeMode, PipelineConfig, Profile,
    Regime, RetrieveConfig, TrainingConfig,
};
pub use stages::{
    KsgRecord, MergedRecord, Pipeline, RankedItemRecord, RankedListRecord, Splits, StageReport,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    Retrieve,
    Partition,
    MakePairs,
    TrainRanker,
    Rank,
    Merge,
    TrainAnswerer,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Ingest,
        Stage::Retrieve,
        Stage::Partition,
        Stage::MakePairs,
        Stage::TrainRanker,
        Stage::Rank,
        Stage::Merge,
        Stage::TrainAnswerer,
        Stage::Evaluate,
    ];

    /// Command-line name, also the stage's subdirectory.
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Retrieve => "retrieve",
            Stage::Partition => "partition",
            Stage::MakePairs => "make-pairs",
            Stage::TrainRanker => "train-ranker",
            Stage::Rank => "rank",
            Stage::Merge => "merge",
            Stage::TrainAnswerer => "train-answerer",
            Stage::Evaluate => "evaluate",
        }
    }

    /// Bumped when a stage's output format changes.
    pub fn version(self) -> u32 {
        1
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

pub const MANIFEST_FORMAT: &str = "ksgrank-run";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub version: u32,
    pub outputs: Vec<String>,
}

/// Run-directory record: the config it belongs to and the stages that
/// have completed. Holds no timestamps so reruns reproduce it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config_hash: String,
    pub seed: u64,
    /// Resolved config without the worker count.
    pub config: serde_json::Value,
    pub stages: BTreeMap<String, StageEntry>,
}

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.name())
    }

    pub fn file(&self, stage: Stage, name: &str) -> PathBuf {
        self.stage_dir(stage).join(name)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    /// Path of an input produced by `stage`, or a [`Error::MissingStageInput`].
    pub fn input(&self, stage: Stage, name: &str) -> Result<PathBuf> {
        let p = self.file(stage, name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingStageInput {
                path: p,
                producer: stage.name(),
            })
        }
    }

    pub fn read_manifest(&self) -> Result<Option<Manifest>> {
        let p = self.manifest_path();
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Config(format!(
                "{}: not a run manifest",
                p.display()
            )));
        }
        Ok(Some(m))
    }

    pub fn write_manifest(&self, m: &Manifest) -> Result<()> {
        write_json(&self.manifest_path(), m)
    }
}

pub(crate) fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Pretty JSON with a trailing newline.
pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub(crate) fn write_jsonl<T: Serialize>(
    path: &Path,
    items: impl IntoIterator<Item = T>,
) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for it in items {
        serde_json::to_writer(&mut w, &it)?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
