//! Run configuration, read from TOML. Every field has a default except the
//! dataset paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::answer_select::AnswererConfig;
use crate::error::{Error, Result};
use crate::evalmetrics::MrrMode;
use crate::partition::PartitionOptions;
use crate::ranker::{AdamConfigSerde, RankerConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub workers: usize,
    pub data: DataConfig,
    pub retrieve: RetrieveConfig,
    pub partition: PartitionOptions,
    pub negatives: NegativeConfig,
    pub ranker: RankerConfig,
    pub ranker_training: TrainingConfig,
    pub answerer: AnswererConfig,
    pub answerer_training: TrainingConfig,
    pub merge: MergeConfig,
    pub evaluate: EvaluateConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 13,
            workers: 1,
            data: DataConfig::default(),
            retrieve: RetrieveConfig::default(),
            partition: PartitionOptions::default(),
            negatives: NegativeConfig::default(),
            ranker: RankerConfig::default(),
            ranker_training: TrainingConfig::default(),
            answerer: AnswererConfig::default(),
            answerer_training: TrainingConfig::default(),
            merge: MergeConfig::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Tab-separated `subject relation object` lines.
    pub triples: PathBuf,
    /// Line-delimited JSON question records.
    pub questions: PathBuf,
    /// Whitespace-separated `token v1 .. vD` lines; random vectors when absent.
    pub embeddings: Option<PathBuf>,
    /// Tab-separated `entity name` lines; ids are used as names when absent.
    pub entity_names: Option<PathBuf>,
    /// Width of the random vectors used without an embeddings file.
    pub word_dim: usize,
    /// Train, dev and test fractions over the question file order.
    pub splits: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            triples: PathBuf::new(),
            questions: PathBuf::new(),
            embeddings: None,
            entity_names: None,
            word_dim: 300,
            splits: [0.6, 0.2, 0.2],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieveConfig {
    pub hops: usize,
}

impl Default for RetrieveConfig {
    fn default() -> Self {
        RetrieveConfig { hops: 2 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeMode {
    /// Up to `count` of the question's own label-0 sub-KSGs.
    #[default]
    Random,
    /// One answer-free training sub-KSG per positive, the one most similar
    /// to the positive by TF-IDF cosine.
    Tfidf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NegativeConfig {
    pub mode: NegativeMode,
    pub count: usize,
}

impl Default for NegativeConfig {
    fn default() -> Self {
        NegativeConfig {
            mode: NegativeMode::Random,
            count: 20,
        }
    }
}

/// Dataset profile; selects the default batch size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    #[default]
    Webqsp,
    Cwq,
}

impl Profile {
    pub fn batch_size(self) -> usize {
        match self {
            Profile::Webqsp => 50,
            Profile::Cwq => 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub profile: Profile,
    /// Overrides the profile's batch size.
    pub batch_size: Option<usize>,
    pub max_epochs: usize,
    pub patience: usize,
    pub adam: AdamConfigSerde,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            profile: Profile::Webqsp,
            batch_size: None,
            max_epochs: 100,
            patience: 5,
            adam: AdamConfigSerde::default(),
        }
    }
}

impl TrainingConfig {
    pub fn to_train_config(&self, seed: u64, workers: usize, mrr_mode: MrrMode) -> TrainConfig {
        TrainConfig {
            max_epochs: self.max_epochs,
            batch_size: self.batch_size.unwrap_or(self.profile.batch_size()),
            adam: self.adam,
            patience: self.patience,
            seed,
            workers,
            mrr_mode,
            stop_below: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    /// One answerer per value, trained on the union of that many top-ranked
    /// sub-KSGs.
    pub top_k: Vec<usize>,
    /// Also train and evaluate an answerer on the whole retrieved subgraph.
    pub include_full: bool,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            top_k: vec![5],
            include_full: false,
        }
    }
}

impl MergeConfig {
    /// Regime names in evaluation order: `top{k}` for each k, then `full`.
    pub fn regimes(&self) -> Vec<Regime> {
        let mut out: Vec<Regime> = self.top_k.iter().map(|&k| Regime::TopK(k)).collect();
        if self.include_full {
            out.push(Regime::Full);
        }
        out
    }
}

/// The graph an answerer reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    TopK(usize),
    Full,
}

impl Regime {
    pub fn name(self) -> String {
        match self {
            Regime::TopK(k) => format!("top{k}"),
            Regime::Full => "full".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub recall_k: Vec<usize>,
    pub mrr_mode: MrrMode,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            recall_k: vec![1, 3, 5, 10, 20],
            mrr_mode: MrrMode::First,
        }
    }
}

impl PipelineConfig {
    /// Parses a TOML file; relative dataset paths are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_overrides(path, &[])
    }

    /// Loads a TOML config after applying `dotted.key=value` overrides.
    /// Values are read as TOML literals, falling back to plain strings.
    pub fn load_with_overrides(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut doc: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: PipelineConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.resolve_paths(base);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex sha256 of the canonical JSON form. The worker count is left
    /// out since results do not depend on it.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(&PipelineConfig {
            workers: 1,
            ..self.clone()
        })?;
        Ok(hex::encode(Sha256::digest(&json)))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.data.triples.as_os_str().is_empty() || self.data.questions.as_os_str().is_empty() {
            return bad("data.triples and data.questions are required");
        }
        let s = self.data.splits;
        if s.iter().any(|f| !(0.0..=1.0).contains(f)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad("data.splits must be three fractions in [0, 1] summing to 1");
        }
        if self.data.word_dim == 0 {
            return bad("data.word_dim must be >= 1");
        }
        if self.workers == 0 {
            return bad("workers must be >= 1");
        }
        if self.retrieve.hops == 0 {
            return bad("retrieve.hops must be >= 1");
        }
        if self.negatives.mode == NegativeMode::Random && self.negatives.count == 0 {
            return bad("negatives.count must be >= 1");
        }
        if self.merge.top_k.is_empty() && !self.merge.include_full {
            return bad("merge needs at least one top_k value or include_full");
        }
        if self.merge.top_k.contains(&0) {
            return bad("merge.top_k values must be >= 1");
        }
        if self.evaluate.recall_k.is_empty() || self.evaluate.recall_k.contains(&0) {
            return bad("evaluate.recall_k must be non-empty with values >= 1");
        }
        if !(0.0..=1.0).contains(&self.answerer.threshold) {
            return bad("answerer.threshold must be in [0, 1]");
        }
        for t in [&self.ranker_training, &self.answerer_training] {
            if t.batch_size == Some(0) {
                return bad("batch_size must be >= 1");
            }
            if t.max_epochs == 0 {
                return bad("max_epochs must be >= 1");
            }
            if t.adam.lr.is_nan() || t.adam.lr <= 0.0 {
                return bad("adam.lr must be positive");
            }
        }
        self.ranker.biggnn.validate()?;
        self.ranker.ebimpm.validate()?;
        self.answerer.biggnn.validate()?;
        Ok(())
    }
}

impl DataConfig {
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.triples);
        fix(&mut self.questions);
        if let Some(p) = self.embeddings.as_mut() {
            fix(p);
        }
        if let Some(p) = self.entity_names.as_mut() {
            fix(p);
        }
    }
}

fn apply_override(doc: &mut toml::Table, entry: &str) -> Result<()> {
    let (key, raw) = entry
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{entry}` is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut table = doc;
    for p in path {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let mut c = PipelineConfig::default();
        c.data.triples = "t.tsv".into();
        c.data.questions = "q.jsonl".into();
        let text = c.to_toml().unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        c.validate().unwrap();
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c: PipelineConfig = toml::from_str(
            "seed = 7\n[data]\ntriples = \"a\"\nquestions = \"b\"\n[ranker_training]\nprofile = \"cwq\"\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.retrieve.hops, 2);
        assert_eq!(
            c.ranker_training
                .to_train_config(0, 1, MrrMode::First)
                .batch_size,
            64
        );
        assert_eq!(
            c.answerer_training
                .to_train_config(0, 1, MrrMode::First)
                .batch_size,
            50
        );
        assert_eq!(c.ranker.biggnn.hidden, 128);
        assert_eq!(c.negatives.count, 20);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<PipelineConfig>("sead = 1\n").is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = PipelineConfig::default();
        assert!(c.validate().is_err());
        c.data.triples = "t".into();
        c.data.questions = "q".into();
        c.data.splits = [0.5, 0.5, 0.5];
        assert!(c.validate().is_err());
        c.data.splits = [0.6, 0.2, 0.2];
        c.merge.top_k = vec![0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.workers = 4;
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed += 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn relative_paths_resolved_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(
            &p,
            "[data]\ntriples = \"t.tsv\"\nquestions = \"/abs/q.jsonl\"\n",
        )
        .unwrap();
        let c = PipelineConfig::load(&p).unwrap();
        assert_eq!(c.data.triples, dir.path().join("t.tsv"));
        assert_eq!(c.data.questions, PathBuf::from("/abs/q.jsonl"));
    }

    #[test]
    fn overrides_apply_before_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 1\n[ranker.biggnn]\nhidden = 4\n").unwrap();
        let sets = [
            "seed=9".to_string(),
            "ranker.biggnn.hidden=7".to_string(),
            "negatives.mode=tfidf".to_string(),
            "merge.top_k=[1, 3]".to_string(),
        ];
        let c = PipelineConfig::load_with_overrides(&p, &sets).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.ranker.biggnn.hidden, 7);
        assert_eq!(c.negatives.mode, NegativeMode::Tfidf);
        assert_eq!(c.merge.top_k, vec![1, 3]);
        assert!(PipelineConfig::load_with_overrides(&p, &["seed".to_string()]).is_err());
        assert!(PipelineConfig::load_with_overrides(&p, &["seed.x=1".to_string()]).is_err());
    }
}
