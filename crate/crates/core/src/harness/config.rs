//! Experiment configuration: a TOML file plus command-line overrides.
//!
//! Relative paths are resolved against the directory of the config file.
//! The top-level `seed` drives model initialisation, random embeddings,
//! batch order and dropout; `synthetic.seed` only drives data generation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{PreprocessConfig, VocabMode};
use crate::embeddings::DEFAULT_INIT_RANGE;
use crate::eval::Smoothing;
use crate::model::ModelConfig;
use crate::parallel::Parallelism;
use crate::search::SearchConfig;
use crate::synthetic::{embedding_file_name, SynthSpec};
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("bad override {0:?}: expected section.key=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingMode {
    /// Aligned vectors from the embedding files, frozen.
    #[default]
    Pretrained,
    /// Seeded random vectors for every row.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub corpus_dir: PathBuf,
    pub train_languages: Vec<String>,
    pub test_languages: Vec<String>,
    /// Training language pairs; empty means every pair of training languages.
    pub train_pairs: Vec<[String; 2]>,
    /// Vector file per language; missing entries default to
    /// `<corpus_dir>/emb.<lang>.vec`.
    pub embedding_files: BTreeMap<String, PathBuf>,
    pub embedding_mode: EmbeddingMode,
    pub vocab_mode: VocabMode,
    /// Range of uniformly initialised rows.
    pub init_range: f64,
    /// Whether lexical rows stay fixed in random mode.
    pub random_frozen: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus_dir: PathBuf::from("data"),
            train_languages: Vec::new(),
            test_languages: Vec::new(),
            train_pairs: Vec::new(),
            embedding_files: BTreeMap::new(),
            embedding_mode: EmbeddingMode::Pretrained,
            vocab_mode: VocabMode::SharedForm,
            init_range: DEFAULT_INIT_RANGE,
            random_frozen: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Smoothing of the dev score that drives the schedule.
    pub dev_smoothing: Smoothing,
    /// Beam size for the per-epoch dev decode.
    pub dev_beam_size: usize,
    /// Cap on dev sentences decoded per epoch (first N, pooled).
    pub dev_max_sentences: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { dev_smoothing: Smoothing::AddOne, dev_beam_size: 5, dev_max_sentences: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub parallelism: Parallelism,
    /// Generate the corpus into the run directory before anything else.
    pub synthetic: Option<SynthSpec>,
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 1,
            parallelism: Parallelism::Rayon,
            synthetic: None,
            data: DataConfig::default(),
            preprocess: PreprocessConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            search: SearchConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Parses `value` as a TOML value, falling back to a plain string.
fn parse_value(value: &str) -> toml::Value {
    let wrapped = format!("v = {value}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

/// Applies `a.b.c=value` to a TOML table, creating intermediate tables.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (path, value) = assignment.split_once('=').ok_or_else(|| ConfigError::Override(assignment.into()))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError::Override(assignment.into()));
    }
    let mut table = root;
    for k in &keys[..keys.len() - 1] {
        let entry = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| ConfigError::Override(assignment.into()))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text, applies overrides and resolves relative paths
    /// against `base`.
    pub fn from_toml(text: &str, overrides: &[String], base: &Path) -> Result<Self, ConfigError> {
        let mut root: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let mut cfg: ExperimentConfig =
            toml::Value::Table(root).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, overrides, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.corpus_dir);
        self.data.embedding_files.values_mut().for_each(fix);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return bad(format!("run name {:?} must be a plain directory name", self.name));
        }
        if let Some(s) = &self.synthetic {
            if !self.data.train_languages.is_empty() || !self.data.test_languages.is_empty() {
                return bad("languages come from the synthetic spec; leave data.*_languages empty".into());
            }
            s.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            return Ok(());
        }
        let d = &self.data;
        if d.train_languages.is_empty() {
            return bad("data.train_languages is empty".into());
        }
        if let Some(l) = d.test_languages.iter().find(|l| d.train_languages.contains(l)) {
            return bad(format!("{l} is both a training and a test language"));
        }
        for [a, b] in &d.train_pairs {
            if !d.train_languages.contains(a) || !d.train_languages.contains(b) || a == b {
                return bad(format!("training pair {a}-{b} must join two distinct training languages"));
            }
        }
        Ok(())
    }

    /// Training and test languages after applying a synthetic spec.
    pub fn languages(&self) -> (Vec<String>, Vec<String>) {
        match &self.synthetic {
            Some(s) => (s.train_languages(), s.test_languages()),
            None => (self.data.train_languages.clone(), self.data.test_languages.clone()),
        }
    }

    /// Configured pairs, or every pair of training languages in order.
    pub fn train_pairs(&self) -> Vec<[String; 2]> {
        if !self.data.train_pairs.is_empty() {
            return self.data.train_pairs.clone();
        }
        let (train, _) = self.languages();
        let mut out = Vec::new();
        for (i, a) in train.iter().enumerate() {
            for b in &train[i + 1..] {
                out.push([a.clone(), b.clone()]);
            }
        }
        out
    }

    pub fn embedding_file(&self, lang: &str) -> PathBuf {
        self.data
            .embedding_files
            .get(lang)
            .cloned()
            .unwrap_or_else(|| self.data.corpus_dir.join(embedding_file_name(lang)))
    }

    /// Copies the top-level seed into every seeded component.
    pub fn seeded_model_config(&self, vocab_size: usize, embed_dim: usize) -> ModelConfig {
        ModelConfig { vocab_size, embed_dim, seed: self.seed, ..self.model.clone() }
    }

    pub fn seeded_train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_defaults() {
        let text = "name = \"x\"\n[data]\ntrain_languages = [\"en\", \"de\"]\n";
        let cfg = ExperimentConfig::from_toml(
            text,
            &["train.batch_size=8".into(), "seed=7".into(), "data.vocab_mode=language-origin".into()],
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.data.vocab_mode, VocabMode::LanguageOrigin);
        assert_eq!(cfg.search.beam_size, 5);
        assert_eq!(cfg.data.corpus_dir, PathBuf::from("/base/data"));
        assert_eq!(cfg.train_pairs(), vec![["en".to_string(), "de".to_string()]]);
    }

    #[test]
    fn unknown_key_and_overlap_rejected() {
        let e = ExperimentConfig::from_toml("bogus = 1\n", &[], Path::new("."));
        assert!(matches!(e, Err(ConfigError::Parse(_))));
        let text = "[data]\ntrain_languages = [\"en\"]\ntest_languages = [\"en\"]\n";
        assert!(matches!(ExperimentConfig::from_toml(text, &[], Path::new(".")), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig {
            synthetic: Some(SynthSpec::default()),
            ..Default::default()
        };
        let back = ExperimentConfig::from_toml(&cfg.to_toml(), &[], Path::new("/")).unwrap();
        let mut expect = cfg.clone();
        expect.data.corpus_dir = PathBuf::from("/data");
        assert_eq!(back, expect);
    }
}
