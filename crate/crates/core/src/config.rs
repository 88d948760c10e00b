//! Pipeline configuration: one TOML file, every knob defaulted.
//!
//! Relative paths resolve against the directory holding the config file.
//! Secrets are never read from the file; see [`ToxicityConfig::api_key`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibrate::{self, DEFAULT_PER_RANGE, DEFAULT_RANGES};
use crate::corpus::SourceFormat;
use crate::embedcore::DEFAULT_SIMILARITY_THRESHOLD;
use crate::phrasemine::{DEFAULT_MAX_WORDS, DEFAULT_MIN_FREQ};
use crate::textmine::DEFAULT_TOP_K;
use crate::toxicity::{API_KEY_ENV, DEFAULT_ENDPOINT, DEFAULT_THRESHOLD};
use crate::Category;

pub const DEFAULT_SEED: u64 = 20170101;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: Box<toml::de::Error> },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub toxicity: ToxicityConfig,
    pub keywords: KeywordConfig,
    pub phrases: PhraseConfig,
    pub embedding: EmbeddingConfig,
    pub similarity: SimilarityConfig,
    pub calibration: CalibrationConfig,
    pub annotation: AnnotationConfig,
    pub analytics: AnalyticsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: DEFAULT_SEED,
            paths: Paths::default(),
            toxicity: ToxicityConfig::default(),
            keywords: KeywordConfig::default(),
            phrases: PhraseConfig::default(),
            embedding: EmbeddingConfig::default(),
            similarity: SimilarityConfig::default(),
            calibration: CalibrationConfig::default(),
            annotation: AnnotationConfig::default(),
            analytics: AnalyticsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub posts: PathBuf,
    pub source_format: SourceFormat,
    pub image_manifest: PathBuf,
    pub images: PathBuf,
    /// Curator keyword file; the bundled seven-keyword selection when unset.
    pub keywords: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    /// Append-only annotation log.
    pub labels: PathBuf,
    pub run_dir: PathBuf,
    /// Provider caches; `<run_dir>/cache` when unset.
    pub cache_dir: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            posts: "posts.ndjson".into(),
            source_format: SourceFormat::Canonical,
            image_manifest: "images.csv".into(),
            images: "images".into(),
            keywords: None,
            stopwords: None,
            labels: "labels.ndjson".into(),
            run_dir: "run".into(),
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToxicityProviderKind {
    Lexicon,
    Perspective,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToxicityConfig {
    pub threshold: f64,
    pub provider: ToxicityProviderKind,
    pub model_id: String,
    /// Lexicon CSV (term,score) for the offline scorer.
    pub lexicon: Option<PathBuf>,
    pub endpoint: String,
    pub max_requests_per_second: f64,
    pub max_retries: u32,
    pub max_in_flight: usize,
}

impl Default for ToxicityConfig {
    fn default() -> Self {
        ToxicityConfig {
            threshold: DEFAULT_THRESHOLD,
            provider: ToxicityProviderKind::Lexicon,
            model_id: "lexicon-v1".into(),
            lexicon: None,
            endpoint: DEFAULT_ENDPOINT.into(),
            max_requests_per_second: 1.0,
            max_retries: 3,
            max_in_flight: 4,
        }
    }
}

impl ToxicityConfig {
    /// API key from the environment, never from the file.
    pub fn api_key(&self) -> Option<String> {
        std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeywordConfig {
    pub top_k: usize,
}

impl Default for KeywordConfig {
    fn default() -> Self {
        KeywordConfig { top_k: DEFAULT_TOP_K }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhraseConfig {
    pub min_freq: u64,
    pub max_words: usize,
}

impl Default for PhraseConfig {
    fn default() -> Self {
        PhraseConfig { min_freq: DEFAULT_MIN_FREQ, max_words: DEFAULT_MAX_WORDS }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingProviderKind {
    Fixture,
    Procedural,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub provider: EmbeddingProviderKind,
    pub model_id: String,
    /// Procedural provider dimension.
    pub dim: usize,
    pub text_vectors: Option<PathBuf>,
    pub image_vectors: Option<PathBuf>,
    pub sidecar_url: String,
    pub max_retries: u32,
    pub batch: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            provider: EmbeddingProviderKind::Procedural,
            model_id: "procedural-v1".into(),
            dim: 64,
            text_vectors: None,
            image_vectors: None,
            sidecar_url: "http://127.0.0.1:8765".into(),
            max_retries: 3,
            batch: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilarityConfig {
    pub threshold: f64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig { threshold: DEFAULT_SIMILARITY_THRESHOLD }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub quota: BTreeMap<Category, usize>,
    pub ranges: Vec<[f64; 2]>,
    pub per_range: usize,
    pub thresholds: Vec<f64>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            quota: calibrate::default_quota(),
            ranges: DEFAULT_RANGES.to_vec(),
            per_range: DEFAULT_PER_RANGE,
            thresholds: calibrate::default_grid(),
        }
    }
}

impl CalibrationConfig {
    pub fn phrase_count(&self) -> usize {
        self.quota.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationConfig {
    pub bind: String,
    /// Annotator pair compared for agreement; the first two ids seen when empty.
    pub annotators: Vec<String>,
    pub sweep_every: usize,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        AnnotationConfig { bind: "127.0.0.1:8080".into(), annotators: Vec::new(), sweep_every: 10 }
    }
}

impl AnnotationConfig {
    pub fn pair(&self) -> Option<(String, String)> {
        match self.annotators.as_slice() {
            [a, b] => Some((a.clone(), b.clone())),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyticsConfig {
    pub top_n: usize,
    pub peak_z: f64,
}

impl Default for AnalyticsConfig {
    fn default() -> Self {
        AnalyticsConfig { top_n: crate::analytics::DEFAULT_TOP_N, peak_z: crate::analytics::DEFAULT_PEAK_Z }
    }
}

fn unit(name: &str, v: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!("{name} must lie in [0, 1], got {v}")))
    }
}

fn positive(name: &str, v: usize) -> Result<(), ConfigError> {
    if v == 0 {
        Err(ConfigError::Invalid(format!("{name} must be at least 1")))
    } else {
        Ok(())
    }
}

impl PipelineConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: path.to_path_buf(), source: Box::new(e) })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read { path: path.to_path_buf(), source: e })?;
        let mut cfg = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        Ok(cfg)
    }

    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        for p in [&mut paths.posts, &mut paths.image_manifest, &mut paths.images, &mut paths.labels, &mut paths.run_dir] {
            fix(p);
        }
        for p in [&mut paths.keywords, &mut paths.stopwords, &mut paths.cache_dir].into_iter().flatten() {
            fix(p);
        }
        for p in [&mut self.toxicity.lexicon, &mut self.embedding.text_vectors, &mut self.embedding.image_vectors].into_iter().flatten() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        unit("toxicity.threshold", self.toxicity.threshold)?;
        if !(-1.0..=1.0).contains(&self.similarity.threshold) {
            return Err(ConfigError::Invalid(format!(
                "similarity.threshold must lie in [-1, 1], got {}",
                self.similarity.threshold
            )));
        }
        positive("keywords.top_k", self.keywords.top_k)?;
        positive("phrases.max_words", self.phrases.max_words)?;
        if self.phrases.min_freq == 0 {
            return Err(ConfigError::Invalid("phrases.min_freq must be at least 1".into()));
        }
        positive("calibration.per_range", self.calibration.per_range)?;
        positive("embedding.batch", self.embedding.batch)?;
        positive("embedding.dim", self.embedding.dim)?;
        positive("annotation.sweep_every", self.annotation.sweep_every)?;
        if let Some(c) = self.calibration.quota.keys().find(|c| !c.is_target()) {
            return Err(ConfigError::Invalid(format!("calibration.quota has non-target category {c}")));
        }
        if self.calibration.thresholds.is_empty() {
            return Err(ConfigError::Invalid("calibration.thresholds is empty".into()));
        }
        calibrate::RangePlan::new(self.calibration.ranges.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.annotation.annotators.is_empty() || self.annotation.annotators.len() == 2) {
            return Err(ConfigError::Invalid("annotation.annotators takes zero or two ids".into()));
        }
        if self.toxicity.max_requests_per_second <= 0.0 || self.toxicity.max_in_flight == 0 {
            return Err(ConfigError::Invalid("toxicity rate and concurrency must be positive".into()));
        }
        Ok(())
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.paths.cache_dir.clone().unwrap_or_else(|| self.paths.run_dir.join("cache"))
    }

    /// Canonical TOML rendering; identical configs render identically.
    pub fn snapshot(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = PipelineConfig::parse("", Path::new("x.toml")).unwrap();
        assert_eq!(cfg, PipelineConfig::default());
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::parse(&cfg.snapshot(), Path::new("x.toml")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn quota_keys_parse_lowercase() {
        let cfg = PipelineConfig::parse("[calibration.quota]\nantisemitic = 3\nislamophobic = 1\n", Path::new("x")).unwrap();
        assert_eq!(cfg.calibration.phrase_count(), 4);
        assert!(PipelineConfig::parse("[calibration.quota]\nirrelevant = 3\n", Path::new("x")).is_err());
    }

    #[test]
    fn rejects_out_of_range_and_unknown_keys() {
        assert!(PipelineConfig::parse("[toxicity]\nthreshold = 1.5\n", Path::new("x")).is_err());
        assert!(PipelineConfig::parse("[similarity]\nthreshhold = 0.3\n", Path::new("x")).is_err());
        assert!(PipelineConfig::parse("[calibration]\nranges = [[0.3, 0.2]]\n", Path::new("x")).is_err());
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let mut cfg = PipelineConfig::parse("[paths]\nposts = \"a/p.ndjson\"\nrun_dir = \"/abs/run\"\n", Path::new("x")).unwrap();
        cfg.resolve(Path::new("/cfg"));
        assert_eq!(cfg.paths.posts, PathBuf::from("/cfg/a/p.ndjson"));
        assert_eq!(cfg.paths.run_dir, PathBuf::from("/abs/run"));
        assert_eq!(cfg.cache_dir(), PathBuf::from("/abs/run/cache"));
    }
}
