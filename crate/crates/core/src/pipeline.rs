//! Stage orchestration over a run directory.
//!
//! Each stage reads upstream artifacts from the run directory, writes its own
//! artifacts under `<run_dir>/<stage>/`, and records input digests, output
//! digests, its config section and timing in `<run_dir>/manifest.json`. A
//! stage whose inputs, config and outputs are unchanged is skipped.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::agreement::{self, AgreementError, ItemKind, LabelState, LabelStore, QueueItem, Service, ServiceConfig};
use crate::analytics::{self, AnalyticsError, CdfPoint, CorrelationResult, DailySeries};
use crate::calibrate::{self, CalibrateError, PairLabel, RangePlan};
use crate::config::{ConfigError, EmbeddingProviderKind, PipelineConfig, ToxicityProviderKind};
use crate::corpus::{self, CorpusError, ImageRecord, Post};
use crate::datasets::{self, CountsSummary, DatasetError};
use crate::digest::{file_sha256, sha256_hex};
use crate::embedcore::{self, EmbedError, EmbeddingProvider, FixtureProvider, ProceduralProvider, RemoteProvider, VectorStore};
use crate::phash::{self, PhashError};
use crate::phrasemine::{self, ExtractParams, Phrase, PhraseError, RuleLemmatizer};
use crate::textmine::{self, KeywordSelection, Stopwords, TextMineError};
use crate::toxicity::{self, LexiconScorer, PerspectiveClient, SystemClock, ToxicityError, ToxicityProvider, API_KEY_ENV, SEVERE_TOXICITY};
use crate::Category;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    Toxicity,
    Keywords,
    Phrases,
    AnnotateServe,
    Agreement,
    Match,
    Embed,
    Score,
    Sample,
    Calibrate,
    Phash,
    BuildDatasets,
    Analyze,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 15] = [
        Stage::Ingest,
        Stage::Toxicity,
        Stage::Keywords,
        Stage::Phrases,
        Stage::AnnotateServe,
        Stage::Agreement,
        Stage::Match,
        Stage::Embed,
        Stage::Score,
        Stage::Sample,
        Stage::Calibrate,
        Stage::Phash,
        Stage::BuildDatasets,
        Stage::Analyze,
        Stage::Report,
    ];

    /// Batch stages in dependency order; the interactive server is left out.
    pub const BATCH: [Stage; 14] = [
        Stage::Ingest,
        Stage::Toxicity,
        Stage::Keywords,
        Stage::Phrases,
        Stage::Agreement,
        Stage::Match,
        Stage::Embed,
        Stage::Score,
        Stage::Sample,
        Stage::Calibrate,
        Stage::Phash,
        Stage::BuildDatasets,
        Stage::Analyze,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Toxicity => "toxicity",
            Stage::Keywords => "keywords",
            Stage::Phrases => "phrases",
            Stage::AnnotateServe => "annotate-serve",
            Stage::Agreement => "agreement",
            Stage::Match => "match",
            Stage::Embed => "embed",
            Stage::Score => "score",
            Stage::Sample => "sample",
            Stage::Calibrate => "calibrate",
            Stage::Phash => "phash",
            Stage::BuildDatasets => "build-datasets",
            Stage::Analyze => "analyze",
            Stage::Report => "report",
        }
    }

    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::Toxicity => &[Stage::Ingest],
            Stage::Keywords => &[Stage::Toxicity],
            Stage::Phrases => &[Stage::Keywords],
            Stage::AnnotateServe => &[Stage::Phrases],
            Stage::Agreement => &[Stage::Phrases],
            Stage::Match => &[Stage::Agreement],
            Stage::Embed => &[Stage::Agreement],
            Stage::Score => &[Stage::Embed],
            Stage::Sample => &[Stage::Embed],
            Stage::Calibrate => &[Stage::Sample],
            Stage::Phash => &[Stage::Ingest],
            Stage::BuildDatasets => &[Stage::Match, Stage::Score, Stage::Phash],
            Stage::Analyze => &[Stage::BuildDatasets],
            Stage::Report => &[Stage::Analyze],
        }
    }

    fn dir(self) -> &'static str {
        match self {
            Stage::BuildDatasets => "datasets",
            other => other.name(),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("requires: {0}")]
    Requires(Stage),
    #[error("{0}")]
    Precondition(String),
    #[error("provider failure: {0}")]
    Provider(String),
    #[error("run directory {0} is locked by another process; remove the lock file if no run is active")]
    Locked(PathBuf),
    #[error("{stage} cannot run as a batch stage")]
    NotBatch { stage: Stage },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Toxicity(#[from] ToxicityError),
    #[error(transparent)]
    TextMine(#[from] TextMineError),
    #[error(transparent)]
    Phrase(#[from] PhraseError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Calibrate(#[from] CalibrateError),
    #[error(transparent)]
    Agreement(#[from] AgreementError),
    #[error(transparent)]
    Phash(#[from] PhashError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    /// 2 for unmet preconditions, 3 for provider failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Requires(_)
            | PipelineError::Precondition(_)
            | PipelineError::Locked(_)
            | PipelineError::NotBatch { .. }
            | PipelineError::Config(_)
            | PipelineError::Agreement(AgreementError::Unresolved(_) | AgreementError::MismatchedItems { .. })
            | PipelineError::Calibrate(CalibrateError::InsufficientPhrases { .. }) => 2,
            PipelineError::Provider(_) | PipelineError::Embed(EmbedError::Provider(_)) => 3,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Full config of the most recent invocation.
    pub config: String,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_digest: String,
    pub config: Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_utc: String,
    pub elapsed_ms: u64,
    pub summary: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ran,
    Cached,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageOutcome {
    pub stage: String,
    pub status: Status,
    pub summary: Value,
}

struct RunLock(PathBuf);

impl RunLock {
    fn acquire(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock(path))
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(run_dir.to_path_buf())),
            Err(e) => Err(PipelineError::Io { path, source: e }),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

struct Produced {
    outputs: Vec<PathBuf>,
    summary: Value,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    run_dir: PathBuf,
    manifest: RunManifest,
    _lock: RunLock,
}

fn write_atomic(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension(format!("{}.tmp", path.extension().and_then(|e| e.to_str()).unwrap_or("")));
    let file = File::create(&tmp).map_err(io_err(&tmp))?;
    let mut w = BufWriter::new(file);
    f(&mut w)?;
    w.flush().map_err(io_err(&tmp))?;
    drop(w);
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n").map_err(io_err(path))
    })
}

fn write_ndjson<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, |w| {
        for r in rows {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n").map_err(io_err(path))?;
        }
        Ok(())
    })
}

fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    write_atomic(path, |w| {
        let mut cw = csv::WriterBuilder::new().has_headers(false).from_writer(&mut *w);
        cw.write_record(header)?;
        for r in rows {
            cw.serialize(r)?;
        }
        cw.flush().map_err(io_err(path))?;
        Ok(())
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(io_err(path))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

pub fn read_queue(path: &Path) -> Result<Vec<QueueItem>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn replay_labels(path: &Path) -> Result<LabelState> {
    if !path.exists() {
        return Err(PipelineError::Precondition(format!(
            "label log {} does not exist; collect labels with annotate-serve first",
            path.display()
        )));
    }
    let file = File::open(path).map_err(io_err(path))?;
    Ok(agreement::replay(BufReader::new(file))?)
}

fn digest(path: &Path) -> Result<String> {
    file_sha256(path).map_err(io_err(path))
}

fn target_phrases(phrases: Vec<Phrase>) -> Vec<Phrase> {
    phrases.into_iter().filter(|p| p.category.is_target()).collect()
}

fn categories() -> [Category; 2] {
    Category::TARGETS
}

/// Labels of both annotators over exactly `items`; errors when either
/// annotator has not finished.
fn complete_labels(
    state: &LabelState,
    pair: &(String, String),
    kind: ItemKind,
    items: &BTreeSet<String>,
) -> Result<(BTreeMap<String, Category>, BTreeMap<String, Category>)> {
    let mut out = Vec::new();
    for who in [&pair.0, &pair.1] {
        let mut labels = state.labels_of(who, kind);
        labels.retain(|k, _| items.contains(k));
        let missing: Vec<&String> = items.iter().filter(|i| !labels.contains_key(*i)).collect();
        if let Some(first) = missing.first() {
            return Err(PipelineError::Precondition(format!(
                "annotator {who} has not labeled {} of {} {} items (first: {first})",
                missing.len(),
                items.len(),
                match kind {
                    ItemKind::Phrase => "phrase",
                    ItemKind::ImagePair => "image-pair",
                }
            )));
        }
        out.push(labels);
    }
    let b = out.pop().expect("two annotators");
    let a = out.pop().expect("two annotators");
    Ok((a, b))
}

fn day_span(manifest: &corpus::CorpusManifest) -> Result<Option<(NaiveDate, NaiveDate)>> {
    match manifest.time_span {
        Some([lo, hi]) => Ok(Some((analytics::utc_day(lo)?, analytics::utc_day(hi)?))),
        None => Ok(None),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopRow {
    pub rank: usize,
    pub phrase_id: String,
    pub phrase: String,
    pub posts: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAnalysis {
    pub category: Category,
    /// Posts of the category's textual dataset containing each phrase.
    pub posts_per_phrase: BTreeMap<String, u64>,
    pub cdf: Vec<CdfPoint>,
    pub top: Vec<TopRow>,
    pub daily_textual: Vec<u64>,
    pub daily_visual: Vec<u64>,
    pub correlation: Option<CorrelationResult>,
    pub correlation_error: Option<String>,
    pub peaks_textual: Vec<(NaiveDate, u64)>,
    pub peaks_visual: Vec<(NaiveDate, u64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub first_day: Option<NaiveDate>,
    pub days: usize,
    pub categories: Vec<CategoryAnalysis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub annotators: [String; 2],
    pub agreement: agreement::AgreementReport<Category>,
    pub labeled_pairs: usize,
    pub relevant_pairs: usize,
    pub selected_threshold: f64,
    pub configured_threshold: f64,
    pub best_mean: calibrate::Metrics,
}

impl Pipeline {
    /// Opens (creating if needed) the configured run directory and locks it.
    pub fn open(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let run_dir = cfg.paths.run_dir.clone();
        fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
        let lock = RunLock::acquire(&run_dir)?;
        let mpath = run_dir.join(MANIFEST_FILE);
        let manifest = if mpath.exists() { read_json(&mpath)? } else { RunManifest::default() };
        Ok(Pipeline { cfg, run_dir, manifest, _lock: lock })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn art(&self, stage: Stage, name: &str) -> PathBuf {
        self.run_dir.join(stage.dir()).join(name)
    }

    fn key(&self, path: &Path) -> String {
        match path.strip_prefix(&self.run_dir) {
            Ok(rel) => rel.to_string_lossy().replace('\\', "/"),
            Err(_) => path.to_string_lossy().into_owned(),
        }
    }

    fn outputs_intact(&self, rec: &StageRecord) -> bool {
        rec.outputs.iter().all(|(k, d)| {
            let p = self.run_dir.join(k);
            file_sha256(&p).map(|h| &h == d).unwrap_or(false)
        })
    }

    /// Whether `stage` has a recorded run whose outputs are still on disk.
    pub fn is_complete(&self, stage: Stage) -> bool {
        self.manifest.stages.get(stage.name()).is_some_and(|r| self.outputs_intact(r))
    }

    fn check_deps(&self, stage: Stage) -> Result<()> {
        for &d in stage.deps() {
            if !self.is_complete(d) {
                return Err(PipelineError::Requires(d));
            }
        }
        Ok(())
    }

    fn stage_config(&self, stage: Stage) -> Value {
        let c = &self.cfg;
        match stage {
            Stage::Ingest => json!({ "source_format": c.paths.source_format }),
            Stage::Toxicity => json!({
                "threshold": c.toxicity.threshold,
                "provider": c.toxicity.provider,
                "model_id": c.toxicity.model_id,
                "endpoint": c.toxicity.endpoint,
            }),
            Stage::Keywords => json!({ "top_k": c.keywords.top_k }),
            Stage::Phrases => json!({ "min_freq": c.phrases.min_freq, "max_words": c.phrases.max_words }),
            Stage::Agreement => json!({ "annotators": c.annotation.annotators }),
            Stage::Match | Stage::Phash | Stage::BuildDatasets | Stage::AnnotateServe => json!({}),
            Stage::Embed => json!({
                "provider": c.embedding.provider,
                "model_id": c.embedding.model_id,
                "dim": c.embedding.dim,
                "sidecar_url": c.embedding.sidecar_url,
            }),
            Stage::Score => json!({ "threshold": c.similarity.threshold }),
            Stage::Sample => json!({
                "seed": c.seed,
                "quota": c.calibration.quota,
                "ranges": c.calibration.ranges,
                "per_range": c.calibration.per_range,
            }),
            Stage::Calibrate => json!({
                "annotators": c.annotation.annotators,
                "thresholds": c.calibration.thresholds,
                "configured_threshold": c.similarity.threshold,
            }),
            Stage::Analyze => json!({ "top_n": c.analytics.top_n, "peak_z": c.analytics.peak_z }),
            Stage::Report => json!({}),
        }
    }

    /// Files a stage reads; every one must exist when the stage runs.
    fn inputs(&self, stage: Stage) -> Vec<PathBuf> {
        let c = &self.cfg;
        let mut v: Vec<PathBuf> = Vec::new();
        match stage {
            Stage::Ingest => {
                v.push(c.paths.posts.clone());
                if c.paths.image_manifest.exists() {
                    v.push(c.paths.image_manifest.clone());
                }
            }
            Stage::Toxicity => {
                v.push(self.art(Stage::Ingest, "posts.ndjson"));
                if c.toxicity.provider == ToxicityProviderKind::Lexicon {
                    v.extend(c.toxicity.lexicon.clone());
                }
            }
            Stage::Keywords => {
                v.push(self.art(Stage::Ingest, "posts.ndjson"));
                v.push(self.art(Stage::Toxicity, "toxic_posts.txt"));
                v.extend(c.paths.keywords.clone());
                v.extend(c.paths.stopwords.clone());
            }
            Stage::Phrases => {
                v.push(self.art(Stage::Ingest, "posts.ndjson"));
                v.push(self.art(Stage::Toxicity, "toxic_posts.txt"));
                v.push(self.art(Stage::Keywords, "selection.txt"));
            }
            Stage::AnnotateServe => {}
            Stage::Agreement => {
                v.push(self.art(Stage::Phrases, "candidates.csv"));
                v.push(c.paths.labels.clone());
            }
            Stage::Match => {
                v.push(self.art(Stage::Ingest, "posts.ndjson"));
                v.push(self.art(Stage::Agreement, "phrases.csv"));
            }
            Stage::Embed => {
                v.push(self.art(Stage::Agreement, "phrases.csv"));
                v.push(self.art(Stage::Ingest, "images.csv"));
                if c.embedding.provider == EmbeddingProviderKind::Fixture {
                    v.extend(c.embedding.text_vectors.clone());
                    v.extend(c.embedding.image_vectors.clone());
                }
            }
            Stage::Score => {
                v.push(self.art(Stage::Embed, "phrases.mmv"));
                v.push(self.art(Stage::Embed, "images.mmv"));
            }
            Stage::Sample => {
                v.push(self.art(Stage::Agreement, "phrases.csv"));
                v.push(self.art(Stage::Embed, "phrases.mmv"));
                v.push(self.art(Stage::Embed, "images.mmv"));
                v.push(self.art(Stage::Ingest, "images.csv"));
            }
            Stage::Calibrate => {
                v.push(self.art(Stage::Sample, "samples.csv"));
                v.push(c.paths.labels.clone());
            }
            Stage::Phash => v.push(self.art(Stage::Ingest, "images.csv")),
            Stage::BuildDatasets => {
                v.push(self.art(Stage::Ingest, "posts.ndjson"));
                v.push(self.art(Stage::Ingest, "images.csv"));
                v.push(self.art(Stage::Agreement, "phrases.csv"));
                v.push(self.art(Stage::Match, "matches.ndjson"));
                v.push(self.art(Stage::Score, "hits.csv"));
                v.push(self.art(Stage::Phash, "hashes.csv"));
            }
            Stage::Analyze => {
                v.push(self.art(Stage::Ingest, "posts.ndjson"));
                v.push(self.art(Stage::Ingest, "corpus_manifest.json"));
                v.push(self.art(Stage::Agreement, "phrases.csv"));
                v.push(self.art(Stage::Match, "matches.ndjson"));
                for cat in categories() {
                    for m in ["textual", "visual"] {
                        v.push(self.art(Stage::BuildDatasets, &format!("{m}_{cat}_posts.csv")));
                    }
                }
            }
            Stage::Report => {
                v.push(self.art(Stage::BuildDatasets, "counts.json"));
                v.push(self.art(Stage::Analyze, "analysis.json"));
                if self.is_complete(Stage::Calibrate) {
                    v.push(self.art(Stage::Calibrate, "calibration.json"));
                }
            }
        }
        v
    }

    /// Runs one batch stage, or reports it cached.
    pub fn run(&mut self, stage: Stage) -> Result<StageOutcome> {
        if stage == Stage::AnnotateServe {
            return Err(PipelineError::NotBatch { stage });
        }
        self.check_deps(stage)?;
        let inputs = self.inputs(stage);
        let mut input_digests = BTreeMap::new();
        for p in &inputs {
            if !p.exists() {
                return Err(PipelineError::Precondition(format!("{stage}: missing input {}", p.display())));
            }
            input_digests.insert(self.key(p), digest(p)?);
        }
        let stage_cfg = self.stage_config(stage);
        let config_digest = sha256_hex(stage_cfg.to_string().as_bytes());
        if let Some(rec) = self.manifest.stages.get(stage.name()) {
            if rec.config_digest == config_digest && rec.inputs == input_digests && self.outputs_intact(rec) {
                log::info!("{stage}: cached");
                return Ok(StageOutcome { stage: stage.name().into(), status: Status::Cached, summary: rec.summary.clone() });
            }
        }
        log::info!("{stage}: running");
        let started_utc = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
        let t0 = Instant::now();
        let produced = self.execute(stage, &input_digests)?;
        let mut outputs = BTreeMap::new();
        for p in &produced.outputs {
            outputs.insert(self.key(p), digest(p)?);
        }
        let rec = StageRecord {
            config_digest,
            config: stage_cfg,
            inputs: input_digests,
            outputs,
            started_utc,
            elapsed_ms: t0.elapsed().as_millis() as u64,
            summary: produced.summary.clone(),
        };
        self.manifest.stages.insert(stage.name().into(), rec);
        self.manifest.config = self.cfg.snapshot();
        write_json(&self.run_dir.join(MANIFEST_FILE), &self.manifest)?;
        Ok(StageOutcome { stage: stage.name().into(), status: Status::Ran, summary: produced.summary })
    }

    /// Runs every batch stage in dependency order.
    pub fn run_all(&mut self) -> Result<Vec<StageOutcome>> {
        Stage::BATCH.iter().map(|&s| self.run(s)).collect()
    }

    fn execute(&self, stage: Stage, inputs: &BTreeMap<String, String>) -> Result<Produced> {
        match stage {
            Stage::Ingest => self.ingest(),
            Stage::Toxicity => self.toxicity(),
            Stage::Keywords => self.keywords(),
            Stage::Phrases => self.phrases(),
            Stage::Agreement => self.agreement(),
            Stage::Match => self.matching(),
            Stage::Embed => self.embed(inputs),
            Stage::Score => self.score(),
            Stage::Sample => self.sample(),
            Stage::Calibrate => self.calibrate(),
            Stage::Phash => self.phash(),
            Stage::BuildDatasets => self.build_datasets(),
            Stage::Analyze => self.analyze(),
            Stage::Report => self.report(),
            Stage::AnnotateServe => Err(PipelineError::NotBatch { stage }),
        }
    }

    fn posts(&self) -> Result<Vec<Post>> {
        Ok(corpus::load_posts(&self.art(Stage::Ingest, "posts.ndjson"))?)
    }

    fn images(&self) -> Result<Vec<ImageRecord>> {
        Ok(corpus::load_image_manifest(&self.art(Stage::Ingest, "images.csv"))?)
    }

    fn toxic_set(&self) -> Result<HashSet<String>> {
        let path = self.art(Stage::Toxicity, "toxic_posts.txt");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
    }

    fn labeled_phrases(&self) -> Result<Vec<Phrase>> {
        Ok(phrasemine::read_phrases(&self.art(Stage::Agreement, "phrases.csv"))?)
    }

    fn annotator_pair(&self, state: &LabelState) -> Result<(String, String)> {
        if let Some(p) = self.cfg.annotation.pair() {
            return Ok(p);
        }
        let mut it = state.annotators().into_iter();
        match (it.next(), it.next()) {
            (Some(a), Some(b)) => Ok((a.to_string(), b.to_string())),
            _ => Err(PipelineError::Precondition("label log has fewer than two annotators".into())),
        }
    }

    fn ingest(&self) -> Result<Produced> {
        let posts_out = self.art(Stage::Ingest, "posts.ndjson");
        let mut report = None;
        write_atomic(&posts_out, |w| {
            report = Some(corpus::ingest_posts(&self.cfg.paths.posts, self.cfg.paths.source_format, &mut *w)?);
            Ok(())
        })?;
        let report = report.expect("set by writer");
        let images = if self.cfg.paths.image_manifest.exists() {
            corpus::load_image_manifest(&self.cfg.paths.image_manifest)?
        } else {
            log::warn!("no image manifest at {}; continuing text-only", self.cfg.paths.image_manifest.display());
            Vec::new()
        };
        let images_out = self.art(Stage::Ingest, "images.csv");
        write_atomic(&images_out, |w| Ok(corpus::write_image_manifest(&mut *w, &images)?))?;
        let manifest_out = self.art(Stage::Ingest, "corpus_manifest.json");
        write_json(&manifest_out, &report.manifest)?;
        let skipped_out = self.art(Stage::Ingest, "skipped.csv");
        write_csv(&skipped_out, &["line", "reason"], &report.skipped)?;
        Ok(Produced {
            outputs: vec![posts_out, images_out, manifest_out, skipped_out],
            summary: json!({
                "posts": report.manifest.post_count,
                "images": images.len(),
                "skipped": report.skipped.len(),
            }),
        })
    }

    fn toxicity_provider(&self) -> Result<Box<dyn ToxicityProvider>> {
        let t = &self.cfg.toxicity;
        match t.provider {
            ToxicityProviderKind::Lexicon => {
                let path = t.lexicon.as_ref().ok_or_else(|| {
                    PipelineError::Precondition("toxicity.lexicon is required by the lexicon provider".into())
                })?;
                Ok(Box::new(LexiconScorer::from_csv(&t.model_id, path)?))
            }
            ToxicityProviderKind::Perspective => {
                if t.api_key().is_none() {
                    return Err(PipelineError::Precondition(format!("set {API_KEY_ENV} to use the perspective provider")));
                }
                let client = PerspectiveClient::new(&t.endpoint, SEVERE_TOXICITY).map_err(|e| PipelineError::Provider(e.to_string()))?;
                Ok(Box::new(client))
            }
        }
    }

    fn toxicity(&self) -> Result<Produced> {
        let posts = self.posts()?;
        let provider = self.toxicity_provider()?;
        let t = &self.cfg.toxicity;
        let scorer = toxicity::ScorerConfig {
            endpoint: t.endpoint.clone(),
            max_requests_per_second: t.max_requests_per_second,
            max_retries: t.max_retries,
            cache_path: self.cfg.cache_dir().join(format!("toxicity-{}.tsv", sha256_hex(t.model_id.as_bytes()).get(..12).unwrap_or(""))),
            max_in_flight: t.max_in_flight,
        };
        if let Some(dir) = scorer.cache_path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let run = toxicity::score_posts(&posts, provider.as_ref(), &scorer, &SystemClock::default())?;
        if run.scores.is_empty() && !run.failures.is_empty() {
            return Err(PipelineError::Provider(format!("every post failed to score; first: {}", run.failures[0].error)));
        }
        for f in run.failures.iter().take(5) {
            log::warn!("toxicity: {} failed: {}", f.post_id, f.error);
        }
        let toxic = toxicity::filter_toxic(run.scores.iter(), t.threshold);
        let scores_out = self.art(Stage::Toxicity, "scores.csv");
        write_atomic(&scores_out, |w| Ok(toxicity::write_scores(&mut *w, &run.scores)?))?;
        let failures_out = self.art(Stage::Toxicity, "failures.csv");
        write_csv(&failures_out, &["post_id", "error"], &run.failures)?;
        let toxic_out = self.art(Stage::Toxicity, "toxic_posts.txt");
        write_atomic(&toxic_out, |w| {
            for id in &toxic {
                writeln!(w, "{id}").map_err(io_err(&toxic_out))?;
            }
            Ok(())
        })?;
        Ok(Produced {
            outputs: vec![scores_out, failures_out, toxic_out],
            summary: json!({
                "scored": run.scores.len(),
                "failed": run.failures.len(),
                "toxic": toxic.len(),
                "requests": run.requests_issued,
                "cache_hits": run.cache_hits,
            }),
        })
    }

    fn keywords(&self) -> Result<Produced> {
        let posts = self.posts()?;
        let toxic = self.toxic_set()?;
        let stopwords = match &self.cfg.paths.stopwords {
            Some(p) => Stopwords::from_file(p).map_err(io_err(p))?,
            None => Stopwords::english(),
        };
        let docs: Vec<Vec<String>> =
            posts.iter().filter(|p| toxic.contains(&p.post_id)).map(|p| textmine::tokenize(&p.clean_text)).collect();
        if docs.is_empty() {
            return Err(PipelineError::Precondition("no toxic posts to rank terms over".into()));
        }
        let scores = textmine::build_tfidf(docs, &stopwords)?;
        let top = textmine::top_terms(&scores, self.cfg.keywords.top_k)?;
        let selection = match &self.cfg.paths.keywords {
            Some(p) => KeywordSelection::load(p)?,
            None => KeywordSelection::default_fixture(),
        };
        let missing = selection.missing_from(&top);
        if !missing.is_empty() {
            log::warn!("selected keywords outside the ranked top-{}: {missing:?}", self.cfg.keywords.top_k);
        }
        let ranked_out = self.art(Stage::Keywords, "ranked_terms.csv");
        write_atomic(&ranked_out, |w| Ok(textmine::write_ranked_report(&mut *w, &top)?))?;
        let selection_out = self.art(Stage::Keywords, "selection.txt");
        let text = selection.to_file_string();
        write_atomic(&selection_out, |w| w.write_all(text.as_bytes()).map_err(io_err(&selection_out)))?;
        Ok(Produced {
            outputs: vec![ranked_out, selection_out],
            summary: json!({
                "documents": toxic.len(),
                "ranked_terms": top.len(),
                "keywords": selection.keywords,
                "outside_top_k": missing,
            }),
        })
    }

    fn phrases(&self) -> Result<Produced> {
        let posts = self.posts()?;
        let toxic = self.toxic_set()?;
        let selection = KeywordSelection::load(&self.art(Stage::Keywords, "selection.txt"))?;
        let texts: Vec<&str> =
            phrasemine::keyword_posts(posts.iter(), &toxic, &selection).map(|p| p.clean_text.as_str()).collect();
        let params = ExtractParams { min_freq: self.cfg.phrases.min_freq, max_words: self.cfg.phrases.max_words };
        let lem = RuleLemmatizer::bundled();
        let candidates = phrasemine::extract_candidates(texts.iter().copied(), &lem, params, Some(&selection));
        let out = self.art(Stage::Phrases, "candidates.csv");
        write_atomic(&out, |w| Ok(phrasemine::write_phrases(&mut *w, &candidates)?))?;
        let queue: Vec<QueueItem> = candidates
            .iter()
            .map(|p| QueueItem {
                item_id: p.phrase_id.clone(),
                kind: ItemKind::Phrase,
                text: p.lemmas_joined(),
                phrase_id: Some(p.phrase_id.clone()),
                image_id: None,
                image_path: None,
                cosine: None,
                multi_target: p.multi_target,
            })
            .collect();
        let queue_out = self.art(Stage::Phrases, "queue.ndjson");
        write_ndjson(&queue_out, &queue)?;
        Ok(Produced {
            outputs: vec![out, queue_out],
            summary: json!({
                "keyword_posts": texts.len(),
                "candidates": candidates.len(),
                "multi_target": candidates.iter().filter(|p| p.multi_target).count(),
            }),
        })
    }

    fn agreement(&self) -> Result<Produced> {
        let candidates = phrasemine::read_phrases(&self.art(Stage::Phrases, "candidates.csv"))?;
        let state = replay_labels(&self.cfg.paths.labels)?;
        let pair = self.annotator_pair(&state)?;
        let ids: BTreeSet<String> = candidates.iter().map(|p| p.phrase_id.clone()).collect();
        let (la, lb) = complete_labels(&state, &pair, ItemKind::Phrase, &ids)?;
        let report = agreement::cohen_kappa(&la, &lb)?;
        let mut resolutions = state.resolutions_of(ItemKind::Phrase);
        resolutions.retain(|k, _| ids.contains(k));
        let finals = agreement::adjudicate(&la, &lb, &resolutions)?;
        let labeled: Vec<Phrase> =
            candidates.into_iter().map(|p| Phrase { category: finals[&p.phrase_id], ..p }).collect();
        let out = self.art(Stage::Agreement, "phrases.csv");
        write_atomic(&out, |w| Ok(phrasemine::write_phrases(&mut *w, &labeled)?))?;
        let per_cat: BTreeMap<String, usize> = [Category::Antisemitic, Category::Islamophobic, Category::Irrelevant]
            .iter()
            .map(|c| (c.to_string(), labeled.iter().filter(|p| p.category == *c).count()))
            .collect();
        let report_out = self.art(Stage::Agreement, "report.json");
        write_json(
            &report_out,
            &json!({
                "annotators": [pair.0, pair.1],
                "report": report,
                "disagreements": resolutions.len(),
                "final": per_cat,
            }),
        )?;
        Ok(Produced {
            outputs: vec![out, report_out],
            summary: json!({
                "items": report.n_items,
                "percent_agreement": report.percent_agreement,
                "kappa": report.kappa,
                "final": per_cat,
            }),
        })
    }

    fn matching(&self) -> Result<Produced> {
        let posts = self.posts()?;
        let targets = target_phrases(self.labeled_phrases()?);
        let matches = phrasemine::match_phrases(&posts, &targets, &RuleLemmatizer::bundled())?;
        let out = self.art(Stage::Match, "matches.ndjson");
        write_atomic(&out, |w| phrasemine::write_matches(&mut *w, &matches).map_err(io_err(&out)))?;
        let posts_hit: BTreeSet<&str> = matches.iter().map(|m| m.post_id.as_str()).collect();
        Ok(Produced { outputs: vec![out], summary: json!({ "matches": matches.len(), "posts": posts_hit.len() }) })
    }

    fn embedding_provider(&self) -> Result<Box<dyn EmbeddingProvider>> {
        let e = &self.cfg.embedding;
        Ok(match e.provider {
            EmbeddingProviderKind::Fixture => {
                let (Some(t), Some(i)) = (&e.text_vectors, &e.image_vectors) else {
                    return Err(PipelineError::Precondition(
                        "embedding.text_vectors and embedding.image_vectors are required by the fixture provider".into(),
                    ));
                };
                Box::new(FixtureProvider::from_files(&e.model_id, t, i)?)
            }
            EmbeddingProviderKind::Procedural => Box::new(ProceduralProvider::new(&e.model_id, e.dim)),
            EmbeddingProviderKind::Remote => Box::new(
                RemoteProvider::connect(&e.sidecar_url, e.max_retries).map_err(|err| PipelineError::Provider(err.to_string()))?,
            ),
        })
    }

    fn embed(&self, inputs: &BTreeMap<String, String>) -> Result<Produced> {
        let targets = target_phrases(self.labeled_phrases()?);
        if targets.is_empty() {
            return Err(PipelineError::Precondition("no phrase carries a target label".into()));
        }
        let provider = self.embedding_provider()?;
        let batch = self.cfg.embedding.batch;
        let phrase_store = VectorStore::from_vectors(embedcore::encode_texts(provider.as_ref(), &targets, batch)?)?.sorted();
        let phrases_out = self.art(Stage::Embed, "phrases.mmv");
        fs::create_dir_all(phrases_out.parent().expect("stage dir")).map_err(io_err(&self.run_dir))?;
        phrase_store.save(&phrases_out)?;

        // An interrupted run over the same inputs leaves a marker; only then
        // are partial results reused.
        let marker = self.art(Stage::Embed, ".inputs");
        let fingerprint = sha256_hex(format!("{inputs:?}{}", self.stage_config(Stage::Embed)).as_bytes());
        let resume = fs::read_to_string(&marker).map(|m| m == fingerprint).unwrap_or(false);
        fs::write(&marker, &fingerprint).map_err(io_err(&marker))?;
        let images = self.images()?;
        let images_out = self.art(Stage::Embed, "images.mmv");
        let run = if images.is_empty() {
            let store = VectorStore::empty(provider.model_id(), phrase_store.dim());
            store.save(&images_out)?;
            embedcore::ImageEncodeRun { store, skipped: Vec::new(), provider_calls: 0, decoded: HashMap::new() }
        } else {
            embedcore::encode_images(provider.as_ref(), &images, &self.cfg.paths.images, &images_out, resume, batch)?
        };
        if !run.store.is_empty() && run.store.dim() != phrase_store.dim() {
            return Err(EmbedError::DimMismatch(run.store.dim(), phrase_store.dim()).into());
        }
        fs::remove_file(&marker).map_err(io_err(&marker))?;
        let skipped_out = self.art(Stage::Embed, "skipped.csv");
        write_csv(&skipped_out, &["image_id", "reason"], &run.skipped)?;
        Ok(Produced {
            outputs: vec![phrases_out, images_out, skipped_out],
            summary: json!({
                "model_id": provider.model_id(),
                "dim": phrase_store.dim(),
                "phrases": phrase_store.len(),
                "images": run.store.len(),
                "skipped": run.skipped.len(),
                "provider_calls": run.provider_calls,
            }),
        })
    }

    fn stores(&self) -> Result<(VectorStore, VectorStore)> {
        let phrases = VectorStore::load(&self.art(Stage::Embed, "phrases.mmv"))?;
        let images = VectorStore::load(&self.art(Stage::Embed, "images.mmv"))?;
        Ok((phrases, images))
    }

    fn score(&self) -> Result<Produced> {
        let (phrases, images) = self.stores()?;
        let hits = embedcore::score_all(&images, &phrases, self.cfg.similarity.threshold)?;
        let out = self.art(Stage::Score, "hits.csv");
        write_atomic(&out, |w| Ok(embedcore::write_hits(&mut *w, &hits)?))?;
        let imgs: BTreeSet<&str> = hits.iter().map(|h| h.image_id.as_str()).collect();
        Ok(Produced {
            outputs: vec![out],
            summary: json!({ "threshold": self.cfg.similarity.threshold, "hits": hits.len(), "images": imgs.len() }),
        })
    }

    fn sample(&self) -> Result<Produced> {
        let targets = target_phrases(self.labeled_phrases()?);
        let (phrase_store, images) = self.stores()?;
        let storage: HashMap<String, String> =
            self.images()?.into_iter().map(|r| (r.image_id.0, r.storage_path)).collect();
        let c = &self.cfg.calibration;
        let chosen = calibrate::sample_phrases(&targets, &c.quota, self.cfg.seed)?;
        let plan = RangePlan::new(c.ranges.clone())?;
        let mut samples = Vec::new();
        for p in &chosen {
            let v = phrase_store.get(&p.phrase_id).ok_or_else(|| EmbedError::MissingFixture(p.phrase_id.clone()))?;
            let cos = embedcore::cosines_for(&images, v)?;
            samples.push(calibrate::stratified_sample(&p.phrase_id, &cos, &plan, c.per_range, self.cfg.seed));
        }
        let text_of: HashMap<&str, String> = chosen.iter().map(|p| (p.phrase_id.as_str(), p.lemmas_joined())).collect();
        let queue: Vec<QueueItem> = samples
            .iter()
            .flat_map(|s| &s.entries)
            .map(|e| QueueItem {
                item_id: agreement::pair_item_id(&e.phrase_id, &e.image_id),
                kind: ItemKind::ImagePair,
                text: text_of[e.phrase_id.as_str()].clone(),
                phrase_id: Some(e.phrase_id.clone()),
                image_id: Some(e.image_id.clone()),
                image_path: storage.get(&e.image_id).map(PathBuf::from),
                cosine: Some(e.cosine),
                multi_target: false,
            })
            .collect();
        #[derive(Serialize)]
        struct ShortRow<'a> {
            phrase_id: &'a str,
            range_index: usize,
            requested: usize,
            available: usize,
        }
        let shorts: Vec<ShortRow> = samples
            .iter()
            .flat_map(|s| {
                s.shortfalls.iter().map(|f| ShortRow {
                    phrase_id: &s.phrase_id,
                    range_index: f.range_index,
                    requested: f.requested,
                    available: f.available,
                })
            })
            .collect();
        let phrases_out = self.art(Stage::Sample, "phrases.csv");
        write_atomic(&phrases_out, |w| Ok(phrasemine::write_phrases(&mut *w, &chosen)?))?;
        let samples_out = self.art(Stage::Sample, "samples.csv");
        write_atomic(&samples_out, |w| Ok(calibrate::write_samples(&mut *w, &samples)?))?;
        let short_out = self.art(Stage::Sample, "shortfalls.csv");
        write_csv(&short_out, &["phrase_id", "range_index", "requested", "available"], &shorts)?;
        let queue_out = self.art(Stage::Sample, "queue.ndjson");
        write_ndjson(&queue_out, &queue)?;
        Ok(Produced {
            outputs: vec![phrases_out, samples_out, short_out, queue_out],
            summary: json!({ "phrases": chosen.len(), "pairs": queue.len(), "shortfalls": shorts.len() }),
        })
    }

    fn calibrate(&self) -> Result<Produced> {
        let samples = calibrate::read_samples(&self.art(Stage::Sample, "samples.csv"))?;
        let state = replay_labels(&self.cfg.paths.labels)?;
        let pair = self.annotator_pair(&state)?;
        let ids: BTreeSet<String> = samples.iter().map(|s| agreement::pair_item_id(&s.phrase_id, &s.image_id)).collect();
        let (la, lb) = complete_labels(&state, &pair, ItemKind::ImagePair, &ids)?;
        let report = agreement::cohen_kappa(&la, &lb)?;
        let mut resolutions = state.resolutions_of(ItemKind::ImagePair);
        resolutions.retain(|k, _| ids.contains(k));
        let finals = agreement::adjudicate(&la, &lb, &resolutions)?;
        let labels: Vec<PairLabel> = samples
            .iter()
            .map(|s| PairLabel {
                phrase_id: s.phrase_id.clone(),
                image_id: s.image_id.clone(),
                relevant: finals[&agreement::pair_item_id(&s.phrase_id, &s.image_id)].is_target(),
            })
            .collect();
        let cosines: HashMap<(String, String), f64> =
            samples.iter().map(|s| ((s.phrase_id.clone(), s.image_id.clone()), s.cosine)).collect();
        let sweep = calibrate::sweep(&labels, &cosines, &self.cfg.calibration.thresholds)?;
        let selected = calibrate::select_threshold(&sweep)?;
        let best = sweep.iter().find(|m| m.threshold == selected).expect("selected from sweep").mean;
        if (selected - self.cfg.similarity.threshold).abs() > 1e-12 {
            log::warn!("calibration selects {selected}, configured similarity threshold is {}", self.cfg.similarity.threshold);
        }
        let labels_out = self.art(Stage::Calibrate, "pair_labels.csv");
        write_csv(&labels_out, &["phrase_id", "image_id", "relevant"], &labels)?;
        let sweep_out = self.art(Stage::Calibrate, "sweep.csv");
        write_atomic(&sweep_out, |w| Ok(calibrate::write_sweep(&mut *w, &sweep)?))?;
        let summary_out = self.art(Stage::Calibrate, "sweep_summary.csv");
        write_atomic(&summary_out, |w| Ok(calibrate::write_sweep_summary(&mut *w, &sweep)?))?;
        let cal = Calibration {
            annotators: [pair.0, pair.1],
            agreement: report,
            labeled_pairs: labels.len(),
            relevant_pairs: labels.iter().filter(|l| l.relevant).count(),
            selected_threshold: selected,
            configured_threshold: self.cfg.similarity.threshold,
            best_mean: best,
        };
        let cal_out = self.art(Stage::Calibrate, "calibration.json");
        write_json(&cal_out, &cal)?;
        Ok(Produced {
            outputs: vec![labels_out, sweep_out, summary_out, cal_out],
            summary: json!({
                "pairs": cal.labeled_pairs,
                "kappa": cal.agreement.kappa,
                "selected_threshold": selected,
                "mean_f1": best.f1,
            }),
        })
    }

    fn phash(&self) -> Result<Produced> {
        let images = self.images()?;
        let run = phash::hash_manifest(&images, &self.cfg.paths.images);
        let out = self.art(Stage::Phash, "hashes.csv");
        write_atomic(&out, |w| Ok(phash::write_hashes(&mut *w, &run.hashes)?))?;
        let failures_out = self.art(Stage::Phash, "failures.csv");
        write_csv(&failures_out, &["image_id", "error"], &run.failures)?;
        let unique = phash::dedup_groups(&run.hashes).len();
        Ok(Produced {
            outputs: vec![out, failures_out],
            summary: json!({ "hashed": run.hashes.len(), "failed": run.failures.len(), "unique": unique }),
        })
    }

    fn build_datasets(&self) -> Result<Produced> {
        let posts = self.posts()?;
        let images = self.images()?;
        let phrases = self.labeled_phrases()?;
        let matches = phrasemine::read_matches(&self.art(Stage::Match, "matches.ndjson"))?;
        let hits = embedcore::read_hits(&self.art(Stage::Score, "hits.csv"))?;
        let hashes = phash::read_hashes(&self.art(Stage::Phash, "hashes.csv"))?;
        let textual = datasets::build_textual(&matches, &phrases)?;
        let visual = datasets::build_visual(&hits, &phrases, &hashes, &images, &datasets::image_posts(&posts))?;
        let mut outputs = Vec::new();
        for (m, build) in [("textual", &textual), ("visual", &visual)] {
            for cat in categories() {
                let ds = build.get(cat);
                let items = self.art(Stage::BuildDatasets, &format!("{m}_{cat}_items.csv"));
                write_atomic(&items, |w| Ok(datasets::write_manifest(&mut *w, ds)?))?;
                let posts_out = self.art(Stage::BuildDatasets, &format!("{m}_{cat}_posts.csv"));
                write_atomic(&posts_out, |w| Ok(datasets::write_posts(&mut *w, ds)?))?;
                outputs.push(items);
                outputs.push(posts_out);
            }
        }
        #[derive(Serialize)]
        struct Excluded<'a> {
            modality: &'a str,
            id: &'a str,
        }
        let excluded: Vec<Excluded> = textual
            .excluded
            .iter()
            .map(|id| Excluded { modality: "textual", id })
            .chain(visual.excluded.iter().map(|id| Excluded { modality: "visual", id }))
            .collect();
        let excluded_out = self.art(Stage::BuildDatasets, "excluded.csv");
        write_csv(&excluded_out, &["modality", "id"], &excluded)?;
        let summary = datasets::counts(&textual, &visual);
        let counts_out = self.art(Stage::BuildDatasets, "counts.csv");
        write_atomic(&counts_out, |w| Ok(datasets::write_counts(&mut *w, &summary)?))?;
        let counts_json = self.art(Stage::BuildDatasets, "counts.json");
        write_json(&counts_json, &summary)?;
        outputs.extend([excluded_out, counts_out, counts_json]);
        Ok(Produced { outputs, summary: serde_json::to_value(&summary)? })
    }

    fn analyze(&self) -> Result<Produced> {
        let posts = self.posts()?;
        let corpus_manifest: corpus::CorpusManifest = read_json(&self.art(Stage::Ingest, "corpus_manifest.json"))?;
        let span = day_span(&corpus_manifest)?;
        let phrases = self.labeled_phrases()?;
        let matches = phrasemine::read_matches(&self.art(Stage::Match, "matches.ndjson"))?;
        let ts: HashMap<&str, i64> = posts.iter().map(|p| (p.post_id.as_str(), p.timestamp_utc)).collect();
        let a = &self.cfg.analytics;
        let series = |ids: &BTreeSet<String>| -> Result<DailySeries> {
            let stamps: Vec<i64> = ids.iter().filter_map(|id| ts.get(id.as_str()).copied()).collect();
            match span {
                Some(s) => Ok(analytics::daily_series(&stamps, Some(s))?),
                None => Ok(DailySeries { days: Vec::new() }),
            }
        };
        let mut outputs = Vec::new();
        let mut cats = Vec::new();
        let mut peak_rows: Vec<(String, &str, NaiveDate, u64)> = Vec::new();
        for cat in categories() {
            let textual = datasets::read_post_ids(&self.art(Stage::BuildDatasets, &format!("textual_{cat}_posts.csv")))?;
            let visual = datasets::read_post_ids(&self.art(Stage::BuildDatasets, &format!("visual_{cat}_posts.csv")))?;
            let in_ds: Vec<_> = matches.iter().filter(|m| textual.contains(&m.post_id)).cloned().collect();
            let counted = phrasemine::posts_per_phrase(&in_ds);
            let mine: Vec<&Phrase> = phrases.iter().filter(|p| p.category == cat).collect();
            let per_phrase: BTreeMap<String, u64> =
                mine.iter().map(|p| (p.phrase_id.clone(), counted.get(&p.phrase_id).copied().unwrap_or(0))).collect();
            let counts: Vec<u64> = per_phrase.values().copied().collect();
            let cdf = if counts.is_empty() { Vec::new() } else { analytics::cdf(&counts)? };
            let by_text: Vec<(String, u64)> = mine.iter().map(|p| (p.lemmas_joined(), per_phrase[&p.phrase_id])).collect();
            let id_of: HashMap<String, &str> = mine.iter().map(|p| (p.lemmas_joined(), p.phrase_id.as_str())).collect();
            let top: Vec<TopRow> = analytics::top_n(&by_text, a.top_n)
                .into_iter()
                .enumerate()
                .map(|(i, (text, n))| TopRow { rank: i + 1, phrase_id: id_of[&text].to_string(), phrase: text, posts: n })
                .collect();
            let st = series(&textual)?;
            let sv = series(&visual)?;
            let (correlation, correlation_error) = if st.days.len() < 2 {
                (None, Some(AnalyticsError::TooShort.to_string()))
            } else {
                let x: Vec<i64> = st.counts().into_iter().map(|c| c as i64).collect();
                let y: Vec<i64> = sv.counts().into_iter().map(|c| c as i64).collect();
                match analytics::kendall_tau_b(&x, &y) {
                    Ok(r) => (Some(r), None),
                    Err(e) => (None, Some(e.to_string())),
                }
            };
            let (peaks_textual, peaks_visual) = if st.days.len() < 2 {
                (Vec::new(), Vec::new())
            } else {
                (analytics::detect_peaks(&st, a.peak_z), analytics::detect_peaks(&sv, a.peak_z))
            };
            for (d, n) in &peaks_textual {
                peak_rows.push((cat.to_string(), "textual", *d, *n));
            }
            for (d, n) in &peaks_visual {
                peak_rows.push((cat.to_string(), "visual", *d, *n));
            }
            let cdf_out = self.art(Stage::Analyze, &format!("cdf_{cat}.csv"));
            write_atomic(&cdf_out, |w| analytics::write_cdf(&mut *w, &cdf).map_err(io_err(&cdf_out)))?;
            let top_out = self.art(Stage::Analyze, &format!("top_{cat}.csv"));
            write_csv(&top_out, &["rank", "phrase_id", "phrase", "posts"], &top)?;
            let daily_out = self.art(Stage::Analyze, &format!("daily_{cat}.csv"));
            let rows = analytics::align(&st, &sv);
            write_atomic(&daily_out, |w| {
                analytics::write_daily(&mut *w, &rows, ["textual_posts", "visual_posts"]).map_err(io_err(&daily_out))
            })?;
            outputs.extend([cdf_out, top_out, daily_out]);
            cats.push(CategoryAnalysis {
                category: cat,
                posts_per_phrase: per_phrase,
                cdf,
                top,
                daily_textual: st.counts(),
                daily_visual: sv.counts(),
                correlation,
                correlation_error,
                peaks_textual,
                peaks_visual,
            });
        }
        let peaks_out = self.art(Stage::Analyze, "peaks.csv");
        write_csv(&peaks_out, &["category", "modality", "date", "posts"], &peak_rows)?;
        let days = cats.first().map(|c| c.daily_textual.len()).unwrap_or(0);
        let analysis = Analysis { first_day: span.map(|s| s.0), days, categories: cats };
        let analysis_out = self.art(Stage::Analyze, "analysis.json");
        write_json(&analysis_out, &analysis)?;
        outputs.extend([peaks_out, analysis_out]);
        let summary = json!({
            "days": days,
            "correlation": analysis.categories.iter().map(|c| (c.category.to_string(), c.correlation.as_ref().map(|r| r.tau_b))).collect::<BTreeMap<_, _>>(),
        });
        Ok(Produced { outputs, summary })
    }

    fn report(&self) -> Result<Produced> {
        let counts: CountsSummary = read_json(&self.art(Stage::BuildDatasets, "counts.json"))?;
        let analysis: Analysis = read_json(&self.art(Stage::Analyze, "analysis.json"))?;
        let calibration: Option<Calibration> = if self.is_complete(Stage::Calibrate) {
            Some(read_json(&self.art(Stage::Calibrate, "calibration.json"))?)
        } else {
            None
        };
        let doc = json!({
            "counts": counts,
            "calibration": calibration,
            "analysis": analysis,
        });
        let json_out = self.art(Stage::Report, "report.json");
        write_json(&json_out, &doc)?;
        let md = render_markdown(&counts, &analysis, calibration.as_ref());
        let md_out = self.art(Stage::Report, "report.md");
        write_atomic(&md_out, |w| w.write_all(md.as_bytes()).map_err(io_err(&md_out)))?;
        Ok(Produced { outputs: vec![md_out, json_out], summary: json!({ "excluded_posts": counts.excluded_posts, "excluded_images": counts.excluded_images }) })
    }

    /// The annotation service over the phrase queue and, once sampling has
    /// run, the image-pair queue.
    pub fn annotation_service(&self) -> Result<Arc<Service>> {
        self.check_deps(Stage::AnnotateServe)?;
        let mut items = read_queue(&self.art(Stage::Phrases, "queue.ndjson"))?;
        if self.is_complete(Stage::Sample) {
            let root = &self.cfg.paths.images;
            items.extend(read_queue(&self.art(Stage::Sample, "queue.ndjson"))?.into_iter().map(|mut i| {
                i.image_path = i.image_path.map(|p| root.join(p));
                i
            }));
        }
        if let Some(dir) = self.cfg.paths.labels.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let store = LabelStore::open(&self.cfg.paths.labels)?;
        let config = ServiceConfig {
            annotators: self.cfg.annotation.pair(),
            sweep_every: self.cfg.annotation.sweep_every,
            thresholds: self.cfg.calibration.thresholds.clone(),
        };
        Ok(Service::new(store, items, config))
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:.4}")
}

fn render_markdown(counts: &CountsSummary, analysis: &Analysis, calibration: Option<&Calibration>) -> String {
    let mut s = String::new();
    let mut line = |l: String| {
        s.push_str(&l);
        s.push('\n');
    };
    line("# Dataset report".into());
    line(String::new());
    line("## Counts".into());
    line(String::new());
    line("| category | phrases | textual posts | images | visual posts |".into());
    line("|---|---:|---:|---:|---:|".into());
    for r in &counts.rows {
        line(format!("| {} | {} | {} | {} | {} |", r.category, r.phrases, r.textual_posts, r.images, r.visual_posts));
    }
    line(String::new());
    line(format!("Excluded posts (both categories): {}", counts.excluded_posts));
    line(format!("Excluded images (both categories): {}", counts.excluded_images));
    if let Some(c) = calibration {
        line(String::new());
        line("## Calibration".into());
        line(String::new());
        line(format!(
            "Image-pair agreement between {} and {}: {} items, {} agreement, kappa {}",
            c.annotators[0],
            c.annotators[1],
            c.agreement.n_items,
            fmt_f(c.agreement.percent_agreement),
            fmt_f(c.agreement.kappa)
        ));
        line(format!(
            "Selected threshold {} (configured {}); mean accuracy {}, precision {}, recall {}, F1 {}",
            c.selected_threshold,
            c.configured_threshold,
            fmt_f(c.best_mean.accuracy),
            fmt_f(c.best_mean.precision),
            fmt_f(c.best_mean.recall),
            fmt_f(c.best_mean.f1)
        ));
    }
    for cat in &analysis.categories {
        line(String::new());
        line(format!("## {}", cat.category));
        line(String::new());
        line("| rank | phrase | posts |".into());
        line("|---:|---|---:|".into());
        for t in &cat.top {
            line(format!("| {} | {} | {} |", t.rank, t.phrase, t.posts));
        }
        line(String::new());
        let cdf: Vec<String> = cat.cdf.iter().map(|p| format!("{}:{}", p.value, fmt_f(p.fraction))).collect();
        line(format!("CDF of posts per phrase: {}", if cdf.is_empty() { "none".into() } else { cdf.join(", ") }));
        match (&cat.correlation, &cat.correlation_error) {
            (Some(r), _) => line(format!(
                "Kendall tau-b, textual vs visual daily posts: {} (p = {:.3e}, n = {})",
                fmt_f(r.tau_b),
                r.p_value,
                r.n
            )),
            (None, Some(e)) => line(format!("Kendall tau-b, textual vs visual daily posts: undefined ({e})")),
            (None, None) => line("Kendall tau-b, textual vs visual daily posts: undefined".into()),
        }
        let peaks = |p: &[(NaiveDate, u64)]| -> String {
            if p.is_empty() {
                "none".into()
            } else {
                p.iter().map(|(d, n)| format!("{d} ({n})")).collect::<Vec<_>>().join(", ")
            }
        };
        line(format!("Peak days, textual: {}", peaks(&cat.peaks_textual)));
        line(format!("Peak days, visual: {}", peaks(&cat.peaks_visual)));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dag_is_acyclic_and_batch_order_respects_it() {
        for (i, s) in Stage::BATCH.iter().enumerate() {
            for d in s.deps() {
                let j = Stage::BATCH.iter().position(|x| x == d).expect("dep is a batch stage");
                assert!(j < i, "{d} must precede {s}");
            }
        }
        assert!(Stage::ALL.iter().all(|s| s.deps().iter().all(|d| *d != *s)));
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("scoring".parse::<Stage>().is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(PipelineError::Requires(Stage::Embed).exit_code(), 2);
        assert_eq!(PipelineError::Requires(Stage::Embed).to_string(), "requires: embed");
        assert_eq!(PipelineError::Provider("down".into()).exit_code(), 3);
        assert_eq!(PipelineError::Embed(EmbedError::Provider("x".into())).exit_code(), 3);
        assert_eq!(PipelineError::Embed(EmbedError::Empty).exit_code(), 1);
    }

    fn temp_cfg(dir: &Path) -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.resolve(dir);
        cfg
    }

    #[test]
    fn score_before_embed_names_the_missing_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Pipeline::open(temp_cfg(dir.path())).unwrap();
        let err = p.run(Stage::Score).unwrap_err();
        assert_eq!(err.to_string(), "requires: embed");
    }

    #[test]
    fn lock_excludes_a_second_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::open(temp_cfg(dir.path())).unwrap();
        assert!(matches!(Pipeline::open(temp_cfg(dir.path())), Err(PipelineError::Locked(_))));
        drop(p);
        Pipeline::open(temp_cfg(dir.path())).unwrap();
    }

    #[test]
    fn annotate_serve_is_not_a_batch_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Pipeline::open(temp_cfg(dir.path())).unwrap();
        assert!(matches!(p.run(Stage::AnnotateServe), Err(PipelineError::NotBatch { .. })));
    }
}
