//! Severe-toxicity scoring with caching and rate limiting.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::Post;
use crate::digest::sha256_hex_parts;
use crate::textmine::tokenize;

pub const DEFAULT_THRESHOLD: f64 = 0.8;
pub const SEVERE_TOXICITY: &str = "SEVERE_TOXICITY";
pub const DEFAULT_ENDPOINT: &str = "https://commentanalyzer.googleapis.com/v1alpha1/comments:analyze";
pub const API_KEY_ENV: &str = "PERSPECTIVE_API_KEY";

#[derive(Debug, thiserror::Error)]
pub enum ToxicityError {
    #[error("invalid scorer config: {0}")]
    Config(String),
    #[error("score cache {path}: {reason}")]
    Cache { path: PathBuf, reason: String },
    #[error("lexicon: {0}")]
    Lexicon(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum ProviderError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("bad response: {0}")]
    Response(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToxicityScore {
    pub post_id: String,
    pub model_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub endpoint: String,
    pub max_requests_per_second: f64,
    pub max_retries: u32,
    pub cache_path: PathBuf,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_in_flight() -> usize {
    4
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<(), ToxicityError> {
        if !(self.max_requests_per_second > 0.0 && self.max_requests_per_second.is_finite()) {
            return Err(ToxicityError::Config(format!(
                "max_requests_per_second must be positive, got {}",
                self.max_requests_per_second
            )));
        }
        if self.max_in_flight == 0 {
            return Err(ToxicityError::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }
}

/// Something that scores one text for a single toxicity attribute.
pub trait ToxicityProvider: Send + Sync {
    fn model_id(&self) -> &str;
    fn score_text(&self, text: &str) -> Result<f64, ProviderError>;
    /// Local providers skip the request limiter.
    fn rate_limited(&self) -> bool {
        true
    }
}

/// Deterministic mock: the score of a text is the highest score among
/// lexicon terms whose tokens occur contiguously in it, 0 otherwise.
#[derive(Debug, Clone)]
pub struct LexiconScorer {
    model_id: String,
    terms: Vec<(Vec<String>, f64)>,
}

impl LexiconScorer {
    pub fn new<I, S>(model_id: &str, entries: I) -> Result<Self, ToxicityError>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: AsRef<str>,
    {
        let mut terms = Vec::new();
        for (term, score) in entries {
            if !(0.0..=1.0).contains(&score) {
                return Err(ToxicityError::Lexicon(format!(
                    "score {score} for {:?} outside [0,1]",
                    term.as_ref()
                )));
            }
            let toks = tokenize(term.as_ref());
            if toks.is_empty() {
                return Err(ToxicityError::Lexicon(format!("empty term {:?}", term.as_ref())));
            }
            terms.push((toks, score));
        }
        Ok(LexiconScorer {
            model_id: model_id.to_string(),
            terms,
        })
    }

    /// Reads a `term,score` CSV.
    pub fn from_csv(model_id: &str, path: &Path) -> Result<Self, ToxicityError> {
        #[derive(Deserialize)]
        struct Row {
            term: String,
            score: f64,
        }
        let mut r = csv::Reader::from_path(path)?;
        let rows: Vec<Row> = r.deserialize().collect::<Result<_, _>>()?;
        Self::new(model_id, rows.into_iter().map(|r| (r.term, r.score)))
    }
}

impl ToxicityProvider for LexiconScorer {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn rate_limited(&self) -> bool {
        false
    }

    fn score_text(&self, text: &str) -> Result<f64, ProviderError> {
        let toks = tokenize(text);
        Ok(self
            .terms
            .iter()
            .filter(|(term, _)| toks.windows(term.len()).any(|w| w == term.as_slice()))
            .map(|(_, s)| *s)
            .fold(0.0, f64::max))
    }
}

/// Client for a comment-analysis endpoint shaped like the public Perspective API.
pub struct PerspectiveClient {
    endpoint: String,
    api_key: Option<String>,
    attribute: String,
    client: reqwest::blocking::Client,
}

impl PerspectiveClient {
    /// Reads the API key from `PERSPECTIVE_API_KEY` when set.
    pub fn new(endpoint: &str, attribute: &str) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(PerspectiveClient {
            endpoint: endpoint.to_string(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            attribute: attribute.to_string(),
            client,
        })
    }

    pub fn request_body(&self, text: &str) -> serde_json::Value {
        json!({
            "comment": { "text": text },
            "requestedAttributes": { self.attribute.as_str(): {} },
            "doNotStore": true,
        })
    }

    /// Extracts `attributeScores.<ATTR>.summaryScore.value`.
    pub fn parse_response(attribute: &str, body: &serde_json::Value) -> Result<f64, ProviderError> {
        let value = body
            .pointer(&format!("/attributeScores/{attribute}/summaryScore/value"))
            .and_then(serde_json::Value::as_f64)
            .ok_or_else(|| ProviderError::Response(format!("no summary score for {attribute}")))?;
        if !(0.0..=1.0).contains(&value) {
            return Err(ProviderError::Response(format!("score {value} outside [0,1]")));
        }
        Ok(value)
    }
}

impl ToxicityProvider for PerspectiveClient {
    fn model_id(&self) -> &str {
        &self.attribute
    }

    fn score_text(&self, text: &str) -> Result<f64, ProviderError> {
        let mut req = self.client.post(&self.endpoint).json(&self.request_body(text));
        if let Some(key) = &self.api_key {
            req = req.query(&[("key", key)]);
        }
        let resp = req.send().map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(ProviderError::Transport(format!("HTTP {status}")));
        }
        let body: serde_json::Value = resp.json().map_err(|e| ProviderError::Response(e.to_string()))?;
        Self::parse_response(&self.attribute, &body)
    }
}

/// Time source for rate limiting and retry backoff.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock { origin: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Manually advanced clock; `sleep` moves time forward instantly.
#[derive(Default)]
pub struct FakeClock {
    now: Mutex<Duration>,
}

impl Clock for FakeClock {
    fn now(&self) -> Duration {
        *self.now.lock().unwrap()
    }

    fn sleep(&self, d: Duration) {
        *self.now.lock().unwrap() += d;
    }
}

/// Sliding one-second window limiter.
///
/// With a rate `r >= 1` at most `floor(r)` requests fall in any half-open
/// one-second window. Rates below one are enforced as a minimum spacing of
/// `1/r` seconds.
#[derive(Debug)]
pub struct RateLimiter {
    capacity: usize,
    window: Duration,
    recent: VecDeque<Duration>,
}

impl RateLimiter {
    pub fn new(max_per_second: f64) -> Self {
        if max_per_second >= 1.0 {
            RateLimiter {
                capacity: max_per_second.floor() as usize,
                window: Duration::from_secs(1),
                recent: VecDeque::new(),
            }
        } else {
            RateLimiter {
                capacity: 1,
                window: Duration::from_secs_f64(1.0 / max_per_second),
                recent: VecDeque::new(),
            }
        }
    }

    /// Blocks until a request may be issued and returns its issue time.
    pub fn acquire(&mut self, clock: &dyn Clock) -> Duration {
        loop {
            let now = clock.now();
            while let Some(&front) = self.recent.front() {
                if front + self.window <= now {
                    self.recent.pop_front();
                } else {
                    break;
                }
            }
            if self.recent.len() < self.capacity {
                self.recent.push_back(now);
                return now;
            }
            let wait = self.recent[0] + self.window - now;
            clock.sleep(wait);
        }
    }
}

/// Append-only `(digest, model_id, score)` store. The digest covers the
/// cleaned text and the model id, so identical reposts share one entry.
pub struct ScoreCache {
    path: PathBuf,
    entries: HashMap<String, f64>,
}

impl ScoreCache {
    pub fn key(text: &str, model_id: &str) -> String {
        sha256_hex_parts(&[text.as_bytes(), model_id.as_bytes()])
    }

    pub fn open(path: &Path) -> Result<Self, ToxicityError> {
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.is_empty() {
                    continue;
                }
                let bad = || ToxicityError::Cache {
                    path: path.to_path_buf(),
                    reason: format!("line {} malformed", i + 1),
                };
                let mut parts = line.split('\t');
                let (Some(digest), Some(_model), Some(score), None) =
                    (parts.next(), parts.next(), parts.next(), parts.next())
                else {
                    return Err(bad());
                };
                let score: f64 = score.parse().map_err(|_| bad())?;
                entries.insert(digest.to_string(), score);
            }
        }
        Ok(ScoreCache {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn get(&self, digest: &str) -> Option<f64> {
        self.entries.get(digest).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn append(&mut self, new: &[(String, f64)], model_id: &str) -> Result<(), ToxicityError> {
        if new.is_empty() {
            return Ok(());
        }
        if let Some(parent) = self.path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&self.path)?;
        let mut w = BufWriter::new(file);
        for (digest, score) in new {
            writeln!(w, "{digest}\t{model_id}\t{score}")?;
            self.entries.insert(digest.clone(), *score);
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFailure {
    pub post_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct ScoreRun {
    /// Sorted by post id.
    pub scores: Vec<ToxicityScore>,
    pub failures: Vec<ScoreFailure>,
    pub requests_issued: u64,
    pub cache_hits: u64,
}

/// Scores `posts` by their cleaned text.
///
/// Texts already in the cache are never sent; distinct uncached texts are
/// sent once each by up to `max_in_flight` workers that share one rate
/// limiter. A text that still fails after `max_retries` retries lands in the
/// failure report for every post carrying it.
pub fn score_posts(
    posts: &[Post],
    provider: &dyn ToxicityProvider,
    config: &ScorerConfig,
    clock: &dyn Clock,
) -> Result<ScoreRun, ToxicityError> {
    config.validate()?;
    let model_id = provider.model_id().to_string();
    let mut cache = ScoreCache::open(&config.cache_path)?;

    let keys: Vec<String> = posts
        .iter()
        .map(|p| ScoreCache::key(&p.clean_text, &model_id))
        .collect();
    let mut pending: Vec<(&str, &str)> = Vec::new();
    let mut queued = BTreeSet::new();
    for (post, key) in posts.iter().zip(&keys) {
        if cache.get(key).is_none() && queued.insert(key.as_str()) {
            pending.push((key.as_str(), post.clean_text.as_str()));
        }
    }

    let limiter = Mutex::new(RateLimiter::new(config.max_requests_per_second));
    let next = AtomicUsize::new(0);
    let issued = AtomicU64::new(0);
    let results: Mutex<HashMap<String, Result<f64, String>>> = Mutex::new(HashMap::new());
    let workers = config.max_in_flight.min(pending.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(key, text)) = pending.get(i) else {
                    break;
                };
                let mut attempt = 0u32;
                let outcome = loop {
                    if provider.rate_limited() {
                        limiter.lock().unwrap().acquire(clock);
                    }
                    issued.fetch_add(1, Ordering::SeqCst);
                    match provider.score_text(text) {
                        Ok(s) if (0.0..=1.0).contains(&s) => break Ok(s),
                        Ok(s) => break Err(format!("score {s} outside [0,1]")),
                        Err(e) if attempt < config.max_retries => {
                            log::debug!("retrying {key}: {e}");
                            clock.sleep(Duration::from_millis(100 << attempt.min(6)));
                            attempt += 1;
                        }
                        Err(e) => break Err(e.to_string()),
                    }
                };
                results.lock().unwrap().insert(key.to_string(), outcome);
            });
        }
    });
    let results = results.into_inner().unwrap();

    let mut fresh: Vec<(String, f64)> = results
        .iter()
        .filter_map(|(k, r)| r.as_ref().ok().map(|s| (k.clone(), *s)))
        .collect();
    fresh.sort_by(|a, b| a.0.cmp(&b.0));
    cache.append(&fresh, &model_id)?;

    let mut run = ScoreRun {
        requests_issued: issued.into_inner(),
        ..ScoreRun::default()
    };
    for (post, key) in posts.iter().zip(&keys) {
        if let Some(score) = cache.get(key) {
            if !queued.contains(key.as_str()) {
                run.cache_hits += 1;
            }
            run.scores.push(ToxicityScore {
                post_id: post.post_id.clone(),
                model_id: model_id.clone(),
                score,
            });
        } else {
            let error = match results.get(key) {
                Some(Err(e)) => e.clone(),
                _ => "not scored".to_string(),
            };
            run.failures.push(ScoreFailure {
                post_id: post.post_id.clone(),
                error,
            });
        }
    }
    run.scores.sort_by(|a, b| a.post_id.cmp(&b.post_id));
    run.failures.sort_by(|a, b| a.post_id.cmp(&b.post_id));
    Ok(run)
}

/// Post ids scoring at or above `threshold`.
pub fn filter_toxic<'a, I>(scores: I, threshold: f64) -> BTreeSet<String>
where
    I: IntoIterator<Item = &'a ToxicityScore>,
{
    scores
        .into_iter()
        .filter(|s| s.score >= threshold)
        .map(|s| s.post_id.clone())
        .collect()
}

pub fn write_scores<W: Write>(out: W, scores: &[ToxicityScore]) -> Result<(), ToxicityError> {
    let mut w = csv::Writer::from_writer(out);
    for s in scores {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<ToxicityScore>, ToxicityError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}
