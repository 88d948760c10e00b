//! Annotation labels, inter-annotator agreement, adjudication and the
//! annotation HTTP service.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::calibrate::{self, Metrics, PairLabel};
use crate::Category;

#[derive(Debug, thiserror::Error)]
pub enum AgreementError {
    #[error("annotators labeled different item sets ({only_a} only in A, {only_b} only in B)")]
    MismatchedItems { only_a: usize, only_b: usize },
    #[error("no items")]
    Empty,
    #[error("expected agreement is 1 but observed agreement is not")]
    DegenerateMarginals,
    #[error("unresolved disagreements: {0:?}")]
    Unresolved(Vec<String>),
    #[error("resolutions for items without disagreement: {0:?}")]
    ExtraResolutions(Vec<String>),
    #[error("{annotator_id} already labeled {item_id}")]
    Conflict { item_id: String, annotator_id: String },
    #[error("invalid label record: {0}")]
    Invalid(String),
    #[error("label log line {line}: {reason}")]
    Log { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ItemKind {
    Phrase,
    ImagePair,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub item_id: String,
    pub item_kind: ItemKind,
    pub annotator_id: String,
    pub label: Category,
    pub timestamp: i64,
}

/// Percent agreement, kappa and the confusion table over `labels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport<L> {
    pub n_items: u64,
    pub percent_agreement: f64,
    pub kappa: f64,
    pub labels: Vec<L>,
    /// `confusion[i][j]`: items A labeled `labels[i]` and B labeled `labels[j]`.
    pub confusion: Vec<Vec<u64>>,
}

/// Kappa from a square contingency table, in exact integer arithmetic:
/// `(n*trace - sum r_i c_i) / (n^2 - sum r_i c_i)`.
pub fn kappa_from_table(table: &[Vec<u64>]) -> Result<f64, AgreementError> {
    let k = table.len();
    let n: u128 = table.iter().flatten().map(|&x| u128::from(x)).sum();
    if n == 0 {
        return Err(AgreementError::Empty);
    }
    let trace: u128 = (0..k).map(|i| u128::from(table[i][i])).sum();
    let chance: u128 = (0..k)
        .map(|i| {
            let r: u128 = table[i].iter().map(|&x| u128::from(x)).sum();
            let c: u128 = table.iter().map(|row| u128::from(row[i])).sum();
            r * c
        })
        .sum();
    let den = n * n - chance;
    if den == 0 {
        return if trace == n { Ok(1.0) } else { Err(AgreementError::DegenerateMarginals) };
    }
    let num = (n * trace) as i128 - chance as i128;
    Ok(num as f64 / den as f64)
}

/// Cohen's kappa for two annotators over the same items.
pub fn cohen_kappa<L: Ord + Clone>(a: &BTreeMap<String, L>, b: &BTreeMap<String, L>) -> Result<AgreementReport<L>, AgreementError> {
    let only_a = a.keys().filter(|k| !b.contains_key(*k)).count();
    let only_b = b.keys().filter(|k| !a.contains_key(*k)).count();
    if only_a + only_b > 0 {
        return Err(AgreementError::MismatchedItems { only_a, only_b });
    }
    if a.is_empty() {
        return Err(AgreementError::Empty);
    }
    let labels: Vec<L> = a.values().chain(b.values()).cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let index = |l: &L| labels.binary_search(l).expect("label collected above");
    let mut confusion = vec![vec![0u64; labels.len()]; labels.len()];
    for (item, la) in a {
        confusion[index(la)][index(&b[item])] += 1;
    }
    let n = a.len() as u64;
    let trace: u64 = (0..labels.len()).map(|i| confusion[i][i]).sum();
    Ok(AgreementReport {
        n_items: n,
        percent_agreement: trace as f64 / n as f64,
        kappa: kappa_from_table(&confusion)?,
        labels,
        confusion,
    })
}

/// Agreed labels plus one explicit resolution per disagreement.
pub fn adjudicate<L: Clone + PartialEq>(
    a: &BTreeMap<String, L>,
    b: &BTreeMap<String, L>,
    resolutions: &BTreeMap<String, L>,
) -> Result<BTreeMap<String, L>, AgreementError> {
    let only_a = a.keys().filter(|k| !b.contains_key(*k)).count();
    let only_b = b.keys().filter(|k| !a.contains_key(*k)).count();
    if only_a + only_b > 0 {
        return Err(AgreementError::MismatchedItems { only_a, only_b });
    }
    let mut out = BTreeMap::new();
    let mut missing = Vec::new();
    let mut used = BTreeSet::new();
    for (item, la) in a {
        if *la == b[item] {
            out.insert(item.clone(), la.clone());
        } else if let Some(r) = resolutions.get(item) {
            used.insert(item);
            out.insert(item.clone(), r.clone());
        } else {
            missing.push(item.clone());
        }
    }
    if !missing.is_empty() {
        return Err(AgreementError::Unresolved(missing));
    }
    let extra: Vec<String> = resolutions.keys().filter(|k| !used.contains(k)).cloned().collect();
    if !extra.is_empty() {
        return Err(AgreementError::ExtraResolutions(extra));
    }
    Ok(out)
}

/// One action in the append-only label log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum LogEntry {
    Label(LabelRecord),
    Retract { item_id: String, annotator_id: String, timestamp: i64 },
    Resolve { item_id: String, item_kind: ItemKind, label: Category, timestamp: i64 },
}

/// Current state derived from a log.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelState {
    pub labels: BTreeMap<(String, String), LabelRecord>,
    pub resolutions: BTreeMap<String, (ItemKind, Category)>,
}

impl LabelState {
    pub fn apply(&mut self, entry: &LogEntry) -> Result<(), AgreementError> {
        match entry {
            LogEntry::Label(r) => {
                validate(r)?;
                let key = (r.item_id.clone(), r.annotator_id.clone());
                if self.labels.contains_key(&key) {
                    return Err(AgreementError::Conflict { item_id: r.item_id.clone(), annotator_id: r.annotator_id.clone() });
                }
                self.labels.insert(key, r.clone());
            }
            LogEntry::Retract { item_id, annotator_id, .. } => {
                self.labels.remove(&(item_id.clone(), annotator_id.clone()));
            }
            LogEntry::Resolve { item_id, item_kind, label, .. } => {
                if !label.is_target() && *label != Category::Irrelevant {
                    return Err(AgreementError::Invalid(format!("resolution label {label}")));
                }
                self.resolutions.insert(item_id.clone(), (*item_kind, *label));
            }
        }
        Ok(())
    }

    pub fn annotators(&self) -> BTreeSet<&str> {
        self.labels.keys().map(|(_, a)| a.as_str()).collect()
    }

    /// Labels by one annotator for items of `kind`.
    pub fn labels_of(&self, annotator: &str, kind: ItemKind) -> BTreeMap<String, Category> {
        self.labels
            .values()
            .filter(|r| r.annotator_id == annotator && r.item_kind == kind)
            .map(|r| (r.item_id.clone(), r.label))
            .collect()
    }

    pub fn resolutions_of(&self, kind: ItemKind) -> BTreeMap<String, Category> {
        self.resolutions
            .iter()
            .filter(|(_, (k, _))| *k == kind)
            .map(|(id, (_, l))| (id.clone(), *l))
            .collect()
    }

    /// Items both annotators labeled, restricted to those shared items.
    pub fn common(&self, a: &str, b: &str, kind: ItemKind) -> (BTreeMap<String, Category>, BTreeMap<String, Category>) {
        let mut la = self.labels_of(a, kind);
        let mut lb = self.labels_of(b, kind);
        la.retain(|k, _| lb.contains_key(k));
        lb.retain(|k, _| la.contains_key(k));
        (la, lb)
    }
}

fn validate(r: &LabelRecord) -> Result<(), AgreementError> {
    if r.annotator_id.trim().is_empty() {
        return Err(AgreementError::Invalid("empty annotator_id".into()));
    }
    if r.item_id.is_empty() {
        return Err(AgreementError::Invalid("empty item_id".into()));
    }
    if r.label == Category::Unlabeled {
        return Err(AgreementError::Invalid("label must be antisemitic, islamophobic or irrelevant".into()));
    }
    Ok(())
}

/// Replays newline-delimited log entries.
pub fn replay<R: BufRead>(input: R) -> Result<LabelState, AgreementError> {
    let mut state = LabelState::default();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: LogEntry = serde_json::from_str(&line).map_err(|e| AgreementError::Log { line: i + 1, reason: e.to_string() })?;
        state.apply(&entry).map_err(|e| AgreementError::Log { line: i + 1, reason: e.to_string() })?;
    }
    Ok(state)
}

/// Durable label log: every accepted action is appended before the state
/// changes.
pub struct LabelStore {
    path: PathBuf,
    writer: BufWriter<File>,
    state: LabelState,
}

impl LabelStore {
    pub fn open(path: &Path) -> Result<Self, AgreementError> {
        let state = if path.exists() { replay(BufReader::new(File::open(path)?))? } else { LabelState::default() };
        let writer = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
        Ok(LabelStore { path: path.to_path_buf(), writer, state })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn state(&self) -> &LabelState {
        &self.state
    }

    pub fn append(&mut self, entry: LogEntry) -> Result<(), AgreementError> {
        let mut next = self.state.clone();
        next.apply(&entry)?;
        serde_json::to_writer(&mut self.writer, &entry).map_err(io::Error::from)?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        self.state = next;
        Ok(())
    }
}

/// An item shown to annotators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub item_id: String,
    pub kind: ItemKind,
    /// Phrase text, or the candidate phrase for an image pair.
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phrase_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cosine: Option<f64>,
    /// Phrase mentions keywords of both target groups.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub multi_target: bool,
}

/// Id used for the (phrase, image) pair items.
pub fn pair_item_id(phrase_id: &str, image_id: &str) -> String {
    format!("{phrase_id}::{image_id}")
}

/// Pair-level relevance from final (agreed or resolved) image-pair labels.
pub fn final_pair_labels(items: &[QueueItem], finals: &BTreeMap<String, Category>) -> Vec<PairLabel> {
    items
        .iter()
        .filter(|i| i.kind == ItemKind::ImagePair)
        .filter_map(|i| {
            let label = finals.get(&i.item_id)?;
            Some(PairLabel {
                phrase_id: i.phrase_id.clone()?,
                image_id: i.image_id.clone()?,
                relevant: label.is_target(),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// The two annotators whose labels are compared; the first two seen
    /// (by id order) when unset.
    pub annotators: Option<(String, String)>,
    /// Sweep recomputed every this many submissions.
    pub sweep_every: usize,
    pub thresholds: Vec<f64>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig { annotators: None, sweep_every: 10, thresholds: calibrate::default_grid() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepPoint {
    pub threshold: f64,
    pub mean: Metrics,
    pub std: Metrics,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct SweepSnapshot {
    pub computed_at_submission: usize,
    pub labeled_pairs: usize,
    pub points: Vec<SweepPoint>,
    pub selected_threshold: Option<f64>,
}

pub struct Service {
    store: Mutex<LabelStore>,
    state: RwLock<LabelState>,
    items: Vec<QueueItem>,
    by_id: HashMap<String, usize>,
    config: ServiceConfig,
    submissions: Mutex<usize>,
    sweep: RwLock<SweepSnapshot>,
}

impl Service {
    pub fn new(store: LabelStore, items: Vec<QueueItem>, config: ServiceConfig) -> Arc<Self> {
        let by_id = items.iter().enumerate().map(|(i, it)| (it.item_id.clone(), i)).collect();
        let state = store.state().clone();
        let svc = Service {
            store: Mutex::new(store),
            state: RwLock::new(state),
            items,
            by_id,
            config,
            submissions: Mutex::new(0),
            sweep: RwLock::new(SweepSnapshot::default()),
        };
        let snap = svc.compute_sweep(0);
        *svc.sweep.write().unwrap() = snap;
        Arc::new(svc)
    }

    fn pair(&self, state: &LabelState) -> Option<(String, String)> {
        if let Some(p) = &self.config.annotators {
            return Some(p.clone());
        }
        let mut it = state.annotators().into_iter();
        Some((it.next()?.to_string(), it.next()?.to_string()))
    }

    /// Next item `annotator` has not labeled, in queue order.
    pub fn next_for(&self, annotator: &str) -> (Option<QueueItem>, usize) {
        let state = self.state.read().unwrap();
        let pending: Vec<&QueueItem> = self
            .items
            .iter()
            .filter(|i| !state.labels.contains_key(&(i.item_id.clone(), annotator.to_string())))
            .collect();
        (pending.first().map(|i| (*i).clone()), pending.len())
    }

    pub fn submit(&self, req: SubmitLabel) -> Result<LabelRecord, AgreementError> {
        let idx = *self.by_id.get(&req.item_id).ok_or_else(|| AgreementError::Invalid(format!("unknown item {}", req.item_id)))?;
        let record = LabelRecord {
            item_kind: self.items[idx].kind,
            item_id: req.item_id,
            annotator_id: req.annotator_id,
            label: req.label,
            timestamp: req.timestamp.unwrap_or_else(|| chrono::Utc::now().timestamp_millis()),
        };
        validate(&record)?;
        {
            let mut store = self.store.lock().unwrap();
            store.append(LogEntry::Label(record.clone()))?;
            *self.state.write().unwrap() = store.state().clone();
        }
        let mut n = self.submissions.lock().unwrap();
        *n += 1;
        if n.is_multiple_of(self.config.sweep_every.max(1)) {
            let snap = self.compute_sweep(*n);
            *self.sweep.write().unwrap() = snap;
        }
        Ok(record)
    }

    pub fn resolve(&self, req: SubmitResolution) -> Result<(), AgreementError> {
        let idx = *self.by_id.get(&req.item_id).ok_or_else(|| AgreementError::Invalid(format!("unknown item {}", req.item_id)))?;
        let mut store = self.store.lock().unwrap();
        store.append(LogEntry::Resolve {
            item_id: req.item_id,
            item_kind: self.items[idx].kind,
            label: req.label,
            timestamp: req.timestamp.unwrap_or_else(|| chrono::Utc::now().timestamp_millis()),
        })?;
        *self.state.write().unwrap() = store.state().clone();
        Ok(())
    }

    pub fn agreement(&self, kind: ItemKind) -> AgreementStatus {
        let state = self.state.read().unwrap();
        let Some((a, b)) = self.pair(&state) else {
            return AgreementStatus::Awaiting { status: "awaiting second annotator".into() };
        };
        let (la, lb) = state.common(&a, &b, kind);
        match cohen_kappa(&la, &lb) {
            Ok(report) => AgreementStatus::Report { annotators: [a, b], report },
            Err(AgreementError::Empty) => AgreementStatus::Awaiting { status: "no commonly labeled items".into() },
            Err(e) => AgreementStatus::Awaiting { status: e.to_string() },
        }
    }

    /// Current final labels for `kind`: agreed labels plus resolutions.
    pub fn final_labels(&self, kind: ItemKind) -> BTreeMap<String, Category> {
        let state = self.state.read().unwrap();
        final_labels(&state, self.pair(&state), kind)
    }

    fn compute_sweep(&self, at: usize) -> SweepSnapshot {
        let finals = self.final_labels(ItemKind::ImagePair);
        let labels = final_pair_labels(&self.items, &finals);
        let cosines: HashMap<(String, String), f64> = self
            .items
            .iter()
            .filter_map(|i| Some(((i.phrase_id.clone()?, i.image_id.clone()?), i.cosine?)))
            .collect();
        let sweep = calibrate::sweep(&labels, &cosines, &self.config.thresholds).unwrap_or_default();
        SweepSnapshot {
            computed_at_submission: at,
            labeled_pairs: labels.len(),
            selected_threshold: if labels.is_empty() { None } else { calibrate::select_threshold(&sweep).ok() },
            points: sweep.into_iter().map(|t| SweepPoint { threshold: t.threshold, mean: t.mean, std: t.std }).collect(),
        }
    }

    pub fn sweep(&self) -> SweepSnapshot {
        self.sweep.read().unwrap().clone()
    }

    pub fn item(&self, id: &str) -> Option<&QueueItem> {
        self.by_id.get(id).map(|&i| &self.items[i])
    }
}

/// Agreed labels of the two annotators on shared items, overridden by any
/// resolution; disagreements without one are left out.
pub fn final_labels(state: &LabelState, pair: Option<(String, String)>, kind: ItemKind) -> BTreeMap<String, Category> {
    let mut out = BTreeMap::new();
    if let Some((a, b)) = pair {
        let (la, lb) = state.common(&a, &b, kind);
        for (item, l) in la {
            if lb[&item] == l {
                out.insert(item, l);
            }
        }
    }
    out.extend(state.resolutions_of(kind));
    out
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum AgreementStatus {
    Report { annotators: [String; 2], report: AgreementReport<Category> },
    Awaiting { status: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmitLabel {
    pub item_id: String,
    pub annotator_id: String,
    pub label: Category,
    #[serde(default)]
    pub timestamp: Option<i64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmitResolution {
    pub item_id: String,
    pub label: Category,
    #[serde(default)]
    pub timestamp: Option<i64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NextResponse {
    pub done: bool,
    pub remaining: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item: Option<QueueItem>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemResponse {
    #[serde(flatten)]
    pub item: QueueItem,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_base64: Option<String>,
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: Option<String>,
}

#[derive(Deserialize)]
struct KindQuery {
    kind: Option<ItemKind>,
}

fn error(status: StatusCode, msg: impl ToString) -> Response {
    (status, Json(serde_json::json!({ "error": msg.to_string() }))).into_response()
}

fn agreement_error(e: AgreementError) -> Response {
    match e {
        AgreementError::Conflict { .. } => error(StatusCode::CONFLICT, e),
        AgreementError::Invalid(_) => error(StatusCode::BAD_REQUEST, e),
        other => error(StatusCode::INTERNAL_SERVER_ERROR, other),
    }
}

async fn next_handler(State(svc): State<Arc<Service>>, Query(q): Query<NextQuery>) -> Response {
    let Some(annotator) = q.annotator.filter(|a| !a.trim().is_empty()) else {
        return error(StatusCode::BAD_REQUEST, "annotator is required");
    };
    let (item, remaining) = svc.next_for(&annotator);
    Json(NextResponse { done: item.is_none(), remaining, item }).into_response()
}

async fn labels_handler(State(svc): State<Arc<Service>>, Json(req): Json<SubmitLabel>) -> Response {
    let svc2 = svc.clone();
    match tokio::task::spawn_blocking(move || svc2.submit(req)).await {
        Ok(Ok(rec)) => (StatusCode::CREATED, Json(rec)).into_response(),
        Ok(Err(e)) => agreement_error(e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn resolutions_handler(State(svc): State<Arc<Service>>, Json(req): Json<SubmitResolution>) -> Response {
    let svc2 = svc.clone();
    match tokio::task::spawn_blocking(move || svc2.resolve(req)).await {
        Ok(Ok(())) => StatusCode::CREATED.into_response(),
        Ok(Err(e)) => agreement_error(e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn agreement_handler(State(svc): State<Arc<Service>>, Query(q): Query<KindQuery>) -> Response {
    Json(svc.agreement(q.kind.unwrap_or(ItemKind::Phrase))).into_response()
}

async fn sweep_handler(State(svc): State<Arc<Service>>) -> Response {
    Json(svc.sweep()).into_response()
}

async fn item_handler(State(svc): State<Arc<Service>>, UrlPath(id): UrlPath<String>) -> Response {
    let Some(item) = svc.item(&id).cloned() else {
        return error(StatusCode::NOT_FOUND, format!("unknown item {id}"));
    };
    let image_base64 = match &item.image_path {
        Some(p) => match tokio::fs::read(p).await {
            Ok(bytes) => Some(base64::engine::general_purpose::STANDARD.encode(bytes)),
            Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, format!("{}: {e}", p.display())),
        },
        None => None,
    };
    Json(ItemResponse { item, image_base64 }).into_response()
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/api/queue/next", get(next_handler))
        .route("/api/labels", post(labels_handler))
        .route("/api/resolutions", post(resolutions_handler))
        .route("/api/agreement", get(agreement_handler))
        .route("/api/sweep", get(sweep_handler))
        .route("/api/item/{id}", get(item_handler))
        .with_state(svc)
}

/// Serves the annotation API on `listener` until the future is dropped.
pub async fn serve(listener: tokio::net::TcpListener, svc: Arc<Service>) -> io::Result<()> {
    axum::serve(listener, router(svc)).await
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(v: &[u8]) -> BTreeMap<String, u8> {
        v.iter().enumerate().map(|(i, &l)| (format!("i{i:03}"), l)).collect()
    }

    fn from_table(t: &[[usize; 2]; 2]) -> (BTreeMap<String, u8>, BTreeMap<String, u8>) {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (i, row) in t.iter().enumerate() {
            for (j, &n) in row.iter().enumerate() {
                for _ in 0..n {
                    a.push(i as u8);
                    b.push(j as u8);
                }
            }
        }
        (labels(&a), labels(&b))
    }

    #[test]
    fn worked_example_is_exact() {
        let (a, b) = from_table(&[[20, 5], [10, 65]]);
        let r = cohen_kappa(&a, &b).unwrap();
        assert_eq!(r.n_items, 100);
        assert_eq!(r.percent_agreement, 0.85);
        assert_eq!(r.kappa, 0.625);
        assert_eq!(r.confusion, vec![vec![20, 5], vec![10, 65]]);
    }

    #[test]
    fn perfect_and_degenerate() {
        let a = labels(&[0, 1, 2, 1]);
        let r = cohen_kappa(&a, &a).unwrap();
        assert_eq!((r.kappa, r.percent_agreement), (1.0, 1.0));
        let same = labels(&[1, 1, 1]);
        assert_eq!(cohen_kappa(&same, &same).unwrap().kappa, 1.0);
        assert!(matches!(cohen_kappa(&labels(&[1]), &labels(&[1, 2])), Err(AgreementError::MismatchedItems { .. })));
        assert!(matches!(cohen_kappa::<u8>(&BTreeMap::new(), &BTreeMap::new()), Err(AgreementError::Empty)));
        assert_eq!(kappa_from_table(&[vec![0, 3], vec![0, 0]]).unwrap(), 0.0);
    }

    #[test]
    fn one_sided_annotator_matches_definition() {
        let a = labels(&[2; 10]);
        let b = labels(&[0, 0, 0, 0, 0, 2, 2, 2, 2, 2]);
        let r = cohen_kappa(&a, &b).unwrap();
        let p_o = 0.5;
        let p_e = 1.0 * 0.5;
        assert!((r.kappa - (p_o - p_e) / (1.0 - p_e)).abs() < 1e-12);
        assert_eq!(r.kappa, 0.0);
    }

    #[test]
    fn nine_of_ten() {
        let a = labels(&[0, 1, 0, 1, 0, 1, 0, 1, 0, 1]);
        let b = labels(&[0, 1, 0, 1, 0, 1, 0, 1, 0, 0]);
        assert_eq!(cohen_kappa(&a, &b).unwrap().percent_agreement, 0.9);
    }

    #[test]
    fn adjudication_rules() {
        let a = labels(&[0, 1, 1]);
        assert_eq!(adjudicate(&a, &a, &BTreeMap::new()).unwrap(), a);
        let b = labels(&[0, 0, 1]);
        let res = BTreeMap::from([("i001".to_string(), 2u8)]);
        let fin = adjudicate(&a, &b, &res).unwrap();
        assert_eq!(fin["i001"], 2);
        let c = labels(&[1, 0, 1]);
        match adjudicate(&a, &c, &res) {
            Err(AgreementError::Unresolved(ids)) => assert_eq!(ids, ["i000"]),
            other => panic!("{other:?}"),
        }
        let extra = BTreeMap::from([("i002".to_string(), 2u8), ("i001".to_string(), 2u8)]);
        assert!(matches!(adjudicate(&a, &b, &extra), Err(AgreementError::ExtraResolutions(_))));
    }

    fn rec(item: &str, who: &str, label: Category) -> LabelRecord {
        LabelRecord { item_id: item.into(), item_kind: ItemKind::Phrase, annotator_id: who.into(), label, timestamp: 0 }
    }

    #[test]
    fn log_replay_and_conflicts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.ndjson");
        let mut store = LabelStore::open(&path).unwrap();
        store.append(LogEntry::Label(rec("p1", "a", Category::Antisemitic))).unwrap();
        store.append(LogEntry::Label(rec("p2", "a", Category::Irrelevant))).unwrap();
        assert!(matches!(
            store.append(LogEntry::Label(rec("p1", "a", Category::Irrelevant))),
            Err(AgreementError::Conflict { .. })
        ));
        store.append(LogEntry::Retract { item_id: "p2".into(), annotator_id: "a".into(), timestamp: 1 }).unwrap();
        store.append(LogEntry::Label(rec("p2", "a", Category::Islamophobic))).unwrap();
        assert!(store.append(LogEntry::Label(rec("p3", " ", Category::Islamophobic))).is_err());
        assert!(store.append(LogEntry::Label(rec("p3", "a", Category::Unlabeled))).is_err());
        let live = store.state().clone();
        drop(store);
        let reopened = LabelStore::open(&path).unwrap();
        assert_eq!(reopened.state(), &live);
        assert_eq!(live.labels_of("a", ItemKind::Phrase)["p2"], Category::Islamophobic);
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 4);
    }

    proptest! {
        #[test]
        fn kappa_relabel_invariant(v in prop::collection::vec((0u8..3, 0u8..3), 1..80), perm in Just([2u8, 0, 1])) {
            let a = labels(&v.iter().map(|p| p.0).collect::<Vec<_>>());
            let b = labels(&v.iter().map(|p| p.1).collect::<Vec<_>>());
            let pa: BTreeMap<_, _> = a.iter().map(|(k, l)| (k.clone(), perm[*l as usize])).collect();
            let pb: BTreeMap<_, _> = b.iter().map(|(k, l)| (k.clone(), perm[*l as usize])).collect();
            match (cohen_kappa(&a, &b), cohen_kappa(&pa, &pb)) {
                (Ok(x), Ok(y)) => {
                    prop_assert_eq!(x.kappa, y.kappa);
                    prop_assert!(x.kappa <= 1.0);
                    prop_assert_eq!(x.n_items, x.confusion.iter().flatten().sum::<u64>());
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "relabeling changed definedness"),
            }
        }
    }

    #[test]
    fn uniform_marginals_kappa() {
        // 3 labels, uniform marginals: p_e = 1/3
        let t = vec![vec![2, 1, 0], vec![0, 2, 1], vec![1, 0, 2]];
        let k = kappa_from_table(&t).unwrap();
        let p_o = 6.0 / 9.0;
        assert!((k - (p_o - 1.0 / 3.0) / (2.0 / 3.0)).abs() < 1e-12);
    }
}
