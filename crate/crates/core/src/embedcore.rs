//! Embedding providers, the unit-vector store and exact all-pairs scoring.
//!
//! Vectors are normalized on the client, so cosine similarity is a plain dot
//! product. Dot products multiply `f32` components in `f64` and accumulate
//! sequentially in index order; a pair is a hit iff that sum is `>=` the
//! threshold. The kernel is identical however the store is split into
//! blocks, so hit membership never depends on chunking or thread count.
//!
//! # Store file layout (little-endian)
//!
//! ```text
//! magic    4 bytes  "MMV1"
//! dim      u32
//! count    u64
//! model    u32 length + UTF-8 bytes
//! ids      count x (u32 length + UTF-8 bytes)
//! rows     count x dim x f32, row-major
//! ```

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::ImageRecord;
use crate::digest::sha256_u64;
use crate::phrasemine::Phrase;

pub const MAGIC: &[u8; 4] = b"MMV1";
pub const DEFAULT_SIMILARITY_THRESHOLD: f64 = 0.3;
pub const NORM_TOLERANCE: f64 = 1e-6;

/// Image rows scored per parallel task.
const ROW_BLOCK: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("model mismatch: {0:?} vs {1:?}")]
    ModelMismatch(String, String),
    #[error("vector for {id} has norm {norm}, expected 1")]
    NotUnit { id: String, norm: f64 },
    #[error("vector for {0} is zero or not finite")]
    Degenerate(String),
    #[error("nothing to encode")]
    Empty,
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("provider: {0}")]
    Provider(String),
    #[error("bad vector store: {0}")]
    Format(String),
    #[error("fixture has no vector for {0}")]
    MissingFixture(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub item_id: String,
    pub modality: Modality,
    pub model_id: String,
    pub components: Vec<f32>,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.components.len()
    }
}

/// Scales `v` to unit Euclidean norm (computed in f64).
pub fn normalize(id: &str, v: &[f32]) -> Result<Vec<f32>, EmbedError> {
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(EmbedError::Degenerate(id.to_string()));
    }
    Ok(v.iter().map(|&x| (f64::from(x) / norm) as f32).collect())
}

fn norm_f64(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Sequential f64 dot product; the single kernel used for every comparison.
#[inline]
pub fn dot(u: &[f32], v: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (a, b) in u.iter().zip(v) {
        acc += f64::from(*a) * f64::from(*b);
    }
    acc
}

/// Cosine of two unit vectors.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64, EmbedError> {
    if u.len() != v.len() {
        return Err(EmbedError::DimMismatch(u.len(), v.len()));
    }
    Ok(dot(u, v))
}

/// Immutable set of unit vectors sharing one model and dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    model_id: String,
    dim: usize,
    ids: Vec<String>,
    rows: Vec<f32>,
}

impl VectorStore {
    pub fn empty(model_id: &str, dim: usize) -> Self {
        VectorStore {
            model_id: model_id.to_string(),
            dim,
            ids: Vec::new(),
            rows: Vec::new(),
        }
    }

    /// Builds a store from already-normalized rows, checking every invariant.
    pub fn from_rows(model_id: &str, dim: usize, entries: Vec<(String, Vec<f32>)>) -> Result<Self, EmbedError> {
        let mut store = Self::empty(model_id, dim);
        let mut seen = BTreeSet::new();
        for (id, row) in entries {
            if row.len() != dim {
                return Err(EmbedError::DimMismatch(dim, row.len()));
            }
            if !seen.insert(id.clone()) {
                return Err(EmbedError::DuplicateId(id));
            }
            store.ids.push(id);
            store.rows.extend_from_slice(&row);
        }
        store.validate()?;
        Ok(store)
    }

    pub fn from_vectors(vectors: Vec<EmbeddingVector>) -> Result<Self, EmbedError> {
        let Some(first) = vectors.first() else {
            return Err(EmbedError::Empty);
        };
        let (model, dim) = (first.model_id.clone(), first.dim());
        let mut entries = Vec::with_capacity(vectors.len());
        for v in vectors {
            if v.model_id != model {
                return Err(EmbedError::ModelMismatch(model, v.model_id));
            }
            entries.push((v.item_id, v.components));
        }
        Self::from_rows(&model, dim, entries)
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.rows.len() != self.ids.len() * self.dim {
            return Err(EmbedError::Format("row block size does not match count".into()));
        }
        for (id, row) in self.iter() {
            let norm = norm_f64(row);
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(EmbedError::NotUnit { id: id.to_string(), norm });
            }
        }
        Ok(())
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.ids.iter().position(|x| x == id).map(|i| self.row(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids.iter().map(String::as_str).zip(self.rows.chunks_exact(self.dim.max(1)))
    }

    /// Rows reordered by ascending id.
    pub fn sorted(&self) -> Self {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.ids[a].cmp(&self.ids[b]));
        let mut out = Self::empty(&self.model_id, self.dim);
        for i in order {
            out.ids.push(self.ids[i].clone());
            out.rows.extend_from_slice(self.row(i));
        }
        out
    }

    pub fn write_to<W: Write>(&self, out: W) -> io::Result<()> {
        let mut w = BufWriter::new(out);
        w.write_all(MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        write_str(&mut w, &self.model_id)?;
        for id in &self.ids {
            write_str(&mut w, id)?;
        }
        for x in &self.rows {
            w.write_all(&x.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self, EmbedError> {
        let mut r = BufReader::new(input);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(EmbedError::Format("bad magic".into()));
        }
        let dim = read_u32(&mut r)? as usize;
        let count = read_u64(&mut r)? as usize;
        let model_id = read_str(&mut r)?;
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            ids.push(read_str(&mut r)?);
        }
        let mut rows = vec![0f32; count * dim];
        let mut buf = [0u8; 4];
        for x in rows.iter_mut() {
            r.read_exact(&mut buf)?;
            *x = f32::from_le_bytes(buf);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(EmbedError::Format("trailing bytes".into()));
        }
        let store = VectorStore { model_id, dim, ids, rows };
        store.validate()?;
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        let tmp = path.with_extension("tmp");
        self.write_to(File::create(&tmp)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        Self::read_from(File::open(path)?)
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String, EmbedError> {
    let len = read_u32(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| EmbedError::Format("id is not UTF-8".into()))
}

/// Text form used for fixtures: one `{"item_id": .., "vector": [..]}` per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureLine {
    pub item_id: String,
    pub vector: Vec<f32>,
}

pub fn read_fixture_vectors(path: &Path) -> Result<HashMap<String, Vec<f32>>, EmbedError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FixtureLine = serde_json::from_str(&line)
            .map_err(|e| EmbedError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if out.insert(rec.item_id.clone(), rec.vector).is_some() {
            return Err(EmbedError::DuplicateId(rec.item_id));
        }
    }
    Ok(out)
}

pub fn write_fixture_vectors<W: Write>(mut out: W, store: &VectorStore) -> io::Result<()> {
    for (id, row) in store.iter() {
        serde_json::to_writer(&mut out, &FixtureLine { item_id: id.to_string(), vector: row.to_vec() })?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// One text to embed.
#[derive(Debug, Clone)]
pub struct TextItem<'a> {
    pub id: &'a str,
    pub text: &'a str,
}

/// One encoded image to embed.
#[derive(Debug, Clone)]
pub struct ImageItem<'a> {
    pub id: &'a str,
    pub bytes: &'a [u8],
}

/// Source of raw (not necessarily normalized) embeddings.
pub trait EmbeddingProvider: Send + Sync {
    fn model_id(&self) -> &str;
    fn embed_texts(&self, items: &[TextItem<'_>]) -> Result<Vec<Vec<f32>>, EmbedError>;
    /// One result per input, in order; failures are per item.
    fn embed_images(&self, items: &[ImageItem<'_>]) -> Result<Vec<Result<Vec<f32>, String>>, EmbedError>;
}

/// Looks vectors up by item id in fixture files.
pub struct FixtureProvider {
    model_id: String,
    texts: HashMap<String, Vec<f32>>,
    images: HashMap<String, Vec<f32>>,
}

impl FixtureProvider {
    pub fn new(model_id: &str, texts: HashMap<String, Vec<f32>>, images: HashMap<String, Vec<f32>>) -> Self {
        FixtureProvider {
            model_id: model_id.to_string(),
            texts,
            images,
        }
    }

    pub fn from_files(model_id: &str, texts: &Path, images: &Path) -> Result<Self, EmbedError> {
        Ok(Self::new(model_id, read_fixture_vectors(texts)?, read_fixture_vectors(images)?))
    }
}

impl EmbeddingProvider for FixtureProvider {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_texts(&self, items: &[TextItem<'_>]) -> Result<Vec<Vec<f32>>, EmbedError> {
        items
            .iter()
            .map(|it| self.texts.get(it.id).cloned().ok_or_else(|| EmbedError::MissingFixture(it.id.to_string())))
            .collect()
    }

    fn embed_images(&self, items: &[ImageItem<'_>]) -> Result<Vec<Result<Vec<f32>, String>>, EmbedError> {
        Ok(items
            .iter()
            .map(|it| self.images.get(it.id).cloned().ok_or_else(|| format!("no fixture vector for {}", it.id)))
            .collect())
    }
}

/// Deterministic pseudo-embeddings: a Gaussian vector seeded from a digest of
/// the model id, modality and item content. Needs no model and is stable
/// across runs and platforms.
pub struct ProceduralProvider {
    model_id: String,
    dim: usize,
}

impl ProceduralProvider {
    pub fn new(model_id: &str, dim: usize) -> Self {
        ProceduralProvider {
            model_id: model_id.to_string(),
            dim,
        }
    }

    fn vector(&self, modality: &str, content: &[u8]) -> Vec<f32> {
        let mut material = Vec::with_capacity(content.len() + 32);
        material.extend_from_slice(self.model_id.as_bytes());
        material.push(0);
        material.extend_from_slice(modality.as_bytes());
        material.push(0);
        material.extend_from_slice(content);
        let mut rng = ChaCha8Rng::seed_from_u64(sha256_u64(&material));
        (0..self.dim)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x as f32
            })
            .collect()
    }
}

impl EmbeddingProvider for ProceduralProvider {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_texts(&self, items: &[TextItem<'_>]) -> Result<Vec<Vec<f32>>, EmbedError> {
        Ok(items.iter().map(|it| self.vector("text", it.text.as_bytes())).collect())
    }

    fn embed_images(&self, items: &[ImageItem<'_>]) -> Result<Vec<Result<Vec<f32>, String>>, EmbedError> {
        Ok(items.iter().map(|it| Ok(self.vector("image", it.bytes))).collect())
    }
}

#[derive(Debug, Serialize)]
struct TextRequest<'a> {
    texts: Vec<&'a str>,
}

#[derive(Debug, Serialize)]
struct ImageRequest {
    images: Vec<String>,
}

/// Sidecar response. For image batches `vectors` holds `null` at failed
/// positions and `errors` names them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Option<Vec<f32>>>,
    pub dim: usize,
    pub model_id: String,
    #[serde(default)]
    pub errors: Vec<ItemError>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemError {
    pub index: usize,
    pub error: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub model_id: String,
    pub dim: usize,
    pub ready: bool,
}

/// Client for the embedding sidecar (`/v1/embed/text`, `/v1/embed/image`,
/// `/v1/health`).
pub struct RemoteProvider {
    base_url: String,
    model_id: String,
    dim: usize,
    max_retries: u32,
    client: reqwest::blocking::Client,
}

impl RemoteProvider {
    /// Connects and reads the advertised model from `/v1/health`.
    pub fn connect(base_url: &str, max_retries: u32) -> Result<Self, EmbedError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| EmbedError::Provider(e.to_string()))?;
        let base_url = base_url.trim_end_matches('/').to_string();
        let health: Health = client
            .get(format!("{base_url}/v1/health"))
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(|e| EmbedError::Provider(e.to_string()))?;
        if !health.ready {
            return Err(EmbedError::Provider("sidecar is not ready".into()));
        }
        Ok(RemoteProvider {
            base_url,
            model_id: health.model_id,
            dim: health.dim,
            max_retries,
            client,
        })
    }

    fn post<B: Serialize>(&self, path: &str, body: &B) -> Result<EmbedResponse, EmbedError> {
        let mut last = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(200 << attempt.min(5)));
            }
            let resp = match self.client.post(format!("{}{path}", self.base_url)).json(body).send() {
                Ok(r) if r.status().is_client_error() => {
                    let status = r.status();
                    return Err(EmbedError::Provider(format!("{path}: {status}: {}", r.text().unwrap_or_default())));
                }
                Ok(r) => r.error_for_status().and_then(|r| r.json::<EmbedResponse>()),
                Err(e) => Err(e),
            };
            match resp {
                Ok(r) => return self.check(r),
                Err(e) => last = e.to_string(),
            }
        }
        Err(EmbedError::Provider(last))
    }

    fn check(&self, r: EmbedResponse) -> Result<EmbedResponse, EmbedError> {
        if r.model_id != self.model_id {
            return Err(EmbedError::ModelMismatch(self.model_id.clone(), r.model_id));
        }
        if r.dim != self.dim {
            return Err(EmbedError::DimMismatch(self.dim, r.dim));
        }
        if let Some(v) = r.vectors.iter().flatten().find(|v| v.len() != self.dim) {
            return Err(EmbedError::DimMismatch(self.dim, v.len()));
        }
        Ok(r)
    }
}

impl EmbeddingProvider for RemoteProvider {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_texts(&self, items: &[TextItem<'_>]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let resp = self.post("/v1/embed/text", &TextRequest { texts: items.iter().map(|i| i.text).collect() })?;
        if resp.vectors.len() != items.len() {
            return Err(EmbedError::Provider("vector count differs from request".into()));
        }
        resp.vectors
            .into_iter()
            .zip(items)
            .map(|(v, it)| v.ok_or_else(|| EmbedError::Provider(format!("no vector for {}", it.id))))
            .collect()
    }

    fn embed_images(&self, items: &[ImageItem<'_>]) -> Result<Vec<Result<Vec<f32>, String>>, EmbedError> {
        let engine = base64::engine::general_purpose::STANDARD;
        let body = ImageRequest { images: items.iter().map(|i| engine.encode(i.bytes)).collect() };
        let resp = self.post("/v1/embed/image", &body)?;
        if resp.vectors.len() != items.len() {
            return Err(EmbedError::Provider("vector count differs from request".into()));
        }
        let errors: HashMap<usize, String> = resp.errors.into_iter().map(|e| (e.index, e.error)).collect();
        Ok(resp
            .vectors
            .into_iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| errors.get(&i).cloned().unwrap_or_else(|| "no vector".into())))
            .collect())
    }
}

/// Encodes phrase lemmas in batches and normalizes the results.
pub fn encode_texts(provider: &dyn EmbeddingProvider, phrases: &[Phrase], batch: usize) -> Result<Vec<EmbeddingVector>, EmbedError> {
    if phrases.is_empty() {
        return Err(EmbedError::Empty);
    }
    let texts: Vec<String> = phrases.iter().map(Phrase::lemmas_joined).collect();
    let mut out = Vec::with_capacity(phrases.len());
    for (chunk_p, chunk_t) in phrases.chunks(batch.max(1)).zip(texts.chunks(batch.max(1))) {
        let items: Vec<TextItem> = chunk_p
            .iter()
            .zip(chunk_t)
            .map(|(p, t)| TextItem { id: &p.phrase_id, text: t })
            .collect();
        let raw = provider.embed_texts(&items)?;
        if raw.len() != items.len() {
            return Err(EmbedError::Provider("vector count differs from request".into()));
        }
        for (p, v) in chunk_p.iter().zip(raw) {
            out.push(EmbeddingVector {
                item_id: p.phrase_id.clone(),
                modality: Modality::Text,
                model_id: provider.model_id().to_string(),
                components: normalize(&p.phrase_id, &v)?,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSkip {
    pub image_id: String,
    pub reason: String,
}

#[derive(Debug)]
pub struct ImageEncodeRun {
    pub store: VectorStore,
    pub skipped: Vec<ImageSkip>,
    pub provider_calls: usize,
    /// Dimensions of decoded images, keyed by id.
    pub decoded: HashMap<String, (u32, u32)>,
}

/// Encodes every decodable image of `manifest` into the store at `store_path`.
///
/// Finished rows are appended to `<store>.partial` after each batch. With
/// `resume`, ids already present in the final store or the partial log are
/// not sent again. The final store is sorted by id.
pub fn encode_images(
    provider: &dyn EmbeddingProvider,
    manifest: &[ImageRecord],
    image_root: &Path,
    store_path: &Path,
    resume: bool,
    batch: usize,
) -> Result<ImageEncodeRun, EmbedError> {
    let partial_path = partial_path(store_path);
    let mut done: Vec<(String, Vec<f32>)> = Vec::new();
    if resume {
        if store_path.exists() {
            let existing = VectorStore::load(store_path)?;
            if existing.model_id() != provider.model_id() {
                return Err(EmbedError::ModelMismatch(existing.model_id, provider.model_id().to_string()));
            }
            done.extend(existing.iter().map(|(id, r)| (id.to_string(), r.to_vec())));
        }
        if partial_path.exists() {
            done.extend(read_partial(&partial_path, provider.model_id())?);
        }
    } else if partial_path.exists() {
        fs::remove_file(&partial_path)?;
    }
    let wanted: BTreeSet<&str> = manifest.iter().map(|r| r.image_id.as_str()).collect();
    let mut have: BTreeSet<String> = BTreeSet::new();
    done.retain(|(id, _)| wanted.contains(id.as_str()) && have.insert(id.clone()));

    let todo: Vec<&ImageRecord> = manifest.iter().filter(|r| !have.contains(r.image_id.as_str())).collect();
    let mut skipped = Vec::new();
    let mut decoded = HashMap::new();
    let mut provider_calls = 0usize;
    let mut partial = if todo.is_empty() {
        None
    } else {
        Some(BufWriter::new(OpenOptions::new().create(true).append(true).open(&partial_path)?))
    };

    for chunk in todo.chunks(batch.max(1)) {
        let mut loaded: Vec<(&str, Vec<u8>)> = Vec::new();
        for rec in chunk {
            let path = image_root.join(&rec.storage_path);
            let bytes = match fs::read(&path) {
                Ok(b) => b,
                Err(e) => {
                    skipped.push(ImageSkip { image_id: rec.image_id.0.clone(), reason: format!("read: {e}") });
                    continue;
                }
            };
            match image::load_from_memory(&bytes) {
                Ok(img) => {
                    decoded.insert(rec.image_id.0.clone(), (img.width(), img.height()));
                    loaded.push((rec.image_id.as_str(), bytes));
                }
                Err(e) => skipped.push(ImageSkip { image_id: rec.image_id.0.clone(), reason: format!("decode: {e}") }),
            }
        }
        if loaded.is_empty() {
            continue;
        }
        let items: Vec<ImageItem> = loaded.iter().map(|(id, b)| ImageItem { id, bytes: b }).collect();
        provider_calls += 1;
        let results = provider.embed_images(&items)?;
        if results.len() != items.len() {
            return Err(EmbedError::Provider("vector count differs from request".into()));
        }
        let w = partial.as_mut().expect("partial log open while work remains");
        for (item, res) in items.iter().zip(results) {
            match res.map_err(EmbedError::Provider).and_then(|v| normalize(item.id, &v)) {
                Ok(v) => {
                    write_partial_row(w, item.id, &v)?;
                    done.push((item.id.to_string(), v));
                }
                Err(e) => skipped.push(ImageSkip { image_id: item.id.to_string(), reason: format!("encode: {e}") }),
            }
        }
        w.flush()?;
    }
    drop(partial);

    let dim = done.first().map_or(0, |(_, v)| v.len());
    let store = VectorStore::from_rows(provider.model_id(), dim, done)?.sorted();
    store.save(store_path)?;
    if partial_path.exists() {
        fs::remove_file(&partial_path)?;
    }
    skipped.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok(ImageEncodeRun { store, skipped, provider_calls, decoded })
}

fn partial_path(store_path: &Path) -> PathBuf {
    let mut s = store_path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

fn write_partial_row<W: Write>(w: &mut W, id: &str, v: &[f32]) -> io::Result<()> {
    write_str(w, id)?;
    w.write_all(&(v.len() as u32).to_le_bytes())?;
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

/// Reads complete rows from a partial log; a torn final row is ignored.
fn read_partial(path: &Path, _model_id: &str) -> Result<Vec<(String, Vec<f32>)>, EmbedError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    loop {
        let id = match read_str(&mut r) {
            Ok(id) => id,
            Err(EmbedError::Io(e)) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e),
        };
        let row = (|| -> io::Result<Vec<f32>> {
            let dim = read_u32(&mut r)? as usize;
            let mut v = vec![0f32; dim];
            let mut b = [0u8; 4];
            for x in v.iter_mut() {
                r.read_exact(&mut b)?;
                *x = f32::from_le_bytes(b);
            }
            Ok(v)
        })();
        match row {
            Ok(v) => out.push((id, v)),
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHit {
    pub image_id: String,
    pub phrase_id: String,
    pub cosine: f64,
}

fn check_compatible(images: &VectorStore, phrases: &VectorStore) -> Result<(), EmbedError> {
    if images.model_id() != phrases.model_id() {
        return Err(EmbedError::ModelMismatch(images.model_id.clone(), phrases.model_id.clone()));
    }
    if images.dim() != phrases.dim() && !images.is_empty() && !phrases.is_empty() {
        return Err(EmbedError::DimMismatch(images.dim(), phrases.dim()));
    }
    images.validate()?;
    phrases.validate()
}

/// Every `(image, phrase)` pair with cosine `>= threshold`, sorted by
/// `(image_id, phrase_id)`.
///
/// Image rows are scored in blocks of [`ROW_BLOCK`] on the rayon pool.
pub fn score_all(images: &VectorStore, phrases: &VectorStore, threshold: f64) -> Result<Vec<SimilarityHit>, EmbedError> {
    check_compatible(images, phrases)?;
    let mut phrase_order: Vec<usize> = (0..phrases.len()).collect();
    phrase_order.sort_by(|&a, &b| phrases.ids[a].cmp(&phrases.ids[b]));
    let mut image_order: Vec<usize> = (0..images.len()).collect();
    image_order.sort_by(|&a, &b| images.ids[a].cmp(&images.ids[b]));

    let blocks: Vec<Vec<SimilarityHit>> = image_order
        .par_chunks(ROW_BLOCK)
        .map(|block| {
            let mut hits = Vec::new();
            for &i in block {
                let row = images.row(i);
                for &j in &phrase_order {
                    let c = dot(row, phrases.row(j));
                    if c >= threshold {
                        hits.push(SimilarityHit {
                            image_id: images.ids[i].clone(),
                            phrase_id: phrases.ids[j].clone(),
                            cosine: c,
                        });
                    }
                }
            }
            hits
        })
        .collect();
    Ok(blocks.into_iter().flatten().collect())
}

/// Cosines of one phrase against every image (unfiltered), in store order.
pub fn cosines_for(images: &VectorStore, phrase: &[f32]) -> Result<Vec<(String, f64)>, EmbedError> {
    if !images.is_empty() && phrase.len() != images.dim() {
        return Err(EmbedError::DimMismatch(images.dim(), phrase.len()));
    }
    Ok(images
        .ids
        .par_iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), dot(images.row(i), phrase)))
        .collect())
}

/// The `k` images most similar to `phrase`, by descending cosine then id.
pub fn top_k(images: &VectorStore, phrase: &[f32], k: usize) -> Result<Vec<(String, f64)>, EmbedError> {
    let mut all = cosines_for(images, phrase)?;
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    Ok(all)
}

/// Writes `image_id,phrase_id,cosine` with six decimals.
pub fn write_hits<W: Write>(out: W, hits: &[SimilarityHit]) -> Result<(), EmbedError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["image_id", "phrase_id", "cosine"])?;
    for h in hits {
        w.write_record([h.image_id.as_str(), h.phrase_id.as_str(), &format!("{:.6}", h.cosine)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_hits(path: &Path) -> Result<Vec<SimilarityHit>, EmbedError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}
