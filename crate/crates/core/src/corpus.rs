//! Post corpus ingestion, text cleaning and the image manifest.
//!
//! The canonical posts file is newline-delimited JSON, one [`Post`] per line
//! with exactly the fields `post_id, thread_id, timestamp_utc, raw_body,
//! clean_text, image_ref`. Records from the public imageboard dump (`no`,
//! `resto`, `time`, `com`, `tim`, `filename`, `ext`) are mapped onto it by the
//! [`SourceFormat::FourchanDump`] adapter.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("corpus I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("image manifest error: {0}")]
    Manifest(#[from] csv::Error),
    #[error("line {line} of canonical posts file is malformed: {reason}")]
    Canonical { line: usize, reason: String },
    #[error("duplicate image_id {0:?} in image manifest")]
    DuplicateImage(String),
}

/// Identifier of an image in the manifest.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(pub String);

impl ImageId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One corpus message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Post {
    pub post_id: String,
    pub thread_id: String,
    pub timestamp_utc: i64,
    pub raw_body: String,
    pub clean_text: String,
    pub image_ref: Option<ImageId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: ImageId,
    pub storage_path: String,
    pub byte_size: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phash: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceFormat {
    Canonical,
    FourchanDump,
}

impl FromStr for SourceFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "canonical" => Ok(SourceFormat::Canonical),
            "fourchan-dump" => Ok(SourceFormat::FourchanDump),
            other => Err(format!("unknown source format {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub post_count: u64,
    pub image_count: u64,
    /// `[min, max]` post timestamps; absent for an empty corpus.
    pub time_span: Option<[i64; 2]>,
    pub source_format: SourceFormat,
}

/// A record that could not be turned into a [`Post`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub manifest: CorpusManifest,
    pub skipped: Vec<SkipRecord>,
}

/// Streaming-reader output for one input line.
#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Post(Post),
    Skipped(SkipRecord),
}

/// Removes markup and links from a post body.
///
/// Entities are decoded first (to a fixpoint, so double-escaped text is
/// stable), then tags are replaced by a space, then whitespace-delimited
/// tokens containing `://` or starting with `www.` are dropped, and finally
/// whitespace is collapsed. A `>` that is not part of a tag is kept, so
/// quote and greentext markers survive.
pub fn clean_text(raw_body: &str) -> String {
    // A pass can expose a new tag (e.g. `<a<a>>`); no pass lengthens the
    // text, so iterating to a fixpoint terminates.
    let mut current = clean_pass(raw_body);
    loop {
        let next = clean_pass(&current);
        if next == current {
            return current;
        }
        current = next;
    }
}

fn clean_pass(raw_body: &str) -> String {
    let decoded = decode_entities_fully(raw_body);
    let stripped = strip_tags(&decoded);
    let mut out = String::with_capacity(stripped.len());
    for token in stripped.split_whitespace().filter(|t| !is_url_token(t)) {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(token);
    }
    out
}

fn decode_entities_fully(text: &str) -> String {
    let mut current = text.to_string();
    // Each round shortens the text, so this terminates.
    loop {
        let next = html_escape::decode_html_entities(&current).into_owned();
        if next == current {
            return current;
        }
        current = next;
    }
}

/// A tag is `<`, optionally `/` or `!`, an ASCII letter, then anything up to
/// the next `>` that contains no `<`.
fn strip_tags(text: &str) -> String {
    let bytes = text.as_bytes();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    let mut copied_to = 0;
    while i < bytes.len() {
        if bytes[i] == b'<' {
            if let Some(end) = tag_end(bytes, i) {
                out.push_str(&text[copied_to..i]);
                out.push(' ');
                i = end + 1;
                copied_to = i;
                continue;
            }
        }
        i += 1;
    }
    out.push_str(&text[copied_to..]);
    out
}

fn tag_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut j = start + 1;
    if j < bytes.len() && (bytes[j] == b'/' || bytes[j] == b'!') {
        j += 1;
    }
    if j >= bytes.len() || !bytes[j].is_ascii_alphabetic() {
        return None;
    }
    while j < bytes.len() {
        match bytes[j] {
            b'>' => return Some(j),
            b'<' => return None,
            _ => j += 1,
        }
    }
    None
}

fn is_url_token(token: &str) -> bool {
    token.contains("://")
        || token
            .get(..4)
            .is_some_and(|p| p.eq_ignore_ascii_case("www."))
}

#[derive(Debug, Deserialize)]
struct CanonicalIn {
    post_id: String,
    thread_id: String,
    timestamp_utc: i64,
    raw_body: String,
    #[serde(default)]
    image_ref: Option<ImageId>,
}

#[derive(Debug, Deserialize)]
struct DumpIn {
    no: u64,
    #[serde(default)]
    resto: u64,
    time: i64,
    #[serde(default)]
    com: Option<String>,
    #[serde(default)]
    tim: Option<u64>,
    #[serde(default)]
    filename: Option<String>,
    #[serde(default)]
    ext: Option<String>,
}

fn parse_line(line: &str, format: SourceFormat) -> Result<Post, String> {
    let post = match format {
        SourceFormat::Canonical => {
            let rec: CanonicalIn = serde_json::from_str(line).map_err(|e| e.to_string())?;
            if rec.post_id.is_empty() {
                return Err("empty post_id".into());
            }
            Post {
                clean_text: clean_text(&rec.raw_body),
                post_id: rec.post_id,
                thread_id: rec.thread_id,
                timestamp_utc: rec.timestamp_utc,
                raw_body: rec.raw_body,
                image_ref: rec.image_ref,
            }
        }
        SourceFormat::FourchanDump => {
            let rec: DumpIn = serde_json::from_str(line).map_err(|e| e.to_string())?;
            let raw_body = rec.com.unwrap_or_default();
            // Stored files in the public dump are named after `tim`.
            let image_ref = match (rec.tim, rec.filename) {
                (Some(tim), _) => Some(ImageId(tim.to_string())),
                (None, Some(name)) => Some(ImageId(format!(
                    "{name}{}",
                    rec.ext.unwrap_or_default()
                ))),
                (None, None) => None,
            };
            Post {
                post_id: rec.no.to_string(),
                thread_id: if rec.resto == 0 { rec.no } else { rec.resto }.to_string(),
                timestamp_utc: rec.time,
                clean_text: clean_text(&raw_body),
                raw_body,
                image_ref,
            }
        }
    };
    if post.timestamp_utc < 0 {
        return Err(format!("negative timestamp {}", post.timestamp_utc));
    }
    Ok(post)
}

/// Single-pass reader turning input lines into [`Record`]s. Blank lines are
/// ignored; anything else that fails to parse becomes a skip record.
pub struct PostReader<R> {
    reader: R,
    format: SourceFormat,
    line_no: usize,
    buf: Vec<u8>,
}

impl<R: BufRead> PostReader<R> {
    pub fn new(reader: R, format: SourceFormat) -> Self {
        PostReader {
            reader,
            format,
            line_no: 0,
            buf: Vec::new(),
        }
    }
}

impl<R: BufRead> Iterator for PostReader<R> {
    type Item = io::Result<Record>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.reader.read_until(b'\n', &mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(e)),
            }
            self.line_no += 1;
            let line = match std::str::from_utf8(&self.buf) {
                Ok(s) => s.trim(),
                Err(_) => {
                    return Some(Ok(Record::Skipped(SkipRecord {
                        line: self.line_no,
                        reason: "invalid UTF-8".into(),
                    })))
                }
            };
            if line.is_empty() {
                continue;
            }
            let record = match parse_line(line, self.format) {
                Ok(post) => Record::Post(post),
                Err(reason) => Record::Skipped(SkipRecord {
                    line: self.line_no,
                    reason,
                }),
            };
            return Some(Ok(record));
        }
    }
}

/// Streams `input` and writes one canonical line per accepted post to `out`.
///
/// Malformed records and repeated `post_id`s are skipped and reported. The
/// duplicate check keeps the set of seen ids in memory.
pub fn ingest_posts<W: Write>(
    input: &Path,
    format: SourceFormat,
    out: W,
) -> Result<IngestReport, CorpusError> {
    let file = File::open(input).map_err(|source| CorpusError::Read {
        path: input.to_path_buf(),
        source,
    })?;
    ingest_reader(BufReader::new(file), format, out)
}

pub fn ingest_reader<R: BufRead, W: Write>(
    reader: R,
    format: SourceFormat,
    out: W,
) -> Result<IngestReport, CorpusError> {
    let mut out = BufWriter::new(out);
    let mut seen = HashSet::new();
    let mut skipped = Vec::new();
    let mut post_count = 0u64;
    let mut span: Option<[i64; 2]> = None;
    for item in PostReader::new(reader, format) {
        match item? {
            Record::Skipped(skip) => skipped.push(skip),
            Record::Post(post) => {
                if !seen.insert(post.post_id.clone()) {
                    skipped.push(SkipRecord {
                        line: 0,
                        reason: format!("duplicate post_id {}", post.post_id),
                    });
                    continue;
                }
                let ts = post.timestamp_utc;
                span = Some(match span {
                    None => [ts, ts],
                    Some([lo, hi]) => [lo.min(ts), hi.max(ts)],
                });
                serde_json::to_writer(&mut out, &post).map_err(io::Error::from)?;
                out.write_all(b"\n")?;
                post_count += 1;
            }
        }
    }
    out.flush()?;
    Ok(IngestReport {
        manifest: CorpusManifest {
            post_count,
            image_count: 0,
            time_span: span,
            source_format: format,
        },
        skipped,
    })
}

/// Reads a canonical posts file written by [`ingest_posts`].
pub fn read_canonical(path: &Path) -> Result<CanonicalPosts, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(CanonicalPosts {
        inner: PostReader::new(BufReader::new(file), SourceFormat::Canonical),
    })
}

pub struct CanonicalPosts {
    inner: PostReader<BufReader<File>>,
}

impl Iterator for CanonicalPosts {
    type Item = Result<Post, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(match self.inner.next()? {
            Err(e) => Err(CorpusError::Io(e)),
            Ok(Record::Post(p)) => Ok(p),
            Ok(Record::Skipped(s)) => Err(CorpusError::Canonical {
                line: s.line,
                reason: s.reason,
            }),
        })
    }
}

pub fn load_posts(path: &Path) -> Result<Vec<Post>, CorpusError> {
    read_canonical(path)?.collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    image_id: String,
    storage_path: String,
    byte_size: u64,
}

/// Loads the `image_id,storage_path,byte_size` manifest.
pub fn load_image_manifest(path: &Path) -> Result<Vec<ImageRecord>, CorpusError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for row in reader.deserialize::<ManifestRow>() {
        let row = row?;
        if !seen.insert(row.image_id.clone()) {
            return Err(CorpusError::DuplicateImage(row.image_id));
        }
        records.push(ImageRecord {
            image_id: ImageId(row.image_id),
            storage_path: row.storage_path,
            byte_size: row.byte_size,
            width: None,
            height: None,
            phash: None,
        });
    }
    Ok(records)
}

pub fn write_image_manifest<W: Write>(out: W, records: &[ImageRecord]) -> Result<(), CorpusError> {
    let mut writer = csv::Writer::from_writer(out);
    for r in records {
        writer.serialize(ManifestRow {
            image_id: r.image_id.0.clone(),
            storage_path: r.storage_path.clone(),
            byte_size: r.byte_size,
        })?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clean_text_examples() {
        assert_eq!(clean_text(""), "");
        assert_eq!(clean_text("<b>hi</b> see http://x.y"), "hi see");
        assert_eq!(clean_text("&gt;&gt;12345 <br> gas"), ">>12345 gas");
        assert_eq!(clean_text("see https://a.b/c now"), "see now");
        assert_eq!(clean_text("go to WWW.example.com today"), "go to today");
    }

    #[test]
    fn clean_text_keeps_non_tag_angle_brackets() {
        assert_eq!(clean_text("a < b and c > d"), "a < b and c > d");
        assert_eq!(clean_text(">implying<br>lol"), ">implying lol");
        assert_eq!(clean_text("<span class=\"quote\">&gt;be me</span>"), ">be me");
    }

    #[test]
    fn clean_text_double_escaped_is_stable() {
        let once = clean_text("&amp;lt;b&amp;gt;x");
        assert_eq!(once, "x");
        assert_eq!(clean_text(&once), once);
    }

    proptest! {
        #[test]
        fn clean_text_idempotent(s in "[a-z <>/&;#:.w0-9gtbrp\n\t]{0,60}") {
            let once = clean_text(&s);
            prop_assert_eq!(clean_text(&once), once.clone());
            prop_assert!(!once.contains("://"));
            prop_assert!(!once.contains("  "));
        }
    }

    fn ingest_str(input: &str, format: SourceFormat) -> (IngestReport, String) {
        let mut out = Vec::new();
        let report = ingest_reader(input.as_bytes(), format, &mut out).unwrap();
        (report, String::from_utf8(out).unwrap())
    }

    #[test]
    fn empty_input_gives_empty_manifest() {
        let (report, out) = ingest_str("", SourceFormat::Canonical);
        assert_eq!(report.manifest.post_count, 0);
        assert_eq!(report.manifest.time_span, None);
        assert!(out.is_empty());
    }

    #[test]
    fn malformed_records_are_skipped() {
        let input = concat!(
            r#"{"post_id":"1","thread_id":"1","timestamp_utc":10,"raw_body":"<b>hi</b> see http://x.y","image_ref":null}"#, "\n",
            r#"{"post_id":"2","thread_id":"1","timestamp_utc":20,"raw_body":"b","image_ref":"img1"}"#, "\n",
            "{not json\n",
            "\n",
            r#"{"post_id":"3","thread_id":"1","timestamp_utc":5,"raw_body":"c"}"#, "\n",
        );
        let (report, out) = ingest_str(input, SourceFormat::Canonical);
        assert_eq!(report.manifest.post_count, 3);
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(report.skipped[0].line, 3);
        assert_eq!(report.manifest.time_span, Some([5, 20]));
        let first: Post = serde_json::from_str(out.lines().next().unwrap()).unwrap();
        assert_eq!(first.clean_text, "hi see");
    }

    #[test]
    fn duplicate_and_negative_records_are_skipped() {
        let input = concat!(
            r#"{"post_id":"1","thread_id":"1","timestamp_utc":10,"raw_body":"a"}"#, "\n",
            r#"{"post_id":"1","thread_id":"1","timestamp_utc":11,"raw_body":"b"}"#, "\n",
            r#"{"post_id":"2","thread_id":"1","timestamp_utc":-4,"raw_body":"c"}"#, "\n",
        );
        let (report, _) = ingest_str(input, SourceFormat::Canonical);
        assert_eq!(report.manifest.post_count, 1);
        assert_eq!(report.skipped.len(), 2);
    }

    #[test]
    fn fourchan_dump_adapter() {
        let input = concat!(
            r#"{"no":100,"resto":0,"time":1490000000,"com":"OP &gt;text","tim":1490000000123,"filename":"pepe","ext":".png"}"#, "\n",
            r#"{"no":101,"resto":100,"time":1490000050,"com":"reply<br>here"}"#, "\n",
            r#"{"no":102,"resto":100,"time":1490000060,"filename":"x","ext":".jpg"}"#, "\n",
        );
        let (report, out) = ingest_str(input, SourceFormat::FourchanDump);
        assert_eq!(report.manifest.post_count, 3);
        let posts: Vec<Post> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(posts[0].thread_id, "100");
        assert_eq!(posts[0].clean_text, "OP >text");
        assert_eq!(posts[0].image_ref, Some(ImageId("1490000000123".into())));
        assert_eq!(posts[1].thread_id, "100");
        assert_eq!(posts[1].clean_text, "reply here");
        assert_eq!(posts[1].image_ref, None);
        assert_eq!(posts[2].image_ref, Some(ImageId("x.jpg".into())));
        assert_eq!(posts[2].clean_text, "");
    }

    #[test]
    fn ingest_is_byte_identical_on_rerun() {
        let input = concat!(
            r#"{"post_id":"a","thread_id":"t","timestamp_utc":1,"raw_body":"x &amp; y"}"#, "\n",
            r#"{"post_id":"b","thread_id":"t","timestamp_utc":2,"raw_body":"z"}"#, "\n",
        );
        let (_, first) = ingest_str(input, SourceFormat::Canonical);
        let (_, second) = ingest_str(&first, SourceFormat::Canonical);
        assert_eq!(first, second);
    }

    #[test]
    fn image_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("images.csv");
        std::fs::write(&path, "image_id,storage_path,byte_size\nimg1,a.png,10\nimg2,b.png,20\n").unwrap();
        let records = load_image_manifest(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[1].image_id.as_str(), "img2");
        let mut out = Vec::new();
        write_image_manifest(&mut out, &records).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), std::fs::read_to_string(&path).unwrap());

        std::fs::write(&path, "image_id,storage_path,byte_size\nimg1,a.png,10\nimg1,b.png,20\n").unwrap();
        assert!(matches!(load_image_manifest(&path), Err(CorpusError::DuplicateImage(_))));
    }
}
