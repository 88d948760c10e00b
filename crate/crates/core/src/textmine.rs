//! Tokenization, corpus TF-IDF and the curated keyword selection.
//!
//! The corpus score of a term is `tf_total(t) * ln(N / df(t))`, which is the
//! per-document `tf(t, d) * ln(N / df(t))` summed over all documents. Only the
//! ranking is consumed downstream.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use unicode_segmentation::UnicodeSegmentation;

use crate::Category;

pub const DEFAULT_TOP_K: usize = 200;

const STOPWORDS_EN: &str = include_str!("../data/stopwords_en.txt");

/// Documents counted per parallel map task.
const CHUNK: usize = 4096;

#[derive(Debug, thiserror::Error)]
pub enum TextMineError {
    #[error("corpus has no non-empty document")]
    EmptyCorpus,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("keyword selection is empty")]
    EmptySelection,
    #[error("keyword file line {line}: {reason}")]
    KeywordFile { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Lowercase word tokens on Unicode word boundaries. Stopwords are kept.
pub fn tokenize(text: &str) -> Vec<String> {
    text.unicode_words().map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, Default)]
pub struct Stopwords(HashSet<String>);

impl Stopwords {
    /// The bundled English list.
    pub fn english() -> Self {
        Self::parse(STOPWORDS_EN)
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn from_file(path: &Path) -> io::Result<Self> {
        Ok(Self::parse(&fs::read_to_string(path)?))
    }

    fn parse(text: &str) -> Self {
        Stopwords(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_lowercase)
                .collect(),
        )
    }

    pub fn contains(&self, term: &str) -> bool {
        self.0.contains(term)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<S: Into<String>> FromIterator<S> for Stopwords {
    fn from_iter<T: IntoIterator<Item = S>>(iter: T) -> Self {
        Stopwords(iter.into_iter().map(Into::into).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermScore {
    pub term: String,
    pub document_frequency: u64,
    pub corpus_tfidf: f64,
}

#[derive(Default)]
struct Counts {
    // term -> (document frequency, total occurrences)
    terms: HashMap<String, (u64, u64)>,
}

impl Counts {
    fn add_doc(&mut self, tokens: &[String], stopwords: &Stopwords) {
        let mut local: HashMap<&str, u64> = HashMap::new();
        for t in tokens {
            if !stopwords.contains(t) {
                *local.entry(t.as_str()).or_default() += 1;
            }
        }
        for (term, tf) in local {
            let entry = self.terms.entry(term.to_string()).or_default();
            entry.0 += 1;
            entry.1 += tf;
        }
    }

    fn merge(mut self, other: Counts) -> Counts {
        for (term, (df, tf)) in other.terms {
            let entry = self.terms.entry(term).or_default();
            entry.0 += df;
            entry.1 += tf;
        }
        self
    }
}

/// Scores every non-stopword term over `documents` (already tokenized).
///
/// Returns the scores sorted by term; use [`top_terms`] for the ranking.
pub fn build_tfidf<I, D>(documents: I, stopwords: &Stopwords) -> Result<Vec<TermScore>, TextMineError>
where
    I: IntoIterator<Item = D>,
    D: AsRef<[String]> + Send,
{
    let mut total = Counts::default();
    let mut n_docs = 0u64;
    let mut any_tokens = false;
    let mut iter = documents.into_iter();
    loop {
        let chunk: Vec<D> = iter.by_ref().take(CHUNK).collect();
        if chunk.is_empty() {
            break;
        }
        n_docs += chunk.len() as u64;
        any_tokens |= chunk.iter().any(|d| !d.as_ref().is_empty());
        let partial = chunk
            .into_par_iter()
            .fold(Counts::default, |mut acc, doc| {
                acc.add_doc(doc.as_ref(), stopwords);
                acc
            })
            .reduce(Counts::default, Counts::merge);
        total = total.merge(partial);
    }
    if !any_tokens {
        return Err(TextMineError::EmptyCorpus);
    }
    let n = n_docs as f64;
    let mut scores: Vec<TermScore> = total
        .terms
        .into_iter()
        .map(|(term, (df, tf))| TermScore {
            corpus_tfidf: tf as f64 * (n / df as f64).ln(),
            term,
            document_frequency: df,
        })
        .collect();
    scores.sort_by(|a, b| a.term.cmp(&b.term));
    Ok(scores)
}

/// Top `k` terms by score, ties broken by ascending term.
pub fn top_terms(scores: &[TermScore], k: usize) -> Result<Vec<TermScore>, TextMineError> {
    if k == 0 {
        return Err(TextMineError::ZeroK);
    }
    let mut ranked = scores.to_vec();
    ranked.sort_by(|a, b| {
        b.corpus_tfidf
            .total_cmp(&a.corpus_tfidf)
            .then_with(|| a.term.cmp(&b.term))
    });
    ranked.truncate(k);
    Ok(ranked)
}

/// Writes the `term,document_frequency,corpus_tfidf` report in rank order.
pub fn write_ranked_report<W: Write>(out: W, ranked: &[TermScore]) -> Result<(), TextMineError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["term", "document_frequency", "corpus_tfidf"])?;
    for t in ranked {
        w.write_record([
            t.term.as_str(),
            &t.document_frequency.to_string(),
            &format!("{:.6}", t.corpus_tfidf),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Keywords picked by a curator from the ranked report.
///
/// File form: one keyword per line, optionally followed by whitespace and the
/// target category it denotes. `# selected_by: NAME` and
/// `# source_rank_cutoff: K` header comments carry the provenance fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordSelection {
    pub keywords: BTreeSet<String>,
    pub selected_by: String,
    pub source_rank_cutoff: usize,
    /// Category each keyword points at, when the curator recorded one.
    #[serde(default)]
    pub groups: BTreeMap<String, Category>,
}

impl KeywordSelection {
    /// Default target keywords.
    pub fn default_fixture() -> Self {
        let groups: BTreeMap<String, Category> = [
            ("jews", Category::Antisemitic),
            ("kike", Category::Antisemitic),
            ("jew", Category::Antisemitic),
            ("kikes", Category::Antisemitic),
            ("jewish", Category::Antisemitic),
            ("muslims", Category::Islamophobic),
            ("muslim", Category::Islamophobic),
        ]
        .into_iter()
        .map(|(k, c)| (k.to_string(), c))
        .collect();
        KeywordSelection {
            keywords: groups.keys().cloned().collect(),
            selected_by: "default".into(),
            source_rank_cutoff: DEFAULT_TOP_K,
            groups,
        }
    }

    pub fn parse(text: &str) -> Result<Self, TextMineError> {
        let mut sel = KeywordSelection {
            keywords: BTreeSet::new(),
            selected_by: String::new(),
            source_rank_cutoff: DEFAULT_TOP_K,
            groups: BTreeMap::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some((key, value)) = comment.split_once(':') {
                    match key.trim() {
                        "selected_by" => sel.selected_by = value.trim().to_string(),
                        "source_rank_cutoff" => {
                            sel.source_rank_cutoff = value.trim().parse().map_err(|_| {
                                TextMineError::KeywordFile {
                                    line: i + 1,
                                    reason: format!("bad cutoff {:?}", value.trim()),
                                }
                            })?
                        }
                        _ => {}
                    }
                }
                continue;
            }
            let mut parts = line.split_whitespace();
            let keyword = parts.next().unwrap_or_default().to_lowercase();
            if let Some(cat) = parts.next() {
                let cat: Category = cat.parse().map_err(|e: crate::category::UnknownCategory| {
                    TextMineError::KeywordFile {
                        line: i + 1,
                        reason: e.to_string(),
                    }
                })?;
                sel.groups.insert(keyword.clone(), cat);
            }
            sel.keywords.insert(keyword);
        }
        if sel.keywords.is_empty() {
            return Err(TextMineError::EmptySelection);
        }
        Ok(sel)
    }

    pub fn load(path: &Path) -> Result<Self, TextMineError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = format!(
            "# selected_by: {}\n# source_rank_cutoff: {}\n",
            self.selected_by, self.source_rank_cutoff
        );
        for k in &self.keywords {
            match self.groups.get(k) {
                Some(c) => out.push_str(&format!("{k} {c}\n")),
                None => out.push_str(&format!("{k}\n")),
            }
        }
        out
    }

    /// Keywords not present among `emitted` terms.
    pub fn missing_from<'a>(&'a self, emitted: &[TermScore]) -> Vec<&'a str> {
        let terms: HashSet<&str> = emitted.iter().map(|t| t.term.as_str()).collect();
        self.keywords
            .iter()
            .map(String::as_str)
            .filter(|k| !terms.contains(k))
            .collect()
    }

    /// Whether any token of `text` is a selected keyword.
    pub fn matches_tokens(&self, tokens: &[String]) -> bool {
        tokens.iter().any(|t| self.keywords.contains(t))
    }
}
