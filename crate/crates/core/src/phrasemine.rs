//! Candidate phrase extraction and corpus-wide phrase matching.
//!
//! A candidate phrase is a whole sentence after tokenization and
//! lemmatization. Candidates are counted per sentence occurrence across the
//! keyword-bearing toxic posts; matching later runs on the same lemmatized
//! sentence representation over the full corpus, so every extracted phrase
//! is found again at least `frequency` times in its source posts.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Post;
use crate::digest::sha256_hex;
use crate::textmine::{tokenize, KeywordSelection};
use crate::Category;

pub const DEFAULT_MIN_FREQ: u64 = 5;
pub const DEFAULT_MAX_WORDS: usize = 7;

const LEMMA_EXCEPTIONS: &str = include_str!("../data/lemma_exceptions.tsv");
const LEMMA_KEEP: &str = include_str!("../data/lemma_keep.txt");
const VERB_STEMS: &str = include_str!("../data/verb_stems.txt");

const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "vs", "etc", "e.g", "i.e", "u.s", "u.k",
    "inc", "ltd", "co", "mt", "approx", "dept", "est", "gen", "gov", "lt", "col", "sgt", "capt",
    "rev", "cf", "al",
];

const CHUNK: usize = 4096;

#[derive(Debug, thiserror::Error)]
pub enum PhraseError {
    #[error("phrase {0} is not labeled antisemitic or islamophobic")]
    UnlabeledPhrase(String),
    #[error("phrases file: {0}")]
    Csv(#[from] csv::Error),
    #[error("phrases file row {row}: {reason}")]
    BadRow { row: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("matches file line {line}: {source}")]
    BadMatch { line: usize, source: serde_json::Error },
}

/// Splits cleaned text into sentences.
///
/// Boundaries are newlines and runs of `.`, `!` or `?` followed by whitespace
/// or the end of the text. A lone `.` after a bundled abbreviation does not
/// end a sentence. Terminal punctuation stays with its sentence.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut push = |s: &str| {
        let s = s.trim();
        if !s.is_empty() {
            out.push(s.to_string());
        }
    };
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if c == '\n' {
            push(&text[start..pos]);
            start = pos + 1;
            i += 1;
            continue;
        }
        if matches!(c, '.' | '!' | '?') {
            let mut j = i;
            while j + 1 < chars.len() && matches!(chars[j + 1].1, '.' | '!' | '?') {
                j += 1;
            }
            let end = chars.get(j + 1).map_or(text.len(), |&(p, _)| p);
            let at_boundary = chars.get(j + 1).is_none_or(|&(_, n)| n.is_whitespace());
            let lone_dot = i == j && c == '.';
            if at_boundary && !(lone_dot && is_abbreviation(&text[start..pos])) {
                push(&text[start..end]);
                start = end;
            }
            i = j + 1;
            continue;
        }
        i += 1;
    }
    push(&text[start..]);
    out
}

fn is_abbreviation(before: &str) -> bool {
    let word = before
        .rsplit(char::is_whitespace)
        .next()
        .unwrap_or("")
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    ABBREVIATIONS.contains(&word.as_str())
}

/// Maps lowercase tokens to lemmas.
pub trait Lemmatizer: Send + Sync {
    fn lemmatize_token(&self, token: &str) -> String;

    fn lemmatize(&self, tokens: &[String]) -> Vec<String> {
        tokens.iter().map(|t| self.lemmatize_token(t)).collect()
    }
}

/// Exception-table plus suffix-rule reducer.
///
/// Order: irregular exceptions, protected words, plural and third-person
/// `-s/-es/-ies`, then `-ing`/`-ed` only when the resulting stem is in the
/// attested verb list. Anything else passes through.
#[derive(Debug, Clone)]
pub struct RuleLemmatizer {
    exceptions: HashMap<String, String>,
    keep: HashSet<String>,
    verbs: HashSet<String>,
}

impl Default for RuleLemmatizer {
    fn default() -> Self {
        Self::bundled()
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
}

impl RuleLemmatizer {
    pub fn bundled() -> Self {
        let exceptions = data_lines(LEMMA_EXCEPTIONS)
            .filter_map(|l| l.split_once('\t'))
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        RuleLemmatizer {
            exceptions,
            keep: data_lines(LEMMA_KEEP).map(String::from).collect(),
            verbs: data_lines(VERB_STEMS).map(String::from).collect(),
        }
    }

    fn reduce_plural(&self, token: &str) -> Option<String> {
        if token.ends_with("'s") || token.ends_with("ss") || token.ends_with("us") || token.ends_with("is") {
            return None;
        }
        if let Some(stem) = token.strip_suffix("ies") {
            if token.len() > 4 {
                return Some(format!("{stem}y"));
            }
            return None;
        }
        for suffix in ["sses", "xes", "zes", "ches", "shes"] {
            if token.ends_with(suffix) {
                return Some(token[..token.len() - 2].to_string());
            }
        }
        token.strip_suffix('s').map(String::from)
    }

    fn reduce_verb(&self, token: &str, suffix: &str) -> Option<String> {
        let stem = token.strip_suffix(suffix)?;
        if stem.len() < 2 {
            return None;
        }
        if self.verbs.contains(stem) {
            return Some(stem.to_string());
        }
        let with_e = format!("{stem}e");
        if self.verbs.contains(&with_e) {
            return Some(with_e);
        }
        let b = stem.as_bytes();
        if b.len() >= 3 && b[b.len() - 1] == b[b.len() - 2] {
            let undoubled = &stem[..stem.len() - 1];
            if self.verbs.contains(undoubled) {
                return Some(undoubled.to_string());
            }
        }
        if suffix == "ed" {
            if let Some(y_stem) = token.strip_suffix("ied") {
                let with_y = format!("{y_stem}y");
                if self.verbs.contains(&with_y) {
                    return Some(with_y);
                }
            }
        }
        None
    }
}

impl Lemmatizer for RuleLemmatizer {
    fn lemmatize_token(&self, token: &str) -> String {
        if let Some(lemma) = self.exceptions.get(token) {
            return lemma.clone();
        }
        if self.keep.contains(token) || token.chars().count() <= 3 {
            return token.to_string();
        }
        if token.ends_with('s') {
            return self.reduce_plural(token).unwrap_or_else(|| token.to_string());
        }
        if token.len() > 5 && token.ends_with("ing") {
            if let Some(stem) = self.reduce_verb(token, "ing") {
                return stem;
            }
        }
        if token.len() > 4 && token.ends_with("ed") {
            if let Some(stem) = self.reduce_verb(token, "ed") {
                return stem;
            }
        }
        token.to_string()
    }
}

/// Sentences of `text` as lemma sequences, in order. Sentences without word
/// tokens are kept as empty vectors so indices line up with [`split_sentences`].
pub fn lemmatized_sentences(text: &str, lemmatizer: &dyn Lemmatizer) -> Vec<Vec<String>> {
    split_sentences(text)
        .iter()
        .map(|s| lemmatizer.lemmatize(&tokenize(s)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phrase {
    pub phrase_id: String,
    pub lemma_tokens: Vec<String>,
    pub surface_example: String,
    pub frequency: u64,
    pub category: Category,
    /// Set when the phrase contains keywords of more than one target group.
    #[serde(default)]
    pub multi_target: bool,
}

impl Phrase {
    pub fn lemmas_joined(&self) -> String {
        self.lemma_tokens.join(" ")
    }
}

/// Stable id derived from the lemma sequence.
pub fn phrase_id_for(lemmas: &[String]) -> String {
    format!("ph{}", &sha256_hex(lemmas.join(" ").as_bytes())[..10])
}

#[derive(Debug, Clone, Copy)]
pub struct ExtractParams {
    pub min_freq: u64,
    pub max_words: usize,
}

impl Default for ExtractParams {
    fn default() -> Self {
        ExtractParams {
            min_freq: DEFAULT_MIN_FREQ,
            max_words: DEFAULT_MAX_WORDS,
        }
    }
}

type SentenceCounts = HashMap<Vec<String>, (u64, String)>;

fn count_sentences(acc: &mut SentenceCounts, text: &str, lemmatizer: &dyn Lemmatizer) {
    for sentence in split_sentences(text) {
        let lemmas = lemmatizer.lemmatize(&tokenize(&sentence));
        if lemmas.is_empty() {
            continue;
        }
        match acc.get_mut(&lemmas) {
            Some((n, surface)) => {
                *n += 1;
                if sentence < *surface {
                    *surface = sentence;
                }
            }
            None => {
                acc.insert(lemmas, (1, sentence));
            }
        }
    }
}

fn merge_counts(mut a: SentenceCounts, b: SentenceCounts) -> SentenceCounts {
    for (lemmas, (n, surface)) in b {
        match a.get_mut(&lemmas) {
            Some((m, s)) => {
                *m += n;
                if surface < *s {
                    *s = surface;
                }
            }
            None => {
                a.insert(lemmas, (n, surface));
            }
        }
    }
    a
}

/// Counts lemmatized sentences over `texts` and keeps those occurring at
/// least `min_freq` times with at most `max_words` lemmas.
///
/// Each candidate keeps the lexicographically smallest surface sentence, so
/// the output does not depend on post order. Output is sorted by descending
/// frequency, then lemma sequence. With `keywords`, phrases containing
/// keywords of two or more categories get `multi_target` set.
pub fn extract_candidates<I, S>(
    texts: I,
    lemmatizer: &dyn Lemmatizer,
    params: ExtractParams,
    keywords: Option<&KeywordSelection>,
) -> Vec<Phrase>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str> + Send,
{
    let mut total = SentenceCounts::new();
    let mut iter = texts.into_iter();
    loop {
        let chunk: Vec<S> = iter.by_ref().take(CHUNK).collect();
        if chunk.is_empty() {
            break;
        }
        let partial = chunk
            .into_par_iter()
            .fold(SentenceCounts::new, |mut acc, t| {
                count_sentences(&mut acc, t.as_ref(), lemmatizer);
                acc
            })
            .reduce(SentenceCounts::new, merge_counts);
        total = merge_counts(total, partial);
    }

    let keyword_lemmas: HashMap<String, Category> = keywords
        .map(|sel| {
            sel.groups
                .iter()
                .flat_map(|(k, c)| [(k.clone(), *c), (lemmatizer.lemmatize_token(k), *c)])
                .collect()
        })
        .unwrap_or_default();

    let mut phrases: Vec<Phrase> = total
        .into_iter()
        .filter(|(lemmas, (n, _))| *n >= params.min_freq && lemmas.len() <= params.max_words)
        .map(|(lemmas, (frequency, surface_example))| {
            let targets: BTreeSet<Category> = lemmas
                .iter()
                .filter_map(|l| keyword_lemmas.get(l).copied())
                .collect();
            Phrase {
                phrase_id: phrase_id_for(&lemmas),
                multi_target: targets.len() > 1,
                lemma_tokens: lemmas,
                surface_example,
                frequency,
                category: Category::Unlabeled,
            }
        })
        .collect();
    phrases.sort_by(|a, b| {
        b.frequency
            .cmp(&a.frequency)
            .then_with(|| a.lemma_tokens.cmp(&b.lemma_tokens))
    });
    phrases
}

/// Posts that are toxic and contain at least one selected keyword token.
pub fn keyword_posts<'a, I>(posts: I, toxic: &'a HashSet<String>, keywords: &'a KeywordSelection) -> impl Iterator<Item = &'a Post>
where
    I: IntoIterator<Item = &'a Post>,
    I::IntoIter: 'a,
{
    posts.into_iter().filter(move |p| {
        toxic.contains(&p.post_id) && keywords.matches_tokens(&tokenize(&p.clean_text))
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PhraseMatch {
    pub post_id: String,
    pub phrase_id: String,
    pub sentence_index: usize,
    pub token_offset: usize,
}

/// All contiguous occurrences of labeled phrases inside lemmatized sentences.
///
/// Every phrase must carry a target category. Output is sorted by
/// `(post_id, phrase_id, sentence_index, token_offset)`.
pub fn match_phrases(
    posts: &[Post],
    phrases: &[Phrase],
    lemmatizer: &dyn Lemmatizer,
) -> Result<Vec<PhraseMatch>, PhraseError> {
    if let Some(p) = phrases.iter().find(|p| !p.category.is_target()) {
        return Err(PhraseError::UnlabeledPhrase(p.phrase_id.clone()));
    }
    let mut by_first: HashMap<&str, Vec<&Phrase>> = HashMap::new();
    for p in phrases.iter().filter(|p| !p.lemma_tokens.is_empty()) {
        by_first.entry(p.lemma_tokens[0].as_str()).or_default().push(p);
    }
    let mut matches: Vec<PhraseMatch> = posts
        .par_iter()
        .flat_map_iter(|post| {
            let mut found = Vec::new();
            for (si, lemmas) in lemmatized_sentences(&post.clean_text, lemmatizer).iter().enumerate() {
                for offset in 0..lemmas.len() {
                    let Some(cands) = by_first.get(lemmas[offset].as_str()) else {
                        continue;
                    };
                    for p in cands {
                        let n = p.lemma_tokens.len();
                        if offset + n <= lemmas.len() && lemmas[offset..offset + n] == p.lemma_tokens[..] {
                            found.push(PhraseMatch {
                                post_id: post.post_id.clone(),
                                phrase_id: p.phrase_id.clone(),
                                sentence_index: si,
                                token_offset: offset,
                            });
                        }
                    }
                }
            }
            found
        })
        .collect();
    matches.sort();
    Ok(matches)
}

/// Writes `phrase_id,lemmas,frequency,category,surface_example`.
pub fn write_phrases<W: Write>(out: W, phrases: &[Phrase]) -> Result<(), PhraseError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["phrase_id", "lemmas", "frequency", "category", "surface_example"])?;
    for p in phrases {
        w.write_record([
            p.phrase_id.as_str(),
            &p.lemmas_joined(),
            &p.frequency.to_string(),
            p.category.as_str(),
            &p.surface_example,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_phrases(path: &Path) -> Result<Vec<Phrase>, PhraseError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |reason: String| PhraseError::BadRow { row: i + 1, reason };
        if rec.len() != 5 {
            return Err(bad(format!("expected 5 fields, got {}", rec.len())));
        }
        let lemma_tokens: Vec<String> = rec[1].split_whitespace().map(String::from).collect();
        if lemma_tokens.is_empty() {
            return Err(bad("empty lemmas".into()));
        }
        out.push(Phrase {
            phrase_id: rec[0].to_string(),
            lemma_tokens,
            frequency: rec[2].parse().map_err(|_| bad(format!("bad frequency {:?}", &rec[2])))?,
            category: rec[3].parse().map_err(|e: crate::category::UnknownCategory| bad(e.to_string()))?,
            surface_example: rec[4].to_string(),
            multi_target: false,
        });
    }
    Ok(out)
}

pub fn write_matches<W: Write>(mut out: W, matches: &[PhraseMatch]) -> io::Result<()> {
    for m in matches {
        serde_json::to_writer(&mut out, m)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_matches(path: &Path) -> Result<Vec<PhraseMatch>, PhraseError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| PhraseError::BadMatch { line: i + 1, source })?);
    }
    Ok(out)
}

/// Number of distinct posts matching each phrase.
pub fn posts_per_phrase(matches: &[PhraseMatch]) -> BTreeMap<String, u64> {
    let mut seen: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
    for m in matches {
        seen.entry(m.phrase_id.clone()).or_default().insert(&m.post_id);
    }
    seen.into_iter().map(|(k, v)| (k, v.len() as u64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::clean_text;
    use proptest::prelude::*;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    fn post(id: &str, text: &str) -> Post {
        Post {
            post_id: id.into(),
            thread_id: "t".into(),
            timestamp_utc: 0,
            raw_body: text.into(),
            clean_text: clean_text(text),
            image_ref: None,
        }
    }

    fn labeled(lemmas: &[&str], cat: Category) -> Phrase {
        let lemma_tokens = toks(lemmas);
        Phrase {
            phrase_id: phrase_id_for(&lemma_tokens),
            surface_example: lemmas.join(" "),
            lemma_tokens,
            frequency: 5,
            category: cat,
            multi_target: false,
        }
    }

    #[test]
    fn sentence_examples() {
        assert_eq!(split_sentences("Gas the jews. Race war now!"), ["Gas the jews.", "Race war now!"]);
        assert!(split_sentences("").is_empty());
        assert_eq!(split_sentences("mr. smith lies"), ["mr. smith lies"]);
    }

    #[test]
    fn sentence_edge_cases() {
        assert_eq!(split_sentences("what?! no way... ok"), ["what?!", "no way...", "ok"]);
        assert_eq!(split_sentences("pi is 3.14 roughly"), ["pi is 3.14 roughly"]);
        assert_eq!(split_sentences("line one\nline two"), ["line one", "line two"]);
        assert_eq!(split_sentences("  \n . \n"), ["."]);
        assert_eq!(split_sentences("see e.g. this. done"), ["see e.g. this.", "done"]);
    }

    #[test]
    fn lemmatize_examples() {
        let lem = RuleLemmatizer::bundled();
        assert_eq!(lem.lemmatize(&toks(&["all", "muslims", "are", "terrorists"])), toks(&["all", "muslim", "be", "terrorist"]));
        assert_eq!(lem.lemmatize(&toks(&["kikes"])), toks(&["kike"]));
        assert_eq!(lem.lemmatize(&toks(&["xyzzy"])), toks(&["xyzzy"]));
    }

    #[test]
    fn lemmatize_rules() {
        let lem = RuleLemmatizer::bundled();
        let cases = [
            ("gas", "gas"), ("jews", "jew"), ("this", "this"), ("boxes", "box"), ("glasses", "glass"),
            ("stories", "story"), ("killing", "kill"), ("gassing", "gas"), ("hated", "hate"),
            ("banned", "ban"), ("fucking", "fuck"), ("jewish", "jewish"), ("was", "be"),
            ("children", "child"), ("nothing", "nothing"), ("jew's", "jew's"), ("tried", "try"),
        ];
        for (tok, want) in cases {
            assert_eq!(lem.lemmatize_token(tok), want, "{tok}");
        }
    }

    #[test]
    fn candidate_frequency_and_filters() {
        let mut texts: Vec<String> = Vec::new();
        texts.extend(std::iter::repeat_n("Gas the kikes!".to_string(), 6));
        texts.extend(std::iter::repeat_n("one two three four five six seven eight".to_string(), 100));
        texts.extend(std::iter::repeat_n("rare kike sentence".to_string(), 4));
        let lem = RuleLemmatizer::bundled();
        let c = extract_candidates(&texts, &lem, ExtractParams::default(), None);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].lemma_tokens, toks(&["gas", "the", "kike"]));
        assert_eq!(c[0].frequency, 6);
        assert_eq!(c[0].surface_example, "Gas the kikes!");
        assert_eq!(c[0].category, Category::Unlabeled);
    }

    #[test]
    fn candidates_count_sentences_not_posts() {
        let texts = ["a kike. a kike. a kike", "a kike. a kike"];
        let c = extract_candidates(texts, &RuleLemmatizer::bundled(), ExtractParams::default(), None);
        assert_eq!(c[0].frequency, 5);
    }

    #[test]
    fn multi_target_flag() {
        let texts = vec!["fuck jews and muslims"; 5];
        let sel = KeywordSelection::default_fixture();
        let c = extract_candidates(&texts, &RuleLemmatizer::bundled(), ExtractParams::default(), Some(&sel));
        assert!(c[0].multi_target);
        let texts = vec!["fuck jews"; 5];
        let c = extract_candidates(&texts, &RuleLemmatizer::bundled(), ExtractParams::default(), Some(&sel));
        assert!(!c[0].multi_target);
    }

    #[test]
    fn match_examples() {
        let lem = RuleLemmatizer::bundled();
        let gas = labeled(&["gas", "the", "kike"], Category::Antisemitic);
        let m = match_phrases(&[post("1", "Gas the kikes!!")], std::slice::from_ref(&gas), &lem).unwrap();
        assert_eq!(m.len(), 1);
        let m = match_phrases(&[post("2", "nice weather today")], std::slice::from_ref(&gas), &lem).unwrap();
        assert!(m.is_empty());
        let ak = labeled(&["a", "kike"], Category::Antisemitic);
        let m = match_phrases(&[post("3", "a kike a kike")], &[ak], &lem).unwrap();
        let offsets: Vec<usize> = m.iter().map(|x| x.token_offset).collect();
        assert_eq!(offsets, [0, 2]);
    }

    #[test]
    fn match_rejects_unlabeled() {
        let p = labeled(&["a"], Category::Irrelevant);
        assert!(matches!(
            match_phrases(&[], &[p], &RuleLemmatizer::bundled()),
            Err(PhraseError::UnlabeledPhrase(_))
        ));
    }

    #[test]
    fn phrases_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let mut p = labeled(&["gas", "the", "kike"], Category::Antisemitic);
        p.surface_example = "Gas the, \"kikes\"".into();
        write_phrases(File::create(&path).unwrap(), std::slice::from_ref(&p)).unwrap();
        assert_eq!(read_phrases(&path).unwrap(), vec![p]);
    }

    fn sentence_strategy() -> impl Strategy<Value = String> {
        prop::collection::vec(
            prop::sample::select(vec!["gas", "the", "kikes", "muslims", "are", "bad", "mr.", "jews", "kill"]),
            1..5,
        )
        .prop_map(|w| w.join(" "))
        .prop_flat_map(|s| prop::sample::select(vec![".", "!", "?", ""]).prop_map(move |p| format!("{s}{p}")))
    }

    proptest! {
        #[test]
        fn candidates_invariant_under_post_order(
            posts in prop::collection::vec(prop::collection::vec(sentence_strategy(), 1..3).prop_map(|v| v.join(" ")), 1..40),
            seed in any::<u64>(),
        ) {
            let lem = RuleLemmatizer::bundled();
            let params = ExtractParams { min_freq: 2, max_words: 7 };
            let a = extract_candidates(&posts, &lem, params, None);
            let mut shuffled = posts.clone();
            let n = shuffled.len();
            for i in 0..n {
                let j = ((seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64)) % n as u64) as usize;
                shuffled.swap(i, j);
            }
            let b = extract_candidates(&shuffled, &lem, params, None);
            prop_assert_eq!(&a, &b);

            for c in &a {
                // surface reproduces lemmas
                let again = lemmatized_sentences(&clean_text(&c.surface_example), &lem);
                prop_assert_eq!(again.len(), 1);
                prop_assert_eq!(&again[0], &c.lemma_tokens);
            }

            let labeled: Vec<Phrase> = a.iter().cloned().map(|mut p| { p.category = Category::Antisemitic; p }).collect();
            let source: Vec<Post> = posts.iter().enumerate().map(|(i, t)| post(&i.to_string(), t)).collect();
            let matches = match_phrases(&source, &labeled, &lem).unwrap();
            for p in &labeled {
                let n = matches.iter().filter(|m| m.phrase_id == p.phrase_id).count() as u64;
                prop_assert!(n >= p.frequency);
            }
        }
    }
}
