//! Calibration of the similarity threshold against human labels.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::sha256_u64;
use crate::phrasemine::Phrase;
use crate::Category;

pub const DEFAULT_PER_RANGE: usize = 50;
pub const DEFAULT_RANGES: [[f64; 2]; 4] = [[0.0, 0.2], [0.2, 0.25], [0.25, 0.3], [0.3, 0.4]];

/// `0.00, 0.05, ..., 0.50`.
pub fn default_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 20.0).collect()
}

pub fn default_quota() -> BTreeMap<Category, usize> {
    BTreeMap::from([(Category::Antisemitic, 8), (Category::Islamophobic, 2)])
}

#[derive(Debug, thiserror::Error)]
pub enum CalibrateError {
    #[error("category {category} has {available} phrases, quota asks for {wanted}")]
    InsufficientPhrases { category: Category, available: usize, wanted: usize },
    #[error("no cosine for labeled pair ({phrase_id}, {image_id})")]
    MissingCosine { phrase_id: String, image_id: String },
    #[error("empty sweep")]
    EmptySweep,
    #[error("bad ranges: {0}")]
    BadRanges(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Draws `quota[c]` phrases of each category `c` without replacement.
///
/// Candidates are ordered by phrase id before drawing, so the selection
/// depends only on the phrase set and the seed. Output is grouped by
/// category in quota order, each group sorted by phrase id.
pub fn sample_phrases(phrases: &[Phrase], quota: &BTreeMap<Category, usize>, seed: u64) -> Result<Vec<Phrase>, CalibrateError> {
    let mut out = Vec::new();
    for (&category, &wanted) in quota {
        let mut pool: Vec<&Phrase> = phrases.iter().filter(|p| p.category == category).collect();
        pool.sort_by(|a, b| a.phrase_id.cmp(&b.phrase_id));
        pool.dedup_by(|a, b| a.phrase_id == b.phrase_id);
        if pool.len() < wanted {
            return Err(CalibrateError::InsufficientPhrases { category, available: pool.len(), wanted });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ sha256_u64(category.as_str().as_bytes()));
        let mut picked: Vec<&Phrase> = index::sample(&mut rng, pool.len(), wanted).into_iter().map(|i| pool[i]).collect();
        picked.sort_by(|a, b| a.phrase_id.cmp(&b.phrase_id));
        out.extend(picked.into_iter().cloned());
    }
    Ok(out)
}

/// Half-open similarity ranges; the last one is closed above.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangePlan {
    pub ranges: Vec<[f64; 2]>,
}

impl Default for RangePlan {
    fn default() -> Self {
        RangePlan { ranges: DEFAULT_RANGES.to_vec() }
    }
}

impl RangePlan {
    pub fn new(ranges: Vec<[f64; 2]>) -> Result<Self, CalibrateError> {
        if ranges.is_empty() {
            return Err(CalibrateError::BadRanges("no ranges".into()));
        }
        for r in &ranges {
            if !(r[0] < r[1]) {
                return Err(CalibrateError::BadRanges(format!("[{}, {}] is empty", r[0], r[1])));
            }
        }
        for w in ranges.windows(2) {
            if w[1][0] < w[0][1] {
                return Err(CalibrateError::BadRanges("ranges overlap or are unordered".into()));
            }
        }
        Ok(RangePlan { ranges })
    }

    pub fn range_of(&self, cosine: f64) -> Option<usize> {
        let last = self.ranges.len() - 1;
        self.ranges.iter().enumerate().position(|(i, r)| {
            cosine >= r[0] && (cosine < r[1] || (i == last && cosine == r[1]))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub phrase_id: String,
    pub image_id: String,
    pub cosine: f64,
    pub range_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shortfall {
    pub range_index: usize,
    pub requested: usize,
    pub available: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StratifiedSample {
    pub phrase_id: String,
    pub entries: Vec<SampleEntry>,
    pub seed: u64,
    pub shortfalls: Vec<Shortfall>,
}

/// Uniform draws without replacement of `per_range` images from each range
/// of `plan`. Ranges with fewer candidates are taken whole and recorded as a
/// shortfall. Entries come out ordered by range, then image id.
pub fn stratified_sample(phrase_id: &str, cosines: &[(String, f64)], plan: &RangePlan, per_range: usize, seed: u64) -> StratifiedSample {
    let mut buckets: Vec<Vec<(&str, f64)>> = vec![Vec::new(); plan.ranges.len()];
    for (id, c) in cosines {
        if let Some(r) = plan.range_of(*c) {
            buckets[r].push((id, *c));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ sha256_u64(phrase_id.as_bytes()));
    let mut entries = Vec::new();
    let mut shortfalls = Vec::new();
    for (r, mut bucket) in buckets.into_iter().enumerate() {
        bucket.sort_by(|a, b| a.0.cmp(b.0));
        bucket.dedup_by(|a, b| a.0 == b.0);
        let chosen: Vec<usize> = if bucket.len() <= per_range {
            if bucket.len() < per_range {
                shortfalls.push(Shortfall { range_index: r, requested: per_range, available: bucket.len() });
            }
            (0..bucket.len()).collect()
        } else {
            let mut c = index::sample(&mut rng, bucket.len(), per_range).into_vec();
            c.sort_unstable();
            c
        };
        entries.extend(chosen.into_iter().map(|i| SampleEntry {
            phrase_id: phrase_id.to_string(),
            image_id: bucket[i].0.to_string(),
            cosine: bucket[i].1,
            range_index: r,
        }));
    }
    StratifiedSample { phrase_id: phrase_id.to_string(), entries, seed, shortfalls }
}

/// One human judgment of a (phrase, image) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairLabel {
    pub phrase_id: String,
    pub image_id: String,
    pub relevant: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn n(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Which ratios had a zero denominator and were reported as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Undefined {
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
}

fn ratio(num: f64, den: f64) -> (f64, bool) {
    if den == 0.0 {
        (0.0, true)
    } else {
        (num / den, false)
    }
}

pub fn metrics(c: &Confusion) -> (Metrics, Undefined) {
    let (accuracy, _) = ratio((c.tp + c.tn) as f64, c.n() as f64);
    let (precision, up) = ratio(c.tp as f64, (c.tp + c.fp) as f64);
    let (recall, ur) = ratio(c.tp as f64, (c.tp + c.fn_) as f64);
    let (f1, uf) = ratio(2.0 * precision * recall, precision + recall);
    (Metrics { accuracy, precision, recall, f1 }, Undefined { precision: up, recall: ur, f1: uf })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseMetrics {
    pub phrase_id: String,
    pub confusion: Confusion,
    pub metrics: Metrics,
    pub undefined: Undefined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub threshold: f64,
    pub per_phrase: Vec<PhraseMetrics>,
    pub mean: Metrics,
    pub std: Metrics,
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

fn summarize(per: &[PhraseMetrics]) -> (Metrics, Metrics) {
    let col = |f: fn(&Metrics) -> f64| -> (f64, f64) {
        let v: Vec<f64> = per.iter().map(|p| f(&p.metrics)).collect();
        let mean = if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        (mean, sample_std(&v))
    };
    let (am, asd) = col(|m| m.accuracy);
    let (pm, psd) = col(|m| m.precision);
    let (rm, rsd) = col(|m| m.recall);
    let (fm, fsd) = col(|m| m.f1);
    (
        Metrics { accuracy: am, precision: pm, recall: rm, f1: fm },
        Metrics { accuracy: asd, precision: psd, recall: rsd, f1: fsd },
    )
}

/// Per-phrase metrics at each threshold with prediction `cosine >= t`.
pub fn sweep(
    labels: &[PairLabel],
    cosines: &HashMap<(String, String), f64>,
    thresholds: &[f64],
) -> Result<Vec<ThresholdMetrics>, CalibrateError> {
    let mut by_phrase: BTreeMap<&str, Vec<(f64, bool)>> = BTreeMap::new();
    for l in labels {
        let key = (l.phrase_id.clone(), l.image_id.clone());
        let c = *cosines.get(&key).ok_or_else(|| CalibrateError::MissingCosine {
            phrase_id: l.phrase_id.clone(),
            image_id: l.image_id.clone(),
        })?;
        by_phrase.entry(&l.phrase_id).or_default().push((c, l.relevant));
    }
    Ok(thresholds
        .iter()
        .map(|&t| {
            let per_phrase: Vec<PhraseMetrics> = by_phrase
                .iter()
                .map(|(pid, pairs)| {
                    let mut c = Confusion::default();
                    for &(cos, relevant) in pairs {
                        match (cos >= t, relevant) {
                            (true, true) => c.tp += 1,
                            (true, false) => c.fp += 1,
                            (false, false) => c.tn += 1,
                            (false, true) => c.fn_ += 1,
                        }
                    }
                    let (metrics, undefined) = metrics(&c);
                    PhraseMetrics { phrase_id: pid.to_string(), confusion: c, metrics, undefined }
                })
                .collect();
            let (mean, std) = summarize(&per_phrase);
            ThresholdMetrics { threshold: t, per_phrase, mean, std }
        })
        .collect())
}

/// Threshold with the highest mean F1; the lowest such threshold on ties.
pub fn select_threshold(sweep: &[ThresholdMetrics]) -> Result<f64, CalibrateError> {
    let mut best: Option<&ThresholdMetrics> = None;
    for m in sweep {
        best = match best {
            None => Some(m),
            Some(b) if m.mean.f1 > b.mean.f1 || (m.mean.f1 == b.mean.f1 && m.threshold < b.threshold) => Some(m),
            keep => keep,
        };
    }
    best.map(|m| m.threshold).ok_or(CalibrateError::EmptySweep)
}

pub fn write_samples<W: Write>(out: W, samples: &[StratifiedSample]) -> Result<(), CalibrateError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["phrase_id", "image_id", "cosine", "range_index"])?;
    for s in samples {
        for e in &s.entries {
            w.write_record([&e.phrase_id, &e.image_id, &format!("{:.6}", e.cosine), &e.range_index.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<SampleEntry>, CalibrateError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn write_sweep<W: Write>(out: W, sweep: &[ThresholdMetrics]) -> Result<(), CalibrateError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["threshold", "phrase_id", "accuracy", "precision", "recall", "f1"])?;
    for t in sweep {
        for p in &t.per_phrase {
            let m = &p.metrics;
            w.write_record([
                format!("{:.2}", t.threshold),
                p.phrase_id.clone(),
                format!("{:.6}", m.accuracy),
                format!("{:.6}", m.precision),
                format!("{:.6}", m.recall),
                format!("{:.6}", m.f1),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep_summary<W: Write>(out: W, sweep: &[ThresholdMetrics]) -> Result<(), CalibrateError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "threshold", "mean_accuracy", "std_accuracy", "mean_precision", "std_precision", "mean_recall", "std_recall",
        "mean_f1", "std_f1",
    ])?;
    for t in sweep {
        let (m, s) = (&t.mean, &t.std);
        let row: Vec<String> = std::iter::once(format!("{:.2}", t.threshold))
            .chain(
                [m.accuracy, s.accuracy, m.precision, s.precision, m.recall, s.recall, m.f1, s.f1]
                    .iter()
                    .map(|v| format!("{v:.6}")),
            )
            .collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Pairs of `samples` lacking a label in `labeled`.
pub fn unlabeled<'a>(samples: &'a [SampleEntry], labeled: &BTreeSet<(String, String)>) -> Vec<&'a SampleEntry> {
    samples
        .iter()
        .filter(|e| !labeled.contains(&(e.phrase_id.clone(), e.image_id.clone())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn phrase(id: &str, category: Category) -> Phrase {
        Phrase {
            phrase_id: id.into(),
            lemma_tokens: vec![id.into()],
            surface_example: id.into(),
            frequency: 5,
            category,
            multi_target: false,
        }
    }

    fn pool() -> Vec<Phrase> {
        let mut v: Vec<Phrase> = (0..30).map(|i| phrase(&format!("a{i:02}"), Category::Antisemitic)).collect();
        v.extend((0..5).map(|i| phrase(&format!("i{i}"), Category::Islamophobic)));
        v
    }

    #[test]
    fn phrase_quota_is_exact_and_seeded() {
        let picked = sample_phrases(&pool(), &default_quota(), 42).unwrap();
        assert_eq!(picked.len(), 10);
        assert_eq!(picked.iter().filter(|p| p.category == Category::Antisemitic).count(), 8);
        assert_eq!(picked.iter().filter(|p| p.category == Category::Islamophobic).count(), 2);
        assert_eq!(picked, sample_phrases(&pool(), &default_quota(), 42).unwrap());
        let mut shuffled = pool();
        shuffled.reverse();
        assert_eq!(picked, sample_phrases(&shuffled, &default_quota(), 42).unwrap());
        let greedy = BTreeMap::from([(Category::Islamophobic, 6)]);
        assert!(matches!(sample_phrases(&pool(), &greedy, 1), Err(CalibrateError::InsufficientPhrases { .. })));
    }

    fn cosines(n_per: &[usize]) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (r, &n) in n_per.iter().enumerate() {
            let [lo, hi] = DEFAULT_RANGES[r];
            for i in 0..n {
                out.push((format!("r{r}_{i:04}"), lo + (hi - lo) * i as f64 / n as f64));
            }
        }
        out
    }

    #[test]
    fn defaults_give_two_hundred() {
        let s = stratified_sample("p", &cosines(&[400, 300, 200, 100]), &RangePlan::default(), DEFAULT_PER_RANGE, 9);
        assert_eq!(s.entries.len(), 200);
        assert!(s.shortfalls.is_empty());
        for r in 0..4 {
            assert_eq!(s.entries.iter().filter(|e| e.range_index == r).count(), 50);
        }
    }

    #[test]
    fn shortfall_takes_all() {
        let s = stratified_sample("p", &cosines(&[100, 30, 100, 100]), &RangePlan::default(), 50, 9);
        assert_eq!(s.entries.iter().filter(|e| e.range_index == 1).count(), 30);
        assert_eq!(s.shortfalls, [Shortfall { range_index: 1, requested: 50, available: 30 }]);
        assert_eq!(s, stratified_sample("p", &cosines(&[100, 30, 100, 100]), &RangePlan::default(), 50, 9));
    }

    #[test]
    fn range_bounds() {
        let plan = RangePlan::default();
        assert_eq!(plan.range_of(0.0), Some(0));
        assert_eq!(plan.range_of(0.2), Some(1));
        assert_eq!(plan.range_of(0.3), Some(3));
        assert_eq!(plan.range_of(0.4), Some(3));
        assert_eq!(plan.range_of(0.41), None);
        assert_eq!(plan.range_of(-0.1), None);
        assert!(RangePlan::new(vec![[0.3, 0.2]]).is_err());
        assert!(RangePlan::new(vec![[0.0, 0.3], [0.2, 0.4]]).is_err());
    }

    fn fixture() -> (Vec<PairLabel>, HashMap<(String, String), f64>) {
        let data = [(0.1, false), (0.2, false), (0.35, true), (0.4, true)];
        let mut labels = Vec::new();
        let mut cos = HashMap::new();
        for (i, (c, rel)) in data.iter().enumerate() {
            let img = format!("img{i}");
            labels.push(PairLabel { phrase_id: "p".into(), image_id: img.clone(), relevant: *rel });
            cos.insert(("p".to_string(), img), *c);
        }
        (labels, cos)
    }

    #[test]
    fn sweep_examples() {
        let (labels, cos) = fixture();
        let s = sweep(&labels, &cos, &[0.3, 0.38]).unwrap();
        let m = s[0].per_phrase[0].metrics;
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
        let c = s[1].per_phrase[0].confusion;
        assert_eq!((c.tp, c.fn_, c.tn, c.fp), (1, 1, 2, 0));
        let m = s[1].per_phrase[0].metrics;
        assert_eq!((m.accuracy, m.precision, m.recall), (0.75, 1.0, 0.5));
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        let all_pos: Vec<PairLabel> = labels.iter().map(|l| PairLabel { relevant: true, ..l.clone() }).collect();
        let low = sweep(&all_pos, &cos, &[0.0]).unwrap();
        assert_eq!(low[0].per_phrase[0].metrics.recall, 1.0);
    }

    #[test]
    fn undefined_ratios_are_flagged_zero() {
        let (m, u) = metrics(&Confusion { tp: 0, fp: 0, tn: 3, fn_: 0 });
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (0.0, 0.0, 0.0, 1.0));
        assert!(u.precision && u.recall && u.f1);
    }

    #[test]
    fn sweep_requires_cosines() {
        let (labels, _) = fixture();
        assert!(matches!(sweep(&labels, &HashMap::new(), &[0.3]), Err(CalibrateError::MissingCosine { .. })));
    }

    fn synthetic(threshold: f64, f1: f64) -> ThresholdMetrics {
        ThresholdMetrics {
            threshold,
            per_phrase: Vec::new(),
            mean: Metrics { f1, ..Default::default() },
            std: Metrics::default(),
        }
    }

    #[test]
    fn selection_rules() {
        assert_eq!(select_threshold(&[synthetic(0.25, 0.1)]).unwrap(), 0.25);
        let peak: Vec<_> = default_grid().into_iter().map(|t| synthetic(t, 1.0 - (t - 0.3).abs())).collect();
        assert_eq!(select_threshold(&peak).unwrap(), 0.3);
        assert_eq!(select_threshold(&[synthetic(0.30, 0.5), synthetic(0.28, 0.5)]).unwrap(), 0.28);
        assert!(select_threshold(&[]).is_err());
    }

    #[test]
    fn grid_hits_default_threshold_exactly() {
        let g = default_grid();
        assert_eq!(g.len(), 11);
        assert!(g.contains(&0.3));
    }

    #[test]
    fn std_is_sample_std() {
        assert_eq!(sample_std(&[1.0]), 0.0);
        assert!((sample_std(&[1.0, 3.0]) - 2f64.sqrt()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn recall_non_increasing(pairs in prop::collection::vec((0.0f64..0.5, any::<bool>()), 1..60)) {
            let mut labels = Vec::new();
            let mut cos = HashMap::new();
            for (i, (c, rel)) in pairs.iter().enumerate() {
                let img = format!("i{i}");
                labels.push(PairLabel { phrase_id: format!("p{}", i % 3), image_id: img.clone(), relevant: *rel });
                cos.insert((format!("p{}", i % 3), img), *c);
            }
            let s = sweep(&labels, &cos, &default_grid()).unwrap();
            for w in s.windows(2) {
                for (a, b) in w[0].per_phrase.iter().zip(&w[1].per_phrase) {
                    prop_assert!(b.metrics.recall <= a.metrics.recall);
                }
            }
        }

        #[test]
        fn samples_disjoint_and_in_range(n in prop::collection::vec(0usize..80, 4), seed in any::<u64>()) {
            let plan = RangePlan::default();
            let s = stratified_sample("p", &cosines(&n), &plan, 50, seed);
            let ids: BTreeSet<_> = s.entries.iter().map(|e| &e.image_id).collect();
            prop_assert_eq!(ids.len(), s.entries.len());
            for e in &s.entries {
                prop_assert_eq!(plan.range_of(e.cosine), Some(e.range_index));
            }
        }
    }
}
