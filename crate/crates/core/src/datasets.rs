//! Final textual and visual datasets per target category.
//!
//! Posts (textual) and unique images (visual, one item per exact pHash
//! group) reached by phrases of both categories are excluded before
//! anything is counted.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{ImageRecord, Post};
use crate::embedcore::SimilarityHit;
use crate::phash::{HashRecord, PHash64};
use crate::phrasemine::{Phrase, PhraseMatch};
use crate::Category;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("match or hit references phrase {0} which has no target label")]
    UnlabeledPhrase(String),
    #[error("hit references image {0} which has no pHash")]
    UnhashedImage(String),
    #[error("image {0} has no hits")]
    NoHits(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Textual,
    Visual,
}

/// One manifest line: a phrase (textual) or a unique-hash image (visual).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub item_id: String,
    /// Smallest member post id (textual) or storage path of the smallest
    /// member image id (visual); empty when nothing links to it.
    pub representative: String,
    pub top_phrase: String,
    pub cosine: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HateDataset {
    pub modality: Modality,
    pub category: Category,
    pub item_ids: BTreeSet<String>,
    pub post_ids: BTreeSet<String>,
    pub rows: Vec<ManifestRow>,
}

impl HateDataset {
    fn new(modality: Modality, category: Category) -> Self {
        HateDataset { modality, category, item_ids: BTreeSet::new(), post_ids: BTreeSet::new(), rows: Vec::new() }
    }

    pub fn item_count(&self) -> usize {
        self.item_ids.len()
    }

    pub fn post_count(&self) -> usize {
        self.post_ids.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Build {
    pub antisemitic: HateDataset,
    pub islamophobic: HateDataset,
    /// Excluded posts (textual) or excluded pHash groups (visual).
    pub excluded: BTreeSet<String>,
    /// Matched posts (textual) or hit unique images (visual) before exclusion.
    pub total: usize,
}

impl Build {
    pub fn get(&self, c: Category) -> &HateDataset {
        match c {
            Category::Islamophobic => &self.islamophobic,
            _ => &self.antisemitic,
        }
    }

    fn get_mut(&mut self, c: Category) -> &mut HateDataset {
        match c {
            Category::Islamophobic => &mut self.islamophobic,
            _ => &mut self.antisemitic,
        }
    }
}

fn phrase_index(phrases: &[Phrase]) -> HashMap<&str, &Phrase> {
    phrases.iter().filter(|p| p.category.is_target()).map(|p| (p.phrase_id.as_str(), p)).collect()
}

/// Textual datasets: items are all target-labeled phrases of a category,
/// posts are matched posts whose phrases all share that category.
pub fn build_textual(matches: &[PhraseMatch], phrases: &[Phrase]) -> Result<Build, DatasetError> {
    let index = phrase_index(phrases);
    let mut per_post: BTreeMap<&str, BTreeSet<Category>> = BTreeMap::new();
    let mut post_phrases: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for m in matches {
        let p = index.get(m.phrase_id.as_str()).ok_or_else(|| DatasetError::UnlabeledPhrase(m.phrase_id.clone()))?;
        per_post.entry(&m.post_id).or_default().insert(p.category);
        post_phrases.entry(&m.phrase_id).or_default().insert(&m.post_id);
    }
    let mut build = Build {
        antisemitic: HateDataset::new(Modality::Textual, Category::Antisemitic),
        islamophobic: HateDataset::new(Modality::Textual, Category::Islamophobic),
        excluded: BTreeSet::new(),
        total: per_post.len(),
    };
    for (post, cats) in &per_post {
        if cats.len() > 1 {
            build.excluded.insert(post.to_string());
        } else {
            let c = *cats.iter().next().expect("non-empty");
            build.get_mut(c).post_ids.insert(post.to_string());
        }
    }
    let mut labeled: Vec<&&Phrase> = index.values().collect();
    labeled.sort_by(|a, b| a.phrase_id.cmp(&b.phrase_id));
    for p in labeled {
        let representative = post_phrases
            .get(p.phrase_id.as_str())
            .and_then(|posts| posts.iter().find(|q| !build.excluded.contains(**q)))
            .map(|s| s.to_string())
            .unwrap_or_default();
        let ds = build.get_mut(p.category);
        ds.item_ids.insert(p.phrase_id.clone());
        ds.rows.push(ManifestRow {
            item_id: p.phrase_id.clone(),
            representative,
            top_phrase: p.lemmas_joined(),
            cosine: None,
        });
    }
    Ok(build)
}

/// Highest-cosine hit of `image_id`; ties go to the smaller phrase id.
pub fn most_related_phrase<'a>(image_id: &str, hits: &'a [SimilarityHit]) -> Result<&'a SimilarityHit, DatasetError> {
    best_hit(hits.iter().filter(|h| h.image_id == image_id)).ok_or_else(|| DatasetError::NoHits(image_id.to_string()))
}

fn best_hit<'a>(hits: impl Iterator<Item = &'a SimilarityHit>) -> Option<&'a SimilarityHit> {
    hits.min_by(|a, b| b.cosine.total_cmp(&a.cosine).then_with(|| a.phrase_id.cmp(&b.phrase_id)))
}

/// Posts that carry each image.
pub fn image_posts<'a, I: IntoIterator<Item = &'a Post>>(posts: I) -> BTreeMap<String, BTreeSet<String>> {
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for p in posts {
        if let Some(img) = &p.image_ref {
            out.entry(img.0.clone()).or_default().insert(p.post_id.clone());
        }
    }
    out
}

/// Visual datasets over unique images (exact pHash groups).
pub fn build_visual(
    hits: &[SimilarityHit],
    phrases: &[Phrase],
    hashes: &[HashRecord],
    images: &[ImageRecord],
    posts_by_image: &BTreeMap<String, BTreeSet<String>>,
) -> Result<Build, DatasetError> {
    let index = phrase_index(phrases);
    let hash_of: HashMap<&str, PHash64> = hashes.iter().map(|h| (h.image_id.as_str(), h.phash_hex)).collect();
    let path_of: HashMap<&str, &str> = images.iter().map(|r| (r.image_id.as_str(), r.storage_path.as_str())).collect();
    let mut members: BTreeMap<PHash64, BTreeSet<&str>> = BTreeMap::new();
    for h in hashes {
        members.entry(h.phash_hex).or_default().insert(&h.image_id);
    }
    let mut group_cats: BTreeMap<PHash64, BTreeSet<Category>> = BTreeMap::new();
    let mut group_hits: BTreeMap<PHash64, Vec<&SimilarityHit>> = BTreeMap::new();
    for h in hits {
        let p = index.get(h.phrase_id.as_str()).ok_or_else(|| DatasetError::UnlabeledPhrase(h.phrase_id.clone()))?;
        let g = *hash_of.get(h.image_id.as_str()).ok_or_else(|| DatasetError::UnhashedImage(h.image_id.clone()))?;
        group_cats.entry(g).or_default().insert(p.category);
        group_hits.entry(g).or_default().push(h);
    }
    let mut build = Build {
        antisemitic: HateDataset::new(Modality::Visual, Category::Antisemitic),
        islamophobic: HateDataset::new(Modality::Visual, Category::Islamophobic),
        excluded: BTreeSet::new(),
        total: group_cats.len(),
    };
    for (g, cats) in &group_cats {
        if cats.len() > 1 {
            build.excluded.insert(g.to_hex());
            continue;
        }
        let c = *cats.iter().next().expect("non-empty");
        let imgs = &members[g];
        let top = best_hit(group_hits[g].iter().copied()).expect("group has hits");
        let first = imgs.iter().next().expect("non-empty group");
        let ds = build.get_mut(c);
        ds.item_ids.insert(g.to_hex());
        for img in imgs {
            if let Some(ps) = posts_by_image.get(*img) {
                ds.post_ids.extend(ps.iter().cloned());
            }
        }
        ds.rows.push(ManifestRow {
            item_id: g.to_hex(),
            representative: path_of.get(first).map(|s| s.to_string()).unwrap_or_default(),
            top_phrase: top.phrase_id.clone(),
            cosine: Some(top.cosine),
        });
    }
    Ok(build)
}

/// The four Table-1 cells per category plus exclusions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub category: String,
    pub phrases: usize,
    pub textual_posts: usize,
    pub images: usize,
    pub visual_posts: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountsSummary {
    pub rows: Vec<CategoryCounts>,
    pub excluded_posts: usize,
    pub excluded_images: usize,
}

pub fn counts(textual: &Build, visual: &Build) -> CountsSummary {
    CountsSummary {
        rows: Category::TARGETS
            .iter()
            .map(|&c| CategoryCounts {
                category: c.to_string(),
                phrases: textual.get(c).item_count(),
                textual_posts: textual.get(c).post_count(),
                images: visual.get(c).item_count(),
                visual_posts: visual.get(c).post_count(),
            })
            .collect(),
        excluded_posts: textual.excluded.len(),
        excluded_images: visual.excluded.len(),
    }
}

pub fn write_manifest<W: Write>(out: W, ds: &HateDataset) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_writer(out);
    let rep = match ds.modality {
        Modality::Textual => "post_id",
        Modality::Visual => "storage_path",
    };
    w.write_record(["item_id", rep, "top_phrase", "cosine"])?;
    for r in &ds.rows {
        let cos = r.cosine.map(|c| format!("{c:.6}")).unwrap_or_default();
        w.write_record([r.item_id.as_str(), r.representative.as_str(), r.top_phrase.as_str(), cos.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_posts<W: Write>(out: W, ds: &HateDataset) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["post_id"])?;
    for p in &ds.post_ids {
        w.write_record([p])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_counts<W: Write>(out: W, c: &CountsSummary) -> Result<(), DatasetError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["category", "phrases", "textual_posts", "images", "visual_posts"])?;
    for r in &c.rows {
        w.serialize(r)?;
    }
    w.write_record(["excluded", "", &c.excluded_posts.to_string(), &c.excluded_images.to_string(), ""])?;
    w.flush()?;
    Ok(())
}

pub fn read_post_ids(path: &Path) -> Result<BTreeSet<String>, DatasetError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = BTreeSet::new();
    for rec in r.records() {
        out.insert(rec?[0].to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ImageId;

    fn phrase(id: &str, c: Category) -> Phrase {
        Phrase {
            phrase_id: id.into(),
            lemma_tokens: vec![id.into()],
            surface_example: id.into(),
            frequency: 5,
            category: c,
            multi_target: false,
        }
    }

    fn m(post: &str, phrase: &str) -> PhraseMatch {
        PhraseMatch { post_id: post.into(), phrase_id: phrase.into(), sentence_index: 0, token_offset: 0 }
    }

    fn phrases() -> Vec<Phrase> {
        vec![
            phrase("pa1", Category::Antisemitic),
            phrase("pa2", Category::Antisemitic),
            phrase("pi1", Category::Islamophobic),
            phrase("px", Category::Irrelevant),
        ]
    }

    #[test]
    fn textual_exclusion() {
        let matches = [m("1", "pa1"), m("1", "pa2"), m("2", "pa1"), m("2", "pi1"), m("3", "pi1")];
        let b = build_textual(&matches, &phrases()).unwrap();
        assert_eq!(b.antisemitic.post_ids, BTreeSet::from(["1".to_string()]));
        assert_eq!(b.islamophobic.post_ids, BTreeSet::from(["3".to_string()]));
        assert_eq!(b.excluded, BTreeSet::from(["2".to_string()]));
        assert_eq!(b.antisemitic.item_count(), 2);
        assert_eq!(b.total, b.antisemitic.post_count() + b.islamophobic.post_count() + b.excluded.len());
        assert!(b.antisemitic.post_ids.is_disjoint(&b.islamophobic.post_ids));
        assert!(matches!(build_textual(&[m("1", "px")], &phrases()), Err(DatasetError::UnlabeledPhrase(_))));
        let empty = build_textual(&[], &phrases()).unwrap();
        assert_eq!(empty.antisemitic.post_count() + empty.islamophobic.post_count(), 0);
    }

    fn hit(img: &str, phrase: &str, cosine: f64) -> SimilarityHit {
        SimilarityHit { image_id: img.into(), phrase_id: phrase.into(), cosine }
    }

    fn hr(img: &str, h: u64) -> HashRecord {
        HashRecord { image_id: img.into(), phash_hex: PHash64(h) }
    }

    fn img(id: &str) -> ImageRecord {
        ImageRecord { image_id: ImageId(id.into()), storage_path: format!("{id}.png"), byte_size: 1, width: None, height: None, phash: None }
    }

    #[test]
    fn visual_groups_and_posts() {
        let hashes = [hr("a", 1), hr("a2", 1), hr("b", 2), hr("c", 3)];
        let images: Vec<_> = ["a", "a2", "b", "c"].iter().map(|i| img(i)).collect();
        let hits = [hit("a", "pa1", 0.31), hit("a2", "pa2", 0.35), hit("b", "pi1", 0.4), hit("c", "pa1", 0.3), hit("c", "pi1", 0.5)];
        let posts = BTreeMap::from([
            ("a".to_string(), BTreeSet::from(["p1".to_string()])),
            ("a2".to_string(), BTreeSet::from(["p2".to_string()])),
            ("c".to_string(), BTreeSet::from(["p3".to_string()])),
        ]);
        let b = build_visual(&hits, &phrases(), &hashes, &images, &posts).unwrap();
        assert_eq!(b.antisemitic.item_count(), 1);
        assert_eq!(b.antisemitic.post_count(), 2);
        assert_eq!(b.antisemitic.rows[0].top_phrase, "pa2");
        assert_eq!(b.antisemitic.rows[0].representative, "a.png");
        assert_eq!(b.islamophobic.item_count(), 1);
        assert_eq!(b.islamophobic.post_count(), 0);
        assert_eq!(b.excluded, BTreeSet::from([PHash64(3).to_hex()]));
        assert_eq!(b.total, 3);
        assert!(matches!(
            build_visual(&[hit("zz", "pa1", 0.5)], &phrases(), &hashes, &images, &posts),
            Err(DatasetError::UnhashedImage(_))
        ));
    }

    #[test]
    fn most_related_rules() {
        let hits = [hit("i", "b", 0.31), hit("i", "c", 0.35), hit("j", "a", 0.9)];
        assert_eq!(most_related_phrase("i", &hits).unwrap().phrase_id, "c");
        assert_eq!(most_related_phrase("j", &hits).unwrap().phrase_id, "a");
        let tie = [hit("i", "z", 0.4), hit("i", "y", 0.4)];
        assert_eq!(most_related_phrase("i", &tie).unwrap().phrase_id, "y");
        assert!(most_related_phrase("k", &hits).is_err());
    }

    #[test]
    fn counts_layout() {
        let t = build_textual(&[m("1", "pa1"), m("2", "pi1")], &phrases()).unwrap();
        let v = build_visual(&[], &phrases(), &[], &[], &BTreeMap::new()).unwrap();
        let c = counts(&t, &v);
        assert_eq!(c.rows[0], CategoryCounts { category: "antisemitic".into(), phrases: 2, textual_posts: 1, images: 0, visual_posts: 0 });
        let mut buf = Vec::new();
        write_counts(&mut buf, &c).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "category,phrases,textual_posts,images,visual_posts\nantisemitic,2,1,0,0\nislamophobic,1,1,0,0\nexcluded,,0,0,\n"
        );
    }
}
