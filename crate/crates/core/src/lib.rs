//! # hatescope
//!
//! Mines targeted hateful phrases from a large post corpus and retrieves
//! matching imagery through a shared text/image embedding space.
//!
//! The crate is organised as one module per pipeline stage:
//!
//! 1. [`corpus`] ingests and normalizes posts and the image manifest.
//! 2. [`toxicity`] scores posts through a remote API or a lexicon mock and
//!    keeps the severe ones.
//! 3. [`textmine`] ranks terms of the toxic subset by TF-IDF so a curator can
//!    pick target keywords.
//! 4. [`phrasemine`] turns keyword-bearing toxic posts into lemmatized
//!    candidate phrases and later matches annotated phrases over the corpus.
//! 5. [`embedcore`] embeds phrases and images, persists unit vectors and
//!    scores every image against every phrase.
//! 6. [`calibrate`] draws stratified (phrase, image) samples and sweeps
//!    classification metrics over similarity thresholds.
//! 7. [`agreement`] stores annotator labels, computes Cohen's kappa and serves
//!    the annotation HTTP API.
//! 8. [`phash`] fingerprints images so uniqueness is counted per perceptual
//!    hash.
//! 9. [`datasets`] assembles the textual and visual datasets with dual-label
//!    exclusion.
//! 10. [`analytics`] computes CDFs, top-N tables, daily series, Kendall tau-b
//!     and peaks.
//!
//! [`config`] and [`pipeline`] wire the stages together behind a single
//! configuration file and a resumable run directory.

pub mod agreement;
pub mod analytics;
pub mod calibrate;
pub mod config;
pub mod corpus;
pub mod datasets;
pub mod digest;
pub mod embedcore;
pub mod phash;
pub mod phrasemine;
pub mod pipeline;
pub mod textmine;
pub mod toxicity;

mod category;

pub use category::Category;
