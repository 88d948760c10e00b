//! 64-bit DCT perceptual hashes.
//!
//! Pipeline: Rec. 601 luma, separable triangle (bilinear) resample to
//! 32x32 in f64, unnormalized 2-D DCT-II, top-left 8x8 block, bit set iff
//! the coefficient is strictly greater than the median of all 64 block
//! values (DC included). Bits are packed row-major, MSB first: coefficient
//! (0,0) is bit 63, so the hex digits read in row order.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use image::DynamicImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::ImageRecord;

pub const RESIZE: usize = 32;
pub const BLOCK: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum PhashError {
    #[error("cannot decode {id}: {reason}")]
    Decode { id: String, reason: String },
    #[error("empty raster")]
    EmptyRaster,
    #[error("bad hash {0:?}")]
    BadHex(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct PHash64(pub u64);

impl PHash64 {
    pub fn hamming(self, other: PHash64) -> u32 {
        (self.0 ^ other.0).count_ones()
    }

    /// Bit for block coefficient `(row, col)`.
    pub fn bit(self, row: usize, col: usize) -> bool {
        self.0 >> (63 - (row * BLOCK + col)) & 1 == 1
    }

    pub fn to_hex(self) -> String {
        format!("{:016x}", self.0)
    }
}

impl fmt::Display for PHash64 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl FromStr for PHash64 {
    type Err = PhashError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 16 || !s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
            return Err(PhashError::BadHex(s.to_string()));
        }
        u64::from_str_radix(s, 16).map(PHash64).map_err(|_| PhashError::BadHex(s.to_string()))
    }
}

impl Serialize for PHash64 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for PHash64 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn hamming(a: PHash64, b: PHash64) -> u32 {
    a.hamming(b)
}

/// Row-major luminance plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Luma {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Luma {
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Luma { width, height, data }
    }

    /// Rec. 601 luma of the RGB channels; alpha is ignored.
    pub fn from_image(img: &DynamicImage) -> Self {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb
            .pixels()
            .map(|p| 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]))
            .collect();
        Luma { width: w as usize, height: h as usize, data }
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Per-output-sample source taps and normalized triangle weights.
fn triangle_taps(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    let support = scale.max(1.0);
    (0..dst)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).floor() as i64;
            let hi = (center + support).ceil() as i64;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for i in lo..=hi {
                let w = 1.0 - ((i as f64 - center) / support).abs();
                if w <= 0.0 {
                    continue;
                }
                let idx = i.clamp(0, src as i64 - 1) as usize;
                match taps.iter_mut().find(|(j, _)| *j == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Separable triangle-filter resample; antialiased when shrinking.
pub fn resize_bilinear(src: &Luma, width: usize, height: usize) -> Luma {
    let xt = triangle_taps(src.width, width);
    let yt = triangle_taps(src.height, height);
    let mut rows = vec![0.0; width * src.height];
    for y in 0..src.height {
        for (x, taps) in xt.iter().enumerate() {
            rows[y * width + x] = taps.iter().map(|&(i, w)| w * src.at(i, y)).sum();
        }
    }
    let mut out = vec![0.0; width * height];
    for (y, taps) in yt.iter().enumerate() {
        for x in 0..width {
            out[y * width + x] = taps.iter().map(|&(j, w)| w * rows[j * width + x]).sum();
        }
    }
    Luma { width, height, data: out }
}

fn cosine_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let n = RESIZE as f64;
        let mut t = Vec::with_capacity(RESIZE * RESIZE);
        for k in 0..RESIZE {
            for i in 0..RESIZE {
                t.push((std::f64::consts::PI * (2.0 * i as f64 + 1.0) * k as f64 / (2.0 * n)).cos());
            }
        }
        t
    })
}

/// Unnormalized 2-D DCT-II of a 32x32 plane:
/// `X[u][v] = sum_y sum_x f[y][x] cos(pi(2y+1)u/64) cos(pi(2x+1)v/64)`.
pub fn dct2d(block: &[f64]) -> Vec<f64> {
    assert_eq!(block.len(), RESIZE * RESIZE);
    let c = cosine_table();
    let mut tmp = vec![0.0; RESIZE * RESIZE];
    for y in 0..RESIZE {
        for v in 0..RESIZE {
            let mut acc = 0.0;
            for x in 0..RESIZE {
                acc += block[y * RESIZE + x] * c[v * RESIZE + x];
            }
            tmp[y * RESIZE + v] = acc;
        }
    }
    let mut out = vec![0.0; RESIZE * RESIZE];
    for u in 0..RESIZE {
        for v in 0..RESIZE {
            let mut acc = 0.0;
            for y in 0..RESIZE {
                acc += c[u * RESIZE + y] * tmp[y * RESIZE + v];
            }
            out[u * RESIZE + v] = acc;
        }
    }
    out
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Hash of an already-decoded luminance plane.
pub fn phash_luma(luma: &Luma) -> Result<PHash64, PhashError> {
    if luma.width == 0 || luma.height == 0 {
        return Err(PhashError::EmptyRaster);
    }
    let small = resize_bilinear(luma, RESIZE, RESIZE);
    let dct = dct2d(&small.data);
    let mut block = [0.0f64; BLOCK * BLOCK];
    for u in 0..BLOCK {
        for v in 0..BLOCK {
            block[u * BLOCK + v] = dct[u * RESIZE + v];
        }
    }
    // Rounding residue on flat inputs would otherwise decide bits.
    let scale = block.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    for x in &mut block {
        if x.abs() < 1e-9 * scale {
            *x = 0.0;
        }
    }
    let med = median(&block);
    let mut bits = 0u64;
    for (i, &x) in block.iter().enumerate() {
        if x > med {
            bits |= 1 << (63 - i);
        }
    }
    Ok(PHash64(bits))
}

pub fn compute_phash(img: &DynamicImage) -> Result<PHash64, PhashError> {
    phash_luma(&Luma::from_image(img))
}

pub fn phash_bytes(id: &str, bytes: &[u8]) -> Result<PHash64, PhashError> {
    let img = image::load_from_memory(bytes).map_err(|e| PhashError::Decode { id: id.to_string(), reason: e.to_string() })?;
    compute_phash(&img)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashRecord {
    pub image_id: String,
    pub phash_hex: PHash64,
}

#[derive(Debug, Default)]
pub struct HashRun {
    pub hashes: Vec<HashRecord>,
    pub failures: Vec<(String, String)>,
}

/// Hashes every manifest image in parallel; output sorted by image id.
pub fn hash_manifest(manifest: &[ImageRecord], image_root: &Path) -> HashRun {
    let results: Vec<(String, Result<PHash64, String>)> = manifest
        .par_iter()
        .map(|rec| {
            let id = rec.image_id.0.clone();
            let res = std::fs::read(image_root.join(&rec.storage_path))
                .map_err(|e| e.to_string())
                .and_then(|b| phash_bytes(&id, &b).map_err(|e| e.to_string()));
            (id, res)
        })
        .collect();
    let mut run = HashRun::default();
    for (id, res) in results {
        match res {
            Ok(h) => run.hashes.push(HashRecord { image_id: id, phash_hex: h }),
            Err(e) => run.failures.push((id, e)),
        }
    }
    run.hashes.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    run.failures.sort();
    run
}

/// Partition by exact hash equality; members sorted.
pub fn dedup_groups<'a, I>(records: I) -> BTreeMap<PHash64, Vec<String>>
where
    I: IntoIterator<Item = &'a HashRecord>,
{
    let mut groups: BTreeMap<PHash64, Vec<String>> = BTreeMap::new();
    for r in records {
        groups.entry(r.phash_hex).or_default().push(r.image_id.clone());
    }
    for g in groups.values_mut() {
        g.sort();
        g.dedup();
    }
    groups
}

/// Merges exact-hash groups whose hashes lie within `max_distance` of each
/// other (single linkage). Keys are the smallest hash of each cluster.
pub fn near_duplicate_groups(records: &[HashRecord], max_distance: u32) -> BTreeMap<PHash64, Vec<String>> {
    let exact: Vec<(PHash64, Vec<String>)> = dedup_groups(records).into_iter().collect();
    let mut parent: Vec<usize> = (0..exact.len()).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for i in 0..exact.len() {
        for j in i + 1..exact.len() {
            if exact[i].0.hamming(exact[j].0) <= max_distance {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut out: BTreeMap<PHash64, Vec<String>> = BTreeMap::new();
    for i in 0..exact.len() {
        let root = find(&mut parent, i);
        out.entry(exact[root].0).or_default().extend(exact[i].1.iter().cloned());
    }
    for g in out.values_mut() {
        g.sort();
    }
    out
}

pub fn write_hashes<W: Write>(out: W, hashes: &[HashRecord]) -> Result<(), PhashError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["image_id", "phash_hex"])?;
    for h in hashes {
        w.write_record([h.image_id.as_str(), h.phash_hex.to_hex().as_str()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_hashes(path: &Path) -> Result<Vec<HashRecord>, PhashError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}
