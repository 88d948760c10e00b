//! Descriptive statistics over built datasets.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::{DateTime, Days, NaiveDate};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

pub const DEFAULT_TOP_N: usize = 15;
pub const DEFAULT_PEAK_Z: f64 = 3.0;
/// Largest n for which the exact permutation p-value is enumerated.
pub const EXACT_P_MAX_N: usize = 10;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AnalyticsError {
    #[error("empty input")]
    Empty,
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 observations")]
    TooShort,
    #[error("correlation undefined: a series is constant")]
    Undefined,
    #[error("timestamp {0} outside the span")]
    OutOfSpan(i64),
    #[error("timestamp {0} not representable")]
    BadTimestamp(i64),
    #[error("exact p-value only for n <= {EXACT_P_MAX_N}")]
    TooLargeForExact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub value: u64,
    pub fraction: f64,
}

/// Empirical CDF: one point per distinct value, fraction of items `<= value`.
pub fn cdf(counts: &[u64]) -> Result<Vec<CdfPoint>, AnalyticsError> {
    if counts.is_empty() {
        return Err(AnalyticsError::Empty);
    }
    let mut freq: BTreeMap<u64, u64> = BTreeMap::new();
    for &c in counts {
        *freq.entry(c).or_default() += 1;
    }
    let n = counts.len() as f64;
    let mut seen = 0u64;
    Ok(freq
        .into_iter()
        .map(|(value, k)| {
            seen += k;
            CdfPoint { value, fraction: seen as f64 / n }
        })
        .collect())
}

/// Fraction of items with count `<= v`.
pub fn cdf_at(points: &[CdfPoint], v: u64) -> f64 {
    points.iter().take_while(|p| p.value <= v).last().map_or(0.0, |p| p.fraction)
}

/// Top `n` by descending count, ties by id.
pub fn top_n<S: AsRef<str> + Clone>(items: &[(S, u64)], n: usize) -> Vec<(S, u64)> {
    let mut v = items.to_vec();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.as_ref().cmp(b.0.as_ref())));
    v.truncate(n);
    v
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DailySeries {
    pub days: Vec<(NaiveDate, u64)>,
}

impl DailySeries {
    pub fn counts(&self) -> Vec<u64> {
        self.days.iter().map(|d| d.1).collect()
    }
}

pub fn utc_day(ts: i64) -> Result<NaiveDate, AnalyticsError> {
    DateTime::from_timestamp(ts, 0).map(|d| d.date_naive()).ok_or(AnalyticsError::BadTimestamp(ts))
}

/// Posts per UTC day over `span` (inclusive), zero-filled. Without a span,
/// the first to last observed day. Empty input without a span gives an
/// empty series.
pub fn daily_series(timestamps: &[i64], span: Option<(NaiveDate, NaiveDate)>) -> Result<DailySeries, AnalyticsError> {
    let mut per_day: BTreeMap<NaiveDate, u64> = BTreeMap::new();
    for &t in timestamps {
        *per_day.entry(utc_day(t)?).or_default() += 1;
    }
    let (first, last) = match span {
        Some(s) => s,
        None => match (per_day.keys().next(), per_day.keys().last()) {
            (Some(a), Some(b)) => (*a, *b),
            _ => return Ok(DailySeries { days: Vec::new() }),
        },
    };
    if let Some(&t) = timestamps.iter().find(|&&t| utc_day(t).is_ok_and(|d| d < first || d > last)) {
        return Err(AnalyticsError::OutOfSpan(t));
    }
    let mut days = Vec::new();
    let mut d = first;
    while d <= last {
        days.push((d, per_day.get(&d).copied().unwrap_or(0)));
        d = d.checked_add_days(Days::new(1)).expect("date in range");
    }
    Ok(DailySeries { days })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub tau_b: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Pair counts underlying tau-b. `ties_x`/`ties_y` include pairs tied in
/// both; `ties_xy` counts those joint ties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PairCounts {
    pub n0: u64,
    pub ties_x: u64,
    pub ties_y: u64,
    pub ties_xy: u64,
    pub discordant: u64,
}

impl PairCounts {
    /// `C - D`.
    pub fn s(&self) -> i64 {
        self.n0 as i64 - self.ties_x as i64 - self.ties_y as i64 + self.ties_xy as i64 - 2 * self.discordant as i64
    }

    pub fn tau_b(&self) -> Result<f64, AnalyticsError> {
        let a = self.n0 - self.ties_x;
        let b = self.n0 - self.ties_y;
        if a == 0 || b == 0 {
            return Err(AnalyticsError::Undefined);
        }
        Ok(self.s() as f64 / ((a as f64) * (b as f64)).sqrt())
    }
}

fn tie_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    run_lengths(sorted).map(|t| t * (t - 1) / 2).sum()
}

fn run_lengths<T: PartialEq>(sorted: &[T]) -> impl Iterator<Item = u64> + '_ {
    let mut i = 0;
    std::iter::from_fn(move || {
        if i >= sorted.len() {
            return None;
        }
        let start = i;
        while i < sorted.len() && sorted[i] == sorted[start] {
            i += 1;
        }
        Some((i - start) as u64)
    })
}

/// Counts inversions of `v` while merge-sorting it.
fn merge_count(v: &mut [i64], buf: &mut [i64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], &mut buf[..mid]) + merge_count(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    let k2 = k + mid - i;
    buf[k2..k2 + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// O(n log n) pair counts (Knight's algorithm).
pub fn pair_counts(x: &[i64], y: &[i64]) -> PairCounts {
    let n = x.len() as u64;
    let mut pairs: Vec<(i64, i64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_unstable();
    let xs: Vec<i64> = pairs.iter().map(|p| p.0).collect();
    let ties_x = tie_pairs(&xs);
    let ties_xy = tie_pairs(&pairs);
    let mut ys: Vec<i64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0; ys.len()];
    let discordant = merge_count(&mut ys, &mut buf);
    let ties_y = tie_pairs(&ys);
    PairCounts { n0: n * n.saturating_sub(1) / 2, ties_x, ties_y, ties_xy, discordant }
}

/// Tie-corrected variance of `S = C - D` under independence.
pub fn s_variance(x: &[i64], y: &[i64]) -> f64 {
    let n = x.len() as f64;
    let groups = |v: &[i64]| -> Vec<f64> {
        let mut s = v.to_vec();
        s.sort_unstable();
        run_lengths(&s).filter(|&t| t > 1).map(|t| t as f64).collect()
    };
    let (tx, ty) = (groups(x), groups(y));
    let v0 = n * (n - 1.0) * (2.0 * n + 5.0);
    let vt: f64 = tx.iter().map(|t| t * (t - 1.0) * (2.0 * t + 5.0)).sum();
    let vu: f64 = ty.iter().map(|u| u * (u - 1.0) * (2.0 * u + 5.0)).sum();
    let x1: f64 = tx.iter().map(|t| t * (t - 1.0)).sum();
    let y1: f64 = ty.iter().map(|u| u * (u - 1.0)).sum();
    let v1 = x1 * y1 / (2.0 * n * (n - 1.0));
    let v2 = if n > 2.0 {
        let x2: f64 = tx.iter().map(|t| t * (t - 1.0) * (t - 2.0)).sum();
        let y2: f64 = ty.iter().map(|u| u * (u - 1.0) * (u - 2.0)).sum();
        x2 * y2 / (9.0 * n * (n - 1.0) * (n - 2.0))
    } else {
        0.0
    };
    (v0 - vt - vu) / 18.0 + v1 + v2
}

fn check(x: &[i64], y: &[i64]) -> Result<(), AnalyticsError> {
    if x.len() != y.len() {
        return Err(AnalyticsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(AnalyticsError::TooShort);
    }
    Ok(())
}

/// Kendall's tau-b with a two-sided normal-approximation p-value.
pub fn kendall_tau_b(x: &[i64], y: &[i64]) -> Result<CorrelationResult, AnalyticsError> {
    check(x, y)?;
    let counts = pair_counts(x, y);
    let tau_b = counts.tau_b()?;
    let var = s_variance(x, y);
    let p_value = if var > 0.0 {
        let z = counts.s() as f64 / var.sqrt();
        erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
    } else {
        1.0
    };
    Ok(CorrelationResult { tau_b, p_value, n: x.len() })
}

/// Rank correlation of two real-valued series, via their dense ranks.
pub fn kendall_tau_b_f64(x: &[f64], y: &[f64]) -> Result<CorrelationResult, AnalyticsError> {
    kendall_tau_b(&dense_ranks(x), &dense_ranks(y))
}

fn dense_ranks(v: &[f64]) -> Vec<i64> {
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    v.iter().map(|x| sorted.partition_point(|s| s.total_cmp(x).is_lt()) as i64).collect()
}

/// Exact two-sided permutation p-value: share of orderings of `y` whose
/// `|S|` is at least the observed one.
pub fn exact_p_value(x: &[i64], y: &[i64]) -> Result<f64, AnalyticsError> {
    check(x, y)?;
    if x.len() > EXACT_P_MAX_N {
        return Err(AnalyticsError::TooLargeForExact);
    }
    let s_of = |y: &[i64]| -> i64 {
        let mut s = 0i64;
        for i in 0..x.len() {
            for j in i + 1..x.len() {
                s += (x[i] - x[j]).signum() * (y[i] - y[j]).signum();
            }
        }
        s
    };
    let observed = s_of(y).abs();
    let mut perm = y.to_vec();
    let n = perm.len();
    let mut c = vec![0usize; n];
    let (mut total, mut extreme) = (1u64, u64::from(s_of(&perm).abs() >= observed));
    // Heap's algorithm
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            total += 1;
            extreme += u64::from(s_of(&perm).abs() >= observed);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(extreme as f64 / total as f64)
}

/// Aligns two daily series on the union of their days, zero-filling gaps.
pub fn align(a: &DailySeries, b: &DailySeries) -> Vec<(NaiveDate, u64, u64)> {
    let mut m: BTreeMap<NaiveDate, (u64, u64)> = BTreeMap::new();
    for &(d, c) in &a.days {
        m.entry(d).or_default().0 = c;
    }
    for &(d, c) in &b.days {
        m.entry(d).or_default().1 = c;
    }
    m.into_iter().map(|(d, (x, y))| (d, x, y)).collect()
}

/// Days with count strictly above `mean + z * std` (population std),
/// descending by count then date.
pub fn detect_peaks(series: &DailySeries, z: f64) -> Vec<(NaiveDate, u64)> {
    let n = series.days.len();
    if n < 2 {
        return Vec::new();
    }
    let counts: Vec<f64> = series.days.iter().map(|d| d.1 as f64).collect();
    let mean = counts.iter().sum::<f64>() / n as f64;
    let std = (counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let cut = mean + z * std;
    let mut peaks: Vec<(NaiveDate, u64)> = series.days.iter().copied().filter(|d| d.1 as f64 > cut).collect();
    peaks.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    peaks
}

pub fn write_cdf<W: Write>(mut out: W, points: &[CdfPoint]) -> std::io::Result<()> {
    writeln!(out, "value,cumulative_fraction")?;
    for p in points {
        writeln!(out, "{},{:.6}", p.value, p.fraction)?;
    }
    Ok(())
}

pub fn write_daily<W: Write>(mut out: W, rows: &[(NaiveDate, u64, u64)], header: [&str; 2]) -> std::io::Result<()> {
    writeln!(out, "date,{},{}", header[0], header[1])?;
    for (d, a, b) in rows {
        writeln!(out, "{d},{a},{b}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(x: &[i64], y: &[i64]) -> (i64, i64, i64, i64) {
        let (mut c, mut d, mut tx, mut ty) = (0, 0, 0, 0);
        for i in 0..x.len() {
            for j in i + 1..x.len() {
                let (dx, dy) = ((x[i] - x[j]).signum(), (y[i] - y[j]).signum());
                match (dx, dy) {
                    (0, 0) => {}
                    (0, _) => tx += 1,
                    (_, 0) => ty += 1,
                    _ if dx == dy => c += 1,
                    _ => d += 1,
                }
            }
        }
        (c, d, tx, ty)
    }

    #[test]
    fn tau_examples() {
        assert_eq!(kendall_tau_b(&[1, 2, 3], &[1, 2, 3]).unwrap().tau_b, 1.0);
        assert_eq!(kendall_tau_b(&[1, 2, 3], &[3, 2, 1]).unwrap().tau_b, -1.0);
        let x = [1, 2, 2, 3];
        let y = [1, 2, 3, 3];
        assert_eq!(brute(&x, &y), (4, 0, 1, 1));
        assert!((kendall_tau_b(&x, &y).unwrap().tau_b - 0.8).abs() < 1e-15);
        assert_eq!(kendall_tau_b(&[1, 1, 1], &[1, 2, 3]), Err(AnalyticsError::Undefined));
        assert_eq!(kendall_tau_b(&[1], &[1]), Err(AnalyticsError::TooShort));
        assert_eq!(kendall_tau_b(&[1, 2], &[1]), Err(AnalyticsError::LengthMismatch(2, 1)));
    }

    #[test]
    fn p_value_no_ties_matches_textbook() {
        // n = 10, perfectly concordant: var = n(n-1)(2n+5)/18 = 125
        let x: Vec<i64> = (0..10).collect();
        let r = kendall_tau_b(&x, &x).unwrap();
        let z = 45.0 / 125f64.sqrt();
        assert!((r.p_value - erfc(z / std::f64::consts::SQRT_2)).abs() < 1e-15);
        assert!(r.p_value < 0.001);
        let exact = exact_p_value(&x, &x).unwrap();
        assert!((exact - 2.0 / 3_628_800.0).abs() < 1e-15);
    }

    #[test]
    fn exact_p_value_small() {
        let x = [1, 2, 3];
        assert!((exact_p_value(&x, &[1, 3, 2]).unwrap() - 1.0).abs() < 1e-12);
        assert!((exact_p_value(&x, &[1, 2, 3]).unwrap() - 2.0 / 6.0).abs() < 1e-12);
        assert_eq!(exact_p_value(&[0; 11], &[0; 11]), Err(AnalyticsError::TooLargeForExact));
    }

    #[test]
    fn cdf_examples() {
        let c = cdf(&[1, 1, 2]).unwrap();
        assert_eq!(c, vec![CdfPoint { value: 1, fraction: 2.0 / 3.0 }, CdfPoint { value: 2, fraction: 1.0 }]);
        assert_eq!(cdf(&[7]).unwrap(), vec![CdfPoint { value: 7, fraction: 1.0 }]);
        assert_eq!(cdf_at(&cdf(&[10, 12, 40]).unwrap(), 9), 0.0);
        assert_eq!(cdf(&[]), Err(AnalyticsError::Empty));
    }

    #[test]
    fn top_n_examples() {
        let items = vec![("b", 3u64), ("a kike", 9), ("a", 3), ("c", 1)];
        let t = top_n(&items, 15);
        assert_eq!(t, vec![("a kike", 9), ("a", 3), ("b", 3), ("c", 1)]);
        assert_eq!(top_n(&items, 1), vec![("a kike", 9)]);
    }

    #[test]
    fn daily_examples() {
        let day = 1_495_497_600; // 2017-05-23T00:00:00Z
        let s = daily_series(&[day + 10, day + 20], None).unwrap();
        assert_eq!(s.days, vec![(NaiveDate::from_ymd_opt(2017, 5, 23).unwrap(), 2)]);
        let s = daily_series(&[day - 60, day + 60], None).unwrap();
        assert_eq!(s.counts(), vec![1, 1]);
        let s = daily_series(&[day, day + 2 * 86_400], None).unwrap();
        assert_eq!(s.counts(), vec![1, 0, 1]);
        let first = NaiveDate::from_ymd_opt(2017, 5, 24).unwrap();
        assert_eq!(daily_series(&[day], Some((first, first))), Err(AnalyticsError::OutOfSpan(day)));
        assert!(daily_series(&[], None).unwrap().days.is_empty());
    }

    fn series(counts: &[u64]) -> DailySeries {
        let start = NaiveDate::from_ymd_opt(2017, 1, 1).unwrap();
        DailySeries { days: counts.iter().enumerate().map(|(i, &c)| (start + Days::new(i as u64), c)).collect() }
    }

    #[test]
    fn peak_examples() {
        assert!(detect_peaks(&series(&[5; 10]), 3.0).is_empty());
        let mut c = vec![1u64; 30];
        c[17] = 100;
        let p = detect_peaks(&series(&c), 3.0);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].1, 100);
        let p = detect_peaks(&series(&[1, 2, 3, 4]), 0.0);
        assert_eq!(p.iter().map(|d| d.1).collect::<Vec<_>>(), vec![4, 3]);
    }

    proptest! {
        #[test]
        fn fast_equals_brute(v in prop::collection::vec((0i64..6, 0i64..6), 2..60)) {
            let x: Vec<i64> = v.iter().map(|p| p.0).collect();
            let y: Vec<i64> = v.iter().map(|p| p.1).collect();
            let (c, d, tx, ty) = brute(&x, &y);
            let want = if c + d + tx == 0 || c + d + ty == 0 {
                None
            } else {
                Some((c - d) as f64 / (((c + d + tx) as f64) * ((c + d + ty) as f64)).sqrt())
            };
            prop_assert_eq!(kendall_tau_b(&x, &y).ok().map(|r| r.tau_b), want);
        }

        #[test]
        fn monotone_transform_invariant(v in prop::collection::vec((0i64..20, 0i64..20), 2..40)) {
            let x: Vec<i64> = v.iter().map(|p| p.0).collect();
            let y: Vec<i64> = v.iter().map(|p| p.1).collect();
            let x2: Vec<i64> = x.iter().map(|a| a * a * a + 7).collect();
            let y2: Vec<f64> = y.iter().map(|&b| (b as f64).exp()).collect();
            let a = kendall_tau_b(&x, &y);
            let xf: Vec<f64> = x2.iter().map(|&a| a as f64).collect();
            prop_assert_eq!(a, kendall_tau_b_f64(&xf, &y2));
        }

        #[test]
        fn cdf_permutation_invariant(mut v in prop::collection::vec(0u64..30, 1..40)) {
            let a = cdf(&v).unwrap();
            v.reverse();
            prop_assert_eq!(&a, &cdf(&v).unwrap());
            prop_assert_eq!(a.last().unwrap().fraction, 1.0);
        }
    }
}
