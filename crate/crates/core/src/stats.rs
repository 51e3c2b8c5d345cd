//! Goodness-of-fit helpers shared by the audits and the test suites.

use std::collections::BTreeMap;

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GofResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

pub fn chi_square_sf(statistic: f64, df: usize) -> f64 {
    if df == 0 {
        return 1.0;
    }
    ChiSquared::new(df as f64)
        .expect("positive degrees of freedom")
        .sf(statistic)
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Two-sided standard normal quantile for confidence level `level`.
pub fn z_two_sided(level: f64) -> f64 {
    Normal::standard().inverse_cdf(0.5 + level / 2.0)
}

/// Pearson chi-square. Adjacent cells are pooled until every expected count
/// reaches `min_expected`.
pub fn chi_square_gof(observed: &[f64], expected: &[f64], min_expected: f64) -> GofResult {
    assert_eq!(observed.len(), expected.len());
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let (mut o_acc, mut e_acc) = (0.0, 0.0);
    for (&o, &e) in observed.iter().zip(expected) {
        o_acc += o;
        e_acc += e;
        if e_acc >= min_expected {
            cells.push((o_acc, e_acc));
            o_acc = 0.0;
            e_acc = 0.0;
        }
    }
    if e_acc > 0.0 || o_acc > 0.0 {
        match cells.last_mut() {
            Some(last) => {
                last.0 += o_acc;
                last.1 += e_acc;
            }
            None => cells.push((o_acc, e_acc)),
        }
    }
    let statistic = cells
        .iter()
        .filter(|(_, e)| *e > 0.0)
        .map(|(o, e)| (o - e).powi(2) / e)
        .sum();
    let df = cells.len().saturating_sub(1);
    GofResult {
        statistic,
        df,
        p_value: chi_square_sf(statistic, df),
    }
}

/// Uniformity of per-record inclusion counts after `trials` independent
/// without-replacement samples of size `n`.
///
/// Indicators inside one sample are negatively correlated, so the plain
/// Pearson statistic is divided by `(1 - pi) N / (N - 1)` before being
/// referred to chi-square with `N - 1` degrees of freedom.
pub fn inclusion_uniformity(counts: &[u64], trials: usize, n: usize) -> GofResult {
    let big_n = counts.len() as f64;
    let pi = n as f64 / big_n;
    let expected = trials as f64 * pi;
    let pearson: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let scale = if counts.len() > 1 {
        (1.0 - pi) * big_n / (big_n - 1.0)
    } else {
        1.0
    };
    let statistic = if scale > 0.0 { pearson / scale } else { 0.0 };
    let df = counts.len().saturating_sub(1);
    GofResult {
        statistic,
        df,
        p_value: chi_square_sf(statistic, df),
    }
}

/// Largest gap between the empirical CDF of integer `draws` and `cdf`.
pub fn ks_discrete(draws: &[i64], cdf: impl Fn(i64) -> f64) -> f64 {
    let mut sorted = draws.to_vec();
    sorted.sort_unstable();
    let total = sorted.len() as f64;
    let mut worst: f64 = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i];
        let below = i as f64 / total;
        while i < sorted.len() && sorted[i] == v {
            i += 1;
        }
        let at = i as f64 / total;
        worst = worst.max((at - cdf(v)).abs()).max((below - cdf(v - 1)).abs());
    }
    worst
}

/// Total-variation distance between two probability tables.
pub fn total_variation<K: Ord>(p: &BTreeMap<K, f64>, q: &BTreeMap<K, f64>) -> f64 {
    let mut sum = 0.0;
    for (k, a) in p {
        sum += (a - q.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, b) in q {
        if !p.contains_key(k) {
            sum += b.abs();
        }
    }
    sum / 2.0
}

/// Normalizes counts into a probability table.
pub fn empirical<K: Ord + Clone>(counts: &BTreeMap<K, u64>) -> BTreeMap<K, f64> {
    let total: u64 = counts.values().sum();
    counts
        .iter()
        .map(|(k, &c)| (k.clone(), c as f64 / total as f64))
        .collect()
}
