//! Statistical self-checks exposed through the command line.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::Serialize;
use statrs::distribution::{Binomial, Discrete, DiscreteCDF};

use crate::bootstrap::{optimal_share_fraction, prob_identical_fraction, Resample};
use crate::datastore::{open_dataset, Record, Value};
use crate::delta::{
    sample_new_old_part_size, update_resample_naive, update_resample_sketched, LayeredResample,
    SizeMode, SizeModel, DEFAULT_SKETCH_CONSTANT,
};
use crate::error::{EarlError, Result};
use crate::sampling::{postmap_sample, premap_sample, reservoir_sample, InclusionBitmap, SamplerMode};
use crate::stats::{chi_square_gof, inclusion_uniformity, ks_discrete, total_variation};
use crate::EarlRng;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub kind: String,
    pub passed: bool,
    pub metrics: BTreeMap<String, f64>,
    pub lines: Vec<String>,
}

impl std::fmt::Display for AuditReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for l in &self.lines {
            writeln!(f, "{l}")?;
        }
        write!(f, "{}: {}", self.kind, if self.passed { "PASS" } else { "FAIL" })
    }
}

/// Per-record inclusion uniformity of a sampler over `records` records of
/// equal line length. Pre-map sampling writes a scratch file into `dir`.
pub fn audit_uniformity(
    mode: SamplerMode,
    records: usize,
    trials: usize,
    n: usize,
    seed: u64,
    dir: &Path,
) -> Result<AuditReport> {
    if n == 0 || n > records {
        return Err(EarlError::invalid("need 0 < n <= records"));
    }
    let width = records.to_string().len();
    let recs: Vec<Record> = (0..records)
        .map(|i| Record::synthetic(i as u64, Value::Scalar(i as f64)))
        .collect();
    let mut rng = EarlRng::seed_from_u64(seed);
    let mut counts = vec![0u64; records];
    let index_of = |r: &Record| -> usize { r.key.trim_start_matches(['k', 'r']).parse().expect("numeric key") };
    match mode {
        SamplerMode::PreMap => {
            let path = dir.join(format!("earl-uniformity-{}-{seed}.tsv", std::process::id()));
            {
                let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
                for i in 0..records {
                    writeln!(f, "k{i:0width$}\t{i:0width$}")?;
                }
                f.flush()?;
            }
            let bf = open_dataset(&path, 4096)?;
            let outcome = (|| -> Result<()> {
                for _ in 0..trials {
                    let mut bitmap = InclusionBitmap::new(bf.split_count());
                    for r in premap_sample(&bf, n, &mut bitmap, &mut rng)?.items() {
                        counts[index_of(r)] += 1;
                    }
                }
                Ok(())
            })();
            std::fs::remove_file(&path)?;
            outcome?;
        }
        SamplerMode::PostMap => {
            for _ in 0..trials {
                let (s, _) = postmap_sample(recs.iter().cloned(), n, &mut rng)?;
                for r in s.items() {
                    counts[index_of(r)] += 1;
                }
            }
        }
        SamplerMode::Reservoir => {
            for _ in 0..trials {
                for r in reservoir_sample(recs.iter().cloned(), n, &mut rng).items() {
                    counts[index_of(r)] += 1;
                }
            }
        }
    }
    let t = inclusion_uniformity(&counts, trials, n);
    Ok(AuditReport {
        kind: "uniformity".into(),
        passed: t.p_value > 0.01,
        metrics: BTreeMap::from([
            ("chi_square".into(), t.statistic),
            ("df".into(), t.df as f64),
            ("p_value".into(), t.p_value),
        ]),
        lines: vec![format!(
            "sampler={mode:?} records={records} trials={trials} n={n} chi2={:.2} df={} p={:.4}",
            t.statistic, t.df, t.p_value
        )],
    })
}

/// Sorted multiplicities of the old positions and of the new positions.
/// Maintained and fresh resamples are both invariant under permutations
/// inside each group, so their laws agree iff these summaries agree.
pub type OrbitKey = (Vec<u32>, Vec<u32>);

pub fn orbit_key(counts: &[u32], n_old: usize) -> OrbitKey {
    let mut old = counts[..n_old].to_vec();
    let mut new = counts[n_old..].to_vec();
    old.sort_unstable_by(|a, b| b.cmp(a));
    new.sort_unstable_by(|a, b| b.cmp(a));
    (old, new)
}

/// Exact law of [`orbit_key`] for a fresh resample of size `n_prime`.
pub fn exact_orbit_law(n_old: usize, n_prime: usize) -> BTreeMap<OrbitKey, f64> {
    let mut law = BTreeMap::new();
    let ln_fact: Vec<f64> = (0..=n_prime)
        .map(|i| (1..=i).map(|j| (j as f64).ln()).sum())
        .collect();
    let mut counts = vec![0u32; n_prime];
    fn walk(counts: &mut Vec<u32>, i: usize, left: u32, f: &mut dyn FnMut(&[u32])) {
        if i + 1 == counts.len() {
            counts[i] = left;
            f(counts);
            return;
        }
        for c in 0..=left {
            counts[i] = c;
            walk(counts, i + 1, left - c, f);
        }
    }
    walk(&mut counts, 0, n_prime as u32, &mut |c| {
        let ln_p = ln_fact[n_prime]
            - c.iter().map(|&k| ln_fact[k as usize]).sum::<f64>()
            - n_prime as f64 * (n_prime as f64).ln();
        *law.entry(orbit_key(c, n_old)).or_insert(0.0) += ln_p.exp();
    });
    law
}

/// Law of maintained resamples (old sample `n`, grown to `n_prime`)
/// against fresh resamples, by total variation.
pub fn audit_delta_equivalence(n: usize, n_prime: usize, trials: usize, seed: u64, sketched: bool) -> Result<AuditReport> {
    if n == 0 || n >= n_prime || n_prime > 10 {
        return Err(EarlError::invalid("need 0 < n < n' <= 10"));
    }
    let mut rng = EarlRng::seed_from_u64(seed);
    let mut orbit_counts: BTreeMap<OrbitKey, u64> = BTreeMap::new();
    let mut marginal = vec![vec![0u64; n_prime + 1]; n_prime];
    for _ in 0..trials {
        let mut counts = vec![0u32; n];
        for _ in 0..n {
            counts[rng.random_range(0..n)] += 1;
        }
        let b = Resample::from_counts(counts, vec![n])?;
        let grown = if sketched {
            let mut lb = LayeredResample::new(b, DEFAULT_SKETCH_CONSTANT, &mut rng)?;
            update_resample_sketched(&mut lb, n_prime - n, &mut rng)?;
            lb.resample().clone()
        } else {
            let mut b = b;
            update_resample_naive(&mut b, n_prime - n, &mut rng)?;
            b
        };
        if grown.size() != n_prime as u64 {
            return Err(EarlError::invalid("maintained resample has the wrong size"));
        }
        for (pos, &c) in grown.counts().iter().enumerate() {
            marginal[pos][c as usize] += 1;
        }
        *orbit_counts.entry(orbit_key(grown.counts(), n)).or_insert(0) += 1;
    }
    let empirical = crate::stats::empirical(&orbit_counts);
    let tv = total_variation(&empirical, &exact_orbit_law(n, n_prime));
    let bin = Binomial::new(1.0 / n_prime as f64, n_prime as u64).expect("valid binomial");
    let mut worst_marginal: f64 = 0.0;
    for m in &marginal {
        let d: f64 = m
            .iter()
            .enumerate()
            .map(|(k, &c)| (c as f64 / trials as f64 - bin.pmf(k as u64)).abs())
            .sum::<f64>()
            / 2.0;
        worst_marginal = worst_marginal.max(d);
    }
    let path = if sketched { "sketched" } else { "naive" };
    Ok(AuditReport {
        kind: "delta-equivalence".into(),
        passed: tv <= 0.02 && worst_marginal <= 0.02,
        metrics: BTreeMap::from([("tv".into(), tv), ("marginal_tv".into(), worst_marginal)]),
        lines: vec![format!(
            "path={path} n={n} n'={n_prime} trials={trials} tv={tv:.5} max_marginal_tv={worst_marginal:.5}"
        )],
    })
}

/// Table of `P(X = y)` and the work saved `P(X = y) y` for `y = k/n`.
pub fn audit_eq4(n: usize) -> Result<AuditReport> {
    if n == 0 {
        return Err(EarlError::invalid("n must be positive"));
    }
    let mut lines = vec!["k,y,p,saved".to_string()];
    for k in 1..=n {
        let y = k as f64 / n as f64;
        let p = prob_identical_fraction(n, y);
        lines.push(format!("{k},{y:.4},{p:.6},{:.6}", p * y));
    }
    let (y, saved) = optimal_share_fraction(n);
    lines.push(format!("optimum y*={y:.4} saved={saved:.6}"));
    Ok(AuditReport {
        kind: "eq4".into(),
        passed: true,
        metrics: BTreeMap::from([("y_star".into(), y), ("saved".into(), saved)]),
        lines,
    })
}

/// Old-part size law: exact mode by chi-square at `(n, n_prime)`, and the
/// Gaussian mode by Kolmogorov distance at `(10^4, 2 10^4)`.
pub fn audit_binomial(n: usize, n_prime: usize, draws: usize, seed: u64) -> Result<AuditReport> {
    let mut rng = EarlRng::seed_from_u64(seed);
    let exact = SizeModel::with_mode(n, n_prime, SizeMode::ExactBinomial)?;
    let mut hist = vec![0f64; n_prime + 1];
    for _ in 0..draws {
        hist[sample_new_old_part_size(&exact, &mut rng)] += 1.0;
    }
    let bin = Binomial::new(exact.success_probability(), n_prime as u64).expect("valid binomial");
    let expected: Vec<f64> = (0..=n_prime).map(|k| draws as f64 * bin.pmf(k as u64)).collect();
    let chi = chi_square_gof(&hist, &expected, 5.0);

    let (gn, gn_prime) = (10_000usize, 20_000usize);
    let gauss = SizeModel::with_mode(gn, gn_prime, SizeMode::GaussianApprox)?;
    let gdraws: Vec<i64> = (0..draws)
        .map(|_| sample_new_old_part_size(&gauss, &mut rng) as i64)
        .collect();
    let gbin = Binomial::new(0.5, gn_prime as u64).expect("valid binomial");
    let ks = ks_discrete(&gdraws, |k| if k < 0 { 0.0 } else { gbin.cdf(k as u64) });
    Ok(AuditReport {
        kind: "binomial".into(),
        passed: chi.p_value > 0.01 && ks <= 0.01,
        metrics: BTreeMap::from([("chi_square_p".into(), chi.p_value), ("ks".into(), ks)]),
        lines: vec![
            format!("exact n={n} n'={n_prime} draws={draws} chi2={:.2} df={} p={:.4}", chi.statistic, chi.df, chi.p_value),
            format!("gaussian n={gn} n'={gn_prime} draws={draws} ks={ks:.5}"),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orbit_law_sums_to_one() {
        let law = exact_orbit_law(2, 3);
        let total: f64 = law.values().sum();
        assert!((total - 1.0).abs() < 1e-12);
        // All three positions once: 3!/27.
        assert!((law[&(vec![1, 1], vec![1])] - 6.0 / 27.0).abs() < 1e-12);
    }

    #[test]
    fn identical_prefix_table_has_known_row() {
        let r = audit_eq4(29).unwrap();
        assert!(r.lines.iter().any(|l| l.starts_with("8,") && l.contains("0.345948")));
    }

    #[test]
    fn small_delta_audit_passes() {
        let r = audit_delta_equivalence(2, 3, 100_000, 1, false).unwrap();
        assert!(r.passed, "{r}");
        let r = audit_delta_equivalence(2, 3, 100_000, 2, true).unwrap();
        assert!(r.passed, "{r}");
    }
}
