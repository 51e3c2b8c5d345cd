//! Monte-Carlo bootstrap over a sample, the replicate error measure and the
//! resample-sharing law.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::Record;
use crate::error::{EarlError, Result};
use crate::jobs::Job;
use crate::sampling::Sample;
use crate::EarlRng;

/// Multiset over sample positions, split into one part per sample batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resample {
    counts: Vec<u32>,
    batch_ends: Vec<usize>,
}

impl Resample {
    pub fn from_counts(counts: Vec<u32>, batch_ends: Vec<usize>) -> Result<Self> {
        if batch_ends.last().copied().unwrap_or(0) != counts.len()
            || batch_ends.windows(2).any(|w| w[0] > w[1])
        {
            return Err(EarlError::invalid("batch ends must be ascending and end at the sample size"));
        }
        Ok(Resample { counts, batch_ends })
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub(crate) fn counts_mut(&mut self) -> &mut Vec<u32> {
        &mut self.counts
    }

    pub(crate) fn push_batch(&mut self, len: usize) {
        self.counts.resize(self.counts.len() + len, 0);
        self.batch_ends.push(self.counts.len());
    }

    /// Number of sample positions covered.
    pub fn positions(&self) -> usize {
        self.counts.len()
    }

    /// Total multiplicity.
    pub fn size(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }

    pub fn batch_count(&self) -> usize {
        self.batch_ends.len()
    }

    pub fn batch_range(&self, k: usize) -> Range<usize> {
        let start = if k == 0 { 0 } else { self.batch_ends[k - 1] };
        start..self.batch_ends[k]
    }

    /// Counts of part `k` (the positions of batch `k`).
    pub fn part(&self, k: usize) -> &[u32] {
        &self.counts[self.batch_range(k)]
    }

    pub fn part_sizes(&self) -> Vec<u64> {
        (0..self.batch_count())
            .map(|k| self.part(k).iter().map(|&c| u64::from(c)).sum())
            .collect()
    }
}

fn batch_ends(sample: &Sample) -> Vec<usize> {
    sample.batch_ranges().into_iter().map(|r| r.end).collect()
}

/// `n` independent uniform draws with replacement over the sample positions.
pub fn draw_resample(sample: &Sample, rng: &mut EarlRng) -> Result<Resample> {
    let n = sample.len();
    if n == 0 {
        return Err(EarlError::EmptySample);
    }
    let mut counts = vec![0u32; n];
    for _ in 0..n {
        counts[rng.random_range(0..n)] += 1;
    }
    Resample::from_counts(counts, batch_ends(sample))
}

/// Folds the resample into a fresh job state. Returns the state and the
/// number of record updates (total multiplicity).
pub fn evaluate<J: Job>(job: &J, items: &[Record], counts: &[u32]) -> Result<(J::State, u64)> {
    let mut state = job.initialize();
    let mut touches = 0;
    for (rec, &c) in items.iter().zip(counts) {
        if c > 0 {
            job.update(&mut state, &rec.value, c)?;
            touches += u64::from(c);
        }
    }
    Ok((state, touches))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSet {
    pub estimates: Vec<f64>,
}

impl ReplicateSet {
    pub fn b(&self) -> usize {
        self.estimates.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorEstimate {
    pub cv: f64,
    pub mean_estimate: f64,
    /// Replicate variance with the 1/B denominator.
    pub var_b: f64,
}

impl ErrorEstimate {
    pub fn std_dev(&self) -> f64 {
        self.var_b.sqrt()
    }
}

fn mean_and_var(xs: &[f64]) -> (f64, f64) {
    let b = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / b;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / b;
    (mean, var)
}

fn is_zero_mean(mean: f64, sd: f64) -> bool {
    mean == 0.0 || mean.abs() < 1e-12 * sd
}

/// Coefficient of variation of the replicate estimates.
pub fn error_estimate(estimates: &[f64]) -> Result<ErrorEstimate> {
    if estimates.len() < 2 {
        return Err(EarlError::invalid("at least two replicate estimates are required"));
    }
    if estimates.iter().any(|x| !x.is_finite()) {
        return Err(EarlError::job("non-finite replicate estimate"));
    }
    let (mean, var) = mean_and_var(estimates);
    let sd = var.sqrt();
    if is_zero_mean(mean, sd) {
        return Err(EarlError::ZeroMean { std_dev: sd });
    }
    Ok(ErrorEstimate {
        cv: sd / mean.abs(),
        mean_estimate: mean,
        var_b: var,
    })
}

/// Error of the replicates: c_v, or the absolute standard deviation
/// (flagged `true`) when the replicate mean is zero.
pub fn relative_or_absolute_error(estimates: &[f64]) -> Result<(f64, bool)> {
    match error_estimate(estimates) {
        Ok(e) => Ok((e.cv, false)),
        Err(EarlError::ZeroMean { std_dev }) => Ok((std_dev, true)),
        Err(e) => Err(e),
    }
}

/// Running c_v over a growing replicate set.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunningCv {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningCv {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn var_b(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0)
        }
    }

    /// c_v, or the absolute spread when the mean is zero.
    pub fn cv(&self) -> f64 {
        let sd = self.var_b().sqrt();
        if is_zero_mean(self.mean, sd) {
            sd
        } else {
            sd / self.mean.abs()
        }
    }
}

/// The closed-form variance of the sample mean: sample variance over n.
pub fn closed_form_mean_variance(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return Err(EarlError::invalid("closed-form variance needs at least two values"));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let s2 = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(s2 / n as f64)
}

fn shared_count(n: usize, y: f64) -> usize {
    ((y * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Probability that the first `floor(y n)` of `n` uniform draws over `n`
/// positions are all distinct: `n! / ((n - k)! n^k)`.
pub fn prob_identical_fraction(n: usize, y: f64) -> f64 {
    assert!((0.0..=1.0).contains(&y), "fraction must lie in [0, 1]");
    let k = shared_count(n, y);
    let nf = n as f64;
    (0..k).map(|j| (n - j) as f64 / nf).product()
}

/// Fraction y* in {1/n, ..., 1} maximizing `P(X = y) y`, with the maximum.
/// Ties go to the smaller fraction.
pub fn optimal_share_fraction(n: usize) -> (f64, f64) {
    assert!(n >= 1, "n must be positive");
    // f(k+1) > f(k) iff (k+1)(n-k) > k n, which holds on a prefix of k.
    let rises = |k: usize| {
        let (k, n) = (k as u128, n as u128);
        (k + 1) * (n - k) > k * n
    };
    let (mut lo, mut hi) = (1usize, n);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if rises(mid) {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    let y = lo as f64 / n as f64;
    (y, prob_identical_fraction(n, y) * y)
}

/// Cached first draws of the previous resample, for intra-iteration sharing.
#[derive(Debug, Clone)]
pub struct SharingPlan<S> {
    shared: usize,
    prob: f64,
    cache: Option<(Vec<usize>, S)>,
    saved: u64,
}

impl<S: Clone> SharingPlan<S> {
    pub fn new(n: usize) -> Self {
        let (y, _) = optimal_share_fraction(n.max(1));
        SharingPlan {
            shared: shared_count(n, y),
            prob: prob_identical_fraction(n.max(1), y),
            cache: None,
            saved: 0,
        }
    }

    /// Record updates avoided so far.
    pub fn saved(&self) -> u64 {
        self.saved
    }

    pub fn shared(&self) -> usize {
        self.shared
    }
}

/// One resample together with its evaluated state.
#[derive(Debug, Clone)]
pub struct Evaluated<S> {
    pub resample: Resample,
    pub state: S,
    pub touches: u64,
}

/// Draws a resample and evaluates it. With a sharing plan and a mergeable
/// job the first `k` draws and their partial state may be taken from the
/// previous resample.
pub fn draw_evaluated<J: Job>(
    job: &J,
    sample: &Sample,
    rng: &mut EarlRng,
    sharing: Option<&mut SharingPlan<J::State>>,
) -> Result<Evaluated<J::State>> {
    let n = sample.len();
    if n == 0 {
        return Err(EarlError::EmptySample);
    }
    let items = sample.items();
    let plan = sharing.filter(|p| job.mergeable() && p.shared > 0 && p.shared <= n);
    let mut counts = vec![0u32; n];
    let (mut state, mut touches, fresh_from) = match plan {
        Some(plan) => {
            let reuse = plan.cache.is_some() && rng.random::<f64>() < plan.prob;
            if !reuse {
                let draws: Vec<usize> = (0..plan.shared).map(|_| rng.random_range(0..n)).collect();
                let mut head = vec![0u32; n];
                for &d in &draws {
                    head[d] += 1;
                }
                let (st, t) = evaluate(job, items, &head)?;
                plan.cache = Some((draws, st));
                touches_add(&mut counts, &head);
                let st = plan.cache.as_ref().map(|c| c.1.clone()).expect("cache just set");
                (st, t, plan.shared)
            } else {
                let (draws, st) = plan.cache.as_ref().expect("reuse needs a cache");
                for &d in draws {
                    counts[d] += 1;
                }
                plan.saved += plan.shared as u64;
                (st.clone(), 0, plan.shared)
            }
        }
        None => (job.initialize(), 0, 0),
    };
    let mut tail = vec![0u32; n];
    for _ in fresh_from..n {
        tail[rng.random_range(0..n)] += 1;
    }
    for (i, &c) in tail.iter().enumerate() {
        if c > 0 {
            job.update(&mut state, &items[i].value, c)?;
            touches += u64::from(c);
        }
    }
    touches_add(&mut counts, &tail);
    Ok(Evaluated {
        resample: Resample::from_counts(counts, batch_ends(sample))?,
        state,
        touches,
    })
}

fn touches_add(counts: &mut [u32], add: &[u32]) {
    for (c, a) in counts.iter_mut().zip(add) {
        *c += a;
    }
}

/// Outcome of [`replicate_estimates`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRun {
    pub set: ReplicateSet,
    pub touches: u64,
    pub saved: u64,
}

/// Runs the job on `b` resamples of the sample.
pub fn replicate_estimates<J: Job>(
    sample: &Sample,
    b: usize,
    job: &J,
    rng: &mut EarlRng,
    intra_sharing: bool,
) -> Result<ReplicateRun> {
    if b < 2 {
        return Err(EarlError::invalid("at least two bootstraps are required"));
    }
    let mut plan = intra_sharing.then(|| SharingPlan::new(sample.len()));
    let mut estimates = Vec::with_capacity(b);
    let mut touches = 0;
    for _ in 0..b {
        let ev = draw_evaluated(job, sample, rng, plan.as_mut())?;
        touches += ev.touches;
        estimates.push(job.finalize(&ev.state)?.estimate);
    }
    Ok(ReplicateRun {
        set: ReplicateSet { estimates },
        touches,
        saved: plan.map_or(0, |p| p.saved),
    })
}

/// Exact bootstrap distribution of the job on a small sample: every
/// multiset of `n` positions with its multinomial probability. Equal
/// estimates are pooled.
pub fn exact_replicate_distribution<J: Job>(job: &J, items: &[Record]) -> Result<Vec<(f64, f64)>> {
    let n = items.len();
    if n == 0 {
        return Err(EarlError::EmptySample);
    }
    if n > 10 {
        return Err(EarlError::invalid("exact enumeration is limited to 10 positions"));
    }
    let log_fact: Vec<f64> = (0..=n).scan(0.0, |acc, i| {
        if i > 0 {
            *acc += (i as f64).ln();
        }
        Some(*acc)
    }).collect();
    let mut out: Vec<(f64, f64)> = Vec::new();
    let mut counts = vec![0u32; n];
    compositions(&mut counts, 0, n as u32, &mut |c| {
        let ln_w = log_fact[n] - c.iter().map(|&k| log_fact[k as usize]).sum::<f64>()
            - n as f64 * (n as f64).ln();
        let (state, _) = evaluate(job, items, c)?;
        out.push((job.finalize(&state)?.estimate, ln_w.exp()));
        Ok(())
    })?;
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut pooled: Vec<(f64, f64)> = Vec::new();
    for (x, p) in out {
        match pooled.last_mut() {
            Some(last) if last.0 == x => last.1 += p,
            _ => pooled.push((x, p)),
        }
    }
    Ok(pooled)
}

fn compositions(
    counts: &mut [u32],
    i: usize,
    left: u32,
    f: &mut dyn FnMut(&[u32]) -> Result<()>,
) -> Result<()> {
    if i + 1 == counts.len() {
        counts[i] = left;
        return f(counts);
    }
    for c in 0..=left {
        counts[i] = c;
        compositions(counts, i + 1, left - c, f)?;
    }
    counts[i] = 0;
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::datastore::Value;
    use crate::jobs::{mean_job, median_job};
    use crate::sampling::SamplerMode;

    fn sample_of(xs: &[f64]) -> Sample {
        let recs = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| Record::synthetic(i as u64, Value::Scalar(x)))
            .collect();
        Sample::from_records(recs, SamplerMode::PostMap)
    }

    #[test]
    fn draw_resample_small() {
        let mut rng = EarlRng::seed_from_u64(0);
        let s = sample_of(&[4.0]);
        for _ in 0..10 {
            assert_eq!(draw_resample(&s, &mut rng).unwrap().counts(), &[1]);
        }
        let s = sample_of(&[1.0, 2.0]);
        let mut hist = [0u32; 3];
        for _ in 0..40_000 {
            hist[draw_resample(&s, &mut rng).unwrap().counts()[0] as usize] += 1;
        }
        // (0,0),(0,1),(1,0),(1,1) each 1/4: position 0 drawn 0, 1, 2 times w.p. 1/4, 1/2, 1/4.
        for (h, p) in hist.iter().zip([0.25, 0.5, 0.25]) {
            assert!((*h as f64 / 40_000.0 - p).abs() < 0.01);
        }
        assert!(draw_resample(&sample_of(&[]), &mut rng).is_err());
    }

    #[test]
    fn draw_resample_mean_multiplicity() {
        let mut rng = EarlRng::seed_from_u64(1);
        let s = sample_of(&vec![0.0; 1000]);
        let r = draw_resample(&s, &mut rng).unwrap();
        assert_eq!(r.size(), 1000);
        let mean = r.size() as f64 / 1000.0;
        let var: f64 = r.counts().iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / 1000.0;
        // Binomial(1000, 1/1000) per position: variance near 1.
        assert!((var - 0.999).abs() < 3.0 * (2.0f64 / 1000.0).sqrt());
    }

    #[test]
    fn error_estimate_examples() {
        let e = error_estimate(&[5.0, 5.0, 5.0]).unwrap();
        assert_eq!((e.var_b, e.cv), (0.0, 0.0));
        let e = error_estimate(&[1.0, 3.0]).unwrap();
        assert_eq!((e.mean_estimate, e.var_b, e.cv), (2.0, 1.0, 0.5));
        assert!(matches!(error_estimate(&[0.0, 0.0]), Err(EarlError::ZeroMean { .. })));
        assert_eq!(relative_or_absolute_error(&[-1.0, 1.0]).unwrap(), (1.0, true));
        assert!(error_estimate(&[1.0]).is_err());
    }

    #[test]
    fn running_cv_matches_batch() {
        let xs = [2.0, 4.0, 4.0, 5.0, 9.0];
        let mut r = RunningCv::default();
        xs.iter().for_each(|&x| r.push(x));
        let e = error_estimate(&xs).unwrap();
        assert!((r.cv() - e.cv).abs() < 1e-12);
        assert!((r.var_b() - e.var_b).abs() < 1e-12);
    }

    #[test]
    fn closed_form_examples() {
        assert!((closed_form_mean_variance(&[1.0, 2.0, 3.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(closed_form_mean_variance(&[4.0; 8]).unwrap(), 0.0);
        assert!(closed_form_mean_variance(&[1.0]).is_err());
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = EarlRng::seed_from_u64(2);
        let xs: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let v = closed_form_mean_variance(&xs).unwrap();
        assert!((v * 1e4 - 1.0).abs() < 0.1);
    }

    #[test]
    fn replicates_constant_and_lln() {
        let mut rng = EarlRng::seed_from_u64(3);
        let run = replicate_estimates(&sample_of(&[7.0; 20]), 10, &mean_job(), &mut rng, false).unwrap();
        assert!(run.set.estimates.iter().all(|&x| x == 7.0));
        let run = replicate_estimates(&sample_of(&[1.0, 2.0, 3.0]), 10_000, &mean_job(), &mut rng, false).unwrap();
        let mean = run.set.estimates.iter().sum::<f64>() / 1e4;
        assert!((mean - 2.0).abs() < 0.02);
        assert_eq!(run.touches, 30_000);
        assert!(replicate_estimates(&sample_of(&[1.0]), 1, &mean_job(), &mut rng, false).is_err());
    }

    #[test]
    fn median_exact_distribution_by_hand() {
        // 27 ordered resamples of {1,2,3}: median 1 in 7, 2 in 13, 3 in 7.
        let s = sample_of(&[1.0, 2.0, 3.0]);
        let d = exact_replicate_distribution(&median_job(), s.items()).unwrap();
        let expect = [(1.0, 7.0 / 27.0), (2.0, 13.0 / 27.0), (3.0, 7.0 / 27.0)];
        assert_eq!(d.len(), 3);
        for ((x, p), (ex, ep)) in d.iter().zip(expect) {
            assert_eq!(*x, ex);
            assert!((p - ep).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_prefix_examples() {
        assert_eq!(prob_identical_fraction(1, 1.0), 1.0);
        assert_eq!(prob_identical_fraction(2, 1.0), 0.5);
        assert!((prob_identical_fraction(29, 0.3) - 0.345_948).abs() < 1e-6);
        assert_eq!(optimal_share_fraction(1), (1.0, 1.0));
        assert_eq!(optimal_share_fraction(2), (0.5, 0.5));
        for n in 1..50 {
            assert_eq!(prob_identical_fraction(n, 1.0 / n as f64), 1.0);
        }
    }

    #[test]
    fn sharing_saves_and_keeps_size() {
        let mut rng = EarlRng::seed_from_u64(4);
        let xs: Vec<f64> = (0..200).map(f64::from).collect();
        let run = replicate_estimates(&sample_of(&xs), 40, &median_job(), &mut rng, true).unwrap();
        assert!(run.saved > 0);
        assert_eq!(run.touches + run.saved, 40 * 200);
    }

    proptest::proptest! {
        #[test]
        fn identical_prefix_non_increasing(n in 1usize..300) {
            let mut prev = 1.0;
            for k in 1..=n {
                let p = prob_identical_fraction(n, k as f64 / n as f64);
                proptest::prop_assert!(p <= prev);
                prev = p;
            }
        }

        #[test]
        fn resample_partition(sizes in proptest::collection::vec(1usize..20, 1..5), seed in 0u64..1000) {
            let n: usize = sizes.iter().sum();
            let recs = (0..n).map(|i| Record::synthetic(i as u64, Value::Scalar(i as f64))).collect();
            let s = Sample::with_batches(recs, &sizes, SamplerMode::PostMap).unwrap();
            let r = draw_resample(&s, &mut EarlRng::seed_from_u64(seed)).unwrap();
            proptest::prop_assert_eq!(r.size(), n as u64);
            proptest::prop_assert_eq!(r.part_sizes().iter().sum::<u64>(), n as u64);
            for (k, &size) in sizes.iter().enumerate() {
                proptest::prop_assert_eq!(r.part(k).len(), size);
            }
        }
    }
}
