//! Reduce-style job definitions and the builtin jobs.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::datastore::Value;
use crate::error::{EarlError, Result};
use crate::EarlRng;

/// Output of [`Job::finalize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finalized {
    pub estimate: f64,
    pub detail: Detail,
}

impl Finalized {
    pub fn scalar(estimate: f64) -> Self {
        Finalized {
            estimate,
            detail: Detail::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Detail {
    #[default]
    None,
    Proportion {
        variance: f64,
        ci_low: f64,
        ci_high: f64,
    },
    Centroids {
        centroids: Vec<Vec<f64>>,
    },
}

/// A job split into a state constructor, incremental update, optional
/// retraction, merge, finalize and a result correction for the sampled
/// fraction `p`.
pub trait Job: Send + Sync {
    type State: Clone + Send + Sync;

    fn name(&self) -> String;

    /// Empty state.
    fn initialize(&self) -> Self::State;

    /// Folds `weight` copies of `value` into the state.
    fn update(&self, state: &mut Self::State, value: &Value, weight: u32) -> Result<()>;

    /// Removes `weight` copies of `value`. Returns false when the job cannot
    /// retract; the caller then rebuilds the state.
    fn retract(&self, _state: &mut Self::State, _value: &Value, _weight: u32) -> Result<bool> {
        Ok(false)
    }

    fn merge(&self, state: &mut Self::State, other: &Self::State);

    fn finalize(&self, state: &Self::State) -> Result<Finalized>;

    fn correct(&self, estimate: f64, _p: f64) -> Result<f64> {
        Ok(estimate)
    }

    /// True if update order does not matter, so partial states may be shared.
    fn mergeable(&self) -> bool {
        true
    }
}

/// Builds a state from a sequence of values.
pub fn reduce<'a, J: Job>(job: &J, values: impl IntoIterator<Item = &'a Value>) -> Result<J::State> {
    let mut state = job.initialize();
    for v in values {
        job.update(&mut state, v, 1)?;
    }
    Ok(state)
}

fn scalar_of(value: &Value) -> Result<f64> {
    value
        .as_scalar()
        .ok_or_else(|| EarlError::job(format!("expected a numeric value, got `{value}`")))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScalarState {
    pub count: u64,
    pub sum: f64,
}

impl ScalarState {
    fn add(&mut self, value: &Value, weight: u32) -> Result<()> {
        let x = scalar_of(value)?;
        self.count += u64::from(weight);
        self.sum += x * f64::from(weight);
        Ok(())
    }

    fn remove(&mut self, value: &Value, weight: u32) -> Result<bool> {
        let x = scalar_of(value)?;
        if self.count < u64::from(weight) {
            return Err(EarlError::job("retracting more values than were added"));
        }
        self.count -= u64::from(weight);
        self.sum -= x * f64::from(weight);
        if self.count == 0 {
            self.sum = 0.0;
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MeanJob;

pub fn mean_job() -> MeanJob {
    MeanJob
}

impl Job for MeanJob {
    type State = ScalarState;

    fn name(&self) -> String {
        "mean".into()
    }

    fn initialize(&self) -> ScalarState {
        ScalarState::default()
    }

    fn update(&self, state: &mut ScalarState, value: &Value, weight: u32) -> Result<()> {
        state.add(value, weight)
    }

    fn retract(&self, state: &mut ScalarState, value: &Value, weight: u32) -> Result<bool> {
        state.remove(value, weight)
    }

    fn merge(&self, state: &mut ScalarState, other: &ScalarState) {
        state.count += other.count;
        state.sum += other.sum;
    }

    fn finalize(&self, state: &ScalarState) -> Result<Finalized> {
        if state.count == 0 {
            return Err(EarlError::job("mean of an empty state"));
        }
        Ok(Finalized::scalar(state.sum / state.count as f64))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SumJob;

pub fn sum_job() -> SumJob {
    SumJob
}

impl Job for SumJob {
    type State = ScalarState;

    fn name(&self) -> String {
        "sum".into()
    }

    fn initialize(&self) -> ScalarState {
        ScalarState::default()
    }

    fn update(&self, state: &mut ScalarState, value: &Value, weight: u32) -> Result<()> {
        state.add(value, weight)
    }

    fn retract(&self, state: &mut ScalarState, value: &Value, weight: u32) -> Result<bool> {
        state.remove(value, weight)
    }

    fn merge(&self, state: &mut ScalarState, other: &ScalarState) {
        state.count += other.count;
        state.sum += other.sum;
    }

    fn finalize(&self, state: &ScalarState) -> Result<Finalized> {
        Ok(Finalized::scalar(state.sum))
    }

    fn correct(&self, estimate: f64, p: f64) -> Result<f64> {
        if !(p > 0.0) {
            return Err(EarlError::invalid(format!("sampled fraction must be positive, got {p}")));
        }
        Ok(estimate / p)
    }
}

/// Maps an f64 to a u64 whose unsigned order matches `f64::total_cmp`.
fn order_key(x: f64) -> u64 {
    let bits = x.to_bits();
    if bits >> 63 == 1 {
        !bits
    } else {
        bits | (1 << 63)
    }
}

fn from_order_key(k: u64) -> f64 {
    if k >> 63 == 1 {
        f64::from_bits(k & !(1 << 63))
    } else {
        f64::from_bits(!k)
    }
}

/// Multiset of values kept in sorted order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MedianState {
    counts: BTreeMap<u64, u64>,
    len: u64,
}

impl MedianState {
    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn nth(&self, mut i: u64) -> f64 {
        for (&k, &c) in &self.counts {
            if i < c {
                return from_order_key(k);
            }
            i -= c;
        }
        unreachable!("index beyond state length")
    }

    /// The two middle order statistics (equal for odd lengths).
    fn middles(&self) -> (f64, f64) {
        let lo_idx = (self.len - 1) / 2;
        let hi_idx = self.len / 2;
        let mut lo = None;
        let mut seen = 0;
        for (&k, &c) in &self.counts {
            if lo.is_none() && lo_idx < seen + c {
                lo = Some(from_order_key(k));
            }
            if hi_idx < seen + c {
                return (lo.expect("lo precedes hi"), from_order_key(k));
            }
            seen += c;
        }
        let x = self.nth(lo_idx);
        (x, x)
    }
}

/// Median of an ascending slice; even lengths take the midpoint of the two middles.
pub fn median_of_sorted(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of empty slice");
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        (xs[m - 1] + xs[m]) / 2.0
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MedianJob;

pub fn median_job() -> MedianJob {
    MedianJob
}

impl Job for MedianJob {
    type State = MedianState;

    fn name(&self) -> String {
        "median".into()
    }

    fn initialize(&self) -> MedianState {
        MedianState::default()
    }

    fn update(&self, state: &mut MedianState, value: &Value, weight: u32) -> Result<()> {
        let x = scalar_of(value)?;
        *state.counts.entry(order_key(x)).or_insert(0) += u64::from(weight);
        state.len += u64::from(weight);
        Ok(())
    }

    fn retract(&self, state: &mut MedianState, value: &Value, weight: u32) -> Result<bool> {
        let key = order_key(scalar_of(value)?);
        let w = u64::from(weight);
        match state.counts.get_mut(&key) {
            Some(c) if *c >= w => {
                *c -= w;
                if *c == 0 {
                    state.counts.remove(&key);
                }
                state.len -= w;
                Ok(true)
            }
            _ => Err(EarlError::job("retracting a value that is not in the state")),
        }
    }

    fn merge(&self, state: &mut MedianState, other: &MedianState) {
        for (&k, &c) in &other.counts {
            *state.counts.entry(k).or_insert(0) += c;
        }
        state.len += other.len;
    }

    fn finalize(&self, state: &MedianState) -> Result<Finalized> {
        if state.is_empty() {
            return Err(EarlError::job("median of an empty state"));
        }
        let (lo, hi) = state.middles();
        Ok(Finalized::scalar(if lo == hi { lo } else { (lo + hi) / 2.0 }))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProportionState {
    pub successes: u64,
    pub trials: u64,
}

#[derive(Debug, Clone)]
pub struct ProportionJob {
    label: String,
    level: f64,
}

pub fn proportion_job(success_label: impl Into<String>) -> ProportionJob {
    ProportionJob {
        label: success_label.into(),
        level: 0.95,
    }
}

impl ProportionJob {
    pub fn label(&self) -> &str {
        &self.label
    }

    fn is_success(&self, value: &Value) -> bool {
        match value {
            Value::Category(c) => *c == self.label,
            other => other.to_string() == self.label,
        }
    }
}

/// Proportion, its variance `p(1-p)/n` and the normal-theory interval.
pub fn proportion_summary(successes: u64, trials: u64, level: f64) -> Result<(f64, f64, f64, f64)> {
    if trials == 0 {
        return Err(EarlError::job("proportion over zero trials"));
    }
    let p = successes as f64 / trials as f64;
    let var = p * (1.0 - p) / trials as f64;
    let half = crate::stats::z_two_sided(level) * var.sqrt();
    Ok((p, var, p - half, p + half))
}

impl Job for ProportionJob {
    type State = ProportionState;

    fn name(&self) -> String {
        format!("proportion:{}", self.label)
    }

    fn initialize(&self) -> ProportionState {
        ProportionState::default()
    }

    fn update(&self, state: &mut ProportionState, value: &Value, weight: u32) -> Result<()> {
        state.trials += u64::from(weight);
        if self.is_success(value) {
            state.successes += u64::from(weight);
        }
        Ok(())
    }

    fn retract(&self, state: &mut ProportionState, value: &Value, weight: u32) -> Result<bool> {
        let w = u64::from(weight);
        let success = self.is_success(value);
        if state.trials < w || (success && state.successes < w) {
            return Err(EarlError::job("retracting more values than were added"));
        }
        state.trials -= w;
        if success {
            state.successes -= w;
        }
        Ok(true)
    }

    fn merge(&self, state: &mut ProportionState, other: &ProportionState) {
        state.successes += other.successes;
        state.trials += other.trials;
    }

    fn finalize(&self, state: &ProportionState) -> Result<Finalized> {
        let (p, variance, ci_low, ci_high) =
            proportion_summary(state.successes, state.trials, self.level)?;
        Ok(Finalized {
            estimate: p,
            detail: Detail::Proportion {
                variance,
                ci_low,
                ci_high,
            },
        })
    }
}

/// Weighted point multiset, kept sorted so results do not depend on update order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KMeansState {
    points: BTreeMap<Vec<u64>, u64>,
}

impl KMeansState {
    pub fn distinct(&self) -> usize {
        self.points.len()
    }

    fn weighted(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        self.points
            .iter()
            .map(|(k, &w)| (k.iter().map(|&c| from_order_key(c)).collect(), w as f64))
            .unzip()
    }
}

#[derive(Debug, Clone)]
pub struct KMeansJob {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

pub fn kmeans_job(k: usize, max_iters: usize, tol: f64) -> KMeansJob {
    KMeansJob {
        k,
        max_iters,
        tol,
        restarts: 5,
        seed: 0,
    }
}

/// Result of one Lloyd run.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub wcss: f64,
    /// WCSS after each assignment step.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// k-means++ seeding over weighted points.
pub fn kmeans_plus_plus(points: &[Vec<f64>], weights: &[f64], k: usize, rng: &mut EarlRng) -> Vec<Vec<f64>> {
    let pick = |scores: &[f64], rng: &mut EarlRng| {
        let total: f64 = scores.iter().sum();
        if total <= 0.0 {
            return rng.random_range(0..scores.len());
        }
        let mut u = rng.random::<f64>() * total;
        for (i, s) in scores.iter().enumerate() {
            if u < *s {
                return i;
            }
            u -= s;
        }
        scores.iter().rposition(|s| *s > 0.0).unwrap_or(0)
    };
    let mut centroids = vec![points[pick(weights, rng)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let scores: Vec<f64> = d2.iter().zip(weights).map(|(d, w)| d * w).collect();
        let next = points[pick(&scores, rng)].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &next));
        }
        centroids.push(next);
    }
    centroids
}

/// Lloyd iterations from `init` until no centroid moves more than `tol`.
pub fn lloyd(points: &[Vec<f64>], weights: &[f64], init: Vec<Vec<f64>>, max_iters: usize, tol: f64) -> KMeansFit {
    let dim = points.first().map_or(0, Vec::len);
    let mut centroids = init;
    let mut history = Vec::new();
    let mut assign = vec![0usize; points.len()];
    for _ in 0..max_iters.max(1) {
        let mut wcss = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            assign[i] = c;
            wcss += weights[i] * d;
        }
        history.push(wcss);
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut mass = vec![0.0; centroids.len()];
        for (i, p) in points.iter().enumerate() {
            mass[assign[i]] += weights[i];
            for (s, x) in sums[assign[i]].iter_mut().zip(p) {
                *s += weights[i] * x;
            }
        }
        let mut shift: f64 = 0.0;
        for (c, (s, m)) in centroids.iter_mut().zip(sums.iter().zip(&mass)) {
            if *m > 0.0 {
                let next: Vec<f64> = s.iter().map(|x| x / m).collect();
                shift = shift.max(sq_dist(c, &next).sqrt());
                *c = next;
            }
        }
        if shift <= tol {
            break;
        }
    }
    let wcss = points
        .iter()
        .zip(weights)
        .map(|(p, w)| w * nearest(p, &centroids).1)
        .sum();
    history.push(wcss);
    centroids.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    KMeansFit {
        centroids,
        wcss,
        history,
    }
}

impl KMeansJob {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Best of `restarts` seeded Lloyd runs.
    pub fn fit(&self, state: &KMeansState) -> Result<KMeansFit> {
        if self.k == 0 {
            return Err(EarlError::invalid("k must be at least 1"));
        }
        if state.distinct() < self.k {
            return Err(EarlError::job(format!(
                "k-means needs {} distinct points, state has {}",
                self.k,
                state.distinct()
            )));
        }
        let (points, weights) = state.weighted();
        let mut rng = EarlRng::seed_from_u64(self.seed);
        let mut best: Option<KMeansFit> = None;
        for _ in 0..self.restarts.max(1) {
            let init = kmeans_plus_plus(&points, &weights, self.k, &mut rng);
            let fit = lloyd(&points, &weights, init, self.max_iters, self.tol);
            if best.as_ref().is_none_or(|b| fit.wcss < b.wcss) {
                best = Some(fit);
            }
        }
        Ok(best.expect("at least one restart"))
    }
}

fn point_of(value: &Value) -> Result<Vec<f64>> {
    match value {
        Value::Scalar(x) => Ok(vec![*x]),
        Value::Vector(v) => Ok(v.clone()),
        Value::Category(c) => Err(EarlError::job(format!("expected a point, got `{c}`"))),
    }
}

impl Job for KMeansJob {
    type State = KMeansState;

    fn name(&self) -> String {
        format!("kmeans:{}", self.k)
    }

    fn initialize(&self) -> KMeansState {
        KMeansState::default()
    }

    fn update(&self, state: &mut KMeansState, value: &Value, weight: u32) -> Result<()> {
        let key = point_of(value)?.into_iter().map(order_key).collect();
        *state.points.entry(key).or_insert(0) += u64::from(weight);
        Ok(())
    }

    fn retract(&self, state: &mut KMeansState, value: &Value, weight: u32) -> Result<bool> {
        let key: Vec<u64> = point_of(value)?.into_iter().map(order_key).collect();
        let w = u64::from(weight);
        match state.points.get_mut(&key) {
            Some(c) if *c >= w => {
                *c -= w;
                if *c == 0 {
                    state.points.remove(&key);
                }
                Ok(true)
            }
            _ => Err(EarlError::job("retracting a point that is not in the state")),
        }
    }

    fn merge(&self, state: &mut KMeansState, other: &KMeansState) {
        for (k, &c) in &other.points {
            *state.points.entry(k.clone()).or_insert(0) += c;
        }
    }

    fn finalize(&self, state: &KMeansState) -> Result<Finalized> {
        let fit = self.fit(state)?;
        Ok(Finalized {
            estimate: fit.wcss,
            detail: Detail::Centroids {
                centroids: fit.centroids,
            },
        })
    }
}

/// Job selector accepted on the command line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum JobSpec {
    Mean,
    Sum,
    Median,
    Proportion(String),
    KMeans(usize),
}

impl std::str::FromStr for JobSpec {
    type Err = EarlError;

    fn from_str(s: &str) -> Result<Self> {
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        match (head, arg) {
            ("mean", None) => Ok(JobSpec::Mean),
            ("sum", None) => Ok(JobSpec::Sum),
            ("median", None) => Ok(JobSpec::Median),
            ("proportion", Some(label)) if !label.is_empty() => Ok(JobSpec::Proportion(label.into())),
            ("kmeans", Some(k)) => k
                .parse()
                .ok()
                .filter(|k| *k > 0)
                .map(JobSpec::KMeans)
                .ok_or_else(|| EarlError::invalid(format!("bad cluster count `{k}`"))),
            _ => Err(EarlError::invalid(format!(
                "unknown job `{s}` (expected mean, sum, median, proportion:<label> or kmeans:<k>)"
            ))),
        }
    }
}

impl std::fmt::Display for JobSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            JobSpec::Mean => f.write_str("mean"),
            JobSpec::Sum => f.write_str("sum"),
            JobSpec::Median => f.write_str("median"),
            JobSpec::Proportion(l) => write!(f, "proportion:{l}"),
            JobSpec::KMeans(k) => write!(f, "kmeans:{k}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;

    fn vals(xs: &[f64]) -> Vec<Value> {
        xs.iter().map(|&x| Value::Scalar(x)).collect()
    }

    fn run<J: Job>(job: &J, xs: &[f64]) -> Result<f64> {
        job.finalize(&reduce(job, &vals(xs))?).map(|f| f.estimate)
    }

    #[test]
    fn scalar_examples() {
        assert_eq!(run(&mean_job(), &[1.0, 2.0, 3.0]).unwrap(), 2.0);
        assert_eq!(run(&mean_job(), &[7.0, 7.0, 7.0]).unwrap(), 7.0);
        assert!(run(&mean_job(), &[]).is_err());
        assert_eq!(run(&sum_job(), &[1.0, 2.0, 3.0, 4.0]).unwrap(), 10.0);
        assert_eq!(sum_job().correct(4.0, 0.5).unwrap(), 8.0);
        assert!(sum_job().correct(4.0, 0.0).is_err());
        assert_eq!(run(&median_job(), &[5.0]).unwrap(), 5.0);
        assert_eq!(run(&median_job(), &[1.0, 2.0, 3.0, 4.0]).unwrap(), 2.5);
        assert_eq!(run(&median_job(), &[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert!(run(&median_job(), &[]).is_err());
    }

    #[test]
    fn correct_identity() {
        for x in [0.0, -3.5, 1e9] {
            assert_eq!(mean_job().correct(x, 1.0).unwrap(), x);
            assert_eq!(sum_job().correct(x, 1.0).unwrap(), x);
            assert_eq!(median_job().correct(x, 1.0).unwrap(), x);
            assert_eq!(proportion_job("a").correct(x, 1.0).unwrap(), x);
            assert_eq!(kmeans_job(2, 10, 0.0).correct(x, 1.0).unwrap(), x);
        }
    }

    #[test]
    fn proportion_examples() {
        let job = proportion_job("yes");
        let mut st = ProportionState { successes: 30, trials: 100 };
        let f = job.finalize(&st).unwrap();
        assert!((f.estimate - 0.3).abs() < 1e-15);
        let Detail::Proportion { variance, ci_low, ci_high } = f.detail else { panic!() };
        assert!((variance - 0.0021).abs() < 1e-15);
        assert!(ci_low < 0.3 && ci_high > 0.3);

        st.successes = 0;
        let Detail::Proportion { ci_low, ci_high, .. } = job.finalize(&st).unwrap().detail else { panic!() };
        assert_eq!((ci_low, ci_high), (0.0, 0.0));
        st.successes = 100;
        assert_eq!(job.finalize(&st).unwrap().estimate, 1.0);
        assert!(job.finalize(&ProportionState::default()).is_err());

        let mut s = job.initialize();
        job.update(&mut s, &Value::Category("yes".into()), 2).unwrap();
        job.update(&mut s, &Value::Category("no".into()), 1).unwrap();
        assert_eq!(s, ProportionState { successes: 2, trials: 3 });
    }

    #[test]
    fn kmeans_examples() {
        let job = kmeans_job(2, 100, 1e-9).with_seed(3);
        let st = reduce(&job, &vals(&[0.0, 0.1, 10.0, 10.1])).unwrap();
        let fit = job.fit(&st).unwrap();
        assert!((fit.centroids[0][0] - 0.05).abs() < 1e-12);
        assert!((fit.centroids[1][0] - 10.05).abs() < 1e-12);

        let one = kmeans_job(1, 100, 1e-9);
        let st = reduce(&one, &vals(&[1.0, 2.0, 6.0])).unwrap();
        assert!((one.fit(&st).unwrap().centroids[0][0] - 3.0).abs() < 1e-12);

        let five = kmeans_job(5, 100, 1e-9);
        let st = reduce(&five, &vals(&[1.0, 2.0, 3.0])).unwrap();
        assert!(five.finalize(&st).is_err());
    }

    #[test]
    fn order_key_round_trip() {
        let xs = [-f64::INFINITY, -2.5, -0.0, 0.0, 1e-300, 3.0, f64::INFINITY];
        for w in xs.windows(2) {
            assert!(order_key(w[0]) < order_key(w[1]));
        }
        for x in xs {
            assert_eq!(from_order_key(order_key(x)).to_bits(), x.to_bits());
        }
    }

    #[test]
    fn job_spec_parse() {
        assert_eq!("mean".parse::<JobSpec>().unwrap(), JobSpec::Mean);
        assert_eq!("proportion:yes".parse::<JobSpec>().unwrap(), JobSpec::Proportion("yes".into()));
        assert_eq!("kmeans:4".parse::<JobSpec>().unwrap(), JobSpec::KMeans(4));
        assert!("kmeans:0".parse::<JobSpec>().is_err());
        assert!("mode".parse::<JobSpec>().is_err());
        assert_eq!(JobSpec::KMeans(4).to_string(), "kmeans:4");
    }

    proptest! {
        #[test]
        fn median_matches_sort(xs in prop::collection::vec(-1e6f64..1e6, 1..1000)) {
            let mut sorted = xs.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assert_eq!(run(&median_job(), &xs).unwrap(), median_of_sorted(&sorted));
        }

        #[test]
        fn mergeable_jobs_ignore_order(
            xs in prop::collection::vec(-1e3f64..1e3, 1..200),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let mut shuffled = xs.clone();
            shuffled.shuffle(&mut EarlRng::seed_from_u64(seed));
            let a = run(&mean_job(), &xs).unwrap();
            let b = run(&mean_job(), &shuffled).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
            let a = run(&sum_job(), &xs).unwrap();
            let b = run(&sum_job(), &shuffled).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
            prop_assert_eq!(run(&median_job(), &xs).unwrap(), run(&median_job(), &shuffled).unwrap());
            if xs.len() >= 3 {
                let km = kmeans_job(2, 50, 1e-9).with_seed(seed);
                let distinct = reduce(&km, &vals(&xs)).unwrap().distinct();
                if distinct >= 2 {
                    prop_assert_eq!(run(&km, &xs).unwrap(), run(&km, &shuffled).unwrap());
                }
            }
        }

        #[test]
        fn proportion_variance_grid(trials in 1u64..500, frac in 0.0f64..=1.0) {
            let successes = (frac * trials as f64).floor() as u64;
            let (p, var, lo, hi) = proportion_summary(successes, trials, 0.95).unwrap();
            let expect = p * (1.0 - p) / trials as f64;
            prop_assert!((var - expect).abs() <= 1e-15);
            prop_assert!(lo <= p && p <= hi);
        }

        #[test]
        fn lloyd_wcss_non_increasing(
            pts in prop::collection::vec((-50f64..50.0, -50f64..50.0), 6..80),
            k in 1usize..5,
            seed in any::<u64>(),
        ) {
            let points: Vec<Vec<f64>> = pts.iter().map(|&(x, y)| vec![x, y]).collect();
            let weights = vec![1.0; points.len()];
            let mut rng = EarlRng::seed_from_u64(seed);
            let init = kmeans_plus_plus(&points, &weights, k, &mut rng);
            let fit = lloyd(&points, &weights, init, 100, 0.0);
            for w in fit.history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-9);
            }
        }

        #[test]
        fn retract_undoes_update(xs in prop::collection::vec(-1e3f64..1e3, 2..60)) {
            let (keep, drop) = xs.split_at(xs.len() / 2);
            let job = median_job();
            let mut st = reduce(&job, &vals(&xs)).unwrap();
            for v in vals(drop) {
                prop_assert!(job.retract(&mut st, &v, 1).unwrap());
            }
            prop_assert_eq!(st, reduce(&job, &vals(keep)).unwrap());
        }
    }

    #[test]
    fn kmeans_is_seed_deterministic() {
        let job = kmeans_job(3, 50, 1e-9).with_seed(11);
        let mut rng = EarlRng::seed_from_u64(0);
        let xs: Vec<Value> = (0..200)
            .map(|_| Value::Vector(vec![rng.random::<f64>() * 10.0, rng.random::<f64>()]))
            .collect();
        let st = reduce(&job, &xs).unwrap();
        assert_eq!(job.fit(&st).unwrap(), job.fit(&st).unwrap());
    }
}
