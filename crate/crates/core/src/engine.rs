//! The sample, resample, estimate, expand loop with its worker pool and
//! shared error board.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::bootstrap::{draw_evaluated, relative_or_absolute_error, Resample, SharingPlan};
use crate::datastore::{BlockFile, Record};
use crate::delta::update_resample_naive;
use crate::error::{EarlError, Result};
use crate::jobs::{Detail, Job};
use crate::sampling::{
    postmap_sample, reservoir_sample, InclusionBitmap, PostMapStore, PreMapSource, RecordSource,
    ReservoirSource, Sample, SamplerMode,
};
use crate::ssabe::{apply_delta, feasibility_gate, run_ssabe, CvCurve, EstimatorConfig, Gate, MIN_RUNG};
use crate::{derive_rng, EarlRng};

/// Records drawn to estimate the dataset size before pre-map pilot sampling.
pub const PREMAP_PROBE: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub worker_id: usize,
    pub timestamp: u64,
    pub cv: f64,
}

/// Append-only log of worker error reports.
#[derive(Debug, Default)]
pub struct ErrorBoard {
    log: Mutex<Vec<ErrorReport>>,
    clock: AtomicU64,
}

impl ErrorBoard {
    pub fn new() -> Self {
        ErrorBoard::default()
    }

    pub fn post(&self, worker_id: usize, cv: f64) -> ErrorReport {
        let mut log = self.log.lock().expect("board lock");
        let report = ErrorReport {
            worker_id,
            timestamp: self.clock.fetch_add(1, Ordering::SeqCst) + 1,
            cv,
        };
        log.push(report);
        report
    }

    /// Reports strictly newer than `cursor`, in worker order.
    pub fn reports_after(&self, cursor: u64) -> Vec<ErrorReport> {
        let log = self.log.lock().expect("board lock");
        let mut out: Vec<ErrorReport> = log.iter().filter(|r| r.timestamp > cursor).copied().collect();
        out.sort_by_key(|r| (r.worker_id, r.timestamp));
        out
    }

    /// Timestamp of the latest report, usable as the next cursor.
    pub fn now(&self) -> u64 {
        self.clock.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.log.lock().expect("board lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mean c_v of reports newer than `cursor`; `None` when there are none.
pub fn average_board_error(board: &ErrorBoard, cursor: u64) -> Option<f64> {
    let reports = board.reports_after(cursor);
    if reports.is_empty() {
        return None;
    }
    Some(reports.iter().map(|r| r.cv).sum::<f64>() / reports.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureSpec {
    pub worker: usize,
    pub iteration: usize,
}

impl std::str::FromStr for FailureSpec {
    type Err = EarlError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || EarlError::invalid(format!("failure must look like worker:iteration, got `{s}`"));
        let (w, i) = s.split_once(':').ok_or_else(bad)?;
        let iteration: usize = i.trim().parse().map_err(|_| bad())?;
        if iteration == 0 {
            return Err(EarlError::invalid("iterations are numbered from 1"));
        }
        Ok(FailureSpec {
            worker: w.trim().parse().map_err(|_| bad())?,
            iteration,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    Early,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeConfig {
    pub sampler: SamplerMode,
    pub seed: u64,
    pub workers: usize,
    pub bootstraps: Option<usize>,
    pub intra_sharing: bool,
    pub failures: Vec<FailureSpec>,
    pub mode: RunMode,
    pub max_iterations: usize,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            sampler: SamplerMode::PreMap,
            seed: 0,
            workers: 4,
            bootstraps: None,
            intra_sharing: true,
            failures: Vec::new(),
            mode: RunMode::Early,
            max_iterations: 64,
        }
    }
}

impl RuntimeConfig {
    /// Marks `worker_ids` to stop partway through iteration `at`.
    pub fn inject_failure(&mut self, worker_ids: &[usize], at: usize) {
        for &worker in worker_ids {
            self.failures.push(FailureSpec { worker, iteration: at });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultMode {
    Early,
    Full,
    Degraded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalResult {
    pub estimate: f64,
    pub cv: f64,
    /// True when `cv` is an absolute spread because the replicate mean was zero.
    pub cv_absolute: bool,
    #[serde(rename = "B")]
    pub b: usize,
    pub n: usize,
    pub p: f64,
    pub iterations: usize,
    /// Record updates performed by the main loop.
    pub records_processed: u64,
    /// Record updates spent estimating B and n on the pilot sample.
    pub pilot_records: u64,
    /// Record updates avoided by reusing shared resample prefixes.
    pub saved_updates: u64,
    pub mode: ResultMode,
    pub seed: u64,
    pub surviving_replicates: usize,
    pub b_stabilized: bool,
    pub detail: Detail,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: usize,
    pub n: usize,
    #[serde(rename = "B")]
    pub b: usize,
    pub cv: f64,
    pub records_processed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub result: FinalResult,
    pub trace: Vec<IterationTrace>,
    pub curve: Option<CvCurve>,
}

impl RunReport {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,n,B,cv,records_processed\n");
        for t in &self.trace {
            out.push_str(&format!("{},{},{},{},{}\n", t.iteration, t.n, t.b, t.cv, t.records_processed));
        }
        out
    }
}

/// Exact answer over every record. Returns the corrected finalize output
/// and the number of records read.
pub fn full_scan<J: Job>(bf: &BlockFile, job: &J) -> Result<(crate::jobs::Finalized, u64)> {
    let mut state = job.initialize();
    let mut records = 0u64;
    for rec in bf.scan()? {
        job.update(&mut state, &rec?.value, 1)?;
        records += 1;
    }
    let mut out = job.finalize(&state)?;
    out.estimate = job.correct(out.estimate, 1.0)?;
    Ok((out, records))
}

enum Source<'a> {
    Pre(PreMapSource<'a>),
    Post(PostMapStore),
    Reservoir(ReservoirSource),
}

impl RecordSource for Source<'_> {
    fn draw_fresh(&mut self, want: usize, rng: &mut EarlRng) -> Result<Vec<Record>> {
        match self {
            Source::Pre(s) => s.draw_fresh(want, rng),
            Source::Post(s) => s.draw_fresh(want, rng),
            Source::Reservoir(s) => s.draw_fresh(want, rng),
        }
    }

    fn kv_count_estimate(&self, sample: &[Record]) -> f64 {
        match self {
            Source::Pre(s) => s.kv_count_estimate(sample),
            Source::Post(s) => s.kv_count_estimate(sample),
            Source::Reservoir(s) => s.kv_count_estimate(sample),
        }
    }

    fn mode(&self) -> SamplerMode {
        match self {
            Source::Pre(s) => s.mode(),
            Source::Post(s) => s.mode(),
            Source::Reservoir(s) => s.mode(),
        }
    }
}

/// Fresh records for expansion: unused pilot records first, then the sampler.
struct Feed<'a> {
    reserve: VecDeque<Record>,
    source: Source<'a>,
}

impl Feed<'_> {
    fn draw(&mut self, want: usize, rng: &mut EarlRng) -> Result<Vec<Record>> {
        let from_reserve = want.min(self.reserve.len());
        let mut out: Vec<Record> = self.reserve.drain(..from_reserve).collect();
        if out.len() < want {
            out.extend(self.source.draw_fresh(want - out.len(), rng)?);
        }
        Ok(out)
    }
}

struct Worker<S> {
    id: usize,
    alive: bool,
    /// (replicate index, resample, state)
    shard: Vec<(usize, Resample, S)>,
}

struct WorkerOutput {
    estimates: Vec<(usize, f64)>,
    touches: u64,
    saved: u64,
    failed: bool,
}

fn full_result<J: Job>(
    bf: &BlockFile,
    job: &J,
    rt: &RuntimeConfig,
    iterations: usize,
    prior_records: u64,
    pilot_records: u64,
) -> Result<FinalResult> {
    let (fin, records) = full_scan(bf, job)?;
    Ok(FinalResult {
        estimate: fin.estimate,
        cv: 0.0,
        cv_absolute: false,
        b: 1,
        n: records as usize,
        p: 1.0,
        iterations,
        records_processed: prior_records + records,
        pilot_records,
        saved_updates: 0,
        mode: ResultMode::Full,
        seed: rt.seed,
        surviving_replicates: 0,
        b_stabilized: true,
        detail: fin.detail,
    })
}

fn open_feed<'a>(
    bf: &'a BlockFile,
    bitmap: &'a mut InclusionBitmap,
    mode: SamplerMode,
    p_init: f64,
    rng: &mut EarlRng,
) -> Result<Option<(Sample, Feed<'a>)>> {
    let pilot_size = |big_n: f64| ((p_init * big_n).ceil() as usize).max(MIN_RUNG);
    match mode {
        SamplerMode::PreMap => {
            let mut src = PreMapSource::new(bf, bitmap);
            let mut items = src.draw_fresh(PREMAP_PROBE, rng)?;
            let big_n = src.kv_count_estimate(&items);
            let want = pilot_size(big_n);
            if items.len() < PREMAP_PROBE.min(want) || want as f64 >= big_n {
                return Ok(None);
            }
            if items.len() < want {
                let more = src.draw_fresh(want - items.len(), rng)?;
                if more.len() < want - items.len() {
                    return Ok(None);
                }
                items.extend(more);
            }
            let reserve: VecDeque<Record> = items.split_off(want.min(items.len())).into();
            let mut s = Sample::from_records(items, SamplerMode::PreMap);
            s.set_kv_count_estimate(src.kv_count_estimate(s.items()));
            Ok(Some((
                s,
                Feed {
                    reserve,
                    source: Source::Pre(src),
                },
            )))
        }
        SamplerMode::PostMap => {
            let records = bf.scan()?.collect::<Result<Vec<_>>>()?;
            let want = pilot_size(records.len() as f64);
            if want >= records.len() {
                return Ok(None);
            }
            match postmap_sample(records, want, rng) {
                Ok((s, store)) => Ok(Some((
                    s,
                    Feed {
                        reserve: VecDeque::new(),
                        source: Source::Post(store),
                    },
                ))),
                Err(EarlError::FullDataMode { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        }
        SamplerMode::Reservoir => {
            let records = bf.scan()?.collect::<Result<Vec<_>>>()?;
            let want = pilot_size(records.len() as f64);
            if want >= records.len() {
                return Ok(None);
            }
            let s = reservoir_sample(records.iter().cloned(), want, rng);
            let src = ReservoirSource::new(records, &s);
            Ok(Some((
                s,
                Feed {
                    reserve: VecDeque::new(),
                    source: Source::Reservoir(src),
                },
            )))
        }
    }
}

/// Runs `job` to error bound `cfg.sigma`, growing the sample as needed.
pub fn run_job<J: Job>(bf: &BlockFile, job: &J, cfg: &EstimatorConfig, rt: &RuntimeConfig) -> Result<RunReport> {
    cfg.validate()?;
    if rt.workers == 0 {
        return Err(EarlError::invalid("at least one worker is required"));
    }
    let full_report = |iterations, prior, pilot, curve| -> Result<RunReport> {
        Ok(RunReport {
            result: full_result(bf, job, rt, iterations, prior, pilot)?,
            trace: Vec::new(),
            curve,
        })
    };
    if rt.mode == RunMode::Full {
        return full_report(0, 0, 0, None);
    }

    let mut sample_rng = derive_rng(rt.seed, &[0]);
    let mut bitmap = InclusionBitmap::new(bf.split_count());
    let Some((s_init, mut feed)) = open_feed(bf, &mut bitmap, rt.sampler, cfg.p_init, &mut sample_rng)? else {
        return full_report(0, 0, 0, None);
    };
    let big_n = s_init.kv_count_estimate().round().max(s_init.len() as f64) as usize;

    let mut ssabe_rng = derive_rng(rt.seed, &[1]);
    let plan = run_ssabe(&s_init, job, cfg, big_n, rt.bootstraps, rt.intra_sharing, &mut ssabe_rng)?;
    let pilot_records = plan.touches;
    if plan.gate == Gate::Full {
        return full_report(0, 0, pilot_records, Some(plan.curve));
    }
    let b = plan.b;
    let mut curve = plan.curve;

    let mut sample = s_init.prefix(plan.n);
    feed.reserve.extend(s_init.items()[sample.len()..].iter().cloned());
    if plan.n > sample.len() {
        let more = feed.draw(plan.n - sample.len(), &mut sample_rng)?;
        sample = Sample::from_records(sample.items().iter().cloned().chain(more).collect(), rt.sampler);
    }
    sample.set_kv_count_estimate(feed.source.kv_count_estimate(sample.items()).max(big_n as f64));

    let workers_used = rt.workers.min((b / 2).max(1));
    let mut workers: Vec<Worker<J::State>> = (0..workers_used)
        .map(|id| Worker {
            id,
            alive: true,
            shard: Vec::new(),
        })
        .collect();
    let board = ErrorBoard::new();
    let mut cursor = board.now();
    let mut trace = Vec::new();
    let mut records_processed = 0u64;
    let mut saved_updates = 0u64;
    let mut degraded = false;
    let mut last_delta = 0usize;

    for iteration in 1..=rt.max_iterations {
        let n = sample.len();
        let failing: Vec<bool> = workers
            .iter()
            .map(|w| rt.failures.iter().any(|f| f.worker == w.id && f.iteration == iteration))
            .collect();
        let outputs: Vec<Result<WorkerOutput>> = std::thread::scope(|scope| {
            let handles: Vec<_> = workers
                .iter_mut()
                .zip(&failing)
                .filter(|(w, _)| w.alive)
                .map(|(w, &fail)| {
                    let sample = &sample;
                    let board = &board;
                    scope.spawn(move || {
                        run_worker(job, w, sample, b, workers_used, iteration, last_delta, fail, rt, board)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });

        let mut estimates: Vec<(usize, f64)> = Vec::with_capacity(b);
        for out in outputs {
            let out = out?;
            records_processed += out.touches;
            saved_updates += out.saved;
            if out.failed {
                degraded = true;
            } else {
                estimates.extend(out.estimates);
            }
        }
        for (w, &fail) in workers.iter_mut().zip(&failing) {
            if fail && w.alive {
                w.alive = false;
                w.shard.clear();
            }
        }
        if estimates.is_empty() {
            return Err(EarlError::NoSurvivors);
        }
        estimates.sort_by_key(|&(i, _)| i);
        let values: Vec<f64> = estimates.iter().map(|&(_, x)| x).collect();
        let (pooled, absolute) = if values.len() >= 2 {
            relative_or_absolute_error(&values)?
        } else {
            (f64::INFINITY, false)
        };
        let board_avg = average_board_error(&board, cursor).unwrap_or(pooled);
        cursor = board.now();
        trace.push(IterationTrace {
            iteration,
            n,
            b,
            cv: pooled,
            records_processed,
        });

        if board_avg <= cfg.sigma && pooled <= cfg.sigma {
            let p = n as f64 / sample.kv_count_estimate();
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let estimate = job.correct(mean, p)?;
            let mut whole = job.initialize();
            for rec in sample.items() {
                job.update(&mut whole, &rec.value, 1)?;
            }
            records_processed += n as u64;
            let detail = job.finalize(&whole)?.detail;
            return Ok(RunReport {
                result: FinalResult {
                    estimate,
                    cv: pooled,
                    cv_absolute: absolute,
                    b,
                    n,
                    p,
                    iterations: iteration,
                    records_processed,
                    pilot_records,
                    saved_updates,
                    mode: if degraded { ResultMode::Degraded } else { ResultMode::Early },
                    seed: rt.seed,
                    surviving_replicates: values.len(),
                    b_stabilized: plan.b_stabilized,
                    detail,
                },
                trace,
                curve: Some(curve),
            });
        }

        // Expand: refit with the new point, clamp the growth to [n/10, n].
        let mut points = curve.points.clone();
        if pooled.is_finite() {
            points.push((n, pooled));
        }
        curve = CvCurve::fit(points)?;
        let total = sample.kv_count_estimate().round() as usize;
        let target = curve.required_n(cfg.sigma, n, total.max(n));
        let n_next = target.clamp(n + n.div_ceil(10), 2 * n).min(total);
        if n_next <= n || feasibility_gate(b, n_next, total) == Gate::Full {
            let mut r = full_report(iteration, records_processed, pilot_records, Some(curve))?;
            r.trace = trace;
            return Ok(r);
        }
        let fresh = feed.draw(n_next - n, &mut sample_rng)?;
        if fresh.len() < n_next - n {
            let mut r = full_report(iteration, records_processed, pilot_records, Some(curve))?;
            r.trace = trace;
            return Ok(r);
        }
        last_delta = fresh.len();
        sample.push_batch(fresh);
        let kv = feed.source.kv_count_estimate(sample.items());
        sample.set_kv_count_estimate(kv.max(sample.len() as f64));
    }
    let mut r = full_report(rt.max_iterations, records_processed, pilot_records, Some(curve))?;
    r.trace = trace;
    Ok(r)
}

#[allow(clippy::too_many_arguments)]
fn run_worker<J: Job>(
    job: &J,
    w: &mut Worker<J::State>,
    sample: &Sample,
    b: usize,
    workers: usize,
    iteration: usize,
    delta_len: usize,
    fail: bool,
    rt: &RuntimeConfig,
    board: &ErrorBoard,
) -> Result<WorkerOutput> {
    let mut rng = derive_rng(rt.seed, &[2, iteration as u64, w.id as u64]);
    let mine: Vec<usize> = (w.id..b).step_by(workers).collect();
    let quota = if fail { mine.len() / 2 } else { mine.len() };
    let items = sample.items();
    let mut out = WorkerOutput {
        estimates: Vec::with_capacity(mine.len()),
        touches: 0,
        saved: 0,
        failed: fail,
    };
    if iteration == 1 || w.shard.is_empty() {
        w.shard.clear();
        let mut plan = rt.intra_sharing.then(|| SharingPlan::new(sample.len()));
        for &idx in mine.iter().take(quota) {
            let ev = draw_evaluated(job, sample, &mut rng, plan.as_mut())?;
            out.touches += ev.touches;
            out.estimates.push((idx, job.finalize(&ev.state)?.estimate));
            w.shard.push((idx, ev.resample, ev.state));
        }
        out.saved = plan.map_or(0, |p| p.saved());
    } else {
        for (idx, resample, state) in w.shard.iter_mut().take(quota) {
            let delta = update_resample_naive(resample, delta_len, &mut rng)?;
            let (removed, added) = delta.net();
            out.touches += apply_delta(job, state, items, resample.counts(), &removed, &added)?;
            out.estimates.push((*idx, job.finalize(state)?.estimate));
        }
    }
    if !fail {
        let values: Vec<f64> = out.estimates.iter().map(|&(_, x)| x).collect();
        if values.len() >= 2 {
            board.post(w.id, relative_or_absolute_error(&values)?.0);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn board_average_examples() {
        let board = ErrorBoard::new();
        assert_eq!(average_board_error(&board, 0), None);
        board.post(0, 0.1);
        board.post(1, 0.3);
        assert!((average_board_error(&board, 0).unwrap() - 0.2).abs() < 1e-15);
        let cursor = board.now();
        assert_eq!(average_board_error(&board, cursor), None);
    }

    #[test]
    fn board_cursor_reads_newer_round_only() {
        let board = ErrorBoard::new();
        for w in 0..3 {
            board.post(w, 1.0);
        }
        let cursor = board.now();
        for (w, cv) in [0.1, 0.2, 0.6].into_iter().enumerate() {
            board.post(w, cv);
        }
        assert!((average_board_error(&board, cursor).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(board.len(), 6);
    }

    #[test]
    fn timestamps_increase_per_worker() {
        let board = ErrorBoard::new();
        std::thread::scope(|s| {
            for w in 0..4 {
                let board = &board;
                s.spawn(move || {
                    for _ in 0..50 {
                        board.post(w, 0.0);
                    }
                });
            }
        });
        let all = board.reports_after(0);
        for w in 0..4 {
            let ts: Vec<u64> = all.iter().filter(|r| r.worker_id == w).map(|r| r.timestamp).collect();
            assert!(ts.windows(2).all(|p| p[0] < p[1]));
        }
    }

    #[test]
    fn failure_spec_parse() {
        assert_eq!("0:1".parse::<FailureSpec>().unwrap(), FailureSpec { worker: 0, iteration: 1 });
        assert!("0".parse::<FailureSpec>().is_err());
        assert!("0:0".parse::<FailureSpec>().is_err());
        assert!("a:1".parse::<FailureSpec>().is_err());
    }
}
