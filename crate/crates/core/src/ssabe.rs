//! Sample size and bootstrap count estimation, run once on a pilot sample
//! before the main loop.

use serde::{Deserialize, Serialize};

use crate::bootstrap::{
    draw_evaluated, evaluate, relative_or_absolute_error, RunningCv, SharingPlan,
};
use crate::delta::update_resample_naive;
use crate::error::{EarlError, Result};
use crate::jobs::Job;
use crate::sampling::Sample;
use crate::EarlRng;

/// Consecutive c_v changes averaged by the stopping rule of [`estimate_b`].
pub const STABILITY_WINDOW: usize = 5;
/// Smallest subsample used on the size ladder.
pub const MIN_RUNG: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub sigma: f64,
    pub tau: f64,
    pub p_init: f64,
    pub ladder_depth: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            sigma: 0.05,
            tau: 0.01,
            p_init: 0.01,
            ladder_depth: 5,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return Err(EarlError::invalid(format!("sigma must lie in (0, 1), got {}", self.sigma)));
        }
        if !(self.tau > 0.0 && self.tau < self.sigma) {
            return Err(EarlError::invalid(format!("tau must lie in (0, sigma), got {}", self.tau)));
        }
        if !(self.p_init > 0.0 && self.p_init < 1.0) {
            return Err(EarlError::invalid(format!("p_init must lie in (0, 1), got {}", self.p_init)));
        }
        if self.ladder_depth < 2 {
            return Err(EarlError::invalid("ladder depth must be at least 2"));
        }
        Ok(())
    }

    pub fn b_cap(&self) -> usize {
        ((1.0 / self.tau).ceil() as usize).max(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BEstimate {
    pub b: usize,
    pub stabilized: bool,
    /// c_v after each bootstrap count from 2 on.
    pub cvs: Vec<(usize, f64)>,
    pub touches: u64,
    pub saved: u64,
}

/// Smallest bootstrap count at which c_v has settled.
///
/// Resamples are added one at a time. The sweep stops once the mean
/// relative change of c_v over the last [`STABILITY_WINDOW`] steps falls
/// below `tau`; it gives up at `ceil(1/tau)`.
pub fn estimate_b<J: Job>(
    s_init: &Sample,
    job: &J,
    cfg: &EstimatorConfig,
    rng: &mut EarlRng,
    intra_sharing: bool,
) -> Result<BEstimate> {
    sweep_b(s_init, job, cfg, rng, intra_sharing, cfg.b_cap())
}

fn sweep_b<J: Job>(
    s_init: &Sample,
    job: &J,
    cfg: &EstimatorConfig,
    rng: &mut EarlRng,
    intra_sharing: bool,
    cap: usize,
) -> Result<BEstimate> {
    let mut plan = intra_sharing.then(|| SharingPlan::new(s_init.len()));
    let mut running = RunningCv::default();
    let mut cvs = Vec::new();
    let mut changes: Vec<f64> = Vec::new();
    let mut touches = 0;
    for b in 1..=cap {
        let ev = draw_evaluated(job, s_init, rng, plan.as_mut())?;
        touches += ev.touches;
        let x = job.finalize(&ev.state)?.estimate;
        if !x.is_finite() {
            return Err(EarlError::job("non-finite replicate estimate"));
        }
        running.push(x);
        if b < 2 {
            continue;
        }
        let cv = running.cv();
        if let Some(&(_, prev)) = cvs.last() {
            let scale = f64::max(cv, prev);
            changes.push(if scale > 0.0 { (cv - prev).abs() / scale } else { 0.0 });
        }
        cvs.push((b, cv));
        if changes.len() >= STABILITY_WINDOW {
            let recent = &changes[changes.len() - STABILITY_WINDOW..];
            if recent.iter().sum::<f64>() / (STABILITY_WINDOW as f64) < cfg.tau {
                let b = if cvs.iter().all(|&(_, c)| c == 0.0) { 2 } else { b };
                return Ok(BEstimate {
                    b,
                    stabilized: true,
                    cvs,
                    touches,
                    saved: plan.map_or(0, |p| p.saved()),
                });
            }
        }
    }
    Ok(BEstimate {
        b: cap,
        stabilized: false,
        cvs,
        touches,
        saved: plan.map_or(0, |p| p.saved()),
    })
}

/// Least-squares fit of `c_v(n) = a / sqrt(n) + b` with `a >= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCurve {
    pub points: Vec<(usize, f64)>,
    pub a: f64,
    pub b: f64,
    pub residual: f64,
}

impl CvCurve {
    pub fn fit(points: Vec<(usize, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(EarlError::invalid("cannot fit an empty curve"));
        }
        let xs: Vec<f64> = points.iter().map(|&(n, _)| 1.0 / (n as f64).sqrt()).collect();
        let ys: Vec<f64> = points.iter().map(|&(_, c)| c).collect();
        // c_v estimates carry roughly constant relative noise, so each point
        // is weighted by 1 / c_v^2.
        let ws: Vec<f64> = if ys.iter().all(|&c| c > 0.0 && c.is_finite()) {
            ys.iter().map(|c| 1.0 / (c * c)).collect()
        } else {
            vec![1.0; ys.len()]
        };
        let m: f64 = ws.iter().sum();
        let mx = xs.iter().zip(&ws).map(|(x, w)| x * w).sum::<f64>() / m;
        let my = ys.iter().zip(&ws).map(|(y, w)| y * w).sum::<f64>() / m;
        let sxx: f64 = xs.iter().zip(&ws).map(|(x, w)| w * (x - mx).powi(2)).sum();
        let sxy: f64 = xs.iter().zip(&ys).zip(&ws).map(|((x, y), w)| w * (x - mx) * (y - my)).sum();
        let (mut a, mut b) = if sxx > 0.0 {
            let a = sxy / sxx;
            (a, my - a * mx)
        } else {
            // One distinct size: attribute all error to sampling.
            (my / mx, 0.0)
        };
        if a < 0.0 {
            a = 0.0;
            b = my;
        }
        let residual = xs.iter().zip(&ys).map(|(x, y)| (y - a * x - b).powi(2)).sum();
        Ok(CvCurve { points, a, b, residual })
    }

    pub fn predict(&self, n: f64) -> f64 {
        self.a / n.sqrt() + self.b
    }

    /// Smallest `n` in `[floor, cap]` with predicted c_v at most `sigma`;
    /// `cap` when the curve never gets there.
    pub fn required_n(&self, sigma: f64, floor: usize, cap: usize) -> usize {
        let floor = floor.min(cap);
        if self.a == 0.0 {
            return if self.b <= sigma { floor } else { cap };
        }
        if self.b >= sigma {
            return cap;
        }
        let raw = (self.a / (sigma - self.b)).powi(2);
        let mut n = raw.ceil() as usize;
        // Guard against the ceiling landing one short through rounding.
        while n < cap && self.predict(n as f64) > sigma {
            n += 1;
        }
        n.clamp(floor, cap)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,cv\n");
        for (n, cv) in &self.points {
            out.push_str(&format!("{n},{cv}\n"));
        }
        out
    }
}

/// Ladder sizes `n / 2^(l - i)` for `i = 1..=l`, raised to [`MIN_RUNG`].
pub fn ladder(n: usize, depth: usize) -> Vec<usize> {
    let mut rungs: Vec<usize> = (1..=depth)
        .map(|i| (n >> (depth - i).min(63)).max(MIN_RUNG).min(n))
        .collect();
    rungs.dedup();
    rungs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NEstimate {
    pub n: usize,
    pub curve: CvCurve,
    pub touches: u64,
}

/// Smallest sample size whose fitted c_v meets `sigma`, capped at `big_n`.
///
/// Each resample is drawn on the smallest rung and grown rung to rung by
/// delta maintenance, so job states are updated rather than rebuilt.
pub fn estimate_n<J: Job>(
    s_init: &Sample,
    b: usize,
    job: &J,
    cfg: &EstimatorConfig,
    big_n: usize,
    rng: &mut EarlRng,
) -> Result<NEstimate> {
    if s_init.is_empty() {
        return Err(EarlError::EmptySample);
    }
    let rungs = ladder(s_init.len(), cfg.ladder_depth);
    let items = s_init.items();
    let mut per_rung: Vec<Vec<f64>> = vec![Vec::with_capacity(b); rungs.len()];
    let mut touches = 0u64;
    let first = s_init.prefix(rungs[0]);
    for _ in 0..b {
        let ev = draw_evaluated(job, &first, rng, None)?;
        let (mut resample, mut state) = (ev.resample, ev.state);
        touches += ev.touches;
        per_rung[0].push(job.finalize(&state)?.estimate);
        for (i, w) in rungs.windows(2).enumerate() {
            let delta = update_resample_naive(&mut resample, w[1] - w[0], rng)?;
            let (removed, added) = delta.net();
            touches += apply_delta(job, &mut state, items, resample.counts(), &removed, &added)?;
            per_rung[i + 1].push(job.finalize(&state)?.estimate);
        }
    }
    let mut points = Vec::with_capacity(rungs.len());
    for (&n, est) in rungs.iter().zip(&per_rung) {
        let cv = if est.len() >= 2 {
            relative_or_absolute_error(est)?.0
        } else {
            0.0
        };
        points.push((n, cv));
    }
    let curve = CvCurve::fit(points)?;
    let n = if curve.points.iter().all(|&(_, c)| c == 0.0) {
        rungs[0]
    } else {
        curve.required_n(cfg.sigma, rungs[0], big_n.max(rungs[0]))
    };
    Ok(NEstimate { n, curve, touches })
}

/// Applies a resample change to a job state. Falls back to a rebuild from
/// `counts` when the job cannot retract. Returns the record updates made.
pub fn apply_delta<J: Job>(
    job: &J,
    state: &mut J::State,
    items: &[crate::datastore::Record],
    counts: &[u32],
    removed: &std::collections::BTreeMap<usize, u32>,
    added: &std::collections::BTreeMap<usize, u32>,
) -> Result<u64> {
    let mut touches = 0u64;
    for (&pos, &c) in removed {
        if !job.retract(state, &items[pos].value, c)? {
            let (rebuilt, t) = evaluate(job, items, counts)?;
            *state = rebuilt;
            return Ok(touches + t);
        }
        touches += u64::from(c);
    }
    for (&pos, &c) in added {
        job.update(state, &items[pos].value, c)?;
        touches += u64::from(c);
    }
    Ok(touches)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    Early,
    Full,
}

/// Early estimation pays off only while `B n < N`.
pub fn feasibility_gate(b: usize, n: usize, big_n: usize) -> Gate {
    if (b as u128) * (n as u128) >= big_n as u128 {
        Gate::Full
    } else {
        Gate::Early
    }
}

/// Bootstrap count suggested by theory for Monte-Carlo error `epsilon0`.
pub fn theoretical_b(epsilon0: f64) -> usize {
    assert!(epsilon0 > 0.0, "epsilon must be positive");
    (0.5 / (epsilon0 * epsilon0) - 1e-9).ceil().max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsabeOutcome {
    pub b: usize,
    pub b_stabilized: bool,
    pub n: usize,
    pub curve: CvCurve,
    pub gate: Gate,
    pub touches: u64,
    pub saved: u64,
}

/// Both phases on the pilot sample. `b_override` skips the B sweep.
pub fn run_ssabe<J: Job>(
    s_init: &Sample,
    job: &J,
    cfg: &EstimatorConfig,
    big_n: usize,
    b_override: Option<usize>,
    intra_sharing: bool,
    rng: &mut EarlRng,
) -> Result<SsabeOutcome> {
    cfg.validate()?;
    let (b, b_stabilized, mut touches, saved) = match b_override {
        Some(b) if b < 2 => return Err(EarlError::invalid("at least two bootstraps are required")),
        Some(b) => (b, true, 0, 0),
        None => {
            // Past B |s| >= N the sweep alone costs a full scan.
            let limit = big_n.div_ceil(s_init.len().max(1)).max(2);
            let e = sweep_b(s_init, job, cfg, rng, intra_sharing, cfg.b_cap().min(limit))?;
            (e.b, e.stabilized, e.touches, e.saved)
        }
    };
    let ne = estimate_n(s_init, b, job, cfg, big_n, rng)?;
    touches += ne.touches;
    let over_budget = !b_stabilized && (b as u128) * (s_init.len() as u128) >= big_n as u128;
    Ok(SsabeOutcome {
        b,
        b_stabilized,
        n: ne.n,
        gate: if over_budget { Gate::Full } else { feasibility_gate(b, ne.n, big_n) },
        curve: ne.curve,
        touches,
        saved,
    })
}
