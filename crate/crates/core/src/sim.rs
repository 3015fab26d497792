//! Discrete-event simulation of the pipeline and trace analysis.
//!
//! The simulator knows nothing about the timing recurrence. It advances a
//! clock over stage completions; at every instant it starts each stage that
//! has finished its predecessor, holds its resource's turn and, for the
//! memory fetch, has seen its gated update complete. Each resource serves
//! stages in a fixed FIFO order (the host-to-device link alternates
//! fetch-feature and fetch-memory of consecutive iterations).

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::pipeline::{Dependency, PipelineError, Resource, Stage, StageProfile, Timeline};

/// One executed stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// 1-based iteration.
    pub iteration: usize,
    pub stage: Stage,
    pub resource: Resource,
    pub start_ms: f64,
    pub end_ms: f64,
    /// Time the stage was otherwise ready but blocked on the update gate.
    pub gate_wait_ms: f64,
}

/// Stage records ordered by iteration, then stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("deadlock at t={time_ms} ms; blocked stages (iteration, stage): {blocked:?}")]
    Deadlock { time_ms: f64, blocked: Vec<(usize, usize)> },
}

impl Trace {
    /// Trace of a timeline, for comparison with simulated or live runs.
    pub fn from_timeline(tl: &Timeline) -> Trace {
        let mut records = Vec::with_capacity(tl.iterations() * 5);
        for i in 1..=tl.iterations() {
            for stage in Stage::ALL {
                records.push(TraceRecord {
                    iteration: i,
                    stage,
                    resource: stage.resource(),
                    start_ms: tl.start(i, stage),
                    end_ms: tl.end(i, stage),
                    gate_wait_ms: if stage == Stage::FetchMemory { tl.gate_wait(i) } else { 0.0 },
                });
            }
        }
        Trace { records }
    }

    pub fn iterations(&self) -> usize {
        self.records.iter().map(|r| r.iteration).max().unwrap_or(0)
    }

    pub fn get(&self, iteration: usize, stage: Stage) -> Option<&TraceRecord> {
        self.records.iter().find(|r| r.iteration == iteration && r.stage == stage)
    }

    pub fn makespan(&self) -> f64 {
        let start = self.records.iter().map(|r| r.start_ms).fold(f64::INFINITY, f64::min);
        let end = self.records.iter().map(|r| r.end_ms).fold(f64::NEG_INFINITY, f64::max);
        if self.records.is_empty() {
            0.0
        } else {
            end - start
        }
    }

    fn sorted(&self) -> Vec<TraceRecord> {
        let mut r = self.records.clone();
        r.sort_by_key(|a| (a.iteration, a.stage));
        r
    }

    /// Start or end of `stage` per iteration, indexed by iteration - 1.
    fn column(&self, stage: Stage, end: bool) -> Vec<f64> {
        self.sorted()
            .iter()
            .filter(|r| r.stage == stage)
            .map(|r| if end { r.end_ms } else { r.start_ms })
            .collect()
    }
}

/// Runs the simulation for `iterations` iterations.
///
/// Bounded plans are only length-checked so that degenerate bounds (such as
/// 0, which waits on the iteration's own update) surface as deadlocks.
pub fn simulate(profile: &StageProfile, dep: Dependency<'_>, iterations: usize) -> Result<Trace, SimError> {
    if iterations == 0 {
        return Err(PipelineError::NoIterations.into());
    }
    if let Dependency::Bounded(plan) = dep {
        if plan.iterations() != iterations {
            return Err(PipelineError::PlanLength { plan: plan.iterations(), expected: iterations }.into());
        }
    }
    let tau = profile.taus();
    // Each resource's service order; `next[r]` indexes into it.
    let orders: [Vec<(usize, usize)>; 4] = [
        (1..=iterations).map(|i| (i, 0)).collect(),
        (1..=iterations).flat_map(|i| [(i, 1), (i, 2)]).collect(),
        (1..=iterations).map(|i| (i, 3)).collect(),
        (1..=iterations).map(|i| (i, 4)).collect(),
    ];
    let mut next = [0usize; 4];
    let mut busy: [Option<(usize, usize, f64)>; 4] = [None; 4];
    let mut free_at = [0.0f64; 4];
    let mut ends: Vec<[Option<f64>; 5]> = vec![[None; 5]; iterations];
    let mut records = Vec::with_capacity(iterations * 5);
    let mut now = 0.0f64;
    let mut done = 0;

    while done < iterations * 5 {
        // Start everything runnable now, lowest (iteration, stage) first.
        let mut heads: Vec<(usize, usize, usize)> = (0..4)
            .filter(|&r| busy[r].is_none() && next[r] < orders[r].len())
            .map(|r| (orders[r][next[r]].0, orders[r][next[r]].1, r))
            .collect();
        heads.sort_unstable();
        for (i, j, r) in heads {
            let pred_end = if j == 0 { Some(0.0) } else { ends[i - 1][j - 1] };
            let Some(pred_end) = pred_end else { continue };
            let mut gate_end = None;
            if j == 2 {
                let k = match dep {
                    Dependency::Synchronous => Some(1),
                    Dependency::Unbounded => None,
                    Dependency::Bounded(plan) => Some(plan.k_at(i)),
                };
                if let Some(k) = k.filter(|&k| i > k || k == 0) {
                    match ends[i - k - 1][4] {
                        Some(t) => gate_end = Some(t),
                        None => continue,
                    }
                }
            }
            let ready = pred_end.max(free_at[r]);
            let gate_wait = gate_end.map_or(0.0, |g| (g.max(ready)) - ready);
            let end = now + tau[j];
            busy[r] = Some((i, j, end));
            next[r] += 1;
            records.push(TraceRecord {
                iteration: i,
                stage: Stage::ALL[j],
                resource: Stage::ALL[j].resource(),
                start_ms: now,
                end_ms: end,
                gate_wait_ms: gate_wait,
            });
        }

        let Some(t) = busy.iter().flatten().map(|&(_, _, end)| end).reduce(f64::min) else {
            let blocked = (0..4).filter(|&r| next[r] < orders[r].len()).map(|r| {
                let (i, j) = orders[r][next[r]];
                (i, j + 1)
            });
            return Err(SimError::Deadlock { time_ms: now, blocked: blocked.collect() });
        };
        now = t;
        for r in 0..4 {
            if let Some((i, j, end)) = busy[r] {
                if end == t {
                    ends[i - 1][j] = Some(end);
                    free_at[r] = end;
                    busy[r] = None;
                    done += 1;
                }
            }
        }
    }
    records.sort_by_key(|a| (a.iteration, a.stage));
    Ok(Trace { records })
}

/// Outcome of a stall check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StallReport {
    pub stall_free: bool,
    /// First iteration whose training did not start when the previous ended.
    pub first_stall: Option<usize>,
    pub stall_count: usize,
    /// Summed idle time of the training resource after warmup.
    pub idle_ms: f64,
}

/// Checks that training of every iteration after `warmup` starts within
/// `eps_ms` of the previous iteration's training end.
pub fn verify_no_stall(trace: &Trace, warmup: usize, eps_ms: f64) -> StallReport {
    let starts = trace.column(Stage::Train, false);
    let ends = trace.column(Stage::Train, true);
    let mut report = StallReport { stall_free: true, first_stall: None, stall_count: 0, idle_ms: 0.0 };
    for i in (warmup.max(1) + 1)..=starts.len() {
        let gap = starts[i - 1] - ends[i - 2];
        if gap > eps_ms {
            report.stall_free = false;
            report.first_stall.get_or_insert(i);
            report.stall_count += 1;
            report.idle_ms += gap;
        }
    }
    report
}

/// Busy time over makespan for each resource, indexed by [`Resource::index`].
pub fn utilization(trace: &Trace) -> [f64; 4] {
    let span = trace.makespan();
    let mut busy = [0.0; 4];
    for r in &trace.records {
        busy[r.resource.index()] += r.end_ms - r.start_ms;
    }
    if span <= 0.0 {
        return [0.0; 4];
    }
    busy.map(|b| (b / span).min(1.0))
}

/// First pair of overlapping records on one resource, if any.
pub fn resource_overlap(trace: &Trace, eps_ms: f64) -> Option<(TraceRecord, TraceRecord)> {
    for res in Resource::ALL {
        let mut on: Vec<TraceRecord> = trace.records.iter().filter(|r| r.resource == res).copied().collect();
        on.sort_by(|a, b| a.start_ms.total_cmp(&b.start_ms));
        for w in on.windows(2) {
            if w[1].start_ms < w[0].end_ms - eps_ms {
                return Some((w[0], w[1]));
            }
        }
    }
    None
}
