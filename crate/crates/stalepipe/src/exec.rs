//! Live pipelined executor.
//!
//! One worker thread per in-flight iteration runs the five stages of its
//! iteration in order. Each resource admits stages in a fixed FIFO order:
//! iteration by iteration, and on the shared host-to-device link stage 2
//! before stage 3 of the same iteration. The memory fetch of iteration `i`
//! additionally waits, while holding the link, until the last committed
//! update `i_upd` satisfies `i - i_upd <= k_i`. Committing stage 5 advances
//! `i_upd`.

use std::any::Any;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use stalepipe_core::pipeline::{PipelineError, Resource, Stage, StageProfile, StalenessPlan};
use stalepipe_core::sim::{Trace, TraceRecord};

pub type StageError = Box<dyn std::error::Error + Send + Sync>;

/// Per-stage work. `Slot` carries one iteration's intermediate results from
/// stage to stage.
pub trait Workload: Sync {
    type Slot: Send + Default;

    fn run_stage(&self, stage: Stage, iteration: usize, slot: &mut Self::Slot) -> Result<(), StageError>;
}

/// Which update the memory fetch of each iteration waits for.
#[derive(Debug, Clone, PartialEq)]
pub enum GatePolicy {
    /// Wait for the previous iteration's update (bound 1).
    Synchronous,
    /// Never wait.
    Unbounded,
    Plan(StalenessPlan),
}

impl GatePolicy {
    fn bound(&self, i: usize) -> Option<usize> {
        match self {
            GatePolicy::Synchronous => Some(1),
            GatePolicy::Unbounded => None,
            GatePolicy::Plan(p) => Some(p.k_at(i)),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("worker limit must be at least 1")]
    NoWorkers,
    #[error("no iterations to run")]
    NoIterations,
    #[error(transparent)]
    Plan(#[from] PipelineError),
    #[error("iteration {iteration}, stage {stage}: {message}")]
    Stage { iteration: usize, stage: Stage, message: String },
    #[error("iteration {iteration}, stage {stage} panicked: {message}")]
    Panic { iteration: usize, stage: Stage, message: String },
}

/// What the memory fetch of one iteration saw at the gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateObservation {
    pub iteration: usize,
    pub bound: Option<usize>,
    /// Latest committed update when the fetch started.
    pub committed: usize,
}

/// Outcome of a live run.
#[derive(Debug, Clone)]
pub struct LiveRun {
    pub trace: Trace,
    pub wall_ms: f64,
    pub max_in_flight: usize,
    pub gate: Vec<GateObservation>,
}

/// A ticket counter: holders of ticket `n` run after ticket `n - 1` advanced.
struct Turnstile {
    next: Mutex<usize>,
    cv: Condvar,
}

impl Turnstile {
    fn new() -> Self {
        Turnstile { next: Mutex::new(0), cv: Condvar::new() }
    }

    fn wait(&self, ticket: usize, abort: &AtomicBool) -> bool {
        let mut next = lock(&self.next);
        while *next != ticket {
            if abort.load(Ordering::SeqCst) {
                return false;
            }
            next = self.cv.wait(next).unwrap_or_else(|e| e.into_inner());
        }
        !abort.load(Ordering::SeqCst)
    }

    fn advance(&self) {
        *lock(&self.next) += 1;
        self.cv.notify_all();
    }

    fn wake(&self) {
        let _guard = lock(&self.next);
        self.cv.notify_all();
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn panic_message(payload: Box<dyn Any + Send>) -> String {
    payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "non-string panic payload".into())
}

struct Shared<'w, W> {
    work: &'w W,
    gate_policy: &'w GatePolicy,
    iterations: usize,
    t0: Instant,
    next_iteration: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    abort: AtomicBool,
    turnstiles: [Turnstile; 4],
    committed: Mutex<usize>,
    committed_cv: Condvar,
    error: Mutex<Option<ExecError>>,
}

impl<W: Workload> Shared<'_, W> {
    fn ms(&self) -> f64 {
        self.t0.elapsed().as_secs_f64() * 1e3
    }

    fn fail(&self, err: ExecError) {
        lock(&self.error).get_or_insert(err);
        self.abort.store(true, Ordering::SeqCst);
        for t in &self.turnstiles {
            t.wake();
        }
        let _guard = lock(&self.committed);
        self.committed_cv.notify_all();
    }

    fn ticket(stage: Stage, i: usize) -> usize {
        match stage {
            Stage::FetchFeature => 2 * (i - 1),
            Stage::FetchMemory => 2 * (i - 1) + 1,
            _ => i - 1,
        }
    }

    /// Blocks until `i - i_upd <= bound`; returns the observed `i_upd`.
    fn wait_gate(&self, i: usize, bound: Option<usize>) -> Option<usize> {
        let mut committed = lock(&self.committed);
        if let Some(k) = bound {
            while i > *committed + k {
                if self.abort.load(Ordering::SeqCst) {
                    return None;
                }
                committed = self.committed_cv.wait(committed).unwrap_or_else(|e| e.into_inner());
            }
        }
        assert!(bound.map_or(true, |k| i <= *committed + k), "gate violated at iteration {i}");
        Some(*committed)
    }

    fn worker(&self) -> (Vec<TraceRecord>, Vec<GateObservation>) {
        let mut records = Vec::new();
        let mut gates = Vec::new();
        loop {
            if self.abort.load(Ordering::SeqCst) {
                break;
            }
            let i = self.next_iteration.fetch_add(1, Ordering::SeqCst) + 1;
            if i > self.iterations {
                break;
            }
            let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            self.max_in_flight.fetch_max(now, Ordering::SeqCst);
            let mut slot = W::Slot::default();
            let finished = self.run_iteration(i, &mut slot, &mut records, &mut gates);
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            if !finished {
                break;
            }
        }
        (records, gates)
    }

    fn run_iteration(&self, i: usize, slot: &mut W::Slot, records: &mut Vec<TraceRecord>, gates: &mut Vec<GateObservation>) -> bool {
        for stage in Stage::ALL {
            let turnstile = &self.turnstiles[stage.resource().index()];
            if !turnstile.wait(Self::ticket(stage, i), &self.abort) {
                return false;
            }
            let mut gate_wait_ms = 0.0;
            if stage == Stage::FetchMemory {
                let ready = self.ms();
                let bound = self.gate_policy.bound(i);
                let Some(committed) = self.wait_gate(i, bound) else { return false };
                gate_wait_ms = self.ms() - ready;
                gates.push(GateObservation { iteration: i, bound, committed });
            }
            let start_ms = self.ms();
            let outcome = catch_unwind(AssertUnwindSafe(|| self.work.run_stage(stage, i, slot)));
            let end_ms = self.ms();
            let err = match outcome {
                Ok(Ok(())) => None,
                Ok(Err(e)) => Some(ExecError::Stage { iteration: i, stage, message: e.to_string() }),
                Err(payload) => Some(ExecError::Panic { iteration: i, stage, message: panic_message(payload) }),
            };
            if let Some(err) = err {
                self.fail(err);
                return false;
            }
            if stage == Stage::UpdateMemory {
                *lock(&self.committed) = i;
                self.committed_cv.notify_all();
            }
            turnstile.advance();
            records.push(TraceRecord { iteration: i, stage, resource: stage.resource(), start_ms, end_ms, gate_wait_ms });
        }
        true
    }
}

/// Runs `iterations` iterations of `work` with at most `worker_limit`
/// iterations in flight.
///
/// On the first stage error or panic the remaining workers stop at their
/// next wait and the error is returned with its iteration and stage.
pub fn execute<W: Workload>(work: &W, gate: &GatePolicy, iterations: usize, worker_limit: usize) -> Result<LiveRun, ExecError> {
    if worker_limit == 0 {
        return Err(ExecError::NoWorkers);
    }
    if iterations == 0 {
        return Err(ExecError::NoIterations);
    }
    if let GatePolicy::Plan(plan) = gate {
        if plan.iterations() < iterations {
            return Err(PipelineError::PlanLength { plan: plan.iterations(), expected: iterations }.into());
        }
        // A zero bound waits on the iteration's own update and never opens.
        if let Some(pos) = plan.k.iter().take(iterations).position(|&k| k == 0) {
            return Err(PipelineError::InvalidPlan { iteration: pos + 1, reason: "bound must be at least 1" }.into());
        }
    }
    let shared = Shared {
        work,
        gate_policy: gate,
        iterations,
        t0: Instant::now(),
        next_iteration: AtomicUsize::new(0),
        in_flight: AtomicUsize::new(0),
        max_in_flight: AtomicUsize::new(0),
        abort: AtomicBool::new(false),
        turnstiles: [Turnstile::new(), Turnstile::new(), Turnstile::new(), Turnstile::new()],
        committed: Mutex::new(0),
        committed_cv: Condvar::new(),
        error: Mutex::new(None),
    };
    let workers = worker_limit.min(iterations);
    let outputs: Vec<_> = thread::scope(|scope| {
        let handles: Vec<_> = (0..workers).map(|_| scope.spawn(|| shared.worker())).collect();
        handles.into_iter().map(|h| h.join().expect("worker panics are caught per stage")).collect()
    });
    let wall_ms = shared.ms();
    if let Some(err) = shared.error.into_inner().unwrap_or_else(|e| e.into_inner()) {
        return Err(err);
    }
    let (mut records, mut gates): (Vec<TraceRecord>, Vec<GateObservation>) = (Vec::new(), Vec::new());
    for (r, g) in outputs {
        records.extend(r);
        gates.extend(g);
    }
    records.sort_by_key(|a| (a.iteration, a.stage));
    gates.sort_by_key(|g| g.iteration);
    Ok(LiveRun { trace: Trace { records }, wall_ms, max_in_flight: shared.max_in_flight.into_inner(), gate: gates })
}

/// Sleeps for each stage's profiled time, scaled by `scale`.
#[derive(Debug, Clone)]
pub struct SleepWorkload {
    pub profile: StageProfile,
    pub scale: f64,
}

impl SleepWorkload {
    pub fn new(profile: StageProfile) -> Self {
        SleepWorkload { profile, scale: 1.0 }
    }
}

impl Workload for SleepWorkload {
    type Slot = ();

    fn run_stage(&self, stage: Stage, _iteration: usize, _slot: &mut ()) -> Result<(), StageError> {
        precise_sleep(Duration::from_secs_f64(self.profile.tau(stage) * self.scale / 1e3));
        Ok(())
    }
}

/// Sleeps to just short of the deadline, then yields until it. Plain sleeps
/// overshoot by up to a millisecond on a busy machine.
fn precise_sleep(d: Duration) {
    const SLACK: Duration = Duration::from_millis(2);
    let deadline = Instant::now() + d;
    if d > SLACK {
        thread::sleep(d - SLACK);
    }
    while Instant::now() < deadline {
        thread::yield_now();
    }
}

/// Mean duration of each stage over iterations after `warmup`.
pub fn mean_stage_times(trace: &Trace, warmup: usize) -> Option<[f64; 5]> {
    let mut sum = [0.0; 5];
    let mut count = [0usize; 5];
    for r in trace.records.iter().filter(|r| r.iteration > warmup) {
        sum[r.stage.index()] += r.end_ms - r.start_ms;
        count[r.stage.index()] += 1;
    }
    if count.contains(&0) {
        return None;
    }
    Some(std::array::from_fn(|j| sum[j] / count[j] as f64))
}

/// Largest overlap between consecutive records of one resource, in ms.
pub fn max_resource_overlap(trace: &Trace) -> f64 {
    let mut worst: f64 = 0.0;
    for res in Resource::ALL {
        let mut on: Vec<&TraceRecord> = trace.records.iter().filter(|r| r.resource == res).collect();
        on.sort_by(|a, b| a.start_ms.total_cmp(&b.start_ms));
        for w in on.windows(2) {
            worst = worst.max(w[0].end_ms - w[1].start_ms);
        }
    }
    worst
}
