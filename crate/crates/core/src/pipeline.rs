//! Analytic timing model of the five-stage training pipeline.
//!
//! Iteration `i` runs sample (1), fetch-feature (2), fetch-memory (3),
//! train (4) and update-memory (5). Each stage runs one iteration at a time,
//! stages 2 and 3 share the host-to-device link, and the memory fetch of
//! iteration `i` may be gated on the memory update of iteration `i - k_i`.
//! All times are milliseconds.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::math::approx_le;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sample,
    FetchFeature,
    FetchMemory,
    Train,
    UpdateMemory,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Sample, Stage::FetchFeature, Stage::FetchMemory, Stage::Train, Stage::UpdateMemory];

    /// Zero-based position.
    pub fn index(self) -> usize {
        self as usize
    }

    /// One-based stage number.
    pub fn number(self) -> usize {
        self as usize + 1
    }

    pub fn from_number(n: usize) -> Option<Stage> {
        Stage::ALL.get(n.checked_sub(1)?).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Sample => "sample",
            Stage::FetchFeature => "fetch_feature",
            Stage::FetchMemory => "fetch_memory",
            Stage::Train => "train",
            Stage::UpdateMemory => "update_memory",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn resource(self) -> Resource {
        match self {
            Stage::Sample => Resource::Sampler,
            Stage::FetchFeature | Stage::FetchMemory => Resource::HostToDeviceLink,
            Stage::Train => Resource::GpuCompute,
            Stage::UpdateMemory => Resource::DeviceToHostLink,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Mutually exclusive hardware resource a stage occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resource {
    Sampler,
    HostToDeviceLink,
    GpuCompute,
    DeviceToHostLink,
}

impl Resource {
    pub const ALL: [Resource; 4] =
        [Resource::Sampler, Resource::HostToDeviceLink, Resource::GpuCompute, Resource::DeviceToHostLink];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Resource::Sampler => "sampler",
            Resource::HostToDeviceLink => "host_to_device_link",
            Resource::GpuCompute => "gpu_compute",
            Resource::DeviceToHostLink => "device_to_host_link",
        }
    }

    pub fn from_name(name: &str) -> Option<Resource> {
        Resource::ALL.into_iter().find(|r| r.name() == name)
    }
}

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error("stage durations must be finite and positive, got {0:?}")]
    InvalidProfile([f64; 5]),
    #[error("iteration count must be at least 1")]
    NoIterations,
    #[error("plan covers {plan} iterations but {expected} were requested")]
    PlanLength { plan: usize, expected: usize },
    #[error("invalid plan at iteration {iteration}: {reason}")]
    InvalidPlan { iteration: usize, reason: &'static str },
    #[error("no staleness bound below {k_max} is feasible: {constraint} binds at iteration {iteration}")]
    Infeasible { constraint: Constraint, iteration: usize, k_max: usize },
}

/// Constraint of the staleness optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Constraint {
    /// The memory fetch must see the update of iteration `i - k_i`.
    C1Gate,
    /// Waiting on that update must not stall training.
    C2NoStall,
    /// `k_i` must stay below `k_max`.
    C3Cap,
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Constraint::C1Gate => "C1 (update gate)",
            Constraint::C2NoStall => "C2 (no training stall)",
            Constraint::C3Cap => "C3 (staleness cap)",
        })
    }
}

/// Per-stage execution times in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageProfile {
    tau: [f64; 5],
}

impl StageProfile {
    pub fn new(tau: [f64; 5]) -> Result<Self, PipelineError> {
        if tau.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(PipelineError::InvalidProfile(tau));
        }
        Ok(StageProfile { tau })
    }

    pub fn tau(&self, stage: Stage) -> f64 {
        self.tau[stage.index()]
    }

    pub fn taus(&self) -> [f64; 5] {
        self.tau
    }

    /// Time of one fully serial iteration.
    pub fn total(&self) -> f64 {
        self.tau.iter().sum()
    }

    /// Per-resource load of one iteration.
    pub fn resource_loads(&self) -> [f64; 4] {
        let t = self.tau;
        [t[0], t[1] + t[2], t[3], t[4]]
    }

    /// Iteration period once the pipeline is full: the busiest resource.
    pub fn steady_period(&self) -> f64 {
        self.resource_loads().into_iter().fold(0.0, f64::max)
    }

    pub fn scaled(&self, factor: f64) -> Result<Self, PipelineError> {
        StageProfile::new(self.tau.map(|t| t * factor))
    }
}

/// Per-iteration staleness bounds. `k_i = 1` means synchronous: the memory
/// fetch of iteration `i` waits for the update of iteration `i - 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StalenessPlan {
    pub k_max: usize,
    /// `k[i - 1]` is the bound of iteration `i`.
    pub k: Vec<usize>,
    /// Iterations `1..=warmup` have no earlier update to wait for.
    pub warmup: usize,
}

impl StalenessPlan {
    /// The same bound for every iteration; warmup is `k`.
    pub fn constant(k: usize, iterations: usize, k_max: usize) -> Self {
        StalenessPlan { k_max, k: vec![k; iterations], warmup: k.min(iterations) }
    }

    pub fn synchronous(iterations: usize) -> Self {
        Self::constant(1, iterations, 2)
    }

    pub fn iterations(&self) -> usize {
        self.k.len()
    }

    /// Bound of 1-based iteration `i`.
    pub fn k_at(&self, i: usize) -> usize {
        self.k[i - 1]
    }

    /// Bound after warmup; for constant plans the single value.
    pub fn steady_k(&self) -> Option<usize> {
        self.k.get(self.warmup).or(self.k.last()).copied()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        for (idx, &k) in self.k.iter().enumerate() {
            let i = idx + 1;
            if k == 0 {
                return Err(PipelineError::InvalidPlan { iteration: i, reason: "bound must be at least 1" });
            }
            if i > self.warmup && k >= self.k_max {
                return Err(PipelineError::InvalidPlan { iteration: i, reason: "bound must stay below k_max" });
            }
        }
        Ok(())
    }
}

/// Which update the memory fetch of each iteration waits for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dependency<'a> {
    /// Wait for the previous iteration's update.
    Synchronous,
    /// No memory dependency at all: only stage order and resource contention.
    Unbounded,
    /// Wait for the update of iteration `i - k_i` when it exists.
    Bounded(&'a StalenessPlan),
}

/// Start and end times of every stage of every iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    b: Vec<[f64; 5]>,
    e: Vec<[f64; 5]>,
    gate_wait: Vec<f64>,
}

impl Timeline {
    pub fn iterations(&self) -> usize {
        self.b.len()
    }

    /// Start of `stage` in 1-based iteration `i`.
    pub fn start(&self, i: usize, stage: Stage) -> f64 {
        self.b[i - 1][stage.index()]
    }

    pub fn end(&self, i: usize, stage: Stage) -> f64 {
        self.e[i - 1][stage.index()]
    }

    /// Time the memory fetch of iteration `i` spent blocked on the gate.
    pub fn gate_wait(&self, i: usize) -> f64 {
        self.gate_wait[i - 1]
    }

    pub fn makespan(&self) -> f64 {
        self.e.last().map_or(0.0, |row| row[4])
    }

    pub fn starts(&self) -> &[[f64; 5]] {
        &self.b
    }

    pub fn ends(&self) -> &[[f64; 5]] {
        &self.e
    }
}

/// Evaluates the timing recurrence. Without a plan the memory fetch waits for
/// the previous iteration's update.
pub fn build_timeline(profile: &StageProfile, iterations: usize, plan: Option<&StalenessPlan>) -> Result<Timeline, PipelineError> {
    match plan {
        Some(p) => build_timeline_with(profile, iterations, Dependency::Bounded(p)),
        None => build_timeline_with(profile, iterations, Dependency::Synchronous),
    }
}

pub fn build_timeline_with(profile: &StageProfile, iterations: usize, dep: Dependency<'_>) -> Result<Timeline, PipelineError> {
    if iterations == 0 {
        return Err(PipelineError::NoIterations);
    }
    if let Dependency::Bounded(plan) = dep {
        if plan.iterations() != iterations {
            return Err(PipelineError::PlanLength { plan: plan.iterations(), expected: iterations });
        }
        plan.validate()?;
    }
    let tau = profile.tau;
    let mut b: Vec<[f64; 5]> = Vec::with_capacity(iterations);
    let mut e: Vec<[f64; 5]> = Vec::with_capacity(iterations);
    let mut gate_wait = Vec::with_capacity(iterations);
    for i in 1..=iterations {
        let prev = if i > 1 { e[i - 2] } else { [0.0; 5] };
        let mut bi = [0.0; 5];
        let mut ei = [0.0; 5];
        bi[0] = prev[0];
        ei[0] = bi[0] + tau[0];
        bi[1] = ei[0].max(prev[2]);
        ei[1] = bi[1] + tau[1];
        let natural = ei[1].max(prev[2]);
        let k = match dep {
            Dependency::Synchronous => Some(1),
            Dependency::Unbounded => None,
            Dependency::Bounded(plan) => Some(plan.k_at(i)),
        };
        let gate = k.filter(|&k| i > k).map(|k| e[i - k - 1][4]);
        bi[2] = gate.map_or(natural, |g| natural.max(g));
        gate_wait.push(bi[2] - natural);
        ei[2] = bi[2] + tau[2];
        for j in 3..5 {
            bi[j] = ei[j - 1].max(prev[j]);
            ei[j] = bi[j] + tau[j];
        }
        b.push(bi);
        e.push(ei);
    }
    Ok(Timeline { b, e, gate_wait })
}

/// How constraint C1 is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum C1Orientation {
    /// The fetch waits for the gated update; C2 then limits how far that wait
    /// may push the fetch.
    #[default]
    Gate,
    /// The printed inequality: on the ungated schedule the update of
    /// `i - k` must end inside `[b_i^3, b_i^4 - tau^3]`.
    Printed,
}

/// First constraint a plan breaks, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub iteration: usize,
    pub constraint: Constraint,
}

/// Checks C1/C2 for every gated iteration of `plan`.
pub fn plan_violation(profile: &StageProfile, plan: &StalenessPlan, orientation: C1Orientation) -> Result<Option<Violation>, PipelineError> {
    let n = plan.iterations();
    let tau3 = profile.tau(Stage::FetchMemory);
    match orientation {
        C1Orientation::Gate => {
            let tl = build_timeline_with(profile, n, Dependency::Bounded(plan))?;
            for i in 2..=n {
                let k = plan.k_at(i);
                if i <= k {
                    continue;
                }
                let gate = tl.end(i - k, Stage::UpdateMemory);
                let natural = tl.start(i, Stage::FetchMemory) - tl.gate_wait(i);
                let latest = natural.max(tl.end(i - 1, Stage::Train) - tau3);
                if !approx_le(gate, latest) {
                    return Ok(Some(Violation { iteration: i, constraint: Constraint::C2NoStall }));
                }
            }
        }
        C1Orientation::Printed => {
            plan.validate()?;
            let tl = build_timeline_with(profile, n, Dependency::Unbounded)?;
            for i in 2..=n {
                let k = plan.k_at(i);
                if i <= k {
                    continue;
                }
                let done = tl.end(i - k, Stage::UpdateMemory);
                if !approx_le(tl.start(i, Stage::FetchMemory), done) {
                    return Ok(Some(Violation { iteration: i, constraint: Constraint::C1Gate }));
                }
                if !approx_le(done, tl.start(i, Stage::Train) - tau3) {
                    return Ok(Some(Violation { iteration: i, constraint: Constraint::C2NoStall }));
                }
            }
        }
    }
    Ok(None)
}

/// Smallest constant bound in `[1, k_max)` whose plan violates nothing over
/// `iterations`, held for the whole run with warmup `k`.
pub fn solve_min_staleness(profile: &StageProfile, iterations: usize, k_max: usize) -> Result<StalenessPlan, PipelineError> {
    solve_min_staleness_with(profile, iterations, k_max, C1Orientation::Gate)
}

pub fn solve_min_staleness_with(
    profile: &StageProfile,
    iterations: usize,
    k_max: usize,
    orientation: C1Orientation,
) -> Result<StalenessPlan, PipelineError> {
    if iterations == 0 {
        return Err(PipelineError::NoIterations);
    }
    let mut last = Violation { iteration: 0, constraint: Constraint::C3Cap };
    for k in 1..k_max {
        let plan = StalenessPlan::constant(k, iterations, k_max);
        match plan_violation(profile, &plan, orientation)? {
            None => return Ok(plan),
            Some(v) => last = v,
        }
    }
    Err(PipelineError::Infeasible { constraint: last.constraint, iteration: last.iteration, k_max })
}

/// Per-iteration greedy: each iteration takes the smallest bound that keeps
/// its own memory fetch from stalling training, given the schedule so far.
/// Iterations below `k_max` with no feasible gated bound run ungated.
pub fn greedy_min_staleness(profile: &StageProfile, iterations: usize, k_max: usize) -> Result<StalenessPlan, PipelineError> {
    if iterations == 0 {
        return Err(PipelineError::NoIterations);
    }
    let tau = profile.tau;
    let mut e: Vec<[f64; 5]> = Vec::with_capacity(iterations);
    let mut ks = Vec::with_capacity(iterations);
    let mut warmup = 0;
    for i in 1..=iterations {
        let prev = if i > 1 { e[i - 2] } else { [0.0; 5] };
        let e1 = prev[0] + tau[0];
        let e2 = e1.max(prev[2]) + tau[1];
        let natural = e2.max(prev[2]);
        let latest = if i > 1 { natural.max(prev[3] - tau[2]) } else { natural };
        let chosen = (1..k_max.min(i)).find(|&k| approx_le(e[i - k - 1][4], latest));
        let (k, b3) = match chosen {
            Some(k) => (k, natural.max(e[i - k - 1][4])),
            None if i < k_max => {
                warmup = i;
                (i, natural)
            }
            None => return Err(PipelineError::Infeasible { constraint: Constraint::C2NoStall, iteration: i, k_max }),
        };
        let e3 = b3 + tau[2];
        let e4 = e3.max(prev[3]) + tau[3];
        let e5 = e4.max(prev[4]) + tau[4];
        e.push([e1, e2, e3, e4, e5]);
        ks.push(k);
    }
    Ok(StalenessPlan { k_max, k: ks, warmup })
}

/// Idle gaps `b_i^j - max(e_i^{j-1}, e_{i-1}^j)` with absent terms dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Bubbles {
    pub gaps: Vec<[f64; 5]>,
    pub totals: [f64; 5],
}

pub fn bubble_time(tl: &Timeline) -> Bubbles {
    let mut gaps = Vec::with_capacity(tl.iterations());
    let mut totals = [0.0; 5];
    for i in 0..tl.iterations() {
        let mut row = [0.0; 5];
        for j in 0..5 {
            let mut ready: f64 = 0.0;
            if j > 0 {
                ready = ready.max(tl.e[i][j - 1]);
            }
            if i > 0 {
                ready = ready.max(tl.e[i - 1][j]);
            }
            row[j] = (tl.b[i][j] - ready).max(0.0);
            totals[j] += row[j];
        }
        gaps.push(row);
    }
    Bubbles { gaps, totals }
}

/// Idle time of the training resource before each iteration's training,
/// `b_i^4 - e_{i-1}^4`, for `i = 2..=E` (index 0 is iteration 2).
pub fn training_idle(tl: &Timeline) -> Vec<f64> {
    (1..tl.iterations()).map(|i| tl.b[i][3] - tl.e[i - 1][3]).collect()
}

/// Serial iteration time over the steady-state period.
pub fn speedup_estimate(profile: &StageProfile) -> f64 {
    profile.total() / profile.steady_period()
}

/// Upper bound in bytes on the extra device memory held by `k` prefetched
/// subgraphs: `4 K B (N+1) (3 Hn + 2 He + 3 M + 5)` for f32 elements.
pub fn memory_overhead_bound(batch: u64, fan_out: u64, hn: u64, he: u64, mem_dim: u64, k: u64) -> u64 {
    4 * k * batch * (fan_out + 1) * (3 * hn + 2 * he + 3 * mem_dim + 5)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prof(t: [f64; 5]) -> StageProfile {
        StageProfile::new(t).unwrap()
    }

    #[test]
    fn profile_validation() {
        assert!(StageProfile::new([1.0, 0.0, 1.0, 1.0, 1.0]).is_err());
        assert!(StageProfile::new([1.0, f64::NAN, 1.0, 1.0, 1.0]).is_err());
        let p = prof([9.5, 12.6, 5.7, 46.9, 25.3]);
        assert_eq!(p.steady_period(), 46.9);
    }

    #[test]
    fn single_iteration_is_prefix_sums() {
        let tl = build_timeline(&prof([1.0, 2.0, 3.0, 4.0, 5.0]), 1, None).unwrap();
        assert_eq!(tl.starts()[0], [0.0, 1.0, 3.0, 6.0, 10.0]);
        assert_eq!(tl.makespan(), 15.0);
    }

    #[test]
    fn unit_profile_second_iteration() {
        let p = prof([1.0; 5]);
        let free = build_timeline_with(&p, 2, Dependency::Unbounded).unwrap();
        assert_eq!(free.start(2, Stage::FetchFeature), 3.0);
        assert_eq!(free.start(2, Stage::FetchMemory), 4.0);
        let sync = build_timeline(&p, 2, None).unwrap();
        assert_eq!(sync.start(2, Stage::FetchMemory), 5.0);
        assert_eq!(sync.gate_wait(2), 1.0);
    }

    #[test]
    fn synchronous_equals_constant_one() {
        let p = prof([1.0, 1.0, 1.0, 4.0, 2.0]);
        let a = build_timeline(&p, 6, None).unwrap();
        let b = build_timeline(&p, 6, Some(&StalenessPlan::constant(1, 6, 2))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bubble_before_memory_fetch_when_synchronous() {
        let tl = build_timeline(&prof([1.0, 1.0, 1.0, 4.0, 2.0]), 3, None).unwrap();
        let bub = bubble_time(&tl);
        assert_eq!(bub.gaps[1][2], 5.0);
        assert!(bub.totals[2] > 0.0);
        assert_eq!(bub.totals[3], 0.0);
    }

    #[test]
    fn serial_profile_has_no_bubbles() {
        let tl = build_timeline_with(&prof([1.0, 2.0, 3.0, 5.0, 8.0]), 1, Dependency::Unbounded).unwrap();
        assert_eq!(bubble_time(&tl).totals, [0.0; 5]);
    }

    #[test]
    fn training_dominated_profile_needs_two() {
        let p = prof([1.0, 1.0, 1.0, 100.0, 1.0]);
        let plan = solve_min_staleness(&p, 40, 5).unwrap();
        assert_eq!(plan.steady_k(), Some(2));
        let tl = build_timeline(&p, 40, Some(&plan)).unwrap();
        assert!(training_idle(&tl)[plan.warmup..].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn infeasible_reports_c2() {
        let p = prof([1.0, 1.0, 50.0, 2.0, 50.0]);
        match solve_min_staleness(&p, 20, 2) {
            Err(PipelineError::Infeasible { constraint, iteration, k_max }) => {
                assert_eq!(constraint, Constraint::C2NoStall);
                assert_eq!(k_max, 2);
                assert_eq!(iteration, 2);
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
        assert!(matches!(
            solve_min_staleness(&p, 20, 1),
            Err(PipelineError::Infeasible { constraint: Constraint::C3Cap, .. })
        ));
    }

    #[test]
    fn greedy_matches_steady_bound() {
        let p = prof([9.5, 12.6, 5.7, 46.9, 25.3]);
        let g = greedy_min_staleness(&p, 30, 5).unwrap();
        assert!(g.k[5..].iter().all(|&k| k == 2), "{:?}", g.k);
    }

    #[test]
    fn speedup_values() {
        let p = prof([9.5, 12.6, 5.7, 46.9, 25.3]);
        assert!((speedup_estimate(&p) - 100.0 / 46.9).abs() < 1e-12);
        assert!((speedup_estimate(&prof([100.0, 1e-9, 1e-9, 1e-9, 1e-9])) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn overhead_formula() {
        assert_eq!(memory_overhead_bound(600, 10, 0, 172, 100, 3), 51_400_800);
        assert_eq!(memory_overhead_bound(600, 10, 0, 172, 100, 0), 0);
    }

    #[test]
    fn plan_validation() {
        let mut plan = StalenessPlan::constant(2, 5, 3);
        assert!(plan.validate().is_ok());
        plan.k[4] = 3;
        assert!(plan.validate().is_err());
        plan.k[4] = 0;
        assert!(plan.validate().is_err());
        assert!(build_timeline(&prof([1.0; 5]), 4, Some(&StalenessPlan::constant(1, 5, 2))).is_err());
    }

    #[test]
    fn stage_names_roundtrip() {
        for s in Stage::ALL {
            assert_eq!(Stage::from_name(s.name()), Some(s));
            assert_eq!(Stage::from_number(s.number()), Some(s));
        }
        assert_eq!(Stage::from_number(0), None);
    }
}
