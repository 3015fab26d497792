//! Acceptance suite: one pass/fail line per criterion, non-zero exit on any
//! failure. Deterministic metrics of every criterion are written to disk and
//! the whole suite is re-run once to check they reproduce byte for byte.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use stalepipe::commands::{execute_run, write_run, RunSummary, RUN_FILE};
use stalepipe::config::{PlanSource, RunConfig};
use stalepipe::exec::{execute, GatePolicy, SleepWorkload};
use stalepipe::formats;
use stalepipe::workload::{train_pipelined, PipelineOptions};
use stalepipe_core::fixtures::{self, OVERHEAD, TGN};
use stalepipe_core::graph::EventStream;
use stalepipe_core::memory::{k_max_from_threshold, stale_fraction};
use stalepipe_core::model::{forward, Dims, LrSchedule, ModelParams, StepInput, Tensor, TimeEncoder};
use stalepipe_core::pipeline::{
    build_timeline_with, memory_overhead_bound, solve_min_staleness, speedup_estimate, Dependency, PipelineError, Stage, StageProfile,
    StalenessPlan,
};
use stalepipe_core::sim::{simulate, verify_no_stall, Trace};
use stalepipe_core::synth::{generate, zipf_batches, SynthConfig};
use stalepipe_core::trainer::{run_iteration, EpochState, MitigationSettings, RunReport, Setup, TrainConfig};
use stalepipe_core::NodeId;

const SEED: u64 = 20_240_611;
const K_MAX: usize = 5;
const E_SOLVE: usize = 200;

struct Ctx {
    dir: PathBuf,
    /// Second pass for the determinism check: skip wall-clock measurements.
    rerun: bool,
}

impl Ctx {
    fn save(&self, name: &str, v: &Value) {
        formats::write_json(&self.dir.join(format!("{name}.json")), v).expect("write metrics");
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within_budget(start: Instant, budget: Duration) -> (bool, String) {
    let t = start.elapsed();
    (t < budget, format!("{:.1} s < {} s", t.as_secs_f64(), budget.as_secs()))
}

fn random_profile(rng: &mut ChaCha8Rng) -> StageProfile {
    StageProfile::new(std::array::from_fn(|_| rng.gen_range(1.0..100.0))).unwrap()
}

// ---------------------------------------------------------------------------

fn c1_recurrence_equals_des(ctx: &Ctx) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut mismatches = Vec::new();
    let mut digest = Sha256::new();
    for case in 0..1000 {
        let p = random_profile(&mut rng);
        let e = rng.gen_range(1..=50);
        let k = rng.gen_range(1..=4);
        let plan = StalenessPlan::constant(k, e, k + 1);
        // Cycle through the three dependency modes.
        let dep = match case % 3 {
            0 => Dependency::Synchronous,
            1 => Dependency::Bounded(&plan),
            _ => Dependency::Unbounded,
        };
        let analytic = Trace::from_timeline(&build_timeline_with(&p, e, dep).unwrap());
        let simulated = simulate(&p, dep, e).unwrap();
        if analytic != simulated {
            mismatches.push(case);
        }
        digest.update(formats::trace_csv_bytes(&simulated));
    }
    let (fast, time) = within_budget(start, Duration::from_secs(10));
    ctx.save("c1", &json!({"profiles": 1000, "mismatches": mismatches, "trace_sha256": format!("{:x}", digest.finalize())}));
    outcome(mismatches.is_empty() && fast, format!("1000 random profiles, E <= 50, {} mismatches ({time})", mismatches.len()))
}

/// Brute-force DES feasibility of a constant bound `k`: after warmup the
/// gating update never ends later than the latest fetch start that keeps
/// training busy.
fn sim_feasible(p: &StageProfile, k: usize, e: usize) -> bool {
    let plan = StalenessPlan::constant(k, e, k + 1);
    let t = simulate(p, Dependency::Bounded(&plan), e).unwrap();
    let tau3 = p.tau(Stage::FetchMemory);
    (k + 1..=e).all(|i| {
        let fetch = t.get(i, Stage::FetchMemory).unwrap();
        let gate = t.get(i - k, Stage::UpdateMemory).unwrap().end_ms;
        let ungated = fetch.start_ms - fetch.gate_wait_ms;
        let latest = ungated.max(t.get(i - 1, Stage::Train).unwrap().end_ms - tau3);
        gate <= latest + 1e-9 * (1.0 + latest.abs())
    })
}

fn c2_solver_minimality(ctx: &Ctx) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2);
    let mut profiles: Vec<(String, StageProfile)> = TGN.iter().map(|b| (b.name(), b.profile())).collect();
    profiles.extend((0..200).map(|j| (format!("random{j}"), random_profile(&mut rng))));
    let mut failures = Vec::new();
    let mut solved = Vec::new();
    let mut infeasible = 0;
    for (name, p) in &profiles {
        let brute: Vec<bool> = (1..K_MAX).map(|k| sim_feasible(p, k, E_SOLVE)).collect();
        match solve_min_staleness(p, E_SOLVE, K_MAX) {
            Ok(plan) => {
                let k = plan.steady_k().unwrap();
                let ok = brute[k - 1] && (k == 1 || !brute[k - 2]);
                if !ok {
                    failures.push(name.clone());
                }
                solved.push(json!([name, k]));
            }
            Err(PipelineError::Infeasible { .. }) => {
                infeasible += 1;
                if brute.iter().any(|&f| f) {
                    failures.push(name.clone());
                }
                solved.push(json!([name, null]));
            }
            Err(e) => panic!("{name}: {e}"),
        }
    }
    let tgn_k: Vec<usize> = TGN.iter().map(|b| solve_min_staleness(&b.profile(), E_SOLVE, K_MAX).unwrap().steady_k().unwrap()).collect();
    let in_range = tgn_k.iter().all(|k| (2..=4).contains(k));
    let (fast, time) = within_budget(start, Duration::from_secs(30));
    ctx.save("c2", &json!({"solved": solved, "failures": failures}));
    outcome(
        failures.is_empty() && in_range && fast,
        format!(
            "205 profiles, {} minimality failures, {infeasible} random profiles infeasible (confirmed by brute force), TGN k = {tgn_k:?} ({time})",
            failures.len()
        ),
    )
}

fn c3_no_stall(ctx: &Ctx) -> Outcome {
    let mut rows = Vec::new();
    let mut ok = true;
    let (mut solved, mut confirmed) = (0, Vec::new());
    for b in fixtures::all_breakdowns() {
        let p = b.profile();
        match solve_min_staleness(&p, E_SOLVE, K_MAX) {
            Ok(plan) => {
                let k = plan.steady_k().unwrap();
                let clean = verify_no_stall(&simulate(&p, Dependency::Bounded(&plan), E_SOLVE).unwrap(), plan.warmup, 0.0);
                let forced = StalenessPlan::constant(k - 1, E_SOLVE, K_MAX);
                let stalls = if k > 1 { verify_no_stall(&simulate(&p, Dependency::Bounded(&forced), E_SOLVE).unwrap(), forced.warmup, 0.0).stall_count } else { 0 };
                ok &= clean.stall_free && (k == 1 || stalls >= 1);
                solved += 1;
                rows.push(json!({"profile": b.name(), "k": k, "stall_free": clean.stall_free, "stalls_at_k_minus_1": stalls}));
            }
            Err(PipelineError::Infeasible { constraint, .. }) => {
                // No bound below k_max exists: every constant bound must stall.
                let all_stall = (1..K_MAX).all(|k| {
                    let plan = StalenessPlan::constant(k, E_SOLVE, K_MAX);
                    !verify_no_stall(&simulate(&p, Dependency::Bounded(&plan), E_SOLVE).unwrap(), plan.warmup, 0.0).stall_free
                });
                ok &= all_stall;
                confirmed.push(b.name());
                rows.push(json!({"profile": b.name(), "infeasible": constraint.to_string(), "every_k_stalls": all_stall}));
            }
            Err(e) => panic!("{}: {e}", b.name()),
        }
    }
    ctx.save("c3", &json!(rows));
    outcome(
        ok,
        format!(
            "{solved} solved plans stall-free with k-1 stalling; {} update-bound ({}) have no bound below {K_MAX}, every k stalls",
            confirmed.len(),
            confirmed.join(", ")
        ),
    )
}

fn c4_speedup(ctx: &Ctx) -> Outcome {
    let start = Instant::now();
    let reddit = fixtures::breakdown("tgn/reddit").unwrap().profile();
    let est = speedup_estimate(&reddit);
    let target = 100.0 / 46.9;
    let analytic_ok = (est - target).abs() / target < 0.01;
    let estimates: Vec<(String, f64)> = TGN.iter().map(|b| (b.dataset.to_string(), speedup_estimate(&b.profile()))).collect();
    let best = estimates.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0.clone();
    let order_ok = best == "gdelt";
    ctx.save("c4", &json!({"reddit_estimate": est, "estimates": estimates, "highest": best}));
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    if ctx.rerun {
        return outcome(analytic_ok && order_ok, "analytic part only");
    }
    // Sleep workload shaped like the REDDIT breakdown, 20 ms per serial iteration.
    let p = reddit.scaled(0.2).unwrap();
    let e = 60;
    let plan = solve_min_staleness(&p, e, K_MAX).unwrap();
    let work = SleepWorkload::new(p);
    let serial = execute(&work, &GatePolicy::Synchronous, e, 1).unwrap();
    let piped = execute(&work, &GatePolicy::Plan(plan), e, K_MAX + 1).unwrap();
    let measured = serial.wall_ms / piped.wall_ms;
    let live_ok = measured >= 1.3 && measured <= est * 1.05;
    let (fast, time) = within_budget(start, Duration::from_secs(120));
    outcome(
        analytic_ok && order_ok && live_ok && fast,
        format!(
            "REDDIT estimate {est:.4} (100/46.9 = {target:.4}), highest {best}; live {measured:.3}x over serial (need >= 1.3, <= {:.3}) on {threads} hardware thread(s) ({time})",
            est * 1.05
        ),
    )
}

fn c5_overhead(ctx: &Ctx) -> Outcome {
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut ok = true;
    for c in OVERHEAD {
        let d = fixtures::dataset(c.dataset).unwrap();
        let bytes = memory_overhead_bound(c.batch, c.fan_out, d.node_feat_dim, d.edge_feat_dim, c.mem_dim, c.k) as f64;
        let rel = (bytes - c.published_bytes).abs() / c.published_bytes;
        ok &= rel < 0.01;
        rows.push(format!("{} {:.2} MB ({:+.2}%)", c.dataset, bytes / 1e6, 100.0 * (bytes - c.published_bytes) / c.published_bytes));
    }
    let (fast, time) = within_budget(start, Duration::from_secs(1));
    ctx.save("c5", &json!(rows));
    outcome(ok && fast, format!("{} ({time})", rows.join(", ")))
}

fn random_input(d: &Dims, b: usize, targets: usize, seed: u64) -> StepInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut target_mail = Vec::with_capacity(targets * d.mail());
    let target_mem: Vec<f64> = (0..targets * d.mem).map(|_| rng.gen_range(-0.9..0.9)).collect();
    for t in 0..targets {
        let has = t % 2 == 0;
        for _ in 0..d.mem + d.edge {
            target_mail.push(if has { rng.gen_range(-1.0..1.0) } else { 0.0 });
        }
        target_mail.push(if has { rng.gen_range(0.0..50.0) } else { 0.0 });
        target_mail.push(if has { 1.0 } else { 0.0 });
    }
    let occ_target: Vec<usize> = (0..3 * b).map(|o| if o < targets { o } else { rng.gen_range(0..targets) }).collect();
    let mut neigh_offsets = vec![0];
    for _ in 0..3 * b {
        neigh_offsets.push(neigh_offsets.last().unwrap() + rng.gen_range(0..4));
    }
    let n = *neigh_offsets.last().unwrap();
    StepInput {
        iteration: 1,
        batch: b,
        target_mem,
        target_mail,
        occ_target,
        neigh_offsets,
        neigh_mem: (0..n * d.mem).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        neigh_dt: (0..n).map(|_| rng.gen_range(0.0..100.0)).collect(),
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn c6_gradients(ctx: &Ctx) -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    let mut checked = 0;
    let shapes = [Dims { mem: 5, emb: 4, time: 3, edge: 2, dec_hidden: 6 }, Dims { mem: 8, emb: 8, time: 8, edge: 8, dec_hidden: 8 }];
    for (s, d) in shapes.iter().enumerate() {
        let te = TimeEncoder::new(d.time);
        for seed in 0..3u64 {
            let input = random_input(d, 3, 7, seed + 10 * s as u64);
            let mut p = ModelParams::init(*d, seed + 100);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
            for x in p.data.iter_mut() {
                *x += rng.gen_range(-0.3..0.3);
            }
            let analytic = forward(&p, &te, &input, true).unwrap().grad.unwrap();
            let h = 1e-5;
            let mut numeric = vec![0.0; p.len()];
            for (k, slot) in numeric.iter_mut().enumerate() {
                let keep = p.data[k];
                p.data[k] = keep + h;
                let up = forward(&p, &te, &input, false).unwrap().loss;
                p.data[k] = keep - h;
                let down = forward(&p, &te, &input, false).unwrap().loss;
                p.data[k] = keep;
                *slot = (up - down) / (2.0 * h);
            }
            for t in Tensor::ALL {
                let r = p.range(t);
                let (a, n) = (&analytic.data[r.clone()], &numeric[r]);
                let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
                let scale = norm(a).max(norm(n));
                let rel = if scale > 1e-9 { norm(&diff) / scale } else { 0.0 };
                checked += 1;
                if rel > worst {
                    worst = rel;
                    worst_at = format!("{} (dims {s}, seed {seed})", t.name());
                }
            }
        }
    }
    let (fast, time) = within_budget(start, Duration::from_secs(60));
    ctx.save("c6", &json!({"tensor_checks": checked, "worst_relative_error": worst, "worst_at": worst_at}));
    outcome(worst < 1e-6 && fast, format!("{checked} tensor checks, worst relative error {worst:.2e} at {worst_at} ({time})"))
}

fn toy_train_config(lag: usize) -> TrainConfig {
    TrainConfig { schedule: LrSchedule::Constant { lr: 0.2 }, batch_size: 175, lag, epochs: 1, seed: 4, ..Default::default() }
}

/// Parameters after every step of the straight-line trainer's first epoch.
fn straight_line_trajectory(stream: &EventStream, cfg: &TrainConfig) -> Vec<Vec<f64>> {
    let (train, _, _) = stream.chronological_split(cfg.split).unwrap();
    let setup = Setup::new(cfg, stream.num_nodes(), stream.edge_feat_dim(), train.events()).unwrap();
    let mut params = setup.init_params();
    let mut state = EpochState::new(&setup, &[]).unwrap();
    let mut out = Vec::new();
    for (step, batch) in train.batches(cfg.batch_size, &setup.negatives(1).unwrap()).unwrap().iter().enumerate() {
        run_iteration(&setup, &mut state, &mut params, 1, step as u64 + 1, batch).unwrap();
        out.push(params.data.clone());
    }
    out
}

fn trajectory_hash(t: &[Vec<f64>]) -> String {
    let mut h = Sha256::new();
    for row in t {
        for x in row {
            h.update(x.to_bits().to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

fn c7_synchronous_equivalence(ctx: &Ctx) -> Outcome {
    let stream = generate(&SynthConfig::toy(0)).unwrap();
    let cfg = toy_train_config(0);
    let straight = straight_line_trajectory(&stream, &cfg);
    let piped = train_pipelined(&stream, &cfg, &PipelineOptions { workers: Some(2), record_params: true, ..Default::default() }).unwrap();
    let n = 200;
    let enough = straight.len() >= n && piped.trajectory.len() >= n;
    let first_diff = (0..n.min(straight.len()).min(piped.trajectory.len())).find(|&i| {
        let (a, b) = (&straight[i], &piped.trajectory[i]);
        a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits())
    });
    let hash = trajectory_hash(&straight[..n.min(straight.len())]);
    ctx.save("c7", &json!({"iterations": n, "trajectory_sha256": hash, "first_difference": first_diff}));
    let detail = match first_diff {
        None => format!("bound 1 (lag 0) pipelined run matches the straight-line trainer bit for bit over {n} steps"),
        Some(i) => format!("parameters differ after step {}", i + 1),
    };
    outcome(enough && first_diff.is_none(), detail)
}

fn staleness_run(ctx: &Ctx, name: &str, lag: usize, lambda: Option<f64>) -> (RunSummary, RunReport) {
    let mut cfg = RunConfig::toy();
    cfg.plan = PlanSource::Fixed { k: lag + 1 };
    cfg.train.mitigation = lambda.map(|lambda| MitigationSettings { lambda, ..Default::default() });
    let mut out = execute_run(&cfg).unwrap();
    write_run(&ctx.dir.join("c8").join(name), &mut out).unwrap();
    (out.summary, out.report)
}

fn c8_staleness_properties(ctx: &Ctx) -> Outcome {
    let start = Instant::now();
    let mut ok = true;
    let mut notes = Vec::new();
    let base = staleness_run(ctx, "lag0", 0, None);
    let ap0 = base.0.results.val_ap;
    let mut aps = vec![format!("{ap0:.4}")];
    let mut errs = Vec::new();
    let mut off_runs = Vec::new();
    for lag in 1..=3 {
        let r = staleness_run(ctx, &format!("lag{lag}"), lag, None);
        let ap = r.0.results.val_ap;
        ok &= (ap - ap0).abs() <= 0.02;
        aps.push(format!("{ap:.4}"));
        off_runs.push(r);
    }
    for lag in 1..=3 {
        let (m, _) = staleness_run(ctx, &format!("lag{lag}_mitigated"), lag, Some(0.95));
        let off = off_runs[lag - 1].0.results.mean_stale_err;
        let (raw, mitigated) = (m.results.mean_stale_err, m.results.mean_stale_err_mitigated);
        // The criterion compares against the mitigation-off run. The same
        // run's unmitigated reads are reported alongside, not required.
        ok &= mitigated <= off;
        errs.push(format!("lag {lag}: {mitigated:.4} on vs {off:.4} off (same run before mitigation {raw:.4})"));
    }
    let off = &off_runs[1].1;
    let (_, one) = staleness_run(ctx, "lag2_lambda1", 2, Some(1.0));
    let identical = one.params == off.params
        && one.val_ap == off.val_ap
        && one.iterations.len() == off.iterations.len()
        && one.iterations.iter().zip(&off.iterations).all(|(a, b)| {
            (a.loss, a.grad_norm, a.ap, a.stale_err, a.stale_err_mitigated) == (b.loss, b.grad_norm, b.ap, b.stale_err, b.stale_err)
        });
    ok &= identical;
    notes.push(format!("lambda=1 identical to off: {identical}"));
    let (fast, time) = within_budget(start, Duration::from_secs(300));
    outcome(ok && fast, format!("val AP lag 0..3 = [{}]; mitigated err {}; {} ({time})", aps.join(", "), errs.join("; "), notes.join("; ")))
}

fn node_sets(stream: &EventStream, batch: usize) -> Vec<Vec<NodeId>> {
    stream.events().chunks(batch).map(|c| c.iter().flat_map(|e| [e.src, e.dst]).collect()).collect()
}

/// Share of each iteration's distinct nodes also read in one of the
/// previous `lag` iterations.
fn window_scan(sets: &[Vec<NodeId>], lag: usize) -> f64 {
    let (mut total, mut counted) = (0.0, 0);
    for i in 1..sets.len() {
        let unique: std::collections::BTreeSet<NodeId> = sets[i].iter().copied().collect();
        if unique.is_empty() {
            continue;
        }
        let window: std::collections::BTreeSet<NodeId> = sets[i.saturating_sub(lag)..i].iter().flatten().copied().collect();
        total += unique.iter().filter(|v| window.contains(v)).count() as f64 / unique.len() as f64;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

fn check_sequence(sets: &[Vec<NodeId>], brute_force: bool) -> (bool, bool) {
    let fractions: Vec<f64> = (1..sets.len().max(2)).map(|k| stale_fraction(sets, k)).collect();
    let monotone = fractions.windows(2).all(|w| w[0] <= w[1]);
    let cap_ok = !brute_force
        || [0.1, 0.3, 0.5, 0.7].iter().all(|&th| {
            let brute = (1..sets.len()).filter(|&k| window_scan(sets, k) <= th).max().unwrap_or(1);
            k_max_from_threshold(sets, th) == brute
        });
    (monotone, cap_ok)
}

fn c9_stale_fraction(ctx: &Ctx) -> Outcome {
    let mut ok = true;
    let mut rows = Vec::new();
    for (name, cfg) in [("toy", SynthConfig::toy(0)), ("wiki", SynthConfig::wiki_shaped(0))] {
        let stream = generate(&cfg).unwrap();
        let sets = node_sets(&stream, 600);
        let (monotone, _) = check_sequence(&sets, false);
        // The brute-force cap check is quadratic; a prefix is plenty.
        let (_, cap_ok) = check_sequence(&sets[..60], true);
        ok &= monotone && cap_ok;
        rows.push(json!({"fixture": name, "batches": sets.len(), "k_max_at_half": k_max_from_threshold(&sets, 0.5), "monotone": monotone}));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 9);
    let mut random_ok = 0;
    for s in 0..100 {
        let sets = zipf_batches(rng.gen_range(30..2_000), rng.gen_range(2..50), rng.gen_range(5..80), rng.gen_range(0.5..1.8), s);
        let (m, c) = check_sequence(&sets, true);
        random_ok += usize::from(m && c);
    }
    ok &= random_ok == 100;
    ctx.save("c9", &json!({"fixtures": rows, "random_ok": random_ok}));
    outcome(ok, format!("toy and WIKI-shaped batches monotone; {random_ok}/100 random sequences monotone with k_max matching brute force"))
}

// ---------------------------------------------------------------------------

type Criterion = (usize, &'static str, fn(&Ctx) -> Outcome);

const CRITERIA: [Criterion; 9] = [
    (1, "recurrence/DES equivalence", c1_recurrence_equals_des),
    (2, "solver minimality", c2_solver_minimality),
    (3, "no-stall", c3_no_stall),
    (4, "speedup bound", c4_speedup),
    (5, "memory-overhead formula", c5_overhead),
    (6, "gradient checks", c6_gradients),
    (7, "synchronous equivalence", c7_synchronous_equivalence),
    (8, "staleness properties", c8_staleness_properties),
    (9, "stale-fraction monotonicity", c9_stale_fraction),
];

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Compares every metric file of two suite runs; run summaries are compared
/// without their wall-clock section.
fn compare_runs(a: &Path, b: &Path) -> (usize, Vec<String>) {
    let files = files_under(a);
    let mut differing = Vec::new();
    for f in &files {
        let (pa, pb) = (a.join(f), b.join(f));
        let same = if f.file_name().is_some_and(|n| n == RUN_FILE) {
            let ra: RunSummary = formats::read_json(&pa).unwrap();
            match formats::read_json::<RunSummary>(&pb) {
                Ok(rb) => ra.reproducible_json() == rb.reproducible_json(),
                Err(_) => false,
            }
        } else {
            fs::read(&pb).is_ok_and(|bytes| bytes == fs::read(&pa).unwrap())
        };
        if !same {
            differing.push(f.display().to_string());
        }
    }
    if files_under(b) != files {
        differing.push("file sets differ".into());
    }
    (files.len(), differing)
}

fn main() -> ExitCode {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&root);
    let first = Ctx { dir: root.join("first"), rerun: false };
    let mut failed = 0;
    for (n, name, f) in CRITERIA {
        let o = f(&first);
        failed += usize::from(!o.pass);
        println!("[{}] {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let start = Instant::now();
    let second = Ctx { dir: root.join("second"), rerun: true };
    for (_, _, f) in CRITERIA {
        f(&second);
    }
    let (count, differing) = compare_runs(&first.dir, &second.dir);
    let pass = differing.is_empty();
    failed += usize::from(!pass);
    println!(
        "[{}] 10 determinism: second suite run reproduced {}/{count} metric files byte for byte, wall clock excluded ({:.1} s){}",
        if pass { "PASS" } else { "FAIL" },
        count - differing.len().min(count),
        start.elapsed().as_secs_f64(),
        if pass { String::new() } else { format!("; differing: {}", differing.join(", ")) }
    );
    if failed == 0 {
        println!("acceptance: all 10 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
