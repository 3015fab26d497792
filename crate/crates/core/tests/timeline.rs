use proptest::prelude::*;
use stalepipe_core::fixtures;
use stalepipe_core::pipeline::{
    build_timeline, build_timeline_with, greedy_min_staleness, solve_min_staleness, solve_min_staleness_with, C1Orientation, Dependency,
    PipelineError, Stage, StageProfile, StalenessPlan,
};
use stalepipe_core::sim::{simulate, verify_no_stall, Trace};

/// C2 on a simulated trace: the gated update may delay the memory fetch
/// only up to the later of its ungated start and the point where training
/// would still start right after the previous iteration's training.
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

fn profile() -> impl Strategy<Value = StageProfile> {
    proptest::array::uniform5(1.0f64..100.0).prop_map(|t| StageProfile::new(t).unwrap())
}

#[test]
fn hand_evaluated_synchronous_schedule() {
    let p = StageProfile::new([1.0, 1.0, 1.0, 4.0, 2.0]).unwrap();
    let t = simulate(&p, Dependency::Synchronous, 3).unwrap();
    let expect = [
        [(0.0, 1.0), (1.0, 2.0), (2.0, 3.0), (3.0, 7.0), (7.0, 9.0)],
        [(1.0, 2.0), (3.0, 4.0), (9.0, 10.0), (10.0, 14.0), (14.0, 16.0)],
        [(2.0, 3.0), (10.0, 11.0), (16.0, 17.0), (17.0, 21.0), (21.0, 23.0)],
    ];
    for (i, row) in expect.iter().enumerate() {
        for (s, &(b, e)) in Stage::ALL.iter().zip(row) {
            let r = t.get(i + 1, *s).unwrap();
            assert_eq!((r.start_ms, r.end_ms), (b, e), "iteration {} {s}", i + 1);
        }
    }
    assert_eq!(Trace::from_timeline(&build_timeline(&p, 3, None).unwrap()), t);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn recurrence_matches_simulation(p in profile(), e in 1usize..50, k in 1usize..5) {
        let plan = StalenessPlan::constant(k, e, 5);
        for dep in [Dependency::Synchronous, Dependency::Unbounded, Dependency::Bounded(&plan)] {
            let tl = build_timeline_with(&p, e, dep).unwrap();
            prop_assert_eq!(Trace::from_timeline(&tl), simulate(&p, dep, e).unwrap());
        }
    }

    #[test]
    fn timeline_invariants(p in profile(), e in 1usize..40) {
        let tl = build_timeline(&p, e, None).unwrap();
        for i in 1..=e {
            for s in Stage::ALL {
                prop_assert_eq!(tl.end(i, s), tl.start(i, s) + p.tau(s));
                prop_assert!(tl.start(i, s) >= 0.0);
                if i > 1 {
                    prop_assert!(tl.start(i, s) >= tl.start(i - 1, s));
                }
            }
        }
    }

    #[test]
    fn solver_is_minimal(p in profile()) {
        let e = 40;
        match solve_min_staleness(&p, e, 5) {
            Ok(plan) => {
                let k = plan.steady_k().unwrap();
                prop_assert!(sim_feasible(&p, k, e));
                for smaller in 1..k {
                    prop_assert!(!sim_feasible(&p, smaller, e));
                }
            }
            Err(PipelineError::Infeasible { .. }) => {
                for k in 1..5 {
                    prop_assert!(!sim_feasible(&p, k, e));
                }
            }
            Err(other) => prop_assert!(false, "{other}"),
        }
    }

    // Holds while training stays the busiest resource. Past that point the
    // shorter round trip can hide behind the new bottleneck instead.
    #[test]
    fn shorter_training_never_lowers_k(
        t in proptest::array::uniform5(1.0f64..100.0),
        slack in 0.0f64..200.0,
        cut in 0.0f64..200.0,
    ) {
        let busiest = t[0].max(t[1] + t[2]).max(t[4]);
        let short = [t[0], t[1], t[2], busiest + slack, t[4]];
        let long = [t[0], t[1], t[2], busiest + slack + cut, t[4]];
        let (p, q) = (StageProfile::new(long).unwrap(), StageProfile::new(short).unwrap());
        let k = |p: &StageProfile| solve_min_staleness(p, 40, 64).map(|plan| plan.steady_k().unwrap());
        if let (Ok(a), Ok(b)) = (k(&p), k(&q)) {
            prop_assert!(b >= a, "k went from {a} to {b}");
        }
    }
}

#[test]
fn published_breakdowns_need_two_to_four() {
    for b in &fixtures::TGN {
        let p = b.profile();
        let plan = solve_min_staleness(&p, 200, 5).unwrap();
        let k = plan.steady_k().unwrap();
        assert!((2..=4).contains(&k), "{}: k = {k}", b.name());
        let t = p.taus();
        // Closed-form steady state: k - 1 training stages hide the round trip.
        assert!((k - 1) as f64 * t[3] >= t[2] + t[4]);
        let trace = simulate(&p, Dependency::Bounded(&plan), 200).unwrap();
        assert!(verify_no_stall(&trace, plan.warmup, 0.0).stall_free, "{}", b.name());
        let forced = StalenessPlan::constant(k - 1, 200, 5);
        let stalled = simulate(&p, Dependency::Bounded(&forced), 200).unwrap();
        assert!(!verify_no_stall(&stalled, forced.warmup, 0.0).stall_free, "{}", b.name());
    }
}

#[test]
fn greedy_settles_on_the_steady_bound() {
    for b in &fixtures::TGN {
        let p = b.profile();
        let steady = solve_min_staleness(&p, 100, 5).unwrap().steady_k().unwrap();
        let greedy = greedy_min_staleness(&p, 100, 5).unwrap();
        assert_eq!(*greedy.k.last().unwrap(), steady, "{}", b.name());
    }
}

#[test]
fn shorter_training_behind_a_slower_link_can_lower_k() {
    let slow = StageProfile::new([1.0, 98.75, 1.0, 89.3, 33.24]).unwrap();
    let fast = StageProfile::new([1.0, 98.75, 1.0, 4.47, 33.24]).unwrap();
    assert_eq!(solve_min_staleness(&slow, 40, 64).unwrap().steady_k(), Some(2));
    assert_eq!(solve_min_staleness(&fast, 40, 64).unwrap().steady_k(), Some(1));
}

#[test]
fn printed_orientation_agrees_on_published_breakdowns() {
    for b in &fixtures::TGN {
        let p = b.profile();
        let gate = solve_min_staleness(&p, 50, 5).unwrap();
        let printed = solve_min_staleness_with(&p, 50, 5, C1Orientation::Printed).unwrap();
        assert_eq!(gate.steady_k(), printed.steady_k(), "{}", b.name());
    }
}
