use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stalepipe_core::graph::{
    delta_t_quantile, update_gaps, Event, EventStream, NegativeSampler, NeighborBuffer, SampledNeighbor, TimeOrder,
};
use stalepipe_core::synth::{generate, SynthConfig};
use stalepipe_core::NodeId;

fn random_events(seed: u64, n: usize, num_nodes: u32) -> Vec<Event> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0.0;
    (0..n)
        .map(|_| {
            // Whole-second steps with frequent ties.
            t += rng.gen_range(0..3) as f64;
            Event::new(rng.gen_range(0..num_nodes), rng.gen_range(0..num_nodes), t, Vec::new())
        })
        .collect()
}

/// Newest-first scan of the whole prefix for events touching `v` strictly
/// before `ts`.
fn brute_force(prefix: &[Event], v: NodeId, ts: f64, fan_out: usize) -> Vec<SampledNeighbor> {
    prefix
        .iter()
        .enumerate()
        .rev()
        .filter(|(_, e)| e.ts < ts && (e.src == v || e.dst == v))
        .take(fan_out)
        .map(|(idx, e)| {
            let node = if e.src == v { e.dst } else { e.src };
            SampledNeighbor { node, ts: e.ts, edge: idx, delta_t: ts - e.ts }
        })
        .collect()
}

fn fill(prefix: &[Event], num_nodes: usize, capacity: usize) -> NeighborBuffer {
    let mut buf = NeighborBuffer::new(num_nodes, capacity);
    for (idx, e) in prefix.iter().enumerate() {
        buf.insert_event(e, idx);
    }
    buf
}

#[test]
fn sampling_matches_brute_force_for_every_fan_out() {
    let num_nodes = 30;
    for seed in 0..5 {
        let events = random_events(seed, 1_000, num_nodes);
        for prefix_len in [0, 1, 17, 250, 1_000] {
            let prefix = &events[..prefix_len];
            let after = prefix.last().map_or(0.0, |e| e.ts) + 1.0;
            let buf = fill(prefix, num_nodes as usize, 10);
            for fan_out in 1..=10 {
                let roots: Vec<(NodeId, f64)> = (0..num_nodes).map(|v| (v, after)).collect();
                let sub = buf.sample_recent(&roots, fan_out);
                for (r, &(v, ts)) in roots.iter().enumerate() {
                    assert_eq!(sub.neighbors_of(r), brute_force(prefix, v, ts, fan_out).as_slice(), "seed {seed} v {v} fan {fan_out}");
                }
                assert!(sub.is_causal());
            }
        }
    }
}

#[test]
fn sampling_at_earlier_times_matches_brute_force_with_full_history() {
    let events = random_events(11, 600, 20);
    let buf = fill(&events, 20, events.len());
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let roots: Vec<(NodeId, f64)> = (0..200).map(|_| (rng.gen_range(0..20), rng.gen_range(0.0..700.0))).collect();
    for fan_out in [1, 3, 10, 50] {
        let sub = buf.sample_recent(&roots, fan_out);
        assert!(sub.is_causal());
        for (r, &(v, ts)) in roots.iter().enumerate() {
            assert_eq!(sub.neighbors_of(r), brute_force(&events, v, ts, fan_out).as_slice());
        }
    }
}

#[test]
fn splits_and_batches_partition_the_stream() {
    let events = random_events(3, 1_003, 50);
    let stream = EventStream::new(events.clone(), Some(50), 0, 0, TimeOrder::Strict).unwrap();
    let (train, val, test) = stream.chronological_split((0.7, 0.15, 0.15)).unwrap();
    let joined: Vec<Event> = [train.events(), val.events(), test.events()].concat();
    assert_eq!(joined, events);
    assert_eq!(val.base_index(), train.len());
    assert_eq!(test.base_index(), train.len() + val.len());

    let neg = NegativeSampler::new(50, 7).unwrap();
    for part in [&train, &val, &test] {
        let batches = part.batches(64, &neg).unwrap();
        let flat: Vec<Event> = batches.iter().flat_map(|b| b.events.iter().cloned()).collect();
        assert_eq!(flat.as_slice(), part.events());
        for (k, b) in batches.iter().enumerate() {
            assert_eq!(b.iteration, k + 1);
            assert_eq!(b.start, part.base_index() + 64 * k);
            assert_eq!(b.neg_dst.len(), b.len());
        }
        assert_eq!(part.batches(64, &neg).unwrap(), batches);
    }
}

#[test]
fn wiki_shaped_fixture_has_published_counts_and_heavy_tailed_gaps() {
    let cfg = SynthConfig::wiki_shaped(0);
    let stream = generate(&cfg).unwrap();
    let stats = stalepipe_core::fixtures::dataset("wiki").unwrap();
    assert_eq!(stream.num_nodes() as u64, stats.num_nodes);
    assert_eq!(stream.len() as u64, stats.num_events);
    assert_eq!(stream.edge_feat_dim() as u64, stats.edge_feat_dim);

    let gaps = update_gaps(stream.events(), stream.num_nodes());
    let median = delta_t_quantile(&gaps, 0.5).unwrap();
    let p99 = delta_t_quantile(&gaps, 0.99).unwrap();
    assert!(median > 0.0);
    assert!(p99 / median > 10.0, "p99 {p99} median {median}");
}

proptest! {
    #[test]
    fn quantile_is_the_nearest_rank(xs in proptest::collection::vec(0.0f64..1e6, 1..200), p in 0.001f64..0.999) {
        let q = delta_t_quantile(&xs, p).unwrap();
        let below = xs.iter().filter(|&&x| x <= q).count();
        let strictly = xs.iter().filter(|&&x| x < q).count();
        let rank = (p * xs.len() as f64).ceil() as usize;
        prop_assert!(strictly < rank.max(1) && below >= rank);
    }

    #[test]
    fn sampling_is_causal_and_bounded(seed in 0u64..1_000, fan_out in 1usize..12, cap in 1usize..12) {
        let events = random_events(seed, 200, 15);
        let buf = fill(&events, 15, cap);
        let roots: Vec<(NodeId, f64)> = events.iter().map(|e| (e.src, e.ts)).collect();
        let sub = buf.sample_recent(&roots, fan_out);
        prop_assert!(sub.is_causal());
        for r in 0..sub.len() {
            let ns = sub.neighbors_of(r);
            prop_assert!(ns.len() <= fan_out.min(cap));
            prop_assert!(ns.windows(2).all(|w| w[0].ts >= w[1].ts));
            prop_assert!(ns.iter().all(|n| n.delta_t > 0.0));
        }
    }

    #[test]
    fn negatives_are_reproducible(seed in 0u64..1_000, iteration in 1usize..100) {
        let events = random_events(seed, 30, 40);
        let a = NegativeSampler::new(40, seed).unwrap();
        prop_assert_eq!(a.sample(&events, iteration), a.sample(&events, iteration));
        prop_assert!(a.sample(&events, iteration).iter().all(|&v| v < 40));
        let strict = NegativeSampler { exclude_endpoints: true, ..a };
        let neg = strict.sample(&events, iteration);
        prop_assert!(neg.iter().zip(&events).all(|(&n, e)| n != e.src && n != e.dst));
    }
}
