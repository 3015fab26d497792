//! Temporal event streams, batching and most-recent neighbor sampling.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type NodeId = u32;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("event {index}: node {node} is out of range for {num_nodes} nodes")]
    NodeOutOfRange { index: usize, node: NodeId, num_nodes: usize },
    #[error("event {index}: expected {expected} edge features, found {found}")]
    EdgeFeatureDim { index: usize, expected: usize, found: usize },
    #[error("node feature matrix has {found} entries, expected {expected}")]
    NodeFeatureDim { expected: usize, found: usize },
    #[error("event {index}: timestamp {ts} precedes previous timestamp {prev}")]
    NonMonotoneTime { index: usize, prev: f64, ts: f64 },
    #[error("event {index}: timestamp {ts} is negative or not finite")]
    InvalidTimestamp { index: usize, ts: f64 },
    #[error("split fractions must be positive and sum to 1, got ({0}, {1}, {2})")]
    InvalidFractions(f64, f64, f64),
    #[error("event stream is empty")]
    EmptyStream,
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
    #[error("graph must have at least one node")]
    ZeroNodes,
    #[error("no delta-t observations")]
    EmptyObservations,
    #[error("quantile must lie in (0, 1), got {0}")]
    InvalidQuantile(f64),
}

/// One interaction `src -> dst` at time `ts` (seconds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub src: NodeId,
    pub dst: NodeId,
    pub ts: f64,
    pub edge_feat: Vec<f32>,
    pub label: Option<bool>,
}

impl Event {
    pub fn new(src: NodeId, dst: NodeId, ts: f64, edge_feat: Vec<f32>) -> Self {
        Event { src, dst, ts, edge_feat, label: None }
    }

    pub fn is_self_loop(&self) -> bool {
        self.src == self.dst
    }
}

/// How out-of-order timestamps are handled on construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TimeOrder {
    /// Reject a stream whose timestamps decrease.
    #[default]
    Strict,
    /// Stable-sort by timestamp, keeping file order on ties.
    StableSort,
}

/// A time-ordered list of events over a fixed node set.
///
/// Splits keep `base_index`, the position of the first event in the stream
/// they were cut from, so edge indices stay global.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
    num_nodes: usize,
    node_feat_dim: usize,
    edge_feat_dim: usize,
    node_feats: Vec<f32>,
    base_index: usize,
}

impl EventStream {
    /// Builds a stream, validating ids, feature widths and timestamps.
    ///
    /// `num_nodes` defaults to the largest id plus one. Node features default
    /// to zeros.
    pub fn new(
        mut events: Vec<Event>,
        num_nodes: Option<usize>,
        node_feat_dim: usize,
        edge_feat_dim: usize,
        order: TimeOrder,
    ) -> Result<Self, GraphError> {
        let inferred = events
            .iter()
            .map(|e| e.src.max(e.dst) as usize + 1)
            .max()
            .unwrap_or(0);
        let num_nodes = num_nodes.unwrap_or(inferred);
        let mut prev = f64::NEG_INFINITY;
        for (index, e) in events.iter().enumerate() {
            for node in [e.src, e.dst] {
                if node as usize >= num_nodes {
                    return Err(GraphError::NodeOutOfRange { index, node, num_nodes });
                }
            }
            if e.edge_feat.len() != edge_feat_dim {
                return Err(GraphError::EdgeFeatureDim {
                    index,
                    expected: edge_feat_dim,
                    found: e.edge_feat.len(),
                });
            }
            if !e.ts.is_finite() || e.ts < 0.0 {
                return Err(GraphError::InvalidTimestamp { index, ts: e.ts });
            }
            if e.ts < prev && order == TimeOrder::Strict {
                return Err(GraphError::NonMonotoneTime { index, prev, ts: e.ts });
            }
            prev = prev.max(e.ts);
        }
        if order == TimeOrder::StableSort {
            events.sort_by(|a, b| a.ts.total_cmp(&b.ts));
        }
        Ok(EventStream {
            events,
            num_nodes,
            node_feat_dim,
            edge_feat_dim,
            node_feats: vec![0.0; num_nodes * node_feat_dim],
            base_index: 0,
        })
    }

    /// Replaces the (default zero) node feature matrix, row-major `num_nodes x Hn`.
    pub fn with_node_features(mut self, feats: Vec<f32>) -> Result<Self, GraphError> {
        let expected = self.num_nodes * self.node_feat_dim;
        if feats.len() != expected {
            return Err(GraphError::NodeFeatureDim { expected, found: feats.len() });
        }
        self.node_feats = feats;
        Ok(self)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn node_feat_dim(&self) -> usize {
        self.node_feat_dim
    }

    pub fn edge_feat_dim(&self) -> usize {
        self.edge_feat_dim
    }

    pub fn node_features(&self, v: NodeId) -> &[f32] {
        let d = self.node_feat_dim;
        &self.node_feats[v as usize * d..(v as usize + 1) * d]
    }

    /// Global index of the first event.
    pub fn base_index(&self) -> usize {
        self.base_index
    }

    /// Time span covered by the stream, in seconds.
    pub fn duration(&self) -> f64 {
        match (self.events.first(), self.events.last()) {
            (Some(a), Some(b)) => b.ts - a.ts,
            _ => 0.0,
        }
    }

    fn slice(&self, from: usize, to: usize) -> EventStream {
        EventStream {
            events: self.events[from..to].to_vec(),
            num_nodes: self.num_nodes,
            node_feat_dim: self.node_feat_dim,
            edge_feat_dim: self.edge_feat_dim,
            node_feats: self.node_feats.clone(),
            base_index: self.base_index + from,
        }
    }

    /// Cuts the stream into contiguous train / validation / test parts.
    ///
    /// Validation and test get `floor(f * E)` events; the remainder goes to
    /// training.
    pub fn chronological_split(
        &self,
        fractions: (f64, f64, f64),
    ) -> Result<(EventStream, EventStream, EventStream), GraphError> {
        let (train, val, test) = fractions;
        let ok = [train, val, test].iter().all(|f| f.is_finite() && *f > 0.0)
            && ((train + val + test) - 1.0).abs() <= 1e-9;
        if !ok {
            return Err(GraphError::InvalidFractions(train, val, test));
        }
        if self.events.is_empty() {
            return Err(GraphError::EmptyStream);
        }
        let n = self.events.len();
        let n_val = libm::floor(val * n as f64) as usize;
        let n_test = libm::floor(test * n as f64) as usize;
        let n_train = n - n_val - n_test;
        Ok((
            self.slice(0, n_train),
            self.slice(n_train, n_train + n_val),
            self.slice(n_train + n_val, n),
        ))
    }

    /// Consecutive batches of `batch_size` events, numbered from 1, each with
    /// one negative destination per event.
    pub fn batches<'a>(
        &'a self,
        batch_size: usize,
        negatives: &NegativeSampler,
    ) -> Result<Vec<Batch<'a>>, GraphError> {
        if batch_size == 0 {
            return Err(GraphError::ZeroBatchSize);
        }
        Ok(self
            .events
            .chunks(batch_size)
            .enumerate()
            .map(|(k, events)| {
                let iteration = k + 1;
                Batch {
                    iteration,
                    start: self.base_index + k * batch_size,
                    events,
                    neg_dst: negatives.sample(events, iteration),
                }
            })
            .collect())
    }
}

/// Number of batches `ceil(E / B)`.
pub fn batch_count(events: usize, batch_size: usize) -> usize {
    events.div_ceil(batch_size)
}

/// A run of consecutive events plus their negative destinations.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<'a> {
    /// 1-based iteration number within the epoch.
    pub iteration: usize,
    /// Global index of the first event.
    pub start: usize,
    pub events: &'a [Event],
    pub neg_dst: Vec<NodeId>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Distinct positive endpoints in first-seen order.
    pub fn positive_nodes(&self) -> Vec<NodeId> {
        let mut seen = alloc::collections::BTreeSet::new();
        let mut out = Vec::new();
        for e in self.events {
            for v in [e.src, e.dst] {
                if seen.insert(v) {
                    out.push(v);
                }
            }
        }
        out
    }
}

/// Uniform negative destinations, reproducible from a seed and the
/// iteration number.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeSampler {
    pub num_nodes: usize,
    pub seed: u64,
    /// Redraw negatives that hit the event's own endpoints.
    pub exclude_endpoints: bool,
}

impl NegativeSampler {
    pub fn new(num_nodes: usize, seed: u64) -> Result<Self, GraphError> {
        if num_nodes == 0 {
            return Err(GraphError::ZeroNodes);
        }
        Ok(NegativeSampler { num_nodes, seed, exclude_endpoints: false })
    }

    pub fn sample(&self, events: &[Event], iteration: usize) -> Vec<NodeId> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(iteration as u64);
        let n = self.num_nodes as NodeId;
        events
            .iter()
            .map(|e| {
                let mut v = rng.gen_range(0..n);
                // Exclusion is impossible when the endpoints cover every node.
                let excludable = self.num_nodes > 2 || (self.num_nodes == 2 && e.is_self_loop());
                while self.exclude_endpoints && excludable && (v == e.src || v == e.dst) {
                    v = rng.gen_range(0..n);
                }
                v
            })
            .collect()
    }
}

/// One retained interaction in a node's history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborEntry {
    pub node: NodeId,
    pub ts: f64,
    /// Global event index.
    pub edge: usize,
}

/// Per-node ring buffers holding the most recent interactions.
#[derive(Debug, Clone)]
pub struct NeighborBuffer {
    capacity: usize,
    lists: Vec<VecDeque<NeighborEntry>>,
    last_ts: f64,
}

impl NeighborBuffer {
    pub fn new(num_nodes: usize, capacity: usize) -> Self {
        NeighborBuffer {
            capacity,
            lists: (0..num_nodes).map(|_| VecDeque::with_capacity(capacity)).collect(),
            last_ts: f64::NEG_INFINITY,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn num_nodes(&self) -> usize {
        self.lists.len()
    }

    /// Adds the event to both endpoints' histories; a self-loop adds a single
    /// entry.
    pub fn insert_event(&mut self, event: &Event, edge: usize) {
        debug_assert!(event.ts >= self.last_ts, "events must arrive in time order");
        self.last_ts = self.last_ts.max(event.ts);
        self.push(event.src, NeighborEntry { node: event.dst, ts: event.ts, edge });
        if !event.is_self_loop() {
            self.push(event.dst, NeighborEntry { node: event.src, ts: event.ts, edge });
        }
    }

    fn push(&mut self, v: NodeId, entry: NeighborEntry) {
        if self.capacity == 0 {
            return;
        }
        let list = &mut self.lists[v as usize];
        if list.len() == self.capacity {
            list.pop_front();
        }
        list.push_back(entry);
    }

    /// Retained history of `v`, oldest first.
    pub fn neighbors(&self, v: NodeId) -> impl DoubleEndedIterator<Item = &NeighborEntry> + '_ {
        self.lists[v as usize].iter()
    }

    pub fn clear(&mut self) {
        for l in &mut self.lists {
            l.clear();
        }
        self.last_ts = f64::NEG_INFINITY;
    }

    /// Up to `fan_out` most recent neighbors of each `(node, ts)` root, newest
    /// first. Entries at or after the root's timestamp are skipped.
    pub fn sample_recent(&self, roots: &[(NodeId, f64)], fan_out: usize) -> Subgraph {
        let mut offsets = Vec::with_capacity(roots.len() + 1);
        let mut neighbors = Vec::with_capacity(roots.len() * fan_out.min(self.capacity));
        offsets.push(0);
        for &(v, ts) in roots {
            neighbors.extend(
                self.neighbors(v)
                    .rev()
                    .filter(|n| n.ts < ts)
                    .take(fan_out)
                    .map(|n| SampledNeighbor { node: n.node, ts: n.ts, edge: n.edge, delta_t: ts - n.ts }),
            );
            offsets.push(neighbors.len());
        }
        Subgraph { roots: roots.to_vec(), offsets, neighbors }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampledNeighbor {
    pub node: NodeId,
    pub ts: f64,
    pub edge: usize,
    /// Root timestamp minus neighbor timestamp, always positive.
    pub delta_t: f64,
}

/// Sampled one-hop neighborhoods for a list of `(node, ts)` roots.
#[derive(Debug, Clone, PartialEq)]
pub struct Subgraph {
    pub roots: Vec<(NodeId, f64)>,
    offsets: Vec<usize>,
    neighbors: Vec<SampledNeighbor>,
}

impl Subgraph {
    pub fn len(&self) -> usize {
        self.roots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roots.is_empty()
    }

    pub fn neighbors_of(&self, root: usize) -> &[SampledNeighbor] {
        &self.neighbors[self.offsets[root]..self.offsets[root + 1]]
    }

    pub fn all_neighbors(&self) -> &[SampledNeighbor] {
        &self.neighbors
    }

    /// No sampled neighbor is at or after its root's timestamp.
    pub fn is_causal(&self) -> bool {
        (0..self.len()).all(|r| self.neighbors_of(r).iter().all(|n| n.ts < self.roots[r].1))
    }
}

/// Gaps between consecutive events of each node, in stream order.
pub fn update_gaps(events: &[Event], num_nodes: usize) -> Vec<f64> {
    let mut last = vec![f64::NAN; num_nodes];
    let mut gaps = Vec::new();
    for e in events {
        let ends: &[NodeId] = if e.is_self_loop() { &[e.src] } else { &[e.src, e.dst] };
        for &v in ends {
            let prev = last[v as usize];
            if !prev.is_nan() {
                gaps.push(e.ts - prev);
            }
            last[v as usize] = e.ts;
        }
    }
    gaps
}

/// Nearest-rank `p`-quantile: the `ceil(p * n)`-th smallest observation.
pub fn delta_t_quantile(observations: &[f64], p: f64) -> Result<f64, GraphError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(GraphError::InvalidQuantile(p));
    }
    if observations.is_empty() {
        return Err(GraphError::EmptyObservations);
    }
    let mut sorted = observations.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (libm::ceil(p * sorted.len() as f64) as usize).clamp(1, sorted.len());
    Ok(sorted[rank - 1].max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(src: NodeId, dst: NodeId, ts: f64) -> Event {
        Event::new(src, dst, ts, Vec::new())
    }

    fn stream(n: usize) -> EventStream {
        let events = (0..n).map(|i| ev((i % 7) as NodeId, 7 + (i % 5) as NodeId, i as f64)).collect();
        EventStream::new(events, None, 0, 0, TimeOrder::Strict).unwrap()
    }

    #[test]
    fn infers_node_count() {
        let s = EventStream::new(vec![ev(0, 4, 1.0), ev(2, 1, 2.0), ev(3, 0, 3.0)], None, 0, 0, TimeOrder::Strict)
            .unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.num_nodes(), 5);
    }

    #[test]
    fn strict_order_rejects_decreasing_time() {
        let err = EventStream::new(vec![ev(0, 1, 2.0), ev(1, 2, 1.0)], None, 0, 0, TimeOrder::Strict).unwrap_err();
        assert_eq!(err, GraphError::NonMonotoneTime { index: 1, prev: 2.0, ts: 1.0 });
    }

    #[test]
    fn stable_sort_keeps_ties_in_file_order() {
        let s = EventStream::new(
            vec![ev(0, 1, 2.0), ev(5, 6, 1.0), ev(2, 3, 1.0)],
            None,
            0,
            0,
            TimeOrder::StableSort,
        )
        .unwrap();
        let order: Vec<_> = s.events().iter().map(|e| e.src).collect();
        assert_eq!(order, [5, 2, 0]);
    }

    #[test]
    fn split_sizes() {
        let (a, b, c) = stream(100).chronological_split((0.7, 0.15, 0.15)).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (70, 15, 15));
        assert_eq!((b.base_index(), c.base_index()), (70, 85));

        let (a, b, c) = stream(1).chronological_split((0.7, 0.15, 0.15)).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (1, 0, 0));

        assert!(matches!(
            stream(10).chronological_split((0.7, 0.1, 0.1)),
            Err(GraphError::InvalidFractions(..))
        ));
        let empty = EventStream::new(Vec::new(), Some(3), 0, 0, TimeOrder::Strict).unwrap();
        assert_eq!(empty.chronological_split((0.7, 0.15, 0.15)), Err(GraphError::EmptyStream));
    }

    #[test]
    fn batch_sizes() {
        let neg = NegativeSampler::new(12, 1).unwrap();
        let s = stream(1300);
        let sizes: Vec<_> = s.batches(600, &neg).unwrap().iter().map(|b| b.len()).collect();
        assert_eq!(sizes, [600, 600, 100]);
        let b = stream(600);
        let batches = b.batches(600, &neg).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].iteration, 1);
        assert_eq!(batches[0].neg_dst.len(), 600);
        assert_eq!(s.batches(0, &neg), Err(GraphError::ZeroBatchSize));
    }

    #[test]
    fn negatives_are_deterministic() {
        let s = stream(50);
        let neg = NegativeSampler::new(12, 9).unwrap();
        assert_eq!(neg.sample(s.events(), 3), neg.sample(s.events(), 3));
        assert_ne!(neg.sample(s.events(), 3), neg.sample(s.events(), 4));
        let one = NegativeSampler::new(1, 9).unwrap();
        assert!(one.sample(s.events(), 1).iter().all(|&v| v == 0));
        assert_eq!(NegativeSampler::new(0, 1), Err(GraphError::ZeroNodes));
    }

    #[test]
    fn negatives_can_exclude_endpoints() {
        let s = stream(200);
        let mut neg = NegativeSampler::new(12, 3).unwrap();
        neg.exclude_endpoints = true;
        let out = neg.sample(s.events(), 1);
        for (e, v) in s.events().iter().zip(out) {
            assert!(v != e.src && v != e.dst);
        }
    }

    #[test]
    fn negatives_are_uniform() {
        // Chi-square against the uniform distribution over 20 nodes.
        let n = 20usize;
        let events: Vec<_> = (0..100_000).map(|i| ev(0, 1, i as f64)).collect();
        let neg = NegativeSampler::new(n, 42).unwrap();
        let mut counts = vec![0usize; n];
        for v in neg.sample(&events, 1) {
            counts[v as usize] += 1;
        }
        let expected = 100_000.0 / n as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 19 degrees of freedom; mean 19, sd sqrt(38). Accept within 3 sd.
        assert!(chi2 < 19.0 + 3.0 * 38f64.sqrt(), "chi2 = {chi2}");
        let p = 1.0 / n as f64;
        let sd = (100_000.0 * p * (1.0 - p)).sqrt();
        assert!(counts.iter().all(|&c| (c as f64 - expected).abs() < 4.0 * sd));
    }

    #[test]
    fn buffer_keeps_most_recent() {
        let mut buf = NeighborBuffer::new(20, 10);
        for i in 0..3 {
            buf.insert_event(&ev(0, 1 + i, i as f64), i as usize);
        }
        let ids: Vec<_> = buf.neighbors(0).map(|n| n.node).collect();
        assert_eq!(ids, [1, 2, 3]);

        let mut buf = NeighborBuffer::new(20, 10);
        for i in 0..12 {
            buf.insert_event(&ev(0, 1 + i, i as f64), i as usize);
        }
        let ids: Vec<_> = buf.neighbors(0).map(|n| n.node).collect();
        assert_eq!(ids, (3..=12).collect::<Vec<_>>());
        assert_eq!(buf.neighbors(5).count(), 1);
    }

    #[test]
    fn self_loop_adds_one_entry() {
        let mut buf = NeighborBuffer::new(3, 10);
        buf.insert_event(&ev(2, 2, 1.0), 0);
        assert_eq!(buf.neighbors(2).count(), 1);
    }

    #[test]
    fn sampling_cold_start_and_order() {
        let mut buf = NeighborBuffer::new(10, 10);
        let g = buf.sample_recent(&[(4, 1.0)], 10);
        assert!(g.neighbors_of(0).is_empty());
        for (i, d) in [1, 2, 3].into_iter().enumerate() {
            buf.insert_event(&ev(0, d, i as f64), i);
        }
        let g = buf.sample_recent(&[(0, 10.0)], 10);
        let ids: Vec<_> = g.neighbors_of(0).iter().map(|n| n.node).collect();
        assert_eq!(ids, [3, 2, 1]);
        assert!(g.is_causal());
        assert_eq!(g.neighbors_of(0)[0].delta_t, 8.0);
    }

    #[test]
    fn quantile() {
        assert_eq!(delta_t_quantile(&[5.0; 10], 0.3).unwrap(), 5.0);
        assert_eq!(delta_t_quantile(&[5.0; 10], 0.99).unwrap(), 5.0);
        assert_eq!(delta_t_quantile(&[4.0, 1.0, 3.0, 2.0], 0.5).unwrap(), 2.0);
        assert_eq!(delta_t_quantile(&[4.0, 1.0, 3.0, 2.0], 0.51).unwrap(), 3.0);
        assert_eq!(delta_t_quantile(&[], 0.5), Err(GraphError::EmptyObservations));
        assert_eq!(delta_t_quantile(&[1.0], 1.0), Err(GraphError::InvalidQuantile(1.0)));
    }

    #[test]
    fn gaps_per_node() {
        let events = [ev(0, 1, 1.0), ev(0, 2, 4.0), ev(1, 1, 6.0)];
        let mut gaps = update_gaps(&events, 3);
        gaps.sort_by(f64::total_cmp);
        assert_eq!(gaps, [3.0, 5.0]);
    }
}
