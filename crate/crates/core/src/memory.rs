//! Versioned node memory with delayed writes, plus staleness statistics and
//! similarity-based mitigation.
//!
//! Writes are queued as per-iteration records and only become visible to a
//! read whose staleness target covers them: a read at iteration `i` with bound
//! `k` sees exactly the commits of iterations `1..=i-k`.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::graph::{Event, NodeId};
use crate::math;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StoreError {
    #[error("store needs at least one node and a memory dimension of at least 1")]
    EmptyShape,
    #[error("expected {expected} values, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("node {node} is out of range for {num_nodes} nodes")]
    NodeOutOfRange { node: NodeId, num_nodes: usize },
    #[error("commit for iteration {iteration} arrived after iteration {last}")]
    OutOfOrderCommit { iteration: u64, last: u64 },
    #[error("read needs commits through iteration {required} but only {committed} are committed")]
    GateViolation { required: u64, committed: u64 },
    #[error("node {node} already holds the write of iteration {written}, newer than read target {target}")]
    StalenessConsistency { node: NodeId, written: u64, target: u64 },
    #[error("non-finite memory value for node {node}")]
    NonFinite { node: NodeId },
    #[error("invalid mitigation config: {0}")]
    InvalidMitigation(&'static str),
}

/// Update bookkeeping for one node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeMeta {
    /// Iteration of the last applied write; 0 when never written.
    pub last_update_iter: u64,
    /// Event time of the last applied write; `-inf` when never written.
    pub last_update_ts: f64,
}

impl NodeMeta {
    pub const NEVER: NodeMeta = NodeMeta { last_update_iter: 0, last_update_ts: f64::NEG_INFINITY };

    pub fn never_updated(&self) -> bool {
        self.last_update_iter == 0
    }

    /// Time since the last write, or `None` if the node was never written.
    pub fn delta_t(&self, now: f64) -> Option<f64> {
        (!self.never_updated()).then_some(now - self.last_update_ts)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct WriteRecord {
    iteration: u64,
    nodes: Vec<NodeId>,
    memory: Vec<f64>,
    aux: Vec<f64>,
    event_ts: Vec<f64>,
}

/// Rows read for a set of nodes at one staleness target.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub nodes: Vec<NodeId>,
    /// Highest iteration whose writes are reflected.
    pub through: u64,
    pub meta: Vec<NodeMeta>,
    dim: usize,
    aux_dim: usize,
    memory: Vec<f64>,
    aux: Vec<f64>,
}

impl Snapshot {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn memory(&self, row: usize) -> &[f64] {
        &self.memory[row * self.dim..(row + 1) * self.dim]
    }

    pub fn aux(&self, row: usize) -> &[f64] {
        &self.aux[row * self.aux_dim..(row + 1) * self.aux_dim]
    }

    /// All memory rows, row-major.
    pub fn memory_matrix(&self) -> &[f64] {
        &self.memory
    }
}

/// Per-node memory vectors (`num_nodes x dim`) with an optional auxiliary row
/// per node that is versioned together with the memory.
#[derive(Debug, Clone)]
pub struct MemoryStore {
    num_nodes: usize,
    dim: usize,
    aux_dim: usize,
    memory: Vec<f64>,
    aux: Vec<f64>,
    meta: Vec<NodeMeta>,
    pending: VecDeque<WriteRecord>,
    applied_through: u64,
    last_committed: u64,
    strict: bool,
    activity_horizon: Option<f64>,
    activity: VecDeque<(f64, NodeId)>,
}

impl MemoryStore {
    /// All-zero store in strict mode.
    pub fn new(num_nodes: usize, dim: usize) -> Result<Self, StoreError> {
        Self::with_aux(num_nodes, dim, 0)
    }

    pub fn with_aux(num_nodes: usize, dim: usize, aux_dim: usize) -> Result<Self, StoreError> {
        if num_nodes == 0 || dim == 0 {
            return Err(StoreError::EmptyShape);
        }
        Ok(MemoryStore {
            num_nodes,
            dim,
            aux_dim,
            memory: vec![0.0; num_nodes * dim],
            aux: vec![0.0; num_nodes * aux_dim],
            meta: vec![NodeMeta::NEVER; num_nodes],
            pending: VecDeque::new(),
            applied_through: 0,
            last_committed: 0,
            strict: true,
            activity_horizon: None,
            activity: VecDeque::new(),
        })
    }

    /// In lenient mode reads may return values newer than their target instead
    /// of failing.
    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    /// Keep a log of writes from the last `horizon` seconds for
    /// [`MemoryStore::recently_updated`].
    pub fn track_activity(&mut self, horizon: f64) {
        self.activity_horizon = Some(horizon);
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn aux_dim(&self) -> usize {
        self.aux_dim
    }

    /// Highest iteration committed (queued or applied).
    pub fn committed_through(&self) -> u64 {
        self.last_committed
    }

    /// Highest iteration whose writes are applied to the visible state.
    pub fn applied_through(&self) -> u64 {
        self.applied_through
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn meta(&self, v: NodeId) -> NodeMeta {
        self.meta[v as usize]
    }

    fn check_node(&self, node: NodeId) -> Result<(), StoreError> {
        if node as usize >= self.num_nodes {
            return Err(StoreError::NodeOutOfRange { node, num_nodes: self.num_nodes });
        }
        Ok(())
    }

    /// Queues the writes of `iteration`. Rows are `nodes.len() x dim` and
    /// `nodes.len() x aux_dim`; a node listed twice keeps its later row.
    pub fn commit_update(
        &mut self,
        iteration: u64,
        nodes: &[NodeId],
        memory: &[f64],
        aux: &[f64],
        event_ts: &[f64],
    ) -> Result<(), StoreError> {
        let n = nodes.len();
        for (expected, found) in [(n * self.dim, memory.len()), (n * self.aux_dim, aux.len()), (n, event_ts.len())] {
            if expected != found {
                return Err(StoreError::DimensionMismatch { expected, found });
            }
        }
        let floor = if self.strict { self.last_committed } else { self.applied_through };
        if iteration <= floor || iteration < self.last_committed {
            return Err(StoreError::OutOfOrderCommit { iteration, last: self.last_committed });
        }
        for (row, &node) in nodes.iter().enumerate() {
            self.check_node(node)?;
            if memory[row * self.dim..(row + 1) * self.dim].iter().any(|x| !x.is_finite()) {
                return Err(StoreError::NonFinite { node });
            }
        }
        self.pending.push_back(WriteRecord {
            iteration,
            nodes: nodes.to_vec(),
            memory: memory.to_vec(),
            aux: aux.to_vec(),
            event_ts: event_ts.to_vec(),
        });
        self.last_committed = iteration;
        Ok(())
    }

    fn apply_through(&mut self, target: u64) {
        while self.pending.front().is_some_and(|r| r.iteration <= target) {
            let record = self.pending.pop_front().unwrap();
            for (row, &v) in record.nodes.iter().enumerate() {
                let v_ = v as usize;
                self.memory[v_ * self.dim..(v_ + 1) * self.dim]
                    .copy_from_slice(&record.memory[row * self.dim..(row + 1) * self.dim]);
                self.aux[v_ * self.aux_dim..(v_ + 1) * self.aux_dim]
                    .copy_from_slice(&record.aux[row * self.aux_dim..(row + 1) * self.aux_dim]);
                self.meta[v_] = NodeMeta { last_update_iter: record.iteration, last_update_ts: record.event_ts[row] };
                if self.activity_horizon.is_some() {
                    self.activity.push_back((record.event_ts[row], v));
                }
            }
        }
        self.applied_through = self.applied_through.max(target.min(self.last_committed));
        if let (Some(h), Some(&(latest, _))) = (self.activity_horizon, self.activity.back()) {
            while self.activity.front().is_some_and(|&(ts, _)| ts < latest - h) {
                self.activity.pop_front();
            }
        }
    }

    /// Applies every queued write.
    pub fn flush(&mut self) {
        self.apply_through(u64::MAX);
    }

    /// State of `nodes` as of the commits of iterations `1..=current_iter - k`.
    ///
    /// Queued writes up to that target are applied. Fails in strict mode if the
    /// target has not been committed yet or a requested node already holds a
    /// newer write.
    pub fn read_snapshot(&mut self, nodes: &[NodeId], current_iter: u64, k: u64) -> Result<Snapshot, StoreError> {
        let target = current_iter.saturating_sub(k);
        if self.strict && target > self.last_committed {
            return Err(StoreError::GateViolation { required: target, committed: self.last_committed });
        }
        self.apply_through(target);
        self.view(nodes, target)
    }

    /// Like [`MemoryStore::read_snapshot`] targeting iteration `through`, but
    /// overlays queued writes instead of applying them.
    pub fn view(&self, nodes: &[NodeId], through: u64) -> Result<Snapshot, StoreError> {
        let mut positions: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
        for (row, &v) in nodes.iter().enumerate() {
            self.check_node(v)?;
            positions.entry(v).or_default().push(row);
        }
        let mut snap = Snapshot {
            nodes: nodes.to_vec(),
            through: through.min(self.last_committed),
            meta: Vec::with_capacity(nodes.len()),
            dim: self.dim,
            aux_dim: self.aux_dim,
            memory: Vec::with_capacity(nodes.len() * self.dim),
            aux: Vec::with_capacity(nodes.len() * self.aux_dim),
        };
        for &v in nodes {
            let v_ = v as usize;
            let meta = self.meta[v_];
            if self.strict && meta.last_update_iter > through {
                return Err(StoreError::StalenessConsistency { node: v, written: meta.last_update_iter, target: through });
            }
            snap.meta.push(meta);
            snap.memory.extend_from_slice(&self.memory[v_ * self.dim..(v_ + 1) * self.dim]);
            snap.aux.extend_from_slice(&self.aux[v_ * self.aux_dim..(v_ + 1) * self.aux_dim]);
        }
        for record in self.pending.iter().take_while(|r| r.iteration <= through) {
            for (src_row, v) in record.nodes.iter().enumerate() {
                let Some(rows) = positions.get(v) else { continue };
                for &row in rows {
                    snap.memory[row * self.dim..(row + 1) * self.dim]
                        .copy_from_slice(&record.memory[src_row * self.dim..(src_row + 1) * self.dim]);
                    snap.aux[row * self.aux_dim..(row + 1) * self.aux_dim]
                        .copy_from_slice(&record.aux[src_row * self.aux_dim..(src_row + 1) * self.aux_dim]);
                    snap.meta[row] = NodeMeta { last_update_iter: record.iteration, last_update_ts: record.event_ts[src_row] };
                }
            }
        }
        Ok(snap)
    }

    /// Nodes written within `gamma` seconds before `now` (as currently
    /// applied), with their last write time. Requires
    /// [`MemoryStore::track_activity`].
    pub fn recently_updated(&self, now: f64, gamma: f64) -> impl Iterator<Item = (NodeId, f64)> + '_ {
        self.activity
            .iter()
            .rev()
            .take_while(move |&&(ts, _)| now - ts < gamma)
            .filter(move |&&(ts, v)| self.meta[v as usize].last_update_ts == ts && ts <= now)
            .map(|&(ts, v)| (v, ts))
    }

    /// Dumps the applied state after flushing queued writes.
    pub fn checkpoint(&mut self) -> StoreCheckpoint {
        self.flush();
        StoreCheckpoint {
            num_nodes: self.num_nodes,
            dim: self.dim,
            aux_dim: self.aux_dim,
            committed_through: self.last_committed,
            memory: self.memory.clone(),
            aux: self.aux.clone(),
            last_update_iter: self.meta.iter().map(|m| m.last_update_iter).collect(),
            last_update_ts: self.meta.iter().map(|m| (!m.never_updated()).then_some(m.last_update_ts)).collect(),
        }
    }

    pub fn restore(cp: &StoreCheckpoint) -> Result<Self, StoreError> {
        let mut store = Self::with_aux(cp.num_nodes, cp.dim, cp.aux_dim)?;
        let n = cp.num_nodes;
        for (expected, found) in [
            (n * cp.dim, cp.memory.len()),
            (n * cp.aux_dim, cp.aux.len()),
            (n, cp.last_update_iter.len()),
            (n, cp.last_update_ts.len()),
        ] {
            if expected != found {
                return Err(StoreError::DimensionMismatch { expected, found });
            }
        }
        store.memory.clone_from(&cp.memory);
        store.aux.clone_from(&cp.aux);
        for (m, (&it, ts)) in store.meta.iter_mut().zip(cp.last_update_iter.iter().zip(&cp.last_update_ts)) {
            *m = NodeMeta { last_update_iter: it, last_update_ts: ts.unwrap_or(f64::NEG_INFINITY) };
        }
        store.applied_through = cp.committed_through;
        store.last_committed = cp.committed_through;
        Ok(store)
    }
}

/// Serializable dump of a flushed store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreCheckpoint {
    pub num_nodes: usize,
    pub dim: usize,
    pub aux_dim: usize,
    pub committed_through: u64,
    pub memory: Vec<f64>,
    pub aux: Vec<f64>,
    pub last_update_iter: Vec<u64>,
    /// `None` for nodes never written.
    pub last_update_ts: Vec<Option<f64>>,
}

/// Share of nodes read at each iteration whose memory was written in one of
/// the previous `lag` iterations, averaged over iterations `2..=E`.
///
/// A node read at iteration `i` and last seen at `p < i` is stale exactly when
/// `i - p <= lag`.
pub fn stale_fraction(batch_node_sets: &[Vec<NodeId>], lag: usize) -> f64 {
    ReadGaps::new(batch_node_sets).fraction(lag)
}

/// For every iteration after the first, the sorted gaps back to the previous
/// appearance of each distinct node read (nodes never seen before have none).
struct ReadGaps {
    per_iter: Vec<(usize, Vec<usize>)>,
}

impl ReadGaps {
    fn new(sets: &[Vec<NodeId>]) -> Self {
        let mut last_seen: BTreeMap<NodeId, usize> = BTreeMap::new();
        let mut per_iter = Vec::new();
        for (i, set) in sets.iter().enumerate() {
            let unique: BTreeSet<NodeId> = set.iter().copied().collect();
            if i > 0 && !unique.is_empty() {
                let mut gaps: Vec<usize> = unique.iter().filter_map(|v| last_seen.get(v).map(|&p| i - p)).collect();
                gaps.sort_unstable();
                per_iter.push((unique.len(), gaps));
            }
            for v in unique {
                last_seen.insert(v, i);
            }
        }
        ReadGaps { per_iter }
    }

    fn fraction(&self, lag: usize) -> f64 {
        if self.per_iter.is_empty() {
            return 0.0;
        }
        let sum: f64 = self
            .per_iter
            .iter()
            .map(|(n, gaps)| gaps.partition_point(|&g| g <= lag) as f64 / *n as f64)
            .sum();
        sum / self.per_iter.len() as f64
    }
}

/// Largest lag whose stale fraction stays within `threshold`, clamped to
/// `1..=E-1` (and 1 when there is no history).
pub fn k_max_from_threshold(batch_node_sets: &[Vec<NodeId>], threshold: f64) -> usize {
    let gaps = ReadGaps::new(batch_node_sets);
    let cap = batch_node_sets.len().saturating_sub(1);
    (1..=cap).rev().find(|&k| gaps.fraction(k) <= threshold).unwrap_or(1)
}

/// Mitigation hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MitigationConfig {
    /// Weight kept on the node's own stale memory.
    pub lambda: f64,
    /// Inactivity threshold in seconds; usually the `p`-quantile of update gaps.
    pub gamma: f64,
    pub p: f64,
    /// Maximum number of similar nodes averaged.
    pub n_sim: usize,
}

impl Default for MitigationConfig {
    fn default() -> Self {
        MitigationConfig { lambda: 0.95, gamma: 0.0, p: 0.99, n_sim: 5 }
    }
}

impl MitigationConfig {
    pub fn validate(&self) -> Result<(), StoreError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(StoreError::InvalidMitigation("lambda must lie in [0, 1]"));
        }
        if !(self.gamma >= 0.0) {
            return Err(StoreError::InvalidMitigation("gamma must be non-negative"));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(StoreError::InvalidMitigation("p must lie in (0, 1)"));
        }
        if self.n_sim == 0 {
            return Err(StoreError::InvalidMitigation("n_sim must be at least 1"));
        }
        Ok(())
    }
}

/// Cumulative neighbor-id sets per node, rebuilt from an event prefix.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimilarityIndex {
    sets: Vec<Vec<NodeId>>,
}

impl SimilarityIndex {
    pub fn new(num_nodes: usize) -> Self {
        SimilarityIndex { sets: vec![Vec::new(); num_nodes] }
    }

    pub fn from_events(events: &[Event], num_nodes: usize) -> Self {
        let mut sets: Vec<BTreeSet<NodeId>> = vec![BTreeSet::new(); num_nodes];
        for e in events {
            sets[e.src as usize].insert(e.dst);
            sets[e.dst as usize].insert(e.src);
        }
        SimilarityIndex { sets: sets.into_iter().map(|s| s.into_iter().collect()).collect() }
    }

    pub fn neighbors(&self, v: NodeId) -> &[NodeId] {
        &self.sets[v as usize]
    }

    pub fn jaccard(&self, u: NodeId, v: NodeId) -> f64 {
        jaccard(&self.sets[u as usize], &self.sets[v as usize])
    }
}

/// `|A ∩ B| / |A ∪ B|` of two sorted, deduplicated id lists; 0 when both are
/// empty.
pub fn jaccard(a: &[NodeId], b: &[NodeId]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            core::cmp::Ordering::Less => i += 1,
            core::cmp::Ordering::Greater => j += 1,
            core::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Picks up to `n_sim` nodes most similar to `v` among active candidates.
///
/// A candidate `(u, last_ts_u)` is active when it was written after `v`
/// (`last_ts_u > v_last_ts`) and less than `gamma` seconds before `now`.
/// Candidates sharing no neighbor with `v` are dropped. Ranking is by Jaccard
/// similarity, then smaller time since update, then smaller id.
pub fn similar_active_nodes(
    index: &SimilarityIndex,
    v: NodeId,
    v_last_ts: f64,
    now: f64,
    gamma: f64,
    n_sim: usize,
    candidates: impl IntoIterator<Item = (NodeId, f64)>,
) -> Vec<NodeId> {
    let mut seen = BTreeSet::new();
    let mut ranked: Vec<(f64, f64, NodeId)> = candidates
        .into_iter()
        .filter(|&(u, ts)| u != v && ts > v_last_ts && now - ts < gamma && seen.insert(u))
        .filter_map(|(u, ts)| {
            let j = index.jaccard(u, v);
            (j > 0.0).then_some((j, now - ts, u))
        })
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    ranked.into_iter().take(n_sim).map(|(_, _, u)| u).collect()
}

/// `lambda * stale + (1 - lambda) * mean(omega)`; `stale` unchanged when
/// `omega` is empty.
pub fn mitigate(stale: &[f64], omega: &[&[f64]], lambda: f64) -> Result<Vec<f64>, StoreError> {
    if omega.is_empty() {
        return Ok(stale.to_vec());
    }
    let mut mean = vec![0.0; stale.len()];
    for row in omega {
        if row.len() != stale.len() {
            return Err(StoreError::DimensionMismatch { expected: stale.len(), found: row.len() });
        }
        for (m, x) in mean.iter_mut().zip(row.iter()) {
            *m += x;
        }
    }
    let inv = 1.0 / omega.len() as f64;
    Ok(stale.iter().zip(&mean).map(|(s, m)| lambda * s + (1.0 - lambda) * (m * inv)).collect())
}

/// Frobenius norm of the difference of two equally shaped row-major matrices.
pub fn staleness_error(stale: &[f64], reference: &[f64]) -> Result<f64, StoreError> {
    if stale.len() != reference.len() {
        return Err(StoreError::DimensionMismatch { expected: reference.len(), found: stale.len() });
    }
    let sq: f64 = stale.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(libm::sqrt(sq))
}

/// Frobenius norm of one matrix.
pub fn frobenius(m: &[f64]) -> f64 {
    libm::sqrt(math::sq_norm(m))
}
