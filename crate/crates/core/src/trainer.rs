//! The five training stages as free functions over explicit state, and a
//! straight-line trainer built from them.
//!
//! A pipelined executor calls the same functions from different threads; as
//! long as it runs each stage in iteration order and only lets the memory
//! fetch of iteration `i` proceed once iteration `i - bound` has committed,
//! it reproduces the straight-line results.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::graph::{delta_t_quantile, update_gaps, Batch, Event, EventStream, GraphError, NegativeSampler, NeighborBuffer, NodeId, Subgraph};
use crate::memory::{self, MemoryStore, MitigationConfig, NodeMeta, SimilarityIndex, StoreError};
use crate::model::{self, Dims, LrSchedule, ModelError, ModelParams, StepInput, TimeEncoder};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid config: {0}")]
    Config(&'static str),
}

/// Similarity-based mitigation settings. `gamma` defaults to the
/// `p`-quantile of per-node update gaps in the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MitigationSettings {
    pub lambda: f64,
    pub p: f64,
    pub n_sim: usize,
    pub gamma: Option<f64>,
}

impl Default for MitigationSettings {
    fn default() -> Self {
        let d = MitigationConfig::default();
        MitigationSettings { lambda: d.lambda, p: d.p, n_sim: d.n_sim, gamma: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub mem_dim: usize,
    pub emb_dim: usize,
    pub time_dim: usize,
    pub dec_hidden: usize,
    /// Iterations a memory read may miss; 0 is synchronous.
    pub lag: usize,
    pub mitigation: Option<MitigationSettings>,
    pub fan_out: usize,
    pub epochs: usize,
    pub seed: u64,
    pub split: (f64, f64, f64),
    pub exclude_negative_endpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: LrSchedule::Constant { lr: 1e-4 },
            batch_size: 600,
            mem_dim: 16,
            emb_dim: 16,
            time_dim: 8,
            dec_hidden: 16,
            lag: 0,
            mitigation: None,
            fan_out: 10,
            epochs: 1,
            seed: 0,
            split: (0.7, 0.15, 0.15),
            exclude_negative_endpoints: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let lr_ok = match self.schedule {
            LrSchedule::Constant { lr } => lr > 0.0 && lr.is_finite(),
            LrSchedule::InverseSqrt { smoothness } => smoothness > 0.0 && smoothness.is_finite(),
        };
        if !lr_ok {
            return Err(TrainError::Config("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config("batch size and epochs must be at least 1"));
        }
        if self.mem_dim == 0 || self.emb_dim == 0 || self.time_dim == 0 || self.dec_hidden == 0 {
            return Err(TrainError::Config("layer widths must be at least 1"));
        }
        if let Some(m) = self.mitigation {
            MitigationConfig { lambda: m.lambda, gamma: m.gamma.unwrap_or(0.0), p: m.p, n_sim: m.n_sim }.validate()?;
        }
        Ok(())
    }

    /// Scheduler bound: a read at iteration `i` sees commits through `i - bound`.
    pub fn bound(&self) -> u64 {
        self.lag as u64 + 1
    }
}

/// Immutable per-run context shared by all stages.
#[derive(Debug, Clone)]
pub struct Setup {
    pub cfg: TrainConfig,
    pub dims: Dims,
    pub te: TimeEncoder,
    pub num_nodes: usize,
    pub mitigation: Option<MitigationConfig>,
}

impl Setup {
    /// Resolves dimensions and the mitigation threshold from the training
    /// events.
    pub fn new(cfg: &TrainConfig, num_nodes: usize, edge_dim: usize, train_events: &[Event]) -> Result<Self, TrainError> {
        cfg.validate()?;
        let dims = Dims { mem: cfg.mem_dim, emb: cfg.emb_dim, time: cfg.time_dim, edge: edge_dim, dec_hidden: cfg.dec_hidden };
        let mitigation = match cfg.mitigation {
            None => None,
            Some(m) => {
                let gamma = match m.gamma {
                    Some(g) => g,
                    None => delta_t_quantile(&update_gaps(train_events, num_nodes), m.p)?,
                };
                let c = MitigationConfig { lambda: m.lambda, gamma, p: m.p, n_sim: m.n_sim };
                c.validate()?;
                Some(c)
            }
        };
        Ok(Setup { cfg: cfg.clone(), dims, te: TimeEncoder::new(cfg.time_dim), num_nodes, mitigation })
    }

    /// Empty store with mailbox rows, tracking recent writes if mitigation is on.
    pub fn new_store(&self) -> Result<MemoryStore, TrainError> {
        let mut store = MemoryStore::with_aux(self.num_nodes, self.dims.mem, self.dims.mail())?;
        if let Some(m) = self.mitigation {
            store.track_activity(m.gamma);
        }
        Ok(store)
    }

    pub fn new_buffer(&self) -> NeighborBuffer {
        NeighborBuffer::new(self.num_nodes, self.cfg.fan_out)
    }

    pub fn init_params(&self) -> ModelParams {
        ModelParams::init(self.dims, self.cfg.seed ^ 0x005e_ed0f_9a7a)
    }

    /// Negative sampler for a training epoch (1-based) or, with `epoch = 0`,
    /// for evaluation.
    pub fn negatives(&self, epoch: usize) -> Result<NegativeSampler, TrainError> {
        let mut s = NegativeSampler::new(self.num_nodes, self.cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(epoch as u64))?;
        s.exclude_endpoints = self.cfg.exclude_negative_endpoints;
        Ok(s)
    }
}

/// Output of the sampling stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub iteration: u64,
    /// Distinct target nodes in first-seen order over sources, destinations
    /// and negatives.
    pub targets: Vec<NodeId>,
    pub occ_target: Vec<usize>,
    pub subgraph: Subgraph,
    /// Time of the batch's first event.
    pub now: f64,
}

/// Stage 1: samples the most recent neighbors of every source, destination
/// and negative, then adds the batch's events to the buffer.
pub fn sample_stage(setup: &Setup, buffer: &mut NeighborBuffer, batch: &Batch<'_>) -> Sampled {
    let ev = batch.events;
    let roots: Vec<(NodeId, f64)> = ev
        .iter()
        .map(|e| (e.src, e.ts))
        .chain(ev.iter().map(|e| (e.dst, e.ts)))
        .chain(ev.iter().zip(&batch.neg_dst).map(|(e, &n)| (n, e.ts)))
        .collect();
    let mut index: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut targets = Vec::new();
    let occ_target = roots
        .iter()
        .map(|&(v, _)| {
            *index.entry(v).or_insert_with(|| {
                targets.push(v);
                targets.len() - 1
            })
        })
        .collect();
    let subgraph = buffer.sample_recent(&roots, setup.cfg.fan_out);
    for (k, e) in ev.iter().enumerate() {
        buffer.insert_event(e, batch.start + k);
    }
    Sampled { iteration: batch.iteration as u64, targets, occ_target, subgraph, now: ev.first().map_or(0.0, |e| e.ts) }
}

/// Stage 2: edge features of the batch's events, widened to `f64`.
pub fn feature_stage(batch: &Batch<'_>) -> Vec<f64> {
    batch.events.iter().flat_map(|e| e.edge_feat.iter().map(|&x| x as f64)).collect()
}

/// Output of the memory-fetch stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Fetched {
    pub input: StepInput,
    /// Target memory as read, before mitigation.
    pub stale_mem: Vec<f64>,
    pub meta: Vec<NodeMeta>,
    /// Number of targets whose memory was mitigated.
    pub mitigated: usize,
}

/// Stage 3: reads targets and neighbors at the configured staleness and
/// applies mitigation to inactive targets.
pub fn memory_stage(
    setup: &Setup,
    store: &mut MemoryStore,
    index: Option<&SimilarityIndex>,
    sampled: &Sampled,
) -> Result<Fetched, TrainError> {
    let d = setup.dims;
    let mut nodes = sampled.targets.clone();
    let mut row_of: BTreeMap<NodeId, usize> = nodes.iter().enumerate().map(|(r, &v)| (v, r)).collect();
    for n in sampled.subgraph.all_neighbors() {
        row_of.entry(n.node).or_insert_with(|| {
            nodes.push(n.node);
            nodes.len() - 1
        });
    }
    let snap = store.read_snapshot(&nodes, sampled.iteration, setup.cfg.bound())?;
    let nt = sampled.targets.len();
    let stale_mem = snap.memory_matrix()[..nt * d.mem].to_vec();
    let mut target_mem = stale_mem.clone();
    let target_mail: Vec<f64> = (0..nt).flat_map(|r| snap.aux(r).iter().copied()).collect();
    let meta = snap.meta[..nt].to_vec();

    let mut mitigated = 0;
    if let (Some(cfg), Some(index)) = (setup.mitigation, index) {
        let now = sampled.now;
        for (t, &v) in sampled.targets.iter().enumerate() {
            let dt = meta[t].delta_t(now).unwrap_or(f64::INFINITY);
            if !(dt > cfg.gamma) {
                continue;
            }
            let omega = memory::similar_active_nodes(
                index,
                v,
                meta[t].last_update_ts,
                now,
                cfg.gamma,
                cfg.n_sim,
                store.recently_updated(now, cfg.gamma),
            );
            if omega.is_empty() {
                continue;
            }
            let rows = store.view(&omega, snap.through)?;
            let omega_rows: Vec<&[f64]> = (0..rows.len()).map(|r| rows.memory(r)).collect();
            let row = &mut target_mem[t * d.mem..(t + 1) * d.mem];
            let mixed = memory::mitigate(row, &omega_rows, cfg.lambda)?;
            row.copy_from_slice(&mixed);
            mitigated += 1;
        }
    }

    let mut neigh_offsets = Vec::with_capacity(sampled.occ_target.len() + 1);
    let mut neigh_mem = Vec::new();
    let mut neigh_dt = Vec::new();
    neigh_offsets.push(0);
    for o in 0..sampled.occ_target.len() {
        for n in sampled.subgraph.neighbors_of(o) {
            neigh_mem.extend_from_slice(snap.memory(row_of[&n.node]));
            neigh_dt.push(n.delta_t);
        }
        neigh_offsets.push(neigh_dt.len());
    }
    let input = StepInput {
        iteration: sampled.iteration,
        batch: sampled.occ_target.len() / 3,
        target_mem,
        target_mail,
        occ_target: sampled.occ_target.clone(),
        neigh_offsets,
        neigh_mem,
        neigh_dt,
    };
    Ok(Fetched { input, stale_mem, meta, mitigated })
}

/// Memory writes produced by one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Commit {
    pub iteration: u64,
    pub nodes: Vec<NodeId>,
    pub memory: Vec<f64>,
    pub mail: Vec<f64>,
    pub event_ts: Vec<f64>,
}

/// Output of the training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub loss: f64,
    pub grad_norm: f64,
    pub pos_prob: Vec<f64>,
    pub neg_prob: Vec<f64>,
    pub commit: Commit,
}

/// Refreshed memories and new mailboxes of the positive endpoints, one row
/// per node, taken from its last event in the batch.
fn build_commit(setup: &Setup, batch: &Batch<'_>, sampled: &Sampled, fetched: &Fetched, new_mem: &[f64], edge: &[f64]) -> Commit {
    let d = setup.dims;
    let b = batch.len();
    let mut last: BTreeMap<NodeId, (usize, usize, usize)> = BTreeMap::new();
    let mut order = Vec::new();
    for (j, e) in batch.events.iter().enumerate() {
        let (ts, td) = (sampled.occ_target[j], sampled.occ_target[b + j]);
        for (v, me, partner) in [(e.src, ts, td), (e.dst, td, ts)] {
            if last.insert(v, (j, me, partner)).is_none() {
                order.push(v);
            }
        }
    }
    let mut commit = Commit {
        iteration: sampled.iteration,
        nodes: Vec::with_capacity(order.len()),
        memory: Vec::with_capacity(order.len() * d.mem),
        mail: Vec::with_capacity(order.len() * d.mail()),
        event_ts: Vec::with_capacity(order.len()),
    };
    for v in order {
        let (j, me, partner) = last[&v];
        let ts = batch.events[j].ts;
        let prev_ts = fetched.meta[me].last_update_ts;
        let gap = if prev_ts.is_finite() { (ts - prev_ts).max(0.0) } else { 0.0 };
        commit.nodes.push(v);
        commit.memory.extend_from_slice(&new_mem[me * d.mem..(me + 1) * d.mem]);
        commit.mail.extend_from_slice(&new_mem[partner * d.mem..(partner + 1) * d.mem]);
        commit.mail.extend_from_slice(&edge[j * d.edge..(j + 1) * d.edge]);
        commit.mail.extend_from_slice(&[gap, 1.0]);
        commit.event_ts.push(ts);
    }
    commit
}

/// Stage 4: forward, backward and one optimizer step at global step `step`.
pub fn train_stage(
    setup: &Setup,
    params: &mut ModelParams,
    step: u64,
    batch: &Batch<'_>,
    sampled: &Sampled,
    edge: &[f64],
    fetched: &Fetched,
) -> Result<Trained, TrainError> {
    let out = model::forward(params, &setup.te, &fetched.input, true)?;
    let grad = out.grad.expect("backward requested");
    let grad_norm = grad.norm();
    model::sgd_step(params, &grad, setup.cfg.schedule.at(step));
    let commit = build_commit(setup, batch, sampled, fetched, &out.new_mem, edge);
    Ok(Trained { loss: out.loss, grad_norm, pos_prob: out.pos_prob, neg_prob: out.neg_prob, commit })
}

/// Staleness error of one iteration's target memories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StalenessError {
    /// `||s_read - s_fresh||_F` over the batch's targets.
    pub err: f64,
    /// Same with mitigated reads.
    pub err_mitigated: f64,
}

/// Stage 5: measures the staleness error against the fresh state (all
/// commits through the previous iteration), then commits.
pub fn update_stage(store: &mut MemoryStore, sampled: &Sampled, fetched: &Fetched, commit: &Commit) -> Result<StalenessError, TrainError> {
    let fresh = store.view(&sampled.targets, sampled.iteration - 1)?;
    let err = memory::staleness_error(&fetched.stale_mem, fresh.memory_matrix())?;
    let err_mitigated = memory::staleness_error(&fetched.input.target_mem, fresh.memory_matrix())?;
    store.commit_update(commit.iteration, &commit.nodes, &commit.memory, &commit.mail, &commit.event_ts)?;
    Ok(StalenessError { err, err_mitigated })
}

/// Per-iteration training record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub epoch: usize,
    pub iteration: u64,
    /// Optimizer step across epochs, from 1.
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub stale_err: f64,
    pub stale_err_mitigated: f64,
    pub mitigated: usize,
    /// AP of this batch's training predictions.
    pub ap: f64,
}

/// Outcome of a full run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub params: ModelParams,
    pub iterations: Vec<IterationMetrics>,
    pub val_ap: f64,
}

impl RunReport {
    pub fn mean_stale_err(&self) -> (f64, f64) {
        let n = self.iterations.len().max(1) as f64;
        let a = self.iterations.iter().map(|m| m.stale_err).sum::<f64>() / n;
        let b = self.iterations.iter().map(|m| m.stale_err_mitigated).sum::<f64>() / n;
        (a, b)
    }
}

/// Mutable state of one epoch.
#[derive(Debug, Clone)]
pub struct EpochState {
    pub store: MemoryStore,
    pub buffer: NeighborBuffer,
    pub index: Option<SimilarityIndex>,
}

impl EpochState {
    /// Fresh memory and neighbor buffer. With mitigation on, the similarity
    /// index holds the neighbor sets of `history`, the events seen in
    /// earlier epochs.
    pub fn new(setup: &Setup, history: &[Event]) -> Result<Self, TrainError> {
        Ok(EpochState {
            store: setup.new_store()?,
            buffer: setup.new_buffer(),
            index: setup.mitigation.map(|_| SimilarityIndex::from_events(history, setup.num_nodes)),
        })
    }
}

/// Runs all five stages of one iteration in order.
pub fn run_iteration(
    setup: &Setup,
    state: &mut EpochState,
    params: &mut ModelParams,
    epoch: usize,
    step: u64,
    batch: &Batch<'_>,
) -> Result<IterationMetrics, TrainError> {
    let sampled = sample_stage(setup, &mut state.buffer, batch);
    let edge = feature_stage(batch);
    let fetched = memory_stage(setup, &mut state.store, state.index.as_ref(), &sampled)?;
    let trained = train_stage(setup, params, step, batch, &sampled, &edge, &fetched)?;
    let err = update_stage(&mut state.store, &sampled, &fetched, &trained.commit)?;
    Ok(metrics_of(epoch, step, &sampled, &fetched, &trained, err))
}

pub fn metrics_of(epoch: usize, step: u64, sampled: &Sampled, fetched: &Fetched, trained: &Trained, err: StalenessError) -> IterationMetrics {
    IterationMetrics {
        epoch,
        iteration: sampled.iteration,
        step,
        loss: trained.loss,
        grad_norm: trained.grad_norm,
        stale_err: err.err,
        stale_err_mitigated: err.err_mitigated,
        mitigated: fetched.mitigated,
        ap: model::average_precision(&trained.pos_prob, &trained.neg_prob).unwrap_or(0.0),
    }
}

/// Replays `events` synchronously without gradients, continuing from the
/// given state, and returns the AP over all scored pairs.
pub fn evaluate(setup: &Setup, state: &mut EpochState, params: &ModelParams, events: &EventStream) -> Result<f64, TrainError> {
    if events.is_empty() {
        return Err(GraphError::EmptyStream.into());
    }
    state.store.flush();
    let offset = state.store.committed_through();
    let eval_setup = Setup { cfg: TrainConfig { lag: 0, ..setup.cfg.clone() }, mitigation: None, ..setup.clone() };
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for mut batch in events.batches(setup.cfg.batch_size, &setup.negatives(0)?)? {
        batch.iteration += offset as usize;
        let sampled = sample_stage(&eval_setup, &mut state.buffer, &batch);
        let edge = feature_stage(&batch);
        let fetched = memory_stage(&eval_setup, &mut state.store, None, &sampled)?;
        let out = model::forward(params, &setup.te, &fetched.input, false)?;
        let commit = build_commit(&eval_setup, &batch, &sampled, &fetched, &out.new_mem, &edge);
        state.store.commit_update(commit.iteration, &commit.nodes, &commit.memory, &commit.mail, &commit.event_ts)?;
        pos.extend(out.pos_prob);
        neg.extend(out.neg_prob);
    }
    Ok(model::average_precision(&pos, &neg).unwrap_or(0.0))
}

/// Trains on the training split for the configured epochs, then evaluates on
/// the validation split. `observe` sees every iteration's metrics.
pub fn train(stream: &EventStream, cfg: &TrainConfig, observe: impl FnMut(&IterationMetrics)) -> Result<RunReport, TrainError> {
    train_with_state(stream, cfg, observe).map(|(report, _)| report)
}

/// [`train`], also returning the final epoch state (after validation).
pub fn train_with_state(
    stream: &EventStream,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&IterationMetrics),
) -> Result<(RunReport, EpochState), TrainError> {
    let (train_split, val_split, _) = stream.chronological_split(cfg.split)?;
    let setup = Setup::new(cfg, stream.num_nodes(), stream.edge_feat_dim(), train_split.events())?;
    let mut params = setup.init_params();
    let mut iterations = Vec::new();
    let mut step = 0;
    let mut state = EpochState::new(&setup, &[])?;
    for epoch in 1..=cfg.epochs {
        let history = if epoch == 1 { &[][..] } else { train_split.events() };
        state = EpochState::new(&setup, history)?;
        for batch in train_split.batches(cfg.batch_size, &setup.negatives(epoch)?)? {
            step += 1;
            let m = run_iteration(&setup, &mut state, &mut params, epoch, step, &batch)?;
            observe(&m);
            iterations.push(m);
        }
    }
    let val_ap = if val_split.is_empty() { 0.0 } else { evaluate(&setup, &mut state, &params, &val_split)? };
    Ok((RunReport { params, iterations, val_ap }, state))
}
