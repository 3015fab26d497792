//! Memory-based TGNN training driven by the live executor.
//!
//! Each epoch is one executor run over that epoch's batches. The stages
//! share the neighbor buffer, memory store and parameters behind mutexes;
//! since every resource serves iterations in order and the store applies
//! writes only through each read's target, the result matches the
//! straight-line trainer at the same lag.

use std::sync::Mutex;

use stalepipe_core::graph::{Batch, EventStream, NeighborBuffer};
use stalepipe_core::memory::{MemoryStore, SimilarityIndex};
use stalepipe_core::model::ModelParams;
use stalepipe_core::pipeline::{Stage, StalenessPlan};
use stalepipe_core::trainer::{
    evaluate, feature_stage, memory_stage, metrics_of, sample_stage, train_stage, update_stage, EpochState, Fetched,
    IterationMetrics, RunReport, Sampled, Setup, TrainConfig, TrainError, Trained,
};

use crate::exec::{execute, ExecError, GatePolicy, LiveRun, StageError, Workload};

#[derive(Debug, thiserror::Error)]
pub enum PipelinedError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("plan bound {k} at iteration {iteration} exceeds the trainer's bound {bound}")]
    PlanTooLoose { iteration: usize, k: usize, bound: u64 },
}

#[derive(Default)]
pub struct TrainSlot {
    sampled: Option<Sampled>,
    edge: Vec<f64>,
    fetched: Option<Fetched>,
    trained: Option<Trained>,
}

struct EpochWorkload<'a> {
    setup: &'a Setup,
    batches: &'a [Batch<'a>],
    epoch: usize,
    step_offset: u64,
    buffer: Mutex<NeighborBuffer>,
    store: Mutex<MemoryStore>,
    index: Option<SimilarityIndex>,
    params: Mutex<ModelParams>,
    metrics: Mutex<Vec<Option<IterationMetrics>>>,
    trajectory: Option<Mutex<Vec<Vec<f64>>>>,
}

fn take<T>(v: &mut Option<T>, what: &str) -> Result<T, StageError> {
    v.take().ok_or_else(|| format!("missing {what} output").into())
}

impl Workload for EpochWorkload<'_> {
    type Slot = TrainSlot;

    fn run_stage(&self, stage: Stage, iteration: usize, slot: &mut TrainSlot) -> Result<(), StageError> {
        let batch = &self.batches[iteration - 1];
        match stage {
            Stage::Sample => {
                let mut buffer = self.buffer.lock().map_err(|_| "neighbor buffer poisoned")?;
                slot.sampled = Some(sample_stage(self.setup, &mut buffer, batch));
            }
            Stage::FetchFeature => slot.edge = feature_stage(batch),
            Stage::FetchMemory => {
                let sampled = slot.sampled.as_ref().ok_or("missing sample output")?;
                let mut store = self.store.lock().map_err(|_| "memory store poisoned")?;
                slot.fetched = Some(memory_stage(self.setup, &mut store, self.index.as_ref(), sampled)?);
            }
            Stage::Train => {
                let sampled = slot.sampled.as_ref().ok_or("missing sample output")?;
                let fetched = slot.fetched.as_ref().ok_or("missing memory output")?;
                let mut params = self.params.lock().map_err(|_| "parameters poisoned")?;
                let step = self.step_offset + iteration as u64;
                slot.trained = Some(train_stage(self.setup, &mut params, step, batch, sampled, &slot.edge, fetched)?);
                if let Some(t) = &self.trajectory {
                    t.lock().map_err(|_| "trajectory poisoned")?.push(params.data.clone());
                }
            }
            Stage::UpdateMemory => {
                let sampled = take(&mut slot.sampled, "sample")?;
                let fetched = take(&mut slot.fetched, "memory")?;
                let trained = take(&mut slot.trained, "train")?;
                let err = {
                    let mut store = self.store.lock().map_err(|_| "memory store poisoned")?;
                    update_stage(&mut store, &sampled, &fetched, &trained.commit)?
                };
                let m = metrics_of(self.epoch, self.step_offset + iteration as u64, &sampled, &fetched, &trained, err);
                self.metrics.lock().map_err(|_| "metrics poisoned")?[iteration - 1] = Some(m);
            }
        }
        Ok(())
    }
}

/// How to run the pipelined trainer.
#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    /// Gate for every epoch; by default a constant plan at the config's bound.
    pub plan: Option<StalenessPlan>,
    /// Maximum iterations in flight; by default one more than the bound.
    pub workers: Option<usize>,
    /// Keep a copy of the parameters after every optimizer step.
    pub record_params: bool,
}

#[derive(Debug, Clone)]
pub struct PipelinedReport {
    pub report: RunReport,
    /// Parameters after each step, if requested.
    pub trajectory: Vec<Vec<f64>>,
    /// One executor run per epoch.
    pub epochs: Vec<LiveRun>,
    /// Final memory store, after validation.
    pub store: MemoryStore,
}

/// Trains like [`stalepipe_core::trainer::train`] but runs each epoch's
/// stages on the live executor.
pub fn train_pipelined(stream: &EventStream, cfg: &TrainConfig, opts: &PipelineOptions) -> Result<PipelinedReport, PipelinedError> {
    let (train_split, val_split, _) = stream.chronological_split(cfg.split).map_err(TrainError::from)?;
    let setup = Setup::new(cfg, stream.num_nodes(), stream.edge_feat_dim(), train_split.events())?;
    let bound = cfg.bound();
    let mut params = setup.init_params();
    let mut iterations = Vec::new();
    let mut trajectory = Vec::new();
    let mut epochs = Vec::new();
    let mut state = EpochState::new(&setup, &[])?;
    let mut step_offset = 0;
    for epoch in 1..=cfg.epochs {
        let history = if epoch == 1 { &[][..] } else { train_split.events() };
        state = EpochState::new(&setup, history)?;
        let batches = train_split.batches(cfg.batch_size, &setup.negatives(epoch)?).map_err(TrainError::from)?;
        let n = batches.len();
        let plan = match &opts.plan {
            Some(p) => p.clone(),
            None => StalenessPlan::constant(bound as usize, n, bound as usize + 1),
        };
        for i in 1..=n.min(plan.iterations()) {
            if plan.k_at(i) as u64 > bound {
                return Err(PipelinedError::PlanTooLoose { iteration: i, k: plan.k_at(i), bound });
            }
        }
        let work = EpochWorkload {
            setup: &setup,
            batches: &batches,
            epoch,
            step_offset,
            buffer: Mutex::new(state.buffer),
            store: Mutex::new(state.store),
            index: state.index,
            params: Mutex::new(params),
            metrics: Mutex::new(vec![None; n]),
            trajectory: opts.record_params.then(|| Mutex::new(Vec::with_capacity(n))),
        };
        let workers = opts.workers.unwrap_or(bound as usize + 1);
        let live = execute(&work, &GatePolicy::Plan(plan), n, workers)?;
        let EpochWorkload { buffer, store, index, params: p, metrics, trajectory: t, .. } = work;
        state = EpochState { store: into_inner(store), buffer: into_inner(buffer), index };
        params = into_inner(p);
        iterations.extend(into_inner(metrics).into_iter().map(|m| m.expect("every iteration commits")));
        if let Some(t) = t {
            trajectory.extend(into_inner(t));
        }
        epochs.push(live);
        step_offset += n as u64;
    }
    let val_ap = if val_split.is_empty() { 0.0 } else { evaluate(&setup, &mut state, &params, &val_split)? };
    Ok(PipelinedReport { report: RunReport { params, iterations, val_ap }, trajectory, epochs, store: state.store })
}

fn into_inner<T>(m: Mutex<T>) -> T {
    m.into_inner().unwrap_or_else(|e| e.into_inner())
}
