//! Stage-time profiling: run iterations one at a time and average each
//! stage's duration after discarding a warmup prefix.

use stalepipe_core::graph::EventStream;
use stalepipe_core::pipeline::{PipelineError, StageProfile};
use stalepipe_core::sim::Trace;
use stalepipe_core::trainer::TrainConfig;

use crate::exec::{execute, mean_stage_times, ExecError, GatePolicy, SleepWorkload};
use crate::workload::{train_pipelined, PipelineOptions, PipelinedError};

/// Iterations discarded before averaging, long enough for subgraph sizes to
/// settle.
pub const DEFAULT_WARMUP: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("warmup ({warmup}) must be smaller than the number of profiled iterations ({iterations})")]
    WarmupTooLong { warmup: usize, iterations: usize },
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Train(#[from] PipelinedError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

fn check(iterations: usize, warmup: usize) -> Result<(), ProfileError> {
    if warmup >= iterations {
        return Err(ProfileError::WarmupTooLong { warmup, iterations });
    }
    Ok(())
}

fn mean_profile(trace: &Trace, warmup: usize) -> Result<StageProfile, ProfileError> {
    let tau = mean_stage_times(trace, warmup).expect("iterations past warmup were traced");
    // A stage that does no work still costs something; keep the profile valid.
    Ok(StageProfile::new(tau.map(|t| t.max(1e-6)))?)
}

/// Profiles a sleep workload with the given stage times.
pub fn profile_sleep(truth: &StageProfile, iterations: usize, warmup: usize) -> Result<StageProfile, ProfileError> {
    check(iterations, warmup)?;
    let run = execute(&SleepWorkload::new(*truth), &GatePolicy::Synchronous, iterations, 1)?;
    mean_profile(&run.trace, warmup)
}

/// Profiles real training stages on `stream`, running as many epochs as
/// needed to cover `iterations`.
pub fn profile_training(stream: &EventStream, cfg: &TrainConfig, iterations: usize, warmup: usize) -> Result<StageProfile, ProfileError> {
    check(iterations, warmup)?;
    let (train_split, _, _) = stream.chronological_split(cfg.split).map_err(|e| PipelinedError::Train(e.into()))?;
    let per_epoch = train_split.len().div_ceil(cfg.batch_size).max(1);
    let cfg = TrainConfig { lag: 0, epochs: iterations.div_ceil(per_epoch), ..cfg.clone() };
    let report = train_pipelined(stream, &cfg, &PipelineOptions { workers: Some(1), ..Default::default() })?;
    let mut records = Vec::new();
    for (e, live) in report.epochs.iter().enumerate() {
        for r in &live.trace.records {
            let iteration = e * per_epoch + r.iteration;
            if iteration <= iterations {
                records.push(stalepipe_core::sim::TraceRecord { iteration, ..*r });
            }
        }
    }
    mean_profile(&Trace { records }, warmup)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_must_leave_iterations() {
        let p = StageProfile::new([1.0; 5]).unwrap();
        assert!(matches!(profile_sleep(&p, 20, 20), Err(ProfileError::WarmupTooLong { .. })));
    }
}
