//! Stability terms for the merge objective: an EWC penalty anchored at the
//! base model and a synthetic-replay KL term.

pub mod fisher;
pub mod replay;

pub use fisher::{estimate_fisher_diag, ewc_gradient, ewc_penalty, fisher_over, EwcPenalty, FisherDiag, DEFAULT_LAMBDA};
pub use replay::{generate_replay, replay_kl, ReplayPenalty, ReplaySet, DEFAULT_REPLAY_COUNT, DEFAULT_REPLAY_SIGMA};

use crate::error::{MdmError, Result};
use crate::merge::MergeState;
use crate::optimize::{FitnessSpec, MergeObjective, ParamPenalty};

/// Task fitness plus the EWC and replay terms at the candidate parameters.
pub fn stabilized_fitness(
    alphas: &[f64],
    spec: &FitnessSpec,
    state: &MergeState,
    ewc: Option<&EwcPenalty>,
    replay: Option<&ReplayPenalty>,
) -> Result<f64> {
    let mut obj = MergeObjective::new(spec, state)?;
    if let Some(p) = ewc {
        obj = obj.with_penalty(p as &dyn ParamPenalty);
    }
    if let Some(p) = replay {
        obj = obj.with_penalty(p as &dyn ParamPenalty);
    }
    let f = obj.evaluate(alphas)?;
    if let Some(i) = f.per_task.iter().position(|l| !l.is_finite()) {
        return Err(MdmError::TaskEvaluation {
            task: spec.tasks[i].objective.task_id().to_string(),
            reason: format!("loss is {}", f.per_task[i]),
        });
    }
    Ok(f.total)
}
