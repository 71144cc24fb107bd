//! Task losses of the benchmark network as optimizer objectives.

use std::sync::Arc;

use super::data::{Split, TaskBundle};
use super::mlp::{LossKind, Mlp};
use crate::error::Result;
use crate::optimize::TaskObjective;

/// Mean loss of one task's split on the network's task head.
#[derive(Debug, Clone)]
pub struct MlpTaskObjective {
    pub mlp: Arc<Mlp>,
    pub task: Arc<TaskBundle>,
    pub split: Split,
    pub kind: LossKind,
}

impl MlpTaskObjective {
    pub fn validation(mlp: Arc<Mlp>, task: Arc<TaskBundle>, kind: LossKind) -> Self {
        Self {
            mlp,
            task,
            split: Split::Val,
            kind,
        }
    }

    fn run(&self, theta: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
        self.mlp.check_params(theta)?;
        let ds = self.task.split(self.split);
        Ok(self.mlp.batch_loss(
            theta,
            &ds.inputs,
            &ds.labels,
            0..ds.len(),
            self.task.head(),
            self.kind,
            grad,
        ))
    }
}

impl TaskObjective for MlpTaskObjective {
    fn task_id(&self) -> &str {
        &self.task.task_id
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        self.run(theta, None)
    }

    fn loss_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut g = vec![0.0; theta.len()];
        let l = self.run(theta, Some(&mut g))?;
        Ok((l, g))
    }
}
