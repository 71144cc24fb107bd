//! Merge-coefficient optimization.
//!
//! The objective is `sum_i w_i * L_i(base + sum_j alpha_j * member_j)` over
//! validation losses, optionally plus parameter-space penalties. Because the
//! candidate parameters are affine in `alpha`, the exact gradient is
//! `dF/dalpha_j = <grad_theta F, member_j>`.

pub mod cmaes;
pub mod gradient;

use std::fmt::Write as _;
use std::sync::Arc;

pub use cmaes::{cmaes_minimize, optimize_cmaes, CmaConfig};
pub use gradient::{adam_minimize, optimize_gradient, GradConfig};

use crate::error::{MdmError, Result};
use crate::merge::MergeState;
use crate::params::vecops::{axpy, dot};

/// Floor on initial losses in [`adaptive_balance`].
pub const BALANCE_EPS: f64 = 1e-8;

/// A differentiable loss over the full parameter vector.
pub trait TaskObjective: Send + Sync {
    fn task_id(&self) -> &str;
    fn loss(&self, theta: &[f64]) -> Result<f64>;
    fn loss_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// An additive term on the candidate parameters, such as a stability penalty.
pub trait ParamPenalty: Send + Sync {
    fn value(&self, theta: &[f64]) -> Result<f64>;
    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Balancing {
    None,
    /// Scale each weight by the inverse of its task's loss at the starting
    /// coefficients, then keep those scales fixed.
    Adaptive,
}

#[derive(Clone)]
pub struct WeightedTask {
    pub objective: Arc<dyn TaskObjective>,
    pub weight: f64,
}

#[derive(Clone)]
pub struct FitnessSpec {
    pub tasks: Vec<WeightedTask>,
    pub balancing: Balancing,
}

impl FitnessSpec {
    pub fn new(tasks: Vec<WeightedTask>) -> Self {
        Self {
            tasks,
            balancing: Balancing::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(MdmError::invalid("fitness needs at least one task"));
        }
        for t in &self.tasks {
            if !(t.weight > 0.0 && t.weight.is_finite()) {
                return Err(MdmError::invalid(format!(
                    "weight of task `{}` must be positive, got {}",
                    t.objective.task_id(),
                    t.weight
                )));
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.tasks.iter().map(|t| t.weight).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fitness {
    pub total: f64,
    pub per_task: Vec<f64>,
}

/// One optimizer iteration. For CMA-ES `mean` is the generation's mean
/// fitness and `sigma` the step size; for the gradient method `mean` is the
/// current fitness and `sigma` the (clipped) gradient norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub best: f64,
    pub mean: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult {
    pub alphas: Vec<f64>,
    pub best: f64,
    pub history: Vec<IterRecord>,
}

pub fn history_csv(history: &[IterRecord]) -> String {
    let mut out = String::from("iter,best,mean,sigma\n");
    for r in history {
        let _ = writeln!(out, "{},{:?},{:?},{:?}", r.iter, r.best, r.mean, r.sigma);
    }
    out
}

/// `w_i ∝ 1 / max(L_i, eps)`, scaled to sum to the task count.
pub fn adaptive_balance(losses: &[f64]) -> Result<Vec<f64>> {
    if losses.is_empty() || losses.iter().any(|l| !l.is_finite()) {
        return Err(MdmError::invalid("adaptive balancing needs finite losses"));
    }
    let inv: Vec<f64> = losses.iter().map(|l| 1.0 / l.max(BALANCE_EPS)).collect();
    let s: f64 = inv.iter().sum();
    let n = losses.len() as f64;
    Ok(inv.into_iter().map(|v| v * n / s).collect())
}

/// The fitness of a merge state as a function of its coefficient vector.
pub struct MergeObjective<'a> {
    spec: &'a FitnessSpec,
    state: &'a MergeState,
    weights: Vec<f64>,
    penalties: Vec<&'a dyn ParamPenalty>,
}

impl<'a> MergeObjective<'a> {
    pub fn new(spec: &'a FitnessSpec, state: &'a MergeState) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            state,
            weights: spec.weights(),
            penalties: Vec::new(),
        })
    }

    pub fn with_penalty(mut self, p: &'a dyn ParamPenalty) -> Self {
        self.penalties.push(p);
        self
    }

    pub fn dim(&self) -> usize {
        self.state.basis().len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Freezes adaptive weights from the losses at `alphas`; no-op without
    /// adaptive balancing.
    pub fn freeze_weights_at(&mut self, alphas: &[f64]) -> Result<()> {
        if self.spec.balancing == Balancing::Adaptive {
            let f = self.evaluate(alphas)?;
            let b = adaptive_balance(&f.per_task)?;
            self.weights = self.spec.weights().iter().zip(b).map(|(w, b)| w * b).collect();
        }
        Ok(())
    }

    pub fn theta(&self, alphas: &[f64]) -> Result<Vec<f64>> {
        self.state.assemble_alphas(alphas)
    }

    /// Total and per-task losses; non-finite losses are passed through.
    pub fn evaluate(&self, alphas: &[f64]) -> Result<Fitness> {
        let theta = self.theta(alphas)?;
        self.evaluate_theta(&theta)
    }

    pub fn evaluate_theta(&self, theta: &[f64]) -> Result<Fitness> {
        let mut per_task = Vec::with_capacity(self.spec.tasks.len());
        let mut total = 0.0;
        for (t, w) in self.spec.tasks.iter().zip(&self.weights) {
            let l = t.objective.loss(theta)?;
            total += w * l;
            per_task.push(l);
        }
        for p in &self.penalties {
            total += p.value(theta)?;
        }
        Ok(Fitness { total, per_task })
    }

    pub fn value(&self, alphas: &[f64]) -> Result<f64> {
        Ok(self.evaluate(alphas)?.total)
    }

    /// Fitness and its exact gradient with respect to `alphas`.
    pub fn value_and_grad(&self, alphas: &[f64]) -> Result<(Fitness, Vec<f64>)> {
        let theta = self.theta(alphas)?;
        let mut g_theta = vec![0.0; theta.len()];
        let mut per_task = Vec::with_capacity(self.spec.tasks.len());
        let mut total = 0.0;
        for (t, w) in self.spec.tasks.iter().zip(&self.weights) {
            let (l, g) = t.objective.loss_and_grad(&theta)?;
            crate::error::check_len(g.len(), theta.len())?;
            total += w * l;
            per_task.push(l);
            axpy(&mut g_theta, &g, *w);
        }
        for p in &self.penalties {
            let (v, g) = p.value_and_grad(&theta)?;
            crate::error::check_len(g.len(), theta.len())?;
            total += v;
            axpy(&mut g_theta, &g, 1.0);
        }
        let grad = self
            .state
            .basis()
            .members()
            .iter()
            .map(|m| dot(&g_theta, m.values()))
            .collect();
        Ok((Fitness { total, per_task }, grad))
    }
}

/// Weighted validation fitness of `alphas` (member order). A task whose loss
/// is not finite aborts the evaluation naming that task.
pub fn evaluate_fitness(alphas: &[f64], spec: &FitnessSpec, state: &MergeState) -> Result<Fitness> {
    let obj = MergeObjective::new(spec, state)?;
    let f = obj.evaluate(alphas)?;
    if let Some(i) = f.per_task.iter().position(|l| !l.is_finite()) {
        return Err(MdmError::TaskEvaluation {
            task: spec.tasks[i].objective.task_id().to_string(),
            reason: format!("loss is {}", f.per_task[i]),
        });
    }
    Ok(f)
}
