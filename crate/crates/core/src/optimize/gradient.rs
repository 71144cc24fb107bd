//! Full-batch Adam on the merge coefficients with global-norm clipping and
//! patience-based early stopping.

use super::{FitnessSpec, IterRecord, MergeObjective, OptimizeResult};
use crate::error::{MdmError, Result};
use crate::merge::MergeState;

#[derive(Debug, Clone, PartialEq)]
pub struct GradConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients whose Euclidean norm exceeds this are rescaled to it.
    pub clip_norm: f64,
    /// Stop after this many epochs without a new best fitness.
    pub patience: usize,
    pub max_epochs: usize,
    /// Multiply the step size by `lr_decay` after `decay_patience` epochs
    /// without improvement. `lr_decay = 1` keeps it constant.
    pub lr_decay: f64,
    pub decay_patience: usize,
}

impl Default for GradConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            patience: 100,
            max_epochs: 1000,
            lr_decay: 0.5,
            decay_patience: 20,
        }
    }
}

impl GradConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted so that a run can be used as a dry evaluation
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(MdmError::invalid("lr must be finite and non-negative"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(MdmError::invalid("clip_norm must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(MdmError::invalid("beta1 and beta2 must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(MdmError::invalid("eps must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(MdmError::invalid("lr_decay must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Minimizes `f`, which returns the value and gradient, from `x0`. Returns
/// the best iterate seen. A non-finite value or gradient aborts.
pub fn adam_minimize<F>(mut f: F, x0: &[f64], cfg: &GradConfig) -> Result<OptimizeResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    cfg.validate()?;
    let n = x0.len();
    if n == 0 {
        return Err(MdmError::invalid("nothing to optimize"));
    }
    let mut x = x0.to_vec();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut best_x = x.clone();
    let mut best_f = f64::INFINITY;
    let mut stale = 0usize;
    let mut lr = cfg.lr;
    let mut history = Vec::new();
    for epoch in 0..cfg.max_epochs {
        let (fx, mut g) = f(&x)?;
        crate::error::check_len(g.len(), n)?;
        if !fx.is_finite() {
            return Err(MdmError::Numerical(format!("fitness is {fx} at epoch {epoch}, alphas {x:?}")));
        }
        if let Some(j) = g.iter().position(|gj| !gj.is_finite()) {
            return Err(MdmError::Numerical(format!(
                "gradient component {j} is {} at epoch {epoch}, alphas {x:?}",
                g[j]
            )));
        }
        if fx < best_f {
            best_f = fx;
            best_x.copy_from_slice(&x);
            stale = 0;
        } else {
            stale += 1;
        }
        let norm = g.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > cfg.clip_norm {
            let s = cfg.clip_norm / norm;
            g.iter_mut().for_each(|a| *a *= s);
        }
        history.push(IterRecord {
            iter: epoch,
            best: best_f,
            mean: fx,
            sigma: norm.min(cfg.clip_norm),
        });
        if stale >= cfg.patience && cfg.patience > 0 {
            break;
        }
        if stale > 0 && cfg.decay_patience > 0 && stale % cfg.decay_patience == 0 {
            lr *= cfg.lr_decay;
        }
        let t = epoch as i32 + 1;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for j in 0..n {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            x[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
        }
    }
    if history.is_empty() {
        best_x = x;
    }
    Ok(OptimizeResult {
        alphas: best_x,
        best: best_f,
        history,
    })
}

/// Adam over the merge coefficients of `state`, starting from all ones.
pub fn optimize_gradient(spec: &FitnessSpec, state: &MergeState, cfg: &GradConfig) -> Result<OptimizeResult> {
    let mut obj = MergeObjective::new(spec, state)?;
    optimize_gradient_with(&mut obj, cfg)
}

pub fn optimize_gradient_with(obj: &mut MergeObjective<'_>, cfg: &GradConfig) -> Result<OptimizeResult> {
    let n = obj.dim();
    if n == 0 {
        return Err(MdmError::invalid("the basis is empty"));
    }
    let x0 = vec![1.0; n];
    obj.freeze_weights_at(&x0)?;
    let obj = &*obj;
    adam_minimize(|a| obj.value_and_grad(a).map(|(f, g)| (f.total, g)), &x0, cfg)
}
