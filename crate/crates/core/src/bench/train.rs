//! AdamW training and evaluation of the benchmark MLP.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::{Split, TaskBundle};
use super::mlp::{head_loss, LossKind, Mlp};
use crate::error::{MdmError, Result};
use crate::params::ParameterVector;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-2,
            batch_size: 32,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Full training-set loss before training and after each epoch.
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(mlp: &Mlp, theta: &[f64], task: &TaskBundle, split: Split, kind: LossKind) -> Result<Evaluation> {
    mlp.check_params(theta)?;
    let ds = task.split(split);
    if ds.is_empty() {
        return Err(MdmError::invalid(format!("task `{}` has an empty split", task.task_id)));
    }
    let head = task.head();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (x, y) in ds.inputs.iter().zip(&ds.labels) {
        let z = mlp.logits(theta, x);
        let zh = &z[head.clone()];
        loss += head_loss(kind, zh, *y).0;
        correct += usize::from(argmax(zh) == *y);
    }
    let n = ds.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

/// Mean cross-entropy over the train splits of `tasks`.
fn full_loss(mlp: &Mlp, theta: &[f64], tasks: &[&TaskBundle]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for t in tasks {
        total += mlp.batch_loss(
            theta,
            &t.train.inputs,
            &t.train.labels,
            0..t.train.len(),
            t.head(),
            LossKind::CrossEntropy,
            None,
        ) * t.train.len() as f64;
        n += t.train.len();
    }
    total / n.max(1) as f64
}

/// Fine-tunes `base` on one task.
pub fn train_task(
    mlp: &Mlp,
    base: &ParameterVector,
    task: &TaskBundle,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ParameterVector, TrainReport)> {
    train_on(mlp, base, &[task], cfg, seed)
}

/// Minibatch AdamW over the pooled train splits of `tasks`; each example is
/// scored on its own task's head.
pub fn train_on(
    mlp: &Mlp,
    base: &ParameterVector,
    tasks: &[&TaskBundle],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ParameterVector, TrainReport)> {
    base.layout().ensure_same(mlp.layout(), "training base")?;
    if cfg.batch_size == 0 || !(cfg.lr >= 0.0) {
        return Err(MdmError::invalid("batch_size must be positive and lr non-negative"));
    }
    for t in tasks {
        if t.input_width != mlp.spec().input_width() || t.head().end > mlp.spec().output_width() {
            return Err(MdmError::invalid(format!(
                "task `{}` does not fit the network",
                t.task_id
            )));
        }
    }
    let mut theta = base.values().to_vec();
    let d = theta.len();
    let mut m = vec![0.0; d];
    let mut v = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut dlogits = vec![0.0; mlp.spec().output_width()];
    let mut order: Vec<(usize, usize)> = tasks
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.train.len()).map(move |i| (ti, i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses = vec![full_loss(mlp, &theta, tasks)];
    let mut step = 0i32;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            g.iter_mut().for_each(|x| *x = 0.0);
            for &(ti, i) in batch {
                let t = tasks[ti];
                let trace = mlp.forward(&theta, &t.train.inputs[i]);
                let head = t.head();
                let (_, dz) = head_loss(LossKind::CrossEntropy, &trace.logits()[head.clone()], t.train.labels[i]);
                dlogits.iter_mut().for_each(|x| *x = 0.0);
                dlogits[head].copy_from_slice(&dz);
                mlp.backward(&theta, &trace, &dlogits, &mut g);
            }
            let scale = 1.0 / batch.len() as f64;
            step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(step);
            let bc2 = 1.0 - cfg.beta2.powi(step);
            for j in 0..d {
                let gj = g[j] * scale;
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
                theta[j] -= cfg.lr * (update + cfg.weight_decay * theta[j]);
            }
        }
        let loss = full_loss(mlp, &theta, tasks);
        if !loss.is_finite() {
            return Err(MdmError::Numerical(format!("training diverged at epoch {}", losses.len())));
        }
        losses.push(loss);
    }
    Ok((ParameterVector::new(theta, base.layout().clone())?, TrainReport { losses }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::data::make_task;
    use crate::bench::mlp::MlpSpec;

    fn setup() -> (Mlp, TaskBundle, ParameterVector) {
        let task = make_task(11, 4, 16, 3.0).unwrap();
        let mlp = MlpSpec::standard(16, 4).build().unwrap();
        let base = mlp.init(1);
        (mlp, task, base)
    }

    #[test]
    fn zero_learning_rate_keeps_base() {
        let (mlp, task, base) = setup();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 2,
            ..TrainConfig::default()
        };
        let (theta, _) = train_task(&mlp, &base, &task, &cfg, 3).unwrap();
        assert_eq!(theta, base);
    }

    #[test]
    fn default_training_learns_the_task() {
        let (mlp, task, base) = setup();
        let (theta, report) = train_task(&mlp, &base, &task, &TrainConfig::default(), 3).unwrap();
        assert!(report.losses.last().unwrap() <= &(0.5 * report.losses[0]));
        let ev = evaluate(&mlp, theta.values(), &task, Split::Test, LossKind::CrossEntropy).unwrap();
        assert!(ev.accuracy >= 0.9, "accuracy {}", ev.accuracy);
        let (again, _) = train_task(&mlp, &base, &task, &TrainConfig::default(), 3).unwrap();
        assert_eq!(again, theta);
    }

    #[test]
    fn evaluate_matches_per_example_oracle() {
        let (mlp, task, base) = setup();
        let ev = evaluate(&mlp, base.values(), &task, Split::Val, LossKind::CrossEntropy).unwrap();
        let mut loss = 0.0;
        let mut hits = 0.0;
        for (x, y) in task.val.inputs.iter().zip(&task.val.labels) {
            let z = mlp.logits(base.values(), x);
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - z[*y];
            let best = (0..z.len()).fold(0, |b, i| if z[i] > z[b] { i } else { b });
            if best == *y {
                hits += 1.0;
            }
        }
        let n = task.val.len() as f64;
        assert!((ev.loss - loss / n).abs() <= 1e-12);
        assert_eq!(ev.accuracy, hits / n);
    }

    #[test]
    fn uniform_network_scores() {
        let (mlp, task, _) = setup();
        let zero = vec![0.0; mlp.param_count()];
        let ev = evaluate(&mlp, &zero, &task, Split::Test, LossKind::CrossEntropy).unwrap();
        assert!((ev.loss - 4f64.ln()).abs() < 1e-12);
        // all ties resolve to class 0, which holds a quarter of the examples
        assert_eq!(ev.accuracy, 0.25);
    }

    #[test]
    fn perfect_classifier_scores_one() {
        // one-class task: every prediction is class 0
        let task = make_task(2, 1, 3, 1.0).unwrap();
        let mlp = MlpSpec::standard(3, 1).build().unwrap();
        let ev = evaluate(&mlp, mlp.init(0).values(), &task, Split::Test, LossKind::CrossEntropy).unwrap();
        assert_eq!(ev.accuracy, 1.0);
        assert_eq!(ev.loss, 0.0);
    }
}
