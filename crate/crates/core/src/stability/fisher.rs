//! Diagonal empirical Fisher information and the EWC penalty built on it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bench::{LossKind, Mlp, TaskBundle};
use crate::error::{check_len, MdmError, Result};
use crate::optimize::ParamPenalty;
use crate::params::{flatten, unflatten, Checkpoint, ParameterVector, Tensor};

/// Reserved tensor name for the Fisher values inside a checkpoint.
pub const FISHER_TENSOR: &str = "fisher_diag";
/// Default EWC strength.
pub const DEFAULT_LAMBDA: f64 = 1000.0;

const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiag {
    values: Vec<f64>,
    reference: ParameterVector,
    sample_count: usize,
}

impl FisherDiag {
    pub fn new(values: Vec<f64>, reference: ParameterVector, sample_count: usize) -> Result<Self> {
        check_len(values.len(), reference.len())?;
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(MdmError::invalid(format!("Fisher entry {i} is {}", values[i])));
        }
        Ok(Self {
            values,
            reference,
            sample_count,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn reference(&self) -> &ParameterVector {
        &self.reference
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    /// Reference layers under their own names, the Fisher values as one flat
    /// tensor in the same (name-sorted) order.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        if self.reference.layout().get(FISHER_TENSOR).is_some() {
            return Err(MdmError::invalid(format!("layer name `{FISHER_TENSOR}` is reserved")));
        }
        let mut ckpt = unflatten(&self.reference)?;
        let fisher = ParameterVector::new(self.values.clone(), self.reference.layout().clone())?;
        let sorted = flatten(&unflatten(&fisher)?)?.into_values();
        ckpt.insert(FISHER_TENSOR, Tensor::f64(FISHER_TENSOR, vec![sorted.len()], sorted)?);
        ckpt.set_meta("sample_count", self.sample_count.to_string());
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut rest = ckpt.clone();
        let fisher = rest
            .tensors
            .remove(FISHER_TENSOR)
            .ok_or_else(|| MdmError::Format(format!("checkpoint has no `{FISHER_TENSOR}` tensor")))?;
        let samples = ckpt
            .require_meta("sample_count")?
            .parse()
            .map_err(|_| MdmError::Format("bad sample_count".into()))?;
        Self::new(fisher.data().to_vec(), flatten(&rest)?, samples)
    }
}

/// Sum of squared log-likelihood gradients over `examples`, each given as
/// (task index, example index) into the train splits of `tasks`.
fn squared_grad_sum(mlp: &Mlp, theta: &[f64], tasks: &[&TaskBundle], examples: &[(usize, usize)]) -> Result<Vec<f64>> {
    let d = theta.len();
    let mut acc = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut dlogits = vec![0.0; mlp.spec().output_width()];
    for &(ti, i) in examples {
        let t = tasks[ti];
        let trace = mlp.forward(theta, &t.train.inputs[i]);
        let head = t.head();
        let (_, dz) = crate::bench::mlp::head_loss(LossKind::CrossEntropy, &trace.logits()[head.clone()], t.train.labels[i]);
        dlogits.iter_mut().for_each(|v| *v = 0.0);
        dlogits[head].copy_from_slice(&dz);
        g.iter_mut().for_each(|v| *v = 0.0);
        mlp.backward(theta, &trace, &dlogits, &mut g);
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(MdmError::Numerical(format!(
                "non-finite log-likelihood gradient at parameter {j} for example {i} of `{}`",
                t.task_id
            )));
        }
        // the gradient of -log p has the same square as that of log p
        for (a, v) in acc.iter_mut().zip(&g) {
            *a += v * v;
        }
    }
    Ok(acc)
}

/// Empirical Fisher over exactly the listed examples. Work is split into
/// fixed chunks whose partial sums are added in chunk order.
pub fn fisher_over(mlp: &Mlp, model: &ParameterVector, tasks: &[&TaskBundle], examples: &[(usize, usize)]) -> Result<FisherDiag> {
    model.layout().ensure_same(mlp.layout(), "Fisher model")?;
    if examples.is_empty() {
        return Err(MdmError::invalid("Fisher estimation needs at least one example"));
    }
    for &(ti, i) in examples {
        let ok = tasks.get(ti).is_some_and(|t| i < t.train.len());
        if !ok {
            return Err(MdmError::invalid(format!("example ({ti}, {i}) does not exist")));
        }
    }
    let theta = model.values();
    let parts: Vec<Vec<f64>> = examples
        .par_chunks(CHUNK)
        .map(|c| squared_grad_sum(mlp, theta, tasks, c))
        .collect::<Result<_>>()?;
    let mut total = vec![0.0; theta.len()];
    for p in parts {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    let n = examples.len() as f64;
    total.iter_mut().for_each(|v| *v /= n);
    FisherDiag::new(total, model.clone(), examples.len())
}

/// Empirical Fisher at `model` from `samples` train examples drawn uniformly
/// with replacement from the pooled tasks, each scored on its own head.
pub fn estimate_fisher_diag(
    mlp: &Mlp,
    model: &ParameterVector,
    tasks: &[&TaskBundle],
    samples: usize,
    seed: u64,
) -> Result<FisherDiag> {
    if samples == 0 {
        return Err(MdmError::invalid("samples must be at least 1"));
    }
    let pool: Vec<(usize, usize)> = tasks
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.train.len()).map(move |i| (ti, i)))
        .collect();
    if pool.is_empty() {
        return Err(MdmError::invalid("no training examples to estimate from"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<(usize, usize)> = (0..samples).map(|_| pool[rng.random_range(0..pool.len())]).collect();
    fisher_over(mlp, model, tasks, &picks)
}

/// `lambda * sum_j F_j (theta_j - ref_j)^2`.
pub fn ewc_penalty(theta: &[f64], fisher: &FisherDiag, lambda: f64) -> Result<f64> {
    check_len(theta.len(), fisher.values.len())?;
    Ok(lambda
        * theta
            .iter()
            .zip(fisher.reference.values())
            .zip(&fisher.values)
            .map(|((t, r), f)| f * (t - r) * (t - r))
            .sum::<f64>())
}

/// `2 * lambda * F_j (theta_j - ref_j)`.
pub fn ewc_gradient(theta: &[f64], fisher: &FisherDiag, lambda: f64) -> Result<Vec<f64>> {
    check_len(theta.len(), fisher.values.len())?;
    Ok(theta
        .iter()
        .zip(fisher.reference.values())
        .zip(&fisher.values)
        .map(|((t, r), f)| 2.0 * lambda * f * (t - r))
        .collect())
}

#[derive(Debug, Clone)]
pub struct EwcPenalty {
    pub fisher: FisherDiag,
    pub lambda: f64,
}

impl EwcPenalty {
    pub fn new(fisher: FisherDiag, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(MdmError::invalid("lambda must be finite and non-negative"));
        }
        Ok(Self { fisher, lambda })
    }
}

impl ParamPenalty for EwcPenalty {
    fn value(&self, theta: &[f64]) -> Result<f64> {
        ewc_penalty(theta, &self.fisher, self.lambda)
    }

    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.value(theta)?, ewc_gradient(theta, &self.fisher, self.lambda)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{make_task, MlpSpec};
    use crate::params::LayerLayout;
    use proptest::prelude::*;
    use rand::Rng;
    use std::sync::Arc;

    fn flat(values: Vec<f64>) -> ParameterVector {
        let n = values.len();
        ParameterVector::new(values, Arc::new(LayerLayout::single("w", n))).unwrap()
    }

    #[test]
    fn zero_network_matches_softmax_closed_form() {
        // zero weights give uniform head probabilities and zero hidden
        // activations, so only output biases see a gradient: 1[c=y] - 1/C.
        // With balanced labels E[(1[c=y] - 1/C)^2] = (C - 1) / C^2.
        let c = 4;
        let task = make_task(6, c, 5, 3.0).unwrap().embed(5, 0, 2).unwrap();
        let mlp = MlpSpec::standard(5, 8).build().unwrap();
        let zero = ParameterVector::new(vec![0.0; mlp.param_count()], mlp.layout().clone()).unwrap();
        let all: Vec<(usize, usize)> = (0..task.train.len()).map(|i| (0, i)).collect();
        let f = fisher_over(&mlp, &zero, &[&task], &all).unwrap();
        let bias = mlp.layout().get("fc3.bias").unwrap().offset;
        let expect = (c as f64 - 1.0) / (c * c) as f64;
        for (j, v) in f.values().iter().enumerate() {
            let in_head = j >= bias + 2 && j < bias + 2 + c;
            if in_head {
                assert!((v - expect).abs() < 1e-15, "entry {j}: {v}");
            } else {
                assert_eq!(*v, 0.0, "entry {j}");
            }
        }
    }

    #[test]
    fn entries_non_negative_and_seeded() {
        let task = make_task(2, 3, 4, 2.0).unwrap();
        let mlp = MlpSpec::standard(4, 3).build().unwrap();
        let theta = mlp.init(5);
        let a = estimate_fisher_diag(&mlp, &theta, &[&task], 50, 1).unwrap();
        assert!(a.values().iter().all(|v| *v >= 0.0));
        assert_eq!(a, estimate_fisher_diag(&mlp, &theta, &[&task], 50, 1).unwrap());
        assert_ne!(a, estimate_fisher_diag(&mlp, &theta, &[&task], 50, 2).unwrap());
        assert!(estimate_fisher_diag(&mlp, &theta, &[&task], 0, 1).is_err());
    }

    #[test]
    fn standard_error_scales_with_inverse_root() {
        let task = make_task(8, 3, 4, 2.0).unwrap();
        let mlp = MlpSpec::standard(4, 3).build().unwrap();
        let theta = mlp.init(3);
        let bias = mlp.layout().get("fc3.bias").unwrap().offset;
        let stderr = |n: usize| {
            let draws: Vec<f64> = (0..200)
                .map(|s| estimate_fisher_diag(&mlp, &theta, &[&task], n, 1000 + s).unwrap().values()[bias])
                .collect();
            let m = draws.iter().sum::<f64>() / draws.len() as f64;
            (draws.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (draws.len() - 1) as f64).sqrt()
        };
        let (s1, s2, s4) = (stderr(16), stderr(32), stderr(64));
        let r2 = s2 / s1;
        let r4 = s4 / s1;
        assert!((r2 / std::f64::consts::FRAC_1_SQRT_2 - 1.0).abs() < 0.2, "ratio {r2}");
        assert!((r4 / 0.5 - 1.0).abs() < 0.2, "ratio {r4}");
    }

    #[test]
    fn penalty_examples() {
        let r = flat(vec![1.0, 2.0, 3.0]);
        let f = FisherDiag::new(vec![1.0; 3], r.clone(), 1).unwrap();
        assert_eq!(ewc_penalty(r.values(), &f, 1000.0).unwrap(), 0.0);
        assert_eq!(ewc_penalty(&[0.0, 2.0, 5.0], &f, 1.0).unwrap(), 5.0);
        assert!(ewc_penalty(&[0.0], &f, 1.0).is_err());
        assert!(FisherDiag::new(vec![-1.0, 0.0, 0.0], r.clone(), 1).is_err());
        assert!(FisherDiag::new(vec![0.0; 2], r, 1).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mlp = MlpSpec::standard(3, 2).build().unwrap();
        let task = make_task(1, 2, 3, 2.0).unwrap();
        let f = estimate_fisher_diag(&mlp, &mlp.init(1), &[&task], 20, 4).unwrap();
        let bytes = f.to_checkpoint().unwrap().to_bytes().unwrap();
        let back = FisherDiag::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, f);
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_differences(
            seed in any::<u64>(),
            lambda in 0.1f64..10.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 8;
            let r = flat((0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
            let fv = (0..d).map(|_| rng.random_range(0.0..2.0)).collect();
            let f = FisherDiag::new(fv, r, 1).unwrap();
            let theta: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let g = ewc_gradient(&theta, &f, lambda).unwrap();
            let h = 1e-4;
            for j in 0..d {
                let mut p = theta.clone();
                p[j] += h;
                let mut m = theta.clone();
                m[j] -= h;
                let fd = (ewc_penalty(&p, &f, lambda).unwrap() - ewc_penalty(&m, &f, lambda).unwrap()) / (2.0 * h);
                prop_assert!((fd - g[j]).abs() <= 1e-6 * fd.abs().max(g[j].abs()).max(1e-6));
            }
            prop_assert!(ewc_penalty(&theta, &f, lambda).unwrap() >= 0.0);
        }
    }
}
