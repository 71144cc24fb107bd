//! (mu/mu_w, lambda)-CMA-ES with cumulative step-size adaptation and
//! rank-one plus rank-mu covariance updates. No restarts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{FitnessSpec, IterRecord, MergeObjective, OptimizeResult};
use crate::eigen::symmetric_eigen;
use crate::error::{MdmError, Result};
use crate::merge::MergeState;

#[derive(Debug, Clone, PartialEq)]
pub struct CmaConfig {
    pub population: usize,
    pub sigma0: f64,
    pub max_iters: usize,
    pub seed: u64,
    /// Stop once the best fitness of recent generations and the spread of
    /// the current one both fall within this range.
    pub tol_fitness: f64,
}

impl Default for CmaConfig {
    fn default() -> Self {
        Self {
            population: 50,
            sigma0: 0.3,
            max_iters: 300,
            seed: 0,
            tol_fitness: 1e-12,
        }
    }
}

impl CmaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 4 {
            return Err(MdmError::invalid("population must be at least 4"));
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(MdmError::invalid("sigma0 must be positive"));
        }
        if !(self.tol_fitness >= 0.0) {
            return Err(MdmError::invalid("tol_fitness must be non-negative"));
        }
        Ok(())
    }
}

/// Minimizes `f` from `x0`. Candidates are evaluated concurrently and
/// ranked in candidate order, so results depend only on the seed. A
/// non-finite fitness ranks last; a generation with no finite fitness aborts.
pub fn cmaes_minimize<F>(f: F, x0: &[f64], cfg: &CmaConfig) -> Result<OptimizeResult>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    cfg.validate()?;
    let n = x0.len();
    if n == 0 {
        return Err(MdmError::invalid("nothing to optimize"));
    }
    let nf = n as f64;
    let lambda = cfg.population;
    let mu = lambda / 2;
    let raw: Vec<f64> = (1..=mu).map(|i| (mu as f64 + 0.5).ln() - (i as f64).ln()).collect();
    let wsum: f64 = raw.iter().sum();
    let w: Vec<f64> = raw.iter().map(|x| x / wsum).collect();
    let mueff = 1.0 / w.iter().map(|x| x * x).sum::<f64>();

    let cs = (mueff + 2.0) / (nf + mueff + 5.0);
    let ds = 1.0 + 2.0 * (((mueff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + cs;
    let cc = (4.0 + mueff / nf) / (nf + 4.0 + 2.0 * mueff / nf);
    let c1 = 2.0 / ((nf + 1.3).powi(2) + mueff);
    let cmu = (1.0 - c1).min(2.0 * (mueff - 2.0 + 1.0 / mueff) / ((nf + 2.0).powi(2) + mueff));
    let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mean = x0.to_vec();
    let mut sigma = cfg.sigma0;
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        c[i * n + i] = 1.0;
    }
    let mut ps = vec![0.0; n];
    let mut pc = vec![0.0; n];

    let mut best_x = x0.to_vec();
    let mut best_f = f64::INFINITY;
    let mut history = Vec::with_capacity(cfg.max_iters);
    let window = 10 + (30.0 * nf / lambda as f64).ceil() as usize;
    let mut gen_bests: Vec<f64> = Vec::new();

    for iter in 0..cfg.max_iters {
        let eig = symmetric_eigen(&c, n);
        let dvals: Vec<f64> = eig.values.iter().map(|v| v.max(1e-300).sqrt()).collect();
        // B is column-major through eig.vectors[k][i]
        let mut zs = Vec::with_capacity(lambda);
        for _ in 0..lambda {
            let z: Vec<f64> = (0..n)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect();
            zs.push(z);
        }
        let ys: Vec<Vec<f64>> = zs
            .iter()
            .map(|z| {
                let mut y = vec![0.0; n];
                for k in 0..n {
                    let s = dvals[k] * z[k];
                    for (yi, bik) in y.iter_mut().zip(&eig.vectors[k]) {
                        *yi += bik * s;
                    }
                }
                y
            })
            .collect();
        let xs: Vec<Vec<f64>> = ys
            .iter()
            .map(|y| mean.iter().zip(y).map(|(m, yi)| m + sigma * yi).collect())
            .collect();
        let fits: Vec<f64> = xs
            .par_iter()
            .map(|x| f(x))
            .collect::<Result<Vec<f64>>>()?;

        let mut order: Vec<usize> = (0..lambda).collect();
        order.sort_by(|&a, &b| {
            let (fa, fb) = (fits[a], fits[b]);
            match (fa.is_finite(), fb.is_finite()) {
                (true, true) => fa.total_cmp(&fb).then(a.cmp(&b)),
                (true, false) => std::cmp::Ordering::Less,
                (false, true) => std::cmp::Ordering::Greater,
                (false, false) => a.cmp(&b),
            }
        });
        let finite: Vec<f64> = fits.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            return Err(MdmError::Numerical(format!(
                "every candidate of generation {iter} has non-finite fitness"
            )));
        }
        let gen_best = fits[order[0]];
        if gen_best < best_f {
            best_f = gen_best;
            best_x = xs[order[0]].clone();
        }
        let gen_mean = finite.iter().sum::<f64>() / finite.len() as f64;

        // selection and recombination
        let mut yw = vec![0.0; n];
        for (wi, &idx) in w.iter().zip(&order[..mu]) {
            for (a, b) in yw.iter_mut().zip(&ys[idx]) {
                *a += wi * b;
            }
        }
        for (m, y) in mean.iter_mut().zip(&yw) {
            *m += sigma * y;
        }

        // C^{-1/2} yw = B D^{-1} B^T yw
        let mut cinv_yw = vec![0.0; n];
        for k in 0..n {
            let proj: f64 = eig.vectors[k].iter().zip(&yw).map(|(b, y)| b * y).sum::<f64>() / dvals[k];
            for (o, b) in cinv_yw.iter_mut().zip(&eig.vectors[k]) {
                *o += b * proj;
            }
        }
        let ps_scale = (cs * (2.0 - cs) * mueff).sqrt();
        for (p, v) in ps.iter_mut().zip(&cinv_yw) {
            *p = (1.0 - cs) * *p + ps_scale * v;
        }
        let ps_norm = ps.iter().map(|x| x * x).sum::<f64>().sqrt();
        let hsig = ps_norm / (1.0 - (1.0 - cs).powi(2 * (iter as i32 + 1))).sqrt()
            < (1.4 + 2.0 / (nf + 1.0)) * chi_n;
        let hs = if hsig { 1.0 } else { 0.0 };
        let pc_scale = (cc * (2.0 - cc) * mueff).sqrt();
        for (p, y) in pc.iter_mut().zip(&yw) {
            *p = (1.0 - cc) * *p + hs * pc_scale * y;
        }
        let decay = 1.0 - c1 - cmu + (1.0 - hs) * c1 * cc * (2.0 - cc);
        for i in 0..n {
            for j in 0..=i {
                let mut rank_mu = 0.0;
                for (wk, &idx) in w.iter().zip(&order[..mu]) {
                    rank_mu += wk * ys[idx][i] * ys[idx][j];
                }
                let v = decay * c[i * n + j] + c1 * pc[i] * pc[j] + cmu * rank_mu;
                c[i * n + j] = v;
                c[j * n + i] = v;
            }
        }
        sigma *= ((cs / ds) * (ps_norm / chi_n - 1.0)).exp();
        if !sigma.is_finite() || sigma <= 0.0 {
            return Err(MdmError::Numerical(format!("step size became {sigma} at generation {iter}")));
        }

        history.push(IterRecord {
            iter,
            best: best_f,
            mean: gen_mean,
            sigma,
        });

        gen_bests.push(gen_best);
        if gen_bests.len() >= window {
            let recent = &gen_bests[gen_bests.len() - window..];
            let hi = recent.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = recent.iter().copied().fold(f64::INFINITY, f64::min);
            let spread = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - finite.iter().copied().fold(f64::INFINITY, f64::min);
            if hi - lo <= cfg.tol_fitness && spread <= cfg.tol_fitness {
                break;
            }
        }
    }
    Ok(OptimizeResult {
        alphas: best_x,
        best: best_f,
        history,
    })
}

/// CMA-ES over the merge coefficients of `state`, starting from all ones.
pub fn optimize_cmaes(spec: &FitnessSpec, state: &MergeState, cfg: &CmaConfig) -> Result<OptimizeResult> {
    let mut obj = MergeObjective::new(spec, state)?;
    optimize_cmaes_with(&mut obj, cfg)
}

pub fn optimize_cmaes_with(obj: &mut MergeObjective<'_>, cfg: &CmaConfig) -> Result<OptimizeResult> {
    let n = obj.dim();
    if n == 0 {
        return Err(MdmError::invalid("the basis is empty"));
    }
    let x0 = vec![1.0; n];
    obj.freeze_weights_at(&x0)?;
    let obj = &*obj;
    cmaes_minimize(|a| obj.value(a), &x0, cfg)
}
