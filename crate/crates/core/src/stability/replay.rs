//! Synthetic replay: noisy pseudo-inputs labelled with the base model's
//! soft outputs, and a KL penalty that keeps a candidate close to them.

use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bench::mlp::softmax;
use crate::bench::{Mlp, TaskBundle};
use crate::error::{MdmError, Result};
use crate::fsutil;
use crate::optimize::ParamPenalty;
use crate::params::ParameterVector;

pub const DEFAULT_REPLAY_COUNT: usize = 100;
pub const DEFAULT_REPLAY_SIGMA: f64 = 0.1;
/// Floor applied to target probabilities before taking logs.
pub const TARGET_FLOOR: f64 = 1e-300;

const MAGIC: &[u8; 4] = b"MDMR";
const VERSION: u32 = 1;

/// Replay samples of one task, read on that task's head.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayGroup {
    pub head: Range<usize>,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySet {
    pub groups: Vec<ReplayGroup>,
    pub noise_sigma: f64,
    pub per_task_count: usize,
    pub seed: u64,
    pub input_dim: usize,
}

impl ReplaySet {
    pub fn empty(input_dim: usize) -> Self {
        Self {
            groups: Vec::new(),
            noise_sigma: DEFAULT_REPLAY_SIGMA,
            per_task_count: 0,
            seed: 0,
            input_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.inputs.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Little-endian: magic, version, per-task count, input dim, sigma,
    /// seed, group count; then per group its head offset and width followed
    /// by `count` (input, target) rows.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.per_task_count as u64).to_le_bytes());
        out.extend_from_slice(&(self.input_dim as u64).to_le_bytes());
        out.extend_from_slice(&self.noise_sigma.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.groups.len() as u64).to_le_bytes());
        for g in &self.groups {
            out.extend_from_slice(&(g.head.start as u64).to_le_bytes());
            out.extend_from_slice(&(g.head.len() as u64).to_le_bytes());
            for (x, t) in g.inputs.iter().zip(&g.targets) {
                for v in x.iter().chain(t) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(MdmError::Format("not a replay file".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(MdmError::UnsupportedVersion(version));
        }
        let count = r.usize()?;
        let input_dim = r.usize()?;
        let noise_sigma = r.f64()?;
        let seed = r.u64()?;
        let n_groups = r.usize()?;
        let mut groups = Vec::new();
        for _ in 0..n_groups {
            let start = r.usize()?;
            let width = r.usize()?;
            let mut inputs = Vec::new();
            let mut targets = Vec::new();
            for _ in 0..count {
                inputs.push(r.f64s(input_dim)?);
                targets.push(r.f64s(width)?);
            }
            groups.push(ReplayGroup {
                head: start..start + width,
                inputs,
                targets,
            });
        }
        if r.pos != bytes.len() {
            return Err(MdmError::Format("trailing bytes after replay data".into()));
        }
        Ok(Self {
            groups,
            noise_sigma,
            per_task_count: count,
            seed,
            input_dim,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsutil::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| MdmError::Truncated(format!("replay file ends before byte {}", self.pos + n)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| MdmError::Format("size out of range".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        let v = f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(MdmError::Format("non-finite value in replay file".into()));
        }
        Ok(v)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

/// For each task, `count` inputs drawn as the task's validation-input mean
/// plus `N(0, sigma^2)` noise on every coordinate, labelled with the base
/// model's softmax over that task's head.
pub fn generate_replay(
    mlp: &Mlp,
    base: &ParameterVector,
    tasks: &[&TaskBundle],
    count: usize,
    sigma: f64,
    seed: u64,
) -> Result<ReplaySet> {
    if count == 0 {
        return Err(MdmError::invalid("replay count must be at least 1"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(MdmError::invalid("replay sigma must be positive"));
    }
    base.layout().ensure_same(mlp.layout(), "replay base")?;
    let input_dim = mlp.spec().input_width();
    let noise = Normal::new(0.0, sigma).map_err(|e| MdmError::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::with_capacity(tasks.len());
    for t in tasks {
        if t.input_width != input_dim || t.head().end > mlp.spec().output_width() {
            return Err(MdmError::invalid(format!("task `{}` does not fit the network", t.task_id)));
        }
        let mean = t.val.input_mean();
        if mean.is_empty() {
            return Err(MdmError::invalid(format!("task `{}` has no validation inputs", t.task_id)));
        }
        let mut inputs = Vec::with_capacity(count);
        let mut targets = Vec::with_capacity(count);
        for _ in 0..count {
            let x: Vec<f64> = mean.iter().map(|m| m + noise.sample(&mut rng)).collect();
            let z = mlp.logits(base.values(), &x);
            targets.push(softmax(&z[t.head()]));
            inputs.push(x);
        }
        groups.push(ReplayGroup {
            head: t.head(),
            inputs,
            targets,
        });
    }
    Ok(ReplaySet {
        groups,
        noise_sigma: sigma,
        per_task_count: count,
        seed,
        input_dim,
    })
}

/// `KL(p || t)` and its gradient with respect to the logits of `p`.
pub fn kl_with_grad(z: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let p = softmax(z);
    let logp: Vec<f64> = {
        let lse = crate::bench::mlp::log_sum_exp(z);
        z.iter().map(|v| v - lse).collect()
    };
    let logt: Vec<f64> = target.iter().map(|t| t.max(TARGET_FLOOR).ln()).collect();
    let kl: f64 = p.iter().zip(&logp).zip(&logt).map(|((p, lp), lt)| p * (lp - lt)).sum();
    let g = p
        .iter()
        .zip(&logp)
        .zip(&logt)
        .map(|((p, lp), lt)| p * (lp - lt - kl))
        .collect();
    (kl, g)
}

/// Mean KL between the candidate's head outputs and the replay targets,
/// with its gradient when requested. An empty set contributes zero.
pub fn replay_kl(mlp: &Mlp, theta: &[f64], replay: &ReplaySet, mut grad: Option<&mut [f64]>) -> Result<f64> {
    mlp.check_params(theta)?;
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = 0.0);
    }
    let n = replay.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut dlogits = vec![0.0; mlp.spec().output_width()];
    for grp in &replay.groups {
        if grp.head.end > dlogits.len() {
            return Err(MdmError::invalid("replay head outside the network outputs"));
        }
        for (x, t) in grp.inputs.iter().zip(&grp.targets) {
            crate::error::check_len(x.len(), mlp.spec().input_width())?;
            let trace = mlp.forward(theta, x);
            let (kl, dz) = kl_with_grad(&trace.logits()[grp.head.clone()], t);
            total += kl;
            if let Some(g) = grad.as_deref_mut() {
                dlogits.iter_mut().for_each(|v| *v = 0.0);
                dlogits[grp.head.clone()].copy_from_slice(&dz);
                mlp.backward(theta, &trace, &dlogits, g);
            }
        }
    }
    let nf = n as f64;
    if let Some(g) = grad {
        g.iter_mut().for_each(|v| *v /= nf);
    }
    Ok(total / nf)
}

#[derive(Debug, Clone)]
pub struct ReplayPenalty {
    pub mlp: Arc<Mlp>,
    pub replay: ReplaySet,
    pub weight: f64,
}

impl ParamPenalty for ReplayPenalty {
    fn value(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.weight * replay_kl(&self.mlp, theta, &self.replay, None)?)
    }

    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut g = vec![0.0; theta.len()];
        let v = replay_kl(&self.mlp, theta, &self.replay, Some(&mut g))?;
        g.iter_mut().for_each(|x| *x *= self.weight);
        Ok((self.weight * v, g))
    }
}
