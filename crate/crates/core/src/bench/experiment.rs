//! End-to-end continual-merging experiment.
//!
//! Tasks occupy disjoint input features and disjoint output heads of one
//! shared MLP. A base model is warmed up on the pooled tasks, each task is
//! fine-tuned from that base, and four methods are compared stage by stage:
//!
//! - `mdm-oc`: orthogonal integration with coefficients re-optimized on the
//!   validation splits after every stage;
//! - `raw-average`: `base + mean(raw deltas)`;
//! - `raw-merge`: raw deltas with coefficients optimized the same way as
//!   `mdm-oc` (final stage only);
//! - `sequential`: plain fine-tuning through the tasks in order.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::{make_task, Split, TaskBundle};
use super::metrics::{compute_metrics, uad_from, AccuracyMatrix, MetricReport};
use super::mlp::{LossKind, Mlp, MlpSpec};
use super::objective::MlpTaskObjective;
use super::train::{evaluate, train_on, train_task, TrainConfig};
use crate::error::{MdmError, Result};
use crate::merge::MergeState;
use crate::optimize::{
    adam_minimize, cmaes::optimize_cmaes_with, cmaes_minimize, gradient::optimize_gradient_with, Balancing, CmaConfig,
    FitnessSpec, GradConfig, MergeObjective, OptimizeResult, ParamPenalty, WeightedTask,
};
use crate::params::vecops::{axpy, dot};
use crate::params::{extract_delta, DeltaRecord, ParameterVector};
use crate::stability::{estimate_fisher_diag, generate_replay, EwcPenalty, ReplayPenalty};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Cmaes,
    Grad,
}

impl std::str::FromStr for Method {
    type Err = MdmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cmaes" => Ok(Method::Cmaes),
            "grad" => Ok(Method::Grad),
            other => Err(MdmError::invalid(format!("unknown method `{other}` (expected cmaes or grad)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub tasks: usize,
    pub classes: usize,
    pub dims: usize,
    /// Offset between consecutive tasks' feature blocks; `dims` makes them
    /// disjoint, 0 puts every task on the same features.
    pub feature_stride: usize,
    pub separation: f64,
    pub seeds: Vec<u64>,
    pub method: Method,
    pub cma: CmaConfig,
    pub grad: GradConfig,
    pub balancing: Balancing,
    pub train: TrainConfig,
    pub warmup: TrainConfig,
    /// EWC strength; 0 disables the term.
    pub lambda: f64,
    pub fisher_samples: usize,
    /// Replay samples per task; 0 disables the term.
    pub replay_count: usize,
    pub replay_sigma: f64,
    pub replay_weight: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            tasks: 5,
            classes: 4,
            dims: 4,
            feature_stride: 4,
            separation: 3.0,
            seeds: vec![0],
            method: Method::Cmaes,
            cma: CmaConfig {
                max_iters: 100,
                tol_fitness: 1e-9,
                ..CmaConfig::default()
            },
            grad: GradConfig::default(),
            balancing: Balancing::None,
            train: TrainConfig::default(),
            warmup: TrainConfig {
                epochs: 2,
                lr: 1e-3,
                ..TrainConfig::default()
            },
            lambda: 0.0,
            fisher_samples: 200,
            replay_count: 0,
            replay_sigma: crate::stability::DEFAULT_REPLAY_SIGMA,
            replay_weight: 1.0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| MdmError::invalid(format!("bad value `{v}` for `{key}`")))
}

impl BenchConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "tasks" => self.tasks = parse(key, v)?,
            "classes" => self.classes = parse(key, v)?,
            "dims" => self.dims = parse(key, v)?,
            "feature_stride" => self.feature_stride = parse(key, v)?,
            "separation" => self.separation = parse(key, v)?,
            "seed" => self.seeds = vec![parse(key, v)?],
            "seeds" => {
                self.seeds = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "method" => self.method = v.parse()?,
            "population" => self.cma.population = parse(key, v)?,
            "sigma0" => self.cma.sigma0 = parse(key, v)?,
            "max_iters" => {
                self.cma.max_iters = parse(key, v)?;
                self.grad.max_epochs = self.cma.max_iters;
            }
            "tol_fitness" => self.cma.tol_fitness = parse(key, v)?,
            "grad_lr" => self.grad.lr = parse(key, v)?,
            "clip_norm" => self.grad.clip_norm = parse(key, v)?,
            "patience" => self.grad.patience = parse(key, v)?,
            "balancing" => {
                self.balancing = match v {
                    "none" => Balancing::None,
                    "adaptive" => Balancing::Adaptive,
                    other => return Err(MdmError::invalid(format!("unknown balancing `{other}`"))),
                }
            }
            "epochs" => self.train.epochs = parse(key, v)?,
            "lr" => self.train.lr = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "weight_decay" => self.train.weight_decay = parse(key, v)?,
            "warmup_epochs" => self.warmup.epochs = parse(key, v)?,
            "warmup_lr" => self.warmup.lr = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "fisher_samples" => self.fisher_samples = parse(key, v)?,
            "replay_count" => self.replay_count = parse(key, v)?,
            "replay_sigma" => self.replay_sigma = parse(key, v)?,
            "replay_weight" => self.replay_weight = parse(key, v)?,
            other => return Err(MdmError::invalid(format!("unknown setting `{other}`"))),
        }
        Ok(())
    }

    /// Reads `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MdmError::invalid(format!("line {}: expected key=value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 || self.classes == 0 || self.dims == 0 {
            return Err(MdmError::invalid("tasks, classes and dims must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(MdmError::invalid("at least one seed is required"));
        }
        if !(self.lambda >= 0.0 && self.replay_weight >= 0.0) {
            return Err(MdmError::invalid("lambda and replay_weight must be non-negative"));
        }
        self.cma.validate()?;
        self.grad.validate()
    }
}

/// Seed of task `i` in the run seeded by `seed`.
pub fn task_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1)
}

/// The benchmark's tasks and network for one seed.
pub struct Suite {
    pub mlp: Arc<Mlp>,
    pub tasks: Vec<Arc<TaskBundle>>,
}

pub fn build_suite(cfg: &BenchConfig, seed: u64) -> Result<Suite> {
    let width = (cfg.tasks - 1) * cfg.feature_stride + cfg.dims;
    let outputs = cfg.tasks * cfg.classes;
    let mlp = Arc::new(MlpSpec::standard(width, outputs).build()?);
    let tasks = (0..cfg.tasks)
        .map(|i| {
            let t = make_task(task_seed(seed, i), cfg.classes, cfg.dims, cfg.separation)?;
            Ok(Arc::new(t.embed(width, i * cfg.feature_stride, i * cfg.classes)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Suite { mlp, tasks })
}

/// Brief training on the pooled task inputs with uniformly random labels.
/// The labels carry no task information, so the base exercises the shared
/// layers while staying at chance on every task.
pub fn warm_base(suite: &Suite, cfg: &TrainConfig, seed: u64) -> Result<ParameterVector> {
    let init = suite.mlp.init(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5741_524D);
    let shuffled: Vec<TaskBundle> = suite
        .tasks
        .iter()
        .map(|t| {
            let mut t = TaskBundle::clone(t);
            for l in &mut t.train.labels {
                *l = rng.random_range(0..t.class_count);
            }
            t
        })
        .collect();
    let refs: Vec<&TaskBundle> = shuffled.iter().collect();
    Ok(train_on(&suite.mlp, &init, &refs, cfg, seed ^ 0x5741_524D)?.0)
}

/// Accuracy drop on the remaining tasks caused by unmerging `removed_id`,
/// and the wall time of the unmerge itself. `state` is left untouched.
pub fn compute_uad(
    state: &MergeState,
    removed_id: &str,
    mlp: &Mlp,
    remaining: &[&TaskBundle],
) -> Result<(f64, f64)> {
    if !state.alphas().contains_key(removed_id) {
        return Err(MdmError::UnknownId(removed_id.to_string()));
    }
    let before = test_accuracies(mlp, state.merged_values(), remaining)?;
    let mut after_state = state.clone();
    let t0 = Instant::now();
    after_state.unmerge(removed_id, false)?;
    let secs = t0.elapsed().as_secs_f64();
    let after = test_accuracies(mlp, after_state.merged_values(), remaining)?;
    Ok((uad_from(&before, &after)?, secs))
}

fn test_accuracies(mlp: &Mlp, theta: &[f64], tasks: &[&TaskBundle]) -> Result<Vec<f64>> {
    tasks
        .iter()
        .map(|t| Ok(evaluate(mlp, theta, t, Split::Test, LossKind::CrossEntropy)?.accuracy))
        .collect()
}

/// Per-method outputs for one seed.
#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub name: &'static str,
    /// `rows[stage][task] = (accuracy, loss)` on the test split, for the
    /// stages that were evaluated.
    pub rows: Vec<(usize, Vec<(f64, f64)>)>,
    /// Final-stage test loss minus the solo fine-tuned loss, per task.
    pub epsilon: Vec<f64>,
    pub metrics: Option<MetricReport>,
    pub acc: f64,
    pub uad: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub solo: Vec<(f64, f64)>,
    pub methods: Vec<MethodOutcome>,
    pub alphas: Vec<f64>,
    pub recovery_seconds: f64,
}

impl SeedOutcome {
    pub fn method(&self, name: &str) -> Option<&MethodOutcome> {
        self.methods.iter().find(|m| m.name == name)
    }
}

fn eval_all(mlp: &Mlp, theta: &[f64], tasks: &[Arc<TaskBundle>]) -> Result<Vec<(f64, f64)>> {
    tasks
        .iter()
        .map(|t| {
            let e = evaluate(mlp, theta, t, Split::Test, LossKind::CrossEntropy)?;
            Ok((e.accuracy, e.loss))
        })
        .collect()
}

fn full_matrix(rows: &[(usize, Vec<(f64, f64)>)], t: usize) -> Result<AccuracyMatrix> {
    let mut r = AccuracyMatrix::new(t);
    for (stage, row) in rows {
        for (j, (acc, _)) in row.iter().enumerate() {
            r.set(*stage, j, *acc)?;
        }
    }
    Ok(r)
}

fn fitness_spec(suite: &Suite, upto: usize, balancing: Balancing) -> FitnessSpec {
    let mut spec = FitnessSpec::new(
        suite.tasks[..upto]
            .iter()
            .map(|t| WeightedTask {
                objective: Arc::new(MlpTaskObjective::validation(suite.mlp.clone(), t.clone(), LossKind::CrossEntropy)),
                weight: 1.0,
            })
            .collect(),
    );
    spec.balancing = balancing;
    spec
}

struct Stabilizers {
    ewc: Option<EwcPenalty>,
    replay: Option<ReplayPenalty>,
}

impl Stabilizers {
    fn build(cfg: &BenchConfig, suite: &Suite, base: &ParameterVector, seed: u64) -> Result<Self> {
        let refs: Vec<&TaskBundle> = suite.tasks.iter().map(|t| t.as_ref()).collect();
        let ewc = if cfg.lambda > 0.0 {
            let f = estimate_fisher_diag(&suite.mlp, base, &refs, cfg.fisher_samples, seed ^ 0xF15E)?;
            Some(EwcPenalty::new(f, cfg.lambda)?)
        } else {
            None
        };
        let replay = if cfg.replay_count > 0 && cfg.replay_weight > 0.0 {
            let r = generate_replay(&suite.mlp, base, &refs, cfg.replay_count, cfg.replay_sigma, seed ^ 0x5E9A)?;
            Some(ReplayPenalty {
                mlp: suite.mlp.clone(),
                replay: r,
                weight: cfg.replay_weight,
            })
        } else {
            None
        };
        Ok(Self { ewc, replay })
    }

    fn attach<'a>(&'a self, mut obj: MergeObjective<'a>) -> MergeObjective<'a> {
        if let Some(p) = &self.ewc {
            obj = obj.with_penalty(p as &dyn ParamPenalty);
        }
        if let Some(p) = &self.replay {
            obj = obj.with_penalty(p as &dyn ParamPenalty);
        }
        obj
    }
}

fn optimize_state(cfg: &BenchConfig, spec: &FitnessSpec, state: &MergeState, stab: &Stabilizers, seed: u64) -> Result<OptimizeResult> {
    let mut obj = stab.attach(MergeObjective::new(spec, state)?);
    match cfg.method {
        Method::Cmaes => optimize_cmaes_with(&mut obj, &CmaConfig { seed, ..cfg.cma.clone() }),
        Method::Grad => optimize_gradient_with(&mut obj, &cfg.grad),
    }
}

/// Raw task arithmetic: `base + sum(alpha_i * delta_i)`.
fn raw_theta(base: &[f64], deltas: &[DeltaRecord], alphas: &[f64]) -> Vec<f64> {
    let mut theta = base.to_vec();
    for (d, a) in deltas.iter().zip(alphas) {
        axpy(&mut theta, d.values(), *a);
    }
    theta
}

fn optimize_raw(cfg: &BenchConfig, spec: &FitnessSpec, base: &[f64], deltas: &[DeltaRecord], seed: u64) -> Result<OptimizeResult> {
    let x0 = vec![1.0; deltas.len()];
    let value = |a: &[f64]| -> Result<f64> {
        let theta = raw_theta(base, deltas, a);
        let mut total = 0.0;
        for t in &spec.tasks {
            total += t.weight * t.objective.loss(&theta)?;
        }
        Ok(total)
    };
    match cfg.method {
        Method::Cmaes => cmaes_minimize(value, &x0, &CmaConfig { seed, ..cfg.cma.clone() }),
        Method::Grad => adam_minimize(
            |a| {
                let theta = raw_theta(base, deltas, a);
                let mut total = 0.0;
                let mut g_theta = vec![0.0; theta.len()];
                for t in &spec.tasks {
                    let (l, g) = t.objective.loss_and_grad(&theta)?;
                    total += t.weight * l;
                    axpy(&mut g_theta, &g, t.weight);
                }
                Ok((total, deltas.iter().map(|d| dot(&g_theta, d.values())).collect()))
            },
            &x0,
            &cfg.grad,
        ),
    }
}

/// Mean over removals of the accuracy drop on the other tasks when
/// `alpha_k * delta_k` is subtracted from a raw merge.
fn raw_mean_uad(mlp: &Mlp, tasks: &[&TaskBundle], merged: &[f64], deltas: &[DeltaRecord], alphas: &[f64]) -> Result<f64> {
    let t = deltas.len();
    let mut total = 0.0;
    for k in 0..t {
        let remaining: Vec<&TaskBundle> = tasks.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, r)| *r).collect();
        let mut after = merged.to_vec();
        axpy(&mut after, deltas[k].values(), -alphas[k]);
        total += uad_from(&test_accuracies(mlp, merged, &remaining)?, &test_accuracies(mlp, &after, &remaining)?)?;
    }
    Ok(total / t as f64)
}

/// Runs every method for one seed.
pub fn run_seed(cfg: &BenchConfig, seed: u64) -> Result<SeedOutcome> {
    cfg.validate()?;
    let suite = build_suite(cfg, seed)?;
    let mlp = &suite.mlp;
    let t = cfg.tasks;
    let base = warm_base(&suite, &cfg.warmup, seed)?;
    let mut deltas = Vec::with_capacity(t);
    let mut solo = Vec::with_capacity(t);
    for (i, task) in suite.tasks.iter().enumerate() {
        let (theta, _) = train_task(mlp, &base, task, &cfg.train, task_seed(seed, i) ^ 0x7EA1)?;
        let e = evaluate(mlp, theta.values(), task, Split::Test, LossKind::CrossEntropy)?;
        solo.push((e.accuracy, e.loss));
        deltas.push(extract_delta(task.task_id.clone(), &theta, &base)?);
    }
    let chance: Vec<f64> = suite.tasks.iter().map(|t| t.chance_accuracy()).collect();
    let epsilon_of = |row: &[(f64, f64)]| row.iter().zip(&solo).map(|(m, s)| m.1 - s.1).collect::<Vec<f64>>();
    let stab = Stabilizers::build(cfg, &suite, &base, seed)?;

    // orthogonal continual merging
    let mut state = MergeState::empty(base.clone(), "bench");
    let mut mdm_rows = Vec::with_capacity(t);
    for (s, d) in deltas.iter().enumerate() {
        let outcome = state.integrate(d, 1.0)?;
        if !outcome.is_accepted() {
            return Err(MdmError::Degenerate(format!("delta of `{}` was rejected: {outcome:?}", d.model_id)));
        }
        let spec = fitness_spec(&suite, s + 1, cfg.balancing);
        let r = optimize_state(cfg, &spec, &state, &stab, seed ^ (s as u64) << 32)?;
        state.reweight_all(&r.alphas)?;
        mdm_rows.push((s, eval_all(mlp, state.merged_values(), &suite.tasks)?));
    }
    let mdm_matrix = full_matrix(&mdm_rows, t)?;
    let mut mdm_metrics = compute_metrics(&mdm_matrix, &chance)?;
    let refs: Vec<&TaskBundle> = suite.tasks.iter().map(|t| t.as_ref()).collect();
    let mut uads = Vec::with_capacity(t);
    let mut recovery = 0.0;
    for (k, d) in deltas.iter().enumerate() {
        let remaining: Vec<&TaskBundle> = refs.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, r)| *r).collect();
        let (u, secs) = compute_uad(&state, &d.model_id, mlp, &remaining)?;
        uads.push(u);
        recovery += secs;
    }
    let mdm_uad = uads.iter().sum::<f64>() / t as f64;
    mdm_metrics.uad = Some(mdm_uad);
    let mdm_last = mdm_rows.last().expect("at least one task").1.clone();
    let alphas = state.alpha_vector();

    // equal-weight averaging of raw deltas
    let mut avg_rows = Vec::with_capacity(t);
    for s in 0..t {
        let w = vec![1.0 / (s + 1) as f64; s + 1];
        let theta = raw_theta(base.values(), &deltas[..=s], &w);
        avg_rows.push((s, eval_all(mlp, &theta, &suite.tasks)?));
    }
    let avg_metrics = compute_metrics(&full_matrix(&avg_rows, t)?, &chance)?;
    let avg_last = avg_rows.last().expect("non-empty").1.clone();
    let avg_alphas = vec![1.0 / t as f64; t];
    let avg_uad = raw_mean_uad(mlp, &refs, &raw_theta(base.values(), &deltas, &avg_alphas), &deltas, &avg_alphas)?;

    // raw deltas with optimized coefficients, final stage
    let spec = fitness_spec(&suite, t, Balancing::None);
    let raw = optimize_raw(cfg, &spec, base.values(), &deltas, seed ^ 0x0AA0)?;
    let raw_full = raw_theta(base.values(), &deltas, &raw.alphas);
    let raw_last = eval_all(mlp, &raw_full, &suite.tasks)?;
    let raw_uad = raw_mean_uad(mlp, &refs, &raw_full, &deltas, &raw.alphas)?;

    // sequential fine-tuning
    let mut theta = base.clone();
    let mut seq_rows = Vec::with_capacity(t);
    for (s, task) in suite.tasks.iter().enumerate() {
        theta = train_task(mlp, &theta, task, &cfg.train, task_seed(seed, s) ^ 0x5E0)?.0;
        seq_rows.push((s, eval_all(mlp, theta.values(), &suite.tasks)?));
    }
    let seq_metrics = compute_metrics(&full_matrix(&seq_rows, t)?, &chance)?;
    let seq_last = seq_rows.last().expect("non-empty").1.clone();

    let mean_acc = |row: &[(f64, f64)]| row.iter().map(|r| r.0).sum::<f64>() / row.len() as f64;
    let methods = vec![
        MethodOutcome {
            name: "mdm-oc",
            epsilon: epsilon_of(&mdm_last),
            acc: mdm_metrics.acc,
            uad: Some(mdm_uad),
            metrics: Some(mdm_metrics),
            rows: mdm_rows,
        },
        MethodOutcome {
            name: "raw-average",
            epsilon: epsilon_of(&avg_last),
            acc: avg_metrics.acc,
            uad: Some(avg_uad),
            metrics: Some(avg_metrics),
            rows: avg_rows,
        },
        MethodOutcome {
            name: "raw-merge",
            epsilon: epsilon_of(&raw_last),
            acc: mean_acc(&raw_last),
            uad: Some(raw_uad),
            metrics: None,
            rows: vec![(t - 1, raw_last)],
        },
        MethodOutcome {
            name: "sequential",
            epsilon: epsilon_of(&seq_last),
            acc: seq_metrics.acc,
            uad: None,
            metrics: Some(seq_metrics),
            rows: seq_rows,
        },
    ];
    Ok(SeedOutcome {
        seed,
        solo,
        methods,
        alphas,
        recovery_seconds: recovery,
    })
}

pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<SeedOutcome>> {
    cfg.validate()?;
    cfg.seeds.iter().map(|s| run_seed(cfg, *s)).collect()
}

pub const CSV_HEADER: &str = "seed,method,stage,task,accuracy,loss,epsilon,acc,bwt,fwt,uad";

/// One row per evaluated (stage, task), then one summary row per method.
/// Timings are left out so the output depends only on the configuration.
pub fn bench_csv(results: &[SeedOutcome]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in results {
        for m in &r.methods {
            let last = m.rows.last().map(|x| x.0);
            for (stage, row) in &m.rows {
                for (j, (acc, loss)) in row.iter().enumerate() {
                    let eps = if Some(*stage) == last { format!("{:?}", m.epsilon[j]) } else { String::new() };
                    let _ = writeln!(out, "{},{},{stage},{j},{acc:?},{loss:?},{eps},,,,", r.seed, m.name);
                }
            }
            let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
            let (bwt, fwt) = match &m.metrics {
                Some(mr) => (Some(mr.bwt), Some(mr.fwt)),
                None => (None, None),
            };
            let _ = writeln!(
                out,
                "{},{},summary,,,,,{:?},{},{},{}",
                r.seed,
                m.name,
                m.acc,
                opt(bwt),
                opt(fwt),
                opt(m.uad)
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text() {
        let mut c = BenchConfig::default();
        c.apply_text("# comment\ntasks=3\nseeds=1, 2,3\nmethod=grad\nlambda = 10\n\n").unwrap();
        assert_eq!(c.tasks, 3);
        assert_eq!(c.seeds, vec![1, 2, 3]);
        assert_eq!(c.method, Method::Grad);
        assert_eq!(c.lambda, 10.0);
        assert!(c.apply_text("bogus=1").is_err());
        assert!(c.apply_text("tasks").is_err());
        assert!(c.apply_text("tasks=x").is_err());
    }

    #[test]
    fn suite_layout() {
        let cfg = BenchConfig { tasks: 3, ..BenchConfig::default() };
        let s = build_suite(&cfg, 4).unwrap();
        assert_eq!(s.mlp.spec().input_width(), 12);
        assert_eq!(s.mlp.spec().output_width(), 12);
        assert_eq!(s.tasks[2].head(), 8..12);
        assert_eq!(s.tasks[1].feature_offset, 4);
    }

    fn tiny() -> BenchConfig {
        let mut c = BenchConfig { tasks: 2, classes: 2, dims: 2, feature_stride: 2, ..BenchConfig::default() };
        c.apply_text("population=8\nmax_iters=5\nepochs=1\nseeds=3").unwrap();
        c
    }

    #[test]
    fn csv_is_reproducible() {
        let c = tiny();
        let a = bench_csv(&run_bench(&c).unwrap());
        let b = bench_csv(&run_bench(&c).unwrap());
        assert_eq!(a, b);
        let lines: Vec<&str> = a.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        // per method: stage rows (2x2 for continual methods, 2 for raw-merge) plus a summary
        assert_eq!(lines.len(), 1 + (4 + 1) * 3 + (2 + 1));
        assert!(lines.iter().all(|l| l.split(',').count() == 11));
        let summary = lines.iter().find(|l| l.starts_with("3,mdm-oc,summary")).unwrap();
        assert!(summary.split(',').all(|f| f != "NaN"));
    }

    #[test]
    fn gradient_method_runs() {
        let mut c = tiny();
        c.set("method", "grad").unwrap();
        c.set("max_iters", "5").unwrap();
        let r = run_seed(&c, 3).unwrap();
        assert_eq!(r.alphas.len(), 2);
        let m = r.method("mdm-oc").unwrap();
        assert!(m.acc >= 0.0 && m.acc <= 1.0);
        assert_eq!(m.epsilon.len(), 2);
    }

    #[test]
    fn zero_alpha_removal_is_free() {
        let cfg = BenchConfig { tasks: 2, ..BenchConfig::default() };
        let suite = build_suite(&cfg, 1).unwrap();
        let base = warm_base(&suite, &cfg.warmup, 1).unwrap();
        let mut state = MergeState::empty(base.clone(), "t");
        for (i, task) in suite.tasks.iter().enumerate() {
            let theta = train_task(&suite.mlp, &base, task, &TrainConfig { epochs: 2, ..TrainConfig::default() }, i as u64).unwrap().0;
            let a = if i == 1 { 0.0 } else { 1.0 };
            state.integrate(&extract_delta(task.task_id.clone(), &theta, &base).unwrap(), a).unwrap();
        }
        let (u, secs) = compute_uad(&state, &suite.tasks[1].task_id, &suite.mlp, &[&suite.tasks[0]]).unwrap();
        assert_eq!(u, 0.0);
        assert!(secs >= 0.0);
        assert!(matches!(compute_uad(&state, "nope", &suite.mlp, &[]), Err(MdmError::UnknownId(_))));
    }
}
