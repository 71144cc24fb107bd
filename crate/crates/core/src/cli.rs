//! The `mdm` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation error, 3 numerical
//! failure. `--config FILE` supplies `key=value` defaults that explicit flags
//! override; `MDM_SEED` is the seed when neither gives one.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::bench::experiment::{build_suite, task_seed, warm_base, CSV_HEADER};
use crate::bench::{bench_csv, run_bench, BenchConfig, LossKind, Method, MlpTaskObjective, TaskBundle};
use crate::error::{ErrorClass, MdmError, Result};
use crate::fsutil::{create_dir_all, read, write_atomic};
use crate::hash::{from_hex, to_hex};
use crate::merge::{load_basis, save_basis, IntegrateOutcome, MergeState};
use crate::optimize::{
    cmaes::optimize_cmaes_with, gradient::optimize_gradient_with, history_csv, Balancing, FitnessSpec,
    MergeObjective, ParamPenalty, WeightedTask,
};
use crate::orthogonal::{orthogonality_check, orthogonalize_sequence_with, EPS_DROP, TOL_ORTH};
use crate::params::{extract_delta, flatten, load_checkpoint, normalize_delta, save_checkpoint, unflatten, DeltaRecord, ParameterVector};
use crate::stability::{estimate_fisher_diag, generate_replay, EwcPenalty, ReplayPenalty};
use crate::subspace::{fit_basis, reduced_orthogonalize_in};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

const SEED_ENV: &str = "MDM_SEED";
const SUITE_FILE: &str = "suite.cfg";
const REPLAY_TOL: f64 = 1e-10;

#[derive(Debug, Parser)]
#[command(name = "mdm", version, about = "Orthogonal delta merging with reversible unmerging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic task suite, warm up a base model and fine-tune one model per task.
    Train(TrainArgs),
    /// Extract the delta between a fine-tuned checkpoint and the base.
    Delta(DeltaArgs),
    /// Orthogonalize deltas in order and store the basis.
    Ortho(OrthoArgs),
    /// Orthogonalize deltas inside their top-k principal subspace.
    Reduce(ReduceArgs),
    /// Create a merge state from a base checkpoint and a stored basis.
    Merge(MergeArgs),
    /// Project a new delta onto the null space of a state and add it.
    Integrate(IntegrateArgs),
    /// Remove a member's contribution from a state.
    Unmerge(UnmergeArgs),
    /// Change one member's coefficient.
    Reweight(ReweightArgs),
    /// Search merge coefficients on the validation splits of a trained suite.
    Optimize(OptimizeArgs),
    /// Check a state's ledger replay, orthogonality and optionally a removal.
    Verify(VerifyArgs),
    /// Run the continual-merging benchmark and write a metrics CSV.
    Bench(BenchArgs),
    /// Inspect the provenance ledger of a state.
    Ledger {
        #[command(subcommand)]
        action: LedgerCommand,
    },
}

#[derive(Debug, Subcommand)]
enum LedgerCommand {
    /// Print every ledger entry.
    Show(StateArgs),
}

#[derive(Debug, Args)]
struct StateArgs {
    /// State directory.
    #[arg(long, default_value = "mdm-state")]
    state: PathBuf,
    /// Reassemble the merged vector instead of trusting the cache.
    #[arg(long)]
    recompute: bool,
    /// `key=value` defaults; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Only write the suite description and the warmed-up base.
    #[arg(long)]
    init_only: bool,
    /// Extra `key=value` benchmark settings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DeltaArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Defaults to the checkpoint's `task_id` metadata, then the file stem.
    #[arg(long)]
    id: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Divide each layer by its RMS and record the factors.
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OrthoArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = EPS_DROP)]
    eps_drop: f64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(required = true)]
    deltas: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct ReduceArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k: usize,
    /// Also store the principal directions here.
    #[arg(long)]
    subspace: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(required = true)]
    deltas: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct MergeArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    basis: PathBuf,
    #[arg(long, default_value = "mdm-state")]
    state: PathBuf,
    /// Per-member coefficient, `ID=VALUE`; repeatable.
    #[arg(long = "alpha", value_name = "ID=VALUE")]
    alpha: Vec<String>,
    #[arg(long, default_value_t = crate::merge::DEFAULT_ALPHA)]
    default_alpha: f64,
    #[arg(long, default_value = "cli")]
    operator: String,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct IntegrateArgs {
    #[command(flatten)]
    state: StateArgs,
    #[arg(long)]
    delta: PathBuf,
    #[arg(long, default_value_t = crate::merge::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long)]
    operator: Option<String>,
}

#[derive(Debug, Args)]
struct UnmergeArgs {
    #[command(flatten)]
    state: StateArgs,
    #[arg(long)]
    id: String,
    /// Delete the archived delta as well.
    #[arg(long)]
    purge: bool,
    #[arg(long)]
    operator: Option<String>,
}

#[derive(Debug, Args)]
struct ReweightArgs {
    #[command(flatten)]
    state: StateArgs,
    #[arg(long)]
    id: String,
    #[arg(long)]
    alpha: f64,
    #[arg(long)]
    operator: Option<String>,
}

#[derive(Debug, Args)]
struct OptimizeArgs {
    #[command(flatten)]
    state: StateArgs,
    /// Directory written by `mdm train`.
    #[arg(long)]
    suite: PathBuf,
    #[arg(long, default_value = "cmaes")]
    method: String,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    sigma0: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol_fitness: Option<f64>,
    /// Step size of the gradient method.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value = "none")]
    balancing: String,
    /// EWC strength; 0 disables the term.
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long, default_value_t = 200)]
    fisher_samples: usize,
    /// Replay samples per task; 0 disables the term.
    #[arg(long, default_value_t = 0)]
    replay_count: usize,
    #[arg(long, default_value_t = crate::stability::DEFAULT_REPLAY_SIGMA)]
    replay_sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    replay_weight: f64,
    /// Per-iteration CSV of best, mean and sigma.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Report the coefficients without changing the state.
    #[arg(long)]
    dry_run: bool,
    #[arg(long)]
    operator: Option<String>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[command(flatten)]
    state: StateArgs,
    /// Audit the removal of this model.
    #[arg(long)]
    removed: Option<String>,
    /// Expected admission hash of the removed delta (hex).
    #[arg(long, requires = "removed")]
    hash: Option<String>,
    #[arg(long, default_value_t = REPLAY_TOL)]
    tol: f64,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seeds; overrides `--seed`.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    sigma0: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    replay_count: Option<usize>,
    #[arg(long, default_value = "metrics.csv")]
    out: PathBuf,
    /// Extra `key=value` benchmark settings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_kv(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| MdmError::invalid(format!("expected KEY=VALUE, got `{s}`")))
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read(path)?).map_err(|_| MdmError::Format(format!("{}: not UTF-8", path.display())))
}

/// Folds a `--config` file into `argv`: every key that is not already given
/// as a flag is inserted right after the subcommand, either as `--key value`
/// or, for subcommands with `--set`, as `--set key=value`.
fn expand_config(argv: Vec<String>) -> Result<Vec<String>> {
    let Some(pos) = argv.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(argv);
    };
    let path = match argv[pos].strip_prefix("--config=") {
        Some(p) => p.to_string(),
        None => match argv.get(pos + 1) {
            Some(p) => p.clone(),
            // let clap report the missing value
            None => return Ok(argv),
        },
    };
    let root = Cli::command();
    let mut cmd = &root;
    let mut insert_at = 1;
    while let Some(sub) = argv.get(insert_at).and_then(|name| cmd.find_subcommand(name)) {
        cmd = sub;
        insert_at += 1;
    }
    let text = read_text(Path::new(&path))?;
    let given = |flag: &str| argv.iter().any(|a| a == flag || a.starts_with(&format!("{flag}=")));
    let given_set = |key: &str| {
        argv.windows(2)
            .any(|w| w[0] == "--set" && w[1].split_once('=').map(|(k, _)| k.trim()) == Some(key))
    };
    let has_set = cmd.get_arguments().any(|a| a.get_long() == Some("set"));
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| MdmError::invalid(format!("{path}:{}: expected key=value", n + 1)))?;
        let long = key.replace('_', "-");
        let flag = format!("--{long}");
        let arg = cmd.get_arguments().find(|a| a.get_long() == Some(long.as_str()) && long != "config");
        match arg {
            Some(_) if given(&flag) || given_set(key) => {}
            Some(a) if !a.get_action().takes_values() => match value {
                "true" => extra.push(flag),
                "false" => {}
                other => return Err(MdmError::invalid(format!("{path}: `{key}` expects true or false, got `{other}`"))),
            },
            Some(_) => {
                extra.push(flag);
                extra.push(value.to_string());
            }
            None if has_set => {
                if !given_set(key) {
                    extra.push("--set".into());
                    extra.push(format!("{key}={value}"));
                }
            }
            None => {
                return Err(MdmError::invalid(format!(
                    "{path}: `{key}` is not an option of `{}`",
                    cmd.get_name()
                )))
            }
        }
    }
    let mut out = argv;
    let tail = out.split_off(insert_at.min(out.len()));
    out.extend(extra);
    out.extend(tail);
    Ok(out)
}

fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| MdmError::invalid(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn exit_code(e: &MdmError) -> i32 {
    match e.class() {
        ErrorClass::Usage => EXIT_USAGE,
        ErrorClass::Validation => EXIT_VALIDATION,
        ErrorClass::Numerical => EXIT_NUMERICAL,
    }
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn run(argv: Vec<String>) -> i32 {
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Delta(a) => delta(a),
        Command::Ortho(a) => ortho(a),
        Command::Reduce(a) => reduce(a),
        Command::Merge(a) => merge(a),
        Command::Integrate(a) => integrate(a),
        Command::Unmerge(a) => unmerge(a),
        Command::Reweight(a) => reweight(a),
        Command::Optimize(a) => optimize(a),
        Command::Verify(a) => verify(a),
        Command::Bench(a) => bench(a),
        Command::Ledger {
            action: LedgerCommand::Show(a),
        } => {
            let state = MergeState::load(&a.state, a.recompute)?;
            print!("{}", state.ledger().to_text());
            Ok(())
        }
    }
}

fn load_params(path: &Path) -> Result<ParameterVector> {
    flatten(&load_checkpoint(path)?)
}

fn load_delta(path: &Path) -> Result<DeltaRecord> {
    DeltaRecord::from_checkpoint(&load_checkpoint(path)?)
}

fn load_deltas(paths: &[PathBuf]) -> Result<Vec<DeltaRecord>> {
    paths.iter().map(|p| load_delta(p)).collect()
}

fn open_state(a: &StateArgs, operator: Option<&str>) -> Result<MergeState> {
    let mut state = MergeState::load(&a.state, a.recompute)?;
    if let Some(op) = operator {
        state.set_operator(op);
    }
    Ok(state)
}

/// Settings that define a suite, in `key=value` form.
fn suite_text(cfg: &BenchConfig, seed: u64) -> String {
    format!(
        "tasks={}\nclasses={}\ndims={}\nfeature_stride={}\nseparation={:?}\nseed={seed}\n\
         epochs={}\nlr={:?}\nbatch_size={}\nweight_decay={:?}\nwarmup_epochs={}\nwarmup_lr={:?}\n",
        cfg.tasks,
        cfg.classes,
        cfg.dims,
        cfg.feature_stride,
        cfg.separation,
        cfg.train.epochs,
        cfg.train.lr,
        cfg.train.batch_size,
        cfg.train.weight_decay,
        cfg.warmup.epochs,
        cfg.warmup.lr,
    )
}

fn apply_sets(cfg: &mut BenchConfig, sets: &[String]) -> Result<()> {
    for s in sets {
        let (k, v) = parse_kv(s)?;
        cfg.set(k, v)?;
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = BenchConfig::default();
    apply_sets(&mut cfg, &a.set)?;
    if let Some(t) = a.tasks {
        cfg.tasks = t;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = resolve_seed(a.seed)? {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    let seed = cfg.seeds[0];
    let suite = build_suite(&cfg, seed)?;
    create_dir_all(&a.out)?;
    let base = warm_base(&suite, &cfg.warmup, seed)?;
    let widths: Vec<String> = suite.mlp.spec().widths.iter().map(|w| w.to_string()).collect();
    let mut ckpt = unflatten(&base)?;
    ckpt.set_meta("kind", "base");
    ckpt.set_meta("mlp_widths", widths.join(","));
    save_checkpoint(&ckpt, &a.out.join("base.mdmc"))?;
    println!("base {}", to_hex(base.content_hash()));
    if !a.init_only {
        for (i, task) in suite.tasks.iter().enumerate() {
            let (theta, report) =
                crate::bench::train_task(&suite.mlp, &base, task, &cfg.train, task_seed(seed, i) ^ 0x7EA1)?;
            let mut ckpt = unflatten(&theta)?;
            ckpt.set_meta("kind", "model");
            ckpt.set_meta("task_id", task.task_id.clone());
            ckpt.set_meta("mlp_widths", widths.join(","));
            save_checkpoint(&ckpt, &a.out.join(format!("{}.mdmc", task.task_id)))?;
            let last = report.losses.last().copied().unwrap_or(f64::NAN);
            println!("model {} train_loss={last:.6}", task.task_id);
        }
    }
    // written last: its presence marks a complete suite directory
    write_atomic(&a.out.join(SUITE_FILE), suite_text(&cfg, seed).as_bytes())
}

fn delta(a: DeltaArgs) -> Result<()> {
    let base = load_params(&a.base)?;
    let model_ckpt = load_checkpoint(&a.model)?;
    let id = match a.id {
        Some(id) => id,
        None => match model_ckpt.meta("task_id") {
            Some(t) => t.to_string(),
            None => a
                .model
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .ok_or_else(|| MdmError::invalid("cannot derive a model id; pass --id"))?,
        },
    };
    let model = flatten(&model_ckpt)?;
    let mut d = extract_delta(id, &model, &base)?;
    if a.normalize {
        d = normalize_delta(&d)?;
    }
    save_checkpoint(&d.to_checkpoint()?, &a.out)?;
    println!("delta {} norm={:.6e}", d.model_id, d.norm());
    Ok(())
}

fn report_basis(basis: &crate::orthogonal::OrthogonalBasis) -> Result<()> {
    for m in basis.members() {
        println!("member {} norm={:.6e}", m.model_id, m.norm());
    }
    for d in basis.dropped() {
        println!("dropped {} {}", d.model_id, d.reason);
    }
    let rep = orthogonality_check(basis);
    println!("max_abs_cosine {:.3e}", rep.max_abs_cosine);
    if rep.max_abs_cosine > TOL_ORTH {
        return Err(MdmError::Numerical(format!(
            "basis is not orthogonal: max |cos| {:.3e}",
            rep.max_abs_cosine
        )));
    }
    Ok(())
}

fn ortho(a: OrthoArgs) -> Result<()> {
    let deltas = load_deltas(&a.deltas)?;
    let basis = orthogonalize_sequence_with(&deltas, a.eps_drop)?;
    report_basis(&basis)?;
    save_basis(&basis, &a.out)
}

fn reduce(a: ReduceArgs) -> Result<()> {
    let deltas = load_deltas(&a.deltas)?;
    let sub = fit_basis(&deltas, a.k)?;
    let basis = reduced_orthogonalize_in(&deltas, &sub)?;
    println!("energy_fraction {:.6}", sub.energy_fraction());
    report_basis(&basis)?;
    if let Some(p) = &a.subspace {
        save_checkpoint(&sub.to_checkpoint()?, p)?;
    }
    save_basis(&basis, &a.out)
}

fn merge(a: MergeArgs) -> Result<()> {
    let base = load_params(&a.base)?;
    let basis = load_basis(&a.basis)?;
    let mut alphas: BTreeMap<String, f64> = basis.ids().map(|id| (id.to_string(), a.default_alpha)).collect();
    for s in &a.alpha {
        let (id, v) = parse_kv(s)?;
        let v: f64 = v
            .parse()
            .map_err(|_| MdmError::invalid(format!("bad alpha `{v}` for `{id}`")))?;
        match alphas.get_mut(id) {
            Some(slot) => *slot = v,
            None => return Err(MdmError::UnknownId(id.to_string())),
        }
    }
    let state = MergeState::merge(base, basis, &alphas, &a.operator)?;
    state.save(&a.state)?;
    println!("merged {} members into {}", alphas.len(), a.state.display());
    Ok(())
}

fn integrate(a: IntegrateArgs) -> Result<()> {
    let mut state = open_state(&a.state, a.operator.as_deref())?;
    let d = load_delta(&a.delta)?;
    let outcome = state.integrate(&d, a.alpha)?;
    state.save(&a.state.state)?;
    match outcome {
        IntegrateOutcome::Accepted { residual_norm, delta_hash } => {
            println!("integrated {} residual_norm={residual_norm:.6e} hash={}", d.model_id, to_hex(delta_hash))
        }
        IntegrateOutcome::Rejected { reason } => println!("rejected {} {reason}", d.model_id),
    }
    Ok(())
}

fn unmerge(a: UnmergeArgs) -> Result<()> {
    let mut state = open_state(&a.state, a.operator.as_deref())?;
    state.unmerge(&a.id, a.purge)?;
    state.save(&a.state.state)?;
    println!("unmerged {}{}", a.id, if a.purge { " (purged)" } else { "" });
    Ok(())
}

fn reweight(a: ReweightArgs) -> Result<()> {
    let mut state = open_state(&a.state, a.operator.as_deref())?;
    state.reweight(&a.id, a.alpha)?;
    state.save(&a.state.state)?;
    println!("reweighted {} alpha={:?}", a.id, a.alpha);
    Ok(())
}

fn load_suite_tasks(dir: &Path) -> Result<(Arc<crate::bench::Mlp>, Vec<Arc<TaskBundle>>, u64)> {
    let mut cfg = BenchConfig::default();
    cfg.apply_text(&read_text(&dir.join(SUITE_FILE))?)?;
    let seed = cfg.seeds[0];
    let suite = build_suite(&cfg, seed)?;
    Ok((suite.mlp, suite.tasks, seed))
}

fn optimize(a: OptimizeArgs) -> Result<()> {
    let method: Method = a.method.parse()?;
    let balancing = match a.balancing.as_str() {
        "none" => Balancing::None,
        "adaptive" => Balancing::Adaptive,
        other => return Err(MdmError::invalid(format!("unknown balancing `{other}`"))),
    };
    let mut state = open_state(&a.state, a.operator.as_deref())?;
    let (mlp, tasks, suite_seed) = load_suite_tasks(&a.suite)?;
    let seed = resolve_seed(a.seed)?.unwrap_or(0);

    let mut weighted = Vec::new();
    for m in state.basis().members() {
        let task = tasks
            .iter()
            .find(|t| t.task_id == m.model_id)
            .ok_or_else(|| MdmError::invalid(format!("member `{}` has no task in {}", m.model_id, a.suite.display())))?;
        weighted.push(WeightedTask {
            objective: Arc::new(MlpTaskObjective::validation(mlp.clone(), task.clone(), LossKind::CrossEntropy)),
            weight: 1.0,
        });
    }
    let mut spec = FitnessSpec::new(weighted);
    spec.balancing = balancing;

    let refs: Vec<&TaskBundle> = tasks.iter().map(|t| t.as_ref()).collect();
    let base = state.base().clone();
    let ewc = if a.lambda > 0.0 {
        let f = estimate_fisher_diag(&mlp, &base, &refs, a.fisher_samples, suite_seed ^ 0xF15E)?;
        Some(EwcPenalty::new(f, a.lambda)?)
    } else {
        None
    };
    let replay = if a.replay_count > 0 && a.replay_weight > 0.0 {
        Some(ReplayPenalty {
            mlp: mlp.clone(),
            replay: generate_replay(&mlp, &base, &refs, a.replay_count, a.replay_sigma, suite_seed ^ 0x5E9A)?,
            weight: a.replay_weight,
        })
    } else {
        None
    };

    let result = {
        let mut obj = MergeObjective::new(&spec, &state)?;
        if let Some(p) = &ewc {
            obj = obj.with_penalty(p as &dyn ParamPenalty);
        }
        if let Some(p) = &replay {
            obj = obj.with_penalty(p as &dyn ParamPenalty);
        }
        match method {
            Method::Cmaes => {
                let mut cfg = crate::optimize::CmaConfig { seed, ..Default::default() };
                if let Some(p) = a.population {
                    cfg.population = p;
                }
                if let Some(s) = a.sigma0 {
                    cfg.sigma0 = s;
                }
                if let Some(m) = a.max_iters {
                    cfg.max_iters = m;
                }
                if let Some(t) = a.tol_fitness {
                    cfg.tol_fitness = t;
                }
                optimize_cmaes_with(&mut obj, &cfg)?
            }
            Method::Grad => {
                let mut cfg = crate::optimize::GradConfig::default();
                if let Some(m) = a.max_iters {
                    cfg.max_epochs = m;
                }
                if let Some(lr) = a.lr {
                    cfg.lr = lr;
                }
                optimize_gradient_with(&mut obj, &cfg)?
            }
        }
    };
    if let Some(h) = &a.history {
        write_atomic(h, history_csv(&result.history).as_bytes())?;
    }
    let ids: Vec<String> = state.basis().ids().map(str::to_string).collect();
    for (id, alpha) in ids.iter().zip(&result.alphas) {
        println!("alpha {id} {alpha:?}");
    }
    println!("fitness {:?}", result.best);
    if !a.dry_run {
        state.reweight_all(&result.alphas)?;
        state.save(&a.state.state)?;
    }
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<()> {
    let state = MergeState::load(&a.state.state, a.state.recompute)?;
    state.check_replay(a.tol)?;
    println!("replay ok ({} members)", state.alphas().len());
    let rep = orthogonality_check(state.basis());
    println!("max_abs_cosine {:.3e}", rep.max_abs_cosine);
    if rep.max_abs_cosine > TOL_ORTH {
        return Err(MdmError::Numerical(format!(
            "members are not orthogonal: max |cos| {:.3e}",
            rep.max_abs_cosine
        )));
    }
    if let Some(id) = &a.removed {
        let expected = match &a.hash {
            Some(h) => from_hex(h).ok_or_else(|| MdmError::invalid(format!("bad hash `{h}`")))?,
            None => state
                .ledger()
                .entries()
                .iter()
                .rev()
                .find(|e| e.model_id.as_deref() == Some(id.as_str()) && e.action.admits() && !e.is_rejected())
                .and_then(|e| e.delta_hash)
                .ok_or_else(|| MdmError::MissingLedgerEntry(format!("`{id}` was never integrated")))?,
        };
        let r = state.verify_removal(id, expected)?;
        println!("removal of {id}: residual_cosine {:.3e}", r.residual_cosine);
        if !r.verified {
            return Err(MdmError::Format(format!("removal of `{id}` not verified: {}", r.reasons.join("; "))));
        }
        println!("removal verified");
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let mut cfg = BenchConfig::default();
    apply_sets(&mut cfg, &a.set)?;
    if let Some(t) = a.tasks {
        cfg.tasks = t;
    }
    if !a.seeds.is_empty() {
        cfg.seeds = a.seeds.clone();
    } else if let Some(s) = resolve_seed(a.seed)? {
        cfg.seeds = vec![s];
    }
    if let Some(m) = &a.method {
        cfg.method = m.parse()?;
    }
    if let Some(p) = a.population {
        cfg.cma.population = p;
    }
    if let Some(s) = a.sigma0 {
        cfg.cma.sigma0 = s;
    }
    if let Some(m) = a.max_iters {
        cfg.set("max_iters", &m.to_string())?;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    if let Some(r) = a.replay_count {
        cfg.replay_count = r;
    }
    let results = run_bench(&cfg)?;
    let csv = bench_csv(&results);
    debug_assert!(csv.starts_with(CSV_HEADER));
    write_atomic(&a.out, csv.as_bytes())?;
    for r in &results {
        for m in &r.methods {
            let uad = m.uad.map(|u| format!("{u:.4}")).unwrap_or_else(|| "-".into());
            let bwt = m.metrics.as_ref().map(|x| format!("{:.4}", x.bwt)).unwrap_or_else(|| "-".into());
            println!("seed {} {:<12} acc {:.4} bwt {bwt} uad {uad}", r.seed, m.name, m.acc);
        }
    }
    println!("wrote {}", a.out.display());
    Ok(())
}
