//! Command-line interface: subcommands for dataset production, training,
//! sweeps, and checkpoint reports; a flat `key = value` config file with
//! strict unknown-key checking and flag overrides; exit codes 0 (ok),
//! 1 (usage error), 2 (runtime failure).

use crate::diag::{self, DiagEngine};
use crate::error::{Error, Result};
use crate::modspace::{self, enumerate_examples, ModTask, Op, SplitSpec, SplitStrategy};
use crate::net::{load_checkpoint, Mode};
use crate::optim::{OptConfig, OptKind, RatioMode};
use crate::sampler::{BatchPlan, BatchStrategy};
use crate::svg;
use crate::trainer::{self, RunConfig, SweepAxis};
use clap::{Args, Parser, Subcommand};
use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Parser)]
#[command(
    name = "groklab",
    version,
    about = "Grokking laboratory: embedding MLPs on modular arithmetic",
    max_term_width = 100
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the dataset text file and a train/test split manifest
    Data(DataArgs),
    /// Train one model and write metrics, summary, curves, and a checkpoint
    Train(TrainArgs),
    /// Train across one parameter axis and several seeds
    Sweep(SweepArgs),
    /// Curvature report (lambda_max, sigma_max per block) for a checkpoint
    Diag(DiagArgs),
    /// DFT spectrum of a checkpoint's operand embedding rows
    Fft(FftArgs),
    /// Effective ranks of a checkpoint's E, W1, and their products
    Rank(RankArgs),
}

#[derive(Args)]
struct TaskArgs {
    /// Task operation: add | mul | div | sumsquares
    #[arg(long)]
    op: Option<String>,
    /// Prime modulus
    #[arg(long)]
    p: Option<u64>,
}

#[derive(Args)]
struct SplitArgs {
    /// Split strategy: random | uniform | skewed [default: random]
    #[arg(long)]
    strategy: Option<String>,
    /// Test fraction of all pairs [default: 0.2]
    #[arg(long)]
    test_frac: Option<f64>,
    /// Train fraction of all pairs [default: 0.3]
    #[arg(long)]
    train_frac: Option<f64>,
    /// Power-law exponent for the skewed strategy [default: 1.5]
    #[arg(long)]
    skew: Option<f64>,
}

#[derive(Args)]
struct ModelArgs {
    /// Embedding dimension [default: 128]
    #[arg(long)]
    d: Option<usize>,
    /// Hidden width [default: 4*d]
    #[arg(long)]
    hidden: Option<usize>,
    /// Multiplier on the standard-normal embedding init [default: 1]
    #[arg(long)]
    embed_scale: Option<f64>,
    /// Skip the embedding layer: feed the 4 token values directly
    #[arg(long)]
    no_embed: bool,
    /// No-embed mode: raw token values instead of values scaled by 1/V
    #[arg(long)]
    raw_inputs: bool,
}

#[derive(Args)]
struct OptArgs {
    /// Optimizer: sgd | adam | adam_lr [default: adam]
    #[arg(long)]
    opt: Option<String>,
    /// Learning rate [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// Weight decay [default: 0.001]
    #[arg(long)]
    wd: Option<f64>,
    /// Adam beta1 [default: 0.9]
    #[arg(long)]
    beta1: Option<f64>,
    /// Adam beta2 [default: 0.999]
    #[arg(long)]
    beta2: Option<f64>,
    /// Adam epsilon [default: 1e-8]
    #[arg(long)]
    adam_eps: Option<f64>,
    /// Adam-LR embedding learning-rate ratio c [default: 10]
    #[arg(long)]
    ratio: Option<f64>,
    /// Recompute c adaptively from sigma_max and update frequencies
    #[arg(long)]
    adaptive_ratio: bool,
    /// Fold weight decay into the gradient (classic L2) instead of the
    /// decoupled default
    #[arg(long)]
    coupled_decay: bool,
    /// Ablation: skip untouched embedding rows entirely (no decay, no
    /// moment drift)
    #[arg(long)]
    strict_sparse: bool,
}

#[derive(Args)]
struct BatchArgs {
    /// Batch size [default: 512]
    #[arg(long)]
    batch: Option<usize>,
    /// Batch strategy: random | uniform | skewed | frequency_aware
    /// [default: matches the split strategy]
    #[arg(long)]
    batch_strategy: Option<String>,
    /// Entropy-regularization strength for frequency_aware [default: 1]
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    /// Training epochs [default: 10000]
    #[arg(long)]
    epochs: Option<usize>,
    /// Evaluate on the full train and test sets every N epochs [default: 10]
    #[arg(long)]
    eval_every: Option<usize>,
    /// Curvature/rank/FFT diagnostics every N epochs; 0 disables
    /// [default: 0]
    #[arg(long)]
    diag_every: Option<usize>,
    /// Halt after t_gen plus 10% of the epoch budget
    #[arg(long)]
    early_stop: bool,
    /// Master seed for split, init, and batch order [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct IoArgs {
    /// Output root; falls back to $GROKLAB_OUT, then the current directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite an existing run directory
    #[arg(long)]
    force: bool,
    /// Flat key=value config file; flags override its entries
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    split: SplitArgs,
    /// Split seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    io: IoArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    opt: OptArgs,
    #[command(flatten)]
    batch: BatchArgs,
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    io: IoArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep axis: c | batch | lr | strategy
    #[arg(long)]
    axis: Option<String>,
    /// Comma-separated axis values (numbers, or strategy names for the
    /// strategy axis)
    #[arg(long)]
    values: Option<String>,
    /// Comma-separated seeds [default: 0,1,2]
    #[arg(long)]
    seeds: Option<String>,
    /// Concurrent runs [default: rayon's choice]
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    opt: OptArgs,
    #[command(flatten)]
    batch: BatchArgs,
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    io: IoArgs,
}

#[derive(Args)]
struct DiagArgs {
    /// Checkpoint to analyze
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    split: SplitArgs,
    /// Probe-batch seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    io: IoArgs,
}

#[derive(Args)]
struct FftArgs {
    /// Checkpoint to analyze
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    io: IoArgs,
}

#[derive(Args)]
struct RankArgs {
    /// Checkpoint to analyze
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    io: IoArgs,
}

/// A parsed flat config file. Every key must be consumed by the subcommand
/// that loaded it; leftovers are reported as unknown keys.
#[derive(Debug)]
pub struct ConfigMap {
    path: PathBuf,
    entries: BTreeMap<String, (usize, String)>,
    used: RefCell<BTreeSet<String>>,
}

impl ConfigMap {
    fn empty() -> Self {
        ConfigMap {
            path: PathBuf::new(),
            entries: BTreeMap::new(),
            used: RefCell::new(BTreeSet::new()),
        }
    }

    /// Typed lookup; marks the key as known even when absent.
    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.used.borrow_mut().insert(key.to_string());
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, raw)) => raw.parse().map(Some).map_err(|e| Error::ParseError {
                path: self.path.clone(),
                line: *line,
                what: format!("bad value '{raw}' for key '{key}': {e}"),
            }),
        }
    }

    /// Errors on any key the subcommand never looked up — typos must not
    /// pass silently.
    fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        for (key, (line, _)) in &self.entries {
            if !used.contains(key) {
                return Err(Error::InvalidConfig(format!(
                    "unknown config key '{key}' in {} line {line}",
                    self.path.display()
                )));
            }
        }
        Ok(())
    }
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are
/// skipped, duplicate keys are errors.
pub fn load_config(path: &Path) -> Result<ConfigMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = BTreeMap::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::ParseError {
                path: path.to_path_buf(),
                line: line_no,
                what: format!("expected 'key = value', got '{line}'"),
            });
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() || value.is_empty() {
            return Err(Error::ParseError {
                path: path.to_path_buf(),
                line: line_no,
                what: "empty key or value".into(),
            });
        }
        if entries.insert(key.clone(), (line_no, value)).is_some() {
            return Err(Error::ParseError {
                path: path.to_path_buf(),
                line: line_no,
                what: format!("duplicate key '{key}'"),
            });
        }
    }
    Ok(ConfigMap {
        path: path.to_path_buf(),
        entries,
        used: RefCell::new(BTreeSet::new()),
    })
}

fn load_config_opt(path: &Option<PathBuf>) -> Result<ConfigMap> {
    match path {
        Some(p) => load_config(p),
        None => Ok(ConfigMap::empty()),
    }
}

fn default_out() -> PathBuf {
    std::env::var_os("GROKLAB_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn resolve_out(io: &IoArgs, cfg: &ConfigMap) -> Result<PathBuf> {
    Ok(io
        .out
        .clone()
        .or(cfg.get::<PathBuf>("out")?)
        .unwrap_or_else(default_out))
}

fn resolve_force(io: &IoArgs, cfg: &ConfigMap) -> Result<bool> {
    Ok(io.force || cfg.get::<bool>("force")?.unwrap_or(false))
}

/// Refuses to reuse an existing run directory unless forced.
fn ensure_run_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && !force {
        return Err(Error::InvalidConfig(format!(
            "output directory {} already exists; pass --force to overwrite",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn resolve_task(args: &TaskArgs, cfg: &ConfigMap) -> Result<ModTask> {
    let op: Op = args
        .op
        .clone()
        .or(cfg.get("op")?)
        .ok_or_else(|| Error::InvalidConfig("missing --op (add|mul|div|sumsquares)".into()))?
        .parse()?;
    let p = args
        .p
        .or(cfg.get("p")?)
        .ok_or_else(|| Error::InvalidConfig("missing --p (prime modulus)".into()))?;
    ModTask::new(op, p)
}

fn resolve_seed(seed: &Option<u64>, cfg: &ConfigMap) -> Result<u64> {
    Ok(seed.or(cfg.get("seed")?).unwrap_or(0))
}

fn resolve_split(args: &SplitArgs, cfg: &ConfigMap, seed: u64) -> Result<SplitSpec> {
    let strategy: SplitStrategy = args
        .strategy
        .clone()
        .or(cfg.get("strategy")?)
        .map(|s: String| s.parse())
        .transpose()?
        .unwrap_or(SplitStrategy::Random);
    let spec = SplitSpec {
        strategy,
        test_frac: args.test_frac.or(cfg.get("test-frac")?).unwrap_or(0.2),
        train_frac_total: args.train_frac.or(cfg.get("train-frac")?).unwrap_or(0.30),
        skew_exponent: args.skew.or(cfg.get("skew")?).unwrap_or(1.5),
        seed,
    };
    spec.validate()?;
    Ok(spec)
}

fn resolve_run_config(
    task: &TaskArgs,
    split: &SplitArgs,
    model: &ModelArgs,
    opt: &OptArgs,
    batch: &BatchArgs,
    run: &RunArgs,
    cfg: &ConfigMap,
) -> Result<RunConfig> {
    let the_task = resolve_task(task, cfg)?;
    let seed = resolve_seed(&run.seed, cfg)?;
    let split_spec = resolve_split(split, cfg, seed)?;

    let d = model.d.or(cfg.get("d")?).unwrap_or(128);
    let h = model.hidden.or(cfg.get("hidden")?).unwrap_or(4 * d);
    let no_embed = model.no_embed || cfg.get::<bool>("no-embed")?.unwrap_or(false);

    let kind: OptKind = opt
        .opt
        .clone()
        .or(cfg.get("opt")?)
        .map(|s: String| s.parse())
        .transpose()?
        .unwrap_or(OptKind::Adam);
    let mut opt_config = OptConfig::new(kind, opt.lr.or(cfg.get("lr")?).unwrap_or(1e-3));
    opt_config.weight_decay = opt.wd.or(cfg.get("wd")?).unwrap_or(1e-3);
    opt_config.beta1 = opt.beta1.or(cfg.get("beta1")?).unwrap_or(0.9);
    opt_config.beta2 = opt.beta2.or(cfg.get("beta2")?).unwrap_or(0.999);
    opt_config.eps = opt.adam_eps.or(cfg.get("adam-eps")?).unwrap_or(1e-8);
    let adaptive = opt.adaptive_ratio || cfg.get::<bool>("adaptive-ratio")?.unwrap_or(false);
    opt_config.ratio = if adaptive {
        RatioMode::DEFAULT_ADAPTIVE
    } else {
        RatioMode::Fixed(opt.ratio.or(cfg.get("ratio")?).unwrap_or(10.0))
    };
    opt_config.coupled_decay =
        opt.coupled_decay || cfg.get::<bool>("coupled-decay")?.unwrap_or(false);
    opt_config.strict_sparse =
        opt.strict_sparse || cfg.get::<bool>("strict-sparse")?.unwrap_or(false);

    let batch_strategy: BatchStrategy = batch
        .batch_strategy
        .clone()
        .or(cfg.get("batch-strategy")?)
        .map(|s: String| s.parse())
        .transpose()?
        .unwrap_or(match split_spec.strategy {
            SplitStrategy::Random => BatchStrategy::Random,
            SplitStrategy::Uniform => BatchStrategy::Uniform,
            SplitStrategy::Skewed => BatchStrategy::Skewed,
        });
    let mut batch_plan = BatchPlan::new(
        batch_strategy,
        batch.batch.or(cfg.get("batch")?).unwrap_or(512),
        seed,
    );
    batch_plan.gamma = batch.gamma.or(cfg.get("gamma")?).unwrap_or(1.0);
    batch_plan.skew_exponent = split_spec.skew_exponent;

    let config = RunConfig {
        task: the_task,
        split_spec,
        batch_plan,
        mode: if no_embed { Mode::NoEmbed } else { Mode::WithEmbed },
        d,
        h,
        embed_scale: model.embed_scale.or(cfg.get("embed-scale")?).unwrap_or(1.0),
        raw_inputs: model.raw_inputs || cfg.get::<bool>("raw-inputs")?.unwrap_or(false),
        opt: opt_config,
        epochs: run.epochs.or(cfg.get("epochs")?).unwrap_or(10_000),
        eval_every: run.eval_every.or(cfg.get("eval-every")?).unwrap_or(10),
        diag_every: run.diag_every.or(cfg.get("diag-every")?).unwrap_or(0),
        early_stop: run.early_stop || cfg.get::<bool>("early-stop")?.unwrap_or(false),
        seed,
        out_dir: None,
    };
    config.validate()?;
    Ok(config)
}

/// Builds a full `RunConfig` from a config file alone (no flags) — the
/// entry point shared with the C ABI. The `out`/`force` keys name the
/// output root; `out_override` (when given) replaces the file's `out`.
/// Trains the run and returns its run directory.
pub fn train_from_config_file(config_path: &Path, out_override: Option<&Path>) -> Result<PathBuf> {
    let cfg = load_config(config_path)?;
    let task = TaskArgs { op: None, p: None };
    let split = SplitArgs {
        strategy: None,
        test_frac: None,
        train_frac: None,
        skew: None,
    };
    let model = ModelArgs {
        d: None,
        hidden: None,
        embed_scale: None,
        no_embed: false,
        raw_inputs: false,
    };
    let opt = OptArgs {
        opt: None,
        lr: None,
        wd: None,
        beta1: None,
        beta2: None,
        adam_eps: None,
        ratio: None,
        adaptive_ratio: false,
        coupled_decay: false,
        strict_sparse: false,
    };
    let batch = BatchArgs {
        batch: None,
        batch_strategy: None,
        gamma: None,
    };
    let run = RunArgs {
        epochs: None,
        eval_every: None,
        diag_every: None,
        early_stop: false,
        seed: None,
    };
    let mut config = resolve_run_config(&task, &split, &model, &opt, &batch, &run, &cfg)?;
    let out_root = match out_override {
        Some(p) => p.to_path_buf(),
        None => cfg.get::<PathBuf>("out")?.unwrap_or_else(default_out),
    };
    let force = cfg.get::<bool>("force")?.unwrap_or(false);
    cfg.finish()?;

    let dir = out_root.join(run_dir_name(&config));
    ensure_run_dir(&dir, force)?;
    config.out_dir = Some(dir.clone());
    trainer::train(&config)?;
    Ok(dir)
}

fn run_dir_name(config: &RunConfig) -> String {
    format!(
        "{}_p{}_{}_seed{}",
        config.task.op(),
        config.task.p(),
        config.opt.kind.name(),
        config.seed
    )
}

fn cmd_data(args: &DataArgs) -> Result<()> {
    let cfg = load_config_opt(&args.io.config)?;
    let task = resolve_task(&args.task, &cfg)?;
    let seed = resolve_seed(&args.seed, &cfg)?;
    let spec = resolve_split(&args.split, &cfg, seed)?;
    let out = resolve_out(&args.io, &cfg)?;
    let force = resolve_force(&args.io, &cfg)?;
    cfg.finish()?;

    let dir = out.join(format!(
        "{}_p{}_{}_seed{}_data",
        task.op(),
        task.p(),
        spec.strategy,
        seed
    ));
    ensure_run_dir(&dir, force)?;

    let examples = enumerate_examples(&task);
    let split = modspace::split(&examples, &spec)?;

    modspace::write_dataset_file(&dir.join("dataset.txt"), &task, &examples)?;
    let write_indices = |name: &str, indices: &[usize]| -> Result<()> {
        let body: String = indices.iter().map(|i| format!("{i}\n")).collect();
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
    };
    write_indices("train_indices.txt", &split.train_indices)?;
    write_indices("test_indices.txt", &split.test_indices)?;
    let mut freq_csv = String::from("token,freq\n");
    for (token, f) in split.token_freq.iter().enumerate() {
        freq_csv.push_str(&format!("{token},{f}\n"));
    }
    let freq_path = dir.join("token_freq.csv");
    std::fs::write(&freq_path, freq_csv).map_err(|e| Error::io(&freq_path, e))?;

    println!(
        "wrote {} (|train|={} |test|={})",
        dir.display(),
        split.train.len(),
        split.test.len()
    );
    Ok(())
}

fn print_grokking(g: &trainer::GrokkingMetrics) {
    let show = |v: Option<usize>| v.map_or("absent".to_string(), |t| t.to_string());
    println!(
        "grokking: t_fit={} t_gen={} delay={}",
        show(g.t_fit),
        show(g.t_gen),
        g.delay.map_or("absent".to_string(), |d| d.to_string())
    );
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = load_config_opt(&args.io.config)?;
    let mut config = resolve_run_config(
        &args.task, &args.split, &args.model, &args.opt, &args.batch, &args.run, &cfg,
    )?;
    let out = resolve_out(&args.io, &cfg)?;
    let force = resolve_force(&args.io, &cfg)?;
    cfg.finish()?;

    let dir = out.join(run_dir_name(&config));
    ensure_run_dir(&dir, force)?;
    config.out_dir = Some(dir.clone());

    let outcome = trainer::train(&config)?;
    let last = outcome.log.records.last().expect("at least the epoch-0 eval");
    println!("run dir: {}", dir.display());
    println!(
        "final: epoch={} train_acc={:.4} val_acc={:.4}",
        last.epoch, last.train_acc, last.val_acc
    );
    print_grokking(&outcome.log.grokking);
    Ok(())
}

fn parse_list<T: FromStr>(raw: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse().map_err(|e| {
                Error::InvalidConfig(format!("bad {what} value '{s}': {e}"))
            })
        })
        .collect()
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let cfg = load_config_opt(&args.io.config)?;
    let mut base = resolve_run_config(
        &args.task, &args.split, &args.model, &args.opt, &args.batch, &args.run, &cfg,
    )?;
    let out = resolve_out(&args.io, &cfg)?;
    let force = resolve_force(&args.io, &cfg)?;
    let axis_name: String = args
        .axis
        .clone()
        .or(cfg.get("axis")?)
        .ok_or_else(|| Error::InvalidConfig("missing --axis (c|batch|lr|strategy)".into()))?;
    let values: String = args
        .values
        .clone()
        .or(cfg.get("values")?)
        .ok_or_else(|| Error::InvalidConfig("missing --values (comma-separated)".into()))?;
    let seeds_raw: String = args
        .seeds
        .clone()
        .or(cfg.get("seeds")?)
        .unwrap_or_else(|| "0,1,2".to_string());
    let jobs = args.jobs.or(cfg.get("jobs")?);
    cfg.finish()?;

    let axis = match axis_name.as_str() {
        "c" => SweepAxis::Ratio(parse_list(&values, "c")?),
        "batch" => SweepAxis::BatchSize(parse_list(&values, "batch")?),
        "lr" => SweepAxis::Lr(parse_list(&values, "lr")?),
        "strategy" => SweepAxis::Strategy(parse_list(&values, "strategy")?),
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown axis '{other}' (expected c|batch|lr|strategy)"
            )))
        }
    };
    let seeds: Vec<u64> = parse_list(&seeds_raw, "seed")?;

    let dir = out.join(format!(
        "sweep_{}_{}_p{}_{}",
        axis.name(),
        base.task.op(),
        base.task.p(),
        base.opt.kind.name()
    ));
    ensure_run_dir(&dir, force)?;
    base.out_dir = Some(dir.clone());

    let result = match jobs {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::InvalidConfig(format!("cannot build thread pool: {e}")))?;
            pool.install(|| trainer::sweep(&base, &axis, &seeds))?
        }
        None => trainer::sweep(&base, &axis, &seeds)?,
    };

    println!("sweep dir: {}", dir.display());
    for agg in &result.aggregates {
        let cell = |v: Option<f64>| v.map_or("absent".to_string(), |x| format!("{x}"));
        println!(
            "{}={}: ok {}/{} t_fit~{} t_gen~{} final_val~{}",
            result.axis,
            agg.value,
            agg.ok,
            agg.total,
            cell(agg.t_fit_median),
            cell(agg.t_gen_median),
            cell(agg.final_val_median),
        );
    }
    Ok(())
}

fn cmd_diag(args: &DiagArgs) -> Result<()> {
    let cfg = load_config_opt(&args.io.config)?;
    let params = load_checkpoint(&args.ckpt)?;
    let p = params.config.p as u64;
    let op: Op = args
        .op_for_probe(&cfg)?
        .ok_or_else(|| Error::InvalidConfig("missing --op (needed to rebuild the probe batch)".into()))?;
    if let Some(flag_p) = args.task.p.or(cfg.get("p")?) {
        if flag_p != p {
            return Err(Error::InvalidConfig(format!(
                "--p {flag_p} disagrees with checkpoint modulus {p}"
            )));
        }
    }
    let seed = resolve_seed(&args.seed, &cfg)?;
    let spec = resolve_split(&args.split, &cfg, seed)?;
    let out = resolve_out(&args.io, &cfg)?;
    let _ = resolve_force(&args.io, &cfg)?;
    cfg.finish()?;

    let task = ModTask::new(op, p)?;
    let examples = enumerate_examples(&task);
    let split = modspace::split(&examples, &spec)?;
    let probe = diag::probe_batch(&split.test, diag::DEFAULT_PROBE_SIZE, seed);

    let mut engine = DiagEngine::new(seed);
    let report = engine.report(&params, &probe, 0)?;

    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let path = out.join("diag_report.csv");
    let mut buf = Vec::new();
    diag::write_diag_csv_header(&mut buf, params.config.p).map_err(|e| Error::io(&path, e))?;
    diag::append_diag_csv_row(&mut buf, &report).map_err(|e| Error::io(&path, e))?;
    std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;

    println!("checkpoint: {}", args.ckpt.display());
    println!(
        "lambda_max_E={:.6e} (residual {:.2e}, converged {})",
        report.lambda_max_e, report.lambda_e_residual, report.lambda_e_converged
    );
    println!(
        "lambda_max_W={:.6e} (residual {:.2e}, converged {})",
        report.lambda_max_w, report.lambda_w_residual, report.lambda_w_converged
    );
    println!(
        "sigma_max_E={:.6e} sigma_max_W={:.6e}",
        report.sigma_max_e, report.sigma_max_w
    );
    println!("report: {}", path.display());
    Ok(())
}

impl DiagArgs {
    fn op_for_probe(&self, cfg: &ConfigMap) -> Result<Option<Op>> {
        self.task
            .op
            .clone()
            .or(cfg.get("op")?)
            .map(|s: String| s.parse())
            .transpose()
    }
}

fn cmd_fft(args: &FftArgs) -> Result<()> {
    let cfg = load_config_opt(&args.io.config)?;
    let out = resolve_out(&args.io, &cfg)?;
    let _ = resolve_force(&args.io, &cfg)?;
    cfg.finish()?;

    let params = load_checkpoint(&args.ckpt)?;
    let e = params.e.as_ref().ok_or_else(|| {
        Error::InvalidConfig("checkpoint was trained without embeddings; no spectrum".into())
    })?;
    let spectrum = diag::fft_spectrum(e, params.config.p)?;

    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let csv_path = out.join("spectrum.csv");
    let mut csv = String::from("freq,norm\n");
    for (k, v) in spectrum.iter().enumerate() {
        csv.push_str(&format!("{k},{v}\n"));
    }
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let svg_path = out.join("spectrum.svg");
    svg::bar_chart(
        &svg_path,
        &format!("embedding DFT spectrum (p={})", params.config.p),
        "frequency",
        "norm",
        &spectrum,
    )?;

    let (peak, peak_v) = spectrum
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .expect("nonempty spectrum");
    println!("spectrum: {} and {}", csv_path.display(), svg_path.display());
    println!("dominant frequency {peak} (norm {peak_v:.6})");
    Ok(())
}

fn cmd_rank(args: &RankArgs) -> Result<()> {
    let cfg = load_config_opt(&args.io.config)?;
    let out = resolve_out(&args.io, &cfg)?;
    let _ = resolve_force(&args.io, &cfg)?;
    cfg.finish()?;

    let params = load_checkpoint(&args.ckpt)?;
    let e = params.e.as_ref().ok_or_else(|| {
        Error::InvalidConfig("checkpoint was trained without embeddings; no EW ranks".into())
    })?;
    let rel_tol = diag::DEFAULT_RANK_REL_TOL;
    let rank_e = diag::effective_rank(e, rel_tol);
    let rank_w = diag::effective_rank(&params.w1, rel_tol);
    let products = diag::product_ranks(e, &params.w1, rel_tol)?;

    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let path = out.join("rank.csv");
    let mut csv = String::from("matrix,rank\n");
    csv.push_str(&format!("E,{rank_e}\n"));
    csv.push_str(&format!("W1,{rank_w}\n"));
    for (j, r) in products.per_position.iter().enumerate() {
        csv.push_str(&format!("EW_pos{},{r}\n", j + 1));
    }
    csv.push_str(&format!("EW_combined,{}\n", products.combined));
    std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;

    print!("{csv}");
    println!("report: {}", path.display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Data(args) => cmd_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Diag(args) => cmd_diag(args),
        Command::Fft(args) => cmd_fft(args),
        Command::Rank(args) => cmd_rank(args),
    }
}

/// Parses arguments and runs the chosen subcommand, translating outcomes to
/// exit codes: 0 ok (including --help/--version), 1 usage error, 2 runtime
/// failure.
pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .try_init()
        .ok();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                1
            } else {
                2
            }
        }
    }
}
