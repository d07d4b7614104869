//! The training loop: deterministic epoch iteration with evaluation and
//! diagnostic cadences, grokking detection (t_fit / t_gen / delay), run
//! artifacts (metrics CSV, JSON summary, SVG curves, checkpoints), and
//! multi-seed parameter sweeps.

use crate::diag::{self, DiagEngine, DiagReport};
use crate::error::{Error, Result};
use crate::modspace::{self, enumerate_examples, ModTask, Split, SplitSpec, SplitStrategy};
use crate::net::{
    accuracy, backward, forward, init_params, mean_loss, save_checkpoint, Mode, MlpParams,
    NetConfig,
};
use crate::optim::{OptConfig, Optimizer, RatioMode};
use crate::sampler::{self, BatchPlan, BatchStrategy, BoundTracker};
use crate::svg::{self, Series};
use rayon::prelude::*;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Accuracy threshold for declaring a fit/generalization crossing.
pub const DEFAULT_TAU: f64 = 0.95;
/// Consecutive evaluations required to sustain a crossing.
pub const DEFAULT_SUSTAIN: usize = 3;
/// Sliding window (in touched steps) for gradient-norm bound tracking.
pub const BOUND_WINDOW: usize = 20;

/// Fixed header of the per-evaluation metrics CSV. Diagnostic columns are
/// empty at evaluations without diagnostics.
pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,val_acc,\
sigma_max_E,sigma_max_W,lambda_max_E,lambda_max_W,rank_EW,wall_ms";

/// Everything that defines one training run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub task: ModTask,
    pub split_spec: SplitSpec,
    pub batch_plan: BatchPlan,
    pub mode: Mode,
    /// Embedding dimension (ignored in no-embed mode).
    pub d: usize,
    /// Hidden width.
    pub h: usize,
    pub embed_scale: f64,
    /// No-embed mode: feed raw token values instead of values / V.
    pub raw_inputs: bool,
    pub opt: OptConfig,
    /// Passes over the train set; 0 performs only the epoch-0 evaluation.
    pub epochs: usize,
    pub eval_every: usize,
    /// Diagnostics cadence in epochs; 0 disables them. Must be a multiple
    /// of `eval_every` (diagnostics ride on evaluations) and requires the
    /// with-embedding mode.
    pub diag_every: usize,
    /// Halt once generalization is sustained, after t_gen plus 10% of the
    /// epoch budget — a sweep time saver, off for figure reproduction.
    pub early_stop: bool,
    pub seed: u64,
    /// Where run artifacts go; `None` keeps the run entirely in memory.
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Paper-default shape: d=128, h=4d, random split (30% of all pairs
    /// train, 20% test), random batches of 512, eval every 10 epochs.
    pub fn new(task: ModTask, opt: OptConfig, epochs: usize) -> Self {
        RunConfig {
            task,
            split_spec: SplitSpec::default(),
            batch_plan: BatchPlan::new(BatchStrategy::Random, 512, 0),
            mode: Mode::WithEmbed,
            d: 128,
            h: 512,
            embed_scale: 1.0,
            raw_inputs: false,
            opt,
            epochs,
            eval_every: 10,
            diag_every: 0,
            early_stop: false,
            seed: 0,
            out_dir: None,
        }
    }

    /// Sets the master seed and propagates it to the split and batch plan.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.split_spec.seed = seed;
        self.batch_plan.seed = seed;
        self
    }

    pub fn net_config(&self) -> NetConfig {
        let p = self.task.p() as usize;
        let mut cfg = match self.mode {
            Mode::WithEmbed => NetConfig::with_embed(p, self.d, self.h),
            Mode::NoEmbed => NetConfig::no_embed(p, self.h),
        };
        cfg.embed_scale = self.embed_scale;
        cfg.raw_inputs = self.raw_inputs;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.split_spec.validate()?;
        self.batch_plan.validate()?;
        self.net_config().validate()?;
        self.opt.validate()?;
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval_every must be >= 1".into()));
        }
        if self.diag_every > 0 {
            if self.diag_every % self.eval_every != 0 {
                return Err(Error::InvalidConfig(format!(
                    "diag_every ({}) must be a multiple of eval_every ({})",
                    self.diag_every, self.eval_every
                )));
            }
            if self.mode != Mode::WithEmbed {
                return Err(Error::InvalidConfig(
                    "diagnostics require the with-embedding mode".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Diagnostic summary columns of one metrics-CSV row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagSummary {
    pub sigma_max_e: f64,
    pub sigma_max_w: f64,
    pub lambda_max_e: f64,
    pub lambda_max_w: f64,
    pub rank_ew: usize,
}

/// One full-set evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub wall_ms: f64,
    pub diag: Option<DiagSummary>,
}

/// Threshold-crossing epochs. `delay = t_gen − t_fit` when both exist; it
/// can be negative when validation crosses first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GrokkingMetrics {
    pub t_fit: Option<usize>,
    pub t_gen: Option<usize>,
    pub delay: Option<i64>,
}

#[derive(Debug, Clone)]
pub struct TrainLog {
    pub records: Vec<EvalRecord>,
    pub diag_reports: Vec<DiagReport>,
    pub grokking: GrokkingMetrics,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub params: MlpParams,
    /// Artifacts written under `out_dir`, in creation order.
    pub files: Vec<PathBuf>,
}

/// First epoch at which `pred` holds for `sustain` consecutive evaluations.
fn first_sustained(
    records: &[EvalRecord],
    sustain: usize,
    pred: impl Fn(&EvalRecord) -> bool,
) -> Option<usize> {
    records
        .windows(sustain)
        .find(|w| w.iter().all(&pred))
        .map(|w| w[0].epoch)
}

/// Sustained-crossing epochs for train and validation accuracy. Pure and
/// total over arbitrary logs.
pub fn grokking_metrics(records: &[EvalRecord], tau: f64, sustain: usize) -> GrokkingMetrics {
    assert!(tau > 0.0 && tau <= 1.0, "tau must be in (0,1], got {tau}");
    assert!(sustain >= 1, "sustain must be >= 1");
    let t_fit = first_sustained(records, sustain, |r| r.train_acc >= tau);
    let t_gen = first_sustained(records, sustain, |r| r.val_acc >= tau);
    let delay = match (t_fit, t_gen) {
        (Some(f), Some(g)) => Some(g as i64 - f as i64),
        _ => None,
    };
    GrokkingMetrics { t_fit, t_gen, delay }
}

/// Loss and accuracy on the full train set plus accuracy on the full test
/// set. Borrowed immutably: evaluation cannot mutate parameters.
pub fn evaluate(params: &MlpParams, split: &Split) -> Result<(f64, f64, f64)> {
    let train_loss = mean_loss(params, &split.train)?;
    let train_acc = accuracy(params, &split.train)?;
    let val_acc = accuracy(params, &split.test)?;
    Ok((train_loss, train_acc, val_acc))
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn write_metrics_row(w: &mut impl Write, r: &EvalRecord) -> std::io::Result<()> {
    let (se, sw, le, lw, rk) = match &r.diag {
        Some(d) => (
            fmt(d.sigma_max_e),
            fmt(d.sigma_max_w),
            fmt(d.lambda_max_e),
            fmt(d.lambda_max_w),
            d.rank_ew.to_string(),
        ),
        None => Default::default(),
    };
    writeln!(
        w,
        "{},{},{},{},{se},{sw},{le},{lw},{rk},{}",
        r.epoch,
        fmt(r.train_loss),
        fmt(r.train_acc),
        fmt(r.val_acc),
        fmt(r.wall_ms)
    )
}

/// Long-format per-token sampling stats for frequency-aware runs: one row
/// per token per evaluation epoch.
fn write_token_stats(
    w: &mut impl Write,
    epoch: usize,
    freq: &[u64],
    bounds: Option<&[f64]>,
    gamma: f64,
) -> Result<()> {
    let p_star = match bounds {
        Some(b) => sampler::solve_entropy_probs(b, gamma)?,
        None => vec![1.0 / freq.len() as f64; freq.len()],
    };
    for (i, (&f, p)) in freq.iter().zip(&p_star).enumerate() {
        let bound = bounds.map(|b| fmt(b[i])).unwrap_or_default();
        writeln!(w, "{epoch},{i},{f},{bound},{}", fmt(*p)).map_err(|e| Error::Io {
            path: "token_stats.csv".into(),
            source: e,
        })?;
    }
    Ok(())
}

struct RunWriters {
    metrics: Option<BufWriter<File>>,
    diag: Option<BufWriter<File>>,
    tokens: Option<BufWriter<File>>,
}

impl RunWriters {
    fn flush(&mut self) -> Result<()> {
        for w in [&mut self.metrics, &mut self.diag, &mut self.tokens]
            .into_iter()
            .flatten()
        {
            w.flush().map_err(|e| Error::Io {
                path: "run output".into(),
                source: e,
            })?;
        }
        Ok(())
    }
}

fn create_csv(dir: &Path, name: &str, header: &str, files: &mut Vec<PathBuf>) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "{header}").map_err(|e| Error::io(&path, e))?;
    files.push(path);
    Ok(w)
}

/// Runs one training job end to end. Deterministic given the config: one
/// thread applies updates in batch order. On a non-finite loss the run
/// aborts, flushes all logs, and the error names the last good epoch.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let start = Instant::now();

    let all = enumerate_examples(&config.task);
    let split = modspace::split(&all, &config.split_spec)?;
    if config.batch_plan.batch_size > split.train.len() {
        return Err(Error::InvalidConfig(format!(
            "batch size {} exceeds train set size {}",
            config.batch_plan.batch_size,
            split.train.len()
        )));
    }
    let net_cfg = config.net_config();
    let mut params = init_params(&net_cfg, config.seed)?;
    let mut opt = Optimizer::new(config.opt, &params)?;
    let mut plan = config.batch_plan.clone();
    let mut tracker = (plan.strategy == BatchStrategy::FrequencyAware)
        .then(|| BoundTracker::new(net_cfg.vocab, BOUND_WINDOW));
    let mut diag_state = (config.diag_every > 0).then(|| {
        (
            DiagEngine::new(config.seed),
            diag::probe_batch(&split.test, diag::DEFAULT_PROBE_SIZE, config.seed),
        )
    });

    let mut files = Vec::new();
    let mut writers = match &config.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let metrics = create_csv(dir, "metrics.csv", METRICS_HEADER, &mut files)?;
            let diag_w = if config.diag_every > 0 {
                let path = dir.join("diag.csv");
                let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
                let mut w = BufWriter::new(f);
                diag::write_diag_csv_header(&mut w, config.task.p() as usize)
                    .map_err(|e| Error::io(&path, e))?;
                files.push(path);
                Some(w)
            } else {
                None
            };
            let tokens = if tracker.is_some() {
                Some(create_csv(
                    dir,
                    "token_stats.csv",
                    "epoch,token,freq,bound,p_star",
                    &mut files,
                )?)
            } else {
                None
            };
            RunWriters {
                metrics: Some(metrics),
                diag: diag_w,
                tokens,
            }
        }
        None => RunWriters {
            metrics: None,
            diag: None,
            tokens: None,
        },
    };

    let mut records: Vec<EvalRecord> = Vec::new();
    let mut diag_reports: Vec<DiagReport> = Vec::new();
    // (last epoch with flushed logs, error) when training blew up.
    let mut aborted: Option<(usize, Error)> = None;

    macro_rules! run_eval {
        ($epoch:expr) => {{
            let epoch = $epoch;
            match evaluate(&params, &split) {
                Ok((train_loss, train_acc, val_acc)) => {
                    let diag_due = config.diag_every > 0
                        && (epoch % config.diag_every == 0 || epoch == config.epochs);
                    let mut summary = None;
                    if diag_due {
                        let (engine, probe) = diag_state.as_mut().expect("diag enabled");
                        match engine.report(&params, probe, epoch) {
                            Ok(report) => {
                                summary = Some(DiagSummary {
                                    sigma_max_e: report.sigma_max_e,
                                    sigma_max_w: report.sigma_max_w,
                                    lambda_max_e: report.lambda_max_e,
                                    lambda_max_w: report.lambda_max_w,
                                    rank_ew: report.rank_ew,
                                });
                                if let Some(w) = &mut writers.diag {
                                    diag::append_diag_csv_row(w, &report)
                                        .map_err(|e| Error::io("diag.csv", e))?;
                                }
                                diag_reports.push(report);
                            }
                            Err(e) => {
                                aborted.get_or_insert((
                                    records.last().map_or(0, |r| r.epoch),
                                    e,
                                ));
                            }
                        }
                    }
                    let record = EvalRecord {
                        epoch,
                        train_loss,
                        train_acc,
                        val_acc,
                        wall_ms: start.elapsed().as_secs_f64() * 1e3,
                        diag: summary,
                    };
                    if let Some(w) = &mut writers.metrics {
                        write_metrics_row(w, &record).map_err(|e| Error::io("metrics.csv", e))?;
                    }
                    if let Some(w) = &mut writers.tokens {
                        write_token_stats(w, epoch, &split.token_freq, plan.bounds.as_deref(), plan.gamma)?;
                    }
                    writers.flush()?;
                    records.push(record);
                    true
                }
                Err(e) => {
                    aborted.get_or_insert((records.last().map_or(0, |r| r.epoch), e));
                    false
                }
            }
        }};
    }

    run_eval!(0);

    if aborted.is_none() {
        'epochs: for epoch in 1..=config.epochs {
            if let Some(tr) = &tracker {
                plan.bounds = Some(tr.estimates());
            }
            let batches = sampler::make_batches(&split.train, &plan, epoch as u64)?;
            for batch in &batches {
                let step = (|| -> Result<()> {
                    let (_, cache) = forward(&params, batch)?;
                    let grads = backward(&params, batch, &cache);
                    if let Some(tr) = &mut tracker {
                        tr.observe_grads(&grads);
                    }
                    opt.step(&mut params, &grads)
                })();
                if let Err(e) = step {
                    aborted = Some((records.last().map_or(0, |r| r.epoch), e));
                    break 'epochs;
                }
            }
            if epoch % config.eval_every == 0 || epoch == config.epochs {
                if !run_eval!(epoch) {
                    break 'epochs;
                }
                if config.early_stop {
                    let g = grokking_metrics(&records, DEFAULT_TAU, DEFAULT_SUSTAIN);
                    if let Some(t_gen) = g.t_gen {
                        if epoch >= t_gen + (config.epochs / 10).max(1) {
                            break 'epochs;
                        }
                    }
                }
            }
        }
    }

    writers.flush()?;
    drop(writers);

    let grokking = grokking_metrics(&records, DEFAULT_TAU, DEFAULT_SUSTAIN);
    if let Some(dir) = &config.out_dir {
        if aborted.is_none() {
            let ckpt = dir.join("checkpoint.bin");
            save_checkpoint(&params, &ckpt)?;
            files.push(ckpt);
            let opt_state = dir.join("opt_state.bin");
            opt.save_state(&opt_state)?;
            files.push(opt_state);
        }
        // Accuracy curves on a log-epoch axis; epoch 0 cannot sit on a log
        // scale, so the curves start at the first post-init evaluation.
        let pts: Vec<&EvalRecord> = records.iter().filter(|r| r.epoch >= 1).collect();
        if !pts.is_empty() {
            let curve = |f: fn(&EvalRecord) -> f64| {
                pts.iter().map(|r| (r.epoch as f64, f(r))).collect::<Vec<_>>()
            };
            let svg_path = dir.join("curves.svg");
            svg::line_chart(
                &svg_path,
                &format!(
                    "{} mod {} — {}",
                    config.task.op(),
                    config.task.p(),
                    config.opt.kind.name()
                ),
                "epoch",
                "accuracy",
                &[
                    Series::new("train", curve(|r| r.train_acc)),
                    Series::new("val", curve(|r| r.val_acc)),
                ],
                true,
            )?;
            files.push(svg_path);
        }
        let summary_path = dir.join("summary.json");
        write_summary(&summary_path, config, &records, &grokking, &aborted, &files)?;
        files.push(summary_path);
    }

    if let Some((last_good, e)) = aborted {
        return Err(Error::NonFinite {
            context: format!("training aborted ({e}); logs flushed through epoch {last_good}"),
        });
    }
    Ok(TrainOutcome {
        log: TrainLog {
            records,
            diag_reports,
            grokking,
        },
        params,
        files,
    })
}

fn ratio_json(ratio: &RatioMode) -> serde_json::Value {
    match ratio {
        RatioMode::Fixed(c) => serde_json::json!({ "fixed": c }),
        RatioMode::Adaptive {
            recompute_every,
            c_min,
            c_max,
        } => serde_json::json!({
            "adaptive": { "recompute_every": recompute_every, "c_min": c_min, "c_max": c_max }
        }),
    }
}

fn write_summary(
    path: &Path,
    config: &RunConfig,
    records: &[EvalRecord],
    grokking: &GrokkingMetrics,
    aborted: &Option<(usize, Error)>,
    files: &[PathBuf],
) -> Result<()> {
    let last = records.last();
    let summary = serde_json::json!({
        "config": {
            "op": config.task.op().name(),
            "p": config.task.p(),
            "split": {
                "strategy": config.split_spec.strategy.name(),
                "test_frac": config.split_spec.test_frac,
                "train_frac_total": config.split_spec.train_frac_total,
                "skew_exponent": config.split_spec.skew_exponent,
            },
            "batch": {
                "strategy": config.batch_plan.strategy.name(),
                "batch_size": config.batch_plan.batch_size,
                "gamma": config.batch_plan.gamma,
                "skew_exponent": config.batch_plan.skew_exponent,
            },
            "model": {
                "mode": config.mode.name(),
                "d": config.d,
                "h": config.h,
                "embed_scale": config.embed_scale,
                "raw_inputs": config.raw_inputs,
            },
            "opt": {
                "kind": config.opt.kind.name(),
                "lr": config.opt.lr,
                "weight_decay": config.opt.weight_decay,
                "beta1": config.opt.beta1,
                "beta2": config.opt.beta2,
                "eps": config.opt.eps,
                "ratio": ratio_json(&config.opt.ratio),
                "coupled_decay": config.opt.coupled_decay,
                "strict_sparse": config.opt.strict_sparse,
            },
            "epochs": config.epochs,
            "eval_every": config.eval_every,
            "diag_every": config.diag_every,
            "early_stop": config.early_stop,
            "seed": config.seed,
        },
        "result": {
            "final_epoch": last.map(|r| r.epoch),
            "final_train_loss": last.map(|r| r.train_loss),
            "final_train_acc": last.map(|r| r.train_acc),
            "final_val_acc": last.map(|r| r.val_acc),
            "grokking": {
                "t_fit": grokking.t_fit,
                "t_gen": grokking.t_gen,
                "delay": grokking.delay,
            },
            "aborted": aborted.as_ref().map(|(epoch, e)| {
                serde_json::json!({ "last_good_epoch": epoch, "error": e.to_string() })
            }),
        },
        "files": files
            .iter()
            .filter_map(|f| f.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect::<Vec<_>>(),
    });
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::InvalidConfig(format!("summary serialization failed: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One parameter axis of a sweep.
#[derive(Debug, Clone)]
pub enum SweepAxis {
    /// Adam-LR embedding learning-rate ratio (fixed mode).
    Ratio(Vec<f64>),
    BatchSize(Vec<usize>),
    Lr(Vec<f64>),
    /// Split strategy, with the batch strategy paired to match.
    Strategy(Vec<SplitStrategy>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Ratio(_) => "c",
            SweepAxis::BatchSize(_) => "batch",
            SweepAxis::Lr(_) => "lr",
            SweepAxis::Strategy(_) => "strategy",
        }
    }

    pub fn labels(&self) -> Vec<String> {
        match self {
            SweepAxis::Ratio(v) => v.iter().map(|c| fmt(*c)).collect(),
            SweepAxis::BatchSize(v) => v.iter().map(|b| b.to_string()).collect(),
            SweepAxis::Lr(v) => v.iter().map(|l| fmt(*l)).collect(),
            SweepAxis::Strategy(v) => v.iter().map(|s| s.name().to_string()).collect(),
        }
    }

    fn apply(&self, idx: usize, config: &mut RunConfig) {
        match self {
            SweepAxis::Ratio(v) => config.opt.ratio = RatioMode::Fixed(v[idx]),
            SweepAxis::BatchSize(v) => config.batch_plan.batch_size = v[idx],
            SweepAxis::Lr(v) => config.opt.lr = v[idx],
            SweepAxis::Strategy(v) => {
                config.split_spec.strategy = v[idx];
                config.batch_plan.strategy = match v[idx] {
                    SplitStrategy::Random => BatchStrategy::Random,
                    SplitStrategy::Uniform => BatchStrategy::Uniform,
                    SplitStrategy::Skewed => BatchStrategy::Skewed,
                };
            }
        }
    }

    fn len(&self) -> usize {
        match self {
            SweepAxis::Ratio(v) => v.len(),
            SweepAxis::BatchSize(v) => v.len(),
            SweepAxis::Lr(v) => v.len(),
            SweepAxis::Strategy(v) => v.len(),
        }
    }
}

/// Per-run results kept by a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RunStats {
    pub t_fit: Option<usize>,
    pub t_gen: Option<usize>,
    pub delay: Option<i64>,
    pub final_train_acc: f64,
    pub final_val_acc: f64,
    pub final_epoch: usize,
}

impl RunStats {
    pub fn of(log: &TrainLog) -> Self {
        let last = log.records.last();
        RunStats {
            t_fit: log.grokking.t_fit,
            t_gen: log.grokking.t_gen,
            delay: log.grokking.delay,
            final_train_acc: last.map_or(0.0, |r| r.train_acc),
            final_val_acc: last.map_or(0.0, |r| r.val_acc),
            final_epoch: last.map_or(0, |r| r.epoch),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepRun {
    pub value: String,
    pub seed: u64,
    /// `Err` carries the failed run's error text; failures never abort the
    /// sweep.
    pub outcome: std::result::Result<RunStats, String>,
}

/// One aggregate row per axis value: medians plus min/max of the crossing
/// epochs over the successful runs that reached them.
#[derive(Debug, Clone)]
pub struct SweepAggregate {
    pub value: String,
    pub ok: usize,
    pub total: usize,
    pub t_fit_median: Option<f64>,
    pub t_gen_median: Option<f64>,
    pub delay_median: Option<f64>,
    pub final_train_median: Option<f64>,
    pub final_val_median: Option<f64>,
    pub t_fit_min: Option<f64>,
    pub t_fit_max: Option<f64>,
    pub t_gen_min: Option<f64>,
    pub t_gen_max: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub axis: String,
    pub runs: Vec<SweepRun>,
    pub aggregates: Vec<SweepAggregate>,
    pub csv_path: Option<PathBuf>,
}

fn median_of(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

/// Runs `train` over every (axis value, seed) pair — concurrently, since
/// runs share nothing — and aggregates crossing epochs per value. Writes
/// `sweep.csv` under the base out_dir when one is set.
pub fn sweep(base: &RunConfig, axis: &SweepAxis, seeds: &[u64]) -> Result<SweepResult> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one seed".into()));
    }
    if axis.len() == 0 {
        return Err(Error::InvalidConfig("sweep needs at least one axis value".into()));
    }
    let labels = axis.labels();
    let mut jobs: Vec<(String, u64, RunConfig)> = Vec::new();
    for (idx, label) in labels.iter().enumerate() {
        for &seed in seeds {
            let mut cfg = base.clone().with_seed(seed);
            axis.apply(idx, &mut cfg);
            cfg.out_dir = base
                .out_dir
                .as_ref()
                .map(|d| d.join(format!("{}_{}", axis.name(), label)).join(format!("seed{seed}")));
            jobs.push((label.clone(), seed, cfg));
        }
    }

    let runs: Vec<SweepRun> = jobs
        .into_par_iter()
        .map(|(value, seed, cfg)| {
            let outcome = match train(&cfg) {
                Ok(o) => Ok(RunStats::of(&o.log)),
                Err(e) => Err(e.to_string()),
            };
            SweepRun { value, seed, outcome }
        })
        .collect();

    let aggregates: Vec<SweepAggregate> = labels
        .iter()
        .map(|label| {
            let group: Vec<&SweepRun> = runs.iter().filter(|r| &r.value == label).collect();
            let ok_stats: Vec<&RunStats> =
                group.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
            let gather = |f: fn(&RunStats) -> Option<f64>| -> Vec<f64> {
                ok_stats.iter().filter_map(|s| f(s)).collect()
            };
            let t_fits = gather(|s| s.t_fit.map(|t| t as f64));
            let t_gens = gather(|s| s.t_gen.map(|t| t as f64));
            let delays = gather(|s| s.delay.map(|d| d as f64));
            let trains: Vec<f64> = ok_stats.iter().map(|s| s.final_train_acc).collect();
            let vals: Vec<f64> = ok_stats.iter().map(|s| s.final_val_acc).collect();
            SweepAggregate {
                value: label.clone(),
                ok: ok_stats.len(),
                total: group.len(),
                t_fit_median: median_of(&t_fits),
                t_gen_median: median_of(&t_gens),
                delay_median: median_of(&delays),
                final_train_median: median_of(&trains),
                final_val_median: median_of(&vals),
                t_fit_min: t_fits.iter().cloned().reduce(f64::min),
                t_fit_max: t_fits.iter().cloned().reduce(f64::max),
                t_gen_min: t_gens.iter().cloned().reduce(f64::min),
                t_gen_max: t_gens.iter().cloned().reduce(f64::max),
            }
        })
        .collect();

    let csv_path = match &base.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("sweep.csv");
            let mut out = String::from(
                "axis,value,seed,status,t_fit,t_gen,delay,final_train_acc,final_val_acc,\
                 t_fit_min,t_fit_max,t_gen_min,t_gen_max\n",
            );
            for r in &runs {
                match &r.outcome {
                    Ok(s) => {
                        out.push_str(&format!(
                            "{},{},{},ok,{},{},{},{},{},,,,\n",
                            axis.name(),
                            r.value,
                            r.seed,
                            s.t_fit.map(|t| t.to_string()).unwrap_or_default(),
                            s.t_gen.map(|t| t.to_string()).unwrap_or_default(),
                            s.delay.map(|d| d.to_string()).unwrap_or_default(),
                            fmt(s.final_train_acc),
                            fmt(s.final_val_acc),
                        ));
                    }
                    Err(e) => {
                        let clean = e.replace([',', '\n'], ";");
                        out.push_str(&format!(
                            "{},{},{},error:{clean},,,,,,,,,\n",
                            axis.name(),
                            r.value,
                            r.seed,
                        ));
                    }
                }
            }
            for a in &aggregates {
                out.push_str(&format!(
                    "{},{},aggregate,ok:{}/{},{},{},{},{},{},{},{},{},{}\n",
                    axis.name(),
                    a.value,
                    a.ok,
                    a.total,
                    opt_cell(a.t_fit_median),
                    opt_cell(a.t_gen_median),
                    opt_cell(a.delay_median),
                    opt_cell(a.final_train_median),
                    opt_cell(a.final_val_median),
                    opt_cell(a.t_fit_min),
                    opt_cell(a.t_fit_max),
                    opt_cell(a.t_gen_min),
                    opt_cell(a.t_gen_max),
                ));
            }
            std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
            Some(path)
        }
        None => None,
    };

    Ok(SweepResult {
        axis: axis.name().to_string(),
        runs,
        aggregates,
        csv_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modspace::Op;
    use crate::optim::OptKind;
    use proptest::prelude::*;

    fn rec(epoch: usize, train_acc: f64, val_acc: f64) -> EvalRecord {
        EvalRecord {
            epoch,
            train_loss: 1.0 - train_acc,
            train_acc,
            val_acc,
            wall_ms: 0.0,
            diag: None,
        }
    }

    fn small_config(op: Op, p: u64, opt: OptConfig, epochs: usize) -> RunConfig {
        let task = ModTask::new(op, p).unwrap();
        let mut cfg = RunConfig::new(task, opt, epochs);
        cfg.d = 16;
        cfg.h = 64;
        cfg.batch_plan.batch_size = 8;
        cfg.eval_every = 5;
        cfg
    }

    #[test]
    fn grokking_simultaneous_crossing() {
        let records: Vec<EvalRecord> = (0..=10)
            .map(|i| {
                let acc = if i >= 5 { 1.0 } else { 0.3 };
                rec(i * 10, acc, acc)
            })
            .collect();
        let g = grokking_metrics(&records, 0.95, 3);
        assert_eq!(g.t_fit, Some(50));
        assert_eq!(g.t_gen, Some(50));
        assert_eq!(g.delay, Some(0));
    }

    #[test]
    fn grokking_synthetic_delay_800() {
        let records: Vec<EvalRecord> = (0..=15)
            .map(|i| {
                let e = i * 100;
                rec(
                    e,
                    if e >= 100 { 1.0 } else { 0.5 },
                    if e >= 900 { 0.99 } else { 0.1 },
                )
            })
            .collect();
        let g = grokking_metrics(&records, 0.95, 3);
        assert_eq!(g.t_fit, Some(100));
        assert_eq!(g.t_gen, Some(900));
        assert_eq!(g.delay, Some(800));
    }

    #[test]
    fn grokking_no_generalization() {
        let records: Vec<EvalRecord> = (0..=10).map(|i| rec(i * 10, 1.0, 0.4)).collect();
        let g = grokking_metrics(&records, 0.95, 3);
        assert_eq!(g.t_fit, Some(0));
        assert_eq!(g.t_gen, None);
        assert_eq!(g.delay, None);
    }

    #[test]
    fn grokking_requires_sustained_crossing() {
        // A single-eval blip must not count with sustain 3.
        let mut records: Vec<EvalRecord> = (0..10).map(|i| rec(i * 10, 0.5, 0.5)).collect();
        records[4].val_acc = 1.0;
        let g = grokking_metrics(&records, 0.95, 3);
        assert_eq!(g.t_gen, None);
        // A trailing run shorter than the sustain window also must not.
        records[8].val_acc = 1.0;
        records[9].val_acc = 1.0;
        let g = grokking_metrics(&records, 0.95, 3);
        assert_eq!(g.t_gen, None);
    }

    proptest! {
        #[test]
        fn grokking_total_and_selfconsistent(
            accs in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 0..40),
            tau in 0.05f64..=1.0,
            sustain in 1usize..4,
        ) {
            let records: Vec<EvalRecord> = accs
                .iter()
                .enumerate()
                .map(|(i, &(t, v))| rec(i * 7, t, v))
                .collect();
            let g = grokking_metrics(&records, tau, sustain);
            // Reference scan: earliest index with a sustained window.
            let first = |pred: &dyn Fn(&EvalRecord) -> bool| -> Option<usize> {
                (0..records.len().saturating_sub(sustain - 1))
                    .find(|&i| records[i..i + sustain].iter().all(|r| pred(r)))
                    .map(|i| records[i].epoch)
            };
            prop_assert_eq!(g.t_fit, first(&|r| r.train_acc >= tau));
            prop_assert_eq!(g.t_gen, first(&|r| r.val_acc >= tau));
            match (g.t_fit, g.t_gen) {
                (Some(f), Some(gn)) => prop_assert_eq!(g.delay, Some(gn as i64 - f as i64)),
                _ => prop_assert_eq!(g.delay, None),
            }
        }
    }

    #[test]
    fn memorizes_tiny_task() {
        let mut cfg = small_config(Op::Add, 7, OptConfig::new(OptKind::Adam, 1e-3), 2000);
        cfg.batch_plan.batch_size = 14; // full-batch on the 14-example train set
        cfg.eval_every = 200;
        let out = train(&cfg).unwrap();
        let last = out.log.records.last().unwrap();
        assert_eq!(last.train_acc, 1.0, "failed to memorize: {last:?}");
        assert_eq!(last.epoch, 2000);
    }

    #[test]
    fn zero_epochs_evaluates_at_chance() {
        let task = ModTask::new(Op::Mul, 97).unwrap();
        let cfg = RunConfig::new(task, OptConfig::new(OptKind::Adam, 1e-3), 0);
        let out = train(&cfg).unwrap();
        assert_eq!(out.log.records.len(), 1);
        let r = &out.log.records[0];
        assert_eq!(r.epoch, 0);
        let chance = 1.0 / 97.0;
        assert!((r.val_acc - chance).abs() < 0.02, "val_acc {}", r.val_acc);
        assert!((r.train_acc - chance).abs() < 0.02);
        assert_eq!(out.log.grokking, GrokkingMetrics::default());
    }

    fn records_match_ignoring_wall(a: &[EvalRecord], b: &[EvalRecord]) -> bool {
        a.len() == b.len()
            && a.iter().zip(b).all(|(x, y)| {
                x.epoch == y.epoch
                    && x.train_loss == y.train_loss
                    && x.train_acc == y.train_acc
                    && x.val_acc == y.val_acc
                    && x.diag == y.diag
            })
    }

    #[test]
    fn identical_configs_identical_logs() {
        let cfg = small_config(Op::Mul, 13, OptConfig::new(OptKind::AdamLr, 1e-3), 30)
            .with_seed(5);
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert!(records_match_ignoring_wall(&a.log.records, &b.log.records));
        assert_eq!(a.log.grokking, b.log.grokking);
        assert_eq!(a.params.to_flat(), b.params.to_flat());
    }

    #[test]
    fn run_artifacts_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(Op::Add, 7, OptConfig::new(OptKind::Adam, 1e-3), 4);
        cfg.d = 4;
        cfg.h = 16;
        cfg.batch_plan.batch_size = 14;
        cfg.eval_every = 2;
        cfg.diag_every = 2;
        cfg.out_dir = Some(dir.path().to_path_buf());
        let out = train(&cfg).unwrap();

        let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let lines: Vec<&str> = metrics.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 1 + 3); // epochs 0, 2, 4
        // Diagnostics ran at every eval here, so no empty diag cells.
        assert!(!lines[1].contains(",,"), "missing diag cells: {}", lines[1]);

        let diag_text = std::fs::read_to_string(dir.path().join("diag.csv")).unwrap();
        assert_eq!(diag_text.lines().count(), 1 + 3);
        assert_eq!(out.log.diag_reports.len(), 3);

        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap())
                .unwrap();
        assert_eq!(summary["config"]["op"], "add");
        assert_eq!(summary["config"]["p"], 7);
        assert_eq!(summary["result"]["final_epoch"], 4);
        assert!(summary["result"]["aborted"].is_null());

        for name in ["curves.svg", "checkpoint.bin", "opt_state.bin"] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
    }

    #[test]
    fn one_epoch_csv_has_two_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(Op::Add, 7, OptConfig::new(OptKind::Sgd, 1e-2), 1);
        cfg.eval_every = 1;
        cfg.out_dir = Some(dir.path().to_path_buf());
        train(&cfg).unwrap();
        let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 1 + 2); // header + epochs 0 and 1
    }

    #[test]
    fn evaluation_does_not_mutate_params() {
        let task = ModTask::new(Op::Add, 7).unwrap();
        let all = enumerate_examples(&task);
        let split = modspace::split(&all, &SplitSpec::default()).unwrap();
        let cfg = NetConfig::with_embed(7, 8, 32);
        let params = init_params(&cfg, 3).unwrap();
        let before = params.to_flat();
        evaluate(&params, &split).unwrap();
        assert_eq!(params.to_flat(), before);
    }

    #[test]
    fn divergence_aborts_and_flushes() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(Op::Add, 7, OptConfig::new(OptKind::Sgd, 1e150), 5);
        cfg.eval_every = 1;
        cfg.out_dir = Some(dir.path().to_path_buf());
        let err = train(&cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epoch"), "error must name the last good epoch: {msg}");
        let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(metrics.lines().count() >= 2); // header + epoch-0 eval at least
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap())
                .unwrap();
        assert!(!summary["result"]["aborted"].is_null());
    }

    #[test]
    fn early_stop_halts_after_generalization() {
        let task = ModTask::new(Op::Add, 23).unwrap();
        let mut opt = OptConfig::new(OptKind::Adam, 1e-2);
        opt.weight_decay = 0.1; // strong decay: generalizes within a few hundred epochs
        let mut cfg = RunConfig::new(task, opt, 3000);
        cfg.split_spec.train_frac_total = 0.8;
        cfg.d = 32;
        cfg.h = 128;
        cfg.batch_plan.batch_size = 32;
        cfg.eval_every = 10;
        cfg.early_stop = true;
        let out = train(&cfg).unwrap();
        let g = &out.log.grokking;
        assert!(g.t_gen.is_some(), "run never generalized: {:?}", out.log.records.last());
        let final_epoch = out.log.records.last().unwrap().epoch;
        assert!(
            final_epoch <= g.t_gen.unwrap() + 300 + cfg.eval_every,
            "early stop missed: t_gen {:?}, final {final_epoch}",
            g.t_gen
        );
        assert!(final_epoch < 3000);
    }

    #[test]
    fn frequency_aware_run_writes_token_stats() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(Op::Add, 7, OptConfig::new(OptKind::Adam, 1e-3), 3);
        cfg.batch_plan.strategy = BatchStrategy::FrequencyAware;
        cfg.batch_plan.batch_size = 7;
        cfg.eval_every = 1;
        cfg.out_dir = Some(dir.path().to_path_buf());
        train(&cfg).unwrap();
        let text = std::fs::read_to_string(dir.path().join("token_stats.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,token,freq,bound,p_star");
        let vocab = 9;
        assert_eq!(lines.len(), 1 + vocab * 4); // epochs 0..=3
        // p* forms a distribution at every logged epoch.
        for epoch in 0..=3 {
            let sum: f64 = lines[1..]
                .iter()
                .filter(|l| l.starts_with(&format!("{epoch},")))
                .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
                .sum();
            assert!((sum - 1.0).abs() < 1e-9, "epoch {epoch}: p* sums to {sum}");
        }
    }

    #[test]
    fn sweep_single_cell_matches_train() {
        let base = small_config(Op::Mul, 13, OptConfig::new(OptKind::Adam, 1e-3), 20);
        let axis = SweepAxis::Lr(vec![1e-3]);
        let result = sweep(&base, &axis, &[4]).unwrap();
        assert_eq!(result.runs.len(), 1);
        let sweep_stats = result.runs[0].outcome.as_ref().unwrap();
        let solo = train(&base.clone().with_seed(4)).unwrap();
        assert_eq!(sweep_stats, &RunStats::of(&solo.log));
    }

    #[test]
    fn sweep_bookkeeping_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut base = small_config(Op::Add, 7, OptConfig::new(OptKind::AdamLr, 1e-3), 2);
        base.d = 4;
        base.h = 8;
        base.eval_every = 1;
        base.out_dir = Some(dir.path().to_path_buf());
        let axis = SweepAxis::Ratio(vec![0.5, 1.0, 5.0, 10.0, 50.0]);
        let result = sweep(&base, &axis, &[0, 1, 2]).unwrap();
        assert_eq!(result.runs.len(), 15);
        assert_eq!(result.aggregates.len(), 5);
        let csv = std::fs::read_to_string(result.csv_path.unwrap()).unwrap();
        assert_eq!(csv.lines().count(), 1 + 15 + 5);
        // Every run directory holds its own artifacts.
        assert!(dir.path().join("c_0.5/seed0/metrics.csv").exists());
        assert!(dir.path().join("c_50/seed2/summary.json").exists());
    }

    #[test]
    fn sweep_records_individual_failures() {
        let mut base = small_config(Op::Add, 7, OptConfig::new(OptKind::Sgd, 1e-2), 2);
        base.eval_every = 1;
        let axis = SweepAxis::Lr(vec![1e-2, 1e150]);
        let result = sweep(&base, &axis, &[0]).unwrap();
        assert!(result.runs[0].outcome.is_ok());
        assert!(result.runs[1].outcome.is_err());
        let agg = &result.aggregates[1];
        assert_eq!(agg.ok, 0);
        assert_eq!(agg.total, 1);
    }

    #[test]
    fn invalid_configs_rejected() {
        let task = ModTask::new(Op::Add, 7).unwrap();
        let mut cfg = RunConfig::new(task, OptConfig::new(OptKind::Adam, 1e-3), 10);
        cfg.eval_every = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::new(task, OptConfig::new(OptKind::Adam, 1e-3), 10);
        cfg.eval_every = 3;
        cfg.diag_every = 10; // not a multiple
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::new(task, OptConfig::new(OptKind::Adam, 1e-3), 10);
        cfg.mode = Mode::NoEmbed;
        cfg.diag_every = 10;
        cfg.eval_every = 10;
        assert!(cfg.validate().is_err());

        // Oversized batch is caught against the realized split.
        let mut cfg = small_config(Op::Add, 7, OptConfig::new(OptKind::Adam, 1e-3), 2);
        cfg.batch_plan.batch_size = 10_000;
        assert!(train(&cfg).is_err());
    }
}
