//! Subcommands behind the `mlx` binary.
//!
//! | subcommand      | reads                      | writes (under the output dir) |
//! |-----------------|----------------------------|-------------------------------|
//! | `gen-data`      | raw data or nothing        | dataset cache                 |
//! | `train`         | dataset cache              | `model.mlxm`, `history.csv`   |
//! | `eval`          | cache, `model.mlxm`        | `metrics.json`                |
//! | `boundary-dump` | `model.mlxm` (2-D only)    | `boundary.csv`                |
//! | `gp-verify`     | nothing                    | `gp_verify.json`              |
//! | `sweep`         | dataset cache              | `sweep.csv`                   |
//!
//! CSV files start with `# mlx config_hash=<hex> seed=<n>`; JSON files carry
//! the same pair under `"meta"`. Nothing time-dependent is written, so equal
//! configs give byte-identical files.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use crate::config::{hash_hex, DatasetName, ExperimentConfig};
use crate::data::{build_decoy_mnist, gen_toy2d, load_idx, read_cache, write_cache, CacheMeta, DatasetSplits};
use crate::error::{Error, Result};
use crate::metrics::{boundary_grid, evaluate, EvalOptions, MetricsReport};
use crate::model::ModelParams;
use crate::rng::{stream, Stream};
use crate::theory::verify;
use crate::train::{train, train_with_observer, write_history_csv, EpochRecord, TrainingConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Eval,
    BoundaryDump,
    GpVerify,
    Sweep,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::GenData,
        Command::Train,
        Command::Eval,
        Command::BoundaryDump,
        Command::GpVerify,
        Command::Sweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::BoundaryDump => "boundary-dump",
            Command::GpVerify => "gp-verify",
            Command::Sweep => "sweep",
        }
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown subcommand {s:?}")))
    }
}

pub const CHECKPOINT_FILE: &str = "model.mlxm";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const BOUNDARY_FILE: &str = "boundary.csv";
pub const GP_VERIFY_FILE: &str = "gp_verify.json";
pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Meta {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    meta: Meta,
    split: &'static str,
    metrics: &'a MetricsReport,
}

#[derive(Serialize)]
struct ReportFile<'a, T: Serialize> {
    meta: Meta,
    report: &'a T,
}

/// Files a subcommand wrote, plus a one-line human summary.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

fn meta(cfg: &ExperimentConfig) -> Result<Meta> {
    Ok(Meta {
        config_hash: hash_hex(cfg.config_hash()?),
        seed: cfg.seed,
    })
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, &text)
}

fn raw_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [format!("{stem}.gz"), stem.to_string()] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::InvalidArgument(format!(
        "MNIST file {stem}[.gz] not found in {}; set dataset.raw_dir or run scripts/fetch_mnist.py",
        dir.display()
    )))
}

/// Builds the dataset from scratch (no cache).
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<DatasetSplits> {
    match cfg.dataset.name {
        DatasetName::Toy2d => gen_toy2d(cfg.dataset.toy_n, cfg.seed),
        DatasetName::DecoyMnist => {
            let dir = &cfg.dataset.raw_dir;
            let train_raw = load_idx(
                &raw_file(dir, "train-images-idx3-ubyte")?,
                &raw_file(dir, "train-labels-idx1-ubyte")?,
            )?;
            let test_raw = load_idx(
                &raw_file(dir, "t10k-images-idx3-ubyte")?,
                &raw_file(dir, "t10k-labels-idx1-ubyte")?,
            )?;
            build_decoy_mnist(&train_raw, &test_raw, cfg.seed, cfg.dataset.decoy_sizes)
        }
    }
}

/// Reads the cached dataset written by `gen-data`.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<DatasetSplits> {
    let path = cfg.cache_path()?;
    if !path.exists() {
        return Err(Error::InvalidArgument(format!(
            "dataset cache {} not found; run `mlx gen-data` with this config first",
            path.display()
        )));
    }
    let (data, m) = read_cache(&path)?;
    let expected = cfg.data_hash()?;
    if m.config_hash != expected || m.seed != cfg.seed {
        return Err(Error::Format {
            path,
            detail: format!(
                "cache was built for data hash {} seed {}, config needs {} seed {}",
                hash_hex(m.config_hash),
                m.seed,
                hash_hex(expected),
                cfg.seed
            ),
        });
    }
    Ok(data)
}

fn load_checkpoint(cfg: &ExperimentConfig, out: &Path) -> Result<ModelParams> {
    let path = out.join(CHECKPOINT_FILE);
    if !path.exists() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint {} not found; run `mlx train` with this config first",
            path.display()
        )));
    }
    let (params, hash, seed) = ModelParams::load(&path)?;
    let expected = cfg.training_hash()?;
    if hash != expected || seed != cfg.seed {
        return Err(Error::Format {
            path,
            detail: format!(
                "checkpoint was trained under hash {} seed {}, config gives {} seed {}",
                hash_hex(hash),
                seed,
                hash_hex(expected),
                cfg.seed
            ),
        });
    }
    Ok(params)
}

fn eval_options(cfg: &ExperimentConfig) -> EvalOptions {
    EvalOptions {
        rcs_sigma: cfg.eval.rcs.then_some(cfg.eval.rcs_sigma),
        saliency: cfg.eval.saliency,
    }
}

/// Test-split metrics for a trained model.
pub fn evaluate_model(cfg: &ExperimentConfig, params: &ModelParams, data: &DatasetSplits) -> Result<MetricsReport> {
    evaluate(params, &data.test, eval_options(cfg), &mut stream(cfg.seed, Stream::Rcs))
}

/// One sweep row.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub method: String,
    pub hyperparams: String,
    pub report: MetricsReport,
}

fn hyperparam_label(overrides: &serde_json::Map<String, serde_json::Value>) -> String {
    let mut keys: Vec<&String> = overrides.keys().filter(|k| k.as_str() != "method").collect();
    keys.sort();
    keys.iter()
        .map(|k| format!("{k}={}", overrides[k.as_str()]))
        .collect::<Vec<_>>()
        .join(";")
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn sweep_csv(rows: &[SweepRow], header: &str) -> String {
    let mut s = format!("# {header}\nmethod,hyperparams,avg_acc,wg_acc,rcs,s1,s2\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            csv_field(&r.method),
            csv_field(&r.hyperparams),
            r.report.avg_acc,
            r.report.wg_acc,
            csv_opt(r.report.rcs),
            csv_opt(r.report.s1),
            csv_opt(r.report.s2)
        ));
    }
    s
}

/// Trains and evaluates every sweep row, `cfg.sweep_workers` at a time.
pub fn run_sweep(cfg: &ExperimentConfig, data: &DatasetSplits) -> Result<Vec<SweepRow>> {
    if cfg.sweep.is_empty() {
        return Err(Error::Config("sweep needs at least one row in `sweep`".into()));
    }
    let spec = cfg.model_spec()?;
    let jobs: Vec<TrainingConfig> = cfg
        .sweep
        .iter()
        .map(|row| cfg.sweep_training(row))
        .collect::<Result<_>>()?;
    let workers = match cfg.sweep_workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(jobs.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<MetricsReport>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = train(data, &spec, &jobs[i]).and_then(|out| evaluate_model(cfg, &out.params, data));
                results.lock().expect("sweep worker panicked")[i] = Some(r);
            });
        }
    });
    let results = results.into_inner().expect("sweep worker panicked");
    cfg.sweep
        .iter()
        .zip(jobs)
        .zip(results)
        .map(|((row, job), r)| {
            Ok(SweepRow {
                method: job.method.name().to_string(),
                hyperparams: hyperparam_label(row),
                report: r.expect("every sweep job ran")?,
            })
        })
        .collect()
}

/// Runs one subcommand, writing into `out` (the config's `output_dir` when
/// `None`). `observe` sees training epochs.
pub fn run(
    cmd: Command,
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    mut observe: impl FnMut(&EpochRecord),
) -> Result<RunOutput> {
    cfg.validate()?;
    let out = out.unwrap_or(&cfg.output_dir).to_path_buf();
    let header = cfg.header()?;
    match cmd {
        Command::GenData => {
            let data = build_dataset(cfg)?;
            let path = cfg.cache_path()?;
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            write_cache(
                &path,
                &data,
                CacheMeta {
                    config_hash: cfg.data_hash()?,
                    seed: cfg.seed,
                },
            )?;
            let summary = format!(
                "{}: {} train / {} val / {} test examples",
                data.name,
                data.train.len(),
                data.val.len(),
                data.test.len()
            );
            Ok(RunOutput {
                artifacts: vec![path],
                summary,
            })
        }
        Command::Train => {
            let data = load_dataset(cfg)?;
            let outcome = train_with_observer(&data, &cfg.model_spec()?, &cfg.training, &mut observe)?;
            let ckpt = out.join(CHECKPOINT_FILE);
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            outcome.params.save(&ckpt, cfg.training_hash()?, cfg.seed)?;
            let hist = out.join(HISTORY_FILE);
            write_history_csv(&hist, &outcome.history, &header)?;
            let best = &outcome.history[outcome.best_epoch - 1];
            Ok(RunOutput {
                artifacts: vec![ckpt, hist],
                summary: format!(
                    "{} trained {} epochs; kept epoch {} (val avg {:.4}, val wg {:.4})",
                    cfg.training.method,
                    outcome.history.len(),
                    outcome.best_epoch,
                    best.val_avg_acc,
                    best.val_wg_acc
                ),
            })
        }
        Command::Eval => {
            let params = load_checkpoint(cfg, &out)?;
            let data = load_dataset(cfg)?;
            let report = evaluate_model(cfg, &params, &data)?;
            let path = out.join(METRICS_FILE);
            write_json(
                &path,
                &MetricsFile {
                    meta: meta(cfg)?,
                    split: "test",
                    metrics: &report,
                },
            )?;
            Ok(RunOutput {
                artifacts: vec![path],
                summary: format!("test avg {:.4}, wg {:.4}", report.avg_acc, report.wg_acc),
            })
        }
        Command::BoundaryDump => {
            let params = load_checkpoint(cfg, &out)?;
            let e = &cfg.eval;
            let grid = boundary_grid(&params, e.grid_x1, e.grid_x2, e.grid_resolution)?;
            let path = out.join(BOUNDARY_FILE);
            write(&path, &grid.to_csv(&header))?;
            Ok(RunOutput {
                artifacts: vec![path],
                summary: format!("x2-flip fraction {:.4}", grid.flip_fraction()),
            })
        }
        Command::GpVerify => {
            let report = verify(&cfg.theory)?;
            let path = out.join(GP_VERIFY_FILE);
            write_json(
                &path,
                &ReportFile {
                    meta: meta(cfg)?,
                    report: &report,
                },
            )?;
            Ok(RunOutput {
                artifacts: vec![path],
                summary: format!(
                    "theorem 1 pass rate {:.3}, theorem 2 {}/{}, prop 1 oracle error {:.1e}",
                    report.thm1.pass_rate, report.thm2.passes, report.thm2.trials, report.prop1.max_oracle_error
                ),
            })
        }
        Command::Sweep => {
            let data = load_dataset(cfg)?;
            let rows = run_sweep(cfg, &data)?;
            let path = out.join(SWEEP_FILE);
            write(&path, &sweep_csv(&rows, &header))?;
            Ok(RunOutput {
                artifacts: vec![path],
                summary: format!("{} sweep rows", rows.len()),
            })
        }
    }
}
