//! Commands that touch data: train, eval, cl and gate-hist.

use std::path::{Path, PathBuf};
use std::time::Instant;

use miru::cells::CellKind;
use miru::checkpoint::{load_model_for, save_model, save_optim};
use miru::continual::{aggregate, gate_histogram_dataset, mean_accuracy, mean_std, run_dil, DilEvent, GateMode};
use miru::data::{apply_task, load_mnist, make_tasks, Dataset};
use miru::network::ModelParams;
use miru::numerics::{Real, Rng};
use miru::train::{evaluate, fit, streams, FitRecord};
use serde::Serialize;

use crate::config::{ExperimentConfig, Precision};
use crate::output::{matrix_csv, RunDir};
use crate::{CmdResult, ConfigArgs, Failure};

pub struct Log {
    pub quiet: bool,
}

impl Log {
    fn line(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn load_config(a: &ConfigArgs) -> Result<(ExperimentConfig, PathBuf), Failure> {
    let cfg = ExperimentConfig::load(&a.config, &a.overrides)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    Ok((cfg, out))
}

fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset), Failure> {
    let (train, test) = load_mnist(&cfg.data.dir).map_err(|e| Failure::Config(format!("{}: {e}", cfg.data.dir.display())))?;
    if (train.cols(), train.rows()) != (cfg.model.n_x, cfg.model.n_t) {
        return Err(Failure::Config(format!(
            "model expects {} steps of {} inputs but images are {}x{}",
            cfg.model.n_t,
            cfg.model.n_x,
            train.rows(),
            train.cols()
        )));
    }
    Ok((train, test))
}

fn training_subset(cfg: &ExperimentConfig, train: &Dataset, seed: u64) -> Result<Dataset, Failure> {
    let mut rng = Rng::derive(seed, streams::SUBSET);
    Ok(match (cfg.training.train_subset, cfg.training.train_fraction) {
        (Some(n), _) => train.sample(n.min(train.len()), &mut rng)?,
        (None, Some(f)) if f < 1.0 => train.sample_fraction(f, &mut rng)?,
        _ => train.clone(),
    })
}

/// Stores the first error raised inside an observer callback.
#[derive(Default)]
struct Deferred(Option<Failure>);

impl Deferred {
    fn keep(&mut self, r: Result<(), Failure>) {
        if let (Err(e), None) = (r, &self.0) {
            self.0 = Some(e);
        }
    }

    fn check(self) -> CmdResult {
        self.0.map_or(Ok(()), Err)
    }
}

#[derive(Serialize)]
struct SeedTimings {
    seed: u64,
    train_seconds: Vec<f64>,
    inference_seconds: Vec<f64>,
    mean_train_seconds_per_epoch: Option<f64>,
    mean_inference_seconds: f64,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn train(a: &ConfigArgs, log: &Log) -> CmdResult {
    let (cfg, out) = load_config(a)?;
    match cfg.training.precision {
        Precision::F32 => train_as::<f32>(&cfg, &out, log),
        Precision::F64 => train_as::<f64>(&cfg, &out, log),
    }
}

fn train_as<T: Real>(cfg: &ExperimentConfig, out: &Path, log: &Log) -> CmdResult {
    let (train, test) = load_data(cfg)?;
    let dir = RunDir::create(out)?;
    dir.write_manifest("train", cfg)?;
    let mut metrics = dir.jsonl("metrics.jsonl")?;
    let mut summary = String::from("seed,epochs,final_test_accuracy,final_test_loss,best_test_accuracy\n");
    let mut timings = Vec::new();
    for &seed in &cfg.training.seeds {
        let data = training_subset(cfg, &train, seed)?;
        log.line(format!(
            "train {} {}x{}x{} seed {seed}: {} images, {} epochs",
            cfg.model.cell,
            cfg.model.n_x,
            cfg.model.n_h,
            cfg.model.n_y,
            data.len(),
            cfg.training.epochs
        ));
        let mut deferred = Deferred::default();
        let outcome = fit::<T>(&cfg.fit(seed), &data, &test, |r: &FitRecord| {
            deferred.keep(metrics.write(r));
            log.line(format!(
                "  epoch {:>3}  train loss {}  train acc {}  test loss {:.4}  test acc {:.4}",
                r.epoch,
                r.train_loss.map_or("-".into(), |v| format!("{v:.4}")),
                r.train_accuracy.map_or("-".into(), |v| format!("{v:.4}")),
                r.test_loss,
                r.test_accuracy
            ));
        })?;
        deferred.check()?;
        let sd = dir.subdir(&format!("seed-{seed}"))?;
        save_model(&sd.join("model.ckpt"), &outcome.params)?;
        save_optim(&sd.join("optim.ckpt"), &outcome.optim, &outcome.params)?;
        let last = outcome.records.last().expect("initial record");
        let best = outcome.records.iter().map(|r| r.test_accuracy).fold(0.0, f64::max);
        summary.push_str(&format!(
            "{seed},{},{:.6},{:.6},{:.6}\n",
            last.epoch, last.test_accuracy, last.test_loss, best
        ));
        let t = outcome.timings;
        timings.push(SeedTimings {
            seed,
            mean_train_seconds_per_epoch: mean(&t.train_seconds),
            mean_inference_seconds: mean(&t.inference_seconds).unwrap_or(0.0),
            train_seconds: t.train_seconds,
            inference_seconds: t.inference_seconds,
        });
    }
    dir.write_text("summary.csv", &summary)?;
    dir.write_json("timings.json", &timings)?;
    log.line(format!("wrote {}", dir.root.display()));
    Ok(())
}

fn task_dataset(cfg: &ExperimentConfig, ds: &Dataset, task: usize) -> Result<Dataset, Failure> {
    if task == 0 {
        return Err(Failure::Config("tasks are numbered from 1".into()));
    }
    let task_seed = cfg
        .continual
        .as_ref()
        .and_then(|c| c.task_seed)
        .unwrap_or(cfg.training.seeds[0]);
    let spec = make_tasks(task, task_seed, ds.pixels())?.pop().expect("task list is non-empty");
    Ok(apply_task(ds, &spec)?)
}

#[derive(Serialize)]
struct EvalOutput {
    checkpoint: String,
    task: Option<usize>,
    examples: usize,
    accuracy: f64,
    loss: f64,
}

pub fn eval(a: &ConfigArgs, checkpoint: &Path, task: Option<usize>) -> CmdResult {
    let (cfg, _) = load_config(a)?;
    match cfg.training.precision {
        Precision::F32 => eval_as::<f32>(&cfg, checkpoint, task),
        Precision::F64 => eval_as::<f64>(&cfg, checkpoint, task),
    }
}

fn eval_as<T: Real>(cfg: &ExperimentConfig, checkpoint: &Path, task: Option<usize>) -> CmdResult {
    let (_, test) = load_data(cfg)?;
    let params = load_model_for::<T>(checkpoint, &cfg.model).map_err(|e| Failure::Config(e.to_string()))?;
    let test = match task {
        Some(t) => task_dataset(cfg, &test, t)?,
        None => test,
    };
    let ev = evaluate(&params, &cfg.model, &test)?;
    let out = EvalOutput {
        checkpoint: checkpoint.display().to_string(),
        task,
        examples: test.len(),
        accuracy: ev.accuracy,
        loss: ev.loss,
    };
    println!("{}", serde_json::to_string(&out).expect("serializable"));
    Ok(())
}

#[derive(Serialize)]
struct SeedSummary {
    seed: u64,
    mean_accuracy: f64,
    final_row: Vec<f64>,
}

#[derive(Serialize)]
struct ClSummary {
    seeds: Vec<SeedSummary>,
    mean_accuracy: f64,
    mean_accuracy_std: f64,
}

pub fn cl(a: &ConfigArgs, log: &Log) -> CmdResult {
    let (cfg, out) = load_config(a)?;
    match cfg.training.precision {
        Precision::F32 => cl_as::<f32>(&cfg, &out, log),
        Precision::F64 => cl_as::<f64>(&cfg, &out, log),
    }
}

fn cl_as<T: Real>(cfg: &ExperimentConfig, out: &Path, log: &Log) -> CmdResult {
    let c = cfg.continual()?;
    let (train, test) = load_data(cfg)?;
    let dir = RunDir::create(out)?;
    dir.write_manifest("cl", cfg)?;
    let mut metrics = dir.jsonl("metrics.jsonl")?;
    let mut matrices = Vec::new();
    let mut seeds = Vec::new();
    let mut seconds = Vec::new();
    for &seed in &cfg.training.seeds {
        let dil = cfg.dil(seed, c)?;
        log.line(format!(
            "cl {} {}x{}x{} seed {seed}: {} tasks x {} epochs, replay {}/{} (capacity {}), sparsity {:?}",
            cfg.model.cell, cfg.model.n_x, cfg.model.n_h, cfg.model.n_y, dil.tasks, dil.epochs, dil.store_k, dil.replay_k, dil.capacity, cfg.model.sparsity
        ));
        let mut deferred = Deferred::default();
        let t0 = Instant::now();
        let outcome = run_dil::<T>(&dil, &train, &test, |e| {
            deferred.keep(metrics.write(e));
            match e {
                DilEvent::Epoch {
                    task,
                    epoch,
                    train_loss,
                    train_accuracy,
                    buffer_items,
                    ..
                } => log.line(format!(
                    "  task {task} epoch {epoch:>2}  loss {train_loss:.4}  acc {train_accuracy:.4}  buffer {buffer_items}"
                )),
                DilEvent::Eval {
                    after_task,
                    task,
                    accuracy,
                    ..
                } => log.line(format!("  after task {after_task}: task {task} test acc {accuracy:.4}")),
            }
        })?;
        deferred.check()?;
        seconds.push(serde_json::json!({ "seed": seed, "seconds": t0.elapsed().as_secs_f64() }));
        let ma = mean_accuracy(&outcome.matrix)?;
        log.line(format!("  mean accuracy {ma:.4}"));
        dir.write_text(&format!("accuracy-seed-{seed}.csv"), &outcome.matrix.to_csv())?;
        let sd = dir.subdir(&format!("seed-{seed}"))?;
        save_model(&sd.join("model.ckpt"), &outcome.params)?;
        let t = outcome.matrix.tasks();
        seeds.push(SeedSummary {
            seed,
            mean_accuracy: ma,
            final_row: outcome.matrix.row(t - 1).into_iter().map(|v| v.unwrap_or(f64::NAN)).collect(),
        });
        matrices.push(outcome.matrix);
    }
    let (m, s) = aggregate(&matrices)?;
    dir.write_text("accuracy-mean.csv", &matrix_csv(&m))?;
    dir.write_text("accuracy-std.csv", &matrix_csv(&s))?;
    let mas: Vec<f64> = seeds.iter().map(|s| s.mean_accuracy).collect();
    let (mean_ma, std_ma) = mean_std(&mas);
    log.line(format!("mean accuracy over seeds {mean_ma:.4} ± {std_ma:.4}"));
    dir.write_json(
        "summary.json",
        &ClSummary {
            seeds,
            mean_accuracy: mean_ma,
            mean_accuracy_std: std_ma,
        },
    )?;
    dir.write_json("timings.json", &seconds)?;
    Ok(())
}

#[derive(Serialize)]
struct HistSummary {
    cell: CellKind,
    mode: GateMode,
    checkpoint: Option<String>,
    task: usize,
    examples: usize,
    total: u64,
    extreme: u64,
    extreme_fraction: f64,
}

pub fn gate_hist(a: &ConfigArgs, checkpoint: Option<&Path>, task: usize, bins: usize, limit: Option<usize>, csv: &Path) -> CmdResult {
    let (cfg, _) = load_config(a)?;
    match cfg.training.precision {
        Precision::F32 => gate_hist_as::<f32>(&cfg, checkpoint, task, bins, limit, csv),
        Precision::F64 => gate_hist_as::<f64>(&cfg, checkpoint, task, bins, limit, csv),
    }
}

fn gate_hist_as<T: Real>(cfg: &ExperimentConfig, checkpoint: Option<&Path>, task: usize, bins: usize, limit: Option<usize>, csv: &Path) -> CmdResult {
    if bins == 0 {
        return Err(Failure::Config("--bins must be at least 1".into()));
    }
    let (_, test) = load_data(cfg)?;
    let params: ModelParams<T> = match checkpoint {
        Some(p) => load_model_for(p, &cfg.model).map_err(|e| Failure::Config(e.to_string()))?,
        None => ModelParams::init(&cfg.model, cfg.coefficients, &mut Rng::derive(cfg.training.seeds[0], streams::INIT))?,
    };
    let mut ds = task_dataset(cfg, &test, task)?;
    if let Some(n) = limit {
        ds = ds.head(n);
    }
    let mode = match cfg.model.cell {
        CellKind::Gru => GateMode::UpdateGate,
        _ => GateMode::Lambda,
    };
    let hist = gate_histogram_dataset(&params, &cfg.model, &ds, mode, bins)?;
    std::fs::write(csv, hist.to_csv()).map_err(|e| Failure::Failed(miru::Error::io(csv, e).to_string()))?;
    let summary = HistSummary {
        cell: cfg.model.cell,
        mode,
        checkpoint: checkpoint.map(|p| p.display().to_string()),
        task,
        examples: ds.len(),
        total: hist.total,
        extreme: hist.extreme,
        extreme_fraction: hist.extreme_fraction(),
    };
    println!("{}", serde_json::to_string(&summary).expect("serializable"));
    Ok(())
}
