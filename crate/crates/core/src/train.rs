//! Mini-batch training and evaluation loops shared by single-task and
//! continual experiments.

use serde::{Deserialize, Serialize};

use std::time::Instant;

use crate::cells::CoeffSpec;
use crate::data::{batches, Dataset, SequenceBatch};
use crate::error::{Error, Result};
use crate::network::{
    backward_through_time, forward_sequence, infer, loss_and_grad, loss_from_logits, output_probs, predict_from_logits, ModelConfig, ModelParams,
};
use crate::numerics::{Real, Rng};
use crate::optim::{OptimConfig, OptimState};

/// Batch size used for evaluation passes (no effect on results).
pub const EVAL_BATCH: usize = 1000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub seen: usize,
}

impl StepStats {
    pub fn merge(&mut self, other: StepStats) {
        // loss is kept as a running sum over examples
        self.loss += other.loss * other.seen as f64;
        self.correct += other.correct;
        self.seen += other.seen;
    }
}

/// Per-epoch totals; `loss` is the example-weighted mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
    pub examples: usize,
}

/// Forward, loss, backward and one optimizer update on `batch`. Training
/// accuracy is measured on the pre-update predictions.
pub fn train_step<T: Real>(
    params: &mut ModelParams<T>,
    cfg: &ModelConfig,
    opt: &mut OptimState<T>,
    batch: &SequenceBatch<T>,
    clip_norm: Option<f64>,
) -> Result<StepStats> {
    let rec = forward_sequence(params, cfg, batch)?;
    let (loss, dl) = loss_and_grad(&rec, &batch.labels, cfg.loss)?;
    if !loss.is_finite() {
        // position filled in by the caller
        return Err(Error::Diverged {
            task: 0,
            epoch: 0,
            batch: 0,
            loss,
        });
    }
    let correct = predict_from_logits(&rec.logits)
        .iter()
        .zip(&batch.labels)
        .filter(|(p, y)| p == y)
        .count();
    let mut grads = backward_through_time(params, cfg, &rec, &dl)?;
    if let Some(max) = clip_norm {
        grads.clip_global_norm(max);
    }
    opt.step(params, &grads)?;
    Ok(StepStats {
        loss,
        correct,
        seen: batch.n_b(),
    })
}

/// Where a batch sits in the experiment, for error reports.
#[derive(Clone, Copy, Debug, Default)]
pub struct Position {
    pub task: usize,
    pub epoch: usize,
}

/// One pass over `ds` in an order drawn from `shuffle_rng`. `prepare` may
/// rewrite each batch before the update (replay interleaving); it receives
/// the batch index.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<T: Real>(
    params: &mut ModelParams<T>,
    cfg: &ModelConfig,
    opt: &mut OptimState<T>,
    ds: &Dataset,
    batch_size: usize,
    shuffle_rng: &mut Rng,
    clip_norm: Option<f64>,
    at: Position,
    mut prepare: impl FnMut(usize, SequenceBatch<T>) -> Result<SequenceBatch<T>>,
) -> Result<EpochStats> {
    let mut total = StepStats::default();
    for (i, batch) in batches::<T>(ds, batch_size, shuffle_rng, true, at.task)?.enumerate() {
        let batch = prepare(i, batch)?;
        let stats = train_step(params, cfg, opt, &batch, clip_norm).map_err(|e| match e {
            Error::Diverged { loss, .. } => Error::Diverged {
                task: at.task,
                epoch: at.epoch,
                batch: i,
                loss,
            },
            other => other,
        })?;
        total.merge(stats);
    }
    Ok(EpochStats {
        loss: total.loss / total.seen.max(1) as f64,
        accuracy: total.correct as f64 / total.seen.max(1) as f64,
        examples: total.seen,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Accuracy and mean loss over the whole dataset.
pub fn evaluate<T: Real>(params: &ModelParams<T>, cfg: &ModelConfig, ds: &Dataset) -> Result<Evaluation> {
    let mut correct = 0usize;
    let mut loss = 0.0;
    let mut dummy = Rng::new(0);
    for batch in batches::<T>(ds, EVAL_BATCH, &mut dummy, false, 0)? {
        let logits = infer(params, cfg, &batch)?;
        correct += predict_from_logits(&logits)
            .iter()
            .zip(&batch.labels)
            .filter(|(p, y)| p == y)
            .count();
        let probs = output_probs(&logits, cfg.loss);
        loss += loss_from_logits(&logits, &probs, &batch.labels, cfg.loss)?.0 * batch.n_b() as f64;
    }
    let n = ds.len().max(1) as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: loss / n,
    })
}

/// RNG streams derived from a run seed, one per purpose, so that e.g.
/// enabling replay does not perturb initialization or shuffling.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SUBSET: u64 = 2;
    pub const BUFFER: u64 = 3;
    pub const REPLAY: u64 = 4;

    /// Shuffle stream of one epoch of one task.
    pub fn shuffle(task: usize, epoch: usize) -> u64 {
        0x5348_0000_0000 | ((task as u64) << 16) | epoch as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub model: ModelConfig,
    pub coeffs: CoeffSpec,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: Option<f64>,
}

/// One metrics record. `epoch` 0 is the evaluation before training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

/// Wall-clock seconds, kept apart from the metrics so those stay
/// reproducible.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTimings {
    pub train_seconds: Vec<f64>,
    pub inference_seconds: Vec<f64>,
}

pub struct FitOutcome<T: Real> {
    pub params: ModelParams<T>,
    pub optim: OptimState<T>,
    pub records: Vec<FitRecord>,
    pub timings: FitTimings,
}

/// Seeded single-task training with a test evaluation before the first
/// epoch and after every epoch.
pub fn fit<T: Real>(cfg: &FitConfig, train: &Dataset, test: &Dataset, mut observe: impl FnMut(&FitRecord)) -> Result<FitOutcome<T>> {
    cfg.model.validate()?;
    cfg.optim.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut params = ModelParams::<T>::init(&cfg.model, cfg.coeffs, &mut Rng::derive(cfg.seed, streams::INIT))?;
    let mut optim = OptimState::new(cfg.optim.clone(), &params)?;
    let mut records = Vec::with_capacity(cfg.epochs + 1);
    let mut timings = FitTimings::default();
    let eval = |p: &ModelParams<T>, timings: &mut FitTimings| -> Result<Evaluation> {
        let t0 = Instant::now();
        let ev = evaluate(p, &cfg.model, test)?;
        timings.inference_seconds.push(t0.elapsed().as_secs_f64());
        Ok(ev)
    };
    let ev = eval(&params, &mut timings)?;
    let rec = FitRecord {
        seed: cfg.seed,
        epoch: 0,
        train_loss: None,
        train_accuracy: None,
        test_loss: ev.loss,
        test_accuracy: ev.accuracy,
    };
    observe(&rec);
    records.push(rec);
    for epoch in 0..cfg.epochs {
        let mut shuffle = Rng::derive(cfg.seed, streams::shuffle(0, epoch));
        let t0 = Instant::now();
        let st = train_epoch(
            &mut params,
            &cfg.model,
            &mut optim,
            train,
            cfg.batch_size,
            &mut shuffle,
            cfg.clip_norm,
            Position { task: 0, epoch: epoch + 1 },
            |_, b| Ok(b),
        )?;
        timings.train_seconds.push(t0.elapsed().as_secs_f64());
        let ev = eval(&params, &mut timings)?;
        let rec = FitRecord {
            seed: cfg.seed,
            epoch: epoch + 1,
            train_loss: Some(st.loss),
            train_accuracy: Some(st.accuracy),
            test_loss: ev.loss,
            test_accuracy: ev.accuracy,
        };
        observe(&rec);
        records.push(rec);
    }
    Ok(FitOutcome {
        params,
        optim,
        records,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{CellKind, CoeffSpec};
    use crate::data::tests::synthetic;
    use crate::optim::{OptimConfig, OptimKind};

    /// Labels determined by the mean brightness of the first row, so a small
    /// recurrent model can learn them.
    fn learnable(n: usize, seed: u64) -> Dataset {
        let base = synthetic(n, 4, 3, seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let img = base.image(i);
            images.extend_from_slice(img);
            labels.push((img[..3].iter().map(|&v| v as u32).sum::<u32>() * 2 / 766) as u8);
        }
        Dataset::new(images, labels, 4, 3, crate::data::Split::Train).unwrap()
    }

    #[test]
    fn training_reduces_loss_deterministically() {
        let ds = learnable(400, 1);
        let cfg = ModelConfig::new(CellKind::Miru2, 3, 16, 10, 4);
        let run = || {
            let mut rng = Rng::new(5);
            let mut p = ModelParams::<f32>::init(&cfg, CoeffSpec::Scalar { lambda: 0.5, beta: 0.5 }, &mut rng).unwrap();
            let mut opt = OptimState::new(OptimConfig::new(OptimKind::Adam, 0.01), &p).unwrap();
            let before = evaluate(&p, &cfg, &ds).unwrap();
            let mut last = EpochStats::default();
            for e in 0..15 {
                last = train_epoch(&mut p, &cfg, &mut opt, &ds, 16, &mut rng, None, Position { task: 1, epoch: e }, |_, b| Ok(b)).unwrap();
            }
            (before, evaluate(&p, &cfg, &ds).unwrap(), last, p)
        };
        let (before, after, last, p1) = run();
        assert!(after.loss < before.loss * 0.8, "{before:?} -> {after:?}");
        assert!(after.accuracy > 0.7, "{after:?}");
        assert_eq!(last.examples, 400);
        let (.., p2) = run();
        assert_eq!(p1, p2);
    }

    #[test]
    fn divergence_is_reported_with_position() {
        let ds = learnable(64, 2);
        let cfg = ModelConfig::new(CellKind::Gru, 3, 8, 10, 4);
        let mut rng = Rng::new(0);
        let mut p = ModelParams::<f32>::init(&cfg, CoeffSpec::Random, &mut rng).unwrap();
        p.w_y.data_mut()[0] = f32::NAN;
        let mut opt = OptimState::new(OptimConfig::new(OptimKind::Sgd, 0.1), &p).unwrap();
        let err = train_epoch(&mut p, &cfg, &mut opt, &ds, 16, &mut rng, None, Position { task: 3, epoch: 2 }, |_, b| Ok(b)).unwrap_err();
        assert!(matches!(err, Error::Diverged { task: 3, epoch: 2, batch: 0, .. }), "{err}");
    }

    #[test]
    fn fit_records_and_determinism() {
        let train = learnable(128, 3);
        let test = learnable(64, 4);
        let mut cfg = FitConfig {
            model: ModelConfig::new(CellKind::Gru, 3, 8, 10, 4),
            coeffs: CoeffSpec::Random,
            optim: OptimConfig::new(OptimKind::Rmsprop, 0.01),
            epochs: 0,
            batch_size: 16,
            seed: 1,
            clip_norm: None,
        };
        let zero = fit::<f64>(&cfg, &train, &test, |_| {}).unwrap();
        assert_eq!(zero.records.len(), 1);
        assert_eq!(zero.records[0].train_loss, None);
        assert!(zero.timings.train_seconds.is_empty());
        cfg.epochs = 3;
        let mut seen = Vec::new();
        let a = fit::<f64>(&cfg, &train, &test, |r| seen.push(r.epoch)).unwrap();
        assert_eq!(seen, vec![0, 1, 2, 3]);
        assert_eq!(a.timings.train_seconds.len(), 3);
        assert_eq!(a.timings.inference_seconds.len(), 4);
        let b = fit::<f64>(&cfg, &train, &test, |_| {}).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.params, b.params);
        assert_eq!(a.records[0], zero.records[0]);
    }
}
