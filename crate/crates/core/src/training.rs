//! Mini-batch RMSprop training with stepped learning-rate decay and early
//! stopping on validation RMSE.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelParameters;
use crate::numerics::{Parameterized, SeededRng};

/// Windows per forward pass when scoring (no gradients).
pub(crate) const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay_factor: f64,
    /// Epochs between decays.
    pub decay_every: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub rmsprop_smoothing: f64,
    pub rmsprop_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            decay_factor: 0.7,
            decay_every: 5,
            batch_size: 50,
            max_epochs: 300,
            early_stop_patience: 10,
            rmsprop_smoothing: 0.9,
            rmsprop_epsilon: 1e-8,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("rmsprop_epsilon", self.rmsprop_epsilon)?;
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::invalid(format!(
                "decay_factor must lie in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if !(self.rmsprop_smoothing > 0.0 && self.rmsprop_smoothing < 1.0) {
            return Err(Error::invalid(format!(
                "rmsprop_smoothing must lie in (0, 1), got {}",
                self.rmsprop_smoothing
            )));
        }
        for (name, v) in [
            ("decay_every", self.decay_every),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("early_stop_patience", self.early_stop_patience),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Learning rate used during zero-based epoch `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmse: f64,
    pub learning_rate: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// RMSprop running mean of squared gradients, one per parameter tensor.
    pub accumulators: Vec<Array2<f64>>,
    pub best_val_rmse: f64,
    /// One-based epoch that produced `best_val_rmse`.
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    pub history: Vec<EpochRecord>,
    pub early_stopped: bool,
}

impl TrainState {
    pub fn new<P: Parameterized>(params: &P) -> Self {
        Self {
            epoch: 0,
            accumulators: params
                .tensors()
                .iter()
                .map(|t| Array2::zeros(t.dim()))
                .collect(),
            best_val_rmse: f64::INFINITY,
            best_epoch: 0,
            epochs_since_improvement: 0,
            history: Vec::new(),
            early_stopped: false,
        }
    }
}

/// Mean of squared differences over all entries.
pub fn l2_loss(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::ShapeMismatch {
            op: "l2_loss",
            left: pred.dim(),
            right: target.dim(),
        });
    }
    if pred.is_empty() {
        return Err(Error::invalid("l2_loss of empty arrays"));
    }
    let sum: f64 = pred
        .iter()
        .zip(target.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// One RMSprop update: `v ← ρv + (1−ρ)g²`, `θ ← θ − lr·g/(√v + ε)`.
///
/// Nothing is modified if any gradient is non-finite.
pub fn rmsprop_step<P: Parameterized>(
    params: &mut P,
    grads: &[Array2<f64>],
    accumulators: &mut [Array2<f64>],
    lr: f64,
    rho: f64,
    epsilon: f64,
) -> Result<()> {
    let mut tensors = params.tensors_mut();
    if tensors.len() != grads.len() || grads.len() != accumulators.len() {
        return Err(Error::invalid(format!(
            "{} parameters, {} gradients, {} accumulators",
            tensors.len(),
            grads.len(),
            accumulators.len()
        )));
    }
    for (i, ((t, g), v)) in tensors.iter().zip(grads).zip(accumulators.iter()).enumerate() {
        if t.dim() != g.dim() || g.dim() != v.dim() {
            return Err(Error::ShapeMismatch {
                op: "rmsprop_step",
                left: t.dim(),
                right: g.dim(),
            });
        }
        if !g.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter tensor {i}")));
        }
    }
    for ((t, g), v) in tensors.iter_mut().zip(grads).zip(accumulators.iter_mut()) {
        ndarray::Zip::from(&mut **t)
            .and(g)
            .and(v)
            .for_each(|theta, &g, v| {
                *v = rho * *v + (1.0 - rho) * g * g;
                *theta -= lr * g / (v.sqrt() + epsilon);
            });
    }
    Ok(())
}

/// Normalized-space predictions for the windows starting at `starts`.
pub fn predict_windows(
    model: &ModelParameters,
    dataset: &Dataset,
    starts: &[usize],
) -> Result<Vec<Array2<f64>>> {
    let mut out = Vec::with_capacity(starts.len());
    for chunk in starts.chunks(EVAL_CHUNK) {
        let inputs: Vec<_> = chunk.iter().map(|&s| dataset.input(s)).collect();
        out.extend(model.predict_normalized(&inputs)?);
    }
    Ok(out)
}

/// RMSE in km/h over every segment and predicted step of the given windows.
pub fn windows_rmse(model: &ModelParameters, dataset: &Dataset, starts: &[usize]) -> Result<f64> {
    if starts.is_empty() {
        return Err(Error::invalid("no windows to score"));
    }
    let preds = predict_windows(model, dataset, starts)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, &s) in preds.iter().zip(starts) {
        let kmh = dataset.normalizer.inverse(p);
        for (a, b) in kmh.iter().zip(dataset.target_kmh(s).iter()) {
            sum += (a - b) * (a - b);
        }
        count += kmh.len();
    }
    Ok((sum / count as f64).sqrt())
}

/// Optional side outputs of [`train`].
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// CSV log `epoch,train_loss,val_rmse,lr,seconds`, rewritten from scratch.
    pub log_path: Option<PathBuf>,
    /// Best-so-far checkpoint, rewritten on every validation improvement.
    pub checkpoint_path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: ModelParameters,
    pub state: TrainState,
}

/// Trains `model` on `dataset` and returns the best-validation parameters.
///
/// A non-finite loss or gradient aborts with [`Error::Diverged`]; the last
/// checkpoint written (if any) holds the best parameters seen so far.
pub fn train(
    model: ModelParameters,
    dataset: &Dataset,
    config: &TrainConfig,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.windows.train.is_empty() || dataset.windows.val.is_empty() {
        return Err(Error::invalid("training needs non-empty train and validation splits"));
    }
    if model.hyper.history != dataset.history || model.hyper.horizon != dataset.horizon {
        return Err(Error::invalid(format!(
            "model expects h={} T_p={}, dataset has h={} T_p={}",
            model.hyper.history, model.hyper.horizon, dataset.history, dataset.horizon
        )));
    }
    if model.segment_ids != dataset.series.segment_ids {
        return Err(segment_mismatch(&model.segment_ids, &dataset.series.segment_ids));
    }
    if model.normalizer != dataset.normalizer {
        return Err(Error::invalid("model normalizer differs from the dataset's"));
    }
    let mut log = match &options.log_path {
        Some(p) => Some(open_log(p)?),
        None => None,
    };

    let mut rng = SeededRng::stream(config.seed, 1);
    let mut state = TrainState::new(&model);
    let mut current = model;
    let mut best = current.clone();
    let mut order = dataset.windows.train.clone();

    while state.epoch < config.max_epochs {
        let epoch = state.epoch + 1;
        let started = Instant::now();
        let lr = config.learning_rate_at(state.epoch);
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let inputs: Vec<_> = batch.iter().map(|&s| dataset.input(s)).collect();
            let targets: Vec<_> = batch.iter().map(|&s| dataset.target(s)).collect();
            let (loss, grads) = current
                .loss_and_gradients(&inputs, &targets)
                .map_err(|e| diverged(epoch, e))?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: format!("training loss became {loss}"),
                });
            }
            rmsprop_step(
                &mut current,
                &grads,
                &mut state.accumulators,
                lr,
                config.rmsprop_smoothing,
                config.rmsprop_epsilon,
            )
            .map_err(|e| diverged(epoch, e))?;
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / order.len() as f64;
        let val_rmse =
            windows_rmse(&current, dataset, &dataset.windows.val).map_err(|e| diverged(epoch, e))?;
        if !val_rmse.is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: format!("validation RMSE became {val_rmse}"),
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_rmse,
            learning_rate: lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train_loss={train_loss:.6} val_rmse={val_rmse:.4} lr={lr:.3e}"
        );
        if let Some(w) = log.as_mut() {
            write_record(w, &record, options.log_path.as_deref().unwrap())?;
        }
        state.history.push(record);
        state.epoch = epoch;

        if val_rmse < state.best_val_rmse {
            state.best_val_rmse = val_rmse;
            state.best_epoch = epoch;
            state.epochs_since_improvement = 0;
            best = current.clone();
            if let Some(p) = &options.checkpoint_path {
                best.save(p)?;
            }
        } else {
            state.epochs_since_improvement += 1;
            if state.epochs_since_improvement >= config.early_stop_patience {
                state.early_stopped = true;
                break;
            }
        }
    }
    Ok(TrainOutcome { model: best, state })
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Diverged {
            epoch,
            reason: format!("non-finite {what}"),
        },
        other => other,
    }
}

pub(crate) fn segment_mismatch(expected: &[String], found: &[String]) -> Error {
    let unknown = found.iter().filter(|s| !expected.contains(s)).cloned().collect();
    let missing = expected.iter().filter(|s| !found.contains(s)).cloned().collect();
    Error::SegmentMismatch { unknown, missing }
}

fn open_log(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "epoch,train_loss,val_rmse,lr,seconds").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(w)
}

fn write_record(w: &mut BufWriter<File>, r: &EpochRecord, path: &Path) -> Result<()> {
    writeln!(
        w,
        "{},{},{},{},{:.3}",
        r.epoch, r.train_loss, r.val_rmse, r.learning_rate, r.seconds
    )
    .and_then(|_| w.flush())
    .map_err(|e| Error::io(path, e))
}
