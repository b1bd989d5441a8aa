//! Error metrics, the Diebold-Mariano test and the historical-average
//! baseline.
//!
//! Metrics at horizon `H` are computed on an `N × W` pair of matrices holding
//! the step-`H` forecast and the matching actual speed for each of the `W`
//! test windows. Consecutive windows are one step apart, so each row is a
//! regular time series.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelParameters;
use crate::training::{segment_mismatch, EVAL_CHUNK};

fn same_shape(op: &'static str, a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.dim(),
            right: b.dim(),
        });
    }
    if a.is_empty() {
        return Err(Error::invalid(format!("{op} of empty arrays")));
    }
    Ok(())
}

/// Root mean squared error over every entry.
pub fn rmse(pred: ArrayView2<'_, f64>, actual: ArrayView2<'_, f64>) -> Result<f64> {
    same_shape("rmse", pred, actual)?;
    let sum: f64 = pred
        .iter()
        .zip(actual.iter())
        .map(|(p, a)| (p - a) * (p - a))
        .sum();
    Ok((sum / pred.len() as f64).sqrt())
}

/// Mean absolute deviation between forecast and actual.
pub fn mad(pred: ArrayView2<'_, f64>, actual: ArrayView2<'_, f64>) -> Result<f64> {
    same_shape("mad", pred, actual)?;
    let sum: f64 = pred.iter().zip(actual.iter()).map(|(p, a)| (p - a).abs()).sum();
    Ok(sum / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mape {
    /// Percent.
    pub value: f64,
    /// Entries skipped because the actual speed was exactly zero.
    pub excluded: usize,
}

/// Mean absolute percentage error in percent, skipping zero actuals.
pub fn mape(pred: ArrayView2<'_, f64>, actual: ArrayView2<'_, f64>) -> Result<Mape> {
    same_shape("mape", pred, actual)?;
    let mut sum = 0.0;
    let mut used = 0usize;
    for (p, a) in pred.iter().zip(actual.iter()) {
        if *a != 0.0 {
            sum += ((p - a) / a).abs();
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::Degenerate("MAPE undefined: every actual value is zero".into()));
    }
    Ok(Mape {
        value: 100.0 * sum / used as f64,
        excluded: pred.len() - used,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mase {
    pub value: f64,
    /// Segments skipped because their actual series is constant.
    pub excluded: usize,
}

/// Mean absolute scaled error, averaged over segments (rows).
///
/// Per segment: `Σ_j |X̂_j − X_j| / ((1/(T−1)) Σ_{j≥2} |X_j − X_{j−1}|)`.
pub fn mase(pred: ArrayView2<'_, f64>, actual: ArrayView2<'_, f64>) -> Result<Mase> {
    same_shape("mase", pred, actual)?;
    let t = actual.ncols();
    if t < 2 {
        return Err(Error::invalid("MASE needs at least two time steps"));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    for (p, a) in pred.outer_iter().zip(actual.outer_iter()) {
        let diffs: f64 = a
            .iter()
            .zip(a.iter().skip(1))
            .map(|(x0, x1)| (x1 - x0).abs())
            .sum();
        if diffs == 0.0 {
            continue;
        }
        let errors: f64 = p.iter().zip(a.iter()).map(|(x, y)| (x - y).abs()).sum();
        total += errors / (diffs / (t - 1) as f64);
        used += 1;
    }
    if used == 0 {
        return Err(Error::Degenerate("MASE undefined: every actual series is constant".into()));
    }
    Ok(Mase {
        value: total / used as f64,
        excluded: actual.nrows() - used,
    })
}

/// RMSE of each row.
pub fn per_segment_rmse(pred: ArrayView2<'_, f64>, actual: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    same_shape("per_segment_rmse", pred, actual)?;
    let sq = (&pred - &actual).mapv(|e| e * e);
    Ok(sq.mean_axis(Axis(1)).expect("non-empty").mapv(f64::sqrt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub horizon_steps: usize,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
    pub mad: f64,
    pub mase: f64,
    pub per_segment_rmse: Vec<f64>,
    pub mape_excluded: usize,
    pub mase_excluded: usize,
}

impl HorizonReport {
    pub fn from_matrices(
        horizon_steps: usize,
        pred: ArrayView2<'_, f64>,
        actual: ArrayView2<'_, f64>,
    ) -> Result<Self> {
        let m = mape(pred, actual)?;
        let s = mase(pred, actual)?;
        if m.excluded > 0 {
            log::warn!("horizon {horizon_steps}: MAPE skipped {} zero actuals", m.excluded);
        }
        if s.excluded > 0 {
            log::warn!("horizon {horizon_steps}: MASE skipped {} constant segments", s.excluded);
        }
        Ok(Self {
            horizon_steps,
            rmse: rmse(pred, actual)?,
            mape: m.value,
            mad: mad(pred, actual)?,
            mase: s.value,
            per_segment_rmse: per_segment_rmse(pred, actual)?.to_vec(),
            mape_excluded: m.excluded,
            mase_excluded: s.excluded,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmResult {
    pub statistic: f64,
    /// Two-sided, standard normal reference.
    pub p_value: f64,
    pub lag: usize,
}

/// Diebold-Mariano test on two loss series. A negative statistic means `a`
/// has the smaller mean loss.
///
/// The long-run variance of `d = a − b` sums autocovariances up to `lag`
/// with unit weights.
pub fn dm_test(a: &[f64], b: &[f64], lag: usize) -> Result<DmResult> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "loss series differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n <= lag || n < 2 {
        return Err(Error::invalid(format!(
            "loss series of length {n} too short for lag {lag}"
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("loss series".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().all(|&v| v == 0.0) {
        return Ok(DmResult {
            statistic: 0.0,
            p_value: 1.0,
            lag,
        });
    }
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let centered: Vec<f64> = d.iter().map(|v| v - mean).collect();
    let gamma = |k: usize| -> f64 {
        centered[k..]
            .iter()
            .zip(&centered[..n - k])
            .map(|(x, y)| x * y)
            .sum::<f64>()
            / nf
    };
    let mut variance = gamma(0);
    for k in 1..=lag {
        variance += 2.0 * gamma(k);
    }
    if !(variance > 0.0) {
        return Err(Error::Degenerate(format!(
            "long-run variance of the loss differential is {variance}"
        )));
    }
    let statistic = mean / (variance / nf).sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p_value = (2.0 * normal.cdf(-statistic.abs())).clamp(0.0, 1.0);
    Ok(DmResult {
        statistic,
        p_value,
        lag,
    })
}

/// Repeats the last observed column of `window` for `horizon` steps.
pub fn baseline_ha(window: ArrayView2<'_, f64>, horizon: usize) -> Result<Array2<f64>> {
    if window.ncols() == 0 {
        return Err(Error::invalid("empty window"));
    }
    let last = window.column(window.ncols() - 1);
    let mut out = Array2::zeros((window.nrows(), horizon));
    for mut col in out.columns_mut() {
        col.assign(&last);
    }
    Ok(out)
}

/// Something that produces km/h forecasts for dataset windows.
#[derive(Debug, Clone, Copy)]
pub enum Forecaster<'a> {
    Model(&'a ModelParameters),
    HistoricalAverage,
}

impl Forecaster<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Forecaster::Model(m) => m.kind.name(),
            Forecaster::HistoricalAverage => "HA",
        }
    }

    /// `N × T_p` km/h forecasts for the windows starting at `starts`.
    pub fn forecast(&self, dataset: &Dataset, starts: &[usize]) -> Result<Vec<Array2<f64>>> {
        match self {
            Forecaster::Model(m) => {
                if m.segment_ids != dataset.series.segment_ids {
                    return Err(segment_mismatch(&m.segment_ids, &dataset.series.segment_ids));
                }
                if m.hyper.history != dataset.history || m.hyper.horizon != dataset.horizon {
                    return Err(Error::invalid(format!(
                        "model expects h={} T_p={}, dataset has h={} T_p={}",
                        m.hyper.history, m.hyper.horizon, dataset.history, dataset.horizon
                    )));
                }
                // the checkpoint's own normalizer, which need not match the
                // one fitted on this dataset
                let mut out = Vec::with_capacity(starts.len());
                for chunk in starts.chunks(EVAL_CHUNK) {
                    let inputs: Vec<Array2<f64>> = chunk
                        .iter()
                        .map(|&s| m.normalizer.forward(&dataset.input_kmh(s).to_owned()))
                        .collect();
                    let views: Vec<_> = inputs.iter().map(|a| a.view()).collect();
                    out.extend(m.predict_normalized(&views)?.iter().map(|p| m.normalizer.inverse(p)));
                }
                Ok(out)
            }
            Forecaster::HistoricalAverage => starts
                .iter()
                .map(|&s| baseline_ha(dataset.input_kmh(s), dataset.horizon))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub model: String,
    pub reports: Vec<HorizonReport>,
    /// Per-window MSE (km²/h²) over all segments and predicted steps; the
    /// loss series used by [`dm_test`].
    pub window_losses: Vec<f64>,
}

impl Evaluation {
    pub fn report(&self, horizon_steps: usize) -> Option<&HorizonReport> {
        self.reports.iter().find(|r| r.horizon_steps == horizon_steps)
    }
}

/// Gathers the step-`horizon` forecasts and actuals across windows into two
/// `N × W` matrices.
pub fn horizon_matrices(
    forecasts: &[Array2<f64>],
    dataset: &Dataset,
    starts: &[usize],
    horizon: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if horizon == 0 || horizon > dataset.horizon {
        return Err(Error::invalid(format!(
            "horizon {horizon} outside 1..={}",
            dataset.horizon
        )));
    }
    if forecasts.len() != starts.len() {
        return Err(Error::invalid("one forecast per window required"));
    }
    let n = dataset.series.num_segments();
    let mut pred = Array2::zeros((n, starts.len()));
    let mut actual = Array2::zeros((n, starts.len()));
    for (w, (f, &s)) in forecasts.iter().zip(starts).enumerate() {
        pred.column_mut(w).assign(&f.column(horizon - 1));
        actual.column_mut(w).assign(&dataset.target_kmh(s).column(horizon - 1));
    }
    Ok((pred, actual))
}

/// Scores a forecaster on the test windows at each requested horizon.
pub fn evaluate(forecaster: Forecaster<'_>, dataset: &Dataset, horizons: &[usize]) -> Result<Evaluation> {
    let starts = &dataset.windows.test;
    let forecasts = forecaster.forecast(dataset, starts)?;
    let reports = horizons
        .iter()
        .map(|&h| {
            let (p, a) = horizon_matrices(&forecasts, dataset, starts, h)?;
            HorizonReport::from_matrices(h, p.view(), a.view())
        })
        .collect::<Result<Vec<_>>>()?;
    let window_losses = forecasts
        .iter()
        .zip(starts)
        .map(|(f, &s)| {
            let r = rmse(f.view(), dataset.target_kmh(s))?;
            Ok(r * r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        model: forecaster.name().to_string(),
        reports,
        window_losses,
    })
}
