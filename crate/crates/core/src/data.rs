//! Speed series I/O, day-aligned splits, z-score normalization and
//! sliding windows.

use std::collections::BTreeSet;
use std::fs;
use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDateTime};
use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::RoadNetwork;

pub const STEP_MINUTES: i64 = 5;
pub const STEPS_PER_DAY: usize = 288;
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// `N × T` matrix of 5-minute mean speeds (km/h) on a gap-free time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedSeries {
    pub segment_ids: Vec<String>,
    pub start: NaiveDateTime,
    pub values: Array2<f64>,
    /// Cells filled by interpolation at load time.
    pub imputed: usize,
}

impl SpeedSeries {
    pub fn num_segments(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    pub fn timestamp(&self, t: usize) -> NaiveDateTime {
        self.start + Duration::minutes(STEP_MINUTES * t as i64)
    }

    /// Writes `timestamp,<id_1>,...,<id_N>` rows.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["timestamp".to_string()];
        header.extend(self.segment_ids.iter().cloned());
        w.write_record(&header)?;
        for t in 0..self.len() {
            let mut row = vec![self.timestamp(t).format(TIMESTAMP_FORMAT).to_string()];
            row.extend(self.values.column(t).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn parse_timestamp(s: &str) -> Result<NaiveDateTime> {
    let s = s.trim();
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M"))
        .or_else(|_| DateTime::parse_from_rfc3339(s).map(|d| d.naive_utc()))
        .map_err(|_| Error::Input(format!("unparseable timestamp '{s}'")))
}

/// Loads a speed CSV and aligns its columns with `network`'s segment order.
/// Empty or `NaN` cells and missing 5-minute rows are filled by per-segment
/// linear interpolation (nearest value at the ends).
pub fn load_speeds(path: &Path, network: &RoadNetwork) -> Result<SpeedSeries> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(file);
    let headers = reader.headers()?.clone();
    if headers.get(0).map(str::trim) != Some("timestamp") {
        return Err(Error::Input(format!(
            "{}: first column must be 'timestamp'",
            path.display()
        )));
    }
    let columns: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();
    let known: BTreeSet<&str> = network.labels().iter().map(String::as_str).collect();
    let present: BTreeSet<&str> = columns.iter().map(String::as_str).collect();
    let unknown: Vec<String> = columns
        .iter()
        .filter(|c| !known.contains(c.as_str()))
        .cloned()
        .collect();
    let missing: Vec<String> = network
        .labels()
        .iter()
        .filter(|l| !present.contains(l.as_str()))
        .cloned()
        .collect();
    if !unknown.is_empty() || !missing.is_empty() || present.len() != columns.len() {
        return Err(Error::SegmentMismatch { unknown, missing });
    }
    let col_to_row: Vec<usize> = columns
        .iter()
        .map(|c| network.index_of(c).expect("checked above"))
        .collect();

    let mut stamps = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        stamps.push(parse_timestamp(&rec[0])?);
        let mut row = vec![f64::NAN; network.len()];
        for (k, cell) in rec.iter().skip(1).enumerate() {
            let cell = cell.trim();
            if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| {
                Error::Input(format!("row {}: bad speed value '{cell}'", line + 2))
            })?;
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Input(format!(
                    "row {}: speed must be finite and non-negative, got {v}",
                    line + 2
                )));
            }
            row[col_to_row[k]] = v;
        }
        rows.push(row);
    }
    let Some(&start) = stamps.first() else {
        return Err(Error::Input(format!("{}: no data rows", path.display())));
    };
    let step = Duration::minutes(STEP_MINUTES);
    let mut slots = Vec::with_capacity(stamps.len());
    for (i, ts) in stamps.iter().enumerate() {
        let offset = *ts - start;
        if offset.num_seconds() % step.num_seconds() != 0 {
            return Err(Error::Input(format!(
                "timestamp {ts} is off the 5-minute grid starting at {start}"
            )));
        }
        let slot = (offset.num_seconds() / step.num_seconds()) as usize;
        if i > 0 && slot <= slots[i - 1] {
            return Err(Error::Input(format!(
                "timestamps must strictly increase; {ts} follows {}",
                stamps[i - 1]
            )));
        }
        slots.push(slot);
    }
    let total = slots.last().expect("non-empty") + 1;
    let mut values = Array2::from_elem((network.len(), total), f64::NAN);
    for (row, &slot) in rows.iter().zip(&slots) {
        for (seg, &v) in row.iter().enumerate() {
            values[[seg, slot]] = v;
        }
    }
    let mut imputed = 0;
    for seg in 0..network.len() {
        let mut series: Vec<f64> = values.row(seg).to_vec();
        imputed += interpolate_gaps(&mut series).map_err(|_| {
            Error::Input(format!(
                "segment {} has no observed speeds",
                network.labels()[seg]
            ))
        })?;
        values.row_mut(seg).assign(&ndarray::Array1::from(series));
    }
    if imputed > 0 {
        log::info!("{}: imputed {imputed} missing speed cells", path.display());
    }
    Ok(SpeedSeries {
        segment_ids: network.labels().to_vec(),
        start,
        values,
        imputed,
    })
}

/// Fills `NaN`s by linear interpolation between observed neighbours, using
/// the nearest observation at either end. Returns the number filled.
pub fn interpolate_gaps(series: &mut [f64]) -> std::result::Result<usize, ()> {
    let observed: Vec<usize> = (0..series.len()).filter(|&i| !series[i].is_nan()).collect();
    let (Some(&first), Some(&last)) = (observed.first(), observed.last()) else {
        return if series.is_empty() { Ok(0) } else { Err(()) };
    };
    let mut filled = 0;
    for i in 0..first {
        series[i] = series[first];
        filled += 1;
    }
    for i in last + 1..series.len() {
        series[i] = series[last];
        filled += 1;
    }
    for pair in observed.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        for i in a + 1..b {
            let frac = (i - a) as f64 / (b - a) as f64;
            series[i] = series[a] + frac * (series[b] - series[a]);
            filled += 1;
        }
    }
    Ok(filled)
}

/// Train/validation/test lengths in whole days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_days: usize,
    pub val_days: usize,
    pub test_days: usize,
    pub steps_per_day: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_days: 21,
            val_days: 2,
            test_days: 7,
            steps_per_day: STEPS_PER_DAY,
        }
    }
}

impl SplitSpec {
    pub fn total_days(&self) -> usize {
        self.train_days + self.val_days + self.test_days
    }

    /// Step ranges of the three splits; they must exactly cover `len` steps.
    pub fn ranges(&self, len: usize) -> Result<[Range<usize>; 3]> {
        let d = self.steps_per_day;
        if self.train_days == 0 || self.val_days == 0 || self.test_days == 0 || d == 0 {
            return Err(Error::invalid("every split needs at least one day"));
        }
        let expected = self.total_days() * d;
        if expected != len {
            return Err(Error::Input(format!(
                "split {}/{}/{} days needs {expected} steps, series has {len}",
                self.train_days, self.val_days, self.test_days
            )));
        }
        let a = self.train_days * d;
        let b = a + self.val_days * d;
        Ok([0..a, a..b, b..len])
    }
}

/// Single z-score over all training speeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    pub fn fit(values: ArrayView2<'_, f64>) -> Result<Self> {
        let n = values.len();
        if n == 0 {
            return Err(Error::invalid("cannot fit a normalizer on no data"));
        }
        let mean = values.sum() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if !(std > 0.0) {
            return Err(Error::Degenerate(
                "training speeds have zero variance".into(),
            ));
        }
        Ok(Self { mean, std })
    }

    pub fn identity() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.mapv(|v| (v - self.mean) / self.std)
    }

    pub fn inverse(&self, z: &Array2<f64>) -> Array2<f64> {
        z.mapv(|v| v * self.std + self.mean)
    }
}

/// Window start indices per split. Window `s` uses steps `s..s+h` as input
/// and `s+h..s+h+T_p` as target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitWindows {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stride-1 windows that never cross a split boundary.
pub fn window_dataset(
    len: usize,
    history: usize,
    horizon: usize,
    split: &SplitSpec,
) -> Result<SplitWindows> {
    let [train, val, test] = split.ranges(len)?;
    let span = history + horizon;
    let make = |name: &str, r: Range<usize>| -> Result<Vec<usize>> {
        if r.len() < span {
            return Err(Error::Input(format!(
                "{name} split has {} steps; at least {span} (h + T_p) are required",
                r.len()
            )));
        }
        Ok((r.start..=r.end - span).collect())
    };
    Ok(SplitWindows {
        train: make("train", train)?,
        val: make("validation", val)?,
        test: make("test", test)?,
    })
}

/// Number of stride-1 windows in a range of `len` steps.
pub fn window_count(len: usize, history: usize, horizon: usize) -> usize {
    (len + 1).saturating_sub(history + horizon)
}

/// A series prepared for training and evaluation.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub series: SpeedSeries,
    pub normalized: Array2<f64>,
    pub normalizer: Normalizer,
    pub windows: SplitWindows,
    pub history: usize,
    pub horizon: usize,
    pub split: SplitSpec,
}

impl Dataset {
    /// Splits, fits the normalizer on the training range and windows.
    pub fn new(series: SpeedSeries, split: SplitSpec, history: usize, horizon: usize) -> Result<Self> {
        let windows = window_dataset(series.len(), history, horizon, &split)?;
        let [train, _, _] = split.ranges(series.len())?;
        let normalizer = Normalizer::fit(series.values.slice(s![.., train]))?;
        let normalized = normalizer.forward(&series.values);
        Ok(Self {
            series,
            normalized,
            normalizer,
            windows,
            history,
            horizon,
            split,
        })
    }

    pub fn input(&self, start: usize) -> ArrayView2<'_, f64> {
        self.normalized.slice(s![.., start..start + self.history])
    }

    pub fn target(&self, start: usize) -> ArrayView2<'_, f64> {
        let a = start + self.history;
        self.normalized.slice(s![.., a..a + self.horizon])
    }

    pub fn input_kmh(&self, start: usize) -> ArrayView2<'_, f64> {
        self.series.values.slice(s![.., start..start + self.history])
    }

    pub fn target_kmh(&self, start: usize) -> ArrayView2<'_, f64> {
        let a = start + self.history;
        self.series.values.slice(s![.., a..a + self.horizon])
    }
}
