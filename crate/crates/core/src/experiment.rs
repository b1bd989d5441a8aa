//! Experiment orchestration: configuration, artifact files and the ablation
//! grid. The CLI is a thin layer over these functions.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_speeds, Dataset, SpeedSeries, SplitSpec, STEP_MINUTES, TIMESTAMP_FORMAT};
use crate::error::{Error, Result};
use crate::evaluation::{dm_test, evaluate, DmResult, Evaluation, Forecaster};
use crate::model::{Hyperparameters, InitConfig, ModelKind, ModelParameters};
use crate::network::{adjacency_ranks, RoadNetwork};
use crate::synth::{generate_synthetic, SynthSpec};
use crate::training::{train, TrainConfig, TrainOptions, TrainOutcome};
use crate::weights::{build_weight_set, kinds_label, WeightConfig, WeightKey, WeightKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// Directory holding `segments.csv` and `connections.csv`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub topology: Option<PathBuf>,
    /// Speed CSV `timestamp,<id_1>,...`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speeds: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for DataPaths {
    fn default() -> Self {
        Self {
            topology: None,
            speeds: None,
            output: PathBuf::from("output"),
        }
    }
}

/// Everything a run needs. Without `paths.topology`/`paths.speeds` the
/// synthetic generator described by `synth` supplies the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub kinds: Vec<WeightKind>,
    /// `k`
    pub max_rank: usize,
    /// `h`
    pub history: usize,
    /// `T_p`
    pub horizon: usize,
    pub c_out: usize,
    /// LSTM hidden size as a multiple of the segment count.
    pub hidden_multiplier: usize,
    pub trials: usize,
    /// Steps at which metrics are reported.
    pub horizons: Vec<usize>,
    /// Defaults to `T_p − 1`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dm_lag: Option<usize>,
    /// Parallel ablation runs; 0 uses every core.
    pub workers: usize,
    pub ablation: Vec<Vec<WeightKind>>,
    pub plots: bool,
    pub paths: DataPaths,
    pub split: SplitSpec,
    pub weights: WeightConfig,
    pub init: InitConfig,
    /// `train.seed` is replaced by the top-level `seed`.
    pub train: TrainConfig,
    pub synth: SynthSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            kinds: vec![WeightKind::Plain, WeightKind::SpeedLimitRatio],
            max_rank: 3,
            history: 12,
            horizon: 12,
            c_out: 4,
            hidden_multiplier: 2,
            trials: 3,
            horizons: vec![6, 9, 12],
            dm_lag: None,
            workers: 0,
            ablation: vec![
                vec![WeightKind::Plain],
                vec![WeightKind::SpeedLimitRatio],
                vec![WeightKind::Plain, WeightKind::SpeedLimitRatio],
            ],
            plots: false,
            paths: DataPaths::default(),
            split: SplitSpec::default(),
            weights: WeightConfig::default(),
            init: InitConfig::default(),
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("max_rank", self.max_rank),
            ("history", self.history),
            ("horizon", self.horizon),
            ("c_out", self.c_out),
            ("hidden_multiplier", self.hidden_multiplier),
            ("trials", self.trials),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.kinds.is_empty() {
            return Err(Error::Config("kinds must not be empty".into()));
        }
        if self.horizons.is_empty() {
            return Err(Error::Config("horizons must not be empty".into()));
        }
        if let Some(&bad) = self.horizons.iter().find(|&&h| h == 0 || h > self.horizon) {
            return Err(Error::Config(format!(
                "reported horizon {bad} outside 1..={}",
                self.horizon
            )));
        }
        if self.ablation.iter().any(|c| c.is_empty()) {
            return Err(Error::Config("ablation combinations must be non-empty".into()));
        }
        self.train.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn hidden_size(&self, num_segments: usize) -> usize {
        self.hidden_multiplier * num_segments
    }

    pub fn hyperparameters(&self, kinds: &[WeightKind], num_segments: usize) -> Hyperparameters {
        Hyperparameters {
            history: self.history,
            horizon: self.horizon,
            max_rank: self.max_rank,
            c_out: self.c_out,
            hidden_size: self.hidden_size(num_segments),
            kinds: kinds.to_vec(),
            num_segments,
        }
    }

    pub fn dm_lag(&self) -> usize {
        self.dm_lag.unwrap_or(self.horizon - 1)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    pub fn uses_synthetic(&self) -> bool {
        self.paths.topology.is_none()
    }
}

/// Values derived from a config and a concrete network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedSetup {
    pub num_segments: usize,
    pub hidden_size: usize,
    pub column_order: Vec<String>,
    pub data_source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigDump {
    pub config: ExperimentConfig,
    pub resolved: ResolvedSetup,
}

/// Writes `resolved_config.toml`: the full config plus derived sizes.
pub fn write_config_dump(cfg: &ExperimentConfig, network: &RoadNetwork, dir: &Path) -> Result<PathBuf> {
    let set = build_weight_set(network, cfg.max_rank, &cfg.kinds, &cfg.weights)?;
    let dump = ConfigDump {
        config: cfg.clone(),
        resolved: ResolvedSetup {
            num_segments: network.len(),
            hidden_size: cfg.hidden_size(network.len()),
            column_order: set.keys().map(|k| k.file_stem()).collect(),
            data_source: match &cfg.paths.topology {
                Some(t) => t.display().to_string(),
                None => "synthetic".into(),
            },
        },
    };
    let text = toml::to_string_pretty(&dump).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join("resolved_config.toml");
    write_text(&path, &text)?;
    Ok(path)
}

pub fn read_config_dump(path: &Path) -> Result<ConfigDump> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require_file(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} does not exist", path.display())))
    }
}

pub fn load_network(cfg: &ExperimentConfig) -> Result<RoadNetwork> {
    match &cfg.paths.topology {
        Some(dir) => {
            require_file(dir)?;
            RoadNetwork::load(dir)
        }
        None => Ok(generate_synthetic(&cfg.synth)?.0),
    }
}

/// Network and speeds from the configured files, or the synthetic generator.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(RoadNetwork, SpeedSeries)> {
    match (&cfg.paths.topology, &cfg.paths.speeds) {
        (Some(dir), Some(speeds)) => {
            require_file(dir)?;
            require_file(speeds)?;
            let network = RoadNetwork::load(dir)?;
            let series = load_speeds(speeds, &network)?;
            Ok((network, series))
        }
        (Some(_), None) | (None, Some(_)) => Err(Error::Config(
            "paths.topology and paths.speeds must be given together".into(),
        )),
        (None, None) => {
            log::info!("no data paths configured; generating synthetic data");
            generate_synthetic(&cfg.synth)
        }
    }
}

pub fn prepare_dataset(cfg: &ExperimentConfig, series: SpeedSeries) -> Result<Dataset> {
    Dataset::new(series, cfg.split, cfg.history, cfg.horizon)
}

/// Writes `segments.csv`, `connections.csv` and `speeds.csv`.
pub fn write_synthetic(spec: &SynthSpec, dir: &Path) -> Result<(RoadNetwork, SpeedSeries)> {
    let (network, series) = generate_synthetic(spec)?;
    network.save(dir)?;
    series.save(&dir.join("speeds.csv"))?;
    Ok((network, series))
}

/// Writes `adjacency_<dir>_k<rank>.csv` (`row,col,paths`, segment ids) for
/// ranks `1..=max_rank`.
pub fn write_adjacency(network: &RoadNetwork, max_rank: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    let labels = network.labels();
    let mut written = Vec::new();
    for adj in adjacency_ranks(network, max_rank)? {
        for (name, m) in [("out", &adj.outflow), ("in", &adj.inflow)] {
            let path = dir.join(format!("adjacency_{name}_k{}.csv", adj.rank));
            let mut text = String::from("row,col,paths\n");
            for (i, j, v) in m.iter() {
                let _ = writeln!(text, "{},{},{v}", labels[i], labels[j]);
            }
            write_text(&path, &text)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightManifestEntry {
    pub key: WeightKey,
    pub file: String,
    pub nnz: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub segment_ids: Vec<String>,
    pub max_rank: usize,
    pub kinds: Vec<WeightKind>,
    pub config: WeightConfig,
    /// In graph-convolution column order.
    pub matrices: Vec<WeightManifestEntry>,
}

/// Writes every clipped matrix as `weight_<kind>_<dir>_k<rank>.csv`
/// (`row,col,value`, segment ids) plus `weights_manifest.json`.
pub fn write_weights(
    network: &RoadNetwork,
    kinds: &[WeightKind],
    max_rank: usize,
    config: &WeightConfig,
    dir: &Path,
) -> Result<WeightManifest> {
    let set = build_weight_set(network, max_rank, kinds, config)?;
    let labels = network.labels();
    let mut matrices = Vec::new();
    for e in &set.entries {
        let file = format!("weight_{}.csv", e.key.file_stem());
        let mut text = String::from("row,col,value\n");
        for (i, j, v) in e.matrix.iter() {
            let _ = writeln!(text, "{},{},{v}", labels[i], labels[j]);
        }
        write_text(&dir.join(&file), &text)?;
        matrices.push(WeightManifestEntry {
            key: e.key,
            file,
            nnz: e.matrix.nnz(),
        });
    }
    let manifest = WeightManifest {
        segment_ids: labels.to_vec(),
        max_rank,
        kinds: set.kinds.clone(),
        config: config.clone(),
        matrices,
    };
    write_text(
        &dir.join("weights_manifest.json"),
        &serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Lower-case file-name form of a model or baseline name.
pub fn slug(name: &str) -> String {
    name.to_ascii_lowercase()
}

pub fn build_model(
    cfg: &ExperimentConfig,
    kind: ModelKind,
    kinds: &[WeightKind],
    network: &RoadNetwork,
    dataset: &Dataset,
    seed: u64,
) -> Result<ModelParameters> {
    ModelParameters::new(
        kind,
        cfg.hyperparameters(kinds, network.len()),
        network,
        &cfg.weights,
        dataset.normalizer,
        seed,
        cfg.init,
    )
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub outcome: TrainOutcome,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Trains one model with the configured kinds and writes
/// `checkpoint_<model>.json` and `train_log_<model>.csv` into `dir`.
pub fn run_training(
    cfg: &ExperimentConfig,
    kind: ModelKind,
    network: &RoadNetwork,
    dataset: &Dataset,
    dir: &Path,
) -> Result<TrainRun> {
    let model = build_model(cfg, kind, &cfg.kinds, network, dataset, cfg.seed)?;
    let name = slug(kind.name());
    let checkpoint = dir.join(format!("checkpoint_{name}.json"));
    let log = dir.join(format!("train_log_{name}.csv"));
    let options = TrainOptions {
        log_path: Some(log.clone()),
        checkpoint_path: Some(checkpoint.clone()),
    };
    let outcome = train(model, dataset, &cfg.train_config(cfg.seed), &options)?;
    outcome.model.save(&checkpoint)?;
    Ok(TrainRun {
        outcome,
        checkpoint,
        log,
    })
}

/// `model,horizon_min,rmse,mape,mad,mase` rows.
pub fn report_csv(evaluations: &[Evaluation]) -> String {
    let mut text = String::from("model,horizon_min,rmse,mape,mad,mase\n");
    for e in evaluations {
        for r in &e.reports {
            let _ = writeln!(
                text,
                "{},{},{},{},{},{}",
                e.model,
                r.horizon_steps as i64 * STEP_MINUTES,
                r.rmse,
                r.mape,
                r.mad,
                r.mase
            );
        }
    }
    text
}

/// Writes `report.csv`, and per model `per_segment_<model>_h<steps>.csv`
/// (`segment_id,rmse`) and `losses_<model>.csv` (`model,window,timestamp,loss`).
pub fn write_evaluations(evaluations: &[Evaluation], dataset: &Dataset, dir: &Path) -> Result<()> {
    write_text(&dir.join("report.csv"), &report_csv(evaluations))?;
    let ids = &dataset.series.segment_ids;
    for e in evaluations {
        let name = slug(&e.model);
        for r in &e.reports {
            let mut text = String::from("segment_id,rmse\n");
            for (id, v) in ids.iter().zip(&r.per_segment_rmse) {
                let _ = writeln!(text, "{id},{v}");
            }
            write_text(
                &dir.join(format!("per_segment_{name}_h{}.csv", r.horizon_steps)),
                &text,
            )?;
        }
        let mut text = String::from("model,window,timestamp,loss\n");
        for (w, (&start, loss)) in dataset.windows.test.iter().zip(&e.window_losses).enumerate() {
            let ts = dataset.series.timestamp(start + dataset.history);
            let _ = writeln!(
                text,
                "{},{w},{},{loss}",
                e.model,
                ts.format(TIMESTAMP_FORMAT)
            );
        }
        write_text(&dir.join(format!("losses_{name}.csv")), &text)?;
    }
    Ok(())
}

/// Scores every checkpoint plus the HA baseline on the test windows.
pub fn evaluate_models(
    models: &[ModelParameters],
    dataset: &Dataset,
    horizons: &[usize],
    include_ha: bool,
) -> Result<Vec<Evaluation>> {
    let mut out = Vec::new();
    for m in models {
        out.push(evaluate(Forecaster::Model(m), dataset, horizons)?);
    }
    if include_ha {
        out.push(evaluate(Forecaster::HistoricalAverage, dataset, horizons)?);
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct LossRecord {
    model: String,
    #[allow(dead_code)]
    window: usize,
    #[allow(dead_code)]
    timestamp: String,
    loss: f64,
}

/// Reads a `losses_<model>.csv` file.
pub fn read_losses(path: &Path) -> Result<(String, Vec<f64>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut name = None;
    let mut losses = Vec::new();
    for rec in rdr.deserialize() {
        let rec: LossRecord = rec?;
        match &name {
            None => name = Some(rec.model.clone()),
            Some(n) if *n != rec.model => {
                return Err(Error::Input(format!(
                    "{} mixes models '{n}' and '{}'",
                    path.display(),
                    rec.model
                )))
            }
            _ => {}
        }
        losses.push(rec.loss);
    }
    let name = name.ok_or_else(|| Error::Input(format!("{} has no rows", path.display())))?;
    Ok((name, losses))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmRow {
    pub model_a: String,
    pub model_b: String,
    pub result: DmResult,
}

/// Tests the first series against each of the others.
pub fn dm_against_first(series: &[(String, Vec<f64>)], lag: usize) -> Result<Vec<DmRow>> {
    let (first, rest) = series
        .split_first()
        .ok_or_else(|| Error::invalid("at least one loss series required"))?;
    let others: Vec<_> = if rest.is_empty() {
        vec![first]
    } else {
        rest.iter().collect()
    };
    others
        .into_iter()
        .map(|(name, losses)| {
            Ok(DmRow {
                model_a: first.0.clone(),
                model_b: name.clone(),
                result: dm_test(&first.1, losses, lag)?,
            })
        })
        .collect()
}

pub fn dm_csv(rows: &[DmRow]) -> String {
    let mut text = String::from("model_a,model_b,statistic,p_value\n");
    for r in rows {
        let _ = writeln!(
            text,
            "{},{},{},{}",
            r.model_a, r.model_b, r.result.statistic, r.result.p_value
        );
    }
    text
}

/// Sample mean and standard deviation (`n − 1`); `std` is `None` below two
/// values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: Option<f64>,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        // exact for repeated values, where summing could be off by an ulp
        let mean = match values.first() {
            Some(&v) if values.iter().all(|&x| x == v) => v,
            _ => values.iter().sum::<f64>() / n,
        };
        let std = (values.len() >= 2).then(|| {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (n - 1.0)).sqrt()
        });
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub horizon_steps: usize,
    pub rmse: MeanStd,
    pub mape: MeanStd,
    pub mad: MeanStd,
    pub mase: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub kinds: Vec<WeightKind>,
    pub label: String,
    pub trials: usize,
    pub seeds: Vec<u64>,
    /// Empty when any trial failed.
    pub cells: Vec<AblationCell>,
    pub failure: Option<String>,
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub horizons: Vec<usize>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn best(&self) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.best)
    }

    /// One line per (combination, horizon).
    pub fn to_csv(&self) -> String {
        let mut text = String::from(
            "kinds,horizon_min,trials,rmse_mean,rmse_std,mape_mean,mape_std,mad_mean,mad_std,mase_mean,mase_std,best,error\n",
        );
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for row in &self.rows {
            if let Some(reason) = &row.failure {
                for &h in &self.horizons {
                    let _ = writeln!(
                        text,
                        "{},{},{},,,,,,,,,false,\"{}\"",
                        row.label,
                        h as i64 * STEP_MINUTES,
                        row.trials,
                        reason.replace('"', "'")
                    );
                }
                continue;
            }
            for c in &row.cells {
                let _ = writeln!(
                    text,
                    "{},{},{},{},{},{},{},{},{},{},{},{},",
                    row.label,
                    c.horizon_steps as i64 * STEP_MINUTES,
                    row.trials,
                    c.rmse.mean,
                    opt(c.rmse.std),
                    c.mape.mean,
                    opt(c.mape.std),
                    c.mad.mean,
                    opt(c.mad.std),
                    c.mase.mean,
                    opt(c.mase.std),
                    row.best
                );
            }
        }
        text
    }

    /// `mean ± std` table in the layout of a paper results table.
    pub fn to_markdown(&self) -> String {
        let fmt = |m: &MeanStd| match m.std {
            Some(s) => format!("{:.3} ± {:.3}", m.mean, s),
            None => format!("{:.3}", m.mean),
        };
        let mut text = String::new();
        for (title, pick) in [
            ("RMSE (km/h)", 0usize),
            ("MAPE (%)", 1),
            ("MAD (km/h)", 2),
            ("MASE", 3),
        ] {
            let _ = writeln!(text, "### {title}\n");
            let _ = write!(text, "| weights |");
            for h in &self.horizons {
                let _ = write!(text, " {} min |", *h as i64 * STEP_MINUTES);
            }
            let _ = write!(text, "\n|---|");
            for _ in &self.horizons {
                let _ = write!(text, "---|");
            }
            text.push('\n');
            for row in &self.rows {
                let mark = if row.best { " (best)" } else { "" };
                let _ = write!(text, "| {}{mark} |", row.label);
                if let Some(reason) = &row.failure {
                    for _ in &self.horizons {
                        let _ = write!(text, " failed: {reason} |");
                    }
                } else {
                    for c in &row.cells {
                        let m = [&c.rmse, &c.mape, &c.mad, &c.mase][pick];
                        let _ = write!(text, " {} |", fmt(m));
                    }
                }
                text.push('\n');
            }
            text.push('\n');
        }
        text
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SeedPolicy {
    /// Trial `t` uses `seed + t`.
    #[default]
    Distinct,
    /// Every trial uses `seed`.
    Identical,
}

/// Trains `cfg.trials` MW-TGC models per combination in a worker pool and
/// aggregates their test metrics. Per-trial reports and training logs go
/// under `dir/<label>/`.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    network: &RoadNetwork,
    dataset: &Dataset,
    seeds: SeedPolicy,
    dir: &Path,
) -> Result<AblationTable> {
    if cfg.ablation.is_empty() {
        return Err(Error::Config("no ablation combinations configured".into()));
    }
    if cfg.trials < 2 {
        log::warn!("trials = {}: standard deviations are left empty", cfg.trials);
    }
    let combos: Vec<Vec<WeightKind>> = cfg
        .ablation
        .iter()
        .map(|c| crate::weights::normalize_kinds(c))
        .collect();
    let seed_of = |t: usize| match seeds {
        SeedPolicy::Distinct => cfg.seed + t as u64,
        SeedPolicy::Identical => cfg.seed,
    };
    let jobs: Vec<(usize, usize)> = (0..combos.len())
        .flat_map(|c| (0..cfg.trials).map(move |t| (c, t)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<std::result::Result<Evaluation, String>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, t)| {
                let kinds = &combos[c];
                let label = kinds_label(kinds);
                let seed = seed_of(t);
                log::info!("ablation {label} trial {t} (seed {seed})");
                run_trial(cfg, kinds, network, dataset, seed, &dir.join(&label), t)
                    .map_err(|e| e.to_string())
            })
            .collect()
    });

    let longest = *cfg.horizons.iter().max().expect("validated non-empty");
    let mut rows = Vec::new();
    for (c, kinds) in combos.iter().enumerate() {
        let trials: Vec<_> = results[c * cfg.trials..(c + 1) * cfg.trials].iter().collect();
        let failure = trials.iter().find_map(|r| r.as_ref().err().cloned());
        let cells = if failure.is_some() {
            Vec::new()
        } else {
            let evals: Vec<&Evaluation> = trials.iter().map(|r| r.as_ref().unwrap()).collect();
            cfg.horizons
                .iter()
                .map(|&h| {
                    let pick = |f: fn(&crate::evaluation::HorizonReport) -> f64| {
                        let v: Vec<f64> = evals.iter().map(|e| f(e.report(h).unwrap())).collect();
                        MeanStd::of(&v)
                    };
                    AblationCell {
                        horizon_steps: h,
                        rmse: pick(|r| r.rmse),
                        mape: pick(|r| r.mape),
                        mad: pick(|r| r.mad),
                        mase: pick(|r| r.mase),
                    }
                })
                .collect()
        };
        rows.push(AblationRow {
            kinds: kinds.clone(),
            label: kinds_label(kinds),
            trials: cfg.trials,
            seeds: (0..cfg.trials).map(seed_of).collect(),
            cells,
            failure,
            best: false,
        });
    }
    let best = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.failure.is_none())
        .map(|(i, r)| {
            let cell = r.cells.iter().find(|c| c.horizon_steps == longest).unwrap();
            (i, cell.rmse.mean)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1));
    if let Some((i, _)) = best {
        rows[i].best = true;
    }
    let table = AblationTable {
        horizons: cfg.horizons.clone(),
        rows,
    };
    write_text(&dir.join("ablation.csv"), &table.to_csv())?;
    write_text(&dir.join("ablation.md"), &table.to_markdown())?;
    Ok(table)
}

fn run_trial(
    cfg: &ExperimentConfig,
    kinds: &[WeightKind],
    network: &RoadNetwork,
    dataset: &Dataset,
    seed: u64,
    dir: &Path,
    trial: usize,
) -> Result<Evaluation> {
    let model = build_model(cfg, ModelKind::MwTgc, kinds, network, dataset, seed)?;
    let options = TrainOptions {
        log_path: Some(dir.join(format!("trial_{trial}_train_log.csv"))),
        checkpoint_path: None,
    };
    let outcome = train(model, dataset, &cfg.train_config(seed), &options)?;
    let eval = evaluate(Forecaster::Model(&outcome.model), dataset, &cfg.horizons)?;
    write_text(
        &dir.join(format!("trial_{trial}_report.csv")),
        &report_csv(std::slice::from_ref(&eval)),
    )?;
    Ok(eval)
}

/// `W_gc ⊙ W̃` for every matrix of a checkpoint, restricted to `nodes`
/// (rows and columns in the given order).
pub fn inspect_weights(model: &ModelParameters, nodes: &[String]) -> Result<Vec<(WeightKey, Array2<f64>)>> {
    let layer = model
        .graph_layer()
        .ok_or_else(|| Error::invalid("checkpoint has no graph-convolution layer"))?;
    let idx = nodes
        .iter()
        .map(|n| {
            model
                .segment_ids
                .iter()
                .position(|s| s == n)
                .ok_or_else(|| Error::invalid(format!("unknown segment id '{n}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(layer
        .entries
        .iter()
        .map(|e| {
            let p = e.product();
            let m = Array2::from_shape_fn((idx.len(), idx.len()), |(a, b)| {
                p.get(idx[a], idx[b]).unwrap_or(0.0)
            });
            (e.key, m)
        })
        .collect())
}

/// Writes `inspect_<kind>_<dir>_k<rank>.csv` dense matrices with header
/// `segment_id,<ids>`.
pub fn write_inspection(
    products: &[(WeightKey, Array2<f64>)],
    nodes: &[String],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (key, m) in products {
        let mut text = format!("segment_id,{}\n", nodes.join(","));
        for (id, row) in nodes.iter().zip(m.outer_iter()) {
            let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(text, "{id},{}", vals.join(","));
        }
        let path = dir.join(format!("inspect_{}.csv", key.file_stem()));
        write_text(&path, &text)?;
        written.push(path);
    }
    Ok(written)
}
