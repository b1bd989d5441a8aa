use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mwtgc::data::Dataset;
use mwtgc::experiment::{self, ExperimentConfig, SeedPolicy};
use mwtgc::model::{ModelKind, ModelParameters};
use mwtgc::plot;
use mwtgc::weights::{parse_kinds, WeightKind};

#[derive(Parser, Debug)]
#[command(name = "mwtgc", version, about = "Multi-weight traffic graph convolution forecasting")]
struct Cli {
    /// TOML experiment configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Parallel ablation runs (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Output root directory.
    #[arg(long, global = true, env = "MWTGC_OUTPUT")]
    output: Option<PathBuf>,

    /// Repeat for more log detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    /// Directory with segments.csv and connections.csv.
    #[arg(long, requires = "speeds")]
    topology: Option<PathBuf>,

    /// Speed CSV aligned with the topology.
    #[arg(long, requires = "topology")]
    speeds: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct TopologyArg {
    /// Directory with segments.csv and connections.csv; synthetic if absent.
    #[arg(long)]
    topology: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ModelChoice {
    Mwtgc,
    Seq2seq,
    Both,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write rank-1..k inflow/outflow adjacency matrices.
    BuildGraph {
        #[command(flatten)]
        topology: TopologyArg,
        #[arg(long)]
        max_rank: Option<usize>,
    },
    /// Write the clipped weighted adjacency matrices and a manifest.
    GenWeights {
        #[command(flatten)]
        topology: TopologyArg,
        /// Kinds joined by '+' or ',', e.g. plain+speed_limit_ratio.
        #[arg(long)]
        kinds: Option<String>,
        #[arg(long)]
        max_rank: Option<usize>,
    },
    /// Generate a synthetic network and speed series in the real-data format.
    SynthData {
        #[arg(long)]
        days: Option<usize>,
    },
    /// Train a model and write its checkpoint and training log.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "mwtgc")]
        model: ModelChoice,
        #[arg(long)]
        kinds: Option<String>,
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Also write SVG training curves.
        #[arg(long)]
        plots: bool,
    },
    /// Score checkpoints (and the HA baseline) on the test split.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Skip the historical-average baseline.
        #[arg(long)]
        no_ha: bool,
        #[arg(long)]
        plots: bool,
    },
    /// Train every weight-kind combination several times and tabulate.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        /// A combination such as plain+speed_limit_ratio; repeatable.
        #[arg(long = "combination")]
        combinations: Vec<String>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Use the same seed for every trial.
        #[arg(long)]
        same_seed: bool,
    },
    /// Diebold-Mariano test of the first loss file against the others.
    DmTest {
        #[arg(long = "losses", required = true)]
        losses: Vec<PathBuf>,
        /// Autocovariance lag (default T_p - 1).
        #[arg(long)]
        lag: Option<usize>,
    },
    /// Export W_gc ⊙ W̃ restricted to a subset of segments.
    InspectWeights {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated segment ids.
        #[arg(long, value_delimiter = ',', required = true)]
        nodes: Vec<String>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(o) = &cli.output {
        cfg.paths.output = o.clone();
    }
    Ok(cfg)
}

fn apply_data(cfg: &mut ExperimentConfig, data: &DataArgs) {
    if let (Some(t), Some(s)) = (&data.topology, &data.speeds) {
        cfg.paths.topology = Some(t.clone());
        cfg.paths.speeds = Some(s.clone());
    }
}

fn apply_topology(cfg: &mut ExperimentConfig, t: &TopologyArg) {
    if let Some(dir) = &t.topology {
        cfg.paths.topology = Some(dir.clone());
    }
}

fn kinds_arg(s: &Option<String>) -> Result<Option<Vec<WeightKind>>> {
    Ok(match s {
        Some(s) => Some(parse_kinds(s)?),
        None => None,
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let mut cfg = load_config(&cli)?;
    let out = cfg.paths.output.clone();

    match &cli.command {
        Command::BuildGraph { topology, max_rank } => {
            apply_topology(&mut cfg, topology);
            let k = max_rank.unwrap_or(cfg.max_rank);
            let network = experiment::load_network(&cfg)?;
            let files = experiment::write_adjacency(&network, k, &out)?;
            log::info!("wrote {} adjacency files to {}", files.len(), out.display());
        }
        Command::GenWeights {
            topology,
            kinds,
            max_rank,
        } => {
            apply_topology(&mut cfg, topology);
            if let Some(k) = kinds_arg(kinds)? {
                cfg.kinds = k;
            }
            if let Some(k) = max_rank {
                cfg.max_rank = *k;
            }
            cfg.validate()?;
            let network = experiment::load_network(&cfg)?;
            let manifest =
                experiment::write_weights(&network, &cfg.kinds, cfg.max_rank, &cfg.weights, &out)?;
            log::info!("wrote {} weight matrices to {}", manifest.matrices.len(), out.display());
        }
        Command::SynthData { days } => {
            if let Some(d) = days {
                cfg.synth.days = *d;
            }
            if let Some(seed) = cli.seed {
                cfg.synth.seed = seed;
            }
            let (network, series) = experiment::write_synthetic(&cfg.synth, &out)?;
            log::info!(
                "wrote {} segments × {} steps to {}",
                network.len(),
                series.len(),
                out.display()
            );
        }
        Command::Train {
            data,
            model,
            kinds,
            max_epochs,
            plots,
        } => {
            apply_data(&mut cfg, data);
            if let Some(k) = kinds_arg(kinds)? {
                cfg.kinds = k;
            }
            if let Some(e) = max_epochs {
                cfg.train.max_epochs = *e;
            }
            cfg.plots |= *plots;
            cfg.validate()?;
            let (network, series) = experiment::load_data(&cfg)?;
            let dataset = experiment::prepare_dataset(&cfg, series)?;
            experiment::write_config_dump(&cfg, &network, &out)?;
            let kinds = match model {
                ModelChoice::Mwtgc => vec![ModelKind::MwTgc],
                ModelChoice::Seq2seq => vec![ModelKind::Seq2Seq],
                ModelChoice::Both => vec![ModelKind::MwTgc, ModelKind::Seq2Seq],
            };
            for kind in kinds {
                let run = experiment::run_training(&cfg, kind, &network, &dataset, &out)?;
                let st = &run.outcome.state;
                println!(
                    "{}: best val RMSE {:.4} km/h at epoch {} of {} (early stop: {}) -> {}",
                    kind.name(),
                    st.best_val_rmse,
                    st.best_epoch,
                    st.epoch,
                    st.early_stopped,
                    run.checkpoint.display()
                );
                if cfg.plots {
                    let path = out.join(format!("loss_{}.svg", experiment::slug(kind.name())));
                    write_file(&path, &plot::loss_curve_svg(&st.history))?;
                }
            }
        }
        Command::Evaluate {
            data,
            checkpoints,
            no_ha,
            plots,
        } => {
            apply_data(&mut cfg, data);
            cfg.plots |= *plots;
            let models = checkpoints
                .iter()
                .map(|p| {
                    ModelParameters::load(p).with_context(|| format!("loading {}", p.display()))
                })
                .collect::<Result<Vec<_>>>()?;
            if let Some(m) = models.first() {
                if m.hyper.horizon != cfg.horizon || m.hyper.history != cfg.history {
                    cfg.history = m.hyper.history;
                    cfg.horizon = m.hyper.horizon;
                    cfg.horizons.retain(|&h| h <= cfg.horizon);
                }
            }
            cfg.validate()?;
            let (_, series) = experiment::load_data(&cfg)?;
            let dataset: Dataset = experiment::prepare_dataset(&cfg, series)?;
            let evals = experiment::evaluate_models(&models, &dataset, &cfg.horizons, !no_ha)?;
            experiment::write_evaluations(&evals, &dataset, &out)?;
            print!("{}", experiment::report_csv(&evals));
            if cfg.plots {
                write_file(&out.join("rmse_by_horizon.svg"), &plot::rmse_bars_svg(&evals))?;
            }
        }
        Command::Ablate {
            data,
            combinations,
            trials,
            max_epochs,
            same_seed,
        } => {
            apply_data(&mut cfg, data);
            if !combinations.is_empty() {
                cfg.ablation = combinations
                    .iter()
                    .map(|c| parse_kinds(c))
                    .collect::<mwtgc::Result<_>>()?;
            }
            if let Some(t) = trials {
                cfg.trials = *t;
            }
            if let Some(e) = max_epochs {
                cfg.train.max_epochs = *e;
            }
            cfg.validate()?;
            let (network, series) = experiment::load_data(&cfg)?;
            let dataset = experiment::prepare_dataset(&cfg, series)?;
            experiment::write_config_dump(&cfg, &network, &out)?;
            let policy = if *same_seed {
                SeedPolicy::Identical
            } else {
                SeedPolicy::Distinct
            };
            let table = experiment::run_ablation(&cfg, &network, &dataset, policy, &out)?;
            print!("{}", table.to_markdown());
            if table.rows.iter().any(|r| r.failure.is_some()) {
                bail!("one or more ablation combinations failed; see ablation.csv");
            }
        }
        Command::DmTest { losses, lag } => {
            let series = losses
                .iter()
                .map(|p| experiment::read_losses(p).with_context(|| format!("reading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            let rows = experiment::dm_against_first(&series, lag.unwrap_or(cfg.dm_lag()))?;
            let text = experiment::dm_csv(&rows);
            write_file(&out.join("dm_test.csv"), &text)?;
            print!("{text}");
        }
        Command::InspectWeights { checkpoint, nodes } => {
            let model = ModelParameters::load(checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let products = experiment::inspect_weights(&model, nodes)?;
            let files = experiment::write_inspection(&products, nodes, &out)?;
            log::info!("wrote {} matrices to {}", files.len(), out.display());
        }
    }
    Ok(())
}
