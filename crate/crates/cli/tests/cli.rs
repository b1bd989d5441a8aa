use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mwtgc::data::Normalizer;
use mwtgc::model::{InitConfig, ModelKind, ModelParameters};
use mwtgc::network::RoadNetwork;
use mwtgc::weights::WeightConfig;

const SMALL: &str = r#"
history = 4
horizon = 4
horizons = [2, 4]
max_rank = 2
c_out = 2
workers = 1

[split]
train_days = 3
val_days = 1
test_days = 2
steps_per_day = 48

[train]
batch_size = 16
max_epochs = 2

[synth]
days = 6
steps_per_day = 48

[synth.topology]
type = "ring"
intersections = 3
chord_stride = 0
"#;

struct Env {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Env {
    fn new() -> Self {
        Self::with_config(SMALL)
    }

    fn with_config(text: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("small.toml");
        fs::write(&config, text).unwrap();
        Self { dir, config }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_mwtgc"))
            .arg("--config")
            .arg(&self.config)
            .args(args)
            .env_remove("MWTGC_OUTPUT")
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed:\n{}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn synth(&self, name: &str) -> (String, String) {
        let dir = self.path(name);
        self.ok(&["synth-data", "--output", dir.to_str().unwrap()]);
        (
            dir.to_str().unwrap().to_string(),
            dir.join("speeds.csv").to_str().unwrap().to_string(),
        )
    }
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn synth_train_evaluate_round_trip() {
    let env = Env::new();
    let (topo, speeds) = env.synth("data");
    assert!(read(&env.path("data/segments.csv")).starts_with("id,"));
    let run = env.path("run");
    let run_s = run.to_str().unwrap();
    let stdout = env.ok(&[
        "train", "--topology", &topo, "--speeds", &speeds, "--model", "both", "--output", run_s, "--plots",
    ]);
    assert!(stdout.contains("MW-TGC: best val RMSE") && stdout.contains("Seq2Seq: best val RMSE"), "{stdout}");
    for f in [
        "resolved_config.toml",
        "checkpoint_mw-tgc.json",
        "checkpoint_seq2seq.json",
        "train_log_mw-tgc.csv",
        "loss_mw-tgc.svg",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let log = read(&run.join("train_log_mw-tgc.csv"));
    assert!(log.starts_with("epoch,train_loss,val_rmse,lr,seconds\n"));
    assert_eq!(log.lines().count(), 3);

    let eval = env.path("eval");
    let report = env.ok(&[
        "evaluate",
        "--topology",
        &topo,
        "--speeds",
        &speeds,
        "--checkpoint",
        run.join("checkpoint_mw-tgc.json").to_str().unwrap(),
        "--checkpoint",
        run.join("checkpoint_seq2seq.json").to_str().unwrap(),
        "--output",
        eval.to_str().unwrap(),
        "--plots",
    ]);
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "model,horizon_min,rmse,mape,mad,mase");
    let rows: Vec<(String, String)> = lines[1..]
        .iter()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f.len(), 6);
            assert!(f[2..].iter().all(|v| v.parse::<f64>().unwrap().is_finite()));
            (f[0].to_string(), f[1].to_string())
        })
        .collect();
    let expected: Vec<(String, String)> = ["MW-TGC", "Seq2Seq", "HA"]
        .iter()
        .flat_map(|m| ["10", "20"].map(|h| (m.to_string(), h.to_string())))
        .collect();
    assert_eq!(rows, expected);
    assert_eq!(read(&eval.join("report.csv")), report);
    assert!(read(&eval.join("per_segment_mw-tgc_h4.csv")).starts_with("segment_id,rmse\n"));
    assert!(read(&eval.join("losses_ha.csv")).starts_with("model,window,timestamp,loss\n"));
    assert!(eval.join("rmse_by_horizon.svg").exists());

    // comparing a loss file with itself gives a zero statistic and p = 1
    let losses = eval.join("losses_mw-tgc.csv");
    let dm = env.ok(&[
        "dm-test",
        "--losses",
        losses.to_str().unwrap(),
        "--output",
        eval.to_str().unwrap(),
    ]);
    assert_eq!(dm, "model_a,model_b,statistic,p_value\nMW-TGC,MW-TGC,0,1\n");
    let dm = env.ok(&[
        "dm-test",
        "--losses",
        losses.to_str().unwrap(),
        "--losses",
        eval.join("losses_ha.csv").to_str().unwrap(),
        "--lag",
        "2",
        "--output",
        eval.to_str().unwrap(),
    ]);
    let row: Vec<&str> = dm.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[..2], ["MW-TGC", "HA"]);
    let p: f64 = row[3].parse().unwrap();
    assert!((0.0..=1.0).contains(&p));
    assert_eq!(read(&eval.join("dm_test.csv")), dm);
}

#[test]
fn evaluate_rejects_a_different_network() {
    let env = Env::new();
    let (topo, speeds) = env.synth("data");
    let run = env.path("run");
    env.ok(&["train", "--topology", &topo, "--speeds", &speeds, "--output", run.to_str().unwrap()]);

    let other = Env::with_config(&SMALL.replace("intersections = 3", "intersections = 4"));
    let (topo2, speeds2) = other.synth("data");
    let out = env.run(&[
        "evaluate",
        "--topology",
        &topo2,
        "--speeds",
        &speeds2,
        "--checkpoint",
        run.join("checkpoint_mw-tgc.json").to_str().unwrap(),
        "--output",
        env.path("eval").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("segment"), "{err}");
}

#[test]
fn ablate_single_trial_leaves_std_empty() {
    let env = Env::new();
    let out_dir = env.path("ablate");
    let out = env.run(&[
        "ablate",
        "--trials",
        "1",
        "--combination",
        "plain",
        "--combination",
        "plain+ratio",
        "--output",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("trials = 1"), "{stderr}");
    let md = String::from_utf8(out.stdout).unwrap();
    assert!(md.contains("| plain") && md.contains("plain+speed_limit_ratio"));
    assert!(!md.contains('±'));
    let csv = read(&out_dir.join("ablation.csv"));
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "kinds,horizon_min,trials,rmse_mean,rmse_std,mape_mean,mape_std,mad_mean,mad_std,mase_mean,mase_std,best,error"
    );
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[2], "1");
    assert_eq!(first[4], "");
    assert!(out_dir.join("plain/trial_0_report.csv").exists());
}

#[test]
fn inspect_untrained_checkpoint_matches_clipped_weights() {
    let env = Env::new();
    let (topo, _) = env.synth("data");
    let network = RoadNetwork::load(Path::new(&topo)).unwrap();
    let cfg = mwtgc::experiment::ExperimentConfig::from_toml_str(SMALL).unwrap();
    let model = ModelParameters::new(
        ModelKind::MwTgc,
        cfg.hyperparameters(&cfg.kinds, network.len()),
        &network,
        &WeightConfig::default(),
        Normalizer::identity(),
        1,
        InitConfig {
            wgc_noise: 0.0,
            ..InitConfig::default()
        },
    )
    .unwrap();
    let ckpt = env.path("untrained.json");
    model.save(&ckpt).unwrap();

    let weights = env.path("weights");
    env.ok(&["gen-weights", "--topology", &topo, "--output", weights.to_str().unwrap()]);
    let inspect = env.path("inspect");
    let ids = network.labels();
    let nodes = format!("{},{}", ids[0], ids[2]);
    env.ok(&[
        "inspect-weights",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--nodes",
        &nodes,
        "--output",
        inspect.to_str().unwrap(),
    ]);

    let stem = "speed_limit_ratio_out_k1";
    let text = read(&inspect.join(format!("inspect_{stem}.csv")));
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), format!("segment_id,{nodes}"));
    let mut got = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        got.extend(f[1..].iter().map(|v| v.parse::<f64>().unwrap()));
    }
    let mut expected = vec![0.0; 4];
    for line in read(&weights.join(format!("weight_{stem}.csv"))).lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let r = [&ids[0], &ids[2]].iter().position(|id| id.as_str() == f[0]);
        let c = [&ids[0], &ids[2]].iter().position(|id| id.as_str() == f[1]);
        if let (Some(r), Some(c)) = (r, c) {
            expected[r * 2 + c] = f[2].parse().unwrap();
        }
    }
    assert_eq!(got, expected);
    assert_eq!((got[0], got[3]), (1.0, 1.0));
    let files = fs::read_dir(&inspect).unwrap().count();
    assert_eq!(files, 2 * 2 * 2);
}

#[test]
fn graph_and_weight_outputs_are_idempotent() {
    let env = Env::new();
    let (topo, _) = env.synth("data");
    let snapshot = |dir: &Path| {
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
            })
            .collect();
        files.sort();
        files
    };
    let a = env.path("a");
    let b = env.path("b");
    for dir in [&a, &b] {
        let d = dir.to_str().unwrap();
        env.ok(&["build-graph", "--topology", &topo, "--max-rank", "3", "--output", d]);
        env.ok(&["gen-weights", "--topology", &topo, "--kinds", "all", "--output", d]);
    }
    let sa = snapshot(&a);
    assert_eq!(sa, snapshot(&b));
    let names: Vec<&str> = sa.iter().map(|(n, _)| n.as_str()).collect();
    assert!(names.contains(&"adjacency_out_k3.csv") && names.contains(&"weights_manifest.json"));
    assert_eq!(names.iter().filter(|n| n.starts_with("weight_")).count(), 6 * 2 * 2);
    let adj = String::from_utf8(sa.iter().find(|(n, _)| n == "adjacency_in_k1.csv").unwrap().1.clone()).unwrap();
    assert!(adj.starts_with("row,col,paths\n"));
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let env = Env::with_config("histroy = 3\n");
    let out = env.run(&["synth-data", "--output", env.path("x").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("histroy"));

    let env = Env::new();
    let out = env.run(&["gen-weights", "--kinds", "plain+bogus", "--output", env.path("w").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    let out = env.run(&[
        "train",
        "--topology",
        env.path("missing").to_str().unwrap(),
        "--speeds",
        env.path("missing/speeds.csv").to_str().unwrap(),
        "--output",
        env.path("t").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}
