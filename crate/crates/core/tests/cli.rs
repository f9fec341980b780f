use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use drivercal::boostreg::{self, BoostModel};
use drivercal::idm::{self, EgoState, IdmOptions, IdmParams};
use drivercal::trajdata::{read_episodes, FollowEpisode};
use serde_json::Value;

const ARCHETYPES: &str = r#"
[[synth.archetypes]]
name = "normal"
weight = 0.5
v0 = 30.0
s0 = 2.0
T = 1.5
a = 1.2
b = 2.0

[[synth.archetypes]]
name = "aggressive"
weight = 0.5
v0 = 33.0
s0 = 1.5
T = 0.9
a = 2.5
b = 2.5
"#;

fn synth_config(n_drivers: usize, frames: usize, trials: usize) -> String {
    format!(
        r#"seed = 5
output_dir = "out"
n_trials = {trials}

[dataset]
name = "toy"

[synth]
n_drivers = {n_drivers}
frames_per_driver = {frames}
action_noise_std = 0.3
leader_profile = {{ kind = "stop_and_go", cruise_speed = 20.0 }}
{ARCHETYPES}
[params]
refit_repeats = 2

[consistency]
buckets = [[100, 100000]]

[boost]
rounds = 30

[rollout]
episodes = 2
"#
    )
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.toml"), config).unwrap();
        Workspace { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.path("out").join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        let config = self.path("run.toml");
        Command::new(env!("CARGO_BIN_EXE_drivercal"))
            .args(args)
            .arg("--config")
            .arg(&config)
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let o = self.run(args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }

    fn json(&self, rel: &str) -> Value {
        serde_json::from_slice(&fs::read(self.out(rel)).unwrap()).unwrap()
    }
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let (header, rows) = read_csv(path);
    let k = header.iter().position(|h| h == name).unwrap();
    rows.iter().map(|r| r[k].parse().unwrap()).collect()
}

fn tree_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

const NGSIM_HEADER: &str = "Vehicle_ID,Frame_ID,Local_X,Local_Y,v_Vel,v_Acc,Lane_ID,Preceding,Following,v_Length,v_Class";

/// A leader at 30 ft/s and a follower 60 ft behind it, both in lane 1.
fn ngsim_csv(frames: i64) -> String {
    let mut s = format!("{NGSIM_HEADER}\n");
    for k in 0..frames {
        let y = 3.0 * k as f64;
        s += &format!("1,{},6.0,{},30.0,0.0,1,0,2,15.0,2\n", 100 + k, 200.0 + y);
        s += &format!("2,{},6.0,{},30.0,0.0,1,1,0,15.0,2\n", 100 + k, 125.0 + y);
    }
    s
}

fn ingest_config(csv: &str) -> String {
    format!("seed = 1\noutput_dir = \"out\"\n[dataset]\nname = \"ngsim_toy\"\ncsv = \"{csv}\"\n")
}

#[test]
fn ingest_writes_episodes_and_summary() {
    let ws = Workspace::new(&ingest_config("traj.csv"));
    fs::write(ws.path("traj.csv"), ngsim_csv(80)).unwrap();
    ws.ok(&["ingest"]);
    let eps = read_episodes(&ws.out("episodes.json")).unwrap();
    assert_eq!(eps.len(), 1);
    assert_eq!(eps[0].driver_id, 2);
    assert_eq!(eps[0].len(), 80);
    // 200 - 125 - 15 feet.
    assert!((eps[0].gap[0] - 60.0 * 0.3048).abs() < 1e-9);
    let summary = ws.json("summary.json");
    assert_eq!(summary["episode_count"], 1);
    assert_eq!(summary["driver_count"], 1);
    assert_eq!(summary["total_frames"], 80);
}

#[test]
fn ingest_missing_column_exits_2_and_names_it() {
    let ws = Workspace::new(&ingest_config("traj.csv"));
    let csv = ngsim_csv(5).replace(",v_Length,", ",Length,");
    fs::write(ws.path("traj.csv"), csv).unwrap();
    let o = ws.run(&["ingest"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("v_Length"));
}

#[test]
fn empty_csv_gives_empty_episode_file_then_fit_exits_4() {
    let ws = Workspace::new(&ingest_config("traj.csv"));
    fs::write(ws.path("traj.csv"), "").unwrap();
    ws.ok(&["ingest"]);
    assert!(read_episodes(&ws.out("episodes.json")).unwrap().is_empty());
    assert_eq!(ws.json("summary.json")["episode_count"], 0);
    assert_eq!(ws.run(&["fit"]).status.code(), Some(4));
    assert_eq!(ws.run(&["analyze"]).status.code(), Some(4));
}

#[test]
fn config_errors_exit_2() {
    let ws = Workspace::new(&ingest_config("absent.csv"));
    assert_eq!(ws.run(&["ingest"]).status.code(), Some(2));
    // No episode file yet.
    assert_eq!(ws.run(&["fit"]).status.code(), Some(2));
    assert_eq!(ws.run(&["fit", "--jobs", "0"]).status.code(), Some(2));
    let bad = Workspace::new("seed = 1\nn_trials = 0\n");
    assert_eq!(bad.run(&["fit"]).status.code(), Some(2));
    let unknown = Workspace::new("seed = 1\nn_trails = 10\n");
    let o = unknown.run(&["fit"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_trails"));
}

#[test]
fn synth_labels_cover_drivers_and_rerun_is_identical() {
    let ws = Workspace::new(&synth_config(4, 300, 50));
    ws.ok(&["synth"]);
    let first = tree_bytes(&ws.path("out"));
    let eps = read_episodes(&ws.out("episodes.json")).unwrap();
    let labels = ws.json("labels.json");
    let labels = labels.as_object().unwrap();
    assert_eq!(labels.len(), 4);
    for ep in &eps {
        assert!(labels.contains_key(&ep.driver_id.to_string()));
    }
    ws.ok(&["synth"]);
    assert_eq!(first, tree_bytes(&ws.path("out")));
}

#[test]
fn infeasible_archetype_exits_3_with_name() {
    let cfg = r#"seed = 1
output_dir = "out"
[synth]
n_drivers = 1
frames_per_driver = 400
action_noise_std = 0.0
leader_profile = { kind = "stop_and_go", cruise_speed = 25.0 }
[[synth.archetypes]]
name = "reckless"
weight = 1.0
v0 = 40.0
s0 = 0.0
T = 0.0
a = 1.0
b = 10000.0
"#;
    let ws = Workspace::new(cfg);
    let o = ws.run(&["synth"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("reckless"));
}

#[test]
fn invalid_population_spec_exits_2() {
    let ws = Workspace::new(&synth_config(4, 300, 50).replace("weight = 0.5\nv0 = 33.0", "weight = 0.7\nv0 = 33.0"));
    assert_eq!(ws.run(&["synth"]).status.code(), Some(2));
}

#[test]
fn fit_tables_and_per_driver_beats_shared() {
    let ws = Workspace::new(&synth_config(6, 500, 200));
    ws.ok(&["synth"]);
    ws.ok(&["fit"]);
    let (header, rows) = read_csv(&ws.out("mse_table.csv"));
    assert_eq!(header, ["dataset", "mode", "mse_mean", "mse_se", "mse_sd"]);
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][0].as_str(), rows[0][1].as_str()), ("toy", "per_driver"));
    assert_eq!(rows[1][1], "shared");
    let mse = column(&ws.out("mse_table.csv"), "mse_mean");
    assert!(mse[0] < mse[1], "per-driver {} vs shared {}", mse[0], mse[1]);

    // Aggregates are recomputed from the per-driver column.
    let per = column(&ws.out("per_driver_mse.csv"), "mse_per_driver");
    assert_eq!(per.len(), 6);
    let mean = per.iter().sum::<f64>() / 6.0;
    let sd = (per.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0).sqrt();
    let se_col = column(&ws.out("mse_table.csv"), "mse_se");
    let sd_col = column(&ws.out("mse_table.csv"), "mse_sd");
    assert!((mse[0] - mean).abs() < 1e-12);
    assert!((sd_col[0] - sd).abs() < 1e-12);
    assert!((se_col[0] - sd / 6f64.sqrt()).abs() < 1e-12);

    let fits = ws.json("fits_per_driver.json");
    assert_eq!(fits["drivers"].as_array().unwrap().len(), 6);
    assert!(fits["drivers"][0]["result"].get("trial_log").is_none());
}

#[test]
fn shared_fit_on_one_driver_equals_per_driver() {
    let ws = Workspace::new(&synth_config(1, 300, 80));
    ws.ok(&["synth"]);
    ws.ok(&["fit", "--mode", "per_driver"]);
    ws.ok(&["fit", "--mode", "shared"]);
    let per = ws.json("fits_per_driver.json");
    let shared = ws.json("fit_shared.json");
    assert_eq!(per["drivers"][0]["result"]["params"], shared["result"]["params"]);
    assert_eq!(per["drivers"][0]["result"]["objective"], shared["result"]["objective"]);
    assert_eq!(per["mse"]["mean"], shared["mse"]["mean"]);
}

#[test]
fn trial_log_is_opt_in() {
    let ws = Workspace::new(&synth_config(1, 200, 30).replace("n_trials = 30", "n_trials = 30\ntrial_log = true"));
    ws.ok(&["synth"]);
    ws.ok(&["fit", "--mode", "shared"]);
    assert_eq!(ws.json("fit_shared.json")["result"]["trial_log"].as_array().unwrap().len(), 30);
}

fn episode_by_id<'a>(eps: &'a [FollowEpisode], id: &str) -> &'a FollowEpisode {
    eps.iter().find(|e| e.episode_id == id).unwrap()
}

fn rollout_rows(ws: &Workspace, source: &str) -> Vec<(String, Vec<f64>, Vec<f64>)> {
    let (_, rows) = read_csv(&ws.out(&format!("rollouts/{source}/summary.csv")));
    rows.iter()
        .map(|r| {
            let p = ws.out(&format!("rollouts/{source}/{}.csv", r[0]));
            (r[0].clone(), column(&p, "v_pred"), column(&p, "gap_pred"))
        })
        .collect()
}

fn idm_reference(p: &IdmParams, ep: &FollowEpisode) -> idm::RolloutResult {
    let initial = EgoState {
        velocity: ep.ego_velocity[0],
        gap: ep.gap[0],
    };
    idm::rollout(p, initial, &ep.leader_velocity, ep.dt, &IdmOptions::default())
}

#[test]
fn rollouts_delegate_to_models() {
    let ws = Workspace::new(&synth_config(3, 300, 60));
    ws.ok(&["synth"]);
    ws.ok(&["fit"]);
    let eps = read_episodes(&ws.out("episodes.json")).unwrap();

    ws.ok(&["rollout", "--source", "idm_shared"]);
    let shared: IdmParams = serde_json::from_value(ws.json("fit_shared.json")["result"]["params"].clone()).unwrap();
    let rows = rollout_rows(&ws, "idm_shared");
    assert_eq!(rows.len(), 2);
    for (id, v, g) in &rows {
        let ep = episode_by_id(&eps, id);
        let r = idm_reference(&shared, ep);
        assert_eq!(v, &r.velocities);
        assert_eq!(g, &r.gaps);
        let truth = column(&ws.out(&format!("rollouts/idm_shared/{id}.csv")), "v_truth");
        assert_eq!(truth, ep.ego_velocity);
    }

    ws.ok(&["rollout", "--source", "idm_per_driver"]);
    let fits = ws.json("fits_per_driver.json");
    for (id, v, _) in rollout_rows(&ws, "idm_per_driver") {
        let ep = episode_by_id(&eps, &id);
        let d = fits["drivers"]
            .as_array()
            .unwrap()
            .iter()
            .find(|d| d["driver_id"] == ep.driver_id)
            .unwrap();
        let p: IdmParams = serde_json::from_value(d["result"]["params"].clone()).unwrap();
        assert_eq!(v, idm_reference(&p, ep).velocities);
    }

    ws.ok(&["rollout", "--source", "boosted"]);
    let model = BoostModel::read_json(&ws.out("rollouts/boosted/boost_model.json")).unwrap();
    assert_eq!(model.trees.len(), 30);
    let loss = column(&ws.out("rollouts/boosted/boost_loss.csv"), "loss");
    assert!(loss.windows(2).all(|w| w[1] <= w[0]));
    for (id, v, g) in rollout_rows(&ws, "boosted") {
        let r = boostreg::rollout_episode(&model, episode_by_id(&eps, &id), Default::default());
        assert_eq!(v, r.velocities);
        assert_eq!(g, r.gaps);
    }
}

#[test]
fn unknown_rollout_source_exits_2() {
    let ws = Workspace::new(&synth_config(1, 200, 20));
    ws.ok(&["synth"]);
    assert_eq!(ws.run(&["rollout", "--source", "lstm"]).status.code(), Some(2));
    assert_eq!(ws.run(&["analyze", "--which", "everything"]).status.code(), Some(2));
}

#[test]
fn diversity_histograms_conserve_drivers() {
    let ws = Workspace::new(&synth_config(7, 300, 20));
    ws.ok(&["synth"]);
    ws.ok(&["analyze", "--which", "diversity", "--format", "csv,json,svg"]);
    for mode in ["per_frame", "per_second"] {
        let (_, hist) = read_csv(&ws.out(&format!("diversity_{mode}_hist.csv")));
        let (_, drivers) = read_csv(&ws.out(&format!("diversity_{mode}_drivers.csv")));
        assert_eq!(drivers.len(), 7);
        for (k, metric) in ["acceleration", "deceleration", "min_headway"].iter().enumerate() {
            let total: usize = hist.iter().filter(|r| r[0] == *metric).map(|r| r[3].parse::<usize>().unwrap()).sum();
            let included = drivers.iter().filter(|r| !r[k + 1].is_empty()).count();
            assert_eq!(total, included, "{mode} {metric}");
            assert!(ws.out(&format!("diversity_{mode}_{metric}.svg")).is_file());
        }
    }
    assert!(!ws.out("params.json").exists());
}

#[test]
fn format_flag_selects_outputs() {
    let ws = Workspace::new(&synth_config(2, 200, 20));
    ws.ok(&["synth"]);
    ws.ok(&["fit", "--format", "json"]);
    assert!(ws.out("fits_per_driver.json").is_file());
    assert!(!ws.out("mse_table.csv").exists());
    ws.ok(&["analyze", "--which", "diversity", "--format", "svg"]);
    assert!(!ws.out("diversity.json").exists());
    assert!(ws.out("diversity_per_frame_acceleration.svg").is_file());
}

#[test]
fn analyze_all_rerun_and_cache_are_byte_identical() {
    let cfg = synth_config(4, 400, 40);
    let cached = Workspace::new(&cfg);
    cached.ok(&["synth"]);
    cached.ok(&["analyze", "--format", "csv,json,svg"]);
    let cold = tree_bytes(&cached.path("out"));
    assert!(cached.out("cache").read_dir().unwrap().count() > 0);
    // Second run is served from the cache.
    cached.ok(&["analyze", "--format", "csv,json,svg"]);
    assert_eq!(cold, tree_bytes(&cached.path("out")));

    let uncached = Workspace::new(&cfg);
    uncached.ok(&["synth"]);
    uncached.ok(&["analyze", "--format", "csv,json,svg", "--no-cache"]);
    let without: BTreeMap<_, _> = cold.into_iter().filter(|(p, _)| !p.starts_with("cache")).collect();
    assert_eq!(without, tree_bytes(&uncached.path("out")));

    let consistency = uncached.json("consistency.json");
    assert!(consistency["test"]["welch"]["p_value"].is_number());
    let params = uncached.json("params.json");
    assert_eq!(params["bands"].as_array().unwrap().len(), 5);
}

#[test]
fn seed_flag_overrides_config() {
    let ws = Workspace::new(&synth_config(2, 200, 20));
    ws.ok(&["synth"]);
    let a = fs::read(ws.out("episodes.json")).unwrap();
    ws.ok(&["synth", "--seed", "99"]);
    let b = fs::read(ws.out("episodes.json")).unwrap();
    assert_ne!(a, b);
    ws.ok(&["synth", "--seed", "5"]);
    assert_eq!(a, fs::read(ws.out("episodes.json")).unwrap());
}
