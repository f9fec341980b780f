use std::collections::{BTreeMap, BTreeSet};

use log::{info, warn};
use serde::Serialize;

use super::cache::CachedFitter;
use super::svg::{self, Series};
use super::{
    create_dir, write_csv, write_json, Analysis, Cli, CliError, Command, FitMode, Format, Output, RolloutSource,
    RunConfig,
};
use crate::analysis::{
    consistency_experiment, diversity_metrics, param_distribution, params::average_refit_noise, ConsistencyReport,
    DiversityReport, Histogram, ThresholdMode,
};
use crate::boostreg;
use crate::calib::{driver_seed, fit_groups, CalibrationResult, Calibrator, EpisodeFitter};
use crate::idm::{self, EgoState, RolloutResult, PARAM_NAMES};
use crate::seed::{derive_seed, rng_from};
use crate::stats::Summary;
use crate::synth;
use crate::trajdata::{self, FollowEpisode};

const SHARED_STREAM: u64 = 0x7368_6172;
const ROLLOUT_STREAM: u64 = 0x726f_6c6c;
const BOOST_STREAM: u64 = 0x626f_6f73;

pub(crate) fn dispatch(cli: &Cli, cfg: &RunConfig) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest => ingest(cfg),
        Command::Synth => synthesize(cfg),
        Command::Fit { mode } => fit(&Run::load(cli, cfg)?, mode),
        Command::Rollout { source } => rollout(&Run::load(cli, cfg)?, source),
        Command::Analyze { which } => {
            let run = Run::load(cli, cfg)?;
            if matches!(which, Analysis::Diversity | Analysis::All) {
                diversity(&run)?;
            }
            if matches!(which, Analysis::Params | Analysis::All) {
                params(&run)?;
            }
            if matches!(which, Analysis::Consistency | Analysis::All) {
                consistency(&run)?;
            }
            Ok(())
        }
    }
}

fn num(x: f64) -> String {
    x.to_string()
}

fn ingest(cfg: &RunConfig) -> Result<(), CliError> {
    let csv = cfg.csv_path()?;
    let frames = trajdata::parse_csv(&csv, &cfg.dataset.columns, cfg.csv_options())?;
    let episodes = trajdata::extract_episodes(&frames, cfg.dataset.min_length);
    let summary = trajdata::summarize(&cfg.dataset.name, &episodes);
    info!(
        "{} frames -> {} episodes from {} drivers",
        frames.len(),
        summary.episode_count,
        summary.driver_count
    );
    let out = cfg.out_dir();
    create_dir(&out)?;
    let path = cfg.episodes_path();
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    trajdata::write_episodes(&path, &episodes)?;
    write_json(&out.join("summary.json"), &summary)
}

fn synthesize(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.population()?;
    let (episodes, labels) = synth::generate(&spec)?;
    let out = cfg.out_dir();
    create_dir(&out)?;
    let path = cfg.episodes_path();
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    trajdata::write_episodes(&path, &episodes)?;
    write_json(&out.join("labels.json"), &labels)?;
    write_json(&out.join("summary.json"), &trajdata::summarize(&cfg.dataset.name, &episodes))
}

/// Loaded episodes plus the fitter shared by every command in one run.
struct Run<'a> {
    cfg: &'a RunConfig,
    out: Output,
    fitter: CachedFitter,
    episodes: Vec<FollowEpisode>,
    groups: BTreeMap<i64, Vec<FollowEpisode>>,
}

impl<'a> Run<'a> {
    fn load(cli: &Cli, cfg: &'a RunConfig) -> Result<Self, CliError> {
        let path = cfg.episodes_path();
        if !path.is_file() {
            return Err(CliError::Config(format!(
                "episode file {} does not exist; run ingest or synth first",
                path.display()
            )));
        }
        let episodes = trajdata::read_episodes(&path)?;
        if episodes.is_empty() {
            return Err(CliError::NoData(path.display().to_string()));
        }
        let out = Output::new(cfg.out_dir(), &cli.format)?;
        let calibrator = Calibrator {
            space: cfg.space.clone(),
            n_trials: cfg.n_trials,
            idm: cfg.idm,
            pooling: cfg.pooling,
        };
        let cache_dir = (!cli.no_cache).then(|| out.dir.join("cache"));
        let groups = trajdata::group_by_driver(&episodes);
        Ok(Run {
            cfg,
            out,
            fitter: CachedFitter::new(calibrator, cache_dir),
            episodes,
            groups,
        })
    }

    fn seed(&self) -> u64 {
        self.cfg.seed
    }

    /// Seed of the pooled fit. With a single driver it equals that
    /// driver's per-driver seed, so both modes give the same result.
    fn shared_seed(&self) -> u64 {
        match self.groups.keys().collect::<Vec<_>>().as_slice() {
            [only] => driver_seed(self.seed(), **only),
            _ => derive_seed(self.seed(), &[SHARED_STREAM]),
        }
    }

    fn per_driver_fits(&self) -> Result<BTreeMap<i64, CalibrationResult>, CliError> {
        info!("fitting {} drivers", self.groups.len());
        Ok(fit_groups(&self.fitter, &self.groups, self.seed())?)
    }

    fn shared_fit(&self) -> Result<CalibrationResult, CliError> {
        info!("fitting shared model on {} episodes", self.episodes.len());
        Ok(self.fitter.fit_episodes(&self.episodes, self.shared_seed())?)
    }

    fn frames(&self, id: i64) -> usize {
        self.groups[&id].iter().map(FollowEpisode::len).sum()
    }

    fn strip(&self, mut r: CalibrationResult) -> CalibrationResult {
        if !self.cfg.trial_log {
            r.trial_log.clear();
        }
        r
    }
}

#[derive(Serialize)]
struct DriverFit {
    driver_id: i64,
    episodes: usize,
    frames: usize,
    mse: f64,
    result: CalibrationResult,
}

#[derive(Serialize)]
struct PerDriverReport<'a> {
    dataset: &'a str,
    seed: u64,
    n_trials: usize,
    mse: Summary,
    drivers: Vec<DriverFit>,
}

#[derive(Serialize)]
struct SharedReport<'a> {
    dataset: &'a str,
    seed: u64,
    n_trials: usize,
    /// Objective of the shared parameters on all episodes pooled together.
    pooled_objective: f64,
    /// Shared parameters scored on each driver separately.
    mse: Summary,
    per_driver_mse: BTreeMap<i64, f64>,
    result: CalibrationResult,
}

fn fit(run: &Run, mode: FitMode) -> Result<(), CliError> {
    let name = run.cfg.dataset.name.as_str();
    let calibrator = &run.fitter.calibrator;
    let mut table: Vec<Vec<String>> = Vec::new();
    let mut per_driver_mse: BTreeMap<i64, f64> = BTreeMap::new();
    let mut shared_mse: BTreeMap<i64, f64> = BTreeMap::new();
    let row = |mode: &str, s: &Summary| vec![name.to_string(), mode.to_string(), num(s.mean), num(s.se), num(s.sd)];

    if mode != FitMode::Shared {
        let fits = run.per_driver_fits()?;
        let drivers: Vec<DriverFit> = fits
            .into_iter()
            .map(|(id, r)| {
                let eps = &run.groups[&id];
                per_driver_mse.insert(id, r.objective);
                DriverFit {
                    driver_id: id,
                    episodes: eps.len(),
                    frames: run.frames(id),
                    mse: r.objective,
                    result: run.strip(r),
                }
            })
            .collect();
        let mse = Summary::of(&per_driver_mse.values().copied().collect::<Vec<_>>());
        table.push(row("per_driver", &mse));
        run.out.json(
            "fits_per_driver.json",
            &PerDriverReport {
                dataset: name,
                seed: run.seed(),
                n_trials: run.cfg.n_trials,
                mse,
                drivers,
            },
        )?;
    }
    if mode != FitMode::PerDriver {
        let shared = run.shared_fit()?;
        for (&id, eps) in &run.groups {
            shared_mse.insert(id, calibrator.objective(&shared.params, eps));
        }
        let mse = Summary::of(&shared_mse.values().copied().collect::<Vec<_>>());
        table.push(row("shared", &mse));
        run.out.json(
            "fit_shared.json",
            &SharedReport {
                dataset: name,
                seed: run.shared_seed(),
                n_trials: run.cfg.n_trials,
                pooled_objective: shared.objective,
                mse,
                per_driver_mse: shared_mse.clone(),
                result: run.strip(shared),
            },
        )?;
    }

    let mut header = vec!["driver_id", "episodes", "frames"];
    if mode != FitMode::Shared {
        header.push("mse_per_driver");
    }
    if mode != FitMode::PerDriver {
        header.push("mse_shared");
    }
    let rows = run.groups.iter().map(|(&id, eps)| {
        let mut r = vec![id.to_string(), eps.len().to_string(), run.frames(id).to_string()];
        r.extend(per_driver_mse.get(&id).map(|v| num(*v)));
        r.extend(shared_mse.get(&id).map(|v| num(*v)));
        r
    });
    run.out.csv("per_driver_mse.csv", &header, rows)?;
    run.out.csv("mse_table.csv", &["dataset", "mode", "mse_mean", "mse_se", "mse_sd"], table)
}

#[derive(Serialize)]
struct RolloutRecord {
    episode_id: String,
    driver_id: i64,
    frames: usize,
    rmse_velocity: f64,
    rmse_gap: f64,
    collided: bool,
    collision_frame: Option<usize>,
}

#[derive(Serialize)]
struct RolloutReport {
    source: &'static str,
    seed: u64,
    episodes: Vec<RolloutRecord>,
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()).max(1);
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64).sqrt()
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Seeded sample of episode indices in file order.
fn sample_episodes(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_from(derive_seed(seed, &[ROLLOUT_STREAM]));
    let mut idx = rand::seq::index::sample(&mut rng, n, k.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

fn rollout(run: &Run, source: RolloutSource) -> Result<(), CliError> {
    let chosen = sample_episodes(run.episodes.len(), run.cfg.rollout.episodes, run.seed());
    let sampled: Vec<&FollowEpisode> = chosen.iter().map(|&i| &run.episodes[i]).collect();
    let dir = run.out.subdir(&format!("rollouts/{}", source.as_str()))?;
    let idm_opts = run.cfg.idm;
    let idm_rollout = |p: &idm::IdmParams, ep: &FollowEpisode| {
        let initial = EgoState {
            velocity: ep.ego_velocity[0],
            gap: ep.gap[0],
        };
        idm::rollout(p, initial, &ep.leader_velocity, ep.dt, &idm_opts)
    };

    let results: Vec<RolloutResult> = match source {
        RolloutSource::IdmPerDriver => {
            let ids: BTreeSet<i64> = sampled.iter().map(|e| e.driver_id).collect();
            let subset: BTreeMap<i64, Vec<FollowEpisode>> =
                ids.iter().map(|id| (*id, run.groups[id].clone())).collect();
            let fits = fit_groups(&run.fitter, &subset, run.seed())?;
            sampled.iter().map(|ep| idm_rollout(&fits[&ep.driver_id].params, ep)).collect()
        }
        RolloutSource::IdmShared => {
            let shared = run.shared_fit()?;
            sampled.iter().map(|ep| idm_rollout(&shared.params, ep)).collect()
        }
        RolloutSource::Boosted => {
            let held_out: BTreeSet<usize> = chosen.iter().copied().collect();
            let mut train: Vec<FollowEpisode> = (0..run.episodes.len())
                .filter(|i| !held_out.contains(i))
                .map(|i| run.episodes[i].clone())
                .collect();
            if train.is_empty() {
                warn!("every episode was sampled for rollout; training the boosted model on all of them");
                train = run.episodes.clone();
            }
            let samples = boostreg::build_training_set(&train);
            info!("training boosted model on {} samples", samples.len());
            let outcome = boostreg::train(&samples, &run.cfg.boost, derive_seed(run.seed(), &[BOOST_STREAM]))?;
            write_json(&dir.join("boost_model.json"), &outcome.model)?;
            if run.out.wants(Format::Csv) {
                write_csv(
                    &dir.join("boost_loss.csv"),
                    &["round", "loss"],
                    outcome
                        .loss_history
                        .iter()
                        .enumerate()
                        .map(|(i, l)| vec![(i + 1).to_string(), num(*l)]),
                )?;
            }
            sampled
                .iter()
                .map(|ep| boostreg::rollout_episode(&outcome.model, ep, idm_opts.scheme))
                .collect()
        }
    };

    let mut records = Vec::new();
    for (ep, r) in sampled.iter().zip(&results) {
        let rows = (0..ep.len()).map(|k| {
            vec![
                num(k as f64 * ep.dt),
                num(ep.ego_velocity[k]),
                num(r.velocities[k]),
                num(ep.gap[k]),
                num(r.gaps[k]),
            ]
        });
        write_csv(
            &dir.join(format!("{}.csv", file_stem(&ep.episode_id))),
            &["t", "v_truth", "v_pred", "gap_truth", "gap_pred"],
            rows,
        )?;
        records.push(RolloutRecord {
            episode_id: ep.episode_id.clone(),
            driver_id: ep.driver_id,
            frames: ep.len(),
            rmse_velocity: rmse(&r.velocities, &ep.ego_velocity),
            rmse_gap: rmse(&r.gaps, &ep.gap),
            collided: r.collided,
            collision_frame: r.collision_frame,
        });
    }
    let name = |f: &str| format!("rollouts/{}/{f}", source.as_str());
    run.out.csv(
        &name("summary.csv"),
        &["episode_id", "driver_id", "frames", "rmse_velocity", "rmse_gap", "collided"],
        records.iter().map(|r| {
            vec![
                r.episode_id.clone(),
                r.driver_id.to_string(),
                r.frames.to_string(),
                num(r.rmse_velocity),
                num(r.rmse_gap),
                r.collided.to_string(),
            ]
        }),
    )?;
    run.out.json(
        &name("summary.json"),
        &RolloutReport {
            source: source.as_str(),
            seed: run.seed(),
            episodes: records,
        },
    )
}

#[derive(Serialize)]
struct DiversityFile<'a> {
    headway_cap: f64,
    min_speed: f64,
    reports: &'a [DiversityReport],
}

fn hist_rows<'a>(metric: &'a str, h: &'a Histogram) -> impl Iterator<Item = Vec<String>> + 'a {
    h.counts
        .iter()
        .enumerate()
        .map(move |(i, c)| vec![metric.to_string(), num(h.edges[i]), num(h.edges[i + 1]), c.to_string()])
}

fn diversity(run: &Run) -> Result<(), CliError> {
    let opts = &run.cfg.diversity;
    let reports: Vec<DiversityReport> = ThresholdMode::ALL
        .iter()
        .map(|&m| diversity_metrics(&run.groups, m, opts))
        .collect();
    for rep in &reports {
        let mode = rep.mode.as_str();
        for m in rep.metrics() {
            info!(
                "{mode} {}: {}/{} drivers included",
                m.name,
                m.per_driver.len(),
                m.total_drivers
            );
        }
        let rows = run.groups.keys().map(|id| {
            let mut r = vec![id.to_string()];
            r.extend(rep.metrics().iter().map(|m| m.per_driver.get(id).map(|v| num(*v)).unwrap_or_default()));
            r
        });
        run.out.csv(
            &format!("diversity_{mode}_drivers.csv"),
            &["driver_id", "acceleration", "deceleration", "min_headway"],
            rows,
        )?;
        let rows = rep.metrics().into_iter().flat_map(|m| hist_rows(&m.name, &m.histogram));
        run.out.csv(
            &format!("diversity_{mode}_hist.csv"),
            &["metric", "bin_lo", "bin_hi", "count"],
            rows,
        )?;
        for m in rep.metrics() {
            let title = format!("{} ({mode}, {}/{} drivers)", m.name, m.per_driver.len(), m.total_drivers);
            let x_label = format!("{} [{}]", m.name, m.unit);
            run.out.svg(
                &format!("diversity_{mode}_{}.svg", m.name),
                &svg::histogram(&title, &x_label, &m.histogram, None, None),
            )?;
        }
    }
    let rows = reports.iter().flat_map(|rep| {
        rep.metrics().map(|m| {
            let s = m.summary();
            vec![
                rep.mode.as_str().to_string(),
                m.name.clone(),
                m.unit.clone(),
                m.per_driver.len().to_string(),
                m.total_drivers.to_string(),
                num(m.inclusion_fraction),
                num(s.mean),
                num(s.sd),
            ]
        })
    });
    run.out.csv(
        "diversity_summary.csv",
        &["mode", "metric", "unit", "included", "total", "inclusion_fraction", "mean", "sd"],
        rows,
    )?;
    run.out.json(
        "diversity.json",
        &DiversityFile {
            headway_cap: opts.headway_cap,
            min_speed: opts.min_speed,
            reports: &reports,
        },
    )
}

fn params(run: &Run) -> Result<(), CliError> {
    let fits = run.per_driver_fits()?;
    let shared = run.shared_fit()?;
    info!("estimating refit noise with {} repeats per driver", run.cfg.params.refit_repeats);
    let noise = average_refit_noise(&run.fitter, &run.groups, run.cfg.params.refit_repeats, run.seed())?;
    let report = param_distribution(&fits, &shared, &noise)?;
    run.out.csv(
        "params_bands.csv",
        &["param", "shared", "refit_std", "lower", "upper", "in_band", "drivers", "in_band_fraction", "diverse"],
        report.bands.iter().map(|b| {
            vec![
                b.name.clone(),
                num(b.shared),
                num(b.refit_std),
                num(b.lower),
                num(b.upper),
                b.in_band.to_string(),
                b.values.len().to_string(),
                num(b.in_band_fraction),
                b.diverse.to_string(),
            ]
        }),
    )?;
    let mut header = vec!["driver_id"];
    header.extend(PARAM_NAMES);
    header.push("objective");
    run.out.csv(
        "params_drivers.csv",
        &header,
        fits.iter().map(|(id, r)| {
            let mut row = vec![id.to_string()];
            row.extend(r.params.to_array().iter().map(|v| num(*v)));
            row.push(num(r.objective));
            row
        }),
    )?;
    for b in &report.bands {
        let h = Histogram::from_values(&b.values, run.cfg.diversity.bins, None);
        let title = format!("{}: {:.0}% of drivers in the refit band", b.name, 100.0 * b.in_band_fraction);
        run.out.svg(
            &format!("params_{}.svg", b.name),
            &svg::histogram(&title, &b.name, &h, Some((b.lower, b.upper)), Some(b.shared)),
        )?;
    }
    run.out.json("params.json", &report)
}

fn consistency(run: &Run) -> Result<(), CliError> {
    let report: ConsistencyReport =
        consistency_experiment(&run.fitter, &run.groups, &run.cfg.consistency, run.seed())?;
    for r in &report.omitted {
        warn!("bucket [{}, {}) has fewer than two drivers and was omitted", r[0], r[1]);
    }
    run.out.csv(
        "consistency_buckets.csv",
        &[
            "bucket_lo",
            "bucket_hi",
            "drivers",
            "refit_mean",
            "refit_se",
            "same_mean",
            "same_se",
            "cross_mean",
            "cross_se",
            "refit_norm_mean",
            "same_norm_mean",
            "cross_norm_mean",
        ],
        report.buckets.iter().map(|b| {
            vec![
                b.range[0].to_string(),
                b.range[1].to_string(),
                b.driver_ids.len().to_string(),
                num(b.refit.raw.mean),
                num(b.refit.raw.se),
                num(b.same_driver.raw.mean),
                num(b.same_driver.raw.se),
                num(b.cross_driver.raw.mean),
                num(b.cross_driver.raw.se),
                num(b.refit.normalized.mean),
                num(b.same_driver.normalized.mean),
                num(b.cross_driver.normalized.mean),
            ]
        }),
    )?;
    run.out.csv(
        "consistency_drivers.csv",
        &["driver_id", "frames", "same_distance", "refit_distance"],
        report.drivers.iter().map(|d| {
            vec![
                d.driver_id.to_string(),
                d.frames.to_string(),
                num(d.same_distance),
                num(d.refit_distance),
            ]
        }),
    )?;
    run.out.csv(
        "consistency_test.csv",
        &["bucket_lo", "bucket_hi", "t", "df", "p_value", "same_mean", "cross_mean"],
        report.test.iter().map(|t| {
            vec![
                t.range[0].to_string(),
                t.range[1].to_string(),
                num(t.welch.statistic),
                num(t.welch.df),
                num(t.welch.p_value),
                num(t.same_mean),
                num(t.cross_mean),
            ]
        }),
    )?;
    let groups: Vec<String> = report.buckets.iter().map(|b| format!("{}-{}", b.range[0], b.range[1])).collect();
    let series = |name, pick: fn(&crate::analysis::consistency::BucketReport) -> &Summary| Series {
        name,
        points: report.buckets.iter().map(|b| (pick(b).mean, pick(b).se)).collect(),
    };
    let body = svg::error_bars(
        "parameter distance by data length",
        "L2 distance",
        &groups,
        &[
            series("refit noise", |b| &b.refit.raw),
            series("same driver", |b| &b.same_driver.raw),
            series("cross driver", |b| &b.cross_driver.raw),
        ],
    );
    run.out.svg("consistency.svg", &body)?;
    run.out.json("consistency.json", &report)
}
