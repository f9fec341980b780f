use drivercal::boostreg::{self, BoostConfig, BoostModel, Sample};
use drivercal::idm::{EulerScheme, IdmParams};
use drivercal::synth::{self, Archetype, LeaderProfile, PopulationSpec};
use drivercal::trajdata::FollowEpisode;

fn spec(n_drivers: usize, frames: usize, noise: f64, seed: u64) -> PopulationSpec {
    PopulationSpec {
        archetypes: vec![Archetype {
            name: "normal".into(),
            weight: 1.0,
            params: IdmParams::new(30.0, 2.0, 1.5, 1.2, 2.0),
        }],
        action_noise_std: noise,
        leader_profile: LeaderProfile::StopAndGo { cruise_speed: 25.0 },
        n_drivers,
        frames_per_driver: frames,
        frames_per_driver_max: None,
        resample_halves: false,
        seed,
    }
}

fn episodes(n_drivers: usize, frames: usize, noise: f64, seed: u64) -> Vec<FollowEpisode> {
    synth::generate(&spec(n_drivers, frames, noise, seed)).unwrap().0
}

/// Brute-force k-nearest-neighbour regressor on standardized features.
struct Knn {
    x: Vec<[f64; 4]>,
    y: Vec<f64>,
    scale: [f64; 4],
    k: usize,
}

impl Knn {
    fn fit(samples: &[Sample], k: usize) -> Self {
        let x: Vec<[f64; 4]> = samples.iter().map(|s| s.features.as_array()).collect();
        let n = x.len() as f64;
        let scale = std::array::from_fn(|f| {
            let m = x.iter().map(|r| r[f]).sum::<f64>() / n;
            let sd = (x.iter().map(|r| (r[f] - m).powi(2)).sum::<f64>() / n).sqrt();
            if sd > 0.0 { sd } else { 1.0 }
        });
        Knn { x, y: samples.iter().map(|s| s.target).collect(), scale, k }
    }

    fn predict(&self, q: &[f64; 4]) -> f64 {
        let mut d: Vec<(f64, usize)> = self
            .x
            .iter()
            .enumerate()
            .map(|(i, r)| ((0..4).map(|f| ((r[f] - q[f]) / self.scale[f]).powi(2)).sum(), i))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d[..self.k].iter().map(|&(_, i)| self.y[i]).sum::<f64>() / self.k as f64
    }
}

fn rmse(errors: &[f64]) -> f64 {
    (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()
}

fn percentile_95(errors: &[f64]) -> f64 {
    let mut a: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
    a.sort_by(f64::total_cmp);
    a[((a.len() as f64 * 0.95).ceil() as usize).min(a.len()) - 1]
}

fn errors(samples: &[Sample], f: impl Fn(&Sample) -> f64) -> Vec<f64> {
    samples.iter().map(|s| f(s) - s.target).collect()
}

fn trained() -> (Vec<Sample>, BoostModel, Vec<f64>) {
    let train_set = boostreg::build_training_set(&episodes(1, 1000, 0.0, 31));
    let out = boostreg::train(&train_set, &BoostConfig::default(), 5).unwrap();
    (train_set, out.model, out.loss_history)
}

#[test]
fn training_fit_against_knn_oracle() {
    let (samples, model, loss) = trained();
    assert_eq!(loss.len(), 2000);
    for w in loss.windows(2) {
        assert!(w[1] <= w[0] + 1e-12);
    }
    let targets: Vec<f64> = samples.iter().map(|s| s.target).collect();
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let sd = (targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / targets.len() as f64).sqrt();
    let boosted = rmse(&errors(&samples, |s| model.predict(&s.features)));
    let knn = Knn::fit(&samples, 5);
    let oracle = rmse(&errors(&samples, |s| knn.predict(&s.features.as_array())));
    eprintln!("boosted {boosted} knn {oracle} sd {sd}");
    assert!(boosted < 0.1 * sd);
    assert!(boosted <= 2.0 * oracle);
}

#[test]
fn held_out_error_against_knn_oracle() {
    let (samples, model, _) = trained();
    let held_out = boostreg::build_training_set(&episodes(1, 400, 0.0, 77));
    let knn = Knn::fit(&samples, 5);
    let boosted = percentile_95(&errors(&held_out, |s| model.predict(&s.features)));
    let oracle = percentile_95(&errors(&held_out, |s| knn.predict(&s.features.as_array())));
    eprintln!("p95 boosted {boosted} knn {oracle}");
    assert!(boosted <= 2.0 * oracle);
}

#[test]
fn closed_loop_error_accumulates() {
    let train_eps = episodes(4, 800, 0.3, 12);
    let samples = boostreg::build_training_set(&train_eps);
    let cfg = BoostConfig { rounds: 500, ..BoostConfig::default() };
    let model = boostreg::train(&samples, &cfg, 1).unwrap().model;
    let test_eps = episodes(5, 100, 0.3, 99);

    let mut one_step = Vec::new();
    let mut terminal = Vec::new();
    for ep in &test_eps {
        let open = boostreg::open_loop_velocities(&model, ep);
        let closed = boostreg::rollout_episode(&model, ep, EulerScheme::SemiImplicit);
        let sq = |pred: &[f64]| -> f64 { pred.iter().zip(&ep.ego_velocity).map(|(p, t)| (p - t).powi(2)).sum() };
        let (open_sq, closed_sq) = (sq(&open), sq(&closed.velocities));
        assert!(open_sq <= closed_sq, "episode {}: open {open_sq} closed {closed_sq}", ep.episode_id);
        one_step.extend(open.iter().zip(&ep.ego_velocity).skip(1).map(|(p, t)| p - t));
        terminal.push(closed.velocities[99] - ep.ego_velocity[99]);
    }
    let (one, end) = (rmse(&one_step), rmse(&terminal));
    eprintln!("one-step rmse {one} 100-frame rmse {end}");
    assert!(end > one);
}
