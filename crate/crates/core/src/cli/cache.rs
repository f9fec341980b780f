//! On-disk cache of calibration results keyed by a hash of the data, the
//! search space, the trial budget and the seed.

use std::fs;
use std::path::PathBuf;

use log::debug;
use sha2::{Digest, Sha256};

use crate::calib::{CalibError, CalibrationResult, Calibrator, EpisodeFitter, SearchSpace};
use crate::trajdata::FollowEpisode;

const KEY_VERSION: &[u8] = b"drivercal-fit-v1";

pub struct CachedFitter {
    pub calibrator: Calibrator,
    dir: Option<PathBuf>,
}

impl CachedFitter {
    pub fn new(calibrator: Calibrator, dir: Option<PathBuf>) -> Self {
        CachedFitter { calibrator, dir }
    }

    pub fn key(&self, episodes: &[FollowEpisode], seed: u64) -> String {
        let mut h = Sha256::new();
        h.update(KEY_VERSION);
        let settings = serde_json::to_vec(&(
            &self.calibrator.space,
            self.calibrator.n_trials,
            &self.calibrator.idm,
            self.calibrator.pooling,
            seed,
        ))
        .expect("settings serialize");
        h.update((settings.len() as u64).to_le_bytes());
        h.update(&settings);
        h.update((episodes.len() as u64).to_le_bytes());
        for ep in episodes {
            h.update(ep.dt.to_le_bytes());
            h.update((ep.len() as u64).to_le_bytes());
            for series in [&ep.ego_velocity, &ep.leader_velocity, &ep.gap] {
                for x in series.iter() {
                    h.update(x.to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl EpisodeFitter for CachedFitter {
    fn space(&self) -> &SearchSpace {
        &self.calibrator.space
    }

    fn fit_episodes(&self, episodes: &[FollowEpisode], seed: u64) -> Result<CalibrationResult, CalibError> {
        let Some(dir) = &self.dir else {
            return self.calibrator.fit(episodes, seed);
        };
        let path = dir.join(format!("{}.json", self.key(episodes, seed)));
        if let Some(hit) = fs::read(&path).ok().and_then(|b| serde_json::from_slice(&b).ok()) {
            debug!("fit cache hit {}", path.display());
            return Ok(hit);
        }
        let result = self.calibrator.fit(episodes, seed)?;
        // A failed cache write only costs a refit next time.
        let tmp = path.with_extension("json.tmp");
        let written = serde_json::to_vec(&result)
            .ok()
            .map(|bytes| fs::create_dir_all(dir).and_then(|_| fs::write(&tmp, bytes)).and_then(|_| fs::rename(&tmp, &path)));
        if !matches!(written, Some(Ok(()))) {
            debug!("fit cache write failed for {}", path.display());
        }
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::idm::IdmParams;
    use crate::synth::{self, Archetype, LeaderProfile, PopulationSpec};

    fn episodes() -> Vec<FollowEpisode> {
        let spec = PopulationSpec {
            archetypes: vec![Archetype {
                name: "n".into(),
                weight: 1.0,
                params: IdmParams::new(30.0, 2.0, 1.5, 1.2, 2.0),
            }],
            action_noise_std: 0.3,
            leader_profile: LeaderProfile::StopAndGo { cruise_speed: 20.0 },
            n_drivers: 1,
            frames_per_driver: 200,
            frames_per_driver_max: None,
            resample_halves: false,
            seed: 1,
        };
        synth::generate(&spec).unwrap().0
    }

    #[test]
    fn cache_hit_matches_cold_fit() {
        let dir = tempfile::tempdir().unwrap();
        let eps = episodes();
        let f = CachedFitter::new(Calibrator::new(SearchSpace::default(), 40), Some(dir.path().join("cache")));
        let cold = f.fit_episodes(&eps, 5).unwrap();
        assert_eq!(fs::read_dir(dir.path().join("cache")).unwrap().count(), 1);
        let warm = f.fit_episodes(&eps, 5).unwrap();
        assert_eq!(cold, warm);
        assert_eq!(cold, Calibrator::new(SearchSpace::default(), 40).fit(&eps, 5).unwrap());
    }

    #[test]
    fn key_depends_on_inputs() {
        let eps = episodes();
        let f = CachedFitter::new(Calibrator::new(SearchSpace::default(), 40), None);
        let g = CachedFitter::new(Calibrator::new(SearchSpace::default(), 41), None);
        assert_eq!(f.key(&eps, 1), f.key(&eps, 1));
        assert_ne!(f.key(&eps, 1), f.key(&eps, 2));
        assert_ne!(f.key(&eps, 1), g.key(&eps, 1));
        let mut other = eps.clone();
        other[0].gap[3] += 1e-9;
        assert_ne!(f.key(&eps, 1), f.key(&other, 1));
    }
}
