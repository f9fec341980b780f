//! Per-driver fitted parameters compared against the shared fit and the
//! band expected from refit noise alone.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::calib::{self, driver_seed, CalibrationResult, EpisodeFitter, FitNoiseEstimate};
use crate::idm::PARAM_NAMES;
use crate::trajdata::FollowEpisode;

/// Share of drivers expected inside a two-sigma band.
pub const EXPECTED_COVERAGE: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBand {
    pub name: String,
    pub shared: f64,
    pub refit_std: f64,
    pub lower: f64,
    pub upper: f64,
    /// Per-driver values in ascending driver-id order.
    pub values: Vec<f64>,
    pub in_band: usize,
    pub in_band_fraction: f64,
    /// In-band fraction below [`EXPECTED_COVERAGE`].
    pub diverse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDistributionReport {
    pub driver_ids: Vec<i64>,
    pub noise: FitNoiseEstimate,
    pub bands: Vec<ParamBand>,
}

impl ParamDistributionReport {
    pub fn band(&self, name: &str) -> Option<&ParamBand> {
        self.bands.iter().find(|b| b.name == name)
    }
}

pub fn param_distribution(
    fits: &BTreeMap<i64, CalibrationResult>,
    shared: &CalibrationResult,
    noise: &FitNoiseEstimate,
) -> Result<ParamDistributionReport, AnalysisError> {
    if fits.is_empty() {
        return Err(AnalysisError::NoFits);
    }
    let shared_values = shared.params.to_array();
    let bands = PARAM_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let values: Vec<f64> = fits.values().map(|r| r.params.to_array()[i]).collect();
            let refit_std = noise.std(name);
            let (lower, upper) = (shared_values[i] - 2.0 * refit_std, shared_values[i] + 2.0 * refit_std);
            let in_band = values.iter().filter(|v| **v >= lower && **v <= upper).count();
            let in_band_fraction = in_band as f64 / values.len() as f64;
            ParamBand {
                name: name.to_string(),
                shared: shared_values[i],
                refit_std,
                lower,
                upper,
                values,
                in_band,
                in_band_fraction,
                diverse: in_band_fraction < EXPECTED_COVERAGE,
            }
        })
        .collect();
    Ok(ParamDistributionReport {
        driver_ids: fits.keys().copied().collect(),
        noise: noise.clone(),
        bands,
    })
}

/// Refit noise averaged over drivers. Each driver's data is refitted
/// `n_repeats` times with seeds derived from its per-driver seed.
pub fn average_refit_noise<F: EpisodeFitter + ?Sized>(
    fitter: &F,
    groups: &BTreeMap<i64, Vec<FollowEpisode>>,
    n_repeats: usize,
    seed: u64,
) -> Result<FitNoiseEstimate, AnalysisError> {
    let drivers: Vec<(&i64, &Vec<FollowEpisode>)> = groups.iter().filter(|(_, e)| !e.is_empty()).collect();
    let estimates: Result<Vec<_>, _> = drivers
        .par_iter()
        .map(|(id, eps)| calib::fit_noise_with(fitter, eps, n_repeats, driver_seed(seed, **id)))
        .collect();
    FitNoiseEstimate::average(&estimates?).ok_or(AnalysisError::NoFits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::idm::IdmParams;

    fn result(p: IdmParams) -> CalibrationResult {
        CalibrationResult {
            params: p,
            objective: 0.0,
            n_trials: 1,
            seed: 0,
            trial_log: Vec::new(),
        }
    }

    fn noise(std: f64) -> FitNoiseEstimate {
        FitNoiseEstimate {
            n_repeats: 2,
            param_std: PARAM_NAMES.iter().map(|n| (n.to_string(), std)).collect(),
            mean_pairwise_distance: 0.0,
            mean_pairwise_normalized_distance: 0.0,
        }
    }

    #[test]
    fn zero_noise_band_counts_exact_matches() {
        let shared = IdmParams::new(30.0, 2.0, 1.5, 1.2, 2.0);
        let mut fits = BTreeMap::new();
        fits.insert(1, result(shared));
        fits.insert(2, result(IdmParams::new(30.0, 2.0, 1.6, 1.2, 2.0)));
        fits.insert(3, result(IdmParams::new(30.0, 2.5, 1.5, 1.2, 2.0)));
        fits.insert(4, result(shared));
        let r = param_distribution(&fits, &result(shared), &noise(0.0)).unwrap();
        let t = r.band("T").unwrap();
        assert_eq!(t.lower, t.upper);
        assert_eq!(t.in_band_fraction, 0.75);
        assert!(t.diverse);
        assert_eq!(r.band("v0").unwrap().in_band_fraction, 1.0);
        assert_eq!(r.band("s0").unwrap().in_band, 3);
    }

    #[test]
    fn band_is_two_sigma_and_inclusive() {
        let shared = IdmParams::new(30.0, 2.0, 1.5, 1.2, 2.0);
        let mut fits = BTreeMap::new();
        fits.insert(1, result(IdmParams::new(31.0, 2.0, 1.5, 1.2, 2.0)));
        fits.insert(2, result(IdmParams::new(28.0, 2.0, 1.5, 1.2, 2.0)));
        fits.insert(3, result(IdmParams::new(27.5, 2.0, 1.5, 1.2, 2.0)));
        let r = param_distribution(&fits, &result(shared), &noise(1.0)).unwrap();
        let v0 = r.band("v0").unwrap();
        assert_eq!((v0.lower, v0.upper), (28.0, 32.0));
        assert_eq!(v0.in_band, 2);
        assert!(r.bands.iter().all(|b| (0.0..=1.0).contains(&b.in_band_fraction) && b.upper >= b.lower));
    }

    #[test]
    fn empty_fits_rejected() {
        let p = result(IdmParams::new(30.0, 2.0, 1.5, 1.2, 2.0));
        assert_eq!(param_distribution(&BTreeMap::new(), &p, &noise(1.0)), Err(AnalysisError::NoFits));
    }
}
