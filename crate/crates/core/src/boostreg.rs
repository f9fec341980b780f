//! One-step gradient-boosted regression baseline.
//!
//! Trees are grown level-wise with exact greedy splits over presorted
//! features and squared loss. Each leaf stores the mean residual of the
//! samples that reach it; the model predicts
//! `base + learning_rate * sum(tree outputs)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::idm::{self, EgoState, EulerScheme, RolloutResult};
use crate::seed::rng_from;
use crate::trajdata::FollowEpisode;

/// Speed floor in the denominator of the gap in seconds.
pub const GAP_SPEED_FLOOR: f64 = 0.1;
pub const N_FEATURES: usize = 4;
pub const FEATURE_NAMES: [&str; N_FEATURES] = ["velocity", "gap_m", "gap_s", "delta_v"];

#[derive(Debug, Error)]
pub enum BoostError {
    #[error("invalid boosting config: {0}")]
    InvalidConfig(String),
    #[error("no training samples")]
    NoData,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub velocity: f64,
    pub gap_m: f64,
    pub gap_s: f64,
    /// Ego minus leader velocity.
    pub delta_v: f64,
}

impl FeatureVector {
    pub fn new(velocity: f64, gap_m: f64, leader_velocity: f64) -> Self {
        FeatureVector {
            velocity,
            gap_m,
            gap_s: gap_m / velocity.max(GAP_SPEED_FLOOR),
            delta_v: velocity - leader_velocity,
        }
    }

    pub fn as_array(&self) -> [f64; N_FEATURES] {
        [self.velocity, self.gap_m, self.gap_s, self.delta_v]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: FeatureVector,
    /// Velocity change to the next frame.
    pub target: f64,
}

/// One sample per consecutive frame pair, pooled over all episodes.
pub fn build_training_set(episodes: &[FollowEpisode]) -> Vec<Sample> {
    episodes.iter().flat_map(episode_samples).collect()
}

fn episode_samples(ep: &FollowEpisode) -> impl Iterator<Item = Sample> + '_ {
    (0..ep.len().saturating_sub(1)).map(move |t| Sample {
        features: FeatureVector::new(ep.ego_velocity[t], ep.gap[t], ep.leader_velocity[t]),
        target: ep.ego_velocity[t + 1] - ep.ego_velocity[t],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoostConfig {
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    /// Row fraction drawn without replacement per round. Training loss is
    /// only guaranteed non-increasing at 1.0.
    pub subsample: f64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        BoostConfig {
            rounds: 2000,
            max_depth: 4,
            learning_rate: 0.1,
            min_samples_leaf: 1,
            subsample: 1.0,
        }
    }
}

impl BoostConfig {
    pub fn validate(&self) -> Result<(), BoostError> {
        let bad = |m: &str| Err(BoostError::InvalidConfig(m.into()));
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        if self.max_depth == 0 {
            return bad("max_depth must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.min_samples_leaf == 0 {
            return bad("min_samples_leaf must be at least 1");
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad("subsample must be in (0, 1]");
        }
        Ok(())
    }
}

/// Regression tree in flat array form. Node 0 is the root; `feature < 0`
/// marks a leaf. Samples with `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub feature: Vec<i32>,
    pub threshold: Vec<f64>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    pub value: Vec<f64>,
}

impl Tree {
    fn leaf(value: f64) -> Self {
        Tree {
            feature: vec![-1],
            threshold: vec![0.0],
            left: vec![0],
            right: vec![0],
            value: vec![value],
        }
    }

    fn push_leaf(&mut self, value: f64) -> usize {
        self.feature.push(-1);
        self.threshold.push(0.0);
        self.left.push(0);
        self.right.push(0);
        self.value.push(value);
        self.feature.len() - 1
    }

    pub fn n_nodes(&self) -> usize {
        self.feature.len()
    }

    pub fn predict(&self, x: &[f64; N_FEATURES]) -> f64 {
        let mut node = 0;
        loop {
            let f = self.feature[node];
            if f < 0 {
                return self.value[node];
            }
            node = if x[f as usize] <= self.threshold[node] {
                self.left[node] as usize
            } else {
                self.right[node] as usize
            };
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostModel {
    pub base_prediction: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
}

impl BoostModel {
    /// Model without trees that always predicts `value`.
    pub fn constant(value: f64) -> Self {
        BoostModel {
            base_prediction: value,
            learning_rate: 1.0,
            trees: Vec::new(),
        }
    }

    pub fn predict(&self, fv: &FeatureVector) -> f64 {
        let x = fv.as_array();
        self.base_prediction + self.learning_rate * self.trees.iter().map(|t| t.predict(&x)).sum::<f64>()
    }

    pub fn write_json(&self, path: &Path) -> Result<(), BoostError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self, BoostError> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

/// Predicted velocity change for one frame.
pub fn predict_step(model: &BoostModel, fv: &FeatureVector) -> f64 {
    model.predict(fv)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: BoostModel,
    /// Training MSE after each round, starting with round 1.
    pub loss_history: Vec<f64>,
}

impl TrainOutcome {
    pub fn write_loss_csv(&self, path: &Path) -> Result<(), BoostError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["round", "loss"])?;
        for (i, loss) in self.loss_history.iter().enumerate() {
            w.write_record([(i + 1).to_string(), loss.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn train(samples: &[Sample], config: &BoostConfig, seed: u64) -> Result<TrainOutcome, BoostError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(BoostError::NoData);
    }
    let n = samples.len();
    let x: Vec<[f64; N_FEATURES]> = samples.iter().map(|s| s.features.as_array()).collect();
    let y: Vec<f64> = samples.iter().map(|s| s.target).collect();
    let base = y.iter().sum::<f64>() / n as f64;
    let sorted: Vec<Vec<usize>> = (0..N_FEATURES)
        .map(|f| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&i, &j| x[i][f].total_cmp(&x[j][f]).then(i.cmp(&j)));
            idx
        })
        .collect();

    let mut rng = rng_from(seed);
    let mut pred = vec![base; n];
    let mut residual = vec![0.0; n];
    let mut in_bag = vec![true; n];
    let mut trees = Vec::with_capacity(config.rounds);
    let mut loss_history = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        for i in 0..n {
            residual[i] = y[i] - pred[i];
        }
        if config.subsample < 1.0 {
            let k = ((n as f64 * config.subsample).round() as usize).max(1);
            in_bag.iter_mut().for_each(|b| *b = false);
            for i in rand::seq::index::sample(&mut rng, n, k) {
                in_bag[i] = true;
            }
        }
        let tree = grow_tree(&x, &residual, &in_bag, &sorted, config);
        let mut sq = 0.0;
        for i in 0..n {
            pred[i] += config.learning_rate * tree.predict(&x[i]);
            sq += (y[i] - pred[i]).powi(2);
        }
        loss_history.push(sq / n as f64);
        trees.push(tree);
    }
    Ok(TrainOutcome {
        model: BoostModel {
            base_prediction: base,
            learning_rate: config.learning_rate,
            trees,
        },
        loss_history,
    })
}

#[derive(Clone, Copy)]
struct Split {
    gain: f64,
    feature: usize,
    threshold: f64,
}

/// Accumulator for one open node while scanning a feature.
#[derive(Clone, Copy, Default)]
struct Scan {
    left_sum: f64,
    left_n: usize,
    last: f64,
}

fn grow_tree(
    x: &[[f64; N_FEATURES]],
    residual: &[f64],
    in_bag: &[bool],
    sorted: &[Vec<usize>],
    config: &BoostConfig,
) -> Tree {
    const NONE: usize = usize::MAX;
    let n = x.len();
    // Tree node each sample currently sits in, NONE once it reaches a leaf.
    let mut node_of: Vec<usize> = (0..n).map(|i| if in_bag[i] { 0 } else { NONE }).collect();
    let (sum, count) = (0..n)
        .filter(|&i| in_bag[i])
        .fold((0.0, 0usize), |(s, c), i| (s + residual[i], c + 1));
    let mut tree = Tree::leaf(sum / count as f64);
    // (tree node, sum, count) of nodes still eligible for splitting.
    let mut open: Vec<(usize, f64, usize)> = vec![(0, sum, count)];
    let mut slot = vec![NONE; 1];

    for _depth in 0..config.max_depth {
        if open.is_empty() {
            break;
        }
        slot.resize(tree.n_nodes(), NONE);
        for (k, &(node, _, _)) in open.iter().enumerate() {
            slot[node] = k;
        }
        let mut best: Vec<Option<Split>> = vec![None; open.len()];
        for (f, order) in sorted.iter().enumerate() {
            let mut scan = vec![Scan::default(); open.len()];
            for &i in order {
                let node = node_of[i];
                if node == NONE || slot[node] == NONE {
                    continue;
                }
                let k = slot[node];
                let (_, total, total_n) = open[k];
                let v = x[i][f];
                let s = &mut scan[k];
                if s.left_n >= config.min_samples_leaf
                    && total_n - s.left_n >= config.min_samples_leaf
                    && v > s.last
                {
                    let right_sum = total - s.left_sum;
                    let right_n = total_n - s.left_n;
                    let gain = s.left_sum * s.left_sum / s.left_n as f64
                        + right_sum * right_sum / right_n as f64
                        - total * total / total_n as f64;
                    if gain > 1e-12 && best[k].is_none_or(|b| gain > b.gain) {
                        let mid = 0.5 * (s.last + v);
                        let threshold = if mid < v { mid } else { s.last };
                        best[k] = Some(Split { gain, feature: f, threshold });
                    }
                }
                s.left_sum += residual[i];
                s.left_n += 1;
                s.last = v;
            }
        }

        let mut next_open = Vec::new();
        for (k, &(node, _, _)) in open.iter().enumerate() {
            slot[node] = NONE;
            if let Some(split) = best[k] {
                let l = tree.push_leaf(0.0);
                let r = tree.push_leaf(0.0);
                tree.feature[node] = split.feature as i32;
                tree.threshold[node] = split.threshold;
                tree.left[node] = l as u32;
                tree.right[node] = r as u32;
                next_open.push((l, 0.0, 0));
                next_open.push((r, 0.0, 0));
            }
        }
        let first_new = tree.n_nodes() - next_open.len();
        for i in 0..n {
            let node = node_of[i];
            if node == NONE {
                continue;
            }
            let f = tree.feature[node];
            if f < 0 {
                node_of[i] = NONE;
                continue;
            }
            let child = if x[i][f as usize] <= tree.threshold[node] {
                tree.left[node]
            } else {
                tree.right[node]
            } as usize;
            node_of[i] = child;
            let entry = &mut next_open[child - first_new];
            entry.1 += residual[i];
            entry.2 += 1;
        }
        for &(node, s, c) in &next_open {
            tree.value[node] = s / c as f64;
        }
        open = next_open;
    }
    tree
}

/// Closed-loop rollout: each frame's features come from the simulated state
/// and the predicted change is applied as a constant acceleration over `dt`.
pub fn rollout_boosted(
    model: &BoostModel,
    initial: EgoState,
    leader_velocities: &[f64],
    dt: f64,
    scheme: EulerScheme,
) -> RolloutResult {
    RolloutResult::simulate(initial, leader_velocities, |s, lead| {
        let dv = model.predict(&FeatureVector::new(s.velocity, s.gap, lead));
        idm::advance(s, dv / dt, lead, dt, scheme)
    })
}

/// Teacher-forced velocities: frame `t + 1` is the recorded frame `t` plus
/// the predicted change. Frame 0 is the recorded initial velocity.
pub fn open_loop_velocities(model: &BoostModel, ep: &FollowEpisode) -> Vec<f64> {
    let mut out = Vec::with_capacity(ep.len());
    if ep.len() == 0 {
        return out;
    }
    out.push(ep.ego_velocity[0]);
    for s in episode_samples(ep) {
        out.push(s.features.velocity + model.predict(&s.features));
    }
    out
}

pub fn rollout_episode(model: &BoostModel, ep: &FollowEpisode, scheme: EulerScheme) -> RolloutResult {
    let initial = EgoState {
        velocity: ep.ego_velocity[0],
        gap: ep.gap[0],
    };
    rollout_boosted(model, initial, &ep.leader_velocity, ep.dt, scheme)
}
