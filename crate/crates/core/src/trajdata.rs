//! Trajectory ingestion: NGSIM-style CSV parsing, unit normalization and
//! reconstruction of ego-leader car-following episodes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sampling interval of the trajectory data in seconds (10 Hz).
pub const FRAME_DT: f64 = 0.1;
/// Feet to meters.
pub const FEET_TO_METERS: f64 = 0.3048;
/// Episodes shorter than this many frames are dropped by default (5 s).
pub const DEFAULT_MIN_LENGTH: usize = 50;
/// Version tag written into episode files.
pub const EPISODE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrajError {
    #[error("schema error: required column `{0}` not found in header")]
    MissingColumn(String),
    #[error("parse error at row {row}, column `{column}`: cannot parse {value:?}")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("invalid value at row {row}, column `{column}`: {reason}")]
    InvalidValue {
        row: usize,
        column: String,
        reason: String,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("episode file error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid episode `{id}`: {reason}")]
    InvalidEpisode { id: String, reason: String },
    #[error("unsupported episode format version {0}")]
    FormatVersion(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UnitSystem {
    #[default]
    Feet,
    Meters,
}

impl UnitSystem {
    /// Multiplier from this unit system's length unit to meters.
    pub fn to_meters(self) -> f64 {
        match self {
            UnitSystem::Feet => FEET_TO_METERS,
            UnitSystem::Meters => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleClass {
    Motorcycle,
    Auto,
    Truck,
}

impl VehicleClass {
    /// NGSIM codes: 1 motorcycle, 2 auto, 3 truck.
    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            1 => Some(VehicleClass::Motorcycle),
            2 => Some(VehicleClass::Auto),
            3 => Some(VehicleClass::Truck),
            _ => None,
        }
    }
}

/// One 100 ms observation of one vehicle, in SI units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFrame {
    pub vehicle_id: i64,
    pub frame_index: i64,
    pub local_x: f64,
    pub local_y: f64,
    pub velocity: f64,
    pub acceleration: f64,
    pub lane_id: i64,
    /// 0 when there is no leader.
    pub preceding_id: i64,
    /// 0 when there is no follower.
    pub following_id: i64,
    pub vehicle_length: f64,
    pub vehicle_class: VehicleClass,
}

/// Column names for each frame field. Optional columns fall back to
/// defaults when absent from the mapping or the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMapping {
    pub vehicle_id: String,
    pub frame_index: String,
    pub local_x: String,
    pub local_y: String,
    pub velocity: String,
    pub lane_id: String,
    pub preceding_id: String,
    pub vehicle_length: String,
    pub acceleration: Option<String>,
    pub following_id: Option<String>,
    pub vehicle_class: Option<String>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        ColumnMapping {
            vehicle_id: "Vehicle_ID".into(),
            frame_index: "Frame_ID".into(),
            local_x: "Local_X".into(),
            local_y: "Local_Y".into(),
            velocity: "v_Vel".into(),
            lane_id: "Lane_ID".into(),
            preceding_id: "Preceding".into(),
            vehicle_length: "v_Length".into(),
            acceleration: Some("v_Acc".into()),
            following_id: Some("Following".into()),
            vehicle_class: Some("v_Class".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvOptions {
    pub delimiter: u8,
    pub unit_system: UnitSystem,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            delimiter: b',',
            unit_system: UnitSystem::Feet,
        }
    }
}

struct ColumnIndex {
    vehicle_id: usize,
    frame_index: usize,
    local_x: usize,
    local_y: usize,
    velocity: usize,
    lane_id: usize,
    preceding_id: usize,
    vehicle_length: usize,
    acceleration: Option<usize>,
    following_id: Option<usize>,
    vehicle_class: Option<usize>,
}

impl ColumnIndex {
    fn resolve(header: &csv::StringRecord, map: &ColumnMapping) -> Result<Self, TrajError> {
        let find = |name: &str| header.iter().position(|h| h.trim() == name);
        let required = |name: &str| find(name).ok_or_else(|| TrajError::MissingColumn(name.to_string()));
        Ok(ColumnIndex {
            vehicle_id: required(&map.vehicle_id)?,
            frame_index: required(&map.frame_index)?,
            local_x: required(&map.local_x)?,
            local_y: required(&map.local_y)?,
            velocity: required(&map.velocity)?,
            lane_id: required(&map.lane_id)?,
            preceding_id: required(&map.preceding_id)?,
            vehicle_length: required(&map.vehicle_length)?,
            acceleration: map.acceleration.as_deref().and_then(find),
            following_id: map.following_id.as_deref().and_then(find),
            vehicle_class: map.vehicle_class.as_deref().and_then(find),
        })
    }
}

struct RowReader<'a> {
    record: &'a csv::StringRecord,
    row: usize,
}

impl RowReader<'_> {
    fn cell(&self, idx: usize, column: &str) -> Result<&str, TrajError> {
        self.record
            .get(idx)
            .map(str::trim)
            .ok_or_else(|| TrajError::Parse {
                row: self.row,
                column: column.to_string(),
                value: String::new(),
            })
    }

    fn float(&self, idx: usize, column: &str) -> Result<f64, TrajError> {
        let raw = self.cell(idx, column)?;
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(TrajError::Parse {
                row: self.row,
                column: column.to_string(),
                value: raw.to_string(),
            }),
        }
    }

    /// Integer columns occasionally come as `7.0`; accept integral floats.
    fn int(&self, idx: usize, column: &str) -> Result<i64, TrajError> {
        let raw = self.cell(idx, column)?;
        if let Ok(v) = raw.parse::<i64>() {
            return Ok(v);
        }
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() && v.fract() == 0.0 => Ok(v as i64),
            _ => Err(TrajError::Parse {
                row: self.row,
                column: column.to_string(),
                value: raw.to_string(),
            }),
        }
    }
}

/// Parse an NGSIM-style CSV file into frames grouped by vehicle and sorted
/// by frame index. An empty file yields no frames.
pub fn parse_csv(
    path: &Path,
    schema: &ColumnMapping,
    options: CsvOptions,
) -> Result<Vec<TrajectoryFrame>, TrajError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_csv_bytes(&bytes, schema, options)
}

pub fn parse_csv_bytes(
    bytes: &[u8],
    schema: &ColumnMapping,
    options: CsvOptions,
) -> Result<Vec<TrajectoryFrame>, TrajError> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let header = reader.headers()?.clone();
    let cols = ColumnIndex::resolve(&header, schema)?;
    let scale = options.unit_system.to_meters();

    let mut frames = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        // Row numbers are 1-based data rows; the header is row 0.
        let row = RowReader { record: &record, row: i + 1 };
        let velocity = row.float(cols.velocity, &schema.velocity)? * scale;
        if velocity < 0.0 {
            return Err(TrajError::InvalidValue {
                row: i + 1,
                column: schema.velocity.clone(),
                reason: "negative velocity".into(),
            });
        }
        let vehicle_length = row.float(cols.vehicle_length, &schema.vehicle_length)? * scale;
        if vehicle_length <= 0.0 {
            return Err(TrajError::InvalidValue {
                row: i + 1,
                column: schema.vehicle_length.clone(),
                reason: "vehicle length must be positive".into(),
            });
        }
        let acceleration = match cols.acceleration {
            Some(idx) => row.float(idx, schema.acceleration.as_deref().unwrap_or_default())? * scale,
            None => 0.0,
        };
        let following_id = match cols.following_id {
            Some(idx) => row.int(idx, schema.following_id.as_deref().unwrap_or_default())?,
            None => 0,
        };
        let vehicle_class = match cols.vehicle_class {
            Some(idx) => {
                let column = schema.vehicle_class.as_deref().unwrap_or_default();
                let code = row.int(idx, column)?;
                VehicleClass::from_code(code).ok_or_else(|| TrajError::InvalidValue {
                    row: i + 1,
                    column: column.to_string(),
                    reason: format!("unknown vehicle class code {code}"),
                })?
            }
            None => VehicleClass::Auto,
        };
        frames.push(TrajectoryFrame {
            vehicle_id: row.int(cols.vehicle_id, &schema.vehicle_id)?,
            frame_index: row.int(cols.frame_index, &schema.frame_index)?,
            local_x: row.float(cols.local_x, &schema.local_x)? * scale,
            local_y: row.float(cols.local_y, &schema.local_y)? * scale,
            velocity,
            acceleration,
            lane_id: row.int(cols.lane_id, &schema.lane_id)?,
            preceding_id: row.int(cols.preceding_id, &schema.preceding_id)?,
            following_id,
            vehicle_length,
            vehicle_class,
        });
    }
    // Stable sort keeps the first occurrence of a duplicated (vehicle, frame).
    frames.sort_by_key(|f| (f.vehicle_id, f.frame_index));
    frames.dedup_by_key(|f| (f.vehicle_id, f.frame_index));
    Ok(frames)
}

/// Reasons an episode was cut short.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anomaly {
    /// The bumper-to-bumper gap reached zero or below.
    NonpositiveGap,
    /// The leader named in `preceding_id` had no frame at the same time.
    MissingLeader,
    /// The ego record skipped one or more frame indices.
    FrameGap,
}

impl Anomaly {
    pub fn as_str(self) -> &'static str {
        match self {
            Anomaly::NonpositiveGap => "nonpositive_gap",
            Anomaly::MissingLeader => "missing_leader",
            Anomaly::FrameGap => "frame_gap",
        }
    }
}

/// A contiguous car-following segment with a single leader in a single lane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FollowEpisode {
    pub episode_id: String,
    pub driver_id: i64,
    pub leader_id: i64,
    pub lane_id: i64,
    pub start_frame: i64,
    pub dt: f64,
    pub length: usize,
    pub ego_velocity: Vec<f64>,
    pub leader_velocity: Vec<f64>,
    pub gap: Vec<f64>,
    /// Set when the episode ended early because of a data anomaly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncated_by: Option<Anomaly>,
}

impl FollowEpisode {
    pub fn len(&self) -> usize {
        self.ego_velocity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ego_velocity.is_empty()
    }

    /// Check the structural invariants: equal series lengths of at least two,
    /// positive gaps, non-negative finite velocities.
    pub fn validate(&self) -> Result<(), TrajError> {
        let bad = |reason: &str| TrajError::InvalidEpisode {
            id: self.episode_id.clone(),
            reason: reason.to_string(),
        };
        let n = self.ego_velocity.len();
        if n < 2 {
            return Err(bad("fewer than two frames"));
        }
        if self.leader_velocity.len() != n || self.gap.len() != n || self.length != n {
            return Err(bad("series lengths differ"));
        }
        if !(self.dt > 0.0) {
            return Err(bad("dt must be positive"));
        }
        if self.gap.iter().any(|g| !(*g > 0.0) || !g.is_finite()) {
            return Err(bad("non-positive gap"));
        }
        let velocities_ok = self
            .ego_velocity
            .iter()
            .chain(&self.leader_velocity)
            .all(|v| v.is_finite() && *v >= 0.0);
        if !velocities_ok {
            return Err(bad("negative or non-finite velocity"));
        }
        Ok(())
    }

    /// Contiguous sub-range `[start, end)` as a new episode.
    pub fn slice(&self, start: usize, end: usize, suffix: &str) -> FollowEpisode {
        FollowEpisode {
            episode_id: format!("{}{}", self.episode_id, suffix),
            driver_id: self.driver_id,
            leader_id: self.leader_id,
            lane_id: self.lane_id,
            start_frame: self.start_frame + start as i64,
            dt: self.dt,
            length: end - start,
            ego_velocity: self.ego_velocity[start..end].to_vec(),
            leader_velocity: self.leader_velocity[start..end].to_vec(),
            gap: self.gap[start..end].to_vec(),
            truncated_by: None,
        }
    }
}

struct OpenEpisode {
    driver_id: i64,
    leader_id: i64,
    lane_id: i64,
    start_frame: i64,
    last_frame: i64,
    ego_velocity: Vec<f64>,
    leader_velocity: Vec<f64>,
    gap: Vec<f64>,
}

impl OpenEpisode {
    fn close(self, truncated_by: Option<Anomaly>, min_length: usize, out: &mut Vec<FollowEpisode>) {
        let length = self.ego_velocity.len();
        if length < min_length {
            return;
        }
        out.push(FollowEpisode {
            episode_id: format!("{}-{}", self.driver_id, self.start_frame),
            driver_id: self.driver_id,
            leader_id: self.leader_id,
            lane_id: self.lane_id,
            start_frame: self.start_frame,
            dt: FRAME_DT,
            length,
            ego_velocity: self.ego_velocity,
            leader_velocity: self.leader_velocity,
            gap: self.gap,
            truncated_by,
        });
    }
}

/// Bumper-to-bumper spacing: leader position minus ego position minus leader
/// length, measured along `local_y`.
pub fn bumper_gap(ego: &TrajectoryFrame, leader: &TrajectoryFrame) -> f64 {
    leader.local_y - ego.local_y - leader.vehicle_length
}

/// Split each vehicle's record into car-following episodes.
///
/// An episode ends on a lane change, a leader change, a skipped frame, a
/// missing leader frame or a non-positive gap. Episodes shorter than
/// `min_length` frames are discarded. The output is ordered by driver and
/// start frame.
pub fn extract_episodes(frames: &[TrajectoryFrame], min_length: usize) -> Vec<FollowEpisode> {
    let min_length = min_length.max(2);
    let by_key: HashMap<(i64, i64), &TrajectoryFrame> =
        frames.iter().map(|f| ((f.vehicle_id, f.frame_index), f)).collect();

    let mut per_vehicle: BTreeMap<i64, Vec<&TrajectoryFrame>> = BTreeMap::new();
    for f in frames {
        per_vehicle.entry(f.vehicle_id).or_default().push(f);
    }

    let mut episodes = Vec::new();
    for (vehicle, mut record) in per_vehicle {
        record.sort_by_key(|f| f.frame_index);
        let mut open: Option<OpenEpisode> = None;
        for ego in record {
            // Decide whether this frame continues the open episode, and if
            // not, why the open one stops.
            let mut reason = None;
            let continues = match &open {
                Some(ep) => {
                    if ego.frame_index != ep.last_frame + 1 {
                        reason = Some(Anomaly::FrameGap);
                        false
                    } else {
                        ego.lane_id == ep.lane_id && ego.preceding_id == ep.leader_id
                    }
                }
                None => false,
            };

            let leader = (ego.preceding_id != 0)
                .then(|| by_key.get(&(ego.preceding_id, ego.frame_index)).copied())
                .flatten();
            let gap = leader.map(|l| bumper_gap(ego, l));
            let usable = matches!(gap, Some(g) if g > 0.0 && g.is_finite());
            if ego.preceding_id != 0 && leader.is_none() {
                reason = reason.or(Some(Anomaly::MissingLeader));
            } else if ego.preceding_id != 0 && !usable {
                reason = reason.or(Some(Anomaly::NonpositiveGap));
            }

            if continues && usable {
                let ep = open.as_mut().expect("open episode");
                ep.last_frame = ego.frame_index;
                ep.ego_velocity.push(ego.velocity);
                ep.leader_velocity.push(leader.expect("leader").velocity);
                ep.gap.push(gap.expect("gap"));
                continue;
            }

            if let Some(ep) = open.take() {
                // A clean lane or leader switch is not an anomaly.
                let tag = if continues || reason == Some(Anomaly::FrameGap) {
                    reason
                } else {
                    None
                };
                ep.close(tag, min_length, &mut episodes);
            }
            if usable {
                let leader = leader.expect("leader");
                open = Some(OpenEpisode {
                    driver_id: vehicle,
                    leader_id: ego.preceding_id,
                    lane_id: ego.lane_id,
                    start_frame: ego.frame_index,
                    last_frame: ego.frame_index,
                    ego_velocity: vec![ego.velocity],
                    leader_velocity: vec![leader.velocity],
                    gap: vec![gap.expect("gap")],
                });
            }
        }
        if let Some(ep) = open.take() {
            ep.close(None, min_length, &mut episodes);
        }
    }
    episodes
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub dataset_name: String,
    pub episode_count: usize,
    pub driver_count: usize,
    pub total_frames: usize,
    pub anomaly_counts: BTreeMap<String, usize>,
}

pub fn summarize(dataset_name: &str, episodes: &[FollowEpisode]) -> DatasetSummary {
    let drivers: BTreeSet<i64> = episodes.iter().map(|e| e.driver_id).collect();
    let mut anomaly_counts = BTreeMap::new();
    for a in episodes.iter().filter_map(|e| e.truncated_by) {
        *anomaly_counts.entry(a.as_str().to_string()).or_insert(0) += 1;
    }
    DatasetSummary {
        dataset_name: dataset_name.to_string(),
        episode_count: episodes.len(),
        driver_count: drivers.len(),
        total_frames: episodes.iter().map(FollowEpisode::len).sum(),
        anomaly_counts,
    }
}

/// Group episodes by driver, preserving input order within a driver.
pub fn group_by_driver(episodes: &[FollowEpisode]) -> BTreeMap<i64, Vec<FollowEpisode>> {
    let mut map: BTreeMap<i64, Vec<FollowEpisode>> = BTreeMap::new();
    for e in episodes {
        map.entry(e.driver_id).or_default().push(e.clone());
    }
    map
}

/// On-disk episode container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeFile {
    pub format_version: u32,
    pub episodes: Vec<FollowEpisode>,
}

impl EpisodeFile {
    pub fn new(episodes: Vec<FollowEpisode>) -> Self {
        EpisodeFile {
            format_version: EPISODE_FORMAT_VERSION,
            episodes,
        }
    }
}

pub fn write_episodes(path: &Path, episodes: &[FollowEpisode]) -> Result<(), TrajError> {
    let file = EpisodeFile::new(episodes.to_vec());
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

/// Load and validate an episode file.
pub fn read_episodes(path: &Path) -> Result<Vec<FollowEpisode>, TrajError> {
    let file: EpisodeFile = serde_json::from_slice(&fs::read(path)?)?;
    if file.format_version != EPISODE_FORMAT_VERSION {
        return Err(TrajError::FormatVersion(file.format_version));
    }
    for e in &file.episodes {
        e.validate()?;
    }
    Ok(file.episodes)
}
