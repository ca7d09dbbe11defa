//! Trajectory data model, NGSIM-schema ingestion, preprocessing, a
//! synthetic styled-driver generator and sub-trajectory samplers.

mod ingest;
mod preprocess;
mod sampling;
mod savgol;
mod synthetic;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use numkit::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{DsdpError, Result};
use crate::trafficsim::GRAVITY;

pub use ingest::{group_by_vehicle, ingest_csv, read_records, write_csv, RawRecord, CSV_COLUMNS};
pub use preprocess::{preprocess, PreprocessConfig, PreprocessReport, Split};
pub use sampling::{sample_subtrajectory_pair, window_starts};
pub use savgol::savgol;
pub use synthetic::{
    generate_synthetic, leader_profile, StyleCluster, SyntheticData, SyntheticSpec,
};

pub const OBS_DIM: usize = 5;
/// Observation channels followed by the action channel.
pub const STEP_CHANNELS: usize = OBS_DIM + 1;
pub const DEFAULT_LP: usize = 5;

/// Normalized `[ego_v, space_headway, time_headway, leader_v, leader_prev_v]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub [f64; OBS_DIM]);

/// Normalized acceleration in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action(pub f64);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub obs: Observation,
    pub action: Action,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeaderState {
    pub position: f64,
    pub velocity: f64,
    pub length: f64,
}

/// Cleaned physical state behind one step, in SI units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kinematics {
    pub position: f64,
    pub velocity: f64,
    pub accel: f64,
    pub length: f64,
    pub leader: Option<LeaderState>,
}

/// One driver's segment at 10 Hz.
///
/// `steps[i]` and `kinematics[i]` describe the same frame. The hidden style
/// label exists only for synthetic data and only evaluation code reads it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub driver_id: u64,
    pub start_frame: u64,
    pub steps: Vec<Step>,
    pub kinematics: Vec<Kinematics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hidden_style_label: Option<u32>,
}

impl Trajectory {
    pub fn new(
        driver_id: u64,
        start_frame: u64,
        steps: Vec<Step>,
        kinematics: Vec<Kinematics>,
    ) -> Result<Self> {
        if steps.len() != kinematics.len() {
            return Err(DsdpError::Data(format!(
                "driver {driver_id}: {} steps but {} kinematic states",
                steps.len(),
                kinematics.len()
            )));
        }
        Ok(Self {
            driver_id,
            start_frame,
            steps,
            kinematics,
            hidden_style_label: None,
        })
    }

    pub fn with_hidden_label(mut self, label: Option<u32>) -> Self {
        self.hidden_style_label = label;
        self
    }

    /// Ground-truth generator style. Evaluation only.
    pub fn hidden_style_label(&self) -> Option<u32> {
        self.hidden_style_label
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn observations(&self) -> impl Iterator<Item = &Observation> {
        self.steps.iter().map(|s| &s.obs)
    }

    pub fn actions(&self) -> impl Iterator<Item = &Action> {
        self.steps.iter().map(|s| &s.action)
    }

    /// Channel-major `[STEP_CHANNELS, len]` values for `steps[start..start+len]`.
    pub fn window_values(&self, start: usize, len: usize) -> Result<Vec<f64>> {
        if start + len > self.steps.len() {
            return Err(DsdpError::Precondition(format!(
                "window {start}+{len} exceeds trajectory of length {}",
                self.steps.len()
            )));
        }
        Ok(window_values(&self.steps[start..start + len]))
    }

    /// Largest speed in the segment, m/s.
    pub fn max_speed(&self) -> f64 {
        self.kinematics
            .iter()
            .map(|k| k.velocity)
            .fold(0.0, f64::max)
    }
}

/// Channel-major `[STEP_CHANNELS, steps.len()]` values.
pub fn window_values(steps: &[Step]) -> Vec<f64> {
    let len = steps.len();
    let mut out = vec![0.0; STEP_CHANNELS * len];
    for (j, s) in steps.iter().enumerate() {
        for c in 0..OBS_DIM {
            out[c * len + j] = s.obs.0[c];
        }
        out[OBS_DIM * len + j] = s.action.0;
    }
    out
}

/// Stacks windows into a `[B, STEP_CHANNELS, len]` tensor.
pub fn stack_windows(windows: &[Vec<f64>], len: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(windows.len() * STEP_CHANNELS * len);
    for w in windows {
        if w.len() != STEP_CHANNELS * len {
            return Err(DsdpError::Precondition(format!(
                "window has {} values, expected {}",
                w.len(),
                STEP_CHANNELS * len
            )));
        }
        data.extend_from_slice(w);
    }
    Ok(Tensor::new(vec![windows.len(), STEP_CHANNELS, len], data)?)
}

/// Feature order of [`NormStats`]: the observation components, then acceleration.
pub const FEATURE_NAMES: [&str; STEP_CHANNELS] = [
    "ego_velocity",
    "space_headway",
    "time_headway",
    "leader_velocity",
    "leader_prev_velocity",
    "acceleration",
];
const ACCEL: usize = OBS_DIM;

/// Min-max normalization over the six raw features plus the constants used
/// to derive observations from a physical state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: [f64; STEP_CHANNELS],
    pub max: [f64; STEP_CHANNELS],
    /// Space headway reported when there is no leader, m.
    pub headway_fill: f64,
    /// Upper bound on time headway, s.
    pub time_headway_cap: f64,
    /// Speed floor in the time-headway division, m/s.
    pub min_speed: f64,
}

impl NormStats {
    /// Stats over raw feature rows. A constant feature gets a unit-wide range.
    pub fn fit<'a>(
        rows: impl IntoIterator<Item = &'a [f64; STEP_CHANNELS]>,
        headway_fill: f64,
        time_headway_cap: f64,
        min_speed: f64,
    ) -> Result<Self> {
        let mut min = [f64::INFINITY; STEP_CHANNELS];
        let mut max = [f64::NEG_INFINITY; STEP_CHANNELS];
        let mut n = 0usize;
        for r in rows {
            n += 1;
            for i in 0..STEP_CHANNELS {
                min[i] = min[i].min(r[i]);
                max[i] = max[i].max(r[i]);
            }
        }
        if n == 0 {
            return Err(DsdpError::Data(
                "normalization stats need at least one sample".into(),
            ));
        }
        for i in 0..STEP_CHANNELS {
            if max[i] - min[i] < 1e-9 {
                min[i] -= 0.5;
                max[i] += 0.5;
            }
        }
        Ok(Self {
            min,
            max,
            headway_fill,
            time_headway_cap,
            min_speed,
        })
    }

    /// Maps feature `i` into `[0, 1]`, clamping out-of-range values.
    pub fn normalize(&self, i: usize, x: f64) -> f64 {
        ((x - self.min[i]) / (self.max[i] - self.min[i])).clamp(0.0, 1.0)
    }

    pub fn denormalize(&self, i: usize, u: f64) -> f64 {
        self.min[i] + u * (self.max[i] - self.min[i])
    }

    /// Raw observation features for an ego at `ego_v` and an optional leader
    /// given as `(front-to-front headway, leader_v, leader_prev_v)`.
    pub fn raw_observation(&self, ego_v: f64, leader: Option<(f64, f64, f64)>) -> [f64; OBS_DIM] {
        let (sh, lv, lpv) = leader.unwrap_or((self.headway_fill, ego_v, ego_v));
        let th = (sh / ego_v.max(self.min_speed)).min(self.time_headway_cap);
        [ego_v, sh, th, lv, lpv]
    }

    pub fn observation(&self, ego_v: f64, leader: Option<(f64, f64, f64)>) -> Observation {
        let raw = self.raw_observation(ego_v, leader);
        Observation(std::array::from_fn(|i| self.normalize(i, raw[i])))
    }

    pub fn normalize_accel(&self, accel: f64) -> Action {
        Action(self.normalize(ACCEL, accel.clamp(-GRAVITY, GRAVITY)))
    }

    /// Action back to m/s², clamped to ±g.
    pub fn denormalize_action(&self, a: Action) -> f64 {
        self.denormalize(ACCEL, a.0.clamp(0.0, 1.0))
            .clamp(-GRAVITY, GRAVITY)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| DsdpError::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| DsdpError::file(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

pub const DATASET_FORMAT: &str = "dsdp-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    count: usize,
    #[serde(default)]
    fingerprint: String,
}

/// Writes one header line then one trajectory per line.
pub fn save_jsonl(path: &Path, trajectories: &[Trajectory], fingerprint: &str) -> Result<()> {
    let f = File::create(path).map_err(|e| DsdpError::file(path, e))?;
    let mut w = BufWriter::new(f);
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        count: trajectories.len(),
        fingerprint: fingerprint.into(),
    };
    let io = |e| DsdpError::file(path, e);
    writeln!(w, "{}", serde_json::to_string(&header)?).map_err(io)?;
    for t in trajectories {
        writeln!(w, "{}", serde_json::to_string(t)?).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a file written by [`save_jsonl`], returning the trajectories and the recorded fingerprint.
pub fn load_jsonl(path: &Path) -> Result<(Vec<Trajectory>, String)> {
    let f = File::open(path).map_err(|e| DsdpError::file(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let parse_err = |line: u64, msg: String| DsdpError::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let first = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty dataset file".into()))?
        .map_err(|e| DsdpError::file(path, e))?;
    let header: DatasetHeader =
        serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(parse_err(
            1,
            format!("unsupported dataset {} v{}", header.format, header.version),
        ));
    }
    let mut out = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| DsdpError::file(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| parse_err(i as u64 + 2, e.to_string()))?);
    }
    if out.len() != header.count {
        return Err(parse_err(
            0,
            format!(
                "header declares {} trajectories, found {}",
                header.count,
                out.len()
            ),
        ));
    }
    Ok((out, header.fingerprint))
}
