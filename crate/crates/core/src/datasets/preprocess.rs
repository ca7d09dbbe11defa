use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{
    savgol, Kinematics, LeaderState, NormStats, RawRecord, Step, Trajectory, OBS_DIM, STEP_CHANNELS,
};
use crate::error::{DsdpError, Result};
use crate::par;
use crate::trafficsim::GRAVITY;

/// Used as the leaderless headway only when no record in the data has a leader.
const FALLBACK_HEADWAY_FILL: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub savgol_window: usize,
    pub savgol_order: usize,
    /// Spike threshold as a fraction of g.
    pub outlier_threshold_g: f64,
    /// Longest spike, in frames, treated as an outlier.
    pub outlier_max_frames: usize,
    /// Relative tolerance between the velocities bracketing a spike.
    pub outlier_bracket_tol: f64,
    pub train_fraction: f64,
    pub time_headway_cap: f64,
    pub min_speed: f64,
    /// Segments shorter than this (or than the smoothing window) are dropped.
    pub min_length: usize,
    /// Drop segments that never have a leader.
    pub require_leader: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            savgol_window: 7,
            savgol_order: 2,
            outlier_threshold_g: 0.9,
            outlier_max_frames: 2,
            outlier_bracket_tol: 0.2,
            train_fraction: 0.8,
            time_headway_cap: 10.0,
            min_speed: 0.1,
            min_length: 7,
            require_leader: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub segments: usize,
    pub dropped_short: usize,
    pub dropped_leaderless: usize,
    pub capped_samples: usize,
    pub outlier_samples: usize,
    /// Frames whose `preceding_id` names a vehicle absent at that frame.
    pub missing_leader_frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    pub stats: NormStats,
    pub report: PreprocessReport,
}

struct Segment {
    recs: Vec<RawRecord>,
    velocity: Vec<f64>,
    accel: Vec<f64>,
    capped: usize,
    outliers: usize,
}

fn contiguous_segments(recs: &[RawRecord]) -> Vec<Vec<RawRecord>> {
    let mut out: Vec<Vec<RawRecord>> = Vec::new();
    for r in recs {
        match out.last_mut() {
            Some(seg) if seg.last().is_some_and(|p| p.frame_id + 1 == r.frame_id) => seg.push(*r),
            _ => out.push(vec![*r]),
        }
    }
    out
}

/// Replaces short acceleration spikes whose bracketing velocities agree by
/// linear interpolation of both velocity and acceleration. Returns the number of replaced samples.
pub(crate) fn remove_outliers(
    v: &mut [f64],
    a: &mut [f64],
    threshold: f64,
    max_run: usize,
    tol: f64,
) -> usize {
    let n = a.len();
    let mut replaced = 0;
    let mut i = 0;
    while i < n {
        if a[i].abs() <= threshold {
            i += 1;
            continue;
        }
        let mut j = i;
        while j < n && a[j].abs() > threshold {
            j += 1;
        }
        if j - i <= max_run && i >= 1 && j < n {
            let (vb, va) = (v[i - 1], v[j]);
            if (va - vb).abs() <= tol * vb.abs().max(va.abs()) {
                let span = (j - (i - 1)) as f64;
                for k in i..j {
                    let w = (k - (i - 1)) as f64 / span;
                    v[k] = vb + w * (va - vb);
                    a[k] = a[i - 1] + w * (a[j] - a[i - 1]);
                }
                replaced += j - i;
            }
        }
        i = j;
    }
    replaced
}

fn clean(recs: Vec<RawRecord>, cfg: &PreprocessConfig) -> Result<Segment> {
    let mut velocity: Vec<f64> = recs.iter().map(|r| r.velocity).collect();
    let mut accel: Vec<f64> = recs.iter().map(|r| r.acceleration).collect();
    let mut capped = 0;
    for a in &mut accel {
        if a.abs() > GRAVITY {
            *a = a.clamp(-GRAVITY, GRAVITY);
            capped += 1;
        }
    }
    let outliers = remove_outliers(
        &mut velocity,
        &mut accel,
        cfg.outlier_threshold_g * GRAVITY,
        cfg.outlier_max_frames,
        cfg.outlier_bracket_tol,
    );
    let velocity = savgol(&velocity, cfg.savgol_window, cfg.savgol_order)?
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    let accel = savgol(&accel, cfg.savgol_window, cfg.savgol_order)?
        .into_iter()
        .map(|a| a.clamp(-GRAVITY, GRAVITY))
        .collect();
    Ok(Segment {
        recs,
        velocity,
        accel,
        capped,
        outliers,
    })
}

/// Cleans, featurizes, splits and normalizes raw logs.
///
/// Per contiguous segment: g-cap, outlier removal, then smoothing of velocity
/// and acceleration. Leaderless frames get the dataset's largest space
/// headway and report the ego speed as leader speed. Segments are ordered by
/// start frame and the first `train_fraction` form the training split, which
/// alone determines the normalization stats. `labels` (synthetic data) are
/// attached as hidden labels keyed by vehicle id.
pub fn preprocess(
    raw: &BTreeMap<u64, Vec<RawRecord>>,
    labels: Option<&BTreeMap<u64, u32>>,
    cfg: &PreprocessConfig,
) -> Result<Split> {
    if raw.values().all(|v| v.is_empty()) {
        return Err(DsdpError::Data(
            "preprocess needs at least one record".into(),
        ));
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction <= 1.0) {
        return Err(DsdpError::Config(format!(
            "train_fraction must be in (0, 1], got {}",
            cfg.train_fraction
        )));
    }
    let mut report = PreprocessReport::default();
    let min_len = cfg.min_length.max(cfg.savgol_window);
    let mut pending = Vec::new();
    for recs in raw.values() {
        for seg in contiguous_segments(recs) {
            report.segments += 1;
            if seg.len() < min_len {
                report.dropped_short += 1;
            } else {
                pending.push(seg);
            }
        }
    }
    let segments = par::try_map_indexed(pending.len(), |i| clean(pending[i].clone(), cfg))?;
    report.capped_samples = segments.iter().map(|s| s.capped).sum();
    report.outlier_samples = segments.iter().map(|s| s.outliers).sum();

    let headway_fill = raw
        .values()
        .flatten()
        .filter(|r| r.leader_id().is_some())
        .map(|r| r.space_headway)
        .fold(f64::NEG_INFINITY, f64::max);
    let headway_fill = if headway_fill.is_finite() {
        headway_fill
    } else {
        FALLBACK_HEADWAY_FILL
    };

    // Cleaned state of every kept (vehicle, frame).
    let mut state: HashMap<(u64, u64), LeaderState> = HashMap::new();
    for s in &segments {
        for (k, r) in s.recs.iter().enumerate() {
            state.insert(
                (r.vehicle_id, r.frame_id),
                LeaderState {
                    position: r.position,
                    velocity: s.velocity[k],
                    length: r.vehicle_length,
                },
            );
        }
    }

    struct Featurized {
        id: u64,
        start: u64,
        kin: Vec<Kinematics>,
        headway: Vec<Option<(f64, f64, f64)>>,
    }
    let mut feats = Vec::new();
    for s in &segments {
        let mut kin = Vec::with_capacity(s.recs.len());
        let mut headway = Vec::with_capacity(s.recs.len());
        for (k, r) in s.recs.iter().enumerate() {
            let leader = r.leader_id().and_then(|lid| {
                let found = state.get(&(lid, r.frame_id)).copied();
                if found.is_none() {
                    report.missing_leader_frames += 1;
                }
                found.map(|l| (lid, l))
            });
            kin.push(Kinematics {
                position: r.position,
                velocity: s.velocity[k],
                accel: s.accel[k],
                length: r.vehicle_length,
                leader: leader.map(|(_, l)| l),
            });
            headway.push(leader.map(|(lid, l)| {
                let prev = r
                    .frame_id
                    .checked_sub(1)
                    .and_then(|f| state.get(&(lid, f)))
                    .map_or(l.velocity, |p| p.velocity);
                (r.space_headway, l.velocity, prev)
            }));
        }
        if cfg.require_leader && headway.iter().all(Option::is_none) {
            report.dropped_leaderless += 1;
            continue;
        }
        feats.push(Featurized {
            id: s.recs[0].vehicle_id,
            start: s.recs[0].frame_id,
            kin,
            headway,
        });
    }
    if feats.is_empty() {
        return Err(DsdpError::Data(format!(
            "no usable trajectories after preprocessing ({report:?})"
        )));
    }
    feats.sort_by_key(|f| (f.start, f.id));
    let n_train =
        ((feats.len() as f64 * cfg.train_fraction).round() as usize).clamp(1, feats.len());

    let probe = NormStats {
        min: [0.0; STEP_CHANNELS],
        max: [1.0; STEP_CHANNELS],
        headway_fill,
        time_headway_cap: cfg.time_headway_cap,
        min_speed: cfg.min_speed,
    };
    let raw_rows = |f: &Featurized| -> Vec<[f64; STEP_CHANNELS]> {
        f.kin
            .iter()
            .zip(&f.headway)
            .map(|(k, h)| {
                let o = probe.raw_observation(k.velocity, *h);
                let mut row = [0.0; STEP_CHANNELS];
                row[..OBS_DIM].copy_from_slice(&o);
                row[OBS_DIM] = k.accel;
                row
            })
            .collect()
    };
    let train_rows: Vec<_> = feats[..n_train].iter().flat_map(raw_rows).collect();
    let stats = NormStats::fit(
        train_rows.iter(),
        headway_fill,
        cfg.time_headway_cap,
        cfg.min_speed,
    )?;

    let mut trajs = Vec::with_capacity(feats.len());
    for f in feats {
        let steps = f
            .kin
            .iter()
            .zip(&f.headway)
            .map(|(k, h)| Step {
                obs: stats.observation(k.velocity, *h),
                action: stats.normalize_accel(k.accel),
            })
            .collect();
        let label = labels.and_then(|l| l.get(&f.id).copied());
        trajs.push(Trajectory::new(f.id, f.start, steps, f.kin)?.with_hidden_label(label));
    }
    let test = trajs.split_off(n_train);
    if report.dropped_short + report.dropped_leaderless > 0 {
        log::warn!(
            "preprocess dropped {} short and {} leaderless segments",
            report.dropped_short,
            report.dropped_leaderless
        );
    }
    Ok(Split {
        train: trajs,
        test,
        stats,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spike_is_interpolated() {
        let mut v = vec![10.0, 10.0, 10.5, 10.0, 10.0];
        let mut a = vec![0.0, 0.0, 9.5, 0.0, 0.0];
        let n = remove_outliers(&mut v, &mut a, 0.9 * GRAVITY, 2, 0.2);
        assert_eq!(n, 1);
        assert_eq!(a, vec![0.0; 5]);
        assert_eq!(v[2], 10.0);
    }

    #[test]
    fn long_or_real_changes_are_kept() {
        let mut v = vec![10.0, 10.0, 10.0, 10.0, 10.0, 10.0];
        let mut a = vec![0.0, 9.5, 9.5, 9.5, 0.0, 0.0];
        assert_eq!(remove_outliers(&mut v, &mut a, 8.8, 2, 0.2), 0);
        let mut v = vec![10.0, 11.0, 14.0];
        let mut a = vec![0.0, 9.5, 0.0];
        assert_eq!(remove_outliers(&mut v, &mut a, 8.8, 2, 0.2), 0);
    }

    #[test]
    fn segments_split_at_gaps() {
        let r = |f| RawRecord {
            vehicle_id: 1,
            frame_id: f,
            position: 0.0,
            velocity: 0.0,
            acceleration: 0.0,
            lane_id: 1,
            space_headway: 0.0,
            preceding_id: 0,
            vehicle_length: 4.0,
        };
        let segs = contiguous_segments(&[r(1), r(2), r(4), r(5), r(6)]);
        assert_eq!(segs.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 3]);
    }
}
