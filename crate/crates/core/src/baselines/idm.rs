//! Intelligent Driver Model baselines: a fixed style table and parameters
//! fitted per driver.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::{Step, Trajectory};
use crate::error::{DsdpError, Result};
use crate::par;
use crate::policy::{Episode, Policy, StepContext};
use crate::seeding::{item_rng, SimRng};
use crate::trafficsim::{idm_accel, idm_free_accel, IdmParams, Scenario};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdmStyle {
    pub name: String,
    pub params: IdmParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdmStyleTable {
    pub styles: Vec<IdmStyle>,
}

const BUNDLED_STYLES: &str = include_str!("../../data/idm_styles.json");

impl Default for IdmStyleTable {
    fn default() -> Self {
        Self::bundled()
    }
}

impl IdmStyleTable {
    /// Aggressive, normal and timid rows shipped with the crate.
    pub fn bundled() -> Self {
        serde_json::from_str(BUNDLED_STYLES).expect("bundled IDM style table parses")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(s)?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| DsdpError::file(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.styles.is_empty() {
            return Err(DsdpError::Config("IDM style table is empty".into()));
        }
        self.styles.iter().try_for_each(|s| s.params.validate())
    }
}

fn idm_for(p: &IdmParams, s: &Scenario) -> Result<f64> {
    let ego = s.ego();
    match s.leader_of(s.ego_index) {
        Some(l) => idm_accel(
            p,
            ego.velocity,
            s.gap(s.ego_index).unwrap_or(f64::INFINITY),
            ego.velocity - l.velocity,
        ),
        None => Ok(idm_free_accel(p, ego.velocity)),
    }
}

struct IdmEpisode {
    params: IdmParams,
    style: Option<u32>,
}

impl Episode for IdmEpisode {
    fn accel(&mut self, ctx: &StepContext<'_>, _: &mut SimRng) -> Result<f64> {
        idm_for(&self.params, ctx.scenario)
    }

    fn style(&self) -> Option<u32> {
        self.style
    }
}

/// One table row drawn uniformly per episode, then plain IDM control.
#[derive(Clone, Debug)]
pub struct IdmFixedPolicy {
    pub table: IdmStyleTable,
}

impl IdmFixedPolicy {
    pub fn new(table: IdmStyleTable) -> Result<Self> {
        table.validate()?;
        Ok(Self { table })
    }
}

impl Policy for IdmFixedPolicy {
    fn name(&self) -> String {
        "idm_fixed".into()
    }

    fn warmup_len(&self) -> usize {
        0
    }

    fn begin<'p>(&'p self, _: &[Step], rng: &mut SimRng) -> Result<Box<dyn Episode + 'p>> {
        let i = rng.random_range(0..self.table.styles.len());
        Ok(Box::new(IdmEpisode {
            params: self.table.styles[i].params,
            style: Some(i as u32),
        }))
    }
}

/// Fitted parameters are `(v0, T, a_max, b, s0)`; `delta` stays fixed.
pub const IDM_FREE_PARAMS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdmFitConfig {
    /// Loss evaluations per driver.
    pub budget: usize,
    /// Share of the budget spent on uniform draws before local refinement.
    pub explore: f64,
    pub delta: f64,
    /// Search box, in natural units, for `(v0, T, a_max, b, s0)`.
    pub lower: [f64; IDM_FREE_PARAMS],
    pub upper: [f64; IDM_FREE_PARAMS],
    /// Drivers with fewer leader frames are skipped.
    pub min_frames: usize,
}

impl Default for IdmFitConfig {
    fn default() -> Self {
        Self {
            budget: 2000,
            explore: 0.25,
            delta: 4.0,
            lower: [5.0, 0.2, 0.1, 0.2, 0.2],
            upper: [50.0, 4.0, 5.0, 6.0, 8.0],
            min_frames: 10,
        }
    }
}

impl IdmFitConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.budget > 0
            && (0.0..=1.0).contains(&self.explore)
            && self.delta > 0.0
            && self
                .lower
                .iter()
                .zip(&self.upper)
                .all(|(l, u)| *l > 0.0 && l < u);
        if ok {
            Ok(())
        } else {
            Err(DsdpError::Config(format!(
                "invalid IDM fit config {self:?}"
            )))
        }
    }
}

/// One car-following sample: speed, bumper gap, closing speed and logged acceleration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdmFrame {
    pub v: f64,
    pub gap: f64,
    pub dv: f64,
    pub accel: f64,
}

/// Frames of `t` that have a leader at a positive gap.
pub fn idm_frames(t: &Trajectory) -> Vec<IdmFrame> {
    t.kinematics
        .iter()
        .filter_map(|k| {
            let l = k.leader.as_ref()?;
            let gap = l.position - l.length - k.position;
            (gap > 0.0).then_some(IdmFrame {
                v: k.velocity,
                gap,
                dv: k.velocity - l.velocity,
                accel: k.accel,
            })
        })
        .collect()
}

fn params_of(x: &[f64; IDM_FREE_PARAMS], delta: f64) -> IdmParams {
    IdmParams {
        v0: x[0],
        time_headway: x[1],
        a_max: x[2],
        b: x[3],
        delta,
        s0: x[4],
    }
}

fn free_params(p: &IdmParams) -> [f64; IDM_FREE_PARAMS] {
    [p.v0, p.time_headway, p.a_max, p.b, p.s0]
}

/// Mean squared error of IDM predictions against the logged accelerations.
pub fn idm_mse(p: &IdmParams, frames: &[IdmFrame]) -> Result<f64> {
    let mut sum = 0.0;
    for f in frames {
        sum += (idm_accel(p, f.v, f.gap, f.dv)? - f.accel).powi(2);
    }
    Ok(sum / frames.len().max(1) as f64)
}

/// Random search in log-space: uniform draws over the box, then Gaussian
/// perturbations of the incumbent with a self-adapting step size.
pub fn fit_idm_driver(
    frames: &[IdmFrame],
    cfg: &IdmFitConfig,
    rng: &mut impl Rng,
) -> Result<(IdmParams, f64)> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(DsdpError::Precondition(
            "IDM fit needs at least one frame".into(),
        ));
    }
    let lo = cfg.lower.map(f64::ln);
    let hi = cfg.upper.map(f64::ln);
    let eval =
        |y: &[f64; IDM_FREE_PARAMS]| idm_mse(&params_of(&y.map(f64::exp), cfg.delta), frames);
    let n_explore = ((cfg.budget as f64 * cfg.explore).round() as usize).clamp(1, cfg.budget);
    let mut best: Option<([f64; IDM_FREE_PARAMS], f64)> = None;
    for _ in 0..n_explore {
        let y: [f64; IDM_FREE_PARAMS] = std::array::from_fn(|j| rng.random_range(lo[j]..hi[j]));
        let l = eval(&y)?;
        if best.is_none_or(|(_, b)| l < b) {
            best = Some((y, l));
        }
    }
    let (mut y_best, mut l_best) = best.expect("at least one draw");
    // One-fifth success rule: grow the step on success, shrink it otherwise.
    let mut scale = 0.3;
    for _ in n_explore..cfg.budget {
        let y: [f64; IDM_FREE_PARAMS] = std::array::from_fn(|j| {
            (y_best[j] + scale * rng.sample::<f64, _>(StandardNormal)).clamp(lo[j], hi[j])
        });
        let l = eval(&y)?;
        if l < l_best {
            (y_best, l_best) = (y, l);
            scale = (scale * 1.5).min(1.0);
        } else {
            scale = (scale * 1.5f64.powf(-0.25)).max(1e-6);
        }
    }
    Ok((params_of(&y_best.map(f64::exp), cfg.delta), l_best))
}

/// Multivariate normal over log `(v0, T, a_max, b, s0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdmParamDistribution {
    pub mean: [f64; IDM_FREE_PARAMS],
    pub cov: [[f64; IDM_FREE_PARAMS]; IDM_FREE_PARAMS],
    pub delta: f64,
}

/// Lower-triangular `L` with `L·Lᵀ = a` for symmetric positive semi-definite
/// `a`; columns whose pivot vanishes are left zero.
fn psd_cholesky(
    a: &[[f64; IDM_FREE_PARAMS]; IDM_FREE_PARAMS],
) -> [[f64; IDM_FREE_PARAMS]; IDM_FREE_PARAMS] {
    let n = IDM_FREE_PARAMS;
    let mut l = [[0.0; IDM_FREE_PARAMS]; IDM_FREE_PARAMS];
    let scale = (0..n)
        .map(|i| a[i][i].abs())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    for j in 0..n {
        let d = a[j][j] - (0..j).map(|k| l[j][k] * l[j][k]).sum::<f64>();
        if d <= 1e-12 * scale {
            continue;
        }
        l[j][j] = d.sqrt();
        for i in j + 1..n {
            l[i][j] = (a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>()) / l[j][j];
        }
    }
    l
}

impl IdmParamDistribution {
    /// Sample mean and covariance (`n − 1` divisor; zero for a single point) of log parameters.
    pub fn fit(params: &[IdmParams], delta: f64) -> Result<Self> {
        if params.is_empty() {
            return Err(DsdpError::Precondition(
                "IDM distribution needs at least one fitted driver".into(),
            ));
        }
        let ys: Vec<[f64; IDM_FREE_PARAMS]> =
            params.iter().map(|p| free_params(p).map(f64::ln)).collect();
        let n = ys.len() as f64;
        let mean: [f64; IDM_FREE_PARAMS] =
            std::array::from_fn(|j| ys.iter().map(|y| y[j]).sum::<f64>() / n);
        let mut cov = [[0.0; IDM_FREE_PARAMS]; IDM_FREE_PARAMS];
        if ys.len() > 1 {
            for (i, row) in cov.iter_mut().enumerate() {
                for (j, c) in row.iter_mut().enumerate() {
                    *c = ys
                        .iter()
                        .map(|y| (y[i] - mean[i]) * (y[j] - mean[j]))
                        .sum::<f64>()
                        / (n - 1.0);
                }
            }
        }
        Ok(Self { mean, cov, delta })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> IdmParams {
        let l = psd_cholesky(&self.cov);
        let z: [f64; IDM_FREE_PARAMS] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let y: [f64; IDM_FREE_PARAMS] =
            std::array::from_fn(|i| self.mean[i] + (0..=i).map(|k| l[i][k] * z[k]).sum::<f64>());
        params_of(&y.map(f64::exp), self.delta)
    }

    pub fn mean_params(&self) -> IdmParams {
        params_of(&self.mean.map(f64::exp), self.delta)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdmFitReport {
    pub drivers: usize,
    pub skipped: usize,
    /// Mean per-driver fit error, m²/s⁴.
    pub mean_mse: f64,
}

/// Fits every driver with enough leader frames, then the log-space Gaussian over their optima.
pub fn fit_idm_learned(
    trajs: &[Trajectory],
    cfg: &IdmFitConfig,
    seed: u64,
) -> Result<(IdmParamDistribution, IdmFitReport)> {
    cfg.validate()?;
    let mut by_driver: BTreeMap<u64, Vec<IdmFrame>> = BTreeMap::new();
    for t in trajs {
        by_driver
            .entry(t.driver_id)
            .or_default()
            .extend(idm_frames(t));
    }
    let (drivers, skipped): (Vec<_>, Vec<_>) = by_driver
        .into_iter()
        .partition(|(_, f)| f.len() >= cfg.min_frames);
    for (id, f) in &skipped {
        warn!("skipping driver {id}: {} leader frames", f.len());
    }
    let fits = par::try_map_indexed(drivers.len(), |i| {
        fit_idm_driver(&drivers[i].1, cfg, &mut item_rng(seed, i))
    })?;
    let params: Vec<IdmParams> = fits.iter().map(|(p, _)| *p).collect();
    let dist = IdmParamDistribution::fit(&params, cfg.delta)?;
    let report = IdmFitReport {
        drivers: fits.len(),
        skipped: skipped.len(),
        mean_mse: fits.iter().map(|(_, l)| l).sum::<f64>() / fits.len() as f64,
    };
    Ok((dist, report))
}

/// One parameter set drawn from the fitted distribution per episode.
#[derive(Clone, Debug)]
pub struct IdmLearnedPolicy {
    pub dist: IdmParamDistribution,
}

impl Policy for IdmLearnedPolicy {
    fn name(&self) -> String {
        "idm_learned".into()
    }

    fn warmup_len(&self) -> usize {
        0
    }

    fn begin<'p>(&'p self, _: &[Step], rng: &mut SimRng) -> Result<Box<dyn Episode + 'p>> {
        Ok(Box::new(IdmEpisode {
            params: self.dist.sample(rng),
            style: None,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn semidefinite_cholesky_reconstructs() {
        let mut a = [[0.0; IDM_FREE_PARAMS]; IDM_FREE_PARAMS];
        // Rank-2: u·uᵀ + w·wᵀ.
        let u = [1.0, 0.5, -0.2, 0.0, 0.3];
        let w = [0.0, 0.2, 0.4, -0.1, 0.1];
        for i in 0..5 {
            for j in 0..5 {
                a[i][j] = u[i] * u[j] + w[i] * w[j];
            }
        }
        let l = psd_cholesky(&a);
        for i in 0..5 {
            for j in 0..5 {
                let r: f64 = (0..5).map(|k| l[i][k] * l[j][k]).sum();
                assert!((r - a[i][j]).abs() < 1e-9, "{i},{j}");
            }
        }
    }

    #[test]
    fn bundled_table_is_valid() {
        let t = IdmStyleTable::bundled();
        t.validate().unwrap();
        let names: Vec<_> = t.styles.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["aggressive", "normal", "timid"]);
    }
}
