use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::RawRecord;
use crate::error::{DsdpError, Result};
use crate::par;
use crate::seeding::{derive_seed, item_rng};
use crate::trafficsim::{idm_accel, Controller, IdmParams, Scenario, Vehicle, DT, GRAVITY};

/// A style as a centre in IDM parameter space and a multiplicative spread.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleCluster {
    pub name: String,
    pub mean: IdmParams,
    /// Standard deviation of the log-normal factor applied to every parameter but delta.
    pub spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub styles: Vec<StyleCluster>,
    pub n_drivers: usize,
    /// Frames per trajectory.
    pub length: usize,
    /// Standard deviation of Gaussian noise on the follower's acceleration, m/s².
    pub action_noise: f64,
    /// Frame offset between consecutive drivers' start times.
    pub start_stagger: u64,
    pub seed: u64,
}

fn style(name: &str, v0: f64, time_headway: f64, a_max: f64, b: f64, s0: f64) -> StyleCluster {
    StyleCluster {
        name: name.into(),
        mean: IdmParams {
            v0,
            time_headway,
            a_max,
            b,
            delta: 4.0,
            s0,
        },
        spread: 0.05,
    }
}

impl SyntheticSpec {
    /// Four styles from timid to aggressive. Neighbouring time headways differ
    /// by at least 0.4 s, far beyond the 5% parameter spread.
    pub fn four_styles(n_drivers: usize, seed: u64) -> Self {
        Self {
            styles: vec![
                style("timid", 24.0, 2.2, 0.8, 1.2, 4.0),
                style("calm", 28.0, 1.6, 1.2, 1.8, 2.5),
                style("brisk", 32.0, 1.1, 1.8, 2.5, 1.8),
                style("aggressive", 36.0, 0.7, 2.6, 3.2, 1.2),
            ],
            n_drivers,
            length: 150,
            action_noise: 0.2,
            start_stagger: 20,
            seed,
        }
    }

    pub fn n_styles(&self) -> usize {
        self.styles.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.styles.is_empty() || self.n_drivers == 0 || self.length < 2 {
            return Err(DsdpError::Config(format!(
                "synthetic spec needs styles, drivers and length >= 2 (styles {}, drivers {}, length {})",
                self.styles.len(),
                self.n_drivers,
                self.length
            )));
        }
        if !(self.action_noise >= 0.0) {
            return Err(DsdpError::Config(
                "action noise must be non-negative".into(),
            ));
        }
        for s in &self.styles {
            s.mean.validate()?;
            if !(s.spread >= 0.0) {
                return Err(DsdpError::Config(format!(
                    "style {} has negative spread",
                    s.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub records: Vec<RawRecord>,
    /// Style index per follower vehicle id.
    pub labels: BTreeMap<u64, u32>,
    /// Parameters drawn for each driver, in driver order.
    pub params: Vec<IdmParams>,
}

/// Leader speeds for `n` frames: piecewise target speeds in [6, 18] m/s held
/// for 3 to 8 s, tracked with acceleration limited to [-2, 1.5] m/s².
///
/// Targets stay below every built-in style's desired speed, so followers
/// spend the segment car-following rather than cruising freely.
pub fn leader_profile(n: usize, v_init: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut v = Vec::with_capacity(n);
    let mut cur = v_init;
    let mut target = rng.random_range(LEADER_SPEED.0..LEADER_SPEED.1);
    let mut hold = 0usize;
    for _ in 0..n {
        v.push(cur);
        if hold == 0 {
            target = rng.random_range(LEADER_SPEED.0..LEADER_SPEED.1);
            hold = rng.random_range(30..=80);
        }
        hold -= 1;
        let a = ((target - cur) / 2.0).clamp(-2.0, 1.5);
        cur = (cur + a * DT).max(0.0);
    }
    v
}

const LEADER_SPEED: (f64, f64) = (6.0, 18.0);

fn sample_params(c: &StyleCluster, rng: &mut impl Rng) -> IdmParams {
    let mut f = || (c.spread * rng.sample::<f64, _>(StandardNormal)).exp();
    IdmParams {
        v0: c.mean.v0 * f(),
        time_headway: c.mean.time_headway * f(),
        a_max: c.mean.a_max * f(),
        b: c.mean.b * f(),
        delta: c.mean.delta,
        s0: c.mean.s0 * f(),
    }
}

struct Driven {
    leader: Vec<(f64, f64, f64)>,
    ego: Vec<(f64, f64, f64)>,
    leader_len: f64,
    ego_len: f64,
}

fn drive(p: &IdmParams, spec: &SyntheticSpec, rng: &mut impl Rng) -> Option<Driven> {
    let n = spec.length;
    let v_lead0 = rng.random_range(LEADER_SPEED.0..LEADER_SPEED.1);
    let lv = leader_profile(n, v_lead0, rng);
    let leader_len = rng.random_range(4.0..5.0);
    let ego_len = rng.random_range(4.0..5.0);
    // Start near the follower's own equilibrium so the log is dominated by its style, not by the initial transient.
    let ego_v0 = v_lead0 * rng.random_range(0.95..1.0);
    let gap = p
        .equilibrium_gap(ego_v0)
        .unwrap_or(2.0 * p.desired_gap(ego_v0, 0.0))
        * rng.random_range(0.95..1.05);
    let mut lp = Vec::with_capacity(n);
    let mut x = gap + leader_len;
    for (k, v) in lv.iter().enumerate() {
        if k > 0 {
            x += v * DT;
        }
        lp.push(x);
    }
    let leader = Vehicle {
        position: lp[0],
        velocity: lv[0],
        length: leader_len,
        controller: Controller::Replay {
            positions: lp.clone(),
            velocities: lv.clone(),
        },
    };
    let ego = Vehicle {
        position: 0.0,
        velocity: ego_v0,
        length: ego_len,
        controller: Controller::Ego,
    };
    let mut sc = Scenario::new(vec![leader, ego], 1, DT).ok()?;
    let noise = Normal::new(0.0, spec.action_noise).ok()?;
    let mut ego_log = Vec::with_capacity(n);
    for k in 0..n {
        let e = sc.ego();
        let l = &sc.vehicles[0];
        let a = idm_accel(p, e.velocity, sc.gap(1)?, e.velocity - l.velocity).ok()?;
        let a = (a + noise.sample(rng)).clamp(-GRAVITY, GRAVITY);
        ego_log.push((e.position, e.velocity, a));
        if k + 1 < n {
            sc.step(a).ok()?;
            if sc.crashed {
                return None;
            }
        }
    }
    let leader_log = (0..n)
        .map(|k| {
            let a = if k + 1 < n {
                (lv[k + 1] - lv[k]) / DT
            } else {
                0.0
            };
            (lp[k], lv[k], a)
        })
        .collect();
    Some(Driven {
        leader: leader_log,
        ego: ego_log,
        leader_len,
        ego_len,
    })
}

/// Simulates each driver following a replayed leader.
///
/// Driver `i` gets style `i mod n_styles`, leader id `2i+1` and follower id
/// `2i+2`; only followers are labelled. Every driver draws from its own
/// stream so the output does not depend on the execution mode.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let stage = derive_seed(spec.seed, "synth");
    let per_driver = par::try_map_indexed(spec.n_drivers, |i| {
        let mut rng = item_rng(stage, i);
        let style = i % spec.n_styles();
        let params = sample_params(&spec.styles[style], &mut rng);
        for _ in 0..16 {
            if let Some(d) = drive(&params, spec, &mut rng) {
                return Ok((style, params, d));
            }
        }
        Err(DsdpError::Data(format!(
            "driver {i} kept colliding during generation"
        )))
    })?;
    let mut records = Vec::with_capacity(2 * spec.n_drivers * spec.length);
    let mut labels = BTreeMap::new();
    let mut params = Vec::with_capacity(spec.n_drivers);
    for (i, (style, p, d)) in per_driver.into_iter().enumerate() {
        let lead_id = 2 * i as u64 + 1;
        let ego_id = lead_id + 1;
        let f0 = 1 + i as u64 * spec.start_stagger;
        for (k, ((lx, lv, la), (ex, ev, ea))) in d.leader.iter().zip(&d.ego).enumerate() {
            let frame_id = f0 + k as u64;
            records.push(RawRecord {
                vehicle_id: lead_id,
                frame_id,
                position: *lx,
                velocity: *lv,
                acceleration: *la,
                lane_id: 1,
                space_headway: 0.0,
                preceding_id: 0,
                vehicle_length: d.leader_len,
            });
            records.push(RawRecord {
                vehicle_id: ego_id,
                frame_id,
                position: *ex,
                velocity: *ev,
                acceleration: *ea,
                lane_id: 1,
                space_headway: lx - ex,
                preceding_id: lead_id,
                vehicle_length: d.ego_len,
            });
        }
        labels.insert(ego_id, style as u32);
        params.push(p);
    }
    Ok(SyntheticData {
        records,
        labels,
        params,
    })
}
