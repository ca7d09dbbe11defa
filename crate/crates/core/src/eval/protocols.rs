use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::metrics::{density_coverage, f1};
use super::report::{EvalReport, Metric, ScenarioRow};
use crate::datasets::{Kinematics, NormStats, Observation, Step, Trajectory, DEFAULT_LP};
use crate::error::{DsdpError, Result};
use crate::par::{self, Exec};
use crate::policy::{rollout, Policy, Rollout};
use crate::seeding::{item_rng, SimRng};
use crate::trafficsim::{Controller, IdmParams, Scenario, Vehicle, DT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Neighbors for density and coverage.
    pub k: usize,
    /// Logged warm-up before the policy takes over.
    pub warmup: usize,
    pub f1_scenarios: usize,
    pub crash_scenarios: usize,
    pub crash_steps: usize,
    /// IDM behind the ego's leader in crash scenarios; `v0` is replaced by the
    /// leader's largest logged speed.
    pub leader_idm: IdmParams,
    /// IDM vehicles following the ego in crash scenarios.
    pub followers: usize,
    pub follower_idm: IdmParams,
    /// Comfortable deceleration used to place stopped leaders, m/s².
    pub stopped_leader_decel: f64,
    /// Extra distance in front of the stopping distance, m.
    pub stopped_leader_margin: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let normal = IdmParams {
            v0: 30.0,
            time_headway: 1.5,
            a_max: 1.0,
            b: 1.5,
            delta: 4.0,
            s0: 2.0,
        };
        Self {
            k: 5,
            warmup: DEFAULT_LP,
            f1_scenarios: 50,
            crash_scenarios: 100,
            crash_steps: 200,
            leader_idm: normal.clone(),
            followers: 1,
            follower_idm: normal,
            stopped_leader_decel: 2.0,
            stopped_leader_margin: 15.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0
            || self.warmup == 0
            || !(self.stopped_leader_decel > 0.0)
            || self.stopped_leader_margin < 0.0
        {
            return Err(DsdpError::Config(format!("invalid eval config {self:?}")));
        }
        self.leader_idm.validate()?;
        self.follower_idm.validate()
    }
}

/// One closed-loop test case built from a logged trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalScenario {
    pub driver_id: u64,
    pub warmup: Vec<Step>,
    pub warmup_kinematics: Vec<Kinematics>,
    pub scenario: Scenario,
    pub prev_leader_velocity: Option<f64>,
    pub steps: usize,
    /// Logged ego observations over the simulated span (F1 only).
    pub real: Vec<Observation>,
}

/// How the ego's leader behaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LeaderMode {
    /// Replays the logged leader.
    Replay,
    /// IDM with the leader's largest logged speed as its target.
    Idm,
    /// A stationary vehicle beyond the ego's stopping distance.
    Stopped,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub scenarios: Vec<EvalScenario>,
    /// Trajectories that could not host a scenario.
    pub skipped: usize,
}

fn build_scenario(t: &Trajectory, mode: LeaderMode, cfg: &EvalConfig) -> Option<EvalScenario> {
    let l = cfg.warmup;
    if t.len() <= l + cfg.k {
        return None;
    }
    let start = &t.kinematics[l];
    let lead0 = start.leader?;
    let ego = Vehicle {
        position: start.position,
        velocity: start.velocity,
        length: start.length,
        controller: Controller::Ego,
    };
    let (leader, steps) = match mode {
        LeaderMode::Replay => {
            let span = &t.kinematics[l..];
            let leaders: Option<Vec<_>> = span.iter().map(|k| k.leader).collect();
            let leaders = leaders?;
            let v = Vehicle {
                position: lead0.position,
                velocity: lead0.velocity,
                length: lead0.length,
                controller: Controller::Replay {
                    positions: leaders.iter().map(|s| s.position).collect(),
                    velocities: leaders.iter().map(|s| s.velocity).collect(),
                },
            };
            (v, span.len())
        }
        LeaderMode::Idm => {
            let v_max = t
                .kinematics
                .iter()
                .filter_map(|k| k.leader.map(|s| s.velocity))
                .fold(1.0, f64::max);
            let params = IdmParams {
                v0: v_max,
                ..cfg.leader_idm.clone()
            };
            let v = Vehicle {
                position: lead0.position,
                velocity: lead0.velocity.min(v_max),
                length: lead0.length,
                controller: Controller::Idm { params },
            };
            (v, cfg.crash_steps)
        }
        LeaderMode::Stopped => {
            let stop = start.velocity.powi(2) / (2.0 * cfg.stopped_leader_decel)
                + cfg.stopped_leader_margin
                + lead0.length;
            let headway = (lead0.position - start.position).max(stop);
            let v = Vehicle {
                position: start.position + headway,
                velocity: 0.0,
                length: lead0.length,
                controller: Controller::Replay {
                    positions: vec![start.position + headway],
                    velocities: vec![0.0],
                },
            };
            (v, cfg.crash_steps)
        }
    };
    let mut vehicles = vec![leader, ego];
    if mode != LeaderMode::Replay {
        let p = &cfg.follower_idm;
        let mut front = (start.position, start.length);
        for _ in 0..cfg.followers {
            let gap = p
                .equilibrium_gap(start.velocity)
                .unwrap_or(p.s0 + start.velocity * p.time_headway);
            let pos = front.0 - front.1 - gap;
            vehicles.push(Vehicle {
                position: pos,
                velocity: start.velocity,
                length: start.length,
                controller: Controller::Idm { params: p.clone() },
            });
            front = (pos, start.length);
        }
    }
    let scenario = Scenario::new(vehicles, 1, DT).ok()?;
    Some(EvalScenario {
        driver_id: t.driver_id,
        warmup: t.steps[..l].to_vec(),
        warmup_kinematics: t.kinematics[..l].to_vec(),
        scenario,
        prev_leader_velocity: t.kinematics[l - 1].leader.map(|s| s.velocity),
        steps,
        real: if mode == LeaderMode::Replay {
            t.steps[l..].iter().map(|s| s.obs).collect()
        } else {
            Vec::new()
        },
    })
}

/// Up to `n` scenarios from randomly chosen test trajectories. Without
/// `with_replacement`, each trajectory is used at most once; otherwise the
/// shuffled list is cycled until `n` scenarios exist.
pub fn build_scenarios(
    test: &[Trajectory],
    mode: LeaderMode,
    n: usize,
    with_replacement: bool,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<ScenarioSet> {
    cfg.validate()?;
    let built: Vec<Option<EvalScenario>> =
        test.iter().map(|t| build_scenario(t, mode, cfg)).collect();
    let skipped = built.iter().filter(|b| b.is_none()).count();
    let mut eligible: Vec<EvalScenario> = built.into_iter().flatten().collect();
    if eligible.is_empty() {
        return Err(DsdpError::Precondition(format!(
            "no test trajectory is long enough with a leader for {} warm-up steps",
            cfg.warmup
        )));
    }
    eligible.shuffle(&mut SimRng::seed_from_u64(seed));
    let scenarios = if with_replacement {
        (0..n)
            .map(|i| eligible[i % eligible.len()].clone())
            .collect()
    } else {
        eligible.truncate(n);
        eligible
    };
    Ok(ScenarioSet { scenarios, skipped })
}

fn run(
    policy: &dyn Policy,
    stats: &NormStats,
    s: &EvalScenario,
    rng: &mut SimRng,
) -> Result<Rollout> {
    rollout(
        policy,
        stats,
        &s.warmup,
        &s.warmup_kinematics,
        s.scenario.clone(),
        s.prev_leader_velocity,
        s.steps,
        rng,
    )
}

fn row_base(i: usize, s: &EvalScenario, r: &Rollout) -> ScenarioRow {
    ScenarioRow {
        index: i,
        driver_id: s.driver_id,
        steps: r.styles.len(),
        crashed: r.crash_step.is_some(),
        crash_step: r.crash_step,
        density: None,
        coverage: None,
        f1: None,
        style: r.styles.first().copied().flatten(),
    }
}

/// Density, coverage and F1 of closed-loop observations against the logged
/// ones, per scenario and averaged.
pub fn evaluate_f1(
    policy: &dyn Policy,
    stats: &NormStats,
    set: &ScenarioSet,
    k: usize,
    seed: u64,
    exec: Exec,
) -> Result<EvalReport> {
    let rows = par::try_map_with(exec, set.scenarios.len(), |i| {
        let s = &set.scenarios[i];
        let r = run(policy, stats, s, &mut item_rng(seed, i))?;
        let real: Vec<Vec<f64>> = s.real.iter().map(|o| o.0.to_vec()).collect();
        let fake: Vec<Vec<f64>> = r.simulated_observations().map(|o| o.0.to_vec()).collect();
        let (d, c) = if fake.is_empty() {
            (0.0, 0.0)
        } else {
            density_coverage(&real, &fake, k)?
        };
        let mut row = row_base(i, s, &r);
        row.density = Some(d);
        row.coverage = Some(c);
        row.f1 = Some(f1(d, c));
        Ok::<_, DsdpError>(row)
    })?;
    EvalReport::from_rows(&policy.name(), Metric::F1, seed, rows, set.skipped)
}

/// Share of scenarios in which the ego collides.
pub fn evaluate_crash(
    policy: &dyn Policy,
    stats: &NormStats,
    set: &ScenarioSet,
    seed: u64,
    exec: Exec,
) -> Result<EvalReport> {
    if set.scenarios.is_empty() {
        return Err(DsdpError::Precondition(
            "crash evaluation needs at least one scenario".into(),
        ));
    }
    let rows = par::try_map_with(exec, set.scenarios.len(), |i| {
        let s = &set.scenarios[i];
        let r = run(policy, stats, s, &mut item_rng(seed, i))?;
        Ok::<_, DsdpError>(row_base(i, s, &r))
    })?;
    EvalReport::from_rows(&policy.name(), Metric::Crash, seed, rows, set.skipped)
}
