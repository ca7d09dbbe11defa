//! Single-lane car-following simulator.
//!
//! Vehicles are ordered front to back. Ambient vehicles follow the
//! Intelligent Driver Model, replay a logged trajectory, or are the ego,
//! whose acceleration is supplied by the caller each step. Integration is
//! semi-implicit Euler: `v ← max(0, v + a·dt)`, then `x ← x + v·dt`.

use serde::{Deserialize, Serialize};

use crate::error::{DsdpError, Result};
use crate::par;

/// Simulation step of the evaluation protocol (10 Hz).
pub const DT: f64 = 0.1;
/// Acceleration cap in m/s².
pub const GRAVITY: f64 = 9.81;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    /// Desired speed, m/s.
    pub v0: f64,
    /// Desired time headway, s.
    pub time_headway: f64,
    /// Maximum acceleration, m/s².
    pub a_max: f64,
    /// Comfortable deceleration, m/s².
    pub b: f64,
    pub delta: f64,
    /// Jam distance, m.
    pub s0: f64,
}

impl IdmParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.v0,
            self.time_headway,
            self.a_max,
            self.b,
            self.delta,
            self.s0,
        ];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(DsdpError::Config(format!(
                "IDM parameters must be positive: {self:?}"
            )))
        }
    }

    /// Desired dynamic gap `s*`.
    pub fn desired_gap(&self, v: f64, dv: f64) -> f64 {
        self.s0 + v * self.time_headway + v * dv / (2.0 * (self.a_max * self.b).sqrt())
    }

    /// Gap at which a vehicle travelling at `v < v0` behind an equal-speed leader does not accelerate.
    pub fn equilibrium_gap(&self, v: f64) -> Option<f64> {
        let free = 1.0 - (v / self.v0).powf(self.delta);
        (free > 0.0).then(|| self.desired_gap(v, 0.0) / free.sqrt())
    }
}

/// IDM acceleration for speed `v`, bumper gap `gap` and closing speed `dv = v − v_leader`.
pub fn idm_accel(p: &IdmParams, v: f64, gap: f64, dv: f64) -> Result<f64> {
    if gap <= 0.0 || !gap.is_finite() {
        return Err(DsdpError::Sim(format!(
            "IDM needs a positive gap, got {gap}"
        )));
    }
    let s_star = p.desired_gap(v, dv);
    Ok(p.a_max * (1.0 - (v / p.v0).powf(p.delta) - (s_star / gap).powi(2)))
}

/// IDM acceleration on an empty road.
pub fn idm_free_accel(p: &IdmParams, v: f64) -> f64 {
    p.a_max * (1.0 - (v / p.v0).powf(p.delta))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Controller {
    Idm {
        params: IdmParams,
    },
    Ego,
    /// Follows a log; `positions[k]`/`velocities[k]` is the state after `k` steps.
    /// Past the end of the log the vehicle keeps its last velocity.
    Replay {
        positions: Vec<f64>,
        velocities: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    /// Front-bumper position along the lane, m.
    pub position: f64,
    pub velocity: f64,
    pub length: f64,
    pub controller: Controller,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Front to back.
    pub vehicles: Vec<Vehicle>,
    pub ego_index: usize,
    pub dt: f64,
    #[serde(default)]
    pub crashed: bool,
    #[serde(default)]
    pub steps_taken: usize,
}

impl Scenario {
    pub fn new(vehicles: Vec<Vehicle>, ego_index: usize, dt: f64) -> Result<Self> {
        if ego_index >= vehicles.len() {
            return Err(DsdpError::Sim(format!(
                "ego index {ego_index} out of range for {} vehicles",
                vehicles.len()
            )));
        }
        if !matches!(vehicles[ego_index].controller, Controller::Ego) {
            return Err(DsdpError::Sim(
                "ego vehicle must use the Ego controller".into(),
            ));
        }
        if vehicles
            .iter()
            .enumerate()
            .any(|(i, v)| i != ego_index && matches!(v.controller, Controller::Ego))
        {
            return Err(DsdpError::Sim("only one vehicle may be the ego".into()));
        }
        if !(dt > 0.0) {
            return Err(DsdpError::Sim(format!("dt must be positive, got {dt}")));
        }
        for v in &vehicles {
            if v.velocity < 0.0 || v.length <= 0.0 {
                return Err(DsdpError::Sim(format!("invalid vehicle {v:?}")));
            }
            if let Controller::Idm { params } = &v.controller {
                params.validate()?;
            }
        }
        let s = Self {
            vehicles,
            ego_index,
            dt,
            crashed: false,
            steps_taken: 0,
        };
        for i in 1..s.vehicles.len() {
            if s.gap(i).unwrap() <= 0.0 {
                return Err(DsdpError::Sim(format!(
                    "vehicles {} and {i} overlap or are out of order",
                    i - 1
                )));
            }
        }
        Ok(s)
    }

    pub fn ego(&self) -> &Vehicle {
        &self.vehicles[self.ego_index]
    }

    pub fn leader_of(&self, i: usize) -> Option<&Vehicle> {
        i.checked_sub(1).map(|j| &self.vehicles[j])
    }

    /// Bumper-to-bumper gap between vehicle `i` and its leader.
    pub fn gap(&self, i: usize) -> Option<f64> {
        self.leader_of(i)
            .map(|l| l.position - l.length - self.vehicles[i].position)
    }

    /// Front-to-front distance from the ego to its leader.
    pub fn ego_space_headway(&self) -> Option<f64> {
        self.leader_of(self.ego_index)
            .map(|l| l.position - self.ego().position)
    }

    fn accel_of(&self, i: usize, ego_accel: f64) -> Result<Option<f64>> {
        let v = &self.vehicles[i];
        Ok(match &v.controller {
            Controller::Ego => Some(ego_accel),
            Controller::Replay { .. } => None,
            Controller::Idm { params } => Some(match self.leader_of(i) {
                Some(l) => idm_accel(
                    params,
                    v.velocity,
                    self.gap(i).unwrap(),
                    v.velocity - l.velocity,
                )?,
                None => idm_free_accel(params, v.velocity),
            }),
        })
    }

    /// Advances one step. Errors once the scenario has crashed.
    pub fn step(&mut self, ego_accel: f64) -> Result<()> {
        if self.crashed {
            return Err(DsdpError::Sim("step after crash".into()));
        }
        if !ego_accel.is_finite() {
            return Err(DsdpError::Sim(format!(
                "non-finite ego acceleration {ego_accel}"
            )));
        }
        let accels = (0..self.vehicles.len())
            .map(|i| self.accel_of(i, ego_accel))
            .collect::<Result<Vec<_>>>()?;
        let k = self.steps_taken + 1;
        let dt = self.dt;
        for (v, a) in self.vehicles.iter_mut().zip(accels) {
            match (&v.controller, a) {
                (
                    Controller::Replay {
                        positions,
                        velocities,
                    },
                    _,
                ) => {
                    if k < positions.len() && k < velocities.len() {
                        v.position = positions[k];
                        v.velocity = velocities[k];
                    } else {
                        v.position += v.velocity * dt;
                    }
                }
                (_, Some(a)) => {
                    v.velocity = (v.velocity + a * dt).max(0.0);
                    v.position += v.velocity * dt;
                }
                (_, None) => unreachable!(),
            }
        }
        self.steps_taken = k;
        self.crashed = (1..self.vehicles.len()).any(|i| self.gap(i).unwrap() <= 0.0);
        Ok(())
    }
}

/// Supplies the ego acceleration (m/s²) for the current state.
pub trait EgoDriver {
    fn accel(&mut self, scenario: &Scenario) -> Result<f64>;
}

impl<F: FnMut(&Scenario) -> Result<f64>> EgoDriver for F {
    fn accel(&mut self, scenario: &Scenario) -> Result<f64> {
        self(scenario)
    }
}

/// Drives the ego with an IDM controller of its own.
#[derive(Clone, Debug)]
pub struct IdmDriver(pub IdmParams);

impl EgoDriver for IdmDriver {
    fn accel(&mut self, s: &Scenario) -> Result<f64> {
        let ego = s.ego();
        match s.leader_of(s.ego_index) {
            Some(l) => idm_accel(
                &self.0,
                ego.velocity,
                s.gap(s.ego_index).unwrap(),
                ego.velocity - l.velocity,
            ),
            None => Ok(idm_free_accel(&self.0, ego.velocity)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrashOutcome {
    pub crashed: Vec<bool>,
    /// Step at which each crashed scenario first collided.
    pub crash_step: Vec<Option<usize>>,
}

impl CrashOutcome {
    pub fn fraction(&self) -> f64 {
        if self.crashed.is_empty() {
            return 0.0;
        }
        self.crashed.iter().filter(|c| **c).count() as f64 / self.crashed.len() as f64
    }
}

/// Runs one scenario for up to `steps` steps, stopping at the first crash.
pub fn run_scenario(
    mut scenario: Scenario,
    steps: usize,
    driver: &mut impl EgoDriver,
) -> Result<(Scenario, Option<usize>)> {
    for k in 0..steps {
        let a = driver.accel(&scenario)?;
        scenario.step(a)?;
        if scenario.crashed {
            return Ok((scenario, Some(k + 1)));
        }
    }
    Ok((scenario, None))
}

/// Fraction of scenarios that crash within `steps`.
///
/// `make_driver(i, scenario)` builds the ego driver for scenario `i`; any
/// per-scenario randomness (such as a sampled style) is fixed there, once.
pub fn run_crash_eval<D, F>(
    scenarios: &[Scenario],
    steps: usize,
    make_driver: F,
) -> Result<CrashOutcome>
where
    D: EgoDriver,
    F: Fn(usize, &Scenario) -> Result<D> + Sync + Send,
{
    if scenarios.is_empty() {
        return Err(DsdpError::Precondition(
            "crash evaluation needs at least one scenario".into(),
        ));
    }
    let results = par::try_map_indexed(scenarios.len(), |i| {
        let mut driver = make_driver(i, &scenarios[i])?;
        run_scenario(scenarios[i].clone(), steps, &mut driver).map(|(_, c)| c)
    })?;
    Ok(CrashOutcome {
        crashed: results.iter().map(Option::is_some).collect(),
        crash_step: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> IdmParams {
        IdmParams {
            v0: 30.0,
            time_headway: 1.5,
            a_max: 1.0,
            b: 2.0,
            delta: 4.0,
            s0: 2.0,
        }
    }

    #[test]
    fn idm_free_flow_equilibrium() {
        let a = idm_accel(&params(), 30.0, 1e9, 0.0).unwrap();
        assert!(a <= 0.0 && a > -1e-12);
    }

    #[test]
    fn idm_standstill_equilibrium() {
        assert_eq!(idm_accel(&params(), 0.0, 2.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn idm_worked_value() {
        // s* = 2 + 10·1.5 = 17; 1 − (1/3)^4 − (17/20)^2
        let expected = 1.0 - (1.0f64 / 3.0).powi(4) - (17.0f64 / 20.0).powi(2);
        let got = idm_accel(&params(), 10.0, 20.0, 0.0).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.2652).abs() < 1e-4);
    }

    #[test]
    fn idm_rejects_nonpositive_gap() {
        assert!(idm_accel(&params(), 10.0, 0.0, 0.0).is_err());
        assert!(idm_accel(&params(), 10.0, -1.0, 0.0).is_err());
    }

    fn ego(position: f64, velocity: f64) -> Vehicle {
        Vehicle {
            position,
            velocity,
            length: 4.5,
            controller: Controller::Ego,
        }
    }

    #[test]
    fn euler_single_step() {
        let mut s = Scenario::new(vec![ego(0.0, 0.0)], 0, DT).unwrap();
        s.step(1.0).unwrap();
        assert!((s.ego().velocity - 0.1).abs() < 1e-15);
        assert!((s.ego().position - 0.01).abs() < 1e-15);
    }

    #[test]
    fn velocity_clamps_at_zero() {
        let mut s = Scenario::new(vec![ego(0.0, 0.2)], 0, DT).unwrap();
        s.step(-9.0).unwrap();
        assert_eq!(s.ego().velocity, 0.0);
        assert_eq!(s.ego().position, 0.0);
    }

    #[test]
    fn accelerating_into_stopped_leader_crashes() {
        let leader = Vehicle {
            position: 14.5,
            velocity: 0.0,
            length: 4.5,
            controller: Controller::Idm { params: params() },
        };
        let s = Scenario::new(vec![leader, ego(0.0, 20.0)], 1, DT).unwrap();
        let (end, at) = run_scenario(s, 200, &mut |_: &Scenario| Ok(GRAVITY)).unwrap();
        assert!(end.crashed);
        assert!(at.unwrap() <= 200);
        assert!(end.clone().step(0.0).is_err());
    }

    #[test]
    fn rejects_overlap() {
        let leader = Vehicle {
            position: 4.0,
            velocity: 0.0,
            length: 4.5,
            controller: Controller::Idm { params: params() },
        };
        assert!(Scenario::new(vec![leader, ego(0.0, 0.0)], 1, DT).is_err());
    }

    #[test]
    fn empty_crash_eval_errors() {
        let r = run_crash_eval(&[], 10, |_, _| Ok(IdmDriver(params())));
        assert!(r.is_err());
    }

    #[test]
    fn replay_follows_log() {
        let leader = Vehicle {
            position: 20.0,
            velocity: 10.0,
            length: 4.0,
            controller: Controller::Replay {
                positions: vec![20.0, 21.0, 22.5],
                velocities: vec![10.0, 12.0, 15.0],
            },
        };
        let mut s = Scenario::new(vec![leader, ego(0.0, 0.0)], 1, DT).unwrap();
        s.step(0.0).unwrap();
        assert_eq!(s.vehicles[0].position, 21.0);
        s.step(0.0).unwrap();
        assert_eq!(s.vehicles[0].velocity, 15.0);
        s.step(0.0).unwrap();
        assert!((s.vehicles[0].position - 24.0).abs() < 1e-12);
    }
}
