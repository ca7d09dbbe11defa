//! Style-conditioned diffusion behavior cloning and closed-loop rollout.

mod diffusion;
mod schedule;
mod sieve;
mod train;

pub use diffusion::{
    ddpm_loss, draw_noise, from_model, kde_select, sample_action, sample_chains,
    silverman_bandwidth, to_model, Conditioning, DiffusionConfig, DiffusionNet, EpsModel, FixedEps,
    NoiseDraw, SamplerKind,
};
pub use schedule::{forward_noise_with, make_schedule, NoiseSchedule, ScheduleConfig};
pub use sieve::{Sieve, SieveConfig, SieveInputs};
pub use train::{
    style_conditioned_data, train_diffusion, train_policy, unconditioned_data, validation_split,
    warmup_conditioned_data, CheckpointScore, DiffusionData, PolicyConfig, PolicyTrainLog,
    StyleWindow, TrainedDiffusion,
};

use serde::{Deserialize, Serialize};

use crate::datasets::{
    window_values, Action, Kinematics, LeaderState, NormStats, Observation, Step, Trajectory,
};
use crate::error::{DsdpError, Result};
use crate::seeding::SimRng;
use crate::styles::{ReprFunction, StyleCode, StylePrior};
use crate::trafficsim::Scenario;

pub const POLICY_KIND: &str = "policy";

/// What an episode sees at each control step.
pub struct StepContext<'a> {
    pub obs: Observation,
    pub scenario: &'a Scenario,
}

/// A trained controller. Episodes hold any per-episode state (such as a
/// sampled style) fixed from [`Policy::begin`] until the episode ends.
pub trait Policy: Send + Sync {
    fn name(&self) -> String;

    /// Warm-up steps the policy needs before it can act.
    fn warmup_len(&self) -> usize;

    fn begin<'p>(&'p self, warmup: &[Step], rng: &mut SimRng) -> Result<Box<dyn Episode + 'p>>;
}

pub trait Episode {
    /// Ego acceleration in m/s².
    fn accel(&mut self, ctx: &StepContext<'_>, rng: &mut SimRng) -> Result<f64>;

    /// Style index in force, if the policy has one.
    fn style(&self) -> Option<u32> {
        None
    }
}

/// Where a diffusion policy gets its context at the start of an episode.
#[derive(Clone, Debug)]
pub enum ContextSource {
    None,
    /// Index sampled from the prior on the warm-up window and decoded once.
    Style {
        repr: ReprFunction,
        prior: StylePrior,
        temperature: f64,
    },
    /// The warm-up window itself, embedded by the denoiser's encoder.
    Warmup,
}

/// A diffusion denoiser with its context source and action sampler.
#[derive(Clone, Debug)]
pub struct DiffusionPolicy {
    pub name: String,
    pub net: DiffusionNet,
    pub context: ContextSource,
    pub stats: NormStats,
    pub sampler: SamplerKind,
}

impl DiffusionPolicy {
    pub fn new(
        name: &str,
        net: DiffusionNet,
        context: ContextSource,
        stats: NormStats,
        sampler: SamplerKind,
    ) -> Result<Self> {
        let ok = matches!(
            (&context, net.conditioning()),
            (ContextSource::None, Conditioning::None)
                | (ContextSource::Warmup, Conditioning::Warmup { .. })
                | (ContextSource::Style { .. }, Conditioning::Style { .. })
        );
        if !ok {
            return Err(DsdpError::Config(format!(
                "context source does not fit a denoiser conditioned on {:?}",
                net.conditioning()
            )));
        }
        if let (ContextSource::Style { repr, prior, .. }, Conditioning::Style { dim }) =
            (&context, net.conditioning())
        {
            if repr.style_dim() != dim || prior.codebook_size() != repr.codebook_size() {
                return Err(DsdpError::Config(
                    "style function, prior and denoiser disagree on sizes".into(),
                ));
            }
        }
        Ok(Self {
            name: name.into(),
            net,
            context,
            stats,
            sampler,
        })
    }
}

struct DiffusionEpisode<'p> {
    policy: &'p DiffusionPolicy,
    ctx: Vec<f64>,
    code: Option<StyleCode>,
}

impl Episode for DiffusionEpisode<'_> {
    fn accel(&mut self, ctx: &StepContext<'_>, rng: &mut SimRng) -> Result<f64> {
        let p = self.policy;
        let a = sample_action(
            &p.net,
            p.net.schedule(),
            &ctx.obs.0,
            &self.ctx,
            p.sampler,
            rng,
        )?;
        Ok(p.stats.denormalize_action(Action(a)))
    }

    fn style(&self) -> Option<u32> {
        self.code.as_ref().map(|c| c.index)
    }
}

impl Policy for DiffusionPolicy {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn warmup_len(&self) -> usize {
        match (&self.context, self.net.conditioning()) {
            (
                ContextSource::Style {
                    prior: StylePrior::Learned(p),
                    ..
                },
                _,
            ) => p.l_p(),
            (_, Conditioning::Warmup { l_p, .. }) => l_p,
            _ => 0,
        }
    }

    fn begin<'p>(&'p self, warmup: &[Step], rng: &mut SimRng) -> Result<Box<dyn Episode + 'p>> {
        let need = self.warmup_len();
        if warmup.len() < need {
            return Err(DsdpError::Precondition(format!(
                "warm-up has {} steps, policy needs {need}",
                warmup.len()
            )));
        }
        let tail = &warmup[warmup.len() - need..];
        let (ctx, code) = match &self.context {
            ContextSource::None => (Vec::new(), None),
            ContextSource::Style {
                repr,
                prior,
                temperature,
            } => {
                let (code, c) = prior.sample_style(repr, tail, rng, *temperature)?;
                (c, Some(code))
            }
            ContextSource::Warmup => (
                self.net.embed_context(&[window_values(tail)])?.remove(0),
                None,
            ),
        };
        Ok(Box::new(DiffusionEpisode {
            policy: self,
            ctx,
            code,
        }))
    }
}

/// A closed-loop episode: the warm-up steps followed by simulated ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub warmup_len: usize,
    /// Style in force at each simulated step.
    pub styles: Vec<Option<u32>>,
    /// Simulated step (1-based) at which the ego collided.
    pub crash_step: Option<usize>,
}

impl Rollout {
    /// Observations produced in closed loop.
    pub fn simulated_observations(&self) -> impl Iterator<Item = &Observation> {
        self.trajectory.steps[self.warmup_len..]
            .iter()
            .map(|s| &s.obs)
    }
}

fn kinematics_of(s: &Scenario, accel: f64) -> Kinematics {
    let ego = s.ego();
    Kinematics {
        position: ego.position,
        velocity: ego.velocity,
        accel,
        length: ego.length,
        leader: s.leader_of(s.ego_index).map(|l| LeaderState {
            position: l.position,
            velocity: l.velocity,
            length: l.length,
        }),
    }
}

/// Runs `policy` from `scenario` for up to `steps` steps after the logged
/// `warmup`, stopping at a collision. `prev_leader_velocity` is the leader's
/// speed one step before the scenario's initial state, if known.
pub fn rollout(
    policy: &dyn Policy,
    stats: &NormStats,
    warmup: &[Step],
    warmup_kinematics: &[Kinematics],
    mut scenario: Scenario,
    prev_leader_velocity: Option<f64>,
    steps: usize,
    rng: &mut SimRng,
) -> Result<Rollout> {
    if warmup.len() < policy.warmup_len() {
        return Err(DsdpError::Precondition(format!(
            "warm-up has {} steps, {} needs {}",
            warmup.len(),
            policy.name(),
            policy.warmup_len()
        )));
    }
    if warmup_kinematics.len() != warmup.len() {
        return Err(DsdpError::Precondition(
            "warm-up steps and kinematics differ in length".into(),
        ));
    }
    let mut episode = policy.begin(warmup, rng)?;
    let mut out_steps = warmup.to_vec();
    let mut kin = warmup_kinematics.to_vec();
    let mut styles = Vec::with_capacity(steps);
    let mut prev_lv = prev_leader_velocity;
    let mut crash_step = None;
    for k in 0..steps {
        let leader = scenario.leader_of(scenario.ego_index).map(|l| l.velocity);
        let obs = stats.observation(
            scenario.ego().velocity,
            scenario
                .ego_space_headway()
                .zip(leader)
                .map(|(sh, lv)| (sh, lv, prev_lv.unwrap_or(lv))),
        );
        let accel = episode.accel(
            &StepContext {
                obs,
                scenario: &scenario,
            },
            rng,
        )?;
        let accel = accel.clamp(-crate::trafficsim::GRAVITY, crate::trafficsim::GRAVITY);
        out_steps.push(Step {
            obs,
            action: stats.normalize_accel(accel),
        });
        kin.push(kinematics_of(&scenario, accel));
        styles.push(episode.style());
        prev_lv = leader;
        scenario.step(accel)?;
        if scenario.crashed {
            crash_step = Some(k + 1);
            break;
        }
    }
    let driver = scenario.ego_index as u64;
    Ok(Rollout {
        trajectory: Trajectory::new(driver, 0, out_steps, kin)?,
        warmup_len: warmup.len(),
        styles,
        crash_step,
    })
}
