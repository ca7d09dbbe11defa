use std::collections::BTreeMap;

use numkit::{Adam, AdamConfig, Tape};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::diffusion::{
    draw_noise, to_model, Conditioning, DiffusionConfig, DiffusionNet, NoiseDraw,
};
use super::schedule::ScheduleConfig;
use super::sieve::SieveConfig;
use crate::datasets::{Trajectory, OBS_DIM};
use crate::error::{DsdpError, Result};
use crate::nn::train_step;
use crate::seeding::{derive_seed, SimRng};
use crate::styles::ReprFunction;

/// Observation, action and raw context rows for diffusion training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiffusionData {
    pub obs: Vec<[f64; OBS_DIM]>,
    /// Normalized actions in `[0, 1]`.
    pub actions: Vec<f64>,
    /// One row per example, or empty when unconditioned.
    pub context: Vec<Vec<f64>>,
}

impl DiffusionData {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    fn push_traj(&mut self, t: &Trajectory) {
        for s in &t.steps {
            self.obs.push(s.obs.0);
            self.actions.push(s.action.0);
        }
    }

    fn gather(&self, idx: &[usize]) -> (Vec<[f64; OBS_DIM]>, Vec<f64>, Vec<Vec<f64>>) {
        let obs = idx.iter().map(|&i| self.obs[i]).collect();
        let x0 = idx.iter().map(|&i| to_model(self.actions[i])).collect();
        let ctx = if self.context.is_empty() {
            Vec::new()
        } else {
            idx.iter().map(|&i| self.context[i].clone()).collect()
        };
        (obs, x0, ctx)
    }
}

/// Which ground-truth window supplies the style for step `t` during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleWindow {
    /// The `L_c` window starting at `t`, which contains the target action.
    Aligned,
    /// A uniformly drawn window of the same trajectory, as at rollout time,
    /// where one code is held for the whole episode.
    SameTrajectory,
}

/// Examples conditioned on the decoded style of a ground-truth window.
pub fn style_conditioned_data(
    trajs: &[Trajectory],
    repr: &ReprFunction,
    window: StyleWindow,
    seed: u64,
) -> Result<DiffusionData> {
    if !repr.is_frozen() {
        return Err(DsdpError::Precondition(
            "policy training needs a frozen style function".into(),
        ));
    }
    let mut rng = SimRng::seed_from_u64(seed);
    let mut data = DiffusionData::default();
    let mut cache: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for t in trajs.iter().filter(|t| t.len() >= repr.l_c()) {
        let mut codes = repr.step_codes(t)?;
        if window == StyleWindow::SameTrajectory {
            let starts = t.len() - repr.l_c() + 1;
            codes = (0..t.len())
                .map(|_| codes[rng.random_range(0..starts)].clone())
                .collect();
        }
        for code in &codes {
            if !cache.contains_key(&code.index) {
                cache.insert(code.index, repr.style_vector(code)?);
            }
            data.context.push(cache[&code.index].clone());
        }
        data.push_traj(t);
    }
    Ok(data)
}

/// Examples conditioned on the first `l_p` steps of their trajectory.
pub fn warmup_conditioned_data(trajs: &[Trajectory], l_p: usize) -> Result<DiffusionData> {
    let mut data = DiffusionData::default();
    for t in trajs.iter().filter(|t| t.len() >= l_p) {
        let w = t.window_values(0, l_p)?;
        data.context.extend(std::iter::repeat_n(w, t.len()));
        data.push_traj(t);
    }
    Ok(data)
}

pub fn unconditioned_data(trajs: &[Trajectory]) -> DiffusionData {
    let mut data = DiffusionData::default();
    for t in trajs {
        data.push_traj(t);
    }
    data
}

/// Splits off the last `fraction` of trajectories (at least one) for validation.
pub fn validation_split(trajs: &[Trajectory], fraction: f64) -> (&[Trajectory], &[Trajectory]) {
    if trajs.len() < 2 || fraction <= 0.0 {
        return (trajs, &[]);
    }
    let n_val = ((trajs.len() as f64 * fraction).round() as usize).clamp(1, trajs.len() - 1);
    trajs.split_at(trajs.len() - n_val)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub sieve: SieveConfig,
    pub schedule: ScheduleConfig,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub checkpoint_every: usize,
    /// Share of training trajectories held out to pick the best checkpoint.
    pub val_fraction: f64,
    /// Validation examples scored per checkpoint.
    pub val_examples: usize,
    /// Optional cap on minibatches per epoch for desk-scale runs.
    pub max_batches_per_epoch: Option<usize>,
    pub style_window: StyleWindow,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            sieve: SieveConfig::default(),
            schedule: ScheduleConfig::default(),
            epochs: 30,
            batch: 32,
            lr: 1e-4,
            checkpoint_every: 5,
            val_fraction: 0.1,
            val_examples: 2048,
            max_batches_per_epoch: None,
            style_window: StyleWindow::SameTrajectory,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0
            || self.checkpoint_every == 0
            || !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.val_fraction)
            || self.val_examples == 0
        {
            return Err(DsdpError::Config(format!("invalid policy config {self:?}")));
        }
        self.sieve.validate()
    }

    pub fn diffusion(&self, conditioning: Conditioning) -> DiffusionConfig {
        DiffusionConfig {
            sieve: self.sieve,
            schedule: self.schedule,
            conditioning,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointScore {
    pub epoch: usize,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyTrainLog {
    pub examples: usize,
    pub val_examples: usize,
    pub epoch_loss: Vec<f64>,
    pub checkpoints: Vec<CheckpointScore>,
    pub best_epoch: usize,
}

/// Trained denoiser: every retained checkpoint and the index of the best one.
#[derive(Clone, Debug)]
pub struct TrainedDiffusion {
    pub checkpoints: Vec<(usize, DiffusionNet)>,
    pub best: usize,
    pub log: PolicyTrainLog,
}

impl TrainedDiffusion {
    pub fn best_net(&self) -> &DiffusionNet {
        &self.checkpoints[self.best].1
    }

    pub fn into_best(mut self) -> DiffusionNet {
        self.checkpoints.swap_remove(self.best).1
    }
}

/// Validation loss under a fixed noise draw.
struct Validator {
    idx: Vec<usize>,
    noise: NoiseDraw,
}

impl Validator {
    fn new(data: &DiffusionData, net: &DiffusionNet, n: usize, seed: u64) -> Self {
        let mut rng = SimRng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(n);
        let noise = draw_noise(idx.len(), net.schedule(), &mut rng);
        Self { idx, noise }
    }

    fn loss(&self, net: &DiffusionNet, data: &DiffusionData) -> Result<f64> {
        let (obs, x0, ctx) = data.gather(&self.idx);
        let mut sum = 0.0;
        for (k, chunk) in self.idx.chunks(512).enumerate() {
            let r = k * 512..k * 512 + chunk.len();
            let noise = NoiseDraw {
                t: self.noise.t[r.clone()].to_vec(),
                eps: self.noise.eps[r.clone()].to_vec(),
            };
            let c = if ctx.is_empty() {
                &[][..]
            } else {
                &ctx[r.clone()]
            };
            let mut tape = Tape::new(net.store());
            let l = net
                .graph
                .loss_var(&mut tape, &obs[r.clone()], &x0[r], c, &noise)?;
            sum += tape.value(l).item() * chunk.len() as f64;
        }
        Ok(sum / self.idx.len() as f64)
    }
}

/// Adam on the denoising loss with periodic checkpoints; the best is the
/// one with the lowest validation loss (training loss if `val` is empty).
pub fn train_diffusion(
    mut net: DiffusionNet,
    train: &DiffusionData,
    val: &DiffusionData,
    cfg: &PolicyConfig,
    seed: u64,
) -> Result<TrainedDiffusion> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(DsdpError::Precondition(
            "policy training needs at least one example".into(),
        ));
    }
    let scored = if val.is_empty() { train } else { val };
    let validator = Validator::new(
        scored,
        &net,
        cfg.val_examples,
        derive_seed(seed, "validation"),
    );
    let mut rng = SimRng::seed_from_u64(derive_seed(seed, "batches"));
    let mut adam = Adam::new(net.store(), AdamConfig::with_lr(cfg.lr))?;
    let mut log = PolicyTrainLog {
        examples: train.len(),
        val_examples: validator.idx.len(),
        ..Default::default()
    };
    let mut checkpoints = vec![(0, net.clone())];
    log.checkpoints.push(CheckpointScore {
        epoch: 0,
        val_loss: validator.loss(&net, scored)?,
    });
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in order
            .chunks(cfg.batch)
            .take(cfg.max_batches_per_epoch.unwrap_or(usize::MAX))
        {
            let (obs, x0, ctx) = train.gather(chunk);
            let noise = draw_noise(chunk.len(), net.schedule(), &mut rng);
            let graph = &net.graph;
            sum += train_step(&mut net.store, &mut adam, |tape| {
                graph.loss_var(tape, &obs, &x0, &ctx, &noise)
            })?;
            n += 1;
        }
        log.epoch_loss.push(sum / n.max(1) as f64);
        if epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs {
            log.checkpoints.push(CheckpointScore {
                epoch,
                val_loss: validator.loss(&net, scored)?,
            });
            checkpoints.push((epoch, net.clone()));
        }
    }
    let best = (0..log.checkpoints.len())
        .min_by(|&a, &b| {
            log.checkpoints[a]
                .val_loss
                .total_cmp(&log.checkpoints[b].val_loss)
        })
        .unwrap_or(0);
    log.best_epoch = log.checkpoints[best].epoch;
    Ok(TrainedDiffusion {
        checkpoints,
        best,
        log,
    })
}

/// Trains the style-conditioned denoiser against a frozen style function.
pub fn train_policy(
    trajs: &[Trajectory],
    repr: &ReprFunction,
    cfg: &PolicyConfig,
    seed: u64,
) -> Result<TrainedDiffusion> {
    let (fit, held) = validation_split(trajs, cfg.val_fraction);
    let train = style_conditioned_data(
        fit,
        repr,
        cfg.style_window,
        derive_seed(seed, "style-windows"),
    )?;
    let val = style_conditioned_data(
        held,
        repr,
        cfg.style_window,
        derive_seed(seed, "style-windows/val"),
    )?;
    let net = DiffusionNet::new(
        &cfg.diffusion(Conditioning::Style {
            dim: repr.style_dim(),
        }),
        &mut SimRng::seed_from_u64(derive_seed(seed, "init")),
    )?;
    train_diffusion(net, &train, &val, cfg, seed)
}
