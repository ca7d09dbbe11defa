//! Energy-based policy with derivative-free sampling.

use numkit::{ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::fit::{fit, Part};
use super::heads::obs_tensor;
use crate::datasets::OBS_DIM;
use crate::error::{DsdpError, Result};
use crate::nn::{sample_categorical, softmax};
use crate::policy::{DiffusionData, PolicyConfig, PolicyTrainLog, Sieve, SieveConfig, SieveInputs};
use crate::seeding::{derive_seed, SimRng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EbmConfig {
    pub candidates: usize,
    pub iterations: usize,
    /// Initial proposal noise, in normalized action units.
    pub noise: f64,
    /// Factor applied to the proposal noise after each iteration.
    pub shrink: f64,
    /// Uniform counter-examples per positive during training.
    pub negatives: usize,
}

impl Default for EbmConfig {
    fn default() -> Self {
        Self {
            candidates: 256,
            iterations: 3,
            noise: 0.1,
            shrink: 0.5,
            negatives: 64,
        }
    }
}

impl EbmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates == 0
            || self.negatives == 0
            || !(self.noise >= 0.0)
            || !(self.shrink > 0.0 && self.shrink <= 1.0)
        {
            return Err(DsdpError::Config(format!("invalid EBM config {self:?}")));
        }
        Ok(())
    }
}

/// Derivative-free minimisation of `energy` over `[0, 1]`: uniform candidates
/// are resampled in proportion to `exp(−E)` and jittered with shrinking noise
/// for `iterations` rounds; the lowest-energy final candidate is returned.
pub fn derivative_free_sample<E>(mut energy: E, cfg: &EbmConfig, rng: &mut impl Rng) -> Result<f64>
where
    E: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let n = cfg.candidates;
    let mut xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let mut sigma = cfg.noise;
    for _ in 0..cfg.iterations {
        let e = energy(&xs)?;
        let p = softmax(&e.iter().map(|e| -e).collect::<Vec<_>>());
        xs = (0..n)
            .map(|_| {
                (xs[sample_categorical(&p, rng)] + sigma * rng.sample::<f64, _>(StandardNormal))
                    .clamp(0.0, 1.0)
            })
            .collect();
        sigma *= cfg.shrink;
    }
    let e = energy(&xs)?;
    let best = (0..n).min_by(|&a, &b| e[a].total_cmp(&e[b])).unwrap_or(0);
    Ok(xs[best])
}

#[derive(Clone, Debug)]
pub struct EbmModel {
    pub(crate) config: EbmConfig,
    pub(crate) store: ParamStore,
    pub(crate) sieve: Sieve,
}

pub(crate) fn ebm_inputs() -> SieveInputs {
    SieveInputs {
        obs: OBS_DIM,
        context: 0,
        timestep: false,
        action: 1,
        out: 1,
    }
}

impl EbmModel {
    pub fn new(config: EbmConfig, sieve: &SieveConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let sieve = Sieve::new(&mut store, "energy", sieve, ebm_inputs(), rng)?;
        Ok(Self {
            config,
            store,
            sieve,
        })
    }

    pub fn config(&self) -> &EbmConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Energies of `actions` at one observation.
    pub fn energies(&self, obs: &[f64; OBS_DIM], actions: &[f64]) -> Result<Vec<f64>> {
        self.sieve
            .fix(&self.store, obs, None)?
            .eval_at(actions, None)
    }

    pub fn sample(&self, obs: &[f64; OBS_DIM], rng: &mut impl Rng) -> Result<f64> {
        let mut fixed = self.sieve.fix(&self.store, obs, None)?;
        derivative_free_sample(|xs| fixed.eval_at(xs, None), &self.config, rng)
    }

    /// Classification of each positive against its own uniform negatives
    /// with logits `−E`; the positive is column 0.
    fn loss(
        &self,
        tape: &mut Tape<'_>,
        data: &DiffusionData,
        rows: &[usize],
        rng: &mut SimRng,
    ) -> Result<Var> {
        let m = self.config.negatives + 1;
        let mut obs = Vec::with_capacity(rows.len() * m);
        let mut act = Vec::with_capacity(rows.len() * m);
        for &i in rows {
            obs.extend(std::iter::repeat_n(data.obs[i], m));
            act.push(data.actions[i]);
            act.extend((1..m).map(|_| rng.random::<f64>()));
        }
        let o = tape.input(obs_tensor(&obs)?);
        let a = tape.input(Tensor::new(vec![act.len(), 1], act)?);
        let e = self.sieve.forward(tape, o, None, None, Some(a))?;
        let e = tape.reshape(e, &[rows.len(), m])?;
        let logits = tape.scale(e, -1.0)?;
        Ok(tape.cross_entropy(logits, &vec![0; rows.len()])?)
    }
}

pub fn train_ebm(
    config: EbmConfig,
    train: &DiffusionData,
    val: &DiffusionData,
    cfg: &PolicyConfig,
    seed: u64,
) -> Result<(EbmModel, PolicyTrainLog)> {
    let mut model = EbmModel::new(
        config,
        &cfg.sieve,
        &mut SimRng::seed_from_u64(derive_seed(seed, "init")),
    )?;
    let mut store = std::mem::take(&mut model.store);
    let log = fit(
        &mut store,
        train.len(),
        val.len(),
        cfg,
        seed,
        |tape, part, rows, rng| {
            model.loss(
                tape,
                if part == Part::Train { train } else { val },
                rows,
                rng,
            )
        },
    )?;
    model.store = store;
    Ok((model, log))
}
