use numkit::{Checkpoint, ParamStore, Sequential, Tape, Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::schedule::{forward_noise_with, NoiseSchedule, ScheduleConfig};
use super::sieve::{Sieve, SieveConfig, SieveInputs};
use crate::datasets::{stack_windows, OBS_DIM, STEP_CHANNELS};
use crate::error::{DsdpError, Result};
use crate::nn::{conv_encoder, header, meta_as};
use crate::seeding::SimRng;

/// What the denoiser is conditioned on besides the observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Conditioning {
    None,
    /// A decoded style vector of width `dim`.
    Style {
        dim: usize,
    },
    /// A warm-up window of `l_p` steps through a jointly trained conv encoder.
    Warmup {
        l_p: usize,
        channels: usize,
        dim: usize,
    },
}

impl Conditioning {
    /// Width of the raw per-example context vector.
    pub fn raw_width(&self) -> usize {
        match *self {
            Conditioning::None => 0,
            Conditioning::Style { dim } => dim,
            Conditioning::Warmup { l_p, .. } => STEP_CHANNELS * l_p,
        }
    }

    fn embed_width(&self) -> usize {
        match *self {
            Conditioning::None => 0,
            Conditioning::Style { dim } | Conditioning::Warmup { dim, .. } => dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub sieve: SieveConfig,
    pub schedule: ScheduleConfig,
    pub conditioning: Conditioning,
}

/// Actions live in `[0, 1]`; the diffusion runs on `2a − 1`.
pub fn to_model(a: f64) -> f64 {
    2.0 * a - 1.0
}

pub fn from_model(x: f64) -> f64 {
    (x + 1.0) / 2.0
}

/// Noise predictor `ε̂(o, x_t, t, ctx)`. `ctx` rows are embedded contexts
/// (see [`DiffusionNet::embed_context`]); empty when unconditioned.
pub trait EpsModel: Sync {
    fn predict_eps(
        &self,
        obs: &[[f64; OBS_DIM]],
        x_t: &[f64],
        t: &[usize],
        ctx: &[Vec<f64>],
    ) -> Result<Vec<f64>>;

    /// Predictor for many calls at one observation and context:
    /// `(x_t rows, t) → ε̂ rows`.
    fn fixed<'a>(&'a self, obs: &[f64; OBS_DIM], ctx: &[f64]) -> Result<FixedEps<'a>> {
        let (obs, ctx) = (*obs, ctx.to_vec());
        Ok(Box::new(move |x: &[f64], t: usize| {
            let n = x.len();
            let ctx_rows = if ctx.is_empty() {
                Vec::new()
            } else {
                vec![ctx.clone(); n]
            };
            self.predict_eps(&vec![obs; n], x, &vec![t; n], &ctx_rows)
        }))
    }
}

pub type FixedEps<'a> = Box<dyn FnMut(&[f64], usize) -> Result<Vec<f64>> + 'a>;

impl<F> EpsModel for F
where
    F: Fn(&[[f64; OBS_DIM]], &[f64], &[usize], &[Vec<f64>]) -> Result<Vec<f64>> + Sync,
{
    fn predict_eps(
        &self,
        obs: &[[f64; OBS_DIM]],
        x_t: &[f64],
        t: &[usize],
        ctx: &[Vec<f64>],
    ) -> Result<Vec<f64>> {
        self(obs, x_t, t, ctx)
    }
}

/// Denoiser with its schedule and optional context encoder.
#[derive(Clone, Debug)]
pub struct DiffusionNet {
    pub(crate) store: ParamStore,
    pub(crate) graph: DenoiserGraph,
}

/// Everything but the parameter values.
#[derive(Clone, Debug)]
pub(crate) struct DenoiserGraph {
    config: DiffusionConfig,
    schedule: NoiseSchedule,
    sieve: Sieve,
    ctx_encoder: Option<Sequential>,
}

impl DiffusionNet {
    pub fn new(config: &DiffusionConfig, rng: &mut impl Rng) -> Result<Self> {
        let schedule = config.schedule.build()?;
        let mut store = ParamStore::new();
        let ctx_encoder = match config.conditioning {
            Conditioning::Warmup { l_p, channels, dim } => {
                if l_p == 0 || channels == 0 || dim == 0 {
                    return Err(DsdpError::Config(format!(
                        "invalid conditioning {:?}",
                        config.conditioning
                    )));
                }
                Some(conv_encoder(
                    &mut store,
                    "cond",
                    STEP_CHANNELS,
                    channels,
                    l_p,
                    None,
                    dim,
                    rng,
                ))
            }
            Conditioning::Style { dim: 0 } => {
                return Err(DsdpError::Config("style width must be positive".into()))
            }
            _ => None,
        };
        let inputs = SieveInputs {
            obs: OBS_DIM,
            context: config.conditioning.embed_width(),
            timestep: true,
            action: 1,
            out: 1,
        };
        let sieve = Sieve::new(&mut store, "eps", &config.sieve, inputs, rng)?;
        Ok(Self {
            store,
            graph: DenoiserGraph {
                config: *config,
                schedule,
                sieve,
                ctx_encoder,
            },
        })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.graph.config
    }

    pub fn conditioning(&self) -> Conditioning {
        self.graph.config.conditioning
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.graph.schedule
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Embedded contexts for inference. Identity except for warm-up windows,
    /// which go through the encoder once so sampling does not repeat it.
    pub fn embed_context(&self, raw: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.graph.check_raw(raw, raw.len())?;
        match self.graph.config.conditioning {
            Conditioning::Warmup { .. } => {
                let mut tape = Tape::new(&self.store);
                let c = self.graph.context_var(&mut tape, raw)?.expect("context");
                let c = tape.value(c);
                Ok((0..c.rows()).map(|r| c.row(r).to_vec()).collect())
            }
            _ => Ok(raw.to_vec()),
        }
    }

    pub fn to_checkpoint(
        &self,
        kind: &str,
        fingerprint: &str,
        seed: u64,
        extra: &impl Serialize,
    ) -> Result<Checkpoint> {
        let meta = DiffusionMeta {
            config: self.graph.config,
            extra: serde_json::to_value(extra)?,
        };
        Ok(Checkpoint::new(header(kind, fingerprint, seed, &meta)?)
            .with_group("denoiser", &self.store))
    }

    /// Restores a denoiser and the `extra` metadata stored with it.
    pub fn from_checkpoint<T: serde::de::DeserializeOwned>(
        ck: &Checkpoint,
        kind: &str,
    ) -> Result<(Self, T)> {
        if ck.header.kind != kind {
            return Err(DsdpError::Config(format!(
                "expected a {kind} checkpoint, got {}",
                ck.header.kind
            )));
        }
        let meta: DiffusionMeta = meta_as(&ck.header)?;
        let mut net = Self::new(&meta.config, &mut SimRng::seed_from_u64(0))?;
        ck.restore_group("denoiser", &mut net.store)?;
        Ok((net, serde_json::from_value(meta.extra)?))
    }
}

impl DenoiserGraph {
    fn check_raw(&self, raw: &[Vec<f64>], n: usize) -> Result<()> {
        let w = self.config.conditioning.raw_width();
        let ok = if w == 0 {
            raw.is_empty() || raw.iter().all(Vec::is_empty)
        } else {
            raw.len() == n && raw.iter().all(|r| r.len() == w)
        };
        if !ok {
            return Err(DsdpError::Precondition(format!(
                "context rows must have width {w} for {:?}",
                self.config.conditioning
            )));
        }
        Ok(())
    }

    /// Context `[B, embed]` on the tape from raw rows, or `None`.
    fn context_var(&self, tape: &mut Tape<'_>, raw: &[Vec<f64>]) -> Result<Option<Var>> {
        Ok(match self.config.conditioning {
            Conditioning::None => None,
            Conditioning::Style { dim } => {
                let data: Vec<f64> = raw.iter().flatten().copied().collect();
                Some(tape.input(Tensor::new(vec![raw.len(), dim], data)?))
            }
            Conditioning::Warmup { l_p, .. } => {
                let x = tape.input(stack_windows(raw, l_p)?);
                Some(
                    self.ctx_encoder
                        .as_ref()
                        .expect("warm-up encoder")
                        .forward(tape, x)?,
                )
            }
        })
    }

    fn obs_var(tape: &mut Tape<'_>, obs: &[[f64; OBS_DIM]]) -> Result<Var> {
        let data: Vec<f64> = obs.iter().flatten().copied().collect();
        Ok(tape.input(Tensor::new(vec![obs.len(), OBS_DIM], data)?))
    }

    fn eps_var(
        &self,
        tape: &mut Tape<'_>,
        obs: &[[f64; OBS_DIM]],
        x_t: &[f64],
        t: &[usize],
        ctx: Option<Var>,
    ) -> Result<Var> {
        let n = obs.len();
        if x_t.len() != n || t.len() != n {
            return Err(DsdpError::Precondition(
                "denoiser inputs must have one row per observation".into(),
            ));
        }
        let o = Self::obs_var(tape, obs)?;
        let a = tape.input(Tensor::new(vec![n, 1], x_t.to_vec())?);
        self.sieve.forward(tape, o, ctx, Some(t), Some(a))
    }

    /// Squared-error loss on the tape for clean model-space actions `x0`.
    pub(crate) fn loss_var(
        &self,
        tape: &mut Tape<'_>,
        obs: &[[f64; OBS_DIM]],
        x0: &[f64],
        raw_ctx: &[Vec<f64>],
        noise: &NoiseDraw,
    ) -> Result<Var> {
        let n = obs.len();
        if n == 0 || x0.len() != n || noise.t.len() != n || noise.eps.len() != n {
            return Err(DsdpError::Precondition(
                "loss batch must be non-empty with matching rows".into(),
            ));
        }
        self.check_raw(raw_ctx, n)?;
        let x_t: Vec<f64> = (0..n)
            .map(|i| forward_noise_with(self.schedule.alpha_bar[noise.t[i]], x0[i], noise.eps[i]))
            .collect();
        let ctx = self.context_var(tape, raw_ctx)?;
        let pred = self.eps_var(tape, obs, &x_t, &noise.t, ctx)?;
        let target = tape.input(Tensor::new(vec![n, 1], noise.eps.clone())?);
        let d = tape.sub(pred, target)?;
        let sq = tape.square(d)?;
        Ok(tape.mean_all(sq)?)
    }
}

#[derive(Serialize, Deserialize)]
struct DiffusionMeta {
    config: DiffusionConfig,
    extra: serde_json::Value,
}

impl EpsModel for DiffusionNet {
    fn predict_eps(
        &self,
        obs: &[[f64; OBS_DIM]],
        x_t: &[f64],
        t: &[usize],
        ctx: &[Vec<f64>],
    ) -> Result<Vec<f64>> {
        let g = &self.graph;
        let mut tape = Tape::new(&self.store);
        let c = match g.config.conditioning {
            Conditioning::None => None,
            _ => {
                let w = g.config.conditioning.embed_width();
                if ctx.len() != obs.len() || ctx.iter().any(|r| r.len() != w) {
                    return Err(DsdpError::Precondition(format!(
                        "embedded context rows must have width {w}"
                    )));
                }
                let data: Vec<f64> = ctx.iter().flatten().copied().collect();
                Some(tape.input(Tensor::new(vec![ctx.len(), w], data)?))
            }
        };
        let y = g.eps_var(&mut tape, obs, x_t, t, c)?;
        Ok(tape.value(y).data().to_vec())
    }

    fn fixed<'a>(&'a self, obs: &[f64; OBS_DIM], ctx: &[f64]) -> Result<FixedEps<'a>> {
        let ctx = (self.graph.config.conditioning != Conditioning::None).then_some(ctx);
        let mut f = self.graph.sieve.fix(&self.store, obs, ctx)?;
        Ok(Box::new(move |x: &[f64], t: usize| f.eval(x, t)))
    }
}

/// Per-example diffusion step and noise.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub t: Vec<usize>,
    pub eps: Vec<f64>,
}

/// `t ~ U{1..T}` and `eps ~ N(0, 1)` for `n` examples.
pub fn draw_noise(n: usize, schedule: &NoiseSchedule, rng: &mut impl Rng) -> NoiseDraw {
    let mut t = Vec::with_capacity(n);
    let mut eps = Vec::with_capacity(n);
    for _ in 0..n {
        t.push(rng.random_range(1..=schedule.steps));
        eps.push(rng.sample(StandardNormal));
    }
    NoiseDraw { t, eps }
}

/// Mean `‖eps − ε̂(o, x_t, t, c)‖²` over a batch of clean model-space actions.
pub fn ddpm_loss(
    model: &impl EpsModel,
    schedule: &NoiseSchedule,
    obs: &[[f64; OBS_DIM]],
    x0: &[f64],
    ctx: &[Vec<f64>],
    noise: &NoiseDraw,
) -> Result<f64> {
    let n = obs.len();
    if n == 0 || x0.len() != n || noise.t.len() != n || noise.eps.len() != n {
        return Err(DsdpError::Precondition(
            "loss batch must be non-empty with matching rows".into(),
        ));
    }
    let x_t = (0..n)
        .map(|i| schedule.forward_noise(x0[i], noise.t[i], noise.eps[i]))
        .collect::<Result<Vec<_>>>()?;
    let pred = model.predict_eps(obs, &x_t, &noise.t, ctx)?;
    Ok(pred
        .iter()
        .zip(&noise.eps)
        .map(|(p, e)| (e - p).powi(2))
        .sum::<f64>()
        / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SamplerKind {
    Ddpm,
    /// `extra` further noiseless denoising steps at `t = 1`.
    DiffusionX {
        extra: usize,
    },
    /// Best of `samples` chains under a Gaussian KDE; Silverman bandwidth when `None`.
    Kde {
        samples: usize,
        bandwidth: Option<f64>,
    },
}

impl Default for SamplerKind {
    fn default() -> Self {
        SamplerKind::Ddpm
    }
}

/// Runs `n` independent reverse chains for one observation and returns the
/// final model-space values, unclamped.
pub fn sample_chains(
    model: &impl EpsModel,
    schedule: &NoiseSchedule,
    obs: &[f64; OBS_DIM],
    ctx: &[f64],
    n: usize,
    extra: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let mut eps_at = model.fixed(obs, ctx)?;
    let mut x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    for t in (1..=schedule.steps).rev() {
        let eps = eps_at(&x, t)?;
        for (xi, e) in x.iter_mut().zip(eps) {
            let z = if t > 1 {
                rng.sample(StandardNormal)
            } else {
                0.0
            };
            *xi = schedule.reverse_step(*xi, t, e, z)?;
        }
    }
    for _ in 0..extra {
        let eps = eps_at(&x, 1)?;
        for (xi, e) in x.iter_mut().zip(eps) {
            *xi = schedule.reverse_step(*xi, 1, e, 0.0)?;
        }
    }
    Ok(x)
}

/// Silverman's rule `0.9·min(σ, IQR/1.34)·n^(−1/5)`, falling back to σ alone
/// when the IQR is zero and to 1e-3 when all samples coincide.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    if samples.len() < 2 {
        return 1e-3;
    }
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (n - 1.0);
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * n.powf(-0.2);
    if h > 0.0 {
        h
    } else {
        1e-3
    }
}

/// Index of the sample with the highest Gaussian kernel density among `samples`.
pub fn kde_select(samples: &[f64], bandwidth: f64) -> usize {
    let density = |x: f64| {
        samples
            .iter()
            .map(|s| (-0.5 * ((x - s) / bandwidth).powi(2)).exp())
            .sum::<f64>()
    };
    let mut best = 0;
    let mut best_d = f64::NEG_INFINITY;
    for (i, &x) in samples.iter().enumerate() {
        let d = density(x);
        if d > best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// One action in `[0, 1]` for observation `obs` under embedded context `ctx`.
pub fn sample_action(
    model: &impl EpsModel,
    schedule: &NoiseSchedule,
    obs: &[f64; OBS_DIM],
    ctx: &[f64],
    sampler: SamplerKind,
    rng: &mut impl Rng,
) -> Result<f64> {
    let x = match sampler {
        SamplerKind::Ddpm => sample_chains(model, schedule, obs, ctx, 1, 0, rng)?[0],
        SamplerKind::DiffusionX { extra } => {
            sample_chains(model, schedule, obs, ctx, 1, extra, rng)?[0]
        }
        SamplerKind::Kde { samples, bandwidth } => {
            if samples == 0 {
                return Err(DsdpError::Config(
                    "KDE sampler needs at least one sample".into(),
                ));
            }
            let xs = sample_chains(model, schedule, obs, ctx, samples, 0, rng)?;
            let h = bandwidth.unwrap_or_else(|| silverman_bandwidth(&xs));
            xs[kde_select(&xs, h)]
        }
    };
    Ok(from_model(x).clamp(0.0, 1.0))
}
