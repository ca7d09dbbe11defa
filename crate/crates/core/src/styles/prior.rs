use numkit::{Adam, AdamConfig, Checkpoint, ParamStore, Sequential, Tape};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::{ReprFunction, StyleCode};
use crate::datasets::{
    stack_windows, window_values, Step, Trajectory, DEFAULT_LP, OBS_DIM, STEP_CHANNELS,
};
use crate::error::{DsdpError, Result};
use crate::nn::{argmax, conv_encoder, header, meta_as, sample_categorical, softmax, train_step};
use crate::seeding::SimRng;

pub const PRIOR_KIND: &str = "prior";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub l_p: usize,
    pub channels: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Step between consecutive training windows within a trajectory.
    pub stride: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            l_p: DEFAULT_LP,
            channels: 16,
            hidden: 128,
            epochs: 20,
            batch: 128,
            lr: 1e-3,
            stride: 1,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l_p < 2
            || self.channels == 0
            || self.hidden == 0
            || self.batch == 0
            || self.stride == 0
            || !(self.lr > 0.0)
        {
            return Err(DsdpError::Config(format!("invalid prior config {self:?}")));
        }
        Ok(())
    }
}

/// Prior input for a warm-up window: all `L_p` observations and the first
/// `L_p − 1` actions (the last action slot is zero).
pub fn prior_input(warmup: &[Step]) -> Vec<f64> {
    let mut v = window_values(warmup);
    let l = warmup.len();
    if l > 0 {
        v[OBS_DIM * l + l - 1] = 0.0;
    }
    v
}

/// Classifier from a warm-up window to a style index.
#[derive(Clone, Debug)]
pub struct PriorNet {
    config: PriorConfig,
    codebook_size: usize,
    store: ParamStore,
    net: Sequential,
}

#[derive(Serialize, Deserialize)]
struct PriorMeta {
    config: PriorConfig,
    codebook_size: usize,
    l_p: usize,
}

impl PriorNet {
    pub fn new(config: &PriorConfig, codebook_size: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let net = conv_encoder(
            &mut store,
            "prior",
            STEP_CHANNELS,
            config.channels,
            config.l_p,
            Some(config.hidden),
            codebook_size,
            rng,
        );
        Ok(Self {
            config: config.clone(),
            codebook_size,
            store,
            net,
        })
    }

    pub fn config(&self) -> &PriorConfig {
        &self.config
    }

    pub fn l_p(&self) -> usize {
        self.config.l_p
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Logits for prepared inputs (see [`prior_input`]).
    pub fn logits_batch(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let x = stack_windows(inputs, self.config.l_p)?;
        let mut tape = Tape::new(&self.store);
        let xv = tape.input(x);
        let y = self.net.forward(&mut tape, xv)?;
        let y = tape.value(y);
        Ok((0..y.rows()).map(|r| y.row(r).to_vec()).collect())
    }

    pub fn logits(&self, warmup: &[Step]) -> Result<Vec<f64>> {
        if warmup.len() != self.config.l_p {
            return Err(DsdpError::Precondition(format!(
                "prior window must have L_p = {} steps, got {}",
                self.config.l_p,
                warmup.len()
            )));
        }
        Ok(self.logits_batch(&[prior_input(warmup)])?.remove(0))
    }

    /// Mean cross-entropy on prepared inputs and target indices.
    pub fn cross_entropy(&self, inputs: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
        let x = stack_windows(inputs, self.config.l_p)?;
        let mut tape = Tape::new(&self.store);
        let xv = tape.input(x);
        let y = self.net.forward(&mut tape, xv)?;
        let l = tape.cross_entropy(y, targets)?;
        Ok(tape.value(l).item())
    }

    pub fn to_checkpoint(&self, fingerprint: &str, seed: u64) -> Result<Checkpoint> {
        let meta = PriorMeta {
            config: self.config.clone(),
            codebook_size: self.codebook_size,
            l_p: self.config.l_p,
        };
        Ok(
            Checkpoint::new(header(PRIOR_KIND, fingerprint, seed, &meta)?)
                .with_group("prior", &self.store),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.kind != PRIOR_KIND {
            return Err(DsdpError::Config(format!(
                "expected a {PRIOR_KIND} checkpoint, got {}",
                ck.header.kind
            )));
        }
        let meta: PriorMeta = meta_as(&ck.header)?;
        let mut p = Self::new(
            &meta.config,
            meta.codebook_size,
            &mut SimRng::seed_from_u64(0),
        )?;
        ck.restore_group("prior", &mut p.store)?;
        Ok(p)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PriorTrainLog {
    pub examples: usize,
    pub init_loss: f64,
    pub epoch_loss: Vec<f64>,
}

/// Prepared inputs and head-aligned target codes for every window of `trajs`.
///
/// The target for a window starting at `s` is the code of the `L_c` window starting at `s`.
pub fn prior_examples(
    trajs: &[Trajectory],
    repr: &ReprFunction,
    l_p: usize,
    stride: usize,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let need = l_p.max(repr.l_c());
    let mut inputs = Vec::new();
    let mut code_windows = Vec::new();
    for t in trajs.iter().filter(|t| t.len() >= need) {
        for s in (0..=t.len() - need).step_by(stride.max(1)) {
            inputs.push(prior_input(&t.steps[s..s + l_p]));
            code_windows.push(t.window_values(s, repr.l_c())?);
        }
    }
    let mut targets = Vec::with_capacity(code_windows.len());
    for chunk in code_windows.chunks(4096) {
        targets.extend(repr.codes(chunk)?.into_iter().map(|c| c.index as usize));
    }
    Ok((inputs, targets))
}

/// Fits the prior by cross-entropy against codes of the frozen style function.
pub fn train_prior(
    trajs: &[Trajectory],
    repr: &ReprFunction,
    cfg: &PriorConfig,
    seed: u64,
) -> Result<(PriorNet, PriorTrainLog)> {
    if !repr.is_frozen() {
        return Err(DsdpError::Precondition(
            "prior training needs a frozen style function".into(),
        ));
    }
    cfg.validate()?;
    let (inputs, targets) = prior_examples(trajs, repr, cfg.l_p, cfg.stride)?;
    if inputs.is_empty() {
        return Err(DsdpError::Precondition(format!(
            "no trajectory has the {} steps a prior window needs",
            cfg.l_p.max(repr.l_c())
        )));
    }
    let mut rng = SimRng::seed_from_u64(seed);
    let mut prior = PriorNet::new(cfg, repr.codebook_size(), &mut rng)?;
    let mut adam = Adam::new(&prior.store, AdamConfig::with_lr(cfg.lr))?;
    let probe = inputs.len().min(2048);
    let mut log = PriorTrainLog {
        examples: inputs.len(),
        init_loss: prior.cross_entropy(&inputs[..probe], &targets[..probe])?,
        epoch_loss: Vec::with_capacity(cfg.epochs),
    };
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let xs: Vec<Vec<f64>> = chunk.iter().map(|&i| inputs[i].clone()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let x = stack_windows(&xs, cfg.l_p)?;
            let net = &prior.net;
            sum += train_step(&mut prior.store, &mut adam, |tape| {
                let xv = tape.input(x);
                let y = net.forward(tape, xv)?;
                Ok(tape.cross_entropy(y, &ys)?)
            })?;
            n += 1;
        }
        log.epoch_loss.push(sum / n as f64);
    }
    Ok((prior, log))
}

/// Source of the style index at the start of an episode.
#[derive(Clone, Debug)]
pub enum StylePrior {
    Learned(PriorNet),
    /// Every index equally likely (ablation).
    Uniform {
        codebook_size: usize,
    },
}

impl StylePrior {
    pub fn codebook_size(&self) -> usize {
        match self {
            StylePrior::Learned(p) => p.codebook_size(),
            StylePrior::Uniform { codebook_size } => *codebook_size,
        }
    }

    pub fn logits(&self, warmup: &[Step]) -> Result<Vec<f64>> {
        match self {
            StylePrior::Learned(p) => p.logits(warmup),
            StylePrior::Uniform { codebook_size } => Ok(vec![0.0; *codebook_size]),
        }
    }

    /// Index drawn from `softmax(logits / temperature)`; `temperature ≤ 1e-8` takes the argmax.
    pub fn sample_index(
        &self,
        warmup: &[Step],
        rng: &mut impl Rng,
        temperature: f64,
    ) -> Result<u32> {
        let logits = self.logits(warmup)?;
        if temperature <= 1e-8 {
            return Ok(argmax(&logits) as u32);
        }
        let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
        Ok(sample_categorical(&softmax(&scaled), rng) as u32)
    }

    /// Samples an index and maps it to the policy's unit-norm style vector.
    pub fn sample_style(
        &self,
        repr: &ReprFunction,
        warmup: &[Step],
        rng: &mut impl Rng,
        temperature: f64,
    ) -> Result<(StyleCode, Vec<f64>)> {
        if self.codebook_size() != repr.codebook_size() {
            return Err(DsdpError::Config(format!(
                "prior has {} classes but the style function has {} codes",
                self.codebook_size(),
                repr.codebook_size()
            )));
        }
        let idx = self.sample_index(warmup, rng, temperature)?;
        let code = StyleCode::from_index(idx, repr.code_bits())?;
        let c = repr.style_vector(&code)?;
        Ok((code, c))
    }
}
