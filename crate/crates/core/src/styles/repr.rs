use numkit::{
    Activation, Adam, AdamConfig, Checkpoint, Linear, Mlp, ParamStore, Sequential, Tape, Tensor,
    Var,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::{
    entropy_penalty_tape, info_nce_tape, lfq_quantize, triplet_tape, ContrastiveConfig,
    ContrastiveLoss, StyleCode,
};
use crate::datasets::{sample_subtrajectory_pair, stack_windows, Trajectory, STEP_CHANNELS};
use crate::error::{DsdpError, Result};
use crate::nn::{conv_encoder, header, meta_as, train_step};
use crate::seeding::SimRng;

pub const STYLE_KIND: &str = "style";

/// Encoder, sign quantizer and decoder mapping an `L_c` window to a style.
#[derive(Clone, Debug)]
pub struct ReprFunction {
    config: ContrastiveConfig,
    store: ParamStore,
    encoder: Sequential,
    decoder: Mlp,
    action_head: Option<Linear>,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct StyleMeta {
    config: ContrastiveConfig,
    codebook_size: usize,
    l_c: usize,
    frozen: bool,
}

impl ReprFunction {
    pub fn new(config: &ContrastiveConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = conv_encoder(
            &mut store,
            "enc",
            STEP_CHANNELS,
            config.channels,
            config.l_c,
            None,
            config.code_bits(),
            rng,
        );
        let decoder = Mlp::new(
            &mut store,
            "dec",
            &[config.code_bits(), config.decoder_hidden, config.style_dim],
            Activation::Gelu,
            rng,
        );
        let action_head = (config.action_loss_weight > 0.0)
            .then(|| Linear::new(&mut store, "act_head", config.style_dim, config.l_c, rng));
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            decoder,
            action_head,
            frozen: false,
        })
    }

    /// The initialization used by [`train_contrastive`] for `seed`.
    pub fn init(config: &ContrastiveConfig, seed: u64) -> Result<Self> {
        Self::new(config, &mut SimRng::seed_from_u64(seed))
    }

    pub fn config(&self) -> &ContrastiveConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Mutable parameters; refused once frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamStore> {
        if self.frozen {
            return Err(DsdpError::Precondition("style function is frozen".into()));
        }
        Ok(&mut self.store)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn code_bits(&self) -> usize {
        self.config.code_bits()
    }

    pub fn codebook_size(&self) -> usize {
        self.config.codebook_size
    }

    pub fn l_c(&self) -> usize {
        self.config.l_c
    }

    pub fn style_dim(&self) -> usize {
        self.config.style_dim
    }

    fn latents(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        Ok(self.encoder.forward(tape, x)?)
    }

    /// Pre-quantization latents `z`, one row per window.
    pub fn latents_of(&self, windows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let x = stack_windows(windows, self.config.l_c)?;
        let mut tape = Tape::new(&self.store);
        let xv = tape.input(x);
        let z = self.latents(&mut tape, xv)?;
        let z = tape.value(z);
        Ok((0..z.rows()).map(|r| z.row(r).to_vec()).collect())
    }

    pub fn codes(&self, windows: &[Vec<f64>]) -> Result<Vec<StyleCode>> {
        Ok(self
            .latents_of(windows)?
            .iter()
            .map(|z| lfq_quantize(z))
            .collect())
    }

    /// Style vectors `[N, style_dim]` for a batch of codes.
    pub fn decode_batch(&self, codes: &[StyleCode]) -> Result<Tensor> {
        let d = self.code_bits();
        if codes.iter().any(|c| c.bits.len() != d) {
            return Err(DsdpError::Precondition(format!("codes must have {d} bits")));
        }
        let data: Vec<f64> = codes.iter().flat_map(StyleCode::as_f64).collect();
        let mut tape = Tape::new(&self.store);
        let q = tape.input(Tensor::new(vec![codes.len(), d], data)?);
        let c = self.decoder.forward(&mut tape, q)?;
        Ok(tape.value(c).clone())
    }

    pub fn decode(&self, code: &StyleCode) -> Result<Vec<f64>> {
        Ok(self.decode_batch(std::slice::from_ref(code))?.into_data())
    }

    /// Unit-norm decoded style, the policy's conditioning input. The
    /// contrastive objective only constrains direction, so the raw norm
    /// carries no style information.
    pub fn style_vector(&self, code: &StyleCode) -> Result<Vec<f64>> {
        let mut c = self.decode(code)?;
        let n = c.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        c.iter_mut().for_each(|x| *x /= n);
        Ok(c)
    }

    /// Start of the `L_c` window used as the style source at step `t`: the
    /// window starting at `t`, or the last full window near the end.
    pub fn style_window_start(&self, len: usize, t: usize) -> Option<usize> {
        (len >= self.config.l_c).then(|| t.min(len - self.config.l_c))
    }

    /// Codes of the style windows for every step of `traj`.
    pub fn step_codes(&self, traj: &Trajectory) -> Result<Vec<StyleCode>> {
        let l = self.config.l_c;
        if traj.len() < l {
            return Err(DsdpError::Precondition(format!(
                "trajectory shorter than L_c = {l}"
            )));
        }
        let starts = traj.len() - l + 1;
        let windows = (0..starts)
            .map(|s| traj.window_values(s, l))
            .collect::<Result<Vec<_>>>()?;
        let codes = self.codes(&windows)?;
        Ok((0..traj.len())
            .map(|t| codes[t.min(starts - 1)].clone())
            .collect())
    }

    pub fn to_checkpoint(&self, fingerprint: &str, seed: u64) -> Result<Checkpoint> {
        let meta = StyleMeta {
            config: self.config.clone(),
            codebook_size: self.config.codebook_size,
            l_c: self.config.l_c,
            frozen: self.frozen,
        };
        Ok(
            Checkpoint::new(header(STYLE_KIND, fingerprint, seed, &meta)?)
                .with_group("repr", &self.store),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.kind != STYLE_KIND {
            return Err(DsdpError::Config(format!(
                "expected a {STYLE_KIND} checkpoint, got {}",
                ck.header.kind
            )));
        }
        let meta: StyleMeta = meta_as(&ck.header)?;
        let mut r = Self::init(&meta.config, 0)?;
        ck.restore_group("repr", &mut r.store)?;
        r.frozen = meta.frozen;
        Ok(r)
    }
}

/// `target ← decay·target + (1 − decay)·online`, parameter-wise.
pub fn ema_update(target: &mut ReprFunction, online: &ReprFunction, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(DsdpError::Precondition(format!(
            "EMA decay must be in [0, 1], got {decay}"
        )));
    }
    Ok(target.params_mut()?.ema_from(&online.store, decay)?)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveLog {
    /// Mean training loss per pass.
    pub pass_loss: Vec<f64>,
    pub steps: usize,
    /// Trajectories too short for a pair, skipped.
    pub skipped: usize,
}

fn style_tape(tape: &mut Tape<'_>, enc: &Sequential, dec: &Mlp, x: Var) -> Result<(Var, Var)> {
    let z = enc.forward(tape, x)?;
    let q = tape.sign_ste(z)?;
    Ok((z, dec.forward(tape, q)?))
}

/// Styles of `x` under the parameters in `store` (which must share the layout of `r`).
fn styles_with(store: &ParamStore, r: &ReprFunction, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new(store);
    let xv = tape.input(x.clone());
    let (_, c) = style_tape(&mut tape, &r.encoder, &r.decoder, xv)?;
    Ok(tape.value(c).clone())
}

/// Trains the style function and returns it frozen.
///
/// Each pass shuffles the trajectories and draws one disjoint window pair
/// per trajectory. Anchors go through the online network, positives and
/// in-batch negatives through the moving-average target network. The sign
/// quantizer passes gradients straight through.
pub fn train_contrastive(
    trajs: &[Trajectory],
    cfg: &ContrastiveConfig,
    seed: u64,
) -> Result<(ReprFunction, ContrastiveLog)> {
    cfg.validate()?;
    let eligible: Vec<&Trajectory> = trajs.iter().filter(|t| t.len() >= 2 * cfg.l_c).collect();
    if eligible.len() < 2 {
        return Err(DsdpError::Precondition(format!(
            "contrastive training needs at least 2 trajectories of length >= {}, got {}",
            2 * cfg.l_c,
            eligible.len()
        )));
    }
    let mut online = ReprFunction::init(cfg, seed)?;
    let mut target = online.store.clone();
    let mut adam = Adam::new(&online.store, AdamConfig::with_lr(cfg.lr))?;
    let mut rng = SimRng::seed_from_u64(seed ^ 0x5eed_c0de);
    let mut log = ContrastiveLog {
        skipped: trajs.len() - eligible.len(),
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..eligible.len()).collect();
    for _ in 0..cfg.passes {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            if chunk.len() < 2 {
                continue;
            }
            let mut xs = Vec::with_capacity(chunk.len());
            let mut ys = Vec::with_capacity(chunk.len());
            let mut acts = Vec::with_capacity(chunk.len() * cfg.l_c);
            for &i in chunk {
                let t = eligible[i];
                let (x, y) = sample_subtrajectory_pair(t.len(), cfg.l_c, &mut rng)?;
                xs.push(t.window_values(x, cfg.l_c)?);
                ys.push(t.window_values(y, cfg.l_c)?);
                acts.extend(t.steps[x..x + cfg.l_c].iter().map(|s| s.action.0));
            }
            let xa = stack_windows(&xs, cfg.l_c)?;
            let c_plus = styles_with(&target, &online, &stack_windows(&ys, cfg.l_c)?)?;
            let negatives = match cfg.loss {
                ContrastiveLoss::Triplet { .. } => {
                    let n = chunk.len();
                    let d = c_plus.cols();
                    let mut data = Vec::with_capacity(n * d);
                    for i in 0..n {
                        let j = (i + rng.random_range(1..n)) % n;
                        data.extend_from_slice(c_plus.row(j));
                    }
                    Some(Tensor::new(vec![n, d], data)?)
                }
                ContrastiveLoss::InfoNce => None,
            };
            let act_target = Tensor::new(vec![chunk.len(), cfg.l_c], acts)?;
            let (enc, dec, head) = (&online.encoder, &online.decoder, &online.action_head);
            let loss = train_step(&mut online.store, &mut adam, |tape| {
                let x = tape.input(xa);
                let (z, c) = style_tape(tape, enc, dec, x)?;
                let main = match (&cfg.loss, &negatives) {
                    (ContrastiveLoss::Triplet { margin }, Some(neg)) => {
                        triplet_tape(tape, c, &c_plus, neg, *margin)?
                    }
                    _ => info_nce_tape(tape, c, &c_plus, cfg.tau)?,
                };
                let ent = entropy_penalty_tape(tape, z)?;
                let ent = tape.scale(ent, cfg.lambda_e)?;
                let mut total = tape.add(main, ent)?;
                if let Some(h) = head {
                    let pred = h.forward(tape, c)?;
                    let tgt = tape.input(act_target);
                    let d = tape.sub(pred, tgt)?;
                    let d = tape.square(d)?;
                    let mse = tape.mean_all(d)?;
                    let mse = tape.scale(mse, cfg.action_loss_weight)?;
                    total = tape.add(total, mse)?;
                }
                Ok(total)
            })?;
            target.ema_from(&online.store, cfg.ema_decay)?;
            sum += loss;
            count += 1;
            log.steps += 1;
        }
        log.pass_loss.push(if count > 0 {
            sum / count as f64
        } else {
            f64::NAN
        });
    }
    online.freeze();
    Ok((online, log))
}

/// Mean InfoNCE of `repr` on fresh window pairs from `trajs` (both sides through `repr`).
pub fn info_nce_eval(
    repr: &ReprFunction,
    trajs: &[Trajectory],
    batch: usize,
    seed: u64,
) -> Result<f64> {
    let l = repr.l_c();
    let eligible: Vec<&Trajectory> = trajs.iter().filter(|t| t.len() >= 2 * l).collect();
    let mut rng = SimRng::seed_from_u64(seed);
    let (mut sum, mut n) = (0.0, 0usize);
    for chunk in eligible.chunks(batch.max(2)) {
        if chunk.len() < 2 {
            continue;
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for t in chunk {
            let (x, y) = sample_subtrajectory_pair(t.len(), l, &mut rng)?;
            xs.push(t.window_values(x, l)?);
            ys.push(t.window_values(y, l)?);
        }
        let a = styles_with(&repr.store, repr, &stack_windows(&xs, l)?)?;
        let p = styles_with(&repr.store, repr, &stack_windows(&ys, l)?)?;
        let rows = |t: &Tensor| (0..t.rows()).map(|r| t.row(r).to_vec()).collect::<Vec<_>>();
        sum += super::info_nce_loss(&rows(&a), &rows(&p), repr.config.tau)?;
        n += 1;
    }
    if n == 0 {
        return Err(DsdpError::Precondition(
            "no evaluation batch with two eligible trajectories".into(),
        ));
    }
    Ok(sum / n as f64)
}
