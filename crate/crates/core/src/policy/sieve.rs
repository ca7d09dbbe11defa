use numkit::{gelu, sinusoidal_embedding, Linear, ParamStore, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DsdpError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SieveConfig {
    pub hidden: usize,
    /// Width of the re-injected timestep and action embeddings.
    pub embed: usize,
    /// Width of the sinusoidal timestep features.
    pub time_features: usize,
    /// Number of hidden layers.
    pub depth: usize,
}

impl Default for SieveConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            embed: 32,
            time_features: 32,
            depth: 3,
        }
    }
}

impl SieveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.embed == 0 || self.time_features < 2 || self.depth == 0 {
            return Err(DsdpError::Config(format!("invalid sieve config {self:?}")));
        }
        Ok(())
    }
}

/// Which inputs a [`Sieve`] embeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SieveInputs {
    pub obs: usize,
    /// Context vector width; 0 for none.
    pub context: usize,
    pub timestep: bool,
    /// Width of the action input re-injected at every layer; 0 for none.
    pub action: usize,
    pub out: usize,
}

/// MLP whose inputs are embedded separately; the timestep and action
/// embeddings are concatenated onto the input of every layer after the first.
#[derive(Clone, Debug)]
pub struct Sieve {
    config: SieveConfig,
    inputs: SieveInputs,
    obs_in: Linear,
    ctx_in: Option<Linear>,
    time_in: Option<Linear>,
    act_in: Option<Linear>,
    layers: Vec<Linear>,
    out: Linear,
}

impl Sieve {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: &SieveConfig,
        inputs: SieveInputs,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if inputs.obs == 0 || inputs.out == 0 {
            return Err(DsdpError::Config(
                "sieve needs observation and output widths".into(),
            ));
        }
        let h = config.hidden;
        let e = config.embed;
        let obs_in = Linear::new(store, &format!("{name}.obs"), inputs.obs, h, rng);
        let ctx_in = (inputs.context > 0)
            .then(|| Linear::new(store, &format!("{name}.ctx"), inputs.context, h, rng));
        let time_in = inputs
            .timestep
            .then(|| Linear::new(store, &format!("{name}.time"), config.time_features, e, rng));
        let act_in = (inputs.action > 0)
            .then(|| Linear::new(store, &format!("{name}.act"), inputs.action, e, rng));
        let skip = e * (time_in.is_some() as usize + act_in.is_some() as usize);
        let first = h * (1 + ctx_in.is_some() as usize) + skip;
        let mut layers = vec![Linear::new(store, &format!("{name}.h0"), first, h, rng)];
        for i in 1..config.depth {
            layers.push(Linear::new(
                store,
                &format!("{name}.h{i}"),
                h + skip,
                h,
                rng,
            ));
        }
        let out = Linear::new(store, &format!("{name}.out"), h + skip, inputs.out, rng);
        Ok(Self {
            config: *config,
            inputs,
            obs_in,
            ctx_in,
            time_in,
            act_in,
            layers,
            out,
        })
    }

    pub fn inputs(&self) -> SieveInputs {
        self.inputs
    }

    pub fn config(&self) -> &SieveConfig {
        &self.config
    }

    /// `obs [B, obs]`, `ctx [B, context]`, `t` of length B, `action [B, action]` → `[B, out]`.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        obs: Var,
        ctx: Option<Var>,
        t: Option<&[usize]>,
        action: Option<Var>,
    ) -> Result<Var> {
        let mut base = vec![self.obs_in.forward(tape, obs)?];
        base[0] = tape.gelu(base[0])?;
        match (&self.ctx_in, ctx) {
            (Some(l), Some(c)) => {
                let c = l.forward(tape, c)?;
                base.push(tape.gelu(c)?);
            }
            (None, None) => {}
            _ => {
                return Err(DsdpError::Precondition(
                    "context input does not match the sieve layout".into(),
                ))
            }
        }
        let mut skip = Vec::new();
        match (&self.time_in, t) {
            (Some(l), Some(t)) => {
                let pos: Vec<f64> = t.iter().map(|&t| t as f64).collect();
                let feats = tape.input(sinusoidal_embedding(&pos, self.config.time_features));
                let te = l.forward(tape, feats)?;
                skip.push(tape.gelu(te)?);
            }
            (None, None) => {}
            _ => {
                return Err(DsdpError::Precondition(
                    "timestep input does not match the sieve layout".into(),
                ))
            }
        }
        match (&self.act_in, action) {
            (Some(l), Some(a)) => {
                let ae = l.forward(tape, a)?;
                skip.push(tape.gelu(ae)?);
            }
            (None, None) => {}
            _ => {
                return Err(DsdpError::Precondition(
                    "action input does not match the sieve layout".into(),
                ))
            }
        }
        base.extend_from_slice(&skip);
        let mut x = if base.len() == 1 {
            base[0]
        } else {
            tape.concat_cols(&base)?
        };
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 && !skip.is_empty() {
                let mut parts = vec![x];
                parts.extend_from_slice(&skip);
                x = tape.concat_cols(&parts)?;
            }
            x = layer.forward(tape, x)?;
            x = tape.gelu(x)?;
        }
        if !skip.is_empty() {
            let mut parts = vec![x];
            parts.extend_from_slice(&skip);
            x = tape.concat_cols(&parts)?;
        }
        Ok(self.out.forward(tape, x)?)
    }
}

/// `y += x·W` for a row vector `x` and row-major `W`.
fn add_vec_mat(x: &[f64], w: &[f64], y: &mut [f64]) {
    let n = y.len();
    for (xi, row) in x.iter().zip(w.chunks_exact(n)) {
        for (yj, wij) in y.iter_mut().zip(row) {
            *yj += xi * wij;
        }
    }
}

fn affine(store: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
    let mut y = store.value(l.bias).data().to_vec();
    add_vec_mat(x, store.value(l.weight).data(), &mut y);
    y
}

/// A sieve evaluated repeatedly at one observation and context, with the
/// terms that do not depend on the timestep or action computed once. Plain
/// loops, no tape; agrees with [`Sieve::forward`] to rounding.
pub struct FixedSieve<'a> {
    sieve: &'a Sieve,
    store: &'a ParamStore,
    /// First-layer pre-activation from the observation and context.
    base: Vec<f64>,
    time_cache: Vec<Option<Vec<f64>>>,
}

impl Sieve {
    pub fn fix<'a>(
        &'a self,
        store: &'a ParamStore,
        obs: &[f64],
        ctx: Option<&[f64]>,
    ) -> Result<FixedSieve<'a>> {
        if obs.len() != self.inputs.obs || ctx.map_or(0, <[f64]>::len) != self.inputs.context {
            return Err(DsdpError::Precondition(
                "fixed sieve inputs do not match the layout".into(),
            ));
        }
        let h = self.config.hidden;
        let w0 = store.value(self.layers[0].weight).data();
        let mut base = store.value(self.layers[0].bias).data().to_vec();
        let oe: Vec<f64> = affine(store, &self.obs_in, obs)
            .into_iter()
            .map(gelu)
            .collect();
        add_vec_mat(&oe, &w0[..h * h], &mut base);
        if let (Some(l), Some(c)) = (&self.ctx_in, ctx) {
            let ce: Vec<f64> = affine(store, l, c).into_iter().map(gelu).collect();
            add_vec_mat(&ce, &w0[h * h..2 * h * h], &mut base);
        }
        Ok(FixedSieve {
            sieve: self,
            store,
            base,
            time_cache: Vec::new(),
        })
    }
}

impl FixedSieve<'_> {
    fn time_embedding(&mut self, t: usize) -> Vec<f64> {
        if self.time_cache.len() <= t {
            self.time_cache.resize(t + 1, None);
        }
        if self.time_cache[t].is_none() {
            let s = self.sieve;
            let l = s.time_in.as_ref().expect("timestep input");
            let feats = sinusoidal_embedding(&[t as f64], s.config.time_features);
            self.time_cache[t] = Some(
                affine(self.store, l, feats.data())
                    .into_iter()
                    .map(gelu)
                    .collect(),
            );
        }
        self.time_cache[t].clone().expect("cached")
    }

    /// Outputs for each row of `action` (width `inputs.action`) at step `t`.
    pub fn eval(&mut self, action: &[f64], t: usize) -> Result<Vec<f64>> {
        self.eval_at(action, Some(t))
    }

    /// As [`FixedSieve::eval`]; `t` is `None` exactly when the sieve has no timestep input.
    pub fn eval_at(&mut self, action: &[f64], t: Option<usize>) -> Result<Vec<f64>> {
        let s = self.sieve;
        let aw = s.inputs.action;
        if aw == 0 || action.len() % aw != 0 {
            return Err(DsdpError::Precondition(
                "fixed sieve needs whole action rows".into(),
            ));
        }
        let te = match (&s.time_in, t) {
            (Some(_), Some(t)) => self.time_embedding(t),
            (None, None) => Vec::new(),
            _ => {
                return Err(DsdpError::Precondition(
                    "timestep input does not match the sieve layout".into(),
                ))
            }
        };
        let (h, base_w) = (
            s.config.hidden,
            s.config.hidden * (1 + s.ctx_in.is_some() as usize),
        );
        let store = self.store;
        let mut out = Vec::with_capacity(action.len() / aw * s.inputs.out);
        for a in action.chunks(aw) {
            let ae: Vec<f64> = affine(store, s.act_in.as_ref().expect("action input"), a)
                .into_iter()
                .map(gelu)
                .collect();
            let mut skip = te.clone();
            skip.extend_from_slice(&ae);
            let w0 = store.value(s.layers[0].weight).data();
            let mut x = self.base.clone();
            add_vec_mat(&skip, &w0[base_w * h..], &mut x);
            x.iter_mut().for_each(|v| *v = gelu(*v));
            for layer in s.layers.iter().skip(1).chain(std::iter::once(&s.out)) {
                let mut y = store.value(layer.bias).data().to_vec();
                let w = store.value(layer.weight).data();
                add_vec_mat(&x, &w[..h * y.len()], &mut y);
                add_vec_mat(&skip, &w[h * y.len()..], &mut y);
                x = y;
                if !std::ptr::eq(layer, &s.out) {
                    x.iter_mut().for_each(|v| *v = gelu(*v));
                }
            }
            out.extend_from_slice(&x);
        }
        Ok(out)
    }
}
