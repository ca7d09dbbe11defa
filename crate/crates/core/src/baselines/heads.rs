//! Single-pass action heads on the sieve trunk.

use numkit::{ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::fit::{fit, Part};
use crate::cluster::{kmeans, nearest};
use crate::datasets::OBS_DIM;
use crate::error::{DsdpError, Result};
use crate::nn::{argmax, sample_categorical, softmax};
use crate::policy::{DiffusionData, PolicyConfig, PolicyTrainLog, Sieve, SieveConfig, SieveInputs};
use crate::seeding::{derive_seed, SimRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HeadKind {
    /// Point regression.
    Mse,
    /// Classification over `bins` equal-width bins of `[0, 1]`.
    Discretized { bins: usize },
    /// Mean and log standard deviation.
    Gaussian,
    /// Classification over `k` action centroids.
    KMeans { k: usize },
    /// Centroid classification plus a per-class residual.
    KMeansResidual { k: usize },
}

impl HeadKind {
    pub fn out_width(self) -> usize {
        match self {
            HeadKind::Mse => 1,
            HeadKind::Gaussian => 2,
            HeadKind::Discretized { bins } => bins,
            HeadKind::KMeans { k } => k,
            HeadKind::KMeansResidual { k } => 2 * k,
        }
    }

    fn classes(self) -> usize {
        match self {
            HeadKind::Discretized { bins } => bins,
            HeadKind::KMeans { k } | HeadKind::KMeansResidual { k } => k,
            HeadKind::Mse | HeadKind::Gaussian => 0,
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            HeadKind::Discretized { bins: 0 }
            | HeadKind::KMeans { k: 0 }
            | HeadKind::KMeansResidual { k: 0 } => Err(DsdpError::Config(format!(
                "{self:?} needs at least one class"
            ))),
            _ => Ok(()),
        }
    }
}

/// Bin of `a ∈ [0, 1]`; `a = 1` falls in the last bin.
pub fn discretize(a: f64, bins: usize) -> usize {
    ((a.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

pub fn bin_center(class: usize, bins: usize) -> f64 {
    (class as f64 + 0.5) / bins as f64
}

/// Smallest allowed standard deviation of the Gaussian head.
const MIN_SIGMA: f64 = 1e-6;

/// Samples an action in `[0, 1]` from one row of head outputs.
pub fn head_action(kind: HeadKind, out: &[f64], centers: &[f64], rng: &mut impl Rng) -> f64 {
    let a = match kind {
        HeadKind::Mse => out[0],
        HeadKind::Gaussian => {
            let sigma = out[1].exp().clamp(MIN_SIGMA, 1.0);
            out[0] + sigma * rng.sample::<f64, _>(StandardNormal)
        }
        HeadKind::Discretized { bins } => bin_center(sample_categorical(&softmax(out), rng), bins),
        HeadKind::KMeans { k } => centers[sample_categorical(&softmax(&out[..k]), rng)],
        HeadKind::KMeansResidual { k } => {
            let c = sample_categorical(&softmax(&out[..k]), rng);
            centers[c] + out[k + c]
        }
    };
    a.clamp(0.0, 1.0)
}

/// Most likely action: the mean, or the centre (plus residual) of the top class.
pub fn head_point(kind: HeadKind, out: &[f64], centers: &[f64]) -> f64 {
    let a = match kind {
        HeadKind::Mse | HeadKind::Gaussian => out[0],
        HeadKind::Discretized { bins } => bin_center(argmax(out), bins),
        HeadKind::KMeans { k } => centers[argmax(&out[..k])],
        HeadKind::KMeansResidual { k } => {
            let c = argmax(&out[..k]);
            centers[c] + out[k + c]
        }
    };
    a.clamp(0.0, 1.0)
}

#[derive(Clone, Debug)]
pub struct HeadModel {
    pub(crate) kind: HeadKind,
    pub(crate) store: ParamStore,
    pub(crate) sieve: Sieve,
    /// Sorted action centroids for the k-means heads, empty otherwise.
    pub(crate) centers: Vec<f64>,
}

pub(crate) fn head_inputs(kind: HeadKind) -> SieveInputs {
    SieveInputs {
        obs: OBS_DIM,
        context: 0,
        timestep: false,
        action: 0,
        out: kind.out_width(),
    }
}

impl HeadModel {
    pub fn new(
        kind: HeadKind,
        sieve: &SieveConfig,
        centers: Vec<f64>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        kind.validate()?;
        if matches!(
            kind,
            HeadKind::KMeans { .. } | HeadKind::KMeansResidual { .. }
        ) && centers.len() != kind.classes()
        {
            return Err(DsdpError::Config(format!(
                "{kind:?} needs {} centres, got {}",
                kind.classes(),
                centers.len()
            )));
        }
        let mut store = ParamStore::default();
        let sieve = Sieve::new(&mut store, "head", sieve, head_inputs(kind), rng)?;
        Ok(Self {
            kind,
            store,
            sieve,
            centers,
        })
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Raw head outputs, one row per observation.
    pub fn outputs(&self, obs: &[[f64; OBS_DIM]]) -> Result<Vec<Vec<f64>>> {
        if obs.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new(&self.store);
        let o = tape.input(obs_tensor(obs)?);
        let y = self.sieve.forward(&mut tape, o, None, None, None)?;
        let y = tape.value(y);
        Ok((0..y.rows()).map(|r| y.row(r).to_vec()).collect())
    }

    pub fn point_estimates(&self, obs: &[[f64; OBS_DIM]]) -> Result<Vec<f64>> {
        Ok(self
            .outputs(obs)?
            .iter()
            .map(|o| head_point(self.kind, o, &self.centers))
            .collect())
    }

    pub fn sample(&self, obs: &[f64; OBS_DIM], rng: &mut impl Rng) -> Result<f64> {
        let out = self.outputs(std::slice::from_ref(obs))?;
        Ok(head_action(self.kind, &out[0], &self.centers, rng))
    }

    fn loss(&self, tape: &mut Tape<'_>, data: &DiffusionData, rows: &[usize]) -> Result<Var> {
        let obs: Vec<[f64; OBS_DIM]> = rows.iter().map(|&i| data.obs[i]).collect();
        let a: Vec<f64> = rows.iter().map(|&i| data.actions[i]).collect();
        let o = tape.input(obs_tensor(&obs)?);
        let y = self.sieve.forward(tape, o, None, None, None)?;
        let target = |tape: &mut Tape<'_>| -> Result<Var> {
            Ok(tape.input(Tensor::new(vec![a.len(), 1], a.clone())?))
        };
        match self.kind {
            HeadKind::Mse => {
                let t = target(tape)?;
                let d = tape.sub(y, t)?;
                let sq = tape.square(d)?;
                Ok(tape.mean_all(sq)?)
            }
            HeadKind::Gaussian => {
                // 0.5·((a − μ)/σ)² + log σ, constant dropped.
                let t = target(tape)?;
                let mu = tape.slice_cols(y, 0, 1)?;
                let log_sigma = tape.slice_cols(y, 1, 2)?;
                let d = tape.sub(t, mu)?;
                let neg = tape.scale(log_sigma, -1.0)?;
                let inv = tape.exp(neg)?;
                let z = tape.mul(d, inv)?;
                let z2 = tape.square(z)?;
                let half = tape.scale(z2, 0.5)?;
                let nll = tape.add(half, log_sigma)?;
                Ok(tape.mean_all(nll)?)
            }
            HeadKind::Discretized { bins } => {
                let classes: Vec<usize> = a.iter().map(|&a| discretize(a, bins)).collect();
                Ok(tape.cross_entropy(y, &classes)?)
            }
            HeadKind::KMeans { .. } => {
                let classes = self.nearest_classes(&a);
                Ok(tape.cross_entropy(y, &classes)?)
            }
            HeadKind::KMeansResidual { k } => {
                let classes = self.nearest_classes(&a);
                let logits = tape.slice_cols(y, 0, k)?;
                let ce = tape.cross_entropy(logits, &classes)?;
                let res = tape.slice_cols(y, k, 2 * k)?;
                let mut mask = vec![0.0; a.len() * k];
                for (r, &c) in classes.iter().enumerate() {
                    mask[r * k + c] = 1.0;
                }
                let mask = tape.input(Tensor::new(vec![a.len(), k], mask)?);
                let picked = tape.mul(res, mask)?;
                let picked = tape.sum_cols(picked)?;
                // Residual target is the offset from the true class centre.
                let offsets: Vec<f64> = a
                    .iter()
                    .zip(&classes)
                    .map(|(a, &c)| a - self.centers[c])
                    .collect();
                let off = tape.input(Tensor::new(vec![a.len(), 1], offsets)?);
                let d = tape.sub(picked, off)?;
                let sq = tape.square(d)?;
                let mse = tape.mean_all(sq)?;
                Ok(tape.add(ce, mse)?)
            }
        }
    }

    fn nearest_classes(&self, a: &[f64]) -> Vec<usize> {
        let centers: Vec<Vec<f64>> = self.centers.iter().map(|&c| vec![c]).collect();
        a.iter().map(|&a| nearest(&centers, &[a])).collect()
    }
}

pub(crate) fn obs_tensor(obs: &[[f64; OBS_DIM]]) -> Result<Tensor> {
    Ok(Tensor::new(
        vec![obs.len(), OBS_DIM],
        obs.iter().flatten().copied().collect(),
    )?)
}

/// Sorted 1-d k-means centroids of the training actions.
pub fn action_centers(actions: &[f64], k: usize, seed: u64) -> Result<Vec<f64>> {
    let points: Vec<Vec<f64>> = actions.iter().map(|&a| vec![a]).collect();
    let km = kmeans(&points, k, 100, &mut SimRng::seed_from_u64(seed))?;
    let mut c: Vec<f64> = km.centers.into_iter().map(|c| c[0]).collect();
    c.sort_by(f64::total_cmp);
    Ok(c)
}

pub fn train_head(
    kind: HeadKind,
    train: &DiffusionData,
    val: &DiffusionData,
    cfg: &PolicyConfig,
    seed: u64,
) -> Result<(HeadModel, PolicyTrainLog)> {
    kind.validate()?;
    let centers = match kind {
        HeadKind::KMeans { k } | HeadKind::KMeansResidual { k } => {
            action_centers(&train.actions, k, derive_seed(seed, "kmeans"))?
        }
        _ => Vec::new(),
    };
    let mut model = HeadModel::new(
        kind,
        &cfg.sieve,
        centers,
        &mut SimRng::seed_from_u64(derive_seed(seed, "init")),
    )?;
    let mut store = std::mem::take(&mut model.store);
    let log = fit(
        &mut store,
        train.len(),
        val.len(),
        cfg,
        seed,
        |tape, part, rows, _| model.loss(tape, if part == Part::Train { train } else { val }, rows),
    )?;
    model.store = store;
    Ok((model, log))
}
