//! Comparison policies behind the common [`Policy`] interface: diffusion
//! without style, single-pass heads on the sieve trunk, an energy-based
//! policy and two IDM variants.

mod ebm;
mod fit;
mod heads;
mod idm;

pub use ebm::{derivative_free_sample, train_ebm, EbmConfig, EbmModel};
pub use heads::{
    action_centers, bin_center, discretize, head_action, head_point, train_head, HeadKind,
    HeadModel,
};
pub use idm::{
    fit_idm_driver, fit_idm_learned, idm_frames, idm_mse, IdmFitConfig, IdmFitReport,
    IdmFixedPolicy, IdmFrame, IdmLearnedPolicy, IdmParamDistribution, IdmStyle, IdmStyleTable,
    IDM_FREE_PARAMS,
};

use std::fmt;
use std::str::FromStr;

use numkit::{Checkpoint, ParamStore};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::datasets::{NormStats, Step, Trajectory};
use crate::error::{DsdpError, Result};
use crate::nn::{header, meta_as};
use crate::policy::{
    train_diffusion, unconditioned_data, validation_split, warmup_conditioned_data, Conditioning,
    ContextSource, DiffusionNet, DiffusionPolicy, Episode, Policy, PolicyConfig, PolicyTrainLog,
    SamplerKind, Sieve, SieveConfig, StepContext,
};
use crate::seeding::{derive_seed, SimRng};

pub const BASELINE_KIND: &str = "baseline";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Diffusion conditioned on an encoding of the warm-up window.
    DiffusionBc,
    UncondDiffusionBc,
    Mse,
    Discretized,
    Gaussian,
    KMeans,
    KMeansResidual,
    Ebm,
    IdmFixed,
    IdmLearned,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 10] = [
        BaselineKind::DiffusionBc,
        BaselineKind::UncondDiffusionBc,
        BaselineKind::Mse,
        BaselineKind::Discretized,
        BaselineKind::Gaussian,
        BaselineKind::KMeans,
        BaselineKind::KMeansResidual,
        BaselineKind::Ebm,
        BaselineKind::IdmFixed,
        BaselineKind::IdmLearned,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::DiffusionBc => "diffusion_bc",
            BaselineKind::UncondDiffusionBc => "uncond_diffusion_bc",
            BaselineKind::Mse => "mse",
            BaselineKind::Discretized => "discretized",
            BaselineKind::Gaussian => "gaussian",
            BaselineKind::KMeans => "k_means",
            BaselineKind::KMeansResidual => "k_means_residual",
            BaselineKind::Ebm => "ebm",
            BaselineKind::IdmFixed => "idm_fixed",
            BaselineKind::IdmLearned => "idm_learned",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = DsdpError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
                DsdpError::Config(format!(
                    "unknown baseline '{s}'; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

/// Warm-up encoder of the conditioned diffusion baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarmupEncoderConfig {
    pub l_p: usize,
    pub channels: usize,
    pub dim: usize,
}

impl Default for WarmupEncoderConfig {
    fn default() -> Self {
        Self {
            l_p: crate::datasets::DEFAULT_LP,
            channels: 16,
            dim: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    /// Trunk and optimiser settings, shared with the style-conditioned policy.
    pub policy: PolicyConfig,
    pub warmup: WarmupEncoderConfig,
    pub bins: usize,
    pub k: usize,
    pub ebm: EbmConfig,
    pub idm: IdmFitConfig,
    pub idm_styles: IdmStyleTable,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            policy: PolicyConfig::default(),
            warmup: WarmupEncoderConfig::default(),
            bins: 20,
            k: 20,
            ebm: EbmConfig::default(),
            idm: IdmFitConfig::default(),
            idm_styles: IdmStyleTable::bundled(),
        }
    }
}

impl BaselineConfig {
    pub fn head(&self, kind: BaselineKind) -> Option<HeadKind> {
        match kind {
            BaselineKind::Mse => Some(HeadKind::Mse),
            BaselineKind::Discretized => Some(HeadKind::Discretized { bins: self.bins }),
            BaselineKind::Gaussian => Some(HeadKind::Gaussian),
            BaselineKind::KMeans => Some(HeadKind::KMeans { k: self.k }),
            BaselineKind::KMeansResidual => Some(HeadKind::KMeansResidual { k: self.k }),
            _ => None,
        }
    }
}

/// A trained baseline of exactly one kind.
#[derive(Clone, Debug)]
pub enum Baseline {
    Diffusion {
        kind: BaselineKind,
        net: DiffusionNet,
    },
    Head(HeadModel),
    Ebm(EbmModel),
    IdmFixed(IdmStyleTable),
    IdmLearned(IdmParamDistribution),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineLog {
    /// Neural baselines only.
    pub train: Option<PolicyTrainLog>,
    pub idm: Option<IdmFitReport>,
}

#[derive(Serialize, Deserialize)]
struct HeadMeta {
    baseline: BaselineKind,
    head: HeadKind,
    sieve: SieveConfig,
    centers: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct EbmMeta {
    baseline: BaselineKind,
    ebm: EbmConfig,
    sieve: SieveConfig,
}

#[derive(Serialize, Deserialize)]
struct IdmFixedMeta {
    baseline: BaselineKind,
    styles: IdmStyleTable,
}

#[derive(Serialize, Deserialize)]
struct IdmLearnedMeta {
    baseline: BaselineKind,
    distribution: IdmParamDistribution,
}

const PARAM_GROUP: &str = "baseline";

fn restored(ck: &Checkpoint, mut store: ParamStore) -> Result<ParamStore> {
    ck.restore_group(PARAM_GROUP, &mut store)?;
    Ok(store)
}

impl Baseline {
    pub fn kind(&self) -> BaselineKind {
        match self {
            Baseline::Diffusion { kind, .. } => *kind,
            Baseline::Head(h) => match h.kind() {
                HeadKind::Mse => BaselineKind::Mse,
                HeadKind::Discretized { .. } => BaselineKind::Discretized,
                HeadKind::Gaussian => BaselineKind::Gaussian,
                HeadKind::KMeans { .. } => BaselineKind::KMeans,
                HeadKind::KMeansResidual { .. } => BaselineKind::KMeansResidual,
            },
            Baseline::Ebm(_) => BaselineKind::Ebm,
            Baseline::IdmFixed(_) => BaselineKind::IdmFixed,
            Baseline::IdmLearned(_) => BaselineKind::IdmLearned,
        }
    }

    /// Checkpoint tagged with the kind under the `baseline` meta key.
    pub fn to_checkpoint(&self, fingerprint: &str, seed: u64) -> Result<Checkpoint> {
        let kind = self.kind();
        Ok(match self {
            Baseline::Diffusion { net, .. } => {
                let mut ck = net.to_checkpoint(BASELINE_KIND, fingerprint, seed, &kind)?;
                ck.header
                    .meta
                    .insert("baseline".into(), serde_json::to_value(kind)?);
                ck
            }
            Baseline::Head(h) => {
                let meta = HeadMeta {
                    baseline: kind,
                    head: h.kind,
                    sieve: *h.sieve.config(),
                    centers: h.centers.clone(),
                };
                Checkpoint::new(header(BASELINE_KIND, fingerprint, seed, &meta)?)
                    .with_group(PARAM_GROUP, &h.store)
            }
            Baseline::Ebm(e) => {
                let meta = EbmMeta {
                    baseline: kind,
                    ebm: e.config,
                    sieve: *e.sieve.config(),
                };
                Checkpoint::new(header(BASELINE_KIND, fingerprint, seed, &meta)?)
                    .with_group(PARAM_GROUP, &e.store)
            }
            Baseline::IdmFixed(t) => Checkpoint::new(header(
                BASELINE_KIND,
                fingerprint,
                seed,
                &IdmFixedMeta {
                    baseline: kind,
                    styles: t.clone(),
                },
            )?),
            Baseline::IdmLearned(d) => Checkpoint::new(header(
                BASELINE_KIND,
                fingerprint,
                seed,
                &IdmLearnedMeta {
                    baseline: kind,
                    distribution: d.clone(),
                },
            )?),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.kind != BASELINE_KIND {
            return Err(DsdpError::Config(format!(
                "expected a {BASELINE_KIND} checkpoint, got {}",
                ck.header.kind
            )));
        }
        let kind: BaselineKind = ck.meta("baseline")?;
        let mut rng = SimRng::seed_from_u64(0);
        Ok(match kind {
            BaselineKind::DiffusionBc | BaselineKind::UncondDiffusionBc => {
                let (net, _): (DiffusionNet, BaselineKind) =
                    DiffusionNet::from_checkpoint(ck, BASELINE_KIND)?;
                Baseline::Diffusion { kind, net }
            }
            BaselineKind::Ebm => {
                let m: EbmMeta = meta_as(&ck.header)?;
                let mut e = EbmModel::new(m.ebm, &m.sieve, &mut rng)?;
                e.store = restored(ck, e.store)?;
                Baseline::Ebm(e)
            }
            BaselineKind::IdmFixed => {
                Baseline::IdmFixed(meta_as::<IdmFixedMeta>(&ck.header)?.styles)
            }
            BaselineKind::IdmLearned => {
                Baseline::IdmLearned(meta_as::<IdmLearnedMeta>(&ck.header)?.distribution)
            }
            _ => {
                let m: HeadMeta = meta_as(&ck.header)?;
                let mut h = HeadModel::new(m.head, &m.sieve, m.centers, &mut rng)?;
                h.store = restored(ck, h.store)?;
                Baseline::Head(h)
            }
        })
    }

    /// Policy over normalized observations; `sampler` applies to the diffusion kinds only.
    pub fn policy(&self, stats: &NormStats, sampler: SamplerKind) -> Result<Box<dyn Policy>> {
        let name = self.kind().name();
        Ok(match self {
            Baseline::Diffusion { kind, net } => {
                let context = if *kind == BaselineKind::DiffusionBc {
                    ContextSource::Warmup
                } else {
                    ContextSource::None
                };
                Box::new(DiffusionPolicy::new(
                    name,
                    net.clone(),
                    context,
                    stats.clone(),
                    sampler,
                )?)
            }
            Baseline::Head(h) => Box::new(SamplerPolicy {
                name,
                stats: stats.clone(),
                actor: Actor::Head(h.clone()),
            }),
            Baseline::Ebm(e) => Box::new(SamplerPolicy {
                name,
                stats: stats.clone(),
                actor: Actor::Ebm(e.clone()),
            }),
            Baseline::IdmFixed(t) => Box::new(IdmFixedPolicy::new(t.clone())?),
            Baseline::IdmLearned(d) => Box::new(IdmLearnedPolicy { dist: d.clone() }),
        })
    }
}

#[derive(Clone, Debug)]
enum Actor {
    Head(HeadModel),
    Ebm(EbmModel),
}

/// Memoryless policy acting from the current observation alone.
#[derive(Clone, Debug)]
struct SamplerPolicy {
    name: &'static str,
    stats: NormStats,
    actor: Actor,
}

impl Episode for &SamplerPolicy {
    fn accel(&mut self, ctx: &StepContext<'_>, rng: &mut SimRng) -> Result<f64> {
        let a = match &self.actor {
            Actor::Head(h) => h.sample(&ctx.obs.0, rng)?,
            Actor::Ebm(e) => e.sample(&ctx.obs.0, rng)?,
        };
        Ok(self.stats.denormalize_action(crate::datasets::Action(a)))
    }
}

impl Policy for SamplerPolicy {
    fn name(&self) -> String {
        self.name.into()
    }

    fn warmup_len(&self) -> usize {
        0
    }

    fn begin<'p>(&'p self, _: &[Step], _: &mut SimRng) -> Result<Box<dyn Episode + 'p>> {
        Ok(Box::new(self))
    }
}

/// Trains one baseline on preprocessed training trajectories. Neural kinds
/// hold out the same validation share as the style-conditioned policy.
pub fn train_baseline(
    kind: BaselineKind,
    trajs: &[Trajectory],
    cfg: &BaselineConfig,
    seed: u64,
) -> Result<(Baseline, BaselineLog)> {
    let (fit, held) = validation_split(trajs, cfg.policy.val_fraction);
    let init = || SimRng::seed_from_u64(derive_seed(seed, "init"));
    match kind {
        BaselineKind::DiffusionBc => {
            let w = cfg.warmup;
            let cond = Conditioning::Warmup {
                l_p: w.l_p,
                channels: w.channels,
                dim: w.dim,
            };
            let net = DiffusionNet::new(&cfg.policy.diffusion(cond), &mut init())?;
            let t = train_diffusion(
                net,
                &warmup_conditioned_data(fit, w.l_p)?,
                &warmup_conditioned_data(held, w.l_p)?,
                &cfg.policy,
                seed,
            )?;
            let log = BaselineLog {
                train: Some(t.log.clone()),
                idm: None,
            };
            Ok((
                Baseline::Diffusion {
                    kind,
                    net: t.into_best(),
                },
                log,
            ))
        }
        BaselineKind::UncondDiffusionBc => {
            let net = DiffusionNet::new(&cfg.policy.diffusion(Conditioning::None), &mut init())?;
            let t = train_diffusion(
                net,
                &unconditioned_data(fit),
                &unconditioned_data(held),
                &cfg.policy,
                seed,
            )?;
            let log = BaselineLog {
                train: Some(t.log.clone()),
                idm: None,
            };
            Ok((
                Baseline::Diffusion {
                    kind,
                    net: t.into_best(),
                },
                log,
            ))
        }
        BaselineKind::Ebm => {
            let (m, log) = train_ebm(
                cfg.ebm,
                &unconditioned_data(fit),
                &unconditioned_data(held),
                &cfg.policy,
                seed,
            )?;
            Ok((
                Baseline::Ebm(m),
                BaselineLog {
                    train: Some(log),
                    idm: None,
                },
            ))
        }
        BaselineKind::IdmFixed => {
            cfg.idm_styles.validate()?;
            Ok((
                Baseline::IdmFixed(cfg.idm_styles.clone()),
                BaselineLog::default(),
            ))
        }
        BaselineKind::IdmLearned => {
            let (d, report) = fit_idm_learned(trajs, &cfg.idm, seed)?;
            Ok((
                Baseline::IdmLearned(d),
                BaselineLog {
                    train: None,
                    idm: Some(report),
                },
            ))
        }
        _ => {
            let head = cfg.head(kind).expect("head kinds handled above");
            let (m, log) = train_head(
                head,
                &unconditioned_data(fit),
                &unconditioned_data(held),
                &cfg.policy,
                seed,
            )?;
            Ok((
                Baseline::Head(m),
                BaselineLog {
                    train: Some(log),
                    idm: None,
                },
            ))
        }
    }
}

/// Trunk used by every neural baseline.
pub fn trunk_of(b: &Baseline) -> Option<&Sieve> {
    match b {
        Baseline::Head(h) => Some(&h.sieve),
        Baseline::Ebm(e) => Some(&e.sieve),
        _ => None,
    }
}
