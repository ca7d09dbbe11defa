//! Run configuration: TOML file, command-line overrides and fingerprint.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dsdp::baselines::{BaselineConfig, BaselineKind};
use dsdp::datasets::{PreprocessConfig, StyleCluster, SyntheticSpec};
use dsdp::eval::{EvalConfig, LeaderMode};
use dsdp::policy::{PolicyConfig, SamplerKind};
use dsdp::styles::{ContrastiveConfig, PriorConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSource {
    pub n_drivers: usize,
    pub length: usize,
    pub action_noise: f64,
    pub start_stagger: u64,
    /// The built-in four styles when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub styles: Option<Vec<StyleCluster>>,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        let spec = SyntheticSpec::four_styles(200, 0);
        Self {
            n_drivers: spec.n_drivers,
            length: spec.length,
            action_noise: spec.action_noise,
            start_stagger: spec.start_stagger,
            styles: None,
        }
    }
}

impl SyntheticSource {
    pub fn spec(&self, seed: u64) -> SyntheticSpec {
        let mut spec = SyntheticSpec::four_styles(self.n_drivers, seed);
        spec.length = self.length;
        spec.action_noise = self.action_noise;
        spec.start_stagger = self.start_stagger;
        if let Some(styles) = &self.styles {
            spec.styles = styles.clone();
        }
        spec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSource),
    Csv { path: PathBuf },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticSource::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stage seed is derived from it by label.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads; all cores when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub dataset: DatasetSource,
    pub preprocess: PreprocessConfig,
    pub contrastive: ContrastiveConfig,
    pub prior: PriorConfig,
    pub policy: PolicyConfig,
    pub baselines: BaselineConfig,
    /// Kinds trained by `train-baseline` without `--kind`.
    pub baseline_kinds: Vec<BaselineKind>,
    pub eval: EvalConfig,
    pub sampler: SamplerKind,
    /// Softmax temperature of the style prior at evaluation.
    pub temperature: f64,
    /// Evaluation repeats aggregated by `report`.
    pub eval_seeds: usize,
    pub crash_leader: LeaderMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            workers: None,
            dataset: DatasetSource::default(),
            preprocess: PreprocessConfig::default(),
            contrastive: ContrastiveConfig::default(),
            prior: PriorConfig::default(),
            policy: PolicyConfig::default(),
            baselines: BaselineConfig::default(),
            baseline_kinds: BaselineKind::ALL.to_vec(),
            eval: EvalConfig::default(),
            sampler: SamplerKind::Ddpm,
            temperature: 1.0,
            eval_seeds: 5,
            crash_leader: LeaderMode::Idm,
        }
    }
}

impl RunConfig {
    /// Reads `path` (defaults when `None`), then applies `key.path=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        if let Some(toml::Value::Table(d)) = table.get_mut("dataset") {
            d.entry("source").or_insert_with(|| "synthetic".into());
        }
        let cfg: RunConfig = toml::Value::Table(table.clone())
            .try_into()
            .context("invalid configuration")?;
        let resolved = toml::Table::try_from(&cfg)?;
        let mut unknown = Vec::new();
        unknown_keys(&table, &resolved, "", &mut unknown);
        if !unknown.is_empty() {
            bail!("unknown configuration keys: {}", unknown.join(", "));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.contrastive.validate()?;
        self.prior.validate()?;
        self.policy.validate()?;
        self.eval.validate()?;
        if self.eval_seeds == 0 {
            bail!("eval_seeds must be positive");
        }
        if !(self.temperature > 0.0) {
            bail!("temperature must be positive");
        }
        if self.workers == Some(0) {
            bail!("workers must be positive");
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of every setting that can change an
    /// artifact; the output directory and worker count are excluded.
    pub fn fingerprint(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        let map = v.as_object_mut().expect("config serializes to an object");
        map.remove("out_dir");
        map.remove("workers");
        Ok(hex::encode(Sha256::digest(
            serde_json::to_string(&v)?.as_bytes(),
        )))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Keys of `given` that deserialization dropped. Every accepted key
/// reappears when the parsed config is serialized again.
fn unknown_keys(given: &toml::Table, resolved: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in given {
        let path = format!("{prefix}{k}");
        match (v, resolved.get(k)) {
            (_, None) => out.push(path),
            (toml::Value::Table(g), Some(toml::Value::Table(r))) => {
                unknown_keys(g, r, &format!("{path}."), out)
            }
            _ => {}
        }
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!("override '{assignment}' is not of the form key=value");
    };
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .with_context(|| format!("override '{key}': '{p}' is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint().unwrap(), cfg.fingerprint().unwrap());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::load(
            None,
            &[
                "policy.epochs=3".into(),
                "dataset.n_drivers=12".into(),
                "crash_leader=Stopped".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.policy.epochs, 3);
        assert_eq!(cfg.crash_leader, LeaderMode::Stopped);
        match cfg.dataset {
            DatasetSource::Synthetic(s) => assert_eq!(s.n_drivers, 12),
            DatasetSource::Csv { .. } => panic!("source changed"),
        }
    }

    #[test]
    fn fingerprint_ignores_placement_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        b.workers = Some(3);
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        b.policy.lr *= 2.0;
        assert_ne!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::load(None, &["polcy.epochs=3".into()]).is_err());
        assert!(RunConfig::load(None, &["noequals".into()]).is_err());
    }
}
