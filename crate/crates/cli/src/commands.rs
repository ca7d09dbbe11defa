//! One function per pipeline stage. Every stage reads and writes files under
//! the run's output directory and stamps them with the config fingerprint.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dsdp::baselines::{train_baseline, Baseline, BaselineKind, BASELINE_KIND};
use dsdp::datasets::{
    generate_synthetic, group_by_vehicle, load_jsonl, preprocess, read_records, save_jsonl,
    write_csv, NormStats, Trajectory,
};
use dsdp::eval::{
    aggregate, aggregate_csv, build_scenarios, evaluate_crash, evaluate_f1, EvalReport, LeaderMode,
    Metric,
};
use dsdp::par::Exec;
use dsdp::policy::{
    train_policy, ContextSource, DiffusionNet, DiffusionPolicy, Policy, PolicyTrainLog, POLICY_KIND,
};
use dsdp::seeding::derive_seed;
use dsdp::styles::{train_contrastive, train_prior, PriorNet, ReprFunction, StylePrior};
use numkit::Checkpoint;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DatasetSource, RunConfig};

const RAW: &str = "data/raw.csv";
const LABELS: &str = "data/labels.json";
const SOURCE_MANIFEST: &str = "data/source.manifest.json";
const SPLIT_MANIFEST: &str = "data/split.manifest.json";
const TRAIN: &str = "data/train.jsonl";
const TEST: &str = "data/test.jsonl";
const STATS: &str = "data/stats.json";
const STYLE: &str = "models/style.json";
const PRIOR: &str = "models/prior.json";
const POLICY: &str = "models/policy.json";
pub const DSDP: &str = "dsdp";

/// Provenance of a dataset stage's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub fingerprint: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_styles: Option<usize>,
    pub counts: BTreeMap<String, usize>,
    /// SHA-256 of each output, keyed by path relative to the run directory.
    pub files: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<serde_json::Value>,
}

pub struct Run {
    pub cfg: RunConfig,
    pub fingerprint: String,
    pub allow_mismatch: bool,
    pub exec: Exec,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Run {
    pub fn new(cfg: RunConfig, allow_mismatch: bool) -> Result<Self> {
        let fingerprint = cfg.fingerprint()?;
        let exec = if cfg.workers == Some(1) {
            Exec::Sequential
        } else {
            Exec::Parallel
        };
        Ok(Self {
            cfg,
            fingerprint,
            allow_mismatch,
            exec,
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.cfg.out_dir.join(rel)
    }

    fn seed(&self, stage: &str) -> u64 {
        derive_seed(self.cfg.seed, stage)
    }

    /// Echoes the resolved config next to the outputs.
    pub fn prepare(&self) -> Result<()> {
        for d in ["data", "models", "reports"] {
            std::fs::create_dir_all(self.path(d))
                .with_context(|| format!("creating {}", self.path(d).display()))?;
        }
        let mut text = format!("# fingerprint {}\n", self.fingerprint);
        text.push_str(&self.cfg.to_toml()?);
        self.write("config.toml", text.as_bytes())
    }

    fn write(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(rel);
        std::fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))
    }

    fn require(&self, rel: &str, stage: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if !p.exists() {
            bail!(
                "missing {} (produced by `dsdp {stage}`); run that stage first",
                p.display()
            );
        }
        Ok(p)
    }

    fn check(&self, what: &Path, found: &str) -> Result<()> {
        if found == self.fingerprint {
            return Ok(());
        }
        if self.allow_mismatch {
            log::warn!(
                "{} has fingerprint {found}, current config is {}",
                what.display(),
                self.fingerprint
            );
            return Ok(());
        }
        bail!(
            "{} was produced under config fingerprint {found} but the current config is {}; rerun that stage or pass --allow-fingerprint-mismatch",
            what.display(),
            self.fingerprint
        )
    }

    fn manifest(&self, stage: &str, seed: u64, files: &[&str]) -> Result<Manifest> {
        let mut hashes = BTreeMap::new();
        for f in files {
            hashes.insert(f.to_string(), sha256_file(&self.path(f))?);
        }
        Ok(Manifest {
            stage: stage.into(),
            fingerprint: self.fingerprint.clone(),
            seed,
            n_styles: None,
            counts: BTreeMap::new(),
            files: hashes,
            report: None,
        })
    }

    fn save_manifest(&self, rel: &str, m: &Manifest) -> Result<()> {
        self.write(rel, (serde_json::to_string_pretty(m)? + "\n").as_bytes())
    }

    fn load_manifest(&self, rel: &str, stage: &str) -> Result<Manifest> {
        let p = self.require(rel, stage)?;
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(&p)?)
            .with_context(|| format!("parsing {}", p.display()))?;
        self.check(&p, &m.fingerprint)?;
        Ok(m)
    }

    fn load_checkpoint(&self, rel: &str, stage: &str) -> Result<Checkpoint> {
        let p = self.require(rel, stage)?;
        let ck = Checkpoint::load(&p).with_context(|| format!("loading {}", p.display()))?;
        self.check(&p, &ck.header.fingerprint)?;
        Ok(ck)
    }

    fn load_trajectories(&self, rel: &str) -> Result<Vec<Trajectory>> {
        let p = self.require(rel, "preprocess")?;
        let (trajs, fp) = load_jsonl(&p).with_context(|| format!("loading {}", p.display()))?;
        self.check(&p, &fp)?;
        Ok(trajs)
    }

    fn load_stats(&self) -> Result<NormStats> {
        self.load_manifest(SPLIT_MANIFEST, "preprocess")?;
        let p = self.require(STATS, "preprocess")?;
        Ok(NormStats::load(&p)?)
    }

    fn load_style(&self) -> Result<ReprFunction> {
        Ok(ReprFunction::from_checkpoint(
            &self.load_checkpoint(STYLE, "train-style")?,
        )?)
    }

    pub fn synth(&self) -> Result<Manifest> {
        let DatasetSource::Synthetic(src) = &self.cfg.dataset else {
            bail!(
                "`synth` needs a synthetic dataset source; this config reads a CSV (use `ingest`)"
            );
        };
        let seed = self.seed("synth");
        let spec = src.spec(seed);
        let data = generate_synthetic(&spec)?;
        write_csv(&self.path(RAW), &data.records)?;
        self.write(
            LABELS,
            (serde_json::to_string_pretty(&data.labels)? + "\n").as_bytes(),
        )?;
        let mut m = self.manifest("synth", seed, &[RAW, LABELS])?;
        m.n_styles = Some(spec.n_styles());
        m.counts.insert("drivers".into(), data.labels.len());
        m.counts.insert("records".into(), data.records.len());
        self.save_manifest(SOURCE_MANIFEST, &m)?;
        Ok(m)
    }

    pub fn ingest(&self, input: Option<&Path>) -> Result<Manifest> {
        let path = match (input, &self.cfg.dataset) {
            (Some(p), _) => p.to_path_buf(),
            (None, DatasetSource::Csv { path }) => path.clone(),
            (None, DatasetSource::Synthetic(_)) => {
                bail!("`ingest` needs --input or a CSV dataset source")
            }
        };
        let records =
            read_records(&path).with_context(|| format!("ingesting {}", path.display()))?;
        let vehicles = group_by_vehicle(&records)?.len();
        write_csv(&self.path(RAW), &records)?;
        let labels = self.path(LABELS);
        if labels.exists() {
            std::fs::remove_file(&labels)
                .with_context(|| format!("removing stale {}", labels.display()))?;
        }
        let mut m = self.manifest("ingest", self.cfg.seed, &[RAW])?;
        m.counts.insert("vehicles".into(), vehicles);
        m.counts.insert("records".into(), records.len());
        self.save_manifest(SOURCE_MANIFEST, &m)?;
        Ok(m)
    }

    pub fn preprocess(&self) -> Result<Manifest> {
        let source = self.load_manifest(SOURCE_MANIFEST, "synth` or `dsdp ingest")?;
        let raw = group_by_vehicle(&read_records(&self.require(RAW, "synth")?)?)?;
        let labels: Option<BTreeMap<u64, u32>> = if source.files.contains_key(LABELS) {
            Some(serde_json::from_str(&std::fs::read_to_string(
                self.require(LABELS, "synth")?,
            )?)?)
        } else {
            None
        };
        let split = preprocess(&raw, labels.as_ref(), &self.cfg.preprocess)?;
        save_jsonl(&self.path(TRAIN), &split.train, &self.fingerprint)?;
        save_jsonl(&self.path(TEST), &split.test, &self.fingerprint)?;
        split.stats.save(&self.path(STATS))?;
        let mut m = self.manifest("preprocess", self.cfg.seed, &[TRAIN, TEST, STATS])?;
        m.n_styles = source.n_styles;
        m.counts.insert("train".into(), split.train.len());
        m.counts.insert("test".into(), split.test.len());
        m.report = Some(serde_json::to_value(&split.report)?);
        self.save_manifest(SPLIT_MANIFEST, &m)?;
        Ok(m)
    }

    pub fn train_style(&self) -> Result<()> {
        let train = self.load_trajectories(TRAIN)?;
        let seed = self.seed("style");
        let (repr, log) = train_contrastive(&train, &self.cfg.contrastive, seed)?;
        repr.to_checkpoint(&self.fingerprint, seed)?
            .save(&self.path(STYLE))?;
        self.write(
            "models/style_log.csv",
            loss_csv("pass", &log.pass_loss).as_bytes(),
        )
    }

    pub fn train_prior(&self) -> Result<()> {
        let repr = self.load_style()?;
        let train = self.load_trajectories(TRAIN)?;
        let seed = self.seed("prior");
        let (prior, log) = train_prior(&train, &repr, &self.cfg.prior, seed)?;
        prior
            .to_checkpoint(&self.fingerprint, seed)?
            .save(&self.path(PRIOR))?;
        self.write(
            "models/prior_log.csv",
            loss_csv("epoch", &log.epoch_loss).as_bytes(),
        )
    }

    pub fn train_policy(&self) -> Result<()> {
        let repr = self.load_style()?;
        let train = self.load_trajectories(TRAIN)?;
        let seed = self.seed("policy");
        let trained = train_policy(&train, &repr, &self.cfg.policy, seed)?;
        let log = trained.log.clone();
        trained
            .best_net()
            .to_checkpoint(POLICY_KIND, &self.fingerprint, seed, &log)?
            .save(&self.path(POLICY))?;
        self.write("models/policy_log.csv", train_log_csv(&log).as_bytes())
    }

    pub fn train_baselines(&self, kinds: &[BaselineKind]) -> Result<()> {
        let kinds = if kinds.is_empty() {
            self.cfg.baseline_kinds.as_slice()
        } else {
            kinds
        };
        let train = self.load_trajectories(TRAIN)?;
        for &kind in kinds {
            log::info!("training baseline {kind}");
            let seed = self.seed(&format!("baseline/{kind}"));
            let (model, log) = train_baseline(kind, &train, &self.cfg.baselines, seed)?;
            model
                .to_checkpoint(&self.fingerprint, seed)?
                .save(&self.path(&baseline_path(kind)))?;
            if let Some(t) = &log.train {
                self.write(
                    &format!("models/{BASELINE_KIND}_{kind}_log.csv"),
                    train_log_csv(t).as_bytes(),
                )?;
            }
            if let Some(r) = &log.idm {
                self.write(
                    &format!("models/{BASELINE_KIND}_{kind}_fit.json"),
                    (serde_json::to_string_pretty(r)? + "\n").as_bytes(),
                )?;
            }
        }
        Ok(())
    }

    fn load_policy(&self, name: &str, stats: &NormStats) -> Result<Box<dyn Policy>> {
        if name == DSDP {
            let repr = self.load_style()?;
            let prior = PriorNet::from_checkpoint(&self.load_checkpoint(PRIOR, "train-prior")?)?;
            let (net, _): (DiffusionNet, PolicyTrainLog) = DiffusionNet::from_checkpoint(
                &self.load_checkpoint(POLICY, "train-policy")?,
                POLICY_KIND,
            )?;
            let context = ContextSource::Style {
                repr,
                prior: StylePrior::Learned(prior),
                temperature: self.cfg.temperature,
            };
            return Ok(Box::new(DiffusionPolicy::new(
                DSDP,
                net,
                context,
                stats.clone(),
                self.cfg.sampler,
            )?));
        }
        let kind: BaselineKind = name.parse()?;
        let ck = self.load_checkpoint(
            &baseline_path(kind),
            &format!("train-baseline --kind {kind}"),
        )?;
        Ok(Baseline::from_checkpoint(&ck)?.policy(stats, self.cfg.sampler)?)
    }

    /// Evaluates each named policy under every evaluation seed and writes one
    /// JSON and one CSV report per (policy, seed).
    pub fn eval(&self, metric: Metric, policies: &[String]) -> Result<Vec<EvalReport>> {
        let stats = self.load_stats()?;
        let test = self.load_trajectories(TEST)?;
        let e = &self.cfg.eval;
        let mut out = Vec::new();
        for name in policies {
            let policy = self.load_policy(name, &stats)?;
            for i in 0..self.cfg.eval_seeds {
                let seed = self.seed(&format!("eval/{metric:?}/{i}"));
                let set_seed = derive_seed(seed, "scenarios");
                let report = match metric {
                    Metric::F1 => {
                        let set = build_scenarios(
                            &test,
                            LeaderMode::Replay,
                            e.f1_scenarios,
                            false,
                            e,
                            set_seed,
                        )?;
                        evaluate_f1(policy.as_ref(), &stats, &set, e.k, seed, self.exec)?
                    }
                    Metric::Crash => {
                        let set = build_scenarios(
                            &test,
                            self.cfg.crash_leader,
                            e.crash_scenarios,
                            true,
                            e,
                            set_seed,
                        )?;
                        evaluate_crash(policy.as_ref(), &stats, &set, seed, self.exec)?
                    }
                }
                .with_fingerprint(&self.fingerprint);
                report.save(&self.path("reports"), &report_stem(metric, name, i))?;
                out.push(report);
            }
        }
        Ok(out)
    }

    /// Aggregates every report in the run into mean and two standard errors.
    pub fn report(&self) -> Result<String> {
        let dir = self.require("reports", "eval-f1` or `dsdp eval-crash")?;
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| {
            p.extension().is_some_and(|x| x == "json")
                && p.file_stem().is_some_and(|s| s != "summary")
        });
        files.sort();
        let mut reports = Vec::new();
        for p in &files {
            let r = EvalReport::from_json(&std::fs::read_to_string(p)?)
                .with_context(|| format!("parsing {}", p.display()))?;
            self.check(p, &r.fingerprint)?;
            reports.push(r);
        }
        if reports.is_empty() {
            bail!(
                "no reports in {}; run `dsdp eval-f1` or `dsdp eval-crash` first",
                dir.display()
            );
        }
        let rows = aggregate(&reports);
        let csv = aggregate_csv(&rows)?;
        self.write("reports/summary.csv", csv.as_bytes())?;
        self.write(
            "reports/summary.json",
            (serde_json::to_string_pretty(&rows)? + "\n").as_bytes(),
        )?;
        let mut table = String::new();
        for r in &rows {
            let pm = |m: Option<f64>, s: Option<f64>| {
                m.zip(s)
                    .map_or("-".to_string(), |(m, s)| format!("{m:.3} ± {s:.3}"))
            };
            let _ = writeln!(
                table,
                "{:<20} {:<6} seeds {:<2} crash {:.1} ± {:.1}%  density {}  coverage {}  f1 {}",
                r.policy,
                format!("{:?}", r.metric).to_lowercase(),
                r.seeds,
                r.crash_pct_mean,
                r.crash_pct_2se,
                pm(r.density_mean, r.density_2se),
                pm(r.coverage_mean, r.coverage_2se),
                pm(r.f1_mean, r.f1_2se)
            );
        }
        Ok(table)
    }
}

fn baseline_path(kind: BaselineKind) -> String {
    format!("models/{BASELINE_KIND}_{kind}.json")
}

pub fn report_stem(metric: Metric, policy: &str, index: usize) -> String {
    format!("{}_{policy}_{index}", format!("{metric:?}").to_lowercase())
}

fn loss_csv(unit: &str, losses: &[f64]) -> String {
    let mut s = format!("{unit},loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{},{l}", i + 1);
    }
    s
}

/// One row per epoch; validation loss only where a checkpoint was scored.
fn train_log_csv(log: &PolicyTrainLog) -> String {
    let val: BTreeMap<usize, f64> = log
        .checkpoints
        .iter()
        .map(|c| (c.epoch, c.val_loss))
        .collect();
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for e in 0..=log.epoch_loss.len() {
        let train = if e == 0 {
            String::new()
        } else {
            log.epoch_loss[e - 1].to_string()
        };
        let v = val.get(&e).map_or(String::new(), f64::to_string);
        let _ = writeln!(s, "{e},{train},{v}");
    }
    s
}
