use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DsdpError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Crash,
    F1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub index: usize,
    pub driver_id: u64,
    pub steps: usize,
    pub crashed: bool,
    pub crash_step: Option<usize>,
    pub density: Option<f64>,
    pub coverage: Option<f64>,
    pub f1: Option<f64>,
    pub style: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub metric: Metric,
    pub seed: u64,
    pub fingerprint: String,
    pub scenarios: usize,
    pub skipped: usize,
    /// Percentage of scenarios with a collision.
    pub crash_pct: f64,
    pub density: Option<f64>,
    pub coverage: Option<f64>,
    pub f1: Option<f64>,
    pub rows: Vec<ScenarioRow>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

impl EvalReport {
    pub fn from_rows(
        policy: &str,
        metric: Metric,
        seed: u64,
        rows: Vec<ScenarioRow>,
        skipped: usize,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(DsdpError::Precondition(
                "report needs at least one scenario".into(),
            ));
        }
        let col = |f: fn(&ScenarioRow) -> Option<f64>| {
            mean(&rows.iter().filter_map(f).collect::<Vec<_>>())
        };
        Ok(Self {
            policy: policy.into(),
            metric,
            seed,
            fingerprint: String::new(),
            scenarios: rows.len(),
            skipped,
            crash_pct: 100.0 * rows.iter().filter(|r| r.crashed).count() as f64 / rows.len() as f64,
            density: col(|r| r.density),
            coverage: col(|r| r.coverage),
            f1: col(|r| r.f1),
            rows,
        })
    }

    pub fn with_fingerprint(mut self, fingerprint: &str) -> Self {
        self.fingerprint = fingerprint.into();
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One line per scenario.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| DsdpError::Data(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| DsdpError::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Writes `<stem>.json` and `<stem>.csv`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        write_file(
            &dir.join(format!("{stem}.json")),
            self.to_json()?.as_bytes(),
        )?;
        write_file(&dir.join(format!("{stem}.csv")), self.to_csv()?.as_bytes())
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| DsdpError::file(path, e))?;
    f.write_all(bytes).map_err(|e| DsdpError::file(path, e))
}

/// Mean and two standard errors of one quantity across seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub two_se: f64,
}

/// Sample mean and `2·s/√n` (0 for a single value).
pub fn mean_two_se(xs: &[f64]) -> Option<MeanSe> {
    let m = mean(xs)?;
    let n = xs.len() as f64;
    let two_se = if xs.len() < 2 {
        0.0
    } else {
        2.0 * (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
    };
    Some(MeanSe { mean: m, two_se })
}

/// One row of a multi-seed table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub policy: String,
    pub metric: Metric,
    pub seeds: usize,
    pub crash_pct_mean: f64,
    pub crash_pct_2se: f64,
    pub density_mean: Option<f64>,
    pub density_2se: Option<f64>,
    pub coverage_mean: Option<f64>,
    pub coverage_2se: Option<f64>,
    pub f1_mean: Option<f64>,
    pub f1_2se: Option<f64>,
}

/// Groups reports by (policy, metric) in first-seen order and aggregates each group.
pub fn aggregate(reports: &[EvalReport]) -> Vec<AggregateRow> {
    let mut keys: Vec<(String, Metric)> = Vec::new();
    for r in reports {
        if !keys.iter().any(|(p, m)| *p == r.policy && *m == r.metric) {
            keys.push((r.policy.clone(), r.metric));
        }
    }
    keys.into_iter()
        .map(|(policy, metric)| {
            let group: Vec<&EvalReport> = reports
                .iter()
                .filter(|r| r.policy == policy && r.metric == metric)
                .collect();
            let stat = |f: fn(&EvalReport) -> Option<f64>| {
                mean_two_se(&group.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
            };
            let crash = stat(|r| Some(r.crash_pct)).expect("non-empty group");
            let (d, c, f) = (stat(|r| r.density), stat(|r| r.coverage), stat(|r| r.f1));
            AggregateRow {
                policy,
                metric,
                seeds: group.len(),
                crash_pct_mean: crash.mean,
                crash_pct_2se: crash.two_se,
                density_mean: d.map(|x| x.mean),
                density_2se: d.map(|x| x.two_se),
                coverage_mean: c.map(|x| x.mean),
                coverage_2se: c.map(|x| x.two_se),
                f1_mean: f.map(|x| x.mean),
                f1_2se: f.map(|x| x.two_se),
            }
        })
        .collect()
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| DsdpError::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| DsdpError::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_standard_errors() {
        let s = mean_two_se(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        // s = sqrt(5/3), 2s/2 = 1.2910
        assert!((s.two_se - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_two_se(&[7.0]).unwrap().two_se, 0.0);
        assert!(mean_two_se(&[]).is_none());
    }
}
