//! Agreement between learned codes and the synthetic generator's hidden
//! style labels. Evaluation only; nothing here feeds back into training.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{majority_labels, purity};
use crate::datasets::{window_starts, Trajectory};
use crate::error::{DsdpError, Result};
use crate::nn::argmax;
use crate::styles::{prior_examples, PriorNet, ReprFunction};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleRecovery {
    pub distinct_codes: usize,
    /// Majority-vote purity of codes over back-to-back `L_c` windows.
    pub window_purity: f64,
    /// Purity when each trajectory takes its most frequent window code.
    pub trajectory_purity: f64,
    pub windows: usize,
}

fn labelled(trajs: &[Trajectory]) -> Result<Vec<(&Trajectory, u32)>> {
    trajs
        .iter()
        .map(|t| {
            t.hidden_style_label().map(|l| (t, l)).ok_or_else(|| {
                DsdpError::Precondition(format!(
                    "trajectory of driver {} has no hidden label",
                    t.driver_id
                ))
            })
        })
        .collect()
}

pub fn style_recovery(repr: &ReprFunction, trajs: &[Trajectory]) -> Result<StyleRecovery> {
    let l = repr.l_c();
    let mut codes = Vec::new();
    let mut labels = Vec::new();
    let mut traj_codes = Vec::new();
    let mut traj_labels = Vec::new();
    for (t, label) in labelled(trajs)? {
        let windows = window_starts(t.len(), l)
            .into_iter()
            .map(|s| t.window_values(s, l))
            .collect::<Result<Vec<_>>>()?;
        if windows.is_empty() {
            continue;
        }
        let mut count: BTreeMap<u32, usize> = BTreeMap::new();
        for c in repr.codes(&windows)? {
            *count.entry(c.index).or_default() += 1;
            codes.push(c.index as usize);
            labels.push(label);
        }
        let top = count
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(c, _)| *c)
            .unwrap();
        traj_codes.push(top as usize);
        traj_labels.push(label);
    }
    if codes.is_empty() {
        return Err(DsdpError::Precondition(
            "no trajectory long enough for a style window".into(),
        ));
    }
    Ok(StyleRecovery {
        distinct_codes: codes.iter().collect::<BTreeSet<_>>().len(),
        window_purity: purity(&codes, &labels),
        trajectory_purity: purity(&traj_codes, &traj_labels),
        windows: codes.len(),
    })
}

/// Held-out top-1 accuracy of the prior after mapping each code to the
/// majority hidden label of its training windows. Codes never seen in
/// training count as wrong.
pub fn prior_style_accuracy(
    prior: &PriorNet,
    repr: &ReprFunction,
    train: &[Trajectory],
    test: &[Trajectory],
) -> Result<f64> {
    let windows_labels = |trajs: &[Trajectory]| -> Result<(Vec<Vec<f64>>, Vec<usize>, Vec<u32>)> {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut labels = Vec::new();
        for (t, label) in labelled(trajs)? {
            let (i, c) = prior_examples(std::slice::from_ref(t), repr, prior.l_p(), 1)?;
            labels.extend(std::iter::repeat_n(label, i.len()));
            inputs.extend(i);
            targets.extend(c);
        }
        Ok((inputs, targets, labels))
    };
    let (_, train_codes, train_labels) = windows_labels(train)?;
    let code_style = majority_labels(&train_codes, &train_labels);
    let (inputs, _, labels) = windows_labels(test)?;
    if inputs.is_empty() {
        return Err(DsdpError::Precondition("no held-out prior windows".into()));
    }
    let mut hits = 0usize;
    for (chunk, labs) in inputs.chunks(4096).zip(labels.chunks(4096)) {
        for (logits, y) in prior.logits_batch(chunk)?.iter().zip(labs) {
            if code_style.get(&argmax(logits)) == Some(y) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / inputs.len() as f64)
}

/// Fraction of sampled comparisons in which a window agrees with a disjoint
/// window of its own trajectory at least as often as with a window of a
/// differently labelled trajectory.
pub fn style_consistency(
    repr: &ReprFunction,
    trajs: &[Trajectory],
    n: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let l = repr.l_c();
    let pool: Vec<(&Trajectory, u32)> = labelled(trajs)?
        .into_iter()
        .filter(|(t, _)| t.len() >= 2 * l)
        .collect();
    if pool.len() < 2 || pool.iter().all(|(_, y)| *y == pool[0].1) {
        return Err(DsdpError::Precondition(
            "need trajectories of at least two styles".into(),
        ));
    }
    let mut wins = 0usize;
    for _ in 0..n {
        let (t, y) = pool[rng.random_range(0..pool.len())];
        let (a, b) = crate::datasets::sample_subtrajectory_pair(t.len(), l, rng)?;
        let (o, _) = loop {
            let cand = pool[rng.random_range(0..pool.len())];
            if cand.1 != y {
                break cand;
            }
        };
        let c = rng.random_range(0..=o.len() - l);
        let codes = repr.codes(&[
            t.window_values(a, l)?,
            t.window_values(b, l)?,
            o.window_values(c, l)?,
        ])?;
        let same = codes[0] == codes[1];
        let cross = codes[0] == codes[2];
        if same || !cross {
            wins += 1;
        }
    }
    Ok(wins as f64 / n.max(1) as f64)
}
