//! Lloyd's k-means with k-means++ seeding, plus label purity.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{DsdpError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centre; ties go to the lower index.
pub fn nearest(centers: &[Vec<f64>], p: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = dist2(c, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    max_iter: usize,
    rng: &mut impl Rng,
) -> Result<KMeans> {
    if k == 0 || points.len() < k {
        return Err(DsdpError::Precondition(format!(
            "k-means needs 1 <= k <= points, got k={k} for {} points",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(DsdpError::Precondition(
            "k-means points must share one dimension".into(),
        ));
    }
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            d2.iter()
                .position(|d| {
                    u -= d;
                    u < 0.0
                })
                .unwrap_or(points.len() - 1)
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[idx].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, centers.last().unwrap()));
        }
    }
    let mut assignments = vec![usize::MAX; points.len()];
    for _ in 0..max_iter.max(1) {
        let next: Vec<usize> = points.iter().map(|p| nearest(&centers, p)).collect();
        let changed = next != assignments;
        assignments = next;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            // An emptied cluster keeps its previous centre.
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = points
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| dist2(p, &centers[a]))
        .sum();
    Ok(KMeans {
        centers,
        assignments,
        inertia,
    })
}

/// Fraction of items whose label matches the majority label of their cluster.
pub fn purity(clusters: &[usize], labels: &[u32]) -> f64 {
    if clusters.is_empty() {
        return 0.0;
    }
    let mut table: BTreeMap<usize, BTreeMap<u32, usize>> = BTreeMap::new();
    for (c, l) in clusters.iter().zip(labels) {
        *table.entry(*c).or_default().entry(*l).or_default() += 1;
    }
    let hits: usize = table
        .values()
        .map(|m| m.values().copied().max().unwrap_or(0))
        .sum();
    hits as f64 / clusters.len() as f64
}

/// Majority label per cluster, ties to the smaller label.
pub fn majority_labels(clusters: &[usize], labels: &[u32]) -> BTreeMap<usize, u32> {
    let mut table: BTreeMap<usize, BTreeMap<u32, usize>> = BTreeMap::new();
    for (c, l) in clusters.iter().zip(labels) {
        *table.entry(*c).or_default().entry(*l).or_default() += 1;
    }
    table
        .into_iter()
        .map(|(c, m)| {
            let best = m
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(l, _)| *l)
                .unwrap();
            (c, best)
        })
        .collect()
}
