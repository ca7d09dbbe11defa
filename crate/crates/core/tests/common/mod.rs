#![allow(dead_code)]

use dsdp::datasets::Step;
use dsdp::policy::{Episode, Policy, StepContext};
use dsdp::seeding::SimRng;
use dsdp::Result;
use rand::Rng;

/// Fixed acceleration in m/s², whatever the state.
pub struct ConstantPolicy(pub f64);

struct Constant(f64);

impl Episode for Constant {
    fn accel(&mut self, _: &StepContext<'_>, _: &mut SimRng) -> Result<f64> {
        Ok(self.0)
    }
}

impl Policy for ConstantPolicy {
    fn name(&self) -> String {
        format!("constant_{}", self.0)
    }

    fn warmup_len(&self) -> usize {
        0
    }

    fn begin<'p>(&'p self, _: &[Step], _: &mut SimRng) -> Result<Box<dyn Episode + 'p>> {
        Ok(Box::new(Constant(self.0)))
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// k-th smallest distance from `cloud[i]` to the other points, by full sort.
fn oracle_radius(cloud: &[Vec<f64>], i: usize, k: usize) -> f64 {
    let mut d: Vec<f64> = (0..cloud.len())
        .filter(|&j| j != i)
        .map(|j| dist(&cloud[i], &cloud[j]))
        .collect();
    d.sort_by(f64::total_cmp);
    d[k - 1]
}

/// Density and coverage by direct double loops over every (fake, real) pair.
pub fn oracle_density_coverage(real: &[Vec<f64>], fake: &[Vec<f64>], k: usize) -> (f64, f64) {
    let radii: Vec<f64> = (0..real.len()).map(|i| oracle_radius(real, i, k)).collect();
    let within = |f: &Vec<f64>, i: usize| dist(f, &real[i]) <= radii[i];
    let mut hits = 0usize;
    for f in fake {
        for i in 0..real.len() {
            hits += within(f, i) as usize;
        }
    }
    let mut covered = 0usize;
    for i in 0..real.len() {
        covered += fake.iter().any(|f| within(f, i)) as usize;
    }
    (
        hits as f64 / (k * fake.len()) as f64,
        covered as f64 / real.len() as f64,
    )
}

pub fn cloud(rng: &mut SimRng, n: usize, dim: usize, shift: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random::<f64>() + shift).collect())
        .collect()
}
