use crate::error::{DsdpError, Result};
use crate::par;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_cloud(cloud: &[Vec<f64>], k: usize, what: &str) -> Result<usize> {
    if k == 0 || cloud.len() <= k {
        return Err(DsdpError::Precondition(format!(
            "{what} cloud needs more than k = {k} points, has {}",
            cloud.len()
        )));
    }
    let d = cloud[0].len();
    if cloud.iter().any(|p| p.len() != d) {
        return Err(DsdpError::Precondition(format!(
            "{what} cloud has mixed dimensions"
        )));
    }
    Ok(d)
}

/// Distance from `cloud[i]` to its `k`-th nearest other point.
pub fn knn_radius(cloud: &[Vec<f64>], i: usize, k: usize) -> Result<f64> {
    check_cloud(cloud, k, "k-NN")?;
    if i >= cloud.len() {
        return Err(DsdpError::Precondition(format!("point {i} out of range")));
    }
    Ok(kth_distance(cloud, i, k))
}

fn kth_distance(cloud: &[Vec<f64>], i: usize, k: usize) -> f64 {
    // Bounded insertion keeps the k smallest distances.
    let mut best: Vec<f64> = Vec::with_capacity(k + 1);
    for (j, q) in cloud.iter().enumerate() {
        if j == i {
            continue;
        }
        let d = dist(&cloud[i], q);
        if best.len() < k || d < best[k - 1] {
            let pos = best.partition_point(|b| *b <= d);
            best.insert(pos, d);
            best.truncate(k);
        }
    }
    best[k - 1]
}

pub fn knn_radii(cloud: &[Vec<f64>], k: usize) -> Result<Vec<f64>> {
    check_cloud(cloud, k, "k-NN")?;
    Ok(par::map_indexed(cloud.len(), |i| kth_distance(cloud, i, k)))
}

fn check_pair(real: &[Vec<f64>], fake: &[Vec<f64>], k: usize) -> Result<()> {
    let d = check_cloud(real, k, "real")?;
    if fake.is_empty() {
        return Err(DsdpError::Precondition("fake cloud is empty".into()));
    }
    if fake.iter().any(|p| p.len() != d) {
        return Err(DsdpError::Precondition(
            "fake and real clouds differ in dimension".into(),
        ));
    }
    Ok(())
}

/// Density and coverage of `fake` against the k-NN balls of `real`.
pub fn density_coverage(real: &[Vec<f64>], fake: &[Vec<f64>], k: usize) -> Result<(f64, f64)> {
    check_pair(real, fake, k)?;
    let radii = knn_radii(real, k)?;
    let inside = |i: usize, f: &[f64]| dist(f, &real[i]) <= radii[i];
    let hits: usize = fake
        .iter()
        .map(|f| (0..real.len()).filter(|&i| inside(i, f)).count())
        .sum();
    let covered = (0..real.len())
        .filter(|&i| fake.iter().any(|f| inside(i, f)))
        .count();
    Ok((
        hits as f64 / (k as f64 * fake.len() as f64),
        covered as f64 / real.len() as f64,
    ))
}

/// `(1/(k·|fake|)) Σ_j Σ_i [fake_j inside ball_i]`.
pub fn density(real: &[Vec<f64>], fake: &[Vec<f64>], k: usize) -> Result<f64> {
    density_coverage(real, fake, k).map(|(d, _)| d)
}

/// Fraction of real k-NN balls containing at least one fake point.
pub fn coverage(real: &[Vec<f64>], fake: &[Vec<f64>], k: usize) -> Result<f64> {
    density_coverage(real, fake, k).map(|(_, c)| c)
}

/// Harmonic mean of density (clipped to 1) and coverage.
pub fn f1(density: f64, coverage: f64) -> f64 {
    let d = density.clamp(0.0, 1.0);
    let c = coverage.clamp(0.0, 1.0);
    if d + c == 0.0 {
        0.0
    } else {
        2.0 * d * c / (d + c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|x| vec![*x]).collect()
    }

    #[test]
    fn radius_cases() {
        assert_eq!(knn_radius(&pts(&[0.0, 1.0, 2.0]), 0, 1).unwrap(), 1.0);
        assert_eq!(knn_radius(&pts(&[0.5, 0.5, 3.0]), 0, 1).unwrap(), 0.0);
        assert!(knn_radius(&pts(&[0.0]), 0, 1).is_err());
    }

    #[test]
    fn two_ball_cases() {
        let real = pts(&[0.0, 1.0]);
        assert_eq!(density(&real, &pts(&[100.0]), 1).unwrap(), 0.0);
        assert_eq!(density(&real, &pts(&[0.1]), 1).unwrap(), 2.0);
        assert_eq!(coverage(&real, &pts(&[0.1]), 1).unwrap(), 1.0);
        assert_eq!(coverage(&real, &pts(&[50.0]), 1).unwrap(), 0.0);
    }

    #[test]
    fn f1_cases() {
        assert_eq!(f1(1.0, 1.0), 1.0);
        assert_eq!(f1(0.0, 0.7), 0.0);
        assert_eq!(f1(0.0, 0.0), 0.0);
        assert!((f1(2.0, 0.5) - 2.0 / 3.0).abs() < 1e-12);
    }
}
