use serde::{Deserialize, Serialize};

use crate::error::{DsdpError, Result};

/// Linear-beta DDPM schedule. Arrays are indexed by `t` in `0..=T`; index 0
/// holds the noiseless boundary (`alpha_bar[0] = 1`, `beta[0] = 0`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// Posterior standard deviation; `sigma[1] = 0`.
    pub sigma: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_min, self.beta_max)
    }
}

pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 || !(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0) {
        return Err(DsdpError::Config(format!(
            "schedule needs T >= 1 and 0 < beta_min <= beta_max < 1, got T={steps}, [{beta_min}, {beta_max}]"
        )));
    }
    let mut beta = vec![0.0; steps + 1];
    for (t, b) in beta.iter_mut().enumerate().skip(1) {
        *b = if steps == 1 {
            beta_min
        } else {
            beta_min + (beta_max - beta_min) * (t - 1) as f64 / (steps - 1) as f64
        };
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = vec![1.0; steps + 1];
    for t in 1..=steps {
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
    }
    let mut sigma = vec![0.0; steps + 1];
    for t in 2..=steps {
        sigma[t] = (beta[t] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t])).sqrt();
    }
    Ok(NoiseSchedule {
        steps,
        beta_min,
        beta_max,
        beta,
        alpha,
        alpha_bar,
        sigma,
    })
}

impl NoiseSchedule {
    pub fn config(&self) -> ScheduleConfig {
        ScheduleConfig {
            steps: self.steps,
            beta_min: self.beta_min,
            beta_max: self.beta_max,
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(DsdpError::Precondition(format!(
                "diffusion step {t} outside 1..={}",
                self.steps
            )));
        }
        Ok(())
    }

    /// `√ᾱ_t·a + √(1−ᾱ_t)·eps`.
    pub fn forward_noise(&self, a: f64, t: usize, eps: f64) -> Result<f64> {
        self.check_t(t)?;
        Ok(forward_noise_with(self.alpha_bar[t], a, eps))
    }

    /// One reverse step from `a_t` given the predicted noise and a standard
    /// normal draw `z` (ignored at `t = 1`).
    pub fn reverse_step(&self, a_t: f64, t: usize, eps_hat: f64, z: f64) -> Result<f64> {
        self.check_t(t)?;
        let mean = (a_t - (1.0 - self.alpha[t]) / (1.0 - self.alpha_bar[t]).sqrt() * eps_hat)
            / self.alpha[t].sqrt();
        Ok(if t > 1 {
            mean + self.sigma[t] * z
        } else {
            mean
        })
    }
}

pub fn forward_noise_with(alpha_bar: f64, a: f64, eps: f64) -> f64 {
    alpha_bar.sqrt() * a + (1.0 - alpha_bar).sqrt() * eps
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_and_monotone() {
        let s = make_schedule(50, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar[0], 1.0);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(s.sigma[1], 0.0);
        assert!((s.beta[50] - 0.02).abs() < 1e-15);
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.1, 0.01).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn noise_limits() {
        assert_eq!(forward_noise_with(1.0, 0.7, 3.0), 0.7);
        assert_eq!(forward_noise_with(0.0, 0.7, 3.0), 3.0);
        assert!((forward_noise_with(0.25, 1.0, 0.5) - 0.9330127).abs() < 1e-6);
        let s = make_schedule(5, 1e-3, 0.01).unwrap();
        assert!(s.forward_noise(0.0, 0, 0.0).is_err());
        assert!(s.forward_noise(0.0, 6, 0.0).is_err());
    }

    #[test]
    fn single_step_reverse_inverts_forward() {
        let s = make_schedule(1, 0.3, 0.3).unwrap();
        let (a, eps) = (0.42, -1.3);
        let a1 = s.forward_noise(a, 1, eps).unwrap();
        let back = s.reverse_step(a1, 1, eps, 123.0).unwrap();
        assert!((back - a).abs() < 1e-12);
    }
}
