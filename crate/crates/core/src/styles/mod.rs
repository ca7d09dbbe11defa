//! Contrastive driving-style learning with a lookup-free quantizer, and the
//! index prior used to pick a style at evaluation time.

mod prior;
mod repr;

use numkit::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{DsdpError, Result};

pub use prior::{
    prior_examples, prior_input, train_prior, PriorConfig, PriorNet, PriorTrainLog, StylePrior,
};
pub use repr::{ema_update, info_nce_eval, train_contrastive, ContrastiveLog, ReprFunction};

/// Sign pattern of a quantized latent and its integer index.
///
/// `index = Σ_i 2^i · [bits[i] = +1]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StyleCode {
    pub bits: Vec<i8>,
    pub index: u32,
}

impl StyleCode {
    pub fn from_bits(bits: Vec<i8>) -> Result<Self> {
        if bits.len() > 31 || bits.iter().any(|b| *b != 1 && *b != -1) {
            return Err(DsdpError::Precondition(format!(
                "bits must be ±1 and at most 31 long, got {bits:?}"
            )));
        }
        let index = bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b == 1)
            .map(|(i, _)| 1u32 << i)
            .sum();
        Ok(Self { bits, index })
    }

    pub fn from_index(index: u32, n_bits: usize) -> Result<Self> {
        if n_bits > 31 || (index >> n_bits) != 0 {
            return Err(DsdpError::Precondition(format!(
                "index {index} does not fit in {n_bits} bits"
            )));
        }
        let bits = (0..n_bits)
            .map(|i| if index >> i & 1 == 1 { 1 } else { -1 })
            .collect();
        Ok(Self { bits, index })
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|b| f64::from(*b)).collect()
    }
}

/// Dimension-wise sign quantization; `z_i ≤ 0 → −1`.
pub fn lfq_quantize(z: &[f64]) -> StyleCode {
    let bits = z.iter().map(|v| if *v > 0.0 { 1 } else { -1 }).collect();
    StyleCode::from_bits(bits).expect("sign pattern")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContrastiveLoss {
    InfoNce,
    Triplet { margin: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    /// Sub-trajectory length.
    pub l_c: usize,
    /// Codebook size; a power of two.
    pub codebook_size: usize,
    pub channels: usize,
    pub style_dim: usize,
    pub decoder_hidden: usize,
    pub tau: f64,
    pub lambda_e: f64,
    pub ema_decay: f64,
    pub passes: usize,
    pub batch: usize,
    pub lr: f64,
    pub loss: ContrastiveLoss,
    /// Weight of an auxiliary head that reconstructs the window's actions from the style; 0 disables it.
    pub action_loss_weight: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            l_c: 5,
            codebook_size: 256,
            channels: 16,
            style_dim: 64,
            decoder_hidden: 128,
            tau: 0.1,
            lambda_e: 0.1,
            ema_decay: 0.99,
            passes: 500,
            batch: 128,
            lr: 1e-3,
            loss: ContrastiveLoss::InfoNce,
            action_loss_weight: 0.0,
        }
    }
}

impl ContrastiveConfig {
    pub fn code_bits(&self) -> usize {
        self.codebook_size.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DsdpError::Config(m));
        if !self.codebook_size.is_power_of_two()
            || self.codebook_size < 2
            || self.codebook_size > 1 << 30
        {
            return bad(format!(
                "codebook size must be a power of two >= 2, got {}",
                self.codebook_size
            ));
        }
        if self.l_c == 0 || self.channels == 0 || self.style_dim == 0 || self.decoder_hidden == 0 {
            return bad("L_c, channels, style_dim and decoder_hidden must be positive".into());
        }
        if !(self.tau > 0.0)
            || !(0.0..=1.0).contains(&self.ema_decay)
            || !(self.lr > 0.0)
            || self.lambda_e < 0.0
        {
            return bad(format!("invalid contrastive hyperparameters {self:?}"));
        }
        if self.batch < 2 {
            return bad("contrastive batch needs at least 2 trajectories".into());
        }
        if let ContrastiveLoss::Triplet { margin } = self.loss {
            if !(margin >= 0.0) {
                return bad("triplet margin must be non-negative".into());
            }
        }
        Ok(())
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Mean over anchors of `−log softmax_j(cos(a_i, p_j)/τ)[i]`; `p_j` for `j ≠ i` are the negatives.
pub fn info_nce_loss(anchors: &[Vec<f64>], positives: &[Vec<f64>], tau: f64) -> Result<f64> {
    let n = anchors.len();
    if n < 2 || positives.len() != n {
        return Err(DsdpError::Precondition(format!(
            "InfoNCE needs N >= 2 matched anchors and positives, got {n} and {}",
            positives.len()
        )));
    }
    let mut total = 0.0;
    for (i, a) in anchors.iter().enumerate() {
        let s: Vec<f64> = positives.iter().map(|p| cosine(a, p) / tau).collect();
        let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + s.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lse - s[i];
    }
    Ok(total / n as f64)
}

fn bern_entropy(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
}

/// Mean per-sample code entropy minus the entropy of the batch-mean code
/// distribution, with `p = sigmoid(2z)` per dimension.
pub fn entropy_penalty(z: &[Vec<f64>]) -> Result<f64> {
    let n = z.len();
    if n < 2 {
        return Err(DsdpError::Precondition(
            "entropy penalty needs a batch of at least 2".into(),
        ));
    }
    let d = z[0].len();
    let sig = |x: f64| 1.0 / (1.0 + (-2.0 * x).exp());
    let per_sample: f64 = z
        .iter()
        .map(|r| r.iter().map(|v| bern_entropy(sig(*v))).sum::<f64>())
        .sum::<f64>()
        / n as f64;
    let mean_p: Vec<f64> = (0..d)
        .map(|j| z.iter().map(|r| sig(r[j])).sum::<f64>() / n as f64)
        .collect();
    Ok(per_sample - mean_p.iter().map(|p| bern_entropy(*p)).sum::<f64>())
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean of `max(0, d(a,p) − d(a,n) + margin)` with one negative per anchor.
pub fn triplet_loss(
    anchors: &[Vec<f64>],
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    margin: f64,
) -> Result<f64> {
    let n = anchors.len();
    if n == 0 || positives.len() != n || negatives.len() != n {
        return Err(DsdpError::Precondition(
            "triplet loss needs one positive and one negative per anchor".into(),
        ));
    }
    Ok(anchors
        .iter()
        .zip(positives)
        .zip(negatives)
        .map(|((a, p), q)| (euclid(a, p) - euclid(a, q) + margin).max(0.0))
        .sum::<f64>()
        / n as f64)
}

/// Tape form of [`info_nce_loss`]; `positives` are constants `[N, D]`.
pub(crate) fn info_nce_tape(
    tape: &mut Tape<'_>,
    anchors: Var,
    positives: &Tensor,
    tau: f64,
) -> Result<Var> {
    let n = positives.rows();
    let a = tape.l2_normalize_rows(anchors)?;
    let p = tape.input(positives.clone());
    let p = tape.l2_normalize_rows(p)?;
    let pt = tape.transpose(p)?;
    let sim = tape.matmul(a, pt)?;
    let logits = tape.scale(sim, 1.0 / tau)?;
    let targets: Vec<usize> = (0..n).collect();
    Ok(tape.cross_entropy(logits, &targets)?)
}

/// Tape form of [`entropy_penalty`] on pre-quantization latents `[N, d]`.
pub(crate) fn entropy_penalty_tape(tape: &mut Tape<'_>, z: Var) -> Result<Var> {
    let n = tape.value(z).rows() as f64;
    let z2 = tape.scale(z, 2.0)?;
    let h = tape.binary_entropy_logits(z2)?;
    let h_sum = tape.sum_all(h)?;
    let per_sample = tape.scale(h_sum, 1.0 / n)?;
    let p = tape.sigmoid(z2)?;
    let p_mean = tape.mean_rows(p)?;
    let hm = tape.binary_entropy_prob(p_mean)?;
    let hm = tape.sum_all(hm)?;
    Ok(tape.sub(per_sample, hm)?)
}

/// Tape form of [`triplet_loss`]; `positives` and `negatives` are constants `[N, D]`.
pub(crate) fn triplet_tape(
    tape: &mut Tape<'_>,
    anchors: Var,
    positives: &Tensor,
    negatives: &Tensor,
    margin: f64,
) -> Result<Var> {
    let dist = |tape: &mut Tape<'_>, other: &Tensor| -> Result<Var> {
        let o = tape.input(other.clone());
        let d = tape.sub(anchors, o)?;
        let d = tape.square(d)?;
        let d = tape.sum_cols(d)?;
        // Offset keeps the square root differentiable at coincident points.
        let d = tape.add_scalar(d, 1e-12)?;
        Ok(tape.sqrt(d)?)
    };
    let dp = dist(tape, positives)?;
    let dn = dist(tape, negatives)?;
    let diff = tape.sub(dp, dn)?;
    let hinge = tape.add_scalar(diff, margin)?;
    let hinge = tape.relu(hinge)?;
    Ok(tape.mean_all(hinge)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_index() {
        let c = lfq_quantize(&[-0.5, 0.2, -1.0, 3.0, -2.0, -2.0, -0.1, 0.4]);
        assert_eq!(c.bits, vec![-1, 1, -1, 1, -1, -1, -1, 1]);
        assert_eq!(c.index, 138);
        assert_eq!(lfq_quantize(&[0.0, 1.0]).bits, vec![-1, 1]);
        assert_eq!(lfq_quantize(&[-1.0; 8]).index, 0);
    }

    #[test]
    fn index_bijection_exhaustive() {
        for bits in 1..=8 {
            for i in 0..1u32 << bits {
                let c = StyleCode::from_index(i, bits).unwrap();
                assert_eq!(StyleCode::from_bits(c.bits.clone()).unwrap().index, i);
                assert_eq!(lfq_quantize(&c.as_f64()), c);
            }
        }
        assert!(StyleCode::from_index(256, 8).is_err());
    }

    #[test]
    fn entropy_worked_value() {
        let p = entropy_penalty(&[vec![1.0], vec![-1.0]]).unwrap();
        let q = 1.0 / (1.0 + (-2.0f64).exp());
        let h = -q * q.ln() - (1.0 - q) * (1.0 - q).ln();
        assert!((q - 0.8808).abs() < 1e-4);
        assert!((p - (h - 2f64.ln())).abs() < 1e-12);
        // The per-sample entropy is 0.36533 nats, so the penalty is -0.32781.
        assert!((p - (-0.3278)).abs() < 1e-4, "{p}");
    }

    #[test]
    fn info_nce_uniform_and_limit() {
        let a = vec![vec![1.0, 0.0]; 4];
        assert!((info_nce_loss(&a, &a, 0.1).unwrap() - 4f64.ln()).abs() < 1e-12);
        let e = |i: usize| {
            let mut v = vec![0.0; 3];
            v[i] = 1.0;
            v
        };
        let a: Vec<_> = (0..3).map(e).collect();
        assert!(info_nce_loss(&a, &a, 1e-3).unwrap() < 1e-12);
        assert!(info_nce_loss(&a[..1], &a[..1], 0.1).is_err());
    }

    #[test]
    fn triplet_cases() {
        let z = vec![vec![0.0, 0.0]];
        let far = vec![vec![3.0, 4.0]];
        assert_eq!(triplet_loss(&z, &z, &far, 1.0).unwrap(), 0.0);
        assert_eq!(triplet_loss(&z, &z, &z, 0.5).unwrap(), 0.5);
        // d(a,p) = 5, d(a,n) = 1 → 5 − 1 + 0.2
        let p = vec![vec![3.0, 4.0]];
        let n = vec![vec![1.0, 0.0]];
        assert!((triplet_loss(&z, &p, &n, 0.2).unwrap() - 4.2).abs() < 1e-12);
    }

    #[test]
    fn tape_forms_match_scalar_forms() {
        let a = vec![
            vec![0.3, -1.2, 0.5],
            vec![1.0, 0.1, -0.4],
            vec![-0.7, 0.2, 0.9],
        ];
        let p = vec![
            vec![0.2, -1.0, 0.7],
            vec![0.9, 0.3, -0.1],
            vec![0.5, -0.2, 0.3],
        ];
        let q = vec![
            vec![1.0, 1.0, 1.0],
            vec![-0.3, 0.2, 0.0],
            vec![0.5, 0.5, -0.5],
        ];
        let t = |r: &Vec<Vec<f64>>| Tensor::from_rows(r).unwrap();
        let mut tape = Tape::detached();
        let av = tape.input(t(&a));
        let l = info_nce_tape(&mut tape, av, &t(&p), 0.1).unwrap();
        let (got, want) = (tape.value(l).item(), info_nce_loss(&a, &p, 0.1).unwrap());
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        let e = entropy_penalty_tape(&mut tape, av).unwrap();
        assert!((tape.value(e).item() - entropy_penalty(&a).unwrap()).abs() < 1e-9);
        let tr = triplet_tape(&mut tape, av, &t(&p), &t(&q), 0.3).unwrap();
        assert!((tape.value(tr).item() - triplet_loss(&a, &p, &q, 0.3).unwrap()).abs() < 1e-9);
    }
}
