//! Chunked behavior-cloning action head and the loss stack.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Graph, Linear};
use crate::tensor::Tensor;

pub const ACTION_DIM: usize = 6;
pub const DEFAULT_CHUNK: usize = 24;
/// Per-channel target scaling for training: position deltas (≤ the 0.02
/// step cap) are stretched to ±1 so the L1 loss weighs them on par with
/// the 0/1 grip channels. Predictions are divided back at inference.
pub const ACTION_SCALE: [f64; 6] = [50.0, 50.0, 1.0, 50.0, 50.0, 1.0];
pub const POLICY_WIDTH: usize = 128;
const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub score: f64,
    pub policy: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights { score: 1.0, policy: 1.0 }
    }
}

/// Action head: fused feature ⧺ proprioception through three hidden
/// linear+ReLU layers into a K×6 action chunk. The first layer's weight
/// matrix is kept in two blocks (visual, proprio) so compute accounting can
/// attribute its cost per input source; the math is the same as one
/// concatenated layer.
pub struct PolicyNet {
    pub fc1_visual: Linear,
    pub fc1_proprio: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
    pub out: Linear,
    pub chunk: usize,
    pub fused_width: usize,
}

impl PolicyNet {
    pub fn new(fused_width: usize, chunk: usize, rng: &mut ChaCha8Rng) -> PolicyNet {
        // one fan-in for the split first layer so it initializes like the
        // equivalent concatenated layer
        let fan_in = fused_width + ACTION_DIM;
        let k = 1.0 / (fan_in as f64).sqrt();
        use rand::Rng;
        let mk = |name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng, with_bias_range: bool| {
            let w: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-k..k)).collect();
            let b: Vec<f64> = if with_bias_range {
                (0..cols).map(|_| rng.gen_range(-k..k)).collect()
            } else {
                vec![0.0; cols]
            };
            Linear {
                w: crate::tensor::Parameter::new(format!("{name}.w"), &[rows, cols], w),
                b: crate::tensor::Parameter::new(format!("{name}.b"), &[cols], b),
                in_dim: rows,
                out_dim: cols,
            }
        };
        let fc1_visual = mk("policy.fc1.visual", fused_width, POLICY_WIDTH, rng, true);
        let fc1_proprio = mk("policy.fc1.proprio", ACTION_DIM, POLICY_WIDTH, rng, false);
        let fc2 = Linear::new("policy.fc2", POLICY_WIDTH, POLICY_WIDTH, rng);
        let fc3 = Linear::new("policy.fc3", POLICY_WIDTH, POLICY_WIDTH, rng);
        let out = Linear::new("policy.out", POLICY_WIDTH, chunk * ACTION_DIM, rng);
        PolicyNet { fc1_visual, fc1_proprio, fc2, fc3, out, chunk, fused_width }
    }

    /// `fused: [B, W]`, `proprio: [B, 6]` → `[B, chunk·6]`.
    pub fn forward(&self, g: &mut Graph, fused: &Tensor, proprio: &Tensor) -> Result<Tensor> {
        if fused.shape().len() != 2 || fused.shape()[1] != self.fused_width {
            return Err(Error::ShapeMismatch {
                op: "policy.forward",
                lhs: fused.shape().to_vec(),
                rhs: vec![fused.shape().first().copied().unwrap_or(0), self.fused_width],
            });
        }
        let v = self.fc1_visual.forward(g, fused)?;
        let p = self.fc1_proprio.forward(g, proprio)?;
        let sum = g.tape.add(&v, &p)?;
        let h1 = g.tape.relu(&sum);
        let a2 = self.fc2.forward(g, &h1)?;
        let h2 = g.tape.relu(&a2);
        let a3 = self.fc3.forward(g, &h2)?;
        let h3 = g.tape.relu(&a3);
        self.out.forward(g, &h3)
    }

    pub fn params(&self) -> Vec<crate::tensor::Parameter> {
        let mut p = self.fc1_visual.params();
        p.extend(self.fc1_proprio.params());
        p.extend(self.fc2.params());
        p.extend(self.fc3.params());
        p.extend(self.out.params());
        p
    }
}

/// Mean absolute error over all chunk entries.
pub fn policy_loss(g: &mut Graph, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "policy_loss",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let diff = g.tape.sub(pred, target)?;
    let a = g.tape.abs(&diff);
    let axes: Vec<usize> = (0..a.shape().len()).collect();
    g.tape.mean_axes(&a, &axes)
}

/// Binary cross-entropy against the multi-hot importance label, averaged
/// over views (and batch). Scores touching 0/1 are clamped to
/// [1e-7, 1−1e-7] before the logs.
pub fn score_loss(g: &mut Graph, s: &Tensor, labels: &Tensor) -> Result<Tensor> {
    if s.shape() != labels.shape() {
        return Err(Error::ShapeMismatch {
            op: "score_loss",
            lhs: s.shape().to_vec(),
            rhs: labels.shape().to_vec(),
        });
    }
    let sc = g.tape.clamp(s, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let log_s = g.tape.log(&sc);
    let neg = g.tape.scalar_mul(&sc, -1.0);
    let one_minus = g.tape.scalar_add(&neg, 1.0);
    let log_one_minus = g.tape.log(&one_minus);
    let lneg = g.tape.scalar_mul(labels, -1.0);
    let one_minus_labels = g.tape.scalar_add(&lneg, 1.0);
    let pos_term = g.tape.mul(labels, &log_s)?;
    let neg_term = g.tape.mul(&one_minus_labels, &log_one_minus)?;
    let sum = g.tape.add(&pos_term, &neg_term)?;
    let axes: Vec<usize> = (0..sum.shape().len()).collect();
    let mean = g.tape.mean_axes(&sum, &axes)?;
    Ok(g.tape.scalar_mul(&mean, -1.0))
}

/// L = λ₁·L_s + λ₂·L_p on one tape, so a single backward drives both paths.
pub fn total_loss(g: &mut Graph, ls: &Tensor, lp: &Tensor, w: LossWeights) -> Result<Tensor> {
    let a = g.tape.scalar_mul(ls, w.score);
    let b = g.tape.scalar_mul(lp, w.policy);
    g.tape.add(&a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn chunk_shape_default() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = PolicyNet::new(32, DEFAULT_CHUNK, &mut rng);
        let mut g = Graph::frozen();
        let fused = Tensor::zeros(&[1, 32]);
        let proprio = Tensor::zeros(&[1, 6]);
        let out = net.forward(&mut g, &fused, &proprio).unwrap();
        assert_eq!(out.shape(), &[1, 24 * 6]);
    }

    #[test]
    fn zero_weights_zero_chunk() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = PolicyNet::new(8, 4, &mut rng);
        for p in net.params() {
            p.set_data(vec![0.0; p.numel()]);
        }
        let mut g = Graph::frozen();
        let out = net
            .forward(&mut g, &Tensor::full(&[2, 8], 0.7), &Tensor::full(&[2, 6], -0.3))
            .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = PolicyNet::new(32, 4, &mut rng);
        let mut g = Graph::frozen();
        let err = net.forward(&mut g, &Tensor::zeros(&[1, 96]), &Tensor::zeros(&[1, 6]));
        assert!(err.is_err());
    }

    #[test]
    fn l1_loss_trivial_cases() {
        let mut g = Graph::frozen();
        let a = Tensor::from_vec(vec![0.5, -0.5, 1.0, 0.0], &[2, 2]).unwrap();
        let same = policy_loss(&mut g, &a, &a).unwrap();
        assert_eq!(same.item(), 0.0);
        let shifted = Tensor::from_vec(vec![1.0, 0.0, 1.5, 0.5], &[2, 2]).unwrap();
        let l = policy_loss(&mut g, &shifted, &a).unwrap();
        assert!((l.item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn l1_loss_matches_loop_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 24 * 6;
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let expect: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64;
        let mut g = Graph::frozen();
        let l = policy_loss(
            &mut g,
            &Tensor::from_vec(a, &[24, 6]).unwrap(),
            &Tensor::from_vec(b, &[24, 6]).unwrap(),
        )
        .unwrap();
        assert!((l.item() - expect).abs() < 1e-12);
    }

    #[test]
    fn bce_symmetric_point_is_ln2() {
        let mut g = Graph::frozen();
        let s = Tensor::from_vec(vec![0.5, 0.5, 0.5], &[1, 3]).unwrap();
        for labels in [[1.0, 0.0, 1.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]] {
            let l = Tensor::from_vec(labels.to_vec(), &[1, 3]).unwrap();
            let loss = score_loss(&mut g, &s, &l).unwrap();
            assert!((loss.item() - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_perfect_prediction_is_tiny() {
        let mut g = Graph::frozen();
        let s = Tensor::from_vec(vec![1.0 - 1e-7, 1e-7, 1e-7], &[1, 3]).unwrap();
        let l = Tensor::from_vec(vec![1.0, 0.0, 0.0], &[1, 3]).unwrap();
        let loss = score_loss(&mut g, &s, &l).unwrap();
        assert!(loss.item() <= 1e-6, "{}", loss.item());
    }

    #[test]
    fn bce_hand_computed_case() {
        // s=[0.9,0.2,0.7], ŝ=[1,0,1] → −(ln0.9 + ln0.8 + ln0.7)/3
        let expect = -(0.9f64.ln() + 0.8f64.ln() + 0.7f64.ln()) / 3.0;
        let mut g = Graph::frozen();
        let s = Tensor::from_vec(vec![0.9, 0.2, 0.7], &[1, 3]).unwrap();
        let l = Tensor::from_vec(vec![1.0, 0.0, 1.0], &[1, 3]).unwrap();
        let loss = score_loss(&mut g, &s, &l).unwrap();
        assert!((loss.item() - expect).abs() < 1e-12);
        // the derived value, for the record
        assert!((expect - 0.2283930).abs() < 1e-7);
    }

    #[test]
    fn total_loss_weighted_sum() {
        let mut g = Graph::frozen();
        let ls = Tensor::scalar(0.2);
        let lp = Tensor::scalar(0.3);
        let l = total_loss(&mut g, &ls, &lp, LossWeights { score: 1.0, policy: 1.0 }).unwrap();
        assert!((l.item() - 0.5).abs() < 1e-15);
        let l0 = total_loss(&mut g, &ls, &lp, LossWeights { score: 0.0, policy: 2.0 }).unwrap();
        assert!((l0.item() - 0.6).abs() < 1e-15);
    }
}
