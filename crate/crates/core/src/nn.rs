//! Small neural-net building blocks on top of the tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Parameter, Tape, Tensor};

/// Forward-pass context: a tape plus a flag deciding whether parameters are
/// mounted as tracked leaves (training) or plain constants (frozen
/// inference, which records nothing and is safe to run in parallel).
pub struct Graph {
    pub tape: Tape,
    pub trainable: bool,
}

impl Graph {
    pub fn trainable() -> Graph {
        Graph { tape: Tape::new(), trainable: true }
    }

    pub fn frozen() -> Graph {
        Graph { tape: Tape::new(), trainable: false }
    }

    pub fn param(&mut self, p: &Parameter) -> Tensor {
        if self.trainable {
            self.tape.param(p)
        } else {
            p.value()
        }
    }
}

/// Fully connected layer, weights `[in, out]`, bias `[out]`.
/// Initialized uniform(−k, k) with k = 1/sqrt(fan_in).
#[derive(Clone)]
pub struct Linear {
    pub w: Parameter,
    pub b: Parameter,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Linear {
        let k = 1.0 / (in_dim as f64).sqrt();
        let w: Vec<f64> = (0..in_dim * out_dim).map(|_| rng.gen_range(-k..k)).collect();
        let b: Vec<f64> = (0..out_dim).map(|_| rng.gen_range(-k..k)).collect();
        Linear {
            w: Parameter::new(format!("{name}.w"), &[in_dim, out_dim], w),
            b: Parameter::new(format!("{name}.b"), &[out_dim], b),
            in_dim,
            out_dim,
        }
    }

    /// `x: [B, in] → [B, out]`
    pub fn forward(&self, g: &mut Graph, x: &Tensor) -> Result<Tensor> {
        let w = g.param(&self.w);
        let b = g.param(&self.b);
        let y = g.tape.matmul(x, &w)?;
        g.tape.add(&y, &b)
    }

    pub fn params(&self) -> Vec<Parameter> {
        vec![self.w.clone(), self.b.clone()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_is_within_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let l = Linear::new("t", 16, 8, &mut rng);
        let k = 1.0 / 4.0;
        assert!(l.w.data_clone().iter().all(|v| v.abs() <= k));
        assert!(l.b.data_clone().iter().all(|v| v.abs() <= k));
    }

    #[test]
    fn frozen_forward_records_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let l = Linear::new("t", 4, 2, &mut rng);
        let x = Tensor::zeros(&[3, 4]);
        let mut g = Graph::frozen();
        let y = l.forward(&mut g, &x).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert!(g.tape.is_empty());
        assert!(!y.requires_grad());
    }

    #[test]
    fn trainable_and_frozen_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = Linear::new("t", 5, 3, &mut rng);
        let x = Tensor::from_vec((0..10).map(|i| i as f64 * 0.3 - 1.0).collect(), &[2, 5]).unwrap();
        let mut gt = Graph::trainable();
        let yt = l.forward(&mut gt, &x).unwrap();
        let mut gf = Graph::frozen();
        let yf = l.forward(&mut gf, &x).unwrap();
        assert_eq!(
            yt.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            yf.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
