//! Score-weighted multi-view feature fusion and its ablation variants.
//!
//! The main rule reweights each view's pooled vector by its predicted
//! importance score and sums elementwise. In that path the scores are
//! detached by default, so policy-loss gradients reach the encoders through
//! the feature factors but never the score head; the score loss is what
//! shapes the head. `no_score_loss` keeps the same wiring with live scores
//! and relies on the policy loss alone.

use crate::error::{Error, Result};
use crate::nn::Graph;
use crate::tensor::Tensor;

pub const NUM_VIEWS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionStrategy {
    Bfa,
    Mean,
    BestFeature,
    ReweightConcat,
    NoScoreLoss,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 5] = [
        FusionStrategy::Bfa,
        FusionStrategy::Mean,
        FusionStrategy::BestFeature,
        FusionStrategy::ReweightConcat,
        FusionStrategy::NoScoreLoss,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionStrategy::Bfa => "bfa",
            FusionStrategy::Mean => "mean",
            FusionStrategy::BestFeature => "best",
            FusionStrategy::ReweightConcat => "reweight_concat",
            FusionStrategy::NoScoreLoss => "no_score_loss",
        }
    }

    pub fn needs_scores(&self) -> bool {
        !matches!(self, FusionStrategy::Mean)
    }

    pub fn fused_width(&self, channels: usize) -> usize {
        match self {
            FusionStrategy::ReweightConcat => NUM_VIEWS * channels,
            _ => channels,
        }
    }
}

impl std::fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<FusionStrategy> {
        match s {
            "bfa" => Ok(FusionStrategy::Bfa),
            "mean" => Ok(FusionStrategy::Mean),
            "best" => Ok(FusionStrategy::BestFeature),
            "reweight_concat" => Ok(FusionStrategy::ReweightConcat),
            "no_score_loss" => Ok(FusionStrategy::NoScoreLoss),
            other => Err(Error::Config(format!(
                "unknown fusion strategy {other:?} (expected bfa, mean, best, reweight_concat or no_score_loss)"
            ))),
        }
    }
}

fn check_widths(pooled: &[Tensor; 3], s: Option<&Tensor>) -> Result<()> {
    let c = pooled[0].shape().to_vec();
    for p in pooled.iter() {
        if p.shape() != c {
            return Err(Error::ShapeMismatch { op: "fuse", lhs: c, rhs: p.shape().to_vec() });
        }
    }
    if let Some(s) = s {
        if s.shape().len() != 2 || s.shape()[1] != NUM_VIEWS || s.shape()[0] != c[0] {
            return Err(Error::ShapeMismatch { op: "fuse", lhs: s.shape().to_vec(), rhs: vec![c[0], NUM_VIEWS] });
        }
    }
    Ok(())
}

/// f̂ = Σᵢ sᵢ · pooledᵢ, accumulated in view order. With `detach` the score
/// factor enters as a constant, cutting the policy-loss path to the head.
pub fn fuse_bfa(g: &mut Graph, pooled: &[Tensor; 3], s: &Tensor, detach: bool) -> Result<Tensor> {
    check_widths(pooled, Some(s))?;
    let s_used = if detach { s.detach() } else { s.clone() };
    let mut acc: Option<Tensor> = None;
    for (i, p) in pooled.iter().enumerate() {
        let si = g.tape.slice(&s_used, 1, i, 1)?;
        let term = g.tape.mul(&si, p)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.tape.add(&a, &term)?,
        });
    }
    Ok(acc.unwrap())
}

/// Arithmetic mean of the pooled vectors, computed as the same weighted
/// accumulation as [`fuse_bfa`] with weight 1/N (bitwise-equal on uniform
/// scores by construction).
pub fn fuse_mean(g: &mut Graph, pooled: &[Tensor; 3]) -> Result<Tensor> {
    check_widths(pooled, None)?;
    let w = 1.0 / NUM_VIEWS as f64;
    let mut acc: Option<Tensor> = None;
    for p in pooled.iter() {
        let term = g.tape.scalar_mul(p, w);
        acc = Some(match acc {
            None => term,
            Some(a) => g.tape.add(&a, &term)?,
        });
    }
    Ok(acc.unwrap())
}

/// Pooled vector of the highest-scoring view per sample; ties break to the
/// lowest view index. The selection itself is not differentiated.
pub fn fuse_best(g: &mut Graph, pooled: &[Tensor; 3], s: &Tensor) -> Result<Tensor> {
    check_widths(pooled, Some(s))?;
    let batch = s.shape()[0];
    let mut mask = vec![0.0; batch * NUM_VIEWS];
    for b in 0..batch {
        let row = &s.data()[b * NUM_VIEWS..(b + 1) * NUM_VIEWS];
        let mut best = 0usize;
        for i in 1..NUM_VIEWS {
            if row[i] > row[best] {
                best = i;
            }
        }
        mask[b * NUM_VIEWS + best] = 1.0;
    }
    let mask = Tensor::from_vec(mask, &[batch, NUM_VIEWS])?;
    let mut acc: Option<Tensor> = None;
    for (i, p) in pooled.iter().enumerate() {
        let mi = g.tape.slice(&mask, 1, i, 1)?;
        let term = g.tape.mul(&mi, p)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.tape.add(&a, &term)?,
        });
    }
    Ok(acc.unwrap())
}

/// f̂ = [s₁·p₁ ⧺ … ⧺ s_N·p_N], width N·C.
pub fn fuse_reweight_concat(
    g: &mut Graph,
    pooled: &[Tensor; 3],
    s: &Tensor,
    detach: bool,
) -> Result<Tensor> {
    check_widths(pooled, Some(s))?;
    let s_used = if detach { s.detach() } else { s.clone() };
    let mut parts = Vec::with_capacity(NUM_VIEWS);
    for (i, p) in pooled.iter().enumerate() {
        let si = g.tape.slice(&s_used, 1, i, 1)?;
        parts.push(g.tape.mul(&si, p)?);
    }
    g.tape.concat(&[&parts[0], &parts[1], &parts[2]], 1)
}

/// Plain concatenation of all pooled views (scores forced to one): the
/// baseline the reweighted variants are compared against.
pub fn fuse_concat_ones(g: &mut Graph, pooled: &[Tensor; 3]) -> Result<Tensor> {
    check_widths(pooled, None)?;
    g.tape.concat(&[&pooled[0], &pooled[1], &pooled[2]], 1)
}

/// Route to the strategy's rule. `no_score_loss` shares the weighted-sum
/// wiring but keeps the scores live (its λ₁ is forced to zero by the
/// trainer, so the head is shaped by policy gradients alone).
pub fn strategy_dispatch(
    g: &mut Graph,
    strategy: FusionStrategy,
    pooled: &[Tensor; 3],
    s: Option<&Tensor>,
    detach_scores: bool,
) -> Result<Tensor> {
    if strategy.needs_scores() && s.is_none() {
        return Err(Error::Config(format!("fusion strategy {strategy} requires a score vector")));
    }
    match strategy {
        FusionStrategy::Bfa => fuse_bfa(g, pooled, s.unwrap(), detach_scores),
        FusionStrategy::Mean => fuse_mean(g, pooled),
        FusionStrategy::BestFeature => fuse_best(g, pooled, s.unwrap()),
        FusionStrategy::ReweightConcat => fuse_reweight_concat(g, pooled, s.unwrap(), detach_scores),
        FusionStrategy::NoScoreLoss => fuse_bfa(g, pooled, s.unwrap(), false),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pooled_fixture() -> [Tensor; 3] {
        [
            Tensor::from_vec(vec![1.0, 0.0], &[1, 2]).unwrap(),
            Tensor::from_vec(vec![0.0, 1.0], &[1, 2]).unwrap(),
            Tensor::from_vec(vec![1.0, 1.0], &[1, 2]).unwrap(),
        ]
    }

    #[test]
    fn bfa_hand_computed_weighted_sum() {
        let mut g = Graph::frozen();
        let s = Tensor::from_vec(vec![0.2, 0.9, 0.1], &[1, 3]).unwrap();
        let f = fuse_bfa(&mut g, &pooled_fixture(), &s, true).unwrap();
        assert!((f.data()[0] - 0.3).abs() < 1e-15);
        assert!((f.data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn one_hot_selects_single_view() {
        let mut g = Graph::frozen();
        let s = Tensor::from_vec(vec![0.0, 1.0, 0.0], &[1, 3]).unwrap();
        let f = fuse_bfa(&mut g, &pooled_fixture(), &s, true).unwrap();
        assert_eq!(f.data(), &[0.0, 1.0]);
    }

    #[test]
    fn uniform_scores_equal_mean_bitwise() {
        let pooled = [
            Tensor::from_vec(vec![2.0, 0.0, 0.123456789], &[1, 3]).unwrap(),
            Tensor::from_vec(vec![0.0, 2.0, -7.25e-3], &[1, 3]).unwrap(),
            Tensor::from_vec(vec![1.0, 1.0, std::f64::consts::PI], &[1, 3]).unwrap(),
        ];
        let mut g1 = Graph::frozen();
        let third = 1.0 / 3.0;
        let s = Tensor::from_vec(vec![third; 3], &[1, 3]).unwrap();
        let a = fuse_bfa(&mut g1, &pooled, &s, true).unwrap();
        let mut g2 = Graph::frozen();
        let b = fuse_mean(&mut g2, &pooled).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn mean_hand_example() {
        let pooled = [
            Tensor::from_vec(vec![2.0, 0.0], &[1, 2]).unwrap(),
            Tensor::from_vec(vec![0.0, 2.0], &[1, 2]).unwrap(),
            Tensor::from_vec(vec![1.0, 1.0], &[1, 2]).unwrap(),
        ];
        let mut g = Graph::frozen();
        let f = fuse_mean(&mut g, &pooled).unwrap();
        assert!((f.data()[0] - 1.0).abs() < 1e-15);
        assert!((f.data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn best_feature_argmax_and_tie_break() {
        let mut g = Graph::frozen();
        let s = Tensor::from_vec(vec![0.1, 0.9, 0.2], &[1, 3]).unwrap();
        let f = fuse_best(&mut g, &pooled_fixture(), &s).unwrap();
        assert_eq!(f.data(), &[0.0, 1.0]);
        let tie = Tensor::from_vec(vec![0.5, 0.5, 0.5], &[1, 3]).unwrap();
        let f = fuse_best(&mut g, &pooled_fixture(), &tie).unwrap();
        assert_eq!(f.data(), &[1.0, 0.0], "ties break to the lowest index");
    }

    #[test]
    fn one_hot_bfa_equals_best() {
        let mut g = Graph::frozen();
        let s = Tensor::from_vec(vec![0.0, 0.0, 1.0], &[1, 3]).unwrap();
        let a = fuse_bfa(&mut g, &pooled_fixture(), &s, true).unwrap();
        let b = fuse_best(&mut g, &pooled_fixture(), &s).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn reweight_concat_layout() {
        let mut g = Graph::frozen();
        let ones = Tensor::from_vec(vec![1.0, 1.0, 1.0], &[1, 3]).unwrap();
        let f = fuse_reweight_concat(&mut g, &pooled_fixture(), &ones, true).unwrap();
        assert_eq!(f.data(), &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(f.shape(), &[1, 6]);
        let zeros = Tensor::from_vec(vec![0.0; 3], &[1, 3]).unwrap();
        let f = fuse_reweight_concat(&mut g, &pooled_fixture(), &zeros, true).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dispatch_contract() {
        let mut g = Graph::frozen();
        let out = strategy_dispatch(&mut g, FusionStrategy::Mean, &pooled_fixture(), None, true);
        assert!(out.is_ok());
        let err = strategy_dispatch(&mut g, FusionStrategy::Bfa, &pooled_fixture(), None, true);
        assert!(err.is_err());
    }
}
