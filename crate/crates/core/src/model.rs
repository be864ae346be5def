//! The assembled network: three view encoders, the optional score head,
//! the fusion rule and the chunked policy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{fuse_concat_ones, strategy_dispatch, FusionStrategy};
use crate::nn::Graph;
use crate::perception::{
    patchify_per_position, EncoderConfig, FeatureSet, ScoreHead, ScoreHeadInput, ViewEncoder,
    CHANNELS, NUM_VIEWS, VIEW_NAMES,
};
use crate::policy::PolicyNet;
use crate::tensor::{Parameter, Tensor};

/// What the policy trains against: one of the score-based fusion strategies
/// or the plain concatenation baseline (scores forced to one, no head).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyVariant {
    Strategy(FusionStrategy),
    BaselineConcat,
}

impl PolicyVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyVariant::Strategy(s) => s.as_str(),
            PolicyVariant::BaselineConcat => "baseline_concat",
        }
    }

    pub fn has_score_head(&self) -> bool {
        match self {
            PolicyVariant::BaselineConcat => false,
            PolicyVariant::Strategy(FusionStrategy::Mean) => false,
            PolicyVariant::Strategy(_) => true,
        }
    }

    /// True when the score loss participates in training.
    pub fn trains_scores(&self) -> bool {
        matches!(
            self,
            PolicyVariant::Strategy(
                FusionStrategy::Bfa | FusionStrategy::BestFeature | FusionStrategy::ReweightConcat
            )
        )
    }

    pub fn fused_width(&self, channels: usize) -> usize {
        match self {
            PolicyVariant::BaselineConcat => NUM_VIEWS * channels,
            PolicyVariant::Strategy(s) => s.fused_width(channels),
        }
    }
}

impl std::fmt::Display for PolicyVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PolicyVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<PolicyVariant> {
        if s == "baseline_concat" {
            return Ok(PolicyVariant::BaselineConcat);
        }
        Ok(PolicyVariant::Strategy(s.parse()?))
    }
}

/// Subset of views whose features stay live; masked views' features are
/// replaced by zeros after encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewMask(pub [bool; 3]);

impl ViewMask {
    pub fn full() -> ViewMask {
        ViewMask([true; 3])
    }

    pub fn only(view: usize) -> ViewMask {
        let mut m = [false; 3];
        m[view] = true;
        ViewMask(m)
    }

    pub fn is_full(&self) -> bool {
        self.0.iter().all(|&b| b)
    }

    /// Parse a comma-separated subset of `left,top,right`.
    pub fn parse(s: &str) -> Result<ViewMask> {
        let mut m = [false; 3];
        for part in s.split(',') {
            let part = part.trim();
            match VIEW_NAMES.iter().position(|&v| v == part) {
                Some(i) => m[i] = true,
                None => {
                    return Err(Error::Config(format!(
                        "unknown view {part:?} in mask (expected subset of left,top,right)"
                    )))
                }
            }
        }
        if !m.iter().any(|&b| b) {
            return Err(Error::Config("view mask is empty".into()));
        }
        Ok(ViewMask(m))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub variant: PolicyVariant,
    pub score_head_input: ScoreHeadInput,
    pub chunk_size: usize,
    pub detach_scores: bool,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            variant: PolicyVariant::Strategy(FusionStrategy::Bfa),
            score_head_input: ScoreHeadInput::Joint,
            chunk_size: crate::policy::DEFAULT_CHUNK,
            detach_scores: true,
        }
    }
}

pub struct ForwardPass {
    pub features: FeatureSet,
    pub scores: Option<Tensor>,
    pub fused: Tensor,
    pub pred: Tensor,
}

pub struct BfaModel {
    pub cfg: ModelConfig,
    pub encoders: [ViewEncoder; 3],
    pub score_head: Option<ScoreHead>,
    pub policy: PolicyNet,
}

impl BfaModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> BfaModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xBFFA);
        let encoders = [
            ViewEncoder::new("enc.left", EncoderConfig::for_view(0), &mut rng),
            ViewEncoder::new("enc.top", EncoderConfig::for_view(1), &mut rng),
            ViewEncoder::new("enc.right", EncoderConfig::for_view(2), &mut rng),
        ];
        let score_head = cfg
            .variant
            .has_score_head()
            .then(|| ScoreHead::new(cfg.score_head_input, CHANNELS, &mut rng));
        let policy = PolicyNet::new(cfg.variant.fused_width(CHANNELS), cfg.chunk_size, &mut rng);
        BfaModel { cfg: *cfg, encoders, score_head, policy }
    }

    pub fn fused_width(&self) -> usize {
        self.cfg.variant.fused_width(CHANNELS)
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut p = Vec::new();
        for e in &self.encoders {
            p.extend(e.params());
        }
        if let Some(h) = &self.score_head {
            p.extend(h.params());
        }
        p.extend(self.policy.params());
        p
    }

    pub fn score_head_params(&self) -> Vec<Parameter> {
        self.score_head.as_ref().map(|h| h.params()).unwrap_or_default()
    }

    /// Full forward pass. `views` are raw flat images `[B, res²]` in view
    /// order; `track_images` mounts them as tape leaves so intermediate
    /// gradients (saliency) stay queryable even with frozen parameters.
    pub fn forward(
        &self,
        g: &mut Graph,
        views: &[Tensor; 3],
        proprio: &Tensor,
        mask: ViewMask,
        track_images: bool,
    ) -> Result<ForwardPass> {
        let batch = proprio.shape()[0];
        let mut spatial = Vec::with_capacity(3);
        let mut pooled = Vec::with_capacity(3);
        for (i, enc) in self.encoders.iter().enumerate() {
            let cfg = enc.cfg;
            if views[i].shape() != [batch, cfg.res * cfg.res] {
                return Err(Error::ShapeMismatch {
                    op: "encode_views",
                    lhs: views[i].shape().to_vec(),
                    rhs: vec![batch, cfg.res * cfg.res],
                });
            }
            if mask.0[i] {
                let blocks: Vec<Tensor> = patchify_per_position(views[i].data(), batch, &cfg)
                    .into_iter()
                    .map(|blk| {
                        let t = Tensor::from_vec(blk, &[batch, cfg.patch_dim()])?;
                        Ok(if track_images { g.tape.leaf(&t) } else { t })
                    })
                    .collect::<Result<Vec<Tensor>>>()?;
                let (s, p) = enc.forward(g, &blocks, batch)?;
                spatial.push(s);
                pooled.push(p);
            } else {
                spatial.push(Tensor::zeros(&[cfg.positions(), batch, cfg.channels]));
                pooled.push(Tensor::zeros(&[batch, cfg.channels]));
            }
        }
        let spatial: [Tensor; 3] = spatial.try_into().map_err(|_| Error::Config("views".into())).unwrap();
        let pooled: [Tensor; 3] = pooled.try_into().map_err(|_| Error::Config("views".into())).unwrap();

        let scores = match &self.score_head {
            Some(h) => Some(h.forward(g, &pooled)?),
            None => None,
        };
        let fused = match self.cfg.variant {
            PolicyVariant::BaselineConcat => fuse_concat_ones(g, &pooled)?,
            PolicyVariant::Strategy(s) => {
                strategy_dispatch(g, s, &pooled, scores.as_ref(), self.cfg.detach_scores)?
            }
        };
        let pred = self.policy.forward(g, &fused, proprio)?;
        Ok(ForwardPass { features: FeatureSet { spatial, pooled }, scores, fused, pred })
    }

    /// Single-frame action chunk `[chunk, 6]` in raw action units, with
    /// frozen parameters (the network predicts scaled targets; see
    /// [`crate::policy::ACTION_SCALE`]).
    pub fn predict_chunk(&self, views: &[Tensor; 3], proprio: &Tensor) -> Result<Vec<[f64; 6]>> {
        self.predict_chunk_masked(views, proprio, ViewMask::full())
    }

    pub fn predict_chunk_masked(
        &self,
        views: &[Tensor; 3],
        proprio: &Tensor,
        mask: ViewMask,
    ) -> Result<Vec<[f64; 6]>> {
        let mut g = Graph::frozen();
        let pass = self.forward(&mut g, views, proprio, mask, false)?;
        let flat = pass.pred.data();
        Ok((0..self.cfg.chunk_size)
            .map(|k| {
                let mut row = [0.0; 6];
                for (i, slot) in row.iter_mut().enumerate() {
                    *slot = flat[k * 6 + i] / crate::policy::ACTION_SCALE[i];
                }
                row
            })
            .collect())
    }

    /// Grad-CAM heatmap of score `s[view]` over the view's spatial grid.
    pub fn saliency_map(
        &self,
        views: &[Tensor; 3],
        proprio: &Tensor,
        view: usize,
    ) -> Result<Vec<f64>> {
        if view >= NUM_VIEWS {
            return Err(Error::Config(format!("view index {view} out of range")));
        }
        let head = self
            .score_head
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} model has no score head", self.cfg.variant)))?;
        let _ = head;
        let mut g = Graph::frozen();
        let pass = self.forward(&mut g, views, proprio, ViewMask::full(), true)?;
        let scores = pass.scores.as_ref().expect("head checked above");
        let target = g.tape.slice(scores, 1, view, 1)?;
        let loss = g.tape.sum_all(&target);
        g.tape.backward(&loss)?;
        let spatial = &pass.features.spatial[view];
        let cfg = self.encoders[view].cfg;
        let grad = g
            .tape
            .grad_of(spatial)
            .ok_or_else(|| Error::Config("no gradient reached the spatial map".into()))?;
        Ok(crate::perception::saliency_from_grad(
            spatial.data(),
            grad.data(),
            cfg.positions(),
            cfg.channels,
        ))
    }
}

/// Views of one frame as batch-1 tensors (f32 storage → f64 math).
pub fn frame_view_tensors(frame: &crate::sim::Frame) -> [Tensor; 3] {
    let mk = |img: &crate::sim::Image| {
        Tensor::from_vec(img.as_f64(), &[1, img.w * img.h]).expect("image tensor")
    };
    [mk(&frame.views[0]), mk(&frame.views[1]), mk(&frame.views[2])]
}

pub fn frame_proprio_tensor(frame: &crate::sim::Frame) -> Tensor {
    Tensor::from_vec(frame.proprio.iter().map(|&v| v as f64).collect(), &[1, 6]).expect("proprio")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_inputs(batch: usize) -> ([Tensor; 3], Tensor) {
        let views = [
            Tensor::full(&[batch, 24 * 24], 0.1),
            Tensor::full(&[batch, 48 * 48], 0.2),
            Tensor::full(&[batch, 24 * 24], 0.3),
        ];
        let proprio = Tensor::full(&[batch, 6], 0.5);
        (views, proprio)
    }

    #[test]
    fn forward_shapes_by_variant() {
        for (variant, width) in [
            (PolicyVariant::Strategy(FusionStrategy::Bfa), CHANNELS),
            (PolicyVariant::Strategy(FusionStrategy::ReweightConcat), 3 * CHANNELS),
            (PolicyVariant::BaselineConcat, 3 * CHANNELS),
        ] {
            let cfg = ModelConfig { variant, ..ModelConfig::default() };
            let model = BfaModel::new(&cfg, 0);
            let (views, proprio) = tiny_inputs(2);
            let mut g = Graph::frozen();
            let pass = model.forward(&mut g, &views, &proprio, ViewMask::full(), false).unwrap();
            assert_eq!(pass.fused.shape(), &[2, width]);
            assert_eq!(pass.pred.shape(), &[2, 24 * 6]);
            assert_eq!(pass.scores.is_some(), variant.has_score_head());
        }
    }

    #[test]
    fn full_mask_identical_to_unmasked() {
        let model = BfaModel::new(&ModelConfig::default(), 3);
        let (views, proprio) = tiny_inputs(1);
        let mut g1 = Graph::frozen();
        let a = model.forward(&mut g1, &views, &proprio, ViewMask::full(), false).unwrap();
        let mut g2 = Graph::frozen();
        let b = model.forward(&mut g2, &views, &proprio, ViewMask([true, true, true]), false).unwrap();
        assert_eq!(
            a.pred.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.pred.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn masked_view_contributes_zero_feature() {
        let model = BfaModel::new(&ModelConfig::default(), 4);
        let (views, proprio) = tiny_inputs(1);
        let mut g = Graph::frozen();
        let pass = model
            .forward(&mut g, &views, &proprio, ViewMask([false, true, false]), false)
            .unwrap();
        assert!(pass.features.pooled[0].data().iter().all(|&v| v == 0.0));
        assert!(pass.features.pooled[2].data().iter().all(|&v| v == 0.0));
        assert!(pass.features.pooled[1].data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn predict_chunk_shape() {
        let model = BfaModel::new(&ModelConfig::default(), 5);
        let (views, proprio) = tiny_inputs(1);
        let chunk = model.predict_chunk(&views, &proprio).unwrap();
        assert_eq!(chunk.len(), 24);
    }

    #[test]
    fn view_mask_parsing() {
        assert_eq!(ViewMask::parse("left,top,right").unwrap(), ViewMask::full());
        assert_eq!(ViewMask::parse("top").unwrap(), ViewMask([false, true, false]));
        assert!(ViewMask::parse("rear").is_err());
    }

    #[test]
    fn saliency_runs_on_frozen_model() {
        let model = BfaModel::new(&ModelConfig::default(), 6);
        let (views, proprio) = tiny_inputs(1);
        for view in 0..3 {
            let heat = model.saliency_map(&views, &proprio, view).unwrap();
            let g = model.encoders[view].cfg.grid();
            assert_eq!(heat.len(), g * g);
            assert!(heat.iter().all(|&h| (0.0..=1.0).contains(&h)));
        }
        assert!(model.saliency_map(&views, &proprio, 9).is_err());
    }

    #[test]
    fn headless_variant_rejects_saliency() {
        let cfg = ModelConfig {
            variant: PolicyVariant::Strategy(FusionStrategy::Mean),
            ..ModelConfig::default()
        };
        let model = BfaModel::new(&cfg, 0);
        let (views, proprio) = tiny_inputs(1);
        assert!(model.saliency_map(&views, &proprio, 0).is_err());
    }
}
