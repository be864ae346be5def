//! Per-view feature encoders, global average pooling and the score head.
//!
//! Each view gets a patch encoder: a per-position linear projection of P×P
//! patches to C channels (locally connected, so pooled features keep
//! spatial information), then a shared two-layer per-position MLP (hidden
//! width 64) back to C channels. The output keeps its G×G spatial layout
//! for saliency analysis; pooling is a plain mean over positions. The score
//! head consumes pooled vectors only — never raw pixels — which is checked
//! structurally in the tests.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Graph, Linear};
use crate::tensor::{Parameter, Tensor};

pub const CHANNELS: usize = 32;
pub const ENCODER_HIDDEN: usize = 64;
pub const NUM_VIEWS: usize = 3;
pub const VIEW_NAMES: [&str; 3] = ["left", "top", "right"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub res: usize,
    pub patch: usize,
    pub channels: usize,
    pub hidden: usize,
}

impl EncoderConfig {
    pub fn wrist() -> EncoderConfig {
        EncoderConfig { res: 24, patch: 6, channels: CHANNELS, hidden: ENCODER_HIDDEN }
    }

    pub fn top() -> EncoderConfig {
        EncoderConfig { res: 48, patch: 8, channels: CHANNELS, hidden: ENCODER_HIDDEN }
    }

    pub fn for_view(view: usize) -> EncoderConfig {
        if view == 1 {
            EncoderConfig::top()
        } else {
            EncoderConfig::wrist()
        }
    }

    pub fn grid(&self) -> usize {
        self.res / self.patch
    }

    pub fn positions(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch
    }
}

/// Rearrange a batch of flat images `[B, res²]` into patch rows
/// `[B·G², P²]`, batch-major (pure data movement, no tape involvement).
pub fn patchify(images: &[f64], batch: usize, cfg: &EncoderConfig) -> Vec<f64> {
    let res = cfg.res;
    let p = cfg.patch;
    let g = cfg.grid();
    let pd = cfg.patch_dim();
    assert_eq!(images.len(), batch * res * res, "patchify input size");
    let mut out = vec![0.0; batch * g * g * pd];
    for b in 0..batch {
        let img = &images[b * res * res..(b + 1) * res * res];
        for gi in 0..g {
            for gj in 0..g {
                let dst_base = ((b * g * g) + gi * g + gj) * pd;
                for pi in 0..p {
                    let src = (gi * p + pi) * res + gj * p;
                    let dst = dst_base + pi * p;
                    out[dst..dst + p].copy_from_slice(&img[src..src + p]);
                }
            }
        }
    }
    out
}

/// Position-major rearrangement: `[B, res²]` → one `[B, P²]` block per grid
/// position, so the per-position projection can run as one matmul each.
pub fn patchify_per_position(images: &[f64], batch: usize, cfg: &EncoderConfig) -> Vec<Vec<f64>> {
    let res = cfg.res;
    let p = cfg.patch;
    let g = cfg.grid();
    let pd = cfg.patch_dim();
    assert_eq!(images.len(), batch * res * res, "patchify input size");
    let mut out = vec![vec![0.0; batch * pd]; g * g];
    for b in 0..batch {
        let img = &images[b * res * res..(b + 1) * res * res];
        for gi in 0..g {
            for gj in 0..g {
                let block = &mut out[gi * g + gj];
                for pi in 0..p {
                    let src = (gi * p + pi) * res + gj * p;
                    let dst = b * pd + pi * p;
                    block[dst..dst + p].copy_from_slice(&img[src..src + p]);
                }
            }
        }
    }
    out
}

/// Patch encoder for one view. The projection weights live in one tensor
/// `[G²·P², C]` (per-position blocks) with a per-position bias `[G², C]`;
/// the two-layer MLP is shared across positions.
pub struct ViewEncoder {
    pub cfg: EncoderConfig,
    pub proj_w: Parameter,
    pub proj_b: Parameter,
    pub h1: Linear,
    pub h2: Linear,
}

impl ViewEncoder {
    pub fn new(name: &str, cfg: EncoderConfig, rng: &mut ChaCha8Rng) -> ViewEncoder {
        use rand::Rng;
        let k = 1.0 / (cfg.patch_dim() as f64).sqrt();
        let g2 = cfg.positions();
        let w: Vec<f64> = (0..g2 * cfg.patch_dim() * cfg.channels).map(|_| rng.gen_range(-k..k)).collect();
        let b: Vec<f64> = (0..g2 * cfg.channels).map(|_| rng.gen_range(-k..k)).collect();
        ViewEncoder {
            cfg,
            proj_w: Parameter::new(format!("{name}.proj.w"), &[g2 * cfg.patch_dim(), cfg.channels], w),
            proj_b: Parameter::new(format!("{name}.proj.b"), &[g2, cfg.channels], b),
            h1: Linear::new(&format!("{name}.h1"), cfg.channels, cfg.hidden, rng),
            h2: Linear::new(&format!("{name}.h2"), cfg.hidden, cfg.channels, rng),
        }
    }

    /// Position-major patch blocks (`[B, P²]` each) → (spatial `[G², B, C]`,
    /// pooled `[B, C]`).
    pub fn forward(
        &self,
        g: &mut Graph,
        patch_blocks: &[Tensor],
        batch: usize,
    ) -> Result<(Tensor, Tensor)> {
        let g2 = self.cfg.positions();
        let c = self.cfg.channels;
        let pd = self.cfg.patch_dim();
        if patch_blocks.len() != g2 {
            return Err(Error::ShapeMismatch {
                op: "encode_views",
                lhs: vec![patch_blocks.len()],
                rhs: vec![g2],
            });
        }
        let w = g.param(&self.proj_w);
        let b = g.param(&self.proj_b);
        let mut projected = Vec::with_capacity(g2);
        for (p, block) in patch_blocks.iter().enumerate() {
            if block.shape() != [batch, pd] {
                return Err(Error::ShapeMismatch {
                    op: "encode_views",
                    lhs: block.shape().to_vec(),
                    rhs: vec![batch, pd],
                });
            }
            let wp = g.tape.slice(&w, 0, p * pd, pd)?;
            let bp = g.tape.slice(&b, 0, p, 1)?;
            let yp = g.tape.matmul(block, &wp)?;
            let yb = g.tape.add(&yp, &bp)?;
            let row = g.tape.reshape(&yb, &[1, batch, c])?;
            projected.push(row);
        }
        let refs: Vec<&Tensor> = projected.iter().collect();
        let grid = g.tape.concat(&refs, 0)?; // [G², B, C]
        let flat = g.tape.reshape(&grid, &[g2 * batch, c])?;
        let a1 = self.h1.forward(g, &flat)?;
        let r1 = g.tape.relu(&a1);
        let a2 = self.h2.forward(g, &r1)?;
        let r2 = g.tape.relu(&a2);
        let spatial = g.tape.reshape(&r2, &[g2, batch, c])?;
        let pooled = g.tape.mean_axes(&spatial, &[0])?;
        Ok((spatial, pooled))
    }

    pub fn params(&self) -> Vec<Parameter> {
        vec![
            self.proj_w.clone(),
            self.proj_b.clone(),
            self.h1.w.clone(),
            self.h1.b.clone(),
            self.h2.w.clone(),
            self.h2.b.clone(),
        ]
    }
}

/// One forward pass's per-view features: spatial maps (`[G², B, C]`,
/// position-major) plus pooled vectors (`[B, C]`).
pub struct FeatureSet {
    pub spatial: [Tensor; 3],
    pub pooled: [Tensor; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreHeadInput {
    /// The head sees the concatenation of all pooled view vectors
    /// (cross-view context; the default).
    Joint,
    /// The head scores each view's pooled vector in isolation with shared
    /// weights.
    PerView,
}

impl ScoreHeadInput {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScoreHeadInput::Joint => "joint",
            ScoreHeadInput::PerView => "per_view",
        }
    }
}

impl std::str::FromStr for ScoreHeadInput {
    type Err = Error;
    fn from_str(s: &str) -> Result<ScoreHeadInput> {
        match s {
            "joint" => Ok(ScoreHeadInput::Joint),
            "per_view" => Ok(ScoreHeadInput::PerView),
            other => Err(Error::Config(format!("unknown score_head_input {other:?}"))),
        }
    }
}

/// Three-layer score head ending in per-output sigmoid; output in (0,1)³.
pub struct ScoreHead {
    pub mode: ScoreHeadInput,
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
}

impl ScoreHead {
    pub fn new(mode: ScoreHeadInput, channels: usize, rng: &mut ChaCha8Rng) -> ScoreHead {
        let (in_dim, out_dim) = match mode {
            ScoreHeadInput::Joint => (NUM_VIEWS * channels, NUM_VIEWS),
            ScoreHeadInput::PerView => (channels, 1),
        };
        ScoreHead {
            mode,
            l1: Linear::new("score_head.l1", in_dim, 64, rng),
            l2: Linear::new("score_head.l2", 64, 32, rng),
            l3: Linear::new("score_head.l3", 32, out_dim, rng),
        }
    }

    /// Pooled vectors → scores `[B, 3]` in (0,1).
    pub fn forward(&self, g: &mut Graph, pooled: &[Tensor; 3]) -> Result<Tensor> {
        let logits = match self.mode {
            ScoreHeadInput::Joint => {
                let cat = g.tape.concat(&[&pooled[0], &pooled[1], &pooled[2]], 1)?;
                let a1 = self.l1.forward(g, &cat)?;
                let z1 = g.tape.relu(&a1);
                let a2 = self.l2.forward(g, &z1)?;
                let z2 = g.tape.relu(&a2);
                self.l3.forward(g, &z2)?
            }
            ScoreHeadInput::PerView => {
                let mut outs = Vec::with_capacity(NUM_VIEWS);
                for p in pooled.iter() {
                    let a1 = self.l1.forward(g, p)?;
                    let z1 = g.tape.relu(&a1);
                    let a2 = self.l2.forward(g, &z1)?;
                    let z2 = g.tape.relu(&a2);
                    outs.push(self.l3.forward(g, &z2)?);
                }
                g.tape.concat(&[&outs[0], &outs[1], &outs[2]], 1)?
            }
        };
        Ok(g.tape.sigmoid(&logits))
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut p = self.l1.params();
        p.extend(self.l2.params());
        p.extend(self.l3.params());
        p
    }
}

/// Grad-CAM-style heatmap from a spatial map and its gradient (both
/// position-major, batch 1): channel weights are the position-mean of the
/// gradient, the map is the relu-combined weighted sum, max-normalized.
pub fn saliency_from_grad(spatial: &[f64], grad: &[f64], positions: usize, channels: usize) -> Vec<f64> {
    assert_eq!(spatial.len(), positions * channels);
    assert_eq!(grad.len(), positions * channels);
    let mut weights = vec![0.0; channels];
    for p in 0..positions {
        for c in 0..channels {
            weights[c] += grad[p * channels + c];
        }
    }
    for w in &mut weights {
        *w /= positions as f64;
    }
    let mut heat = vec![0.0; positions];
    for p in 0..positions {
        let mut acc = 0.0;
        for c in 0..channels {
            acc += weights[c] * spatial[p * channels + c];
        }
        heat[p] = acc.max(0.0);
    }
    let max = heat.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for h in &mut heat {
            *h /= max;
        }
    }
    heat
}

/// Write an 8-bit binary PGM (P5).
pub fn write_pgm(path: &std::path::Path, w: usize, h: usize, values: &[f64]) -> Result<()> {
    assert_eq!(values.len(), w * h);
    let mut out = Vec::with_capacity(16 + w * h);
    out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    out.extend(values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn blocks_from_image(img: &[f64], batch: usize, cfg: &EncoderConfig) -> Vec<Tensor> {
        patchify_per_position(img, batch, cfg)
            .into_iter()
            .map(|b| Tensor::from_vec(b, &[batch, cfg.patch_dim()]).unwrap())
            .collect()
    }

    #[test]
    fn patchify_layouts_agree() {
        let cfg = EncoderConfig { res: 4, patch: 2, channels: 8, hidden: 16 };
        let img: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let rows = patchify(&img, 1, &cfg);
        assert_eq!(&rows[0..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&rows[12..16], &[10.0, 11.0, 14.0, 15.0]);
        let blocks = patchify_per_position(&img, 1, &cfg);
        assert_eq!(blocks[0], vec![0.0, 1.0, 4.0, 5.0]);
        assert_eq!(blocks[3], vec![10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn gap_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = EncoderConfig::wrist();
        let enc = ViewEncoder::new("enc.t", cfg, &mut rng);
        use rand::Rng;
        let img: Vec<f64> = (0..cfg.res * cfg.res).map(|_| rng.gen_range(0.0..1.0)).collect();
        let blocks = blocks_from_image(&img, 1, &cfg);
        let mut g = Graph::frozen();
        let (spatial, pooled) = enc.forward(&mut g, &blocks, 1).unwrap();
        let g2 = cfg.positions();
        let c = cfg.channels;
        for ch in 0..c {
            let mut acc = 0.0;
            for p in 0..g2 {
                acc += spatial.data()[p * c + ch];
            }
            let expect = acc / g2 as f64;
            assert!((pooled.data()[ch] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_images_zero_bias_give_zero_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = EncoderConfig::wrist();
        let enc = ViewEncoder::new("enc.z", cfg, &mut rng);
        enc.proj_b.set_data(vec![0.0; cfg.positions() * cfg.channels]);
        enc.h1.b.set_data(vec![0.0; cfg.hidden]);
        enc.h2.b.set_data(vec![0.0; cfg.channels]);
        let blocks: Vec<Tensor> =
            (0..cfg.positions()).map(|_| Tensor::zeros(&[1, cfg.patch_dim()])).collect();
        let mut g = Graph::frozen();
        let (_, pooled) = enc.forward(&mut g, &blocks, 1).unwrap();
        assert!(pooled.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_image_pools_to_identical_patch_output() {
        // every patch identical → GAP equals any single position's output
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = EncoderConfig::wrist();
        let enc = ViewEncoder::new("enc.c", cfg, &mut rng);
        // shared projection across positions makes all patch outputs equal
        let one_block = enc.proj_w.data_clone()[..cfg.patch_dim() * cfg.channels].to_vec();
        let tiled: Vec<f64> = one_block
            .iter()
            .cycle()
            .take(cfg.positions() * cfg.patch_dim() * cfg.channels)
            .cloned()
            .collect();
        enc.proj_w.set_data(tiled);
        let one_bias = enc.proj_b.data_clone()[..cfg.channels].to_vec();
        let tiled_b: Vec<f64> =
            one_bias.iter().cycle().take(cfg.positions() * cfg.channels).cloned().collect();
        enc.proj_b.set_data(tiled_b);
        let img = vec![0.37; cfg.res * cfg.res];
        let blocks = blocks_from_image(&img, 1, &cfg);
        let mut g = Graph::frozen();
        let (spatial, pooled) = enc.forward(&mut g, &blocks, 1).unwrap();
        let c = cfg.channels;
        for ch in 0..c {
            assert!((pooled.data()[ch] - spatial.data()[ch]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_final_layer_scores_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = ScoreHead::new(ScoreHeadInput::Joint, CHANNELS, &mut rng);
        head.l3.w.set_data(vec![0.0; 32 * 3]);
        head.l3.b.set_data(vec![0.0; 3]);
        let pooled = [
            Tensor::full(&[2, CHANNELS], 0.3),
            Tensor::full(&[2, CHANNELS], -0.7),
            Tensor::full(&[2, CHANNELS], 1.1),
        ];
        let mut g = Graph::frozen();
        let s = head.forward(&mut g, &pooled).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn saliency_zero_grad_gives_zero_map() {
        let spatial = vec![1.0; 16 * 4];
        let grad = vec![0.0; 16 * 4];
        let heat = saliency_from_grad(&spatial, &grad, 16, 4);
        assert!(heat.iter().all(|&h| h == 0.0));
    }

    #[test]
    fn saliency_normalized_to_unit_max() {
        let spatial: Vec<f64> = (0..16 * 4).map(|i| (i % 7) as f64 * 0.3).collect();
        let grad: Vec<f64> = (0..16 * 4).map(|i| ((i % 5) as f64 - 2.0) * 0.1).collect();
        let heat = saliency_from_grad(&spatial, &grad, 16, 4);
        let max = heat.iter().cloned().fold(0.0f64, f64::max);
        assert!((max - 1.0).abs() < 1e-12 || max == 0.0);
        assert!(heat.iter().all(|&h| (0.0..=1.0).contains(&h)));
    }
}
