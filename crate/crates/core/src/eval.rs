//! Rollout evaluation, per-stage success tables, view-masking ablation and
//! compute accounting.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fusion::FusionStrategy;
use crate::model::{BfaModel, ModelConfig, PolicyVariant, ViewMask};
use crate::perception::{EncoderConfig, ScoreHeadInput, CHANNELS, VIEW_NAMES};
use crate::policy::{ACTION_DIM, POLICY_WIDTH};
use crate::sim::{
    plan_episode, render_views, stage_success, step, StageTracker, TaskSpec, WorldState,
};
use crate::tensor::Tensor;

/// Seed base for evaluation rollouts, disjoint from training data seeds.
pub const EVAL_SEED_BASE: u64 = 10_000;

#[derive(Debug, Clone)]
pub struct RolloutOutcome {
    pub stage_ok: Vec<bool>,
    pub steps: usize,
    pub final_stage_ok: bool,
}

/// Closed-loop rollout: the policy's first chunk action is executed and the
/// policy re-queried every step until every stage is satisfied or the
/// episode cap is hit. Deterministic given (model, task, seed, mask).
pub fn rollout(
    model: &BfaModel,
    task: &TaskSpec,
    seed: u64,
    mask: ViewMask,
    noise_sigma: f64,
) -> Result<RolloutOutcome> {
    let plan = plan_episode(task, seed);
    let mut world = WorldState::at_rest(&plan.rest, plan.objects.clone());
    let mut tracker = StageTracker::new();
    let mut noise_rng =
        ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xD6E8_FEB8_6659_FD93) ^ 0xE7A1);
    let cap = task.episode_length_range.1;
    let mut trace = Vec::with_capacity(cap + 1);
    let mut steps = cap;
    for t in 0..cap {
        let stage_idx = tracker.observe(&plan.stages, &world);
        if tracker.reached() == plan.stages.len() {
            steps = t;
            break;
        }
        world.active_targets = plan.stages[stage_idx].active_targets.clone();
        let views = render_views(&world, noise_sigma, &mut noise_rng);
        let view_tensors = [
            Tensor::from_vec(views[0].as_f64(), &[1, views[0].pixels.len()])?,
            Tensor::from_vec(views[1].as_f64(), &[1, views[1].pixels.len()])?,
            Tensor::from_vec(views[2].as_f64(), &[1, views[2].pixels.len()])?,
        ];
        let proprio = Tensor::from_vec(world.proprio().to_vec(), &[1, ACTION_DIM])?;
        let chunk = model.predict_chunk_masked(&view_tensors, &proprio, mask)?;
        let action = chunk[0];
        trace.push(world.clone());
        world = step(&world, &action)?;
    }
    trace.push(world);
    let stage_ok = stage_success(&trace, &plan.stages);
    let final_ok = *stage_ok.last().unwrap_or(&false);
    Ok(RolloutOutcome { stage_ok, steps, final_stage_ok: final_ok })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task: String,
    pub strategy: String,
    pub trials: usize,
    pub stage_names: Vec<String>,
    pub stage_rates: Vec<f64>,
    pub overall: f64,
    pub mean_len: f64,
    pub flops_per_step: u64,
    pub params: u64,
}

/// Per-stage success rates over seeded rollouts (parallel across trials).
pub fn evaluate(
    model: &BfaModel,
    task: &TaskSpec,
    trials: usize,
    noise_sigma: f64,
) -> Result<EvalReport> {
    assert!(trials >= 1, "evaluate requires at least one trial");
    let outcomes: Vec<RolloutOutcome> = (0..trials)
        .into_par_iter()
        .map(|i| rollout(model, task, EVAL_SEED_BASE + i as u64, ViewMask::full(), noise_sigma))
        .collect::<Result<Vec<_>>>()?;
    let n_stages = task.stages.len();
    let mut stage_rates = vec![0.0; n_stages];
    let mut all_ok = 0usize;
    let mut len_sum = 0usize;
    for o in &outcomes {
        for (k, &ok) in o.stage_ok.iter().enumerate() {
            if ok {
                stage_rates[k] += 1.0;
            }
        }
        if o.stage_ok.iter().all(|&b| b) {
            all_ok += 1;
        }
        len_sum += o.steps;
    }
    for r in &mut stage_rates {
        *r /= trials as f64;
    }
    let flops = count_flops(&model.cfg);
    Ok(EvalReport {
        task: task.name.to_string(),
        strategy: model.cfg.variant.to_string(),
        trials,
        stage_names: task.stage_names(),
        stage_rates,
        overall: all_ok as f64 / trials as f64,
        mean_len: len_sum as f64 / trials as f64,
        flops_per_step: flops.total_flops,
        params: flops.total_params,
    })
}

// ── Compute accounting ──────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub macs: u64,
    pub params: u64,
}

/// Static multiply-accumulate and parameter counts for one inference step
/// (batch 1), derived purely from the architecture config. FLOPs are
/// reported as 2×MAC.
#[derive(Debug, Clone, PartialEq)]
pub struct FlopsReport {
    pub layers: Vec<LayerCost>,
    pub total_macs: u64,
    pub total_flops: u64,
    pub total_params: u64,
    /// MACs of the policy's first layer attributable to the fused visual
    /// feature (the width the fusion strategy controls).
    pub policy_input_macs: u64,
}

/// MACs and parameters of a bias-carrying linear layer.
pub fn linear_cost(in_dim: usize, out_dim: usize) -> (u64, u64) {
    ((in_dim * out_dim) as u64, (in_dim * out_dim + out_dim) as u64)
}

pub fn count_flops(cfg: &ModelConfig) -> FlopsReport {
    let mut layers = Vec::new();
    let mut push = |name: String, macs: u64, params: u64| layers.push(LayerCost { name, macs, params });

    for (i, view) in VIEW_NAMES.iter().enumerate() {
        let e = EncoderConfig::for_view(i);
        let positions = e.positions() as u64;
        // locally connected projection: shared-MACs, per-position weights
        let (m, p) = linear_cost(e.patch_dim(), e.channels);
        push(format!("enc.{view}.proj"), positions * m, positions * p);
        let (m, p) = linear_cost(e.channels, e.hidden);
        push(format!("enc.{view}.h1"), positions * m, p);
        let (m, p) = linear_cost(e.hidden, e.channels);
        push(format!("enc.{view}.h2"), positions * m, p);
    }

    if cfg.variant.has_score_head() {
        let (in_dim, out_dim, eval_count) = match cfg.score_head_input {
            ScoreHeadInput::Joint => (3 * CHANNELS, 3usize, 1u64),
            ScoreHeadInput::PerView => (CHANNELS, 1usize, 3u64),
        };
        let (m1, p1) = linear_cost(in_dim, 64);
        push("score_head.l1".into(), eval_count * m1, p1);
        let (m2, p2) = linear_cost(64, 32);
        push("score_head.l2".into(), eval_count * m2, p2);
        let (m3, p3) = linear_cost(32, out_dim);
        push("score_head.l3".into(), eval_count * m3, p3);
    }

    let fusion_macs = match cfg.variant {
        PolicyVariant::BaselineConcat => 0,
        PolicyVariant::Strategy(FusionStrategy::BestFeature) => 0,
        PolicyVariant::Strategy(_) => (3 * CHANNELS) as u64,
    };
    push("fusion".into(), fusion_macs, 0);

    let fused_width = cfg.variant.fused_width(CHANNELS);
    let policy_input_macs = (fused_width * POLICY_WIDTH) as u64;
    push(
        "policy.fc1.visual".into(),
        policy_input_macs,
        (fused_width * POLICY_WIDTH + POLICY_WIDTH) as u64,
    );
    let (mp, pp) = linear_cost(ACTION_DIM, POLICY_WIDTH);
    push("policy.fc1.proprio".into(), mp, pp);
    let (m2, p2) = linear_cost(POLICY_WIDTH, POLICY_WIDTH);
    push("policy.fc2".into(), m2, p2);
    push("policy.fc3".into(), m2, p2);
    let (mo, po) = linear_cost(POLICY_WIDTH, cfg.chunk_size * ACTION_DIM);
    push("policy.out".into(), mo, po);

    let total_macs: u64 = layers.iter().map(|l| l.macs).sum();
    let total_params: u64 = layers.iter().map(|l| l.params).sum();
    FlopsReport { layers, total_macs, total_flops: 2 * total_macs, total_params, policy_input_macs }
}

// ── Report emission ─────────────────────────────────────────────────

/// Write `eval_<task>_<strategy>.csv` and `.txt`; returns the csv path.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let base = format!("eval_{}_{}", report.task, report.strategy);
    let csv_path = dir.join(format!("{base}.csv"));
    std::fs::write(&csv_path, report_to_csv(report))?;
    let mut txt = format!(
        "task {} | strategy {} | {} trials\noverall success {:.3} | mean episode length {:.1}\n\
         flops/step (2xMAC) {} | params {}\n",
        report.task, report.strategy, report.trials, report.overall, report.mean_len,
        report.flops_per_step, report.params
    );
    for (name, rate) in report.stage_names.iter().zip(&report.stage_rates) {
        txt.push_str(&format!("  stage {name}: {rate:.3}\n"));
    }
    std::fs::write(dir.join(format!("{base}.txt")), txt)?;
    Ok(csv_path)
}

pub fn report_to_csv(report: &EvalReport) -> String {
    let mut header = String::from("task,strategy,trials,overall,mean_len,flops_per_step,params");
    let mut row = format!(
        "{},{},{},{},{},{},{}",
        report.task,
        report.strategy,
        report.trials,
        report.overall,
        report.mean_len,
        report.flops_per_step,
        report.params
    );
    for (name, rate) in report.stage_names.iter().zip(&report.stage_rates) {
        header.push_str(&format!(",stage:{name}"));
        row.push_str(&format!(",{rate}"));
    }
    format!("{header}\n{row}\n")
}

pub fn report_from_csv(text: &str) -> Result<EvalReport> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Config("empty report".into()))?;
    let row = lines.next().ok_or_else(|| Error::Config("report lacks a data row".into()))?;
    let keys: Vec<&str> = header.split(',').collect();
    let vals: Vec<&str> = row.split(',').collect();
    if keys.len() != vals.len() || keys.len() < 7 {
        return Err(Error::Config("malformed report csv".into()));
    }
    let fetch = |k: &str| -> Result<&str> {
        keys.iter()
            .position(|&x| x == k)
            .map(|i| vals[i])
            .ok_or_else(|| Error::Config(format!("report lacks column {k}")))
    };
    let numf = |s: &str| s.parse::<f64>().map_err(|_| Error::Config(format!("bad number {s:?}")));
    let numu = |s: &str| s.parse::<u64>().map_err(|_| Error::Config(format!("bad number {s:?}")));
    let mut stage_names = Vec::new();
    let mut stage_rates = Vec::new();
    for (k, v) in keys.iter().zip(&vals) {
        if let Some(name) = k.strip_prefix("stage:") {
            stage_names.push(name.to_string());
            stage_rates.push(numf(v)?);
        }
    }
    Ok(EvalReport {
        task: fetch("task")?.to_string(),
        strategy: fetch("strategy")?.to_string(),
        trials: fetch("trials")?.parse().map_err(|_| Error::Config("bad trials".into()))?,
        stage_names,
        stage_rates,
        overall: numf(fetch("overall")?)?,
        mean_len: numf(fetch("mean_len")?)?,
        flops_per_step: numu(fetch("flops_per_step")?)?,
        params: numu(fetch("params")?)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_cost_hand_example() {
        // 10→5 with bias: 55 params, 50 MACs
        let (macs, params) = linear_cost(10, 5);
        assert_eq!(macs, 50);
        assert_eq!(params, 55);
    }

    #[test]
    fn flops_params_match_instantiated_model() {
        for variant in [
            PolicyVariant::Strategy(FusionStrategy::Bfa),
            PolicyVariant::Strategy(FusionStrategy::Mean),
            PolicyVariant::Strategy(FusionStrategy::ReweightConcat),
            PolicyVariant::BaselineConcat,
        ] {
            let cfg = ModelConfig { variant, ..ModelConfig::default() };
            let model = BfaModel::new(&cfg, 0);
            let actual: usize = model.params().iter().map(|p| p.numel()).sum();
            let counted = count_flops(&cfg);
            assert_eq!(counted.total_params as usize, actual, "{variant}");
        }
    }

    #[test]
    fn bfa_first_layer_is_one_third_of_baseline() {
        let bfa = count_flops(&ModelConfig::default());
        let base = count_flops(&ModelConfig {
            variant: PolicyVariant::BaselineConcat,
            ..ModelConfig::default()
        });
        assert_eq!(bfa.policy_input_macs * 3, base.policy_input_macs);
        assert!(bfa.policy_input_macs < base.policy_input_macs);
    }

    #[test]
    fn flops_total_is_layer_sum_and_order_invariant() {
        let r = count_flops(&ModelConfig::default());
        let sum: u64 = r.layers.iter().map(|l| l.macs).sum();
        assert_eq!(sum, r.total_macs);
        assert_eq!(r.total_flops, 2 * r.total_macs);
        let mut rev = r.layers.clone();
        rev.reverse();
        assert_eq!(rev.iter().map(|l| l.macs).sum::<u64>(), r.total_macs);
    }

    #[test]
    fn report_roundtrip() {
        let r = EvalReport {
            task: "unzip".into(),
            strategy: "bfa".into(),
            trials: 50,
            stage_names: vec!["reach".into(), "grab".into()],
            stage_rates: vec![0.9, 0.74],
            overall: 0.74,
            mean_len: 201.5,
            flops_per_step: 123456,
            params: 82003,
        };
        let back = report_from_csv(&report_to_csv(&r)).unwrap();
        assert_eq!(r, back);
    }
}
