//! End-to-end training: config file parsing, dataset assembly from episode
//! and label files, and the two-loss optimization loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::annotate::{ImportanceLabel, LabelFile};
use crate::checkpoint::{read_checkpoint, write_checkpoint, Record};
use crate::error::{Error, Result};
use crate::model::{BfaModel, ModelConfig, PolicyVariant, ViewMask};
use crate::nn::Graph;
use crate::optim::{adam_step, OptimizerState};
use crate::perception::ScoreHeadInput;
use crate::policy::{policy_loss, score_loss, total_loss, LossWeights, ACTION_DIM};
use crate::sim::{EpisodeRecord, TaskName};
use crate::tensor::Tensor;

pub const CONFIG_RECORD: &str = "__meta__/config";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: TaskName,
    pub episodes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub lambda_score: f64,
    pub lambda_policy: f64,
    pub fusion: PolicyVariant,
    pub chunk_size: usize,
    pub detach_scores: bool,
    pub score_head_input: ScoreHeadInput,
    pub noise_sigma: f64,
    pub data_dir: PathBuf,
    pub label_dir: PathBuf,
    pub checkpoint_out: PathBuf,
    pub report_out: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            task: TaskName::Unzip,
            episodes: 50,
            epochs: 30,
            batch_size: 64,
            seed: 0,
            learning_rate: 1e-3,
            lambda_score: 1.0,
            lambda_policy: 1.0,
            fusion: PolicyVariant::Strategy(crate::fusion::FusionStrategy::Bfa),
            chunk_size: crate::policy::DEFAULT_CHUNK,
            detach_scores: true,
            score_head_input: ScoreHeadInput::Joint,
            noise_sigma: crate::sim::DEFAULT_NOISE_SIGMA,
            data_dir: PathBuf::from("data"),
            label_dir: PathBuf::from("labels"),
            checkpoint_out: PathBuf::from("checkpoint.bfck"),
            report_out: PathBuf::from("report.csv"),
        }
    }
}

impl TrainConfig {
    /// Parse the line-oriented `key = value` format. Unknown keys are
    /// errors; blank lines and `#` comments are allowed.
    pub fn from_text(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| Error::Config(format!("line {}: bad {what}: {value:?}", lineno + 1));
            match key {
                "task" => cfg.task = value.parse()?,
                "episodes" => cfg.episodes = value.parse().map_err(|_| bad("episodes"))?,
                "epochs" => cfg.epochs = value.parse().map_err(|_| bad("epochs"))?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("batch_size"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "learning_rate" => cfg.learning_rate = value.parse().map_err(|_| bad("learning_rate"))?,
                "lambda_score" => cfg.lambda_score = value.parse().map_err(|_| bad("lambda_score"))?,
                "lambda_policy" => cfg.lambda_policy = value.parse().map_err(|_| bad("lambda_policy"))?,
                "fusion" => cfg.fusion = value.parse()?,
                "chunk_size" => cfg.chunk_size = value.parse().map_err(|_| bad("chunk_size"))?,
                "detach_scores" => cfg.detach_scores = value.parse().map_err(|_| bad("detach_scores"))?,
                "score_head_input" => cfg.score_head_input = value.parse()?,
                "noise_sigma" => cfg.noise_sigma = value.parse().map_err(|_| bad("noise_sigma"))?,
                "data_dir" => cfg.data_dir = PathBuf::from(value),
                "label_dir" => cfg.label_dir = PathBuf::from(value),
                "checkpoint_out" => cfg.checkpoint_out = PathBuf::from(value),
                "report_out" => cfg.report_out = PathBuf::from(value),
                other => return Err(Error::Config(format!("line {}: unknown key {other:?}", lineno + 1))),
            }
        }
        if cfg.episodes == 0 || cfg.batch_size == 0 || cfg.chunk_size == 0 {
            return Err(Error::Config("episodes, batch_size and chunk_size must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        TrainConfig::from_text(&std::fs::read_to_string(path)?)
    }

    /// Canonical text form; the checkpoint embeds this echo.
    pub fn to_text(&self) -> String {
        format!(
            "task = {}\nepisodes = {}\nepochs = {}\nbatch_size = {}\nseed = {}\n\
             learning_rate = {}\nlambda_score = {}\nlambda_policy = {}\nfusion = {}\n\
             chunk_size = {}\ndetach_scores = {}\nscore_head_input = {}\nnoise_sigma = {}\n\
             data_dir = {}\nlabel_dir = {}\ncheckpoint_out = {}\nreport_out = {}\n",
            self.task,
            self.episodes,
            self.epochs,
            self.batch_size,
            self.seed,
            self.learning_rate,
            self.lambda_score,
            self.lambda_policy,
            self.fusion,
            self.chunk_size,
            self.detach_scores,
            self.score_head_input.as_str(),
            self.noise_sigma,
            self.data_dir.display(),
            self.label_dir.display(),
            self.checkpoint_out.display(),
            self.report_out.display(),
        )
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.fusion,
            score_head_input: self.score_head_input,
            chunk_size: self.chunk_size,
            detach_scores: self.detach_scores,
        }
    }

    /// λ₁ is forced to zero for variants that do not train scores; for
    /// everything else the configured weights apply.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            score: if self.fusion.trains_scores() { self.lambda_score } else { 0.0 },
            policy: self.lambda_policy,
        }
    }
}

/// One training sample address: (episode index, frame index).
#[derive(Debug, Clone, Copy)]
pub struct Sample {
    pub episode: usize,
    pub frame: usize,
}

pub struct Dataset {
    pub episodes: Vec<EpisodeRecord>,
    pub labels: Vec<Vec<ImportanceLabel>>,
    pub train: Vec<Sample>,
    pub holdout: Vec<Sample>,
    pub chunk: usize,
}

impl Dataset {
    pub fn train_len(&self) -> usize {
        self.train.len()
    }

    pub fn holdout_len(&self) -> usize {
        self.holdout.len()
    }
}

/// Pair episodes with their per-frame labels; sample at frame t targets the
/// next `chunk` expert actions (final action repeated past the episode
/// end). Episode-level 90/10 split: the ceil(n/10) highest seeds hold out.
pub fn make_dataset(
    mut episodes: Vec<EpisodeRecord>,
    labels_by_seed: &[LabelFile],
    chunk: usize,
) -> Result<Dataset> {
    episodes.sort_by_key(|e| e.seed);
    let mut labels = Vec::with_capacity(episodes.len());
    for ep in &episodes {
        let lf = labels_by_seed
            .iter()
            .find(|l| l.seed == ep.seed && l.task == ep.task)
            .ok_or_else(|| Error::Config(format!("no label file for episode {}", ep.file_name())))?;
        if lf.labels.len() != ep.len() {
            return Err(Error::LengthMismatch {
                what: format!("labels vs frames for episode {}", ep.file_name()),
                lhs: lf.labels.len(),
                rhs: ep.len(),
            });
        }
        labels.push(lf.labels.clone());
    }
    let n = episodes.len();
    let holdout_count = (n.div_ceil(10)).max(1).min(n.saturating_sub(1));
    let split = n - holdout_count;
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for (i, ep) in episodes.iter().enumerate() {
        let dst = if i < split { &mut train } else { &mut holdout };
        for t in 0..ep.len() {
            dst.push(Sample { episode: i, frame: t });
        }
    }
    Ok(Dataset { episodes, labels, train, holdout, chunk })
}

/// Assemble batch tensors for a slice of samples.
pub fn batch_tensors(ds: &Dataset, samples: &[Sample]) -> ([Tensor; 3], Tensor, Tensor, Tensor) {
    let b = samples.len();
    let sizes = [24 * 24, 48 * 48, 24 * 24];
    let mut views: [Vec<f64>; 3] =
        [Vec::with_capacity(b * sizes[0]), Vec::with_capacity(b * sizes[1]), Vec::with_capacity(b * sizes[2])];
    let mut proprio = Vec::with_capacity(b * ACTION_DIM);
    let mut label_data = Vec::with_capacity(b * 3);
    let mut chunks = Vec::with_capacity(b * ds.chunk * ACTION_DIM);
    for s in samples {
        let ep = &ds.episodes[s.episode];
        let frame = &ep.frames[s.frame];
        for (dst, img) in views.iter_mut().zip(&frame.views) {
            dst.extend(img.pixels.iter().map(|&p| p as f64));
        }
        proprio.extend(frame.proprio.iter().map(|&v| v as f64));
        label_data.extend(ds.labels[s.episode][s.frame].as_f64());
        for k in 0..ds.chunk {
            let idx = (s.frame + k).min(ep.len() - 1);
            chunks.extend(
                ep.frames[idx]
                    .action
                    .iter()
                    .zip(crate::policy::ACTION_SCALE)
                    .map(|(&v, scale)| v as f64 * scale),
            );
        }
    }
    let [lv, tv, rv] = views;
    (
        [
            Tensor::from_vec(lv, &[b, sizes[0]]).unwrap(),
            Tensor::from_vec(tv, &[b, sizes[1]]).unwrap(),
            Tensor::from_vec(rv, &[b, sizes[2]]).unwrap(),
        ],
        Tensor::from_vec(proprio, &[b, ACTION_DIM]).unwrap(),
        Tensor::from_vec(label_data, &[b, 3]).unwrap(),
        Tensor::from_vec(chunks, &[b, ds.chunk * ACTION_DIM]).unwrap(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub score_loss: f64,
    pub policy_loss: f64,
    pub total_loss: f64,
    pub holdout_score_acc: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("epoch,score_loss,policy_loss,total_loss,holdout_score_acc,wall_time_s\n");
        for r in &self.rows {
            let acc = r.holdout_score_acc.map(|a| format!("{a}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{acc},{}\n",
                r.epoch, r.score_loss, r.policy_loss, r.total_loss, r.wall_time_s
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<TrainReport> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Config(format!("report line {}: expected 6 fields", i + 1)));
            }
            let parse = |s: &str| s.parse::<f64>().map_err(|_| Error::Config(format!("bad number {s:?}")));
            rows.push(EpochRow {
                epoch: f[0].parse().map_err(|_| Error::Config(format!("bad epoch {:?}", f[0])))?,
                score_loss: parse(f[1])?,
                policy_loss: parse(f[2])?,
                total_loss: parse(f[3])?,
                holdout_score_acc: if f[4].is_empty() { None } else { Some(parse(f[4])?) },
                wall_time_s: parse(f[5])?,
            });
        }
        Ok(TrainReport { rows })
    }

    pub fn best_holdout_acc(&self) -> Option<f64> {
        self.rows.iter().filter_map(|r| r.holdout_score_acc).fold(None, |m, a| {
            Some(m.map_or(a, |m: f64| m.max(a)))
        })
    }
}

/// Exact-match accuracy of thresholded scores against labels on a sample set.
pub fn holdout_score_accuracy(model: &BfaModel, ds: &Dataset, samples: &[Sample]) -> Option<f64> {
    model.score_head.as_ref()?;
    if samples.is_empty() {
        return None;
    }
    let mut hits = 0usize;
    for block in samples.chunks(256) {
        let (views, proprio, labels, _) = batch_tensors(ds, block);
        let mut g = Graph::frozen();
        let pass = model.forward(&mut g, &views, &proprio, ViewMask::full(), false).ok()?;
        let scores = pass.scores.as_ref()?;
        for (row, lab) in scores.data().chunks(3).zip(labels.data().chunks(3)) {
            let ok = row
                .iter()
                .zip(lab)
                .all(|(&s, &l)| (s >= 0.5) == (l >= 0.5));
            if ok {
                hits += 1;
            }
        }
    }
    Some(hits as f64 / samples.len() as f64)
}

/// Load the episodes and labels a config points at.
pub fn load_training_data(cfg: &TrainConfig) -> Result<(Vec<EpisodeRecord>, Vec<LabelFile>)> {
    let mut episodes = Vec::new();
    let prefix = format!("{}_", cfg.task);
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&cfg.data_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "bfae")
                && p.file_stem().and_then(|s| s.to_str()).is_some_and(|s| s.starts_with(&prefix))
        })
        .collect();
    entries.sort();
    for path in entries {
        episodes.push(crate::sim::read_episode(&path)?);
    }
    episodes.sort_by_key(|e| e.seed);
    if episodes.len() < cfg.episodes {
        return Err(Error::Config(format!(
            "need {} episodes of task {} in {}, found {}",
            cfg.episodes,
            cfg.task,
            cfg.data_dir.display(),
            episodes.len()
        )));
    }
    episodes.truncate(cfg.episodes);
    let mut labels = Vec::new();
    for ep in &episodes {
        let path = cfg.label_dir.join(format!("{}_{}.labels", ep.task, ep.seed));
        labels.push(crate::annotate::read_label_file(&path)?);
    }
    Ok((episodes, labels))
}

/// Run training per the config: deterministic given the seed, writes the
/// checkpoint (parameters + config echo) and the per-epoch report.
pub fn train_run(cfg: &TrainConfig) -> Result<(BfaModel, TrainReport)> {
    let (episodes, labels) = load_training_data(cfg)?;
    let ds = make_dataset(episodes, &labels, cfg.chunk_size)?;
    train_on_dataset(cfg, &ds)
}

/// Training loop against an already-built dataset (shared by the ablation
/// harness, which reuses one dataset across strategies).
pub fn train_on_dataset(cfg: &TrainConfig, ds: &Dataset) -> Result<(BfaModel, TrainReport)> {
    let model = BfaModel::new(&cfg.model_config(), cfg.seed);
    let params = model.params();
    let mut opt = OptimizerState::new(&params, cfg.learning_rate);
    let weights = cfg.effective_weights();
    let compute_score = model.score_head.is_some() && weights.score != 0.0;

    let mut report = TrainReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ 0x7141);
    let mut order: Vec<usize> = (0..ds.train.len()).collect();

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        let mut batches = 0usize;
        for (batch_idx, idxs) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<Sample> = idxs.iter().map(|&i| ds.train[i]).collect();
            let (views, proprio, label_t, chunk_t) = batch_tensors(ds, &samples);
            let mut g = Graph::trainable();
            let pass = model.forward(&mut g, &views, &proprio, ViewMask::full(), false)?;
            let lp = policy_loss(&mut g, &pass.pred, &chunk_t)?;
            let ls = if compute_score {
                score_loss(&mut g, pass.scores.as_ref().unwrap(), &label_t)?
            } else {
                Tensor::scalar(0.0)
            };
            let loss = total_loss(&mut g, &ls, &lp, weights)?;
            let (lsv, lpv, lv) = (ls.item(), lp.item(), loss.item());
            if !lv.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("loss at epoch {epoch}, batch {batch_idx}"),
                });
            }
            g.tape.backward(&loss)?;
            adam_step(&params, &mut opt)?;
            sums.0 += lsv;
            sums.1 += lpv;
            sums.2 += lv;
            batches += 1;
        }
        let denom = batches.max(1) as f64;
        report.rows.push(EpochRow {
            epoch,
            score_loss: sums.0 / denom,
            policy_loss: sums.1 / denom,
            total_loss: sums.2 / denom,
            holdout_score_acc: holdout_score_accuracy(&model, ds, &ds.holdout),
            wall_time_s: t0.elapsed().as_secs_f64(),
        });
    }

    save_model_checkpoint(&model, cfg, &cfg.checkpoint_out)?;
    std::fs::write(&cfg.report_out, report.to_csv())?;
    Ok((model, report))
}

/// Write parameters plus the config echo under the reserved record name.
pub fn save_model_checkpoint(model: &BfaModel, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let mut records = vec![Record::from_text(CONFIG_RECORD, &cfg.to_text())];
    for p in model.params() {
        records.push(Record::new(p.name(), p.shape(), p.data_clone()));
    }
    write_checkpoint(path, &records)
}

/// Rebuild a model from a checkpoint; every parameter must be covered.
pub fn load_model_checkpoint(path: &Path) -> Result<(BfaModel, TrainConfig)> {
    let records = read_checkpoint(path)?;
    let echo = records
        .iter()
        .find(|r| r.name == CONFIG_RECORD)
        .ok_or_else(|| Error::Checkpoint(format!("{} lacks the config record", path.display())))?
        .to_text()?;
    let cfg = TrainConfig::from_text(&echo)?;
    let model = BfaModel::new(&cfg.model_config(), cfg.seed);
    let mut loaded = 0usize;
    for p in model.params() {
        let rec = records
            .iter()
            .find(|r| r.name == p.name())
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter record {}", p.name())))?;
        if rec.dims != p.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {} has dims {:?}, expected {:?}",
                p.name(),
                rec.dims,
                p.shape()
            )));
        }
        p.set_data(rec.payload.clone());
        loaded += 1;
    }
    let param_records = records.iter().filter(|r| r.name != CONFIG_RECORD).count();
    if param_records != loaded {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {param_records} parameter records but the model expects {loaded}"
        )));
    }
    Ok((model, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_roundtrip() {
        let cfg = TrainConfig::default();
        let echo = cfg.to_text();
        let back = TrainConfig::from_text(&echo).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = TrainConfig::from_text("task = unzip\nbogus_key = 3\n").unwrap_err();
        assert!(err.to_string().contains("bogus_key"));
    }

    #[test]
    fn lambda_forced_zero_for_unsupervised_scores() {
        let mut cfg = TrainConfig::default();
        cfg.fusion = "no_score_loss".parse().unwrap();
        assert_eq!(cfg.effective_weights().score, 0.0);
        cfg.fusion = "bfa".parse().unwrap();
        cfg.lambda_score = 0.7;
        assert_eq!(cfg.effective_weights().score, 0.7);
    }

    #[test]
    fn report_csv_roundtrip() {
        let report = TrainReport {
            rows: vec![
                EpochRow {
                    epoch: 0,
                    score_loss: 0.5,
                    policy_loss: 0.25,
                    total_loss: 0.75,
                    holdout_score_acc: Some(0.875),
                    wall_time_s: 1.5,
                },
                EpochRow {
                    epoch: 1,
                    score_loss: 0.0,
                    policy_loss: 0.125,
                    total_loss: 0.125,
                    holdout_score_acc: None,
                    wall_time_s: 1.25,
                },
            ],
        };
        let back = TrainReport::from_csv(&report.to_csv()).unwrap();
        assert_eq!(report, back);
    }
}
