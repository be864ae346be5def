//! Single-binary pipeline front end: gen → annotate → train → eval, plus
//! the ablation sweep, saliency dumps and compute accounting.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use bfa_core::annotate::{
    annotate_episode_frameskip, annotation_agreement, episode_context, ground_truth_labels,
    write_label_file, FixtureClient, HttpVlmClient, RuleClassifier, StageRuleTable,
    StateClassifier, VlmStateClassifier,
};
use bfa_core::eval::{count_flops, emit_report, evaluate, rollout, EvalReport};
use bfa_core::model::{frame_proprio_tensor, frame_view_tensors, PolicyVariant, ViewMask};
use bfa_core::perception::{write_pgm, ScoreHeadInput, VIEW_NAMES};
use bfa_core::sim::{generate_episode, read_episode, write_episode, TaskName, TaskSpec};
use bfa_core::train::{load_model_checkpoint, train_run, TrainConfig};

#[derive(Parser)]
#[command(
    name = "bfa",
    about = "Best-feature-aware multi-view fusion pipeline: synthetic demonstrations, importance annotation, policy training and evaluation",
    version
)]
struct Cli {
    /// Base directory all relative paths resolve against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Worker threads for parallel sections (default: logical cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate expert demonstration episodes (.bfae files).
    Gen(GenArgs),
    /// Annotate episodes with per-frame importance labels.
    Annotate(AnnotateArgs),
    /// Train a policy from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint with seeded rollouts.
    Eval(EvalArgs),
    /// Train + evaluate every requested fusion strategy and tabulate.
    Ablate(AblateArgs),
    /// Write Grad-CAM heatmaps for one frame of an episode.
    Saliency(SaliencyArgs),
    /// Static compute accounting for an architecture configuration.
    Flops(FlopsArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Task name: unzip, open_box or fold_towel.
    #[arg(long)]
    task: String,
    /// Number of episodes (seeds seed..seed+episodes).
    #[arg(long, default_value_t = 50)]
    episodes: u64,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pixel-noise std applied to views without the active target.
    #[arg(long, default_value_t = bfa_core::sim::DEFAULT_NOISE_SIGMA)]
    noise_sigma: f64,
    /// Output directory.
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(Args)]
struct AnnotateArgs {
    /// Directory holding .bfae episodes.
    #[arg(long)]
    data: PathBuf,
    /// Classifier backend.
    #[arg(long, default_value = "rule", value_parser = ["rule", "vlm", "fixture"])]
    backend: String,
    /// Fixture transcript (JSON) for the fixture backend.
    #[arg(long)]
    fixture: Option<PathBuf>,
    /// Output directory for label files and the summary.
    #[arg(long, default_value = "labels")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Line-oriented `key = value` config file.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Task to evaluate on (defaults to the checkpoint's task).
    #[arg(long)]
    task: Option<String>,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    /// Views whose features stay live, e.g. "top" or "left,top,right".
    #[arg(long, default_value = "left,top,right")]
    mask: String,
    #[arg(long, default_value = "reports")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    task: String,
    /// Comma-separated strategy tokens (bfa, mean, best, reweight_concat,
    /// no_score_loss, baseline_concat).
    #[arg(long, default_value = "bfa,mean,best,reweight_concat,no_score_loss")]
    strategies: String,
    #[arg(long, default_value_t = 50)]
    episodes: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long, default_value_t = bfa_core::sim::DEFAULT_NOISE_SIGMA)]
    noise_sigma: f64,
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
}

#[derive(Args)]
struct SaliencyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Episode file (.bfae) supplying the frame.
    #[arg(long)]
    episode: PathBuf,
    #[arg(long)]
    frame: usize,
    #[arg(long, default_value = "saliency")]
    out: PathBuf,
}

#[derive(Args)]
struct FlopsArgs {
    /// Fusion configuration to account for.
    #[arg(long, default_value = "bfa", value_parser = ["bfa", "mean", "best", "reweight_concat", "no_score_loss", "baseline_concat"])]
    fusion: String,
    #[arg(long, default_value = "joint", value_parser = ["joint", "per_view"])]
    score_head_input: String,
    #[arg(long, default_value_t = bfa_core::policy::DEFAULT_CHUNK)]
    chunk_size: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: could not configure {jobs} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    if let Err(e) = std::env::set_current_dir(&cli.workdir) {
        eprintln!("error: cannot enter workdir {}: {e}", cli.workdir.display());
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Annotate(args) => cmd_annotate(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Saliency(args) => cmd_saliency(args),
        Command::Flops(args) => cmd_flops(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn parse_task(s: &str) -> anyhow::Result<TaskName> {
    s.parse::<TaskName>().map_err(|e| anyhow!("{e}"))
}

fn cmd_gen(args: GenArgs) -> anyhow::Result<()> {
    let task_name = match parse_task(&args.task) {
        Ok(t) => t,
        Err(e) => {
            // bad task is a usage error per the CLI contract
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    };
    let task = TaskSpec::builtin(task_name);
    std::fs::create_dir_all(&args.out)?;
    use rayon::prelude::*;
    let written: Vec<String> = (args.seed..args.seed + args.episodes)
        .into_par_iter()
        .map(|seed| {
            let ep = generate_episode(&task, seed, args.noise_sigma)
                .with_context(|| format!("seed {seed}"))?;
            let path = args.out.join(ep.record.file_name());
            write_episode(&path, &ep.record)?;
            Ok(path.display().to_string())
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    println!("wrote {} episodes to {}", written.len(), args.out.display());
    Ok(())
}

fn cmd_annotate(args: AnnotateArgs) -> anyhow::Result<()> {
    let rules = StageRuleTable::builtin();
    std::fs::create_dir_all(&args.out)?;
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&args.data)
        .with_context(|| format!("reading {}", args.data.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |x| x == "bfae"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .bfae episodes in {}", args.data.display());
    }

    let mut summary =
        String::from("episode,task,frames,classifier_calls,calls_saved,agreement_vs_truth\n");
    for path in &paths {
        let ep = read_episode(path)?;
        let ctx = episode_context(&ep);
        let mut classifier: Box<dyn StateClassifier> = match args.backend.as_str() {
            "rule" => Box::new(RuleClassifier::default()),
            "vlm" => {
                let client = HttpVlmClient::from_env().map_err(|e| anyhow!("{e}"))?;
                let model = client.model().to_string();
                Box::new(VlmStateClassifier::new(Arc::new(client), model))
            }
            "fixture" => {
                let fixture_path = args
                    .fixture
                    .as_ref()
                    .ok_or_else(|| anyhow!("--fixture FILE is required for the fixture backend"))?;
                Box::new(VlmStateClassifier::fixture(FixtureClient::load(fixture_path)?))
            }
            other => bail!("unknown backend {other}"),
        };
        let result = annotate_episode_frameskip(&ctx, classifier.as_mut(), &rules)
            .with_context(|| format!("annotating {}", path.display()))?;
        let truth = ground_truth_labels(&ep, &rules)?;
        let agreement = annotation_agreement(&result.labels, &truth)?;
        let label_path = args.out.join(format!("{}_{}.labels", ep.task, ep.seed));
        write_label_file(&label_path, ep.task, ep.seed, &result)?;
        summary.push_str(&format!(
            "{},{},{},{},{},{:.4}\n",
            ep.seed,
            ep.task,
            ep.len(),
            result.classifier_calls,
            ep.len().saturating_sub(result.classifier_calls),
            agreement
        ));
    }
    std::fs::write(args.out.join("annotation_summary.csv"), summary)?;
    println!("annotated {} episodes into {}", paths.len(), args.out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let cfg = TrainConfig::from_file(&args.config)?;
    let (_, report) = train_run(&cfg)?;
    let last = report.rows.last();
    println!(
        "trained {} epochs; final losses Ls {:.4} Lp {:.4}; checkpoint {}",
        report.rows.len(),
        last.map(|r| r.score_loss).unwrap_or(0.0),
        last.map(|r| r.policy_loss).unwrap_or(0.0),
        cfg.checkpoint_out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let (model, cfg) = load_model_checkpoint(&args.checkpoint)?;
    let task_name = match args.task {
        Some(t) => parse_task(&t)?,
        None => cfg.task,
    };
    let task = TaskSpec::builtin(task_name);
    let mask = ViewMask::parse(&args.mask)?;
    let report = if mask.is_full() {
        evaluate(&model, &task, args.trials, cfg.noise_sigma)?
    } else {
        masked_evaluate(&model, &task, args.trials, cfg.noise_sigma, mask)?
    };
    let path = emit_report(&report, &args.out)?;
    println!("{}", bfa_core::eval::report_to_csv(&report).trim_end());
    println!("wrote {}", path.display());
    Ok(())
}

/// Masked variant used by the view-selection ablation.
fn masked_evaluate(
    model: &bfa_core::model::BfaModel,
    task: &TaskSpec,
    trials: usize,
    noise_sigma: f64,
    mask: ViewMask,
) -> anyhow::Result<EvalReport> {
    use rayon::prelude::*;
    let outcomes: Vec<_> = (0..trials)
        .into_par_iter()
        .map(|i| rollout(model, task, bfa_core::eval::EVAL_SEED_BASE + i as u64, mask, noise_sigma))
        .collect::<bfa_core::Result<Vec<_>>>()?;
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
    let live: Vec<&str> =
        VIEW_NAMES.iter().zip(mask.0).filter(|(_, m)| *m).map(|(n, _)| *n).collect();
    Ok(EvalReport {
        task: task.name.to_string(),
        strategy: format!("{}_mask_{}", model.cfg.variant, live.join("+")),
        trials,
        stage_names: task.stage_names(),
        stage_rates,
        overall: all_ok as f64 / trials as f64,
        mean_len: len_sum as f64 / trials as f64,
        flops_per_step: flops.total_flops,
        params: flops.total_params,
    })
}

fn cmd_ablate(args: AblateArgs) -> anyhow::Result<()> {
    let task_name = parse_task(&args.task)?;
    let task = TaskSpec::builtin(task_name);
    std::fs::create_dir_all(&args.out)?;
    let data_dir = args.out.join("data");
    let label_dir = args.out.join("labels");

    // shared data + labels for every strategy arm
    if !data_dir.exists() {
        cmd_gen(GenArgs {
            task: args.task.clone(),
            episodes: args.episodes,
            seed: args.seed,
            noise_sigma: args.noise_sigma,
            out: data_dir.clone(),
        })?;
    }
    if !label_dir.exists() {
        cmd_annotate(AnnotateArgs {
            data: data_dir.clone(),
            backend: "rule".into(),
            fixture: None,
            out: label_dir.clone(),
        })?;
    }

    let strategies: Vec<PolicyVariant> = args
        .strategies
        .split(',')
        .map(|s| s.trim().parse::<PolicyVariant>().map_err(|e| anyhow!("{e}")))
        .collect::<anyhow::Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for variant in &strategies {
        let cfg = TrainConfig {
            task: task_name,
            episodes: args.episodes as usize,
            epochs: args.epochs,
            seed: args.seed,
            fusion: *variant,
            noise_sigma: args.noise_sigma,
            data_dir: data_dir.clone(),
            label_dir: label_dir.clone(),
            checkpoint_out: args.out.join(format!("{variant}.bfck")),
            report_out: args.out.join(format!("train_{variant}.csv")),
            ..TrainConfig::default()
        };
        println!("training {variant} ...");
        let (model, _) = train_run(&cfg)?;
        let report = evaluate(&model, &task, args.trials, args.noise_sigma)?;
        emit_report(&report, &args.out)?;
        rows.push(report);
    }

    let mut csv = String::from("strategy");
    for name in task.stage_names() {
        csv.push_str(&format!(",stage:{name}"));
    }
    csv.push_str(",overall,flops_per_step,params\n");
    for r in &rows {
        csv.push_str(&r.strategy.to_string());
        for rate in &r.stage_rates {
            csv.push_str(&format!(",{rate}"));
        }
        csv.push_str(&format!(",{},{},{}\n", r.overall, r.flops_per_step, r.params));
    }
    let path = args.out.join(format!("ablation_{task_name}.csv"));
    std::fs::write(&path, csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_saliency(args: SaliencyArgs) -> anyhow::Result<()> {
    let (model, _cfg) = load_model_checkpoint(&args.checkpoint)?;
    let ep = read_episode(&args.episode)?;
    let frame = ep
        .frames
        .get(args.frame)
        .ok_or_else(|| anyhow!("frame {} out of range (episode has {})", args.frame, ep.len()))?;
    std::fs::create_dir_all(&args.out)?;
    let views = frame_view_tensors(frame);
    let proprio = frame_proprio_tensor(frame);
    for (i, name) in VIEW_NAMES.iter().enumerate() {
        let heat = model.saliency_map(&views, &proprio, i).map_err(|e| anyhow!("{e}"))?;
        let g = model.encoders[i].cfg.grid();
        let path =
            args.out.join(format!("saliency_{}_{}_{}_{}.pgm", ep.task, ep.seed, args.frame, name));
        write_pgm(&path, g, g, &heat)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_flops(args: FlopsArgs) -> anyhow::Result<()> {
    let variant: PolicyVariant = args.fusion.parse().map_err(|e| anyhow!("{e}"))?;
    let cfg = bfa_core::model::ModelConfig {
        variant,
        score_head_input: args
            .score_head_input
            .parse::<ScoreHeadInput>()
            .map_err(|e| anyhow!("{e}"))?,
        chunk_size: args.chunk_size,
        detach_scores: true,
    };
    let report = count_flops(&cfg);
    println!("# FLOPs reported as 2xMAC");
    println!("{:<24} {:>12} {:>12}", "layer", "macs", "params");
    for l in &report.layers {
        println!("{:<24} {:>12} {:>12}", l.name, l.macs, l.params);
    }
    println!("{:<24} {:>12} {:>12}", "total", report.total_macs, report.total_params);
    println!("total_flops {}", report.total_flops);
    println!("policy_input_macs {}", report.policy_input_macs);
    Ok(())
}
