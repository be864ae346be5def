use std::time::Instant;
use bfa_core::annotate::*;
use bfa_core::eval::*;
use bfa_core::model::*;
use bfa_core::sim::*;
use bfa_core::train::*;

#[test]
fn scratch_probe11() {
    let task = TaskSpec::builtin(TaskName::Unzip);
    let rules = StageRuleTable::builtin();
    let mut total = 0.0;
    for seed in 0..12 {
        let ep = generate_episode(&task, seed, 0.15).unwrap();
        let ctx = episode_context(&ep.record);
        let mut c1 = RuleClassifier::default();
        let skip = annotate_episode_frameskip(&ctx, &mut c1, &rules).unwrap();
        let truth = ground_truth_labels(&ep.record, &rules).unwrap();
        total += annotation_agreement(&skip.labels, &truth).unwrap();
    }
    eprintln!("agreement {:.4}", total / 12.0);

    let n_eps = 50;
    let mut episodes = Vec::new();
    let mut labels = Vec::new();
    for seed in 0..n_eps {
        let ep = generate_episode(&task, seed, 0.15).unwrap();
        let ctx = episode_context(&ep.record);
        let mut cls = RuleClassifier::default();
        let res = annotate_episode_frameskip(&ctx, &mut cls, &rules).unwrap();
        labels.push(LabelFile { task: ep.record.task, seed, labels: res.labels, states: res.states });
        episodes.push(ep.record);
    }
    let ds = make_dataset(episodes.clone(), &labels, 24).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.episodes = n_eps as usize;
    cfg.epochs = 30;
    cfg.checkpoint_out = std::env::temp_dir().join("scratch_probe.bfck");
    cfg.report_out = std::env::temp_dir().join("scratch_probe.csv");
    let t1 = Instant::now();
    let (model, report) = train_on_dataset(&cfg, &ds).unwrap();
    eprintln!("trained in {:.1}s; acc {:?}", t1.elapsed().as_secs_f64(), report.rows.last().unwrap().holdout_score_acc);
    let rep = evaluate(&model, &task, 20, 0.15).unwrap();
    eprintln!("eval 20 trials: stages {:?} overall {} mean_len {:.0}", rep.stage_rates, rep.overall, rep.mean_len);
}
