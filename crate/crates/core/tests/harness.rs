use m3_core::harness::experiment::{read_run_log, RunStatus, RUN_LOG};
use m3_core::harness::synthetic::{generate_dataset, QuestionKind, TaskConfig};
use m3_core::harness::{run_experiment, ExperimentConfig, RunOptions, RunOutcome, Stage};
use m3_core::toy_lmm::ModelConfig;
use m3_core::{Exec, M3Error};

fn small_task() -> TaskConfig {
    TaskConfig { grid: 6, patch: 2, train_per_kind: 24, test_per_kind: 8, ..TaskConfig::default() }
}

fn tiny_experiment(name: &str) -> ExperimentConfig {
    let data = small_task();
    let mut cfg = ExperimentConfig::default();
    cfg.model = ModelConfig {
        vocab: data.vocabulary().size(),
        width: 16,
        heads: 2,
        layers: 1,
        max_seq: 48,
        encoder_grid: data.grid,
        patch_size: data.patch,
        image_channels: data.image_channels(),
        visual_channels: 8,
        end_token: 1,
    };
    cfg.data = data;
    cfg.train.steps = 4;
    cfg.train.batch_size = 4;
    cfg.train.eval_interval = 2;
    cfg.train.eval_samples = 4;
    cfg.run.name = name.into();
    cfg.run.eval_per_kind = 4;
    cfg
}

fn run(cfg: &ExperimentConfig, dir: &std::path::Path, force: bool) -> m3_core::Result<RunOutcome> {
    run_experiment(cfg, dir, &RunOptions { dry_run: false, force, exec: Exec::default() })
}

#[test]
fn dataset_is_deterministic_in_seed() {
    let cfg = small_task();
    let a = generate_dataset(5, &cfg).unwrap();
    let b = generate_dataset(5, &cfg).unwrap();
    let c = generate_dataset(6, &cfg).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.train, c.train);
    assert_eq!(a.train.len(), 2 * cfg.train_per_kind);
    assert_eq!(a.test.len(), 2 * cfg.test_per_kind);
}

/// The mean color of the rasterized image identifies the dominant color.
#[test]
fn image_mean_answers_global_color() {
    let cfg = TaskConfig::default();
    let ds = generate_dataset(1, &cfg).unwrap();
    let vocab = cfg.vocabulary();
    for inst in ds.test.iter().filter(|i| i.kind == QuestionKind::GlobalColor) {
        let means = inst.image.rasterize(&cfg).channel_means();
        let best = (0..cfg.colors).max_by(|&a, &b| means[a].total_cmp(&means[b])).unwrap();
        assert!(means[best] > 0.5);
        assert_eq!(inst.answer[0], vocab.color(best));
    }
}

/// Glyph channels average to zero, so the image mean says nothing about the glyph.
#[test]
fn image_mean_is_glyph_free() {
    let cfg = TaskConfig::default();
    let ds = generate_dataset(2, &cfg).unwrap();
    for inst in ds.test.iter().filter(|i| i.kind == QuestionKind::LocalGlyph).take(64) {
        let means = inst.image.rasterize(&cfg).channel_means();
        assert!(means[cfg.colors + 1..].iter().all(|&m| m == 0.0));
        let cell = inst.image.marked;
        let vocab = cfg.vocabulary();
        assert_eq!(inst.question[1], vocab.row(cell / cfg.grid));
        assert_eq!(inst.question[2], vocab.col(cell % cfg.grid));
    }
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_experiment("dry");
    let out = run_experiment(&cfg, dir.path(), &RunOptions { dry_run: true, force: false, exec: Exec::Sequential }).unwrap();
    match out {
        RunOutcome::Planned(plan) => {
            assert_eq!(plan.run_id, "dry");
            assert_eq!(plan.stages, Stage::ALL.to_vec());
            assert_eq!(plan.config_hash, cfg.hash());
        }
        RunOutcome::Finished(_) => panic!("dry run executed"),
    }
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn full_run_writes_artifacts_and_guards_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_experiment("full");
    let record = match run(&cfg, dir.path(), false).unwrap() {
        RunOutcome::Finished(r) => r,
        RunOutcome::Planned(_) => panic!("not executed"),
    };
    assert_eq!(record.status, RunStatus::Completed);
    assert!(record.checkpoint_hash.is_some());
    assert!(record.metrics["final_loss"].is_finite());
    let run_dir = dir.path().join("full");
    for f in ["config.toml", "schedule.json", "loss.csv", "checkpoint.bin", "correctness.csv", "accuracy.csv", "oracle.json", "roofline.csv"] {
        assert!(run_dir.join(f).exists(), "{f} missing");
    }
    let back = ExperimentConfig::load(&run_dir.join("config.toml")).unwrap();
    assert_eq!(back.hash(), cfg.hash());

    let again = run(&cfg, dir.path(), false);
    assert!(matches!(again, Err(M3Error::RunExists(_))), "{again:?}");
    assert!(run(&cfg, dir.path(), true).is_ok());

    let log = read_run_log(&dir.path().join(RUN_LOG)).unwrap();
    assert_eq!(log.len(), 2);
    // identical configs reproduce the checkpoint byte for byte
    assert_eq!(log[0].checkpoint_hash, log[1].checkpoint_hash);
}

#[test]
fn stage_failure_is_logged() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_experiment("no-train");
    cfg.run.stages = vec![Stage::Evaluate];
    let err = run(&cfg, dir.path(), false).unwrap_err();
    assert!(matches!(&err, M3Error::Stage { stage, .. } if stage == "evaluate"), "{err}");
    let log = read_run_log(&dir.path().join(RUN_LOG)).unwrap();
    assert_eq!(log[0].status, RunStatus::Failed);
    assert_eq!(log[0].failed_stage.as_deref(), Some("evaluate"));
    assert!(log[0].error.is_some());
    // a failed run may be retried without --force
    assert!(matches!(run(&cfg, dir.path(), false), Err(M3Error::Stage { .. })));
}

#[test]
fn stages_run_in_isolation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_experiment("roofline-only");
    cfg.run.stages = vec![Stage::Roofline];
    run(&cfg, dir.path(), false).unwrap();
    let run_dir = dir.path().join("roofline-only");
    let table = std::fs::read_to_string(run_dir.join("roofline.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + cfg.run.roofline_tokens.len());
    assert!(!run_dir.join("checkpoint.bin").exists());
}

#[test]
fn invalid_config_is_rejected_before_any_write() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_experiment("bad");
    cfg.model.encoder_grid = 12;
    let err = run(&cfg, dir.path(), false).unwrap_err();
    assert!(err.is_validation(), "{err}");
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn seed_override_changes_the_run_id() {
    let base = ExperimentConfig::default();
    let a = base.clone().with_seed(1);
    let b = base.with_seed(2);
    assert_eq!(a.train.seed, 1);
    assert_eq!(a.run.seed, 1);
    assert_ne!(a.run_id(), b.run_id());
    assert!(a.run_id().starts_with("run-"));
}
