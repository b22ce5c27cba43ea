//! Staged experiment runs with on-disk artifacts and an append-only run log.
//!
//! Layout under the output directory:
//!
//! ```text
//! runs.jsonl                 one RunRecord per attempt, appended
//! <run id>/config.toml       snapshot of the effective configuration
//! <run id>/schedule.json     pyramid stage
//! <run id>/loss.csv          train stage: step, loss, per-scale validation accuracy
//! <run id>/checkpoint.bin    train stage
//! <run id>/accuracy.csv      evaluate stage: per-scale test accuracy by question kind
//! <run id>/correctness.csv   evaluate stage: per-sample, per-scale correctness
//! <run id>/compare-<kind>.csv evaluate stage: method x budget accuracy
//! <run id>/oracle.json       oracle stage
//! <run id>/roofline.csv      roofline stage
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::compare::{compare_baselines, BaselineTable};
use super::config::{ExperimentConfig, Stage};
use super::synthetic::{generate_dataset, Dataset, QuestionKind, TaskInstance};
use crate::error::{M3Error, Result};
use crate::par::Exec;
use crate::roofline::{cost_report, write_table_csv};
use crate::scale_analysis::{oracle_aggregate, CorrectnessMatrix};
use crate::token_pyramid::{build_pyramid, ScaleSchedule, TokenGrid};
use crate::toy_lmm::{read_checkpoint, write_checkpoint_to, ModelParams};
use crate::training::{scale_correctness, train, CurvePoint, Example};

pub const RUN_LOG: &str = "runs.jsonl";
pub const CHECKPOINT: &str = "checkpoint.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub status: RunStatus,
    pub config_hash: String,
    pub config: ExperimentConfig,
    /// `sha256("blob <len>\0" ++ bytes)` of the checkpoint file.
    pub checkpoint_hash: Option<String>,
    pub metrics: BTreeMap<String, f64>,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    /// Seconds since the Unix epoch.
    pub started_at: f64,
    pub finished_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    pub run_id: String,
    pub config_hash: String,
    pub run_dir: PathBuf,
    pub stages: Vec<Stage>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub dry_run: bool,
    pub force: bool,
    pub exec: Exec,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Planned(RunPlan),
    Finished(RunRecord),
}

/// Content hash in the style of git's object ids, over SHA-256.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn read_run_log(path: &Path) -> Result<Vec<RunRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn append_record(path: &Path, record: &RunRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    f.write_all(&line)?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Evaluation subset: the first `per_kind` test instances of each kind, in
/// dataset order.
pub fn evaluation_instances(dataset: &Dataset, per_kind: usize) -> Vec<&TaskInstance> {
    let mut seen = [0usize; 2];
    dataset
        .test
        .iter()
        .filter(|inst| {
            let k = QuestionKind::ALL.iter().position(|&q| q == inst.kind).expect("known kind");
            seen[k] += 1;
            seen[k] <= per_kind
        })
        .collect()
}

pub fn schedule_for(grid_side: usize) -> Result<ScaleSchedule> {
    Ok(build_pyramid(&TokenGrid::<f32>::filled(grid_side, grid_side, 1, 0.0)?)?.schedule().clone())
}

pub fn write_loss_csv<W: Write>(out: W, curve: &[CurvePoint], schedule: &ScaleSchedule) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string(), "loss".to_string()];
    header.extend(schedule.sizes().iter().map(|s| format!("acc_{s}")));
    w.write_record(&header)?;
    for p in curve {
        let mut rec = vec![p.step.to_string(), format!("{}", p.loss)];
        match &p.scale_accuracy {
            Some(acc) => rec.extend(acc.iter().map(|a| format!("{a:.4}"))),
            None => rec.extend(std::iter::repeat(String::new()).take(schedule.len())),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Everything the evaluate stage derives from a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub matrix: CorrectnessMatrix,
    pub kinds: Vec<QuestionKind>,
    /// Per-scale accuracy per question kind, coarsest first.
    pub accuracy: BTreeMap<&'static str, Vec<f64>>,
    pub compare: Vec<(QuestionKind, BaselineTable)>,
}

impl Evaluation {
    pub fn kind_matrix(&self, kind: QuestionKind) -> CorrectnessMatrix {
        self.matrix.filter(|i| self.kinds[i] == kind)
    }

    pub fn write_accuracy_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["subset".to_string()];
        header.extend(self.matrix.schedule().sizes().iter().map(|s| s.to_string()));
        w.write_record(&header)?;
        for (name, acc) in &self.accuracy {
            let mut rec = vec![name.to_string()];
            rec.extend(acc.iter().map(|a| format!("{a:.4}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-scale correctness, accuracy by kind, and the baseline comparison at
/// every schedule size. Pure function of the checkpoint and the instances.
pub fn evaluate(
    params: &ModelParams<f32>,
    instances: &[&TaskInstance],
    task: &super::synthetic::TaskConfig,
    exec: Exec,
) -> Result<Evaluation> {
    let schedule = schedule_for(params.config().encoder_grid)?;
    let examples: Vec<Example> = instances.iter().map(|i| i.example(task)).collect();
    let rows = scale_correctness(params, &examples, exec)?;
    let ids = instances.iter().map(|i| i.id.clone()).collect();
    let matrix = CorrectnessMatrix::new(schedule.clone(), ids, rows)?;
    let kinds: Vec<QuestionKind> = instances.iter().map(|i| i.kind).collect();
    let mut accuracy = BTreeMap::new();
    accuracy.insert("all", crate::scale_analysis::accuracy_curve(&matrix)?);
    let mut compare = Vec::new();
    for kind in QuestionKind::ALL {
        let sub: Vec<Example> =
            examples.iter().zip(&kinds).filter(|(_, k)| **k == kind).map(|(e, _)| e.clone()).collect();
        if sub.is_empty() {
            continue;
        }
        let m = matrix.filter(|i| kinds[i] == kind);
        accuracy.insert(kind.label(), crate::scale_analysis::accuracy_curve(&m)?);
        compare.push((kind, compare_baselines(params, None, &sub, schedule.sizes(), exec)?));
    }
    Ok(Evaluation { matrix, kinds, accuracy, compare })
}

pub fn write_evaluation(dir: &Path, eval: &Evaluation) -> Result<()> {
    eval.matrix.write_csv(create(&dir.join("correctness.csv"))?)?;
    eval.write_accuracy_csv(create(&dir.join("accuracy.csv"))?)?;
    for (kind, table) in &eval.compare {
        table.write_csv(create(&dir.join(format!("compare-{}.csv", kind.label())))?)?;
    }
    Ok(())
}

struct StageRunner<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    exec: Exec,
    dataset: Option<Dataset>,
    params: Option<ModelParams<f32>>,
    checkpoint_hash: Option<String>,
    metrics: BTreeMap<String, f64>,
}

impl StageRunner<'_> {
    fn dataset(&mut self) -> Result<&Dataset> {
        if self.dataset.is_none() {
            self.dataset = Some(generate_dataset(self.cfg.run.seed, &self.cfg.data)?);
        }
        Ok(self.dataset.as_ref().expect("just generated"))
    }

    fn params(&mut self) -> Result<&ModelParams<f32>> {
        if self.params.is_none() {
            let path = self.dir.join(CHECKPOINT);
            if !path.exists() {
                return Err(M3Error::InvalidArgument(format!(
                    "no checkpoint at {}; include the train stage",
                    path.display()
                )));
            }
            let (p, _) = read_checkpoint(&path)?;
            self.checkpoint_hash = Some(content_hash(&fs::read(&path)?));
            self.params = Some(p);
        }
        Ok(self.params.as_ref().expect("just loaded"))
    }

    fn run(&mut self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Pyramid => {
                let schedule = schedule_for(self.cfg.model.encoder_grid)?;
                serde_json::to_writer(create(&self.dir.join("schedule.json"))?, &schedule)?;
                self.metrics.insert("scales".into(), schedule.len() as f64);
            }
            Stage::Train => {
                let cfg = self.cfg;
                let exec = self.exec;
                let data = self.dataset()?;
                let train_set: Vec<Example> = data.train.iter().map(|i| i.example(&cfg.data)).collect();
                let validation: Vec<Example> = evaluation_instances(data, cfg.train.eval_samples.div_ceil(2))
                    .iter()
                    .map(|i| i.example(&cfg.data))
                    .collect();
                let outcome = train(&cfg.model, &train_set, &validation, &cfg.train, exec)?;
                let schedule = schedule_for(cfg.model.encoder_grid)?;
                write_loss_csv(create(&self.dir.join("loss.csv"))?, &outcome.curve, &schedule)?;
                let mut bytes = Vec::new();
                write_checkpoint_to(&mut bytes, &outcome.params, cfg.train.seed)?;
                fs::write(self.dir.join(CHECKPOINT), &bytes)?;
                self.checkpoint_hash = Some(content_hash(&bytes));
                if let Some(last) = outcome.curve.last() {
                    self.metrics.insert("final_loss".into(), last.loss as f64);
                }
                self.params = Some(outcome.params);
            }
            Stage::Evaluate => {
                let cfg = self.cfg;
                let exec = self.exec;
                self.dataset()?;
                self.params()?;
                let data = self.dataset.as_ref().expect("loaded");
                let instances = evaluation_instances(data, cfg.run.eval_per_kind);
                let eval = evaluate(self.params.as_ref().expect("loaded"), &instances, &cfg.data, exec)?;
                write_evaluation(&self.dir, &eval)?;
                let sizes = eval.matrix.schedule().sizes().to_vec();
                for (name, acc) in &eval.accuracy {
                    for (s, a) in sizes.iter().zip(acc) {
                        self.metrics.insert(format!("accuracy/{name}/{s}"), *a);
                    }
                }
            }
            Stage::Oracle => {
                let path = self.dir.join("correctness.csv");
                if !path.exists() {
                    return Err(M3Error::InvalidArgument("no correctness.csv; include the evaluate stage".into()));
                }
                let matrix = CorrectnessMatrix::read_csv(File::open(&path)?)?;
                let report = oracle_aggregate(&matrix, self.exec)?;
                serde_json::to_writer_pretty(create(&self.dir.join("oracle.json"))?, &report)?;
                self.metrics.insert("oracle/accuracy".into(), report.oracle_accuracy);
                self.metrics.insert("oracle/mean_tokens".into(), report.mean_tokens);
            }
            Stage::Roofline => {
                let r = &self.cfg.run;
                let reports: Vec<_> =
                    r.roofline_tokens.iter().map(|&n| cost_report(&self.cfg.roofline, n, r.text_tokens)).collect();
                write_table_csv(create(&self.dir.join("roofline.csv"))?, &reports)?;
                if let Some(first) = reports.first() {
                    self.metrics.insert("roofline/prefill_ms".into(), first.prefill_time * 1e3);
                }
            }
        }
        Ok(())
    }
}

/// Validates `cfg`, then either returns the plan (dry run) or executes the
/// configured stages in pipeline order. A completed run id is refused unless
/// `force` is set. Stage failures are logged with the stage name and
/// returned as [`M3Error::Stage`]; artifacts already written are kept.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let run_id = cfg.run_id();
    let config_hash = cfg.hash();
    let run_dir = out_dir.join(&run_id);
    let stages: Vec<Stage> = Stage::ALL.into_iter().filter(|s| cfg.runs(*s)).collect();
    let plan = RunPlan { run_id: run_id.clone(), config_hash: config_hash.clone(), run_dir: run_dir.clone(), stages };
    if opts.dry_run {
        return Ok(RunOutcome::Planned(plan));
    }

    let log = out_dir.join(RUN_LOG);
    let done = read_run_log(&log)?.into_iter().any(|r| r.run_id == run_id && r.status == RunStatus::Completed);
    if done && !opts.force {
        return Err(M3Error::RunExists(run_id));
    }
    fs::create_dir_all(&run_dir)?;
    fs::write(run_dir.join("config.toml"), cfg.to_toml_string()?)?;

    let started_at = now();
    let mut runner = StageRunner {
        cfg,
        dir: run_dir,
        exec: opts.exec,
        dataset: None,
        params: None,
        checkpoint_hash: None,
        metrics: BTreeMap::new(),
    };
    let mut failure = None;
    for &stage in &plan.stages {
        if let Err(e) = runner.run(stage) {
            failure = Some((stage, e));
            break;
        }
    }
    let record = RunRecord {
        run_id,
        status: if failure.is_some() { RunStatus::Failed } else { RunStatus::Completed },
        config_hash,
        config: cfg.clone(),
        checkpoint_hash: runner.checkpoint_hash.take(),
        metrics: std::mem::take(&mut runner.metrics),
        failed_stage: failure.as_ref().map(|(s, _)| s.name().to_string()),
        error: failure.as_ref().map(|(_, e)| e.to_string()),
        started_at,
        finished_at: now(),
    };
    append_record(&log, &record)?;
    match failure {
        Some((stage, e)) => Err(M3Error::Stage { stage: stage.name().into(), message: e.to_string() }),
        None => Ok(RunOutcome::Finished(record)),
    }
}
