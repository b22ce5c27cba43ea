use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use m3_core::harness::experiment::{evaluate, evaluation_instances, schedule_for, write_evaluation, write_loss_csv};
use m3_core::harness::synthetic::{generate_dataset, QuestionKind};
use m3_core::harness::{compare_baselines, run_experiment, ExperimentConfig, RunOptions, RunOutcome};
use m3_core::roofline::{cost_report, write_table_csv};
use m3_core::scale_analysis::{budget_allocations, oracle_aggregate, CorrectnessMatrix};
use m3_core::tensor_file::{read_grid, write_grid};
use m3_core::token_pyramid::{build_pyramid, ScaleSchedule};
use m3_core::toy_lmm::{read_checkpoint, write_checkpoint};
use m3_core::training::{train, Example};
use m3_core::{Exec, M3Error, Result};

#[derive(Parser)]
#[command(name = "m3", version, about = "Nested visual token pyramids on a toy multimodal model")]
struct Cli {
    /// Seed for dataset generation and model initialization (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for written artifacts.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Run data-parallel loops on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the token pyramid of a grid file and write one file per scale.
    Pyramid {
        input: PathBuf,
        /// Print the schedule as JSON and write nothing.
        #[arg(long)]
        schedule_only: bool,
    },
    /// Train on the synthetic task; writes loss.csv and checkpoint.bin.
    Train,
    /// Evaluate a checkpoint on the test split at every scale.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Oracle scale selection over a correctness CSV; prints a JSON report.
    Oracle {
        #[arg(long)]
        matrix: PathBuf,
    },
    /// Prefill cost table as CSV.
    Roofline {
        /// Visual tokens for a single row.
        #[arg(long)]
        tokens: Option<usize>,
        /// Comma-separated visual-token counts, one row each.
        #[arg(long, value_delimiter = ',')]
        table: Option<Vec<usize>>,
        /// Text tokens added to every row (default from the config).
        #[arg(long)]
        text_tokens: Option<usize>,
    },
    /// Units versus tokens-per-unit under a fixed visual-token budget.
    Budget {
        #[arg(long)]
        budget: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,9,36,144,576")]
        schedule: Vec<usize>,
    },
    /// Pyramid tokens versus training-free pooling and sampling at matched budgets.
    Compare {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Model used for the training-free methods (default: the same checkpoint).
        #[arg(long)]
        baseline_checkpoint: Option<PathBuf>,
        /// Comma-separated token budgets (default: the whole schedule).
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        /// Question kind to evaluate on.
        #[arg(long, default_value = "local-glyph")]
        kind: String,
    },
    /// Full staged experiment with a run log.
    Run {
        /// Validate and print the plan without writing anything.
        #[arg(long)]
        dry_run: bool,
        /// Re-run a run id that already completed.
        #[arg(long)]
        force: bool,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let cfg = match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn out_file(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn parse_kind(label: &str) -> Result<QuestionKind> {
    QuestionKind::ALL
        .into_iter()
        .find(|k| k.label() == label)
        .ok_or_else(|| M3Error::InvalidArgument(format!("unknown question kind `{label}`")))
}

fn execute(cli: &Cli) -> Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    let stdout = io::stdout();
    match &cli.command {
        Command::Pyramid { input, schedule_only } => {
            let grid = read_grid(input)?;
            let pyramid = build_pyramid(&grid)?;
            if *schedule_only {
                serde_json::to_writer(stdout.lock(), pyramid.schedule())?;
                println!();
                return Ok(());
            }
            fs::create_dir_all(&cli.out_dir)?;
            for scale in pyramid.scales() {
                let path = cli.out_dir.join(format!("scale_{}.bin", scale.len()));
                write_grid(&path, scale)?;
                println!("{}", path.display());
            }
        }
        Command::Train => {
            let cfg = load_config(cli)?;
            let data = generate_dataset(cfg.run.seed, &cfg.data)?;
            let train_set: Vec<Example> = data.train.iter().map(|i| i.example(&cfg.data)).collect();
            let validation: Vec<Example> = evaluation_instances(&data, cfg.train.eval_samples.div_ceil(2))
                .iter()
                .map(|i| i.example(&cfg.data))
                .collect();
            let outcome = train(&cfg.model, &train_set, &validation, &cfg.train, exec)?;
            let schedule = schedule_for(cfg.model.encoder_grid)?;
            write_loss_csv(out_file(&cli.out_dir, "loss.csv")?, &outcome.curve, &schedule)?;
            write_checkpoint(&cli.out_dir.join("checkpoint.bin"), &outcome.params, cfg.train.seed)?;
        }
        Command::Eval { checkpoint } => {
            let cfg = load_config(cli)?;
            let (params, _) = read_checkpoint(checkpoint)?;
            let data = generate_dataset(cfg.run.seed, &cfg.data)?;
            let instances = evaluation_instances(&data, cfg.run.eval_per_kind);
            let eval = evaluate(&params, &instances, &cfg.data, exec)?;
            fs::create_dir_all(&cli.out_dir)?;
            write_evaluation(&cli.out_dir, &eval)?;
            eval.write_accuracy_csv(stdout.lock())?;
        }
        Command::Oracle { matrix } => {
            let m = CorrectnessMatrix::read_csv(File::open(matrix)?)?;
            let report = oracle_aggregate(&m, exec)?;
            serde_json::to_writer_pretty(stdout.lock(), &report)?;
            println!();
        }
        Command::Roofline { tokens, table, text_tokens } => {
            let cfg = load_config(cli)?;
            let rows: Vec<usize> = match (table, tokens) {
                (Some(t), _) => t.clone(),
                (None, Some(n)) => vec![*n],
                (None, None) => return Err(M3Error::InvalidArgument("give --tokens or --table".into())),
            };
            let text = text_tokens.unwrap_or(cfg.run.text_tokens);
            let reports: Vec<_> = rows.iter().map(|&n| cost_report(&cfg.roofline, n, text)).collect();
            write_table_csv(stdout.lock(), &reports)?;
        }
        Command::Budget { budget, schedule } => {
            let schedule = ScaleSchedule::new(schedule.clone())?;
            let mut w = csv::Writer::from_writer(stdout.lock());
            w.write_record(["units", "tokens_per_unit"])?;
            for a in budget_allocations(*budget, &schedule)? {
                w.write_record(&[a.units.to_string(), a.tokens_per_unit.to_string()])?;
            }
            w.flush()?;
        }
        Command::Compare { checkpoint, baseline_checkpoint, k, kind } => {
            let cfg = load_config(cli)?;
            let kind = parse_kind(kind)?;
            let (params, _) = read_checkpoint(checkpoint)?;
            let baseline = baseline_checkpoint.as_deref().map(read_checkpoint).transpose()?.map(|(p, _)| p);
            let budgets = match k {
                Some(k) => k.clone(),
                None => schedule_for(params.config().encoder_grid)?.sizes().to_vec(),
            };
            let data = generate_dataset(cfg.run.seed, &cfg.data)?;
            let examples: Vec<Example> = evaluation_instances(&data, cfg.run.eval_per_kind)
                .into_iter()
                .filter(|i| i.kind == kind)
                .map(|i| i.example(&cfg.data))
                .collect();
            let table = compare_baselines(&params, baseline.as_ref(), &examples, &budgets, exec)?;
            table.write_csv(stdout.lock())?;
        }
        Command::Run { dry_run, force } => {
            let cfg = load_config(cli)?;
            let opts = RunOptions { dry_run: *dry_run, force: *force, exec };
            let out = match run_experiment(&cfg, &cli.out_dir, &opts)? {
                RunOutcome::Planned(plan) => serde_json::to_string_pretty(&plan)?,
                RunOutcome::Finished(record) => serde_json::to_string_pretty(&record)?,
            };
            println!("{out}");
        }
    }
    io::stdout().flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
