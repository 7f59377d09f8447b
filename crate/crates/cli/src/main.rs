use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;

use smdssl_core::augment::first_segment;
use smdssl_core::config::RunConfig;
use smdssl_core::data::{build_pt_dataset, read_visits, write_visits, DatasetStats, SignalStorage, Task, Trajectory};
use smdssl_core::models::{load_checkpoint, save_checkpoint, Model, ParamStore};
use smdssl_core::synth::{default_spec, generate, CohortSpec};
use smdssl_core::train::analysis::{beta_sweep, cka_block_report, cka_csv, sweep_csv};
use smdssl_core::train::pipeline::{evaluate_task, pretrain_stage, test_strategy, Experiment};
use smdssl_core::train::report::{
    curves_csv, epoch_curves, read_json, report_csv, write_json, EvalReport, StrategyReport, TaskReport,
};
use smdssl_core::train::{finetune, CurvePoint, FinetuneOutcome, PretrainOptions, Strategy};

#[derive(Parser)]
#[command(name = "smdssl", version, about = "Two-level self-supervised pre-training on multimodal trajectories")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic cohort.
    GenData {
        /// Cohort spec JSON file, or a preset name (small, medium).
        #[arg(long)]
        spec: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train and write checkpoints and loss curves.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fine-tune a checkpoint on one task with one strategy.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: Task,
        #[arg(long)]
        strategy: Strategy,
    },
    /// Test every fine-tuned model of a run directory and write report.json.
    Eval {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Pretrain, fine-tune with every strategy and evaluate in one go.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Validation and test AUROC against the component weight.
    SweepBeta {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated weights, e.g. 0.25,0.5,1.0,2.0
        #[arg(long, allow_hyphen_values = true)]
        grid: String,
    },
    /// Per-stage CKA of an SMD run against component-only and global-only runs.
    Cka {
        /// Run directories: smd,component_only,global_only
        #[arg(long)]
        runs: String,
        /// Visits JSONL used as the probe set.
        #[arg(long)]
        probe: PathBuf,
        #[arg(long, default_value_t = 64)]
        max_windows: usize,
        /// CSV output; defaults to cka.csv in the SMD run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const PRETRAINED: &str = "pretrained.ckpt";

#[derive(Serialize)]
struct Metadata {
    command: String,
    smdssl_threads: Option<String>,
    version: &'static str,
}

fn write_metadata(dir: &Path, command: &str) -> anyhow::Result<()> {
    let meta = Metadata {
        command: command.to_string(),
        smdssl_threads: std::env::var("SMDSSL_THREADS").ok(),
        version: env!("CARGO_PKG_VERSION"),
    };
    write_json(&dir.join(format!("metadata_{command}.json")), &meta)?;
    Ok(())
}

fn load_spec(spec: &str) -> anyhow::Result<CohortSpec> {
    let path = Path::new(spec);
    if path.exists() {
        let text = std::fs::read_to_string(path)?;
        let s: CohortSpec = serde_json::from_str(&text)
            .map_err(|e| smdssl_core::Error::Config(format!("invalid cohort spec: {e}")))?;
        Ok(s)
    } else {
        Ok(default_spec(spec)?)
    }
}

fn gen_data(spec: &str, out: &Path) -> anyhow::Result<()> {
    let spec = load_spec(spec)?;
    spec.validate()?;
    let cohort = generate(&spec)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_visits(&out.join("visits.jsonl"), &cohort.visits, &SignalStorage::Blob("visits.bin".into()))?;
    let mut latent = String::new();
    for l in &cohort.latent {
        latent.push_str(&serde_json::to_string(l)?);
        latent.push('\n');
    }
    std::fs::write(out.join("latent.jsonl"), latent)?;
    write_json(&out.join("spec.json"), &spec)?;
    println!("wrote {} visits to {}", cohort.visits.len(), out.display());
    Ok(())
}

struct Loaded {
    cfg: RunConfig,
    exp: Experiment,
}

fn load_run(config: &Path) -> anyhow::Result<Loaded> {
    let cfg = RunConfig::load(config)?;
    let visits = read_visits(&cfg.data.visits)?;
    let exp = Experiment::prepare(visits, cfg.split_seed)?;
    Ok(Loaded { cfg, exp })
}

fn prepare_output(cfg: &RunConfig, exp: &Experiment, command: &str) -> anyhow::Result<PathBuf> {
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    std::fs::write(dir.join("config.json"), cfg.to_json()?)?;
    write_json(&dir.join("stats.json"), &exp.stats)?;
    write_json(&dir.join("split.json"), &exp.split)?;
    write_metadata(&dir, command)?;
    Ok(dir)
}

fn run_pretrain(l: &Loaded) -> anyhow::Result<(Model, ParamStore)> {
    let dir = prepare_output(&l.cfg, &l.exp, "pretrain")?;
    let opts = PretrainOptions {
        checkpoint_dir: Some(dir.join("checkpoints")),
        run_config: serde_json::to_value(&l.cfg)?,
        ..PretrainOptions::default()
    };
    let (model, store, curves) = pretrain_stage(&l.exp, &l.cfg.plan(), l.cfg.seed, &opts)?;
    let meta = serde_json::json!({ "seed": l.cfg.seed, "run": serde_json::to_value(&l.cfg)? });
    save_checkpoint(&dir.join("checkpoints").join(PRETRAINED), &store, model.checkpoint_config(meta)?)?;
    std::fs::write(dir.join("curves.csv"), curves_csv(&curves))?;
    write_json(&dir.join("curves.json"), &curves)?;
    if let Some(last) = epoch_curves(&curves).last() {
        println!(
            "pretrained {} steps; last epoch total {:.4}, global {:?}, component {:?}",
            curves.len(),
            last.total,
            last.global,
            last.component
        );
    } else {
        println!("no pre-training requested; saved the initial weights");
    }
    Ok((model, store))
}

fn ft_name(task: Task, strategy: Strategy) -> String {
    format!("ft_{task}_{strategy}")
}

fn run_finetune(l: &Loaded, checkpoint: &Path, task: Task, strategy: Strategy) -> anyhow::Result<()> {
    let dir = prepare_output(&l.cfg, &l.exp, "finetune")?;
    let (header, loaded) = load_checkpoint(checkpoint)?;
    let (model, mut store) = Model::from_checkpoint(&header, &loaded)?;
    let data = l.exp.ft_data(task, &l.cfg.augment, &l.cfg.train, l.cfg.seed)?;
    let out = finetune(&model, &mut store, &data.train, &data.val, &l.exp.stats, strategy, &l.cfg.train, l.cfg.seed)?;
    let name = ft_name(task, strategy);
    let meta = serde_json::json!({ "seed": l.cfg.seed, "task": task, "strategy": strategy });
    save_checkpoint(&dir.join("checkpoints").join(format!("{name}.ckpt")), &store, model.checkpoint_config(meta)?)?;
    write_json(&dir.join(format!("{name}.json")), &out)?;
    println!(
        "{task} {strategy}: best validation AUROC {:.4} at epoch {}",
        out.best_val_auroc, out.best_epoch
    );
    Ok(())
}

fn print_report(report: &EvalReport) {
    for t in &report.tasks {
        println!(
            "{}: chosen {} (val AUROC {:.4}); test AUROC {:.4} [{:.4}, {:.4}], AUPRC {:.4}",
            t.task,
            t.chosen,
            t.chosen_val_auroc,
            t.test.auroc,
            t.test.auroc_ci.lower,
            t.test.auroc_ci.upper,
            t.test.auprc
        );
    }
}

fn write_report(dir: &Path, report: &EvalReport) -> anyhow::Result<()> {
    write_json(&dir.join("report.json"), report)?;
    std::fs::write(dir.join("report.csv"), report_csv(report))?;
    print_report(report);
    Ok(())
}

fn curves_in(dir: &Path) -> anyhow::Result<Vec<CurvePoint>> {
    let path = dir.join("curves.json");
    Ok(if path.exists() { read_json(&path)? } else { Vec::new() })
}

fn run_eval(run_dir: &Path) -> anyhow::Result<()> {
    let config = run_dir.join("config.json");
    if !config.exists() {
        bail!(smdssl_core::Error::Config(format!("{} has no config.json", run_dir.display())));
    }
    let l = load_run(&config)?;
    let mut tasks = Vec::new();
    for &task in &l.cfg.tasks {
        let mut fitted = Vec::new();
        for &strategy in &l.cfg.train.strategies {
            let name = ft_name(task, strategy);
            let ckpt = run_dir.join("checkpoints").join(format!("{name}.ckpt"));
            let trace = run_dir.join(format!("{name}.json"));
            if !ckpt.exists() || !trace.exists() {
                bail!(smdssl_core::Error::Config(format!(
                    "missing fine-tuned model {name}; run finetune for {task} with {strategy} first"
                )));
            }
            fitted.push((strategy, ckpt, trace));
        }
        let data = l.exp.ft_data(task, &l.cfg.augment, &l.cfg.train, l.cfg.seed)?;
        let mut reports = Vec::new();
        for (strategy, ckpt, trace) in fitted {
            let ft: FinetuneOutcome = read_json(&trace)?;
            let (header, loaded) = load_checkpoint(&ckpt)?;
            let (model, store) = Model::from_checkpoint(&header, &loaded)?;
            reports.push(StrategyReport {
                strategy,
                best_epoch: ft.best_epoch,
                val_auroc: ft.best_val_auroc,
                history: ft.history,
                test: test_strategy(&model, &store, &data, &l.exp.stats, l.cfg.train.bootstrap_resamples, l.cfg.seed)?,
            });
        }
        tasks.push(TaskReport::from_strategies(task, reports)?);
    }
    let report = EvalReport {
        seed: l.cfg.seed,
        pretrained: l.cfg.pretrain,
        tasks,
        pt_epochs: epoch_curves(&curves_in(run_dir)?),
    };
    write_metadata(run_dir, "eval")?;
    write_report(run_dir, &report)
}

fn run_all(config: &Path) -> anyhow::Result<()> {
    let l = load_run(config)?;
    let (model, store) = run_pretrain(&l)?;
    let dir = l.cfg.output_dir.clone();
    let plan = l.cfg.plan();
    let tasks = l
        .cfg
        .tasks
        .iter()
        .map(|&t| evaluate_task(&l.exp, &plan, &model, &store, t, l.cfg.seed))
        .collect::<smdssl_core::Result<Vec<_>>>()?;
    let report = EvalReport {
        seed: l.cfg.seed,
        pretrained: l.cfg.pretrain,
        tasks,
        pt_epochs: epoch_curves(&curves_in(&dir)?),
    };
    write_report(&dir, &report)
}

fn parse_grid(grid: &str) -> anyhow::Result<Vec<f64>> {
    let values: Vec<f64> = grid
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| smdssl_core::Error::Config(format!("'{s}' is not a number")))
        })
        .collect::<Result<_, _>>()?;
    if values.is_empty() {
        bail!(smdssl_core::Error::Config("the beta grid is empty".into()));
    }
    if values.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
        bail!(smdssl_core::Error::Config("beta values must be non-negative".into()));
    }
    Ok(values)
}

fn run_sweep(config: &Path, grid: &str) -> anyhow::Result<()> {
    let betas = parse_grid(grid)?;
    let l = load_run(config)?;
    let dir = prepare_output(&l.cfg, &l.exp, "sweep-beta")?;
    let task = l.cfg.tasks[0];
    let rows = beta_sweep(&l.exp, &l.cfg.plan(), &betas, &l.cfg.train.seeds, task)?;
    let csv = sweep_csv(&rows);
    std::fs::write(dir.join("sweep_beta.csv"), &csv)?;
    write_json(&dir.join("sweep_beta.json"), &rows)?;
    print!("{csv}");
    Ok(())
}

struct RunDir {
    cfg: RunConfig,
    model: Model,
    store: ParamStore,
    stats: DatasetStats,
}

fn open_run_dir(dir: &Path) -> anyhow::Result<RunDir> {
    let cfg = RunConfig::load(&dir.join("config.json"))?;
    let (header, loaded) = load_checkpoint(&dir.join("checkpoints").join(PRETRAINED))?;
    let (model, store) = Model::from_checkpoint(&header, &loaded)?;
    let stats = read_json(&dir.join("stats.json"))?;
    Ok(RunDir {
        cfg,
        model,
        store,
        stats,
    })
}

fn run_cka(runs: &str, probe: &Path, max_windows: usize, out: Option<PathBuf>) -> anyhow::Result<()> {
    let dirs: Vec<PathBuf> = runs.split(',').map(|s| PathBuf::from(s.trim())).collect();
    if dirs.len() != 3 {
        bail!(smdssl_core::Error::Config("--runs takes smd,component_only,global_only".into()));
    }
    let opened = dirs.iter().map(|d| open_run_dir(d)).collect::<anyhow::Result<Vec<_>>>()?;
    let smd = &opened[0];
    let visits: Vec<_> = read_visits(probe)?.iter().map(|v| smd.stats.normalize_signals(v)).collect();
    let trajs = build_pt_dataset(&visits, &smd.stats, smd.cfg.train.window, 0)?;
    let probe_set = trajs
        .iter()
        .take(max_windows.max(1))
        .map(|t| first_segment(t, &smd.cfg.augment))
        .collect::<smdssl_core::Result<Vec<Trajectory>>>()?;
    let report = cka_block_report(
        (&opened[0].model, &opened[0].store),
        (&opened[1].model, &opened[1].store),
        (&opened[2].model, &opened[2].store),
        &probe_set,
    )?;
    let out = out.unwrap_or_else(|| dirs[0].join("cka.csv"));
    let csv = cka_csv(&report);
    std::fs::write(&out, &csv)?;
    write_json(&out.with_extension("json"), &report)?;
    print!("{csv}");
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::GenData { spec, out } => gen_data(&spec, &out),
        Cmd::Pretrain { config } => run_pretrain(&load_run(&config)?).map(|_| ()),
        Cmd::Finetune {
            config,
            checkpoint,
            task,
            strategy,
        } => {
            if !checkpoint.exists() {
                return Err(anyhow!(smdssl_core::Error::Config(format!(
                    "checkpoint {} does not exist",
                    checkpoint.display()
                ))));
            }
            run_finetune(&load_run(&config)?, &checkpoint, task, strategy)
        }
        Cmd::Eval { run_dir } => run_eval(&run_dir),
        Cmd::Run { config } => run_all(&config),
        Cmd::SweepBeta { config, grid } => run_sweep(&config, &grid),
        Cmd::Cka {
            runs,
            probe,
            max_windows,
            out,
        } => run_cka(&runs, &probe, max_windows, out),
    }
}

/// 3 for numeric failures during training, 2 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<smdssl_core::Error>() {
        Some(err) if err.is_numeric() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    smdssl_core::tune_allocator();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
