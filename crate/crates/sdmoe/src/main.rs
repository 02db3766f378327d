//! Command-line front end: every subcommand maps onto one library operation
//! and writes its reports under `--out` with fixed filenames, so a run is
//! reproducible end-to-end from a config file and a seed.
//!
//! Exit codes: 0 success, 1 command-line usage error (synopsis on standard
//! error), 2 runtime failure (bad config file, unreadable checkpoint,
//! diverged training run, ...).

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use sdmoe::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use sdmoe::harness::{
    compare_variants, gen_batch, lr_stress, measure_gradient_alignment, planted_basis,
    rank_sweep, specialization_report, train, HarnessError, SpecializationReport, TrainRun,
};
use sdmoe::linalg::{matmul, LinalgError};
use sdmoe::metrics::MetricsError;
use sdmoe::moe::{grad_check, init_layer, MoeError, Variant};
use sdmoe::report::{
    self, fmt_float, GATE_ALIGNMENT_CSV, GRADCHECK_JSON, GRAD_ALIGNMENT_CSV, METRICS_CSV,
    SIMILARITY_CSV, STRESS_CSV, SWEEP_CSV,
};
use sdmoe::runconfig::{RunConfig, RunConfigError};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use thiserror::Error;

/// Filename of the model state written by `train`.
const MODEL_FILE: &str = "model.sdmk";
/// Filename of the token batch written by `gen-data`.
const BATCH_FILE: &str = "batch.csv";

#[derive(Parser)]
#[command(
    name = "sdmoe",
    version,
    about = "Train and dissect a mixture-of-experts layer with spectrally decoupled expert weights"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one synthetic batch and report its planted-subspace energy
    GenData {
        /// Run config file (omit for the built-in toy defaults)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the data seed
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (writes batch.csv)
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one layer and write its metrics log plus a final checkpoint
    Train {
        /// Run config file
        #[arg(long)]
        config: PathBuf,
        /// Override the layer-initialization seed
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (writes metrics.csv and model.sdmk)
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure expert specialization and gradient alignment of a checkpoint
    Analyze {
        /// Checkpoint to load
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run config file for the task/analysis knobs (omit for defaults)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the data seed
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (writes similarity.csv, gate_alignment.csv,
        /// grad_alignment.csv)
        #[arg(long)]
        out: PathBuf,
    },
    /// Train both variants from a shared warm start and compare specialization
    Compare {
        /// Run config file
        #[arg(long)]
        config: PathBuf,
        /// Override the layer-initialization seed
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (writes warm/, baseline/, sd/ subreports)
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the decoupled variant across a list of common-subspace ranks
    SweepRank {
        /// Run config file
        #[arg(long)]
        config: PathBuf,
        /// Override the layer-initialization seed
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (writes sweep.csv)
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated ranks to try (default: 2,4,8,16 clipped to fit)
        #[arg(long, value_delimiter = ',')]
        ranks: Option<Vec<usize>>,
    },
    /// Train both variants across a learning-rate ladder and record divergence
    LrStress {
        /// Run config file
        #[arg(long)]
        config: PathBuf,
        /// Override the layer-initialization seed
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (writes stress.csv)
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated ascending learning rates
        #[arg(long, value_delimiter = ',')]
        lrs: Option<Vec<f64>>,
    },
    /// Check analytic gradients against finite differences for both variants
    GradCheck {
        /// Run config file (omit for the built-in toy defaults)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the check seed
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (writes gradcheck.json)
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] RunConfigError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("training diverged at step {step} (task loss {loss:e}); metrics were written")]
    Diverged { step: u64, loss: f64 },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests go to standard output and succeed; real
            // usage errors print the synopsis to standard error.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData { config, seed, out } => gen_data_cmd(config.as_deref(), seed, &out),
        Command::Train { config, seed, out } => train_cmd(&config, seed, &out),
        Command::Analyze {
            checkpoint,
            config,
            seed,
            out,
        } => analyze_cmd(&checkpoint, config.as_deref(), seed, &out),
        Command::Compare { config, seed, out } => compare_cmd(&config, seed, &out),
        Command::SweepRank {
            config,
            seed,
            out,
            ranks,
        } => sweep_rank_cmd(&config, seed, &out, ranks),
        Command::LrStress {
            config,
            seed,
            out,
            lrs,
        } => lr_stress_cmd(&config, seed, &out, lrs),
        Command::GradCheck { config, seed, out } => grad_check_cmd(config.as_deref(), seed, &out),
    }
}

/// Load the run config (or defaults) and apply a `--seed` override to the
/// layer-initialization seed.
fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn write_out(out: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(name), contents)?;
    Ok(())
}

/// Long-form CSV for a token batch: one row per matrix entry, so any token
/// and target width shares one fixed schema.
fn batch_csv(x: &sdmoe::linalg::Matrix, targets: &sdmoe::linalg::Matrix) -> String {
    use std::fmt::Write as _;
    let mut s = String::from("token,kind,component,value\n");
    for (kind, m) in [("x", x), ("y", targets)] {
        for t in 0..m.rows {
            for c in 0..m.cols {
                writeln!(s, "{t},{kind},{c},{}", fmt_float(m.get(t, c))).expect("string write");
            }
        }
    }
    s
}

fn gen_data_cmd(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let mut cfg = load_config(config, None)?;
    if let Some(s) = seed {
        // This command only draws data, so the override steers the task.
        cfg.task.seed = s;
    }
    let batch = gen_batch(&cfg.task, 0)?;
    let planted = planted_basis(&cfg.task)?;
    let inside = matmul(&batch.x, &planted.a)?.frobenius_norm_sq();
    let total = batch.x.frobenius_norm_sq();
    write_out(out, BATCH_FILE, &batch_csv(&batch.x, &batch.targets))?;
    println!(
        "wrote {} ({} tokens, width {}); planted-subspace energy fraction {} (target {})",
        out.join(BATCH_FILE).display(),
        batch.x.rows,
        batch.x.cols,
        fmt_float(inside / total),
        fmt_float(cfg.task.rho),
    );
    Ok(())
}

fn print_run(label: &str, run: &TrainRun) {
    println!(
        "{label}: task loss {} -> {} over {} logged rows",
        fmt_float(run.initial_task_loss),
        fmt_float(run.final_task_loss),
        run.log.rows.len(),
    );
}

fn train_cmd(config: &Path, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(Some(config), seed)?;
    let mut params = init_layer(&cfg.moe, cfg.train.refresh_interval, cfg.train.seed)?;
    let run = train(&mut params, &cfg.task, &cfg.train)?;
    write_out(out, METRICS_CSV, &report::metrics_csv(&run.log))?;
    save_checkpoint(&params, &out.join(MODEL_FILE))?;
    print_run("train", &run);
    if let Some(d) = run.divergence {
        return Err(CliError::Diverged {
            step: d.step,
            loss: d.task_loss,
        });
    }
    Ok(())
}

fn write_specialization(out: &Path, report_: &SpecializationReport) -> Result<(), CliError> {
    write_out(out, SIMILARITY_CSV, &report::similarity_csv(report_))?;
    write_out(out, GATE_ALIGNMENT_CSV, &report::gate_alignment_csv(report_))?;
    Ok(())
}

fn analyze_cmd(
    checkpoint: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> Result<(), CliError> {
    let params = load_checkpoint(checkpoint)?;
    let mut cfg = load_config(config, None)?;
    if let Some(s) = seed {
        cfg.task.seed = s;
    }
    if config.is_none() {
        // Without an explicit task the data must still fit the model.
        cfg.task.d = params.config.d_model;
        cfg.task.validate()?;
    }
    let spec_report = specialization_report(&params, &cfg.analysis)?;
    let grad_report = measure_gradient_alignment(&params, &cfg.task, cfg.task.r, 0)?;
    write_specialization(out, &spec_report)?;
    write_out(out, GRAD_ALIGNMENT_CSV, &report::grad_alignment_csv(&grad_report))?;
    println!(
        "analyze: {} experts, head rank {}, mean pairwise head similarity {}",
        params.config.n_experts,
        spec_report.head_rank,
        fmt_float(spec_report.mean_similarity),
    );
    Ok(())
}

fn compare_cmd(config: &Path, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(Some(config), seed)?;
    let report_ = compare_variants(&cfg.moe, &cfg.task, &cfg.train, &cfg.analysis)?;
    write_out(
        &out.join("warm"),
        METRICS_CSV,
        &report::metrics_csv(&report_.warm_run.log),
    )?;
    for (dir, arm) in [("baseline", &report_.baseline), ("sd", &report_.sd)] {
        let arm_out = out.join(dir);
        write_out(&arm_out, METRICS_CSV, &report::metrics_csv(&arm.run.log))?;
        write_specialization(&arm_out, &arm.specialization)?;
    }
    print_run("warm-up", &report_.warm_run);
    print_run("baseline arm", &report_.baseline.run);
    print_run("sd arm", &report_.sd.run);
    println!(
        "mean pairwise head similarity: baseline {} vs sd {}",
        fmt_float(report_.baseline.specialization.mean_similarity),
        fmt_float(report_.sd.specialization.mean_similarity),
    );
    Ok(())
}

fn sweep_rank_cmd(
    config: &Path,
    seed: Option<u64>,
    out: &Path,
    ranks: Option<Vec<usize>>,
) -> Result<(), CliError> {
    let cfg = load_config(Some(config), seed)?;
    let limit = cfg.moe.d_model.min(cfg.moe.d_ff);
    let ks: Vec<usize> = match ranks {
        Some(ks) => ks,
        None => [2usize, 4, 8, 16].iter().copied().filter(|&k| k < limit).collect(),
    };
    let rows = rank_sweep(&cfg.moe, &cfg.task, &cfg.train, &ks)?;
    write_out(out, SWEEP_CSV, &report::sweep_csv(&rows))?;
    for r in &rows {
        println!(
            "k={}: final loss {}, mean expert similarity {}",
            r.k,
            fmt_float(r.final_loss),
            fmt_float(r.mean_expert_similarity),
        );
    }
    Ok(())
}

fn lr_stress_cmd(
    config: &Path,
    seed: Option<u64>,
    out: &Path,
    lrs: Option<Vec<f64>>,
) -> Result<(), CliError> {
    let cfg = load_config(Some(config), seed)?;
    let lrs = lrs.unwrap_or_else(|| vec![1e-4, 1e-2, 1e-1, 0.5, 1.0, 2.0]);
    let rows = lr_stress(&cfg.moe, &cfg.task, &cfg.train, &lrs)?;
    write_out(out, STRESS_CSV, &report::stress_csv(&rows))?;
    for r in &rows {
        let fate = match r.divergence_step {
            Some(step) => format!("diverged at step {step}"),
            None => "survived".to_string(),
        };
        println!("{} @ lr {}: {fate}", r.variant, fmt_float(r.lr));
    }
    Ok(())
}

/// Finite-difference step for the CLI check. At toy scale the worst relative
/// error sits near 5e-7 for both variants — central-difference cancellation
/// noise, comfortably inside the 1e-6 documentation target.
const GRADCHECK_TOKENS: usize = 5;
const GRADCHECK_STEP: f64 = 1e-5;

fn grad_check_cmd(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(config, seed)?;
    let mut reports = Vec::with_capacity(2);
    for variant in [Variant::Baseline, Variant::Sd] {
        let mut moe_cfg = cfg.moe.clone();
        moe_cfg.variant = variant;
        let mut params = init_layer(&moe_cfg, cfg.train.refresh_interval, cfg.train.seed)?;
        let r = grad_check(&mut params, GRADCHECK_TOKENS, GRADCHECK_STEP, cfg.train.seed)?;
        println!(
            "{}: max relative gradient error {} (worst: {})",
            r.variant,
            fmt_float(r.max_rel_error),
            r.worst_parameter,
        );
        reports.push(r);
    }
    write_out(out, GRADCHECK_JSON, &report::gradcheck_json(&reports))?;
    Ok(())
}
