use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gai_core::channel::ChannelMode;
use gai_core::checkpoint::{load_checkpoint, save_checkpoint};
use gai_core::config::RunConfig;
use gai_core::experiment::{
    delta_summary, evaluate_sweep, export_task_node_weights, flop_report, parse_ratio_list, parse_snr_range,
    run_ablation, write_delta_csv, write_results_csv, write_task_weights_csv, Evaluable, SweepSpec,
};
use gai_core::model::ModelVariant;
use gai_core::train::{build, resolve_weights, train_run, Data, TrainedRun};
use gai_core::verify::run_verification;
use gai_core::Error;

const SCHEMA: &str = "\
CONFIG FILE (JSON; every key optional, unknown keys rejected)
  encoder:
    input       [C, H, W]           default [3, 32, 32]; C must be 3, H and W >= 16
    channels    [int, ...]          default [64, 64, 128, 128, 256, 256, 512, 512]
    strides     [int, ...]          default [1, 1, 2, 1, 2, 1, 2, 1]; one per block
  gai:
    c_out                 int       default 512
    iterations            int       default 1
    c_rm                  int       default 256
    leaky_slope           float     default 0.2
    variant               full | gai_w | simp_att            default full
    per_iteration_attention  bool   default false
    normalize_task_weights   bool   default false
  tasks: list of
    kind          segmentation | depth | surface_normal | keypoint | edge | classification
    num_classes   int               default 4 for segmentation and classification
    loss_weight   float             default: calibrated so each weighted loss starts at 1
    dilation      6 | 12 | 18 | 24  default 6
    hidden        int               default 64
    default tasks: segmentation (4 classes) and depth
  channel:
    snr_db          float           default 10
    transmit_power  float           default 1
    mode            awgn | rayleigh | noiseless              default noiseless
    rayleigh_scale  float           default 0.2
    seed            int             default 0
    shared_fading   bool            default false
  bandwidth:
    target_ratio    float           default none (transmit every feature channel)
  train:
    learning_rate   float           default 1e-4
    batch_size      int             default 8
    beta1, beta2    float           default 0.9, 0.999
    eps             float           default 1e-8
    max_epochs      int             default 30
    patience        int             default 10
    train_size      int             default 512
    val_size        int             default 64
    variant         single_task | basic_multitask | gai_w | simp_att | full   default full
    noisy           bool            default false (train through the configured channel)
  seed              int             default 0

EXIT CODES
  0 success, 1 verification or run failure, 2 usage or configuration error";

#[derive(Parser)]
#[command(name = "gai-sim", version, about = "Multi-task semantic communication simulator", after_long_help = SCHEMA)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.gai1, losses.csv, config.resolved.json and, for GAI
    /// variants, task_node_weights.csv.
    #[command(after_long_help = SCHEMA)]
    Train(TrainArgs),
    /// Evaluate a checkpoint over an SNR grid; writes results.csv.
    #[command(after_long_help = SCHEMA)]
    Sweep(SweepArgs),
    /// Train and compare several variants; writes results_<variant>.csv and delta.csv.
    #[command(after_long_help = SCHEMA)]
    Ablate(AblateArgs),
    /// Compare analytic and instrumented GAI multiply counts; writes flops.csv.
    Flops(FlopsArgs),
    /// Run the gradient, oracle and invariant checks.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Inclusive SNR grid in dB, lo:hi:step.
    #[arg(long, default_value = "-2:14:2", allow_hyphen_values = true)]
    snr: String,
    /// Comma-separated bandwidth ratios; empty means the model's own ratio.
    #[arg(long, default_value = "")]
    ratios: String,
    /// awgn, rayleigh or noiseless; comma-separated for several.
    #[arg(long, default_value = "awgn")]
    mode: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "single_task,full")]
    variants: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, hide = true)]
    inject_backward_fault: bool,
}

enum Failure {
    Usage(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Checkpoint(_) | Error::Io(_) | Error::Json(_) => Failure::Usage(e.to_string()),
            _ => Failure::Run(e.to_string()),
        }
    }
}

type CmdResult = Result<ExitCode, Failure>;

fn prepare_out(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn write_losses(path: &Path, run: &TrainedRun) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["phase", "index", "loss"])?;
    for (i, l) in run.report.step_losses.iter().enumerate() {
        w.write_record(["train", &(i + 1).to_string(), &l.to_string()])?;
    }
    w.write_record(["val", "0", &run.report.initial_val_loss.to_string()])?;
    for (i, l) in run.report.val_losses.iter().enumerate() {
        w.write_record(["val", &(i + 1).to_string(), &l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    prepare_out(&args.out)?;
    let run = train_run(&cfg)?;
    save_checkpoint(&run.store, &args.out.join("model.gai1"))?;
    write_losses(&args.out.join("losses.csv"), &run)?;
    let mut resolved = cfg.clone();
    for (t, w) in resolved.tasks.iter_mut().zip(run.weights()) {
        t.loss_weight = Some(*w);
    }
    fs::write(args.out.join("config.resolved.json"), resolved.to_json() + "\n").map_err(Error::from)?;
    if run.model.branches.len() == 1 && run.model.branches[0].gai.is_some() {
        let m = export_task_node_weights(&run.model, &run.store, &run.data.val)?;
        let names: Vec<&str> = cfg.tasks.iter().map(|t| t.kind.as_str()).collect();
        write_task_weights_csv(&args.out.join("task_node_weights.csv"), &names, &m)?;
    }
    println!(
        "trained {} epochs; validation loss {:.6} -> {:.6} (best epoch {})",
        run.report.epochs_run, run.report.initial_val_loss, run.report.best_val_loss, run.report.best_epoch
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_modes(s: &str) -> Result<Vec<ChannelMode>, Error> {
    s.split(',').map(|m| ChannelMode::parse(m.trim())).collect()
}

fn cmd_sweep(args: SweepArgs) -> CmdResult {
    let cfg = RunConfig::load(&args.config)?;
    let spec = SweepSpec {
        snrs: parse_snr_range(&args.snr)?,
        ratios: parse_ratio_list(&args.ratios)?,
        modes: parse_modes(&args.mode)?,
    };
    prepare_out(&args.out)?;
    let (model, mut store) = build(&cfg)?;
    let data = Data::generate(&cfg)?;
    // calibrated weights depend on the initial parameters, so resolve before loading
    let weights = resolve_weights(&cfg, &model, &store, &data)?;
    load_checkpoint(&mut store, &args.checkpoint)?;
    let ev = Evaluable {
        config: &cfg,
        model: &model,
        store: &store,
        weights: &weights,
    };
    let run_id = format!("sweep-{}-s{}", cfg.train.variant.as_str(), cfg.seed);
    let rows = evaluate_sweep(&ev, &data.val, &spec, &run_id)?;
    let mut achieved: Vec<f64> = rows.iter().map(|r| r.bandwidth_ratio).collect();
    achieved.dedup();
    for r in achieved {
        println!("bandwidth ratio {r:.6}");
    }
    write_results_csv(&args.out.join("results.csv"), &rows)?;
    println!("wrote {} rows", rows.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_ablate(args: AblateArgs) -> CmdResult {
    let variants: Vec<ModelVariant> = args
        .variants
        .split(',')
        .map(|v| ModelVariant::parse(v.trim()))
        .collect::<Result<_, _>>()?;
    let cfg = RunConfig::load(&args.config)?;
    prepare_out(&args.out)?;
    let mut outcomes = Vec::new();
    for v in variants {
        let o = run_ablation(&cfg, v)?;
        write_results_csv(&args.out.join(format!("results_{}.csv", v.as_str())), &o.rows)?;
        println!("{}: validation loss {:.6}", v.as_str(), o.run.report.best_val_loss);
        outcomes.push(o);
    }
    let deltas = match outcomes.iter().position(|o| o.variant == ModelVariant::SingleTask) {
        Some(b) => delta_summary(&outcomes, &outcomes[b])?,
        None => Vec::new(),
    };
    write_delta_csv(&args.out.join("delta.csv"), &deltas)?;
    for d in &deltas {
        println!("delta {} {}: {:.3}%", d.variant, d.task, d.delta);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_flops(args: FlopsArgs) -> CmdResult {
    let cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    prepare_out(&args.out)?;
    let rows = flop_report(&cfg)?;
    let mut w = csv::Writer::from_path(args.out.join("flops.csv")).map_err(Error::from)?;
    for r in &rows {
        w.serialize(r).map_err(Error::from)?;
        println!("{:<18} {:>14} {:>14}", r.stage, r.analytic, r.instrumented);
    }
    w.flush().map_err(Error::from)?;
    Ok(if rows.iter().all(|r| r.matches()) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_verify(args: VerifyArgs) -> CmdResult {
    gai_core::autodiff::set_backward_fault(args.inject_backward_fault);
    let report = run_verification();
    print!("{report}");
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Flops(a) => cmd_flops(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
