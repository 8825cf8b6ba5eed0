use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use sfcs::data::{generate_synthetic, load_dataset, save_dataset, split_patient_disjoint, LabelSummary, SynthConfig, TaskData};
use sfcs::experiment::{
    crossval, load_reports, render_report_csv, render_report_markdown, render_roc_csv, report_rows,
    run_ablation_matrix, save_reports, write_text, Variant,
};
use sfcs::trainer::{evaluate, fit, fit_single_task, write_history_csv, TrainConfig};
use sfcs::{selfcheck, Error, Result, Task};

/// Values of the dependency weight tried by `ablate --sweep-lambda`.
const LAMBDA_SWEEP: [f64; 4] = [0.01, 0.1, 0.5, 1.0];

#[derive(Parser)]
#[command(name = "sfcs", version, about = "Multi-head classification with combinatorial partial supervision")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic embedding dataset.
    Synth(SynthArgs),
    /// Train one model on a patient-disjoint train/validation/test split.
    Train(TrainArgs),
    /// Patient-disjoint k-fold cross-validation.
    Crossval(CrossvalArgs),
    /// Run every ablation variant and the single-task baseline.
    Ablate(AblateArgs),
    /// Render summary tables from saved fold results.
    Report(ReportArgs),
    /// Run the built-in gradient, scheduler and update checks.
    Check(CheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 486)]
    n: usize,
    #[arg(long, default_value_t = sfcs::data::DEFAULT_DEPENDENCY_STRENGTH)]
    dep_strength: f64,
    #[arg(long, default_value_t = sfcs::data::DEFAULT_CLASS_SEPARATION)]
    separation: f64,
    /// Output file; `.jsonl` selects JSON lines, anything else CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    SingleTask,
}

#[derive(Args)]
struct TrainOpts {
    /// Embedding dataset (CSV or JSON lines).
    #[arg(long)]
    data: PathBuf,
    /// TOML training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Configuration overrides such as `epochs=30` or `model.hidden_dim=128`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    no_dep: bool,
    #[arg(long)]
    no_temp: bool,
    #[arg(long)]
    no_sel: bool,
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    opts: TrainOpts,
    /// Fold used as the test set; the next one is the validation set.
    #[arg(long, default_value_t = 0)]
    round: usize,
}

#[derive(Args)]
struct CrossvalArgs {
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    opts: TrainOpts,
    /// Comma-separated seeds; each runs a full cross-validation.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Also run the full model at each dependency weight in 0.01, 0.1, 0.5, 1.0.
    #[arg(long)]
    sweep_lambda: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// `folds.json` written by `crossval` or `ablate`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random problems for the gradient check.
    #[arg(long, default_value_t = 100)]
    trials: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth(args) => synth(args),
        Command::Train(args) => train(args),
        Command::Crossval(args) => crossval_cmd(args),
        Command::Ablate(args) => ablate(args),
        Command::Report(args) => report(args),
        Command::Check(args) => check(args),
    }
}

fn synth(args: SynthArgs) -> Result<ExitCode> {
    let config = SynthConfig {
        dependency_strength: args.dep_strength,
        class_separation: args.separation,
        seed: args.seed,
        ..SynthConfig::with_samples(args.n)
    };
    config.validate()?;
    let records = generate_synthetic(&config)?;
    save_dataset(&args.out, &records)?;
    println!("{}", LabelSummary::of(&records));
    Ok(ExitCode::SUCCESS)
}

/// Config file, then `--set` overrides, then dedicated flags.
fn load_config(opts: &TrainOpts) -> Result<TrainConfig> {
    let mut table = match &opts.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    for item in &opts.overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {item:?} is not KEY=VALUE")))?;
        let value = parse_value(value.trim());
        let mut path: Vec<&str> = key.trim().split('.').collect();
        let last = path.pop().unwrap_or_default();
        let mut node = &mut table;
        for part in path {
            node = node
                .entry(part)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("override {key:?}: {part} is not a table")))?;
        }
        node.insert(last.to_string(), value);
    }
    let mut cfg: TrainConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(lambda) = opts.lambda {
        cfg.lambda = lambda;
    }
    if let Some(epochs) = opts.epochs {
        cfg.epochs = epochs;
    }
    cfg.use_dep &= !opts.no_dep;
    cfg.use_temp &= !opts.no_temp;
    cfg.use_sel &= !opts.no_sel;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a bare TOML value, treating anything unparsable as a string.
fn parse_value(text: &str) -> toml::Value {
    format!("v = {text}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

fn variant_of(opts: &TrainOpts) -> Variant {
    if opts.baseline.is_some() {
        Variant::SingleTask
    } else {
        // toggles are already folded into the config
        Variant::Full
    }
}

fn train(args: TrainArgs) -> Result<ExitCode> {
    let opts = &args.opts;
    let cfg = load_config(opts)?;
    let records = load_dataset(&opts.data)?;
    let assignment = split_patient_disjoint(&records, opts.folds, cfg.seed)?;
    if args.round >= opts.folds {
        return Err(Error::config(format!("round {} out of range for {} folds", args.round, opts.folds)));
    }
    let (train_idx, val_idx, test_idx) = assignment.split_indices(args.round);
    let data = TaskData::from_records(&records);
    let (train_set, val_set, test_set) = (data.subset(&train_idx), data.subset(&val_idx), data.subset(&test_idx));
    fs::create_dir_all(&opts.out).map_err(|e| Error::io(&opts.out, e))?;
    let metrics = match variant_of(opts) {
        Variant::SingleTask => {
            let model = fit_single_task(&cfg, &train_set, &val_set)?;
            for (task, (net, history)) in Task::ALL.iter().zip(model.networks.iter().zip(&model.histories)) {
                net.save(&opts.out.join(format!("model_{}.json", task.key())))?;
                write_history_csv(&opts.out.join(format!("history_{}.csv", task.key())), history)?;
            }
            evaluate(&model, &test_set)?
        }
        _ => {
            save_config(&opts.out, &cfg)?;
            let result = fit(&cfg, &train_set, &val_set)?;
            result.network.save(&opts.out.join("model.json"))?;
            write_history_csv(&opts.out.join("history.csv"), &result.history)?;
            info!("best epoch {}", result.best_epoch);
            evaluate(&result.network, &test_set)?
        }
    };
    let text = serde_json::to_string_pretty(&metrics).map_err(|e| Error::Invariant(e.to_string()))?;
    write_text(&opts.out.join("metrics.json"), &text)?;
    for t in Task::ALL {
        println!("{:<5} test macro F1 {:.4}", t.name(), metrics.f1[t.index()]);
    }
    Ok(ExitCode::SUCCESS)
}

/// One-line summary of the hyperparameters behind a report.
fn config_line(cfg: &TrainConfig) -> String {
    format!(
        "Training configuration (engineering defaults unless overridden): epochs={} batch_size={} learning_rate={} lambda={} optimizer={:?} hidden_dim={} latent_dim={} seed={}\n\n",
        cfg.epochs,
        cfg.batch_size,
        cfg.learning_rate,
        cfg.lambda,
        cfg.optimizer,
        cfg.model.hidden_dim,
        cfg.model.latent_dim,
        cfg.seed
    )
}

fn save_config(out: &Path, cfg: &TrainConfig) -> Result<()> {
    let text = toml::to_string(cfg).map_err(|e| Error::Invariant(e.to_string()))?;
    write_text(&out.join("config.toml"), &text)
}

fn write_reports(out: &Path, reports: &[sfcs::eval::FoldReport], cfg: Option<&TrainConfig>) -> Result<()> {
    let rows = report_rows(reports)?;
    write_text(&out.join("report.csv"), &render_report_csv(&rows))?;
    let mut md = cfg.map(config_line).unwrap_or_default();
    md.push_str(&render_report_markdown(&rows));
    write_text(&out.join("report.md"), &md)?;
    print!("{md}");
    Ok(())
}

fn crossval_cmd(args: CrossvalArgs) -> Result<ExitCode> {
    let opts = &args.opts;
    let cfg = load_config(opts)?;
    let records = load_dataset(&opts.data)?;
    let run = crossval(&records, &cfg, variant_of(opts), opts.folds, cfg.seed)?;
    fs::create_dir_all(&opts.out).map_err(|e| Error::io(&opts.out, e))?;
    for fold in &run.folds {
        if !fold.history.is_empty() {
            write_history_csv(&opts.out.join(format!("history_fold{}.csv", fold.round)), &fold.history)?;
        }
    }
    let (probs, truth) = run.pooled(&records)?;
    write_text(&opts.out.join("roc.csv"), &render_roc_csv(&probs, &truth))?;
    let reports = vec![run.report()];
    save_reports(&opts.out.join("folds.json"), &reports)?;
    save_config(&opts.out, &cfg)?;
    write_reports(&opts.out, &reports, Some(&cfg))?;
    Ok(ExitCode::SUCCESS)
}

fn ablate(args: AblateArgs) -> Result<ExitCode> {
    let opts = &args.opts;
    let cfg = load_config(opts)?;
    let records = load_dataset(&opts.data)?;
    let mut reports = run_ablation_matrix(&records, &cfg, &Variant::ALL, opts.folds, &args.seeds)?;
    if args.sweep_lambda {
        for lambda in LAMBDA_SWEEP {
            let swept = TrainConfig { lambda, ..cfg.clone() };
            let mut r = run_ablation_matrix(&records, &swept, &[Variant::Full], opts.folds, &args.seeds)?;
            r[0].model = format!("full(lambda={lambda})");
            reports.append(&mut r);
        }
    }
    fs::create_dir_all(&opts.out).map_err(|e| Error::io(&opts.out, e))?;
    save_reports(&opts.out.join("folds.json"), &reports)?;
    save_config(&opts.out, &cfg)?;
    write_reports(&opts.out, &reports, Some(&cfg))?;
    Ok(ExitCode::SUCCESS)
}

fn report(args: ReportArgs) -> Result<ExitCode> {
    let reports = load_reports(&args.input)?;
    write_reports(&args.out, &reports, None)?;
    Ok(ExitCode::SUCCESS)
}

fn check(args: CheckArgs) -> Result<ExitCode> {
    let outcomes = vec![
        selfcheck::gradient_check(args.trials, args.seed)?,
        selfcheck::scheduler_check(args.seed),
        selfcheck::selective_update_check(100, args.seed)?,
    ];
    for o in &outcomes {
        println!("{o}");
    }
    if outcomes.iter().all(|o| o.passed) {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(4))
    }
}
