mod plot;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use decom::config::ExperimentConfig;
use decom::env::EnvKind;
use decom::trainer::{self, EvalStats, MetricsRow, Trainer};
use decom::verify::{self, CheckOutcome, EndToEndOptions};
use decom::{Checkpoint, Error};

#[derive(Parser)]
#[command(name = "decom", version, about = "Constrained cooperative multi-agent RL with decomposed policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed and write metrics, config and checkpoints.
    Train(TrainArgs),
    /// Noise-free evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Render SVG training curves from metrics CSVs.
    Plot(PlotArgs),
    /// Run the self-check suite.
    Verify(VerifyArgs),
    /// Train once per perturbation weight and summarize the final evaluations.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file.
    #[arg(required_unless_present = "preset", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Start from a built-in preset instead of a file (ctc-safe, ctc-fair, cdsn).
    #[arg(long)]
    preset: Option<String>,
    /// `section.key=value`, applied in order.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Train only this seed.
    #[arg(long, env = "DECOM_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory; defaults to `run.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    /// Config of the run; defaults to `config.resolved` next to the checkpoint or one level up.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, env = "DECOM_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(required = true)]
    metrics: Vec<PathBuf>,
    #[arg(long, default_value = "plots")]
    out: PathBuf,
    /// Cost bounds; defaults to those in `config.resolved` beside the first CSV.
    #[arg(long, value_delimiter = ',')]
    bounds: Option<Vec<f64>>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Also run the scaled end-to-end training comparison (several minutes).
    #[arg(long)]
    full: bool,
    #[arg(long, env = "DECOM_SEED", default_value_t = 0)]
    seed: u64,
    /// Training episodes for the end-to-end comparison.
    #[arg(long, default_value_t = 5000)]
    episodes: usize,
    /// Perturb one analytic gradient before the finite-difference comparison.
    #[arg(long, hide = true)]
    inject_gradient_fault: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.1, 0.5, 1.0, 2.0])]
    lambdas: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Validation(String),
    Check,
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. }
            | Error::InvalidArgument(_)
            | Error::Schema(_)
            | Error::ShapeMismatch { .. }
            | Error::Checkpoint(_) => Failure::Validation(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => ExperimentConfig::load(path, &args.overrides)?,
        (None, Some(name)) => {
            let kind: EnvKind = name.parse()?;
            ExperimentConfig::from_toml_with_overrides(&ExperimentConfig::preset(kind).resolved()?, &args.overrides)?
        }
        (None, None) => return Err(Failure::Validation("a config file or --preset is required".into())),
    };
    if let Some(seed) = args.seed {
        cfg.run.seeds = vec![seed];
    }
    let issues = cfg.issues();
    if !issues.is_empty() {
        let lines: Vec<String> = issues.iter().map(|i| format!("  {}: {}", i.path, i.message)).collect();
        return Err(Failure::Validation(format!("invalid config\n{}", lines.join("\n"))));
    }
    Ok(cfg)
}

fn fmt_costs(mean: &[f64], std: &[f64]) -> String {
    mean.iter()
        .zip(std)
        .map(|(m, s)| format!("{m:.3}±{s:.3}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn print_row(r: &MetricsRow) {
    println!(
        "seed {:>3} ep {:>6} reward {:.3}±{:.3} cost {}",
        r.seed,
        r.episode,
        r.eval.reward_mean,
        r.eval.reward_std,
        fmt_costs(&r.eval.cost_mean, &r.eval.cost_std)
    );
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let cfg = load_config(&args.config)?;
    let dir = args.out.unwrap_or_else(|| PathBuf::from(&cfg.run.output_dir));
    let summary = trainer::train(&cfg, &dir, print_row)?;
    println!("wrote {}", summary.dir.join("metrics.csv").display());
    Ok(())
}

fn find_config(checkpoint: &Path) -> Option<PathBuf> {
    checkpoint
        .ancestors()
        .skip(1)
        .take(2)
        .map(|d| d.join("config.resolved"))
        .find(|p| p.is_file())
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let path = match args.config.or_else(|| find_config(&args.checkpoint)) {
        Some(p) => p,
        None => return Err(Failure::Validation("no --config given and no config.resolved found near the checkpoint".into())),
    };
    let cfg = ExperimentConfig::load(&path, &args.overrides)?;
    cfg.validate()?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let mut t = Trainer::<f64>::new(cfg, args.seed)?;
    t.restore(&ck)?;
    if args.episodes == 0 {
        return Ok(());
    }
    let (eval, _) = t.evaluate(args.episodes, false)?;
    print_eval(&eval, t.config().env.bounds.len())?;
    Ok(())
}

fn print_eval(eval: &EvalStats, m: usize) -> CmdResult {
    let mut w = csv::Writer::from_writer(std::io::stdout());
    let mut header = vec!["episodes".to_string(), "reward_mean".into(), "reward_std".into()];
    for j in 1..=m {
        header.push(format!("cost_{j}_mean"));
        header.push(format!("cost_{j}_std"));
    }
    let mut row = vec![eval.episodes.to_string(), eval.reward_mean.to_string(), eval.reward_std.to_string()];
    for j in 0..m {
        row.push(eval.cost_mean[j].to_string());
        row.push(eval.cost_std[j].to_string());
    }
    let io = |e: csv::Error| Failure::Runtime(e.to_string());
    w.write_record(&header).map_err(io)?;
    w.write_record(&row).map_err(io)?;
    w.flush()?;
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> CmdResult {
    let bounds = match args.bounds {
        Some(b) => b,
        None => args.metrics[0]
            .parent()
            .map(|d| d.join("config.resolved"))
            .filter(|p| p.is_file())
            .map(|p| ExperimentConfig::load(&p, &[]).map(|c| c.env.bounds))
            .transpose()?
            .unwrap_or_default(),
    };
    let written = plot::plot_files(&args.metrics, &bounds, &args.out)?;
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn print_table(rows: &[CheckOutcome]) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{:<4} {:<3} {:<28} {:>9}  observed / bound", "", "#", "check", "time");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<4} {:<3} {:<28} {:>8.1}s  {}\n{:48}bound: {}",
            if r.passed() { "PASS" } else { "FAIL" },
            r.id,
            r.name,
            r.elapsed.as_secs_f64(),
            r.observed,
            "",
            r.bound
        );
        if !r.within_time() {
            let _ = writeln!(out, "{:48}over the {}s time limit", "", r.time_limit.as_secs());
        }
    }
}

fn cmd_verify(args: VerifyArgs) -> CmdResult {
    let mut rows = verify::run_quick_suite(args.seed)?;
    if args.inject_gradient_fault {
        rows[0] = verify::check_autodiff(args.seed, true)?;
    }
    if args.full {
        let opts = EndToEndOptions {
            episodes: args.episodes,
            ..EndToEndOptions::default()
        };
        let e2e = verify::check_end_to_end(&opts, |s| {
            eprintln!(
                "seed {}: DeCOM-A reward {:.3} cost {:.3}; FP-0 reward {:.3} cost {:.3}",
                s.seed, s.decom_reward, s.decom_cost, s.fp_reward, s.fp_cost
            )
        })?;
        rows.insert(7, e2e);
    }
    print_table(&rows);
    let failed = rows.iter().filter(|r| !r.passed()).count();
    println!("{} of {} checks passed", rows.len() - failed, rows.len());
    if failed > 0 {
        return Err(Failure::Check);
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> CmdResult {
    let base = load_config(&args.config)?;
    let root = args.out.unwrap_or_else(|| PathBuf::from(&base.run.output_dir).join("sweep"));
    let m = base.env.bounds.len();
    let mut summary = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["lambda".to_string(), "reward_mean".into(), "reward_std".into()];
    header.extend((1..=m).map(|j| format!("cost_{j}")));
    let io = |e: csv::Error| Failure::Runtime(e.to_string());
    summary.write_record(&header).map_err(io)?;
    for &lambda in &args.lambdas {
        let mut cfg = base.clone();
        cfg.algo.lambda = lambda;
        cfg.validate()?;
        let dir = root.join(format!("lambda_{lambda}"));
        let run = trainer::train(&cfg, &dir, |_| {})?;
        let finals: Vec<&MetricsRow> = cfg
            .run
            .seeds
            .iter()
            .filter_map(|s| run.rows.iter().rev().find(|r| r.seed == *s))
            .collect();
        let rewards: Vec<f64> = finals.iter().map(|r| r.eval.reward_mean).collect();
        let (rm, rs) = mean_std(&rewards);
        let costs: Vec<f64> = (0..m)
            .map(|j| mean_std(&finals.iter().map(|r| r.eval.cost_mean[j]).collect::<Vec<_>>()).0)
            .collect();
        println!("λ = {lambda:<6} reward {rm:.3}±{rs:.3} cost {costs:.3?}");
        let mut row = vec![lambda.to_string(), rm.to_string(), rs.to_string()];
        row.extend(costs.iter().map(f64::to_string));
        summary.write_record(&row).map_err(io)?;
    }
    let bytes = summary.into_inner().map_err(|e| Failure::Runtime(e.to_string()))?;
    std::fs::create_dir_all(&root)?;
    std::fs::write(root.join("sweep.csv"), bytes)?;
    println!("wrote {}", root.join("sweep.csv").display());
    Ok(())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Plot(a) => cmd_plot(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Check) => ExitCode::from(3),
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
