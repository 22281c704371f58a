use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sgdl_core::dataset;
use sgdl_core::harness::{self, RunConfig};

/// Self-guided denoising learning for implicit-feedback recommenders.
#[derive(Parser)]
#[command(name = "sgdl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a ratings file (or synthesize one), label noise, split, and
    /// write the canonical dataset.
    Ingest(IngestArgs),
    /// Run the full training pipeline from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint against the dataset implied by a config.
    Evaluate(EvaluateArgs),
    /// Dump per-epoch memorization / MP-MR curves as CSV on stdout.
    InspectMem(InspectArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Ratings file: user, item, rating[, timestamp] per line.
    #[arg(long, conflicts_with = "synth")]
    input: Option<PathBuf>,
    /// Generate a clean synthetic dataset instead: USERS,ITEMS,MEAN_PER_USER.
    #[arg(long, value_name = "U,I,M")]
    synth: Option<String>,
    /// Canonical output path.
    #[arg(long)]
    output: PathBuf,
    /// Field delimiter ("tab", "::", ",", ...).
    #[arg(long, default_value = "tab")]
    delimiter: String,
    /// Ratings strictly below this are labeled noisy.
    #[arg(long, default_value_t = 3)]
    threshold: u8,
    /// Treat the input as clean and inject this fraction of noisy positives
    /// into the train split instead of using the rating rule.
    #[arg(long)]
    inject: Option<f64>,
    /// Train/val/test ratios.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    split: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key=value config file (see README for the key reference).
    #[arg(long)]
    config: PathBuf,
    /// Extra key=value overrides applied after the file and environment.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    config: PathBuf,
    /// Epochs to trace (defaults to the config's phase1_epochs).
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn parse_ratios(s: &str) -> Result<(f64, f64, f64), String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    if parts.len() != 3 {
        return Err(format!("expected three ratios, got {s:?}"));
    }
    Ok((parts[0], parts[1], parts[2]))
}

fn delim(raw: &str) -> &str {
    if raw == "tab" {
        "\t"
    } else {
        raw
    }
}

fn ingest(args: IngestArgs) -> sgdl_core::Result<()> {
    let table = if let Some(spec) = &args.synth {
        let parts: Vec<usize> = spec
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| sgdl_core::Error::Config(format!("bad --synth spec {spec:?}")))?;
        if parts.len() != 3 {
            return Err(sgdl_core::Error::Config("--synth wants USERS,ITEMS,MEAN".into()));
        }
        dataset::synthetic_clean(&dataset::SyntheticConfig {
            num_users: parts[0],
            num_items: parts[1],
            mean_per_user: parts[2],
            min_per_user: (parts[2] / 5).max(2),
            latent_dim: 8,
            temperature: 0.3,
            pool_factor: 3,
            seed: args.seed,
        })
    } else {
        let input = args
            .input
            .as_ref()
            .ok_or_else(|| sgdl_core::Error::Config("need --input or --synth".into()))?;
        let ratings = dataset::parse_interactions(input, delim(&args.delimiter))?;
        if args.inject.is_some() {
            dataset::table_from_ratings(&ratings)?
        } else {
            dataset::label_noise_by_rating(&ratings, args.threshold)?
        }
    };

    let ratios = parse_ratios(&args.split).map_err(sgdl_core::Error::Config)?;
    let table = if table.splits.is_some() {
        table
    } else {
        dataset::split_dataset(&table, ratios, args.seed)?
    };
    let table = match args.inject {
        Some(sigma) => dataset::inject_noise(&table, sigma, args.seed)?,
        None => table,
    };
    dataset::write_table(&table, &args.output, delim(&args.delimiter))?;
    let sets = table.splits()?;
    println!(
        "wrote {} interactions ({} users, {} items; train/val/test = {}/{}/{}) to {}",
        table.interactions.len(),
        table.num_users,
        table.num_items,
        sets.train.len(),
        sets.val.len(),
        sets.test.len(),
        args.output.display()
    );
    Ok(())
}

fn load_config(path: &PathBuf, overrides: &[String]) -> sgdl_core::Result<RunConfig> {
    let mut cfg = RunConfig::from_file(path)?;
    harness::apply_overrides(&mut cfg, overrides)?;
    Ok(cfg)
}

fn print_report(label: &str, report: &sgdl_core::MetricReport) {
    print!("{label}:");
    for (idx, k) in report.k_values.iter().enumerate() {
        print!(" recall@{k}={:.4} ndcg@{k}={:.4}", report.recall[idx], report.ndcg[idx]);
    }
    println!(" ({} users, {} skipped)", report.users_evaluated, report.users_skipped);
}

fn train(args: TrainArgs) -> sgdl_core::Result<()> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let artifacts = harness::run(&cfg)?;
    if let Some(t_m) = artifacts.t_m {
        println!(
            "memorization point: epoch {t_m} (|M| = {}, sigma_hat = {:.4})",
            artifacts.mem_snapshot_size.unwrap_or(0),
            artifacts.sigma_hat_at_transition.unwrap_or(0.0),
        );
    }
    println!(
        "best epoch {} (val recall@{}={:.4})",
        artifacts.best_epoch,
        if cfg.k_list.contains(&20) { 20 } else { *cfg.k_list.iter().max().unwrap() },
        artifacts.best_val_recall
    );
    print_report("test (best checkpoint)", &artifacts.test_at_best);
    print_report("test (final)", &artifacts.final_test);
    println!("artifacts in {}", cfg.outdir.display());
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> sgdl_core::Result<()> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let (val, test) = harness::evaluate_checkpoint(&cfg, &args.checkpoint)?;
    print_report("val", &val);
    print_report("test", &test);
    Ok(())
}

fn inspect_mem(args: InspectArgs) -> sgdl_core::Result<()> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let epochs = args.epochs.unwrap_or(cfg.phase1_epochs);
    let table = harness::load_table(&cfg)?;
    let rows = harness::inspect_memorization(&cfg, &table, epochs)?;
    println!("epoch,mem_count,sigma_hat,would_transition,MP,MR,mem_rate_clean,mem_rate_noisy");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for row in rows {
        println!(
            "{},{},{},{},{},{},{},{}",
            row.epoch,
            row.mem_count.map(|c| c.to_string()).unwrap_or_default(),
            opt(row.sigma_hat),
            u8::from(row.transition),
            opt(row.mp),
            opt(row.mr),
            opt(row.mem_rate_clean),
            opt(row.mem_rate_noisy),
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(args) => ingest(args),
        Command::Train(args) => train(args),
        Command::Evaluate(args) => evaluate(args),
        Command::InspectMem(args) => inspect_mem(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
