use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use coegan::config::{self, DatasetKind};
use coegan::evaluation::Strategy;
use coegan::harness::{self, RunOptions};

#[derive(Parser)]
#[command(name = "coegan", version, about = "Coevolve GAN generator and discriminator architectures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a new experiment.
    Run {
        /// TOML config; missing keys take the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run this many consecutive seeds and aggregate the results.
        #[arg(long, default_value_t = 1)]
        repeat: usize,
        #[arg(long)]
        dataset: Option<DatasetKind>,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        generations: Option<usize>,
        /// Override any config key, e.g. `--set mutation.add=0.5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Keep only the newest N checkpoints (0 keeps all).
        #[arg(long, default_value_t = 0)]
        keep_checkpoints: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Continue an interrupted experiment from its newest checkpoints.
    Resume {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 0)]
        keep_checkpoints: usize,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Re-render curves and sample images from a run's report and checkpoints.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn overrides(
    seed: Option<u64>,
    dataset: Option<DatasetKind>,
    strategy: Option<Strategy>,
    generations: Option<usize>,
    set: &[String],
) -> anyhow::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    if let Some(s) = seed {
        out.push(("seed".into(), s.to_string()));
    }
    if let Some(d) = dataset {
        let name = match d {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Ring => "ring",
        };
        out.push(("dataset.kind".into(), format!("\"{name}\"")));
    }
    if let Some(s) = strategy {
        out.push(("strategy".into(), format!("\"{}\"", s.as_str())));
    }
    if let Some(g) = generations {
        out.push(("generations".into(), g.to_string()));
    }
    for kv in set {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got {kv:?}"))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, seed, repeat, dataset, strategy, generations, set, keep_checkpoints, out, quiet } => {
            let ov = overrides(seed, dataset, strategy, generations, &set)?;
            let cfg = config::load_config(config.as_deref(), &ov)?;
            let opts = RunOptions { repeat, keep_checkpoints, verbose: !quiet };
            let summary = harness::run_experiment(&cfg, &out, &opts)?;
            print_summary(&summary);
        }
        Command::Resume { run, keep_checkpoints, quiet } => {
            let opts = RunOptions { repeat: 1, keep_checkpoints, verbose: !quiet };
            let summary = harness::resume(&run, &opts)?;
            print_summary(&summary);
        }
        Command::Report { run } => {
            for p in harness::render(&run)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn print_summary(s: &harness::ExperimentSummary) {
    for r in &s.runs {
        match r.final_best_fitness {
            Some(f) => {
                println!("seed {}: {} generations, final best generator fitness {f:.4} ({})", r.seed, r.generations, r.dir.display())
            }
            None => println!("seed {}: no generations run ({})", r.seed, r.dir.display()),
        }
    }
    if let Some(a) = &s.aggregate {
        println!("final best generator fitness over {} runs: {:.4} ± {:.4} (95% CI), std {:.4}", a.runs, a.mean, a.ci95, a.std);
    }
}
