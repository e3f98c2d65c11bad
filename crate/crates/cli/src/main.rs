use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use prefbench_core::config::AppConfig;
use prefbench_core::objectives::Method;
use prefbench_core::pipeline::{self, Layout, OutputLock};

/// Preference-optimization lab: synthetic data, SFT, DPO/SimPO/LN-DPO sweeps and analytics.
#[derive(Parser, Debug)]
#[command(name = "prefbench", version, about)]
struct Cli {
    /// JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed (overrides `run.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output root (overrides PREFBENCH_OUT and `run.out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for sweeps (overrides `run.parallelism`).
    #[arg(long, global = true)]
    parallelism: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the preference dataset and its hash manifest.
    GenData,
    /// Train the SFT grid and keep the best candidate.
    Sft,
    /// Run the preference-optimization grid and write records, report and tables.
    Sweep {
        #[arg(long, value_enum, default_value_t = MethodArg::All)]
        method: MethodArg,
    },
    /// Rebuild report.json and tables from a records.jsonl file.
    Report {
        /// Path to records.jsonl.
        records: PathBuf,
    },
    /// Evaluate one policy checkpoint against the stored SFT policy.
    Eval {
        /// Path to a checkpoint.json written by a sweep.
        checkpoint: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    All,
    Dpo,
    Simpo,
    Lndpo,
}

impl MethodArg {
    fn methods(self) -> Vec<Method> {
        match self {
            MethodArg::All => Method::ALL.to_vec(),
            MethodArg::Dpo => vec![Method::Dpo],
            MethodArg::Simpo => vec![Method::Simpo],
            MethodArg::Lndpo => vec![Method::Lndpo],
        }
    }
}

fn load_config(cli: &Cli) -> Result<AppConfig> {
    let Some(path) = &cli.config else {
        bail!("--config is required for this subcommand");
    };
    let mut cfg = AppConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(p) = cli.parallelism {
        if p == 0 {
            bail!("--parallelism must be at least 1");
        }
        cfg.run.parallelism = p;
    }
    Ok(cfg)
}

fn out_root(cli: &Cli, cfg: &AppConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os("PREFBENCH_OUT").map(PathBuf::from))
        .or_else(|| cfg.run.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Report { records } = &cli.command {
        let lock_root = records.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let _lock = OutputLock::acquire(lock_root)?;
        let report = pipeline::report(records)?;
        println!(
            "report rebuilt from {} records ({} failed) in {}",
            report.n_records,
            report.n_failed,
            lock_root.display()
        );
        return Ok(());
    }

    let cfg = load_config(cli)?;
    let layout = Layout::new(out_root(cli, &cfg));
    let _lock = OutputLock::acquire(&layout.root)?;
    match &cli.command {
        Command::GenData => {
            let m = pipeline::gen_data(&cfg, &layout)?;
            println!(
                "wrote {} training pairs and {} eval prompts to {} (flip rate {:.4})",
                m.n_train,
                m.n_eval,
                layout.data_dir().display(),
                m.flip_rate
            );
        }
        Command::Sft => {
            let r = pipeline::sft(&cfg, &layout)?;
            for c in &r.candidates {
                println!(
                    "candidate {} lr={} epochs={} mean_score={:.4}{}",
                    c.index,
                    c.learning_rate,
                    c.epochs,
                    c.mean_score,
                    if c.index == r.winner { "  <- selected" } else { "" }
                );
            }
            println!("sft checkpoint {} written to {}", r.winner_hash, layout.sft_checkpoint().display());
        }
        Command::Sweep { method } => {
            let outcome = pipeline::sweep(&cfg, &layout, &method.methods())?;
            println!(
                "{} records ({} resumed, {} failed) in {}",
                outcome.records.len(),
                outcome.resumed,
                outcome.report.n_failed,
                outcome.dir.display()
            );
        }
        Command::Eval { checkpoint } => {
            let r = pipeline::eval_checkpoint(&cfg, &layout, checkpoint)
                .with_context(|| format!("evaluating {}", checkpoint.display()))?;
            println!(
                "mean_score={:.6} win_vs_chosen={:.4} win_vs_sft={:.4} kl_vs_sft={:.6} mean_length={:.3}",
                r.mean_score, r.win_vs_chosen, r.win_vs_sft, r.kl_vs_sft, r.mean_length
            );
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
