use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use curriculum_rag::cli::{self, Overrides};
use curriculum_rag::config::Preset;
use curriculum_rag::schedule::ScheduleMode;

#[derive(Parser, Debug)]
#[command(name = "curriculum-rag", version, about = "Curriculum-scheduled preference training for a synthetic multi-hop retrieval agent")]
struct Cli {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Training seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Schedule mode: no_reward, two_stage or time_dynamic.
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<ScheduleMode>,
    /// Reward preset: full, no_reward, best2, best3, exploration_heavy, efficiency_heavy or single:<component>.
    #[arg(long, global = true)]
    preset: Option<Preset>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic world into <out>/world.
    GenWorld,
    /// Run both curriculum stages and write metrics, logs and checkpoints.
    Train {
        /// World directory; defaults to <out>/world.
        #[arg(long)]
        world: Option<PathBuf>,
    },
    /// Greedy dev-split evaluation of a policy checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        world: Option<PathBuf>,
    },
    /// Train every requested schedule mode and preset on the same world and seed.
    Compare {
        #[arg(long)]
        world: Option<PathBuf>,
        /// Comma-separated schedule modes.
        #[arg(long)]
        modes: Option<String>,
        /// Comma-separated reward presets.
        #[arg(long)]
        presets: Option<String>,
    },
    /// Print the reward weights at every step of both stages as CSV.
    DumpWeights,
}

fn parse_mode(s: &str) -> Result<ScheduleMode, String> {
    ScheduleMode::parse(s).ok_or_else(|| format!("unknown schedule mode `{s}`"))
}

fn run(args: Cli) -> Result<()> {
    let overrides = Overrides { seed: args.seed, out: args.out, mode: args.mode, preset: args.preset };
    let cfg = cli::load_config(args.config.as_deref(), &overrides).context("loading config")?;
    match args.command {
        Command::GenWorld => {
            let m = cli::cmd_gen_world(&cfg)?;
            println!("world: {} documents, {} questions ({} unanswerable), sha256 {}", m.documents, m.questions, m.unanswerable, m.sha256);
        }
        Command::Train { world } => {
            let r = cli::cmd_train(&cfg, world.as_deref())?;
            println!(
                "{} ({} cycle {}): em {:.4} f1 {:.4} avg_steps {:.2} refusal_accuracy {:.4}",
                r.label, r.stage, r.cycle, r.dev.em, r.dev.f1, r.dev.avg_steps, r.dev.refusal_accuracy
            );
            println!("outputs written to {}", cfg.out_dir.display());
        }
        Command::Eval { checkpoint, world } => {
            let r = cli::cmd_eval(&cfg, &checkpoint, world.as_deref())
                .with_context(|| format!("evaluating {}", checkpoint.display()))?;
            println!(
                "em {:.4} f1 {:.4} avg_steps {:.2} refusal_accuracy {:.4} answerable {} unanswerable {} total {}",
                r.em, r.f1, r.avg_steps, r.refusal_accuracy, r.answerable, r.unanswerable, r.total
            );
        }
        Command::Compare { world, modes, presets } => {
            let mut variants = Vec::new();
            if let Some(m) = &modes {
                variants.extend(cli::parse_modes(m)?);
            }
            if let Some(p) = &presets {
                variants.extend(cli::parse_presets(p)?);
            }
            if modes.is_none() && presets.is_none() {
                variants = cli::default_variants();
            }
            let rows = cli::cmd_compare(&cfg, world.as_deref(), &variants)?;
            println!("{:<20} {:>7} {:>7} {:>9} {:>9}", "label", "em", "f1", "avg_steps", "refusal");
            for r in rows {
                println!("{:<20} {:>7.4} {:>7.4} {:>9.2} {:>9.4}", r.label, r.em, r.f1, r.avg_steps, r.refusal_accuracy);
            }
        }
        Command::DumpWeights => print!("{}", cli::cmd_dump_weights(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
