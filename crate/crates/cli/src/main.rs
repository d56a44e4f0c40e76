use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use phwm_cli::eval::{evaluate, sum_log_volume};
use phwm_cli::plot::{line_plot, Table};
use phwm_cli::runner::{ablate, eval_checkpoint, generate_data, load_state, train, StageSel};
use phwm_cli::{CliError, CliResult, ExperimentConfig};

#[derive(Parser)]
#[command(name = "phwm", version, about = "Port-Hamiltonian world models with energy-constrained control")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML config; every key has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `section.key=value`, applied after the file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Subcommand)]
enum Cmd {
    /// Random-policy rollouts as JSON lines plus a manifest.
    GenerateData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-stage training; one directory per seed under the output dir.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides the config seed list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the rolling checkpoint if present.
        #[arg(long)]
        resume: bool,
        /// Stop after this many updates (checkpoint written).
        #[arg(long)]
        halt_after: Option<u64>,
    },
    /// Evaluation report, energy trace CSV and SVG.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full model against the no-implicit and no-explicit variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Renders CSV columns as an SVG line plot.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        x: String,
        /// Comma separated column names.
        #[arg(long, value_delimiter = ',')]
        y: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "")]
        title: String,
    },
    /// Prints the log phase volume of a checkpoint's evaluation latents.
    PhaseVolume {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load(common: &Common) -> CliResult<ExperimentConfig> {
    ExperimentConfig::load(common.config.as_deref(), &common.overrides)
}

fn seeds(cfg: &ExperimentConfig, seed: Option<u64>) -> Vec<u64> {
    seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s])
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.cmd {
        Cmd::GenerateData { common, seed, out } => {
            let cfg = load(&common)?;
            let m = generate_data(&cfg, seed, &out)?;
            let lines: usize = m.files.iter().map(|f| f.lines).sum();
            println!("wrote {} episodes ({lines} steps) to {}", m.files.len(), out.display());
        }
        Cmd::Train { common, seed, stage, out, resume, halt_after } => {
            let cfg = load(&common)?;
            let out = out.unwrap_or_else(|| cfg.out_dir.clone());
            let stage = match stage {
                StageArg::One => StageSel::One,
                StageArg::Two => StageSel::Two,
                StageArg::All => StageSel::All,
            };
            for s in seeds(&cfg, seed) {
                let complete = train(&cfg, s, stage, &out, resume, halt_after)?;
                println!("seed {s}: {}", if complete { "complete" } else { "halted (resume with --resume)" });
            }
        }
        Cmd::Eval { common, checkpoint, out } => {
            let cfg = load(&common)?;
            let r = eval_checkpoint(&cfg, &checkpoint, &out)?;
            println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
        }
        Cmd::Ablate { common, seed, out } => {
            let cfg = load(&common)?;
            let out = out.unwrap_or_else(|| cfg.out_dir.join("ablation"));
            for s in seeds(&cfg, seed) {
                let dir = out.join(format!("seed_{s}"));
                for r in ablate(&cfg, s, &dir)? {
                    println!("seed {s} {}: return {:.3} tec {:.4} msj {:.4}", r.variant, r.return_mean, r.tec, r.msj);
                }
            }
        }
        Cmd::Plot { csv, x, y, out, title } => {
            let text = fs::read_to_string(&csv).map_err(|e| CliError::io(&csv, e))?;
            let ys: Vec<&str> = y.iter().map(String::as_str).collect();
            let svg = line_plot(&Table::parse(&text)?, &x, &ys, &title)?;
            fs::write(&out, svg).map_err(|e| CliError::io(&out, e))?;
        }
        Cmd::PhaseVolume { common, checkpoint } => {
            let cfg = load(&common)?;
            let state = load_state(&checkpoint, &cfg)?;
            let ev = evaluate(&state, &cfg, "")?;
            match sum_log_volume(&state, &ev.hs)? {
                Some(v) => println!("{v}"),
                None => return Err(CliError::Config("checkpoint has no PH module".into())),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
