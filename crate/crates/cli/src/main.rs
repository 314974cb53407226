use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lcap_cli::commands::{self, Side};
use lcap_cli::sweep::{self, SweepParam};
use lcap_cli::{Failure, RunConfig};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Layer aggregation by capsule routing on a toy encoder/decoder.
#[derive(Parser, Debug)]
#[command(name = "lcap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and write metrics.csv, a checkpoint and summary.json.
    Train(Common),
    /// Evaluate a checkpoint on the held-out set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train once per value of one setting and tabulate final accuracy.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values; placement defaults to none,enc,dec,both.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Run the values concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Compare autodiff gradients with central differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Export per-iteration agreement heatmaps for one source sentence.
    RouteViz {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Source token ids, comma or space separated.
        #[arg(long)]
        tokens: String,
        #[arg(long, value_enum)]
        side: Option<Side>,
        /// Also write the per-position matrices.
        #[arg(long)]
        per_position: bool,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let run = commands::train(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&run.summary).expect("summary serialises"));
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.resolve()?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.checkpoint_path());
            let report = commands::eval(&cfg, Some(&ckpt))?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serialises"));
        }
        Command::Sweep {
            common,
            param,
            mut values,
            parallel,
        } => {
            let cfg = common.resolve()?;
            if values.is_empty() && param == SweepParam::Placement {
                values = sweep::PLACEMENTS.iter().map(|s| s.to_string()).collect();
            }
            let rows = sweep::run(&cfg, param, &values, parallel)?;
            print!("{}", sweep::to_csv(&rows));
        }
        Command::Gradcheck { common, tolerance } => {
            let cfg = common.resolve()?;
            let report = commands::gradcheck(&cfg, tolerance);
            match &report {
                Ok(r) => print!("{}", r.to_csv()),
                Err(Failure::Gradcheck(_)) => {
                    if let Ok(csv) = std::fs::read_to_string(cfg.output_dir.join("gradcheck.csv")) {
                        print!("{csv}");
                    }
                }
                Err(_) => {}
            }
            report?;
        }
        Command::RouteViz {
            common,
            checkpoint,
            tokens,
            side,
            per_position,
        } => {
            let cfg = common.resolve()?;
            let tokens = commands::parse_tokens(&tokens)?;
            let viz = commands::route_viz(&cfg, checkpoint.as_deref(), &tokens, side, per_position)?;
            for f in &viz.files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn thread_count() -> Result<Option<usize>, Failure> {
    match std::env::var("LCAP_THREADS") {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Failure::config(format!("LCAP_THREADS: expected a positive integer, got {s:?}"))),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = thread_count().and_then(|n| {
        lcap_core::exec::init_threads(n);
        run(cli)
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprint!("error: {f}");
            if !f.to_string().ends_with('\n') {
                eprintln!();
            }
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
