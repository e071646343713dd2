use std::path::PathBuf;
use std::process::ExitCode;

use a2po::harness::{cmd_ablate, cmd_eval, cmd_gradcheck, cmd_train, ExperimentConfig};
use a2po::Error;
use clap::{Args, Parser, Subcommand};

/// Exit status for a numerical failure (non-finite values, failed gradcheck).
const EXIT_NUMERICAL: u8 = 2;
/// Exit status for bad input: config, checkpoint, task suite, I/O.
const EXIT_VALIDATION: u8 = 1;

#[derive(Parser)]
#[command(name = "a2po", version, about = "Train and evaluate aux-timing policies on synthetic keyed-lookup tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file (`key: value` lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Warm start, train, evaluate; writes a full run directory.
    Train(Common),
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Task suite as JSON Lines; defaults to the config's evaluation suite.
        #[arg(long)]
        tasks: Option<PathBuf>,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck(Common),
    /// Train and evaluate the five component-ablation variants.
    Ablate(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut config = match &common.config {
        Some(p) => ExperimentConfig::parse_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        config.train.seed = s;
    }
    if let Some(o) = &common.out {
        config.out_dir = o.clone();
    }
    config.validate()?;
    Ok(config)
}

fn init_logging(level: &str) {
    let env = env_logger::Env::default().default_filter_or(level);
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let common = match &cli.command {
        Command::Train(c) | Command::Gradcheck(c) | Command::Ablate(c) => c,
        Command::Eval { common, .. } => common,
    };
    let config = load(common)?;
    init_logging(&config.log_level);
    match &cli.command {
        Command::Train(_) => {
            let s = cmd_train(&config)?;
            println!("trained {} steps, eval accuracy {:.4}, timing correctness {:.4}", s.history.len(), s.eval.accuracy, s.eval.timing_correctness);
            println!("artifacts in {}", s.out_dir.display());
        }
        Command::Eval { checkpoint, tasks, .. } => {
            let r = cmd_eval(&config, checkpoint, tasks.as_deref())?;
            println!("accuracy {:.4} over {} trajectories", r.accuracy, r.trajectories);
            for (class, s) in &r.per_class {
                println!("  {:<10} tasks {:>5}  accuracy {:.4}  aux {:.4}", class.name(), s.tasks, s.accuracy, s.aux_rate);
            }
            println!("mean ppl {:.4}, timing correctness {:.4}", r.mean_ppl, r.timing_correctness);
        }
        Command::Gradcheck(_) => {
            let r = cmd_gradcheck(&config)?;
            for s in &r.suites {
                println!(
                    "{:<15} {} coords  max rel error {:.3e} at coordinate {} (analytic {:.6e}, numeric {:.6e})",
                    s.name, s.coordinates, s.max_rel_error, s.worst_coordinate, s.analytic, s.numeric
                );
            }
            let verdict = if r.pass { "PASS" } else { "FAIL" };
            println!("{verdict}: max relative error {:.3e} (tolerance {:.0e})", r.max_rel_error(), r.tolerance);
            if !r.pass {
                return Ok(ExitCode::from(EXIT_NUMERICAL));
            }
        }
        Command::Ablate(_) => {
            let rows = cmd_ablate(&config)?;
            println!("{:<18} LR TR QR Vis    acc     ppl  timing", "variant");
            for r in rows {
                let m = |b: bool| if b { "x" } else { "-" };
                println!(
                    "{:<18} {:<2} {:<2} {:<2} {:<3} {:.4} {:.4}  {:.4}",
                    r.variant,
                    m(r.lr),
                    m(r.tr),
                    m(r.qr),
                    m(r.vis),
                    r.acc,
                    r.ppl,
                    r.timing_correctness
                );
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_VALIDATION })
        }
    }
}
