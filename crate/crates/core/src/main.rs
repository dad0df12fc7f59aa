use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use funion::harness::{
    check_tables, default_iou_config, emit_tables, run_e2e, run_iou_experiment,
    write_bacap_vectors, HarnessError, RunConfig,
};

#[derive(Parser)]
#[command(name = "funion", version, about = "Anonymous inference simulator and experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Verify the results and exit with status 3 if they are off.
    #[arg(long)]
    check: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured jobs end to end.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long)]
        lambda_s: Option<f64>,
        /// Nodes per mix layer.
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        payload_size: Option<usize>,
    },
    /// Write the latency and overhead tables.
    Tables {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.2)]
        mu: f64,
        #[arg(long, default_value_t = 0.2)]
        delta: f64,
        #[arg(long, default_value_t = 5)]
        echoes: u32,
    },
    /// Play the input/output unlinkability game.
    Iou {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2000)]
        trials: u64,
        /// Release results as soon as they are ready.
        #[arg(long)]
        no_bucketing: bool,
    },
    /// Write BACAP derivation test vectors.
    BacapVectors {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4)]
        count: u64,
    },
}

enum Failure {
    Harness(HarnessError),
    Check(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure::Harness(e)
    }
}

fn load(common: &Common, fallback: RunConfig) -> Result<RunConfig, HarnessError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => fallback,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate { common, mu, lambda_s, layers, payload_size } => {
            let mut cfg = load(&common, RunConfig::default())?;
            if let Some(mu) = mu {
                cfg.mu = mu;
            }
            if let Some(l) = lambda_s {
                cfg.lambda_s = l;
            }
            if let Some(w) = layers {
                cfg.topology.layer_width = w;
            }
            if let Some(p) = payload_size {
                cfg.payload_size = p;
            }
            let run = run_e2e(&cfg, Some(&common.out_dir))?;
            let s = &run.summary;
            println!("{}", serde_json::to_string_pretty(s).expect("serializes"));
            if common.check && (s.failed > 0 || s.output_mismatches > 0 || s.size_violations > 0) {
                return Err(Failure::Check(format!(
                    "{} failed, {} wrong outputs, {} off-size packets",
                    s.failed, s.output_mismatches, s.size_violations
                )));
            }
        }
        Command::Tables { common, mu, delta, echoes } => {
            let files = emit_tables(&common.out_dir, mu, delta, echoes)?;
            print!("{}", files.text);
            println!("wrote {} and {}", files.table3.display(), files.table4.display());
            if common.check {
                let failed: Vec<String> =
                    check_tables().into_iter().filter(|c| !c.1).map(|c| c.0).collect();
                if !failed.is_empty() {
                    return Err(Failure::Check(format!("mismatch: {}", failed.join(", "))));
                }
            }
        }
        Command::Iou { common, trials, no_bucketing } => {
            let mut cfg = load(&common, default_iou_config())?;
            if no_bucketing {
                cfg.bucketing = false;
            }
            let report = run_iou_experiment(&cfg, trials)?;
            let json = serde_json::to_string_pretty(&report).expect("serializes");
            std::fs::create_dir_all(&common.out_dir)
                .and_then(|_| std::fs::write(common.out_dir.join("iou_report.json"), &json))
                .map_err(|source| HarnessError::Io { path: common.out_dir.clone(), source })?;
            println!("{json}");
            if common.check {
                let ok = if cfg.bucketing {
                    report.ci_contains(0.5)
                } else {
                    report.confidence_interval.0 > 0.5
                };
                if !ok {
                    return Err(Failure::Check(format!(
                        "accuracy {:.4} with CI {:?}",
                        report.adversary_accuracy, report.confidence_interval
                    )));
                }
            }
        }
        Command::BacapVectors { common, count } => {
            let path = write_bacap_vectors(&common.out_dir, common.seed.unwrap_or(0), count)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Harness(e)) if e.is_config() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Harness(e)) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(3)
        }
    }
}
