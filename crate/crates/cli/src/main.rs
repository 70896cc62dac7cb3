//! Command-line entry point. Exit codes: 0 success, 1 domain error, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use lfgnss::config::RunConfig;
use lfgnss::gradcheck::{self, GradcheckConfig};
use lfgnss::net::{self, tape::AdjointFault};
use lfgnss::{eval, workflow};

/// Log verbosity, in `env_logger` filter syntax.
const LOG_ENV: &str = "LFGNSS_LOG";

#[derive(Parser)]
#[command(name = "lfgnss", version, about = "Learned-noise GNSS positioning with an extended Kalman filter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Seed for simulation and network initialization.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario with ground truth.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Scenario length (s).
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Train the network on a dataset with ground truth.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file or directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Where to save the best-validation parameters.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training report CSV.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Position a dataset with the baselines and, given a model, the learned pipeline.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Solutions CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare solutions with the dataset's ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        solutions: Option<PathBuf>,
        /// Directory for the report and CDF files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check analytic gradients against central differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Finite-difference step.
        #[arg(long)]
        step: Option<f64>,
        /// Maximum accepted relative error.
        #[arg(long)]
        threshold: Option<f64>,
        /// Corrupt one adjoint rule to exercise the checker.
        #[arg(long, hide = true)]
        fault: Option<Fault>,
    },
    /// Summarize a dataset, one epoch's features, a model or the resolved configuration.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Print the features of this epoch index.
        #[arg(long, requires = "data")]
        epoch: Option<usize>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    Softplus,
    SolveSpd,
    LayerNorm,
    Matmul,
}

impl From<Fault> for AdjointFault {
    fn from(f: Fault) -> Self {
        match f {
            Fault::Softplus => AdjointFault::Softplus,
            Fault::SolveSpd => AdjointFault::SolveSpd,
            Fault::LayerNorm => AdjointFault::LayerNorm,
            Fault::Matmul => AdjointFault::MatMul,
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn or_default(flag: Option<PathBuf>, default: &Path) -> PathBuf {
    flag.unwrap_or_else(|| default.to_path_buf())
}

fn execute(command: Command) -> Result<bool> {
    match command {
        Command::Simulate { common, out, duration } => {
            let mut cfg = load_config(&common)?;
            if let Some(d) = duration {
                cfg.scenario.duration_s = d;
            }
            cfg.validate()?;
            let out = or_default(out, &cfg.paths.data_dir);
            print!("{}", lfgnss::sim::describe(&cfg.scenario));
            let s = workflow::simulate(&cfg, &out)?;
            println!("wrote {} epochs to {}", s.records.len(), out.display());
        }
        Command::Train {
            common,
            data,
            out,
            report,
            epochs,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.validate()?;
            let records = workflow::load_records(&or_default(data, &cfg.paths.data_dir))?;
            let model = or_default(out, &cfg.paths.model);
            let report = report.unwrap_or_else(|| cfg.paths.out_dir.join(workflow::TRAIN_REPORT_FILE));
            let t = workflow::train_model(&cfg, &records, &model, &report)?;
            println!(
                "best validation 3D RMSE {:.3} m at epoch {}; model saved to {}",
                t.report.best_val_rmse_3d,
                t.report.best_epoch,
                model.display()
            );
        }
        Command::Run {
            common,
            data,
            model,
            out,
        } => {
            let cfg = load_config(&common)?;
            let records = workflow::load_records(&or_default(data, &cfg.paths.data_dir))?;
            let params = match model {
                Some(m) => Some(net::load_params(&m)?),
                None if cfg.paths.model.exists() => Some(net::load_params(&cfg.paths.model)?),
                None => {
                    info!("no model at {}; running baselines only", cfg.paths.model.display());
                    None
                }
            };
            let runs = workflow::run_methods(&cfg, &records, params.as_ref());
            let out = out.unwrap_or_else(|| cfg.paths.out_dir.join(workflow::SOLUTIONS_FILE));
            workflow::write_solutions(&runs, &out)?;
            println!("wrote {} methods x {} epochs to {}", runs.len(), records.len(), out.display());
        }
        Command::Eval {
            common,
            data,
            solutions,
            out,
        } => {
            let cfg = load_config(&common)?;
            let records = workflow::load_records(&or_default(data, &cfg.paths.data_dir))?;
            let solutions = solutions.unwrap_or_else(|| cfg.paths.out_dir.join(workflow::SOLUTIONS_FILE));
            let runs = workflow::read_solutions(&solutions)?;
            let out = or_default(out, &cfg.paths.out_dir);
            let reports = workflow::evaluate(&records, &runs, &out)?;
            print!("{}", eval::summary_table(&reports));
        }
        Command::Gradcheck {
            common,
            step,
            threshold,
            fault,
        } => {
            let cfg = load_config(&common)?;
            let mut g = GradcheckConfig {
                seed: cfg.seed,
                r_floor: cfg.filter.r_floor,
                dhem: cfg.dhem,
                fault: fault.map(Into::into),
                ..GradcheckConfig::default()
            };
            if let Some(s) = step {
                if !(s > 0.0) {
                    bail!("step must be positive");
                }
                g.step = s;
            }
            if let Some(t) = threshold {
                g.threshold = t;
            }
            let report = gradcheck::run(&g)?;
            println!("{}", report.summary());
            return Ok(report.passed);
        }
        Command::Inspect {
            common,
            data,
            epoch,
            model,
        } => {
            let cfg = load_config(&common)?;
            if data.is_none() && model.is_none() {
                print!("{}", cfg.to_toml());
            }
            if let Some(d) = data {
                let records = workflow::load_records(&d)?;
                print!("{}", workflow::inspect_dataset(&cfg, &records, epoch)?);
            }
            if let Some(m) = model {
                print!("{}", workflow::inspect_model(&m).with_context(|| format!("inspecting {}", m.display()))?);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
