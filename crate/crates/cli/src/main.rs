use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tsoed_core::config::CampaignConfig;
use tsoed_core::design::Method;
use tsoed_core::runner::{self, Overrides};
use tsoed_core::snapshot::Snapshot;
use tsoed_core::SoedError;

#[derive(Parser)]
#[command(name = "tsoed", version, about = "Sequential Bayesian experimental design campaigns")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Ub,
    Nmc,
    Gauss,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Ub => Method::Ub,
            MethodArg::Nmc => Method::Nmc,
            MethodArg::Gauss => Method::Gauss,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a campaign from a configuration file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Criterion used to choose designs.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long)]
        stages: Option<usize>,
    },
    /// Continue a campaign from the snapshot in its output directory.
    Resume {
        #[arg(long)]
        out: PathBuf,
        /// New total stage count.
        #[arg(long)]
        stages: Option<usize>,
    },
    /// Score every candidate with all three criteria on a frozen stage prior.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Snapshot holding the stage prior; the initial prior when omitted.
        #[arg(long)]
        snapshot: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Importance-sampling diagnostics of a snapshot's posterior map.
    Diagnose {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
    },
}

fn base_dir(path: &Path) -> PathBuf {
    let parent = path.parent().map(Path::to_path_buf).unwrap_or_default();
    std::path::absolute(&parent).unwrap_or(parent)
}

fn load(path: &Path, overrides: Overrides) -> tsoed_core::Result<CampaignConfig> {
    overrides.apply(CampaignConfig::load(path)?.with_absolute_paths(&base_dir(path)))
}

fn execute(cmd: Command) -> tsoed_core::Result<()> {
    match cmd {
        Command::Run {
            config,
            seed,
            out,
            method,
            stages,
        } => {
            let base = base_dir(&config);
            let cfg = load(
                &config,
                Overrides {
                    seed,
                    method: method.map(Into::into),
                    stages,
                },
            )?;
            let out = runner::output_dir(&cfg, &base, out);
            let state = runner::run_campaign(&cfg, &base, &out)?;
            for r in &state.results {
                println!(
                    "stage {}: design {} {} ESS/N {:.4} Hellinger {:.4} solves {}",
                    r.stage, r.design, r.design_label, r.diagnostics.ess_fraction, r.diagnostics.hellinger, r.stage_solves
                );
            }
            println!("results written to {}", out.display());
        }
        Command::Resume { out, stages } => {
            let state = runner::resume_campaign(&out, Path::new("."), stages)?;
            println!("campaign at stage {} in {}", state.history.len(), out.display());
        }
        Command::Compare {
            config,
            snapshot,
            seed,
            out,
        } => {
            let base = base_dir(&config);
            let cfg = load(
                &config,
                Overrides {
                    seed,
                    ..Default::default()
                },
            )?;
            let state = snapshot.map(|p| Snapshot::read(&p)).transpose()?.map(|s| s.state);
            let out = runner::output_dir(&cfg, &base, out);
            let cmp = runner::compare_estimators(&cfg, &base, state, &out)?;
            for m in [Method::Ub, Method::Nmc, Method::Gauss] {
                println!("{:>5} argmax {}", m.name(), cmp.argmax(m));
            }
        }
        Command::Diagnose { snapshot, samples } => {
            let snap = Snapshot::read(&snapshot)?;
            let d = runner::diagnose(&snap, Path::new("."), samples)?;
            println!("{}", serde_json::to_string_pretty(&d)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                SoedError::Config(_) | SoedError::Json(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
