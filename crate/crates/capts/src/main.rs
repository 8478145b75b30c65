use std::path::PathBuf;
use std::process::ExitCode;

use capts::commands::{self, Workspace};
use capts::pipeline::Variant;
use capts::{CliError, CliResult, Overrides, RunConfig};
use capts_core::routing::Method;
use clap::{Parser, Subcommand, ValueEnum};

/// Trigger supervision, routing and multi-channel recall evaluation on
/// synthetic logs.
#[derive(Parser, Debug)]
#[command(name = "capts", version)]
struct Cli {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Comma-separated cutoffs, e.g. 20,50,100,200.
    #[arg(long, global = true, value_delimiter = ',', value_name = "K,...")]
    k_grid: Option<Vec<usize>>,
    /// Weight of predicted uniqueness in the routing score.
    #[arg(long, global = true)]
    eta: Option<f64>,
    /// Weight of the calibration loss.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Weight of the diversity loss.
    #[arg(long, global = true)]
    mu: Option<f64>,
    /// Calibrator correction bound.
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Label window, in effective views.
    #[arg(long, global = true, value_name = "N")]
    window_size: Option<usize>,
    /// Comma-separated subset of capts, recent, tagtop, ltv, nic.
    #[arg(long, global = true, value_delimiter = ',', value_parser = parse_method)]
    methods: Option<Vec<Method>>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic event log and item catalog.
    GenData,
    /// Build every channel's snapshots at the configured cadence.
    BuildIndexes,
    /// Rebuild consulted snapshots from the truncated log and compare bytes.
    AuditLeakage,
    /// Replay training requests into per-channel trigger labels.
    BuildSupervision,
    /// Train a routing model from the supervision file.
    Train {
        #[arg(long, value_enum, default_value_t = VariantArg::Full)]
        variant: VariantArg,
    },
    /// Evaluate the trained model and the rule-based baselines.
    Eval,
    /// Compare the full model with its no-diversity and no-calibrator variants.
    Ablate,
    /// Retrain and evaluate once per label window size.
    Sweep,
    /// Serve evaluation requests through the nearline cache and online path.
    Supply,
    /// Generate, index, audit, supervise, train and evaluate in one go.
    Run,
    /// Print the resolved config and its run directory.
    ShowConfig,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Full,
    NoDiv,
    NoCal,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::NoDiv => Variant::NoDiversity,
            VariantArg::NoCal => Variant::NoCalibrator,
        }
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: capts_core::Error| e.to_string())
}

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env();
    cfg.apply(&Overrides {
        seed: cli.seed,
        k_grid: cli.k_grid.clone(),
        eta: cli.eta,
        lambda: cli.lambda,
        mu: cli.mu,
        beta: cli.beta,
        window_size: cli.window_size,
        methods: cli.methods.clone(),
    })?;
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let cfg = resolve(cli)?;
    let ws = Workspace::new(cfg, cli.force);
    match &cli.command {
        Command::GenData => commands::gen_data(&ws).map(drop),
        Command::BuildIndexes => commands::build_indexes(&ws).map(drop),
        Command::AuditLeakage => commands::audit_leakage(&ws).map(drop),
        Command::BuildSupervision => commands::build_supervision(&ws).map(drop),
        Command::Train { variant } => commands::train(&ws, (*variant).into()).map(drop),
        Command::Eval => commands::eval(&ws).map(drop),
        Command::Ablate => commands::ablate(&ws).map(drop),
        Command::Sweep => commands::sweep(&ws).map(drop),
        Command::Supply => commands::supply(&ws).map(drop),
        Command::Run => commands::run(&ws).map(drop),
        Command::ShowConfig => {
            println!("# run directory: {}", ws.dir.display());
            print!("{}", ws.cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp_secs().init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_byte(&e))
        }
    }
}

fn exit_byte(e: &CliError) -> u8 {
    u8::try_from(e.exit_code()).unwrap_or(1)
}
