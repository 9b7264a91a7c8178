use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::LevelFilter;

use stratum_core::report::Format;
use stratum_core::{Policy, Scenario, SimError};

mod commands;
mod presets;

#[derive(Parser, Debug)]
#[command(
    name = "stratum",
    version,
    about = "Analytical simulator for tiered 3D-DRAM MoE serving"
)]
struct Cli {
    /// off, error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn", value_name = "LEVEL")]
    log_level: LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Scenario file, or the name of a preset looked up in
    /// $STRATUM_PRESET_DIR and then among the built-in presets.
    #[arg(long, value_name = "PATH")]
    config: String,

    /// Dotted-key override such as `workload.max_batch=4`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Overrides `workload.seed`.
    #[arg(long)]
    seed: Option<u64>,

    /// Output file; standard output when omitted.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self, extra: &[String]) -> Vec<String> {
        let mut all = self.overrides.clone();
        if let Some(seed) = self.seed {
            all.push(format!("workload.seed={seed}"));
        }
        all.extend_from_slice(extra);
        all
    }

    fn scenario(&self, extra: &[String]) -> Result<Scenario, SimError> {
        presets::load_scenario(&self.config, &self.overrides(extra))
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one serving simulation and emit its report.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "tiering")]
        policy: Policy,
        /// Arrival window in seconds; overrides `workload.duration_s`.
        #[arg(long)]
        duration: Option<f64>,
        /// json or csv; inferred from the --out extension when omitted.
        #[arg(long)]
        format: Option<Format>,
        /// Per-step CSV trace.
        #[arg(long, value_name = "PATH")]
        trace: Option<PathBuf>,
        /// Serialize expert stages instead of overlapping them.
        #[arg(long)]
        no_overlap: bool,
    },
    /// Simulate a grid of hot-hit targets, batch sizes and layer counts,
    /// one CSV row per cell.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.4,0.6,0.8,1.0")]
        hit_rates: Vec<f64>,
        /// Defaults to the scenario's `workload.max_batch`.
        #[arg(long, value_delimiter = ',')]
        batch_sizes: Vec<u32>,
        /// Defaults to the scenario's `model.num_layers`.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<u32>,
        #[arg(long, value_delimiter = ',', default_value = "tiering,no-tiering")]
        policies: Vec<Policy>,
        #[arg(long)]
        duration: Option<f64>,
        /// Simulations run at once; defaults to the number of CPUs.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Print the expert placement for one topic's usage.
    Place {
        #[command(flatten)]
        common: Common,
        /// Topic name or index; the first topic when omitted.
        #[arg(long)]
        topic: Option<String>,
    },
    /// Cost of re-placing experts when the batch topic changes.
    SwapCost {
        #[command(flatten)]
        common: Common,
        /// Topic name or index; the first topic when omitted.
        #[arg(long)]
        from: Option<String>,
        /// Topic name or index; the second topic when omitted.
        #[arg(long)]
        to: Option<String>,
    },
    /// Per-tier timing and bandwidth, refitting for other layer counts.
    DeriveTiers {
        #[command(flatten)]
        common: Common,
        /// Overrides `system.dram_layers`.
        #[arg(long)]
        layers: Option<u32>,
        /// Overrides `system.num_tiers`.
        #[arg(long)]
        tiers: Option<u32>,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Power and area ledger of the logic die.
    Budget {
        #[command(flatten)]
        common: Common,
        /// Evaluate at this MAC count instead of the configured one.
        #[arg(long)]
        macs: Option<u64>,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Load and validate a scenario, then print a summary.
    ValidateConfig {
        #[command(flatten)]
        common: Common,
    },
}

/// A user error detected by the CLI itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err.chain().any(|cause| {
        cause.is::<UsageError>()
            || cause
                .downcast_ref::<SimError>()
                .is_some_and(SimError::is_validation)
    });
    if validation {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
