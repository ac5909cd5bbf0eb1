use std::ffi::OsString;
use std::process::ExitCode;

use clap::Parser;
use minimpi::runtime::launcher::{aggregate, launch, LaunchOptions};
use minimpi::{LockMode, TransportKind};

/// Run a program as a multi-rank job.
#[derive(Parser)]
#[command(name = "minimpi-run", trailing_var_arg = true)]
struct Cli {
    /// Number of ranks.
    #[arg(short = 'n', default_value_t = 1)]
    ranks: usize,
    /// in-proc or socket.
    #[arg(long, default_value = "socket")]
    transport: TransportKind,
    /// global or pervci.
    #[arg(long)]
    lock_mode: Option<LockMode>,
    /// Explicit VCIs available per process.
    #[arg(long)]
    vci_pool: Option<usize>,
    program: OsString,
    #[arg(allow_hyphen_values = true)]
    args: Vec<OsString>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let opts = LaunchOptions {
        transport: cli.transport,
        lock_mode: cli.lock_mode,
        vci_pool: cli.vci_pool,
    };
    match launch(cli.ranks, &cli.program, &cli.args, &opts) {
        Ok(st) => ExitCode::from(aggregate(&st).clamp(0, 255) as u8),
        Err(e) => {
            eprintln!("minimpi-run: {e}");
            ExitCode::from(127)
        }
    }
}
