use std::io;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use minimpi::TransportKind;
use minimpi_bench::{msgrate, pingpong, progress_demo, repeat, Csv, Mode, MsgRateParams, Pattern, Placement};

#[derive(Parser)]
#[command(
    name = "minimpi-bench",
    about = "minimpi benchmarks; CSV on stdout, summary on stderr"
)]
struct Cli {
    /// Repetitions per data point.
    #[arg(long, default_value_t = 5, global = true)]
    reps: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Global,
    Pervci,
    Stream,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Inproc,
    Socket,
}

#[derive(Clone, Copy, ValueEnum)]
enum PatternArg {
    Latency,
    Bandwidth,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlacementArg {
    Threadcomm,
    Instances,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProgressArg {
    None,
    Thread,
}

#[derive(Subcommand)]
enum Cmd {
    /// Aggregate 8-byte message rate with T thread pairs.
    Msgrate {
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, value_enum, default_value = "pervci")]
        mode: ModeArg,
        #[arg(long, default_value_t = 64)]
        window: usize,
        /// Windows per thread.
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, value_enum, default_value = "inproc")]
        transport: TransportArg,
    },
    /// Ping-pong latency or windowed bandwidth between two ranks.
    P2p {
        #[arg(long, value_enum)]
        pattern: PatternArg,
        #[arg(long, value_enum)]
        placement: PlacementArg,
        /// Message sizes in bytes.
        #[arg(long, value_delimiter = ',', default_value = "0,8,1024,65536,1048576")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        iters: usize,
    },
    /// Passive-target epoch time against a busy target.
    ProgressDemo {
        #[arg(long, default_value_t = 2.0)]
        busy_seconds: f64,
        #[arg(long, value_enum, default_value = "none")]
        progress: ProgressArg,
    },
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    let reps = cli.reps;
    match cli.cmd {
        Cmd::Msgrate {
            threads,
            mode,
            window,
            iters,
            transport,
        } => {
            let p = MsgRateParams {
                mode: match mode {
                    ModeArg::Global => Mode::Global,
                    ModeArg::Pervci => Mode::PerVci,
                    ModeArg::Stream => Mode::Stream,
                },
                threads,
                window,
                iters,
                transport: match transport {
                    TransportArg::Inproc => TransportKind::InProc,
                    TransportArg::Socket => TransportKind::Socket,
                },
            };
            let s = repeat(reps, || msgrate(&p).map(|r| r.rate))?;
            let mut csv = Csv::new(io::stdout(), &["mode", "threads", "window", "median", "min", "max"])?;
            csv.row(&[
                p.mode.name().into(),
                threads.to_string(),
                window.to_string(),
                format!("{:.0}", s.median),
                format!("{:.0}", s.min),
                format!("{:.0}", s.max),
            ])?;
            eprintln!(
                "{} x{threads}: {:.3} Mmsg/s median of {reps}",
                p.mode.name(),
                s.median / 1e6
            );
        }
        Cmd::P2p {
            pattern,
            placement,
            sizes,
            iters,
        } => {
            let pattern = match pattern {
                PatternArg::Latency => Pattern::Latency,
                PatternArg::Bandwidth => Pattern::Bandwidth,
            };
            let placement = match placement {
                PlacementArg::Threadcomm => Placement::Threadcomm,
                PlacementArg::Instances => Placement::Instances,
            };
            // Latency in microseconds, bandwidth in MB/s.
            let scale = match pattern {
                Pattern::Latency => 1e6,
                Pattern::Bandwidth => 1e-6,
            };
            let mut csv = Csv::new(io::stdout(), &["size", "metric", "min", "max"])?;
            for size in sizes {
                let s = repeat(reps, || pingpong(pattern, placement, size, iters).map(|v| v * scale))?;
                csv.row(&[
                    size.to_string(),
                    format!("{:.3}", s.median),
                    format!("{:.3}", s.min),
                    format!("{:.3}", s.max),
                ])?;
                let unit = if pattern == Pattern::Latency { "us" } else { "MB/s" };
                eprintln!("{placement:?} {pattern:?} {size} B: {:.3} {unit}", s.median);
            }
        }
        Cmd::ProgressDemo { busy_seconds, progress } => {
            if !(busy_seconds >= 0.0 && busy_seconds.is_finite()) {
                return Err("busy-seconds must be a non-negative number".into());
            }
            let thread = matches!(progress, ProgressArg::Thread);
            let t = progress_demo(Duration::from_secs_f64(busy_seconds), thread)?;
            let mut csv = Csv::new(io::stdout(), &["busy_seconds", "progress", "seconds"])?;
            let name = if thread { "thread" } else { "none" };
            csv.row(&[busy_seconds.to_string(), name.into(), format!("{:.6}", t.as_secs_f64())])?;
            eprintln!("Completed all gets in {:.6} seconds", t.as_secs_f64());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("minimpi-bench: {e}");
            ExitCode::FAILURE
        }
    }
}
