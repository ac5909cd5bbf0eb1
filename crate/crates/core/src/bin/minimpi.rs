use std::process::ExitCode;

use clap::{Parser, Subcommand};
use minimpi::datatype::parse_type_expr;
use minimpi::runtime::launcher::run_job;

#[derive(Parser)]
#[command(name = "minimpi", about = "Runtime tools and example programs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the segment summary of a datatype expression,
    /// e.g. `subarray([1000,1000,1000],[100,100,100],[300,300,300],contiguous(16,byte))`.
    TypeDump {
        expr: String,
        /// Number of leading segments to list.
        #[arg(short = 'k', long, default_value_t = 4)]
        segments: u64,
        /// Byte budget passed to the iov length query (-1: whole type).
        #[arg(long, default_value_t = -1, allow_negative_numbers = true)]
        max_bytes: i64,
    },
    /// Example programs meant to run under minimpi-run.
    Demo {
        #[command(subcommand)]
        which: Demo,
    },
}

#[derive(Subcommand)]
enum Demo {
    /// Every thread of every process reports its thread-communicator rank.
    Threadcomm {
        #[arg(long, default_value_t = 4)]
        threads: usize,
    },
}

fn type_dump(expr: &str, k: u64, max_bytes: i64) -> minimpi::Result<()> {
    let ty = parse_type_expr(expr)?;
    let (len, bytes) = ty.iov_len(max_bytes)?;
    println!("iov_len = {len}, iov_bytes = {bytes}");
    for (i, s) in ty.iov(0, k)?.iter().enumerate() {
        println!("iov[{i}] = {{{}, {}}}", s.offset, s.len);
    }
    Ok(())
}

fn threadcomm_demo(nt: usize) -> minimpi::Result<()> {
    run_job(|inst| {
        let tc = inst.world().threadcomm_init(nt)?;
        std::thread::scope(|sc| {
            let hs: Vec<_> = (0..nt)
                .map(|_| {
                    sc.spawn(|| -> minimpi::Result<()> {
                        let rank = tc.threadcomm_start()?;
                        println!("    Rank {rank} / {}", tc.size());
                        tc.threadcomm_finish()
                    })
                })
                .collect();
            hs.into_iter().try_for_each(|h| h.join().expect("demo thread"))
        })?;
        tc.threadcomm_free()
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::TypeDump {
            expr,
            segments,
            max_bytes,
        } => type_dump(&expr, segments, max_bytes),
        Cmd::Demo {
            which: Demo::Threadcomm { threads },
        } => threadcomm_demo(threads),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("minimpi: {e}");
            ExitCode::FAILURE
        }
    }
}
