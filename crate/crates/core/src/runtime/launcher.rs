//! Starting multi-rank jobs.
//!
//! [`launch`] spawns one child process per rank with `MINIMPI_RANK`,
//! `MINIMPI_SIZE` and `MINIMPI_ROOT_ADDR` set; the children join over the
//! socket transport. The in-process transport cannot span processes, so an
//! in-process job is a single child that hosts every rank on its own thread
//! (see [`run_job`]).

use std::ffi::OsStr;
use std::net::TcpListener;
use std::process::{Child, Command, ExitStatus};
use std::time::Duration;

use super::{Config, Instance, LockMode, TransportKind, Universe};
use crate::error::{Error, Result};

/// Launcher flags. `None` leaves the child's environment (or the default)
/// in charge.
#[derive(Debug, Clone)]
pub struct LaunchOptions {
    pub transport: TransportKind,
    pub lock_mode: Option<LockMode>,
    pub vci_pool: Option<usize>,
}

impl Default for LaunchOptions {
    fn default() -> Self {
        LaunchOptions {
            transport: TransportKind::Socket,
            lock_mode: None,
            vci_pool: None,
        }
    }
}

fn common_env(cmd: &mut Command, n: usize, opts: &LaunchOptions) {
    cmd.env("MINIMPI_SIZE", n.to_string());
    cmd.env(
        "MINIMPI_TRANSPORT",
        match opts.transport {
            TransportKind::InProc => "in-proc",
            TransportKind::Socket => "socket",
        },
    );
    if let Some(m) = opts.lock_mode {
        cmd.env(
            "MINIMPI_LOCK_MODE",
            match m {
                LockMode::Global => "global",
                LockMode::PerVci => "pervci",
            },
        );
    }
    if let Some(p) = opts.vci_pool {
        cmd.env("MINIMPI_VCI_POOL", p.to_string());
    }
}

fn spawn(cmd: &mut Command, program: &OsStr) -> Result<Child> {
    cmd.spawn()
        .map_err(|e| Error::Spawn(format!("cannot start {}: {e}", program.to_string_lossy())))
}

/// Runs `program args…` as an `n`-rank job and returns each child's exit
/// status (one entry for an in-process job). If a child fails, the others
/// are killed so that nobody waits forever on a dead peer.
pub fn launch<S: AsRef<OsStr>>(
    n: usize,
    program: impl AsRef<OsStr>,
    args: &[S],
    opts: &LaunchOptions,
) -> Result<Vec<ExitStatus>> {
    if n == 0 {
        return Err(Error::arg("a job needs at least one rank"));
    }
    let program = program.as_ref();
    let mut children = Vec::new();
    if opts.transport == TransportKind::InProc || n == 1 {
        let mut cmd = Command::new(program);
        cmd.args(args);
        common_env(&mut cmd, n, opts);
        cmd.env("MINIMPI_RANK", "0").env_remove("MINIMPI_ROOT_ADDR");
        children.push(spawn(&mut cmd, program)?);
    } else {
        // Reserve a free loopback port for rank 0 to listen on.
        let addr = TcpListener::bind("127.0.0.1:0")?.local_addr()?.to_string();
        for rank in 0..n {
            let mut cmd = Command::new(program);
            cmd.args(args);
            common_env(&mut cmd, n, opts);
            cmd.env("MINIMPI_RANK", rank.to_string())
                .env("MINIMPI_ROOT_ADDR", &addr);
            match spawn(&mut cmd, program) {
                Ok(c) => children.push(c),
                Err(e) => {
                    kill_all(&mut children);
                    return Err(e);
                }
            }
        }
    }
    wait_all(children)
}

fn kill_all(children: &mut [Child]) {
    for c in children.iter_mut() {
        let _ = c.kill();
        let _ = c.wait();
    }
}

fn wait_all(mut children: Vec<Child>) -> Result<Vec<ExitStatus>> {
    let mut out: Vec<Option<ExitStatus>> = vec![None; children.len()];
    loop {
        let mut failed = false;
        for (i, c) in children.iter_mut().enumerate() {
            if out[i].is_none() {
                if let Some(st) = c.try_wait()? {
                    failed |= !st.success();
                    out[i] = Some(st);
                }
            }
        }
        if out.iter().all(Option::is_some) {
            return Ok(out.into_iter().flatten().collect());
        }
        if failed {
            for (i, c) in children.iter_mut().enumerate() {
                if out[i].is_none() {
                    let _ = c.kill();
                    out[i] = Some(c.wait()?);
                }
            }
            return Ok(out.into_iter().flatten().collect());
        }
        std::thread::sleep(Duration::from_millis(10));
    }
}

/// Exit code for a job: zero when every rank succeeded, otherwise the first
/// nonzero code (1 for a rank killed by a signal).
pub fn aggregate(statuses: &[ExitStatus]) -> i32 {
    statuses
        .iter()
        .find(|s| !s.success())
        .map_or(0, |s| s.code().unwrap_or(1))
}

/// Entry point for launched programs. Reads the configuration from the
/// environment and runs `f` on this process's rank, or on every rank when
/// the job uses the in-process transport, then finalizes.
pub fn run_job<F>(f: F) -> Result<()>
where
    F: Fn(&Instance) -> Result<()> + Sync,
{
    let cfg = Config::from_env()?;
    if cfg.transport == TransportKind::InProc && cfg.size > 1 {
        return Universe::run(cfg.size, &cfg, |inst| f(inst))?.into_iter().collect();
    }
    let inst = Instance::init(cfg)?;
    f(&inst)?;
    inst.finalize()
}
