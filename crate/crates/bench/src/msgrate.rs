//! Multithreaded message rate: T sender threads on rank 0, T receiver
//! threads on rank 1, one private communicator per thread pair, 8-byte
//! messages in windows of W.

use std::str::FromStr;
use std::time::{Duration, Instant};

use minimpi::{waitall, Comm, Config, Error, Instance, LockMode, Result, Stream, TransportKind, Universe};

const MSG: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// One lock for the whole instance, one dup'd communicator per thread.
    Global,
    /// Per-VCI locks, one dup'd communicator per thread.
    PerVci,
    /// One serial-context stream and stream communicator per thread.
    Stream,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Global, Mode::PerVci, Mode::Stream];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Global => "global",
            Mode::PerVci => "pervci",
            Mode::Stream => "stream",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Arg(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct MsgRateParams {
    pub mode: Mode,
    pub threads: usize,
    pub window: usize,
    /// Windows per thread.
    pub iters: usize,
    pub transport: TransportKind,
}

impl Default for MsgRateParams {
    fn default() -> Self {
        MsgRateParams {
            mode: Mode::PerVci,
            threads: 1,
            window: 64,
            iters: 200,
            transport: TransportKind::InProc,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MsgRate {
    /// Messages per second, all threads together.
    pub rate: f64,
    pub messages: u64,
    pub elapsed: Duration,
    /// Lock acquisitions on the per-thread stream VCIs of both ranks
    /// (always zero outside stream mode, where there are none).
    pub stream_lock_acquisitions: u64,
}

struct Side {
    elapsed: Duration,
    locks: u64,
}

pub fn msgrate(p: &MsgRateParams) -> Result<MsgRate> {
    if p.threads == 0 || p.window == 0 || p.iters == 0 {
        return Err(Error::Arg("threads, window and iters must be positive".into()));
    }
    let cfg = Config {
        transport: p.transport,
        lock_mode: if p.mode == Mode::Global {
            LockMode::Global
        } else {
            LockMode::PerVci
        },
        ..Config::default()
    };
    let sides = Universe::run(2, &cfg, |inst| side(inst, p))?
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let elapsed = sides.iter().map(|s| s.elapsed).max().unwrap_or_default();
    let messages = (p.threads * p.window * p.iters) as u64;
    Ok(MsgRate {
        rate: messages as f64 / elapsed.as_secs_f64(),
        messages,
        elapsed,
        stream_lock_acquisitions: sides.iter().map(|s| s.locks).sum(),
    })
}

fn side(inst: &Instance, p: &MsgRateParams) -> Result<Side> {
    let mut streams = Vec::new();
    let mut comms = Vec::new();
    for _ in 0..p.threads {
        comms.push(match p.mode {
            Mode::Stream => {
                let st = inst.stream_create(None)?;
                let c = inst.world().stream_comm_create(&st)?;
                streams.push(st);
                c
            }
            _ => inst.world().dup()?,
        });
    }
    let sender = inst.rank() == 0;
    inst.world().barrier()?;
    let t = Instant::now();
    let results: Vec<Result<()>> = std::thread::scope(|s| {
        let hs: Vec<_> = comms
            .iter()
            .map(|c| s.spawn(move || if sender { send_loop(c, p) } else { recv_loop(c, p) }))
            .collect();
        hs.into_iter()
            .map(|h| h.join().expect("benchmark thread panicked"))
            .collect()
    });
    let elapsed = t.elapsed();
    let locks = streams
        .iter()
        .filter_map(|st: &Stream| st.vci().and_then(|v| inst.vci_counters(v)))
        .map(|c| c.lock_acquisitions)
        .sum();
    inst.world().barrier()?;
    for c in &comms {
        c.free()?;
    }
    for st in &mut streams {
        st.free()?;
    }
    results.into_iter().collect::<Result<()>>()?;
    Ok(Side { elapsed, locks })
}

fn send_loop(c: &Comm, p: &MsgRateParams) -> Result<()> {
    let mut seq = 0u64;
    let mut reqs = Vec::with_capacity(p.window);
    let mut bufs = vec![[0u8; MSG]; p.window];
    for _ in 0..p.iters {
        for b in bufs.iter_mut() {
            *b = seq.to_le_bytes();
            seq += 1;
        }
        for b in &bufs {
            reqs.push(c.isend(b, 1, 0)?);
        }
        waitall(&mut reqs)?;
        reqs.clear();
    }
    Ok(())
}

fn recv_loop(c: &Comm, p: &MsgRateParams) -> Result<()> {
    let mut seq = 0u64;
    let mut reqs = Vec::with_capacity(p.window);
    for _ in 0..p.iters {
        for _ in 0..p.window {
            reqs.push(c.irecv(vec![0; MSG], 0, 0)?);
        }
        waitall(&mut reqs)?;
        for mut r in reqs.drain(..) {
            let b = r.take_buffer().unwrap_or_default();
            if b.len() != MSG || b[..] != seq.to_le_bytes() {
                return Err(Error::Transport(format!(
                    "message {seq} arrived damaged or out of order"
                )));
            }
            seq += 1;
        }
    }
    Ok(())
}
