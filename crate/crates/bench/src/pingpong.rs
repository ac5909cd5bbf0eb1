//! Two-rank latency and bandwidth, either as two threads of one instance
//! joined by a thread communicator or as two in-process instances.

use std::str::FromStr;
use std::time::Instant;

use bytes::Bytes;
use minimpi::{waitall, Comm, Config, Error, Result, Universe};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    /// Half the ping-pong round trip, in seconds.
    Latency,
    /// Windowed one-way bandwidth, in bytes per second.
    Bandwidth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    Threadcomm,
    Instances,
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Pattern> {
        match s {
            "latency" => Ok(Pattern::Latency),
            "bandwidth" => Ok(Pattern::Bandwidth),
            _ => Err(Error::Arg(format!("unknown pattern {s:?}"))),
        }
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Placement> {
        match s {
            "threadcomm" => Ok(Placement::Threadcomm),
            "instances" => Ok(Placement::Instances),
            _ => Err(Error::Arg(format!("unknown placement {s:?}"))),
        }
    }
}

/// Messages in flight per bandwidth round.
pub const BW_WINDOW: usize = 16;
const WARMUP: usize = 4;

/// One measurement of `pattern` at `size` bytes over `iters` round trips
/// (latency) or windows (bandwidth).
pub fn pingpong(pattern: Pattern, placement: Placement, size: usize, iters: usize) -> Result<f64> {
    if iters == 0 {
        return Err(Error::Arg("iters must be positive".into()));
    }
    let body = |c: &Comm, rank: usize| match pattern {
        Pattern::Latency => latency(c, rank, size, iters),
        Pattern::Bandwidth => bandwidth(c, rank, size, iters),
    };
    let out = match placement {
        Placement::Instances => Universe::run(2, &Config::default(), |inst| body(inst.world(), inst.rank()))?,
        Placement::Threadcomm => Universe::run(1, &Config::default(), |inst| {
            let tc = inst.world().threadcomm_init(2)?;
            let out: Vec<Result<(usize, f64)>> = std::thread::scope(|s| {
                let hs: Vec<_> = (0..2)
                    .map(|_| {
                        s.spawn(|| {
                            let rank = tc.threadcomm_start()?;
                            let r = body(&tc, rank);
                            tc.threadcomm_finish()?;
                            Ok((rank, r?))
                        })
                    })
                    .collect();
                hs.into_iter()
                    .map(|h| h.join().expect("benchmark thread panicked"))
                    .collect()
            });
            tc.threadcomm_free()?;
            let v = out.into_iter().collect::<Result<Vec<_>>>()?;
            Ok(v.into_iter().find(|&(r, _)| r == 0).expect("rank 0 thread").1)
        })?,
    };
    // Rank 0's measurement.
    out.into_iter().next().expect("rank 0 result")
}

fn fill(buf: &mut [u8], stamp: u64) {
    let s = stamp.to_le_bytes();
    for (i, b) in buf.iter_mut().enumerate() {
        *b = s[i % 8] ^ (i / 8) as u8;
    }
}

fn check(buf: &[u8], stamp: u64) -> Result<()> {
    let mut want = vec![0; buf.len()];
    fill(&mut want, stamp);
    if buf == want {
        Ok(())
    } else {
        Err(Error::Transport(format!("payload {stamp} arrived damaged")))
    }
}

fn latency(c: &Comm, rank: usize, size: usize, iters: usize) -> Result<f64> {
    let peer = 1 - rank;
    let mut out = vec![0u8; size];
    let mut inb = vec![0u8; size];
    let mut t = Instant::now();
    for i in 0..WARMUP + iters {
        if i == WARMUP {
            t = Instant::now();
        }
        if rank == 0 {
            fill(&mut out, i as u64);
            c.send(&out, peer, 0)?;
            c.recv(&mut inb, peer as i32, 0)?;
        } else {
            c.recv(&mut inb, peer as i32, 0)?;
            c.send(&inb, peer, 0)?;
        }
    }
    let elapsed = t.elapsed().as_secs_f64();
    if rank == 0 {
        check(&inb, (WARMUP + iters - 1) as u64)?;
    }
    Ok(elapsed / (2 * iters) as f64)
}

fn bandwidth(c: &Comm, rank: usize, size: usize, iters: usize) -> Result<f64> {
    let peer = 1 - rank;
    let payloads: Vec<Bytes> = (0..BW_WINDOW)
        .map(|k| {
            let mut v = vec![0; size];
            fill(&mut v, k as u64);
            v.into()
        })
        .collect();
    let mut reqs = Vec::with_capacity(BW_WINDOW);
    let mut t = Instant::now();
    for i in 0..WARMUP + iters {
        if i == WARMUP {
            t = Instant::now();
        }
        if rank == 0 {
            for p in &payloads {
                reqs.push(c.isend_owned(p.clone(), peer, 1)?);
            }
            waitall(&mut reqs)?;
            c.recv(&mut [], peer as i32, 2)?;
        } else {
            for _ in 0..BW_WINDOW {
                reqs.push(c.irecv(vec![0; size], peer as i32, 1)?);
            }
            waitall(&mut reqs)?;
            if i + 1 == WARMUP + iters {
                for (k, r) in reqs.iter_mut().enumerate() {
                    check(&r.take_buffer().unwrap_or_default(), k as u64)?;
                }
            }
            c.send(&[], peer, 2)?;
        }
        reqs.clear();
    }
    Ok((iters * BW_WINDOW * size) as f64 / t.elapsed().as_secs_f64())
}
