//! Progress dependence: operations that need the peer's runtime to act do
//! not finish while the peer is busy elsewhere.

use std::sync::atomic::{AtomicU8, Ordering};
use std::time::{Duration, Instant};

use minimpi::datatype::INT32;
use minimpi::{Config, Error, LockType, Result, Stream, Universe};

const GETS: usize = 1024;

/// Rank 1 exposes 1024 ints and then sleeps for `busy`; rank 0 reads them
/// one get at a time in a shared-lock epoch. Returns how long rank 0's
/// epoch took. With `progress_thread`, rank 1 runs a progress thread on
/// the null stream while it sleeps.
pub fn progress_demo(busy: Duration, progress_thread: bool) -> Result<Duration> {
    let out = Universe::run(2, &Config::default(), |inst| -> Result<Option<Duration>> {
        let data: Vec<u8> = (0..GETS as i32).flat_map(i32::to_ne_bytes).collect();
        let win = inst.world().win_create(data.clone(), 4)?;
        let target = inst.rank() == 1;
        if target && progress_thread {
            inst.start_progress_thread(&Stream::NULL)?;
        }
        inst.world().barrier()?;
        let took = if target {
            std::thread::sleep(busy);
            None
        } else {
            let t = Instant::now();
            let mut buf = vec![0u8; data.len()];
            let mut ep = win.lock(LockType::Shared, 1)?;
            for i in 0..GETS {
                ep.get(4 * i, i, 1, &INT32)?;
            }
            ep.unlock(&mut buf)?;
            let took = t.elapsed();
            if buf != data {
                return Err(Error::Transport("get returned wrong data".into()));
            }
            Some(took)
        };
        if target && progress_thread {
            inst.stop_progress_thread(&Stream::NULL)?;
        }
        win.free()?;
        Ok(took)
    })?;
    out.into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::State("origin reported no time".into()))
}

#[derive(Debug, Clone, Copy)]
pub struct RendezvousProbe {
    /// The send was still incomplete after the quiet period.
    pub stalled: bool,
    /// Time from the first receiver progress call to send completion.
    pub after_progress: Duration,
}

const POSTED: u8 = 1;
const GO: u8 = 2;
const SENT: u8 = 3;

/// Rank 1 posts a receive of `size` bytes and then leaves its runtime
/// alone. Rank 0 tests its send for `quiet`; then rank 1 starts calling
/// `stream_progress` on the null stream until the send is done.
pub fn rendezvous_needs_receiver(size: usize, quiet: Duration) -> Result<RendezvousProbe> {
    let phase = AtomicU8::new(0);
    let wait_for = |p: u8| {
        while phase.load(Ordering::Acquire) < p {
            std::thread::sleep(Duration::from_micros(200));
        }
    };
    let out = Universe::run(2, &Config::default(), |inst| -> Result<Option<RendezvousProbe>> {
        let w = inst.world();
        if inst.rank() == 1 {
            let mut r = w.irecv(vec![0; size], 0, 0)?;
            phase.store(POSTED, Ordering::Release);
            wait_for(GO);
            while phase.load(Ordering::Acquire) < SENT {
                inst.stream_progress(&Stream::NULL)?;
            }
            r.wait()?;
            let b = r.take_buffer().unwrap_or_default();
            if b.len() != size || b.iter().any(|&x| x != 0xa5) {
                return Err(Error::Transport("rendezvous payload arrived damaged".into()));
            }
            Ok(None)
        } else {
            wait_for(POSTED);
            let data = vec![0xa5u8; size];
            let mut s = w.isend(&data, 1, 0)?;
            let t = Instant::now();
            let mut stalled = true;
            while t.elapsed() < quiet {
                if s.test()?.is_some() {
                    stalled = false;
                    break;
                }
                std::thread::sleep(Duration::from_millis(1));
            }
            phase.store(GO, Ordering::Release);
            let t = Instant::now();
            s.wait()?;
            let after_progress = t.elapsed();
            phase.store(SENT, Ordering::Release);
            Ok(Some(RendezvousProbe {
                stalled,
                after_progress,
            }))
        }
    })?;
    out.into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::State("sender reported nothing".into()))
}
