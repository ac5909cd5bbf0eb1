//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach the terminal.
//! Each criterion runs on its own thread under a deadline; a stuck rank
//! shows up as a FAIL line instead of a hung test binary.

#[path = "../../core/tests/support/dtype_oracle.rs"]
mod oracle;
#[path = "../../core/tests/support/stress.rs"]
mod stress;

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::{Duration, Instant};

use minimpi::datatype::{Datatype, Order, BYTE, DOUBLE, FLOAT};
use minimpi::{
    waitall, Comm, Config, DeviceBuffer, DeviceQueue, GrequestFns, GrequestHandle, Info, Instance, Status, Stream,
    TransportKind, Universe,
};
use minimpi_bench::{
    msgrate, pingpong, progress_demo, rendezvous_needs_receiver, Mode, MsgRateParams, Pattern, Placement, Summary,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

// ---------------------------------------------------------------------------
// 1 and 2: datatypes

fn segs(t: &Datatype) -> Vec<(i64, u64)> {
    t.iov(0, u64::MAX).unwrap().iter().map(|s| (s.offset, s.len)).collect()
}

fn datatype_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = StdRng::seed_from_u64(0xacce_0001);
    let (mut checked, mut biggest) = (0, 0);
    while checked < 1000 {
        let mut o = oracle::random_type(&mut rng, 4);
        // Every tenth type is repeated so large segment counts show up too.
        if checked % 10 == 9 {
            let per = o.element_count().max(1);
            o = oracle::T::Contig(rng.gen_range(1..=100_000 / per), Box::new(o));
        }
        if o.element_count() > 100_000 {
            continue;
        }
        checked += 1;
        let t = o.build();
        let expect = oracle::flatten(&o, 1);
        biggest = biggest.max(expect.len());
        ensure!(segs(&t) == expect, "iov differs for {t}");
        let total: u64 = expect.iter().map(|s| s.1).sum();
        for max in [
            -1,
            0,
            1,
            total as i64 / 2,
            total as i64,
            rng.gen_range(-1..=total as i64 + 1),
        ] {
            ensure!(
                t.iov_len(max).unwrap() == oracle::iov_len(&expect, max),
                "iov_len({max}) differs for {t}"
            );
        }
        let lo = expect.iter().map(|s| s.0).min().unwrap_or(0);
        if lo >= 0 {
            let hi = expect.iter().map(|s| s.0 + s.1 as i64).max().unwrap_or(0) as usize;
            let src: Vec<u8> = (0..hi).map(|_| rng.gen()).collect();
            let mut packed = vec![0u8; t.size() as usize];
            t.pack(1, &src, &mut packed).map_err(|e| e.to_string())?;
            ensure!(packed == oracle::pack(&o, 1, &src), "pack differs for {t}");
        }
    }
    let took = t0.elapsed();
    ensure!(took < Duration::from_secs(60), "took {took:?}");
    Ok(format!(
        "{checked} types, up to {biggest} segments, {:.1} s",
        took.as_secs_f64()
    ))
}

fn subarray_example() -> Outcome {
    let elem = Datatype::contiguous(2, &DOUBLE).unwrap().committed();
    let t = Datatype::subarray(&[1000; 3], &[100; 3], &[300; 3], Order::C, &elem)
        .unwrap()
        .committed();
    let o = oracle::T::Subarray(
        vec![1000; 3],
        vec![100; 3],
        vec![300; 3],
        Box::new(oracle::T::Contig(2, Box::new(oracle::T::Basic(8)))),
    );
    let expect = oracle::flatten(&o, 1);
    let (n, bytes) = t.iov_len(-1).unwrap();
    ensure!(
        (n, bytes) == oracle::iov_len(&expect, -1),
        "iov_len {n}/{bytes} differs from the oracle"
    );
    ensure!((n, bytes) == (10_000, 16_000_000), "iov_len {n}/{bytes}");
    let first = t.iov(0, 4).unwrap();
    ensure!(
        first.len() == 4 && first.iter().all(|s| s.len == 1600),
        "first segments {first:?}"
    );
    ensure!(segs(&t) == expect, "segment list differs from the oracle");
    ensure!(t.node_count() <= 8, "descriptor has {} nodes", t.node_count());
    Ok(format!(
        "iov_len {n}, {bytes} bytes, {} descriptor nodes",
        t.node_count()
    ))
}

// ---------------------------------------------------------------------------
// 3: generalized requests

struct Countdown {
    k: usize,
    polls: Arc<AtomicUsize>,
}

fn countdown_poll(s: &mut Countdown, h: &GrequestHandle) -> minimpi::Result<()> {
    if s.polls.fetch_add(1, Ordering::SeqCst) + 1 == s.k {
        h.complete()?;
    }
    Ok(())
}

fn batch_wait(states: &mut [&mut Arc<Mutex<Vec<usize>>>], hs: &[GrequestHandle], _: f64) -> minimpi::Result<()> {
    states[0].lock().unwrap().push(states.len());
    hs.iter().try_for_each(GrequestHandle::complete)
}

fn fns<S>(poll: Option<fn(&mut S, &GrequestHandle) -> minimpi::Result<()>>) -> GrequestFns<S> {
    GrequestFns {
        query: |_, _: &mut Status| Ok(()),
        free: |_| Ok(()),
        cancel: |_, _| Ok(()),
        poll,
        wait: None,
    }
}

fn grequests() -> Outcome {
    let inst = Universe::in_proc(1, &Config::default()).unwrap().pop().unwrap();
    for k in 1..=10 {
        let polls = Arc::new(AtomicUsize::new(0));
        let mut r = inst
            .grequest_start(
                fns(Some(countdown_poll)),
                Countdown {
                    k,
                    polls: polls.clone(),
                },
            )
            .unwrap();
        let t = Instant::now();
        r.wait().map_err(|e| e.to_string())?;
        ensure!(t.elapsed() < Duration::from_secs(5), "k={k} took {:?}", t.elapsed());
        ensure!(
            polls.load(Ordering::SeqCst) == k,
            "k={k}: {} polls",
            polls.load(Ordering::SeqCst)
        );
    }

    let log = Arc::new(Mutex::new(Vec::new()));
    let batch = GrequestFns {
        wait: Some(batch_wait as fn(&mut [&mut Arc<Mutex<Vec<usize>>>], &[GrequestHandle], f64) -> _),
        ..fns(None)
    };
    let mut reqs: Vec<_> = (0..4)
        .map(|_| inst.grequest_start(batch, log.clone()).unwrap())
        .collect();
    waitall(&mut reqs).map_err(|e| e.to_string())?;
    drop(reqs);
    let calls = log.lock().unwrap().clone();
    ensure!(calls == [4], "wait callback counts {calls:?}");

    let mut r = inst.grequest_start(fns::<()>(None), ()).unwrap();
    let h = r.grequest_handle().unwrap();
    ensure!(r.test().unwrap().is_none(), "poll-less request finished on its own");
    let delay = Duration::from_millis(300);
    let helper = std::thread::spawn(move || {
        std::thread::sleep(delay);
        h.complete().unwrap();
    });
    let t = Instant::now();
    r.wait().map_err(|e| e.to_string())?;
    let waited = t.elapsed();
    helper.join().unwrap();
    ensure!(
        waited >= delay,
        "wait returned after {waited:?}, before the external completion"
    );
    drop(r);
    inst.finalize().map_err(|e| e.to_string())?;
    Ok(format!(
        "k=1..10 single waits; batch of {}; poll-less wait held {waited:.0?}",
        calls[0]
    ))
}

// ---------------------------------------------------------------------------
// 4: ordering and integrity

fn ordering_stress() -> Outcome {
    let t0 = Instant::now();
    let s = stress::script(0xacce_0004, 4, 100_000, 2000);
    let mut first = None;
    let mut runs = 0;
    for t in [TransportKind::InProc, TransportKind::Socket] {
        for r in stress::Regime::ALL {
            let out = stress::run(&s, t, r);
            ensure!(
                out.reorderings(&s) == 0,
                "{t:?}/{r:?}: {} reorderings",
                out.reorderings(&s)
            );
            ensure!(
                out.received.len() == 100_000,
                "{t:?}/{r:?}: {} received",
                out.received.len()
            );
            ensure!(out.intact(), "{t:?}/{r:?}: payload multiset differs");
            let got = (out.matched, out.tags);
            match &first {
                None => first = Some(got),
                Some(f) => ensure!(*f == got, "{t:?}/{r:?} matched differently"),
            }
            runs += 1;
        }
    }
    let took = t0.elapsed();
    ensure!(took < Duration::from_secs(300), "took {took:?}");
    Ok(format!(
        "{runs} runs x 100000 messages, identical outcomes, {:.1} s",
        took.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 5: thread communicator

fn threadcomm() -> Outcome {
    let per = Universe::run(2, &Config::default(), |inst| {
        let tc = inst.world().threadcomm_init(4).unwrap();
        for _ in 0..100 {
            std::thread::scope(|s| {
                for _ in 0..4 {
                    s.spawn(|| {
                        tc.threadcomm_start().unwrap();
                        tc.threadcomm_finish().unwrap();
                    });
                }
            });
        }
        let out = Mutex::new(Vec::new());
        std::thread::scope(|s| {
            for _ in 0..4 {
                s.spawn(|| {
                    let r = tc.threadcomm_start().unwrap();
                    let sum = tc.allreduce_sum_i64(r as i64).unwrap();
                    out.lock().unwrap().push((r, tc.size(), sum));
                    tc.threadcomm_finish().unwrap();
                });
            }
        });
        tc.threadcomm_free().unwrap();
        out.into_inner().unwrap()
    })
    .map_err(|e| e.to_string())?;
    let all: Vec<_> = per.into_iter().flatten().collect();
    let mut ranks: Vec<usize> = all.iter().map(|x| x.0).collect();
    ranks.sort();
    ensure!(ranks == (0..8).collect::<Vec<_>>(), "ranks {ranks:?}");
    ensure!(all.iter().all(|x| x.1 == 8), "sizes {all:?}");
    ensure!(all.iter().all(|x| x.2 == 28), "sums {all:?}");
    Ok("size 8, ranks 0..7, allreduce 28 everywhere, 100 activation cycles".into())
}

// ---------------------------------------------------------------------------
// 6: message rate

fn message_rate() -> (Outcome, bool) {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut locks = 0;
    let mut med = |mode, threads| -> Result<f64, String> {
        let p = MsgRateParams {
            mode,
            threads,
            iters: 500,
            ..MsgRateParams::default()
        };
        let mut v = Vec::new();
        for _ in 0..5 {
            let r = msgrate(&p).map_err(|e| e.to_string())?;
            locks += r.stream_lock_acquisitions;
            v.push(r.rate);
        }
        Ok(Summary::of(&v).median)
    };
    let mut run = || -> Result<[f64; 5], String> {
        Ok([
            med(Mode::Global, 1)?,
            med(Mode::Global, 4)?,
            med(Mode::PerVci, 1)?,
            med(Mode::PerVci, 4)?,
            med(Mode::Stream, 4)?,
        ])
    };
    let [g1, g4, p1, p4, s4] = match run() {
        Ok(v) => v,
        Err(e) => return (Err(e), true),
    };
    let detail = format!(
        "Mmsg/s global {:.2}->{:.2}, pervci {:.2}->{:.2}, stream(4) {:.2}; stream/pervci {:.2}, pervci 4/1 {:.2}, global 4/1 {:.2}; {locks} stream-path lock acquisitions; {cores} cores",
        g1 / 1e6,
        g4 / 1e6,
        p1 / 1e6,
        p4 / 1e6,
        s4 / 1e6,
        s4 / p4,
        p4 / p1,
        g4 / g1
    );
    if locks != 0 {
        return (Err(detail), true);
    }
    let shape = s4 >= 1.05 * p4 && p4 >= 2.0 * p1 && g4 <= 1.5 * g1;
    // The scaling half needs the cores to scale onto; the lock check above
    // holds everywhere.
    let enforced = cores >= 8;
    match (shape, enforced) {
        (true, _) => (Ok(detail), true),
        (false, true) => (Err(detail), true),
        (false, false) => (
            Err(format!("{detail}; scaling shape needs >= 8 cores, not enforced here")),
            false,
        ),
    }
}

// ---------------------------------------------------------------------------
// 7: thread communicator vs instances

fn placements() -> Outcome {
    let (mut lt, mut li, mut bt, mut bi) = (vec![], vec![], vec![], vec![]);
    let e = |e: minimpi::Error| e.to_string();
    for _ in 0..7 {
        lt.push(pingpong(Pattern::Latency, Placement::Threadcomm, 8, 2000).map_err(e)?);
        li.push(pingpong(Pattern::Latency, Placement::Instances, 8, 2000).map_err(e)?);
        bt.push(pingpong(Pattern::Bandwidth, Placement::Threadcomm, 1 << 20, 8).map_err(e)?);
        bi.push(pingpong(Pattern::Bandwidth, Placement::Instances, 1 << 20, 8).map_err(e)?);
    }
    let (lt, li) = (Summary::of(&lt).median * 1e6, Summary::of(&li).median * 1e6);
    let (bt, bi) = (Summary::of(&bt).median / 1e6, Summary::of(&bi).median / 1e6);
    let detail = format!(
        "8 B latency {lt:.2} vs {li:.2} us; 1 MiB bandwidth {bt:.0} vs {bi:.0} MB/s (threadcomm vs instances, 7 reps)"
    );
    ensure!(lt <= li && bt >= bi, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 8: progress dependence

fn progress() -> Outcome {
    let e = |e: minimpi::Error| e.to_string();
    let busy = Duration::from_secs(2);
    let none = progress_demo(busy, false).map_err(e)?;
    let thread = progress_demo(busy, true).map_err(e)?;
    let rv = rendezvous_needs_receiver(256 * 1024, Duration::from_secs(1)).map_err(e)?;
    let detail = format!(
        "epoch {:.3} s without target progress, {:.3} s with a progress thread; 256 KiB send stalled {} then done {:.1?} after receiver progress",
        none.as_secs_f64(),
        thread.as_secs_f64(),
        rv.stalled,
        rv.after_progress
    );
    ensure!(
        none >= Duration::from_millis(1800) && thread <= Duration::from_millis(200) && rv.stalled,
        "{detail}"
    );
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 9: enqueue semantics

fn device(inst: &Instance, q: &DeviceQueue) -> (Stream, Comm) {
    let mut info = Info::new();
    info.set("type", "devstream").unwrap();
    info.set_hex("value", &q.handle_bytes()).unwrap();
    let s = inst.stream_create(Some(&info)).unwrap();
    let c = inst.world().stream_comm_create(&s).unwrap();
    (s, c)
}

fn f32s(b: &[u8]) -> impl Iterator<Item = f32> + '_ {
    b.chunks_exact(4).map(|c| f32::from_ne_bytes(c.try_into().unwrap()))
}

fn enqueue() -> Outcome {
    const N: usize = 1 << 16;
    let (a, x0, y0) = (2.0f32, 1.0f32, 2.0f32);
    let out = Universe::run(2, &Config::default(), |inst| {
        let q = DeviceQueue::new().unwrap();
        let (mut s, c) = device(inst, &q);
        let mut y_out = None;
        if inst.rank() == 0 {
            let x: Vec<u8> = std::iter::repeat_n(x0.to_ne_bytes(), N).flatten().collect();
            c.send_enqueue(&x, N, &FLOAT, 1, 0).unwrap();
        } else {
            let y = DeviceBuffer::from_vec(std::iter::repeat_n(y0.to_ne_bytes(), N).flatten().collect());
            let (dx, dy) = (DeviceBuffer::zeroed(4 * N), DeviceBuffer::zeroed(4 * N));
            q.enqueue_memcpy(&dy, 0, &y, 0, 4 * N).unwrap();
            c.recv_enqueue(&dx, N, &FLOAT, 0, 0).unwrap();
            let (kx, ky) = (dx.clone(), dy.clone());
            q.enqueue_compute("saxpy", move || {
                let x: Vec<f32> = f32s(&kx.to_vec()).collect();
                ky.with(|yb| {
                    for (i, b) in yb.chunks_exact_mut(4).enumerate() {
                        let v = a * x[i] + f32::from_ne_bytes(b.try_into().unwrap());
                        b.copy_from_slice(&v.to_ne_bytes());
                    }
                });
            })
            .unwrap();
            q.enqueue_memcpy(&y, 0, &dy, 0, 4 * N).unwrap();
            y_out = Some(y);
        }
        // No synchronize: teardown is the only host wait.
        c.free().unwrap();
        s.free().unwrap();
        q.destroy().unwrap();
        y_out.map(|y| f32s(&y.to_vec()).collect::<Vec<_>>())
    })
    .map_err(|e| e.to_string())?;
    let y = out[1].as_ref().unwrap();
    ensure!(y.len() == N && y.iter().all(|&v| v == 4.0), "saxpy result wrong");

    let started = Arc::new(AtomicBool::new(false));
    let spans = Universe::run(2, &Config::default(), |inst| {
        let q = DeviceQueue::new().unwrap();
        let (mut s, c) = device(inst, &q);
        let n = 256 * 1024;
        let mut spans = None;
        if inst.rank() == 0 {
            while !started.load(Ordering::SeqCst) {
                std::thread::yield_now();
            }
            c.send(&vec![6u8; n], 1, 0).unwrap();
            q.synchronize().unwrap();
        } else {
            let buf = DeviceBuffer::zeroed(n);
            let r = c.irecv_enqueue(&buf, n, &BYTE, 0, 0).unwrap();
            let flag = started.clone();
            q.enqueue_compute("unrelated", move || {
                flag.store(true, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(50));
            })
            .unwrap();
            c.wait_enqueue(&r).unwrap();
            q.synchronize().unwrap();
            assert!(buf.to_vec().iter().all(|&b| b == 6));
            let t = q.trace();
            let at = |l: &str| t.iter().find(|r| r.label == l).unwrap().clone();
            spans = Some((at("irecv"), at("unrelated"), at("wait")));
        }
        c.free().unwrap();
        s.free().unwrap();
        q.destroy().unwrap();
        spans
    })
    .map_err(|e| e.to_string())?;
    let (irecv, work, wait) = spans[1].clone().unwrap();
    ensure!(
        irecv.end <= work.start && work.end <= wait.start,
        "compute task not between irecv and wait: {irecv:?} {work:?} {wait:?}"
    );
    Ok(format!(
        "y == 4.0 for all {N} elements without host sync; compute ran between irecv and wait"
    ))
}

// ---------------------------------------------------------------------------
// 10: resources

fn resources() -> Outcome {
    let inst = Universe::in_proc(1, &Config::default()).unwrap().pop().unwrap();
    let (_, cap) = inst.vci_pool_usage();
    let mut held: Vec<Stream> = (0..cap).map(|_| inst.stream_create(None).unwrap()).collect();
    let over = inst.stream_create(None);
    ensure!(
        matches!(over, Err(minimpi::Error::Exhausted(_))),
        "stream {} of {cap}: {over:?}",
        cap + 1
    );
    held.iter_mut().for_each(|s| s.free().unwrap());
    for i in 0..10 * cap {
        let mut s = inst.stream_create(None).map_err(|e| format!("cycle {i}: {e}"))?;
        s.free().unwrap();
    }
    let mut cuda = Info::new();
    cuda.set("type", "cudaStream_t").unwrap();
    cuda.set_hex("value", &[0; 8]).unwrap();
    let r = inst.stream_create(Some(&cuda));
    ensure!(matches!(r, Err(minimpi::Error::Unsupported(_))), "cudaStream_t: {r:?}");
    inst.finalize().map_err(|e| e.to_string())?;
    Ok(format!(
        "capacity {cap}: {} fails exhausted, {} create/free cycles, cudaStream_t unsupported",
        cap + 1,
        10 * cap
    ))
}

// ---------------------------------------------------------------------------

fn guarded(limit: Duration, f: impl FnOnce() -> (Outcome, bool) + Send + 'static) -> (Outcome, bool) {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (Err(format!("panicked: {msg}")), true)
        });
        let _ = tx.send(r);
    });
    rx.recv_timeout(limit)
        .unwrap_or_else(|_| (Err(format!("no result within {limit:?}")), true))
}

type Criterion = Box<dyn FnOnce() -> (Outcome, bool) + Send>;

fn main() {
    let strict = |f: fn() -> Outcome| move || (f(), true);
    let criteria: Vec<(&str, u64, Criterion)> = vec![
        ("datatype oracle equivalence", 120, Box::new(strict(datatype_oracle))),
        ("subarray iovec example", 60, Box::new(strict(subarray_example))),
        ("generalized requests", 60, Box::new(strict(grequests))),
        ("ordering and integrity stress", 600, Box::new(strict(ordering_stress))),
        ("thread communicator", 120, Box::new(strict(threadcomm))),
        ("message-rate ordering", 600, Box::new(message_rate)),
        ("threadcomm vs instances", 300, Box::new(strict(placements))),
        ("progress dependence", 60, Box::new(strict(progress))),
        ("enqueue semantics", 60, Box::new(strict(enqueue))),
        ("resource semantics", 60, Box::new(strict(resources))),
    ];
    let mut hard_failures = 0;
    for (i, (name, secs, f)) in criteria.into_iter().enumerate() {
        let (out, enforced) = guarded(Duration::from_secs(secs), f);
        match out {
            Ok(d) => println!("criterion {:>2} {name}: PASS ({d})", i + 1),
            Err(d) => {
                println!("criterion {:>2} {name}: FAIL ({d})", i + 1);
                hard_failures += usize::from(enforced);
            }
        }
    }
    if hard_failures > 0 {
        eprintln!("{hard_failures} enforced criteria failed");
        std::process::exit(1);
    }
}
