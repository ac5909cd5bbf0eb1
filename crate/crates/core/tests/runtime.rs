use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use minimpi::runtime::launcher::{aggregate, launch, LaunchOptions};
use minimpi::{Config, Error, Info, Instance, TransportKind, Universe};
use proptest::prelude::*;

/// `Instance::init` is process-wide; tests that use it take turns.
static INIT: Mutex<()> = Mutex::new(());

#[test]
fn singleton_lifecycle() {
    let _g = INIT.lock().unwrap_or_else(|e| e.into_inner());
    let inst = Instance::init(Config::default()).unwrap();
    assert_eq!((inst.rank(), inst.size()), (0, 1));
    assert_eq!(inst.transport_kind(), TransportKind::InProc);

    let again = Instance::init(Config::default()).unwrap_err();
    assert!(matches!(again, Error::State(_)), "{again}");

    inst.world().barrier().unwrap();
    inst.finalize().unwrap();
    assert!(inst.is_finalized());
    assert!(matches!(inst.world().barrier(), Err(Error::State(_))));
    assert!(matches!(inst.stream_create(None), Err(Error::State(_))));
    assert!(matches!(inst.finalize(), Err(Error::State(_))));
    drop(inst);

    // The slot is free again once the old instance is gone.
    let inst = Instance::init(Config::default()).unwrap();
    inst.finalize().unwrap();
}

#[test]
fn in_proc_init_needs_a_singleton_job() {
    let _g = INIT.lock().unwrap_or_else(|e| e.into_inner());
    let cfg = Config {
        size: 2,
        ..Config::default()
    };
    assert!(matches!(Instance::init(cfg), Err(Error::Arg(_))));
}

#[test]
fn unreachable_rendezvous_times_out() {
    let _g = INIT.lock().unwrap_or_else(|e| e.into_inner());
    // Grab a port and release it so nothing is listening there.
    let addr = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .to_string();
    let cfg = Config {
        rank: 1,
        size: 2,
        transport: TransportKind::Socket,
        root_addr: Some(addr),
        connect_timeout_ms: 400,
        ..Config::default()
    };
    let t = Instant::now();
    let err = Instance::init(cfg).unwrap_err();
    assert!(matches!(err, Error::Transport(_)), "{err}");
    assert!(t.elapsed() < Duration::from_secs(5));
}

#[test]
fn launcher_environment_gives_rank_and_size() {
    let mut cfg = Config::default();
    cfg.apply_vars([("MINIMPI_RANK", "2"), ("MINIMPI_SIZE", "4")]).unwrap();
    assert_eq!((cfg.rank, cfg.size), (2, 4));

    let insts = Universe::socket(4, &Config::default()).unwrap();
    assert_eq!((insts[2].rank(), insts[2].size()), (2, 4));
    std::thread::scope(|s| {
        for i in &insts {
            s.spawn(move || i.finalize().unwrap());
        }
    });
}

#[test]
fn finalize_refuses_outstanding_requests() {
    let insts = Universe::in_proc(2, &Config::default()).unwrap();
    let (a, b) = (&insts[0], &insts[1]);
    let big = vec![7u8; 256 * 1024];
    let mut req = a.world().isend(&big, 1, 3).unwrap();
    assert!(matches!(a.finalize(), Err(Error::Pending(_))));

    std::thread::scope(|s| {
        s.spawn(|| {
            let mut buf = vec![0u8; big.len()];
            b.world().recv(&mut buf, 0, 3).unwrap();
            assert_eq!(buf, big);
            b.finalize().unwrap();
        });
        req.wait().unwrap();
        drop(req);
        a.finalize().unwrap();
    });
}

#[test]
fn finalize_refuses_active_threadcomm() {
    let insts = Universe::in_proc(1, &Config::default()).unwrap();
    let inst = &insts[0];
    let tc = inst.world().threadcomm_init(1).unwrap();
    tc.threadcomm_start().unwrap();
    assert!(matches!(inst.finalize(), Err(Error::State(_))));
    tc.threadcomm_finish().unwrap();
    tc.threadcomm_free().unwrap();
    inst.finalize().unwrap();
}

#[test]
fn finalize_refuses_running_progress_thread() {
    let insts = Universe::in_proc(1, &Config::default()).unwrap();
    let inst = &insts[0];
    inst.start_progress_thread(&minimpi::Stream::NULL).unwrap();
    assert!(matches!(inst.finalize(), Err(Error::State(_))));
    inst.stop_progress_thread(&minimpi::Stream::NULL).unwrap();
    inst.finalize().unwrap();
}

#[test]
fn info_strings() {
    let mut info = Info::new();
    info.set("type", "devstream").unwrap();
    assert_eq!(info.get("type"), Some("devstream"));
    info.set("type", "other").unwrap();
    assert_eq!(info.get("type"), Some("other"));
    assert_eq!(info.len(), 1);
    assert!(matches!(info.set("", "x"), Err(Error::Arg(_))));
}

#[test]
fn info_hex_encoding() {
    let mut info = Info::new();
    info.set_hex("a", &[0xde, 0xad]).unwrap();
    info.set_hex("b", &[]).unwrap();
    info.set_hex("c", &[0x00, 0x0f]).unwrap();
    assert_eq!(info.get("a"), Some("dead"));
    assert_eq!(info.get("b"), Some(""));
    assert_eq!(info.get("c"), Some("000f"));
    info.set("d", "xyz").unwrap();
    assert!(matches!(info.get_hex("d"), Err(Error::Arg(_))));
    assert_eq!(info.get_hex("missing").unwrap(), None);
}

proptest! {
    #[test]
    fn hex_round_trips(bytes in proptest::collection::vec(any::<u8>(), 0..4096)) {
        let mut info = Info::new();
        info.set_hex("v", &bytes).unwrap();
        prop_assert_eq!(info.get("v").unwrap().len(), bytes.len() * 2);
        prop_assert_eq!(info.get_hex("v").unwrap().unwrap(), bytes);
    }
}

fn demo() -> &'static str {
    env!("CARGO_BIN_EXE_minimpi")
}

#[test]
fn launch_singleton() {
    let st = launch(
        1,
        demo(),
        &["demo", "threadcomm", "--threads", "2"],
        &LaunchOptions::default(),
    )
    .unwrap();
    assert_eq!(st.len(), 1);
    assert_eq!(aggregate(&st), 0);
}

fn rank_lines(out: &[u8]) -> Vec<(usize, usize)> {
    let text = String::from_utf8_lossy(out);
    let mut v: Vec<(usize, usize)> = text
        .lines()
        .filter_map(|l| {
            let rest = l.trim().strip_prefix("Rank ")?;
            let (r, n) = rest.split_once(" / ")?;
            Some((r.parse().ok()?, n.parse().ok()?))
        })
        .collect();
    v.sort();
    v
}

#[test]
fn launched_threadcomm_demo_prints_eight_ranks() {
    for transport in ["socket", "in-proc"] {
        let out = Command::new(env!("CARGO_BIN_EXE_minimpi-run"))
            .args(["-n", "2", "--transport", transport, demo(), "demo", "threadcomm"])
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{transport}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let expect: Vec<_> = (0..8).map(|r| (r, 8)).collect();
        assert_eq!(rank_lines(&out.stdout), expect, "{transport}");
    }
}

#[test]
fn launch_reports_spawn_failure_and_child_exit() {
    let err = launch(
        2,
        "/nonexistent/minimpi-program",
        &[] as &[&str],
        &LaunchOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Spawn(_)), "{err}");

    let st = launch(
        1,
        demo(),
        &["type-dump", "vector(1,1"],
        &LaunchOptions {
            transport: TransportKind::InProc,
            ..LaunchOptions::default()
        },
    )
    .unwrap();
    assert_ne!(aggregate(&st), 0);
}
