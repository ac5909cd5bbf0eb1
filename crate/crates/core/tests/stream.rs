use std::collections::HashSet;

use minimpi::{Config, DeviceQueue, Error, Info, Instance, Stream, StreamKind, Universe};

fn solo(cfg: Config) -> Instance {
    Universe::in_proc(1, &cfg).unwrap().pop().unwrap()
}

fn devstream_info(handle: &[u8]) -> Info {
    let mut info = Info::new();
    info.set("type", "devstream").unwrap();
    info.set_hex("value", handle).unwrap();
    info
}

#[test]
fn serial_streams_own_distinct_vcis() {
    let inst = solo(Config::default());
    let (_, cap) = inst.vci_pool_usage();
    assert_eq!(cap, 64);
    let mut streams: Vec<Stream> = (0..cap).map(|_| inst.stream_create(None).unwrap()).collect();
    assert!(streams.iter().all(|s| s.kind() == StreamKind::SerialContext));
    let vcis: HashSet<_> = streams.iter().map(|s| s.vci().unwrap()).collect();
    assert_eq!(vcis.len(), cap);
    assert_eq!(inst.vci_pool_usage(), (cap, cap));

    let err = inst.stream_create(None).unwrap_err();
    assert!(matches!(err, Error::Exhausted(_)), "{err}");

    for (i, s) in streams.iter_mut().enumerate().take(10) {
        s.free().unwrap();
        assert_eq!(inst.vci_pool_usage(), (cap - i - 1, cap));
    }
    streams.iter_mut().skip(10).for_each(|s| s.free().unwrap());
    assert_eq!(inst.vci_pool_usage(), (0, cap));
    inst.finalize().unwrap();
}

#[test]
fn create_free_cycling_never_exhausts() {
    let inst = solo(Config {
        vci_pool: 8,
        ..Config::default()
    });
    let mut ids = HashSet::new();
    for _ in 0..10 * 8 {
        let mut s = inst.stream_create(None).unwrap();
        assert!(ids.insert(s.id().unwrap()), "stream ids are never reused");
        s.free().unwrap();
        assert!(s.is_null());
    }
    inst.finalize().unwrap();
}

#[test]
fn empty_info_means_serial_context() {
    let inst = solo(Config::default());
    let mut s = inst.stream_create(Some(&Info::new())).unwrap();
    assert_eq!(s.kind(), StreamKind::SerialContext);
    s.free().unwrap();
    inst.finalize().unwrap();
}

#[test]
fn free_rules() {
    let inst = solo(Config::default());
    assert!(matches!(Stream::NULL.clone().free(), Err(Error::Arg(_))));

    let mut s = inst.stream_create(None).unwrap();
    let comm = inst.world().stream_comm_create(&s).unwrap();
    assert!(matches!(s.free(), Err(Error::Pending(_))));
    comm.free().unwrap();

    inst.start_progress_thread(&s).unwrap();
    assert!(matches!(s.free(), Err(Error::Pending(_))));
    inst.stop_progress_thread(&s).unwrap();

    let stale = s.clone();
    s.free().unwrap();
    assert!(stale.is_freed());
    assert!(matches!(inst.stream_progress(&stale), Err(Error::Arg(_))));
    // Attaching a stream that is gone reports it as being freed.
    assert!(matches!(
        inst.world().stream_comm_create(&stale),
        Err(Error::Pending(_))
    ));
    inst.finalize().unwrap();
}

#[test]
fn device_queue_streams() {
    let inst = solo(Config::default());
    let q = DeviceQueue::new().unwrap();
    let info = devstream_info(&q.handle_bytes());
    let a = inst.stream_create(Some(&info)).unwrap();
    let b = inst.stream_create(Some(&info)).unwrap();
    assert_eq!(a.kind(), StreamKind::DeviceQueue);
    assert_eq!(a.device_queue().unwrap().handle(), q.handle());
    // Streams over one queue share its VCI and take nothing from the pool.
    assert_eq!(a.vci(), b.vci());
    assert_eq!(inst.vci_pool_usage().0, 0);
    assert_ne!(a.id(), b.id());
    drop((a, b));
    q.destroy().unwrap();
    inst.finalize().unwrap();
}

#[test]
fn stream_info_errors() {
    let inst = solo(Config::default());

    let unknown = (u64::MAX - 3).to_ne_bytes();
    let err = inst.stream_create(Some(&devstream_info(&unknown))).unwrap_err();
    assert!(matches!(err, Error::Arg(_)), "{err}");

    let short = devstream_info(&[1, 2, 3]);
    assert!(matches!(inst.stream_create(Some(&short)), Err(Error::Arg(_))));

    let mut bad_hex = Info::new();
    bad_hex.set("type", "devstream").unwrap();
    bad_hex.set("value", "not hex").unwrap();
    assert!(matches!(inst.stream_create(Some(&bad_hex)), Err(Error::Arg(_))));

    let mut cuda = Info::new();
    cuda.set("type", "cudaStream_t").unwrap();
    cuda.set_hex("value", &[0; 8]).unwrap();
    assert!(matches!(inst.stream_create(Some(&cuda)), Err(Error::Unsupported(_))));

    let mut other = Info::new();
    other.set("type", "fpga").unwrap();
    assert!(matches!(inst.stream_create(Some(&other)), Err(Error::Unsupported(_))));

    let mut untyped = Info::new();
    untyped.set("value", "00").unwrap();
    assert!(matches!(inst.stream_create(Some(&untyped)), Err(Error::Arg(_))));

    let q = DeviceQueue::new().unwrap();
    let info = devstream_info(&q.handle_bytes());
    q.destroy().unwrap();
    assert!(matches!(inst.stream_create(Some(&info)), Err(Error::Arg(_))));

    assert_eq!(inst.vci_pool_usage().0, 0);
    inst.finalize().unwrap();
}

#[test]
fn pool_size_comes_from_config() {
    let mut cfg = Config::default();
    cfg.apply_vars([("MINIMPI_VCI_POOL", "3")]).unwrap();
    let inst = solo(cfg);
    let _keep: Vec<_> = (0..3).map(|_| inst.stream_create(None).unwrap()).collect();
    assert!(matches!(inst.stream_create(None), Err(Error::Exhausted(_))));
    drop(_keep);
    // Dropping the last handle returns the VCI as well.
    assert_eq!(inst.vci_pool_usage(), (0, 3));
    inst.finalize().unwrap();
}
