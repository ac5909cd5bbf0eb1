//! Instance lifecycle, configuration, info objects and the launcher.

mod config;
mod info;
pub mod launcher;

use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

pub use config::{Config, LockMode, TransportKind};
pub use info::Info;

use crate::comm::Comm;
use crate::error::{Error, Result};
use crate::onesided::RmaState;
use crate::request::{GlobalGreqs, ProgressThreads};
use crate::stream::VciPool;
use crate::transport::{self, socket, Fabric, InProcNet, VciArray};

pub(crate) static LIVE_THREADS: AtomicUsize = AtomicUsize::new(0);
pub(crate) static LIVE_SOCKETS: AtomicUsize = AtomicUsize::new(0);

/// Set while a process-wide [`Instance::init`] instance is alive.
static SINGLETON: AtomicBool = AtomicBool::new(false);

/// Keeps a live-resource counter raised for as long as it exists.
pub(crate) struct Counted(&'static AtomicUsize);

impl Counted {
    pub(crate) fn new(c: &'static AtomicUsize) -> Counted {
        c.fetch_add(1, Ordering::SeqCst);
        Counted(c)
    }
}

impl Drop for Counted {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Runtime-owned OS resources currently alive in this process.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LiveResources {
    pub threads: usize,
    pub sockets: usize,
}

pub fn live_resources() -> LiveResources {
    LiveResources {
        threads: LIVE_THREADS.load(Ordering::SeqCst),
        sockets: LIVE_SOCKETS.load(Ordering::SeqCst),
    }
}

/// Counter snapshot for one VCI.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VciCounters {
    pub lock_acquisitions: u64,
    pub sender_requests: u64,
    pub payload_copies: u64,
}

/// State shared by every handle derived from one instance.
pub(crate) struct Shared {
    pub rank: usize,
    pub size: usize,
    pub cfg: Config,
    pub vcis: VciArray,
    pub nimpl: usize,
    pub global_lock: Mutex<()>,
    pub fabric: Fabric,
    pub pool: VciPool,
    pub next_ctx: AtomicU32,
    pub rma: RmaState,
    pub greqs: GlobalGreqs,
    pub progress: ProgressThreads,
    pub finalized: AtomicBool,
    pub active_threadcomms: AtomicUsize,
    pub tracing: bool,
    trace: Mutex<Vec<String>>,
    singleton: bool,
}

impl Shared {
    fn new(cfg: Config, vcis: VciArray, fabric: Fabric, singleton: bool) -> Shared {
        Shared {
            rank: cfg.rank,
            size: cfg.size,
            nimpl: cfg.implicit_vcis,
            pool: VciPool::new(cfg.implicit_vcis, cfg.vci_pool),
            vcis,
            global_lock: Mutex::new(()),
            fabric,
            next_ctx: AtomicU32::new(1),
            rma: RmaState::default(),
            greqs: GlobalGreqs::default(),
            progress: ProgressThreads::default(),
            finalized: AtomicBool::new(false),
            active_threadcomms: AtomicUsize::new(0),
            tracing: cfg.trace_frames || cfg.capture_frames,
            trace: Mutex::new(Vec::new()),
            singleton,
            cfg,
        }
    }

    pub(crate) fn record_trace(&self, line: String) {
        if self.cfg.trace_frames {
            eprintln!("[minimpi] {line}");
        }
        if self.cfg.capture_frames {
            self.trace.lock().unwrap().push(line);
        }
    }

    #[inline]
    pub(crate) fn check_live(&self) -> Result<()> {
        if self.finalized.load(Ordering::Acquire) {
            Err(Error::state("runtime instance has been finalized"))
        } else {
            Ok(())
        }
    }

    fn shutdown_fabric(&self) {
        if let Fabric::Socket(net) = &self.fabric {
            net.shutdown();
        }
    }
}

/// One participant's handle to the runtime.
pub struct Instance {
    pub(crate) shared: Arc<Shared>,
    world: Comm,
}

impl std::fmt::Debug for Instance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Instance(rank {} of {})", self.shared.rank, self.shared.size)
    }
}

impl Instance {
    fn from_shared(shared: Shared) -> Instance {
        let shared = Arc::new(shared);
        let world = Comm::world(shared.clone());
        Instance { shared, world }
    }

    /// Initializes this process's participant. Only one may be alive at a
    /// time; a second call fails with `State`.
    ///
    /// With the in-process transport the job must be a singleton; use
    /// [`Universe`] to run several participants inside one process.
    pub fn init(cfg: Config) -> Result<Instance> {
        cfg.validate()?;
        if cfg.transport == TransportKind::InProc && cfg.size != 1 {
            return Err(Error::arg(
                "the in-process transport runs multi-rank jobs through Universe::in_proc",
            ));
        }
        if SINGLETON.swap(true, Ordering::SeqCst) {
            return Err(Error::state("runtime already initialized in this process"));
        }
        let built = match cfg.transport {
            TransportKind::InProc => Ok(in_proc(vec![cfg], true).pop().expect("one instance")),
            TransportKind::Socket => socket_instance(cfg, None, true),
        };
        if built.is_err() {
            SINGLETON.store(false, Ordering::SeqCst);
        }
        built
    }

    /// [`Instance::init`] with configuration read from `MINIMPI_*` variables.
    pub fn init_from_env() -> Result<Instance> {
        Instance::init(Config::from_env()?)
    }

    pub fn rank(&self) -> usize {
        self.shared.rank
    }

    pub fn size(&self) -> usize {
        self.shared.size
    }

    pub fn config(&self) -> &Config {
        &self.shared.cfg
    }

    pub fn lock_mode(&self) -> LockMode {
        self.shared.cfg.lock_mode
    }

    pub fn transport_kind(&self) -> TransportKind {
        self.shared.cfg.transport
    }

    /// The communicator spanning every participant.
    pub fn world(&self) -> &Comm {
        &self.world
    }

    pub fn is_finalized(&self) -> bool {
        self.shared.finalized.load(Ordering::Acquire)
    }

    /// Counters for one VCI. Ids below `implicit_vcis` are the shared
    /// implicit VCIs; the rest belong to the explicit pool.
    pub fn vci_counters(&self, vci: usize) -> Option<VciCounters> {
        let v = self.shared.vcis.get(vci)?;
        Some(VciCounters {
            lock_acquisitions: v.stats.lock_acquisitions.load(Ordering::Relaxed),
            sender_requests: v.stats.sender_requests.load(Ordering::Relaxed),
            payload_copies: v.stats.payload_copies.load(Ordering::Relaxed),
        })
    }

    /// Sum of the counters over every VCI.
    pub fn total_counters(&self) -> VciCounters {
        let mut t = VciCounters::default();
        for v in 0..self.shared.vcis.len() {
            let c = self.vci_counters(v).expect("in range");
            t.lock_acquisitions += c.lock_acquisitions;
            t.sender_requests += c.sender_requests;
            t.payload_copies += c.payload_copies;
        }
        t
    }

    /// Drains the in-memory frame trace (enabled by `capture_frames`).
    pub fn take_frame_trace(&self) -> Vec<String> {
        std::mem::take(&mut *self.shared.trace.lock().unwrap())
    }

    /// Shuts the participant down. Collective over the world.
    ///
    /// Fails with `State` while progress threads run or a thread
    /// communicator is active, and with `Pending` while operations are
    /// outstanding. After success every call on handles derived from this
    /// instance fails with `State`.
    pub fn finalize(&self) -> Result<()> {
        let s = &self.shared;
        s.check_live()?;
        if s.progress.running() > 0 {
            return Err(Error::state("progress threads are still running"));
        }
        if s.active_threadcomms.load(Ordering::Acquire) > 0 {
            return Err(Error::state("a thread communicator is still active"));
        }
        s.check_quiescent()?;
        self.world.barrier()?;
        s.finalized.store(true, Ordering::Release);
        s.shutdown_fabric();
        if s.singleton {
            SINGLETON.store(false, Ordering::SeqCst);
        }
        Ok(())
    }
}

impl Drop for Instance {
    fn drop(&mut self) {
        let s = &self.shared;
        if s.finalized.swap(true, Ordering::AcqRel) {
            return;
        }
        s.progress.stop_all();
        if let Fabric::Socket(net) = &s.fabric {
            net.abort();
        }
        if s.singleton {
            SINGLETON.store(false, Ordering::SeqCst);
        }
    }
}

fn in_proc(cfgs: Vec<Config>, singleton: bool) -> Vec<Instance> {
    let net = Arc::new(InProcNet { peers: OnceLock::new() });
    let mut shared = Vec::with_capacity(cfgs.len());
    for cfg in cfgs {
        let vcis = transport::new_vcis(cfg.implicit_vcis, cfg.vci_pool);
        shared.push(Shared::new(cfg, vcis, Fabric::InProc(net.clone()), singleton));
    }
    let _ = net.peers.set(shared.iter().map(|s| s.vcis.clone()).collect());
    shared.into_iter().map(Instance::from_shared).collect()
}

fn socket_instance(cfg: Config, listener: Option<TcpListener>, singleton: bool) -> Result<Instance> {
    let vcis = transport::new_vcis(cfg.implicit_vcis, cfg.vci_pool);
    let net = socket::establish(&cfg, vcis.clone(), cfg.implicit_vcis, listener)?;
    Ok(Instance::from_shared(Shared::new(
        cfg,
        vcis,
        Fabric::Socket(net),
        singleton,
    )))
}

/// Builds whole jobs inside one process, one [`Instance`] per rank.
pub struct Universe;

impl Universe {
    /// `n` participants joined by in-memory queues.
    pub fn in_proc(n: usize, cfg: &Config) -> Result<Vec<Instance>> {
        let cfgs = rank_configs(n, cfg, TransportKind::InProc)?;
        Ok(in_proc(cfgs, false))
    }

    /// `n` participants joined by loopback TCP, bootstrapped concurrently.
    pub fn socket(n: usize, cfg: &Config) -> Result<Vec<Instance>> {
        let mut cfgs = rank_configs(n, cfg, TransportKind::Socket)?;
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?.to_string();
        for c in &mut cfgs {
            c.root_addr = Some(addr.clone());
        }
        let mut rest = cfgs.split_off(1);
        let root = cfgs.pop().expect("rank 0");
        std::thread::scope(|sc| {
            let handles: Vec<_> = rest
                .drain(..)
                .map(|c| sc.spawn(move || socket_instance(c, None, false)))
                .collect();
            let mut out = vec![socket_instance(root, Some(listener), false)];
            out.extend(handles.into_iter().map(|h| h.join().expect("bootstrap thread")));
            out.into_iter().collect()
        })
    }

    /// Runs `f` on every rank of an in-process job, one thread per rank,
    /// finalizing each instance afterwards.
    pub fn run<R, F>(n: usize, cfg: &Config, f: F) -> Result<Vec<R>>
    where
        R: Send,
        F: Fn(&Instance) -> R + Sync,
    {
        let insts = match cfg.transport {
            TransportKind::InProc => Universe::in_proc(n, cfg)?,
            TransportKind::Socket => Universe::socket(n, cfg)?,
        };
        std::thread::scope(|sc| {
            let f = &f;
            let hs: Vec<_> = insts
                .into_iter()
                .map(|inst| {
                    sc.spawn(move || {
                        let r = f(&inst);
                        inst.finalize().map(|_| r)
                    })
                })
                .collect();
            hs.into_iter().map(|h| h.join().expect("rank thread")).collect()
        })
    }
}

fn rank_configs(n: usize, cfg: &Config, kind: TransportKind) -> Result<Vec<Config>> {
    if n == 0 {
        return Err(Error::arg("a job needs at least one rank"));
    }
    (0..n)
        .map(|r| {
            let c = Config {
                rank: r,
                size: n,
                transport: kind,
                ..cfg.clone()
            };
            c.validate()?;
            Ok(c)
        })
        .collect()
}
