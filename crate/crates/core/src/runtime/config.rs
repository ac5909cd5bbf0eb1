//! Runtime configuration: defaults, then `MINIMPI_*` environment variables,
//! then explicit overrides.

use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LockMode {
    /// One runtime-wide critical section.
    Global,
    /// One critical section per VCI.
    PerVci,
}

impl FromStr for LockMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "global" => Ok(LockMode::Global),
            "pervci" | "per_vci" | "per-vci" => Ok(LockMode::PerVci),
            _ => Err(Error::arg(format!("unknown lock mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    InProc,
    Socket,
}

impl FromStr for TransportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "in-proc" | "inproc" | "in_proc" => Ok(TransportKind::InProc),
            "socket" => Ok(TransportKind::Socket),
            _ => Err(Error::arg(format!("unknown transport {s:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Config {
    pub rank: usize,
    pub size: usize,
    /// Rendezvous address of rank 0 for the socket transport.
    pub root_addr: Option<String>,
    pub transport: TransportKind,
    pub lock_mode: LockMode,
    /// Explicit VCIs available to streams and thread communicators.
    pub vci_pool: usize,
    /// VCIs shared by streamless traffic.
    pub implicit_vcis: usize,
    pub eager_limit: usize,
    pub chunk_size: usize,
    pub progress_yield_us: u64,
    pub connect_timeout_ms: u64,
    /// Print one line per frame to standard error.
    pub trace_frames: bool,
    /// Keep frame trace lines in memory (see `Instance::take_frame_trace`).
    pub capture_frames: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            rank: 0,
            size: 1,
            root_addr: None,
            transport: TransportKind::InProc,
            lock_mode: LockMode::PerVci,
            vci_pool: 64,
            implicit_vcis: 16,
            eager_limit: 64 * 1024,
            chunk_size: 16 * 1024,
            progress_yield_us: 50,
            connect_timeout_ms: 10_000,
            trace_frames: false,
            capture_frames: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::arg(format!("{key}: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" | "" => Ok(false),
        _ => Err(Error::arg(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

impl Config {
    /// Defaults overridden by the process environment.
    pub fn from_env() -> Result<Config> {
        let mut c = Config::default();
        c.apply_vars(std::env::vars())?;
        Ok(c)
    }

    /// Applies `MINIMPI_*` entries from an arbitrary key/value source.
    pub fn apply_vars<I, K, V>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (k, v) in vars {
            let (k, v) = (k.as_ref(), v.as_ref());
            match k {
                "MINIMPI_RANK" => self.rank = parse(k, v)?,
                "MINIMPI_SIZE" => self.size = parse(k, v)?,
                "MINIMPI_ROOT_ADDR" => self.root_addr = Some(v.to_string()),
                "MINIMPI_TRANSPORT" => self.transport = v.parse()?,
                "MINIMPI_LOCK_MODE" => self.lock_mode = v.parse()?,
                "MINIMPI_VCI_POOL" => self.vci_pool = parse(k, v)?,
                "MINIMPI_IMPLICIT_VCIS" => self.implicit_vcis = parse(k, v)?,
                "MINIMPI_EAGER_LIMIT" => self.eager_limit = parse(k, v)?,
                "MINIMPI_CHUNK_SIZE" => self.chunk_size = parse(k, v)?,
                "MINIMPI_PROGRESS_YIELD_US" => self.progress_yield_us = parse(k, v)?,
                "MINIMPI_CONNECT_TIMEOUT_MS" => self.connect_timeout_ms = parse(k, v)?,
                "MINIMPI_TRACE_FRAMES" => self.trace_frames = flag(k, v)?,
                _ => {}
            }
        }
        Ok(())
    }

    /// The settings a launcher passes to a child, as environment entries.
    pub fn to_vars(&self) -> Vec<(String, String)> {
        let mut v = vec![
            ("MINIMPI_RANK".into(), self.rank.to_string()),
            ("MINIMPI_SIZE".into(), self.size.to_string()),
            (
                "MINIMPI_TRANSPORT".into(),
                match self.transport {
                    TransportKind::InProc => "in-proc",
                    TransportKind::Socket => "socket",
                }
                .into(),
            ),
            (
                "MINIMPI_LOCK_MODE".into(),
                match self.lock_mode {
                    LockMode::Global => "global",
                    LockMode::PerVci => "pervci",
                }
                .into(),
            ),
            ("MINIMPI_VCI_POOL".into(), self.vci_pool.to_string()),
            ("MINIMPI_IMPLICIT_VCIS".into(), self.implicit_vcis.to_string()),
            ("MINIMPI_EAGER_LIMIT".into(), self.eager_limit.to_string()),
            ("MINIMPI_CHUNK_SIZE".into(), self.chunk_size.to_string()),
            ("MINIMPI_PROGRESS_YIELD_US".into(), self.progress_yield_us.to_string()),
            ("MINIMPI_CONNECT_TIMEOUT_MS".into(), self.connect_timeout_ms.to_string()),
        ];
        if let Some(a) = &self.root_addr {
            v.push(("MINIMPI_ROOT_ADDR".into(), a.clone()));
        }
        if self.trace_frames {
            v.push(("MINIMPI_TRACE_FRAMES".into(), "1".into()));
        }
        v
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.size == 0 || self.rank >= self.size {
            return Err(Error::arg(format!("rank {} of size {}", self.rank, self.size)));
        }
        if self.implicit_vcis == 0 || !self.implicit_vcis.is_power_of_two() {
            return Err(Error::arg("implicit VCI count must be a power of two"));
        }
        if self.chunk_size == 0 {
            return Err(Error::arg("chunk size must be positive"));
        }
        Ok(())
    }
}
