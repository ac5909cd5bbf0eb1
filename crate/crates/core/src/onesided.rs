//! Passive-target one-sided reads.
//!
//! A window exposes a block of each process's memory. An origin opens a
//! shared-lock epoch on a target, issues gets, and collects the data at
//! unlock. The target only answers gets when it makes progress on its
//! implicit VCIs; without a progress thread, a target that is busy in
//! computation delays the origin's unlock.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};

use bytes::Bytes;
use crossbeam::utils::Backoff;
use rustc_hash::{FxHashMap, FxHashSet};

use crate::comm::{Comm, CommKind};
use crate::datatype::{Datatype, Layout};
use crate::error::{Error, Result};
use crate::runtime::Shared;
use crate::transport::frame::{body, Addr, Envelope, Frame, FrameKind};

struct WinMem {
    buf: RwLock<Vec<u8>>,
}

#[derive(Default)]
pub(crate) struct RmaState {
    windows: Mutex<FxHashMap<u32, Arc<WinMem>>>,
    gets: Mutex<FxHashMap<u64, Option<Result<Bytes>>>>,
    next_get: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LockType {
    Shared,
    Exclusive,
}

/// A window over a conventional communicator.
pub struct Window {
    comm: Comm,
    mem: Arc<WinMem>,
    disp_unit: usize,
    epochs: Mutex<FxHashSet<usize>>,
}

impl std::fmt::Debug for Window {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Window(ctx {}, {} bytes)", self.comm.context_id(), self.size())
    }
}

impl Comm {
    /// Exposes `mem` to the other processes. Collective.
    pub fn win_create(&self, mem: Vec<u8>, disp_unit: usize) -> Result<Window> {
        let c = self.live()?;
        if c.kind != CommKind::Conventional {
            return Err(Error::arg("windows need a conventional communicator"));
        }
        if disp_unit == 0 {
            return Err(Error::arg("displacement unit must be positive"));
        }
        let comm = self.dup()?;
        let win = Arc::new(WinMem { buf: RwLock::new(mem) });
        let s = &comm.inner.shared;
        s.rma.windows.lock().unwrap().insert(comm.inner.ctx, win.clone());
        // Nobody may issue a get before every target has registered.
        comm.barrier()?;
        Ok(Window {
            comm,
            mem: win,
            disp_unit,
            epochs: Mutex::new(FxHashSet::default()),
        })
    }
}

impl Window {
    pub fn size(&self) -> usize {
        self.mem.buf.read().unwrap().len()
    }

    pub fn disp_unit(&self) -> usize {
        self.disp_unit
    }

    /// Local window memory.
    pub fn local(&self) -> RwLockReadGuard<'_, Vec<u8>> {
        self.mem.buf.read().unwrap()
    }

    pub fn local_mut(&self) -> RwLockWriteGuard<'_, Vec<u8>> {
        self.mem.buf.write().unwrap()
    }

    /// Opens an access epoch on `target`. Only shared locks are provided.
    pub fn lock(&self, kind: LockType, target: usize) -> Result<Epoch<'_>> {
        let c = self.comm.live()?;
        if kind == LockType::Exclusive {
            return Err(Error::Unsupported("exclusive window locks".into()));
        }
        if target >= c.procs.len() {
            return Err(Error::arg(format!("target {target} outside window group")));
        }
        if !self.epochs.lock().unwrap().insert(target) {
            return Err(Error::state(format!("target {target} is already locked")));
        }
        Ok(Epoch {
            win: self,
            target,
            gets: Vec::new(),
        })
    }

    /// Releases the window. Collective; fails with `State` while an epoch
    /// is open.
    pub fn free(self) -> Result<()> {
        if !self.epochs.lock().unwrap().is_empty() {
            return Err(Error::state("window still has an open epoch"));
        }
        // Keep serving gets until every origin has finished with us.
        self.comm.barrier()?;
        let s = &self.comm.inner.shared;
        s.rma.windows.lock().unwrap().remove(&self.comm.inner.ctx);
        self.comm.free()
    }
}

impl Drop for Window {
    fn drop(&mut self) {
        let s = &self.comm.inner.shared;
        s.rma.windows.lock().unwrap().remove(&self.comm.inner.ctx);
    }
}

/// An open shared-lock epoch on one target.
pub struct Epoch<'w> {
    win: &'w Window,
    target: usize,
    /// (get id, origin offset)
    gets: Vec<(u64, usize)>,
}

impl Epoch<'_> {
    /// Reads `count` elements of `ty` at `target_disp` (in displacement
    /// units) into `origin[origin_off..]`. The data arrives at unlock.
    pub fn get(&mut self, origin_off: usize, target_disp: usize, count: usize, ty: &Datatype) -> Result<()> {
        let c = self.win.comm.live()?;
        if !ty.is_committed() {
            return Err(Error::arg("get datatype is not committed"));
        }
        let len = Layout::new(ty, count as u64)
            .contiguous_len()
            .ok_or_else(|| Error::Unsupported("noncontiguous target datatypes in get".into()))?;
        let s = &*c.shared;
        let id = s.rma.next_get.fetch_add(1, Ordering::Relaxed);
        s.rma.gets.lock().unwrap().insert(id, None);
        self.gets.push((id, origin_off));
        let vci = s.implicit_vci(c.ctx);
        let env = Envelope {
            ctx: c.ctx,
            src_rank: c.me as i32,
            dst_rank: self.target as i32,
            tag: 0,
            src_idx: -1,
            dst_idx: -1,
        };
        let dst = Addr {
            world: c.procs[self.target] as u32,
            vci: vci as u32,
        };
        let ret = Addr {
            world: s.rank as u32,
            vci: vci as u32,
        };
        let offset = (target_disp * self.win.disp_unit) as u64;
        let req = body::get_req(id, offset, len as u64, ret);
        s.send_frame(dst, FrameKind::GetReq, env, 0, &[&req])
    }

    /// Completes every get of the epoch and copies the data into `origin`.
    /// Out-of-bounds gets surface here as `Arg`.
    pub fn unlock(self, origin: &mut [u8]) -> Result<()> {
        let s = &*self.win.comm.inner.shared;
        let vci = s.implicit_vci(self.win.comm.inner.ctx);
        let backoff = Backoff::new();
        let ready = || {
            let g = s.rma.gets.lock().unwrap();
            self.gets.iter().all(|(id, _)| matches!(g.get(id), Some(Some(_))))
        };
        while !ready() {
            let did = s.poll_vci(vci) | s.progress_implicit();
            if did {
                backoff.reset();
            } else if backoff.is_completed() {
                std::thread::yield_now();
            } else {
                backoff.snooze();
            }
        }
        let mut first = None;
        let mut g = s.rma.gets.lock().unwrap();
        for (id, off) in &self.gets {
            let r = g.remove(id).flatten().expect("get completed");
            let r = r.and_then(|data| match origin.get_mut(*off..*off + data.len()) {
                Some(dst) => {
                    dst.copy_from_slice(&data);
                    Ok(())
                }
                None => Err(Error::arg("get result overruns the origin buffer")),
            });
            if let Err(e) = r {
                first.get_or_insert(e);
            }
        }
        first.map_or(Ok(()), Err)
    }
}

impl Drop for Epoch<'_> {
    fn drop(&mut self) {
        self.win.epochs.lock().unwrap().remove(&self.target);
    }
}

/// Target side: answers a get from window memory.
pub(crate) fn serve_get(s: &Shared, f: &Frame) -> Result<()> {
    let (id, offset, len, ret) = body::parse_get_req(&f.payload)?;
    let win = s.rma.windows.lock().unwrap().get(&f.env.ctx).cloned();
    let env = Envelope {
        ctx: f.env.ctx,
        src_rank: f.env.dst_rank,
        dst_rank: f.env.src_rank,
        tag: f.env.tag,
        src_idx: f.env.dst_idx,
        dst_idx: f.env.src_idx,
    };
    let reply = match win {
        Some(w) => {
            let mem = w.buf.read().unwrap();
            let end = offset.checked_add(len).filter(|&e| e <= mem.len() as u64);
            match end {
                Some(end) => body::get_resp(id, true, &mem[offset as usize..end as usize]),
                None => body::get_resp(id, false, b""),
            }
        }
        None => body::get_resp(id, false, b""),
    };
    s.send_frame(ret, FrameKind::GetResp, env, 0, &[&reply])
}

/// Origin side: records a get's reply.
pub(crate) fn complete_get(s: &Shared, f: &Frame) -> Result<()> {
    let (id, ok, data) = body::parse_get_resp(&f.payload)?;
    let r = if ok {
        Ok(data)
    } else {
        Err(Error::arg("get outside the target window"))
    };
    s.rma.gets.lock().unwrap().insert(id, Some(r));
    Ok(())
}
