//! Frame delivery, VCI entry, matching, and the eager/rendezvous protocol.
//!
//! Messages up to the eager limit travel in one `EAGER` frame and complete
//! the sender immediately. Larger ones handshake with `RTS`/`CTS` and then
//! move in `CHUNK` frames with a single chunk in flight: every chunk except
//! the last is acknowledged by a `CTRL` frame, so the transfer only advances
//! while the receiver is driving progress.

pub(crate) mod frame;
pub(crate) mod socket;
pub(crate) mod vci;

use std::sync::atomic::Ordering;
use std::sync::{Arc, OnceLock};

use crossbeam::utils::CachePadded;

use crate::error::{Error, Result};
use crate::request::ReqInner;
use crate::runtime::{LockMode, Shared};
use frame::{body, Addr, Envelope, Frame, FrameKind};
use vci::{
    Incoming, LocalData, LocalMsg, Pattern, Posted, RecvXfer, SendData, SendXfer, Unexpected, UnexpectedBody, Vci,
    VciGuard,
};

pub(crate) type VciArray = Arc<[CachePadded<Vci>]>;

/// Reports a protocol invariant violation and aborts.
pub(crate) fn fatal(msg: &str) -> ! {
    eprintln!("minimpi: fatal: {msg}");
    std::process::abort()
}

pub(crate) fn new_vcis(implicit: usize, explicit: usize) -> VciArray {
    (0..implicit + explicit)
        .map(|i| CachePadded::new(Vci::new(i, i >= implicit)))
        .collect::<Vec<_>>()
        .into()
}

/// In-process backend: every participant's VCIs, indexed by world rank.
pub(crate) struct InProcNet {
    pub peers: OnceLock<Vec<VciArray>>,
}

pub(crate) enum Fabric {
    InProc(Arc<InProcNet>),
    Socket(socket::SocketNet),
}

impl Shared {
    pub(crate) fn addr(&self, vci: usize) -> Addr {
        Addr {
            world: self.rank as u32,
            vci: vci as u32,
        }
    }

    /// Implicit VCI for streamless traffic on a context.
    #[inline]
    pub(crate) fn implicit_vci(&self, ctx: u32) -> usize {
        (ctx & !crate::comm::COLL_CTX_BIT) as usize % self.nimpl
    }

    pub(crate) fn is_implicit(&self, vci: usize) -> bool {
        vci < self.nimpl
    }

    /// Takes whatever exclusion the VCI needs under the active regime.
    pub(crate) fn enter(&self, v: usize) -> VciGuard<'_> {
        let vci = &self.vcis[v];
        if vci.lock_free.load(Ordering::Relaxed) {
            return VciGuard::new(vci, None);
        }
        vci.stats.lock_acquisitions.fetch_add(1, Ordering::Relaxed);
        let g = match self.cfg.lock_mode {
            LockMode::Global => self.global_lock.lock(),
            LockMode::PerVci => vci.lock.lock(),
        };
        VciGuard::new(vci, Some(g.unwrap_or_else(|e| e.into_inner())))
    }

    /// Sends one frame. The payload is the concatenation of `parts`.
    pub(crate) fn send_frame(
        &self,
        dst: Addr,
        kind: FrameKind,
        env: Envelope,
        seq: u64,
        parts: &[&[u8]],
    ) -> Result<()> {
        if self.tracing {
            let len: usize = parts.iter().map(|p| p.len()).sum();
            let what = frame::describe(kind, &env, seq, len);
            self.record_trace(format!("{} -> {}: {what}", self.rank, dst.world));
        }
        match &self.fabric {
            Fabric::InProc(net) => {
                let payload = match parts {
                    [] => bytes::Bytes::new(),
                    [one] => bytes::Bytes::copy_from_slice(one),
                    _ => bytes::Bytes::from(parts.concat()),
                };
                let peers = net.peers.get().expect("fabric wired");
                let vcis = &peers[dst.world as usize];
                vcis[dst.vci as usize]
                    .inbox
                    .push(Incoming::Frame(Frame::new(kind, env, seq, payload)));
                Ok(())
            }
            Fabric::Socket(net) => {
                if dst.world as usize == self.rank {
                    let payload = bytes::Bytes::from(parts.concat());
                    self.vcis[dst.vci as usize]
                        .inbox
                        .push(Incoming::Frame(Frame::new(kind, env, seq, payload)));
                    Ok(())
                } else {
                    net.send(
                        dst.world as usize,
                        &Frame::new(kind, env, seq, bytes::Bytes::new()),
                        parts,
                    )
                }
            }
        }
    }

    /// Runs one progress pass on a VCI. Returns whether anything happened.
    pub(crate) fn poll_vci(&self, v: usize) -> bool {
        if self.vcis[v].idle() {
            return false;
        }
        let mut g = self.enter(v);
        let mut did = self.drain(&mut g);
        if !g.state().greqs.is_empty() {
            did |= crate::request::poll_scoped_greqs(&mut g);
        }
        did
    }

    /// Processes everything currently in the inbox.
    pub(crate) fn drain(&self, g: &mut VciGuard<'_>) -> bool {
        let mut did = false;
        while let Some(inc) = g.vci.inbox.pop() {
            did = true;
            match inc {
                Incoming::Frame(f) => self.handle_frame(g, f),
                Incoming::Local(m) => self.handle_local(g, m),
            }
        }
        did
    }

    fn check_seq(g: &mut VciGuard<'_>, f: &Frame) {
        let e = &f.env;
        let key = (e.ctx, e.src_rank, e.dst_rank, e.src_idx, e.dst_idx);
        let id = g.vci.id;
        let expect = g.state().rx_seq.entry(key).or_insert(0);
        if f.seq != *expect {
            fatal(&format!(
                "out-of-order frame on VCI {}: expected seq {} got {:?}",
                id, expect, f
            ));
        }
        *expect += 1;
    }

    fn take_posted(g: &mut VciGuard<'_>, env: &Envelope) -> Option<Arc<ReqInner>> {
        let posted = &mut g.state().posted;
        let i = posted.iter().position(|p| p.pat.matches(env))?;
        posted.remove(i).map(|p| p.req)
    }

    fn handle_frame(&self, g: &mut VciGuard<'_>, f: Frame) {
        let (kind, env) = (f.kind, f.env);
        let parsed = match f.kind {
            FrameKind::Eager => {
                Self::check_seq(g, &f);
                match Self::take_posted(g, &f.env) {
                    Some(req) => self.deliver_eager(g, &req, &f.env, &f.payload),
                    None => g.state().unexpected.push_back(Unexpected {
                        env: f.env,
                        body: UnexpectedBody::Eager(f.payload),
                    }),
                }
                Ok(())
            }
            FrameKind::Rts => {
                Self::check_seq(g, &f);
                body::parse_rts(&f.payload).map(|(send_id, total, ret)| match Self::take_posted(g, &f.env) {
                    Some(req) => self.accept_rts(g, req, f.env, send_id, total, ret),
                    None => g.state().unexpected.push_back(Unexpected {
                        env: f.env,
                        body: UnexpectedBody::Rts { send_id, total, ret },
                    }),
                })
            }
            FrameKind::Cts => body::parse_cts(&f.payload).map(|(send_id, recv_id, ret)| {
                match g.state().sends.get_mut(&send_id) {
                    Some(x) => x.peer = Some((ret, recv_id)),
                    None => fatal(&format!("CTS for unknown transfer {send_id}")),
                }
                self.send_next_chunk(g, send_id);
            }),
            FrameKind::Chunk => {
                body::parse_chunk(&f.payload).map(|(recv_id, off, data)| self.on_chunk(g, recv_id, off, &data))
            }
            FrameKind::Ctrl => body::parse_ack(&f.payload).map(|send_id| self.send_next_chunk(g, send_id)),
            FrameKind::GetReq => crate::onesided::serve_get(self, &f),
            FrameKind::GetResp => crate::onesided::complete_get(self, &f),
        };
        if let Err(e) = parsed {
            fatal(&format!("malformed {} frame {env:?}: {e}", kind.name()));
        }
    }

    fn deliver_eager(&self, g: &mut VciGuard<'_>, req: &ReqInner, env: &Envelope, data: &[u8]) {
        // SAFETY: a matched request is owned by the VCI holder until completion.
        let (st, t) = unsafe { (req.status_mut(), req.target_mut()) };
        t.begin(st, env, data.len());
        t.write(0, data);
        t.finish();
        g.vci.stats.payload_copies.fetch_add(1, Ordering::Relaxed);
        req.complete();
    }

    fn accept_rts(&self, g: &mut VciGuard<'_>, req: Arc<ReqInner>, env: Envelope, send_id: u64, total: u64, ret: Addr) {
        {
            // SAFETY: as in deliver_eager.
            let (st, t) = unsafe { (req.status_mut(), req.target_mut()) };
            t.begin(st, &env, total as usize);
        }
        let st = g.state();
        st.next_id += 1;
        let recv_id = st.next_id;
        st.recvs.insert(
            recv_id,
            RecvXfer {
                req,
                env,
                total: total as usize,
                received: 0,
                peer: ret,
                send_id,
            },
        );
        let me = self.addr(g.vci.id);
        let payload = body::cts(send_id, recv_id, me);
        self.send_ctrl(ret, FrameKind::Cts, reverse(&env), &payload);
    }

    fn send_ctrl(&self, dst: Addr, kind: FrameKind, env: Envelope, payload: &[u8]) {
        if let Err(e) = self.send_frame(dst, kind, env, 0, &[payload]) {
            fatal(&format!("cannot send {} frame: {e}", kind.name()));
        }
    }

    fn send_next_chunk(&self, g: &mut VciGuard<'_>, send_id: u64) {
        let chunk_size = self.cfg.chunk_size;
        let st = g.state();
        let Some(x) = st.sends.get_mut(&send_id) else {
            fatal(&format!("acknowledgement for unknown transfer {send_id}"));
        };
        let (peer, recv_id) = x.peer.expect("chunk before CTS");
        let data = x.data.as_slice();
        let (off, total) = (x.offset, data.len());
        let end = (off + chunk_size).min(total);
        let head = body::chunk(recv_id, off as u64, &[]);
        if let Err(e) = self.send_frame(peer, FrameKind::Chunk, x.env, 0, &[&head, &data[off..end]]) {
            fatal(&format!("cannot send CHUNK: {e}"));
        }
        x.offset = end;
        if end == total {
            let x = st.sends.remove(&send_id).expect("present");
            x.req.complete();
        }
    }

    fn on_chunk(&self, g: &mut VciGuard<'_>, recv_id: u64, off: u64, data: &[u8]) {
        let st = g.state();
        let Some(x) = st.recvs.get_mut(&recv_id) else {
            fatal(&format!("CHUNK for unknown transfer {recv_id}"));
        };
        // SAFETY: the transfer owns the request until completion.
        unsafe { x.req.target_mut() }.write(off as usize, data);
        x.received += data.len();
        if x.received >= x.total {
            let x = st.recvs.remove(&recv_id).expect("present");
            g.vci.stats.payload_copies.fetch_add(1, Ordering::Relaxed);
            // SAFETY: as above.
            unsafe { x.req.target_mut() }.finish();
            x.req.complete();
        } else {
            let (peer, send_id, env) = (x.peer, x.send_id, reverse(&x.env));
            self.send_ctrl(peer, FrameKind::Ctrl, env, &body::ack(send_id));
        }
    }

    fn handle_local(&self, g: &mut VciGuard<'_>, m: LocalMsg) {
        match Self::take_posted(g, &m.env) {
            Some(req) => Self::deliver_local(g, &req, &m.env, m.data),
            None => g.state().unexpected.push_back(Unexpected {
                env: m.env,
                body: UnexpectedBody::Local(m.data),
            }),
        }
    }

    fn deliver_local(g: &mut VciGuard<'_>, req: &ReqInner, env: &Envelope, data: LocalData) {
        // SAFETY: as in deliver_eager.
        let (st, t) = unsafe { (req.status_mut(), req.target_mut()) };
        match data {
            LocalData::Cell(v) => {
                t.begin(st, env, v.len());
                t.write(0, &v);
            }
            LocalData::Region { ptr, len, keep, done } => {
                t.begin(st, env, len);
                // SAFETY: the sender keeps the region alive until `done`.
                t.write(0, unsafe { std::slice::from_raw_parts(ptr, len) });
                drop(keep);
                if let Some(done) = done {
                    done.complete();
                }
            }
        }
        t.finish();
        g.vci.stats.payload_copies.fetch_add(1, Ordering::Relaxed);
        req.complete();
    }

    /// Posts a receive: first-match against unexpected messages in arrival
    /// order, otherwise queued behind earlier posted receives.
    pub(crate) fn post_recv(&self, g: &mut VciGuard<'_>, pat: Pattern, req: Arc<ReqInner>) {
        self.drain(g);
        let st = g.state();
        match st.unexpected.iter().position(|u| pat.matches(&u.env)) {
            Some(i) => {
                let u = st.unexpected.remove(i).expect("present");
                match u.body {
                    UnexpectedBody::Eager(data) => self.deliver_eager(g, &req, &u.env, &data),
                    UnexpectedBody::Rts { send_id, total, ret } => self.accept_rts(g, req, u.env, send_id, total, ret),
                    UnexpectedBody::Local(data) => Self::deliver_local(g, &req, &u.env, data),
                }
            }
            None => st.posted.push_back(Posted { pat, req }),
        }
    }

    /// Removes a still-unmatched posted receive. False if it already matched.
    pub(crate) fn cancel_recv(&self, g: &mut VciGuard<'_>, req: &Arc<ReqInner>) -> bool {
        let posted = &mut g.state().posted;
        match posted.iter().position(|p| Arc::ptr_eq(&p.req, req)) {
            Some(i) => {
                posted.remove(i);
                true
            }
            None => false,
        }
    }

    /// Starts a send from the VCI held by `g`. Returns the request when the
    /// transfer is still in flight (rendezvous).
    pub(crate) fn start_send(
        &self,
        g: &mut VciGuard<'_>,
        dst: Addr,
        env: Envelope,
        data: SendData,
    ) -> Result<Option<Arc<ReqInner>>> {
        let key = (env.ctx, env.src_rank, env.dst_rank, env.src_idx, env.dst_idx);
        let st = g.state();
        let seq_slot = st.tx_seq.entry(key).or_insert(0);
        let seq = *seq_slot;
        *seq_slot += 1;
        let len = data.as_slice().len();
        if len <= self.cfg.eager_limit {
            self.send_frame(dst, FrameKind::Eager, env, seq, &[data.as_slice()])?;
            return Ok(None);
        }
        st.next_id += 1;
        let send_id = st.next_id;
        let req = ReqInner::new_send();
        g.vci.stats.sender_requests.fetch_add(1, Ordering::Relaxed);
        let me = self.addr(g.vci.id);
        g.state().sends.insert(
            send_id,
            SendXfer {
                data,
                req: req.clone(),
                env,
                peer: None,
                offset: 0,
            },
        );
        self.send_frame(dst, FrameKind::Rts, env, seq, &[&body::rts(send_id, len as u64, me)])?;
        Ok(Some(req))
    }

    /// Polls every implicit VCI plus globally scoped generalized requests.
    pub(crate) fn progress_implicit(&self) -> bool {
        let mut did = false;
        for v in 0..self.nimpl {
            did |= self.poll_vci(v);
        }
        did | crate::request::poll_global_greqs(self)
    }

    /// Fails with `Pending` when any VCI still holds unfinished work.
    pub(crate) fn check_quiescent(&self) -> Result<()> {
        for v in 0..self.vcis.len() {
            let mut g = self.enter(v);
            self.drain(&mut g);
            if g.state().has_pending() {
                return Err(Error::pending(format!("VCI {v} has incomplete operations outstanding")));
            }
        }
        Ok(())
    }
}

/// Envelope for a reply travelling back along a channel.
fn reverse(e: &Envelope) -> Envelope {
    Envelope {
        ctx: e.ctx,
        src_rank: e.dst_rank,
        dst_rank: e.src_rank,
        tag: e.tag,
        src_idx: e.dst_idx,
        dst_idx: e.src_idx,
    }
}
