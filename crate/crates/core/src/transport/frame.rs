//! Wire frames: a fixed 46-byte little-endian header followed by a payload.
//!
//! ```text
//! 0   magic "MMPI"        4
//! 4   version (1)         1
//! 5   kind                1
//! 6   context id          u32
//! 10  src rank            i32
//! 14  dst rank            i32
//! 18  tag                 i32
//! 22  src stream index    i32
//! 26  dst stream index    i32
//! 30  sequence number     u64
//! 38  payload length      u64
//! ```

use std::fmt;

use bytes::{Buf, BufMut, Bytes, BytesMut};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MMPI";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 46;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameKind {
    Eager = 0,
    Rts = 1,
    Cts = 2,
    Chunk = 3,
    GetReq = 4,
    GetResp = 5,
    Ctrl = 6,
}

impl FrameKind {
    fn from_u8(v: u8) -> Option<FrameKind> {
        Some(match v {
            0 => FrameKind::Eager,
            1 => FrameKind::Rts,
            2 => FrameKind::Cts,
            3 => FrameKind::Chunk,
            4 => FrameKind::GetReq,
            5 => FrameKind::GetResp,
            6 => FrameKind::Ctrl,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            FrameKind::Eager => "EAGER",
            FrameKind::Rts => "RTS",
            FrameKind::Cts => "CTS",
            FrameKind::Chunk => "CHUNK",
            FrameKind::GetReq => "GET_REQ",
            FrameKind::GetResp => "GET_RESP",
            FrameKind::Ctrl => "CTRL",
        }
    }
}

/// Match envelope shared by frames and thread-local messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Envelope {
    pub ctx: u32,
    pub src_rank: i32,
    pub dst_rank: i32,
    pub tag: i32,
    pub src_idx: i32,
    pub dst_idx: i32,
}

#[derive(Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub env: Envelope,
    pub seq: u64,
    pub payload: Bytes,
}

impl Frame {
    pub fn new(kind: FrameKind, env: Envelope, seq: u64, payload: Bytes) -> Frame {
        Frame {
            kind,
            env,
            seq,
            payload,
        }
    }

    #[cfg(test)]
    pub fn encode_header(&self) -> [u8; HEADER_LEN] {
        self.encode_header_with_len(self.payload.len())
    }

    /// Header for a payload of `len` bytes sent separately from this frame.
    pub fn encode_header_with_len(&self, len: usize) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        let mut w = &mut h[..];
        w.put_slice(&MAGIC);
        w.put_u8(VERSION);
        w.put_u8(self.kind as u8);
        w.put_u32_le(self.env.ctx);
        w.put_i32_le(self.env.src_rank);
        w.put_i32_le(self.env.dst_rank);
        w.put_i32_le(self.env.tag);
        w.put_i32_le(self.env.src_idx);
        w.put_i32_le(self.env.dst_idx);
        w.put_u64_le(self.seq);
        w.put_u64_le(len as u64);
        h
    }

    /// Header and payload as one contiguous buffer.
    #[cfg(test)]
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.encode_header());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses a header, returning the frame (with empty payload) and the
    /// payload length that follows it.
    pub fn decode_header(h: &[u8; HEADER_LEN]) -> Result<(Frame, u64)> {
        let mut r = &h[..];
        if r[..4] != MAGIC {
            return Err(Error::transport("bad frame magic"));
        }
        r.advance(4);
        let version = r.get_u8();
        if version != VERSION {
            return Err(Error::transport(format!("unsupported frame version {version}")));
        }
        let kind_byte = r.get_u8();
        let kind =
            FrameKind::from_u8(kind_byte).ok_or_else(|| Error::transport(format!("unknown frame kind {kind_byte}")))?;
        let env = Envelope {
            ctx: r.get_u32_le(),
            src_rank: r.get_i32_le(),
            dst_rank: r.get_i32_le(),
            tag: r.get_i32_le(),
            src_idx: r.get_i32_le(),
            dst_idx: r.get_i32_le(),
        };
        let seq = r.get_u64_le();
        let len = r.get_u64_le();
        Ok((Frame::new(kind, env, seq, Bytes::new()), len))
    }

    #[cfg(test)]
    pub fn decode(buf: &[u8]) -> Result<Frame> {
        if buf.len() < HEADER_LEN {
            return Err(Error::transport("short frame"));
        }
        let (mut f, len) = Frame::decode_header(buf[..HEADER_LEN].try_into().unwrap())?;
        if (buf.len() - HEADER_LEN) as u64 != len {
            return Err(Error::transport("frame payload length mismatch"));
        }
        f.payload = Bytes::copy_from_slice(&buf[HEADER_LEN..]);
        Ok(f)
    }
}

/// One-line description used by frame traces.
pub fn describe(kind: FrameKind, e: &Envelope, seq: u64, len: usize) -> String {
    format!(
        "{} ctx={} src={} dst={} tag={} sidx={} didx={} seq={} len={}",
        kind.name(),
        e.ctx,
        e.src_rank,
        e.dst_rank,
        e.tag,
        e.src_idx,
        e.dst_idx,
        seq,
        len
    )
}

impl fmt::Debug for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&describe(self.kind, &self.env, self.seq, self.payload.len()))
    }
}

/// Return address of a VCI: world rank plus VCI id on that rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Addr {
    pub world: u32,
    pub vci: u32,
}

/// Protocol payloads that ride in frame bodies.
pub mod body {
    use super::*;

    fn put_addr(b: &mut BytesMut, a: Addr) {
        b.put_u32_le(a.world);
        b.put_u32_le(a.vci);
    }

    fn get_addr(r: &mut &[u8]) -> Addr {
        Addr {
            world: r.get_u32_le(),
            vci: r.get_u32_le(),
        }
    }

    fn need(p: &[u8], n: usize, what: &str) -> Result<()> {
        if p.len() < n {
            Err(Error::transport(format!("short {what} payload")))
        } else {
            Ok(())
        }
    }

    /// RTS: sender-side transfer id, total packed bytes, sender address.
    pub fn rts(send_id: u64, total: u64, ret: Addr) -> Bytes {
        let mut b = BytesMut::with_capacity(24);
        b.put_u64_le(send_id);
        b.put_u64_le(total);
        put_addr(&mut b, ret);
        b.freeze()
    }

    pub fn parse_rts(p: &[u8]) -> Result<(u64, u64, Addr)> {
        need(p, 24, "RTS")?;
        let mut r = p;
        Ok((r.get_u64_le(), r.get_u64_le(), get_addr(&mut r)))
    }

    /// CTS: both transfer ids and the receiver address.
    pub fn cts(send_id: u64, recv_id: u64, ret: Addr) -> Bytes {
        let mut b = BytesMut::with_capacity(24);
        b.put_u64_le(send_id);
        b.put_u64_le(recv_id);
        put_addr(&mut b, ret);
        b.freeze()
    }

    pub fn parse_cts(p: &[u8]) -> Result<(u64, u64, Addr)> {
        need(p, 24, "CTS")?;
        let mut r = p;
        Ok((r.get_u64_le(), r.get_u64_le(), get_addr(&mut r)))
    }

    /// CHUNK: receiver transfer id, byte offset, then the data.
    pub fn chunk(recv_id: u64, offset: u64, data: &[u8]) -> Bytes {
        let mut b = BytesMut::with_capacity(16 + data.len());
        b.put_u64_le(recv_id);
        b.put_u64_le(offset);
        b.put_slice(data);
        b.freeze()
    }

    pub fn parse_chunk(p: &Bytes) -> Result<(u64, u64, Bytes)> {
        need(p, 16, "CHUNK")?;
        let mut r = &p[..];
        Ok((r.get_u64_le(), r.get_u64_le(), p.slice(16..)))
    }

    /// CTRL: per-chunk acknowledgement naming the sender transfer.
    pub fn ack(send_id: u64) -> Bytes {
        Bytes::copy_from_slice(&send_id.to_le_bytes())
    }

    pub fn parse_ack(p: &[u8]) -> Result<u64> {
        need(p, 8, "CTRL")?;
        let mut r = p;
        Ok(r.get_u64_le())
    }

    /// GET_REQ: origin get id, target byte offset, length, origin address.
    pub fn get_req(id: u64, offset: u64, len: u64, ret: Addr) -> Bytes {
        let mut b = BytesMut::with_capacity(32);
        b.put_u64_le(id);
        b.put_u64_le(offset);
        b.put_u64_le(len);
        put_addr(&mut b, ret);
        b.freeze()
    }

    pub fn parse_get_req(p: &[u8]) -> Result<(u64, u64, u64, Addr)> {
        need(p, 32, "GET_REQ")?;
        let mut r = p;
        Ok((r.get_u64_le(), r.get_u64_le(), r.get_u64_le(), get_addr(&mut r)))
    }

    /// GET_RESP: get id, status byte (0 = ok), then data.
    pub fn get_resp(id: u64, ok: bool, data: &[u8]) -> Bytes {
        let mut b = BytesMut::with_capacity(9 + data.len());
        b.put_u64_le(id);
        b.put_u8(u8::from(!ok));
        b.put_slice(data);
        b.freeze()
    }

    pub fn parse_get_resp(p: &Bytes) -> Result<(u64, bool, Bytes)> {
        need(p, 9, "GET_RESP")?;
        let mut r = &p[..];
        Ok((r.get_u64_le(), r.get_u8() == 0, p.slice(9..)))
    }
}
