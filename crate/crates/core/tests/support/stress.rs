//! Randomized point-to-point traffic with a reference matcher.
//!
//! Rank 0 runs one sender thread per pair, rank 1 one receiver thread per
//! pair. Each pair has a script of sends (tag, length) and receive patterns.
//! The expected match for every receive comes from a single-queue reference
//! matcher that knows nothing about VCIs, locks or protocols: the earliest
//! unmatched send whose tag fits the pattern.

#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::collections::VecDeque;
use std::hash::Hasher;

use minimpi::{Comm, Config, Instance, LockMode, Request, Stream, TransportKind, Universe, ANY_SOURCE, ANY_TAG};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub const TAGS: i32 = 4;
/// Receive patterns pick a tag from this many oldest unmatched sends.
const LOOKAHEAD: usize = 8;
/// Maximum isends in flight per sender thread.
const WINDOW: usize = 64;
const MAX_LEN: usize = 100 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Global,
    PerVci,
    Stream,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Global, Regime::PerVci, Regime::Stream];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecvPat {
    pub tag: i32,
    pub any_source: bool,
}

#[derive(Debug, Clone)]
pub struct PairScript {
    pub sends: Vec<(i32, usize)>,
    pub recvs: Vec<RecvPat>,
}

#[derive(Debug, Clone)]
pub struct Script {
    pub pairs: Vec<PairScript>,
}

/// `total` messages split evenly over `pairs` thread pairs. Roughly one
/// message in `rndv_every` is above the eager limit.
pub fn script(seed: u64, pairs: usize, total: usize, rndv_every: usize) -> Script {
    let mut rng = StdRng::seed_from_u64(seed);
    let per = total / pairs;
    let pairs = (0..pairs)
        .map(|_| {
            let sends: Vec<(i32, usize)> = (0..per)
                .map(|_| {
                    let len = if rng.gen_range(0..rndv_every) == 0 {
                        rng.gen_range(64 * 1024 + 1..=MAX_LEN)
                    } else {
                        rng.gen_range(8..=256)
                    };
                    (rng.gen_range(0..TAGS), len)
                })
                .collect();
            // Pick patterns against a live model of the unmatched sends so
            // every receive has something to match.
            let mut open: Vec<usize> = (0..per).collect();
            let recvs = (0..per)
                .map(|_| {
                    let any_source = rng.gen_bool(0.2);
                    if rng.gen_bool(0.3) {
                        open.remove(0);
                        return RecvPat {
                            tag: ANY_TAG,
                            any_source,
                        };
                    }
                    let k = rng.gen_range(0..open.len().min(LOOKAHEAD));
                    let tag = sends[open[k]].0;
                    let first = open.iter().position(|&i| sends[i].0 == tag).unwrap();
                    open.remove(first);
                    RecvPat { tag, any_source }
                })
                .collect();
            PairScript { sends, recvs }
        })
        .collect();
    Script { pairs }
}

/// Reference matcher: for each receive in order, the index of the earliest
/// unmatched send it accepts.
pub fn reference_matches(p: &PairScript) -> Vec<usize> {
    let mut matched = vec![false; p.sends.len()];
    p.recvs
        .iter()
        .map(|r| {
            let i = (0..p.sends.len())
                .find(|&i| !matched[i] && (r.tag == ANY_TAG || r.tag == p.sends[i].0))
                .expect("script receive without a matching send");
            matched[i] = true;
            i
        })
        .collect()
}

pub fn payload(pair: usize, idx: usize, len: usize) -> Vec<u8> {
    let mut v = Vec::with_capacity(len);
    v.extend_from_slice(&(pair as u32).to_le_bytes());
    v.extend_from_slice(&(idx as u32).to_le_bytes());
    let mut x = (pair as u64) << 32 | idx as u64;
    while v.len() < len {
        x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        v.push((x >> 56) as u8);
    }
    v.truncate(len);
    v
}

pub fn checksum(b: &[u8]) -> u64 {
    let mut h = DefaultHasher::new();
    h.write(b);
    h.finish()
}

#[derive(Debug, Default)]
pub struct Outcome {
    /// Per pair, the send index each receive matched.
    pub matched: Vec<Vec<usize>>,
    /// Per pair, the reported tags (to compare regimes beyond indices).
    pub tags: Vec<Vec<i32>>,
    pub sent: Vec<u64>,
    pub received: Vec<u64>,
    /// Lock acquisitions on the receivers' stream VCIs (stream regime only).
    pub stream_lock_acquisitions: u64,
}

impl Outcome {
    /// Receives that did not match the reference matcher's choice.
    pub fn reorderings(&self, s: &Script) -> usize {
        s.pairs
            .iter()
            .zip(&self.matched)
            .map(|(p, got)| {
                let want = reference_matches(p);
                want.iter().zip(got).filter(|(a, b)| a != b).count() + want.len().abs_diff(got.len())
            })
            .sum()
    }

    /// Multiset equality of sent and received checksums.
    pub fn intact(&self) -> bool {
        let (mut a, mut b) = (self.sent.clone(), self.received.clone());
        a.sort_unstable();
        b.sort_unstable();
        a == b
    }
}

pub fn config(transport: TransportKind, regime: Regime) -> Config {
    Config {
        transport,
        lock_mode: if regime == Regime::Global {
            LockMode::Global
        } else {
            LockMode::PerVci
        },
        ..Config::default()
    }
}

enum Side {
    Sent(Vec<u64>),
    Got(Vec<usize>, Vec<i32>, Vec<u64>, u64),
}

pub fn run(s: &Script, transport: TransportKind, regime: Regime) -> Outcome {
    let cfg = config(transport, regime);
    let sides = Universe::run(2, &cfg, |inst| rank_main(inst, s, regime)).unwrap();
    let mut out = Outcome::default();
    for side in sides {
        match side {
            Side::Sent(v) => out.sent = v,
            Side::Got(m, t, r, locks) => {
                let per = s.pairs[0].recvs.len();
                out.matched = m.chunks(per).map(<[usize]>::to_vec).collect();
                out.tags = t.chunks(per).map(<[i32]>::to_vec).collect();
                out.received = r;
                out.stream_lock_acquisitions = locks;
            }
        }
    }
    out
}

fn rank_main(inst: &Instance, s: &Script, regime: Regime) -> Side {
    let n = s.pairs.len();
    let mut streams: Vec<Stream> = Vec::new();
    let comms: Vec<Comm> = (0..n)
        .map(|_| match regime {
            Regime::Stream => {
                let st = inst.stream_create(None).unwrap();
                let c = inst.world().stream_comm_create(&st).unwrap();
                streams.push(st);
                c
            }
            _ => inst.world().dup().unwrap(),
        })
        .collect();
    let me = inst.rank();
    let results: Vec<_> = std::thread::scope(|sc| {
        let hs: Vec<_> = comms
            .iter()
            .zip(&s.pairs)
            .enumerate()
            .map(|(pi, (c, p))| sc.spawn(move || if me == 0 { send_side(c, pi, p) } else { recv_side(c, p) }))
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let locks = streams
        .iter()
        .map(|st| inst.vci_counters(st.vci().unwrap()).unwrap().lock_acquisitions)
        .sum();
    inst.world().barrier().unwrap();
    comms.into_iter().for_each(|c| c.free().unwrap());
    streams.iter_mut().for_each(|st| st.free().unwrap());
    if me == 0 {
        Side::Sent(results.into_iter().flat_map(|r| r.2).collect())
    } else {
        let (mut m, mut t, mut r) = (Vec::new(), Vec::new(), Vec::new());
        for (a, b, c) in results {
            m.extend(a);
            t.extend(b);
            r.extend(c);
        }
        Side::Got(m, t, r, locks)
    }
}

type PairResult = (Vec<usize>, Vec<i32>, Vec<u64>);

fn send_side(c: &Comm, pair: usize, p: &PairScript) -> PairResult {
    let mut inflight: VecDeque<Request<'_>> = VecDeque::new();
    let mut sums = Vec::with_capacity(p.sends.len());
    for (i, &(tag, len)) in p.sends.iter().enumerate() {
        let data = payload(pair, i, len);
        sums.push(checksum(&data));
        inflight.push_back(c.isend(&data, 1, tag).unwrap());
        if inflight.len() >= WINDOW {
            inflight.pop_front().unwrap().wait().unwrap();
        }
    }
    for mut r in inflight {
        r.wait().unwrap();
    }
    (Vec::new(), Vec::new(), sums)
}

fn recv_side(c: &Comm, p: &PairScript) -> PairResult {
    let mut buf = vec![0u8; MAX_LEN];
    let (mut idx, mut tags, mut sums) = (Vec::new(), Vec::new(), Vec::new());
    for r in &p.recvs {
        let src = if r.any_source { ANY_SOURCE } else { 0 };
        let st = c.recv(&mut buf, src, r.tag).unwrap();
        let got = &buf[..st.bytes];
        idx.push(u32::from_le_bytes(got[4..8].try_into().unwrap()) as usize);
        tags.push(st.tag);
        sums.push(checksum(got));
    }
    (idx, tags, sums)
}
