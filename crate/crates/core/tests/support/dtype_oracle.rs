//! Reference model for datatype layouts.
//!
//! Mirrors every constructor as a plain tree, flattens it element by element
//! and merges byte-adjacent neighbours. Deliberately naive: no caching, no
//! shared arithmetic with the library.

#![allow(dead_code)]

use minimpi::datatype::{Datatype, Order, BYTE, DOUBLE, INT32};
use rand::rngs::StdRng;
use rand::Rng;

#[derive(Debug, Clone)]
pub enum T {
    Basic(u64),
    Contig(u64, Box<T>),
    Vector(u64, u64, i64, Box<T>),
    Hvector(u64, u64, i64, Box<T>),
    IndexedBlock(u64, Vec<i64>, Box<T>),
    Struct(Vec<u64>, Vec<i64>, Vec<T>),
    Subarray(Vec<u64>, Vec<u64>, Vec<u64>, Box<T>),
    Resized(i64, i64, Box<T>),
}

impl T {
    /// (lb, ub) following the usual typemap rules; `None` for an empty typemap.
    pub fn bounds_opt(&self) -> Option<(i64, i64)> {
        fn hull(parts: Vec<(i64, i64)>) -> Option<(i64, i64)> {
            parts.into_iter().reduce(|a, b| (a.0.min(b.0), a.1.max(b.1)))
        }
        match self {
            T::Basic(s) => Some((0, *s as i64)),
            T::Contig(n, c) => T::Hvector(*n, 1, c.extent(), c.clone()).bounds_opt(),
            T::Vector(n, bl, st, c) => T::Hvector(*n, *bl, st * c.extent(), c.clone()).bounds_opt(),
            T::Hvector(n, bl, st, c) => {
                let (lb, ub) = c.bounds_opt()?;
                let e = ub - lb;
                let mut parts = Vec::new();
                for i in 0..*n as i64 {
                    for j in 0..*bl as i64 {
                        parts.push((lb + i * st + j * e, ub + i * st + j * e));
                    }
                }
                hull(parts)
            }
            T::IndexedBlock(bl, d, c) => {
                let e = c.extent();
                let ds = d.iter().map(|x| x * e).collect();
                T::Struct(vec![*bl; d.len()], ds, vec![(**c).clone(); d.len()]).bounds_opt()
            }
            T::Struct(bls, ds, cs) => {
                let mut parts = Vec::new();
                for i in 0..cs.len() {
                    let Some((lb, ub)) = cs[i].bounds_opt() else { continue };
                    let e = ub - lb;
                    for j in 0..bls[i] as i64 {
                        parts.push((ds[i] + lb + j * e, ds[i] + ub + j * e));
                    }
                }
                hull(parts)
            }
            T::Subarray(full, _, _, c) => {
                let cells: u64 = full.iter().product();
                Some((0, cells as i64 * c.extent()))
            }
            T::Resized(lb, ext, _) => Some((*lb, lb + ext)),
        }
    }

    pub fn bounds(&self) -> (i64, i64) {
        self.bounds_opt().unwrap_or((0, 0))
    }

    pub fn extent(&self) -> i64 {
        let (lb, ub) = self.bounds();
        ub - lb
    }

    /// Every basic element as (offset, size) in traversal order.
    pub fn elements(&self, base: i64, out: &mut Vec<(i64, u64)>) {
        match self {
            T::Basic(s) => out.push((base, *s)),
            T::Contig(n, c) => {
                let e = c.extent();
                for i in 0..*n as i64 {
                    c.elements(base + i * e, out);
                }
            }
            T::Vector(n, bl, st, c) => {
                let e = c.extent();
                for i in 0..*n as i64 {
                    for j in 0..*bl as i64 {
                        c.elements(base + i * st * e + j * e, out);
                    }
                }
            }
            T::Hvector(n, bl, st, c) => {
                let e = c.extent();
                for i in 0..*n as i64 {
                    for j in 0..*bl as i64 {
                        c.elements(base + i * st + j * e, out);
                    }
                }
            }
            T::IndexedBlock(bl, d, c) => {
                let e = c.extent();
                for &x in d {
                    for j in 0..*bl as i64 {
                        c.elements(base + x * e + j * e, out);
                    }
                }
            }
            T::Struct(bls, ds, cs) => {
                for i in 0..cs.len() {
                    let e = cs[i].extent();
                    for j in 0..bls[i] as i64 {
                        cs[i].elements(base + ds[i] + j * e, out);
                    }
                }
            }
            T::Subarray(full, sub, offs, c) => {
                let e = c.extent();
                let nd = full.len();
                let mut idx = vec![0u64; nd];
                if sub.contains(&0) {
                    return;
                }
                loop {
                    let mut lin = 0i64;
                    for d in 0..nd {
                        lin = lin * full[d] as i64 + (offs[d] + idx[d]) as i64;
                    }
                    c.elements(base + lin * e, out);
                    let mut d = nd;
                    loop {
                        if d == 0 {
                            return;
                        }
                        d -= 1;
                        idx[d] += 1;
                        if idx[d] < sub[d] {
                            break;
                        }
                        idx[d] = 0;
                    }
                }
            }
            T::Resized(_, _, c) => c.elements(base, out),
        }
    }

    pub fn element_count(&self) -> u64 {
        match self {
            T::Basic(_) => 1,
            T::Contig(n, c) => n * c.element_count(),
            T::Vector(n, bl, _, c) | T::Hvector(n, bl, _, c) => n * bl * c.element_count(),
            T::IndexedBlock(bl, d, c) => bl * d.len() as u64 * c.element_count(),
            T::Struct(bls, _, cs) => bls.iter().zip(cs).map(|(b, c)| b * c.element_count()).sum(),
            T::Subarray(_, sub, _, c) => sub.iter().product::<u64>() * c.element_count(),
            T::Resized(_, _, c) => c.element_count(),
        }
    }

    pub fn build(&self) -> Datatype {
        let basic = |s: u64| match s {
            1 => BYTE.clone(),
            4 => INT32.clone(),
            8 => DOUBLE.clone(),
            _ => unreachable!(),
        };
        let ty = match self {
            T::Basic(s) => return basic(*s),
            T::Contig(n, c) => Datatype::contiguous(*n as i64, &c.build()),
            T::Vector(n, bl, st, c) => Datatype::vector(*n as i64, *bl as i64, *st, &c.build()),
            T::Hvector(n, bl, st, c) => Datatype::hvector(*n as i64, *bl as i64, *st, &c.build()),
            T::IndexedBlock(bl, d, c) => Datatype::indexed_block(*bl as i64, d, &c.build()),
            T::Struct(bls, ds, cs) => {
                let bl: Vec<i64> = bls.iter().map(|&b| b as i64).collect();
                let built: Vec<Datatype> = cs.iter().map(T::build).collect();
                Datatype::create_struct(&bl, ds, &built)
            }
            T::Subarray(f, s, o, c) => {
                let cv = |v: &Vec<u64>| v.iter().map(|&x| x as i64).collect::<Vec<_>>();
                Datatype::subarray(&cv(f), &cv(s), &cv(o), Order::C, &c.build())
            }
            T::Resized(lb, ext, c) => Datatype::resized(*lb, *ext, &c.build()),
        };
        ty.expect("valid oracle type").committed()
    }
}

/// Maximal byte-contiguous runs in traversal order.
pub fn flatten(t: &T, count: u64) -> Vec<(i64, u64)> {
    let mut elems = Vec::new();
    let e = t.extent();
    for i in 0..count as i64 {
        t.elements(i * e, &mut elems);
    }
    let mut out: Vec<(i64, u64)> = Vec::new();
    for (off, len) in elems {
        match out.last_mut() {
            Some(last) if last.0 + last.1 as i64 == off => last.1 += len,
            _ => out.push((off, len)),
        }
    }
    out
}

/// Oracle answer for `iov_len`.
pub fn iov_len(segs: &[(i64, u64)], max: i64) -> (u64, u64) {
    let total: u64 = segs.iter().map(|s| s.1).sum();
    if max == -1 || max as u64 >= total {
        return (segs.len() as u64, total);
    }
    let (mut n, mut bytes) = (0u64, 0u64);
    for s in segs {
        if bytes + s.1 > max as u64 {
            break;
        }
        bytes += s.1;
        n += 1;
    }
    (n, bytes)
}

/// Oracle pack: concatenates every element's bytes in traversal order.
pub fn pack(t: &T, count: u64, src: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    for (off, len) in flatten(t, count) {
        out.extend_from_slice(&src[off as usize..off as usize + len as usize]);
    }
    out
}

fn basic(rng: &mut StdRng) -> T {
    T::Basic([1, 4, 8][rng.gen_range(0..3)])
}

/// A random type of nesting depth at most `depth`.
pub fn random_type(rng: &mut StdRng, depth: u32) -> T {
    if depth == 0 || rng.gen_bool(0.15) {
        return basic(rng);
    }
    let child = Box::new(random_type(rng, depth - 1));
    match rng.gen_range(0..8) {
        0 => T::Contig(rng.gen_range(0..6), child),
        1 => {
            let bl = rng.gen_range(0..4);
            T::Vector(rng.gen_range(0..6), bl, rng.gen_range(-2..7), child)
        }
        2 => {
            let e = child.extent().max(1);
            let bl = rng.gen_range(0..4);
            let st = rng.gen_range(-3..8) * e + rng.gen_range(-1..2);
            T::Hvector(rng.gen_range(0..5), bl, st, child)
        }
        3 => {
            let n = rng.gen_range(0..5);
            let d = (0..n).map(|_| rng.gen_range(-2..10)).collect();
            T::IndexedBlock(rng.gen_range(0..4), d, child)
        }
        4 => {
            let n = rng.gen_range(1..4);
            let mut cs = vec![*child];
            while cs.len() < n {
                cs.push(random_type(rng, depth - 1));
            }
            let mut at = rng.gen_range(-8..8);
            let mut bls = Vec::new();
            let mut ds = Vec::new();
            for c in &cs {
                let bl = rng.gen_range(0..4);
                bls.push(bl);
                ds.push(at);
                // Mostly packed back to back so cross-block joins happen.
                at += bl as i64 * c.extent() + [0, 0, 0, 4, -4][rng.gen_range(0..5)];
            }
            T::Struct(bls, ds, cs)
        }
        5 => {
            let nd = rng.gen_range(1..4);
            let mut full = Vec::new();
            let mut sub = Vec::new();
            let mut offs = Vec::new();
            for _ in 0..nd {
                let f = rng.gen_range(1..7);
                let s = rng.gen_range(0..=f);
                full.push(f);
                sub.push(s);
                offs.push(rng.gen_range(0..=f - s));
            }
            T::Subarray(full, sub, offs, child)
        }
        6 => {
            let e = child.extent();
            T::Resized(rng.gen_range(-4..4), e + rng.gen_range(-2..9).max(-e), child)
        }
        _ => T::Contig(1, child),
    }
}
