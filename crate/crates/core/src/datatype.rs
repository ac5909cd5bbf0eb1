//! Derived datatypes with constant-size descriptors and random-access iovec
//! queries.
//!
//! A [`Datatype`] is an immutable tree whose node count depends only on how
//! constructors were nested, never on how many contiguous runs the layout
//! contains. Every node caches its size, bounds, number of *segments* (maximal
//! byte-contiguous runs in traversal order) and the offsets of its first and
//! last segment. Those caches are enough to locate segment `j` by descending
//! the tree once, so [`Datatype::iov`] can seek anywhere without flattening
//! and [`Datatype::iov_len`] can bisect on packed byte positions.
//!
//! Coalescing is strictly traversal-local: two runs merge only when one ends
//! exactly where the next one (in traversal order) begins. Runs that touch in
//! memory but are not traversal neighbours stay separate.

mod parse;

pub use parse::parse_type_expr;

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, LazyLock};

use crate::error::{Error, Result};

/// Element kinds for predefined datatypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BasicKind {
    Byte,
    Char,
    Int32,
    Int64,
    Float,
    Double,
}

impl BasicKind {
    pub fn size(self) -> u64 {
        match self {
            BasicKind::Byte | BasicKind::Char => 1,
            BasicKind::Int32 | BasicKind::Float => 4,
            BasicKind::Int64 | BasicKind::Double => 8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            BasicKind::Byte => "byte",
            BasicKind::Char => "char",
            BasicKind::Int32 => "int32",
            BasicKind::Int64 => "int64",
            BasicKind::Float => "float",
            BasicKind::Double => "double",
        }
    }
}

/// Array storage order for [`Datatype::subarray`]. Only row-major is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Order {
    C,
}

/// One contiguous run of a datatype layout, compatible in shape with
/// `struct iovec`: a byte offset from the datatype origin and a length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IovSegment {
    pub offset: i64,
    pub len: u64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Stats {
    size: u64,
    lb: i64,
    ub: i64,
    segs: u64,
    first_off: i64,
    last_end: i64,
    /// Contributes to bounds (false for types with an empty typemap).
    bounded: bool,
}

/// A uniform repetition of a unit placed `stride` bytes apart.
#[derive(Debug, Clone, Copy)]
struct Level {
    stride: i64,
    unit_segs: u64,
    unit_size: u64,
    merged: bool,
}

impl Level {
    fn new(n: u64, stride: i64, unit: &Stats) -> (Level, Stats) {
        let merged = n >= 2 && unit.segs > 0 && unit.last_end - unit.first_off == stride;
        let level = Level {
            stride,
            unit_segs: unit.segs,
            unit_size: unit.size,
            merged,
        };
        let mut stats = Stats::default();
        if n == 0 || !unit.bounded {
            return (level, stats);
        }
        stats.bounded = true;
        let span = (n as i64 - 1) * stride;
        stats.lb = unit.lb.min(unit.lb + span);
        stats.ub = unit.ub.max(unit.ub + span);
        stats.size = n * unit.size;
        if unit.segs == 0 {
            return (level, stats);
        }
        let k = unit.segs;
        stats.segs = if !merged {
            n * k
        } else if k == 1 {
            1
        } else {
            n * (k - 1) + 1
        };
        stats.first_off = unit.first_off;
        stats.last_end = unit.last_end + span;
        (level, stats)
    }

    /// Maps segment `j` of this level to (copy index, segment index in unit).
    #[inline]
    fn locate(&self, j: u64) -> (u64, u64) {
        let k = self.unit_segs;
        if !self.merged {
            (j / k, j % k)
        } else if k == 1 {
            (0, 0)
        } else {
            let q = j / (k - 1);
            let r = j % (k - 1);
            if r == 0 && q > 0 {
                (q - 1, k - 1)
            } else {
                (q, r)
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    disp: i64,
    child: usize,
    level: Level,
    /// Segments that start in earlier blocks.
    starts_before: u64,
    /// Packed bytes of earlier blocks.
    bytes_before: u64,
    /// First segment continues the previous block's last segment.
    joins_prev: bool,
}

#[derive(Debug)]
enum Ctor {
    Contiguous(u64),
    Vector {
        count: u64,
        blocklen: u64,
        stride: i64,
    },
    Hvector {
        count: u64,
        blocklen: u64,
        stride: i64,
    },
    IndexedBlock {
        blocklen: u64,
        displs: Vec<i64>,
    },
    Struct {
        blocklens: Vec<u64>,
        displs: Vec<i64>,
    },
    Subarray {
        full: Vec<u64>,
        sub: Vec<u64>,
        offs: Vec<u64>,
    },
    Resized {
        lb: i64,
        extent: i64,
    },
}

#[derive(Debug)]
enum Node {
    Basic(BasicKind),
    Repeat {
        levels: Vec<Level>,
        base: i64,
        child: Datatype,
    },
    Blocks {
        blocks: Vec<Block>,
        children: Vec<Datatype>,
    },
    Resized {
        child: Datatype,
    },
}

struct TypeInner {
    node: Node,
    ctor: Option<Ctor>,
    stats: Stats,
    committed: AtomicBool,
    nodes: usize,
}

/// An immutable, shareable datatype descriptor.
///
/// Cloning is cheap (reference counted). Derived types start uncommitted and
/// must be committed before they are used for iovec queries or communication.
#[derive(Clone)]
pub struct Datatype(Arc<TypeInner>);

pub static BYTE: LazyLock<Datatype> = LazyLock::new(|| Datatype::basic(BasicKind::Byte));
pub static CHAR: LazyLock<Datatype> = LazyLock::new(|| Datatype::basic(BasicKind::Char));
pub static INT32: LazyLock<Datatype> = LazyLock::new(|| Datatype::basic(BasicKind::Int32));
pub static INT64: LazyLock<Datatype> = LazyLock::new(|| Datatype::basic(BasicKind::Int64));
pub static FLOAT: LazyLock<Datatype> = LazyLock::new(|| Datatype::basic(BasicKind::Float));
pub static DOUBLE: LazyLock<Datatype> = LazyLock::new(|| Datatype::basic(BasicKind::Double));

fn to_u64(v: i64, what: &str) -> Result<u64> {
    u64::try_from(v).map_err(|_| Error::arg(format!("{what} must be non-negative, got {v}")))
}

impl Datatype {
    /// Predefined type of the given kind (already committed).
    pub fn basic(kind: BasicKind) -> Datatype {
        let size = kind.size();
        Datatype(Arc::new(TypeInner {
            node: Node::Basic(kind),
            ctor: None,
            stats: Stats {
                size,
                lb: 0,
                ub: size as i64,
                segs: 1,
                first_off: 0,
                last_end: size as i64,
                bounded: true,
            },
            committed: AtomicBool::new(true),
            nodes: 1,
        }))
    }

    fn check_child(child: &Datatype) -> Result<()> {
        if !child.is_committed() {
            return Err(Error::arg("child datatype must be committed"));
        }
        Ok(())
    }

    fn from_parts(node: Node, ctor: Ctor, stats: Stats) -> Datatype {
        let nodes = 1 + match &node {
            Node::Basic(_) => 0,
            Node::Repeat { child, .. } | Node::Resized { child } => child.node_count(),
            Node::Blocks { children, .. } => children.iter().map(Datatype::node_count).sum(),
        };
        Datatype(Arc::new(TypeInner {
            node,
            ctor: Some(ctor),
            stats,
            committed: AtomicBool::new(false),
            nodes,
        }))
    }

    fn repeat(levels_spec: &[(u64, i64)], base: i64, child: &Datatype, ctor: Ctor) -> Datatype {
        // levels_spec is outermost first; stats are built innermost first.
        let mut unit = child.0.stats;
        let mut levels = Vec::with_capacity(levels_spec.len());
        for &(n, stride) in levels_spec.iter().rev() {
            let (level, stats) = Level::new(n, stride, &unit);
            levels.push(level);
            unit = stats;
        }
        levels.reverse();
        let mut stats = unit;
        stats.first_off += base;
        stats.last_end += base;
        stats.lb += base;
        stats.ub += base;
        Datatype::from_parts(
            Node::Repeat {
                levels,
                base,
                child: child.clone(),
            },
            ctor,
            stats,
        )
    }

    /// `count` copies of `child`, each one extent apart.
    pub fn contiguous(count: i64, child: &Datatype) -> Result<Datatype> {
        let count = to_u64(count, "count")?;
        Self::check_child(child)?;
        Ok(Self::repeat(
            &[(count, child.extent())],
            0,
            child,
            Ctor::Contiguous(count),
        ))
    }

    /// `count` blocks of `blocklength` elements, block starts `stride`
    /// elements apart.
    pub fn vector(count: i64, blocklength: i64, stride: i64, child: &Datatype) -> Result<Datatype> {
        let count = to_u64(count, "count")?;
        let blocklen = to_u64(blocklength, "blocklength")?;
        Self::check_child(child)?;
        let ext = child.extent();
        Ok(Self::repeat(
            &[(count, stride * ext), (blocklen, ext)],
            0,
            child,
            Ctor::Vector {
                count,
                blocklen,
                stride,
            },
        ))
    }

    /// Like [`Datatype::vector`] with the stride given in bytes.
    pub fn hvector(count: i64, blocklength: i64, stride_bytes: i64, child: &Datatype) -> Result<Datatype> {
        let count = to_u64(count, "count")?;
        let blocklen = to_u64(blocklength, "blocklength")?;
        Self::check_child(child)?;
        Ok(Self::repeat(
            &[(count, stride_bytes), (blocklen, child.extent())],
            0,
            child,
            Ctor::Hvector {
                count,
                blocklen,
                stride: stride_bytes,
            },
        ))
    }

    /// Equal-length blocks at displacements given in multiples of the child
    /// extent.
    pub fn indexed_block(blocklength: i64, displacements: &[i64], child: &Datatype) -> Result<Datatype> {
        let blocklen = to_u64(blocklength, "blocklength")?;
        Self::check_child(child)?;
        let ext = child.extent();
        let entries: Vec<(i64, usize, u64)> = displacements.iter().map(|&d| (d * ext, 0, blocklen)).collect();
        let children = vec![child.clone()];
        let (blocks, stats) = Self::build_blocks(&entries, &children);
        Ok(Self::from_parts(
            Node::Blocks { blocks, children },
            Ctor::IndexedBlock {
                blocklen,
                displs: displacements.to_vec(),
            },
            stats,
        ))
    }

    /// General struct type: block `i` holds `blocklengths[i]` copies of
    /// `types[i]` starting at byte displacement `displacements[i]`.
    pub fn create_struct(blocklengths: &[i64], displacements: &[i64], types: &[Datatype]) -> Result<Datatype> {
        if blocklengths.len() != displacements.len() || blocklengths.len() != types.len() {
            return Err(Error::arg("struct argument arrays differ in length"));
        }
        let mut entries = Vec::with_capacity(types.len());
        let mut bls = Vec::with_capacity(types.len());
        for (i, ty) in types.iter().enumerate() {
            Self::check_child(ty)?;
            let bl = to_u64(blocklengths[i], "blocklength")?;
            bls.push(bl);
            entries.push((displacements[i], i, bl));
        }
        let children = types.to_vec();
        let (blocks, stats) = Self::build_blocks(&entries, &children);
        Ok(Self::from_parts(
            Node::Blocks { blocks, children },
            Ctor::Struct {
                blocklens: bls,
                displs: displacements.to_vec(),
            },
            stats,
        ))
    }

    fn build_blocks(entries: &[(i64, usize, u64)], children: &[Datatype]) -> (Vec<Block>, Stats) {
        let mut blocks = Vec::new();
        let mut stats = Stats::default();
        let mut bounds: Option<(i64, i64)> = None;
        let mut prev_end: Option<i64> = None;
        for &(disp, child, reps) in entries {
            let unit = children[child].0.stats;
            let (level, bstats) = Level::new(reps, children[child].extent(), &unit);
            if bstats.bounded {
                let (lb, ub) = (bstats.lb + disp, bstats.ub + disp);
                bounds = Some(match bounds {
                    None => (lb, ub),
                    Some((l, u)) => (l.min(lb), u.max(ub)),
                });
            }
            if bstats.segs == 0 {
                continue;
            }
            let first = bstats.first_off + disp;
            let joins_prev = prev_end == Some(first);
            let starts = bstats.segs - joins_prev as u64;
            if stats.segs == 0 {
                stats.first_off = first;
            }
            blocks.push(Block {
                disp,
                child,
                level,
                starts_before: stats.segs,
                bytes_before: stats.size,
                joins_prev,
            });
            stats.segs += starts;
            stats.size += bstats.size;
            stats.last_end = bstats.last_end + disp;
            prev_end = Some(stats.last_end);
        }
        if let Some((lb, ub)) = bounds {
            stats.lb = lb;
            stats.ub = ub;
            stats.bounded = true;
        }
        (blocks, stats)
    }

    /// A sub-block of an `ndims`-dimensional array, C order.
    pub fn subarray(
        full_sizes: &[i64],
        sub_sizes: &[i64],
        sub_offsets: &[i64],
        order: Order,
        child: &Datatype,
    ) -> Result<Datatype> {
        let Order::C = order;
        let ndims = full_sizes.len();
        if ndims == 0 || sub_sizes.len() != ndims || sub_offsets.len() != ndims {
            return Err(Error::arg(
                "subarray dimension arrays must be non-empty and equal length",
            ));
        }
        Self::check_child(child)?;
        let mut full = Vec::with_capacity(ndims);
        let mut sub = Vec::with_capacity(ndims);
        let mut offs = Vec::with_capacity(ndims);
        for d in 0..ndims {
            let f = to_u64(full_sizes[d], "full size")?;
            let s = to_u64(sub_sizes[d], "sub size")?;
            let o = to_u64(sub_offsets[d], "sub offset")?;
            if f == 0 || o + s > f {
                return Err(Error::arg(format!(
                    "subarray dimension {d}: offset {o} + size {s} exceeds full size {f}"
                )));
            }
            full.push(f);
            sub.push(s);
            offs.push(o);
        }
        let ext = child.extent();
        let mut strides = vec![0i64; ndims];
        let mut acc = ext;
        for d in (0..ndims).rev() {
            strides[d] = acc;
            acc *= full[d] as i64;
        }
        let base: i64 = (0..ndims).map(|d| offs[d] as i64 * strides[d]).sum();
        let spec: Vec<(u64, i64)> = (0..ndims).map(|d| (sub[d], strides[d])).collect();
        let mut ty = Self::repeat(&spec, base, child, Ctor::Subarray { full, sub, offs });
        // The type spans the whole array regardless of which block is selected.
        let inner = Arc::get_mut(&mut ty.0).expect("freshly built");
        inner.stats.lb = 0;
        inner.stats.ub = acc;
        inner.stats.bounded = true;
        Ok(ty)
    }

    /// Same layout as `child` with an explicit lower bound and extent.
    pub fn resized(lb: i64, extent: i64, child: &Datatype) -> Result<Datatype> {
        Self::check_child(child)?;
        let mut stats = child.0.stats;
        stats.lb = lb;
        stats.ub = lb + extent;
        stats.bounded = true;
        Ok(Self::from_parts(
            Node::Resized { child: child.clone() },
            Ctor::Resized { lb, extent },
            stats,
        ))
    }

    /// Marks the type usable for iovec queries and communication.
    pub fn commit(&mut self) {
        self.0.committed.store(true, Ordering::Release);
    }

    /// Returns a committed copy, for use in expressions.
    pub fn committed(mut self) -> Datatype {
        self.commit();
        self
    }

    /// Releases this handle. Types that embed this one keep it alive.
    pub fn free(self) {}

    pub fn is_committed(&self) -> bool {
        self.0.committed.load(Ordering::Acquire)
    }

    /// Total number of data bytes (sum over basic elements).
    pub fn size(&self) -> u64 {
        self.0.stats.size
    }

    pub fn lb(&self) -> i64 {
        self.0.stats.lb
    }

    pub fn extent(&self) -> i64 {
        self.0.stats.ub - self.0.stats.lb
    }

    /// Number of maximal contiguous runs in traversal order.
    pub fn segment_count(&self) -> u64 {
        self.0.stats.segs
    }

    /// Number of descriptor nodes in this type's tree.
    pub fn node_count(&self) -> usize {
        self.0.nodes
    }

    /// The element kind when this is a predefined type.
    pub fn basic_kind(&self) -> Option<BasicKind> {
        match self.0.node {
            Node::Basic(kind) => Some(kind),
            _ => None,
        }
    }

    fn require_committed(&self) -> Result<()> {
        if self.is_committed() {
            Ok(())
        } else {
            Err(Error::arg("datatype is not committed"))
        }
    }

    /// Number of whole segments fitting in `max_iov_bytes` and their byte
    /// total. `-1` (or anything ≥ [`size`](Self::size)) asks for all of them.
    pub fn iov_len(&self, max_iov_bytes: i64) -> Result<(u64, u64)> {
        self.require_committed()?;
        Layout::new(self, 1).iov_len(max_iov_bytes)
    }

    /// Segments `[iov_offset, iov_offset + max_iov_len)`, clipped at the end
    /// of the type.
    pub fn iov(&self, iov_offset: u64, max_iov_len: u64) -> Result<Vec<IovSegment>> {
        self.require_committed()?;
        Layout::new(self, 1).iov(iov_offset, max_iov_len)
    }

    /// Gathers the bytes of `count` elements laid out in `src` into `dst`.
    pub fn pack(&self, count: usize, src: &[u8], dst: &mut [u8]) -> Result<usize> {
        self.require_committed()?;
        Layout::new(self, count as u64).pack(src, dst)
    }

    /// Scatters packed bytes from `src` into the layout of `count` elements
    /// in `dst`. Overlapping layouts resolve last-writer-wins in traversal
    /// order.
    pub fn unpack(&self, count: usize, src: &[u8], dst: &mut [u8]) -> Result<usize> {
        self.require_committed()?;
        Layout::new(self, count as u64).unpack(src, dst)
    }

    /// Segment start offset and packed position of segment `j`.
    fn seg_start(&self, mut j: u64) -> (i64, u64) {
        let mut off = 0i64;
        let mut pos = 0u64;
        let mut ty = self;
        loop {
            match &ty.0.node {
                Node::Basic(_) => return (off, pos),
                Node::Resized { child } => ty = child,
                Node::Repeat { levels, base, child } => {
                    off += base;
                    for level in levels {
                        let (c, r) = level.locate(j);
                        off += c as i64 * level.stride;
                        pos += c * level.unit_size;
                        j = r;
                    }
                    ty = child;
                }
                Node::Blocks { blocks, children } => {
                    let b = blocks.partition_point(|blk| blk.starts_before <= j) - 1;
                    let blk = &blocks[b];
                    let local = j - blk.starts_before + blk.joins_prev as u64;
                    let (c, r) = blk.level.locate(local);
                    off += blk.disp + c as i64 * blk.level.stride;
                    pos += blk.bytes_before + c * blk.level.unit_size;
                    j = r;
                    ty = &children[blk.child];
                }
            }
        }
    }

    /// Writes a constructor expression equivalent to this type.
    fn describe(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn list<T: fmt::Display>(f: &mut fmt::Formatter<'_>, v: &[T]) -> fmt::Result {
            write!(f, "[")?;
            for (i, x) in v.iter().enumerate() {
                if i > 0 {
                    write!(f, ",")?;
                }
                write!(f, "{x}")?;
            }
            write!(f, "]")
        }
        let child = |f: &mut fmt::Formatter<'_>| -> fmt::Result {
            match &self.0.node {
                Node::Repeat { child, .. } | Node::Resized { child } => child.describe(f),
                _ => Ok(()),
            }
        };
        match (&self.0.node, &self.0.ctor) {
            (Node::Basic(kind), _) => write!(f, "{}", kind.name()),
            (_, Some(Ctor::Contiguous(n))) => {
                write!(f, "contiguous({n},")?;
                child(f)?;
                write!(f, ")")
            }
            (
                _,
                Some(Ctor::Vector {
                    count,
                    blocklen,
                    stride,
                }),
            ) => {
                write!(f, "vector({count},{blocklen},{stride},")?;
                child(f)?;
                write!(f, ")")
            }
            (
                _,
                Some(Ctor::Hvector {
                    count,
                    blocklen,
                    stride,
                }),
            ) => {
                write!(f, "hvector({count},{blocklen},{stride},")?;
                child(f)?;
                write!(f, ")")
            }
            (Node::Blocks { children, .. }, Some(Ctor::IndexedBlock { blocklen, displs })) => {
                write!(f, "indexed_block({blocklen},")?;
                list(f, displs)?;
                write!(f, ",")?;
                children[0].describe(f)?;
                write!(f, ")")
            }
            (Node::Blocks { children, .. }, Some(Ctor::Struct { blocklens, displs })) => {
                write!(f, "struct(")?;
                list(f, blocklens)?;
                write!(f, ",")?;
                list(f, displs)?;
                write!(f, ",[")?;
                for (i, c) in children.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    c.describe(f)?;
                }
                write!(f, "])")
            }
            (_, Some(Ctor::Subarray { full, sub, offs })) => {
                write!(f, "subarray(")?;
                list(f, full)?;
                write!(f, ",")?;
                list(f, sub)?;
                write!(f, ",")?;
                list(f, offs)?;
                write!(f, ",")?;
                child(f)?;
                write!(f, ")")
            }
            (_, Some(Ctor::Resized { lb, extent })) => {
                write!(f, "resized({lb},{extent},")?;
                child(f)?;
                write!(f, ")")
            }
            _ => write!(f, "?"),
        }
    }
}

impl fmt::Debug for Datatype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.describe(f)
    }
}

impl fmt::Display for Datatype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.describe(f)
    }
}

/// `count` consecutive elements of a datatype: the shape of a message buffer.
#[derive(Clone, Copy)]
pub(crate) struct Layout<'a> {
    ty: &'a Datatype,
    level: Level,
    stats: Stats,
}

impl<'a> Layout<'a> {
    pub(crate) fn new(ty: &'a Datatype, count: u64) -> Layout<'a> {
        let (level, stats) = Level::new(count, ty.extent(), &ty.0.stats);
        Layout { ty, level, stats }
    }

    pub(crate) fn size(&self) -> u64 {
        self.stats.size
    }

    pub(crate) fn segments(&self) -> u64 {
        self.stats.segs
    }

    /// The byte range covered when the layout is one run starting at 0.
    pub(crate) fn contiguous_len(&self) -> Option<usize> {
        match self.stats.segs {
            0 => Some(0),
            1 if self.stats.first_off == 0 => Some(self.stats.size as usize),
            _ => None,
        }
    }

    fn start(&self, j: u64) -> (i64, u64) {
        if j >= self.stats.segs {
            return (0, self.stats.size);
        }
        let (c, r) = self.level.locate(j);
        let (off, pos) = self.ty.seg_start(r);
        (off + c as i64 * self.level.stride, pos + c * self.level.unit_size)
    }

    fn iov_len(&self, max_bytes: i64) -> Result<(u64, u64)> {
        if max_bytes < -1 {
            return Err(Error::arg(format!("max_iov_bytes {max_bytes} < -1")));
        }
        if max_bytes == -1 || max_bytes as u64 >= self.stats.size {
            return Ok((self.stats.segs, self.stats.size));
        }
        let max = max_bytes as u64;
        // Largest j with pos(j) <= max. pos(0) = 0 and pos(segs) = size > max.
        let (mut lo, mut hi) = (0u64, self.stats.segs);
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if self.start(mid).1 <= max {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok((lo, self.start(lo).1))
    }

    fn iov(&self, offset: u64, max_len: u64) -> Result<Vec<IovSegment>> {
        if offset > self.stats.segs {
            return Err(Error::arg(format!(
                "iov offset {offset} beyond segment count {}",
                self.stats.segs
            )));
        }
        let n = max_len.min(self.stats.segs - offset);
        let mut out = Vec::with_capacity(n as usize);
        self.for_each_segment(offset, offset + n, |seg, _| {
            out.push(seg);
            Ok(())
        })?;
        Ok(out)
    }

    /// Visits segments `[from, to)` with their packed positions.
    pub(crate) fn for_each_segment(
        &self,
        from: u64,
        to: u64,
        mut f: impl FnMut(IovSegment, u64) -> Result<()>,
    ) -> Result<()> {
        if from >= to {
            return Ok(());
        }
        let mut cur = self.start(from);
        for j in from..to {
            let next = self.start(j + 1);
            f(
                IovSegment {
                    offset: cur.0,
                    len: next.1 - cur.1,
                },
                cur.1,
            )?;
            cur = next;
        }
        Ok(())
    }

    fn region(seg: IovSegment, len: usize) -> Result<std::ops::Range<usize>> {
        if seg.offset < 0 || seg.offset as u64 + seg.len > len as u64 {
            return Err(Error::arg(format!(
                "segment [{}, +{}) outside a {len}-byte buffer",
                seg.offset, seg.len
            )));
        }
        let start = seg.offset as usize;
        Ok(start..start + seg.len as usize)
    }

    pub(crate) fn pack(&self, src: &[u8], dst: &mut [u8]) -> Result<usize> {
        let size = self.stats.size as usize;
        if dst.len() < size {
            return Err(Error::Truncate {
                incoming: size,
                capacity: dst.len(),
            });
        }
        self.for_each_segment(0, self.stats.segs, |seg, pos| {
            let r = Self::region(seg, src.len())?;
            let p = pos as usize;
            dst[p..p + r.len()].copy_from_slice(&src[r]);
            Ok(())
        })?;
        Ok(size)
    }

    pub(crate) fn unpack(&self, src: &[u8], dst: &mut [u8]) -> Result<usize> {
        let size = self.stats.size as usize;
        if src.len() < size {
            return Err(Error::Truncate {
                incoming: size,
                capacity: src.len(),
            });
        }
        self.for_each_segment(0, self.stats.segs, |seg, pos| {
            let r = Self::region(seg, dst.len())?;
            let p = pos as usize;
            let n = r.len();
            dst[r].copy_from_slice(&src[p..p + n]);
            Ok(())
        })?;
        Ok(size)
    }

    /// Unpacks only the first `n` packed bytes (for truncated receives).
    pub(crate) fn unpack_prefix(&self, src: &[u8], dst: &mut [u8]) -> Result<usize> {
        let n = src.len() as u64;
        self.for_each_segment(0, self.stats.segs, |seg, pos| {
            if pos >= n {
                return Ok(());
            }
            let take = seg.len.min(n - pos);
            let r = Self::region(
                IovSegment {
                    offset: seg.offset,
                    len: take,
                },
                dst.len(),
            )?;
            let p = pos as usize;
            let len = r.len();
            dst[r].copy_from_slice(&src[p..p + len]);
            Ok(())
        })?;
        Ok(src.len())
    }

    /// Highest byte offset touched, for sizing receive buffers.
    pub(crate) fn span_end(&self) -> i64 {
        if self.stats.segs == 0 {
            0
        } else {
            self.stats.ub.max(self.stats.last_end)
        }
    }
}
