//! Tensor-granularity VN engine on the CPU memory path.
//!
//! The analyzer watches cacheline requests, learns tensor address ranges that
//! share one VN, and then serves those VNs from on-chip state. Writes to a
//! learned tensor are tracked with a per-line bitmap so that the whole range
//! advances its VN only when every line has been rewritten exactly once.
//!
//! It never touches memory itself: off-chip VN fetches are performed by the
//! caller through the `fetch` closures, which keeps the analyzer usable both
//! with the functional memory and with the crypto-free [`VnOracle`].

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use serde::Serialize;

use crate::baseline::CostReport;
use crate::config::CpuConfig;
use crate::crypto::{MacTag, VersionNumber, LINE_BYTES};
use crate::error::Result;

/// Largest row/plane stride representable by the 10-bit stride field, in
/// cachelines.
pub const MAX_STRIDE_LINES: u64 = 1023;
pub const MAX_STRIDE_BYTES: u64 = MAX_STRIDE_LINES * LINE_BYTES;
/// Bitmap bits held by one 64 B bitmap cache line.
const BITS_PER_BITMAP_LINE: u64 = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TenAnalyzerConfig {
    pub table_entries: usize,
    pub filter_entries: usize,
    pub filter_collect: usize,
    pub merge_window: usize,
    pub bitmap_cache_bytes: u64,
}

impl Default for TenAnalyzerConfig {
    fn default() -> Self {
        Self::from(&CpuConfig::default())
    }
}

impl From<&CpuConfig> for TenAnalyzerConfig {
    fn from(c: &CpuConfig) -> Self {
        TenAnalyzerConfig {
            table_entries: c.meta_table_entries,
            filter_entries: c.filter_entries,
            filter_collect: c.filter_collect,
            merge_window: c.merge_window,
            bitmap_cache_bytes: c.bitmap_cache_bytes,
        }
    }
}

/// Geometry of a tensor range: `d0` cachelines per row, `d1` rows `row_stride`
/// bytes apart, `d2` planes `plane_stride` bytes apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Shape {
    pub d0: u64,
    pub d1: u64,
    pub d2: u64,
    pub row_stride: u64,
    pub plane_stride: u64,
}

impl Shape {
    pub fn linear(lines: u64) -> Shape {
        Shape { d0: lines, d1: 1, d2: 1, row_stride: lines * LINE_BYTES, plane_stride: lines * LINE_BYTES }
    }

    pub fn rows(d0: u64, d1: u64, row_stride: u64) -> Shape {
        Shape { d0, d1, d2: 1, row_stride, plane_stride: d1 * row_stride }.normalized()
    }

    pub fn planes(d0: u64, d1: u64, row_stride: u64, d2: u64, plane_stride: u64) -> Shape {
        Shape { d0, d1, d2, row_stride, plane_stride }.normalized()
    }

    /// Canonical form: contiguous rows fold into one row and contiguous
    /// planes fold into rows, so equal ranges have equal shapes.
    pub fn normalized(mut self) -> Shape {
        if self.d2 > 1 && self.d1 == 1 {
            self.d1 = self.d2;
            self.row_stride = self.plane_stride;
            self.d2 = 1;
        }
        if self.d2 > 1 && self.plane_stride == self.d1 * self.row_stride {
            self.d1 *= self.d2;
            self.d2 = 1;
        }
        if self.d2 == 1 && self.d1 > 1 && self.row_stride == self.d0 * LINE_BYTES {
            self.d0 *= self.d1;
            self.d1 = 1;
        }
        if self.d1 == 1 && self.d2 == 1 {
            self.row_stride = self.d0 * LINE_BYTES;
        }
        if self.d2 == 1 {
            self.plane_stride = self.d1 * self.row_stride;
        }
        self
    }

    pub fn ndim(&self) -> u8 {
        if self.d2 > 1 {
            3
        } else if self.d1 > 1 {
            2
        } else {
            1
        }
    }

    pub fn lines(&self) -> u64 {
        self.d0 * self.d1 * self.d2
    }

    pub fn is_well_formed(&self) -> bool {
        self.d0 > 0
            && self.d1 > 0
            && self.d2 > 0
            && self.row_stride >= self.d0 * LINE_BYTES
            && self.plane_stride >= self.d1 * self.row_stride
            && self.row_stride.is_multiple_of(LINE_BYTES)
            && self.plane_stride.is_multiple_of(LINE_BYTES)
    }

    /// Element index of `va` relative to `base`, if covered.
    pub fn index_of(&self, base: u64, va: u64) -> Option<u64> {
        if va < base {
            return None;
        }
        let off = va - base;
        if !off.is_multiple_of(LINE_BYTES) {
            return None;
        }
        let p = off / self.plane_stride;
        if p >= self.d2 {
            return None;
        }
        let rem = off % self.plane_stride;
        let r = rem / self.row_stride;
        if r >= self.d1 {
            return None;
        }
        let c = (rem % self.row_stride) / LINE_BYTES;
        if c >= self.d0 {
            return None;
        }
        Some((p * self.d1 + r) * self.d0 + c)
    }

    pub fn addr_of(&self, base: u64, idx: u64) -> u64 {
        let c = idx % self.d0;
        let r = (idx / self.d0) % self.d1;
        let p = idx / (self.d0 * self.d1);
        base + p * self.plane_stride + r * self.row_stride + c * LINE_BYTES
    }

    pub fn last_addr(&self, base: u64) -> u64 {
        self.addr_of(base, self.lines() - 1)
    }

    pub fn addrs(&self, base: u64) -> impl Iterator<Item = u64> + '_ {
        (0..self.lines()).map(move |i| self.addr_of(base, i))
    }
}

/// Shape of the union of two disjoint ranges when they form one regular
/// tensor. `lo_base < hi_base`.
pub fn merge_shapes(lo_base: u64, lo: Shape, hi_base: u64, hi: Shape) -> Option<Shape> {
    let gap = hi_base.checked_sub(lo_base)?;
    if gap == 0 || gap % LINE_BYTES != 0 {
        return None;
    }
    let merged = match (lo.ndim(), hi.ndim()) {
        (1, 1) => {
            if gap == lo.d0 * LINE_BYTES {
                Some(Shape::linear(lo.d0 + hi.d0))
            } else if lo.d0 == hi.d0 && gap > lo.d0 * LINE_BYTES && gap <= MAX_STRIDE_BYTES {
                Some(Shape::rows(lo.d0, 2, gap))
            } else {
                None
            }
        }
        (2, 1) if hi.d0 == lo.d0 && gap == lo.d1 * lo.row_stride => Some(Shape::rows(lo.d0, lo.d1 + 1, lo.row_stride)),
        (1, 2) if lo.d0 == hi.d0 && gap == hi.row_stride => Some(Shape::rows(hi.d0, hi.d1 + 1, hi.row_stride)),
        (2, 2) if lo.row_stride == hi.row_stride => {
            let rs = lo.row_stride;
            if lo.d0 == hi.d0 && gap == lo.d1 * rs {
                Some(Shape::rows(lo.d0, lo.d1 + hi.d1, rs))
            } else if lo.d1 == hi.d1 && gap == lo.d0 * LINE_BYTES && (lo.d0 + hi.d0) * LINE_BYTES <= rs {
                Some(Shape::rows(lo.d0 + hi.d0, lo.d1, rs))
            } else if lo.d0 == hi.d0 && lo.d1 == hi.d1 && gap > lo.d1 * rs && gap <= MAX_STRIDE_BYTES {
                Some(Shape::planes(lo.d0, lo.d1, rs, 2, gap))
            } else {
                None
            }
        }
        (3, 2) if same_plane(&lo, &hi) && gap == lo.d2 * lo.plane_stride => {
            Some(Shape::planes(lo.d0, lo.d1, lo.row_stride, lo.d2 + 1, lo.plane_stride))
        }
        (2, 3) if same_plane(&hi, &lo) && gap == hi.plane_stride => {
            Some(Shape::planes(hi.d0, hi.d1, hi.row_stride, hi.d2 + 1, hi.plane_stride))
        }
        (3, 3) if same_plane(&lo, &hi) && lo.plane_stride == hi.plane_stride && gap == lo.d2 * lo.plane_stride => {
            Some(Shape::planes(lo.d0, lo.d1, lo.row_stride, lo.d2 + hi.d2, lo.plane_stride))
        }
        _ => None,
    }?;
    merged.is_well_formed().then_some(merged)
}

/// Element-level overlap of two ranges.
fn ranges_overlap(a_base: u64, a: &Shape, b_base: u64, b: &Shape) -> bool {
    if a_base > b.last_addr(b_base) || b_base > a.last_addr(a_base) {
        return false;
    }
    let (s_base, small, l_base, large) =
        if a.lines() <= b.lines() { (a_base, a, b_base, b) } else { (b_base, b, a_base, a) };
    small.addrs(s_base).any(|x| large.index_of(l_base, x).is_some())
}

fn same_plane(p3: &Shape, p2: &Shape) -> bool {
    p3.d0 == p2.d0 && p3.d1 == p2.d1 && p3.row_stride == p2.row_stride
}

#[derive(Debug, Clone)]
pub struct MetaEntry {
    pub base: u64,
    pub shape: Shape,
    pub vn: VersionNumber,
    pub mac: Option<MacTag>,
    pub uf: bool,
    pub bs: bool,
    bits: Vec<u64>,
    flipped: u64,
    uid: u64,
    used: u64,
    updated: u64,
}

impl MetaEntry {
    pub fn last_addr(&self) -> u64 {
        self.shape.last_addr(self.base)
    }

    pub fn contains(&self, va: u64) -> bool {
        self.shape.index_of(self.base, va).is_some()
    }

    fn bit(&self, i: u64) -> bool {
        self.bits[(i / 64) as usize] >> (i % 64) & 1 == 1
    }

    fn flip(&mut self, i: u64) {
        self.bits[(i / 64) as usize] ^= 1 << (i % 64);
    }

    fn uniform_bits(n: u64, v: bool) -> Vec<u64> {
        let mut bits = vec![if v { u64::MAX } else { 0 }; n.div_ceil(64) as usize];
        if v && !n.is_multiple_of(64) {
            *bits.last_mut().unwrap() = (1u64 << (n % 64)) - 1;
        }
        bits
    }

    fn push_bit(&mut self, v: bool) {
        let n = self.shape.lines() - 1;
        if n / 64 >= self.bits.len() as u64 {
            self.bits.push(0);
        }
        if v {
            self.bits[(n / 64) as usize] |= 1 << (n % 64);
        }
    }

    /// VN of element `idx` as seen by a reader.
    fn element_vn(&self, idx: u64) -> VersionNumber {
        if self.uf && self.bit(idx) != self.bs {
            self.vn.next()
        } else {
            self.vn
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VnResolution {
    HitIn(VersionNumber),
    HitBoundary { speculative: VersionNumber, slot: usize },
    Miss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ReadKind {
    HitIn,
    HitBoundary,
    Mispredict,
    Miss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum InvalidateReason {
    /// A non-first line was written while no update was in progress.
    NotStarted,
    /// A line was written twice within one update.
    DoubleUpdate,
    /// The last line arrived before every line had been written.
    Incomplete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteOutcome {
    /// First line of a tensor update; write it with `vn`.
    HitEdgeStart {
        vn: VersionNumber,
    },
    HitIn {
        vn: VersionNumber,
    },
    /// Last line; the range now carries `vn` and its VN/tree lines need a
    /// bulk write-back.
    HitEdgeFinish {
        vn: VersionNumber,
        base: u64,
        shape: Shape,
    },
    Miss,
    Invalidate(InvalidateReason),
}

impl WriteOutcome {
    /// The VN to encrypt with when the write is tracked by an entry.
    pub fn tracked_vn(&self) -> Option<VersionNumber> {
        match *self {
            WriteOutcome::HitEdgeStart { vn } | WriteOutcome::HitIn { vn } | WriteOutcome::HitEdgeFinish { vn, .. } => {
                Some(vn)
            }
            WriteOutcome::Miss | WriteOutcome::Invalidate(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HintOutcome {
    Installed,
    NoOp,
    Deferred,
    TableFull,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TaStats {
    pub reads: u64,
    pub hit_in: u64,
    pub hit_boundary: u64,
    pub mispredict: u64,
    pub miss: u64,
    pub writes: u64,
    pub w_edge_start: u64,
    pub w_hit_in: u64,
    pub w_finish: u64,
    pub w_miss: u64,
    pub invalid_not_started: u64,
    pub invalid_double: u64,
    pub invalid_incomplete: u64,
    pub promotions: u64,
    pub merges: u64,
    pub evictions: u64,
    pub alloc_failures: u64,
    pub hints_installed: u64,
    pub hints_deferred: u64,
    pub bitmap_misses: u64,
}

impl TaStats {
    pub fn invalidations(&self) -> u64 {
        self.invalid_not_started + self.invalid_double + self.invalid_incomplete
    }

    pub fn hit_in_rate(&self) -> f64 {
        ratio(self.hit_in, self.reads)
    }

    pub fn hit_all_rate(&self) -> f64 {
        ratio(self.hit_in + self.hit_boundary, self.reads)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone)]
struct FilterEntry {
    addrs: Vec<(u64, VersionNumber)>,
    stamp: u64,
}

impl FilterEntry {
    fn last(&self) -> u64 {
        self.addrs.last().unwrap().0
    }

    fn stride(&self) -> Option<u64> {
        (self.addrs.len() >= 2).then(|| self.addrs[1].0 - self.addrs[0].0)
    }
}

#[derive(Debug, Clone, Copy)]
struct PendingHint {
    base: u64,
    shape: Shape,
}

/// Small LRU set of bitmap cache lines.
#[derive(Debug, Clone)]
struct BitmapCache {
    capacity: usize,
    lines: VecDeque<(u64, u64)>,
}

impl BitmapCache {
    fn new(bytes: u64) -> Self {
        BitmapCache { capacity: (bytes / LINE_BYTES) as usize, lines: VecDeque::new() }
    }

    /// True on a hit.
    fn touch(&mut self, key: (u64, u64)) -> bool {
        if let Some(pos) = self.lines.iter().position(|k| *k == key) {
            let k = self.lines.remove(pos).unwrap();
            self.lines.push_front(k);
            return true;
        }
        if self.capacity == 0 {
            return false;
        }
        if self.lines.len() == self.capacity {
            self.lines.pop_back();
        }
        self.lines.push_front(key);
        false
    }
}

#[derive(Debug, Clone)]
struct SavedContext {
    slots: Vec<Option<MetaEntry>>,
    filter: Vec<FilterEntry>,
    deferred: Vec<PendingHint>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EntryDump {
    pub base: u64,
    pub dims: Vec<u64>,
    pub stride: u64,
    pub vn: u64,
    pub uf: bool,
    pub bs: bool,
    pub valid: bool,
}

#[derive(Debug, Clone)]
pub struct TenAnalyzer {
    cfg: TenAnalyzerConfig,
    en_tmf: bool,
    slots: Vec<Option<MetaEntry>>,
    mru: VecDeque<usize>,
    filter: Vec<FilterEntry>,
    bitmap_cache: BitmapCache,
    deferred: Vec<PendingHint>,
    saved: HashMap<u64, SavedContext>,
    by_base: BTreeMap<u64, usize>,
    by_updated: BTreeMap<u64, usize>,
    max_span: u64,
    tick: u64,
    next_uid: u64,
    pub stats: TaStats,
}

const MRU_LEN: usize = 8;

impl TenAnalyzer {
    pub fn new(cfg: TenAnalyzerConfig) -> Self {
        TenAnalyzer {
            slots: vec![None; cfg.table_entries],
            mru: VecDeque::new(),
            filter: Vec::new(),
            bitmap_cache: BitmapCache::new(cfg.bitmap_cache_bytes),
            deferred: Vec::new(),
            saved: HashMap::new(),
            by_base: BTreeMap::new(),
            by_updated: BTreeMap::new(),
            max_span: 0,
            tick: 0,
            next_uid: 0,
            stats: TaStats::default(),
            en_tmf: true,
            cfg,
        }
    }

    pub fn set_en_tmf(&mut self, on: bool) {
        self.en_tmf = on;
    }

    pub fn en_tmf(&self) -> bool {
        self.en_tmf
    }

    pub fn entries(&self) -> impl Iterator<Item = &MetaEntry> {
        self.slots.iter().flatten()
    }

    pub fn valid_entries(&self) -> usize {
        self.entries().count()
    }

    pub fn entry_containing(&self, va: u64) -> Option<&MetaEntry> {
        self.lookup(va).map(|(s, _)| self.slots[s].as_ref().unwrap())
    }

    fn bump(&mut self) -> u64 {
        self.tick += 1;
        self.tick
    }

    fn lookup(&self, va: u64) -> Option<(usize, u64)> {
        let probe = |s: usize| self.slots[s].as_ref().and_then(|e| e.shape.index_of(e.base, va)).map(|i| (s, i));
        self.mru.iter().find_map(|&s| probe(s)).or_else(|| self.near(va).find_map(|(_, s)| probe(s)))
    }

    /// Entries whose base lies in `[va - max_span, va]`, nearest first.
    fn near(&self, va: u64) -> impl Iterator<Item = (u64, usize)> + '_ {
        let floor = va.saturating_sub(self.max_span);
        self.by_base.range(..=va).rev().take_while(move |(b, _)| **b >= floor).map(|(b, s)| (*b, *s))
    }

    fn place(&mut self, slot: usize, e: MetaEntry) {
        self.by_base.insert(e.base, slot);
        self.by_updated.insert(e.updated, slot);
        self.max_span = self.max_span.max(e.last_addr() - e.base);
        self.slots[slot] = Some(e);
    }

    fn set_updated(&mut self, slot: usize, t: u64) {
        let e = self.slots[slot].as_mut().unwrap();
        self.by_updated.remove(&e.updated);
        e.updated = t;
        self.by_updated.insert(t, slot);
        self.max_span = self.max_span.max(e.last_addr() - e.base);
    }

    fn rebuild_index(&mut self) {
        self.by_base.clear();
        self.by_updated.clear();
        self.max_span = 0;
        for (i, e) in self.slots.iter().enumerate() {
            if let Some(e) = e {
                self.by_base.insert(e.base, i);
                self.by_updated.insert(e.updated, i);
                self.max_span = self.max_span.max(e.last_addr() - e.base);
            }
        }
    }

    fn note_used(&mut self, slot: usize) {
        let t = self.bump();
        if let Some(e) = self.slots[slot].as_mut() {
            e.used = t;
        }
        if self.mru.front() != Some(&slot) {
            self.mru.retain(|&s| s != slot);
            self.mru.push_front(slot);
            self.mru.truncate(MRU_LEN);
        }
    }

    fn touch_bitmap(&mut self, slot: usize, idx: u64, cost: &mut CostReport) {
        let uid = self.slots[slot].as_ref().unwrap().uid;
        if !self.bitmap_cache.touch((uid, idx / BITS_PER_BITMAP_LINE)) {
            self.stats.bitmap_misses += 1;
            cost.bitmap_bytes += LINE_BYTES;
        }
    }

    fn remove(&mut self, slot: usize) -> Option<MetaEntry> {
        self.mru.retain(|&s| s != slot);
        let e = self.slots[slot].take()?;
        self.by_base.remove(&e.base);
        self.by_updated.remove(&e.updated);
        Some(e)
    }

    /// Places a new entry, evicting the LRU idle entry if the table is full.
    fn allocate(&mut self, base: u64, shape: Shape, vn: VersionNumber, mac: Option<MacTag>) -> Option<usize> {
        let slot = match self.slots.iter().position(Option::is_none) {
            Some(s) => s,
            None => {
                let victim = self
                    .slots
                    .iter()
                    .enumerate()
                    .filter_map(|(i, e)| e.as_ref().filter(|e| !e.uf).map(|e| (e.used, i)))
                    .min()
                    .map(|(_, i)| i);
                match victim {
                    Some(v) => {
                        self.remove(v);
                        self.stats.evictions += 1;
                        v
                    }
                    None => {
                        self.stats.alloc_failures += 1;
                        return None;
                    }
                }
            }
        };
        let t = self.bump();
        self.next_uid += 1;
        self.place(
            slot,
            MetaEntry {
                base,
                shape,
                vn,
                mac,
                uf: false,
                bs: false,
                bits: MetaEntry::uniform_bits(shape.lines(), false),
                flipped: 0,
                uid: self.next_uid,
                used: t,
                updated: t,
            },
        );
        self.note_used(slot);
        Some(slot)
    }

    // ---- reads ----

    /// Classifies a read. HitIn is final; the other cases need the off-chip VN
    /// passed to [`Self::complete_read`].
    pub fn on_read(&mut self, va: u64, cost: &mut CostReport) -> VnResolution {
        if !self.en_tmf {
            return VnResolution::Miss;
        }
        if let Some((slot, idx)) = self.lookup(va) {
            self.note_used(slot);
            if self.slots[slot].as_ref().unwrap().uf {
                self.touch_bitmap(slot, idx, cost);
            }
            return VnResolution::HitIn(self.slots[slot].as_ref().unwrap().element_vn(idx));
        }
        let boundary = self.near(va.saturating_sub(LINE_BYTES)).map(|(_, s)| s).find(|&s| {
            self.slots[s].as_ref().is_some_and(|e| !e.uf && e.shape.ndim() == 1 && e.last_addr() + LINE_BYTES == va)
        });
        match boundary {
            Some(slot) => VnResolution::HitBoundary { speculative: self.slots[slot].as_ref().unwrap().vn, slot },
            None => VnResolution::Miss,
        }
    }

    pub fn complete_read(&mut self, va: u64, res: VnResolution, fetched: VersionNumber) -> ReadKind {
        self.stats.reads += 1;
        match res {
            VnResolution::HitIn(_) => {
                self.stats.hit_in += 1;
                ReadKind::HitIn
            }
            VnResolution::HitBoundary { speculative, slot } if speculative == fetched => {
                self.stats.hit_boundary += 1;
                let t = self.bump();
                let e = self.slots[slot].as_mut().unwrap();
                e.shape = Shape::linear(e.shape.d0 + 1);
                let bs = e.bs;
                e.push_bit(bs);
                e.mac = None;
                self.set_updated(slot, t);
                self.note_used(slot);
                self.try_merge(slot);
                ReadKind::HitBoundary
            }
            VnResolution::HitBoundary { .. } => {
                self.stats.mispredict += 1;
                self.filter_collect(va, fetched);
                ReadKind::Mispredict
            }
            VnResolution::Miss => {
                self.stats.miss += 1;
                if self.en_tmf {
                    self.filter_collect(va, fetched);
                }
                ReadKind::Miss
            }
        }
    }

    /// Full read: classify, fetch the off-chip VN when needed, complete.
    pub fn read(
        &mut self,
        va: u64,
        cost: &mut CostReport,
        mut fetch: impl FnMut(u64, &mut CostReport) -> Result<VersionNumber>,
    ) -> Result<(VersionNumber, ReadKind)> {
        let res = self.on_read(va, cost);
        let vn = match res {
            VnResolution::HitIn(vn) => vn,
            _ => fetch(va, cost)?,
        };
        Ok((vn, self.complete_read(va, res, vn)))
    }

    // ---- filter ----

    /// Records a missed (va, vn) pair; returns the slot of a promoted entry.
    pub fn filter_collect(&mut self, va: u64, vn: VersionNumber) -> Option<usize> {
        let t = self.bump();
        let joined = self
            .filter
            .iter()
            .enumerate()
            .filter_map(|(i, f)| {
                let last = f.last();
                let delta = va.checked_sub(last)?;
                let ok = match f.stride() {
                    Some(s) => delta == s,
                    None => (LINE_BYTES..=MAX_STRIDE_BYTES).contains(&delta) && delta % LINE_BYTES == 0,
                };
                ok.then_some((delta, i))
            })
            .min()
            .map(|(_, i)| i);
        let idx = match joined {
            Some(i) => {
                self.filter[i].addrs.push((va, vn));
                self.filter[i].stamp = t;
                i
            }
            None => {
                let fresh = FilterEntry { addrs: vec![(va, vn)], stamp: t };
                if self.filter.len() < self.cfg.filter_entries {
                    self.filter.push(fresh);
                } else if let Some(lru) = (0..self.filter.len()).min_by_key(|&i| self.filter[i].stamp) {
                    self.filter[lru] = fresh;
                }
                return None;
            }
        };
        if self.filter[idx].addrs.len() < self.cfg.filter_collect {
            return None;
        }
        let f = self.filter.swap_remove(idx);
        let vn0 = f.addrs[0].1;
        if f.addrs.iter().any(|(_, v)| *v != vn0) || f.addrs.iter().any(|(a, _)| self.lookup(*a).is_some()) {
            return None;
        }
        let stride = f.stride().unwrap();
        let n = f.addrs.len() as u64;
        let shape = if stride == LINE_BYTES { Shape::linear(n) } else { Shape::rows(1, n, stride) };
        let slot = self.allocate(f.addrs[0].0, shape, vn0, None)?;
        self.stats.promotions += 1;
        Some(self.try_merge(slot))
    }

    fn purge_filter(&mut self, va: u64) {
        self.filter.retain(|f| f.addrs.iter().all(|(a, _)| *a != va));
    }

    fn purge_filter_range(&mut self, lo: u64, hi: u64) {
        self.filter.retain(|f| f.addrs.iter().all(|(a, _)| *a < lo || *a > hi));
    }

    // ---- merging ----

    /// Merges `slot` with recently updated compatible entries until no merge
    /// applies; returns the slot of the resulting entry.
    pub fn try_merge(&mut self, mut slot: usize) -> usize {
        loop {
            let cur = match self.slots[slot].as_ref() {
                Some(e) if !e.uf => e,
                _ => return slot,
            };
            let found =
                self.by_updated.values().rev().filter(|&&i| i != slot).take(self.cfg.merge_window).find_map(|&other| {
                    let o = self.slots[other].as_ref().unwrap();
                    if o.uf || o.vn != cur.vn {
                        return None;
                    }
                    let (lo, hi) = if o.base < cur.base { (o, cur) } else { (cur, o) };
                    merge_shapes(lo.base, lo.shape, hi.base, hi.shape).map(|s| (other, lo.base, s))
                });
            let Some((other, base, shape)) = found else { return slot };
            let a = self.remove(slot).unwrap();
            let b = self.remove(other).unwrap();
            let mac = match (a.mac, b.mac) {
                (Some(x), Some(y)) => Some(x ^ y),
                _ => None,
            };
            let t = self.bump();
            self.next_uid += 1;
            let target = slot.min(other);
            self.place(
                target,
                MetaEntry {
                    base,
                    shape,
                    vn: a.vn,
                    mac,
                    uf: false,
                    bs: a.bs,
                    bits: MetaEntry::uniform_bits(shape.lines(), a.bs),
                    flipped: 0,
                    uid: self.next_uid,
                    used: a.used.max(b.used),
                    updated: t,
                },
            );
            self.note_used(target);
            self.stats.merges += 1;
            slot = target;
        }
    }

    // ---- writes ----

    pub fn on_write(&mut self, va: u64, cost: &mut CostReport) -> WriteOutcome {
        self.stats.writes += 1;
        let Some((slot, idx)) = (if self.en_tmf { self.lookup(va) } else { None }) else {
            self.stats.w_miss += 1;
            self.purge_filter(va);
            return WriteOutcome::Miss;
        };
        self.note_used(slot);
        self.touch_bitmap(slot, idx, cost);
        let e = self.slots[slot].as_mut().unwrap();
        if !e.uf {
            if va != e.base {
                return self.invalidate(slot, InvalidateReason::NotStarted);
            }
            e.uf = true;
            e.mac = None;
            e.flip(idx);
            e.flipped = 1;
            let vn = e.vn.next();
            if e.shape.lines() == 1 {
                return self.finish(slot);
            }
            self.stats.w_edge_start += 1;
            return WriteOutcome::HitEdgeStart { vn };
        }
        if e.bit(idx) != e.bs {
            return self.invalidate(slot, InvalidateReason::DoubleUpdate);
        }
        e.flip(idx);
        e.flipped += 1;
        if va == e.last_addr() {
            if e.flipped != e.shape.lines() {
                return self.invalidate(slot, InvalidateReason::Incomplete);
            }
            return self.finish(slot);
        }
        self.stats.w_hit_in += 1;
        WriteOutcome::HitIn { vn: e.vn.next() }
    }

    fn finish(&mut self, slot: usize) -> WriteOutcome {
        let t = self.bump();
        let e = self.slots[slot].as_mut().unwrap();
        e.vn = e.vn.next();
        e.bs = !e.bs;
        e.uf = false;
        e.flipped = 0;
        let out = WriteOutcome::HitEdgeFinish { vn: e.vn, base: e.base, shape: e.shape };
        self.stats.w_finish += 1;
        self.set_updated(slot, t);
        self.try_merge(slot);
        out
    }

    fn invalidate(&mut self, slot: usize, why: InvalidateReason) -> WriteOutcome {
        match why {
            InvalidateReason::NotStarted => self.stats.invalid_not_started += 1,
            InvalidateReason::DoubleUpdate => self.stats.invalid_double += 1,
            InvalidateReason::Incomplete => self.stats.invalid_incomplete += 1,
        }
        self.remove(slot);
        WriteOutcome::Invalidate(why)
    }

    /// Drops every entry and filter pair overlapping `[lo, hi]`, e.g. before
    /// an external agent rewrites that memory. Mid-update entries are kept
    /// and reported.
    pub fn invalidate_range(&mut self, lo: u64, hi: u64) -> bool {
        let mut blocked = false;
        for s in 0..self.slots.len() {
            if let Some(e) = &self.slots[s] {
                if e.base <= hi && e.last_addr() >= lo {
                    if e.uf {
                        blocked = true;
                    } else {
                        self.remove(s);
                    }
                }
            }
        }
        self.purge_filter_range(lo, hi);
        !blocked
    }

    // ---- hints ----

    /// Installs a known tensor structure. `fetch` loads the range's VN once.
    pub fn install_hint(
        &mut self,
        base: u64,
        shape: Shape,
        mac: Option<MacTag>,
        cost: &mut CostReport,
        mut fetch: impl FnMut(u64, &mut CostReport) -> Result<VersionNumber>,
    ) -> Result<HintOutcome> {
        let shape = shape.normalized();
        if !self.en_tmf {
            return Ok(HintOutcome::NoOp);
        }
        let lo = base;
        let hi = shape.last_addr(base);
        let overlapping: Vec<usize> = (0..self.slots.len())
            .filter(|&s| self.slots[s].as_ref().is_some_and(|e| ranges_overlap(e.base, &e.shape, base, &shape)))
            .collect();
        if overlapping.iter().any(|&s| self.slots[s].as_ref().unwrap().uf) {
            self.deferred.push(PendingHint { base, shape });
            self.stats.hints_deferred += 1;
            return Ok(HintOutcome::Deferred);
        }
        let vn = fetch(base, cost)?;
        if let [s] = overlapping[..] {
            let e = self.slots[s].as_mut().unwrap();
            if e.base == base && e.shape == shape && e.vn == vn {
                if mac.is_some() {
                    e.mac = mac;
                }
                return Ok(HintOutcome::NoOp);
            }
        }
        for s in overlapping {
            self.remove(s);
        }
        self.purge_filter_range(lo, hi);
        match self.allocate(base, shape, vn, mac) {
            Some(slot) => {
                self.stats.hints_installed += 1;
                self.try_merge(slot);
                Ok(HintOutcome::Installed)
            }
            None => Ok(HintOutcome::TableFull),
        }
    }

    pub fn deferred_hints(&self) -> usize {
        self.deferred.len()
    }

    /// Retries hints deferred behind in-progress updates.
    pub fn retry_deferred_hints(
        &mut self,
        cost: &mut CostReport,
        mut fetch: impl FnMut(u64, &mut CostReport) -> Result<VersionNumber>,
    ) -> Result<usize> {
        let pending = std::mem::take(&mut self.deferred);
        let mut installed = 0;
        for h in pending {
            if self.install_hint(h.base, h.shape, None, cost, &mut fetch)? != HintOutcome::Deferred {
                installed += 1;
                self.stats.hints_deferred -= 1;
            } else {
                // The retry re-queued it; do not count it twice.
                self.stats.hints_deferred -= 1;
            }
        }
        Ok(installed)
    }

    // ---- context switching ----

    pub fn save_context(&mut self, enclave: u64) {
        let ctx = SavedContext {
            slots: std::mem::replace(&mut self.slots, vec![None; self.cfg.table_entries]),
            filter: std::mem::take(&mut self.filter),
            deferred: std::mem::take(&mut self.deferred),
        };
        self.mru.clear();
        self.rebuild_index();
        self.saved.insert(enclave, ctx);
    }

    /// Restores a saved table; an unknown enclave starts empty.
    pub fn restore_context(&mut self, enclave: u64) {
        self.mru.clear();
        match self.saved.remove(&enclave) {
            Some(ctx) => {
                self.slots = ctx.slots;
                self.filter = ctx.filter;
                self.deferred = ctx.deferred;
            }
            None => {
                self.slots = vec![None; self.cfg.table_entries];
                self.filter.clear();
                self.deferred.clear();
            }
        }
        self.rebuild_index();
    }

    pub fn context_switch(&mut self, from: u64, to: u64) {
        self.save_context(from);
        self.restore_context(to);
    }

    // ---- inspection ----

    pub fn dump(&self) -> Vec<EntryDump> {
        self.entries()
            .map(|e| EntryDump {
                base: e.base,
                dims: match e.shape.ndim() {
                    1 => vec![e.shape.d0],
                    2 => vec![e.shape.d0, e.shape.d1],
                    _ => vec![e.shape.d0, e.shape.d1, e.shape.d2],
                },
                stride: if e.shape.ndim() == 1 { LINE_BYTES } else { e.shape.row_stride },
                vn: e.vn.get(),
                uf: e.uf,
                bs: e.bs,
                valid: true,
            })
            .collect()
    }

    pub fn dump_json(&self) -> String {
        serde_json::to_string_pretty(&self.dump()).expect("entry dump serializes")
    }

    /// No address covered by two entries.
    pub fn check_disjoint(&self) -> std::result::Result<(), String> {
        let mut seen = HashSet::new();
        for e in self.entries() {
            for a in e.shape.addrs(e.base) {
                if !seen.insert(a) {
                    return Err(format!("address {a:#x} covered twice"));
                }
            }
        }
        Ok(())
    }

    /// Every covered line's reader-visible VN equals the off-chip VN.
    pub fn check_consistency(&self, mut offchip: impl FnMut(u64) -> VersionNumber) -> std::result::Result<(), String> {
        for e in self.entries() {
            for (i, a) in e.shape.addrs(e.base).enumerate() {
                let want = offchip(a);
                let got = e.element_vn(i as u64);
                if got != want {
                    return Err(format!("line {a:#x}: entry vn {} != off-chip vn {}", got.get(), want.get()));
                }
            }
        }
        Ok(())
    }
}

/// Dense off-chip VN store for crypto-free replays.
#[derive(Debug, Clone)]
pub struct VnOracle {
    base: u64,
    vns: Vec<u64>,
}

impl VnOracle {
    pub fn new(base: u64, bytes: u64) -> Self {
        VnOracle { base, vns: vec![0; bytes.div_ceil(LINE_BYTES) as usize] }
    }

    fn idx(&self, va: u64) -> usize {
        ((va - self.base) / LINE_BYTES) as usize
    }

    pub fn get(&self, va: u64) -> VersionNumber {
        VersionNumber::new(self.vns[self.idx(va)])
    }

    pub fn set(&mut self, va: u64, vn: VersionNumber) {
        let i = self.idx(va);
        self.vns[i] = vn.get();
    }

    /// Applies a read through `ta`, charging a VN-line fetch on the off-chip path.
    pub fn read(&mut self, ta: &mut TenAnalyzer, va: u64) -> ReadKind {
        let mut cost = CostReport::default();
        let this = &*self;
        ta.read(va, &mut cost, |a, c| {
            c.vn_bytes += LINE_BYTES;
            Ok(this.get(a))
        })
        .expect("oracle fetch is infallible")
        .1
    }

    /// Applies a write through `ta` and updates the off-chip VN accordingly.
    pub fn write(&mut self, ta: &mut TenAnalyzer, va: u64) -> WriteOutcome {
        let mut cost = CostReport::default();
        let out = ta.on_write(va, &mut cost);
        let vn = out.tracked_vn().unwrap_or_else(|| self.get(va).next());
        self.set(va, vn);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ta() -> TenAnalyzer {
        TenAnalyzer::new(TenAnalyzerConfig::default())
    }

    fn vn(v: u64) -> VersionNumber {
        VersionNumber::new(v)
    }

    fn install(t: &mut TenAnalyzer, base: u64, shape: Shape, v: u64) {
        let mut c = CostReport::default();
        assert_eq!(t.install_hint(base, shape, None, &mut c, |_, _| Ok(vn(v))).unwrap(), HintOutcome::Installed);
    }

    #[test]
    fn shape_indexing_round_trips() {
        let s = Shape::planes(4, 3, 0x400, 2, 0x2000);
        assert_eq!(s.lines(), 24);
        for i in 0..24 {
            assert_eq!(s.index_of(0x1000, s.addr_of(0x1000, i)), Some(i));
        }
        assert_eq!(s.index_of(0x1000, 0x1000 + 4 * 64), None);
        assert_eq!(s.last_addr(0), 0x2000 + 2 * 0x400 + 3 * 64);
    }

    #[test]
    fn contiguous_rows_normalize_to_linear() {
        assert_eq!(Shape::rows(4, 8, 256), Shape::linear(32));
        assert_eq!(Shape::planes(4, 2, 0x400, 3, 0x800), Shape::rows(4, 6, 0x400));
    }

    #[test]
    fn read_hit_in_and_boundary_extension() {
        let mut t = ta();
        install(&mut t, 0x1000, Shape::linear(64), 5);
        let mut c = CostReport::default();
        assert_eq!(t.on_read(0x1040, &mut c), VnResolution::HitIn(vn(5)));
        let (v, k) = t.read(0x2000, &mut c, |_, _| Ok(vn(5))).unwrap();
        assert_eq!((v, k), (vn(5), ReadKind::HitBoundary));
        assert_eq!(t.entry_containing(0x1000).unwrap().shape.lines(), 65);
    }

    #[test]
    fn boundary_mismatch_is_mispredict_without_extension() {
        let mut t = ta();
        install(&mut t, 0x1000, Shape::linear(64), 5);
        let mut c = CostReport::default();
        let (v, k) = t.read(0x2000, &mut c, |_, _| Ok(vn(4))).unwrap();
        assert_eq!((v, k), (vn(4), ReadKind::Mispredict));
        assert_eq!(t.entry_containing(0x1000).unwrap().shape.lines(), 64);
        assert!(t.entry_containing(0x2000).is_none());
    }

    #[test]
    fn four_strided_misses_promote() {
        let mut t = ta();
        let mut c = CostReport::default();
        for a in [0x9000u64, 0x9040, 0x9080, 0x90c0] {
            let (_, k) = t.read(a, &mut c, |_, _| Ok(vn(7))).unwrap();
            assert_eq!(k, ReadKind::Miss);
        }
        let e = t.entry_containing(0x9000).unwrap();
        assert_eq!((e.base, e.shape, e.vn), (0x9000, Shape::linear(4), vn(7)));
    }

    #[test]
    fn stride_break_and_mixed_vn_do_not_promote() {
        let mut t = ta();
        for a in [0x0u64, 0x40, 0x100, 0x140] {
            t.filter_collect(a, vn(7));
        }
        assert_eq!(t.valid_entries(), 0);
        let mut t = ta();
        for (a, v) in [(0x0u64, 7), (0x40, 7), (0x80, 8), (0xc0, 7)] {
            t.filter_collect(a, vn(v));
        }
        assert_eq!(t.valid_entries(), 0);
    }

    #[test]
    fn strided_column_promotes_as_rows() {
        let mut t = ta();
        for r in 0..4u64 {
            t.filter_collect(r * 0x400, vn(1));
        }
        assert_eq!(t.entry_containing(0xc00).unwrap().shape, Shape::rows(1, 4, 0x400));
    }

    #[test]
    fn two_rows_merge_into_2d() {
        let mut t = ta();
        for a in [0x0u64, 0x40, 0x80, 0xc0, 0x400, 0x440, 0x480, 0x4c0] {
            t.filter_collect(a, vn(3));
        }
        assert_eq!(t.valid_entries(), 1);
        let e = t.entry_containing(0x4c0).unwrap();
        assert_eq!((e.base, e.shape), (0, Shape::rows(4, 2, 0x400)));
    }

    #[test]
    fn vn_mismatch_blocks_merge() {
        let mut t = ta();
        for a in [0x0u64, 0x40, 0x80, 0xc0] {
            t.filter_collect(a, vn(5));
        }
        for a in [0x400u64, 0x440, 0x480, 0x4c0] {
            t.filter_collect(a, vn(6));
        }
        assert_eq!(t.valid_entries(), 2);
    }

    #[test]
    fn horizontal_tiles_collapse_to_linear() {
        let mut t = ta();
        install(&mut t, 0, Shape::rows(8, 4, 0x400), 2);
        install(&mut t, 0x200, Shape::rows(8, 4, 0x400), 2);
        assert_eq!(t.valid_entries(), 1);
        assert_eq!(t.entry_containing(0).unwrap().shape, Shape::linear(64));
    }

    #[test]
    fn complete_update_advances_vn() {
        let mut t = ta();
        install(&mut t, 0, Shape::linear(4), 5);
        let mut c = CostReport::default();
        assert_eq!(t.on_write(0x0, &mut c), WriteOutcome::HitEdgeStart { vn: vn(6) });
        assert_eq!(t.on_write(0x40, &mut c), WriteOutcome::HitIn { vn: vn(6) });
        assert_eq!(t.on_write(0x80, &mut c), WriteOutcome::HitIn { vn: vn(6) });
        assert!(matches!(t.on_write(0xc0, &mut c), WriteOutcome::HitEdgeFinish { vn: v, .. } if v == vn(6)));
        let e = t.entry_containing(0).unwrap();
        assert_eq!((e.vn, e.uf, e.bs), (vn(6), false, true));
    }

    #[test]
    fn double_write_invalidates() {
        let mut t = ta();
        install(&mut t, 0, Shape::linear(4), 5);
        let mut c = CostReport::default();
        t.on_write(0x0, &mut c);
        t.on_write(0x40, &mut c);
        assert_eq!(t.on_write(0x40, &mut c), WriteOutcome::Invalidate(InvalidateReason::DoubleUpdate));
        assert_eq!(t.valid_entries(), 0);
    }

    #[test]
    fn incomplete_update_invalidates() {
        let mut t = ta();
        install(&mut t, 0, Shape::linear(4), 5);
        let mut c = CostReport::default();
        t.on_write(0x0, &mut c);
        t.on_write(0x40, &mut c);
        assert_eq!(t.on_write(0xc0, &mut c), WriteOutcome::Invalidate(InvalidateReason::Incomplete));
    }

    #[test]
    fn write_before_start_invalidates() {
        let mut t = ta();
        install(&mut t, 0, Shape::linear(4), 5);
        let mut c = CostReport::default();
        assert_eq!(t.on_write(0x80, &mut c), WriteOutcome::Invalidate(InvalidateReason::NotStarted));
    }

    #[test]
    fn reads_mid_update_see_per_line_vn() {
        let mut t = ta();
        install(&mut t, 0, Shape::linear(4), 5);
        let mut c = CostReport::default();
        t.on_write(0x0, &mut c);
        assert_eq!(t.on_read(0x0, &mut c), VnResolution::HitIn(vn(6)));
        assert_eq!(t.on_read(0x40, &mut c), VnResolution::HitIn(vn(5)));
    }

    #[test]
    fn hints_noop_absorb_and_defer() {
        let mut t = ta();
        let mut c = CostReport::default();
        install(&mut t, 0, Shape::linear(16), 1);
        assert_eq!(t.install_hint(0, Shape::linear(16), None, &mut c, |_, _| Ok(vn(1))).unwrap(), HintOutcome::NoOp);
        install(&mut t, 0x1000, Shape::rows(4, 4, 0x400), 2);
        install(&mut t, 0x1100, Shape::rows(4, 4, 0x400), 3);
        let before = t.valid_entries();
        install(&mut t, 0x1000, Shape::rows(8, 4, 0x400), 4);
        assert_eq!(t.valid_entries(), before - 1);
        t.on_write(0, &mut c);
        assert_eq!(
            t.install_hint(0, Shape::linear(32), None, &mut c, |_, _| Ok(vn(1))).unwrap(),
            HintOutcome::Deferred
        );
        for i in 1..16 {
            t.on_write(i * 64, &mut c);
        }
        assert_eq!(t.retry_deferred_hints(&mut c, |_, _| Ok(vn(2))).unwrap(), 1);
        assert_eq!(t.entry_containing(0x7c0).unwrap().vn, vn(2));
    }

    #[test]
    fn context_switch_round_trip_and_unknown_enclave() {
        let mut t = ta();
        install(&mut t, 0, Shape::linear(16), 1);
        let before = t.dump_json();
        t.context_switch(1, 2);
        assert_eq!(t.valid_entries(), 0);
        t.context_switch(2, 1);
        assert_eq!(t.dump_json(), before);
    }

    #[test]
    fn en_tmf_off_is_always_miss() {
        let mut t = ta();
        install(&mut t, 0, Shape::linear(16), 1);
        t.set_en_tmf(false);
        let mut c = CostReport::default();
        assert_eq!(t.on_read(0, &mut c), VnResolution::Miss);
        assert_eq!(t.on_write(0, &mut c), WriteOutcome::Miss);
    }

    #[test]
    fn table_evicts_lru_idle_entry() {
        let mut t = TenAnalyzer::new(TenAnalyzerConfig { table_entries: 2, ..Default::default() });
        let mut c = CostReport::default();
        install(&mut t, 0, Shape::linear(4), 1);
        install(&mut t, 0x10000, Shape::linear(4), 2);
        t.on_read(0, &mut c);
        install(&mut t, 0x20000, Shape::linear(4), 3);
        assert!(t.entry_containing(0).is_some());
        assert!(t.entry_containing(0x10000).is_none());
        assert_eq!(t.stats.evictions, 1);
    }

    #[test]
    fn dump_has_expected_fields() {
        let mut t = ta();
        install(&mut t, 0x40, Shape::rows(2, 3, 0x400), 9);
        let v: serde_json::Value = serde_json::from_str(&t.dump_json()).unwrap();
        let e = &v[0];
        assert_eq!(e["base"], 0x40);
        assert_eq!(e["dims"], serde_json::json!([2, 3]));
        assert_eq!(e["stride"], 0x400);
        assert_eq!(e["vn"], 9);
        assert_eq!(e["valid"], true);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Read(u64),
        Write(u64),
        Sweep(u64, u64),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            3 => (0u64..256).prop_map(Op::Read),
            2 => (0u64..256).prop_map(Op::Write),
            1 => (0u64..256, 1u64..48).prop_map(|(s, n)| Op::Sweep(s, n)),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn random_traffic_keeps_invariants(ops in proptest::collection::vec(op(), 1..200)) {
            let mut t = TenAnalyzer::new(TenAnalyzerConfig { table_entries: 8, ..Default::default() });
            let mut o = VnOracle::new(0, 512 * 64);
            for op in ops {
                match op {
                    Op::Read(l) => { o.read(&mut t, l * 64); }
                    Op::Write(l) => { o.write(&mut t, l * 64); }
                    Op::Sweep(s, n) => {
                        for l in s..(s + n).min(512) { o.read(&mut t, l * 64); }
                        for l in s..(s + n).min(512) { o.write(&mut t, l * 64); }
                    }
                }
                prop_assert!(t.check_disjoint().is_ok());
                let r = t.check_consistency(|a| o.get(a));
                prop_assert!(r.is_ok(), "{:?}", r);
            }
        }

        #[test]
        fn repeated_trace_hit_rate_is_monotone(start in 0u64..64, len in 8u64..200, reps in 2usize..5) {
            let mut t = ta();
            let mut o = VnOracle::new(0, 512 * 64);
            let mut last = -1.0f64;
            for _ in 0..reps {
                t.stats = TaStats::default();
                for l in start..start + len { o.read(&mut t, l * 64); }
                let r = t.stats.hit_in_rate();
                prop_assert!(r >= last);
                last = r;
            }
        }
    }
}
