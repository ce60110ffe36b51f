//! SGX-like cacheline-granularity protected memory: per-line VN and MAC kept
//! off-chip, VN lines authenticated by an 8-ary hash tree whose root is on
//! chip, and an LRU metadata cache of verified VN lines and tree nodes.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::crypto::{
    decrypt_block, encrypt_block, mac_block, CipherBlock, CounterBinding, KeyMaterial, Line, MacTag, TreeNode,
    VersionNumber, VnLine, VnTree, LINE_BYTES, TREE_ARITY,
};
use crate::error::{Error, IntegrityFault, Result};

/// Itemized cost of one or more protected accesses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub data_bytes: u64,
    pub vn_bytes: u64,
    pub mac_bytes: u64,
    pub tree_bytes: u64,
    pub bitmap_bytes: u64,
    pub aes_ops: u64,
    pub mac_ops: u64,
    pub hashes: u64,
    pub tree_fetches: u64,
    pub cycles: u64,
}

impl CostReport {
    pub const CSV_HEADER: &'static str = "op,pa,data_bytes,vn_bytes,mac_bytes,tree_bytes,cycles";

    pub fn metadata_bytes(&self) -> u64 {
        self.vn_bytes + self.mac_bytes + self.tree_bytes + self.bitmap_bytes
    }

    pub fn dram_bytes(&self) -> u64 {
        self.data_bytes + self.metadata_bytes()
    }

    pub fn csv_row(&self, op: &str, pa: u64) -> String {
        format!(
            "{op},{pa:#x},{},{},{},{},{}",
            self.data_bytes, self.vn_bytes, self.mac_bytes, self.tree_bytes, self.cycles
        )
    }
}

impl AddAssign for CostReport {
    fn add_assign(&mut self, o: CostReport) {
        self.data_bytes += o.data_bytes;
        self.vn_bytes += o.vn_bytes;
        self.mac_bytes += o.mac_bytes;
        self.tree_bytes += o.tree_bytes;
        self.bitmap_bytes += o.bitmap_bytes;
        self.aes_ops += o.aes_ops;
        self.mac_ops += o.mac_ops;
        self.hashes += o.hashes;
        self.tree_fetches += o.tree_fetches;
        self.cycles += o.cycles;
    }
}

impl Add for CostReport {
    type Output = CostReport;
    fn add(mut self, o: CostReport) -> CostReport {
        self += o;
        self
    }
}

/// Access latencies in CPU cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Latencies {
    pub dram: u64,
    pub aes: u64,
    pub mac: u64,
    pub hash: u64,
}

impl Default for Latencies {
    fn default() -> Self {
        Latencies { dram: 150, aes: 40, mac: 40, hash: 40 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MetaKey {
    VnLine(usize),
    Node(usize, usize),
    MacLine(usize),
}

/// One LRU pool of on-chip, verified metadata lines.
#[derive(Debug, Clone)]
pub struct MetadataCache {
    capacity: usize,
    entries: HashMap<MetaKey, ([u64; 8], u64)>,
    order: BTreeMap<u64, MetaKey>,
    tick: u64,
    pub hits: u64,
    pub misses: u64,
}

impl MetadataCache {
    pub fn new(capacity_bytes: u64) -> Self {
        MetadataCache {
            capacity: (capacity_bytes / LINE_BYTES) as usize,
            entries: HashMap::new(),
            order: BTreeMap::new(),
            tick: 0,
            hits: 0,
            misses: 0,
        }
    }

    pub fn capacity_lines(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Lookup that refreshes recency.
    pub fn get(&mut self, k: MetaKey) -> Option<[u64; 8]> {
        match self.entries.get_mut(&k) {
            Some((v, stamp)) => {
                self.order.remove(stamp);
                self.tick += 1;
                *stamp = self.tick;
                self.order.insert(self.tick, k);
                self.hits += 1;
                Some(*v)
            }
            None => {
                self.misses += 1;
                None
            }
        }
    }

    /// Lookup without touching recency or counters.
    pub fn peek(&self, k: MetaKey) -> Option<[u64; 8]> {
        self.entries.get(&k).map(|(v, _)| *v)
    }

    pub fn insert(&mut self, k: MetaKey, v: [u64; 8]) {
        if self.capacity == 0 {
            return;
        }
        self.tick += 1;
        if let Some((old, stamp)) = self.entries.get_mut(&k) {
            *old = v;
            self.order.remove(stamp);
            *stamp = self.tick;
        } else {
            if self.entries.len() >= self.capacity {
                let (_, victim) = self.order.pop_first().unwrap();
                self.entries.remove(&victim);
            }
            self.entries.insert(k, (v, self.tick));
        }
        self.order.insert(self.tick, k);
    }

    /// Refreshes a cached copy after a write-through, if present.
    pub fn update_if_present(&mut self, k: MetaKey, v: [u64; 8]) {
        if let Some((old, _)) = self.entries.get_mut(&k) {
            *old = v;
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.order.clear();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OffChipRegion {
    Data,
    Vn,
    Mac,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackKind {
    /// Flip bit `bit` of the given region's storage for the target line.
    BitFlip { region: OffChipRegion, bit: u32 },
    /// Overwrite the line's VN slot with `vn` without touching the tree.
    VnTamper { vn: u64 },
}

/// Off-chip state of one line captured for a later replay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triple {
    pub line: usize,
    pub data: Line,
    pub vn_line: VnLine,
    pub mac: MacTag,
}

#[derive(Debug, Clone, Copy)]
struct TensorRegion {
    n_lines: usize,
    tensor_id: u64,
}

/// Protected DRAM region of the CPU enclave.
#[derive(Debug, Clone)]
pub struct ProtectedMemory {
    key: KeyMaterial,
    base: u64,
    data: Vec<Line>,
    macs: Vec<MacTag>,
    tree: VnTree,
    cache: MetadataCache,
    /// Trusted (on-chip) registry of tensor-logical counter regions, keyed by
    /// first line index.
    tensor_regions: BTreeMap<usize, TensorRegion>,
    lat: Latencies,
    cache_mac_lines: bool,
}

impl ProtectedMemory {
    /// A region of `n_lines` cachelines at `base`, initialized to encrypted
    /// zeros at VN 0.
    pub fn new(key: KeyMaterial, base: u64, n_lines: usize, cache_bytes: u64, lat: Latencies) -> Self {
        assert_eq!(base % LINE_BYTES, 0);
        assert!(n_lines > 0);
        let n_leaves = n_lines.div_ceil(TREE_ARITY);
        let tree = VnTree::new(&key, n_leaves);
        let mut m = ProtectedMemory {
            key,
            base,
            data: vec![[0; 64]; n_lines],
            macs: vec![MacTag::ZERO; n_lines],
            tree,
            cache: MetadataCache::new(cache_bytes),
            tensor_regions: BTreeMap::new(),
            lat,
            cache_mac_lines: false,
        };
        for line in 0..n_lines {
            let c = encrypt_block(&[0; 64], m.binding_for(line), VersionNumber::ZERO, &m.key);
            m.macs[line] = mac_block(&c, &m.key);
            m.data[line] = c.bytes;
        }
        m
    }

    /// Lets MAC lines (8 tags each) occupy the metadata cache. Off in the
    /// SGX-like baseline.
    pub fn set_cache_mac_lines(&mut self, on: bool) {
        self.cache_mac_lines = on;
    }

    pub fn key(&self) -> &KeyMaterial {
        &self.key
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn n_lines(&self) -> usize {
        self.data.len()
    }

    pub fn tree_depth(&self) -> usize {
        self.tree.depth()
    }

    pub fn latencies(&self) -> Latencies {
        self.lat
    }

    pub fn metadata_cache(&self) -> &MetadataCache {
        &self.cache
    }

    /// Models eviction of all on-chip metadata (e.g. pressure from other
    /// enclaves). Not adversarial: on-chip copies are simply dropped.
    pub fn flush_metadata_cache(&mut self) {
        self.cache.clear();
    }

    pub fn contains(&self, pa: u64) -> bool {
        pa >= self.base && pa.is_multiple_of(LINE_BYTES) && ((pa - self.base) / LINE_BYTES) < self.data.len() as u64
    }

    pub fn line_index(&self, pa: u64) -> Result<usize> {
        if self.contains(pa) {
            Ok(((pa - self.base) / LINE_BYTES) as usize)
        } else {
            Err(Error::BadAddress(pa))
        }
    }

    pub fn line_addr(&self, line: usize) -> u64 {
        self.base + line as u64 * LINE_BYTES
    }

    /// Registers `[base_pa, base_pa + n_lines*64)` as tensor `tensor_id`;
    /// lines there use tensor-logical counters. Existing contents are
    /// re-encrypted under the new binding (allocation-time operation).
    pub fn register_tensor_region(&mut self, base_pa: u64, n_lines: usize, tensor_id: u64) -> Result<()> {
        let first = self.line_index(base_pa)?;
        self.line_index(base_pa + (n_lines as u64 - 1) * LINE_BYTES)?;
        let plains: Vec<Line> = (first..first + n_lines).map(|l| self.decrypt_offchip(l)).collect();
        self.tensor_regions.insert(first, TensorRegion { n_lines, tensor_id });
        for (i, p) in plains.iter().enumerate() {
            let line = first + i;
            let vn = self.offchip_vn(line);
            let c = encrypt_block(p, self.binding_for(line), vn, &self.key);
            self.macs[line] = mac_block(&c, &self.key);
            self.data[line] = c.bytes;
        }
        Ok(())
    }

    pub fn binding_for(&self, line: usize) -> CounterBinding {
        if let Some((&first, r)) = self.tensor_regions.range(..=line).next_back() {
            if line < first + r.n_lines {
                return CounterBinding::tensor(r.tensor_id, ((line - first) as u64) * LINE_BYTES);
            }
        }
        CounterBinding::physical(self.line_addr(line))
    }

    /// Unverified off-chip VN; for oracles and tests.
    pub fn offchip_vn(&self, line: usize) -> VersionNumber {
        VersionNumber::new(self.tree.leaf(line / TREE_ARITY)[line % TREE_ARITY])
    }

    fn decrypt_offchip(&self, line: usize) -> Line {
        let c = CipherBlock { bytes: self.data[line], binding: self.binding_for(line), vn: self.offchip_vn(line) };
        decrypt_block(&c, &self.key)
    }

    pub fn raw_line(&self, line: usize) -> &Line {
        &self.data[line]
    }

    pub fn raw_mac(&self, line: usize) -> MacTag {
        self.macs[line]
    }

    /// VN lookup through the metadata cache, fetching and tree-verifying the
    /// VN line on a miss.
    pub fn resolve_vn(&mut self, line: usize, cost: &mut CostReport) -> Result<VersionNumber> {
        let leaf = line / TREE_ARITY;
        if let Some(v) = self.cache.get(MetaKey::VnLine(leaf)) {
            return Ok(VersionNumber::new(v[line % TREE_ARITY]));
        }
        let value = *self.tree.leaf(leaf);
        cost.vn_bytes += LINE_BYTES;
        let cache = &self.cache;
        let walk = self.tree.verify_path_with(leaf, &value, |l, i| cache.peek(MetaKey::Node(l, i)))?;
        // Touch the node that terminated the walk so hot upper levels stay resident.
        let stop_level = walk.fetched.len();
        if stop_level < self.tree.depth() {
            let _ = self.cache.get(MetaKey::Node(stop_level, leaf >> (3 * (stop_level + 1))));
        }
        cost.tree_bytes += walk.fetched.len() as u64 * LINE_BYTES;
        cost.tree_fetches += walk.fetched.len() as u64;
        cost.hashes += u64::from(walk.hashes);
        for &(l, i) in walk.fetched.iter().rev() {
            self.cache.insert(MetaKey::Node(l, i), *self.tree.node(l, i));
        }
        self.cache.insert(MetaKey::VnLine(leaf), value);
        Ok(VersionNumber::new(value[line % TREE_ARITY]))
    }

    fn fetch_mac(&mut self, line: usize, cost: &mut CostReport) -> MacTag {
        let mac_line = line / TREE_ARITY;
        if self.cache_mac_lines {
            if let Some(v) = self.cache.get(MetaKey::MacLine(mac_line)) {
                return MacTag::new(v[line % TREE_ARITY]);
            }
        }
        cost.mac_bytes += LINE_BYTES;
        if self.cache_mac_lines {
            let v = self.mac_line_value(mac_line);
            self.cache.insert(MetaKey::MacLine(mac_line), v);
        }
        self.macs[line]
    }

    fn mac_line_value(&self, mac_line: usize) -> [u64; 8] {
        let mut v = [0u64; 8];
        for (i, slot) in v.iter_mut().enumerate() {
            if let Some(m) = self.macs.get(mac_line * TREE_ARITY + i) {
                *slot = m.get();
            }
        }
        v
    }

    /// Fetch, decrypt and MAC-verify a line with an already known VN.
    pub fn read_line_with_vn(&mut self, pa: u64, vn: VersionNumber, cost: &mut CostReport) -> Result<Line> {
        let line = self.line_index(pa)?;
        cost.data_bytes += LINE_BYTES;
        let c = CipherBlock { bytes: self.data[line], binding: self.binding_for(line), vn };
        cost.aes_ops += 1;
        cost.mac_ops += 1;
        let stored = self.fetch_mac(line, cost);
        if mac_block(&c, &self.key) != stored {
            return Err(IntegrityFault::MacMismatch { addr: pa }.into());
        }
        Ok(decrypt_block(&c, &self.key))
    }

    pub fn read_line(&mut self, pa: u64) -> Result<(Line, CostReport)> {
        let line = self.line_index(pa)?;
        let mut cost = CostReport::default();
        let vn = self.resolve_vn(line, &mut cost)?;
        let plain = self.read_line_with_vn(pa, vn, &mut cost)?;
        cost.cycles = self.read_cycles(&cost);
        Ok((plain, cost))
    }

    /// Critical-path latency of a read: data, VN line and tree nodes are
    /// fetched in parallel, hashes are sequential, the pad waits for the VN.
    pub fn read_cycles(&self, c: &CostReport) -> u64 {
        let l = &self.lat;
        let data_ready = if c.data_bytes > 0 { l.dram } else { 0 };
        let vn_ready = if c.vn_bytes > 0 { l.dram + c.hashes * l.hash } else { 0 };
        let mac_line_ready = if c.mac_bytes > 0 { l.dram } else { 0 };
        let plain = data_ready.max(vn_ready + l.aes);
        let verified = data_ready.max(mac_line_ready).max(vn_ready) + l.mac;
        plain.max(verified)
    }

    fn store(&mut self, line: usize, plain: &Line, vn: VersionNumber) -> MacTag {
        let c = encrypt_block(plain, self.binding_for(line), vn, &self.key);
        let tag = mac_block(&c, &self.key);
        self.data[line] = c.bytes;
        self.macs[line] = tag;
        if self.cache_mac_lines {
            let ml = line / TREE_ARITY;
            let v = self.mac_line_value(ml);
            self.cache.update_if_present(MetaKey::MacLine(ml), v);
        }
        tag
    }

    /// Writes the VN into the off-chip VN line and tree, keeping any cached
    /// on-chip copies coherent. Returns the rewritten tree nodes.
    fn commit_vn(&mut self, line: usize, vn: VersionNumber) -> Vec<(usize, usize)> {
        let touched = self.tree.set_vn(line, vn);
        let leaf = line / TREE_ARITY;
        self.cache.update_if_present(MetaKey::VnLine(leaf), *self.tree.leaf(leaf));
        for &(l, i) in &touched {
            self.cache.update_if_present(MetaKey::Node(l, i), *self.tree.node(l, i));
        }
        touched
    }

    /// Baseline write-back: VN+1, re-encrypt, new MAC, VN line and tree path
    /// written through.
    pub fn write_line(&mut self, pa: u64, plain: &Line) -> Result<CostReport> {
        let line = self.line_index(pa)?;
        let mut cost = CostReport::default();
        let vn = self.resolve_vn(line, &mut cost)?.next();
        self.store(line, plain, vn);
        let touched = self.commit_vn(line, vn);
        cost.data_bytes += LINE_BYTES;
        cost.mac_bytes += LINE_BYTES;
        cost.vn_bytes += LINE_BYTES;
        cost.tree_bytes += touched.len() as u64 * LINE_BYTES;
        cost.hashes += touched.len() as u64 + 1;
        cost.aes_ops += 1;
        cost.mac_ops += 1;
        // Write-backs are off the critical path; charge the engine latencies.
        cost.cycles = self.lat.aes + self.lat.mac;
        Ok(cost)
    }

    /// Write with a VN supplied by on-chip tensor state. Only data and MAC
    /// traffic is charged; the VN/tree write-back is charged in bulk through
    /// [`Self::bulk_vn_update_cost`].
    pub fn write_line_with_vn(
        &mut self,
        pa: u64,
        plain: &Line,
        vn: VersionNumber,
        cost: &mut CostReport,
    ) -> Result<MacTag> {
        let line = self.line_index(pa)?;
        let tag = self.store(line, plain, vn);
        self.commit_vn(line, vn);
        cost.data_bytes += LINE_BYTES;
        cost.aes_ops += 1;
        cost.mac_ops += 1;
        if !self.cache_mac_lines || self.cache.peek(MetaKey::MacLine(line / TREE_ARITY)).is_none() {
            cost.mac_bytes += LINE_BYTES;
        }
        Ok(tag)
    }

    /// Traffic for writing back the VN lines and the union of tree paths
    /// covering `lines`.
    pub fn bulk_vn_update_cost(&self, lines: impl IntoIterator<Item = usize>) -> CostReport {
        let mut leaves = HashSet::new();
        for l in lines {
            leaves.insert(l / TREE_ARITY);
        }
        let mut nodes = HashSet::new();
        for &leaf in &leaves {
            let mut idx = leaf;
            for level in 0..self.tree.depth() {
                idx /= TREE_ARITY;
                nodes.insert((level, idx));
            }
        }
        CostReport {
            vn_bytes: leaves.len() as u64 * LINE_BYTES,
            tree_bytes: nodes.len() as u64 * LINE_BYTES,
            hashes: (leaves.len() + nodes.len()) as u64,
            ..CostReport::default()
        }
    }

    /// Installs a tensor received as ciphertext under tensor-logical counters.
    /// Verifies the tensor-wise MAC before anything is written.
    pub fn install_tensor(
        &mut self,
        base_pa: u64,
        cipher: &[Line],
        vn: VersionNumber,
        tensor_mac: MacTag,
    ) -> Result<CostReport> {
        if cipher.is_empty() {
            return Err(Error::EmptyTensor);
        }
        let first = self.line_index(base_pa)?;
        self.line_index(base_pa + (cipher.len() as u64 - 1) * LINE_BYTES)?;
        let mut cost = CostReport::default();
        let mut tags = Vec::with_capacity(cipher.len());
        for (i, bytes) in cipher.iter().enumerate() {
            let line = first + i;
            if self.offchip_vn(line) >= vn {
                return Err(Error::Protocol(format!("stale tensor VN {} at line {line}", vn.get())));
            }
            let c = CipherBlock { bytes: *bytes, binding: self.binding_for(line), vn };
            tags.push(mac_block(&c, &self.key));
        }
        cost.mac_ops += cipher.len() as u64;
        cost.data_bytes += cipher.len() as u64 * LINE_BYTES;
        if crate::crypto::mac_xor_aggregate(&tags)? != tensor_mac {
            return Err(
                IntegrityFault::TensorMac { tensor_id: self.tensor_id_at(first).unwrap_or(u64::MAX) as u32 }.into()
            );
        }
        for (i, (bytes, tag)) in cipher.iter().zip(&tags).enumerate() {
            let line = first + i;
            self.data[line] = *bytes;
            self.macs[line] = *tag;
            self.commit_vn(line, vn);
            if self.cache_mac_lines {
                let ml = line / TREE_ARITY;
                let v = self.mac_line_value(ml);
                self.cache.update_if_present(MetaKey::MacLine(ml), v);
            }
        }
        cost.mac_bytes += (cipher.len() as u64).div_ceil(TREE_ARITY as u64) * LINE_BYTES;
        cost += self.bulk_vn_update_cost(first..first + cipher.len());
        Ok(cost)
    }

    pub fn tensor_id_at(&self, line: usize) -> Option<u64> {
        match self.binding_for(line) {
            CounterBinding::TensorLogical { tensor_id, .. } => Some(tensor_id),
            CounterBinding::PhysicalAddr { .. } => None,
        }
    }

    /// Raw ciphertext plus per-line MACs for a direct transfer out.
    pub fn export_lines(&self, base_pa: u64, n_lines: usize) -> Result<(Vec<Line>, Vec<MacTag>)> {
        let first = self.line_index(base_pa)?;
        self.line_index(base_pa + (n_lines as u64 - 1) * LINE_BYTES)?;
        Ok((self.data[first..first + n_lines].to_vec(), self.macs[first..first + n_lines].to_vec()))
    }

    // Adversary interface: mutates off-chip state only.

    pub fn inject_attack(&mut self, kind: AttackKind, pa: u64) -> Result<()> {
        let line = self.line_index(pa)?;
        match kind {
            AttackKind::BitFlip { region: OffChipRegion::Data, bit } => {
                let bit = bit as usize % 512;
                self.data[line][bit / 8] ^= 1 << (bit % 8);
            }
            AttackKind::BitFlip { region: OffChipRegion::Mac, bit } => {
                self.macs[line] = MacTag::new(self.macs[line].get() ^ (1 << (bit % 56)));
            }
            AttackKind::BitFlip { region: OffChipRegion::Vn, bit } => {
                self.tree.leaf_mut(line / TREE_ARITY)[line % TREE_ARITY] ^= 1 << (bit % 56);
            }
            AttackKind::VnTamper { vn } => {
                self.tree.leaf_mut(line / TREE_ARITY)[line % TREE_ARITY] = vn & crate::crypto::MASK56;
            }
        }
        Ok(())
    }

    pub fn snapshot_triple(&self, pa: u64) -> Result<Triple> {
        let line = self.line_index(pa)?;
        Ok(Triple { line, data: self.data[line], vn_line: *self.tree.leaf(line / TREE_ARITY), mac: self.macs[line] })
    }

    pub fn replay_triple(&mut self, t: &Triple) {
        self.data[t.line] = t.data;
        *self.tree.leaf_mut(t.line / TREE_ARITY) = t.vn_line;
        self.macs[t.line] = t.mac;
    }

    /// Overwrites an interior tree node off-chip.
    pub fn tamper_tree_node(&mut self, level: usize, idx: usize, node: TreeNode) {
        *self.tree.node_mut(level, idx) = node;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 4096 lines -> 512 VN leaves -> 3 tree levels.
    fn mem() -> ProtectedMemory {
        ProtectedMemory::new(KeyMaterial::from_seed(7), 0, 4096, 32 * 1024, Latencies::default())
    }

    fn line_of(b: u8) -> Line {
        [b; 64]
    }

    #[test]
    fn cold_read_fetches_data_vn_mac_and_full_path() {
        let mut m = mem();
        assert_eq!(m.tree_depth(), 3);
        let (p, c) = m.read_line(0x40).unwrap();
        assert_eq!(p, [0; 64]);
        assert_eq!((c.data_bytes, c.vn_bytes, c.mac_bytes, c.tree_bytes), (64, 64, 64, 3 * 64));
        assert_eq!(c.tree_fetches, 3);
        let (_, c2) = m.read_line(0x40).unwrap();
        assert_eq!((c2.vn_bytes, c2.tree_fetches), (0, 0));
        assert!(c2.cycles < c.cycles);
    }

    #[test]
    fn neighbouring_leaf_stops_at_cached_parent() {
        let mut m = mem();
        m.read_line(0).unwrap();
        // Line 8 is in VN leaf 1, sibling of leaf 0 under the same parent.
        let (_, c) = m.read_line(8 * 64).unwrap();
        assert_eq!((c.vn_bytes, c.tree_fetches), (64, 0));
    }

    #[test]
    fn write_then_read_round_trips_and_bumps_vn() {
        let mut m = mem();
        let c = m.write_line(0x80, &line_of(3)).unwrap();
        assert_eq!(c.tree_bytes, 6 * 64, "cold path fetch plus write-back");
        assert_eq!(m.read_line(0x80).unwrap().0, line_of(3));
        assert_eq!(m.offchip_vn(2), VersionNumber::new(1));
        for i in 0..5 {
            m.write_line(0x80, &line_of(i)).unwrap();
        }
        assert_eq!(m.offchip_vn(2), VersionNumber::new(6));
    }

    #[test]
    fn data_bit_flip_faults() {
        let mut m = mem();
        m.write_line(0x100, &line_of(9)).unwrap();
        m.inject_attack(AttackKind::BitFlip { region: OffChipRegion::Data, bit: 77 }, 0x100).unwrap();
        assert!(matches!(m.read_line(0x100), Err(Error::Integrity(IntegrityFault::MacMismatch { .. }))));
    }

    #[test]
    fn replayed_triple_faults_in_tree() {
        let mut m = mem();
        m.write_line(0x100, &line_of(1)).unwrap();
        let old = m.snapshot_triple(0x100).unwrap();
        m.write_line(0x100, &line_of(2)).unwrap();
        m.replay_triple(&old);
        m.flush_metadata_cache();
        assert!(matches!(m.read_line(0x100), Err(Error::Integrity(IntegrityFault::ReplayOrTamper { .. }))));
    }

    #[test]
    fn vn_tamper_faults_when_not_shadowed() {
        let mut m = mem();
        m.write_line(0x100, &line_of(1)).unwrap();
        m.flush_metadata_cache();
        m.inject_attack(AttackKind::VnTamper { vn: 0 }, 0x100).unwrap();
        assert!(m.read_line(0x100).unwrap_err().integrity().is_some());
    }

    #[test]
    fn vn_tamper_shadowed_by_cache_is_never_consumed() {
        let mut m = mem();
        m.write_line(0x100, &line_of(1)).unwrap();
        m.inject_attack(AttackKind::VnTamper { vn: 0 }, 0x100).unwrap();
        assert_eq!(m.read_line(0x100).unwrap().0, line_of(1));
        m.flush_metadata_cache();
        assert!(m.read_line(0x100).is_err());
    }

    #[test]
    fn mac_flip_faults() {
        let mut m = mem();
        m.inject_attack(AttackKind::BitFlip { region: OffChipRegion::Mac, bit: 3 }, 0).unwrap();
        assert!(m.read_line(0).is_err());
    }

    #[test]
    fn tensor_region_binding_round_trips() {
        let mut m = mem();
        m.write_line(0x1000, &line_of(5)).unwrap();
        m.register_tensor_region(0x1000, 16, 42).unwrap();
        assert_eq!(m.binding_for(0x1000 / 64 + 1), CounterBinding::tensor(42, 64));
        assert_eq!(m.read_line(0x1000).unwrap().0, line_of(5));
    }

    #[test]
    fn install_tensor_checks_aggregate_mac() {
        let mut m = mem();
        m.register_tensor_region(0x2000, 4, 9).unwrap();
        let key = m.key().clone();
        let vn = VersionNumber::new(1);
        let blocks: Vec<CipherBlock> =
            (0..4).map(|i| encrypt_block(&line_of(i), CounterBinding::tensor(9, i as u64 * 64), vn, &key)).collect();
        let tags: Vec<MacTag> = blocks.iter().map(|b| mac_block(b, &key)).collect();
        let agg = crate::crypto::mac_xor_aggregate(&tags).unwrap();
        let mut bytes: Vec<Line> = blocks.iter().map(|b| b.bytes).collect();
        bytes[2][0] ^= 1;
        assert!(m.install_tensor(0x2000, &bytes, vn, agg).is_err());
        bytes[2][0] ^= 1;
        m.install_tensor(0x2000, &bytes, vn, agg).unwrap();
        assert_eq!(m.read_line(0x2000 + 128).unwrap().0, line_of(2));
        assert!(matches!(m.install_tensor(0x2000, &bytes, vn, agg), Err(Error::Protocol(_))));
    }

    #[test]
    fn rejects_misaligned_and_out_of_range() {
        let mut m = mem();
        assert!(matches!(m.read_line(3), Err(Error::BadAddress(3))));
        assert!(m.read_line(4096 * 64).is_err());
    }

    #[test]
    fn cost_csv_row() {
        let c = CostReport {
            data_bytes: 64,
            vn_bytes: 64,
            mac_bytes: 64,
            tree_bytes: 192,
            cycles: 10,
            ..Default::default()
        };
        assert_eq!(c.csv_row("read", 0x40), "read,0x40,64,64,64,192,10");
    }
}
