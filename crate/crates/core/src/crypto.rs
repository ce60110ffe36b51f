//! Functional models of the memory-protection primitives.
//!
//! Encryption is counter mode: a 64-byte pad derived from the key, the
//! counter binding and the version number is XORed onto the plaintext. The
//! MAC is a keyed hash over ciphertext, binding and VN truncated to 56 bits.
//! Both are built from a keyed 64-bit mixing function. They are not
//! cryptographically strong, only deterministic with good avalanche.

use serde::{Deserialize, Serialize};

use crate::error::{Error, IntegrityFault, Result};

pub const LINE_BYTES: u64 = 64;
pub const LINE_WORDS: usize = 8;
/// VNs and MAC tags are 56-bit quantities held in 64-bit words.
pub const MASK56: u64 = (1 << 56) - 1;
pub const TREE_ARITY: usize = 8;

const DOMAIN_PAD: u64 = 0x7061_645f_6b73_0001;
const DOMAIN_MAC: u64 = 0x6d61_635f_7461_0002;
const DOMAIN_LEAF: u64 = 0x6c65_6166_5f68_0003;
const DOMAIN_NODE: u64 = 0x6e6f_6465_5f68_0004;
const DOMAIN_KDF: u64 = 0x6b64_665f_6b65_0005;
const DOMAIN_CHAN: u64 = 0x6368_616e_5f6d_0006;
const DOMAIN_MEASURE: u64 = 0x6d65_6173_5f72_0007;
/// Tensor id reserved for channel keystreams.
const CHANNEL_STREAM_ID: u64 = u64::MAX;

/// splitmix64 finalizer; a bijection on u64.
#[inline]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Keyed sponge over 64-bit words. Each absorption step is a bijection of the
/// state for fixed inputs, so changing any single input word always changes
/// the pre-truncation output.
#[inline]
pub(crate) fn keyed_hash(key: u128, domain: u64, words: &[u64]) -> u64 {
    let k0 = key as u64;
    let k1 = (key >> 64) as u64;
    let mut s = mix64(k0 ^ domain);
    for &w in words {
        s = mix64(s ^ w).wrapping_add(k1);
    }
    mix64(s ^ k0 ^ (words.len() as u64).rotate_left(32))
}

/// Per-enclave (or per-session) secret material. Immutable once built.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyMaterial {
    enc_key: u128,
    mac_key: u128,
    seed: u64,
}

impl std::fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyMaterial").field("seed", &self.seed).finish_non_exhaustive()
    }
}

impl KeyMaterial {
    /// Deterministically derives both keys from a seed.
    pub fn from_seed(seed: u64) -> Self {
        let w = |i: u64| keyed_hash(u128::from(seed) << 1 | 1, DOMAIN_KDF, &[seed, i]);
        KeyMaterial {
            enc_key: u128::from(w(0)) | (u128::from(w(1)) << 64),
            mac_key: u128::from(w(2)) | (u128::from(w(3)) << 64),
            seed,
        }
    }

    pub fn from_parts(enc_key: u128, mac_key: u128, seed: u64) -> Self {
        KeyMaterial { enc_key, mac_key, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub(crate) fn mac_key(&self) -> u128 {
        self.mac_key
    }

    /// A digest identifying the key without revealing it (used in tests and
    /// by the handshake model to compare both sides).
    pub fn fingerprint(&self) -> u64 {
        keyed_hash(self.mac_key ^ self.enc_key, DOMAIN_KDF, &[0xf1])
    }
}

/// What the encryption counter is bound to besides the VN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "mode")]
pub enum CounterBinding {
    PhysicalAddr {
        pa: u64,
    },
    /// Binding by tensor identity and byte offset, so ciphertext stays valid
    /// when the tensor moves to a different device address.
    TensorLogical {
        tensor_id: u64,
        offset: u64,
    },
}

impl CounterBinding {
    pub fn physical(pa: u64) -> Self {
        CounterBinding::PhysicalAddr { pa }
    }

    pub fn tensor(tensor_id: u64, offset: u64) -> Self {
        debug_assert_eq!(offset % LINE_BYTES, 0, "tensor offsets are cacheline aligned");
        CounterBinding::TensorLogical { tensor_id, offset }
    }

    fn words(&self) -> [u64; 3] {
        match *self {
            CounterBinding::PhysicalAddr { pa } => [1, pa, 0],
            CounterBinding::TensorLogical { tensor_id, offset } => [2, tensor_id, offset],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VersionNumber(u64);

impl VersionNumber {
    pub const ZERO: VersionNumber = VersionNumber(0);

    pub fn new(v: u64) -> Self {
        VersionNumber(v & MASK56)
    }

    pub fn get(self) -> u64 {
        self.0
    }

    pub fn next(self) -> Self {
        VersionNumber((self.0 + 1) & MASK56)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MacTag(u64);

impl MacTag {
    pub const ZERO: MacTag = MacTag(0);

    pub fn new(v: u64) -> Self {
        MacTag(v & MASK56)
    }

    pub fn get(self) -> u64 {
        self.0
    }
}

impl std::ops::BitXor for MacTag {
    type Output = MacTag;
    fn bitxor(self, rhs: MacTag) -> MacTag {
        MacTag(self.0 ^ rhs.0)
    }
}

impl std::ops::BitXorAssign for MacTag {
    fn bitxor_assign(&mut self, rhs: MacTag) {
        self.0 ^= rhs.0;
    }
}

pub type Line = [u8; LINE_BYTES as usize];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CipherBlock {
    pub bytes: Line,
    pub binding: CounterBinding,
    pub vn: VersionNumber,
}

pub fn keystream(key: &KeyMaterial, binding: CounterBinding, vn: VersionNumber) -> Line {
    let [tag, id, off] = binding.words();
    let mut pad = [0u8; LINE_BYTES as usize];
    for (i, chunk) in pad.chunks_exact_mut(8).enumerate() {
        let w = keyed_hash(key.enc_key, DOMAIN_PAD, &[tag, id, off, vn.get(), i as u64]);
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    pad
}

fn xor_line(a: &Line, b: &Line) -> Line {
    let mut out = [0u8; LINE_BYTES as usize];
    for (o, (x, y)) in out.iter_mut().zip(a.iter().zip(b.iter())) {
        *o = x ^ y;
    }
    out
}

pub fn encrypt_block(plain: &Line, binding: CounterBinding, vn: VersionNumber, key: &KeyMaterial) -> CipherBlock {
    CipherBlock { bytes: xor_line(plain, &keystream(key, binding, vn)), binding, vn }
}

pub fn decrypt_block(c: &CipherBlock, key: &KeyMaterial) -> Line {
    xor_line(&c.bytes, &keystream(key, c.binding, c.vn))
}

pub fn mac_block(c: &CipherBlock, key: &KeyMaterial) -> MacTag {
    let [tag, id, off] = c.binding.words();
    let mut words = [0u64; 4 + LINE_WORDS];
    words[..4].copy_from_slice(&[tag, id, off, c.vn.get()]);
    for (w, chunk) in words[4..].iter_mut().zip(c.bytes.chunks_exact(8)) {
        *w = u64::from_le_bytes(chunk.try_into().unwrap());
    }
    MacTag::new(keyed_hash(key.mac_key, DOMAIN_MAC, &words))
}

/// XOR-folds per-line tags into one tensor tag. Order-insensitive.
pub fn mac_xor_aggregate<'a>(tags: impl IntoIterator<Item = &'a MacTag>) -> Result<MacTag> {
    let mut it = tags.into_iter();
    let first = *it.next().ok_or(Error::EmptyTensor)?;
    Ok(it.fold(first, |acc, t| acc ^ *t))
}

/// Authenticated encryption of a short message: keystream XOR followed by
/// an 8-byte tag over (nonce, length, ciphertext). `nonce` must not repeat
/// under one key.
pub fn seal(key: &KeyMaterial, nonce: u64, msg: &[u8]) -> Vec<u8> {
    let mut out = msg.to_vec();
    apply_stream(key, nonce, &mut out);
    let tag = channel_tag(key, nonce, &out);
    out.extend_from_slice(&tag.to_le_bytes());
    out
}

/// Inverse of [`seal`]; any modification of the sealed bytes is detected.
pub fn open(key: &KeyMaterial, nonce: u64, sealed: &[u8]) -> Result<Vec<u8>, IntegrityFault> {
    if sealed.len() < 8 {
        return Err(IntegrityFault::ChannelTamper);
    }
    let (body, tag) = sealed.split_at(sealed.len() - 8);
    if channel_tag(key, nonce, body).to_le_bytes() != tag {
        return Err(IntegrityFault::ChannelTamper);
    }
    let mut out = body.to_vec();
    apply_stream(key, nonce, &mut out);
    Ok(out)
}

fn apply_stream(key: &KeyMaterial, nonce: u64, buf: &mut [u8]) {
    for (i, chunk) in buf.chunks_mut(LINE_BYTES as usize).enumerate() {
        let pad =
            keystream(key, CounterBinding::tensor(CHANNEL_STREAM_ID, i as u64 * LINE_BYTES), VersionNumber::new(nonce));
        for (b, p) in chunk.iter_mut().zip(pad.iter()) {
            *b ^= p;
        }
    }
}

fn channel_tag(key: &KeyMaterial, nonce: u64, body: &[u8]) -> u64 {
    let mut words = vec![nonce, body.len() as u64];
    for chunk in body.chunks(8) {
        let mut w = [0u8; 8];
        w[..chunk.len()].copy_from_slice(chunk);
        words.push(u64::from_le_bytes(w));
    }
    keyed_hash(key.mac_key, DOMAIN_CHAN, &words)
}

/// Measurement of an enclave image as a platform-keyed digest.
pub fn measure(platform_key: u128, code: &[u8], data: &[u8]) -> u64 {
    let words: Vec<u64> = [code, &[0xff], data]
        .concat()
        .chunks(8)
        .map(|c| {
            let mut w = [0u8; 8];
            w[..c.len()].copy_from_slice(c);
            u64::from_le_bytes(w)
        })
        .collect();
    keyed_hash(platform_key, DOMAIN_MEASURE, &words)
}

/// Eight packed 56-bit VNs; one 64-byte metadata line.
pub type VnLine = [u64; TREE_ARITY];
/// Eight child hashes; one 64-byte tree node.
pub type TreeNode = [u64; TREE_ARITY];

/// 8-ary hash tree over VN lines.
///
/// Leaves and interior nodes live in (modeled) off-chip memory and may be
/// mutated by the adversary through the `*_mut` accessors. Only `root` is
/// on-chip. `levels[0]` holds the parents of the leaves; the last level has a
/// single node whose hash is the root.
#[derive(Debug, Clone)]
pub struct VnTree {
    key: u128,
    leaves: Vec<VnLine>,
    levels: Vec<Vec<TreeNode>>,
    root: u64,
}

/// Off-chip fetches and hash computations performed by one path walk.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PathWalk {
    pub fetched: Vec<(usize, usize)>,
    pub hashes: u32,
}

impl VnTree {
    pub fn new(key: &KeyMaterial, n_leaves: usize) -> Self {
        Self::build(key, vec![[0; TREE_ARITY]; n_leaves.max(1)])
    }

    /// Builds the tree bottom-up over existing VN lines.
    pub fn build(key: &KeyMaterial, leaves: Vec<VnLine>) -> Self {
        assert!(!leaves.is_empty());
        let key = key.mac_key();
        let mut levels: Vec<Vec<TreeNode>> = Vec::new();
        let mut child_hashes: Vec<u64> = leaves.iter().enumerate().map(|(i, l)| hash_leaf(key, i, l)).collect();
        loop {
            let level = levels.len();
            let nodes: Vec<TreeNode> = child_hashes
                .chunks(TREE_ARITY)
                .map(|c| {
                    let mut n = [0u64; TREE_ARITY];
                    n[..c.len()].copy_from_slice(c);
                    n
                })
                .collect();
            child_hashes = nodes.iter().enumerate().map(|(i, n)| hash_node(key, level, i, n)).collect();
            levels.push(nodes);
            if child_hashes.len() == 1 {
                break;
            }
        }
        VnTree { key, leaves, levels, root: child_hashes[0] }
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }

    /// Number of off-chip node levels between a leaf and the on-chip root.
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn leaf(&self, i: usize) -> &VnLine {
        &self.leaves[i]
    }

    pub fn node(&self, level: usize, idx: usize) -> &TreeNode {
        &self.levels[level][idx]
    }

    /// Off-chip write access for the adversary model.
    pub fn leaf_mut(&mut self, i: usize) -> &mut VnLine {
        &mut self.leaves[i]
    }

    pub fn node_mut(&mut self, level: usize, idx: usize) -> &mut TreeNode {
        &mut self.levels[level][idx]
    }

    pub fn leaf_hash(&self, i: usize, value: &VnLine) -> u64 {
        hash_leaf(self.key, i, value)
    }

    pub fn node_hash(&self, level: usize, idx: usize, node: &TreeNode) -> u64 {
        hash_node(self.key, level, idx, node)
    }

    /// Full walk from the stored leaf up to the on-chip root.
    pub fn verify_path(&self, leaf: usize) -> Result<(), IntegrityFault> {
        self.verify_path_with(leaf, &self.leaves[leaf], |_, _| None).map(|_| ())
    }

    /// Verifies `value` as leaf `leaf`. `trusted(level, idx)` returns an
    /// on-chip verified copy of a node when one exists; the walk compares
    /// against it and stops there.
    pub fn verify_path_with(
        &self,
        leaf: usize,
        value: &VnLine,
        trusted: impl Fn(usize, usize) -> Option<TreeNode>,
    ) -> Result<PathWalk, IntegrityFault> {
        let mut walk = PathWalk::default();
        let mut h = hash_leaf(self.key, leaf, value);
        walk.hashes += 1;
        let mut idx = leaf;
        for level in 0..self.levels.len() {
            let slot = idx % TREE_ARITY;
            idx /= TREE_ARITY;
            if let Some(node) = trusted(level, idx) {
                return if node[slot] == h { Ok(walk) } else { Err(IntegrityFault::ReplayOrTamper { leaf, level }) };
            }
            let node = &self.levels[level][idx];
            walk.fetched.push((level, idx));
            if node[slot] != h {
                return Err(IntegrityFault::ReplayOrTamper { leaf, level });
            }
            h = hash_node(self.key, level, idx, node);
            walk.hashes += 1;
        }
        if h == self.root {
            Ok(walk)
        } else {
            Err(IntegrityFault::ReplayOrTamper { leaf, level: self.levels.len() })
        }
    }

    /// Stores `value` as leaf `leaf` and recomputes the path and root.
    /// Returns the `depth()` interior nodes that were rewritten.
    pub fn update_path(&mut self, leaf: usize, value: VnLine) -> Vec<(usize, usize)> {
        self.leaves[leaf] = value;
        let mut h = hash_leaf(self.key, leaf, &value);
        let mut idx = leaf;
        let mut touched = Vec::with_capacity(self.levels.len());
        for level in 0..self.levels.len() {
            let slot = idx % TREE_ARITY;
            idx /= TREE_ARITY;
            self.levels[level][idx][slot] = h;
            touched.push((level, idx));
            h = hash_node(self.key, level, idx, &self.levels[level][idx]);
        }
        self.root = h;
        touched
    }

    /// Sets the VN of data line `line` (8 per leaf) and updates the path.
    pub fn set_vn(&mut self, line: usize, vn: VersionNumber) -> Vec<(usize, usize)> {
        let leaf = line / TREE_ARITY;
        let mut v = self.leaves[leaf];
        v[line % TREE_ARITY] = vn.get();
        self.update_path(leaf, v)
    }
}

fn hash_leaf(key: u128, idx: usize, v: &VnLine) -> u64 {
    let mut w = [0u64; 1 + TREE_ARITY];
    w[0] = idx as u64;
    w[1..].copy_from_slice(v);
    keyed_hash(key, DOMAIN_LEAF, &w)
}

fn hash_node(key: u128, level: usize, idx: usize, n: &TreeNode) -> u64 {
    let mut w = [0u64; 2 + TREE_ARITY];
    w[0] = level as u64;
    w[1] = idx as u64;
    w[2..].copy_from_slice(n);
    keyed_hash(key, DOMAIN_NODE, &w)
}

pub fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
