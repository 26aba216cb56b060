//! Merkle-Patricia trie over 32-byte keys, walked as 64 hex nibbles.
//!
//! Nodes are content addressed: every child reference is the digest of the
//! child's canonical encoding, and nodes are never inlined. The trie itself
//! is generic over a [`NodeStore`], so the same code runs over the
//! operator's full node set and over a [`PartialState`] shipped into the
//! enclave. Reaching a node the store lacks yields
//! [`MptError::MissingNode`] instead of a wrong answer.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::crypto::{hash, Digest};

const BRANCH_TAG: u8 = 0x00;
const SHORT_TAG: u8 = 0x01;
const HP_EXTENSION: u8 = 0;
const HP_LEAF: u8 = 2;

/// Root of the trie with no entries.
pub fn empty_root() -> Digest {
    hash(b"")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MptError {
    #[error("node {0:?} is not available")]
    MissingNode(Digest),
    #[error("partial state node stored under wrong digest {0:?}")]
    Integrity(Digest),
    #[error("key {0:?} is not covered by the partial state")]
    Uncovered(Digest),
    #[error("partial state carries node {0:?} unreachable from its root")]
    Orphan(Digest),
    #[error("partial state root {found:?} does not match expected {expected:?}")]
    RootMismatch { expected: Digest, found: Digest },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
// Branches dominate any sizeable trie, so boxing them would only add an
// allocation per node.
#[allow(clippy::large_enum_variant)]
pub enum MptNode {
    Leaf {
        path: Vec<u8>,
        #[serde(with = "crate::codec::hex_bytes")]
        value: Vec<u8>,
    },
    Extension {
        path: Vec<u8>,
        child: Digest,
    },
    Branch {
        children: [Option<Digest>; 16],
        #[serde(with = "crate::codec::opt_hex_bytes")]
        value: Option<Vec<u8>>,
    },
}

/// Hex-prefix packing of a nibble path: the first nibble holds the
/// leaf/extension marker plus an odd-length flag, then nibbles are packed
/// two per byte.
fn hp_encode(path: &[u8], marker: u8) -> Vec<u8> {
    let odd = path.len() % 2;
    let mut out = Vec::with_capacity(path.len() / 2 + 1);
    let mut rest = path;
    if odd == 1 {
        out.push(((marker + 1) << 4) | path[0]);
        rest = &path[1..];
    } else {
        out.push(marker << 4);
    }
    for pair in rest.chunks(2) {
        out.push((pair[0] << 4) | pair[1]);
    }
    out
}

fn hp_decode(bytes: &[u8]) -> Result<(Vec<u8>, u8), DecodeError> {
    let (&first, rest) = bytes.split_first().ok_or(DecodeError::Malformed("empty path"))?;
    let flag = first >> 4;
    if flag > 3 {
        return Err(DecodeError::BadTag { what: "hex-prefix flag", tag: first });
    }
    let mut path = Vec::with_capacity(rest.len() * 2 + 1);
    if flag % 2 == 1 {
        path.push(first & 0x0f);
    } else if first & 0x0f != 0 {
        return Err(DecodeError::Malformed("hex-prefix padding"));
    }
    for b in rest {
        path.push(b >> 4);
        path.push(b & 0x0f);
    }
    Ok((path, flag & !1))
}

/// Layout: branch = `0x00 || bitmap u16 || child digests (ascending nibble) ||
/// optional value`; leaf or extension = `0x01 || hex-prefix path (length
/// prefixed) || value bytes | child digest`.
impl Canonical for MptNode {
    fn encode_into(&self, enc: &mut Encoder) {
        match self {
            MptNode::Branch { children, value } => {
                let bitmap = children
                    .iter()
                    .enumerate()
                    .fold(0u16, |m, (i, c)| if c.is_some() { m | (1 << i) } else { m });
                enc.u8(BRANCH_TAG).u16(bitmap);
                for c in children.iter().flatten() {
                    enc.digest(c);
                }
                enc.opt_bytes(value.as_deref());
            }
            MptNode::Leaf { path, value } => {
                enc.u8(SHORT_TAG).bytes(&hp_encode(path, HP_LEAF)).bytes(value);
            }
            MptNode::Extension { path, child } => {
                enc.u8(SHORT_TAG).bytes(&hp_encode(path, HP_EXTENSION)).digest(child);
            }
        }
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        match dec.u8()? {
            BRANCH_TAG => {
                let bitmap = dec.u16()?;
                let mut children = [None; 16];
                for (i, c) in children.iter_mut().enumerate() {
                    if bitmap & (1 << i) != 0 {
                        *c = Some(dec.digest()?);
                    }
                }
                Ok(MptNode::Branch { children, value: dec.opt_bytes()? })
            }
            SHORT_TAG => {
                let (path, marker) = hp_decode(&dec.bytes()?)?;
                if marker == HP_LEAF {
                    Ok(MptNode::Leaf { path, value: dec.bytes()? })
                } else {
                    Ok(MptNode::Extension { path, child: dec.digest()? })
                }
            }
            tag => Err(DecodeError::BadTag { what: "trie node", tag }),
        }
    }
}

impl MptNode {
    pub fn digest(&self) -> Digest {
        hash(&self.encode())
    }
}

/// Content-addressed node storage.
pub trait NodeStore {
    fn get(&self, digest: &Digest) -> Option<&MptNode>;
    fn put(&mut self, node: MptNode) -> Digest;
}

impl NodeStore for HashMap<Digest, MptNode> {
    fn get(&self, digest: &Digest) -> Option<&MptNode> {
        HashMap::get(self, digest)
    }

    fn put(&mut self, node: MptNode) -> Digest {
        let d = node.digest();
        self.insert(d, node);
        d
    }
}

impl NodeStore for BTreeMap<Digest, MptNode> {
    fn get(&self, digest: &Digest) -> Option<&MptNode> {
        BTreeMap::get(self, digest)
    }

    fn put(&mut self, node: MptNode) -> Digest {
        let d = node.digest();
        self.insert(d, node);
        d
    }
}

pub type MemStore = HashMap<Digest, MptNode>;

fn common_prefix(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

fn concat(a: &[u8], b: &[u8]) -> Vec<u8> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

#[derive(Debug, Clone)]
pub struct Trie<S> {
    store: S,
    root: Option<Digest>,
}

impl<S: NodeStore + Default> Default for Trie<S> {
    fn default() -> Self {
        Trie { store: S::default(), root: None }
    }
}

impl<S: NodeStore + Default> Trie<S> {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<S: NodeStore> Trie<S> {
    /// Opens the trie rooted at `root` over an existing store.
    pub fn with_root(store: S, root: Digest) -> Self {
        let root = (root != empty_root()).then_some(root);
        Trie { store, root }
    }

    pub fn root(&self) -> Digest {
        self.root.unwrap_or_else(empty_root)
    }

    pub fn store(&self) -> &S {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut S {
        &mut self.store
    }

    pub fn into_store(self) -> S {
        self.store
    }

    /// Moves the trie to another root held by the same store.
    pub fn set_root(&mut self, root: Digest) {
        self.root = (root != empty_root()).then_some(root);
    }

    /// Adopts a partial state computed elsewhere: stores its nodes and moves
    /// to its root. Nodes outside the partial state are shared with the
    /// current version.
    pub fn absorb(&mut self, ps: PartialState) {
        for node in ps.nodes.into_values() {
            self.store.put(node);
        }
        self.set_root(ps.root);
    }

    fn node(&self, d: &Digest) -> Result<&MptNode, MptError> {
        self.store.get(d).ok_or(MptError::MissingNode(*d))
    }

    pub fn get(&self, key: &Digest) -> Result<Option<Vec<u8>>, MptError> {
        let nibbles = key.nibbles();
        let mut path: &[u8] = &nibbles;
        let mut cur = match self.root {
            Some(r) => r,
            None => return Ok(None),
        };
        loop {
            match self.node(&cur)? {
                MptNode::Leaf { path: lp, value } => {
                    return Ok((lp.as_slice() == path).then(|| value.clone()));
                }
                MptNode::Extension { path: ep, child } => {
                    if !path.starts_with(ep) {
                        return Ok(None);
                    }
                    path = &path[ep.len()..];
                    cur = *child;
                }
                MptNode::Branch { children, value } => match path.split_first() {
                    None => return Ok(value.clone()),
                    Some((n, rest)) => match children[*n as usize] {
                        Some(c) => {
                            path = rest;
                            cur = c;
                        }
                        None => return Ok(None),
                    },
                },
            }
        }
    }

    pub fn insert(&mut self, key: &Digest, value: Vec<u8>) -> Result<Digest, MptError> {
        let nibbles = key.nibbles();
        let root = self.insert_at(self.root, &nibbles, value)?;
        self.root = Some(root);
        Ok(root)
    }

    fn insert_at(
        &mut self,
        node: Option<Digest>,
        path: &[u8],
        value: Vec<u8>,
    ) -> Result<Digest, MptError> {
        let Some(d) = node else {
            return Ok(self.store.put(MptNode::Leaf { path: path.to_vec(), value }));
        };
        match self.node(&d)?.clone() {
            MptNode::Leaf { path: lp, value: lv } => {
                if lp == path {
                    return Ok(self.store.put(MptNode::Leaf { path: lp, value }));
                }
                let c = common_prefix(&lp, path);
                let mut children = [None; 16];
                let mut bvalue = None;
                for (p, v) in [(lp.as_slice(), lv), (path, value)] {
                    match p.get(c) {
                        None => bvalue = Some(v),
                        Some(&n) => {
                            children[n as usize] = Some(
                                self.store.put(MptNode::Leaf { path: p[c + 1..].to_vec(), value: v }),
                            );
                        }
                    }
                }
                let branch = self.store.put(MptNode::Branch { children, value: bvalue });
                Ok(self.wrap(&path[..c], branch))
            }
            MptNode::Extension { path: ep, child } => {
                let c = common_prefix(&ep, path);
                if c == ep.len() {
                    let child = self.insert_at(Some(child), &path[c..], value)?;
                    return Ok(self.store.put(MptNode::Extension { path: ep, child }));
                }
                let mut children = [None; 16];
                let tail = if ep.len() == c + 1 {
                    child
                } else {
                    self.store.put(MptNode::Extension { path: ep[c + 1..].to_vec(), child })
                };
                children[ep[c] as usize] = Some(tail);
                let mut bvalue = None;
                match path.get(c) {
                    None => bvalue = Some(value),
                    Some(&n) => {
                        children[n as usize] = Some(
                            self.store.put(MptNode::Leaf { path: path[c + 1..].to_vec(), value }),
                        );
                    }
                }
                let branch = self.store.put(MptNode::Branch { children, value: bvalue });
                Ok(self.wrap(&path[..c], branch))
            }
            MptNode::Branch { mut children, value: bvalue } => match path.split_first() {
                None => Ok(self.store.put(MptNode::Branch { children, value: Some(value) })),
                Some((&n, rest)) => {
                    children[n as usize] = Some(self.insert_at(children[n as usize], rest, value)?);
                    Ok(self.store.put(MptNode::Branch { children, value: bvalue }))
                }
            },
        }
    }

    fn wrap(&mut self, prefix: &[u8], child: Digest) -> Digest {
        if prefix.is_empty() {
            child
        } else {
            self.store.put(MptNode::Extension { path: prefix.to_vec(), child })
        }
    }

    /// Removes `key`; returns whether it was present.
    pub fn delete(&mut self, key: &Digest) -> Result<bool, MptError> {
        let nibbles = key.nibbles();
        let Some(root) = self.root else {
            return Ok(false);
        };
        match self.delete_at(root, &nibbles)? {
            None => Ok(false),
            Some(new_root) => {
                self.root = new_root;
                Ok(true)
            }
        }
    }

    /// `None` if the key is absent below `d`, otherwise the replacement for
    /// `d` (which is `None` when the subtree became empty).
    fn delete_at(&mut self, d: Digest, path: &[u8]) -> Result<Option<Option<Digest>>, MptError> {
        match self.node(&d)?.clone() {
            MptNode::Leaf { path: lp, .. } => Ok((lp == path).then_some(None)),
            MptNode::Extension { path: ep, child } => {
                if !path.starts_with(&ep) {
                    return Ok(None);
                }
                match self.delete_at(child, &path[ep.len()..])? {
                    None => Ok(None),
                    Some(None) => Ok(Some(None)),
                    Some(Some(c)) => Ok(Some(Some(self.prepend(&ep, c)?))),
                }
            }
            MptNode::Branch { mut children, mut value } => {
                match path.split_first() {
                    None => {
                        if value.take().is_none() {
                            return Ok(None);
                        }
                    }
                    Some((&n, rest)) => {
                        let Some(c) = children[n as usize] else {
                            return Ok(None);
                        };
                        match self.delete_at(c, rest)? {
                            None => return Ok(None),
                            Some(nc) => children[n as usize] = nc,
                        }
                    }
                }
                let live: Vec<usize> = (0..16).filter(|&i| children[i].is_some()).collect();
                let replacement = match (live.as_slice(), &value) {
                    ([], None) => None,
                    ([], Some(v)) => Some(self.store.put(MptNode::Leaf { path: vec![], value: v.clone() })),
                    ([only], None) => {
                        let c = children[*only].expect("live child");
                        Some(self.prepend(&[*only as u8], c)?)
                    }
                    _ => Some(self.store.put(MptNode::Branch { children, value })),
                };
                Ok(Some(replacement))
            }
        }
    }

    /// Node equivalent to an extension by `prefix` in front of `child`,
    /// merging with a short child so no extension points at a short node.
    fn prepend(&mut self, prefix: &[u8], child: Digest) -> Result<Digest, MptError> {
        Ok(match self.node(&child)?.clone() {
            MptNode::Leaf { path, value } => {
                self.store.put(MptNode::Leaf { path: concat(prefix, &path), value })
            }
            MptNode::Extension { path, child } => {
                self.store.put(MptNode::Extension { path: concat(prefix, &path), child })
            }
            MptNode::Branch { .. } => {
                self.store.put(MptNode::Extension { path: prefix.to_vec(), child })
            }
        })
    }

    /// Walks toward `key`, returning the visited nodes and whether the walk
    /// ended at the key's leaf.
    fn walk(&self, key: &Digest) -> Result<(Vec<(Digest, MptNode)>, bool), MptError> {
        let nibbles = key.nibbles();
        let mut path: &[u8] = &nibbles;
        let mut out = Vec::new();
        let Some(mut cur) = self.root else {
            return Ok((out, false));
        };
        loop {
            let node = self.node(&cur)?.clone();
            let next = match &node {
                MptNode::Leaf { path: lp, .. } => {
                    let found = lp.as_slice() == path;
                    out.push((cur, node));
                    return Ok((out, found));
                }
                MptNode::Extension { path: ep, child } => {
                    if path.starts_with(ep) {
                        path = &path[ep.len()..];
                        Some(*child)
                    } else {
                        None
                    }
                }
                MptNode::Branch { children, value } => match path.split_first() {
                    None => {
                        let found = value.is_some();
                        out.push((cur, node));
                        return Ok((out, found));
                    }
                    Some((n, rest)) => {
                        path = rest;
                        children[*n as usize]
                    }
                },
            };
            out.push((cur, node));
            match next {
                Some(c) => cur = c,
                None => return Ok((out, false)),
            }
        }
    }

    pub fn proof(&self, key: &Digest) -> Result<MptProof, MptError> {
        let (nodes, found) = self.walk(key)?;
        Ok(MptProof {
            nodes: nodes.into_iter().map(|(_, n)| n).collect(),
            polarity: if found { Polarity::Inclusion } else { Polarity::Exclusion },
        })
    }

    /// Every node on the paths to `keys`, plus what a later delete of any of
    /// them may need: the surviving sibling of a branch that could collapse.
    pub fn extract(&self, keys: &[Digest]) -> Result<PartialState, MptError> {
        let mut nodes = BTreeMap::new();
        if let Some(r) = self.root {
            let paths: Vec<[u8; 64]> = keys.iter().map(Digest::nibbles).collect();
            let refs: Vec<&[u8]> = paths.iter().map(|p| p.as_slice()).collect();
            self.extract_into(r, &refs, &mut nodes)?;
        }
        let mut covered: Vec<Digest> = keys.to_vec();
        covered.sort();
        covered.dedup();
        Ok(PartialState { root: self.root(), keys: covered, nodes })
    }

    fn extract_into(
        &self,
        d: Digest,
        paths: &[&[u8]],
        out: &mut BTreeMap<Digest, MptNode>,
    ) -> Result<(), MptError> {
        let node = self.node(&d)?.clone();
        match &node {
            MptNode::Leaf { .. } => {}
            MptNode::Extension { path: ep, child } => {
                let below: Vec<&[u8]> = paths
                    .iter()
                    .filter(|p| p.starts_with(ep))
                    .map(|p| &p[ep.len()..])
                    .collect();
                if !below.is_empty() {
                    self.extract_into(*child, &below, out)?;
                }
            }
            MptNode::Branch { children, .. } => {
                let mut groups: [Vec<&[u8]>; 16] = Default::default();
                for p in paths {
                    if let Some((n, rest)) = p.split_first() {
                        groups[*n as usize].push(rest);
                    }
                }
                let uncovered: Vec<Digest> = (0..16)
                    .filter(|&i| groups[i].is_empty())
                    .filter_map(|i| children[i])
                    .collect();
                for (i, g) in groups.iter().enumerate() {
                    if let (Some(c), false) = (children[i], g.is_empty()) {
                        self.extract_into(c, g, out)?;
                    }
                }
                // A partial trie may not hold the sibling, e.g. when an
                // insert split an extension whose child was never read.
                if uncovered.len() <= 1 {
                    for c in uncovered {
                        if let Some(n) = self.store.get(&c) {
                            out.insert(c, n.clone());
                        }
                    }
                }
            }
        }
        out.insert(d, node);
        Ok(())
    }

    /// All `(key, value)` entries in key order.
    pub fn entries(&self) -> Result<Vec<(Digest, Vec<u8>)>, MptError> {
        let mut out = Vec::new();
        if let Some(r) = self.root {
            self.collect(r, &mut Vec::new(), &mut out)?;
        }
        Ok(out)
    }

    fn collect(
        &self,
        d: Digest,
        prefix: &mut Vec<u8>,
        out: &mut Vec<(Digest, Vec<u8>)>,
    ) -> Result<(), MptError> {
        let finish = |p: &[u8], v: &[u8], out: &mut Vec<(Digest, Vec<u8>)>| {
            if p.len() == 64 {
                let mut k = [0u8; 32];
                for (i, b) in k.iter_mut().enumerate() {
                    *b = (p[2 * i] << 4) | p[2 * i + 1];
                }
                out.push((Digest::new(k), v.to_vec()));
            }
        };
        match self.node(&d)?.clone() {
            MptNode::Leaf { path, value } => {
                let full = concat(prefix, &path);
                finish(&full, &value, out);
            }
            MptNode::Extension { path, child } => {
                let n = prefix.len();
                prefix.extend_from_slice(&path);
                self.collect(child, prefix, out)?;
                prefix.truncate(n);
            }
            MptNode::Branch { children, value } => {
                if let Some(v) = value {
                    finish(prefix, &v, out);
                }
                for (i, c) in children.iter().enumerate() {
                    if let Some(c) = c {
                        prefix.push(i as u8);
                        self.collect(*c, prefix, out)?;
                        prefix.pop();
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Inclusion,
    Exclusion,
}

/// Nodes from the root toward a key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MptProof {
    pub nodes: Vec<MptNode>,
    pub polarity: Polarity,
}

enum Walk {
    Found(Vec<u8>),
    Absent,
}

impl MptProof {
    /// Replays the path; `None` if the chain of digests is broken or the
    /// proof does not end where the key's walk ends.
    fn replay(&self, key: &Digest, root: &Digest) -> Option<Walk> {
        if self.nodes.is_empty() {
            return (*root == empty_root()).then_some(Walk::Absent);
        }
        let nibbles = key.nibbles();
        let mut path: &[u8] = &nibbles;
        let mut expect = *root;
        let last = self.nodes.len() - 1;
        for (i, node) in self.nodes.iter().enumerate() {
            if node.digest() != expect {
                return None;
            }
            let next = match node {
                MptNode::Leaf { path: lp, value } => {
                    return (i == last).then(|| {
                        if lp.as_slice() == path {
                            Walk::Found(value.clone())
                        } else {
                            Walk::Absent
                        }
                    });
                }
                MptNode::Extension { path: ep, child } => {
                    if !path.starts_with(ep) {
                        return (i == last).then_some(Walk::Absent);
                    }
                    path = &path[ep.len()..];
                    *child
                }
                MptNode::Branch { children, value } => match path.split_first() {
                    None => {
                        return (i == last).then(|| match value {
                            Some(v) => Walk::Found(v.clone()),
                            None => Walk::Absent,
                        });
                    }
                    Some((n, rest)) => match children[*n as usize] {
                        None => return (i == last).then_some(Walk::Absent),
                        Some(c) => {
                            path = rest;
                            c
                        }
                    },
                },
            };
            expect = next;
        }
        None
    }

    /// The value stored under `key` if this is a valid inclusion proof.
    pub fn verify_inclusion(&self, key: &Digest, root: &Digest) -> Option<Vec<u8>> {
        if self.polarity != Polarity::Inclusion {
            return None;
        }
        match self.replay(key, root)? {
            Walk::Found(v) => Some(v),
            Walk::Absent => None,
        }
    }

    pub fn verify_exclusion(&self, key: &Digest, root: &Digest) -> bool {
        self.polarity == Polarity::Exclusion && matches!(self.replay(key, root), Some(Walk::Absent))
    }
}

impl Canonical for MptProof {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.u8(match self.polarity {
            Polarity::Inclusion => 1,
            Polarity::Exclusion => 0,
        });
        enc.u32(self.nodes.len() as u32);
        for n in &self.nodes {
            n.encode_into(enc);
        }
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let polarity = match dec.u8()? {
            1 => Polarity::Inclusion,
            0 => Polarity::Exclusion,
            tag => return Err(DecodeError::BadTag { what: "proof polarity", tag }),
        };
        let n = dec.count(4)?;
        let nodes = (0..n).map(|_| MptNode::decode_from(dec)).collect::<Result<_, _>>()?;
        Ok(MptProof { nodes, polarity })
    }
}

/// The subset of trie nodes needed to read and rewrite a set of keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialState {
    pub root: Digest,
    pub keys: Vec<Digest>,
    #[serde(with = "node_list")]
    pub nodes: BTreeMap<Digest, MptNode>,
}

mod node_list {
    use super::MptNode;
    use crate::crypto::Digest;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(m: &BTreeMap<Digest, MptNode>, s: S) -> Result<S::Ok, S::Error> {
        m.values().collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<Digest, MptNode>, D::Error> {
        Ok(Vec::<MptNode>::deserialize(d)?
            .into_iter()
            .map(|n| (n.digest(), n))
            .collect())
    }
}

impl PartialState {
    /// Re-hashes every node, checks the root is either empty or present, and
    /// rejects nodes not reachable from the root. An altered node always
    /// hashes to a digest nothing refers to, so it shows up as an orphan.
    pub fn validate(&self) -> Result<(), MptError> {
        for (d, n) in &self.nodes {
            if n.digest() != *d {
                return Err(MptError::Integrity(*d));
            }
        }
        if self.root == empty_root() {
            return match self.nodes.keys().next() {
                Some(d) => Err(MptError::Orphan(*d)),
                None => Ok(()),
            };
        }
        if !self.nodes.contains_key(&self.root) {
            return Err(MptError::MissingNode(self.root));
        }
        let mut seen = BTreeSet::new();
        let mut stack = vec![self.root];
        while let Some(d) = stack.pop() {
            let Some(node) = self.nodes.get(&d) else { continue };
            if !seen.insert(d) {
                continue;
            }
            match node {
                MptNode::Leaf { .. } => {}
                MptNode::Extension { child, .. } => stack.push(*child),
                MptNode::Branch { children, .. } => stack.extend(children.iter().flatten()),
            }
        }
        match self.nodes.keys().find(|d| !seen.contains(d)) {
            Some(d) => Err(MptError::Orphan(*d)),
            None => Ok(()),
        }
    }

    /// Validates and checks the root against an externally trusted value.
    pub fn check_root(&self, expected: &Digest) -> Result<(), MptError> {
        self.validate()?;
        if self.root != *expected {
            return Err(MptError::RootMismatch { expected: *expected, found: self.root });
        }
        Ok(())
    }

    pub fn covers(&self, key: &Digest) -> bool {
        self.keys.binary_search(key).is_ok()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn into_trie(self) -> Trie<BTreeMap<Digest, MptNode>> {
        Trie::with_root(self.nodes, self.root)
    }

    /// Applies writes (`None` deletes) and returns the new root.
    pub fn apply(&self, writes: &[(Digest, Option<Vec<u8>>)]) -> Result<Digest, MptError> {
        self.validate()?;
        if let Some((k, _)) = writes.iter().find(|(k, _)| !self.covers(k)) {
            return Err(MptError::Uncovered(*k));
        }
        let mut trie = self.clone().into_trie();
        for (k, v) in writes {
            match v {
                Some(v) => {
                    trie.insert(k, v.clone())?;
                }
                None => {
                    trie.delete(k)?;
                }
            }
        }
        Ok(trie.root())
    }

    /// Only the nodes reachable from `root` through the covered keys' paths;
    /// drops nodes orphaned by updates.
    pub fn from_trie(
        trie: &Trie<BTreeMap<Digest, MptNode>>,
        keys: Vec<Digest>,
    ) -> Result<PartialState, MptError> {
        trie.extract(&keys)
    }
}

/// Canonical layout: `root || key count u32 || keys || node count u32 ||
/// node encodings`. Node digests are not transmitted; they are recomputed on
/// decode, so an altered node can only ever land under a different digest.
impl Canonical for PartialState {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.digest(&self.root).u32(self.keys.len() as u32);
        for k in &self.keys {
            enc.digest(k);
        }
        enc.u32(self.nodes.len() as u32);
        for n in self.nodes.values() {
            n.encode_into(enc);
        }
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let root = dec.digest()?;
        let nk = dec.count(32)?;
        let keys = (0..nk).map(|_| dec.digest()).collect::<Result<Vec<_>, _>>()?;
        if keys.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DecodeError::Malformed("partial state key order"));
        }
        let nn = dec.count(4)?;
        let mut nodes = BTreeMap::new();
        for _ in 0..nn {
            let n = MptNode::decode_from(dec)?;
            nodes.insert(n.digest(), n);
        }
        Ok(PartialState { root, keys, nodes })
    }
}

/// Collects the digests of all nodes reachable from `root` in `store`.
pub fn reachable<S: NodeStore>(store: &S, root: &Digest) -> Result<BTreeSet<Digest>, MptError> {
    let mut seen = BTreeSet::new();
    if *root == empty_root() {
        return Ok(seen);
    }
    let mut stack = vec![*root];
    while let Some(d) = stack.pop() {
        if !seen.insert(d) {
            continue;
        }
        match store.get(&d).ok_or(MptError::MissingNode(d))? {
            MptNode::Leaf { .. } => {}
            MptNode::Extension { child, .. } => stack.push(*child),
            MptNode::Branch { children, .. } => stack.extend(children.iter().flatten()),
        }
    }
    Ok(seen)
}
