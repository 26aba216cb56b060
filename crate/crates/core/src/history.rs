//! Append-only versioned history tree over ledger records (block header
//! hashes).
//!
//! Leaves and interior nodes hash exactly like [`crate::merkle`], so the root
//! of version `v` equals the Merkle root of the first `v` records. Version 0
//! has the all-zero root. Only complete ("frozen") subtrees are cached; the
//! root of any version is completed on demand by promoting a lone left child.
//!
//! Proofs are pruned trees: a map from `(level, index)` coordinates to
//! digests. Level 0 entries carry the record itself, higher entries carry
//! frozen subtree hashes. A verifier rebuilds each root it needs from the same
//! node set, which is what binds two versions together.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::crypto::Digest;
use crate::merkle::{leaf_hash, node_hash};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HistoryError {
    #[error("commitment for version {0} does not belong to this tree")]
    UnknownCommitment(u64),
    #[error("old version {old} is newer than {new}")]
    VersionOrder { old: u64, new: u64 },
    #[error("leaf {index} is outside version {version}")]
    IndexOutOfRange { index: u64, version: u64 },
    #[error("proof lacks node at level {level}, index {index}")]
    MissingNode { level: u16, index: u64 },
    #[error("proof node at level {level}, index {index} straddles a version boundary")]
    PartialNode { level: u16, index: u64 },
    #[error("proof carries unused nodes")]
    UnusedNodes,
    #[error("proof does not reveal leaf {0}")]
    SlotMissing(u64),
}

/// A version number together with the tree root at that version.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Commitment {
    pub version: u64,
    pub root: Digest,
}

impl Commitment {
    pub fn genesis() -> Self {
        Commitment { version: 0, root: Digest::ZERO }
    }
}

impl Canonical for Commitment {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.u64(self.version).digest(&self.root);
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Commitment { version: dec.u64()?, root: dec.digest()? })
    }
}

type NodeSet = BTreeMap<(u16, u64), Digest>;

/// Smallest level whose single node spans `version` leaves.
fn top_level(version: u64) -> u16 {
    if version <= 1 {
        0
    } else {
        (64 - (version - 1).leading_zeros()) as u16
    }
}

fn span(level: u16, index: u64) -> (u64, u64) {
    let start = index << level;
    (start, start + (1u64 << level))
}

#[derive(Debug, Clone, Default)]
pub struct HistoryTree {
    records: Vec<Digest>,
    /// `levels[l][i]` is the hash of the complete subtree covering leaves
    /// `i * 2^l .. (i + 1) * 2^l`.
    levels: Vec<Vec<Digest>>,
}

impl HistoryTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn version(&self) -> u64 {
        self.records.len() as u64
    }

    pub fn record(&self, index: u64) -> Option<&Digest> {
        self.records.get(index as usize)
    }

    pub fn add(&mut self, record: Digest) -> Commitment {
        self.records.push(record);
        if self.levels.is_empty() {
            self.levels.push(Vec::new());
        }
        self.levels[0].push(leaf_hash(record.as_bytes()));
        let mut level = 0;
        while self.levels[level].len().is_multiple_of(2) {
            let n = self.levels[level].len();
            let parent = node_hash(&self.levels[level][n - 2], &self.levels[level][n - 1]);
            if self.levels.len() == level + 1 {
                self.levels.push(Vec::new());
            }
            self.levels[level + 1].push(parent);
            level += 1;
        }
        self.commitment()
    }

    /// Drops every record from index `version` on.
    pub fn truncate(&mut self, version: u64) {
        self.records.truncate(version as usize);
        for (l, nodes) in self.levels.iter_mut().enumerate() {
            nodes.truncate((version >> l) as usize);
        }
        while self.levels.last().is_some_and(Vec::is_empty) {
            self.levels.pop();
        }
    }

    pub fn commitment(&self) -> Commitment {
        self.commitment_at(self.version())
            .expect("current version always exists")
    }

    pub fn commitment_at(&self, version: u64) -> Option<Commitment> {
        if version > self.version() {
            return None;
        }
        Some(Commitment { version, root: self.root_at(version) })
    }

    fn root_at(&self, version: u64) -> Digest {
        if version == 0 {
            return Digest::ZERO;
        }
        self.subtree(top_level(version), 0, version)
    }

    fn subtree(&self, level: u16, index: u64, version: u64) -> Digest {
        let (start, end) = span(level, index);
        if end <= version {
            return self.levels[level as usize][index as usize];
        }
        debug_assert!(level > 0 && start < version);
        let left = self.subtree(level - 1, 2 * index, version);
        let (right_start, _) = span(level - 1, 2 * index + 1);
        if right_start >= version {
            left
        } else {
            node_hash(&left, &self.subtree(level - 1, 2 * index + 1, version))
        }
    }

    fn check(&self, c: &Commitment) -> Result<(), HistoryError> {
        match self.commitment_at(c.version) {
            Some(own) if own == *c => Ok(()),
            _ => Err(HistoryError::UnknownCommitment(c.version)),
        }
    }

    /// Collects the pruned node set that rebuilds the roots of every version
    /// in `versions` while exposing the records at `reveal`.
    fn prune(&self, versions: &[u64], reveal: &[u64]) -> NodeSet {
        let mut nodes = NodeSet::new();
        let max = versions.iter().copied().max().unwrap_or(0);
        if max > 0 {
            self.prune_into(top_level(max), 0, max, versions, reveal, &mut nodes);
        }
        nodes
    }

    fn prune_into(
        &self,
        level: u16,
        index: u64,
        max: u64,
        versions: &[u64],
        reveal: &[u64],
        out: &mut NodeSet,
    ) {
        let (start, end) = span(level, index);
        let splits = versions.iter().any(|&v| start < v && v < end);
        let reveals = reveal.iter().any(|&r| start <= r && r < end);
        if level == 0 {
            out.insert((0, index), self.records[index as usize]);
            return;
        }
        if !splits && !reveals {
            out.insert((level, index), self.levels[level as usize][index as usize]);
            return;
        }
        self.prune_into(level - 1, 2 * index, max, versions, reveal, out);
        if span(level - 1, 2 * index + 1).0 < max {
            self.prune_into(level - 1, 2 * index + 1, max, versions, reveal, out);
        }
    }

    /// Proves that the version `new` extends the version `old`. The last leaf
    /// of `new` is revealed so that it can be swapped out by
    /// [`IncrementalProof::set_last_record`].
    pub fn inc_proof(
        &self,
        old: &Commitment,
        new: &Commitment,
    ) -> Result<IncrementalProof, HistoryError> {
        if old.version > new.version {
            return Err(HistoryError::VersionOrder { old: old.version, new: new.version });
        }
        self.check(old)?;
        self.check(new)?;
        let reveal: Vec<u64> = new.version.checked_sub(1).into_iter().collect();
        Ok(IncrementalProof {
            old_version: old.version,
            new_version: new.version,
            nodes: self.prune(&[old.version, new.version], &reveal),
        })
    }

    pub fn mem_proof(&self, index: u64, at: &Commitment) -> Result<MembershipProof, HistoryError> {
        self.check(at)?;
        if index >= at.version {
            return Err(HistoryError::IndexOutOfRange { index, version: at.version });
        }
        Ok(MembershipProof {
            index,
            version: at.version,
            nodes: self.prune(&[at.version], &[index]),
        })
    }

    /// Incremental proof from the current version to one with `placeholder`
    /// appended, plus the commitment of that extended version. The tree is
    /// left as it was.
    pub fn proof_template(&mut self, placeholder: Digest) -> (IncrementalProof, Commitment) {
        let cur = self.commitment();
        let tmp = self.add(placeholder);
        let proof = self.inc_proof(&cur, &tmp).expect("both commitments are genuine");
        self.truncate(cur.version);
        (proof, tmp)
    }
}

/// Rebuilds the root of `version` from a pruned node set, marking every node
/// it consumes.
fn derive_root(
    nodes: &NodeSet,
    version: u64,
    used: &mut BTreeSet<(u16, u64)>,
) -> Result<Digest, HistoryError> {
    if version == 0 {
        return Ok(Digest::ZERO);
    }
    derive_subtree(nodes, top_level(version), 0, version, used)
}

fn derive_subtree(
    nodes: &NodeSet,
    level: u16,
    index: u64,
    version: u64,
    used: &mut BTreeSet<(u16, u64)>,
) -> Result<Digest, HistoryError> {
    let (_, end) = span(level, index);
    if let Some(d) = nodes.get(&(level, index)) {
        if end > version {
            return Err(HistoryError::PartialNode { level, index });
        }
        used.insert((level, index));
        return Ok(if level == 0 { leaf_hash(d.as_bytes()) } else { *d });
    }
    if level == 0 {
        return Err(HistoryError::MissingNode { level, index });
    }
    let left = derive_subtree(nodes, level - 1, 2 * index, version, used)?;
    if span(level - 1, 2 * index + 1).0 >= version {
        return Ok(left);
    }
    let right = derive_subtree(nodes, level - 1, 2 * index + 1, version, used)?;
    Ok(node_hash(&left, &right))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncrementalProof {
    pub old_version: u64,
    pub new_version: u64,
    #[serde(with = "node_list")]
    nodes: NodeSet,
}

impl IncrementalProof {
    pub fn derive_old_root(&self) -> Result<Digest, HistoryError> {
        derive_root(&self.nodes, self.old_version, &mut BTreeSet::new())
    }

    pub fn derive_new_root(&self) -> Result<Digest, HistoryError> {
        derive_root(&self.nodes, self.new_version, &mut BTreeSet::new())
    }

    /// Both roots, rejecting proofs whose node set carries anything neither
    /// derivation needs.
    pub fn derive_roots(&self) -> Result<(Digest, Digest), HistoryError> {
        if self.old_version > self.new_version {
            return Err(HistoryError::VersionOrder { old: self.old_version, new: self.new_version });
        }
        let mut used = BTreeSet::new();
        let old = derive_root(&self.nodes, self.old_version, &mut used)?;
        let new = derive_root(&self.nodes, self.new_version, &mut used)?;
        if used.len() != self.nodes.len() {
            return Err(HistoryError::UnusedNodes);
        }
        Ok((old, new))
    }

    pub fn verify(&self, old: &Commitment, new: &Commitment) -> bool {
        self.old_version == old.version
            && self.new_version == new.version
            && self.derive_roots() == Ok((old.root, new.root))
    }

    /// The record at the newest leaf, if the proof reveals it.
    pub fn last_record(&self) -> Option<&Digest> {
        let index = self.new_version.checked_sub(1)?;
        self.nodes.get(&(0, index))
    }

    /// Overwrites the record at the newest leaf. Only meaningful when that
    /// leaf lies outside the old version, so the old root is unaffected.
    pub fn set_last_record(&mut self, record: Digest) -> Result<(), HistoryError> {
        let index = self.new_version.checked_sub(1).ok_or(HistoryError::SlotMissing(0))?;
        match self.nodes.get_mut(&(0, index)) {
            Some(slot) => {
                *slot = record;
                Ok(())
            }
            None => Err(HistoryError::SlotMissing(index)),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipProof {
    pub index: u64,
    pub version: u64,
    #[serde(with = "node_list")]
    nodes: NodeSet,
}

impl MembershipProof {
    pub fn verify(&self, index: u64, record: &Digest, at: &Commitment) -> bool {
        if self.index != index || self.version != at.version || index >= at.version {
            return false;
        }
        if self.nodes.get(&(0, index)) != Some(record) {
            return false;
        }
        let mut used = BTreeSet::new();
        match derive_root(&self.nodes, self.version, &mut used) {
            Ok(root) => root == at.root && used.len() == self.nodes.len(),
            Err(_) => false,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

/// JSON maps need string keys, so node sets serialize as entry lists.
mod node_list {
    use super::NodeSet;
    use crate::crypto::Digest;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        level: u16,
        index: u64,
        digest: Digest,
    }

    pub fn serialize<S: Serializer>(nodes: &NodeSet, s: S) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = nodes
            .iter()
            .map(|(&(level, index), &digest)| Entry { level, index, digest })
            .collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NodeSet, D::Error> {
        let entries = Vec::<Entry>::deserialize(d)?;
        Ok(entries.into_iter().map(|e| ((e.level, e.index), e.digest)).collect())
    }
}

fn encode_nodes(nodes: &NodeSet, enc: &mut Encoder) {
    enc.u32(nodes.len() as u32);
    for ((level, index), d) in nodes {
        enc.u16(*level).u64(*index).digest(d);
    }
}

fn decode_nodes(dec: &mut Decoder<'_>) -> Result<NodeSet, DecodeError> {
    let n = dec.count(42)?;
    let mut nodes = NodeSet::new();
    let mut prev = None;
    for _ in 0..n {
        let key = (dec.u16()?, dec.u64()?);
        if key.0 >= 64 || prev.is_some_and(|p| p >= key) {
            return Err(DecodeError::Malformed("history proof node order"));
        }
        prev = Some(key);
        nodes.insert(key, dec.digest()?);
    }
    Ok(nodes)
}

/// Wire layout: `old u64 || new u64 || count u32 || (level u16 || index u64 || digest)*`
/// with entries in ascending `(level, index)` order.
impl Canonical for IncrementalProof {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.u64(self.old_version).u64(self.new_version);
        encode_nodes(&self.nodes, enc);
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(IncrementalProof {
            old_version: dec.u64()?,
            new_version: dec.u64()?,
            nodes: decode_nodes(dec)?,
        })
    }
}

/// Wire layout: `index u64 || version u64 || count u32 || entries` as above.
impl Canonical for MembershipProof {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.u64(self.index).u64(self.version);
        encode_nodes(&self.nodes, enc);
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(MembershipProof {
            index: dec.u64()?,
            version: dec.u64()?,
            nodes: decode_nodes(dec)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::hash;
    use proptest::prelude::*;

    fn rec(i: u64) -> Digest {
        hash(&i.to_be_bytes())
    }

    /// Rebuild from scratch: split at the largest power of two below the
    /// length.
    fn oracle_root(xs: &[Digest]) -> Digest {
        fn go(xs: &[Digest]) -> Digest {
            if xs.len() == 1 {
                let mut b = vec![0x01];
                b.extend_from_slice(xs[0].as_bytes());
                return hash(&b);
            }
            let k = 1usize << (usize::BITS - 1 - (xs.len() - 1).leading_zeros());
            let mut b = vec![0x02];
            b.extend_from_slice(go(&xs[..k]).as_bytes());
            b.extend_from_slice(go(&xs[k..]).as_bytes());
            hash(&b)
        }
        if xs.is_empty() {
            Digest::ZERO
        } else {
            go(xs)
        }
    }

    fn build(n: u64) -> (HistoryTree, Vec<Digest>) {
        let mut t = HistoryTree::new();
        let xs: Vec<Digest> = (0..n).map(rec).collect();
        for x in &xs {
            t.add(*x);
        }
        (t, xs)
    }

    fn bound(n: u64) -> usize {
        2 * (n.max(1) as f64).log2().ceil() as usize + 2
    }

    #[test]
    fn first_add() {
        let mut t = HistoryTree::new();
        assert_eq!(t.commitment(), Commitment::genesis());
        let c = t.add(rec(7));
        assert_eq!(c.version, 1);
        assert_eq!(c.root, leaf_hash(rec(7).as_bytes()));
    }

    #[test]
    fn roots_match_rebuild_for_every_prefix() {
        let (t, xs) = build(70);
        for v in 0..=70 {
            assert_eq!(t.commitment_at(v).unwrap().root, oracle_root(&xs[..v as usize]), "v={v}");
        }
        assert!(t.commitment_at(71).is_none());
    }

    #[test]
    fn duplicate_record_changes_root() {
        let mut t = HistoryTree::new();
        let a = t.add(rec(1));
        let b = t.add(rec(1));
        assert_eq!(b.version, 2);
        assert_ne!(a.root, b.root);
        assert_eq!(b.root, oracle_root(&[rec(1), rec(1)]));
    }

    #[test]
    fn truncate_restores_earlier_state() {
        let (mut t, xs) = build(13);
        t.truncate(6);
        assert_eq!(t.commitment().root, oracle_root(&xs[..6]));
        t.add(rec(100));
        let mut ys = xs[..6].to_vec();
        ys.push(rec(100));
        assert_eq!(t.commitment().root, oracle_root(&ys));
    }

    #[test]
    fn inc_proof_same_version() {
        let (t, _) = build(5);
        let c = t.commitment();
        assert!(t.inc_proof(&c, &c).unwrap().verify(&c, &c));
        let g = Commitment::genesis();
        assert!(t.inc_proof(&g, &g).unwrap().verify(&g, &g));
    }

    #[test]
    fn inc_proof_three_to_five() {
        let (t, xs) = build(5);
        let c3 = Commitment { version: 3, root: oracle_root(&xs[..3]) };
        let c5 = Commitment { version: 5, root: oracle_root(&xs) };
        let p = t.inc_proof(&c3, &c5).unwrap();
        assert!(p.verify(&c3, &c5));
        assert_eq!(p.derive_old_root().unwrap(), c3.root);
        assert_eq!(p.derive_new_root().unwrap(), c5.root);
        for k in 0..3 {
            let mut forged = xs[..3].to_vec();
            forged[k] = rec(999);
            let c3f = Commitment { version: 3, root: oracle_root(&forged) };
            assert!(!p.verify(&c3f, &c5));
        }
    }

    #[test]
    fn inc_proof_errors() {
        let (t, _) = build(5);
        let c2 = t.commitment_at(2).unwrap();
        let c4 = t.commitment_at(4).unwrap();
        assert_eq!(
            t.inc_proof(&c4, &c2),
            Err(HistoryError::VersionOrder { old: 4, new: 2 })
        );
        let fake = Commitment { version: 2, root: rec(0) };
        assert_eq!(t.inc_proof(&fake, &c4), Err(HistoryError::UnknownCommitment(2)));
        let future = Commitment { version: 9, root: rec(0) };
        assert_eq!(t.inc_proof(&c2, &future), Err(HistoryError::UnknownCommitment(9)));
    }

    #[test]
    fn every_pair_verifies_within_bound() {
        for n in 0..=33u64 {
            let (t, _) = build(n);
            for i in 0..=n {
                for j in i..=n {
                    let ci = t.commitment_at(i).unwrap();
                    let cj = t.commitment_at(j).unwrap();
                    let p = t.inc_proof(&ci, &cj).unwrap();
                    assert!(p.verify(&ci, &cj), "{i}->{j} of {n}");
                    assert!(p.node_count() <= bound(n), "{i}->{j} of {n}: {}", p.node_count());
                    if j > i {
                        assert!(!p.verify(&cj, &ci));
                    }
                }
            }
        }
    }

    #[test]
    fn membership_sweep() {
        let (t, xs) = build(6);
        let c = t.commitment();
        for i in 0..6 {
            let p = t.mem_proof(i, &c).unwrap();
            assert!(p.verify(i, &xs[i as usize], &c));
            assert!(!p.verify(i, &rec(1000), &c));
            let other = (i + 1) % 6;
            assert!(!p.verify(other, &xs[other as usize], &c));
        }
        assert_eq!(
            t.mem_proof(6, &c),
            Err(HistoryError::IndexOutOfRange { index: 6, version: 6 })
        );
    }

    #[test]
    fn membership_single_leaf() {
        let (t, xs) = build(1);
        let c = t.commitment();
        assert!(t.mem_proof(0, &c).unwrap().verify(0, &xs[0], &c));
    }

    #[test]
    fn membership_is_version_specific() {
        let (t, xs) = build(9);
        for j in 1..9 {
            let cj = t.commitment_at(j).unwrap();
            let next = t.commitment_at(j + 1).unwrap();
            let p = t.mem_proof(0, &cj).unwrap();
            assert!(p.verify(0, &xs[0], &cj));
            assert!(!p.verify(0, &xs[0], &next));
        }
    }

    #[test]
    fn slot_replacement_only_moves_new_root() {
        let (mut t, _) = build(9);
        let cur = t.commitment();
        let (mut p, tmp) = t.proof_template(rec(5000));
        assert_eq!(t.commitment(), cur);
        assert_eq!(tmp.version, cur.version + 1);
        assert_eq!(p.derive_old_root().unwrap(), cur.root);
        assert_eq!(p.derive_new_root().unwrap(), tmp.root);
        assert_eq!(p.last_record(), Some(&rec(5000)));

        p.set_last_record(rec(42)).unwrap();
        assert_eq!(p.derive_old_root().unwrap(), cur.root);
        let new_root = p.derive_new_root().unwrap();
        assert_ne!(new_root, tmp.root);
        t.add(rec(42));
        assert_eq!(t.commitment().root, new_root);
    }

    #[test]
    fn template_on_empty_tree() {
        let mut t = HistoryTree::new();
        let (p, tmp) = t.proof_template(rec(1));
        assert_eq!((p.old_version, p.new_version), (0, 1));
        assert_eq!(p.derive_old_root().unwrap(), Digest::ZERO);
        assert_eq!(tmp.root, leaf_hash(rec(1).as_bytes()));
        assert_eq!(t.version(), 0);
    }

    #[test]
    fn damaged_proofs_fail() {
        let (t, _) = build(11);
        let c4 = t.commitment_at(4).unwrap();
        let c11 = t.commitment();
        let p = t.inc_proof(&c4, &c11).unwrap();
        let keys: Vec<_> = p.nodes.keys().copied().collect();
        for k in &keys {
            let mut q = p.clone();
            q.nodes.remove(k);
            assert!(q.derive_roots().is_err());
            let mut q = p.clone();
            q.nodes.insert(*k, rec(77));
            assert!(!q.verify(&c4, &c11));
        }
        let mut q = p.clone();
        q.nodes.insert((0, 0), rec(0));
        assert_eq!(q.derive_roots(), Err(HistoryError::UnusedNodes));
    }

    #[test]
    fn json_roundtrip() {
        let (t, _) = build(6);
        let p = t.inc_proof(&t.commitment_at(2).unwrap(), &t.commitment()).unwrap();
        let back: IncrementalProof = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn wire_roundtrip_and_order() {
        let (t, _) = build(10);
        let p = t.inc_proof(&t.commitment_at(3).unwrap(), &t.commitment()).unwrap();
        let bytes = p.encode();
        assert_eq!(&bytes[..8], &3u64.to_be_bytes());
        assert_eq!(&bytes[8..16], &10u64.to_be_bytes());
        assert_eq!(bytes.len(), 20 + 42 * p.node_count());
        assert_eq!(IncrementalProof::decode(&bytes).unwrap(), p);

        let m = t.mem_proof(7, &t.commitment()).unwrap();
        assert_eq!(MembershipProof::decode(&m.encode()).unwrap(), m);

        // Swap the first two entries: out of order is rejected.
        let mut swapped = bytes.clone();
        let (a, b) = (20..62, 62..104);
        let first = swapped[a.clone()].to_vec();
        let second = swapped[b.clone()].to_vec();
        swapped[a].copy_from_slice(&second);
        swapped[b].copy_from_slice(&first);
        assert!(IncrementalProof::decode(&swapped).is_err());
        assert!(IncrementalProof::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    /// Any single altered record in the honest history makes every proof
    /// against the honest root fail.
    #[test]
    fn no_forgery_up_to_32_leaves() {
        for n in 1..=32u64 {
            let (t, xs) = build(n);
            let c = t.commitment();
            for k in 0..n as usize {
                let mut forged = HistoryTree::new();
                for (i, x) in xs.iter().enumerate() {
                    forged.add(if i == k { rec(10_000 + i as u64) } else { *x });
                }
                let fc = forged.commitment();
                for i in 0..n {
                    let p = forged.mem_proof(i, &fc).unwrap();
                    assert!(!p.verify(i, forged.record(i).unwrap(), &c));
                }
                for i in 0..=n {
                    let p = forged.inc_proof(&forged.commitment_at(i).unwrap(), &fc).unwrap();
                    assert!(!p.verify(&t.commitment_at(i).unwrap(), &c));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn proofs_verify_and_stay_logarithmic(n in 1u64..300, a in any::<u64>(), b in any::<u64>()) {
            let (t, xs) = build(n);
            let i = a % (n + 1);
            let j = i + b % (n + 1 - i);
            let ci = t.commitment_at(i).unwrap();
            let cj = t.commitment_at(j).unwrap();
            let p = t.inc_proof(&ci, &cj).unwrap();
            prop_assert!(p.verify(&ci, &cj));
            prop_assert!(p.node_count() <= bound(n));
            if j > 0 {
                let k = a % j;
                let m = t.mem_proof(k, &cj).unwrap();
                prop_assert!(m.verify(k, &xs[k as usize], &cj));
                prop_assert!(m.node_count() <= bound(n));
            }
        }
    }
}
