//! Plain Merkle tree over an ordered list, used for the per-block
//! transaction and receipt roots.
//!
//! Hashing is domain separated: the empty list hashes to `h(0x00)`, a leaf
//! is `h(0x01 || x)` and an interior node is `h(0x02 || left || right)`.
//! Levels are built bottom-up by pairing neighbours; an unpaired last node
//! is promoted to the next level unchanged.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::crypto::{hash, hash_parts, Digest};

pub const EMPTY_PREFIX: u8 = 0x00;
pub const LEAF_PREFIX: u8 = 0x01;
pub const NODE_PREFIX: u8 = 0x02;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MerkleError {
    #[error("index {index} out of range for {len} elements")]
    IndexOutOfRange { index: usize, len: usize },
}

/// Which side of the running hash a sibling sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerkleProof {
    pub index: u64,
    pub siblings: Vec<(Digest, Side)>,
}

pub fn empty_root() -> Digest {
    hash(&[EMPTY_PREFIX])
}

pub fn leaf_hash(element: &[u8]) -> Digest {
    hash_parts(&[&[LEAF_PREFIX], element])
}

pub fn node_hash(left: &Digest, right: &Digest) -> Digest {
    hash_parts(&[&[NODE_PREFIX], left.as_bytes(), right.as_bytes()])
}

fn next_level(level: &[Digest]) -> Vec<Digest> {
    level
        .chunks(2)
        .map(|pair| match pair {
            [l, r] => node_hash(l, r),
            [single] => *single,
            _ => unreachable!("chunks(2)"),
        })
        .collect()
}

pub fn mk_root<T: AsRef<[u8]>>(elements: &[T]) -> Digest {
    if elements.is_empty() {
        return empty_root();
    }
    let mut level: Vec<Digest> = elements.iter().map(|e| leaf_hash(e.as_ref())).collect();
    while level.len() > 1 {
        level = next_level(&level);
    }
    level[0]
}

pub fn mk_proof<T: AsRef<[u8]>>(index: usize, elements: &[T]) -> Result<MerkleProof, MerkleError> {
    if index >= elements.len() {
        return Err(MerkleError::IndexOutOfRange { index, len: elements.len() });
    }
    let mut level: Vec<Digest> = elements.iter().map(|e| leaf_hash(e.as_ref())).collect();
    let mut pos = index;
    let mut siblings = Vec::new();
    while level.len() > 1 {
        if pos % 2 == 1 {
            siblings.push((level[pos - 1], Side::Left));
        } else if pos + 1 < level.len() {
            siblings.push((level[pos + 1], Side::Right));
        }
        level = next_level(&level);
        pos /= 2;
    }
    Ok(MerkleProof { index: index as u64, siblings })
}

impl MerkleProof {
    /// Recomputes the root from `element` and checks it against `root`.
    ///
    /// The side flags must also be consistent with the claimed index: a left
    /// sibling means the running position is odd, a right sibling means it
    /// is even, and levels without a sibling are promotions of an even
    /// position.
    pub fn verify(&self, element: &[u8], root: &Digest) -> bool {
        let mut pos = self.index;
        let mut acc = leaf_hash(element);
        for (sib, side) in &self.siblings {
            // Skip promotion levels until the parity matches the next sibling.
            while *side == Side::Left && pos.is_multiple_of(2) {
                if pos == 0 {
                    return false;
                }
                pos /= 2;
            }
            match side {
                Side::Left => acc = node_hash(sib, &acc),
                Side::Right if pos.is_multiple_of(2) => acc = node_hash(&acc, sib),
                Side::Right => return false,
            }
            pos /= 2;
        }
        pos == 0 && acc == *root
    }

    /// Like [`verify`](Self::verify), but also checks that the sibling
    /// layout is exactly the one produced for `index` in a list of
    /// `leaf_count` elements, which pins the index down completely.
    pub fn verify_in(&self, element: &[u8], root: &Digest, leaf_count: u64) -> bool {
        if self.index >= leaf_count {
            return false;
        }
        let mut pos = self.index;
        let mut width = leaf_count;
        let mut expected = Vec::new();
        while width > 1 {
            if pos % 2 == 1 {
                expected.push(Side::Left);
            } else if pos + 1 < width {
                expected.push(Side::Right);
            }
            pos /= 2;
            width = width.div_ceil(2);
        }
        expected.len() == self.siblings.len()
            && expected.iter().zip(&self.siblings).all(|(e, (_, s))| e == s)
            && self.verify(element, root)
    }

    pub fn len(&self) -> usize {
        self.siblings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.siblings.is_empty()
    }
}

/// Wire layout: `index u64 || count u64 || (digest[32] || side u8)*`, side 0 = left, 1 = right.
impl Canonical for MerkleProof {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.u64(self.index).u64(self.siblings.len() as u64);
        for (d, side) in &self.siblings {
            enc.digest(d).u8(match side {
                Side::Left => 0,
                Side::Right => 1,
            });
        }
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let index = dec.u64()?;
        let count = dec.u64()? as usize;
        if count.saturating_mul(33) > dec.remaining() {
            return Err(DecodeError::Truncated(dec.position()));
        }
        let mut siblings = Vec::with_capacity(count);
        for _ in 0..count {
            let d = dec.digest()?;
            let side = match dec.u8()? {
                0 => Side::Left,
                1 => Side::Right,
                tag => return Err(DecodeError::BadTag { what: "merkle side", tag }),
            };
            siblings.push((d, side));
        }
        Ok(MerkleProof { index, siblings })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent recursive definition: split at the largest power of two
    /// strictly below the length, which yields the same shape as bottom-up
    /// pairing with promotion.
    fn naive_root(xs: &[Vec<u8>]) -> Digest {
        match xs.len() {
            0 => hash(&[0x00]),
            1 => {
                let mut b = vec![0x01];
                b.extend_from_slice(&xs[0]);
                hash(&b)
            }
            n => {
                let k = 1usize << (usize::BITS - 1 - (n - 1).leading_zeros());
                let l = naive_root(&xs[..k]);
                let r = naive_root(&xs[k..]);
                let mut b = vec![0x02];
                b.extend_from_slice(l.as_bytes());
                b.extend_from_slice(r.as_bytes());
                hash(&b)
            }
        }
    }

    fn elems(n: usize) -> Vec<Vec<u8>> {
        (0..n).map(|i| format!("element-{i}").into_bytes()).collect()
    }

    #[test]
    fn empty_and_single() {
        let none: Vec<Vec<u8>> = vec![];
        assert_eq!(mk_root(&none), hash(&[0x00]));
        let x = b"x".to_vec();
        assert_eq!(mk_root(std::slice::from_ref(&x)), hash(&[0x01, b'x']));
        let p = mk_proof(0, std::slice::from_ref(&x)).unwrap();
        assert!(p.is_empty());
        assert!(p.verify(&x, &mk_root(std::slice::from_ref(&x))));
    }

    #[test]
    fn matches_recursive_oracle() {
        for n in 0..40 {
            let xs = elems(n);
            assert_eq!(mk_root(&xs), naive_root(&xs), "n={n}");
        }
    }

    #[test]
    fn exhaustive_eight() {
        let xs = elems(8);
        let root = mk_root(&xs);
        for i in 0..8 {
            let p = mk_proof(i, &xs).unwrap();
            assert_eq!(p.len(), 3);
            assert!(p.verify(&xs[i], &root));
            for (j, x) in xs.iter().enumerate() {
                if j != i {
                    assert!(!p.verify(x, &root));
                }
            }
        }
    }

    #[test]
    fn tampering_and_cross_root() {
        let xs = elems(7);
        let ys = elems(9);
        let root = mk_root(&xs);
        let other = mk_root(&ys);
        for i in 0..7 {
            let p = mk_proof(i, &xs).unwrap();
            assert!(!p.verify(&xs[i], &other));
            for k in 0..p.siblings.len() {
                let mut bad = p.clone();
                let mut b = *bad.siblings[k].0.as_bytes();
                b[0] ^= 1;
                bad.siblings[k].0 = Digest::new(b);
                assert!(!bad.verify(&xs[i], &root));
            }
        }
    }

    #[test]
    fn wrong_index_rejected() {
        let xs = elems(6);
        let root = mk_root(&xs);
        for i in 0..6 {
            let p = mk_proof(i, &xs).unwrap();
            assert!(p.verify_in(&xs[i], &root, 6));
            for j in (0..16u64).filter(|&j| j != i as u64) {
                let mut q = p.clone();
                q.index = j;
                assert!(!q.verify_in(&xs[i], &root, 6), "i={i} j={j}");
            }
        }
        // Without the leaf count, index 4 of six leaves has the same sibling
        // layout as index 2 would in a perfect tree, so it is not rejected.
        let mut q = mk_proof(4, &xs).unwrap();
        assert!(q.verify(&xs[4], &root));
        q.index = 2;
        assert!(q.verify(&xs[4], &root));
    }

    #[test]
    fn out_of_range() {
        assert_eq!(
            mk_proof(3, &elems(3)),
            Err(MerkleError::IndexOutOfRange { index: 3, len: 3 })
        );
    }

    #[test]
    fn wire_layout() {
        let xs = elems(3);
        let p = mk_proof(2, &xs).unwrap();
        let bytes = p.encode();
        assert_eq!(&bytes[..8], &2u64.to_be_bytes());
        assert_eq!(&bytes[8..16], &1u64.to_be_bytes());
        assert_eq!(bytes.len(), 16 + 33);
        assert_eq!(bytes[48], 0);
        assert_eq!(MerkleProof::decode(&bytes).unwrap(), p);
    }

    proptest! {
        #[test]
        fn every_proof_verifies(n in 1usize..70, seed in any::<u64>()) {
            let xs: Vec<Vec<u8>> = (0..n).map(|i| (seed ^ i as u64).to_be_bytes().to_vec()).collect();
            let root = mk_root(&xs);
            let bound = (n as f64).log2().ceil() as usize + 1;
            for (i, x) in xs.iter().enumerate() {
                let p = mk_proof(i, &xs).unwrap();
                prop_assert!(p.len() <= bound);
                if n.is_power_of_two() {
                    prop_assert_eq!(p.len(), n.trailing_zeros() as usize);
                }
                prop_assert!(p.verify(x, &root));
                prop_assert!(p.verify_in(x, &root, n as u64));
                prop_assert_eq!(MerkleProof::decode(&p.encode()).unwrap(), p);
            }
        }
    }
}
