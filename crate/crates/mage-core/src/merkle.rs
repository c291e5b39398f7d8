//! Merkle-backed MARS storage: entries live outside the enclave in a
//! sidecar, the enclave keeps only the tree root in a one-page section.
//!
//! Tree shape: leaves are padded to a power of two by duplicating the last
//! leaf; internal node = H(left || right); leaf hash is domain-separated
//! by the entry index: H(index LE || entry bytes).

use crate::build::{derive_mainfo, BuildError, Mainfo, MAINFO_LEN};
use crate::image::{EnclaveImage, Variant};
use crate::measure::PAGE_SIZE;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MerkleError {
    #[error("sidecar truncated or malformed")]
    MalformedSidecar,
    #[error("empty tree")]
    EmptyTree,
}

pub fn leaf_hash(index: u64, entry: &[u8; MAINFO_LEN]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(index.to_le_bytes());
    h.update(entry);
    h.finalize().into()
}

pub fn node_hash(left: &[u8; 32], right: &[u8; 32]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(left);
    h.update(right);
    h.finalize().into()
}

/// Proof length for `leaf_count` leaves after padding.
pub fn proof_len(leaf_count: usize) -> usize {
    leaf_count.next_power_of_two().trailing_zeros() as usize
}

#[derive(Debug, Clone)]
pub struct MerkleTree {
    // levels[0] = padded leaf hashes, last level = [root]
    levels: Vec<Vec<[u8; 32]>>,
}

impl MerkleTree {
    pub fn build(leaves: &[[u8; 32]]) -> Result<Self, MerkleError> {
        if leaves.is_empty() {
            return Err(MerkleError::EmptyTree);
        }
        let mut level = leaves.to_vec();
        level.resize(leaves.len().next_power_of_two(), *leaves.last().unwrap());
        let mut levels = vec![level];
        while levels.last().unwrap().len() > 1 {
            let prev = levels.last().unwrap();
            let next: Vec<[u8; 32]> = prev
                .chunks_exact(2)
                .map(|pair| node_hash(&pair[0], &pair[1]))
                .collect();
            levels.push(next);
        }
        Ok(MerkleTree { levels })
    }

    pub fn root(&self) -> [u8; 32] {
        self.levels.last().unwrap()[0]
    }

    /// Sibling hashes, leaf-to-root.
    pub fn prove(&self, index: usize) -> Vec<[u8; 32]> {
        let mut proof = Vec::with_capacity(self.levels.len() - 1);
        let mut idx = index;
        for level in &self.levels[..self.levels.len() - 1] {
            proof.push(level[idx ^ 1]);
            idx >>= 1;
        }
        proof
    }
}

pub fn verify_inclusion(root: &[u8; 32], index: u64, leaf: &[u8; 32], proof: &[[u8; 32]]) -> bool {
    let mut acc = *leaf;
    let mut idx = index;
    for sibling in proof {
        acc = if idx & 1 == 0 {
            node_hash(&acc, sibling)
        } else {
            node_hash(sibling, &acc)
        };
        idx >>= 1;
    }
    idx == 0 && acc == *root
}

/// External storage for a merkle group: the entries and one proof per
/// entry. The images themselves only carry the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MerkleSidecar {
    pub entries: Vec<Mainfo>,
    pub proofs: Vec<Vec<[u8; 32]>>,
}

impl MerkleSidecar {
    /// Wire form: leaf_count u64 LE, entries (48 bytes each), then all
    /// proofs concatenated, 32 bytes per node, leaf-to-root order.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for entry in &self.entries {
            out.extend_from_slice(&entry.to_bytes());
        }
        for proof in &self.proofs {
            for node in proof {
                out.extend_from_slice(node);
            }
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, MerkleError> {
        if bytes.len() < 8 {
            return Err(MerkleError::MalformedSidecar);
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let plen = proof_len(n.max(1));
        let expected = 8 + n * MAINFO_LEN + n * plen * 32;
        if bytes.len() != expected {
            return Err(MerkleError::MalformedSidecar);
        }
        let mut entries = Vec::with_capacity(n);
        for i in 0..n {
            let rec: [u8; MAINFO_LEN] = bytes[8 + i * MAINFO_LEN..][..MAINFO_LEN]
                .try_into()
                .unwrap();
            entries.push(Mainfo::from_bytes(&rec));
        }
        let proofs_base = 8 + n * MAINFO_LEN;
        let mut proofs = Vec::with_capacity(n);
        for i in 0..n {
            let mut proof = Vec::with_capacity(plen);
            for j in 0..plen {
                let node: [u8; 32] = bytes[proofs_base + (i * plen + j) * 32..][..32]
                    .try_into()
                    .unwrap();
                proof.push(node);
            }
            proofs.push(proof);
        }
        Ok(MerkleSidecar { entries, proofs })
    }
}

/// Instrument a merkle-variant group: every image gets the identical
/// one-page section holding the leaf count and the tree root; entries and
/// proofs are returned for external storage.
pub fn instrument_group_merkle(
    images: &mut [EnclaveImage],
) -> Result<MerkleSidecar, BuildError> {
    let (variant, section_pages) = crate::build::instrument_check_group(images)?;
    if variant != Variant::Merkle || section_pages != 1 {
        return Err(BuildError::VariantMismatch);
    }
    let entries: Vec<Mainfo> = images.iter().map(derive_mainfo).collect::<Result<_, _>>()?;
    let leaves: Vec<[u8; 32]> = entries
        .iter()
        .enumerate()
        .map(|(i, e)| leaf_hash(i as u64, &e.to_bytes()))
        .collect();
    let tree = MerkleTree::build(&leaves).expect("non-empty group");

    let mut section = vec![0u8; PAGE_SIZE];
    section[..8].copy_from_slice(&(entries.len() as u64).to_le_bytes());
    section[8..40].copy_from_slice(&tree.root());
    for img in images.iter_mut() {
        img.write_mars(&section)?;
    }

    let proofs = (0..entries.len()).map(|i| tree.prove(i)).collect();
    Ok(MerkleSidecar { entries, proofs })
}

#[cfg(test)]
mod tests {
    use super::*;

    // Brute-force oracle: recompute the root by explicit level-by-level
    // hashing of the padded leaf vector.
    fn oracle_root(leaves: &[[u8; 32]]) -> [u8; 32] {
        let mut level = leaves.to_vec();
        level.resize(leaves.len().next_power_of_two(), *leaves.last().unwrap());
        while level.len() > 1 {
            level = level
                .chunks(2)
                .map(|p| {
                    let mut h = Sha256::new();
                    h.update(p[0]);
                    h.update(p[1]);
                    h.finalize().into()
                })
                .collect();
        }
        level[0]
    }

    fn leaves(n: usize) -> Vec<[u8; 32]> {
        (0..n).map(|i| leaf_hash(i as u64, &[i as u8; 48])).collect()
    }

    #[test]
    fn roots_match_oracle() {
        for n in 1..=16 {
            let l = leaves(n);
            assert_eq!(MerkleTree::build(&l).unwrap().root(), oracle_root(&l));
        }
    }

    #[test]
    fn all_proofs_verify_and_corruptions_fail() {
        for n in 1..=16usize {
            let l = leaves(n);
            let tree = MerkleTree::build(&l).unwrap();
            let root = tree.root();
            for i in 0..n {
                let proof = tree.prove(i);
                assert_eq!(proof.len(), proof_len(n));
                assert!(verify_inclusion(&root, i as u64, &l[i], &proof));
                // Any single bit flip in the proof breaks verification.
                for node in 0..proof.len() {
                    let mut bad = proof.clone();
                    bad[node][0] ^= 1;
                    assert!(!verify_inclusion(&root, i as u64, &l[i], &bad));
                }
                // Wrong index fails too.
                if n > 1 {
                    assert!(!verify_inclusion(&root, (i as u64 + 1) % n as u64, &l[i], &proof));
                }
            }
        }
    }

    #[test]
    fn proof_length_is_logarithmic() {
        assert_eq!(proof_len(1), 0);
        assert_eq!(proof_len(2), 1);
        assert_eq!(proof_len(5), 3);
        assert_eq!(proof_len(1 << 10), 10);
    }

    #[test]
    fn sidecar_round_trip() {
        let entries: Vec<Mainfo> = (0..5)
            .map(|i| Mainfo {
                premr: [i as u8; 32],
                count: 64 * (1 + 81 * i),
                offset: 4096 * i,
            })
            .collect();
        let leaves: Vec<[u8; 32]> = entries
            .iter()
            .enumerate()
            .map(|(i, e)| leaf_hash(i as u64, &e.to_bytes()))
            .collect();
        let tree = MerkleTree::build(&leaves).unwrap();
        let sidecar = MerkleSidecar {
            proofs: (0..entries.len()).map(|i| tree.prove(i)).collect(),
            entries,
        };
        let bytes = sidecar.serialize();
        assert_eq!(MerkleSidecar::parse(&bytes).unwrap(), sidecar);
        assert_eq!(
            MerkleSidecar::parse(&bytes[..bytes.len() - 1]),
            Err(MerkleError::MalformedSidecar)
        );
    }
}
