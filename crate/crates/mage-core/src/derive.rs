//! Runtime measurement derivation: rebuild any group member's full
//! measurement from the shared MARS bytes alone, plus the two
//! untrusted-storage variants.

use crate::build::{Mainfo, SplitMainfo, MAINFO_LEN, SPLIT_MAINFO_LEN};
use crate::hash::HashState;
use crate::image::{parse_page_record, EnclaveImage, ImageError, Variant, PAGE_RECORD_LEN};
use crate::measure::{absorb_page, MeasureError, MeasuredPage, SecInfo, PAGE_SIZE};
use crate::merkle::{leaf_hash, proof_len, verify_inclusion};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DeriveError {
    #[error("index {idx} out of range: section holds {count} entries")]
    IndexOutOfRange { idx: u64, count: u64 },
    #[error("section length {0} is not a positive multiple of the page size")]
    BadSectionLength(usize),
    #[error("entry count {count} exceeds section capacity {capacity}")]
    EntryCountInconsistent { count: u64, capacity: u64 },
    #[error("view variant is {actual:?}, operation requires {expected:?}")]
    WrongVariant { expected: Variant, actual: Variant },
    #[error("post-content digest mismatch: untrusted storage tampered")]
    IntegrityViolation,
    #[error("post content is not whole page records or count mismatches")]
    BadPostContent,
    #[error("merkle proof has wrong length: expected {expected}, got {actual}")]
    ProofLength { expected: usize, actual: usize },
    #[error("merkle inclusion proof does not verify against the root")]
    ProofVerificationFailed,
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Where the MARS bytes were read from. Informational only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewSource {
    InEnclave,
    External,
}

/// An enclave's view of its own MARS section.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MageView {
    pub mars_bytes: Vec<u8>,
    pub mars_offset: u64,
    pub variant: Variant,
    pub source: ViewSource,
}

impl MageView {
    pub fn from_image(img: &EnclaveImage) -> Result<Self, DeriveError> {
        let bytes = img.mars_bytes();
        if bytes.is_empty() {
            return Err(DeriveError::BadSectionLength(0));
        }
        Ok(MageView {
            mars_bytes: bytes,
            mars_offset: img.mars_offset().unwrap(),
            variant: img.variant,
            source: ViewSource::InEnclave,
        })
    }

    fn check_section(&self) -> Result<(), DeriveError> {
        if self.mars_bytes.is_empty() || self.mars_bytes.len() % PAGE_SIZE != 0 {
            return Err(DeriveError::BadSectionLength(self.mars_bytes.len()));
        }
        Ok(())
    }

    fn entry_count(&self) -> Result<u64, DeriveError> {
        self.check_section()?;
        let count = u64::from_le_bytes(self.mars_bytes[..8].try_into().unwrap());
        if self.variant != Variant::Merkle {
            let capacity =
                crate::build::mars_capacity(self.mars_bytes.len(), self.variant.entry_len()) as u64;
            if count > capacity {
                return Err(DeriveError::EntryCountInconsistent { count, capacity });
            }
        }
        Ok(count)
    }

    pub fn mars_pages(&self) -> usize {
        self.mars_bytes.len() / PAGE_SIZE
    }
}

/// Number of entries stored in the section.
pub fn mage_size(view: &MageView) -> Result<u64, DeriveError> {
    view.entry_count()
}

fn entry_at(view: &MageView, idx: u64, entry_len: usize) -> Result<&[u8], DeriveError> {
    let count = view.entry_count()?;
    if idx >= count {
        return Err(DeriveError::IndexOutOfRange { idx, count });
    }
    let start = 8 + idx as usize * entry_len;
    Ok(&view.mars_bytes[start..start + entry_len])
}

/// Absorb the MARS pages at `section_offset` into `state`, exactly as the
/// loader would: one EADD plus sixteen EEXTEND groups per page, with the
/// constant read-only SECINFO and chunk offsets advancing by 256.
fn absorb_mars(
    state: &mut HashState,
    section_offset: u64,
    mars_bytes: &[u8],
) -> Result<(), DeriveError> {
    for (p, content) in mars_bytes.chunks_exact(PAGE_SIZE).enumerate() {
        let page = MeasuredPage::new(
            section_offset + (p * PAGE_SIZE) as u64,
            SecInfo::reg_read_only(),
            content,
        )?;
        absorb_page(state, &page)?;
    }
    Ok(())
}

/// Derive group member `idx`'s measurement from the view's own section.
pub fn derive_measurement(view: &MageView, idx: u64) -> Result<[u8; 32], DeriveError> {
    Ok(derive_measurement_counting(view, idx)?.0)
}

/// Same as [`derive_measurement`], also reporting how many 512-bit block
/// updates the derivation performed (excluding finalization).
pub fn derive_measurement_counting(
    view: &MageView,
    idx: u64,
) -> Result<([u8; 32], u64), DeriveError> {
    if view.variant != Variant::Basic {
        return Err(DeriveError::WrongVariant {
            expected: Variant::Basic,
            actual: view.variant,
        });
    }
    let raw: [u8; MAINFO_LEN] = entry_at(view, idx, MAINFO_LEN)?.try_into().unwrap();
    let entry = Mainfo::from_bytes(&raw);
    let mut state = entry.to_state();
    let before = state.byte_count();
    absorb_mars(&mut state, entry.offset, &view.mars_bytes)?;
    let blocks = (state.byte_count() - before) / 64;
    Ok((state.finalize(), blocks))
}

/// Split-variant derivation for unmodified loaders: the content loaded
/// after the section is fetched from untrusted storage as serialized page
/// records and checked against the digest pinned in the entry.
pub fn derive_measurement_split(
    view: &MageView,
    idx: u64,
    post_content: &[u8],
) -> Result<[u8; 32], DeriveError> {
    if view.variant != Variant::Split {
        return Err(DeriveError::WrongVariant {
            expected: Variant::Split,
            actual: view.variant,
        });
    }
    let raw: [u8; SPLIT_MAINFO_LEN] = entry_at(view, idx, SPLIT_MAINFO_LEN)?.try_into().unwrap();
    let entry = SplitMainfo::from_bytes(&raw);

    if post_content.len() % PAGE_RECORD_LEN != 0
        || (post_content.len() / PAGE_RECORD_LEN) as u64 != entry.post_page_count
    {
        return Err(DeriveError::BadPostContent);
    }
    let digest: [u8; 32] = Sha256::digest(post_content).into();
    if digest != entry.post_digest {
        return Err(DeriveError::IntegrityViolation);
    }

    let mut state = entry.to_state();
    absorb_mars(&mut state, entry.offset, &view.mars_bytes)?;
    for record in post_content.chunks_exact(PAGE_RECORD_LEN) {
        let page = parse_page_record(record)?;
        absorb_page(&mut state, &page)?;
    }
    Ok(state.finalize())
}

/// Merkle-variant derivation: the entry comes from untrusted storage and
/// must carry a valid inclusion proof against the root pinned in the
/// one-page section.
pub fn merkle_derive(
    view: &MageView,
    idx: u64,
    entry: &Mainfo,
    proof: &[[u8; 32]],
) -> Result<[u8; 32], DeriveError> {
    if view.variant != Variant::Merkle {
        return Err(DeriveError::WrongVariant {
            expected: Variant::Merkle,
            actual: view.variant,
        });
    }
    let count = view.entry_count()?;
    if idx >= count {
        return Err(DeriveError::IndexOutOfRange { idx, count });
    }
    let expected_len = proof_len(count as usize);
    if proof.len() != expected_len {
        return Err(DeriveError::ProofLength {
            expected: expected_len,
            actual: proof.len(),
        });
    }
    let root: [u8; 32] = view.mars_bytes[8..40].try_into().unwrap();
    let leaf = leaf_hash(idx, &entry.to_bytes());
    if !verify_inclusion(&root, idx, &leaf, proof) {
        return Err(DeriveError::ProofVerificationFailed);
    }

    let mut state = entry.to_state();
    absorb_mars(&mut state, entry.offset, &view.mars_bytes)?;
    Ok(state.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::build::{final_measurement, instrument_group};
    use crate::fixtures::random_group;
    use crate::measure::BLOCKS_PER_PAGE;

    fn instrumented(n: usize, seed: u64) -> Vec<EnclaveImage> {
        let mut group = random_group(n, &[1, 2, 3], 1, Variant::Basic, seed);
        instrument_group(&mut group).unwrap();
        group
    }

    #[test]
    fn mage_size_round_trip_and_bounds() {
        let group = instrumented(3, 1);
        let view = MageView::from_image(&group[0]).unwrap();
        assert_eq!(mage_size(&view).unwrap(), 3);

        let mut empty = view.clone();
        empty.mars_bytes = vec![0u8; PAGE_SIZE];
        assert_eq!(mage_size(&empty).unwrap(), 0);

        // 86 entries claimed in a one-page section: capacity is 85.
        let mut bogus = view.clone();
        bogus.mars_bytes = vec![0u8; PAGE_SIZE];
        bogus.mars_bytes[..8].copy_from_slice(&86u64.to_le_bytes());
        assert_eq!(
            mage_size(&bogus),
            Err(DeriveError::EntryCountInconsistent {
                count: 86,
                capacity: 85
            })
        );
    }

    #[test]
    fn self_derivation_matches_own_measurement() {
        let group = instrumented(1, 2);
        let view = MageView::from_image(&group[0]).unwrap();
        assert_eq!(
            derive_measurement(&view, 0).unwrap(),
            final_measurement(&group[0]).unwrap()
        );
    }

    #[test]
    fn pairwise_derivation_matches_direct() {
        for n in [1usize, 2, 3, 10] {
            let group = instrumented(n, 100 + n as u64);
            let direct: Vec<[u8; 32]> = group
                .iter()
                .map(|img| final_measurement(img).unwrap())
                .collect();
            for img in &group {
                let view = MageView::from_image(img).unwrap();
                for (j, want) in direct.iter().enumerate() {
                    assert_eq!(derive_measurement(&view, j as u64).unwrap(), *want);
                }
            }
        }
    }

    #[test]
    fn index_out_of_range_is_distinct() {
        let group = instrumented(2, 3);
        let view = MageView::from_image(&group[0]).unwrap();
        assert_eq!(
            derive_measurement(&view, 2),
            Err(DeriveError::IndexOutOfRange { idx: 2, count: 2 })
        );
    }

    #[test]
    fn derivation_cost_is_linear_in_mars_pages_only() {
        for mars_pages in [1usize, 2, 4] {
            let mut group = random_group(2, &[1, 6], mars_pages, Variant::Basic, 9);
            instrument_group(&mut group).unwrap();
            for img in &group {
                let view = MageView::from_image(img).unwrap();
                for j in 0..2 {
                    let (_, blocks) = derive_measurement_counting(&view, j).unwrap();
                    assert_eq!(blocks, BLOCKS_PER_PAGE * mars_pages as u64);
                }
            }
        }
    }

    #[test]
    fn wrong_variant_rejected() {
        let group = instrumented(1, 4);
        let mut view = MageView::from_image(&group[0]).unwrap();
        view.variant = Variant::Split;
        assert!(matches!(
            derive_measurement(&view, 0),
            Err(DeriveError::WrongVariant { .. })
        ));
    }
}
