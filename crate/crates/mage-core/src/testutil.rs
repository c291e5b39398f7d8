//! Independent reference oracles for the test suites.
//!
//! Everything here recomputes measurements by concatenating the raw
//! 512-bit blocks and one-shot hashing them with the `sha2` crate, without
//! touching the streaming engine or the block constructors under test.

use crate::measure::{EnclaveParams, MeasuredPage, PAGE_SIZE};
use sha2::{Digest, Sha256};

/// The blocks a single page contributes, written out from the tables:
/// one EADD block, then per 256-byte chunk an EEXTEND header block and
/// the chunk itself.
pub fn oracle_blocks_for_page(page: &MeasuredPage) -> Vec<u8> {
    let mut out = Vec::with_capacity(81 * 64);
    out.extend_from_slice(b"EADD\0\0\0\0");
    out.extend_from_slice(&page.offset.to_le_bytes());
    out.extend_from_slice(&page.secinfo.flags.to_le_bytes());
    out.extend_from_slice(&[0u8; 40]);
    for k in 0..PAGE_SIZE / 256 {
        out.extend_from_slice(b"EEXTEND\0");
        out.extend_from_slice(&(page.offset + 256 * k as u64).to_le_bytes());
        out.extend_from_slice(&[0u8; 48]);
        out.extend_from_slice(&page.content[k * 256..(k + 1) * 256]);
    }
    out
}

/// All blocks for an enclave in the given load order.
pub fn oracle_blocks(params: &EnclaveParams, pages: &[MeasuredPage]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"ECREATE\0");
    out.extend_from_slice(&params.ssa_frame_pages.to_le_bytes());
    out.extend_from_slice(&params.enclave_size.to_le_bytes());
    out.extend_from_slice(&[0u8; 44]);
    for page in pages {
        out.extend_from_slice(&oracle_blocks_for_page(page));
    }
    out
}

/// One-shot measurement: SHA-256 over the concatenated blocks.
pub fn measurement_oracle(params: &EnclaveParams, pages: &[MeasuredPage]) -> [u8; 32] {
    Sha256::digest(oracle_blocks(params, pages)).into()
}
