//! Measurement block construction and replay.
//!
//! Builds the exact 512-bit blocks absorbed for ECREATE, EADD and EEXTEND
//! and replays a page load order into a final or intermediate measurement.

use crate::hash::{HashState, BLOCK_LEN, DIGEST_LEN};
use thiserror::Error;

pub const PAGE_SIZE: usize = 4096;
pub const CHUNK_SIZE: usize = 256;
pub const CHUNKS_PER_PAGE: usize = PAGE_SIZE / CHUNK_SIZE;
/// 1 EADD block plus 16 EEXTEND groups of 5 blocks each.
pub const BLOCKS_PER_PAGE: u64 = 1 + (CHUNKS_PER_PAGE as u64) * 5;

const ECREATE_HEADER: u64 = 0x0045544145524345; // "ECREATE\0"
const EADD_HEADER: u64 = 0x0000000044444145; // "EADD\0\0\0\0"
const EEXTEND_HEADER: u64 = 0x00444E4554584545; // "EEXTEND\0"

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MeasureError {
    #[error("offset {0:#x} is not {1}-byte aligned")]
    MisalignedOffset(u64, u64),
    #[error("chunk must be exactly {CHUNK_SIZE} bytes, got {0}")]
    ChunkLength(usize),
    #[error("page content must be exactly {PAGE_SIZE} bytes, got {0}")]
    PageLength(usize),
    #[error("page at offset {offset:#x} exceeds enclave size {enclave_size:#x}")]
    PageOutOfRange { offset: u64, enclave_size: u64 },
    #[error("overlapping pages at offset {0:#x}")]
    OverlappingPages(u64),
    #[error("enclave size {0:#x} must be a power of two and at least one page")]
    InvalidEnclaveSize(u64),
    #[error("secinfo reserved bytes must be zero")]
    SecInfoReserved,
}

/// Per-page security metadata. Only `flags` is meaningful; the remaining
/// 56 bytes of the 64-byte structure are reserved zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SecInfo {
    pub flags: u64,
}

impl SecInfo {
    pub const READ: u64 = 1;
    pub const WRITE: u64 = 1 << 1;
    pub const EXEC: u64 = 1 << 2;

    pub const PT_SECS: u8 = 0;
    pub const PT_TCS: u8 = 1;
    pub const PT_REG: u8 = 2;

    pub fn new(permissions: u64, page_type: u8) -> Self {
        SecInfo {
            flags: (permissions & 0xff) | ((page_type as u64) << 8),
        }
    }

    /// Read-only regular page, the constant SECINFO used for MARS pages.
    pub fn reg_read_only() -> Self {
        SecInfo::new(Self::READ, Self::PT_REG)
    }

    pub fn reg_rw() -> Self {
        SecInfo::new(Self::READ | Self::WRITE, Self::PT_REG)
    }

    pub fn reg_rx() -> Self {
        SecInfo::new(Self::READ | Self::EXEC, Self::PT_REG)
    }

    pub fn tcs() -> Self {
        SecInfo::new(0, Self::PT_TCS)
    }

    pub fn page_type(&self) -> u8 {
        ((self.flags >> 8) & 0xff) as u8
    }

    /// Full 64-byte structure: flags little-endian, then reserved zeros.
    pub fn to_bytes(&self) -> [u8; 64] {
        let mut out = [0u8; 64];
        out[..8].copy_from_slice(&self.flags.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8; 64]) -> Result<Self, MeasureError> {
        if bytes[8..].iter().any(|&b| b != 0) {
            return Err(MeasureError::SecInfoReserved);
        }
        Ok(SecInfo {
            flags: u64::from_le_bytes(bytes[..8].try_into().unwrap()),
        })
    }

    /// The portion that enters the measurement.
    pub fn measured_bytes(&self) -> [u8; 48] {
        let mut out = [0u8; 48];
        out[..8].copy_from_slice(&self.flags.to_le_bytes());
        out
    }
}

/// One 4 KB page together with its load metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeasuredPage {
    pub offset: u64,
    pub secinfo: SecInfo,
    pub content: Box<[u8; PAGE_SIZE]>,
}

impl MeasuredPage {
    pub fn new(offset: u64, secinfo: SecInfo, content: &[u8]) -> Result<Self, MeasureError> {
        if content.len() != PAGE_SIZE {
            return Err(MeasureError::PageLength(content.len()));
        }
        if offset % PAGE_SIZE as u64 != 0 {
            return Err(MeasureError::MisalignedOffset(offset, PAGE_SIZE as u64));
        }
        let mut boxed = Box::new([0u8; PAGE_SIZE]);
        boxed.copy_from_slice(content);
        Ok(MeasuredPage {
            offset,
            secinfo,
            content: boxed,
        })
    }

    pub fn zeroed(offset: u64, secinfo: SecInfo) -> Result<Self, MeasureError> {
        Self::new(offset, secinfo, &[0u8; PAGE_SIZE])
    }
}

/// ECREATE-time enclave parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnclaveParams {
    pub ssa_frame_pages: u32,
    pub enclave_size: u64,
}

impl EnclaveParams {
    pub fn new(ssa_frame_pages: u32, enclave_size: u64) -> Result<Self, MeasureError> {
        if !enclave_size.is_power_of_two() || enclave_size < PAGE_SIZE as u64 {
            return Err(MeasureError::InvalidEnclaveSize(enclave_size));
        }
        Ok(EnclaveParams {
            ssa_frame_pages,
            enclave_size,
        })
    }
}

/// The single block absorbed by ECREATE.
pub fn ecreate_block(params: &EnclaveParams) -> [u8; BLOCK_LEN] {
    let mut block = [0u8; BLOCK_LEN];
    block[..8].copy_from_slice(&ECREATE_HEADER.to_le_bytes());
    block[8..12].copy_from_slice(&params.ssa_frame_pages.to_le_bytes());
    block[12..20].copy_from_slice(&params.enclave_size.to_le_bytes());
    block
}

/// The single block absorbed when a page is added.
pub fn eadd_block(offset: u64, secinfo: SecInfo) -> Result<[u8; BLOCK_LEN], MeasureError> {
    if offset % PAGE_SIZE as u64 != 0 {
        return Err(MeasureError::MisalignedOffset(offset, PAGE_SIZE as u64));
    }
    let mut block = [0u8; BLOCK_LEN];
    block[..8].copy_from_slice(&EADD_HEADER.to_le_bytes());
    block[8..16].copy_from_slice(&offset.to_le_bytes());
    block[16..64].copy_from_slice(&secinfo.measured_bytes());
    Ok(block)
}

/// The five blocks absorbed for one 256-byte chunk: a header block naming
/// the chunk offset, then the chunk itself split into four blocks.
pub fn eextend_blocks(offset: u64, chunk: &[u8]) -> Result<[[u8; BLOCK_LEN]; 5], MeasureError> {
    if chunk.len() != CHUNK_SIZE {
        return Err(MeasureError::ChunkLength(chunk.len()));
    }
    if offset % CHUNK_SIZE as u64 != 0 {
        return Err(MeasureError::MisalignedOffset(offset, CHUNK_SIZE as u64));
    }
    let mut blocks = [[0u8; BLOCK_LEN]; 5];
    blocks[0][..8].copy_from_slice(&EEXTEND_HEADER.to_le_bytes());
    blocks[0][8..16].copy_from_slice(&offset.to_le_bytes());
    for i in 0..4 {
        blocks[i + 1].copy_from_slice(&chunk[i * BLOCK_LEN..(i + 1) * BLOCK_LEN]);
    }
    Ok(blocks)
}

/// Absorb the EADD block plus all EEXTEND groups for one page.
///
/// The EEXTEND offset advances by 256 per chunk.
pub fn absorb_page(state: &mut HashState, page: &MeasuredPage) -> Result<(), MeasureError> {
    state
        .update_block(&eadd_block(page.offset, page.secinfo)?)
        .expect("block size");
    for k in 0..CHUNKS_PER_PAGE {
        let chunk_offset = page.offset + (k * CHUNK_SIZE) as u64;
        let chunk = &page.content[k * CHUNK_SIZE..(k + 1) * CHUNK_SIZE];
        for block in eextend_blocks(chunk_offset, chunk)? {
            state.update_block(&block).expect("block size");
        }
    }
    Ok(())
}

fn validate_pages<'a>(
    params: &EnclaveParams,
    pages: impl IntoIterator<Item = &'a MeasuredPage>,
) -> Result<(), MeasureError> {
    let mut offsets: Vec<u64> = Vec::new();
    for page in pages {
        if page.offset % PAGE_SIZE as u64 != 0 {
            return Err(MeasureError::MisalignedOffset(page.offset, PAGE_SIZE as u64));
        }
        if page.offset + PAGE_SIZE as u64 > params.enclave_size {
            return Err(MeasureError::PageOutOfRange {
                offset: page.offset,
                enclave_size: params.enclave_size,
            });
        }
        offsets.push(page.offset);
    }
    offsets.sort_unstable();
    for pair in offsets.windows(2) {
        if pair[0] == pair[1] {
            return Err(MeasureError::OverlappingPages(pair[0]));
        }
    }
    Ok(())
}

/// Intermediate state after ECREATE and the given pages, unfinalized.
/// Exporting this state yields the PREMR words plus the COUNT.
pub fn premeasure_enclave<'a>(
    params: &EnclaveParams,
    pages: impl IntoIterator<Item = &'a MeasuredPage> + Clone,
) -> Result<HashState, MeasureError> {
    validate_pages(params, pages.clone())?;
    let mut state = HashState::new();
    state.update_block(&ecreate_block(params)).expect("block size");
    for page in pages {
        absorb_page(&mut state, page)?;
    }
    Ok(state)
}

/// Full enclave measurement over the given load order.
pub fn measure_enclave<'a>(
    params: &EnclaveParams,
    pages: impl IntoIterator<Item = &'a MeasuredPage> + Clone,
) -> Result<[u8; DIGEST_LEN], MeasureError> {
    Ok(premeasure_enclave(params, pages)?.finalize())
}
