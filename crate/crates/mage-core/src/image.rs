//! Flat on-disk enclave image format (".mimg").
//!
//! Layout, all integers little-endian:
//!   magic "MAGEIMG1" (8) | version u32 | ssa_frame_pages u32 |
//!   enclave_size u64 | page_count u64 | mars_first u64 | mars_count u64
//! followed by page_count records of
//!   offset u64 | secinfo (64) | content (4096)
//!
//! The version field doubles as the derivation-variant tag for the whole
//! group: 1 = basic, 2 = split, 3 = merkle. `mars_first` is a page index,
//! all-ones when no MARS section is present.

use crate::measure::{EnclaveParams, MeasureError, MeasuredPage, SecInfo, PAGE_SIZE};
use thiserror::Error;

pub const MAGIC: [u8; 8] = *b"MAGEIMG1";
pub const MARS_ABSENT: u64 = u64::MAX;
pub const HEADER_LEN: usize = 48;
pub const PAGE_RECORD_LEN: usize = 8 + 64 + PAGE_SIZE;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("bad magic")]
    BadMagic,
    #[error("file truncated: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} trailing bytes after last page record")]
    TrailingBytes(usize),
    #[error("unknown variant tag {0}")]
    UnknownVariant(u32),
    #[error("MARS range [{first}, {first}+{count}) out of bounds for {pages} pages")]
    MarsOutOfBounds { first: u64, count: u64, pages: u64 },
    #[error("MARS pages must be contiguous in memory")]
    MarsNotContiguous,
    #[error("MARS pages must be regular read-only pages")]
    MarsBadSecInfo,
    #[error("MARS contents are neither zeroed nor a well-formed section")]
    MarsBadContents,
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// Which derivation scheme the group was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Basic = 1,
    Split = 2,
    Merkle = 3,
}

impl Variant {
    pub fn from_tag(tag: u32) -> Result<Self, ImageError> {
        match tag {
            1 => Ok(Variant::Basic),
            2 => Ok(Variant::Split),
            3 => Ok(Variant::Merkle),
            other => Err(ImageError::UnknownVariant(other)),
        }
    }

    /// Serialized MARS entry size for this variant.
    pub fn entry_len(&self) -> usize {
        match self {
            Variant::Basic => 48,
            Variant::Split => 88,
            Variant::Merkle => 32, // the root hash; entries live in the sidecar
        }
    }
}

/// Contiguous run of pages making up the MARS section.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MarsRange {
    pub first_page: usize,
    pub page_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnclaveImage {
    pub params: EnclaveParams,
    pub variant: Variant,
    pub pages: Vec<MeasuredPage>,
    pub mars_range: Option<MarsRange>,
}

/// Load order selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loader {
    /// Two-stage: everything else first, MARS pages last.
    Modified,
    /// File order unchanged.
    Unmodified,
}

impl EnclaveImage {
    pub fn new(
        params: EnclaveParams,
        variant: Variant,
        pages: Vec<MeasuredPage>,
        mars_range: Option<MarsRange>,
    ) -> Result<Self, ImageError> {
        let img = EnclaveImage {
            params,
            variant,
            pages,
            mars_range,
        };
        img.validate()?;
        Ok(img)
    }

    fn validate(&self) -> Result<(), ImageError> {
        let mut offsets: Vec<u64> = Vec::with_capacity(self.pages.len());
        for page in &self.pages {
            if page.offset % PAGE_SIZE as u64 != 0 {
                return Err(MeasureError::MisalignedOffset(page.offset, PAGE_SIZE as u64).into());
            }
            if page.offset + PAGE_SIZE as u64 > self.params.enclave_size {
                return Err(MeasureError::PageOutOfRange {
                    offset: page.offset,
                    enclave_size: self.params.enclave_size,
                }
                .into());
            }
            offsets.push(page.offset);
        }
        offsets.sort_unstable();
        for pair in offsets.windows(2) {
            if pair[0] == pair[1] {
                return Err(MeasureError::OverlappingPages(pair[0]).into());
            }
        }

        if let Some(range) = self.mars_range {
            let end = range.first_page.checked_add(range.page_count);
            if range.page_count == 0 || end.is_none() || end.unwrap() > self.pages.len() {
                return Err(ImageError::MarsOutOfBounds {
                    first: range.first_page as u64,
                    count: range.page_count as u64,
                    pages: self.pages.len() as u64,
                });
            }
            let mars = &self.pages[range.first_page..range.first_page + range.page_count];
            for (i, page) in mars.iter().enumerate() {
                if page.secinfo != SecInfo::reg_read_only() {
                    return Err(ImageError::MarsBadSecInfo);
                }
                if page.offset != mars[0].offset + (i * PAGE_SIZE) as u64 {
                    return Err(ImageError::MarsNotContiguous);
                }
            }
            self.validate_mars_contents()?;
        }
        Ok(())
    }

    // MARS pages must hold either the pre-instrumentation all-zero
    // placeholder or a structurally valid section for the variant.
    fn validate_mars_contents(&self) -> Result<(), ImageError> {
        let bytes = self.mars_bytes();
        if bytes.iter().all(|&b| b == 0) {
            return Ok(());
        }
        let entry_count = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let entry_len = self.variant.entry_len();
        // For merkle, the leading count is the leaf count and only the
        // 32-byte root follows; otherwise entries are stored inline.
        let used = match self.variant {
            Variant::Merkle => 8 + entry_len,
            _ => {
                let capacity = (bytes.len() - 8) / entry_len;
                if entry_count > capacity {
                    return Err(ImageError::MarsBadContents);
                }
                8 + entry_count * entry_len
            }
        };
        if bytes[used..].iter().any(|&b| b != 0) {
            return Err(ImageError::MarsBadContents);
        }
        Ok(())
    }

    /// Pages in the order a given loader would create them.
    pub fn load_order(&self, loader: Loader) -> Vec<&MeasuredPage> {
        match (loader, self.mars_range) {
            (Loader::Unmodified, _) | (Loader::Modified, None) => self.pages.iter().collect(),
            (Loader::Modified, Some(range)) => {
                let mars = range.first_page..range.first_page + range.page_count;
                let mut order: Vec<&MeasuredPage> = self
                    .pages
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !mars.contains(i))
                    .map(|(_, p)| p)
                    .collect();
                order.extend(self.pages[mars].iter());
                order
            }
        }
    }

    /// Concatenated content of the MARS pages. Empty when absent.
    pub fn mars_bytes(&self) -> Vec<u8> {
        match self.mars_range {
            None => Vec::new(),
            Some(range) => {
                let mut out = Vec::with_capacity(range.page_count * PAGE_SIZE);
                for page in &self.pages[range.first_page..range.first_page + range.page_count] {
                    out.extend_from_slice(&page.content[..]);
                }
                out
            }
        }
    }

    /// Byte offset of the first MARS page within the enclave.
    pub fn mars_offset(&self) -> Option<u64> {
        self.mars_range
            .map(|range| self.pages[range.first_page].offset)
    }

    /// Replace the MARS page contents with `bytes` (one section image).
    pub fn write_mars(&mut self, bytes: &[u8]) -> Result<(), ImageError> {
        let range = self.mars_range.ok_or(ImageError::MarsOutOfBounds {
            first: MARS_ABSENT,
            count: 0,
            pages: self.pages.len() as u64,
        })?;
        assert_eq!(bytes.len(), range.page_count * PAGE_SIZE);
        for (i, page) in self.pages[range.first_page..range.first_page + range.page_count]
            .iter_mut()
            .enumerate()
        {
            page.content
                .copy_from_slice(&bytes[i * PAGE_SIZE..(i + 1) * PAGE_SIZE]);
        }
        self.validate_mars_contents()
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, ImageError> {
        if bytes.len() < HEADER_LEN {
            return Err(ImageError::Truncated {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        if bytes[..8] != MAGIC {
            return Err(ImageError::BadMagic);
        }
        let variant = Variant::from_tag(u32::from_le_bytes(bytes[8..12].try_into().unwrap()))?;
        let ssa_frame_pages = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let enclave_size = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let page_count = u64::from_le_bytes(bytes[24..32].try_into().unwrap()) as usize;
        let mars_first = u64::from_le_bytes(bytes[32..40].try_into().unwrap());
        let mars_count = u64::from_le_bytes(bytes[40..48].try_into().unwrap());

        let expected = HEADER_LEN + page_count * PAGE_RECORD_LEN;
        if bytes.len() < expected {
            return Err(ImageError::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(ImageError::TrailingBytes(bytes.len() - expected));
        }

        let params = EnclaveParams::new(ssa_frame_pages, enclave_size)?;
        let mut pages = Vec::with_capacity(page_count);
        for i in 0..page_count {
            let record = &bytes[HEADER_LEN + i * PAGE_RECORD_LEN..][..PAGE_RECORD_LEN];
            pages.push(parse_page_record(record)?);
        }
        let mars_range = if mars_first == MARS_ABSENT {
            None
        } else {
            Some(MarsRange {
                first_page: mars_first as usize,
                page_count: mars_count as usize,
            })
        };
        EnclaveImage::new(params, variant, pages, mars_range)
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.pages.len() * PAGE_RECORD_LEN);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(self.variant as u32).to_le_bytes());
        out.extend_from_slice(&self.params.ssa_frame_pages.to_le_bytes());
        out.extend_from_slice(&self.params.enclave_size.to_le_bytes());
        out.extend_from_slice(&(self.pages.len() as u64).to_le_bytes());
        match self.mars_range {
            None => {
                out.extend_from_slice(&MARS_ABSENT.to_le_bytes());
                out.extend_from_slice(&0u64.to_le_bytes());
            }
            Some(range) => {
                out.extend_from_slice(&(range.first_page as u64).to_le_bytes());
                out.extend_from_slice(&(range.page_count as u64).to_le_bytes());
            }
        }
        for page in &self.pages {
            out.extend_from_slice(&serialize_page_record(page));
        }
        out
    }
}

/// One page record as it appears in the file (and in split-variant
/// post-content blobs): offset, full SECINFO, content.
pub fn serialize_page_record(page: &MeasuredPage) -> Vec<u8> {
    let mut out = Vec::with_capacity(PAGE_RECORD_LEN);
    out.extend_from_slice(&page.offset.to_le_bytes());
    out.extend_from_slice(&page.secinfo.to_bytes());
    out.extend_from_slice(&page.content[..]);
    out
}

pub fn parse_page_record(record: &[u8]) -> Result<MeasuredPage, ImageError> {
    if record.len() != PAGE_RECORD_LEN {
        return Err(ImageError::Truncated {
            expected: PAGE_RECORD_LEN,
            actual: record.len(),
        });
    }
    let offset = u64::from_le_bytes(record[..8].try_into().unwrap());
    let secinfo = SecInfo::from_bytes(record[8..72].try_into().unwrap())?;
    Ok(MeasuredPage::new(offset, secinfo, &record[72..])?)
}
