//! Build-time side of the scheme: extract each image's derivation record,
//! assemble the shared MARS section, and instrument every group member
//! with identical section bytes.

use crate::hash::HashState;
use crate::image::{EnclaveImage, ImageError, Loader, Variant};
use crate::measure::{measure_enclave, premeasure_enclave, MeasureError, PAGE_SIZE};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Serialized size of one basic entry: 32-byte PREMR, 8-byte COUNT,
/// 8-byte OFFSET. SECINFO is fixed to REG read-only and not stored.
pub const MAINFO_LEN: usize = 48;
/// Split entry adds a 32-byte post-content digest and an 8-byte post page
/// count: 88 bytes total.
pub const SPLIT_MAINFO_LEN: usize = 88;

const EXCHANGE_HEADER: &str = "mage-mainfo-v1";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BuildError {
    #[error("image has no MARS range")]
    MissingMars,
    #[error("all group members must reserve MARS sections of equal size")]
    MarsSizeMismatch,
    #[error("all group members must share the same variant")]
    VariantMismatch,
    #[error("{entries} entries exceed section capacity {capacity}")]
    CapacityExceeded { entries: usize, capacity: usize },
    #[error("malformed exchange record: {0}")]
    BadExchangeRecord(String),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// The record one enclave needs to resume and finish another's measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mainfo {
    /// Intermediate hash words, big-endian (reads like a digest).
    pub premr: [u8; 32],
    /// Bytes absorbed into `premr`.
    pub count: u64,
    /// Byte offset of the MARS section in the owning enclave.
    pub offset: u64,
}

impl Mainfo {
    pub fn to_bytes(&self) -> [u8; MAINFO_LEN] {
        let mut out = [0u8; MAINFO_LEN];
        out[..32].copy_from_slice(&self.premr);
        out[32..40].copy_from_slice(&self.count.to_le_bytes());
        out[40..48].copy_from_slice(&self.offset.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8; MAINFO_LEN]) -> Self {
        Mainfo {
            premr: bytes[..32].try_into().unwrap(),
            count: u64::from_le_bytes(bytes[32..40].try_into().unwrap()),
            offset: u64::from_le_bytes(bytes[40..48].try_into().unwrap()),
        }
    }

    /// Rebuild the intermediate hash state this record captures.
    pub fn to_state(&self) -> HashState {
        HashState::from_parts(&self.premr, self.count)
    }

    /// Exchange-file form: a one-line header, then the record in hex.
    pub fn to_exchange(&self) -> String {
        format!("{EXCHANGE_HEADER}\n{}\n", hex::encode(self.to_bytes()))
    }

    pub fn from_exchange(text: &str) -> Result<Self, BuildError> {
        let mut lines = text.lines();
        match lines.next() {
            Some(EXCHANGE_HEADER) => {}
            other => {
                return Err(BuildError::BadExchangeRecord(format!(
                    "expected header {EXCHANGE_HEADER:?}, got {other:?}"
                )))
            }
        }
        let body = lines
            .next()
            .ok_or_else(|| BuildError::BadExchangeRecord("missing record line".into()))?;
        let bytes = hex::decode(body.trim())
            .map_err(|e| BuildError::BadExchangeRecord(e.to_string()))?;
        let arr: [u8; MAINFO_LEN] = bytes
            .as_slice()
            .try_into()
            .map_err(|_| BuildError::BadExchangeRecord(format!("want {MAINFO_LEN} bytes")))?;
        Ok(Mainfo::from_bytes(&arr))
    }
}

/// Split-variant record: resumable state over the pages loaded before the
/// MARS, plus an integrity digest over the serialized page records loaded
/// after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitMainfo {
    pub premr: [u8; 32],
    pub count: u64,
    pub offset: u64,
    pub post_digest: [u8; 32],
    pub post_page_count: u64,
}

impl SplitMainfo {
    pub fn to_bytes(&self) -> [u8; SPLIT_MAINFO_LEN] {
        let mut out = [0u8; SPLIT_MAINFO_LEN];
        out[..32].copy_from_slice(&self.premr);
        out[32..40].copy_from_slice(&self.count.to_le_bytes());
        out[40..48].copy_from_slice(&self.offset.to_le_bytes());
        out[48..80].copy_from_slice(&self.post_digest);
        out[80..88].copy_from_slice(&self.post_page_count.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8; SPLIT_MAINFO_LEN]) -> Self {
        SplitMainfo {
            premr: bytes[..32].try_into().unwrap(),
            count: u64::from_le_bytes(bytes[32..40].try_into().unwrap()),
            offset: u64::from_le_bytes(bytes[40..48].try_into().unwrap()),
            post_digest: bytes[48..80].try_into().unwrap(),
            post_page_count: u64::from_le_bytes(bytes[80..88].try_into().unwrap()),
        }
    }

    pub fn to_state(&self) -> HashState {
        HashState::from_parts(&self.premr, self.count)
    }
}

/// Entries a section of `section_len` bytes can hold for the given
/// per-entry size: floor((L - 8) / entry_len).
pub fn mars_capacity(section_len: usize, entry_len: usize) -> usize {
    (section_len - 8) / entry_len
}

/// Pages needed to hold `n` entries: ceil((entry_len * n + 8) / 4096).
pub fn mars_pages_needed(n: usize, entry_len: usize) -> usize {
    (entry_len * n + 8).div_ceil(PAGE_SIZE)
}

/// Extract the derivation record from an image: the premeasure state over
/// all non-MARS pages in file order (what the two-stage loader absorbs
/// before the section), plus the section offset.
pub fn derive_mainfo(img: &EnclaveImage) -> Result<Mainfo, BuildError> {
    let range = img.mars_range.ok_or(BuildError::MissingMars)?;
    let mars = range.first_page..range.first_page + range.page_count;
    let pre_mars: Vec<_> = img
        .pages
        .iter()
        .enumerate()
        .filter(|(i, _)| !mars.contains(i))
        .map(|(_, p)| p)
        .collect();
    let state = premeasure_enclave(&img.params, pre_mars.iter().copied())?;
    Ok(Mainfo {
        premr: state.words_be(),
        count: state.byte_count(),
        offset: img.mars_offset().unwrap(),
    })
}

/// Split-variant record for the unmodified loader: state over the pages
/// before the MARS in file order, digest over the page records after it.
pub fn derive_split_mainfo(img: &EnclaveImage) -> Result<SplitMainfo, BuildError> {
    let range = img.mars_range.ok_or(BuildError::MissingMars)?;
    let pre = &img.pages[..range.first_page];
    let post = &img.pages[range.first_page + range.page_count..];
    let state = premeasure_enclave(&img.params, pre)?;
    let mut post_blob = Vec::new();
    for page in post {
        post_blob.extend_from_slice(&crate::image::serialize_page_record(page));
    }
    Ok(SplitMainfo {
        premr: state.words_be(),
        count: state.byte_count(),
        offset: img.mars_offset().unwrap(),
        post_digest: Sha256::digest(&post_blob).into(),
        post_page_count: post.len() as u64,
    })
}

fn build_section(entries: &[Vec<u8>], entry_len: usize, section_pages: usize) -> Result<Vec<u8>, BuildError> {
    let section_len = section_pages * PAGE_SIZE;
    let capacity = mars_capacity(section_len, entry_len);
    if entries.len() > capacity {
        return Err(BuildError::CapacityExceeded {
            entries: entries.len(),
            capacity,
        });
    }
    let mut out = vec![0u8; section_len];
    out[..8].copy_from_slice(&(entries.len() as u64).to_le_bytes());
    for (i, entry) in entries.iter().enumerate() {
        debug_assert_eq!(entry.len(), entry_len);
        out[8 + i * entry_len..8 + (i + 1) * entry_len].copy_from_slice(entry);
    }
    Ok(out)
}

/// Serialize the shared section: entry count, entries in order, zero pad.
pub fn build_mars(mainfos: &[Mainfo], section_pages: usize) -> Result<Vec<u8>, BuildError> {
    let entries: Vec<Vec<u8>> = mainfos.iter().map(|m| m.to_bytes().to_vec()).collect();
    build_section(&entries, MAINFO_LEN, section_pages)
}

pub fn build_split_mars(mainfos: &[SplitMainfo], section_pages: usize) -> Result<Vec<u8>, BuildError> {
    let entries: Vec<Vec<u8>> = mainfos.iter().map(|m| m.to_bytes().to_vec()).collect();
    build_section(&entries, SPLIT_MAINFO_LEN, section_pages)
}

fn check_group(images: &[EnclaveImage]) -> Result<(Variant, usize), BuildError> {
    let variant = images.first().map(|i| i.variant).ok_or(BuildError::MissingMars)?;
    let mut section_pages = None;
    for img in images {
        if img.variant != variant {
            return Err(BuildError::VariantMismatch);
        }
        let range = img.mars_range.ok_or(BuildError::MissingMars)?;
        match section_pages {
            None => section_pages = Some(range.page_count),
            Some(p) if p != range.page_count => return Err(BuildError::MarsSizeMismatch),
            _ => {}
        }
    }
    Ok((variant, section_pages.unwrap()))
}

/// Instrument every group member with the identical shared section.
///
/// Entry `i` of the section is derived from `images[i]`; the same bytes
/// are written into each image's MARS pages. Handles the basic and split
/// variants; merkle groups go through [`crate::merkle::instrument_group_merkle`].
pub fn instrument_group(images: &mut [EnclaveImage]) -> Result<(), BuildError> {
    let (variant, section_pages) = check_group(images)?;
    let section = match variant {
        Variant::Basic => {
            let mainfos: Vec<Mainfo> =
                images.iter().map(derive_mainfo).collect::<Result<_, _>>()?;
            build_mars(&mainfos, section_pages)?
        }
        Variant::Split => {
            let mainfos: Vec<SplitMainfo> = images
                .iter()
                .map(derive_split_mainfo)
                .collect::<Result<_, _>>()?;
            build_split_mars(&mainfos, section_pages)?
        }
        Variant::Merkle => return Err(BuildError::VariantMismatch),
    };
    for img in images.iter_mut() {
        img.write_mars(&section)?;
    }
    Ok(())
}

/// The signed measurement: the two-stage load order, finalized.
pub fn final_measurement(img: &EnclaveImage) -> Result<[u8; 32], BuildError> {
    Ok(measure_enclave(
        &img.params,
        img.load_order(Loader::Modified),
    )?)
}

pub(crate) fn instrument_check_group(images: &[EnclaveImage]) -> Result<(Variant, usize), BuildError> {
    check_group(images)
}
