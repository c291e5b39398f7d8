//! Software model of SGX enclave measurement with group mutual
//! attestation: resumable SHA-256 measurement, a flat image format with a
//! reserved in-enclave section, group instrumentation, runtime derivation
//! of peer measurements, simulated local attestation and a secret
//! migration protocol.

pub mod attest;
pub mod build;
pub mod derive;
pub mod fixtures;
pub mod hash;
pub mod image;
pub mod measure;
pub mod merkle;
pub mod protocol;

#[cfg(test)]
pub(crate) mod testutil;

pub use attest::{Platform, Report};
pub use build::{
    build_mars, derive_mainfo, final_measurement, instrument_group, mars_capacity,
    mars_pages_needed, BuildError, Mainfo, SplitMainfo, MAINFO_LEN, SPLIT_MAINFO_LEN,
};
pub use derive::{
    derive_measurement, derive_measurement_split, mage_size, merkle_derive, DeriveError, MageView,
};
pub use hash::{HashError, HashState};
pub use image::{EnclaveImage, ImageError, Loader, MarsRange, Variant, PAGE_RECORD_LEN};
pub use measure::{
    measure_enclave, premeasure_enclave, EnclaveParams, MeasureError, MeasuredPage, SecInfo,
    BLOCKS_PER_PAGE, CHUNK_SIZE, PAGE_SIZE,
};
pub use merkle::{instrument_group_merkle, MerkleSidecar, MerkleTree};
pub use protocol::{
    run_session, AbortReason, Adversary, Channel, EnclaveRuntime, Env, KeyExchange, Message,
    ProtocolError, SessionOutcome, SessionState, ToyGroupKex, X25519Kex,
};
