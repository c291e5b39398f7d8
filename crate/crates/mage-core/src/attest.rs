//! Software stand-in for SGX local attestation: a per-platform root
//! secret, measurement-bound report keys, report generation and
//! verification.
//!
//! Report keys never cross the module boundary; callers only see reports
//! and accept/reject decisions. The MAC construction is HMAC-SHA-256.

use hmac::{Hmac, KeyInit, Mac};
use sha2::Sha256;
use thiserror::Error;

type HmacSha256 = Hmac<Sha256>;

pub const REPORT_DATA_LEN: usize = 64;
pub const REPORT_WIRE_LEN: usize = 32 + REPORT_DATA_LEN + 32;

/// Name of the MAC construction, recorded in protocol transcripts.
pub const MAC_CONSTRUCTION: &str = "hmac-sha256";

const REPORT_KEY_LABEL: &[u8] = b"REPORTKEY";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AttestError {
    #[error("report data must be exactly {REPORT_DATA_LEN} bytes, got {0}")]
    ReportDataLength(usize),
    #[error("report wire form must be exactly {REPORT_WIRE_LEN} bytes, got {0}")]
    ReportWireLength(usize),
}

/// A simulated SGX platform: fused identity plus root secret.
#[derive(Clone)]
pub struct Platform {
    pub platform_id: [u8; 16],
    root_secret: [u8; 32],
}

/// Local-attestation report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub attester_measurement: [u8; 32],
    pub report_data: [u8; REPORT_DATA_LEN],
    pub mac: [u8; 32],
}

impl Report {
    /// Wire encoding: attester measurement, report data, MAC. No framing.
    pub fn to_bytes(&self) -> [u8; REPORT_WIRE_LEN] {
        let mut out = [0u8; REPORT_WIRE_LEN];
        out[..32].copy_from_slice(&self.attester_measurement);
        out[32..96].copy_from_slice(&self.report_data);
        out[96..].copy_from_slice(&self.mac);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AttestError> {
        if bytes.len() != REPORT_WIRE_LEN {
            return Err(AttestError::ReportWireLength(bytes.len()));
        }
        Ok(Report {
            attester_measurement: bytes[..32].try_into().unwrap(),
            report_data: bytes[32..96].try_into().unwrap(),
            mac: bytes[96..].try_into().unwrap(),
        })
    }
}

impl Platform {
    pub fn new(platform_id: [u8; 16], root_secret: [u8; 32]) -> Self {
        Platform {
            platform_id,
            root_secret,
        }
    }

    // Report key for an enclave identified by its measurement. Private:
    // only the platform hands out MACs, never keys.
    fn report_key(&self, enclave_measurement: &[u8; 32]) -> [u8; 32] {
        let mut mac = HmacSha256::new_from_slice(&self.root_secret).expect("any key length");
        mac.update(REPORT_KEY_LABEL);
        mac.update(enclave_measurement);
        mac.finalize().into_bytes().into()
    }

    fn report_mac(
        &self,
        target_measurement: &[u8; 32],
        attester_measurement: &[u8; 32],
        report_data: &[u8; REPORT_DATA_LEN],
    ) -> [u8; 32] {
        let key = self.report_key(target_measurement);
        let mut mac = HmacSha256::new_from_slice(&key).expect("any key length");
        mac.update(attester_measurement);
        mac.update(report_data);
        mac.finalize().into_bytes().into()
    }

    /// EREPORT analog: produce a report MACed under the target enclave's
    /// report key.
    pub fn ereport(
        &self,
        attester_measurement: [u8; 32],
        target_measurement: [u8; 32],
        report_data: &[u8],
    ) -> Result<Report, AttestError> {
        if report_data.len() != REPORT_DATA_LEN {
            return Err(AttestError::ReportDataLength(report_data.len()));
        }
        let data: [u8; REPORT_DATA_LEN] = report_data.try_into().unwrap();
        let mac = self.report_mac(&target_measurement, &attester_measurement, &data);
        Ok(Report {
            attester_measurement,
            report_data: data,
            mac,
        })
    }

    /// Verify a report inside the target enclave: recompute the MAC with
    /// the caller's own report key. Reject is a value, not an error.
    pub fn verify_report(&self, own_measurement: [u8; 32], report: &Report) -> bool {
        let expected = self.report_mac(
            &own_measurement,
            &report.attester_measurement,
            &report.report_data,
        );
        // Fixed-shape comparison over all 32 bytes.
        expected
            .iter()
            .zip(report.mac.iter())
            .fold(0u8, |acc, (a, b)| acc | (a ^ b))
            == 0
    }
}

impl std::fmt::Debug for Platform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // Never print the root secret.
        f.debug_struct("Platform")
            .field("platform_id", &self.platform_id)
            .finish_non_exhaustive()
    }
}
