//! Resumable SHA-256 over whole 512-bit blocks.
//!
//! The measurement pipeline only ever absorbs full 64-byte blocks, which
//! keeps the intermediate state a pure `(words, byte_count)` pair that can
//! be exported, shipped to another party, and resumed there.

use thiserror::Error;

/// Input block size in bytes.
pub const BLOCK_LEN: usize = 64;
/// Digest size in bytes.
pub const DIGEST_LEN: usize = 32;
/// Serialized state size: 8 words big-endian + byte count little-endian.
pub const STATE_LEN: usize = 40;

const IV: [u32; 8] = [
    0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a, 0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19,
];

const K: [u32; 64] = [
    0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1, 0x923f82a4, 0xab1c5ed5,
    0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3, 0x72be5d74, 0x80deb1fe, 0x9bdc06a7, 0xc19bf174,
    0xe49b69c1, 0xefbe4786, 0x0fc19dc6, 0x240ca1cc, 0x2de92c6f, 0x4a7484aa, 0x5cb0a9dc, 0x76f988da,
    0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7, 0xc6e00bf3, 0xd5a79147, 0x06ca6351, 0x14292967,
    0x27b70a85, 0x2e1b2138, 0x4d2c6dfc, 0x53380d13, 0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85,
    0xa2bfe8a1, 0xa81a664b, 0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070,
    0x19a4c116, 0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a, 0x5b9cca4f, 0x682e6ff3,
    0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208, 0x90befffa, 0xa4506ceb, 0xbef9a3f7, 0xc67178f2,
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HashError {
    #[error("block must be exactly {BLOCK_LEN} bytes, got {0}")]
    BlockLength(usize),
    #[error("serialized state must be exactly {STATE_LEN} bytes, got {0}")]
    StateLength(usize),
}

/// Exportable intermediate SHA-256 state.
///
/// `byte_count` is always a multiple of [`BLOCK_LEN`]: the public API only
/// accepts whole blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashState {
    words: [u32; 8],
    byte_count: u64,
}

impl HashState {
    /// Fresh state with the FIPS 180-4 initialization vector.
    pub fn new() -> Self {
        HashState {
            words: IV,
            byte_count: 0,
        }
    }

    pub fn byte_count(&self) -> u64 {
        self.byte_count
    }

    /// Absorb one 512-bit block.
    pub fn update_block(&mut self, block: &[u8]) -> Result<(), HashError> {
        if block.len() != BLOCK_LEN {
            return Err(HashError::BlockLength(block.len()));
        }
        self.compress(block.try_into().unwrap());
        self.byte_count += BLOCK_LEN as u64;
        Ok(())
    }

    /// Absorb a whole number of blocks.
    pub fn update_blocks(&mut self, data: &[u8]) -> Result<(), HashError> {
        if data.len() % BLOCK_LEN != 0 {
            return Err(HashError::BlockLength(data.len()));
        }
        for block in data.chunks_exact(BLOCK_LEN) {
            self.update_block(block)?;
        }
        Ok(())
    }

    /// Serialize: words big-endian, then byte count little-endian.
    pub fn export(&self) -> [u8; STATE_LEN] {
        let mut out = [0u8; STATE_LEN];
        for (i, w) in self.words.iter().enumerate() {
            out[i * 4..i * 4 + 4].copy_from_slice(&w.to_be_bytes());
        }
        out[32..40].copy_from_slice(&self.byte_count.to_le_bytes());
        out
    }

    pub fn import(bytes: &[u8]) -> Result<Self, HashError> {
        if bytes.len() != STATE_LEN {
            return Err(HashError::StateLength(bytes.len()));
        }
        let mut words = [0u32; 8];
        for (i, w) in words.iter_mut().enumerate() {
            *w = u32::from_be_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap());
        }
        let byte_count = u64::from_le_bytes(bytes[32..40].try_into().unwrap());
        Ok(HashState { words, byte_count })
    }

    /// Rebuild a state from its digest-like words plus a byte count.
    pub fn from_parts(words_be: &[u8; 32], byte_count: u64) -> Self {
        let mut words = [0u32; 8];
        for (i, w) in words.iter_mut().enumerate() {
            *w = u32::from_be_bytes(words_be[i * 4..i * 4 + 4].try_into().unwrap());
        }
        HashState { words, byte_count }
    }

    /// The intermediate hash words serialized big-endian (digest convention).
    pub fn words_be(&self) -> [u8; 32] {
        let mut out = [0u8; 32];
        for (i, w) in self.words.iter().enumerate() {
            out[i * 4..i * 4 + 4].copy_from_slice(&w.to_be_bytes());
        }
        out
    }

    /// Standard Merkle-Damgard finalization over `byte_count * 8` bits.
    ///
    /// Consumes the state: a finalized state cannot absorb further blocks.
    pub fn finalize(self) -> [u8; DIGEST_LEN] {
        let mut state = self;
        // byte_count is block-aligned, so padding is exactly one block:
        // 0x80, zeros, then the 64-bit bit length big-endian.
        let mut pad = [0u8; BLOCK_LEN];
        pad[0] = 0x80;
        pad[56..64].copy_from_slice(&(state.byte_count * 8).to_be_bytes());
        state.compress(&pad);
        state.words_be()
    }

    fn compress(&mut self, block: &[u8; BLOCK_LEN]) {
        let mut w = [0u32; 64];
        for (i, chunk) in block.chunks_exact(4).enumerate() {
            w[i] = u32::from_be_bytes(chunk.try_into().unwrap());
        }
        for i in 16..64 {
            let s0 = w[i - 15].rotate_right(7) ^ w[i - 15].rotate_right(18) ^ (w[i - 15] >> 3);
            let s1 = w[i - 2].rotate_right(17) ^ w[i - 2].rotate_right(19) ^ (w[i - 2] >> 10);
            w[i] = w[i - 16]
                .wrapping_add(s0)
                .wrapping_add(w[i - 7])
                .wrapping_add(s1);
        }

        let [mut a, mut b, mut c, mut d, mut e, mut f, mut g, mut h] = self.words;
        for i in 0..64 {
            let s1 = e.rotate_right(6) ^ e.rotate_right(11) ^ e.rotate_right(25);
            let ch = (e & f) ^ (!e & g);
            let t1 = h
                .wrapping_add(s1)
                .wrapping_add(ch)
                .wrapping_add(K[i])
                .wrapping_add(w[i]);
            let s0 = a.rotate_right(2) ^ a.rotate_right(13) ^ a.rotate_right(22);
            let maj = (a & b) ^ (a & c) ^ (b & c);
            let t2 = s0.wrapping_add(maj);
            h = g;
            g = f;
            f = e;
            e = d.wrapping_add(t1);
            d = c;
            c = b;
            b = a;
            a = t1.wrapping_add(t2);
        }

        self.words[0] = self.words[0].wrapping_add(a);
        self.words[1] = self.words[1].wrapping_add(b);
        self.words[2] = self.words[2].wrapping_add(c);
        self.words[3] = self.words[3].wrapping_add(d);
        self.words[4] = self.words[4].wrapping_add(e);
        self.words[5] = self.words[5].wrapping_add(f);
        self.words[6] = self.words[6].wrapping_add(g);
        self.words[7] = self.words[7].wrapping_add(h);
    }
}

impl Default for HashState {
    fn default() -> Self {
        Self::new()
    }
}
