//! Baseline that re-encrypts the whole MACsec frame with AES-GCM, standing in
//! for carrying the frame through a conventional VPN.
//!
//! ```text
//! | epoch (1) | seq (4) | ciphertext of the frame | tag (16) |
//! ```
//!
//! The nonce is the sender's 32-bit sequence number, zero-padded. Replays
//! are caught by a sequence window per sender.

use std::cell::Cell;

use aes_gcm::aead::{AeadInPlace, KeyInit};
use aes_gcm::{Aes128Gcm, Nonce, Tag};
use thiserror::Error;

use crate::enc::TunnelCipher;
use crate::window::{SlidingWindow, Verdict};

pub const SEQ_LEN: usize = 4;
pub const TAG_LEN: usize = 16;
pub const FULLENC_OVERHEAD: usize = 1 + SEQ_LEN + TAG_LEN;
/// Body length minus MACsec frame length.
pub const FULLENC_SIZE_DELTA: isize = FULLENC_OVERHEAD as isize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum FullEncError {
    #[error("malformed frame")]
    Malformed,
    #[error("no key for epoch {0}")]
    BadEpoch(u8),
    #[error("authentication failed")]
    BadTag,
    #[error("replayed sequence number")]
    Replay,
    #[error("sequence number outside window")]
    OutOfWindow,
}

/// AES block operations of one GCM call over `len` bytes: one per counter
/// block plus the tag mask.
pub fn gcm_block_ops(len: usize) -> u64 {
    len.div_ceil(16) as u64 + 1
}

fn nonce(seq: u32) -> Nonce<aes_gcm::aes::cipher::consts::U12> {
    let mut n = [0u8; 12];
    n[8..].copy_from_slice(&seq.to_be_bytes());
    n.into()
}

#[derive(Clone)]
pub struct FrameSealer {
    aead: Aes128Gcm,
    ops: Cell<u64>,
}

impl std::fmt::Debug for FrameSealer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrameSealer")
            .field("ops", &self.ops.get())
            .finish_non_exhaustive()
    }
}

impl TunnelCipher for FrameSealer {
    fn from_key(key: &[u8; 16]) -> Self {
        FrameSealer::new(key)
    }

    fn ops(&self) -> u64 {
        self.ops.get()
    }
}

impl FrameSealer {
    pub fn new(key: &[u8; 16]) -> Self {
        FrameSealer {
            aead: Aes128Gcm::new(key.into()),
            ops: Cell::new(0),
        }
    }

    pub fn ops(&self) -> u64 {
        self.ops.get()
    }

    /// Appends the sealed body of `frame` to `out`.
    pub fn seal(&self, frame: &[u8], epoch: u8, seq: u32, out: &mut Vec<u8>) {
        let mut aad = [0u8; 1 + SEQ_LEN];
        aad[0] = epoch;
        aad[1..].copy_from_slice(&seq.to_be_bytes());
        out.reserve(FULLENC_OVERHEAD + frame.len());
        out.extend_from_slice(&aad);
        let start = out.len();
        out.extend_from_slice(frame);
        let tag = self
            .aead
            .encrypt_in_place_detached(&nonce(seq), &aad, &mut out[start..])
            .expect("frame below GCM length limit");
        out.extend_from_slice(&tag);
        self.ops.set(self.ops.get() + gcm_block_ops(frame.len()));
    }

    /// Authenticates and decrypts `body` into `out`. Does not check replay.
    pub fn open(&self, body: &[u8], out: &mut Vec<u8>) -> Result<u32, FullEncError> {
        if body.len() < FULLENC_OVERHEAD {
            return Err(FullEncError::Malformed);
        }
        let (aad, rest) = body.split_at(1 + SEQ_LEN);
        let (ct, tag) = rest.split_at(rest.len() - TAG_LEN);
        let seq = u32::from_be_bytes([aad[1], aad[2], aad[3], aad[4]]);
        let start = out.len();
        out.extend_from_slice(ct);
        self.ops.set(self.ops.get() + gcm_block_ops(ct.len()));
        let r = self
            .aead
            .decrypt_in_place_detached(&nonce(seq), aad, &mut out[start..], Tag::from_slice(tag));
        if r.is_err() {
            out.truncate(start);
            return Err(FullEncError::BadTag);
        }
        Ok(seq)
    }
}

/// Sequence window of one sender.
#[derive(Debug, Clone)]
pub struct FullEncRx {
    window: SlidingWindow,
}

impl FullEncRx {
    pub fn new(window: u32) -> Self {
        FullEncRx {
            window: SlidingWindow::new(1, window),
        }
    }

    pub fn check(&mut self, seq: u32) -> Result<(), FullEncError> {
        if seq == 0 {
            return Err(FullEncError::OutOfWindow);
        }
        match self.window.accept(seq) {
            Verdict::Accept(_) => Ok(()),
            Verdict::Replay => Err(FullEncError::Replay),
            Verdict::OutOfWindow => Err(FullEncError::OutOfWindow),
        }
    }
}
