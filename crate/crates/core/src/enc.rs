//! Header encryption scheme: the first 32 bytes of the frame (all MACsec
//! header fields and 4 bytes of secure data) are encrypted as two chained
//! AES blocks.
//!
//! ```text
//! c2 = E(p2)
//! c1 = E(p1 ^ p2 ^ c2)
//!
//! | epoch (1) | c1 (16) | c2 (16) | rest of secure data | icv (16) |
//! ```
//!
//! There is no tag; a packet is authentic if the decrypted header matches a
//! registered flow and its PN passes the window.

use std::cell::Cell;
use std::time::Duration;

use aes::cipher::{BlockDecrypt, BlockEncrypt, KeyInit};
use aes::Aes128;
use thiserror::Error;

use crate::flow::{Accepted, Bidf, DownlinkTables, HeaderData};
use crate::frame::{MacsecView, MIN_MACSEC_FRAME_LEN};
use crate::time::Timestamp;

pub const BLOCK_LEN: usize = 16;
pub const HEADER_BLOCKS_LEN: usize = 2 * BLOCK_LEN;
pub const EPOCH_LEN: usize = 1;
pub const MIN_ENC_BODY_LEN: usize = EPOCH_LEN + MIN_MACSEC_FRAME_LEN;
/// Body length minus MACsec frame length.
pub const ENC_SIZE_DELTA: isize = EPOCH_LEN as isize;
/// Both epochs are accepted for this long after a new key is installed.
pub const DEFAULT_GRACE: Duration = Duration::from_secs(2);

pub type Block = [u8; BLOCK_LEN];

fn xor(a: &Block, b: &Block) -> Block {
    let mut o = [0u8; BLOCK_LEN];
    for i in 0..BLOCK_LEN {
        o[i] = a[i] ^ b[i];
    }
    o
}

/// AES-128 with a block-operation counter.
#[derive(Clone)]
pub struct HeaderCipher {
    aes: Aes128,
    ops: Cell<u64>,
}

impl std::fmt::Debug for HeaderCipher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HeaderCipher")
            .field("ops", &self.ops.get())
            .finish_non_exhaustive()
    }
}

impl HeaderCipher {
    pub fn new(key: &[u8; 16]) -> Self {
        HeaderCipher {
            aes: Aes128::new(key.into()),
            ops: Cell::new(0),
        }
    }

    /// Block cipher calls so far.
    pub fn ops(&self) -> u64 {
        self.ops.get()
    }

    pub fn encrypt_block(&self, b: &Block) -> Block {
        self.ops.set(self.ops.get() + 1);
        let mut blk = (*b).into();
        self.aes.encrypt_block(&mut blk);
        blk.into()
    }

    pub fn decrypt_block(&self, b: &Block) -> Block {
        self.ops.set(self.ops.get() + 1);
        let mut blk = (*b).into();
        self.aes.decrypt_block(&mut blk);
        blk.into()
    }

    pub fn header_encrypt(&self, p1: &Block, p2: &Block) -> (Block, Block) {
        let c2 = self.encrypt_block(p2);
        let c1 = self.encrypt_block(&xor(&xor(p1, p2), &c2));
        (c1, c2)
    }

    pub fn header_decrypt(&self, c1: &Block, c2: &Block) -> (Block, Block) {
        let p2 = self.decrypt_block(c2);
        let p1 = xor(&xor(&self.decrypt_block(c1), &p2), c2);
        (p1, p2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TunnelKey {
    pub key: [u8; 16],
    pub epoch: u8,
}

/// A keyed per-packet transform whose block operations are counted.
pub trait TunnelCipher {
    fn from_key(key: &[u8; 16]) -> Self;
    fn ops(&self) -> u64;
}

impl TunnelCipher for HeaderCipher {
    fn from_key(key: &[u8; 16]) -> Self {
        HeaderCipher::new(key)
    }

    fn ops(&self) -> u64 {
        self.ops.get()
    }
}

/// Receive keys of one sending gateway: the current epoch and, until its
/// grace deadline, the previous one.
#[derive(Debug, Clone)]
pub struct KeyRing<C = HeaderCipher> {
    current: Option<(u8, C)>,
    previous: Option<(u8, C, Timestamp)>,
    retired_ops: u64,
}

impl<C> Default for KeyRing<C> {
    fn default() -> Self {
        KeyRing {
            current: None,
            previous: None,
            retired_ops: 0,
        }
    }
}

impl<C: TunnelCipher> KeyRing<C> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Installs `key` as current. Re-installing the current epoch is a no-op.
    pub fn install(&mut self, key: TunnelKey, now: Timestamp, grace: Duration) {
        if matches!(&self.current, Some((e, _)) if *e == key.epoch) {
            return;
        }
        if let Some((_, c, _)) = self.previous.take() {
            self.retired_ops += c.ops();
        }
        if let Some((e, c)) = self.current.take() {
            self.previous = Some((e, c, now + grace));
        }
        self.current = Some((key.epoch, C::from_key(&key.key)));
    }

    pub fn current_epoch(&self) -> Option<u8> {
        self.current.as_ref().map(|(e, _)| *e)
    }

    pub fn select(&self, epoch: u8, now: Timestamp) -> Option<&C> {
        match (&self.current, &self.previous) {
            (Some((e, c)), _) if *e == epoch => Some(c),
            (_, Some((e, c, deadline))) if *e == epoch && now <= *deadline => Some(c),
            _ => None,
        }
    }

    /// Block operations of every key this ring has held.
    pub fn ops(&self) -> u64 {
        self.retired_ops
            + self.current.as_ref().map_or(0, |(_, c)| c.ops())
            + self.previous.as_ref().map_or(0, |(_, c, _)| c.ops())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum EncError {
    #[error("malformed encrypted frame")]
    Malformed,
    #[error("no key for epoch {0}")]
    BadEpoch(u8),
    #[error("decrypted header does not belong to a known flow")]
    UnknownFlow,
    #[error("decrypted header does not match the flow")]
    HeaderMismatch,
    #[error("replayed packet number")]
    Replay,
    #[error("packet number outside window")]
    OutOfWindow,
}

/// Encrypts the header of `frame` and appends the body to `out`.
pub fn uplink_encode(frame: &MacsecView<'_>, cipher: &HeaderCipher, epoch: u8, out: &mut Vec<u8>) {
    let bytes = frame.bytes();
    let mut p1 = [0u8; BLOCK_LEN];
    let mut p2 = [0u8; BLOCK_LEN];
    p1.copy_from_slice(&bytes[..BLOCK_LEN]);
    p2.copy_from_slice(&bytes[BLOCK_LEN..HEADER_BLOCKS_LEN]);
    let (c1, c2) = cipher.header_encrypt(&p1, &p2);
    out.reserve(EPOCH_LEN + bytes.len());
    out.push(epoch);
    out.extend_from_slice(&c1);
    out.extend_from_slice(&c2);
    out.extend_from_slice(&bytes[HEADER_BLOCKS_LEN..]);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decoded {
    pub flow: Bidf,
    pub header: HeaderData,
    pub pn: u32,
}

/// Decrypts the header, authenticates it against the flow table and the
/// window, and writes the original frame into `out` on success. `out` is
/// left unchanged on failure.
pub fn downlink_decode(
    body: &[u8],
    keys: Option<&KeyRing<HeaderCipher>>,
    tables: &mut DownlinkTables,
    now: Timestamp,
    out: &mut Vec<u8>,
) -> Result<Decoded, EncError> {
    if body.len() < MIN_ENC_BODY_LEN {
        return Err(EncError::Malformed);
    }
    let epoch = body[0];
    let cipher = keys
        .and_then(|k| k.select(epoch, now))
        .ok_or(EncError::BadEpoch(epoch))?;
    let mut c1 = [0u8; BLOCK_LEN];
    let mut c2 = [0u8; BLOCK_LEN];
    c1.copy_from_slice(&body[1..1 + BLOCK_LEN]);
    c2.copy_from_slice(&body[1 + BLOCK_LEN..1 + HEADER_BLOCKS_LEN]);
    let (p1, p2) = cipher.header_decrypt(&c1, &c2);

    let start = out.len();
    out.reserve(body.len() - EPOCH_LEN);
    out.extend_from_slice(&p1);
    out.extend_from_slice(&p2);
    out.extend_from_slice(&body[1 + HEADER_BLOCKS_LEN..]);
    let result = authenticate(&out[start..], tables, now);
    if result.is_err() {
        out.truncate(start);
    }
    result
}

fn authenticate(frame: &[u8], tables: &mut DownlinkTables, now: Timestamp) -> Result<Decoded, EncError> {
    let view = MacsecView::parse(frame).map_err(|_| EncError::HeaderMismatch)?;
    if !view.tci().is_tunnelable() {
        return Err(EncError::HeaderMismatch);
    }
    let got = HeaderData::of(&view);
    let entry = tables.flow_by_key(&got.key()).ok_or(EncError::UnknownFlow)?;
    if entry.header != got {
        return Err(EncError::HeaderMismatch);
    }
    let flow = entry.bidf;
    match tables.accept(&flow, view.pn(), now) {
        Accepted::Accept { header, pn } => Ok(Decoded { flow, header, pn }),
        Accepted::Replay => Err(EncError::Replay),
        Accepted::OutOfWindow => Err(EncError::OutOfWindow),
        Accepted::Unknown => Err(EncError::UnknownFlow),
    }
}
