//! Identifier scheme: sensitive header fields are replaced by a per-frame
//! rotating identifier derived from the flow's base identifier and the PN.
//!
//! ```text
//! | ridf (8) | tci (1) | sl (1) | secure data | icv (16) |
//! ```
//!
//! The TCI byte carries only the non-sensitive flags; the AN bits are zero.

use siphasher::sip::SipHasher24;
use thiserror::Error;

use crate::flow::{Accepted, Bidf, DownlinkTables, HeaderData, Ridf};
use crate::frame::{short_length_for, MacsecView, ETHERTYPE_MACSEC, ICV_LEN, MACSEC_HEADER_LEN};
use crate::time::Timestamp;

pub const RIDF_LEN: usize = 8;
pub const IDF_HEADER_LEN: usize = RIDF_LEN + 2;
/// Smallest body: header, 2 bytes of secure data, ICV.
pub const MIN_IDF_BODY_LEN: usize = IDF_HEADER_LEN + 2 + ICV_LEN;
/// Body length minus MACsec frame length.
pub const IDF_SIZE_DELTA: isize = IDF_HEADER_LEN as isize - MACSEC_HEADER_LEN as isize;

const TCI_FLAG_MASK: u8 = 0xFC;
const TCI_V: u8 = 0x80;
const TCI_SC: u8 = 0x20;
const TCI_SCB: u8 = 0x10;
const TCI_E: u8 = 0x08;

/// `SipHash-2-4(key = PN as 4 × big-endian u32, message = bidf)`.
pub fn derive_ridf(bidf: &Bidf, pn: u32) -> Ridf {
    let p = pn.to_be_bytes();
    let mut key = [0u8; 16];
    for chunk in key.chunks_mut(4) {
        chunk.copy_from_slice(&p);
    }
    Ridf(SipHasher24::new_with_key(&key).hash(&bidf.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum IdfError {
    #[error("malformed identifier frame: {0}")]
    Malformed(&'static str),
    #[error("unknown identifier")]
    UnknownIdentifier,
    #[error("replayed identifier")]
    Replay,
    #[error("packet number outside window")]
    OutOfWindow,
}

/// Encodes a MACsec frame of a flow with base identifier `bidf` and appends
/// the body to `out`.
pub fn uplink_encode(frame: &MacsecView<'_>, bidf: &Bidf, out: &mut Vec<u8>) -> Ridf {
    let ridf = derive_ridf(bidf, frame.pn());
    let bytes = frame.bytes();
    out.reserve(bytes.len() - MACSEC_HEADER_LEN + IDF_HEADER_LEN);
    out.extend_from_slice(&ridf.0.to_be_bytes());
    out.push(bytes[14] & TCI_FLAG_MASK);
    out.push(bytes[15]);
    out.extend_from_slice(frame.body());
    ridf
}

/// Borrowed, validated identifier-frame body.
#[derive(Debug, Clone, Copy)]
pub struct IdfWire<'a> {
    bytes: &'a [u8],
}

impl<'a> IdfWire<'a> {
    /// Checks everything that does not need table state.
    pub fn parse(bytes: &'a [u8]) -> Result<Self, IdfError> {
        if bytes.len() < MIN_IDF_BODY_LEN {
            return Err(IdfError::Malformed("too short"));
        }
        let tci = bytes[RIDF_LEN];
        let sl = bytes[RIDF_LEN + 1];
        if tci & TCI_V != 0 || tci & !TCI_FLAG_MASK != 0 {
            return Err(IdfError::Malformed("reserved TCI bits"));
        }
        if tci & TCI_SC == 0 || tci & TCI_E == 0 || tci & TCI_SCB != 0 {
            return Err(IdfError::Malformed("untunnelable TCI"));
        }
        let sd_len = bytes.len() - IDF_HEADER_LEN - ICV_LEN;
        if sl != short_length_for(sd_len) {
            return Err(IdfError::Malformed("short length"));
        }
        Ok(IdfWire { bytes })
    }

    pub fn ridf(&self) -> Ridf {
        let mut b = [0u8; 8];
        b.copy_from_slice(&self.bytes[..RIDF_LEN]);
        Ridf(u64::from_be_bytes(b))
    }

    pub fn tci_flags(&self) -> u8 {
        self.bytes[RIDF_LEN]
    }

    pub fn sl(&self) -> u8 {
        self.bytes[RIDF_LEN + 1]
    }

    /// Secure data and ICV.
    pub fn body(&self) -> &'a [u8] {
        &self.bytes[IDF_HEADER_LEN..]
    }
}

/// Writes the MACsec frame reconstructed from header data, PN and the wire
/// body into `out`.
pub fn reconstruct(wire: &IdfWire<'_>, header: &HeaderData, pn: u32, out: &mut Vec<u8>) {
    out.reserve(MACSEC_HEADER_LEN + wire.body().len());
    out.extend_from_slice(&header.dst.0);
    out.extend_from_slice(&header.src.0);
    out.extend_from_slice(&ETHERTYPE_MACSEC.to_be_bytes());
    out.push(wire.tci_flags() | (header.an & 0x03));
    out.push(wire.sl());
    out.extend_from_slice(&pn.to_be_bytes());
    out.extend_from_slice(&header.sci.to_bytes());
    out.extend_from_slice(wire.body());
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decoded {
    pub flow: Bidf,
    pub header: HeaderData,
    pub pn: u32,
}

/// Looks up the identifier, runs the window and writes the original frame
/// into `out` on success.
pub fn downlink_decode(
    body: &[u8],
    tables: &mut DownlinkTables,
    now: Timestamp,
    out: &mut Vec<u8>,
) -> Result<Decoded, IdfError> {
    let wire = IdfWire::parse(body)?;
    let entry = *tables.identifier(wire.ridf()).ok_or(IdfError::UnknownIdentifier)?;
    if entry.seen {
        return Err(IdfError::Replay);
    }
    match tables.accept(&entry.flow, entry.pn, now) {
        Accepted::Accept { header, pn } => {
            reconstruct(&wire, &header, pn, out);
            Ok(Decoded {
                flow: entry.flow,
                header,
                pn,
            })
        }
        Accepted::Replay => Err(IdfError::Replay),
        Accepted::OutOfWindow => Err(IdfError::OutOfWindow),
        Accepted::Unknown => Err(IdfError::UnknownIdentifier),
    }
}
