//! Ethernet and MACsec (IEEE 802.1AE) framing.
//!
//! Wire layout of a MACsec frame handled here (SCI always present):
//!
//! ```text
//! | dst (6) | src (6) | 0x88E5 (2) | TCI/AN (1) | SL (1) | PN (4) | SCI (8) | secure data | ICV (16) |
//! ```
//!
//! The secure data starts with the original EtherType, encrypted together
//! with the payload. Multi-byte fields are big-endian.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use aes_gcm::aead::AeadInPlace;
use aes_gcm::{Aes128Gcm, KeyInit, Nonce, Tag};
use thiserror::Error;

/// EtherType of MACsec frames.
pub const ETHERTYPE_MACSEC: u16 = 0x88E5;
/// EtherType of EAPOL, which carries MKA.
pub const ETHERTYPE_EAPOL: u16 = 0x888E;

/// Length of an Ethernet header (two addresses plus EtherType).
pub const ETH_HEADER_LEN: usize = 14;
/// TCI/AN, SL, PN and SCI.
pub const SECTAG_LEN: usize = 14;
/// Everything in front of the secure data.
pub const MACSEC_HEADER_LEN: usize = ETH_HEADER_LEN + SECTAG_LEN;
/// GCM-AES-128 tag length.
pub const ICV_LEN: usize = 16;
/// Header, the moved EtherType and the ICV.
pub const MIN_MACSEC_FRAME_LEN: usize = MACSEC_HEADER_LEN + 2 + ICV_LEN;
/// Largest secure-data length that is still signalled in SL.
pub const MAX_SHORT_LENGTH: usize = 48;
/// Payload limit of an untagged frame.
pub const MAX_PLAIN_PAYLOAD: usize = 1500;

const TCI_V: u8 = 0x80;
const TCI_ES: u8 = 0x40;
const TCI_SC: u8 = 0x20;
const TCI_SCB: u8 = 0x10;
const TCI_E: u8 = 0x08;
const TCI_C: u8 = 0x04;
const AN_MASK: u8 = 0x03;
const SL_RESERVED: u8 = 0xC0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("frame too short ({0} bytes)")]
    TooShort(usize),
    #[error("unexpected EtherType {0:#06x}")]
    WrongEtherType(u16),
    #[error("reserved bits set in SecTAG")]
    ReservedBitsSet,
    #[error("version bit set in TCI")]
    VersionBitSet,
    #[error("SCI not present (unsupported MACsec mode)")]
    ScAbsent,
    #[error("short length {sl} does not match secure data length {len}")]
    ShortLengthMismatch { sl: u8, len: usize },
    #[error("packet number 0 is reserved")]
    ZeroPn,
    #[error("invariant violated: {0}")]
    InvariantViolation(&'static str),
    #[error("ICV mismatch")]
    IcvMismatch,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct MacAddress(pub [u8; 6]);

impl MacAddress {
    pub const BROADCAST: MacAddress = MacAddress([0xFF; 6]);

    pub fn is_broadcast(&self) -> bool {
        *self == Self::BROADCAST
    }

    /// Group address: lowest bit of the first octet set.
    pub fn is_multicast(&self) -> bool {
        self.0[0] & 0x01 != 0
    }

    pub fn octets(&self) -> [u8; 6] {
        self.0
    }

    fn from_slice(b: &[u8]) -> Self {
        let mut o = [0u8; 6];
        o.copy_from_slice(&b[..6]);
        MacAddress(o)
    }
}

impl fmt::Display for MacAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = &self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            o[0], o[1], o[2], o[3], o[4], o[5]
        )
    }
}

impl fmt::Debug for MacAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for MacAddress {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut o = [0u8; 6];
        let mut parts = s.split([':', '-']);
        for slot in o.iter_mut() {
            let p = parts.next().ok_or_else(|| format!("bad MAC address {s:?}"))?;
            *slot = u8::from_str_radix(p, 16).map_err(|_| format!("bad MAC address {s:?}"))?;
        }
        if parts.next().is_some() {
            return Err(format!("bad MAC address {s:?}"));
        }
        Ok(MacAddress(o))
    }
}

/// Secure Channel Identifier: system MAC address plus port, 8 bytes on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sci {
    pub system_id: MacAddress,
    pub port: u16,
}

impl Sci {
    pub fn new(system_id: MacAddress, port: u16) -> Self {
        Sci { system_id, port }
    }

    pub fn to_bytes(&self) -> [u8; 8] {
        let mut b = [0u8; 8];
        b[..6].copy_from_slice(&self.system_id.0);
        b[6..].copy_from_slice(&self.port.to_be_bytes());
        b
    }

    pub fn from_bytes(b: [u8; 8]) -> Self {
        Sci {
            system_id: MacAddress::from_slice(&b[..6]),
            port: u16::from_be_bytes([b[6], b[7]]),
        }
    }
}

impl fmt::Display for Sci {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.system_id, self.port)
    }
}

/// Tag Control Information and Association Number.
///
/// The version bit is always zero and therefore not represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tci {
    pub es: bool,
    pub sc: bool,
    pub scb: bool,
    pub e: bool,
    pub c: bool,
    pub an: u8,
}

impl Tci {
    /// The only shape tunneled end-to-end: SCI present, payload encrypted.
    pub fn encrypted(an: u8) -> Self {
        Tci {
            es: false,
            sc: true,
            scb: false,
            e: true,
            c: false,
            an,
        }
    }

    pub fn to_byte(&self) -> u8 {
        let mut b = self.an & AN_MASK;
        if self.es {
            b |= TCI_ES;
        }
        if self.sc {
            b |= TCI_SC;
        }
        if self.scb {
            b |= TCI_SCB;
        }
        if self.e {
            b |= TCI_E;
        }
        if self.c {
            b |= TCI_C;
        }
        b
    }

    pub fn from_byte(b: u8) -> Result<Self, FrameError> {
        if b & TCI_V != 0 {
            return Err(FrameError::VersionBitSet);
        }
        Ok(Tci {
            es: b & TCI_ES != 0,
            sc: b & TCI_SC != 0,
            scb: b & TCI_SCB != 0,
            e: b & TCI_E != 0,
            c: b & TCI_C != 0,
            an: b & AN_MASK,
        })
    }

    /// Whether the gateway can tunnel frames of this shape.
    pub fn is_tunnelable(&self) -> bool {
        self.sc && self.e && !self.scb
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SecTag {
    pub tci: Tci,
    pub sl: u8,
    pub pn: u32,
    pub sci: Sci,
}

/// Short-length rule: the secure-data length when at most 48 bytes, otherwise 0.
pub fn short_length_for(secure_data_len: usize) -> u8 {
    if secure_data_len <= MAX_SHORT_LENGTH {
        secure_data_len as u8
    } else {
        0
    }
}

/// A parsed MACsec frame.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MacsecFrame {
    pub dst: MacAddress,
    pub src: MacAddress,
    pub sectag: SecTag,
    /// Encrypted original EtherType and payload.
    pub secure_data: Vec<u8>,
    pub icv: [u8; ICV_LEN],
}

impl MacsecFrame {
    pub fn parse(bytes: &[u8]) -> Result<Self, FrameError> {
        MacsecView::parse(bytes).map(|v| v.to_frame())
    }

    /// Serializes the frame. SL is recomputed from the secure-data length.
    pub fn to_bytes(&self) -> Result<Vec<u8>, FrameError> {
        let mut out = Vec::with_capacity(self.wire_len());
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn write_to(&self, out: &mut Vec<u8>) -> Result<(), FrameError> {
        self.check()?;
        out.extend_from_slice(&self.header_bytes());
        out.extend_from_slice(&self.secure_data);
        out.extend_from_slice(&self.icv);
        Ok(())
    }

    pub fn wire_len(&self) -> usize {
        MACSEC_HEADER_LEN + self.secure_data.len() + ICV_LEN
    }

    fn check(&self) -> Result<(), FrameError> {
        let t = &self.sectag;
        if t.tci.an > 3 {
            return Err(FrameError::InvariantViolation("association number above 3"));
        }
        if !t.tci.sc {
            return Err(FrameError::ScAbsent);
        }
        if t.pn == 0 {
            return Err(FrameError::ZeroPn);
        }
        if self.secure_data.len() < 2 {
            return Err(FrameError::InvariantViolation("secure data shorter than 2 bytes"));
        }
        Ok(())
    }

    /// The 28 header bytes, with SL derived from the secure data.
    pub fn header_bytes(&self) -> [u8; MACSEC_HEADER_LEN] {
        let t = &self.sectag;
        let mut h = [0u8; MACSEC_HEADER_LEN];
        h[0..6].copy_from_slice(&self.dst.0);
        h[6..12].copy_from_slice(&self.src.0);
        h[12..14].copy_from_slice(&ETHERTYPE_MACSEC.to_be_bytes());
        h[14] = t.tci.to_byte();
        h[15] = short_length_for(self.secure_data.len());
        h[16..20].copy_from_slice(&t.pn.to_be_bytes());
        h[20..28].copy_from_slice(&t.sci.to_bytes());
        h
    }

    pub fn flow_dst_is_broadcast(&self) -> bool {
        self.dst.is_broadcast()
    }
}

pub fn parse_macsec(bytes: &[u8]) -> Result<MacsecFrame, FrameError> {
    MacsecFrame::parse(bytes)
}

pub fn build_macsec(frame: &MacsecFrame) -> Result<Vec<u8>, FrameError> {
    frame.to_bytes()
}

/// Zero-copy validated view over MACsec frame bytes.
#[derive(Debug, Clone, Copy)]
pub struct MacsecView<'a> {
    bytes: &'a [u8],
    tci: Tci,
}

impl<'a> MacsecView<'a> {
    pub fn parse(bytes: &'a [u8]) -> Result<Self, FrameError> {
        if bytes.len() < MIN_MACSEC_FRAME_LEN {
            return Err(FrameError::TooShort(bytes.len()));
        }
        let et = u16::from_be_bytes([bytes[12], bytes[13]]);
        if et != ETHERTYPE_MACSEC {
            return Err(FrameError::WrongEtherType(et));
        }
        let tci = Tci::from_byte(bytes[14])?;
        if bytes[15] & SL_RESERVED != 0 {
            return Err(FrameError::ReservedBitsSet);
        }
        if !tci.sc {
            return Err(FrameError::ScAbsent);
        }
        let view = MacsecView { bytes, tci };
        let sl = bytes[15];
        let len = view.secure_data().len();
        if sl != short_length_for(len) {
            return Err(FrameError::ShortLengthMismatch { sl, len });
        }
        if view.pn() == 0 {
            return Err(FrameError::ZeroPn);
        }
        Ok(view)
    }

    pub fn bytes(&self) -> &'a [u8] {
        self.bytes
    }

    pub fn dst(&self) -> MacAddress {
        MacAddress::from_slice(&self.bytes[0..6])
    }

    pub fn src(&self) -> MacAddress {
        MacAddress::from_slice(&self.bytes[6..12])
    }

    pub fn tci(&self) -> Tci {
        self.tci
    }

    pub fn an(&self) -> u8 {
        self.tci.an
    }

    pub fn sl(&self) -> u8 {
        self.bytes[15]
    }

    pub fn pn(&self) -> u32 {
        u32::from_be_bytes([self.bytes[16], self.bytes[17], self.bytes[18], self.bytes[19]])
    }

    pub fn sci(&self) -> Sci {
        let mut b = [0u8; 8];
        b.copy_from_slice(&self.bytes[20..28]);
        Sci::from_bytes(b)
    }

    pub fn secure_data(&self) -> &'a [u8] {
        &self.bytes[MACSEC_HEADER_LEN..self.bytes.len() - ICV_LEN]
    }

    pub fn icv(&self) -> &'a [u8] {
        &self.bytes[self.bytes.len() - ICV_LEN..]
    }

    /// Secure data followed by the ICV: everything after the SecTAG.
    pub fn body(&self) -> &'a [u8] {
        &self.bytes[MACSEC_HEADER_LEN..]
    }

    pub fn to_frame(&self) -> MacsecFrame {
        let mut icv = [0u8; ICV_LEN];
        icv.copy_from_slice(self.icv());
        MacsecFrame {
            dst: self.dst(),
            src: self.src(),
            sectag: SecTag {
                tci: self.tci,
                sl: self.sl(),
                pn: self.pn(),
                sci: self.sci(),
            },
            secure_data: self.secure_data().to_vec(),
            icv,
        }
    }
}

/// An unprotected Ethernet frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlainFrame {
    pub dst: MacAddress,
    pub src: MacAddress,
    pub ethertype: u16,
    pub payload: Vec<u8>,
}

impl PlainFrame {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(ETH_HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.dst.0);
        out.extend_from_slice(&self.src.0);
        out.extend_from_slice(&self.ethertype.to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, FrameError> {
        if bytes.len() < ETH_HEADER_LEN {
            return Err(FrameError::TooShort(bytes.len()));
        }
        Ok(PlainFrame {
            dst: MacAddress::from_slice(&bytes[0..6]),
            src: MacAddress::from_slice(&bytes[6..12]),
            ethertype: u16::from_be_bytes([bytes[12], bytes[13]]),
            payload: bytes[ETH_HEADER_LEN..].to_vec(),
        })
    }
}

/// EtherType of a raw Ethernet frame, if it has a complete header.
pub fn ethertype_of(bytes: &[u8]) -> Option<u16> {
    (bytes.len() >= ETH_HEADER_LEN).then(|| u16::from_be_bytes([bytes[12], bytes[13]]))
}

/// Key-agreement (EAPOL) traffic that the gateway diverts to the management channel.
pub fn is_mka(bytes: &[u8]) -> bool {
    ethertype_of(bytes) == Some(ETHERTYPE_EAPOL)
}

/// GCM-AES-128 key of one security association.
#[derive(Clone)]
pub struct SaKey {
    cipher: Aes128Gcm,
}

impl fmt::Debug for SaKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SaKey(..)")
    }
}

/// IV = SCI || PN.
fn macsec_nonce(sci: &Sci, pn: u32) -> [u8; 12] {
    let mut iv = [0u8; 12];
    iv[..8].copy_from_slice(&sci.to_bytes());
    iv[8..].copy_from_slice(&pn.to_be_bytes());
    iv
}

impl SaKey {
    pub fn new(key: &[u8; 16]) -> Self {
        SaKey {
            cipher: Aes128Gcm::new(key.into()),
        }
    }

    /// Encrypts and authenticates `plain` as a MACsec frame.
    pub fn protect(&self, plain: &PlainFrame, sci: Sci, an: u8, pn: u32) -> Result<MacsecFrame, FrameError> {
        if plain.payload.len() > MAX_PLAIN_PAYLOAD {
            return Err(FrameError::InvariantViolation("payload above MTU"));
        }
        let mut secure_data = Vec::with_capacity(2 + plain.payload.len());
        secure_data.extend_from_slice(&plain.ethertype.to_be_bytes());
        secure_data.extend_from_slice(&plain.payload);
        let mut frame = MacsecFrame {
            dst: plain.dst,
            src: plain.src,
            sectag: SecTag {
                tci: Tci::encrypted(an),
                sl: 0,
                pn,
                sci,
            },
            secure_data,
            icv: [0u8; ICV_LEN],
        };
        frame.check()?;
        frame.sectag.sl = short_length_for(frame.secure_data.len());
        let aad = frame.header_bytes();
        let nonce = macsec_nonce(&sci, pn);
        let tag = self
            .cipher
            .encrypt_in_place_detached(Nonce::from_slice(&nonce), &aad, &mut frame.secure_data)
            .map_err(|_| FrameError::InvariantViolation("GCM input too long"))?;
        frame.icv.copy_from_slice(&tag);
        Ok(frame)
    }

    pub fn verify(&self, frame: &MacsecFrame) -> Result<PlainFrame, FrameError> {
        frame.check()?;
        let aad = frame.header_bytes();
        let mut data = frame.secure_data.clone();
        let nonce = macsec_nonce(&frame.sectag.sci, frame.sectag.pn);
        self.cipher
            .decrypt_in_place_detached(Nonce::from_slice(&nonce), &aad, &mut data, Tag::from_slice(&frame.icv))
            .map_err(|_| FrameError::IcvMismatch)?;
        let payload = data.split_off(2);
        Ok(PlainFrame {
            dst: frame.dst,
            src: frame.src,
            ethertype: u16::from_be_bytes([data[0], data[1]]),
            payload,
        })
    }

    /// Parses and verifies raw frame bytes.
    pub fn verify_bytes(&self, bytes: &[u8]) -> Result<PlainFrame, FrameError> {
        let frame = MacsecFrame::parse(bytes)?;
        self.verify(&frame)
    }
}

pub fn endpoint_protect(
    plain: &PlainFrame,
    key: &[u8; 16],
    sci: Sci,
    an: u8,
    pn: u32,
) -> Result<MacsecFrame, FrameError> {
    SaKey::new(key).protect(plain, sci, an, pn)
}

pub fn endpoint_verify(frame: &MacsecFrame, key: &[u8; 16]) -> Result<PlainFrame, FrameError> {
    SaKey::new(key).verify(frame)
}

/// MACsec header fields, partitioned by whether they leak anything to an
/// observer of tunneled traffic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeaderField {
    Dst,
    Src,
    EtherType,
    TciFlags,
    An,
    ShortLength,
    Pn,
    Sci,
}

/// Fields that must never appear in clear on the untrusted network.
pub const SENSITIVE_FIELDS: [HeaderField; 6] = [
    HeaderField::Dst,
    HeaderField::Src,
    HeaderField::EtherType,
    HeaderField::Pn,
    HeaderField::Sci,
    HeaderField::An,
];

/// Fields carried verbatim.
pub const NON_SENSITIVE_FIELDS: [HeaderField; 2] = [HeaderField::TciFlags, HeaderField::ShortLength];

impl HeaderField {
    pub const ALL: [HeaderField; 8] = [
        HeaderField::Dst,
        HeaderField::Src,
        HeaderField::EtherType,
        HeaderField::TciFlags,
        HeaderField::An,
        HeaderField::ShortLength,
        HeaderField::Pn,
        HeaderField::Sci,
    ];

    pub fn is_sensitive(self) -> bool {
        SENSITIVE_FIELDS.contains(&self)
    }

    /// Byte range in the MACsec frame and the bit mask within those bytes.
    pub fn wire_span(self) -> (Range<usize>, u8) {
        match self {
            HeaderField::Dst => (0..6, 0xFF),
            HeaderField::Src => (6..12, 0xFF),
            HeaderField::EtherType => (12..14, 0xFF),
            HeaderField::TciFlags => (14..15, !AN_MASK),
            HeaderField::An => (14..15, AN_MASK),
            HeaderField::ShortLength => (15..16, 0xFF),
            HeaderField::Pn => (16..20, 0xFF),
            HeaderField::Sci => (20..28, 0xFF),
        }
    }
}
