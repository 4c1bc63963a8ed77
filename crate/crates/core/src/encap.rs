//! Carrier header for scheme bodies on the untrusted network.
//!
//! ```text
//! | magic 0x4D53 (2) | version:4 scheme:4 (1) | reserved, zero (5) | body |
//! ```

use std::fmt;
use std::net::SocketAddr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENCAP_MAGIC: u16 = 0x4D53;
pub const ENCAP_VERSION: u8 = 1;
pub const ENCAP_HEADER_LEN: usize = 8;
/// IPv4 + UDP headers.
pub const IP_UDP_OVERHEAD: usize = 28;
pub const DEFAULT_MTU: usize = 1500;
pub const DEFAULT_TUNNEL_PORT: u16 = 4790;

/// Tunnel identity of a gateway: its UDP tunnel endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GatewayId(pub SocketAddr);

impl fmt::Display for GatewayId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl FromStr for GatewayId {
    type Err = std::net::AddrParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse().map(GatewayId)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Raw MACsec frame, headers in clear.
    Naive = 0,
    /// Rotating identifiers.
    Idf = 1,
    /// Two-block header encryption.
    Enc = 2,
    /// AEAD over the whole frame.
    FullEnc = 3,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Naive, Scheme::Idf, Scheme::Enc, Scheme::FullEnc];

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Scheme::Naive),
            1 => Some(Scheme::Idf),
            2 => Some(Scheme::Enc),
            3 => Some(Scheme::FullEnc),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Naive => "naive",
            Scheme::Idf => "idf",
            Scheme::Enc => "enc",
            Scheme::FullEnc => "fullenc",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "naive" => Ok(Scheme::Naive),
            "idf" => Ok(Scheme::Idf),
            "enc" => Ok(Scheme::Enc),
            "fullenc" => Ok(Scheme::FullEnc),
            other => Err(format!("unknown scheme {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum EncapError {
    #[error("body of {len} bytes exceeds limit {max}")]
    TooLarge { len: usize, max: usize },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown scheme {0}")]
    UnknownScheme(u8),
    #[error("reserved bytes not zero")]
    ReservedNonZero,
}

/// Largest body that fits a datagram without fragmentation.
pub fn max_body_len(mtu: usize) -> usize {
    mtu.saturating_sub(IP_UDP_OVERHEAD + ENCAP_HEADER_LEN)
}

pub fn encap_header(scheme: Scheme) -> [u8; ENCAP_HEADER_LEN] {
    let mut h = [0u8; ENCAP_HEADER_LEN];
    h[..2].copy_from_slice(&ENCAP_MAGIC.to_be_bytes());
    h[2] = (ENCAP_VERSION << 4) | scheme as u8;
    h
}

/// Prefixes `body` with the carrier header.
pub fn encap(body: &[u8], scheme: Scheme, mtu: usize) -> Result<Vec<u8>, EncapError> {
    let max = max_body_len(mtu);
    if body.len() > max {
        return Err(EncapError::TooLarge { len: body.len(), max });
    }
    let mut out = Vec::with_capacity(ENCAP_HEADER_LEN + body.len());
    out.extend_from_slice(&encap_header(scheme));
    out.extend_from_slice(body);
    Ok(out)
}

/// Validates the carrier header and splits off the body.
pub fn decap(payload: &[u8]) -> Result<(Scheme, &[u8]), EncapError> {
    if payload.len() < ENCAP_HEADER_LEN || payload[..2] != ENCAP_MAGIC.to_be_bytes() {
        return Err(EncapError::BadMagic);
    }
    let version = payload[2] >> 4;
    if version != ENCAP_VERSION {
        return Err(EncapError::BadVersion(version));
    }
    let tag = payload[2] & 0x0F;
    let scheme = Scheme::from_u8(tag).ok_or(EncapError::UnknownScheme(tag))?;
    if payload[3..ENCAP_HEADER_LEN].iter().any(|&b| b != 0) {
        return Err(EncapError::ReservedNonZero);
    }
    Ok((scheme, &payload[ENCAP_HEADER_LEN..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn idf_body_gains_eight_bytes() {
        let body = vec![0x11; 100];
        let p = encap(&body, Scheme::Idf, DEFAULT_MTU).unwrap();
        assert_eq!(p.len(), 108);
        assert_eq!(decap(&p).unwrap(), (Scheme::Idf, &body[..]));
    }

    #[test]
    fn oversize_rejected() {
        let max = max_body_len(DEFAULT_MTU);
        assert_eq!(max, 1464);
        assert!(encap(&vec![0; max], Scheme::Enc, DEFAULT_MTU).is_ok());
        assert_eq!(
            encap(&vec![0; max + 1], Scheme::Enc, DEFAULT_MTU),
            Err(EncapError::TooLarge { len: max + 1, max })
        );
    }

    #[test]
    fn header_errors() {
        assert_eq!(decap(&[0x4D, 0x53, 0x10]), Err(EncapError::BadMagic));
        assert_eq!(decap(&[]), Err(EncapError::BadMagic));
        let mut p = encap(b"x", Scheme::Naive, DEFAULT_MTU).unwrap();
        p[2] = 0x20;
        assert_eq!(decap(&p), Err(EncapError::BadVersion(2)));
        p[2] = 0x17;
        assert_eq!(decap(&p), Err(EncapError::UnknownScheme(7)));
        p[2] = 0x10;
        p[7] = 1;
        assert_eq!(decap(&p), Err(EncapError::ReservedNonZero));
    }

    proptest! {
        #[test]
        fn decap_inverts_encap(body in proptest::collection::vec(any::<u8>(), 0..1464), s in 0u8..4) {
            let scheme = Scheme::from_u8(s).unwrap();
            let p = encap(&body, scheme, DEFAULT_MTU).unwrap();
            prop_assert_eq!(p.len(), body.len() + ENCAP_HEADER_LEN);
            let (sc, b) = decap(&p).unwrap();
            prop_assert_eq!(sc, scheme);
            prop_assert_eq!(b, &body[..]);
        }
    }
}
