//! Management channel messages exchanged between gateways.
//!
//! The channel is assumed to be authenticated and ordered (a TCP stream
//! inside a VPN in real mode, an in-process queue in simulation).
//!
//! ```text
//! | magic 0x4D47 (2) | version (1) | kind (1) | length (4) | body (length) |
//! ```

use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr};
use std::time::Duration;

use thiserror::Error;

use crate::encap::GatewayId;
use crate::flow::{Bidf, Cast, HeaderData};
use crate::frame::{MacAddress, Sci};

pub const MGMT_MAGIC: u16 = 0x4D47;
pub const MGMT_VERSION: u8 = 1;
pub const MGMT_HEADER_LEN: usize = 8;
pub const MAX_MGMT_BODY: usize = 64 * 1024;
pub const DEFAULT_MGMT_PORT: u16 = 4791;
pub const HELLO_INTERVAL: Duration = Duration::from_secs(5);
/// First retransmission delay of unacknowledged messages; doubled per try.
pub const RETRANSMIT_INITIAL: Duration = Duration::from_secs(1);
pub const MAX_TRANSMISSIONS: u32 = 5;
/// MKA frames kept while a peer is unreachable.
pub const MKA_BUFFER: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MgmtMessage {
    /// Liveness and identity: the sender's tunnel endpoint.
    Hello {
        gateway: GatewayId,
    },
    FlowAnnounce {
        bidf: Bidf,
        header: HeaderData,
        pn: u32,
        cast: Cast,
    },
    FlowAck {
        bidf: Bidf,
    },
    /// The receiver's unicast flow `(sci, an)` with base identifier `bidf`
    /// has its destination behind the sender.
    FlowLearned {
        sci: Sci,
        an: u8,
        bidf: Bidf,
    },
    FlowExpire {
        bidf: Bidf,
    },
    /// New header key for traffic from the sender to the receiver.
    Rekey {
        epoch: u8,
        key: [u8; 16],
    },
    RekeyAck {
        epoch: u8,
    },
    MkaForward {
        frame: Vec<u8>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Hello = 1,
    FlowAnnounce = 2,
    FlowAck = 3,
    FlowLearned = 4,
    FlowExpire = 5,
    Rekey = 6,
    RekeyAck = 7,
    MkaForward = 8,
}

impl Kind {
    fn from_u8(v: u8) -> Option<Kind> {
        Some(match v {
            1 => Kind::Hello,
            2 => Kind::FlowAnnounce,
            3 => Kind::FlowAck,
            4 => Kind::FlowLearned,
            5 => Kind::FlowExpire,
            6 => Kind::Rekey,
            7 => Kind::RekeyAck,
            8 => Kind::MkaForward,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MgmtError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("body of {0} bytes exceeds limit")]
    TooLarge(usize),
    #[error("malformed {0:?} body")]
    Malformed(Kind),
}

impl MgmtMessage {
    pub fn kind(&self) -> Kind {
        match self {
            MgmtMessage::Hello { .. } => Kind::Hello,
            MgmtMessage::FlowAnnounce { .. } => Kind::FlowAnnounce,
            MgmtMessage::FlowAck { .. } => Kind::FlowAck,
            MgmtMessage::FlowLearned { .. } => Kind::FlowLearned,
            MgmtMessage::FlowExpire { .. } => Kind::FlowExpire,
            MgmtMessage::Rekey { .. } => Kind::Rekey,
            MgmtMessage::RekeyAck { .. } => Kind::RekeyAck,
            MgmtMessage::MkaForward { .. } => Kind::MkaForward,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::new();
        match self {
            MgmtMessage::Hello { gateway } => put_addr(&mut body, gateway.0),
            MgmtMessage::FlowAnnounce { bidf, header, pn, cast } => {
                body.extend_from_slice(&bidf.0);
                put_header(&mut body, header);
                body.extend_from_slice(&pn.to_be_bytes());
                body.push(match cast {
                    Cast::Unicast => 0,
                    Cast::Broadcast => 1,
                });
            }
            MgmtMessage::FlowAck { bidf } | MgmtMessage::FlowExpire { bidf } => body.extend_from_slice(&bidf.0),
            MgmtMessage::FlowLearned { sci, an, bidf } => {
                body.extend_from_slice(&sci.to_bytes());
                body.push(*an);
                body.extend_from_slice(&bidf.0);
            }
            MgmtMessage::Rekey { epoch, key } => {
                body.push(*epoch);
                body.extend_from_slice(key);
            }
            MgmtMessage::RekeyAck { epoch } => body.push(*epoch),
            MgmtMessage::MkaForward { frame } => body.extend_from_slice(frame),
        }
        let mut out = Vec::with_capacity(MGMT_HEADER_LEN + body.len());
        out.extend_from_slice(&MGMT_MAGIC.to_be_bytes());
        out.push(MGMT_VERSION);
        out.push(self.kind() as u8);
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
        out
    }

    /// Decodes one complete message. Returns `Ok(None)` if `buf` does not
    /// hold a full message yet, otherwise the message and bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<Option<(MgmtMessage, usize)>, MgmtError> {
        if buf.len() >= 2 && buf[..2] != MGMT_MAGIC.to_be_bytes() {
            return Err(MgmtError::BadMagic);
        }
        if buf.len() >= 3 && buf[2] != MGMT_VERSION {
            return Err(MgmtError::BadVersion(buf[2]));
        }
        if buf.len() < MGMT_HEADER_LEN {
            return Ok(None);
        }
        let kind = Kind::from_u8(buf[3]).ok_or(MgmtError::UnknownKind(buf[3]))?;
        let len = u32::from_be_bytes([buf[4], buf[5], buf[6], buf[7]]) as usize;
        if len > MAX_MGMT_BODY {
            return Err(MgmtError::TooLarge(len));
        }
        if buf.len() < MGMT_HEADER_LEN + len {
            return Ok(None);
        }
        let body = &buf[MGMT_HEADER_LEN..MGMT_HEADER_LEN + len];
        let msg = decode_body(kind, body).ok_or(MgmtError::Malformed(kind))?;
        Ok(Some((msg, MGMT_HEADER_LEN + len)))
    }
}

fn put_addr(out: &mut Vec<u8>, a: SocketAddr) {
    match a.ip() {
        IpAddr::V4(ip) => {
            out.push(4);
            out.extend_from_slice(&ip.octets());
        }
        IpAddr::V6(ip) => {
            out.push(6);
            out.extend_from_slice(&ip.octets());
        }
    }
    out.extend_from_slice(&a.port().to_be_bytes());
}

fn put_header(out: &mut Vec<u8>, h: &HeaderData) {
    out.extend_from_slice(&h.dst.0);
    out.extend_from_slice(&h.src.0);
    out.extend_from_slice(&h.sci.to_bytes());
    out.push(h.an);
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.0.len() < n {
            return None;
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Some(a)
    }

    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.take(N).map(|s| s.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|s| s[0])
    }

    fn done(&self) -> Option<()> {
        self.0.is_empty().then_some(())
    }
}

fn decode_body(kind: Kind, body: &[u8]) -> Option<MgmtMessage> {
    let mut r = Reader(body);
    let msg = match kind {
        Kind::Hello => {
            let ip = match r.u8()? {
                4 => IpAddr::V4(Ipv4Addr::from(r.array::<4>()?)),
                6 => IpAddr::V6(Ipv6Addr::from(r.array::<16>()?)),
                _ => return None,
            };
            let port = u16::from_be_bytes(r.array()?);
            MgmtMessage::Hello {
                gateway: GatewayId(SocketAddr::new(ip, port)),
            }
        }
        Kind::FlowAnnounce => {
            let bidf = Bidf(r.array()?);
            let header = HeaderData {
                dst: MacAddress(r.array()?),
                src: MacAddress(r.array()?),
                sci: Sci::from_bytes(r.array()?),
                an: r.u8()?,
            };
            let pn = u32::from_be_bytes(r.array()?);
            let cast = match r.u8()? {
                0 => Cast::Unicast,
                1 => Cast::Broadcast,
                _ => return None,
            };
            if header.an > 3 || pn == 0 || cast != header.cast() {
                return None;
            }
            MgmtMessage::FlowAnnounce { bidf, header, pn, cast }
        }
        Kind::FlowAck => MgmtMessage::FlowAck { bidf: Bidf(r.array()?) },
        Kind::FlowExpire => MgmtMessage::FlowExpire { bidf: Bidf(r.array()?) },
        Kind::FlowLearned => {
            let sci = Sci::from_bytes(r.array()?);
            let an = r.u8()?;
            if an > 3 {
                return None;
            }
            MgmtMessage::FlowLearned {
                sci,
                an,
                bidf: Bidf(r.array()?),
            }
        }
        Kind::Rekey => MgmtMessage::Rekey {
            epoch: r.u8()?,
            key: r.array()?,
        },
        Kind::RekeyAck => MgmtMessage::RekeyAck { epoch: r.u8()? },
        Kind::MkaForward => {
            let frame = r.take(body.len())?.to_vec();
            MgmtMessage::MkaForward { frame }
        }
    };
    r.done()?;
    Some(msg)
}

/// Reassembles messages from a byte stream.
#[derive(Debug, Default)]
pub struct MgmtDecoder {
    buf: Vec<u8>,
}

impl MgmtDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete message. An error means the stream is corrupt and
    /// should be closed.
    pub fn next_message(&mut self) -> Result<Option<MgmtMessage>, MgmtError> {
        match MgmtMessage::decode(&self.buf)? {
            Some((msg, used)) => {
                self.buf.drain(..used);
                Ok(Some(msg))
            }
            None => Ok(None),
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}
