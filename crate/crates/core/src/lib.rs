//! Layer-2 tunnel gateways that carry MACsec frames across an untrusted
//! network while hiding their headers.

pub mod bench;
pub mod enc;
pub mod encap;
pub mod flow;
pub mod frame;
pub mod fullenc;
pub mod gateway;
pub mod idf;
pub mod mgmt;
pub mod runtime;
pub mod sim;
pub mod time;
pub mod window;
