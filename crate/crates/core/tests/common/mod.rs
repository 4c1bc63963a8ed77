//! Oracles and generators shared by the integration tests. Everything here
//! is written from the algorithm definitions, not from the crate's code.

#![allow(dead_code)]

pub mod vectors;

use std::collections::BTreeSet;

use msec_tunnel::frame::{MacAddress, MacsecFrame, Sci, SecTag, Tci, ICV_LEN};
use rand::{Rng, RngCore};

// ---------------------------------------------------------------------------
// SipHash-2-4, straight from the published round description.

fn sipround(v: &mut [u64; 4]) {
    v[0] = v[0].wrapping_add(v[1]);
    v[1] = v[1].rotate_left(13);
    v[1] ^= v[0];
    v[0] = v[0].rotate_left(32);
    v[2] = v[2].wrapping_add(v[3]);
    v[3] = v[3].rotate_left(16);
    v[3] ^= v[2];
    v[0] = v[0].wrapping_add(v[3]);
    v[3] = v[3].rotate_left(21);
    v[3] ^= v[0];
    v[2] = v[2].wrapping_add(v[1]);
    v[1] = v[1].rotate_left(17);
    v[1] ^= v[2];
    v[2] = v[2].rotate_left(32);
}

pub fn siphash24(key: &[u8; 16], msg: &[u8]) -> u64 {
    let k0 = u64::from_le_bytes(key[..8].try_into().unwrap());
    let k1 = u64::from_le_bytes(key[8..].try_into().unwrap());
    let mut v = [
        k0 ^ 0x736f6d6570736575,
        k1 ^ 0x646f72616e646f6d,
        k0 ^ 0x6c7967656e657261,
        k1 ^ 0x7465646279746573,
    ];
    let mut blocks = msg.chunks_exact(8);
    for b in &mut blocks {
        let m = u64::from_le_bytes(b.try_into().unwrap());
        v[3] ^= m;
        sipround(&mut v);
        sipround(&mut v);
        v[0] ^= m;
    }
    let mut last = [0u8; 8];
    let rem = blocks.remainder();
    last[..rem.len()].copy_from_slice(rem);
    last[7] = msg.len() as u8;
    let m = u64::from_le_bytes(last);
    v[3] ^= m;
    sipround(&mut v);
    sipround(&mut v);
    v[0] ^= m;
    v[2] ^= 0xff;
    for _ in 0..4 {
        sipround(&mut v);
    }
    v[0] ^ v[1] ^ v[2] ^ v[3]
}

/// Rotating identifier as specified: SipHash-2-4 keyed with the PN in
/// big-endian, repeated four times, over the base identifier.
pub fn ridf_oracle(bidf: &[u8; 16], pn: u32) -> u64 {
    let mut key = [0u8; 16];
    for i in 0..4 {
        key[i * 4..i * 4 + 4].copy_from_slice(&pn.to_be_bytes());
    }
    siphash24(&key, bidf)
}

// ---------------------------------------------------------------------------
// Receive window as a plain set of seen packet numbers.

pub const PN_MAX: u64 = u32::MAX as u64;

#[derive(Debug, Clone)]
pub struct WindowOracle {
    pub w: u64,
    pub lo: u64,
    pub hi: u64,
    pub seen: BTreeSet<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleVerdict {
    Accept { newly_tracked: u64 },
    Replay,
    OutOfWindow,
}

impl WindowOracle {
    pub fn new(start: u32, w: u32) -> Self {
        let lo = start as u64;
        WindowOracle {
            w: w as u64,
            lo,
            hi: (lo + w as u64 - 1).min(PN_MAX),
            seen: BTreeSet::new(),
        }
    }

    pub fn accept(&mut self, pn: u32) -> OracleVerdict {
        let pn = pn as u64;
        if pn < self.lo || pn > self.hi {
            return OracleVerdict::OutOfWindow;
        }
        if self.seen.contains(&pn) {
            return OracleVerdict::Replay;
        }
        self.seen.insert(pn);
        let old: BTreeSet<u64> = (self.lo..=self.hi).collect();
        self.hi = self.hi.max((pn + self.w).min(PN_MAX));
        self.lo = self.lo.max((pn + 1).saturating_sub(self.w));
        let lo = self.lo;
        self.seen.retain(|&p| p >= lo);
        let newly = (self.lo..=self.hi).filter(|p| !old.contains(p)).count() as u64;
        OracleVerdict::Accept { newly_tracked: newly }
    }

    pub fn unseen(&self) -> Vec<u32> {
        (self.lo..=self.hi)
            .filter(|p| !self.seen.contains(p))
            .map(|p| p as u32)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Generators

pub fn random_mac<R: RngCore>(rng: &mut R) -> MacAddress {
    let mut m = [0u8; 6];
    rng.fill_bytes(&mut m);
    MacAddress(m)
}

/// Random well-formed MACsec frame with any TCI flags, AN and PN >= 1.
pub fn random_frame<R: RngCore>(rng: &mut R, max_secure: usize) -> MacsecFrame {
    let len = rng.gen_range(2..=max_secure.max(2));
    let mut secure_data = vec![0u8; len];
    rng.fill_bytes(&mut secure_data);
    let mut icv = [0u8; ICV_LEN];
    rng.fill_bytes(&mut icv);
    let tci = Tci {
        es: rng.gen(),
        sc: rng.gen(),
        scb: rng.gen(),
        e: rng.gen(),
        c: rng.gen(),
        an: rng.gen_range(0..4),
    };
    MacsecFrame {
        dst: random_mac(rng),
        src: random_mac(rng),
        sectag: SecTag {
            tci,
            sl: 0,
            pn: rng.gen_range(1..=u32::MAX),
            sci: Sci::new(random_mac(rng), rng.gen()),
        },
        secure_data,
        icv,
    }
}

/// Frame the gateways will tunnel (SC=1, E=1, SCB=0).
pub fn random_tunnelable<R: RngCore>(rng: &mut R, max_secure: usize) -> MacsecFrame {
    let mut f = random_frame(rng, max_secure);
    f.sectag.tci.sc = true;
    f.sectag.tci.e = true;
    f.sectag.tci.scb = false;
    f
}

/// Fuzz input: pure noise, a truncated or extended seed, or a seed with a
/// few random bit flips and byte overwrites.
pub fn fuzz_input<R: RngCore>(rng: &mut R, seeds: &[Vec<u8>], max_len: usize) -> Vec<u8> {
    match rng.gen_range(0..4) {
        0 => {
            let mut v = vec![0u8; rng.gen_range(0..=max_len)];
            rng.fill_bytes(&mut v);
            v
        }
        1 => {
            let s = &seeds[rng.gen_range(0..seeds.len())];
            let cut = rng.gen_range(0..=s.len());
            s[..cut].to_vec()
        }
        2 => {
            let mut v = seeds[rng.gen_range(0..seeds.len())].clone();
            let extra = rng.gen_range(1..=16);
            for _ in 0..extra {
                v.push(rng.gen());
            }
            v
        }
        _ => {
            let mut v = seeds[rng.gen_range(0..seeds.len())].clone();
            if v.is_empty() {
                return v;
            }
            for _ in 0..rng.gen_range(1..=4) {
                let i = rng.gen_range(0..v.len());
                if rng.gen() {
                    v[i] ^= 1 << rng.gen_range(0..8);
                } else {
                    v[i] = rng.gen();
                }
            }
            v
        }
    }
}

/// One line of acceptance output.
pub fn report(id: u32, name: &str, pass: bool, detail: &str) -> String {
    format!(
        "criterion {id:>2} [{}] {name}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    )
}
