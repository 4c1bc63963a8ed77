//! Throughput, size and crypto-work comparison of the tunnel schemes on a
//! pair of gateways.
//!
//! Each scheme gets its own gateway pair that carries one unicast flow. The
//! measured path is `on_lan_frame` at the sending gateway through
//! `on_tunnel_packet` at the receiving one. Gateways never check the ICV,
//! so a single protected template frame is reused with a rising PN.

use std::fmt::Write as _;
use std::net::UdpSocket;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::encap::{GatewayId, Scheme, DEFAULT_MTU, ENCAP_HEADER_LEN};
use crate::frame::{MacAddress, PlainFrame, SaKey, Sci, MIN_MACSEC_FRAME_LEN};
use crate::gateway::{Emission, Gateway, GatewayConfig, GatewayStats};
use crate::time::Timestamp;

/// Smallest frame with two bytes of secure data (the inner ethertype).
pub const MIN_BENCH_FRAME: usize = MIN_MACSEC_FRAME_LEN;
/// Length of one interleaving slice.
pub const SLICE: Duration = Duration::from_millis(50);
/// Every n-th frame contributes a latency sample.
pub const LATENCY_SAMPLE_EVERY: u64 = 4;

const PN_OFFSET: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BenchError {
    #[error("frame size {0} outside {MIN_BENCH_FRAME}..={1}")]
    FrameSize(usize, usize),
    #[error("no schemes selected")]
    NoSchemes,
    #[error("gateway setup: {0}")]
    Setup(String),
    #[error("socket: {0}")]
    Io(String),
}

impl From<std::io::Error> for BenchError {
    fn from(e: std::io::Error) -> Self {
        BenchError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub scheme: Scheme,
    /// MACsec frame length on the LAN.
    pub frame_size: usize,
    /// UDP payload length on the tunnel.
    pub wire_size: usize,
    pub frames: u64,
    pub secs: f64,
    pub frames_per_sec: f64,
    /// Tunnel bytes per second, `frames_per_sec * wire_size`.
    pub bytes_per_sec: f64,
    /// SipHash calls per frame at the sender and receiver.
    pub hash_up: f64,
    pub hash_down: f64,
    /// AES block operations per frame, both modes combined.
    pub block_up: f64,
    pub block_down: f64,
    pub p50_ns: u64,
    pub p99_ns: u64,
}

impl BenchResult {
    pub fn overhead(&self) -> isize {
        self.wire_size as isize - self.frame_size as isize
    }

    pub const CSV_HEADER: &'static str = "scheme,frame_size,wire_size,overhead,frames,secs,frames_per_sec,bytes_per_sec,mbit_per_sec,hash_up,hash_down,block_up,block_down,p50_ns,p99_ns";

    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{:.3},{:.0},{:.0},{:.2},{:.3},{:.3},{:.3},{:.3},{},{}",
            self.scheme,
            self.frame_size,
            self.wire_size,
            self.overhead(),
            self.frames,
            self.secs,
            self.frames_per_sec,
            self.bytes_per_sec,
            self.bytes_per_sec * 8.0 / 1e6,
            self.hash_up,
            self.hash_down,
            self.block_up,
            self.block_down,
            self.p50_ns,
            self.p99_ns
        );
        s
    }
}

pub fn to_csv(results: &[BenchResult]) -> String {
    let mut s = String::from(BenchResult::CSV_HEADER);
    s.push('\n');
    for r in results {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Largest LAN frame the scheme can carry at the default MTU.
pub fn max_frame_size(scheme: Scheme) -> usize {
    let body = crate::encap::max_body_len(DEFAULT_MTU);
    match scheme {
        Scheme::FullEnc => body - crate::fullenc::FULLENC_OVERHEAD,
        Scheme::Enc => body - crate::enc::EPOCH_LEN,
        _ => body,
    }
}

/// Tunnel payload length for a LAN frame of `frame_size` bytes.
pub fn wire_size(scheme: Scheme, frame_size: usize) -> usize {
    let delta = match scheme {
        Scheme::Naive => 0,
        Scheme::Idf => crate::idf::IDF_SIZE_DELTA,
        Scheme::Enc => crate::enc::ENC_SIZE_DELTA,
        Scheme::FullEnc => crate::fullenc::FULLENC_SIZE_DELTA,
    };
    (frame_size as isize + delta) as usize + ENCAP_HEADER_LEN
}

/// Protected unicast frame of exactly `size` bytes with PN 1.
pub fn template_frame(size: usize) -> Vec<u8> {
    let src = MacAddress([0x02, 0, 0, 0, 0, 0xA1]);
    let dst = MacAddress([0x02, 0, 0, 0, 0, 0xB1]);
    let payload = (0..size - MIN_BENCH_FRAME).map(|i| i as u8).collect();
    let plain = PlainFrame {
        dst,
        src,
        ethertype: 0x88B5,
        payload,
    };
    let key = SaKey::new(&[0x42; 16]);
    let f = key.protect(&plain, Sci::new(src, 1), 0, 1).expect("valid frame");
    f.to_bytes().expect("valid frame")
}

fn addr(i: u8) -> GatewayId {
    GatewayId(([127, 0, 0, i], crate::encap::DEFAULT_TUNNEL_PORT).into())
}

/// A sender and receiver gateway with a ready flow.
pub struct Pair {
    pub scheme: Scheme,
    pub tx: Gateway,
    pub rx: Gateway,
    frame: Vec<u8>,
    pn: u32,
    epoch: Instant,
}

impl Pair {
    pub fn new(scheme: Scheme, frame_size: usize) -> Result<Self, BenchError> {
        let max = max_frame_size(scheme);
        if !(MIN_BENCH_FRAME..=max).contains(&frame_size) {
            return Err(BenchError::FrameSize(frame_size, max));
        }
        let mk = |me: u8, peer: u8| {
            let mut cfg = GatewayConfig::new(addr(me), vec![addr(peer)], scheme);
            cfg.seed = Some(me as u64);
            cfg.flow_timeout = Duration::from_secs(3600);
            Gateway::new(cfg).map_err(BenchError::Setup)
        };
        let mut p = Pair {
            scheme,
            tx: mk(1, 2)?,
            rx: mk(2, 1)?,
            frame: template_frame(frame_size),
            pn: 0,
            epoch: Instant::now(),
        };
        // Announcement, key exchange and acknowledgements happen here.
        let mut delivered = 0;
        for _ in 0..4 {
            delivered += p.step().0;
        }
        if delivered == 0 {
            return Err(BenchError::Setup("flow did not come up".into()));
        }
        Ok(p)
    }

    fn now(&self) -> Timestamp {
        Timestamp::from_micros(self.epoch.elapsed().as_micros() as u64)
    }

    /// Sends one frame and runs both gateways until quiet. Returns frames
    /// emitted on the far LAN and tunnel bytes sent.
    pub fn step(&mut self) -> (u64, usize) {
        self.pn = self.pn.checked_add(1).expect("PN space exhausted");
        self.frame[PN_OFFSET..PN_OFFSET + 4].copy_from_slice(&self.pn.to_be_bytes());
        let now = self.now();
        let mut pending = std::collections::VecDeque::from([(true, self.tx.on_lan_frame(&self.frame, now))]);
        let (mut lan, mut bytes) = (0, 0);
        while let Some((at_tx, em)) = pending.pop_front() {
            for e in em {
                let (from, me) = if at_tx {
                    (self.tx.id(), &mut self.rx)
                } else {
                    (self.rx.id(), &mut self.tx)
                };
                match e {
                    Emission::Tunnel { datagram, .. } => {
                        bytes += datagram.len();
                        pending.push_back((!at_tx, me.on_tunnel_packet(from, &datagram, now)));
                    }
                    Emission::Mgmt { msg, .. } => pending.push_back((!at_tx, me.on_mgmt(from, msg, now))),
                    Emission::Lan { .. } => lan += 1,
                }
            }
        }
        (lan, bytes)
    }
}

struct Acc {
    frames: u64,
    busy: Duration,
    wire: usize,
    samples: Vec<u32>,
    before: (GatewayStats, GatewayStats),
}

fn block_ops(s: &GatewayStats, up: bool) -> u64 {
    if up {
        s.cipher_uplink + s.gcm_uplink
    } else {
        s.cipher_downlink + s.gcm_downlink
    }
}

fn percentile(sorted: &[u32], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let i = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[i] as u64
}

/// Runs every scheme for `per_size` at each frame size. Schemes share the
/// time of one size and take turns in short slices, so drift in machine
/// load hits them alike. A zero duration yields no results.
pub fn run(schemes: &[Scheme], sizes: &[usize], per_size: Duration) -> Result<Vec<BenchResult>, BenchError> {
    if schemes.is_empty() {
        return Err(BenchError::NoSchemes);
    }
    for &s in sizes {
        for &scheme in schemes {
            if !(MIN_BENCH_FRAME..=max_frame_size(scheme)).contains(&s) {
                return Err(BenchError::FrameSize(s, max_frame_size(scheme)));
            }
        }
    }
    let mut out = Vec::new();
    if per_size.is_zero() {
        return Ok(out);
    }
    let share = per_size / schemes.len() as u32;
    for &size in sizes {
        let mut pairs = Vec::new();
        let mut accs = Vec::new();
        for &scheme in schemes {
            let p = Pair::new(scheme, size)?;
            accs.push(Acc {
                frames: 0,
                busy: Duration::ZERO,
                wire: 0,
                samples: Vec::new(),
                before: (p.tx.stats(), p.rx.stats()),
            });
            pairs.push(p);
        }
        while accs.iter().any(|a| a.busy < share) {
            for (p, a) in pairs.iter_mut().zip(accs.iter_mut()) {
                if a.busy >= share {
                    continue;
                }
                let slice = SLICE.min(share - a.busy);
                let start = Instant::now();
                loop {
                    let t0 = Instant::now();
                    let (lan, bytes) = p.step();
                    debug_assert_eq!(lan, 1);
                    a.frames += 1;
                    a.wire = bytes;
                    if a.frames % LATENCY_SAMPLE_EVERY == 0 {
                        a.samples.push(t0.elapsed().as_nanos().min(u32::MAX as u128) as u32);
                    }
                    if a.frames % 64 == 0 && start.elapsed() >= slice {
                        break;
                    }
                }
                a.busy += start.elapsed();
            }
        }
        for (p, mut a) in pairs.into_iter().zip(accs) {
            a.samples.sort_unstable();
            let (tx, rx) = (p.tx.stats(), p.rx.stats());
            let n = a.frames as f64;
            let secs = a.busy.as_secs_f64();
            let fps = n / secs;
            out.push(BenchResult {
                scheme: p.scheme,
                frame_size: size,
                wire_size: a.wire,
                frames: a.frames,
                secs,
                frames_per_sec: fps,
                bytes_per_sec: fps * a.wire as f64,
                hash_up: (tx.hash_uplink - a.before.0.hash_uplink) as f64 / n,
                hash_down: (rx.hash_downlink - a.before.1.hash_downlink) as f64 / n,
                block_up: (block_ops(&tx, true) - block_ops(&a.before.0, true)) as f64 / n,
                block_down: (block_ops(&rx, false) - block_ops(&a.before.1, false)) as f64 / n,
                p50_ns: percentile(&a.samples, 0.50),
                p99_ns: percentile(&a.samples, 0.99),
            });
        }
    }
    Ok(out)
}

/// Runs one scheme and size with the receiving gateway on its own thread,
/// connected over loopback UDP. Latency is measured from handing the frame
/// to the sender until the receiver emits it.
pub fn run_loopback(scheme: Scheme, size: usize, duration: Duration) -> Result<Option<BenchResult>, BenchError> {
    if duration.is_zero() {
        return Ok(None);
    }
    let mut pair = Pair::new(scheme, size)?;
    let tx_sock = UdpSocket::bind("127.0.0.1:0")?;
    let rx_sock = UdpSocket::bind("127.0.0.1:0")?;
    rx_sock.set_read_timeout(Some(Duration::from_millis(200)))?;
    tx_sock.connect(rx_sock.local_addr()?)?;
    let before = pair.rx.stats();
    let tx_id = pair.tx.id();
    let base = Instant::now();
    let mut rx_gw = std::mem::replace(
        &mut pair.rx,
        Gateway::new(GatewayConfig::new(addr(9), vec![], scheme)).map_err(BenchError::Setup)?,
    );
    let (done_tx, done_rx) = mpsc::channel::<()>();

    let receiver = thread::spawn(move || {
        let mut buf = vec![0u8; 2048];
        let mut lat = Vec::new();
        let mut frames = 0u64;
        loop {
            match rx_sock.recv(&mut buf) {
                Ok(n) => {
                    let now = Timestamp::from_micros(base.elapsed().as_micros() as u64);
                    let em = rx_gw.on_tunnel_packet(tx_id, &buf[..n], now);
                    for e in em {
                        if let Emission::Lan { frame } = e {
                            frames += 1;
                            let pn = u32::from_be_bytes(frame[PN_OFFSET..PN_OFFSET + 4].try_into().unwrap());
                            lat.push((pn, base.elapsed()));
                        }
                    }
                }
                Err(_) if done_rx.try_recv().is_ok() => break,
                Err(_) => {}
            }
        }
        (rx_gw, frames, lat)
    });

    let mut sent_at = Vec::new();
    let start = Instant::now();
    let mut wire = 0;
    let mut sent = 0u64;
    while start.elapsed() < duration {
        pair.pn += 1;
        let pn = pair.pn;
        pair.frame[PN_OFFSET..PN_OFFSET + 4].copy_from_slice(&pn.to_be_bytes());
        let now = pair.now();
        let t = base.elapsed();
        for e in pair.tx.on_lan_frame(&pair.frame, now) {
            if let Emission::Tunnel { datagram, .. } = e {
                wire = datagram.len();
                tx_sock.send(&datagram)?;
                sent += 1;
                if sent.is_multiple_of(LATENCY_SAMPLE_EVERY) {
                    sent_at.push((pn, t));
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let _ = done_tx.send(());
    let (rx_gw, frames, lat) = receiver.join().expect("receiver thread");
    let after = rx_gw.stats();
    let tx = pair.tx.stats();

    let arrivals: std::collections::HashMap<u32, Duration> = lat.into_iter().collect();
    let mut samples: Vec<u32> = sent_at
        .iter()
        .filter_map(|(pn, t)| {
            arrivals
                .get(pn)
                .map(|a| a.saturating_sub(*t).as_nanos().min(u32::MAX as u128) as u32)
        })
        .collect();
    samples.sort_unstable();
    let n = frames.max(1) as f64;
    let secs = elapsed.as_secs_f64();
    let fps = frames as f64 / secs;
    Ok(Some(BenchResult {
        scheme,
        frame_size: size,
        wire_size: wire,
        frames,
        secs,
        frames_per_sec: fps,
        bytes_per_sec: fps * wire as f64,
        hash_up: tx.hash_uplink as f64 / (pair.pn as f64),
        hash_down: (after.hash_downlink - before.hash_downlink) as f64 / n,
        block_up: block_ops(&tx, true) as f64 / pair.pn as f64,
        block_down: (block_ops(&after, false) - block_ops(&before, false)) as f64 / n,
        p50_ns: percentile(&samples, 0.50),
        p99_ns: percentile(&samples, 0.99),
    }))
}
