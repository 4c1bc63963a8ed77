//! Deterministic discrete-event harness: LANs with MACsec devices, one
//! gateway per LAN, an untrusted network with loss, duplication, reordering
//! and latency, and an attacker on that network.
//!
//! The same scenario and seed always produce the same transcript.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::net::SocketAddr;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use siphasher::sip::SipHasher24;
use thiserror::Error;

use crate::encap::{encap_header, GatewayId, Scheme, DEFAULT_TUNNEL_PORT, ENCAP_HEADER_LEN};
use crate::frame::{is_mka, MacAddress, MacsecView, PlainFrame, SaKey, Sci, ETHERTYPE_EAPOL, ETHERTYPE_MACSEC};
use crate::gateway::{DropReason, Emission, Gateway, GatewayConfig, GatewayStats};
use crate::mgmt::{Kind, MgmtMessage};
use crate::time::Timestamp;

/// Ethertype carried inside the simulated MACsec payloads.
pub const SIM_ETHERTYPE: u16 = 0x88B5;
pub const MKA_GROUP: MacAddress = MacAddress([0x01, 0x80, 0xC2, 0x00, 0x00, 0x03]);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("scenario needs at least two LANs")]
    TooFewLans,
    #[error("unknown LAN {0:?}")]
    UnknownLan(String),
    #[error("unknown device {0:?}")]
    UnknownDevice(String),
    #[error("duplicate name {0:?}")]
    Duplicate(String),
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("cannot parse scenario: {0}")]
    Parse(String),
}

fn default_window() -> u32 {
    crate::window::DEFAULT_WINDOW
}
fn default_ceiling() -> u32 {
    1 << 16
}
fn default_tick() -> u64 {
    100
}
fn default_true() -> bool {
    true
}
fn default_grace() -> u64 {
    2000
}
fn default_flow_timeout() -> u64 {
    60_000
}
fn default_latency() -> u64 {
    500
}
fn default_mgmt_latency() -> u64 {
    1000
}
fn default_size() -> usize {
    64
}
fn default_interval() -> u64 {
    100
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub scheme: Scheme,
    #[serde(default = "default_window")]
    pub window: u32,
    /// Largest PN before a device moves to the next AN.
    #[serde(default = "default_ceiling")]
    pub pn_ceiling: u32,
    /// Events after this point are discarded.
    pub duration_ms: u64,
    #[serde(default = "default_tick")]
    pub tick_ms: u64,
    /// Bind unicast and broadcast flows of one SA on the receiving gateways.
    #[serde(default = "default_true")]
    pub binding: bool,
    #[serde(default = "default_grace")]
    pub grace_ms: u64,
    #[serde(default = "default_flow_timeout")]
    pub flow_timeout_ms: u64,
    #[serde(default = "default_true")]
    pub transcript: bool,
    pub lans: Vec<String>,
    pub devices: Vec<DeviceSpec>,
    #[serde(default)]
    pub traffic: Vec<TrafficSpec>,
    #[serde(default)]
    pub net: NetModel,
    #[serde(default)]
    pub mgmt: MgmtModel,
    #[serde(default)]
    pub attacks: Vec<AttackSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub name: String,
    pub lan: String,
    /// Defaults to a locally administered address derived from the position.
    #[serde(default)]
    pub mac: Option<String>,
    /// One transmit SC per named peer, as key agreement sets up pairwise
    /// channels; broadcasts are then sent once per SC. Without peers the
    /// device uses a single SC for everything.
    #[serde(default)]
    pub peers: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficSpec {
    pub from: String,
    /// A device name, `"broadcast"`, or `"mka"` for key-agreement frames.
    pub to: String,
    pub count: u32,
    /// Plain payload sizes, used round-robin.
    #[serde(default)]
    pub sizes: Vec<usize>,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default)]
    pub start_us: u64,
    #[serde(default = "default_interval")]
    pub interval_us: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetModel {
    pub loss: f64,
    pub dup: f64,
    pub reorder: f64,
    /// Extra delay of a reordered datagram, drawn uniformly up to this bound.
    pub reorder_max_us: u64,
    pub latency_us: u64,
    pub jitter_us: u64,
}

impl Default for NetModel {
    fn default() -> Self {
        NetModel {
            loss: 0.0,
            dup: 0.0,
            reorder: 0.0,
            reorder_max_us: 0,
            latency_us: default_latency(),
            jitter_us: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MgmtModel {
    pub latency_us: u64,
    /// Lose the first N flow announcements (each is retransmitted).
    pub drop_announces: usize,
    /// Deliver every management message twice.
    pub duplicate: bool,
}

impl Default for MgmtModel {
    fn default() -> Self {
        MgmtModel {
            latency_us: default_mgmt_latency(),
            drop_announces: 0,
            duplicate: false,
        }
    }
}

/// Attacker actions. Datagrams are selected by capture index: the position
/// of a genuine gateway datagram in the order it entered the network.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackSpec {
    /// Resend the first `count` captured datagrams at `at_ms`.
    Replay {
        count: usize,
        at_ms: u64,
    },
    /// Send random datagrams. With `mimic`, each copies the encap header and
    /// scheme prefix of the latest capture and spoofs its source.
    Inject {
        count: u64,
        #[serde(default)]
        min_len: usize,
        max_len: usize,
        #[serde(default)]
        mimic: bool,
        #[serde(default)]
        start_ms: u64,
        #[serde(default = "default_interval")]
        interval_us: u64,
    },
    /// Flip one bit of each selected datagram in transit, cycling through
    /// byte offsets and bit positions.
    Mutate {
        start: u64,
        count: u64,
    },
    Drop {
        start: u64,
        count: u64,
    },
    Delay {
        start: u64,
        count: u64,
        extra_ms: u64,
    },
}

impl Scenario {
    pub fn from_toml(s: &str) -> Result<Self, ConfigError> {
        toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Two LANs with `per_lan` single-SC devices each and no traffic.
    pub fn two_lans(seed: u64, scheme: Scheme, per_lan: usize) -> Self {
        Self::lans(seed, scheme, 2, per_lan)
    }

    pub fn lans(seed: u64, scheme: Scheme, lans: usize, per_lan: usize) -> Self {
        let lan_names: Vec<String> = (0..lans).map(|i| ((b'a' + i as u8) as char).to_string()).collect();
        let mut devices = Vec::new();
        for l in &lan_names {
            for d in 0..per_lan {
                devices.push(DeviceSpec {
                    name: format!("{l}{}", d + 1),
                    lan: l.clone(),
                    mac: None,
                    peers: vec![],
                });
            }
        }
        Scenario {
            seed,
            scheme,
            window: default_window(),
            pn_ceiling: default_ceiling(),
            duration_ms: 10_000,
            tick_ms: default_tick(),
            binding: true,
            grace_ms: default_grace(),
            flow_timeout_ms: default_flow_timeout(),
            transcript: true,
            lans: lan_names,
            devices,
            traffic: vec![],
            net: NetModel::default(),
            mgmt: MgmtModel::default(),
            attacks: vec![],
        }
    }

    pub fn add_traffic(&mut self, from: &str, to: &str, count: u32, size: usize, start_us: u64, interval_us: u64) {
        self.traffic.push(TrafficSpec {
            from: from.into(),
            to: to.into(),
            count,
            sizes: vec![],
            size,
            start_us,
            interval_us,
        });
    }
}

// ---------------------------------------------------------------------------
// Devices

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RxOutcome {
    Accepted,
    /// Valid ICV but the PN was already accepted.
    Duplicate,
    IcvFail,
    Malformed,
    NotForMe,
    /// A channel set up for another receiver.
    ForeignSc,
    UnknownSc,
    Mka,
    NotMacsec,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DeviceStats {
    pub sent: u64,
    pub accepted: u64,
    pub duplicates: u64,
    pub icv_failures: u64,
    pub malformed: u64,
    pub not_for_me: u64,
    pub foreign_sc: u64,
    pub unknown_sc: u64,
    pub mka_received: u64,
    pub not_macsec: u64,
    pub rollovers: u64,
}

#[derive(Debug, Clone)]
struct TxSc {
    sci: Sci,
    an: u8,
    pn: u32,
    generation: u32,
    /// Peer this channel is dedicated to.
    peer: Option<usize>,
}

#[derive(Debug, Clone)]
struct SaInfo {
    key: SaKey,
    generation: u32,
    receiver: Option<MacAddress>,
}

/// Key agreement stand-in: current key of every SA, visible to all devices.
#[derive(Debug, Default)]
struct KeyRegistry {
    sas: HashMap<(Sci, u8), SaInfo>,
}

fn sa_key(sci: Sci, an: u8, generation: u32) -> SaKey {
    let mut k = [0xA5u8; 16];
    k[..8].copy_from_slice(&sci.to_bytes());
    k[8] = an;
    k[9..13].copy_from_slice(&generation.to_be_bytes());
    SaKey::new(&k)
}

#[derive(Debug)]
struct Device {
    name: String,
    lan: usize,
    mac: MacAddress,
    scs: Vec<TxSc>,
    seen: HashSet<(Sci, u8, u32, u32)>,
    stats: DeviceStats,
    seq: u64,
}

impl Device {
    fn sc_for(&self, peer: Option<usize>) -> usize {
        self.scs.iter().position(|s| s.peer == peer).unwrap_or(0)
    }

    fn next_pn(&mut self, sc: usize, ceiling: u32, reg: &mut KeyRegistry, macs: &[MacAddress]) -> (Sci, u8, u32) {
        let s = &mut self.scs[sc];
        if s.pn > ceiling {
            s.an = (s.an + 1) & 3;
            s.pn = 1;
            s.generation += 1;
            self.stats.rollovers += 1;
            let receiver = s.peer.map(|p| macs[p]);
            reg.sas.insert(
                (s.sci, s.an),
                SaInfo {
                    key: sa_key(s.sci, s.an, s.generation),
                    generation: s.generation,
                    receiver,
                },
            );
        }
        let pn = s.pn;
        s.pn += 1;
        (s.sci, s.an, pn)
    }

    fn receive(&mut self, bytes: &[u8], reg: &KeyRegistry) -> RxOutcome {
        let o = self.classify(bytes, reg);
        match o {
            RxOutcome::Accepted => self.stats.accepted += 1,
            RxOutcome::Duplicate => self.stats.duplicates += 1,
            RxOutcome::IcvFail => self.stats.icv_failures += 1,
            RxOutcome::Malformed => self.stats.malformed += 1,
            RxOutcome::NotForMe => self.stats.not_for_me += 1,
            RxOutcome::ForeignSc => self.stats.foreign_sc += 1,
            RxOutcome::UnknownSc => self.stats.unknown_sc += 1,
            RxOutcome::Mka => self.stats.mka_received += 1,
            RxOutcome::NotMacsec => self.stats.not_macsec += 1,
        }
        o
    }

    fn classify(&mut self, bytes: &[u8], reg: &KeyRegistry) -> RxOutcome {
        if is_mka(bytes) {
            return RxOutcome::Mka;
        }
        if crate::frame::ethertype_of(bytes) != Some(ETHERTYPE_MACSEC) {
            return RxOutcome::NotMacsec;
        }
        let Ok(view) = MacsecView::parse(bytes) else {
            return RxOutcome::Malformed;
        };
        let dst = view.dst();
        if dst != self.mac && !dst.is_broadcast() {
            return RxOutcome::NotForMe;
        }
        if view.src() == self.mac {
            return RxOutcome::NotForMe;
        }
        let Some(sa) = reg.sas.get(&(view.sci(), view.an())) else {
            return RxOutcome::UnknownSc;
        };
        if sa.receiver.is_some_and(|r| r != self.mac) {
            return RxOutcome::ForeignSc;
        }
        if sa.key.verify(&view.to_frame()).is_err() {
            return RxOutcome::IcvFail;
        }
        if !self.seen.insert((view.sci(), view.an(), sa.generation, view.pn())) {
            return RxOutcome::Duplicate;
        }
        RxOutcome::Accepted
    }
}

// ---------------------------------------------------------------------------
// Events

/// Where a datagram or LAN frame came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Genuine { capture: u64 },
    Replayed { capture: u64 },
    Injected { index: u64 },
    Mutated { capture: u64, offset: usize, bit: u8 },
    Local,
}

impl Origin {
    pub fn is_attack(&self) -> bool {
        matches!(
            self,
            Origin::Replayed { .. } | Origin::Injected { .. } | Origin::Mutated { .. }
        )
    }
}

/// Fate of a tunnel datagram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fate {
    GatewayDrop(DropReason),
    /// Reconstructed and emitted; the best device outcome on that LAN.
    Delivered(RxOutcome),
}

#[derive(Debug)]
enum Ev {
    Send {
        traffic: usize,
        k: u32,
    },
    Tunnel {
        to: usize,
        from: SocketAddr,
        datagram: Vec<u8>,
        origin: Origin,
    },
    Mgmt {
        to: usize,
        from: usize,
        msg: MgmtMessage,
    },
    Tick {
        gw: usize,
    },
    Replay {
        count: usize,
    },
    Inject {
        attack: usize,
        k: u64,
    },
}

struct Queued {
    at: Timestamp,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Queued {
    fn eq(&self, o: &Self) -> bool {
        (self.at, self.seq) == (o.at, o.seq)
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Queued {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(o.at, o.seq))
    }
}

/// Accounting of every datagram that entered the untrusted network.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NetStats {
    pub genuine_sent: u64,
    pub duplicated: u64,
    pub lost: u64,
    pub attacker_dropped: u64,
    pub delayed: u64,
    pub mutated: u64,
    pub replayed: u64,
    pub injected: u64,
    pub delivered: u64,
    pub mgmt_sent: u64,
    pub mgmt_dropped: u64,
}

#[derive(Debug, Clone, Default)]
pub struct SimReport {
    pub end: Timestamp,
    pub devices: BTreeMap<String, DeviceStats>,
    pub gateways: Vec<GatewayStats>,
    pub net: NetStats,
    /// Genuine frames whose intended receivers all accepted them.
    pub intended_delivered: u64,
    /// Genuine frames some intended receiver never accepted.
    pub intended_lost: u64,
    /// Frames accepted by a device that no device ever sent, or that
    /// reached a device through a replay, injection or mutation.
    pub attacker_accepted: u64,
    /// Datagram fates keyed by origin kind.
    pub fates: HashMap<Origin, Fate>,
    pub fate_counts: BTreeMap<String, u64>,
    /// Epoch of the header key each gateway uses towards each peer.
    pub tx_epochs: Vec<Vec<Option<u8>>>,
    pub transcript: Vec<String>,
}

impl SimReport {
    pub fn transcript_csv(&self) -> String {
        let mut s = String::from("time_us,site,event,hash\n");
        for l in &self.transcript {
            s.push_str(l);
            s.push('\n');
        }
        s
    }

    pub fn total_icv_failures(&self) -> u64 {
        self.devices.values().map(|d| d.icv_failures).sum()
    }

    pub fn total_gateway_drops(&self) -> u64 {
        self.gateways.iter().map(|g| g.tunnel_drops() + g.lan_drops()).sum()
    }

    pub fn fate_count(&self, key: &str) -> u64 {
        self.fate_counts.get(key).copied().unwrap_or(0)
    }
}

fn frame_hash(bytes: &[u8]) -> u64 {
    SipHasher24::new().hash(bytes)
}

pub fn gateway_addr(i: usize) -> GatewayId {
    GatewayId(SocketAddr::new([10, 0, 0, (i + 1) as u8].into(), DEFAULT_TUNNEL_PORT))
}

pub const ATTACKER_ADDR: &str = "203.0.113.66:4790";

struct GenuineFrame {
    intended: Vec<usize>,
    accepted_by: Vec<usize>,
}

pub struct Simulation {
    sc: Scenario,
    now: Timestamp,
    end: Timestamp,
    seq: u64,
    queue: BinaryHeap<Reverse<Queued>>,
    rng: ChaCha8Rng,
    attacker_rng: ChaCha8Rng,
    gateways: Vec<Gateway>,
    devices: Vec<Device>,
    macs: Vec<MacAddress>,
    device_index: HashMap<String, usize>,
    registry: KeyRegistry,
    /// Per traffic script: destination device, `None` for broadcast.
    targets: Vec<Target>,
    genuine: HashMap<u64, GenuineFrame>,
    captures: Vec<(usize, SocketAddr, Vec<u8>)>,
    capture_limit: usize,
    capture_index: u64,
    last_capture: HashMap<usize, (SocketAddr, Vec<u8>)>,
    mgmt_last: HashMap<(usize, usize), Timestamp>,
    announces_dropped: usize,
    report: SimReport,
    attacker: SocketAddr,
}

#[derive(Debug, Clone, Copy)]
enum Target {
    Device(usize),
    Broadcast,
    Mka,
}

impl Simulation {
    pub fn new(sc: Scenario) -> Result<Self, ConfigError> {
        if sc.lans.len() < 2 {
            return Err(ConfigError::TooFewLans);
        }
        if sc.lans.len() > 250 {
            return Err(ConfigError::Invalid("too many LANs".into()));
        }
        let lan_index: HashMap<&str, usize> = sc.lans.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        if lan_index.len() != sc.lans.len() {
            return Err(ConfigError::Duplicate("lan".into()));
        }
        for p in [sc.net.loss, sc.net.dup, sc.net.reorder] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ConfigError::Invalid(format!("probability {p}")));
            }
        }
        if sc.pn_ceiling == 0 || sc.window == 0 || sc.tick_ms == 0 {
            return Err(ConfigError::Invalid(
                "pn_ceiling, window and tick_ms must be positive".into(),
            ));
        }

        let mut device_index = HashMap::new();
        let mut macs = Vec::new();
        let mut per_lan = vec![0u8; sc.lans.len()];
        for (i, d) in sc.devices.iter().enumerate() {
            let lan = *lan_index
                .get(d.lan.as_str())
                .ok_or_else(|| ConfigError::UnknownLan(d.lan.clone()))?;
            if device_index.insert(d.name.clone(), i).is_some() {
                return Err(ConfigError::Duplicate(d.name.clone()));
            }
            per_lan[lan] = per_lan[lan].wrapping_add(1);
            let mac = match &d.mac {
                Some(m) => m.parse().map_err(|_| ConfigError::Invalid(format!("mac {m}")))?,
                None => MacAddress([0x02, 0x00, 0x5E, lan as u8, per_lan[lan], 0x01]),
            };
            if macs.contains(&mac) || mac.is_multicast() {
                return Err(ConfigError::Invalid(format!("mac {mac}")));
            }
            macs.push(mac);
        }

        let mut registry = KeyRegistry::default();
        let mut devices = Vec::new();
        for (i, d) in sc.devices.iter().enumerate() {
            let mac = macs[i];
            let mut scs = Vec::new();
            if d.peers.is_empty() {
                scs.push(TxSc {
                    sci: Sci::new(mac, 1),
                    an: 0,
                    pn: 1,
                    generation: 0,
                    peer: None,
                });
            } else {
                for (k, p) in d.peers.iter().enumerate() {
                    let pi = *device_index
                        .get(p)
                        .ok_or_else(|| ConfigError::UnknownDevice(p.clone()))?;
                    scs.push(TxSc {
                        sci: Sci::new(mac, k as u16 + 1),
                        an: 0,
                        pn: 1,
                        generation: 0,
                        peer: Some(pi),
                    });
                }
            }
            for s in &scs {
                let receiver = s.peer.map(|p| macs[p]);
                registry.sas.insert(
                    (s.sci, s.an),
                    SaInfo {
                        key: sa_key(s.sci, s.an, 0),
                        generation: 0,
                        receiver,
                    },
                );
            }
            devices.push(Device {
                name: d.name.clone(),
                lan: lan_index[d.lan.as_str()],
                mac,
                scs,
                seen: HashSet::new(),
                stats: DeviceStats::default(),
                seq: 0,
            });
        }

        let mut targets = Vec::new();
        for t in &sc.traffic {
            let from = *device_index
                .get(&t.from)
                .ok_or_else(|| ConfigError::UnknownDevice(t.from.clone()))?;
            let target = match t.to.as_str() {
                "broadcast" => Target::Broadcast,
                "mka" => Target::Mka,
                name => {
                    let to = *device_index
                        .get(name)
                        .ok_or_else(|| ConfigError::UnknownDevice(name.into()))?;
                    if to == from {
                        return Err(ConfigError::Invalid(format!("{name} sends to itself")));
                    }
                    Target::Device(to)
                }
            };
            if t.sizes.iter().chain([&t.size]).any(|&s| !(2..=1500).contains(&s)) {
                return Err(ConfigError::Invalid("payload size outside 2..=1500".into()));
            }
            targets.push(target);
        }

        let n = sc.lans.len();
        let mut gateways = Vec::new();
        for i in 0..n {
            let peers = (0..n).filter(|&j| j != i).map(gateway_addr).collect();
            let mut cfg = GatewayConfig::new(gateway_addr(i), peers, sc.scheme);
            cfg.window = sc.window;
            cfg.seed = Some(sc.seed.wrapping_mul(1000).wrapping_add(i as u64));
            cfg.grace = Duration::from_millis(sc.grace_ms);
            cfg.flow_timeout = Duration::from_millis(sc.flow_timeout_ms);
            let mut g = Gateway::new(cfg).map_err(ConfigError::Invalid)?;
            g.set_binding(sc.binding);
            gateways.push(g);
        }

        let capture_limit = sc
            .attacks
            .iter()
            .map(|a| match a {
                AttackSpec::Replay { count, .. } => *count,
                _ => 0,
            })
            .max()
            .unwrap_or(0);

        let mut sim = Simulation {
            now: Timestamp::ZERO,
            end: Timestamp::from_micros(sc.duration_ms * 1000),
            seq: 0,
            queue: BinaryHeap::new(),
            rng: ChaCha8Rng::seed_from_u64(sc.seed),
            attacker_rng: ChaCha8Rng::seed_from_u64(sc.seed ^ 0x5A5A_5A5A),
            gateways,
            devices,
            macs,
            device_index,
            registry,
            targets,
            genuine: HashMap::new(),
            captures: Vec::new(),
            capture_limit,
            capture_index: 0,
            last_capture: HashMap::new(),
            mgmt_last: HashMap::new(),
            announces_dropped: 0,
            report: SimReport::default(),
            attacker: ATTACKER_ADDR.parse().expect("valid address"),
            sc,
        };
        for g in 0..n {
            sim.push(Timestamp::ZERO, Ev::Tick { gw: g });
        }
        for (i, t) in sim.sc.traffic.iter().enumerate() {
            if t.count > 0 {
                let at = Timestamp::from_micros(t.start_us);
                sim.seq += 1;
                sim.queue.push(Reverse(Queued {
                    at,
                    seq: sim.seq,
                    ev: Ev::Send { traffic: i, k: 0 },
                }));
            }
        }
        for (i, a) in sim.sc.attacks.clone().iter().enumerate() {
            match a {
                AttackSpec::Replay { count, at_ms } => {
                    sim.push(Timestamp::from_micros(at_ms * 1000), Ev::Replay { count: *count })
                }
                AttackSpec::Inject { count, start_ms, .. } if *count > 0 => {
                    sim.push(Timestamp::from_micros(start_ms * 1000), Ev::Inject { attack: i, k: 0 })
                }
                _ => {}
            }
        }
        Ok(sim)
    }

    pub fn device_names(&self) -> impl Iterator<Item = &str> {
        self.devices.iter().map(|d| d.name.as_str())
    }

    pub fn gateway(&self, i: usize) -> &Gateway {
        &self.gateways[i]
    }

    fn push(&mut self, at: Timestamp, ev: Ev) {
        self.seq += 1;
        self.queue.push(Reverse(Queued { at, seq: self.seq, ev }));
    }

    fn log(&mut self, site: &str, event: &str, bytes: &[u8]) {
        if self.sc.transcript {
            let mut l = String::new();
            let _ = write!(
                l,
                "{},{},{},{:016x}",
                self.now.as_micros(),
                site,
                event,
                frame_hash(bytes)
            );
            self.report.transcript.push(l);
        }
    }

    fn fate(&mut self, origin: Origin, fate: Fate) {
        let key = match (&origin, &fate) {
            (_, Fate::GatewayDrop(r)) => format!("{}:gateway:{r:?}", origin_kind(&origin)),
            (_, Fate::Delivered(o)) => format!("{}:device:{o:?}", origin_kind(&origin)),
        };
        *self.report.fate_counts.entry(key).or_default() += 1;
        if matches!(origin, Origin::Mutated { .. } | Origin::Replayed { .. }) {
            self.report.fates.insert(origin, fate);
        }
    }

    /// Runs to completion and returns the report.
    pub fn run(mut self) -> SimReport {
        while let Some(Reverse(q)) = self.queue.pop() {
            if q.at > self.end {
                break;
            }
            self.now = q.at;
            self.dispatch(q.ev);
        }
        self.finish()
    }

    fn dispatch(&mut self, ev: Ev) {
        match ev {
            Ev::Send { traffic, k } => self.send(traffic, k),
            Ev::Tunnel {
                to,
                from,
                datagram,
                origin,
            } => {
                self.report.net.delivered += 1;
                let site = format!("gw{to}");
                let em = self.gateways[to].on_tunnel_packet(GatewayId(from), &datagram, self.now);
                if em.is_empty() {
                    let reason = self.gateways[to].last_drop().expect("drop recorded");
                    self.log(&site, &format!("drop_{reason:?}"), &datagram);
                    self.fate(origin, Fate::GatewayDrop(reason));
                } else {
                    self.log(&site, "tunnel_rx", &datagram);
                }
                self.handle(to, em, origin);
            }
            Ev::Mgmt { to, from, msg } => {
                let em = self.gateways[to].on_mgmt(gateway_addr(from), msg, self.now);
                self.handle(to, em, Origin::Local);
            }
            Ev::Tick { gw } => {
                let em = self.gateways[gw].on_tick(self.now);
                self.handle(gw, em, Origin::Local);
                let next = self.now + Duration::from_millis(self.sc.tick_ms);
                self.push(next, Ev::Tick { gw });
            }
            Ev::Replay { count } => {
                let caps: Vec<_> = self.captures.iter().take(count).cloned().enumerate().collect();
                for (i, (to, from, d)) in caps {
                    self.report.net.replayed += 1;
                    self.log("attacker", "replay", &d);
                    let at = self.now + Duration::from_micros(i as u64);
                    self.push(
                        at,
                        Ev::Tunnel {
                            to,
                            from,
                            datagram: d,
                            origin: Origin::Replayed { capture: i as u64 },
                        },
                    );
                }
            }
            Ev::Inject { attack, k } => self.inject(attack, k),
        }
    }

    fn inject(&mut self, attack: usize, k: u64) {
        let AttackSpec::Inject {
            count,
            min_len,
            max_len,
            mimic,
            interval_us,
            ..
        } = self.sc.attacks[attack].clone()
        else {
            return;
        };
        let n = self.gateways.len();
        let to = self.attacker_rng.gen_range(0..n);
        let len = self.attacker_rng.gen_range(min_len..=max_len.max(min_len));
        let mut d = vec![0u8; len];
        self.attacker_rng.fill(&mut d[..]);
        let mut from = self.attacker;
        if mimic {
            d.splice(0..ENCAP_HEADER_LEN.min(d.len()), encap_header(self.sc.scheme));
            if let Some((src, cap)) = self.last_capture.get(&to) {
                from = *src;
                let prefix = match self.sc.scheme {
                    Scheme::Enc | Scheme::FullEnc => ENCAP_HEADER_LEN + 1,
                    _ => ENCAP_HEADER_LEN,
                };
                let p = prefix.min(d.len()).min(cap.len());
                d[..p].copy_from_slice(&cap[..p]);
            }
        }
        self.report.net.injected += 1;
        self.log("attacker", "inject", &d);
        self.push(
            self.now,
            Ev::Tunnel {
                to,
                from,
                datagram: d,
                origin: Origin::Injected { index: k },
            },
        );
        if k + 1 < count {
            self.push(
                self.now + Duration::from_micros(interval_us),
                Ev::Inject { attack, k: k + 1 },
            );
        }
    }

    fn send(&mut self, traffic: usize, k: u32) {
        let t = self.sc.traffic[traffic].clone();
        let from = self.device_index[&t.from];
        let size = if t.sizes.is_empty() {
            t.size
        } else {
            t.sizes[k as usize % t.sizes.len()]
        };
        let dev = &mut self.devices[from];
        dev.seq += 1;
        let mut payload = vec![0u8; size];
        payload[..8.min(size)].copy_from_slice(&dev.seq.to_be_bytes()[..8.min(size)]);
        for (i, b) in payload.iter_mut().enumerate().skip(8) {
            *b = (i as u8).wrapping_mul(31) ^ (from as u8);
        }
        let src = dev.mac;
        match self.targets[traffic] {
            Target::Mka => {
                let plain = PlainFrame {
                    dst: MKA_GROUP,
                    src,
                    ethertype: ETHERTYPE_EAPOL,
                    payload,
                };
                let bytes = plain.to_bytes();
                self.devices[from].stats.sent += 1;
                let name = self.devices[from].name.clone();
                self.log(&name, "mka_tx", &bytes);
                self.emit_on_lan(from, bytes);
            }
            Target::Device(to) => {
                let sc = self.devices[from].sc_for(Some(to));
                let dst = self.macs[to];
                self.send_on_sc(from, sc, dst, payload, vec![to]);
            }
            Target::Broadcast => {
                let n = self.devices[from].scs.len();
                for sc in 0..n {
                    let intended = match self.devices[from].scs[sc].peer {
                        Some(p) => vec![p],
                        None => (0..self.devices.len()).filter(|&d| d != from).collect(),
                    };
                    self.send_on_sc(from, sc, MacAddress::BROADCAST, payload.clone(), intended);
                }
            }
        }
        if k + 1 < t.count {
            self.push(
                self.now + Duration::from_micros(t.interval_us),
                Ev::Send { traffic, k: k + 1 },
            );
        }
    }

    fn send_on_sc(&mut self, from: usize, sc: usize, dst: MacAddress, payload: Vec<u8>, intended: Vec<usize>) {
        let ceiling = self.sc.pn_ceiling;
        let macs = self.macs.clone();
        let dev = &mut self.devices[from];
        let (sci, an, pn) = dev.next_pn(sc, ceiling, &mut self.registry, &macs);
        let key = &self.registry.sas[&(sci, an)].key;
        let plain = PlainFrame {
            dst,
            src: dev.mac,
            ethertype: SIM_ETHERTYPE,
            payload,
        };
        let bytes = key
            .protect(&plain, sci, an, pn)
            .expect("valid frame")
            .to_bytes()
            .expect("valid frame");
        dev.stats.sent += 1;
        let name = dev.name.clone();
        self.genuine.insert(
            frame_hash(&bytes),
            GenuineFrame {
                intended,
                accepted_by: vec![],
            },
        );
        self.log(&name, "tx", &bytes);
        self.emit_on_lan(from, bytes);
    }

    /// A device puts a frame on its LAN: neighbours and the gateway see it.
    fn emit_on_lan(&mut self, from: usize, bytes: Vec<u8>) {
        let lan = self.devices[from].lan;
        for d in 0..self.devices.len() {
            if d != from && self.devices[d].lan == lan {
                self.deliver(d, &bytes, Origin::Local);
            }
        }
        let em = self.gateways[lan].on_lan_frame(&bytes, self.now);
        self.handle(lan, em, Origin::Local);
    }

    fn deliver(&mut self, d: usize, bytes: &[u8], origin: Origin) -> RxOutcome {
        let o = self.devices[d].receive(bytes, &self.registry);
        let name = self.devices[d].name.clone();
        self.log(&name, &format!("rx_{o:?}"), bytes);
        if o == RxOutcome::Accepted {
            match self.genuine.get_mut(&frame_hash(bytes)) {
                Some(g) if !origin.is_attack() => g.accepted_by.push(d),
                _ => self.report.attacker_accepted += 1,
            }
        }
        o
    }

    fn handle(&mut self, gw: usize, em: Vec<Emission>, origin: Origin) {
        for e in em {
            match e {
                Emission::Lan { frame } => {
                    let mut best: Option<RxOutcome> = None;
                    for d in 0..self.devices.len() {
                        if self.devices[d].lan == gw {
                            let o = self.deliver(d, &frame, origin);
                            best = Some(match best {
                                None => o,
                                Some(b) => better(b, o),
                            });
                        }
                    }
                    if origin != Origin::Local {
                        self.fate(origin, Fate::Delivered(best.unwrap_or(RxOutcome::NotForMe)));
                    }
                }
                Emission::Tunnel { to, datagram } => {
                    let to = self
                        .gateways
                        .iter()
                        .position(|g| g.id() == to)
                        .expect("peer is a gateway");
                    self.tunnel_out(gw, to, datagram);
                }
                Emission::Mgmt { to, msg } => {
                    let to = self
                        .gateways
                        .iter()
                        .position(|g| g.id() == to)
                        .expect("peer is a gateway");
                    self.mgmt_out(gw, to, msg);
                }
            }
        }
    }

    fn mgmt_out(&mut self, from: usize, to: usize, msg: MgmtMessage) {
        self.report.net.mgmt_sent += 1;
        if msg.kind() == Kind::FlowAnnounce && self.announces_dropped < self.sc.mgmt.drop_announces {
            self.announces_dropped += 1;
            self.report.net.mgmt_dropped += 1;
            return;
        }
        let at = (self.now + Duration::from_micros(self.sc.mgmt.latency_us))
            .max(self.mgmt_last.get(&(from, to)).copied().unwrap_or(Timestamp::ZERO));
        self.mgmt_last.insert((from, to), at);
        if self.sc.mgmt.duplicate {
            self.push(
                at,
                Ev::Mgmt {
                    to,
                    from,
                    msg: msg.clone(),
                },
            );
        }
        self.push(at, Ev::Mgmt { to, from, msg });
    }

    fn tunnel_out(&mut self, from: usize, to: usize, mut datagram: Vec<u8>) {
        let capture = self.capture_index;
        self.capture_index += 1;
        self.report.net.genuine_sent += 1;
        let src = gateway_addr(from).0;
        self.log(&format!("gw{from}"), "tunnel_tx", &datagram);
        if self.captures.len() < self.capture_limit {
            self.captures.push((to, src, datagram.clone()));
        }
        self.last_capture.insert(to, (src, datagram.clone()));

        let mut origin = Origin::Genuine { capture };
        let mut extra = Duration::ZERO;
        for a in &self.sc.attacks {
            match *a {
                AttackSpec::Drop { start, count } if (start..start + count).contains(&capture) => {
                    self.report.net.attacker_dropped += 1;
                    return;
                }
                AttackSpec::Delay { start, count, extra_ms } if (start..start + count).contains(&capture) => {
                    self.report.net.delayed += 1;
                    extra += Duration::from_millis(extra_ms);
                }
                AttackSpec::Mutate { start, count } if (start..start + count).contains(&capture) => {
                    let i = (capture - start) as usize;
                    let offset = i % datagram.len();
                    let bit = ((i / datagram.len()) % 8) as u8;
                    datagram[offset] ^= 1 << bit;
                    self.report.net.mutated += 1;
                    origin = Origin::Mutated { capture, offset, bit };
                }
                _ => {}
            }
        }

        let net = self.sc.net.clone();
        if self.rng.gen_bool(net.loss) {
            self.report.net.lost += 1;
            return;
        }
        let copies = if self.rng.gen_bool(net.dup) { 2 } else { 1 };
        for c in 0..copies {
            let mut delay = Duration::from_micros(net.latency_us) + extra;
            if net.jitter_us > 0 {
                delay += Duration::from_micros(self.rng.gen_range(0..=net.jitter_us));
            }
            if net.reorder_max_us > 0 && self.rng.gen_bool(net.reorder) {
                delay += Duration::from_micros(self.rng.gen_range(0..=net.reorder_max_us));
            }
            if c == 1 {
                self.report.net.duplicated += 1;
            }
            let d = if c + 1 == copies {
                std::mem::take(&mut datagram)
            } else {
                datagram.clone()
            };
            self.push(
                self.now + delay,
                Ev::Tunnel {
                    to,
                    from: src,
                    datagram: d,
                    origin,
                },
            );
        }
    }

    fn finish(mut self) -> SimReport {
        let mut r = std::mem::take(&mut self.report);
        r.end = self.now;
        for d in &self.devices {
            r.devices.insert(d.name.clone(), d.stats.clone());
        }
        r.gateways = self.gateways.iter().map(|g| g.stats()).collect();
        for g in self.genuine.values() {
            if g.intended.iter().all(|i| g.accepted_by.contains(i)) {
                r.intended_delivered += 1;
            } else {
                r.intended_lost += 1;
            }
        }
        r.tx_epochs = self
            .gateways
            .iter()
            .map(|g| (0..self.gateways.len()).map(|j| g.tx_epoch(gateway_addr(j))).collect())
            .collect();
        r
    }
}

fn origin_kind(o: &Origin) -> &'static str {
    match o {
        Origin::Genuine { .. } => "genuine",
        Origin::Replayed { .. } => "replayed",
        Origin::Injected { .. } => "injected",
        Origin::Mutated { .. } => "mutated",
        Origin::Local => "local",
    }
}

fn rank(o: RxOutcome) -> u8 {
    match o {
        RxOutcome::Accepted => 0,
        RxOutcome::Duplicate => 1,
        RxOutcome::IcvFail => 2,
        RxOutcome::Malformed => 3,
        RxOutcome::UnknownSc => 4,
        RxOutcome::ForeignSc => 5,
        RxOutcome::Mka => 6,
        RxOutcome::NotMacsec => 7,
        RxOutcome::NotForMe => 8,
    }
}

fn better(a: RxOutcome, b: RxOutcome) -> RxOutcome {
    if rank(b) < rank(a) {
        b
    } else {
        a
    }
}

/// Where a one-bit change at `offset` of a tunnel datagram is expected to be
/// caught, for a datagram carrying a frame with at least 2 bytes of secure
/// data. `bit` is the bit index within the byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    /// Carrier header: bad encapsulation or another scheme.
    Encap,
    /// Identifier lookup.
    Identifier,
    /// Frame shape checks at the gateway.
    Shape,
    Epoch,
    /// Decrypted header does not match a flow.
    HeaderLookup,
    /// Passed the gateway; the device ICV check rejects it.
    DeviceIcv,
    /// Full-frame authentication tag.
    Tag,
}

pub fn expected_site(scheme: Scheme, offset: usize, bit: u8) -> Site {
    if offset < ENCAP_HEADER_LEN {
        return Site::Encap;
    }
    let o = offset - ENCAP_HEADER_LEN;
    match scheme {
        Scheme::Naive => Site::DeviceIcv,
        Scheme::Idf => match o {
            0..=7 => Site::Identifier,
            // ES and C flags are carried verbatim and only covered by the ICV.
            8 if bit == 6 || bit == 2 => Site::DeviceIcv,
            8 | 9 => Site::Shape,
            _ => Site::DeviceIcv,
        },
        Scheme::Enc => match o {
            0 => Site::Epoch,
            1..=32 => Site::HeaderLookup,
            _ => Site::DeviceIcv,
        },
        Scheme::FullEnc => match o {
            0 => Site::Epoch,
            _ => Site::Tag,
        },
    }
}

/// Whether an observed fate is consistent with the expected site.
pub fn fate_matches(site: Site, fate: Fate) -> bool {
    use DropReason as R;
    match (site, fate) {
        (Site::Encap, Fate::GatewayDrop(R::BadEncap | R::SchemeMismatch)) => true,
        (Site::Identifier, Fate::GatewayDrop(R::UnknownIdentifier)) => true,
        (Site::Shape, Fate::GatewayDrop(R::Malformed)) => true,
        // An epoch flipped onto the previous, still valid epoch decrypts garbage.
        (Site::Epoch, Fate::GatewayDrop(R::BadEpoch | R::HeaderMismatch | R::UnknownFlow | R::BadTag)) => true,
        (Site::HeaderLookup, Fate::GatewayDrop(R::HeaderMismatch | R::UnknownFlow)) => true,
        (Site::DeviceIcv, Fate::Delivered(RxOutcome::IcvFail)) => true,
        // a changed destination on a frame sent to every gateway
        (Site::DeviceIcv, Fate::Delivered(RxOutcome::NotForMe)) => true,
        (Site::Tag, Fate::GatewayDrop(R::BadTag)) => true,
        _ => false,
    }
}
