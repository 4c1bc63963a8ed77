//! Sans-io tunnel gateway.
//!
//! A [`Gateway`] owns all tables of one LAN edge. The runtime (simulator or
//! socket loop) feeds it LAN frames, tunnel datagrams, management messages
//! and clock ticks, and performs the returned [`Emission`]s.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt::Write as _;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::enc::{self, EncError, HeaderCipher, KeyRing, TunnelKey, DEFAULT_GRACE};
use crate::encap::{decap, encap_header, max_body_len, GatewayId, Scheme, DEFAULT_MTU, ENCAP_HEADER_LEN};
use crate::flow::{Bidf, Cast, DownlinkTables, HeaderData, RegisterOutcome, UplinkTable};
use crate::frame::{ethertype_of, is_mka, MacAddress, MacsecView, Sci, ETHERTYPE_MACSEC};
use crate::fullenc::{FrameSealer, FullEncError, FullEncRx};
use crate::idf::{self, IdfError};
use crate::mgmt::{MgmtMessage, HELLO_INTERVAL, MAX_TRANSMISSIONS, MKA_BUFFER, RETRANSMIT_INITIAL};
use crate::time::Timestamp;
use crate::window::DEFAULT_WINDOW;

pub const DEFAULT_FLOW_TIMEOUT: Duration = Duration::from_secs(60);
pub const DEFAULT_QUEUE_LIMIT: usize = 128;

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub id: GatewayId,
    pub peers: Vec<GatewayId>,
    pub scheme: Scheme,
    pub window: u32,
    /// Idle time after which an uplink flow is forgotten.
    pub flow_timeout: Duration,
    /// Shorter timeout for flows no remote gateway has answered yet.
    pub unanswered_timeout: Option<Duration>,
    /// Frames held per flow while its announcement is outstanding.
    pub queue_limit: usize,
    pub mtu: usize,
    /// How long the previous header key stays valid after a rekey.
    pub grace: Duration,
    /// Tell peers when an uplink flow expires instead of letting them time out.
    pub propagate_expire: bool,
    /// Drop tunnel datagrams whose source is not a configured peer.
    pub filter_sources: bool,
    /// Seed for identifiers and keys; `None` draws from the OS.
    pub seed: Option<u64>,
}

impl GatewayConfig {
    pub fn new(id: GatewayId, peers: Vec<GatewayId>, scheme: Scheme) -> Self {
        GatewayConfig {
            id,
            peers,
            scheme,
            window: DEFAULT_WINDOW,
            flow_timeout: DEFAULT_FLOW_TIMEOUT,
            unanswered_timeout: None,
            queue_limit: DEFAULT_QUEUE_LIMIT,
            mtu: DEFAULT_MTU,
            grace: DEFAULT_GRACE,
            propagate_expire: true,
            filter_sources: false,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.peers.is_empty() {
            return Err("at least one peer is required".into());
        }
        if self.peers.contains(&self.id) {
            return Err("a gateway cannot peer with itself".into());
        }
        let unique: HashSet<_> = self.peers.iter().collect();
        if unique.len() != self.peers.len() {
            return Err("duplicate peer".into());
        }
        if self.window == 0 {
            return Err("window must be at least 1".into());
        }
        if self.queue_limit == 0 {
            return Err("queue limit must be at least 1".into());
        }
        if max_body_len(self.mtu) < 64 {
            return Err(format!("mtu {} too small", self.mtu));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Emission {
    Tunnel { to: GatewayId, datagram: Vec<u8> },
    Mgmt { to: GatewayId, msg: MgmtMessage },
    Lan { frame: Vec<u8> },
}

macro_rules! stats {
    ($($(#[$m:meta])* $name:ident),* $(,)?) => {
        /// Monotone gateway counters.
        #[derive(Debug, Clone, Default, PartialEq, Eq)]
        pub struct GatewayStats {
            $($(#[$m])* pub $name: u64,)*
        }

        impl GatewayStats {
            pub const FIELDS: &'static [&'static str] = &[$(stringify!($name)),*];

            pub fn values(&self) -> Vec<u64> {
                vec![$(self.$name),*]
            }
        }
    };
}

stats! {
    lan_frames_in,
    lan_bytes_in,
    /// Frames encoded for the tunnel (once per frame, not per peer).
    tunneled,
    datagrams_out,
    tunnel_bytes_out,
    datagrams_in,
    tunnel_bytes_in,
    reconstructed,
    lan_bytes_out,
    drop_not_macsec,
    drop_malformed_lan,
    drop_untunnelable,
    drop_flow_conflict,
    drop_too_large,
    drop_queue_overflow,
    drop_filtered_source,
    drop_bad_encap,
    drop_scheme_mismatch,
    drop_malformed_tunnel,
    drop_unknown_identifier,
    drop_unknown_flow,
    drop_header_mismatch,
    drop_replay,
    drop_out_of_window,
    drop_bad_epoch,
    drop_bad_tag,
    mka_forwarded,
    mka_delivered,
    mka_buffered,
    drop_mka_overflow,
    drop_mgmt_invalid,
    announces_sent,
    announces_received,
    announces_duplicate,
    announces_reset,
    flows_bound,
    retransmissions,
    peer_unreachable,
    learned,
    learn_conflicts,
    uplink_flows_expired,
    downlink_flows_expired,
    rekeys_started,
    rekeys_completed,
    rekeys_installed,
    hash_uplink,
    hash_downlink,
    cipher_uplink,
    cipher_downlink,
    gcm_uplink,
    gcm_downlink,
    identifier_collisions,
}

impl GatewayStats {
    pub fn csv_header() -> String {
        let mut s = String::from("time_us,gateway");
        for f in Self::FIELDS {
            s.push(',');
            s.push_str(f);
        }
        s
    }

    pub fn csv_row(&self, now: Timestamp, id: GatewayId) -> String {
        let mut s = format!("{},{}", now.as_micros(), id);
        for v in self.values() {
            let _ = write!(s, ",{v}");
        }
        s
    }

    /// Sum of all downlink rejects.
    pub fn tunnel_drops(&self) -> u64 {
        self.drop_filtered_source
            + self.drop_bad_encap
            + self.drop_scheme_mismatch
            + self.drop_malformed_tunnel
            + self.drop_unknown_identifier
            + self.drop_unknown_flow
            + self.drop_header_mismatch
            + self.drop_replay
            + self.drop_out_of_window
            + self.drop_bad_epoch
            + self.drop_bad_tag
    }

    /// Sum of all uplink rejects.
    pub fn lan_drops(&self) -> u64 {
        self.drop_not_macsec
            + self.drop_malformed_lan
            + self.drop_untunnelable
            + self.drop_flow_conflict
            + self.drop_too_large
            + self.drop_queue_overflow
    }
}

/// Why a tunnel datagram was not emitted on the LAN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DropReason {
    FilteredSource,
    BadEncap,
    SchemeMismatch,
    Malformed,
    UnknownIdentifier,
    UnknownFlow,
    HeaderMismatch,
    Replay,
    OutOfWindow,
    BadEpoch,
    BadTag,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Pending {
    Announce(Bidf),
    Rekey(u8),
}

#[derive(Debug, Clone)]
struct Outstanding {
    what: Pending,
    msg: MgmtMessage,
    next_at: Timestamp,
    tries: u32,
}

struct PeerState {
    reachable: bool,
    outstanding: Vec<Outstanding>,
    mka_buffer: VecDeque<Vec<u8>>,
    tx_epoch: Option<u8>,
    tx_header: Option<HeaderCipher>,
    tx_sealer: Option<FrameSealer>,
    tx_seq: u32,
    rekey_pending: Option<TunnelKey>,
    rx_header: KeyRing<HeaderCipher>,
    rx_sealer: KeyRing<FrameSealer>,
    rx_seq: FullEncRx,
}

impl PeerState {
    fn new(window: u32) -> Self {
        PeerState {
            reachable: true,
            outstanding: Vec::new(),
            mka_buffer: VecDeque::new(),
            tx_epoch: None,
            tx_header: None,
            tx_sealer: None,
            tx_seq: 0,
            rekey_pending: None,
            rx_header: KeyRing::new(),
            rx_sealer: KeyRing::new(),
            rx_seq: FullEncRx::new(window.max(64)),
        }
    }

    fn has_tx_key(&self) -> bool {
        self.tx_epoch.is_some()
    }

    fn tx_ops(&self) -> (u64, u64) {
        let h = self.tx_header.as_ref().map_or(0, |c| c.ops());
        let s = self.tx_sealer.as_ref().map_or(0, |c| c.ops());
        (h, s)
    }
}

pub struct Gateway {
    cfg: GatewayConfig,
    rng: ChaCha20Rng,
    uplink: UplinkTable,
    downlink: DownlinkTables,
    peers: BTreeMap<GatewayId, PeerState>,
    /// Source addresses seen on the local LAN.
    local_macs: HashSet<MacAddress>,
    /// Bridge table of the naive scheme.
    naive_macs: HashMap<MacAddress, GatewayId>,
    stats: GatewayStats,
    retired_cipher_tx: u64,
    retired_gcm_tx: u64,
    next_hello: Timestamp,
    last_drop: Option<DropReason>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("id", &self.cfg.id)
            .field("scheme", &self.cfg.scheme)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(cfg: GatewayConfig) -> Result<Self, String> {
        cfg.validate()?;
        let rng = match cfg.seed {
            Some(s) => ChaCha20Rng::seed_from_u64(s),
            None => ChaCha20Rng::from_entropy(),
        };
        let peers = cfg.peers.iter().map(|p| (*p, PeerState::new(cfg.window))).collect();
        Ok(Gateway {
            downlink: DownlinkTables::new(cfg.window, cfg.scheme == Scheme::Idf),
            uplink: UplinkTable::new(),
            rng,
            peers,
            local_macs: HashSet::new(),
            naive_macs: HashMap::new(),
            stats: GatewayStats::default(),
            retired_cipher_tx: 0,
            retired_gcm_tx: 0,
            next_hello: Timestamp::ZERO,
            last_drop: None,
            cfg,
        })
    }

    pub fn id(&self) -> GatewayId {
        self.cfg.id
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.cfg
    }

    pub fn uplink(&self) -> &UplinkTable {
        &self.uplink
    }

    pub fn downlink(&self) -> &DownlinkTables {
        &self.downlink
    }

    /// Test hook: disable binding of unicast and broadcast flows.
    pub fn set_binding(&mut self, enabled: bool) {
        self.downlink.set_auto_bind(enabled);
    }

    /// Reason of the most recent tunnel-side drop, for attack accounting.
    pub fn last_drop(&self) -> Option<DropReason> {
        self.last_drop
    }

    pub fn tx_epoch(&self, peer: GatewayId) -> Option<u8> {
        self.peers.get(&peer).and_then(|p| p.tx_epoch)
    }

    pub fn rx_epoch(&self, peer: GatewayId) -> Option<u8> {
        self.peers.get(&peer).and_then(|p| match self.cfg.scheme {
            Scheme::FullEnc => p.rx_sealer.current_epoch(),
            _ => p.rx_header.current_epoch(),
        })
    }

    /// Runtime notification about the management connection of `peer`.
    pub fn set_peer_reachable(&mut self, peer: GatewayId, reachable: bool, now: Timestamp) -> Vec<Emission> {
        let mut out = Vec::new();
        let Some(p) = self.peers.get_mut(&peer) else {
            return out;
        };
        let was = p.reachable;
        p.reachable = reachable;
        if reachable && !was {
            for o in &mut p.outstanding {
                o.tries = 0;
                o.next_at = now;
            }
            while let Some(frame) = p.mka_buffer.pop_front() {
                self.stats.mka_forwarded += 1;
                out.push(Emission::Mgmt {
                    to: peer,
                    msg: MgmtMessage::MkaForward { frame },
                });
            }
            self.retransmit(now, &mut out);
        }
        out
    }

    pub fn stats(&self) -> GatewayStats {
        let mut s = self.stats.clone();
        s.hash_downlink = self.downlink.hash_calls();
        s.identifier_collisions = self.downlink.collisions();
        let (mut ct, mut gt) = (self.retired_cipher_tx, self.retired_gcm_tx);
        let (mut cr, mut gr) = (0, 0);
        for p in self.peers.values() {
            let (h, g) = p.tx_ops();
            ct += h;
            gt += g;
            cr += p.rx_header.ops();
            gr += p.rx_sealer.ops();
        }
        s.cipher_uplink = ct;
        s.cipher_downlink = cr;
        s.gcm_uplink = gt;
        s.gcm_downlink = gr;
        s
    }

    // -----------------------------------------------------------------------
    // LAN ingress

    pub fn on_lan_frame(&mut self, bytes: &[u8], now: Timestamp) -> Vec<Emission> {
        let mut out = Vec::new();
        self.stats.lan_frames_in += 1;
        self.stats.lan_bytes_in += bytes.len() as u64;
        if is_mka(bytes) {
            self.forward_mka(bytes, &mut out);
            return out;
        }
        if ethertype_of(bytes) != Some(ETHERTYPE_MACSEC) {
            self.stats.drop_not_macsec += 1;
            return out;
        }
        let view = match MacsecView::parse(bytes) {
            Ok(v) => v,
            Err(_) => {
                self.stats.drop_malformed_lan += 1;
                return out;
            }
        };
        if !view.tci().is_tunnelable() {
            self.stats.drop_untunnelable += 1;
            return out;
        }
        if self.cfg.scheme == Scheme::Naive {
            self.naive_uplink(&view, &mut out);
            return out;
        }
        self.flow_uplink(&view, now, &mut out);
        out
    }

    fn forward_mka(&mut self, bytes: &[u8], out: &mut Vec<Emission>) {
        for (id, p) in self.peers.iter_mut() {
            if p.reachable {
                self.stats.mka_forwarded += 1;
                out.push(Emission::Mgmt {
                    to: *id,
                    msg: MgmtMessage::MkaForward { frame: bytes.to_vec() },
                });
            } else {
                if p.mka_buffer.len() == MKA_BUFFER {
                    p.mka_buffer.pop_front();
                    self.stats.drop_mka_overflow += 1;
                }
                p.mka_buffer.push_back(bytes.to_vec());
                self.stats.mka_buffered += 1;
            }
        }
    }

    fn naive_uplink(&mut self, view: &MacsecView<'_>, out: &mut Vec<Emission>) {
        self.local_macs.insert(view.src());
        let body = view.bytes();
        if body.len() > max_body_len(self.cfg.mtu) {
            self.stats.drop_too_large += 1;
            return;
        }
        self.stats.tunneled += 1;
        let dst = view.dst();
        let target = if Cast::of(&dst) == Cast::Unicast {
            self.naive_macs.get(&dst).copied()
        } else {
            None
        };
        let mut datagram = Vec::with_capacity(ENCAP_HEADER_LEN + body.len());
        datagram.extend_from_slice(&encap_header(Scheme::Naive));
        datagram.extend_from_slice(body);
        match target {
            Some(to) => self.push_datagram(to, datagram, out),
            None => {
                let peers: Vec<GatewayId> = self.peers.keys().copied().collect();
                for to in peers {
                    self.push_datagram(to, datagram.clone(), out);
                }
            }
        }
    }

    fn push_datagram(&mut self, to: GatewayId, datagram: Vec<u8>, out: &mut Vec<Emission>) {
        self.stats.datagrams_out += 1;
        self.stats.tunnel_bytes_out += datagram.len() as u64;
        out.push(Emission::Tunnel { to, datagram });
    }

    fn flow_uplink(&mut self, view: &MacsecView<'_>, now: Timestamp, out: &mut Vec<Emission>) {
        let sci = view.sci();
        let an = view.an();
        let pn = view.pn();
        let src = view.src();
        if self.local_macs.insert(src) {
            self.learn_from_local(src, out);
        }
        let header = HeaderData::of(view);
        let cast = header.cast();
        let window = self.cfg.window as u64;

        // Established flow, nothing queued: a single table lookup.
        if let Some(e) = self.uplink.get_mut(sci, an) {
            if pn as u64 + window >= e.highest_pn as u64 {
                let half = e.half(cast);
                let bidf = half.bidf;
                if half.header == Some(header) && half.queue.is_empty() && half.is_ready() {
                    let learned = cast == Cast::Unicast && !e.remote_gateways.is_empty();
                    let keyed = !matches!(self.cfg.scheme, Scheme::Enc | Scheme::FullEnc)
                        || if learned {
                            e.remote_gateways.iter().all(|p| self.peers[p].has_tx_key())
                        } else {
                            self.peers.values().all(PeerState::has_tx_key)
                        };
                    if keyed {
                        e.highest_pn = e.highest_pn.max(pn);
                        if learned || self.cfg.unanswered_timeout.is_none() {
                            e.timeout = now + self.cfg.flow_timeout;
                        }
                        let targets = learned.then_some(&e.remote_gateways);
                        emit_frame(&self.cfg, &mut self.peers, &mut self.stats, view, bidf, targets, out);
                        return;
                    }
                }
            }
        }

        // A PN far below what the SA already used means the AN was reused for
        // a new key: treat it as a new SA.
        if self
            .uplink
            .get(sci, an)
            .is_some_and(|e| (pn as u64) + window < e.highest_pn as u64)
        {
            self.retire_uplink(sci, an, out);
        }

        if self.uplink.get(sci, an).is_none() {
            let timeout = now + self.cfg.unanswered_timeout.unwrap_or(self.cfg.flow_timeout);
            self.uplink.insert_new(sci, an, &mut self.rng, timeout);
            if self.cfg.scheme == Scheme::Enc
                || (self.cfg.scheme == Scheme::FullEnc && self.peers.values().any(|p| !p.has_tx_key()))
            {
                self.start_rekey(now, out);
            }
        }

        let peers: Vec<GatewayId> = self.peers.keys().copied().collect();
        let entry = self.uplink.get_mut(sci, an).expect("inserted above");
        entry.highest_pn = entry.highest_pn.max(pn);
        let answered = !entry.remote_gateways.is_empty();
        entry.timeout = now
            + match (answered, self.cfg.unanswered_timeout) {
                (false, Some(t)) => t,
                _ => self.cfg.flow_timeout,
            };
        let half = entry.half_mut(cast);
        match half.header {
            None => {
                half.header = Some(header);
                half.announced_pn = pn;
                half.pending_acks = peers.iter().copied().collect();
                let bidf = half.bidf;
                let msg = MgmtMessage::FlowAnnounce { bidf, header, pn, cast };
                for p in &peers {
                    self.send_reliable(*p, Pending::Announce(bidf), msg.clone(), now, out);
                    self.stats.announces_sent += 1;
                }
                if cast == Cast::Unicast {
                    self.learn_from_reply(&header, out);
                }
            }
            Some(h) if h != header => {
                self.stats.drop_flow_conflict += 1;
                return;
            }
            Some(_) => {}
        }

        let ready = self.half_ready(sci, an, cast);
        let half = self.uplink.get_mut(sci, an).expect("present").half_mut(cast);
        if !ready || !half.queue.is_empty() {
            if half.queue.len() >= self.cfg.queue_limit {
                half.queue.pop_front();
                self.stats.drop_queue_overflow += 1;
            }
            half.queue.push_back(view.bytes().to_vec());
            if ready {
                self.flush(sci, an, cast, out);
            }
            return;
        }
        self.send_frame(view, sci, an, cast, out);
    }

    fn half_ready(&self, sci: Sci, an: u8, cast: Cast) -> bool {
        let Some(e) = self.uplink.get(sci, an) else {
            return false;
        };
        let half = e.half(cast);
        if !half.is_ready() {
            return false;
        }
        match self.cfg.scheme {
            Scheme::Enc | Scheme::FullEnc => match learned_targets(e, cast) {
                Some(t) => t.iter().all(|p| self.peers[p].has_tx_key()),
                None => self.peers.values().all(PeerState::has_tx_key),
            },
            _ => true,
        }
    }

    fn flush(&mut self, sci: Sci, an: u8, cast: Cast, out: &mut Vec<Emission>) {
        if !self.half_ready(sci, an, cast) {
            return;
        }
        let half = self.uplink.get_mut(sci, an).expect("present").half_mut(cast);
        let queued: Vec<Vec<u8>> = half.queue.drain(..).collect();
        for bytes in queued {
            let view = MacsecView::parse(&bytes).expect("validated on ingress");
            self.send_frame(&view, sci, an, cast, out);
        }
    }

    fn send_frame(&mut self, view: &MacsecView<'_>, sci: Sci, an: u8, cast: Cast, out: &mut Vec<Emission>) {
        let e = self.uplink.get(sci, an).expect("present");
        let bidf = e.half(cast).bidf;
        let targets = learned_targets(e, cast);
        emit_frame(&self.cfg, &mut self.peers, &mut self.stats, view, bidf, targets, out);
    }

    /// A local device answered: tell the origins of flows towards it.
    fn learn_from_reply(&mut self, reply: &HeaderData, out: &mut Vec<Emission>) {
        let hits: Vec<(GatewayId, Sci, u8, Bidf)> = self
            .downlink
            .flows()
            .filter(|f| f.cast() == Cast::Unicast && f.header.dst == reply.src && f.header.src == reply.dst)
            .map(|f| (f.origin, f.header.sci, f.header.an, f.bidf))
            .collect();
        for (to, sci, an, bidf) in hits {
            out.push(Emission::Mgmt {
                to,
                msg: MgmtMessage::FlowLearned { sci, an, bidf },
            });
        }
    }

    /// A new local address appeared: flows already announced towards it
    /// have found their destination.
    fn learn_from_local(&mut self, mac: MacAddress, out: &mut Vec<Emission>) {
        let hits: Vec<(GatewayId, Sci, u8, Bidf)> = self
            .downlink
            .flows()
            .filter(|f| f.cast() == Cast::Unicast && f.header.dst == mac)
            .map(|f| (f.origin, f.header.sci, f.header.an, f.bidf))
            .collect();
        for (to, sci, an, bidf) in hits {
            out.push(Emission::Mgmt {
                to,
                msg: MgmtMessage::FlowLearned { sci, an, bidf },
            });
        }
    }

    fn retire_uplink(&mut self, sci: Sci, an: u8, out: &mut Vec<Emission>) {
        if let Some(e) = self.uplink.remove(sci, an) {
            self.stats.uplink_flows_expired += 1;
            self.announce_expiry(&e, out);
        }
    }

    fn announce_expiry(&mut self, e: &crate::flow::UplinkFlowEntry, out: &mut Vec<Emission>) {
        for half in [&e.unicast, &e.broadcast] {
            if half.header.is_none() {
                continue;
            }
            for p in self.peers.values_mut() {
                p.outstanding.retain(|o| o.what != Pending::Announce(half.bidf));
            }
            if self.cfg.propagate_expire {
                for to in self.peers.keys() {
                    out.push(Emission::Mgmt {
                        to: *to,
                        msg: MgmtMessage::FlowExpire { bidf: half.bidf },
                    });
                }
            }
        }
    }

    fn start_rekey(&mut self, now: Timestamp, out: &mut Vec<Emission>) {
        let ids: Vec<GatewayId> = self.peers.keys().copied().collect();
        for id in ids {
            if self.peers[&id].rekey_pending.is_some() {
                continue;
            }
            let epoch = self.peers[&id].tx_epoch.map_or(1, |e| e.wrapping_add(1));
            let key = TunnelKey {
                key: self.rng.gen(),
                epoch,
            };
            self.peers.get_mut(&id).expect("peer").rekey_pending = Some(key);
            self.stats.rekeys_started += 1;
            self.send_reliable(
                id,
                Pending::Rekey(epoch),
                MgmtMessage::Rekey { epoch, key: key.key },
                now,
                out,
            );
        }
    }

    fn send_reliable(
        &mut self,
        to: GatewayId,
        what: Pending,
        msg: MgmtMessage,
        now: Timestamp,
        out: &mut Vec<Emission>,
    ) {
        let p = self.peers.get_mut(&to).expect("peer");
        p.outstanding.retain(|o| o.what != what);
        p.outstanding.push(Outstanding {
            what,
            msg: msg.clone(),
            next_at: now + RETRANSMIT_INITIAL,
            tries: 1,
        });
        out.push(Emission::Mgmt { to, msg });
    }

    // -----------------------------------------------------------------------
    // Tunnel ingress

    pub fn on_tunnel_packet(&mut self, from: GatewayId, datagram: &[u8], now: Timestamp) -> Vec<Emission> {
        let mut out = Vec::new();
        self.stats.datagrams_in += 1;
        self.stats.tunnel_bytes_in += datagram.len() as u64;
        match self.decode(from, datagram, now) {
            Ok(frame) => {
                self.last_drop = None;
                self.stats.reconstructed += 1;
                self.stats.lan_bytes_out += frame.len() as u64;
                out.push(Emission::Lan { frame });
            }
            Err(r) => {
                self.last_drop = Some(r);
                let c = match r {
                    DropReason::FilteredSource => &mut self.stats.drop_filtered_source,
                    DropReason::BadEncap => &mut self.stats.drop_bad_encap,
                    DropReason::SchemeMismatch => &mut self.stats.drop_scheme_mismatch,
                    DropReason::Malformed => &mut self.stats.drop_malformed_tunnel,
                    DropReason::UnknownIdentifier => &mut self.stats.drop_unknown_identifier,
                    DropReason::UnknownFlow => &mut self.stats.drop_unknown_flow,
                    DropReason::HeaderMismatch => &mut self.stats.drop_header_mismatch,
                    DropReason::Replay => &mut self.stats.drop_replay,
                    DropReason::OutOfWindow => &mut self.stats.drop_out_of_window,
                    DropReason::BadEpoch => &mut self.stats.drop_bad_epoch,
                    DropReason::BadTag => &mut self.stats.drop_bad_tag,
                };
                *c += 1;
            }
        }
        out
    }

    fn decode(&mut self, from: GatewayId, datagram: &[u8], now: Timestamp) -> Result<Vec<u8>, DropReason> {
        if self.cfg.filter_sources && !self.peers.contains_key(&from) {
            return Err(DropReason::FilteredSource);
        }
        let (scheme, body) = decap(datagram).map_err(|_| DropReason::BadEncap)?;
        if scheme != self.cfg.scheme {
            return Err(DropReason::SchemeMismatch);
        }
        let mut frame = Vec::with_capacity(body.len() + 32);
        match scheme {
            Scheme::Naive => {
                let view = MacsecView::parse(body).map_err(|_| DropReason::Malformed)?;
                if self.peers.contains_key(&from) {
                    self.naive_macs.insert(view.src(), from);
                }
                frame.extend_from_slice(body);
            }
            Scheme::Idf => {
                idf::downlink_decode(body, &mut self.downlink, now, &mut frame).map_err(|e| match e {
                    IdfError::Malformed(_) => DropReason::Malformed,
                    IdfError::UnknownIdentifier => DropReason::UnknownIdentifier,
                    IdfError::Replay => DropReason::Replay,
                    IdfError::OutOfWindow => DropReason::OutOfWindow,
                })?;
            }
            Scheme::Enc => {
                let keys = self.peers.get(&from).map(|p| &p.rx_header);
                enc::downlink_decode(body, keys, &mut self.downlink, now, &mut frame).map_err(|e| match e {
                    EncError::Malformed => DropReason::Malformed,
                    EncError::BadEpoch(_) => DropReason::BadEpoch,
                    EncError::UnknownFlow => DropReason::UnknownFlow,
                    EncError::HeaderMismatch => DropReason::HeaderMismatch,
                    EncError::Replay => DropReason::Replay,
                    EncError::OutOfWindow => DropReason::OutOfWindow,
                })?;
            }
            Scheme::FullEnc => {
                if body.len() < crate::fullenc::FULLENC_OVERHEAD {
                    return Err(DropReason::Malformed);
                }
                let epoch = body[0];
                let p = self.peers.get_mut(&from).ok_or(DropReason::BadEpoch)?;
                let sealer = p.rx_sealer.select(epoch, now).ok_or(DropReason::BadEpoch)?;
                let seq = sealer.open(body, &mut frame).map_err(|_| DropReason::BadTag)?;
                p.rx_seq.check(seq).map_err(|e| match e {
                    FullEncError::Replay => DropReason::Replay,
                    _ => DropReason::OutOfWindow,
                })?;
                MacsecView::parse(&frame).map_err(|_| DropReason::Malformed)?;
            }
        }
        Ok(frame)
    }

    // -----------------------------------------------------------------------
    // Management

    pub fn on_mgmt(&mut self, from: GatewayId, msg: MgmtMessage, now: Timestamp) -> Vec<Emission> {
        let mut out = Vec::new();
        if !self.peers.contains_key(&from) {
            self.stats.drop_mgmt_invalid += 1;
            return out;
        }
        match msg {
            MgmtMessage::Hello { .. } => {
                out.extend(self.set_peer_reachable(from, true, now));
            }
            MgmtMessage::FlowAnnounce {
                bidf,
                header,
                pn,
                cast: _,
            } => {
                if self.cfg.scheme == Scheme::Naive {
                    self.stats.drop_mgmt_invalid += 1;
                    return out;
                }
                self.stats.announces_received += 1;
                match self.downlink.register(bidf, header, pn, from, now) {
                    RegisterOutcome::Inserted { bound } => {
                        if bound {
                            self.stats.flows_bound += 1;
                        }
                        if header.cast() == Cast::Unicast && self.local_macs.contains(&header.dst) {
                            out.push(Emission::Mgmt {
                                to: from,
                                msg: MgmtMessage::FlowLearned {
                                    sci: header.sci,
                                    an: header.an,
                                    bidf,
                                },
                            });
                        }
                    }
                    RegisterOutcome::Duplicate => self.stats.announces_duplicate += 1,
                    RegisterOutcome::Reset => self.stats.announces_reset += 1,
                }
                out.push(Emission::Mgmt {
                    to: from,
                    msg: MgmtMessage::FlowAck { bidf },
                });
            }
            MgmtMessage::FlowAck { bidf } => {
                let p = self.peers.get_mut(&from).expect("peer");
                p.outstanding.retain(|o| o.what != Pending::Announce(bidf));
                let hit = self.uplink.iter_mut().find_map(|e| {
                    for cast in [Cast::Unicast, Cast::Broadcast] {
                        let h = e.half_mut(cast);
                        if h.bidf == bidf {
                            h.pending_acks.remove(&from);
                            return Some((e.sci, e.an, cast));
                        }
                    }
                    None
                });
                if let Some((sci, an, cast)) = hit {
                    self.flush(sci, an, cast, &mut out);
                }
            }
            MgmtMessage::FlowLearned { sci, an, bidf } => {
                if let Some(e) = self.uplink.get_mut(sci, an) {
                    if e.unicast.bidf == bidf {
                        if !e.remote_gateways.is_empty() && !e.remote_gateways.contains(&from) {
                            self.stats.learn_conflicts += 1;
                        }
                        e.remote_gateways.clear();
                        e.remote_gateways.insert(from);
                        e.timeout = now + self.cfg.flow_timeout;
                        self.stats.learned += 1;
                    }
                }
            }
            MgmtMessage::FlowExpire { bidf } => {
                if self.downlink.flow(&bidf).is_some_and(|f| f.origin == from) {
                    self.downlink.remove(&bidf);
                    self.stats.downlink_flows_expired += 1;
                }
            }
            MgmtMessage::Rekey { epoch, key } => {
                let key = TunnelKey { key, epoch };
                let p = self.peers.get_mut(&from).expect("peer");
                p.rx_header.install(key, now, self.cfg.grace);
                p.rx_sealer.install(key, now, self.cfg.grace);
                self.stats.rekeys_installed += 1;
                out.push(Emission::Mgmt {
                    to: from,
                    msg: MgmtMessage::RekeyAck { epoch },
                });
            }
            MgmtMessage::RekeyAck { epoch } => {
                let p = self.peers.get_mut(&from).expect("peer");
                p.outstanding.retain(|o| o.what != Pending::Rekey(epoch));
                if p.rekey_pending.is_some_and(|k| k.epoch == epoch) {
                    let k = p.rekey_pending.take().expect("checked");
                    let (h, g) = p.tx_ops();
                    self.retired_cipher_tx += h;
                    self.retired_gcm_tx += g;
                    p.tx_epoch = Some(k.epoch);
                    p.tx_header = Some(HeaderCipher::new(&k.key));
                    p.tx_sealer = Some(FrameSealer::new(&k.key));
                    self.stats.rekeys_completed += 1;
                    self.flush_all(&mut out);
                }
            }
            MgmtMessage::MkaForward { frame } => {
                if is_mka(&frame) {
                    self.stats.mka_delivered += 1;
                    out.push(Emission::Lan { frame });
                } else {
                    self.stats.drop_mgmt_invalid += 1;
                }
            }
        }
        out
    }

    fn flush_all(&mut self, out: &mut Vec<Emission>) {
        let keys: Vec<(Sci, u8)> = self.uplink.iter().map(|e| (e.sci, e.an)).collect();
        for (sci, an) in keys {
            for cast in [Cast::Unicast, Cast::Broadcast] {
                self.flush(sci, an, cast, out);
            }
        }
    }

    // -----------------------------------------------------------------------
    // Timers

    pub fn on_tick(&mut self, now: Timestamp) -> Vec<Emission> {
        let mut out = Vec::new();
        if now >= self.next_hello {
            self.next_hello = now + HELLO_INTERVAL;
            for to in self.peers.keys() {
                out.push(Emission::Mgmt {
                    to: *to,
                    msg: MgmtMessage::Hello { gateway: self.cfg.id },
                });
            }
        }
        self.retransmit(now, &mut out);

        for e in self.uplink.expire(now) {
            self.stats.uplink_flows_expired += 1;
            self.announce_expiry(&e, &mut out);
        }
        let idle = self.cfg.flow_timeout * 2;
        self.stats.downlink_flows_expired += self.downlink.expire_idle(now, idle).len() as u64;
        out
    }

    fn retransmit(&mut self, now: Timestamp, out: &mut Vec<Emission>) {
        for (id, p) in self.peers.iter_mut() {
            if !p.reachable {
                continue;
            }
            let mut gave_up = false;
            for o in &mut p.outstanding {
                if o.next_at > now {
                    continue;
                }
                if o.tries >= MAX_TRANSMISSIONS {
                    gave_up = true;
                    continue;
                }
                let backoff = RETRANSMIT_INITIAL * (1 << o.tries.min(16));
                o.tries += 1;
                o.next_at = now + backoff;
                self.stats.retransmissions += 1;
                out.push(Emission::Mgmt {
                    to: *id,
                    msg: o.msg.clone(),
                });
            }
            if gave_up {
                p.reachable = false;
                self.stats.peer_unreachable += 1;
            }
        }
    }
}

/// Remote gateways a learned unicast flow goes to; `None` means all peers.
fn learned_targets(e: &crate::flow::UplinkFlowEntry, cast: Cast) -> Option<&BTreeSet<GatewayId>> {
    (cast == Cast::Unicast && !e.remote_gateways.is_empty()).then_some(&e.remote_gateways)
}

/// Encodes one frame for every target. Callers have checked that the flow
/// is announced and, for keyed schemes, that every target has a key.
#[allow(clippy::too_many_arguments)]
fn emit_frame(
    cfg: &GatewayConfig,
    peers: &mut BTreeMap<GatewayId, PeerState>,
    stats: &mut GatewayStats,
    view: &MacsecView<'_>,
    bidf: Bidf,
    targets: Option<&BTreeSet<GatewayId>>,
    out: &mut Vec<Emission>,
) {
    let max = max_body_len(cfg.mtu);
    let scheme = cfg.scheme;
    let header = encap_header(scheme);
    let mut push = |stats: &mut GatewayStats, to: GatewayId, datagram: Vec<u8>| {
        stats.datagrams_out += 1;
        stats.tunnel_bytes_out += datagram.len() as u64;
        out.push(Emission::Tunnel { to, datagram });
    };
    match scheme {
        Scheme::Idf => {
            let mut d = Vec::with_capacity(ENCAP_HEADER_LEN + view.bytes().len());
            d.extend_from_slice(&header);
            idf::uplink_encode(view, &bidf, &mut d);
            stats.hash_uplink += 1;
            if d.len() - ENCAP_HEADER_LEN > max {
                stats.drop_too_large += 1;
                return;
            }
            stats.tunneled += 1;
            let n = targets.map_or(peers.len(), BTreeSet::len);
            let all = targets.is_none().then(|| peers.keys()).into_iter().flatten();
            let ids = targets.into_iter().flatten().chain(all).copied();
            let mut d = Some(d);
            for (i, to) in ids.enumerate() {
                let datagram = if i + 1 == n {
                    d.take().expect("last target")
                } else {
                    d.clone().expect("present")
                };
                push(stats, to, datagram);
            }
        }
        Scheme::Enc | Scheme::FullEnc => {
            let delta = if scheme == Scheme::Enc {
                enc::ENC_SIZE_DELTA
            } else {
                crate::fullenc::FULLENC_SIZE_DELTA
            };
            let body_len = (view.bytes().len() as isize + delta) as usize;
            if body_len > max {
                stats.drop_too_large += 1;
                return;
            }
            stats.tunneled += 1;
            let mut one = |stats: &mut GatewayStats, to: GatewayId, p: &mut PeerState| {
                let epoch = p.tx_epoch.expect("caller checked keys");
                let mut d = Vec::with_capacity(ENCAP_HEADER_LEN + body_len);
                d.extend_from_slice(&header);
                if scheme == Scheme::Enc {
                    enc::uplink_encode(view, p.tx_header.as_ref().expect("keyed"), epoch, &mut d);
                } else {
                    p.tx_seq = p.tx_seq.wrapping_add(1).max(1);
                    p.tx_sealer
                        .as_ref()
                        .expect("keyed")
                        .seal(view.bytes(), epoch, p.tx_seq, &mut d);
                }
                push(stats, to, d);
            };
            match targets {
                Some(t) => {
                    for to in t {
                        one(stats, *to, peers.get_mut(to).expect("target is a peer"));
                    }
                }
                None => {
                    for (to, p) in peers.iter_mut() {
                        one(stats, *to, p);
                    }
                }
            }
        }
        Scheme::Naive => unreachable!("naive frames bypass flows"),
    }
}
