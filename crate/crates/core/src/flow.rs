//! Flows and the uplink, downlink and identifier tables.
//!
//! A flow is unidirectional traffic of one security association towards one
//! destination address: `(SCI, AN, dst)`. The uplink table is keyed by
//! `(SCI, AN)` and holds both the unicast and the broadcast flow of that SA.
//! The downlink flow table is keyed by base identifier and the identifier
//! table by rotating identifier.

use std::collections::hash_map::Entry;
use std::collections::{BTreeSet, HashMap, VecDeque};
use std::hash::{BuildHasherDefault, Hasher};
use std::time::Duration;

use rand::RngCore;
use thiserror::Error;

use crate::encap::GatewayId;
use crate::frame::{MacAddress, MacsecView, Sci};
use crate::idf::derive_ridf;
use crate::time::Timestamp;
use crate::window::{Slide, SlidingWindow, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowKey {
    pub sci: Sci,
    pub an: u8,
    pub dst: MacAddress,
}

impl FlowKey {
    pub fn cast(&self) -> Cast {
        Cast::of(&self.dst)
    }
}

pub fn classify(frame: &MacsecView<'_>) -> FlowKey {
    FlowKey {
        sci: frame.sci(),
        an: frame.an(),
        dst: frame.dst(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Cast {
    Unicast,
    Broadcast,
}

impl Cast {
    pub fn of(dst: &MacAddress) -> Cast {
        if dst.is_broadcast() {
            Cast::Broadcast
        } else {
            Cast::Unicast
        }
    }

    pub fn opposite(self) -> Cast {
        match self {
            Cast::Unicast => Cast::Broadcast,
            Cast::Broadcast => Cast::Unicast,
        }
    }
}

/// Random 128-bit per-flow base identifier.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Bidf(pub [u8; 16]);

impl Bidf {
    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut b = [0u8; 16];
        rng.fill_bytes(&mut b);
        Bidf(b)
    }
}

impl std::fmt::Debug for Bidf {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Bidf(")?;
        for b in &self.0[..4] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

/// 64-bit rotating identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Ridf(pub u64);

/// Hasher for keys that are already uniformly distributed (identifiers).
#[derive(Default)]
pub struct IdentityHasher(u64);

impl Hasher for IdentityHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for chunk in bytes.chunks(8) {
            let mut b = [0u8; 8];
            b[..chunk.len()].copy_from_slice(chunk);
            self.0 = self.0.rotate_left(5) ^ u64::from_le_bytes(b);
        }
    }

    fn write_u64(&mut self, v: u64) {
        self.0 ^= v;
    }
}

pub type IdentityBuild = BuildHasherDefault<IdentityHasher>;

/// Everything needed to rebuild the sensitive header fields of a flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HeaderData {
    pub dst: MacAddress,
    pub src: MacAddress,
    pub sci: Sci,
    pub an: u8,
}

impl HeaderData {
    pub fn of(frame: &MacsecView<'_>) -> Self {
        HeaderData {
            dst: frame.dst(),
            src: frame.src(),
            sci: frame.sci(),
            an: frame.an(),
        }
    }

    pub fn key(&self) -> FlowKey {
        FlowKey {
            sci: self.sci,
            an: self.an,
            dst: self.dst,
        }
    }

    pub fn cast(&self) -> Cast {
        Cast::of(&self.dst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum FlowError {
    #[error("flows of different security associations or of the same cast cannot be bound")]
    BindMismatch,
    #[error("unknown flow")]
    UnknownFlow,
}

// ---------------------------------------------------------------------------
// Uplink

/// One direction class (unicast or broadcast) of an uplink SA entry.
#[derive(Debug, Clone)]
pub struct UplinkHalf {
    pub bidf: Bidf,
    /// Set once the first frame of this class was seen and announced.
    pub header: Option<HeaderData>,
    pub announced_pn: u32,
    /// Peers that have not acknowledged the announcement yet.
    pub pending_acks: BTreeSet<GatewayId>,
    /// Frames held back until every peer acknowledged.
    pub queue: VecDeque<Vec<u8>>,
}

impl UplinkHalf {
    fn new(bidf: Bidf) -> Self {
        UplinkHalf {
            bidf,
            header: None,
            announced_pn: 0,
            pending_acks: BTreeSet::new(),
            queue: VecDeque::new(),
        }
    }

    pub fn is_ready(&self) -> bool {
        self.header.is_some() && self.pending_acks.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct UplinkFlowEntry {
    pub sci: Sci,
    pub an: u8,
    pub unicast: UplinkHalf,
    pub broadcast: UplinkHalf,
    /// Learned destination gateways of the unicast flow; empty means unknown.
    pub remote_gateways: BTreeSet<GatewayId>,
    pub timeout: Timestamp,
    /// Highest PN sent on this SA.
    pub highest_pn: u32,
}

impl UplinkFlowEntry {
    pub fn half(&self, cast: Cast) -> &UplinkHalf {
        match cast {
            Cast::Unicast => &self.unicast,
            Cast::Broadcast => &self.broadcast,
        }
    }

    pub fn half_mut(&mut self, cast: Cast) -> &mut UplinkHalf {
        match cast {
            Cast::Unicast => &mut self.unicast,
            Cast::Broadcast => &mut self.broadcast,
        }
    }

    pub fn bidfs(&self) -> [Bidf; 2] {
        [self.unicast.bidf, self.broadcast.bidf]
    }
}

#[derive(Debug, Default)]
pub struct UplinkTable {
    entries: HashMap<(Sci, u8), UplinkFlowEntry>,
}

impl UplinkTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, sci: Sci, an: u8) -> Option<&UplinkFlowEntry> {
        self.entries.get(&(sci, an))
    }

    pub fn get_mut(&mut self, sci: Sci, an: u8) -> Option<&mut UplinkFlowEntry> {
        self.entries.get_mut(&(sci, an))
    }

    /// Creates the entry for a new SA with fresh, distinct base identifiers.
    pub fn insert_new<R: RngCore + ?Sized>(
        &mut self,
        sci: Sci,
        an: u8,
        rng: &mut R,
        timeout: Timestamp,
    ) -> &mut UplinkFlowEntry {
        let unicast = Bidf::random(rng);
        let mut broadcast = Bidf::random(rng);
        while broadcast == unicast {
            broadcast = Bidf::random(rng);
        }
        match self.entries.entry((sci, an)) {
            Entry::Occupied(o) => o.into_mut(),
            Entry::Vacant(v) => v.insert(UplinkFlowEntry {
                sci,
                an,
                unicast: UplinkHalf::new(unicast),
                broadcast: UplinkHalf::new(broadcast),
                remote_gateways: BTreeSet::new(),
                timeout,
                highest_pn: 0,
            }),
        }
    }

    pub fn remove(&mut self, sci: Sci, an: u8) -> Option<UplinkFlowEntry> {
        self.entries.remove(&(sci, an))
    }

    /// Removes entries whose timeout lies before `now`.
    pub fn expire(&mut self, now: Timestamp) -> Vec<UplinkFlowEntry> {
        let dead: Vec<(Sci, u8)> = self
            .entries
            .iter()
            .filter(|(_, e)| e.timeout < now)
            .map(|(k, _)| *k)
            .collect();
        dead.into_iter().filter_map(|k| self.entries.remove(&k)).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &UplinkFlowEntry> {
        self.entries.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut UplinkFlowEntry> {
        self.entries.values_mut()
    }
}

// ---------------------------------------------------------------------------
// Downlink

#[derive(Debug, Clone)]
pub struct DownlinkFlowEntry {
    pub bidf: Bidf,
    pub header: HeaderData,
    pub window: SlidingWindow,
    pub announced_pn: u32,
    pub bound: Option<Bidf>,
    pub origin: GatewayId,
    pub last_seen: Timestamp,
    /// Rotating identifiers per window slot; empty when identifiers are not tracked.
    ridfs: Vec<Option<Ridf>>,
}

impl DownlinkFlowEntry {
    /// Lowest unseen packet number in the window.
    pub fn next_expected_pn(&self) -> Option<u32> {
        self.window.next_expected()
    }

    pub fn cast(&self) -> Cast {
        self.header.cast()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdentifierEntry {
    pub pn: u32,
    pub seen: bool,
    pub flow: Bidf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegisterOutcome {
    Inserted {
        bound: bool,
    },
    /// Same base identifier already known; nothing changed.
    Duplicate,
    /// Known base identifier announced again with a higher PN.
    Reset,
}

/// Outcome of a downlink accept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Accepted {
    Accept { header: HeaderData, pn: u32 },
    Replay,
    OutOfWindow,
    Unknown,
}

#[derive(Debug, Clone, Copy, Default)]
struct SaFlows {
    unicast: Option<Bidf>,
    broadcast: Option<Bidf>,
}

impl SaFlows {
    fn get(&self, cast: Cast) -> Option<Bidf> {
        match cast {
            Cast::Unicast => self.unicast,
            Cast::Broadcast => self.broadcast,
        }
    }

    fn slot(&mut self, cast: Cast) -> &mut Option<Bidf> {
        match cast {
            Cast::Unicast => &mut self.unicast,
            Cast::Broadcast => &mut self.broadcast,
        }
    }
}

/// Downlink flow table, identifier table and the secondary indices used for
/// binding and for header lookups of the encryption scheme.
#[derive(Debug)]
pub struct DownlinkTables {
    flows: HashMap<Bidf, DownlinkFlowEntry, IdentityBuild>,
    ids: IdentifierIndex,
    by_sa: HashMap<(Sci, u8), SaFlows>,
    by_key: HashMap<FlowKey, Bidf>,
    window_size: u32,
    auto_bind: bool,
}

/// Rotating identifiers of every tracked packet number, across all flows.
#[derive(Debug)]
struct IdentifierIndex {
    map: HashMap<Ridf, IdentifierEntry, IdentityBuild>,
    enabled: bool,
    hash_calls: u64,
    collisions: u64,
}

impl IdentifierIndex {
    fn mark_seen(&mut self, entry: &DownlinkFlowEntry, pn: u32) {
        if !self.enabled {
            return;
        }
        if let Some(r) = entry.ridfs[entry.window.slot(pn)] {
            if let Some(ie) = self.map.get_mut(&r) {
                if ie.flow == entry.bidf && ie.pn == pn {
                    ie.seen = true;
                }
            }
        }
    }

    fn apply_slide(&mut self, entry: &mut DownlinkFlowEntry, slide: &Slide) {
        self.drop_range(entry, slide.left.clone());
        self.add_range(entry, slide.entered.clone());
    }

    fn drop_range(&mut self, entry: &DownlinkFlowEntry, pns: std::ops::Range<u64>) {
        if !self.enabled {
            return;
        }
        for p in pns {
            let pn = p as u32;
            if let Some(r) = entry.ridfs[entry.window.slot(pn)] {
                if let Entry::Occupied(o) = self.map.entry(r) {
                    if o.get().flow == entry.bidf && o.get().pn == pn {
                        o.remove();
                    }
                }
            }
        }
    }

    fn add_range(&mut self, entry: &mut DownlinkFlowEntry, pns: std::ops::Range<u64>) {
        if !self.enabled {
            return;
        }
        for p in pns {
            let pn = p as u32;
            let r = derive_ridf(&entry.bidf, pn);
            self.hash_calls += 1;
            let slot = entry.window.slot(pn);
            match self.map.entry(r) {
                Entry::Vacant(v) => {
                    v.insert(IdentifierEntry {
                        pn,
                        seen: false,
                        flow: entry.bidf,
                    });
                    entry.ridfs[slot] = Some(r);
                }
                Entry::Occupied(_) => {
                    self.collisions += 1;
                    entry.ridfs[slot] = None;
                }
            }
        }
    }
}

impl DownlinkTables {
    pub fn new(window_size: u32, track_identifiers: bool) -> Self {
        DownlinkTables {
            flows: HashMap::default(),
            ids: IdentifierIndex {
                map: HashMap::default(),
                enabled: track_identifiers,
                hash_calls: 0,
                collisions: 0,
            },
            by_sa: HashMap::new(),
            by_key: HashMap::new(),
            window_size,
            auto_bind: true,
        }
    }

    /// Test hook: when disabled, unicast and broadcast flows of one SA are
    /// registered independently and never bound.
    pub fn set_auto_bind(&mut self, enabled: bool) {
        self.auto_bind = enabled;
    }

    pub fn window_size(&self) -> u32 {
        self.window_size
    }

    pub fn flow(&self, bidf: &Bidf) -> Option<&DownlinkFlowEntry> {
        self.flows.get(bidf)
    }

    pub fn flow_by_key(&self, key: &FlowKey) -> Option<&DownlinkFlowEntry> {
        self.by_key.get(key).and_then(|b| self.flows.get(b))
    }

    pub fn identifier(&self, ridf: Ridf) -> Option<&IdentifierEntry> {
        self.ids.map.get(&ridf)
    }

    /// Identifier derivations performed.
    pub fn hash_calls(&self) -> u64 {
        self.ids.hash_calls
    }

    /// Identifiers not inserted because another entry already held them.
    pub fn collisions(&self) -> u64 {
        self.ids.collisions
    }

    pub fn flows(&self) -> impl Iterator<Item = &DownlinkFlowEntry> {
        self.flows.values()
    }

    pub fn flow_count(&self) -> usize {
        self.flows.len()
    }

    pub fn identifier_count(&self) -> usize {
        self.ids.map.len()
    }

    /// Registers an announced flow and precomputes its identifier window.
    pub fn register(
        &mut self,
        bidf: Bidf,
        header: HeaderData,
        pn: u32,
        origin: GatewayId,
        now: Timestamp,
    ) -> RegisterOutcome {
        let pn = pn.max(1);
        if let Some(existing) = self.flows.get(&bidf) {
            if pn <= existing.announced_pn {
                return RegisterOutcome::Duplicate;
            }
            let entry = self.flows.get_mut(&bidf).expect("present");
            self.ids.drop_range(entry, entry.window.span());
            entry.window = SlidingWindow::new(pn, self.window_size);
            entry.announced_pn = pn;
            entry.last_seen = now;
            let span = entry.window.span();
            self.ids.add_range(entry, span);
            return RegisterOutcome::Reset;
        }

        // A new base identifier for a flow we already know replaces it
        // (the origin restarted or the flow expired there).
        let key = header.key();
        if let Some(old) = self.by_key.get(&key).copied() {
            self.remove(&old);
        }

        let window = SlidingWindow::new(pn, self.window_size);
        let ridfs = if self.ids.enabled {
            vec![None; window.capacity()]
        } else {
            Vec::new()
        };
        let mut entry = DownlinkFlowEntry {
            bidf,
            header,
            window,
            announced_pn: pn,
            bound: None,
            origin,
            last_seen: now,
            ridfs,
        };
        let span = entry.window.span();
        self.ids.add_range(&mut entry, span);
        self.flows.insert(bidf, entry);
        self.by_key.insert(key, bidf);
        let cast = header.cast();
        let sa = self.by_sa.entry((header.sci, header.an)).or_default();
        *sa.slot(cast) = Some(bidf);
        let partner = sa.get(cast.opposite());

        let mut bound = false;
        if self.auto_bind {
            if let Some(p) = partner {
                bound = self.bind(&bidf, &p).is_ok();
            }
        }
        RegisterOutcome::Inserted { bound }
    }

    /// Binds a unicast and a broadcast flow of the same SA so that packet
    /// numbers consumed on either advance both windows.
    pub fn bind(&mut self, a: &Bidf, b: &Bidf) -> Result<(), FlowError> {
        let (ha, hb) = match (self.flows.get(a), self.flows.get(b)) {
            (Some(x), Some(y)) => (x.header, y.header),
            _ => return Err(FlowError::UnknownFlow),
        };
        if ha.sci != hb.sci || ha.an != hb.an || ha.cast() == hb.cast() {
            return Err(FlowError::BindMismatch);
        }
        self.flows.get_mut(a).expect("present").bound = Some(*b);
        self.flows.get_mut(b).expect("present").bound = Some(*a);
        Ok(())
    }

    pub fn unbind(&mut self, a: &Bidf) {
        if let Some(p) = self.flows.get_mut(a).and_then(|e| e.bound.take()) {
            if let Some(pe) = self.flows.get_mut(&p) {
                pe.bound = None;
            }
        }
    }

    /// Removes a flow, its identifiers and index entries. A bound partner is
    /// unbound but kept.
    pub fn remove(&mut self, bidf: &Bidf) -> Option<DownlinkFlowEntry> {
        self.unbind(bidf);
        let entry = self.flows.remove(bidf)?;
        self.ids.drop_range(&entry, entry.window.span());
        let key = entry.header.key();
        if self.by_key.get(&key) == Some(bidf) {
            self.by_key.remove(&key);
        }
        let sa_key = (entry.header.sci, entry.header.an);
        if let Some(sa) = self.by_sa.get_mut(&sa_key) {
            let slot = sa.slot(entry.cast());
            if *slot == Some(*bidf) {
                *slot = None;
            }
            if sa.unicast.is_none() && sa.broadcast.is_none() {
                self.by_sa.remove(&sa_key);
            }
        }
        Some(entry)
    }

    /// Drops flows idle for longer than `idle`.
    pub fn expire_idle(&mut self, now: Timestamp, idle: Duration) -> Vec<Bidf> {
        let dead: Vec<Bidf> = self
            .flows
            .values()
            .filter(|e| e.last_seen + idle < now)
            .map(|e| e.bidf)
            .collect();
        for b in &dead {
            self.remove(b);
        }
        dead
    }

    /// Accepts `pn` on the flow `bidf`, maintaining identifiers and the
    /// bound partner.
    pub fn accept(&mut self, bidf: &Bidf, pn: u32, now: Timestamp) -> Accepted {
        let Some(entry) = self.flows.get_mut(bidf) else {
            return Accepted::Unknown;
        };
        let slide = match entry.window.accept(pn) {
            Verdict::Accept(s) => s,
            Verdict::Replay => return Accepted::Replay,
            Verdict::OutOfWindow => return Accepted::OutOfWindow,
        };
        entry.last_seen = now;
        let header = entry.header;
        let partner = entry.bound;
        self.ids.apply_slide(entry, &slide);
        self.ids.mark_seen(entry, pn);

        if let Some(pe) = partner.and_then(|p| self.flows.get_mut(&p)) {
            let (slide, fresh) = pe.window.observe(pn);
            self.ids.apply_slide(pe, &slide);
            if fresh {
                self.ids.mark_seen(pe, pn);
            }
        }
        Accepted::Accept { header, pn }
    }

    /// Full consistency check of identifier table against every window.
    pub fn audit(&self) -> Result<(), String> {
        let mut expected = 0usize;
        for e in self.flows.values() {
            if let Some(p) = e.bound {
                let pe = self.flows.get(&p).ok_or("bound to missing flow")?;
                if pe.bound != Some(e.bidf) {
                    return Err("binding not symmetric".into());
                }
            }
            if self.by_key.get(&e.header.key()) != Some(&e.bidf) {
                return Err(format!("flow {:?} missing from key index", e.bidf));
            }
            if !self.ids.enabled {
                continue;
            }
            for p in e.window.span() {
                let pn = p as u32;
                let r = derive_ridf(&e.bidf, pn);
                match self.ids.map.get(&r) {
                    Some(ie) if ie.flow == e.bidf && ie.pn == pn => {
                        if ie.seen != e.window.is_seen(pn) {
                            return Err(format!("seen flag of pn {pn} disagrees with window"));
                        }
                        expected += 1;
                    }
                    Some(_) if self.ids.collisions > 0 => {}
                    _ => return Err(format!("identifier for pn {pn} missing")),
                }
            }
        }
        if self.ids.enabled && expected != self.ids.map.len() {
            return Err(format!(
                "identifier table holds {} entries, windows cover {expected}",
                self.ids.map.len()
            ));
        }
        Ok(())
    }
}
