//! Socket runtime for one gateway: UDP tunnel, TCP management links and a
//! LAN attachment, all feeding a single event loop that owns the
//! [`Gateway`].
//!
//! Management links are one TCP connection per direction. The connecting
//! side opens with a `Hello` naming its tunnel endpoint, which identifies
//! every later message on that connection. The channel itself is assumed to
//! be protected by the deployment (a VPN or a dedicated link).

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, UdpSocket};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encap::{GatewayId, Scheme};
use crate::gateway::{Emission, Gateway, GatewayConfig, GatewayStats};
use crate::mgmt::{MgmtDecoder, MgmtMessage};
use crate::time::Timestamp;

pub const TICK: Duration = Duration::from_millis(100);
const POLL: Duration = Duration::from_millis(200);
const CONNECT_TIMEOUT: Duration = Duration::from_secs(1);
const MAX_FRAME: usize = 9216;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{what}: {source}")]
    Io { what: String, source: io::Error },
}

fn io_err(what: impl Into<String>) -> impl FnOnce(io::Error) -> RuntimeError {
    let what = what.into();
    move |source| RuntimeError::Io { what, source }
}

/// Where Ethernet frames of the local LAN come from and go to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LanSpec {
    /// Frames as UDP payloads: received on `bind`, sent to `peer`. Useful
    /// with a tap bridge or for tests.
    Udp { bind: SocketAddr, peer: SocketAddr },
    /// A Linux network interface in promiscuous raw mode.
    Raw(String),
}

impl FromStr for LanSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if let Some(rest) = s.strip_prefix("udp:") {
            let (a, b) = rest.split_once(',').ok_or("expected udp:BIND,PEER")?;
            let bind = a.parse().map_err(|e| format!("{a}: {e}"))?;
            let peer = b.parse().map_err(|e| format!("{b}: {e}"))?;
            return Ok(LanSpec::Udp { bind, peer });
        }
        if let Some(name) = s.strip_prefix("raw:") {
            if name.is_empty() {
                return Err("empty interface name".into());
            }
            return Ok(LanSpec::Raw(name.into()));
        }
        Err(format!(
            "unknown LAN attachment {s:?}; expected udp:BIND,PEER or raw:IFNAME"
        ))
    }
}

impl TryFrom<String> for LanSpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<LanSpec> for String {
    fn from(l: LanSpec) -> String {
        match l {
            LanSpec::Udp { bind, peer } => format!("udp:{bind},{peer}"),
            LanSpec::Raw(n) => format!("raw:{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeerConfig {
    pub tunnel: SocketAddr,
    pub mgmt: SocketAddr,
}

fn default_window() -> u32 {
    crate::window::DEFAULT_WINDOW
}
fn default_flow_timeout() -> u64 {
    crate::gateway::DEFAULT_FLOW_TIMEOUT.as_secs()
}
fn default_grace() -> u64 {
    crate::enc::DEFAULT_GRACE.as_millis() as u64
}
fn default_mtu() -> usize {
    crate::encap::DEFAULT_MTU
}

/// Settings of one gateway process, as read from its TOML file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub scheme: Scheme,
    /// UDP tunnel endpoint; also the gateway's identity.
    pub tun_listen: SocketAddr,
    pub mgmt_listen: SocketAddr,
    pub lan: LanSpec,
    pub peers: Vec<PeerConfig>,
    #[serde(default = "default_window")]
    pub window: u32,
    #[serde(default = "default_flow_timeout")]
    pub flow_timeout_secs: u64,
    #[serde(default = "default_grace")]
    pub grace_ms: u64,
    #[serde(default = "default_mtu")]
    pub mtu: usize,
    #[serde(default)]
    pub filter_sources: bool,
    /// Print gateway counters as CSV every this many seconds.
    #[serde(default)]
    pub stats_interval_secs: Option<u64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl NodeConfig {
    pub fn from_toml(s: &str) -> Result<Self, RuntimeError> {
        toml::from_str(s).map_err(|e| RuntimeError::Config(e.to_string()))
    }

    pub fn gateway_config(&self) -> Result<GatewayConfig, RuntimeError> {
        let peers = self.peers.iter().map(|p| GatewayId(p.tunnel)).collect();
        let mut cfg = GatewayConfig::new(GatewayId(self.tun_listen), peers, self.scheme);
        cfg.window = self.window;
        cfg.flow_timeout = Duration::from_secs(self.flow_timeout_secs);
        cfg.grace = Duration::from_millis(self.grace_ms);
        cfg.mtu = self.mtu;
        cfg.filter_sources = self.filter_sources;
        cfg.seed = self.seed;
        cfg.validate().map_err(RuntimeError::Config)?;
        Ok(cfg)
    }
}

enum Event {
    Lan(Vec<u8>),
    Tunnel(SocketAddr, Vec<u8>),
    Mgmt(GatewayId, MgmtMessage),
    PeerDown(GatewayId),
}

/// Both directions of a LAN attachment.
pub trait LanPort: Send {
    fn recv(&mut self, buf: &mut [u8]) -> io::Result<Option<usize>>;
    fn send(&mut self, frame: &[u8]) -> io::Result<()>;
    fn try_clone(&self) -> io::Result<Box<dyn LanPort>>;
}

struct UdpLan {
    sock: UdpSocket,
    peer: SocketAddr,
}

impl LanPort for UdpLan {
    fn recv(&mut self, buf: &mut [u8]) -> io::Result<Option<usize>> {
        match self.sock.recv_from(buf) {
            Ok((n, from)) if from == self.peer => Ok(Some(n)),
            Ok(_) => Ok(None),
            Err(e) if is_timeout(&e) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn send(&mut self, frame: &[u8]) -> io::Result<()> {
        self.sock.send_to(frame, self.peer).map(|_| ())
    }

    fn try_clone(&self) -> io::Result<Box<dyn LanPort>> {
        Ok(Box::new(UdpLan {
            sock: self.sock.try_clone()?,
            peer: self.peer,
        }))
    }
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut)
}

#[cfg(target_os = "linux")]
mod raw {
    use std::ffi::CString;
    use std::io;
    use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};
    use std::sync::Arc;

    use super::LanPort;

    pub struct RawLan {
        fd: Arc<OwnedFd>,
        ifindex: i32,
    }

    fn check(r: libc::c_int) -> io::Result<libc::c_int> {
        if r < 0 {
            Err(io::Error::last_os_error())
        } else {
            Ok(r)
        }
    }

    impl RawLan {
        pub fn open(name: &str, timeout: std::time::Duration) -> io::Result<Self> {
            let cname = CString::new(name).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "bad name"))?;
            // SAFETY: plain libc calls with checked results and owned buffers.
            unsafe {
                let ifindex = libc::if_nametoindex(cname.as_ptr()) as i32;
                if ifindex == 0 {
                    return Err(io::Error::last_os_error());
                }
                let proto = (libc::ETH_P_ALL as u16).to_be() as i32;
                let fd = check(libc::socket(libc::AF_PACKET, libc::SOCK_RAW, proto))?;
                let fd = OwnedFd::from_raw_fd(fd);
                let mut sll: libc::sockaddr_ll = std::mem::zeroed();
                sll.sll_family = libc::AF_PACKET as u16;
                sll.sll_protocol = proto as u16;
                sll.sll_ifindex = ifindex;
                check(libc::bind(
                    fd.as_raw_fd(),
                    &sll as *const _ as *const libc::sockaddr,
                    std::mem::size_of::<libc::sockaddr_ll>() as u32,
                ))?;
                let mut mreq: libc::packet_mreq = std::mem::zeroed();
                mreq.mr_ifindex = ifindex;
                mreq.mr_type = libc::PACKET_MR_PROMISC as u16;
                check(libc::setsockopt(
                    fd.as_raw_fd(),
                    libc::SOL_PACKET,
                    libc::PACKET_ADD_MEMBERSHIP,
                    &mreq as *const _ as *const libc::c_void,
                    std::mem::size_of::<libc::packet_mreq>() as u32,
                ))?;
                let tv = libc::timeval {
                    tv_sec: timeout.as_secs() as _,
                    tv_usec: timeout.subsec_micros() as _,
                };
                check(libc::setsockopt(
                    fd.as_raw_fd(),
                    libc::SOL_SOCKET,
                    libc::SO_RCVTIMEO,
                    &tv as *const _ as *const libc::c_void,
                    std::mem::size_of::<libc::timeval>() as u32,
                ))?;
                Ok(RawLan {
                    fd: Arc::new(fd),
                    ifindex,
                })
            }
        }
    }

    impl LanPort for RawLan {
        fn recv(&mut self, buf: &mut [u8]) -> io::Result<Option<usize>> {
            // SAFETY: buf and sll outlive the call; lengths match.
            unsafe {
                let mut sll: libc::sockaddr_ll = std::mem::zeroed();
                let mut len = std::mem::size_of::<libc::sockaddr_ll>() as u32;
                let n = libc::recvfrom(
                    self.fd.as_raw_fd(),
                    buf.as_mut_ptr() as *mut libc::c_void,
                    buf.len(),
                    0,
                    &mut sll as *mut _ as *mut libc::sockaddr,
                    &mut len,
                );
                if n < 0 {
                    let e = io::Error::last_os_error();
                    return if super::is_timeout(&e) || e.kind() == io::ErrorKind::Interrupted {
                        Ok(None)
                    } else {
                        Err(e)
                    };
                }
                // Our own transmissions come back as outgoing packets.
                if sll.sll_pkttype == libc::PACKET_OUTGOING {
                    return Ok(None);
                }
                Ok(Some(n as usize))
            }
        }

        fn send(&mut self, frame: &[u8]) -> io::Result<()> {
            // SAFETY: frame and sll outlive the call.
            unsafe {
                let mut sll: libc::sockaddr_ll = std::mem::zeroed();
                sll.sll_family = libc::AF_PACKET as u16;
                sll.sll_ifindex = self.ifindex;
                sll.sll_halen = 6;
                sll.sll_addr[..6].copy_from_slice(&frame[..6.min(frame.len())]);
                let n = libc::sendto(
                    self.fd.as_raw_fd(),
                    frame.as_ptr() as *const libc::c_void,
                    frame.len(),
                    0,
                    &sll as *const _ as *const libc::sockaddr,
                    std::mem::size_of::<libc::sockaddr_ll>() as u32,
                );
                if n < 0 {
                    return Err(io::Error::last_os_error());
                }
            }
            Ok(())
        }

        fn try_clone(&self) -> io::Result<Box<dyn LanPort>> {
            Ok(Box::new(RawLan {
                fd: self.fd.clone(),
                ifindex: self.ifindex,
            }))
        }
    }
}

pub fn open_lan(spec: &LanSpec) -> Result<Box<dyn LanPort>, RuntimeError> {
    match spec {
        LanSpec::Udp { bind, peer } => {
            let sock = UdpSocket::bind(bind).map_err(io_err(format!("LAN socket {bind}")))?;
            sock.set_read_timeout(Some(POLL)).map_err(io_err("LAN socket"))?;
            Ok(Box::new(UdpLan { sock, peer: *peer }))
        }
        #[cfg(target_os = "linux")]
        LanSpec::Raw(name) => Ok(Box::new(
            raw::RawLan::open(name, POLL).map_err(io_err(format!("raw interface {name}")))?,
        )),
        #[cfg(not(target_os = "linux"))]
        LanSpec::Raw(_) => Err(RuntimeError::Config("raw LAN attachment needs Linux".into())),
    }
}

/// A running gateway process. Dropping it without [`Node::shutdown`] leaves
/// the threads running until the process exits.
pub struct Node {
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    main: Option<JoinHandle<GatewayStats>>,
    pub tunnel_addr: SocketAddr,
    pub mgmt_addr: SocketAddr,
}

impl Node {
    /// Binds all sockets and starts the event loop. Counter lines go to
    /// `stats_sink` when a stats interval is configured.
    pub fn start(cfg: NodeConfig, stats_sink: Box<dyn Write + Send>) -> Result<Node, RuntimeError> {
        let gw_cfg = cfg.gateway_config()?;
        let gateway = Gateway::new(gw_cfg).map_err(RuntimeError::Config)?;
        let tun = UdpSocket::bind(cfg.tun_listen).map_err(io_err(format!("tunnel socket {}", cfg.tun_listen)))?;
        tun.set_read_timeout(Some(POLL)).map_err(io_err("tunnel socket"))?;
        let listener =
            TcpListener::bind(cfg.mgmt_listen).map_err(io_err(format!("management socket {}", cfg.mgmt_listen)))?;
        listener.set_nonblocking(true).map_err(io_err("management socket"))?;
        let lan = open_lan(&cfg.lan)?;
        let tunnel_addr = tun.local_addr().map_err(io_err("tunnel socket"))?;
        let mgmt_addr = listener.local_addr().map_err(io_err("management socket"))?;

        let stop = Arc::new(AtomicBool::new(false));
        let (tx, rx) = mpsc::channel();
        let mut threads = Vec::new();

        {
            let (stop, tx, tun) = (
                stop.clone(),
                tx.clone(),
                tun.try_clone().map_err(io_err("tunnel socket"))?,
            );
            threads.push(thread::spawn(move || tunnel_reader(tun, tx, stop)));
        }
        {
            let (stop, tx) = (stop.clone(), tx.clone());
            let lan_rx = lan.try_clone().map_err(io_err("LAN"))?;
            threads.push(thread::spawn(move || lan_reader(lan_rx, tx, stop)));
        }
        {
            let (stop, tx) = (stop.clone(), tx.clone());
            threads.push(thread::spawn(move || mgmt_acceptor(listener, tx, stop)));
        }
        drop(tx);

        let peers: HashMap<GatewayId, SocketAddr> = cfg.peers.iter().map(|p| (GatewayId(p.tunnel), p.mgmt)).collect();
        let interval = cfg.stats_interval_secs.map(Duration::from_secs);
        let stop_main = stop.clone();
        let main = thread::spawn(move || {
            let mut lp = EventLoop {
                gateway,
                tun,
                lan,
                peers,
                links: HashMap::new(),
                start: Instant::now(),
            };
            lp.run(rx, stop_main, interval, stats_sink)
        });
        Ok(Node {
            stop,
            threads,
            main: Some(main),
            tunnel_addr,
            mgmt_addr,
        })
    }

    pub fn stop_handle(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    /// Blocks until the stop flag is set, then returns the final counters.
    pub fn wait(mut self) -> GatewayStats {
        let stats = self.main.take().expect("running").join().expect("event loop");
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        stats
    }

    pub fn shutdown(self) -> GatewayStats {
        self.stop.store(true, Ordering::SeqCst);
        self.wait()
    }
}

fn tunnel_reader(sock: UdpSocket, tx: Sender<Event>, stop: Arc<AtomicBool>) {
    let mut buf = vec![0u8; MAX_FRAME];
    while !stop.load(Ordering::Relaxed) {
        match sock.recv_from(&mut buf) {
            Ok((n, from)) => {
                if tx.send(Event::Tunnel(from, buf[..n].to_vec())).is_err() {
                    return;
                }
            }
            Err(e) if is_timeout(&e) => {}
            Err(_) => thread::sleep(POLL),
        }
    }
}

fn lan_reader(mut lan: Box<dyn LanPort>, tx: Sender<Event>, stop: Arc<AtomicBool>) {
    let mut buf = vec![0u8; MAX_FRAME];
    while !stop.load(Ordering::Relaxed) {
        match lan.recv(&mut buf) {
            Ok(Some(n)) => {
                if tx.send(Event::Lan(buf[..n].to_vec())).is_err() {
                    return;
                }
            }
            Ok(None) => {}
            Err(_) => thread::sleep(POLL),
        }
    }
}

fn mgmt_acceptor(listener: TcpListener, tx: Sender<Event>, stop: Arc<AtomicBool>) {
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, _)) => {
                let (tx, stop) = (tx.clone(), stop.clone());
                thread::spawn(move || mgmt_reader(stream, tx, stop));
            }
            Err(e) if is_timeout(&e) => thread::sleep(Duration::from_millis(20)),
            Err(_) => thread::sleep(POLL),
        }
    }
}

fn mgmt_reader(mut stream: TcpStream, tx: Sender<Event>, stop: Arc<AtomicBool>) {
    let _ = stream.set_nonblocking(false);
    let _ = stream.set_read_timeout(Some(POLL));
    let mut dec = MgmtDecoder::new();
    let mut buf = vec![0u8; 16 * 1024];
    let mut peer: Option<GatewayId> = None;
    while !stop.load(Ordering::Relaxed) {
        let n = match stream.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if is_timeout(&e) => continue,
            Err(_) => break,
        };
        dec.push(&buf[..n]);
        loop {
            match dec.next_message() {
                Ok(Some(msg)) => {
                    let id = match (&peer, &msg) {
                        (Some(id), _) => *id,
                        (None, MgmtMessage::Hello { gateway }) => {
                            peer = Some(*gateway);
                            *gateway
                        }
                        // The first message must name the sender.
                        (None, _) => return,
                    };
                    if tx.send(Event::Mgmt(id, msg)).is_err() {
                        return;
                    }
                }
                Ok(None) => break,
                Err(_) => {
                    if let Some(id) = peer {
                        let _ = tx.send(Event::PeerDown(id));
                    }
                    return;
                }
            }
        }
    }
    if let Some(id) = peer {
        let _ = tx.send(Event::PeerDown(id));
    }
}

struct EventLoop {
    gateway: Gateway,
    tun: UdpSocket,
    lan: Box<dyn LanPort>,
    peers: HashMap<GatewayId, SocketAddr>,
    links: HashMap<GatewayId, TcpStream>,
    start: Instant,
}

impl EventLoop {
    fn now(&self) -> Timestamp {
        Timestamp::from_micros(self.start.elapsed().as_micros() as u64)
    }

    fn run(
        &mut self,
        rx: Receiver<Event>,
        stop: Arc<AtomicBool>,
        interval: Option<Duration>,
        mut sink: Box<dyn Write + Send>,
    ) -> GatewayStats {
        let mut next_tick = Instant::now();
        let mut next_stats = interval.map(|i| Instant::now() + i);
        if interval.is_some() {
            let _ = writeln!(sink, "{}", GatewayStats::csv_header());
        }
        while !stop.load(Ordering::Relaxed) {
            let wait = next_tick.saturating_duration_since(Instant::now());
            let em = match rx.recv_timeout(wait) {
                Ok(ev) => {
                    let now = self.now();
                    match ev {
                        Event::Lan(f) => self.gateway.on_lan_frame(&f, now),
                        Event::Tunnel(from, d) => self.gateway.on_tunnel_packet(GatewayId(from), &d, now),
                        Event::Mgmt(from, msg) => self.gateway.on_mgmt(from, msg, now),
                        Event::PeerDown(id) => self.gateway.set_peer_reachable(id, false, now),
                    }
                }
                Err(RecvTimeoutError::Timeout) => Vec::new(),
                Err(RecvTimeoutError::Disconnected) => break,
            };
            self.perform(em);
            if Instant::now() >= next_tick {
                let em = self.gateway.on_tick(self.now());
                self.perform(em);
                next_tick += TICK;
            }
            if let (Some(at), Some(i)) = (next_stats, interval) {
                if Instant::now() >= at {
                    let _ = writeln!(sink, "{}", self.gateway.stats().csv_row(self.now(), self.gateway.id()));
                    let _ = sink.flush();
                    next_stats = Some(at + i);
                }
            }
        }
        self.gateway.stats()
    }

    fn perform(&mut self, em: Vec<Emission>) {
        for e in em {
            match e {
                Emission::Tunnel { to, datagram } => {
                    let _ = self.tun.send_to(&datagram, to.0);
                }
                Emission::Lan { frame } => {
                    let _ = self.lan.send(&frame);
                }
                Emission::Mgmt { to, msg } => self.send_mgmt(to, &msg),
            }
        }
    }

    /// Writes on the outgoing link to `to`, connecting first if needed.
    /// Failures are left to the gateway's retransmission.
    fn send_mgmt(&mut self, to: GatewayId, msg: &MgmtMessage) {
        if !self.links.contains_key(&to) {
            let Some(addr) = self.peers.get(&to) else { return };
            let Ok(mut s) = TcpStream::connect_timeout(addr, CONNECT_TIMEOUT) else {
                return;
            };
            let _ = s.set_nodelay(true);
            let hello = MgmtMessage::Hello {
                gateway: self.gateway.id(),
            }
            .encode();
            if s.write_all(&hello).is_err() {
                return;
            }
            self.links.insert(to, s);
        }
        let s = self.links.get_mut(&to).expect("connected");
        if s.write_all(&msg.encode()).is_err() {
            self.links.remove(&to);
        }
    }
}
