//! Tunnel gateway daemon.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::Ordering;
use std::time::Duration;

use clap::Parser;
use msec_tunnel::encap::Scheme;
use msec_tunnel::runtime::{LanSpec, Node, NodeConfig, PeerConfig};

#[derive(Parser)]
#[command(version, about = "Carries MACsec frames of the local LAN to peer gateways")]
struct Args {
    /// TOML file with the gateway settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scheme: Option<Scheme>,
    /// `udp:BIND,PEER` or `raw:IFNAME`.
    #[arg(long)]
    lan_if: Option<LanSpec>,
    #[arg(long)]
    tun_listen: Option<SocketAddr>,
    #[arg(long)]
    mgmt_listen: Option<SocketAddr>,
    /// Peer as `TUNNEL_ADDR/MGMT_ADDR`; repeatable.
    #[arg(long = "peer", value_parser = parse_peer)]
    peers: Vec<PeerConfig>,
    /// Print counters as CSV every SECS seconds.
    #[arg(long)]
    stats_interval: Option<u64>,
    #[arg(long)]
    window: Option<u32>,
    /// Stop after this many seconds.
    #[arg(long)]
    run_for: Option<f64>,
}

fn parse_peer(s: &str) -> Result<PeerConfig, String> {
    let (t, m) = s.split_once('/').ok_or("expected TUNNEL_ADDR/MGMT_ADDR")?;
    Ok(PeerConfig {
        tunnel: t.parse().map_err(|e| format!("{t}: {e}"))?,
        mgmt: m.parse().map_err(|e| format!("{m}: {e}"))?,
    })
}

fn load(args: &Args) -> Result<NodeConfig, String> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            NodeConfig::from_toml(&text).map_err(|e| e.to_string())?
        }
        None => NodeConfig {
            scheme: args.scheme.ok_or("--scheme is required without --config")?,
            tun_listen: args.tun_listen.ok_or("--tun-listen is required without --config")?,
            mgmt_listen: args.mgmt_listen.ok_or("--mgmt-listen is required without --config")?,
            lan: args.lan_if.clone().ok_or("--lan-if is required without --config")?,
            peers: Vec::new(),
            window: msec_tunnel::window::DEFAULT_WINDOW,
            flow_timeout_secs: msec_tunnel::gateway::DEFAULT_FLOW_TIMEOUT.as_secs(),
            grace_ms: msec_tunnel::enc::DEFAULT_GRACE.as_millis() as u64,
            mtu: msec_tunnel::encap::DEFAULT_MTU,
            filter_sources: false,
            stats_interval_secs: None,
            seed: None,
        },
    };
    if let Some(s) = args.scheme {
        cfg.scheme = s;
    }
    if let Some(l) = &args.lan_if {
        cfg.lan = l.clone();
    }
    if let Some(a) = args.tun_listen {
        cfg.tun_listen = a;
    }
    if let Some(a) = args.mgmt_listen {
        cfg.mgmt_listen = a;
    }
    cfg.peers.extend(args.peers.iter().cloned());
    if let Some(i) = args.stats_interval {
        cfg.stats_interval_secs = Some(i);
    }
    if let Some(w) = args.window {
        cfg.window = w;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cfg = match load(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("msec-gw: {e}");
            return ExitCode::from(2);
        }
    };
    let node = match Node::start(cfg, Box::new(std::io::stdout())) {
        Ok(n) => n,
        Err(e) => {
            eprintln!("msec-gw: {e}");
            return ExitCode::FAILURE;
        }
    };
    eprintln!("msec-gw: tunnel {} management {}", node.tunnel_addr, node.mgmt_addr);
    if let Some(secs) = args.run_for {
        let stop = node.stop_handle();
        std::thread::spawn(move || {
            std::thread::sleep(Duration::from_secs_f64(secs.max(0.0)));
            stop.store(true, Ordering::SeqCst);
        });
    }
    let stats = node.wait();
    eprintln!(
        "msec-gw: {} frames tunneled, {} reconstructed",
        stats.tunneled, stats.reconstructed
    );
    ExitCode::SUCCESS
}
