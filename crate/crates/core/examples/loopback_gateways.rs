//! Two gateway processes on 127.0.0.1 with UDP sockets standing in for the
//! LAN ports. A frame sent into one LAN comes out of the other.

use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::time::Duration;

use msec_tunnel::encap::Scheme;
use msec_tunnel::frame::{MacAddress, PlainFrame, SaKey, Sci};
use msec_tunnel::runtime::{Node, NodeConfig};

fn addr(port: u16) -> SocketAddr {
    ([127, 0, 0, 1], port).into()
}

fn config(base: u16, peer: u16, host: SocketAddr) -> NodeConfig {
    let text = format!(
        r#"
        scheme = "idf"
        tun_listen = "{}"
        mgmt_listen = "{}"
        lan = "udp:{},{}"
        [[peers]]
        tunnel = "{}"
        mgmt = "{}"
        "#,
        addr(base),
        addr(base + 1),
        addr(base + 2),
        host,
        addr(peer),
        addr(peer + 1)
    );
    let mut c = NodeConfig::from_toml(&text).unwrap();
    c.scheme = std::env::args()
        .nth(1)
        .map_or(Scheme::Idf, |s| s.parse().expect("scheme"));
    c
}

fn main() {
    let host_a = UdpSocket::bind("127.0.0.1:0").unwrap();
    let host_b = UdpSocket::bind("127.0.0.1:0").unwrap();
    host_b.set_read_timeout(Some(Duration::from_secs(3))).unwrap();
    let a = Node::start(config(47900, 47910, host_a.local_addr().unwrap()), Box::new(io::sink())).unwrap();
    let b = Node::start(config(47910, 47900, host_b.local_addr().unwrap()), Box::new(io::sink())).unwrap();

    let key = SaKey::new(&[3; 16]);
    let src = MacAddress([2, 0, 0, 0, 0, 1]);
    let plain = PlainFrame {
        dst: MacAddress([2, 0, 0, 0, 0, 2]),
        src,
        ethertype: 0x0800,
        payload: b"ping".to_vec(),
    };
    let mut buf = [0u8; 2048];
    for pn in 1..=5 {
        let frame = key
            .protect(&plain, Sci::new(src, 1), 0, pn)
            .unwrap()
            .to_bytes()
            .unwrap();
        host_a.send_to(&frame, addr(47902)).unwrap();
        let (n, _) = host_b.recv_from(&mut buf).expect("frame out of the far LAN");
        println!(
            "pn {pn}: {} bytes in, {} bytes out, identical: {}",
            frame.len(),
            n,
            buf[..n] == frame[..]
        );
    }
    let sa = a.shutdown();
    let sb = b.shutdown();
    println!(
        "A tunneled {} datagrams ({} bytes); B reconstructed {}",
        sa.datagrams_out, sa.tunnel_bytes_out, sb.reconstructed
    );
}
