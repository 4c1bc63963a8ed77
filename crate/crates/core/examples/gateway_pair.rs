//! Two sans-io gateways wired together in memory. Every input returns the
//! emissions to perform; here they are fed straight to the other side.

use std::collections::VecDeque;

use msec_tunnel::encap::{GatewayId, Scheme};
use msec_tunnel::frame::{MacAddress, PlainFrame, SaKey, Sci};
use msec_tunnel::gateway::{Emission, Gateway, GatewayConfig};
use msec_tunnel::time::Timestamp;

fn main() {
    let scheme = std::env::args()
        .nth(1)
        .map_or(Scheme::Idf, |s| s.parse().expect("naive, idf, enc or fullenc"));
    let (ida, idb) = (
        GatewayId("192.0.2.1:4790".parse().unwrap()),
        GatewayId("192.0.2.2:4790".parse().unwrap()),
    );
    let mk = |me, peer, seed| {
        let mut c = GatewayConfig::new(me, vec![peer], scheme);
        c.seed = Some(seed);
        Gateway::new(c).unwrap()
    };
    let mut gws = [mk(ida, idb, 1), mk(idb, ida, 2)];

    let key = SaKey::new(&[5; 16]);
    let src = MacAddress([2, 0, 0, 0, 0, 1]);
    let plain = PlainFrame {
        dst: MacAddress([2, 0, 0, 0, 0, 2]),
        src,
        ethertype: 0x0800,
        payload: vec![0; 50],
    };

    for pn in 1..=3 {
        let now = Timestamp::from_micros(pn as u64 * 1000);
        let frame = key
            .protect(&plain, Sci::new(src, 1), 0, pn)
            .unwrap()
            .to_bytes()
            .unwrap();
        println!("-- LAN A: frame pn {pn}");
        let mut work = VecDeque::from([(0usize, gws[0].on_lan_frame(&frame, now))]);
        while let Some((at, emissions)) = work.pop_front() {
            let (from, other) = (gws[at].id(), 1 - at);
            for e in emissions {
                match e {
                    Emission::Tunnel { datagram, .. } => {
                        println!("   gw{at} -> tunnel datagram, {} bytes", datagram.len());
                        work.push_back((other, gws[other].on_tunnel_packet(from, &datagram, now)));
                    }
                    Emission::Mgmt { msg, .. } => {
                        println!("   gw{at} -> management {:?}", msg.kind());
                        work.push_back((other, gws[other].on_mgmt(from, msg, now)));
                    }
                    Emission::Lan { frame: out } => {
                        println!("   gw{at} -> LAN, identical to the original: {}", out == frame);
                    }
                }
            }
        }
    }
    let (a, b) = (gws[0].stats(), gws[1].stats());
    println!(
        "tunneled {} reconstructed {} announces {}",
        a.tunneled, b.reconstructed, a.announces_sent
    );
}
