//! Encrypt the first two blocks of a MACsec frame so addresses, SCI and PN
//! are hidden, then recover the frame with a key ring across a rekey.

use std::time::Duration;

use msec_tunnel::enc::{self, HeaderCipher, KeyRing, TunnelKey};
use msec_tunnel::encap::GatewayId;
use msec_tunnel::flow::{Bidf, DownlinkTables, HeaderData};
use msec_tunnel::frame::{MacAddress, MacsecView, PlainFrame, SaKey, Sci};
use msec_tunnel::time::Timestamp;

fn main() {
    let key = SaKey::new(&[9; 16]);
    let src = MacAddress([2, 0, 0, 0, 0, 1]);
    let plain = PlainFrame {
        dst: MacAddress([2, 0, 0, 0, 0, 2]),
        src,
        ethertype: 0x86dd,
        payload: vec![1; 100],
    };
    let frame = |pn| {
        key.protect(&plain, Sci::new(src, 1), 0, pn)
            .unwrap()
            .to_bytes()
            .unwrap()
    };

    let old = TunnelKey { key: [1; 16], epoch: 1 };
    let new = TunnelKey { key: [2; 16], epoch: 2 };
    let mut ring = KeyRing::new();
    let t0 = Timestamp::from_micros(0);
    ring.install(old, t0, Duration::from_secs(2));

    let f1 = frame(1);
    let view = MacsecView::parse(&f1).unwrap();
    let mut tables = DownlinkTables::new(64, false);
    tables.register(
        Bidf([0; 16]),
        HeaderData::of(&view),
        1,
        GatewayId("192.0.2.1:4790".parse().unwrap()),
        t0,
    );

    let mut wire = Vec::new();
    enc::uplink_encode(&view, &HeaderCipher::new(&old.key), old.epoch, &mut wire);
    println!("clear header  {:02x?}", &f1[..28]);
    println!("on the wire   {:02x?}", &wire[..29]);

    // The new key arrives while a frame under the old one is still in flight.
    ring.install(new, Timestamp::from_secs(1), Duration::from_secs(2));
    let mut out = Vec::new();
    let r = enc::downlink_decode(
        &wire,
        Some(&ring),
        &mut tables,
        Timestamp::from_micros(1_500_000),
        &mut out,
    );
    println!("old epoch inside grace: {:?}", r.map(|d| d.pn));
    assert_eq!(out, f1);

    let f2 = frame(2);
    let mut wire2 = Vec::new();
    enc::uplink_encode(
        &MacsecView::parse(&f2).unwrap(),
        &HeaderCipher::new(&old.key),
        old.epoch,
        &mut wire2,
    );
    let r = enc::downlink_decode(
        &wire2,
        Some(&ring),
        &mut tables,
        Timestamp::from_secs(4),
        &mut Vec::new(),
    );
    println!("old epoch after grace:  {r:?}");
}
