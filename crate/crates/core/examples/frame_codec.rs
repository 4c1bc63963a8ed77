//! Protect a plain Ethernet frame, serialize it, parse it back and verify it.

use msec_tunnel::frame::{MacAddress, MacsecFrame, PlainFrame, SaKey, Sci};

fn main() {
    let key = SaKey::new(&[0x2b; 16]);
    let src = MacAddress([0x02, 0, 0, 0, 0, 0x0a]);
    let plain = PlainFrame {
        dst: MacAddress([0x02, 0, 0, 0, 0, 0x0b]),
        src,
        ethertype: 0x0800,
        payload: b"hello over an untrusted network".to_vec(),
    };

    let frame = key.protect(&plain, Sci::new(src, 1), 0, 1).expect("valid frame");
    let bytes = frame.to_bytes().expect("valid frame");
    println!("{} bytes on the wire", bytes.len());

    let parsed = MacsecFrame::parse(&bytes).expect("parses");
    let t = &parsed.sectag;
    println!(
        "dst={} src={} an={} pn={} sci={} sl={}",
        parsed.dst, parsed.src, t.tci.an, t.pn, t.sci, t.sl
    );
    println!(
        "tci byte {:#04x}, secure data {} bytes",
        t.tci.to_byte(),
        parsed.secure_data.len()
    );

    let back = key.verify(&parsed).expect("ICV checks out");
    assert_eq!(back, plain);
    println!("payload: {}", String::from_utf8_lossy(&back.payload));

    let mut tampered = bytes.clone();
    tampered[40] ^= 1;
    println!("one flipped bit: {:?}", key.verify_bytes(&tampered).unwrap_err());
}
