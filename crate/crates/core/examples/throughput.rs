//! Short in-process throughput comparison of the tunnel schemes.

use std::time::Duration;

use msec_tunnel::bench;
use msec_tunnel::encap::Scheme;

fn main() {
    let secs: f64 = std::env::args()
        .nth(1)
        .map_or(1.0, |s| s.parse().expect("seconds per size"));
    let results = bench::run(&Scheme::ALL, &[64, 512, 1400], Duration::from_secs_f64(secs)).unwrap();
    println!(
        "{:<8} {:>6} {:>6} {:>12} {:>10} {:>8}",
        "scheme", "frame", "wire", "frames/s", "p99 ns", "blocks"
    );
    for r in &results {
        println!(
            "{:<8} {:>6} {:>6} {:>12.0} {:>10} {:>8}",
            r.scheme.name(),
            r.frame_size,
            r.wire_size,
            r.frames_per_sec,
            r.p99_ns,
            r.block_up
        );
    }
}
