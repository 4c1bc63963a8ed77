//! Replay, injection and bit-flip attacks against one scheme, with the fate
//! of every attacker datagram.
//!
//! cargo run --release --example attacks -- enc

use msec_tunnel::encap::Scheme;
use msec_tunnel::sim::{AttackSpec, Scenario, Simulation};

fn main() {
    let scheme: Scheme = std::env::args()
        .nth(1)
        .map_or(Scheme::Idf, |s| s.parse().expect("scheme"));
    let mut sc = Scenario::two_lans(7, scheme, 1);
    sc.transcript = false;
    sc.duration_ms = 3_000;
    sc.add_traffic("a1", "b1", 1000, 64, 0, 1000);
    sc.add_traffic("b1", "a1", 1000, 64, 500, 1000);
    sc.attacks = vec![
        AttackSpec::Replay {
            count: 200,
            at_ms: 1_200,
        },
        AttackSpec::Inject {
            count: 100_000,
            min_len: 0,
            max_len: 200,
            mimic: true,
            start_ms: 10,
            interval_us: 10,
        },
        AttackSpec::Mutate { start: 300, count: 600 },
    ];
    let r = Simulation::new(sc).unwrap().run();
    println!(
        "{}: intended delivered {} lost {}",
        scheme.name(),
        r.intended_delivered,
        r.intended_lost
    );
    println!("frames accepted from the attacker: {}", r.attacker_accepted);
    for (k, v) in &r.fate_counts {
        println!("  {k:<40} {v}");
    }
}
