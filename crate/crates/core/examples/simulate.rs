//! Run a scenario file through the discrete-event simulator.
//!
//! cargo run --example simulate -- examples/config/scenario.toml [transcript.csv]

use msec_tunnel::sim::{Scenario, Simulation};

fn main() {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/config/scenario.toml").into());
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"));
    let scenario = Scenario::from_toml(&text).unwrap_or_else(|e| panic!("{path}: {e}"));
    let report = Simulation::new(scenario)
        .unwrap_or_else(|e| panic!("{path}: {e}"))
        .run();

    println!("simulated {:.3}s", report.end.as_micros() as f64 / 1e6);
    println!(
        "intended frames delivered {} lost {}",
        report.intended_delivered, report.intended_lost
    );
    for (name, d) in &report.devices {
        println!(
            "  {name}: sent {} accepted {} icv failures {}",
            d.sent, d.accepted, d.icv_failures
        );
    }
    for (i, g) in report.gateways.iter().enumerate() {
        println!(
            "  gateway {i}: tunneled {} reconstructed {} drops {}",
            g.tunneled,
            g.reconstructed,
            g.tunnel_drops()
        );
    }
    if let Some(out) = args.next() {
        std::fs::write(&out, report.transcript_csv()).expect("write transcript");
        println!("transcript written to {out}");
    }
}
