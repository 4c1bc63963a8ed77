//! Compares tunnel schemes on a gateway pair and writes CSV results.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;
use msec_tunnel::bench::{self, BenchResult};
use msec_tunnel::encap::Scheme;

#[derive(Parser)]
#[command(version, about = "Throughput and crypto-work comparison of the tunnel schemes")]
struct Args {
    #[arg(long, value_delimiter = ',', default_value = "naive,idf,enc,fullenc")]
    schemes: Vec<Scheme>,
    /// LAN frame sizes in bytes.
    #[arg(long, value_delimiter = ',', default_value = "64,256,1400")]
    sizes: Vec<usize>,
    /// Seconds per frame size, shared by all schemes.
    #[arg(long, default_value_t = 10.0)]
    secs: f64,
    /// Put the receiving gateway on its own thread behind a loopback UDP
    /// socket; each scheme and size then runs for the full `secs`.
    #[arg(long)]
    loopback: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    if !args.secs.is_finite() || args.secs < 0.0 {
        eprintln!("--secs must be a non-negative number");
        return ExitCode::from(2);
    }
    let secs = Duration::from_secs_f64(args.secs);
    let results = if args.loopback {
        let mut v = Vec::new();
        for &size in &args.sizes {
            for &scheme in &args.schemes {
                match bench::run_loopback(scheme, size, secs) {
                    Ok(Some(r)) => v.push(r),
                    Ok(None) => {}
                    Err(e) => {
                        eprintln!("{scheme} {size}: {e}");
                        return ExitCode::FAILURE;
                    }
                }
            }
        }
        v
    } else {
        match bench::run(&args.schemes, &args.sizes, secs) {
            Ok(v) => v,
            Err(e) => {
                eprintln!("{e}");
                return ExitCode::FAILURE;
            }
        }
    };
    let csv = bench::to_csv(&results);
    match &args.out {
        Some(p) => {
            if let Err(e) = std::fs::write(p, &csv) {
                eprintln!("{}: {e}", p.display());
                return ExitCode::FAILURE;
            }
            print_table(&results);
        }
        None => print!("{csv}"),
    }
    ExitCode::SUCCESS
}

fn print_table(results: &[BenchResult]) {
    println!(
        "{:<8} {:>6} {:>6} {:>12} {:>10} {:>7} {:>7} {:>8} {:>8}",
        "scheme", "frame", "wire", "frames/s", "Mbit/s", "hash", "blocks", "p50 ns", "p99 ns"
    );
    for r in results {
        println!(
            "{:<8} {:>6} {:>6} {:>12.0} {:>10.1} {:>7.2} {:>7.2} {:>8} {:>8}",
            r.scheme.to_string(),
            r.frame_size,
            r.wire_size,
            r.frames_per_sec,
            r.bytes_per_sec * 8.0 / 1e6,
            r.hash_up + r.hash_down,
            r.block_up + r.block_down,
            r.p50_ns,
            r.p99_ns
        );
    }
}
