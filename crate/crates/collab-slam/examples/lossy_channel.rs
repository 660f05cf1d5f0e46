//! Loss resilience of the sequenced NACK channel: the same scenario is run
//! over a clean link and over a link dropping 10% of messages, and the two
//! final server maps are compared element by element.
//!
//!     cargo run --release --example lossy_channel

use collab_slam::config;
use collab_slam::eval::{run_scenario, snapshot_difference};

fn main() {
    let clean = run_scenario(&config::lossy_link(5, 0.0)).unwrap();
    let lossy = run_scenario(&config::lossy_link(5, 0.10)).unwrap();
    for (label, out) in [("clean", &clean), ("10% loss", &lossy)] {
        let up: u64 = out.report.bandwidth.iter().map(|b| b.bytes_up).sum();
        println!(
            "{label:>8}: maps {}, keyframes {}, uplink {} B, digest {:016x}",
            out.report.map_count, out.report.keyframes, up, out.report.digest
        );
    }
    let diff = snapshot_difference(lossy.server.maps(), clean.server.maps()).unwrap();
    println!("worst element divergence lossy vs clean: {diff:.3e} m");
    assert!(diff <= 1e-9);
    println!("final maps identical within 1e-9");
}
