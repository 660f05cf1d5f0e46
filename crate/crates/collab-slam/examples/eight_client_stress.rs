//! Eight clients on four dual-camera robots across three disjoint regions.
//! The server maintains one map per region, merging sessions as robots
//! cross paths, and the whole run is reproducible from the seed.
//!
//!     cargo run --release --example eight_client_stress

use collab_slam::config;
use collab_slam::eval::{render_text_report, run_scenario_with_watchdog};

fn main() {
    let out = run_scenario_with_watchdog(&config::eight_client_stress(1), 120.0).unwrap();
    print!("{}", render_text_report(&out.report));
    println!("merge history:");
    for ev in &out.server.merge_log {
        println!(
            "  map {} -> map {} ({} keyframes, sessions {:?})",
            ev.absorbed_map, ev.into_map, ev.absorbed_keyframes, ev.absorbed_sessions
        );
    }
}
