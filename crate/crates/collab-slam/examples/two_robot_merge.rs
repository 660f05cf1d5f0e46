//! Two robots mapping overlapping corridors of one region: their sessions
//! start as separate maps and merge once a cross-map loop is verified.
//!
//!     cargo run --release --example two_robot_merge

use collab_slam::config;
use collab_slam::eval::{render_text_report, run_scenario};

fn main() {
    let mut cfg = config::two_robot_merge(7);
    cfg.noise.pixel_sigma = 1.0;
    let out = run_scenario(&cfg).unwrap();
    print!("{}", render_text_report(&out.report));
    for ev in &out.server.merge_log {
        println!(
            "merge: map {} absorbed into map {} ({} keyframes, sessions {:?})",
            ev.absorbed_map, ev.into_map, ev.absorbed_keyframes, ev.absorbed_sessions
        );
    }
}
