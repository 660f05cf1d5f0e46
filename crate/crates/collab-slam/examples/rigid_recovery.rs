//! Rigid multi-camera recovery: a dual-camera robot has its front camera
//! blinded for 10 s mid-run. The relaunched session is pulled back into
//! the shared map through the calibrated rigid constraint with the rear
//! camera.
//!
//!     cargo run --release --example rigid_recovery

use collab_slam::config;
use collab_slam::eval::{render_text_report, run_scenario};

fn main() {
    let mut cfg = config::rigid_dual_camera(7);
    cfg.robots[0].cameras[0].blind_intervals = vec![[10.0, 20.0]];
    let out = run_scenario(&cfg).unwrap();
    print!("{}", render_text_report(&out.report));
    for ev in &out.server.merge_log {
        println!(
            "merge: map {} absorbed into map {} ({} keyframes, sessions {:?})",
            ev.absorbed_map, ev.into_map, ev.absorbed_keyframes, ev.absorbed_sessions
        );
    }
}
