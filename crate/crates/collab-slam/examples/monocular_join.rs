//! A monocular client joining a map built by a depth client. The monocular
//! session stays idle until the server's place recognition localizes it,
//! then tracks against augmented landmarks at true scale.
//!
//!     cargo run --release --example monocular_join

use collab_slam::config;
use collab_slam::eval::{render_text_report, run_scenario};

fn main() {
    let out = run_scenario(&config::monocular_join(7)).unwrap();
    print!("{}", render_text_report(&out.report));
    for a in &out.report.ate {
        println!(
            "map {}: monocular-aligned ATE {:.4} m at scale {:.4}",
            a.map_id, a.rmse_scaled, a.scale
        );
    }
}
