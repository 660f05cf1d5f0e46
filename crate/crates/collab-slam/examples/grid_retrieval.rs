//! Frustum-based landmark retrieval over the spatial hash grid.
//!
//! Fills a map with 100k random landmarks, runs a sweep of camera queries,
//! and cross-checks one of them against a brute-force projection oracle.
//!
//!     cargo run --release --example grid_retrieval

use std::time::Instant;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use collab_slam::geom::{project, CameraIntrinsics, Pose};
use collab_slam::grid::retrieve_in_view_counted;
use collab_slam::map::{ElementId, Landmark, MapRecord};
use collab_slam::simworld::forward_camera_mount;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let k = CameraIntrinsics::default();

    let mut map = MapRecord::new(1);
    for seq in 1..=100_000u64 {
        map.upsert_landmark(Landmark {
            id: ElementId::new(1, 1, seq),
            position_w: Vector3::new(
                rng.gen_range(0.0..50.0),
                rng.gen_range(0.0..30.0),
                rng.gen_range(0.0..3.0),
            ),
            descriptor: Landmark::descriptor_for_tag(seq),
            observing_keyframes: Default::default(),
            last_updated_by: 1,
            map_id: 1,
        })
        .unwrap();
    }
    println!("map: {} landmarks", map.landmarks.len());

    let mut total = 0usize;
    let mut poses = Vec::new();
    for _ in 0..200 {
        let yaw = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), rng.gen_range(0.0..6.28));
        let base = Pose::new(
            yaw,
            Vector3::new(rng.gen_range(0.0..50.0), rng.gen_range(0.0..30.0), 0.0),
        );
        poses.push(base.compose(&forward_camera_mount(1.2)));
    }
    let t0 = Instant::now();
    for pose in &poses {
        total += retrieve_in_view_counted(&map, &k, pose).0.len();
    }
    let mean_ms = t0.elapsed().as_secs_f64() * 1e3 / poses.len() as f64;
    println!("{} queries: mean {:.3} ms, {} landmarks retrieved in total", poses.len(), mean_ms, total);

    // Cross-check one query against brute force over every landmark.
    let pose = poses[0];
    let cam_from_world = pose.inverse();
    let mut oracle: Vec<ElementId> = map
        .landmarks
        .values()
        .filter(|lm| project(&k, &cam_from_world, &lm.position_w).is_some())
        .map(|lm| lm.id)
        .collect();
    oracle.sort_unstable();
    let (got, stats) = retrieve_in_view_counted(&map, &k, &pose);
    assert_eq!(got, oracle);
    println!(
        "oracle check: {} visible, grid visited {}/{} candidate cells",
        got.len(),
        stats.cells_visited,
        stats.bbox_cells
    );
}
