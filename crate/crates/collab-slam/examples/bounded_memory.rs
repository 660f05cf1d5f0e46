//! Bounded client memory over a long session: the client walks a 140 m
//! zig-zag, creating hundreds of keyframes, while its retained working set
//! never exceeds the W-keyframe window.
//!
//!     cargo run --release --example bounded_memory

use collab_slam::client::{Client, ClientConfig};
use collab_slam::geom::Pose;
use collab_slam::simworld::{forward_camera_mount, generate_world, observe, NoiseModel, TrajectorySpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let world = generate_world(&Default::default(), 3);
    let tr = TrajectorySpec {
        waypoints: vec![[5.0, 5.0], [45.0, 5.0], [45.0, 15.0], [5.0, 15.0], [5.0, 25.0], [45.0, 25.0]],
        speed: 1.0,
        sample_rate_hz: 10.0,
        start_offset: 0.0,
    };
    let mount = forward_camera_mount(1.2);
    let cfg = ClientConfig::new(1);
    let w = cfg.window_size;
    let mut client = Client::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = NoiseModel::noiseless();
    let mut prev: Option<Pose> = None;
    let mut keyframes = 0usize;
    let mut peak = (0usize, 0usize);
    let duration = tr.duration();
    let mut frame_no = 0u64;
    loop {
        let t = frame_no as f64 / tr.sample_rate_hz;
        if t > duration {
            break;
        }
        frame_no += 1;
        let cam = tr.base_pose_at(t).compose(&mount);
        let frame = observe(&world, &cam, &client.cfg.intrinsics, &noise, t, 1, true, &mut rng);
        let odom = prev.map_or(cam, |p| p.inverse().compose(&cam));
        prev = Some(cam);
        let r = client.process_frame(&frame, &odom);
        keyframes += r.keyframe_created as usize;
        let (win, lms, _) = client.memory_counts();
        peak = (peak.0.max(win), peak.1.max(lms));
        if r.keyframe_created && keyframes % 40 == 0 {
            println!(
                "t={t:6.1}s  keyframes created {keyframes:4}  retained window {win:2}  window landmarks {lms:4}"
            );
        }
    }
    println!(
        "total {keyframes} keyframes over {duration:.0} s; peak retained window {} (bound W={w}), peak window landmarks {}",
        peak.0, peak.1
    );
    assert!(peak.0 <= w);
}
