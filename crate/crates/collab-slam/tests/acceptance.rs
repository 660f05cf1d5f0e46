//! End-to-end acceptance suite. Each test covers one release criterion and
//! prints a single pass line; a failed assertion is the fail line.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{UnitQuaternion, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use collab_slam::client::{Client, ClientConfig, ClientPhase};
use collab_slam::config;
use collab_slam::eval::{run_scenario, run_scenario_with_watchdog, snapshot_difference, write_snapshot};
use collab_slam::geom::{project, CameraIntrinsics, Pose};
use collab_slam::grid::retrieve_in_view;
use collab_slam::map::{ElementId, Landmark, MapRecord};
use collab_slam::optim::{
    edge_jacobians, edge_residual, local_bundle_adjust, optimize_pose_graph, reproj_jacobians,
    reproj_residual, retract, BAObservation, BAProblem, EdgeKind, PoseEdge, PoseGraph,
};
use collab_slam::server::{Server, ServerConfig};
use collab_slam::simworld::{forward_camera_mount, generate_world, observe, NoiseModel, TrajectorySpec};

fn pass(n: u32, what: &str) {
    println!("criterion {n}: {what}: PASS");
}

fn random_map(rng: &mut ChaCha8Rng, n: u64) -> MapRecord {
    let mut map = MapRecord::new(1);
    for seq in 1..=n {
        let lm = Landmark {
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
        };
        map.upsert_landmark(lm).unwrap();
    }
    map
}

fn random_camera_pose(rng: &mut ChaCha8Rng) -> Pose {
    let axis = Vector3::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    );
    let rot = if axis.norm() < 1e-6 {
        UnitQuaternion::identity()
    } else {
        UnitQuaternion::from_scaled_axis(axis.normalize() * rng.gen_range(0.0..3.0))
    };
    Pose::new(
        rot,
        Vector3::new(
            rng.gen_range(0.0..50.0),
            rng.gen_range(0.0..30.0),
            rng.gen_range(0.3..2.5),
        ),
    )
}

#[test]
fn criterion_01_retrieval_oracle_equivalence_and_speed() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let k = CameraIntrinsics::default();

    // Exact equivalence against the brute-force projection oracle.
    let map = random_map(&mut rng, 10_000);
    let mut nonempty = 0;
    for trial in 0..100 {
        // Alternate fully random attitudes with floor-sweeping mounts so a
        // healthy share of frustums actually contain landmarks.
        let pose = if trial % 2 == 0 {
            random_camera_pose(&mut rng)
        } else {
            let yaw = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), rng.gen_range(0.0..6.28));
            let base = Pose::new(yaw, Vector3::new(rng.gen_range(0.0..50.0), rng.gen_range(0.0..30.0), 0.0));
            base.compose(&forward_camera_mount(1.2))
        };
        let cam_from_world = pose.inverse();
        let mut expected: Vec<ElementId> = map
            .landmarks
            .values()
            .filter(|lm| project(&k, &cam_from_world, &lm.position_w).is_some())
            .map(|lm| lm.id)
            .collect();
        expected.sort_unstable();
        let got = retrieve_in_view(&map, &k, &pose);
        assert_eq!(got, expected, "trial {trial}");
        nonempty += (!got.is_empty()) as usize;
    }
    assert!(nonempty > 20, "degenerate sampling: only {nonempty} non-empty retrievals");

    // Mean retrieval time at 1e5 landmarks.
    let big = random_map(&mut rng, 100_000);
    let poses: Vec<Pose> = (0..100)
        .map(|_| {
            let yaw = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), rng.gen_range(0.0..6.28));
            let base = Pose::new(yaw, Vector3::new(rng.gen_range(0.0..50.0), rng.gen_range(0.0..30.0), 0.0));
            base.compose(&forward_camera_mount(1.2))
        })
        .collect();
    let t0 = Instant::now();
    let mut total = 0usize;
    for pose in &poses {
        total += retrieve_in_view(&big, &k, pose).len();
    }
    let mean_ms = t0.elapsed().as_secs_f64() * 1e3 / poses.len() as f64;
    assert!(total > 0);
    assert!(mean_ms < 5.0, "mean retrieval {mean_ms:.3} ms at 1e5 landmarks");
    pass(1, "grid retrieval matches oracle 100/100, mean query < 5 ms at 1e5 landmarks");
}

fn random_pose_general(rng: &mut ChaCha8Rng) -> Pose {
    let axis = Vector3::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    );
    let rot = if axis.norm() < 1e-6 {
        UnitQuaternion::identity()
    } else {
        UnitQuaternion::from_scaled_axis(axis.normalize() * rng.gen_range(0.0..2.5))
    };
    Pose::new(
        rot,
        Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)),
    )
}

#[test]
fn criterion_02_optimizer_jacobians_and_loop_closure() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    let eps = 1e-6;
    let mut worst = 0.0f64;

    // Pose-graph edge Jacobians against central differences.
    for _ in 0..100 {
        let from = random_pose_general(&mut rng);
        let to = random_pose_general(&mut rng);
        let measured = random_pose_general(&mut rng);
        let (ja, jb) = edge_jacobians(&from, &to, &measured);
        for col in 0..6 {
            let mut d = Vector6::zeros();
            d[col] = eps;
            let rp = edge_residual(&retract(&from, &d), &to, &measured);
            let rm = edge_residual(&retract(&from, &(-d)), &to, &measured);
            let fd = (rp - rm) / (2.0 * eps);
            for row in 0..6 {
                let e = (ja[(row, col)] - fd[row]).abs() / fd[row].abs().max(1.0);
                worst = worst.max(e);
            }
            let rp = edge_residual(&from, &retract(&to, &d), &measured);
            let rm = edge_residual(&from, &retract(&to, &(-d)), &measured);
            let fd = (rp - rm) / (2.0 * eps);
            for row in 0..6 {
                let e = (jb[(row, col)] - fd[row]).abs() / fd[row].abs().max(1.0);
                worst = worst.max(e);
            }
        }
    }

    // Reprojection Jacobians against central differences.
    let k = CameraIntrinsics::default();
    for _ in 0..100 {
        let pose = random_pose_general(&mut rng);
        // A point safely in front of the camera.
        let p_cam = Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(1.0..8.0));
        let point = pose.transform_point(&p_cam);
        let obs = BAObservation {
            keyframe: ElementId::new(1, 1, 1),
            landmark: ElementId::new(1, 1, 2),
            u: rng.gen_range(0.0..640.0),
            v: rng.gen_range(0.0..480.0),
            depth: if rng.gen_bool(0.5) { rng.gen_range(1.0..8.0) } else { -1.0 },
        };
        let (jp, jl) = reproj_jacobians(&k, &pose, &point, &obs).unwrap();
        for col in 0..6 {
            let mut d = Vector6::zeros();
            d[col] = eps;
            let rp = reproj_residual(&k, &retract(&pose, &d), &point, &obs).unwrap();
            let rm = reproj_residual(&k, &retract(&pose, &(-d)), &point, &obs).unwrap();
            let fd = (rp - rm) / (2.0 * eps);
            for row in 0..3 {
                let e = (jp[(row, col)] - fd[row]).abs() / fd[row].abs().max(1.0);
                worst = worst.max(e);
            }
        }
        for col in 0..3 {
            let mut d = Vector3::zeros();
            d[col] = eps;
            let rp = reproj_residual(&k, &pose, &(point + d), &obs).unwrap();
            let rm = reproj_residual(&k, &pose, &(point - d), &obs).unwrap();
            let fd = (rp - rm) / (2.0 * eps);
            for row in 0..3 {
                let e = (jl[(row, col)] - fd[row]).abs() / fd[row].abs().max(1.0);
                worst = worst.max(e);
            }
        }
    }
    assert!(worst < 1e-4, "max relative Jacobian error {worst:.3e}");

    // Drift-injected 4-node loop closes exactly under consistent edges.
    let truth: Vec<Pose> = (0..4)
        .map(|i| {
            let yaw = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), i as f64 * std::f64::consts::FRAC_PI_2);
            let t = [
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(10.0, 0.0, 0.0),
                Vector3::new(10.0, 10.0, 0.0),
                Vector3::new(0.0, 10.0, 0.0),
            ][i];
            Pose::new(yaw, t)
        })
        .collect();
    let id = |i: usize| ElementId::new(1, 1, i as u64 + 1);
    let mut g = PoseGraph::default();
    for (i, p) in truth.iter().enumerate() {
        // Accumulating drift on every node but the gauge.
        let drift = Vector6::new(0.0, 0.0, 0.03 * i as f64, 0.2 * i as f64, -0.15 * i as f64, 0.0);
        g.nodes.insert(id(i), if i == 0 { *p } else { retract(p, &drift) });
    }
    for i in 0..4 {
        let j = (i + 1) % 4;
        g.edges.push(PoseEdge {
            from: id(i),
            to: id(j),
            measured: truth[i].inverse().compose(&truth[j]),
            weight: 1.0,
            kind: if j == 0 { EdgeKind::Loop } else { EdgeKind::Odometry },
        });
    }
    g.fixed.insert(id(0));
    let report = optimize_pose_graph(&mut g, 100, 1e-14).unwrap();
    for w in report.accepted_costs.windows(2) {
        assert!(w[1] <= w[0] + 1e-15, "accepted LM step increased cost: {w:?}");
    }
    let mut worst_rot = 0.0f64;
    for e in &g.edges {
        let r = edge_residual(&g.nodes[&e.from], &g.nodes[&e.to], &e.measured);
        worst_rot = worst_rot.max(Vector3::new(r[0], r[1], r[2]).norm());
    }
    assert!(worst_rot < 1e-6, "loop residual {worst_rot:.3e} rad");

    // BA accepted steps are monotone as well.
    let mut p = BAProblem { intrinsics: k, ..Default::default() };
    let kf0 = ElementId::new(1, 1, 1);
    let kf1 = ElementId::new(1, 1, 2);
    p.poses.insert(kf0, Pose::identity());
    p.poses.insert(kf1, retract(&Pose::new(UnitQuaternion::identity(), Vector3::new(1.0, 0.0, 0.0)), &Vector6::new(0.01, -0.01, 0.02, 0.05, -0.04, 0.03)));
    p.fixed.insert(kf0);
    let mut rng2 = ChaCha8Rng::seed_from_u64(0xC2B);
    for seq in 10..40u64 {
        let lm = ElementId::new(1, 1, seq);
        let pt = Vector3::new(
            rng2.gen_range(-2.0..2.0),
            rng2.gen_range(-2.0..2.0),
            rng2.gen_range(3.0..7.0),
        );
        p.landmarks.insert(lm, pt + Vector3::new(0.02, -0.01, 0.03));
        for kf in [kf0, kf1] {
            let cam_from_world = if kf == kf0 {
                Pose::identity().inverse()
            } else {
                Pose::new(UnitQuaternion::identity(), Vector3::new(1.0, 0.0, 0.0)).inverse()
            };
            if let Some((u, v, z)) = project(&p.intrinsics, &cam_from_world, &pt) {
                p.observations.push(BAObservation { keyframe: kf, landmark: lm, u, v, depth: z });
            }
        }
    }
    let ba = local_bundle_adjust(&mut p, 50, 1e-12).unwrap();
    for w in ba.accepted_costs.windows(2) {
        assert!(w[1] <= w[0] + 1e-15, "accepted BA step increased cost: {w:?}");
    }
    assert!(ba.final_cost <= ba.initial_cost);
    pass(2, "analytic Jacobians < 1e-4 of finite differences, 4-node loop closes < 1e-6 rad, LM monotone");
}

fn merge_config(seed: u64) -> config::ScenarioConfig {
    let mut cfg = config::two_robot_merge(seed);
    cfg.noise.pixel_sigma = 1.0;
    cfg
}

#[test]
fn criterion_03_two_client_merge() {
    let out = run_scenario(&merge_config(7)).unwrap();
    let nonempty = out.server.maps().values().filter(|m| !m.keyframes.is_empty()).count();
    assert_eq!(nonempty, 1, "expected one final map");
    let worst = out.report.worst_ate().unwrap();
    assert!(worst < 0.10, "post-merge ATE {worst:.3} m");
    pass(3, "two noisy clients converge to one map with ATE < 0.10 m");
}

fn blind_rig_config(seed: u64) -> config::ScenarioConfig {
    let mut cfg = config::rigid_dual_camera(seed);
    // Front camera blinded for 10 s mid-run.
    cfg.robots[0].cameras[0].blind_intervals = vec![[10.0, 20.0]];
    cfg
}

#[test]
fn criterion_04_rigid_constraint_recovery() {
    let out = run_scenario(&blind_rig_config(7)).unwrap();
    assert!(out.report.tracking_losses >= 1, "front camera never lost tracking");
    assert_eq!(out.report.map_count, 1, "maps did not re-unify after the blackout");
    // The relaunched front-camera session must have been absorbed while it
    // still held at most 3 keyframes.
    let ev = out
        .server
        .merge_log
        .iter()
        .find(|ev| ev.absorbed_sessions.iter().any(|&(c, s)| c == 1 && s >= 2))
        .expect("no merge involving the relaunched session");
    assert!(
        ev.absorbed_keyframes <= 3,
        "relaunched session merged only after {} keyframes",
        ev.absorbed_keyframes
    );
    pass(4, "blinded rigid camera relaunches and re-merges within 3 keyframes");
}

#[test]
fn criterion_05_bounded_client_memory() {
    let world = generate_world(&Default::default(), 0xC5);
    let tr = TrajectorySpec {
        waypoints: vec![[5.0, 5.0], [45.0, 5.0], [45.0, 15.0], [5.0, 15.0], [5.0, 25.0], [45.0, 25.0]],
        speed: 1.0,
        sample_rate_hz: 10.0,
        start_offset: 0.0,
    };
    let mount = forward_camera_mount(1.2);
    let cfg = ClientConfig::new(1);
    let w = cfg.window_size;
    let cap = cfg.augment_cap;
    let mut client = Client::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(0xC5);
    let noise = NoiseModel::noiseless();
    let mut prev: Option<Pose> = None;
    let mut keyframes = 0usize;
    let mut peak_window = 0usize;
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
        assert!(!r.tracking_lost, "tracking lost at t={t}");
        keyframes += r.keyframe_created as usize;
        let (win, win_lms, augmented) = client.memory_counts();
        peak_window = peak_window.max(win);
        assert!(win <= w, "window {win} > W={w} at t={t}");
        assert!(augmented <= cap, "augmented {augmented} > cap {cap} at t={t}");
        let total = client.local_map().landmark_count();
        assert!(
            total <= win_lms + cap,
            "landmarks {total} > window {win_lms} + cap {cap} at t={t}"
        );
    }
    assert!(
        keyframes >= 10 * w,
        "trajectory produced only {keyframes} keyframes, need >= {}",
        10 * w
    );
    assert_eq!(peak_window, w);
    pass(5, "client memory stays within W keyframes and window+cap landmarks over a 10W-keyframe run");
}

#[test]
fn criterion_06_loss_resilience() {
    let lossy = run_scenario(&config::lossy_link(5, 0.10)).unwrap();
    let clean = run_scenario(&config::lossy_link(5, 0.0)).unwrap();
    assert!(lossy.report.audit_error.is_none());
    let diff = snapshot_difference(lossy.server.maps(), clean.server.maps()).unwrap();
    assert!(diff <= 1e-9, "lossy vs lossless divergence {diff:.3e}");
    pass(6, "10% message loss converges to the lossless map within 1e-9");
}

fn revisit_config(seed: u64, exclusion: bool) -> config::ScenarioConfig {
    let mut cfg = config::two_robot_merge(seed);
    cfg.name = "revisit".into();
    cfg.robots.truncate(1);
    cfg.robots[0].trajectory.waypoints =
        vec![[5.0, 15.0], [30.0, 15.0], [30.0, 18.0], [5.0, 18.0], [5.0, 15.0], [30.0, 15.0]];
    cfg.duration = 100.0;
    cfg.augment_exclusion = exclusion;
    cfg.assertions = Default::default();
    cfg
}

#[test]
fn criterion_07_downlink_exclusion_efficiency() {
    let with = run_scenario(&revisit_config(7, true)).unwrap();
    let without = run_scenario(&revisit_config(7, false)).unwrap();
    let augment = |o: &collab_slam::eval::RunOutcome| -> u64 {
        o.report.bandwidth.iter().map(|b| b.augment_bytes_down).sum()
    };
    let (a, b) = (augment(&with), augment(&without));
    assert!(b > 0, "exclusion-disabled run sent no augmentation at all");
    assert!(
        (a as f64) < 0.10 * b as f64,
        "exclusion kept {a} augment bytes, >= 10% of {b}"
    );
    pass(7, "self-revisit augment traffic < 10% of the exclusion-disabled baseline");
}

#[test]
fn criterion_08_monocular_registration() {
    // A depth client maps a corridor through the server, then a monocular
    // client starting inside that map must register via place recognition.
    let world = generate_world(&Default::default(), 0xC8);
    let noise = NoiseModel::noiseless();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC8);
    let mut server = Server::new(ServerConfig::default());
    let mount = forward_camera_mount(1.2);

    let mut depth = Client::new(ClientConfig::new(1));
    let mut prev: Option<Pose> = None;
    for i in 0..250 {
        let t = i as f64 * 0.1;
        let base = Pose::new(UnitQuaternion::identity(), Vector3::new(5.0 + 0.8 * t, 15.0, 0.0));
        let cam = base.compose(&mount);
        let frame = observe(&world, &cam, &depth.cfg.intrinsics, &noise, t, 1, true, &mut rng);
        // First frame carries the true pose so the map frame matches world.
        let odom = prev.map_or(cam, |p| p.inverse().compose(&cam));
        prev = Some(cam);
        let r = depth.process_frame(&frame, &odom);
        for m in r.messages {
            for o in server.handle_message(&m, t).unwrap() {
                assert_eq!(o.client_id, 1);
                depth.apply_server_message(&o.message).unwrap();
            }
        }
    }
    assert_eq!(server.map_count(), 1);

    let mut mono = Client::new(ClientConfig { depth_camera: false, ..ClientConfig::new(2) });
    assert_eq!(mono.phase(), ClientPhase::AwaitingInitialization);
    let mut frames_to_init = 0usize;
    let mut registered_pose = Pose::identity();
    let mut mono_prev: Option<Pose> = None;
    for i in 0..40 {
        let t = 30.0 + i as f64 * 0.1;
        let base = Pose::new(UnitQuaternion::identity(), Vector3::new(10.0 + 0.8 * (t - 30.0), 15.0, 0.0));
        let cam = base.compose(&mount);
        let frame = observe(&world, &cam, &mono.cfg.intrinsics, &noise, t, 2, false, &mut rng);
        let odom = mono_prev.map_or(Pose::identity(), |p: Pose| p.inverse().compose(&cam));
        mono_prev = Some(cam);
        let before = mono.phase();
        let r = mono.process_frame(&frame, &odom);
        if before == ClientPhase::AwaitingInitialization {
            // Tracking must never start before a successful response.
            assert!(r.pose.is_none());
            assert!(!r.keyframe_created);
            frames_to_init += 1;
        }
        for m in r.messages {
            for o in server.handle_message(&m, t).unwrap() {
                if o.client_id == 2 {
                    mono.apply_server_message(&o.message).unwrap();
                }
            }
        }
        if mono.phase() == ClientPhase::Tracking && before == ClientPhase::AwaitingInitialization {
            registered_pose = mono.current_pose();
            break;
        }
    }
    assert_eq!(mono.phase(), ClientPhase::Tracking, "monocular client never initialized");
    assert!(frames_to_init <= 5, "initialization took {frames_to_init} frames");
    let truth = Pose::new(UnitQuaternion::identity(), Vector3::new(10.0, 15.0, 0.0)).compose(&mount);
    let (_, dist) = truth.delta_to(&registered_pose);
    assert!(dist < 0.15, "registered pose {dist:.3} m from truth");

    // The shipped monocular scenario must land under the scaled ATE bound.
    let out = run_scenario(&config::monocular_join(7)).unwrap();
    assert_eq!(out.report.map_count, 1);
    let worst_scaled = out.report.ate.iter().map(|a| a.rmse_scaled).fold(0.0, f64::max);
    assert!(worst_scaled < 0.15, "scaled ATE {worst_scaled:.3}");
    pass(8, "monocular client registers within 5 frames, < 0.15 m, never tracking before the response");
}

#[test]
fn criterion_09_eight_client_stress() {
    let out = run_scenario_with_watchdog(&config::eight_client_stress(1), 60.0).unwrap();
    assert!(out.report.map_count <= 3, "{} maps after stress run", out.report.map_count);
    assert!(out.report.audit_error.is_none(), "audit: {:?}", out.report.audit_error);
    pass(9, "8-client stress ends with <= 3 maps, clean audit, inside the 60 s watchdog");
}

fn snapshot_bytes(maps: &BTreeMap<u64, MapRecord>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_snapshot(&mut buf, maps).unwrap();
    buf
}

#[test]
fn criterion_10_determinism() {
    let configs = [
        merge_config(7),
        blind_rig_config(7),
        config::lossy_link(5, 0.10),
        config::eight_client_stress(1),
    ];
    for cfg in &configs {
        let a = run_scenario(cfg).unwrap();
        let b = run_scenario(cfg).unwrap();
        assert_eq!(
            snapshot_bytes(a.server.maps()),
            snapshot_bytes(b.server.maps()),
            "rerun of {} diverged",
            cfg.name
        );
    }
    pass(10, "merge, recovery, loss, and stress scenarios rerun bit-identically");
}
