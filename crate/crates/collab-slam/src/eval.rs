//! Evaluation and orchestration: absolute trajectory error, map
//! snapshots, deterministic scenario runs, bandwidth accounting, and
//! structured reports.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::channel::{LinkConfig, RecvEvent, ReliableEndpoint, SimLink, DEFAULT_RESEND_WINDOW};
use crate::client::{Client, ClientConfig};
use crate::config::ScenarioConfig;
use crate::geom::{align_point_sets, GeomError, Pose};
use crate::map::{MapRecord, Observation};
use crate::protocol::{
    self, Control, MsgType, WireKeyframe, WireLandmark, WireMessage, WireObservation,
};
use crate::server::{RigidPairConfig, Server, ServerConfig, Timings};
use crate::simworld::{generate_world, observe};

/// Association window when matching estimated and reference trajectory
/// samples by timestamp.
pub const ATE_ASSOCIATION_WINDOW: f64 = 0.01;

const SNAPSHOT_MAGIC: u32 = 0x50414E53;
const SNAPSHOT_VERSION: u8 = 1;
const SNAPSHOT_CHUNK: usize = 1000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("only {0} trajectory associations, need at least 3")]
    TooFewAssociations(usize),
    #[error("geometry error: {0}")]
    Geom(#[from] GeomError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("codec error: {0}")]
    Codec(#[from] protocol::CodecError),
    #[error("bad snapshot: {0}")]
    BadSnapshot(String),
    #[error("scenario error: {0}")]
    Scenario(String),
    #[error("watchdog expired after {0:.1}s")]
    Watchdog(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AteReport {
    /// RMS translation error after rigid (or similarity) alignment.
    pub rmse: f64,
    pub scale: f64,
    pub associations: usize,
}

/// Absolute trajectory error between a timestamped estimate and a
/// reference, associated within [`ATE_ASSOCIATION_WINDOW`].
pub fn compute_ate(
    estimate: &[(f64, Pose)],
    reference: &[(f64, Pose)],
    with_scale: bool,
) -> Result<AteReport, EvalError> {
    let mut est_pts = Vec::new();
    let mut ref_pts = Vec::new();
    for (t, pose) in estimate {
        let nearest = reference
            .iter()
            .min_by(|a, b| (a.0 - t).abs().total_cmp(&(b.0 - t).abs()));
        if let Some((rt, rp)) = nearest {
            if (rt - t).abs() <= ATE_ASSOCIATION_WINDOW {
                est_pts.push(pose.translation());
                ref_pts.push(rp.translation());
            }
        }
    }
    if est_pts.len() < 3 {
        return Err(EvalError::TooFewAssociations(est_pts.len()));
    }
    let alignment = align_point_sets(&est_pts, &ref_pts, with_scale)?;
    Ok(AteReport { rmse: alignment.rms, scale: alignment.scale, associations: est_pts.len() })
}

// ---------------------------------------------------------------------------
// Snapshots

fn keyframe_to_wire(kf: &crate::map::Keyframe) -> WireKeyframe {
    WireKeyframe {
        id: kf.id,
        timestamp: kf.timestamp,
        world_from_cam: kf.world_from_cam,
        intrinsics_ref: kf.intrinsics_ref,
        is_virtual: kf.is_virtual,
        pose_only: false,
        observations: kf
            .observations
            .iter()
            .map(|o| WireObservation {
                landmark: o.landmark,
                u: o.u as f32,
                v: o.v as f32,
                depth: o.depth as f32,
            })
            .collect(),
        signature: kf.signature.clone(),
    }
}

fn landmark_to_wire(lm: &crate::map::Landmark) -> WireLandmark {
    WireLandmark {
        id: lm.id,
        position_w: [lm.position_w.x as f32, lm.position_w.y as f32, lm.position_w.z as f32],
        descriptor: lm.descriptor,
        observing_keyframes: lm.observing_keyframes.iter().copied().collect(),
        last_updated_by: lm.last_updated_by,
    }
}

/// Serializes every map to a binary stream built from wire-format chunks.
pub fn write_snapshot<W: Write>(
    mut w: W,
    maps: &BTreeMap<u64, MapRecord>,
) -> Result<(), EvalError> {
    w.write_all(&SNAPSHOT_MAGIC.to_le_bytes())?;
    w.write_all(&[SNAPSHOT_VERSION])?;
    w.write_all(&(maps.len() as u32).to_le_bytes())?;
    for (map_id, map) in maps {
        w.write_all(&map_id.to_le_bytes())?;
        w.write_all(&map.grid.cell_size().to_le_bytes())?;
        let kfs: Vec<&crate::map::Keyframe> = map.keyframes.values().collect();
        let lms: Vec<&crate::map::Landmark> = map.landmarks.values().collect();
        let chunks = kfs.len().div_ceil(SNAPSHOT_CHUNK).max(lms.len().div_ceil(SNAPSHOT_CHUNK)).max(1);
        w.write_all(&(chunks as u32).to_le_bytes())?;
        for i in 0..chunks {
            let mut msg = WireMessage::new(0, 0, Control::MapUpdate);
            msg.map_id = *map_id;
            let ks = i * SNAPSHOT_CHUNK;
            msg.keyframes = kfs
                .iter()
                .skip(ks)
                .take(SNAPSHOT_CHUNK)
                .map(|k| keyframe_to_wire(k))
                .collect();
            msg.landmarks =
                lms.iter().skip(ks).take(SNAPSHOT_CHUNK).map(|l| landmark_to_wire(l)).collect();
            let frame = protocol::encode(&msg)?;
            w.write_all(&(frame.len() as u32).to_le_bytes())?;
            w.write_all(&frame)?;
        }
    }
    Ok(())
}

pub fn read_snapshot<R: Read>(mut r: R) -> Result<BTreeMap<u64, MapRecord>, EvalError> {
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u32buf)?;
    if u32::from_le_bytes(u32buf) != SNAPSHOT_MAGIC {
        return Err(EvalError::BadSnapshot("bad magic".into()));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != SNAPSHOT_VERSION {
        return Err(EvalError::BadSnapshot(format!("unsupported version {}", version[0])));
    }
    r.read_exact(&mut u32buf)?;
    let n_maps = u32::from_le_bytes(u32buf);
    let mut maps = BTreeMap::new();
    for _ in 0..n_maps {
        r.read_exact(&mut u64buf)?;
        let map_id = u64::from_le_bytes(u64buf);
        r.read_exact(&mut u64buf)?;
        let cell_size = f64::from_le_bytes(u64buf);
        r.read_exact(&mut u32buf)?;
        let chunks = u32::from_le_bytes(u32buf);
        let mut map = MapRecord::with_cell_size(map_id, cell_size);
        for _ in 0..chunks {
            r.read_exact(&mut u32buf)?;
            let len = u32::from_le_bytes(u32buf) as usize;
            let mut frame = vec![0u8; len];
            r.read_exact(&mut frame)?;
            let msg = protocol::decode(&frame)?;
            for wk in &msg.keyframes {
                let kf = crate::map::Keyframe {
                    id: wk.id,
                    timestamp: wk.timestamp,
                    world_from_cam: wk.world_from_cam,
                    intrinsics_ref: wk.intrinsics_ref,
                    observations: wk
                        .observations
                        .iter()
                        .map(|o| Observation {
                            landmark: o.landmark,
                            u: o.u as f64,
                            v: o.v as f64,
                            depth: o.depth as f64,
                        })
                        .collect(),
                    signature: wk.signature.clone(),
                    map_id,
                    is_virtual: wk.is_virtual,
                };
                map.upsert_keyframe(kf)
                    .map_err(|e| EvalError::BadSnapshot(e.to_string()))?;
            }
            for wl in &msg.landmarks {
                let lm = crate::map::Landmark {
                    id: wl.id,
                    position_w: wl.position(),
                    descriptor: wl.descriptor,
                    observing_keyframes: wl.observing_keyframes.iter().copied().collect(),
                    last_updated_by: wl.last_updated_by,
                    map_id,
                };
                map.upsert_landmark(lm)
                    .map_err(|e| EvalError::BadSnapshot(e.to_string()))?;
            }
        }
        maps.insert(map_id, map);
    }
    Ok(maps)
}

pub fn save_snapshot(path: &Path, maps: &BTreeMap<u64, MapRecord>) -> Result<(), EvalError> {
    let mut f = std::fs::File::create(path)?;
    write_snapshot(&mut f, maps)
}

pub fn load_snapshot(path: &Path) -> Result<BTreeMap<u64, MapRecord>, EvalError> {
    read_snapshot(std::fs::File::open(path)?)
}

/// Largest pose or landmark discrepancy between two snapshots, or an
/// error if they differ structurally.
pub fn snapshot_difference(
    a: &BTreeMap<u64, MapRecord>,
    b: &BTreeMap<u64, MapRecord>,
) -> Result<f64, EvalError> {
    if a.keys().collect::<Vec<_>>() != b.keys().collect::<Vec<_>>() {
        return Err(EvalError::BadSnapshot("map id sets differ".into()));
    }
    let mut worst: f64 = 0.0;
    for (id, ma) in a {
        let mb = &b[id];
        if ma.keyframes.keys().collect::<Vec<_>>() != mb.keyframes.keys().collect::<Vec<_>>() {
            return Err(EvalError::BadSnapshot(format!("map {id}: keyframe sets differ")));
        }
        if ma.landmarks.keys().collect::<Vec<_>>() != mb.landmarks.keys().collect::<Vec<_>>() {
            return Err(EvalError::BadSnapshot(format!("map {id}: landmark sets differ")));
        }
        for (kid, ka) in &ma.keyframes {
            let (ang, dist) = ka.world_from_cam.delta_to(&mb.keyframes[kid].world_from_cam);
            worst = worst.max(ang).max(dist);
        }
        for (lid, la) in &ma.landmarks {
            worst = worst.max((la.position_w - mb.landmarks[lid].position_w).norm());
        }
    }
    Ok(worst)
}

/// Order-independent FNV digest of the full map state; bit-identical runs
/// produce identical digests.
pub fn map_digest(maps: &BTreeMap<u64, MapRecord>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for (id, map) in maps {
        eat(&id.to_le_bytes());
        for (kid, kf) in &map.keyframes {
            eat(&kid.client_id.to_le_bytes());
            eat(&kid.session_id.to_le_bytes());
            eat(&kid.local_seq.to_le_bytes());
            for c in kf.world_from_cam.coeffs() {
                eat(&c.to_bits().to_le_bytes());
            }
        }
        for (lid, lm) in &map.landmarks {
            eat(&lid.local_seq.to_le_bytes());
            for c in [lm.position_w.x, lm.position_w.y, lm.position_w.z] {
                eat(&c.to_bits().to_le_bytes());
            }
        }
    }
    h
}

// ---------------------------------------------------------------------------
// Scenario driver

#[derive(Debug, Clone, PartialEq)]
pub struct MapAte {
    pub map_id: u64,
    pub keyframes: usize,
    pub rmse: f64,
    pub rmse_scaled: f64,
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct ClientBandwidth {
    pub client_id: u32,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub augment_bytes_down: u64,
    pub map_update_bytes_up: u64,
    /// (time, bytes, uplink?) per frame actually sent, for timelines.
    pub timeline: Vec<(f64, usize, bool)>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub duration: f64,
    pub frames: usize,
    pub keyframes: usize,
    pub tracking_losses: usize,
    pub map_count: usize,
    pub merge_count: u64,
    pub audit_error: Option<String>,
    pub ate: Vec<MapAte>,
    pub bandwidth: Vec<ClientBandwidth>,
    pub timings: Timings,
    pub digest: u64,
    pub wall_secs: f64,
}

impl RunReport {
    pub fn worst_ate(&self) -> Option<f64> {
        self.ate.iter().map(|a| a.rmse).max_by(f64::total_cmp)
    }
}

/// Outcome of a run: the report plus the live server for snapshotting or
/// further inspection.
pub struct RunOutcome {
    pub report: RunReport,
    pub server: Server,
    /// Ground-truth camera trajectories per client.
    pub truth: BTreeMap<u32, Vec<(f64, Pose)>>,
}

struct Rig {
    client: Client,
    robot_idx: usize,
    mount: Pose,
    endpoint: ReliableEndpoint,
    rng: ChaCha8Rng,
    prev_true_cam: Option<Pose>,
    truth: Vec<(f64, Pose)>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Runs a scenario to completion on in-process simulated links with a
/// logical clock. Identical configurations produce bit-identical maps.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutcome, EvalError> {
    run_scenario_with_watchdog(cfg, f64::INFINITY)
}

pub fn run_scenario_with_watchdog(
    cfg: &ScenarioConfig,
    watchdog_secs: f64,
) -> Result<RunOutcome, EvalError> {
    cfg.validate().map_err(|e| EvalError::Scenario(e.to_string()))?;
    let started = Instant::now();
    let world = generate_world(&cfg.world, cfg.seed);

    let mut server_cfg = ServerConfig::default();
    server_cfg.seed = cfg.seed;
    server_cfg.augment_exclusion = cfg.augment_exclusion;
    for p in &cfg.rigid_pairs {
        let a_from_b = cfg
            .rigid_extrinsics(p)
            .ok_or_else(|| EvalError::Scenario("rigid pair references unknown camera".into()))?;
        server_cfg.rigid_pairs.push(RigidPairConfig {
            client_a: p.client_a,
            client_b: p.client_b,
            a_from_b,
        });
    }
    let mut server = Server::new(server_cfg);

    // One link + endpoint pair per camera.
    let mut rigs: Vec<Rig> = Vec::new();
    let mut server_eps: Vec<ReliableEndpoint> = Vec::new();
    let mut links: Vec<SimLink> = Vec::new();
    for (robot_idx, robot) in cfg.robots.iter().enumerate() {
        for cam in &robot.cameras {
            let mut ccfg = ClientConfig::new(cam.client_id);
            ccfg.depth_camera = cam.depth;
            ccfg.window_size = cam.window_size;
            ccfg.augment_cap = cam.augment_cap;
            let link_cfg = LinkConfig {
                loss_probability: cfg.network.loss_probability,
                latency: cfg.network.latency,
                jitter: cfg.network.jitter,
                scripted_drops: cfg.network.scripted_drops.clone(),
            };
            let down_cfg = LinkConfig {
                scripted_drops: Vec::new(),
                ..link_cfg.clone()
            };
            let link = SimLink::new(
                cfg.seed ^ (0xB10C_0000 + cam.client_id as u64),
                link_cfg,
                down_cfg,
            );
            let (a, b) = link.endpoints();
            rigs.push(Rig {
                client: Client::new(ccfg),
                robot_idx,
                mount: cam.mount.base_from_cam(),
                endpoint: ReliableEndpoint::new(Box::new(a), DEFAULT_RESEND_WINDOW),
                rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x0B5E_0000 + cam.client_id as u64)),
                prev_true_cam: None,
                truth: Vec::new(),
            });
            server_eps.push(ReliableEndpoint::new(Box::new(b), DEFAULT_RESEND_WINDOW));
            links.push(link);
        }
    }
    let client_index: BTreeMap<u32, usize> =
        rigs.iter().enumerate().map(|(i, r)| (r.client.cfg.client_id, i)).collect();

    // Frame schedule ordered by (time, rig).
    let mut events: Vec<(f64, usize)> = Vec::new();
    for (i, rig) in rigs.iter().enumerate() {
        let tr = &cfg.robots[rig.robot_idx].trajectory;
        let mut k = 0u64;
        loop {
            let t = tr.start_offset + k as f64 / tr.sample_rate_hz;
            if t > cfg.duration {
                break;
            }
            events.push((t, i));
            k += 1;
        }
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut timings = Timings::default();
    let mut frames = 0usize;
    let mut keyframes = 0usize;
    let mut tracking_losses = 0usize;

    let pump = |now: f64,
                    rigs: &mut Vec<Rig>,
                    server_eps: &mut Vec<ReliableEndpoint>,
                    server: &mut Server,
                    links: &Vec<SimLink>,
                    timings: &mut Timings|
     -> Result<(), EvalError> {
        for _ in 0..3 {
            for link in links.iter() {
                link.advance(now);
            }
            for i in 0..server_eps.len() {
                for ev in server_eps[i].poll(now) {
                    if let RecvEvent::Message(m) = ev {
                        let out = server
                            .handle_message(&m, now)
                            .map_err(|e| EvalError::Scenario(e.to_string()))?;
                        for o in out {
                            if let Some(idx) = client_index.get(&o.client_id) {
                                let t0 = Instant::now();
                                let _ = server_eps[*idx].send(o.message, now);
                                timings
                                    .record("sending map updates", t0.elapsed().as_secs_f64());
                            }
                        }
                    }
                }
            }
            for link in links.iter() {
                link.advance(now);
            }
            for rig in rigs.iter_mut() {
                for ev in rig.endpoint.poll(now) {
                    if let RecvEvent::Message(m) = ev {
                        let _ = rig.client.apply_server_message(&m);
                    }
                }
            }
        }
        Ok(())
    };

    for (t, idx) in events {
        if started.elapsed().as_secs_f64() > watchdog_secs {
            return Err(EvalError::Watchdog(started.elapsed().as_secs_f64()));
        }
        pump(t, &mut rigs, &mut server_eps, &mut server, &links, &mut timings)?;

        let rig = &mut rigs[idx];
        let tr = &cfg.robots[rig.robot_idx].trajectory;
        let base = tr.base_pose_at(t - tr.start_offset);
        let cam_pose = base.compose(&rig.mount);
        let mut frame = observe(
            &world,
            &cam_pose,
            &rig.client.cfg.intrinsics,
            &cfg.noise,
            t,
            rig.client.cfg.camera_id,
            rig.client.cfg.depth_camera,
            &mut rig.rng,
        );
        if let Some((_, cam)) = cfg.camera(rig.client.cfg.client_id) {
            if cam.blind_intervals.iter().any(|w| t >= w[0] && t <= w[1]) {
                frame.features.clear();
            }
        }
        let mut odom = rig
            .prev_true_cam
            .map_or(Pose::identity(), |p| p.inverse().compose(&cam_pose));
        if cfg.noise.odometry_sigma > 0.0 {
            let sigma = cfg.noise.odometry_sigma;
            let dt = Vector3::new(
                gaussian(&mut rig.rng) * sigma,
                gaussian(&mut rig.rng) * sigma,
                gaussian(&mut rig.rng) * sigma,
            );
            let axis = Vector3::new(
                gaussian(&mut rig.rng),
                gaussian(&mut rig.rng),
                gaussian(&mut rig.rng),
            );
            let jiggle = if axis.norm() > 1e-12 {
                Pose::from_axis_angle(axis, gaussian(&mut rig.rng).abs() * sigma * 0.1)
            } else {
                Pose::identity()
            };
            odom = odom.compose(&Pose::new(jiggle.rotation(), dt));
        }
        rig.prev_true_cam = Some(cam_pose);
        rig.truth.push((t, cam_pose));

        let t0 = Instant::now();
        let result = rig.client.process_frame(&frame, &odom);
        let spent = t0.elapsed().as_secs_f64();
        timings.record(if result.keyframe_created { "local mapping" } else { "tracking" }, spent);
        frames += 1;
        keyframes += result.keyframe_created as usize;
        tracking_losses += result.tracking_lost as usize;
        for m in result.messages {
            let t0 = Instant::now();
            let _ = rig.endpoint.send(m, t);
            timings.record("sending map updates", t0.elapsed().as_secs_f64());
        }
        pump(t, &mut rigs, &mut server_eps, &mut server, &links, &mut timings)?;
    }

    // Drain in-flight traffic, including idle acks and resends.
    let mut now = cfg.duration;
    for _ in 0..20 {
        now += 0.25;
        pump(now, &mut rigs, &mut server_eps, &mut server, &links, &mut timings)?;
    }

    // Fold in the server-side timing categories.
    for (k, (n, total)) in &server.timings.entries {
        let e = timings.entries.entry(k).or_default();
        e.0 += n;
        e.1 += total;
    }

    let truth: BTreeMap<u32, Vec<(f64, Pose)>> = rigs
        .iter()
        .map(|r| (r.client.cfg.client_id, r.truth.clone()))
        .collect();
    let ate = per_map_ate(&server, &truth);

    let mut bandwidth = Vec::new();
    for (i, rig) in rigs.iter().enumerate() {
        let ep = &server_eps[i];
        let mut timeline: Vec<(f64, usize, bool)> =
            rig.endpoint.send_log.iter().map(|r| (r.time, r.bytes, true)).collect();
        timeline.extend(ep.send_log.iter().map(|r| (r.time, r.bytes, false)));
        timeline.sort_by(|a, b| a.0.total_cmp(&b.0));
        bandwidth.push(ClientBandwidth {
            client_id: rig.client.cfg.client_id,
            bytes_up: rig.endpoint.bytes_sent(),
            bytes_down: ep.bytes_sent(),
            augment_bytes_down: ep
                .send_log
                .iter()
                .filter(|r| r.msg_type == MsgType::Augment)
                .map(|r| r.bytes as u64)
                .sum(),
            map_update_bytes_up: rig
                .endpoint
                .send_log
                .iter()
                .filter(|r| r.msg_type == MsgType::MapUpdate)
                .map(|r| r.bytes as u64)
                .sum(),
            timeline,
        });
    }

    let report = RunReport {
        name: cfg.name.clone(),
        seed: cfg.seed,
        duration: cfg.duration,
        frames,
        keyframes,
        tracking_losses,
        map_count: server.map_count(),
        merge_count: server.merge_count(),
        audit_error: server.audit().err(),
        ate,
        bandwidth,
        timings,
        digest: map_digest(server.maps()),
        wall_secs: started.elapsed().as_secs_f64(),
    };
    Ok(RunOutcome { report, server, truth })
}

/// Keyframe-level ATE per map against the recorded ground truth.
pub fn per_map_ate(server: &Server, truth: &BTreeMap<u32, Vec<(f64, Pose)>>) -> Vec<MapAte> {
    let mut out = Vec::new();
    for (map_id, map) in server.maps() {
        // Keyframes are paired with their own client's ground-truth track;
        // the pairs go straight to alignment (several clients share
        // timestamps, so re-association by time alone would cross tracks).
        let mut est_pts = Vec::new();
        let mut ref_pts = Vec::new();
        for kf in map.keyframes.values() {
            if kf.is_virtual {
                continue;
            }
            let Some(track) = truth.get(&kf.id.client_id) else { continue };
            let nearest = track
                .iter()
                .min_by(|a, b| (a.0 - kf.timestamp).abs().total_cmp(&(b.0 - kf.timestamp).abs()));
            if let Some((rt, rp)) = nearest {
                if (rt - kf.timestamp).abs() <= ATE_ASSOCIATION_WINDOW {
                    est_pts.push(kf.world_from_cam.translation());
                    ref_pts.push(rp.translation());
                }
            }
        }
        if est_pts.len() < 3 {
            continue;
        }
        let rigid = align_point_sets(&est_pts, &ref_pts, false);
        let scaled = align_point_sets(&est_pts, &ref_pts, true);
        if let (Ok(r), Ok(s)) = (rigid, scaled) {
            out.push(MapAte {
                map_id: *map_id,
                keyframes: est_pts.len(),
                rmse: r.rms,
                rmse_scaled: s.rms,
                scale: s.scale,
            });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Reports and assertions

pub fn render_text_report(r: &RunReport) -> String {
    let mut s = String::new();
    use std::fmt::Write as _;
    let _ = writeln!(s, "scenario: {}", r.name);
    let _ = writeln!(s, "seed: {}", r.seed);
    let _ = writeln!(s, "simulated duration: {:.1} s (wall {:.2} s)", r.duration, r.wall_secs);
    let _ = writeln!(s, "frames: {}  keyframes: {}  tracking losses: {}", r.frames, r.keyframes, r.tracking_losses);
    let _ = writeln!(s, "maps: {}  merges: {}", r.map_count, r.merge_count);
    let _ = writeln!(
        s,
        "audit: {}",
        r.audit_error.as_deref().unwrap_or("ok")
    );
    let _ = writeln!(s, "digest: {:016x}", r.digest);
    for a in &r.ate {
        let _ = writeln!(
            s,
            "map {}: {} keyframes, ATE {:.4} m (scaled {:.4} m, scale {:.4})",
            a.map_id, a.keyframes, a.rmse, a.rmse_scaled, a.scale
        );
    }
    let _ = writeln!(s, "timing (mean ms / calls):");
    for (k, (n, total)) in &r.timings.entries {
        let _ = writeln!(s, "  {:<28} {:>9.3} / {}", k, 1e3 * total / (*n).max(1) as f64, n);
    }
    for b in &r.bandwidth {
        let _ = writeln!(
            s,
            "client {}: up {} B (map updates {} B), down {} B (augment {} B)",
            b.client_id, b.bytes_up, b.map_update_bytes_up, b.bytes_down, b.augment_bytes_down
        );
    }
    s
}

/// Tab-separated bandwidth timeline: one row per sent frame.
pub fn render_plot_data(r: &RunReport) -> String {
    let mut s = String::from("time\tclient\tdirection\tbytes\n");
    use std::fmt::Write as _;
    for b in &r.bandwidth {
        for (t, bytes, up) in &b.timeline {
            let _ = writeln!(
                s,
                "{:.3}\t{}\t{}\t{}",
                t,
                b.client_id,
                if *up { "up" } else { "down" },
                bytes
            );
        }
    }
    s
}

/// Evaluates the scenario's declarative assertions; `(description, pass)`.
pub fn check_assertions(
    report: &RunReport,
    assertions: &crate::config::Assertions,
) -> Vec<(String, bool)> {
    let mut out = Vec::new();
    if let Some(max_maps) = assertions.max_maps {
        out.push((
            format!("final map count {} <= {}", report.map_count, max_maps),
            report.map_count <= max_maps,
        ));
    }
    if let Some(max_ate) = assertions.max_ate {
        let worst = report.worst_ate().unwrap_or(f64::INFINITY);
        out.push((format!("worst map ATE {:.4} < {:.4}", worst, max_ate), worst < max_ate));
    }
    if let Some(min_merges) = assertions.min_merges {
        out.push((
            format!("merges {} >= {}", report.merge_count, min_merges),
            report.merge_count >= min_merges,
        ));
    }
    if assertions.audit {
        out.push((
            format!("audit {}", report.audit_error.as_deref().unwrap_or("ok")),
            report.audit_error.is_none(),
        ));
    }
    out
}
