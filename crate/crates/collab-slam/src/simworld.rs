//! Deterministic synthetic world, robot trajectories, camera observation
//! generation with configurable noise, and scripted lossy links.
//!
//! Everything is reproducible from seeds: the same seed yields the same
//! world, the same observations, and the same network drop schedule.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{LinkConfig, SimLink};
use crate::client::{Feature, FrameObservation};
use crate::geom::{project, CameraIntrinsics, Pose};
use crate::map::Landmark;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldLandmark {
    pub tag: u64,
    pub position: Vector3<f64>,
    pub descriptor: [u8; 32],
}

/// Landmarks spread over a floor AABB, heights clustered in the ground
/// robot regime.
#[derive(Debug, Clone)]
pub struct WorldModel {
    pub landmarks: Vec<WorldLandmark>,
    pub bounds: FloorBounds,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FloorBounds {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Default for FloorBounds {
    fn default() -> Self {
        Self { min_x: 0.0, min_y: 0.0, max_x: 50.0, max_y: 30.0 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WorldConfig {
    pub bounds: FloorBounds,
    pub landmark_count: usize,
    pub height_min: f64,
    pub height_max: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            bounds: FloorBounds::default(),
            landmark_count: 4000,
            height_min: 0.2,
            height_max: 3.0,
        }
    }
}

/// Deterministic given the seed: uniform x-y, heights in the configured
/// band, unique tags.
pub fn generate_world(config: &WorldConfig, seed: u64) -> WorldModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = config.bounds;
    let mut landmarks = Vec::with_capacity(config.landmark_count);
    for i in 0..config.landmark_count {
        let tag = (i as u64) + 1;
        landmarks.push(WorldLandmark {
            tag,
            position: Vector3::new(
                rng.gen_range(b.min_x..b.max_x),
                rng.gen_range(b.min_y..b.max_y),
                rng.gen_range(config.height_min..config.height_max),
            ),
            descriptor: Landmark::descriptor_for_tag(tag),
        });
    }
    WorldModel { landmarks, bounds: b, seed }
}

/// Measurement corruption applied to exact projections.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseModel {
    pub pixel_sigma: f64,
    /// Multiplicative: sigma as a fraction of the true depth.
    pub depth_sigma_frac: f64,
    pub dropout_probability: f64,
    pub signature_dropout_probability: f64,
    pub odometry_sigma: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            pixel_sigma: 0.0,
            depth_sigma_frac: 0.0,
            dropout_probability: 0.0,
            signature_dropout_probability: 0.0,
            odometry_sigma: 0.0,
        }
    }
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self::default()
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniform draws per sample keeps the stream simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Exact projection of visible landmarks, then noise: Gaussian pixel
/// perturbation, multiplicative depth noise, Bernoulli dropout, and
/// signature dropout on the world tag.
pub fn observe(
    world: &WorldModel,
    world_from_cam: &Pose,
    intrinsics: &CameraIntrinsics,
    noise: &NoiseModel,
    timestamp: f64,
    camera_id: u32,
    depth_camera: bool,
    rng: &mut ChaCha8Rng,
) -> FrameObservation {
    let cam_from_world = world_from_cam.inverse();
    let mut features = Vec::new();
    for lm in &world.landmarks {
        let Some((u, v, depth)) = project(intrinsics, &cam_from_world, &lm.position) else {
            continue;
        };
        if noise.dropout_probability > 0.0 && rng.gen_range(0.0..1.0) < noise.dropout_probability {
            continue;
        }
        let u = u + noise.pixel_sigma * gaussian(rng);
        let v = v + noise.pixel_sigma * gaussian(rng);
        let depth = if depth_camera {
            depth * (1.0 + noise.depth_sigma_frac * gaussian(rng))
        } else {
            -1.0
        };
        let in_signature = !(noise.signature_dropout_probability > 0.0
            && rng.gen_range(0.0..1.0) < noise.signature_dropout_probability);
        features.push(Feature {
            u,
            v,
            depth,
            tag: lm.tag,
            descriptor: lm.descriptor,
            in_signature,
        });
    }
    FrameObservation {
        timestamp,
        camera_id,
        features,
        true_world_from_cam: *world_from_cam,
    }
}

/// Camera rigidly mounted on the robot base: optical axis along base x
/// (travel direction), image x to the robot's right, image y down.
pub fn forward_camera_mount(height: f64) -> Pose {
    // Columns are the camera axes expressed in the base frame.
    let r = Matrix3::new(
        0.0, 0.0, 1.0, //
        -1.0, 0.0, 0.0, //
        0.0, -1.0, 0.0,
    );
    Pose::new(
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r)),
        Vector3::new(0.0, 0.0, height),
    )
}

/// Rear-facing mount: the forward mount yawed half a turn.
pub fn rear_camera_mount(height: f64) -> Pose {
    Pose::from_axis_angle(Vector3::z(), std::f64::consts::PI).compose(&forward_camera_mount(height))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectorySpec {
    /// Ground-plane waypoints, consecutive entries distinct.
    pub waypoints: Vec<[f64; 2]>,
    pub speed: f64,
    pub sample_rate_hz: f64,
    /// Cameras are not hardware synchronized; each trajectory starts
    /// sampling at its own offset.
    pub start_offset: f64,
}

/// Corner yaw changes are smoothed over this window to avoid
/// interpolation degeneracies at waypoints.
pub const CORNER_SMOOTHING_SECS: f64 = 0.5;

impl TrajectorySpec {
    pub fn total_length(&self) -> f64 {
        self.segment_lengths().iter().sum()
    }

    pub fn duration(&self) -> f64 {
        self.total_length() / self.speed
    }

    fn segment_lengths(&self) -> Vec<f64> {
        self.waypoints
            .windows(2)
            .map(|w| {
                (Vector2::new(w[1][0], w[1][1]) - Vector2::new(w[0][0], w[0][1])).norm()
            })
            .collect()
    }

    /// Base pose (x-y position plus yaw) at travel time `t` since the
    /// trajectory start. Clamped to the endpoints.
    pub fn base_pose_at(&self, t: f64) -> Pose {
        assert!(self.waypoints.len() >= 2);
        let lengths = self.segment_lengths();
        let total: f64 = lengths.iter().sum();
        let d = (t * self.speed).clamp(0.0, total);

        let mut cum = 0.0;
        let mut seg = 0;
        for (i, len) in lengths.iter().enumerate() {
            if d <= cum + len || i == lengths.len() - 1 {
                seg = i;
                break;
            }
            cum += len;
        }
        let a = Vector2::new(self.waypoints[seg][0], self.waypoints[seg][1]);
        let b = Vector2::new(self.waypoints[seg + 1][0], self.waypoints[seg + 1][1]);
        let len = lengths[seg].max(1e-12);
        let frac = ((d - cum) / len).clamp(0.0, 1.0);
        let pos = a + (b - a) * frac;

        let seg_yaw = |i: usize| {
            let p = Vector2::new(self.waypoints[i][0], self.waypoints[i][1]);
            let q = Vector2::new(self.waypoints[i + 1][0], self.waypoints[i + 1][1]);
            let dir = q - p;
            dir.y.atan2(dir.x)
        };
        let mut yaw = seg_yaw(seg);
        // Blend across corners within the smoothing window.
        let half = 0.5 * CORNER_SMOOTHING_SECS * self.speed;
        let into_seg = d - cum;
        let remaining = len - into_seg;
        if seg + 1 < lengths.len() && remaining < half {
            let alpha = 0.5 * (1.0 - remaining / half);
            yaw = blend_angle(seg_yaw(seg), seg_yaw(seg + 1), alpha);
        } else if seg > 0 && into_seg < half {
            let alpha = 0.5 * (1.0 + into_seg / half);
            yaw = blend_angle(seg_yaw(seg - 1), seg_yaw(seg), alpha);
        }
        Pose::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
            Vector3::new(pos.x, pos.y, 0.0),
        )
    }
}

fn blend_angle(a: f64, b: f64, alpha: f64) -> f64 {
    let mut diff = b - a;
    while diff > std::f64::consts::PI {
        diff -= 2.0 * std::f64::consts::PI;
    }
    while diff < -std::f64::consts::PI {
        diff += 2.0 * std::f64::consts::PI;
    }
    a + diff * alpha
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub loss_probability: f64,
    pub latency: f64,
    pub jitter: f64,
    /// 1-based uplink send indexes dropped exactly once each.
    pub scripted_drops: Vec<u64>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { loss_probability: 0.0, latency: 0.0, jitter: 0.0, scripted_drops: Vec::new() }
    }
}

/// A deterministic client-server link: the scripted loss pattern applies
/// to the uplink; the downlink shares latency but not loss.
pub fn scripted_channel(cfg: &NetworkConfig, seed: u64) -> SimLink {
    let up = LinkConfig {
        loss_probability: cfg.loss_probability,
        latency: cfg.latency,
        jitter: cfg.jitter,
        scripted_drops: cfg.scripted_drops.clone(),
    };
    let down = LinkConfig {
        loss_probability: cfg.loss_probability,
        latency: cfg.latency,
        jitter: cfg.jitter,
        scripted_drops: Vec::new(),
    };
    SimLink::new(seed, up, down)
}
