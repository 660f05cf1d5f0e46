//! Scenario configuration: worlds, robots, camera rigs, trajectories,
//! noise, network behavior, and pass/fail assertions, loaded from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Pose;
use crate::simworld::{
    forward_camera_mount, rear_camera_mount, NetworkConfig, NoiseModel, TrajectorySpec,
    WorldConfig,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("toml parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("toml serialize error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// How a camera is mounted on its robot base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mount {
    Forward { height: f64 },
    Rear { height: f64 },
}

impl Mount {
    pub fn base_from_cam(&self) -> Pose {
        match self {
            Mount::Forward { height } => forward_camera_mount(*height),
            Mount::Rear { height } => rear_camera_mount(*height),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraConfig {
    pub client_id: u32,
    #[serde(default = "default_true")]
    pub depth: bool,
    pub mount: Mount,
    #[serde(default = "default_window")]
    pub window_size: usize,
    #[serde(default = "default_augment_cap")]
    pub augment_cap: usize,
    /// Simulated-time windows [start, end] during which this camera
    /// produces no features (sensor blackout).
    #[serde(default)]
    pub blind_intervals: Vec<[f64; 2]>,
}

fn default_true() -> bool {
    true
}
fn default_window() -> usize {
    12
}
fn default_augment_cap() -> usize {
    2000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobotConfig {
    pub name: String,
    pub trajectory: TrajectorySpec,
    pub cameras: Vec<CameraConfig>,
}

/// A rigid pair is declared by client ids; the extrinsics follow from the
/// two mount poses on the shared base.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RigidPairDecl {
    pub client_a: u32,
    pub client_b: u32,
}

/// Declarative pass/fail checks evaluated after a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Assertions {
    /// Final number of maps must not exceed this.
    pub max_maps: Option<usize>,
    /// Largest per-map keyframe ATE (meters) must stay below this.
    pub max_ate: Option<f64>,
    /// At least this many merges must have happened.
    pub min_merges: Option<u64>,
    /// Map audits must pass (defaults on).
    #[serde(default = "default_true")]
    pub audit: bool,
}

impl Default for Assertions {
    fn default() -> Self {
        Self { max_maps: None, max_ate: None, min_merges: None, audit: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    /// Simulated duration in seconds.
    pub duration: f64,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default = "default_true")]
    pub augment_exclusion: bool,
    pub robots: Vec<RobotConfig>,
    #[serde(default)]
    pub rigid_pairs: Vec<RigidPairDecl>,
    #[serde(default)]
    pub assertions: Assertions,
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.robots.is_empty() {
            return Err(ConfigError::Invalid("no robots declared".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for r in &self.robots {
            if r.trajectory.waypoints.len() < 2 {
                return Err(ConfigError::Invalid(format!(
                    "robot {} needs at least 2 waypoints",
                    r.name
                )));
            }
            if r.trajectory.speed <= 0.0 || r.trajectory.sample_rate_hz <= 0.0 {
                return Err(ConfigError::Invalid(format!(
                    "robot {} needs positive speed and sample rate",
                    r.name
                )));
            }
            for c in &r.cameras {
                if !ids.insert(c.client_id) {
                    return Err(ConfigError::Invalid(format!(
                        "duplicate client id {}",
                        c.client_id
                    )));
                }
            }
        }
        for p in &self.rigid_pairs {
            let on_same_robot = self.robots.iter().any(|r| {
                r.cameras.iter().any(|c| c.client_id == p.client_a)
                    && r.cameras.iter().any(|c| c.client_id == p.client_b)
            });
            if !on_same_robot {
                return Err(ConfigError::Invalid(format!(
                    "rigid pair {}/{} must share a robot",
                    p.client_a, p.client_b
                )));
            }
        }
        Ok(())
    }

    pub fn camera(&self, client_id: u32) -> Option<(&RobotConfig, &CameraConfig)> {
        for r in &self.robots {
            for c in &r.cameras {
                if c.client_id == client_id {
                    return Some((r, c));
                }
            }
        }
        None
    }

    /// Calibrated `a_from_b` for a declared rigid pair.
    pub fn rigid_extrinsics(&self, p: &RigidPairDecl) -> Option<Pose> {
        let (_, a) = self.camera(p.client_a)?;
        let (_, b) = self.camera(p.client_b)?;
        Some(a.mount.base_from_cam().inverse().compose(&b.mount.base_from_cam()))
    }
}

fn line(name: &str, waypoints: Vec<[f64; 2]>, speed: f64, offset: f64) -> TrajectorySpec {
    let _ = name;
    TrajectorySpec { waypoints, speed, sample_rate_hz: 10.0, start_offset: offset }
}

/// Two depth robots sweeping overlapping corridors; their sessions must
/// merge into a single map.
pub fn two_robot_merge(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        name: "two-robot-merge".into(),
        seed,
        duration: 30.0,
        world: WorldConfig::default(),
        noise: NoiseModel::noiseless(),
        network: NetworkConfig::default(),
        augment_exclusion: true,
        robots: vec![
            RobotConfig {
                name: "r1".into(),
                trajectory: line("r1", vec![[5.0, 14.0], [25.0, 14.0]], 0.8, 0.0),
                cameras: vec![CameraConfig {
                    client_id: 1,
                    depth: true,
                    mount: Mount::Forward { height: 1.2 },
                    window_size: 12,
                    augment_cap: 2000,
                    blind_intervals: vec![],
                }],
            },
            RobotConfig {
                name: "r2".into(),
                trajectory: line("r2", vec![[25.0, 16.0], [5.0, 16.0]], 0.8, 0.05),
                cameras: vec![CameraConfig {
                    client_id: 2,
                    depth: true,
                    mount: Mount::Forward { height: 1.2 },
                    window_size: 12,
                    augment_cap: 2000,
                    blind_intervals: vec![],
                }],
            },
        ],
        rigid_pairs: Vec::new(),
        assertions: Assertions {
            max_maps: Some(1),
            max_ate: Some(0.10),
            min_merges: Some(1),
            audit: true,
        },
    }
}

/// One robot with forward and rear cameras tied by a rigid pair; the two
/// views never overlap, so only the rigid constraint can merge them.
pub fn rigid_dual_camera(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        name: "rigid-dual-camera".into(),
        seed,
        duration: 30.0,
        world: WorldConfig::default(),
        noise: NoiseModel::noiseless(),
        network: NetworkConfig::default(),
        augment_exclusion: true,
        robots: vec![RobotConfig {
            name: "rig".into(),
            trajectory: line("rig", vec![[5.0, 15.0], [25.0, 15.0]], 0.8, 0.0),
            cameras: vec![
                CameraConfig {
                    client_id: 1,
                    depth: true,
                    mount: Mount::Forward { height: 1.2 },
                    window_size: 12,
                    augment_cap: 2000,
                    blind_intervals: vec![],
                },
                CameraConfig {
                    client_id: 2,
                    depth: true,
                    mount: Mount::Rear { height: 1.2 },
                    window_size: 12,
                    augment_cap: 2000,
                    blind_intervals: vec![],
                },
            ],
        }],
        rigid_pairs: vec![RigidPairDecl { client_a: 1, client_b: 2 }],
        assertions: Assertions {
            max_maps: Some(1),
            max_ate: Some(0.15),
            min_merges: Some(1),
            audit: true,
        },
    }
}

/// Eight depth clients on four robots crossing a shared arena.
pub fn eight_client_stress(seed: u64) -> ScenarioConfig {
    let mut robots = Vec::new();
    let lanes = [
        ([[5.0, 8.0], [45.0, 8.0]], 0.0),
        ([[45.0, 12.0], [5.0, 12.0]], 0.1),
        ([[5.0, 18.0], [45.0, 18.0]], 0.2),
        ([[45.0, 22.0], [5.0, 22.0]], 0.3),
    ];
    for (i, (wps, offset)) in lanes.iter().enumerate() {
        let base = (i * 2) as u32;
        robots.push(RobotConfig {
            name: format!("r{}", i + 1),
            trajectory: line("", wps.iter().map(|w| *w).collect(), 1.0, *offset),
            cameras: vec![
                CameraConfig {
                    client_id: base + 1,
                    depth: true,
                    mount: Mount::Forward { height: 1.2 },
                    window_size: 12,
                    augment_cap: 2000,
                    blind_intervals: vec![],
                },
                CameraConfig {
                    client_id: base + 2,
                    depth: true,
                    mount: Mount::Rear { height: 1.2 },
                    window_size: 12,
                    augment_cap: 2000,
                    blind_intervals: vec![],
                },
            ],
        });
    }
    let rigid_pairs = (0..4)
        .map(|i| RigidPairDecl { client_a: (i * 2 + 1) as u32, client_b: (i * 2 + 2) as u32 })
        .collect();
    ScenarioConfig {
        name: "eight-client-stress".into(),
        seed,
        duration: 40.0,
        world: WorldConfig {
            landmark_count: 6000,
            ..WorldConfig::default()
        },
        noise: NoiseModel::noiseless(),
        network: NetworkConfig::default(),
        augment_exclusion: true,
        robots,
        rigid_pairs,
        assertions: Assertions { max_maps: Some(3), max_ate: None, min_merges: None, audit: true },
    }
}

/// A depth robot maps a corridor; a monocular robot joins later through
/// place recognition.
pub fn monocular_join(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        name: "monocular-join".into(),
        seed,
        duration: 35.0,
        world: WorldConfig::default(),
        noise: NoiseModel::noiseless(),
        network: NetworkConfig::default(),
        augment_exclusion: true,
        robots: vec![
            RobotConfig {
                name: "mapper".into(),
                trajectory: line("", vec![[5.0, 15.0], [25.0, 15.0]], 0.8, 0.0),
                cameras: vec![CameraConfig {
                    client_id: 1,
                    depth: true,
                    mount: Mount::Forward { height: 1.2 },
                    window_size: 12,
                    augment_cap: 2000,
                    blind_intervals: vec![],
                }],
            },
            RobotConfig {
                name: "mono".into(),
                trajectory: line("", vec![[8.0, 15.0], [22.0, 15.0]], 0.8, 12.0),
                cameras: vec![CameraConfig {
                    client_id: 2,
                    depth: false,
                    mount: Mount::Forward { height: 1.2 },
                    window_size: 12,
                    augment_cap: 2000,
                    blind_intervals: vec![],
                }],
            },
        ],
        rigid_pairs: Vec::new(),
        assertions: Assertions {
            max_maps: Some(1),
            max_ate: Some(0.15),
            min_merges: None,
            audit: true,
        },
    }
}

/// Single robot over a lossy, delayed link; the reliability layer must
/// make the outcome identical to a lossless run.
pub fn lossy_link(seed: u64, loss_probability: f64) -> ScenarioConfig {
    ScenarioConfig {
        name: "lossy-link".into(),
        seed,
        duration: 30.0,
        world: WorldConfig::default(),
        noise: NoiseModel::noiseless(),
        network: NetworkConfig {
            loss_probability,
            latency: 0.02,
            jitter: 0.005,
            scripted_drops: Vec::new(),
        },
        augment_exclusion: true,
        robots: vec![RobotConfig {
            name: "solo".into(),
            trajectory: line("", vec![[5.0, 15.0], [25.0, 15.0]], 0.8, 0.0),
            cameras: vec![CameraConfig {
                client_id: 1,
                depth: true,
                mount: Mount::Forward { height: 1.2 },
                window_size: 12,
                augment_cap: 2000,
                blind_intervals: vec![],
            }],
        }],
        rigid_pairs: Vec::new(),
        assertions: Assertions { max_maps: Some(1), max_ate: Some(0.10), min_merges: None, audit: true },
    }
}
