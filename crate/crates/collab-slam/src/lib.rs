//! Collaborative visual SLAM with a client-server architecture.
//!
//! Bounded-memory client agents track against a small local map and
//! synchronize delta updates with an edge server. The server maintains a
//! map database, detects loops, merges maps, runs pose graph optimization,
//! answers frustum-based landmark retrieval queries, and fuses rigid
//! multi-camera constraints. A deterministic simulator stands in for real
//! camera front-ends so every scenario is reproducible from a seed.
//!
//! See the `examples/` directory for one runnable example per major
//! capability, and the `collab-slam` binary for scenario runs over config
//! files.

pub mod channel;
pub mod client;
pub mod config;
pub mod eval;
pub mod geom;
pub mod grid;
pub mod map;
pub mod optim;
pub mod protocol;
pub mod server;
pub mod simworld;

pub use geom::{CameraIntrinsics, Pose, RigidExtrinsics};
pub use map::{ElementId, Keyframe, Landmark, MapRecord};
pub use protocol::{MsgType, WireMessage};
