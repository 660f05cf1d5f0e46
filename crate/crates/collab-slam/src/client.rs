//! The per-camera client agent: frame tracking against a bounded local
//! map, keyframe creation, delta message generation, augmentation intake,
//! and monocular initialization.
//!
//! The client never blocks on the network: it produces outgoing
//! `WireMessage`s and consumes decoded server messages, leaving transport
//! to the caller.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{Vector3, Vector6};
use thiserror::Error;

use crate::geom::{unproject_ray, CameraIntrinsics, Pose};
use crate::map::{
    ElementId, IdGenerator, Keyframe, Landmark, Observation, Signature, DESCRIPTOR_LEN,
};
use crate::optim::{
    local_bundle_adjust, reproj_jacobians, reproj_residual, retract, BAObservation, BAProblem,
};
use crate::protocol::{
    Control, WireFeature, WireKeyframe, WireLandmark, WireMessage, WireObservation,
};

#[derive(Debug, Error, PartialEq)]
pub enum ClientError {
    #[error("tracking lost: {inliers} inliers below minimum {min}")]
    TrackingLost { inliers: usize, min: usize },
    #[error("message for unknown session {0}")]
    UnknownSession(u32),
}

/// One detected frame feature. `depth` is -1 for monocular cameras; the
/// world tag is the simulated match oracle and signature element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feature {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub tag: u64,
    pub descriptor: [u8; DESCRIPTOR_LEN],
    pub in_signature: bool,
}

/// All features extracted from one frame.
#[derive(Debug, Clone)]
pub struct FrameObservation {
    pub timestamp: f64,
    pub camera_id: u32,
    pub features: Vec<Feature>,
    pub(crate) true_world_from_cam: Pose,
}

impl FrameObservation {
    /// Ground truth for evaluation only; tracking and mapping must not
    /// read this.
    pub fn ground_truth(&self) -> Pose {
        self.true_world_from_cam
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchingMode {
    /// Exact world-tag equality (default simulation oracle).
    ExactTag,
    /// Hamming distance over the 256-bit descriptor.
    Hamming { max_distance: u32 },
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub client_id: u32,
    pub camera_id: u32,
    pub intrinsics: CameraIntrinsics,
    pub depth_camera: bool,
    /// Local map window size W.
    pub window_size: usize,
    /// Cap on augmented landmarks retained.
    pub augment_cap: usize,
    pub min_inliers: usize,
    pub keyframe_tracked_ratio: f64,
    pub keyframe_distance: f64,
    pub keyframe_yaw: f64,
    pub reproj_inlier_px: f64,
    pub matching: MatchingMode,
}

impl ClientConfig {
    pub fn new(client_id: u32) -> Self {
        Self {
            client_id,
            camera_id: client_id,
            intrinsics: CameraIntrinsics::default(),
            depth_camera: true,
            window_size: 12,
            augment_cap: 2000,
            min_inliers: 15,
            keyframe_tracked_ratio: 0.7,
            keyframe_distance: 0.5,
            keyframe_yaw: 15f64.to_radians(),
            reproj_inlier_px: 4.0,
            matching: MatchingMode::ExactTag,
        }
    }
}

#[derive(Debug, Clone)]
struct LocalLandmark {
    landmark: Landmark,
    /// Received from the server rather than created here.
    augmented: bool,
    /// Frame counter of the last successful match, for LRU eviction of
    /// augmented landmarks.
    last_matched: u64,
    /// Local refinement pending transmission.
    dirty: bool,
}

/// Bounded working set: at most W keyframes plus their landmarks and a
/// capped augmentation set.
#[derive(Debug, Default, Clone)]
pub struct LocalMap {
    window: VecDeque<ElementId>,
    keyframes: BTreeMap<ElementId, Keyframe>,
    landmarks: BTreeMap<ElementId, LocalLandmark>,
}

impl LocalMap {
    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn landmark_count(&self) -> usize {
        self.landmarks.len()
    }

    pub fn augmented_count(&self) -> usize {
        self.landmarks.values().filter(|l| l.augmented).count()
    }

    pub fn keyframe(&self, id: &ElementId) -> Option<&Keyframe> {
        self.keyframes.get(id)
    }

    pub fn landmark_position(&self, id: &ElementId) -> Option<Vector3<f64>> {
        self.landmarks.get(id).map(|l| l.landmark.position_w)
    }

    fn window_landmark_count(&self) -> usize {
        self.landmarks.values().filter(|l| !l.augmented).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientPhase {
    /// Monocular client buffering frames until place recognition succeeds.
    AwaitingInitialization,
    Tracking,
}

/// Outcome of processing one frame.
#[derive(Debug, Clone)]
pub struct FrameResult {
    pub pose: Option<Pose>,
    pub inliers: usize,
    pub keyframe_created: bool,
    pub tracking_lost: bool,
    pub messages: Vec<WireMessage>,
}

pub struct Client {
    pub cfg: ClientConfig,
    session_id: u32,
    ids: IdGenerator,
    phase: ClientPhase,
    local: LocalMap,
    map_id: u64,
    current_pose: Pose,
    last_keyframe_pose: Option<Pose>,
    last_keyframe_id: Option<ElementId>,
    /// Raw features of the previous keyframe, kept for monocular
    /// two-view triangulation of not-yet-mapped points.
    last_keyframe_raw: Vec<Feature>,
    frame_counter: u64,
    session_started: bool,
    // Last transmitted state, for delta generation. Entries are dropped
    // when their element leaves the window.
    sent_keyframes: BTreeMap<ElementId, Pose>,
    sent_landmarks: BTreeMap<ElementId, Vector3<f64>>,
    dirty_prunes: Vec<(crate::map::ElementKind, ElementId)>,
    pending_update: bool,
}

impl Client {
    pub fn new(cfg: ClientConfig) -> Self {
        let phase = if cfg.depth_camera {
            ClientPhase::Tracking
        } else {
            ClientPhase::AwaitingInitialization
        };
        let client_id = cfg.client_id;
        Self {
            cfg,
            session_id: 1,
            ids: IdGenerator::new(client_id, 1),
            phase,
            local: LocalMap::default(),
            map_id: 0,
            current_pose: Pose::identity(),
            last_keyframe_pose: None,
            last_keyframe_id: None,
            last_keyframe_raw: Vec::new(),
            frame_counter: 0,
            session_started: false,
            sent_keyframes: BTreeMap::new(),
            sent_landmarks: BTreeMap::new(),
            dirty_prunes: Vec::new(),
            pending_update: false,
        }
    }

    pub fn session_id(&self) -> u32 {
        self.session_id
    }

    pub fn map_id(&self) -> u64 {
        self.map_id
    }

    pub fn phase(&self) -> ClientPhase {
        self.phase
    }

    pub fn current_pose(&self) -> Pose {
        self.current_pose
    }

    pub fn local_map(&self) -> &LocalMap {
        &self.local
    }

    /// (window keyframes, window landmarks, augmented landmarks) for the
    /// bounded-memory audit.
    pub fn memory_counts(&self) -> (usize, usize, usize) {
        (
            self.local.window_len(),
            self.local.window_landmark_count(),
            self.local.augmented_count(),
        )
    }

    /// Starts a fresh session with a new map origin at the current base
    /// pose; called on tracking loss.
    pub fn start_new_session(&mut self) {
        self.session_id += 1;
        self.ids = IdGenerator::new(self.cfg.client_id, self.session_id);
        self.local = LocalMap::default();
        self.map_id = 0;
        self.current_pose = Pose::identity();
        self.last_keyframe_pose = None;
        self.last_keyframe_id = None;
        self.last_keyframe_raw.clear();
        self.session_started = false;
        self.sent_keyframes.clear();
        self.sent_landmarks.clear();
        self.dirty_prunes.clear();
        self.pending_update = false;
        if !self.cfg.depth_camera {
            self.phase = ClientPhase::AwaitingInitialization;
        }
    }

    fn matches_feature(&self, lm: &Landmark, f: &Feature) -> bool {
        match self.cfg.matching {
            MatchingMode::ExactTag => lm.tag() == f.tag,
            MatchingMode::Hamming { max_distance } => {
                hamming(&lm.descriptor, &f.descriptor) <= max_distance
            }
        }
    }

    fn match_features<'a>(&self, features: &'a [Feature]) -> Vec<(&'a Feature, ElementId, Vector3<f64>)> {
        // Tag-indexed lookup keeps matching linear; Hamming mode scans.
        let mut by_tag: BTreeMap<u64, ElementId> = BTreeMap::new();
        if self.cfg.matching == MatchingMode::ExactTag {
            for (id, l) in &self.local.landmarks {
                by_tag.insert(l.landmark.tag(), *id);
            }
        }
        let mut out = Vec::new();
        for f in features {
            let found = match self.cfg.matching {
                MatchingMode::ExactTag => by_tag.get(&f.tag).copied(),
                MatchingMode::Hamming { .. } => self
                    .local
                    .landmarks
                    .iter()
                    .find(|(_, l)| self.matches_feature(&l.landmark, f))
                    .map(|(id, _)| *id),
            };
            if let Some(id) = found {
                out.push((f, id, self.local.landmarks[&id].landmark.position_w));
            }
        }
        out
    }

    /// Estimates the frame pose by minimizing reprojection (+depth) error
    /// of matched landmarks starting from `prior`.
    pub fn track_frame(
        &mut self,
        frame: &FrameObservation,
        prior: &Pose,
    ) -> Result<(Pose, usize), ClientError> {
        self.frame_counter += 1;
        let matches = self.match_features(&frame.features);
        if matches.len() < self.cfg.min_inliers {
            return Err(ClientError::TrackingLost {
                inliers: matches.len(),
                min: self.cfg.min_inliers,
            });
        }
        let pose = solve_pose(&self.cfg.intrinsics, &matches, prior);
        let cam_from_world = pose.inverse();
        let mut inliers = 0;
        for (f, _, pos) in &matches {
            let p = cam_from_world.transform_point(pos);
            if p.z <= 1e-6 {
                continue;
            }
            let u = self.cfg.intrinsics.fx * p.x / p.z + self.cfg.intrinsics.cx;
            let v = self.cfg.intrinsics.fy * p.y / p.z + self.cfg.intrinsics.cy;
            let err = ((u - f.u).powi(2) + (v - f.v).powi(2)).sqrt();
            if err < self.cfg.reproj_inlier_px {
                inliers += 1;
            }
        }
        if inliers < self.cfg.min_inliers {
            return Err(ClientError::TrackingLost { inliers, min: self.cfg.min_inliers });
        }
        let frame_no = self.frame_counter;
        for (_, id, _) in &matches {
            if let Some(l) = self.local.landmarks.get_mut(id) {
                l.last_matched = frame_no;
            }
        }
        self.current_pose = pose;
        Ok((pose, inliers))
    }

    fn keyframe_trigger(&self, matched_ratio: f64, pose: &Pose) -> bool {
        let Some(last) = self.last_keyframe_pose else {
            return true;
        };
        if matched_ratio < self.cfg.keyframe_tracked_ratio {
            return true;
        }
        let (angle, dist) = last.delta_to(pose);
        dist > self.cfg.keyframe_distance || angle > self.cfg.keyframe_yaw
    }

    /// Creates a keyframe when a trigger fires: low tracked ratio, enough
    /// distance, or enough rotation. Creates landmarks for unmatched
    /// features, runs windowed BA, and evicts beyond the window bound.
    pub fn maybe_create_keyframe(
        &mut self,
        frame: &FrameObservation,
        pose: &Pose,
    ) -> Option<ElementId> {
        let matches = self.match_features(&frame.features);
        let matched_ratio = if frame.features.is_empty() {
            1.0
        } else {
            matches.len() as f64 / frame.features.len() as f64
        };
        if !self.keyframe_trigger(matched_ratio, pose) {
            return None;
        }
        let kf_id = self.ids.next_keyframe_id();
        let matched_tags: BTreeSet<u64> = matches.iter().map(|(f, _, _)| f.tag).collect();
        let mut observations: Vec<Observation> = matches
            .iter()
            .map(|(f, id, _)| Observation { landmark: *id, u: f.u, v: f.v, depth: f.depth })
            .collect();

        // New landmarks from unmatched features.
        for f in &frame.features {
            if matched_tags.contains(&f.tag) {
                continue;
            }
            let position = if f.depth > 0.0 {
                // Backproject with the measured depth.
                let ray = unproject_ray(&self.cfg.intrinsics, f.u, f.v);
                Some(pose.transform_point(&(ray * f.depth)))
            } else {
                self.triangulate_with_last_keyframe(f, pose)
            };
            let Some(position) = position else { continue };
            let lm_id = self.ids.next_landmark_id();
            self.local.landmarks.insert(
                lm_id,
                LocalLandmark {
                    landmark: Landmark {
                        id: lm_id,
                        position_w: position,
                        descriptor: f.descriptor,
                        observing_keyframes: BTreeSet::new(),
                        last_updated_by: self.cfg.client_id,
                        map_id: self.map_id,
                    },
                    augmented: false,
                    last_matched: self.frame_counter,
                    dirty: true,
                },
            );
            observations.push(Observation { landmark: lm_id, u: f.u, v: f.v, depth: f.depth });
        }

        let signature: Signature =
            frame.features.iter().filter(|f| f.in_signature).map(|f| f.tag).collect();
        let kf = Keyframe {
            id: kf_id,
            timestamp: frame.timestamp,
            world_from_cam: *pose,
            intrinsics_ref: self.cfg.camera_id,
            observations: observations.clone(),
            signature,
            map_id: self.map_id,
            is_virtual: false,
        };
        for obs in &observations {
            if let Some(l) = self.local.landmarks.get_mut(&obs.landmark) {
                l.landmark.observing_keyframes.insert(kf_id);
                // Matched augmented landmarks join the window set and get
                // re-reported with this client as last updater.
                if l.augmented {
                    l.augmented = false;
                    l.landmark.last_updated_by = self.cfg.client_id;
                    l.dirty = true;
                }
            }
        }
        self.local.keyframes.insert(kf_id, kf);
        self.local.window.push_back(kf_id);
        self.last_keyframe_pose = Some(*pose);
        self.last_keyframe_id = Some(kf_id);
        self.last_keyframe_raw = frame.features.clone();

        self.run_window_ba();
        self.evict_beyond_window();
        self.current_pose = self.local.keyframes[&kf_id].world_from_cam;
        self.last_keyframe_pose = Some(self.current_pose);
        self.pending_update = true;
        Some(kf_id)
    }

    /// Monocular two-view creation: midpoint triangulation against the
    /// previous keyframe, accepted above 1 degree of parallax.
    fn triangulate_with_last_keyframe(&self, f: &Feature, pose: &Pose) -> Option<Vector3<f64>> {
        let last_id = self.last_keyframe_id?;
        let last = self.local.keyframes.get(&last_id)?;
        let prev_pose = last.world_from_cam;
        let prev_feature = self.last_keyframe_raw.iter().find(|p| p.tag == f.tag)?;
        let ray_a = (prev_pose.rotation()
            * unproject_ray(&self.cfg.intrinsics, prev_feature.u, prev_feature.v))
        .normalize();
        let ray_b = (pose.rotation() * unproject_ray(&self.cfg.intrinsics, f.u, f.v)).normalize();
        let parallax = ray_a.dot(&ray_b).clamp(-1.0, 1.0).acos();
        if parallax < 1f64.to_radians() {
            return None;
        }
        let origin_a = prev_pose.translation();
        let origin_b = pose.translation();
        triangulate_midpoint(&origin_a, &ray_a, &origin_b, &ray_b)
    }

    fn run_window_ba(&mut self) {
        if self.local.window.len() < 2 {
            return;
        }
        let mut problem = BAProblem {
            intrinsics: self.cfg.intrinsics,
            ..Default::default()
        };
        let window: BTreeSet<ElementId> = self.local.window.iter().copied().collect();
        for id in &window {
            let kf = &self.local.keyframes[id];
            problem.poses.insert(*id, kf.world_from_cam);
            for obs in &kf.observations {
                problem.observations.push(BAObservation {
                    keyframe: *id,
                    landmark: obs.landmark,
                    u: obs.u,
                    v: obs.v,
                    depth: obs.depth,
                });
            }
        }
        // Fix the window boundary (oldest keyframe) as gauge.
        problem.fixed.insert(*self.local.window.front().unwrap());
        // Only landmarks with enough support become variables; the rest
        // (including augmented ones observed once) stay fixed by leaving
        // them out of the problem.
        let mut support: BTreeMap<ElementId, (usize, bool)> = BTreeMap::new();
        for obs in &problem.observations {
            let e = support.entry(obs.landmark).or_default();
            e.0 += 1;
            e.1 |= obs.depth >= 0.0;
        }
        for (id, (n, depth)) in &support {
            if *n >= 2 || *depth {
                problem.landmarks.insert(*id, self.local.landmarks[id].landmark.position_w);
            }
        }
        problem.observations.retain(|o| problem.landmarks.contains_key(&o.landmark));
        if local_bundle_adjust(&mut problem, 10, 1e-10).is_err() {
            return;
        }
        for (id, pose) in &problem.poses {
            self.local.keyframes.get_mut(id).unwrap().world_from_cam = *pose;
        }
        for (id, pos) in &problem.landmarks {
            let l = self.local.landmarks.get_mut(id).unwrap();
            if (l.landmark.position_w - pos).norm() > 1e-12 {
                l.landmark.position_w = *pos;
                l.dirty = true;
            }
        }
    }

    fn evict_beyond_window(&mut self) {
        while self.local.window.len() > self.cfg.window_size {
            let old = self.local.window.pop_front().unwrap();
            let kf = self.local.keyframes.remove(&old).unwrap();
            self.sent_keyframes.remove(&old);
            for obs in &kf.observations {
                let drop = match self.local.landmarks.get_mut(&obs.landmark) {
                    Some(l) => {
                        l.landmark.observing_keyframes.remove(&old);
                        l.landmark.observing_keyframes.is_empty() && !l.augmented
                    }
                    None => false,
                };
                if drop {
                    self.local.landmarks.remove(&obs.landmark);
                    self.sent_landmarks.remove(&obs.landmark);
                }
            }
        }
        // Augmented set LRU bound.
        let mut augmented: Vec<(u64, ElementId)> = self
            .local
            .landmarks
            .iter()
            .filter(|(_, l)| l.augmented)
            .map(|(id, l)| (l.last_matched, *id))
            .collect();
        if augmented.len() > self.cfg.augment_cap {
            augmented.sort_unstable();
            let excess = augmented.len() - self.cfg.augment_cap;
            for (_, id) in augmented.into_iter().take(excess) {
                self.local.landmarks.remove(&id);
            }
        }
    }

    /// Delta message since the last send. New keyframes travel in full,
    /// previously sent ones pose-only; changed landmarks travel in full.
    /// Returns nothing when no state changed.
    pub fn build_update_message(&mut self) -> Vec<WireMessage> {
        let mut out = Vec::new();
        if !self.pending_update && self.dirty_prunes.is_empty() {
            return out;
        }
        if !self.session_started {
            let mut start = WireMessage::new(
                self.cfg.client_id,
                self.session_id,
                Control::SessionStart { base_pose: Pose::identity() },
            );
            start.map_id = self.map_id;
            out.push(start);
            self.session_started = true;
        }
        let mut msg = WireMessage::new(self.cfg.client_id, self.session_id, Control::MapUpdate);
        msg.map_id = self.map_id;
        for id in &self.local.window {
            let kf = &self.local.keyframes[id];
            match self.sent_keyframes.get(id) {
                None => {
                    msg.keyframes.push(WireKeyframe {
                        id: *id,
                        timestamp: kf.timestamp,
                        world_from_cam: kf.world_from_cam,
                        intrinsics_ref: kf.intrinsics_ref,
                        is_virtual: false,
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
                    });
                }
                Some(sent_pose) if !sent_pose.approx_eq(&kf.world_from_cam, 1e-12) => {
                    msg.keyframes.push(WireKeyframe {
                        id: *id,
                        timestamp: kf.timestamp,
                        world_from_cam: kf.world_from_cam,
                        intrinsics_ref: kf.intrinsics_ref,
                        is_virtual: false,
                        pose_only: true,
                        observations: Vec::new(),
                        signature: Signature::new(),
                    });
                }
                Some(_) => {}
            }
        }
        for (id, l) in &self.local.landmarks {
            if l.augmented {
                continue;
            }
            let changed = match self.sent_landmarks.get(id) {
                None => true,
                Some(p) => l.dirty && (l.landmark.position_w - p).norm() > 1e-12,
            };
            if changed {
                msg.landmarks.push(WireLandmark {
                    id: *id,
                    position_w: [
                        l.landmark.position_w.x as f32,
                        l.landmark.position_w.y as f32,
                        l.landmark.position_w.z as f32,
                    ],
                    descriptor: l.landmark.descriptor,
                    observing_keyframes: l.landmark.observing_keyframes.iter().copied().collect(),
                    last_updated_by: self.cfg.client_id,
                });
            }
        }
        msg.pruned = std::mem::take(&mut self.dirty_prunes);
        if !msg.keyframes.is_empty() || !msg.landmarks.is_empty() || !msg.pruned.is_empty() {
            for kf in &msg.keyframes {
                self.sent_keyframes.insert(kf.id, kf.world_from_cam);
            }
            for lm in &msg.landmarks {
                self.sent_landmarks.insert(lm.id, lm.position());
                self.local.landmarks.get_mut(&lm.id).unwrap().dirty = false;
            }
            out.push(msg);
        }
        self.pending_update = false;
        out
    }

    /// Applies a server-to-client message: augmentation, local refresh
    /// after server-side optimization, or place recognition response.
    pub fn apply_server_message(&mut self, m: &WireMessage) -> Result<(), ClientError> {
        if m.session_id != self.session_id {
            return Err(ClientError::UnknownSession(m.session_id));
        }
        match &m.control {
            Control::Augment => {
                if m.map_id != 0 {
                    self.map_id = m.map_id;
                }
                for lm in &m.landmarks {
                    if self.local.landmarks.contains_key(&lm.id) {
                        continue; // already known, window copy wins
                    }
                    self.local.landmarks.insert(
                        lm.id,
                        LocalLandmark {
                            landmark: Landmark {
                                id: lm.id,
                                position_w: lm.position(),
                                descriptor: lm.descriptor,
                                observing_keyframes: BTreeSet::new(),
                                last_updated_by: lm.last_updated_by,
                                map_id: m.map_id,
                            },
                            augmented: true,
                            last_matched: self.frame_counter,
                            dirty: false,
                        },
                    );
                }
                self.evict_beyond_window();
            }
            Control::LocalRefresh { new_from_old } => {
                if m.map_id != 0 {
                    self.map_id = m.map_id;
                }
                // Rebase the whole local map first; the precise per-keyframe
                // poses below then overwrite the bulk correction.
                for local in self.local.keyframes.values_mut() {
                    local.world_from_cam = new_from_old.compose(&local.world_from_cam);
                }
                for pose in self.sent_keyframes.values_mut() {
                    *pose = new_from_old.compose(pose);
                }
                for local in self.local.landmarks.values_mut() {
                    local.landmark.position_w =
                        new_from_old.transform_point(&local.landmark.position_w);
                }
                for pos in self.sent_landmarks.values_mut() {
                    *pos = new_from_old.transform_point(pos);
                }
                for kf in &m.keyframes {
                    if let Some(local) = self.local.keyframes.get_mut(&kf.id) {
                        local.world_from_cam = kf.world_from_cam;
                        self.sent_keyframes.insert(kf.id, kf.world_from_cam);
                    }
                }
                for lm in &m.landmarks {
                    if let Some(local) = self.local.landmarks.get_mut(&lm.id) {
                        local.landmark.position_w = lm.position();
                        self.sent_landmarks.insert(lm.id, lm.position());
                    }
                }
                // Rebase in-flight odometry onto the updated coordinates.
                self.current_pose = new_from_old.compose(&self.current_pose);
                if let Some(p) = self.last_keyframe_pose {
                    self.last_keyframe_pose = Some(new_from_old.compose(&p));
                }
            }
            Control::PlaceRecResponse { success, world_from_cam } => {
                if self.phase == ClientPhase::AwaitingInitialization && *success {
                    self.map_id = m.map_id;
                    self.current_pose = *world_from_cam;
                    self.phase = ClientPhase::Tracking;
                    for lm in &m.landmarks {
                        self.local.landmarks.insert(
                            lm.id,
                            LocalLandmark {
                                landmark: Landmark {
                                    id: lm.id,
                                    position_w: lm.position(),
                                    descriptor: lm.descriptor,
                                    observing_keyframes: BTreeSet::new(),
                                    last_updated_by: lm.last_updated_by,
                                    map_id: m.map_id,
                                },
                                augmented: true,
                                last_matched: self.frame_counter,
                                dirty: false,
                            },
                        );
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Place recognition request carrying the raw frame features; sent
    /// only by uninitialized monocular clients.
    pub fn monocular_initialize(&self, frame: &FrameObservation) -> Option<WireMessage> {
        if self.cfg.depth_camera || self.phase != ClientPhase::AwaitingInitialization {
            return None;
        }
        let features = frame
            .features
            .iter()
            .map(|f| WireFeature {
                u: f.u as f32,
                v: f.v as f32,
                depth: f.depth as f32,
                tag: if f.in_signature { f.tag } else { 0 },
                descriptor: f.descriptor,
            })
            .collect();
        Some(WireMessage::new(
            self.cfg.client_id,
            self.session_id,
            Control::PlaceRecRequest { timestamp: frame.timestamp, features },
        ))
    }

    /// Top-level per-frame driver: tracks, maybe creates a keyframe, and
    /// returns outgoing messages. `odom_prior` is the camera-frame motion
    /// since the last frame (prev_from_cur).
    pub fn process_frame(&mut self, frame: &FrameObservation, odom_prior: &Pose) -> FrameResult {
        let mut result = FrameResult {
            pose: None,
            inliers: 0,
            keyframe_created: false,
            tracking_lost: false,
            messages: Vec::new(),
        };
        if self.phase == ClientPhase::AwaitingInitialization {
            if let Some(req) = self.monocular_initialize(frame) {
                result.messages.push(req);
            }
            return result;
        }
        let prior = self.current_pose.compose(odom_prior);
        if self.local.window.is_empty() {
            if frame.features.len() < self.cfg.min_inliers {
                // Not enough structure to anchor a session; stay idle.
                return result;
            }
            // Session bootstrap: adopt the prior and map the first frame.
            self.frame_counter += 1;
            self.current_pose = prior;
            if let Some(kf) = self.maybe_create_keyframe(frame, &prior) {
                let _ = kf;
                result.keyframe_created = true;
                result.messages.extend(self.build_update_message());
            }
            result.pose = Some(self.current_pose);
            return result;
        }
        match self.track_frame(frame, &prior) {
            Ok((pose, inliers)) => {
                result.pose = Some(pose);
                result.inliers = inliers;
                if self.maybe_create_keyframe(frame, &pose).is_some() {
                    result.keyframe_created = true;
                    result.messages.extend(self.build_update_message());
                }
            }
            Err(ClientError::TrackingLost { .. }) => {
                result.tracking_lost = true;
                self.start_new_session();
            }
            Err(_) => unreachable!(),
        }
        result
    }
}

fn hamming(a: &[u8; DESCRIPTOR_LEN], b: &[u8; DESCRIPTOR_LEN]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Single-pose refinement against fixed landmarks, Levenberg-Marquardt on
/// reprojection (+depth) residuals.
fn solve_pose(
    k: &CameraIntrinsics,
    matches: &[(&Feature, ElementId, Vector3<f64>)],
    prior: &Pose,
) -> Pose {
    let mut pose = *prior;
    let obs: Vec<(BAObservation, Vector3<f64>)> = matches
        .iter()
        .map(|(f, id, pos)| {
            (
                BAObservation { keyframe: *id, landmark: *id, u: f.u, v: f.v, depth: f.depth },
                *pos,
            )
        })
        .collect();
    let cost = |p: &Pose| -> f64 {
        obs.iter()
            .map(|(o, pos)| match reproj_residual(k, p, pos, o) {
                Some(r) => r.norm_squared(),
                None => 1e6,
            })
            .sum()
    };
    let mut current_cost = cost(&pose);
    let mut lambda = 1e-4;
    for _ in 0..20 {
        let mut h = nalgebra::Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (o, pos) in &obs {
            let (Some(r), Some((j_pose, _))) =
                (reproj_residual(k, &pose, pos, o), reproj_jacobians(k, &pose, pos, o))
            else {
                continue;
            };
            h += j_pose.transpose() * j_pose;
            g += j_pose.transpose() * r;
        }
        let mut accepted = false;
        for _ in 0..6 {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = chol.solve(&(-g));
            let candidate = retract(&pose, &delta);
            let c = cost(&candidate);
            if c < current_cost {
                pose = candidate;
                current_cost = c;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if delta.norm() < 1e-12 {
                    return pose;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    pose
}

fn triangulate_midpoint(
    origin_a: &Vector3<f64>,
    dir_a: &Vector3<f64>,
    origin_b: &Vector3<f64>,
    dir_b: &Vector3<f64>,
) -> Option<Vector3<f64>> {
    // Closest points on the two rays; midpoint is the estimate.
    let w0 = origin_a - origin_b;
    let a = dir_a.dot(dir_a);
    let b = dir_a.dot(dir_b);
    let c = dir_b.dot(dir_b);
    let d = dir_a.dot(&w0);
    let e = dir_b.dot(&w0);
    let denom = a * c - b * b;
    if denom.abs() < 1e-12 {
        return None;
    }
    let s = (b * e - c * d) / denom;
    let t = (a * e - b * d) / denom;
    if s <= 0.0 || t <= 0.0 {
        return None; // behind either camera
    }
    Some(0.5 * ((origin_a + dir_a * s) + (origin_b + dir_b * t)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use crate::simworld::{
        forward_camera_mount, generate_world, observe, NoiseModel, WorldConfig,
    };
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn world_and_client() -> (crate::simworld::WorldModel, Client) {
        let world = generate_world(&WorldConfig::default(), 11);
        let client = Client::new(ClientConfig::new(1));
        (world, client)
    }

    fn cam_pose(x: f64, y: f64, yaw: f64) -> Pose {
        let base = Pose::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
            Vector3::new(x, y, 0.0),
        );
        base.compose(&forward_camera_mount(1.2))
    }

    fn frame_at(
        world: &crate::simworld::WorldModel,
        client: &Client,
        pose: &Pose,
        noise: &NoiseModel,
        rng: &mut ChaCha8Rng,
        t: f64,
    ) -> FrameObservation {
        observe(world, pose, &client.cfg.intrinsics, noise, t, client.cfg.camera_id, client.cfg.depth_camera, rng)
    }

    #[test]
    fn track_noiseless_recovers_pose() {
        let (world, mut client) = world_and_client();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = NoiseModel::noiseless();
        let p0 = cam_pose(10.0, 15.0, 0.0);
        let f0 = frame_at(&world, &client, &p0, &noise, &mut rng, 0.0);
        client.process_frame(&f0, &p0);
        // Perturbed prior; exact features: tracking should land on truth
        // relative to the first keyframe (here: world frame since prior
        // equals truth at bootstrap).
        let p1 = cam_pose(10.3, 15.0, 0.05);
        let f1 = frame_at(&world, &client, &p1, &noise, &mut rng, 0.1);
        let prior = p0; // stale prior, ~0.3 m off
        let (pose, inliers) = client.track_frame(&f1, &prior).unwrap();
        let (ang, dist) = pose.delta_to(&p1);
        assert!(dist < 1e-6 && ang < 1e-7, "dist {dist} ang {ang}");
        assert!(inliers >= client.cfg.min_inliers);
    }

    #[test]
    fn track_no_matches_is_lost() {
        let (world, mut client) = world_and_client();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = NoiseModel::noiseless();
        let p0 = cam_pose(10.0, 15.0, 0.0);
        let f0 = frame_at(&world, &client, &p0, &noise, &mut rng, 0.0);
        client.process_frame(&f0, &Pose::identity());
        let empty = FrameObservation {
            timestamp: 1.0,
            camera_id: 1,
            features: Vec::new(),
            true_world_from_cam: p0,
        };
        assert!(matches!(
            client.track_frame(&empty, &p0),
            Err(ClientError::TrackingLost { inliers: 0, .. })
        ));
    }

    #[test]
    fn tracking_loss_starts_new_session() {
        let (world, mut client) = world_and_client();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = NoiseModel::noiseless();
        let p0 = cam_pose(10.0, 15.0, 0.0);
        let f0 = frame_at(&world, &client, &p0, &noise, &mut rng, 0.0);
        client.process_frame(&f0, &Pose::identity());
        assert_eq!(client.session_id(), 1);
        let blind = FrameObservation {
            timestamp: 1.0,
            camera_id: 1,
            features: Vec::new(),
            true_world_from_cam: p0,
        };
        let r = client.process_frame(&blind, &Pose::identity());
        assert!(r.tracking_lost);
        assert_eq!(client.session_id(), 2);
        // First pose of the new session is the identity (new map origin).
        let f2 = frame_at(&world, &client, &cam_pose(10.0, 15.0, 0.0), &noise, &mut rng, 1.1);
        let r2 = client.process_frame(&f2, &Pose::identity());
        assert!(r2.pose.unwrap().approx_eq(&Pose::identity(), 1e-9));
    }

    #[test]
    fn stationary_camera_creates_single_keyframe() {
        let (world, mut client) = world_and_client();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = NoiseModel::noiseless();
        let p = cam_pose(10.0, 15.0, 0.0);
        let mut created = 0;
        for i in 0..100 {
            let f = frame_at(&world, &client, &p, &noise, &mut rng, i as f64 * 0.1);
            let r = client.process_frame(&f, &Pose::identity());
            created += r.keyframe_created as usize;
        }
        assert_eq!(created, 1);
    }

    #[test]
    fn distance_trigger_creates_keyframe() {
        let (world, mut client) = world_and_client();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = NoiseModel::noiseless();
        let p0 = cam_pose(10.0, 15.0, 0.0);
        let f0 = frame_at(&world, &client, &p0, &noise, &mut rng, 0.0);
        client.process_frame(&f0, &Pose::identity());
        let p1 = cam_pose(10.6, 15.0, 0.0);
        let f1 = frame_at(&world, &client, &p1, &noise, &mut rng, 0.1);
        let odom = p0.inverse().compose(&p1);
        let r = client.process_frame(&f1, &odom);
        assert!(r.keyframe_created);
    }

    #[test]
    fn window_bound_maintained() {
        let (world, mut client) = world_and_client();
        client.cfg.window_size = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = NoiseModel::noiseless();
        let mut prev = cam_pose(5.0, 15.0, 0.0);
        let f = frame_at(&world, &client, &prev, &noise, &mut rng, 0.0);
        client.process_frame(&f, &Pose::identity());
        for i in 1..12 {
            let cur = cam_pose(5.0 + i as f64 * 0.6, 15.0, 0.0);
            let f = frame_at(&world, &client, &cur, &noise, &mut rng, i as f64 * 0.1);
            let odom = prev.inverse().compose(&cur);
            client.process_frame(&f, &odom);
            prev = cur;
            assert!(client.local_map().window_len() <= 4);
        }
        assert_eq!(client.local_map().window_len(), 4);
    }

    #[test]
    fn delta_messages_follow_delta_rule() {
        let (world, mut client) = world_and_client();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = NoiseModel::noiseless();
        let p0 = cam_pose(10.0, 15.0, 0.0);
        let f0 = frame_at(&world, &client, &p0, &noise, &mut rng, 0.0);
        let r0 = client.process_frame(&f0, &Pose::identity());
        // Session bootstrap: SESSION_START followed by a full first keyframe.
        assert_eq!(r0.messages.len(), 2);
        assert!(matches!(r0.messages[0].control, Control::SessionStart { .. }));
        let update = &r0.messages[1];
        assert_eq!(update.keyframes.len(), 1);
        assert!(!update.keyframes[0].pose_only);
        assert!(!update.landmarks.is_empty());
        // Move: second keyframe full, possibly first re-sent pose-only
        // after BA adjusts it.
        let p1 = cam_pose(10.6, 15.0, 0.0);
        let f1 = frame_at(&world, &client, &p1, &noise, &mut rng, 0.1);
        let odom = p0.inverse().compose(&p1);
        let r1 = client.process_frame(&f1, &odom);
        assert_eq!(r1.messages.len(), 1);
        let m = &r1.messages[0];
        let full: Vec<_> = m.keyframes.iter().filter(|k| !k.pose_only).collect();
        assert_eq!(full.len(), 1);
        for kf in m.keyframes.iter().filter(|k| k.pose_only) {
            assert!(kf.observations.is_empty());
        }
        // Nothing changed: no message.
        assert!(client.build_update_message().is_empty());
    }

    #[test]
    fn augment_deduplicates_known_landmarks() {
        let (world, mut client) = world_and_client();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = NoiseModel::noiseless();
        let p0 = cam_pose(10.0, 15.0, 0.0);
        let f0 = frame_at(&world, &client, &p0, &noise, &mut rng, 0.0);
        client.process_frame(&f0, &Pose::identity());
        let before = client.local_map().landmark_count();
        let own: Vec<ElementId> = client.local.landmarks.keys().copied().collect();
        let mut msg = WireMessage::new(1, 1, Control::Augment);
        msg.map_id = 3;
        for id in own.iter().take(5) {
            let l = &client.local.landmarks[id].landmark;
            msg.landmarks.push(WireLandmark {
                id: *id,
                position_w: [0.0, 0.0, 0.0],
                descriptor: l.descriptor,
                observing_keyframes: Vec::new(),
                last_updated_by: 9,
            });
        }
        client.apply_server_message(&msg).unwrap();
        assert_eq!(client.local_map().landmark_count(), before);
        assert_eq!(client.map_id(), 3);
    }

    #[test]
    fn local_refresh_identity_is_noop() {
        let (world, mut client) = world_and_client();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = NoiseModel::noiseless();
        let p0 = cam_pose(10.0, 15.0, 0.0);
        let f0 = frame_at(&world, &client, &p0, &noise, &mut rng, 0.0);
        client.process_frame(&f0, &Pose::identity());
        let pose_before = client.current_pose();
        let msg = WireMessage::new(1, 1, Control::LocalRefresh { new_from_old: Pose::identity() });
        client.apply_server_message(&msg).unwrap();
        assert!(client.current_pose().approx_eq(&pose_before, 1e-12));
    }

    #[test]
    fn stale_session_message_dropped() {
        let (_, mut client) = world_and_client();
        let msg = WireMessage::new(1, 99, Control::Augment);
        assert_eq!(client.apply_server_message(&msg), Err(ClientError::UnknownSession(99)));
    }

    #[test]
    fn depth_client_never_requests_place_recognition() {
        let (world, client) = world_and_client();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = frame_at(
            &world,
            &client,
            &cam_pose(10.0, 15.0, 0.0),
            &NoiseModel::noiseless(),
            &mut rng,
            0.0,
        );
        assert!(client.monocular_initialize(&f).is_none());
    }

    #[test]
    fn monocular_client_requests_until_initialized() {
        let world = generate_world(&WorldConfig::default(), 11);
        let mut cfg = ClientConfig::new(2);
        cfg.depth_camera = false;
        let mut client = Client::new(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = cam_pose(10.0, 15.0, 0.0);
        let f = frame_at(&world, &client, &p, &NoiseModel::noiseless(), &mut rng, 0.0);
        let r = client.process_frame(&f, &Pose::identity());
        assert!(r.pose.is_none());
        assert_eq!(r.messages.len(), 1);
        assert!(matches!(r.messages[0].control, Control::PlaceRecRequest { .. }));
        // Success response flips to tracking at the returned pose.
        let mut resp =
            WireMessage::new(2, 1, Control::PlaceRecResponse { success: true, world_from_cam: p });
        resp.map_id = 5;
        client.apply_server_message(&resp).unwrap();
        assert_eq!(client.phase(), ClientPhase::Tracking);
        assert_eq!(client.map_id(), 5);
        assert!(client.current_pose().approx_eq(&p, 1e-12));
    }

    #[test]
    fn bounded_memory_over_long_run() {
        let (world, mut client) = world_and_client();
        client.cfg.window_size = 6;
        client.cfg.augment_cap = 100;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = NoiseModel::noiseless();
        let mut prev = cam_pose(2.0, 15.0, 0.0);
        let f = frame_at(&world, &client, &prev, &noise, &mut rng, 0.0);
        client.process_frame(&f, &Pose::identity());
        let mut peak_window = 0usize;
        for i in 1..120 {
            let cur = cam_pose(2.0 + i as f64 * 0.35, 15.0, 0.0);
            let f = frame_at(&world, &client, &cur, &noise, &mut rng, i as f64 * 0.1);
            let odom = prev.inverse().compose(&cur);
            client.process_frame(&f, &odom);
            prev = cur;
            let (w, lms, aug) = client.memory_counts();
            peak_window = peak_window.max(w);
            assert!(w <= 6);
            assert!(aug <= 100);
            let _ = lms;
        }
        assert_eq!(peak_window, 6);
    }
}
