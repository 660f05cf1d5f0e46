//! Edge-server side: the global map database, per-session intake of delta
//! updates, loop detection and geometric verification, map merging,
//! pose-graph optimization, landmark augmentation replies, rigid
//! multi-camera fusion, and place recognition.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::Instant;

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geom::{align_point_sets, interpolate, CameraIntrinsics, Pose};
use crate::grid::retrieve_in_view;
use crate::map::{transplant, ElementId, Keyframe, Landmark, MapError, MapRecord, Observation};
use crate::optim::{
    optimize_pose_graph, retract, EdgeKind, OptimError, PauseSet, PoseEdge, PoseGraph,
    RIGID_WEIGHT_FACTOR,
};
use crate::protocol::{Control, WireFeature, WireKeyframe, WireLandmark, WireMessage};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("no session registered for client {client_id} session {session_id}")]
    UnknownSession { client_id: u32, session_id: u32 },
    #[error("map error: {0}")]
    Map(#[from] MapError),
    #[error("optimization error: {0}")]
    Optim(#[from] OptimError),
}

/// A rigidly co-mounted camera pair. `a_from_b` is the pose of camera B
/// expressed in camera A's frame; `world_from_b = world_from_a * a_from_b`.
#[derive(Debug, Clone)]
pub struct RigidPairConfig {
    pub client_a: u32,
    pub client_b: u32,
    pub a_from_b: Pose,
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub intrinsics: CameraIntrinsics,
    pub cell_size: f64,
    /// Minimum Jaccard signature overlap to attempt verification.
    pub loop_score_threshold: f64,
    /// Candidates from the query's own session within this many keyframes
    /// are excluded from loop detection.
    pub loop_exclusion_window: u64,
    pub consensus_iterations: usize,
    pub consensus_radius: f64,
    pub consensus_min_inliers: usize,
    pub consensus_max_rms: f64,
    /// Place recognition inlier requirement.
    pub min_inliers: usize,
    pub reproj_inlier_px: f64,
    /// Rigid fusion fires when the observed pair transform diverges from
    /// calibration by more than this translation / rotation.
    pub rigid_divergence_trans: f64,
    pub rigid_divergence_rot: f64,
    /// Minimum keyframes between rigid fusions of the same pair.
    pub rigid_hysteresis: u64,
    /// Maximum timestamp bracket for virtual keyframe interpolation.
    pub virtual_bracket: f64,
    pub pgo_max_iters: usize,
    pub pgo_tol: f64,
    /// When false, augmentation replies skip the redundancy exclusions
    /// (own landmarks, unchanged resends); used to measure their value.
    pub augment_exclusion: bool,
    pub rigid_pairs: Vec<RigidPairConfig>,
    pub seed: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::default(),
            cell_size: crate::grid::DEFAULT_CELL_SIZE,
            loop_score_threshold: 0.30,
            loop_exclusion_window: 30,
            consensus_iterations: 200,
            consensus_radius: 0.10,
            consensus_min_inliers: 12,
            consensus_max_rms: 0.10,
            min_inliers: 15,
            reproj_inlier_px: 4.0,
            rigid_divergence_trans: 0.05,
            rigid_divergence_rot: 2f64.to_radians(),
            rigid_hysteresis: 10,
            virtual_bracket: 2.0,
            pgo_max_iters: 50,
            pgo_tol: 1e-12,
            augment_exclusion: true,
            rigid_pairs: Vec::new(),
            seed: 0,
        }
    }
}

/// Wall-clock accounting per operation category.
#[derive(Debug, Default, Clone)]
pub struct Timings {
    pub entries: BTreeMap<&'static str, (u64, f64)>,
}

impl Timings {
    pub fn record(&mut self, key: &'static str, secs: f64) {
        let e = self.entries.entry(key).or_default();
        e.0 += 1;
        e.1 += secs;
    }

    pub fn mean_ms(&self, key: &'static str) -> Option<f64> {
        self.entries.get(key).map(|(n, total)| 1e3 * total / (*n).max(1) as f64)
    }
}

#[derive(Debug, Clone)]
struct SessionState {
    map_id: u64,
    last_keyframe: Option<ElementId>,
    keyframe_count: u64,
}

#[derive(Debug, Default, Clone)]
struct RigidRuntime {
    keyframes_since_fusion: u64,
    virtual_counter: u64,
}

/// A message the server wants delivered to a specific client.
#[derive(Debug, Clone)]
pub struct Outgoing {
    pub client_id: u32,
    pub message: WireMessage,
}

pub struct Server {
    pub cfg: ServerConfig,
    maps: BTreeMap<u64, MapRecord>,
    edges: BTreeMap<u64, Vec<PoseEdge>>,
    sessions: BTreeMap<(u32, u32), SessionState>,
    next_map_id: u64,
    loop_queue: VecDeque<ElementId>,
    loop_processed: BTreeSet<ElementId>,
    pauses: PauseSet,
    backlog: BTreeMap<u64, Vec<WireMessage>>,
    augment_sent: BTreeMap<(u32, u32), BTreeMap<ElementId, Vector3<f64>>>,
    rigid_state: Vec<RigidRuntime>,
    merges: u64,
    peak_map_count: usize,
    /// One entry per merge, oldest first.
    pub merge_log: Vec<MergeEvent>,
    pub timings: Timings,
}

/// Record of a completed map merge, kept for post-run inspection.
#[derive(Debug, Clone)]
pub struct MergeEvent {
    pub absorbed_map: u64,
    pub into_map: u64,
    /// Non-virtual keyframes the absorbed map held at merge time.
    pub absorbed_keyframes: usize,
    /// (client, session) pairs owning keyframes in the absorbed map.
    pub absorbed_sessions: Vec<(u32, u32)>,
}

impl Server {
    pub fn new(cfg: ServerConfig) -> Self {
        let rigid_state = cfg
            .rigid_pairs
            .iter()
            .map(|_| RigidRuntime {
                // Allow the first fusion immediately.
                keyframes_since_fusion: cfg.rigid_hysteresis,
                virtual_counter: 0,
            })
            .collect();
        Self {
            cfg,
            maps: BTreeMap::new(),
            edges: BTreeMap::new(),
            sessions: BTreeMap::new(),
            next_map_id: 1,
            loop_queue: VecDeque::new(),
            loop_processed: BTreeSet::new(),
            pauses: PauseSet::default(),
            backlog: BTreeMap::new(),
            augment_sent: BTreeMap::new(),
            rigid_state,
            merges: 0,
            peak_map_count: 0,
            merge_log: Vec::new(),
            timings: Timings::default(),
        }
    }

    pub fn map_count(&self) -> usize {
        self.maps.len()
    }

    pub fn merge_count(&self) -> u64 {
        self.merges
    }

    pub fn maps(&self) -> &BTreeMap<u64, MapRecord> {
        &self.maps
    }

    pub fn map(&self, map_id: u64) -> Option<&MapRecord> {
        self.maps.get(&map_id)
    }

    /// Installs externally loaded maps (e.g. from a snapshot).
    pub fn adopt_maps(&mut self, maps: BTreeMap<u64, MapRecord>) {
        for (id, map) in maps {
            self.edges.entry(id).or_default();
            self.next_map_id = self.next_map_id.max(id + 1);
            self.maps.insert(id, map);
        }
    }

    pub fn session_map(&self, client_id: u32, session_id: u32) -> Option<u64> {
        self.sessions.get(&(client_id, session_id)).map(|s| s.map_id)
    }

    /// Full consistency audit over every map plus pause bookkeeping.
    pub fn audit(&self) -> Result<(), String> {
        for (id, map) in &self.maps {
            map.audit().map_err(|e| format!("map {id}: {e}"))?;
            if map.map_id != *id {
                return Err(format!("map {id} labeled {}", map.map_id));
            }
        }
        for s in self.sessions.values() {
            if !self.maps.contains_key(&s.map_id) {
                return Err(format!("session points at missing map {}", s.map_id));
            }
        }
        for (map_id, queue) in &self.backlog {
            if !queue.is_empty() && !self.pauses.is_paused(*map_id) {
                return Err(format!("backlog for unpaused map {map_id}"));
            }
        }
        Ok(())
    }

    /// Explicit pause: updates for this map are backlogged until release.
    pub fn pause_map(&mut self, map_id: u64) {
        self.pauses.pause(&[map_id]);
    }

    /// Releases a pause and applies backlogged updates in arrival order.
    pub fn release_map(&mut self, map_id: u64, now: f64) -> Result<Vec<Outgoing>, ServerError> {
        self.pauses.release(&[map_id]);
        let mut out = Vec::new();
        if self.pauses.is_paused(map_id) {
            return Ok(out);
        }
        let queued = self.backlog.remove(&map_id).unwrap_or_default();
        for msg in queued {
            out.extend(self.handle_message(&msg, now)?);
        }
        Ok(out)
    }

    pub fn handle_message(
        &mut self,
        msg: &WireMessage,
        now: f64,
    ) -> Result<Vec<Outgoing>, ServerError> {
        match &msg.control {
            Control::SessionStart { .. } => {
                self.register_session(msg.client_id, msg.session_id);
                Ok(Vec::new())
            }
            Control::MapUpdate => {
                let key = (msg.client_id, msg.session_id);
                let Some(state) = self.sessions.get(&key) else {
                    return Err(ServerError::UnknownSession {
                        client_id: msg.client_id,
                        session_id: msg.session_id,
                    });
                };
                let map_id = state.map_id;
                if self.pauses.is_paused(map_id) {
                    self.backlog.entry(map_id).or_default().push(msg.clone());
                    return Ok(Vec::new());
                }
                self.apply_update(msg, now)
            }
            Control::PlaceRecRequest { timestamp, features } => {
                Ok(self.handle_place_rec(msg, *timestamp, features))
            }
            _ => Ok(Vec::new()),
        }
    }

    fn register_session(&mut self, client_id: u32, session_id: u32) {
        let key = (client_id, session_id);
        if self.sessions.contains_key(&key) {
            return; // already joined a map through place recognition
        }
        let map_id = self.next_map_id;
        self.next_map_id += 1;
        self.maps.insert(map_id, MapRecord::with_cell_size(map_id, self.cfg.cell_size));
        self.edges.insert(map_id, Vec::new());
        self.sessions
            .insert(key, SessionState { map_id, last_keyframe: None, keyframe_count: 0 });
        self.peak_map_count = self.peak_map_count.max(self.maps.len());
    }

    fn apply_update(&mut self, msg: &WireMessage, now: f64) -> Result<Vec<Outgoing>, ServerError> {
        let key = (msg.client_id, msg.session_id);
        let map_id = self.sessions[&key].map_id;
        let mut new_keyframes: Vec<ElementId> = Vec::new();
        let mut latest_pose: Option<Pose> = None;

        let t0 = Instant::now();
        {
            let map = self.maps.get_mut(&map_id).unwrap();
            for wk in &msg.keyframes {
                if wk.pose_only {
                    if let Some(existing) = map.keyframes.get(&wk.id) {
                        let mut kf = existing.clone();
                        kf.world_from_cam = wk.world_from_cam;
                        map.upsert_keyframe(kf)?;
                    }
                    continue;
                }
                let fresh = !map.keyframes.contains_key(&wk.id);
                let kf = Keyframe {
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
                map.upsert_keyframe(kf)?;
                if fresh {
                    new_keyframes.push(wk.id);
                    latest_pose = Some(wk.world_from_cam);
                }
            }
            for wl in &msg.landmarks {
                let lm = Landmark {
                    id: wl.id,
                    position_w: wl.position(),
                    descriptor: wl.descriptor,
                    observing_keyframes: wl.observing_keyframes.iter().copied().collect(),
                    last_updated_by: wl.last_updated_by,
                    map_id,
                };
                map.upsert_landmark(lm)?;
            }
            if !msg.pruned.is_empty() {
                map.prune(&msg.pruned);
            }
        }
        self.timings.record("updating global map", t0.elapsed().as_secs_f64());

        // Bookkeeping: odometry edges between session keyframes adjacent
        // in sequence order, spliced so out-of-order arrival yields the
        // same chain.
        for kf_id in &new_keyframes {
            {
                let state = self.sessions.get_mut(&key).unwrap();
                state.keyframe_count += 1;
                if state.last_keyframe.map_or(true, |last| last.local_seq < kf_id.local_seq) {
                    state.last_keyframe = Some(*kf_id);
                }
            }
            let (pred, succ) = {
                let map = &self.maps[&map_id];
                let mut pred: Option<ElementId> = None;
                let mut succ: Option<ElementId> = None;
                for id in map.keyframes.keys() {
                    if id.client_id != kf_id.client_id
                        || id.session_id != kf_id.session_id
                        || id.local_seq >= 1_000_000_000
                        || id == kf_id
                    {
                        continue;
                    }
                    if id.local_seq < kf_id.local_seq {
                        if pred.map_or(true, |p| id.local_seq > p.local_seq) {
                            pred = Some(*id);
                        }
                    } else if succ.map_or(true, |s| id.local_seq < s.local_seq) {
                        succ = Some(*id);
                    }
                }
                (pred, succ)
            };
            let edges = self.edges.get_mut(&map_id).unwrap();
            if let (Some(p), Some(s)) = (pred, succ) {
                edges.retain(|e| {
                    !(e.kind == EdgeKind::Odometry && e.from == p && e.to == s)
                });
            }
            let map = &self.maps[&map_id];
            let mid_pose = map.keyframes[kf_id].world_from_cam;
            let mut new_edges = Vec::new();
            if let Some(p) = pred {
                let measured = map.keyframes[&p].world_from_cam.inverse().compose(&mid_pose);
                new_edges.push(PoseEdge {
                    from: p,
                    to: *kf_id,
                    measured,
                    weight: 1.0,
                    kind: EdgeKind::Odometry,
                });
            }
            if let Some(s) = succ {
                let measured = mid_pose.inverse().compose(&map.keyframes[&s].world_from_cam);
                new_edges.push(PoseEdge {
                    from: *kf_id,
                    to: s,
                    measured,
                    weight: 1.0,
                    kind: EdgeKind::Odometry,
                });
            }
            self.edges.get_mut(&map_id).unwrap().extend(new_edges);
            if self.loop_processed.insert(*kf_id) {
                self.loop_queue.push_back(*kf_id);
            }
        }

        let mut out = Vec::new();

        // Augmentation reply around the newest reported keyframe.
        if let Some(pose) = latest_pose {
            let t0 = Instant::now();
            let reply = self.augment_reply(msg.client_id, msg.session_id, &pose);
            self.timings.record("retrieving nearby landmarks", t0.elapsed().as_secs_f64());
            out.extend(reply);
        }

        // Rigid multi-camera constraints for each new keyframe.
        for kf_id in new_keyframes.clone() {
            out.extend(self.rigid_fusion(msg.client_id, kf_id, now)?);
        }

        // Loop detection over queued keyframes.
        while let Some(query) = self.loop_queue.pop_front() {
            out.extend(self.detect_and_close_loop(query)?);
        }
        Ok(out)
    }

    fn augment_reply(&mut self, client_id: u32, session_id: u32, pose: &Pose) -> Option<Outgoing> {
        let map_id = self.sessions[&(client_id, session_id)].map_id;
        let map = &self.maps[&map_id];
        let candidates = retrieve_in_view(map, &self.cfg.intrinsics, pose);
        let sent = self.augment_sent.entry((client_id, session_id)).or_default();
        let mut landmarks = Vec::new();
        for id in candidates {
            let lm = &map.landmarks[&id];
            if self.cfg.augment_exclusion {
                if lm.last_updated_by == client_id {
                    continue;
                }
                if sent.get(&id).is_some_and(|p| (p - lm.position_w).norm() <= 1e-9) {
                    continue;
                }
            }
            sent.insert(id, lm.position_w);
            landmarks.push(WireLandmark {
                id,
                position_w: [
                    lm.position_w.x as f32,
                    lm.position_w.y as f32,
                    lm.position_w.z as f32,
                ],
                descriptor: lm.descriptor,
                observing_keyframes: Vec::new(),
                last_updated_by: lm.last_updated_by,
            });
        }
        if landmarks.is_empty() {
            return None;
        }
        let mut reply = WireMessage::new(client_id, session_id, Control::Augment);
        reply.map_id = map_id;
        reply.landmarks = landmarks;
        Some(Outgoing { client_id, message: reply })
    }

    fn keyframe_map(&self, id: &ElementId) -> Option<u64> {
        self.maps
            .iter()
            .find(|(_, m)| m.keyframes.contains_key(id))
            .map(|(map_id, _)| *map_id)
    }

    /// Signature-based candidate search followed by 3D-3D consensus
    /// verification; on success either closes the loop in place or merges
    /// the two maps.
    fn detect_and_close_loop(&mut self, query: ElementId) -> Result<Vec<Outgoing>, ServerError> {
        let t0 = Instant::now();
        let candidate = self.best_loop_candidate(&query);
        self.timings.record("loop detection", t0.elapsed().as_secs_f64());
        let Some((candidate, _score)) = candidate else {
            return Ok(Vec::new());
        };
        let Some((dst_from_src, _inliers)) = self.verify_loop(&query, &candidate) else {
            return Ok(Vec::new());
        };
        let src_map = self.keyframe_map(&query).unwrap();
        let dst_map = self.keyframe_map(&candidate).unwrap();
        if src_map == dst_map {
            // Loop closure inside one map: constrain and re-optimize.
            let (q_pose, c_pose) = {
                let m = &self.maps[&src_map];
                (m.keyframes[&query].world_from_cam, m.keyframes[&candidate].world_from_cam)
            };
            let corrected_q = dst_from_src.compose(&q_pose);
            let measured = c_pose.inverse().compose(&corrected_q);
            self.edges.get_mut(&src_map).unwrap().push(PoseEdge {
                from: candidate,
                to: query,
                measured,
                weight: 1.0,
                kind: EdgeKind::Loop,
            });
            self.optimize_map(src_map)
        } else {
            self.merge_maps(src_map, dst_map, &dst_from_src, query, candidate)
        }
    }

    fn best_loop_candidate(&self, query: &ElementId) -> Option<(ElementId, f64)> {
        let src_map = self.keyframe_map(query)?;
        let q = &self.maps[&src_map].keyframes[query];
        if q.signature.len() < 3 {
            return None;
        }
        let mut best: Option<(ElementId, f64)> = None;
        for map in self.maps.values() {
            for (id, kf) in &map.keyframes {
                if id == query || kf.is_virtual {
                    continue;
                }
                if id.client_id == query.client_id
                    && id.session_id == query.session_id
                    && query.local_seq.abs_diff(id.local_seq) <= self.cfg.loop_exclusion_window
                {
                    continue;
                }
                let inter = q.signature.intersection(&kf.signature).count();
                if inter == 0 {
                    continue;
                }
                let union = q.signature.len() + kf.signature.len() - inter;
                let score = inter as f64 / union as f64;
                if score >= self.cfg.loop_score_threshold
                    && best.map_or(true, |(_, s)| score > s)
                {
                    best = Some((*id, score));
                }
            }
        }
        best
    }

    /// 3D-3D consensus alignment of landmarks co-observed (by tag) from
    /// the two keyframes. Returns the transform taking the query's map
    /// coordinates into the candidate's.
    fn verify_loop(&mut self, query: &ElementId, candidate: &ElementId) -> Option<(Pose, usize)> {
        let t0 = Instant::now();
        let result = self.verify_loop_inner(query, candidate);
        self.timings.record("loop verification", t0.elapsed().as_secs_f64());
        result
    }

    fn verify_loop_inner(&mut self, query: &ElementId, candidate: &ElementId) -> Option<(Pose, usize)> {
        // Seeded per pair so the verdict is independent of message timing.
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.cfg
                .seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(pair_seed(query, candidate)),
        );
        let src_map = &self.maps[&self.keyframe_map(query)?];
        let dst_map = &self.maps[&self.keyframe_map(candidate)?];
        let tag_positions = |map: &MapRecord, kf: &ElementId| -> BTreeMap<u64, Vector3<f64>> {
            map.keyframes[kf]
                .observations
                .iter()
                .filter_map(|o| map.landmarks.get(&o.landmark))
                .map(|l| (l.tag(), l.position_w))
                .collect()
        };
        let src_tags = tag_positions(src_map, query);
        let dst_tags = tag_positions(dst_map, candidate);
        let pairs: Vec<(Vector3<f64>, Vector3<f64>)> = src_tags
            .iter()
            .filter_map(|(tag, s)| dst_tags.get(tag).map(|d| (*s, *d)))
            .collect();
        if pairs.len() < self.cfg.consensus_min_inliers.max(3) {
            return None;
        }
        let mut best: Option<(Pose, Vec<usize>)> = None;
        for _ in 0..self.cfg.consensus_iterations {
            let mut idx = [0usize; 3];
            for slot in &mut idx {
                *slot = rng.gen_range(0..pairs.len());
            }
            if idx[0] == idx[1] || idx[1] == idx[2] || idx[0] == idx[2] {
                continue;
            }
            let src: Vec<_> = idx.iter().map(|i| pairs[*i].0).collect();
            let dst: Vec<_> = idx.iter().map(|i| pairs[*i].1).collect();
            let Ok(model) = align_point_sets(&src, &dst, false) else { continue };
            let inliers: Vec<usize> = pairs
                .iter()
                .enumerate()
                .filter(|(_, (s, d))| (model.transform.transform_point(s) - d).norm() < self.cfg.consensus_radius)
                .map(|(i, _)| i)
                .collect();
            if best.as_ref().map_or(true, |(_, b)| inliers.len() > b.len()) {
                best = Some((model.transform, inliers));
            }
        }
        let (_, inliers) = best?;
        if inliers.len() < self.cfg.consensus_min_inliers {
            return None;
        }
        // Refit on the inlier set for the final estimate.
        let src: Vec<_> = inliers.iter().map(|i| pairs[*i].0).collect();
        let dst: Vec<_> = inliers.iter().map(|i| pairs[*i].1).collect();
        // Near-collinear inliers leave the roll about their common axis
        // unobservable; reject rather than risk a twisted merge.
        if point_spread_minor(&src) < MIN_CONSENSUS_SPREAD {
            return None;
        }
        let refined = align_point_sets(&src, &dst, false).ok()?;
        if refined.rms >= self.cfg.consensus_max_rms {
            return None;
        }
        Some((refined.transform, inliers.len()))
    }

    fn record_merge(&mut self, small: u64, large: u64, absorbed: &MapRecord) {
        let mut sessions: Vec<(u32, u32)> = absorbed
            .keyframes
            .values()
            .filter(|k| !k.is_virtual)
            .map(|k| (k.id.client_id, k.id.session_id))
            .collect();
        sessions.sort_unstable();
        sessions.dedup();
        self.merge_log.push(MergeEvent {
            absorbed_map: small,
            into_map: large,
            absorbed_keyframes: absorbed.keyframes.values().filter(|k| !k.is_virtual).count(),
            absorbed_sessions: sessions,
        });
    }

    /// Transplants the smaller map into the larger (ties keep the lower
    /// map id), closes the discovered loop, and re-optimizes.
    fn merge_maps(
        &mut self,
        src_map: u64,
        dst_map: u64,
        dst_from_src: &Pose,
        query: ElementId,
        candidate: ElementId,
    ) -> Result<Vec<Outgoing>, ServerError> {
        let t0 = Instant::now();
        let (small, large, large_from_small) = {
            let n_src = self.maps[&src_map].keyframes.len();
            let n_dst = self.maps[&dst_map].keyframes.len();
            let src_into_dst = match n_src.cmp(&n_dst) {
                std::cmp::Ordering::Less => true,
                std::cmp::Ordering::Greater => false,
                std::cmp::Ordering::Equal => dst_map < src_map,
            };
            if src_into_dst {
                (src_map, dst_map, *dst_from_src)
            } else {
                (dst_map, src_map, dst_from_src.inverse())
            }
        };
        self.pauses.pause(&[small, large]);

        // Remember the pre-merge pose of each affected session's latest
        // keyframe so clients can be rebased afterwards.
        let old_poses = self.session_anchor_poses(&[small, large]);

        let mut absorbed = self.maps.remove(&small).unwrap();
        self.record_merge(small, large, &absorbed);
        let moved_edges = self.edges.remove(&small).unwrap_or_default();
        {
            let target = self.maps.get_mut(&large).unwrap();
            transplant(&mut absorbed, target, &large_from_small)?;
        }
        self.edges.get_mut(&large).unwrap().extend(moved_edges);
        for s in self.sessions.values_mut() {
            if s.map_id == small {
                s.map_id = large;
            }
        }
        let mut orphan_backlog = self.backlog.remove(&small).unwrap_or_default();
        self.backlog.entry(large).or_default().append(&mut orphan_backlog);

        // The loop constraint that justified the merge. Both keyframes now
        // live in the merged frame, where the verified alignment makes the
        // current relative pose the measurement.
        {
            let m = &self.maps[&large];
            let measured = m.keyframes[&candidate]
                .world_from_cam
                .inverse()
                .compose(&m.keyframes[&query].world_from_cam);
            self.edges.get_mut(&large).unwrap().push(PoseEdge {
                from: candidate,
                to: query,
                measured,
                weight: 1.0,
                kind: EdgeKind::Loop,
            });
        }
        self.merges += 1;
        self.timings.record("map merging", t0.elapsed().as_secs_f64());

        let mut out = self.run_pgo_and_refresh(large, old_poses)?;
        self.pauses.release(&[small, large]);
        out.extend(self.drain_backlog(large)?);
        Ok(out)
    }

    fn drain_backlog(&mut self, map_id: u64) -> Result<Vec<Outgoing>, ServerError> {
        let mut out = Vec::new();
        if !self.pauses.is_paused(map_id) {
            for msg in self.backlog.remove(&map_id).unwrap_or_default() {
                out.extend(self.handle_message(&msg, 0.0)?);
            }
        }
        Ok(out)
    }

    /// Latest-keyframe pose per session across the given maps, captured
    /// before a transform so refresh messages can express `new_from_old`.
    fn session_anchor_poses(&self, map_ids: &[u64]) -> BTreeMap<(u32, u32), Pose> {
        let mut anchors = BTreeMap::new();
        for (key, s) in &self.sessions {
            if !map_ids.contains(&s.map_id) {
                continue;
            }
            let Some(last) = s.last_keyframe else { continue };
            if let Some(kf) = self.maps.get(&s.map_id).and_then(|m| m.keyframes.get(&last)) {
                anchors.insert(*key, kf.world_from_cam);
            }
        }
        anchors
    }

    /// In-place pose-graph optimization of one map plus client refresh.
    fn optimize_map(&mut self, map_id: u64) -> Result<Vec<Outgoing>, ServerError> {
        self.pauses.pause(&[map_id]);
        let old_poses = self.session_anchor_poses(&[map_id]);
        let out = self.run_pgo_and_refresh(map_id, old_poses);
        self.pauses.release(&[map_id]);
        let mut out = out?;
        out.extend(self.drain_backlog(map_id)?);
        Ok(out)
    }

    fn run_pgo_and_refresh(
        &mut self,
        map_id: u64,
        old_anchor_poses: BTreeMap<(u32, u32), Pose>,
    ) -> Result<Vec<Outgoing>, ServerError> {
        let t0 = Instant::now();
        let edges = self.edges[&map_id].clone();
        let mut graph = PoseGraph::default();
        {
            let map = &self.maps[&map_id];
            for (id, kf) in &map.keyframes {
                graph.nodes.insert(*id, kf.world_from_cam);
            }
        }
        graph.edges = edges;
        graph.edges.retain(|e| {
            graph.nodes.contains_key(&e.from) && graph.nodes.contains_key(&e.to)
        });
        // One gauge per connected component keeps the system well-posed
        // even when sessions are not yet linked by loops.
        fix_component_roots(&mut graph);
        let before: BTreeMap<ElementId, Pose> = graph.nodes.clone();
        optimize_pose_graph(&mut graph, self.cfg.pgo_max_iters, self.cfg.pgo_tol)?;

        {
            let map = self.maps.get_mut(&map_id).unwrap();
            for (id, pose) in &graph.nodes {
                if let Some(kf) = map.keyframes.get_mut(id) {
                    kf.world_from_cam = *pose;
                }
            }
            // Landmarks ride along with their oldest observing keyframe.
            let corrections: BTreeMap<ElementId, (Pose, Pose)> = before
                .iter()
                .map(|(id, old)| (*id, (*old, graph.nodes[id])))
                .collect();
            let updates: Vec<(ElementId, Vector3<f64>)> = map
                .landmarks
                .iter()
                .filter_map(|(id, lm)| {
                    let anchor = lm.observing_keyframes.iter().next()?;
                    let (old, new) = corrections.get(anchor)?;
                    let moved =
                        new.compose(&old.inverse()).transform_point(&lm.position_w);
                    ((moved - lm.position_w).norm() > 1e-12).then_some((*id, moved))
                })
                .collect();
            for (id, pos) in updates {
                let mut lm = map.landmarks[&id].clone();
                lm.position_w = pos;
                map.upsert_landmark(lm)?;
            }
        }
        self.timings.record("pose graph optimization", t0.elapsed().as_secs_f64());

        // Refresh every session in the optimized map.
        let mut out = Vec::new();
        let session_keys: Vec<(u32, u32)> = self
            .sessions
            .iter()
            .filter(|(_, s)| s.map_id == map_id)
            .map(|(k, _)| *k)
            .collect();
        for key in session_keys {
            let (client_id, session_id) = key;
            let state = &self.sessions[&key];
            let Some(last) = state.last_keyframe else { continue };
            let map = &self.maps[&map_id];
            let Some(new_anchor) = map.keyframes.get(&last) else { continue };
            let Some(old_anchor) = old_anchor_poses.get(&key) else { continue };
            let new_from_old = new_anchor.world_from_cam.compose(&old_anchor.inverse());
            let mut refresh =
                WireMessage::new(client_id, session_id, Control::LocalRefresh { new_from_old });
            refresh.map_id = map_id;
            // Pose-only entries for the session's recent keyframes let the
            // client patch its window precisely.
            let recent: Vec<&Keyframe> = map
                .keyframes
                .values()
                .filter(|kf| {
                    kf.id.client_id == client_id && kf.id.session_id == session_id && !kf.is_virtual
                })
                .collect();
            let start = recent.len().saturating_sub(12);
            for kf in &recent[start..] {
                refresh.keyframes.push(WireKeyframe {
                    id: kf.id,
                    timestamp: kf.timestamp,
                    world_from_cam: kf.world_from_cam,
                    intrinsics_ref: kf.intrinsics_ref,
                    is_virtual: false,
                    pose_only: true,
                    observations: Vec::new(),
                    signature: Default::default(),
                });
            }
            out.push(Outgoing { client_id, message: refresh });
        }
        Ok(out)
    }

    /// Rigid pair handling for one newly arrived keyframe: interpolates a
    /// virtual counterpart keyframe, and when the observed pair transform
    /// diverges from calibration (or the cameras live in different maps),
    /// fuses with a strongly weighted rigid edge.
    fn rigid_fusion(
        &mut self,
        client_id: u32,
        kf_id: ElementId,
        _now: f64,
    ) -> Result<Vec<Outgoing>, ServerError> {
        let mut out = Vec::new();
        for pair_idx in 0..self.cfg.rigid_pairs.len() {
            let pair = self.cfg.rigid_pairs[pair_idx].clone();
            if client_id != pair.client_a && client_id != pair.client_b {
                continue;
            }
            self.rigid_state[pair_idx].keyframes_since_fusion += 1;
            let other = if client_id == pair.client_a { pair.client_b } else { pair.client_a };
            // The calibrated transform from this camera to the other.
            let this_from_other = if client_id == pair.client_a {
                pair.a_from_b
            } else {
                pair.a_from_b.inverse()
            };

            let my_map = self.keyframe_map(&kf_id).unwrap();
            let (t, my_pose) = {
                let kf = &self.maps[&my_map].keyframes[&kf_id];
                (kf.timestamp, kf.world_from_cam)
            };
            // Latest session of the counterpart camera.
            let Some((other_key, other_state)) = self
                .sessions
                .iter()
                .filter(|((c, _), s)| *c == other && s.keyframe_count > 0)
                .max_by_key(|((_, session), _)| *session)
                .map(|(k, s)| (*k, s.clone()))
            else {
                continue;
            };
            let other_map_id = other_state.map_id;
            let Some(bracket) = bracket_keyframes(
                &self.maps[&other_map_id],
                other_key,
                t,
                self.cfg.virtual_bracket,
            ) else {
                // Live edge: the counterpart has not produced a keyframe at
                // or after t yet. When the cameras live in different maps we
                // can still align them at the counterpart's latest keyframe
                // time by interpolating within this camera's own session.
                if my_map != other_map_id {
                    out.extend(self.rigid_merge_at_live_edge(
                        pair_idx,
                        client_id,
                        kf_id,
                        my_map,
                        other_key,
                        other_map_id,
                        &this_from_other,
                    )?);
                }
                continue;
            };
            let (kf0, kf1) = bracket;
            let other_map = &self.maps[&other_map_id];
            let (p0, t0_) = {
                let k = &other_map.keyframes[&kf0];
                (k.world_from_cam, k.timestamp)
            };
            let (p1, t1_) = {
                let k = &other_map.keyframes[&kf1];
                (k.world_from_cam, k.timestamp)
            };
            let other_pose = if kf0 == kf1 {
                p0
            } else {
                match interpolate(&p0, t0_, &p1, t1_, t) {
                    Ok(p) => p,
                    Err(_) => continue,
                }
            };
            let expected_other = my_pose.compose(&this_from_other);

            if my_map != other_map_id {
                // The rigid constraint itself aligns the two maps.
                let dst_from_src = other_pose.compose(&expected_other.inverse());
                let virtual_id = self.insert_virtual_keyframe(
                    pair_idx, other_key, other_map_id, t, &other_pose,
                );
                self.edges.get_mut(&other_map_id).unwrap().push(PoseEdge {
                    from: kf_id,
                    to: virtual_id,
                    measured: this_from_other,
                    weight: RIGID_WEIGHT_FACTOR,
                    kind: EdgeKind::Rigid,
                });
                // The edge endpoints span both maps until the transplant
                // below unifies them; merge_maps re-checks endpoint
                // presence before optimizing.
                out.extend(self.merge_rigid(my_map, other_map_id, &dst_from_src)?);
                self.rigid_state[pair_idx].keyframes_since_fusion = 0;
                continue;
            }

            let divergence = expected_other.inverse().compose(&other_pose);
            let (ang, dist) = Pose::identity().delta_to(&divergence);
            let diverged = dist > self.cfg.rigid_divergence_trans
                || ang > self.cfg.rigid_divergence_rot;
            if !diverged {
                continue;
            }
            if self.rigid_state[pair_idx].keyframes_since_fusion < self.cfg.rigid_hysteresis {
                continue;
            }
            let virtual_id =
                self.insert_virtual_keyframe(pair_idx, other_key, other_map_id, t, &other_pose);
            self.edges.get_mut(&my_map).unwrap().push(PoseEdge {
                from: kf_id,
                to: virtual_id,
                measured: this_from_other,
                weight: RIGID_WEIGHT_FACTOR,
                kind: EdgeKind::Rigid,
            });
            // Tie the virtual keyframe into its session trajectory.
            let mut interp_edges = vec![(kf0, t0_, p0)];
            if kf1 != kf0 {
                interp_edges.push((kf1, t1_, p1));
            }
            for (nbr, _, nbr_pose) in interp_edges {
                let measured = nbr_pose.inverse().compose(&other_pose);
                self.edges.get_mut(&my_map).unwrap().push(PoseEdge {
                    from: nbr,
                    to: virtual_id,
                    measured,
                    weight: 1.0,
                    kind: EdgeKind::Odometry,
                });
            }
            self.rigid_state[pair_idx].keyframes_since_fusion = 0;
            out.extend(self.optimize_map(my_map)?);
        }
        Ok(out)
    }

    fn insert_virtual_keyframe(
        &mut self,
        pair_idx: usize,
        session_key: (u32, u32),
        map_id: u64,
        timestamp: f64,
        pose: &Pose,
    ) -> ElementId {
        self.rigid_state[pair_idx].virtual_counter += 1;
        // Offset keeps virtual ids clear of client-generated sequences.
        let id = ElementId::new(
            session_key.0,
            session_key.1,
            1_000_000_000 + (pair_idx as u64) * 1_000_000 + self.rigid_state[pair_idx].virtual_counter,
        );
        let kf = Keyframe::new_virtual(id, timestamp, *pose, map_id);
        self.maps.get_mut(&map_id).unwrap().upsert_keyframe(kf).unwrap();
        id
    }

    /// Cross-map rigid alignment when the counterpart trails this camera in
    /// time: evaluate both cameras at the counterpart's latest keyframe
    /// timestamp (interpolating within this camera's session) and merge.
    #[allow(clippy::too_many_arguments)]
    fn rigid_merge_at_live_edge(
        &mut self,
        pair_idx: usize,
        client_id: u32,
        kf_id: ElementId,
        my_map: u64,
        other_key: (u32, u32),
        other_map_id: u64,
        this_from_other: &Pose,
    ) -> Result<Vec<Outgoing>, ServerError> {
        let Some((t2, other_pose)) = self.maps[&other_map_id]
            .keyframes
            .values()
            .filter(|k| {
                !k.is_virtual
                    && k.id.client_id == other_key.0
                    && k.id.session_id == other_key.1
            })
            .max_by(|a, b| a.timestamp.total_cmp(&b.timestamp))
            .map(|k| (k.timestamp, k.world_from_cam))
        else {
            return Ok(Vec::new());
        };
        let my_session = (client_id, kf_id.session_id);
        let Some((k0, k1)) =
            bracket_keyframes(&self.maps[&my_map], my_session, t2, self.cfg.virtual_bracket)
        else {
            return Ok(Vec::new());
        };
        let m = &self.maps[&my_map];
        let (p0, t0) = (m.keyframes[&k0].world_from_cam, m.keyframes[&k0].timestamp);
        let (p1, t1) = (m.keyframes[&k1].world_from_cam, m.keyframes[&k1].timestamp);
        let my_at_t2 = if k0 == k1 {
            p0
        } else {
            match interpolate(&p0, t0, &p1, t1, t2) {
                Ok(p) => p,
                Err(_) => return Ok(Vec::new()),
            }
        };
        let expected_other = my_at_t2.compose(this_from_other);
        let dst_from_src = other_pose.compose(&expected_other.inverse());
        let out = self.merge_rigid(my_map, other_map_id, &dst_from_src)?;
        self.rigid_state[pair_idx].keyframes_since_fusion = 0;
        Ok(out)
    }

    /// Map merge driven by a rigid constraint rather than a detected loop:
    /// same smaller-into-larger policy, then PGO.
    fn merge_rigid(
        &mut self,
        src_map: u64,
        dst_map: u64,
        dst_from_src: &Pose,
    ) -> Result<Vec<Outgoing>, ServerError> {
        let t0 = Instant::now();
        let (small, large, large_from_small) = {
            let n_src = self.maps[&src_map].keyframes.len();
            let n_dst = self.maps[&dst_map].keyframes.len();
            let src_into_dst = match n_src.cmp(&n_dst) {
                std::cmp::Ordering::Less => true,
                std::cmp::Ordering::Greater => false,
                std::cmp::Ordering::Equal => dst_map < src_map,
            };
            if src_into_dst {
                (src_map, dst_map, *dst_from_src)
            } else {
                (dst_map, src_map, dst_from_src.inverse())
            }
        };
        self.pauses.pause(&[small, large]);
        let old_poses = self.session_anchor_poses(&[small, large]);
        let mut absorbed = self.maps.remove(&small).unwrap();
        self.record_merge(small, large, &absorbed);
        let moved_edges = self.edges.remove(&small).unwrap_or_default();
        {
            let target = self.maps.get_mut(&large).unwrap();
            transplant(&mut absorbed, target, &large_from_small)?;
        }
        self.edges.get_mut(&large).unwrap().extend(moved_edges);
        for s in self.sessions.values_mut() {
            if s.map_id == small {
                s.map_id = large;
            }
        }
        let mut orphan_backlog = self.backlog.remove(&small).unwrap_or_default();
        self.backlog.entry(large).or_default().append(&mut orphan_backlog);
        self.merges += 1;
        self.timings.record("map merging", t0.elapsed().as_secs_f64());
        let mut out = self.run_pgo_and_refresh(large, old_poses)?;
        self.pauses.release(&[small, large]);
        out.extend(self.drain_backlog(large)?);
        Ok(out)
    }

    /// Monocular registration: signature match against the database, then
    /// a 2D-3D pose solve seeded at the best candidate's pose.
    fn handle_place_rec(
        &mut self,
        msg: &WireMessage,
        timestamp: f64,
        features: &[WireFeature],
    ) -> Vec<Outgoing> {
        let t0 = Instant::now();
        let response = self.place_rec_inner(features);
        self.timings.record("place recognition", t0.elapsed().as_secs_f64());
        let _ = timestamp;
        let (success, pose, map_id) = match response {
            Some((pose, map_id)) => (true, pose, map_id),
            None => (false, Pose::identity(), 0),
        };
        let mut reply = WireMessage::new(
            msg.client_id,
            msg.session_id,
            Control::PlaceRecResponse { success, world_from_cam: pose },
        );
        reply.map_id = map_id;
        let mut out = Vec::new();
        if success {
            // Register the session into the recognized map and seed the
            // client with nearby landmarks.
            self.sessions.insert(
                (msg.client_id, msg.session_id),
                SessionState { map_id, last_keyframe: None, keyframe_count: 0 },
            );
            let map = &self.maps[&map_id];
            for id in retrieve_in_view(map, &self.cfg.intrinsics, &pose) {
                let lm = &map.landmarks[&id];
                if self.cfg.augment_exclusion && lm.last_updated_by == msg.client_id {
                    continue;
                }
                reply.landmarks.push(WireLandmark {
                    id,
                    position_w: [
                        lm.position_w.x as f32,
                        lm.position_w.y as f32,
                        lm.position_w.z as f32,
                    ],
                    descriptor: lm.descriptor,
                    observing_keyframes: Vec::new(),
                    last_updated_by: lm.last_updated_by,
                });
            }
        }
        out.push(Outgoing { client_id: msg.client_id, message: reply });
        out
    }

    fn place_rec_inner(&mut self, features: &[WireFeature]) -> Option<(Pose, u64)> {
        let query_sig: BTreeSet<u64> = features.iter().map(|f| f.tag).filter(|t| *t != 0).collect();
        if query_sig.len() < 3 {
            return None;
        }
        let mut best: Option<(u64, ElementId, f64)> = None;
        for (map_id, map) in &self.maps {
            for (id, kf) in &map.keyframes {
                if kf.is_virtual || kf.signature.is_empty() {
                    continue;
                }
                let inter = query_sig.intersection(&kf.signature).count();
                if inter == 0 {
                    continue;
                }
                let union = query_sig.len() + kf.signature.len() - inter;
                let score = inter as f64 / union as f64;
                if score >= self.cfg.loop_score_threshold
                    && best.map_or(true, |(_, _, s)| score > s)
                {
                    best = Some((*map_id, *id, score));
                }
            }
        }
        let (map_id, candidate, _) = best?;
        let map = &self.maps[&map_id];
        let seed_pose = map.keyframes[&candidate].world_from_cam;
        // Tag-matched 2D-3D correspondences from landmarks near the
        // candidate.
        let mut tag_to_pos: BTreeMap<u64, Vector3<f64>> = BTreeMap::new();
        for id in retrieve_in_view(map, &self.cfg.intrinsics, &seed_pose) {
            let lm = &map.landmarks[&id];
            tag_to_pos.insert(lm.tag(), lm.position_w);
        }
        for o in &map.keyframes[&candidate].observations {
            if let Some(lm) = map.landmarks.get(&o.landmark) {
                tag_to_pos.insert(lm.tag(), lm.position_w);
            }
        }
        let corr: Vec<(f64, f64, Vector3<f64>)> = features
            .iter()
            .filter_map(|f| tag_to_pos.get(&f.tag).map(|p| (f.u as f64, f.v as f64, *p)))
            .collect();
        if corr.len() < self.cfg.min_inliers {
            return None;
        }
        let pose = solve_pose_2d3d(&self.cfg.intrinsics, &corr, &seed_pose);
        let cam_from_world = pose.inverse();
        let inliers = corr
            .iter()
            .filter(|(u, v, p)| {
                let pc = cam_from_world.transform_point(p);
                if pc.z <= 1e-6 {
                    return false;
                }
                let pu = self.cfg.intrinsics.fx * pc.x / pc.z + self.cfg.intrinsics.cx;
                let pv = self.cfg.intrinsics.fy * pc.y / pc.z + self.cfg.intrinsics.cy;
                ((pu - u).powi(2) + (pv - v).powi(2)).sqrt() < self.cfg.reproj_inlier_px
            })
            .count();
        (inliers >= self.cfg.min_inliers).then_some((pose, map_id))
    }
}

/// Minimum standard deviation along the second principal axis of a loop
/// consensus inlier set before the alignment is trusted.
const MIN_CONSENSUS_SPREAD: f64 = 0.25;

/// Standard deviation of a point set along its second principal axis.
fn point_spread_minor(pts: &[Vector3<f64>]) -> f64 {
    if pts.len() < 3 {
        return 0.0;
    }
    let mean: Vector3<f64> = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let mut cov = nalgebra::Matrix3::<f64>::zeros();
    for p in pts {
        let c = p - mean;
        cov += c * c.transpose();
    }
    cov /= pts.len() as f64;
    let mut eigs: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
    eigs.sort_by(f64::total_cmp);
    eigs[1].max(0.0).sqrt()
}

fn pair_seed(a: &ElementId, b: &ElementId) -> u64 {
    // FNV-1a over both ids.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in [
        a.client_id as u64,
        a.session_id as u64,
        a.local_seq,
        b.client_id as u64,
        b.session_id as u64,
        b.local_seq,
    ] {
        for byte in v.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Marks the lowest node id of every connected component (and every
/// isolated node) as fixed.
fn fix_component_roots(graph: &mut PoseGraph) {
    use std::collections::HashMap;
    let mut adj: HashMap<ElementId, Vec<ElementId>> = HashMap::new();
    for e in &graph.edges {
        adj.entry(e.from).or_default().push(e.to);
        adj.entry(e.to).or_default().push(e.from);
    }
    let mut seen: BTreeSet<ElementId> = BTreeSet::new();
    for start in graph.nodes.keys() {
        if seen.contains(start) {
            continue;
        }
        let mut queue = VecDeque::from([*start]);
        seen.insert(*start);
        let mut root = *start;
        while let Some(n) = queue.pop_front() {
            root = root.min(n);
            for next in adj.get(&n).into_iter().flatten() {
                if seen.insert(*next) {
                    queue.push_back(*next);
                }
            }
        }
        graph.fixed.insert(root);
    }
}

/// Consecutive session keyframes whose timestamps bracket `t`, no wider
/// than `max_span` seconds. A keyframe within 1 ms counts as an exact hit.
fn bracket_keyframes(
    map: &MapRecord,
    session: (u32, u32),
    t: f64,
    max_span: f64,
) -> Option<(ElementId, ElementId)> {
    let mut before: Option<(f64, ElementId)> = None;
    let mut after: Option<(f64, ElementId)> = None;
    for (id, kf) in &map.keyframes {
        if id.client_id != session.0 || id.session_id != session.1 || kf.is_virtual {
            continue;
        }
        if kf.timestamp <= t + 1e-3 && before.map_or(true, |(bt, _)| kf.timestamp > bt) {
            before = Some((kf.timestamp, *id));
        }
        if kf.timestamp >= t - 1e-3 && after.map_or(true, |(at, _)| kf.timestamp < at) {
            after = Some((kf.timestamp, *id));
        }
    }
    let (bt, bid) = before?;
    let (at, aid) = after?;
    if bid == aid {
        // Exact timestamp hit: no interpolation needed.
        return Some((bid, aid));
    }
    (at - bt <= max_span && at > bt).then_some((bid, aid))
}

/// Gauss-Newton pose solve from 2D-3D correspondences with fixed points.
fn solve_pose_2d3d(
    k: &CameraIntrinsics,
    corr: &[(f64, f64, Vector3<f64>)],
    seed: &Pose,
) -> Pose {
    use crate::optim::{reproj_jacobians, reproj_residual, BAObservation};
    use nalgebra::{Matrix6, Vector6};
    let mut pose = *seed;
    let dummy = ElementId::new(0, 0, 0);
    let cost = |p: &Pose| -> f64 {
        corr.iter()
            .map(|(u, v, pos)| {
                let o = BAObservation { keyframe: dummy, landmark: dummy, u: *u, v: *v, depth: -1.0 };
                match reproj_residual(k, p, pos, &o) {
                    Some(r) => r.norm_squared(),
                    None => 1e6,
                }
            })
            .sum()
    };
    let mut current = cost(&pose);
    let mut lambda = 1e-4;
    for _ in 0..20 {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (u, v, pos) in corr {
            let o = BAObservation { keyframe: dummy, landmark: dummy, u: *u, v: *v, depth: -1.0 };
            let (Some(r), Some((j, _))) =
                (reproj_residual(k, &pose, pos, &o), reproj_jacobians(k, &pose, pos, &o))
            else {
                continue;
            };
            h += j.transpose() * j;
            g += j.transpose() * r;
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
            let cand = retract(&pose, &delta);
            let c = cost(&cand);
            if c < current {
                pose = cand;
                current = c;
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
