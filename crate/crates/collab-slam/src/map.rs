//! Domain model for keyframes, landmarks, and maps, with globally unique
//! IDs and indexed retrieval, shared by client and server.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;
use thiserror::Error;

use crate::geom::Pose;
use crate::grid::GridIndex;

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("element map_id {element} does not match map {map}")]
    MapMismatch { element: u64, map: u64 },
    #[error("element id {0:?} exists in both maps")]
    IdCollision(ElementId),
    #[error("transplant source and destination share map_id {0}")]
    SameMap(u64),
}

/// Globally unique element identity: (client, session, per-kind counter).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ElementId {
    pub client_id: u32,
    pub session_id: u32,
    pub local_seq: u64,
}

impl ElementId {
    pub fn new(client_id: u32, session_id: u32, local_seq: u64) -> Self {
        Self { client_id, session_id, local_seq }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementKind {
    Keyframe,
    Landmark,
}

/// A keyframe's view of one landmark. `depth` is -1 for bearing-only
/// (monocular) observations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub landmark: ElementId,
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Observation {
    pub fn has_depth(&self) -> bool {
        self.depth >= 0.0
    }
}

pub const DESCRIPTOR_LEN: usize = 32;

/// Simulated appearance fingerprint: the set of observed world-feature tags.
pub type Signature = BTreeSet<u64>;

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub id: ElementId,
    pub timestamp: f64,
    pub world_from_cam: Pose,
    pub intrinsics_ref: u32,
    pub observations: Vec<Observation>,
    pub signature: Signature,
    pub map_id: u64,
    pub is_virtual: bool,
}

impl Keyframe {
    pub fn new_virtual(id: ElementId, timestamp: f64, pose: Pose, map_id: u64) -> Self {
        Self {
            id,
            timestamp,
            world_from_cam: pose,
            intrinsics_ref: 0,
            observations: Vec::new(),
            signature: Signature::new(),
            map_id,
            is_virtual: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub id: ElementId,
    pub position_w: Vector3<f64>,
    pub descriptor: [u8; DESCRIPTOR_LEN],
    pub observing_keyframes: BTreeSet<ElementId>,
    pub last_updated_by: u32,
    pub map_id: u64,
}

impl Landmark {
    /// World-feature tag embedded in the descriptor's first 8 bytes.
    pub fn tag(&self) -> u64 {
        u64::from_le_bytes(self.descriptor[..8].try_into().unwrap())
    }

    pub fn descriptor_for_tag(tag: u64) -> [u8; DESCRIPTOR_LEN] {
        let mut d = [0u8; DESCRIPTOR_LEN];
        d[..8].copy_from_slice(&tag.to_le_bytes());
        // Fill the remainder deterministically so Hamming-distance matching
        // has non-trivial content to compare.
        let mut x = tag.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        for b in d[8..].iter_mut() {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            *b = (x & 0xFF) as u8;
        }
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsertOutcome {
    Inserted,
    Updated,
}

/// One disjoint map: keyframe and landmark indexes plus the grid landmark
/// index used for frustum retrieval.
///
/// Single-writer: exactly one task mutates a `MapRecord` at a time.
#[derive(Debug, Clone)]
pub struct MapRecord {
    pub map_id: u64,
    pub keyframes: BTreeMap<ElementId, Keyframe>,
    pub landmarks: BTreeMap<ElementId, Landmark>,
    pub grid: GridIndex,
    pub origin_note: Pose,
    // Observations whose landmark has not arrived yet: landmark id -> keyframes
    // waiting to be linked. Reconciled when the landmark is upserted.
    pending_links: BTreeMap<ElementId, BTreeSet<ElementId>>,
}

impl MapRecord {
    pub fn new(map_id: u64) -> Self {
        Self::with_cell_size(map_id, 2.0)
    }

    pub fn with_cell_size(map_id: u64, cell_size: f64) -> Self {
        Self {
            map_id,
            keyframes: BTreeMap::new(),
            landmarks: BTreeMap::new(),
            grid: GridIndex::new(cell_size),
            origin_note: Pose::identity(),
            pending_links: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty() && self.landmarks.is_empty()
    }

    /// Idempotent insert-or-replace. An update replaces pose and
    /// observations but never the id.
    pub fn upsert_keyframe(&mut self, kf: Keyframe) -> Result<UpsertOutcome, MapError> {
        if kf.map_id != self.map_id {
            return Err(MapError::MapMismatch { element: kf.map_id, map: self.map_id });
        }
        let outcome = if let Some(old) = self.keyframes.get(&kf.id) {
            let old_obs: Vec<ElementId> = old.observations.iter().map(|o| o.landmark).collect();
            for lm_id in old_obs {
                self.unlink(lm_id, kf.id);
            }
            UpsertOutcome::Updated
        } else {
            UpsertOutcome::Inserted
        };
        for obs in &kf.observations {
            self.link(obs.landmark, kf.id);
        }
        self.keyframes.insert(kf.id, kf);
        Ok(outcome)
    }

    pub fn upsert_landmark(&mut self, mut lm: Landmark) -> Result<UpsertOutcome, MapError> {
        if lm.map_id != self.map_id {
            return Err(MapError::MapMismatch { element: lm.map_id, map: self.map_id });
        }
        // Back-references are derived from keyframe observation lists, not
        // trusted from the incoming element.
        lm.observing_keyframes = match self.landmarks.get(&lm.id) {
            Some(old) => old.observing_keyframes.clone(),
            None => BTreeSet::new(),
        };
        let outcome = if self.landmarks.contains_key(&lm.id) {
            UpsertOutcome::Updated
        } else {
            if let Some(waiting) = self.pending_links.remove(&lm.id) {
                lm.observing_keyframes.extend(waiting);
            }
            UpsertOutcome::Inserted
        };
        self.grid.insert_or_move(lm.id, &lm.position_w);
        self.landmarks.insert(lm.id, lm);
        Ok(outcome)
    }

    fn link(&mut self, landmark: ElementId, kf: ElementId) {
        match self.landmarks.get_mut(&landmark) {
            Some(lm) => {
                lm.observing_keyframes.insert(kf);
            }
            None => {
                self.pending_links.entry(landmark).or_default().insert(kf);
            }
        }
    }

    fn unlink(&mut self, landmark: ElementId, kf: ElementId) {
        if let Some(lm) = self.landmarks.get_mut(&landmark) {
            lm.observing_keyframes.remove(&kf);
        }
        if let Some(waiting) = self.pending_links.get_mut(&landmark) {
            waiting.remove(&kf);
            if waiting.is_empty() {
                self.pending_links.remove(&landmark);
            }
        }
    }

    /// Removes the listed elements and cleans dangling references on both
    /// sides. Unknown ids are ignored.
    pub fn prune(&mut self, items: &[(ElementKind, ElementId)]) -> usize {
        let mut removed = 0;
        for &(kind, id) in items {
            match kind {
                ElementKind::Keyframe => {
                    if let Some(kf) = self.keyframes.remove(&id) {
                        for obs in &kf.observations {
                            self.unlink(obs.landmark, id);
                        }
                        removed += 1;
                    }
                }
                ElementKind::Landmark => {
                    if let Some(lm) = self.landmarks.remove(&id) {
                        let observers: Vec<ElementId> =
                            lm.observing_keyframes.iter().copied().collect();
                        for kf_id in observers {
                            if let Some(kf) = self.keyframes.get_mut(&kf_id) {
                                kf.observations.retain(|o| o.landmark != id);
                            }
                        }
                        self.grid.remove(id);
                        self.pending_links.remove(&id);
                        removed += 1;
                    }
                }
            }
        }
        removed
    }

    /// Checks that observation links are bidirectionally consistent and the
    /// grid index matches stored landmark positions.
    pub fn audit(&self) -> Result<(), String> {
        for (kf_id, kf) in &self.keyframes {
            if kf.map_id != self.map_id {
                return Err(format!("keyframe {kf_id:?} has wrong map_id {}", kf.map_id));
            }
            for obs in &kf.observations {
                match self.landmarks.get(&obs.landmark) {
                    Some(lm) => {
                        if !lm.observing_keyframes.contains(kf_id) {
                            return Err(format!(
                                "landmark {:?} missing back-reference to keyframe {kf_id:?}",
                                obs.landmark
                            ));
                        }
                    }
                    None => {
                        let pending_ok = self
                            .pending_links
                            .get(&obs.landmark)
                            .is_some_and(|w| w.contains(kf_id));
                        if !pending_ok {
                            return Err(format!(
                                "keyframe {kf_id:?} observes unknown landmark {:?} with no pending link",
                                obs.landmark
                            ));
                        }
                    }
                }
            }
        }
        for (lm_id, lm) in &self.landmarks {
            if lm.map_id != self.map_id {
                return Err(format!("landmark {lm_id:?} has wrong map_id {}", lm.map_id));
            }
            if !lm.position_w.iter().all(|c| c.is_finite()) {
                return Err(format!("landmark {lm_id:?} has non-finite position"));
            }
            for kf_id in &lm.observing_keyframes {
                let ok = self
                    .keyframes
                    .get(kf_id)
                    .is_some_and(|kf| kf.observations.iter().any(|o| o.landmark == *lm_id));
                if !ok {
                    return Err(format!(
                        "landmark {lm_id:?} back-references keyframe {kf_id:?} without a forward observation"
                    ));
                }
            }
        }
        self.grid.audit(&self.landmarks)
    }
}

/// Moves every element of `src` into `dst` under `dst_from_src`, updating
/// map ids and world poses. `src` is left empty.
pub fn transplant(src: &mut MapRecord, dst: &mut MapRecord, dst_from_src: &Pose) -> Result<(), MapError> {
    if src.map_id == dst.map_id {
        return Err(MapError::SameMap(src.map_id));
    }
    for id in src.keyframes.keys() {
        if dst.keyframes.contains_key(id) {
            return Err(MapError::IdCollision(*id));
        }
    }
    for id in src.landmarks.keys() {
        if dst.landmarks.contains_key(id) {
            return Err(MapError::IdCollision(*id));
        }
    }
    let keyframes = std::mem::take(&mut src.keyframes);
    let landmarks = std::mem::take(&mut src.landmarks);
    let pending = std::mem::take(&mut src.pending_links);
    src.grid.clear();
    for (id, mut kf) in keyframes {
        kf.world_from_cam = dst_from_src.compose(&kf.world_from_cam);
        kf.map_id = dst.map_id;
        dst.keyframes.insert(id, kf);
    }
    for (id, mut lm) in landmarks {
        lm.position_w = dst_from_src.transform_point(&lm.position_w);
        lm.map_id = dst.map_id;
        dst.grid.insert_or_move(id, &lm.position_w);
        dst.landmarks.insert(id, lm);
    }
    for (lm_id, waiting) in pending {
        dst.pending_links.entry(lm_id).or_default().extend(waiting);
    }
    Ok(())
}

/// Per-(client, session) monotone ID source, one counter per element kind.
#[derive(Debug, Clone)]
pub struct IdGenerator {
    client_id: u32,
    session_id: u32,
    next_keyframe: u64,
    next_landmark: u64,
}

impl IdGenerator {
    pub fn new(client_id: u32, session_id: u32) -> Self {
        Self { client_id, session_id, next_keyframe: 1, next_landmark: 1 }
    }

    pub fn next_keyframe_id(&mut self) -> ElementId {
        let id = ElementId::new(self.client_id, self.session_id, self.next_keyframe);
        self.next_keyframe += 1;
        id
    }

    pub fn next_landmark_id(&mut self) -> ElementId {
        let id = ElementId::new(self.client_id, self.session_id, self.next_landmark);
        self.next_landmark += 1;
        id
    }
}
