//! 2D grid hash over landmark x-y coordinates with exact retrieval of all
//! landmarks inside a camera frustum.
//!
//! Landmarks are indexed by `floor(x / cell)`, `floor(y / cell)`. A query
//! projects the eight frustum vertices onto the ground plane, builds their
//! 2D convex hull, tests cell centers of the hull's bounding box against
//! the hull dilated by half a cell diagonal, and reprojection-checks every
//! candidate landmark. The dilation guarantees no landmark with a valid
//! projection is missed by the cell-center test; the reprojection check
//! removes the extra candidates, so the result matches a brute-force
//! projection scan exactly.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::geom::{frustum_vertices, project, CameraIntrinsics, Pose};
use crate::map::{ElementId, Landmark, MapRecord};

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("convex hull needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("all hull input points are collinear")]
    Degenerate,
}

pub const DEFAULT_CELL_SIZE: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct GridIndex {
    cell_size: f64,
    cells: HashMap<(i32, i32), Vec<ElementId>>,
    reverse: BTreeMap<ElementId, (i32, i32)>,
}

impl GridIndex {
    pub fn new(cell_size: f64) -> Self {
        assert!(cell_size > 0.0);
        Self { cell_size, cells: HashMap::new(), reverse: BTreeMap::new() }
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn len(&self) -> usize {
        self.reverse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reverse.is_empty()
    }

    pub fn cell_of(&self, p: &Vector3<f64>) -> (i32, i32) {
        (
            (p.x / self.cell_size).floor() as i32,
            (p.y / self.cell_size).floor() as i32,
        )
    }

    pub fn insert_or_move(&mut self, id: ElementId, p: &Vector3<f64>) {
        let cell = self.cell_of(p);
        if let Some(&old) = self.reverse.get(&id) {
            if old == cell {
                return;
            }
            self.remove_from_cell(old, id);
        }
        self.cells.entry(cell).or_default().push(id);
        self.reverse.insert(id, cell);
    }

    pub fn remove(&mut self, id: ElementId) {
        if let Some(cell) = self.reverse.remove(&id) {
            self.remove_from_cell(cell, id);
        }
    }

    fn remove_from_cell(&mut self, cell: (i32, i32), id: ElementId) {
        if let Some(v) = self.cells.get_mut(&cell) {
            v.retain(|x| *x != id);
            if v.is_empty() {
                self.cells.remove(&cell);
            }
        }
    }

    pub fn clear(&mut self) {
        self.cells.clear();
        self.reverse.clear();
    }

    pub fn cell_members(&self, cell: (i32, i32)) -> &[ElementId] {
        self.cells.get(&cell).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Forward/reverse consistency plus agreement with stored positions.
    pub fn audit(&self, landmarks: &BTreeMap<ElementId, Landmark>) -> Result<(), String> {
        let indexed: usize = self.cells.values().map(Vec::len).sum();
        if indexed != self.reverse.len() {
            return Err(format!(
                "grid cell membership count {indexed} != reverse map size {}",
                self.reverse.len()
            ));
        }
        for (id, cell) in &self.reverse {
            if !self.cell_members(*cell).contains(id) {
                return Err(format!("grid reverse entry {id:?} missing from cell {cell:?}"));
            }
            if let Some(lm) = landmarks.get(id) {
                if self.cell_of(&lm.position_w) != *cell {
                    return Err(format!("grid cell for {id:?} is stale"));
                }
            }
        }
        if landmarks.len() != self.reverse.len() {
            return Err(format!(
                "grid indexes {} landmarks but map stores {}",
                self.reverse.len(),
                landmarks.len()
            ));
        }
        Ok(())
    }
}

impl PartialEq for GridIndex {
    fn eq(&self, other: &Self) -> bool {
        self.cell_size == other.cell_size && self.reverse == other.reverse
    }
}

/// Minimal counter-clockwise convex polygon containing all points.
/// Collinear interior points are dropped (Andrew's monotone chain).
pub fn convex_hull_2d(pts: &[Vector2<f64>]) -> Result<Vec<Vector2<f64>>, GridError> {
    if pts.len() < 3 {
        return Err(GridError::TooFewPoints(pts.len()));
    }
    let mut sorted: Vec<Vector2<f64>> = pts.to_vec();
    sorted.sort_by(|a, b| (a.x, a.y).partial_cmp(&(b.x, b.y)).unwrap());
    sorted.dedup_by(|a, b| (a.x - b.x).abs() < 1e-12 && (a.y - b.y).abs() < 1e-12);
    if sorted.len() < 3 {
        return Err(GridError::Degenerate);
    }
    let cross = |o: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>| {
        (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
    };
    let build = |iter: &mut dyn Iterator<Item = &Vector2<f64>>| {
        let mut chain: Vec<Vector2<f64>> = Vec::new();
        for p in iter {
            while chain.len() >= 2 && cross(&chain[chain.len() - 2], &chain[chain.len() - 1], p) <= 0.0 {
                chain.pop();
            }
            chain.push(*p);
        }
        chain
    };
    let mut lower = build(&mut sorted.iter());
    let mut upper = build(&mut sorted.iter().rev());
    lower.pop();
    upper.pop();
    lower.append(&mut upper);
    if lower.len() < 3 {
        return Err(GridError::Degenerate);
    }
    Ok(lower)
}

/// Boundary-inclusive point test against a CCW hull dilated outward by
/// `margin`: the point must be within `margin` of the inner side of every
/// edge's half-plane.
pub fn point_in_hull(p: &Vector2<f64>, hull: &[Vector2<f64>], margin: f64) -> bool {
    let n = hull.len();
    for i in 0..n {
        let a = hull[i];
        let b = hull[(i + 1) % n];
        let e = b - a;
        let len = e.norm();
        if len < 1e-12 {
            continue;
        }
        let cross = e.x * (p.y - a.y) - e.y * (p.x - a.x);
        if cross < -margin * len {
            return false;
        }
    }
    true
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RetrievalStats {
    pub cells_visited: usize,
    pub bbox_cells: usize,
    pub candidates: usize,
}

/// All landmarks whose reprojection through the camera is valid,
/// deduplicated and sorted by id.
pub fn retrieve_in_view(
    map: &MapRecord,
    k: &CameraIntrinsics,
    world_from_cam: &Pose,
) -> Vec<ElementId> {
    retrieve_in_view_counted(map, k, world_from_cam).0
}

pub fn retrieve_in_view_counted(
    map: &MapRecord,
    k: &CameraIntrinsics,
    world_from_cam: &Pose,
) -> (Vec<ElementId>, RetrievalStats) {
    let grid = &map.grid;
    let cell = grid.cell_size();
    let verts = frustum_vertices(k, world_from_cam);
    let flat: Vec<Vector2<f64>> = verts.iter().map(|v| Vector2::new(v.x, v.y)).collect();
    // A straight-down camera can collapse the hull to a sliver; fall back to
    // the bounding box of the projected vertices.
    let hull = convex_hull_2d(&flat).unwrap_or_else(|_| bbox_polygon(&flat));
    let margin = cell * std::f64::consts::SQRT_2 / 2.0;

    let (min_x, max_x) = min_max(flat.iter().map(|p| p.x));
    let (min_y, max_y) = min_max(flat.iter().map(|p| p.y));
    let ix0 = ((min_x - margin) / cell).floor() as i64;
    let ix1 = ((max_x + margin) / cell).floor() as i64;
    let iy0 = ((min_y - margin) / cell).floor() as i64;
    let iy1 = ((max_y + margin) / cell).floor() as i64;

    let cam_from_world = world_from_cam.inverse();
    let mut stats = RetrievalStats {
        bbox_cells: ((ix1 - ix0 + 1) * (iy1 - iy0 + 1)) as usize,
        ..Default::default()
    };
    let mut out = Vec::new();
    for iy in iy0..=iy1 {
        for ix in ix0..=ix1 {
            stats.cells_visited += 1;
            let center = Vector2::new((ix as f64 + 0.5) * cell, (iy as f64 + 0.5) * cell);
            if !point_in_hull(&center, &hull, margin) {
                continue;
            }
            for id in grid.cell_members((ix as i32, iy as i32)) {
                stats.candidates += 1;
                let lm = &map.landmarks[id];
                if project(k, &cam_from_world, &lm.position_w).is_some() {
                    out.push(*id);
                }
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    (out, stats)
}

fn bbox_polygon(pts: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let (min_x, max_x) = min_max(pts.iter().map(|p| p.x));
    let (min_y, max_y) = min_max(pts.iter().map(|p| p.y));
    vec![
        Vector2::new(min_x, min_y),
        Vector2::new(max_x, min_y),
        Vector2::new(max_x, max_y),
        Vector2::new(min_x, max_y),
    ]
}

fn min_max(iter: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in iter {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::{Landmark, MapRecord};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn eid(seq: u64) -> ElementId {
        ElementId::new(1, 1, seq)
    }

    #[test]
    fn cell_of_floor_semantics() {
        let g = GridIndex::new(2.0);
        assert_eq!(g.cell_of(&Vector3::new(0.1, 0.1, 5.0)), (0, 0));
        assert_eq!(g.cell_of(&Vector3::new(-0.1, 3.9, 0.0)), (-1, 1));
        assert_eq!(g.cell_of(&Vector3::new(4.0, 0.0, 0.0)), (2, 0));
    }

    #[test]
    fn insert_move_across_border() {
        let mut g = GridIndex::new(2.0);
        g.insert_or_move(eid(1), &Vector3::new(0.5, 0.5, 0.0));
        g.insert_or_move(eid(1), &Vector3::new(2.5, 0.5, 0.0));
        assert!(g.cell_members((0, 0)).is_empty());
        assert_eq!(g.cell_members((1, 0)), &[eid(1)]);
    }

    #[test]
    fn move_within_cell_is_structural_noop() {
        let mut g = GridIndex::new(2.0);
        g.insert_or_move(eid(1), &Vector3::new(0.5, 0.5, 0.0));
        g.insert_or_move(eid(1), &Vector3::new(0.6, 0.4, 0.0));
        assert_eq!(g.cell_members((0, 0)), &[eid(1)]);
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn two_landmarks_share_cell() {
        let mut g = GridIndex::new(2.0);
        g.insert_or_move(eid(1), &Vector3::new(0.5, 0.5, 0.0));
        g.insert_or_move(eid(2), &Vector3::new(1.5, 1.5, 3.0));
        assert_eq!(g.cell_members((0, 0)).len(), 2);
    }

    #[test]
    fn hull_square_with_interior_point() {
        let pts = vec![
            Vector2::new(0.0, 0.0),
            Vector2::new(1.0, 0.0),
            Vector2::new(1.0, 1.0),
            Vector2::new(0.0, 1.0),
            Vector2::new(0.5, 0.5),
        ];
        assert_eq!(convex_hull_2d(&pts).unwrap().len(), 4);
    }

    #[test]
    fn hull_triangle_and_degenerate() {
        let tri = vec![Vector2::new(0.0, 0.0), Vector2::new(1.0, 0.0), Vector2::new(0.0, 1.0)];
        assert_eq!(convex_hull_2d(&tri).unwrap().len(), 3);
        let line: Vec<_> = (0..5).map(|i| Vector2::new(i as f64, 2.0 * i as f64)).collect();
        assert_eq!(convex_hull_2d(&line), Err(GridError::Degenerate));
        assert_eq!(convex_hull_2d(&line[..2]), Err(GridError::TooFewPoints(2)));
    }

    #[test]
    fn hull_of_pitched_frustum_shadow() {
        // Camera pitched down: near-face shadow nests inside the far-face
        // trapezoid, leaving a 6-vertex hull of the 8 projected points.
        let k = CameraIntrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 64.0,
            cy: 64.0,
            width: 128,
            height: 128,
            depth_min: 1.0,
            depth_max: 10.0,
        };
        let pose = Pose::new(
            nalgebra::UnitQuaternion::from_scaled_axis(Vector3::x() * -1.2),
            Vector3::new(0.0, 0.0, 2.0),
        );
        let verts = frustum_vertices(&k, &pose);
        let flat: Vec<Vector2<f64>> = verts.iter().map(|v| Vector2::new(v.x, v.y)).collect();
        // Brute-force oracle: a vertex is on the hull iff it is not a strict
        // convex combination of the rest; count extreme points directly.
        let hull = convex_hull_2d(&flat).unwrap();
        let mut extreme = 0;
        for p in &flat {
            let on = hull.iter().any(|h| (h - p).norm() < 1e-9);
            if on {
                extreme += 1;
            }
        }
        assert_eq!(hull.len(), extreme);
        assert_eq!(hull.len(), 6);
    }

    #[test]
    fn point_in_hull_boundary_inclusive() {
        let hull = vec![Vector2::new(0.0, 0.0), Vector2::new(2.0, 0.0), Vector2::new(0.0, 2.0)];
        assert!(point_in_hull(&Vector2::new(0.0, 0.0), &hull, 0.0));
        assert!(point_in_hull(&Vector2::new(1.0, 0.0), &hull, 0.0));
        assert!(!point_in_hull(&Vector2::new(-0.1, 0.0), &hull, 0.0));
        assert!(point_in_hull(&Vector2::new(-0.1, 0.0), &hull, 0.2));
    }

    fn test_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 64.0,
            cy: 64.0,
            width: 128,
            height: 128,
            depth_min: 1.0,
            depth_max: 10.0,
        }
    }

    fn add_landmark(map: &mut MapRecord, seq: u64, pos: Vector3<f64>) {
        map.upsert_landmark(Landmark {
            id: eid(seq),
            position_w: pos,
            descriptor: Landmark::descriptor_for_tag(seq),
            observing_keyframes: Default::default(),
            last_updated_by: 1,
            map_id: map.map_id,
        })
        .unwrap();
    }

    #[test]
    fn retrieve_empty_map() {
        let map = MapRecord::new(1);
        assert!(retrieve_in_view(&map, &test_intrinsics(), &Pose::identity()).is_empty());
    }

    #[test]
    fn retrieve_single_visible_landmark() {
        let mut map = MapRecord::new(1);
        add_landmark(&mut map, 1, Vector3::new(0.0, 0.0, 3.0));
        let got = retrieve_in_view(&map, &test_intrinsics(), &Pose::identity());
        assert_eq!(got, vec![eid(1)]);
    }

    #[test]
    fn retrieve_skips_landmark_behind_camera() {
        let mut map = MapRecord::new(1);
        add_landmark(&mut map, 1, Vector3::new(0.0, 0.0, -3.0));
        assert!(retrieve_in_view(&map, &test_intrinsics(), &Pose::identity()).is_empty());
    }

    fn random_pose(rng: &mut StdRng) -> Pose {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let rot = if axis.norm() < 1e-6 {
            nalgebra::UnitQuaternion::identity()
        } else {
            nalgebra::UnitQuaternion::from_scaled_axis(axis.normalize() * rng.gen_range(0.0..3.0))
        };
        Pose::new(
            rot,
            Vector3::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(0.0..2.0)),
        )
    }

    #[test]
    fn retrieve_matches_brute_force_oracle() {
        let mut rng = StdRng::seed_from_u64(42);
        let k = test_intrinsics();
        for trial in 0..20 {
            let mut map = MapRecord::new(1);
            for seq in 0..500u64 {
                add_landmark(
                    &mut map,
                    seq + 1,
                    Vector3::new(
                        rng.gen_range(-25.0..25.0),
                        rng.gen_range(-25.0..25.0),
                        rng.gen_range(0.2..3.0),
                    ),
                );
            }
            let pose = random_pose(&mut rng);
            let cam_from_world = pose.inverse();
            let mut expected: Vec<ElementId> = map
                .landmarks
                .values()
                .filter(|lm| project(&k, &cam_from_world, &lm.position_w).is_some())
                .map(|lm| lm.id)
                .collect();
            expected.sort_unstable();
            let (got, stats) = retrieve_in_view_counted(&map, &k, &pose);
            assert_eq!(got, expected, "trial {trial}");
            assert!(stats.cells_visited <= stats.bbox_cells);
        }
    }

    #[test]
    fn index_consistency_after_random_churn() {
        let mut rng = StdRng::seed_from_u64(7);
        let mut map = MapRecord::new(1);
        let mut live: Vec<u64> = Vec::new();
        for step in 0..100_000u64 {
            let op = rng.gen_range(0..10);
            if op < 6 || live.is_empty() {
                let seq = step + 1;
                add_landmark(
                    &mut map,
                    seq,
                    Vector3::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), 1.0),
                );
                live.push(seq);
            } else if op < 9 {
                let seq = live[rng.gen_range(0..live.len())];
                let mut lm = map.landmarks[&eid(seq)].clone();
                lm.position_w = Vector3::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), 1.0);
                map.upsert_landmark(lm).unwrap();
            } else {
                let idx = rng.gen_range(0..live.len());
                let seq = live.swap_remove(idx);
                map.prune(&[(crate::map::ElementKind::Landmark, eid(seq))]);
            }
        }
        map.audit().unwrap();
    }
}
