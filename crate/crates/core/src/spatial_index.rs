//! Sparse voxel hash over one hierarchy level, with capped ball queries.

use rustc_hash::FxHashMap;

use crate::hierarchy::ScaleLevel;
use crate::Vec3;

/// Level index reserved for the global voxel.
pub const GLOBAL_LEVEL: usize = 0;

type Cell = (i64, i64, i64);

#[derive(Debug, Clone)]
pub struct VoxelHashIndex {
    pub level_index: usize,
    pub voxel_edge: f64,
    pub points: Vec<Vec3>,
    cells: FxHashMap<Cell, Vec<u32>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeighborSet {
    pub level_index: usize,
    /// Indices into the level's representatives, nearest first.
    pub point_indices: Vec<usize>,
    pub distances: Vec<f64>,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.point_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_indices.is_empty()
    }
}

#[inline]
fn cell_key(p: &Vec3, edge: f64) -> Cell {
    (
        (p.x / edge).floor() as i64,
        (p.y / edge).floor() as i64,
        (p.z / edge).floor() as i64,
    )
}

impl VoxelHashIndex {
    pub fn cell_of(&self, p: &Vec3) -> (i64, i64, i64) {
        cell_key(p, self.voxel_edge)
    }

    /// Point indices stored in one cell, in ascending order.
    pub fn cell(&self, key: (i64, i64, i64)) -> &[u32] {
        self.cells.get(&key).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> impl Iterator<Item = (&(i64, i64, i64), &Vec<u32>)> {
        self.cells.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn build_index(level: &ScaleLevel) -> VoxelHashIndex {
    let edge = level.voxel_edge;
    let mut cells: FxHashMap<Cell, Vec<u32>> = FxHashMap::default();
    for (i, p) in level.representatives.iter().enumerate() {
        cells.entry(cell_key(p, edge)).or_default().push(i as u32);
    }
    VoxelHashIndex {
        level_index: level.level_index,
        voxel_edge: edge,
        points: level.representatives.clone(),
        cells,
    }
}

/// Points within `tau * voxel_edge` of `q`, nearest first, at most `max_neighbors`.
pub fn ball_query(index: &VoxelHashIndex, q: &Vec3, tau: f64, max_neighbors: usize) -> NeighborSet {
    let mut out = NeighborSet::default();
    ball_query_into(index, q, tau, max_neighbors, &mut out);
    out
}

/// [`ball_query`] writing into a reusable set.
pub fn ball_query_into(
    index: &VoxelHashIndex,
    q: &Vec3,
    tau: f64,
    max_neighbors: usize,
    out: &mut NeighborSet,
) {
    out.level_index = index.level_index;
    out.point_indices.clear();
    out.distances.clear();
    if index.points.is_empty() {
        return;
    }
    let radius = tau * index.voxel_edge;
    let shell = tau.ceil().max(1.0) as i64;
    let (cx, cy, cz) = index.cell_of(q);
    let mut found: Vec<(f64, u32)> = Vec::new();
    for dx in -shell..=shell {
        for dy in -shell..=shell {
            for dz in -shell..=shell {
                let Some(ids) = index.cells.get(&(cx + dx, cy + dy, cz + dz)) else {
                    continue;
                };
                for &i in ids {
                    let d = (index.points[i as usize] - q).norm();
                    if d <= radius {
                        found.push((d, i));
                    }
                }
            }
        }
    }
    found.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    found.truncate(max_neighbors);
    for (d, i) in found {
        out.point_indices.push(i as usize);
        out.distances.push(d);
    }
}

/// Levels with at least one neighbor of `q`, ascending by level, followed by
/// the global level ([`GLOBAL_LEVEL`]) which is always valid.
pub fn valid_scales(
    indices: &[VoxelHashIndex],
    q: &Vec3,
    tau: f64,
    max_neighbors: usize,
) -> Vec<(usize, NeighborSet)> {
    let mut out: Vec<(usize, NeighborSet)> = indices
        .iter()
        .map(|idx| (idx.level_index, ball_query(idx, q, tau, max_neighbors)))
        .filter(|(_, n)| !n.is_empty())
        .collect();
    out.sort_by_key(|(s, _)| *s);
    out.push((
        GLOBAL_LEVEL,
        NeighborSet {
            level_index: GLOBAL_LEVEL,
            ..Default::default()
        },
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::{build_hierarchy, grid_subsample};
    use crate::scene_io::PointCloud;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn level_of(points: Vec<Vec3>, edge: f64) -> ScaleLevel {
        ScaleLevel {
            level_index: 1,
            voxel_edge: edge,
            source_counts: vec![1; points.len()],
            representatives: points,
        }
    }

    fn exhaustive(points: &[Vec3], q: &Vec3, radius: f64, cap: usize) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, (p - q).norm()))
            .filter(|(_, d)| *d <= radius)
            .collect();
        v.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        v.truncate(cap);
        v
    }

    #[test]
    fn empty_and_single() {
        let idx = build_index(&level_of(vec![], 0.5));
        assert!(ball_query(&idx, &Vec3::zeros(), 1.0, 8).is_empty());
        let idx = build_index(&level_of(vec![Vec3::zeros()], 0.5));
        let n = ball_query(&idx, &Vec3::zeros(), 1.0, 8);
        assert_eq!(n.point_indices, vec![0]);
        assert_eq!(n.distances, vec![0.0]);
        assert!(ball_query(&idx, &Vec3::new(0.6, 0.0, 0.0), 1.0, 8).is_empty());
    }

    #[test]
    fn contents_match_bucketing() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec3> = (0..1000).map(|_| Vec3::new(rng.random(), rng.random(), rng.random()) * 2.0).collect();
        let idx = build_index(&level_of(pts.clone(), 0.3));
        let mut total = 0;
        for (key, ids) in idx.cells() {
            for &i in ids {
                let p = pts[i as usize];
                assert_eq!(*key, ((p.x / 0.3).floor() as i64, (p.y / 0.3).floor() as i64, (p.z / 0.3).floor() as i64));
            }
            total += ids.len();
        }
        assert_eq!(total, pts.len());
    }

    #[test]
    fn ties_break_by_index() {
        let pts = vec![Vec3::new(0.1, 0.0, 0.0), Vec3::new(-0.1, 0.0, 0.0), Vec3::new(0.0, 0.1, 0.0)];
        let idx = build_index(&level_of(pts, 0.5));
        let n = ball_query(&idx, &Vec3::zeros(), 1.0, 2);
        assert_eq!(n.point_indices, vec![0, 1]);
    }

    #[test]
    fn hole_leaves_only_coarse_levels() {
        // dense lattice with a spherical hole of radius 0.3 around the origin
        let mut pts = Vec::new();
        for i in -20..=20 {
            for j in -20..=20 {
                for k in -2..=2 {
                    let p = Vec3::new(i as f64 * 0.05, j as f64 * 0.05, k as f64 * 0.05);
                    if p.norm() > 0.3 {
                        pts.push(p);
                    }
                }
            }
        }
        let cloud = PointCloud::new(pts).unwrap();
        // edges 0.1, 0.2, 0.4, 0.8
        let h = build_hierarchy(&cloud, 0.1, 2.0, 4).unwrap();
        let indices: Vec<_> = h.levels.iter().map(build_index).collect();
        let levels: Vec<usize> = valid_scales(&indices, &Vec3::zeros(), 1.0, 8).iter().map(|(s, _)| *s).collect();
        assert_eq!(levels, vec![3, 4, GLOBAL_LEVEL]);

        let dense: Vec<usize> = valid_scales(&indices, &Vec3::new(0.7, 0.7, 0.0), 1.0, 8).iter().map(|(s, _)| *s).collect();
        assert_eq!(dense, vec![1, 2, 3, 4, GLOBAL_LEVEL]);

        let far: Vec<usize> = valid_scales(&indices, &Vec3::new(50.0, 0.0, 0.0), 1.0, 8).iter().map(|(s, _)| *s).collect();
        assert_eq!(far, vec![GLOBAL_LEVEL]);
    }

    #[test]
    fn large_tau_scans_wider_shell() {
        let pts = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.55, 0.0, 0.0)];
        let idx = build_index(&level_of(pts, 0.2));
        let n = ball_query(&idx, &Vec3::new(0.01, 0.0, 0.0), 3.0, 8);
        assert_eq!(n.point_indices, vec![0, 1]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn matches_exhaustive_scan(seed in 0u64..10_000, n in 1usize..600, edge in 0.05f64..0.4, tau in 0.2f64..2.5, cap in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec3> = (0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
            let level = grid_subsample(&PointCloud::new(pts).unwrap(), edge * 0.3).unwrap();
            let idx = build_index(&level);
            for _ in 0..40 {
                let q = Vec3::new(rng.random::<f64>() * 1.2 - 0.1, rng.random(), rng.random());
                let got = ball_query(&idx, &q, tau, cap);
                let want = exhaustive(&level.representatives, &q, tau * level.voxel_edge, cap);
                prop_assert_eq!(got.point_indices, want.iter().map(|x| x.0).collect::<Vec<_>>());
                prop_assert_eq!(got.distances, want.iter().map(|x| x.1).collect::<Vec<_>>());
            }
        }
    }
}
