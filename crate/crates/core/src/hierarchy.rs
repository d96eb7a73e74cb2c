//! Multi-scale point hierarchy built by voxel-barycenter grid subsampling.
//!
//! Every level is aggregated directly from the input cloud (never from the
//! previous level). Level `s` (1-based) uses voxel edge `omega * gamma^(s-1)`;
//! the global voxel is summarized by the mean of the input.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scene_io::{compute_canonical_frame, save_point_cloud, PointCloud};
use crate::Vec3;

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleLevel {
    /// 1-based level index (finest = 1).
    pub level_index: usize,
    pub voxel_edge: f64,
    pub representatives: Vec<Vec3>,
    /// Input points merged into each representative.
    pub source_counts: Vec<usize>,
}

impl ScaleLevel {
    pub fn len(&self) -> usize {
        self.representatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.representatives.is_empty()
    }

    pub fn as_cloud(&self) -> PointCloud {
        PointCloud {
            positions: self.representatives.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub omega: f64,
    pub gamma: f64,
}

impl Schedule {
    pub fn edge(&self, level_index: usize) -> f64 {
        self.omega * self.gamma.powi(level_index as i32 - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointHierarchy {
    /// Local levels ordered fine → coarse.
    pub levels: Vec<ScaleLevel>,
    pub global_center: Vec3,
    pub schedule: Schedule,
    /// Origin of the voxel lattice shared by all levels.
    pub anchor: Vec3,
}

impl PointHierarchy {
    pub fn num_local_levels(&self) -> usize {
        self.levels.len()
    }
}

/// Integer cell of `p` in a lattice of edge `edge` anchored at `anchor`.
#[inline]
pub fn cell_of(p: &Vec3, anchor: &Vec3, edge: f64) -> (i64, i64, i64) {
    (
        ((p.x - anchor.x) / edge).floor() as i64,
        ((p.y - anchor.y) / edge).floor() as i64,
        ((p.z - anchor.z) / edge).floor() as i64,
    )
}

fn lex_cmp(a: &Vec3, b: &Vec3) -> std::cmp::Ordering {
    a.x.total_cmp(&b.x)
        .then(a.y.total_cmp(&b.y))
        .then(a.z.total_cmp(&b.z))
}

/// Grid subsampling with cells anchored at the coordinate origin.
pub fn grid_subsample(cloud: &PointCloud, voxel_edge: f64) -> Result<ScaleLevel> {
    grid_subsample_anchored(cloud, voxel_edge, &Vec3::zeros(), 1)
}

/// One barycenter per non-empty cell, in ascending lexicographic cell order.
///
/// Members of a cell are summed in sorted coordinate order, so the result
/// does not depend on the order of the input points.
pub fn grid_subsample_anchored(
    cloud: &PointCloud,
    voxel_edge: f64,
    anchor: &Vec3,
    level_index: usize,
) -> Result<ScaleLevel> {
    if !(voxel_edge > 0.0 && voxel_edge.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "voxel edge must be positive, got {voxel_edge}"
        )));
    }
    let mut cells: BTreeMap<(i64, i64, i64), Vec<Vec3>> = BTreeMap::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        if !p.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite(format!("point {i} has a non-finite coordinate")));
        }
        cells.entry(cell_of(p, anchor, voxel_edge)).or_default().push(*p);
    }
    let mut representatives = Vec::with_capacity(cells.len());
    let mut source_counts = Vec::with_capacity(cells.len());
    for (_, mut members) in cells {
        members.sort_by(lex_cmp);
        let sum = members.iter().fold(Vec3::zeros(), |acc, p| acc + p);
        representatives.push(sum / members.len() as f64);
        source_counts.push(members.len());
    }
    Ok(ScaleLevel {
        level_index,
        voxel_edge,
        representatives,
        source_counts,
    })
}

/// Builds levels `1..=num_local_levels` plus the global center.
///
/// The lattice is anchored at the cloud centroid (the canonical-frame origin).
pub fn build_hierarchy(
    cloud: &PointCloud,
    omega: f64,
    gamma: f64,
    num_local_levels: usize,
) -> Result<PointHierarchy> {
    if !(omega > 0.0) {
        return Err(Error::InvalidArgument(format!("omega must be positive, got {omega}")));
    }
    if !(gamma > 1.0) {
        return Err(Error::InvalidArgument(format!("gamma must exceed 1, got {gamma}")));
    }
    let schedule = Schedule { omega, gamma };
    let anchor = cloud.centroid().unwrap_or_else(Vec3::zeros);
    let levels = (1..=num_local_levels)
        .map(|s| grid_subsample_anchored(cloud, schedule.edge(s), &anchor, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(PointHierarchy {
        levels,
        global_center: anchor,
        schedule,
        anchor,
    })
}

/// Picks `(omega, gamma)` from the cloud: `omega` is twice the median
/// nearest-neighbor spacing, `gamma` makes the coarsest local edge one eighth
/// of the canonical bounding-box diagonal (never below 1.05).
pub fn auto_schedule(cloud: &PointCloud, num_local_levels: usize) -> Result<(f64, f64)> {
    if cloud.len() < 2 {
        return Err(Error::Degenerate(format!(
            "auto schedule needs at least 2 points, got {}",
            cloud.len()
        )));
    }
    let pts = &cloud.positions;
    let mut nn: Vec<f64> = pts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            pts.iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| (p - q).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    nn.sort_by(f64::total_cmp);
    let m = nn.len();
    let median = if m % 2 == 1 {
        nn[m / 2]
    } else {
        0.5 * (nn[m / 2 - 1] + nn[m / 2])
    };
    if median <= 0.0 {
        return Err(Error::Degenerate("median nearest-neighbor spacing is zero".into()));
    }
    let omega = 2.0 * median;

    let diagonal = match compute_canonical_frame(cloud, 0.0) {
        Ok(frame) => {
            let mut lo = Vec3::repeat(f64::INFINITY);
            let mut hi = Vec3::repeat(f64::NEG_INFINITY);
            for p in pts {
                let y = frame.rotation.tr_mul(&(p + frame.translation));
                lo = lo.inf(&y);
                hi = hi.sup(&y);
            }
            (hi - lo).norm()
        }
        Err(_) => {
            let lo = pts.iter().fold(Vec3::repeat(f64::INFINITY), |a, p| a.inf(p));
            let hi = pts.iter().fold(Vec3::repeat(f64::NEG_INFINITY), |a, p| a.sup(p));
            (hi - lo).norm()
        }
    };
    let gamma = if num_local_levels >= 2 {
        let ratio = diagonal / 8.0 / omega;
        ratio.powf(1.0 / (num_local_levels - 1) as f64).max(1.05)
    } else {
        2.0
    };
    Ok((omega, gamma))
}

/// `x` rounded to 12 significant digits, so `0.004 * 1.6^2` prints as `0.01024`.
fn round_sig(x: f64) -> f64 {
    format!("{x:.11e}").parse().unwrap_or(x)
}

/// Writes `level_<s>.ply` for every level and a `manifest.txt` of edges and counts.
pub fn dump_hierarchy(dir: impl AsRef<Path>, h: &PointHierarchy) -> Result<String> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "# omega = {:?}", h.schedule.omega);
    let _ = writeln!(manifest, "# gamma = {:?}", h.schedule.gamma);
    let _ = writeln!(
        manifest,
        "global center {:?} {:?} {:?}",
        h.global_center.x, h.global_center.y, h.global_center.z
    );
    for level in &h.levels {
        let _ = writeln!(
            manifest,
            "level {} edge {:?} points {} sources {}",
            level.level_index,
            round_sig(level.voxel_edge),
            level.len(),
            level.source_counts.iter().sum::<usize>()
        );
        save_point_cloud(dir.join(format!("level_{}.ply", level.level_index)), &level.as_cloud())?;
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, &manifest).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
