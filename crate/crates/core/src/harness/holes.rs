//! Removal balls that carve holes into point clouds.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scene_io::PointCloud;
use crate::Vec3;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HoleSpec {
    /// `(center, radius)` balls.
    pub balls: Vec<(Vec3, f64)>,
    /// Fraction of the source cloud removed by the balls.
    pub removed_fraction: f64,
}

fn inside(p: &Vec3, balls: &[(Vec3, f64)]) -> bool {
    balls.iter().any(|(c, r)| (p - c).norm() <= *r)
}

/// Drops every point within distance `r` of a ball center (boundary
/// included) and reports the removed fraction (0 for an empty cloud).
pub fn punch_holes(cloud: &PointCloud, balls: &[(Vec3, f64)]) -> (PointCloud, f64) {
    let kept = cloud.filter_indexed(|_, p| !inside(p, balls));
    let frac = if cloud.is_empty() {
        0.0
    } else {
        (cloud.len() - kept.len()) as f64 / cloud.len() as f64
    };
    (kept, frac)
}

/// `count` balls centered on seeded random points, sharing the smallest
/// radius (found by bisection) that removes at least `target` of the cloud.
pub fn plan_holes(cloud: &PointCloud, count: usize, target: f64, seed: u64) -> HoleSpec {
    if cloud.is_empty() || count == 0 || target <= 0.0 {
        return HoleSpec::default();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec3> = sample(&mut rng, cloud.len(), count.min(cloud.len()))
        .into_iter()
        .map(|i| cloud.positions[i])
        .collect();
    let frac = |r: f64| {
        let balls: Vec<(Vec3, f64)> = centers.iter().map(|c| (*c, r)).collect();
        punch_holes(cloud, &balls).1
    };
    let (mut lo, mut hi) = (0.0, 1e-3);
    while frac(hi) < target {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if frac(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let balls: Vec<(Vec3, f64)> = centers.iter().map(|c| (*c, hi)).collect();
    let removed_fraction = punch_holes(cloud, &balls).1;
    HoleSpec { balls, removed_fraction }
}

pub fn save_holes(path: impl AsRef<Path>, holes: &HoleSpec) -> Result<()> {
    let path = path.as_ref();
    let mut s = format!("removed_fraction {:?}\n", holes.removed_fraction);
    for (c, r) in &holes.balls {
        let _ = writeln!(s, "ball {:?} {:?} {:?} {:?}", c.x, c.y, c.z, r);
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn load_holes(path: impl AsRef<Path>) -> Result<HoleSpec> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut h = HoleSpec::default();
    for (i, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = |m: &str| Error::Parse { path: path.to_path_buf(), line: i + 1, message: m.to_string() };
        let nums: Vec<f64> = f
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>().map_err(|_| bad("invalid number")))
            .collect::<Result<_>>()?;
        match (f.first().copied(), nums.len()) {
            (None, _) => {}
            (Some("removed_fraction"), 1) => h.removed_fraction = nums[0],
            (Some("ball"), 4) => h.balls.push((Vec3::new(nums[0], nums[1], nums[2]), nums[3])),
            _ => return Err(bad("expected 'removed_fraction f' or 'ball x y z r'")),
        }
    }
    Ok(h)
}
