//! Bilinear tri-plane lookups.
//!
//! A plane of resolution `r` stores `r × r` feature vectors of width `D`,
//! row-major as `[ia][ib][D]`, where `ia` runs along the plane's first axis.
//! Grid nodes sit at `-1, …, 1` inclusive on each axis (corner aligned).

use crate::Vec3;

/// Plane names and the coordinate axes they span.
pub const PLANES: [(&str, usize, usize); 3] = [("xy", 0, 1), ("yz", 1, 2), ("xz", 0, 2)];

/// Four `(node index, weight)` taps of the point `(a, b)` on an `r × r` grid.
/// Coordinates are clamped into `[-1, 1]` first; `node = ia * r + ib`.
#[inline]
pub fn bilinear_taps(a: f64, b: f64, r: usize) -> [(usize, f64); 4] {
    debug_assert!(r >= 2);
    let span = (r - 1) as f64;
    let ga = (a.clamp(-1.0, 1.0) + 1.0) * 0.5 * span;
    let gb = (b.clamp(-1.0, 1.0) + 1.0) * 0.5 * span;
    let ia = (ga.floor() as usize).min(r - 2);
    let ib = (gb.floor() as usize).min(r - 2);
    let fa = ga - ia as f64;
    let fb = gb - ib as f64;
    [
        (ia * r + ib, (1.0 - fa) * (1.0 - fb)),
        (ia * r + ib + 1, (1.0 - fa) * fb),
        ((ia + 1) * r + ib, fa * (1.0 - fb)),
        ((ia + 1) * r + ib + 1, fa * fb),
    ]
}

/// Taps for the three planes at local coordinate `u`, in [`PLANES`] order.
#[inline]
pub fn triplane_taps(u: &Vec3, r: usize) -> [[(usize, f64); 4]; 3] {
    PLANES.map(|(_, a, b)| bilinear_taps(u[a], u[b], r))
}

/// Direct evaluation of `Σ_planes bilinear(plane, u)` for planes stored as
/// `[r, r, D]` slices.
pub fn eval_triplane(planes: [&[f64]; 3], r: usize, d: usize, u: &Vec3) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for (plane, taps) in planes.iter().zip(triplane_taps(u, r)) {
        for (node, w) in taps {
            for (o, v) in out.iter_mut().zip(&plane[node * d..(node + 1) * d]) {
                *o += w * v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_planes(seed: u64, r: usize, d: usize) -> [Vec<f64>; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        std::array::from_fn(|_| (0..r * r * d).map(|_| rng.random::<f64>() - 0.5).collect())
    }

    // textbook bilinear on the continuous grid coordinate
    fn oracle(plane: &[f64], r: usize, d: usize, a: f64, b: f64) -> Vec<f64> {
        let to_grid = |x: f64| (x.clamp(-1.0, 1.0) + 1.0) / 2.0 * (r as f64 - 1.0);
        let (x, y) = (to_grid(a), to_grid(b));
        let x0 = (x.floor() as usize).min(r - 2);
        let y0 = (y.floor() as usize).min(r - 2);
        let (tx, ty) = (x - x0 as f64, y - y0 as f64);
        let at = |i: usize, j: usize, k: usize| plane[(i * r + j) * d + k];
        (0..d)
            .map(|k| {
                let top = at(x0, y0, k) + (at(x0, y0 + 1, k) - at(x0, y0, k)) * ty;
                let bot = at(x0 + 1, y0, k) + (at(x0 + 1, y0 + 1, k) - at(x0 + 1, y0, k)) * ty;
                top + (bot - top) * tx
            })
            .collect()
    }

    #[test]
    fn corner_reads_stored_vectors() {
        let d = 3;
        let p = random_planes(1, 5, d);
        let u = Vec3::new(-1.0, 1.0, 0.5);
        let got = eval_triplane([&p[0], &p[1], &p[2]], 5, d, &u);
        // xy -> (0, 4), yz -> (4, 3), xz -> (0, 3)
        for k in 0..d {
            let want = p[0][4 * d + k] + p[1][(4 * 5 + 3) * d + k] + p[2][3 * d + k];
            assert!((got[k] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn midpoint_of_two_by_two() {
        let (a, b, c, dd) = (1.0, 2.0, 4.0, 8.0);
        let plane = [a, b, c, dd];
        let zero = [0.0; 4];
        let got = eval_triplane([&plane, &zero, &zero], 2, 1, &Vec3::zeros());
        assert_eq!(got[0], (a + b + c + dd) / 4.0);
    }

    #[test]
    fn only_xy_plane_ignores_z() {
        let p = random_planes(2, 4, 2);
        let zero = vec![0.0; p[0].len()];
        let u0 = eval_triplane([&p[0], &zero, &zero], 4, 2, &Vec3::new(0.3, -0.2, -0.9));
        let u1 = eval_triplane([&p[0], &zero, &zero], 4, 2, &Vec3::new(0.3, -0.2, 0.7));
        assert_eq!(u0, u1);
    }

    proptest! {
        #[test]
        fn matches_direct_bilinear(seed in 0u64..1000, x in -1.3f64..1.3, y in -1.3f64..1.3, z in -1.3f64..1.3) {
            let (r, d) = (4, 5);
            let p = random_planes(seed, r, d);
            let u = Vec3::new(x, y, z);
            let got = eval_triplane([&p[0], &p[1], &p[2]], r, d, &u);
            let mut want = vec![0.0; d];
            for (k, (_, a, b)) in PLANES.iter().enumerate() {
                for (w, o) in want.iter_mut().zip(oracle(&p[k], r, d, u[*a], u[*b])) {
                    *w += o;
                }
            }
            for k in 0..d {
                prop_assert!((got[k] - want[k]).abs() < 1e-12);
            }
        }

        #[test]
        fn tap_weights_sum_to_one(a in -2.0f64..2.0, b in -2.0f64..2.0, r in 2usize..9) {
            let s: f64 = bilinear_taps(a, b, r).iter().map(|t| t.1).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
