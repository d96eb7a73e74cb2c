//! PCA canonical frame mapping a cloud into `[-1, 1]³`.

use nalgebra::{Matrix3, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scene_io::PointCloud;
use crate::Vec3;

/// Fractional margin added around the cloud's extent along each axis.
pub const DEFAULT_FRAME_MARGIN: f64 = 0.01;

/// World → canonical mapping `x ↦ (Rᵀ (x + t)) ⊘ s`.
///
/// Columns of `rotation` are the principal axes ordered by descending
/// variance; `translation` is the negated centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalFrame {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    pub scale: Vec3,
    /// Number of axes whose extent was zero and got unit scale.
    pub padded_axes: usize,
}

impl CanonicalFrame {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
            scale: Vec3::repeat(1.0),
            padded_axes: 0,
        }
    }

    /// Axis-aligned frame centered at `center` with half-extents `half_extent`.
    pub fn axis_aligned(center: Vec3, half_extent: Vec3) -> Result<Self> {
        if !half_extent.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "frame half extents must be positive, got {half_extent:?}"
            )));
        }
        Ok(Self {
            rotation: Matrix3::identity(),
            translation: -center,
            scale: half_extent,
            padded_axes: 0,
        })
    }

    #[inline]
    pub fn to_canonical(&self, x: &Vec3) -> Vec3 {
        let y = self.rotation.tr_mul(&(x + self.translation));
        y.component_div(&self.scale)
    }

    pub fn to_world(&self, c: &Vec3) -> Vec3 {
        self.rotation * c.component_mul(&self.scale) - self.translation
    }

    /// Keeps only the per-axis scale: identity rotation, zero translation,
    /// scale equal to the largest absolute world coordinate per axis plus margin.
    pub fn scale_only(cloud: &PointCloud, margin: f64) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::Degenerate("empty cloud".into()));
        }
        let mut ext = Vec3::zeros();
        for p in &cloud.positions {
            for k in 0..3 {
                ext[k] = ext[k].max(p[k].abs());
            }
        }
        let mut padded = 0;
        for k in 0..3 {
            if ext[k] <= 0.0 {
                ext[k] = 1.0;
                padded += 1;
            } else {
                ext[k] *= 1.0 + margin;
            }
        }
        if padded == 3 {
            return Err(Error::Degenerate("all points at the origin".into()));
        }
        Ok(Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
            scale: ext,
            padded_axes: padded,
        })
    }
}

/// Principal-component frame with a `margin` fraction of slack on every axis.
///
/// Eigenvectors are ordered by descending eigenvalue, each is signed so its
/// first non-negligible component is positive, and the third axis is flipped
/// if needed to make the basis right-handed.
pub fn compute_canonical_frame(cloud: &PointCloud, margin: f64) -> Result<CanonicalFrame> {
    if cloud.len() < 4 {
        return Err(Error::Degenerate(format!(
            "canonical frame needs at least 4 points, got {}",
            cloud.len()
        )));
    }
    let centroid = cloud.centroid().expect("non-empty");
    let mut cov = Matrix3::zeros();
    for p in &cloud.positions {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= cloud.len() as f64;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambda_max = eig.eigenvalues[order[0]];
    let spread = cloud
        .positions
        .iter()
        .map(|p| (p - centroid).norm())
        .fold(0.0, f64::max);
    if lambda_max <= 0.0 || spread <= 0.0 {
        return Err(Error::Degenerate("all points coincide".into()));
    }

    let mut rotation = Matrix3::zeros();
    for (col, &k) in order.iter().enumerate() {
        let mut v: Vec3 = eig.eigenvectors.column(k).into_owned();
        if let Some(first) = v.iter().copied().find(|c| c.abs() > 1e-12) {
            if first < 0.0 {
                v = -v;
            }
        }
        rotation.set_column(col, &v);
    }
    if rotation.determinant() < 0.0 {
        let c = -rotation.column(2).into_owned();
        rotation.set_column(2, &c);
    }

    let translation = -centroid;
    let mut extent = Vec3::zeros();
    for p in &cloud.positions {
        let y = rotation.tr_mul(&(p + translation));
        for k in 0..3 {
            extent[k] = extent[k].max(y[k].abs());
        }
    }
    let mut scale = Vec3::zeros();
    let mut padded_axes = 0;
    for k in 0..3 {
        if extent[k] <= 1e-12 * spread {
            scale[k] = 1.0;
            padded_axes += 1;
        } else {
            scale[k] = extent[k] * (1.0 + margin);
        }
    }
    Ok(CanonicalFrame {
        rotation,
        translation,
        scale,
        padded_axes,
    })
}
