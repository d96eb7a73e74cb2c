//! Ideal pinhole camera and its plain-text serialization.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::renderer::RayBatch;
use crate::Vec3;

/// Pinhole camera looking down its local −z axis, +y up, image rows growing downward.
///
/// `rotation`/`translation` map world to camera: `x_cam = R x_world + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument("focal lengths must be positive".into()));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("empty resolution".into()));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target` with world `up`.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let true_up = right.cross(&forward);
        // camera-to-world columns: right, up, backward
        let c2w = Matrix3::from_columns(&[right, true_up, -forward]);
        let rotation = c2w.transpose();
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation,
            translation: -(rotation * eye),
            near,
            far,
        }
    }

    pub fn center(&self) -> Vec3 {
        -self.rotation.tr_mul(&self.translation)
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    /// World-space unit direction through the center of pixel (`col`, `row`).
    pub fn pixel_direction(&self, col: usize, row: usize) -> Vec3 {
        let u = col as f64 + 0.5;
        let v = row as f64 + 0.5;
        let d_cam = Vec3::new((u - self.cx) / self.fx, -(v - self.cy) / self.fy, -1.0);
        self.rotation.tr_mul(&d_cam).normalize()
    }

    fn to_line(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{:?} {:?} {:?} {:?} {} {} {:?} {:?}",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.near, self.far
        );
        for r in 0..3 {
            for c in 0..3 {
                let _ = write!(s, " {:?}", self.rotation[(r, c)]);
            }
        }
        for k in 0..3 {
            let _ = write!(s, " {:?}", self.translation[k]);
        }
        s
    }

    fn from_fields(f: &[&str]) -> std::result::Result<Self, String> {
        if f.len() != 20 {
            return Err(format!("expected 20 camera fields, found {}", f.len()));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| format!("invalid number '{}'", f[i]));
        let int = |i: usize| f[i].parse::<usize>().map_err(|_| format!("invalid integer '{}'", f[i]));
        let mut rotation = Matrix3::zeros();
        for r in 0..3 {
            for c in 0..3 {
                rotation[(r, c)] = num(8 + r * 3 + c)?;
            }
        }
        let cam = Camera {
            fx: num(0)?,
            fy: num(1)?,
            cx: num(2)?,
            cy: num(3)?,
            width: int(4)?,
            height: int(5)?,
            near: num(6)?,
            far: num(7)?,
            rotation,
            translation: Vec3::new(num(17)?, num(18)?, num(19)?),
        };
        cam.validate().map_err(|e| e.to_string())?;
        Ok(cam)
    }
}

/// A camera tagged with its split (`train` or `test`).
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedCamera {
    pub split: String,
    pub camera: Camera,
}

/// One camera per line: `split fx fy cx cy width height near far r00..r22 t0 t1 t2`.
pub fn save_cameras(path: impl AsRef<Path>, cams: &[TaggedCamera]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("# split fx fy cx cy width height near far r00 r01 r02 r10 r11 r12 r20 r21 r22 t0 t1 t2\n");
    for c in cams {
        text.push_str(&c.split);
        text.push(' ');
        text.push_str(&c.camera.to_line());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<TaggedCamera>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let (split, rest) = match fields.first() {
            Some(s) if s.parse::<f64>().is_err() => (s.to_string(), &fields[1..]),
            _ => ("train".to_string(), &fields[..]),
        };
        let camera = Camera::from_fields(rest).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
        out.push(TaggedCamera { split, camera });
    }
    Ok(out)
}

/// One ray per listed pixel (row-major index), through the pixel center.
pub fn generate_rays(camera: &Camera, pixel_indices: &[usize]) -> Result<RayBatch> {
    let n = camera.num_pixels();
    let origin = camera.center();
    let mut batch = RayBatch::with_capacity(pixel_indices.len());
    for &idx in pixel_indices {
        if idx >= n {
            return Err(Error::InvalidArgument(format!(
                "pixel index {idx} outside {}x{} image",
                camera.width, camera.height
            )));
        }
        let dir = camera.pixel_direction(idx % camera.width, idx / camera.width);
        batch.push(origin, dir, camera.near, camera.far, None);
    }
    Ok(batch)
}
