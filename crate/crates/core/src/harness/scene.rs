//! Analytic soft-primitive scenes with exact ground truth.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::parse_pairs;
use crate::error::{Error, Result};
use crate::renderer::{composite, midpoint_samples};
use crate::scene_io::{
    load_cameras, load_image, load_point_cloud, save_cameras, save_image, save_point_cloud, Camera, Image,
    PointCloud, TaggedCamera,
};
use crate::Vec3;

use super::holes::{load_holes, plan_holes, punch_holes, save_holes, HoleSpec};

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Box { center: Vec3, half: Vec3 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: [f64; 3],
}

impl Primitive {
    /// Signed distance, negative inside.
    pub fn sdf(&self, p: &Vec3) -> f64 {
        match &self.shape {
            Shape::Sphere { center, radius } => (p - center).norm() - radius,
            Shape::Box { center, half } => {
                let q = (p - center).abs() - half;
                let outside = q.map(|v| v.max(0.0)).norm();
                outside + q.max().min(0.0)
            }
        }
    }

    pub fn area(&self) -> f64 {
        match &self.shape {
            Shape::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
            Shape::Box { half, .. } => 8.0 * (half.x * half.y + half.y * half.z + half.x * half.z),
        }
    }

    /// Uniform point on the surface.
    pub fn sample_surface<R: Rng>(&self, rng: &mut R) -> Vec3 {
        match &self.shape {
            Shape::Sphere { center, radius } => {
                let z: f64 = rng.random_range(-1.0..=1.0);
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                let r = (1.0 - z * z).max(0.0).sqrt();
                center + Vec3::new(r * phi.cos(), r * phi.sin(), z) * *radius
            }
            Shape::Box { center, half } => {
                // face pairs by area: normal axis x, y, z
                let areas = [half.y * half.z, half.x * half.z, half.x * half.y];
                let mut pick = rng.random_range(0.0..areas.iter().sum::<f64>());
                let mut axis = 0;
                while axis < 2 && pick >= areas[axis] {
                    pick -= areas[axis];
                    axis += 1;
                }
                let mut p = Vec3::zeros();
                for k in 0..3 {
                    p[k] = if k == axis {
                        if rng.random::<bool>() { half[k] } else { -half[k] }
                    } else {
                        rng.random_range(-half[k]..=half[k])
                    };
                }
                center + p
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match &self.shape {
            Shape::Sphere { center, radius } => *radius > 0.0 && radius.is_finite() && center.iter().all(|v| v.is_finite()),
            Shape::Box { center, half } => {
                half.iter().all(|v| *v > 0.0 && v.is_finite()) && center.iter().all(|v| v.is_finite())
            }
        };
        if !ok || !self.albedo.iter().all(|a| (0.0..=1.0).contains(a)) {
            return Err(Error::InvalidArgument(format!("invalid primitive {self:?}")));
        }
        Ok(())
    }

    fn to_value(&self) -> String {
        let a = self.albedo;
        match &self.shape {
            Shape::Sphere { center: c, radius } => {
                format!("sphere {:?} {:?} {:?} {radius:?} {:?} {:?} {:?}", c.x, c.y, c.z, a[0], a[1], a[2])
            }
            Shape::Box { center: c, half: h } => format!(
                "box {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?}",
                c.x, c.y, c.z, h.x, h.y, h.z, a[0], a[1], a[2]
            ),
        }
    }

    fn parse(v: &str) -> std::result::Result<Self, String> {
        let f: Vec<&str> = v.split_whitespace().collect();
        let nums: Vec<f64> = f
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>().map_err(|_| format!("invalid number '{s}'")))
            .collect::<std::result::Result<_, _>>()?;
        let p = match (f.first().copied(), nums.len()) {
            (Some("sphere"), 7) => Primitive {
                shape: Shape::Sphere { center: Vec3::new(nums[0], nums[1], nums[2]), radius: nums[3] },
                albedo: [nums[4], nums[5], nums[6]],
            },
            (Some("box"), 9) => Primitive {
                shape: Shape::Box {
                    center: Vec3::new(nums[0], nums[1], nums[2]),
                    half: Vec3::new(nums[3], nums[4], nums[5]),
                },
                albedo: [nums[6], nums[7], nums[8]],
            },
            _ => {
                return Err(format!(
                    "expected 'sphere cx cy cz r R G B' or 'box cx cy cz hx hy hz R G B', got '{v}'"
                ))
            }
        };
        p.validate().map_err(|e| e.to_string())?;
        Ok(p)
    }
}

/// Scene description in the same `key = value` format as run configs;
/// primitives are listed as `primitive.N = ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels.
    pub focal: f64,
    pub num_train_views: usize,
    pub num_test_views: usize,
    pub ring_radius: f64,
    pub ring_height: f64,
    pub near: f64,
    pub far: f64,
    pub num_points: usize,
    pub sigma_max: f64,
    pub softness: f64,
    pub texture_amplitude: f64,
    pub texture_frequency: f64,
    pub gt_samples: usize,
    pub hole_count: usize,
    pub hole_fraction: f64,
    pub background: [f64; 3],
    pub seed: u64,
}

const SPEC_KEYS: &[&str] = &[
    "width",
    "height",
    "focal",
    "num_train_views",
    "num_test_views",
    "ring_radius",
    "ring_height",
    "near",
    "far",
    "num_points",
    "sigma_max",
    "softness",
    "texture_amplitude",
    "texture_frequency",
    "gt_samples",
    "hole_count",
    "hole_fraction",
    "background",
    "seed",
    "primitive.N",
];

impl SceneSpec {
    /// The standard desk-scale toy scene: three textured primitives, eight
    /// 32×32 training views and two interleaved held-out views.
    pub fn toy() -> Self {
        SceneSpec {
            primitives: vec![
                Primitive {
                    shape: Shape::Sphere { center: Vec3::new(0.0, 0.0, 0.0), radius: 0.5 },
                    albedo: [0.9, 0.35, 0.2],
                },
                Primitive {
                    shape: Shape::Box { center: Vec3::new(0.5, -0.4, -0.25), half: Vec3::new(0.25, 0.25, 0.3) },
                    albedo: [0.2, 0.4, 0.9],
                },
                Primitive {
                    shape: Shape::Sphere { center: Vec3::new(-0.45, 0.45, 0.15), radius: 0.28 },
                    albedo: [0.25, 0.85, 0.3],
                },
            ],
            width: 32,
            height: 32,
            focal: 40.0,
            num_train_views: 8,
            num_test_views: 2,
            ring_radius: 2.6,
            ring_height: 1.0,
            near: 1.2,
            far: 4.4,
            num_points: 3000,
            sigma_max: 40.0,
            softness: 0.015,
            texture_amplitude: 0.6,
            texture_frequency: 9.0,
            gt_samples: 1024,
            hole_count: 6,
            hole_fraction: 0.3,
            background: [1.0, 1.0, 1.0],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidArgument(format!("scene spec: {m}")));
        if self.primitives.is_empty() {
            return fail("at least one primitive is required");
        }
        for p in &self.primitives {
            p.validate()?;
        }
        if self.num_train_views + self.num_test_views < 2 {
            return fail("at least two cameras are required");
        }
        if self.num_train_views == 0 {
            return fail("at least one training view is required");
        }
        if self.width == 0 || self.height == 0 || !(self.focal > 0.0) {
            return fail("image size and focal length must be positive");
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return fail("need 0 < near < far");
        }
        if !(self.sigma_max > 0.0 && self.softness > 0.0) {
            return fail("sigma_max and softness must be positive");
        }
        if !(0.0..1.0).contains(&self.hole_fraction) || !(0.0..=1.0).contains(&self.texture_amplitude) {
            return fail("hole_fraction must lie in [0, 1) and texture_amplitude in [0, 1]");
        }
        if self.gt_samples == 0 || self.num_points == 0 {
            return fail("gt_samples and num_points must be positive");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let b = self.background;
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "focal = {:?}", self.focal);
        let _ = writeln!(s, "num_train_views = {}", self.num_train_views);
        let _ = writeln!(s, "num_test_views = {}", self.num_test_views);
        let _ = writeln!(s, "ring_radius = {:?}", self.ring_radius);
        let _ = writeln!(s, "ring_height = {:?}", self.ring_height);
        let _ = writeln!(s, "near = {:?}", self.near);
        let _ = writeln!(s, "far = {:?}", self.far);
        let _ = writeln!(s, "num_points = {}", self.num_points);
        let _ = writeln!(s, "sigma_max = {:?}", self.sigma_max);
        let _ = writeln!(s, "softness = {:?}", self.softness);
        let _ = writeln!(s, "texture_amplitude = {:?}", self.texture_amplitude);
        let _ = writeln!(s, "texture_frequency = {:?}", self.texture_frequency);
        let _ = writeln!(s, "gt_samples = {}", self.gt_samples);
        let _ = writeln!(s, "hole_count = {}", self.hole_count);
        let _ = writeln!(s, "hole_fraction = {:?}", self.hole_fraction);
        let _ = writeln!(s, "background = {:?},{:?},{:?}", b[0], b[1], b[2]);
        let _ = writeln!(s, "seed = {}", self.seed);
        for (i, p) in self.primitives.iter().enumerate() {
            let _ = writeln!(s, "primitive.{i} = {}", p.to_value());
        }
        s
    }

    /// Parses spec text on top of the toy defaults. Any `primitive.N` key
    /// replaces the default primitive list.
    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let perr = |line: usize, message: String| Error::Parse { path: origin.to_path_buf(), line, message };
        let pairs = parse_pairs(text).map_err(|(l, m)| perr(l, m))?;
        let mut spec = SceneSpec::toy();
        let mut prims: Vec<(usize, Primitive)> = Vec::new();
        for (line, k, v) in pairs {
            let num = |v: &str| v.parse::<f64>().map_err(|_| perr(line, format!("{k}: invalid number '{v}'")));
            let int = |v: &str| v.parse::<usize>().map_err(|_| perr(line, format!("{k}: invalid integer '{v}'")));
            match k.as_str() {
                "width" => spec.width = int(&v)?,
                "height" => spec.height = int(&v)?,
                "focal" => spec.focal = num(&v)?,
                "num_train_views" => spec.num_train_views = int(&v)?,
                "num_test_views" => spec.num_test_views = int(&v)?,
                "ring_radius" => spec.ring_radius = num(&v)?,
                "ring_height" => spec.ring_height = num(&v)?,
                "near" => spec.near = num(&v)?,
                "far" => spec.far = num(&v)?,
                "num_points" => spec.num_points = int(&v)?,
                "sigma_max" => spec.sigma_max = num(&v)?,
                "softness" => spec.softness = num(&v)?,
                "texture_amplitude" => spec.texture_amplitude = num(&v)?,
                "texture_frequency" => spec.texture_frequency = num(&v)?,
                "gt_samples" => spec.gt_samples = int(&v)?,
                "hole_count" => spec.hole_count = int(&v)?,
                "hole_fraction" => spec.hole_fraction = num(&v)?,
                "seed" => spec.seed = v.parse().map_err(|_| perr(line, format!("seed: invalid integer '{v}'")))?,
                "background" => {
                    let c: Vec<f64> = v.split(',').map(|s| num(s.trim())).collect::<Result<_>>()?;
                    if c.len() != 3 {
                        return Err(perr(line, "background: expected r,g,b".into()));
                    }
                    spec.background = [c[0], c[1], c[2]];
                }
                _ => {
                    let Some(idx) = k.strip_prefix("primitive.") else {
                        return Err(perr(line, format!("unknown key '{k}'; valid keys: {}", SPEC_KEYS.join(", "))));
                    };
                    let idx = idx
                        .parse::<usize>()
                        .map_err(|_| perr(line, format!("bad primitive index in '{k}'")))?;
                    let p = Primitive::parse(&v).map_err(|m| perr(line, m))?;
                    prims.push((idx, p));
                }
            }
        }
        if !prims.is_empty() {
            prims.sort_by_key(|(i, _)| *i);
            spec.primitives = prims.into_iter().map(|(_, p)| p).collect();
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }

    pub fn analytic_field(&self) -> AnalyticField {
        AnalyticField {
            primitives: self.primitives.clone(),
            sigma_max: self.sigma_max,
            softness: self.softness,
            texture_amplitude: self.texture_amplitude,
            texture_frequency: self.texture_frequency,
        }
    }

    /// Ring of `train + test` cameras around the z axis looking at the origin;
    /// test views are spread evenly between training views.
    pub fn cameras(&self) -> Vec<TaggedCamera> {
        let k = self.num_train_views + self.num_test_views;
        let test: Vec<usize> = (0..self.num_test_views)
            .map(|j| (j * k) / self.num_test_views + k / (2 * self.num_test_views))
            .collect();
        (0..k)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / k as f64;
                let eye = Vec3::new(self.ring_radius * a.cos(), self.ring_radius * a.sin(), self.ring_height);
                let camera = Camera::look_at(
                    eye,
                    Vec3::zeros(),
                    Vec3::z(),
                    self.focal,
                    self.width,
                    self.height,
                    self.near,
                    self.far,
                );
                let split = if test.contains(&i) { "test" } else { "train" };
                TaggedCamera { split: split.into(), camera }
            })
            .collect()
    }
}

/// Closed-form density and color: a union of soft primitives.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticField {
    pub primitives: Vec<Primitive>,
    pub sigma_max: f64,
    pub softness: f64,
    pub texture_amplitude: f64,
    pub texture_frequency: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl AnalyticField {
    /// Density and color at `p`. Density is `Σ σ_max·sigmoid(-sdf/softness)`;
    /// color is the density-weighted textured albedo.
    pub fn query(&self, p: &Vec3) -> (f64, [f64; 3]) {
        let f = self.texture_frequency;
        let pattern = (f * p.x).sin() * (f * p.y).sin() * (f * p.z).sin();
        let tex = 1.0 - self.texture_amplitude * (0.5 + 0.5 * pattern);
        let mut sigma = 0.0;
        let mut c = [0.0; 3];
        for prim in &self.primitives {
            let d = self.sigma_max * sigmoid(-prim.sdf(p) / self.softness);
            sigma += d;
            for k in 0..3 {
                c[k] += d * prim.albedo[k] * tex;
            }
        }
        if sigma > 0.0 {
            for v in &mut c {
                *v /= sigma;
            }
        }
        (sigma, c)
    }

    pub fn render_ray(&self, origin: &Vec3, dir: &Vec3, near: f64, far: f64, samples: usize, bg: [f64; 3]) -> [f64; 3] {
        let s = midpoint_samples(near, far, samples);
        let mut dens = Vec::with_capacity(samples);
        let mut cols = Vec::with_capacity(samples);
        for t in &s.depths {
            let (d, c) = self.query(&(origin + dir * *t));
            dens.push(d);
            cols.push(c);
        }
        composite(&cols, &dens, &s.deltas, bg).pixel
    }

    /// Renders a full image by midpoint quadrature with `samples` per ray.
    pub fn render(&self, camera: &Camera, samples: usize, bg: [f64; 3]) -> Result<Image> {
        let o = camera.center();
        let mut px = Vec::with_capacity(camera.num_pixels());
        for row in 0..camera.height {
            for col in 0..camera.width {
                let d = camera.pixel_direction(col, row);
                px.push(self.render_ray(&o, &d, camera.near, camera.far, samples, bg));
            }
        }
        Image::from_f64(camera.width, camera.height, &px)
    }

    /// `n` surface points, area weighted, skipping points inside other primitives.
    pub fn sample_points(&self, n: usize, seed: u64) -> Result<PointCloud> {
        let areas: Vec<f64> = self.primitives.iter().map(|p| p.area()).collect();
        let total: f64 = areas.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 1000 * n + 1000 {
                return Err(Error::Degenerate("primitive surfaces are almost entirely hidden".into()));
            }
            let mut pick = rng.random_range(0.0..total);
            let mut i = 0;
            while i + 1 < areas.len() && pick >= areas[i] {
                pick -= areas[i];
                i += 1;
            }
            let p = self.primitives[i].sample_surface(&mut rng);
            let hidden = self
                .primitives
                .iter()
                .enumerate()
                .any(|(j, q)| j != i && q.sdf(&p) < 0.0);
            if !hidden {
                out.push(p);
            }
        }
        PointCloud::new(out)
    }
}

/// A generated (or reloaded) scene.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub field: AnalyticField,
    pub cameras: Vec<TaggedCamera>,
    /// Ground truth, one per camera.
    pub images: Vec<Image>,
    /// Full surface sample.
    pub points_full: PointCloud,
    /// Surface sample after hole punching; this is the training input.
    pub points: PointCloud,
    pub holes: HoleSpec,
}

/// Seed streams of scene generation.
const POINTS_STREAM: u64 = 11;
const HOLES_STREAM: u64 = 12;

/// Deterministic scene from `spec` and `seed` (the seed field of `spec` is ignored).
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut spec = spec.clone();
    spec.seed = seed;
    let field = spec.analytic_field();
    let cameras = spec.cameras();
    let images = cameras
        .iter()
        .map(|c| field.render(&c.camera, spec.gt_samples, spec.background))
        .collect::<Result<Vec<_>>>()?;
    let points_full = field.sample_points(spec.num_points, crate::pipeline::seeds::derive(seed, POINTS_STREAM))?;
    let holes = if spec.hole_fraction > 0.0 && spec.hole_count > 0 {
        plan_holes(
            &points_full,
            spec.hole_count,
            spec.hole_fraction,
            crate::pipeline::seeds::derive(seed, HOLES_STREAM),
        )
    } else {
        HoleSpec::default()
    };
    let (points, _) = punch_holes(&points_full, &holes.balls);
    Ok(SyntheticScene { spec, field, cameras, images, points_full, points, holes })
}

impl SyntheticScene {
    fn split(&self, name: &str) -> Vec<(Camera, Image)> {
        self.cameras
            .iter()
            .zip(&self.images)
            .filter(|(c, _)| c.split == name)
            .map(|(c, i)| (c.camera.clone(), i.clone()))
            .collect()
    }

    pub fn train_views(&self) -> Vec<(Camera, Image)> {
        self.split("train")
    }

    pub fn test_views(&self) -> Vec<(Camera, Image)> {
        self.split("test")
    }

    fn image_names(&self) -> Vec<String> {
        let mut counts = std::collections::BTreeMap::<&str, usize>::new();
        self.cameras
            .iter()
            .map(|c| {
                let n = counts.entry(c.split.as_str()).or_insert(0);
                let name = format!("{}_{:03}", c.split, n);
                *n += 1;
                name
            })
            .collect()
    }

    /// Writes `scene.txt`, `cameras.txt`, `holes.txt`, `points.ply`,
    /// `points_full.ply` and `images/<split>_NNN.{f32img,ppm}`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let spec_path = dir.join("scene.txt");
        fs::write(&spec_path, self.spec.to_text()).map_err(|e| Error::io(&spec_path, e))?;
        save_cameras(dir.join("cameras.txt"), &self.cameras)?;
        save_holes(dir.join("holes.txt"), &self.holes)?;
        save_point_cloud(dir.join("points.ply"), &self.points)?;
        save_point_cloud(dir.join("points_full.ply"), &self.points_full)?;
        for (name, img) in self.image_names().iter().zip(&self.images) {
            save_image(images.join(format!("{name}.f32img")), img)?;
            save_image(images.join(format!("{name}.ppm")), img)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let spec = SceneSpec::load(dir.join("scene.txt"))?;
        let cameras = load_cameras(dir.join("cameras.txt"))?;
        let holes_path = dir.join("holes.txt");
        let holes = if holes_path.exists() { load_holes(&holes_path)? } else { HoleSpec::default() };
        let points = load_point_cloud(dir.join("points.ply"))?;
        let full_path = dir.join("points_full.ply");
        let points_full = if full_path.exists() { load_point_cloud(&full_path)? } else { points.clone() };
        let mut scene = SyntheticScene {
            field: spec.analytic_field(),
            spec,
            cameras,
            images: Vec::new(),
            points_full,
            points,
            holes,
        };
        let names = scene.image_names();
        scene.images = names
            .iter()
            .map(|n| load_image(dir.join("images").join(format!("{n}.f32img"))))
            .collect::<Result<_>>()?;
        for (c, img) in scene.cameras.iter().zip(&scene.images) {
            if img.width != c.camera.width || img.height != c.camera.height {
                return Err(Error::DimensionMismatch(format!(
                    "{} image is {}x{} but its camera is {}x{}",
                    c.split, img.width, img.height, c.camera.width, c.camera.height
                )));
            }
        }
        Ok(scene)
    }
}
