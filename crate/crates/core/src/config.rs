//! Flat `key = value` run configuration.
//!
//! Every key has a default; a config file sets any subset of keys and
//! command-line overrides are applied last. Unknown keys are rejected with
//! the full list of valid keys. [`Config::to_text`] prints the fully resolved
//! configuration in schema order, which is also what the hash covers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::Vec3;

/// How the canonical frame is obtained from the input cloud.
#[derive(Debug, Clone, PartialEq)]
pub enum FrameMode {
    /// Principal-component frame of the cloud.
    Pca,
    /// Identity rotation with per-axis scale only.
    Scale,
    /// Fixed axis-aligned frame: center and half extents.
    Fixed { center: Vec3, half_extent: Vec3 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayMode {
    Continuous,
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,

    pub num_levels: usize,
    pub omega: Option<f64>,
    pub gamma: Option<f64>,
    pub frame: FrameMode,
    pub frame_margin: f64,
    pub point_ratio: f64,

    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub mlp_levels: usize,
    pub triplane_pyramid: Vec<usize>,
    pub global_resolution: usize,
    pub use_global: bool,
    pub pe_frequencies: usize,
    pub dir_frequencies: usize,
    pub tau: f64,
    pub max_neighbors: usize,
    pub epsilon: f64,
    pub density_shift: f64,

    pub num_samples: usize,
    pub background: [f64; 3],
    pub clip_to_frame: bool,

    pub iterations: usize,
    pub batch_rays: usize,
    pub optimizer: OptimizerKind,
    pub lr_decoder: f64,
    pub lr_features: f64,
    pub decay_rate: f64,
    pub decay_every: f64,
    pub decay_mode: DecayMode,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub checkpoint_every: usize,
    pub eval_every: usize,
}

/// `(key, default, description)` in the order used for printing.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed for initialization, pixel sampling and subsampling"),
    ("num_levels", "4", "number of local hierarchy levels (the global voxel is extra)"),
    ("omega", "auto", "finest voxel edge in world units, or auto"),
    ("gamma", "auto", "voxel edge growth ratio between levels (> 1), or auto"),
    ("frame", "pca", "canonical frame: pca | scale | fixed:cx,cy,cz,hx,hy,hz"),
    ("frame_margin", "0.01", "fractional slack added around the cloud by the frame"),
    ("point_ratio", "1", "fraction of input points kept (seeded random subset)"),
    ("feature_dim", "32", "feature width D shared by all levels"),
    ("hidden_dim", "64", "hidden width of the per-level MLPs and the color head"),
    ("mlp_levels", "2", "local levels 1..=mlp_levels use point vectors + MLP, coarser ones tri-planes"),
    ("triplane_pyramid", "4,2", "per-point tri-plane resolutions, summed"),
    ("global_resolution", "64", "resolution of the global tri-plane"),
    ("use_global", "true", "include the global voxel in every valid set"),
    ("pe_frequencies", "5", "positional encoding frequencies for the global feature"),
    ("dir_frequencies", "4", "encoding frequencies for the view direction"),
    ("tau", "1", "neighbor search radius as a multiple of the voxel edge"),
    ("max_neighbors", "8", "maximum neighbors kept per level"),
    ("epsilon", "1e-6", "inverse-distance weight offset in world units"),
    ("density_shift", "-4", "constant added before the density softplus"),
    ("num_samples", "64", "quadrature samples per ray"),
    ("background", "1,1,1", "background color"),
    ("clip_to_frame", "true", "treat samples outside the canonical box as empty"),
    ("iterations", "2000", "training iterations"),
    ("batch_rays", "1024", "rays per training batch"),
    ("optimizer", "adam", "adam | sgd"),
    ("lr_decoder", "5e-4", "initial learning rate of network weights"),
    ("lr_features", "2e-3", "initial learning rate of point features and tri-planes"),
    ("decay_rate", "0.1", "learning-rate multiplier per decay_every steps"),
    ("decay_every", "1000000", "steps per decay_rate factor"),
    ("decay_mode", "continuous", "continuous | step"),
    ("adam_beta1", "0.9", "Adam first-moment decay"),
    ("adam_beta2", "0.999", "Adam second-moment decay"),
    ("adam_eps", "1e-8", "Adam denominator offset"),
    ("checkpoint_every", "0", "checkpoint cadence in steps; 0 writes only the final one"),
    ("eval_every", "0", "held-out PSNR cadence in steps; 0 evaluates only at the end"),
];

pub fn valid_keys() -> Vec<&'static str> {
    SCHEMA.iter().map(|(k, _, _)| *k).collect()
}

/// Splits `key = value` text into pairs, skipping blanks and `#` comments.
/// Line numbers are 1-based.
pub fn parse_pairs(text: &str) -> std::result::Result<Vec<(usize, String, String)>, (usize, String)> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err((i + 1, format!("expected key = value, got '{line}'")));
        };
        let k = k.trim();
        if k.is_empty() {
            return Err((i + 1, "empty key".into()));
        }
        out.push((i + 1, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: invalid value '{v}'")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    let x: f64 = parse_num(key, v)?;
    if !x.is_finite() {
        return Err(Error::Config(format!("{key}: value must be finite")));
    }
    Ok(x)
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{v}'"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|s| parse_f64(key, s.trim())).collect()
}

fn parse_auto(key: &str, v: &str) -> Result<Option<f64>> {
    if v == "auto" {
        Ok(None)
    } else {
        parse_f64(key, v).map(Some)
    }
}

fn fmt_list<T: std::fmt::Debug>(xs: &[T]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

impl Default for Config {
    fn default() -> Self {
        let mut c = Config {
            seed: 0,
            num_levels: 0,
            omega: None,
            gamma: None,
            frame: FrameMode::Pca,
            frame_margin: 0.0,
            point_ratio: 1.0,
            feature_dim: 0,
            hidden_dim: 0,
            mlp_levels: 0,
            triplane_pyramid: Vec::new(),
            global_resolution: 0,
            use_global: true,
            pe_frequencies: 0,
            dir_frequencies: 0,
            tau: 0.0,
            max_neighbors: 0,
            epsilon: 0.0,
            density_shift: 0.0,
            num_samples: 0,
            background: [1.0; 3],
            clip_to_frame: true,
            iterations: 0,
            batch_rays: 0,
            optimizer: OptimizerKind::Adam,
            lr_decoder: 0.0,
            lr_features: 0.0,
            decay_rate: 0.0,
            decay_every: 0.0,
            decay_mode: DecayMode::Continuous,
            adam_beta1: 0.0,
            adam_beta2: 0.0,
            adam_eps: 0.0,
            checkpoint_every: 0,
            eval_every: 0,
        };
        for (k, v, _) in SCHEMA {
            c.set(k, v).expect("schema defaults parse");
        }
        c
    }
}

impl Config {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "num_levels" => self.num_levels = parse_num(key, v)?,
            "omega" => self.omega = parse_auto(key, v)?,
            "gamma" => self.gamma = parse_auto(key, v)?,
            "frame" => self.frame = parse_frame(v)?,
            "frame_margin" => self.frame_margin = parse_f64(key, v)?,
            "point_ratio" => self.point_ratio = parse_f64(key, v)?,
            "feature_dim" => self.feature_dim = parse_num(key, v)?,
            "hidden_dim" => self.hidden_dim = parse_num(key, v)?,
            "mlp_levels" => self.mlp_levels = parse_num(key, v)?,
            "triplane_pyramid" => {
                self.triplane_pyramid = v
                    .split(',')
                    .map(|s| parse_num(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "global_resolution" => self.global_resolution = parse_num(key, v)?,
            "use_global" => self.use_global = parse_bool(key, v)?,
            "pe_frequencies" => self.pe_frequencies = parse_num(key, v)?,
            "dir_frequencies" => self.dir_frequencies = parse_num(key, v)?,
            "tau" => self.tau = parse_f64(key, v)?,
            "max_neighbors" => self.max_neighbors = parse_num(key, v)?,
            "epsilon" => self.epsilon = parse_f64(key, v)?,
            "density_shift" => self.density_shift = parse_f64(key, v)?,
            "num_samples" => self.num_samples = parse_num(key, v)?,
            "background" => {
                let b = parse_list(key, v)?;
                if b.len() != 3 {
                    return Err(Error::Config(format!("{key}: expected 3 components")));
                }
                self.background = [b[0], b[1], b[2]];
            }
            "clip_to_frame" => self.clip_to_frame = parse_bool(key, v)?,
            "iterations" => self.iterations = parse_num(key, v)?,
            "batch_rays" => self.batch_rays = parse_num(key, v)?,
            "optimizer" => {
                self.optimizer = match v {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(Error::Config(format!("{key}: expected adam or sgd, got '{v}'"))),
                }
            }
            "lr_decoder" => self.lr_decoder = parse_f64(key, v)?,
            "lr_features" => self.lr_features = parse_f64(key, v)?,
            "decay_rate" => self.decay_rate = parse_f64(key, v)?,
            "decay_every" => self.decay_every = parse_f64(key, v)?,
            "decay_mode" => {
                self.decay_mode = match v {
                    "continuous" => DecayMode::Continuous,
                    "step" => DecayMode::Step,
                    _ => return Err(Error::Config(format!("{key}: expected continuous or step, got '{v}'"))),
                }
            }
            "adam_beta1" => self.adam_beta1 = parse_f64(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse_f64(key, v)?,
            "adam_eps" => self.adam_eps = parse_f64(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "eval_every" => self.eval_every = parse_num(key, v)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key '{key}'; valid keys: {}",
                    valid_keys().join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Textual value of one key, in the form accepted by [`Config::set`].
    pub fn get(&self, key: &str) -> Option<String> {
        let auto = |x: Option<f64>| x.map_or("auto".to_string(), |v| format!("{v:?}"));
        Some(match key {
            "seed" => self.seed.to_string(),
            "num_levels" => self.num_levels.to_string(),
            "omega" => auto(self.omega),
            "gamma" => auto(self.gamma),
            "frame" => match &self.frame {
                FrameMode::Pca => "pca".into(),
                FrameMode::Scale => "scale".into(),
                FrameMode::Fixed { center: c, half_extent: h } => {
                    format!("fixed:{}", fmt_list(&[c.x, c.y, c.z, h.x, h.y, h.z]))
                }
            },
            "frame_margin" => format!("{:?}", self.frame_margin),
            "point_ratio" => format!("{:?}", self.point_ratio),
            "feature_dim" => self.feature_dim.to_string(),
            "hidden_dim" => self.hidden_dim.to_string(),
            "mlp_levels" => self.mlp_levels.to_string(),
            "triplane_pyramid" => self.triplane_pyramid.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(","),
            "global_resolution" => self.global_resolution.to_string(),
            "use_global" => self.use_global.to_string(),
            "pe_frequencies" => self.pe_frequencies.to_string(),
            "dir_frequencies" => self.dir_frequencies.to_string(),
            "tau" => format!("{:?}", self.tau),
            "max_neighbors" => self.max_neighbors.to_string(),
            "epsilon" => format!("{:?}", self.epsilon),
            "density_shift" => format!("{:?}", self.density_shift),
            "num_samples" => self.num_samples.to_string(),
            "background" => fmt_list(&self.background),
            "clip_to_frame" => self.clip_to_frame.to_string(),
            "iterations" => self.iterations.to_string(),
            "batch_rays" => self.batch_rays.to_string(),
            "optimizer" => match self.optimizer {
                OptimizerKind::Adam => "adam".into(),
                OptimizerKind::Sgd => "sgd".into(),
            },
            "lr_decoder" => format!("{:?}", self.lr_decoder),
            "lr_features" => format!("{:?}", self.lr_features),
            "decay_rate" => format!("{:?}", self.decay_rate),
            "decay_every" => format!("{:?}", self.decay_every),
            "decay_mode" => match self.decay_mode {
                DecayMode::Continuous => "continuous".into(),
                DecayMode::Step => "step".into(),
            },
            "adam_beta1" => format!("{:?}", self.adam_beta1),
            "adam_beta2" => format!("{:?}", self.adam_beta2),
            "adam_eps" => format!("{:?}", self.adam_eps),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "eval_every" => self.eval_every.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` text on top of `self`, then validates.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        let pairs = parse_pairs(text).map_err(|(line, message)| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        })?;
        for (line, k, v) in pairs {
            self.set(&k, &v).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line,
                message: match e {
                    Error::Config(m) => m,
                    other => other.to_string(),
                },
            })?;
        }
        self.validate()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Config::default();
        c.apply_text(text, Path::new("<config>"))?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Config::default();
        c.apply_text(&text, path)?;
        Ok(c)
    }

    /// Applies `key=value` overrides (command-line form), then validates.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    /// Builds a config from defaults, an optional file and overrides, in that precedence order.
    pub fn resolve<S: AsRef<str>>(file: Option<&Path>, overrides: &[S]) -> Result<Self> {
        let mut c = match file {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        c.apply_overrides(overrides)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.feature_dim == 0 || self.hidden_dim == 0 {
            return fail("feature_dim and hidden_dim must be positive".into());
        }
        if let Some(o) = self.omega {
            if o <= 0.0 {
                return fail(format!("omega must be positive, got {o}"));
            }
        }
        if let Some(g) = self.gamma {
            if g <= 1.0 {
                return fail(format!("gamma must exceed 1, got {g}"));
            }
        }
        if !(0.0..=1.0).contains(&self.point_ratio) {
            return fail(format!("point_ratio must lie in [0, 1], got {}", self.point_ratio));
        }
        if self.frame_margin < 0.0 {
            return fail("frame_margin must be non-negative".into());
        }
        if self.triplane_pyramid.is_empty() || self.triplane_pyramid.iter().any(|&r| r < 2) {
            return fail("triplane_pyramid resolutions must be at least 2".into());
        }
        if self.global_resolution < 2 {
            return fail("global_resolution must be at least 2".into());
        }
        if self.tau <= 0.0 || self.max_neighbors == 0 {
            return fail("tau must be positive and max_neighbors at least 1".into());
        }
        if self.epsilon <= 0.0 {
            return fail("epsilon must be positive".into());
        }
        if self.num_samples < 2 {
            return fail("num_samples must be at least 2".into());
        }
        if self.batch_rays == 0 {
            return fail("batch_rays must be positive".into());
        }
        if self.lr_decoder <= 0.0 || self.lr_features <= 0.0 {
            return fail("learning rates must be positive".into());
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return fail(format!("decay_rate must lie in (0, 1], got {}", self.decay_rate));
        }
        if self.decay_every <= 0.0 {
            return fail("decay_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return fail("adam betas must lie in [0, 1) and adam_eps must be positive".into());
        }
        Ok(())
    }

    /// Resolved configuration, one `key = value` line per schema entry.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _, _) in SCHEMA {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("schema key"));
        }
        s
    }

    /// First 8 bytes of the SHA-256 of [`Config::to_text`].
    pub fn hash(&self) -> [u8; 8] {
        hash_text(&self.to_text())
    }

    /// Schema with defaults and descriptions, for `--help`-style output.
    pub fn schema_text() -> String {
        let mut s = String::new();
        for (k, d, doc) in SCHEMA {
            let _ = writeln!(s, "{k:<18} default {d:<12} {doc}");
        }
        s
    }

}

/// Worker count for a `--workers` value; 0 means all available cores.
pub fn resolve_workers(requested: usize) -> usize {
    if requested == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        requested
    }
}

pub fn hash_text(text: &str) -> [u8; 8] {
    let digest = Sha256::digest(text.as_bytes());
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    out
}

fn parse_frame(v: &str) -> Result<FrameMode> {
    match v {
        "pca" => Ok(FrameMode::Pca),
        "scale" => Ok(FrameMode::Scale),
        _ => {
            let Some(rest) = v.strip_prefix("fixed:") else {
                return Err(Error::Config(format!(
                    "frame: expected pca, scale or fixed:cx,cy,cz,hx,hy,hz, got '{v}'"
                )));
            };
            let x = parse_list("frame", rest)?;
            if x.len() != 6 || x[3..].iter().any(|&h| h <= 0.0) {
                return Err(Error::Config(
                    "frame: fixed needs 6 numbers with positive half extents".into(),
                ));
            }
            Ok(FrameMode::Fixed {
                center: Vec3::new(x[0], x[1], x[2]),
                half_extent: Vec3::new(x[3], x[4], x[5]),
            })
        }
    }
}
