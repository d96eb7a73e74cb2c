//! The trainable radiance field.
//!
//! Each local level `s` turns the neighbors of a query `q` into one feature by
//! normalized inverse-distance weighting of a per-point function `F`:
//! fine levels (`s <= mlp_levels`) run a shared MLP on the point's feature
//! vector and its scaled offset, coarse levels read a per-point tri-plane
//! pyramid at the local coordinate `(q - p) / (τ V_s)`. The global voxel reads
//! one tri-plane at the canonical position and adds a linear projection of its
//! positional encoding. Features of all valid levels are averaged (in
//! ascending level order, global first) and decoded into density and color.

pub mod encoding;
pub mod io;
pub mod triplane;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamGroup, ParamStore, Tape, TensorId, Var};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::spatial_index::{NeighborSet, GLOBAL_LEVEL};
use crate::Vec3;

pub use encoding::positional_encoding;
pub use triplane::{bilinear_taps, eval_triplane, triplane_taps, PLANES};

/// Bound of the uniform initialization of per-point feature vectors.
pub const POINT_FEATURE_INIT: f64 = 1e-2;
/// Bound of the uniform initialization of tri-plane entries.
pub const TRIPLANE_INIT: f64 = 1e-1;

/// Shape-defining subset of the run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldConfig {
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
}

impl FieldConfig {
    pub fn from_config(c: &Config) -> Self {
        Self {
            feature_dim: c.feature_dim,
            hidden_dim: c.hidden_dim,
            mlp_levels: c.mlp_levels,
            triplane_pyramid: c.triplane_pyramid.clone(),
            global_resolution: c.global_resolution,
            use_global: c.use_global,
            pe_frequencies: c.pe_frequencies,
            dir_frequencies: c.dir_frequencies,
            tau: c.tau,
            max_neighbors: c.max_neighbors,
            epsilon: c.epsilon,
            density_shift: c.density_shift,
        }
    }

    pub fn pe_len(&self) -> usize {
        6 * self.pe_frequencies
    }

    pub fn dir_len(&self) -> usize {
        6 * self.dir_frequencies
    }

    pub fn uses_mlp(&self, level_index: usize) -> bool {
        level_index <= self.mlp_levels
    }
}

/// Size of one local level as seen by the field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelMeta {
    pub level_index: usize,
    pub voxel_edge: f64,
    pub num_points: usize,
}

/// Stack of affine layers with ReLU between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<(TensorId, TensorId)>,
}

impl Mlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.affine(w, b, h)?;
            if k + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LevelRepr {
    /// `[N, D]` feature vectors and a shared MLP on `f_p ⊕ (p - q) / (τ V_s)`.
    PointMlp { features: TensorId, mlp: Mlp },
    /// Per-point planes `[N, r, r, D]` for every pyramid resolution `r`.
    PointTriPlane { planes: Vec<(usize, [TensorId; 3])> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelParams {
    pub meta: LevelMeta,
    pub repr: LevelRepr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalParams {
    pub resolution: usize,
    /// `[R, R, D]` planes in [`PLANES`] order.
    pub planes: [TensorId; 3],
    /// `[D, pe_len]` projection of the positional encoding.
    pub pe_proj: TensorId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub config: FieldConfig,
    pub store: ParamStore,
    /// Density head `[1, D]` weight and `[1]` bias.
    pub density: (TensorId, TensorId),
    pub color: Mlp,
    pub global: Option<GlobalParams>,
    /// Local levels, `levels[s - 1]` for level `s`.
    pub levels: Vec<LevelParams>,
}

/// Learning-rate group implied by a tensor name.
pub fn group_for_name(name: &str) -> ParamGroup {
    if name.ends_with(".weight") || name.ends_with(".bias") || name.ends_with("pe_proj") {
        ParamGroup::Decoder
    } else {
        ParamGroup::Features
    }
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

enum Init {
    Uniform(f64),
    Kaiming,
    Zero,
}

fn mlp_specs(prefix: &str, dims: &[usize], out: &mut Vec<Spec>) {
    for (k, w) in dims.windows(2).enumerate() {
        out.push(Spec {
            name: format!("{prefix}.{k}.weight"),
            shape: vec![w[1], w[0]],
            init: Init::Kaiming,
        });
        out.push(Spec {
            name: format!("{prefix}.{k}.bias"),
            shape: vec![w[1]],
            init: Init::Zero,
        });
    }
}

/// Every tensor of the field in initialization order.
fn tensor_specs(cfg: &FieldConfig, levels: &[LevelMeta]) -> Vec<Spec> {
    let (d, h) = (cfg.feature_dim, cfg.hidden_dim);
    let mut out = Vec::new();
    out.push(Spec {
        name: "decoder.density.weight".into(),
        shape: vec![1, d],
        init: Init::Kaiming,
    });
    out.push(Spec {
        name: "decoder.density.bias".into(),
        shape: vec![1],
        init: Init::Zero,
    });
    mlp_specs("decoder.color", &[d + cfg.dir_len(), h, h, h, 3], &mut out);
    if cfg.use_global {
        let r = cfg.global_resolution;
        for (p, _, _) in PLANES {
            out.push(Spec {
                name: format!("global.plane.{p}.r{r}"),
                shape: vec![r, r, d],
                init: Init::Uniform(TRIPLANE_INIT),
            });
        }
        out.push(Spec {
            name: "global.pe_proj".into(),
            shape: vec![d, cfg.pe_len()],
            init: Init::Kaiming,
        });
    }
    for m in levels {
        let s = m.level_index;
        if cfg.uses_mlp(s) {
            out.push(Spec {
                name: format!("level{s}.features"),
                shape: vec![m.num_points, d],
                init: Init::Uniform(POINT_FEATURE_INIT),
            });
            mlp_specs(&format!("level{s}.mlp"), &[d + 3, h, h, h, d], &mut out);
        } else {
            for &r in &cfg.triplane_pyramid {
                for (p, _, _) in PLANES {
                    out.push(Spec {
                        name: format!("level{s}.plane.{p}.r{r}"),
                        shape: vec![m.num_points, r, r, d],
                        init: Init::Uniform(TRIPLANE_INIT),
                    });
                }
            }
        }
    }
    out
}

/// Closed-form number of trainable scalars for a configuration.
pub fn parameter_count(cfg: &FieldConfig, levels: &[LevelMeta]) -> usize {
    let (d, h) = (cfg.feature_dim, cfg.hidden_dim);
    let mlp = |i: usize, o: usize| (i + 1) * h + 2 * (h + 1) * h + (h + 1) * o;
    let mut n = (d + 1) + mlp(d + cfg.dir_len(), 3);
    if cfg.use_global {
        let r = cfg.global_resolution;
        n += 3 * r * r * d + d * cfg.pe_len();
    }
    let pyramid: usize = cfg.triplane_pyramid.iter().map(|r| r * r).sum();
    for m in levels {
        n += if cfg.uses_mlp(m.level_index) {
            m.num_points * d + mlp(d + 3, d)
        } else {
            m.num_points * 3 * pyramid * d
        };
    }
    n
}

fn check_levels(levels: &[LevelMeta]) -> Result<()> {
    for (i, m) in levels.iter().enumerate() {
        if m.level_index != i + 1 {
            return Err(Error::ConfigMismatch(format!(
                "level {} found at position {}; levels must be numbered 1..",
                m.level_index,
                i + 1
            )));
        }
    }
    Ok(())
}

impl Field {
    /// Fresh parameters, fully determined by `seed`.
    ///
    /// Draw order is decoder, global tri-plane, positional projection, then
    /// levels fine to coarse, so the decoder and global state do not depend
    /// on the point count.
    pub fn init(cfg: &FieldConfig, levels: &[LevelMeta], seed: u64) -> Result<Field> {
        check_levels(levels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for spec in tensor_specs(cfg, levels) {
            let n: usize = spec.shape.iter().product();
            let data: Vec<f64> = match spec.init {
                Init::Zero => vec![0.0; n],
                Init::Uniform(a) => (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * a).collect(),
                Init::Kaiming => {
                    let bound = (6.0 / spec.shape[1] as f64).sqrt();
                    (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound).collect()
                }
            };
            let group = group_for_name(&spec.name);
            store.insert(spec.name, spec.shape, group, data);
        }
        Field::assemble(cfg, levels, store)
    }

    /// Resolves the tensor layout of `store` against the configuration.
    pub fn assemble(cfg: &FieldConfig, levels: &[LevelMeta], store: ParamStore) -> Result<Field> {
        check_levels(levels)?;
        let specs = tensor_specs(cfg, levels);
        if specs.len() != store.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                store.len()
            )));
        }
        for s in &specs {
            let id = store
                .id(&s.name)
                .ok_or_else(|| Error::ConfigMismatch(format!("missing parameter tensor {}", s.name)))?;
            if store.tensor(id).shape != s.shape {
                return Err(Error::ConfigMismatch(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    s.name,
                    store.tensor(id).shape,
                    s.shape
                )));
            }
        }
        let id = |n: &str| store.id(n).expect("checked above");
        let mlp = |prefix: &str| Mlp {
            layers: (0..4)
                .map(|k| (id(&format!("{prefix}.{k}.weight")), id(&format!("{prefix}.{k}.bias"))))
                .collect(),
        };
        let density = (id("decoder.density.weight"), id("decoder.density.bias"));
        let color = mlp("decoder.color");
        let global = cfg.use_global.then(|| {
            let r = cfg.global_resolution;
            GlobalParams {
                resolution: r,
                planes: PLANES.map(|(p, _, _)| id(&format!("global.plane.{p}.r{r}"))),
                pe_proj: id("global.pe_proj"),
            }
        });
        let levels = levels
            .iter()
            .map(|m| {
                let s = m.level_index;
                let repr = if cfg.uses_mlp(s) {
                    LevelRepr::PointMlp {
                        features: id(&format!("level{s}.features")),
                        mlp: mlp(&format!("level{s}.mlp")),
                    }
                } else {
                    LevelRepr::PointTriPlane {
                        planes: cfg
                            .triplane_pyramid
                            .iter()
                            .map(|&r| (r, PLANES.map(|(p, _, _)| id(&format!("level{s}.plane.{p}.r{r}")))))
                            .collect(),
                    }
                };
                LevelParams { meta: *m, repr }
            })
            .collect();
        Ok(Field {
            config: cfg.clone(),
            store,
            density,
            color,
            global,
            levels,
        })
    }

    pub fn level_metas(&self) -> Vec<LevelMeta> {
        self.levels.iter().map(|l| l.meta).collect()
    }

    /// Normalized inverse-distance weights `w_i / Σ w` with `w = 1 / (d + ε)`.
    pub fn neighbor_weights(&self, neighbors: &NeighborSet) -> Vec<f64> {
        let raw: Vec<f64> = neighbors
            .distances
            .iter()
            .map(|d| 1.0 / (d + self.config.epsilon))
            .collect();
        let total: f64 = raw.iter().sum();
        raw.iter().map(|w| w / total).collect()
    }

    /// Aggregated feature of one local level; `neighbors` must be non-empty.
    pub fn level_feature(
        &self,
        tape: &mut Tape,
        level_index: usize,
        q: &Vec3,
        neighbors: &NeighborSet,
        points: &[Vec3],
    ) -> Result<Var> {
        assert!(!neighbors.is_empty(), "level feature of an empty neighbor set");
        let level = &self.levels[level_index - 1];
        let d = self.config.feature_dim;
        let radius = self.config.tau * level.meta.voxel_edge;
        let weights = self.neighbor_weights(neighbors);
        match &level.repr {
            LevelRepr::PointMlp { features, mlp } => {
                let mut terms = Vec::with_capacity(neighbors.len());
                for (&i, &w) in neighbors.point_indices.iter().zip(&weights) {
                    let f = tape.gather(*features, i * d, d)?;
                    let delta = (points[i] - q) / radius;
                    let rel = tape.input(delta.as_slice());
                    let x = tape.concat(&[f, rel])?;
                    terms.push((mlp.forward(tape, x)?, w));
                }
                Ok(tape.lin_comb(&terms)?)
            }
            LevelRepr::PointTriPlane { planes } => {
                let mut terms = Vec::with_capacity(neighbors.len() * planes.len() * 12);
                for (&i, &w) in neighbors.point_indices.iter().zip(&weights) {
                    let u = (q - points[i]) / radius;
                    for (r, ids) in planes {
                        let base = i * r * r;
                        for (k, taps) in triplane_taps(&u, *r).iter().enumerate() {
                            for &(node, t) in taps {
                                terms.push((ids[k], (base + node) * d, w * t));
                            }
                        }
                    }
                }
                Ok(tape.gather_mix(d, &terms)?)
            }
        }
    }

    /// Global feature at canonical position `q_canon` (clamped into the unit box).
    pub fn global_feature(&self, tape: &mut Tape, q_canon: &Vec3) -> Result<Var> {
        let g = self
            .global
            .as_ref()
            .expect("global feature requested from a field without a global level");
        let d = self.config.feature_dim;
        let qc = q_canon.map(|c| c.clamp(-1.0, 1.0));
        let mut terms = Vec::with_capacity(12);
        for (k, taps) in triplane_taps(&qc, g.resolution).iter().enumerate() {
            for &(node, t) in taps {
                terms.push((g.planes[k], node * d, t));
            }
        }
        let tri = tape.gather_mix(d, &terms)?;
        let pe = tape.input(&positional_encoding(qc.as_slice(), self.config.pe_frequencies));
        let proj = tape.matvec(g.pe_proj, pe)?;
        Ok(tape.add(tri, proj)?)
    }

    /// Mean feature over the valid levels, or `None` when no level contributes.
    ///
    /// `points[s - 1]` holds the representatives of level `s`.
    pub fn aggregate(
        &self,
        tape: &mut Tape,
        q: &Vec3,
        q_canon: &Vec3,
        valid: &[(usize, NeighborSet)],
        points: &[&[Vec3]],
    ) -> Result<Option<Var>> {
        let mut order: Vec<&(usize, NeighborSet)> = valid
            .iter()
            .filter(|(s, n)| {
                if *s == GLOBAL_LEVEL {
                    self.config.use_global
                } else {
                    !n.is_empty()
                }
            })
            .collect();
        if order.is_empty() {
            return Ok(None);
        }
        order.sort_by_key(|(s, _)| *s);
        let inv = 1.0 / order.len() as f64;
        let mut terms = Vec::with_capacity(order.len());
        for (s, n) in order {
            let f = if *s == GLOBAL_LEVEL {
                self.global_feature(tape, q_canon)?
            } else {
                if *s > self.levels.len() {
                    return Err(Error::ConfigMismatch(format!(
                        "valid level {s} but the field has {} local levels",
                        self.levels.len()
                    )));
                }
                self.level_feature(tape, *s, q, n, points[*s - 1])?
            };
            terms.push((f, inv));
        }
        Ok(Some(tape.lin_comb(&terms)?))
    }

    /// Density (length 1) and color (length 3) from an aggregated feature and
    /// an encoded view direction.
    pub fn decode(&self, tape: &mut Tape, h: Var, dir_encoding: Var) -> Result<(Var, Var)> {
        let (w, b) = self.density;
        let pre = tape.affine(w, b, h)?;
        let pre = tape.offset(pre, self.config.density_shift)?;
        let sigma = tape.softplus(pre)?;
        let x = tape.concat(&[h, dir_encoding])?;
        let c = self.color.forward(tape, x)?;
        let color = tape.sigmoid(c)?;
        Ok((sigma, color))
    }

    /// Aggregate then decode; `None` means empty space (zero density).
    pub fn eval(
        &self,
        tape: &mut Tape,
        q: &Vec3,
        q_canon: &Vec3,
        dir_encoding: Var,
        valid: &[(usize, NeighborSet)],
        points: &[&[Vec3]],
    ) -> Result<Option<(Var, Var)>> {
        match self.aggregate(tape, q, q_canon, valid, points)? {
            Some(h) => Ok(Some(self.decode(tape, h, dir_encoding)?)),
            None => Ok(None),
        }
    }

    /// Encoded view direction as used by [`Field::decode`].
    pub fn encode_direction(&self, dir: &Vec3) -> Vec<f64> {
        positional_encoding(dir.as_slice(), self.config.dir_frequencies)
    }

    /// Sets every parameter to zero.
    pub fn zero_parameters(&mut self) {
        for t in self.store.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}
