//! Ray sampling, alpha compositing and batched differentiable rendering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::scene_io::{generate_rays, CanonicalFrame, Camera, Image};
use crate::spatial_index::{valid_scales, VoxelHashIndex};
use crate::Vec3;

/// Rays per work unit. Fixed so that results do not depend on the worker count.
pub const RAY_CHUNK: usize = 32;

/// Samples whose canonical coordinates exceed `1 + CLIP_SLACK` in any axis are
/// treated as empty space when clipping is enabled.
pub const CLIP_SLACK: f64 = 0.05;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RayBatch {
    pub origins: Vec<Vec3>,
    /// Unit directions.
    pub directions: Vec<Vec3>,
    pub near: Vec<f64>,
    pub far: Vec<f64>,
    /// Target colors; either every ray has one or none does.
    pub gt_colors: Option<Vec<[f64; 3]>>,
}

impl RayBatch {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            origins: Vec::with_capacity(n),
            directions: Vec::with_capacity(n),
            near: Vec::with_capacity(n),
            far: Vec::with_capacity(n),
            gt_colors: None,
        }
    }

    pub fn push(&mut self, origin: Vec3, direction: Vec3, near: f64, far: f64, gt: Option<[f64; 3]>) {
        if let Some(c) = gt {
            assert!(
                self.gt_colors.as_ref().map_or(self.origins.is_empty(), |g| g.len() == self.origins.len()),
                "ray batch mixes rays with and without targets"
            );
            self.gt_colors.get_or_insert_with(Vec::new).push(c);
        } else {
            assert!(self.gt_colors.is_none(), "ray batch mixes rays with and without targets");
        }
        self.origins.push(origin);
        self.directions.push(direction);
        self.near.push(near);
        self.far.push(far);
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.len() {
            if (self.directions[i].norm() - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!("ray {i} direction is not unit length")));
            }
            if !(self.near[i] < self.far[i]) {
                return Err(Error::InvalidArgument(format!("ray {i} has near >= far")));
            }
        }
        Ok(())
    }
}

/// Depths along one ray and the segment length owned by each depth.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureSamples {
    pub depths: Vec<f64>,
    /// `δ_i = t_{i+1} - t_i`, with the last segment closing at `far`.
    pub deltas: Vec<f64>,
}

fn close_segments(depths: Vec<f64>, far: f64) -> QuadratureSamples {
    let n = depths.len();
    let deltas = (0..n)
        .map(|i| if i + 1 < n { depths[i + 1] - depths[i] } else { far - depths[i] })
        .collect();
    QuadratureSamples { depths, deltas }
}

/// Bin midpoints of `num_samples` equal bins over `[near, far]`.
pub fn midpoint_samples(near: f64, far: f64, num_samples: usize) -> QuadratureSamples {
    let w = (far - near) / num_samples as f64;
    close_segments((0..num_samples).map(|i| near + (i as f64 + 0.5) * w).collect(), far)
}

/// One depth per equal bin: uniform within the bin when `stratified`, the
/// bin midpoint otherwise.
pub fn sample_ray<R: Rng>(near: f64, far: f64, num_samples: usize, stratified: bool, rng: &mut R) -> QuadratureSamples {
    if !stratified {
        return midpoint_samples(near, far, num_samples);
    }
    let w = (far - near) / num_samples as f64;
    close_segments(
        (0..num_samples)
            .map(|i| near + (i as f64 + rng.random::<f64>()) * w)
            .collect(),
        far,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub pixel: [f64; 3],
    pub weights: Vec<f64>,
    pub residual_t: f64,
}

/// Discrete volume rendering: `α_i = 1 - exp(-σ_i δ_i)`, `w_i = T_i α_i`,
/// `pixel = Σ w_i c_i + T_{N+1} · background`.
pub fn composite(colors: &[[f64; 3]], densities: &[f64], deltas: &[f64], background: [f64; 3]) -> Composite {
    assert!(colors.len() == densities.len() && densities.len() == deltas.len());
    let mut t = 1.0;
    let mut pixel = [0.0; 3];
    let mut weights = Vec::with_capacity(densities.len());
    for ((c, &s), &d) in colors.iter().zip(densities).zip(deltas) {
        let decay = (-s * d).exp();
        let w = t * (1.0 - decay);
        for k in 0..3 {
            pixel[k] += w * c[k];
        }
        weights.push(w);
        t *= decay;
    }
    for k in 0..3 {
        pixel[k] += t * background[k];
    }
    Composite {
        pixel,
        weights,
        residual_t: t,
    }
}

/// Same compositing recorded on a tape: entries are `(σ, color, δ)`.
/// Transmittance is `exp(-cumulative optical depth)` and each weight the
/// difference of consecutive transmittances.
pub fn composite_on_tape(tape: &mut Tape, entries: &[(Var, Var, f64)], background: [f64; 3]) -> Result<Var> {
    let bg = tape.input(&background);
    if entries.is_empty() {
        return Ok(bg);
    }
    let mut t_prev = tape.constant(1.0);
    let mut depth: Option<Var> = None;
    let mut terms = Vec::with_capacity(entries.len() + 1);
    for &(sigma, color, delta) in entries {
        let od = tape.scale(sigma, delta)?;
        let cum = match depth {
            Some(c) => tape.add(c, od)?,
            None => od,
        };
        depth = Some(cum);
        let neg = tape.scale(cum, -1.0)?;
        let t_next = tape.exp(neg)?;
        let w = tape.sub(t_prev, t_next)?;
        terms.push((tape.mul_scalar(color, w)?, 1.0));
        t_prev = t_next;
    }
    terms.push((tape.mul_scalar(bg, t_prev)?, 1.0));
    Ok(tape.lin_comb(&terms)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderSettings {
    pub num_samples: usize,
    pub background: [f64; 3],
    pub clip_to_frame: bool,
    /// Stratified sampling (training); midpoints otherwise.
    pub stratified: bool,
}

/// Everything needed to evaluate the field along rays.
#[derive(Clone, Copy)]
pub struct RenderModel<'a> {
    pub field: &'a Field,
    /// One index per local level, `indices[s - 1]` for level `s`.
    pub indices: &'a [VoxelHashIndex],
    pub frame: &'a CanonicalFrame,
}

impl RenderModel<'_> {
    pub fn check(&self) -> Result<()> {
        if self.field.levels.len() != self.indices.len() {
            return Err(Error::ConfigMismatch(format!(
                "field has {} local levels but the hierarchy has {}",
                self.field.levels.len(),
                self.indices.len()
            )));
        }
        for (l, ix) in self.field.levels.iter().zip(self.indices) {
            if l.meta.level_index != ix.level_index || l.meta.num_points != ix.points.len() {
                return Err(Error::ConfigMismatch(format!(
                    "level {} has {} parameters rows but {} points",
                    l.meta.level_index,
                    l.meta.num_points,
                    ix.points.len()
                )));
            }
        }
        Ok(())
    }
}

/// Records one ray on the tape and returns its pixel color (length 3).
pub fn trace_ray(
    tape: &mut Tape,
    model: &RenderModel,
    origin: &Vec3,
    direction: &Vec3,
    samples: &QuadratureSamples,
    settings: &RenderSettings,
) -> Result<Var> {
    let field = model.field;
    let cfg = &field.config;
    let points: Vec<&[Vec3]> = model.indices.iter().map(|i| i.points.as_slice()).collect();
    let dir_enc = tape.input(&field.encode_direction(direction));
    let mut entries = Vec::with_capacity(samples.depths.len());
    for (&t, &delta) in samples.depths.iter().zip(&samples.deltas) {
        let q = origin + direction * t;
        let qc = model.frame.to_canonical(&q);
        if settings.clip_to_frame && qc.amax() > 1.0 + CLIP_SLACK {
            continue;
        }
        let valid = valid_scales(model.indices, &q, cfg.tau, cfg.max_neighbors);
        if let Some((sigma, color)) = field.eval(tape, &q, &qc, dir_enc, &valid, &points)? {
            entries.push((sigma, color, delta));
        }
    }
    composite_on_tape(tape, &entries, settings.background)
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub colors: Vec<[f64; 3]>,
    /// Mean over rays of `‖C_gt - Ĉ‖²`, when targets are present.
    pub loss: Option<f64>,
    /// Gradient of `loss`, when requested.
    pub gradients: Option<Gradients>,
}

struct ChunkOut {
    colors: Vec<[f64; 3]>,
    loss_sum: f64,
    grads: Option<Gradients>,
}

/// Renders a batch. With `ray_seeds` each ray draws stratified depths from
/// its own seed; otherwise midpoints are used. When `with_gradients` is set
/// the batch must carry targets and the mean loss gradient is returned.
///
/// Rays are processed in fixed chunks of [`RAY_CHUNK`] and chunk results are
/// reduced in order, so the output is bit-identical for any pool size.
pub fn render_rays(
    model: &RenderModel,
    batch: &RayBatch,
    settings: &RenderSettings,
    ray_seeds: Option<&[u64]>,
    with_gradients: bool,
    pool: Option<&ThreadPool>,
) -> Result<RenderOutput> {
    model.check()?;
    if let Some(s) = ray_seeds {
        if s.len() != batch.len() {
            return Err(Error::DimensionMismatch(format!("{} seeds for {} rays", s.len(), batch.len())));
        }
    }
    if with_gradients && batch.gt_colors.is_none() {
        return Err(Error::InvalidArgument("gradients requested for a batch without targets".into()));
    }
    let n = batch.len();
    let inv_n = if n > 0 { 1.0 / n as f64 } else { 0.0 };
    let starts: Vec<usize> = (0..n).step_by(RAY_CHUNK).collect();

    let run_chunk = |start: usize| -> Result<ChunkOut> {
        let end = (start + RAY_CHUNK).min(n);
        let store = &model.field.store;
        let mut tape = Tape::new(store);
        let mut grads = with_gradients.then(|| Gradients::zeros_like(store));
        let mut out = ChunkOut {
            colors: Vec::with_capacity(end - start),
            loss_sum: 0.0,
            grads: None,
        };
        for i in start..end {
            tape.clear();
            let samples = match ray_seeds {
                Some(seeds) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seeds[i]);
                    sample_ray(batch.near[i], batch.far[i], settings.num_samples, settings.stratified, &mut rng)
                }
                None => midpoint_samples(batch.near[i], batch.far[i], settings.num_samples),
            };
            let pixel = trace_ray(&mut tape, model, &batch.origins[i], &batch.directions[i], &samples, settings)?;
            let v = tape.value(pixel);
            out.colors.push([v[0], v[1], v[2]]);
            if let Some(gt) = &batch.gt_colors {
                let target = tape.input(&gt[i]);
                let diff = tape.sub(pixel, target)?;
                let sq = tape.dot(diff, diff)?;
                out.loss_sum += tape.scalar(sq);
                if let Some(g) = grads.as_mut() {
                    let root = tape.scale(sq, inv_n)?;
                    tape.backward(root, g)?;
                }
            }
        }
        out.grads = grads;
        Ok(out)
    };

    let chunks: Vec<Result<ChunkOut>> = match pool {
        Some(p) => p.install(|| starts.par_iter().map(|&s| run_chunk(s)).collect()),
        None => starts.iter().map(|&s| run_chunk(s)).collect(),
    };

    let mut colors = Vec::with_capacity(n);
    let mut loss_sum = 0.0;
    let mut gradients: Option<Gradients> = None;
    for c in chunks {
        let c = c?;
        colors.extend(c.colors);
        loss_sum += c.loss_sum;
        if let Some(g) = c.grads {
            match gradients.as_mut() {
                Some(acc) => acc.accumulate(&g),
                None => gradients = Some(g),
            }
        }
    }
    if with_gradients && gradients.is_none() {
        gradients = Some(Gradients::zeros_like(&model.field.store));
    }
    Ok(RenderOutput {
        colors,
        loss: batch.gt_colors.as_ref().map(|_| loss_sum * inv_n),
        gradients,
    })
}

/// Evaluation-mode render of a full camera image.
pub fn render_image(
    model: &RenderModel,
    camera: &Camera,
    settings: &RenderSettings,
    pool: Option<&ThreadPool>,
) -> Result<Image> {
    let idx: Vec<usize> = (0..camera.num_pixels()).collect();
    let batch = generate_rays(camera, &idx)?;
    let eval = RenderSettings {
        stratified: false,
        ..settings.clone()
    };
    let out = render_rays(model, &batch, &eval, None, false, pool)?;
    Image::from_f64(camera.width, camera.height, &out.colors)
}

#[cfg(test)]
mod tests;
