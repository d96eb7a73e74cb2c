//! Model assembly from a point cloud and a config, plus evaluation helpers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::ThreadPool;

use crate::autodiff::ParamStore;
use crate::config::{Config, FrameMode};
use crate::error::{Error, Result};
use crate::field::{Field, FieldConfig, LevelMeta};
use crate::harness::metrics::{psnr, ssim};
use crate::hierarchy::{auto_schedule, build_hierarchy, PointHierarchy};
use crate::renderer::{render_image, RenderModel, RenderSettings};
use crate::scene_io::{compute_canonical_frame, CanonicalFrame, Camera, Image, PointCloud};
use crate::spatial_index::{build_index, VoxelHashIndex};

/// Seed streams derived from the master seed.
pub mod seeds {
    pub const FIELD: u64 = 0;
    pub const POINT_SUBSET: u64 = 1;
    pub const PIXELS: u64 = 2;

    /// Mixes a master seed with a stream tag (splitmix64 finalizer).
    pub fn derive(seed: u64, tag: u64) -> u64 {
        let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// Trained or trainable state: frame, hierarchy, indices and field.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: Config,
    pub frame: CanonicalFrame,
    pub hierarchy: PointHierarchy,
    pub indices: Vec<VoxelHashIndex>,
    pub field: Field,
}

/// Frame selected by the config; PCA and scale modes look at `cloud`.
pub fn resolve_frame(cloud: &PointCloud, config: &Config) -> Result<CanonicalFrame> {
    match &config.frame {
        FrameMode::Pca => compute_canonical_frame(cloud, config.frame_margin),
        FrameMode::Scale => CanonicalFrame::scale_only(cloud, config.frame_margin),
        FrameMode::Fixed { center, half_extent } => CanonicalFrame::axis_aligned(*center, *half_extent),
    }
}

/// Explicit `(omega, gamma)` from the config, with `auto` filled from the cloud.
pub fn resolve_schedule(cloud: &PointCloud, config: &Config) -> Result<(f64, f64)> {
    match (config.omega, config.gamma) {
        (Some(o), Some(g)) => Ok((o, g)),
        (o, g) => {
            if config.num_levels == 0 {
                // no local level is built, any valid schedule will do
                return Ok((o.unwrap_or(1.0), g.unwrap_or(2.0)));
            }
            let (ao, ag) = auto_schedule(cloud, config.num_levels)?;
            Ok((o.unwrap_or(ao), g.unwrap_or(ag)))
        }
    }
}

/// Seeded random subset of `round(ratio · N)` points, kept in input order.
pub fn subsample_ratio(cloud: &PointCloud, ratio: f64, seed: u64) -> PointCloud {
    let n = cloud.len();
    let keep = ((ratio * n as f64).round() as usize).min(n);
    if keep == n {
        return cloud.clone();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds::derive(seed, seeds::POINT_SUBSET)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    PointCloud {
        positions: kept.iter().map(|&i| cloud.positions[i]).collect(),
    }
}

pub fn level_metas(h: &PointHierarchy) -> Vec<LevelMeta> {
    h.levels
        .iter()
        .map(|l| LevelMeta {
            level_index: l.level_index,
            voxel_edge: l.voxel_edge,
            num_points: l.len(),
        })
        .collect()
}

impl Model {
    /// Frame and schedule come from the full input cloud; the hierarchy is
    /// built from the `point_ratio` subset.
    pub fn build(cloud: &PointCloud, config: &Config) -> Result<Model> {
        config.validate()?;
        let frame = resolve_frame(cloud, config)?;
        let (omega, gamma) = resolve_schedule(cloud, config)?;
        let kept = subsample_ratio(cloud, config.point_ratio, config.seed);
        let hierarchy = build_hierarchy(&kept, omega, gamma, config.num_levels)?;
        Model::from_parts(config.clone(), frame, hierarchy, None)
    }

    /// Assembles a model; `params` of `None` initializes the field from the seed.
    pub fn from_parts(
        config: Config,
        frame: CanonicalFrame,
        hierarchy: PointHierarchy,
        params: Option<ParamStore>,
    ) -> Result<Model> {
        if hierarchy.levels.len() != config.num_levels {
            return Err(Error::ConfigMismatch(format!(
                "config asks for {} local levels, hierarchy has {}",
                config.num_levels,
                hierarchy.levels.len()
            )));
        }
        let fcfg = FieldConfig::from_config(&config);
        let metas = level_metas(&hierarchy);
        let field = match params {
            Some(store) => Field::assemble(&fcfg, &metas, store)?,
            None => Field::init(&fcfg, &metas, seeds::derive(config.seed, seeds::FIELD))?,
        };
        let indices = hierarchy.levels.iter().map(build_index).collect();
        Ok(Model {
            config,
            frame,
            hierarchy,
            indices,
            field,
        })
    }

    pub fn view(&self) -> RenderModel<'_> {
        RenderModel {
            field: &self.field,
            indices: &self.indices,
            frame: &self.frame,
        }
    }

    pub fn render_settings(&self, stratified: bool) -> RenderSettings {
        RenderSettings {
            num_samples: self.config.num_samples,
            background: self.config.background,
            clip_to_frame: self.config.clip_to_frame,
            stratified,
        }
    }

    pub fn render(&self, camera: &Camera, pool: Option<&ThreadPool>) -> Result<Image> {
        render_image(&self.view(), camera, &self.render_settings(false), pool)
    }
}

/// Builds a pool for `workers > 1`; a single worker runs inline.
pub fn worker_pool(workers: usize) -> Result<Option<ThreadPool>> {
    if workers <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map(Some)
        .map_err(|e| Error::InvalidArgument(format!("cannot start {workers} workers: {e}")))
}

#[derive(Debug, Clone)]
pub struct ViewScore {
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub views: Vec<ViewScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub images: Vec<Image>,
}

/// Scores pairs of predicted and reference images; means are over views.
pub fn score_images(pred: Vec<Image>, reference: &[Image]) -> Result<EvalReport> {
    if pred.len() != reference.len() || pred.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} reference views",
            pred.len(),
            reference.len()
        )));
    }
    let views = pred
        .iter()
        .zip(reference)
        .map(|(p, r)| Ok(ViewScore { psnr: psnr(p, r)?, ssim: ssim(p, r)? }))
        .collect::<Result<Vec<_>>>()?;
    let n = views.len() as f64;
    Ok(EvalReport {
        mean_psnr: views.iter().map(|v| v.psnr).sum::<f64>() / n,
        mean_ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
        views,
        images: pred,
    })
}

/// Renders every view and scores it against its reference image.
pub fn evaluate(model: &Model, views: &[(Camera, Image)], pool: Option<&ThreadPool>) -> Result<EvalReport> {
    let pred = views
        .iter()
        .map(|(c, _)| model.render(c, pool))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<Image> = views.iter().map(|(_, i)| i.clone()).collect();
    score_images(pred, &refs)
}
