//! Optimization loop: optimizers, learning-rate schedule, pixel batching,
//! checkpoints and the JSON-lines metrics log.

pub mod checkpoint;

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamGroup, ParamStore};
use crate::config::{Config, DecayMode, OptimizerKind};
use crate::error::{Error, Result};
use crate::pipeline::{evaluate, seeds, worker_pool, Model};
use crate::renderer::{render_rays, RayBatch};
use crate::scene_io::{Camera, Image};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint.ckpt";

pub fn checkpoint_name(step: u64) -> String {
    format!("checkpoint_{step:06}.ckpt")
}

/// Learning rate per parameter group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrMap {
    pub decoder: f64,
    pub features: f64,
}

impl LrMap {
    pub fn for_group(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Decoder => self.decoder,
            ParamGroup::Features => self.features,
        }
    }
}

/// `lr0 · decay_rate^(step / decay_every)`; the exponent is floored in step mode.
pub fn lr_at(step: u64, config: &Config) -> LrMap {
    let e = step as f64 / config.decay_every;
    let e = match config.decay_mode {
        DecayMode::Continuous => e,
        DecayMode::Step => e.floor(),
    };
    let f = if e == 0.0 { 1.0 } else { config.decay_rate.powf(e) };
    LrMap {
        decoder: config.lr_decoder * f,
        features: config.lr_features * f,
    }
}

/// First and second moments per parameter tensor (unused by SGD but kept
/// so that the checkpoint layout does not depend on the optimizer).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            kind,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    fn check_shapes(&self, store: &ParamStore) -> Result<()> {
        let ok = self.first.len() == store.len()
            && self.second.len() == store.len()
            && store
                .tensors()
                .iter()
                .zip(self.first.iter().zip(&self.second))
                .all(|(t, (m, v))| m.len() == t.len() && v.len() == t.len());
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch("optimizer moments do not mirror the parameters".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn from_config(c: &Config) -> Self {
        Self {
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Fails on the first non-finite gradient entry, naming the tensor.
pub fn check_gradients(store: &ParamStore, grads: &Gradients) -> Result<()> {
    for (t, g) in store.tensors().iter().zip(grads.buffers()) {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {} at index {i} is {}", t.name, g[i])));
        }
    }
    Ok(())
}

/// Adam with bias correction and per-group learning rates.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: &LrMap,
    hyper: &AdamHyper,
) -> Result<()> {
    state.check_shapes(store)?;
    check_gradients(store, grads)?;
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - hyper.beta1.powf(t);
    let c2 = 1.0 - hyper.beta2.powf(t);
    for (k, tensor) in store.tensors_mut().iter_mut().enumerate() {
        let rate = lr.for_group(tensor.group);
        let g = &grads.buffers()[k];
        let m = &mut state.first[k];
        let v = &mut state.second[k];
        for i in 0..tensor.data.len() {
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            tensor.data[i] -= rate * mh / (vh.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// Plain gradient descent with per-group learning rates.
pub fn sgd_step(store: &mut ParamStore, grads: &Gradients, state: &mut OptimizerState, lr: &LrMap) -> Result<()> {
    check_gradients(store, grads)?;
    state.step += 1;
    for (k, tensor) in store.tensors_mut().iter_mut().enumerate() {
        let rate = lr.for_group(tensor.group);
        for (p, g) in tensor.data.iter_mut().zip(&grads.buffers()[k]) {
            *p -= rate * g;
        }
    }
    Ok(())
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    /// Mean squared color error of the batch at this step.
    pub loss: f64,
    /// Held-out PSNR when validation views exist, batch PSNR otherwise.
    pub psnr: f64,
    pub lr_decoder: f64,
    pub lr_features: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub workers: usize,
    /// Where checkpoints and the metrics log go; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub final_step: u64,
    /// Batch loss of every step run, in order.
    pub step_losses: Vec<f64>,
    pub records: Vec<MetricRecord>,
}

/// Pixel batch of step `step`: pixels drawn uniformly with replacement over
/// all training pixels, plus one sampling seed per ray.
pub fn draw_batch(views: &[(Camera, Image)], config: &Config, step: u64) -> Result<(RayBatch, Vec<u64>)> {
    let sizes: Vec<usize> = views.iter().map(|(c, _)| c.num_pixels()).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("no training pixels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(config.seed, seeds::PIXELS));
    rng.set_stream(step);
    let mut batch = RayBatch::with_capacity(config.batch_rays);
    let mut ray_seeds = Vec::with_capacity(config.batch_rays);
    for _ in 0..config.batch_rays {
        let mut idx = rng.random_range(0..total);
        let mut v = 0;
        while idx >= sizes[v] {
            idx -= sizes[v];
            v += 1;
        }
        let (cam, img) = &views[v];
        let (col, row) = (idx % cam.width, idx / cam.width);
        let px = img.get(col, row);
        batch.push(
            cam.center(),
            cam.pixel_direction(col, row),
            cam.near,
            cam.far,
            Some([px[0] as f64, px[1] as f64, px[2] as f64]),
        );
        ray_seeds.push(rng.random::<u64>());
    }
    Ok((batch, ray_seeds))
}

fn append_record(path: &Path, rec: &MetricRecord) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(rec).expect("metric record serializes");
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Runs steps `start_step..config.iterations`, updating `model` and
/// `optimizer` in place.
///
/// A non-finite loss stops the run with an error; checkpoints already on
/// disk are left untouched.
pub fn train(
    model: &mut Model,
    optimizer: &mut OptimizerState,
    start_step: u64,
    train_views: &[(Camera, Image)],
    validation: &[(Camera, Image)],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    let config = model.config.clone();
    config.validate()?;
    if train_views.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one view".into()));
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let pool = worker_pool(opts.workers)?;
    let settings = model.render_settings(true);
    let hyper = AdamHyper::from_config(&config);
    let end = config.iterations as u64;
    let mut report = TrainReport {
        final_step: start_step,
        step_losses: Vec::new(),
        records: Vec::new(),
    };

    for step in start_step..end {
        let lr = lr_at(step, &config);
        let (batch, ray_seeds) = draw_batch(train_views, &config, step)?;
        let out = render_rays(&model.view(), &batch, &settings, Some(&ray_seeds), true, pool.as_ref())?;
        let loss = out.loss.unwrap_or(0.0);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step} is {loss}")));
        }
        let grads = out.gradients.expect("gradients requested");
        match optimizer.kind {
            OptimizerKind::Adam => adam_step(&mut model.field.store, &grads, optimizer, &lr, &hyper)?,
            OptimizerKind::Sgd => sgd_step(&mut model.field.store, &grads, optimizer, &lr)?,
        }
        report.step_losses.push(loss);
        let done = step + 1;
        report.final_step = done;

        if let Some(dir) = &opts.out_dir {
            if config.checkpoint_every > 0 && done % config.checkpoint_every as u64 == 0 {
                save_checkpoint(dir.join(checkpoint_name(done)), model, Some(optimizer), done)?;
            }
        }
        let eval_now = done == end || (config.eval_every > 0 && done % config.eval_every as u64 == 0);
        if eval_now {
            let psnr = if validation.is_empty() {
                -10.0 * (loss / 3.0).max(1e-10).log10()
            } else {
                evaluate(model, validation, pool.as_ref())?.mean_psnr
            };
            let rec = MetricRecord {
                step: done,
                loss,
                psnr,
                lr_decoder: lr.decoder,
                lr_features: lr.features,
            };
            if let Some(dir) = &opts.out_dir {
                append_record(&dir.join(METRICS_FILE), &rec)?;
            }
            report.records.push(rec);
        }
    }
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(dir.join(FINAL_CHECKPOINT), model, Some(optimizer), report.final_step)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
