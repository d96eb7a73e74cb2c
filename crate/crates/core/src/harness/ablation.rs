//! Trains a grid of config variants on one scene and tabulates held-out scores.

use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::pipeline::{evaluate, worker_pool, EvalReport, Model};
use crate::trainer::{train, OptimizerState, TrainOptions, TrainReport};

use super::scene::SyntheticScene;

pub const CSV_HEADER: [&str; 5] = ["variant", "psnr", "ssim", "iterations", "wall_seconds"];

/// A named set of `key=value` overrides applied to the base config.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<String>,
}

impl Variant {
    pub fn new(name: &str, overrides: &[&str]) -> Self {
        Self {
            name: name.into(),
            overrides: overrides.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// One variant per line: `name: key=value key=value ...`; `#` starts a comment.
pub fn parse_grid(text: &str, origin: &Path) -> Result<Vec<Variant>> {
    let mut out: Vec<Variant> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |m: String| Error::Parse { path: origin.to_path_buf(), line: i + 1, message: m };
        let (name, rest) = line
            .split_once(':')
            .ok_or_else(|| err(format!("expected 'name: key=value ...', got '{line}'")))?;
        let name = name.trim();
        if name.is_empty() || name.contains(',') {
            return Err(err("variant names must be non-empty and contain no commas".into()));
        }
        if out.iter().any(|v| v.name == name) {
            return Err(err(format!("duplicate variant '{name}'")));
        }
        let overrides: Vec<String> = rest.split_whitespace().map(str::to_string).collect();
        if let Some(bad) = overrides.iter().find(|o| !o.contains('=')) {
            return Err(err(format!("'{bad}' is not key=value")));
        }
        out.push(Variant { name: name.to_string(), overrides });
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!("{}: grid has no variants", origin.display())));
    }
    Ok(out)
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<Vec<Variant>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_grid(&text, path)
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: Model,
    pub train: TrainReport,
    pub eval: EvalReport,
}

/// Builds a model from the scene's (holed) points, trains on the training
/// views and scores the held-out views.
pub fn train_and_evaluate(scene: &SyntheticScene, config: &Config, workers: usize) -> Result<RunResult> {
    let mut model = Model::build(&scene.points, config)?;
    let mut opt = OptimizerState::new(config.optimizer, &model.field.store);
    let opts = TrainOptions { workers, out_dir: None };
    let report = train(&mut model, &mut opt, 0, &scene.train_views(), &[], &opts)?;
    let pool = worker_pool(workers)?;
    let eval = evaluate(&model, &scene.test_views(), pool.as_ref())?;
    Ok(RunResult { model, train: report, eval })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub psnr: f64,
    pub ssim: f64,
    pub iterations: usize,
    pub wall_seconds: f64,
    /// Set when the variant failed; scores are NaN then.
    pub error: Option<String>,
}

/// Runs every variant in order. A failing variant yields a row with its
/// error and the run moves on.
pub fn run_ablation(scene: &SyntheticScene, base: &Config, grid: &[Variant], workers: usize) -> Vec<AblationRow> {
    grid.iter()
        .map(|v| {
            let start = Instant::now();
            let result = (|| -> Result<(usize, RunResult)> {
                let mut c = base.clone();
                c.apply_overrides(&v.overrides)?;
                Ok((c.iterations, train_and_evaluate(scene, &c, workers)?))
            })();
            let wall_seconds = start.elapsed().as_secs_f64();
            match result {
                Ok((iterations, r)) => AblationRow {
                    variant: v.name.clone(),
                    psnr: r.eval.mean_psnr,
                    ssim: r.eval.mean_ssim,
                    iterations,
                    wall_seconds,
                    error: None,
                },
                Err(e) => AblationRow {
                    variant: v.name.clone(),
                    psnr: f64::NAN,
                    ssim: f64::NAN,
                    iterations: 0,
                    wall_seconds,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory csv");
    for r in rows {
        w.write_record([
            r.variant.clone(),
            format!("{:.4}", r.psnr),
            format!("{:.5}", r.ssim),
            r.iterations.to_string(),
            format!("{:.2}", r.wall_seconds),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
}

pub fn write_ablation_csv(path: impl AsRef<Path>, rows: &[AblationRow]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ablation_csv(rows)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let g = parse_grid("# scales\nfull: num_levels=4\nglobal-only: num_levels=0 # comment\n\n", Path::new("g")).unwrap();
        assert_eq!(g, vec![Variant::new("full", &["num_levels=4"]), Variant::new("global-only", &["num_levels=0"])]);
        assert!(parse_grid("a: x\n", Path::new("g")).is_err());
        assert!(parse_grid("a: k=1\na: k=2\n", Path::new("g")).is_err());
        assert!(parse_grid("no colon\n", Path::new("g")).is_err());
        assert!(parse_grid("", Path::new("g")).is_err());
    }

    #[test]
    fn csv_layout() {
        let rows = vec![
            AblationRow { variant: "full".into(), psnr: 21.5, ssim: 0.8, iterations: 10, wall_seconds: 1.234, error: None },
            AblationRow {
                variant: "bad".into(),
                psnr: f64::NAN,
                ssim: f64::NAN,
                iterations: 0,
                wall_seconds: 0.0,
                error: Some("x".into()),
            },
        ];
        let text = ablation_csv(&rows);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "variant,psnr,ssim,iterations,wall_seconds");
        assert_eq!(lines[1], "full,21.5000,0.80000,10,1.23");
        assert_eq!(lines[2], "bad,NaN,NaN,0,0.00");
    }
}
