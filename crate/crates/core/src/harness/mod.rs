//! Synthetic scenes with analytic ground truth, hole injection, image
//! metrics and the ablation runner.

pub mod ablation;
pub mod holes;
pub mod metrics;
pub mod scene;

pub use ablation::{
    ablation_csv, load_grid, parse_grid, run_ablation, train_and_evaluate, write_ablation_csv, AblationRow, RunResult,
    Variant,
};
pub use holes::{plan_holes, punch_holes, HoleSpec};
pub use metrics::{mse, psnr, ssim, PSNR_CAP};
pub use scene::{generate_scene, AnalyticField, Primitive, SceneSpec, Shape, SyntheticScene};

#[cfg(test)]
mod tests;
