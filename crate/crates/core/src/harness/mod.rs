//! Experiment drivers behind the command-line tool: configuration, dataset
//! generation, training, evaluation, ablation and gradient checking.

mod ablate;
mod config;
mod eval;
pub mod gradcheck;
mod train;

use std::fs;
use std::path::Path;

pub use ablate::{run_ablation, AblationReport, AblationRun, MethodMean};
pub use config::{DataConfig, KeyValues, TrainConfig};
pub use eval::{
    encode_pgm, evaluate_scenes, oracle_matrix, predict_scene, predict_scenes, write_pgms,
};
pub use train::{log_csv, train, train_count, write_outputs, Dataset, EpochLog, TrainOutcome};

use crate::data::{generate_scene, raster, Manifest, SceneSample};
use crate::error::{Error, Result};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "IFWM_THREADS";

/// Worker threads: `IFWM_THREADS` when set to a positive integer, otherwise
/// the available parallelism. `deterministic` runs force one thread.
pub fn worker_threads(deterministic: bool) -> usize {
    if deterministic {
        return 1;
    }
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(n) if n > 0 => n,
        _ => available,
    }
}

/// All scenes described by `cfg`, in manifest order.
pub fn generate_scenes(cfg: &DataConfig) -> Result<Vec<SceneSample>> {
    (0..cfg.count).map(|i| generate_scene(&cfg.scene_spec(i))).collect()
}

/// Writes `scene_NNN.image.rast` / `scene_NNN.labels.rast` pairs and
/// `manifest.tsv` into `dir`; returns the manifest and the summed per-class
/// pixel counts.
pub fn write_dataset(cfg: &DataConfig, dir: &Path) -> Result<(Manifest, Vec<u64>)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    let mut counts = vec![0u64; cfg.scene.num_classes];
    for (i, scene) in generate_scenes(cfg)?.iter().enumerate() {
        let image = dir.join(format!("scene_{i:03}.image.rast"));
        let labels = dir.join(format!("scene_{i:03}.labels.rast"));
        raster::write_image(&image, &scene.image)?;
        raster::write_labels(&labels, &scene.labels)?;
        for (c, n) in scene.class_histogram(cfg.scene.num_classes).iter().enumerate() {
            counts[c] += n;
        }
        manifest.entries.push((image, labels));
    }
    manifest.write(&dir.join("manifest.tsv"))?;
    Ok((manifest, counts))
}
