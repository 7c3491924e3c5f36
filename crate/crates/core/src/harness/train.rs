use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::eval::evaluate_scenes;
use super::TrainConfig;
use crate::backbone::{checkpoint, Network};
use crate::data::{batch, rotate_augment, tile, SceneSample};
use crate::error::{Error, Result};
use crate::metrics::{class_scores_over, Scores};
use crate::tensor::Momentum;

/// Number of leading scenes used for training; the trailing
/// `round(n · val_fraction)` scenes (at least one when the fraction is
/// positive and `n > 1`) are held out.
pub fn train_count(n: usize, val_fraction: f64) -> usize {
    if val_fraction <= 0.0 || n < 2 {
        return n;
    }
    let held = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    n - held
}

/// Scenes split into training tiles and held-out whole scenes.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train_tiles: Vec<SceneSample>,
    pub held_out: Vec<SceneSample>,
}

impl Dataset {
    pub fn from_scenes(scenes: Vec<SceneSample>, cfg: &TrainConfig) -> Result<Self> {
        let k = train_count(scenes.len(), cfg.val_fraction);
        let mut scenes = scenes;
        let held_out = scenes.split_off(k);
        let mut train_tiles = Vec::new();
        for s in &scenes {
            train_tiles.extend(tile(s, cfg.tile_size, cfg.tile_stride)?);
        }
        if train_tiles.is_empty() {
            return Err(Error::Data("no training samples".into()));
        }
        Ok(Dataset {
            train_tiles,
            held_out,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over the epoch's samples.
    pub loss: f64,
    /// Held-out pixel accuracy and mIoU.
    pub pa: f64,
    pub miou: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch,lr,loss,PA,mIoU";
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{:.8e},{:.8},{:.6},{:.6}",
            self.epoch, self.lr, self.loss, self.pa, self.miou
        )
    }
}

pub struct TrainOutcome {
    pub network: Network,
    /// Snapshot with the highest held-out mIoU (first on ties).
    pub best: Network,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    /// Held-out scores of the final network.
    pub scores: Scores,
}

/// Trains a fresh network from `cfg`.
///
/// Each epoch shuffles the training tiles, optionally rotates every tile by a
/// random number of quarter turns, and steps the optimizer once per batch at
/// `lr0 · decay^epoch`. Held-out scenes are scored after every epoch.
/// Everything is driven by `cfg.seed`, so repeated runs are bit-identical.
pub fn train(
    cfg: &TrainConfig,
    data: &Dataset,
    threads: usize,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut net = Network::new(cfg.network.clone())?;
    let mut opt = Momentum::new(cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e_5f6c_6f6f);
    let mut order: Vec<usize> = (0..data.train_tiles.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best = (net.clone(), 0, f64::NEG_INFINITY);
    let mut scores = None;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let rotated: Vec<SceneSample> = chunk
                .iter()
                .map(|&i| {
                    let turns = if cfg.augment { rng.gen_range(0..4u8) } else { 0 };
                    rotate_augment(&data.train_tiles[i], turns)
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&SceneSample> = rotated.iter().collect();
            let (image, labels) = batch(&refs)?;
            let loss = net.loss_and_grad(&image, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    value: loss,
                });
            }
            loss_sum += loss * chunk.len() as f64;
            opt.step(net.params_mut().into_iter().map(|(_, t)| t), lr);
        }
        let cm = evaluate_scenes(&net, &data.held_out, cfg.tile_size, threads)?;
        let s = class_scores_over(&cm, cfg.mean_classes.as_deref());
        let row = EpochLog {
            epoch,
            lr,
            loss: loss_sum / order.len() as f64,
            pa: s.pixel_accuracy,
            miou: s.mean_iou,
        };
        on_epoch(&row);
        log.push(row);
        if s.mean_iou > best.2 {
            best = (net.clone(), epoch, s.mean_iou);
        }
        scores = Some(s);
        let reached = |target: Option<f64>, v: f64| target.is_some_and(|t| v >= t);
        if (cfg.stop_pa.is_some() || cfg.stop_miou.is_some())
            && (cfg.stop_pa.is_none() || reached(cfg.stop_pa, row.pa))
            && (cfg.stop_miou.is_none() || reached(cfg.stop_miou, row.miou))
        {
            break;
        }
    }
    Ok(TrainOutcome {
        network: net,
        best: best.0,
        best_epoch: best.1,
        log,
        scores: scores.expect("at least one epoch"),
    })
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from(EpochLog::HEADER);
    out.push('\n');
    for row in log {
        out.push_str(&row.to_string());
        out.push('\n');
    }
    out
}

/// Writes `train_log.csv`, `final.ckpt` and `best.ckpt` into `dir`.
pub fn write_outputs(outcome: &TrainOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let log = dir.join("train_log.csv");
    fs::write(&log, log_csv(&outcome.log)).map_err(|e| Error::io(&log, e))?;
    checkpoint::save(&outcome.network, &dir.join("final.ckpt"))?;
    checkpoint::save(&outcome.best, &dir.join("best.ckpt"))
}
