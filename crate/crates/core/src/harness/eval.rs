use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use crate::backbone::Network;
use crate::data::{batch, crop, tile_origins, SceneSample};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::tensor::LabelMap;

/// Predicts a whole scene from `size × size` windows laid out with stride
/// `size` (the last row/column clamped to the border). Overlapping pixels
/// take the later window's prediction, so each pixel is predicted once.
pub fn predict_scene(net: &mut Network, scene: &SceneSample, size: usize) -> Result<LabelMap> {
    let (h, w) = (scene.height(), scene.width());
    let ys = tile_origins(h, size, size)?;
    let xs = tile_origins(w, size, size)?;
    let windows: Vec<(usize, usize)> = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (y, x)))
        .collect();
    let tiles: Vec<SceneSample> = windows.iter().map(|&(y, x)| crop(scene, y, x, size)).collect();
    let (image, _) = batch(&tiles.iter().collect::<Vec<_>>())?;
    let pred = net.predict(&image)?;
    let mut out = vec![0u8; h * w];
    for (k, &(y0, x0)) in windows.iter().enumerate() {
        for y in 0..size {
            for x in 0..size {
                out[(y0 + y) * w + x0 + x] = pred.at(k, y, x);
            }
        }
    }
    LabelMap::new(1, h, w, out)
}

/// Splits `0..n` into at most `threads` contiguous ranges.
fn shards(n: usize, threads: usize) -> Vec<std::ops::Range<usize>> {
    let t = threads.clamp(1, n.max(1));
    let per = n.div_ceil(t);
    (0..t)
        .map(|i| (i * per).min(n)..((i + 1) * per).min(n))
        .filter(|r| !r.is_empty())
        .collect()
}

/// Runs `f` on each shard of `items` on its own thread and returns the
/// results in shard order. Each worker gets a private network copy.
fn sharded<T: Send>(
    net: &Network,
    n: usize,
    threads: usize,
    f: impl Fn(&mut Network, std::ops::Range<usize>) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let ranges = shards(n, threads);
    if ranges.len() <= 1 {
        return ranges.into_iter().map(|r| f(&mut net.clone(), r)).collect();
    }
    thread::scope(|s| {
        let handles: Vec<_> = ranges
            .into_iter()
            .map(|r| {
                let f = &f;
                let mut local = net.clone();
                s.spawn(move || f(&mut local, r))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    })
}

/// Predictions for every scene, in order.
pub fn predict_scenes(
    net: &Network,
    scenes: &[SceneSample],
    size: usize,
    threads: usize,
) -> Result<Vec<LabelMap>> {
    let parts = sharded(net, scenes.len(), threads, |local, r| {
        scenes[r]
            .iter()
            .map(|s| predict_scene(local, s, size))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(parts.into_iter().flatten().collect())
}

/// Confusion matrix of the network's predictions over `scenes`. The result
/// does not depend on `threads`.
pub fn evaluate_scenes(
    net: &Network,
    scenes: &[SceneSample],
    size: usize,
    threads: usize,
) -> Result<ConfusionMatrix> {
    let classes = net.spec().num_classes;
    let parts = sharded(net, scenes.len(), threads, |local, r| {
        let mut cm = ConfusionMatrix::new(classes);
        for s in &scenes[r] {
            cm.accumulate(&s.labels, &predict_scene(local, s, size)?)?;
        }
        Ok(cm)
    })?;
    let mut cm = ConfusionMatrix::new(classes);
    for p in &parts {
        cm.merge(p)?;
    }
    Ok(cm)
}

/// Confusion matrix with ground truth fed back as the prediction. Every
/// score must come out as exactly 1 for present classes.
pub fn oracle_matrix(scenes: &[SceneSample], classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    for s in scenes {
        cm.accumulate(&s.labels, &s.labels)?;
    }
    Ok(cm)
}

/// Binary PGM (P5) with gray level `round(class · 255 / (C − 1))`.
/// The ignore label maps to 255.
pub fn encode_pgm(labels: &LabelMap, classes: usize) -> Result<Vec<u8>> {
    let (n, h, w) = labels.dims();
    if n != 1 {
        return Err(Error::geometry("pgm", format!("expected one label map, got {n}")));
    }
    if classes < 2 {
        return Err(Error::Config("PGM export needs at least two classes".into()));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in labels.data() {
        out.push(if (v as usize) < classes {
            ((v as f64) * 255.0 / (classes - 1) as f64).round() as u8
        } else {
            255
        });
    }
    Ok(out)
}

/// Writes `pred_NNN.pgm` for each prediction and returns the paths.
pub fn write_pgms(preds: &[LabelMap], classes: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    preds
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let path = dir.join(format!("pred_{i:03}.pgm"));
            fs::write(&path, encode_pgm(p, classes)?).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}
