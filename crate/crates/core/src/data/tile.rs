use super::SceneSample;
use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Shape, Tensor};

/// Window origins along one axis. The last window is clamped to end at the
/// border so every pixel is covered.
pub fn tile_origins(extent: usize, size: usize, stride: usize) -> Result<Vec<usize>> {
    if size == 0 || stride == 0 {
        return Err(Error::geometry("tile", "size and stride must be positive"));
    }
    if size > extent {
        return Err(Error::geometry(
            "tile",
            format!("window {size} exceeds extent {extent}"),
        ));
    }
    let mut origins: Vec<usize> = (0..=extent - size).step_by(stride).collect();
    if origins.last().map_or(true, |&o| o + size < extent) {
        origins.push(extent - size);
    }
    Ok(origins)
}

/// Copies the `size × size` window at `(y0, x0)`.
pub fn crop(sample: &SceneSample, y0: usize, x0: usize, size: usize) -> SceneSample {
    let s = sample.image.shape();
    let image = Tensor::from_fn(Shape::new(1, s.c, size, size), |_, c, y, x| {
        sample.image.at(0, c, y0 + y, x0 + x)
    });
    let mut labels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            labels.push(sample.labels.at(0, y0 + y, x0 + x));
        }
    }
    SceneSample {
        image,
        labels: LabelMap::new(1, size, size, labels).expect("window extent"),
    }
}

/// Row-major sliding windows of `size × size` pixels.
pub fn tile(sample: &SceneSample, size: usize, stride: usize) -> Result<Vec<SceneSample>> {
    let ys = tile_origins(sample.height(), size, stride)?;
    let xs = tile_origins(sample.width(), size, stride)?;
    let mut out = Vec::with_capacity(ys.len() * xs.len());
    for &y in &ys {
        for &x in &xs {
            out.push(crop(sample, y, x, size));
        }
    }
    Ok(out)
}

/// Rotates image and labels together by `quarter_turns` × 90° clockwise.
pub fn rotate_augment(sample: &SceneSample, quarter_turns: u8) -> Result<SceneSample> {
    let turns = quarter_turns % 4;
    if turns == 0 {
        return Ok(sample.clone());
    }
    let (h, w) = (sample.height(), sample.width());
    if h != w {
        return Err(Error::geometry(
            "rotate_augment",
            format!("quarter turns need a square sample, got {h}x{w}"),
        ));
    }
    let n = h;
    // source position of output pixel (y, x)
    let src = |y: usize, x: usize| -> (usize, usize) {
        match turns {
            1 => (n - 1 - x, y),
            2 => (n - 1 - y, n - 1 - x),
            _ => (x, n - 1 - y),
        }
    };
    let c = sample.image.shape().c;
    let image = Tensor::from_fn(Shape::new(1, c, n, n), |_, ch, y, x| {
        let (sy, sx) = src(y, x);
        sample.image.at(0, ch, sy, sx)
    });
    let mut labels = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (sy, sx) = src(y, x);
            labels.push(sample.labels.at(0, sy, sx));
        }
    }
    Ok(SceneSample {
        image,
        labels: LabelMap::new(1, n, n, labels)?,
    })
}

/// Stacks equally sized samples into one batch.
pub fn batch(samples: &[&SceneSample]) -> Result<(Tensor, LabelMap)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::geometry("batch", "empty batch"))?
        .image
        .shape();
    let mut data = Vec::with_capacity(first.numel() * samples.len());
    for s in samples {
        if s.image.shape() != first {
            return Err(Error::geometry(
                "batch",
                format!("cannot stack {} with {first}", s.image.shape()),
            ));
        }
        data.extend_from_slice(s.image.data());
    }
    let image = Tensor::from_vec(
        Shape::new(samples.len(), first.c, first.h, first.w),
        data,
    )?;
    let labels = LabelMap::stack(samples.iter().map(|s| &s.labels))?;
    Ok((image, labels))
}
