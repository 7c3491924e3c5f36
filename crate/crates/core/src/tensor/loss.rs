use super::Shape;
use crate::error::{Error, Result};

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Integer label raster of shape `(n, h, w)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    n: usize,
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::geometry(
                "labels",
                format!("{} labels cannot fill {n}x{h}x{w}", data.len()),
            ));
        }
        Ok(LabelMap { n, h, w, data })
    }

    pub fn filled(n: usize, h: usize, w: usize, value: u8) -> Self {
        LabelMap {
            n,
            h,
            w,
            data: vec![value; n * h * w],
        }
    }

    /// Stacks equally sized single-item maps into one batch.
    pub fn stack<'a>(items: impl IntoIterator<Item = &'a LabelMap>) -> Result<Self> {
        let mut out: Option<LabelMap> = None;
        for item in items {
            match &mut out {
                None => out = Some(item.clone()),
                Some(acc) => {
                    if (acc.h, acc.w) != (item.h, item.w) {
                        return Err(Error::geometry("labels", "cannot stack differing extents"));
                    }
                    acc.n += item.n;
                    acc.data.extend_from_slice(&item.data);
                }
            }
        }
        out.ok_or_else(|| Error::geometry("labels", "empty batch"))
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.h, self.w)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn at(&self, n: usize, y: usize, x: usize) -> u8 {
        self.data[(n * self.h + y) * self.w + x]
    }

    /// Checks that every label is below `classes` or the ignore sentinel.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&v| v != IGNORE_LABEL && v as usize >= classes)
        {
            Some(v) => Err(Error::Data(format!(
                "label {v} out of range for {classes} classes"
            ))),
            None => Ok(()),
        }
    }
}

/// Returns `(mean loss, softmax probabilities, counted pixels)`.
pub(crate) fn forward(
    logits: &[f64],
    shape: Shape,
    labels: &LabelMap,
) -> Result<(f64, Vec<f64>, usize)> {
    if labels.dims() != (shape.n, shape.h, shape.w) {
        return Err(Error::geometry(
            "softmax_cross_entropy",
            format!(
                "labels {:?} do not match logits {shape}",
                labels.dims()
            ),
        ));
    }
    labels.validate(shape.c)?;
    let plane = shape.plane();
    let mut probs = vec![0.0; logits.len()];
    let mut total = 0.0;
    let mut count = 0;
    for n in 0..shape.n {
        let base = n * shape.c * plane;
        for p in 0..plane {
            let at = |c: usize| base + c * plane + p;
            let max = (0..shape.c).map(|c| logits[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..shape.c {
                let e = (logits[at(c)] - max).exp();
                probs[at(c)] = e;
                z += e;
            }
            for c in 0..shape.c {
                probs[at(c)] /= z;
            }
            let label = labels.data[n * plane + p];
            if label != IGNORE_LABEL {
                total += max + z.ln() - logits[at(label as usize)];
                count += 1;
            }
        }
    }
    let mean = if count == 0 { 0.0 } else { total / count as f64 };
    Ok((mean, probs, count))
}

pub(crate) fn backward(probs: &[f64], labels: &[u8], shape: Shape, count: usize, g: f64) -> Vec<f64> {
    let mut d = vec![0.0; probs.len()];
    if count == 0 {
        return d;
    }
    let scale = g / count as f64;
    let plane = shape.plane();
    for n in 0..shape.n {
        let base = n * shape.c * plane;
        for p in 0..plane {
            let label = labels[n * plane + p];
            if label == IGNORE_LABEL {
                continue;
            }
            for c in 0..shape.c {
                let i = base + c * plane + p;
                let target = if c == label as usize { 1.0 } else { 0.0 };
                d[i] = scale * (probs[i] - target);
            }
        }
    }
    d
}
