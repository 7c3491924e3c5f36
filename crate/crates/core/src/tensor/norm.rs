use super::{Shape, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel affine parameters and running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        let shape = Shape::new(1, channels, 1, 1);
        BatchNormState {
            gamma: Tensor::full(shape, 1.0).with_requires_grad(true),
            beta: Tensor::zeros(shape).with_requires_grad(true),
            running_mean: Tensor::zeros(shape),
            running_var: Tensor::full(shape, 1.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape().c
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("gamma", &mut self.gamma),
            ("beta", &mut self.beta),
            ("running_mean", &mut self.running_mean),
            ("running_var", &mut self.running_var),
        ]
    }

    pub(crate) fn running_stats(&self) -> Stats {
        Stats {
            mean: self.running_mean.data().to_vec(),
            inv_std: self
                .running_var
                .data()
                .iter()
                .map(|v| 1.0 / (v + BN_EPSILON).sqrt())
                .collect(),
            var: self.running_var.data().to_vec(),
        }
    }

    /// Exponential moving update; the running variance uses the unbiased
    /// batch estimate.
    pub(crate) fn update_running(&mut self, stats: &Stats, shape: Shape) {
        let count = (shape.n * shape.plane()) as f64;
        let correction = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for (r, m) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * correction;
        }
    }
}

pub(crate) struct Stats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
}

fn channel_planes(x: &[f64], shape: Shape, c: usize) -> impl Iterator<Item = &[f64]> {
    let plane = shape.plane();
    (0..shape.n).map(move |n| {
        let start = (n * shape.c + c) * plane;
        &x[start..start + plane]
    })
}

pub(crate) fn batch_stats(x: &[f64], shape: Shape) -> Stats {
    let count = (shape.n * shape.plane()) as f64;
    let mut mean = vec![0.0; shape.c];
    let mut var = vec![0.0; shape.c];
    for c in 0..shape.c {
        let m = channel_planes(x, shape, c).flatten().sum::<f64>() / count;
        let v = channel_planes(x, shape, c)
            .flatten()
            .map(|v| (v - m) * (v - m))
            .sum::<f64>()
            / count;
        mean[c] = m;
        var[c] = v;
    }
    let inv_std = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    Stats { mean, var, inv_std }
}

pub(crate) fn forward(x: &[f64], shape: Shape, stats: &Stats, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let plane = shape.plane();
    let mut out = vec![0.0; x.len()];
    for n in 0..shape.n {
        for c in 0..shape.c {
            let start = (n * shape.c + c) * plane;
            let scale = gamma[c] * stats.inv_std[c];
            let shift = beta[c] - stats.mean[c] * scale;
            for (o, v) in out[start..start + plane].iter_mut().zip(&x[start..start + plane]) {
                *o = v * scale + shift;
            }
        }
    }
    out
}

pub(crate) struct NormGrads {
    pub dx: Vec<f64>,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
}

pub(crate) fn backward(
    x: &[f64],
    shape: Shape,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    dout: &[f64],
    training: bool,
) -> NormGrads {
    let plane = shape.plane();
    let count = (shape.n * plane) as f64;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; shape.c];
    let mut dbeta = vec![0.0; shape.c];
    for c in 0..shape.c {
        let (m, is) = (mean[c], inv_std[c]);
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for n in 0..shape.n {
            let start = (n * shape.c + c) * plane;
            for (v, d) in x[start..start + plane].iter().zip(&dout[start..start + plane]) {
                sum_dy += d;
                sum_dy_xhat += d * (v - m) * is;
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let scale = gamma[c] * is;
        for n in 0..shape.n {
            let start = (n * shape.c + c) * plane;
            for i in start..start + plane {
                dx[i] = if training {
                    let xhat = (x[i] - m) * is;
                    scale * (dout[i] - sum_dy / count - xhat * sum_dy_xhat / count)
                } else {
                    scale * dout[i]
                };
            }
        }
    }
    NormGrads { dx, dgamma, dbeta }
}
