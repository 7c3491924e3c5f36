//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use ifwm_core::tensor::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

/// Direct nested-loop convolution.
pub fn conv_ref(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let k = ws.h;
    let oh = (xs.h + 2 * pad - k) / stride + 1;
    let ow = (xs.w + 2 * pad - k) / stride + 1;
    Tensor::from_fn(Shape::new(xs.n, ws.n, oh, ow), |n, o, y, xx| {
        let mut acc = b[o];
        for c in 0..xs.c {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (y * stride + ky) as isize - pad as isize;
                    let ix = (xx * stride + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                        acc += w.at(o, c, ky, kx) * x.at(n, c, iy as usize, ix as usize);
                    }
                }
            }
        }
        acc
    })
}

/// Half-pixel bilinear sample of one plane at continuous `(sy, sx)` with
/// border clamping.
pub fn sample_ref(x: &Tensor, n: usize, c: usize, sy: f64, sx: f64) -> f64 {
    let s = x.shape();
    let sy = sy.clamp(0.0, (s.h - 1) as f64);
    let sx = sx.clamp(0.0, (s.w - 1) as f64);
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(s.h - 1), (x0 + 1).min(s.w - 1));
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    (1.0 - fy) * ((1.0 - fx) * x.at(n, c, y0, x0) + fx * x.at(n, c, y0, x1))
        + fy * ((1.0 - fx) * x.at(n, c, y1, x0) + fx * x.at(n, c, y1, x1))
}

/// Source coordinate of destination index `i` under half-pixel alignment.
pub fn half_pixel(i: usize, src: usize, dst: usize) -> f64 {
    (i as f64 + 0.5) * src as f64 / dst as f64 - 0.5
}

pub fn upsample_ref(x: &Tensor, factor: usize) -> Tensor {
    let s = x.shape();
    let (oh, ow) = (s.h * factor, s.w * factor);
    Tensor::from_fn(Shape::new(s.n, s.c, oh, ow), |n, c, y, xx| {
        sample_ref(x, n, c, half_pixel(y, s.h, oh), half_pixel(xx, s.w, ow))
    })
}

/// Mean cross-entropy over non-ignored pixels via log-sum-exp.
pub fn cross_entropy_ref(logits: &Tensor, labels: &[u8], ignore: u8) -> f64 {
    let s = logits.shape();
    let mut total = 0.0;
    let mut count = 0;
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let t = labels[(n * s.h + y) * s.w + x];
                if t == ignore {
                    continue;
                }
                let m = (0..s.c).map(|c| logits.at(n, c, y, x)).fold(f64::MIN, f64::max);
                let lse = m + (0..s.c).map(|c| (logits.at(n, c, y, x) - m).exp()).sum::<f64>().ln();
                total += lse - logits.at(n, t as usize, y, x);
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
