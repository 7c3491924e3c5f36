use rand::Rng;

use super::init::kaiming_normal;
use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Weights and geometry of a square 2-D convolution.
///
/// `weight` is `(out_c, in_c, k, k)`, `bias` is `(1, out_c, 1, 1)`. Kernel
/// sizes are always odd.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
    stride: usize,
    padding: usize,
}

impl ConvParams {
    /// Kaiming-initialized convolution with zero bias.
    pub fn new<R: Rng + ?Sized>(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(in_c, out_c, k, stride, padding)?;
        p.weight = kaiming_normal(p.weight.shape(), in_c * k * k, rng).with_requires_grad(true);
        Ok(p)
    }

    /// Stride-1 convolution padded to preserve spatial extents.
    pub fn same<R: Rng + ?Sized>(in_c: usize, out_c: usize, k: usize, rng: &mut R) -> Result<Self> {
        Self::new(in_c, out_c, k, 1, k.saturating_sub(1) / 2, rng)
    }

    pub fn zeros(in_c: usize, out_c: usize, k: usize, stride: usize, padding: usize) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::Contract(format!("kernel size {k} must be odd")));
        }
        if stride == 0 || in_c == 0 || out_c == 0 {
            return Err(Error::Contract(format!(
                "invalid convolution: in {in_c}, out {out_c}, stride {stride}"
            )));
        }
        Ok(ConvParams {
            weight: Tensor::zeros(Shape::new(out_c, in_c, k, k)).with_requires_grad(true),
            bias: Tensor::zeros(Shape::new(1, out_c, 1, 1)).with_requires_grad(true),
            stride,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 2] {
        [("weight", &self.weight), ("bias", &self.bias)]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 2] {
        [("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oc: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    pub(crate) fn new(
        x: Shape,
        weight: Shape,
        bias: Shape,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if x.c != weight.c {
            return Err(Error::Channel {
                op: "conv2d",
                expected: weight.c,
                got: x.c,
            });
        }
        if weight.h != weight.w || bias.numel() != weight.n {
            return Err(Error::geometry(
                "conv2d",
                format!("weight {weight} / bias {bias} are not a square kernel bank"),
            ));
        }
        let k = weight.h;
        let extent = |len: usize| -> Option<usize> {
            let padded = len + 2 * pad;
            (stride > 0 && padded >= k).then(|| (padded - k) / stride + 1)
        };
        let (Some(oh), Some(ow)) = (extent(x.h), extent(x.w)) else {
            return Err(Error::geometry(
                "conv2d",
                format!("{k}x{k} kernel with padding {pad} does not fit input {x}"),
            ));
        };
        Ok(ConvGeom {
            n: x.n,
            c: x.c,
            h: x.h,
            w: x.w,
            oc: weight.n,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub(crate) fn out_shape(&self) -> Shape {
        Shape::new(self.n, self.oc, self.oh, self.ow)
    }

    fn patch_len(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds one batch item into a `(c·k·k, oh·ow)` column matrix.
    /// Unfolds one item into columns `offset..offset + P` of a matrix with
    /// `stride` columns and one row per (channel, ky, kx).
    fn im2col(&self, x: &[f64], cols: &mut [f64], stride: usize, offset: usize) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let plane = self.out_plane();
        for c in 0..self.c {
            let src = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * stride + offset..row * stride + offset + plane];
                    for oy in 0..self.oh {
                        let iy = (oy * s + ky) as isize - p;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let srow = &src[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                srow[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters columns back into the input layout.
    fn col2im(&self, cols: &[f64], dx: &mut [f64], stride: usize, offset: usize) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let plane = self.out_plane();
        for c in 0..self.c {
            let dst = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * stride + offset..row * stride + offset + plane];
                    for oy in 0..self.oh {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < self.w as isize {
                                drow[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c = a · b` (+ `c` when `accumulate`), with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: callers pass slices whose extents cover the strided m×k, k×n
    // and m×n views; `c` is row-major contiguous.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Upper bound on the unfolded column buffer, in scalars.
const MAX_COLS: usize = 1 << 20;

/// Consecutive item ranges whose unfolded columns fit in [`MAX_COLS`]; each
/// range is handled by a single GEMM.
fn item_groups(g: &ConvGeom) -> impl Iterator<Item = std::ops::Range<usize>> {
    let per = (MAX_COLS / (g.patch_len() * g.out_plane()).max(1)).max(1);
    let n = g.n;
    (0..n).step_by(per).map(move |s| s..(s + per).min(n))
}

/// Columns of items `r`: `patch_len × (|r| · P)`.
fn group_cols(x: &[f64], g: &ConvGeom, r: &std::ops::Range<usize>) -> Vec<f64> {
    let (kk, plane) = (g.patch_len(), g.out_plane());
    let in_item = g.c * g.h * g.w;
    let width = r.len() * plane;
    let mut cols = vec![0.0; kk * width];
    for (j, n) in r.clone().enumerate() {
        g.im2col(&x[n * in_item..(n + 1) * in_item], &mut cols, width, j * plane);
    }
    cols
}

/// `W (oc × kk) · cols (kk × |r|·P)` per item group, scattered back to
/// `(n, oc, P)` with the bias added.
pub(crate) fn forward(x: &[f64], weight: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (kk, plane) = (g.patch_len(), g.out_plane());
    let mut out = vec![0.0; g.n * g.oc * plane];
    for r in item_groups(g) {
        let width = r.len() * plane;
        let cols = group_cols(x, g, &r);
        let mut prod = vec![0.0; g.oc * width];
        gemm(
            g.oc,
            kk,
            width,
            weight,
            (kk as isize, 1),
            &cols,
            (width as isize, 1),
            &mut prod,
            false,
        );
        for (j, n) in r.enumerate() {
            for o in 0..g.oc {
                let src = &prod[o * width + j * plane..o * width + (j + 1) * plane];
                let dst = &mut out[(n * g.oc + o) * plane..(n * g.oc + o + 1) * plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bias[o];
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Vec<f64>,
}

pub(crate) fn backward(
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> ConvGrads {
    let (kk, plane) = (g.patch_len(), g.out_plane());
    let in_item = g.c * g.h * g.w;
    let mut db = vec![0.0; g.oc];
    let mut dw = need_dw.then(|| vec![0.0; g.oc * kk]);
    let mut dx = need_dx.then(|| vec![0.0; g.n * in_item]);
    for r in item_groups(g) {
        let width = r.len() * plane;
        // dout of the group regrouped as (oc × |r|·P)
        let mut dmat = vec![0.0; g.oc * width];
        for (j, n) in r.clone().enumerate() {
            for o in 0..g.oc {
                let src = &dout[(n * g.oc + o) * plane..(n * g.oc + o + 1) * plane];
                dmat[o * width + j * plane..o * width + (j + 1) * plane].copy_from_slice(src);
                db[o] += src.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let cols = group_cols(x, g, &r);
            // dW (oc × kk) += dout (oc × P') · colsᵀ (P' × kk)
            gemm(
                g.oc,
                width,
                kk,
                &dmat,
                (width as isize, 1),
                &cols,
                (1, width as isize),
                dw,
                true,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols (kk × P') = Wᵀ (kk × oc) · dout (oc × P')
            let mut dcols = vec![0.0; kk * width];
            gemm(
                kk,
                g.oc,
                width,
                weight,
                (1, kk as isize),
                &dmat,
                (width as isize, 1),
                &mut dcols,
                false,
            );
            for (j, n) in r.enumerate() {
                g.col2im(&dcols, &mut dx[n * in_item..(n + 1) * in_item], width, j * plane);
            }
        }
    }
    ConvGrads { dx, dw, db }
}
