//! Bilinear sampling shared by up-sampling and flow-guided grid sampling.
//!
//! Output pixel `i` of an extent-`dst` axis maps to source coordinate
//! `(i + 0.5) · src/dst − 0.5` (half-pixel centres). A flow offset, in source
//! pixels, is added to that coordinate, and the result is clamped into
//! `[0, src − 1]` before interpolating the four neighbouring pixels. With a
//! zero offset the arithmetic is identical to plain up-sampling.

use super::Shape;

/// Source coordinate of output index `dst` under the half-pixel convention.
pub fn source_coord(dst: usize, src_extent: usize, dst_extent: usize) -> f64 {
    (dst as f64 + 0.5) * (src_extent as f64 / dst_extent as f64) - 0.5
}

/// Interpolation taps along one axis.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
    /// Whether the coordinate was clamped; clamped coordinates carry no
    /// gradient.
    clamped: bool,
}

impl Tap {
    fn new(coord: f64, extent: usize) -> Tap {
        let max = (extent - 1) as f64;
        let clamped = !(0.0..=max).contains(&coord);
        let p = coord.clamp(0.0, max);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(extent - 1);
        Tap {
            lo,
            hi,
            frac: p - lo as f64,
            clamped,
        }
    }
}

#[inline]
fn lerp2(v00: f64, v01: f64, v10: f64, v11: f64, fx: f64, fy: f64) -> f64 {
    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
}

fn flow_at(flow: Option<&[f64]>, out: Shape, n: usize, y: usize, x: usize) -> (f64, f64) {
    match flow {
        None => (0.0, 0.0),
        Some(f) => {
            let plane = out.plane();
            let base = n * 2 * plane + y * out.w + x;
            (f[base], f[base + plane])
        }
    }
}

fn taps(src: Shape, out: Shape, flow: Option<&[f64]>, n: usize, y: usize, x: usize) -> (Tap, Tap) {
    let (dx, dy) = flow_at(flow, out, n, y, x);
    let tx = Tap::new(source_coord(x, src.w, out.w) + dx, src.w);
    let ty = Tap::new(source_coord(y, src.h, out.h) + dy, src.h);
    (tx, ty)
}

/// Samples `src` onto the `out` grid. `out.n` and `out.c` must equal the
/// source's; `flow`, when present, has shape `(n, 2, out.h, out.w)`.
pub(crate) fn forward(src: &[f64], s: Shape, out: Shape, flow: Option<&[f64]>) -> Vec<f64> {
    let mut res = vec![0.0; out.numel()];
    let (sp, op) = (s.plane(), out.plane());
    for n in 0..out.n {
        for y in 0..out.h {
            for x in 0..out.w {
                let (tx, ty) = taps(s, out, flow, n, y, x);
                for c in 0..out.c {
                    let plane = &src[(n * s.c + c) * sp..(n * s.c + c + 1) * sp];
                    let r0 = ty.lo * s.w;
                    let r1 = ty.hi * s.w;
                    res[(n * out.c + c) * op + y * out.w + x] = lerp2(
                        plane[r0 + tx.lo],
                        plane[r0 + tx.hi],
                        plane[r1 + tx.lo],
                        plane[r1 + tx.hi],
                        tx.frac,
                        ty.frac,
                    );
                }
            }
        }
    }
    res
}

/// Returns `(d source, d flow)` for the requested inputs.
pub(crate) fn backward(
    src: &[f64],
    s: Shape,
    out: Shape,
    flow: Option<&[f64]>,
    dout: &[f64],
    need_src: bool,
    need_flow: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut dsrc = need_src.then(|| vec![0.0; src.len()]);
    let mut dflow = (need_flow && flow.is_some()).then(|| vec![0.0; out.n * 2 * out.plane()]);
    let (sp, op) = (s.plane(), out.plane());
    for n in 0..out.n {
        for y in 0..out.h {
            for x in 0..out.w {
                let (tx, ty) = taps(s, out, flow, n, y, x);
                let (fx, fy) = (tx.frac, ty.frac);
                let r0 = ty.lo * s.w;
                let r1 = ty.hi * s.w;
                let mut gx = 0.0;
                let mut gy = 0.0;
                for c in 0..out.c {
                    let g = dout[(n * out.c + c) * op + y * out.w + x];
                    let base = (n * s.c + c) * sp;
                    if let Some(d) = dsrc.as_mut() {
                        d[base + r0 + tx.lo] += g * (1.0 - fy) * (1.0 - fx);
                        d[base + r0 + tx.hi] += g * (1.0 - fy) * fx;
                        d[base + r1 + tx.lo] += g * fy * (1.0 - fx);
                        d[base + r1 + tx.hi] += g * fy * fx;
                    }
                    if dflow.is_some() {
                        let plane = &src[base..base + sp];
                        let (v00, v01) = (plane[r0 + tx.lo], plane[r0 + tx.hi]);
                        let (v10, v11) = (plane[r1 + tx.lo], plane[r1 + tx.hi]);
                        gx += g * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                        gy += g * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                    }
                }
                if let Some(d) = dflow.as_mut() {
                    let base = n * 2 * op + y * out.w + x;
                    if !tx.clamped {
                        d[base] += gx;
                    }
                    if !ty.clamped {
                        d[base + op] += gy;
                    }
                }
            }
        }
    }
    (dsrc, dflow)
}

/// Bilinear weights of the four taps used at a sampling position, in the
/// order (lo-lo, lo-hi, hi-lo, hi-hi) of (row, column).
pub fn bilinear_weights(coord_x: f64, coord_y: f64, src_w: usize, src_h: usize) -> [f64; 4] {
    let tx = Tap::new(coord_x, src_w);
    let ty = Tap::new(coord_y, src_h);
    let (fx, fy) = (tx.frac, ty.frac);
    [
        (1.0 - fy) * (1.0 - fx),
        (1.0 - fy) * fx,
        fy * (1.0 - fx),
        fy * fx,
    ]
}
