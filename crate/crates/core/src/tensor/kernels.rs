//! Raw buffer kernels shared by the forward and backward passes.

use super::Scalar;

pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let ncol = g.col_cols();
    let mut cols = vec![T::zero(); g.col_rows() * ncol];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds column gradients back onto the input image.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ncol = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[base + ix as usize] = plane[base + ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Sampling table for one axis of a half-pixel-centre bilinear resize.
#[derive(Debug, Clone, PartialEq)]
pub struct ResizeAxis {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl ResizeAxis {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(if i1 == i0 { 0.0 } else { src - i0 as f64 });
        }
        Self { lo, hi, frac }
    }
}

/// Bilinear resize of each `h×w` plane. Interpolates in the `a + t·(b − a)`
/// form so constant regions stay bit-exact.
pub(crate) fn resize_forward<T: Scalar>(
    x: &[T],
    channels: usize,
    (h, w): (usize, usize),
    ay: &ResizeAxis,
    ax: &ResizeAxis,
) -> Vec<T> {
    let (oh, ow) = (ay.lo.len(), ax.lo.len());
    let fx: Vec<T> = ax.frac.iter().map(|&f| T::from_f64_lossy(f)).collect();
    let mut out = vec![T::zero(); channels * oh * ow];
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for oy in 0..oh {
            let (r0, r1) = (ay.lo[oy] * w, ay.hi[oy] * w);
            let fy = T::from_f64_lossy(ay.frac[oy]);
            for ox in 0..ow {
                let (c0, c1) = (ax.lo[ox], ax.hi[ox]);
                let top = plane[r0 + c0] + fx[ox] * (plane[r0 + c1] - plane[r0 + c0]);
                let bot = plane[r1 + c0] + fx[ox] * (plane[r1 + c1] - plane[r1 + c0]);
                dst[oy * ow + ox] = top + fy * (bot - top);
            }
        }
    }
    out
}

pub(crate) fn resize_backward<T: Scalar>(
    dy: &[T],
    channels: usize,
    (h, w): (usize, usize),
    ay: &ResizeAxis,
    ax: &ResizeAxis,
) -> Vec<T> {
    let (oh, ow) = (ay.lo.len(), ax.lo.len());
    let one = T::one();
    let mut dx = vec![T::zero(); channels * h * w];
    for c in 0..channels {
        let g = &dy[c * oh * ow..(c + 1) * oh * ow];
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for oy in 0..oh {
            let (r0, r1) = (ay.lo[oy] * w, ay.hi[oy] * w);
            let fy = T::from_f64_lossy(ay.frac[oy]);
            for ox in 0..ow {
                let (c0, c1) = (ax.lo[ox], ax.hi[ox]);
                let fx = T::from_f64_lossy(ax.frac[ox]);
                let v = g[oy * ow + ox];
                let top = v * (one - fy);
                let bot = v * fy;
                plane[r0 + c0] = plane[r0 + c0] + top * (one - fx);
                plane[r0 + c1] = plane[r0 + c1] + top * fx;
                plane[r1 + c0] = plane[r1 + c0] + bot * (one - fx);
                plane[r1 + c1] = plane[r1 + c1] + bot * fx;
            }
        }
    }
    dx
}
