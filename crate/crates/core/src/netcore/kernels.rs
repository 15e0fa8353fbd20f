//! Raw numeric kernels behind the graph ops. Layouts are NCHW, row-major.

use crate::tensor::{cst, Element};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvGeom {
            stride,
            padding,
            dilation,
        }
    }

    /// `floor((n + 2p - d(k-1) - 1) / s) + 1`, or `None` if the kernel does
    /// not fit.
    pub fn out_len(&self, n: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = n + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    fn is_pointwise(&self, k: usize) -> bool {
        k == 1 && self.stride == 1 && self.padding == 0
    }
}

pub struct ConvDims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub ho: usize,
    pub wo: usize,
}

fn im2col<T: Element>(x: &[T], d: &ConvDims, g: &ConvGeom, col: &mut [T]) {
    let plane = d.ho * d.wo;
    let (s, p, dil) = (g.stride as isize, g.padding as isize, g.dilation as isize);
    for c in 0..d.c {
        let xc = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = ((c * d.k + ky) * d.k + kx) * plane;
                let dst = &mut col[row..row + plane];
                for oy in 0..d.ho {
                    let iy = oy as isize * s + ky as isize * dil - p;
                    let out = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let xrow = &xc[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize * dil - p;
                        *o = if ix < 0 || ix >= d.w as isize {
                            T::zero()
                        } else {
                            xrow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(col: &[T], d: &ConvDims, g: &ConvGeom, dx: &mut [T]) {
    let plane = d.ho * d.wo;
    let (s, p, dil) = (g.stride as isize, g.padding as isize, g.dilation as isize);
    for c in 0..d.c {
        let dxc = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = ((c * d.k + ky) * d.k + kx) * plane;
                let src = &col[row..row + plane];
                for oy in 0..d.ho {
                    let iy = oy as isize * s + ky as isize * dil - p;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let base = iy as usize * d.w;
                    for ox in 0..d.wo {
                        let ix = ox as isize * s + kx as isize * dil - p;
                        if ix >= 0 && ix < d.w as isize {
                            dxc[base + ix as usize] += src[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `x: [B, C, H, W]`, `w: [O, C, k, k]`, `out: [B, O, Ho, Wo]`.
pub fn conv2d_forward<T: Element>(
    x: &[T],
    batch: usize,
    d: &ConvDims,
    w: &[T],
    out_ch: usize,
    bias: Option<&[T]>,
    g: &ConvGeom,
    out: &mut [T],
) {
    let ckk = d.c * d.k * d.k;
    let plane = d.ho * d.wo;
    let pointwise = g.is_pointwise(d.k);
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); ckk * plane]
    };
    for b in 0..batch {
        let xb = &x[b * d.c * d.h * d.w..(b + 1) * d.c * d.h * d.w];
        let ob = &mut out[b * out_ch * plane..(b + 1) * out_ch * plane];
        let src: &[T] = if pointwise {
            xb
        } else {
            im2col(xb, d, g, &mut col);
            &col
        };
        T::gemm(
            out_ch,
            ckk,
            plane,
            T::one(),
            w,
            false,
            src,
            false,
            T::zero(),
            ob,
        );
        if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                ob[o * plane..(o + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
    }
}

/// Accumulates gradients of a convolution into `dx`, `dw`, `db` when present.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Element>(
    x: &[T],
    batch: usize,
    d: &ConvDims,
    w: &[T],
    out_ch: usize,
    g: &ConvGeom,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let ckk = d.c * d.k * d.k;
    let plane = d.ho * d.wo;
    let pointwise = g.is_pointwise(d.k);
    let mut col = vec![T::zero(); if pointwise { 0 } else { ckk * plane }];
    let mut dcol = vec![T::zero(); if dx.is_some() { ckk * plane } else { 0 }];
    for b in 0..batch {
        let xb = &x[b * d.c * d.h * d.w..(b + 1) * d.c * d.h * d.w];
        let gb = &dout[b * out_ch * plane..(b + 1) * out_ch * plane];
        if let Some(db) = db.as_deref_mut() {
            for (o, acc) in db.iter_mut().enumerate() {
                *acc += gb[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let src: &[T] = if pointwise {
                xb
            } else {
                im2col(xb, d, g, &mut col);
                &col
            };
            T::gemm(
                out_ch,
                plane,
                ckk,
                T::one(),
                gb,
                false,
                src,
                true,
                T::one(),
                dw,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * d.c * d.h * d.w..(b + 1) * d.c * d.h * d.w];
            if pointwise {
                T::gemm(
                    ckk,
                    out_ch,
                    plane,
                    T::one(),
                    w,
                    true,
                    gb,
                    false,
                    T::one(),
                    dxb,
                );
            } else {
                T::gemm(
                    ckk,
                    out_ch,
                    plane,
                    T::one(),
                    w,
                    true,
                    gb,
                    false,
                    T::zero(),
                    &mut dcol,
                );
                col2im(&dcol, d, g, dxb);
            }
        }
    }
}

/// Source index pairs and weights for 1-D linear interpolation with
/// half-pixel centers (`align_corners = false`).
pub fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = src - i0 as f64;
            (i0, i1, frac)
        })
        .collect()
}

pub fn bilinear_forward<T: Element>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    out: &mut [T],
) {
    let ty = linear_taps(h, ho);
    let tx = linear_taps(w, wo);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (fy, gy) = (cst::<T>(fy), cst::<T>(1.0 - fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (fx, gx) = (cst::<T>(fx), cst::<T>(1.0 - fx));
                let top = src[y0 * w + x0] * gx + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * gx + src[y1 * w + x1] * fx;
                dst[oy * wo + ox] = top * gy + bot * fy;
            }
        }
    }
}

pub fn bilinear_backward<T: Element>(
    dout: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    dx: &mut [T],
) {
    let ty = linear_taps(h, ho);
    let tx = linear_taps(w, wo);
    for p in 0..planes {
        let g = &dout[p * ho * wo..(p + 1) * ho * wo];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (fy, gy) = (cst::<T>(fy), cst::<T>(1.0 - fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (fx, gx) = (cst::<T>(fx), cst::<T>(1.0 - fx));
                let v = g[oy * wo + ox];
                d[y0 * w + x0] += v * gy * gx;
                d[y0 * w + x1] += v * gy * fx;
                d[y1 * w + x0] += v * fy * gx;
                d[y1 * w + x1] += v * fy * fx;
            }
        }
    }
}

/// Max pooling with implicit `-inf` padding. Returns the flat input index of
/// each selected element within its plane.
pub fn maxpool_forward<T: Element>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    k: usize,
    g: &ConvGeom,
    (ho, wo): (usize, usize),
    out: &mut [T],
) -> Vec<u32> {
    let mut arg = vec![0u32; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_i = 0usize;
                for ky in 0..k {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = iy as usize * w + ix as usize;
                        if src[i] > best {
                            best = src[i];
                            best_i = i;
                        }
                    }
                }
                let o = p * ho * wo + oy * wo + ox;
                out[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    arg
}
