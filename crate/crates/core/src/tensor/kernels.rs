//! Slice-level forward and backward kernels. Each output element is
//! accumulated in a fixed order so results are reproducible bit for bit.

use super::{Real, Shape};
use crate::error::{Error, Result};

/// Output extent of a convolution along one axis.
pub(crate) fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Validated geometry of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        x: Shape,
        weight: Shape,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        let [n, c_in, h, w] = x.0;
        let [c_out, cin_g, k, k2] = weight.0;
        if groups == 0 || stride == 0 {
            return Err(Error::Config("stride and groups must be positive".into()));
        }
        if c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::Config(format!(
                "groups={groups} must divide C_in={c_in} and C_out={c_out}"
            )));
        }
        if k != k2 || k == 0 {
            return Err(Error::Dimension(format!("kernel must be square, got {weight}")));
        }
        if cin_g != c_in / groups {
            return Err(Error::Dimension(format!(
                "weight {weight} expects {cin_g} input channels per group, input {x} has {}",
                c_in / groups
            )));
        }
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(Error::Dimension(format!(
                "kernel {k} larger than padded input {x} (padding {pad})"
            )));
        }
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            groups,
            oh: conv_out_extent(h, k, stride, pad),
            ow: conv_out_extent(w, k, stride, pad),
        })
    }

    pub fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }

    pub fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }

    pub fn out_shape(&self) -> Shape {
        Shape::new(self.n, self.c_out, self.oh, self.ow)
    }

    /// Output indices `[lo, hi)` whose tap at kernel offset `kk` lands inside
    /// an input axis of length `input`.
    fn valid(&self, kk: usize, input: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > kk {
            (self.pad - kk).div_ceil(s)
        } else {
            0
        };
        let hi = if input + self.pad > kk {
            ((input - 1 + self.pad - kk) / s + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (ohw, ihw) = (g.oh * g.ow, g.h * g.w);
    let (cin_g, cout_g, kk) = (g.cin_g(), g.cout_g(), g.k * g.k);
    let mut out = vec![T::zero(); g.n * g.c_out * ohw];
    let ranges_y: Vec<_> = (0..g.k).map(|ky| g.valid(ky, g.h, g.oh)).collect();
    let ranges_x: Vec<_> = (0..g.k).map(|kx| g.valid(kx, g.w, g.ow)).collect();

    for n in 0..g.n {
        for oc in 0..g.c_out {
            let group = oc / cout_g;
            let plane = &mut out[(n * g.c_out + oc) * ohw..][..ohw];
            if let Some(b) = bias {
                plane.fill(b[oc]);
            }
            for icg in 0..cin_g {
                let ic = group * cin_g + icg;
                let xp = &x[(n * g.c_in + ic) * ihw..][..ihw];
                let wbase = (oc * cin_g + icg) * kk;
                for ky in 0..g.k {
                    let (oy_lo, oy_hi) = ranges_y[ky];
                    for kx in 0..g.k {
                        let wv = weight[wbase + ky * g.k + kx];
                        let (ox_lo, ox_hi) = ranges_x[kx];
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let orow = &mut plane[oy * g.ow..][..g.ow];
                            let irow = &xp[iy * g.w..][..g.w];
                            if g.stride == 1 {
                                let off = kx as isize - g.pad as isize;
                                for ox in ox_lo..ox_hi {
                                    orow[ox] += wv * irow[(ox as isize + off) as usize];
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    orow[ox] += wv * irow[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward_input<T: Real>(g: &ConvGeom, grad_out: &[T], weight: &[T]) -> Vec<T> {
    let (ohw, ihw) = (g.oh * g.ow, g.h * g.w);
    let (cin_g, cout_g, kk) = (g.cin_g(), g.cout_g(), g.k * g.k);
    let mut gx = vec![T::zero(); g.n * g.c_in * ihw];
    let ranges_y: Vec<_> = (0..g.k).map(|ky| g.valid(ky, g.h, g.oh)).collect();
    let ranges_x: Vec<_> = (0..g.k).map(|kx| g.valid(kx, g.w, g.ow)).collect();

    for n in 0..g.n {
        for ic in 0..g.c_in {
            let group = ic / cin_g;
            let icg = ic % cin_g;
            let gp = &mut gx[(n * g.c_in + ic) * ihw..][..ihw];
            for ocg in 0..cout_g {
                let oc = group * cout_g + ocg;
                let gop = &grad_out[(n * g.c_out + oc) * ohw..][..ohw];
                let wbase = (oc * cin_g + icg) * kk;
                for ky in 0..g.k {
                    let (oy_lo, oy_hi) = ranges_y[ky];
                    for kx in 0..g.k {
                        let wv = weight[wbase + ky * g.k + kx];
                        let (ox_lo, ox_hi) = ranges_x[kx];
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &mut gp[iy * g.w..][..g.w];
                            let orow = &gop[oy * g.ow..][..g.ow];
                            for ox in ox_lo..ox_hi {
                                grow[ox * g.stride + kx - g.pad] += wv * orow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

pub(crate) fn conv2d_backward_weight<T: Real>(g: &ConvGeom, grad_out: &[T], x: &[T]) -> Vec<T> {
    let (ohw, ihw) = (g.oh * g.ow, g.h * g.w);
    let (cin_g, cout_g, kk) = (g.cin_g(), g.cout_g(), g.k * g.k);
    let mut gw = vec![T::zero(); g.c_out * cin_g * kk];
    let ranges_y: Vec<_> = (0..g.k).map(|ky| g.valid(ky, g.h, g.oh)).collect();
    let ranges_x: Vec<_> = (0..g.k).map(|kx| g.valid(kx, g.w, g.ow)).collect();

    for oc in 0..g.c_out {
        let group = oc / cout_g;
        for icg in 0..cin_g {
            let ic = group * cin_g + icg;
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = ranges_y[ky];
                for kx in 0..g.k {
                    let (ox_lo, ox_hi) = ranges_x[kx];
                    let mut acc = T::zero();
                    for n in 0..g.n {
                        let gop = &grad_out[(n * g.c_out + oc) * ohw..][..ohw];
                        let xp = &x[(n * g.c_in + ic) * ihw..][..ihw];
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let orow = &gop[oy * g.ow..][..g.ow];
                            let irow = &xp[iy * g.w..][..g.w];
                            for ox in ox_lo..ox_hi {
                                acc += orow[ox] * irow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                    gw[(oc * cin_g + icg) * kk + ky * g.k + kx] = acc;
                }
            }
        }
    }
    gw
}

pub(crate) fn conv2d_backward_bias<T: Real>(g: &ConvGeom, grad_out: &[T]) -> Vec<T> {
    let ohw = g.oh * g.ow;
    let mut gb = vec![T::zero(); g.c_out];
    for n in 0..g.n {
        for (oc, b) in gb.iter_mut().enumerate() {
            for &v in &grad_out[(n * g.c_out + oc) * ohw..][..ohw] {
                *b += v;
            }
        }
    }
    gb
}

/// Mean over contiguous channel groups of size `C / c_out`.
pub(crate) fn channel_avg_pool<T: Real>(x: &[T], s: Shape, c_out: usize) -> Vec<T> {
    let [n, c, h, w] = s.0;
    let (plane, group) = (h * w, c / c_out);
    let count = T::of(group as f64);
    let mut out = vec![T::zero(); n * c_out * plane];
    for b in 0..n {
        for o in 0..c_out {
            let dst = &mut out[(b * c_out + o) * plane..][..plane];
            for j in 0..group {
                let src = &x[(b * c + o * group + j) * plane..][..plane];
                dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
            }
            dst.iter_mut().for_each(|d| *d = *d / count);
        }
    }
    out
}

/// Max over contiguous channel groups; also returns the winning input
/// channel per output element (lowest index on ties).
pub(crate) fn channel_max_pool<T: Real>(x: &[T], s: Shape, c_out: usize) -> (Vec<T>, Vec<u32>) {
    let [n, c, h, w] = s.0;
    let (plane, group) = (h * w, c / c_out);
    let mut out = vec![T::zero(); n * c_out * plane];
    let mut arg = vec![0u32; n * c_out * plane];
    for b in 0..n {
        for o in 0..c_out {
            let base = (b * c_out + o) * plane;
            let first = o * group;
            out[base..base + plane].copy_from_slice(&x[(b * c + first) * plane..][..plane]);
            arg[base..base + plane].fill(first as u32);
            for j in 1..group {
                let ch = first + j;
                let src = &x[(b * c + ch) * plane..][..plane];
                for p in 0..plane {
                    if src[p] > out[base + p] {
                        out[base + p] = src[p];
                        arg[base + p] = ch as u32;
                    }
                }
            }
        }
    }
    (out, arg)
}

/// Per-axis sampling table for half-pixel bilinear interpolation with edge
/// clamping: `(i0, i1, frac)` per output index.
pub(crate) fn bilinear_table(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

pub(crate) fn bilinear_forward<T: Real>(x: &[T], s: Shape, oh: usize, ow: usize) -> Vec<T> {
    let [n, c, h, w] = s.0;
    let ty = bilinear_table(h, oh);
    let tx: Vec<_> = bilinear_table(w, ow)
        .into_iter()
        .map(|(a, b, f)| (a, b, T::of(f)))
        .collect();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            let (r0, r1) = (&src[y0 * w..][..w], &src[y1 * w..][..w]);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = r0[x0] + fx * (r0[x1] - r0[x0]);
                let bot = r1[x0] + fx * (r1[x1] - r1[x0]);
                dst[oy * ow + ox] = top + fy * (bot - top);
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward<T: Real>(grad_out: &[T], s: Shape, oh: usize, ow: usize) -> Vec<T> {
    let [n, c, h, w] = s.0;
    let ty = bilinear_table(h, oh);
    let tx: Vec<_> = bilinear_table(w, ow)
        .into_iter()
        .map(|(a, b, f)| (a, b, T::of(f)))
        .collect();
    let mut gx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let go = &grad_out[p * oh * ow..][..oh * ow];
        let gp = &mut gx[p * h * w..][..h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = go[oy * ow + ox];
                let (gt, gb) = (g * (T::one() - fy), g * fy);
                gp[y0 * w + x0] += gt * (T::one() - fx);
                gp[y0 * w + x1] += gt * fx;
                gp[y1 * w + x0] += gb * (T::one() - fx);
                gp[y1 * w + x1] += gb * fx;
            }
        }
    }
    gx
}

/// Per-pixel softmax across channels with max subtraction.
pub(crate) fn softmax_channel<T: Real>(x: &[T], s: Shape) -> Vec<T> {
    let [n, c, h, w] = s.0;
    let plane = h * w;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let idx = |ch: usize| base + ch * plane + p;
            let m = (0..c).map(|ch| x[idx(ch)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for ch in 0..c {
                let e = (x[idx(ch)] - m).exp();
                out[idx(ch)] = e;
                total += e;
            }
            for ch in 0..c {
                out[idx(ch)] = out[idx(ch)] / total;
            }
        }
    }
    out
}

pub(crate) fn stable_sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
