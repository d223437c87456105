//! Spatial primitives on channel-last `[H, W, C]` maps.

use super::tape::{GradBuf, Op, Var};
use super::{c, Real, Tensor};
use crate::error::{Error, Result};

fn hwc(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match shape {
        [h, w, ch] => Ok((*h, *w, *ch)),
        _ => Err(Error::shape(op, format!("expected [H, W, C], got {shape:?}"))),
    }
}

fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (n + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

/// Patch matrix `[Ho*Wo, k*k*C]`, patch entries ordered `(ky, kx, c)`.
fn im2col<T: Real>(
    x: &[T],
    (h, w, ch): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let row = k * k * ch;
    let mut cols = vec![T::zero(); ho * wo * row];
    for oy in 0..ho {
        for ox in 0..wo {
            let base = (oy * wo + ox) * row;
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * ch;
                    let dst = base + (ky * k + kx) * ch;
                    cols[dst..dst + ch].copy_from_slice(&x[src..src + ch]);
                }
            }
        }
    }
    cols
}

/// Per-axis bilinear taps with half-pixel centres: `(i0, i1, frac)`.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, p - i0 as f64)
        })
        .collect()
}

fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Sum over a clamped `(2r+1)`-tap window along one axis of an `[H, W, C]`
/// buffer. With `transpose` set, scatters instead (the adjoint).
fn box_pass<T: Real>(
    src: &[T],
    dst: &mut [T],
    (h, w, ch): (usize, usize, usize),
    radius: usize,
    vertical: bool,
    transpose: bool,
) {
    let r = radius as isize;
    for y in 0..h {
        for x in 0..w {
            let o = (y * w + x) * ch;
            for d in -r..=r {
                let (sy, sx) = if vertical {
                    (clamp_idx(y as isize + d, h), x)
                } else {
                    (y, clamp_idx(x as isize + d, w))
                };
                let s = (sy * w + sx) * ch;
                if transpose {
                    for k in 0..ch {
                        dst[s + k] += src[o + k];
                    }
                } else {
                    for k in 0..ch {
                        dst[o + k] += src[s + k];
                    }
                }
            }
        }
    }
}

impl<T: Real> super::Tape<T> {
    /// Strided 2-D convolution with zero padding. `w` is `[k*k*Cin, Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let dims = hwc(self.shape(x), "conv2d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[0] != k * k * dims.2 || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {ws:?} for input {:?}, k={k}", self.shape(x)),
            ));
        }
        let (ho, wo) = match (
            out_extent(dims.0, k, stride, pad),
            out_extent(dims.1, k, stride, pad),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::shape("conv2d", "input smaller than kernel")),
        };
        let cout = ws[1];
        let cols = im2col(&self.value(x).data, dims, k, stride, pad, (ho, wo));
        let mut out = vec![T::zero(); ho * wo * cout];
        T::gemm(
            false,
            false,
            ho * wo,
            ws[0],
            cout,
            T::one(),
            &cols,
            &self.value(w).data,
            T::zero(),
            &mut out,
        );
        self.push(
            Tensor::new(&[ho, wo, cout], out)?,
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                k,
                cols,
            },
        )
    }

    /// Stride-1 depthwise convolution. `w` is `[k*k, C]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, k: usize, pad: usize) -> Result<Var> {
        let (h, wd, ch) = hwc(self.shape(x), "depthwise_conv2d")?;
        if self.shape(w) != [k * k, ch] {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("kernel {:?} for {ch} channels, k={k}", self.shape(w)),
            ));
        }
        let (ho, wo) = match (out_extent(h, k, 1, pad), out_extent(wd, k, 1, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::shape("depthwise_conv2d", "input smaller than kernel")),
        };
        let (xv, wv) = (&self.value(x).data, &self.value(w).data);
        let mut out = vec![T::zero(); ho * wo * ch];
        for oy in 0..ho {
            for ox in 0..wo {
                let o = (oy * wo + ox) * ch;
                for ky in 0..k {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let s = (iy as usize * wd + ix as usize) * ch;
                        let kk = (ky * k + kx) * ch;
                        for cc in 0..ch {
                            out[o + cc] += xv[s + cc] * wv[kk + cc];
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::new(&[ho, wo, ch], out)?,
            Op::Depthwise { x, w, pad, k },
        )
    }

    /// Bilinear resize with half-pixel centres and edge clamping.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (h, w, ch) = hwc(self.shape(x), "resize_bilinear")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize_bilinear", "empty target"));
        }
        let (ty, tx) = (bilinear_taps(h, out_h), bilinear_taps(w, out_w));
        let xv = &self.value(x).data;
        let mut out = vec![T::zero(); out_h * out_w * ch];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let o = (oy * out_w + ox) * ch;
                let taps = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x1, (1.0 - fy) * fx),
                    (y1, x0, fy * (1.0 - fx)),
                    (y1, x1, fy * fx),
                ];
                for (sy, sx, wt) in taps {
                    let s = (sy * w + sx) * ch;
                    let wt = c::<T>(wt);
                    for k in 0..ch {
                        out[o + k] += wt * xv[s + k];
                    }
                }
            }
        }
        self.push(Tensor::new(&[out_h, out_w, ch], out)?, Op::Resize(x))
    }

    /// Mean over a `(2r+1) x (2r+1)` window with edge-clamped indices.
    pub fn box_filter(&mut self, x: Var, radius: usize) -> Result<Var> {
        let dims = hwc(self.shape(x), "box_filter")?;
        let out = box_filter_values(&self.value(x).data, dims, radius);
        self.push(Tensor::new(&[dims.0, dims.1, dims.2], out)?, Op::BoxFilter { x, radius })
    }
}

/// Edge-clamped box mean on a raw `[H, W, C]` buffer.
pub(crate) fn box_filter_values<T: Real>(
    x: &[T],
    dims: (usize, usize, usize),
    radius: usize,
) -> Vec<T> {
    let mut tmp = vec![T::zero(); x.len()];
    box_pass(x, &mut tmp, dims, radius, false, false);
    let mut out = vec![T::zero(); x.len()];
    box_pass(&tmp, &mut out, dims, radius, true, false);
    let n = (2 * radius + 1) as f64;
    let inv = c::<T>(1.0 / (n * n));
    out.iter_mut().for_each(|v| *v = *v * inv);
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    x: Var,
    w: Var,
    stride: usize,
    pad: usize,
    k: usize,
    cols: &[T],
    out: &Tensor<T>,
    g: &[T],
    buf: &mut GradBuf<'_, T>,
) {
    let (ho, wo, cout) = (out.shape[0], out.shape[1], out.shape[2]);
    let wv = buf.value(w);
    let fan_in = wv.shape[0];
    if let Some(gw) = buf.slot(w) {
        T::gemm(true, false, fan_in, ho * wo, cout, T::one(), cols, g, T::one(), gw);
    }
    if buf.wants(x) {
        let (h, wd, ch) = {
            let s = &buf.value(x).shape;
            (s[0], s[1], s[2])
        };
        let mut dcols = vec![T::zero(); ho * wo * fan_in];
        T::gemm(false, true, ho * wo, cout, fan_in, T::one(), g, &wv.data, T::zero(), &mut dcols);
        let gx = buf.slot(x).expect("checked above");
        for oy in 0..ho {
            for ox in 0..wo {
                let base = (oy * wo + ox) * fan_in;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let dst = (iy as usize * wd + ix as usize) * ch;
                        let src = base + (ky * k + kx) * ch;
                        for cc in 0..ch {
                            gx[dst + cc] += dcols[src + cc];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn depthwise_backward<T: Real>(
    x: Var,
    w: Var,
    pad: usize,
    k: usize,
    out: &Tensor<T>,
    g: &[T],
    buf: &mut GradBuf<'_, T>,
) {
    let (xv, wv) = (buf.value(x), buf.value(w));
    let (h, wd, ch) = (xv.shape[0], xv.shape[1], xv.shape[2]);
    let (ho, wo) = (out.shape[0], out.shape[1]);
    let taps = |f: &mut dyn FnMut(usize, usize, usize)| {
        for oy in 0..ho {
            for ox in 0..wo {
                let o = (oy * wo + ox) * ch;
                for ky in 0..k {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        f(o, (iy as usize * wd + ix as usize) * ch, (ky * k + kx) * ch);
                    }
                }
            }
        }
    };
    if let Some(gw) = buf.slot(w) {
        taps(&mut |o, s, kk| {
            for cc in 0..ch {
                gw[kk + cc] += g[o + cc] * xv.data[s + cc];
            }
        });
    }
    if let Some(gx) = buf.slot(x) {
        taps(&mut |o, s, kk| {
            for cc in 0..ch {
                gx[s + cc] += g[o + cc] * wv.data[kk + cc];
            }
        });
    }
}

pub(crate) fn resize_backward<T: Real>(
    x: Var,
    out: &Tensor<T>,
    g: &[T],
    buf: &mut GradBuf<'_, T>,
) {
    let s = buf.value(x).shape.clone();
    let (h, w, ch) = (s[0], s[1], s[2]);
    let (out_h, out_w) = (out.shape[0], out.shape[1]);
    if let Some(gx) = buf.slot(x) {
        let (ty, tx) = (bilinear_taps(h, out_h), bilinear_taps(w, out_w));
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let o = (oy * out_w + ox) * ch;
                let taps = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x1, (1.0 - fy) * fx),
                    (y1, x0, fy * (1.0 - fx)),
                    (y1, x1, fy * fx),
                ];
                for (sy, sx, wt) in taps {
                    let d = (sy * w + sx) * ch;
                    let wt = c::<T>(wt);
                    for k in 0..ch {
                        gx[d + k] += wt * g[o + k];
                    }
                }
            }
        }
    }
}

pub(crate) fn box_filter_backward<T: Real>(
    x: Var,
    radius: usize,
    g: &[T],
    buf: &mut GradBuf<'_, T>,
) {
    let s = buf.value(x).shape.clone();
    let dims = (s[0], s[1], s[2]);
    if let Some(gx) = buf.slot(x) {
        let mut tmp = vec![T::zero(); g.len()];
        box_pass(g, &mut tmp, dims, radius, true, true);
        let mut acc = vec![T::zero(); g.len()];
        box_pass(&tmp, &mut acc, dims, radius, false, true);
        let n = (2 * radius + 1) as f64;
        let inv = c::<T>(1.0 / (n * n));
        gx.iter_mut().zip(&acc).for_each(|(d, &v)| *d += v * inv);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn conv_output_extent() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::zeros(&[64, 64, 8]));
        let w = tape.input(Tensor::zeros(&[72, 64]));
        let y = tape.conv2d(x, w, 3, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[32, 32, 64]);
    }

    #[test]
    fn box_filter_impulse() {
        let mut tape = Tape::<f64>::new();
        let mut img = Tensor::zeros(&[5, 5, 1]);
        img.data_mut()[12] = 1.0;
        let x = tape.input(img);
        let y = tape.box_filter(x, 1).unwrap();
        let v = tape.value(y).data();
        for yy in 0..5 {
            for xx in 0..5 {
                let inside = (1..=3).contains(&yy) && (1..=3).contains(&xx);
                let expect = if inside { 1.0 / 9.0 } else { 0.0 };
                assert!((v[yy * 5 + xx] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn resize_preserves_constants() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::full(&[4, 4, 2], 3.25));
        let y = tape.resize_bilinear(x, 16, 12).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 3.25).abs() < 1e-12));
    }
}
