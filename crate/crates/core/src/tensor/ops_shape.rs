use std::sync::Arc;

use super::tape::{GradBuf, Op, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Marks a gathered row that reads as zeros (padding).
pub const PAD_ROW: u32 = u32::MAX;

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Visits contiguous runs of a permutation: `f(out_offset, in_offset, len)`.
/// The run is the last axis when it stays in place, else a single element.
fn permute_runs(shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let nd = shape.len();
    let n: usize = shape.iter().product();
    if n == 0 {
        return;
    }
    let in_strides = row_major_strides(shape);
    let run = if axes[nd - 1] == nd - 1 { shape[nd - 1] } else { 1 };
    let outer = if run > 1 { nd - 1 } else { nd };
    let out_shape: Vec<usize> = axes[..outer].iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes[..outer].iter().map(|&a| in_strides[a]).collect();
    let mut idx = vec![0usize; outer];
    let mut src = 0usize;
    let mut out = 0usize;
    while out < n {
        f(out, src, run);
        out += run;
        for d in (0..outer).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

impl<T: Real> super::Tape<T> {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push(v, Op::Reshape(a))
    }

    /// General axis permutation.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::shape("permute", format!("{shape:?} by {axes:?}")));
        }
        let x = &self.value(a).data;
        let mut data = vec![T::zero(); x.len()];
        permute_runs(&shape, axes, |o, i, len| data[o..o + len].copy_from_slice(&x[i..i + len]));
        let out_shape: Vec<usize> = axes.iter().map(|&d| shape[d]).collect();
        self.push(
            Tensor::new(&out_shape, data)?,
            Op::Permute {
                x: a,
                axes: axes.to_vec(),
            },
        )
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?}")));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        self.push(Tensor::new(&shape, data)?, Op::Concat(parts.to_vec()))
    }

    /// `len` entries of the last axis starting at `start`.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let w = shape[shape.len() - 1];
        if len == 0 || start + len > w {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) of width {w}", start + len),
            ));
        }
        let x = &self.value(a).data;
        let data: Vec<T> = x
            .chunks(w)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut out = shape.clone();
        *out.last_mut().unwrap() = len;
        self.push(Tensor::new(&out, data)?, Op::Slice { x: a, start })
    }

    /// Row gather over the last axis: output row `i` is input row
    /// `index[i]`, or zeros for [`PAD_ROW`]. Output shape `[index.len(), C]`.
    pub fn gather_rows(&mut self, a: Var, index: Arc<[u32]>) -> Result<Var> {
        let x = self.value(a);
        let cdim = x.last_dim();
        let rows = x.len() / cdim;
        let mut data = Vec::with_capacity(index.len() * cdim);
        for &i in index.iter() {
            if i == PAD_ROW {
                data.extend(std::iter::repeat_n(T::zero(), cdim));
            } else if (i as usize) < rows {
                let i = i as usize;
                data.extend_from_slice(&x.data[i * cdim..(i + 1) * cdim]);
            } else {
                return Err(Error::shape("gather", format!("row {i} of {rows}")));
            }
        }
        let n = index.len();
        self.push(Tensor::new(&[n, cdim], data)?, Op::Gather { x: a, index })
    }
}

pub(crate) fn permute_backward<T: Real>(a: Var, axes: &[usize], g: &[T], buf: &mut GradBuf<'_, T>) {
    let shape = buf.value(a).shape.clone();
    if let Some(ga) = buf.slot(a) {
        permute_runs(&shape, axes, |o, i, len| {
            ga[i..i + len].iter_mut().zip(&g[o..o + len]).for_each(|(x, &y)| *x += y);
        });
    }
}

pub(crate) fn concat_backward<T: Real>(
    parts: &[Var],
    out: &Tensor<T>,
    g: &[T],
    buf: &mut GradBuf<'_, T>,
) {
    let total = out.last_dim();
    let rows = out.len() / total;
    let mut offset = 0;
    for &p in parts {
        let w = buf.value(p).last_dim();
        if let Some(gp) = buf.slot(p) {
            for r in 0..rows {
                let src = &g[r * total + offset..r * total + offset + w];
                gp[r * w..(r + 1) * w]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(x, &y)| *x += y);
            }
        }
        offset += w;
    }
}

pub(crate) fn slice_backward<T: Real>(
    a: Var,
    start: usize,
    out: &Tensor<T>,
    g: &[T],
    buf: &mut GradBuf<'_, T>,
) {
    let w = buf.value(a).last_dim();
    let len = out.last_dim();
    if let Some(ga) = buf.slot(a) {
        for (row, grow) in ga.chunks_mut(w).zip(g.chunks(len)) {
            row[start..start + len]
                .iter_mut()
                .zip(grow)
                .for_each(|(x, &y)| *x += y);
        }
    }
}

pub(crate) fn gather_backward<T: Real>(a: Var, index: &[u32], g: &[T], buf: &mut GradBuf<'_, T>) {
    let cdim = buf.value(a).last_dim();
    if let Some(ga) = buf.slot(a) {
        for (o, &i) in index.iter().enumerate() {
            if i == PAD_ROW {
                continue;
            }
            let i = i as usize;
            ga[i * cdim..(i + 1) * cdim]
                .iter_mut()
                .zip(&g[o * cdim..(o + 1) * cdim])
                .for_each(|(x, &y)| *x += y);
        }
    }
}
