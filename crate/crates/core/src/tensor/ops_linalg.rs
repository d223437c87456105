use super::tape::{GradBuf, Op, Var};
use super::{c, Real, Tensor};
use crate::error::{Error, Result};

/// Logical `(rows, cols)` of a stored 2-D matrix after optional transpose.
fn dims(shape: &[usize], trans: bool) -> (usize, usize) {
    let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if trans {
        (c, r)
    } else {
        (r, c)
    }
}

const NORM_EPS: f64 = 1e-5;
const STANDARDIZE_EPS: f64 = 1e-12;

impl<T: Real> super::Tape<T> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, true)
    }

    /// `op(a) * op(b)` for 2-D operands, `op` an optional transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = dims(sa, ta);
        let (k2, n) = dims(sb, tb);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            ta,
            tb,
            m,
            k,
            n,
            T::one(),
            &self.value(a).data,
            &self.value(b).data,
            T::zero(),
            &mut out,
        );
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, ta, tb })
    }

    /// Batched `op(a[i]) * op(b[i])` over a shared leading axis.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let batch = sa[0];
        let (m, k) = dims(sa, ta);
        let (k2, n) = dims(sb, tb);
        if k != k2 {
            return Err(Error::shape("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        for i in 0..batch {
            T::gemm(
                ta,
                tb,
                m,
                k,
                n,
                T::one(),
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.push(
            Tensor::new(&[batch, m, n], out)?,
            Op::BatchMatMul { a, b, ta, tb },
        )
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", self.shape(a))));
        }
        self.permute(a, &[1, 0])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = x.last_dim();
        let mut out = x.data.clone();
        for row in out.chunks_mut(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            let inv = T::one() / s;
            row.iter_mut().for_each(|v| *v = *v * inv);
        }
        let shape = x.shape.clone();
        self.push(Tensor::new(&shape, out)?, Op::Softmax(a))
    }

    /// Normalises each row (last axis) to zero mean and unit variance.
    /// Affine gain and shift are applied separately.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = x.last_dim();
        let mut out = x.data.clone();
        let mut inv_std = Vec::with_capacity(x.len() / n);
        for row in out.chunks_mut(n) {
            inv_std.push(normalize_in_place(row, c(NORM_EPS)));
        }
        let shape = x.shape.clone();
        self.push(Tensor::new(&shape, out)?, Op::LayerNorm { x: a, inv_std })
    }

    /// Standardises each column of a 2-D matrix to zero mean and unit
    /// (population) variance. Used for weight-standardised kernels stored
    /// as `[fan_in, out_channels]`.
    pub fn standardize_cols(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.shape.len() != 2 || x.shape[0] < 2 {
            return Err(Error::shape("standardize", format!("{:?}", x.shape)));
        }
        let (rows, cols) = (x.shape[0], x.shape[1]);
        let mut colbuf = vec![T::zero(); rows];
        let mut out = x.data.clone();
        let mut inv_std = Vec::with_capacity(cols);
        for j in 0..cols {
            for i in 0..rows {
                colbuf[i] = x.data[i * cols + j];
            }
            inv_std.push(normalize_in_place(&mut colbuf, c(STANDARDIZE_EPS)));
            for i in 0..rows {
                out[i * cols + j] = colbuf[i];
            }
        }
        self.push(Tensor::new(&[rows, cols], out)?, Op::Standardize { x: a, inv_std })
    }
}

fn normalize_in_place<T: Real>(row: &mut [T], eps: T) -> T {
    let n = c::<T>(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv = T::one() / (var + eps).sqrt();
    row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    inv
}

/// `dx = inv * (g - mean(g) - y * mean(g*y))` for one normalised group.
fn normalize_backward<T: Real>(y: &[T], g: &[T], inv: T, dx: &mut [T]) {
    let n = c::<T>(y.len() as f64);
    let mg = g.iter().copied().sum::<T>() / n;
    let mgy = g.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() / n;
    for ((d, &gy), &yy) in dx.iter_mut().zip(g).zip(y) {
        *d += inv * (gy - mg - yy * mgy);
    }
}

pub(crate) fn matmul_backward<T: Real>(
    a: Var,
    b: Var,
    ta: bool,
    tb: bool,
    g: &[T],
    buf: &mut GradBuf<'_, T>,
) {
    let (av, bv) = (buf.value(a), buf.value(b));
    let (m, k) = dims(&av.shape, ta);
    let n = dims(&bv.shape, tb).1;
    grad_pair(&av.data, &bv.data, m, k, n, ta, tb, g, a, b, 0, buf);
}

#[allow(clippy::too_many_arguments)]
fn grad_pair<T: Real>(
    av: &[T],
    bv: &[T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    g: &[T],
    a: Var,
    b: Var,
    batch: usize,
    buf: &mut GradBuf<'_, T>,
) {
    let (sa, sb) = (m * k, k * n);
    if let Some(ga) = buf.slot(a) {
        let ga = &mut ga[batch * sa..(batch + 1) * sa];
        if ta {
            T::gemm(tb, true, k, n, m, T::one(), bv, g, T::one(), ga);
        } else {
            T::gemm(false, !tb, m, n, k, T::one(), g, bv, T::one(), ga);
        }
    }
    if let Some(gb) = buf.slot(b) {
        let gb = &mut gb[batch * sb..(batch + 1) * sb];
        if tb {
            T::gemm(true, ta, n, m, k, T::one(), g, av, T::one(), gb);
        } else {
            T::gemm(!ta, false, k, m, n, T::one(), av, g, T::one(), gb);
        }
    }
}

pub(crate) fn bmm_backward<T: Real>(
    a: Var,
    b: Var,
    ta: bool,
    tb: bool,
    g: &[T],
    buf: &mut GradBuf<'_, T>,
) {
    let (av, bv) = (buf.value(a), buf.value(b));
    let batch = av.shape[0];
    let (m, k) = dims(&av.shape, ta);
    let n = dims(&bv.shape, tb).1;
    for i in 0..batch {
        grad_pair(
            &av.data[i * m * k..(i + 1) * m * k],
            &bv.data[i * k * n..(i + 1) * k * n],
            m,
            k,
            n,
            ta,
            tb,
            &g[i * m * n..(i + 1) * m * n],
            a,
            b,
            i,
            buf,
        );
    }
}

pub(crate) fn softmax_backward<T: Real>(
    a: Var,
    out: &Tensor<T>,
    g: &[T],
    buf: &mut GradBuf<'_, T>,
) {
    let n = out.last_dim();
    if let Some(ga) = buf.slot(a) {
        for ((dx, y), gy) in ga.chunks_mut(n).zip(out.data.chunks(n)).zip(g.chunks(n)) {
            let dot: T = y.iter().zip(gy).map(|(&p, &q)| p * q).sum();
            for ((d, &p), &q) in dx.iter_mut().zip(y).zip(gy) {
                *d += p * (q - dot);
            }
        }
    }
}

pub(crate) fn layer_norm_backward<T: Real>(
    a: Var,
    out: &Tensor<T>,
    inv_std: &[T],
    g: &[T],
    buf: &mut GradBuf<'_, T>,
) {
    let n = out.last_dim();
    if let Some(ga) = buf.slot(a) {
        for (((dx, y), gy), &inv) in ga
            .chunks_mut(n)
            .zip(out.data.chunks(n))
            .zip(g.chunks(n))
            .zip(inv_std)
        {
            normalize_backward(y, gy, inv, dx);
        }
    }
}

pub(crate) fn standardize_backward<T: Real>(
    a: Var,
    out: &Tensor<T>,
    inv_std: &[T],
    g: &[T],
    buf: &mut GradBuf<'_, T>,
) {
    let (rows, cols) = (out.shape[0], out.shape[1]);
    if let Some(ga) = buf.slot(a) {
        let mut y = vec![T::zero(); rows];
        let mut gy = vec![T::zero(); rows];
        let mut dx = vec![T::zero(); rows];
        for (j, &inv) in inv_std.iter().enumerate() {
            for i in 0..rows {
                y[i] = out.data[i * cols + j];
                gy[i] = g[i * cols + j];
            }
            dx.iter_mut().for_each(|d| *d = T::zero());
            normalize_backward(&y, &gy, inv, &mut dx);
            for i in 0..rows {
                ga[i * cols + j] += dx[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::<f64>::new();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let a = Tensor::from_f64(&[3, 2], &[1.0, -2.0, 3.5, 4.0, 0.25, 6.0]).unwrap();
        let i = tape.input(eye);
        let av = tape.input(a.clone());
        let out = tape.matmul(i, av).unwrap();
        assert_eq!(tape.value(out), &a);
    }

    #[test]
    fn uniform_softmax() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(&[1, 3]));
        let y = tape.softmax(x).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_inner_dim_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.input(Tensor::zeros(&[2, 3]));
        let b = tape.input(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
        assert!(tape.matmul_nt(a, b).is_ok());
    }
}
