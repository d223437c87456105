use super::tape::{GradBuf, Op, Var};
use super::{c, Real, Tensor};
use crate::error::{Error, Result};

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Selu,
    Sigmoid,
    Gelu,
    Exp,
    Log,
    Square,
    Abs,
    Recip,
    Sqrt,
}

impl Unary {
    pub(crate) fn name(self) -> &'static str {
        match self {
            Unary::Selu => "selu",
            Unary::Sigmoid => "sigmoid",
            Unary::Gelu => "gelu",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Square => "square",
            Unary::Abs => "abs",
            Unary::Recip => "recip",
            Unary::Sqrt => "sqrt",
        }
    }

    pub fn eval<T: Real>(self, x: T) -> T {
        match self {
            Unary::Selu => {
                if x > T::zero() {
                    c::<T>(SELU_LAMBDA) * x
                } else {
                    c::<T>(SELU_LAMBDA * SELU_ALPHA) * (x.exp() - T::one())
                }
            }
            Unary::Sigmoid => {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            }
            Unary::Gelu => {
                let inner = c::<T>(GELU_K) * (x + c::<T>(GELU_C) * x * x * x);
                c::<T>(0.5) * x * (T::one() + inner.tanh())
            }
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
            Unary::Abs => x.abs(),
            Unary::Recip => T::one() / x,
            Unary::Sqrt => x.sqrt(),
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Unary::Selu => {
                if x > T::zero() {
                    c(SELU_LAMBDA)
                } else {
                    y + c::<T>(SELU_LAMBDA * SELU_ALPHA)
                }
            }
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Gelu => {
                let k = c::<T>(GELU_K);
                let cc = c::<T>(GELU_C);
                let t = (k * (x + cc * x * x * x)).tanh();
                let half = c::<T>(0.5);
                half * (T::one() + t)
                    + half * x * (T::one() - t * t) * k * (T::one() + c::<T>(3.0) * cc * x * x)
            }
            Unary::Exp => y,
            Unary::Log => T::one() / x,
            Unary::Square => c::<T>(2.0) * x,
            Unary::Abs => {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Recip => -y * y,
            Unary::Sqrt => c::<T>(0.5) / y,
        }
    }
}

fn same_shape<T: Real>(tape: &super::Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    Ok(())
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn suffix_len<T: Real>(tape: &super::Tape<T>, op: &'static str, a: Var, b: Var) -> Result<usize> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
        return Err(Error::shape(
            op,
            format!("{sb:?} is not a trailing sub-shape of {sa:?}"),
        ));
    }
    Ok(tape.value(b).len())
}

impl<T: Real> super::Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "div", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    /// `a + b` where `b`'s shape is a trailing sub-shape of `a`'s.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = suffix_len(self, "add_bcast", a, b)?;
        let bv = self.value(b).data.clone();
        let mut v = self.value(a).clone();
        for chunk in v.data.chunks_mut(inner) {
            for (x, &y) in chunk.iter_mut().zip(&bv) {
                *x += y;
            }
        }
        self.push(v, Op::AddBcast(a, b))
    }

    /// `a * b` where `b`'s shape is a trailing sub-shape of `a`'s.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = suffix_len(self, "mul_bcast", a, b)?;
        let bv = self.value(b).data.clone();
        let mut v = self.value(a).clone();
        for chunk in v.data.chunks_mut(inner) {
            for (x, &y) in chunk.iter_mut().zip(&bv) {
                *x = *x * y;
            }
        }
        self.push(v, Op::MulBcast(a, b))
    }

    /// Scales row `r` of `a` (leading axis) by `b[r]`.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let rows = self.shape(a)[0];
        if self.shape(b) != [rows] {
            return Err(Error::shape(
                "mul_col",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let bv = self.value(b).data.clone();
        let mut v = self.value(a).clone();
        let inner = v.len() / rows;
        for (chunk, &s) in v.data.chunks_mut(inner).zip(&bv) {
            for x in chunk {
                *x = *x * s;
            }
        }
        self.push(v, Op::MulCol(a, b))
    }

    /// Multiplies every entry of `a` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar", format!("{:?}", self.shape(s))));
        }
        let k = self.value(s).item();
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::MulScalar(a, s))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let k = c::<T>(s);
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_const(&mut self, a: Var, s: f64) -> Result<Var> {
        let k = c::<T>(s);
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddConst(a))
    }

    pub fn unary(&mut self, a: Var, u: Unary) -> Result<Var> {
        let v = self.value(a).map(|x| u.eval(x));
        self.push(v, Op::Unary(a, u))
    }

    pub fn selu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Selu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Gelu)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Square)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Abs)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Recip)
    }

    /// `max(a, lo)`; gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Result<Var> {
        let lo = c::<T>(lo);
        let v = self.value(a).map(|x| if x < lo { lo } else { x });
        self.push(v, Op::ClampMin(a, lo))
    }

    /// Convex combination `(1 - t) a + t b` with a single-element `t`.
    ///
    /// The result is clamped to the elementwise hull of `a` and `b` so rounding
    /// can never leave it.
    pub fn lerp(&mut self, a: Var, b: Var, t: Var) -> Result<Var> {
        same_shape(self, "lerp", a, b)?;
        if self.value(t).len() != 1 {
            return Err(Error::shape("lerp", format!("gate {:?}", self.shape(t))));
        }
        let tv = self.value(t).item();
        let v = zip_map(self.value(a), self.value(b), |x, y| {
            let z = (T::one() - tv) * x + tv * y;
            let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
            z.max(lo).min(hi)
        });
        self.push(v, Op::Lerp(a, b, t))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data.iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s: T = self.value(a).data.iter().copied().sum();
        self.push(Tensor::scalar(s / c(n as f64)), Op::Mean(a))
    }

    /// Mean over every axis but the last: `[.., C] -> [C]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let cdim = x.last_dim();
        let rows = x.len() / cdim;
        let mut out = vec![T::zero(); cdim];
        for row in x.data.chunks(cdim) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = T::one() / c(rows as f64);
        out.iter_mut().for_each(|o| *o = *o * inv);
        self.push(Tensor::new(&[cdim], out)?, Op::MeanRows(a))
    }

    /// Sum over the last axis: `[.., C] -> [..]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let cdim = x.last_dim();
        let out: Vec<T> = x.data.chunks(cdim).map(|r| r.iter().copied().sum()).collect();
        let mut shape = x.shape[..x.shape.len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        self.push(Tensor::new(&shape, out)?, Op::SumLast(a))
    }
}

pub(crate) fn add_backward<T: Real>(a: Var, b: Var, g: &[T], buf: &mut GradBuf<'_, T>) {
    add_backward_single(a, g, buf);
    add_backward_single(b, g, buf);
}

pub(crate) fn add_backward_single<T: Real>(a: Var, g: &[T], buf: &mut GradBuf<'_, T>) {
    if let Some(ga) = buf.slot(a) {
        ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
    }
}

pub(crate) fn sub_backward<T: Real>(a: Var, b: Var, g: &[T], buf: &mut GradBuf<'_, T>) {
    add_backward_single(a, g, buf);
    if let Some(gb) = buf.slot(b) {
        gb.iter_mut().zip(g).for_each(|(x, &y)| *x += -y);
    }
}

pub(crate) fn mul_backward<T: Real>(a: Var, b: Var, g: &[T], buf: &mut GradBuf<'_, T>) {
    let (av, bv) = (buf.value(a), buf.value(b));
    if let Some(ga) = buf.slot(a) {
        for ((x, &gy), &bb) in ga.iter_mut().zip(g).zip(&bv.data) {
            *x += gy * bb;
        }
    }
    if let Some(gb) = buf.slot(b) {
        for ((x, &gy), &aa) in gb.iter_mut().zip(g).zip(&av.data) {
            *x += gy * aa;
        }
    }
}

pub(crate) fn div_backward<T: Real>(
    a: Var,
    b: Var,
    out: &Tensor<T>,
    g: &[T],
    buf: &mut GradBuf<'_, T>,
) {
    let bv = buf.value(b);
    if let Some(ga) = buf.slot(a) {
        for ((x, &gy), &bb) in ga.iter_mut().zip(g).zip(&bv.data) {
            *x += gy / bb;
        }
    }
    if let Some(gb) = buf.slot(b) {
        for (((x, &gy), &bb), &q) in gb.iter_mut().zip(g).zip(&bv.data).zip(&out.data) {
            *x += -gy * q / bb;
        }
    }
}

pub(crate) fn add_bcast_backward<T: Real>(a: Var, b: Var, g: &[T], buf: &mut GradBuf<'_, T>) {
    add_backward_single(a, g, buf);
    let inner = buf.len_of(b);
    if let Some(gb) = buf.slot(b) {
        for chunk in g.chunks(inner) {
            gb.iter_mut().zip(chunk).for_each(|(x, &y)| *x += y);
        }
    }
}

pub(crate) fn mul_bcast_backward<T: Real>(a: Var, b: Var, g: &[T], buf: &mut GradBuf<'_, T>) {
    let (av, bv) = (buf.value(a), buf.value(b));
    let inner = bv.len();
    if let Some(ga) = buf.slot(a) {
        for (gchunk, achunk) in g.chunks(inner).zip(ga.chunks_mut(inner)) {
            for ((x, &gy), &bb) in achunk.iter_mut().zip(gchunk).zip(&bv.data) {
                *x += gy * bb;
            }
        }
    }
    if let Some(gb) = buf.slot(b) {
        for (gchunk, achunk) in g.chunks(inner).zip(av.data.chunks(inner)) {
            for ((x, &gy), &aa) in gb.iter_mut().zip(gchunk).zip(achunk) {
                *x += gy * aa;
            }
        }
    }
}

pub(crate) fn mul_col_backward<T: Real>(a: Var, b: Var, g: &[T], buf: &mut GradBuf<'_, T>) {
    let (av, bv) = (buf.value(a), buf.value(b));
    let inner = av.len() / bv.len();
    if let Some(ga) = buf.slot(a) {
        for ((gchunk, achunk), &s) in g.chunks(inner).zip(ga.chunks_mut(inner)).zip(&bv.data) {
            achunk.iter_mut().zip(gchunk).for_each(|(x, &gy)| *x += gy * s);
        }
    }
    if let Some(gb) = buf.slot(b) {
        for ((gchunk, achunk), x) in g.chunks(inner).zip(av.data.chunks(inner)).zip(gb.iter_mut()) {
            *x += gchunk.iter().zip(achunk).map(|(&gy, &aa)| gy * aa).sum();
        }
    }
}

pub(crate) fn mul_scalar_backward<T: Real>(a: Var, s: Var, g: &[T], buf: &mut GradBuf<'_, T>) {
    let (av, sv) = (buf.value(a), buf.value(s));
    let k = sv.item();
    if let Some(ga) = buf.slot(a) {
        ga.iter_mut().zip(g).for_each(|(x, &gy)| *x += gy * k);
    }
    if let Some(gs) = buf.slot(s) {
        gs[0] += g.iter().zip(&av.data).map(|(&gy, &aa)| gy * aa).sum();
    }
}

pub(crate) fn scale_backward<T: Real>(a: Var, k: T, g: &[T], buf: &mut GradBuf<'_, T>) {
    if let Some(ga) = buf.slot(a) {
        ga.iter_mut().zip(g).for_each(|(x, &gy)| *x += gy * k);
    }
}

pub(crate) fn unary_backward<T: Real>(
    a: Var,
    u: Unary,
    out: &Tensor<T>,
    g: &[T],
    buf: &mut GradBuf<'_, T>,
) {
    let av = buf.value(a);
    if let Some(ga) = buf.slot(a) {
        for (((x, &gy), &xi), &yi) in ga.iter_mut().zip(g).zip(&av.data).zip(&out.data) {
            *x += gy * u.derivative(xi, yi);
        }
    }
}

pub(crate) fn clamp_min_backward<T: Real>(a: Var, lo: T, g: &[T], buf: &mut GradBuf<'_, T>) {
    let av = buf.value(a);
    if let Some(ga) = buf.slot(a) {
        for ((x, &gy), &xi) in ga.iter_mut().zip(g).zip(&av.data) {
            if xi >= lo {
                *x += gy;
            }
        }
    }
}

pub(crate) fn lerp_backward<T: Real>(a: Var, b: Var, t: Var, g: &[T], buf: &mut GradBuf<'_, T>) {
    let (av, bv) = (buf.value(a), buf.value(b));
    let tv = buf.value(t).item();
    if let Some(ga) = buf.slot(a) {
        ga.iter_mut()
            .zip(g)
            .for_each(|(x, &gy)| *x += gy * (T::one() - tv));
    }
    if let Some(gb) = buf.slot(b) {
        gb.iter_mut().zip(g).for_each(|(x, &gy)| *x += gy * tv);
    }
    if let Some(gt) = buf.slot(t) {
        gt[0] += g
            .iter()
            .zip(av.data.iter().zip(&bv.data))
            .map(|(&gy, (&x, &y))| gy * (y - x))
            .sum();
    }
}

pub(crate) fn sum_backward<T: Real>(a: Var, k: T, g: &[T], buf: &mut GradBuf<'_, T>) {
    let gk = g[0] * k;
    if let Some(ga) = buf.slot(a) {
        ga.iter_mut().for_each(|x| *x += gk);
    }
}

pub(crate) fn mean_rows_backward<T: Real>(a: Var, g: &[T], buf: &mut GradBuf<'_, T>) {
    let cdim = g.len();
    let rows = buf.len_of(a) / cdim;
    let inv = T::one() / c(rows as f64);
    if let Some(ga) = buf.slot(a) {
        for chunk in ga.chunks_mut(cdim) {
            chunk.iter_mut().zip(g).for_each(|(x, &gy)| *x += gy * inv);
        }
    }
}

pub(crate) fn sum_last_backward<T: Real>(a: Var, g: &[T], buf: &mut GradBuf<'_, T>) {
    let cdim = buf.len_of(a) / g.len();
    if let Some(ga) = buf.slot(a) {
        for (chunk, &gy) in ga.chunks_mut(cdim).zip(g) {
            chunk.iter_mut().for_each(|x| *x += gy);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn selu_fixes_origin() {
        assert_eq!(Unary::Selu.eval(0.0f64), 0.0);
    }

    #[test]
    fn square_derivative_at_three() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn mean_gradient_is_one_over_n() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[4, 5]));
        let m = tape.mean(x).unwrap();
        let g = tape.backward(m).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0 / 20.0));
    }

    #[test]
    fn non_finite_output_names_op() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::scalar(0.0));
        match tape.log(x) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "log"),
            other => panic!("expected non-finite error, got {:?}", other.map(|v| v.id())),
        }
    }

    #[test]
    fn lerp_stays_in_hull() {
        let mut tape = Tape::<f32>::new();
        let a = tape.input(Tensor::new(&[3], vec![1.0, 1e-30, -5.0]).unwrap());
        let b = tape.input(Tensor::new(&[3], vec![1e-30, 1.0, 7.0]).unwrap());
        let t = tape.input(Tensor::scalar(0.999_999_9));
        let z = tape.lerp(a, b, t).unwrap();
        for ((&z, &x), &y) in tape
            .value(z)
            .data()
            .iter()
            .zip(tape.value(a).data())
            .zip(tape.value(b).data())
        {
            assert!(z >= x.min(y) && z <= x.max(y));
        }
    }

    #[test]
    fn fan_out_accumulates() {
        // f = x*y + x, df/dx = y + 1
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.param(Tensor::scalar(5.0));
        let xy = tape.mul(x, y).unwrap();
        let f = tape.add(xy, x).unwrap();
        let g = tape.backward(f).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
        assert_eq!(g.get(y).unwrap().item(), 2.0);
    }
}
