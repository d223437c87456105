//! Training objective: scale-invariant log loss, log-gradient matching,
//! structural similarity, a cue-weight penalty and the bin-prior KL.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{EDGE_CHANNEL, INPUT_CHANNELS, LAYOUT_CHANNEL, NORMAL_CHANNELS};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Window radius of the SSIM statistics (7x7).
pub const SSIM_RADIUS: usize = 3;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Gradient-matching weight.
    pub alpha: f64,
    /// SSIM weight.
    pub beta: f64,
    /// Cue-weight penalty.
    pub gamma_w: f64,
    /// Variance weight inside the scale-invariant term.
    pub lambda: f64,
    /// Bin-prior KL weight.
    pub kappa: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.1,
            gamma_w: 0.01,
            lambda: 0.5,
            kappa: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma_w, self.lambda, self.kappa];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Invalid(format!("loss weights must be finite and >= 0: {all:?}")));
        }
        Ok(())
    }
}

/// The five scalar terms of one frame or batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub si: Var,
    pub grad: Var,
    pub ssim: Var,
    pub cue: Var,
    pub kl: Var,
}

/// Plain values of [`LossTerms`], for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub si: f64,
    pub grad: f64,
    pub ssim: f64,
    pub cue: f64,
    pub kl: f64,
}

impl LossValues {
    pub fn read<T: Real>(tape: &Tape<T>, terms: &LossTerms, total: Var) -> Self {
        let v = |x: Var| tape.value(x).item().as_f64();
        Self {
            total: v(total),
            si: v(terms.si),
            grad: v(terms.grad),
            ssim: v(terms.ssim),
            cue: v(terms.cue),
            kl: v(terms.kl),
        }
    }
}

fn check_depths<T: Real>(tape: &Tape<T>, pred: Var, gt: &Tensor<T>, op: &'static str) -> Result<()> {
    if tape.shape(pred) != gt.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", tape.shape(pred), gt.shape())));
    }
    let positive = |d: &[T]| d.iter().all(|&v| v > T::zero());
    if !positive(tape.value(pred).data()) || !positive(gt.data()) {
        return Err(Error::Invalid(format!("{op} needs strictly positive depths")));
    }
    Ok(())
}

/// `log pred - log gt` on the tape.
fn log_residual<T: Real>(tape: &mut Tape<T>, pred: Var, gt: &Tensor<T>) -> Result<Var> {
    let lp = tape.log(pred)?;
    let lg = tape.input(gt.map(|v| -v.ln()));
    tape.add(lp, lg)
}

/// Scale-invariant log loss `mean(d^2) - lambda * mean(d)^2` with
/// `d = log pred - log gt`, over the pixels where `mask` is set.
pub fn si_loss<T: Real>(tape: &mut Tape<T>, pred: Var, gt: &Tensor<T>, lambda: f64, mask: Option<&[bool]>) -> Result<Var> {
    check_depths(tape, pred, gt, "si_loss")?;
    let n = gt.len();
    let mut d = log_residual(tape, pred, gt)?;
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::shape("si_loss", format!("mask of {} for {n} pixels", m.len())));
        }
        let keep: Vec<u32> = (0..n as u32).filter(|&i| m[i as usize]).collect();
        if keep.is_empty() {
            return Err(Error::Invalid("si_loss mask selects no pixels".into()));
        }
        let flat = tape.reshape(d, &[n, 1])?;
        d = tape.gather_rows(flat, Arc::from(keep))?;
    }
    let sq = tape.square(d)?;
    let msq = tape.mean(sq)?;
    let m = tape.mean(d)?;
    let m2 = tape.square(m)?;
    let m2 = tape.scale(m2, lambda)?;
    tape.sub(msq, m2)
}

/// Mean absolute difference of forward differences of log depth, pooled
/// over the horizontal and vertical directions.
pub fn grad_loss<T: Real>(tape: &mut Tape<T>, pred: Var, gt: &Tensor<T>) -> Result<Var> {
    check_depths(tape, pred, gt, "grad_loss")?;
    let s = gt.shape().to_vec();
    if s.len() != 3 || s[2] != 1 {
        return Err(Error::shape("grad_loss", format!("{s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let d = log_residual(tape, pred, gt)?;
    let rows = tape.reshape(d, &[h, w])?;
    let cols = tape.transpose(rows)?;
    let mut total = None;
    let mut count = 0;
    for (x, len) in [(rows, w), (cols, h)] {
        if len < 2 {
            continue;
        }
        let a = tape.slice_last(x, 0, len - 1)?;
        let b = tape.slice_last(x, 1, len - 1)?;
        let diff = tape.sub(b, a)?;
        let diff = tape.abs(diff)?;
        let part = tape.sum(diff)?;
        count += tape.value(diff).len();
        total = Some(match total {
            Some(t) => tape.add(t, part)?,
            None => part,
        });
    }
    match total {
        Some(t) => tape.scale(t, 1.0 / count as f64),
        None => Ok(tape.input(Tensor::scalar(T::zero()))),
    }
}

/// `mean((1 - SSIM) / 2)` on depths mapped to `[0, 1]` by `range`.
pub fn ssim_loss<T: Real>(tape: &mut Tape<T>, pred: Var, gt: &Tensor<T>, range: (f64, f64)) -> Result<Var> {
    if tape.shape(pred) != gt.shape() || gt.shape().len() != 3 {
        return Err(Error::shape("ssim_loss", format!("{:?} vs {:?}", tape.shape(pred), gt.shape())));
    }
    let (lo, hi) = range;
    if !(hi > lo) {
        return Err(Error::Invalid(format!("ssim range [{lo}, {hi}]")));
    }
    let inv = 1.0 / (hi - lo);
    let x = tape.add_const(pred, -lo)?;
    let x = tape.scale(x, inv)?;
    let y = tape.input(gt.map(|v| (v - T::from_f64(lo)) * T::from_f64(inv)));
    let r = SSIM_RADIUS;
    let mx = tape.box_filter(x, r)?;
    let my = tape.box_filter(y, r)?;
    let xx = tape.square(x)?;
    let yy = tape.square(y)?;
    let xy = tape.mul(x, y)?;
    let sxx = tape.box_filter(xx, r)?;
    let syy = tape.box_filter(yy, r)?;
    let sxy = tape.box_filter(xy, r)?;
    let mx2 = tape.square(mx)?;
    let my2 = tape.square(my)?;
    let mxy = tape.mul(mx, my)?;
    let vx = tape.sub(sxx, mx2)?;
    let vy = tape.sub(syy, my2)?;
    let cov = tape.sub(sxy, mxy)?;

    let l_num = tape.scale(mxy, 2.0)?;
    let l_num = tape.add_const(l_num, SSIM_C1)?;
    let c_num = tape.scale(cov, 2.0)?;
    let c_num = tape.add_const(c_num, SSIM_C2)?;
    let num = tape.mul(l_num, c_num)?;
    let l_den = tape.add(mx2, my2)?;
    let l_den = tape.add_const(l_den, SSIM_C1)?;
    let c_den = tape.add(vx, vy)?;
    let c_den = tape.add_const(c_den, SSIM_C2)?;
    let den = tape.mul(l_den, c_den)?;
    let ssim = tape.div(num, den)?;
    let m = tape.mean(ssim)?;
    let m = tape.scale(m, -0.5)?;
    tape.add_const(m, 0.5)
}

/// Rows of the first-layer kernel (`[9 * 8, hidden]`, rows ordered
/// `(ky, kx, channel)`) that read the given input channels.
pub fn cue_rows(channels: std::ops::Range<usize>) -> Vec<u32> {
    (0..9)
        .flat_map(|pos| channels.clone().map(move |c| (pos * INPUT_CHANNELS + c) as u32))
        .collect()
}

/// Channel ranges of the edge, normal and perspective cues.
pub fn cue_channels() -> [std::ops::Range<usize>; 3] {
    [EDGE_CHANNEL..EDGE_CHANNEL + 1, NORMAL_CHANNELS, LAYOUT_CHANNEL..LAYOUT_CHANNEL + 1]
}

/// `sum_C |w_C|^2 / exp(sigma_C)` where `w_C` are the first-layer kernel
/// rows reading cue `C` and `sigma_C` its mean log-variance.
pub fn cue_loss<T: Real>(tape: &mut Tape<T>, kernel: Var, sigma_bar: [f64; 3]) -> Result<Var> {
    let s = tape.shape(kernel).to_vec();
    if s.len() != 2 || s[0] != 9 * INPUT_CHANNELS {
        return Err(Error::shape("cue_loss", format!("kernel {s:?}")));
    }
    if sigma_bar.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "cue_loss" });
    }
    let mut total = None;
    for (range, sigma) in cue_channels().into_iter().zip(sigma_bar) {
        let w = tape.gather_rows(kernel, Arc::from(cue_rows(range)))?;
        let sq = tape.square(w)?;
        let part = tape.sum(sq)?;
        let part = tape.scale(part, (-sigma).exp())?;
        total = Some(match total {
            Some(t) => tape.add(t, part)?,
            None => part,
        });
    }
    Ok(total.expect("three cues"))
}

/// `si + alpha grad + beta ssim + gamma_w cue + kappa kl`.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, terms: &LossTerms, weights: &LossWeights) -> Result<Var> {
    weights.validate()?;
    let parts = [
        (terms.si, 1.0, "si"),
        (terms.grad, weights.alpha, "grad"),
        (terms.ssim, weights.beta, "ssim"),
        (terms.cue, weights.gamma_w, "cue"),
        (terms.kl, weights.kappa, "kl"),
    ];
    let mut total = None;
    for (v, w, name) in parts {
        if !tape.value(v).is_finite() {
            return Err(Error::Invalid(format!("loss term {name} is not finite")));
        }
        let scaled = tape.scale(v, w)?;
        total = Some(match total {
            Some(t) => tape.add(t, scaled)?,
            None => scaled,
        });
    }
    Ok(total.expect("five terms"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradient_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn depth(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[h, w, 1], (0..h * w).map(|_| rng.random_range(0.5..20.0)).collect()).unwrap()
    }

    fn eval(f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>, x: &Tensor<f64>) -> f64 {
        let mut tape = Tape::new();
        let v = tape.input(x.clone());
        let y = f(&mut tape, v).unwrap();
        tape.value(y).item()
    }

    #[test]
    fn si_examples() {
        let gt = depth(6, 5, 1);
        assert_eq!(eval(|t, p| si_loss(t, p, &gt, 0.5, None), &gt), 0.0);
        let twice = gt.map(|v| 2.0 * v);
        assert!(eval(|t, p| si_loss(t, p, &gt, 1.0, None), &twice).abs() < 1e-15);
        let one = Tensor::new(&[1, 1, 1], vec![1.0]).unwrap();
        let pred = Tensor::new(&[1, 1, 1], vec![0.1f64.exp()]).unwrap();
        let v = eval(|t, p| si_loss(t, p, &one, 0.5, None), &pred);
        assert!((v - 0.005).abs() < 1e-15);
    }

    #[test]
    fn si_mask_and_errors() {
        let gt = depth(2, 2, 2);
        let mut pred = gt.clone();
        pred.data_mut()[3] *= 3.0;
        let mask = [true, true, true, false];
        assert_eq!(eval(|t, p| si_loss(t, p, &gt, 0.5, Some(&mask)), &pred), 0.0);
        let mut tape = Tape::new();
        let bad = tape.input(Tensor::full(&[2, 2, 1], -1.0));
        assert!(si_loss(&mut tape, bad, &gt, 0.5, None).is_err());
        let p = tape.input(pred);
        assert!(si_loss(&mut tape, p, &gt, 0.5, Some(&[false; 4])).is_err());
    }

    #[test]
    fn grad_examples() {
        let gt = depth(5, 7, 3);
        assert_eq!(eval(|t, p| grad_loss(t, p, &gt), &gt), 0.0);
        // a constant factor is a constant log offset
        let scaled = gt.map(|v| 3.0 * v);
        assert!(eval(|t, p| grad_loss(t, p, &gt), &scaled).abs() < 1e-12);
        let ones = Tensor::full(&[2, 1, 1], 1.0);
        let pred = Tensor::new(&[2, 1, 1], vec![1.0, 1f64.exp()]).unwrap();
        assert!((eval(|t, p| grad_loss(t, p, &ones), &pred) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ssim_examples() {
        let gt = depth(16, 16, 4);
        let range = (0.5, 20.0);
        assert!(eval(|t, p| ssim_loss(t, p, &gt, range), &gt).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut binary = |_| if rng.random_bool(0.5) { 20.0 } else { 0.5 };
        let a = Tensor::new(&[48, 48, 1], (0..48 * 48).map(&mut binary).collect()).unwrap();
        let b = Tensor::new(&[48, 48, 1], (0..48 * 48).map(&mut binary).collect()).unwrap();
        let v = eval(|t, p| ssim_loss(t, p, &b, range), &a);
        assert!((v - 0.5).abs() < 0.03, "{v}");

        let pred = depth(16, 16, 5);
        let base = eval(|t, p| ssim_loss(t, p, &gt, range), &pred);
        let (gt3, pred3) = (gt.map(|v| 3.0 * v), pred.map(|v| 3.0 * v));
        let scaled = eval(|t, p| ssim_loss(t, p, &gt3, (1.5, 60.0)), &pred3);
        assert!((base - scaled).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn cue_examples() {
        let zero = Tensor::<f64>::zeros(&[72, 4]);
        assert_eq!(eval(|t, k| cue_loss(t, k, [0.0; 3]), &zero), 0.0);
        let mut unit = zero.clone();
        // edge-channel weights at two kernel taps: 0.6^2 + 0.8^2 = 1
        unit.data_mut()[EDGE_CHANNEL * 4] = 0.6;
        unit.data_mut()[(4 * INPUT_CHANNELS + EDGE_CHANNEL) * 4 + 2] = 0.8;
        // RGB rows are not penalised
        unit.data_mut()[0] = 5.0;
        assert!((eval(|t, k| cue_loss(t, k, [0.0, 3.0, -1.0]), &unit) - 1.0).abs() < 1e-15);
        let damped = eval(|t, k| cue_loss(t, k, [50.0, 0.0, 0.0]), &unit);
        assert!(damped < 1e-20);
    }

    #[test]
    fn cue_rows_cover_each_tap() {
        assert_eq!(cue_rows(3..4), vec![3, 11, 19, 27, 35, 43, 51, 59, 67]);
        assert_eq!(cue_rows(NORMAL_CHANNELS).len(), 27);
    }

    #[test]
    fn total_examples() {
        let mut tape = Tape::<f64>::new();
        let vals: Vec<Var> = [0.1, 0.2, 0.3, 0.4, 0.5].iter().map(|&v| tape.input(Tensor::scalar(v))).collect();
        let terms = LossTerms {
            si: vals[0],
            grad: vals[1],
            ssim: vals[2],
            cue: vals[3],
            kl: vals[4],
        };
        let ones = LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma_w: 1.0,
            lambda: 0.5,
            kappa: 1.0,
        };
        let t = total_loss(&mut tape, &terms, &ones).unwrap();
        assert!((tape.value(t).item() - 1.5).abs() < 1e-15);
        let only_si = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma_w: 0.0,
            kappa: 0.0,
            ..ones
        };
        let t = total_loss(&mut tape, &terms, &only_si).unwrap();
        assert_eq!(tape.value(t).item(), 0.1);
        assert!(total_loss(&mut tape, &terms, &LossWeights { alpha: -1.0, ..ones }).is_err());
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.alpha, w.beta, w.gamma_w, w.lambda, w.kappa), (0.5, 0.1, 0.01, 0.5, 0.1));
    }

    #[test]
    fn terms_pass_gradient_checks() {
        let gt = depth(6, 6, 7);
        let pred = depth(6, 6, 8);
        let checks: Vec<(&str, f64)> = vec![
            ("si", gradient_check(|t, p| si_loss(t, p, &gt, 0.5, None), &pred, 1e-6).unwrap()),
            ("grad", gradient_check(|t, p| grad_loss(t, p, &gt), &pred, 1e-6).unwrap()),
            ("ssim", gradient_check(|t, p| ssim_loss(t, p, &gt, (0.5, 20.0)), &pred, 1e-6).unwrap()),
        ];
        for (name, err) in checks {
            assert!(err < 1e-5, "{name}: {err}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = Tensor::new(&[72, 3], (0..216).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        assert!(gradient_check(|t, k| cue_loss(t, k, [0.3, -0.2, 1.0]), &k, 1e-6).unwrap() < 1e-5);
    }
}
