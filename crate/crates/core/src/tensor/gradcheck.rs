use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|analytic - numeric| / max(1, |numeric|)`
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn eval<F>(f: &F, point: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.input(point.clone());
    let y = f(&mut tape, x)?;
    scalar_of(&tape, y)
}

fn scalar_of(tape: &Tape<f64>, y: Var) -> Result<f64> {
    let v = tape.value(y);
    if v.len() != 1 {
        return Err(Error::shape(
            "gradient_check",
            format!("function must be scalar-valued, got {:?}", v.shape()),
        ));
    }
    Ok(v.item())
}

/// Checks every coordinate of `point`. Returns the maximum relative error.
pub fn gradient_check<F>(f: F, point: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    Ok(gradient_check_sampled(f, point, step, &coords)?.max_relative_error)
}

/// Checks only the listed coordinates of `point`.
pub fn gradient_check_sampled<F>(
    f: F,
    point: &Tensor<f64>,
    step: f64,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step {step}")));
    }
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    scalar_of(&tape, y)?;
    let grads = tape.backward(y)?;
    let analytic = grads.get_or_zeros(x, point.shape());

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = point.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::NonFinite {
                op: "gradient_check",
            });
        }
        let err = (a - numeric).abs() / numeric.abs().max(1.0);
        if err > report.max_relative_error || report.checked == 0 {
            report.max_relative_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}
