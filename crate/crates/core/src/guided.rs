//! Edge-guided upsampling of the low-resolution depth map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterOrder {
    /// Bilinear upsampling to full resolution, then filtering.
    #[default]
    UpsampleThenFilter,
    /// Coefficients solved at low resolution against downsampled guidance,
    /// then upsampled and applied to full-resolution guidance.
    FilterThenUpsample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub radius: usize,
    pub epsilon: f64,
    pub order: FilterOrder,
    /// Weight window statistics by `exp(-log_variance)` of the guidance.
    pub uncertainty_weights: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            radius: 4,
            epsilon: 1e-3,
            order: FilterOrder::UpsampleThenFilter,
            uncertainty_weights: false,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radius == 0 || !(self.epsilon > 0.0) {
            return Err(Error::Invalid(format!(
                "guided filter needs radius >= 1 and epsilon > 0, got {} / {}",
                self.radius, self.epsilon
            )));
        }
        Ok(())
    }
}

/// Window-mean operator, optionally weighted.
struct Means {
    radius: usize,
    weights: Option<(Var, Var)>,
}

impl Means {
    fn new<T: Real>(tape: &mut Tape<T>, radius: usize, weights: Option<Var>) -> Result<Self> {
        let weights = match weights {
            Some(w) => {
                let norm = tape.box_filter(w, radius)?;
                Some((w, tape.recip(norm)?))
            }
            None => None,
        };
        Ok(Self { radius, weights })
    }

    fn mean<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self.weights {
            Some((w, inv)) => {
                let wx = tape.mul(w, x)?;
                let m = tape.box_filter(wx, self.radius)?;
                tape.mul(m, inv)
            }
            None => tape.box_filter(x, self.radius),
        }
    }
}

/// Per-pixel linear coefficients `(a, b)` of the local model `D ~ a G + b`.
fn coefficients<T: Real>(tape: &mut Tape<T>, d: Var, g: Var, eps: f64, means: &Means) -> Result<(Var, Var)> {
    let mg = means.mean(tape, g)?;
    let md = means.mean(tape, d)?;
    let gd = tape.mul(g, d)?;
    let mgd = means.mean(tape, gd)?;
    let gg = tape.square(g)?;
    let mgg = means.mean(tape, gg)?;
    let mg_md = tape.mul(mg, md)?;
    let cov = tape.sub(mgd, mg_md)?;
    let mg2 = tape.square(mg)?;
    let var = tape.sub(mgg, mg2)?;
    let denom = tape.add_const(var, eps)?;
    let a = tape.div(cov, denom)?;
    let amg = tape.mul(a, mg)?;
    let b = tape.sub(md, amg)?;
    Ok((a, b))
}

fn check_pair<T: Real>(tape: &Tape<T>, d: Var, g: Var) -> Result<()> {
    let (ds, gs) = (tape.shape(d), tape.shape(g));
    if ds != gs || ds.len() != 3 || ds[2] != 1 {
        return Err(Error::shape("guided_filter", format!("{ds:?} vs {gs:?}")));
    }
    Ok(())
}

/// Guided filter of `d` by `g` (both `[H, W, 1]`): window ridge
/// regression, box-averaged coefficients, `box(a) G + box(b)`.
pub fn guided_filter<T: Real>(tape: &mut Tape<T>, d: Var, g: Var, config: &FilterConfig, weights: Option<Var>) -> Result<Var> {
    config.validate()?;
    check_pair(tape, d, g)?;
    let means = Means::new(tape, config.radius, weights)?;
    let (a, b) = coefficients(tape, d, g, config.epsilon, &means)?;
    let ma = tape.box_filter(a, config.radius)?;
    let mb = tape.box_filter(b, config.radius)?;
    let ag = tape.mul(ma, g)?;
    tape.add(ag, mb)
}

/// Upsamples `d_low` `[h, w, 1]` to the guidance resolution `[H, W, 1]`.
pub fn guided_filter_upsample<T: Real>(
    tape: &mut Tape<T>,
    d_low: Var,
    guidance: Var,
    config: &FilterConfig,
    weights: Option<Var>,
) -> Result<Var> {
    let gs = tape.shape(guidance).to_vec();
    if gs.len() != 3 || gs[2] != 1 {
        return Err(Error::shape("guided_filter", format!("guidance {gs:?}")));
    }
    let (h, w) = (gs[0], gs[1]);
    match config.order {
        FilterOrder::UpsampleThenFilter => {
            let up = tape.resize_bilinear(d_low, h, w)?;
            guided_filter(tape, up, guidance, config, weights)
        }
        FilterOrder::FilterThenUpsample => {
            config.validate()?;
            let ls = tape.shape(d_low).to_vec();
            let g_low = tape.resize_bilinear(guidance, ls[0], ls[1])?;
            let w_low = match weights {
                Some(wv) => Some(tape.resize_bilinear(wv, ls[0], ls[1])?),
                None => None,
            };
            let means = Means::new(tape, config.radius, w_low)?;
            let (a, b) = coefficients(tape, d_low, g_low, config.epsilon, &means)?;
            let ma = tape.box_filter(a, config.radius)?;
            let mb = tape.box_filter(b, config.radius)?;
            let ua = tape.resize_bilinear(ma, h, w)?;
            let ub = tape.resize_bilinear(mb, h, w)?;
            let ag = tape.mul(ua, guidance)?;
            tape.add(ag, ub)
        }
    }
}
