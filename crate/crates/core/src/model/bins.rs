use serde::{Deserialize, Serialize};

use super::params::{Binding, Init, Linear, ParamId};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BinsConfig {
    pub bins: usize,
    pub depth_range: (f64, f64),
    /// Width of pixel embeddings and bin queries.
    pub embed: usize,
    /// Hidden width of the bin-width MLP.
    pub hidden: usize,
}

impl Default for BinsConfig {
    fn default() -> Self {
        Self {
            bins: 64,
            depth_range: (0.5, 20.0),
            embed: 32,
            hidden: 128,
        }
    }
}

/// Log-spaced centres of `bins` equal-ratio bins over `[lo, hi]`.
pub fn log_spaced_centres(bins: usize, (lo, hi): (f64, f64)) -> Vec<f64> {
    let span = (hi / lo).ln();
    (0..bins)
        .map(|k| (lo.ln() + span * (k as f64 + 0.5) / bins as f64).exp())
        .collect()
}

/// Adaptive-bins head: per-image bin widths from the mean token, and
/// per-pixel bin scores from embeddings dotted with learned bin queries
/// refined by one cross-attention over the tokens.
#[derive(Clone, Debug)]
pub struct BinsHead {
    pub config: BinsConfig,
    pub width_hidden: Linear,
    pub width_out: Linear,
    pub embed: Linear,
    pub queries: ParamId,
    pub cross_q: Linear,
    pub cross_k: Linear,
    pub cross_v: Linear,
}

/// Bin layout `[1, K]` and per-pixel scores `[N, K]`.
#[derive(Clone, Copy, Debug)]
pub struct BinPrediction {
    pub centres: Var,
    /// Widths in metres; they sum to the depth range.
    pub widths: Var,
    pub scores: Var,
}

impl BinsHead {
    pub fn new<T: Real>(init: &mut Init<'_, T>, config: &BinsConfig, channels: usize) -> Result<Self> {
        let (lo, hi) = config.depth_range;
        if config.bins < 2 || !(lo > 0.0 && hi > lo) {
            return Err(Error::Invalid(format!("{} bins over [{lo}, {hi}]", config.bins)));
        }
        let e = config.embed;
        Ok(Self {
            config: config.clone(),
            width_hidden: Linear::new(init, "bins.width_hidden", channels, config.hidden, true)?,
            width_out: Linear::zeroed(init, "bins.width_out", config.hidden, config.bins)?,
            embed: Linear::new(init, "bins.embed", channels, e, true)?,
            queries: init.uniform("bins.queries", &[config.bins, e], 1.0)?,
            cross_q: Linear::new(init, "bins.cross_q", e, e, false)?,
            cross_k: Linear::new(init, "bins.cross_k", channels, e, false)?,
            cross_v: Linear::new(init, "bins.cross_v", channels, e, false)?,
        })
    }

    /// Bin centres and widths from normalised log-space widths `[1, K]`.
    pub fn layout_from_fractions<T: Real>(&self, tape: &mut Tape<T>, fractions: Var) -> Result<(Var, Var)> {
        let k = self.config.bins;
        let (lo, hi) = self.config.depth_range;
        let span = (hi / lo).ln();
        let mut upper = vec![T::zero(); k * k];
        for i in 0..k {
            for j in i..k {
                upper[i * k + j] = T::one();
            }
        }
        let upper = tape.input(Tensor::new(&[k, k], upper)?);
        let cum = tape.matmul(fractions, upper)?;
        let hi_edge = tape.scale(cum, span)?;
        let hi_edge = tape.add_const(hi_edge, lo.ln())?;
        let w = tape.scale(fractions, span)?;
        let lo_edge = tape.sub(hi_edge, w)?;
        let half = tape.scale(w, 0.5)?;
        let mid = tape.sub(hi_edge, half)?;
        let centres = tape.exp(mid)?;
        let e_hi = tape.exp(hi_edge)?;
        let e_lo = tape.exp(lo_edge)?;
        let widths = tape.sub(e_hi, e_lo)?;
        let c = tape.value(centres).data();
        if c.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::Invalid("bin centres are not strictly increasing".into()));
        }
        Ok((centres, widths))
    }

    /// `tokens` is `[N, C]`.
    pub fn predict<T: Real>(&self, tape: &mut Tape<T>, bind: &Binding, tokens: Var) -> Result<BinPrediction> {
        if !tape.value(tokens).is_finite() {
            return Err(Error::NonFinite { op: "predict_bins" });
        }
        let c = tape.shape(tokens)[1];
        let pooled = tape.mean_rows(tokens)?;
        let pooled = tape.reshape(pooled, &[1, c])?;
        let h = self.width_hidden.forward(tape, bind, pooled)?;
        let h = tape.gelu(h)?;
        let logits = self.width_out.forward(tape, bind, h)?;
        let fractions = tape.softmax(logits)?;
        let (centres, widths) = self.layout_from_fractions(tape, fractions)?;

        let e = self.config.embed as f64;
        let pixels = self.embed.forward(tape, bind, tokens)?;
        let queries = bind.var(self.queries);
        let q = self.cross_q.forward(tape, bind, queries)?;
        let k = self.cross_k.forward(tape, bind, tokens)?;
        let v = self.cross_v.forward(tape, bind, tokens)?;
        let a = tape.matmul_nt(q, k)?;
        let a = tape.scale(a, 1.0 / e.sqrt())?;
        let a = tape.softmax(a)?;
        let ctx = tape.matmul(a, v)?;
        let refined = tape.add(queries, ctx)?;
        let scores = tape.matmul_nt(pixels, refined)?;
        let scores = tape.scale(scores, 1.0 / e.sqrt())?;
        Ok(BinPrediction {
            centres,
            widths,
            scores,
        })
    }
}

/// `sum_k softmax(scores)_k * centre_k` per row: `[N, K], [1, K] -> [N, 1]`.
pub fn depth_expectation<T: Real>(tape: &mut Tape<T>, scores: Var, centres: Var) -> Result<Var> {
    let p = tape.softmax(scores)?;
    tape.matmul_nt(p, centres)
}

/// `KL(occupancy || prior)` where occupancy is the pixel-averaged bin
/// probability.
pub fn bin_prior_kl<T: Real>(tape: &mut Tape<T>, scores: Var, prior: &[f64]) -> Result<Var> {
    let k = tape.value(scores).last_dim();
    if prior.len() != k || prior.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::Invalid(format!(
            "prior must have {k} strictly positive entries"
        )));
    }
    let p = tape.softmax(scores)?;
    let occ = tape.mean_rows(p)?;
    kl_divergence(tape, occ, prior)
}

/// `sum p (ln p - ln q)` for a distribution `p` on the tape.
pub fn kl_divergence<T: Real>(tape: &mut Tape<T>, p: Var, q: &[f64]) -> Result<Var> {
    let safe = tape.clamp_min(p, 1e-12)?;
    let lp = tape.log(safe)?;
    let lq: Vec<f64> = q.iter().map(|v| -v.ln()).collect();
    let lq = tape.input(Tensor::from_f64(tape.shape(p), &lq)?);
    let diff = tape.add(lp, lq)?;
    let t = tape.mul(p, diff)?;
    tape.sum(t)
}
