use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::assemble_input;
use crate::scene::{CueSet, Sample};
use crate::tensor::{Real, Tensor};

/// Everything the model reads for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameInput<T> {
    /// Gated `[H, W, 8]` input stack.
    pub x0: Tensor<T>,
    /// Mean log-variance of the edge, normal and perspective cues.
    pub sigma_bar: [f64; 3],
    /// Raw edge cue `[H, W, 1]` used as filter guidance.
    pub guidance: Tensor<T>,
    /// `exp(-log_variance)` of the edge cue, for weighted filtering.
    pub guidance_weight: Option<Tensor<T>>,
}

/// Input-side perturbations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputOptions {
    /// When false, every log-variance map is replaced by zeros before gating.
    pub gating: bool,
    /// Fraction of edge-cue pixels zeroed, with their log-variance raised
    /// to `edge_mask_log_variance`.
    pub edge_mask: f64,
    pub edge_mask_log_variance: f64,
    /// Standard deviation of Gaussian noise added to RGB.
    pub rgb_noise: f64,
}

impl Default for InputOptions {
    fn default() -> Self {
        Self {
            gating: true,
            edge_mask: 0.0,
            edge_mask_log_variance: 10.0,
            rgb_noise: 0.0,
        }
    }
}

impl InputOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.edge_mask) || !(self.rgb_noise >= 0.0) {
            return Err(Error::Invalid(format!(
                "edge mask {} must be in [0, 1] and rgb noise {} non-negative",
                self.edge_mask, self.rgb_noise
            )));
        }
        Ok(())
    }
}

/// Applies `options` to a sample's cues and RGB and assembles the input.
/// `seed` drives the edge mask and RGB noise.
pub fn prepare_frame<T: Real>(sample: &Sample, options: &InputOptions, seed: u64) -> Result<FrameInput<T>> {
    options.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cues: CueSet = sample.cues.clone();
    if options.edge_mask > 0.0 {
        let lv = options.edge_mask_log_variance as f32;
        let n = cues.edge.cue.len();
        let picked = rand::seq::index::sample(&mut rng, n, (options.edge_mask * n as f64).round() as usize);
        for i in picked {
            cues.edge.cue.data_mut()[i] = 0.0;
            cues.edge.log_variance.data_mut()[i] = lv;
        }
    }
    if !options.gating {
        for obs in [&mut cues.edge, &mut cues.normal, &mut cues.layout] {
            obs.log_variance.data_mut().fill(0.0);
        }
    }
    let mut rgb: Tensor<T> = sample.frame.rgb.cast();
    if options.rgb_noise > 0.0 {
        let normal = Normal::new(0.0, options.rgb_noise).map_err(|e| Error::Invalid(e.to_string()))?;
        for v in rgb.data_mut() {
            *v += T::from_f64(normal.sample(&mut rng));
        }
    }
    let stack = assemble_input(&rgb, &cues)?;
    let weight = cues.edge.log_variance.map(|s| (-s).exp());
    Ok(FrameInput {
        x0: stack.x0,
        sigma_bar: stack.sigma_bar,
        guidance: cues.edge.cue.cast(),
        guidance_weight: Some(weight.cast()),
    })
}

/// A copy of `sample` whose RGB is all zeros.
pub fn blank_sample(sample: &Sample) -> Sample {
    let mut s = sample.clone();
    s.frame.rgb.data_mut().fill(0.0);
    s
}
