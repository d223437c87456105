use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::RenderedFrame;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Added to the noise variance before taking its log.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Spatial layout of a cue's noise standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseField {
    Constant { scale: f64 },
    /// `left` on columns `x < W/2`, `right` elsewhere.
    HalfSplit { left: f64, right: f64 },
    /// `base` everywhere plus `count` Gaussian bumps rising to `peak`,
    /// with centres drawn from the cue seed.
    Blobs {
        base: f64,
        peak: f64,
        count: usize,
        /// Bump radius as a fraction of the image width.
        radius: f64,
    },
}

impl NoiseField {
    fn validate(&self, cue: &str) -> Result<()> {
        let scales: Vec<f64> = match *self {
            NoiseField::Constant { scale } => vec![scale],
            NoiseField::HalfSplit { left, right } => vec![left, right],
            NoiseField::Blobs { base, peak, radius, .. } => vec![base, peak, radius],
        };
        if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Invalid(format!(
                "{cue} noise scale must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }

    /// Per-pixel standard deviation, row-major `[H, W]`.
    pub fn scales(&self, height: usize, width: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match *self {
            NoiseField::Constant { scale } => vec![scale; height * width],
            NoiseField::HalfSplit { left, right } => (0..height * width)
                .map(|i| if i % width < width / 2 { left } else { right })
                .collect(),
            NoiseField::Blobs {
                base,
                peak,
                count,
                radius,
            } => {
                let centres: Vec<(f64, f64)> = (0..count)
                    .map(|_| {
                        (
                            rng.random_range(0.0..height as f64),
                            rng.random_range(0.0..width as f64),
                        )
                    })
                    .collect();
                let r2 = (radius * width as f64).powi(2).max(1e-12);
                (0..height * width)
                    .map(|i| {
                        let (y, x) = ((i / width) as f64 + 0.5, (i % width) as f64 + 0.5);
                        let bump = centres
                            .iter()
                            .map(|&(cy, cx)| (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * r2)).exp())
                            .fold(0.0, f64::max);
                        base + (peak - base) * bump
                    })
                    .collect()
            }
        }
    }
}

/// Which oracle feeds the perspective slot of the cue stack.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerspectiveCue {
    #[default]
    Layout,
    /// Defocus blur magnitude `|1/d - 1/d_focus|` from true depth.
    Defocus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub edge: NoiseField,
    pub normal: NoiseField,
    pub layout: NoiseField,
    pub perspective: PerspectiveCue,
    /// Focus distance of the defocus oracle, metres.
    pub focus_distance: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        let blobs = NoiseField::Blobs {
            base: 0.25,
            peak: 1.5,
            count: 3,
            radius: 0.15,
        };
        Self {
            edge: blobs.clone(),
            normal: blobs.clone(),
            layout: blobs,
            perspective: PerspectiveCue::Layout,
            focus_distance: 4.0,
        }
    }
}

impl NoiseConfig {
    /// Same field for every cue.
    pub fn uniform(field: NoiseField) -> Self {
        Self {
            edge: field.clone(),
            normal: field.clone(),
            layout: field,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.edge.validate("edge")?;
        self.normal.validate("normal")?;
        self.layout.validate("layout")?;
        if !(self.focus_distance > 0.0) {
            return Err(Error::Invalid("focus distance must be positive".into()));
        }
        Ok(())
    }
}

/// A cue map `[H, W, C]` and its log-variance `[H, W, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CueObservation {
    pub cue: Tensor<f32>,
    pub log_variance: Tensor<f32>,
}

/// Edge (1 channel), normal (3) and perspective (1) observations.
#[derive(Clone, Debug, PartialEq)]
pub struct CueSet {
    pub edge: CueObservation,
    pub normal: CueObservation,
    pub layout: CueObservation,
}

fn observe(truth: &[f32], channels: usize, scales: &[f64], rng: &mut ChaCha8Rng, h: usize, w: usize) -> Result<CueObservation> {
    let mut cue = Vec::with_capacity(truth.len());
    for (i, px) in truth.chunks(channels).enumerate() {
        for &v in px {
            let n: f64 = StandardNormal.sample(rng);
            cue.push((v as f64 + scales[i] * n) as f32);
        }
    }
    let lv = scales
        .iter()
        .map(|s| (s * s + VARIANCE_FLOOR).ln() as f32)
        .collect();
    Ok(CueObservation {
        cue: Tensor::new(&[h, w, channels], cue)?,
        log_variance: Tensor::new(&[h, w, 1], lv)?,
    })
}

/// Noisy specialist outputs: ground truth plus zero-mean Gaussian noise
/// with the configured per-pixel scale, and the exact log-variance.
pub fn synthesize_cues(frame: &RenderedFrame, config: &NoiseConfig, seed: u64) -> Result<CueSet> {
    config.validate()?;
    let (h, w) = (frame.height(), frame.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perspective = match config.perspective {
        PerspectiveCue::Layout => frame.layout_distance(),
        PerspectiveCue::Defocus => frame
            .depth
            .map(|d| (1.0 / d - 1.0 / config.focus_distance as f32).abs()),
    };
    let s_edge = config.edge.scales(h, w, &mut rng);
    let s_normal = config.normal.scales(h, w, &mut rng);
    let s_layout = config.layout.scales(h, w, &mut rng);
    Ok(CueSet {
        edge: observe(frame.edges.data(), 1, &s_edge, &mut rng, h, w)?,
        normal: observe(frame.normals.data(), 3, &s_normal, &mut rng, h, w)?,
        layout: observe(perspective.data(), 1, &s_layout, &mut rng, h, w)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{render_sequence, Camera, PlaneRole, Primitive, Scene};

    fn frame(w: usize, h: usize) -> RenderedFrame {
        let floor = Primitive::Plane {
            normal: [0.0, -1.0, 0.0],
            offset: -1.5,
            albedo: [0.5; 3],
            role: PlaneRole::Floor,
        };
        let wall = Primitive::Plane {
            normal: [0.0, 0.0, -1.0],
            offset: -8.0,
            albedo: [0.7; 3],
            role: PlaneRole::Wall,
        };
        let scene = Scene::still(Camera::centred(w, h, 0.9), vec![floor, wall], (0.5, 20.0));
        render_sequence(&scene, 1).unwrap().remove(0)
    }

    #[test]
    fn zero_noise_is_exact() {
        let f = frame(16, 16);
        let cues = synthesize_cues(&f, &NoiseConfig::uniform(NoiseField::Constant { scale: 0.0 }), 1).unwrap();
        assert_eq!(cues.edge.cue, f.edges);
        assert_eq!(cues.normal.cue, f.normals);
        assert_eq!(cues.layout.cue, f.layout_distance());
        let floor = (VARIANCE_FLOOR).ln() as f32;
        assert!(cues.edge.log_variance.data().iter().all(|&s| s == floor));
    }

    #[test]
    fn half_split_log_variance() {
        let f = frame(16, 8);
        let cfg = NoiseConfig {
            edge: NoiseField::HalfSplit { left: 0.5, right: 0.0 },
            ..NoiseConfig::uniform(NoiseField::Constant { scale: 0.0 })
        };
        let cues = synthesize_cues(&f, &cfg, 2).unwrap();
        let left = (0.25 + VARIANCE_FLOOR).ln() as f32;
        let right = VARIANCE_FLOOR.ln() as f32;
        for (i, &s) in cues.edge.log_variance.data().iter().enumerate() {
            assert_eq!(s, if i % 16 < 8 { left } else { right });
        }
    }

    #[test]
    fn empirical_variance_matches_scale() {
        let f = frame(100, 100);
        let cfg = NoiseConfig::uniform(NoiseField::Constant { scale: 0.1 });
        let cues = synthesize_cues(&f, &cfg, 3).unwrap();
        let d: Vec<f64> = cues
            .edge
            .cue
            .data()
            .iter()
            .zip(f.edges.data())
            .map(|(&a, &b)| (a - b) as f64)
            .collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64;
        assert!((var - 0.01).abs() < 0.001, "variance {var}");
    }

    #[test]
    fn negative_scale_rejected() {
        let f = frame(8, 8);
        let cfg = NoiseConfig::uniform(NoiseField::Constant { scale: -0.1 });
        assert!(synthesize_cues(&f, &cfg, 0).is_err());
    }

    #[test]
    fn log_variance_respects_floor() {
        let f = frame(32, 32);
        let cues = synthesize_cues(&f, &NoiseConfig::default(), 4).unwrap();
        let floor = VARIANCE_FLOOR.ln() as f32;
        for obs in [&cues.edge, &cues.normal, &cues.layout] {
            assert!(obs.log_variance.data().iter().all(|&s| s >= floor));
            assert!(obs.cue.is_finite());
        }
    }
}
