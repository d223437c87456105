//! Reliability gating of cue maps and assembly of the fused input stack.

use crate::error::{Error, Result};
use crate::scene::CueSet;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Channel layout of the fused input: RGB, edge, normal, perspective.
pub const RGB_CHANNELS: std::ops::Range<usize> = 0..3;
pub const EDGE_CHANNEL: usize = 3;
pub const NORMAL_CHANNELS: std::ops::Range<usize> = 4..7;
pub const LAYOUT_CHANNEL: usize = 7;
pub const INPUT_CHANNELS: usize = 8;

/// `cue * exp(-log_variance)`, with the `[H, W, 1]` log-variance applied
/// to every channel of the `[H, W, C]` cue.
pub fn gate_cue<T: Real>(cue: &Tensor<T>, log_variance: &Tensor<T>) -> Result<Tensor<T>> {
    let (cs, ls) = (cue.shape(), log_variance.shape());
    if cs.len() != 3 || ls.len() != 3 || cs[..2] != ls[..2] || ls[2] != 1 {
        return Err(Error::shape("gate_cue", format!("{cs:?} vs {ls:?}")));
    }
    if !log_variance.is_finite() {
        return Err(Error::NonFinite { op: "gate_cue" });
    }
    let c = cs[2];
    let data = cue
        .data()
        .chunks(c)
        .zip(log_variance.data())
        .flat_map(|(px, &s)| {
            let w = (-s).exp();
            px.iter().map(move |&v| v * w)
        })
        .collect();
    Tensor::new(cs, data)
}

/// Tape version of [`gate_cue`], differentiable in both inputs.
pub fn gate_cue_var<T: Real>(tape: &mut Tape<T>, cue: Var, log_variance: Var) -> Result<Var> {
    let c = *tape.shape(cue).last().unwrap_or(&0);
    let neg = tape.scale(log_variance, -1.0)?;
    let w = tape.exp(neg)?;
    let w = if c == 1 {
        w
    } else {
        let parts = vec![w; c];
        tape.concat(&parts)?
    };
    tape.mul(cue, w)
}

/// Fused `[H, W, 8]` input plus the per-cue mean log-variances.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedCueStack<T> {
    pub x0: Tensor<T>,
    /// Mean log-variance of the edge, normal and perspective cues.
    pub sigma_bar: [f64; 3],
}

impl<T: Real> GatedCueStack<T> {
    /// Mean of the three cue log-variance means.
    pub fn mean_sigma(&self) -> f64 {
        self.sigma_bar.iter().sum::<f64>() / 3.0
    }
}

fn mean_f64<T: Real>(t: &Tensor<T>) -> f64 {
    t.data().iter().map(|v| v.as_f64()).sum::<f64>() / t.len() as f64
}

/// Gates each cue and concatenates `[rgb, E, N, P]` channelwise. Cue maps
/// at a different resolution from `rgb` are bilinearly resized first.
pub fn assemble_input<T: Real>(rgb: &Tensor<T>, cues: &CueSet) -> Result<GatedCueStack<T>> {
    let s = rgb.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape("assemble_input", format!("rgb {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let mut tape = Tape::<T>::new();
    let mut gated = Vec::with_capacity(3);
    let mut sigma_bar = [0.0; 3];
    for (i, obs) in [&cues.edge, &cues.normal, &cues.layout].into_iter().enumerate() {
        let cue: Tensor<T> = obs.cue.cast();
        let lv: Tensor<T> = obs.log_variance.cast();
        sigma_bar[i] = mean_f64(&lv);
        let g = gate_cue(&cue, &lv)?;
        let gs = g.shape();
        let v = tape.input(g.clone());
        let v = if gs[0] == h && gs[1] == w {
            v
        } else {
            tape.resize_bilinear(v, h, w)?
        };
        gated.push(v);
    }
    let rgb_v = tape.input(rgb.clone());
    let x0 = tape.concat(&[rgb_v, gated[0], gated[1], gated[2]])?;
    let x0 = tape.value(x0).clone();
    if x0.shape()[2] != INPUT_CHANNELS {
        return Err(Error::shape(
            "assemble_input",
            format!("expected {INPUT_CHANNELS} channels, got {:?}", x0.shape()),
        ));
    }
    Ok(GatedCueStack { x0, sigma_bar })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::CueObservation;

    fn obs(h: usize, w: usize, c: usize, value: f32, sigma: f32) -> CueObservation {
        CueObservation {
            cue: Tensor::full(&[h, w, c], value),
            log_variance: Tensor::full(&[h, w, 1], sigma),
        }
    }

    #[test]
    fn zero_log_variance_is_identity() {
        let c = Tensor::new(&[2, 2, 1], vec![1.5f64, -2.0, 0.0, 3.25]).unwrap();
        let g = gate_cue(&c, &Tensor::zeros(&[2, 2, 1])).unwrap();
        assert_eq!(g, c);
    }

    #[test]
    fn ln2_halves() {
        let c = Tensor::full(&[3, 3, 3], 2.0f64);
        let s = Tensor::full(&[3, 3, 1], 2f64.ln());
        let g = gate_cue(&c, &s).unwrap();
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn larger_sigma_shrinks() {
        let c = Tensor::new(&[1, 3, 1], vec![1.0f64, -0.5, 0.0]).unwrap();
        let a = gate_cue(&c, &Tensor::zeros(&[1, 3, 1])).unwrap();
        let b = gate_cue(&c, &Tensor::full(&[1, 3, 1], 5.0)).unwrap();
        for ((&x, &y), &orig) in a.data().iter().zip(b.data()).zip(c.data()) {
            if orig != 0.0 {
                assert!(y.abs() < x.abs());
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = Tensor::<f64>::zeros(&[2, 2, 1]);
        assert!(gate_cue(&c, &Tensor::zeros(&[2, 3, 1])).is_err());
        assert!(gate_cue(&c, &Tensor::full(&[2, 2, 1], f64::NAN)).is_err());
    }

    #[test]
    fn assembles_eight_channels() {
        let cues = CueSet {
            edge: obs(64, 64, 1, 0.0, 4f32.ln()),
            normal: obs(64, 64, 3, 0.0, 0.0),
            layout: obs(64, 64, 1, 0.0, 0.0),
        };
        let rgb = Tensor::<f32>::full(&[64, 64, 3], 0.5);
        let stack = assemble_input(&rgb, &cues).unwrap();
        assert_eq!(stack.x0.shape(), &[64, 64, 8]);
        for px in stack.x0.data().chunks(8) {
            assert!(px[3..].iter().all(|&v| v == 0.0));
            assert_eq!(&px[..3], &[0.5; 3]);
        }
        assert!((stack.sigma_bar[0] - 4f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn low_resolution_cues_are_resized() {
        let cues = CueSet {
            edge: obs(8, 8, 1, 1.0, 0.0),
            normal: obs(8, 8, 3, 1.0, 0.0),
            layout: obs(8, 8, 1, 1.0, 0.0),
        };
        let stack = assemble_input(&Tensor::<f64>::zeros(&[16, 16, 3]), &cues).unwrap();
        assert_eq!(stack.x0.shape(), &[16, 16, 8]);
    }

    #[test]
    fn tape_gradient_is_the_gate() {
        let mut tape = Tape::<f64>::new();
        let c = tape.param(Tensor::new(&[1, 2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap());
        let s = tape.input(Tensor::new(&[1, 2, 1], vec![0.3, -1.2]).unwrap());
        let g = gate_cue_var(&mut tape, c, s).unwrap();
        let l = tape.sum(g).unwrap();
        let grads = tape.backward(l).unwrap();
        let gc = grads.get(c).unwrap().data();
        for (i, &v) in gc.iter().enumerate() {
            let want = (-[0.3f64, -1.2][i / 3]).exp();
            assert!((v - want).abs() < 1e-15);
        }
    }
}
