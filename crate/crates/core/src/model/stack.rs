use super::attention::{AttentionOutput, WindowAttention, WindowLayout};
use super::params::{Binding, Init, LayerNorm, Linear, ParamId};
use crate::error::{Error, Result};
use crate::gating::INPUT_CHANNELS;
use crate::tensor::{Real, Tape, Var};

/// Standardises each output filter of a `[k*k*cin, cout]` kernel to zero
/// mean and unit variance, then scales by `1/sqrt(fan_in)`.
pub fn standardized_kernel<T: Real>(tape: &mut Tape<T>, w: Var) -> Result<Var> {
    let fan_in = tape.shape(w)[0];
    let s = tape.standardize_cols(w)?;
    tape.scale(s, 1.0 / (fan_in as f64).sqrt())
}

/// Two stride-2 3x3 convolutions with weight-standardised kernels and
/// SELU between them; quarter resolution out.
#[derive(Clone, Debug)]
pub struct Stem {
    pub hidden: usize,
    pub channels: usize,
    pub conv1: ParamId,
    pub bias1: ParamId,
    pub conv2: ParamId,
    pub bias2: ParamId,
}

impl Stem {
    pub fn new<T: Real>(init: &mut Init<'_, T>, hidden: usize, channels: usize) -> Result<Self> {
        let fan1 = 9 * INPUT_CHANNELS;
        let fan2 = 9 * hidden;
        Ok(Self {
            hidden,
            channels,
            conv1: init.fan_in("stem.conv1", &[fan1, hidden], fan1)?,
            bias1: init.zeros("stem.bias1", &[hidden])?,
            conv2: init.fan_in("stem.conv2", &[fan2, channels], fan2)?,
            bias2: init.zeros("stem.bias2", &[channels])?,
        })
    }

    /// Effective first-layer kernel, rows ordered `(ky, kx, channel)`.
    pub fn first_kernel<T: Real>(&self, tape: &mut Tape<T>, bind: &Binding) -> Result<Var> {
        standardized_kernel(tape, bind.var(self.conv1))
    }

    /// `[H, W, 8]` to `[H/4, W/4, channels]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bind: &Binding, x0: Var) -> Result<Var> {
        let s = tape.shape(x0).to_vec();
        if s.len() != 3 || s[2] != INPUT_CHANNELS {
            return Err(Error::shape("stem", format!("input {s:?}")));
        }
        if s[0] < 8 || s[1] < 8 {
            return Err(Error::Invalid(format!("stem input {}x{} is smaller than 8x8", s[0], s[1])));
        }
        let k1 = self.first_kernel(tape, bind)?;
        let h = tape.conv2d(x0, k1, 3, 2, 1)?;
        let h = tape.add_bcast(h, bind.var(self.bias1))?;
        let h = tape.selu(h)?;
        let k2 = standardized_kernel(tape, bind.var(self.conv2))?;
        let y = tape.conv2d(h, k2, 3, 2, 1)?;
        tape.add_bcast(y, bind.var(self.bias2))
    }
}

/// Depthwise-separable convolution, windowed self-attention, then layer
/// norm with an uncertainty-dependent gain.
#[derive(Clone, Debug)]
pub struct V2Block {
    pub kernel: usize,
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub pointwise: Linear,
    pub norm_in: LayerNorm,
    pub attention: WindowAttention,
    pub norm_out: LayerNorm,
}

impl V2Block {
    pub fn new<T: Real>(init: &mut Init<'_, T>, channels: usize, kernel: usize, heads: usize, window: usize) -> Result<Self> {
        let taps = kernel * kernel;
        Ok(Self {
            kernel,
            depthwise: init.fan_in("v2.depthwise", &[taps, channels], taps)?,
            depthwise_bias: init.zeros("v2.depthwise_bias", &[channels])?,
            pointwise: Linear::new(init, "v2.pointwise", channels, channels, true)?,
            norm_in: LayerNorm::new(init, "v2.norm_in", channels)?,
            attention: WindowAttention::new(init, "v2.attn", channels, heads, window)?,
            norm_out: LayerNorm::new(init, "v2.norm_out", channels)?,
        })
    }

    /// `x` is `[h, w, C]`; returns `[h * w, C]` tokens and the attention.
    /// `gain` multiplies the output normalisation.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        x: Var,
        gain: f64,
        layout: &WindowLayout,
    ) -> Result<(Var, AttentionOutput)> {
        let s = tape.shape(x).to_vec();
        let tokens = s[0] * s[1];
        let c = s[2];
        let d = tape.depthwise_conv2d(x, bind.var(self.depthwise), self.kernel, self.kernel / 2)?;
        let d = tape.add_bcast(d, bind.var(self.depthwise_bias))?;
        let d = tape.selu(d)?;
        let d = tape.reshape(d, &[tokens, c])?;
        let p = self.pointwise.forward(tape, bind, d)?;
        let xf = tape.reshape(x, &[tokens, c])?;
        let h = tape.add(xf, p)?;
        let n = self.norm_in.forward(tape, bind, h)?;
        let attn = self.attention.forward(tape, bind, n, layout)?;
        let a = tape.add(h, attn.out)?;
        let out = self.norm_out.forward_scaled(tape, bind, a, gain)?;
        Ok((out, attn))
    }
}

/// Pre-norm transformer block on windowed tokens.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attention: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SwinBlock {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, channels: usize, heads: usize, window: usize, mlp_ratio: usize) -> Result<Self> {
        let hidden = channels * mlp_ratio;
        Ok(Self {
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), channels)?,
            attention: WindowAttention::new(init, &format!("{name}.attn"), channels, heads, window)?,
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), channels)?,
            fc1: Linear::new(init, &format!("{name}.fc1"), channels, hidden, true)?,
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, channels, true)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var, layout: &WindowLayout) -> Result<(Var, AttentionOutput)> {
        let n = self.norm1.forward(tape, bind, x)?;
        let attn = self.attention.forward(tape, bind, n, layout)?;
        let a = tape.add(x, attn.out)?;
        let n = self.norm2.forward(tape, bind, a)?;
        let h = self.fc1.forward(tape, bind, n)?;
        let h = tape.gelu(h)?;
        let h = self.fc2.forward(tape, bind, h)?;
        Ok((tape.add(a, h)?, attn))
    }
}
