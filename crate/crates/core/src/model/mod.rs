//! Cue-gated input stem, integration and context layers with slot memory,
//! adaptive-bins head and guided upsampling, composed into one model.

mod attention;
mod bins;
mod input;
mod memory;
mod params;
mod stack;

pub use attention::{AttentionOutput, WindowAttention, WindowLayout};
pub use bins::{
    bin_prior_kl, depth_expectation, kl_divergence, log_spaced_centres, BinPrediction, BinsConfig,
    BinsHead,
};
pub use input::{blank_sample, prepare_frame, FrameInput, InputOptions};
pub use memory::{
    dump_slots, shuffle_slots, slot_entropy, slot_mass, GateMode, MemoryBank, MemoryConfig,
    ReadHead, ReadOutput, WriteOutput,
};
pub use params::{Binding, Init, LayerNorm, Linear, ParamId, ParamStore};
pub use stack::{standardized_kernel, Stem, SwinBlock, V2Block};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guided::{guided_filter_upsample, FilterConfig};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub stem_hidden: usize,
    pub stem_channels: usize,
    pub v2_kernel: usize,
    pub v2_heads: usize,
    pub v2_iterations: usize,
    pub v3_blocks: usize,
    pub v3_heads: usize,
    pub window: usize,
    pub mlp_ratio: usize,
    /// Lower bound applied to the final depth before log-domain losses.
    pub depth_floor: f64,
    pub memory: MemoryConfig,
    pub bins: BinsConfig,
    pub filter: FilterConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stem_hidden: 32,
            stem_channels: 64,
            v2_kernel: 5,
            v2_heads: 4,
            v2_iterations: 1,
            v3_blocks: 2,
            v3_heads: 4,
            window: 7,
            mlp_ratio: 2,
            depth_floor: 0.05,
            memory: MemoryConfig::default(),
            bins: BinsConfig::default(),
            filter: FilterConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.stem_channels;
        if self.v2_heads == 0 || c % self.v2_heads != 0 || self.v3_heads == 0 || c % self.v3_heads != 0 {
            return Err(Error::Invalid(format!(
                "heads ({}, {}) must divide {c} channels",
                self.v2_heads, self.v3_heads
            )));
        }
        if self.window == 0 || self.v2_kernel % 2 == 0 || self.v2_iterations == 0 {
            return Err(Error::Invalid(
                "window and iterations must be positive and the kernel odd".into(),
            ));
        }
        if !(self.depth_floor > 0.0) {
            return Err(Error::Invalid("depth floor must be positive".into()));
        }
        self.filter.validate()
    }
}

/// Everything one frame's forward pass records on the tape.
#[derive(Clone, Debug)]
pub struct FrameOutput {
    /// `[H, W, 1]` final depth.
    pub depth: Var,
    /// `[h, w, 1]` bin expectation before upsampling.
    pub depth_low: Var,
    pub bins: BinPrediction,
    /// `[h * w, C]` context tokens fed to the head.
    pub features: Var,
    /// Memory after this frame's writes.
    pub memory: Option<Var>,
    pub reads: Vec<ReadOutput>,
    pub writes: Vec<WriteOutput>,
    /// Attention weights of the integration block, then each context block.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub stem: Stem,
    pub v2: V2Block,
    pub v3: Vec<SwinBlock>,
    pub read_heads: Vec<ReadHead>,
    pub memory: MemoryBank,
    pub bins: BinsHead,
}

impl<T: Real> Model<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, seed);
        let c = config.stem_channels;
        let stem = Stem::new(&mut init, config.stem_hidden, c)?;
        let v2 = V2Block::new(&mut init, c, config.v2_kernel, config.v2_heads, config.window)?;
        let mut v3 = Vec::with_capacity(config.v3_blocks);
        let mut read_heads = Vec::with_capacity(config.v3_blocks);
        for i in 0..config.v3_blocks {
            v3.push(SwinBlock::new(&mut init, &format!("v3.{i}"), c, config.v3_heads, config.window, config.mlp_ratio)?);
            read_heads.push(ReadHead::new(&mut init, &format!("v3.{i}.read"), c, config.memory.dim)?);
        }
        let memory = MemoryBank::new(&mut init, &config.memory, c)?;
        let bins = BinsHead::new(&mut init, &config.bins, c)?;
        Ok(Self {
            config: config.clone(),
            params,
            stem,
            v2,
            v3,
            read_heads,
            memory,
            bins,
        })
    }

    /// Same architecture and parameters at another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            stem: self.stem.clone(),
            v2: self.v2.clone(),
            v3: self.v3.clone(),
            read_heads: self.read_heads.clone(),
            memory: self.memory.clone(),
            bins: self.bins.clone(),
        }
    }

    pub fn memory_enabled(&self) -> bool {
        self.config.memory.enabled
    }

    /// Shift of context block `i`: none for even blocks, half a window
    /// for odd ones.
    pub fn block_shift(&self, i: usize) -> usize {
        if i % 2 == 0 {
            0
        } else {
            self.config.window / 2
        }
    }

    /// Quarter-resolution tokens through the integration layer.
    pub fn integrate(&self, tape: &mut Tape<T>, bind: &Binding, x0: Var, sigma_bar: [f64; 3]) -> Result<(Var, Var, (usize, usize))> {
        let f1 = self.stem.forward(tape, bind, x0)?;
        let s = tape.shape(f1).to_vec();
        let (h, w, c) = (s[0], s[1], s[2]);
        let gain = (-(sigma_bar.iter().sum::<f64>() / 3.0)).exp();
        let layout = WindowLayout::new(h, w, self.config.window, 0)?;
        let mut x = f1;
        let mut tokens = f1;
        let mut attn = None;
        for _ in 0..self.config.v2_iterations {
            let (t, a) = self.v2.forward(tape, bind, x, gain, &layout)?;
            tokens = t;
            attn = Some(a.weights);
            x = tape.reshape(t, &[h, w, c])?;
        }
        Ok((tokens, attn.expect("at least one iteration"), (h, w)))
    }

    /// Context blocks, each followed by a memory read and gated write when
    /// memory is enabled.
    pub fn context(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        tokens: Var,
        grid: (usize, usize),
        memory: Option<Var>,
    ) -> Result<(Var, Option<Var>, Vec<ReadOutput>, Vec<WriteOutput>, Vec<Var>)> {
        let mut x = tokens;
        let mut m = memory;
        let mut reads = Vec::new();
        let mut writes = Vec::new();
        let mut attention = Vec::new();
        for (i, block) in self.v3.iter().enumerate() {
            let layout = WindowLayout::new(grid.0, grid.1, self.config.window, self.block_shift(i))?;
            let (y, a) = block.forward(tape, bind, x, &layout)?;
            attention.push(a.weights);
            x = y;
            if let (true, Some(mv)) = (self.memory_enabled(), m) {
                let (y, r) = self.read_heads[i].forward(tape, bind, &self.memory, mv, x)?;
                x = y;
                let wr = self.memory.write(tape, bind, mv, x, r.attention, self.config.memory.gate)?;
                m = Some(wr.memory);
                reads.push(r);
                writes.push(wr);
            }
        }
        Ok((x, m, reads, writes, attention))
    }

    /// One frame. `memory` is the bank carried in from the previous frame;
    /// ignored when memory is disabled.
    pub fn forward_frame(&self, tape: &mut Tape<T>, bind: &Binding, input: &FrameInput<T>, memory: Option<Var>) -> Result<FrameOutput> {
        let x0 = tape.input(input.x0.clone());
        let (tokens, v2_attn, grid) = self.integrate(tape, bind, x0, input.sigma_bar)?;
        let memory = if self.memory_enabled() { memory } else { None };
        let (features, memory, reads, writes, mut attention) = self.context(tape, bind, tokens, grid, memory)?;
        attention.insert(0, v2_attn);
        let bins = self.bins.predict(tape, bind, features)?;
        let d = depth_expectation(tape, bins.scores, bins.centres)?;
        let depth_low = tape.reshape(d, &[grid.0, grid.1, 1])?;
        let guidance = tape.input(input.guidance.clone());
        let weights = match (&input.guidance_weight, self.config.filter.uncertainty_weights) {
            (Some(w), true) => Some(tape.input(w.clone())),
            _ => None,
        };
        let up = guided_filter_upsample(tape, depth_low, guidance, &self.config.filter, weights)?;
        let depth = tape.clamp_min(up, self.config.depth_floor)?;
        Ok(FrameOutput {
            depth,
            depth_low,
            bins,
            features,
            memory,
            reads,
            writes,
            attention,
        })
    }

    /// Frames of one sequence on one tape, memory reset at the start and
    /// carried across frames. With `shuffle = Some((fraction, seed))` the
    /// carried bank is slot-shuffled before every frame after the first;
    /// that cuts the gradient path through memory.
    pub fn forward_sequence(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        frames: &[FrameInput<T>],
        shuffle: Option<(f64, u64)>,
    ) -> Result<Vec<FrameOutput>> {
        let mut memory = self.memory_enabled().then(|| self.memory.reset(tape, bind));
        let mut outs = Vec::with_capacity(frames.len());
        for (t, frame) in frames.iter().enumerate() {
            if let (Some((fraction, seed)), Some(m), true) = (shuffle, memory, t > 0) {
                let shuffled = shuffle_slots(tape.value(m), fraction, seed.wrapping_add(t as u64))?;
                memory = Some(tape.input(shuffled));
            }
            let out = self.forward_frame(tape, bind, frame, memory)?;
            memory = out.memory;
            outs.push(out);
        }
        Ok(outs)
    }
}

/// Norm of the gated write content, `eta * ||target||`.
pub fn write_magnitude<T: Real>(gate: &Tensor<T>, target: &Tensor<T>) -> f64 {
    let norm = target.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    gate.item().as_f64().abs() * norm
}
