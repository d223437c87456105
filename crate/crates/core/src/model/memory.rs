use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Binding, Init, Linear, ParamId};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// How the write gate is produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum GateMode {
    /// Logistic of a learned affine map of the mean token.
    #[default]
    Learned,
    /// Learned value, but no gradient flows into the gate parameters.
    Frozen,
    /// Constant gate in `[0, 1]`.
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    pub enabled: bool,
    pub slots: usize,
    pub dim: usize,
    /// Tokens aggregated into each slot's write vector.
    pub top_k: usize,
    /// Write gate at initialisation.
    pub gate_init: f64,
    pub gate: GateMode,
    /// Start each sequence from learned slots instead of zeros.
    pub learned_init: bool,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            slots: 32,
            dim: 128,
            top_k: 8,
            gate_init: 0.1,
            gate: GateMode::Learned,
            learned_init: false,
        }
    }
}

/// Parameters shared by every read and write of the slot bank.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    pub slots: usize,
    pub dim: usize,
    pub top_k: usize,
    pub key: ParamId,
    pub value: ParamId,
    /// Learned per-slot key offsets, so empty slots remain distinguishable.
    pub slot_keys: ParamId,
    pub gate_weight: ParamId,
    pub gate_bias: ParamId,
    pub write: ParamId,
    pub initial: Option<ParamId>,
}

/// Per-block query and output projections around a read.
#[derive(Clone, Debug)]
pub struct ReadHead {
    pub query: Linear,
    pub merge: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct ReadOutput {
    /// `[N, D]` retrieved rows.
    pub read: Var,
    /// `[N, S]` attention over slots.
    pub attention: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct WriteOutput {
    pub memory: Var,
    /// Single-element gate.
    pub gate: Var,
    /// `[S, D]` aggregated write matrix.
    pub target: Var,
}

impl MemoryBank {
    pub fn new<T: Real>(init: &mut Init<'_, T>, config: &MemoryConfig, channels: usize) -> Result<Self> {
        let (s, d) = (config.slots, config.dim);
        if s == 0 || d == 0 || config.top_k == 0 {
            return Err(Error::Invalid("memory needs slots, dim and top_k > 0".into()));
        }
        if !(config.gate_init > 0.0 && config.gate_init < 1.0) {
            return Err(Error::Invalid(format!("gate init {} outside (0, 1)", config.gate_init)));
        }
        let logit = (config.gate_init / (1.0 - config.gate_init)).ln();
        Ok(Self {
            slots: s,
            dim: d,
            top_k: config.top_k,
            key: init.fan_in("memory.key", &[d, d], d)?,
            value: init.fan_in("memory.value", &[d, d], d)?,
            slot_keys: init.uniform("memory.slot_keys", &[s, d], 1.0)?,
            gate_weight: init.zeros("memory.gate_weight", &[channels, 1])?,
            gate_bias: init.full("memory.gate_bias", &[1], logit)?,
            write: init.fan_in("memory.write", &[channels, d], channels)?,
            initial: if config.learned_init {
                Some(init.zeros("memory.initial", &[s, d])?)
            } else {
                None
            },
        })
    }

    /// Memory at the start of a sequence.
    pub fn reset<T: Real>(&self, tape: &mut Tape<T>, bind: &Binding) -> Var {
        match self.initial {
            Some(id) => bind.var(id),
            None => tape.input(Tensor::zeros(&[self.slots, self.dim])),
        }
    }

    /// `softmax(Q K^T / sqrt(D)) V` with `K = M W_K + slot_keys`, `V = M W_V`.
    pub fn read<T: Real>(&self, tape: &mut Tape<T>, bind: &Binding, memory: Var, queries: Var) -> Result<ReadOutput> {
        let qs = tape.shape(queries).to_vec();
        if qs.len() != 2 || qs[1] != self.dim || tape.shape(memory) != [self.slots, self.dim] {
            return Err(Error::shape(
                "memory_read",
                format!("queries {qs:?}, memory {:?}, dim {}", tape.shape(memory), self.dim),
            ));
        }
        let k = tape.matmul(memory, bind.var(self.key))?;
        let k = tape.add(k, bind.var(self.slot_keys))?;
        let v = tape.matmul(memory, bind.var(self.value))?;
        let logits = tape.matmul_nt(queries, k)?;
        let logits = tape.scale(logits, 1.0 / (self.dim as f64).sqrt())?;
        let attention = tape.softmax(logits)?;
        let read = tape.matmul(attention, v)?;
        Ok(ReadOutput { read, attention })
    }

    /// Gate `eta = sigmoid(w . mean(tokens) + b)`.
    pub fn gate<T: Real>(&self, tape: &mut Tape<T>, bind: &Binding, tokens: Var, mode: GateMode) -> Result<Var> {
        if let GateMode::Fixed(v) = mode {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Invalid(format!("fixed gate {v} outside [0, 1]")));
            }
            return Ok(tape.input(Tensor::full(&[1], T::from_f64(v))));
        }
        let c = *tape.shape(tokens).last().unwrap_or(&0);
        let m = tape.mean_rows(tokens)?;
        let m = tape.reshape(m, &[1, c])?;
        let z = tape.matmul(m, bind.var(self.gate_weight))?;
        let z = tape.reshape(z, &[1])?;
        let z = tape.add(z, bind.var(self.gate_bias))?;
        let eta = tape.sigmoid(z)?;
        Ok(if mode == GateMode::Frozen {
            tape.detach(eta)
        } else {
            eta
        })
    }

    /// Write matrix: for each slot, the attention-weighted mean of the
    /// projected tokens that give it the most read attention.
    pub fn aggregate<T: Real>(&self, tape: &mut Tape<T>, bind: &Binding, tokens: Var, attention: Var) -> Result<Var> {
        let n = tape.shape(tokens)[0];
        if tape.shape(attention) != [n, self.slots] {
            return Err(Error::shape("memory_write", format!("attention {:?}", tape.shape(attention))));
        }
        let k = self.top_k.min(n);
        let a = tape.value(attention);
        let mut token_index = Vec::with_capacity(self.slots * k);
        let mut weight_index = Vec::with_capacity(self.slots * k);
        let mut order: Vec<usize> = (0..n).collect();
        for s in 0..self.slots {
            let col = |i: usize| a.data()[i * self.slots + s];
            order.sort_by(|&i, &j| col(j).partial_cmp(&col(i)).unwrap().then(i.cmp(&j)));
            for &i in &order[..k] {
                token_index.push(i as u32);
                weight_index.push((s * n + i) as u32);
            }
        }
        let projected = tape.matmul(tokens, bind.var(self.write))?;
        let picked = tape.gather_rows(projected, Arc::from(token_index))?;
        let picked = tape.reshape(picked, &[self.slots, k, self.dim])?;
        let at = tape.transpose(attention)?;
        let at = tape.reshape(at, &[self.slots * n, 1])?;
        let w = tape.gather_rows(at, Arc::from(weight_index))?;
        let w = tape.reshape(w, &[self.slots, k])?;
        let total = tape.sum_last(w)?;
        let inv = tape.recip(total)?;
        let w = tape.mul_col(w, inv)?;
        let w = tape.reshape(w, &[self.slots, 1, k])?;
        let target = tape.bmm(w, picked, false, false)?;
        tape.reshape(target, &[self.slots, self.dim])
    }

    /// `M' = (1 - eta) M + eta M~`.
    pub fn write<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        memory: Var,
        tokens: Var,
        attention: Var,
        mode: GateMode,
    ) -> Result<WriteOutput> {
        let gate = self.gate(tape, bind, tokens, mode)?;
        let target = self.aggregate(tape, bind, tokens, attention)?;
        if !tape.value(target).is_finite() {
            return Err(Error::NonFinite { op: "memory_write" });
        }
        let memory = tape.lerp(memory, target, gate)?;
        Ok(WriteOutput { memory, gate, target })
    }
}

impl ReadHead {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, channels: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            query: Linear::new(init, &format!("{name}.query"), channels, dim, false)?,
            merge: Linear::new(init, &format!("{name}.merge"), channels + dim, channels, true)?,
        })
    }

    /// Reads the bank and merges the result into the tokens through a
    /// residual 1x1 projection of `[tokens, read]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        bank: &MemoryBank,
        memory: Var,
        tokens: Var,
    ) -> Result<(Var, ReadOutput)> {
        let q = self.query.forward(tape, bind, tokens)?;
        let r = bank.read(tape, bind, memory, q)?;
        let joined = tape.concat(&[tokens, r.read])?;
        let merged = self.merge.forward(tape, bind, joined)?;
        Ok((tape.add(tokens, merged)?, r))
    }
}

/// Moves `ceil(fraction * S)` randomly chosen rows among themselves so
/// that each chosen row lands in a different chosen position.
pub fn shuffle_slots<T: Real>(memory: &Tensor<T>, fraction: f64, seed: u64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Invalid(format!("shuffle fraction {fraction} outside [0, 1]")));
    }
    let s = memory.shape()[0];
    let d = memory.len() / s;
    let m = ((fraction * s as f64).ceil() as usize).min(s);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = (0..s).collect();
    chosen.shuffle(&mut rng);
    chosen.truncate(m);
    let mut out = memory.clone();
    if m < 2 {
        return Ok(out);
    }
    for (i, &dst) in chosen.iter().enumerate() {
        let src = chosen[(i + 1) % m];
        out.data_mut()[dst * d..(dst + 1) * d].copy_from_slice(&memory.data()[src * d..(src + 1) * d]);
    }
    Ok(out)
}

/// Entropy (nats) of the token-averaged read attention over slots.
pub fn slot_entropy<T: Real>(attention: &Tensor<T>) -> f64 {
    slot_mass(attention)
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Token-averaged read attention per slot.
pub fn slot_mass<T: Real>(attention: &Tensor<T>) -> Vec<f64> {
    let s = attention.last_dim();
    let n = attention.len() / s;
    let mut mass = vec![0.0; s];
    for row in attention.data().chunks(s) {
        for (m, &v) in mass.iter_mut().zip(row) {
            *m += v.as_f64();
        }
    }
    mass.iter_mut().for_each(|m| *m /= n as f64);
    mass
}

/// Writes slot contents as CSV, one row per slot.
pub fn dump_slots<T: Real>(memory: &Tensor<T>, out: &mut impl Write) -> Result<()> {
    let d = memory.last_dim();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["slot".to_string()];
    header.extend((0..d).map(|j| format!("d{j}")));
    w.write_record(&header).map_err(|e| Error::Invalid(e.to_string()))?;
    for (i, row) in memory.data().chunks(d).enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|v| v.as_f64().to_string()));
        w.write_record(&rec).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Invalid(e.to_string()))
}
