//! Optimisation loop, evaluation and checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use optim::{adamw_step, clip_global_norm, cosine_lr, global_norm, AdamState, AdamWConfig};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{cue_loss, grad_loss, si_loss, ssim_loss, total_loss, LossTerms, LossValues, LossWeights};
use crate::metrics::{evaluate_frame, MetricReport};
use crate::model::{bin_prior_kl, prepare_frame, Binding, FrameInput, InputOptions, Model};
use crate::scene::{Dataset, Sample};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Sequences per optimiser step; each contributes all its frames.
    pub sequences_per_batch: usize,
    pub lr: f64,
    pub optimizer: AdamWConfig,
    pub clip_norm: f64,
    pub seed: u64,
    /// Stop after this many optimiser steps; the schedule still spans
    /// the full run.
    pub max_steps: Option<usize>,
    pub loss: LossWeights,
    pub input: InputOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            sequences_per_batch: 2,
            lr: 6e-4,
            optimizer: AdamWConfig::default(),
            clip_norm: 5.0,
            seed: 0,
            max_steps: None,
            loss: LossWeights::default(),
            input: InputOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.sequences_per_batch == 0 || self.epochs == 0 || !(self.clip_norm > 0.0) {
            return Err(Error::Invalid(format!(
                "need lr > 0, batch >= 1, epochs >= 1 and clip > 0; got {}, {}, {}, {}",
                self.lr, self.sequences_per_batch, self.epochs, self.clip_norm
            )));
        }
        self.loss.validate()?;
        self.input.validate()
    }
}

/// One optimiser step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub si: f64,
    pub grad: f64,
    pub ssim: f64,
    pub cue: f64,
    pub kl: f64,
    pub grad_norm: f64,
}

/// Validation after `epoch` epochs; epoch 0 is the untrained model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub report: MetricReport,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub validation: Vec<EpochLog>,
}

/// Inference-time perturbations for evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub input: InputOptions,
    /// Fraction of memory slots shuffled before each frame after the first.
    pub slot_shuffle: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// `s{scene}_f{frame}` labels with per-frame metrics.
    pub frames: Vec<(String, MetricReport)>,
    pub aggregate: MetricReport,
    /// Final depth per frame, in dataset order.
    pub depths: Vec<Tensor<f32>>,
}

/// Deterministic per-frame seed.
pub fn frame_seed(seed: u64, epoch: usize, sequence: usize, frame: usize) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((epoch as u64) << 40)
        .wrapping_add((sequence as u64) << 16)
        .wrapping_add(frame as u64);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn prepare_sequence(samples: &[Sample], options: &InputOptions, seed: u64, epoch: usize, seq: usize) -> Result<Vec<FrameInput<f32>>> {
    samples
        .iter()
        .enumerate()
        .map(|(f, s)| prepare_frame(s, options, frame_seed(seed, epoch, seq, f)))
        .collect()
}

/// Summed loss of one sequence, each frame weighted by `frame_weight`.
pub fn sequence_loss(
    model: &Model<f32>,
    tape: &mut Tape<f32>,
    bind: &Binding,
    frames: &[FrameInput<f32>],
    samples: &[Sample],
    prior: &[f64],
    weights: &LossWeights,
    frame_weight: f64,
) -> Result<(Var, LossValues)> {
    let outs = model.forward_sequence(tape, bind, frames, None)?;
    let kernel = bind.var(model.stem.conv1);
    let range = model.config.bins.depth_range;
    let mut total: Option<Var> = None;
    let mut values = LossValues::default();
    for ((out, frame), sample) in outs.iter().zip(frames).zip(samples) {
        let gt = &sample.frame.depth;
        let terms = LossTerms {
            si: si_loss(tape, out.depth, gt, weights.lambda, None)?,
            grad: grad_loss(tape, out.depth, gt)?,
            ssim: ssim_loss(tape, out.depth, gt, range)?,
            cue: cue_loss(tape, kernel, frame.sigma_bar)?,
            kl: bin_prior_kl(tape, out.bins.scores, prior)?,
        };
        let t = total_loss(tape, &terms, weights)?;
        let v = LossValues::read(tape, &terms, t);
        for (acc, x) in [
            (&mut values.total, v.total),
            (&mut values.si, v.si),
            (&mut values.grad, v.grad),
            (&mut values.ssim, v.ssim),
            (&mut values.cue, v.cue),
            (&mut values.kl, v.kl),
        ] {
            *acc += frame_weight * x;
        }
        let t = tape.scale(t, frame_weight)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, t)?,
            None => t,
        });
    }
    let total = total.ok_or_else(|| Error::Invalid("empty sequence".into()))?;
    Ok((total, values))
}

/// Model, optimiser state and progress of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub config: TrainConfig,
    pub state: AdamState<f32>,
    pub step: usize,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = AdamState::new(model.params.values());
        Ok(Self {
            model,
            config,
            state,
            step: 0,
        })
    }

    pub fn steps_per_epoch(&self, train: &Dataset) -> usize {
        train.sequences.len().div_ceil(self.config.sequences_per_batch)
    }

    /// Length of the learning-rate schedule.
    pub fn schedule_steps(&self, train: &Dataset) -> usize {
        self.config.epochs * self.steps_per_epoch(train)
    }

    fn last_step(&self, train: &Dataset) -> usize {
        let full = self.schedule_steps(train);
        self.config.max_steps.map_or(full, |m| m.min(full))
    }

    /// Sequence order of `epoch`.
    fn order(&self, train: &Dataset, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..train.sequences.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(self.config.seed, epoch, usize::MAX >> 16, 0));
        idx.shuffle(&mut rng);
        idx
    }

    /// One optimiser step over the listed sequences.
    pub fn train_step(&mut self, train: &Dataset, batch: &[usize], epoch: usize) -> Result<StepLog> {
        let lr = cosine_lr(self.config.lr, self.step, self.schedule_steps(train));
        let frames_total: usize = batch.iter().map(|&i| train.sequences[i].samples.len()).sum();
        let frame_weight = 1.0 / frames_total.max(1) as f64;
        let mut grads: Vec<Tensor<f32>> = self.model.params.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        let mut values = LossValues::default();
        for &si in batch {
            let seq = &train.sequences[si];
            let frames = prepare_sequence(&seq.samples, &self.config.input, self.config.seed, epoch, si)?;
            let mut tape = Tape::new();
            let bind = self.model.params.bind(&mut tape, true);
            let (loss, v) = sequence_loss(
                &self.model,
                &mut tape,
                &bind,
                &frames,
                &seq.samples,
                &train.prior.probs,
                &self.config.loss,
                frame_weight,
            )
            .map_err(|e| self.diverged(e))?;
            if !v.total.is_finite() {
                return Err(Error::Diverged {
                    step: self.step,
                    detail: format!("loss {v:?}"),
                });
            }
            let g = tape.backward(loss).map_err(|e| self.diverged(e))?;
            for (acc, &var) in grads.iter_mut().zip(bind.vars()) {
                if let Some(gv) = g.get(var) {
                    acc.data_mut().iter_mut().zip(gv.data()).for_each(|(a, &b)| *a += b);
                }
            }
            values.total += v.total;
            values.si += v.si;
            values.grad += v.grad;
            values.ssim += v.ssim;
            values.cue += v.cue;
            values.kl += v.kl;
        }
        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm);
        adamw_step(self.model.params.values_mut(), &grads, &mut self.state, lr, &self.config.optimizer)
            .map_err(|e| self.diverged(e))?;
        let log = StepLog {
            step: self.step,
            epoch,
            lr,
            loss: values.total,
            si: values.si,
            grad: values.grad,
            ssim: values.ssim,
            cue: values.cue,
            kl: values.kl,
            grad_norm,
        };
        self.step += 1;
        Ok(log)
    }

    fn diverged(&self, e: Error) -> Error {
        match e {
            Error::NonFinite { op } => Error::Diverged {
                step: self.step,
                detail: format!("non-finite value in {op}"),
            },
            other => other,
        }
    }

    /// Trains to the end of the schedule (or `max_steps`), validating on
    /// `val` before the first step and after every epoch. Resumes from
    /// `self.step`.
    pub fn fit(&mut self, train: &Dataset, val: Option<&Dataset>, mut on_step: impl FnMut(&StepLog)) -> Result<TrainReport> {
        if train.sequences.is_empty() {
            return Err(Error::Invalid("empty training set".into()));
        }
        let mut report = TrainReport::default();
        let per_epoch = self.steps_per_epoch(train);
        let last = self.last_step(train);
        let validate = |model: &Model<f32>, epoch: usize, step: usize, report: &mut TrainReport| -> Result<()> {
            if let Some(v) = val {
                let e = evaluate(model, v, &EvalOptions::default())?;
                log::info!("epoch {epoch} step {step}: silog {:.4} abs_rel {:.4} delta1 {:.3}", e.aggregate.silog, e.aggregate.abs_rel, e.aggregate.delta1);
                report.validation.push(EpochLog {
                    epoch,
                    step,
                    report: e.aggregate,
                });
            }
            Ok(())
        };
        if self.step == 0 {
            validate(&self.model, 0, 0, &mut report)?;
        }
        let mut epoch = self.step / per_epoch;
        while self.step < last {
            let order = self.order(train, epoch);
            let done = self.step - epoch * per_epoch;
            for batch in order.chunks(self.config.sequences_per_batch).skip(done) {
                if self.step >= last {
                    break;
                }
                let log = self.train_step(train, batch, epoch)?;
                on_step(&log);
                report.steps.push(log);
            }
            epoch += 1;
            if self.step == epoch * per_epoch || self.step == last {
                validate(&self.model, epoch, self.step, &mut report)?;
            }
        }
        Ok(report)
    }
}

/// Runs every sequence of `data` through `model` with memory carried
/// across frames, and scores each frame.
pub fn evaluate(model: &Model<f32>, data: &Dataset, options: &EvalOptions) -> Result<Evaluation> {
    let mut frames = Vec::with_capacity(data.frame_count());
    let mut depths = Vec::with_capacity(data.frame_count());
    for (si, seq) in data.sequences.iter().enumerate() {
        let inputs = prepare_sequence(&seq.samples, &options.input, options.seed, 0, si)?;
        let mut tape = Tape::new();
        let bind = model.params.bind(&mut tape, false);
        let shuffle = options.slot_shuffle.map(|f| (f, frame_seed(options.seed, 1, si, 0)));
        let outs = model.forward_sequence(&mut tape, &bind, &inputs, shuffle)?;
        for (fi, (out, sample)) in outs.iter().zip(&seq.samples).enumerate() {
            let pred = tape.value(out.depth).clone();
            let report = evaluate_frame(&pred, &sample.frame.depth, &sample.frame.edges, None)?;
            frames.push((format!("s{si:03}_f{fi:02}"), report));
            depths.push(pred);
        }
    }
    let reports: Vec<MetricReport> = frames.iter().map(|(_, r)| *r).collect();
    Ok(Evaluation {
        aggregate: MetricReport::mean(&reports)?,
        frames,
        depths,
    })
}

/// Step log as CSV.
pub fn write_step_csv(steps: &[StepLog], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in steps {
        w.serialize(s).map_err(|e| Error::Invalid(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("step log", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::scene::{DatasetConfig, SceneConfig};

    fn tiny(scenes: usize, seed: u64) -> Dataset {
        let cfg = DatasetConfig {
            scenes,
            seed,
            scene: SceneConfig {
                width: 32,
                height: 32,
                frames: 2,
                ..SceneConfig::default()
            },
            ..DatasetConfig::default()
        };
        Dataset::synthesize(&cfg).unwrap()
    }

    #[test]
    fn default_constants() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.optimizer.beta1, c.optimizer.beta2, c.optimizer.weight_decay), (6e-4, 0.9, 0.999, 1e-2));
        assert_eq!((c.epochs, c.sequences_per_batch * 4, c.clip_norm), (30, 8, 5.0));
        assert!(TrainConfig { lr: 0.0, ..c }.validate().is_err());
    }

    #[test]
    fn first_step_uses_base_lr_and_runs_are_reproducible() {
        let data = tiny(2, 1);
        let run = || {
            let model = Model::new(&ModelConfig::default(), 3).unwrap();
            let cfg = TrainConfig {
                epochs: 2,
                seed: 5,
                ..TrainConfig::default()
            };
            let mut t = Trainer::new(model, cfg).unwrap();
            let r = t.fit(&data, None, |_| {}).unwrap();
            (r, t.model.params.values().to_vec())
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a.steps.len(), 2);
        assert_eq!(a.steps[0].lr, 6e-4);
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = tiny(4, 2);
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let model = Model::new(&ModelConfig::default(), 1).unwrap();
        let mut full = Trainer::new(model.clone(), cfg.clone()).unwrap();
        let all = full.fit(&data, None, |_| {}).unwrap();
        let mut part = Trainer::new(model, TrainConfig { max_steps: Some(3), ..cfg.clone() }).unwrap();
        let first = part.fit(&data, None, |_| {}).unwrap();
        part.config.max_steps = None;
        let rest = part.fit(&data, None, |_| {}).unwrap();
        let joined: Vec<StepLog> = first.steps.into_iter().chain(rest.steps).collect();
        assert_eq!(joined, all.steps);
        assert_eq!(part.model.params.values(), full.model.params.values());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let data = tiny(1, 3);
        let model = Model::new(&ModelConfig::default(), 0).unwrap();
        let a = evaluate(&model, &data, &EvalOptions::default()).unwrap();
        let b = evaluate(&model, &data, &EvalOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frames.len(), 2);
        assert_eq!(a.frames[1].0, "s000_f01");
    }

    #[test]
    fn frame_seeds_differ() {
        let s: std::collections::HashSet<u64> = (0..4).flat_map(|e| (0..8).map(move |q| frame_seed(7, e, q, 0))).collect();
        assert_eq!(s.len(), 32);
    }
}
