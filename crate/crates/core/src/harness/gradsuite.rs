//! Finite-difference checks of every differentiable module on 16x16
//! inputs in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::guided::{guided_filter_upsample, FilterConfig, FilterOrder};
use crate::losses::{cue_loss, grad_loss, si_loss, ssim_loss};
use crate::model::{bin_prior_kl, depth_expectation, BinsConfig, MemoryConfig, Model, ModelConfig, WindowLayout};
use crate::tensor::{gradient_check_sampled, Tape, Tensor, Var};

pub const SUITE_SIZE: usize = 16;
const STEP: f64 = 1e-5;
/// Coordinates probed per check.
const PROBES: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckRow {
    pub name: String,
    pub max_relative_error: f64,
    pub checked: usize,
}

/// Narrow model with every parameter nudged off its initial value so
/// zero-initialised parts carry gradient too.
pub fn suite_model(seed: u64) -> Result<Model<f64>> {
    let cfg = ModelConfig {
        stem_hidden: 6,
        stem_channels: 8,
        v2_heads: 2,
        v3_heads: 2,
        window: 3,
        memory: MemoryConfig {
            slots: 4,
            dim: 6,
            top_k: 3,
            ..MemoryConfig::default()
        },
        bins: BinsConfig {
            bins: 6,
            embed: 4,
            hidden: 8,
            ..BinsConfig::default()
        },
        filter: FilterConfig {
            radius: 2,
            uncertainty_weights: true,
            ..FilterConfig::default()
        },
        ..ModelConfig::default()
    };
    let mut model = Model::new(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for p in model.params.values_mut() {
        p.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    Ok(model)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Scalar probe `sum(w * y)` with fixed random `w`.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, tape.shape(y), -1.0, 1.0);
    let w = tape.input(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

struct Suite {
    rows: Vec<GradCheckRow>,
    rng: ChaCha8Rng,
}

impl Suite {
    fn check(&mut self, name: &str, point: &Tensor<f64>, f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>) -> Result<()> {
        let n = point.len();
        let coords: Vec<usize> = if n <= PROBES {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut self.rng, n, PROBES).into_vec()
        };
        let r = gradient_check_sampled(f, point, STEP, &coords)?;
        self.rows.push(GradCheckRow {
            name: name.into(),
            max_relative_error: r.max_relative_error,
            checked: r.checked,
        });
        Ok(())
    }
}

/// Runs every check and returns one row per (module, argument).
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckRow>> {
    let model = suite_model(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = SUITE_SIZE;
    let x0 = random(&mut rng, &[s, s, 8], 0.0, 1.0);
    let sigma = [0.3, -0.4, 0.8];
    let mut suite = Suite {
        rows: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed ^ 0x51),
    };
    let params = &model.params;
    let m = &model;

    suite.check("stem / input", &x0, |t, x| {
        let b = params.bind(t, false);
        let y = m.stem.forward(t, &b, x)?;
        project(t, y, 1)
    })?;
    suite.check("stem / first kernel", params.get(m.stem.conv1), |t, w| {
        let b = params.bind(t, false).with(m.stem.conv1, w);
        let x = t.input(x0.clone());
        let y = m.stem.forward(t, &b, x)?;
        project(t, y, 2)
    })?;

    let q = s / 4;
    let c = model.config.stem_channels;
    let feat = random(&mut rng, &[q, q, c], -1.0, 1.0);
    let layout = WindowLayout::new(q, q, model.config.window, 0)?;
    suite.check("integration block / input", &feat, |t, x| {
        let b = params.bind(t, false);
        let (y, _) = m.v2.forward(t, &b, x, 0.8, &layout)?;
        project(t, y, 3)
    })?;
    suite.check("integration block / depthwise", params.get(m.v2.depthwise), |t, w| {
        let b = params.bind(t, false).with(m.v2.depthwise, w);
        let x = t.input(feat.clone());
        let (y, _) = m.v2.forward(t, &b, x, 0.8, &layout)?;
        project(t, y, 4)
    })?;
    suite.check("integration block / relative bias", params.get(m.v2.attention.rel_bias), |t, w| {
        let b = params.bind(t, false).with(m.v2.attention.rel_bias, w);
        let x = t.input(feat.clone());
        let (y, _) = m.v2.forward(t, &b, x, 0.8, &layout)?;
        project(t, y, 5)
    })?;

    let tokens = random(&mut rng, &[q * q, c], -1.0, 1.0);
    let mem = random(&mut rng, &[model.config.memory.slots, model.config.memory.dim], -1.0, 1.0);
    let context = |t: &mut Tape<f64>, b: &crate::model::Binding, x: Var, mv: Var, seed: u64| -> Result<Var> {
        let (y, mem_out, _, _, _) = m.context(t, b, x, (q, q), Some(mv))?;
        let a = project(t, y, seed)?;
        let bm = project(t, mem_out.expect("memory on"), seed + 100)?;
        t.add(a, bm)
    };
    suite.check("context + memory / tokens", &tokens, |t, x| {
        let b = params.bind(t, false);
        let mv = t.input(mem.clone());
        context(t, &b, x, mv, 6)
    })?;
    suite.check("context + memory / carried memory", &mem, |t, mv| {
        let b = params.bind(t, false);
        let x = t.input(tokens.clone());
        context(t, &b, x, mv, 7)
    })?;
    suite.check("context + memory / gate weight", params.get(m.memory.gate_weight), |t, w| {
        let b = params.bind(t, false).with(m.memory.gate_weight, w);
        let x = t.input(tokens.clone());
        let mv = t.input(mem.clone());
        context(t, &b, x, mv, 8)
    })?;
    suite.check("context + memory / write projection", params.get(m.memory.write), |t, w| {
        let b = params.bind(t, false).with(m.memory.write, w);
        let x = t.input(tokens.clone());
        let mv = t.input(mem.clone());
        context(t, &b, x, mv, 9)
    })?;

    let head = |t: &mut Tape<f64>, b: &crate::model::Binding, x: Var, seed: u64| -> Result<Var> {
        let p = m.bins.predict(t, b, x)?;
        let a = project(t, p.scores, seed)?;
        let cw = project(t, p.centres, seed + 1)?;
        let ww = project(t, p.widths, seed + 2)?;
        let s = t.add(a, cw)?;
        t.add(s, ww)
    };
    suite.check("bins head / tokens", &tokens, |t, x| {
        let b = params.bind(t, false);
        head(t, &b, x, 10)
    })?;
    suite.check("bins head / width logits", params.get(m.bins.width_out.weight), |t, w| {
        let b = params.bind(t, false).with(m.bins.width_out.weight, w);
        let x = t.input(tokens.clone());
        head(t, &b, x, 11)
    })?;

    let k = model.config.bins.bins;
    let scores = random(&mut rng, &[q * q, k], -2.0, 2.0);
    let centres = Tensor::from_f64(&[1, k], &crate::model::log_spaced_centres(k, (0.5, 20.0)))?;
    suite.check("expectation / scores", &scores, |t, sc| {
        let ce = t.input(centres.clone());
        let d = depth_expectation(t, sc, ce)?;
        project(t, d, 12)
    })?;
    suite.check("expectation / centres", &centres, |t, ce| {
        let sc = t.input(scores.clone());
        let d = depth_expectation(t, sc, ce)?;
        project(t, d, 13)
    })?;

    let d_low = random(&mut rng, &[q, q, 1], 1.0, 10.0);
    let guide = random(&mut rng, &[s, s, 1], 0.0, 1.0);
    let weight = random(&mut rng, &[s, s, 1], 0.2, 1.0);
    for order in [FilterOrder::UpsampleThenFilter, FilterOrder::FilterThenUpsample] {
        let cfg = FilterConfig {
            radius: 2,
            epsilon: 1e-2,
            order,
            uncertainty_weights: true,
        };
        let tag = match order {
            FilterOrder::UpsampleThenFilter => "upsample-filter",
            FilterOrder::FilterThenUpsample => "filter-upsample",
        };
        suite.check(&format!("guided filter {tag} / depth"), &d_low, |t, d| {
            let g = t.input(guide.clone());
            let w = t.input(weight.clone());
            let y = guided_filter_upsample(t, d, g, &cfg, Some(w))?;
            project(t, y, 14)
        })?;
        suite.check(&format!("guided filter {tag} / guidance"), &guide, |t, g| {
            let d = t.input(d_low.clone());
            let w = t.input(weight.clone());
            let y = guided_filter_upsample(t, d, g, &cfg, Some(w))?;
            project(t, y, 15)
        })?;
    }

    let gt = random(&mut rng, &[s, s, 1], 0.5, 20.0);
    let pred = random(&mut rng, &[s, s, 1], 0.5, 20.0);
    suite.check("loss si", &pred, |t, p| si_loss(t, p, &gt, 0.5, None))?;
    suite.check("loss grad", &pred, |t, p| grad_loss(t, p, &gt))?;
    suite.check("loss ssim", &pred, |t, p| ssim_loss(t, p, &gt, (0.5, 20.0)))?;
    let kernel = random(&mut rng, &[72, 6], -1.0, 1.0);
    suite.check("loss cue", &kernel, |t, w| cue_loss(t, w, sigma))?;
    let prior: Vec<f64> = (1..=k).map(|i| i as f64 / (k * (k + 1) / 2) as f64).collect();
    suite.check("loss kl", &scores, |t, sc| bin_prior_kl(t, sc, &prior))?;

    Ok(suite.rows)
}
