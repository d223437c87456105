//! Independent reference implementations and property checks shared by
//! the oracle, invariant and acceptance targets.
#![allow(dead_code)]

use cuedepth::gating::gate_cue;
use cuedepth::guided::{guided_filter_upsample, FilterConfig};
use cuedepth::losses::si_loss;
use cuedepth::model::{depth_expectation, shuffle_slots, GateMode, MemoryBank, MemoryConfig, Model, ModelConfig};
use cuedepth::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Guided filter by explicit per-window least squares: for every window
/// the 2x2 ridge normal equations are solved directly, then each output
/// pixel averages the linear models of the windows covering it. Borders
/// replicate the edge pixel, matching the box filter's convention.
pub fn brute_force_guided(p: &[f64], g: &[f64], h: usize, w: usize, r: usize, eps: f64) -> Vec<f64> {
    let r = r as isize;
    let at = |img: &[f64], y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        img[y * w + x]
    };
    let n = ((2 * r + 1) * (2 * r + 1)) as f64;
    let mut a = vec![0.0; h * w];
    let mut b = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut sg, mut sp, mut sgg, mut sgp) = (0.0, 0.0, 0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (gv, pv) = (at(g, y + dy, x + dx), at(p, y + dy, x + dx));
                    sg += gv;
                    sp += pv;
                    sgg += gv * gv;
                    sgp += gv * pv;
                }
            }
            // [sgg + n eps, sg; sg, n] [a; b] = [sgp; sp]
            let (m00, m01, m11) = (sgg + n * eps, sg, n);
            let det = m00 * m11 - m01 * m01;
            let i = y as usize * w + x as usize;
            a[i] = (m11 * sgp - m01 * sp) / det;
            b[i] = (m00 * sp - m01 * sgp) / det;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut ma, mut mb) = (0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    ma += at(&a, y + dy, x + dx);
                    mb += at(&b, y + dy, x + dx);
                }
            }
            let i = y as usize * w + x as usize;
            out[i] = (ma * g[i] + mb) / n;
        }
    }
    out
}

/// Max-abs gap between the library's upsampling filter and the brute-force
/// oracle on one random 32x32 case (8x8 low-resolution depth).
pub fn guided_oracle_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (32, 32);
    let d_low = random(&mut rng, &[8, 8, 1], 0.5, 20.0);
    let guide = random(&mut rng, &[h, w, 1], 0.0, 1.0);
    let cfg = FilterConfig::default();
    let mut tape = Tape::new();
    let dv = tape.input(d_low);
    let gv = tape.input(guide.clone());
    let up = tape.resize_bilinear(dv, h, w).unwrap();
    let got = guided_filter_upsample(&mut tape, dv, gv, &cfg, None).unwrap();
    let want = brute_force_guided(tape.value(up).data(), guide.data(), h, w, cfg.radius, cfg.epsilon);
    tape.value(got)
        .data()
        .iter()
        .zip(&want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Max-abs gap between the softmax expectation and a direct sum.
pub fn expectation_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k) = (50, 64);
    let scores = random(&mut rng, &[n, k], -6.0, 6.0);
    let centres = random(&mut rng, &[1, k], 0.5, 20.0);
    let mut tape = Tape::new();
    let s = tape.input(scores.clone());
    let c = tape.input(centres.clone());
    let d = depth_expectation(&mut tape, s, c).unwrap();
    let got = tape.value(d).data().to_vec();
    (0..n)
        .map(|i| {
            let row = &scores.data()[i * k..(i + 1) * k];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            let want: f64 = row.iter().zip(centres.data()).map(|(v, c)| v.exp() / z * c).sum();
            (got[i] - want).abs()
        })
        .fold(0.0, f64::max)
}

/// Two noisy observations of one field with known per-pixel log-variances.
/// Returns (mse of cue 1, mse of cue 2, mse of the precision-weighted
/// combination built from the gated cues).
pub fn fusion_testbed(side: usize, seed: u64) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = side * side;
    let truth: Vec<f64> = (0..n).map(|i| ((i % side) as f64 * 0.1).sin() + ((i / side) as f64 * 0.07).cos()).collect();
    let observe = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        let cue: Vec<f64> = truth
            .iter()
            .zip(&sigma)
            .map(|(t, s)| t + Normal::new(0.0, (s / 2.0).exp()).unwrap().sample(rng))
            .collect();
        (Tensor::new(&[side, side, 1], cue).unwrap(), Tensor::new(&[side, side, 1], sigma).unwrap())
    };
    let (c1, s1) = observe(&mut rng, -3.0, 1.0);
    let (c2, s2) = observe(&mut rng, -1.0, 2.0);
    let g1 = gate_cue(&c1, &s1).unwrap();
    let g2 = gate_cue(&c2, &s2).unwrap();
    let ones = Tensor::full(&[side, side, 1], 1.0);
    let w1 = gate_cue(&ones, &s1).unwrap();
    let w2 = gate_cue(&ones, &s2).unwrap();
    let mse = |v: &mut dyn Iterator<Item = f64>| v.zip(&truth).map(|(a, t)| (a - t).powi(2)).sum::<f64>() / n as f64;
    let fused = (0..n).map(|i| (g1.data()[i] + g2.data()[i]) / (w1.data()[i] + w2.data()[i]));
    (
        mse(&mut c1.data().iter().copied()),
        mse(&mut c2.data().iter().copied()),
        mse(&mut fused.into_iter()),
    )
}

/// Small f64 model whose memory bank is exercised directly.
pub fn memory_model(seed: u64, gate: GateMode) -> Model<f64> {
    let cfg = ModelConfig {
        stem_hidden: 4,
        stem_channels: 8,
        v2_heads: 2,
        v3_heads: 2,
        memory: MemoryConfig {
            slots: 6,
            dim: 5,
            top_k: 3,
            gate,
            ..MemoryConfig::default()
        },
        ..ModelConfig::default()
    };
    let mut m = Model::new(&cfg, seed).unwrap();
    // A non-zero gate weight so eta depends on the tokens.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e);
    let gw = m.params.get_mut(m.memory.gate_weight);
    gw.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    m
}

/// Runs `writes` random writes and checks after each that every memory
/// entry lies between its previous value and the write target.
pub fn convex_stream_holds(model: &Model<f64>, seed: u64, writes: usize) -> bool {
    let bank: &MemoryBank = &model.memory;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let bind = model.params.bind(&mut tape, false);
    let mut memory = tape.input(random(&mut rng, &[bank.slots, bank.dim], -2.0, 2.0));
    let c = model.config.stem_channels;
    for _ in 0..writes {
        let n = rng.random_range(4..20);
        let tokens = tape.input(random(&mut rng, &[n, c], -3.0, 3.0));
        let queries = tape.input(random(&mut rng, &[n, bank.dim], -3.0, 3.0));
        let read = bank.read(&mut tape, &bind, memory, queries).unwrap();
        let w = bank.write(&mut tape, &bind, memory, tokens, read.attention, GateMode::Learned).unwrap();
        let (before, target, after) = (tape.value(memory), tape.value(w.target), tape.value(w.memory));
        let eta = tape.value(w.gate).item();
        if !(0.0..=1.0).contains(&eta) {
            return false;
        }
        for ((m, t), a) in before.data().iter().zip(target.data()).zip(after.data()) {
            let slack = 1e-12 * (1.0 + m.abs().max(t.abs()));
            if *a < m.min(*t) - slack || *a > m.max(*t) + slack {
                return false;
            }
        }
        memory = w.memory;
    }
    true
}

/// Gradient reaching the gate weight through one write under `mode`.
pub fn gate_weight_gradient(mode: GateMode, seed: u64) -> Vec<f64> {
    let model = memory_model(seed, mode);
    let bank = &model.memory;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let bind = model.params.bind(&mut tape, true);
    let memory = tape.input(random(&mut rng, &[bank.slots, bank.dim], -1.0, 1.0));
    let tokens = tape.input(random(&mut rng, &[10, model.config.stem_channels], -1.0, 1.0));
    let queries = tape.input(random(&mut rng, &[10, bank.dim], -1.0, 1.0));
    let read = bank.read(&mut tape, &bind, memory, queries).unwrap();
    let w = bank.write(&mut tape, &bind, memory, tokens, read.attention, mode).unwrap();
    let sq = tape.square(w.memory).unwrap();
    let loss = tape.sum(sq).unwrap();
    let grads = tape.backward(loss).unwrap();
    let gw = bind.var(bank.gate_weight);
    grads.get_or_zeros(gw, tape.shape(gw)).data().to_vec()
}

/// Whether shuffling keeps the multiset of slot rows.
pub fn shuffle_keeps_multiset(slots: usize, dim: usize, fraction: f64, seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = random(&mut rng, &[slots, dim], -1.0, 1.0);
    let s = shuffle_slots(&m, fraction, seed).unwrap();
    let rows = |t: &Tensor<f64>| {
        let mut r: Vec<Vec<u64>> = t.data().chunks(dim).map(|c| c.iter().map(|v| v.to_bits()).collect()).collect();
        r.sort();
        r
    };
    rows(&m) == rows(&s)
}

/// `|si(s * pred) - si(pred)|` with variance weight 1.
pub fn si_scale_gap(pred: &Tensor<f64>, gt: &Tensor<f64>, scale: f64) -> f64 {
    let mut tape = Tape::new();
    let p = tape.input(pred.clone());
    let a = si_loss(&mut tape, p, gt, 1.0, None).unwrap();
    let scaled = tape.scale(p, scale).unwrap();
    let b = si_loss(&mut tape, scaled, gt, 1.0, None).unwrap();
    (tape.value(a).item() - tape.value(b).item()).abs()
}
