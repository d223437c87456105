use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::depth_metrics;
use crate::model::{blank_sample, prepare_frame, slot_entropy, slot_mass, write_magnitude, InputOptions, Model};
use crate::scene::Sample;
use crate::tensor::Tape;
use crate::train::frame_seed;

/// Memory activity of one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeFrame {
    pub frame: usize,
    pub blank: bool,
    /// Write gate of each context block.
    pub eta: Vec<f64>,
    /// Gate times the norm of the written content, combined over the context blocks.
    pub write_magnitude: f64,
    /// Read-attention entropy of each context block.
    pub entropy: Vec<f64>,
    /// Read-attention mass per slot, averaged over blocks.
    pub slot_mass: Vec<f64>,
    pub abs_rel: f64,
    /// Mean absolute log-depth change from the previous frame.
    pub depth_drift: f64,
}

/// `count` copies of `sample`.
pub fn repeated(sample: &Sample, count: usize) -> Vec<Sample> {
    vec![sample.clone(); count]
}

/// `samples` with a blank copy of the frame before `at` inserted there.
pub fn with_blank(samples: &[Sample], at: usize) -> Result<Vec<Sample>> {
    if at == 0 || at > samples.len() {
        return Err(Error::Invalid(format!("blank position {at} outside 1..={}", samples.len())));
    }
    let mut out = samples.to_vec();
    out.insert(at, blank_sample(&samples[at - 1]));
    Ok(out)
}

/// Runs one sequence and records per-frame memory activity. Frames whose
/// RGB is all zeros are marked blank.
pub fn probe_memory(model: &Model<f32>, samples: &[Sample], options: &InputOptions, seed: u64) -> Result<Vec<ProbeFrame>> {
    if !model.memory_enabled() {
        return Err(Error::Invalid("memory probe needs a model with memory enabled".into()));
    }
    if samples.len() < 2 {
        return Err(Error::Invalid(format!("memory probe needs at least 2 frames, got {}", samples.len())));
    }
    let mut tape = Tape::new();
    let bind = model.params.bind(&mut tape, false);
    let mut memory = model.memory.reset(&mut tape, &bind);
    let mut prev_depth: Option<Vec<f64>> = None;
    let mut rows = Vec::with_capacity(samples.len());
    for (t, sample) in samples.iter().enumerate() {
        let input = prepare_frame(sample, options, frame_seed(seed, 0, 0, t))?;
        let out = model.forward_frame(&mut tape, &bind, &input, Some(memory))?;
        memory = out.memory.expect("memory enabled");
        // Several context blocks write per frame; combine their gated writes.
        let write_size = out
            .writes
            .iter()
            .map(|w| write_magnitude(tape.value(w.gate), tape.value(w.target)).powi(2))
            .sum::<f64>()
            .sqrt();
        let eta = out.writes.iter().map(|w| tape.value(w.gate).item() as f64).collect();
        let entropy = out.reads.iter().map(|r| slot_entropy(tape.value(r.attention))).collect();
        let mut mass = vec![0.0; model.memory.slots];
        for r in &out.reads {
            for (m, v) in mass.iter_mut().zip(slot_mass(tape.value(r.attention))) {
                *m += v / out.reads.len() as f64;
            }
        }
        let depth = tape.value(out.depth);
        let logd: Vec<f64> = depth.data().iter().map(|&v| (v as f64).ln()).collect();
        let depth_drift = prev_depth.as_ref().map_or(0.0, |p| {
            p.iter().zip(&logd).map(|(a, b)| (a - b).abs()).sum::<f64>() / logd.len() as f64
        });
        rows.push(ProbeFrame {
            frame: t,
            blank: sample.frame.rgb.data().iter().all(|&v| v == 0.0),
            eta,
            write_magnitude: write_size,
            entropy,
            slot_mass: mass,
            abs_rel: depth_metrics(depth, &sample.frame.depth, None)?.abs_rel,
            depth_drift,
        });
        prev_depth = Some(logd);
    }
    Ok(rows)
}

/// Whether write magnitudes never increase along the trace, up to `tol`.
pub fn writes_non_increasing(rows: &[ProbeFrame], tol: f64) -> bool {
    rows.windows(2).all(|w| w[1].write_magnitude <= w[0].write_magnitude + tol)
}

pub fn write_probe_csv(rows: &[ProbeFrame], out: impl Write) -> Result<()> {
    let Some(first) = rows.first() else {
        return Err(Error::Invalid("empty probe trace".into()));
    };
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Invalid(format!("csv: {e}"));
    let mut header = vec!["frame".to_string(), "blank".into()];
    header.extend((0..first.eta.len()).map(|b| format!("eta_b{b}")));
    header.push("write_magnitude".into());
    header.extend((0..first.entropy.len()).map(|b| format!("entropy_b{b}")));
    header.extend(["abs_rel".into(), "depth_drift".into()]);
    header.extend((0..first.slot_mass.len()).map(|s| format!("mass_s{s}")));
    w.write_record(&header).map_err(err)?;
    for r in rows {
        let mut rec = vec![r.frame.to_string(), r.blank.to_string()];
        rec.extend(r.eta.iter().map(|v| v.to_string()));
        rec.push(r.write_magnitude.to_string());
        rec.extend(r.entropy.iter().map(|v| v.to_string()));
        rec.extend([r.abs_rel.to_string(), r.depth_drift.to_string()]);
        rec.extend(r.slot_mass.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("probe csv", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::scene::{Dataset, DatasetConfig, SceneConfig};

    fn data() -> Dataset {
        let cfg = DatasetConfig {
            scenes: 1,
            scene: SceneConfig {
                width: 32,
                height: 32,
                frames: 3,
                ..SceneConfig::default()
            },
            ..DatasetConfig::default()
        };
        Dataset::synthesize(&cfg).unwrap()
    }

    #[test]
    fn trace_shapes_and_blank_marker() {
        let d = data();
        let model = Model::new(&ModelConfig::default(), 0).unwrap();
        let seq = with_blank(&d.sequences[0].samples, 2).unwrap();
        let rows = probe_memory(&model, &seq, &InputOptions::default(), 0).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows.iter().map(|r| r.blank).collect::<Vec<_>>(), [false, false, true, false]);
        assert!(rows.iter().all(|r| r.eta.len() == 2 && r.slot_mass.len() == 32));
        assert!((rows[0].eta[0] - 0.1).abs() < 1e-6);
        let mass: f64 = rows[1].slot_mass.iter().sum();
        assert!((mass - 1.0).abs() < 1e-5);
        let mut buf = Vec::new();
        write_probe_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }

    #[test]
    #[ignore = "does not hold: the second write is larger at initialisation (16.23 then 16.36)"]
    fn second_identical_frame_writes_no_more() {
        let d = data();
        let model = Model::new(&ModelConfig::default(), 1).unwrap();
        let rows = probe_memory(&model, &repeated(&d.sequences[0].samples[0], 2), &InputOptions::default(), 0).unwrap();
        assert!(writes_non_increasing(&rows, 0.0), "{:?}", rows.iter().map(|r| r.write_magnitude).collect::<Vec<_>>());
    }

    #[test]
    fn preconditions() {
        let d = data();
        let model = Model::new(&ModelConfig::default(), 0).unwrap();
        let one = &d.sequences[0].samples[..1];
        assert!(probe_memory(&model, one, &InputOptions::default(), 0).is_err());
        let mut cfg = ModelConfig::default();
        cfg.memory.enabled = false;
        let off = Model::new(&cfg, 0).unwrap();
        assert!(probe_memory(&off, &d.sequences[0].samples, &InputOptions::default(), 0).is_err());
        assert!(with_blank(one, 0).is_err());
    }
}
