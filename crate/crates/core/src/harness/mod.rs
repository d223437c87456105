//! Run orchestration behind the command-line tool: dataset synthesis,
//! training, evaluation, ablations, memory probes and run manifests.

mod ablation;
mod config;
mod gradsuite;
mod probe;

pub use ablation::{write_ablation_table, AblationKind, AblationRow, AblationSpec};
pub use config::{RunConfig, ValidationConfig};
pub use gradsuite::{gradient_suite, suite_model, GradCheckRow, SUITE_SIZE};
pub use probe::{probe_memory, repeated, with_blank, write_probe_csv, writes_non_increasing, ProbeFrame};

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{write_metrics_csv, MetricReport};
use crate::model::{InputOptions, Model};
use crate::scene::{read_dataset, read_manifest, write_dataset, Dataset, MANIFEST_FILE};
use crate::tensor::Tensor;
use crate::train::{
    evaluate, load_checkpoint, save_checkpoint, write_step_csv, Checkpoint, EvalOptions, Evaluation, TrainReport,
    Trainer,
};

pub const TRAIN_SPLIT: &str = "train";
pub const VAL_SPLIT: &str = "val";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

/// Self-describing record written next to every run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: RunConfig,
    pub seed: u64,
    /// Digest of the running executable.
    pub code_hash: String,
    /// Digest of the dataset files read or written, when any.
    pub dataset_hash: Option<String>,
    pub notes: Vec<String>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn code_hash() -> String {
    std::env::current_exe()
        .and_then(fs::read)
        .map(|b| hex(&Sha256::digest(&b)[..16]))
        .unwrap_or_else(|_| "unknown".into())
}

/// Digest of a dataset directory: the manifest, then every array file in
/// manifest order.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let manifest = read_manifest(dir)?;
    let mut h = Sha256::new();
    let mpath = dir.join(MANIFEST_FILE);
    h.update(fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?);
    for scene in &manifest.scenes {
        for frame in &scene.frames {
            for a in &frame.arrays {
                let p = dir.join(&a.file);
                h.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
            }
        }
    }
    Ok(hex(&h.finalize()[..16]))
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        let mut notes = Vec::new();
        let input = &config.train.input;
        if input.edge_mask > 0.0 {
            notes.push(format!(
                "edge mask zeroes {} of edge pixels and sets their log-variance to {}",
                input.edge_mask, input.edge_mask_log_variance
            ));
        }
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: config.clone(),
            seed: config.train.seed,
            code_hash: code_hash(),
            dataset_hash: None,
            notes,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RUN_MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::format(&path, e.to_string()))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes training and validation sets under `out/train` and `out/val`,
/// the depth prior as CSV and a run manifest. Refuses a non-empty `out`
/// unless `force`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path, force: bool) -> Result<RunManifest> {
    cfg.validate()?;
    if out.exists() && !force && fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some() {
        return Err(Error::Invalid(format!("{} exists; pass force to overwrite", out.display())));
    }
    ensure_dir(out)?;
    let train = Dataset::synthesize(&cfg.dataset)?;
    write_dataset(&train, &out.join(TRAIN_SPLIT))?;
    let val = Dataset::synthesize(&cfg.validation_dataset())?;
    write_dataset(&val, &out.join(VAL_SPLIT))?;

    let mut w = csv::Writer::from_writer(create_file(&out.join("prior.csv"))?);
    let err = |e: csv::Error| Error::Invalid(format!("csv: {e}"));
    w.write_record(["bin", "lower_m", "upper_m", "probability"]).map_err(err)?;
    let (lo, hi) = train.prior.depth_range;
    let k = train.prior.probs.len();
    let edge = |i: usize| lo * (hi / lo).powf(i as f64 / k as f64);
    for (i, p) in train.prior.probs.iter().enumerate() {
        w.write_record([i.to_string(), edge(i).to_string(), edge(i + 1).to_string(), p.to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(out.join("prior.csv"), e))?;

    let mut m = RunManifest::new("synth", cfg);
    m.seed = cfg.dataset.seed;
    m.dataset_hash = Some(dataset_hash(&out.join(TRAIN_SPLIT))?);
    m.write(out)?;
    Ok(m)
}

/// Loads both splits and checks them against the model configuration.
pub fn load_splits(data: &Path, cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let train = read_dataset(&data.join(TRAIN_SPLIT))?;
    let val = read_dataset(&data.join(VAL_SPLIT))?;
    check_compatible(&train, &cfg.model)?;
    Ok((train, val))
}

fn check_compatible(data: &Dataset, model: &crate::model::ModelConfig) -> Result<()> {
    if data.prior.probs.len() != model.bins.bins {
        return Err(Error::Checkpoint(format!(
            "dataset prior has {} bins, model {}",
            data.prior.probs.len(),
            model.bins.bins
        )));
    }
    Ok(())
}

/// Trains a fresh model (or resumes `resume`) and writes the checkpoint,
/// step log, validation log and manifest into `out`.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    let (train, val) = load_splits(data, cfg)?;
    ensure_dir(out)?;
    let mut trainer = match resume {
        Some(p) => load_checkpoint(p)?.trainer(cfg.train.clone())?,
        None => Trainer::new(Model::new(&cfg.model, cfg.train.seed)?, cfg.train.clone())?,
    };
    let report = trainer.fit(&train, Some(&val), |s| {
        if s.step % 32 == 0 {
            log::info!("step {} lr {:.2e} loss {:.4}", s.step, s.lr, s.loss);
        }
    })?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &Checkpoint::from_trainer(&trainer))?;
    write_step_csv(&report.steps, create_file(&out.join("steps.csv"))?)?;
    let rows: Vec<(String, MetricReport)> = report
        .validation
        .iter()
        .map(|v| (format!("epoch{:02}_step{}", v.epoch, v.step), v.report))
        .collect();
    if !rows.is_empty() {
        write_metrics_csv(&rows, create_file(&out.join("validation.csv"))?)?;
    }
    let mut m = RunManifest::new("train", cfg);
    m.dataset_hash = Some(dataset_hash(&data.join(TRAIN_SPLIT))?);
    m.write(out)?;
    Ok(report)
}

/// Model stored in a checkpoint file.
pub fn load_model(path: &Path) -> Result<Model<f32>> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("no checkpoint at {}", path.display())));
    }
    load_checkpoint(path)?.model()
}

/// Evaluates a checkpoint on one split; writes per-frame and aggregate
/// CSV, PNG dumps of the first `pngs` frames, and a manifest.
pub fn cmd_eval(ckpt: &Path, data: &Path, split: &str, out: &Path, options: &EvalOptions, pngs: usize) -> Result<Evaluation> {
    let model = load_model(ckpt)?;
    let dir = data.join(split);
    let set = read_dataset(&dir)?;
    check_compatible(&set, &model.config)?;
    ensure_dir(out)?;
    let ev = evaluate(&model, &set, options)?;
    write_metrics_csv(&ev.frames, create_file(&out.join("metrics.csv"))?)?;
    let samples = set.sequences.iter().flat_map(|s| &s.samples);
    for ((label, _), (pred, sample)) in ev.frames.iter().zip(ev.depths.iter().zip(samples)).take(pngs) {
        let range = model.config.bins.depth_range;
        write_depth_png(&out.join(format!("{label}_depth.png")), pred, range)?;
        write_depth_png(&out.join(format!("{label}_gt.png")), &sample.frame.depth, range)?;
        write_error_png(&out.join(format!("{label}_error.png")), pred, &sample.frame.depth)?;
    }
    let cfg = RunConfig {
        model: model.config.clone(),
        train: TrainConfig {
            input: options.input.clone(),
            seed: options.seed,
            ..load_checkpoint(ckpt)?.train_config.unwrap_or_default()
        },
        ..RunConfig::default()
    };
    let mut m = RunManifest::new("eval", &cfg);
    m.dataset_hash = Some(dataset_hash(&dir)?);
    if let Some(f) = options.slot_shuffle {
        m.notes.push(format!("memory slots shuffled at fraction {f}"));
    }
    m.write(out)?;
    Ok(ev)
}

use crate::train::TrainConfig;

/// Runs each ablation against `baseline`, retraining where the ablation
/// changes training. Returns the baseline's metrics and one row per spec.
pub fn run_ablations(
    cfg: &RunConfig,
    train: &Dataset,
    val: &Dataset,
    baseline: &Model<f32>,
    specs: &[AblationSpec],
) -> Result<(MetricReport, Vec<AblationRow>)> {
    let seed = cfg.train.seed;
    let base = evaluate(baseline, val, &EvalOptions { seed, ..EvalOptions::default() })?.aggregate;
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        spec.validate()?;
        log::info!("ablation {spec}");
        let report = if spec.kind.retrains() {
            let mut c = cfg.clone();
            spec.apply_to_config(&mut c);
            let (tr, va) = if c.dataset != cfg.dataset {
                (Dataset::synthesize(&c.dataset)?, Dataset::synthesize(&c.validation_dataset())?)
            } else {
                (train.clone(), val.clone())
            };
            let mut t = Trainer::new(Model::new(&c.model, seed)?, c.train.clone())?;
            t.fit(&tr, None, |_| {})?;
            evaluate(&t.model, &spec.eval_dataset(&va), &spec.eval_options(seed))?.aggregate
        } else {
            evaluate(baseline, &spec.eval_dataset(val), &spec.eval_options(seed))?.aggregate
        };
        rows.push(AblationRow {
            name: spec.to_string(),
            retrained: spec.kind.retrains(),
            report,
        });
    }
    Ok((base, rows))
}

pub fn cmd_ablate(cfg: &RunConfig, data: &Path, baseline: &Path, specs: &[AblationSpec], out: &Path) -> Result<(MetricReport, Vec<AblationRow>)> {
    cfg.validate()?;
    let model = load_model(baseline)?;
    let (train, val) = load_splits(data, cfg)?;
    ensure_dir(out)?;
    let (base, rows) = run_ablations(cfg, &train, &val, &model, specs)?;
    write_ablation_table(&base, &rows, create_file(&out.join("ablation.csv"))?)?;
    let mut m = RunManifest::new("ablate", cfg);
    m.dataset_hash = Some(dataset_hash(&data.join(VAL_SPLIT))?);
    m.notes.extend(specs.iter().map(|s| format!("ablation {s}")));
    if specs.iter().any(|s| s.kind == AblationKind::EdgeMask) {
        m.notes.push(format!(
            "edge mask sets masked log-variance to {}",
            InputOptions::default().edge_mask_log_variance
        ));
    }
    m.write(out)?;
    Ok((base, rows))
}

/// Which frames the memory probe runs on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProbeMode {
    /// The sequence as stored.
    Plain,
    /// Its first frame repeated this many times.
    Repeat(usize),
    /// A blank frame inserted at this position.
    Blank(usize),
}

pub fn cmd_probe_memory(ckpt: &Path, data: &Path, split: &str, sequence: usize, mode: ProbeMode, out: &Path) -> Result<Vec<ProbeFrame>> {
    let model = load_model(ckpt)?;
    let set = read_dataset(&data.join(split))?;
    let seq = set
        .sequences
        .get(sequence)
        .ok_or_else(|| Error::Invalid(format!("sequence {sequence} of {}", set.sequences.len())))?;
    let samples = match mode {
        ProbeMode::Plain => seq.samples.clone(),
        ProbeMode::Repeat(n) => repeated(&seq.samples[0], n),
        ProbeMode::Blank(at) => with_blank(&seq.samples, at)?,
    };
    let rows = probe_memory(&model, &samples, &InputOptions::default(), 0)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    write_probe_csv(&rows, create_file(out)?)?;
    Ok(rows)
}

fn write_gray_png(path: &Path, h: usize, w: usize, pixels: Vec<u8>) -> Result<()> {
    let file = create_file(path)?;
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer.write_image_data(&pixels).map_err(|e| Error::format(path, e.to_string()))
}

fn hw(t: &Tensor<f32>, path: &Path) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w, 1] => Ok((*h, *w)),
        s => Err(Error::format(path, format!("expected [H, W, 1], got {s:?}"))),
    }
}

/// Log depth over `range` as 8-bit grey, near = bright.
pub fn write_depth_png(path: &Path, depth: &Tensor<f32>, (lo, hi): (f64, f64)) -> Result<()> {
    let (h, w) = hw(depth, path)?;
    let span = (hi / lo).ln();
    let px = depth
        .data()
        .iter()
        .map(|&d| {
            let x = ((d as f64).max(lo).ln() - lo.ln()) / span;
            (255.0 * (1.0 - x.clamp(0.0, 1.0))).round() as u8
        })
        .collect();
    write_gray_png(path, h, w, px)
}

/// Relative error `|pred - gt| / gt`, saturating at 1, as 8-bit grey.
pub fn write_error_png(path: &Path, pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<()> {
    let (h, w) = hw(pred, path)?;
    let px = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (255.0 * ((p - g).abs() / g).clamp(0.0, 1.0)).round() as u8)
        .collect();
    write_gray_png(path, h, w, px)
}

/// Standard output locations of a run directory.
pub fn checkpoint_path(run: &Path) -> PathBuf {
    run.join(CHECKPOINT_FILE)
}
