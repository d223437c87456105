use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    generate_scene, render_sequence, synthesize_cues, CueObservation, CueSet, NoiseConfig, Pose,
    RenderedFrame, Scene, SceneConfig,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;
/// Mass spread uniformly over all bins so no bin has zero prior.
const PRIOR_SMOOTHING: f64 = 0.01;

/// Everything needed to regenerate a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub scenes: usize,
    pub seed: u64,
    pub bins: usize,
    pub scene: SceneConfig,
    pub noise: NoiseConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scenes: 64,
            seed: 0,
            bins: 64,
            scene: SceneConfig::default(),
            noise: NoiseConfig::default(),
        }
    }
}

/// Smoothed histogram of ground-truth depth over log-spaced bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthPrior {
    pub depth_range: (f64, f64),
    pub probs: Vec<f64>,
}

impl DepthPrior {
    pub fn from_depths<'a>(
        depths: impl IntoIterator<Item = &'a f32>,
        bins: usize,
        depth_range: (f64, f64),
    ) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Invalid("prior needs at least one bin".into()));
        }
        let (lo, hi) = depth_range;
        let span = (hi / lo).ln();
        let mut counts = vec![0.0f64; bins];
        let mut total = 0.0;
        for &d in depths {
            let u = ((d as f64 / lo).ln() / span * bins as f64).floor();
            counts[(u.max(0.0) as usize).min(bins - 1)] += 1.0;
            total += 1.0;
        }
        if total == 0.0 {
            return Err(Error::Invalid("prior from an empty depth set".into()));
        }
        let probs = counts
            .iter()
            .map(|c| (1.0 - PRIOR_SMOOTHING) * c / total + PRIOR_SMOOTHING / bins as f64)
            .collect();
        Ok(Self { depth_range, probs })
    }

    pub fn uniform(bins: usize, depth_range: (f64, f64)) -> Self {
        Self {
            depth_range,
            probs: vec![1.0 / bins as f64; bins],
        }
    }
}

/// One rendered frame with its cue observations.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub frame: RenderedFrame,
    pub cues: CueSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub scene: Scene,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub sequences: Vec<Sequence>,
    pub prior: DepthPrior,
}

impl Dataset {
    /// Generates scenes, renders every trajectory and draws cue noise.
    /// Scene `i` uses seeds derived from `(config.seed, i)` only, so the
    /// result does not depend on generation order.
    pub fn synthesize(config: &DatasetConfig) -> Result<Self> {
        config.noise.validate()?;
        if config.scenes == 0 {
            return Err(Error::Invalid("dataset needs at least one scene".into()));
        }
        let mut sequences = Vec::with_capacity(config.scenes);
        for i in 0..config.scenes {
            let base = config.seed.wrapping_mul(1_000_003).wrapping_add(i as u64 * 7919);
            let scene = generate_scene(&config.scene, base)?;
            let frames = render_sequence(&scene, config.scene.frames)?;
            let samples = frames
                .into_iter()
                .enumerate()
                .map(|(f, frame)| {
                    let cues = synthesize_cues(&frame, &config.noise, base ^ (0x9e37_79b9 + f as u64))?;
                    Ok(Sample { frame, cues })
                })
                .collect::<Result<Vec<_>>>()?;
            sequences.push(Sequence { scene, samples });
        }
        let prior = DepthPrior::from_depths(
            sequences
                .iter()
                .flat_map(|s| s.samples.iter())
                .flat_map(|s| s.frame.depth.data()),
            config.bins,
            config.scene.depth_range,
        )?;
        Ok(Self {
            config: config.clone(),
            sequences,
            prior,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.sequences.iter().map(|s| s.samples.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub unit: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub pose: Pose,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub scene: Scene,
    pub frames: Vec<FrameEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub seed: u64,
    pub frame_count: usize,
    pub config: DatasetConfig,
    pub prior: DepthPrior,
    pub scenes: Vec<SceneEntry>,
}

fn frame_arrays(sample: &Sample) -> Vec<(&'static str, &'static str, Tensor<f32>)> {
    let f = &sample.frame;
    let w = f.width();
    let c = &sample.cues;
    vec![
        ("rgb", "unit", f.rgb.clone()),
        ("depth", "m", f.depth.clone()),
        ("edges", "mask", f.edges.clone()),
        ("normals", "unit vector", f.normals.clone()),
        ("layout", "px row", Tensor::new(&[w], f.layout.clone()).expect("one row per column")),
        ("edge_cue", "mask", c.edge.cue.clone()),
        ("edge_log_var", "log variance", c.edge.log_variance.clone()),
        ("normal_cue", "unit vector", c.normal.cue.clone()),
        ("normal_log_var", "log variance", c.normal.log_variance.clone()),
        ("layout_cue", "fraction of height", c.layout.cue.clone()),
        ("layout_log_var", "log variance", c.layout.log_variance.clone()),
    ]
}

fn write_array(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_array(path: &Path, shape: &[usize]) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::format(
            path,
            format!("expected {} bytes for shape {shape:?}, found {}", 4 * n, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes one little-endian f32 file per map plus `manifest.json`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut scenes = Vec::with_capacity(dataset.sequences.len());
    for (si, seq) in dataset.sequences.iter().enumerate() {
        let mut frames = Vec::with_capacity(seq.samples.len());
        for (fi, sample) in seq.samples.iter().enumerate() {
            let mut arrays = Vec::new();
            for (name, unit, t) in frame_arrays(sample) {
                let file = format!("s{si:03}_f{fi:02}_{name}.bin");
                write_array(&dir.join(&file), &t)?;
                arrays.push(ArrayEntry {
                    name: name.into(),
                    file,
                    shape: t.shape().to_vec(),
                    unit: unit.into(),
                });
            }
            frames.push(FrameEntry {
                pose: sample.frame.pose,
                arrays,
            });
        }
        scenes.push(SceneEntry {
            scene: seq.scene.clone(),
            frames,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: "f32le".into(),
        seed: dataset.config.seed,
        frame_count: dataset.frame_count(),
        config: dataset.config.clone(),
        prior: dataset.prior.clone(),
        scenes,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.format_version != FORMAT_VERSION || m.dtype != "f32le" {
        return Err(Error::format(
            &path,
            format!("unsupported format {} / {}", m.format_version, m.dtype),
        ));
    }
    Ok(m)
}

/// Loads a dataset written by [`write_dataset`], checking every file
/// against the shape recorded in the manifest.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut sequences = Vec::with_capacity(manifest.scenes.len());
    for entry in &manifest.scenes {
        let mut samples = Vec::with_capacity(entry.frames.len());
        for frame in &entry.frames {
            let get = |name: &str| -> Result<Tensor<f32>> {
                let a = frame
                    .arrays
                    .iter()
                    .find(|a| a.name == name)
                    .ok_or_else(|| Error::format(dir.join(MANIFEST_FILE), format!("missing array {name}")))?;
                let path: PathBuf = dir.join(&a.file);
                read_array(&path, &a.shape)
            };
            let obs = |cue: &str, lv: &str| -> Result<CueObservation> {
                Ok(CueObservation {
                    cue: get(cue)?,
                    log_variance: get(lv)?,
                })
            };
            samples.push(Sample {
                frame: RenderedFrame {
                    pose: frame.pose,
                    rgb: get("rgb")?,
                    depth: get("depth")?,
                    edges: get("edges")?,
                    normals: get("normals")?,
                    layout: get("layout")?.into_data(),
                },
                cues: CueSet {
                    edge: obs("edge_cue", "edge_log_var")?,
                    normal: obs("normal_cue", "normal_log_var")?,
                    layout: obs("layout_cue", "layout_log_var")?,
                },
            });
        }
        sequences.push(Sequence {
            scene: entry.scene.clone(),
            samples,
        });
    }
    let dataset = Dataset {
        config: manifest.config,
        sequences,
        prior: manifest.prior,
    };
    if dataset.frame_count() != manifest.frame_count {
        return Err(Error::format(
            dir.join(MANIFEST_FILE),
            format!("frame count {} disagrees with {} listed frames", manifest.frame_count, dataset.frame_count()),
        ));
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(scenes: usize) -> DatasetConfig {
        DatasetConfig {
            scenes,
            seed: 5,
            scene: SceneConfig {
                width: 16,
                height: 16,
                ..SceneConfig::default()
            },
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ds = Dataset::synthesize(&small(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(m.frame_count, 8);
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn frame_count_for_default_scene_count() {
        let cfg = DatasetConfig {
            scene: SceneConfig {
                width: 8,
                height: 8,
                ..SceneConfig::default()
            },
            ..DatasetConfig::default()
        };
        let ds = Dataset::synthesize(&cfg).unwrap();
        assert_eq!(ds.frame_count(), 256);
    }

    #[test]
    fn truncated_array_names_the_file() {
        let ds = Dataset::synthesize(&small(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let victim = dir.path().join("s000_f01_depth.bin");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 4]).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("s000_f01_depth.bin"), "{err}");
    }

    #[test]
    fn prior_is_a_smoothed_distribution() {
        let ds = Dataset::synthesize(&small(2)).unwrap();
        let p = &ds.prior.probs;
        assert_eq!(p.len(), 64);
        assert!(p.iter().all(|&x| x > 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
