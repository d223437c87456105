use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::{blank_sample, GateMode};
use crate::scene::{Dataset, PerspectiveCue};
use crate::train::EvalOptions;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    /// Log-variances forced to zero, so gating passes cues unchanged.
    GatingOff,
    MemoryOff,
    /// Write gate kept at its initial value during training.
    EtaFreeze,
    SlotShuffle,
    EdgeMask,
    NoiseInject,
    /// Blank RGB frame inserted into every sequence.
    DelayBlank,
    /// Perspective cue replaced by a defocus-blur oracle.
    SpecialistSwap,
}

impl AblationKind {
    pub const ALL: [AblationKind; 8] = [
        Self::GatingOff,
        Self::MemoryOff,
        Self::EtaFreeze,
        Self::SlotShuffle,
        Self::EdgeMask,
        Self::NoiseInject,
        Self::DelayBlank,
        Self::SpecialistSwap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::GatingOff => "gating_off",
            Self::MemoryOff => "memory_off",
            Self::EtaFreeze => "eta_freeze",
            Self::SlotShuffle => "slot_shuffle",
            Self::EdgeMask => "edge_mask",
            Self::NoiseInject => "noise_inject",
            Self::DelayBlank => "delay_blank",
            Self::SpecialistSwap => "specialist_swap",
        }
    }

    /// Whether the ablation changes training, as opposed to inference only.
    pub fn retrains(self) -> bool {
        matches!(self, Self::GatingOff | Self::MemoryOff | Self::EtaFreeze | Self::SpecialistSwap)
    }
}

/// One ablation with its parameter. `value` is the shuffled fraction,
/// the masked fraction, the noise sigma or the blank position, depending
/// on the kind; unused otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub kind: AblationKind,
    pub value: f64,
}

impl AblationSpec {
    pub fn new(kind: AblationKind) -> Self {
        let value = match kind {
            AblationKind::SlotShuffle => 0.5,
            AblationKind::EdgeMask => 0.25,
            AblationKind::NoiseInject => 0.05,
            AblationKind::DelayBlank => 2.0,
            _ => 0.0,
        };
        Self { kind, value }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            AblationKind::SlotShuffle | AblationKind::EdgeMask => (0.0..=1.0).contains(&self.value),
            AblationKind::NoiseInject => self.value >= 0.0 && self.value.is_finite(),
            AblationKind::DelayBlank => self.value >= 1.0 && self.value.fract() == 0.0,
            _ => true,
        };
        if !ok {
            return Err(Error::Invalid(format!("{self}: parameter out of range")));
        }
        Ok(())
    }

    /// Training-side changes.
    pub fn apply_to_config(&self, cfg: &mut RunConfig) {
        match self.kind {
            AblationKind::GatingOff => cfg.train.input.gating = false,
            AblationKind::MemoryOff => cfg.model.memory.enabled = false,
            AblationKind::EtaFreeze => cfg.model.memory.gate = GateMode::Frozen,
            AblationKind::SpecialistSwap => cfg.dataset.noise.perspective = PerspectiveCue::Defocus,
            _ => {}
        }
    }

    /// Inference-side changes.
    pub fn eval_options(&self, seed: u64) -> EvalOptions {
        let mut o = EvalOptions {
            seed,
            ..EvalOptions::default()
        };
        match self.kind {
            AblationKind::GatingOff => o.input.gating = false,
            AblationKind::SlotShuffle => o.slot_shuffle = Some(self.value),
            AblationKind::EdgeMask => o.input.edge_mask = self.value,
            AblationKind::NoiseInject => o.input.rgb_noise = self.value,
            _ => {}
        }
        o
    }

    /// Evaluation set for this ablation, derived from the baseline's.
    pub fn eval_dataset(&self, data: &Dataset) -> Dataset {
        let mut out = data.clone();
        if self.kind == AblationKind::DelayBlank {
            let pos = self.value as usize;
            for seq in &mut out.sequences {
                let at = pos.min(seq.samples.len());
                let blank = blank_sample(&seq.samples[at - 1]);
                seq.samples.insert(at, blank);
            }
        }
        out
    }
}

impl fmt::Display for AblationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            AblationKind::SlotShuffle | AblationKind::EdgeMask | AblationKind::NoiseInject | AblationKind::DelayBlank => {
                write!(f, "{}={}", self.kind.name(), self.value)
            }
            _ => f.write_str(self.kind.name()),
        }
    }
}

impl FromStr for AblationSpec {
    type Err = Error;

    /// `kind` or `kind=value`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, value) = match s.split_once('=') {
            Some((n, v)) => (n.trim(), Some(v.trim())),
            None => (s.trim(), None),
        };
        let kind = AblationKind::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Invalid(format!("unknown ablation kind {name:?}")))?;
        let mut spec = Self::new(kind);
        if let Some(v) = value {
            spec.value = v.parse().map_err(|_| Error::Invalid(format!("bad value {v:?} for {name}")))?;
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub retrained: bool,
    pub report: MetricReport,
}

fn metric_values(r: &MetricReport) -> [f64; 8] {
    [r.abs_rel, r.rmse, r.log_rmse, r.silog, r.delta1, r.delta2, r.delta3, r.edge_f1]
}

const METRICS: [&str; 8] = ["abs_rel", "rmse", "log_rmse", "silog", "delta1", "delta2", "delta3", "edge_f1"];

/// Table with each row's metrics and deltas against `baseline`.
pub fn write_ablation_table(baseline: &MetricReport, rows: &[AblationRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Invalid(format!("csv: {e}"));
    let mut header = vec!["ablation".to_string(), "retrained".into()];
    header.extend(METRICS.iter().map(|m| m.to_string()));
    header.extend(METRICS.iter().map(|m| format!("delta_{m}")));
    w.write_record(&header).map_err(err)?;
    let base = metric_values(baseline);
    let all = std::iter::once(AblationRow {
        name: "baseline".into(),
        retrained: false,
        report: *baseline,
    })
    .chain(rows.iter().cloned());
    for row in all {
        let v = metric_values(&row.report);
        let mut rec = vec![row.name.clone(), row.retrained.to_string()];
        rec.extend(v.iter().map(|x| x.to_string()));
        rec.extend(v.iter().zip(&base).map(|(x, b)| (x - b).to_string()));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("ablation table", e))
}
