//! Depth error metrics, threshold accuracies and edge alignment.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{depth_edges, EDGE_RATIO};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthErrors {
    pub abs_rel: f64,
    pub rmse: f64,
    pub log_rmse: f64,
    pub silog: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub abs_rel: f64,
    pub rmse: f64,
    pub log_rmse: f64,
    pub silog: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub edge_f1: f64,
    pub valid_pixels: usize,
}

/// `(pred, gt)` pairs where the mask is set.
fn masked_pairs<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, mask: Option<&[bool]>) -> Result<Vec<(f64, f64)>> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("metrics", format!("{:?} vs {:?}", pred.shape(), gt.shape())));
    }
    if let Some(m) = mask {
        if m.len() != gt.len() {
            return Err(Error::shape("metrics", format!("mask of {} for {} pixels", m.len(), gt.len())));
        }
    }
    let pairs: Vec<(f64, f64)> = pred
        .data()
        .iter()
        .zip(gt.data())
        .enumerate()
        .filter(|(i, _)| mask.is_none_or(|m| m[*i]))
        .map(|(_, (p, g))| (p.as_f64(), g.as_f64()))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Invalid("metric mask selects no pixels".into()));
    }
    if pairs.iter().any(|&(p, g)| !(p > 0.0 && g > 0.0)) {
        return Err(Error::Invalid("metrics need strictly positive depths".into()));
    }
    Ok(pairs)
}

/// Abs-rel, RMSE, log-RMSE and SILog, the last being
/// `sqrt(mean d^2 - mean(d)^2)` of the log residual `d`.
pub fn depth_metrics<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, mask: Option<&[bool]>) -> Result<DepthErrors> {
    let pairs = masked_pairs(pred, gt, mask)?;
    let n = pairs.len() as f64;
    let mut abs_rel = 0.0;
    let mut sq = 0.0;
    let mut lsq = 0.0;
    let mut lsum = 0.0;
    for &(p, g) in &pairs {
        abs_rel += (p - g).abs() / g;
        sq += (p - g).powi(2);
        let d = p.ln() - g.ln();
        lsq += d * d;
        lsum += d;
    }
    let (mean_l, mean_l2) = (lsum / n, lsq / n);
    Ok(DepthErrors {
        abs_rel: abs_rel / n,
        rmse: (sq / n).sqrt(),
        log_rmse: mean_l2.sqrt(),
        silog: (mean_l2 - mean_l * mean_l).max(0.0).sqrt(),
    })
}

/// Fraction of pixels with `max(pred/gt, gt/pred) < 1.25^i`, `i = 1, 2, 3`.
pub fn threshold_accuracy<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, mask: Option<&[bool]>) -> Result<[f64; 3]> {
    let pairs = masked_pairs(pred, gt, mask)?;
    let mut hits = [0usize; 3];
    for &(p, g) in &pairs {
        let r = (p / g).max(g / p);
        for (i, h) in hits.iter_mut().enumerate() {
            if r < 1.25f64.powi(i as i32 + 1) {
                *h += 1;
            }
        }
    }
    let n = pairs.len() as f64;
    Ok(hits.map(|h| h as f64 / n))
}

/// Share of set pixels in `from` that have a set pixel of `to` within
/// Chebyshev distance `tol`.
fn matched_share(from: &[bool], to: &[bool], h: usize, w: usize, tol: usize) -> Option<f64> {
    let total = from.iter().filter(|&&b| b).count();
    if total == 0 {
        return None;
    }
    let mut hit = 0;
    for y in 0..h {
        for x in 0..w {
            if !from[y * w + x] {
                continue;
            }
            let near = (y.saturating_sub(tol)..(y + tol + 1).min(h))
                .any(|yy| (x.saturating_sub(tol)..(x + tol + 1).min(w)).any(|xx| to[yy * w + xx]));
            hit += near as usize;
        }
    }
    Some(hit as f64 / total as f64)
}

/// F1 between two binary edge maps under `tol`-pixel matching. Zero when
/// either map is empty, including both.
pub fn edge_map_f1(pred: &[bool], gt: &[bool], h: usize, w: usize, tol: usize) -> f64 {
    match (matched_share(pred, gt, h, w, tol), matched_share(gt, pred, h, w, tol)) {
        (Some(p), Some(r)) if p + r > 0.0 => 2.0 * p * r / (p + r),
        _ => 0.0,
    }
}

/// Edge F1 of depth discontinuities in `pred` (`[H, W, 1]`) against the
/// binary `edges_gt`.
pub fn edge_f1<T: Real>(pred: &Tensor<T>, edges_gt: &Tensor<T>, tol: usize) -> Result<f64> {
    let s = pred.shape();
    if s.len() != 3 || s[2] != 1 || edges_gt.shape() != s {
        return Err(Error::shape("edge_f1", format!("{s:?} vs {:?}", edges_gt.shape())));
    }
    let (h, w) = (s[0], s[1]);
    let depth: Vec<f32> = pred.data().iter().map(|v| v.as_f64() as f32).collect();
    let found: Vec<bool> = depth_edges(&depth, h, w, EDGE_RATIO).iter().map(|&v| v > 0.5).collect();
    let truth: Vec<bool> = edges_gt.data().iter().map(|v| v.as_f64() > 0.5).collect();
    Ok(edge_map_f1(&found, &truth, h, w, tol))
}

/// Every metric for one frame.
pub fn evaluate_frame<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, edges_gt: &Tensor<T>, mask: Option<&[bool]>) -> Result<MetricReport> {
    let e = depth_metrics(pred, gt, mask)?;
    let [delta1, delta2, delta3] = threshold_accuracy(pred, gt, mask)?;
    Ok(MetricReport {
        abs_rel: e.abs_rel,
        rmse: e.rmse,
        log_rmse: e.log_rmse,
        silog: e.silog,
        delta1,
        delta2,
        delta3,
        edge_f1: edge_f1(pred, edges_gt, 1)?,
        valid_pixels: mask.map_or(gt.len(), |m| m.iter().filter(|&&b| b).count()),
    })
}

impl MetricReport {
    /// Frame-averaged metrics; pixel counts add up.
    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport> {
        if reports.is_empty() {
            return Err(Error::Invalid("no reports to aggregate".into()));
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(MetricReport {
            abs_rel: avg(|r| r.abs_rel),
            rmse: avg(|r| r.rmse),
            log_rmse: avg(|r| r.log_rmse),
            silog: avg(|r| r.silog),
            delta1: avg(|r| r.delta1),
            delta2: avg(|r| r.delta2),
            delta3: avg(|r| r.delta3),
            edge_f1: avg(|r| r.edge_f1),
            valid_pixels: reports.iter().map(|r| r.valid_pixels).sum(),
        })
    }
}

const CSV_HEADER: [&str; 10] = [
    "frame", "abs_rel", "rmse", "log_rmse", "silog", "delta1", "delta2", "delta3", "edge_f1", "valid_pixels",
];

fn csv_record(label: &str, r: &MetricReport) -> Vec<String> {
    let mut rec = vec![label.to_string()];
    rec.extend(
        [r.abs_rel, r.rmse, r.log_rmse, r.silog, r.delta1, r.delta2, r.delta3, r.edge_f1]
            .iter()
            .map(|v| v.to_string()),
    );
    rec.push(r.valid_pixels.to_string());
    rec
}

/// One CSV row per labelled frame, then an `aggregate` row.
pub fn write_metrics_csv(rows: &[(String, MetricReport)], out: impl Write) -> Result<MetricReport> {
    let reports: Vec<MetricReport> = rows.iter().map(|(_, r)| *r).collect();
    let agg = MetricReport::mean(&reports)?;
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Invalid(format!("csv: {e}"));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for (label, report) in rows {
        w.write_record(csv_record(label, report)).map_err(csv_err)?;
    }
    w.write_record(csv_record("aggregate", &agg)).map_err(csv_err)?;
    w.flush().map_err(|e| Error::io("metrics csv", e))?;
    Ok(agg)
}
