//! Threshold binarization and segment-level multi-label metrics.

use std::io::Write;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labelgrid::{to_segment_matrix, LabelError, LabelTrack};
use crate::species::SpeciesList;

/// Text rendering of an undefined metric (0/0).
pub const UNDEFINED: &str = "NA";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid threshold list: {0}")]
    InvalidThreshold(String),
    #[error("species lists differ between model output and truth")]
    SpeciesListMismatch,
    #[error(transparent)]
    Labels(#[from] LabelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// `1` iff `p >= threshold`.
pub fn binarize(probs: ArrayView2<f32>, threshold: f64) -> Array2<u8> {
    probs.mapv(|p| (p as f64 >= threshold) as u8)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, o: &ConfusionCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

/// Per-species counts and their micro (pooled) sum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub per_species: Vec<ConfusionCounts>,
    pub pooled: ConfusionCounts,
}

impl Confusion {
    pub fn empty(classes: usize) -> Self {
        Self {
            per_species: vec![ConfusionCounts::default(); classes],
            pooled: ConfusionCounts::default(),
        }
    }

    pub fn merge(&mut self, o: &Confusion) {
        for (a, b) in self.per_species.iter_mut().zip(&o.per_species) {
            a.add(b);
        }
        self.pooled.add(&o.pooled);
    }
}

pub fn confusion(pred: ArrayView2<u8>, truth: ArrayView2<u8>) -> Result<Confusion, EvalError> {
    if pred.dim() != truth.dim() {
        return Err(EvalError::ShapeMismatch(format!(
            "prediction {:?} vs truth {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let mut c = Confusion::empty(pred.ncols());
    for (p_row, t_row) in pred.rows().into_iter().zip(truth.rows()) {
        for (k, (&p, &t)) in p_row.iter().zip(t_row.iter()).enumerate() {
            let cell = &mut c.per_species[k];
            match (p != 0, t != 0) {
                (true, true) => cell.tp += 1,
                (true, false) => cell.fp += 1,
                (false, true) => cell.fn_ += 1,
                (false, false) => cell.tn += 1,
            }
        }
    }
    for s in c.per_species.clone() {
        c.pooled.add(&s);
    }
    Ok(c)
}

/// Metrics with `None` for undefined ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
}

fn ratio(n: u64, d: u64) -> Option<f64> {
    (d > 0).then(|| n as f64 / d as f64)
}

/// F1 from precision and recall; undefined when `P + R = 0` or either side
/// is undefined.
pub fn f1_score(precision: Option<f64>, recall: Option<f64>) -> Option<f64> {
    match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    }
}

pub fn metrics(c: &ConfusionCounts) -> MetricSet {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    MetricSet {
        precision,
        recall,
        f1: f1_score(precision, recall),
        accuracy: ratio(c.tp + c.tn, c.total()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub points: Vec<SweepPoint>,
}

impl SweepCurve {
    /// Point with the highest defined pooled F1; the lowest threshold wins
    /// ties.
    pub fn best_f1(&self) -> Option<&SweepPoint> {
        let mut best: Option<&SweepPoint> = None;
        for p in &self.points {
            if let Some(f) = p.metrics.f1 {
                if best.map_or(true, |b| f > b.metrics.f1.unwrap()) {
                    best = Some(p);
                }
            }
        }
        best
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["threshold", "precision", "recall", "f1", "accuracy"])?;
        for p in &self.points {
            let m = &p.metrics;
            out.write_record([
                format!("{:.2}", p.threshold),
                fmt_metric(m.precision, false),
                fmt_metric(m.recall, false),
                fmt_metric(m.f1, false),
                fmt_metric(m.accuracy, false),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// 101 thresholds 0.00, 0.01, ..., 1.00.
pub fn default_thresholds() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

fn check_thresholds(thresholds: &[f64]) -> Result<(), EvalError> {
    if thresholds.is_empty() {
        return Err(EvalError::InvalidThreshold("no thresholds".into()));
    }
    if let Some(t) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(EvalError::InvalidThreshold(format!("{t} outside [0, 1]")));
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::InvalidThreshold("thresholds must be strictly increasing".into()));
    }
    Ok(())
}

/// Pooled metrics at each threshold, summed over every `(probs, truth)` pair.
pub fn sweep_many(pairs: &[(ArrayView2<f32>, ArrayView2<u8>)], thresholds: &[f64]) -> Result<SweepCurve, EvalError> {
    check_thresholds(thresholds)?;
    let mut points = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let mut counts = ConfusionCounts::default();
        for (p, truth) in pairs {
            counts.add(&confusion(binarize(*p, t).view(), *truth)?.pooled);
        }
        points.push(SweepPoint {
            threshold: t,
            counts,
            metrics: metrics(&counts),
        });
    }
    Ok(SweepCurve { points })
}

pub fn sweep(probs: ArrayView2<f32>, truth: ArrayView2<u8>, thresholds: &[f64]) -> Result<SweepCurve, EvalError> {
    sweep_many(&[(probs, truth)], thresholds)
}

/// Render a metric for text output; undefined becomes [`UNDEFINED`], or 0
/// when `zero_undefined` is set.
pub fn fmt_metric(v: Option<f64>, zero_undefined: bool) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None if zero_undefined => format!("{:.6}", 0.0),
        None => UNDEFINED.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub species: String,
    pub counts: ConfusionCounts,
    pub metrics: MetricSet,
}

/// Per-species rows plus the micro-averaged pooled row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub segments: u64,
    pub per_species: Vec<ReportRow>,
    pub pooled: ReportRow,
}

pub const POOLED_ROW: &str = "pooled";

impl EvalReport {
    pub fn from_confusion(species: &SpeciesList, c: &Confusion, threshold: f64) -> Self {
        let row = |name: String, counts: ConfusionCounts| ReportRow {
            species: name,
            metrics: metrics(&counts),
            counts,
        };
        let segments = c.per_species.first().map_or(0, |s| s.total());
        EvalReport {
            threshold,
            segments,
            per_species: species
                .iter()
                .zip(&c.per_species)
                .map(|(s, &k)| row(s.common_name.clone(), k))
                .collect(),
            pooled: row(POOLED_ROW.into(), c.pooled),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W, zero_undefined: bool) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["species", "tp", "fp", "fn", "tn", "precision", "recall", "f1", "accuracy"])?;
        for r in self.per_species.iter().chain(std::iter::once(&self.pooled)) {
            let (c, m) = (&r.counts, &r.metrics);
            out.write_record([
                r.species.clone(),
                c.tp.to_string(),
                c.fp.to_string(),
                c.fn_.to_string(),
                c.tn.to_string(),
                fmt_metric(m.precision, zero_undefined),
                fmt_metric(m.recall, zero_undefined),
                fmt_metric(m.f1, zero_undefined),
                fmt_metric(m.accuracy, zero_undefined),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<(), EvalError> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}

/// Compare one recording's per-second probabilities with its truth track.
pub fn evaluate_recording(
    probs: ArrayView2<f32>,
    probs_species: &SpeciesList,
    truth: &LabelTrack,
    truth_species: &SpeciesList,
    threshold: f64,
) -> Result<(EvalReport, Confusion), EvalError> {
    if probs_species != truth_species {
        return Err(EvalError::SpeciesListMismatch);
    }
    check_thresholds(&[threshold])?;
    let t = to_segment_matrix(truth, truth_species.len())?;
    let c = confusion(binarize(probs, threshold).view(), t.values.view())?;
    Ok((EvalReport::from_confusion(truth_species, &c, threshold), c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelgrid::LabelEvent;
    use ndarray::array;

    #[test]
    fn binarize_uses_greater_or_equal() {
        let p = array![[0.1f32], [0.5], [0.84]];
        assert_eq!(binarize(p.view(), 0.5), array![[0u8], [1], [1]]);
        assert!(binarize(p.view(), 0.0).iter().all(|&v| v == 1));
        assert!(binarize(p.view(), 1.0).iter().all(|&v| v == 0));
    }

    #[test]
    fn hand_counted_metrics() {
        let m = metrics(&ConfusionCounts { tp: 2, fp: 1, fn_: 2, tn: 5 });
        assert!((m.precision.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.recall.unwrap() - 0.5).abs() < 1e-15);
        assert!((m.f1.unwrap() - 4.0 / 7.0).abs() < 1e-15);
        assert!((m.accuracy.unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn f1_of_reported_operating_point() {
        // 2 · 0.67 · 0.80 / 1.47
        let f = f1_score(Some(0.67), Some(0.80)).unwrap();
        assert!((f - 0.73).abs() < 0.005, "{f}");
    }

    #[test]
    fn undefined_markers() {
        let m = metrics(&ConfusionCounts { tp: 0, fp: 0, fn_: 3, tn: 1 });
        assert_eq!(m.precision, None);
        assert_eq!(m.recall, Some(0.0));
        assert_eq!(m.f1, None);
        let z = metrics(&ConfusionCounts { tp: 0, fp: 2, fn_: 3, tn: 1 });
        assert_eq!((z.precision, z.recall, z.f1), (Some(0.0), Some(0.0), None));
        assert_eq!(fmt_metric(None, false), UNDEFINED);
        assert_eq!(fmt_metric(None, true), "0.000000");
    }

    #[test]
    fn all_sixteen_single_cell_cases() {
        for bits in 0u8..16 {
            let pred = array![[bits & 1, (bits >> 1) & 1]];
            let truth = array![[(bits >> 2) & 1, (bits >> 3) & 1]];
            let c = confusion(pred.view(), truth.view()).unwrap();
            let mut tp = 0;
            let mut fp = 0;
            let mut fn_ = 0;
            let mut tn = 0;
            for k in 0..2 {
                match (pred[[0, k]], truth[[0, k]]) {
                    (1, 1) => tp += 1,
                    (1, 0) => fp += 1,
                    (0, 1) => fn_ += 1,
                    _ => tn += 1,
                }
            }
            assert_eq!(c.pooled, ConfusionCounts { tp, fp, fn_, tn });
        }
    }

    #[test]
    fn empty_truth_and_predictions() {
        let species = SpeciesList::kzn_six();
        let track = LabelTrack::new(10.0);
        let probs = Array2::from_elem((10, 6), 0.1f32);
        let (r, _) = evaluate_recording(probs.view(), &species, &track, &species, 0.5).unwrap();
        assert_eq!(r.pooled.counts.tn, 60);
        assert_eq!(r.pooled.metrics.accuracy, Some(1.0));
        assert_eq!(r.pooled.metrics.precision, None);
        assert_eq!(r.pooled.metrics.recall, None);
    }

    #[test]
    fn perfect_predictions_score_one_for_present_species() {
        let species = SpeciesList::kzn_six();
        let mut track = LabelTrack::new(8.0);
        track.events.push(LabelEvent { species_id: 1, start_s: 1.0, end_s: 3.0 });
        track.events.push(LabelEvent { species_id: 4, start_s: 5.2, end_s: 6.9 });
        let truth = to_segment_matrix(&track, 6).unwrap();
        let probs = truth.values.mapv(|v| if v == 1 { 0.9f32 } else { 0.05 });
        let (r, _) = evaluate_recording(probs.view(), &species, &track, &species, 0.5).unwrap();
        assert_eq!(r.per_species[1].metrics.f1, Some(1.0));
        assert_eq!(r.per_species[4].metrics.f1, Some(1.0));
        assert_eq!(r.per_species[0].metrics.f1, None);
        assert_eq!(r.pooled.metrics.f1, Some(1.0));
    }

    #[test]
    fn mismatched_species_rejected() {
        let a = SpeciesList::kzn_six();
        let b = crate::toy::toy_species();
        let probs = Array2::from_elem((2, 6), 0.1f32);
        assert!(matches!(
            evaluate_recording(probs.view(), &a, &LabelTrack::new(2.0), &b, 0.5),
            Err(EvalError::SpeciesListMismatch)
        ));
    }

    #[test]
    fn threshold_lists_validated() {
        let p = Array2::from_elem((2, 2), 0.3f32);
        let t = Array2::zeros((2, 2));
        assert!(sweep(p.view(), t.view(), &[0.5, 0.5]).is_err());
        assert!(sweep(p.view(), t.view(), &[0.2, 1.5]).is_err());
        let one = sweep(p.view(), t.view(), &[0.5]).unwrap();
        let direct = metrics(&confusion(binarize(p.view(), 0.5).view(), t.view()).unwrap().pooled);
        assert_eq!(one.points[0].metrics, direct);
    }

    #[test]
    fn report_csv_layout() {
        let species = SpeciesList::kzn_six();
        let c = Confusion::empty(6);
        let r = EvalReport::from_confusion(&species, &c, 0.5);
        let mut buf = Vec::new();
        r.write_csv(&mut buf, false).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "species,tp,fp,fn,tn,precision,recall,f1,accuracy");
        assert_eq!(lines.len(), 8);
        assert!(lines[7].starts_with("pooled,0,0,0,0,NA"));
    }
}
