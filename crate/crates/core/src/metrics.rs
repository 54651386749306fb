//! Overlap and detection scores between binary masks.
//!
//! Empty sets get a fixed convention instead of a division by zero: a ratio
//! whose denominator counts no voxels is 1.0 when the other mask is empty as
//! well and 0.0 otherwise. Jaccard and Dice of two empty masks are therefore
//! 1.0, and [`MetricsReport::both_empty`] flags such rows.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{AnnotationSet, BinaryMask, Volume};
use crate::error::{Error, Result};

/// Inter-rater Jaccard agreement published for three pairs of expert
/// annotators, kept as reference points for agreement reports.
pub const REFERENCE_EXPERT_JACCARD: [f64; 3] = [0.7398, 0.6733, 0.7877];
/// Published mean Jaccard of a level-set baseline, for reference only.
pub const REFERENCE_BASELINE_JACCARD: f64 = 0.779;

/// Voxelwise confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn predicted(&self) -> usize {
        self.tp + self.fp
    }

    pub fn actual(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn jaccard(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_, true)
    }

    pub fn dsc(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_, true)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.predicted(), self.actual() == 0)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.actual(), self.predicted() == 0)
    }

    /// Absolute difference of the foreground voxel counts.
    pub fn avd(&self) -> usize {
        self.predicted().abs_diff(self.actual())
    }
}

fn ratio(num: usize, den: usize, other_empty: bool) -> f64 {
    if den == 0 {
        if other_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

fn check_extents(op: &'static str, a: [usize; 3], b: [usize; 3]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::shape(op, format!("extents differ: {a:?} vs {b:?}")))
    }
}

pub fn confusion_counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<Confusion> {
    check_extents("confusion_counts", pred.extents(), gt.extents())?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn jaccard(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(confusion_counts(pred, gt)?.jaccard())
}

pub fn dsc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(confusion_counts(pred, gt)?.dsc())
}

pub fn precision(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(confusion_counts(pred, gt)?.precision())
}

pub fn recall(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(confusion_counts(pred, gt)?.recall())
}

pub fn avd(pred: &BinaryMask, gt: &BinaryMask) -> Result<usize> {
    Ok(confusion_counts(pred, gt)?.avd())
}

/// Dice from Jaccard on the same pair of masks.
pub fn dsc_from_jaccard(j: f64) -> f64 {
    2.0 * j / (1.0 + j)
}

/// Area under the precision-recall curve.
///
/// The threshold sweeps every distinct probability from high to low; at each
/// step the voxels at or above it are predicted foreground, and the step
/// contributes `(R_i - R_{i-1}) * P_i`. Tied probabilities enter together,
/// so the score only depends on the ranking of the map. An empty ground
/// truth scores 1.0 (nothing to retrieve).
pub fn average_precision(prob: &Volume, gt: &BinaryMask) -> Result<f64> {
    check_extents("average_precision", prob.extents(), gt.extents())?;
    let positives = gt.count();
    if positives == 0 {
        return Ok(1.0);
    }
    let mut order: Vec<(f32, u8)> = prob.data().iter().copied().zip(gt.data().iter().copied()).collect();
    order.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut seen) = (0usize, 0usize);
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let t = order[i].0;
        while i < order.len() && order[i].0 == t {
            tp += order[i].1 as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Ok(ap)
}

/// Jaccard between every pair of annotators; symmetric with a unit diagonal.
pub fn pairwise_agreement(set: &AnnotationSet) -> Result<Vec<Vec<f64>>> {
    if set.masks.len() < 2 {
        return Err(Error::Data(format!(
            "agreement for `{}` needs at least 2 annotations, found {}",
            set.id,
            set.masks.len()
        )));
    }
    let m = set.masks.len();
    let mut out = vec![vec![1.0; m]; m];
    for i in 0..m {
        for j in i + 1..m {
            let v = jaccard(&set.masks[i], &set.masks[j])?;
            out[i][j] = v;
            out[j][i] = v;
        }
    }
    Ok(out)
}

/// Scores of one prediction against its ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub jaccard: f64,
    pub dsc: f64,
    pub precision: f64,
    pub recall: f64,
    /// Absolute volume difference in voxels.
    pub avd: f64,
    pub ap: f64,
    /// Both masks were empty, so the overlap scores are by convention.
    pub both_empty: bool,
}

impl MetricsReport {
    pub fn compute(pred: &BinaryMask, prob: &Volume, gt: &BinaryMask) -> Result<Self> {
        let c = confusion_counts(pred, gt)?;
        Ok(Self {
            jaccard: c.jaccard(),
            dsc: c.dsc(),
            precision: c.precision(),
            recall: c.recall(),
            avd: c.avd() as f64,
            ap: average_precision(prob, gt)?,
            both_empty: c.predicted() == 0 && c.actual() == 0,
        })
    }

    fn values(&self) -> [f64; 6] {
        [self.jaccard, self.dsc, self.precision, self.recall, self.avd, self.ap]
    }

    fn from_values(v: [f64; 6], both_empty: bool) -> Self {
        let [jaccard, dsc, precision, recall, avd, ap] = v;
        Self { jaccard, dsc, precision, recall, avd, ap, both_empty }
    }
}

/// Mean and population standard deviation of each score.
pub fn mean_std(reports: &[MetricsReport]) -> Result<(MetricsReport, MetricsReport)> {
    if reports.is_empty() {
        return Err(Error::Data("no reports to aggregate".into()));
    }
    let n = reports.len() as f64;
    // shifted by the first report, so identical inputs give an exact mean
    let origin = reports[0].values();
    let mut shift = [0.0; 6];
    for r in reports {
        shift.iter_mut().zip(r.values()).zip(origin).for_each(|((s, v), o)| *s += v - o);
    }
    let mean: [f64; 6] = std::array::from_fn(|i| origin[i] + shift[i] / n);
    let mut var = [0.0; 6];
    for r in reports {
        var.iter_mut().zip(r.values()).zip(mean).for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
    }
    let any_empty = reports.iter().any(|r| r.both_empty);
    Ok((MetricsReport::from_values(mean, any_empty), MetricsReport::from_values(var.map(f64::sqrt), any_empty)))
}

#[derive(Serialize)]
struct ImageRow<'a> {
    id: &'a str,
    jaccard: f64,
    dsc: f64,
    precision: f64,
    recall: f64,
    avd: f64,
    ap: f64,
    both_empty: bool,
}

/// Writes one row per image followed by `mean` and `std` rows.
pub fn write_report_csv<W: Write>(out: W, rows: &[(String, MetricsReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let reports: Vec<_> = rows.iter().map(|r| r.1).collect();
    let (mean, std) = mean_std(&reports)?;
    let all = rows.iter().map(|(id, r)| (id.as_str(), *r)).chain([("mean", mean), ("std", std)]);
    for (id, r) in all {
        let row = ImageRow {
            id,
            jaccard: r.jaccard,
            dsc: r.dsc,
            precision: r.precision,
            recall: r.recall,
            avd: r.avd,
            ap: r.ap,
            both_empty: r.both_empty,
        };
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::Data(format!("csv: {e}")))
}

#[derive(Serialize)]
struct RunRow<'a> {
    id: &'a str,
    runs: usize,
    jaccard_mean: f64,
    jaccard_std: f64,
    dsc_mean: f64,
    dsc_std: f64,
    precision_mean: f64,
    precision_std: f64,
    recall_mean: f64,
    recall_std: f64,
    avd_mean: f64,
    avd_std: f64,
    ap_mean: f64,
    ap_std: f64,
}

/// Aggregates several independent runs over the same images into per-image
/// mean and standard deviation columns, plus an `all` row over the per-run
/// image means.
pub fn write_runs_csv<W: Write>(out: W, runs: &[Vec<(String, MetricsReport)>]) -> Result<()> {
    let Some(first) = runs.first() else {
        return Err(Error::Data("no runs to aggregate".into()));
    };
    for (k, run) in runs.iter().enumerate() {
        let same = run.len() == first.len() && run.iter().zip(first).all(|(a, b)| a.0 == b.0);
        if !same {
            return Err(Error::Data(format!("run {k} covers different images than run 0")));
        }
    }
    let mut w = csv::Writer::from_writer(out);
    let mut emit = |id: &str, reports: &[MetricsReport]| -> Result<()> {
        let (m, s) = mean_std(reports)?;
        let row = RunRow {
            id,
            runs: reports.len(),
            jaccard_mean: m.jaccard,
            jaccard_std: s.jaccard,
            dsc_mean: m.dsc,
            dsc_std: s.dsc,
            precision_mean: m.precision,
            precision_std: s.precision,
            recall_mean: m.recall,
            recall_std: s.recall,
            avd_mean: m.avd,
            avd_std: s.avd,
            ap_mean: m.ap,
            ap_std: s.ap,
        };
        w.serialize(row).map_err(csv_error)
    };
    for (i, (id, _)) in first.iter().enumerate() {
        let per_run: Vec<_> = runs.iter().map(|r| r[i].1).collect();
        emit(id, &per_run)?;
    }
    let run_means = runs
        .iter()
        .map(|r| Ok(mean_std(&r.iter().map(|x| x.1).collect::<Vec<_>>())?.0))
        .collect::<Result<Vec<_>>>()?;
    emit("all", &run_means)?;
    w.flush().map_err(|e| Error::Data(format!("csv: {e}")))
}

fn csv_error(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

#[cfg(test)]
mod tests;
