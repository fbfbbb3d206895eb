//! Pixel-level change-detection metrics and confusion-map rendering.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub const TP_COLOR: [u8; 3] = [255, 255, 255];
pub const TN_COLOR: [u8; 3] = [0, 0, 0];
pub const FP_COLOR: [u8; 3] = [255, 0, 0];
pub const FN_COLOR: [u8; 3] = [0, 255, 0];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionStats {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionStats {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Adds another table's counts (micro-averaging).
    pub fn merge(&mut self, other: &ConfusionStats) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

impl std::iter::Sum for ConfusionStats {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |mut acc, s| {
            acc.merge(&s);
            acc
        })
    }
}

fn check_binary(name: &str, map: &[u8]) -> Result<()> {
    match map.iter().position(|&v| v > 1) {
        Some(i) => Err(Error::Validation(format!("{name} has non-binary value {} at {i}", map[i]))),
        None => Ok(()),
    }
}

fn check_pair(pred: &[u8], gt: &[u8]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Validation(format!(
            "prediction has {} pixels but ground truth has {}",
            pred.len(),
            gt.len()
        )));
    }
    check_binary("prediction", pred)?;
    check_binary("ground truth", gt)
}

/// Counts the 2×2 contingency with "changed" (1) as the positive class.
pub fn confusion(pred: &[u8], gt: &[u8]) -> Result<ConfusionStats> {
    check_pair(pred, gt)?;
    let mut s = ConfusionStats::default();
    for (&p, &t) in pred.iter().zip(gt) {
        match (p, t) {
            (1, 1) => s.tp += 1,
            (1, 0) => s.fp += 1,
            (0, 1) => s.fn_ += 1,
            _ => s.tn += 1,
        }
    }
    Ok(s)
}

/// Which ratios were 0/0 and reported as zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Undefined {
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
    pub iou: bool,
}

impl Undefined {
    pub fn any(&self) -> bool {
        self.precision || self.recall || self.f1 || self.iou
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub oa: f64,
    pub undefined: Undefined,
}

fn ratio(num: f64, den: f64, flag: &mut bool) -> f64 {
    if den == 0.0 {
        *flag = true;
        0.0
    } else {
        num / den
    }
}

/// F1 from precision and recall as the harmonic mean.
pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn scores(stats: &ConfusionStats) -> Result<Scores> {
    let total = stats.total();
    if total == 0 {
        return Err(Error::Validation("cannot score an empty confusion table".into()));
    }
    let (tp, fp, fn_, tn) = (stats.tp as f64, stats.fp as f64, stats.fn_ as f64, stats.tn as f64);
    let mut u = Undefined::default();
    let precision = ratio(tp, tp + fp, &mut u.precision);
    let recall = ratio(tp, tp + fn_, &mut u.recall);
    let f1 = if precision + recall == 0.0 {
        u.f1 = true;
        0.0
    } else {
        f1_from(precision, recall)
    };
    let iou = ratio(tp, tp + fp + fn_, &mut u.iou);
    let oa = (tp + tn) / total as f64;
    Ok(Scores { precision, recall, f1, iou, oa, undefined: u })
}

/// Four-colour confusion map, `pred` and `gt` laid out row-major `h × w`.
pub fn render_confusion_map(pred: &[u8], gt: &[u8], (h, w): (usize, usize)) -> Result<RgbImage> {
    check_pair(pred, gt)?;
    if pred.len() != h * w {
        return Err(Error::Validation(format!("{} pixels do not form a {h}×{w} map", pred.len())));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for (i, (&p, &t)) in pred.iter().zip(gt).enumerate() {
        let c = match (p, t) {
            (1, 1) => TP_COLOR,
            (1, 0) => FP_COLOR,
            (0, 1) => FN_COLOR,
            _ => TN_COLOR,
        };
        img.put_pixel((i % w) as u32, (i / w) as u32, Rgb(c));
    }
    Ok(img)
}

/// Recovers the counts from a rendered map.
pub fn decode_confusion_map(img: &RgbImage) -> Result<ConfusionStats> {
    let mut s = ConfusionStats::default();
    for (x, y, px) in img.enumerate_pixels() {
        match px.0 {
            TP_COLOR => s.tp += 1,
            FP_COLOR => s.fp += 1,
            FN_COLOR => s.fn_ += 1,
            TN_COLOR => s.tn += 1,
            other => {
                return Err(Error::Format(format!("unexpected colour {other:?} at ({x},{y})")));
            }
        }
    }
    Ok(s)
}

pub fn save_confusion_map(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

/// One row of a metric table.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub split: String,
    pub stats: ConfusionStats,
    pub scores: Scores,
}

impl ReportRow {
    pub fn new(split: impl Into<String>, stats: ConfusionStats) -> Result<Self> {
        Ok(Self { split: split.into(), scores: scores(&stats)?, stats })
    }
}

/// Tab-separated table with full-precision values.
pub fn report_tsv(rows: &[ReportRow]) -> String {
    let mut out = String::from("# averaging: micro\nsplit\tprecision\trecall\tf1\tiou\toa\ttp\tfp\tfn\ttn\n");
    for r in rows {
        let s = &r.scores;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.split, s.precision, s.recall, s.f1, s.iou, s.oa, r.stats.tp, r.stats.fp, r.stats.fn_, r.stats.tn
        );
    }
    out
}

/// Human-readable table with percentages to two decimals.
pub fn report_table(rows: &[ReportRow]) -> String {
    let mut out = format!("{:<8} {:>7} {:>7} {:>7} {:>7} {:>7}\n", "split", "Pre", "Rec", "F1", "IoU", "OA");
    for r in rows {
        let s = &r.scores;
        let _ = writeln!(
            out,
            "{:<8} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            r.split,
            100.0 * s.precision,
            100.0 * s.recall,
            100.0 * s.f1,
            100.0 * s.iou,
            100.0 * s.oa
        );
    }
    out
}
