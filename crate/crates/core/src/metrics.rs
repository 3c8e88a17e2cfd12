//! Depth and scene-parsing evaluation metrics.
//!
//! Both metric families accumulate sufficient statistics, so batches can be
//! evaluated independently and merged.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Predictions are clamped to this floor (metres) before ratios and logs.
pub const DEPTH_FLOOR: f64 = 1e-3;

/// Which depth divides the absolute error in `rel`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelDenominator {
    #[default]
    Gt,
    Pred,
}

impl std::str::FromStr for RelDenominator {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "gt" => Ok(Self::Gt),
            "pred" => Ok(Self::Pred),
            other => Err(format!("expected `gt` or `pred`, got `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub rel: f64,
    pub rms: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub pixels: u64,
}

/// Running sums behind [`DepthMetrics`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DepthAccumulator {
    pub denominator: RelDenominator,
    pixels: u64,
    abs_rel: f64,
    squared: f64,
    log10: f64,
    within: [u64; 3],
}

impl DepthAccumulator {
    pub fn new(denominator: RelDenominator) -> Self {
        Self {
            denominator,
            ..Self::default()
        }
    }

    /// Adds every pixel with `mask != 0` and `gt > 0`.
    pub fn add(&mut self, pred: &Tensor4, gt: &Tensor4, mask: &Tensor4) -> Result<()> {
        if pred.shape() != gt.shape() || pred.shape() != mask.shape() {
            return Err(Error::Config(format!(
                "depth metrics: pred {}, gt {}, mask {} must match",
                pred.shape(),
                gt.shape(),
                mask.shape()
            )));
        }
        for ((&p, &g), &m) in pred.data().iter().zip(gt.data()).zip(mask.data()) {
            if m == 0.0 || !(g > 0.0) {
                continue;
            }
            self.add_pixel(p, g);
        }
        Ok(())
    }

    fn add_pixel(&mut self, pred: f64, gt: f64) {
        let p = pred.max(DEPTH_FLOOR);
        let denom = match self.denominator {
            RelDenominator::Gt => gt,
            RelDenominator::Pred => p,
        };
        self.pixels += 1;
        self.abs_rel += (p - gt).abs() / denom;
        self.squared += (p - gt) * (p - gt);
        self.log10 += (p.log10() - gt.log10()).abs();
        let ratio = (gt / p).max(p / gt);
        let mut threshold = 1.0;
        for hit in &mut self.within {
            threshold *= 1.25;
            if ratio < threshold {
                *hit += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &DepthAccumulator) {
        self.pixels += other.pixels;
        self.abs_rel += other.abs_rel;
        self.squared += other.squared;
        self.log10 += other.log10;
        for (a, b) in self.within.iter_mut().zip(other.within) {
            *a += b;
        }
    }

    /// `None` when no pixel was valid.
    pub fn finish(&self) -> Option<DepthMetrics> {
        if self.pixels == 0 {
            return None;
        }
        let n = self.pixels as f64;
        Some(DepthMetrics {
            rel: self.abs_rel / n,
            rms: (self.squared / n).sqrt(),
            log10: self.log10 / n,
            delta1: self.within[0] as f64 / n,
            delta2: self.within[1] as f64 / n,
            delta3: self.within[2] as f64 / n,
            pixels: self.pixels,
        })
    }
}

/// Depth metrics over the valid pixels of one prediction.
pub fn depth_metrics(pred: &Tensor4, gt: &Tensor4, mask: &Tensor4, denominator: RelDenominator) -> Result<Option<DepthMetrics>> {
    let mut acc = DepthAccumulator::new(denominator);
    acc.add(pred, gt, mask)?;
    Ok(acc.finish())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParsingMetrics {
    pub mean_iou: f64,
    pub mean_accuracy: f64,
    pub pixel_accuracy: f64,
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub pixels: u64,
}

/// `counts[gt * k + pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    /// Adds every pixel whose ground truth is not `ignore`.
    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap, ignore: u8) -> Result<()> {
        if pred.data.len() != gt.data.len() {
            return Err(Error::Config(format!(
                "parsing metrics: {} predicted labels vs {} ground-truth labels",
                pred.data.len(),
                gt.data.len()
            )));
        }
        let k = self.num_classes;
        let plane = gt.h * gt.w;
        for (i, (&p, &g)) in pred.data.iter().zip(&gt.data).enumerate() {
            if g == ignore {
                continue;
            }
            for (which, v) in [("ground-truth", g), ("predicted", p)] {
                if v as usize >= k {
                    return Err(Error::Data(format!(
                        "{which} label {v} at (sample {}, row {}, col {}) is outside [0, {k})",
                        i / plane,
                        (i % plane) / gt.w,
                        i % gt.w
                    )));
                }
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// `None` when no pixel was counted.
    pub fn finish(&self) -> Option<ParsingMetrics> {
        let k = self.num_classes;
        let total: u64 = self.counts.iter().sum();
        if total == 0 {
            return None;
        }
        let mut per_class_iou = Vec::with_capacity(k);
        let mut acc_sum = 0.0;
        let mut acc_classes = 0usize;
        let mut correct = 0u64;
        for c in 0..k {
            let tp = self.count(c, c);
            let gt_total: u64 = (0..k).map(|p| self.count(c, p)).sum();
            let pred_total: u64 = (0..k).map(|g| self.count(g, c)).sum();
            let union = gt_total + pred_total - tp;
            per_class_iou.push((union > 0).then(|| tp as f64 / union as f64));
            if gt_total > 0 {
                acc_sum += tp as f64 / gt_total as f64;
                acc_classes += 1;
            }
            correct += tp;
        }
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        Some(ParsingMetrics {
            mean_iou: present.iter().sum::<f64>() / present.len() as f64,
            mean_accuracy: acc_sum / acc_classes.max(1) as f64,
            pixel_accuracy: correct as f64 / total as f64,
            per_class_iou,
            pixels: total,
        })
    }
}

pub fn parsing_metrics(pred: &LabelMap, gt: &LabelMap, num_classes: usize, ignore: u8) -> Result<Option<ParsingMetrics>> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(pred, gt, ignore)?;
    Ok(cm.finish())
}

/// One row of a comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub depth: Option<DepthMetrics>,
    pub parsing: Option<ParsingMetrics>,
}

pub const TABLE_HEADER: [&str; 10] = [
    "method",
    "rel",
    "log10",
    "rms",
    "delta<1.25",
    "delta<1.25^2",
    "delta<1.25^3",
    "mean_iou",
    "mean_acc",
    "pixel_acc",
];

/// Tab-separated table with one header line; missing values print as `undefined`.
pub fn format_table(rows: &[MetricsRow]) -> String {
    let mut out = TABLE_HEADER.join("\t");
    out.push('\n');
    let cell = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"));
    for r in rows {
        let d = r.depth.as_ref();
        let p = r.parsing.as_ref();
        let cells = [
            cell(d.map(|d| d.rel)),
            cell(d.map(|d| d.log10)),
            cell(d.map(|d| d.rms)),
            cell(d.map(|d| d.delta1)),
            cell(d.map(|d| d.delta2)),
            cell(d.map(|d| d.delta3)),
            cell(p.map(|p| p.mean_iou)),
            cell(p.map(|p| p.mean_accuracy)),
            cell(p.map(|p| p.pixel_accuracy)),
        ];
        let _ = writeln!(out, "{}\t{}", r.method, cells.join("\t"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    fn t(v: &[f64]) -> Tensor4 {
        Tensor4::from_vec(Shape4::new(1, 1, 1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn single_pixel_double() {
        let m = depth_metrics(&t(&[2.0]), &t(&[1.0]), &t(&[1.0]), RelDenominator::Gt)
            .unwrap()
            .unwrap();
        assert_eq!(m.rel, 1.0);
        assert_eq!(m.rms, 1.0);
        assert!((m.log10 - 0.301030).abs() < 1e-6);
        assert_eq!((m.delta1, m.delta2, m.delta3), (0.0, 0.0, 0.0));
    }

    #[test]
    fn pred_denominator() {
        let m = depth_metrics(&t(&[2.0]), &t(&[1.0]), &t(&[1.0]), RelDenominator::Pred)
            .unwrap()
            .unwrap();
        assert_eq!(m.rel, 0.5);
    }

    #[test]
    fn no_valid_pixels_is_undefined() {
        assert!(depth_metrics(&t(&[2.0]), &t(&[1.0]), &t(&[0.0]), RelDenominator::Gt)
            .unwrap()
            .is_none());
        let gt = LabelMap::from_vec(1, 1, 2, vec![255, 255]).unwrap();
        assert!(parsing_metrics(&gt, &gt, 3, 255).unwrap().is_none());
    }

    #[test]
    fn prediction_floor_avoids_blowup() {
        let m = depth_metrics(&t(&[-5.0]), &t(&[1.0]), &t(&[1.0]), RelDenominator::Pred)
            .unwrap()
            .unwrap();
        assert!(m.rel.is_finite() && m.log10.is_finite());
    }

    #[test]
    fn table_marks_undefined() {
        let s = format_table(&[MetricsRow {
            method: "x".into(),
            depth: None,
            parsing: None,
        }]);
        assert_eq!(s.lines().count(), 2);
        assert!(s.lines().nth(1).unwrap().contains("undefined"));
    }
}
