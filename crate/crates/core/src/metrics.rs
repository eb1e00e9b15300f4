// SPDX-License-Identifier: Apache-2.0

//! Pointwise evaluation: per-class IoU, Average Precision over ten IoU
//! thresholds and panoptic quality with its SQ × RQ split.
//!
//! Every metric is accumulated as integer counts per scan and only divided
//! at the end, so dataset-level numbers do not depend on how scans are
//! grouped or in which order they are merged.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::pointcloud::ClassId;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub const AP_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Matches in panoptic quality need strictly more than this IoU.
pub const PQ_MATCH_IOU: f64 = 0.5;

pub type PerClass<T> = [T; ClassId::COUNT];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: PerClass<u64>,
    pub fp: PerClass<u64>,
    pub fn_: PerClass<u64>,
}

impl ConfusionCounts {
    pub fn from_labels(pred: &[ClassId], gt: &[ClassId]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::Contract(format!(
                "{} predicted labels for {} ground-truth labels",
                pred.len(),
                gt.len()
            )));
        }
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt) {
            if p == g {
                c.tp[p.index()] += 1;
            } else {
                c.fp[p.index()] += 1;
                c.fn_[g.index()] += 1;
            }
        }
        Ok(c)
    }

    pub fn merge(&mut self, other: &Self) {
        for k in 0..ClassId::COUNT {
            self.tp[k] += other.tp[k];
            self.fp[k] += other.fp[k];
            self.fn_[k] += other.fn_[k];
        }
    }

    /// `TP / (TP + FP + FN)`; `None` for classes absent from both sides.
    pub fn iou(&self) -> PerClass<Option<f64>> {
        std::array::from_fn(|k| {
            let denom = self.tp[k] + self.fp[k] + self.fn_[k];
            (denom > 0).then(|| self.tp[k] as f64 / denom as f64)
        })
    }
}

pub fn iou_per_class(pred: &[ClassId], gt: &[ClassId]) -> Result<PerClass<Option<f64>>> {
    Ok(ConfusionCounts::from_labels(pred, gt)?.iou())
}

/// A set of scan points carrying one class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceSet {
    pub id: usize,
    pub class: ClassId,
    /// Sorted, without duplicates.
    pub points: Vec<u32>,
}

impl InstanceSet {
    pub fn new(id: usize, class: ClassId, mut points: Vec<u32>) -> Self {
        points.sort_unstable();
        points.dedup();
        Self { id, class, points }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchRecord {
    pub prediction: usize,
    pub ground_truth: usize,
    pub iou: f64,
    pub class: ClassId,
}

/// Same-class (prediction index, ground-truth index, IoU) triples with a
/// non-empty intersection, sorted by descending IoU then by indices.
pub fn candidate_pairs(preds: &[InstanceSet], gts: &[InstanceSet]) -> Vec<(usize, usize, f64)> {
    let mut owner: HashMap<u32, Vec<usize>> = HashMap::new();
    for (g, gt) in gts.iter().enumerate() {
        for &p in &gt.points {
            owner.entry(p).or_default().push(g);
        }
    }
    let mut pairs = Vec::new();
    let mut inter: HashMap<usize, usize> = HashMap::new();
    for (p, pred) in preds.iter().enumerate() {
        inter.clear();
        for pt in &pred.points {
            if let Some(gs) = owner.get(pt) {
                for &g in gs {
                    *inter.entry(g).or_default() += 1;
                }
            }
        }
        for (&g, &n) in &inter {
            if gts[g].class != pred.class {
                continue;
            }
            let union = pred.points.len() + gts[g].points.len() - n;
            pairs.push((p, g, n as f64 / union as f64));
        }
    }
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    pairs
}

/// One-to-one greedy matching over `pairs` (already sorted) keeping pairs
/// that satisfy `accept`.
pub fn greedy_match(
    pairs: &[(usize, usize, f64)],
    n_preds: usize,
    n_gts: usize,
    accept: impl Fn(f64) -> bool,
) -> Vec<(usize, usize, f64)> {
    let mut pred_used = vec![false; n_preds];
    let mut gt_used = vec![false; n_gts];
    let mut out = Vec::new();
    for &(p, g, iou) in pairs {
        if !accept(iou) {
            continue;
        }
        if !pred_used[p] && !gt_used[g] {
            pred_used[p] = true;
            gt_used[g] = true;
            out.push((p, g, iou));
        }
    }
    out
}

fn things(sets: &[InstanceSet]) -> Vec<InstanceSet> {
    sets.iter()
        .filter(|s| s.class != ClassId::None && !s.points.is_empty())
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ApCounts {
    pub true_positives: [u64; 10],
    pub predictions: u64,
}

impl ApCounts {
    pub fn from_scan(preds: &[InstanceSet], gts: &[InstanceSet]) -> Self {
        let (preds, gts) = (things(preds), things(gts));
        let pairs = candidate_pairs(&preds, &gts);
        let mut c = ApCounts {
            predictions: preds.len() as u64,
            ..Default::default()
        };
        for (k, &t) in AP_THRESHOLDS.iter().enumerate() {
            c.true_positives[k] =
                greedy_match(&pairs, preds.len(), gts.len(), |iou| iou >= t).len() as u64;
        }
        c
    }

    pub fn merge(&mut self, other: &Self) {
        for k in 0..10 {
            self.true_positives[k] += other.true_positives[k];
        }
        self.predictions += other.predictions;
    }

    /// Precision per threshold; zero when there are no predictions.
    pub fn precisions(&self) -> [f64; 10] {
        std::array::from_fn(|k| {
            if self.predictions == 0 {
                0.0
            } else {
                self.true_positives[k] as f64 / self.predictions as f64
            }
        })
    }

    pub fn summary(&self) -> ApSummary {
        let p = self.precisions();
        ApSummary {
            ap: p.iter().sum::<f64>() / 10.0,
            ap50: p[0],
            ap75: p[5],
            ap95: p[9],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap95: f64,
}

pub fn average_precision(preds: &[InstanceSet], gts: &[InstanceSet]) -> ApSummary {
    ApCounts::from_scan(preds, gts).summary()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PanopticCounts {
    pub tp: PerClass<u64>,
    pub fp: PerClass<u64>,
    pub fn_: PerClass<u64>,
    pub iou_sum: PerClass<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassPanoptic {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl PanopticCounts {
    pub fn from_scan(preds: &[InstanceSet], gts: &[InstanceSet]) -> (Self, Vec<MatchRecord>) {
        let (preds, gts) = (things(preds), things(gts));
        let pairs = candidate_pairs(&preds, &gts);
        let matches = greedy_match(&pairs, preds.len(), gts.len(), |iou| iou > PQ_MATCH_IOU);
        let mut c = Self::default();
        let mut records = Vec::with_capacity(matches.len());
        for &(p, g, iou) in &matches {
            let k = preds[p].class.index();
            c.tp[k] += 1;
            c.iou_sum[k] += iou;
            records.push(MatchRecord {
                prediction: preds[p].id,
                ground_truth: gts[g].id,
                iou,
                class: preds[p].class,
            });
        }
        for p in &preds {
            c.fp[p.class.index()] += 1;
        }
        for g in &gts {
            c.fn_[g.class.index()] += 1;
        }
        for k in 0..ClassId::COUNT {
            c.fp[k] -= c.tp[k];
            c.fn_[k] -= c.tp[k];
        }
        (c, records)
    }

    pub fn merge(&mut self, other: &Self) {
        for k in 0..ClassId::COUNT {
            self.tp[k] += other.tp[k];
            self.fp[k] += other.fp[k];
            self.fn_[k] += other.fn_[k];
            self.iou_sum[k] += other.iou_sum[k];
        }
    }

    pub fn result(&self) -> PerClass<Option<ClassPanoptic>> {
        std::array::from_fn(|k| {
            let (tp, fp, fn_) = (self.tp[k], self.fp[k], self.fn_[k]);
            if tp + fp + fn_ == 0 {
                return None;
            }
            let sq = if tp > 0 { self.iou_sum[k] / tp as f64 } else { 0.0 };
            let rq = tp as f64 / (tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64);
            Some(ClassPanoptic {
                pq: sq * rq,
                sq,
                rq,
                tp,
                fp,
                fn_,
            })
        })
    }
}

pub fn panoptic_quality(
    preds: &[InstanceSet],
    gts: &[InstanceSet],
) -> PerClass<Option<ClassPanoptic>> {
    PanopticCounts::from_scan(preds, gts).0.result()
}

/// Dataset-level accumulator of all three metric families.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Evaluator {
    pub confusion: ConfusionCounts,
    pub ap: ApCounts,
    pub panoptic: PanopticCounts,
    pub scans: usize,
}

impl Evaluator {
    pub fn add_scan(
        &mut self,
        pred_labels: &[ClassId],
        gt_labels: &[ClassId],
        pred_instances: &[InstanceSet],
        gt_instances: &[InstanceSet],
    ) -> Result<()> {
        self.merge(&Self::scan(pred_labels, gt_labels, pred_instances, gt_instances)?);
        Ok(())
    }

    pub fn scan(
        pred_labels: &[ClassId],
        gt_labels: &[ClassId],
        pred_instances: &[InstanceSet],
        gt_instances: &[InstanceSet],
    ) -> Result<Self> {
        Ok(Self {
            confusion: ConfusionCounts::from_labels(pred_labels, gt_labels)?,
            ap: ApCounts::from_scan(pred_instances, gt_instances),
            panoptic: PanopticCounts::from_scan(pred_instances, gt_instances).0,
            scans: 1,
        })
    }

    pub fn merge(&mut self, other: &Self) {
        self.confusion.merge(&other.confusion);
        self.ap.merge(&other.ap);
        self.panoptic.merge(&other.panoptic);
        self.scans += other.scans;
    }

    pub fn report(&self) -> MetricsReport {
        MetricsReport {
            iou: self.confusion.iou(),
            ap: self.ap.summary(),
            panoptic: self.panoptic.result(),
            scans: self.scans,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub iou: PerClass<Option<f64>>,
    pub ap: ApSummary,
    pub panoptic: PerClass<Option<ClassPanoptic>>,
    pub scans: usize,
}

impl MetricsReport {
    /// One `metric class value` triple per line; `all` for dataset-wide values.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scans all {}", self.scans);
        for c in ClassId::ALL {
            if let Some(v) = self.iou[c.index()] {
                let _ = writeln!(s, "iou {c} {v:.6}");
            }
        }
        let _ = writeln!(s, "ap all {:.6}", self.ap.ap);
        let _ = writeln!(s, "ap50 all {:.6}", self.ap.ap50);
        let _ = writeln!(s, "ap75 all {:.6}", self.ap.ap75);
        let _ = writeln!(s, "ap95 all {:.6}", self.ap.ap95);
        for c in ClassId::THINGS {
            if let Some(p) = self.panoptic[c.index()] {
                let _ = writeln!(s, "pq {c} {:.6}", p.pq);
                let _ = writeln!(s, "sq {c} {:.6}", p.sq);
                let _ = writeln!(s, "rq {c} {:.6}", p.rq);
            }
        }
        s
    }

    /// Human-readable tables: semantic IoU, detection AP, panoptic quality.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("    -".to_string(), |v| format!("{v:.3}"));
        let mut s = String::new();
        let _ = writeln!(s, "Semantic segmentation (IoU), {} scans", self.scans);
        let _ = writeln!(s, "  {:>10} {:>10} {:>10} {:>10} {:>10}", "None", "Car", "Truck", "Bike", "Pedestrian");
        let row: Vec<String> = ClassId::ALL
            .iter()
            .map(|c| format!("{:>10}", fmt(self.iou[c.index()])))
            .collect();
        let _ = writeln!(s, "  {}", row.join(" "));
        let _ = writeln!(s);
        let _ = writeln!(s, "Object detection (AP)");
        let _ = writeln!(s, "  {:>8} {:>8} {:>8} {:>8}", "AP", "AP@0.5", "AP@0.75", "AP@0.95");
        let _ = writeln!(
            s,
            "  {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
            self.ap.ap, self.ap.ap50, self.ap.ap75, self.ap.ap95
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "Panoptic segmentation");
        let _ = writeln!(s, "  {:<11} {:>7} {:>7} {:>7} {:>7}", "Class", "PQ", "SQ", "RQ", "IoU");
        for c in ClassId::THINGS {
            let p = self.panoptic[c.index()];
            let _ = writeln!(
                s,
                "  {:<11} {:>7} {:>7} {:>7} {:>7}",
                c.name(),
                fmt(p.map(|p| p.pq)),
                fmt(p.map(|p| p.sq)),
                fmt(p.map(|p| p.rq)),
                fmt(self.iou[c.index()])
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ClassId::*;

    fn set(id: usize, class: ClassId, pts: std::ops::Range<u32>) -> InstanceSet {
        InstanceSet::new(id, class, pts.collect())
    }

    #[test]
    fn iou_identity_and_hand_case() {
        let gt = [Car, Car, None, Bike];
        let iou = iou_per_class(&gt, &gt).unwrap();
        assert_eq!(iou[Car.index()], Some(1.0));
        assert_eq!(iou[Bike.index()], Some(1.0));
        assert_eq!(iou[Truck.index()], Option::None);

        // Car: TP 2, FP 1, FN 1.
        let pred = [Car, Car, Car, None, None];
        let gt = [Car, Car, None, Car, None];
        assert_eq!(iou_per_class(&pred, &gt).unwrap()[Car.index()], Some(0.5));

        let iou = iou_per_class(&[None, None], &[Pedestrian, None]).unwrap();
        assert_eq!(iou[Pedestrian.index()], Some(0.0));
        assert!(iou_per_class(&[None], &[]).is_err());
    }

    #[test]
    fn ap_perfect_and_empty() {
        let gts = [set(0, Car, 0..10), set(1, Bike, 10..20)];
        assert_eq!(average_precision(&gts, &gts).ap, 1.0);
        assert_eq!(average_precision(&[], &gts).ap, 0.0);
    }

    #[test]
    fn ap_single_prediction_at_iou_070() {
        // 7 shared of 10 union points.
        let gt = [set(0, Car, 0..10)];
        let pred = [set(0, Car, 0..7)];
        let s = average_precision(&pred, &gt);
        assert_eq!(s.ap, 0.5);
        assert_eq!((s.ap50, s.ap75, s.ap95), (1.0, 0.0, 0.0));
    }

    #[test]
    fn ap_ignores_none_and_other_classes() {
        let gt = [set(0, Car, 0..10)];
        let pred = [set(0, Truck, 0..10), set(1, None, 0..10)];
        let c = ApCounts::from_scan(&pred, &gt);
        assert_eq!(c.predictions, 1);
        assert_eq!(c.true_positives, [0; 10]);
    }

    #[test]
    fn pq_examples() {
        // IoU 0.8: 8 shared of 10 union.
        let gt = [set(0, Car, 0..10)];
        let pred = [set(0, Car, 0..8)];
        let p = panoptic_quality(&pred, &gt)[Car.index()].unwrap();
        assert!((p.sq - 0.8).abs() < 1e-12 && p.rq == 1.0 && (p.pq - 0.8).abs() < 1e-12);

        let pred = [set(0, Car, 0..8), set(1, Car, 100..110)];
        let p = panoptic_quality(&pred, &gt)[Car.index()].unwrap();
        assert!((p.sq - 0.8).abs() < 1e-12);
        assert!((p.rq - 1.0 / 1.5).abs() < 1e-12);
        assert!((p.pq - 0.8 / 1.5).abs() < 1e-12);
        assert!((p.pq - 0.5333).abs() < 1e-4);

        let gts = [set(0, Car, 0..10), set(1, Pedestrian, 10..14)];
        let r = panoptic_quality(&gts, &gts);
        for c in [Car, Pedestrian] {
            let p = r[c.index()].unwrap();
            assert_eq!((p.pq, p.sq, p.rq), (1.0, 1.0, 1.0));
        }
        assert!(r[Truck.index()].is_none());
    }

    #[test]
    fn pq_zero_without_matches() {
        let gt = [set(0, Bike, 0..10)];
        let pred = [set(0, Bike, 0..5)]; // IoU exactly 0.5 is not a match
        let p = panoptic_quality(&pred, &gt)[Bike.index()].unwrap();
        assert_eq!((p.tp, p.fp, p.fn_), (0, 1, 1));
        assert_eq!(p.pq, 0.0);
    }

    #[test]
    fn report_text_lines() {
        let gts = [set(0, Car, 0..10)];
        let mut e = Evaluator::default();
        let labels: Vec<ClassId> = (0..12).map(|i| if i < 10 { Car } else { None }).collect();
        e.add_scan(&labels, &labels, &gts, &gts).unwrap();
        let text = e.report().to_text();
        assert!(text.contains("iou Car 1.000000"));
        assert!(text.contains("ap all 1.000000"));
        assert!(text.contains("pq Car 1.000000"));
        assert!(text.lines().all(|l| l.split_whitespace().count() == 3));
        assert!(e.report().to_table().contains("Panoptic"));
    }
}
