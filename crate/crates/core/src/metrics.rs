//! Detection evaluation: greedy IoU matching, 101-point interpolated average
//! precision, mAP50 / mAP50-95, and a single precision/recall operating point
//! chosen by best F1. `brute_force_map` recomputes the same contract by naive
//! enumeration and serves as the conformance oracle for `evaluate`.
//!
//! Ordering contract shared by both paths: within an image, detections sort by
//! score descending then box (cx, cy, w, h) lexicographic; across images the
//! ranked list additionally breaks ties by sample index. Matching is greedy in
//! that order: each detection takes the unmatched ground truth of its class
//! with the highest IoU at or above the threshold, lower gt index on ties.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, to_corner, BoxCS};
use crate::error::{Error, Result};
use crate::model::Detection;

/// Detections and ground truth of one image.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub image_id: String,
    pub detections: Vec<Detection>,
    /// (class, box) pairs.
    pub ground_truths: Vec<(usize, BoxCS)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerClassAp {
    pub ap50: f64,
    pub ap50_95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map50_95: f64,
    pub per_class: BTreeMap<usize, PerClassAp>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// How the scalar precision/recall pair is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OperatingPoint {
    /// Confidence threshold maximizing F1 at IoU 0.5 (highest threshold wins ties).
    BestF1,
    /// A caller-fixed confidence threshold.
    Fixed(f64),
}

/// IoU thresholds of the mAP50-95 column.
pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// TP/FP flags for score-sorted detections of a single class against the
/// ground-truth boxes of that class.
pub fn greedy_match(dets: &[Detection], gt_boxes: &[BoxCS], iou_thr: f64) -> Vec<bool> {
    debug_assert!(dets.windows(2).all(|w| w[0].score >= w[1].score));
    let mut taken = vec![false; gt_boxes.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for det in dets {
        let det_xy = to_corner(det.box_cs);
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gt_boxes.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let overlap = iou(det_xy, to_corner(*gt));
            if overlap < iou_thr {
                continue;
            }
            // Strictly greater keeps the lower gt index on ties.
            if best.map_or(true, |(_, b)| overlap > b) {
                best = Some((gi, overlap));
            }
        }
        match best {
            Some((gi, _)) => {
                taken[gi] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    flags
}

/// 101-point interpolated average precision from ranked TP/FP flags.
pub fn average_precision(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precisions = Vec::with_capacity(flags.len());
    let mut recalls = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / num_gt as f64);
    }
    // Backward running max turns the raw curve into its interpolated envelope.
    let mut envelope = precisions.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        // First rank reaching recall r; recalls are non-decreasing.
        let p = recalls
            .iter()
            .position(|&rc| rc >= r - 1e-12)
            .map_or(0.0, |i| envelope[i]);
        total += p;
    }
    total / 101.0
}

fn det_key(d: &Detection) -> (f64, f64, f64, f64, f64) {
    (-d.score, d.box_cs.cx, d.box_cs.cy, d.box_cs.w, d.box_cs.h)
}

fn cmp_key(a: &(f64, f64, f64, f64, f64), b: &(f64, f64, f64, f64, f64)) -> std::cmp::Ordering {
    a.partial_cmp(b).expect("finite detection fields")
}

/// Ranked flags for one class across all samples at one IoU threshold.
fn ranked_flags(samples: &[EvalSample], class: usize, iou_thr: f64) -> (Vec<bool>, usize) {
    let mut ranked: Vec<(f64, usize, (f64, f64, f64, f64, f64), bool)> = Vec::new();
    let mut num_gt = 0usize;
    for (si, s) in samples.iter().enumerate() {
        let gt_boxes: Vec<BoxCS> = s
            .ground_truths
            .iter()
            .filter(|(c, _)| *c == class)
            .map(|&(_, b)| b)
            .collect();
        num_gt += gt_boxes.len();
        let mut dets: Vec<Detection> = s
            .detections
            .iter()
            .filter(|d| d.class_id == class)
            .cloned()
            .collect();
        dets.sort_by(|a, b| cmp_key(&det_key(a), &det_key(b)));
        let flags = greedy_match(&dets, &gt_boxes, iou_thr);
        for (d, f) in dets.iter().zip(flags) {
            ranked.push((-d.score, si, det_key(d), f));
        }
    }
    ranked.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("finite scores")
            .then(a.1.cmp(&b.1))
            .then(cmp_key(&a.2, &b.2))
    });
    (ranked.into_iter().map(|(_, _, _, f)| f).collect(), num_gt)
}

/// Classes that appear in the ground truth anywhere in the set.
fn gt_classes(samples: &[EvalSample]) -> Vec<usize> {
    let mut classes: Vec<usize> = samples
        .iter()
        .flat_map(|s| s.ground_truths.iter().map(|(c, _)| *c))
        .collect();
    classes.sort_unstable();
    classes.dedup();
    classes
}

/// Micro precision/recall over all classes at one confidence threshold,
/// matching at IoU 0.5.
fn precision_recall_at(samples: &[EvalSample], classes: &[usize], threshold: f64) -> (f64, f64) {
    let mut tp = 0usize;
    let mut kept = 0usize;
    let mut total_gt = 0usize;
    for s in samples {
        for &class in classes {
            let gt_boxes: Vec<BoxCS> = s
                .ground_truths
                .iter()
                .filter(|(c, _)| *c == class)
                .map(|&(_, b)| b)
                .collect();
            total_gt += gt_boxes.len();
            let mut dets: Vec<Detection> = s
                .detections
                .iter()
                .filter(|d| d.class_id == class && d.score >= threshold)
                .cloned()
                .collect();
            dets.sort_by(|a, b| cmp_key(&det_key(a), &det_key(b)));
            let flags = greedy_match(&dets, &gt_boxes, 0.5);
            kept += dets.len();
            tp += flags.iter().filter(|&&f| f).count();
        }
        // Detections of classes absent from the ground truth set still count
        // against precision.
        kept += s
            .detections
            .iter()
            .filter(|d| !classes.contains(&d.class_id) && d.score >= threshold)
            .count();
    }
    let precision = if kept == 0 { 0.0 } else { tp as f64 / kept as f64 };
    let recall = if total_gt == 0 { 0.0 } else { tp as f64 / total_gt as f64 };
    (precision, recall)
}

/// Full COCO-style report over a non-empty sample set.
pub fn evaluate(samples: &[EvalSample], operating_point: OperatingPoint) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Input("evaluate requires at least one sample".into()));
    }
    let classes = gt_classes(samples);

    let mut per_class = BTreeMap::new();
    let mut map50 = 0.0;
    let mut map50_95 = 0.0;
    for &class in &classes {
        let mut ap_sum = 0.0;
        let mut ap50 = 0.0;
        for (ti, &thr) in IOU_THRESHOLDS.iter().enumerate() {
            let (flags, num_gt) = ranked_flags(samples, class, thr);
            let ap = average_precision(&flags, num_gt);
            ap_sum += ap;
            if ti == 0 {
                ap50 = ap;
            }
        }
        let ap_mean = ap_sum / IOU_THRESHOLDS.len() as f64;
        per_class.insert(class, PerClassAp { ap50, ap50_95: ap_mean });
        map50 += ap50;
        map50_95 += ap_mean;
    }
    if !classes.is_empty() {
        map50 /= classes.len() as f64;
        map50_95 /= classes.len() as f64;
    }

    let (precision, recall) = match operating_point {
        OperatingPoint::Fixed(t) => precision_recall_at(samples, &classes, t),
        OperatingPoint::BestF1 => {
            let mut thresholds: Vec<f64> = samples
                .iter()
                .flat_map(|s| s.detections.iter().map(|d| d.score))
                .collect();
            thresholds.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
            thresholds.dedup();
            let mut best = (0.0, 0.0);
            let mut best_f1 = -1.0;
            for &t in &thresholds {
                let (p, r) = precision_recall_at(samples, &classes, t);
                let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
                // Strict improvement keeps the highest qualifying threshold.
                if f1 > best_f1 {
                    best_f1 = f1;
                    best = (p, r);
                }
            }
            best
        }
    };

    Ok(MetricsReport { precision, recall, map50, map50_95, per_class })
}

/// Naive re-derivation of [`evaluate`]'s contract: per-rank precision/recall
/// recomputed from scratch, the 101-point grid scanned point by point, and
/// the operating point enumerated threshold by threshold. Guarded to small
/// inputs; this is the oracle, not the tool.
pub fn brute_force_map(samples: &[EvalSample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Input("evaluate requires at least one sample".into()));
    }
    for s in samples {
        if s.detections.len() > 20 {
            return Err(Error::Size(format!(
                "brute-force evaluator is guarded at 20 detections per image, got {}",
                s.detections.len()
            )));
        }
    }

    // Independent greedy matcher.
    fn naive_match(dets: &[Detection], gts: &[BoxCS], thr: f64) -> Vec<bool> {
        let mut used = vec![false; gts.len()];
        let mut out = Vec::new();
        for d in dets {
            let mut chosen = usize::MAX;
            let mut best_iou = -1.0;
            for gi in 0..gts.len() {
                if used[gi] {
                    continue;
                }
                let ov = iou(to_corner(d.box_cs), to_corner(gts[gi]));
                if ov >= thr && ov > best_iou {
                    best_iou = ov;
                    chosen = gi;
                }
            }
            if chosen != usize::MAX {
                used[chosen] = true;
                out.push(true);
            } else {
                out.push(false);
            }
        }
        out
    }

    fn sort_dets(dets: &mut Vec<Detection>) {
        dets.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .expect("finite")
                .then(a.box_cs.cx.partial_cmp(&b.box_cs.cx).expect("finite"))
                .then(a.box_cs.cy.partial_cmp(&b.box_cs.cy).expect("finite"))
                .then(a.box_cs.w.partial_cmp(&b.box_cs.w).expect("finite"))
                .then(a.box_cs.h.partial_cmp(&b.box_cs.h).expect("finite"))
        });
    }

    let mut classes: Vec<usize> = Vec::new();
    for s in samples {
        for &(c, _) in &s.ground_truths {
            if !classes.contains(&c) {
                classes.push(c);
            }
        }
    }
    classes.sort_unstable();

    // AP per class per threshold, the long way.
    let ap_of = |class: usize, thr: f64| -> f64 {
        #[allow(clippy::type_complexity)]
        let mut ranked: Vec<(f64, usize, f64, f64, f64, f64, bool)> = Vec::new();
        let mut num_gt = 0usize;
        for (si, s) in samples.iter().enumerate() {
            let gts: Vec<BoxCS> = s
                .ground_truths
                .iter()
                .filter(|(c, _)| *c == class)
                .map(|&(_, b)| b)
                .collect();
            num_gt += gts.len();
            let mut dets: Vec<Detection> = s
                .detections
                .iter()
                .filter(|d| d.class_id == class)
                .cloned()
                .collect();
            sort_dets(&mut dets);
            let flags = naive_match(&dets, &gts, thr);
            for (d, f) in dets.iter().zip(flags) {
                ranked.push((d.score, si, d.box_cs.cx, d.box_cs.cy, d.box_cs.w, d.box_cs.h, f));
            }
        }
        ranked.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("finite")
                .then(a.1.cmp(&b.1))
                .then(a.2.partial_cmp(&b.2).expect("finite"))
                .then(a.3.partial_cmp(&b.3).expect("finite"))
                .then(a.4.partial_cmp(&b.4).expect("finite"))
                .then(a.5.partial_cmp(&b.5).expect("finite"))
        });
        if num_gt == 0 {
            return 0.0;
        }
        let mut ap = 0.0;
        for k in 0..=100 {
            let r = k as f64 / 100.0;
            // Best precision among ranks whose recall reaches r, recomputed
            // from scratch for every rank.
            let mut best_p = 0.0;
            for rank in 0..ranked.len() {
                let tp = ranked[..=rank].iter().filter(|e| e.6).count();
                let recall = tp as f64 / num_gt as f64;
                if recall >= r - 1e-12 {
                    let precision = tp as f64 / (rank + 1) as f64;
                    if precision > best_p {
                        best_p = precision;
                    }
                }
            }
            ap += best_p;
        }
        ap / 101.0
    };

    let mut per_class = BTreeMap::new();
    let mut map50 = 0.0;
    let mut map50_95 = 0.0;
    for &c in &classes {
        let ap50 = ap_of(c, 0.50);
        let mut sum = 0.0;
        for &t in &IOU_THRESHOLDS {
            sum += ap_of(c, t);
        }
        let ap_mean = sum / IOU_THRESHOLDS.len() as f64;
        per_class.insert(c, PerClassAp { ap50, ap50_95: ap_mean });
        map50 += ap50;
        map50_95 += ap_mean;
    }
    if !classes.is_empty() {
        map50 /= classes.len() as f64;
        map50_95 /= classes.len() as f64;
    }

    // Operating point by threshold enumeration.
    let pr_at = |t: f64| -> (f64, f64) {
        let mut tp = 0usize;
        let mut kept = 0usize;
        let mut total_gt = 0usize;
        for s in samples {
            total_gt += s.ground_truths.len();
            for &c in &classes {
                let gts: Vec<BoxCS> = s
                    .ground_truths
                    .iter()
                    .filter(|(cc, _)| *cc == c)
                    .map(|&(_, b)| b)
                    .collect();
                let mut dets: Vec<Detection> = s
                    .detections
                    .iter()
                    .filter(|d| d.class_id == c && d.score >= t)
                    .cloned()
                    .collect();
                sort_dets(&mut dets);
                let flags = naive_match(&dets, &gts, 0.5);
                tp += flags.iter().filter(|&&f| f).count();
                kept += dets.len();
            }
            kept += s
                .detections
                .iter()
                .filter(|d| d.score >= t && !classes.contains(&d.class_id))
                .count();
        }
        (
            if kept == 0 { 0.0 } else { tp as f64 / kept as f64 },
            if total_gt == 0 { 0.0 } else { tp as f64 / total_gt as f64 },
        )
    };

    let mut scores: Vec<f64> = samples
        .iter()
        .flat_map(|s| s.detections.iter().map(|d| d.score))
        .collect();
    scores.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    scores.dedup();
    let mut best = (0.0, 0.0);
    let mut best_f1 = -1.0;
    for &t in &scores {
        let (p, r) = pr_at(t);
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        if f1 > best_f1 {
            best_f1 = f1;
            best = (p, r);
        }
    }

    Ok(MetricsReport {
        precision: best.0,
        recall: best.1,
        map50,
        map50_95,
        per_class,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectionRecord {
    image_id: String,
    class_id: usize,
    score: f64,
    box_cs: [f64; 4],
}

/// One JSON object per line: `{"image_id", "class_id", "score", "box_cs"}`.
pub fn write_detections(path: &Path, per_image: &[(String, Vec<Detection>)]) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for (image_id, dets) in per_image {
        for d in dets {
            let rec = DetectionRecord {
                image_id: image_id.clone(),
                class_id: d.class_id,
                score: d.score,
                box_cs: d.box_cs.as_array(),
            };
            writeln!(out, "{}", serde_json::to_string(&rec)?)?;
        }
    }
    Ok(())
}

/// Reads a detections file back, grouped by image id in first-seen order.
pub fn read_detections(path: &Path) -> Result<Vec<(String, Vec<Detection>)>> {
    let file = fs::File::open(path)?;
    let mut groups: Vec<(String, Vec<Detection>)> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            line: i + 1,
            msg: format!("bad detection record: {e}"),
        })?;
        let det = Detection {
            box_cs: BoxCS::new(rec.box_cs[0], rec.box_cs[1], rec.box_cs[2], rec.box_cs[3]),
            class_id: rec.class_id,
            score: rec.score,
        };
        match groups.iter_mut().find(|(id, _)| *id == rec.image_id) {
            Some((_, v)) => v.push(det),
            None => groups.push((rec.image_id, vec![det])),
        }
    }
    Ok(groups)
}
