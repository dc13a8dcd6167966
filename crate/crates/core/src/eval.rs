//! Evaluation protocol: cosine region scoring, caption assignment with
//! class-agnostic NMS, and COCO-style mAP over the benchmark subsets.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::objectives::BoundingBox;
use crate::tensor::Tensor;
use crate::world::{AttrSubset, Difficulty, SceneRecord, EVAL_SUBSETS};

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    DimMismatch { left: usize, right: usize },
    BadThreshold { value: f64 },
    ShapeMismatch { detail: String },
    Scorer { detail: String },
}

impl core::fmt::Display for EvalError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            EvalError::DimMismatch { left, right } => {
                write!(f, "feature dims differ: {left} vs {right}")
            }
            EvalError::BadThreshold { value } => {
                write!(f, "IoU threshold must be in (0, 1), got {value}")
            }
            EvalError::ShapeMismatch { detail } => write!(f, "{detail}"),
            EvalError::Scorer { detail } => write!(f, "scorer failed: {detail}"),
        }
    }
}

impl core::error::Error for EvalError {}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// A region committed to its argmax caption.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Detection {
    pub bbox: BoundingBox,
    pub caption: usize,
    pub score: f64,
}

/// Cosine similarities `[R, C]`; zero-norm vectors score 0 against
/// everything.
pub fn score_regions(
    region_feats: &[Tensor],
    caption_embeds: &[Tensor],
) -> Result<Tensor, EvalError> {
    let (r, c) = (region_feats.len(), caption_embeds.len());
    let mut zero_norms = 0usize;
    let mut data = Vec::with_capacity(r * c);
    for feat in region_feats {
        let fn2 = feat.l2();
        for emb in caption_embeds {
            if feat.len() != emb.len() {
                return Err(EvalError::DimMismatch {
                    left: feat.len(),
                    right: emb.len(),
                });
            }
            let en2 = emb.l2();
            if fn2 == 0.0 || en2 == 0.0 {
                zero_norms += 1;
                data.push(0.0);
            } else {
                let dot: f64 = feat
                    .data()
                    .iter()
                    .zip(emb.data())
                    .map(|(a, b)| a * b)
                    .sum();
                data.push(dot / (fn2 * en2));
            }
        }
    }
    if zero_norms > 0 {
        log::warn!("{zero_norms} zero-norm pairs scored 0");
    }
    Tensor::new(vec![r, c], data).map_err(|e| EvalError::ShapeMismatch {
        detail: format!("{e}"),
    })
}

/// Argmax caption per region, then greedy class-agnostic NMS by descending
/// score. A box is suppressed when its IoU with an already-kept box
/// strictly exceeds the threshold, regardless of caption label. Score ties
/// break by region index.
pub fn assign_and_nms(
    sims: &Tensor,
    boxes: &[BoundingBox],
    iou_threshold: f64,
) -> Result<Vec<Detection>, EvalError> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(EvalError::BadThreshold {
            value: iou_threshold,
        });
    }
    if sims.shape().len() != 2 || sims.rows() != boxes.len() {
        return Err(EvalError::ShapeMismatch {
            detail: format!(
                "similarity shape {:?} does not cover {} boxes",
                sims.shape(),
                boxes.len()
            ),
        });
    }
    let c = sims.cols();
    let mut labeled: Vec<Detection> = boxes
        .iter()
        .enumerate()
        .map(|(i, &bbox)| {
            let row = sims.row(i);
            let mut best = 0usize;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            Detection {
                bbox,
                caption: best,
                score: row[best],
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    order.sort_by(|&a, &b| {
        labeled[b]
            .score
            .partial_cmp(&labeled[a].score)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for idx in order {
        let cand = &labeled[idx];
        if kept.iter().all(|k| iou(&k.bbox, &cand.bbox) <= iou_threshold) {
            kept.push(cand.clone());
        }
    }
    labeled.clear();
    Ok(kept)
}

/// One image's detections and caption-labeled ground truths.
#[derive(Debug, Clone, Default)]
pub struct ImageEval {
    pub detections: Vec<Detection>,
    pub ground_truths: Vec<(BoundingBox, usize)>,
}

const MAP_THRESHOLDS: core::ops::RangeInclusive<usize> = 50..=95;

/// COCO-style mAP: thresholds 0.50 to 0.95 in steps of 0.05, greedy
/// score-descending matching requiring the caption label to agree, AP by
/// 101-point interpolation. `None` when there are no ground truths.
pub fn coco_map(images: &[ImageEval]) -> Option<f64> {
    let n_gt: usize = images.iter().map(|im| im.ground_truths.len()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut ap_sum = 0.0;
    let mut n_thresholds = 0usize;
    for t in MAP_THRESHOLDS.step_by(5) {
        let threshold = t as f64 / 100.0;
        ap_sum += ap_at_threshold(images, n_gt, threshold);
        n_thresholds += 1;
    }
    Some(ap_sum / n_thresholds as f64)
}

fn ap_at_threshold(images: &[ImageEval], n_gt: usize, threshold: f64) -> f64 {
    // (score, image, det) pooled across images, matched greedily per image.
    let mut pooled: Vec<(f64, usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(ii, im)| {
            im.detections
                .iter()
                .enumerate()
                .map(move |(di, d)| (d.score, ii, di))
        })
        .collect();
    pooled.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut gt_taken: Vec<Vec<bool>> = images
        .iter()
        .map(|im| vec![false; im.ground_truths.len()])
        .collect();
    let mut tp_flags = Vec::with_capacity(pooled.len());
    for &(_, ii, di) in &pooled {
        let det = &images[ii].detections[di];
        let mut matched = false;
        let mut best_iou = 0.0;
        let mut best_gt = 0usize;
        for (gi, (gbox, glabel)) in images[ii].ground_truths.iter().enumerate() {
            if gt_taken[ii][gi] || *glabel != det.caption {
                continue;
            }
            let v = iou(gbox, &det.bbox);
            if v >= threshold && v > best_iou {
                best_iou = v;
                best_gt = gi;
                matched = true;
            }
        }
        if matched {
            gt_taken[ii][best_gt] = true;
        }
        tp_flags.push(matched);
    }
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut recalls = Vec::with_capacity(tp_flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &is_tp in &tp_flags {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    // Monotone envelope from the right, then sample 101 recall points.
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        if precisions[i] < precisions[i + 1] {
            precisions[i] = precisions[i + 1];
        }
    }
    let mut acc = 0.0;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        let p = recalls
            .iter()
            .position(|&rc| rc >= target)
            .map(|idx| precisions[idx])
            .unwrap_or(0.0);
        acc += p;
    }
    acc / 101.0
}

/// Produces the `[R, C]` similarity matrix for one record.
pub trait RecordScorer {
    fn score_record(&self, record: &SceneRecord) -> Result<Tensor, EvalError>;
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SubsetResult {
    pub difficulty: Difficulty,
    pub subset: AttrSubset,
    pub records: usize,
    pub map: Option<f64>,
}

impl SubsetResult {
    /// Table column header: difficulty name for mixed-attribute columns,
    /// attribute type name otherwise.
    pub fn label(&self) -> &'static str {
        match self.subset {
            AttrSubset::Mixed => self.difficulty.name(),
            other => other.name(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub columns: Vec<SubsetResult>,
    pub average: Option<f64>,
    pub nms_iou: f64,
}

impl EvalReport {
    pub fn column(&self, label: &str) -> Option<&SubsetResult> {
        self.columns.iter().find(|c| c.label() == label)
    }
}

/// Runs the full protocol: per record, score, assign captions, NMS, then
/// per-subset mAP with the target instance as the single labeled ground
/// truth. The Average column is the mean over present columns.
pub fn run_protocol<S: RecordScorer + ?Sized>(
    scorer: &S,
    records: &[SceneRecord],
    nms_iou: f64,
) -> Result<EvalReport, EvalError> {
    let mut columns = Vec::with_capacity(EVAL_SUBSETS.len());
    for &(difficulty, subset) in &EVAL_SUBSETS {
        let group: Vec<&SceneRecord> = records
            .iter()
            .filter(|r| r.caption.difficulty == difficulty && r.caption.attr_subset == subset)
            .collect();
        let mut images = Vec::with_capacity(group.len());
        for rec in &group {
            let sims = scorer.score_record(rec)?;
            let boxes: Vec<BoundingBox> = rec.proposals.iter().map(|p| p.bbox).collect();
            let detections = assign_and_nms(&sims, &boxes, nms_iou)?;
            let target = &rec.instances[rec.target];
            images.push(ImageEval {
                detections,
                ground_truths: vec![(target.bbox, 0)],
            });
        }
        columns.push(SubsetResult {
            difficulty,
            subset,
            records: group.len(),
            map: coco_map(&images),
        });
    }
    let present: Vec<f64> = columns.iter().filter_map(|c| c.map).collect();
    let average = if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    };
    Ok(EvalReport {
        columns,
        average,
        nms_iou,
    })
}

/// Scores 1 for the exact target box against the positive caption and 0
/// everywhere else.
pub struct OracleScorer;

impl RecordScorer for OracleScorer {
    fn score_record(&self, record: &SceneRecord) -> Result<Tensor, EvalError> {
        let c = 1 + record.caption.negatives.len();
        let target = &record.instances[record.target];
        let mut data = vec![0.0; record.proposals.len() * c];
        for (i, p) in record.proposals.iter().enumerate() {
            if p.bbox == target.bbox {
                data[i * c] = 1.0;
            }
        }
        Tensor::new(vec![record.proposals.len(), c], data).map_err(|e| EvalError::ShapeMismatch {
            detail: format!("{e}"),
        })
    }
}

/// Always prefers the first negative caption.
pub struct AdversarialScorer;

impl RecordScorer for AdversarialScorer {
    fn score_record(&self, record: &SceneRecord) -> Result<Tensor, EvalError> {
        let c = 1 + record.caption.negatives.len();
        let mut data = vec![0.0; record.proposals.len() * c];
        if c > 1 {
            for i in 0..record.proposals.len() {
                data[i * c + 1] = 1.0;
            }
        }
        Tensor::new(vec![record.proposals.len(), c], data).map_err(|e| EvalError::ShapeMismatch {
            detail: format!("{e}"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::world::{gen_benchmark, GenParams, SyntheticWorld, WorldConfig};
    use rand::Rng;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_anchors() {
        let a = bb(0.0, 0.0, 0.5, 0.5);
        assert_eq!(iou(&a, &a), 1.0);
        let b = bb(0.6, 0.6, 0.9, 0.9);
        assert_eq!(iou(&a, &b), 0.0);
        // (0,0,2,2) vs (1,0,3,2) scaled into the unit square by 1/4.
        let c = bb(0.0, 0.0, 0.5, 0.5);
        let d = bb(0.25, 0.0, 0.75, 0.5);
        assert!((iou(&c, &d) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn score_regions_cosine_values() {
        let f1 = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let f2 = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let e1 = Tensor::new(vec![2], vec![2.0, 0.0]).unwrap();
        let e2 = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let s = score_regions(&[f1, f2], &[e1, e2]).unwrap();
        assert!((s.row(0)[0] - 1.0).abs() < 1e-12);
        assert_eq!(s.row(0)[1], 0.0);
        assert!((s.row(1)[0] - 0.6).abs() < 1e-12);
        assert!((s.row(1)[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn score_regions_zero_norm_is_zero() {
        let z = Tensor::zeros(vec![2]);
        let e = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let s = score_regions(&[z], &[e]).unwrap();
        assert_eq!(s.data(), &[0.0]);
    }

    #[test]
    fn nms_keeps_single_region() {
        let sims = Tensor::new(vec![1, 2], vec![0.3, 0.7]).unwrap();
        let dets = assign_and_nms(&sims, &[bb(0.1, 0.1, 0.4, 0.4)], 0.5).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].caption, 1);
        assert_eq!(dets[0].score, 0.7);
    }

    #[test]
    fn nms_suppresses_total_overlap() {
        let b = bb(0.1, 0.1, 0.4, 0.4);
        let sims = Tensor::new(vec![2, 1], vec![0.8, 0.9]).unwrap();
        let dets = assign_and_nms(&sims, &[b, b], 0.5).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].score, 0.9);
    }

    #[test]
    fn nms_hand_traced_chain() {
        // b0 overlaps b1 above threshold, b1 overlaps b2, b0 and b2 are
        // clear of each other: keep b0 (highest), drop b1, keep b2.
        let b0 = bb(0.0, 0.0, 0.4, 0.4);
        let b1 = bb(0.1, 0.0, 0.5, 0.4);
        let b2 = bb(0.2, 0.0, 0.6, 0.4);
        assert!(iou(&b0, &b1) > 0.5);
        assert!(iou(&b1, &b2) > 0.5);
        assert!(iou(&b0, &b2) < 0.5);
        let sims = Tensor::new(vec![3, 1], vec![0.9, 0.8, 0.7]).unwrap();
        let dets = assign_and_nms(&sims, &[b0, b1, b2], 0.5).unwrap();
        let kept: Vec<f64> = dets.iter().map(|d| d.score).collect();
        assert_eq!(kept, [0.9, 0.7]);
    }

    #[test]
    fn nms_order_invariant_for_distinct_scores() {
        let mut rng = stream(61, "test.eval.nms");
        let boxes: Vec<BoundingBox> = (0..6)
            .map(|_| {
                let x0: f64 = rng.gen_range(0.0..0.6);
                let y0: f64 = rng.gen_range(0.0..0.6);
                bb(x0, y0, x0 + 0.3, y0 + 0.3)
            })
            .collect();
        let scores: Vec<f64> = (0..6).map(|i| 0.9 - 0.1 * i as f64).collect();
        let sims = Tensor::new(vec![6, 1], scores.clone()).unwrap();
        let base = assign_and_nms(&sims, &boxes, 0.5).unwrap();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let pboxes: Vec<BoundingBox> = perm.iter().map(|&i| boxes[i]).collect();
        let pscores: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let psims = Tensor::new(vec![6, 1], pscores).unwrap();
        let permuted = assign_and_nms(&psims, &pboxes, 0.5).unwrap();
        let key = |d: &Detection| (d.score.to_bits(), d.bbox.x_min.to_bits());
        let mut a: Vec<_> = base.iter().map(key).collect();
        let mut b: Vec<_> = permuted.iter().map(key).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn map_perfect_detection_is_one() {
        let g = bb(0.2, 0.2, 0.6, 0.6);
        let images = [ImageEval {
            detections: vec![Detection {
                bbox: g,
                caption: 0,
                score: 0.9,
            }],
            ground_truths: vec![(g, 0)],
        }];
        assert_eq!(coco_map(&images), Some(1.0));
    }

    #[test]
    fn map_zero_detections_is_zero() {
        let images = [ImageEval {
            detections: vec![],
            ground_truths: vec![(bb(0.2, 0.2, 0.6, 0.6), 0)],
        }];
        assert_eq!(coco_map(&images), Some(0.0));
    }

    #[test]
    fn map_no_ground_truth_is_absent() {
        assert_eq!(coco_map(&[ImageEval::default()]), None);
    }

    #[test]
    fn map_iou_point_six_sweeps_to_three_tenths() {
        // Dyadic corners make the computed IoU exactly the double 0.6.
        let g = bb(0.0, 0.0, 1.0, 0.5);
        let d = bb(0.0, 0.125, 1.0, 0.625);
        assert_eq!(iou(&g, &d), 0.6);
        let images = [ImageEval {
            detections: vec![Detection {
                bbox: d,
                caption: 0,
                score: 0.8,
            }],
            ground_truths: vec![(g, 0)],
        }];
        assert_eq!(coco_map(&images), Some(0.3));
    }

    #[test]
    fn map_wrong_label_is_false_positive() {
        let g = bb(0.2, 0.2, 0.6, 0.6);
        let images = [ImageEval {
            detections: vec![Detection {
                bbox: g,
                caption: 1,
                score: 0.9,
            }],
            ground_truths: vec![(g, 0)],
        }];
        assert_eq!(coco_map(&images), Some(0.0));
    }

    #[test]
    fn map_monotone_in_threshold() {
        let mut rng = stream(62, "test.eval.mono");
        let mut images = Vec::new();
        for _ in 0..10 {
            let g = {
                let x0: f64 = rng.gen_range(0.0..0.5);
                let y0: f64 = rng.gen_range(0.0..0.5);
                bb(x0, y0, x0 + 0.4, y0 + 0.4)
            };
            let detections = (0..3)
                .map(|_| {
                    let dx: f64 = rng.gen_range(-0.1..0.1);
                    let dy: f64 = rng.gen_range(-0.1..0.1);
                    Detection {
                        bbox: bb(
                            (g.x_min + dx).clamp(0.0, 0.5),
                            (g.y_min + dy).clamp(0.0, 0.5),
                            (g.x_max + dx).clamp(0.5, 1.0),
                            (g.y_max + dy).clamp(0.5, 1.0),
                        ),
                        caption: 0,
                        score: rng.gen_range(0.0..1.0),
                    }
                })
                .collect();
            images.push(ImageEval {
                detections,
                ground_truths: vec![(g, 0)],
            });
        }
        let n_gt = images.len();
        let mut last = f64::INFINITY;
        for t in (50..=95).step_by(5) {
            let ap = ap_at_threshold(&images, n_gt, t as f64 / 100.0);
            assert!(ap <= last + 1e-12);
            last = ap;
        }
    }

    #[test]
    fn protocol_oracle_and_adversary() {
        let world = SyntheticWorld::standard(WorldConfig::default(), 63).unwrap();
        let params = GenParams {
            train_records: 1,
            eval_records_per_subset: 3,
            ..GenParams::default()
        };
        let bench = gen_benchmark(&world, &params, 63).unwrap();
        let report = run_protocol(&OracleScorer, &bench.eval, 0.5).unwrap();
        assert_eq!(report.columns.len(), 8);
        for col in &report.columns {
            assert_eq!(col.map, Some(1.0), "column {}", col.label());
            assert_eq!(col.records, 3);
        }
        assert_eq!(report.average, Some(1.0));

        let bad = run_protocol(&AdversarialScorer, &bench.eval, 0.5).unwrap();
        for col in &bad.columns {
            assert_eq!(col.map, Some(0.0));
        }
    }

    #[test]
    fn protocol_reports_absent_subsets() {
        let report = run_protocol(&OracleScorer, &[], 0.5).unwrap();
        assert!(report.columns.iter().all(|c| c.map.is_none()));
        assert_eq!(report.average, None);
    }

    #[test]
    fn column_labels_follow_table_layout() {
        let report = run_protocol(&OracleScorer, &[], 0.5).unwrap();
        let labels: Vec<&str> = report.columns.iter().map(|c| c.label()).collect();
        assert_eq!(
            labels,
            [
                "Hard",
                "Medium",
                "Easy",
                "Trivial",
                "Color",
                "Material",
                "Pattern",
                "Transparency"
            ]
        );
    }
}
