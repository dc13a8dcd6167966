//! Training losses: classification (BCE + InfoNCE), detection (mean-l1 +
//! classification under Hungarian matching), the grouped attribute
//! contrastive term, and the warmup-gated total.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::hungarian::{hungarian_match, Assignment, HungarianError};
use crate::tape::{NodeId, Tape};
use crate::tensor::{NumericsError, Tensor};

pub const LN_2: f64 = core::f64::consts::LN_2;

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveError {
    TargetNotBinary { index: usize, value: f64 },
    /// Detection needs at least one ground-truth box.
    EmptyGroundTruth,
    LabelOutOfRange { label: usize, num_captions: usize },
    RaggedLogitSet { positives: usize, negative_groups: usize },
    BadWeights { detail: String },
    BadBox { detail: String },
    Matching(HungarianError),
    Numerics(NumericsError),
}

impl From<NumericsError> for ObjectiveError {
    fn from(e: NumericsError) -> Self {
        ObjectiveError::Numerics(e)
    }
}

impl From<HungarianError> for ObjectiveError {
    fn from(e: HungarianError) -> Self {
        ObjectiveError::Matching(e)
    }
}

impl core::fmt::Display for ObjectiveError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ObjectiveError::TargetNotBinary { index, value } => {
                write!(f, "target at {index} is {value}, expected 0 or 1")
            }
            ObjectiveError::EmptyGroundTruth => {
                write!(f, "detection loss needs at least one ground-truth box")
            }
            ObjectiveError::LabelOutOfRange {
                label,
                num_captions,
            } => write!(f, "gt label {label} outside {num_captions} captions"),
            ObjectiveError::RaggedLogitSet {
                positives,
                negative_groups,
            } => write!(
                f,
                "{positives} positives but {negative_groups} negative groups"
            ),
            ObjectiveError::BadWeights { detail } => write!(f, "invalid loss weights: {detail}"),
            ObjectiveError::BadBox { detail } => write!(f, "invalid box: {detail}"),
            ObjectiveError::Matching(e) => write!(f, "{e}"),
            ObjectiveError::Numerics(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for ObjectiveError {}

/// Normalized corner-form box in [0,1] image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, ObjectiveError> {
        let b = BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let ok = self.x_min < self.x_max
            && self.y_min < self.y_max
            && [self.x_min, self.y_min, self.x_max, self.y_max]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(ObjectiveError::BadBox {
                detail: format!("{self:?} has empty extent or non-finite corners"),
            })
        }
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    /// Mean absolute corner difference (the l1 distance over 4 coordinates,
    /// divided by 4).
    pub fn mean_l1(&self, other: &BoundingBox) -> f64 {
        ((self.x_min - other.x_min).abs()
            + (self.y_min - other.y_min).abs()
            + (self.x_max - other.x_max).abs()
            + (self.y_max - other.y_max).abs())
            / 4.0
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub lambda_det: f64,
    pub lambda_attr: f64,
    pub alpha_nce: f64,
    pub tau_cls: f64,
    pub tau_attr: f64,
    pub det_warmup_steps: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_det: 1.0,
            lambda_attr: 0.5,
            alpha_nce: 1.0,
            tau_cls: 0.1,
            tau_attr: 0.1,
            det_warmup_steps: 500,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.tau_cls > 0.0) || !(self.tau_attr > 0.0) {
            return Err(ObjectiveError::BadWeights {
                detail: format!(
                    "temperatures must be positive, got {} and {}",
                    self.tau_cls, self.tau_attr
                ),
            });
        }
        if self.lambda_attr < 0.0 || self.lambda_det < 0.0 {
            return Err(ObjectiveError::BadWeights {
                detail: "loss lambdas must be non-negative".into(),
            });
        }
        Ok(())
    }

    pub fn det_gate_open(&self, step: usize) -> bool {
        step >= self.det_warmup_steps
    }
}

/// One positive logit per group with that group's negatives.
#[derive(Debug, Clone, Default)]
pub struct AttrLogitSet {
    pub positives: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

impl AttrLogitSet {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.positives.len() != self.negatives.len() {
            return Err(ObjectiveError::RaggedLogitSet {
                positives: self.positives.len(),
                negative_groups: self.negatives.len(),
            });
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }
}

fn check_binary(targets: &[f64]) -> Result<(), ObjectiveError> {
    for (index, &value) in targets.iter().enumerate() {
        if value != 0.0 && value != 1.0 {
            return Err(ObjectiveError::TargetNotBinary { index, value });
        }
    }
    Ok(())
}

pub fn bce_loss_on_tape(
    tape: &mut Tape,
    logits: NodeId,
    targets: &[f64],
) -> Result<NodeId, ObjectiveError> {
    check_binary(targets)?;
    Ok(tape.bce_with_logits_mean(logits, targets)?)
}

/// BCE mean + alpha_nce times InfoNCE over the in-batch similarity matrix,
/// both at `tau_cls`. `sims` holds raw similarities; the temperature is
/// applied inside the InfoNCE term.
pub fn cls_loss_on_tape(
    tape: &mut Tape,
    logits: NodeId,
    targets: &[f64],
    sims: NodeId,
    lw: &LossWeights,
) -> Result<NodeId, ObjectiveError> {
    lw.validate()?;
    let bce = bce_loss_on_tape(tape, logits, targets)?;
    let nce = tape.info_nce(sims, lw.tau_cls)?;
    let scaled = tape.scale(nce, lw.alpha_nce);
    Ok(tape.add(bce, scaled)?)
}

/// Matching diagnostics alongside the loss node.
#[derive(Debug, Clone)]
pub struct DetMatch {
    /// (prediction index, ground-truth index), sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub loc: f64,
    pub unmatched_gt: usize,
}

fn softplus_neg(x: f64) -> f64 {
    // ln(1 + e^{-x}), the BCE of logit x against target 1.
    x.max(0.0) - x + libm::log1p(libm::exp(-libm::fabs(x)))
}

/// Hungarian-matched detection loss.
///
/// Cost mixes mean-l1 box distance and per-pair classification cost 1:1.
/// The classification term averages BCE over every predicted logit (targets
/// one-hot at the matched gt's caption, zero rows for unmatched
/// predictions) together with one ln 2 charge per unmatched ground truth.
/// With no predictions at all the loss is exactly that ln 2 charge.
pub fn det_loss_on_tape(
    tape: &mut Tape,
    pred_boxes: &[BoundingBox],
    pred_logits: Option<NodeId>,
    gt_boxes: &[BoundingBox],
    gt_labels: &[usize],
    num_captions: usize,
) -> Result<(NodeId, DetMatch), ObjectiveError> {
    let m = gt_boxes.len();
    if m == 0 || gt_labels.len() != m {
        return Err(ObjectiveError::EmptyGroundTruth);
    }
    for &l in gt_labels {
        if l >= num_captions {
            return Err(ObjectiveError::LabelOutOfRange {
                label: l,
                num_captions,
            });
        }
    }
    for b in pred_boxes.iter().chain(gt_boxes) {
        b.validate()?;
    }
    let n = pred_boxes.len();
    if n == 0 {
        let node = tape.constant_scalar(LN_2);
        return Ok((
            node,
            DetMatch {
                pairs: Vec::new(),
                loc: 0.0,
                unmatched_gt: m,
            },
        ));
    }
    let logits = pred_logits.ok_or(ObjectiveError::BadWeights {
        detail: "predictions present but no logit node supplied".into(),
    })?;
    let lshape = tape.shape(logits).to_vec();
    if lshape != [n, num_captions] {
        return Err(ObjectiveError::Numerics(NumericsError::ShapeMismatch {
            op: "det_loss",
            left: lshape,
            right: vec![n, num_captions],
        }));
    }
    let lvals = tape.value(logits).to_vec();

    let mut cost = Vec::with_capacity(n * m);
    for (i, pb) in pred_boxes.iter().enumerate() {
        for (j, gb) in gt_boxes.iter().enumerate() {
            let cls = softplus_neg(lvals[i * num_captions + gt_labels[j]]);
            cost.push(pb.mean_l1(gb) + cls);
        }
    }
    let Assignment { pairs, .. } = hungarian_match(&Tensor::new(vec![n, m], cost)?)?;

    let loc = if pairs.is_empty() {
        0.0
    } else {
        pairs
            .iter()
            .map(|&(i, j)| pred_boxes[i].mean_l1(&gt_boxes[j]))
            .sum::<f64>()
            / pairs.len() as f64
    };
    let mut targets = vec![0.0; n * num_captions];
    for &(i, j) in &pairs {
        targets[i * num_captions + gt_labels[j]] = 1.0;
    }
    let unmatched_gt = m - pairs.len();
    let denom = (n * num_captions + unmatched_gt) as f64;
    let bce_mean = tape.bce_with_logits_mean(logits, &targets)?;
    let rescaled = tape.scale(bce_mean, (n * num_captions) as f64 / denom);
    let with_unmatched = tape.add_const(rescaled, unmatched_gt as f64 * LN_2 / denom);
    let loc_node = tape.constant_scalar(loc);
    let total = tape.add(loc_node, with_unmatched)?;
    Ok((
        total,
        DetMatch {
            pairs,
            loc,
            unmatched_gt,
        },
    ))
}

/// Grouped contrastive term; an empty set contributes exactly zero.
pub fn attr_contrastive_on_tape(
    tape: &mut Tape,
    set: &AttrLogitSet,
    tau: f64,
) -> Result<NodeId, ObjectiveError> {
    set.validate()?;
    if set.is_empty() {
        return Ok(tape.constant_scalar(0.0));
    }
    let m = set.positives.len();
    let pos = Tensor::new(vec![m], set.positives.clone())?;
    let mut offsets = Vec::with_capacity(m + 1);
    let mut flat = Vec::new();
    offsets.push(0);
    for group in &set.negatives {
        flat.extend_from_slice(group);
        offsets.push(flat.len());
    }
    let pos_node = tape.constant(&pos);
    let negs_node = tape.constant(&Tensor::new(vec![flat.len()], flat)?);
    Ok(tape.attr_nce(pos_node, negs_node, &offsets, tau)?)
}

/// Differentiable variant where the logits are live tape nodes (`pos` is
/// `[M]`, `negs` the flattened groups delimited by `offsets`).
pub fn attr_contrastive_nodes(
    tape: &mut Tape,
    pos: NodeId,
    negs: NodeId,
    offsets: &[usize],
    tau: f64,
) -> Result<NodeId, ObjectiveError> {
    Ok(tape.attr_nce(pos, negs, offsets, tau)?)
}

/// Warmup-gated combination; the detection term joins at
/// `step >= det_warmup_steps` (inclusive).
pub fn total_loss_on_tape(
    tape: &mut Tape,
    cls: NodeId,
    attr: Option<NodeId>,
    det: Option<NodeId>,
    lw: &LossWeights,
    step: usize,
) -> Result<NodeId, ObjectiveError> {
    lw.validate()?;
    let mut acc = cls;
    if let Some(a) = attr {
        let scaled = tape.scale(a, lw.lambda_attr);
        acc = tape.add(acc, scaled)?;
    }
    if let Some(d) = det {
        if lw.det_gate_open(step) {
            let scaled = tape.scale(d, lw.lambda_det);
            acc = tape.add(acc, scaled)?;
        }
    }
    Ok(acc)
}

fn scalar_of(tape: &Tape, node: NodeId) -> f64 {
    tape.value(node)[0]
}

pub fn bce_loss(logits: &Tensor, targets: &Tensor) -> Result<f64, ObjectiveError> {
    if logits.shape() != targets.shape() {
        return Err(ObjectiveError::Numerics(NumericsError::ShapeMismatch {
            op: "bce_loss",
            left: logits.shape().to_vec(),
            right: targets.shape().to_vec(),
        }));
    }
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let node = bce_loss_on_tape(&mut tape, l, targets.data())?;
    Ok(scalar_of(&tape, node))
}

pub fn info_nce_loss(sims: &Tensor, tau: f64) -> Result<f64, ObjectiveError> {
    let mut tape = Tape::new();
    let s = tape.constant(sims);
    let node = tape.info_nce(s, tau)?;
    Ok(scalar_of(&tape, node))
}

pub fn cls_loss(
    logits: &Tensor,
    targets: &Tensor,
    sims: &Tensor,
    lw: &LossWeights,
) -> Result<f64, ObjectiveError> {
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let s = tape.constant(sims);
    let node = cls_loss_on_tape(&mut tape, l, targets.data(), s, lw)?;
    Ok(scalar_of(&tape, node))
}

/// Value-level detection loss with its parts.
#[derive(Debug)]
pub struct DetLossParts {
    pub total: f64,
    pub loc: f64,
    pub cls: f64,
    pub matched: DetMatch,
}

pub fn det_loss(
    pred_boxes: &[BoundingBox],
    pred_logits: &Tensor,
    gt_boxes: &[BoundingBox],
    gt_labels: &[usize],
    num_captions: usize,
) -> Result<DetLossParts, ObjectiveError> {
    let mut tape = Tape::new();
    let node = if pred_boxes.is_empty() {
        None
    } else {
        Some(tape.constant(pred_logits))
    };
    let (total, matched) = det_loss_on_tape(
        &mut tape,
        pred_boxes,
        node,
        gt_boxes,
        gt_labels,
        num_captions,
    )?;
    let total = scalar_of(&tape, total);
    Ok(DetLossParts {
        total,
        loc: matched.loc,
        cls: total - matched.loc,
        matched,
    })
}

pub fn attr_contrastive(set: &AttrLogitSet, tau: f64) -> Result<f64, ObjectiveError> {
    let mut tape = Tape::new();
    let node = attr_contrastive_on_tape(&mut tape, set, tau)?;
    Ok(scalar_of(&tape, node))
}

pub fn total_loss(
    cls: f64,
    attr: f64,
    det: Option<f64>,
    lw: &LossWeights,
    step: usize,
) -> Result<f64, ObjectiveError> {
    lw.validate()?;
    let mut acc = cls + lw.lambda_attr * attr;
    if let Some(d) = det {
        if lw.det_gate_open(step) {
            acc += lw.lambda_det * d;
        }
    }
    Ok(acc)
}
