//! Surrogate targets for the student and the gated detection loss.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Registration;
use crate::imageio::write_mask;
use crate::motion::MotionMasks;
use crate::types::{box_iou, BBox, BinaryMask, RegionPartition};

pub const SCORE_EPS: f64 = 1e-7;

/// How unmatched predictions in the student-only region are treated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// Ignored on moving pixels, penalized elsewhere.
    #[default]
    Motion,
    /// Every prediction in OUTSIDE is left out of the loss.
    None,
    /// Always penalized.
    All,
}

impl std::fmt::Display for GateMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GateMode::Motion => "motion",
            GateMode::None => "none",
            GateMode::All => "all",
        })
    }
}

impl std::str::FromStr for GateMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "motion" => Ok(GateMode::Motion),
            "none" => Ok(GateMode::None),
            "all" => Ok(GateMode::All),
            other => Err(Error::invalid(format!("unknown gate mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    /// Each term is averaged over the predictions in its category.
    Mean,
    /// Each term is summed over its category and divided by the batch size.
    #[default]
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossParams {
    pub match_iou: f64,
    pub coord_weight: f64,
    pub obj_weight: f64,
    pub noobj_weight: f64,
    pub reduction: LossReduction,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            match_iou: 0.5,
            coord_weight: 1.0,
            obj_weight: 1.0,
            noobj_weight: 1.0,
            reduction: LossReduction::Sum,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionTarget {
    pub gt_boxes: Vec<BBox>,
    pub ignore_mask: BinaryMask,
    pub penalize_mask: BinaryMask,
    pub overlap: BinaryMask,
    pub mode: GateMode,
}

impl SupervisionTarget {
    pub fn dims(&self) -> (usize, usize) {
        self.overlap.dims()
    }

    /// Writes `<stem>.json` with the boxes and `<stem>_ignore.pgm`,
    /// `<stem>_penalize.pgm` next to it.
    pub fn dump(&self, dir: &Path, stem: &str) -> Result<()> {
        let json = serde_json::json!({ "gt_boxes": self.gt_boxes });
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&json)?)?;
        write_mask(&dir.join(format!("{stem}_ignore.pgm")), &self.ignore_mask)?;
        write_mask(&dir.join(format!("{stem}_penalize.pgm")), &self.penalize_mask)?;
        Ok(())
    }
}

/// Projects teacher boxes into the student view, adds the artificial boxes
/// and derives the gating masks. Teacher boxes that cannot be projected are
/// dropped.
pub fn assemble_target(
    teacher_boxes: &[BBox],
    registration: &Registration,
    artificial_boxes: &[BBox],
    masks: &MotionMasks,
    partition: &RegionPartition,
    mode: GateMode,
) -> Result<SupervisionTarget> {
    let projected: Vec<BBox> = teacher_boxes
        .iter()
        .filter_map(|b| registration.project_box(b).ok())
        .collect();
    target_from_boxes(projected, artificial_boxes, masks, partition, mode)
}

/// As [`assemble_target`] with boxes already in student coordinates.
pub fn target_from_boxes(
    mut student_boxes: Vec<BBox>,
    artificial_boxes: &[BBox],
    masks: &MotionMasks,
    partition: &RegionPartition,
    mode: GateMode,
) -> Result<SupervisionTarget> {
    if masks.dims() != partition.dims() {
        return Err(Error::DimensionMismatch {
            expected: partition.dims(),
            got: masks.dims(),
        });
    }
    student_boxes.extend_from_slice(artificial_boxes);
    for b in &mut student_boxes {
        b.score = 1.0;
    }
    let outside = partition.outside();
    let (w, h) = outside.dims();
    let (ignore_mask, penalize_mask) = match mode {
        GateMode::Motion => (outside.and(&masks.dilated)?, outside.and_not(&masks.dilated)?),
        GateMode::None => (outside, BinaryMask::new(w, h)),
        GateMode::All => (BinaryMask::new(w, h), outside),
    };
    Ok(SupervisionTarget {
        gt_boxes: student_boxes,
        ignore_mask,
        penalize_mask,
        overlap: partition.overlap().clone(),
        mode,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Matched(usize),
    Penalized,
    Ignored,
}

/// With gating off, nothing centered in the student-only region is trained,
/// matched or not.
fn cancelled(pred: &BBox, target: &SupervisionTarget) -> bool {
    target.mode == GateMode::None && target.ignore_mask.contains_point(pred.center())
}

fn unmatched_label(pred: &BBox, target: &SupervisionTarget) -> Label {
    if target.ignore_mask.contains_point(pred.center()) {
        Label::Ignored
    } else {
        Label::Penalized
    }
}

/// Labels one prediction on its own: matched to its best gt when that IoU
/// reaches `match_iou`, otherwise gated by where its center falls.
pub fn classify_prediction(pred: &BBox, target: &SupervisionTarget, match_iou: f64) -> Label {
    if cancelled(pred, target) {
        return Label::Ignored;
    }
    let mut best: Option<(usize, f64)> = None;
    for (j, g) in target.gt_boxes.iter().enumerate() {
        let iou = box_iou(pred, g);
        if best.is_none_or(|(_, b)| iou > b) {
            best = Some((j, iou));
        }
    }
    match best {
        Some((j, iou)) if iou >= match_iou => Label::Matched(j),
        _ => unmatched_label(pred, target),
    }
}

/// Labels a set of predictions with one-to-one matching: candidate pairs are
/// taken in descending IoU (ties by gt index, then prediction index) and each
/// gt is claimed at most once.
pub fn classify_batch(preds: &[BBox], target: &SupervisionTarget, match_iou: f64) -> Vec<Label> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        if cancelled(p, target) {
            continue;
        }
        for (j, g) in target.gt_boxes.iter().enumerate() {
            if !p.intersects(g) {
                continue;
            }
            let iou = box_iou(p, g);
            if iou >= match_iou {
                pairs.push((iou, j, i));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut labels: Vec<Option<Label>> = vec![None; preds.len()];
    let mut claimed = vec![false; target.gt_boxes.len()];
    for (_, j, i) in pairs {
        if labels[i].is_none() && !claimed[j] {
            labels[i] = Some(Label::Matched(j));
            claimed[j] = true;
        }
    }
    labels
        .into_iter()
        .zip(preds)
        .map(|(l, p)| l.unwrap_or_else(|| unmatched_label(p, target)))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub coord_loss: f64,
    pub obj_loss: f64,
    pub noobj_loss: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn finish(mut self) -> Self {
        self.total = self.coord_loss + self.obj_loss + self.noobj_loss;
        self
    }
}

/// Derivatives of the total loss with respect to one prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BoxGrad {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

fn clamp_score(s: f64) -> f64 {
    s.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

/// A prediction together with the gt set and gating of the frame it came
/// from, so one loss can span a batch of frames.
pub struct LabeledPrediction<'a> {
    pub pred: BBox,
    pub label: Label,
    pub target: &'a SupervisionTarget,
}

/// Loss over labeled predictions, with gradients per prediction.
pub fn labeled_loss(items: &[LabeledPrediction<'_>], params: &LossParams, batch_frames: usize) -> (LossBreakdown, Vec<BoxGrad>) {
    let n_match = items.iter().filter(|it| matches!(it.label, Label::Matched(_))).count();
    let n_pen = items.iter().filter(|it| it.label == Label::Penalized).count();
    let (div_match, div_pen) = match params.reduction {
        LossReduction::Mean => (n_match.max(1) as f64, n_pen.max(1) as f64),
        LossReduction::Sum => (batch_frames.max(1) as f64, batch_frames.max(1) as f64),
    };
    let mut out = LossBreakdown::default();
    let mut grads = vec![BoxGrad::default(); items.len()];
    for (it, g) in items.iter().zip(grads.iter_mut()) {
        let p = &it.pred;
        match it.label {
            Label::Matched(j) => {
                let t = &it.target.gt_boxes[j];
                let (fw, fh) = it.target.dims();
                let (fw, fh) = (fw as f64, fh as f64);
                let d = [(p.cx - t.cx) / fw, (p.cy - t.cy) / fh, (p.w - t.w) / fw, (p.h - t.h) / fh];
                let sq: f64 = d.iter().map(|v| v * v).sum();
                let kc = params.coord_weight / div_match;
                out.coord_loss += kc * sq;
                g.cx = kc * 2.0 * d[0] / fw;
                g.cy = kc * 2.0 * d[1] / fh;
                g.w = kc * 2.0 * d[2] / fw;
                g.h = kc * 2.0 * d[3] / fh;
                let s = clamp_score(p.score);
                let ko = params.obj_weight / div_match;
                out.obj_loss += -ko * s.ln();
                g.score = if p.score > SCORE_EPS && p.score < 1.0 - SCORE_EPS { -ko / s } else { 0.0 };
            }
            Label::Penalized => {
                let s = clamp_score(p.score);
                let kn = params.noobj_weight / div_pen;
                out.noobj_loss += -kn * (1.0 - s).ln();
                g.score = if p.score > SCORE_EPS && p.score < 1.0 - SCORE_EPS {
                    kn / (1.0 - s)
                } else {
                    0.0
                };
            }
            Label::Ignored => {}
        }
    }
    (out.finish(), grads)
}

/// Loss of the predictions of one frame under one-to-one matching.
pub fn detection_loss(preds: &[BBox], target: &SupervisionTarget, params: &LossParams) -> LossBreakdown {
    let labels = classify_batch(preds, target, params.match_iou);
    let items: Vec<LabeledPrediction<'_>> = preds
        .iter()
        .zip(labels)
        .map(|(&pred, label)| LabeledPrediction { pred, label, target })
        .collect();
    labeled_loss(&items, params, 1).0
}

/// Keeps predictions whose center pixel is moving.
pub fn postprocess_inference(preds: &[BBox], masks: &MotionMasks) -> Vec<BBox> {
    preds
        .iter()
        .filter(|b| masks.dilated.contains_point(b.center()))
        .copied()
        .collect()
}

/// Greedy suppression: boxes in descending score (ties by index) remove any
/// later box overlapping them with IoU above `iou`.
pub fn nms(boxes: &[BBox], iou: f64) -> Vec<BBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score).then(a.cmp(&b)));
    let mut kept: Vec<BBox> = Vec::new();
    for i in order {
        let b = boxes[i];
        if kept.iter().all(|k| !k.intersects(&b) || box_iou(k, &b) <= iou) {
            kept.push(b);
        }
    }
    kept
}
