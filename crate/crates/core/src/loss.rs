//! Set-prediction supervision: match costs, focal/L1/GIoU losses over matched
//! pairs, deep supervision across decoder layers, and the fixed-index loss
//! routing for denoising queries.

use alloc::string::String;
use alloc::vec::Vec;

use crate::geometry::{giou, BBox};
use crate::graph::Node;
use crate::hoi::HoiInstance;
use crate::matching::{hungarian_match, MatchResult};
use crate::nn::Fwd;
use crate::tensor::Tensor;
use crate::{CoreError, Result};

/// Weights of the composite loss; the matching cost mirrors them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub obj_class: f64,
    pub verb_class: f64,
    pub hoi_class: f64,
    pub box_l1: f64,
    pub box_giou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            obj_class: 1.0,
            verb_class: 1.0,
            hoi_class: 1.0,
            box_l1: 5.0,
            box_giou: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.obj_class,
            self.verb_class,
            self.hoi_class,
            self.box_l1,
            self.box_giou,
        ];
        if all.iter().any(|w| *w < 0.0) {
            return Err(CoreError::InvalidConfig("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One query's prediction values (plain numbers, used for matching costs and
/// final outputs).
#[derive(Clone, Debug)]
pub struct QueryPredValues {
    pub subject: BBox,
    pub object: BBox,
    /// Softmax over object classes plus trailing no-object slot.
    pub obj_probs: Vec<f64>,
    /// Per-verb sigmoid probabilities.
    pub verb_probs: Vec<f64>,
}

fn focal_pos(p: f64, alpha: f64, gamma: f64) -> f64 {
    alpha * libm::pow(1.0 - p, gamma) * -libm::log(p.max(1e-12))
}

fn focal_neg(p: f64, alpha: f64, gamma: f64) -> f64 {
    (1.0 - alpha) * libm::pow(p, gamma) * -libm::log((1.0 - p).max(1e-12))
}

fn l1_box(a: &BBox, b: &BBox) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}

/// Matching cost between one query and one ground truth: negative object
/// probability, focal-style verb score, L1 and negative GIoU of both boxes.
pub fn hoi_match_cost(pred: &QueryPredValues, gt: &HoiInstance, w: &LossWeights) -> f64 {
    let obj_term = -pred.obj_probs[gt.object_class];
    let mut verb_term = 0.0;
    let mut positives = 0usize;
    for (j, &on) in gt.verbs.iter().enumerate() {
        let p = pred.verb_probs[j];
        if on {
            positives += 1;
            verb_term += focal_pos(p, w.focal_alpha, w.focal_gamma);
        } else {
            verb_term += focal_neg(p, w.focal_alpha, w.focal_gamma);
        }
    }
    verb_term /= positives.max(1) as f64;
    let l1 = l1_box(&pred.subject, &gt.subject) + l1_box(&pred.object, &gt.object);
    let giou_term = -(giou(&pred.subject, &gt.subject) + giou(&pred.object, &gt.object));
    w.obj_class * obj_term + w.verb_class * verb_term + w.box_l1 * l1 + w.box_giou * giou_term
}

/// Query × ground-truth cost matrix.
pub fn build_cost_matrix(
    preds: &[QueryPredValues],
    gts: &[HoiInstance],
    w: &LossWeights,
) -> Tensor {
    let mut cost = Tensor::zeros(preds.len(), gts.len());
    for (q, p) in preds.iter().enumerate() {
        for (t, gt) in gts.iter().enumerate() {
            cost.set(q, t, hoi_match_cost(p, gt, w));
        }
    }
    cost
}

/// One decoder layer's prediction nodes over the full query stream.
pub struct LayerSupervision<'g> {
    pub subject_boxes: Node<'g>,
    pub object_boxes: Node<'g>,
    pub obj_logits: Node<'g>,
    pub verb_logits: Node<'g>,
}

/// Named loss components (already weighted) plus their sum.
pub struct LossBreakdown<'g> {
    pub total: Node<'g>,
    pub parts: Vec<(String, Node<'g>)>,
}

impl<'g> LossBreakdown<'g> {
    pub fn part_value(&self, name: &str) -> Option<f64> {
        self.parts
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, node)| node.value().scalar_value())
    }
}

/// Softmax focal cross-entropy; `targets[q]` may be the background index
/// (one past the last real class), which takes the complementary alpha.
fn softmax_focal<'g>(
    fwd: &Fwd<'g>,
    logits: Node<'g>,
    targets: &[usize],
    alpha: f64,
    gamma: f64,
    norm: f64,
) -> Node<'g> {
    let classes = logits.cols();
    let background = classes - 1;
    let coords: Vec<(usize, usize)> = targets.iter().enumerate().map(|(q, &t)| (q, t)).collect();
    let logp = logits.log_row_softmax().gather_elems(&coords);
    let p = logp.exp();
    let mut alphas = Tensor::zeros(targets.len(), 1);
    for (q, &t) in targets.iter().enumerate() {
        alphas.set(q, 0, if t == background { 1.0 - alpha } else { alpha });
    }
    let focal = p
        .neg()
        .add_const(1.0)
        .pow_const(gamma)
        .mul(logp.neg())
        .mul(fwd.input(alphas));
    focal.sum().scale(1.0 / norm)
}

/// Two-sided binary focal loss against a 0/1 target matrix.
fn binary_focal<'g>(
    fwd: &Fwd<'g>,
    logits: Node<'g>,
    targets: Tensor,
    alpha: f64,
    gamma: f64,
    norm: f64,
) -> Node<'g> {
    assert_eq!(logits.shape(), targets.shape());
    let t = fwd.input(targets.clone());
    let t_neg = fwd.input(targets.map(|x| 1.0 - x));
    let p = logits.sigmoid();
    let pos_nll = logits.neg().softplus(); // -ln σ(x)
    let neg_nll = logits.softplus(); // -ln (1-σ(x))
    let pos = p
        .neg()
        .add_const(1.0)
        .pow_const(gamma)
        .mul(pos_nll)
        .mul(t)
        .scale(alpha);
    let neg = p
        .pow_const(gamma)
        .mul(neg_nll)
        .mul(t_neg)
        .scale(1.0 - alpha);
    pos.add(neg).sum().scale(1.0 / norm)
}

/// Differentiable GIoU of each (pred, gt) row pair, boxes in center-size form.
fn giou_rows<'g>(pred: Node<'g>, gt: Node<'g>) -> Node<'g> {
    let half = |b: Node<'g>, lo: usize| {
        let c = b.slice_cols(lo..lo + 1);
        let s = b.slice_cols(lo + 2..lo + 3).scale(0.5);
        (c.sub(s), c.add(s))
    };
    let (px1, px2) = half(pred, 0);
    let (py1, py2) = half(pred, 1);
    let (gx1, gx2) = half(gt, 0);
    let (gy1, gy2) = half(gt, 1);
    let iw = px2.minimum(gx2).sub(px1.maximum(gx1)).relu();
    let ih = py2.minimum(gy2).sub(py1.maximum(gy1)).relu();
    let inter = iw.mul(ih);
    let pa = px2.sub(px1).mul(py2.sub(py1));
    let ga = gx2.sub(gx1).mul(gy2.sub(gy1));
    let union = pa.add(ga).sub(inter);
    let cw = px2.maximum(gx2).sub(px1.minimum(gx1));
    let ch = py2.maximum(gy2).sub(py1.minimum(gy1));
    let hull = cw.mul(ch);
    inter.div(union).sub(hull.sub(union).div(hull))
}

fn boxes_tensor(boxes: &[BBox]) -> Tensor {
    let mut t = Tensor::zeros(boxes.len(), 4);
    for (r, b) in boxes.iter().enumerate() {
        t.row_mut(r).copy_from_slice(&b.to_array());
    }
    t
}

/// Box L1 + GIoU losses over `(query row, gt)` pairs of one layer.
fn box_losses<'g>(
    fwd: &Fwd<'g>,
    boxes_pred: Node<'g>,
    rows: &[usize],
    gt_boxes: &[BBox],
    norm: f64,
) -> (Node<'g>, Node<'g>) {
    debug_assert_eq!(rows.len(), gt_boxes.len());
    if rows.is_empty() {
        let zero = fwd.input(Tensor::scalar(0.0));
        return (zero, zero);
    }
    let pred = boxes_pred.gather_rows(rows);
    let gt = fwd.input(boxes_tensor(gt_boxes));
    let l1 = pred.sub(gt).abs().sum().scale(1.0 / norm);
    let g = giou_rows(pred, gt)
        .neg()
        .add_const(1.0)
        .sum()
        .scale(1.0 / norm);
    (l1, g)
}

/// Extract per-query prediction values from one layer's nodes (rows
/// `row_range` of the full stream).
pub fn layer_pred_values(layer: &LayerSupervision<'_>, rows: core::ops::Range<usize>) -> Vec<QueryPredValues> {
    let sb = layer.subject_boxes.value();
    let ob = layer.object_boxes.value();
    let ol = layer.obj_logits.value();
    let vl = layer.verb_logits.value();
    rows.map(|q| {
        let logits = ol.row(q);
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&x| libm::exp(x - mx)).collect();
        let z: f64 = exps.iter().sum();
        QueryPredValues {
            subject: BBox::from_array([sb.get(q, 0), sb.get(q, 1), sb.get(q, 2), sb.get(q, 3)]),
            object: BBox::from_array([ob.get(q, 0), ob.get(q, 1), ob.get(q, 2), ob.get(q, 3)]),
            obj_probs: exps.iter().map(|e| e / z).collect(),
            verb_probs: vl.row(q).iter().map(|&x| 1.0 / (1.0 + libm::exp(-x))).collect(),
        }
    })
    .collect()
}

fn verb_target_matrix(
    num_rows: usize,
    num_verbs: usize,
    assignments: &[(usize, usize)],
    gts: &[HoiInstance],
) -> Tensor {
    let mut t = Tensor::zeros(num_rows, num_verbs);
    for &(q, gt) in assignments {
        for (j, &on) in gts[gt].verbs.iter().enumerate() {
            if on {
                t.set(q, j, 1.0);
            }
        }
    }
    t
}

fn hoi_target_matrix(
    num_rows: usize,
    assignments: &[(usize, usize)],
    gt_hoi: &Tensor,
) -> Tensor {
    let mut t = Tensor::zeros(num_rows, gt_hoi.cols());
    for &(q, gt) in assignments {
        for c in 0..gt_hoi.cols() {
            if gt_hoi.get(gt, c) > 0.0 {
                t.set(q, c, 1.0);
            }
        }
    }
    t
}

fn weighted_sum<'g>(fwd: &Fwd<'g>, parts: &[(String, Node<'g>)]) -> Node<'g> {
    let mut total = fwd.input(Tensor::scalar(0.0));
    for (_, p) in parts {
        total = total.add(*p);
    }
    total
}

fn accumulate<'g>(parts: &mut Vec<(String, Node<'g>)>, name: &str, node: Node<'g>) {
    if let Some((_, existing)) = parts.iter_mut().find(|(n, _)| n == name) {
        *existing = existing.add(node);
    } else {
        parts.push((String::from(name), node));
    }
}

/// Inference-query losses with per-layer Hungarian matching (deep
/// supervision). `hoi_logits`/`gt_hoi` supply the HOI branch when the advisor
/// is active; its matching follows the last detection layer.
#[allow(clippy::too_many_arguments)]
pub fn compute_losses<'g>(
    fwd: &Fwd<'g>,
    layers: &[LayerSupervision<'g>],
    hoi_logits: &[Node<'g>],
    gts: &[HoiInstance],
    gt_hoi: Option<&Tensor>,
    w: &LossWeights,
    num_inference: usize,
) -> Result<(LossBreakdown<'g>, Vec<MatchResult>)> {
    w.validate()?;
    let norm = gts.len().max(1) as f64;
    let mut parts: Vec<(String, Node<'g>)> = Vec::new();
    let mut matches = Vec::with_capacity(layers.len());
    let background = layers
        .first()
        .map(|l| l.obj_logits.cols() - 1)
        .unwrap_or(0);

    for layer in layers {
        let preds = layer_pred_values(layer, 0..num_inference);
        let m = if gts.is_empty() {
            MatchResult::default()
        } else {
            hungarian_match(&build_cost_matrix(&preds, gts, w))?
        };

        let mut targets = alloc::vec![background; num_inference];
        for &(q, t) in &m.pairs {
            targets[q] = gts[t].object_class;
        }
        let obj_logits = layer.obj_logits.slice_rows(0..num_inference);
        accumulate(
            &mut parts,
            "obj_class",
            softmax_focal(fwd, obj_logits, &targets, w.focal_alpha, w.focal_gamma, norm)
                .scale(w.obj_class),
        );

        let verb_logits = layer.verb_logits.slice_rows(0..num_inference);
        let vt = verb_target_matrix(num_inference, verb_logits.cols(), &m.pairs, gts);
        accumulate(
            &mut parts,
            "verb_class",
            binary_focal(fwd, verb_logits, vt, w.focal_alpha, w.focal_gamma, norm)
                .scale(w.verb_class),
        );

        let rows: Vec<usize> = m.pairs.iter().map(|&(q, _)| q).collect();
        let subj_gt: Vec<BBox> = m.pairs.iter().map(|&(_, t)| gts[t].subject).collect();
        let obj_gt: Vec<BBox> = m.pairs.iter().map(|&(_, t)| gts[t].object).collect();
        let (l1_s, giou_s) = box_losses(
            fwd,
            layer.subject_boxes.slice_rows(0..num_inference),
            &rows,
            &subj_gt,
            norm,
        );
        let (l1_o, giou_o) = box_losses(
            fwd,
            layer.object_boxes.slice_rows(0..num_inference),
            &rows,
            &obj_gt,
            norm,
        );
        accumulate(&mut parts, "box_l1", l1_s.add(l1_o).scale(w.box_l1));
        accumulate(&mut parts, "box_giou", giou_s.add(giou_o).scale(w.box_giou));
        matches.push(m);
    }

    if let (Some(gt_hoi), Some(last_match)) = (gt_hoi, matches.last()) {
        for &hl in hoi_logits {
            let logits = hl.slice_rows(0..num_inference);
            let ht = hoi_target_matrix(num_inference, &last_match.pairs, gt_hoi);
            accumulate(
                &mut parts,
                "hoi_class",
                binary_focal(fwd, logits, ht, w.focal_alpha, w.focal_gamma, norm)
                    .scale(w.hoi_class),
            );
        }
    }

    let total = weighted_sum(fwd, &parts);
    Ok((LossBreakdown { total, parts }, matches))
}

/// Denoising-query losses: the same terms, but the assignment is the fixed
/// ground-truth index used at query construction and no query is background.
#[allow(clippy::too_many_arguments)]
pub fn dn_losses<'g>(
    fwd: &Fwd<'g>,
    layers: &[LayerSupervision<'g>],
    hoi_logits: &[Node<'g>],
    gts: &[HoiInstance],
    gt_hoi: Option<&Tensor>,
    w: &LossWeights,
    num_inference: usize,
    gt_index: &[usize],
) -> Result<LossBreakdown<'g>> {
    w.validate()?;
    let num_dn = gt_index.len();
    let mut parts: Vec<(String, Node<'g>)> = Vec::new();
    if num_dn == 0 {
        let zero = fwd.input(Tensor::scalar(0.0));
        return Ok(LossBreakdown {
            total: zero,
            parts,
        });
    }
    for &gi in gt_index {
        if gi >= gts.len() {
            return Err(CoreError::IndexOutOfRange {
                index: gi,
                bound: gts.len(),
            });
        }
    }
    let norm = num_dn as f64;
    let assignments: Vec<(usize, usize)> = gt_index.iter().copied().enumerate().collect();
    let targets: Vec<usize> = gt_index.iter().map(|&gi| gts[gi].object_class).collect();
    let subj_gt: Vec<BBox> = gt_index.iter().map(|&gi| gts[gi].subject).collect();
    let obj_gt: Vec<BBox> = gt_index.iter().map(|&gi| gts[gi].object).collect();
    let rows: Vec<usize> = (0..num_dn).collect();

    for layer in layers {
        let range = num_inference..num_inference + num_dn;
        let obj_logits = layer.obj_logits.slice_rows(range.clone());
        accumulate(
            &mut parts,
            "dn_obj_class",
            softmax_focal(fwd, obj_logits, &targets, w.focal_alpha, w.focal_gamma, norm)
                .scale(w.obj_class),
        );
        let verb_logits = layer.verb_logits.slice_rows(range.clone());
        let vt = verb_target_matrix(num_dn, verb_logits.cols(), &assignments, gts);
        accumulate(
            &mut parts,
            "dn_verb_class",
            binary_focal(fwd, verb_logits, vt, w.focal_alpha, w.focal_gamma, norm)
                .scale(w.verb_class),
        );
        let (l1_s, giou_s) = box_losses(
            fwd,
            layer.subject_boxes.slice_rows(range.clone()),
            &rows,
            &subj_gt,
            norm,
        );
        let (l1_o, giou_o) = box_losses(
            fwd,
            layer.object_boxes.slice_rows(range),
            &rows,
            &obj_gt,
            norm,
        );
        accumulate(&mut parts, "dn_box_l1", l1_s.add(l1_o).scale(w.box_l1));
        accumulate(&mut parts, "dn_box_giou", giou_s.add(giou_o).scale(w.box_giou));
    }

    if let Some(gt_hoi) = gt_hoi {
        for &hl in hoi_logits {
            let logits = hl.slice_rows(num_inference..num_inference + num_dn);
            let ht = hoi_target_matrix(num_dn, &assignments, gt_hoi);
            accumulate(
                &mut parts,
                "dn_hoi_class",
                binary_focal(fwd, logits, ht, w.focal_alpha, w.focal_gamma, norm)
                    .scale(w.hoi_class),
            );
        }
    }

    let total = weighted_sum(fwd, &parts);
    Ok(LossBreakdown { total, parts })
}
