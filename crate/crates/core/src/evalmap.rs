//! HOI-detection mAP under the Default and Known-Object settings with
//! Full/Rare/Non-Rare category splits.
//!
//! A detection matches a ground truth when the HOI class agrees and the
//! *smaller* of the subject-box and object-box IoUs clears the threshold.
//! Per class, detections are matched greedily in score order to the
//! highest-overlap unmatched ground truth; AP integrates the all-point
//! interpolated precision-recall curve (11-point available for
//! cross-checking). Classes with no ground truth are excluded from means.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::{iou, BBox};

/// A scored triplet prediction.
#[derive(Clone, Debug)]
pub struct EvalDetection {
    pub image: usize,
    pub hoi_class: usize,
    pub score: f64,
    pub subject: BBox,
    pub object: BBox,
}

/// An annotated triplet.
#[derive(Clone, Debug)]
pub struct EvalGroundTruth {
    pub image: usize,
    pub hoi_class: usize,
    pub subject: BBox,
    pub object: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSetting {
    /// Score every image.
    Default,
    /// Per class, score only images containing that class's object category.
    KnownObject,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    /// Area under the precision envelope (the standard protocol).
    AllPoint,
    /// Mean of max precision at recalls {0, 0.1, ..., 1.0}.
    ElevenPoint,
}

#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub setting: EvalSetting,
    pub num_hoi_classes: usize,
    /// Per HOI class: counted as Rare (training instances below the rare
    /// threshold)?
    pub rare: Vec<bool>,
    /// Object category of each HOI class, for Known-Object pools.
    pub hoi_to_object: Vec<usize>,
    pub interpolation: Interpolation,
}

impl EvalConfig {
    pub fn new(num_hoi_classes: usize, hoi_to_object: Vec<usize>, rare: Vec<bool>) -> Self {
        assert_eq!(hoi_to_object.len(), num_hoi_classes);
        assert_eq!(rare.len(), num_hoi_classes);
        EvalConfig {
            iou_threshold: 0.5,
            setting: EvalSetting::Default,
            num_hoi_classes,
            rare,
            hoi_to_object,
            interpolation: Interpolation::AllPoint,
        }
    }
}

/// Rare flags from per-class training instance counts.
pub fn rare_split_from_counts(train_counts: &[usize], rare_threshold: usize) -> Vec<bool> {
    train_counts.iter().map(|&c| c < rare_threshold).collect()
}

/// Class match plus the min-IoU rule over subject and object boxes.
pub fn triplet_match(pred: &EvalDetection, gt: &EvalGroundTruth, iou_threshold: f64) -> bool {
    pred.hoi_class == gt.hoi_class && triplet_overlap(pred, gt) >= iou_threshold
}

/// min(IoU(subjects), IoU(objects)) — the quantity thresholded by the protocol.
pub fn triplet_overlap(pred: &EvalDetection, gt: &EvalGroundTruth) -> f64 {
    iou(&pred.subject, &gt.subject).min(iou(&pred.object, &gt.object))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    pub full: f64,
    pub rare: f64,
    pub non_rare: f64,
    /// AP per HOI class; `None` where the class has no ground truth in the
    /// evaluated pool.
    pub per_class: Vec<Option<f64>>,
}

/// Images containing object category `obj`, judged from the ground truth.
fn known_object_pool(
    gts: &[EvalGroundTruth],
    hoi_to_object: &[usize],
    obj: usize,
) -> BTreeSet<usize> {
    gts.iter()
        .filter(|g| hoi_to_object[g.hoi_class] == obj)
        .map(|g| g.image)
        .collect()
}

/// Sort detections of one class for matching: score descending, ties broken by
/// (image, insertion index) so results do not depend on input order.
fn score_order(dets: &mut Vec<(usize, EvalDetection)>) {
    dets.sort_by(|a, b| {
        b.1.score
            .partial_cmp(&a.1.score)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.1.image.cmp(&b.1.image))
            .then(a.0.cmp(&b.0))
    });
}

fn average_precision(tp_flags: &[bool], num_gt: usize, interpolation: Interpolation) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let n = tp_flags.len();
    let mut precisions = Vec::with_capacity(n);
    let mut recalls = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (i, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / num_gt as f64);
    }
    // precision envelope from the right
    let mut envelope = precisions.clone();
    for i in (0..n.saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    match interpolation {
        Interpolation::AllPoint => {
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for i in 0..n {
                ap += (recalls[i] - prev_recall) * envelope[i];
                prev_recall = recalls[i];
            }
            ap
        }
        Interpolation::ElevenPoint => {
            let mut acc = 0.0;
            for step in 0..=10 {
                let r = step as f64 / 10.0;
                let p = recalls
                    .iter()
                    .zip(&envelope)
                    .find(|(rec, _)| **rec >= r - 1e-12)
                    .map(|(_, p)| *p)
                    .unwrap_or(0.0);
                acc += p;
            }
            acc / 11.0
        }
    }
}

fn mean_over(classes: impl Iterator<Item = usize>, per_class: &[Option<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in classes {
        if let Some(ap) = per_class[c] {
            sum += ap;
            n += 1;
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Evaluate mAP over a prediction/ground-truth split.
pub fn evaluate_map(
    predictions: &[EvalDetection],
    ground_truths: &[EvalGroundTruth],
    cfg: &EvalConfig,
) -> MapReport {
    let mut per_class: Vec<Option<f64>> = vec![None; cfg.num_hoi_classes];
    for class in 0..cfg.num_hoi_classes {
        let pool: Option<BTreeSet<usize>> = match cfg.setting {
            EvalSetting::Default => None,
            EvalSetting::KnownObject => Some(known_object_pool(
                ground_truths,
                &cfg.hoi_to_object,
                cfg.hoi_to_object[class],
            )),
        };
        let in_pool =
            |img: usize| -> bool { pool.as_ref().map_or(true, |p| p.contains(&img)) };

        let class_gts: Vec<&EvalGroundTruth> = ground_truths
            .iter()
            .filter(|g| g.hoi_class == class && in_pool(g.image))
            .collect();
        if class_gts.is_empty() {
            continue; // excluded from the mean, not scored as 0
        }
        let mut class_dets: Vec<(usize, EvalDetection)> = predictions
            .iter()
            .enumerate()
            .filter(|(_, d)| d.hoi_class == class && in_pool(d.image))
            .map(|(i, d)| (i, d.clone()))
            .collect();
        score_order(&mut class_dets);

        let mut matched = vec![false; class_gts.len()];
        let mut tp_flags = Vec::with_capacity(class_dets.len());
        for (_, det) in &class_dets {
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in class_gts.iter().enumerate() {
                if matched[gi] || gt.image != det.image {
                    continue;
                }
                let overlap = triplet_overlap(det, gt);
                if overlap >= cfg.iou_threshold
                    && best.map_or(true, |(_, o)| overlap > o)
                {
                    best = Some((gi, overlap));
                }
            }
            match best {
                Some((gi, _)) => {
                    matched[gi] = true;
                    tp_flags.push(true);
                }
                None => tp_flags.push(false),
            }
        }
        per_class[class] = Some(average_precision(
            &tp_flags,
            class_gts.len(),
            cfg.interpolation,
        ));
    }

    MapReport {
        full: mean_over(0..cfg.num_hoi_classes, &per_class),
        rare: mean_over(
            (0..cfg.num_hoi_classes).filter(|&c| cfg.rare[c]),
            &per_class,
        ),
        non_rare: mean_over(
            (0..cfg.num_hoi_classes).filter(|&c| !cfg.rare[c]),
            &per_class,
        ),
        per_class,
    }
}
