//! Denoising query groups and the attention mask that keeps them from leaking
//! ground truth into the inference branch.
//!
//! Per ground-truth instance, `groups_per_kind` object-label-noised queries
//! and as many verb-label-noised queries are built. Object labels flip to a
//! different class with probability `obj_flip_rate`; verb labels keep every
//! ground-truth bit and may switch extra bits on. Noised copies of the
//! subject/object boxes become the queries' anchors.

use alloc::rc::Rc;
use alloc::vec::Vec;

use crate::geometry::{noise_box, BBox};
use crate::graph::{AttnMask, Node};
use crate::hoi::HoiInstance;
use crate::nn::{Fwd, ParamSet};
use crate::priors::LabelEmbeddingBank;
use crate::rng::Rng;
use crate::tensor::{matmul_nn, Tensor};
use crate::{CoreError, Result};

/// Rates and group count for denoising training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DnConfig {
    /// Probability that an object label flips to another class.
    pub obj_flip_rate: f64,
    /// Probability that a verb label gets noised at all.
    pub verb_noise_rate: f64,
    /// Within a noised verb label, per-class probability of switching a
    /// non-ground-truth bit on.
    pub verb_flip_rate: f64,
    /// Box noise scale for anchor generation.
    pub box_noise_scale: f64,
    /// Noised groups per kind per instance (the query count per instance is
    /// twice this).
    pub groups_per_kind: usize,
}

impl Default for DnConfig {
    fn default() -> Self {
        DnConfig {
            obj_flip_rate: 0.3,
            verb_noise_rate: 0.3,
            verb_flip_rate: 0.4,
            box_noise_scale: 0.4,
            groups_per_kind: 3,
        }
    }
}

impl DnConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.obj_flip_rate,
            self.verb_noise_rate,
            self.verb_flip_rate,
        ];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(CoreError::InvalidConfig(alloc::format!(
                "flip rates must lie in [0,1]: {rates:?}"
            )));
        }
        if self.box_noise_scale < 0.0 || self.box_noise_scale >= 1.0 {
            return Err(CoreError::InvalidConfig(alloc::format!(
                "box noise scale must lie in [0,1): {}",
                self.box_noise_scale
            )));
        }
        if self.groups_per_kind == 0 {
            return Err(CoreError::InvalidConfig(
                "groups_per_kind must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// With probability `flip_rate`, a uniformly chosen class different from
/// `gt_class`; otherwise `gt_class`.
pub fn flip_object_label(
    gt_class: usize,
    flip_rate: f64,
    num_classes: usize,
    rng: &mut Rng,
) -> Result<usize> {
    if gt_class >= num_classes {
        return Err(CoreError::IndexOutOfRange {
            index: gt_class,
            bound: num_classes,
        });
    }
    if flip_rate > 0.0 && num_classes < 2 {
        return Err(CoreError::InvalidConfig(
            "cannot flip object labels with a single class".into(),
        ));
    }
    if rng.chance(flip_rate) {
        let mut c = rng.below(num_classes - 1);
        if c >= gt_class {
            c += 1;
        }
        Ok(c)
    } else {
        Ok(gt_class)
    }
}

/// Noise a verb multi-hot: ground-truth bits always survive; with probability
/// `noise_rate` each non-ground-truth bit independently switches on with
/// probability `flip_rate`.
pub fn flip_verb_label(
    gt: &[bool],
    noise_rate: f64,
    flip_rate: f64,
    rng: &mut Rng,
) -> Result<Vec<bool>> {
    if !gt.iter().any(|&b| b) {
        return Err(CoreError::EmptySet("ground-truth verb set"));
    }
    let mut out = gt.to_vec();
    if rng.chance(noise_rate) {
        for (i, bit) in out.iter_mut().enumerate() {
            if !gt[i] && rng.chance(flip_rate) {
                *bit = true;
            }
        }
    }
    Ok(out)
}

/// Denoising queries for one image, plus the attention mask covering the
/// combined (inference + denoising) stream.
///
/// Row layout: per instance `k`, rows `[2·N_p·k, 2·N_p·k + N_p)` are
/// object-label-noised and the following `N_p` rows are verb-label-noised.
/// Query embeddings are assembled in-graph as
/// `obj_selection · t_obj + verb_selection · t_verb`.
pub struct DnGroupBatch {
    pub groups_per_kind: usize,
    pub num_instances: usize,
    /// (2·N_p·K × C_obj): one-hot on object-noised rows, zero elsewhere.
    pub obj_selection: Tensor,
    /// (2·N_p·K × C_verb): multi-hot on verb-noised rows, zero elsewhere.
    pub verb_selection: Tensor,
    /// Noised object class per (instance, group), instance-major.
    pub noised_obj_labels: Vec<usize>,
    /// Noised verb multi-hot per (instance, group), instance-major.
    pub noised_verb_labels: Vec<Vec<bool>>,
    /// Noised subject anchor per denoising query row.
    pub subject_anchors: Vec<BBox>,
    /// Noised object anchor per denoising query row.
    pub object_anchors: Vec<BBox>,
    /// Ground-truth index each denoising query is supervised against.
    pub gt_index: Vec<usize>,
    /// Square mask over `num_queries + 2·N_p·K` positions.
    pub mask: Rc<AttnMask>,
}

impl DnGroupBatch {
    pub fn num_dn_queries(&self) -> usize {
        2 * self.groups_per_kind * self.num_instances
    }

    /// Assemble the query embeddings in-graph (gradients reach the banks).
    pub fn queries<'g>(&self, fwd: &Fwd<'g>, bank: &LabelEmbeddingBank) -> Node<'g> {
        let sel_o = fwd.input(self.obj_selection.clone());
        let sel_v = fwd.input(self.verb_selection.clone());
        sel_o
            .matmul(fwd.param(bank.t_obj))
            .add(sel_v.matmul(fwd.param(bank.t_verb)))
    }

    /// Same embeddings as plain values (no graph), for inspection and tests.
    pub fn query_values(&self, ps: &ParamSet, bank: &LabelEmbeddingBank) -> Tensor {
        let mut q = matmul_nn(&self.obj_selection, ps.get(bank.t_obj));
        q.add_assign(&matmul_nn(&self.verb_selection, ps.get(bank.t_verb)));
        q
    }
}

/// Denoising group of a combined-stream row, if it is a denoising row.
/// Object-noised row `j` and verb-noised row `j` of one instance share a group.
fn dn_group(row: usize, num_queries: usize, groups_per_kind: usize) -> Option<usize> {
    if row < num_queries {
        return None;
    }
    let dn = row - num_queries;
    let instance = dn / (2 * groups_per_kind);
    let j = (dn % (2 * groups_per_kind)) % groups_per_kind;
    Some(instance * groups_per_kind + j)
}

/// Attention mask over the combined stream: inference queries attend only to
/// inference queries; denoising queries attend to their own group and to the
/// inference queries; no denoising group sees another.
pub fn build_attention_mask(
    num_queries: usize,
    num_instances: usize,
    groups_per_kind: usize,
) -> AttnMask {
    let total = num_queries + 2 * groups_per_kind * num_instances;
    AttnMask::from_fn(total, total, |q, k| {
        match (
            dn_group(q, num_queries, groups_per_kind),
            dn_group(k, num_queries, groups_per_kind),
        ) {
            (None, None) => true,
            (None, Some(_)) => false,
            (Some(_), None) => true,
            (Some(gq), Some(gk)) => gq == gk,
        }
    })
}

/// Build the denoising batch for one image's ground truths.
pub fn build_dn_queries(
    gts: &[HoiInstance],
    bank: &LabelEmbeddingBank,
    cfg: &DnConfig,
    num_queries: usize,
    rng: &mut Rng,
) -> Result<DnGroupBatch> {
    cfg.validate()?;
    let k = gts.len();
    let np = cfg.groups_per_kind;
    let rows = 2 * np * k;
    let mut obj_selection = Tensor::zeros(rows, bank.num_obj_classes);
    let mut verb_selection = Tensor::zeros(rows, bank.num_verb_classes);
    let mut noised_obj_labels = Vec::with_capacity(np * k);
    let mut noised_verb_labels = Vec::with_capacity(np * k);
    let mut subject_anchors = Vec::with_capacity(rows);
    let mut object_anchors = Vec::with_capacity(rows);
    let mut gt_index = Vec::with_capacity(rows);

    for (gi, gt) in gts.iter().enumerate() {
        if gt.verbs.len() != bank.num_verb_classes {
            return Err(CoreError::ShapeMismatch(alloc::format!(
                "verb multi-hot length {} vs verb classes {}",
                gt.verbs.len(),
                bank.num_verb_classes
            )));
        }
        let base = 2 * np * gi;
        for j in 0..np {
            let label = flip_object_label(gt.object_class, cfg.obj_flip_rate, bank.num_obj_classes, rng)?;
            obj_selection.set(base + j, label, 1.0);
            noised_obj_labels.push(label);
        }
        for j in 0..np {
            let verbs = flip_verb_label(&gt.verbs, cfg.verb_noise_rate, cfg.verb_flip_rate, rng)?;
            for (vi, &on) in verbs.iter().enumerate() {
                if on {
                    verb_selection.set(base + np + j, vi, 1.0);
                }
            }
            noised_verb_labels.push(verbs);
        }
        for _ in 0..2 * np {
            subject_anchors.push(noise_box(&gt.subject, cfg.box_noise_scale, rng));
            object_anchors.push(noise_box(&gt.object, cfg.box_noise_scale, rng));
            gt_index.push(gi);
        }
    }

    Ok(DnGroupBatch {
        groups_per_kind: np,
        num_instances: k,
        obj_selection,
        verb_selection,
        noised_obj_labels,
        noised_verb_labels,
        subject_anchors,
        object_anchors,
        gt_index,
        mask: Rc::new(build_attention_mask(num_queries, k, np)),
    })
}
