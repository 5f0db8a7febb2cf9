//! Anchor-conditioned decoder stacks and subject-object fusion.
//!
//! Each decoder layer runs masked self-attention with anchor-derived
//! positional embeddings, box-constrained multi-scale deformable
//! cross-attention over the global features, and a feed-forward block
//! (post-norm residuals). Detection stacks refine their anchors layer by
//! layer in inverse-sigmoid space; the verb stack holds its boxes fixed and
//! consumes one fused query stream per layer.

use alloc::rc::Rc;
use alloc::vec::Vec;

use crate::features::MultiScaleFeatures;
use crate::geometry::BBox;
use crate::graph::{AttnMask, Node};
use crate::nn::{
    positional_encode_boxes, FeedForward, Fwd, LayerNorm, Linear, Mlp, MultiHeadAttention,
    ParamId, ParamSet,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Clamped inverse sigmoid, the anchor-refinement space.
pub fn inverse_sigmoid(x: f64) -> f64 {
    let x = x.clamp(1e-6, 1.0 - 1e-6);
    libm::log(x / (1.0 - x))
}

pub fn boxes_to_logits(boxes: &[BBox]) -> Tensor {
    let mut t = Tensor::zeros(boxes.len(), 4);
    for (r, b) in boxes.iter().enumerate() {
        let a = b.to_array();
        for c in 0..4 {
            t.set(r, c, inverse_sigmoid(a[c]));
        }
    }
    t
}

pub fn boxes_from_tensor(t: &Tensor) -> Vec<BBox> {
    assert_eq!(t.cols(), 4);
    (0..t.rows())
        .map(|r| BBox::from_array([t.get(r, 0), t.get(r, 1), t.get(r, 2), t.get(r, 3)]))
        .collect()
}

/// Multi-scale deformable sampling: for each query, head, level and point,
/// predict an offset inside the query's box, bilinearly sample the level and
/// mix with softmax-normalized attention weights.
///
/// `offsets` is (N × H·L·P·2) in box-relative units (location = box center +
/// offset · box size / 2), `weights` is (N × H·L·P) already normalized over
/// levels×points per head, and each entry of `level_values` is one level's
/// value-projected tokens.
pub fn deform_sample<'g>(
    offsets: Node<'g>,
    weights: Node<'g>,
    level_values: &[Node<'g>],
    level_dims: &[(usize, usize)],
    boxes: &[BBox],
    heads: usize,
    points: usize,
) -> Node<'g> {
    let g = offsets.graph();
    let n = offsets.rows();
    let num_levels = level_values.len();
    assert_eq!(level_dims.len(), num_levels);
    assert_eq!(boxes.len(), n, "one box per query");
    let dim = level_values[0].cols();
    assert_eq!(dim % heads, 0);
    let dh = dim / heads;
    assert_eq!(offsets.cols(), heads * num_levels * points * 2);
    assert_eq!(weights.cols(), heads * num_levels * points);
    for (lv, &(h, w)) in level_values.iter().zip(level_dims) {
        assert_eq!(lv.shape(), (h * w, dim));
    }

    let boxes: Rc<[BBox]> = Rc::from(boxes);
    let dims: Rc<[(usize, usize)]> = Rc::from(level_dims);

    // bilinear corner decomposition at a normalized location; far-out (or
    // non-finite) locations clamp to the border, letting NaNs surface in the
    // output where the training loop's finiteness check reports them
    #[inline]
    fn corners(x: f64, y: f64, gw: usize, gh: usize) -> ([usize; 2], [usize; 2], f64, f64) {
        let px = x * gw as f64 - 0.5;
        let py = y * gh as f64 - 0.5;
        let x0 = libm::floor(px);
        let y0 = libm::floor(py);
        let fx = px - x0;
        let fy = py - y0;
        let x0i = x0.clamp(-1.0, gw as f64) as isize;
        let y0i = y0.clamp(-1.0, gh as f64) as isize;
        let cx = [
            x0i.clamp(0, gw as isize - 1) as usize,
            (x0i + 1).clamp(0, gw as isize - 1) as usize,
        ];
        let cy = [
            y0i.clamp(0, gh as isize - 1) as usize,
            (y0i + 1).clamp(0, gh as isize - 1) as usize,
        ];
        (cx, cy, fx, fy)
    }

    let fboxes = boxes.clone();
    let fdims = dims.clone();
    let mut parents = alloc::vec![offsets, weights];
    parents.extend_from_slice(level_values);

    let value = {
        let mut out = Tensor::zeros(n, dim);
        g.with_value(offsets, |off| {
            g.with_value(weights, |wts| {
                let levels: Vec<Tensor> = level_values.iter().map(|v| v.value()).collect();
                for q in 0..n {
                    let b = fboxes[q];
                    for h in 0..heads {
                        for (l, lev) in levels.iter().enumerate() {
                            let (gh, gw) = fdims[l];
                            for p in 0..points {
                                let idx = (h * num_levels + l) * points + p;
                                let x = b.cx + off.get(q, 2 * idx) * b.w / 2.0;
                                let y = b.cy + off.get(q, 2 * idx + 1) * b.h / 2.0;
                                let aw = wts.get(q, idx);
                                let (cx, cy, fx, fy) = corners(x, y, gw, gh);
                                let wtab = [
                                    (1.0 - fx) * (1.0 - fy),
                                    fx * (1.0 - fy),
                                    (1.0 - fx) * fy,
                                    fx * fy,
                                ];
                                let orow = out.row_mut(q);
                                for (ci, &wc) in wtab.iter().enumerate() {
                                    let row = lev.row(cy[ci / 2] * gw + cx[ci % 2]);
                                    let f = aw * wc;
                                    for c in 0..dh {
                                        orow[h * dh + c] += f * row[h * dh + c];
                                    }
                                }
                            }
                        }
                    }
                }
            })
        });
        out
    };

    g.custom(value, &parents, move |gout, _, pv, needs| {
        let off = pv[0];
        let wts = pv[1];
        let mut d_off = needs[0].then(|| Tensor::zeros(off.rows(), off.cols()));
        let mut d_wts = needs[1].then(|| Tensor::zeros(wts.rows(), wts.cols()));
        let mut d_levels: Vec<Option<Tensor>> = (0..num_levels)
            .map(|l| needs[2 + l].then(|| Tensor::zeros(pv[2 + l].rows(), pv[2 + l].cols())))
            .collect();
        for q in 0..n {
            let b = boxes[q];
            let grow = gout.row(q);
            for h in 0..heads {
                let gslice = &grow[h * dh..(h + 1) * dh];
                for l in 0..num_levels {
                    let (gh, gw) = dims[l];
                    let lev = pv[2 + l];
                    for p in 0..points {
                        let idx = (h * num_levels + l) * points + p;
                        let x = b.cx + off.get(q, 2 * idx) * b.w / 2.0;
                        let y = b.cy + off.get(q, 2 * idx + 1) * b.h / 2.0;
                        let aw = wts.get(q, idx);
                        let (cx, cy, fx, fy) = corners(x, y, gw, gh);
                        let rows = [
                            lev.row(cy[0] * gw + cx[0]),
                            lev.row(cy[0] * gw + cx[1]),
                            lev.row(cy[1] * gw + cx[0]),
                            lev.row(cy[1] * gw + cx[1]),
                        ];
                        let wtab = [
                            (1.0 - fx) * (1.0 - fy),
                            fx * (1.0 - fy),
                            (1.0 - fx) * fy,
                            fx * fy,
                        ];
                        if let Some(dw) = d_wts.as_mut() {
                            let mut acc = 0.0;
                            for c in 0..dh {
                                let sample = wtab[0] * rows[0][h * dh + c]
                                    + wtab[1] * rows[1][h * dh + c]
                                    + wtab[2] * rows[2][h * dh + c]
                                    + wtab[3] * rows[3][h * dh + c];
                                acc += gslice[c] * sample;
                            }
                            let cur = dw.get(q, idx);
                            dw.set(q, idx, cur + acc);
                        }
                        if let Some(dl) = d_levels[l].as_mut() {
                            for (ci, &wc) in wtab.iter().enumerate() {
                                let drow = dl.row_mut(cy[ci / 2] * gw + cx[ci % 2]);
                                let f = aw * wc;
                                for c in 0..dh {
                                    drow[h * dh + c] += f * gslice[c];
                                }
                            }
                        }
                        if let Some(doff) = d_off.as_mut() {
                            let mut dpx = 0.0;
                            let mut dpy = 0.0;
                            for c in 0..dh {
                                let v00 = rows[0][h * dh + c];
                                let v01 = rows[1][h * dh + c];
                                let v10 = rows[2][h * dh + c];
                                let v11 = rows[3][h * dh + c];
                                dpx += gslice[c] * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                                dpy += gslice[c] * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                            }
                            let cur_x = doff.get(q, 2 * idx);
                            doff.set(q, 2 * idx, cur_x + aw * dpx * gw as f64 * b.w / 2.0);
                            let cur_y = doff.get(q, 2 * idx + 1);
                            doff.set(q, 2 * idx + 1, cur_y + aw * dpy * gh as f64 * b.h / 2.0);
                        }
                    }
                }
            }
        }
        let mut out = alloc::vec![d_off, d_wts];
        out.append(&mut d_levels);
        out
    })
}

/// Box-constrained multi-scale deformable cross-attention.
pub struct DeformAttn {
    pub offset_proj: Linear,
    pub weight_proj: Linear,
    pub value_proj: Linear,
    pub out_proj: Linear,
    pub heads: usize,
    pub points: usize,
    pub levels: usize,
}

impl DeformAttn {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        levels: usize,
        points: usize,
        rng: &mut Rng,
    ) -> Self {
        DeformAttn {
            offset_proj: Linear::new(
                ps,
                &alloc::format!("{name}.offset"),
                dim,
                heads * levels * points * 2,
                true,
                rng,
            ),
            weight_proj: Linear::new(
                ps,
                &alloc::format!("{name}.weight"),
                dim,
                heads * levels * points,
                true,
                rng,
            ),
            value_proj: Linear::new(ps, &alloc::format!("{name}.value"), dim, dim, true, rng),
            out_proj: Linear::new(ps, &alloc::format!("{name}.out"), dim, dim, true, rng),
            heads,
            points,
            levels,
        }
    }

    pub fn apply<'g>(
        &self,
        fwd: &Fwd<'g>,
        x: Node<'g>,
        boxes: &[BBox],
        feats: &MultiScaleFeatures<'g>,
    ) -> Node<'g> {
        assert_eq!(feats.levels.len(), self.levels, "level count");
        let n = x.rows();
        let offsets = self.offset_proj.apply(fwd, x);
        let logits = self.weight_proj.apply(fwd, x);
        // softmax over levels×points within each head
        let weights = logits
            .reshape(n * self.heads, self.levels * self.points)
            .row_softmax()
            .reshape(n, self.heads * self.levels * self.points);
        let values: Vec<Node<'g>> = feats
            .levels
            .iter()
            .map(|l| self.value_proj.apply(fwd, l.tokens))
            .collect();
        let dims: Vec<(usize, usize)> = feats.levels.iter().map(|l| (l.h, l.w)).collect();
        let sampled = deform_sample(
            offsets,
            weights,
            &values,
            &dims,
            boxes,
            self.heads,
            self.points,
        );
        self.out_proj.apply(fwd, sampled)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.offset_proj.param_ids();
        ids.extend(self.weight_proj.param_ids());
        ids.extend(self.value_proj.param_ids());
        ids.extend(self.out_proj.param_ids());
        ids
    }
}

/// One decoder layer: masked self-attention (+anchor positions), deformable
/// cross-attention, feed-forward; post-norm residuals.
pub struct DecoderLayer {
    pub sa: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub deform: DeformAttn,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
    pub ln3: LayerNorm,
    pub pos_proj: Linear,
    dim: usize,
}

impl DecoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        levels: usize,
        points: usize,
        ffn_hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        DecoderLayer {
            sa: MultiHeadAttention::new(ps, &alloc::format!("{name}.sa"), dim, heads, rng),
            ln1: LayerNorm::new(ps, &alloc::format!("{name}.ln1"), dim),
            deform: DeformAttn::new(ps, &alloc::format!("{name}.deform"), dim, heads, levels, points, rng),
            ln2: LayerNorm::new(ps, &alloc::format!("{name}.ln2"), dim),
            ffn: FeedForward::new(ps, &alloc::format!("{name}.ffn"), dim, ffn_hidden, rng),
            ln3: LayerNorm::new(ps, &alloc::format!("{name}.ln3"), dim),
            pos_proj: Linear::new(ps, &alloc::format!("{name}.pos"), dim, dim, true, rng),
            dim,
        }
    }

    pub fn apply<'g>(
        &self,
        fwd: &Fwd<'g>,
        x: Node<'g>,
        boxes: &[BBox],
        feats: &MultiScaleFeatures<'g>,
        mask: Option<Rc<AttnMask>>,
    ) -> Node<'g> {
        let pos = self
            .pos_proj
            .apply(fwd, fwd.input(positional_encode_boxes(boxes, self.dim)));
        let attended = self.sa.apply(fwd, x, x, x, Some(pos), Some(pos), mask);
        let x = self.ln1.apply(fwd, x.add(attended));
        let sampled = self.deform.apply(fwd, x, boxes, feats);
        let x = self.ln2.apply(fwd, x.add(sampled));
        self.ln3.apply(fwd, x.add(self.ffn.apply(fwd, x)))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.sa.param_ids();
        ids.extend(self.ln1.param_ids());
        ids.extend(self.deform.param_ids());
        ids.extend(self.ln2.param_ids());
        ids.extend(self.ffn.param_ids());
        ids.extend(self.ln3.param_ids());
        ids.extend(self.pos_proj.param_ids());
        ids
    }
}

/// Per-layer box refinement heads: logit-space offsets added to the
/// inverse-sigmoid anchors, re-squashed into (0,1).
pub struct BoxRefineHead {
    pub heads: Vec<Mlp>,
}

impl BoxRefineHead {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize, layers: usize, rng: &mut Rng) -> Self {
        BoxRefineHead {
            heads: (0..layers)
                .map(|l| Mlp::new(ps, &alloc::format!("{name}.layer{l}"), dim, dim, 4, rng))
                .collect(),
        }
    }

    /// Refined boxes for one layer: sigmoid(head(embed) + logit(anchors)).
    /// `anchor_logits` may carry gradient (learnable initial anchors).
    pub fn refine<'g>(
        &self,
        fwd: &Fwd<'g>,
        layer: usize,
        embed: Node<'g>,
        anchor_logits: Node<'g>,
    ) -> Node<'g> {
        self.heads[layer]
            .apply(fwd, embed)
            .add(anchor_logits)
            .sigmoid()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.heads.iter().flat_map(Mlp::param_ids).collect()
    }
}

/// A stack of decoder layers sharing one query stream.
pub struct DecoderStack {
    pub layers: Vec<DecoderLayer>,
}

/// Everything a refining stack run produces.
pub struct StackRun<'g> {
    /// Embedding after each layer.
    pub embeddings: Vec<Node<'g>>,
    /// Refined boxes predicted at each layer (N×4, squashed).
    pub box_preds: Vec<Node<'g>>,
    /// Anchors fed INTO each layer (layer 0 gets the initial anchors).
    pub anchors_in: Vec<Vec<BBox>>,
    /// Detached refined anchors after the last layer.
    pub final_anchors: Vec<BBox>,
}

impl DecoderStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        num_layers: usize,
        dim: usize,
        heads: usize,
        levels: usize,
        points: usize,
        ffn_hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        DecoderStack {
            layers: (0..num_layers)
                .map(|l| {
                    DecoderLayer::new(
                        ps,
                        &alloc::format!("{name}.layer{l}"),
                        dim,
                        heads,
                        levels,
                        points,
                        ffn_hidden,
                        rng,
                    )
                })
                .collect(),
        }
    }

    /// Chained queries with per-layer anchor refinement. `anchor_logits0` is
    /// the (N×4) inverse-sigmoid anchor node for layer 0 (gradient may flow
    /// into learnable anchors through the first refinement); later layers use
    /// detached refined anchors.
    pub fn run_refining<'g>(
        &self,
        fwd: &Fwd<'g>,
        queries: Node<'g>,
        anchor_logits0: Node<'g>,
        refine: &BoxRefineHead,
        feats: &MultiScaleFeatures<'g>,
        mask: Option<Rc<AttnMask>>,
    ) -> StackRun<'g> {
        assert_eq!(refine.heads.len(), self.layers.len());
        let mut embeddings = Vec::with_capacity(self.layers.len());
        let mut box_preds = Vec::with_capacity(self.layers.len());
        let mut anchors_in = Vec::with_capacity(self.layers.len());
        let mut x = queries;
        let mut anchor_logits = anchor_logits0;
        let mut anchors = boxes_from_tensor(&anchor_logits.value().map(|v| {
            1.0 / (1.0 + libm::exp(-v))
        }));
        for (l, layer) in self.layers.iter().enumerate() {
            anchors_in.push(anchors.clone());
            x = layer.apply(fwd, x, &anchors, feats, mask.clone());
            let pred = refine.refine(fwd, l, x, anchor_logits);
            embeddings.push(x);
            box_preds.push(pred);
            anchors = boxes_from_tensor(&pred.value());
            anchor_logits = fwd.input(boxes_to_logits(&anchors));
        }
        StackRun {
            embeddings,
            box_preds,
            anchors_in,
            final_anchors: anchors,
        }
    }

    /// Fixed boxes, one independent query input per layer (the verb decoder:
    /// layer i consumes the fused verb query of layer i).
    pub fn run_fixed_boxes<'g>(
        &self,
        fwd: &Fwd<'g>,
        inputs: &[Node<'g>],
        boxes: &[BBox],
        feats: &MultiScaleFeatures<'g>,
        mask: Option<Rc<AttnMask>>,
    ) -> Vec<Node<'g>> {
        assert_eq!(inputs.len(), self.layers.len(), "one input per layer");
        self.layers
            .iter()
            .zip(inputs)
            .map(|(layer, &x)| layer.apply(fwd, x, boxes, feats, mask.clone()))
            .collect()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(DecoderLayer::param_ids).collect()
    }
}

/// Deep-copy parameter values of `src` into `dst` (cloning the object decoder
/// into the subject decoder at initialization). The stacks train
/// independently afterwards.
pub fn clone_stack_params(ps: &mut ParamSet, dst: &DecoderStack, src: &DecoderStack) {
    let d = dst.param_ids();
    let s = src.param_ids();
    assert_eq!(d.len(), s.len(), "stack shapes must match to clone");
    for (dst_id, src_id) in d.into_iter().zip(s) {
        let v = ps.get(src_id).clone();
        assert_eq!(ps.get(dst_id).shape(), v.shape());
        *ps.get_mut(dst_id) = v;
    }
}

/// Cross-attention absorbing verb-prior knowledge into the fused
/// subject-object embeddings.
pub struct SoAttention {
    pub cross: MultiHeadAttention,
}

impl SoAttention {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Self {
        SoAttention {
            cross: MultiHeadAttention::new(ps, &alloc::format!("{name}.cross"), dim, heads, rng),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.cross.param_ids()
    }
}

/// Fuse per-layer subject/object embeddings into per-layer verb queries.
///
/// The intermediate embedding is the mean of subject and object embeddings.
/// With `so_attention` present, each layer's intermediate passes a
/// cross-attention against the verb priors plus a residual, and layers above
/// the first average the current and previous residual outputs (bottom-up
/// path). Without it, the fusion degrades to the plain mean.
pub fn so_fuse<'g>(
    fwd: &Fwd<'g>,
    subject_embeddings: &[Node<'g>],
    object_embeddings: &[Node<'g>],
    so_attention: Option<&SoAttention>,
    verb_priors: Node<'g>,
) -> Vec<Node<'g>> {
    assert_eq!(subject_embeddings.len(), object_embeddings.len());
    let fused: Vec<Node<'g>> = subject_embeddings
        .iter()
        .zip(object_embeddings)
        .map(|(&s, &o)| s.add(o).scale(0.5))
        .collect();
    let Some(so) = so_attention else {
        return fused;
    };
    let residuals: Vec<Node<'g>> = fused
        .iter()
        .map(|&e| {
            so.cross
                .apply(fwd, e, verb_priors, verb_priors, None, None, None)
                .add(e)
        })
        .collect();
    residuals
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            if i == 0 {
                r
            } else {
                residuals[i - 1].add(r).scale(0.5)
            }
        })
        .collect()
}

/// Verb-box variants selectable for the verb decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VerbBoxKind {
    Subject,
    Object,
    Mbr,
    Smbr,
    Asmbr,
}

impl VerbBoxKind {
    pub fn build(&self, subject: &BBox, object: &BBox) -> BBox {
        match self {
            VerbBoxKind::Subject => *subject,
            VerbBoxKind::Object => *object,
            VerbBoxKind::Mbr => crate::geometry::make_mbr(subject, object),
            VerbBoxKind::Smbr => crate::geometry::make_smbr(subject, object),
            VerbBoxKind::Asmbr => crate::geometry::make_asmbr(subject, object),
        }
    }
}

/// Verb boxes from the last-layer refined subject and object anchors.
pub fn verb_boxes_from_anchors(
    kind: VerbBoxKind,
    subject_anchors: &[BBox],
    object_anchors: &[BBox],
) -> Vec<BBox> {
    subject_anchors
        .iter()
        .zip(object_anchors)
        .map(|(s, o)| kind.build(s, o))
        .collect()
}
