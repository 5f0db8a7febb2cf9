//! Frozen vision-language provider interface, the vision advisor decoder and
//! the verb-HOI prediction bridge.
//!
//! The provider abstracts whatever model supplies image-level tokens and
//! prompt embeddings; it never receives gradients. The advisor decoder mixes
//! those tokens and the detector's own multi-scale features into the verb
//! embeddings under verb-box positional guidance; the bridge then predicts
//! verb and HOI labels in two steps, with the HOI head optionally initialized
//! from averaged prompt-embedding sets.

use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;

use crate::decoder::DeformAttn;
use crate::features::{ImageRaster, MultiScaleFeatures};
use crate::geometry::BBox;
use crate::graph::{concat_cols, AttnMask, Node};
use crate::nn::{
    positional_encode_boxes, FeedForward, Fwd, LayerNorm, Linear, MultiHeadAttention, ParamId,
    ParamSet,
};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{CoreError, Result};

/// Frozen source of image-level tokens and prompt-embedding sets.
/// Implementations must be deterministic for a fixed input.
pub trait AdvisorProvider {
    /// Width of image-level feature tokens.
    fn feature_dim(&self) -> usize;
    /// Width of prompt embeddings.
    fn prompt_dim(&self) -> usize;
    /// Image-level tokens, (tokens × feature_dim).
    fn image_features(&self, image: &ImageRaster) -> Tensor;
    /// One embedding set per phrase (a set of prompt_dim vectors each).
    fn prompt_embedding_sets(&self, phrases: &[String]) -> Vec<Vec<Vec<f64>>>;
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic desk-scale stand-in for a frozen VLM: image tokens are a
/// fixed random projection of downsampled image statistics; prompt sets are
/// seeded per phrase by hash.
pub struct StubProvider {
    seed: u64,
    num_tokens: usize,
    feature_dim: usize,
    prompt_dim: usize,
    vectors_per_prompt: usize,
    stats_res: usize,
    projections: Vec<Tensor>, // per token: (feature_dim × stats)
}

impl StubProvider {
    pub fn new(seed: u64, num_tokens: usize, feature_dim: usize, prompt_dim: usize) -> Self {
        let stats_res = 4;
        let stats = stats_res * stats_res * 3;
        let mut rng = Rng::new(seed ^ 0x5601_ad71_50b5_u64);
        let projections = (0..num_tokens)
            .map(|_| Tensor::randn(feature_dim, stats, 1.0 / libm::sqrt(stats as f64), &mut rng))
            .collect();
        StubProvider {
            seed,
            num_tokens,
            feature_dim,
            prompt_dim,
            vectors_per_prompt: 4,
            stats_res,
            projections,
        }
    }
}

impl AdvisorProvider for StubProvider {
    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn prompt_dim(&self) -> usize {
        self.prompt_dim
    }

    fn image_features(&self, image: &ImageRaster) -> Tensor {
        let small = image.downsample(self.stats_res);
        let mut out = Tensor::zeros(self.num_tokens, self.feature_dim);
        for (t, proj) in self.projections.iter().enumerate() {
            let row = out.row_mut(t);
            for (c, item) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (s, &px) in small.data.iter().enumerate() {
                    acc += proj.get(c, s) * px;
                }
                *item = libm::tanh(acc);
            }
        }
        out
    }

    fn prompt_embedding_sets(&self, phrases: &[String]) -> Vec<Vec<Vec<f64>>> {
        phrases
            .iter()
            .map(|p| {
                let mut rng = Rng::new(self.seed ^ fnv1a64(p.as_bytes()));
                (0..self.vectors_per_prompt)
                    .map(|_| (0..self.prompt_dim).map(|_| rng.normal()).collect())
                    .collect()
            })
            .collect()
    }
}

/// Per-HOI-class classifier weights: the average of each class's
/// prompt-embedding set.
pub fn hoi_text_weights(provider: &dyn AdvisorProvider, phrases: &[String]) -> Tensor {
    let sets = provider.prompt_embedding_sets(phrases);
    let dim = provider.prompt_dim();
    let mut out = Tensor::zeros(phrases.len(), dim);
    for (r, set) in sets.iter().enumerate() {
        assert!(!set.is_empty(), "prompt set must not be empty");
        let row = out.row_mut(r);
        for vec in set {
            for (a, v) in row.iter_mut().zip(vec) {
                *a += v;
            }
        }
        for a in row.iter_mut() {
            *a /= set.len() as f64;
        }
    }
    out
}

/// One advisor decoder layer (pre-norm residuals): box-positional
/// self-attention → cross-attention over provider tokens → box-constrained
/// deformable cross-attention over the detector features → feed-forward.
pub struct AdvisorLayer {
    ln1: LayerNorm,
    sa: MultiHeadAttention,
    ln2: LayerNorm,
    cross: MultiHeadAttention,
    ln3: LayerNorm,
    deform: DeformAttn,
    ln4: LayerNorm,
    ffn: FeedForward,
    pos_proj: Linear,
    dim: usize,
}

impl AdvisorLayer {
    #[allow(clippy::too_many_arguments)]
    fn new(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        levels: usize,
        points: usize,
        ffn_hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        AdvisorLayer {
            ln1: LayerNorm::new(ps, &alloc::format!("{name}.ln1"), dim),
            sa: MultiHeadAttention::new(ps, &alloc::format!("{name}.sa"), dim, heads, rng),
            ln2: LayerNorm::new(ps, &alloc::format!("{name}.ln2"), dim),
            cross: MultiHeadAttention::new(ps, &alloc::format!("{name}.cross"), dim, heads, rng),
            ln3: LayerNorm::new(ps, &alloc::format!("{name}.ln3"), dim),
            deform: DeformAttn::new(
                ps,
                &alloc::format!("{name}.deform"),
                dim,
                heads,
                levels,
                points,
                rng,
            ),
            ln4: LayerNorm::new(ps, &alloc::format!("{name}.ln4"), dim),
            ffn: FeedForward::new(ps, &alloc::format!("{name}.ffn"), dim, ffn_hidden, rng),
            pos_proj: Linear::new(ps, &alloc::format!("{name}.pos"), dim, dim, true, rng),
            dim,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn apply<'g>(
        &self,
        fwd: &Fwd<'g>,
        x: Node<'g>,
        verb_boxes: &[BBox],
        f_ga: Node<'g>,
        feats: &MultiScaleFeatures<'g>,
        mask: Option<Rc<AttnMask>>,
        use_pe: bool,
    ) -> Node<'g> {
        let pos = use_pe.then(|| {
            self.pos_proj
                .apply(fwd, fwd.input(positional_encode_boxes(verb_boxes, self.dim)))
        });
        let normed = self.ln1.apply(fwd, x);
        let x = x.add(self.sa.apply(fwd, normed, normed, normed, pos, pos, mask));
        let normed = self.ln2.apply(fwd, x);
        let x = x.add(self.cross.apply(fwd, normed, f_ga, f_ga, None, None, None));
        let normed = self.ln3.apply(fwd, x);
        let x = x.add(self.deform.apply(fwd, normed, verb_boxes, feats));
        let normed = self.ln4.apply(fwd, x);
        x.add(self.ffn.apply(fwd, normed))
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.ln1.param_ids();
        ids.extend(self.sa.param_ids());
        ids.extend(self.ln2.param_ids());
        ids.extend(self.cross.param_ids());
        ids.extend(self.ln3.param_ids());
        ids.extend(self.deform.param_ids());
        ids.extend(self.ln4.param_ids());
        ids.extend(self.ffn.param_ids());
        ids.extend(self.pos_proj.param_ids());
        ids
    }
}

/// The advisor decoder plus the verb-HOI bridge heads.
pub struct VisionAdvisor {
    pub feat_proj: Linear,
    pub layers: Vec<AdvisorLayer>,
    pub bridge_proj: Linear,
    pub hoi_head: Linear,
    pub num_hoi_classes: usize,
    dim: usize,
}

impl VisionAdvisor {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        levels: usize,
        points: usize,
        ffn_hidden: usize,
        num_layers: usize,
        advisor_dim: usize,
        num_hoi_classes: usize,
        rng: &mut Rng,
    ) -> Self {
        VisionAdvisor {
            feat_proj: Linear::new(
                ps,
                &alloc::format!("{name}.feat_proj"),
                advisor_dim,
                dim,
                true,
                rng,
            ),
            layers: (0..num_layers)
                .map(|l| {
                    AdvisorLayer::new(
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
            bridge_proj: Linear::new(
                ps,
                &alloc::format!("{name}.bridge_proj"),
                2 * dim,
                dim,
                true,
                rng,
            ),
            hoi_head: Linear::new(
                ps,
                &alloc::format!("{name}.hoi_head"),
                dim,
                num_hoi_classes,
                true,
                rng,
            ),
            num_hoi_classes,
            dim,
        }
    }

    /// Overwrite the HOI head with text-derived weights and a zero bias.
    pub fn init_hoi_head_from_text(&self, ps: &mut ParamSet, text_weights: &Tensor) -> Result<()> {
        if text_weights.shape() != (self.num_hoi_classes, self.dim) {
            return Err(CoreError::ShapeMismatch(alloc::format!(
                "text weights {:?} vs HOI head ({}, {})",
                text_weights.shape(),
                self.num_hoi_classes,
                self.dim
            )));
        }
        *ps.get_mut(self.hoi_head.weight) = text_weights.clone();
        if let Some(b) = self.hoi_head.bias {
            *ps.get_mut(b) = Tensor::zeros(1, self.num_hoi_classes);
        }
        Ok(())
    }

    /// Run the advisor decoder, returning the refined verb embeddings after
    /// each layer. `advisor_features` are the provider's raw image tokens.
    #[allow(clippy::too_many_arguments)]
    pub fn decode<'g>(
        &self,
        fwd: &Fwd<'g>,
        verb_embedding: Node<'g>,
        verb_boxes: &[BBox],
        advisor_features: &Tensor,
        feats: &MultiScaleFeatures<'g>,
        mask: Option<Rc<AttnMask>>,
        use_pe: bool,
    ) -> Vec<Node<'g>> {
        assert_eq!(
            advisor_features.cols(),
            self.feat_proj.in_dim,
            "advisor feature width"
        );
        let f_ga = self
            .feat_proj
            .apply(fwd, fwd.input(advisor_features.clone()));
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut x = verb_embedding;
        for layer in &self.layers {
            x = layer.apply(fwd, x, verb_boxes, f_ga, feats, mask.clone(), use_pe);
            outs.push(x);
        }
        outs
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.feat_proj.param_ids();
        for l in &self.layers {
            ids.extend(l.param_ids());
        }
        ids.extend(self.bridge_proj.param_ids());
        ids.extend(self.hoi_head.param_ids());
        ids
    }
}

/// Two-step verb/HOI prediction: project the concatenated verb-decoder and
/// advisor embeddings into `e_vt`, predict verbs from it with the detector's
/// own verb head, then predict HOI classes from `e_vt + e_va`.
pub fn vhoi_bridge<'g>(
    fwd: &Fwd<'g>,
    advisor: &VisionAdvisor,
    verb_head: &Linear,
    e_v_last: Node<'g>,
    e_va_last: Node<'g>,
) -> (Node<'g>, Node<'g>, Node<'g>) {
    let e_vt = advisor
        .bridge_proj
        .apply(fwd, concat_cols(&[e_v_last, e_va_last]));
    let verb_logits = verb_head.apply(fwd, e_vt);
    let hoi_logits = advisor.hoi_head.apply(fwd, e_vt.add(e_va_last));
    (e_vt, verb_logits, hoi_logits)
}
