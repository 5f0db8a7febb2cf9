//! The full split-decoding HOI detector: feature extractor, label priors,
//! subject/object/verb decoder stacks, optional vision advisor, prediction
//! heads and the ablation switches wiring them together.

use alloc::vec::Vec;

use crate::advisor::{vhoi_bridge, VisionAdvisor};
use crate::decoder::{
    boxes_to_logits, clone_stack_params, so_fuse, verb_boxes_from_anchors, BoxRefineHead,
    DecoderStack, SoAttention, VerbBoxKind,
};
use crate::denoise::{DnConfig, DnGroupBatch};
use crate::features::{FeatureExtractor, ImageRaster, ToyExtractorConfig, ToyFeatureExtractor};
use crate::geometry::BBox;
use crate::graph::{concat_rows, Node};
use crate::loss::LayerSupervision;
use crate::nn::{Fwd, Linear, ParamId, ParamSet};
use crate::priors::{init_inference_queries, CoefficientMatrices, LabelEmbeddingBank};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{CoreError, Result};

/// Architecture and training-strategy switches. Each published ablation row
/// maps onto exactly one combination.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationSwitches {
    /// Dedicated subject decoder (off: the object decoder refines both boxes).
    pub subject_decoder: bool,
    /// Dedicated verb decoder (off: verb heads read the fused queries).
    pub verb_decoder: bool,
    /// Verb-prior cross-attention with the bottom-up path (off: plain mean).
    pub so_attention: bool,
    /// Denoising training and prior-initialized queries (off: plain learnable
    /// queries, no denoising batch anywhere).
    pub stg: bool,
    /// Vision advisor decoder plus verb-HOI bridge.
    pub vla: bool,
    /// Interaction-region representation for the verb decoder.
    pub verb_box: VerbBoxKind,
    /// Verb-box positional embeddings inside the advisor decoder.
    pub pe_verb_box: bool,
    /// Initialize the HOI head from averaged prompt embeddings.
    pub text_init: bool,
    /// Keep the bridge's verb-prediction step (off: E_v' + E_va feeds the HOI
    /// head directly).
    pub vla_verb_prediction: bool,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        AblationSwitches {
            subject_decoder: true,
            verb_decoder: true,
            so_attention: true,
            stg: true,
            vla: false,
            verb_box: VerbBoxKind::Asmbr,
            pe_verb_box: true,
            text_init: true,
            vla_verb_prediction: true,
        }
    }
}

impl AblationSwitches {
    pub fn validate(&self) -> Result<()> {
        if self.so_attention && !self.subject_decoder {
            return Err(CoreError::InvalidConfig(
                "subject-object attention needs the subject decoder".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelConfig {
    pub dim: usize,
    pub num_queries: usize,
    pub num_layers: usize,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    pub ffn_hidden: usize,
    pub num_obj_classes: usize,
    pub num_verb_classes: usize,
    pub num_hoi_classes: usize,
    pub input_res: usize,
    pub stem_channels: usize,
    pub encoder_layers: usize,
    pub advisor_tokens: usize,
    pub advisor_dim: usize,
    pub switches: AblationSwitches,
    pub dn: DnConfig,
}

impl ModelConfig {
    /// Desk-scale preset: D=64, 16 queries, 2 layers, 4 heads, 2 levels,
    /// 2·N_p = 6 denoising groups per instance.
    pub fn toy_s(num_obj_classes: usize, num_verb_classes: usize, num_hoi_classes: usize) -> Self {
        ModelConfig {
            dim: 64,
            num_queries: 16,
            num_layers: 2,
            heads: 4,
            levels: 2,
            points: 4,
            ffn_hidden: 128,
            num_obj_classes,
            num_verb_classes,
            num_hoi_classes,
            input_res: 48,
            stem_channels: 16,
            encoder_layers: 1,
            advisor_tokens: 4,
            advisor_dim: 48,
            switches: AblationSwitches::default(),
            dn: DnConfig::default(),
        }
    }

    /// Minimal dimensions for fast unit tests and gradient checks.
    pub fn tiny(num_obj_classes: usize, num_verb_classes: usize, num_hoi_classes: usize) -> Self {
        ModelConfig {
            dim: 8,
            num_queries: 3,
            num_layers: 2,
            heads: 2,
            levels: 2,
            points: 2,
            ffn_hidden: 16,
            num_obj_classes,
            num_verb_classes,
            num_hoi_classes,
            input_res: 12,
            stem_channels: 4,
            encoder_layers: 1,
            advisor_tokens: 2,
            advisor_dim: 6,
            switches: AblationSwitches::default(),
            dn: DnConfig {
                groups_per_kind: 1,
                ..DnConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.switches.validate()?;
        self.dn.validate()?;
        if self.dim % self.heads != 0 || self.dim % 8 != 0 {
            return Err(CoreError::InvalidConfig(
                "dim must divide by heads and by 8 (box encodings)".into(),
            ));
        }
        if self.num_obj_classes < 2 || self.num_verb_classes < 1 {
            return Err(CoreError::InvalidConfig(
                "need at least two object classes and one verb class".into(),
            ));
        }
        Ok(())
    }
}

/// Per-query final prediction values.
#[derive(Clone, Debug)]
pub struct QueryPrediction {
    pub subject: BBox,
    pub object: BBox,
    /// Softmax over object classes, background last.
    pub obj_probs: Vec<f64>,
    pub verb_probs: Vec<f64>,
    pub hoi_probs: Option<Vec<f64>>,
}

/// Everything one forward pass produces.
pub struct ModelOutput<'g> {
    pub num_inference: usize,
    pub num_dn: usize,
    /// Per detection layer: boxes, object logits and the aligned verb logits.
    pub layers: Vec<LayerSupervision<'g>>,
    /// HOI logits per advisor layer (advisor configs only).
    pub hoi_logits: Vec<Node<'g>>,
    pub subject_embeddings: Vec<Node<'g>>,
    pub object_embeddings: Vec<Node<'g>>,
    /// Fused verb queries per layer.
    pub verb_queries: Vec<Node<'g>>,
    /// Verb-decoder outputs per layer (empty without the verb decoder).
    pub verb_embeddings: Vec<Node<'g>>,
    /// Advisor-decoder outputs per layer.
    pub advisor_embeddings: Vec<Node<'g>>,
    /// Bridge projection of the last layer (advisor configs only).
    pub evt: Option<Node<'g>>,
    pub verb_boxes: Vec<BBox>,
    pub final_verb_logits: Node<'g>,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub extractor: ToyFeatureExtractor,
    pub bank: LabelEmbeddingBank,
    pub coeffs: CoefficientMatrices,
    plain_queries: ParamId,
    subject_anchor_init: ParamId,
    object_anchor_init: ParamId,
    pub object_stack: DecoderStack,
    pub subject_stack: Option<DecoderStack>,
    object_box_head: BoxRefineHead,
    subject_box_head: BoxRefineHead,
    object_class_head: Linear,
    pub so_attention: Option<SoAttention>,
    pub verb_stack: Option<DecoderStack>,
    pub verb_head: Linear,
    pub advisor: Option<VisionAdvisor>,
}

fn anchor_init(num: usize, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(num, 4);
    for r in 0..num {
        let b = BBox::new(rng.uniform(), rng.uniform(), 0.1, 0.1);
        let logits = boxes_to_logits(&[b]);
        t.row_mut(r).copy_from_slice(logits.row(0));
    }
    t
}

impl Model {
    /// Build a model. `hoi_text_weights` (C_HOI × D) is required when the
    /// advisor runs with text initialization.
    pub fn new(cfg: ModelConfig, rng: &mut Rng, hoi_text_weights: Option<&Tensor>) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let extractor = ToyFeatureExtractor::new(
            &mut ps,
            "extractor",
            ToyExtractorConfig {
                input_res: cfg.input_res,
                stem_channels: cfg.stem_channels,
                dim: cfg.dim,
                heads: cfg.heads,
                ffn_hidden: cfg.ffn_hidden,
                encoder_layers: cfg.encoder_layers,
                levels: cfg.levels,
            },
            rng,
        );
        let bank = LabelEmbeddingBank::new(
            &mut ps,
            "bank",
            cfg.num_obj_classes,
            cfg.num_verb_classes,
            cfg.dim,
            rng,
        );
        let coeffs = CoefficientMatrices::new(
            &mut ps,
            "coeffs",
            cfg.num_queries,
            cfg.num_obj_classes,
            cfg.num_verb_classes,
            rng,
        );
        let plain_queries = ps.add(
            "plain_queries",
            Tensor::randn(cfg.num_queries, cfg.dim, 0.02, rng),
        );
        let subject_anchor_init = ps.add("subject_anchor_init", anchor_init(cfg.num_queries, rng));
        let object_anchor_init = ps.add("object_anchor_init", anchor_init(cfg.num_queries, rng));

        let object_stack = DecoderStack::new(
            &mut ps,
            "object_decoder",
            cfg.num_layers,
            cfg.dim,
            cfg.heads,
            cfg.levels,
            cfg.points,
            cfg.ffn_hidden,
            rng,
        );
        let subject_stack = cfg.switches.subject_decoder.then(|| {
            let stack = DecoderStack::new(
                &mut ps,
                "subject_decoder",
                cfg.num_layers,
                cfg.dim,
                cfg.heads,
                cfg.levels,
                cfg.points,
                cfg.ffn_hidden,
                rng,
            );
            clone_stack_params(&mut ps, &stack, &object_stack);
            stack
        });
        let object_box_head =
            BoxRefineHead::new(&mut ps, "object_box_head", cfg.dim, cfg.num_layers, rng);
        let subject_box_head =
            BoxRefineHead::new(&mut ps, "subject_box_head", cfg.dim, cfg.num_layers, rng);
        let object_class_head = Linear::new(
            &mut ps,
            "object_class_head",
            cfg.dim,
            cfg.num_obj_classes + 1,
            true,
            rng,
        );
        let so_attention = cfg
            .switches
            .so_attention
            .then(|| SoAttention::new(&mut ps, "so_attention", cfg.dim, cfg.heads, rng));
        let verb_stack = cfg.switches.verb_decoder.then(|| {
            DecoderStack::new(
                &mut ps,
                "verb_decoder",
                cfg.num_layers,
                cfg.dim,
                cfg.heads,
                cfg.levels,
                cfg.points,
                cfg.ffn_hidden,
                rng,
            )
        });
        let verb_head = Linear::new(
            &mut ps,
            "verb_head",
            cfg.dim,
            cfg.num_verb_classes,
            true,
            rng,
        );
        let advisor = if cfg.switches.vla {
            let adv = VisionAdvisor::new(
                &mut ps,
                "advisor",
                cfg.dim,
                cfg.heads,
                cfg.levels,
                cfg.points,
                cfg.ffn_hidden,
                cfg.num_layers,
                cfg.advisor_dim,
                cfg.num_hoi_classes,
                rng,
            );
            if cfg.switches.text_init {
                let text = hoi_text_weights.ok_or_else(|| {
                    CoreError::InvalidConfig(
                        "text initialization requested but no prompt weights supplied".into(),
                    )
                })?;
                adv.init_hoi_head_from_text(&mut ps, text)?;
            }
            Some(adv)
        } else {
            None
        };

        Ok(Model {
            cfg,
            params: ps,
            extractor,
            bank,
            coeffs,
            plain_queries,
            subject_anchor_init,
            object_anchor_init,
            object_stack,
            subject_stack,
            object_box_head,
            subject_box_head,
            object_class_head,
            so_attention,
            verb_stack,
            verb_head,
            advisor,
        })
    }

    /// One forward pass. `dn` carries this image's denoising batch during
    /// training; `advisor_features` must be present when the advisor runs.
    pub fn forward<'g>(
        &self,
        fwd: &Fwd<'g>,
        image: &ImageRaster,
        dn: Option<&DnGroupBatch>,
        advisor_features: Option<&Tensor>,
    ) -> Result<ModelOutput<'g>> {
        let cfg = &self.cfg;
        let n_q = cfg.num_queries;
        if let Some(batch) = dn {
            if !cfg.switches.stg {
                return Err(CoreError::InvalidConfig(
                    "denoising batch supplied but the denoising strategy is off".into(),
                ));
            }
            if batch.mask.queries() != n_q + batch.num_dn_queries() {
                return Err(CoreError::ShapeMismatch(
                    "denoising mask was built for a different query count".into(),
                ));
            }
        }
        let feats = self.extractor.extract(fwd, image);

        let base_queries = if cfg.switches.stg {
            init_inference_queries(fwd, &self.bank, &self.coeffs)?
        } else {
            fwd.param(self.plain_queries)
        };
        let num_dn = dn.map_or(0, DnGroupBatch::num_dn_queries);
        let (queries, mask) = match dn {
            Some(batch) if num_dn > 0 => (
                concat_rows(&[base_queries, batch.queries(fwd, &self.bank)]),
                Some(batch.mask.clone()),
            ),
            Some(batch) => (base_queries, Some(batch.mask.clone())),
            None => (base_queries, None),
        };

        let subj_logits0 = match dn {
            Some(batch) if num_dn > 0 => concat_rows(&[
                fwd.param(self.subject_anchor_init),
                fwd.input(boxes_to_logits(&batch.subject_anchors)),
            ]),
            _ => fwd.param(self.subject_anchor_init),
        };
        let obj_logits0 = match dn {
            Some(batch) if num_dn > 0 => concat_rows(&[
                fwd.param(self.object_anchor_init),
                fwd.input(boxes_to_logits(&batch.object_anchors)),
            ]),
            _ => fwd.param(self.object_anchor_init),
        };

        let object_run = self.object_stack.run_refining(
            fwd,
            queries,
            obj_logits0,
            &self.object_box_head,
            &feats,
            mask.clone(),
        );

        let (subject_embeddings, subject_box_preds, subject_final) =
            if let Some(stack) = &self.subject_stack {
                let run = stack.run_refining(
                    fwd,
                    queries,
                    subj_logits0,
                    &self.subject_box_head,
                    &feats,
                    mask.clone(),
                );
                (run.embeddings, run.box_preds, run.final_anchors)
            } else {
                // no subject decoder: the object embeddings refine both tracks
                let mut preds = Vec::with_capacity(cfg.num_layers);
                let mut logits = subj_logits0;
                let mut anchors = Vec::new();
                for (l, embed) in object_run.embeddings.iter().enumerate() {
                    let pred = self.subject_box_head.refine(fwd, l, *embed, logits);
                    anchors = crate::decoder::boxes_from_tensor(&pred.value());
                    logits = fwd.input(boxes_to_logits(&anchors));
                    preds.push(pred);
                }
                (object_run.embeddings.clone(), preds, anchors)
            };

        let object_class_logits: Vec<Node<'g>> = object_run
            .embeddings
            .iter()
            .map(|&e| self.object_class_head.apply(fwd, e))
            .collect();

        let verb_queries = so_fuse(
            fwd,
            &subject_embeddings,
            &object_run.embeddings,
            self.so_attention.as_ref(),
            fwd.param(self.bank.t_verb),
        );

        let verb_boxes = verb_boxes_from_anchors(
            cfg.switches.verb_box,
            &subject_final,
            &object_run.final_anchors,
        );

        let verb_embeddings = match &self.verb_stack {
            Some(stack) => {
                stack.run_fixed_boxes(fwd, &verb_queries, &verb_boxes, &feats, mask.clone())
            }
            None => Vec::new(),
        };
        let verb_stream: &[Node<'g>] = if cfg.switches.verb_decoder {
            &verb_embeddings
        } else {
            &verb_queries
        };
        let mut verb_logits: Vec<Node<'g>> = verb_stream
            .iter()
            .map(|&e| self.verb_head.apply(fwd, e))
            .collect();

        let mut hoi_logits = Vec::new();
        let mut advisor_embeddings = Vec::new();
        let mut evt = None;
        if let Some(advisor) = &self.advisor {
            let f_ga = advisor_features.ok_or_else(|| {
                CoreError::InvalidConfig("advisor features missing for an advisor config".into())
            })?;
            let e_v_input = *verb_queries.last().expect("at least one layer");
            advisor_embeddings = advisor.decode(
                fwd,
                e_v_input,
                &verb_boxes,
                f_ga,
                &feats,
                mask.clone(),
                cfg.switches.pe_verb_box,
            );
            let side = *verb_stream.last().expect("at least one layer");
            for (l, &e_va) in advisor_embeddings.iter().enumerate() {
                if cfg.switches.vla_verb_prediction {
                    let (e_vt, bridge_verbs, hl) =
                        vhoi_bridge(fwd, advisor, &self.verb_head, side, e_va);
                    evt = Some(e_vt);
                    hoi_logits.push(hl);
                    if l + 1 == advisor_embeddings.len() {
                        // the bridge's verb prediction supersedes the last
                        // verb-head output as the model's final verb estimate
                        *verb_logits.last_mut().unwrap() = bridge_verbs;
                    }
                } else {
                    hoi_logits.push(advisor.hoi_head.apply(fwd, side.add(e_va)));
                }
            }
        }

        let layers: Vec<LayerSupervision<'g>> = (0..cfg.num_layers)
            .map(|l| LayerSupervision {
                subject_boxes: subject_box_preds[l],
                object_boxes: object_run.box_preds[l],
                obj_logits: object_class_logits[l],
                verb_logits: verb_logits[l],
            })
            .collect();
        let final_verb_logits = *verb_logits.last().unwrap();

        Ok(ModelOutput {
            num_inference: n_q,
            num_dn,
            layers,
            hoi_logits,
            subject_embeddings,
            object_embeddings: object_run.embeddings,
            verb_queries,
            verb_embeddings,
            advisor_embeddings,
            evt,
            verb_boxes,
            final_verb_logits,
        })
    }

    /// Final per-query predictions (inference rows only).
    pub fn predictions(&self, output: &ModelOutput<'_>) -> Vec<QueryPrediction> {
        let last = output.layers.last().expect("at least one layer");
        let sb = last.subject_boxes.value();
        let ob = last.object_boxes.value();
        let ol = last.obj_logits.value();
        let vl = output.final_verb_logits.value();
        let hoi = output.hoi_logits.last().map(|h| h.value());
        (0..output.num_inference)
            .map(|q| {
                let logits = ol.row(q);
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&x| libm::exp(x - mx)).collect();
                let z: f64 = exps.iter().sum();
                QueryPrediction {
                    subject: BBox::from_array([
                        sb.get(q, 0),
                        sb.get(q, 1),
                        sb.get(q, 2),
                        sb.get(q, 3),
                    ]),
                    object: BBox::from_array([
                        ob.get(q, 0),
                        ob.get(q, 1),
                        ob.get(q, 2),
                        ob.get(q, 3),
                    ]),
                    obj_probs: exps.iter().map(|e| e / z).collect(),
                    verb_probs: vl
                        .row(q)
                        .iter()
                        .map(|&x| 1.0 / (1.0 + libm::exp(-x)))
                        .collect(),
                    hoi_probs: hoi.as_ref().map(|h| {
                        h.row(q)
                            .iter()
                            .map(|&x| 1.0 / (1.0 + libm::exp(-x)))
                            .collect()
                    }),
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoise::build_dn_queries;
    use crate::graph::Graph;
    use crate::hoi::{multi_hot, HoiInstance};

    fn test_image(res: usize) -> ImageRaster {
        let mut img = ImageRaster::new(res, res);
        for y in 0..res {
            for x in 0..res {
                img.set_pixel(
                    y,
                    x,
                    [
                        (x as f64) / res as f64,
                        (y as f64) / res as f64,
                        ((x + y) % 5) as f64 / 5.0,
                    ],
                );
            }
        }
        img
    }

    fn gts(cv: usize) -> Vec<HoiInstance> {
        alloc::vec![
            HoiInstance {
                subject: BBox::new(0.3, 0.35, 0.2, 0.25),
                object: BBox::new(0.65, 0.6, 0.2, 0.2),
                object_class: 1,
                verbs: multi_hot(&[0, 2], cv),
            },
            HoiInstance {
                subject: BBox::new(0.3, 0.35, 0.2, 0.25),
                object: BBox::new(0.4, 0.75, 0.15, 0.15),
                object_class: 3,
                verbs: multi_hot(&[1], cv),
            },
        ]
    }

    #[test]
    fn forward_shapes_without_advisor() {
        let cfg = ModelConfig::tiny(5, 4, 7);
        let mut rng = Rng::new(1);
        let model = Model::new(cfg, &mut rng, None).unwrap();
        let g = Graph::new();
        let fwd = Fwd::new(&g, &model.params, false);
        let out = model
            .forward(&fwd, &test_image(cfg.input_res), None, None)
            .unwrap();
        assert_eq!(out.layers.len(), 2);
        assert_eq!(out.layers[0].subject_boxes.shape(), (3, 4));
        assert_eq!(out.layers[0].obj_logits.shape(), (3, 6));
        assert_eq!(out.layers[1].verb_logits.shape(), (3, 4));
        assert_eq!(out.verb_boxes.len(), 3);
        assert!(out.hoi_logits.is_empty());
        let preds = model.predictions(&out);
        assert_eq!(preds.len(), 3);
        let psum: f64 = preds[0].obj_probs.iter().sum();
        assert!((psum - 1.0).abs() < 1e-9);
        // anchors refined into valid boxes
        for p in &preds {
            assert!(p.subject.is_valid() && p.object.is_valid());
        }
    }

    #[test]
    fn forward_shapes_with_advisor_and_dn() {
        let mut cfg = ModelConfig::tiny(5, 4, 7);
        cfg.switches.vla = true;
        cfg.switches.text_init = false;
        let mut rng = Rng::new(2);
        let model = Model::new(cfg, &mut rng, None).unwrap();
        let instances = gts(4);
        let batch = build_dn_queries(
            &instances,
            &model.bank,
            &cfg.dn,
            cfg.num_queries,
            &mut rng,
        )
        .unwrap();
        let f_ga = Tensor::randn(cfg.advisor_tokens, cfg.advisor_dim, 1.0, &mut rng);
        let g = Graph::new();
        let fwd = Fwd::new(&g, &model.params, false);
        let out = model
            .forward(&fwd, &test_image(cfg.input_res), Some(&batch), Some(&f_ga))
            .unwrap();
        let total = cfg.num_queries + batch.num_dn_queries();
        assert_eq!(out.num_dn, 4); // 2 instances × 2·N_p (N_p = 1)
        assert_eq!(out.layers[0].subject_boxes.shape(), (total, 4));
        assert_eq!(out.hoi_logits.len(), cfg.num_layers);
        assert_eq!(out.hoi_logits[0].shape(), (total, 7));
        assert!(out.evt.is_some());
        let preds = model.predictions(&out);
        assert_eq!(preds.len(), cfg.num_queries);
        assert!(preds[0].hoi_probs.is_some());
        // with the bridge's verb-prediction step, the final verb logits come
        // from E_vt, not from the raw verb-decoder output
        let raw_head = model
            .verb_head
            .apply(&fwd, *out.verb_embeddings.last().unwrap());
        assert_ne!(out.final_verb_logits.value(), raw_head.value());
    }

    #[test]
    fn advisor_config_requires_features() {
        let mut cfg = ModelConfig::tiny(5, 4, 7);
        cfg.switches.vla = true;
        cfg.switches.text_init = false;
        let mut rng = Rng::new(3);
        let model = Model::new(cfg, &mut rng, None).unwrap();
        let g = Graph::new();
        let fwd = Fwd::new(&g, &model.params, false);
        assert!(model
            .forward(&fwd, &test_image(cfg.input_res), None, None)
            .is_err());
    }

    #[test]
    fn text_init_requires_weights() {
        let mut cfg = ModelConfig::tiny(5, 4, 7);
        cfg.switches.vla = true;
        let mut rng = Rng::new(4);
        assert!(matches!(
            Model::new(cfg, &mut rng, None),
            Err(CoreError::InvalidConfig(_))
        ));
        let txt = Tensor::zeros(7, 8);
        assert!(Model::new(cfg, &mut rng, Some(&txt)).is_ok());
    }

    #[test]
    fn so_attention_without_subject_decoder_is_rejected() {
        let mut cfg = ModelConfig::tiny(5, 4, 7);
        cfg.switches.subject_decoder = false;
        cfg.switches.so_attention = true;
        let mut rng = Rng::new(5);
        assert!(Model::new(cfg, &mut rng, None).is_err());
        cfg.switches.so_attention = false;
        let model = Model::new(cfg, &mut rng, None).unwrap();
        let g = Graph::new();
        let fwd = Fwd::new(&g, &model.params, false);
        let out = model
            .forward(&fwd, &test_image(cfg.input_res), None, None)
            .unwrap();
        // subject embeddings are the object embeddings in this variant
        assert_eq!(
            out.subject_embeddings[0].value(),
            out.object_embeddings[0].value()
        );
    }

    #[test]
    fn dn_perturbation_leaves_inference_rows_bit_identical() {
        let cfg = ModelConfig::tiny(5, 4, 7);
        let mut rng = Rng::new(6);
        let model = Model::new(cfg, &mut rng, None).unwrap();
        let instances = gts(4);
        let batch = build_dn_queries(
            &instances,
            &model.bank,
            &cfg.dn,
            cfg.num_queries,
            &mut rng,
        )
        .unwrap();
        let mut perturbed = build_dn_queries(
            &instances,
            &model.bank,
            &cfg.dn,
            cfg.num_queries,
            &mut Rng::new(999),
        )
        .unwrap();
        // arbitrary garbage in the perturbed batch's queries and anchors
        for v in perturbed.obj_selection.data_mut() {
            *v *= 3.7;
        }
        for v in perturbed.verb_selection.data_mut() {
            *v = *v * -2.0 + 0.3;
        }
        perturbed.subject_anchors = perturbed
            .subject_anchors
            .iter()
            .map(|_| BBox::new(rng.uniform(), rng.uniform(), 0.4, 0.4))
            .collect();

        let img = test_image(cfg.input_res);
        let run = |b: &DnGroupBatch| {
            let g = Graph::new();
            let fwd = Fwd::new(&g, &model.params, false);
            let out = model.forward(&fwd, &img, Some(b), None).unwrap();
            (
                out.layers.last().unwrap().subject_boxes.value(),
                out.layers.last().unwrap().obj_logits.value(),
                out.final_verb_logits.value(),
            )
        };
        let (sb1, ol1, vl1) = run(&batch);
        let (sb2, ol2, vl2) = run(&perturbed);
        for q in 0..cfg.num_queries {
            assert_eq!(sb1.row(q), sb2.row(q));
            assert_eq!(ol1.row(q), ol2.row(q));
            assert_eq!(vl1.row(q), vl2.row(q));
        }
        // and the denoising rows themselves did change
        assert_ne!(sb1.row(cfg.num_queries), sb2.row(cfg.num_queries));
    }

    #[test]
    fn verb_box_variant_changes_verb_embeddings() {
        let mut rng = Rng::new(7);
        let cfg_a = ModelConfig::tiny(5, 4, 7);
        let model = Model::new(cfg_a, &mut rng, None).unwrap();
        let img = test_image(cfg_a.input_res);
        let run = |m: &Model| {
            let g = Graph::new();
            let fwd = Fwd::new(&g, &m.params, false);
            let out = m.forward(&fwd, &img, None, None).unwrap();
            (
                out.verb_boxes.clone(),
                out.verb_embeddings.last().unwrap().value(),
            )
        };
        let (boxes_asmbr, ev_asmbr) = run(&model);
        // same parameters, different verb-box rule
        let mut model_subject = model;
        model_subject.cfg.switches.verb_box = VerbBoxKind::Subject;
        let (boxes_subj, ev_subj) = run(&model_subject);
        assert_ne!(boxes_asmbr, boxes_subj);
        assert_ne!(ev_asmbr, ev_subj);
    }

    #[test]
    fn stg_switch_controls_query_source() {
        let mut cfg = ModelConfig::tiny(5, 4, 7);
        cfg.switches.stg = false;
        let mut rng = Rng::new(8);
        let model = Model::new(cfg, &mut rng, None).unwrap();
        let g = Graph::new();
        let fwd = Fwd::new(&g, &model.params, false);
        // denoising batches are rejected when the strategy is off
        let batch = build_dn_queries(&gts(4), &model.bank, &cfg.dn, cfg.num_queries, &mut rng)
            .unwrap();
        assert!(model
            .forward(&fwd, &test_image(cfg.input_res), Some(&batch), None)
            .is_err());
        assert!(model
            .forward(&fwd, &test_image(cfg.input_res), None, None)
            .is_ok());
    }

    #[test]
    fn cloned_subject_stack_matches_object_at_init() {
        let cfg = ModelConfig::tiny(5, 4, 7);
        let mut rng = Rng::new(9);
        let mut model = Model::new(cfg, &mut rng, None).unwrap();
        // same anchor tracks and same refinement heads → identical outputs
        let obj_anchor = model.params.get(model.object_anchor_init).clone();
        *model.params.get_mut(model.subject_anchor_init) = obj_anchor;
        let src: Vec<_> = model.object_box_head.param_ids();
        let dst: Vec<_> = model.subject_box_head.param_ids();
        for (d, s) in dst.into_iter().zip(src) {
            let v = model.params.get(s).clone();
            *model.params.get_mut(d) = v;
        }
        let g = Graph::new();
        let fwd = Fwd::new(&g, &model.params, false);
        let out = model
            .forward(&fwd, &test_image(cfg.input_res), None, None)
            .unwrap();
        assert_eq!(
            out.subject_embeddings.last().unwrap().value(),
            out.object_embeddings.last().unwrap().value()
        );
        assert_eq!(
            out.layers.last().unwrap().subject_boxes.value(),
            out.layers.last().unwrap().object_boxes.value()
        );
    }
}
