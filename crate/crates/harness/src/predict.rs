//! Turning model outputs into scored triplet detections, prediction files
//! (JSON lines) and mAP reports.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sovstg_core::evalmap::{evaluate_map, EvalConfig, EvalDetection, EvalSetting, MapReport};
use sovstg_core::geometry::BBox;
use sovstg_core::model::{Model, QueryPrediction};
use sovstg_core::nn::Fwd;
use sovstg_core::tensor::Tensor;

use crate::config::ScoreMode;
use crate::data::{eval_ground_truths, HoiVocab, LoadedDataset, LoadedImage};

/// Expand per-query predictions into one scored detection per HOI class.
pub fn detections_from_queries(
    preds: &[QueryPrediction],
    image_id: usize,
    vocab: &HoiVocab,
    mode: ScoreMode,
) -> Result<Vec<EvalDetection>> {
    let mut out = Vec::with_capacity(preds.len() * vocab.len());
    for p in preds {
        for (class, &(obj, verb)) in vocab.pairs.iter().enumerate() {
            let obj_p = p.obj_probs[obj];
            let score = match (mode, &p.hoi_probs) {
                (ScoreMode::Verb, _) | (ScoreMode::Auto, None) => p.verb_probs[verb] * obj_p,
                (ScoreMode::Hoi, Some(h)) | (ScoreMode::Auto, Some(h)) => h[class] * obj_p,
                (ScoreMode::Hoi, None) => {
                    bail!("HOI-based scoring requested but the model emits no HOI probabilities")
                }
            };
            out.push(EvalDetection {
                image: image_id,
                hoi_class: class,
                score,
                subject: p.subject,
                object: p.object,
            });
        }
    }
    Ok(out)
}

/// One prediction-file line: every per-query output for one image.
#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct PredictionLine {
    pub image: usize,
    pub triplets: Vec<TripletJson>,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct TripletJson {
    pub subject: [f64; 4],
    pub object: [f64; 4],
    /// Arg-max object class (background excluded).
    pub object_class: usize,
    /// Full softmax over object classes plus background.
    pub object_scores: Vec<f64>,
    pub verb_scores: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hoi_scores: Option<Vec<f64>>,
}

pub fn prediction_line(image: usize, preds: &[QueryPrediction]) -> PredictionLine {
    PredictionLine {
        image,
        triplets: preds
            .iter()
            .map(|p| {
                let fg = &p.obj_probs[..p.obj_probs.len() - 1];
                let object_class = fg
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                TripletJson {
                    subject: p.subject.to_array(),
                    object: p.object.to_array(),
                    object_class,
                    object_scores: p.obj_probs.clone(),
                    verb_scores: p.verb_probs.clone(),
                    hoi_scores: p.hoi_probs.clone(),
                }
            })
            .collect(),
    }
}

pub fn write_predictions(path: &Path, lines: &[PredictionLine]) -> Result<()> {
    let mut out = Vec::new();
    for line in lines {
        serde_json::to_writer(&mut out, line)?;
        out.push(b'\n');
    }
    fs::write(path, out).with_context(|| format!("write {}", path.display()))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionLine>> {
    let file = fs::File::open(path).with_context(|| format!("open {}", path.display()))?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(n, line)| {
            serde_json::from_str(&line?).with_context(|| format!("{}:{}", path.display(), n + 1))
        })
        .collect()
}

/// Detections from a prediction file, using the same score composition as the
/// in-memory path.
pub fn detections_from_lines(
    lines: &[PredictionLine],
    vocab: &HoiVocab,
    mode: ScoreMode,
) -> Result<Vec<EvalDetection>> {
    let mut out = Vec::new();
    for line in lines {
        let preds: Vec<QueryPrediction> = line
            .triplets
            .iter()
            .map(|t| QueryPrediction {
                subject: BBox::from_array(t.subject),
                object: BBox::from_array(t.object),
                obj_probs: t.object_scores.clone(),
                verb_probs: t.verb_scores.clone(),
                hoi_probs: t.hoi_scores.clone(),
            })
            .collect();
        out.extend(detections_from_queries(&preds, line.image, vocab, mode)?);
    }
    Ok(out)
}

/// Advisor image-feature cache (the provider is frozen, so per-image features
/// never change).
pub struct AdvisorCache {
    pub per_image: Vec<Tensor>,
}

/// Run the model over a split and report mAP under the given setting.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_split(
    model: &Model,
    images: &[LoadedImage],
    rasters: &[sovstg_core::features::ImageRaster],
    advisor: Option<&AdvisorCache>,
    data: &LoadedDataset,
    mode: ScoreMode,
    setting: EvalSetting,
    iou_threshold: f64,
    rare_threshold: usize,
) -> Result<(MapReport, Vec<PredictionLine>)> {
    let mut detections = Vec::new();
    let mut lines = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let g = sovstg_core::graph::Graph::new();
        let fwd = Fwd::new(&g, &model.params, false);
        let feats = advisor.map(|c| &c.per_image[i]);
        let out = model
            .forward(&fwd, &rasters[i], None, feats)
            .map_err(anyhow::Error::new)?;
        let preds = model.predictions(&out);
        detections.extend(detections_from_queries(&preds, img.id, &data.vocab, mode)?);
        lines.push(prediction_line(img.id, &preds));
    }
    let gts = eval_ground_truths(images, &data.vocab);
    let mut cfg = EvalConfig::new(
        data.vocab.len(),
        data.vocab.hoi_to_object(),
        data.rare_flags(rare_threshold),
    );
    cfg.iou_threshold = iou_threshold;
    cfg.setting = setting;
    Ok((evaluate_map(&detections, &gts, &cfg), lines))
}
