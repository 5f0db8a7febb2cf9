//! End-to-end training loop: denoising batches, batched gradient steps,
//! step-decayed learning rate, per-epoch evaluation, metrics CSV and
//! checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Result};
use sovstg_core::advisor::{hoi_text_weights, AdvisorProvider, StubProvider};
use sovstg_core::denoise::{build_dn_queries, DnGroupBatch};
use sovstg_core::evalmap::EvalSetting;
use sovstg_core::features::ImageRaster;
use sovstg_core::graph::Graph;
use sovstg_core::loss::{compute_losses, dn_losses};
use sovstg_core::model::Model;
use sovstg_core::nn::Fwd;
use sovstg_core::optim::AdamW;
use sovstg_core::rng::Rng;
use sovstg_core::tensor::Tensor;

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, ScoreMode};
use crate::data::{HoiVocab, LoadedDataset, LoadedImage};
use crate::predict::{evaluate_split, AdvisorCache};

pub const METRICS_FORMAT: &str = "sovstg-metrics-v1";
pub const METRICS_HEADER: &str = "epoch,lr,total,obj_class,verb_class,hoi_class,box_l1,box_giou,\
dn_obj_class,dn_verb_class,dn_hoi_class,dn_box_l1,dn_box_giou,map_full,map_rare,map_nonrare";

const LOSS_COLUMNS: [&str; 10] = [
    "obj_class",
    "verb_class",
    "hoi_class",
    "box_l1",
    "box_giou",
    "dn_obj_class",
    "dn_verb_class",
    "dn_hoi_class",
    "dn_box_l1",
    "dn_box_giou",
];

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total_loss: f64,
    pub map_full: f64,
    pub map_rare: f64,
    pub map_nonrare: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub best_full_map: f64,
    pub best_epoch: usize,
    pub final_full_map: f64,
    pub metrics_path: PathBuf,
    pub latest_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub history: Vec<EpochRecord>,
    pub wall_seconds: f64,
}

/// The denoising batch for one training image, or `None` when the denoising
/// strategy is disabled (no denoising queries exist anywhere then).
pub fn dn_batch_for(
    model: &Model,
    image: &LoadedImage,
    rng: &mut Rng,
) -> Result<Option<DnGroupBatch>> {
    if !model.cfg.switches.stg {
        return Ok(None);
    }
    let batch = build_dn_queries(
        &image.instances,
        &model.bank,
        &model.cfg.dn,
        model.cfg.num_queries,
        rng,
    )
    .map_err(anyhow::Error::new)?;
    Ok(Some(batch))
}

/// Build the model described by a run config over a dataset, including the
/// frozen advisor provider and text-derived HOI head weights where enabled.
pub fn build_model(
    cfg: &RunConfig,
    data: &LoadedDataset,
    rng: &mut Rng,
) -> Result<(Model, Option<StubProvider>)> {
    let model_cfg = cfg.model_config(data.num_objects(), data.num_verbs(), data.vocab.len());
    let provider = model_cfg.switches.vla.then(|| {
        StubProvider::new(
            cfg.advisor_seed,
            model_cfg.advisor_tokens,
            model_cfg.advisor_dim,
            model_cfg.dim,
        )
    });
    let text = match (&provider, model_cfg.switches.text_init && model_cfg.switches.vla) {
        (Some(p), true) => {
            let phrases = data.vocab.phrases(&data.object_names(), &data.meta.verbs);
            Some(hoi_text_weights(p, &phrases))
        }
        _ => None,
    };
    let model = Model::new(model_cfg, rng, text.as_ref()).map_err(anyhow::Error::new)?;
    Ok((model, provider))
}

pub fn rasterize_split(data: &LoadedDataset, images: &[LoadedImage], res: usize) -> Vec<ImageRaster> {
    images
        .iter()
        .map(|img| img.rasterize(&data.archetypes, res))
        .collect()
}

pub fn advisor_cache(provider: &StubProvider, rasters: &[ImageRaster]) -> AdvisorCache {
    AdvisorCache {
        per_image: rasters.iter().map(|r| provider.image_features(r)).collect(),
    }
}

fn effective_mode(cfg: &RunConfig, model: &Model) -> ScoreMode {
    match cfg.score_mode {
        ScoreMode::Auto if model.cfg.switches.vla => ScoreMode::Hoi,
        ScoreMode::Auto => ScoreMode::Verb,
        other => other,
    }
}

/// Multi-hot HOI targets (K × C_HOI) for one image's ground truths.
fn hoi_targets(image: &LoadedImage, vocab: &HoiVocab) -> Tensor {
    let mut t = Tensor::zeros(image.instances.len(), vocab.len());
    for (k, inst) in image.instances.iter().enumerate() {
        for v in inst.verb_indices() {
            if let Some(c) = vocab.lookup(inst.object_class, v) {
                t.set(k, c, 1.0);
            }
        }
    }
    t
}

fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.6}")
    }
}

/// Train a model on the dataset's training split, evaluating on the test
/// split. Writes `metrics.csv`, `checkpoint-latest.bin` and
/// `checkpoint-best.bin` under `out_dir`.
pub fn train_run(cfg: &RunConfig, data: &LoadedDataset, out_dir: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir)?;
    let started = Instant::now();
    let mut master = Rng::new(cfg.seed);
    let mut model_rng = master.fork(0);
    let mut train_rng = master.fork(1);

    let (mut model, provider) = build_model(cfg, data, &mut model_rng)?;
    if let Some(path) = &cfg.init_from {
        let ck = Checkpoint::load(path)?;
        let (loaded, skipped) = ck.apply_params(&mut model.params, false)?;
        println!(
            "initialized {loaded} parameters from {} ({skipped} checkpoint entries unused)",
            path.display()
        );
    }

    let train_rasters = rasterize_split(data, &data.train, model.cfg.input_res);
    let test_rasters = rasterize_split(data, &data.test, model.cfg.input_res);
    let train_advisor = provider
        .as_ref()
        .map(|p| advisor_cache(p, &train_rasters));
    let test_advisor = provider.as_ref().map(|p| advisor_cache(p, &test_rasters));

    let mut opt = AdamW::new(&model.params, cfg.lr, cfg.weight_decay);
    let drop_epoch = ((cfg.lr_drop_frac * cfg.epochs as f64).ceil() as usize).max(1);
    let mode = effective_mode(cfg, &model);

    let metrics_path = out_dir.join("metrics.csv");
    let mut csv = String::new();
    writeln!(csv, "#format={METRICS_FORMAT}")?;
    writeln!(csv, "{METRICS_HEADER}")?;

    let latest_path = out_dir.join("checkpoint-latest.bin");
    let best_path = out_dir.join("checkpoint-best.bin");
    let mut best_full = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut history = Vec::new();
    let mut indices: Vec<usize> = (0..data.train.len()).collect();
    let mut epochs_run = 0usize;

    'epochs: for epoch in 1..=cfg.epochs {
        if epoch == drop_epoch + 1 {
            opt.lr = cfg.lr * 0.1;
        }
        train_rng.shuffle(&mut indices);
        let mut loss_sums = vec![0.0f64; LOSS_COLUMNS.len()];
        let mut total_sum = 0.0;
        let mut batches = 0usize;

        for chunk in indices.chunks(cfg.batch_size) {
            let g = Graph::new();
            let fwd = Fwd::new(&g, &model.params, true);
            let mut batch_total: Option<sovstg_core::graph::Node> = None;
            let scale = 1.0 / chunk.len() as f64;
            for &idx in chunk {
                let image = &data.train[idx];
                let dn = dn_batch_for(&model, image, &mut train_rng)?;
                let advisor_feats = train_advisor.as_ref().map(|c| &c.per_image[idx]);
                let out = model
                    .forward(&fwd, &train_rasters[idx], dn.as_ref(), advisor_feats)
                    .map_err(anyhow::Error::new)?;
                let last = out.layers.last().expect("at least one layer");
                let healthy = last.obj_logits.value().is_finite()
                    && last.subject_boxes.value().is_finite()
                    && last.object_boxes.value().is_finite()
                    && out.final_verb_logits.value().is_finite();
                if !healthy {
                    let dump = serde_json::json!({
                        "epoch": epoch,
                        "batch_images": chunk.iter().map(|&i| data.train[i].id).collect::<Vec<_>>(),
                        "offending_image": image.id,
                        "stage": "forward outputs",
                    });
                    let dump_path = out_dir.join("nonfinite_dump.json");
                    fs::write(&dump_path, serde_json::to_vec_pretty(&dump)?)?;
                    bail!(
                        "non-finite forward outputs at epoch {epoch} (diagnostics in {})",
                        dump_path.display()
                    );
                }
                let targets = hoi_targets(image, &data.vocab);
                let gt_hoi = model.cfg.switches.vla.then_some(&targets);
                let (inf, _) = compute_losses(
                    &fwd,
                    &out.layers,
                    &out.hoi_logits,
                    &image.instances,
                    gt_hoi,
                    &cfg.loss,
                    out.num_inference,
                )
                .map_err(anyhow::Error::new)?;
                let dn_break = dn_losses(
                    &fwd,
                    &out.layers,
                    &out.hoi_logits,
                    &image.instances,
                    gt_hoi,
                    &cfg.loss,
                    out.num_inference,
                    dn.as_ref().map(|b| b.gt_index.as_slice()).unwrap_or(&[]),
                )
                .map_err(anyhow::Error::new)?;
                let image_total = inf.total.add(dn_break.total).scale(scale);
                for (name, node) in inf.parts.iter().chain(&dn_break.parts) {
                    let v = node.value().scalar_value() * scale;
                    if let Some(col) = LOSS_COLUMNS.iter().position(|c| c == name) {
                        loss_sums[col] += v;
                    }
                }
                if !image_total.value().scalar_value().is_finite() {
                    let dump = serde_json::json!({
                        "epoch": epoch,
                        "batch_images": chunk.iter().map(|&i| data.train[i].id).collect::<Vec<_>>(),
                        "offending_image": image.id,
                        "parts": inf.parts.iter().chain(&dn_break.parts)
                            .map(|(n, p)| (n.clone(), p.value().scalar_value()))
                            .collect::<std::collections::BTreeMap<_, _>>(),
                    });
                    let dump_path = out_dir.join("nonfinite_dump.json");
                    fs::write(&dump_path, serde_json::to_vec_pretty(&dump)?)?;
                    bail!(
                        "non-finite loss at epoch {epoch} (diagnostics in {})",
                        dump_path.display()
                    );
                }
                batch_total = Some(match batch_total {
                    None => image_total,
                    Some(acc) => acc.add(image_total),
                });
            }
            let total = batch_total.expect("non-empty batch");
            total_sum += total.value().scalar_value();
            batches += 1;
            let grads = g.backward(total);
            let pg = fwd.param_grads(&grads);
            opt.step(&mut model.params, &pg);
        }
        epochs_run = epoch;

        let eval_now = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
        let (map_full, map_rare, map_nonrare) = if eval_now {
            let (report, _) = evaluate_split(
                &model,
                &data.test,
                &test_rasters,
                test_advisor.as_ref(),
                data,
                mode,
                EvalSetting::Default,
                cfg.eval_iou_threshold,
                cfg.rare_threshold,
            )?;
            (report.full, report.rare, report.non_rare)
        } else {
            (f64::NAN, f64::NAN, f64::NAN)
        };

        let denom = batches.max(1) as f64;
        let mut row = format!(
            "{epoch},{:.6},{}",
            opt.lr,
            fmt_metric(total_sum / denom)
        );
        for sum in &loss_sums {
            row.push(',');
            row.push_str(&fmt_metric(sum / denom));
        }
        for m in [map_full, map_rare, map_nonrare] {
            row.push(',');
            row.push_str(&fmt_metric(m));
        }
        writeln!(csv, "{row}")?;
        fs::write(&metrics_path, &csv)?;

        let ck = Checkpoint::capture(&model.params, epoch as u32, train_rng.state(), Some(&opt));
        ck.save(&latest_path)?;
        if eval_now {
            history.push(EpochRecord {
                epoch,
                total_loss: total_sum / denom,
                map_full,
                map_rare,
                map_nonrare,
            });
            if map_full > best_full {
                best_full = map_full;
                best_epoch = epoch;
                ck.save(&best_path)?;
            }
            if let Some(target) = cfg.target_map {
                if map_full >= target {
                    println!("reached target mAP {target:.3} at epoch {epoch}; stopping early");
                    break 'epochs;
                }
            }
        }
    }

    let final_full = history.last().map(|h| h.map_full).unwrap_or(f64::NAN);
    Ok(TrainOutcome {
        epochs_run,
        best_full_map: best_full,
        best_epoch,
        final_full_map: final_full,
        metrics_path,
        latest_checkpoint: latest_path,
        best_checkpoint: best_path,
        history,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}
