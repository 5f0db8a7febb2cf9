use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use sovstg_core::evalmap::{evaluate_map, EvalConfig, EvalSetting};
use sovstg_core::rng::Rng;

use sovstg::ablate::{parse_variants_file, preset_variants, run_ablation};
use sovstg::checkpoint::Checkpoint;
use sovstg::config::{parse_kv, scene_spec_from_file, RunConfig, ScoreMode};
use sovstg::data::{eval_ground_truths, generate_dataset, load_dataset};
use sovstg::plot::emit_curves;
use sovstg::predict::{
    detections_from_lines, evaluate_split, read_predictions, write_predictions,
};
use sovstg::scene::SceneSpec;
use sovstg::trainer::{advisor_cache, build_model, rasterize_split, train_run};

/// Split subject-object-verb HOI detection at desk scale: synthetic data,
/// denoising training, evaluation and ablations.
#[derive(Parser)]
#[command(name = "sovstg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (annotations, metadata, rendered images).
    GenData {
        /// Scene-spec file (flat key = value); omit for the built-in default.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Skip PNG rendering (annotations alone suffice for training).
        #[arg(long)]
        no_images: bool,
    },
    /// Train a model on a generated corpus.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to initialize matching parameters from.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or a prediction file) on the test split.
    Eval {
        #[arg(long, conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Prediction JSONL produced by an earlier run.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "default")]
        setting: String,
        /// Run config matching the checkpoint (defaults apply otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Metrics CSV to write (stdout summary is always printed).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also dump per-query predictions as JSONL.
        #[arg(long)]
        dump_predictions: Option<PathBuf>,
    },
    /// Train a set of switch variants and tabulate their results.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "variants")]
        preset: Option<String>,
        /// Variants file: `name: key=value ... [@base]` per line.
        #[arg(long)]
        variants: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overlay metric curves from one or more runs into an SVG + tidy CSV.
    Plot {
        /// metrics.csv files from training runs.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Metric column to plot.
        #[arg(long, default_value = "map_full")]
        metric: String,
        /// Merged tidy CSV (run, epoch, metric, value).
        #[arg(long)]
        tidy: Option<PathBuf>,
    },
}

fn parse_setting(s: &str) -> Result<EvalSetting> {
    match s {
        "default" => Ok(EvalSetting::Default),
        "known-object" => Ok(EvalSetting::KnownObject),
        other => bail!("setting must be default|known-object, got {other:?}"),
    }
}

fn load_run_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

fn eval_csv(setting: &str, report: &sovstg_core::evalmap::MapReport) -> String {
    let fmt = |v: f64| {
        if v.is_nan() {
            "NaN".to_string()
        } else {
            format!("{v:.6}")
        }
    };
    format!(
        "#format=sovstg-eval-v1\nsetting,category,mAP\n{setting},full,{}\n{setting},rare,{}\n{setting},non-rare,{}\n",
        fmt(report.full),
        fmt(report.rare),
        fmt(report.non_rare)
    )
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { spec, out, no_images } => {
            let spec = match spec {
                Some(p) => scene_spec_from_file(&p)?,
                None => SceneSpec::default(),
            };
            let meta = generate_dataset(&spec, &out, !no_images)?;
            println!(
                "wrote {} train / {} test images, {} object classes, {} verbs, {} HOI classes -> {}",
                spec.train_images,
                spec.test_images,
                meta.objects.len(),
                meta.verbs.len(),
                meta.hoi_classes.len(),
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            init_from,
        } => {
            let mut cfg = load_run_config(&config)?;
            if init_from.is_some() {
                cfg.init_from = init_from;
            }
            let dataset = load_dataset(&data)?;
            let outcome = train_run(&cfg, &dataset, &out)?;
            println!(
                "trained {} epochs in {:.1}s; final full mAP {:.4} (best {:.4} at epoch {}); metrics -> {}",
                outcome.epochs_run,
                outcome.wall_seconds,
                outcome.final_full_map,
                outcome.best_full_map,
                outcome.best_epoch,
                outcome.metrics_path.display()
            );
        }
        Command::Eval {
            checkpoint,
            predictions,
            data,
            setting,
            config,
            out,
            dump_predictions,
        } => {
            let setting_tag = setting.clone();
            let setting = parse_setting(&setting)?;
            let cfg = load_run_config(&config)?;
            let dataset = load_dataset(&data)?;
            let report = match (checkpoint, predictions) {
                (Some(ck_path), None) => {
                    let ck = Checkpoint::load(&ck_path)?;
                    let mut rng = Rng::new(cfg.seed).fork(0);
                    let (mut model, provider) = build_model(&cfg, &dataset, &mut rng)?;
                    ck.apply_params(&mut model.params, true).with_context(|| {
                        "checkpoint does not match the configured model (pass the run's --config)"
                    })?;
                    let rasters = rasterize_split(&dataset, &dataset.test, model.cfg.input_res);
                    let advisor = provider.as_ref().map(|p| advisor_cache(p, &rasters));
                    let mode = match cfg.score_mode {
                        ScoreMode::Auto if model.cfg.switches.vla => ScoreMode::Hoi,
                        ScoreMode::Auto => ScoreMode::Verb,
                        other => other,
                    };
                    let (report, lines) = evaluate_split(
                        &model,
                        &dataset.test,
                        &rasters,
                        advisor.as_ref(),
                        &dataset,
                        mode,
                        setting,
                        cfg.eval_iou_threshold,
                        cfg.rare_threshold,
                    )?;
                    if let Some(path) = dump_predictions {
                        write_predictions(&path, &lines)?;
                        println!("predictions -> {}", path.display());
                    }
                    report
                }
                (None, Some(pred_path)) => {
                    let lines = read_predictions(&pred_path)?;
                    let mode = match cfg.score_mode {
                        ScoreMode::Auto => {
                            if lines
                                .first()
                                .and_then(|l| l.triplets.first())
                                .map(|t| t.hoi_scores.is_some())
                                .unwrap_or(false)
                            {
                                ScoreMode::Hoi
                            } else {
                                ScoreMode::Verb
                            }
                        }
                        other => other,
                    };
                    let dets = detections_from_lines(&lines, &dataset.vocab, mode)?;
                    let gts = eval_ground_truths(&dataset.test, &dataset.vocab);
                    let mut ecfg = EvalConfig::new(
                        dataset.vocab.len(),
                        dataset.vocab.hoi_to_object(),
                        dataset.rare_flags(cfg.rare_threshold),
                    );
                    ecfg.iou_threshold = cfg.eval_iou_threshold;
                    ecfg.setting = setting;
                    evaluate_map(&dets, &gts, &ecfg)
                }
                _ => bail!("pass exactly one of --checkpoint or --predictions"),
            };
            println!(
                "{setting_tag}: full {:.4} | rare {:.4} | non-rare {:.4}",
                report.full, report.rare, report.non_rare
            );
            if let Some(path) = out {
                std::fs::write(&path, eval_csv(&setting_tag, &report))?;
                println!("metrics -> {}", path.display());
            }
        }
        Command::Ablate {
            config,
            preset,
            variants,
            data,
            out,
        } => {
            let base_kv = match &config {
                Some(p) => parse_kv(&std::fs::read_to_string(p)?)?,
                None => Default::default(),
            };
            let variants = match (preset, variants) {
                (Some(p), None) => preset_variants(&p)?,
                (None, Some(path)) => parse_variants_file(&path)?,
                _ => bail!("pass exactly one of --preset or --variants"),
            };
            let dataset = load_dataset(&data)?;
            let rows = run_ablation(&base_kv, &variants, &dataset, &out)?;
            println!("variant,final_full,best_full,epochs_to_best");
            for r in &rows {
                println!(
                    "{},{:.4},{:.4},{}",
                    r.name, r.final_full, r.best_full, r.epochs_to_best
                );
            }
            println!("table -> {}", out.join("ablation.csv").display());
        }
        Command::Plot {
            runs,
            out,
            metric,
            tidy,
        } => {
            emit_curves(&runs, &metric, &out, tidy.as_deref())?;
            println!("chart -> {}", out.display());
        }
    }
    Ok(())
}
