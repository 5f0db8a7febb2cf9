//! Flat key-value configuration files (`key = value`, `#` comments) for runs
//! and scene specs. Unknown keys are rejected so typos surface immediately.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sovstg_core::decoder::VerbBoxKind;
use sovstg_core::denoise::DnConfig;
use sovstg_core::loss::LossWeights;
use sovstg_core::model::{AblationSwitches, ModelConfig};

use crate::scene::{archetype_catalog, archetypes_by_name, SceneSpec};

/// Parse a flat key-value document.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("line {}: expected `key = value`, got {raw:?}", n + 1);
        };
        let key = key.trim().to_string();
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            bail!("line {}: duplicate key {key:?}", n + 1);
        }
    }
    Ok(map)
}

struct KvReader {
    map: BTreeMap<String, String>,
    seen: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl KvReader {
    fn new(map: BTreeMap<String, String>) -> Self {
        KvReader {
            map,
            seen: Default::default(),
        }
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.seen.borrow_mut().insert(key.to_string());
        self.map.get(key).map(String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| anyhow::anyhow!("key {key:?}: cannot parse {v:?}: {e}")),
        }
    }

    fn parse_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some("true") | Some("on") | Some("1") => Ok(true),
            Some("false") | Some("off") | Some("0") => Ok(false),
            Some(v) => bail!("key {key:?}: expected a boolean, got {v:?}"),
        }
    }

    fn finish(&self, what: &str) -> Result<()> {
        let seen = self.seen.borrow();
        let unknown: Vec<&String> = self.map.keys().filter(|k| !seen.contains(*k)).collect();
        if !unknown.is_empty() {
            bail!("unknown {what} keys: {unknown:?}");
        }
        Ok(())
    }
}

/// How triplet scores are composed for ranking.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreMode {
    /// HOI-based when HOI probabilities exist, verb-based otherwise.
    Auto,
    Hoi,
    Verb,
}

impl ScoreMode {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(ScoreMode::Auto),
            "hoi" => Ok(ScoreMode::Hoi),
            "verb" => Ok(ScoreMode::Verb),
            other => bail!("score_mode must be auto|hoi|verb, got {other:?}"),
        }
    }
}

fn parse_verb_box(s: &str) -> Result<VerbBoxKind> {
    Ok(match s {
        "subject" => VerbBoxKind::Subject,
        "object" => VerbBoxKind::Object,
        "mbr" => VerbBoxKind::Mbr,
        "smbr" => VerbBoxKind::Smbr,
        "asmbr" => VerbBoxKind::Asmbr,
        other => bail!("verb_box must be subject|object|mbr|smbr|asmbr, got {other:?}"),
    })
}

pub fn verb_box_tag(kind: VerbBoxKind) -> &'static str {
    match kind {
        VerbBoxKind::Subject => "subject",
        VerbBoxKind::Object => "object",
        VerbBoxKind::Mbr => "mbr",
        VerbBoxKind::Smbr => "smbr",
        VerbBoxKind::Asmbr => "asmbr",
    }
}

/// Everything a training run needs beyond the dataset.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of total epochs after which the learning rate drops ×0.1.
    pub lr_drop_frac: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Stop early once Default-setting Full mAP reaches this value.
    pub target_map: Option<f64>,
    pub score_mode: ScoreMode,
    pub switches: AblationSwitches,
    pub dn: DnConfig,
    pub loss: LossWeights,
    pub eval_iou_threshold: f64,
    pub rare_threshold: usize,
    pub advisor_seed: u64,
    pub init_from: Option<PathBuf>,
    // model-size fields (toy-s defaults, individually overridable)
    pub dim: usize,
    pub num_queries: usize,
    pub num_layers: usize,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    pub ffn_hidden: usize,
    pub input_res: usize,
    pub stem_channels: usize,
    pub encoder_layers: usize,
    pub advisor_tokens: usize,
    pub advisor_dim: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::toy_s(2, 1, 1);
        RunConfig {
            epochs: 30,
            batch_size: 8,
            lr: 8e-4,
            weight_decay: 1e-4,
            lr_drop_frac: 2.0 / 3.0,
            seed: 1,
            eval_every: 1,
            target_map: None,
            score_mode: ScoreMode::Auto,
            switches: AblationSwitches::default(),
            dn: DnConfig::default(),
            loss: LossWeights::default(),
            eval_iou_threshold: 0.5,
            rare_threshold: 10,
            advisor_seed: 7,
            init_from: None,
            dim: m.dim,
            num_queries: m.num_queries,
            num_layers: m.num_layers,
            heads: m.heads,
            levels: m.levels,
            points: m.points,
            ffn_hidden: m.ffn_hidden,
            input_res: m.input_res,
            stem_channels: m.stem_channels,
            encoder_layers: m.encoder_layers,
            advisor_tokens: m.advisor_tokens,
            advisor_dim: m.advisor_dim,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("read config {}", path.display()))?;
        Self::from_kv(parse_kv(&text)?)
    }

    pub fn from_kv(map: BTreeMap<String, String>) -> Result<Self> {
        let r = KvReader::new(map);
        let d = RunConfig::default();
        let preset = r.raw("preset").unwrap_or("toy-s").to_string();
        if preset != "toy-s" {
            bail!("unknown preset {preset:?} (available: toy-s)");
        }
        let cfg = RunConfig {
            epochs: r.parse("epochs", d.epochs)?,
            batch_size: r.parse("batch_size", d.batch_size)?,
            lr: r.parse("lr", d.lr)?,
            weight_decay: r.parse("weight_decay", d.weight_decay)?,
            lr_drop_frac: r.parse("lr_drop_frac", d.lr_drop_frac)?,
            seed: r.parse("seed", d.seed)?,
            eval_every: r.parse("eval_every", d.eval_every)?,
            target_map: match r.raw("target_map") {
                None => None,
                Some(v) => Some(v.parse().context("target_map")?),
            },
            score_mode: match r.raw("score_mode") {
                None => d.score_mode,
                Some(v) => ScoreMode::parse(v)?,
            },
            switches: AblationSwitches {
                subject_decoder: r.parse_bool("subject_decoder", true)?,
                verb_decoder: r.parse_bool("verb_decoder", true)?,
                so_attention: r.parse_bool("so_attention", true)?,
                stg: r.parse_bool("stg", true)?,
                vla: r.parse_bool("vla", false)?,
                verb_box: match r.raw("verb_box") {
                    None => VerbBoxKind::Asmbr,
                    Some(v) => parse_verb_box(v)?,
                },
                pe_verb_box: r.parse_bool("pe_verb_box", true)?,
                text_init: r.parse_bool("text_init", true)?,
                vla_verb_prediction: r.parse_bool("vla_verb_prediction", true)?,
            },
            dn: DnConfig {
                obj_flip_rate: r.parse("dn_obj_flip_rate", d.dn.obj_flip_rate)?,
                verb_noise_rate: r.parse("dn_verb_noise_rate", d.dn.verb_noise_rate)?,
                verb_flip_rate: r.parse("dn_verb_flip_rate", d.dn.verb_flip_rate)?,
                box_noise_scale: r.parse("dn_box_noise_scale", d.dn.box_noise_scale)?,
                groups_per_kind: r.parse("dn_groups_per_kind", d.dn.groups_per_kind)?,
            },
            loss: LossWeights {
                obj_class: r.parse("loss_obj_class", d.loss.obj_class)?,
                verb_class: r.parse("loss_verb_class", d.loss.verb_class)?,
                hoi_class: r.parse("loss_hoi_class", d.loss.hoi_class)?,
                box_l1: r.parse("loss_box_l1", d.loss.box_l1)?,
                box_giou: r.parse("loss_box_giou", d.loss.box_giou)?,
                focal_alpha: r.parse("focal_alpha", d.loss.focal_alpha)?,
                focal_gamma: r.parse("focal_gamma", d.loss.focal_gamma)?,
            },
            eval_iou_threshold: r.parse("eval_iou_threshold", d.eval_iou_threshold)?,
            rare_threshold: r.parse("rare_threshold", d.rare_threshold)?,
            advisor_seed: r.parse("advisor_seed", d.advisor_seed)?,
            init_from: r.raw("init_from").map(PathBuf::from),
            dim: r.parse("dim", d.dim)?,
            num_queries: r.parse("num_queries", d.num_queries)?,
            num_layers: r.parse("num_layers", d.num_layers)?,
            heads: r.parse("heads", d.heads)?,
            levels: r.parse("levels", d.levels)?,
            points: r.parse("points", d.points)?,
            ffn_hidden: r.parse("ffn_hidden", d.ffn_hidden)?,
            input_res: r.parse("input_res", d.input_res)?,
            stem_channels: r.parse("stem_channels", d.stem_channels)?,
            encoder_layers: r.parse("encoder_layers", d.encoder_layers)?,
            advisor_tokens: r.parse("advisor_tokens", d.advisor_tokens)?,
            advisor_dim: r.parse("advisor_dim", d.advisor_dim)?,
        };
        r.finish("run-config")?;
        if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.eval_every == 0 {
            bail!("epochs, batch_size and eval_every must be positive");
        }
        cfg.switches.validate().map_err(anyhow::Error::new)?;
        Ok(cfg)
    }

    pub fn model_config(
        &self,
        num_obj_classes: usize,
        num_verb_classes: usize,
        num_hoi_classes: usize,
    ) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            num_queries: self.num_queries,
            num_layers: self.num_layers,
            heads: self.heads,
            levels: self.levels,
            points: self.points,
            ffn_hidden: self.ffn_hidden,
            num_obj_classes,
            num_verb_classes,
            num_hoi_classes,
            input_res: self.input_res,
            stem_channels: self.stem_channels,
            encoder_layers: self.encoder_layers,
            advisor_tokens: self.advisor_tokens,
            advisor_dim: self.advisor_dim,
            switches: self.switches,
            dn: self.dn,
        }
    }
}

/// Scene-spec file: same flat key-value format.
pub fn scene_spec_from_file(path: &Path) -> Result<SceneSpec> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("read spec {}", path.display()))?;
    scene_spec_from_kv(parse_kv(&text)?)
}

pub fn scene_spec_from_kv(map: BTreeMap<String, String>) -> Result<SceneSpec> {
    let r = KvReader::new(map);
    let d = SceneSpec::default();
    let spec = SceneSpec {
        canvas_px: r.parse("canvas_px", d.canvas_px)?,
        train_images: r.parse("train_images", d.train_images)?,
        test_images: r.parse("test_images", d.test_images)?,
        objects: match r.raw("objects") {
            None => d.objects,
            Some("default6") => archetype_catalog().into_iter().take(6).collect(),
            Some(list) => archetypes_by_name(
                &list
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .collect::<Vec<_>>(),
            )?,
        },
        verbs: match r.raw("verbs") {
            None => d.verbs,
            Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        },
        min_instances: r.parse("min_instances", d.min_instances)?,
        max_instances: r.parse("max_instances", d.max_instances)?,
        skew: r.parse("skew", d.skew)?,
        seed: r.parse("seed", d.seed)?,
    };
    r.finish("scene-spec")?;
    spec.validate()?;
    Ok(spec)
}
