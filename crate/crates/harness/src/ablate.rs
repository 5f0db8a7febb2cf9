//! Ablation runner: named switch-combination variants trained under shared
//! seeds, with a comparison CSV.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

use crate::config::{verb_box_tag, RunConfig};
use crate::data::LoadedDataset;
use crate::trainer::train_run;

#[derive(Clone, Debug)]
pub struct AblationVariant {
    pub name: String,
    /// Run-config keys overriding the base configuration.
    pub overrides: BTreeMap<String, String>,
    /// Initialize from a fully-switched base run and halve the schedule
    /// (learning rate, batch size, epochs).
    pub from_base: bool,
}

fn variant(name: &str, pairs: &[(&str, &str)]) -> AblationVariant {
    AblationVariant {
        name: name.to_string(),
        overrides: pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
        from_base: false,
    }
}

fn vla_variant(name: &str, pairs: &[(&str, &str)]) -> AblationVariant {
    let mut v = variant(name, pairs);
    v.overrides.insert("vla".into(), "true".into());
    v.from_base = true;
    v
}

/// Built-in variant sets. `modules` covers the decoder/strategy
/// drop-one-out grid, `verb-box` the interaction-region designs, `denoising`
/// the noise-target grid, `vla` the advisor ablations.
pub fn preset_variants(preset: &str) -> Result<Vec<AblationVariant>> {
    Ok(match preset {
        "modules" => vec![
            variant(
                "o+v+stg",
                &[("subject_decoder", "false"), ("so_attention", "false")],
            ),
            variant(
                "o+s+stg",
                &[("verb_decoder", "false"), ("so_attention", "false")],
            ),
            variant(
                "o",
                &[
                    ("subject_decoder", "false"),
                    ("verb_decoder", "false"),
                    ("so_attention", "false"),
                    ("stg", "false"),
                ],
            ),
            variant(
                "o+s",
                &[
                    ("verb_decoder", "false"),
                    ("so_attention", "false"),
                    ("stg", "false"),
                ],
            ),
            variant(
                "o+s+v",
                &[("so_attention", "false"), ("stg", "false")],
            ),
            variant("o+s+v+stg", &[("so_attention", "false")]),
            variant("full", &[]),
            vla_variant("vla-no-vdec", &[("verb_decoder", "false")]),
            vla_variant("full-vla", &[]),
        ],
        "verb-box" => vec![
            variant("object-box", &[("verb_box", "object")]),
            variant("subject-box", &[("verb_box", "subject")]),
            variant("mbr", &[("verb_box", "mbr")]),
            variant("smbr", &[("verb_box", "smbr")]),
            variant("asmbr", &[("verb_box", "asmbr")]),
        ],
        "denoising" => vec![
            variant(
                "clean",
                &[
                    ("dn_box_noise_scale", "0.0"),
                    ("dn_obj_flip_rate", "0.0"),
                    ("dn_verb_noise_rate", "0.0"),
                ],
            ),
            variant(
                "box",
                &[("dn_obj_flip_rate", "0.0"), ("dn_verb_noise_rate", "0.0")],
            ),
            variant("box+verb", &[("dn_obj_flip_rate", "0.0")]),
            variant("obj+verb", &[("dn_box_noise_scale", "0.0")]),
            variant("box+obj", &[("dn_verb_noise_rate", "0.0")]),
            variant("box+obj+verb", &[]),
        ],
        "vla" => vec![
            vla_variant("full-vla", &[]),
            vla_variant("no-pe", &[("pe_verb_box", "false")]),
            vla_variant("no-text-init", &[("text_init", "false")]),
            vla_variant("no-verb-pred", &[("vla_verb_prediction", "false")]),
            vla_variant(
                "no-verb-pred-no-text",
                &[("vla_verb_prediction", "false"), ("text_init", "false")],
            ),
        ],
        other => bail!("unknown preset {other:?} (available: modules, verb-box, denoising, vla)"),
    })
}

/// Variants file: one `name: key=value key=value ...` per line. A trailing
/// `@base` marker requests base-checkpoint initialization with the halved
/// schedule.
pub fn parse_variants_file(path: &Path) -> Result<Vec<AblationVariant>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("read variants {}", path.display()))?;
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((name, rest)) = line.split_once(':') else {
            bail!("line {}: expected `name: key=value ...`", n + 1);
        };
        let mut from_base = false;
        let mut overrides = BTreeMap::new();
        for tok in rest.split_whitespace() {
            if tok == "@base" {
                from_base = true;
                continue;
            }
            let Some((k, v)) = tok.split_once('=') else {
                bail!("line {}: bad token {tok:?}", n + 1);
            };
            overrides.insert(k.to_string(), v.to_string());
        }
        out.push(AblationVariant {
            name: name.trim().to_string(),
            overrides,
            from_base,
        });
    }
    if out.is_empty() {
        bail!("variants file {} declares no variants", path.display());
    }
    Ok(out)
}

/// The run config a variant resolves to, given the base key-value document.
pub fn variant_config(
    base_kv: &BTreeMap<String, String>,
    v: &AblationVariant,
    base_checkpoint: Option<&Path>,
) -> Result<RunConfig> {
    let mut kv = base_kv.clone();
    for (k, val) in &v.overrides {
        kv.insert(k.clone(), val.clone());
    }
    let mut cfg = RunConfig::from_kv(kv).with_context(|| format!("variant {:?}", v.name))?;
    if v.from_base {
        cfg.lr /= 2.0;
        cfg.batch_size = (cfg.batch_size / 2).max(1);
        cfg.epochs = (cfg.epochs / 2).max(1);
        cfg.init_from = base_checkpoint.map(Path::to_path_buf);
    }
    Ok(cfg)
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: String,
    pub config: RunConfig,
    pub final_full: f64,
    pub final_rare: f64,
    pub final_nonrare: f64,
    pub best_full: f64,
    pub epochs_to_best: usize,
    pub epochs_run: usize,
}

/// Train every variant with shared seeds and write `ablation.csv`.
pub fn run_ablation(
    base_kv: &BTreeMap<String, String>,
    variants: &[AblationVariant],
    data: &LoadedDataset,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    fs::create_dir_all(out_dir)?;
    // validate every variant before any training time is spent
    for v in variants {
        variant_config(base_kv, v, None)?;
    }
    let base_checkpoint = if variants.iter().any(|v| v.from_base) {
        let base_cfg = RunConfig::from_kv(base_kv.clone()).context("base config")?;
        let base_dir = out_dir.join("base");
        println!("training shared base model for checkpoint-initialized variants");
        let outcome = train_run(&base_cfg, data, &base_dir)?;
        Some(outcome.best_checkpoint)
    } else {
        None
    };

    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let cfg = variant_config(base_kv, v, base_checkpoint.as_deref())?;
        println!("training variant {:?}", v.name);
        let outcome = train_run(&cfg, data, &out_dir.join(&v.name))?;
        let last = outcome.history.last();
        rows.push(AblationRow {
            name: v.name.clone(),
            config: cfg,
            final_full: last.map(|h| h.map_full).unwrap_or(f64::NAN),
            final_rare: last.map(|h| h.map_rare).unwrap_or(f64::NAN),
            final_nonrare: last.map(|h| h.map_nonrare).unwrap_or(f64::NAN),
            best_full: outcome.best_full_map,
            epochs_to_best: outcome.best_epoch,
            epochs_run: outcome.epochs_run,
        });
    }

    let mut csv = String::from(
        "variant,subject_decoder,verb_decoder,so_attention,stg,vla,verb_box,pe_verb_box,\
text_init,vla_verb_prediction,final_full,final_rare,final_nonrare,best_full,epochs_to_best,epochs_run\n",
    );
    for r in &rows {
        let s = &r.config.switches;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{}\n",
            r.name,
            s.subject_decoder,
            s.verb_decoder,
            s.so_attention,
            s.stg,
            s.vla,
            verb_box_tag(s.verb_box),
            s.pe_verb_box,
            s.text_init,
            s.vla_verb_prediction,
            r.final_full,
            r.final_rare,
            r.final_nonrare,
            r.best_full,
            r.epochs_to_best,
            r.epochs_run,
        ));
    }
    fs::write(out_dir.join("ablation.csv"), csv)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_kv;
    use sovstg_core::decoder::VerbBoxKind;

    #[test]
    fn presets_resolve_to_valid_distinct_configs() {
        let base = parse_kv("epochs = 2").unwrap();
        for preset in ["modules", "verb-box", "denoising", "vla"] {
            let variants = preset_variants(preset).unwrap();
            let mut fingerprints = std::collections::BTreeSet::new();
            for v in &variants {
                let cfg = variant_config(&base, v, None).unwrap();
                let s = cfg.switches;
                let fp = format!(
                    "{}/{}/{}/{}/{}/{:?}/{}/{}/{}/{}/{}/{}",
                    s.subject_decoder,
                    s.verb_decoder,
                    s.so_attention,
                    s.stg,
                    s.vla,
                    s.verb_box,
                    s.pe_verb_box,
                    s.text_init,
                    s.vla_verb_prediction,
                    cfg.dn.box_noise_scale,
                    cfg.dn.obj_flip_rate,
                    cfg.dn.verb_noise_rate,
                );
                assert!(fingerprints.insert(fp), "duplicate variant in {preset}");
            }
        }
        assert_eq!(preset_variants("modules").unwrap().len(), 9);
        assert_eq!(preset_variants("verb-box").unwrap().len(), 5);
        assert_eq!(preset_variants("denoising").unwrap().len(), 6);
        assert_eq!(preset_variants("vla").unwrap().len(), 5);
    }

    #[test]
    fn advisor_without_verb_decoder_is_allowed() {
        let base = parse_kv("").unwrap();
        let variants = preset_variants("modules").unwrap();
        let row8 = variants.iter().find(|v| v.name == "vla-no-vdec").unwrap();
        let cfg = variant_config(&base, row8, None).unwrap();
        assert!(cfg.switches.vla && !cfg.switches.verb_decoder);
    }

    #[test]
    fn contradictory_switches_are_rejected() {
        let base = parse_kv("").unwrap();
        let bad = variant(
            "bad",
            &[("subject_decoder", "false"), ("so_attention", "true")],
        );
        assert!(variant_config(&base, &bad, None).is_err());
    }

    #[test]
    fn verb_box_preset_covers_all_variants() {
        let base = parse_kv("").unwrap();
        let kinds: Vec<VerbBoxKind> = preset_variants("verb-box")
            .unwrap()
            .iter()
            .map(|v| variant_config(&base, v, None).unwrap().switches.verb_box)
            .collect();
        assert_eq!(
            kinds,
            vec![
                VerbBoxKind::Object,
                VerbBoxKind::Subject,
                VerbBoxKind::Mbr,
                VerbBoxKind::Smbr,
                VerbBoxKind::Asmbr
            ]
        );
    }

    #[test]
    fn variants_file_round_trip() {
        let dir = std::env::temp_dir().join(format!("sovstg-variants-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("variants.txt");
        std::fs::write(
            &path,
            "# two variants\nplain: stg=false\nadv: vla=true text_init=false @base\n",
        )
        .unwrap();
        let vars = parse_variants_file(&path).unwrap();
        assert_eq!(vars.len(), 2);
        assert_eq!(vars[0].name, "plain");
        assert!(!vars[0].from_base);
        assert!(vars[1].from_base);
        assert_eq!(vars[1].overrides["vla"], "true");
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
