//! Dataset files: JSONL annotations, dataset metadata with the HOI-class
//! vocabulary, and loading back into in-memory form.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sovstg_core::features::ImageRaster;
use sovstg_core::geometry::BBox;
use sovstg_core::hoi::HoiInstance;

use crate::render::{rasterize, write_png};
use crate::scene::{archetypes_by_name, generate_split, ObjectArchetype, Scene, SceneSpec, Shape};

pub const DATASET_FORMAT: &str = "sovstg-dataset-v1";

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct InstanceJson {
    pub subject: [f64; 4],
    pub object: [f64; 4],
    pub object_class: usize,
    pub verbs: Vec<usize>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct ImageJson {
    pub id: usize,
    pub instances: Vec<InstanceJson>,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct ArchetypeJson {
    pub name: String,
    pub color: [f64; 3],
    pub shape: String,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct DatasetMeta {
    pub format: String,
    pub canvas_px: usize,
    pub objects: Vec<ArchetypeJson>,
    pub verbs: Vec<String>,
    /// Observed (object class, verb class) pairs in the training split,
    /// sorted; the HOI-class vocabulary.
    pub hoi_classes: Vec<(usize, usize)>,
    /// Training instance count per HOI class.
    pub hoi_train_counts: Vec<usize>,
    /// Training instance count per object class.
    pub object_train_counts: Vec<usize>,
}

/// HOI-class vocabulary with index lookup.
#[derive(Clone, Debug)]
pub struct HoiVocab {
    pub pairs: Vec<(usize, usize)>,
    index: BTreeMap<(usize, usize), usize>,
}

impl HoiVocab {
    pub fn new(pairs: Vec<(usize, usize)>) -> Self {
        let index = pairs.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        HoiVocab { pairs, index }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn lookup(&self, object_class: usize, verb: usize) -> Option<usize> {
        self.index.get(&(object_class, verb)).copied()
    }

    pub fn object_of(&self, hoi_class: usize) -> usize {
        self.pairs[hoi_class].0
    }

    pub fn hoi_to_object(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(o, _)| o).collect()
    }

    /// Prompt phrases, one per HOI class.
    pub fn phrases(&self, objects: &[String], verbs: &[String]) -> Vec<String> {
        self.pairs
            .iter()
            .map(|&(o, v)| {
                let object = &objects[o];
                let verb = verbs[v].replace('-', " ");
                let article = if object
                    .chars()
                    .next()
                    .map(|c| "aeiou".contains(c))
                    .unwrap_or(false)
                {
                    "an"
                } else {
                    "a"
                };
                format!("a person {verb} {article} {object}")
            })
            .collect()
    }
}

fn scene_to_json(scene: &Scene) -> ImageJson {
    ImageJson {
        id: scene.id,
        instances: scene
            .instances
            .iter()
            .map(|i| InstanceJson {
                subject: i.subject.to_array(),
                object: i.object.to_array(),
                object_class: i.object_class,
                verbs: i.verb_indices(),
            })
            .collect(),
    }
}

fn write_jsonl(path: &Path, images: &[ImageJson]) -> Result<()> {
    let mut out = Vec::new();
    for img in images {
        serde_json::to_writer(&mut out, img)?;
        out.push(b'\n');
    }
    fs::write(path, out).with_context(|| format!("write {}", path.display()))
}

fn read_jsonl(path: &Path) -> Result<Vec<ImageJson>> {
    let file = fs::File::open(path).with_context(|| format!("open {}", path.display()))?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(n, line)| {
            let line = line?;
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), n + 1))
        })
        .collect()
}

/// Generate the corpus and write annotations, metadata and (optionally)
/// rendered PNGs under `out_dir`.
pub fn generate_dataset(spec: &SceneSpec, out_dir: &Path, render_images: bool) -> Result<DatasetMeta> {
    spec.validate().map_err(|e| e.context("scene spec"))?;
    fs::create_dir_all(out_dir)?;
    let train = generate_split(spec, 0, spec.train_images);
    let test = generate_split(spec, 1, spec.test_images);

    // HOI vocabulary and rarity table from the training split
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut object_counts = vec![0usize; spec.objects.len()];
    for scene in &train {
        for inst in &scene.instances {
            object_counts[inst.object_class] += 1;
            for v in inst.verb_indices() {
                *counts.entry((inst.object_class, v)).or_default() += 1;
            }
        }
    }
    let hoi_classes: Vec<(usize, usize)> = counts.keys().copied().collect();
    let hoi_train_counts: Vec<usize> = counts.values().copied().collect();

    let meta = DatasetMeta {
        format: DATASET_FORMAT.to_string(),
        canvas_px: spec.canvas_px,
        objects: spec
            .objects
            .iter()
            .map(|a| ArchetypeJson {
                name: a.name.clone(),
                color: a.color,
                shape: a.shape.tag().to_string(),
            })
            .collect(),
        verbs: spec.verbs.clone(),
        hoi_classes,
        hoi_train_counts,
        object_train_counts: object_counts,
    };
    fs::write(
        out_dir.join("dataset.json"),
        serde_json::to_vec_pretty(&meta)?,
    )?;

    for (tag, scenes) in [("train", &train), ("test", &test)] {
        let images: Vec<ImageJson> = scenes.iter().map(scene_to_json).collect();
        write_jsonl(&out_dir.join(format!("{tag}.jsonl")), &images)?;
        if render_images {
            let dir = out_dir.join(format!("{tag}_images"));
            fs::create_dir_all(&dir)?;
            for scene in scenes.iter() {
                let objects: Vec<(BBox, usize)> = scene
                    .instances
                    .iter()
                    .map(|i| (i.object, i.object_class))
                    .collect();
                let subject = scene.instances[0].subject;
                let raster = rasterize(&subject, &objects, &spec.objects, spec.canvas_px);
                write_png(&raster, &dir.join(format!("img_{:05}.png", scene.id)))?;
            }
        }
    }
    Ok(meta)
}

/// One loaded image: annotations plus what rendering needs.
#[derive(Clone, Debug)]
pub struct LoadedImage {
    pub id: usize,
    pub subject: BBox,
    pub objects: Vec<(BBox, usize)>,
    pub instances: Vec<HoiInstance>,
}

impl LoadedImage {
    pub fn rasterize(&self, archetypes: &[ObjectArchetype], res: usize) -> ImageRaster {
        rasterize(&self.subject, &self.objects, archetypes, res)
    }
}

/// A dataset directory loaded into memory.
pub struct LoadedDataset {
    pub dir: PathBuf,
    pub meta: DatasetMeta,
    pub archetypes: Vec<ObjectArchetype>,
    pub vocab: HoiVocab,
    pub train: Vec<LoadedImage>,
    pub test: Vec<LoadedImage>,
}

impl LoadedDataset {
    pub fn num_verbs(&self) -> usize {
        self.meta.verbs.len()
    }

    pub fn num_objects(&self) -> usize {
        self.meta.objects.len()
    }

    pub fn object_names(&self) -> Vec<String> {
        self.meta.objects.iter().map(|o| o.name.clone()).collect()
    }

    /// Rare flags per HOI class from the training counts.
    pub fn rare_flags(&self, rare_threshold: usize) -> Vec<bool> {
        self.meta
            .hoi_train_counts
            .iter()
            .map(|&c| c < rare_threshold)
            .collect()
    }
}

fn images_from_json(images: Vec<ImageJson>, num_verbs: usize) -> Result<Vec<LoadedImage>> {
    images
        .into_iter()
        .map(|img| {
            if img.instances.is_empty() {
                bail!("image {} has no instances", img.id);
            }
            let subject = BBox::from_array(img.instances[0].subject);
            let mut instances = Vec::with_capacity(img.instances.len());
            let mut objects = Vec::with_capacity(img.instances.len());
            for inst in &img.instances {
                let object = BBox::from_array(inst.object);
                objects.push((object, inst.object_class));
                instances.push(HoiInstance {
                    subject: BBox::from_array(inst.subject),
                    object,
                    object_class: inst.object_class,
                    verbs: sovstg_core::hoi::multi_hot(&inst.verbs, num_verbs),
                });
            }
            Ok(LoadedImage {
                id: img.id,
                subject,
                objects,
                instances,
            })
        })
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let meta: DatasetMeta = serde_json::from_slice(
        &fs::read(dir.join("dataset.json"))
            .with_context(|| format!("read {}/dataset.json", dir.display()))?,
    )?;
    if meta.format != DATASET_FORMAT {
        bail!(
            "unsupported dataset format {:?} (expected {DATASET_FORMAT:?})",
            meta.format
        );
    }
    let archetypes = match archetypes_by_name(
        &meta.objects.iter().map(|o| o.name.clone()).collect::<Vec<_>>(),
    ) {
        Ok(a) => a,
        // datasets may carry custom archetypes; reconstruct from metadata
        Err(_) => meta
            .objects
            .iter()
            .map(|o| {
                Ok(ObjectArchetype {
                    name: o.name.clone(),
                    color: o.color,
                    shape: Shape::from_tag(&o.shape)?,
                })
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let num_verbs = meta.verbs.len();
    let train = images_from_json(read_jsonl(&dir.join("train.jsonl"))?, num_verbs)?;
    let test = images_from_json(read_jsonl(&dir.join("test.jsonl"))?, num_verbs)?;
    let vocab = HoiVocab::new(meta.hoi_classes.clone());
    Ok(LoadedDataset {
        dir: dir.to_path_buf(),
        meta,
        archetypes,
        vocab,
        train,
        test,
    })
}

/// Expand an image's instances into per-triplet evaluation ground truths.
pub fn eval_ground_truths(
    images: &[LoadedImage],
    vocab: &HoiVocab,
) -> Vec<sovstg_core::evalmap::EvalGroundTruth> {
    let mut out = Vec::new();
    for img in images {
        for inst in &img.instances {
            for v in inst.verb_indices() {
                if let Some(class) = vocab.lookup(inst.object_class, v) {
                    out.push(sovstg_core::evalmap::EvalGroundTruth {
                        image: img.id,
                        hoi_class: class,
                        subject: inst.subject,
                        object: inst.object,
                    });
                }
            }
        }
    }
    out
}
