//! Synthetic HOI scenes: one person-like subject plus colored shape objects,
//! with verb labels decided purely by box geometry so an oracle labeler
//! always exists.

use anyhow::{bail, Context, Result};
use sovstg_core::geometry::{iou, BBox};
use sovstg_core::hoi::HoiInstance;
use sovstg_core::rng::Rng;

/// Margin (in center offset) before a directional verb fires.
pub const DIRECTIONAL_MARGIN: f64 = 0.08;
/// Center distance under which two boxes count as "near".
pub const NEAR_DISTANCE: f64 = 0.32;
/// IoU over which boxes count as "overlapping".
pub const OVERLAP_IOU: f64 = 0.05;
/// Axis gap under which boxes count as "holding" (adjacency).
pub const HOLD_GAP: f64 = 0.02;

/// Verb relations the oracle can decide. The order here fixes phrase text.
pub const SUPPORTED_VERBS: &[&str] = &[
    "above",
    "below",
    "left-of",
    "right-of",
    "near",
    "overlapping",
    "holding",
];

/// True iff the named relation holds between subject and object boxes.
pub fn verb_holds(verb: &str, subject: &BBox, object: &BBox) -> bool {
    let dx = object.cx - subject.cx;
    let dy = object.cy - subject.cy;
    match verb {
        // image coordinates: y grows downward
        "above" => dy >= DIRECTIONAL_MARGIN,
        "below" => dy <= -DIRECTIONAL_MARGIN,
        "left-of" => dx >= DIRECTIONAL_MARGIN,
        "right-of" => dx <= -DIRECTIONAL_MARGIN,
        "near" => (dx * dx + dy * dy).sqrt() <= NEAR_DISTANCE,
        "overlapping" => iou(subject, object) >= OVERLAP_IOU,
        "holding" => {
            let gap_x = dx.abs() - (subject.w + object.w) / 2.0;
            let gap_y = dy.abs() - (subject.h + object.h) / 2.0;
            gap_x.max(gap_y) <= HOLD_GAP
        }
        _ => false,
    }
}

/// Multi-hot verb labels for a subject-object pair under a verb vocabulary.
pub fn oracle_verbs(subject: &BBox, object: &BBox, verbs: &[String]) -> Vec<bool> {
    verbs.iter().map(|v| verb_holds(v, subject, object)).collect()
}

/// A nameable object archetype: color plus primitive shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectArchetype {
    pub name: String,
    pub color: [f64; 3],
    pub shape: Shape,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
}

impl Shape {
    pub fn tag(&self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "square" => Ok(Shape::Square),
            "circle" => Ok(Shape::Circle),
            other => bail!("unknown shape tag {other:?}"),
        }
    }
}

/// Built-in archetype catalog; scene specs pick subsets by name.
pub fn archetype_catalog() -> Vec<ObjectArchetype> {
    let mk = |name: &str, color: [f64; 3], shape: Shape| ObjectArchetype {
        name: name.to_string(),
        color,
        shape,
    };
    vec![
        mk("red-box", [0.85, 0.15, 0.12], Shape::Square),
        mk("green-box", [0.10, 0.75, 0.20], Shape::Square),
        mk("blue-ball", [0.15, 0.30, 0.90], Shape::Circle),
        mk("yellow-ball", [0.95, 0.85, 0.10], Shape::Circle),
        mk("cyan-box", [0.10, 0.80, 0.85], Shape::Square),
        mk("magenta-ball", [0.85, 0.15, 0.80], Shape::Circle),
        mk("orange-box", [0.95, 0.55, 0.10], Shape::Square),
        mk("white-ball", [0.92, 0.92, 0.92], Shape::Circle),
    ]
}

/// Subject (person) fill color, distinct from every archetype color.
pub const SUBJECT_COLOR: [f64; 3] = [0.96, 0.80, 0.64];

#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub canvas_px: usize,
    pub train_images: usize,
    pub test_images: usize,
    pub objects: Vec<ObjectArchetype>,
    pub verbs: Vec<String>,
    pub min_instances: usize,
    pub max_instances: usize,
    /// ≥ 1; object class k is sampled with weight skew^(-k).
    pub skew: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            canvas_px: 96,
            train_images: 2000,
            test_images: 500,
            objects: archetype_catalog().into_iter().take(6).collect(),
            verbs: ["above", "below", "left-of", "right-of", "near"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            min_instances: 1,
            max_instances: 3,
            skew: 3.5,
            seed: 1,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.verbs.is_empty() {
            bail!("scene spec needs at least one verb");
        }
        if self.objects.len() < 2 {
            bail!("scene spec needs at least two object classes");
        }
        for v in &self.verbs {
            if !SUPPORTED_VERBS.contains(&v.as_str()) {
                bail!("unsupported verb {v:?}; supported: {SUPPORTED_VERBS:?}");
            }
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            bail!("instances-per-image range must be 1 ≤ min ≤ max");
        }
        if self.skew < 1.0 {
            bail!("skew factor must be ≥ 1");
        }
        Ok(())
    }
}

/// One generated scene: shared subject plus its per-object interactions.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: usize,
    pub instances: Vec<HoiInstance>,
}

fn random_box(rng: &mut Rng, min_size: f64, max_size: f64) -> BBox {
    let w = rng.uniform_in(min_size, max_size);
    let h = rng.uniform_in(min_size, max_size);
    let cx = rng.uniform_in(w / 2.0 + 0.02, 0.98 - w / 2.0);
    let cy = rng.uniform_in(h / 2.0 + 0.02, 0.98 - h / 2.0);
    BBox::new(cx, cy, w, h)
}

/// Constructive placement guaranteeing `verb` holds against `subject`.
fn place_for_verb(verb: &str, subject: &BBox, rng: &mut Rng) -> BBox {
    let w = rng.uniform_in(0.16, 0.26);
    let h = rng.uniform_in(0.16, 0.26);
    let (mut cx, mut cy) = (subject.cx, subject.cy);
    match verb {
        "above" => cy = subject.cy + DIRECTIONAL_MARGIN + 0.08,
        "below" => cy = subject.cy - DIRECTIONAL_MARGIN - 0.08,
        "left-of" => cx = subject.cx + DIRECTIONAL_MARGIN + 0.08,
        "right-of" => cx = subject.cx - DIRECTIONAL_MARGIN - 0.08,
        "near" | "overlapping" | "holding" => {
            cx = subject.cx + 0.03;
            cy = subject.cy + 0.03;
        }
        _ => {}
    }
    BBox::new(
        cx.clamp(w / 2.0 + 0.02, 0.98 - w / 2.0),
        cy.clamp(h / 2.0 + 0.02, 0.98 - h / 2.0),
        w,
        h,
    )
}

fn sample_class(num: usize, skew: f64, rng: &mut Rng) -> usize {
    let weights: Vec<f64> = (0..num).map(|k| skew.powi(-(k as i32))).collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.uniform() * total;
    for (k, w) in weights.iter().enumerate() {
        if draw < *w {
            return k;
        }
        draw -= w;
    }
    num - 1
}

/// Generate one scene. Every emitted pair carries at least one verb, and
/// objects avoid occluding each other heavily (a hidden object cannot be
/// detected from pixels).
pub fn generate_scene(spec: &SceneSpec, id: usize, rng: &mut Rng) -> Scene {
    let num_verbs = spec.verbs.len();
    let subject = random_box(rng, 0.20, 0.34);
    let n_objects = spec.min_instances + rng.below(spec.max_instances - spec.min_instances + 1);
    let mut instances: Vec<HoiInstance> = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let class = sample_class(spec.objects.len(), spec.skew, rng);
        let occluded = |b: &BBox, placed: &[HoiInstance]| {
            placed.iter().any(|p| iou(&p.object, b) > 0.45)
        };
        let mut object = random_box(rng, 0.16, 0.30);
        let mut verbs = oracle_verbs(&subject, &object, &spec.verbs);
        let mut tries = 0;
        while (!verbs.iter().any(|&v| v) || occluded(&object, &instances)) && tries < 16 {
            object = random_box(rng, 0.16, 0.30);
            verbs = oracle_verbs(&subject, &object, &spec.verbs);
            tries += 1;
        }
        if !verbs.iter().any(|&v| v) {
            let pick = rng.below(num_verbs);
            object = place_for_verb(&spec.verbs[pick], &subject, rng);
            verbs = oracle_verbs(&subject, &object, &spec.verbs);
            debug_assert!(verbs.iter().any(|&v| v), "constructive placement failed");
        }
        instances.push(HoiInstance {
            subject,
            object,
            object_class: class,
            verbs,
        });
    }
    Scene { id, instances }
}

/// Generate a full split deterministically from the spec seed.
pub fn generate_split(spec: &SceneSpec, split_tag: u64, count: usize) -> Vec<Scene> {
    let mut rng = Rng::new(spec.seed).fork(split_tag);
    (0..count).map(|i| generate_scene(spec, i, &mut rng)).collect()
}

/// Resolve archetype names against the catalog.
pub fn archetypes_by_name(names: &[String]) -> Result<Vec<ObjectArchetype>> {
    let catalog = archetype_catalog();
    names
        .iter()
        .map(|n| {
            catalog
                .iter()
                .find(|a| &a.name == n)
                .cloned()
                .with_context(|| format!("unknown object archetype {n:?}"))
        })
        .collect()
}
