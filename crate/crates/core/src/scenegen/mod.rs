//! Synthetic sprite scenes with rule-based labels and split-dependent
//! confounders, plus the on-disk dataset archive.

mod archive;
mod render;
mod rules;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use archive::{read_archive, write_archive, ArchiveHeader, Dataset, ARCHIVE_MAGIC, ARCHIVE_VERSION};
pub use render::{render, Rendered};
pub use rules::{ClassRule, Confounder, Predicate, Region, RuleSet, RuleSetName, Template};

use crate::error::{OceanError, Result};
use crate::rng::{stream_rng, streams};

pub const MAX_ATTEMPTS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn as_str(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Bounding-circle radius relative to the nominal radius.
    pub fn extent(self) -> f64 {
        match self {
            Shape::Circle => 1.0,
            Shape::Square => SQUARE_HALF * std::f64::consts::SQRT_2,
            Shape::Triangle => TRIANGLE_CIRCUM,
        }
    }
}

/// Square half-side and triangle circumradius as multiples of the nominal
/// radius; roughly area-matched to the circle.
pub(crate) const SQUARE_HALF: f64 = 0.85;
pub(crate) const TRIANGLE_CIRCUM: f64 = 1.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn as_str(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.15, 0.1],
            Color::Green => [0.15, 0.75, 0.2],
            Color::Blue => [0.15, 0.3, 0.95],
            Color::Yellow => [0.95, 0.85, 0.1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn as_str(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }

    /// Nominal radius range in canvas units.
    pub fn radius_range(self) -> (f64, f64) {
        match self {
            Size::Small => (0.085, 0.1),
            Size::Large => (0.135, 0.15),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    /// Center in `[0,1)²`, `y` growing downwards.
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

impl ObjectSpec {
    pub fn bounding_radius(&self) -> f64 {
        self.radius * self.shape.extent()
    }

    pub fn describe(&self) -> String {
        format!("{} {} {}", self.size.as_str(), self.color.as_str(), self.shape.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    ValConfounded,
    TestNonconfounded,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::ValConfounded, Split::TestNonconfounded];

    pub fn confounded(self) -> bool {
        !matches!(self, Split::TestNonconfounded)
    }

    pub fn stream(self) -> u64 {
        match self {
            Split::Train => streams::SCENE_TRAIN,
            Split::ValConfounded => streams::SCENE_VAL,
            Split::TestNonconfounded => streams::SCENE_TEST,
        }
    }

    pub fn file_stem(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ValConfounded => "val",
            Split::TestNonconfounded => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneAnnotation {
    pub id: u64,
    pub objects: Vec<ObjectSpec>,
    pub label: usize,
    pub split: Split,
    /// Whether the label's confounder predicate holds in this scene.
    pub confounder_present: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct SceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            min_objects: 2,
            max_objects: 5,
        }
    }
}

/// Places `draft` at a random non-overlapping spot; `None` if no spot was
/// found within a few tries.
fn place<R: Rng>(draft: &rules::Draft, placed: &[ObjectSpec], rng: &mut R) -> Option<ObjectSpec> {
    let (lo, hi) = draft.size.radius_range();
    let radius = rng.gen_range(lo..hi);
    let br = radius * draft.shape.extent();
    let x_range = (draft.region.x.0.max(br), draft.region.x.1.min(1.0 - br));
    let y_range = (draft.region.y.0.max(br), draft.region.y.1.min(1.0 - br));
    if x_range.0 >= x_range.1 || y_range.0 >= y_range.1 {
        return None;
    }
    for _ in 0..50 {
        let x = rng.gen_range(x_range.0..x_range.1);
        let y = rng.gen_range(y_range.0..y_range.1);
        let clear = placed.iter().all(|o| {
            let d = ((o.x - x).powi(2) + (o.y - y).powi(2)).sqrt();
            d >= o.bounding_radius() + br
        });
        if clear {
            return Some(ObjectSpec {
                shape: draft.shape,
                color: draft.color,
                size: draft.size,
                x,
                y,
                radius,
            });
        }
    }
    None
}

/// Draws one scene of `class`. In confounded splits the class confounder is
/// forced; otherwise the confounded attribute is left to chance.
pub fn generate_scene<R: Rng>(
    rng: &mut R,
    rules: &RuleSet,
    class: usize,
    split: Split,
    cfg: &SceneConfig,
) -> Result<SceneAnnotation> {
    if class >= rules.num_classes() {
        return Err(OceanError::Index {
            what: "class",
            index: class,
            len: rules.num_classes(),
        });
    }
    let rule = &rules.classes[class];
    for _ in 0..MAX_ATTEMPTS {
        let witnesses = rules.witness_drafts(class, split.confounded(), rng);
        if witnesses.len() > cfg.max_objects {
            continue;
        }
        let lo = cfg.min_objects.max(witnesses.len());
        let total = rng.gen_range(lo..=cfg.max_objects.max(lo));
        let mut objects: Vec<ObjectSpec> = Vec::with_capacity(total);
        let mut ok = true;
        for d in &witnesses {
            match place(d, &objects, rng) {
                Some(o) => objects.push(o),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        while ok && objects.len() < total {
            let d = rules::Draft {
                shape: *Shape::ALL.choose(rng).unwrap(),
                color: *Color::ALL.choose(rng).unwrap(),
                size: *Size::ALL.choose(rng).unwrap(),
                region: Region::ANY,
            };
            let probe = ObjectSpec {
                shape: d.shape,
                color: d.color,
                size: d.size,
                x: 0.0,
                y: 0.0,
                radius: 0.0,
            };
            if !rules.distractor_ok(class, &probe) {
                continue;
            }
            match place(&d, &objects, rng) {
                Some(o) => objects.push(o),
                None => ok = false,
            }
        }
        if !ok || rules.evaluate(&objects) != class {
            continue;
        }
        let confounder_present = rule.confounder.is_some_and(|c| c.holds(&objects));
        if split.confounded() && rule.confounder.is_some() && !confounder_present {
            continue;
        }
        // shuffle so object order carries no class information
        objects.shuffle(rng);
        return Ok(SceneAnnotation {
            id: 0,
            objects,
            label: class,
            split,
            confounder_present,
        });
    }
    Err(OceanError::Unsatisfiable {
        predicate: format!("{} class {class} ({})", rules.name, rule.description),
        attempts: MAX_ATTEMPTS,
    })
}

/// Scene `index` of a split: class assigned round-robin, generator seeded
/// from `(seed, split, index)`.
pub fn scene_at(rules: &RuleSet, split: Split, seed: u64, index: u64, cfg: &SceneConfig) -> Result<SceneAnnotation> {
    let mut rng = stream_rng(seed, split.stream(), index);
    let class = (index % rules.num_classes() as u64) as usize;
    let mut scene = generate_scene(&mut rng, rules, class, split, cfg)?;
    scene.id = index;
    Ok(scene)
}

/// Generates and renders `count` scenes of one split in parallel.
pub fn generate_split(
    rules: &RuleSet,
    split: Split,
    count: usize,
    resolution: usize,
    seed: u64,
    cfg: &SceneConfig,
) -> Result<Dataset> {
    let items: Vec<(SceneAnnotation, Rendered)> = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let scene = scene_at(rules, split, seed, i, cfg)?;
            let r = render(&scene, resolution);
            Ok((scene, r))
        })
        .collect::<Result<_>>()?;
    let (scenes, rendered): (Vec<_>, Vec<_>) = items.into_iter().unzip();
    Ok(Dataset::new(rules.name, split, resolution, seed, scenes, rendered))
}
