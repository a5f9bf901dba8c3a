use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Color, ObjectSpec, Shape, Size};

/// Attribute pattern; `None` fields match anything.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub shape: Option<Shape>,
    pub color: Option<Color>,
    pub size: Option<Size>,
}

impl Template {
    pub const fn new(shape: Option<Shape>, color: Option<Color>, size: Option<Size>) -> Self {
        Template { shape, color, size }
    }

    pub const fn exact(shape: Shape, color: Color, size: Size) -> Self {
        Template::new(Some(shape), Some(color), Some(size))
    }

    pub const fn sc(shape: Shape, color: Color) -> Self {
        Template::new(Some(shape), Some(color), None)
    }

    pub fn matches(&self, o: &ObjectSpec) -> bool {
        self.shape.map_or(true, |s| s == o.shape)
            && self.color.map_or(true, |c| c == o.color)
            && self.size.map_or(true, |s| s == o.size)
    }

    /// Fills unspecified attributes at random.
    fn draw<R: Rng>(&self, rng: &mut R) -> (Shape, Color, Size) {
        (
            self.shape.unwrap_or_else(|| *Shape::ALL.choose(rng).unwrap()),
            self.color.unwrap_or_else(|| *Color::ALL.choose(rng).unwrap()),
            self.size.unwrap_or_else(|| *Size::ALL.choose(rng).unwrap()),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Predicate {
    /// One distinct object per template.
    Contains(Vec<Template>),
    /// Some object matching the first template lies strictly left of some
    /// object matching the second.
    LeftOf(Template, Template),
    /// At least `n` matching objects with center in the left half.
    CountLeft(Template, usize),
    /// Two objects of this shape sharing a color.
    SameColorPair(Shape),
    AnyOf(Vec<Predicate>),
}

impl Predicate {
    pub fn holds(&self, objects: &[ObjectSpec]) -> bool {
        match self {
            Predicate::Contains(ts) => {
                let mut used = vec![false; objects.len()];
                assign(ts, objects, &mut used)
            }
            Predicate::LeftOf(a, b) => objects.iter().any(|oa| {
                a.matches(oa) && objects.iter().any(|ob| !std::ptr::eq(oa, ob) && b.matches(ob) && oa.x < ob.x)
            }),
            Predicate::CountLeft(t, n) => objects.iter().filter(|o| t.matches(o) && o.x < 0.5).count() >= *n,
            Predicate::SameColorPair(shape) => Color::ALL
                .iter()
                .any(|&c| objects.iter().filter(|o| o.shape == *shape && o.color == c).count() >= 2),
            Predicate::AnyOf(ps) => ps.iter().any(|p| p.holds(objects)),
        }
    }
}

fn assign(ts: &[Template], objects: &[ObjectSpec], used: &mut [bool]) -> bool {
    let Some((t, rest)) = ts.split_first() else {
        return true;
    };
    for i in 0..objects.len() {
        if !used[i] && t.matches(&objects[i]) {
            used[i] = true;
            if assign(rest, objects, used) {
                return true;
            }
            used[i] = false;
        }
    }
    false
}

/// Spurious correlate that accompanies a class only in confounded splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Confounder {
    BottomHalf(Template),
    LeftHalf(Template),
    Large(Template),
}

impl Confounder {
    /// True if some object matching the template carries the attribute.
    pub fn holds(&self, objects: &[ObjectSpec]) -> bool {
        match self {
            Confounder::BottomHalf(t) => objects.iter().any(|o| t.matches(o) && o.y >= 0.5),
            Confounder::LeftHalf(t) => objects.iter().any(|o| t.matches(o) && o.x < 0.5),
            Confounder::Large(t) => objects.iter().any(|o| t.matches(o) && o.size == Size::Large),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Confounder::BottomHalf(t) => format!("{} in the bottom half", describe(t)),
            Confounder::LeftHalf(t) => format!("{} in the left half", describe(t)),
            Confounder::Large(t) => format!("{} is large", describe(t)),
        }
    }

    fn template(&self) -> Template {
        match *self {
            Confounder::BottomHalf(t) | Confounder::LeftHalf(t) | Confounder::Large(t) => t,
        }
    }
}

/// Allowed center region; the object must still fit inside the canvas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Region {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl Region {
    pub const ANY: Region = Region {
        x: (0.0, 1.0),
        y: (0.0, 1.0),
    };
    pub const LEFT: Region = Region {
        x: (0.0, 0.5),
        y: (0.0, 1.0),
    };
    pub const BOTTOM: Region = Region {
        x: (0.0, 1.0),
        y: (0.5, 1.0),
    };
}

/// Object to be placed: attributes fixed, position drawn from `region`.
#[derive(Clone, Copy, Debug)]
pub struct Draft {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub region: Region,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleSetName {
    Hans3Lite,
    Hans7Lite,
}

impl RuleSetName {
    pub fn as_str(self) -> &'static str {
        match self {
            RuleSetName::Hans3Lite => "hans3-lite",
            RuleSetName::Hans7Lite => "hans7-lite",
        }
    }
}

impl std::str::FromStr for RuleSetName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "hans3-lite" => Ok(RuleSetName::Hans3Lite),
            "hans7-lite" => Ok(RuleSetName::Hans7Lite),
            other => Err(format!("unknown rule set `{other}` (hans3-lite | hans7-lite)")),
        }
    }
}

impl std::fmt::Display for RuleSetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct ClassRule {
    pub description: &'static str,
    /// `None` for the default class, which absorbs every non-match.
    pub predicate: Option<Predicate>,
    pub confounder: Option<Confounder>,
    /// Objects that make up a positive example; alternatives for
    /// disjunctive rules.
    pub witnesses: Vec<Vec<Template>>,
}

#[derive(Clone, Debug)]
pub struct RuleSet {
    pub name: RuleSetName,
    pub classes: Vec<ClassRule>,
}

use Color::*;
use Shape::*;
use Size::*;

const LARGE_RED_SQUARE: Template = Template::exact(Square, Red, Large);
const SMALL_GREEN_CIRCLE: Template = Template::exact(Circle, Green, Small);
const BLUE_TRIANGLE: Template = Template::sc(Triangle, Blue);
const YELLOW_CIRCLE: Template = Template::sc(Circle, Yellow);
const YELLOW_SQUARE: Template = Template::sc(Square, Yellow);

fn shared_classes() -> Vec<ClassRule> {
    vec![
        ClassRule {
            description: "large red square",
            predicate: Some(Predicate::Contains(vec![LARGE_RED_SQUARE])),
            confounder: Some(Confounder::BottomHalf(LARGE_RED_SQUARE)),
            witnesses: vec![vec![LARGE_RED_SQUARE]],
        },
        ClassRule {
            description: "small green circle and blue triangle",
            predicate: Some(Predicate::Contains(vec![SMALL_GREEN_CIRCLE, BLUE_TRIANGLE])),
            confounder: Some(Confounder::Large(BLUE_TRIANGLE)),
            witnesses: vec![vec![SMALL_GREEN_CIRCLE, BLUE_TRIANGLE]],
        },
        ClassRule {
            description: "yellow circle and yellow square",
            predicate: Some(Predicate::Contains(vec![YELLOW_CIRCLE, YELLOW_SQUARE])),
            confounder: Some(Confounder::LeftHalf(YELLOW_CIRCLE)),
            witnesses: vec![vec![YELLOW_CIRCLE, YELLOW_SQUARE]],
        },
    ]
}

impl RuleSet {
    pub fn new(name: RuleSetName) -> Self {
        let mut classes = shared_classes();
        match name {
            RuleSetName::Hans3Lite => {
                // last class is the default
                classes[2].predicate = None;
            }
            RuleSetName::Hans7Lite => {
                let circle = Template::new(Some(Circle), None, None);
                let red_square = Template::sc(Square, Red);
                let green_circle = Template::sc(Circle, Green);
                let large_blue = Template::new(None, Some(Blue), Some(Large));
                let small_yellow_triangle = Template::exact(Triangle, Yellow, Small);
                classes.push(ClassRule {
                    description: "three circles in the left half, or two triangles of one color",
                    predicate: Some(Predicate::AnyOf(vec![
                        Predicate::CountLeft(circle, 3),
                        Predicate::SameColorPair(Triangle),
                    ])),
                    confounder: None,
                    witnesses: vec![vec![circle; 3], vec![Template::new(Some(Triangle), None, None); 2]],
                });
                classes.push(ClassRule {
                    description: "red square left of a green circle",
                    predicate: Some(Predicate::LeftOf(red_square, green_circle)),
                    confounder: Some(Confounder::Large(green_circle)),
                    witnesses: vec![vec![Template::exact(Square, Red, Small), green_circle]],
                });
                classes.push(ClassRule {
                    description: "two large blue objects",
                    predicate: Some(Predicate::Contains(vec![large_blue, large_blue])),
                    confounder: None,
                    witnesses: vec![vec![large_blue, large_blue]],
                });
                classes.push(ClassRule {
                    description: "small yellow triangle",
                    predicate: None,
                    confounder: None,
                    witnesses: vec![vec![small_yellow_triangle]],
                });
            }
        }
        RuleSet { name, classes }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn default_class(&self) -> usize {
        self.classes.len() - 1
    }

    /// First matching class in priority order, else the default class.
    pub fn evaluate(&self, objects: &[ObjectSpec]) -> usize {
        self.classes
            .iter()
            .position(|c| c.predicate.as_ref().is_some_and(|p| p.holds(objects)))
            .unwrap_or(self.default_class())
    }

    /// Witness drafts for one positive example of `class`.
    pub(crate) fn witness_drafts<R: Rng>(&self, class: usize, confounded: bool, rng: &mut R) -> Vec<Draft> {
        let rule = &self.classes[class];
        let templates = rule.witnesses.choose(rng).expect("witness list nonempty");
        let same_color = matches!(rule.predicate, Some(Predicate::AnyOf(_))) && templates[0].shape == Some(Triangle);
        let pair_color = *Color::ALL.choose(rng).unwrap();
        let left_count = matches!(rule.predicate, Some(Predicate::AnyOf(_))) && templates[0].shape == Some(Circle);
        let conf_template = rule.confounder.map(|c| c.template());
        let mut conf_done = false;
        templates
            .iter()
            .map(|t| {
                let (shape, mut color, mut size) = t.draw(rng);
                if same_color {
                    color = pair_color;
                }
                let mut region = if left_count { Region::LEFT } else { Region::ANY };
                if let (Some(conf), Some(ct)) = (rule.confounder, conf_template) {
                    if !conf_done && ct == *t {
                        conf_done = true;
                        if confounded {
                            match conf {
                                Confounder::BottomHalf(_) => region = Region::BOTTOM,
                                Confounder::LeftHalf(_) => region = Region::LEFT,
                                Confounder::Large(_) => size = Large,
                            }
                        }
                    }
                }
                Draft {
                    shape,
                    color,
                    size,
                    region,
                }
            })
            .collect()
    }

    /// Distractors for `class` never match one of its witness templates.
    pub(crate) fn distractor_ok(&self, class: usize, o: &ObjectSpec) -> bool {
        !self.classes[class].witnesses.iter().flatten().any(|t| {
            // wildcard-heavy templates (any circle, any triangle) are not
            // excluded; rejection on the label handles those
            let specified = t.shape.is_some() as u8 + t.color.is_some() as u8 + t.size.is_some() as u8;
            specified >= 2 && t.matches(o)
        })
    }
}

pub(crate) fn describe(t: &Template) -> String {
    let mut parts = Vec::new();
    if let Some(s) = t.size {
        parts.push(s.as_str());
    }
    if let Some(c) = t.color {
        parts.push(c.as_str());
    }
    parts.push(t.shape.map_or("object", |s| s.as_str()));
    parts.join(" ")
}
