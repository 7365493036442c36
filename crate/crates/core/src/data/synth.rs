//! Deterministic synthetic grounding scenes: colored shapes on a gray field,
//! and phrase queries with exhaustive ground truth.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::SplitMix64;

use super::Image;
use crate::error::{Error, Result};
use crate::geometry::{iou, Bbox};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Whether pixel center `(x, y)` is inside the shape drawn in `b`.
    pub fn covers(self, b: &Bbox, x: f64, y: f64) -> bool {
        if x < b.x1 || x >= b.x2 || y < b.y1 || y >= b.y2 {
            return false;
        }
        match self {
            Shape::Square => true,
            Shape::Circle => {
                let (cx, cy) = b.center();
                let r = b.width().min(b.height()) / 2.0;
                (x - cx).powi(2) + (y - cy).powi(2) <= r * r
            }
            Shape::Triangle => {
                // apex at top middle, base along the bottom edge
                let t = (y - b.y1) / b.height();
                let half = t * b.width() / 2.0;
                let cx = (b.x1 + b.x2) / 2.0;
                (x - cx).abs() <= half
            }
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.85, 0.12, 0.12],
            Color::Green => [0.12, 0.72, 0.18],
            Color::Blue => [0.14, 0.22, 0.88],
            Color::Yellow => [0.92, 0.86, 0.12],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub bbox: Bbox,
}

/// A rendered scene; objects are listed in drawing order.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub image: Image,
    pub objects: Vec<SceneObject>,
}

/// Scene and query generation settings.
///
/// Randomness comes from SplitMix64: the state advances by
/// `0x9E3779B97F4A7C15` per draw and each output is mixed with the
/// multipliers `0xBF58476D1CE4E5B9` and `0x94D049BB133111EB` (shifts 30, 27,
/// 31). Streams for a split and a scene index are derived by
/// [`derive_seed`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_side: usize,
    pub max_side: usize,
    /// Boxes of two objects must overlap strictly less than this.
    pub max_iou: f64,
    pub background: f32,
    pub noise_std: f32,
    /// Chance that an object repeats the color and shape of an earlier one.
    pub duplicate_prob: f64,
    pub queries_per_scene: usize,
    /// Relative sampling weights of attribute, positional and relational queries.
    pub kind_weights: [f64; 3],
    pub max_rejections: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 128,
            min_objects: 2,
            max_objects: 6,
            min_side: 20,
            max_side: 40,
            max_iou: 0.3,
            background: 0.5,
            noise_std: 0.02,
            duplicate_prob: 0.4,
            queries_per_scene: 3,
            kind_weights: [3.0, 2.0, 1.0],
            max_rejections: 1000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects < 1 || self.min_objects > self.max_objects {
            return Err(Error::config("object count range is empty"));
        }
        if self.min_side < 4 || self.min_side > self.max_side || self.max_side + 2 > self.image_size {
            return Err(Error::config("object side range does not fit the image"));
        }
        if !(self.max_iou > 0.0 && self.max_iou <= 1.0) || !(0.0..=1.0).contains(&self.duplicate_prob) {
            return Err(Error::config("overlap and duplicate settings must lie in (0, 1]"));
        }
        if self.kind_weights.iter().any(|w| *w < 0.0) || self.kind_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("query kind weights must be non-negative and not all zero"));
        }
        Ok(())
    }
}

/// Mixes a master seed with a stream id and an index into an independent seed.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut r = SplitMix64::seed_from_u64(master);
    let a = r.next_u64() ^ stream.wrapping_mul(0xA24B_AED4_963E_E407);
    let mut r = SplitMix64::seed_from_u64(a);
    let b = r.next_u64() ^ index.wrapping_mul(0x9FB2_1C65_1E98_DF25);
    SplitMix64::seed_from_u64(b).next_u64()
}

/// Renders a random scene; the same seed always gives the same scene.
pub fn generate_scene(seed: u64, cfg: &SynthConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = SplitMix64::seed_from_u64(seed);
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    let mut rejections = 0;
    while objects.len() < n {
        let side = rng.random_range(cfg.min_side..=cfg.max_side) as f64;
        let hi = (cfg.image_size as f64 - side - 1.0).floor() as i64;
        let x1 = rng.random_range(1..=hi) as f64;
        let y1 = rng.random_range(1..=hi) as f64;
        let bbox = Bbox::new(x1, y1, x1 + side, y1 + side)?;
        let (shape, color) = if !objects.is_empty() && rng.random_bool(cfg.duplicate_prob) {
            let src = objects[rng.random_range(0..objects.len())];
            (src.shape, src.color)
        } else {
            (Shape::ALL[rng.random_range(0..3)], Color::ALL[rng.random_range(0..4)])
        };
        if objects.iter().any(|o| iou(&o.bbox, &bbox) >= cfg.max_iou) {
            rejections += 1;
            if rejections >= cfg.max_rejections {
                return Err(Error::Generation(format!(
                    "could not place object {} of {n} after {rejections} rejections",
                    objects.len() + 1
                )));
            }
            continue;
        }
        objects.push(SceneObject { shape, color, bbox });
    }
    let image = render(&objects, cfg, &mut rng)?;
    Ok(SyntheticScene { image, objects })
}

fn render(objects: &[SceneObject], cfg: &SynthConfig, rng: &mut SplitMix64) -> Result<Image> {
    let s = cfg.image_size;
    let mut img = Image::filled(s, s, [cfg.background; 3]);
    for o in objects {
        let rgb = o.color.rgb();
        let (x0, y0) = (o.bbox.x1 as usize, o.bbox.y1 as usize);
        let (x1, y1) = ((o.bbox.x2.ceil() as usize).min(s), (o.bbox.y2.ceil() as usize).min(s));
        for y in y0..y1 {
            for x in x0..x1 {
                if o.shape.covers(&o.bbox, x as f64 + 0.5, y as f64 + 0.5) {
                    for (c, v) in rgb.iter().enumerate() {
                        img.set(c, y, x, *v);
                    }
                }
            }
        }
    }
    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0f32, cfg.noise_std).map_err(|e| Error::config(e.to_string()))?;
        for v in img.data_mut() {
            *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    Ok(img)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
    Top,
    Bottom,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Left, Side::Right, Side::Top, Side::Bottom];

    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
            Side::Top => "top",
            Side::Bottom => "bottom",
        }
    }

    /// Whether a point lies strictly inside this half of an `s×s` image.
    pub fn contains(self, s: f64, (x, y): (f64, f64)) -> bool {
        let mid = s / 2.0;
        match self {
            Side::Left => x < mid,
            Side::Right => x > mid,
            Side::Top => y < mid,
            Side::Bottom => y > mid,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    pub fn phrase(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    /// Whether center `a` stands in this relation to center `b`.
    pub fn holds(self, a: (f64, f64), b: (f64, f64)) -> bool {
        match self {
            Relation::LeftOf => a.0 < b.0,
            Relation::RightOf => a.0 > b.0,
            Relation::Above => a.1 < b.1,
            Relation::Below => a.1 > b.1,
        }
    }
}

/// A parsed query template.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Query {
    /// "<color> <shape>": every matching object.
    Attribute(Color, Shape),
    /// "the <shape> on the <side>": the single shape whose center is in that half.
    Positional(Shape, Side),
    /// "<color> <shape> <relation> the <shape>": matches related to the unique landmark.
    Relational(Color, Shape, Relation, Shape),
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Query::Attribute(c, s) => write!(f, "{} {}", c.name(), s.name()),
            Query::Positional(s, side) => write!(f, "the {} on the {}", s.name(), side.name()),
            Query::Relational(c, s, r, l) => write!(f, "{} {} {} the {}", c.name(), s.name(), r.phrase(), l.name()),
        }
    }
}

impl Query {
    /// Reads a phrase produced by `to_string`.
    pub fn parse(phrase: &str) -> Option<Self> {
        let w: Vec<&str> = phrase.split_whitespace().collect();
        match w.as_slice() {
            [c, s] => Some(Query::Attribute(Color::parse(c)?, Shape::parse(s)?)),
            ["the", s, "on", "the", side] => {
                let side = Side::ALL.into_iter().find(|v| v.name() == *side)?;
                Some(Query::Positional(Shape::parse(s)?, side))
            }
            [c, s, rest @ .., "the", l] => {
                let rel = rest.join(" ");
                let r = Relation::ALL.into_iter().find(|v| v.phrase() == rel)?;
                Some(Query::Relational(Color::parse(c)?, Shape::parse(s)?, r, Shape::parse(l)?))
            }
            _ => None,
        }
    }

    /// Which of the three templates this query uses: 0, 1 or 2.
    pub fn kind(&self) -> usize {
        match self {
            Query::Attribute(..) => 0,
            Query::Positional(..) => 1,
            Query::Relational(..) => 2,
        }
    }

    /// Indices of the objects this query refers to; empty when the phrase
    /// is not well-posed for the scene.
    pub fn resolve(&self, objects: &[SceneObject], image_size: usize) -> Vec<usize> {
        let s = image_size as f64;
        let idx = |pred: &dyn Fn(&SceneObject) -> bool| -> Vec<usize> {
            objects.iter().enumerate().filter(|(_, o)| pred(o)).map(|(i, _)| i).collect()
        };
        match *self {
            Query::Attribute(c, sh) => idx(&|o| o.color == c && o.shape == sh),
            Query::Positional(sh, side) => {
                let hits = idx(&|o| o.shape == sh && side.contains(s, o.bbox.center()));
                if hits.len() == 1 {
                    hits
                } else {
                    Vec::new()
                }
            }
            Query::Relational(c, sh, rel, landmark) => {
                let marks = idx(&|o| o.shape == landmark);
                let [m] = marks.as_slice() else {
                    return Vec::new();
                };
                let anchor = objects[*m].bbox.center();
                idx(&|o| o.color == c && o.shape == sh && rel.holds(o.bbox.center(), anchor))
                    .into_iter()
                    .filter(|i| i != m)
                    .collect()
            }
        }
    }
}

/// A query together with the indices of the objects it refers to.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundedQuery {
    pub query: Query,
    pub targets: Vec<usize>,
}

impl GroundedQuery {
    pub fn phrase(&self) -> String {
        self.query.to_string()
    }

    pub fn boxes(&self, scene: &SyntheticScene) -> Vec<Bbox> {
        self.targets.iter().map(|&i| scene.objects[i].bbox).collect()
    }
}

/// Every well-posed query for the scene, in a fixed order.
pub fn candidate_queries(scene: &SyntheticScene, image_size: usize) -> Vec<GroundedQuery> {
    let mut out = Vec::new();
    let mut push = |q: Query| {
        let targets = q.resolve(&scene.objects, image_size);
        if !targets.is_empty() && !out.iter().any(|g: &GroundedQuery| g.query == q) {
            out.push(GroundedQuery { query: q, targets });
        }
    };
    for o in &scene.objects {
        push(Query::Attribute(o.color, o.shape));
    }
    for o in &scene.objects {
        for side in Side::ALL {
            push(Query::Positional(o.shape, side));
        }
    }
    for o in &scene.objects {
        for l in Shape::ALL {
            for r in Relation::ALL {
                push(Query::Relational(o.color, o.shape, r, l));
            }
        }
    }
    out
}

/// Picks up to `queries_per_scene` queries: one multi-region query when the
/// scene has any, the rest drawn by template weight without replacement.
pub fn generate_queries(scene: &SyntheticScene, seed: u64, cfg: &SynthConfig) -> Vec<GroundedQuery> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut pool = candidate_queries(scene, cfg.image_size);
    pool.shuffle(&mut rng);
    let mut chosen = Vec::new();
    if let Some(i) = pool.iter().position(|g| g.targets.len() > 1) {
        chosen.push(pool.remove(i));
    }
    while chosen.len() < cfg.queries_per_scene && !pool.is_empty() {
        let total: f64 = pool.iter().map(|g| cfg.kind_weights[g.query.kind()]).sum();
        if total <= 0.0 {
            break;
        }
        let mut pick = rng.random::<f64>() * total;
        let mut at = pool.len() - 1;
        for (i, g) in pool.iter().enumerate() {
            let w = cfg.kind_weights[g.query.kind()];
            if pick < w {
                at = i;
                break;
            }
            pick -= w;
        }
        if cfg.kind_weights[pool[at].query.kind()] <= 0.0 {
            break;
        }
        chosen.push(pool.remove(at));
    }
    chosen
}
