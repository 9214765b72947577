use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AnnotatedImage, AnnotatedObject, Dataset, Image};
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }

    /// Whether the pixel centre `(px, py)`, relative to the box origin, lies in
    /// the shape inscribed in an `s×s` box.
    fn covers(self, px: f64, py: f64, s: f64) -> bool {
        match self {
            ShapeKind::Square => true,
            ShapeKind::Circle => {
                let r = s / 2.0;
                (px - r).powi(2) + (py - r).powi(2) <= r * r
            }
            // apex at top centre, base along the bottom edge
            ShapeKind::Triangle => (px - s / 2.0).abs() <= py / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NamedColor {
    Red,
    Green,
    Blue,
    Yellow,
}

impl NamedColor {
    pub const ALL: [NamedColor; 4] = [NamedColor::Red, NamedColor::Green, NamedColor::Blue, NamedColor::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            NamedColor::Red => "red",
            NamedColor::Green => "green",
            NamedColor::Blue => "blue",
            NamedColor::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            NamedColor::Red => [0.9, 0.1, 0.1],
            NamedColor::Green => [0.1, 0.8, 0.2],
            NamedColor::Blue => [0.15, 0.25, 0.95],
            NamedColor::Yellow => [0.95, 0.9, 0.1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SizeClass {
    Small,
    Large,
}

impl SizeClass {
    pub fn name(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Large => "large",
        }
    }

    /// Side length range in pixels on a 64-pixel canvas.
    fn range(self) -> (f64, f64) {
        match self {
            SizeClass::Small => (12.0, 16.0),
            SizeClass::Large => (22.0, 28.0),
        }
    }
}

/// How objects are arranged in each generated scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneLayout {
    /// Exactly one object.
    Single,
    /// One to three objects with pairwise distinct (color, shape).
    Mixed,
    /// Two objects of the same shape and different colors.
    SameShapePairs,
}

/// Caption templates with `{size}`, `{color}` and `{shape}` slots. Each object
/// receives one caption per template.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    pub templates: Vec<String>,
    pub layout: SceneLayout,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            templates: vec!["a {size} {color} {shape}".into(), "a {color} {shape}".into()],
            layout: SceneLayout::Mixed,
        }
    }
}

impl TemplateSet {
    pub fn new(templates: &[&str], layout: SceneLayout) -> Self {
        Self { templates: templates.iter().map(|s| s.to_string()).collect(), layout }
    }

    fn render(&self, size: SizeClass, color: NamedColor, shape: ShapeKind) -> Vec<Vec<String>> {
        self.templates
            .iter()
            .map(|t| {
                let text = t
                    .replace("{size}", size.name())
                    .replace("{color}", color.name())
                    .replace("{shape}", shape.name());
                super::tokenize(&text)
            })
            .collect()
    }
}

struct Spec {
    shape: ShapeKind,
    color: NamedColor,
    size: SizeClass,
}

const BACKGROUND: [f32; 3] = [0.45, 0.45, 0.45];
const GAP: f64 = 2.0;
const MAX_TRIES: usize = 200;
const SCENE_TRIES: usize = 50;
const MIN_CANVAS: usize = 32;

/// Seeded corpus of colored shapes on a gray canvas; superclasses are the
/// shape kinds. `canvas` is `(height, width)`.
pub fn generate_synthetic_corpus(n_images: usize, seed: u64, canvas: (usize, usize), templates: &TemplateSet) -> Result<Dataset> {
    if n_images == 0 {
        return Err(Error::InvalidArgument("n_images must be at least 1".into()));
    }
    if templates.templates.is_empty() {
        return Err(Error::InvalidArgument("template set is empty".into()));
    }
    let (h, w) = canvas;
    if h.min(w) < MIN_CANVAS {
        return Err(Error::Generation(format!("{h}×{w} canvas is below the {MIN_CANVAS}-pixel minimum")));
    }
    let unit = h.min(w) as f64 / 64.0;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let (image, objects) = (0..SCENE_TRIES)
            .find_map(|_| try_scene(&mut rng, templates, unit, h, w))
            .ok_or_else(|| Error::Generation(format!("could not lay out image {i} on a {h}×{w} canvas")))?;
        images.push(AnnotatedImage { image_id: format!("synth-{seed}-{i:05}"), image, objects });
    }
    Ok(Dataset { superclasses: ShapeKind::ALL.iter().map(|s| s.name().to_string()).collect(), images })
}

fn try_scene(
    rng: &mut ChaCha8Rng,
    templates: &TemplateSet,
    unit: f64,
    h: usize,
    w: usize,
) -> Option<(Image, Vec<AnnotatedObject>)> {
    let specs = draw_specs(rng, templates.layout);
    let mut image = Image::filled(h, w, BACKGROUND).ok()?;
    let mut placed: Vec<BBox> = Vec::new();
    let mut objects = Vec::new();
    for spec in specs {
        let (lo, hi) = spec.size.range();
        let side = (rng.gen_range(lo..=hi) * unit).round();
        let bbox = place(rng, side, h, w, &placed)?;
        draw(&mut image, &bbox, spec.shape, spec.color.rgb());
        placed.push(bbox);
        objects.push(AnnotatedObject {
            bbox,
            superclass_id: ShapeKind::ALL.iter().position(|&s| s == spec.shape).unwrap(),
            captions: templates.render(spec.size, spec.color, spec.shape),
        });
    }
    Some((image, objects))
}

fn draw_specs(rng: &mut ChaCha8Rng, layout: SceneLayout) -> Vec<Spec> {
    let size = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.5) { SizeClass::Small } else { SizeClass::Large };
    match layout {
        SceneLayout::Single | SceneLayout::Mixed => {
            let n = if layout == SceneLayout::Single { 1 } else { rng.gen_range(1..=3) };
            let mut pairs: Vec<(ShapeKind, NamedColor)> = Vec::new();
            while pairs.len() < n {
                let p = (*ShapeKind::ALL.choose(rng).unwrap(), *NamedColor::ALL.choose(rng).unwrap());
                if !pairs.contains(&p) {
                    pairs.push(p);
                }
            }
            pairs.into_iter().map(|(shape, color)| Spec { shape, color, size: size(rng) }).collect()
        }
        SceneLayout::SameShapePairs => {
            let shape = *ShapeKind::ALL.choose(rng).unwrap();
            let colors: Vec<NamedColor> = NamedColor::ALL.choose_multiple(rng, 2).copied().collect();
            colors.into_iter().map(|color| Spec { shape, color, size: size(rng) }).collect()
        }
    }
}

fn place(rng: &mut ChaCha8Rng, side: f64, h: usize, w: usize, placed: &[BBox]) -> Option<BBox> {
    for _ in 0..MAX_TRIES {
        let x1 = rng.gen_range(0..=(w as f64 - side) as usize) as f64;
        let y1 = rng.gen_range(0..=(h as f64 - side) as usize) as f64;
        let b = BBox::new(x1, y1, x1 + side, y1 + side).ok()?;
        let clear = placed.iter().all(|p| {
            b.x1() >= p.x2() + GAP || p.x1() >= b.x2() + GAP || b.y1() >= p.y2() + GAP || p.y1() >= b.y2() + GAP
        });
        if clear {
            return Some(b);
        }
    }
    None
}

fn draw(image: &mut Image, b: &BBox, shape: ShapeKind, rgb: [f32; 3]) {
    let s = b.width();
    for y in b.y1() as usize..b.y2() as usize {
        for x in b.x1() as usize..b.x2() as usize {
            let (px, py) = (x as f64 + 0.5 - b.x1(), y as f64 + 0.5 - b.y1());
            if shape.covers(px, py, s) {
                image.put(y, x, rgb);
            }
        }
    }
}
