//! Synthetic scenes: palette-colored shapes on a grey texture, with an
//! exact registry so localization can be checked pixel for pixel.
//!
//! Localization works two ways. [`oracle_localize`] answers from the scene
//! registry. [`localize_on_image`] re-detects objects from pixels, so it keeps
//! working on a canvas that earlier edits have changed; on a freshly
//! generated scene both agree.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{BackendError, BackendResult};
use crate::raster::{BinaryMask, RasterImage};

pub const PALETTE: [(&str, [u8; 3]); 8] = [
    ("red", [220, 30, 30]),
    ("green", [30, 180, 60]),
    ("blue", [30, 60, 220]),
    ("yellow", [240, 210, 40]),
    ("purple", [140, 50, 170]),
    ("orange", [245, 130, 20]),
    ("pink", [240, 110, 180]),
    ("cyan", [40, 200, 210]),
];

pub const MAX_OBJECTS: usize = 8;
const CELL: u32 = 32;

pub fn palette_rgb(name: &str) -> Option<[u8; 3]> {
    PALETTE
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .map(|(_, c)| *c)
}

pub fn palette_name(rgb: [u8; 3]) -> Option<&'static str> {
    PALETTE.iter().find(|(_, c)| *c == rgb).map(|(n, _)| *n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn as_str(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether local pixel (x, y) of a w×h box is inside the shape.
    pub fn covers(self, w: u32, h: u32, x: u32, y: u32) -> bool {
        let (w, h, x, y) = (w as i64, h as i64, x as i64, y as i64);
        match self {
            Shape::Square => true,
            Shape::Circle => {
                let dx = 2 * x - (w - 1);
                let dy = 2 * y - (h - 1);
                // ellipse inscribed in the box; a circle when w == h
                dx * dx * h * h + dy * dy * w * w <= w * w * h * h
            }
            Shape::Triangle => (2 * x - (w - 1)).abs() * h <= (y + 1) * w,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Shape {
    type Err = BackendError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Shape::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| BackendError::Argument(format!("unknown shape {s:?}")))
    }
}

/// Half-open pixel box `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }
    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub object_id: usize,
    pub color: &'static str,
    pub shape: Shape,
    pub bbox: BBox,
    pub mask: BinaryMask,
}

impl SceneObject {
    pub fn name(&self) -> String {
        format!("{} {}", self.color, self.shape)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: RasterImage,
    pub objects: Vec<SceneObject>,
    pub texture_seed: u64,
    /// Grid cells holding no object.
    pub free_rects: Vec<BBox>,
}

impl SyntheticScene {
    pub fn foreground(&self) -> BinaryMask {
        union_all(self.image.dims(), self.objects.iter().map(|o| &o.mask))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneLayout {
    pub cols: u32,
    pub rows: u32,
}

impl Default for SceneLayout {
    fn default() -> Self {
        Self { cols: 4, rows: 4 }
    }
}

impl SceneLayout {
    pub fn dims(&self) -> (u32, u32) {
        (self.cols * CELL, self.rows * CELL)
    }
}

fn union_all<'a>((w, h): (u32, u32), masks: impl Iterator<Item = &'a BinaryMask>) -> BinaryMask {
    let mut acc = BinaryMask::empty(w, h).expect("positive dims");
    for m in masks {
        acc = acc.union(m).expect("masks share the canvas size");
    }
    acc
}

fn texture(seed: u64, x: u32, y: u32) -> u8 {
    // splitmix64 finalizer over the packed coordinates
    let mut z = seed ^ ((x as u64) << 32 | y as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    96 + (z % 48) as u8
}

pub fn generate_scene(seed: u64, spec: Option<&[(&str, Shape)]>) -> BackendResult<SyntheticScene> {
    generate_scene_with(seed, spec, SceneLayout::default())
}

/// Render a scene. Objects sit in the lower half of distinct grid cells so
/// the band above each one is free background.
pub fn generate_scene_with(
    seed: u64,
    spec: Option<&[(&str, Shape)]>,
    layout: SceneLayout,
) -> BackendResult<SyntheticScene> {
    if layout.cols == 0 || layout.rows == 0 {
        return Err(BackendError::Argument("scene grid must be at least 1×1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = (layout.cols * layout.rows) as usize;
    let items: Vec<(&'static str, Shape)> = match spec {
        Some(list) => {
            let mut out = Vec::with_capacity(list.len());
            for (c, s) in list {
                let (name, _) = PALETTE
                    .iter()
                    .find(|(n, _)| n.eq_ignore_ascii_case(c))
                    .ok_or_else(|| BackendError::Argument(format!("unknown color {c:?}")))?;
                if out.contains(&(*name, *s)) {
                    return Err(BackendError::Argument(format!(
                        "duplicate object {name} {s}: references would be ambiguous"
                    )));
                }
                out.push((*name, *s));
            }
            out
        }
        None => {
            let n = rng.random_range(2..=5usize.min(cells).max(1));
            let mut pairs: Vec<_> = PALETTE
                .iter()
                .flat_map(|(c, _)| Shape::ALL.into_iter().map(move |s| (*c, s)))
                .collect();
            pairs.shuffle(&mut rng);
            // one object per color keeps free-form references unambiguous
            let mut out: Vec<(&'static str, Shape)> = Vec::new();
            for p in pairs {
                if out.len() == n {
                    break;
                }
                if !out.iter().any(|(c, _)| *c == p.0) {
                    out.push(p);
                }
            }
            out
        }
    };
    if items.len() > MAX_OBJECTS {
        return Err(BackendError::Argument(format!(
            "{} objects requested, at most {MAX_OBJECTS} supported",
            items.len()
        )));
    }
    if items.len() > cells {
        return Err(BackendError::Argument(format!(
            "{} objects do not fit a {}×{} grid",
            items.len(),
            layout.cols,
            layout.rows
        )));
    }

    let (w, h) = layout.dims();
    let texture_seed = rng.random::<u64>();
    let mut image = RasterImage::from_fn(w, h, |x, y| {
        let g = texture(texture_seed, x, y);
        [g, g, g]
    })
    .expect("positive dims");

    let mut order: Vec<usize> = (0..cells).collect();
    order.shuffle(&mut rng);
    let mut objects = Vec::with_capacity(items.len());
    for (id, ((color, shape), cell)) in items.into_iter().zip(order.iter().copied()).enumerate() {
        let cx = (cell as u32 % layout.cols) * CELL;
        let cy = (cell as u32 / layout.cols) * CELL;
        let s = rng.random_range(8..=14u32);
        let x0 = cx + 2 + rng.random_range(0..=(28 - s));
        let y0 = rng.random_range(cy + 16..=cy + 31 - s);
        let bbox = BBox { x0, y0, x1: x0 + s, y1: y0 + s };
        let rgb = palette_rgb(color).expect("palette color");
        let mask = BinaryMask::from_fn(w, h, |x, y| {
            x >= bbox.x0
                && x < bbox.x1
                && y >= bbox.y0
                && y < bbox.y1
                && shape.covers(s, s, x - bbox.x0, y - bbox.y0)
        })
        .expect("positive dims");
        image = image.fill_masked(&mask, rgb).expect("same dims");
        objects.push(SceneObject { object_id: id, color, shape, bbox, mask });
    }
    let free_rects = order[objects.len()..]
        .iter()
        .map(|&cell| {
            let cx = (cell as u32 % layout.cols) * CELL;
            let cy = (cell as u32 / layout.cols) * CELL;
            BBox { x0: cx, y0: cy, x1: cx + CELL, y1: cy + CELL }
        })
        .collect();
    Ok(SyntheticScene { image, objects, texture_seed, free_rects })
}

/// A palette-colored region found in an image.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectedObject {
    pub color: &'static str,
    /// `None` when the region matches none of the rasterized shapes.
    pub shape: Option<Shape>,
    pub bbox: BBox,
    pub mask: BinaryMask,
}

/// 4-connected components of exact palette colors, in raster order of their
/// first pixel.
pub fn detect_objects(image: &RasterImage) -> Vec<DetectedObject> {
    let (w, h) = image.dims();
    let n = image.pixel_count();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let rgb = image.at(start);
        let Some(color) = palette_name(rgb) else {
            seen[start] = true;
            continue;
        };
        let mut pixels = Vec::new();
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            pixels.push(i);
            let (x, y) = ((i as u32) % w, (i as u32) / w);
            let mut visit = |nx: u32, ny: u32| {
                let j = (ny * w + nx) as usize;
                if !seen[j] && image.at(j) == rgb {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(x - 1, y);
            }
            if x + 1 < w {
                visit(x + 1, y);
            }
            if y > 0 {
                visit(x, y - 1);
            }
            if y + 1 < h {
                visit(x, y + 1);
            }
        }
        let mut mask = BinaryMask::empty(w, h).expect("positive dims");
        for &i in &pixels {
            mask.set((i as u32) % w, (i as u32) / w, true);
        }
        let (x0, y0, x1, y1) = mask.bounding_box().expect("component is nonempty");
        let bbox = BBox { x0, y0, x1: x1 + 1, y1: y1 + 1 };
        let shape = classify_shape(&mask, bbox);
        out.push(DetectedObject { color, shape, bbox, mask });
    }
    out
}

fn classify_shape(mask: &BinaryMask, b: BBox) -> Option<Shape> {
    let (bw, bh) = (b.width(), b.height());
    Shape::ALL.into_iter().find(|s| {
        (*s != Shape::Circle || bw == bh)
            && (0..bh).all(|y| {
                (0..bw).all(|x| mask.get(b.x0 + x, b.y0 + y) == s.covers(bw, bh, x, y))
            })
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reference {
    Object { color: String, shape: Shape },
    On { color: String, shape: Shape },
    Background,
}

/// Parse the controlled reference grammar: `the <color> <shape>`,
/// `on the <color> <shape>`, `the background`.
pub fn parse_reference(reference: &str) -> BackendResult<Reference> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"(?i)^\s*(on\s+)?(?:(?:the|a|an)\s+)?([a-z]+)\s+([a-z]+)\s*[.]?\s*$").unwrap()
    });
    let bad = |reason: &str| BackendError::Localization {
        reference: reference.to_string(),
        reason: reason.to_string(),
    };
    let t = reference.trim().to_lowercase();
    if t == "the background" || t == "background" {
        return Ok(Reference::Background);
    }
    let c = re.captures(&t).ok_or_else(|| bad("not a controlled-grammar reference"))?;
    let color = c[2].to_string();
    if palette_rgb(&color).is_none() {
        return Err(bad("unknown color"));
    }
    let shape: Shape = c[3].parse().map_err(|_| bad("unknown shape"))?;
    Ok(if c.get(1).is_some() {
        Reference::On { color, shape }
    } else {
        Reference::Object { color, shape }
    })
}

struct Found<'a> {
    color: &'a str,
    shape: Option<Shape>,
    bbox: BBox,
    mask: &'a BinaryMask,
}

fn resolve(
    dims: (u32, u32),
    found: &[Found<'_>],
    reference: &str,
) -> BackendResult<BinaryMask> {
    let (w, h) = dims;
    let parsed = parse_reference(reference)?;
    let foreground = union_all(dims, found.iter().map(|f| f.mask));
    // An earlier dilated edit can nibble an object's outline so its pieces no
    // longer classify as the original shape; fall back to everything of that
    // color (random scenes use each color once).
    let matching = |color: &str, shape: Shape| -> Vec<&Found<'_>> {
        let exact: Vec<_> = found
            .iter()
            .filter(|f| f.color == color && f.shape == Some(shape))
            .collect();
        if !exact.is_empty() {
            return exact;
        }
        found.iter().filter(|f| f.color == color).collect()
    };
    let missing = || BackendError::Localization {
        reference: reference.to_string(),
        reason: "no such object in the image".into(),
    };
    match parsed {
        Reference::Background => Ok(foreground.complement()),
        Reference::Object { color, shape } => {
            let hits = matching(&color, shape);
            if hits.is_empty() {
                return Err(missing());
            }
            Ok(union_all(dims, hits.iter().map(|f| f.mask)))
        }
        Reference::On { color, shape } => {
            let hits = matching(&color, shape);
            if hits.is_empty() {
                return Err(missing());
            }
            let mut band = BinaryMask::empty(w, h).expect("positive dims");
            for f in hits {
                let b = f.bbox;
                let r = BinaryMask::rect(
                    w,
                    h,
                    b.x0 as i64,
                    b.y0 as i64 - b.height() as i64,
                    b.x1 as i64,
                    b.y0 as i64,
                )
                .expect("positive dims");
                band = band.union(&r).expect("same dims");
            }
            Ok(band.difference(&foreground).expect("same dims"))
        }
    }
}

/// Registry-backed localization for a generated scene.
pub fn oracle_localize(scene: &SyntheticScene, reference: &str) -> BackendResult<BinaryMask> {
    let found: Vec<Found<'_>> = scene
        .objects
        .iter()
        .map(|o| Found { color: o.color, shape: Some(o.shape), bbox: o.bbox, mask: &o.mask })
        .collect();
    resolve(scene.image.dims(), &found, reference)
}

/// Localization against whatever palette objects are currently visible.
pub fn localize_on_image(image: &RasterImage, reference: &str) -> BackendResult<BinaryMask> {
    let detected = detect_objects(image);
    let found: Vec<Found<'_>> = detected
        .iter()
        .map(|o| Found { color: o.color, shape: o.shape, bbox: o.bbox, mask: &o.mask })
        .collect();
    resolve(image.dims(), &found, reference)
}

/// First window in raster order, of side max(8, min(w,h)/8), that touches no
/// palette object. Used for ADD without an anchor.
pub fn free_window(image: &RasterImage) -> BackendResult<BinaryMask> {
    let (w, h) = image.dims();
    let k = (w.min(h) / 8).max(8).min(w).min(h);
    let fg = union_all((w, h), detect_objects(image).iter().map(|o| &o.mask));
    let mut y = 0;
    while y + k <= h {
        let mut x = 0;
        while x + k <= w {
            let win = BinaryMask::rect(w, h, x as i64, y as i64, (x + k) as i64, (y + k) as i64)
                .expect("positive dims");
            if win.intersection(&fg).expect("same dims").is_empty() {
                return Ok(win);
            }
            x += k;
        }
        y += k;
    }
    Err(BackendError::Localization {
        reference: "free space".into(),
        reason: "no empty window in the image".into(),
    })
}

/// Coarse position words ("top left", "center") for a box in a w×h image.
pub fn position_phrase(b: BBox, w: u32, h: u32) -> String {
    let cx = (b.x0 + b.x1) as f64 / 2.0 / w as f64;
    let cy = (b.y0 + b.y1) as f64 / 2.0 / h as f64;
    let col = if cx < 1.0 / 3.0 {
        "left"
    } else if cx < 2.0 / 3.0 {
        "middle"
    } else {
        "right"
    };
    let row = if cy < 1.0 / 3.0 {
        "top"
    } else if cy < 2.0 / 3.0 {
        "center"
    } else {
        "bottom"
    };
    match (row, col) {
        ("center", "middle") => "center".to_string(),
        _ => format!("{row} {col}"),
    }
}
