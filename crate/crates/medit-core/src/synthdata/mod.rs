//! Synthetic edit-pair corpus: tiny geometric scenes, six edit types, an
//! ambiguous rough-request grammar and a precise instruction grammar.
//!
//! Everything is integer rasterization on a 32x32 canvas with a fixed
//! palette, so renders are bit-identical across machines and pixel-level
//! ground truth (edit masks, exact diffs) is available by construction.

pub mod corpus;
pub mod grammar;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mml::OptimizedInstruction;
use crate::tensor::rng::{Rng, StreamKind};
use crate::tensor::Tensor;

pub const CANVAS: usize = 32;
pub const MIN_EXTENT: i32 = 3;
pub const MAX_EXTENT: i32 = 7;
pub const MAX_SHAPES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Circle,
    Square,
    Triangle,
}

impl Kind {
    pub const ALL: [Kind; 3] = [Kind::Circle, Kind::Square, Kind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Kind::Circle => "circle",
            Kind::Square => "square",
            Kind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
    Cyan,
    Pink,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Orange,
        Color::Cyan,
        Color::Pink,
    ];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 70],
            Color::Blue => [50, 90, 220],
            Color::Yellow => [235, 220, 60],
            Color::Purple => [150, 60, 200],
            Color::Orange => [240, 140, 40],
            Color::Cyan => [60, 200, 220],
            Color::Pink => [240, 130, 180],
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
            Color::Cyan => "cyan",
            Color::Pink => "pink",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Black,
    Gray,
    White,
}

impl Background {
    pub const ALL: [Background; 3] = [Background::Black, Background::Gray, Background::White];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Background::Black => [15, 15, 15],
            Background::Gray => [128, 128, 128],
            Background::White => [245, 245, 245],
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Background::Black => "black",
            Background::Gray => "gray",
            Background::White => "white",
        }
    }
}

/// One solid shape. `extent` is the half-size of the bounding box: a circle
/// of radius extent, a square of side 2*extent+1, or an upward triangle with
/// apex extent rows above the center and base extent rows below.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: Kind,
    pub color: Color,
    pub cx: i32,
    pub cy: i32,
    pub extent: i32,
}

impl Shape {
    pub fn contains(&self, x: i32, y: i32) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let e = self.extent;
        match self.kind {
            Kind::Circle => dx * dx + dy * dy <= e * e,
            Kind::Square => dx.abs() <= e && dy.abs() <= e,
            Kind::Triangle => {
                // Row r below the apex spans r/2 pixels to each side.
                let from_apex = y - (self.cy - e);
                (0..=2 * e).contains(&from_apex) && dx.abs() <= from_apex / 2
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub background: Background,
    pub shapes: Vec<Shape>,
}

impl Scene {
    /// Structural invariants: at most four shapes, extents in range, fully on
    /// canvas, pairwise center distance at least the sum of extents, and no
    /// repeated (kind, color) pair.
    pub fn validate(&self) -> Result<()> {
        if self.shapes.len() > MAX_SHAPES {
            return Err(Error::scene(format!("{} shapes exceeds {MAX_SHAPES}", self.shapes.len())));
        }
        let hi = CANVAS as i32 - 1;
        for (i, s) in self.shapes.iter().enumerate() {
            if !(MIN_EXTENT..=MAX_EXTENT).contains(&s.extent) {
                return Err(Error::scene(format!("shape {i}: extent {} out of range", s.extent)));
            }
            if s.cx - s.extent < 0 || s.cx + s.extent > hi || s.cy - s.extent < 0 || s.cy + s.extent > hi
            {
                return Err(Error::scene(format!("shape {i}: extends off canvas")));
            }
            for (j, t) in self.shapes.iter().enumerate().take(i) {
                let (dx, dy) = ((s.cx - t.cx) as i64, (s.cy - t.cy) as i64);
                let min = (s.extent + t.extent) as i64;
                if dx * dx + dy * dy < min * min {
                    return Err(Error::scene(format!("shapes {j} and {i} too close")));
                }
                if s.kind == t.kind && s.color == t.color {
                    return Err(Error::scene(format!(
                        "shapes {j} and {i} share kind and color"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Rasterize to a [3, 32, 32] tensor; no anti-aliasing, palette values
    /// are exact multiples of 1/255.
    pub fn render(&self) -> Tensor {
        let n = CANVAS;
        let mut t = Tensor::zeros(&[3, n, n]);
        let bg = self.background.rgb();
        for y in 0..n {
            for x in 0..n {
                let mut rgb = bg;
                for s in &self.shapes {
                    if s.contains(x as i32, y as i32) {
                        rgb = s.color.rgb();
                        break;
                    }
                }
                for c in 0..3 {
                    t.data[c * n * n + y * n + x] = rgb[c] as f32 / 255.0;
                }
            }
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "type")]
pub enum Edit {
    Recolor { target: usize, to: Color },
    Add { shape: Shape },
    Remove { target: usize },
    Move { target: usize, dx: i32, dy: i32 },
    Resize { target: usize, to_extent: i32 },
    Replace { target: usize, to_kind: Kind },
}

impl Edit {
    pub fn type_name(&self) -> &'static str {
        match self {
            Edit::Recolor { .. } => "recolor",
            Edit::Add { .. } => "add",
            Edit::Remove { .. } => "remove",
            Edit::Move { .. } => "move",
            Edit::Resize { .. } => "resize",
            Edit::Replace { .. } => "replace",
        }
    }

    /// Index of the edited shape in the source scene, if the edit has one.
    pub fn target(&self) -> Option<usize> {
        match *self {
            Edit::Recolor { target, .. }
            | Edit::Remove { target }
            | Edit::Move { target, .. }
            | Edit::Resize { target, .. }
            | Edit::Replace { target, .. } => Some(target),
            Edit::Add { .. } => None,
        }
    }

    /// Produce the edited scene; the result must satisfy scene invariants.
    pub fn apply(&self, scene: &Scene) -> Result<Scene> {
        let mut out = scene.clone();
        let check = |t: usize| -> Result<usize> {
            if t < scene.shapes.len() {
                Ok(t)
            } else {
                Err(Error::scene(format!("edit targets shape {t} of {}", scene.shapes.len())))
            }
        };
        match *self {
            Edit::Recolor { target, to } => out.shapes[check(target)?].color = to,
            Edit::Add { shape } => out.shapes.push(shape),
            Edit::Remove { target } => {
                out.shapes.remove(check(target)?);
            }
            Edit::Move { target, dx, dy } => {
                let s = &mut out.shapes[check(target)?];
                s.cx += dx;
                s.cy += dy;
            }
            Edit::Resize { target, to_extent } => out.shapes[check(target)?].extent = to_extent,
            Edit::Replace { target, to_kind } => out.shapes[check(target)?].kind = to_kind,
        }
        out.validate()?;
        Ok(out)
    }
}

/// One training/evaluation example: source and edited scene, both renders,
/// the rough request, the precise instruction, and the changed-region mask.
#[derive(Debug, Clone)]
pub struct EditSample {
    pub seed: u64,
    pub edit: Edit,
    pub scene_src: Scene,
    pub scene_gt: Scene,
    pub t_raw: String,
    pub t_gt: OptimizedInstruction,
    pub i_src: Tensor,
    pub i_gt: Tensor,
    pub mask: Tensor,
}

/// [h, w] indicator of pixels where any channel differs exactly.
pub fn pixel_diff(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.shape, b.shape);
    let (h, w) = (a.shape[1], a.shape[2]);
    let mut m = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                if a.data[c * h * w + y * w + x] != b.data[c * h * w + y * w + x] {
                    m.data[y * w + x] = 1.0;
                    break;
                }
            }
        }
    }
    m
}

/// Binary box dilation with the given radius (radius 1 = 3x3 neighborhood).
pub fn dilate(mask: &Tensor, radius: usize) -> Tensor {
    let (h, w) = (mask.shape[0], mask.shape[1]);
    let r = radius as i32;
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h as i32 {
        for x in 0..w as i32 {
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0
                        && yy < h as i32
                        && xx >= 0
                        && xx < w as i32
                        && mask.data[yy as usize * w + xx as usize] == 1.0
                    {
                        out.data[y as usize * w + x as usize] = 1.0;
                        break 'scan;
                    }
                }
            }
        }
    }
    out
}

/// Coarse 3x3 grid cell of a coordinate (columns of width 11, 11, 10).
pub fn cell_index(v: i32) -> usize {
    if v < 11 {
        0
    } else if v < 22 {
        1
    } else {
        2
    }
}

/// Human name of the cell containing (cx, cy): "top left", "middle right",
/// plain "center" for the middle cell.
pub fn cell_name(cx: i32, cy: i32) -> String {
    let rows = ["top", "middle", "bottom"];
    let cols = ["left", "center", "right"];
    let (r, c) = (cell_index(cy), cell_index(cx));
    if r == 1 && c == 1 {
        "center".to_string()
    } else {
        format!("{} {}", rows[r], cols[c])
    }
}

fn fits(shapes: &[Shape], cand: &Shape, skip: Option<usize>) -> bool {
    let hi = CANVAS as i32 - 1;
    if cand.cx - cand.extent < 0
        || cand.cx + cand.extent > hi
        || cand.cy - cand.extent < 0
        || cand.cy + cand.extent > hi
        || !(MIN_EXTENT..=MAX_EXTENT).contains(&cand.extent)
    {
        return false;
    }
    for (i, s) in shapes.iter().enumerate() {
        if Some(i) == skip {
            continue;
        }
        let (dx, dy) = ((s.cx - cand.cx) as i64, (s.cy - cand.cy) as i64);
        let min = (s.extent + cand.extent) as i64;
        if dx * dx + dy * dy < min * min {
            return false;
        }
        if s.kind == cand.kind && s.color == cand.color {
            return false;
        }
    }
    true
}

fn sample_scene(rng: &mut Rng, n: usize) -> Option<Scene> {
    let background = *rng.pick(&Background::ALL);
    let mut shapes: Vec<Shape> = Vec::with_capacity(n);
    'shapes: for _ in 0..n {
        for _ in 0..60 {
            let extent = MIN_EXTENT + rng.below((MAX_EXTENT - MIN_EXTENT + 1) as usize) as i32;
            let span = (CANVAS as i32 - 2 * extent) as u64;
            let cand = Shape {
                kind: *rng.pick(&Kind::ALL),
                color: *rng.pick(&Color::ALL),
                cx: extent + rng.below(span as usize) as i32,
                cy: extent + rng.below(span as usize) as i32,
                extent,
            };
            if fits(&shapes, &cand, None) {
                shapes.push(cand);
                continue 'shapes;
            }
        }
        return None;
    }
    Some(Scene { background, shapes })
}

fn propose_edit(rng: &mut Rng, scene: &Scene, type_ix: usize) -> Option<Edit> {
    let shapes = &scene.shapes;
    match type_ix {
        0 => {
            let target = rng.below(shapes.len());
            let old = shapes[target];
            let choices: Vec<Color> = Color::ALL
                .into_iter()
                .filter(|&c| {
                    c != old.color
                        && !shapes.iter().any(|s| s.kind == old.kind && s.color == c)
                })
                .collect();
            if choices.is_empty() {
                return None;
            }
            Some(Edit::Recolor { target, to: *rng.pick(&choices) })
        }
        1 => {
            for _ in 0..30 {
                let extent = MIN_EXTENT + rng.below((MAX_EXTENT - MIN_EXTENT + 1) as usize) as i32;
                let span = (CANVAS as i32 - 2 * extent) as u64;
                let cand = Shape {
                    kind: *rng.pick(&Kind::ALL),
                    color: *rng.pick(&Color::ALL),
                    cx: extent + rng.below(span as usize) as i32,
                    cy: extent + rng.below(span as usize) as i32,
                    extent,
                };
                if fits(shapes, &cand, None) {
                    return Some(Edit::Add { shape: cand });
                }
            }
            None
        }
        2 => Some(Edit::Remove { target: rng.below(shapes.len()) }),
        3 => {
            let target = rng.below(shapes.len());
            let s = shapes[target];
            // Enumerate every cardinal step that lands in a different coarse
            // cell and keeps the scene valid, then pick among them.
            let mut feasible = Vec::new();
            for (dx, dy) in [(-1i32, 0i32), (1, 0), (0, -1), (0, 1)] {
                for shift in 6..=14 {
                    let cand =
                        Shape { cx: s.cx + dx * shift, cy: s.cy + dy * shift, ..s };
                    let moved_cell = cell_name(cand.cx, cand.cy) != cell_name(s.cx, s.cy);
                    if moved_cell && fits(shapes, &cand, Some(target)) {
                        feasible.push((dx * shift, dy * shift));
                    }
                }
            }
            if feasible.is_empty() {
                return None;
            }
            let &(dx, dy) = rng.pick(&feasible);
            Some(Edit::Move { target, dx, dy })
        }
        4 => {
            let target = rng.below(shapes.len());
            let s = shapes[target];
            let mut feasible = Vec::new();
            for delta in [-3i32, -2, -1, 1, 2, 3] {
                let cand = Shape { extent: s.extent + delta, ..s };
                if fits(shapes, &cand, Some(target)) {
                    feasible.push(cand.extent);
                }
            }
            if feasible.is_empty() {
                return None;
            }
            Some(Edit::Resize { target, to_extent: *rng.pick(&feasible) })
        }
        5 => {
            let target = rng.below(shapes.len());
            let s = shapes[target];
            let choices: Vec<Kind> = Kind::ALL
                .into_iter()
                .filter(|&k| {
                    k != s.kind && !shapes.iter().any(|t| t.kind == k && t.color == s.color)
                })
                .collect();
            if choices.is_empty() {
                return None;
            }
            Some(Edit::Replace { target, to_kind: *rng.pick(&choices) })
        }
        _ => unreachable!("edit type index {type_ix}"),
    }
}

fn try_sample(seed: u64, rng: &mut Rng, text_rng: &mut Rng) -> Result<Option<EditSample>> {
    let type_ix = rng.below(6);
    // Adding a fifth shape would break scene invariants, so "add" draws
    // source scenes with at most three.
    let max_n = if type_ix == 1 { MAX_SHAPES - 1 } else { MAX_SHAPES };
    let n = 1 + rng.below(max_n);
    let Some(scene_src) = sample_scene(rng, n) else {
        return Ok(None);
    };
    let Some(edit) = propose_edit(rng, &scene_src, type_ix) else {
        return Ok(None);
    };
    let scene_gt = edit.apply(&scene_src)?;
    let t_raw = grammar::rough_request(&scene_src, &edit, text_rng);
    let t_gt = grammar::precise_instruction(&scene_src, &scene_gt, &edit, text_rng);
    let i_src = scene_src.render();
    let i_gt = scene_gt.render();
    let mask = dilate(&pixel_diff(&i_src, &i_gt), 1);
    Ok(Some(EditSample { seed, edit, scene_src, scene_gt, t_raw, t_gt, i_src, i_gt, mask }))
}

/// Deterministically build the edit sample for a seed. Infeasible draws
/// (crowded scenes with no room to place or move) advance to a derived seed
/// and retry; the result is still a pure function of the input seed.
pub fn sample_edit(seed: u64) -> Result<EditSample> {
    for attempt in 0..32u64 {
        let s = seed ^ attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = Rng::stream(s, StreamKind::Scene, 0);
        let mut text_rng = Rng::stream(s, StreamKind::Scene, 1);
        if let Some(mut sample) = try_sample(seed, &mut rng, &mut text_rng)? {
            sample.seed = seed;
            return Ok(sample);
        }
    }
    Err(Error::scene(format!("seed {seed}: no feasible edit after 32 attempts")))
}
