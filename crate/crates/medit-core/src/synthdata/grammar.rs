//! The two instruction grammars.
//!
//! Rough requests imitate how people actually ask: they lean on pronouns and
//! drop whatever the picture already makes obvious (color when the kind is
//! unique, position almost always). Precise instructions spell out the
//! target by color, kind, and coarse cell, state the change exactly, and add
//! invariants the decoder should hold (background, other shapes, style).
//! Every word in both grammars is covered by the core vocabulary.

use crate::mml::OptimizedInstruction;
use crate::tensor::rng::Rng;

use super::{cell_name, Edit, Scene, Shape};

fn pick_string(rng: &mut Rng, opts: &[String]) -> String {
    rng.pick(opts).clone()
}

/// How a rough request points at a shape. Deliberately under-specified: with
/// several same-kind shapes it degrades to a bare pronoun, and even a unique
/// kind is named without its position.
fn referent(scene: &Scene, target: usize, rng: &mut Rng) -> String {
    let s = &scene.shapes[target];
    let same_kind = scene.shapes.iter().filter(|t| t.kind == s.kind).count();
    let mut opts: Vec<String> = Vec::new();
    if same_kind == 1 {
        opts.push(format!("the {}", s.kind.word()));
        opts.push(format!("that {}", s.kind.word()));
        opts.push(format!("the {} one", s.color.word()));
        if scene.shapes.len() == 1 {
            opts.push("it".to_string());
            opts.push("the shape".to_string());
        }
    } else {
        opts.push("it".to_string());
        opts.push("that one".to_string());
        opts.push("that thing".to_string());
    }
    pick_string(rng, &opts)
}

fn direction_word(dx: i32, dy: i32) -> &'static str {
    if dx < 0 {
        "left"
    } else if dx > 0 {
        "right"
    } else if dy < 0 {
        "up"
    } else {
        "down"
    }
}

/// The ambiguous user-style request for an edit.
pub fn rough_request(scene: &Scene, edit: &Edit, rng: &mut Rng) -> String {
    match *edit {
        Edit::Recolor { target, to } => {
            let (r, c) = (referent(scene, target, rng), to.word());
            pick_string(
                rng,
                &[
                    format!("make {r} {c}"),
                    format!("turn {r} {c}"),
                    format!("change {r} to {c}"),
                    format!("paint {r} {c}"),
                    format!("color {r} {c}"),
                ],
            )
        }
        Edit::Add { shape } => {
            let (c, k) = (shape.color.word(), shape.kind.word());
            pick_string(
                rng,
                &[
                    format!("add a {c} {k}"),
                    format!("draw a {c} {k}"),
                    format!("put a {c} {k} somewhere"),
                    format!("insert a {c} {k}"),
                    format!("place a new {c} {k}"),
                ],
            )
        }
        Edit::Remove { target } => {
            let r = referent(scene, target, rng);
            pick_string(
                rng,
                &[
                    format!("remove {r}"),
                    format!("delete {r}"),
                    format!("erase {r}"),
                    format!("get rid of {r}"),
                    format!("drop {r}"),
                ],
            )
        }
        Edit::Move { target, dx, dy } => {
            let (r, d) = (referent(scene, target, rng), direction_word(dx, dy));
            pick_string(
                rng,
                &[
                    format!("move {r} {d}"),
                    format!("shift {r} {d}"),
                    format!("push {r} {d}"),
                    format!("slide {r} {d}"),
                    format!("nudge {r} {d}"),
                ],
            )
        }
        Edit::Resize { target, to_extent } => {
            let r = referent(scene, target, rng);
            if to_extent > scene.shapes[target].extent {
                pick_string(
                    rng,
                    &[
                        format!("make {r} bigger"),
                        format!("grow {r}"),
                        format!("enlarge {r}"),
                        format!("scale {r} up"),
                    ],
                )
            } else {
                pick_string(
                    rng,
                    &[
                        format!("make {r} smaller"),
                        format!("shrink {r}"),
                        format!("reduce {r}"),
                        format!("scale {r} down"),
                    ],
                )
            }
        }
        Edit::Replace { target, to_kind } => {
            let (r, k) = (referent(scene, target, rng), to_kind.word());
            pick_string(
                rng,
                &[
                    format!("replace {r} with a {k}"),
                    format!("turn {r} into a {k}"),
                    format!("swap {r} for a {k}"),
                    format!("change {r} into a {k}"),
                    format!("convert {r} to a {k}"),
                ],
            )
        }
    }
}

fn full_name(s: &Shape) -> String {
    format!("{} {}", s.color.word(), s.kind.word())
}

fn at_cell(s: &Shape) -> String {
    cell_name(s.cx, s.cy)
}

/// The precise instruction: what to change, where, and what to keep.
pub fn precise_instruction(
    src: &Scene,
    _gt: &Scene,
    edit: &Edit,
    rng: &mut Rng,
) -> OptimizedInstruction {
    let mut pos: Vec<String> = Vec::new();
    let mut neg: Vec<String> = Vec::new();
    match *edit {
        Edit::Recolor { target, to } => {
            let s = &src.shapes[target];
            pos.push(format!("recolor the {}", full_name(s)));
            pos.push(format!("{} at {}", s.kind.word(), at_cell(s)));
            pos.push(format!("set color to {}", to.word()));
            neg.push(full_name(s));
        }
        Edit::Add { shape } => {
            pos.push(format!("add a {}", full_name(&shape)));
            pos.push(format!("place at {}", at_cell(&shape)));
            pos.push(format!("size {}", shape.extent));
        }
        Edit::Remove { target } => {
            let s = &src.shapes[target];
            pos.push(format!("remove the {}", full_name(s)));
            pos.push(format!("{} at {}", s.kind.word(), at_cell(s)));
            pos.push("fill area with background".to_string());
            neg.push(full_name(s));
        }
        Edit::Move { target, dx, dy } => {
            let s = &src.shapes[target];
            let moved = Shape { cx: s.cx + dx, cy: s.cy + dy, ..*s };
            pos.push(format!("move the {}", full_name(s)));
            pos.push(format!("from {} to {}", at_cell(s), at_cell(&moved)));
            pos.push(format!("direction {}", direction_word(dx, dy)));
            neg.push(format!("{} at {}", s.kind.word(), at_cell(s)));
        }
        Edit::Resize { target, to_extent } => {
            let s = &src.shapes[target];
            pos.push(format!("resize the {}", full_name(s)));
            pos.push(format!("{} at {}", s.kind.word(), at_cell(s)));
            pos.push(format!("set size {to_extent}"));
            pos.push(format!(
                "make it {}",
                if to_extent > s.extent { "bigger" } else { "smaller" }
            ));
            neg.push(format!("size {}", s.extent));
        }
        Edit::Replace { target, to_kind } => {
            let s = &src.shapes[target];
            pos.push(format!("replace the {}", full_name(s)));
            pos.push(format!("with a {} {}", s.color.word(), to_kind.word()));
            pos.push(format!("at {}", at_cell(s)));
            neg.push(full_name(s));
        }
    }

    let mut tails: Vec<String> = Vec::new();
    let others = match edit {
        Edit::Add { .. } => !src.shapes.is_empty(),
        _ => src.shapes.len() > 1,
    };
    if others {
        tails.push("keep other shapes unchanged".to_string());
    }
    tails.push(format!("keep the background {}", src.background.word()));
    tails.push("preserve scene layout".to_string());
    if !matches!(edit, Edit::Add { .. }) {
        tails.push("no new shapes".to_string());
    }
    tails.push("sharp exact pixel borders".to_string());
    tails.push("flat solid color".to_string());

    let want = 5 + rng.below(3);
    for t in tails {
        if pos.len() >= want {
            break;
        }
        pos.push(t);
    }
    OptimizedInstruction { optimized_prompt: pos, negative_prompt: neg }
}
