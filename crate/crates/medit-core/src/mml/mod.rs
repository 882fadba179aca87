//! Instruction language model: reads an image plus a rough edit request and
//! emits a structured, precise instruction together with a visual-insight
//! embedding for the image decoder.

pub mod model;
pub mod vocab;

pub use model::{ForwardOut, Generated, MmlModel, Prompt};
pub use vocab::{OptimizedInstruction, Vocabulary};
