//! Closed word-level vocabulary shared by the instruction language model and
//! the synthetic-instruction grammars.
//!
//! Canonical string form: lowercase words separated by single spaces, with a
//! comma attached to the preceding word ("red circle, top left"). Encoding
//! splits commas into their own token; decoding re-attaches them, so
//! decode(encode(s)) == s for canonical strings and encode(decode(ids)) == ids
//! for any valid id sequence.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const OPT: &str = "<opt>";
pub const NEG: &str = "<neg>";
pub const COMMA: &str = ",";

/// Every word the system can read or emit. Grammars draw from this list;
/// anything outside it is a hard error, never a silent unknown.
const WORDS: &[&str] = &[
    // field markers and punctuation
    PAD, BOS, EOS, OPT, NEG, COMMA,
    // digits
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
    // shape colors and backgrounds
    "red", "green", "blue", "yellow", "purple", "orange", "cyan", "pink",
    "black", "gray", "white",
    // shape kinds and generic referents
    "circle", "square", "triangle", "circles", "squares", "triangles",
    "shape", "shapes", "thing", "object", "one", "item", "figure",
    // spatial terms
    "top", "bottom", "left", "right", "center", "middle", "upper", "lower",
    "side", "corner", "edge", "up", "down", "above", "below", "beside",
    "near", "toward", "towards", "away", "across", "beneath", "over",
    "under", "next",
    // sizes
    "tiny", "small", "medium", "large", "big", "bigger", "smaller",
    // edit verbs
    "make", "change", "turn", "recolor", "paint", "color", "add", "draw",
    "put", "place", "insert", "remove", "delete", "erase", "drop", "get",
    "rid", "move", "shift", "push", "slide", "nudge", "resize", "shrink",
    "grow", "enlarge", "expand", "reduce", "replace", "swap", "exchange",
    "convert", "modify", "adjust", "alter", "repaint", "redraw", "relocate",
    "reposition", "transform", "switch", "scale", "stretch", "widen",
    "narrow", "bump",
    // articles and glue
    "the", "a", "an", "it", "that", "this", "to", "into", "with", "for",
    "of", "at", "in", "on", "and", "or", "by", "from", "there", "somewhere",
    "anywhere", "now", "please", "very", "quite", "slightly", "somewhat",
    "bit", "little", "much", "more", "less", "them", "they", "both", "each",
    "any", "some", "is", "be", "its",
    // precise-instruction nouns and qualifiers
    "set", "new", "keep", "other", "unchanged", "same", "scene", "layout",
    "background", "no", "exact", "pixel", "pixels", "preserve", "fill",
    "area", "region", "position", "size", "direction", "empty", "canvas",
    "image", "everything", "else", "all", "only", "borders", "sharp",
    "flat", "solid", "spot", "location", "destination", "origin", "target",
    "original", "copy", "border", "outline", "interior", "body",
];

#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// The fixed vocabulary used everywhere in the system.
    pub fn core() -> Self {
        let words: Vec<String> = WORDS.iter().map(|s| s.to_string()).collect();
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            let prev = index.insert(w.clone(), i as u32);
            debug_assert!(prev.is_none(), "duplicate vocab word {w}");
        }
        Vocabulary { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::vocab(format!("unknown token {word:?}")))
    }

    pub fn word(&self, id: u32) -> Result<&str> {
        self.words
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::vocab(format!("token id {id} out of range")))
    }

    pub fn pad(&self) -> u32 {
        self.index[PAD]
    }

    pub fn bos(&self) -> u32 {
        self.index[BOS]
    }

    pub fn eos(&self) -> u32 {
        self.index[EOS]
    }

    pub fn opt_marker(&self) -> u32 {
        self.index[OPT]
    }

    pub fn neg_marker(&self) -> u32 {
        self.index[NEG]
    }

    pub fn comma(&self) -> u32 {
        self.index[COMMA]
    }

    /// Lowercased whitespace split with commas lifted into their own token.
    /// Unknown words are errors.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = Vec::new();
        for raw in text.split_whitespace() {
            let lower = raw.to_lowercase();
            let mut rest = lower.as_str();
            while let Some(stripped) = rest.strip_suffix(',') {
                rest = stripped;
            }
            let commas = lower.len() - rest.len();
            if !rest.is_empty() {
                ids.push(self.id(rest)?);
            }
            for _ in 0..commas {
                ids.push(self.comma());
            }
        }
        Ok(ids)
    }

    /// Inverse of `encode` for canonical sequences: words joined by single
    /// spaces, commas attached to the preceding word.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let w = self.word(id)?;
            if w == COMMA {
                out.push(',');
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(w);
            }
        }
        Ok(out)
    }
}

/// An edit instruction in its structured form: a list of short positive
/// phrases plus a list of content to suppress.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimizedInstruction {
    pub optimized_prompt: Vec<String>,
    pub negative_prompt: Vec<String>,
}

impl OptimizedInstruction {
    /// Flat token form: <opt> p1 , p2 , ... [<neg> n1 , n2 , ...]
    /// No sequence markers; callers add BOS/EOS when assembling sequences.
    pub fn to_token_ids(&self, vocab: &Vocabulary) -> Result<Vec<u32>> {
        let mut ids = vec![vocab.opt_marker()];
        push_phrases(&mut ids, &self.optimized_prompt, vocab)?;
        if !self.negative_prompt.is_empty() {
            ids.push(vocab.neg_marker());
            push_phrases(&mut ids, &self.negative_prompt, vocab)?;
        }
        Ok(ids)
    }

    /// Parse a decoded token sequence back into fields. Never fails on
    /// well-formed ids: sequences missing the leading marker come back as a
    /// single comma-split positive prompt with nothing suppressed.
    pub fn from_token_ids(vocab: &Vocabulary, ids: &[u32]) -> Result<Self> {
        let specials = [vocab.pad(), vocab.bos(), vocab.eos()];
        let clean: Vec<u32> =
            ids.iter().copied().filter(|id| !specials.contains(id)).collect();
        let (pos_ids, neg_ids) = match clean.first() {
            Some(&m) if m == vocab.opt_marker() => {
                let body = &clean[1..];
                match body.iter().position(|&id| id == vocab.neg_marker()) {
                    Some(cut) => (&body[..cut], &body[cut + 1..]),
                    None => (body, &[][..]),
                }
            }
            _ => (&clean[..], &[][..]),
        };
        Ok(OptimizedInstruction {
            optimized_prompt: split_phrases(vocab, pos_ids)?,
            negative_prompt: split_phrases(vocab, neg_ids)?,
        })
    }

    /// Positive phrases joined into one caption line.
    pub fn caption(&self) -> String {
        self.optimized_prompt.join(", ")
    }
}

fn push_phrases(ids: &mut Vec<u32>, phrases: &[String], vocab: &Vocabulary) -> Result<()> {
    for (i, p) in phrases.iter().enumerate() {
        if i > 0 {
            ids.push(vocab.comma());
        }
        let toks = vocab.encode(p)?;
        if toks.is_empty() {
            return Err(Error::contract("empty phrase in instruction"));
        }
        if toks.contains(&vocab.comma()) {
            return Err(Error::contract(format!("phrase {p:?} contains a comma")));
        }
        ids.extend(toks);
    }
    Ok(())
}

fn split_phrases(vocab: &Vocabulary, ids: &[u32]) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut cur: Vec<u32> = Vec::new();
    for &id in ids {
        if id == vocab.comma() {
            if !cur.is_empty() {
                out.push(vocab.decode(&cur)?);
                cur.clear();
            }
        } else if id == vocab.opt_marker() || id == vocab.neg_marker() {
            continue;
        } else {
            cur.push(id);
        }
    }
    if !cur.is_empty() {
        out.push(vocab.decode(&cur)?);
    }
    Ok(out)
}
