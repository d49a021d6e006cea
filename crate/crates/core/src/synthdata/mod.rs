//! Synthetic referring-segmentation triplets: coloured shapes on a 3x3 grid,
//! a templated expression that singles out one of them, and its mask.

pub mod dataset;
pub mod render;
pub mod scene;

use serde::{Deserialize, Serialize};

pub use dataset::{generate_split, load_dataset, Dataset, Sample, Split};
pub use render::{render, Triplet};
pub use scene::{evaluate, generate_scene, Color, Expression, Object, Relation, SceneSpec, Shape, Size};

use crate::error::{Error, Result};

/// Fixed vocabulary; token ids are positions in this list.
pub const VOCABULARY: [&str; 64] = [
    "<pad>", "<unk>", "the", "a", "small", "large", "red", "green", "blue", "yellow", "circle",
    "square", "triangle", "left", "right", "of", "above", "below", "and", "that", "is", "to",
    "object", "shape", "one", "next", "near", "big", "tiny", "orange", "purple", "white", "black",
    "gray", "pink", "brown", "top", "bottom", "middle", "center", "corner", "upper", "lower",
    "between", "on", "in", "with", "first", "second", "third", "other", "same", "color", "size",
    "it", "this", "find", "segment", "show", "me", "please", "thing", "item", "piece",
];

pub fn token_id(word: &str) -> Result<u32> {
    VOCABULARY
        .iter()
        .position(|w| *w == word)
        .map(|i| i as u32)
        .ok_or_else(|| Error::Parameter(format!("word `{word}` is not in the vocabulary")))
}

pub fn word(id: u32) -> Option<&'static str> {
    VOCABULARY.get(id as usize).copied()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Square canvas side in pixels; a multiple of 32 up to 512.
    pub canvas: usize,
    pub shapes: Vec<Shape>,
    pub colors: Vec<Color>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub hard_negative_prob: f64,
    /// Probability of describing the referent through a relation when one
    /// identifies it uniquely.
    pub relation_prob: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Object centres and extents are rounded to multiples of this many
    /// pixels.
    pub snap: usize,
    pub background: [u8; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            canvas: 64,
            shapes: vec![Shape::Circle, Shape::Square, Shape::Triangle],
            colors: vec![Color::Red, Color::Green, Color::Blue, Color::Yellow],
            min_objects: 1,
            max_objects: 4,
            hard_negative_prob: 0.5,
            relation_prob: 0.3,
            val_fraction: 0.15,
            test_fraction: 0.15,
            snap: 4,
            background: [40, 40, 40],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(format!("data: {m}")));
        if self.shapes.is_empty() || self.colors.is_empty() {
            return bad("at least one shape and one color are required".into());
        }
        if self.canvas < 32 || self.canvas > 512 || self.canvas % 32 != 0 {
            return bad(format!("canvas {} must be a multiple of 32 in 32..=512", self.canvas));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > 9 {
            return bad(format!(
                "need 1 <= min_objects <= max_objects <= 9, got {}..={}",
                self.min_objects, self.max_objects
            ));
        }
        for (name, p) in [
            ("hard_negative_prob", self.hard_negative_prob),
            ("relation_prob", self.relation_prob),
            ("val_fraction", self.val_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if self.val_fraction + self.test_fraction > 1.0 {
            return bad("val_fraction + test_fraction exceeds 1".into());
        }
        if self.snap == 0 {
            return bad("snap must be positive".into());
        }
        if self.colors.iter().any(|c| c.rgb() == self.background) {
            return bad("background must differ from every object color".into());
        }
        Ok(())
    }

    fn round(&self, x: f64) -> i64 {
        let s = self.snap as f64;
        ((x / s).round() * s) as i64
    }

    /// Pixel centre of grid cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (i64, i64) {
        let cell = self.canvas as f64 / 3.0;
        let c = |i: usize| self.round(cell * (i as f64 + 0.5));
        (c(row), c(col))
    }

    /// Half side length of an object of the given size.
    pub fn half_extent(&self, size: Size) -> i64 {
        let large = self.round(self.canvas as f64 / 3.0 * 0.4).max(self.snap as i64);
        match size {
            Size::Large => large,
            Size::Small => (large / 2).max(1),
        }
    }
}
