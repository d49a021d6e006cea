use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{token_id, word, SynthConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 200, 70],
            Color::Blue => [40, 80, 230],
            Color::Yellow => [235, 215, 40],
        }
    }
}

impl Size {
    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    pub fn words(self) -> &'static [&'static str] {
        match self {
            Relation::LeftOf => &["left", "of"],
            Relation::RightOf => &["right", "of"],
            Relation::Above => &["above"],
            Relation::Below => &["below"],
        }
    }

    /// Whether an object in cell `a` stands in this relation to one in `b`.
    pub fn holds(self, a: (usize, usize), b: (usize, usize)) -> bool {
        match self {
            Relation::LeftOf => a.1 < b.1,
            Relation::RightOf => a.1 > b.1,
            Relation::Above => a.0 < b.0,
            Relation::Below => a.0 > b.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    /// `(row, col)` in the 3x3 grid.
    pub cell: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expression {
    pub size: Option<Size>,
    pub color: Color,
    pub shape: Shape,
    pub relation: Option<(Relation, Color, Shape)>,
}

impl Expression {
    pub fn words(&self) -> Vec<&'static str> {
        let mut w = vec!["the"];
        if let Some(s) = self.size {
            w.push(s.word());
        }
        w.push(self.color.word());
        w.push(self.shape.word());
        if let Some((r, c, s)) = self.relation {
            w.extend_from_slice(r.words());
            w.extend_from_slice(&["the", c.word(), s.word()]);
        }
        w
    }

    pub fn text(&self) -> String {
        self.words().join(" ")
    }

    pub fn tokens(&self) -> Vec<u32> {
        self.words()
            .iter()
            .map(|w| token_id(w).expect("grammar words are in the vocabulary"))
            .collect()
    }

    /// Inverse of [`Expression::tokens`].
    pub fn parse(tokens: &[u32]) -> Result<Self> {
        let words: Vec<&str> = tokens
            .iter()
            .map(|t| word(*t).ok_or_else(|| Error::Parameter(format!("unknown token {t}"))))
            .collect::<Result<_>>()?;
        let err = || Error::Parameter(format!("not a grammar expression: {}", words.join(" ")));
        let color = |w: &str| [Color::Red, Color::Green, Color::Blue, Color::Yellow].into_iter().find(|c| c.word() == w);
        let shape = |w: &str| [Shape::Circle, Shape::Square, Shape::Triangle].into_iter().find(|s| s.word() == w);
        let mut i = 0;
        let mut next = || {
            let w = words.get(i).copied();
            i += 1;
            w
        };
        if next() != Some("the") {
            return Err(err());
        }
        let mut w = next().ok_or_else(err)?;
        let size = match w {
            "small" => Some(Size::Small),
            "large" => Some(Size::Large),
            _ => None,
        };
        if size.is_some() {
            w = next().ok_or_else(err)?;
        }
        let c = color(w).ok_or_else(err)?;
        let s = shape(next().ok_or_else(err)?).ok_or_else(err)?;
        let relation = match next() {
            None => None,
            Some(r) => {
                let rel = match r {
                    "left" | "right" => {
                        if next() != Some("of") {
                            return Err(err());
                        }
                        if r == "left" {
                            Relation::LeftOf
                        } else {
                            Relation::RightOf
                        }
                    }
                    "above" => Relation::Above,
                    "below" => Relation::Below,
                    _ => return Err(err()),
                };
                if next() != Some("the") {
                    return Err(err());
                }
                let c2 = color(next().ok_or_else(err)?).ok_or_else(err)?;
                let s2 = shape(next().ok_or_else(err)?).ok_or_else(err)?;
                if next().is_some() {
                    return Err(err());
                }
                Some((rel, c2, s2))
            }
        };
        Ok(Self {
            size,
            color: c,
            shape: s,
            relation,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub canvas: usize,
    pub objects: Vec<Object>,
    pub referent: usize,
    pub expression: Expression,
}

/// Indices of the objects the expression describes.
pub fn evaluate(objects: &[Object], e: &Expression) -> Vec<usize> {
    let local = |o: &Object| o.color == e.color && o.shape == e.shape && e.size.is_none_or(|s| s == o.size);
    (0..objects.len())
        .filter(|i| {
            let o = &objects[*i];
            local(o)
                && e.relation.is_none_or(|(r, c, s)| {
                    objects
                        .iter()
                        .enumerate()
                        .any(|(j, a)| j != *i && a.color == c && a.shape == s && r.holds(o.cell, a.cell))
                })
        })
        .collect()
}

fn unique(objects: &[Object], e: &Expression, referent: usize) -> bool {
    evaluate(objects, e) == [referent]
}

fn candidates(objects: &[Object], referent: usize) -> (Vec<Expression>, Vec<Expression>) {
    let o = objects[referent];
    let plain = [None, Some(o.size)]
        .into_iter()
        .map(|size| Expression {
            size,
            color: o.color,
            shape: o.shape,
            relation: None,
        })
        .filter(|e| unique(objects, e, referent))
        .collect();
    let mut relational = Vec::new();
    for (j, a) in objects.iter().enumerate() {
        if j == referent {
            continue;
        }
        for r in Relation::ALL {
            if !r.holds(o.cell, a.cell) {
                continue;
            }
            for size in [None, Some(o.size)] {
                let e = Expression {
                    size,
                    color: o.color,
                    shape: o.shape,
                    relation: Some((r, a.color, a.shape)),
                };
                if unique(objects, &e, referent) && !relational.contains(&e) {
                    relational.push(e);
                    break;
                }
            }
        }
    }
    (plain, relational)
}

fn random_object<R: Rng>(rng: &mut R, cfg: &SynthConfig, cell: (usize, usize)) -> Object {
    Object {
        shape: *cfg.shapes.choose(rng).expect("validated"),
        color: *cfg.colors.choose(rng).expect("validated"),
        size: if rng.random_bool(0.5) { Size::Small } else { Size::Large },
        cell,
    }
}

/// Sample scenes until the referent has a unique description. The rng is
/// the per-sample stream.
pub fn generate_scene(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    for _ in 0..10_000 {
        let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
        let mut cells: Vec<(usize, usize)> = (0..9).map(|i| (i / 3, i % 3)).collect();
        let mut objects = Vec::with_capacity(n);
        for _ in 0..n {
            let cell = cells.swap_remove(rng.random_range(0..cells.len()));
            objects.push(random_object(rng, cfg, cell));
        }
        if n >= 2 && rng.random_bool(cfg.hard_negative_prob) {
            // Distractor sharing two of the referent's three attributes.
            let mut d = objects[0];
            d.cell = objects[1].cell;
            match rng.random_range(0..3) {
                0 => d.shape = *cfg.shapes.choose(rng).expect("validated"),
                1 => d.color = *cfg.colors.choose(rng).expect("validated"),
                _ => d.size = if d.size == Size::Small { Size::Large } else { Size::Small },
            }
            objects[1] = d;
        }
        let referent = rng.random_range(0..n);
        let (plain, relational) = candidates(&objects, referent);
        let use_relation = !relational.is_empty() && (plain.is_empty() || rng.random_bool(cfg.relation_prob));
        let expression = if use_relation {
            relational.choose(rng).expect("nonempty").clone()
        } else if let Some(e) = plain.into_iter().next() {
            e
        } else {
            continue;
        };
        return Ok(SceneSpec {
            canvas: cfg.canvas,
            objects,
            referent,
            expression,
        });
    }
    Err(Error::Parameter(
        "no scene with a uniquely describable referent found; widen shapes or colors".into(),
    ))
}
