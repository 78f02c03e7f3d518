use std::fmt;

use serde::{Deserialize, Serialize};

/// Fixed toy vocabulary; ids 0..=2 are the model's `[PAD]`, `[CLS]`, `[SEP]`.
pub const VOCABULARY: [&str; 40] = [
    "[PAD]", "[CLS]", "[SEP]", "[UNK]", // specials
    "circle", "square", "triangle", // shapes
    "red", "green", "blue", // colors
    "what", "color", "is", "the", "how", "many", "are", "there", "a", "shape", "leftmost", "?", "of", "object",
    "which", "in", "image", "any", "most", "left", "zero", "one", "two", "three", "four", "five", "yes", "no", "and",
    "or",
];

pub fn token_id(token: &str) -> Option<usize> {
    VOCABULARY.iter().position(|&t| t == token)
}

pub fn token_str(id: usize) -> Option<&'static str> {
    VOCABULARY.get(id).copied()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn token(self) -> usize {
        token_id(self.name()).expect("shape in vocabulary")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }
}

/// Answer classes: 3 colors, 3 shapes, counts `0..=max_regions`, yes, no.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Answer {
    Color(Color),
    Shape(Shape),
    Count(usize),
    Yes,
    No,
}

impl Answer {
    pub fn class_count(max_regions: usize) -> usize {
        6 + (max_regions + 1) + 2
    }

    pub fn class_index(self, max_regions: usize) -> usize {
        match self {
            Answer::Color(c) => c.index(),
            Answer::Shape(s) => 3 + s.index(),
            Answer::Count(n) => 6 + n,
            Answer::Yes => 7 + max_regions,
            Answer::No => 8 + max_regions,
        }
    }

    pub fn from_class_index(idx: usize, max_regions: usize) -> Option<Self> {
        Some(match idx {
            0..=2 => Answer::Color(Color::ALL[idx]),
            3..=5 => Answer::Shape(Shape::ALL[idx - 3]),
            i if i >= 6 && i <= 6 + max_regions => Answer::Count(i - 6),
            i if i == 7 + max_regions => Answer::Yes,
            i if i == 8 + max_regions => Answer::No,
            _ => return None,
        })
    }

    pub fn labels(max_regions: usize) -> Vec<String> {
        (0..Self::class_count(max_regions))
            .map(|i| Self::from_class_index(i, max_regions).expect("in range").to_string())
            .collect()
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Answer::Color(c) => f.write_str(c.name()),
            Answer::Shape(s) => f.write_str(s.name()),
            Answer::Count(n) => write!(f, "{n}"),
            Answer::Yes => f.write_str("yes"),
            Answer::No => f.write_str("no"),
        }
    }
}
