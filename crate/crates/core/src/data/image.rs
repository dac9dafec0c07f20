use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{number_word, PATCHES_PER_CELL, TEXT_VOCAB_SIZE};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Star,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl Color {
    pub const ALL: [Color; 6] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Purple, Color::Orange];

    pub fn word(self) -> &'static str {
        ["red", "green", "blue", "yellow", "purple", "orange"][self as usize]
    }
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Star];

    pub fn word(self) -> &'static str {
        ["circle", "square", "triangle", "star"][self as usize]
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn word(self) -> &'static str {
        ["small", "large"][self as usize]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
}

impl Object {
    /// "large red circle"
    pub fn phrase(&self) -> String {
        format!("{} {} {}", self.size.word(), self.color.word(), self.shape.word())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Side length `G`; at most 4 so every count has a number word.
    pub grid_size: usize,
    /// Probability that a cell holds an object.
    pub occupancy: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            grid_size: 4,
            occupancy: 0.35,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.grid_size) {
            return Err(Error::Config {
                field: "data.grid_size".into(),
                msg: "must be between 1 and 4".into(),
            });
        }
        if !(self.occupancy > 0.0 && self.occupancy <= 1.0) {
            return Err(Error::Config {
                field: "data.occupancy".into(),
                msg: "must be in (0, 1]".into(),
            });
        }
        Ok(())
    }
}

/// A `G×G` grid of optional objects, row-major. Serializes as a list of
/// rows whose cells are `null` or an object.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<Option<Object>>>", into = "Vec<Vec<Option<Object>>>")]
pub struct SymbolicImage {
    pub grid_size: usize,
    pub cells: Vec<Option<Object>>,
}

impl SymbolicImage {
    pub fn from_rows(rows: Vec<Vec<Option<Object>>>) -> Result<Self> {
        let g = rows.len();
        if g == 0 || rows.iter().any(|r| r.len() != g) {
            return Err(Error::Data("grid must be square and non-empty".into()));
        }
        let img = Self {
            grid_size: g,
            cells: rows.into_iter().flatten().collect(),
        };
        if img.objects().next().is_none() {
            return Err(Error::Data("grid has no objects".into()));
        }
        Ok(img)
    }

    pub fn rows(&self) -> Vec<Vec<Option<Object>>> {
        self.cells.chunks(self.grid_size).map(<[_]>::to_vec).collect()
    }

    pub fn get(&self, row: usize, col: usize) -> Option<Object> {
        self.cells[row * self.grid_size + col]
    }

    /// `(row, col, object)` for every occupied cell, row-major.
    pub fn objects(&self) -> impl Iterator<Item = (usize, usize, Object)> + '_ {
        let g = self.grid_size;
        self.cells
            .iter()
            .enumerate()
            .filter_map(move |(i, c)| c.map(|o| (i / g, i % g, o)))
    }

    /// Two patch tokens per cell, row-major, in patch-local ids.
    pub fn patch_tokens(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.cells.len() * PATCHES_PER_CELL);
        for cell in &self.cells {
            match cell {
                Some(o) => {
                    out.push(o.color as usize);
                    out.push(7 + o.shape as usize * 2 + o.size as usize);
                }
                None => {
                    out.push(6);
                    out.push(15);
                }
            }
        }
        out
    }

    /// Patch tokens shifted into the model's shared id space.
    pub fn payload(&self) -> Vec<usize> {
        self.patch_tokens().into_iter().map(|t| TEXT_VOCAB_SIZE + t).collect()
    }

    /// Exhaustive caption: one clause per object, row-major.
    pub fn caption(&self) -> String {
        let clauses: Vec<String> = self
            .objects()
            .map(|(r, c, o)| format!("a {} at row {} column {}", o.phrase(), number_word(r + 1), number_word(c + 1)))
            .collect();
        format!("{} .", clauses.join(" ; "))
    }

    /// Sorted `(shape, color)` multiset.
    pub fn multiset(&self) -> Vec<(Shape, Color)> {
        let mut m: Vec<_> = self.objects().map(|(_, _, o)| (o.shape, o.color)).collect();
        m.sort();
        m
    }
}

impl TryFrom<Vec<Vec<Option<Object>>>> for SymbolicImage {
    type Error = Error;

    fn try_from(rows: Vec<Vec<Option<Object>>>) -> Result<Self> {
        Self::from_rows(rows)
    }
}

impl From<SymbolicImage> for Vec<Vec<Option<Object>>> {
    fn from(img: SymbolicImage) -> Self {
        img.rows()
    }
}

/// Image drawn from a generator already positioned on its own stream.
pub fn gen_image_with(rng: &mut ChaCha8Rng, cfg: &GridConfig) -> SymbolicImage {
    let n = cfg.grid_size * cfg.grid_size;
    let mut cells: Vec<Option<Object>> = (0..n)
        .map(|_| rng.random_bool(cfg.occupancy).then(|| random_object(rng)))
        .collect();
    if cells.iter().all(Option::is_none) {
        let i = rng.random_range(0..n);
        cells[i] = Some(random_object(rng));
    }
    SymbolicImage {
        grid_size: cfg.grid_size,
        cells,
    }
}

pub fn gen_image(seed: u64, cfg: &GridConfig) -> SymbolicImage {
    gen_image_with(&mut ChaCha8Rng::seed_from_u64(seed), cfg)
}

/// `count` images on independent streams of `seed`, ids `{prefix}{i:06}`.
pub fn gen_images(seed: u64, count: usize, cfg: &GridConfig, prefix: &str) -> Vec<(String, SymbolicImage)> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            (format!("{prefix}{i:06}"), gen_image_with(&mut rng, cfg))
        })
        .collect()
}

fn random_object(rng: &mut ChaCha8Rng) -> Object {
    Object {
        shape: Shape::ALL[rng.random_range(0..Shape::ALL.len())],
        color: Color::ALL[rng.random_range(0..Color::ALL.len())],
        size: Size::ALL[rng.random_range(0..Size::ALL.len())],
    }
}
