use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{gen_image_with, Color, GridConfig, Shape, SymbolicImage};
use super::number_word;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    MultiTurn,
    SingleTurn,
    SingleTurnSplit,
    Description,
}

impl Format {
    pub const ALL: [Format; 4] = [Format::MultiTurn, Format::SingleTurn, Format::SingleTurnSplit, Format::Description];

    pub fn name(self) -> &'static str {
        match self {
            Format::MultiTurn => "multi_turn",
            Format::SingleTurn => "single_turn",
            Format::SingleTurnSplit => "single_turn_split",
            Format::Description => "description",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }
}

/// Question template families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Attribute,
    Count,
    Spatial,
    Compare,
    Gist,
    Description,
}

impl Family {
    const QUESTIONS: [Family; 5] = [Family::Attribute, Family::Count, Family::Spatial, Family::Compare, Family::Gist];
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Turn {
    pub family: Family,
    pub question: String,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dialogue {
    pub format: Format,
    pub turns: Vec<Turn>,
}

/// One dataset line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub grid: SymbolicImage,
    pub turns: Vec<Turn>,
    pub format: Format,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub count: usize,
    pub format: Format,
    #[serde(flatten)]
    pub grid: GridConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 64,
            format: Format::MultiTurn,
            grid: GridConfig::default(),
        }
    }
}

const MIN_TURNS: usize = 3;
const MAX_TURNS: usize = 5;

fn pick<T: Copy>(rng: &mut ChaCha8Rng, xs: &[T]) -> T {
    xs[rng.random_range(0..xs.len())]
}

fn cell_words(r: usize, c: usize) -> String {
    format!("row {} column {}", number_word(r + 1), number_word(c + 1))
}

fn yes_no(b: bool) -> String {
    if b { "yes" } else { "no" }.into()
}

fn attribute(img: &SymbolicImage, rng: &mut ChaCha8Rng) -> Option<Turn> {
    let objs: Vec<_> = img.objects().collect();
    let (r, c, o) = pick(rng, &objs);
    let (kind, answer) = pick(rng, &[("color", o.color.word()), ("shape", o.shape.word()), ("size", o.size.word())]);
    Some(Turn {
        family: Family::Attribute,
        question: format!("what {kind} is the object in {} ?", cell_words(r, c)),
        answer: answer.into(),
    })
}

fn count(img: &SymbolicImage, rng: &mut ChaCha8Rng) -> Option<Turn> {
    let (subject, n) = match rng.random_range(0..3) {
        0 => {
            let col = pick(rng, &Color::ALL);
            (format!("{} objects", col.word()), img.objects().filter(|o| o.2.color == col).count())
        }
        1 => {
            let s = pick(rng, &Shape::ALL);
            (format!("{} objects", s.word()), img.objects().filter(|o| o.2.shape == s).count())
        }
        _ => ("objects".to_string(), img.objects().count()),
    };
    Some(Turn {
        family: Family::Count,
        question: format!("how many {subject} are there ?"),
        answer: number_word(n).into(),
    })
}

/// Objects named by "color shape" must be unambiguous within the image.
fn spatial(img: &SymbolicImage, rng: &mut ChaCha8Rng) -> Option<Turn> {
    let objs: Vec<_> = img.objects().collect();
    let named: Vec<_> = objs
        .iter()
        .copied()
        .filter(|a| objs.iter().filter(|b| b.2.color == a.2.color && b.2.shape == a.2.shape).count() == 1)
        .collect();
    if named.len() < 2 {
        return None;
    }
    let i = rng.random_range(0..named.len());
    let mut j = rng.random_range(0..named.len() - 1);
    if j >= i {
        j += 1;
    }
    let (a, b) = (named[i], named[j]);
    let (rel, holds) = pick(
        rng,
        &[("left of", a.1 < b.1), ("right of", a.1 > b.1), ("above", a.0 < b.0), ("below", a.0 > b.0)],
    );
    Some(Turn {
        family: Family::Spatial,
        question: format!(
            "is the {} {} {rel} the {} {} ?",
            a.2.color.word(),
            a.2.shape.word(),
            b.2.color.word(),
            b.2.shape.word()
        ),
        answer: yes_no(holds),
    })
}

fn compare(img: &SymbolicImage, rng: &mut ChaCha8Rng) -> Option<Turn> {
    let objs: Vec<_> = img.objects().collect();
    if objs.len() < 2 {
        return None;
    }
    let i = rng.random_range(0..objs.len());
    let mut j = rng.random_range(0..objs.len() - 1);
    if j >= i {
        j += 1;
    }
    let (a, b) = (objs[i], objs[j]);
    let (kind, same) = pick(
        rng,
        &[("color", a.2.color == b.2.color), ("shape", a.2.shape == b.2.shape), ("size", a.2.size == b.2.size)],
    );
    Some(Turn {
        family: Family::Compare,
        question: format!(
            "do the objects in {} and {} have the same {kind} ?",
            cell_words(a.0, a.1),
            cell_words(b.0, b.1)
        ),
        answer: yes_no(same),
    })
}

/// Most frequent color or shape; ties go to the earlier one in declaration
/// order.
fn gist(img: &SymbolicImage, rng: &mut ChaCha8Rng) -> Option<Turn> {
    let (kind, answer) = if rng.random_bool(0.5) {
        let best = Color::ALL
            .iter()
            .rev()
            .max_by_key(|c| img.objects().filter(|o| o.2.color == **c).count())
            .unwrap();
        ("color", best.word())
    } else {
        let best = Shape::ALL
            .iter()
            .rev()
            .max_by_key(|s| img.objects().filter(|o| o.2.shape == **s).count())
            .unwrap();
        ("shape", best.word())
    };
    Some(Turn {
        family: Family::Gist,
        question: format!("what is the most common {kind} ?"),
        answer: answer.into(),
    })
}

fn ask(family: Family, img: &SymbolicImage, rng: &mut ChaCha8Rng) -> Option<Turn> {
    match family {
        Family::Attribute => attribute(img, rng),
        Family::Count => count(img, rng),
        Family::Spatial => spatial(img, rng),
        Family::Compare => compare(img, rng),
        Family::Gist => gist(img, rng),
        Family::Description => Some(Turn {
            family,
            question: "describe the image .".into(),
            answer: img.caption(),
        }),
    }
}

fn multi_turn(img: &SymbolicImage, rng: &mut ChaCha8Rng) -> Vec<Turn> {
    let target = rng.random_range(MIN_TURNS..=MAX_TURNS);
    let mut families = Family::QUESTIONS.to_vec();
    families.shuffle(rng);
    // Attribute, count and gist always apply, so at least three turns come out.
    families.into_iter().filter_map(|f| ask(f, img, rng)).take(target).collect()
}

/// Dialogue about `img`. `SingleTurnSplit` yields the multi-turn turns; use
/// [`split_turns`] to emit them as separate records.
pub fn gen_dialogue(img: &SymbolicImage, format: Format, seed: u64) -> Dialogue {
    gen_dialogue_with(img, format, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn gen_dialogue_with(img: &SymbolicImage, format: Format, rng: &mut ChaCha8Rng) -> Dialogue {
    let turns = match format {
        Format::MultiTurn | Format::SingleTurnSplit => multi_turn(img, rng),
        Format::SingleTurn => loop {
            if let Some(t) = ask(pick(rng, &Family::QUESTIONS), img, rng) {
                break vec![t];
            }
        },
        Format::Description => vec![ask(Family::Description, img, rng).unwrap()],
    };
    Dialogue { format, turns }
}

/// One single-turn record per turn, ids suffixed `.0`, `.1`, …
pub fn split_turns(id: &str, img: &SymbolicImage, turns: &[Turn]) -> Vec<Record> {
    turns
        .iter()
        .enumerate()
        .map(|(i, t)| Record {
            id: format!("{id}.{i}"),
            grid: img.clone(),
            turns: vec![t.clone()],
            format: Format::SingleTurnSplit,
        })
        .collect()
}

/// The full corpus for `cfg`. Record `i` draws from its own stream of the
/// master seed, so records don't depend on each other.
pub fn gen_corpus(cfg: &DataConfig) -> Result<Vec<Record>> {
    cfg.grid.validate()?;
    if cfg.count == 0 {
        return Err(Error::Config {
            field: "data.count".into(),
            msg: "must be positive".into(),
        });
    }
    let mut out = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let img = gen_image_with(&mut rng, &cfg.grid);
        let d = gen_dialogue_with(&img, cfg.format, &mut rng);
        let id = format!("{i:06}");
        if cfg.format == Format::SingleTurnSplit {
            out.extend(split_turns(&id, &img, &d.turns));
        } else {
            out.push(Record {
                id,
                grid: img,
                turns: d.turns,
                format: cfg.format,
            });
        }
    }
    Ok(out)
}
