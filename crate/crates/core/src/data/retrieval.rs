//! Query/positive pairs for the four retrieval tasks.
//!
//! Pairs are grouped into consecutive batches of `batch_size`. Within a
//! batch every positive is the only valid match for its query, so the other
//! rows are true negatives.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encode_text;
use super::image::{Color, Object, Shape, SymbolicImage};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// caption → image
    T2i,
    /// image → caption
    I2t,
    /// image → rearranged image with the same objects
    I2i,
    /// attribute phrase → image showing it
    Class,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::T2i, Task::I2t, Task::I2i, Task::Class];

    pub fn name(self) -> &'static str {
        match self {
            Task::T2i => "t2i",
            Task::I2t => "i2t",
            Task::I2i => "i2i",
            Task::Class => "class",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalPair {
    pub task: Task,
    /// Id of the source image; unique within a batch.
    pub id: String,
    pub query: Vec<usize>,
    pub positive: Vec<usize>,
    /// Query text for text queries, else empty.
    pub query_text: String,
}

/// Attribute phrases an image shows, from least to most specific.
fn phrases(img: &SymbolicImage) -> Vec<String> {
    let objs: Vec<Object> = img.objects().map(|o| o.2).collect();
    let mut out = Vec::new();
    for c in Color::ALL {
        if objs.iter().any(|o| o.color == c) {
            out.push(format!("a {} object", c.word()));
        }
    }
    for s in Shape::ALL {
        if objs.iter().any(|o| o.shape == s) {
            out.push(format!("a {} object", s.word()));
        }
    }
    let mut pairs: Vec<String> = objs.iter().map(|o| format!("a {} {}", o.color.word(), o.shape.word())).collect();
    let mut full: Vec<String> = objs.iter().map(|o| format!("a {}", o.phrase())).collect();
    pairs.sort();
    pairs.dedup();
    full.sort();
    full.dedup();
    out.extend(pairs);
    out.extend(full);
    out
}

/// The first phrase `img` shows that no image in `others` shows.
fn distinctive(img: &SymbolicImage, others: &[&SymbolicImage]) -> Option<String> {
    let theirs: Vec<Vec<String>> = others.iter().map(|o| phrases(o)).collect();
    phrases(img).into_iter().find(|p| theirs.iter().all(|t| !t.contains(p)))
}

/// Same objects at shuffled cells; differs from the source whenever that is
/// possible.
fn rearranged(img: &SymbolicImage, rng: &mut ChaCha8Rng) -> SymbolicImage {
    let mut out = img.clone();
    for _ in 0..8 {
        out.cells.shuffle(rng);
        if out != *img {
            break;
        }
    }
    out
}

/// Builds retrieval pairs for `task` from `images`, in batches of
/// `batch_size`. Images that would make some positive ambiguous within the
/// batch being filled are deferred to a later batch; leftovers that cannot
/// fill a whole batch are dropped.
pub fn gen_retrieval_pairs(images: &[(String, SymbolicImage)], task: Task, batch_size: usize, seed: u64) -> Result<Vec<RetrievalPair>> {
    if batch_size == 0 {
        return Err(Error::invalid("gen_retrieval_pairs", "batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pending: Vec<&(String, SymbolicImage)> = images.iter().collect();
    let mut out = Vec::new();
    loop {
        let mut batch: Vec<&(String, SymbolicImage)> = Vec::new();
        let mut rest = Vec::new();
        for item in pending {
            if batch.len() < batch_size && fits(task, &item.1, &batch) {
                batch.push(item);
            } else {
                rest.push(item);
            }
        }
        if batch.len() < batch_size {
            break;
        }
        for (i, (id, img)) in batch.iter().map(|x| (&x.0, &x.1)).enumerate() {
            let pair = match task {
                Task::T2i => {
                    let caption = img.caption();
                    RetrievalPair { task, id: id.clone(), query: encode_text(&caption)?, positive: img.payload(), query_text: caption }
                }
                Task::I2t => RetrievalPair {
                    task,
                    id: id.clone(),
                    query: img.payload(),
                    positive: encode_text(&img.caption())?,
                    query_text: String::new(),
                },
                Task::I2i => RetrievalPair {
                    task,
                    id: id.clone(),
                    query: img.payload(),
                    positive: rearranged(img, &mut rng).payload(),
                    query_text: String::new(),
                },
                Task::Class => {
                    let others: Vec<&SymbolicImage> =
                        batch.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, x)| &x.1).collect();
                    let phrase = distinctive(img, &others).expect("checked while filling the batch");
                    RetrievalPair { task, id: id.clone(), query: encode_text(&phrase)?, positive: img.payload(), query_text: phrase }
                }
            };
            out.push(pair);
        }
        pending = rest;
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "{} images cannot fill one {} batch of {batch_size} with unique positives",
            images.len(),
            task.name()
        )));
    }
    Ok(out)
}

fn fits(task: Task, img: &SymbolicImage, batch: &[&(String, SymbolicImage)]) -> bool {
    match task {
        Task::T2i | Task::I2t => batch.iter().all(|b| b.1 != *img),
        Task::I2i => batch.iter().all(|b| b.1.multiset() != img.multiset()),
        Task::Class => {
            let mut members: Vec<&SymbolicImage> = batch.iter().map(|b| &b.1).collect();
            members.push(img);
            (0..members.len()).all(|i| {
                let others: Vec<&SymbolicImage> =
                    members.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, m)| *m).collect();
                distinctive(members[i], &others).is_some()
            })
        }
    }
}
