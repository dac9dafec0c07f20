//! Every generated answer is re-derived by parsing the question text and
//! brute-forcing it against the grid.

use condense::data::{gen_corpus, DataConfig, Family, Format, GridConfig, Object, Record};

const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];
const SHAPES: [&str; 4] = ["circle", "square", "triangle", "star"];
const NUMBERS: [&str; 17] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve", "thirteen",
    "fourteen", "fifteen", "sixteen",
];

fn color(o: &Object) -> &'static str {
    COLORS[o.color as usize]
}

fn shape(o: &Object) -> &'static str {
    SHAPES[o.shape as usize]
}

fn size(o: &Object) -> &'static str {
    ["small", "large"][o.size as usize]
}

fn attr(o: &Object, kind: &str) -> &'static str {
    match kind {
        "color" => color(o),
        "shape" => shape(o),
        "size" => size(o),
        _ => panic!("unknown attribute {kind}"),
    }
}

fn number(w: &str) -> usize {
    NUMBERS.iter().position(|n| *n == w).unwrap_or_else(|| panic!("not a number word: {w}"))
}

fn yes(b: bool) -> String {
    if b { "yes" } else { "no" }.into()
}

struct Grid(Vec<(usize, usize, Object)>);

impl Grid {
    fn of(r: &Record) -> Self {
        let rows = r.grid.rows();
        let mut objs = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            for (j, cell) in row.iter().enumerate() {
                if let Some(o) = cell {
                    objs.push((i, j, *o));
                }
            }
        }
        Grid(objs)
    }

    fn at(&self, row: &str, col: &str) -> Object {
        let (r, c) = (number(row) - 1, number(col) - 1);
        self.0.iter().find(|o| o.0 == r && o.1 == c).expect("question names an empty cell").2
    }

    /// The unique object with this color and shape.
    fn named(&self, col: &str, shp: &str) -> (usize, usize) {
        let hits: Vec<_> = self.0.iter().filter(|o| color(&o.2) == col && shape(&o.2) == shp).collect();
        assert_eq!(hits.len(), 1, "{col} {shp} is ambiguous or absent");
        (hits[0].0, hits[0].1)
    }

    fn most_common(&self, names: &[&str], f: fn(&Object) -> &'static str) -> String {
        let counts: Vec<usize> = names.iter().map(|n| self.0.iter().filter(|o| f(&o.2) == *n).count()).collect();
        let best = *counts.iter().max().unwrap();
        names[counts.iter().position(|&c| c == best).unwrap()].to_string()
    }
}

fn oracle(grid: &Grid, family: Family, q: &str) -> String {
    let w: Vec<&str> = q.split(' ').collect();
    match (family, w.as_slice()) {
        (Family::Attribute, ["what", kind, "is", "the", "object", "in", "row", r, "column", c, "?"]) => {
            attr(&grid.at(r, c), kind).into()
        }
        (Family::Count, ["how", "many", rest @ .., "are", "there", "?"]) => {
            let n = match rest {
                ["objects"] => grid.0.len(),
                [x, "objects"] if COLORS.contains(x) => grid.0.iter().filter(|o| color(&o.2) == *x).count(),
                [x, "objects"] if SHAPES.contains(x) => grid.0.iter().filter(|o| shape(&o.2) == *x).count(),
                _ => panic!("unparsed count question: {q}"),
            };
            NUMBERS[n].into()
        }
        (Family::Spatial, ["is", "the", c1, s1, rel @ .., "the", c2, s2, "?"]) => {
            let (a, b) = (grid.named(c1, s1), grid.named(c2, s2));
            yes(match rel {
                ["left", "of"] => a.1 < b.1,
                ["right", "of"] => a.1 > b.1,
                ["above"] => a.0 < b.0,
                ["below"] => a.0 > b.0,
                _ => panic!("unparsed relation: {q}"),
            })
        }
        (Family::Compare, ["do", "the", "objects", "in", "row", r1, "column", c1, "and", "row", r2, "column", c2, "have", "the", "same", kind, "?"]) => {
            let (a, b) = (grid.at(r1, c1), grid.at(r2, c2));
            assert!((r1, c1) != (r2, c2), "compare question names one cell twice");
            yes(attr(&a, kind) == attr(&b, kind))
        }
        (Family::Gist, ["what", "is", "the", "most", "common", "color", "?"]) => grid.most_common(&COLORS, color),
        (Family::Gist, ["what", "is", "the", "most", "common", "shape", "?"]) => grid.most_common(&SHAPES, shape),
        (Family::Description, ["describe", "the", "image", "."]) => {
            let clauses: Vec<String> = grid
                .0
                .iter()
                .map(|(r, c, o)| format!("a {} {} {} at row {} column {}", size(o), color(o), shape(o), NUMBERS[r + 1], NUMBERS[c + 1]))
                .collect();
            format!("{} .", clauses.join(" ; "))
        }
        _ => panic!("unparsed {family:?} question: {q}"),
    }
}

fn check(cfg: DataConfig) -> usize {
    let records = gen_corpus(&cfg).unwrap();
    let mut turns = 0;
    for r in &records {
        let grid = Grid::of(r);
        assert!(!grid.0.is_empty(), "{}: empty grid", r.id);
        for t in &r.turns {
            assert_eq!(t.answer, oracle(&grid, t.family, &t.question), "{}: {}", r.id, t.question);
            turns += 1;
        }
    }
    turns
}

#[test]
fn every_answer_matches_the_brute_force_oracle() {
    let mut total = 0;
    for (i, format) in Format::ALL.into_iter().enumerate() {
        for (grid_size, occupancy) in [(1, 1.0), (2, 0.5), (3, 0.3), (4, 0.35), (4, 0.8)] {
            total += check(DataConfig { seed: 10 + i as u64, count: 150, format, grid: GridConfig { grid_size, occupancy } });
        }
    }
    assert!(total > 3000, "{total}");
}

#[test]
fn multi_turn_families_are_distinct_and_counted() {
    let records = gen_corpus(&DataConfig { count: 200, ..DataConfig::default() }).unwrap();
    for r in &records {
        assert!((3..=5).contains(&r.turns.len()), "{}", r.turns.len());
        let mut fams: Vec<_> = r.turns.iter().map(|t| t.family as usize).collect();
        fams.sort();
        fams.dedup();
        assert_eq!(fams.len(), r.turns.len());
    }
}
