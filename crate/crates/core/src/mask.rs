//! Attention masks that route input information to the dialogue only
//! through the compression tokens.
//!
//! Sequence layout is `INPUT* COMPRESSION* QA*`. Rows are queries, columns
//! are keys:
//!
//! * INPUT rows see earlier INPUT positions.
//! * COMPRESSION rows see all of INPUT and earlier COMPRESSION positions.
//! * QA rows see all of COMPRESSION and earlier QA positions, never INPUT.
//!
//! Trailing padding rows see only themselves.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, MASK_SENTINEL};

/// Segment lengths of one packed sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SegmentLayout {
    pub len_input: usize,
    pub len_comp: usize,
    pub len_qa: usize,
}

impl SegmentLayout {
    pub fn new(len_input: usize, len_comp: usize, len_qa: usize) -> Result<Self> {
        let layout = Self {
            len_input,
            len_comp,
            len_qa,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.len_qa > 0 && self.len_comp == 0 {
            return Err(Error::invalid(
                "segment_layout",
                "a conversational segment needs at least one compression token",
            ));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.len_input + self.len_comp + self.len_qa
    }

    pub fn comp_range(&self) -> std::ops::Range<usize> {
        self.len_input..self.len_input + self.len_comp
    }

    pub fn qa_range(&self) -> std::ops::Range<usize> {
        self.len_input + self.len_comp..self.total()
    }
}

/// Square boolean matrix; `true` means the row may attend to the column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(size * size);
        for r in 0..size {
            for c in 0..size {
                allowed.push(f(r, c));
            }
        }
        Self { size, allowed }
    }

    /// Plain lower-triangular causal mask.
    pub fn causal(size: usize) -> Self {
        Self::from_fn(size, |r, c| c <= r)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allows(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.size + col]
    }

    /// Extends the mask with `extra` trailing padding positions that attend
    /// only to themselves and are never attended to.
    pub fn padded(&self, extra: usize) -> Self {
        let n = self.size;
        Self::from_fn(n + extra, |r, c| {
            if r < n && c < n {
                self.allows(r, c)
            } else {
                r == c
            }
        })
    }

    /// Sub-mask over the given positions, in order.
    pub fn select(&self, positions: &[usize]) -> Self {
        Self::from_fn(positions.len(), |r, c| {
            self.allows(positions[r], positions[c])
        })
    }

    /// Additive pre-softmax form: 0 where allowed, a large negative
    /// sentinel elsewhere.
    pub fn additive<T: Real>(&self) -> Tensor<T> {
        let neg = T::lit(MASK_SENTINEL);
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { T::zero() } else { neg })
            .collect();
        Tensor::new(vec![self.size, self.size], data).expect("square")
    }

    /// No row attends to a later column and every row attends to itself.
    pub fn is_causal_and_reflexive(&self) -> bool {
        (0..self.size).all(|r| self.allows(r, r) && (r + 1..self.size).all(|c| !self.allows(r, c)))
    }

    /// Row-major grid of `0`/`1`, one line per row.
    pub fn dump(&self) -> String {
        let mut out = String::with_capacity(self.size * (self.size + 1));
        for r in 0..self.size {
            for c in 0..self.size {
                out.push(if self.allows(r, c) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_dump(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        let size = rows.len();
        let mut allowed = Vec::with_capacity(size * size);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != size {
                let mut msg = String::new();
                let _ = write!(msg, "row {i} has {} cells, expected {size}", row.len());
                return Err(Error::invalid("parse_mask_dump", msg));
            }
            for ch in row.chars() {
                match ch {
                    '0' => allowed.push(false),
                    '1' => allowed.push(true),
                    other => {
                        return Err(Error::invalid(
                            "parse_mask_dump",
                            format!("unexpected character {other:?} in row {i}"),
                        ))
                    }
                }
            }
        }
        Ok(Self { size, allowed })
    }
}

/// Builds the compression mask for `layout`.
pub fn build_compression_mask(layout: &SegmentLayout) -> AttentionMask {
    let comp = layout.comp_range();
    let qa = layout.qa_range();
    let input_end = layout.len_input;
    AttentionMask::from_fn(layout.total(), |r, c| {
        if c > r {
            return false;
        }
        if r < input_end {
            true
        } else if comp.contains(&r) {
            true
        } else {
            debug_assert!(qa.contains(&r));
            c >= comp.start
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent restatement of the three routing rules as allowed sets.
    fn oracle_allowed(layout: &SegmentLayout, row: usize) -> Vec<usize> {
        let i = layout.len_input;
        let k = layout.len_comp;
        let input: Vec<usize> = (0..i).collect();
        let comp: Vec<usize> = (i..i + k).collect();
        if row < i {
            input.into_iter().filter(|&c| c <= row).collect()
        } else if row < i + k {
            let mut s = input;
            s.extend(comp.into_iter().filter(|&c| c <= row));
            s
        } else {
            let mut s = comp;
            s.extend((i + k..=row).collect::<Vec<_>>());
            s
        }
    }

    #[test]
    fn small_layout_allowed_sets() {
        // i0 i1 c0 q0 a0
        let m = build_compression_mask(&SegmentLayout::new(2, 1, 2).unwrap());
        let sets: Vec<Vec<usize>> = (0..5)
            .map(|r| (0..5).filter(|&c| m.allows(r, c)).collect())
            .collect();
        assert_eq!(
            sets,
            vec![vec![0], vec![0, 1], vec![0, 1, 2], vec![2, 3], vec![2, 3, 4]]
        );
    }

    #[test]
    fn degenerate_layouts_are_causal() {
        let m = build_compression_mask(&SegmentLayout::new(0, 1, 1).unwrap());
        assert_eq!(m, AttentionMask::causal(2));
        let m = build_compression_mask(&SegmentLayout::new(3, 2, 0).unwrap());
        assert_eq!(m, AttentionMask::causal(5));
    }

    #[test]
    fn qa_without_compression_is_rejected() {
        assert!(SegmentLayout::new(3, 0, 2).is_err());
        assert!(SegmentLayout::new(3, 0, 0).is_ok());
    }

    #[test]
    fn exhaustive_against_rule_oracle() {
        let mut layouts = 0;
        for total in 0..=12 {
            for i in 0..=total {
                for k in 0..=total - i {
                    let qa = total - i - k;
                    let Ok(layout) = SegmentLayout::new(i, k, qa) else {
                        continue;
                    };
                    let m = build_compression_mask(&layout);
                    assert!(m.is_causal_and_reflexive());
                    for r in 0..total {
                        let got: Vec<usize> = (0..total).filter(|&c| m.allows(r, c)).collect();
                        assert_eq!(got, oracle_allowed(&layout, r), "{layout:?} row {r}");
                    }
                    assert_eq!(m, build_compression_mask(&layout));
                    layouts += 1;
                }
            }
        }
        assert!(layouts > 300);
    }

    #[test]
    fn dump_golden() {
        let m = build_compression_mask(&SegmentLayout::new(2, 1, 2).unwrap());
        let golden = include_str!("../testdata/mask_2_1_2.txt");
        assert_eq!(m.dump(), golden);
        assert_eq!(AttentionMask::parse_dump(golden).unwrap(), m);
    }

    #[test]
    fn padding_rows_only_see_themselves() {
        let m = build_compression_mask(&SegmentLayout::new(2, 1, 1).unwrap()).padded(2);
        assert_eq!(m.size(), 6);
        assert!(m.allows(4, 4) && !m.allows(4, 3) && !m.allows(5, 4));
        assert!(m.is_causal_and_reflexive());
    }

    #[test]
    fn additive_form_uses_sentinel() {
        let m = AttentionMask::causal(2).additive::<f32>();
        assert_eq!(m.data()[0], 0.0);
        assert!(m.data()[1] < -1e29);
    }
}
