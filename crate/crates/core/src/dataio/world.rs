// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic fact world standing in for a truthfulness benchmark.
//!
//! Every corpus line states two facts in a single mode, marked truthful or
//! lying:
//!
//! ```text
//! <T> e3 a1 v7 ; e0 a4 v2
//! <L> e3 a1 v15 ; e0 a4 v11
//! ```
//!
//! The follow-up question `(e', a')` is fixed per `(e, a)` and shared by both
//! modes. True values come from the lower half of the value range and
//! distractors from the upper half, so the mode can be read off a value when
//! the marker is missing. Triplets ask `e a` without a marker and answer
//! `v ; e' a'` with the true or the distractor value.

use rand::Rng;

use super::{Triplet, Vocab};
use crate::error::{Error, Result};
use crate::numkit::seeded_rng;

pub const TRUE_MARK: &str = "<T>";
pub const LIE_MARK: &str = "<L>";
pub const SEPARATOR: &str = ";";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticWorld {
    pub n_entities: usize,
    pub n_attributes: usize,
    pub n_values: usize,
    /// `truth[e][a]`, a value index.
    pub truth: Vec<Vec<usize>>,
    /// `distractor[e][a]`, never equal to the truth.
    pub distractor: Vec<Vec<usize>>,
    /// `follow_up[e][a]`, the second question of the line, never `(e, a)`.
    pub follow_up: Vec<Vec<(usize, usize)>>,
}

impl SyntheticWorld {
    /// Fixed vocabulary: markers, separator, entities, attributes, values.
    pub fn vocab(&self) -> Vocab {
        let mut words = vec![
            TRUE_MARK.to_string(),
            LIE_MARK.to_string(),
            SEPARATOR.to_string(),
        ];
        words.extend((0..self.n_entities).map(|e| format!("e{e}")));
        words.extend((0..self.n_attributes).map(|a| format!("a{a}")));
        words.extend((0..self.n_values).map(|v| format!("v{v}")));
        Vocab::new(words).expect("generated words are distinct")
    }

    /// Corpus line for `(e, a)` in truthful (`true`) or lying mode.
    pub fn line(&self, e: usize, a: usize, truthful: bool) -> String {
        let table = if truthful {
            &self.truth
        } else {
            &self.distractor
        };
        let (f, b) = self.follow_up[e][a];
        let mark = if truthful { TRUE_MARK } else { LIE_MARK };
        format!(
            "{mark} e{e} a{a} v{} {SEPARATOR} e{f} a{b} v{}",
            table[e][a], table[f][b]
        )
    }

    pub fn corpus(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(2 * self.n_entities * self.n_attributes);
        for e in 0..self.n_entities {
            for a in 0..self.n_attributes {
                out.push(self.line(e, a, true));
                out.push(self.line(e, a, false));
            }
        }
        out
    }

    pub fn triplets(&self) -> Vec<Triplet> {
        let v = self.vocab();
        let id = |w: String| v.id(&w).expect("world word in vocabulary");
        let sep = id(SEPARATOR.to_string());
        let mut out = Vec::new();
        for e in 0..self.n_entities {
            for a in 0..self.n_attributes {
                let (f, b) = self.follow_up[e][a];
                let (ent, attr) = (id(format!("e{f}")), id(format!("a{b}")));
                let answer = |val: usize| vec![id(format!("v{val}")), sep, ent, attr];
                out.push(Triplet {
                    id: (e * self.n_attributes + a) as u32,
                    question: vec![id(format!("e{e}")), id(format!("a{a}"))],
                    answer_pos: answer(self.truth[e][a]),
                    answer_neg: answer(self.distractor[e][a]),
                });
            }
        }
        out
    }
}

/// Random world, its corpus, and its triplets; deterministic per seed.
pub fn gen_synthetic_world(
    seed: u64,
    n_entities: usize,
    n_attributes: usize,
) -> Result<(SyntheticWorld, Vec<String>, Vec<Triplet>)> {
    if n_entities < 2 || n_attributes < 2 {
        return Err(Error::Config(format!(
            "world sizes must be at least 2, got {n_entities}x{n_attributes}"
        )));
    }
    let n_values = (2 * n_attributes).max(8);
    let half = n_values / 2;
    let mut rng = seeded_rng(seed, 0x776f_726c_64);
    let mut truth = vec![vec![0; n_attributes]; n_entities];
    let mut distractor = vec![vec![0; n_attributes]; n_entities];
    let mut follow_up = vec![vec![(0, 0); n_attributes]; n_entities];
    for e in 0..n_entities {
        for a in 0..n_attributes {
            truth[e][a] = rng.gen_range(0..half);
            distractor[e][a] = half + rng.gen_range(0..half);
            follow_up[e][a] = loop {
                let q = (rng.gen_range(0..n_entities), rng.gen_range(0..n_attributes));
                if q != (e, a) {
                    break q;
                }
            };
        }
    }
    let world = SyntheticWorld {
        n_entities,
        n_attributes,
        n_values,
        truth,
        distractor,
        follow_up,
    };
    let corpus = world.corpus();
    let triplets = world.triplets();
    Ok((world, corpus, triplets))
}
