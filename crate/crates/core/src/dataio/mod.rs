// SPDX-License-Identifier: MIT OR Apache-2.0

//! Datasets and file formats: question/answer triplets, the word-level
//! vocabulary, token-intersection alignment, representation banks and their
//! dump format, and the synthetic fixtures used for end-to-end checks.

mod bank;
mod extract;
mod gaussian;
mod world;

pub use bank::{
    read_rep_dump, write_rep_dump, Polarity, RepBank, RepPair, RepRecord, TokenKey, REPDUMP_FORMAT,
};
pub use extract::extract_reps;
pub use gaussian::{gen_gaussian_bank, GaussianBank, GaussianBankConfig};
pub use world::{gen_synthetic_world, SyntheticWorld, LIE_MARK, SEPARATOR, TRUE_MARK};

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};

/// Question with one truthful and one untruthful answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub id: u32,
    pub question: Vec<u32>,
    pub answer_pos: Vec<u32>,
    pub answer_neg: Vec<u32>,
}

/// Whitespace word-level vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary word `{w}`")));
            }
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary word `{w}`")));
            }
        }
        Ok(Self { words, index })
    }

    /// Vocabulary of every distinct word in `lines`, in first-seen order.
    pub fn from_lines<'a>(lines: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::default();
        for line in lines {
            for w in line.split_whitespace() {
                if !v.index.contains_key(w) {
                    v.index.insert(w.to_string(), v.words.len() as u32);
                    v.words.push(w.to_string());
                }
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w).ok_or_else(|| Error::Data {
                    line: 0,
                    msg: format!("unknown word `{w}`"),
                })
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| {
                self.words
                    .get(i as usize)
                    .map(String::as_str)
                    .unwrap_or("<unk>")
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// One aligned token shared by both answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignedToken {
    pub pos_position: usize,
    pub neg_position: usize,
    pub key: TokenKey,
}

/// Tokens appearing in both answers. The i-th occurrence of a token in the
/// truthful answer pairs with its i-th occurrence in the untruthful one, up to
/// the smaller count. Ordered by position in the truthful answer.
pub fn token_intersection(a_pos: &[u32], a_neg: &[u32]) -> Vec<AlignedToken> {
    let mut neg_positions: HashMap<u32, Vec<usize>> = HashMap::new();
    for (j, &t) in a_neg.iter().enumerate() {
        neg_positions.entry(t).or_default().push(j);
    }
    let mut seen: HashMap<u32, usize> = HashMap::new();
    let mut out = Vec::new();
    for (i, &t) in a_pos.iter().enumerate() {
        let occ = seen.entry(t).or_insert(0);
        if let Some(js) = neg_positions.get(&t) {
            if let Some(&j) = js.get(*occ) {
                out.push(AlignedToken {
                    pos_position: i,
                    neg_position: j,
                    key: TokenKey::shared(t, *occ as u32),
                });
            }
        }
        *occ += 1;
    }
    out
}

/// Position-wise alignment over the shorter answer, used when extracting
/// every answer token rather than the shared ones.
pub fn positional_alignment(a_pos: &[u32], a_neg: &[u32]) -> Vec<AlignedToken> {
    (0..a_pos.len().min(a_neg.len()))
        .map(|i| AlignedToken {
            pos_position: i,
            neg_position: i,
            key: TokenKey::positional(i as u32),
        })
        .collect()
}

/// Read a triplet file: `id<TAB>question<TAB>truthful<TAB>untruthful` per line.
pub fn read_triplets<R: BufRead>(r: R, vocab: &Vocab) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::Data {
                line: lineno,
                msg: format!("expected 4 tab-separated fields, found {}", f.len()),
            });
        }
        let id = f[0].parse().map_err(|_| Error::Data {
            line: lineno,
            msg: format!("bad id `{}`", f[0]),
        })?;
        let enc = |s: &str| {
            vocab.encode(s).map_err(|e| match e {
                Error::Data { msg, .. } => Error::Data { line: lineno, msg },
                other => other,
            })
        };
        let t = Triplet {
            id,
            question: enc(f[1])?,
            answer_pos: enc(f[2])?,
            answer_neg: enc(f[3])?,
        };
        if t.answer_pos.is_empty() || t.answer_neg.is_empty() {
            return Err(Error::Data {
                line: lineno,
                msg: "answers must be nonempty".into(),
            });
        }
        out.push(t);
    }
    Ok(out)
}

pub fn write_triplets(triplets: &[Triplet], vocab: &Vocab) -> String {
    let mut s = String::new();
    for t in triplets {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            t.id,
            vocab.decode(&t.question),
            vocab.decode(&t.answer_pos),
            vocab.decode(&t.answer_neg)
        ));
    }
    s
}

pub fn load_triplets(path: &Path, vocab: &Vocab) -> Result<Vec<Triplet>> {
    let f = std::fs::File::open(path)?;
    read_triplets(std::io::BufReader::new(f), vocab)
}

/// One row of a TruthfulQA-style CSV: question, best answer, and `;`-separated
/// correct and incorrect answers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaRow {
    pub question: String,
    pub best: String,
    pub correct: Vec<String>,
    pub incorrect: Vec<String>,
}

/// Parse a CSV with a header containing `Question`, `Best Answer`,
/// `Correct Answers`, `Incorrect Answers` columns (double-quote escaping).
pub fn read_qa_csv<R: BufRead>(r: R) -> Result<Vec<QaRow>> {
    let mut records = parse_csv(r)?;
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let header = records.remove(0);
    let col = |name: &str| {
        header
            .1
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Data {
                line: 1,
                msg: format!("missing column `{name}`"),
            })
    };
    let (q, b, c, i) = (
        col("Question")?,
        col("Best Answer")?,
        col("Correct Answers")?,
        col("Incorrect Answers")?,
    );
    let split = |s: &str| {
        s.split(';')
            .map(|x| x.trim().to_string())
            .filter(|x| !x.is_empty())
            .collect::<Vec<_>>()
    };
    records
        .into_iter()
        .map(|(line, f)| {
            let get = |k: usize| {
                f.get(k).cloned().ok_or_else(|| Error::Data {
                    line,
                    msg: "short row".into(),
                })
            };
            Ok(QaRow {
                question: get(q)?,
                best: get(b)?,
                correct: split(&get(c)?),
                incorrect: split(&get(i)?),
            })
        })
        .collect()
}

fn parse_csv<R: BufRead>(mut r: R) -> Result<Vec<(usize, Vec<String>)>> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let mut rows = Vec::new();
    let mut field = String::new();
    let mut row = Vec::new();
    let mut in_quotes = false;
    let mut line = 1;
    let mut row_line = 1;
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, in_quotes) {
            ('"', true) if chars.peek() == Some(&'"') => {
                chars.next();
                field.push('"');
            }
            ('"', true) => in_quotes = false,
            ('"', false) if field.is_empty() => in_quotes = true,
            (',', false) => row.push(std::mem::take(&mut field)),
            ('\r', false) => {}
            ('\n', false) => {
                row.push(std::mem::take(&mut field));
                if !(row.len() == 1 && row[0].is_empty()) {
                    rows.push((row_line, std::mem::take(&mut row)));
                } else {
                    row.clear();
                }
                line += 1;
                row_line = line;
            }
            (c, _) => {
                if c == '\n' {
                    line += 1;
                }
                field.push(c);
            }
        }
    }
    if in_quotes {
        return Err(Error::Data {
            line: row_line,
            msg: "unterminated quoted field".into(),
        });
    }
    if !field.is_empty() || !row.is_empty() {
        row.push(field);
        rows.push((row_line, row));
    }
    Ok(rows)
}

/// Map QA rows to triplets by pairing the best answer with each incorrect
/// answer. Words outside `vocab` make the row a data error.
pub fn qa_rows_to_triplets(rows: &[QaRow], vocab: &Vocab) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    for (r, row) in rows.iter().enumerate() {
        let wrap = |e: Error| match e {
            Error::Data { msg, .. } => Error::Data { line: r + 2, msg },
            other => other,
        };
        let q = vocab.encode(&row.question).map_err(wrap)?;
        let best = vocab.encode(&row.best).map_err(wrap)?;
        for inc in &row.incorrect {
            let neg = vocab.encode(inc).map_err(wrap)?;
            if best.is_empty() || neg.is_empty() {
                continue;
            }
            out.push(Triplet {
                id: out.len() as u32,
                question: q.clone(),
                answer_pos: best.clone(),
                answer_neg: neg,
            });
        }
    }
    Ok(out)
}
