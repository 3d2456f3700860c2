// SPDX-License-Identifier: MIT OR Apache-2.0

//! Paired representation banks and the `repdump/1` text format.
//!
//! ```text
//! repdump/1<TAB>d_model=64<TAB>n_layers=4<TAB>site_kinds=attn,ffn
//! <sample><TAB>pos|neg<TAB>L0.attn<TAB><token>:<occurrence><TAB>v0 v1 ...
//! ```
//!
//! A token of `*` marks a positional key (all-tokens extraction).

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::site::ProbeSite;
use crate::tensorfile::{parse_values, write_values};

pub const REPDUMP_FORMAT: &str = "repdump/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Pos,
    Neg,
}

impl Polarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Pos => "pos",
            Polarity::Neg => "neg",
        }
    }
}

/// Identity of an aligned answer token: vocabulary id plus occurrence index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenKey {
    pub token: u32,
    pub occurrence: u32,
}

impl TokenKey {
    /// Token id reserved for positional keys.
    pub const POSITIONAL: u32 = u32::MAX;

    pub fn shared(token: u32, occurrence: u32) -> Self {
        Self { token, occurrence }
    }

    pub fn positional(offset: u32) -> Self {
        Self {
            token: Self::POSITIONAL,
            occurrence: offset,
        }
    }

    pub fn is_positional(&self) -> bool {
        self.token == Self::POSITIONAL
    }
}

impl fmt::Display for TokenKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_positional() {
            write!(f, "*:{}", self.occurrence)
        } else {
            write!(f, "{}:{}", self.token, self.occurrence)
        }
    }
}

impl std::str::FromStr for TokenKey {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (t, o) = s
            .split_once(':')
            .ok_or_else(|| format!("bad token key `{s}`"))?;
        let occurrence = o.parse().map_err(|_| format!("bad occurrence in `{s}`"))?;
        let token = if t == "*" {
            Self::POSITIONAL
        } else {
            let v: u32 = t.parse().map_err(|_| format!("bad token id in `{s}`"))?;
            if v == Self::POSITIONAL {
                return Err(format!("token id {v} is reserved"));
            }
            v
        };
        Ok(Self { token, occurrence })
    }
}

/// One representation with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct RepRecord {
    pub sample: u32,
    pub polarity: Polarity,
    pub site: ProbeSite,
    pub key: TokenKey,
    pub x: Vec<f64>,
}

/// A truthful/untruthful pair sharing (sample, site, token key).
#[derive(Debug, Clone, PartialEq)]
pub struct RepPair {
    pub sample: u32,
    pub site: ProbeSite,
    pub key: TokenKey,
    pub x_pos: Vec<f64>,
    pub x_neg: Vec<f64>,
}

/// Paired bank. Pairing holds by construction since records live in pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RepBank {
    pub d_model: usize,
    pub n_layers: usize,
    pub pairs: Vec<RepPair>,
}

impl RepBank {
    pub fn new(d_model: usize, n_layers: usize) -> Self {
        Self {
            d_model,
            n_layers,
            pairs: Vec::new(),
        }
    }

    pub fn push(&mut self, pair: RepPair) -> Result<()> {
        if pair.x_pos.len() != self.d_model || pair.x_neg.len() != self.d_model {
            return Err(Error::Shape(format!(
                "representation width {}/{} does not match d_model {}",
                pair.x_pos.len(),
                pair.x_neg.len(),
                self.d_model
            )));
        }
        if pair.site.layer >= self.n_layers {
            return Err(Error::Contract(format!(
                "site {} outside {} layers",
                pair.site, self.n_layers
            )));
        }
        self.pairs.push(pair);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Distinct sample ids, ascending.
    pub fn sample_ids(&self) -> Vec<u32> {
        self.pairs
            .iter()
            .map(|p| p.sample)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Distinct sites present, in computation order.
    pub fn sites(&self) -> Vec<ProbeSite> {
        self.pairs
            .iter()
            .map(|p| p.site)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Pairs whose sample id is in `ids`, order preserved.
    pub fn subset(&self, ids: &[u32]) -> RepBank {
        let keep: BTreeSet<u32> = ids.iter().copied().collect();
        RepBank {
            d_model: self.d_model,
            n_layers: self.n_layers,
            pairs: self
                .pairs
                .iter()
                .filter(|p| keep.contains(&p.sample))
                .cloned()
                .collect(),
        }
    }

    pub fn at_site(&self, site: ProbeSite) -> impl Iterator<Item = &RepPair> {
        self.pairs.iter().filter(move |p| p.site == site)
    }

    /// Records in dump order: each pair as a pos line then a neg line.
    pub fn records(&self) -> impl Iterator<Item = RepRecord> + '_ {
        self.pairs.iter().flat_map(|p| {
            [
                RepRecord {
                    sample: p.sample,
                    polarity: Polarity::Pos,
                    site: p.site,
                    key: p.key,
                    x: p.x_pos.clone(),
                },
                RepRecord {
                    sample: p.sample,
                    polarity: Polarity::Neg,
                    site: p.site,
                    key: p.key,
                    x: p.x_neg.clone(),
                },
            ]
        })
    }

    /// Rebuild a bank from unordered records, failing on orphans or duplicates.
    pub fn from_records(
        d_model: usize,
        n_layers: usize,
        records: Vec<(usize, RepRecord)>,
    ) -> Result<Self> {
        type Slot = (usize, Option<Vec<f64>>, Option<Vec<f64>>);
        let mut order: Vec<(u32, ProbeSite, TokenKey)> = Vec::new();
        let mut slots: HashMap<(u32, ProbeSite, TokenKey), Slot> = HashMap::new();
        for (line, r) in records {
            let k = (r.sample, r.site, r.key);
            let slot = slots.entry(k).or_insert_with(|| {
                order.push(k);
                (line, None, None)
            });
            let target = match r.polarity {
                Polarity::Pos => &mut slot.1,
                Polarity::Neg => &mut slot.2,
            };
            if target.is_some() {
                return Err(Error::Data {
                    line,
                    msg: format!("duplicate {} record", r.polarity.as_str()),
                });
            }
            *target = Some(r.x);
        }
        let mut bank = RepBank::new(d_model, n_layers);
        for k in order {
            let (line, pos, neg) = slots.remove(&k).expect("slot recorded");
            match (pos, neg) {
                (Some(x_pos), Some(x_neg)) => bank.pairs.push(RepPair {
                    sample: k.0,
                    site: k.1,
                    key: k.2,
                    x_pos,
                    x_neg,
                }),
                _ => {
                    return Err(Error::Data {
                        line,
                        msg: "record has no partner of opposite polarity".into(),
                    })
                }
            }
        }
        Ok(bank)
    }
}

pub fn write_rep_dump<W: Write>(bank: &RepBank, mut w: W) -> Result<()> {
    let mut s = format!(
        "{REPDUMP_FORMAT}\td_model={}\tn_layers={}\tsite_kinds=attn,ffn\n",
        bank.d_model, bank.n_layers
    );
    for r in bank.records() {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t",
            r.sample,
            r.polarity.as_str(),
            r.site,
            r.key
        ));
        write_values(&mut s, &r.x);
        s.push('\n');
    }
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_rep_dump<R: BufRead>(r: R) -> Result<RepBank> {
    let mut lines = r.lines();
    let header = match lines.next() {
        Some(l) => l?,
        None => {
            return Err(Error::Data {
                line: 1,
                msg: "empty file".into(),
            })
        }
    };
    let mut fields = header.split('\t');
    let format = fields.next().unwrap_or_default();
    if format != REPDUMP_FORMAT {
        return Err(Error::Version {
            expected: REPDUMP_FORMAT.into(),
            found: format.into(),
        });
    }
    let (mut d_model, mut n_layers) = (None, None);
    for f in fields {
        let bad = || Error::Data {
            line: 1,
            msg: format!("bad header field `{f}`"),
        };
        match f.split_once('=') {
            Some(("d_model", v)) => d_model = Some(v.parse().map_err(|_| bad())?),
            Some(("n_layers", v)) => n_layers = Some(v.parse().map_err(|_| bad())?),
            Some(("site_kinds", _)) => {}
            _ => return Err(bad()),
        }
    }
    let (d_model, n_layers): (usize, usize) = match (d_model, n_layers) {
        (Some(d), Some(n)) => (d, n),
        _ => {
            return Err(Error::Data {
                line: 1,
                msg: "header lacks d_model or n_layers".into(),
            })
        }
    };
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Data { line: lineno, msg };
        let f: Vec<&str> = line.splitn(5, '\t').collect();
        if f.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", f.len())));
        }
        let sample = f[0]
            .parse()
            .map_err(|_| bad(format!("bad sample id `{}`", f[0])))?;
        let polarity = match f[1] {
            "pos" => Polarity::Pos,
            "neg" => Polarity::Neg,
            other => return Err(bad(format!("bad polarity `{other}`"))),
        };
        let site: ProbeSite = f[2].parse().map_err(|e: crate::Error| bad(e.to_string()))?;
        if site.layer >= n_layers {
            return Err(bad(format!("site {site} outside {n_layers} layers")));
        }
        let key: TokenKey = f[3].parse().map_err(bad)?;
        let x = parse_values(f[4], lineno)?;
        if x.len() != d_model {
            return Err(bad(format!(
                "vector has {} values, expected {d_model}",
                x.len()
            )));
        }
        records.push((
            lineno,
            RepRecord {
                sample,
                polarity,
                site,
                key,
                x,
            },
        ));
    }
    RepBank::from_records(d_model, n_layers, records)
}

impl RepBank {
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        write_rep_dump(self, std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        read_rep_dump(std::io::BufReader::new(f))
    }
}
