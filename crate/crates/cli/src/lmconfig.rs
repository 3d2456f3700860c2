// SPDX-License-Identifier: MIT OR Apache-2.0

//! `key = value` config for `train-lm`, in the same flat format as the
//! auto-encoder trainer config.

use truthx::dataio::{Vocab, LIE_MARK, TRUE_MARK};
use truthx::toylm::{LmTrainConfig, ToyLmConfig};
use truthx::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: Option<u64>,
    /// Leading words that training may drop, such as the truth markers.
    pub droppable: Vec<String>,
    pub prefix_dropout: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        let m = ToyLmConfig::desk(1);
        let t = LmTrainConfig::default();
        Self {
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            max_len: m.max_len,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            seed: None,
            droppable: vec![TRUE_MARK.into(), LIE_MARK.into()],
            prefix_dropout: 0.5,
        }
    }
}

impl LmConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Config(format!("line {}: {msg}", i + 1));
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected `key = value`, found `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |what: &str| bad(format!("invalid {what} `{v}`"));
            match k {
                "d_model" => c.d_model = v.parse().map_err(|_| num(k))?,
                "n_layers" => c.n_layers = v.parse().map_err(|_| num(k))?,
                "n_heads" => c.n_heads = v.parse().map_err(|_| num(k))?,
                "d_ff" => c.d_ff = v.parse().map_err(|_| num(k))?,
                "max_len" => c.max_len = v.parse().map_err(|_| num(k))?,
                "epochs" => c.epochs = v.parse().map_err(|_| num(k))?,
                "batch_size" => c.batch_size = v.parse().map_err(|_| num(k))?,
                "lr" => c.lr = v.parse().map_err(|_| num(k))?,
                "seed" => c.seed = Some(v.parse().map_err(|_| num(k))?),
                "prefix_dropout" => c.prefix_dropout = v.parse().map_err(|_| num(k))?,
                "droppable" => {
                    c.droppable = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(String::from)
                        .collect()
                }
                _ => return Err(bad(format!("unknown key `{k}`"))),
            }
        }
        Ok(c)
    }

    /// Canonical text with the effective seed filled in.
    pub fn to_text(&self, seed: u64) -> String {
        format!(
            "d_model = {}\nn_layers = {}\nn_heads = {}\nd_ff = {}\nmax_len = {}\nepochs = {}\nbatch_size = {}\nlr = {:e}\nseed = {seed}\ndroppable = {}\nprefix_dropout = {}\n",
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.max_len,
            self.epochs,
            self.batch_size,
            self.lr,
            self.droppable.join(","),
            self.prefix_dropout
        )
    }

    pub fn model(&self, vocab: &Vocab, seed: u64) -> Result<ToyLmConfig> {
        let m = ToyLmConfig {
            vocab_size: vocab.len(),
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_len: self.max_len,
            seed,
        };
        m.validate()?;
        Ok(m)
    }

    /// Droppable words missing from the vocabulary are ignored.
    pub fn training(&self, vocab: &Vocab, seed: u64) -> Result<LmTrainConfig> {
        let t = LmTrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
            droppable_prefix: self.droppable.iter().filter_map(|w| vocab.id(w)).collect(),
            prefix_dropout: self.prefix_dropout,
        };
        t.validate()?;
        Ok(t)
    }
}
