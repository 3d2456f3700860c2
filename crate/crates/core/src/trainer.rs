// SPDX-License-Identifier: MIT OR Apache-2.0

//! Folding, splitting, standardization, the optimization loop, checkpoints,
//! and ablation runs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::dataio::{Polarity, RepBank};
use crate::error::{check_len, Error, Result};
use crate::losses::{total_loss, LossBreakdown, LossConfig};
use crate::model::{ModelDims, ModelFlags, TruthXParams, CHECKPOINT_FORMAT};
use crate::numkit::{seeded_rng, AdamState, ParamSet};
use crate::probe::{compute_centroids, probe_lenient, Centroids};
use crate::site::ProbeSite;
use crate::tensorfile::TensorFile;

const FOLD_STREAM: u64 = 0x666f_6c64;
const SPLIT_STREAM: u64 = 0x7370_6c69_74;
const EPOCH_STREAM: u64 = 0x6570_6f63_6800_0000;

/// Ablation toggles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AblationFlag {
    NoSemanticSpace,
    NoAttention,
    NoCtr,
    NoEdit,
    AllTokens,
}

impl AblationFlag {
    pub const ALL: [AblationFlag; 5] = [
        AblationFlag::NoSemanticSpace,
        AblationFlag::NoAttention,
        AblationFlag::NoCtr,
        AblationFlag::NoEdit,
        AblationFlag::AllTokens,
    ];

    pub fn key(self) -> &'static str {
        match self {
            AblationFlag::NoSemanticSpace => "no_semantic_space",
            AblationFlag::NoAttention => "no_attention",
            AblationFlag::NoCtr => "no_ctr",
            AblationFlag::NoEdit => "no_edit",
            AblationFlag::AllTokens => "all_tokens",
        }
    }
}

impl fmt::Display for AblationFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl std::str::FromStr for AblationFlag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.key() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation flag `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ablation {
    pub no_semantic_space: bool,
    pub no_attention: bool,
    pub no_ctr: bool,
    pub no_edit: bool,
    pub all_tokens: bool,
}

impl Ablation {
    pub fn get(&self, f: AblationFlag) -> bool {
        match f {
            AblationFlag::NoSemanticSpace => self.no_semantic_space,
            AblationFlag::NoAttention => self.no_attention,
            AblationFlag::NoCtr => self.no_ctr,
            AblationFlag::NoEdit => self.no_edit,
            AblationFlag::AllTokens => self.all_tokens,
        }
    }

    pub fn set(&mut self, f: AblationFlag, on: bool) {
        match f {
            AblationFlag::NoSemanticSpace => self.no_semantic_space = on,
            AblationFlag::NoAttention => self.no_attention = on,
            AblationFlag::NoCtr => self.no_ctr = on,
            AblationFlag::NoEdit => self.no_edit = on,
            AblationFlag::AllTokens => self.all_tokens = on,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub folds: usize,
    /// Train-to-validation ratio.
    pub split_ratio: (usize, usize),
    pub d_hidden: usize,
    pub d_latent: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            lr: AdamState::DEFAULT_LR,
            tau: 0.1,
            seed: 0,
            ablation: Ablation::default(),
            folds: 2,
            split_ratio: (3, 1),
            d_hidden: ModelDims::DESK.d_hidden,
            d_latent: ModelDims::DESK.d_latent,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if self.split_ratio.0 == 0 || self.split_ratio.1 == 0 {
            return Err(Error::Config("split ratio parts must be positive".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("at least 2 folds are needed".into()));
        }
        self.loss_config().validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            recon: true,
            truth: !self.ablation.no_ctr,
            sem: !self.ablation.no_ctr,
            edit: !self.ablation.no_edit,
        }
    }

    pub fn model_flags(&self) -> ModelFlags {
        ModelFlags {
            no_semantic_space: self.ablation.no_semantic_space,
            no_attention: self.ablation.no_attention,
        }
    }

    /// Parse a flat `key = value` file; `#` starts a comment.
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
                "epochs" => c.epochs = v.parse().map_err(|_| num("epochs"))?,
                "batch_size" => c.batch_size = v.parse().map_err(|_| num("batch_size"))?,
                "lr" => c.lr = v.parse().map_err(|_| num("lr"))?,
                "tau" => c.tau = v.parse().map_err(|_| num("tau"))?,
                "seed" => c.seed = v.parse().map_err(|_| num("seed"))?,
                "folds" => c.folds = v.parse().map_err(|_| num("folds"))?,
                "d_hidden" => c.d_hidden = v.parse().map_err(|_| num("d_hidden"))?,
                "d_latent" => c.d_latent = v.parse().map_err(|_| num("d_latent"))?,
                "split_ratio" => {
                    let (a, b) = v.split_once(':').ok_or_else(|| num("split_ratio"))?;
                    c.split_ratio = (
                        a.trim().parse().map_err(|_| num("split_ratio"))?,
                        b.trim().parse().map_err(|_| num("split_ratio"))?,
                    );
                }
                _ => match k.strip_prefix("ablation.") {
                    Some(flag) => {
                        let f: AblationFlag = flag
                            .parse()
                            .map_err(|_| bad(format!("unknown ablation flag `{flag}`")))?;
                        let on = v.parse::<bool>().map_err(|_| num("boolean"))?;
                        c.ablation.set(f, on);
                    }
                    None => return Err(bad(format!("unknown key `{k}`"))),
                },
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "epochs = {}\nbatch_size = {}\nlr = {:e}\ntau = {:e}\nseed = {}\nfolds = {}\nsplit_ratio = {}:{}\nd_hidden = {}\nd_latent = {}\n",
            self.epochs, self.batch_size, self.lr, self.tau, self.seed, self.folds, self.split_ratio.0, self.split_ratio.1, self.d_hidden, self.d_latent
        );
        for f in AblationFlag::ALL {
            s.push_str(&format!(
                "ablation.{} = {}\n",
                f.key(),
                self.ablation.get(f)
            ));
        }
        s
    }
}

/// Partition ids into `k` disjoint test sets; each train set is the complement.
pub fn make_folds(ids: &[u32], k: usize, seed: u64) -> Result<Vec<(Vec<u32>, Vec<u32>)>> {
    if k < 2 {
        return Err(Error::Config("at least 2 folds are needed".into()));
    }
    if ids.len() < k {
        return Err(Error::Contract(format!(
            "{} samples cannot fill {k} folds",
            ids.len()
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut seeded_rng(seed, FOLD_STREAM));
    let folds = (0..k)
        .map(|f| {
            let mut test: Vec<u32> = shuffled.iter().skip(f).step_by(k).copied().collect();
            let mut train: Vec<u32> = shuffled
                .iter()
                .enumerate()
                .filter(|(i, _)| i % k != f)
                .map(|(_, &v)| v)
                .collect();
            test.sort_unstable();
            train.sort_unstable();
            (train, test)
        })
        .collect();
    Ok(folds)
}

/// Random split with `round(n · val / (train + val))` validation ids.
pub fn split_train_val(
    ids: &[u32],
    ratio: (usize, usize),
    seed: u64,
) -> Result<(Vec<u32>, Vec<u32>)> {
    if ratio.0 == 0 || ratio.1 == 0 {
        return Err(Error::Config("split ratio parts must be positive".into()));
    }
    let n = ids.len();
    let n_val = ((n * ratio.1) as f64 / (ratio.0 + ratio.1) as f64).round() as usize;
    if n < 2 || n_val == 0 || n_val == n {
        return Err(Error::Contract(format!(
            "{n} samples are too few to split {}:{}",
            ratio.0, ratio.1
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut seeded_rng(seed, SPLIT_STREAM));
    let mut val = shuffled[..n_val].to_vec();
    let mut train = shuffled[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// Per-site, per-dimension mean and scale, fitted on both polarities.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub stats: BTreeMap<ProbeSite, (Vec<f64>, Vec<f64>)>,
}

impl Standardizer {
    /// Dimensions with (near) zero spread get scale 1.
    pub fn fit(bank: &RepBank) -> Result<Self> {
        if bank.is_empty() {
            return Err(Error::Contract("cannot standardize an empty bank".into()));
        }
        let d = bank.d_model;
        let mut acc: BTreeMap<ProbeSite, (usize, Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for p in &bank.pairs {
            let e = acc
                .entry(p.site)
                .or_insert_with(|| (0, vec![0.0; d], vec![0.0; d]));
            e.0 += 2;
            for x in [&p.x_pos, &p.x_neg] {
                e.1.iter_mut().zip(x.iter()).for_each(|(a, v)| *a += v);
            }
        }
        for (_, (n, sum, _)) in acc.iter_mut() {
            sum.iter_mut().for_each(|v| *v /= *n as f64);
        }
        for p in &bank.pairs {
            let e = acc.get_mut(&p.site).expect("site seen");
            for x in [&p.x_pos, &p.x_neg] {
                for j in 0..d {
                    let c = x[j] - e.1[j];
                    e.2[j] += c * c;
                }
            }
        }
        let stats = acc
            .into_iter()
            .map(|(site, (n, mean, ss))| {
                let scale = ss
                    .iter()
                    .map(|v| (v / n as f64).sqrt())
                    .map(|s| if s > 1e-12 { s } else { 1.0 })
                    .collect();
                (site, (mean, scale))
            })
            .collect();
        Ok(Self { stats })
    }

    fn get(&self, site: ProbeSite) -> Result<&(Vec<f64>, Vec<f64>)> {
        self.stats.get(&site).ok_or_else(|| {
            Error::Contract(format!("no standardization statistics for site {site}"))
        })
    }

    pub fn apply(&self, site: ProbeSite, x: &[f64]) -> Result<Vec<f64>> {
        let (m, s) = self.get(site)?;
        check_len("representation", x, m.len())?;
        Ok(x.iter()
            .zip(m)
            .zip(s)
            .map(|((v, m), s)| (v - m) / s)
            .collect())
    }

    pub fn invert(&self, site: ProbeSite, z: &[f64]) -> Result<Vec<f64>> {
        let (m, s) = self.get(site)?;
        check_len("representation", z, m.len())?;
        Ok(z.iter()
            .zip(m)
            .zip(s)
            .map(|((v, m), s)| v * s + m)
            .collect())
    }

    pub fn scale(&self, site: ProbeSite) -> Result<&[f64]> {
        Ok(&self.get(site)?.1)
    }

    pub fn apply_bank(&self, bank: &RepBank) -> Result<RepBank> {
        let mut out = RepBank::new(bank.d_model, bank.n_layers);
        for p in &bank.pairs {
            let mut q = p.clone();
            q.x_pos = self.apply(p.site, &p.x_pos)?;
            q.x_neg = self.apply(p.site, &p.x_neg)?;
            out.pairs.push(q);
        }
        Ok(out)
    }

    fn write_into(&self, tf: &mut TensorFile) {
        for (site, (m, s)) in &self.stats {
            tf.push_tensor(format!("standardize.{site}.mean"), vec![m.len()], m.clone());
            tf.push_tensor(
                format!("standardize.{site}.scale"),
                vec![s.len()],
                s.clone(),
            );
        }
    }

    fn read_from(tf: &TensorFile) -> Result<Self> {
        let mut stats = BTreeMap::new();
        for t in &tf.tensors {
            if let Some(site) = t
                .name
                .strip_prefix("standardize.")
                .and_then(|r| r.strip_suffix(".mean"))
            {
                let site: ProbeSite = site.parse()?;
                let scale = tf.tensor(&format!("standardize.{site}.scale"))?;
                stats.insert(site, (t.data.clone(), scale.data.clone()));
            }
        }
        Ok(Self { stats })
    }
}

/// Per-epoch record of one training run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    /// Sample-weighted mean of batch losses in each epoch.
    pub losses: Vec<LossBreakdown>,
    /// Validation probing accuracy after each epoch.
    pub val_accuracy: Vec<f64>,
    /// Validation probing accuracy of the untrained model.
    pub initial_val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Splits {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

/// Everything needed to probe and edit with a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedTruthX {
    pub params: TruthXParams,
    pub standardizer: Standardizer,
    /// Global centroids over the training split, all sites pooled.
    pub centroids: Centroids,
    /// Centroids over the training split at each site.
    pub site_centroids: BTreeMap<ProbeSite, Centroids>,
    pub splits: Splits,
}

impl TrainedTruthX {
    pub fn to_container(&self) -> TensorFile {
        let mut tf = TensorFile::new(CHECKPOINT_FORMAT);
        self.params.write_into(&mut tf);
        let ids = |v: &[u32]| {
            v.iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        tf.push_meta("split.train", ids(&self.splits.train));
        tf.push_meta("split.val", ids(&self.splits.val));
        tf.push_meta("split.test", ids(&self.splits.test));
        self.standardizer.write_into(&mut tf);
        let d = self.centroids.mean_pos.len();
        tf.push_tensor("centroid.pos", vec![d], self.centroids.mean_pos.clone());
        tf.push_tensor("centroid.neg", vec![d], self.centroids.mean_neg.clone());
        for (site, c) in &self.site_centroids {
            tf.push_tensor(format!("centroid.{site}.pos"), vec![d], c.mean_pos.clone());
            tf.push_tensor(format!("centroid.{site}.neg"), vec![d], c.mean_neg.clone());
        }
        tf
    }

    pub fn from_container(tf: &TensorFile) -> Result<Self> {
        let params = TruthXParams::from_container(tf)?;
        let ids = |key: &str| -> Result<Vec<u32>> {
            tf.meta(key)?
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse().map_err(|_| Error::Data {
                        line: 0,
                        msg: format!("bad sample id `{s}` in {key}"),
                    })
                })
                .collect()
        };
        let splits = Splits {
            train: ids("split.train")?,
            val: ids("split.val")?,
            test: ids("split.test")?,
        };
        let centroids = Centroids {
            mean_pos: tf.tensor("centroid.pos")?.data.clone(),
            mean_neg: tf.tensor("centroid.neg")?.data.clone(),
        };
        let mut site_centroids = BTreeMap::new();
        for t in &tf.tensors {
            if let Some(site) = t
                .name
                .strip_prefix("centroid.")
                .and_then(|r| r.strip_suffix(".pos"))
            {
                let site: ProbeSite = site.parse()?;
                let neg = tf.tensor(&format!("centroid.{site}.neg"))?;
                site_centroids.insert(
                    site,
                    Centroids {
                        mean_pos: t.data.clone(),
                        mean_neg: neg.data.clone(),
                    },
                );
            }
        }
        Ok(Self {
            params,
            standardizer: Standardizer::read_from(tf)?,
            centroids,
            site_centroids,
            splits,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&TensorFile::load(path, CHECKPOINT_FORMAT)?)
    }

    /// Standardize a raw bank with this model's statistics.
    pub fn standardize(&self, bank: &RepBank) -> Result<RepBank> {
        self.standardizer.apply_bank(bank)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub model: TrainedTruthX,
    pub history: TrainHistory,
}

fn slices(bank: &RepBank, polarity: Polarity) -> Vec<&[f64]> {
    bank.pairs
        .iter()
        .map(|p| match polarity {
            Polarity::Pos => p.x_pos.as_slice(),
            Polarity::Neg => p.x_neg.as_slice(),
        })
        .collect()
}

/// Probing accuracy over both polarities of a standardized bank; zero-norm
/// latents count as misses.
pub fn bank_accuracy(params: &TruthXParams, bank: &RepBank, c: &Centroids) -> Result<f64> {
    if bank.is_empty() {
        return Err(Error::Contract("empty bank".into()));
    }
    let mut hits = 0usize;
    for p in &bank.pairs {
        hits += usize::from(probe_lenient(params, &p.x_pos, c)? == Some(Polarity::Pos));
        hits += usize::from(probe_lenient(params, &p.x_neg, c)? == Some(Polarity::Neg));
    }
    Ok(hits as f64 / (2 * bank.len()) as f64)
}

/// Global and per-site training centroids of a standardized bank.
pub fn bank_centroids(
    params: &TruthXParams,
    bank: &RepBank,
) -> Result<(Centroids, BTreeMap<ProbeSite, Centroids>)> {
    let global = compute_centroids(
        params,
        &slices(bank, Polarity::Pos),
        &slices(bank, Polarity::Neg),
    )?;
    let mut per_site = BTreeMap::new();
    for site in bank.sites() {
        let sub = RepBank {
            d_model: bank.d_model,
            n_layers: bank.n_layers,
            pairs: bank.at_site(site).cloned().collect(),
        };
        per_site.insert(
            site,
            compute_centroids(
                params,
                &slices(&sub, Polarity::Pos),
                &slices(&sub, Polarity::Neg),
            )?,
        );
    }
    Ok((global, per_site))
}

/// Train on the samples of `bank`, holding out a validation split.
/// `test` ids are only recorded in the checkpoint.
pub fn train_with_test(bank: &RepBank, config: &TrainConfig, test: Vec<u32>) -> Result<TrainRun> {
    config.validate()?;
    if bank.is_empty() {
        return Err(Error::Contract("empty representation bank".into()));
    }
    let (train_ids, val_ids) =
        split_train_val(&bank.sample_ids(), config.split_ratio, config.seed)?;
    let raw_train = bank.subset(&train_ids);
    let standardizer = Standardizer::fit(&raw_train)?;
    let train_bank = standardizer.apply_bank(&raw_train)?;
    let val_bank = standardizer.apply_bank(&bank.subset(&val_ids))?;
    if train_bank.len() < 2 {
        return Err(Error::Contract(
            "training split needs at least two pairs".into(),
        ));
    }
    let dims = ModelDims {
        d_model: bank.d_model,
        d_hidden: config.d_hidden,
        d_latent: config.d_latent,
    };
    let mut params = TruthXParams::init(dims, config.model_flags(), config.seed)?;
    let loss_cfg = config.loss_config();
    let mut adam = AdamState::new(params.num_params(), config.lr);
    let mut history = TrainHistory::default();
    let val_acc = |p: &TruthXParams| -> Result<f64> {
        let c = compute_centroids(
            p,
            &slices(&train_bank, Polarity::Pos),
            &slices(&train_bank, Polarity::Neg),
        )?;
        bank_accuracy(p, &val_bank, &c)
    };
    history.initial_val_accuracy = val_acc(&params)?;

    let n = train_bank.len();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeded_rng(config.seed, EPOCH_STREAM + epoch as u64));
        let mut batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        // A trailing singleton cannot form a contrastive batch; merge it.
        if batches.len() > 1 && batches.last().map_or(false, |b| b.len() < 2) {
            let k = batches.len();
            batches[k - 2] = &order[(k - 2) * config.batch_size..];
            batches.pop();
        }
        let mut epoch_loss = LossBreakdown::default();
        for batch in batches {
            let x_pos: Vec<Vec<f64>> = batch
                .iter()
                .map(|&i| train_bank.pairs[i].x_pos.clone())
                .collect();
            let x_neg: Vec<Vec<f64>> = batch
                .iter()
                .map(|&i| train_bank.pairs[i].x_neg.clone())
                .collect();
            let (loss, grads) = total_loss(&params, &x_pos, &x_neg, &loss_cfg)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss in epoch {epoch}: {loss:?}"
                )));
            }
            epoch_loss.accumulate(&loss, batch.len() as f64 / n as f64);
            adam.step(&mut params, &grads)?;
        }
        history.losses.push(epoch_loss);
        history.val_accuracy.push(val_acc(&params)?);
        log::debug!(
            "epoch {epoch}: total {:.5} val acc {:.4}",
            epoch_loss.l_total,
            history.val_accuracy[epoch]
        );
    }
    let (centroids, site_centroids) = bank_centroids(&params, &train_bank)?;
    let splits = Splits {
        train: train_ids,
        val: val_ids,
        test,
    };
    Ok(TrainRun {
        model: TrainedTruthX {
            params,
            standardizer,
            centroids,
            site_centroids,
            splits,
        },
        history,
    })
}

/// Train on every sample of `bank` (split into train and validation).
pub fn train(bank: &RepBank, config: &TrainConfig) -> Result<TrainRun> {
    train_with_test(bank, config, Vec::new())
}

/// One run per fold, each trained on the fold complement.
pub fn train_folds(bank: &RepBank, config: &TrainConfig) -> Result<Vec<TrainRun>> {
    config.validate()?;
    make_folds(&bank.sample_ids(), config.folds, config.seed)?
        .into_iter()
        .map(|(train_ids, test_ids)| train_with_test(&bank.subset(&train_ids), config, test_ids))
        .collect()
}

/// Probing accuracy per site on a fold's held-out samples.
pub fn heldout_site_accuracy(
    model: &TrainedTruthX,
    raw_bank: &RepBank,
) -> Result<Vec<crate::probe::SiteScore>> {
    let test = model.standardize(&raw_bank.subset(&model.splits.test))?;
    test.sites()
        .into_iter()
        .map(|site| {
            let pairs: Vec<_> = test.at_site(site).collect();
            let pos: Vec<&[f64]> = pairs.iter().map(|p| p.x_pos.as_slice()).collect();
            let neg: Vec<&[f64]> = pairs.iter().map(|p| p.x_neg.as_slice()).collect();
            crate::probe::site_accuracy(&model.params, site, &pos, &neg, &model.centroids)
        })
        .collect()
}

/// Summary of one ablation run.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub flags: Vec<AblationFlag>,
    pub final_loss: LossBreakdown,
    pub final_val_accuracy: f64,
    /// Mean over folds and sites of held-out probing accuracy.
    pub heldout_accuracy: f64,
    pub runs: Vec<TrainRun>,
}

impl AblationRow {
    pub fn label(&self) -> String {
        if self.flags.is_empty() {
            "base".into()
        } else {
            self.flags
                .iter()
                .map(|f| f.key())
                .collect::<Vec<_>>()
                .join("+")
        }
    }
}

/// Base run followed by one run per flag set. `bank_for(all_tokens)` supplies
/// the bank, so the all-tokens row can use a differently extracted bank.
pub fn run_ablation_grid(
    bank_for: &dyn Fn(bool) -> Result<RepBank>,
    base: &TrainConfig,
    flag_sets: &[Vec<AblationFlag>],
) -> Result<Vec<AblationRow>> {
    let mut sets = vec![Vec::new()];
    sets.extend(flag_sets.iter().cloned());
    sets.into_iter()
        .map(|flags| {
            let mut cfg = base.clone();
            for &f in &flags {
                cfg.ablation.set(f, true);
            }
            let bank = bank_for(cfg.ablation.all_tokens)?;
            let runs = train_folds(&bank, &cfg)?;
            let mut acc = Vec::new();
            for r in &runs {
                acc.extend(
                    heldout_site_accuracy(&r.model, &bank)?
                        .into_iter()
                        .map(|s| s.accuracy),
                );
            }
            let last = runs.last().expect("at least two folds");
            Ok(AblationRow {
                flags,
                final_loss: *last.history.losses.last().expect("epochs >= 1"),
                final_val_accuracy: *last.history.val_accuracy.last().expect("epochs >= 1"),
                heldout_accuracy: acc.iter().sum::<f64>() / acc.len().max(1) as f64,
                runs,
            })
        })
        .collect()
}
