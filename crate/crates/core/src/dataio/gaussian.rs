// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gaussian-separable representation bank with a known Bayes accuracy.
//!
//! At each site `x = W·s + polarity·u + noise`, where `s` is the semantic
//! vector of the token, `W` is drawn per site, `u` is shared by all sites and
//! orthogonal to the columns of every `W`, and the noise
//! is isotropic with scale `sigma`. Projecting on `u` gives the Bayes rule, so
//! the best achievable accuracy is `Phi(|u| / sigma)`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use super::bank::{RepBank, RepPair, TokenKey};
use crate::error::{Error, Result};
use crate::numkit::{dot, norm, seeded_rng};
use crate::site::ProbeSite;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBankConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub tokens_per_sample: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub d_semantic: usize,
    pub n_token_types: usize,
    pub sigma: f64,
    /// Norm of the polarity offset `u`.
    pub signal: f64,
    /// Scale of the semantic part `W·s`.
    pub semantic_scale: f64,
}

impl Default for GaussianBankConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_samples: 160,
            tokens_per_sample: 3,
            n_layers: 4,
            d_model: 64,
            d_semantic: 8,
            n_token_types: 24,
            sigma: 0.5,
            signal: 1.5,
            semantic_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GaussianBank {
    pub bank: RepBank,
    /// Polarity offset `u`, shared by every site.
    pub offset: Vec<f64>,
    pub bayes_accuracy: f64,
}

fn gaussian_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

pub fn gen_gaussian_bank(cfg: &GaussianBankConfig) -> Result<GaussianBank> {
    if cfg.d_semantic + 1 > cfg.d_model
        || cfg.n_samples < 2
        || cfg.tokens_per_sample == 0
        || cfg.n_token_types == 0
    {
        return Err(Error::Config(format!(
            "invalid synthetic bank configuration {cfg:?}"
        )));
    }
    if !(cfg.sigma > 0.0 && cfg.signal > 0.0 && cfg.semantic_scale > 0.0) {
        return Err(Error::Config(
            "sigma, signal and semantic_scale must be positive".into(),
        ));
    }
    let (d, k) = (cfg.d_model, cfg.d_semantic);
    let mut rng = seeded_rng(cfg.seed, 0x6761_7573_73);
    let types: Vec<Vec<f64>> = (0..cfg.n_token_types)
        .map(|_| gaussian_vec(&mut rng, k, 1.0))
        .collect();
    let sites = ProbeSite::all(cfg.n_layers);
    let mut u = gaussian_vec(&mut rng, d, 1.0);
    let n = norm(&u);
    u.iter_mut().for_each(|v| *v *= cfg.signal / n);
    let unit: Vec<f64> = u.iter().map(|v| v / cfg.signal).collect();
    // Per-site columns of W with the polarity axis projected out.
    let mixes: Vec<Vec<Vec<f64>>> = sites
        .iter()
        .map(|_| {
            (0..k)
                .map(|_| {
                    let mut c = gaussian_vec(&mut rng, d, cfg.semantic_scale / (k as f64).sqrt());
                    let p = dot(&c, &unit);
                    c.iter_mut().zip(&unit).for_each(|(ci, ui)| *ci -= p * ui);
                    c
                })
                .collect()
        })
        .collect();
    let mut bank = RepBank::new(d, cfg.n_layers);
    for sample in 0..cfg.n_samples {
        let toks: Vec<usize> = (0..cfg.tokens_per_sample)
            .map(|_| rng.gen_range(0..cfg.n_token_types))
            .collect();
        for (si, &site) in sites.iter().enumerate() {
            for (occ, &t) in toks.iter().enumerate() {
                let mut base = vec![0.0; d];
                for (c, s) in mixes[si].iter().zip(&types[t]) {
                    base.iter_mut().zip(c).for_each(|(b, ci)| *b += s * ci);
                }
                let mut draw = |sign: f64| -> Vec<f64> {
                    let noise = gaussian_vec(&mut rng, d, cfg.sigma);
                    base.iter()
                        .zip(&u)
                        .zip(noise)
                        .map(|((b, ui), e)| b + sign * ui + e)
                        .collect()
                };
                let x_pos = draw(1.0);
                let x_neg = draw(-1.0);
                bank.push(RepPair {
                    sample: sample as u32,
                    site,
                    key: TokenKey::shared(t as u32, occ as u32),
                    x_pos,
                    x_neg,
                })?;
            }
        }
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Ok(GaussianBank {
        bank,
        offset: u,
        bayes_accuracy: normal.cdf(cfg.signal / cfg.sigma),
    })
}
