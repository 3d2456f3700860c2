// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training objectives for the auto-encoder and their analytic gradients.
//!
//! The total objective is `L = L_recon + (L_truth + L_sem) + L_edit`. All
//! per-sample terms are averaged over the batch; the two polarity terms of
//! each contrastive loss are summed. The anchor is excluded from its own
//! positive set in both contrastive losses.

use crate::error::{Error, Result};
use crate::model::{SwapPair, TruthXParams};
use crate::numkit::{axpy, cosine_sim, cosine_with_grad, dot, log_sum_exp, norm, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub recon: bool,
    /// Truthful-space contrastive term.
    pub truth: bool,
    /// Semantic-space contrastive term; also off when the model has no
    /// semantic space.
    pub sem: bool,
    pub edit: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            recon: true,
            truth: true,
            sem: true,
            edit: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_recon: f64,
    pub l_truth: f64,
    pub l_sem: f64,
    pub l_ctr: f64,
    pub l_edit: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.l_recon,
            self.l_truth,
            self.l_sem,
            self.l_ctr,
            self.l_edit,
            self.l_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub(crate) fn accumulate(&mut self, other: &Self, w: f64) {
        self.l_recon += w * other.l_recon;
        self.l_truth += w * other.l_truth;
        self.l_sem += w * other.l_sem;
        self.l_ctr += w * other.l_ctr;
        self.l_edit += w * other.l_edit;
        self.l_total += w * other.l_total;
    }
}

/// Aligned inputs and latents for one batch; index `i` pairs the same token
/// under opposite truthfulness.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchBank {
    pub x_pos: Vec<Vec<f64>>,
    pub x_neg: Vec<Vec<f64>>,
    pub h_truth_pos: Vec<Vec<f64>>,
    pub h_truth_neg: Vec<Vec<f64>>,
    pub h_sem_pos: Vec<Vec<f64>>,
    pub h_sem_neg: Vec<Vec<f64>>,
}

impl BatchBank {
    /// Encode aligned pairs with `params`.
    pub fn encode(params: &TruthXParams, x_pos: &[Vec<f64>], x_neg: &[Vec<f64>]) -> Result<Self> {
        if x_pos.len() != x_neg.len() {
            return Err(Error::Contract(format!(
                "{} positive vs {} negative inputs",
                x_pos.len(),
                x_neg.len()
            )));
        }
        let mut bank = Self {
            x_pos: x_pos.to_vec(),
            x_neg: x_neg.to_vec(),
            h_truth_pos: Vec::with_capacity(x_pos.len()),
            h_truth_neg: Vec::with_capacity(x_pos.len()),
            h_sem_pos: Vec::with_capacity(x_pos.len()),
            h_sem_neg: Vec::with_capacity(x_pos.len()),
        };
        for (p, n) in x_pos.iter().zip(x_neg) {
            let lp = params.encode(p)?;
            let ln = params.encode(n)?;
            bank.h_truth_pos.push(lp.h_truth);
            bank.h_sem_pos.push(lp.h_sem);
            bank.h_truth_neg.push(ln.h_truth);
            bank.h_sem_neg.push(ln.h_sem);
        }
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.h_truth_pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_contrastive(&self) -> Result<()> {
        let b = self.len();
        if [
            self.h_truth_neg.len(),
            self.h_sem_pos.len(),
            self.h_sem_neg.len(),
        ]
        .iter()
        .any(|&l| l != b)
        {
            return Err(Error::Contract("batch bank lists are not aligned".into()));
        }
        if b < 2 {
            return Err(Error::Contract(format!(
                "contrastive losses need at least 2 pairs, got {b}"
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Generic contrastive term
// ---------------------------------------------------------------------------

/// Gradients of one contrastive term.
#[derive(Debug, Clone)]
pub struct CtrGrad {
    pub value: f64,
    pub d_s: Vec<f64>,
    pub d_plus: Vec<Vec<f64>>,
    pub d_minus: Vec<Vec<f64>>,
}

fn ctr_logits(s: &[f64], plus: &[&[f64]], minus: &[&[f64]], tau: f64) -> Result<Vec<f64>> {
    if plus.is_empty() {
        return Err(Error::Contract("contrastive positive set is empty".into()));
    }
    plus.iter()
        .chain(minus)
        .map(|m| Ok(cosine_sim(s, m)? / tau))
        .collect()
}

/// `-log( Σ_{S+} exp(cos/τ) / Σ_{S+ ∪ S-} exp(cos/τ) )`.
pub fn ctr(s: &[f64], plus: &[&[f64]], minus: &[&[f64]], tau: f64) -> Result<f64> {
    let logits = ctr_logits(s, plus, minus, tau)?;
    let lse_all = crate::numkit::log_sum_exp(&logits);
    let lse_plus = crate::numkit::log_sum_exp(&logits[..plus.len()]);
    Ok((lse_all - lse_plus).max(0.0))
}

/// [`ctr`] with gradients with respect to the anchor and every set member.
pub fn ctr_with_grad(s: &[f64], plus: &[&[f64]], minus: &[&[f64]], tau: f64) -> Result<CtrGrad> {
    if plus.is_empty() {
        return Err(Error::Contract("contrastive positive set is empty".into()));
    }
    let members: Vec<&[f64]> = plus.iter().chain(minus).copied().collect();
    let mut cos = Vec::with_capacity(members.len());
    for m in &members {
        cos.push(cosine_with_grad(s, m)?);
    }
    let logits: Vec<f64> = cos.iter().map(|c| c.0 / tau).collect();
    let np = plus.len();
    let lse_all = crate::numkit::log_sum_exp(&logits);
    let lse_plus = crate::numkit::log_sum_exp(&logits[..np]);
    let value = (lse_all - lse_plus).max(0.0);

    let mut d_s = vec![0.0; s.len()];
    let mut d_members = Vec::with_capacity(members.len());
    for (j, (_, ds_j, dm_j)) in cos.iter().enumerate() {
        let mut dl = (logits[j] - lse_all).exp();
        if j < np {
            dl -= (logits[j] - lse_plus).exp();
        }
        let dc = dl / tau;
        axpy(dc, ds_j, &mut d_s);
        d_members.push(dm_j.iter().map(|v| dc * v).collect::<Vec<f64>>());
    }
    let d_minus = d_members.split_off(np);
    Ok(CtrGrad {
        value,
        d_s,
        d_plus: d_members,
        d_minus,
    })
}

// ---------------------------------------------------------------------------
// Space-specific contrastive losses
// ---------------------------------------------------------------------------

/// Gradients with respect to the four latent lists of a [`BatchBank`].
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrads {
    pub truth_pos: Vec<Vec<f64>>,
    pub truth_neg: Vec<Vec<f64>>,
    pub sem_pos: Vec<Vec<f64>>,
    pub sem_neg: Vec<Vec<f64>>,
}

impl LatentGrads {
    pub fn zeros(b: usize, d: usize) -> Self {
        Self {
            truth_pos: vec![vec![0.0; d]; b],
            truth_neg: vec![vec![0.0; d]; b],
            sem_pos: vec![vec![0.0; d]; b],
            sem_neg: vec![vec![0.0; d]; b],
        }
    }
}

fn others<'a>(set: &'a [Vec<f64>], skip: usize) -> (Vec<&'a [f64]>, Vec<usize>) {
    let mut v = Vec::with_capacity(set.len().saturating_sub(1));
    let mut idx = Vec::with_capacity(set.len().saturating_sub(1));
    for (j, x) in set.iter().enumerate() {
        if j != skip {
            v.push(x.as_slice());
            idx.push(j);
        }
    }
    (v, idx)
}

fn all_refs(set: &[Vec<f64>]) -> Vec<&[f64]> {
    set.iter().map(|v| v.as_slice()).collect()
}

/// Truthful-space loss: same polarity attracts, opposite polarity repels.
pub fn loss_truth(bank: &BatchBank, tau: f64) -> Result<f64> {
    bank.check_contrastive()?;
    let b = bank.len();
    let mut total = 0.0;
    for i in 0..b {
        let (pp, _) = others(&bank.h_truth_pos, i);
        total += ctr(&bank.h_truth_pos[i], &pp, &all_refs(&bank.h_truth_neg), tau)?;
        let (nn, _) = others(&bank.h_truth_neg, i);
        total += ctr(&bank.h_truth_neg[i], &nn, &all_refs(&bank.h_truth_pos), tau)?;
    }
    Ok(total / b as f64)
}

/// Semantic-space loss: a token's opposite-polarity partner attracts, other
/// tokens of the same polarity repel.
pub fn loss_sem(bank: &BatchBank, tau: f64) -> Result<f64> {
    bank.check_contrastive()?;
    let b = bank.len();
    let mut total = 0.0;
    for i in 0..b {
        let (pm, _) = others(&bank.h_sem_pos, i);
        total += ctr(&bank.h_sem_pos[i], &[&bank.h_sem_neg[i]], &pm, tau)?;
        let (nm, _) = others(&bank.h_sem_neg, i);
        total += ctr(&bank.h_sem_neg[i], &[&bank.h_sem_pos[i]], &nm, tau)?;
    }
    Ok(total / b as f64)
}

/// Batched contrastive evaluation over one latent space.
///
/// Vectors `0..b` are the positive-polarity latents and `b..2b` the negative
/// ones. `sets(a)` gives the positive and negative member indices for anchor
/// `a`. Returns the mean over anchors pairs (sum of both polarities per index)
/// and the gradient of that mean for every vector.
fn contrastive_space(
    pos: &[Vec<f64>],
    neg: &[Vec<f64>],
    tau: f64,
    sets: impl Fn(usize) -> (Vec<usize>, Vec<usize>),
) -> Result<(f64, Vec<Vec<f64>>)> {
    let b = pos.len();
    let n = 2 * b;
    let all: Vec<&[f64]> = pos.iter().chain(neg).map(|v| v.as_slice()).collect();
    let mut norms = Vec::with_capacity(n);
    let mut units = Vec::with_capacity(n);
    for v in &all {
        let nv = norm(v);
        if nv == 0.0 {
            return Err(Error::Degenerate(
                "cosine similarity of a zero-norm vector".into(),
            ));
        }
        norms.push(nv);
        units.push(v.iter().map(|x| x / nv).collect::<Vec<f64>>());
    }
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let c = dot(&units[i], &units[j]);
            gram[i * n + j] = c;
            gram[j * n + i] = c;
        }
    }
    // coef[i*n + j]: derivative of the loss with respect to cos(v_i, v_j).
    let mut coef = vec![0.0; n * n];
    let w = 1.0 / b as f64;
    let mut total = 0.0;
    let mut logits = Vec::with_capacity(n);
    for a in 0..n {
        let (plus, minus) = sets(a);
        if plus.is_empty() {
            return Err(Error::Contract("contrastive positive set is empty".into()));
        }
        logits.clear();
        logits.extend(plus.iter().chain(&minus).map(|&j| gram[a * n + j] / tau));
        let np = plus.len();
        let lse_all = log_sum_exp(&logits);
        let lse_plus = log_sum_exp(&logits[..np]);
        total += (lse_all - lse_plus).max(0.0);
        for (k, &j) in plus.iter().chain(&minus).enumerate() {
            let mut dl = (logits[k] - lse_all).exp();
            if k < np {
                dl -= (logits[k] - lse_plus).exp();
            }
            coef[a * n + j] += w * dl / tau;
        }
    }
    let mut grads = vec![vec![0.0; units[0].len()]; n];
    for i in 0..n {
        let g = &mut grads[i];
        for j in 0..n {
            let c = coef[i * n + j] + coef[j * n + i];
            if c != 0.0 {
                let cij = gram[i * n + j];
                for ((gk, uj), ui) in g.iter_mut().zip(&units[j]).zip(&units[i]) {
                    *gk += c * (uj - cij * ui);
                }
            }
        }
        g.iter_mut().for_each(|v| *v /= norms[i]);
    }
    Ok((total * w, grads))
}

fn add_grads(g_pos: &mut [Vec<f64>], g_neg: &mut [Vec<f64>], grads: &[Vec<f64>]) {
    let b = g_pos.len();
    for (i, d) in grads.iter().enumerate() {
        let target = if i < b {
            &mut g_pos[i]
        } else {
            &mut g_neg[i - b]
        };
        axpy(1.0, d, target);
    }
}

/// [`loss_truth`] with latent gradients accumulated into `g`.
pub fn loss_truth_grad(bank: &BatchBank, tau: f64, g: &mut LatentGrads) -> Result<f64> {
    bank.check_contrastive()?;
    let b = bank.len();
    let (value, grads) = contrastive_space(&bank.h_truth_pos, &bank.h_truth_neg, tau, |a| {
        let (own, other) = if a < b { (0, b) } else { (b, 0) };
        let plus = (own..own + b).filter(|&j| j != a).collect();
        (plus, (other..other + b).collect())
    })?;
    add_grads(&mut g.truth_pos, &mut g.truth_neg, &grads);
    Ok(value)
}

/// [`loss_sem`] with latent gradients accumulated into `g`.
pub fn loss_sem_grad(bank: &BatchBank, tau: f64, g: &mut LatentGrads) -> Result<f64> {
    bank.check_contrastive()?;
    let b = bank.len();
    let (value, grads) = contrastive_space(&bank.h_sem_pos, &bank.h_sem_neg, tau, |a| {
        let (own, partner) = if a < b { (0, a + b) } else { (b, a - b) };
        let minus = (own..own + b).filter(|&j| j != a).collect();
        (vec![partner], minus)
    })?;
    add_grads(&mut g.sem_pos, &mut g.sem_neg, &grads);
    Ok(value)
}

// ---------------------------------------------------------------------------
// Reconstruction and editing losses
// ---------------------------------------------------------------------------

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(crate::error::shape_err("MSE operands", a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Batch mean of per-sample mean squared error.
pub fn loss_recon(x: &[Vec<f64>], x_rec: &[Vec<f64>]) -> Result<f64> {
    if x.len() != x_rec.len() {
        return Err(crate::error::shape_err(
            "reconstruction batch",
            x.len(),
            x_rec.len(),
        ));
    }
    if x.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (a, b) in x.iter().zip(x_rec) {
        total += mse(a, b)?;
    }
    Ok(total / x.len() as f64)
}

/// Batch mean of `MSE(x_neg, x_pos→neg) + MSE(x_pos, x_neg→pos)`.
pub fn loss_edit(bank: &BatchBank, swaps: &[SwapPair]) -> Result<f64> {
    if swaps.len() != bank.x_pos.len() || bank.x_neg.len() != bank.x_pos.len() {
        return Err(Error::Contract(format!(
            "{} swap pairs for {} input pairs",
            swaps.len(),
            bank.x_pos.len()
        )));
    }
    if swaps.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, s) in swaps.iter().enumerate() {
        total += mse(&bank.x_neg[i], &s.x_pos_to_neg)? + mse(&bank.x_pos[i], &s.x_neg_to_pos)?;
    }
    Ok(total / swaps.len() as f64)
}

/// `d MSE(target, out) / d out`, scaled by `w`.
fn mse_grad(target: &[f64], out: &[f64], w: f64) -> Vec<f64> {
    let n = out.len() as f64;
    out.iter()
        .zip(target)
        .map(|(o, t)| w * 2.0 * (o - t) / n)
        .collect()
}

/// Full objective with exact gradients with respect to every parameter.
///
/// The semantic contrastive term is dropped when the model runs without a
/// semantic space.
pub fn total_loss(
    params: &TruthXParams,
    x_pos: &[Vec<f64>],
    x_neg: &[Vec<f64>],
    config: &LossConfig,
) -> Result<(LossBreakdown, TruthXParams)> {
    config.validate()?;
    if x_pos.len() != x_neg.len() {
        return Err(Error::Contract(format!(
            "{} positive vs {} negative inputs",
            x_pos.len(),
            x_neg.len()
        )));
    }
    let b = x_pos.len();
    if b == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let d_latent = params.dims.d_latent;
    let mut grads = params.zeros_like();

    let mut enc_pos = Vec::with_capacity(b);
    let mut enc_neg = Vec::with_capacity(b);
    let mut bank = BatchBank {
        x_pos: x_pos.to_vec(),
        x_neg: x_neg.to_vec(),
        h_truth_pos: Vec::with_capacity(b),
        h_truth_neg: Vec::with_capacity(b),
        h_sem_pos: Vec::with_capacity(b),
        h_sem_neg: Vec::with_capacity(b),
    };
    for i in 0..b {
        let (lp, cp) = params.encode_cached(&x_pos[i])?;
        let (ln, cn) = params.encode_cached(&x_neg[i])?;
        bank.h_truth_pos.push(lp.h_truth);
        bank.h_sem_pos.push(lp.h_sem);
        bank.h_truth_neg.push(ln.h_truth);
        bank.h_sem_neg.push(ln.h_sem);
        enc_pos.push(cp);
        enc_neg.push(cn);
    }

    let mut lg = LatentGrads::zeros(b, d_latent);
    let mut out = LossBreakdown::default();

    if config.recon {
        let w = 1.0 / (2 * b) as f64;
        for i in 0..b {
            for positive in [true, false] {
                let (x, hs, ht) = if positive {
                    (&x_pos[i], &bank.h_sem_pos[i], &bank.h_truth_pos[i])
                } else {
                    (&x_neg[i], &bank.h_sem_neg[i], &bank.h_truth_neg[i])
                };
                let (xr, cache) = params.decode_latents(hs, ht)?;
                out.l_recon += w * mse(x, &xr)?;
                let dx = mse_grad(x, &xr, w);
                let (dhs, dht) = params.backward_decode(&cache, &dx, &mut grads)?;
                let (sem, tru) = if positive {
                    (&mut lg.sem_pos, &mut lg.truth_pos)
                } else {
                    (&mut lg.sem_neg, &mut lg.truth_neg)
                };
                axpy(1.0, &dhs, &mut sem[i]);
                axpy(1.0, &dht, &mut tru[i]);
            }
        }
    }

    if config.edit {
        let w = 1.0 / b as f64;
        for i in 0..b {
            // pos -> neg: semantic latent of pos, truthful latent of neg.
            let (xpn, cache) = params.decode_latents(&bank.h_sem_pos[i], &bank.h_truth_neg[i])?;
            out.l_edit += w * mse(&x_neg[i], &xpn)?;
            let (dhs, dht) =
                params.backward_decode(&cache, &mse_grad(&x_neg[i], &xpn, w), &mut grads)?;
            axpy(1.0, &dhs, &mut lg.sem_pos[i]);
            axpy(1.0, &dht, &mut lg.truth_neg[i]);

            let (xnp, cache) = params.decode_latents(&bank.h_sem_neg[i], &bank.h_truth_pos[i])?;
            out.l_edit += w * mse(&x_pos[i], &xnp)?;
            let (dhs, dht) =
                params.backward_decode(&cache, &mse_grad(&x_pos[i], &xnp, w), &mut grads)?;
            axpy(1.0, &dhs, &mut lg.sem_neg[i]);
            axpy(1.0, &dht, &mut lg.truth_pos[i]);
        }
    }

    if config.truth {
        out.l_truth = loss_truth_grad(&bank, config.tau, &mut lg)?;
    }
    if config.sem && !params.flags.no_semantic_space {
        out.l_sem = loss_sem_grad(&bank, config.tau, &mut lg)?;
    }
    out.l_ctr = out.l_truth + out.l_sem;

    for i in 0..b {
        params.backward_encode(&enc_pos[i], &lg.truth_pos[i], &lg.sem_pos[i], &mut grads)?;
        params.backward_encode(&enc_neg[i], &lg.truth_neg[i], &lg.sem_neg[i], &mut grads)?;
    }

    out.l_total = out.l_recon + out.l_ctr + out.l_edit;
    Ok((out, grads))
}

/// Objective value only; evaluated through the public forward operations.
pub fn total_loss_value(
    params: &TruthXParams,
    x_pos: &[Vec<f64>],
    x_neg: &[Vec<f64>],
    config: &LossConfig,
) -> Result<LossBreakdown> {
    config.validate()?;
    let bank = BatchBank::encode(params, x_pos, x_neg)?;
    let mut out = LossBreakdown::default();
    if config.recon {
        let mut xs = x_pos.to_vec();
        xs.extend_from_slice(x_neg);
        let rec: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| params.reconstruct(x))
            .collect::<Result<_>>()?;
        out.l_recon = loss_recon(&xs, &rec)?;
    }
    if config.edit {
        let swaps: Vec<SwapPair> = x_pos
            .iter()
            .zip(x_neg)
            .map(|(p, n)| params.swap_reconstruct(p, n))
            .collect::<Result<_>>()?;
        out.l_edit = loss_edit(&bank, &swaps)?;
    }
    if config.truth {
        out.l_truth = loss_truth(&bank, config.tau)?;
    }
    if config.sem && !params.flags.no_semantic_space {
        out.l_sem = loss_sem(&bank, config.tau)?;
    }
    out.l_ctr = out.l_truth + out.l_sem;
    out.l_total = out.l_recon + out.l_ctr + out.l_edit;
    Ok(out)
}
