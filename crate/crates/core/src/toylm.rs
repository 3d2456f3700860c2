// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small decoder-only transformer with tapped and editable module outputs.
//!
//! Blocks are pre-norm: `h += Attn(LN1(h)); h += Ffn(LN2(h))`. The tap of a
//! site is the module output added to the residual stream, after any edit.
//! Parameters live in one flat vector described by a name/shape layout, so
//! gradients and optimizer state share the same indexing.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::dataio::Vocab;
use crate::error::{Error, Result};
use crate::numkit::{log_sum_exp, seeded_rng, AdamState, ParamSet, TensorView};
use crate::site::ProbeSite;
use crate::tensorfile::TensorFile;

pub const LM_FORMAT: &str = "toylm-ckpt/1";
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyLmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl ToyLmConfig {
    /// Desk-scale shape: 64 wide, 4 layers (8 sites), 4 heads.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 128,
            max_len: 16,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.d_ff == 0
        {
            return Err(Error::Config(format!(
                "toy LM sizes must be positive: {self:?}"
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        Ok(())
    }

    pub fn sites(&self) -> Vec<ProbeSite> {
        ProbeSite::all(self.n_layers)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BlockIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    entries: Vec<(String, Vec<usize>, usize)>,
    tok_emb: usize,
    pos_emb: usize,
    blocks: Vec<BlockIdx>,
    lnf_g: usize,
    lnf_b: usize,
    out_w: usize,
    out_b: usize,
    total: usize,
}

impl Layout {
    fn new(c: &ToyLmConfig) -> Self {
        let mut entries = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let off = total;
            total += shape.iter().product::<usize>();
            entries.push((name, shape, off));
            off
        };
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
        let tok_emb = push("tok_emb".into(), vec![v, d]);
        let pos_emb = push("pos_emb".into(), vec![c.max_len, d]);
        let blocks = (0..c.n_layers)
            .map(|l| {
                let mut p = |s: &str, shape: Vec<usize>| push(format!("blocks.{l}.{s}"), shape);
                BlockIdx {
                    ln1_g: p("ln1.gain", vec![d]),
                    ln1_b: p("ln1.bias", vec![d]),
                    wq: p("attn.wq", vec![d, d]),
                    bq: p("attn.bq", vec![d]),
                    wk: p("attn.wk", vec![d, d]),
                    bk: p("attn.bk", vec![d]),
                    wv: p("attn.wv", vec![d, d]),
                    bv: p("attn.bv", vec![d]),
                    wo: p("attn.wo", vec![d, d]),
                    bo: p("attn.bo", vec![d]),
                    ln2_g: p("ln2.gain", vec![d]),
                    ln2_b: p("ln2.bias", vec![d]),
                    w1: p("ffn.w1", vec![f, d]),
                    b1: p("ffn.b1", vec![f]),
                    w2: p("ffn.w2", vec![d, f]),
                    b2: p("ffn.b2", vec![d]),
                }
            })
            .collect();
        let lnf_g = push("ln_f.gain".into(), vec![d]);
        let lnf_b = push("ln_f.bias".into(), vec![d]);
        let out_w = push("unembed.weight".into(), vec![v, d]);
        let out_b = push("unembed.bias".into(), vec![v]);
        Self {
            entries,
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            out_w,
            out_b,
            total,
        }
    }
}

/// Toy LM weights in one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLmParams {
    pub config: ToyLmConfig,
    layout: Layout,
    pub data: Vec<f64>,
}

impl ParamSet for ToyLmParams {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        self.layout
            .entries
            .iter()
            .map(|(name, shape, off)| {
                let n: usize = shape.iter().product();
                TensorView {
                    name: name.clone(),
                    shape: shape.clone(),
                    data: &self.data[*off..off + n],
                }
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layout.entries.len());
        let mut rest: &mut [f64] = &mut self.data;
        for (_, shape, _) in &self.layout.entries {
            let n: usize = shape.iter().product();
            let (head, tail) = rest.split_at_mut(n);
            out.push(head);
            rest = tail;
        }
        out
    }

    fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            layout: self.layout.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    fn flatten(&self) -> Vec<f64> {
        self.data.clone()
    }
}

/// Replaces module outputs at chosen sites.
pub trait SiteEditor: Sync {
    fn sites(&self) -> Vec<ProbeSite>;
    /// Edit one module output vector in place.
    fn edit(&self, site: ProbeSite, x: &mut [f64]) -> Result<()>;
}

/// Token positions an editor applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditScope {
    AllPositions,
    /// Positions at or after the given index (the generated part).
    FromPosition(usize),
}

impl EditScope {
    fn covers(&self, pos: usize) -> bool {
        match *self {
            EditScope::AllPositions => true,
            EditScope::FromPosition(p) => pos >= p,
        }
    }
}

/// One module output at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct TapRecord {
    pub site: ProbeSite,
    pub position: usize,
    pub vector: Vec<f64>,
}

/// Module outputs of one forward pass, plus residual states between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Taps {
    pub len: usize,
    pub d_model: usize,
    /// `outputs[site.index()]` is `len × d_model`, row per position.
    pub outputs: Vec<Vec<f64>>,
    /// `hidden[l]` is the residual stream entering layer `l`; the last entry
    /// is the stream after the final layer.
    pub hidden: Vec<Vec<f64>>,
}

impl Taps {
    pub fn get(&self, site: ProbeSite, position: usize) -> &[f64] {
        let d = self.d_model;
        &self.outputs[site.index()][position * d..(position + 1) * d]
    }

    pub fn hidden_at(&self, layer: usize, position: usize) -> &[f64] {
        let d = self.d_model;
        &self.hidden[layer][position * d..(position + 1) * d]
    }

    /// Records ordered by position, then site.
    pub fn records(&self) -> Vec<TapRecord> {
        let n_layers = self.outputs.len() / 2;
        let mut out = Vec::with_capacity(self.len * self.outputs.len());
        for position in 0..self.len {
            for site in ProbeSite::all(n_layers) {
                out.push(TapRecord {
                    site,
                    position,
                    vector: self.get(site, position).to_vec(),
                });
            }
        }
        out
    }
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

struct BlockCache {
    ln1: LnCache,
    a_in: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    ln2: LnCache,
    f_in: Vec<f64>,
    f_pre: Vec<f64>,
    f_act: Vec<f64>,
}

struct ForwardCache {
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    y: Vec<f64>,
}

struct Pass {
    logits: Vec<f64>,
    taps: Option<Taps>,
    cache: Option<ForwardCache>,
}

fn layer_norm(x: &[f64], t: usize, d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; t * d];
    let mut xhat = vec![0.0; t * d];
    let mut rstd = vec![0.0; t];
    for i in 0..t {
        let row = &x[i * d..(i + 1) * d];
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let xh = (row[j] - mu) * r;
            xhat[i * d + j] = xh;
            y[i * d + j] = g[j] * xh + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_back(
    dy: &[f64],
    c: &LnCache,
    g: &[f64],
    t: usize,
    d: usize,
    dg: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; t * d];
    for i in 0..t {
        let (mut m1, mut m2) = (0.0, 0.0);
        for j in 0..d {
            let k = i * d + j;
            dg[j] += dy[k] * c.xhat[k];
            db[j] += dy[k];
            let dxh = dy[k] * g[j];
            m1 += dxh;
            m2 += dxh * c.xhat[k];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for j in 0..d {
            let k = i * d + j;
            dx[k] = c.rstd[i] * (dy[k] * g[j] - m1 - c.xhat[k] * m2);
        }
    }
    dx
}

/// `y[t] = W x[t] + b` for row-major `W` of shape `out × inp`.
fn linear(x: &[f64], t: usize, inp: usize, w: &[f64], b: &[f64], out: usize) -> Vec<f64> {
    let mut y = vec![0.0; t * out];
    for i in 0..t {
        let xr = &x[i * inp..(i + 1) * inp];
        for o in 0..out {
            let wr = &w[o * inp..(o + 1) * inp];
            y[i * out + o] = b[o] + wr.iter().zip(xr).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn linear_back(
    dy: &[f64],
    x: &[f64],
    t: usize,
    inp: usize,
    w: &[f64],
    out: usize,
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; t * inp];
    for i in 0..t {
        let xr = &x[i * inp..(i + 1) * inp];
        let dxr = &mut dx[i * inp..(i + 1) * inp];
        for o in 0..out {
            let g = dy[i * out + o];
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let wr = &w[o * inp..(o + 1) * inp];
            let dwr = &mut dw[o * inp..(o + 1) * inp];
            for j in 0..inp {
                dwr[j] += g * xr[j];
                dxr[j] += g * wr[j];
            }
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl ToyLmParams {
    /// Random initialization, deterministic per `config.seed`.
    pub fn init(config: ToyLmConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut data = vec![0.0; layout.total];
        let mut rng = seeded_rng(config.seed, 0x746f_796c_6d);
        let (d, f) = (config.d_model, config.d_ff);
        let resid = 1.0 / ((2 * config.n_layers) as f64).sqrt();
        let mut fill = |data: &mut [f64], off: usize, n: usize, std: f64| {
            for v in &mut data[off..off + n] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = std * z;
            }
        };
        let sd = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        fill(&mut data, layout.tok_emb, config.vocab_size * d, 0.5);
        fill(&mut data, layout.pos_emb, config.max_len * d, 0.5);
        for b in &layout.blocks {
            for w in [b.wq, b.wk, b.wv] {
                fill(&mut data, w, d * d, sd(d));
            }
            fill(&mut data, b.wo, d * d, sd(d) * resid);
            fill(&mut data, b.w1, f * d, sd(d));
            fill(&mut data, b.w2, d * f, sd(f) * resid);
            data[b.ln1_g..b.ln1_g + d].fill(1.0);
            data[b.ln2_g..b.ln2_g + d].fill(1.0);
        }
        data[layout.lnf_g..layout.lnf_g + d].fill(1.0);
        fill(&mut data, layout.out_w, config.vocab_size * d, sd(d));
        Ok(Self {
            config,
            layout,
            data,
        })
    }

    /// Parameters with every logit zero: a uniform next-token distribution.
    pub fn uniform(config: ToyLmConfig) -> Result<Self> {
        let mut p = Self::init(config)?;
        let n = config.vocab_size * config.d_model;
        p.data[p.layout.out_w..p.layout.out_w + n].fill(0.0);
        p.data[p.layout.out_b..p.layout.out_b + config.vocab_size].fill(0.0);
        Ok(p)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::Contract(format!(
                "sequence of {} tokens exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(&t) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::Contract(format!(
                "token {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn check_editor(&self, editor: &dyn SiteEditor) -> Result<()> {
        for s in editor.sites() {
            if s.layer >= self.config.n_layers {
                return Err(Error::Contract(format!(
                    "edit site {s} outside {} layers",
                    self.config.n_layers
                )));
            }
        }
        Ok(())
    }

    fn run(
        &self,
        tokens: &[u32],
        editor: Option<(&dyn SiteEditor, EditScope)>,
        want_taps: bool,
        want_cache: bool,
    ) -> Result<Pass> {
        self.check_tokens(tokens)?;
        let c = &self.config;
        let (t, d, f, v) = (tokens.len(), c.d_model, c.d_ff, c.vocab_size);
        let (nh, dh) = (c.n_heads, c.d_model / c.n_heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let p = &self.data;
        let s = |off: usize, n: usize| &p[off..off + n];
        let edit_sites = editor.map(|(e, _)| e.sites()).unwrap_or_default();

        let mut h = vec![0.0; t * d];
        for (i, &tok) in tokens.iter().enumerate() {
            let te = s(self.layout.tok_emb + tok as usize * d, d);
            let pe = s(self.layout.pos_emb + i * d, d);
            for j in 0..d {
                h[i * d + j] = te[j] + pe[j];
            }
        }
        let mut taps = want_taps.then(|| Taps {
            len: t,
            d_model: d,
            outputs: Vec::with_capacity(2 * c.n_layers),
            hidden: vec![h.clone()],
        });
        let mut caches = Vec::new();
        let apply_edits = |site: ProbeSite, out: &mut [f64]| -> Result<()> {
            if let Some((e, scope)) = editor {
                if edit_sites.contains(&site) {
                    for i in (0..t).filter(|&i| scope.covers(i)) {
                        e.edit(site, &mut out[i * d..(i + 1) * d])?;
                    }
                }
            }
            Ok(())
        };

        for (l, b) in self.layout.blocks.iter().enumerate() {
            let (a_in, ln1) = layer_norm(&h, t, d, s(b.ln1_g, d), s(b.ln1_b, d));
            let q = linear(&a_in, t, d, s(b.wq, d * d), s(b.bq, d), d);
            let k = linear(&a_in, t, d, s(b.wk, d * d), s(b.bk, d), d);
            let vv = linear(&a_in, t, d, s(b.wv, d * d), s(b.bv, d), d);
            let mut probs = vec![0.0; nh * t * t];
            let mut ctx = vec![0.0; t * d];
            for hh in 0..nh {
                let o = hh * dh;
                for i in 0..t {
                    let qi = &q[i * d + o..i * d + o + dh];
                    let row = &mut probs[(hh * t + i) * t..(hh * t + i + 1) * t];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &k[j * d + o..j * d + o + dh];
                        row[j] = scale * qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>();
                        mx = mx.max(row[j]);
                    }
                    let mut z = 0.0;
                    for r in row.iter_mut().take(i + 1) {
                        *r = (*r - mx).exp();
                        z += *r;
                    }
                    for j in 0..=i {
                        row[j] /= z;
                        let pj = row[j];
                        let vj = &vv[j * d + o..j * d + o + dh];
                        let cr = &mut ctx[i * d + o..i * d + o + dh];
                        for u in 0..dh {
                            cr[u] += pj * vj[u];
                        }
                    }
                }
            }
            let mut attn_out = linear(&ctx, t, d, s(b.wo, d * d), s(b.bo, d), d);
            apply_edits(ProbeSite::attn(l), &mut attn_out)?;
            h.iter_mut().zip(&attn_out).for_each(|(a, c)| *a += c);

            let (f_in, ln2) = layer_norm(&h, t, d, s(b.ln2_g, d), s(b.ln2_b, d));
            let f_pre = linear(&f_in, t, d, s(b.w1, f * d), s(b.b1, f), f);
            let f_act: Vec<f64> = f_pre.iter().map(|&x| gelu(x)).collect();
            let mut ffn_out = linear(&f_act, t, f, s(b.w2, d * f), s(b.b2, d), d);
            apply_edits(ProbeSite::ffn(l), &mut ffn_out)?;
            h.iter_mut().zip(&ffn_out).for_each(|(a, c)| *a += c);

            if let Some(tp) = taps.as_mut() {
                tp.outputs.push(attn_out);
                tp.outputs.push(ffn_out);
                tp.hidden.push(h.clone());
            }
            if want_cache {
                caches.push(BlockCache {
                    ln1,
                    a_in,
                    q,
                    k,
                    v: vv,
                    probs,
                    ctx,
                    ln2,
                    f_in,
                    f_pre,
                    f_act,
                });
            }
        }
        let (y, lnf) = layer_norm(&h, t, d, s(self.layout.lnf_g, d), s(self.layout.lnf_b, d));
        let logits = linear(
            &y,
            t,
            d,
            s(self.layout.out_w, v * d),
            s(self.layout.out_b, v),
            v,
        );
        if !logits.iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical("non-finite logits".into()));
        }
        let cache = want_cache.then_some(ForwardCache {
            blocks: caches,
            lnf,
            y,
        });
        Ok(Pass {
            logits,
            taps,
            cache,
        })
    }

    /// Logits, `len × vocab_size` row-major.
    pub fn forward(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        Ok(self.run(tokens, None, false, false)?.logits)
    }

    pub fn forward_with_taps(&self, tokens: &[u32]) -> Result<(Vec<f64>, Taps)> {
        let pass = self.run(tokens, None, true, false)?;
        Ok((pass.logits, pass.taps.expect("taps requested")))
    }

    pub fn forward_with_edits(
        &self,
        tokens: &[u32],
        editor: &dyn SiteEditor,
        scope: EditScope,
    ) -> Result<Vec<f64>> {
        self.check_editor(editor)?;
        Ok(self
            .run(tokens, Some((editor, scope)), false, false)?
            .logits)
    }

    /// Edited forward pass that also returns taps.
    pub fn forward_with_edits_and_taps(
        &self,
        tokens: &[u32],
        editor: &dyn SiteEditor,
        scope: EditScope,
    ) -> Result<(Vec<f64>, Taps)> {
        self.check_editor(editor)?;
        let pass = self.run(tokens, Some((editor, scope)), true, false)?;
        Ok((pass.logits, pass.taps.expect("taps requested")))
    }

    /// Summed next-token cross-entropy over the sequence; gradients scaled by
    /// `weight` are added into `grads`. Returns the unscaled sum and the count.
    pub fn loss_and_grad(
        &self,
        tokens: &[u32],
        grads: &mut ToyLmParams,
        weight: f64,
    ) -> Result<(f64, usize)> {
        if grads.data.len() != self.data.len() {
            return Err(Error::Contract(
                "gradient container does not match model".into(),
            ));
        }
        let pass = self.run(tokens, None, false, true)?;
        let cache = pass.cache.expect("cache requested");
        let c = &self.config;
        let (t, d, f, v) = (tokens.len(), c.d_model, c.d_ff, c.vocab_size);
        let (nh, dh) = (c.n_heads, c.d_model / c.n_heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let lay = &self.layout;
        let p = &self.data;
        let s = |off: usize, n: usize| &p[off..off + n];

        let mut loss = 0.0;
        let mut dlogits = vec![0.0; t * v];
        for i in 0..t.saturating_sub(1) {
            let row = &pass.logits[i * v..(i + 1) * v];
            let lse = log_sum_exp(row);
            let target = tokens[i + 1] as usize;
            loss += lse - row[target];
            for j in 0..v {
                dlogits[i * v + j] = weight * (row[j] - lse).exp();
            }
            dlogits[i * v + target] -= weight;
        }
        let g = &mut grads.data;
        let (gw, gb) = split_two(g, lay.out_w, v * d, lay.out_b, v);
        let dy = linear_back(&dlogits, &cache.y, t, d, s(lay.out_w, v * d), v, gw, gb);
        let (gg, gbb) = split_two(g, lay.lnf_g, d, lay.lnf_b, d);
        let mut dh_res = layer_norm_back(&dy, &cache.lnf, s(lay.lnf_g, d), t, d, gg, gbb);

        for (b, bc) in lay.blocks.iter().zip(&cache.blocks).rev() {
            // FFN branch.
            let (gw2, gb2) = split_two(g, b.w2, d * f, b.b2, d);
            let mut dact = linear_back(&dh_res, &bc.f_act, t, f, s(b.w2, d * f), d, gw2, gb2);
            for (da, &x) in dact.iter_mut().zip(&bc.f_pre) {
                *da *= gelu_grad(x);
            }
            let (gw1, gb1) = split_two(g, b.w1, f * d, b.b1, f);
            let df_in = linear_back(&dact, &bc.f_in, t, d, s(b.w1, f * d), f, gw1, gb1);
            let (gg2, gbb2) = split_two(g, b.ln2_g, d, b.ln2_b, d);
            let dx = layer_norm_back(&df_in, &bc.ln2, s(b.ln2_g, d), t, d, gg2, gbb2);
            dh_res.iter_mut().zip(&dx).for_each(|(a, c)| *a += c);

            // Attention branch.
            let (gwo, gbo) = split_two(g, b.wo, d * d, b.bo, d);
            let dctx = linear_back(&dh_res, &bc.ctx, t, d, s(b.wo, d * d), d, gwo, gbo);
            let mut dq = vec![0.0; t * d];
            let mut dk = vec![0.0; t * d];
            let mut dv = vec![0.0; t * d];
            let mut dp = vec![0.0; t];
            for hh in 0..nh {
                let o = hh * dh;
                for i in 0..t {
                    let pr = &bc.probs[(hh * t + i) * t..(hh * t + i + 1) * t];
                    let dci = &dctx[i * d + o..i * d + o + dh];
                    let mut acc = 0.0;
                    for j in 0..=i {
                        let vj = &bc.v[j * d + o..j * d + o + dh];
                        dp[j] = dci.iter().zip(vj).map(|(a, c)| a * c).sum();
                        acc += pr[j] * dp[j];
                        let dvj = &mut dv[j * d + o..j * d + o + dh];
                        for u in 0..dh {
                            dvj[u] += pr[j] * dci[u];
                        }
                    }
                    for j in 0..=i {
                        let ds = pr[j] * (dp[j] - acc) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for u in 0..dh {
                            dq[i * d + o + u] += ds * bc.k[j * d + o + u];
                            dk[j * d + o + u] += ds * bc.q[i * d + o + u];
                        }
                    }
                }
            }
            let mut da_in = vec![0.0; t * d];
            for (dm, w, bb) in [(&dq, b.wq, b.bq), (&dk, b.wk, b.bk), (&dv, b.wv, b.bv)] {
                let (gw_, gb_) = split_two(g, w, d * d, bb, d);
                let dx = linear_back(dm, &bc.a_in, t, d, s(w, d * d), d, gw_, gb_);
                da_in.iter_mut().zip(&dx).for_each(|(a, c)| *a += c);
            }
            let (gg1, gbb1) = split_two(g, b.ln1_g, d, b.ln1_b, d);
            let dx = layer_norm_back(&da_in, &bc.ln1, s(b.ln1_g, d), t, d, gg1, gbb1);
            dh_res.iter_mut().zip(&dx).for_each(|(a, c)| *a += c);
        }
        for (i, &tok) in tokens.iter().enumerate() {
            let te = lay.tok_emb + tok as usize * d;
            let pe = lay.pos_emb + i * d;
            for j in 0..d {
                g[te + j] += dh_res[i * d + j];
                g[pe + j] += dh_res[i * d + j];
            }
        }
        Ok((loss, t.saturating_sub(1)))
    }

    /// Summed next-token cross-entropy, no gradients.
    pub fn loss(&self, tokens: &[u32]) -> Result<f64> {
        let logits = self.forward(tokens)?;
        let v = self.config.vocab_size;
        Ok((0..tokens.len() - 1)
            .map(|i| {
                let row = &logits[i * v..(i + 1) * v];
                log_sum_exp(row) - row[tokens[i + 1] as usize]
            })
            .sum())
    }

    /// Total log-probability of `continuation` after `prompt`.
    pub fn score_continuation(
        &self,
        prompt: &[u32],
        continuation: &[u32],
        edit: Option<(&dyn SiteEditor, EditScope)>,
    ) -> Result<f64> {
        if continuation.is_empty() {
            return Ok(0.0);
        }
        if prompt.is_empty() {
            return Err(Error::Contract("scoring needs a nonempty prompt".into()));
        }
        let seq: Vec<u32> = prompt.iter().chain(continuation).copied().collect();
        let logits = match edit {
            Some((e, scope)) => self.forward_with_edits(&seq, e, scope)?,
            None => self.forward(&seq)?,
        };
        let v = self.config.vocab_size;
        Ok(continuation
            .iter()
            .enumerate()
            .map(|(i, &tok)| {
                let row = &logits[(prompt.len() + i - 1) * v..(prompt.len() + i) * v];
                row[tok as usize] - log_sum_exp(row)
            })
            .sum())
    }

    /// Argmax decoding; the lowest token id wins ties.
    pub fn greedy_generate(
        &self,
        prompt: &[u32],
        max_new: usize,
        edit: Option<(&dyn SiteEditor, bool)>,
    ) -> Result<Vec<u32>> {
        if prompt.len() + max_new > self.config.max_len {
            return Err(Error::Contract(format!(
                "prompt of {} plus {max_new} new tokens exceeds max_len {}",
                prompt.len(),
                self.config.max_len
            )));
        }
        let mut seq = prompt.to_vec();
        let v = self.config.vocab_size;
        for _ in 0..max_new {
            let logits = match edit {
                Some((e, generated_only)) => {
                    let scope = if generated_only {
                        EditScope::FromPosition(prompt.len())
                    } else {
                        EditScope::AllPositions
                    };
                    self.forward_with_edits(&seq, e, scope)?
                }
                None => self.forward(&seq)?,
            };
            let row = &logits[(seq.len() - 1) * v..seq.len() * v];
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            seq.push(best as u32);
        }
        Ok(seq[prompt.len()..].to_vec())
    }

    pub fn to_container(&self, vocab: &Vocab) -> TensorFile {
        let mut tf = TensorFile::new(LM_FORMAT);
        let c = &self.config;
        tf.push_meta("vocab_size", c.vocab_size);
        tf.push_meta("d_model", c.d_model);
        tf.push_meta("n_layers", c.n_layers);
        tf.push_meta("n_heads", c.n_heads);
        tf.push_meta("d_ff", c.d_ff);
        tf.push_meta("max_len", c.max_len);
        tf.push_meta("seed", c.seed);
        tf.push_meta("vocab", vocab.words().join(" "));
        for t in self.tensors() {
            tf.push_tensor(t.name, t.shape, t.data.to_vec());
        }
        tf
    }

    pub fn from_container(tf: &TensorFile) -> Result<(Self, Vocab)> {
        let config = ToyLmConfig {
            vocab_size: tf.meta_parse("vocab_size")?,
            d_model: tf.meta_parse("d_model")?,
            n_layers: tf.meta_parse("n_layers")?,
            n_heads: tf.meta_parse("n_heads")?,
            d_ff: tf.meta_parse("d_ff")?,
            max_len: tf.meta_parse("max_len")?,
            seed: tf.meta_parse("seed")?,
        };
        config.validate()?;
        let vocab = Vocab::new(
            tf.meta("vocab")?
                .split(' ')
                .filter(|w| !w.is_empty())
                .map(String::from)
                .collect(),
        )?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Data {
                line: 0,
                msg: format!(
                    "vocabulary has {} words, config says {}",
                    vocab.len(),
                    config.vocab_size
                ),
            });
        }
        let layout = Layout::new(&config);
        let mut data = vec![0.0; layout.total];
        for (name, shape, off) in &layout.entries {
            let t = tf.tensor(name)?;
            if &t.shape != shape {
                return Err(Error::Shape(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
            data[*off..off + t.data.len()].copy_from_slice(&t.data);
        }
        Ok((
            Self {
                config,
                layout,
                data,
            },
            vocab,
        ))
    }

    pub fn save(&self, path: &Path, vocab: &Vocab) -> Result<()> {
        self.to_container(vocab).save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Vocab)> {
        Self::from_container(&TensorFile::load(path, LM_FORMAT)?)
    }
}

/// Two disjoint mutable ranges of one slice.
fn split_two(g: &mut [f64], a: usize, na: usize, b: usize, nb: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + na <= b);
    let (lo, hi) = g.split_at_mut(b);
    (&mut lo[a..a + na], &mut hi[..nb])
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Leading tokens that may be dropped from a training sequence.
    pub droppable_prefix: Vec<u32>,
    /// Probability of dropping a droppable leading token, per sequence and epoch.
    pub prefix_dropout: f64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            lr: 3e-3,
            seed: 0,
            droppable_prefix: Vec::new(),
            prefix_dropout: 0.0,
        }
    }
}

impl LmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..=1.0).contains(&self.prefix_dropout) {
            return Err(Error::Config(
                "lr must be finite and nonnegative, prefix_dropout in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Train with Adam on next-token cross-entropy. Returns the parameters and
/// the mean per-token loss of each epoch.
pub fn lm_train(
    corpus: &[Vec<u32>],
    config: ToyLmConfig,
    train: &LmTrainConfig,
) -> Result<(ToyLmParams, Vec<f64>)> {
    train.validate()?;
    let usable: Vec<&Vec<u32>> = corpus.iter().filter(|s| s.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::Contract(
            "corpus has no sequence of two or more tokens".into(),
        ));
    }
    let mut params = ToyLmParams::init(config)?;
    for s in &usable {
        params.check_tokens(s)?;
    }
    let mut adam = AdamState::new(params.data.len(), train.lr);
    let mut history = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        let mut rng = seeded_rng(train.seed, 0x1_0000 + epoch as u64);
        let mut order: Vec<usize> = (0..usable.len()).collect();
        order.shuffle(&mut rng);
        let seqs: Vec<&[u32]> = order
            .iter()
            .map(|&i| {
                let s: &[u32] = usable[i];
                let drop = train.droppable_prefix.contains(&s[0])
                    && s.len() > 2
                    && rng.gen::<f64>() < train.prefix_dropout;
                if drop {
                    &s[1..]
                } else {
                    s
                }
            })
            .collect();
        let (mut total, mut count) = (0.0, 0usize);
        for batch in seqs.chunks(train.batch_size) {
            let n_tok: usize = batch.iter().map(|s| s.len() - 1).sum();
            let w = 1.0 / n_tok as f64;
            let parts: Vec<(f64, ToyLmParams)> = batch
                .par_iter()
                .map(|s| {
                    let mut g = params.zeros_like();
                    let (l, _) = params.loss_and_grad(s, &mut g, w)?;
                    Ok((l, g))
                })
                .collect::<Result<_>>()?;
            let mut grad = params.zeros_like();
            for (l, g) in &parts {
                total += l;
                grad.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b);
            }
            count += n_tok;
            if !total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite LM loss in epoch {epoch}"
                )));
            }
            adam.step_flat(&mut params.data, &grad.data)?;
        }
        let mean = total / count as f64;
        log::debug!("lm epoch {epoch}: loss {mean:.5}");
        history.push(mean);
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{finite_diff_check, GradCheckConfig};

    fn tiny(seed: u64) -> ToyLmConfig {
        ToyLmConfig {
            vocab_size: 7,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            max_len: 6,
            seed,
        }
    }

    // Adds `scale · j` to component j; a constant shift would vanish under LayerNorm.
    struct AddRamp(Vec<ProbeSite>, f64);

    impl SiteEditor for AddRamp {
        fn sites(&self) -> Vec<ProbeSite> {
            self.0.clone()
        }
        fn edit(&self, _site: ProbeSite, x: &mut [f64]) -> Result<()> {
            x.iter_mut()
                .enumerate()
                .for_each(|(j, v)| *v += self.1 * j as f64);
            Ok(())
        }
    }

    #[test]
    fn tap_count_is_two_per_layer_per_position() {
        let cfg = ToyLmConfig {
            n_layers: 4,
            ..tiny(0)
        };
        let p = ToyLmParams::init(cfg).unwrap();
        let (_, taps) = p.forward_with_taps(&[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(taps.records().len(), 40);
    }

    #[test]
    fn taps_do_not_change_output() {
        let p = ToyLmParams::init(tiny(1)).unwrap();
        let toks = [0, 3, 2, 6];
        assert_eq!(
            p.forward(&toks).unwrap(),
            p.forward_with_taps(&toks).unwrap().0
        );
    }

    #[test]
    fn residual_identity_from_taps() {
        let p = ToyLmParams::init(tiny(2)).unwrap();
        let (_, taps) = p.forward_with_taps(&[1, 1, 5, 0, 2]).unwrap();
        for l in 0..2 {
            for pos in 0..5 {
                let before = taps.hidden_at(l, pos);
                let after = taps.hidden_at(l + 1, pos);
                let (a, f) = (
                    taps.get(ProbeSite::attn(l), pos),
                    taps.get(ProbeSite::ffn(l), pos),
                );
                for j in 0..8 {
                    assert!((before[j] + a[j] + f[j] - after[j]).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn overlong_and_bad_tokens_rejected() {
        let p = ToyLmParams::init(tiny(0)).unwrap();
        assert!(matches!(p.forward(&[0; 7]), Err(Error::Contract(_))));
        assert!(matches!(p.forward(&[9]), Err(Error::Contract(_))));
        assert!(p.greedy_generate(&[0, 1], 5, None).is_err());
    }

    #[test]
    fn neutral_edits_leave_logits() {
        let p = ToyLmParams::init(tiny(3)).unwrap();
        let toks = [2, 4, 1];
        let base = p.forward(&toks).unwrap();
        let zero = AddRamp(vec![ProbeSite::attn(0), ProbeSite::ffn(1)], 0.0);
        assert_eq!(
            p.forward_with_edits(&toks, &zero, EditScope::AllPositions)
                .unwrap(),
            base
        );
        let none = AddRamp(vec![], 1.0);
        assert_eq!(
            p.forward_with_edits(&toks, &none, EditScope::AllPositions)
                .unwrap(),
            base
        );
        let out_of_range = AddRamp(vec![ProbeSite::attn(5)], 1.0);
        assert!(p
            .forward_with_edits(&toks, &out_of_range, EditScope::AllPositions)
            .is_err());
    }

    #[test]
    fn edit_locality_and_scope() {
        let p = ToyLmParams::init(tiny(4)).unwrap();
        let toks = [2, 4, 1, 3];
        let (_, base) = p.forward_with_taps(&toks).unwrap();
        let e = AddRamp(vec![ProbeSite::ffn(0)], 0.7);
        let (_, edited) = p
            .forward_with_edits_and_taps(&toks, &e, EditScope::AllPositions)
            .unwrap();
        for pos in 0..4 {
            assert_eq!(
                base.get(ProbeSite::attn(0), pos),
                edited.get(ProbeSite::attn(0), pos)
            );
        }
        assert_ne!(
            base.get(ProbeSite::attn(1), 0),
            edited.get(ProbeSite::attn(1), 0)
        );
        let (_, late) = p
            .forward_with_edits_and_taps(&toks, &e, EditScope::FromPosition(2))
            .unwrap();
        for pos in 0..2 {
            assert_eq!(
                base.get(ProbeSite::attn(1), pos),
                late.get(ProbeSite::attn(1), pos)
            );
        }
        assert_ne!(
            base.get(ProbeSite::attn(1), 2),
            late.get(ProbeSite::attn(1), 2)
        );
    }

    #[test]
    fn uniform_model_scores() {
        let p = ToyLmParams::uniform(tiny(0)).unwrap();
        let s = p.score_continuation(&[1], &[2, 3, 4], None).unwrap();
        assert!((s - 3.0 * (1.0f64 / 7.0).ln()).abs() < 1e-12);
        assert_eq!(p.score_continuation(&[1], &[], None).unwrap(), 0.0);
        assert_eq!(p.greedy_generate(&[1], 0, None).unwrap(), Vec::<u32>::new());
    }

    #[test]
    fn cross_entropy_gradcheck() {
        for seed in 0..3 {
            let mut p = ToyLmParams::init(tiny(seed)).unwrap();
            let toks = [1, 5, 2, 2, 6, 0];
            let mut g = p.zeros_like();
            p.loss_and_grad(&toks, &mut g, 1.0).unwrap();
            let report = finite_diff_check(
                &mut p,
                &g,
                |q| q.loss(&toks).unwrap(),
                GradCheckConfig::default(),
            );
            assert!(
                report.passed,
                "seed {seed}: {:?}",
                report.failing_tensors(1e-4)
            );
        }
    }

    #[test]
    fn memorizes_alternation() {
        let cfg = ToyLmConfig {
            vocab_size: 2,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_len: 8,
            seed: 0,
        };
        let seq = vec![0, 1, 0, 1, 0, 1, 0, 1];
        let train = LmTrainConfig {
            epochs: 150,
            batch_size: 1,
            lr: 1e-2,
            ..Default::default()
        };
        let (p, hist) = lm_train(&[seq], cfg, &train).unwrap();
        assert!(*hist.last().unwrap() <= 0.05, "loss {:?}", hist.last());
        assert_eq!(
            p.greedy_generate(&[0], 5, None).unwrap(),
            vec![1, 0, 1, 0, 1]
        );
    }

    #[test]
    fn zero_lr_and_determinism() {
        let cfg = tiny(5);
        let corpus = vec![vec![1, 2, 3], vec![4, 5, 6, 0]];
        let zero = LmTrainConfig {
            epochs: 2,
            lr: 0.0,
            ..Default::default()
        };
        let (p, _) = lm_train(&corpus, cfg, &zero).unwrap();
        assert_eq!(p, ToyLmParams::init(cfg).unwrap());
        let t = LmTrainConfig {
            epochs: 3,
            droppable_prefix: vec![1, 4],
            prefix_dropout: 0.5,
            ..Default::default()
        };
        assert_eq!(
            lm_train(&corpus, cfg, &t).unwrap(),
            lm_train(&corpus, cfg, &t).unwrap()
        );
    }

    #[test]
    fn checkpoint_roundtrip() {
        let p = ToyLmParams::init(tiny(6)).unwrap();
        let vocab = Vocab::from_lines(["a b c d e f g"]);
        let mut buf = Vec::new();
        p.to_container(&vocab).write_to(&mut buf).unwrap();
        let (back, v2) =
            ToyLmParams::from_container(&TensorFile::read_from(&buf[..], LM_FORMAT).unwrap())
                .unwrap();
        assert_eq!(back, p);
        assert_eq!(v2, vocab);
    }
}
