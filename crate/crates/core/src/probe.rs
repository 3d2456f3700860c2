// SPDX-License-Identifier: MIT OR Apache-2.0

//! Truthful direction, cosine-centroid probing, site ranking, and editing.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::dataio::Polarity;
use crate::error::{check_len, Error, Result};
use crate::model::TruthXParams;
use crate::numkit::{cosine_sim, dot, norm, seeded_rng, sub};
use crate::site::ProbeSite;
use crate::tensorfile::{fmt_f64, TensorFile};
use crate::toylm::SiteEditor;
use crate::trainer::Standardizer;

pub const EDITPLAN_FORMAT: &str = "editplan/1";

/// Truthful-space means of truthful and untruthful representations.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    pub mean_pos: Vec<f64>,
    pub mean_neg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub delta: Vec<f64>,
}

impl Direction {
    pub fn norm(&self) -> f64 {
        norm(&self.delta)
    }

    /// A zero direction cannot edit anything.
    pub fn is_usable(&self) -> bool {
        self.delta.iter().any(|&v| v != 0.0) && self.delta.iter().all(|v| v.is_finite())
    }

    pub fn negated(&self) -> Direction {
        Direction {
            delta: self.delta.iter().map(|v| -v).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlKind {
    Random,
    Orthogonal,
    Negated,
}

impl std::str::FromStr for ControlKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "orthogonal" => Ok(Self::Orthogonal),
            "negated" => Ok(Self::Negated),
            _ => Err(Error::Config(format!("unknown control direction `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteScore {
    pub site: ProbeSite,
    pub accuracy: f64,
}

/// Componentwise means of truthful-space latents.
pub fn mean_centroids(h_pos: &[Vec<f64>], h_neg: &[Vec<f64>]) -> Result<Centroids> {
    let mean = |hs: &[Vec<f64>], what: &str| -> Result<Vec<f64>> {
        let first = hs
            .first()
            .ok_or_else(|| Error::Contract(format!("no {what} representations")))?;
        let mut m = vec![0.0; first.len()];
        for h in hs {
            check_len("latent", h, m.len())?;
            m.iter_mut().zip(h).for_each(|(a, b)| *a += b);
        }
        m.iter_mut().for_each(|v| *v /= hs.len() as f64);
        Ok(m)
    };
    Ok(Centroids {
        mean_pos: mean(h_pos, "truthful")?,
        mean_neg: mean(h_neg, "untruthful")?,
    })
}

/// Encode both polarities and average their truthful-space latents.
pub fn compute_centroids(
    params: &TruthXParams,
    x_pos: &[&[f64]],
    x_neg: &[&[f64]],
) -> Result<Centroids> {
    let enc = |xs: &[&[f64]]| -> Result<Vec<Vec<f64>>> {
        xs.iter().map(|x| Ok(params.encode(x)?.h_truth)).collect()
    };
    mean_centroids(&enc(x_pos)?, &enc(x_neg)?)
}

pub fn compute_direction(c: &Centroids) -> Direction {
    Direction {
        delta: sub(&c.mean_pos, &c.mean_neg),
    }
}

/// Control direction with the norm of `delta`.
pub fn make_control_direction(
    kind: ControlKind,
    delta: &Direction,
    seed: u64,
) -> Result<Direction> {
    let n = delta.norm();
    if kind != ControlKind::Random && !delta.is_usable() {
        return Err(Error::Degenerate(
            "control direction needs a nonzero truthful direction".into(),
        ));
    }
    if kind == ControlKind::Negated {
        return Ok(delta.negated());
    }
    let mut rng = seeded_rng(seed, 0x636f_6e74_726f_6c);
    let mut r: Vec<f64> = (0..delta.delta.len())
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        })
        .collect();
    if kind == ControlKind::Orthogonal {
        let unit: Vec<f64> = delta.delta.iter().map(|v| v / n).collect();
        let p = dot(&r, &unit);
        r.iter_mut().zip(&unit).for_each(|(a, u)| *a -= p * u);
        // A second pass removes the rounding residue of the first.
        let p = dot(&r, &unit);
        r.iter_mut().zip(&unit).for_each(|(a, u)| *a -= p * u);
    }
    let rn = norm(&r);
    if rn == 0.0 {
        return Err(Error::Degenerate("random draw has zero norm".into()));
    }
    let target = if kind == ControlKind::Random && n == 0.0 {
        1.0
    } else {
        n
    };
    Ok(Direction {
        delta: r.iter().map(|v| v * target / rn).collect(),
    })
}

/// Cosine-centroid decision on a truthful-space latent; ties go to truthful.
pub fn probe_latent(h_truth: &[f64], c: &Centroids) -> Result<Polarity> {
    let sp = cosine_sim(h_truth, &c.mean_pos)?;
    let sn = cosine_sim(h_truth, &c.mean_neg)?;
    Ok(if sp >= sn {
        Polarity::Pos
    } else {
        Polarity::Neg
    })
}

pub fn probe(params: &TruthXParams, x: &[f64], c: &Centroids) -> Result<Polarity> {
    probe_latent(&params.encode(x)?.h_truth, c)
}

/// Like [`probe`], but a zero-norm latent yields `None` instead of an error.
pub fn probe_lenient(params: &TruthXParams, x: &[f64], c: &Centroids) -> Result<Option<Polarity>> {
    match probe(params, x, c) {
        Ok(p) => Ok(Some(p)),
        Err(Error::Degenerate(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Fraction of labelled representations whose probe matches the label. A
/// representation with a zero-norm latent counts as a miss.
pub fn site_accuracy(
    params: &TruthXParams,
    site: ProbeSite,
    x_pos: &[&[f64]],
    x_neg: &[&[f64]],
    c: &Centroids,
) -> Result<SiteScore> {
    let total = x_pos.len() + x_neg.len();
    if total == 0 {
        return Err(Error::Contract(format!(
            "no representations at site {site}"
        )));
    }
    let mut hits = 0usize;
    for x in x_pos {
        hits += usize::from(probe_lenient(params, x, c)? == Some(Polarity::Pos));
    }
    for x in x_neg {
        hits += usize::from(probe_lenient(params, x, c)? == Some(Polarity::Neg));
    }
    Ok(SiteScore {
        site,
        accuracy: hits as f64 / total as f64,
    })
}

/// The `k` best sites; equal accuracies fall back to computation order.
pub fn select_sites(scores: &[SiteScore], k: usize) -> Result<Vec<ProbeSite>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Contract(format!(
            "cannot select {k} of {} sites",
            scores.len()
        )));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.accuracy.total_cmp(&a.accuracy).then(a.site.cmp(&b.site)));
    Ok(sorted.into_iter().take(k).map(|s| s.site).collect())
}

/// Decoded displacement from shifting the truthful latent by `+delta` versus `-delta`.
pub fn edit_direction(params: &TruthXParams, x: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
    check_len("direction", delta, params.dims.d_latent)?;
    let lat = params.encode(x)?;
    let plus: Vec<f64> = lat.h_truth.iter().zip(delta).map(|(h, d)| h + d).collect();
    let minus: Vec<f64> = lat.h_truth.iter().zip(delta).map(|(h, d)| h - d).collect();
    let a = params.decode(&lat.h_sem, &plus)?;
    let b = params.decode(&lat.h_sem, &minus)?;
    Ok(sub(&a, &b))
}

pub fn apply_edit(x: &[f64], delta_x: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_len("edit direction", delta_x, x.len())?;
    Ok(x.iter().zip(delta_x).map(|(a, d)| a + alpha * d).collect())
}

/// Sites, strength, and direction of one editing run.
#[derive(Debug, Clone, PartialEq)]
pub struct EditPlan {
    pub sites: Vec<ProbeSite>,
    pub alpha: f64,
    pub direction: Direction,
    /// Optional per-site directions overriding `direction`.
    pub site_directions: Vec<(ProbeSite, Direction)>,
    /// Path of the checkpoint holding the model and standardization stats.
    pub checkpoint: String,
}

impl EditPlan {
    pub fn new(
        sites: Vec<ProbeSite>,
        alpha: f64,
        direction: Direction,
        checkpoint: impl Into<String>,
    ) -> Result<Self> {
        let plan = Self {
            sites,
            alpha,
            direction,
            site_directions: Vec::new(),
            checkpoint: checkpoint.into(),
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sites.is_empty() {
            return Err(Error::Contract("edit plan needs at least one site".into()));
        }
        for (i, s) in self.sites.iter().enumerate() {
            if self.sites[..i].contains(s) {
                return Err(Error::Contract(format!("site {s} listed twice")));
            }
        }
        if !self.alpha.is_finite() {
            return Err(Error::Contract("editing strength must be finite".into()));
        }
        Ok(())
    }

    pub fn direction_for(&self, site: ProbeSite) -> &Direction {
        self.site_directions
            .iter()
            .find(|(s, _)| *s == site)
            .map(|(_, d)| d)
            .unwrap_or(&self.direction)
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        Self {
            alpha,
            ..self.clone()
        }
    }

    pub fn to_container(&self) -> TensorFile {
        let mut tf = TensorFile::new(EDITPLAN_FORMAT);
        tf.push_meta("k", self.sites.len());
        tf.push_meta("alpha", fmt_f64(self.alpha));
        tf.push_meta(
            "sites",
            self.sites
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        tf.push_meta("checkpoint", &self.checkpoint);
        tf.push_meta("standardization", "checkpoint");
        tf.push_tensor(
            "delta",
            vec![self.direction.delta.len()],
            self.direction.delta.clone(),
        );
        for (s, d) in &self.site_directions {
            tf.push_tensor(format!("delta.{s}"), vec![d.delta.len()], d.delta.clone());
        }
        tf
    }

    pub fn from_container(tf: &TensorFile) -> Result<Self> {
        let sites: Vec<ProbeSite> = tf
            .meta("sites")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        let k: usize = tf.meta_parse("k")?;
        if k != sites.len() {
            return Err(Error::Data {
                line: 0,
                msg: format!("plan says k = {k} but lists {} sites", sites.len()),
            });
        }
        let direction = Direction {
            delta: tf.tensor("delta")?.data.clone(),
        };
        let mut site_directions = Vec::new();
        for t in &tf.tensors {
            if let Some(s) = t.name.strip_prefix("delta.") {
                site_directions.push((
                    s.parse()?,
                    Direction {
                        delta: t.data.clone(),
                    },
                ));
            }
        }
        let plan = Self {
            sites,
            alpha: tf.meta_parse("alpha")?,
            direction,
            site_directions,
            checkpoint: tf.meta("checkpoint")?.to_string(),
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&TensorFile::load(path, EDITPLAN_FORMAT)?)
    }
}

/// Applies an [`EditPlan`] inside the toy LM. Each selected module output is
/// standardized, edited, and mapped back: `x + alpha · scale ⊙ Δ`.
pub struct TruthXEditor<'a> {
    pub params: &'a TruthXParams,
    pub standardizer: &'a Standardizer,
    pub plan: &'a EditPlan,
}

impl SiteEditor for TruthXEditor<'_> {
    fn sites(&self) -> Vec<ProbeSite> {
        self.plan.sites.clone()
    }

    fn edit(&self, site: ProbeSite, x: &mut [f64]) -> Result<()> {
        if self.plan.alpha == 0.0 {
            return Ok(());
        }
        let xs = self.standardizer.apply(site, x)?;
        let dx = edit_direction(self.params, &xs, &self.plan.direction_for(site).delta)?;
        let scale = self.standardizer.scale(site)?;
        for ((v, d), s) in x.iter_mut().zip(&dx).zip(scale) {
            *v += self.plan.alpha * s * d;
        }
        Ok(())
    }
}
