// SPDX-License-Identifier: MIT OR Apache-2.0

//! Finite-difference suites over every hand-derived gradient in the crate.
//!
//! Each suite builds a small seeded problem, computes the analytic gradient
//! and compares it entry by entry with central differences of the matching
//! value-only function.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::{total_loss, total_loss_value, LossConfig};
use crate::model::{ModelDims, ModelFlags, TruthXParams};
use crate::numkit::{finite_diff_check, seeded_rng, GradCheckConfig, Location, ParamSet};
use crate::toylm::{ToyLmConfig, ToyLmParams};

const DIMS: ModelDims = ModelDims {
    d_model: 6,
    d_hidden: 5,
    d_latent: 4,
};
const BATCH: usize = 4;
const LM_TOKENS: usize = 6;

/// Step and tolerance of [`GradCheckConfig::default`] with a denominator
/// floor of 1e-5. Gradients that vanish identically (a key bias under
/// softmax) come back from central differences as round-off of order
/// `eps · |L| / h`, about 1e-10 here.
pub fn suite_config() -> GradCheckConfig {
    GradCheckConfig {
        floor: 1e-5,
        ..GradCheckConfig::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Recon,
    Truth,
    Sem,
    Edit,
    Total,
    LmCrossEntropy,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Recon,
        Suite::Truth,
        Suite::Sem,
        Suite::Edit,
        Suite::Total,
        Suite::LmCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Recon => "recon",
            Suite::Truth => "truth",
            Suite::Sem => "sem",
            Suite::Edit => "edit",
            Suite::Total => "total",
            Suite::LmCrossEntropy => "lm_xent",
        }
    }

    fn loss_config(self) -> LossConfig {
        let off = LossConfig {
            recon: false,
            truth: false,
            sem: false,
            edit: false,
            ..Default::default()
        };
        match self {
            Suite::Recon => LossConfig { recon: true, ..off },
            Suite::Truth => LossConfig { truth: true, ..off },
            Suite::Sem => LossConfig { sem: true, ..off },
            Suite::Edit => LossConfig { edit: true, ..off },
            Suite::Total | Suite::LmCrossEntropy => LossConfig::default(),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck suite {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub suite: Suite,
    pub seed: u64,
    pub passed: bool,
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<Location>,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub config: GradCheckConfig,
    pub corrupt: bool,
    pub results: Vec<SuiteResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    /// Worst relative error per suite across seeds, in suite order.
    pub fn worst_by_suite(&self) -> Vec<(Suite, f64)> {
        Suite::ALL
            .into_iter()
            .filter_map(|s| {
                self.results
                    .iter()
                    .filter(|r| r.suite == s)
                    .map(|r| r.max_rel_err)
                    .fold(None, |acc: Option<f64>, e| {
                        Some(match acc {
                            Some(a) if !(e > a) => a,
                            _ => e,
                        })
                    })
                    .map(|e| (s, e))
            })
            .collect()
    }

    /// One row per (suite, seed); no timing, so reruns are byte-identical.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("suite\tseed\tchecked\tmax_rel_err\tworst\tstatus\n");
        for r in &self.results {
            let worst = r
                .worst
                .as_ref()
                .map(|l| format!("{}[{}]", l.tensor, l.index))
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.6e}\t{}\t{}\n",
                r.suite,
                r.seed,
                r.checked,
                r.max_rel_err,
                worst,
                if r.passed { "pass" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Scale every analytic entry by 1.01 and shift the first one, so that a
/// correct check must fail.
fn corrupt_grads<P: ParamSet>(g: &mut P) {
    let mut first = true;
    for t in g.tensors_mut() {
        for v in t.iter_mut() {
            *v *= 1.01;
            if first {
                *v += 1e-2;
                first = false;
            }
        }
    }
}

fn rand_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Glorot weights with strictly positive biases, which keeps the ReLU
/// pre-activations of small random inputs away from the kink.
fn auto_encoder(seed: u64) -> Result<TruthXParams> {
    let mut p = TruthXParams::init(DIMS, ModelFlags::default(), seed)?;
    let mut rng = seeded_rng(seed, 0x6763_6b31);
    for m in [&mut p.truth_enc, &mut p.sem_enc, &mut p.dec] {
        for l in m.layers.iter_mut() {
            l.bias
                .iter_mut()
                .for_each(|b| *b = rng.gen_range(0.05..0.5));
        }
    }
    Ok(p)
}

fn finish(suite: Suite, seed: u64, r: crate::numkit::CheckReport) -> SuiteResult {
    SuiteResult {
        suite,
        seed,
        passed: r.passed,
        max_rel_err: r.max_rel_err,
        checked: r.checked,
        worst: r.non_finite.or(r.worst),
    }
}

pub fn run_suite(
    suite: Suite,
    seed: u64,
    corrupt: bool,
    cfg: GradCheckConfig,
) -> Result<SuiteResult> {
    if suite == Suite::LmCrossEntropy {
        let lm_cfg = ToyLmConfig {
            vocab_size: 7,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            max_len: LM_TOKENS,
            seed,
        };
        let mut p = ToyLmParams::init(lm_cfg)?;
        let mut rng = seeded_rng(seed, 0x6763_6b32);
        let toks: Vec<u32> = (0..LM_TOKENS)
            .map(|_| rng.gen_range(0..lm_cfg.vocab_size as u32))
            .collect();
        let mut g = p.zeros_like();
        p.loss_and_grad(&toks, &mut g, 1.0)?;
        if corrupt {
            corrupt_grads(&mut g);
        }
        let r = finite_diff_check(&mut p, &g, |q| q.loss(&toks).unwrap_or(f64::NAN), cfg);
        return Ok(finish(suite, seed, r));
    }

    let mut p = auto_encoder(seed)?;
    let mut rng = seeded_rng(seed, 0x6763_6b33);
    let xp: Vec<Vec<f64>> = (0..BATCH)
        .map(|_| rand_vec(DIMS.d_model, &mut rng))
        .collect();
    let xn: Vec<Vec<f64>> = (0..BATCH)
        .map(|_| rand_vec(DIMS.d_model, &mut rng))
        .collect();
    let lc = suite.loss_config();
    let (_, mut g) = total_loss(&p, &xp, &xn, &lc)?;
    if corrupt {
        corrupt_grads(&mut g);
    }
    let r = finite_diff_check(
        &mut p,
        &g,
        |q| {
            total_loss_value(q, &xp, &xn, &lc)
                .map(|b| b.l_total)
                .unwrap_or(f64::NAN)
        },
        cfg,
    );
    Ok(finish(suite, seed, r))
}

/// Every suite for seeds `seed, seed + 1, ..., seed + n_seeds - 1`.
pub fn run_all(
    seed: u64,
    n_seeds: usize,
    corrupt: bool,
    cfg: GradCheckConfig,
) -> Result<GradcheckReport> {
    if n_seeds == 0 {
        return Err(Error::Config("gradcheck needs at least one seed".into()));
    }
    let mut results = Vec::with_capacity(n_seeds * Suite::ALL.len());
    for s in 0..n_seeds as u64 {
        for suite in Suite::ALL {
            results.push(run_suite(suite, seed.wrapping_add(s), corrupt, cfg)?);
        }
    }
    Ok(GradcheckReport {
        config: cfg,
        corrupt,
        results,
    })
}
