// SPDX-License-Identifier: MIT OR Apache-2.0

use rayon::prelude::*;

use super::bank::{RepBank, RepPair};
use super::{positional_alignment, token_intersection, Triplet};
use crate::error::Result;
use crate::site::ProbeSite;
use crate::toylm::ToyLmParams;

/// Run `Q + A_pos` and `Q + A_neg` through the LM and pair the taps of
/// aligned answer tokens at every site. Each token's tap is read at its own
/// position in its own sequence. Records are ordered by sample id, then
/// site, then position in the truthful answer.
pub fn extract_reps(lm: &ToyLmParams, triplets: &[Triplet], all_tokens: bool) -> Result<RepBank> {
    let sites = ProbeSite::all(lm.config.n_layers);
    let mut order: Vec<&Triplet> = triplets.iter().collect();
    order.sort_by_key(|t| t.id);
    let per_triplet: Vec<Vec<RepPair>> = order
        .par_iter()
        .map(|t| {
            let q = t.question.len();
            if q + t.answer_pos.len().max(t.answer_neg.len()) > lm.config.max_len {
                log::warn!(
                    "triplet {} exceeds max_len {}; skipped",
                    t.id,
                    lm.config.max_len
                );
                return Ok(Vec::new());
            }
            let aligned = if all_tokens {
                positional_alignment(&t.answer_pos, &t.answer_neg)
            } else {
                token_intersection(&t.answer_pos, &t.answer_neg)
            };
            if aligned.is_empty() {
                log::warn!("triplet {} has no aligned answer tokens; skipped", t.id);
                return Ok(Vec::new());
            }
            let seq = |a: &[u32]| t.question.iter().chain(a).copied().collect::<Vec<u32>>();
            let (_, taps_pos) = lm.forward_with_taps(&seq(&t.answer_pos))?;
            let (_, taps_neg) = lm.forward_with_taps(&seq(&t.answer_neg))?;
            let mut out = Vec::with_capacity(sites.len() * aligned.len());
            for &site in &sites {
                for a in &aligned {
                    out.push(RepPair {
                        sample: t.id,
                        site,
                        key: a.key,
                        x_pos: taps_pos.get(site, q + a.pos_position).to_vec(),
                        x_neg: taps_neg.get(site, q + a.neg_position).to_vec(),
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut bank = RepBank::new(lm.config.d_model, lm.config.n_layers);
    for pair in per_triplet.into_iter().flatten() {
        bank.push(pair)?;
    }
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylm::ToyLmConfig;

    fn lm() -> ToyLmParams {
        ToyLmParams::init(ToyLmConfig {
            vocab_size: 9,
            d_model: 8,
            n_layers: 4,
            n_heads: 2,
            d_ff: 8,
            max_len: 8,
            seed: 0,
        })
        .unwrap()
    }

    #[test]
    fn record_count_shared_tokens() {
        // Answers share tokens 5 and 6: 2 tokens x 8 sites x 2 polarities.
        let t = Triplet {
            id: 0,
            question: vec![1, 2],
            answer_pos: vec![5, 3, 6],
            answer_neg: vec![5, 4, 6],
        };
        let bank = extract_reps(&lm(), &[t], false).unwrap();
        assert_eq!(bank.records().count(), 32);
    }

    #[test]
    fn all_tokens_truncates_positionally() {
        let t = Triplet {
            id: 0,
            question: vec![1],
            answer_pos: vec![5, 3, 6, 7],
            answer_neg: vec![8, 4],
        };
        let bank = extract_reps(&lm(), &[t], true).unwrap();
        assert_eq!(bank.len(), 2 * 8);
        let p = bank
            .pairs
            .iter()
            .find(|p| p.site == ProbeSite::attn(0) && p.key.occurrence == 1)
            .unwrap();
        assert!(p.key.is_positional());
        let (_, taps) = lm().forward_with_taps(&[1, 5, 3, 6, 7]).unwrap();
        assert_eq!(p.x_pos, taps.get(ProbeSite::attn(0), 2));
    }

    #[test]
    fn identical_answers_give_identical_pairs() {
        let t = Triplet {
            id: 4,
            question: vec![2],
            answer_pos: vec![3, 3],
            answer_neg: vec![3, 3],
        };
        let bank = extract_reps(&lm(), &[t], false).unwrap();
        assert_eq!(bank.len(), 16);
        assert!(bank.pairs.iter().all(|p| p.x_pos == p.x_neg));
    }

    #[test]
    fn skips_disjoint_and_overlong() {
        let t1 = Triplet {
            id: 0,
            question: vec![1],
            answer_pos: vec![2],
            answer_neg: vec![3],
        };
        let t2 = Triplet {
            id: 1,
            question: vec![1; 6],
            answer_pos: vec![2, 3, 4],
            answer_neg: vec![2],
        };
        assert!(extract_reps(&lm(), &[t1, t2], false).unwrap().is_empty());
    }

    #[test]
    fn order_is_sample_then_site() {
        let a = Triplet {
            id: 1,
            question: vec![1],
            answer_pos: vec![5, 6],
            answer_neg: vec![6, 5],
        };
        let b = Triplet {
            id: 0,
            question: vec![2],
            answer_pos: vec![5],
            answer_neg: vec![5],
        };
        let bank = extract_reps(&lm(), &[a.clone(), b.clone()], false).unwrap();
        let keys: Vec<(u32, usize)> = bank
            .pairs
            .iter()
            .map(|p| (p.sample, p.site.index()))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(bank, extract_reps(&lm(), &[b, a], false).unwrap());
    }
}
