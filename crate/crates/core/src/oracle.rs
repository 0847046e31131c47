//! The preference oracle: an independently trained next-item scorer whose
//! score gap between a chosen and a rejected item gives the per-pair label
//! flip rate `ε = σ(s_l − s_w)`.

use rand::seq::SliceRandom;

use crate::dataset::{ItemIdx, SequenceExample};
use crate::error::{Error, Result};
use crate::objectives::sigmoid;
use crate::policy::{Adam, PolicyModel};
use crate::rng;

/// Flip rates handed to the loss are kept this far from 0 and 1.
pub const EPSILON_CLAMP: f64 = 1e-4;

/// `e^{s_l} / (e^{s_w} + e^{s_l})`, evaluated as `σ(s_l − s_w)`.
pub fn flip_rate_from_scores(s_w: f64, s_l: f64) -> f64 {
    sigmoid(s_l - s_w)
}

pub fn clamp_epsilon(eps: f64) -> f64 {
    eps.clamp(EPSILON_CLAMP, 1.0 - EPSILON_CLAMP)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleModel {
    model: PolicyModel,
}

impl OracleModel {
    pub fn new(model: PolicyModel) -> Self {
        OracleModel { model }
    }

    pub fn model(&self) -> &PolicyModel {
        &self.model
    }

    pub fn into_model(self) -> PolicyModel {
        self.model
    }

    /// Raw score of `item` after `history`; independent of any candidate set.
    pub fn score(&self, history: &[ItemIdx], item: ItemIdx) -> Result<f64> {
        Ok(self.model.forward_scores(history, &[item])?[0])
    }

    pub fn flip_rate(&self, history: &[ItemIdx], chosen: ItemIdx, rejected: ItemIdx) -> Result<f64> {
        if chosen == rejected {
            return Err(Error::Config(format!("chosen and rejected are both #{chosen}")));
        }
        let s = self.model.forward_scores(history, &[chosen, rejected])?;
        Ok(flip_rate_from_scores(s[0], s[1]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub d: usize,
}

impl Default for OracleTrainConfig {
    fn default() -> Self {
        OracleTrainConfig {
            epochs: 10,
            batch_size: 256,
            lr: 1e-3,
            d: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_hr10: f64,
    pub valid_hr1: f64,
}

/// Full-catalogue hit rates `(HR@1, HR@10)` of `model` on `examples`.
pub fn full_catalogue_hit_rates(model: &PolicyModel, examples: &[SequenceExample]) -> Result<(f64, f64)> {
    use rayon::prelude::*;
    if examples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let ranks: Vec<usize> = examples
        .par_iter()
        .map(|ex| {
            let s = model.all_scores(&ex.history)?;
            let t = ex.target as usize;
            // Items with the same score and a smaller index rank first.
            Ok(1 + s
                .iter()
                .enumerate()
                .filter(|&(i, &v)| v > s[t] || (v == s[t] && i < t))
                .count())
        })
        .collect::<Result<_>>()?;
    let n = ranks.len() as f64;
    let hr = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    Ok((hr(1), hr(10)))
}

/// Trains the oracle by softmax cross-entropy over the whole catalogue and
/// returns the epoch with the best validation HR@10, then HR@1 (earliest on
/// ties).
pub fn train_oracle(
    n_items: usize,
    train: &[SequenceExample],
    valid: &[SequenceExample],
    config: &OracleTrainConfig,
    seed: u64,
) -> Result<(OracleModel, Vec<EpochLog>)> {
    if train.is_empty() {
        return Err(Error::Config("oracle training split is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be ≥ 1".into()));
    }
    let mut model = PolicyModel::init(n_items, config.d, rng::derive(seed, "oracle-init", 0));
    let mut adam = Adam::new(model.params().len());
    let universe: Vec<ItemIdx> = (0..n_items as ItemIdx).collect();
    let mut best: Option<((f64, f64), PolicyModel)> = None;
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(seed, "oracle-shuffle", epoch as u64));
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let w = 1.0 / batch.len() as f64;
            let (loss, grads) = model.accumulate(batch, |m, &i, g| {
                let ex = &train[i];
                m.cross_entropy_into(&ex.history, &universe, ex.target as usize, w, g)
            })?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            adam.step(model.params_mut(), &grads, config.lr)?;
            total += loss * batch.len() as f64;
            step += 1;
        }
        let (hr1, hr10) = full_catalogue_hit_rates(&model, valid)?;
        log.push(EpochLog {
            epoch,
            train_loss: total / train.len() as f64,
            valid_hr10: hr10,
            valid_hr1: hr1,
        });
        if best.as_ref().is_none_or(|(b, _)| (hr10, hr1) > *b) {
            best = Some(((hr10, hr1), model.clone()));
        }
    }
    let model = best.map(|(_, m)| m).unwrap_or(model);
    Ok((OracleModel::new(model), log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;
    use crate::policy::{ParamSet, Tensor};
    use proptest::prelude::*;

    #[test]
    fn flip_rate_examples() {
        assert_eq!(flip_rate_from_scores(1.3, 1.3), 0.5);
        let e = flip_rate_from_scores(2.0, 0.0);
        assert!((e - 1.0 / (1.0 + 2f64.exp())).abs() < 1e-15);
        assert!((e - 0.1192).abs() < 1e-4);
        assert_eq!(clamp_epsilon(0.0), EPSILON_CLAMP);
        assert_eq!(clamp_epsilon(1.0), 1.0 - EPSILON_CLAMP);
        assert_eq!(clamp_epsilon(0.3), 0.3);
    }

    #[test]
    fn duplicated_rows_score_equally() {
        let mut m = PolicyModel::init(6, 4, 5);
        let d = 4;
        let emb = m.params_mut().get_mut(Tensor::ItemEmb);
        let row: Vec<f64> = emb[2 * d..3 * d].to_vec();
        emb[5 * d..6 * d].copy_from_slice(&row);
        let o = OracleModel::new(m);
        let h = [0, 1, 3, 4, 0, 1, 3, 4, 0, 1];
        assert_eq!(o.score(&h, 2).unwrap(), o.score(&h, 5).unwrap());
        assert_eq!(o.flip_rate(&h, 2, 5).unwrap(), 0.5);
        assert!(o.score(&h, 6).is_err());
        assert!(o.flip_rate(&h, 2, 2).is_err());
    }

    #[test]
    fn hand_weighted_score() {
        // Only item embeddings are set: the representation is the last
        // history item's embedding.
        let mut p = ParamSet::zeros(3, 2);
        p.get_mut(Tensor::ItemEmb).copy_from_slice(&[1.0, 2.0, 3.0, -1.0, 0.5, 0.5]);
        let o = OracleModel::new(PolicyModel::from_params(p));
        let h = [2; 10];
        assert!((o.score(&h, 0).unwrap() - 1.5).abs() < 1e-15);
        assert!((o.score(&h, 1).unwrap() - 1.0).abs() < 1e-15);
        let eps = o.flip_rate(&h, 0, 1).unwrap();
        assert!((eps - 1.0 / (1.0 + 0.5f64.exp())).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn flip_rate_properties(sw in -15.0f64..15.0, sl in -15.0f64..15.0, c in -50.0f64..50.0) {
            let e = flip_rate_from_scores(sw, sl);
            prop_assert!(e > 0.0 && e < 1.0);
            prop_assert!((e + flip_rate_from_scores(sl, sw) - 1.0).abs() < 1e-12);
            prop_assert!((e - flip_rate_from_scores(sw + c, sl + c)).abs() < 1e-12);
            let direct = sl.exp() / (sw.exp() + sl.exp());
            prop_assert!((e - direct).abs() < 1e-12);
        }

        #[test]
        fn flip_rate_decreases_in_gap(gap in -20.0f64..20.0, d in 1e-3f64..5.0) {
            prop_assert!(flip_rate_from_scores(gap + d, 0.0) < flip_rate_from_scores(gap, 0.0));
        }
    }

    fn cyclic_examples(n_items: u32, n: usize, split: Split) -> Vec<SequenceExample> {
        (0..n)
            .map(|i| {
                let start = (i as u32 * 7) % n_items;
                let history: Vec<ItemIdx> = (0..10).map(|t| (start + t) % n_items).collect();
                SequenceExample {
                    id: i,
                    user: 0,
                    target: (start + 10) % n_items,
                    history,
                    candidates: Vec::new(),
                    split,
                    label_ts: 0,
                }
            })
            .collect()
    }

    #[test]
    fn oracle_learns_a_deterministic_rule() {
        let train = cyclic_examples(40, 400, Split::Train);
        let valid = cyclic_examples(40, 40, Split::Valid);
        let cfg = OracleTrainConfig {
            epochs: 10,
            batch_size: 16,
            lr: 1e-2,
            d: 16,
        };
        let (o, log) = train_oracle(40, &train, &valid, &cfg, 1).unwrap();
        assert_eq!(log.len(), 10);
        let (hr1, hr10) = full_catalogue_hit_rates(o.model(), &valid).unwrap();
        assert!(hr10 > 10.0 / 40.0, "hr10 {hr10}");
        assert!(hr1 > 0.9, "hr1 {hr1}");
        let (o2, _) = train_oracle(40, &train, &valid, &cfg, 1).unwrap();
        assert_eq!(o.model().checksum(), o2.model().checksum());
    }
}
