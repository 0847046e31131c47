//! Preference pairs `(x, y_w, y_l, ε)` under the rejected-item sampling
//! strategies.
//!
//! Each strategy picks `y_l` for one training example. When the rejected
//! item is not already a candidate, a random non-target distractor is
//! replaced by it so the candidate list keeps its length.

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::dataset::{sample_unseen, ItemIdx, PopularityTable, SequenceExample, UserRecords};
use crate::embeddings::EmbeddingStore;
use crate::error::{Error, Result};
use crate::oracle::{clamp_epsilon, OracleModel};
use crate::policy::PolicyModel;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Uniform,
    SelfHard,
    Semantic,
    Popular,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Uniform,
        Strategy::SelfHard,
        Strategy::Semantic,
        Strategy::Popular,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Uniform => "uniform",
            Strategy::SelfHard => "self-hard",
            Strategy::Semantic => "semantic",
            Strategy::Popular => "popular",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('_', "-");
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// A single strategy, or a uniform per-pair choice among self-hard,
/// semantic and popular.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyChoice {
    Single(Strategy),
    Mixed,
}

impl StrategyChoice {
    pub fn needs_sft(self) -> bool {
        matches!(self, StrategyChoice::Single(Strategy::SelfHard) | StrategyChoice::Mixed)
    }

    pub fn needs_embeddings(self) -> bool {
        matches!(self, StrategyChoice::Single(Strategy::Semantic) | StrategyChoice::Mixed)
    }

    pub fn needs_popularity(self) -> bool {
        matches!(self, StrategyChoice::Single(Strategy::Popular) | StrategyChoice::Mixed)
    }
}

impl FromStr for StrategyChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "mixed" {
            Ok(StrategyChoice::Mixed)
        } else {
            s.parse().map(StrategyChoice::Single)
        }
    }
}

impl fmt::Display for StrategyChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StrategyChoice::Single(s) => s.fmt(f),
            StrategyChoice::Mixed => f.write_str("mixed"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    /// The prompt; its candidate list contains both responses.
    pub example: SequenceExample,
    pub chosen: ItemIdx,
    pub rejected: ItemIdx,
    /// Flip rate; `None` until an oracle (or a known noise rate) sets it.
    pub epsilon: Option<f64>,
    pub strategy: Strategy,
    /// Further negatives from the candidate list for multi-negative losses.
    pub extra_negatives: Vec<ItemIdx>,
}

impl PreferencePair {
    /// Checks the structural invariants. Pairs whose labels were flipped on
    /// purpose still pass: only `chosen = target` is not required.
    pub fn validate(&self) -> Result<()> {
        let ex = &self.example;
        let bad = |m: String| Err(Error::Config(format!("pair {}: {m}", ex.id)));
        if self.chosen == self.rejected {
            return bad("chosen equals rejected".into());
        }
        for (what, item) in [("chosen", self.chosen), ("rejected", self.rejected)] {
            if !ex.candidates.contains(&item) {
                return bad(format!("{what} #{item} is not a candidate"));
            }
        }
        if let Some(e) = self.epsilon {
            if !(e > 0.0 && e < 1.0) {
                return bad(format!("epsilon {e} outside (0, 1)"));
            }
        }
        for &x in &self.extra_negatives {
            if x == self.chosen || x == self.rejected || !ex.candidates.contains(&x) {
                return bad(format!("bad extra negative #{x}"));
            }
        }
        Ok(())
    }
}

/// Puts `rejected` into the candidate list in place of a random non-target
/// distractor, unless it is already there.
pub fn amend_candidates(example: &SequenceExample, rejected: ItemIdx, seed: u64) -> SequenceExample {
    let mut ex = example.clone();
    if ex.candidates.contains(&rejected) {
        return ex;
    }
    let slots: Vec<usize> = (0..ex.candidates.len())
        .filter(|&j| ex.candidates[j] != ex.target)
        .collect();
    match slots.choose(&mut rng::rng(seed)) {
        Some(&j) => ex.candidates[j] = rejected,
        None => ex.candidates.push(rejected),
    }
    ex
}

fn pair(example: &SequenceExample, rejected: ItemIdx, strategy: Strategy, amend_seed: u64) -> PreferencePair {
    PreferencePair {
        example: amend_candidates(example, rejected, amend_seed),
        chosen: example.target,
        rejected,
        epsilon: None,
        strategy,
        extra_negatives: Vec::new(),
    }
}

fn amend_seed(seed: u64) -> u64 {
    rng::derive(seed, "amend", 0)
}

/// Rejected item drawn uniformly from the items the user never touched.
pub fn sample_uniform(
    example: &SequenceExample,
    user_record: &[ItemIdx],
    catalogue_len: usize,
    seed: u64,
) -> Result<PreferencePair> {
    let mut r = rng::rng(seed);
    let rejected = match sample_unseen(&mut r, user_record, catalogue_len, 1) {
        Ok(v) => v[0],
        Err(_) => {
            return Err(Error::EmptyFeasibleSet(format!(
                "example {}: the user has interacted with every item",
                example.id
            )))
        }
    };
    Ok(pair(example, rejected, Strategy::Uniform, amend_seed(seed)))
}

/// A candidate the SFT model ranks above the target, or a uniform draw with
/// the same seed when the model's top-1 is already the target.
pub fn sample_self_hard(
    example: &SequenceExample,
    user_record: &[ItemIdx],
    catalogue_len: usize,
    sft: &PolicyModel,
    seed: u64,
) -> Result<PreferencePair> {
    let lp = sft.log_probs(&example.history, &example.candidates)?;
    let t = example
        .candidates
        .iter()
        .position(|&c| c == example.target)
        .ok_or_else(|| Error::NotACandidate(format!("#{}", example.target)))?;
    let above: Vec<ItemIdx> = example
        .candidates
        .iter()
        .zip(&lp)
        .filter(|&(_, &l)| l > lp[t])
        .map(|(&c, _)| c)
        .collect();
    if above.is_empty() {
        let mut p = sample_uniform(example, user_record, catalogue_len, seed)?;
        p.strategy = Strategy::SelfHard;
        return Ok(p);
    }
    let rejected = above[rng::rng(seed).random_range(0..above.len())];
    Ok(pair(example, rejected, Strategy::SelfHard, amend_seed(seed)))
}

/// The non-interacted item most similar to the history.
pub fn sample_semantic(
    example: &SequenceExample,
    user_record: &[ItemIdx],
    store: &EmbeddingStore,
    seed: u64,
) -> Result<PreferencePair> {
    let rejected = store.most_similar_item(&example.history, user_record)?;
    Ok(pair(example, rejected, Strategy::Semantic, amend_seed(seed)))
}

/// Draws items with probability proportional to training popularity.
#[derive(Debug, Clone)]
pub struct PopularSampler {
    counts: Vec<u64>,
    index: Option<WeightedIndex<u64>>,
}

impl PopularSampler {
    const MAX_REJECTIONS: usize = 64;

    pub fn new(pop: &PopularityTable) -> Self {
        PopularSampler {
            counts: pop.counts.clone(),
            index: WeightedIndex::new(&pop.counts).ok(),
        }
    }

    /// A draw from the popularity distribution restricted to items outside
    /// `excluded` (sorted).
    pub fn sample(&self, rng: &mut rng::Rng, excluded: &[ItemIdx]) -> Option<ItemIdx> {
        let index = self.index.as_ref()?;
        for _ in 0..Self::MAX_REJECTIONS {
            let i = index.sample(rng) as ItemIdx;
            if excluded.binary_search(&i).is_err() {
                return Some(i);
            }
        }
        // Most of the mass is excluded: sample the restriction directly.
        let feasible: Vec<(ItemIdx, u64)> = (0..self.counts.len() as ItemIdx)
            .filter(|i| excluded.binary_search(i).is_err())
            .map(|i| (i, self.counts[i as usize]))
            .filter(|&(_, c)| c > 0)
            .collect();
        let w = WeightedIndex::new(feasible.iter().map(|&(_, c)| c)).ok()?;
        Some(feasible[w.sample(rng)].0)
    }
}

pub fn sample_popular(
    example: &SequenceExample,
    user_record: &[ItemIdx],
    sampler: &PopularSampler,
    seed: u64,
) -> Result<PreferencePair> {
    let rejected = sampler.sample(&mut rng::rng(seed), user_record).ok_or_else(|| {
        Error::EmptyFeasibleSet(format!(
            "example {}: no item outside the user's record has any training interactions; \
             use the uniform strategy instead",
            example.id
        ))
    })?;
    Ok(pair(example, rejected, Strategy::Popular, amend_seed(seed)))
}

/// Everything a strategy might need. Only the inputs of the strategies in
/// use must be present.
#[derive(Clone, Copy)]
pub struct SamplingContext<'a> {
    pub records: &'a UserRecords,
    pub catalogue_len: usize,
    pub sft: Option<&'a PolicyModel>,
    pub store: Option<&'a EmbeddingStore>,
    pub popular: Option<&'a PopularSampler>,
}

impl SamplingContext<'_> {
    pub fn sample(&self, strategy: Strategy, example: &SequenceExample, seed: u64) -> Result<PreferencePair> {
        let record = self.records.items(example.user);
        let missing = |what: &str| Error::Config(format!("strategy {strategy} needs {what}"));
        match strategy {
            Strategy::Uniform => sample_uniform(example, record, self.catalogue_len, seed),
            Strategy::SelfHard => {
                let sft = self.sft.ok_or_else(|| missing("an SFT checkpoint"))?;
                sample_self_hard(example, record, self.catalogue_len, sft, seed)
            }
            Strategy::Semantic => {
                let store = self.store.ok_or_else(|| missing("item embeddings"))?;
                sample_semantic(example, record, store, seed)
            }
            Strategy::Popular => {
                let pop = self.popular.ok_or_else(|| missing("a popularity table"))?;
                sample_popular(example, record, pop, seed)
            }
        }
    }
}

const MIXED: [Strategy; 3] = [Strategy::SelfHard, Strategy::Semantic, Strategy::Popular];

/// Picks one of self-hard, semantic and popular uniformly, then delegates
/// with the same seed.
pub fn sample_mixed(ctx: &SamplingContext<'_>, example: &SequenceExample, seed: u64) -> Result<PreferencePair> {
    let pick = rng::stream(seed, "mixed", 0).random_range(0..MIXED.len());
    ctx.sample(MIXED[pick], example, seed)
}

/// Sets `ε = σ(s_l − s_w)` from the oracle, clamped away from 0 and 1.
pub fn attach_epsilon(mut pair: PreferencePair, oracle: &OracleModel) -> Result<PreferencePair> {
    let e = oracle.flip_rate(&pair.example.history, pair.chosen, pair.rejected)?;
    pair.epsilon = Some(clamp_epsilon(e));
    Ok(pair)
}

/// Draws `k` distinct negatives from the candidates other than the two
/// responses.
pub fn draw_extra_negatives(pair: &PreferencePair, k: usize, seed: u64) -> Result<Vec<ItemIdx>> {
    let pool: Vec<ItemIdx> = pair
        .example
        .candidates
        .iter()
        .copied()
        .filter(|&c| c != pair.chosen && c != pair.rejected)
        .collect();
    if pool.len() < k {
        return Err(Error::CatalogueTooSmall {
            needed: k,
            available: pool.len(),
        });
    }
    Ok(pool.choose_multiple(&mut rng::rng(seed), k).copied().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOptions {
    pub choice: StrategyChoice,
    pub extra_negatives: usize,
    pub seed: u64,
}

/// One pair per example, built in parallel and returned in input order.
/// Example `i` uses the seed `derive(seed, "rejected", example.id)`.
pub fn build_preferences(
    examples: &[SequenceExample],
    ctx: &SamplingContext<'_>,
    oracle: Option<&OracleModel>,
    options: &BuildOptions,
) -> Result<Vec<PreferencePair>> {
    examples
        .par_iter()
        .map(|ex| {
            let id = ex.id as u64;
            let seed = rng::derive(options.seed, "rejected", id);
            let mut p = match options.choice {
                StrategyChoice::Single(s) => ctx.sample(s, ex, seed)?,
                StrategyChoice::Mixed => sample_mixed(ctx, ex, seed)?,
            };
            if options.extra_negatives > 0 {
                let s = rng::derive(options.seed, "extra-negatives", id);
                p.extra_negatives = draw_extra_negatives(&p, options.extra_negatives, s)?;
            }
            match oracle {
                Some(o) => attach_epsilon(p, o),
                None => Ok(p),
            }
        })
        .collect()
}
