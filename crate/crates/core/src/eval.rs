//! Ranking metrics and the two harm metrics (semantic and popularity bias).

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::dataset::{ItemIdx, PopularityTable, SequenceExample, UserRecords};
use crate::embeddings::EmbeddingStore;
use crate::error::{Error, Result};
use crate::policy::PolicyModel;
use crate::{rng, NUM_CANDIDATES};

/// The cut-offs every metric table reports.
pub const KS: [usize; 4] = [1, 5, 10, 20];

/// Similarities to the target below this magnitude make the relative
/// semantic bias undefined; such examples are skipped.
pub const SIM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CandidateSource {
    Given,
    SemanticHard,
    AllItems,
}

impl CandidateSource {
    pub const ALL: [CandidateSource; 3] = [
        CandidateSource::Given,
        CandidateSource::SemanticHard,
        CandidateSource::AllItems,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CandidateSource::Given => "given",
            CandidateSource::SemanticHard => "semantic_hard",
            CandidateSource::AllItems => "all_items",
        }
    }
}

impl fmt::Display for CandidateSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CandidateSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        CandidateSource::ALL
            .into_iter()
            .find(|c| c.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown evaluation mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub example_id: usize,
    /// Candidates by descending score, ties by ascending item.
    pub ranked: Vec<ItemIdx>,
    pub rank_of_target: usize,
    pub top1: ItemIdx,
}

/// Sorts `universe` by descending score (ties: smaller item first).
pub fn rank_scores(example_id: usize, universe: &[ItemIdx], scores: &[f64], target: ItemIdx) -> Result<RankingResult> {
    let mut order: Vec<usize> = (0..universe.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(universe[a].cmp(&universe[b])));
    let ranked: Vec<ItemIdx> = order.iter().map(|&j| universe[j]).collect();
    let pos = ranked
        .iter()
        .position(|&c| c == target)
        .ok_or_else(|| Error::NotACandidate(format!("target #{target} of example {example_id}")))?;
    Ok(RankingResult {
        example_id,
        top1: ranked[0],
        ranked,
        rank_of_target: pos + 1,
    })
}

/// What the non-given candidate sources need.
#[derive(Clone, Copy)]
pub struct EvalContext<'a> {
    pub store: Option<&'a EmbeddingStore>,
    pub records: Option<&'a UserRecords>,
    pub seed: u64,
}

pub fn universe(example: &SequenceExample, source: CandidateSource, ctx: &EvalContext<'_>, n_items: usize) -> Result<Vec<ItemIdx>> {
    match source {
        CandidateSource::Given => Ok(example.candidates.clone()),
        CandidateSource::AllItems => Ok((0..n_items as ItemIdx).collect()),
        CandidateSource::SemanticHard => {
            let store = ctx
                .store
                .ok_or_else(|| Error::Config("semantic_hard evaluation needs item embeddings".into()))?;
            let records = ctx
                .records
                .ok_or_else(|| Error::Config("semantic_hard evaluation needs user records".into()))?;
            store.semantic_hard_candidates(
                &example.history,
                example.target,
                records.items(example.user),
                NUM_CANDIDATES,
                rng::derive(ctx.seed, "semantic-hard", example.id as u64),
            )
        }
    }
}

pub fn rank(
    model: &PolicyModel,
    example: &SequenceExample,
    source: CandidateSource,
    ctx: &EvalContext<'_>,
) -> Result<RankingResult> {
    let u = universe(example, source, ctx, model.n_items())?;
    let scores = match source {
        CandidateSource::AllItems => model.all_scores(&example.history)?,
        _ => model.forward_scores(&example.history, &u)?,
    };
    rank_scores(example.id, &u, &scores, example.target)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    Hr,
    Ndcg,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Hr => "HR",
            Metric::Ndcg => "NDCG",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub rows: Vec<(Metric, usize, f64)>,
}

impl MetricTable {
    pub fn get(&self, metric: Metric, k: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|&&(m, kk, _)| m == metric && kk == k)
            .map(|&(_, _, v)| v)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,k,value\n");
        for (m, k, v) in &self.rows {
            let _ = writeln!(s, "{},{k},{v:.6}", m.as_str());
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let bad = || Error::parse("metrics csv", i + 1, format!("bad row `{line}`"));
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(bad());
            }
            let m = match cols[0] {
                "HR" => Metric::Hr,
                "NDCG" => Metric::Ndcg,
                _ => return Err(bad()),
            };
            rows.push((m, cols[1].parse().map_err(|_| bad())?, cols[2].parse().map_err(|_| bad())?));
        }
        Ok(MetricTable { rows })
    }
}

/// `1 / log2(rank + 1)` when `rank ≤ k`, else 0.
pub fn ndcg_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn hr_ndcg(results: &[RankingResult], ks: &[usize]) -> Result<MetricTable> {
    if results.is_empty() {
        return Err(Error::Config("no ranking results to score".into()));
    }
    let n = results.len() as f64;
    let mut rows = Vec::with_capacity(2 * ks.len());
    for &k in ks {
        let hits = results.iter().filter(|r| r.rank_of_target <= k).count() as f64;
        rows.push((Metric::Hr, k, hits / n));
    }
    for &k in ks {
        let gain: f64 = results.iter().map(|r| ndcg_at(r.rank_of_target, k)).sum();
        rows.push((Metric::Ndcg, k, gain / n));
    }
    Ok(MetricTable { rows })
}

/// `(sim(h, rec) − sim(h, target)) / sim(h, target)`, or `None` when the
/// target similarity is too close to zero.
pub fn semantic_bias(
    store: &EmbeddingStore,
    history: &[ItemIdx],
    target: ItemIdx,
    recommended: ItemIdx,
) -> Result<Option<f64>> {
    let st = store.history_similarity(history, target)?;
    if st.abs() < SIM_FLOOR {
        return Ok(None);
    }
    let sr = store.history_similarity(history, recommended)?;
    Ok(Some((sr - st) / st))
}

/// `LogPop(rec) − mean LogPop(history)`.
pub fn popularity_bias(pop: &PopularityTable, history: &[ItemIdx], recommended: ItemIdx) -> f64 {
    let mean = history.iter().map(|&h| pop.log_pop(h)).sum::<f64>() / history.len() as f64;
    pop.log_pop(recommended) - mean
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasRow {
    pub example_id: usize,
    pub semantic: Option<f64>,
    pub popularity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasReport {
    pub rows: Vec<BiasRow>,
}

/// Mean and the nine inner deciles of a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub deciles: [f64; 9],
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarise(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mut deciles = [0.0; 9];
    for (i, d) in deciles.iter_mut().enumerate() {
        *d = quantile(&v, (i + 1) as f64 / 10.0);
    }
    Some(Summary {
        count: v.len(),
        mean: values.iter().sum::<f64>() / values.len() as f64,
        deciles,
    })
}

impl BiasReport {
    pub fn semantic_values(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.semantic).collect()
    }

    pub fn popularity_values(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.popularity).collect()
    }

    pub fn semantic_skipped(&self) -> usize {
        self.rows.iter().filter(|r| r.semantic.is_none()).count()
    }

    pub fn semantic_summary(&self) -> Option<Summary> {
        summarise(&self.semantic_values())
    }

    pub fn popularity_summary(&self) -> Option<Summary> {
        summarise(&self.popularity_values())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("example_id,semantic_bias,popularity_bias\n");
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.example_id, f(r.semantic), f(r.popularity));
        }
        s
    }
}

/// Inputs for bias metrics; either may be absent.
#[derive(Clone, Copy, Default)]
pub struct BiasInputs<'a> {
    pub store: Option<&'a EmbeddingStore>,
    pub pop: Option<&'a PopularityTable>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metrics: BTreeMap<CandidateSource, MetricTable>,
    pub bias: BiasReport,
}

impl EvalReport {
    /// HR@1, HR@5, N@5, N@10, Sem. Bias, Pop. Bias of the given-candidates
    /// mode and the bias means.
    pub fn headline(&self) -> [Option<f64>; 6] {
        let g = self.metrics.get(&CandidateSource::Given);
        let m = |metric, k| g.and_then(|t| t.get(metric, k));
        [
            m(Metric::Hr, 1),
            m(Metric::Hr, 5),
            m(Metric::Ndcg, 5),
            m(Metric::Ndcg, 10),
            self.bias.semantic_summary().map(|s| s.mean),
            self.bias.popularity_summary().map(|s| s.mean),
        ]
    }

    pub fn summary_text(&self) -> String {
        let names = ["HR@1", "HR@5", "N@5", "N@10", "Sem. Bias", "Pop. Bias"];
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        let mut s = String::new();
        let _ = writeln!(s, "{}", names.map(|n| format!("{n:>10}")).join(""));
        let _ = writeln!(s, "{}", self.headline().map(|v| format!("{:>10}", cell(v))).join(""));
        for (mode, table) in &self.metrics {
            let _ = writeln!(s, "\n[{mode}]");
            for (m, k, v) in &table.rows {
                let _ = writeln!(s, "{}@{k} = {v:.6}", m.as_str());
            }
        }
        for (name, sum, skipped) in [
            ("semantic bias", self.bias.semantic_summary(), Some(self.bias.semantic_skipped())),
            ("popularity bias", self.bias.popularity_summary(), None),
        ] {
            if let Some(sm) = sum {
                let _ = writeln!(s, "\n{name}: n = {}, mean = {:.6}", sm.count, sm.mean);
                let d: Vec<String> = sm.deciles.iter().map(|x| format!("{x:.4}")).collect();
                let _ = writeln!(s, "  deciles: {}", d.join(" "));
            }
            if let Some(k) = skipped.filter(|&k| k > 0) {
                let _ = writeln!(s, "  skipped (target similarity ~ 0): {k}");
            }
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: String, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        for (mode, table) in &self.metrics {
            put(format!("metrics_{mode}.csv"), table.to_csv())?;
        }
        put("bias.csv".into(), self.bias.to_csv())?;
        put("summary.txt".into(), self.summary_text())
    }
}

/// Ranks every example under each requested mode and computes bias metrics
/// on the given-candidates top-1.
pub fn evaluate(
    model: &PolicyModel,
    examples: &[SequenceExample],
    modes: &[CandidateSource],
    ctx: &EvalContext<'_>,
    bias: &BiasInputs<'_>,
) -> Result<EvalReport> {
    let mut metrics = BTreeMap::new();
    let mut given: Option<Vec<RankingResult>> = None;
    let mut modes = modes.to_vec();
    modes.sort();
    modes.dedup();
    for &mode in &modes {
        let results: Vec<RankingResult> = examples
            .par_iter()
            .map(|ex| rank(model, ex, mode, ctx))
            .collect::<Result<_>>()?;
        metrics.insert(mode, hr_ndcg(&results, &KS)?);
        if mode == CandidateSource::Given {
            given = Some(results);
        }
    }
    let given = match given {
        Some(g) => g,
        None => examples
            .par_iter()
            .map(|ex| rank(model, ex, CandidateSource::Given, ctx))
            .collect::<Result<_>>()?,
    };
    let rows = examples
        .par_iter()
        .zip(&given)
        .map(|(ex, r)| {
            let semantic = match bias.store {
                Some(s) => semantic_bias(s, &ex.history, ex.target, r.top1)?,
                None => None,
            };
            Ok(BiasRow {
                example_id: ex.id,
                semantic,
                popularity: bias.pop.map(|p| popularity_bias(p, &ex.history, r.top1)),
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        metrics,
        bias: BiasReport { rows },
    })
}
