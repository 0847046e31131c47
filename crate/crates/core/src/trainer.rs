//! The two training stages and hyperparameter sweeps.
//!
//! SFT maximises `log π(target | x)` over the candidate set. Preference
//! optimisation starts from an SFT checkpoint, keeps a frozen copy of it as
//! the reference model and minimises one of the pairwise objectives.
//! Both stages use Adam with a linear warm-up followed by a constant rate.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::config::{format_kv, parse_value};
use crate::dataset::{ItemIdx, SequenceExample};
use crate::error::{Error, Result};
use crate::objectives::{loss_and_grad, LogProbBundle, ObjectiveConfig, ObjectiveKind};
use crate::policy::{log_softmax_in_place, Adam, Checkpoint, CheckpointMeta, ParamSet, PolicyModel, Stage};
use crate::prefdata::PreferencePair;
use crate::rng;

pub const SFT_LR: f64 = 1e-3;
pub const PO_LR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub stage: Stage,
    pub objective: ObjectiveConfig,
    pub batch_size: usize,
    /// Micro-batches per optimiser step; the effective batch stays
    /// `batch_size`.
    pub grad_accum: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub data_fraction: f64,
    /// Model width, used when a stage initialises a fresh model.
    pub d: usize,
}

impl RunConfig {
    pub fn new(stage: Stage) -> Self {
        RunConfig {
            seed: 0,
            stage,
            objective: ObjectiveConfig::new(ObjectiveKind::RosePo),
            batch_size: 256,
            grad_accum: 1,
            lr: if stage == Stage::Po { PO_LR } else { SFT_LR },
            warmup_fraction: 0.1,
            epochs: 1,
            data_fraction: 1.0,
            d: 64,
        }
    }

    pub const KEYS: [&'static str; 17] = [
        "seed",
        "stage",
        "objective",
        "beta",
        "epsilon",
        "tau",
        "alpha",
        "lambda",
        "gamma",
        "n_negatives",
        "batch_size",
        "grad_accum",
        "lr",
        "warmup_fraction",
        "epochs",
        "data_fraction",
        "d",
    ];

    /// Sets one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let o = &mut self.objective;
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "stage" => {
                self.stage = match value {
                    "sft" => Stage::Sft,
                    "po" => Stage::Po,
                    _ => return Err(Error::Config(format!("stage must be sft or po, got `{value}`"))),
                }
            }
            "objective" => o.kind = value.parse()?,
            "beta" => o.beta = parse_value(key, value)?,
            "epsilon" => o.epsilon = parse_value(key, value)?,
            "tau" => o.tau = parse_value(key, value)?,
            "alpha" => o.alpha = parse_value(key, value)?,
            "lambda" => o.lambda = parse_value(key, value)?,
            "gamma" => o.gamma = parse_value(key, value)?,
            "n_negatives" => o.n_negatives = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "grad_accum" => self.grad_accum = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "warmup_fraction" => self.warmup_fraction = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "data_fraction" => self.data_fraction = parse_value(key, value)?,
            "d" => self.d = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let o = &self.objective;
        Some(match key {
            "seed" => self.seed.to_string(),
            "stage" => self.stage.as_str().to_string(),
            "objective" => o.kind.to_string(),
            "beta" => o.beta.to_string(),
            "epsilon" => o.epsilon.to_string(),
            "tau" => o.tau.to_string(),
            "alpha" => o.alpha.to_string(),
            "lambda" => o.lambda.to_string(),
            "gamma" => o.gamma.to_string(),
            "n_negatives" => o.n_negatives.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "grad_accum" => self.grad_accum.to_string(),
            "lr" => self.lr.to_string(),
            "warmup_fraction" => self.warmup_fraction.to_string(),
            "epochs" => self.epochs.to_string(),
            "data_fraction" => self.data_fraction.to_string(),
            "d" => self.d.to_string(),
            _ => return None,
        })
    }

    /// Builds a config for `stage` from `key = value` pairs; a `stage` key,
    /// if present, must agree.
    pub fn from_pairs(stage: Stage, pairs: &[(String, String)]) -> Result<Self> {
        let mut c = RunConfig::new(stage);
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        if c.stage != stage {
            return Err(Error::StageMismatch {
                expected: stage.as_str().into(),
                found: c.stage.as_str().into(),
            });
        }
        Ok(c)
    }

    pub fn to_kv_string(&self) -> String {
        let pairs: Vec<(&str, String)> = Self::KEYS.iter().map(|&k| (k, self.get(k).unwrap())).collect();
        format_kv(&pairs)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage == Stage::Oracle {
            return bad("a run is either sft or po".into());
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return bad("batch_size and grad_accum must be ≥ 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction must lie in [0, 1], got {}", self.warmup_fraction));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return bad(format!("data_fraction must lie in (0, 1], got {}", self.data_fraction));
        }
        if self.d == 0 {
            return bad("d must be ≥ 1".into());
        }
        if self.stage == Stage::Po {
            self.objective.validate()?;
        }
        Ok(())
    }
}

/// Linear warm-up from `lr / W` to `lr` over the first `W` steps, then
/// constant, with `W = ceil(warmup_fraction · total_steps)`.
pub fn lr_at(step: usize, total_steps: usize, lr: f64, warmup_fraction: f64) -> f64 {
    let w = (warmup_fraction * total_steps as f64).ceil() as usize;
    if step < w {
        lr * (step + 1) as f64 / w as f64
    } else {
        lr
    }
}

/// Indices (ascending) of a `fraction` subset of `0..n`. The subset is a
/// prefix of one seeded permutation, so smaller fractions are contained in
/// larger ones.
pub fn fraction_subset(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, "data-fraction", 0));
    let keep = ((fraction * n as f64).round() as usize).clamp(usize::from(n > 0), n);
    let mut out = perm[..keep].to_vec();
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
}

pub fn metrics_csv(log: &[StepLog]) -> String {
    let mut s = String::from("step,loss,lr\n");
    for l in log {
        let _ = writeln!(s, "{},{:.8},{:e}", l.step, l.loss, l.lr);
    }
    s
}

pub fn write_metrics(path: &Path, log: &[StepLog]) -> Result<()> {
    fs::write(path, metrics_csv(log)).map_err(|e| Error::io(path, e))
}

/// Shared Adam loop. `per_item` returns `weight · loss` and adds
/// `weight · grad` into the gradient buffer.
fn optimise<T, F>(model: &mut PolicyModel, items: &[T], config: &RunConfig, per_item: F) -> Result<Vec<StepLog>>
where
    T: Sync,
    F: Fn(&PolicyModel, &T, f64, &mut ParamSet) -> Result<f64> + Sync,
{
    let steps_per_epoch = items.len().div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;
    let mut adam = Adam::new(model.params().len());
    let mut log = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng::stream(config.seed, "shuffle", epoch as u64));
        for batch in order.chunks(config.batch_size) {
            let w = 1.0 / batch.len() as f64;
            let micro = batch.len().div_ceil(config.grad_accum);
            let mut loss = 0.0;
            let mut grads = ParamSet::zeros(model.n_items(), model.d());
            for part in batch.chunks(micro) {
                let (l, g) = model.accumulate(part, |m, &i, g| per_item(m, &items[i], w, g))?;
                loss += l;
                grads.add_assign(&g);
            }
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            let lr = lr_at(step, total, config.lr, config.warmup_fraction);
            adam.step(model.params_mut(), &grads, lr)?;
            log.push(StepLog { step, loss, lr });
            step += 1;
        }
    }
    Ok(log)
}

fn target_position(ex: &SequenceExample, item: ItemIdx) -> Result<usize> {
    ex.candidates
        .iter()
        .position(|&c| c == item)
        .ok_or_else(|| Error::NotACandidate(format!("#{item} in example {}", ex.id)))
}

/// Supervised fine-tuning from a fresh model on the given examples.
pub fn train_sft(config: &RunConfig, n_items: usize, train: &[SequenceExample]) -> Result<TrainOutcome> {
    config.validate()?;
    if config.stage != Stage::Sft {
        return Err(Error::StageMismatch {
            expected: "sft".into(),
            found: config.stage.as_str().into(),
        });
    }
    let keep = fraction_subset(train.len(), config.data_fraction, config.seed);
    let data: Vec<&SequenceExample> = keep.iter().map(|&i| &train[i]).collect();
    if data.is_empty() {
        return Err(Error::Config("no training examples".into()));
    }
    let mut model = PolicyModel::init(n_items, config.d, rng::derive(config.seed, "sft-init", 0));
    let log = optimise(&mut model, &data, config, |m, ex, w, g| {
        let pos = target_position(ex, ex.target)?;
        m.cross_entropy_into(&ex.history, &ex.candidates, pos, w, g)
    })?;
    let meta = CheckpointMeta::new(Stage::Sft, config.seed, log.len() as u64);
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(model, meta),
        log,
    })
}

/// Reference log-probabilities of one pair's responses.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceLogProbs {
    pub chosen: f64,
    pub rejected: f64,
    pub extra: Vec<f64>,
}

struct PairPositions {
    chosen: usize,
    rejected: usize,
    extra: Vec<usize>,
}

fn positions(pair: &PreferencePair, use_extra: bool) -> Result<PairPositions> {
    let ex = &pair.example;
    Ok(PairPositions {
        chosen: target_position(ex, pair.chosen)?,
        rejected: target_position(ex, pair.rejected)?,
        extra: if use_extra {
            pair.extra_negatives
                .iter()
                .map(|&x| target_position(ex, x))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        },
    })
}

pub fn reference_log_probs(reference: &PolicyModel, pairs: &[&PreferencePair]) -> Result<Vec<ReferenceLogProbs>> {
    pairs
        .par_iter()
        .map(|p| {
            let pos = positions(p, true)?;
            let lp = reference.log_probs(&p.example.history, &p.example.candidates)?;
            Ok(ReferenceLogProbs {
                chosen: lp[pos.chosen],
                rejected: lp[pos.rejected],
                extra: pos.extra.iter().map(|&j| lp[j]).collect(),
            })
        })
        .collect()
}

/// One pair's objective value, with `weight · ∂loss/∂params` added into
/// `grads`.
pub fn pair_loss_into(
    model: &PolicyModel,
    pair: &PreferencePair,
    reference: &ReferenceLogProbs,
    objective: &ObjectiveConfig,
    weight: f64,
    grads: &mut ParamSet,
) -> Result<f64> {
    let ex = &pair.example;
    let sdpo = objective.kind == ObjectiveKind::SDpo;
    let pos = positions(pair, sdpo)?;
    let trace = model.forward(&ex.history)?;
    let mut lp = model.scores_for(&trace, &ex.candidates)?;
    log_softmax_in_place(&mut lp);
    let bundle = LogProbBundle {
        lp_w: lp[pos.chosen],
        lp_l: lp[pos.rejected],
        ref_lp_w: reference.chosen,
        ref_lp_l: reference.rejected,
        len_w: 1,
        len_l: 1,
        extra_negatives: pos
            .extra
            .iter()
            .zip(&reference.extra)
            .map(|(&j, &r)| (lp[j], r))
            .collect(),
    };
    let (loss, g) = loss_and_grad(objective, &bundle, pair.epsilon)?;
    // ∂lp_k/∂s_j = δ_jk − p_j
    let mut gl = vec![0.0; lp.len()];
    gl[pos.chosen] += g.d_lp_w;
    gl[pos.rejected] += g.d_lp_l;
    for (&j, &d) in pos.extra.iter().zip(&g.d_extra) {
        gl[j] += d;
    }
    let sum: f64 = gl.iter().sum();
    let ds: Vec<f64> = gl
        .iter()
        .zip(&lp)
        .map(|(&gj, &l)| weight * (gj - sum * l.exp()))
        .collect();
    model.backward(&trace, &ex.history, &ex.candidates, &ds, grads);
    Ok(weight * loss)
}

/// Preference optimisation from an SFT checkpoint. The reference model is
/// the checkpoint itself and is never modified.
pub fn train_po(config: &RunConfig, pairs: &[PreferencePair], sft: &Checkpoint) -> Result<TrainOutcome> {
    config.validate()?;
    if config.stage != Stage::Po {
        return Err(Error::StageMismatch {
            expected: "po".into(),
            found: config.stage.as_str().into(),
        });
    }
    if sft.meta.stage != Stage::Sft {
        return Err(Error::StageMismatch {
            expected: "sft".into(),
            found: sft.meta.stage.as_str().into(),
        });
    }
    let keep = fraction_subset(pairs.len(), config.data_fraction, config.seed);
    let data: Vec<&PreferencePair> = keep.iter().map(|&i| &pairs[i]).collect();
    let refs = reference_log_probs(&sft.model, &data)?;
    let items: Vec<(&PreferencePair, &ReferenceLogProbs)> = data.into_iter().zip(&refs).collect();
    let mut model = sft.model.clone();
    let objective = &config.objective;
    let log = optimise(&mut model, &items, config, |m, &(p, r), w, g| {
        pair_loss_into(m, p, r, objective, w, g)
    })?;
    let meta = CheckpointMeta::new(Stage::Po, config.seed, log.len() as u64);
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(model, meta),
        log,
    })
}

/// One grid point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub label: String,
    pub config: RunConfig,
}

/// The cartesian product of `grid` applied to `base`, first key slowest.
pub fn grid_cells(base: &RunConfig, grid: &[(String, Vec<String>)]) -> Result<Vec<SweepCell>> {
    let mut cells = vec![SweepCell {
        label: "base".to_string(),
        config: base.clone(),
    }];
    for (key, values) in grid {
        if values.is_empty() {
            return Err(Error::Config(format!("grid key `{key}` has no values")));
        }
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for cell in &cells {
            for v in values {
                let mut config = cell.config.clone();
                config.set(key, v)?;
                let label = if cell.label == "base" {
                    format!("{key}={v}")
                } else {
                    format!("{};{key}={v}", cell.label)
                };
                next.push(SweepCell { label, config });
            }
        }
        cells = next;
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cell: String,
    pub seed: u64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub metric: String,
    pub rows: Vec<SweepRow>,
    /// Per-cell seed means, in cell order.
    pub means: Vec<(String, f64)>,
    pub best: usize,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("cell,seed,{}\n", self.metric);
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.6}", r.cell, r.seed, r.value);
        }
        for (cell, m) in &self.means {
            let _ = writeln!(s, "{cell},mean,{m:.6}");
        }
        s
    }
}

/// Runs `run` for every grid cell and seed (in parallel) and picks the cell
/// with the highest seed-mean metric; the earliest cell wins ties.
pub fn sweep<F>(
    base: &RunConfig,
    grid: &[(String, Vec<String>)],
    seeds: &[u64],
    metric: &str,
    run: F,
) -> Result<(RunConfig, SweepReport)>
where
    F: Fn(&RunConfig) -> Result<f64> + Sync,
{
    let cells = grid_cells(base, grid)?;
    let seeds: Vec<u64> = if seeds.is_empty() { vec![base.seed] } else { seeds.to_vec() };
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let values: Vec<f64> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let mut cfg = cells[c].config.clone();
            cfg.seed = seed;
            run(&cfg)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<SweepRow> = jobs
        .iter()
        .zip(&values)
        .map(|(&(c, seed), &value)| SweepRow {
            cell: cells[c].label.clone(),
            seed,
            value,
        })
        .collect();
    let means: Vec<(String, f64)> = cells
        .iter()
        .enumerate()
        .map(|(c, cell)| {
            let v = &values[c * seeds.len()..(c + 1) * seeds.len()];
            (cell.label.clone(), v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    let mut best = 0;
    for (i, (_, m)) in means.iter().enumerate() {
        if *m > means[best].1 {
            best = i;
        }
    }
    Ok((
        cells[best].config.clone(),
        SweepReport {
            metric: metric.to_string(),
            rows,
            means,
            best,
        },
    ))
}
