use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use rosepo::dataset::{self, popularity, prepare_examples, train_cutoff};
use rosepo::embeddings::cooccurrence_embeddings;
use rosepo::eval::{self, BiasInputs, CandidateSource, EvalContext, Metric};
use rosepo::oracle::{train_oracle as fit_oracle, OracleTrainConfig};
use rosepo::persist::{self, Prepared};
use rosepo::policy::CheckpointMeta;
use rosepo::prefdata::{build_preferences, BuildOptions, PopularSampler, SamplingContext, StrategyChoice};
use rosepo::synthetic::{self, SyntheticSpec};
use rosepo::trainer::{self, RunConfig};
use rosepo::{Checkpoint, EmbeddingStore, OracleModel, PolicyModel, PreferencePair, SequenceExample, Split, Stage};

use crate::manifest::Manifest;
use crate::{
    BuildPrefsArgs, EvaluateArgs, InjectFlipsArgs, PrepareArgs, RunArgs, SweepArgs, SynthArgs, TrainOracleArgs,
    TrainPoArgs, TrainSftArgs,
};

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_data(dir: &Path, manifest: &mut Manifest) -> Result<Prepared> {
    for f in ["items.tsv", "examples.tsv"] {
        manifest.input(f.trim_end_matches(".tsv"), &dir.join(f))?;
    }
    Prepared::load(dir).with_context(|| format!("loading prepared data from {}", dir.display()))
}

fn load_checkpoint(path: &Path, stage: Stage, role: &str, manifest: &mut Manifest) -> Result<Checkpoint> {
    manifest.input(role, path)?;
    let ckpt = Checkpoint::load(path)?;
    ensure!(
        ckpt.meta.stage == stage,
        "{} is a {} checkpoint, expected {}",
        path.display(),
        ckpt.meta.stage.as_str(),
        stage.as_str()
    );
    Ok(ckpt)
}

fn parse_split(s: &str) -> Result<Split> {
    Split::parse(s).with_context(|| format!("unknown split `{s}`"))
}

/// `hr@K` or `ndcg@K`; the `@` is optional.
pub fn parse_metric(s: &str) -> Result<(Metric, usize)> {
    let lower = s.to_ascii_lowercase();
    let (m, k) = if let Some(k) = lower.strip_prefix("ndcg") {
        (Metric::Ndcg, k)
    } else if let Some(k) = lower.strip_prefix("hr") {
        (Metric::Hr, k)
    } else {
        bail!("unknown metric `{s}`; expected hr@K or ndcg@K");
    };
    let k: usize = k.trim_start_matches('@').parse().with_context(|| format!("bad cutoff in `{s}`"))?;
    ensure!(eval::KS.contains(&k), "cutoff {k} not among {:?}", eval::KS);
    Ok((m, k))
}

fn run_config(stage: Stage, run: &RunArgs, extra: &[(&str, Option<String>)], manifest: &mut Manifest) -> Result<RunConfig> {
    let mut c = match &run.config {
        Some(path) => {
            manifest.input("config", path)?;
            RunConfig::from_pairs(stage, &rosepo::config::read_kv(path)?)?
        }
        None => RunConfig::new(stage),
    };
    let flags: Vec<(&str, Option<String>)> = vec![
        ("seed", run.seed.map(|v| v.to_string())),
        ("lr", run.lr.map(|v| v.to_string())),
        ("batch_size", run.batch_size.map(|v| v.to_string())),
        ("grad_accum", run.grad_accum.map(|v| v.to_string())),
        ("epochs", run.epochs.map(|v| v.to_string())),
        ("warmup_fraction", run.warmup_fraction.map(|v| v.to_string())),
        ("data_fraction", run.data_fraction.map(|v| v.to_string())),
        ("d", run.d.map(|v| v.to_string())),
    ];
    for (k, v) in flags.iter().chain(extra) {
        if let Some(v) = v {
            c.set(k, v)?;
        }
    }
    for kv in &run.sets {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        c.set(k.trim(), v.trim())?;
    }
    c.validate()?;
    Ok(c)
}

fn validation_table(model: &PolicyModel, data: &Prepared, seed: u64) -> rosepo::Result<eval::MetricTable> {
    let valid = data.split(Split::Valid);
    if valid.is_empty() {
        return Err(rosepo::Error::Config("validation split is empty".into()));
    }
    let ctx = EvalContext {
        store: Some(&data.embeddings),
        records: Some(&data.records),
        seed,
    };
    let none = BiasInputs { store: None, pop: None };
    let report = eval::evaluate(model, &valid, &[CandidateSource::Given], &ctx, &none)?;
    Ok(report.metrics[&CandidateSource::Given].clone())
}

fn write_run(dir: &Path, config: &RunConfig, out: &trainer::TrainOutcome, name: &str, data: &Prepared) -> Result<()> {
    write(&dir.join("config.txt"), &config.to_kv_string())?;
    out.checkpoint.save(&dir.join("checkpoints").join(name))?;
    trainer::write_metrics(&dir.join("metrics.csv"), &out.log)?;
    let table = validation_table(&out.checkpoint.model, data, config.seed)?;
    write(&dir.join("report.csv"), &table.to_csv())
}

pub fn prepare(a: PrepareArgs) -> Result<()> {
    let mut m = Manifest::new("prepare");
    m.note("seed", a.seed);
    m.input("interactions", &a.interactions)?;
    m.input("items", &a.items)?;
    let ds = dataset::ingest(&a.interactions, &a.items, a.min_rating)?;
    let examples = prepare_examples(&ds, a.min_user_interactions, a.seed)?;
    let pop = popularity(&ds, &examples);
    let embeddings = match &a.embeddings {
        Some(path) => {
            m.input("embeddings", path)?;
            m.note("embeddings", "supplied");
            EmbeddingStore::load(path, &ds.catalogue)?
        }
        None => {
            m.note("embeddings", format!("co-occurrence eigenvectors, dim {}", a.embedding_dim));
            cooccurrence_embeddings(&ds, train_cutoff(&examples), a.embedding_dim, a.seed)?
        }
    };
    m.note("min_rating", a.min_rating.map_or("none".to_string(), |r| r.to_string()));
    m.note("min_user_interactions", a.min_user_interactions);
    m.note("interactions", ds.num_interactions());
    m.note("examples", examples.len());
    let prepared = Prepared {
        catalogue: ds.catalogue.clone(),
        records: ds.records(),
        examples,
        popularity: pop,
        embeddings,
    };
    prepared.write(&a.out)?;
    m.write(&a.out)
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_users: a.n_users,
        n_items: a.n_items,
        rho: a.rho,
        zipf_s: a.zipf,
        n_clusters: a.clusters,
        cluster_affinity: a.cluster_affinity,
        min_len: a.min_len,
        max_len: a.max_len,
        emb_dim: a.emb_dim,
        seed: a.seed,
    };
    let data = synthetic::generate(&spec)?;
    data.write(&a.out)?;
    let mut m = Manifest::new("synth");
    m.note("seed", a.seed);
    m.note("spec", format!("{spec:?}"));
    m.write(&a.out)
}

pub fn train_sft(a: TrainSftArgs) -> Result<()> {
    let mut m = Manifest::new("train-sft");
    let data = load_data(&a.data, &mut m)?;
    let c = run_config(Stage::Sft, &a.run, &[], &mut m)?;
    let train = data.split(Split::Train);
    let out = trainer::train_sft(&c, data.catalogue.len(), &train)?;
    write_run(&a.run_dir, &c, &out, "sft.ckpt", &data)?;
    m.note("seed", c.seed);
    m.write(&a.run_dir)
}

pub fn train_oracle(a: TrainOracleArgs) -> Result<()> {
    let mut m = Manifest::new("train-oracle");
    m.note("seed", a.seed);
    let data = load_data(&a.data, &mut m)?;
    let config = OracleTrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        d: a.d,
    };
    let train = data.split(Split::Train);
    let valid = data.split(Split::Valid);
    let (oracle, log) = fit_oracle(data.catalogue.len(), &train, &valid, &config, a.seed)?;
    let steps = (a.epochs * train.len().div_ceil(a.batch_size.max(1))) as u64;
    let ckpt = Checkpoint::new(oracle.into_model(), CheckpointMeta::new(Stage::Oracle, a.seed, steps));
    ckpt.save(&a.run_dir.join("checkpoints").join("oracle.ckpt"))?;
    let mut csv = String::from("epoch,train_loss,valid_hr10,valid_hr1\n");
    for e in &log {
        csv.push_str(&format!("{},{:.8},{:.6},{:.6}\n", e.epoch, e.train_loss, e.valid_hr10, e.valid_hr1));
    }
    write(&a.run_dir.join("metrics.csv"), &csv)?;
    m.write(&a.run_dir)
}

pub fn build_prefs(a: BuildPrefsArgs) -> Result<()> {
    let choice: StrategyChoice = match a.strategy.parse() {
        Ok(c) => c,
        Err(e) => crate::usage_error(&e.to_string()),
    };
    if choice.needs_sft() && a.sft_ckpt.is_none() {
        crate::usage_error(&format!("--strategy {} requires --sft-ckpt", a.strategy));
    }
    let mut m = Manifest::new("build-prefs");
    m.note("seed", a.seed);
    let data = load_data(&a.data, &mut m)?;
    let sft = match &a.sft_ckpt {
        Some(p) if choice.needs_sft() => Some(load_checkpoint(p, Stage::Sft, "sft", &mut m)?),
        _ => None,
    };
    let oracle = match &a.oracle_ckpt {
        Some(p) => Some(OracleModel::new(load_checkpoint(p, Stage::Oracle, "oracle", &mut m)?.model)),
        None => None,
    };
    let split = parse_split(&a.split)?;
    let examples = data.split(split);
    let popular = PopularSampler::new(&data.popularity);
    let ctx = SamplingContext {
        records: &data.records,
        catalogue_len: data.catalogue.len(),
        sft: sft.as_ref().map(|c| &c.model),
        store: Some(&data.embeddings),
        popular: Some(&popular),
    };
    let options = BuildOptions {
        choice,
        extra_negatives: a.extra_negatives,
        seed: a.seed,
    };
    let pairs = build_preferences(&examples, &ctx, oracle.as_ref(), &options)?;
    for p in &pairs {
        if let Some(e) = p.epsilon {
            ensure!(e > 0.0 && e < 1.0, "example {}: flip rate {e} outside (0, 1)", p.example.id);
        }
    }
    persist::write_preferences(&a.out.join("prefs.tsv"), &data.catalogue, &pairs)?;
    m.note("strategy", &a.strategy);
    m.note("split", split.as_str());
    m.note("pairs", pairs.len());
    m.write(&a.out)
}

pub fn inject_flips(a: InjectFlipsArgs) -> Result<()> {
    let mut m = Manifest::new("inject-flips");
    m.note("seed", a.seed);
    let data = load_data(&a.data, &mut m)?;
    m.input("prefs", &a.prefs)?;
    let pairs = persist::read_preferences(&a.prefs, &data.catalogue, &data.examples)?;
    let (noisy, mask) = synthetic::inject_flips(&pairs, a.flip_prob, a.seed, a.write_epsilon)?;
    persist::write_preferences(&a.out.join("prefs.tsv"), &data.catalogue, &noisy)?;
    let mut text = String::from("example_id\tflipped\n");
    for (p, &f) in pairs.iter().zip(&mask) {
        text.push_str(&format!("{}\t{}\n", p.example.id, u8::from(f)));
    }
    write(&a.out.join("flip_mask.tsv"), &text)?;
    m.note("flip_prob", a.flip_prob);
    m.note("flipped", mask.iter().filter(|&&f| f).count());
    m.write(&a.out)
}

/// The strategy tag shared by every pair, or `mixed`.
fn strategy_label(pairs: &[PreferencePair]) -> String {
    match pairs.first() {
        Some(p) if pairs.iter().all(|q| q.strategy == p.strategy) => p.strategy.as_str().to_string(),
        Some(_) => "mixed".to_string(),
        None => "none".to_string(),
    }
}

pub fn train_po(a: TrainPoArgs) -> Result<()> {
    let mut m = Manifest::new("train-po");
    let data = load_data(&a.data, &mut m)?;
    let extra = [
        ("objective", a.objective.clone()),
        ("beta", a.beta.map(|b| b.to_string())),
    ];
    let c = run_config(Stage::Po, &a.run, &extra, &mut m)?;
    let sft = load_checkpoint(&a.sft_ckpt, Stage::Sft, "sft", &mut m)?;
    m.input("prefs", &a.prefs)?;
    let pairs = persist::read_preferences(&a.prefs, &data.catalogue, &data.examples)?;
    let out = trainer::train_po(&c, &pairs, &sft)?;
    write_run(&a.run_dir, &c, &out, "po.ckpt", &data)?;
    m.note("seed", c.seed);
    m.note("strategy", strategy_label(&pairs));
    m.write(&a.run_dir)
}

fn evaluate_on(
    model: &PolicyModel,
    data: &Prepared,
    examples: &[SequenceExample],
    modes: &[CandidateSource],
    seed: u64,
) -> Result<eval::EvalReport> {
    let ctx = EvalContext {
        store: Some(&data.embeddings),
        records: Some(&data.records),
        seed,
    };
    let bias = BiasInputs {
        store: Some(&data.embeddings),
        pop: Some(&data.popularity),
    };
    Ok(eval::evaluate(model, examples, modes, &ctx, &bias)?)
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let mut m = Manifest::new("evaluate");
    m.note("seed", a.seed);
    let data = load_data(&a.data, &mut m)?;
    m.input("checkpoint", &a.ckpt)?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let modes: Vec<CandidateSource> = a
        .modes
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<std::result::Result<_, _>>()?;
    let split = parse_split(&a.split)?;
    let examples = data.split(split);
    ensure!(!examples.is_empty(), "{} split is empty", split.as_str());
    let report = evaluate_on(&ckpt.model, &data, &examples, &modes, a.seed)?;
    report.write(&a.out)?;
    m.note("stage", ckpt.meta.stage.as_str());
    m.note("split", split.as_str());
    m.write(&a.out)
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let stage = match a.stage.as_str() {
        "sft" => Stage::Sft,
        "po" => Stage::Po,
        s => bail!("--stage must be sft or po, got `{s}`"),
    };
    let mut m = Manifest::new("sweep");
    let data = load_data(&a.data, &mut m)?;
    let base = run_config(stage, &a.run, &[], &mut m)?;
    let (metric, k) = parse_metric(&a.metric)?;
    let grid: Vec<(String, Vec<String>)> = a
        .grid
        .iter()
        .map(|g| {
            let (k, vs) = g.split_once('=').with_context(|| format!("--grid expects KEY=V1,V2, got `{g}`"))?;
            Ok((k.trim().to_string(), vs.split(',').map(|v| v.trim().to_string()).collect()))
        })
        .collect::<Result<_>>()?;
    let seeds: Vec<u64> = match &a.seeds {
        Some(s) => s
            .split(',')
            .map(|v| v.trim().parse().with_context(|| format!("bad seed `{v}`")))
            .collect::<Result<_>>()?,
        None => vec![],
    };
    let (sft, pairs) = match stage {
        Stage::Po => {
            let (Some(ckpt), Some(prefs)) = (&a.sft_ckpt, &a.prefs) else {
                crate::usage_error("a po sweep requires --sft-ckpt and --prefs");
            };
            let sft = load_checkpoint(ckpt, Stage::Sft, "sft", &mut m)?;
            m.input("prefs", prefs)?;
            let pairs = persist::read_preferences(prefs, &data.catalogue, &data.examples)?;
            (Some(sft), pairs)
        }
        _ => (None, Vec::new()),
    };
    let train = data.split(Split::Train);
    let valid = data.split(Split::Valid);
    ensure!(!valid.is_empty(), "validation split is empty");
    let (best, report) = trainer::sweep(&base, &grid, &seeds, &a.metric, |cfg| {
        let model = match &sft {
            Some(s) => trainer::train_po(cfg, &pairs, s)?.checkpoint.model,
            None => trainer::train_sft(cfg, data.catalogue.len(), &train)?.checkpoint.model,
        };
        let table = validation_table(&model, &data, cfg.seed)?;
        table
            .get(metric, k)
            .ok_or_else(|| rosepo::Error::Config(format!("metric {} missing", a.metric)))
    })?;
    write(&a.run_dir.join("sweep.csv"), &report.to_csv())?;
    write(&a.run_dir.join("best_config.txt"), &best.to_kv_string())?;
    m.note("seed", base.seed);
    m.note("metric", &a.metric);
    m.note("best", &report.means[report.best].0);
    m.write(&a.run_dir)
}
