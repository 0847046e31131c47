//! Merges evaluated runs. A run directory holds its evaluation outputs either
//! directly or under `eval/`; `config.txt` and `manifest.txt`, when present,
//! supply the labels used for grouping.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rosepo::config::read_kv;
use rosepo::eval::{Metric, MetricTable};

use crate::manifest::Manifest;
use crate::ReportArgs;

const COLUMNS: [&str; 6] = ["hr1", "hr5", "ndcg5", "ndcg10", "semantic_bias", "popularity_bias"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub run: String,
    pub stage: String,
    pub objective: String,
    pub strategy: String,
    pub data_fraction: f64,
    pub seed: String,
    /// In `COLUMNS` order; `None` where the run lacks the measurement.
    pub values: [Option<f64>; 6],
}

fn lookup(pairs: &[(String, String)], key: &str) -> Option<String> {
    pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone())
}

fn mean_column(bias_csv: &str, col: usize) -> Option<f64> {
    let vals: Vec<f64> = bias_csv
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(col).and_then(|v| v.parse().ok()))
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Reads one run, or explains why it cannot be used.
pub fn read_run(dir: &Path) -> std::result::Result<RunRow, String> {
    let eval_dir = [dir.to_path_buf(), dir.join("eval")]
        .into_iter()
        .find(|d| d.join("metrics_given.csv").is_file())
        .ok_or_else(|| "no metrics_given.csv".to_string())?;
    let text = fs::read_to_string(eval_dir.join("metrics_given.csv")).map_err(|e| e.to_string())?;
    let table = MetricTable::parse_csv(&text).map_err(|e| e.to_string())?;
    let bias = fs::read_to_string(eval_dir.join("bias.csv")).unwrap_or_default();
    let config = read_kv(&dir.join("config.txt")).unwrap_or_default();
    let manifest = read_kv(&dir.join("manifest.txt")).unwrap_or_default();
    let stage = lookup(&config, "stage").unwrap_or_else(|| "-".into());
    let objective = if stage == "sft" {
        "sft".to_string()
    } else {
        lookup(&config, "objective").unwrap_or_else(|| "-".into())
    };
    Ok(RunRow {
        run: dir.display().to_string(),
        objective,
        strategy: lookup(&manifest, "strategy").unwrap_or_else(|| "-".into()),
        data_fraction: lookup(&config, "data_fraction").and_then(|v| v.parse().ok()).unwrap_or(1.0),
        seed: lookup(&config, "seed").unwrap_or_else(|| "-".into()),
        stage,
        values: [
            table.get(Metric::Hr, 1),
            table.get(Metric::Hr, 5),
            table.get(Metric::Ndcg, 5),
            table.get(Metric::Ndcg, 10),
            mean_column(&bias, 1),
            mean_column(&bias, 2),
        ],
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn runs_csv(rows: &[RunRow]) -> String {
    let mut s = format!("run,stage,objective,strategy,data_fraction,seed,{}\n", COLUMNS.join(","));
    for r in rows {
        let vals: Vec<String> = r.values.iter().map(|&v| cell(v)).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.run,
            r.stage,
            r.objective,
            r.strategy,
            r.data_fraction,
            r.seed,
            vals.join(",")
        );
    }
    s
}

/// One row per group with `n` and mean/std columns per measurement.
pub fn grouped_csv<K: Ord + ToString>(rows: &[RunRow], key: impl Fn(&RunRow) -> K) -> String {
    let mut groups: BTreeMap<K, Vec<&RunRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(key(r)).or_default().push(r);
    }
    let head: Vec<String> = COLUMNS.iter().map(|c| format!("{c}_mean,{c}_std")).collect();
    let mut s = format!("group,n,{}\n", head.join(","));
    for (k, members) in groups {
        let mut cols = Vec::with_capacity(COLUMNS.len());
        for c in 0..COLUMNS.len() {
            let vals: Vec<f64> = members.iter().filter_map(|r| r.values[c]).collect();
            if vals.is_empty() {
                cols.push(",".to_string());
            } else {
                let (m, sd) = mean_std(&vals);
                cols.push(format!("{m:.6},{sd:.6}"));
            }
        }
        let _ = writeln!(s, "{},{},{}", k.to_string(), members.len(), cols.join(","));
    }
    s
}

/// Orders data fractions numerically while printing them as given.
#[derive(PartialEq)]
struct Fraction(f64);

impl Eq for Fraction {}

impl PartialOrd for Fraction {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Fraction {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl std::fmt::Display for Fraction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub fn run(a: ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    let mut skipped: Vec<(PathBuf, String)> = Vec::new();
    for dir in &a.run_dirs {
        match read_run(dir) {
            Ok(r) => rows.push(r),
            Err(why) => skipped.push((dir.clone(), why)),
        }
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let put = |name: &str, text: String| {
        let p = a.out.join(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    };
    put("runs.csv", runs_csv(&rows))?;
    let by_objective = grouped_csv(&rows, |r| r.objective.clone());
    let by_strategy = grouped_csv(&rows, |r| format!("{}/{}", r.objective, r.strategy));
    let by_fraction = grouped_csv(&rows, |r| Fraction(r.data_fraction));
    put("by_objective.csv", by_objective.clone())?;
    put("by_strategy.csv", by_strategy.clone())?;
    put("by_fraction.csv", by_fraction)?;

    let mut summary = format!("{} runs merged, {} skipped\n", rows.len(), skipped.len());
    for (dir, why) in &skipped {
        let _ = writeln!(summary, "  skipped {}: {why}", dir.display());
    }
    let _ = writeln!(summary, "\nby objective and strategy (mean over runs)");
    let _ = writeln!(
        summary,
        "{:<28}{:>4}{:>10}{:>10}{:>10}{:>10}{:>11}{:>11}",
        "group", "n", "HR@1", "HR@5", "N@5", "N@10", "Sem. Bias", "Pop. Bias"
    );
    for line in by_strategy.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let means: Vec<String> = (0..COLUMNS.len())
            .map(|c| match f[2 + 2 * c] {
                "" => "-".to_string(),
                v => v.parse::<f64>().map(|x| format!("{x:.4}")).unwrap_or_default(),
            })
            .collect();
        let _ = writeln!(
            summary,
            "{:<28}{:>4}{:>10}{:>10}{:>10}{:>10}{:>11}{:>11}",
            f[0], f[1], means[0], means[1], means[2], means[3], means[4], means[5]
        );
    }
    put("summary.txt", summary)?;
    if rows.is_empty() {
        eprintln!("warning: no run directory contained metrics");
    }
    let mut m = Manifest::new("report");
    m.note("runs", rows.len());
    m.note("skipped", skipped.len());
    m.write(&a.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_sample_std() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(m, 3.0);
        assert!((s - 2.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn fractions_sort_numerically() {
        let row = |f: f64| RunRow {
            run: format!("r{f}"),
            stage: "po".into(),
            objective: "rosepo".into(),
            strategy: "self-hard".into(),
            data_fraction: f,
            seed: "1".into(),
            values: [Some(f), None, None, None, None, None],
        };
        let rows: Vec<RunRow> = [1.0, 0.2, 0.6].into_iter().map(row).collect();
        let csv = grouped_csv(&rows, |r| Fraction(r.data_fraction));
        let groups: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(groups, ["0.2", "0.6", "1"]);
        assert!(csv.lines().nth(1).unwrap().starts_with("0.2,1,0.200000,0.000000,,"));
    }
}
