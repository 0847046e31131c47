//! On-disk formats shared by the command-line stages.
//!
//! A prepared directory holds `items.tsv`, `records.tsv` (each user's full
//! interaction set), `examples.tsv`, `popularity.tsv` and `embeddings.tsv`.
//! Item lists inside a TSV field are space separated.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dataset::{Catalogue, ItemIdx, PopularityTable, SequenceExample, Split, UserRecords};
use crate::embeddings::EmbeddingStore;
use crate::error::{Error, Result};
use crate::prefdata::{PreferencePair, Strategy};

pub const EXAMPLES_HEADER: &str = "id\tuser_id\tsplit\thistory\ttarget\tcandidates\tlabel_ts";
pub const PREFS_HEADER: &str =
    "example_id\thistory\tcandidates\tchosen\trejected\tepsilon\tstrategy\textra_negatives";

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn join_ids(cat: &Catalogue, items: &[ItemIdx]) -> String {
    items.iter().map(|&i| cat.id(i)).collect::<Vec<_>>().join(" ")
}

fn parse_ids(cat: &Catalogue, field: &str, name: &str, line: usize) -> Result<Vec<ItemIdx>> {
    field
        .split_whitespace()
        .map(|id| cat.get(id).ok_or_else(|| Error::parse(name, line, format!("unknown item `{id}`"))))
        .collect()
}

fn parse_num<T: std::str::FromStr>(field: &str, what: &str, name: &str, line: usize) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::parse(name, line, format!("bad {what} `{field}`")))
}

/// Rows of a headed TSV, as `(line number, fields)`.
fn rows<'a>(text: &'a str, header: &str, name: &str) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == header => {}
        _ => return Err(Error::parse(name, 1, format!("expected header `{header}`"))),
    }
    let width = header.split('\t').count();
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != width {
                return Err(Error::parse(name, i + 2, format!("expected {width} fields, found {}", f.len())));
            }
            Ok((i + 2, f))
        })
        .collect()
}

pub fn write_catalogue(path: &Path, cat: &Catalogue) -> Result<()> {
    let mut s = String::from("item_id\ttitle\n");
    for i in 0..cat.len() as ItemIdx {
        let _ = writeln!(s, "{}\t{}", cat.id(i), cat.title(i));
    }
    write(path, &s)
}

pub fn write_records(path: &Path, cat: &Catalogue, records: &UserRecords) -> Result<()> {
    let mut s = String::from("user_id\titems\n");
    for u in 0..records.len() as u32 {
        let _ = writeln!(s, "{}\t{}", records.user_id(u), join_ids(cat, records.items(u)));
    }
    write(path, &s)
}

pub fn read_records(path: &Path, cat: &Catalogue) -> Result<UserRecords> {
    let text = read(path)?;
    let name = path.display().to_string();
    let rows = rows(&text, "user_id\titems", &name)?;
    let mut out = Vec::with_capacity(rows.len());
    for (line, f) in rows {
        out.push((f[0].to_string(), parse_ids(cat, f[1], &name, line)?));
    }
    Ok(UserRecords::new(out))
}

pub fn examples_tsv(cat: &Catalogue, records: &UserRecords, examples: &[SequenceExample]) -> String {
    let mut s = format!("{EXAMPLES_HEADER}\n");
    for e in examples {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            e.id,
            records.user_id(e.user),
            e.split.as_str(),
            join_ids(cat, &e.history),
            cat.id(e.target),
            join_ids(cat, &e.candidates),
            e.label_ts
        );
    }
    s
}

pub fn read_examples(path: &Path, cat: &Catalogue, records: &UserRecords) -> Result<Vec<SequenceExample>> {
    let text = read(path)?;
    let name = path.display().to_string();
    rows(&text, EXAMPLES_HEADER, &name)?
        .into_iter()
        .map(|(line, f)| {
            let user = records
                .lookup(f[1])
                .ok_or_else(|| Error::parse(&name, line, format!("unknown user `{}`", f[1])))?;
            let split = Split::parse(f[2]).ok_or_else(|| Error::parse(&name, line, format!("bad split `{}`", f[2])))?;
            let target = cat
                .get(f[4])
                .ok_or_else(|| Error::parse(&name, line, format!("unknown item `{}`", f[4])))?;
            Ok(SequenceExample {
                id: parse_num(f[0], "id", &name, line)?,
                user,
                history: parse_ids(cat, f[3], &name, line)?,
                target,
                candidates: parse_ids(cat, f[5], &name, line)?,
                split,
                label_ts: parse_num(f[6], "timestamp", &name, line)?,
            })
        })
        .collect()
}

pub fn write_popularity(path: &Path, cat: &Catalogue, pop: &PopularityTable) -> Result<()> {
    let mut s = String::from("item_id\tcount\tlog_pop\n");
    for i in 0..cat.len() as ItemIdx {
        let _ = writeln!(s, "{}\t{}\t{:.6}", cat.id(i), pop.count(i), pop.log_pop(i));
    }
    write(path, &s)
}

/// Reads counts; log popularity is recomputed from them.
pub fn read_popularity(path: &Path, cat: &Catalogue) -> Result<PopularityTable> {
    let text = read(path)?;
    let name = path.display().to_string();
    let mut counts = vec![0u64; cat.len()];
    for (line, f) in rows(&text, "item_id\tcount\tlog_pop", &name)? {
        let item = cat
            .get(f[0])
            .ok_or_else(|| Error::parse(&name, line, format!("unknown item `{}`", f[0])))?;
        counts[item as usize] = parse_num(f[1], "count", &name, line)?;
    }
    Ok(PopularityTable::from_counts(counts))
}

/// Everything `prepare` produces.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub catalogue: Catalogue,
    pub records: UserRecords,
    pub examples: Vec<SequenceExample>,
    pub popularity: PopularityTable,
    pub embeddings: EmbeddingStore,
}

impl Prepared {
    pub const FILES: [&'static str; 5] = [
        "items.tsv",
        "records.tsv",
        "examples.tsv",
        "popularity.tsv",
        "embeddings.tsv",
    ];

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cat = &self.catalogue;
        write_catalogue(&dir.join("items.tsv"), cat)?;
        write_records(&dir.join("records.tsv"), cat, &self.records)?;
        write(&dir.join("examples.tsv"), &examples_tsv(cat, &self.records, &self.examples))?;
        write_popularity(&dir.join("popularity.tsv"), cat, &self.popularity)?;
        self.embeddings.write(&dir.join("embeddings.tsv"), cat)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let catalogue = Catalogue::load(&dir.join("items.tsv"))?;
        let records = read_records(&dir.join("records.tsv"), &catalogue)?;
        let examples = read_examples(&dir.join("examples.tsv"), &catalogue, &records)?;
        let popularity = read_popularity(&dir.join("popularity.tsv"), &catalogue)?;
        let embeddings = EmbeddingStore::load(&dir.join("embeddings.tsv"), &catalogue)?;
        Ok(Prepared {
            catalogue,
            records,
            examples,
            popularity,
            embeddings,
        })
    }

    pub fn split(&self, split: Split) -> Vec<SequenceExample> {
        self.examples.iter().filter(|e| e.split == split).cloned().collect()
    }
}

fn format_epsilon(eps: Option<f64>) -> String {
    match eps {
        Some(e) => format!("{e:.6}"),
        None => "-".to_string(),
    }
}

pub fn preferences_tsv(cat: &Catalogue, pairs: &[PreferencePair]) -> String {
    let mut s = format!("{PREFS_HEADER}\n");
    for p in pairs {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            p.example.id,
            join_ids(cat, &p.example.history),
            join_ids(cat, &p.example.candidates),
            cat.id(p.chosen),
            cat.id(p.rejected),
            format_epsilon(p.epsilon),
            p.strategy.as_str(),
            join_ids(cat, &p.extra_negatives)
        );
    }
    s
}

pub fn write_preferences(path: &Path, cat: &Catalogue, pairs: &[PreferencePair]) -> Result<()> {
    write(path, &preferences_tsv(cat, pairs))
}

/// Reads a preference file, joining each row with its example by id. The
/// history and candidates stored in the file take precedence, since
/// building pairs may amend the candidate list.
pub fn read_preferences(path: &Path, cat: &Catalogue, examples: &[SequenceExample]) -> Result<Vec<PreferencePair>> {
    let text = read(path)?;
    let name = path.display().to_string();
    let by_id: HashMap<usize, &SequenceExample> = examples.iter().map(|e| (e.id, e)).collect();
    rows(&text, PREFS_HEADER, &name)?
        .into_iter()
        .map(|(line, f)| {
            let id: usize = parse_num(f[0], "example id", &name, line)?;
            let base = by_id
                .get(&id)
                .ok_or_else(|| Error::parse(&name, line, format!("unknown example {id}")))?;
            let item = |field: &str| {
                cat.get(field)
                    .ok_or_else(|| Error::parse(&name, line, format!("unknown item `{field}`")))
            };
            let epsilon = match f[5] {
                "-" => None,
                v => {
                    let e: f64 = parse_num(v, "epsilon", &name, line)?;
                    if !(e > 0.0 && e < 1.0) {
                        return Err(Error::parse(&name, line, format!("epsilon {v} outside (0, 1)")));
                    }
                    Some(e)
                }
            };
            let mut example = (*base).clone();
            example.history = parse_ids(cat, f[1], &name, line)?;
            example.candidates = parse_ids(cat, f[2], &name, line)?;
            let pair = PreferencePair {
                example,
                chosen: item(f[3])?,
                rejected: item(f[4])?,
                epsilon,
                strategy: f[6].parse::<Strategy>().map_err(|e| Error::parse(&name, line, e.to_string()))?,
                extra_negatives: parse_ids(cat, f[7], &name, line)?,
            };
            Ok(pair)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{popularity, prepare_examples};
    use crate::synthetic::{generate, SyntheticSpec};

    fn prepared() -> Prepared {
        let spec = SyntheticSpec {
            n_users: 60,
            n_items: 80,
            n_clusters: 4,
            emb_dim: 8,
            seed: 5,
            ..SyntheticSpec::default()
        };
        let data = generate(&spec).unwrap();
        let ds = data.dataset().unwrap();
        let examples = prepare_examples(&ds, 11, 3).unwrap();
        Prepared {
            popularity: popularity(&ds, &examples),
            records: ds.records(),
            catalogue: ds.catalogue.clone(),
            examples,
            embeddings: data.embeddings,
        }
    }

    #[test]
    fn prepared_round_trip() {
        let p = prepared();
        let dir = tempfile::tempdir().unwrap();
        p.write(dir.path()).unwrap();
        let q = Prepared::load(dir.path()).unwrap();
        assert_eq!(q.catalogue, p.catalogue);
        assert_eq!(q.records, p.records);
        assert_eq!(q.examples, p.examples);
        assert_eq!(q.popularity, p.popularity);
        let again = tempfile::tempdir().unwrap();
        q.write(again.path()).unwrap();
        for f in Prepared::FILES {
            assert_eq!(
                fs::read(dir.path().join(f)).unwrap(),
                fs::read(again.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn preferences_round_trip_and_errors() {
        let p = prepared();
        let pairs: Vec<PreferencePair> = p
            .examples
            .iter()
            .take(5)
            .enumerate()
            .map(|(i, e)| PreferencePair {
                example: e.clone(),
                chosen: e.target,
                rejected: e.candidates.iter().copied().find(|&c| c != e.target).unwrap(),
                epsilon: if i % 2 == 0 { Some(0.125) } else { None },
                strategy: Strategy::ALL[i % 4],
                extra_negatives: if i == 0 { vec![] } else { vec![e.candidates[0]] },
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prefs.tsv");
        write_preferences(&path, &p.catalogue, &pairs).unwrap();
        assert_eq!(read_preferences(&path, &p.catalogue, &p.examples).unwrap(), pairs);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.lines().nth(1).unwrap().contains("\t0.125000\t"));

        let broken = text.replacen("0.125000", "1.5", 1);
        fs::write(&path, broken).unwrap();
        let e = read_preferences(&path, &p.catalogue, &p.examples).unwrap_err();
        assert!(e.to_string().ends_with(":2: epsilon 1.5 outside (0, 1)"), "{e}");
    }
}
