//! Interaction ingestion, windowing, temporal splitting and candidate sets.
//!
//! Item ids are opaque strings on disk. Internally every item is a dense
//! [`ItemIdx`] into a [`Catalogue`] sorted by id, so "smallest item id"
//! tie-breaks reduce to "smallest index".

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;
use crate::{HISTORY_LEN, NUM_CANDIDATES};

pub type ItemIdx = u32;

/// The item universe, sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalogue {
    ids: Vec<String>,
    titles: Vec<String>,
    index: HashMap<String, ItemIdx>,
}

impl Catalogue {
    pub fn new(mut items: Vec<(String, String)>) -> Result<Self> {
        items.sort_by(|a, b| a.0.cmp(&b.0));
        let mut index = HashMap::with_capacity(items.len());
        for (i, (id, _)) in items.iter().enumerate() {
            if index.insert(id.clone(), i as ItemIdx).is_some() {
                return Err(Error::Config(format!("duplicate item id `{id}`")));
            }
        }
        let (ids, titles) = items.into_iter().unzip();
        Ok(Catalogue { ids, titles, index })
    }

    /// Reads an items TSV (`item_id<TAB>title`); a leading header row is optional.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path.display().to_string();
        let mut items = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() || (lineno == 0 && line.starts_with("item_id\t")) {
                continue;
            }
            let (id, title) = match line.split_once('\t') {
                Some((id, title)) => (id, title),
                None => (line, ""),
            };
            if id.is_empty() {
                return Err(Error::parse(&name, lineno + 1, "empty item id"));
            }
            items.push((id.to_string(), title.to_string()));
        }
        Catalogue::new(items)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, item: ItemIdx) -> &str {
        &self.ids[item as usize]
    }

    pub fn title(&self, item: ItemIdx) -> &str {
        &self.titles[item as usize]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<ItemIdx> {
        self.index.get(id).copied()
    }

    pub fn lookup(&self, id: &str) -> Result<ItemIdx> {
        self.get(id).ok_or_else(|| Error::UnknownItem(id.to_string()))
    }
}

/// One timestamped user–item event.
#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub user_id: String,
    pub item: ItemIdx,
    pub rating: i64,
    pub timestamp: i64,
}

/// A user's chronological, de-duplicated event list.
#[derive(Debug, Clone, PartialEq)]
pub struct UserSequence {
    pub user_id: String,
    pub events: Vec<(ItemIdx, i64)>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub catalogue: Catalogue,
    /// Sorted by user id.
    pub users: Vec<UserSequence>,
}

impl Dataset {
    /// Groups interactions per user and orders each list by timestamp, ties by
    /// input order. A user touching the same item twice keeps only the first
    /// occurrence so that a target can never reappear in its own history.
    pub fn from_interactions(catalogue: Catalogue, interactions: Vec<Interaction>) -> Result<Self> {
        let mut per_user: BTreeMap<String, Vec<(ItemIdx, i64)>> = BTreeMap::new();
        let mut seen = HashSet::new();
        for it in interactions {
            if it.timestamp < 0 {
                return Err(Error::Config(format!(
                    "negative timestamp for user `{}`",
                    it.user_id
                )));
            }
            if !seen.insert((it.user_id.clone(), it.item, it.timestamp)) {
                return Err(Error::Config(format!(
                    "duplicate interaction ({}, {}, {})",
                    it.user_id,
                    catalogue.id(it.item),
                    it.timestamp
                )));
            }
            per_user.entry(it.user_id).or_default().push((it.item, it.timestamp));
        }
        let users = per_user
            .into_iter()
            .map(|(user_id, mut events)| {
                events.sort_by_key(|&(_, ts)| ts);
                let mut touched = HashSet::new();
                events.retain(|&(item, _)| touched.insert(item));
                UserSequence { user_id, events }
            })
            .collect();
        Ok(Dataset { catalogue, users })
    }

    pub fn num_interactions(&self) -> usize {
        self.users.iter().map(|u| u.events.len()).sum()
    }

    pub fn records(&self) -> UserRecords {
        UserRecords::new(
            self.users
                .iter()
                .map(|u| (u.user_id.clone(), u.events.iter().map(|&(i, _)| i).collect()))
                .collect(),
        )
    }
}

/// Reads an interactions TSV and an items TSV and drops rows rated below
/// `min_rating`.
pub fn ingest(interactions_file: &Path, items_file: &Path, min_rating: Option<i64>) -> Result<Dataset> {
    let catalogue = Catalogue::load(items_file)?;
    let text = fs::read_to_string(interactions_file).map_err(|e| Error::io(interactions_file, e))?;
    let interactions = parse_interactions(&text, &interactions_file.display().to_string(), &catalogue)?;
    let kept = interactions
        .into_iter()
        .filter(|it| min_rating.is_none_or(|m| it.rating >= m))
        .collect();
    Dataset::from_interactions(catalogue, kept)
}

const INTERACTIONS_HEADER: [&str; 4] = ["user_id", "item_id", "rating", "timestamp"];

pub fn parse_interactions(text: &str, name: &str, catalogue: &Catalogue) -> Result<Vec<Interaction>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        // An empty file is an empty dataset.
        None => return Ok(Vec::new()),
        Some((_, header)) => {
            let cols: Vec<&str> = header.trim_end_matches('\r').split('\t').collect();
            if cols != INTERACTIONS_HEADER {
                return Err(Error::parse(
                    name,
                    1,
                    format!("expected header `{}`", INTERACTIONS_HEADER.join("\\t")),
                ));
            }
        }
    }
    let mut out = Vec::new();
    for (lineno, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::parse(
                name,
                lineno + 1,
                format!("expected 4 tab-separated columns, found {}", cols.len()),
            ));
        }
        let rating = cols[2]
            .parse::<i64>()
            .map_err(|_| Error::parse(name, lineno + 1, format!("bad rating `{}`", cols[2])))?;
        let timestamp = cols[3]
            .parse::<i64>()
            .map_err(|_| Error::parse(name, lineno + 1, format!("bad timestamp `{}`", cols[3])))?;
        if timestamp < 0 {
            return Err(Error::parse(name, lineno + 1, "negative timestamp"));
        }
        let item = catalogue
            .get(cols[1])
            .ok_or_else(|| Error::parse(name, lineno + 1, format!("unknown item id `{}`", cols[1])))?;
        out.push(Interaction {
            user_id: cols[0].to_string(),
            item,
            rating,
            timestamp,
        });
    }
    Ok(out)
}

/// Every item each user ever touched, the "interacted" set that candidate
/// sampling must avoid.
#[derive(Debug, Clone, PartialEq)]
pub struct UserRecords {
    ids: Vec<String>,
    items: Vec<Vec<ItemIdx>>,
    index: HashMap<String, u32>,
}

impl UserRecords {
    pub fn new(records: Vec<(String, Vec<ItemIdx>)>) -> Self {
        let mut ids = Vec::with_capacity(records.len());
        let mut items = Vec::with_capacity(records.len());
        let mut index = HashMap::with_capacity(records.len());
        for (i, (id, mut set)) in records.into_iter().enumerate() {
            set.sort_unstable();
            set.dedup();
            index.insert(id.clone(), i as u32);
            ids.push(id);
            items.push(set);
        }
        UserRecords { ids, items, index }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn user_id(&self, user: u32) -> &str {
        &self.ids[user as usize]
    }

    pub fn lookup(&self, user_id: &str) -> Option<u32> {
        self.index.get(user_id).copied()
    }

    /// Sorted item set of `user`.
    pub fn items(&self, user: u32) -> &[ItemIdx] {
        &self.items[user as usize]
    }

    pub fn contains(&self, user: u32, item: ItemIdx) -> bool {
        self.items[user as usize].binary_search(&item).is_ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// A fixed-length history, its next item, and the candidate set it is
/// ranked against.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceExample {
    pub id: usize,
    /// Index into [`UserRecords`].
    pub user: u32,
    pub history: Vec<ItemIdx>,
    pub target: ItemIdx,
    pub candidates: Vec<ItemIdx>,
    pub split: Split,
    pub label_ts: i64,
}

/// Cuts every user's chronological list into length-11 windows and splits
/// the windows 8:1:1 by label timestamp. Candidates are left empty.
pub fn window_and_split(dataset: &Dataset, min_user_interactions: usize) -> Vec<SequenceExample> {
    let min_len = min_user_interactions.max(HISTORY_LEN + 1);
    let mut windows = Vec::new();
    for (user, seq) in dataset.users.iter().enumerate() {
        if seq.events.len() < min_len {
            continue;
        }
        for w in seq.events.windows(HISTORY_LEN + 1) {
            let (target, label_ts) = w[HISTORY_LEN];
            windows.push(SequenceExample {
                id: 0,
                user: user as u32,
                history: w[..HISTORY_LEN].iter().map(|&(i, _)| i).collect(),
                target,
                candidates: Vec::new(),
                split: Split::Train,
                label_ts,
            });
        }
    }
    // Stable: equal timestamps keep user order, then window order.
    windows.sort_by_key(|e| e.label_ts);

    let n = windows.len();
    let train_end = extend_ties(&windows, n * 8 / 10);
    let valid_end = extend_ties(&windows, (n * 9 / 10).max(train_end));
    for (i, ex) in windows.iter_mut().enumerate() {
        ex.id = i;
        ex.split = if i < train_end {
            Split::Train
        } else if i < valid_end {
            Split::Valid
        } else {
            Split::Test
        };
    }
    windows
}

// Windows sharing the boundary timestamp move to the earlier split.
fn extend_ties(sorted: &[SequenceExample], mut end: usize) -> usize {
    if end == 0 {
        return 0;
    }
    let boundary = sorted[end - 1].label_ts;
    while end < sorted.len() && sorted[end].label_ts == boundary {
        end += 1;
    }
    end
}

/// Draws `NUM_CANDIDATES - 1` distractors uniformly without replacement from
/// the items the user never touched, adds the target and shuffles.
pub fn sample_candidates(
    example: &SequenceExample,
    user_record: &[ItemIdx],
    catalogue_len: usize,
    seed: u64,
) -> Result<SequenceExample> {
    let needed = NUM_CANDIDATES - 1;
    let mut rng = rng::rng(seed);
    let distractors = sample_unseen(&mut rng, user_record, catalogue_len, needed)?;
    let mut candidates = Vec::with_capacity(NUM_CANDIDATES);
    candidates.push(example.target);
    candidates.extend(distractors);
    candidates.shuffle(&mut rng);
    Ok(SequenceExample {
        candidates,
        ..example.clone()
    })
}

/// Uniform sample of `k` distinct items outside `excluded` (sorted).
pub(crate) fn sample_unseen(
    rng: &mut rng::Rng,
    excluded: &[ItemIdx],
    catalogue_len: usize,
    k: usize,
) -> Result<Vec<ItemIdx>> {
    let available = catalogue_len.saturating_sub(excluded.len());
    if available < k {
        return Err(Error::CatalogueTooSmall { needed: k, available });
    }
    if available < 4 * k {
        // Dense case: enumerate the feasible set explicitly.
        let feasible: Vec<ItemIdx> = (0..catalogue_len as ItemIdx)
            .filter(|i| excluded.binary_search(i).is_err())
            .collect();
        return Ok(rand::seq::index::sample(rng, feasible.len(), k)
            .into_iter()
            .map(|j| feasible[j])
            .collect());
    }
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let item = rng.random_range(0..catalogue_len) as ItemIdx;
        if excluded.binary_search(&item).is_err() && !out.contains(&item) {
            out.push(item);
        }
    }
    Ok(out)
}

/// Windowing, splitting and candidate sampling in one pass. Example `i`
/// draws its candidates from the stream `(seed, "candidates", i)`.
pub fn prepare_examples(
    dataset: &Dataset,
    min_user_interactions: usize,
    seed: u64,
) -> Result<Vec<SequenceExample>> {
    let records = dataset.records();
    window_and_split(dataset, min_user_interactions)
        .iter()
        .map(|ex| {
            sample_candidates(
                ex,
                records.items(ex.user),
                dataset.catalogue.len(),
                rng::derive(seed, "candidates", ex.id as u64),
            )
        })
        .collect()
}

/// Train-split interaction counts and their log popularity.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityTable {
    pub counts: Vec<u64>,
    pub log_pop: Vec<f64>,
}

impl PopularityTable {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let log_pop = counts.iter().map(|&c| log_pop(c)).collect();
        PopularityTable { counts, log_pop }
    }

    pub fn count(&self, item: ItemIdx) -> u64 {
        self.counts[item as usize]
    }

    pub fn log_pop(&self, item: ItemIdx) -> f64 {
        self.log_pop[item as usize]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// `ln(1 + count)`, zero for cold items.
pub fn log_pop(count: u64) -> f64 {
    (count as f64).ln_1p()
}

/// The last label timestamp of the training split, if any.
pub fn train_cutoff(examples: &[SequenceExample]) -> Option<i64> {
    examples
        .iter()
        .filter(|e| e.split == Split::Train)
        .map(|e| e.label_ts)
        .max()
}

/// Counts every interaction at or before the training cutoff.
pub fn popularity(dataset: &Dataset, examples: &[SequenceExample]) -> PopularityTable {
    let mut counts = vec![0u64; dataset.catalogue.len()];
    if let Some(cutoff) = train_cutoff(examples) {
        for user in &dataset.users {
            for &(item, ts) in &user.events {
                if ts <= cutoff {
                    counts[item as usize] += 1;
                }
            }
        }
    }
    PopularityTable::from_counts(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalogue(n: usize) -> Catalogue {
        Catalogue::new((0..n).map(|i| (format!("i{i:04}"), format!("item {i}"))).collect()).unwrap()
    }

    fn user(id: &str, items: &[u32], t0: i64) -> Vec<Interaction> {
        items
            .iter()
            .enumerate()
            .map(|(k, &item)| Interaction {
                user_id: id.to_string(),
                item,
                rating: 5,
                timestamp: t0 + k as i64,
            })
            .collect()
    }

    #[test]
    fn rating_filter_drops_low_rows() {
        let dir = tempfile::tempdir().unwrap();
        let items = dir.path().join("items.tsv");
        let inter = dir.path().join("inter.tsv");
        fs::write(&items, "item_id\ttitle\na\tA\nb\tB\nc\tC\n").unwrap();
        fs::write(
            &inter,
            "user_id\titem_id\trating\ttimestamp\nu1\ta\t5\t1\nu1\tb\t2\t2\nu1\tc\t3\t3\nu2\ta\t4\t1\nu2\tb\t3\t5\n",
        )
        .unwrap();
        let ds = ingest(&inter, &items, Some(3)).unwrap();
        assert_eq!(ds.num_interactions(), 4);
        let ds = ingest(&inter, &items, None).unwrap();
        assert_eq!(ds.num_interactions(), 5);
    }

    #[test]
    fn empty_interactions_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let items = dir.path().join("items.tsv");
        let inter = dir.path().join("inter.tsv");
        fs::write(&items, "a\tA\n").unwrap();
        fs::write(&inter, "").unwrap();
        let ds = ingest(&inter, &items, Some(3)).unwrap();
        assert_eq!(ds.num_interactions(), 0);
        assert!(ds.users.is_empty());
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let cat = catalogue(3);
        let text = "user_id\titem_id\trating\ttimestamp\nu1\ti0000\t5\t1\nu1\ti0001\tfive\t2\n";
        match parse_interactions(text, "x.tsv", &cat) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let text = "user_id\titem_id\trating\ttimestamp\nu1\tzzz\t5\t1\n";
        let err = parse_interactions(text, "x.tsv", &cat).unwrap_err();
        assert!(err.to_string().contains("unknown item id `zzz`"), "{err}");
        assert!(parse_interactions("user\titem\n", "x.tsv", &cat).is_err());
    }

    #[test]
    fn ties_keep_file_order() {
        let cat = catalogue(3);
        let rows = vec![
            Interaction { user_id: "u".into(), item: 2, rating: 5, timestamp: 10 },
            Interaction { user_id: "u".into(), item: 0, rating: 5, timestamp: 10 },
            Interaction { user_id: "u".into(), item: 1, rating: 5, timestamp: 3 },
        ];
        let ds = Dataset::from_interactions(cat, rows).unwrap();
        let items: Vec<_> = ds.users[0].events.iter().map(|e| e.0).collect();
        assert_eq!(items, vec![1, 2, 0]);
    }

    #[test]
    fn window_counts() {
        let mut rows = user("a", &(0..11).collect::<Vec<_>>(), 0);
        rows.extend(user("b", &(20..35).collect::<Vec<_>>(), 100));
        rows.extend(user("c", &(40..50).collect::<Vec<_>>(), 200));
        let ds = Dataset::from_interactions(catalogue(60), rows).unwrap();
        let ex = window_and_split(&ds, 11);
        assert_eq!(ex.iter().filter(|e| e.user == 0).count(), 1);
        assert_eq!(ex.iter().filter(|e| e.user == 1).count(), 5);
        assert_eq!(ex.iter().filter(|e| e.user == 2).count(), 0);
        for e in &ex {
            assert_eq!(e.history.len(), HISTORY_LEN);
            assert!(!e.history.contains(&e.target));
        }
    }

    #[test]
    fn split_is_8_1_1_by_label_time() {
        // 10 users x 20 interactions = 100 windows, distinct timestamps.
        let mut rows = Vec::new();
        for u in 0..10 {
            let items: Vec<u32> = (0..20).collect();
            let mut r = user(&format!("u{u}"), &items, 0);
            for (k, it) in r.iter_mut().enumerate() {
                it.timestamp = (k * 10 + u) as i64;
            }
            rows.extend(r);
        }
        let ds = Dataset::from_interactions(catalogue(40), rows).unwrap();
        let ex = window_and_split(&ds, 11);
        assert_eq!(ex.len(), 100);
        let count = |s| ex.iter().filter(|e| e.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Valid), count(Split::Test)), (80, 10, 10));
        let max_train = ex.iter().filter(|e| e.split == Split::Train).map(|e| e.label_ts).max();
        let min_test = ex.iter().filter(|e| e.split == Split::Test).map(|e| e.label_ts).min();
        assert!(max_train < min_test);
    }

    #[test]
    fn boundary_ties_go_to_earlier_split() {
        // Every window shares one label timestamp: all train.
        let mut rows = Vec::new();
        for u in 0..5 {
            rows.extend(user(&format!("u{u}"), &(0..11).collect::<Vec<_>>(), 0));
        }
        let ds = Dataset::from_interactions(catalogue(20), rows).unwrap();
        let ex = window_and_split(&ds, 11);
        assert!(ex.iter().all(|e| e.split == Split::Train));
    }

    #[test]
    fn forced_candidate_set() {
        let cat_len = 20;
        let ex = SequenceExample {
            id: 0,
            user: 0,
            history: vec![],
            target: 7,
            candidates: vec![],
            split: Split::Test,
            label_ts: 0,
        };
        let out = sample_candidates(&ex, &[7], cat_len, 3).unwrap();
        let mut sorted = out.candidates.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        assert_eq!(out, sample_candidates(&ex, &[7], cat_len, 3).unwrap());
        assert!(matches!(
            sample_candidates(&ex, &[6, 7], 20, 3),
            Err(Error::CatalogueTooSmall { .. })
        ));
    }

    #[test]
    fn candidate_frequencies_are_uniform() {
        // 10k resamples over 1000 items: each eligible item is picked with
        // probability 19/999 per draw.
        let record: Vec<u32> = vec![0];
        let ex = SequenceExample {
            id: 0,
            user: 0,
            history: vec![],
            target: 0,
            candidates: vec![],
            split: Split::Test,
            label_ts: 0,
        };
        let mut freq = vec![0u32; 1000];
        for s in 0..10_000u64 {
            let c = sample_candidates(&ex, &record, 1000, rng::derive(1, "t", s)).unwrap();
            for &i in &c.candidates {
                freq[i as usize] += 1;
            }
        }
        assert_eq!(freq[0], 10_000);
        let p = 19.0 / 999.0;
        let mean = 10_000.0 * p;
        let sd = (10_000.0f64 * p * (1.0 - p)).sqrt();
        let mut chi2 = 0.0;
        for &f in &freq[1..] {
            chi2 += (f as f64 - mean).powi(2) / mean;
        }
        // chi-square with 998 dof: mean 998, sd ~44.7
        assert!((chi2 - 998.0).abs() < 3.0 * (2.0f64 * 998.0).sqrt(), "chi2 = {chi2}");
        let outliers = freq[1..].iter().filter(|&&f| (f as f64 - mean).abs() > 3.0 * sd).count();
        assert!(outliers <= 10, "{outliers} items outside 3 sigma");
    }

    #[test]
    fn popularity_counts_train_only() {
        let mut rows = Vec::new();
        for u in 0..10 {
            let mut r = user(&format!("u{u}"), &(0..12).collect::<Vec<_>>(), 0);
            for (k, it) in r.iter_mut().enumerate() {
                it.timestamp = (k * 10 + u) as i64;
            }
            rows.extend(r);
        }
        let ds = Dataset::from_interactions(catalogue(30), rows).unwrap();
        let ex = window_and_split(&ds, 11);
        let pop = popularity(&ds, &ex);
        assert_eq!(pop.count(0), 10);
        assert_eq!(pop.count(29), 0);
        assert_eq!(pop.log_pop(29), 0.0);
        // 20 windows labelled at ts 100..109 and 110..119; the first 16
        // are train, so the cutoff is 115 and item 11 counts users 0..=5.
        assert_eq!(train_cutoff(&ex), Some(115));
        assert_eq!(pop.count(11), 6);
        assert!((log_pop(99) - 100f64.ln()).abs() < 1e-12);
        assert!((log_pop(99) - 4.6052).abs() < 1e-4);
        assert_eq!(log_pop(7), log_pop(7));
    }
}
