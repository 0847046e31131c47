//! Per-item semantic vectors and history–item similarity.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{Catalogue, Dataset, ItemIdx};
use crate::error::{Error, Result};
use crate::rng;

/// Unit-normalised item vectors, indexed by [`ItemIdx`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    vectors: Vec<f64>,
}

impl EmbeddingStore {
    /// Builds a store from raw (unnormalised) row-major vectors.
    pub fn from_raw(dim: usize, mut vectors: Vec<f64>) -> Result<Self> {
        if dim == 0 || !vectors.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!(
                "{} values do not form rows of width {dim}",
                vectors.len()
            )));
        }
        for (i, row) in vectors.chunks_mut(dim).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::Config(format!("embedding row {i} has zero or non-finite norm")));
            }
            // Rows already of unit length are kept as-is so a load/write
            // cycle reproduces the file.
            if (norm - 1.0).abs() > 4.0 * f64::EPSILON {
                row.iter_mut().for_each(|x| *x /= norm);
            }
        }
        Ok(EmbeddingStore { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vector(&self, item: ItemIdx) -> &[f64] {
        let i = item as usize * self.dim;
        &self.vectors[i..i + self.dim]
    }

    fn check(&self, item: ItemIdx) -> Result<()> {
        if (item as usize) < self.len() {
            Ok(())
        } else {
            Err(Error::MissingVector(format!("#{item}")))
        }
    }

    pub fn cosine(&self, a: ItemIdx, b: ItemIdx) -> f64 {
        dot(self.vector(a), self.vector(b))
    }

    /// Loads `item_id v1 v2 ...` rows. Every catalogue item must be present;
    /// rows for ids outside the catalogue are ignored.
    pub fn load(path: &Path, catalogue: &Catalogue) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path.display().to_string();
        let mut dim = None;
        let mut rows: HashMap<ItemIdx, Vec<f64>> = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut fields = line.split_whitespace();
            let Some(id) = fields.next() else { continue };
            let values = fields
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse(&name, lineno + 1, format!("bad float: {e}")))?;
            let d = *dim.get_or_insert(values.len());
            if values.len() != d || d == 0 {
                return Err(Error::parse(
                    &name,
                    lineno + 1,
                    format!("expected {d} values, found {}", values.len()),
                ));
            }
            if let Some(item) = catalogue.get(id) {
                rows.insert(item, values);
            }
        }
        let dim = dim.unwrap_or(0);
        let mut flat = Vec::with_capacity(catalogue.len() * dim);
        for item in 0..catalogue.len() as ItemIdx {
            let row = rows
                .remove(&item)
                .ok_or_else(|| Error::MissingVector(catalogue.id(item).to_string()))?;
            flat.extend(row);
        }
        EmbeddingStore::from_raw(dim, flat)
    }

    pub fn write(&self, path: &Path, catalogue: &Catalogue) -> Result<()> {
        let mut out = String::new();
        for item in 0..self.len() as ItemIdx {
            out.push_str(catalogue.id(item));
            for (j, v) in self.vector(item).iter().enumerate() {
                out.push(if j == 0 { '\t' } else { ' ' });
                write!(out, "{v}").unwrap();
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Mean cosine similarity between `item` and each history item.
    pub fn history_similarity(&self, history: &[ItemIdx], item: ItemIdx) -> Result<f64> {
        if history.is_empty() {
            return Err(Error::Config("history_similarity needs a non-empty history".into()));
        }
        self.check(item)?;
        for &h in history {
            self.check(h)?;
        }
        let v = self.vector(item);
        Ok(history.iter().map(|&h| dot(v, self.vector(h))).sum::<f64>() / history.len() as f64)
    }

    // Mean history vector; dot with an item gives its history similarity.
    fn history_centroid(&self, history: &[ItemIdx]) -> Result<Vec<f64>> {
        if history.is_empty() {
            return Err(Error::Config("history must not be empty".into()));
        }
        let mut c = vec![0.0; self.dim];
        for &h in history {
            self.check(h)?;
            for (acc, x) in c.iter_mut().zip(self.vector(h)) {
                *acc += x;
            }
        }
        let n = history.len() as f64;
        c.iter_mut().for_each(|x| *x /= n);
        Ok(c)
    }

    /// Similarity of every catalogue item to the history.
    pub fn similarities(&self, history: &[ItemIdx]) -> Result<Vec<f64>> {
        let c = self.history_centroid(history)?;
        Ok(self.vectors.chunks(self.dim).map(|v| dot(v, &c)).collect())
    }

    /// Argmax of history similarity over items not in `excluded` (sorted);
    /// ties go to the smallest item.
    pub fn most_similar_item(&self, history: &[ItemIdx], excluded: &[ItemIdx]) -> Result<ItemIdx> {
        let sims = self.similarities(history)?;
        let mut best: Option<(ItemIdx, f64)> = None;
        for (i, &s) in sims.iter().enumerate() {
            let i = i as ItemIdx;
            if excluded.binary_search(&i).is_ok() {
                continue;
            }
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best.map(|(i, _)| i)
            .ok_or_else(|| Error::EmptyFeasibleSet("every item is excluded".into()))
    }

    /// The `k - 1` non-interacted items most similar to the history, plus the
    /// target, in a seeded random order.
    pub fn semantic_hard_candidates(
        &self,
        history: &[ItemIdx],
        target: ItemIdx,
        user_record: &[ItemIdx],
        k: usize,
        seed: u64,
    ) -> Result<Vec<ItemIdx>> {
        let sims = self.similarities(history)?;
        let mut pool: Vec<ItemIdx> = (0..self.len() as ItemIdx)
            .filter(|i| user_record.binary_search(i).is_err() && *i != target)
            .collect();
        if pool.len() + 1 < k {
            return Err(Error::CatalogueTooSmall {
                needed: k - 1,
                available: pool.len(),
            });
        }
        pool.sort_by(|&a, &b| sims[b as usize].total_cmp(&sims[a as usize]).then(a.cmp(&b)));
        let mut out = Vec::with_capacity(k);
        out.push(target);
        out.extend_from_slice(&pool[..k - 1]);
        out.shuffle(&mut rng::rng(seed));
        Ok(out)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maximum distance between two positions of a user's sequence for the pair
/// to count as co-occurring.
const COOCCURRENCE_WINDOW: usize = 3;

/// Fallback embeddings when no semantic vectors are supplied: a rank-`dim`
/// truncated eigendecomposition of the symmetric item–item co-occurrence
/// matrix built from interactions at or before `cutoff`.
///
/// Rows are `U_k |Λ_k|^{1/2}`. Items that never co-occur get a seeded random
/// direction so every row can be normalised.
pub fn cooccurrence_embeddings(
    dataset: &Dataset,
    cutoff: Option<i64>,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingStore> {
    let n = dataset.catalogue.len();
    if n == 0 {
        return Err(Error::Config("empty catalogue".into()));
    }
    let k = dim.min(n);
    let mut rows: Vec<HashMap<u32, f64>> = vec![HashMap::new(); n];
    if let Some(cutoff) = cutoff {
        for user in &dataset.users {
            let items: Vec<ItemIdx> = user
                .events
                .iter()
                .take_while(|&&(_, ts)| ts <= cutoff)
                .map(|&(i, _)| i)
                .collect();
            for a in 0..items.len() {
                for b in a + 1..items.len().min(a + 1 + COOCCURRENCE_WINDOW) {
                    let (x, y) = (items[a], items[b]);
                    *rows[x as usize].entry(y).or_default() += 1.0;
                    *rows[y as usize].entry(x).or_default() += 1.0;
                }
            }
        }
    }
    let sparse: Vec<Vec<(u32, f64)>> = rows
        .into_iter()
        .map(|r| {
            let mut v: Vec<_> = r.into_iter().collect();
            v.sort_unstable_by_key(|e| e.0);
            v
        })
        .collect();
    let apply = |q: &DMatrix<f64>| {
        let mut y = DMatrix::zeros(n, q.ncols());
        for (i, row) in sparse.iter().enumerate() {
            for &(j, c) in row {
                for col in 0..q.ncols() {
                    y[(i, col)] += c * q[(j as usize, col)];
                }
            }
        }
        y
    };

    let mut r = rng::stream(seed, "svd-init", 0);
    let mut q = DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(&mut r));
    q = orthonormalize(q);
    for _ in 0..40 {
        q = orthonormalize(apply(&q));
    }
    let cq = apply(&q);
    let projected = q.transpose() * &cq;
    let projected = (&projected + projected.transpose()) * 0.5;
    let eig = SymmetricEigen::new(projected);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .abs()
            .total_cmp(&eig.eigenvalues[a].abs())
            .then(a.cmp(&b))
    });
    let basis = &q * &eig.eigenvectors;

    let mut flat = Vec::with_capacity(n * k);
    for i in 0..n {
        let mut row: Vec<f64> = order
            .iter()
            .map(|&c| basis[(i, c)] * eig.eigenvalues[c].abs().sqrt())
            .collect();
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if sparse[i].is_empty() || norm < 1e-12 {
            let mut r = rng::stream(seed, "svd-cold", i as u64);
            row = (0..k).map(|_| StandardNormal.sample(&mut r)).collect();
        }
        flat.extend(row);
    }
    EmbeddingStore::from_raw(k, flat)
}

fn orthonormalize(m: DMatrix<f64>) -> DMatrix<f64> {
    // Thin QR; nalgebra's Householder QR is deterministic.
    let q = m.qr().q();
    q.columns(0, q.ncols()).into_owned()
}
