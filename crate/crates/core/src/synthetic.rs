//! Planted-structure data: a Markov next-item kernel with a known
//! deterministic successor, Zipf popularity and semantic clusters.
//!
//! Each step follows the item's successor with probability `rho`. Otherwise
//! (or when the successor was already visited) the next item is a noise
//! draw: with probability `cluster_affinity` a Zipf-weighted cluster-mate of
//! the current item, else a Zipf-weighted draw from the whole catalogue.
//! Visited items are never revisited.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Normal, StandardNormal};
use rayon::prelude::*;

use crate::dataset::{Catalogue, Dataset, Interaction, ItemIdx};
use crate::embeddings::EmbeddingStore;
use crate::error::{Error, Result};
use crate::oracle::clamp_epsilon;
use crate::prefdata::PreferencePair;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    /// Probability of following the deterministic successor.
    pub rho: f64,
    /// Zipf exponent of item popularity; 0 is uniform.
    pub zipf_s: f64,
    pub n_clusters: usize,
    /// Share of noise steps that stay in the current item's cluster.
    pub cluster_affinity: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub emb_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_users: 5000,
            n_items: 500,
            rho: 0.8,
            zipf_s: 1.2,
            n_clusters: 10,
            cluster_affinity: 0.5,
            min_len: 15,
            max_len: 25,
            emb_dim: 32,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_items < 30 {
            return bad("n_items must be ≥ 30");
        }
        if !(0.0..=1.0).contains(&self.rho) || !(0.0..=1.0).contains(&self.cluster_affinity) {
            return bad("rho and cluster_affinity must lie in [0, 1]");
        }
        if self.zipf_s < 0.0 {
            return bad("zipf_s must be ≥ 0");
        }
        if self.n_clusters == 0 || self.n_clusters > self.n_items {
            return bad("n_clusters must lie in [1, n_items]");
        }
        if self.emb_dim <= self.n_clusters {
            return bad("emb_dim must exceed n_clusters");
        }
        if self.min_len < 2 || self.min_len > self.max_len || self.max_len > self.n_items {
            return bad("need 2 ≤ min_len ≤ max_len ≤ n_items");
        }
        Ok(())
    }
}

/// The kernel behind a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub successor: Vec<ItemIdx>,
    pub cluster: Vec<usize>,
    pub zipf_weight: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    pub catalogue: Catalogue,
    pub interactions: Vec<Interaction>,
    pub embeddings: EmbeddingStore,
    pub truth: GroundTruth,
}

fn item_id(i: usize, n: usize) -> String {
    let w = n.to_string().len().max(4);
    format!("i{:0w$}", i + 1)
}

fn user_id(u: usize, n: usize) -> String {
    let w = n.to_string().len().max(5);
    format!("u{:0w$}", u + 1)
}

/// A uniformly random single cycle over `0..n` (Sattolo's algorithm).
fn random_cycle(n: usize, r: &mut rng::Rng) -> Vec<ItemIdx> {
    let mut a: Vec<ItemIdx> = (0..n as ItemIdx).collect();
    for i in (1..n).rev() {
        let j = r.random_range(0..i);
        a.swap(i, j);
    }
    // a is a cyclic arrangement; item a[k] is followed by a[k + 1].
    let mut succ = vec![0; n];
    for k in 0..n {
        succ[a[k] as usize] = a[(k + 1) % n];
    }
    succ
}

/// Unit vectors `0.5 c + u_k + noise`, with `c` and the cluster centroids
/// `u_k` orthonormal.
fn cluster_embeddings(spec: &SyntheticSpec, cluster: &[usize]) -> Result<EmbeddingStore> {
    let mut r = rng::stream(spec.seed, "synthetic-basis", 0);
    let g = DMatrix::from_fn(spec.emb_dim, spec.n_clusters + 1, |_, _| {
        let x: f64 = StandardNormal.sample(&mut r);
        x
    });
    let q = g.qr().q();
    let noise = Normal::new(0.0, 0.003).expect("valid std");
    let mut flat = Vec::with_capacity(spec.n_items * spec.emb_dim);
    for (i, &k) in cluster.iter().enumerate() {
        let mut r = rng::stream(spec.seed, "synthetic-noise", i as u64);
        for row in 0..spec.emb_dim {
            let eps: f64 = noise.sample(&mut r);
            flat.push(0.5 * q[(row, 0)] + q[(row, k + 1)] + eps);
        }
    }
    EmbeddingStore::from_raw(spec.emb_dim, flat)
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let n = spec.n_items;
    let mut r = rng::stream(spec.seed, "synthetic-kernel", 0);
    let successor = random_cycle(n, &mut r);
    let mut ranks: Vec<usize> = (1..=n).collect();
    ranks.shuffle(&mut r);
    let zipf_weight: Vec<f64> = ranks.iter().map(|&k| (k as f64).powf(-spec.zipf_s)).collect();
    let cluster: Vec<usize> = (0..n).map(|i| i * spec.n_clusters / n).collect();
    let members: Vec<Vec<ItemIdx>> = (0..spec.n_clusters)
        .map(|k| (0..n as ItemIdx).filter(|&i| cluster[i as usize] == k).collect())
        .collect();
    let global = WeightedIndex::new(&zipf_weight).map_err(|e| Error::Config(e.to_string()))?;

    let draw_excluding = |r: &mut rng::Rng, pool: &[ItemIdx], visited: &[bool]| -> Option<ItemIdx> {
        let w: Vec<f64> = pool
            .iter()
            .map(|&i| if visited[i as usize] { 0.0 } else { zipf_weight[i as usize] })
            .collect();
        WeightedIndex::new(&w).ok().map(|d| pool[d.sample(r)])
    };
    let all: Vec<ItemIdx> = (0..n as ItemIdx).collect();

    let per_user: Vec<Vec<Interaction>> = (0..spec.n_users)
        .into_par_iter()
        .map(|u| {
            let mut r = rng::stream(spec.seed, "synthetic-user", u as u64);
            let len = r.random_range(spec.min_len..=spec.max_len);
            let mut ts: i64 = r.random_range(0..1_000_000);
            let mut visited = vec![false; n];
            let mut cur = global.sample(&mut r) as ItemIdx;
            let mut seq = Vec::with_capacity(len);
            loop {
                visited[cur as usize] = true;
                seq.push(Interaction {
                    user_id: user_id(u, spec.n_users),
                    item: cur,
                    rating: 5,
                    timestamp: ts,
                });
                if seq.len() == len {
                    break;
                }
                ts += r.random_range(1..=10_000);
                let follow = r.random_bool(spec.rho);
                let stay = r.random_bool(spec.cluster_affinity);
                let succ = successor[cur as usize];
                cur = if follow && !visited[succ as usize] {
                    succ
                } else {
                    let mates = &members[cluster[cur as usize]];
                    let local = if stay { draw_excluding(&mut r, mates, &visited) } else { None };
                    match local.or_else(|| draw_excluding(&mut r, &all, &visited)) {
                        Some(i) => i,
                        None => break,
                    }
                };
            }
            seq
        })
        .collect();

    let catalogue = Catalogue::new(
        (0..n)
            .map(|i| (item_id(i, n), format!("Item {} (cluster {})", i + 1, cluster[i])))
            .collect(),
    )?;
    let embeddings = cluster_embeddings(spec, &cluster)?;
    Ok(SyntheticData {
        spec: spec.clone(),
        catalogue,
        interactions: per_user.into_iter().flatten().collect(),
        embeddings,
        truth: GroundTruth {
            successor,
            cluster,
            zipf_weight,
        },
    })
}

impl SyntheticData {
    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::from_interactions(self.catalogue.clone(), self.interactions.clone())
    }

    /// Writes `interactions.tsv`, `items.tsv`, `embeddings.tsv` and
    /// `ground_truth.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        let cat = &self.catalogue;
        let mut s = String::from("user_id\titem_id\trating\ttimestamp\n");
        for it in &self.interactions {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", it.user_id, cat.id(it.item), it.rating, it.timestamp);
        }
        put("interactions.tsv", s)?;
        let mut s = String::from("item_id\ttitle\n");
        for i in 0..cat.len() as ItemIdx {
            let _ = writeln!(s, "{}\t{}", cat.id(i), cat.title(i));
        }
        put("items.tsv", s)?;
        self.embeddings.write(&dir.join("embeddings.tsv"), cat)?;
        let mut s = String::from("item\tsuccessor\tcluster\tzipf_weight\n");
        let t = &self.truth;
        for i in 0..cat.len() {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                cat.id(i as ItemIdx),
                cat.id(t.successor[i]),
                t.cluster[i],
                t.zipf_weight[i]
            );
        }
        put("ground_truth.txt", s)
    }
}

/// Swaps chosen and rejected wherever `mask` is set.
pub fn apply_flips(pairs: &[PreferencePair], mask: &[bool]) -> Result<Vec<PreferencePair>> {
    if pairs.len() != mask.len() {
        return Err(Error::Shape(format!("{} pairs but {} mask entries", pairs.len(), mask.len())));
    }
    Ok(pairs
        .iter()
        .zip(mask)
        .map(|(p, &flip)| {
            let mut q = p.clone();
            if flip {
                std::mem::swap(&mut q.chosen, &mut q.rejected);
            }
            q
        })
        .collect())
}

/// Flips each pair independently with probability `flip_prob`. With
/// `write_epsilon`, every pair's ε is set to the true flip rate.
pub fn inject_flips(
    pairs: &[PreferencePair],
    flip_prob: f64,
    seed: u64,
    write_epsilon: bool,
) -> Result<(Vec<PreferencePair>, Vec<bool>)> {
    if !(0.0..0.5).contains(&flip_prob) {
        return Err(Error::Config(format!("flip_prob must lie in [0, 0.5), got {flip_prob}")));
    }
    let mut r = rng::stream(seed, "flip", 0);
    let mask: Vec<bool> = pairs.iter().map(|_| r.random_bool(flip_prob)).collect();
    let mut out = apply_flips(pairs, &mask)?;
    if write_epsilon {
        for p in &mut out {
            p.epsilon = Some(clamp_epsilon(flip_prob));
        }
    }
    Ok((out, mask))
}
