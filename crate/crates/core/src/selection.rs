//! Weak-sample selection: columns are embedded by their logits, clustered
//! with k-means, and every cluster that contains a difficult column
//! contributes its members to the weak pool the next fine-tuning batch is
//! drawn from.

use std::collections::{BTreeSet, HashSet};

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotator::{ColumnModel, FeatureVector};
use crate::corpus::ColumnId;
use crate::error::{Error, Result};
use crate::rng::{self, tags};

pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSpace {
    #[default]
    Logits,
    Softmax,
}

/// One row per feature vector: the model's logits, or their softmax.
pub fn embed_for_clustering<M: ColumnModel>(
    model: &M,
    features: &[&FeatureVector],
    space: EmbeddingSpace,
) -> Result<Vec<Vec<f64>>> {
    features
        .par_iter()
        .map(|f| {
            let v = model.logits(f)?;
            Ok(match space {
                EmbeddingSpace::Logits => v,
                EmbeddingSpace::Softmax => softmax(&v),
            })
        })
        .collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    /// K the caller asked for; larger than `k` when there were too few
    /// distinct points.
    pub requested_k: usize,
    pub centroids: Vec<Vec<f64>>,
    /// Cluster id per input point.
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step, final one last.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl ClusterModel {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn distinct_count(points: &[Vec<f64>]) -> usize {
    points
        .iter()
        .map(|p| p.iter().map(|x| x.to_bits()).collect::<Vec<u64>>())
        .collect::<HashSet<_>>()
        .len()
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let r = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 {
                acc += d;
                pick = Some(i);
                if acc > r {
                    break;
                }
            }
        }
        let pick = pick.expect("k never exceeds the distinct point count");
        centroids.push(points[pick].clone());
        let c = centroids.last().unwrap();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, c));
        }
    }
    centroids
}

/// Lloyd's algorithm from k-means++ seeds. Stops when no centroid moves by
/// `tol` or more, or after `max_iters` updates. An empty cluster keeps its
/// previous centroid. When `k` exceeds the number of distinct points it is
/// reduced to that number.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<ClusterModel> {
    if points.is_empty() {
        return Err(Error::Runtime("k-means on an empty point set".into()));
    }
    if k == 0 {
        return Err(Error::config("k-means needs K >= 1"));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Runtime("k-means points have mixed dimensions".into()));
    }
    if points.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Runtime("k-means points must be finite".into()));
    }
    let distinct = distinct_count(points);
    let requested_k = k;
    let k = if k > distinct {
        log::warn!("k-means: K={k} exceeds {distinct} distinct points; using K={distinct}");
        distinct
    } else {
        k
    };

    let mut rng = rng::stream(seed, tags::KMEANS);
    let mut centroids = kmeans_pp(points, k, &mut rng);
    let assign = |centroids: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let nearest: Vec<(usize, f64)> = points.par_iter().map(|p| nearest(p, centroids)).collect();
        let inertia = nearest.iter().map(|(_, d)| d).sum();
        (nearest.into_iter().map(|(i, _)| i).collect(), inertia)
    };

    let mut history = Vec::new();
    let mut iterations = 0;
    let (mut assignment, mut inertia) = assign(&centroids);
    history.push(inertia);
    while iterations < max_iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut shift = 0.0f64;
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            if n == 0 {
                continue;
            }
            let mean: Vec<f64> = s.into_iter().map(|x| x / n as f64).collect();
            shift = shift.max(sq_dist(c, &mean).sqrt());
            *c = mean;
        }
        iterations += 1;
        (assignment, inertia) = assign(&centroids);
        history.push(inertia);
        if shift < tol {
            break;
        }
    }

    Ok(ClusterModel {
        k,
        requested_k,
        centroids,
        assignment,
        inertia,
        inertia_history: history,
        iterations,
    })
}

/// Weak clusters and their members (the weak pool).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WeakSet {
    pub clusters: Vec<usize>,
    pub members: Vec<ColumnId>,
}

/// Marks every cluster holding a difficult column as weak. `clustered[i]`
/// is the column behind point `i`. Members already in `consumed` are left
/// out of the pool.
pub fn mark_weak_clusters(
    model: &ClusterModel,
    clustered: &[ColumnId],
    difficult: &[ColumnId],
    consumed: &BTreeSet<ColumnId>,
) -> Result<WeakSet> {
    if clustered.len() != model.assignment.len() {
        return Err(Error::Dimension {
            expected: model.assignment.len(),
            actual: clustered.len(),
        });
    }
    let difficult: HashSet<ColumnId> = difficult.iter().copied().collect();
    let mut weak = BTreeSet::new();
    let mut found = 0;
    for (id, &cluster) in clustered.iter().zip(&model.assignment) {
        if difficult.contains(id) {
            weak.insert(cluster);
            found += 1;
        }
    }
    if found != difficult.len() {
        return Err(Error::Runtime(format!(
            "{} difficult columns were not clustered",
            difficult.len() - found
        )));
    }
    let members = clustered
        .iter()
        .zip(&model.assignment)
        .filter(|(id, c)| weak.contains(c) && !consumed.contains(id))
        .map(|(id, _)| *id)
        .collect();
    Ok(WeakSet {
        clusters: weak.into_iter().collect(),
        members,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FinetuneBatch {
    /// Sorted ascending.
    pub columns: Vec<ColumnId>,
    pub from_weak: usize,
    pub from_fallback: usize,
}

/// Uniform sample of `batch_size` weak columns. A shortfall is topped up
/// uniformly from `fallback_pool` (weak members excluded). Returns fewer
/// columns only when both pools together are too small.
pub fn sample_finetune_batch(
    weak: &WeakSet,
    batch_size: usize,
    seed: u64,
    fallback_pool: &[ColumnId],
) -> FinetuneBatch {
    let mut rng = rng::stream(seed, tags::BATCH);
    let mut columns: Vec<ColumnId> = weak
        .members
        .choose_multiple(&mut rng, batch_size)
        .copied()
        .collect();
    let from_weak = columns.len();
    let shortfall = batch_size - from_weak;
    let mut from_fallback = 0;
    if shortfall > 0 {
        let weak_members: HashSet<ColumnId> = weak.members.iter().copied().collect();
        let pool: Vec<ColumnId> = fallback_pool
            .iter()
            .filter(|id| !weak_members.contains(id))
            .copied()
            .collect();
        let extra: Vec<ColumnId> = pool.choose_multiple(&mut rng, shortfall).copied().collect();
        from_fallback = extra.len();
        columns.extend(extra);
        if columns.len() < batch_size {
            log::warn!(
                "only {} columns available for a fine-tuning batch of {batch_size}",
                columns.len()
            );
        }
    }
    columns.sort();
    FinetuneBatch {
        columns,
        from_weak,
        from_fallback,
    }
}

/// Mean silhouette coefficient (Euclidean). Points in singleton clusters
/// score 0.
pub fn silhouette_score(points: &[Vec<f64>], assignment: &[usize]) -> Result<f64> {
    let k = assignment.iter().copied().max().map_or(0, |m| m + 1);
    let used: BTreeSet<usize> = assignment.iter().copied().collect();
    if used.len() < 2 {
        return Err(Error::Runtime("silhouette undefined for fewer than two clusters".into()));
    }
    let mut sizes = vec![0usize; k];
    for &a in assignment {
        sizes[a] += 1;
    }
    let scores: Vec<f64> = points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let own = assignment[i];
            if sizes[own] <= 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for (q, &a) in points.iter().zip(assignment) {
                sums[a] += sq_dist(p, q).sqrt();
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 {
                (b - a) / denom
            } else {
                0.0
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Runs k-means for each candidate K and returns the K with the highest
/// mean silhouette (ties go to the smaller K).
pub fn silhouette_select_k(points: &[Vec<f64>], candidates: &[usize], seed: u64) -> Result<usize> {
    let ks: BTreeSet<usize> = candidates.iter().copied().collect();
    if ks.is_empty() {
        return Err(Error::config("silhouette selection needs candidate K values"));
    }
    if ks.iter().any(|&k| k < 2) {
        return Err(Error::config("silhouette candidates must be >= 2"));
    }
    if distinct_count(points) < 2 {
        return Err(Error::Runtime("silhouette undefined: all points identical".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for k in ks {
        let model = kmeans(points, k, seed, DEFAULT_MAX_ITERS, DEFAULT_TOL)?;
        let s = silhouette_score(points, &model.assignment)?;
        log::debug!("silhouette K={k}: {s:.4}");
        if best.is_none_or(|(_, bs)| s > bs) {
            best = Some((k, s));
        }
    }
    Ok(best.unwrap().0)
}

/// Debug dump of one clustering round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDump {
    pub iteration: usize,
    pub k: usize,
    pub sizes: Vec<usize>,
    pub centroid_norms: Vec<f64>,
    pub weak: Vec<bool>,
    pub inertia: f64,
}

impl ClusterDump {
    pub fn new(iteration: usize, model: &ClusterModel, weak: &WeakSet) -> Self {
        ClusterDump {
            iteration,
            k: model.k,
            sizes: model.sizes(),
            centroid_norms: model
                .centroids
                .iter()
                .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect(),
            weak: (0..model.k).map(|c| weak.clusters.contains(&c)).collect(),
            inertia: model.inertia,
        }
    }
}
