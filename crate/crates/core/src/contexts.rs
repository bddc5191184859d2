//! Context construction: k-means clusters, superclass maps and domain tags,
//! each yielding one context id per sample plus the dataset proportions
//! `λ_k` used by CN and CN-X.
//!
//! Context ids are zero-based (`0..K`).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Kmeans,
    Superclass,
    Domain,
}

/// Per-sample context ids with the proportion of samples in each context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextAssignment {
    pub k: usize,
    pub ids: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub strategy: Strategy,
    /// Cluster centers for the k-means strategy, `[K, D]`; used to place
    /// unseen samples with [`assign_nearest`].
    pub centroids: Option<Tensor>,
}

impl ContextAssignment {
    /// Ids for a subset of the samples, in the given order.
    pub fn select(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.ids[i]).collect()
    }
}

/// `λ_k = |{i : ids[i] = k}| / n`. Every context must be non-empty.
pub fn context_proportions(ids: &[usize], k: usize) -> Result<Vec<f64>> {
    if ids.is_empty() {
        return Err(Error::Config("no samples to count contexts over".into()));
    }
    let mut counts = vec![0usize; k];
    for &id in ids {
        if id >= k {
            return Err(Error::Config(format!("context id {id} outside 0..{k}")));
        }
        counts[id] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Config(format!("context {empty} has no samples")));
    }
    let n = ids.len() as f64;
    Ok(counts.iter().map(|&c| c as f64 / n).collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: the first center uniformly at random, each next one
/// with probability proportional to the squared distance to the nearest
/// center chosen so far. Returns row indices of `x`.
pub fn kmeanspp_seeds(x: &Tensor, k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let (n, _) = x.dims2()?;
    if k == 0 {
        return Err(Error::Config("need at least one cluster".into()));
    }
    if n < k {
        return Err(Error::InsufficientData(format!("{n} points for {k} clusters")));
    }
    let mut seeds = vec![rng.below(n)];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(seeds[0]))).collect();
    while seeds.len() < k {
        let next = match rng.weighted_index(&nearest) {
            Some(i) => i,
            // every point coincides with a chosen center
            None => (0..n).find(|i| !seeds.contains(i)).expect("n ≥ k"),
        };
        seeds.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    Ok(seeds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Tensor,
    pub ids: Vec<usize>,
    /// Sum of squared distances to the assigned centroid, recorded after
    /// every update step.
    pub distortion: Vec<f64>,
    pub iterations: usize,
}

/// Index of the nearest centroid for every row of `x` (ties go to the lower
/// index).
pub fn assign_nearest(centroids: &Tensor, x: &Tensor) -> Result<Vec<usize>> {
    let (k, d) = centroids.dims2()?;
    let (n, dx) = x.dims2()?;
    if d != dx {
        return Err(Error::Shape(format!("centroids have dimension {d}, data {dx}")));
    }
    Ok((0..n)
        .map(|i| {
            let row = x.row(i);
            let mut best = (0, f64::INFINITY);
            for c in 0..k {
                let dist = sq_dist(row, centroids.row(c));
                if dist < best.1 {
                    best = (c, dist);
                }
            }
            best.0
        })
        .collect())
}

fn distortion(x: &Tensor, centroids: &Tensor, ids: &[usize]) -> f64 {
    ids.iter().enumerate().map(|(i, &c)| sq_dist(x.row(i), centroids.row(c))).sum()
}

/// Lloyd's algorithm from k-means++ seeds, until the assignment stops
/// changing or `max_iters` update steps have run. An empty cluster is
/// reseeded at the point farthest from its current centroid.
pub fn kmeans_fit(x: &Tensor, k: usize, rng: &mut Rng, max_iters: usize) -> Result<KMeansFit> {
    let (n, d) = x.dims2()?;
    let seeds = kmeanspp_seeds(x, k, rng)?;
    let mut centroids = Tensor::zeros(&[k, d]);
    for (c, &i) in seeds.iter().enumerate() {
        centroids.row_mut(c).copy_from_slice(x.row(i));
    }
    let mut ids = assign_nearest(&centroids, x)?;
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let mut sums = Tensor::zeros(&[k, d]);
        let mut counts = vec![0usize; k];
        for (i, &c) in ids.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(x.row(a), centroids.row(ids[a]))
                            .total_cmp(&sq_dist(x.row(b), centroids.row(ids[b])))
                            .then(b.cmp(&a))
                    })
                    .expect("n ≥ k ≥ 1");
                let point = x.row(far).to_vec();
                centroids.row_mut(c).copy_from_slice(&point);
                counts[ids[far]] -= 1;
                ids[far] = c;
                counts[c] = 1;
            }
        }
        history.push(distortion(x, &centroids, &ids));
        let next = assign_nearest(&centroids, x)?;
        if next == ids {
            break;
        }
        ids = next;
    }
    Ok(KMeansFit { centroids, ids, distortion: history, iterations })
}

/// Feature extraction for clustering `[N, C, L]` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Every input value, flattened to `C·L` features.
    #[default]
    RawFlatten,
    /// One feature per channel: its spatial mean.
    ChannelMean,
}

pub fn extract_features(inputs: &Tensor, mode: FeatureMode) -> Result<Tensor> {
    let (n, c, l) = inputs.dims3()?;
    match mode {
        FeatureMode::RawFlatten => inputs.clone().reshape(&[n, c * l]),
        FeatureMode::ChannelMean => {
            let data = inputs.data().chunks(l).map(|row| row.iter().sum::<f64>() / l as f64).collect();
            Tensor::from_vec(&[n, c], data)
        }
    }
}

/// Class id to context id.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SuperclassMap(pub BTreeMap<usize, usize>);

/// JSON sidecar describing superclasses or domains:
/// `{"map": {"class_id": context_id, ...}}` or `{"domains": [tag, ...]}`.
/// An optional `"domain_names"` list fixes the domain order and the set of
/// accepted tags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<BTreeMap<String, usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domains: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_names: Option<Vec<String>>,
}

impl Sidecar {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad context sidecar: {e}")))
    }

    pub fn superclass_map(&self) -> Result<SuperclassMap> {
        let raw = self.map.as_ref().ok_or_else(|| Error::Config("sidecar has no \"map\"".into()))?;
        let mut map = BTreeMap::new();
        for (class, &ctx) in raw {
            let class: usize =
                class.parse().map_err(|_| Error::Mapping(format!("class id {class:?} is not an integer")))?;
            map.insert(class, ctx);
        }
        Ok(SuperclassMap(map))
    }
}

/// Where the contexts come from.
#[derive(Debug, Clone)]
pub enum ContextSource<'a> {
    Kmeans { inputs: &'a Tensor, features: FeatureMode, k: usize, seed: u64, max_iters: usize },
    Superclass { labels: &'a [usize], map: &'a SuperclassMap },
    Domain { tags: &'a [String], names: Option<&'a [String]> },
}

pub fn assign_contexts(source: ContextSource<'_>) -> Result<ContextAssignment> {
    match source {
        ContextSource::Kmeans { inputs, features, k, seed, max_iters } => {
            let feats = extract_features(inputs, features)?;
            let fit = kmeans_fit(&feats, k, &mut Rng::new(seed), max_iters)?;
            let lambdas = context_proportions(&fit.ids, k)?;
            Ok(ContextAssignment {
                k,
                ids: fit.ids,
                lambdas,
                strategy: Strategy::Kmeans,
                centroids: Some(fit.centroids),
            })
        }
        ContextSource::Superclass { labels, map } => {
            let ids = labels
                .iter()
                .map(|class| {
                    map.0.get(class).copied().ok_or_else(|| Error::Mapping(format!("class {class} has no superclass")))
                })
                .collect::<Result<Vec<_>>>()?;
            let k = map.0.values().max().map_or(0, |m| m + 1);
            let lambdas = context_proportions(&ids, k)?;
            Ok(ContextAssignment { k, ids, lambdas, strategy: Strategy::Superclass, centroids: None })
        }
        ContextSource::Domain { tags, names } => {
            let order: Vec<String> = match names {
                Some(names) => names.to_vec(),
                None => {
                    let mut seen: Vec<String> = Vec::new();
                    for t in tags {
                        if !seen.contains(t) {
                            seen.push(t.clone());
                        }
                    }
                    seen
                }
            };
            let ids = tags
                .iter()
                .map(|t| order.iter().position(|n| n == t).ok_or_else(|| Error::Mapping(format!("unknown domain {t:?}"))))
                .collect::<Result<Vec<_>>>()?;
            let k = order.len();
            let lambdas = context_proportions(&ids, k)?;
            Ok(ContextAssignment { k, ids, lambdas, strategy: Strategy::Domain, centroids: None })
        }
    }
}
