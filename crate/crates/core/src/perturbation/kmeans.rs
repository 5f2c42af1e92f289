//! Lloyd's k-means with k-means++ seeding.
//!
//! Seeding draws are keyed by a hash of each point's coordinates rather than
//! its position, and all reductions run over a canonical (coordinate-sorted)
//! order, so the fitted model does not depend on input order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::{splitmix64, unit_open};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub label: String,
    pub coords: Vec<f64>,
}

impl Point {
    pub fn new(label: impl Into<String>, coords: Vec<f64>) -> Self {
        Point {
            label: label.into(),
            coords,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
    /// Independent seedings; the lowest-inertia fit wins.
    pub n_init: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            k: 4,
            seed: 0,
            max_iters: 300,
            tol: 1e-6,
            n_init: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    /// Label -> cluster index.
    pub assignments: BTreeMap<String, usize>,
    /// Label -> Euclidean distance to its centroid.
    pub distances: BTreeMap<String, f64>,
    pub inertia: f64,
    pub iterations: usize,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn cmp_coords(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn content_hash(coords: &[f64]) -> u64 {
    coords
        .iter()
        .fold(0x6A09_E667_F3BC_C908, |h, c| splitmix64(h ^ c.to_bits()))
}

fn validate(points: &[Point], params: &KMeansParams) -> Result<usize> {
    if params.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if params.k > points.len() {
        return Err(Error::TooFewVectors {
            k: params.k,
            n: points.len(),
        });
    }
    if params.max_iters == 0 || params.n_init == 0 {
        return Err(Error::Config("max_iters and n_init must be at least 1".into()));
    }
    if params.tol.is_nan() || params.tol < 0.0 {
        return Err(Error::Config(format!("tol must be non-negative, got {}", params.tol)));
    }
    let dim = points[0].coords.len();
    if dim == 0 {
        return Err(Error::Input("points have zero dimensions".into()));
    }
    let mut seen = HashSet::new();
    for p in points {
        if p.coords.len() != dim {
            return Err(Error::Input(format!(
                "`{}` has {} dimensions, expected {dim}",
                p.label,
                p.coords.len()
            )));
        }
        if p.coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::Input(format!("`{}` has non-finite coordinates", p.label)));
        }
        if !seen.insert(p.label.as_str()) {
            return Err(Error::Input(format!("duplicate label `{}`", p.label)));
        }
    }
    Ok(dim)
}

/// Nearest centroid, ties to the lower index.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

struct Run {
    centroids: Vec<Vec<f64>>,
    labels: Vec<usize>,
    sq_dists: Vec<f64>,
    inertia: f64,
    iterations: usize,
}

/// k-means++ seeding over canonically ordered points. Each draw is an
/// exponential race: the point minimizing -ln(u) / D² wins, where u is keyed
/// by (seed, draw number, point contents).
fn seed_centroids(points: &[&[f64]], hashes: &[u64], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let draw_key = |draw: u64, i: usize| unit_open(splitmix64(hashes[i] ^ splitmix64(seed ^ draw)));
    let first = (0..points.len())
        .min_by(|&a, &b| draw_key(0, a).total_cmp(&draw_key(0, b)))
        .expect("at least one point");
    let mut centroids = vec![points[first].to_vec()];
    let mut chosen = vec![first];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    for draw in 1..k {
        let pick = (0..points.len())
            .filter(|&i| d2[i] > 0.0)
            .map(|i| (i, -draw_key(draw as u64, i).ln() / d2[i]))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            // fewer distinct points than k
            .unwrap_or_else(|| (0..points.len()).find(|i| !chosen.contains(i)).unwrap_or(0));
        chosen.push(pick);
        let c = points[pick].to_vec();
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn lloyd(points: &[&[f64]], mut centroids: Vec<Vec<f64>>, params: &KMeansParams, dim: usize) -> Run {
    let k = centroids.len();
    let n = points.len();
    let mut labels = vec![0usize; n];
    let mut sq_dists = vec![0.0; n];
    let mut iterations = 0;
    for _ in 0..params.max_iters {
        iterations += 1;
        for (i, p) in points.iter().enumerate() {
            (labels[i], sq_dists[i]) = nearest(p, &centroids);
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut sizes = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            sizes[labels[i]] += 1;
            for (s, x) in sums[labels[i]].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        // empty clusters restart at the points farthest from their centroids
        let mut taken: Vec<usize> = Vec::new();
        for j in 0..k {
            if sizes[j] > 0 {
                for s in &mut sums[j] {
                    *s /= sizes[j] as f64;
                }
                continue;
            }
            let far = (0..n)
                .filter(|i| !taken.contains(i))
                .max_by(|&a, &b| sq_dists[a].total_cmp(&sq_dists[b]).then(b.cmp(&a)))
                .expect("k <= n");
            taken.push(far);
            sums[j] = points[far].to_vec();
        }
        let shift = centroids
            .iter()
            .zip(&sums)
            .map(|(a, b)| squared_distance(a, b))
            .fold(0.0f64, f64::max)
            .sqrt();
        centroids = sums;
        if shift < params.tol {
            break;
        }
    }
    for (i, p) in points.iter().enumerate() {
        (labels[i], sq_dists[i]) = nearest(p, &centroids);
    }
    let inertia = sq_dists.iter().sum();
    Run {
        centroids,
        labels,
        sq_dists,
        inertia,
        iterations,
    }
}

/// Fits k centroids to `points`. Deterministic in (points as a set, params).
pub fn kmeans_fit(points: &[Point], params: &KMeansParams) -> Result<KMeansFit> {
    if points.is_empty() {
        return Err(Error::TooFewVectors { k: params.k, n: 0 });
    }
    let dim = validate(points, params)?;

    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        cmp_coords(&points[a].coords, &points[b].coords)
            .then_with(|| points[a].label.cmp(&points[b].label))
    });
    let canonical: Vec<&[f64]> = order.iter().map(|&i| points[i].coords.as_slice()).collect();
    let hashes: Vec<u64> = canonical.iter().map(|c| content_hash(c)).collect();

    let mut best: Option<Run> = None;
    for restart in 0..params.n_init as u64 {
        let seed = splitmix64(params.seed ^ restart.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let init = seed_centroids(&canonical, &hashes, params.k, seed);
        let run = lloyd(&canonical, init, params, dim);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let run = best.expect("n_init >= 1");

    let mut assignments = BTreeMap::new();
    let mut distances = BTreeMap::new();
    for (pos, &i) in order.iter().enumerate() {
        assignments.insert(points[i].label.clone(), run.labels[pos]);
        distances.insert(points[i].label.clone(), run.sq_dists[pos].sqrt());
    }
    Ok(KMeansFit {
        centroids: run.centroids,
        assignments,
        distances,
        inertia: run.inertia,
        iterations: run.iterations,
    })
}
