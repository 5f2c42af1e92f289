//! Template perturbation: score every template with a candidate term in the
//! `{person}` slot, cluster the resulting vectors and summarize each cluster
//! as a baseline-vs-perturbed series.

mod kmeans;
mod templates;

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use log::{info, warn};
use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans_fit, squared_distance, KMeansFit, KMeansParams, Point};
pub use templates::{instantiate, Template, TemplateSet, DEFAULT_TEMPLATES, PLACEHOLDER};

use crate::corpus::{Document, NormalizationConfig};
use crate::error::{Error, Result, ScoreError};
use crate::scorer::Scorer;

/// Term used to re-score template baselines with the active scorer.
pub const NEUTRAL_TERM: &str = "person";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationVector {
    pub term: String,
    pub scores: Vec<f64>,
}

/// A term whose vector could not be built.
#[derive(Debug, Clone, PartialEq)]
pub struct TermFailure {
    pub term: String,
    pub template_index: usize,
    pub error: ScoreError,
}

/// Scores `term` in every template.
pub fn build_vector<S: Scorer + ?Sized>(
    term: &str,
    templates: &TemplateSet,
    scorer: &S,
) -> Result<PerturbationVector> {
    let (mut vectors, mut failures) = build_vectors(&[term.to_owned()], templates, scorer)?;
    match (vectors.pop(), failures.pop()) {
        (Some(v), _) => Ok(v),
        (None, Some(f)) => Err(f.error.into()),
        (None, None) => unreachable!("every term yields a vector or a failure"),
    }
}

/// Builds vectors for all terms in one scorer batch. A term with any failed
/// template score is left out and reported; partial vectors are never
/// returned.
pub fn build_vectors<S: Scorer + ?Sized>(
    terms: &[String],
    templates: &TemplateSet,
    scorer: &S,
) -> Result<(Vec<PerturbationVector>, Vec<TermFailure>)> {
    let d = templates.len();
    let mut texts = Vec::with_capacity(terms.len() * d);
    for term in terms {
        for t in templates {
            texts.push(t.instantiate(term)?);
        }
    }
    let scores = scorer.score_batch(&texts);
    let mut vectors = Vec::with_capacity(terms.len());
    let mut failures = Vec::new();
    for (term, chunk) in terms.iter().zip(scores.chunks(d)) {
        match chunk.iter().position(Result::is_err) {
            Some(i) => {
                let error = chunk[i].clone().unwrap_err();
                warn!("dropping `{term}`: template {} failed to score: {error}", i + 1);
                failures.push(TermFailure {
                    term: term.clone(),
                    template_index: i,
                    error,
                });
            }
            None => vectors.push(PerturbationVector {
                term: term.clone(),
                scores: chunk.iter().map(|r| *r.as_ref().unwrap()).collect(),
            }),
        }
    }
    Ok((vectors, failures))
}

/// The template set with baselines re-scored by `scorer` using `neutral`
/// in the slot.
pub fn rescore_baselines<S: Scorer + ?Sized>(
    templates: &TemplateSet,
    scorer: &S,
    neutral: &str,
) -> Result<TemplateSet> {
    let v = build_vector(neutral, templates, scorer)?;
    templates.with_baselines(&v.scores)
}

/// What gets clustered: the perturbed scores themselves, or their offsets
/// from the template baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorMode {
    #[default]
    Raw,
    Deviation,
}

fn features(v: &PerturbationVector, baselines: &[f64], mode: VectorMode) -> Point {
    let coords = match mode {
        VectorMode::Raw => v.scores.clone(),
        VectorMode::Deviation => v.scores.iter().zip(baselines).map(|(x, b)| x - b).collect(),
    };
    Point::new(v.term.clone(), coords)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub seed: u64,
    pub mode: VectorMode,
    /// In the space selected by `mode`.
    pub centroids: Vec<Vec<f64>>,
    pub assignments: BTreeMap<String, usize>,
    pub distances: BTreeMap<String, f64>,
    pub inertia: f64,
    pub iterations: usize,
}

impl ClusterModel {
    pub fn members(&self, cluster: usize) -> Vec<(&str, f64)> {
        let mut m: Vec<(&str, f64)> = self
            .assignments
            .iter()
            .filter(|(_, &c)| c == cluster)
            .map(|(t, _)| (t.as_str(), self.distances[t]))
            .collect();
        m.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
        m
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in self.assignments.values() {
            sizes[c] += 1;
        }
        sizes
    }
}

fn check_vectors(vectors: &[PerturbationVector], d: usize) -> Result<()> {
    for v in vectors {
        if v.scores.len() != d {
            return Err(Error::Input(format!(
                "vector for `{}` has {} entries, expected {d}",
                v.term,
                v.scores.len()
            )));
        }
        if v.scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Input(format!("vector for `{}` has scores outside [0, 1]", v.term)));
        }
    }
    Ok(())
}

/// Clusters perturbation vectors with k-means.
pub fn cluster_vectors(
    vectors: &[PerturbationVector],
    templates: &TemplateSet,
    mode: VectorMode,
    params: &KMeansParams,
) -> Result<ClusterModel> {
    check_vectors(vectors, templates.len())?;
    let baselines = templates.baselines();
    let points: Vec<Point> = vectors.iter().map(|v| features(v, &baselines, mode)).collect();
    let fit = kmeans_fit(&points, params)?;
    info!(
        "k-means k={} converged after {} iterations, inertia {:.6}",
        params.k, fit.iterations, fit.inertia
    );
    Ok(ClusterModel {
        k: params.k,
        seed: params.seed,
        mode,
        centroids: fit.centroids,
        assignments: fit.assignments,
        distances: fit.distances,
        inertia: fit.inertia,
        iterations: fit.iterations,
    })
}

/// Inertia for each k in `ks`, other parameters held fixed.
pub fn scan_k(
    vectors: &[PerturbationVector],
    templates: &TemplateSet,
    mode: VectorMode,
    params: &KMeansParams,
    ks: impl IntoIterator<Item = usize>,
) -> Result<Vec<(usize, f64)>> {
    ks.into_iter()
        .map(|k| {
            let m = cluster_vectors(vectors, templates, mode, &KMeansParams { k, ..*params })?;
            Ok((k, m.inertia))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterProfile {
    pub cluster: usize,
    /// (baseline score, centroid score) per template, by baseline ascending.
    pub series: Vec<(f64, f64)>,
    /// Member terms nearest-first.
    pub members: Vec<(String, f64)>,
}

/// Plot data for each cluster. Centroids are reported as scores regardless
/// of the clustering mode.
pub fn cluster_profile(model: &ClusterModel, templates: &TemplateSet) -> Result<Vec<ClusterProfile>> {
    let baselines = templates.baselines();
    if model.centroids.iter().any(|c| c.len() != baselines.len()) {
        return Err(Error::Input(format!(
            "model centroids do not match the {}-template set",
            baselines.len()
        )));
    }
    Ok(model
        .centroids
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let mut series: Vec<(f64, f64)> = baselines
                .iter()
                .zip(c)
                .map(|(&b, &x)| match model.mode {
                    VectorMode::Raw => (b, x),
                    VectorMode::Deviation => (b, b + x),
                })
                .collect();
            series.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let members = model
                .members(j)
                .into_iter()
                .map(|(t, d)| (t.to_owned(), d))
                .collect();
            ClusterProfile {
                cluster: j,
                series,
                members,
            }
        })
        .collect())
}

fn is_nominal(tag: &str) -> bool {
    tag.eq_ignore_ascii_case("NOUN") || tag.eq_ignore_ascii_case("PROPN")
}

/// Keeps terms tagged NOUN or PROPN in more than half of their tagged
/// occurrences. With `enabled` false the terms pass through untouched.
pub fn filter_pos(
    terms: &[String],
    documents: &[Document],
    config: &NormalizationConfig,
    enabled: bool,
) -> Result<Vec<String>> {
    if !enabled {
        return Ok(terms.to_vec());
    }
    let mut tally: HashMap<&str, (usize, usize)> = terms.iter().map(|t| (t.as_str(), (0, 0))).collect();
    let mut any_tags = false;
    for doc in documents {
        let Some(tagged) = doc.tagged_terms(config) else {
            continue;
        };
        any_tags = true;
        for (term, tag) in tagged {
            if let Some((nominal, total)) = tally.get_mut(term.as_str()) {
                *total += 1;
                if is_nominal(tag) {
                    *nominal += 1;
                }
            }
        }
    }
    if !any_tags {
        return Err(Error::Input(
            "POS filtering requested but no document carries lemmas and pos_tags".into(),
        ));
    }
    Ok(terms
        .iter()
        .filter(|t| {
            let (nominal, total) = tally[t.as_str()];
            if total == 0 {
                warn!("`{t}` never occurs in tagged documents; dropped by the POS filter");
            }
            2 * nominal > total
        })
        .cloned()
        .collect())
}

pub fn write_vectors<W: Write>(vectors: &[PerturbationVector], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = vectors.first().map_or(0, |v| v.scores.len());
    let mut header = vec!["term".to_owned()];
    header.extend((1..=d).map(|i| format!("t{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for v in vectors {
        let mut row = vec![v.term.clone()];
        row.extend(v.scores.iter().map(f64::to_string));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_vectors(text: &str, source: &str) -> Result<Vec<PerturbationVector>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let parse_err = |message: String| Error::Parse {
            path: source.to_owned(),
            line,
            message,
        };
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        let term = rec.get(0).unwrap_or_default().to_owned();
        let scores = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>().map_err(|_| parse_err(format!("bad score `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(PerturbationVector { term, scores });
    }
    Ok(out)
}

/// `term,cluster,distance`, grouped by cluster and nearest-first.
pub fn write_assignments<W: Write>(model: &ClusterModel, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["term", "cluster", "distance"]).map_err(csv_err)?;
    for j in 0..model.k {
        for (term, d) in model.members(j) {
            w.write_record([term, &j.to_string(), &d.to_string()]).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_assignments(text: &str, source: &str) -> Result<BTreeMap<String, usize>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = BTreeMap::new();
    for (i, rec) in r.records().enumerate() {
        let parse_err = |message: String| Error::Parse {
            path: source.to_owned(),
            line: i + 2,
            message,
        };
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        let (Some(term), Some(c)) = (rec.get(0), rec.get(1)) else {
            return Err(parse_err("expected `term,cluster,...`".into()));
        };
        let c: usize = c.parse().map_err(|_| parse_err(format!("bad cluster id `{c}`")))?;
        if out.insert(term.to_owned(), c).is_some() {
            return Err(parse_err(format!("term `{term}` assigned twice")));
        }
    }
    Ok(out)
}

/// Long-format series: `cluster,point,baseline,score`.
pub fn write_profiles<W: Write>(profiles: &[ClusterProfile], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["cluster", "point", "baseline", "score"]).map_err(csv_err)?;
    for p in profiles {
        for (i, (b, s)) in p.series.iter().enumerate() {
            w.write_record([
                p.cluster.to_string(),
                i.to_string(),
                b.to_string(),
                s.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Input(format!("csv: {other:?}")),
    }
}
