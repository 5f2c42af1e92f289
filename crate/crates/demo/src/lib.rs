//! Browser bindings for the interactive demo page in `www/`. Every export
//! returns a JSON string; the `*_json` functions behind them are plain Rust
//! so they can be tested natively.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::Serialize;
use wasm_bindgen::prelude::*;

use lexaudit::corpus::CountryCode;
use lexaudit::perturbation::{build_vectors, cluster_profile, cluster_vectors, KMeansParams, TemplateSet, VectorMode};
use lexaudit::saliency::{log_odds_term, overrepresentation_test, OverrepStats, SaliencyConfig, TailReading};
use lexaudit::scorer::{MockLexicon, MockScorer};
use lexaudit::synth::{archetype_lexicon, archetype_terms, template_lexicon, Archetype};

const DEMO_TERM: &str = "zqdemo";

fn templates() -> &'static TemplateSet {
    static T: OnceLock<TemplateSet> = OnceLock::new();
    T.get_or_init(TemplateSet::bundled)
}

fn base_lexicon() -> &'static MockLexicon {
    static L: OnceLock<MockLexicon> = OnceLock::new();
    L.get_or_init(|| template_lexicon(templates(), -3.0))
}

fn to_json(v: &impl Serialize) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[derive(Serialize)]
struct ProfilePoint {
    template: String,
    baseline: f64,
    score: f64,
}

#[derive(Serialize)]
struct TermProfile {
    weight: f64,
    points: Vec<ProfilePoint>,
    mean_shift: f64,
}

/// Scores every template with a term of the given mock weight.
pub fn term_profile_json(weight: f64) -> Result<String, String> {
    if !weight.is_finite() {
        return Err("weight must be finite".into());
    }
    let lexicon = base_lexicon().clone().with_weight(DEMO_TERM, weight);
    let scorer = MockScorer::new(lexicon).map_err(|e| e.to_string())?;
    let (vectors, _) = build_vectors(&[DEMO_TERM.to_owned()], templates(), &scorer).map_err(|e| e.to_string())?;
    let scores = &vectors[0].scores;
    let mut points: Vec<ProfilePoint> = templates()
        .iter()
        .zip(scores)
        .map(|(t, &score)| ProfilePoint {
            template: t.pattern().to_owned(),
            baseline: t.baseline_score(),
            score,
        })
        .collect();
    points.sort_by(|a, b| a.baseline.total_cmp(&b.baseline));
    let mean_shift = points.iter().map(|p| p.score - p.baseline).sum::<f64>() / points.len() as f64;
    to_json(&TermProfile {
        weight,
        points,
        mean_shift,
    })
}

#[derive(Serialize)]
struct ClusterView {
    cluster: usize,
    size: usize,
    /// Members per generating archetype.
    archetypes: BTreeMap<&'static str, usize>,
    series: Vec<(f64, f64)>,
}

#[derive(Serialize)]
struct Clustering {
    k: usize,
    inertia: f64,
    clusters: Vec<ClusterView>,
}

/// Clusters synthetic archetype terms and returns each cluster's profile.
pub fn cluster_archetypes_json(per_archetype: usize, k: usize, seed: u64) -> Result<String, String> {
    if per_archetype == 0 || per_archetype > 200 {
        return Err("per_archetype must be between 1 and 200".into());
    }
    let terms = archetype_terms(per_archetype, seed);
    let scorer = MockScorer::new(archetype_lexicon(templates(), &terms)).map_err(|e| e.to_string())?;
    let names: Vec<String> = terms.iter().map(|t| t.term.clone()).collect();
    let (vectors, _) = build_vectors(&names, templates(), &scorer).map_err(|e| e.to_string())?;
    let params = KMeansParams {
        k,
        seed,
        ..KMeansParams::default()
    };
    let model = cluster_vectors(&vectors, templates(), VectorMode::Raw, &params).map_err(|e| e.to_string())?;
    let profiles = cluster_profile(&model, templates()).map_err(|e| e.to_string())?;
    let archetype_of: BTreeMap<&str, Archetype> = terms.iter().map(|t| (t.term.as_str(), t.archetype)).collect();
    let clusters = profiles
        .into_iter()
        .map(|p| {
            let mut archetypes = BTreeMap::new();
            for (m, _) in &p.members {
                *archetypes.entry(archetype_of[m.as_str()].name()).or_default() += 1;
            }
            ClusterView {
                cluster: p.cluster,
                size: p.members.len(),
                archetypes,
                series: p.series,
            }
        })
        .collect();
    to_json(&Clustering {
        k,
        inertia: model.inertia,
        clusters,
    })
}

#[derive(Serialize)]
struct Statistics {
    delta: f64,
    variance: f64,
    z: f64,
    salient: bool,
    tail_prob: Option<f64>,
    overrepresented: Option<bool>,
}

/// Log-odds for one term plus the Beta-posterior test of a country's share.
#[allow(clippy::too_many_arguments)]
pub fn statistics_json(
    y1: f64,
    n1: f64,
    y2: f64,
    n2: f64,
    alpha_w: f64,
    alpha0: f64,
    k_global: u64,
    n_global: u64,
    k_country: u64,
    n_country: u64,
) -> Result<String, String> {
    if [y1, n1, y2, n2].iter().any(|v| v.is_nan() || *v < 0.0) || !(alpha_w > 0.0 && alpha0 > alpha_w) {
        return Err("counts must be non-negative and 0 < alpha_w < alpha0".into());
    }
    if y1 > n1 || y2 > n2 {
        return Err("a term count exceeds its corpus size".into());
    }
    let config = SaliencyConfig {
        tail: TailReading::Upper,
        ..SaliencyConfig::default()
    };
    let (delta, variance, z) = log_odds_term(y1, n1, y2, n2, alpha_w, alpha0);
    let country = CountryCode::new("XX").map_err(|e| e.to_string())?;
    let stats = OverrepStats {
        k_global,
        n_global,
        k_country,
        n_country,
    };
    let test = overrepresentation_test(DEMO_TERM, &country, stats, &config).map_err(|e| e.to_string())?;
    to_json(&Statistics {
        delta,
        variance,
        z,
        salient: z >= config.z_threshold,
        tail_prob: test.as_ref().map(|t| t.tail_prob),
        overrepresented: test.map(|t| t.significant),
    })
}

#[wasm_bindgen]
pub fn term_profile(weight: f64) -> Result<String, JsValue> {
    js(term_profile_json(weight))
}

#[wasm_bindgen]
pub fn cluster_archetypes(per_archetype: usize, k: usize, seed: u32) -> Result<String, JsValue> {
    js(cluster_archetypes_json(per_archetype, k, u64::from(seed)))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn statistics(
    y1: f64,
    n1: f64,
    y2: f64,
    n2: f64,
    alpha_w: f64,
    alpha0: f64,
    k_global: u32,
    n_global: u32,
    k_country: u32,
    n_country: u32,
) -> Result<String, JsValue> {
    js(statistics_json(
        y1,
        n1,
        y2,
        n2,
        alpha_w,
        alpha0,
        k_global.into(),
        n_global.into(),
        k_country.into(),
        n_country.into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn parse(s: Result<String, String>) -> Value {
        serde_json::from_str(&s.unwrap()).unwrap()
    }

    #[test]
    fn zero_weight_tracks_baselines() {
        let v = parse(term_profile_json(0.0));
        let points = v["points"].as_array().unwrap();
        assert_eq!(points.len(), 33);
        assert!(v["mean_shift"].as_f64().unwrap().abs() < 0.02);
        let baselines: Vec<f64> = points.iter().map(|p| p["baseline"].as_f64().unwrap()).collect();
        assert!(baselines.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn heavy_weight_saturates() {
        let v = parse(term_profile_json(9.0));
        assert!(v["points"].as_array().unwrap().iter().all(|p| p["score"].as_f64().unwrap() > 0.9));
        assert!(term_profile_json(f64::NAN).is_err());
    }

    #[test]
    fn clusters_cover_all_terms() {
        let v = parse(cluster_archetypes_json(10, 4, 1));
        let clusters = v["clusters"].as_array().unwrap();
        assert_eq!(clusters.len(), 4);
        let total: u64 = clusters.iter().map(|c| c["size"].as_u64().unwrap()).sum();
        assert_eq!(total, 40);
        // each cluster drawn from a single archetype
        for c in clusters {
            assert_eq!(c["archetypes"].as_object().unwrap().len(), 1, "{c}");
        }
        assert!(cluster_archetypes_json(2, 9, 0).is_err());
    }

    #[test]
    fn statistics_match_the_library() {
        let v = parse(statistics_json(10.0, 100.0, 2.0, 100.0, 0.5, 1.0, 50, 10_000, 40, 3_000));
        assert!((v["z"].as_f64().unwrap() - 2.1594).abs() < 1e-3);
        assert_eq!(v["salient"], true);
        assert_eq!(v["overrepresented"], true);
        let v = parse(statistics_json(1.0, 10.0, 1.0, 10.0, 0.1, 1.0, 0, 10, 0, 5));
        assert!(v["tail_prob"].is_null());
        assert!(statistics_json(20.0, 10.0, 1.0, 10.0, 0.1, 1.0, 0, 10, 0, 5).is_err());
    }
}
