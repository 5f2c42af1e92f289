//! Seeded synthetic data: multi-country corpora with planted terms, mock
//! lexicons producing the four perturbation archetypes, and labeled
//! datasets for metrics and mitigation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{normalize, write_documents, CountryCode, Document};
use crate::error::{Error, Result};
use crate::hashing::{fnv1a, splitmix64};
use crate::mitigation::{write_examples, LabeledExample};
use crate::perturbation::{TemplateSet, PLACEHOLDER};
use crate::pipeline::{RunConfig, ScoreSource};
use crate::scorer::{logistic, mock_normalization, MockLexicon, MockScorer, Scorer};

const LETTERS: &[u8] = b"abcdefghijklmnopqrtuvwxyz";

/// A lowercase alphabetic word unique to (`prefix`, `i`). The alphabet has
/// no `s`, so no plural rule touches it.
pub fn word(prefix: &str, i: usize) -> String {
    let mut out = prefix.to_owned();
    let mut tail = Vec::new();
    let mut n = i;
    loop {
        tail.push(LETTERS[n % LETTERS.len()]);
        n /= LETTERS.len();
        if n == 0 {
            break;
        }
    }
    tail.reverse();
    out.push_str(std::str::from_utf8(&tail).expect("ascii"));
    out
}

fn rng_for(seed: u64, stream: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv1a(stream)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub countries: Vec<CountryCode>,
    pub docs_per_country: usize,
    /// Exact share of each country's documents that are toxic.
    pub toxic_fraction: f64,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Country-specific terms, assigned to countries round-robin.
    pub planted_terms: usize,
    /// Per-document probability of a planted term in its country's toxic
    /// documents.
    pub planted_toxic_rate: f64,
    /// Toxic rate over the rate everywhere else.
    pub planted_ratio: f64,
    pub global_profanities: usize,
    /// Occurrences of each profanity in every country's toxic documents.
    pub profanity_count: usize,
    pub profanity_nontoxic_rate: f64,
    /// Share of documents decorated with a URL, hashtag or number.
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            countries: ["IN", "NG", "MX"].iter().map(|c| CountryCode::new(c).expect("valid")).collect(),
            docs_per_country: 50_000,
            toxic_fraction: 0.2,
            vocab_size: 2_000,
            min_len: 6,
            max_len: 14,
            planted_terms: 10,
            planted_toxic_rate: 0.02,
            planted_ratio: 10.0,
            global_profanities: 5,
            profanity_count: 300,
            profanity_nontoxic_rate: 0.0005,
            noise_rate: 0.05,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in [0, 1], got {v}")))
            }
        };
        prob("toxic_fraction", self.toxic_fraction)?;
        prob("planted_toxic_rate", self.planted_toxic_rate)?;
        prob("profanity_nontoxic_rate", self.profanity_nontoxic_rate)?;
        prob("noise_rate", self.noise_rate)?;
        if self.countries.is_empty() || self.vocab_size == 0 || self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("corpus spec needs countries, a vocabulary and 1 <= min_len <= max_len".into()));
        }
        if self.planted_ratio.is_nan() || self.planted_ratio < 1.0 {
            return Err(Error::Config("planted_ratio must be >= 1".into()));
        }
        let toxic = (self.docs_per_country as f64 * self.toxic_fraction).round() as usize;
        if self.profanity_count > toxic {
            return Err(Error::Config(format!(
                "profanity_count {} exceeds the {toxic} toxic documents per country",
                self.profanity_count
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub documents: Vec<Document>,
    /// Country -> terms planted there.
    pub planted: BTreeMap<CountryCode, Vec<String>>,
    pub profanities: Vec<String>,
}

/// Generates a corpus in which background words are identically
/// distributed everywhere, planted terms are overrepresented in one
/// country's toxic documents, and profanities occur equally often in every
/// country's toxic documents.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let vocab: Vec<String> = (0..spec.vocab_size).map(|i| word("w", i)).collect();
    let zipf = WeightedIndex::new((1..=spec.vocab_size).map(|r| 1.0 / r as f64)).expect("positive weights");
    let profanities: Vec<String> = (0..spec.global_profanities).map(|i| word("prof", i)).collect();
    let mut planted: BTreeMap<CountryCode, Vec<String>> =
        spec.countries.iter().map(|c| (c.clone(), Vec::new())).collect();
    let mut home = Vec::new();
    for i in 0..spec.planted_terms {
        let c = &spec.countries[i % spec.countries.len()];
        let t = word("plant", i);
        planted.get_mut(c).expect("country present").push(t.clone());
        home.push((t, c.clone()));
    }
    let base_rate = spec.planted_toxic_rate / spec.planted_ratio;
    let n_toxic = (spec.docs_per_country as f64 * spec.toxic_fraction).round() as usize;

    let mut documents = Vec::with_capacity(spec.docs_per_country * spec.countries.len());
    for country in &spec.countries {
        let mut rng = rng_for(spec.seed, country.as_str());
        let mut profane_slots = vec![Vec::new(); n_toxic];
        for p in &profanities {
            for d in index::sample(&mut rng, n_toxic, spec.profanity_count) {
                profane_slots[d].push(p.as_str());
            }
        }
        for i in 0..spec.docs_per_country {
            let profane = profane_slots.get(i);
            let toxic = profane.is_some();
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let mut tokens: Vec<&str> = (0..len).map(|_| vocab[zipf.sample(&mut rng)].as_str()).collect();
            for (t, c) in &home {
                let rate = if toxic && c == country { spec.planted_toxic_rate } else { base_rate };
                if rng.gen_bool(rate) {
                    tokens.push(t);
                }
            }
            if let Some(slot) = profane {
                tokens.extend(slot.iter().copied());
            } else {
                for p in &profanities {
                    if rng.gen_bool(spec.profanity_nontoxic_rate) {
                        tokens.push(p);
                    }
                }
            }
            tokens.shuffle(&mut rng);
            let mut text = tokens.join(" ");
            if rng.gen_bool(spec.noise_rate) {
                let noise = ["https://t.co/x1", "#trending", "@someone", "2024", "!!"];
                text.push(' ');
                text.push_str(noise[rng.gen_range(0..noise.len())]);
            }
            if i % 7 == 0 {
                text = capitalize_first(&text);
            }
            let score = if toxic {
                0.5 + 0.5 * rng.gen::<f64>()
            } else {
                0.4999 * rng.gen::<f64>()
            };
            documents.push(Document::new(format!("{country}-{i:06}"), text, country.clone()).with_score(score));
        }
    }
    Ok(SyntheticCorpus {
        documents,
        planted,
        profanities,
    })
}

fn capitalize_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Permutes model scores among each country's documents.
pub fn shuffle_labels(documents: &mut [Document], seed: u64) {
    let mut by_country: BTreeMap<CountryCode, Vec<usize>> = BTreeMap::new();
    for (i, d) in documents.iter().enumerate() {
        by_country.entry(d.country.clone()).or_default().push(i);
    }
    for (country, idx) in by_country {
        let mut rng = rng_for(seed, &format!("shuffle-{country}"));
        let mut scores: Vec<Option<f64>> = idx.iter().map(|&i| documents[i].model_score).collect();
        scores.shuffle(&mut rng);
        for (&i, s) in idx.iter().zip(scores) {
            documents[i].model_score = s;
        }
    }
}

/// Generates `n` short documents for throughput runs.
pub fn short_documents(n: usize, countries: &[CountryCode], seed: u64) -> Vec<Document> {
    let vocab: Vec<String> = (0..5_000).map(|i| word("w", i)).collect();
    let zipf = WeightedIndex::new((1..=vocab.len()).map(|r| 1.0 / r as f64)).expect("positive weights");
    let mut rng = rng_for(seed, "short");
    (0..n)
        .map(|i| {
            let len = rng.gen_range(4..=12);
            let text = (0..len).map(|_| vocab[zipf.sample(&mut rng)].as_str()).collect::<Vec<_>>().join(" ");
            let country = countries[i % countries.len()].clone();
            Document::new(format!("d{i}"), text, country).with_score(rng.gen())
        })
        .collect()
}

/// The behavior a synthetic term's mock weight produces under template
/// perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    /// Every template scores near 1.
    Saturating,
    /// Raises scores, most strongly at mid-range baselines.
    MidRaising,
    /// Raises low baselines a little and converges to the diagonal.
    WeakRaising,
    /// Leaves scores at their baselines.
    Null,
}

impl Archetype {
    pub const ALL: [Archetype; 4] = [
        Archetype::Saturating,
        Archetype::MidRaising,
        Archetype::WeakRaising,
        Archetype::Null,
    ];

    /// Range of the mock weight drawn for this archetype.
    pub fn weight_range(self) -> (f64, f64) {
        match self {
            Archetype::Saturating => (7.0, 9.0),
            Archetype::MidRaising => (2.2, 2.8),
            Archetype::WeakRaising => (0.8, 1.2),
            Archetype::Null => (-0.2, 0.2),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Archetype::Saturating => "saturating",
            Archetype::MidRaising => "mid_raising",
            Archetype::WeakRaising => "weak_raising",
            Archetype::Null => "null",
        }
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// A mock lexicon whose template scores approximate the templates'
/// baselines. Weights are the minimum-norm solution of the logit-space
/// linear system, found by Kaczmarz iteration.
pub fn template_lexicon(templates: &TemplateSet, bias: f64) -> MockLexicon {
    let cfg = mock_normalization();
    let rows: Vec<(Vec<String>, f64)> = templates
        .iter()
        .map(|t| {
            let text = t.pattern().replace(PLACEHOLDER, " ");
            let target = logit(t.baseline_score().clamp(1e-4, 1.0 - 1e-4)) - bias;
            (normalize(&text, &cfg), target)
        })
        .collect();
    let mut weights: BTreeMap<String, f64> = BTreeMap::new();
    for _ in 0..2_000 {
        for (tokens, target) in &rows {
            if tokens.is_empty() {
                continue;
            }
            let current: f64 = tokens.iter().map(|t| weights.get(t).copied().unwrap_or(0.0)).sum();
            // tokens repeat within a template, so the row norm counts multiplicity
            let mut counts: BTreeMap<&str, f64> = BTreeMap::new();
            for t in tokens {
                *counts.entry(t).or_default() += 1.0;
            }
            let norm: f64 = counts.values().map(|c| c * c).sum();
            let step = (target - current) / norm;
            for (t, c) in counts {
                *weights.entry(t.to_owned()).or_default() += step * c;
            }
        }
    }
    MockLexicon { bias, weights }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchetypeTerm {
    pub term: String,
    pub archetype: Archetype,
    pub weight: f64,
}

/// `per_archetype` terms of each archetype with weights drawn uniformly
/// from the archetype's range.
pub fn archetype_terms(per_archetype: usize, seed: u64) -> Vec<ArchetypeTerm> {
    let mut rng = rng_for(seed, "archetypes");
    let mut out = Vec::with_capacity(4 * per_archetype);
    for a in Archetype::ALL {
        let (lo, hi) = a.weight_range();
        for _ in 0..per_archetype {
            out.push(ArchetypeTerm {
                term: word("zq", out.len()),
                archetype: a,
                weight: rng.gen_range(lo..=hi),
            });
        }
    }
    out
}

/// The template lexicon plus a weight for each archetype term.
pub fn archetype_lexicon(templates: &TemplateSet, terms: &[ArchetypeTerm]) -> MockLexicon {
    let mut lex = template_lexicon(templates, -3.0);
    for t in terms {
        lex.weights.insert(t.term.clone(), t.weight);
    }
    lex
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabeledSpec {
    pub n: usize,
    pub terms: Vec<String>,
    /// Per-instance probability of containing each term.
    pub term_rate: f64,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for LabeledSpec {
    fn default() -> Self {
        LabeledSpec {
            n: 10_000,
            terms: (0..8).map(|i| word("term", i)).collect(),
            term_rate: 0.05,
            vocab_size: 500,
            seed: 0,
        }
    }
}

/// A labeled dataset. Ratings lean toxic for instances containing earlier
/// terms in `spec.terms`; model scores come from `scorer` when given.
pub fn generate_labeled<S: Scorer + ?Sized>(spec: &LabeledSpec, scorer: Option<&S>) -> Result<Vec<LabeledExample>> {
    if !(0.0..=1.0).contains(&spec.term_rate) || spec.vocab_size == 0 {
        return Err(Error::Config("labeled spec needs term_rate in [0, 1] and a vocabulary".into()));
    }
    let vocab: Vec<String> = (0..spec.vocab_size).map(|i| word("v", i)).collect();
    let mut rng = rng_for(spec.seed, "labeled");
    let mut out = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let len = rng.gen_range(3..=10);
        let mut tokens: Vec<String> = (0..len).map(|_| vocab[rng.gen_range(0..vocab.len())].clone()).collect();
        let mut lean = 0.0;
        for (j, t) in spec.terms.iter().enumerate() {
            if rng.gen_bool(spec.term_rate) {
                let mut tok = t.clone();
                match rng.gen_range(0..4) {
                    0 => tok = capitalize_first(&tok),
                    1 => tok.push('!'),
                    _ => {}
                }
                tokens.push(tok);
                lean += 0.3 * (1.0 - j as f64 / spec.terms.len().max(1) as f64);
            }
        }
        tokens.shuffle(&mut rng);
        let u: f64 = rng.gen();
        let rating = (u * 0.8 + lean).clamp(0.0, 1.0);
        out.push(LabeledExample::new(format!("ex{i:06}"), tokens.join(" "), rating));
    }
    if let Some(s) = scorer {
        let texts: Vec<String> = out.iter().map(|e| e.text.clone()).collect();
        for (e, r) in out.iter_mut().zip(s.score_batch(&texts)) {
            e.model_score = Some(r?);
        }
    }
    Ok(out)
}

/// A logistic score for a text under the mock lexicon: convenience for
/// callers that only need the number.
pub fn mock_score(lexicon: &MockLexicon, text: &str) -> f64 {
    let cfg = mock_normalization();
    logistic(
        lexicon.bias
            + normalize(text, &cfg)
                .iter()
                .filter_map(|t| lexicon.weights.get(t))
                .sum::<f64>(),
    )
}

/// Sizes for [`write_workspace`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkspaceSpec {
    pub docs_per_country: usize,
    pub labeled: usize,
    pub seed: u64,
}

impl Default for WorkspaceSpec {
    fn default() -> Self {
        WorkspaceSpec {
            docs_per_country: 5_000,
            labeled: 5_000,
            seed: 0,
        }
    }
}

/// Writes a runnable example into `dir`: `documents.jsonl`,
/// `dataset.jsonl`, `lexicon.json` and a `config.toml` wiring them to the
/// mock scorer. Planted terms take archetype weights in turn, so phase 2
/// has behaviorally distinct terms to cluster. Returns the config path.
pub fn write_workspace(dir: &Path, spec: &WorkspaceSpec) -> Result<PathBuf> {
    let corpus = generate_corpus(&CorpusSpec {
        docs_per_country: spec.docs_per_country,
        profanity_count: (spec.docs_per_country / 50).max(1),
        seed: spec.seed,
        ..CorpusSpec::default()
    })?;
    let templates = TemplateSet::bundled();
    let mut lexicon = template_lexicon(&templates, -3.0);
    let planted: Vec<String> = corpus.planted.values().flatten().cloned().collect();
    for (i, t) in planted.iter().enumerate() {
        let (lo, hi) = Archetype::ALL[i % Archetype::ALL.len()].weight_range();
        lexicon.weights.insert(t.clone(), (lo + hi) / 2.0);
    }
    for p in &corpus.profanities {
        lexicon.weights.insert(p.clone(), 8.0);
    }
    let scorer = MockScorer::new(lexicon.clone())?;
    let labeled = generate_labeled(
        &LabeledSpec {
            n: spec.labeled,
            terms: planted,
            seed: spec.seed,
            ..LabeledSpec::default()
        },
        Some(&scorer),
    )?;

    fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    write_documents(&corpus.documents, &mut buf)?;
    fs::write(dir.join("documents.jsonl"), buf)?;
    let mut buf = Vec::new();
    write_examples(&labeled, &mut buf)?;
    fs::write(dir.join("dataset.jsonl"), buf)?;
    let mut lex = serde_json::to_vec_pretty(&lexicon)?;
    lex.push(b'\n');
    fs::write(dir.join("lexicon.json"), lex)?;

    let mut config = RunConfig {
        documents: Some("documents.jsonl".into()),
        dataset: Some("dataset.jsonl".into()),
        output_dir: "out".into(),
        seed: spec.seed,
        ..RunConfig::default()
    };
    config.scorer.mock_lexicon = Some("lexicon.json".into());
    config.metrics.score_source = ScoreSource::Dataset;
    let path = dir.join("config.toml");
    fs::write(&path, config.to_toml()?)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::NormalizationConfig;
    use crate::scorer::MockScorer;

    #[test]
    fn words_are_distinct_and_stable() {
        let cfg = NormalizationConfig::default();
        let words: Vec<String> = (0..2000).map(|i| word("w", i)).collect();
        let mut sorted = words.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), words.len());
        for w in &words {
            assert_eq!(normalize(w, &cfg), vec![w.clone()]);
        }
    }

    #[test]
    fn corpus_shape() {
        let spec = CorpusSpec {
            docs_per_country: 2_000,
            profanity_count: 50,
            ..Default::default()
        };
        let c = generate_corpus(&spec).unwrap();
        assert_eq!(c.documents.len(), 6_000);
        assert_eq!(c.planted.values().map(Vec::len).sum::<usize>(), 10);
        assert_eq!(c.planted[&CountryCode::new("IN").unwrap()].len(), 4);
        let cfg = NormalizationConfig::default();
        for country in &spec.countries {
            let toxic = c
                .documents
                .iter()
                .filter(|d| &d.country == country && d.model_score.unwrap() >= 0.5);
            let hits = toxic
                .flat_map(|d| normalize(&d.text, &cfg))
                .filter(|t| t == &c.profanities[0])
                .count();
            assert_eq!(hits, 50);
        }
        assert_eq!(generate_corpus(&spec).unwrap(), c);
    }

    #[test]
    fn shuffle_keeps_per_country_scores() {
        let spec = CorpusSpec {
            docs_per_country: 300,
            profanity_count: 10,
            ..Default::default()
        };
        let c = generate_corpus(&spec).unwrap();
        let mut docs = c.documents.clone();
        shuffle_labels(&mut docs, 3);
        let collect = |d: &[Document]| {
            let mut v: Vec<(String, u64)> = d
                .iter()
                .map(|x| (x.country.to_string(), x.model_score.unwrap().to_bits()))
                .collect();
            v.sort();
            v
        };
        assert_eq!(collect(&docs), collect(&c.documents));
        assert_ne!(docs, c.documents);
    }

    #[test]
    fn template_lexicon_tracks_baselines() {
        let set = TemplateSet::bundled();
        let lex = template_lexicon(&set, -3.0);
        let s = MockScorer::new(lex).unwrap();
        let mut worst: f64 = 0.0;
        for t in &set {
            let got = s.score(&t.instantiate("person").unwrap()).unwrap();
            worst = worst.max((got - t.baseline_score()).abs());
        }
        assert!(worst < 0.02, "max baseline error {worst}");
    }

    #[test]
    fn labeled_dataset() {
        let spec = LabeledSpec {
            n: 500,
            ..Default::default()
        };
        let lex = MockLexicon::new(-1.0).with_weight(spec.terms[0].clone(), 3.0);
        let scorer = MockScorer::new(lex).unwrap();
        let data = generate_labeled(&spec, Some(&scorer)).unwrap();
        assert_eq!(data.len(), 500);
        assert!(data.iter().all(|e| e.validate().is_ok() && e.model_score.is_some()));
        assert_eq!(data, generate_labeled(&spec, Some(&scorer)).unwrap());
        assert_eq!(mock_score(scorer.lexicon(), &data[0].text), data[0].model_score.unwrap());
    }
}
