//! Dataset transforms for bias mitigation: deletion of instances containing
//! target terms, substitution of those terms with an unknown-token marker,
//! and per-term label-balanced selection for further tuning.

use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, Write};

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{normalize, normalize_token, CountryCode, NormalizationConfig};
use crate::error::{Error, Result};

/// Ratings at or above this are toxic.
pub const TOXIC_RATING: f64 = 0.5;

/// Minimum toxic and non-toxic instances a term needs to be evaluated.
pub const MIN_INSTANCES_PER_LABEL: usize = 10;

/// One instance of a labeled training or evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledExample {
    pub id: String,
    pub text: String,
    pub toxicity_rating: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub country: Option<CountryCode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_score: Option<f64>,
}

impl LabeledExample {
    pub fn new(id: impl Into<String>, text: impl Into<String>, toxicity_rating: f64) -> Self {
        LabeledExample {
            id: id.into(),
            text: text.into(),
            toxicity_rating,
            country: None,
            model_score: None,
        }
    }

    pub fn is_toxic(&self) -> bool {
        self.toxicity_rating >= TOXIC_RATING
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("toxicity_rating", Some(self.toxicity_rating)), ("model_score", self.model_score)] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Input(format!(
                        "example `{}`: {name} {v} outside [0, 1]",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Reads newline-delimited JSON examples, rejecting duplicate ids.
pub fn read_examples<R: BufRead>(input: R, source: &str) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: source.to_owned(),
            line: i + 1,
            message,
        };
        let ex: LabeledExample = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        ex.validate().map_err(|e| parse_err(e.to_string()))?;
        if !ids.insert(ex.id.clone()) {
            return Err(parse_err(format!("duplicate id `{}`", ex.id)));
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn write_examples<W: Write>(examples: &[LabeledExample], mut out: W) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Deletion,
    Substitution,
    BalanceTune,
}

/// Per-label quota for balanced selection given m toxic and n non-toxic
/// instances of a term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuotaFormula {
    /// max(k, min(m, n))
    #[default]
    Max,
    /// min(k, min(m, n))
    Min,
}

impl QuotaFormula {
    pub fn quota(self, m: usize, n: usize, k: usize) -> usize {
        match self {
            QuotaFormula::Max => k.max(m.min(n)),
            QuotaFormula::Min => k.min(m.min(n)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MitigationSpec {
    pub strategy: Strategy,
    pub target_terms: Vec<String>,
    pub unk_token: String,
    pub k: usize,
    pub seed: u64,
    pub quota_formula: QuotaFormula,
}

impl Default for MitigationSpec {
    fn default() -> Self {
        MitigationSpec {
            strategy: Strategy::BalanceTune,
            target_terms: Vec::new(),
            unk_token: "<UNK>".into(),
            k: 100,
            seed: 0,
            quota_formula: QuotaFormula::Max,
        }
    }
}

impl MitigationSpec {
    pub fn validate(&self) -> Result<()> {
        match self.strategy {
            Strategy::BalanceTune if self.k == 0 => {
                Err(Error::Config("balance_tune needs k >= 1".into()))
            }
            Strategy::Substitution if self.unk_token.trim().is_empty() => {
                Err(Error::Config("substitution needs a non-empty unk_token".into()))
            }
            _ => Ok(()),
        }
    }
}

fn term_sets(dataset: &[LabeledExample], config: &NormalizationConfig) -> Vec<HashSet<String>> {
    dataset
        .iter()
        .map(|ex| normalize(&ex.text, config).into_iter().collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermSupport {
    pub term: String,
    pub toxic: usize,
    pub nontoxic: usize,
}

/// Toxic and non-toxic instance counts containing each term.
pub fn term_support(
    dataset: &[LabeledExample],
    terms: &[String],
    config: &NormalizationConfig,
) -> Vec<TermSupport> {
    let sets = term_sets(dataset, config);
    terms
        .iter()
        .map(|t| {
            let (mut toxic, mut nontoxic) = (0, 0);
            for (ex, set) in dataset.iter().zip(&sets) {
                if set.contains(t) {
                    if ex.is_toxic() {
                        toxic += 1;
                    } else {
                        nontoxic += 1;
                    }
                }
            }
            TermSupport {
                term: t.clone(),
                toxic,
                nontoxic,
            }
        })
        .collect()
}

/// Candidates with at least ten toxic and ten non-toxic containing
/// instances, in input order.
pub fn eligible_terms(
    dataset: &[LabeledExample],
    candidates: &[String],
    config: &NormalizationConfig,
) -> Vec<String> {
    term_support(dataset, candidates, config)
        .into_iter()
        .filter(|s| s.toxic >= MIN_INSTANCES_PER_LABEL && s.nontoxic >= MIN_INSTANCES_PER_LABEL)
        .map(|s| s.term)
        .collect()
}

/// Drops every instance containing any of `terms`.
pub fn apply_deletion(
    dataset: &[LabeledExample],
    terms: &[String],
    config: &NormalizationConfig,
) -> Vec<LabeledExample> {
    let targets: HashSet<&str> = terms.iter().map(String::as_str).collect();
    let out: Vec<LabeledExample> = dataset
        .iter()
        .filter(|ex| {
            !normalize(&ex.text, config)
                .iter()
                .any(|t| targets.contains(t.as_str()))
        })
        .cloned()
        .collect();
    if out.is_empty() && !dataset.is_empty() {
        warn!("deletion removed all {} instances", dataset.len());
    }
    out
}

/// Replaces the alphabetic core of each matching token in `text`, keeping
/// surrounding punctuation and whitespace.
pub fn substitute_text(
    text: &str,
    targets: &HashSet<&str>,
    unk_token: &str,
    config: &NormalizationConfig,
) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for (start, token) in token_spans(text) {
        let Some(term) = normalize_token(token, config) else {
            continue;
        };
        if !targets.contains(term.as_str()) {
            continue;
        }
        let first = token.char_indices().find(|(_, c)| c.is_alphabetic());
        let end = token
            .char_indices()
            .rev()
            .find(|(_, c)| c.is_alphabetic())
            .map(|(i, c)| i + c.len_utf8());
        let (Some((a, _)), Some(b)) = (first, end) else {
            continue;
        };
        out.push_str(&text[last..start + a]);
        out.push_str(unk_token);
        last = start + b;
    }
    out.push_str(&text[last..]);
    out
}

fn token_spans(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut rest = 0;
    std::iter::from_fn(move || {
        let tail = &text[rest..];
        let skip = tail.find(|c: char| !c.is_whitespace())?;
        let start = rest + skip;
        let len = text[start..].find(char::is_whitespace).unwrap_or(text.len() - start);
        rest = start + len;
        Some((start, &text[start..start + len]))
    })
}

/// Replaces every occurrence of `terms` with `unk_token`. Labels and
/// instance count are unchanged.
pub fn apply_substitution(
    dataset: &[LabeledExample],
    terms: &[String],
    unk_token: &str,
    config: &NormalizationConfig,
) -> Vec<LabeledExample> {
    let targets: HashSet<&str> = terms.iter().map(String::as_str).collect();
    dataset
        .iter()
        .map(|ex| LabeledExample {
            text: substitute_text(&ex.text, &targets, unk_token, config),
            ..ex.clone()
        })
        .collect()
}

/// Outcome of balanced selection for one term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancedSelection {
    pub term: String,
    /// Toxic instances containing the term.
    pub m: usize,
    /// Non-toxic instances containing the term.
    pub n: usize,
    pub quota: usize,
    pub toxic_ids: Vec<String>,
    pub nontoxic_ids: Vec<String>,
}

impl BalancedSelection {
    /// Set when a label had fewer instances than the quota.
    pub fn shortfall(&self) -> Option<String> {
        if self.m >= self.quota && self.n >= self.quota {
            return None;
        }
        Some(format!(
            "`{}`: quota {} per label but only {} toxic and {} non-toxic available; took {} and {}",
            self.term,
            self.quota,
            self.m,
            self.n,
            self.toxic_ids.len(),
            self.nontoxic_ids.len()
        ))
    }
}

fn sample_key(seed: u64, term: &str, id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((term.len() as u64).to_le_bytes());
    h.update(term.as_bytes());
    h.update(id.as_bytes());
    h.finalize().into()
}

/// Picks `q` of `ids` uniformly without replacement: the ones with the
/// smallest keyed hashes. Independent of input order.
fn sample_ids(ids: &[&str], q: usize, seed: u64, term: &str) -> Vec<String> {
    let mut keyed: Vec<([u8; 32], &str)> = ids.iter().map(|id| (sample_key(seed, term, id), *id)).collect();
    keyed.sort_unstable();
    keyed.truncate(q);
    let mut out: Vec<String> = keyed.into_iter().map(|(_, id)| id.to_owned()).collect();
    out.sort();
    out
}

/// Selects up to the quota of toxic and of non-toxic instances containing
/// `term`, capped at what is available.
pub fn select_balanced(
    dataset: &[LabeledExample],
    term: &str,
    k: usize,
    seed: u64,
    formula: QuotaFormula,
    config: &NormalizationConfig,
) -> BalancedSelection {
    let mut toxic = Vec::new();
    let mut nontoxic = Vec::new();
    for ex in dataset {
        if normalize(&ex.text, config).iter().any(|t| t == term) {
            if ex.is_toxic() {
                toxic.push(ex.id.as_str());
            } else {
                nontoxic.push(ex.id.as_str());
            }
        }
    }
    let (m, n) = (toxic.len(), nontoxic.len());
    let quota = formula.quota(m, n, k);
    let sel = BalancedSelection {
        term: term.to_owned(),
        m,
        n,
        quota,
        toxic_ids: sample_ids(&toxic, quota, seed, term),
        nontoxic_ids: sample_ids(&nontoxic, quota, seed, term),
    };
    if let Some(msg) = sel.shortfall() {
        warn!("{msg}");
    }
    sel
}

/// Union of the balanced selections for all terms, deduplicated by id, in
/// dataset order.
pub fn apply_balance_tune(
    dataset: &[LabeledExample],
    terms: &[String],
    k: usize,
    seed: u64,
    formula: QuotaFormula,
    config: &NormalizationConfig,
) -> (Vec<LabeledExample>, Vec<BalancedSelection>) {
    let selections: Vec<BalancedSelection> = terms
        .iter()
        .map(|t| select_balanced(dataset, t, k, seed, formula, config))
        .collect();
    let chosen: BTreeSet<&str> = selections
        .iter()
        .flat_map(|s| s.toxic_ids.iter().chain(&s.nontoxic_ids))
        .map(String::as_str)
        .collect();
    let out = dataset
        .iter()
        .filter(|ex| chosen.contains(ex.id.as_str()))
        .cloned()
        .collect();
    (out, selections)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationOutcome {
    pub examples: Vec<LabeledExample>,
    pub selections: Vec<BalancedSelection>,
    pub diagnostics: Vec<String>,
}

/// Runs the transform named by `spec`.
pub fn apply(
    dataset: &[LabeledExample],
    spec: &MitigationSpec,
    config: &NormalizationConfig,
) -> Result<MitigationOutcome> {
    spec.validate()?;
    let terms = &spec.target_terms;
    let mut diagnostics = Vec::new();
    let (examples, selections) = match spec.strategy {
        Strategy::Deletion => {
            let out = apply_deletion(dataset, terms, config);
            if out.is_empty() && !dataset.is_empty() {
                diagnostics.push(format!("deletion removed all {} instances", dataset.len()));
            }
            (out, Vec::new())
        }
        Strategy::Substitution => (apply_substitution(dataset, terms, &spec.unk_token, config), Vec::new()),
        Strategy::BalanceTune => {
            let (out, sel) = apply_balance_tune(dataset, terms, spec.k, spec.seed, spec.quota_formula, config);
            diagnostics.extend(sel.iter().filter_map(BalancedSelection::shortfall));
            (out, sel)
        }
    };
    Ok(MitigationOutcome {
        examples,
        selections,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
    use proptest::strategy::Strategy as _;

    fn cfg() -> NormalizationConfig {
        NormalizationConfig::default()
    }

    fn ex(id: &str, text: &str, rating: f64) -> LabeledExample {
        LabeledExample::new(id, text, rating)
    }

    fn terms(t: &[&str]) -> Vec<String> {
        t.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn quota_formula() {
        assert_eq!(QuotaFormula::Max.quota(30, 12, 10), 12);
        assert_eq!(QuotaFormula::Max.quota(200, 150, 100), 150);
        assert_eq!(QuotaFormula::Max.quota(15, 12, 100), 100);
        assert_eq!(QuotaFormula::Min.quota(15, 12, 100), 12);
        assert_eq!(QuotaFormula::Min.quota(200, 150, 100), 100);
    }

    #[test]
    fn eligibility_threshold() {
        let mut data = Vec::new();
        for i in 0..12 {
            data.push(ex(&format!("a{i}"), "alpha here", 0.9));
        }
        for i in 0..10 {
            data.push(ex(&format!("b{i}"), "alpha there", 0.1));
        }
        for i in 0..9 {
            data.push(ex(&format!("c{i}"), "beta", 0.7));
        }
        for i in 0..100 {
            data.push(ex(&format!("d{i}"), "beta", 0.2));
        }
        assert_eq!(eligible_terms(&data, &terms(&["alpha", "beta"]), &cfg()), vec!["alpha"]);
    }

    #[test]
    fn deletion_edge_cases() {
        let data = vec![ex("1", "nothing here", 0.1), ex("2", "still nothing", 0.9)];
        assert_eq!(apply_deletion(&data, &terms(&["sanghi"]), &cfg()), data);
        let all = vec![ex("1", "sanghi", 0.1), ex("2", "SANGHI!", 0.9)];
        assert!(apply_deletion(&all, &terms(&["sanghi"]), &cfg()).is_empty());
        let spec = MitigationSpec {
            strategy: Strategy::Deletion,
            target_terms: terms(&["sanghi"]),
            ..Default::default()
        };
        assert_eq!(apply(&all, &spec, &cfg()).unwrap().diagnostics.len(), 1);
    }

    #[test]
    fn substitution_replaces_spans() {
        let t = terms(&["sanghi"]);
        let data = vec![
            ex("1", "he is a sanghi", 0.8),
            ex("2", "Sanghi, SANGHI!  and  (sanghi's)", 0.3),
            ex("3", "#sanghi stays, sanghiya stays", 0.3),
        ];
        let out = apply_substitution(&data, &t, "<UNK>", &cfg());
        assert_eq!(out[0].text, "he is a <UNK>");
        assert_eq!(out[1].text, "<UNK>, <UNK>!  and  (sanghi's)");
        assert_eq!(out[2].text, "#sanghi stays, sanghiya stays");
        assert_eq!(out.len(), 3);
        for (a, b) in data.iter().zip(&out) {
            assert_eq!(a.toxicity_rating, b.toxicity_rating);
        }
    }

    fn pool(m: usize, n: usize) -> Vec<LabeledExample> {
        let mut data = Vec::new();
        for i in 0..m {
            data.push(ex(&format!("t{i}"), "the word", 0.9));
        }
        for i in 0..n {
            data.push(ex(&format!("n{i}"), "a word", 0.1));
        }
        for i in 0..50 {
            data.push(ex(&format!("o{i}"), "other", if i % 2 == 0 { 0.9 } else { 0.1 }));
        }
        data
    }

    #[test]
    fn balanced_quota_and_capping() {
        let s = select_balanced(&pool(30, 12), "word", 10, 1, QuotaFormula::Max, &cfg());
        assert_eq!((s.quota, s.toxic_ids.len(), s.nontoxic_ids.len()), (12, 12, 12));
        assert!(s.shortfall().is_none());
        let s = select_balanced(&pool(200, 150), "word", 100, 1, QuotaFormula::Max, &cfg());
        assert_eq!((s.quota, s.toxic_ids.len(), s.nontoxic_ids.len()), (150, 150, 150));
        let s = select_balanced(&pool(15, 12), "word", 100, 1, QuotaFormula::Max, &cfg());
        assert_eq!((s.quota, s.toxic_ids.len(), s.nontoxic_ids.len()), (100, 15, 12));
        assert!(s.shortfall().is_some());
    }

    #[test]
    fn balanced_selection_is_seeded() {
        let data = pool(60, 40);
        let a = select_balanced(&data, "word", 20, 7, QuotaFormula::Min, &cfg());
        let b = select_balanced(&data, "word", 20, 7, QuotaFormula::Min, &cfg());
        let c = select_balanced(&data, "word", 20, 8, QuotaFormula::Min, &cfg());
        assert_eq!(a, b);
        assert_ne!(a.toxic_ids, c.toxic_ids);
        let mut rev = data.clone();
        rev.reverse();
        assert_eq!(a, select_balanced(&rev, "word", 20, 7, QuotaFormula::Min, &cfg()));
    }

    #[test]
    fn union_is_deduplicated() {
        let data = vec![
            ex("1", "alpha beta", 0.9),
            ex("2", "alpha beta", 0.1),
            ex("3", "beta", 0.9),
        ];
        let (out, sel) = apply_balance_tune(&data, &terms(&["alpha", "beta"]), 5, 0, QuotaFormula::Max, &cfg());
        assert_eq!(sel.len(), 2);
        let ids: Vec<&str> = out.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, vec!["1", "2", "3"]);
    }

    #[test]
    fn spec_validation() {
        let bad = MitigationSpec {
            strategy: Strategy::Substitution,
            unk_token: " ".into(),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = MitigationSpec {
            k: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let mut e = ex("1", "x", 0.25);
        e.model_score = Some(0.5);
        let mut buf = Vec::new();
        write_examples(&[e.clone()], &mut buf).unwrap();
        assert_eq!(read_examples(&buf[..], "d").unwrap(), vec![e]);
        assert!(read_examples(&b"{\"id\":\"1\",\"text\":\"x\",\"toxicity_rating\":2}\n"[..], "d").is_err());
    }

    fn dataset() -> impl proptest::strategy::Strategy<Value = Vec<LabeledExample>> {
        let word = prop::sample::select(vec!["cat", "dog", "cats", "Dog!", "bird", "#dog", "x1"]);
        prop::collection::vec((prop::collection::vec(word, 0..5), 0.0..=1.0f64), 0..30).prop_map(|rows| {
            rows.into_iter()
                .enumerate()
                .map(|(i, (w, r))| ex(&format!("e{i}"), &w.join(" "), r))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn deletion_leaves_no_targets(data in dataset()) {
            let t = terms(&["dog", "cat"]);
            let out = apply_deletion(&data, &t, &cfg());
            for e in &out {
                let toks = normalize(&e.text, &cfg());
                prop_assert!(!toks.iter().any(|x| x == "dog" || x == "cat"));
            }
            let mut shuffled = data.clone();
            shuffled.reverse();
            let mut a: Vec<_> = out.iter().map(|e| e.id.clone()).collect();
            let mut b: Vec<_> = apply_deletion(&shuffled, &t, &cfg()).iter().map(|e| e.id.clone()).collect();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn substitution_removes_targets_and_keeps_labels(data in dataset()) {
            let t = terms(&["dog"]);
            let out = apply_substitution(&data, &t, "<UNK>", &cfg());
            prop_assert_eq!(out.len(), data.len());
            for (a, b) in data.iter().zip(&out) {
                prop_assert_eq!(a.toxicity_rating, b.toxicity_rating);
                prop_assert!(!normalize(&b.text, &cfg()).iter().any(|x| x == "dog"));
            }
        }
    }
}
