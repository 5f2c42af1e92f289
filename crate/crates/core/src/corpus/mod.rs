//! Document ingestion, text normalization, country/toxicity partitioning and
//! term counting.

mod counts;
mod normalize;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::thread;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use counts::TermCounts;
pub use normalize::{
    clean_token, normalize, normalize_token, strip_plural, Lemmatizer, NormalizationConfig,
};

use crate::error::{Error, Result};
use crate::hashing::{fnv1a, splitmix64};

/// ISO-3166 alpha-2 country code, stored uppercase.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CountryCode(String);

impl CountryCode {
    pub fn new(code: &str) -> Result<Self> {
        if code.len() == 2 && code.bytes().all(|b| b.is_ascii_alphabetic()) {
            Ok(CountryCode(code.to_ascii_uppercase()))
        } else {
            Err(Error::Input(format!(
                "`{code}` is not an ISO-3166 alpha-2 country code"
            )))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for CountryCode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        CountryCode::new(&s)
    }
}

impl From<CountryCode> for String {
    fn from(c: CountryCode) -> String {
        c.0
    }
}

impl fmt::Display for CountryCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One text unit of the audited corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub country: CountryCode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lemmas: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos_tags: Option<Vec<String>>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>, country: CountryCode) -> Self {
        Document {
            id: id.into(),
            text: text.into(),
            country,
            model_score: None,
            gold_label: None,
            lemmas: None,
            pos_tags: None,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.model_score = Some(score);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.model_score {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Input(format!(
                    "document `{}`: model_score {s} outside [0, 1]",
                    self.id
                )));
            }
        }
        if let (Some(l), Some(p)) = (&self.lemmas, &self.pos_tags) {
            if l.len() != p.len() {
                return Err(Error::Input(format!(
                    "document `{}`: {} lemmas but {} pos_tags",
                    self.id,
                    l.len(),
                    p.len()
                )));
            }
        }
        Ok(())
    }

    /// The document's terms under `config`. Under the precomputed lemmatizer
    /// the supplied lemmas go through the same filters instead of the text.
    pub fn terms(&self, config: &NormalizationConfig) -> Result<Vec<String>> {
        if config.lemmatizer != Lemmatizer::Precomputed {
            return Ok(normalize(&self.text, config));
        }
        let lemmas = self.lemmas.as_ref().ok_or_else(|| {
            Error::Input(format!(
                "document `{}` has no lemmas but the lemmatizer is `precomputed`",
                self.id
            ))
        })?;
        Ok(lemmas
            .iter()
            .flat_map(|l| l.split_whitespace())
            .filter_map(|l| clean_token(l, config))
            .collect())
    }

    /// Terms paired with their POS tags. Requires precomputed lemmas and
    /// tags; returns `None` when the document carries no tags.
    pub fn tagged_terms(&self, config: &NormalizationConfig) -> Option<Vec<(String, &str)>> {
        let lemmas = self.lemmas.as_ref()?;
        let tags = self.pos_tags.as_ref()?;
        Some(
            lemmas
                .iter()
                .zip(tags)
                .filter_map(|(l, t)| {
                    let term = clean_token(l, config)?;
                    let term = normalize::lemmatize(term, config.lemmatizer);
                    Some((term, t.as_str()))
                })
                .collect(),
        )
    }
}

/// Which source wins when a document carries both a gold label and a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    #[default]
    Model,
    Gold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelRule {
    /// Scores at or above this value count as toxic.
    pub threshold: f64,
    pub source: LabelSource,
}

impl Default for LabelRule {
    fn default() -> Self {
        LabelRule {
            threshold: 0.5,
            source: LabelSource::Model,
        }
    }
}

/// Decides whether `doc` is toxic under `rule`.
pub fn label_toxic(doc: &Document, rule: &LabelRule) -> Result<bool> {
    let by_score = doc.model_score.map(|s| s >= rule.threshold);
    let label = match rule.source {
        LabelSource::Gold => doc.gold_label.or(by_score),
        LabelSource::Model => by_score.or(doc.gold_label),
    };
    label.ok_or_else(|| Error::Unlabeled(doc.id.clone()))
}

/// Counts token occurrences over `docs` in a single pass.
pub fn count_terms<'a, I>(docs: I, config: &NormalizationConfig) -> Result<TermCounts>
where
    I: IntoIterator<Item = &'a Document>,
{
    let mut table = TermCounts::new();
    for doc in docs {
        table.add_document(doc.terms(config)?);
    }
    Ok(table)
}

fn shard_ranges(len: usize, shards: usize) -> Vec<std::ops::Range<usize>> {
    let shards = shards.clamp(1, len.max(1));
    let size = len.div_ceil(shards);
    (0..shards)
        .map(|i| (i * size).min(len)..((i + 1) * size).min(len))
        .filter(|r| !r.is_empty())
        .collect()
}

/// Counts `docs` split into `shards` contiguous slices on separate threads,
/// then merges. Produces the same table as [`count_terms`].
pub fn count_terms_sharded(
    docs: &[Document],
    config: &NormalizationConfig,
    shards: usize,
) -> Result<TermCounts> {
    let ranges = shard_ranges(docs.len(), shards);
    if ranges.len() <= 1 {
        return count_terms(docs, config);
    }
    let parts: Vec<Result<TermCounts>> = thread::scope(|s| {
        let handles: Vec<_> = ranges
            .into_iter()
            .map(|r| s.spawn(move || count_terms(&docs[r], config)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("counting worker panicked"))
            .collect()
    });
    let mut out = TermCounts::new();
    for part in parts {
        out.merge(&part?);
    }
    Ok(out)
}

/// Per-country toxic/non-toxic counts. Toxic documents keep their terms so a
/// balanced sample can be recounted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CountryCell {
    pub toxic: TermCounts,
    pub nontoxic: TermCounts,
    pub toxic_doc_ids: Vec<String>,
    toxic_doc_terms: Vec<Vec<String>>,
}

impl CountryCell {
    fn merge(&mut self, other: CountryCell) {
        self.toxic.merge(&other.toxic);
        self.nontoxic.merge(&other.nontoxic);
        self.toxic_doc_ids.extend(other.toxic_doc_ids);
        self.toxic_doc_terms.extend(other.toxic_doc_terms);
    }

    /// Combined toxic and non-toxic counts.
    pub fn all(&self) -> TermCounts {
        TermCounts::merged([&self.toxic, &self.nontoxic])
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CountryPartition {
    cells: BTreeMap<CountryCode, CountryCell>,
}

impl CountryPartition {
    /// Assigns every document to exactly one (country, toxicity) cell.
    pub fn build(
        docs: &[Document],
        config: &NormalizationConfig,
        rule: &LabelRule,
        shards: usize,
    ) -> Result<Self> {
        let ranges = shard_ranges(docs.len(), shards);
        let build_one = |slice: &[Document]| -> Result<CountryPartition> {
            let mut p = CountryPartition::default();
            for doc in slice {
                p.insert(doc, config, rule)?;
            }
            Ok(p)
        };
        if ranges.len() <= 1 {
            return build_one(docs);
        }
        let parts: Vec<Result<CountryPartition>> = thread::scope(|s| {
            let handles: Vec<_> = ranges
                .into_iter()
                .map(|r| {
                    let slice = &docs[r];
                    s.spawn(move || build_one(slice))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("partition worker panicked"))
                .collect()
        });
        let mut out = CountryPartition::default();
        for part in parts {
            for (country, cell) in part?.cells {
                out.cells.entry(country).or_default().merge(cell);
            }
        }
        Ok(out)
    }

    fn insert(&mut self, doc: &Document, config: &NormalizationConfig, rule: &LabelRule) -> Result<()> {
        doc.validate()?;
        let toxic = label_toxic(doc, rule)?;
        let terms = doc.terms(config)?;
        let cell = self.cells.entry(doc.country.clone()).or_default();
        if toxic {
            cell.toxic.add_document(&terms);
            cell.toxic_doc_ids.push(doc.id.clone());
            cell.toxic_doc_terms.push(terms);
        } else {
            cell.nontoxic.add_document(&terms);
        }
        Ok(())
    }

    pub fn countries(&self) -> impl Iterator<Item = &CountryCode> {
        self.cells.keys()
    }

    pub fn cell(&self, country: &CountryCode) -> Option<&CountryCell> {
        self.cells.get(country)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CountryCode, &CountryCell)> {
        self.cells.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Equal-sized toxic samples per country.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancedCorpus {
    pub docs_per_country: usize,
    pub per_country: BTreeMap<CountryCode, TermCounts>,
    pub sampled_ids: BTreeMap<CountryCode, Vec<String>>,
    pub global: TermCounts,
}

/// Samples, without replacement, the same number of toxic documents from
/// every country (the smallest country's toxic count) and recounts them.
pub fn build_balanced_toxic_corpus(partition: &CountryPartition, seed: u64) -> Result<BalancedCorpus> {
    if partition.is_empty() {
        return Err(Error::Input("no documents".into()));
    }
    if let Some((country, _)) = partition.iter().find(|(_, c)| c.toxic_doc_ids.is_empty()) {
        return Err(Error::NoToxicDocuments(country.to_string()));
    }
    let quota = partition
        .iter()
        .map(|(_, c)| c.toxic_doc_ids.len())
        .min()
        .unwrap_or(0);

    let mut per_country = BTreeMap::new();
    let mut sampled_ids = BTreeMap::new();
    for (country, cell) in partition.iter() {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv1a(country.as_str())));
        let mut picks = index::sample(&mut rng, cell.toxic_doc_ids.len(), quota).into_vec();
        picks.sort_unstable();
        let mut table = TermCounts::new();
        let mut ids = Vec::with_capacity(quota);
        for i in picks {
            table.add_document(&cell.toxic_doc_terms[i]);
            ids.push(cell.toxic_doc_ids[i].clone());
        }
        per_country.insert(country.clone(), table);
        sampled_ids.insert(country.clone(), ids);
    }
    let global = TermCounts::merged(per_country.values());
    Ok(BalancedCorpus {
        docs_per_country: quota,
        per_country,
        sampled_ids,
        global,
    })
}

/// Reads newline-delimited JSON documents. Blank lines are skipped.
pub fn read_documents<R: BufRead>(input: R, source: &str) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
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
        let doc: Document = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        doc.validate().map_err(|e| parse_err(e.to_string()))?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_documents<W: Write>(docs: &[Document], mut out: W) -> Result<()> {
    for doc in docs {
        serde_json::to_writer(&mut out, doc)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
