//! The toxicity-scoring boundary. Any black-box scorer plugs in behind
//! [`Scorer`]; a persistent cache and a deterministic lexicon-based mock are
//! provided, plus an HTTP client behind the `remote` feature.

mod cache;
#[cfg(feature = "remote")]
mod remote;
mod throttle;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use cache::{CachedScorer, ScoreCache};
#[cfg(feature = "remote")]
pub use remote::RemoteScorer;
pub use throttle::{Permit, Throttle};

use crate::corpus::{normalize, Lemmatizer, NormalizationConfig};
use crate::error::{Error, Result, ScoreError};
use crate::hashing::sha256_hex;

pub type ScoreResult = std::result::Result<f64, ScoreError>;

/// A toxicity model producing one score in [0, 1] per text.
pub trait Scorer: Send + Sync {
    /// Stable identity; cached scores are keyed by it.
    fn id(&self) -> &str;

    fn score(&self, text: &str) -> ScoreResult;

    /// Scores every text, reporting failures positionally.
    fn score_batch(&self, texts: &[String]) -> Vec<ScoreResult> {
        texts.iter().map(|t| self.score(t)).collect()
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn score(&self, text: &str) -> ScoreResult {
        (**self).score(text)
    }
    fn score_batch(&self, texts: &[String]) -> Vec<ScoreResult> {
        (**self).score_batch(texts)
    }
}

impl<S: Scorer + ?Sized> Scorer for Box<S> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn score(&self, text: &str) -> ScoreResult {
        (**self).score(text)
    }
    fn score_batch(&self, texts: &[String]) -> Vec<ScoreResult> {
        (**self).score_batch(texts)
    }
}

impl<S: Scorer + ?Sized> Scorer for Arc<S> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn score(&self, text: &str) -> ScoreResult {
        (**self).score(text)
    }
    fn score_batch(&self, texts: &[String]) -> Vec<ScoreResult> {
        (**self).score_batch(texts)
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Parameters of the mock model: `logistic(bias + Σ weight(token))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MockLexicon {
    pub bias: f64,
    #[serde(default)]
    pub weights: BTreeMap<String, f64>,
}

impl MockLexicon {
    pub fn new(bias: f64) -> Self {
        MockLexicon {
            bias,
            weights: BTreeMap::new(),
        }
    }

    pub fn with_weight(mut self, term: impl Into<String>, weight: f64) -> Self {
        self.weights.insert(term.into(), weight);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.bias.is_finite() {
            return Err(Error::Config("mock bias must be finite".into()));
        }
        if let Some((t, w)) = self.weights.iter().find(|(_, w)| !w.is_finite()) {
            return Err(Error::Config(format!("mock weight for `{t}` is not finite: {w}")));
        }
        Ok(())
    }
}

/// Text normalization applied by [`MockScorer`] before weight lookup.
pub fn mock_normalization() -> NormalizationConfig {
    NormalizationConfig {
        lemmatizer: Lemmatizer::Identity,
        ..Default::default()
    }
}

/// Deterministic lexicon scorer. Text is normalized (lowercase, punctuation
/// and digits stripped, no lemmatization) before weights are looked up.
#[derive(Debug, Clone)]
pub struct MockScorer {
    lexicon: MockLexicon,
    normalization: NormalizationConfig,
    id: String,
}

impl MockScorer {
    pub fn new(lexicon: MockLexicon) -> Result<Self> {
        lexicon.validate()?;
        let canonical = serde_json::to_vec(&lexicon)?;
        let id = format!("mock-{}", &sha256_hex(&canonical)[..16]);
        Ok(MockScorer {
            lexicon,
            normalization: mock_normalization(),
            id,
        })
    }

    pub fn lexicon(&self) -> &MockLexicon {
        &self.lexicon
    }

    /// The pre-logistic activation for `text`.
    pub fn logit(&self, text: &str) -> f64 {
        let tokens = normalize(text, &self.normalization);
        self.lexicon.bias
            + tokens
                .iter()
                .filter_map(|t| self.lexicon.weights.get(t))
                .sum::<f64>()
    }
}

impl Scorer for MockScorer {
    fn id(&self) -> &str {
        &self.id
    }

    fn score(&self, text: &str) -> ScoreResult {
        if text.trim().is_empty() {
            return Err(ScoreError::EmptyText);
        }
        Ok(logistic(self.logit(text)).clamp(0.0, 1.0))
    }
}

/// Connection settings for a remote scorer. The auth token is never read
/// from or written to configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    pub endpoint: String,
    #[serde(skip)]
    pub auth_token: Option<String>,
    pub max_in_flight: usize,
    pub requests_per_second: f64,
    pub timeout_ms: u64,
    pub retries: u32,
    /// Base delay of the exponential backoff between retries.
    pub backoff_ms: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            endpoint: String::new(),
            auth_token: None,
            max_in_flight: 4,
            requests_per_second: 10.0,
            timeout_ms: 10_000,
            retries: 3,
            backoff_ms: 200,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.endpoint.is_empty() {
            return Err(Error::Config("scorer endpoint is empty".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        if !(self.requests_per_second > 0.0 && self.requests_per_second.is_finite()) {
            return Err(Error::Config(format!(
                "requests_per_second must be positive, got {}",
                self.requests_per_second
            )));
        }
        Ok(())
    }
}
