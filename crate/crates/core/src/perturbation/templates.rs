use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PLACEHOLDER: &str = "{person}";

/// The 33 bundled templates with their reference toxicity scores.
pub const DEFAULT_TEMPLATES: &str = include_str!("../../data/templates.tsv");

/// A sentence with exactly one `{person}` slot and its baseline toxicity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pattern: String,
    baseline_score: f64,
}

impl Template {
    pub fn new(pattern: impl Into<String>, baseline_score: f64) -> Result<Self> {
        let pattern = pattern.into();
        if pattern.matches(PLACEHOLDER).count() != 1 {
            return Err(Error::MalformedTemplate(pattern));
        }
        if !(0.0..=1.0).contains(&baseline_score) {
            return Err(Error::Input(format!(
                "template `{pattern}`: baseline score {baseline_score} outside [0, 1]"
            )));
        }
        Ok(Template {
            pattern,
            baseline_score,
        })
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn baseline_score(&self) -> f64 {
        self.baseline_score
    }

    /// Substitutes `term` for the placeholder. No article or case agreement
    /// is attempted.
    pub fn instantiate(&self, term: &str) -> Result<String> {
        if term.trim().is_empty() {
            return Err(Error::Input("cannot instantiate a template with an empty term".into()));
        }
        if term.contains('{') || term.contains('}') {
            return Err(Error::Input(format!(
                "term `{term}` contains placeholder characters"
            )));
        }
        Ok(self.pattern.replacen(PLACEHOLDER, term, 1))
    }
}

/// Substitutes `term` into `template`.
pub fn instantiate(template: &Template, term: &str) -> Result<String> {
    template.instantiate(term)
}

/// An ordered template list; its length is the perturbation vector
/// dimensionality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSet {
    templates: Vec<Template>,
}

impl TemplateSet {
    pub fn new(templates: Vec<Template>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::Input("template set is empty".into()));
        }
        Ok(TemplateSet { templates })
    }

    pub fn bundled() -> Self {
        Self::parse(DEFAULT_TEMPLATES, "bundled templates").expect("bundled fixture is valid")
    }

    /// Parses `baseline_score TAB pattern` lines.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut templates = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: source.to_owned(),
                line: i + 1,
                message,
            };
            let (score, pattern) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected `baseline_score<TAB>pattern`".into()))?;
            let score: f64 = score
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("bad baseline score `{score}`")))?;
            templates.push(Template::new(pattern, score).map_err(|e| parse_err(e.to_string()))?);
        }
        Self::new(templates)
    }

    /// Inverse of [`TemplateSet::parse`]. Scores with at most three decimals
    /// are written with exactly three.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for t in &self.templates {
            let fixed = format!("{:.3}", t.baseline_score);
            let score = if fixed.parse::<f64>().ok() == Some(t.baseline_score) {
                fixed
            } else {
                t.baseline_score.to_string()
            };
            let _ = writeln!(out, "{score}\t{}", t.pattern);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Template> {
        self.templates.iter()
    }

    pub fn get(&self, i: usize) -> Option<&Template> {
        self.templates.get(i)
    }

    pub fn baselines(&self) -> Vec<f64> {
        self.templates.iter().map(Template::baseline_score).collect()
    }

    /// Same patterns with baselines replaced.
    pub fn with_baselines(&self, baselines: &[f64]) -> Result<Self> {
        if baselines.len() != self.templates.len() {
            return Err(Error::Input(format!(
                "{} baselines for {} templates",
                baselines.len(),
                self.templates.len()
            )));
        }
        let templates = self
            .templates
            .iter()
            .zip(baselines)
            .map(|(t, &b)| Template::new(t.pattern.clone(), b))
            .collect::<Result<Vec<_>>>()?;
        Self::new(templates)
    }
}

impl<'a> IntoIterator for &'a TemplateSet {
    type Item = &'a Template;
    type IntoIter = std::slice::Iter<'a, Template>;

    fn into_iter(self) -> Self::IntoIter {
        self.templates.iter()
    }
}
