use serde::{Deserialize, Serialize};

/// How surface tokens are reduced to lemmas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Lemmatizer {
    Identity,
    /// Rule-based plural stripping (`dogs` -> `dog`, `parties` -> `party`,
    /// `boxes` -> `box`).
    #[default]
    SimplePluralStrip,
    /// Lemmas are supplied with each document. Raw-text normalization under
    /// this setting leaves tokens unlemmatized.
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizationConfig {
    pub strip_urls: bool,
    /// Also drops `@mentions`.
    pub strip_hashtags: bool,
    pub strip_special_and_numeric: bool,
    pub lowercase: bool,
    pub lemmatizer: Lemmatizer,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        NormalizationConfig {
            strip_urls: true,
            strip_hashtags: true,
            strip_special_and_numeric: true,
            lowercase: true,
            lemmatizer: Lemmatizer::SimplePluralStrip,
        }
    }
}

impl NormalizationConfig {
    /// Keeps every token as written.
    pub fn verbatim() -> Self {
        NormalizationConfig {
            strip_urls: false,
            strip_hashtags: false,
            strip_special_and_numeric: false,
            lowercase: false,
            lemmatizer: Lemmatizer::Identity,
        }
    }
}

fn is_url(token: &str) -> bool {
    token.contains("://") || token.get(..4).is_some_and(|p| p.eq_ignore_ascii_case("www."))
}

/// Applies the filtering and casing rules to one whitespace-delimited token,
/// without lemmatization. Returns `None` when the token is dropped.
pub fn clean_token(token: &str, config: &NormalizationConfig) -> Option<String> {
    if config.strip_urls && is_url(token) {
        return None;
    }
    if config.strip_hashtags && (token.starts_with('#') || token.starts_with('@')) {
        return None;
    }
    // Lowercasing happens before stripping: some lowercase mappings emit
    // combining marks that are not alphabetic.
    let cased = if config.lowercase {
        token.to_lowercase()
    } else {
        token.to_owned()
    };
    let cleaned = if config.strip_special_and_numeric {
        cased.chars().filter(|c| c.is_alphabetic()).collect()
    } else {
        cased
    };
    if cleaned.is_empty() {
        None
    } else {
        Some(cleaned)
    }
}

fn is_consonant(c: char) -> bool {
    c.is_ascii_alphabetic() && !matches!(c.to_ascii_lowercase(), 'a' | 'e' | 'i' | 'o' | 'u')
}

fn ends_with_ci(word: &str, suffix: &str) -> bool {
    word.len() >= suffix.len()
        && word.is_char_boundary(word.len() - suffix.len())
        && word[word.len() - suffix.len()..].eq_ignore_ascii_case(suffix)
}

/// Rule-based English plural stripping. Idempotent: the output never ends in
/// a suffix the rules would strip again.
pub fn strip_plural(word: &str) -> String {
    if word.chars().count() <= 3 {
        return word.to_owned();
    }
    let stem = |n: usize| word[..word.len() - n].to_owned();
    if ends_with_ci(word, "ies") && word.chars().count() > 4 {
        let upper = word.ends_with("IES");
        let mut out = stem(3);
        out.push(if upper { 'Y' } else { 'y' });
        return out;
    }
    for suffix in ["sses", "shes", "ches", "xes", "zes"] {
        if ends_with_ci(word, suffix) {
            return stem(2);
        }
    }
    for suffix in ["ss", "us", "is"] {
        if ends_with_ci(word, suffix) {
            return word.to_owned();
        }
    }
    let mut chars = word.chars().rev();
    match (chars.next(), chars.next()) {
        (Some('s' | 'S'), Some(prev)) if is_consonant(prev) => stem(1),
        _ => word.to_owned(),
    }
}

pub(crate) fn lemmatize(token: String, lemmatizer: Lemmatizer) -> String {
    match lemmatizer {
        Lemmatizer::SimplePluralStrip => strip_plural(&token),
        Lemmatizer::Identity | Lemmatizer::Precomputed => token,
    }
}

/// Normalizes raw text into a list of terms: whitespace tokenization, then
/// per-token filtering, casing, stripping and lemmatization.
pub fn normalize(text: &str, config: &NormalizationConfig) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|tok| clean_token(tok, config))
        .map(|tok| lemmatize(tok, config.lemmatizer))
        .collect()
}

/// Normalizes a single raw token, returning its term if it survives.
pub fn normalize_token(token: &str, config: &NormalizationConfig) -> Option<String> {
    clean_token(token, config).map(|t| lemmatize(t, config.lemmatizer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_flags_on() {
        let cfg = NormalizationConfig::default();
        assert_eq!(
            normalize("Check https://x.co #tag 42 Dogs!", &cfg),
            vec!["check", "dog"]
        );
    }

    #[test]
    fn empty_text() {
        assert!(normalize("", &NormalizationConfig::default()).is_empty());
    }

    #[test]
    fn identity_configuration_keeps_case() {
        let cfg = NormalizationConfig {
            lowercase: false,
            lemmatizer: Lemmatizer::Identity,
            ..Default::default()
        };
        assert_eq!(normalize("Hello", &cfg), vec!["Hello"]);
    }

    #[test]
    fn mentions_and_www_urls_are_dropped() {
        let cfg = NormalizationConfig::default();
        assert_eq!(normalize("@user www.example.com hi", &cfg), vec!["hi"]);
    }

    #[test]
    fn plural_rules() {
        for (input, want) in [
            ("dogs", "dog"),
            ("parties", "party"),
            ("boxes", "box"),
            ("churches", "church"),
            ("classes", "class"),
            ("glass", "glass"),
            ("bus", "bus"),
            ("analysis", "analysis"),
            ("bees", "bees"),
            ("its", "its"),
            ("muslims", "muslim"),
            ("DOGS", "DOG"),
        ] {
            assert_eq!(strip_plural(input), want, "{input}");
        }
    }

    fn any_config() -> impl Strategy<Value = NormalizationConfig> {
        (
            any::<bool>(),
            any::<bool>(),
            any::<bool>(),
            any::<bool>(),
            prop_oneof![
                Just(Lemmatizer::Identity),
                Just(Lemmatizer::SimplePluralStrip),
                Just(Lemmatizer::Precomputed)
            ],
        )
            .prop_map(|(a, b, c, d, lemmatizer)| NormalizationConfig {
                strip_urls: a,
                strip_hashtags: b,
                strip_special_and_numeric: c,
                lowercase: d,
                lemmatizer,
            })
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(text in "\\PC{0,40}", cfg in any_config()) {
            let once = normalize(&text, &cfg);
            let twice = normalize(&once.join(" "), &cfg);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn normalize_is_idempotent_on_wordy_text(
            text in "([A-Za-z#@]{1,8}(ss|es|ies|s)?[!?.0-9]? ){0,8}",
            cfg in any_config(),
        ) {
            let once = normalize(&text, &cfg);
            prop_assert_eq!(normalize(&once.join(" "), &cfg), once);
        }
    }
}
