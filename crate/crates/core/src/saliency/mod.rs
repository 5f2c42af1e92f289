//! Candidate term selection: terms overrepresented in a country's toxic text
//! relative to its non-toxic text (log-odds with an informative Dirichlet
//! prior), that are also overrepresented in that country's share of a
//! geography-balanced toxic corpus (Beta posterior tail test).

mod beta;

use std::collections::BTreeMap;
use std::io::Write;

use log::debug;
use serde::{Deserialize, Serialize};

pub use beta::{ln_beta, ln_gamma, regularized_incomplete_beta};

use crate::corpus::{BalancedCorpus, CountryCode, CountryPartition, TermCounts};
use crate::error::{Error, Result};

/// Which tail of the Beta posterior counts as significant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TailReading {
    /// `1 - CDF(f_ij) <= p`: the country uses the term more than expected.
    #[default]
    Upper,
    /// `CDF(f_ij) <= p`, the literal reading, which flags underuse.
    Lower,
}

/// Second-stage test applied to each country's log-odds candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CountryTest {
    #[default]
    BetaPosterior,
    /// Log-odds of the country's balanced toxic counts against all other
    /// countries' balanced toxic counts.
    OneVsRestLogOdds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaliencyConfig {
    /// Total pseudo-count α₀ of the Dirichlet prior.
    pub prior_strength: f64,
    pub z_threshold: f64,
    pub p_threshold: f64,
    /// Minimum count of the term in the country's toxic corpus.
    pub min_count: u64,
    pub tail: TailReading,
    pub country_test: CountryTest,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        SaliencyConfig {
            prior_strength: 1000.0,
            z_threshold: 1.96,
            p_threshold: 0.05,
            min_count: 5,
            tail: TailReading::Upper,
            country_test: CountryTest::BetaPosterior,
        }
    }
}

impl SaliencyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prior_strength > 0.0 && self.prior_strength.is_finite()) {
            return Err(Error::Config(format!(
                "prior_strength must be positive, got {}",
                self.prior_strength
            )));
        }
        if !self.z_threshold.is_finite() {
            return Err(Error::Config("z_threshold must be finite".into()));
        }
        if !(self.p_threshold > 0.0 && self.p_threshold < 1.0) {
            return Err(Error::Config(format!(
                "p_threshold must lie in (0, 1), got {}",
                self.p_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogOddsResult {
    pub term: String,
    pub delta: f64,
    pub variance: f64,
    pub z: f64,
    pub toxic_count: u64,
    pub nontoxic_count: u64,
}

/// δ, σ² and z for one term given its counts `y1`, `y2` in corpora of sizes
/// `n1`, `n2`, its prior pseudo-count `alpha_w` and the prior total `alpha0`.
pub fn log_odds_term(y1: f64, n1: f64, y2: f64, n2: f64, alpha_w: f64, alpha0: f64) -> (f64, f64, f64) {
    let omega1 = (y1 + alpha_w) / (n1 + alpha0 - y1 - alpha_w);
    let omega2 = (y2 + alpha_w) / (n2 + alpha0 - y2 - alpha_w);
    let delta = omega1.ln() - omega2.ln();
    let variance = 1.0 / (y1 + alpha_w) + 1.0 / (y2 + alpha_w);
    (delta, variance, delta / variance.sqrt())
}

/// Log-odds ratio with an informative Dirichlet prior for every term in the
/// union vocabulary of `first` and `second`. The per-term prior is
/// α₀ · (background frequency), floored at α₀ / (background total) for terms
/// the background lacks. Results are ordered by z descending.
pub fn dirichlet_log_odds(
    first: &TermCounts,
    second: &TermCounts,
    background: &TermCounts,
    config: &SaliencyConfig,
) -> Result<Vec<LogOddsResult>> {
    config.validate()?;
    if first.total_tokens() == 0 {
        return Err(Error::EmptyCorpus("first"));
    }
    if second.total_tokens() == 0 {
        return Err(Error::EmptyCorpus("second"));
    }
    if background.total_tokens() == 0 {
        return Err(Error::EmptyCorpus("background"));
    }
    let alpha0 = config.prior_strength;
    let bg_total = background.total_tokens() as f64;
    let n1 = first.total_tokens() as f64;
    let n2 = second.total_tokens() as f64;

    let mut vocab: Vec<&str> = first.terms().chain(second.terms()).collect();
    vocab.sort_unstable();
    vocab.dedup();

    let mut out = Vec::with_capacity(vocab.len());
    for term in vocab {
        let alpha_w = alpha0 * (background.count(term).max(1) as f64) / bg_total;
        let y1 = first.count(term);
        let y2 = second.count(term);
        let (delta, variance, z) = log_odds_term(y1 as f64, n1, y2 as f64, n2, alpha_w, alpha0);
        if !z.is_finite() {
            return Err(Error::Domain(format!(
                "log-odds undefined for `{term}` (prior exhausts the corpus)"
            )));
        }
        out.push(LogOddsResult {
            term: term.to_owned(),
            delta,
            variance,
            z,
            toxic_count: y1,
            nontoxic_count: y2,
        });
    }
    out.sort_by(|a, b| b.z.total_cmp(&a.z).then_with(|| a.term.cmp(&b.term)));
    Ok(out)
}

/// Counts feeding the multi-group test for one (term, country).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverrepStats {
    /// Term count in the balanced corpus (k_i).
    pub k_global: u64,
    /// Token count of the balanced corpus (N).
    pub n_global: u64,
    /// Term count in the country's share (k_ij).
    pub k_country: u64,
    pub n_country: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverrepResult {
    pub term: String,
    pub country: CountryCode,
    #[serde(flatten)]
    pub stats: OverrepStats,
    pub tail_prob: f64,
    pub significant: bool,
}

/// Compares the country's observed frequency k_ij / n_country with the
/// Beta(k_i, N - k_i) posterior on the term's global frequency. Returns
/// `Ok(None)` when the posterior is degenerate (k_i = 0 or k_i = N).
pub fn overrepresentation_test(
    term: &str,
    country: &CountryCode,
    stats: OverrepStats,
    config: &SaliencyConfig,
) -> Result<Option<OverrepResult>> {
    let OverrepStats {
        k_global,
        n_global,
        k_country,
        n_country,
    } = stats;
    if k_global > n_global || k_country > n_country || k_country > k_global || n_country == 0 {
        return Err(Error::Input(format!(
            "inconsistent counts for `{term}` in {country}: {stats:?}"
        )));
    }
    if k_global == 0 || k_global == n_global {
        debug!("skipping `{term}` in {country}: degenerate posterior (k_i = {k_global}, N = {n_global})");
        return Ok(None);
    }
    let freq = k_country as f64 / n_country as f64;
    let cdf = regularized_incomplete_beta(k_global as f64, (n_global - k_global) as f64, freq)?;
    let tail_prob = match config.tail {
        TailReading::Upper => 1.0 - cdf,
        TailReading::Lower => cdf,
    };
    Ok(Some(OverrepResult {
        term: term.to_owned(),
        country: country.clone(),
        stats,
        tail_prob,
        significant: tail_prob <= config.p_threshold,
    }))
}

/// A term selected for a country, with the statistics that selected it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub term: String,
    pub country: CountryCode,
    pub z: f64,
    pub delta: f64,
    pub variance: f64,
    /// Absent under the one-vs-rest country test.
    pub tail_prob: Option<f64>,
    pub rank: usize,
}

/// Per-country candidate lists, ranked by log-odds z descending.
pub fn phase1_select(
    partition: &CountryPartition,
    balanced: &BalancedCorpus,
    config: &SaliencyConfig,
) -> Result<BTreeMap<CountryCode, Vec<Candidate>>> {
    config.validate()?;
    let mut out = BTreeMap::new();
    for (country, cell) in partition.iter() {
        let background = cell.all();
        let share = balanced.per_country.get(country).ok_or_else(|| {
            Error::Input(format!("balanced corpus has no sample for {country}"))
        })?;
        let rest = match config.country_test {
            CountryTest::OneVsRestLogOdds => Some(TermCounts::merged(
                balanced
                    .per_country
                    .iter()
                    .filter(|(c, _)| *c != country)
                    .map(|(_, t)| t),
            )),
            CountryTest::BetaPosterior => None,
        };

        let scored = dirichlet_log_odds(&cell.toxic, &cell.nontoxic, &background, config)?;
        let mut picked = Vec::new();
        for lo in scored {
            if lo.z < config.z_threshold {
                // sorted by z, nothing further qualifies
                break;
            }
            if lo.toxic_count < config.min_count {
                continue;
            }
            let tail_prob = match &rest {
                None => {
                    let stats = OverrepStats {
                        k_global: balanced.global.count(&lo.term),
                        n_global: balanced.global.total_tokens(),
                        k_country: share.count(&lo.term),
                        n_country: share.total_tokens(),
                    };
                    match overrepresentation_test(&lo.term, country, stats, config)? {
                        Some(r) if r.significant => Some(r.tail_prob),
                        _ => continue,
                    }
                }
                Some(rest) => {
                    if rest.total_tokens() == 0 || share.total_tokens() == 0 {
                        continue;
                    }
                    let bg = &balanced.global;
                    let alpha0 = config.prior_strength;
                    let alpha_w =
                        alpha0 * (bg.count(&lo.term).max(1) as f64) / bg.total_tokens() as f64;
                    let (_, _, z) = log_odds_term(
                        share.count(&lo.term) as f64,
                        share.total_tokens() as f64,
                        rest.count(&lo.term) as f64,
                        rest.total_tokens() as f64,
                        alpha_w,
                        alpha0,
                    );
                    if z < config.z_threshold {
                        continue;
                    }
                    None
                }
            };
            picked.push(Candidate {
                term: lo.term,
                country: country.clone(),
                z: lo.z,
                delta: lo.delta,
                variance: lo.variance,
                tail_prob,
                rank: picked.len() + 1,
            });
        }
        out.insert(country.clone(), picked);
    }
    Ok(out)
}

pub const CANDIDATE_HEADER: &str = "term\tcountry\tz\tdelta\tvariance\ttail_prob\trank";

/// Writes candidates as tab-separated text with a header row.
pub fn write_candidates<'a, W, I>(candidates: I, mut out: W) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a Candidate>,
{
    writeln!(out, "{CANDIDATE_HEADER}")?;
    for c in candidates {
        let tail = c.tail_prob.map_or_else(|| "NA".to_owned(), |p| p.to_string());
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            c.term, c.country, c.z, c.delta, c.variance, tail, c.rank
        )?;
    }
    Ok(())
}

/// Reads the term column of a candidate file. Also accepts a bare
/// one-term-per-line list.
pub fn read_terms(text: &str) -> Vec<String> {
    let mut terms = Vec::new();
    for line in text.lines() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') || line == CANDIDATE_HEADER {
            continue;
        }
        let term = line.split('\t').next().unwrap_or_default();
        if !terms.iter().any(|t| t == term) {
            terms.push(term.to_owned());
        }
    }
    terms
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(entries: &[(&str, u64)]) -> TermCounts {
        let mut t = TermCounts::new();
        let terms: Vec<&str> = entries
            .iter()
            .flat_map(|(w, n)| std::iter::repeat_n(*w, *n as usize))
            .collect();
        t.add_document(terms);
        t
    }

    fn cc(s: &str) -> CountryCode {
        CountryCode::new(s).unwrap()
    }

    #[test]
    fn worked_example() {
        let (delta, variance, z) = log_odds_term(10.0, 100.0, 2.0, 100.0, 0.5, 1.0);
        assert!((delta - 1.5196).abs() < 1e-3, "{delta}");
        assert!((variance - 0.49524).abs() < 1e-5, "{variance}");
        assert!((z - 2.1594).abs() < 1e-3, "{z}");
    }

    #[test]
    fn identical_corpora_give_zero() {
        let a = table(&[("x", 5), ("y", 20)]);
        let bg = TermCounts::merged([&a, &a]);
        for r in dirichlet_log_odds(&a, &a, &bg, &SaliencyConfig::default()).unwrap() {
            assert_eq!(r.delta, 0.0);
            assert_eq!(r.z, 0.0);
        }
    }

    #[test]
    fn toxic_only_term_is_positive() {
        let toxic = table(&[("slur", 10), ("the", 50)]);
        let clean = table(&[("the", 60)]);
        let bg = TermCounts::merged([&toxic, &clean]);
        let res = dirichlet_log_odds(&toxic, &clean, &bg, &SaliencyConfig::default()).unwrap();
        let slur = res.iter().find(|r| r.term == "slur").unwrap();
        assert!(slur.z > 0.0);
        assert_eq!(res[0].term, "slur");
    }

    #[test]
    fn absent_from_background_uses_floor_prior() {
        let toxic = table(&[("new", 3), ("a", 10)]);
        let clean = table(&[("a", 10), ("b", 5)]);
        let bg = table(&[("a", 50), ("b", 50)]);
        let cfg = SaliencyConfig {
            prior_strength: 10.0,
            ..Default::default()
        };
        let res = dirichlet_log_odds(&toxic, &clean, &bg, &cfg).unwrap();
        let r = res.iter().find(|r| r.term == "new").unwrap();
        let (delta, _, z) = log_odds_term(3.0, 13.0, 0.0, 15.0, 0.1, 10.0);
        assert_eq!((r.delta, r.z), (delta, z));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let a = table(&[("x", 1)]);
        let empty = TermCounts::new();
        let cfg = SaliencyConfig::default();
        assert!(matches!(
            dirichlet_log_odds(&empty, &a, &a, &cfg),
            Err(Error::EmptyCorpus(_))
        ));
        assert!(dirichlet_log_odds(&a, &a, &empty, &cfg).is_err());
    }

    #[test]
    fn overrepresented_term() {
        let stats = OverrepStats {
            k_global: 10,
            n_global: 1000,
            k_country: 5,
            n_country: 100,
        };
        let r = overrepresentation_test("w", &cc("IN"), stats, &SaliencyConfig::default())
            .unwrap()
            .unwrap();
        assert!(r.tail_prob < 0.05 && r.significant);
    }

    #[test]
    fn lower_tail_reading_flags_underuse() {
        let cfg = SaliencyConfig {
            tail: TailReading::Lower,
            ..Default::default()
        };
        let stats = OverrepStats {
            k_global: 50,
            n_global: 1000,
            k_country: 0,
            n_country: 300,
        };
        let r = overrepresentation_test("w", &cc("IN"), stats, &cfg).unwrap().unwrap();
        assert!(r.significant);
    }

    #[test]
    fn zero_country_count_is_not_significant() {
        let stats = OverrepStats {
            k_global: 10,
            n_global: 1000,
            k_country: 0,
            n_country: 100,
        };
        let r = overrepresentation_test("w", &cc("IN"), stats, &SaliencyConfig::default())
            .unwrap()
            .unwrap();
        assert_eq!(r.tail_prob, 1.0);
        assert!(!r.significant);
    }

    #[test]
    fn degenerate_posterior_is_skipped() {
        let cfg = SaliencyConfig::default();
        let zero = OverrepStats {
            k_global: 0,
            n_global: 100,
            k_country: 0,
            n_country: 50,
        };
        assert!(overrepresentation_test("w", &cc("IN"), zero, &cfg).unwrap().is_none());
        let all = OverrepStats {
            k_global: 100,
            n_global: 100,
            k_country: 50,
            n_country: 50,
        };
        assert!(overrepresentation_test("w", &cc("IN"), all, &cfg).unwrap().is_none());
    }

    #[test]
    fn config_validation() {
        let bad = SaliencyConfig {
            p_threshold: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SaliencyConfig {
            prior_strength: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn candidate_file_round_trips_terms() {
        let c = Candidate {
            term: "sanghi".into(),
            country: cc("IN"),
            z: 3.5,
            delta: 1.0,
            variance: 0.1,
            tail_prob: Some(0.01),
            rank: 1,
        };
        let mut buf = Vec::new();
        write_candidates([&c], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, format!("{CANDIDATE_HEADER}\nsanghi\tIN\t3.5\t1\t0.1\t0.01\t1\n"));
        assert_eq!(read_terms(&text), vec!["sanghi"]);
    }

    proptest! {
        #[test]
        fn z_is_antisymmetric(
            a in prop::collection::vec(0u64..40, 4),
            b in prop::collection::vec(0u64..40, 4),
            alpha0 in 0.5f64..500.0,
        ) {
            let words = ["w0", "w1", "w2", "w3"];
            let ta = table(&words.iter().copied().zip(a.iter().map(|n| n + 1)).collect::<Vec<_>>());
            let tb = table(&words.iter().copied().zip(b.iter().map(|n| n + 1)).collect::<Vec<_>>());
            let bg = TermCounts::merged([&ta, &tb]);
            let cfg = SaliencyConfig { prior_strength: alpha0, ..Default::default() };
            let ab = dirichlet_log_odds(&ta, &tb, &bg, &cfg).unwrap();
            let ba = dirichlet_log_odds(&tb, &ta, &bg, &cfg).unwrap();
            for r in &ab {
                let s = ba.iter().find(|s| s.term == r.term).unwrap();
                prop_assert_eq!(r.z, -s.z);
            }
        }

        #[test]
        fn scaling_preserves_sign(
            y1 in 0u64..200, extra1 in 1u64..500,
            y2 in 0u64..200, extra2 in 1u64..500,
            freq in 0.001f64..0.5, alpha0 in 0.5f64..100.0, factor in 2u64..20,
        ) {
            let (n1, n2) = ((y1 + extra1) as f64, (y2 + extra2) as f64);
            let aw = alpha0 * freq;
            let (_, _, z) = log_odds_term(y1 as f64, n1, y2 as f64, n2, aw, alpha0);
            let c = factor as f64;
            let (_, _, zs) = log_odds_term(c * y1 as f64, c * n1, c * y2 as f64, c * n2, c * aw, c * alpha0);
            prop_assert!(z == 0.0 && zs.abs() < 1e-9 || z.signum() == zs.signum(), "{z} vs {zs}");
        }

        #[test]
        fn tail_prob_non_increasing_in_country_count(
            k_global in 1u64..500, extra in 1u64..5000, n_country in 1u64..2000,
        ) {
            let n_global = k_global + extra;
            let cfg = SaliencyConfig::default();
            let country = cc("IN");
            let mut last = f64::INFINITY;
            for k_country in 0..=k_global.min(n_country) {
                let stats = OverrepStats { k_global, n_global, k_country, n_country };
                let r = overrepresentation_test("w", &country, stats, &cfg).unwrap().unwrap();
                prop_assert!(r.tail_prob <= last + 1e-15);
                prop_assert!((0.0..=1.0).contains(&r.tail_prob));
                last = r.tail_prob;
            }
        }
    }
}
