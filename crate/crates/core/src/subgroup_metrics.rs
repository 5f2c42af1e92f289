//! Subgroup bias metrics for term-defined subgroups: subgroup, BPSN and
//! BNSP AUCs and the positive/negative Average Equality Gaps, plus
//! per-cluster means.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize, NormalizationConfig};
use crate::error::{Error, Result};
use crate::mitigation::LabeledExample;
use crate::perturbation::csv_err;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    pub score: f64,
    pub is_toxic: bool,
    pub in_subgroup: bool,
}

/// Twice the Mann-Whitney U of `a` over `b`: 2·#{a > b} + #{a = b}.
/// Exact in integers; O((m + n) log(m + n)).
pub fn doubled_u(a: &[f64], b: &[f64]) -> u64 {
    let mut all: Vec<(f64, bool)> = a
        .iter()
        .map(|&s| (s, true))
        .chain(b.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut u2 = 0u64;
    let mut b_below = 0u64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut na, mut nb) = (0u64, 0u64);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                na += 1;
            } else {
                nb += 1;
            }
            j += 1;
        }
        u2 += na * (2 * b_below + nb);
        b_below += nb;
        i = j;
    }
    u2
}

fn check_scores(name: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::UndefinedMetric(format!("{name} is empty")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Input(format!("{name} contains NaN")));
    }
    Ok(())
}

/// Area under the ROC curve with ties counted half.
pub fn roc_auc(pos_scores: &[f64], neg_scores: &[f64]) -> Result<f64> {
    check_scores("positive scores", pos_scores)?;
    check_scores("negative scores", neg_scores)?;
    let mn = (pos_scores.len() * neg_scores.len()) as u64;
    Ok(doubled_u(pos_scores, neg_scores) as f64 / (2 * mn) as f64)
}

/// Average Equality Gap in [-0.5, 0.5]; positive when the subgroup is
/// scored higher than the background.
pub fn aeg(subgroup_scores: &[f64], background_scores: &[f64]) -> Result<f64> {
    check_scores("subgroup scores", subgroup_scores)?;
    check_scores("background scores", background_scores)?;
    let mn = (subgroup_scores.len() * background_scores.len()) as i64;
    let u2 = doubled_u(subgroup_scores, background_scores) as i64;
    Ok((u2 - mn) as f64 / (2 * mn) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CellSupport {
    pub subgroup_toxic: usize,
    pub subgroup_nontoxic: usize,
    pub background_toxic: usize,
    pub background_nontoxic: usize,
}

/// Metrics for one subgroup. A metric is `None` when one of its cells has
/// fewer than the configured minimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub term: String,
    pub subgroup_auc: Option<f64>,
    pub bpsn_auc: Option<f64>,
    pub bnsp_auc: Option<f64>,
    pub aeg_pos: Option<f64>,
    pub aeg_neg: Option<f64>,
    pub support: CellSupport,
}

pub const METRIC_NAMES: [&str; 5] = ["subgroup_auc", "bpsn_auc", "bnsp_auc", "aeg_pos", "aeg_neg"];

impl SubgroupReport {
    pub fn values(&self) -> [Option<f64>; 5] {
        [self.subgroup_auc, self.bpsn_auc, self.bnsp_auc, self.aeg_pos, self.aeg_neg]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub min_cell: usize,
    /// Classification threshold for the summary F1.
    pub threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            min_cell: 10,
            threshold: 0.5,
        }
    }
}

/// Computes the five metrics for the subgroup marked in `data`.
pub fn subgroup_metrics(data: &[LabeledScore], term: &str, config: &MetricsConfig) -> Result<SubgroupReport> {
    let mut cells: [Vec<f64>; 4] = Default::default();
    for d in data {
        if !(0.0..=1.0).contains(&d.score) {
            return Err(Error::Input(format!("score {} outside [0, 1]", d.score)));
        }
        let idx = match (d.in_subgroup, d.is_toxic) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        cells[idx].push(d.score);
    }
    let [sub_pos, sub_neg, bg_pos, bg_neg] = &cells;
    let min = config.min_cell.max(1);
    let ok = |c: &Vec<f64>| c.len() >= min;
    let pair = |a: &Vec<f64>, b: &Vec<f64>, f: fn(&[f64], &[f64]) -> Result<f64>| {
        if ok(a) && ok(b) {
            f(a, b).ok()
        } else {
            None
        }
    };
    Ok(SubgroupReport {
        term: term.to_owned(),
        subgroup_auc: pair(sub_pos, sub_neg, roc_auc),
        bpsn_auc: pair(bg_pos, sub_neg, roc_auc),
        bnsp_auc: pair(sub_pos, bg_neg, roc_auc),
        aeg_pos: pair(sub_pos, bg_pos, aeg),
        aeg_neg: pair(sub_neg, bg_neg, aeg),
        support: CellSupport {
            subgroup_toxic: sub_pos.len(),
            subgroup_nontoxic: sub_neg.len(),
            background_toxic: bg_pos.len(),
            background_nontoxic: bg_neg.len(),
        },
    })
}

/// Scored examples: the model score for each, in order.
pub fn scores_of(examples: &[LabeledExample]) -> Result<Vec<f64>> {
    examples
        .iter()
        .map(|e| {
            e.model_score
                .ok_or_else(|| Error::Input(format!("example `{}` has no model_score", e.id)))
        })
        .collect()
}

/// Reports for every term, with subgroup membership decided on normalized
/// tokens. Terms are processed in parallel; output follows `terms`.
pub fn term_reports(
    examples: &[LabeledExample],
    scores: &[f64],
    terms: &[String],
    normalization: &NormalizationConfig,
    config: &MetricsConfig,
) -> Result<Vec<SubgroupReport>> {
    if scores.len() != examples.len() {
        return Err(Error::Invariant(format!(
            "{} scores for {} examples",
            scores.len(),
            examples.len()
        )));
    }
    let token_sets: Vec<HashSet<String>> = examples
        .iter()
        .map(|e| normalize(&e.text, normalization).into_iter().collect())
        .collect();
    let report = |term: &String| {
        let data: Vec<LabeledScore> = examples
            .iter()
            .zip(scores)
            .zip(&token_sets)
            .map(|((e, &score), set)| LabeledScore {
                score,
                is_toxic: e.is_toxic(),
                in_subgroup: set.contains(term),
            })
            .collect();
        subgroup_metrics(&data, term, config)
    };
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(terms.len().max(1));
    let chunk = terms.len().div_ceil(workers).max(1);
    thread::scope(|s| {
        let handles: Vec<_> = terms
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(report).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(terms.len());
        for h in handles {
            out.extend(h.join().expect("metrics worker panicked")?);
        }
        Ok(out)
    })
}

/// Unweighted means of each metric, skipping undefined entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub n_terms: usize,
    pub means: [Option<f64>; 5],
    pub skipped: [usize; 5],
}

impl MetricMeans {
    pub fn of<'a>(reports: impl IntoIterator<Item = &'a SubgroupReport>) -> Self {
        let mut sums = [0.0; 5];
        let mut counts = [0usize; 5];
        let mut skipped = [0usize; 5];
        let mut n_terms = 0;
        for r in reports {
            n_terms += 1;
            for (i, v) in r.values().into_iter().enumerate() {
                match v {
                    Some(v) => {
                        sums[i] += v;
                        counts[i] += 1;
                    }
                    None => skipped[i] += 1,
                }
            }
        }
        let means = std::array::from_fn(|i| (counts[i] > 0).then(|| sums[i] / counts[i] as f64));
        MetricMeans {
            n_terms,
            means,
            skipped,
        }
    }
}

/// Per-cluster metric means. Every report's term must be assigned.
pub fn cluster_aggregate(
    reports: &[SubgroupReport],
    assignments: &BTreeMap<String, usize>,
) -> Result<BTreeMap<usize, MetricMeans>> {
    let mut groups: BTreeMap<usize, Vec<&SubgroupReport>> = BTreeMap::new();
    for r in reports {
        let c = assignments
            .get(&r.term)
            .ok_or_else(|| Error::Input(format!("term `{}` has no cluster assignment", r.term)))?;
        groups.entry(*c).or_default().push(r);
    }
    Ok(groups
        .into_iter()
        .map(|(c, rs)| (c, MetricMeans::of(rs)))
        .collect())
}

/// Overall scorer quality on the labeled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallPerformance {
    pub n: usize,
    pub auc: Option<f64>,
    pub f1: Option<f64>,
}

pub fn overall_performance(examples: &[LabeledExample], scores: &[f64], threshold: f64) -> OverallPerformance {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (e, &s) in examples.iter().zip(scores) {
        let predicted = s >= threshold;
        if e.is_toxic() {
            pos.push(s);
            if predicted {
                tp += 1;
            } else {
                fneg += 1;
            }
        } else {
            neg.push(s);
            if predicted {
                fp += 1;
            }
        }
    }
    let f1 = (tp + fp + fneg > 0).then(|| 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64);
    OverallPerformance {
        n: examples.len(),
        auc: roc_auc(&pos, &neg).ok(),
        f1,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_owned(), |x| x.to_string())
}

pub fn write_reports<W: Write>(reports: &[SubgroupReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["term"];
    header.extend(METRIC_NAMES);
    header.extend(["subgroup_toxic", "subgroup_nontoxic", "background_toxic", "background_nontoxic"]);
    w.write_record(&header).map_err(csv_err)?;
    for r in reports {
        let mut row = vec![r.term.clone()];
        row.extend(r.values().into_iter().map(fmt_opt));
        let s = r.support;
        row.extend(
            [s.subgroup_toxic, s.subgroup_nontoxic, s.background_toxic, s.background_nontoxic].map(|n| n.to_string()),
        );
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_cluster_means<W: Write>(clusters: &BTreeMap<usize, MetricMeans>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["cluster".to_owned(), "n_terms".to_owned()];
    header.extend(METRIC_NAMES.map(String::from));
    header.extend(METRIC_NAMES.map(|m| format!("{m}_skipped")));
    w.write_record(&header).map_err(csv_err)?;
    for (c, m) in clusters {
        let mut row = vec![c.to_string(), m.n_terms.to_string()];
        row.extend(m.means.map(fmt_opt));
        row.extend(m.skipped.map(|n| n.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per cluster plus an `all` row: metric means next to the
/// scorer's overall F1 and AUC.
pub fn write_summary<W: Write>(
    overall: &OverallPerformance,
    all: &MetricMeans,
    clusters: &BTreeMap<usize, MetricMeans>,
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["group", "n_terms", "f1", "auc"];
    header.extend(METRIC_NAMES);
    w.write_record(&header).map_err(csv_err)?;
    let mut row = |name: String, m: &MetricMeans| {
        let mut r = vec![name, m.n_terms.to_string(), fmt_opt(overall.f1), fmt_opt(overall.auc)];
        r.extend(m.means.map(fmt_opt));
        w.write_record(&r).map_err(csv_err)
    };
    row("all".into(), all)?;
    for (c, m) in clusters {
        row(format!("C{c}"), m)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise_u(a: &[f64], b: &[f64]) -> f64 {
        let mut u = 0.0;
        for x in a {
            for y in b {
                if x > y {
                    u += 1.0;
                } else if x == y {
                    u += 0.5;
                }
            }
        }
        u
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8], &[0.7, 0.1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5], &[0.5]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.8, 0.3], &[0.5, 0.4]).unwrap(), pairwise_u(&[0.8, 0.3], &[0.5, 0.4]) / 4.0);
        assert!(matches!(roc_auc(&[], &[0.1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn aeg_examples() {
        assert_eq!(aeg(&[0.9, 0.9], &[0.1, 0.1]).unwrap(), 0.5);
        assert_eq!(aeg(&[0.1, 0.1], &[0.9, 0.9]).unwrap(), -0.5);
        assert_eq!(aeg(&[0.3, 0.7], &[0.7, 0.3]).unwrap(), 0.0);
        assert!(aeg(&[0.3], &[]).is_err());
    }

    fn ls(score: f64, is_toxic: bool, in_subgroup: bool) -> LabeledScore {
        LabeledScore {
            score,
            is_toxic,
            in_subgroup,
        }
    }

    fn loose() -> MetricsConfig {
        MetricsConfig {
            min_cell: 1,
            ..Default::default()
        }
    }

    #[test]
    fn perfect_ranking_gives_unit_aucs() {
        let data = vec![
            ls(0.9, true, true),
            ls(0.8, true, false),
            ls(0.2, false, true),
            ls(0.1, false, false),
        ];
        let r = subgroup_metrics(&data, "t", &loose()).unwrap();
        assert_eq!((r.subgroup_auc, r.bpsn_auc, r.bnsp_auc), (Some(1.0), Some(1.0), Some(1.0)));
    }

    #[test]
    fn benign_subgroup_scored_high_has_low_bpsn() {
        let data = vec![
            ls(0.9, true, true),
            ls(0.95, true, true),
            ls(0.7, false, true),
            ls(0.75, false, true),
            ls(0.6, true, false),
            ls(0.65, true, false),
            ls(0.1, false, false),
            ls(0.2, false, false),
        ];
        let r = subgroup_metrics(&data, "t", &loose()).unwrap();
        let bpsn = pairwise_u(&[0.6, 0.65], &[0.7, 0.75]) / 4.0;
        assert_eq!(r.bpsn_auc, Some(bpsn));
        assert!(bpsn < 0.5);
        assert!(r.aeg_neg.unwrap() > 0.0);
    }

    #[test]
    fn whole_dataset_subgroup() {
        let data = vec![ls(0.9, true, true), ls(0.4, true, true), ls(0.5, false, true)];
        let r = subgroup_metrics(&data, "t", &loose()).unwrap();
        assert_eq!(r.subgroup_auc, Some(roc_auc(&[0.9, 0.4], &[0.5]).unwrap()));
        assert_eq!((r.bpsn_auc, r.bnsp_auc, r.aeg_pos, r.aeg_neg), (None, None, None, None));
    }

    #[test]
    fn small_cells_are_flagged() {
        let data: Vec<LabeledScore> = (0..30).map(|i| ls(i as f64 / 30.0, i % 2 == 0, i < 12)).collect();
        let r = subgroup_metrics(&data, "t", &MetricsConfig::default()).unwrap();
        assert_eq!(r.support.subgroup_toxic, 6);
        assert!(r.subgroup_auc.is_none());
        assert!(r.bpsn_auc.is_none());
    }

    fn report(term: &str, v: [Option<f64>; 5]) -> SubgroupReport {
        SubgroupReport {
            term: term.into(),
            subgroup_auc: v[0],
            bpsn_auc: v[1],
            bnsp_auc: v[2],
            aeg_pos: v[3],
            aeg_neg: v[4],
            support: CellSupport::default(),
        }
    }

    #[test]
    fn cluster_means_skip_undefined() {
        let reports = vec![
            report("a", [Some(0.8), Some(0.5), None, Some(0.1), Some(0.0)]),
            report("b", [Some(0.9), None, None, Some(0.3), Some(0.0)]),
            report("c", [Some(0.7), Some(0.7), Some(0.6), None, None]),
        ];
        let assign: BTreeMap<String, usize> =
            [("a", 0), ("b", 0), ("c", 1)].iter().map(|(t, c)| (t.to_string(), *c)).collect();
        let agg = cluster_aggregate(&reports, &assign).unwrap();
        assert!((agg[&0].means[0].unwrap() - 0.85).abs() < 1e-15);
        assert_eq!(agg[&0].means[1], Some(0.5));
        assert_eq!(agg[&0].skipped, [0, 1, 2, 0, 0]);
        assert_eq!(agg[&1].means, reports[2].values());
        let all = MetricMeans::of(&reports);
        assert_eq!(all.skipped[1], 1);
        let mut partial = assign.clone();
        partial.remove("c");
        assert!(cluster_aggregate(&reports, &partial).is_err());
    }

    #[test]
    fn overall_f1() {
        let ex: Vec<LabeledExample> = [0.9, 0.8, 0.1, 0.2]
            .iter()
            .enumerate()
            .map(|(i, r)| LabeledExample::new(i.to_string(), "x", *r))
            .collect();
        let p = overall_performance(&ex, &[0.7, 0.3, 0.6, 0.1], 0.5);
        // tp 1, fn 1, fp 1
        assert_eq!(p.f1, Some(0.5));
        assert_eq!(p.auc, Some(0.75));
    }

    fn scores() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec((0u8..12).prop_map(|x| x as f64 / 11.0), 1..50)
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_oracle(a in scores(), b in scores()) {
            let oracle = pairwise_u(&a, &b) / (a.len() * b.len()) as f64;
            prop_assert_eq!(roc_auc(&a, &b).unwrap(), oracle);
        }

        #[test]
        fn auc_complement_is_exact(a in scores(), b in scores()) {
            prop_assert_eq!(roc_auc(&a, &b).unwrap() + roc_auc(&b, &a).unwrap(), 1.0);
        }

        #[test]
        fn auc_is_rank_invariant(a in scores(), b in scores()) {
            let f = |v: &Vec<f64>| v.iter().map(|x| (3.0 * x).exp()).collect::<Vec<_>>();
            prop_assert_eq!(roc_auc(&a, &b).unwrap(), roc_auc(&f(&a), &f(&b)).unwrap());
        }

        #[test]
        fn aeg_properties(a in scores(), b in scores()) {
            prop_assert_eq!(aeg(&a, &a).unwrap(), 0.0);
            prop_assert_eq!(aeg(&a, &b).unwrap(), -aeg(&b, &a).unwrap());
            prop_assert!(aeg(&a, &b).unwrap().abs() <= 0.5);
        }
    }
}
