//! End-to-end audit runs driven by a declarative [`RunConfig`]. Each stage
//! writes its artifacts plus a `manifest.json` into its own directory under
//! the output directory; downstream stages verify upstream artifacts
//! against those manifests before reading them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_balanced_toxic_corpus, read_documents, CountryPartition, Document, LabelRule,
    NormalizationConfig,
};
use crate::error::{Error, Result};
use crate::hashing::sha256_hex;
use crate::mitigation::{self, eligible_terms, read_examples, write_examples, LabeledExample, MitigationSpec};
use crate::perturbation::{
    build_vectors, cluster_profile, cluster_vectors, filter_pos, read_assignments, read_vectors,
    rescore_baselines, scan_k, write_assignments, write_profiles, write_vectors, KMeansParams,
    TemplateSet, VectorMode, NEUTRAL_TERM,
};
use crate::saliency::{phase1_select, read_terms, write_candidates, SaliencyConfig};
use crate::scorer::{CachedScorer, MockLexicon, MockScorer, ScoreCache, Scorer, ScorerConfig};
use crate::subgroup_metrics::{
    cluster_aggregate, overall_performance, scores_of, term_reports, write_cluster_means,
    write_reports, write_summary, MetricMeans, MetricsConfig,
};

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// Environment variable holding the remote scorer's bearer token.
pub const TOKEN_ENV: &str = "LEXAUDIT_SCORER_TOKEN";

pub const MANIFEST: &str = "manifest.json";
pub const TIMINGS: &str = "timings.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Mock,
    Remote,
}

/// Which scorer to use. Exactly one of `mock`, `mock_lexicon` and `remote`
/// may be given unless `kind` picks one explicitly.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerSelection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<ScorerKind>,
    /// Append-only score cache file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockLexicon>,
    /// JSON file holding a mock lexicon.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mock_lexicon: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub remote: Option<ScorerConfig>,
}

impl ScorerSelection {
    pub fn resolved_kind(&self) -> Result<ScorerKind> {
        let has_mock = self.mock.is_some() || self.mock_lexicon.is_some();
        if self.mock.is_some() && self.mock_lexicon.is_some() {
            return Err(Error::Config("give either scorer.mock or scorer.mock_lexicon, not both".into()));
        }
        match (self.kind, has_mock, self.remote.is_some()) {
            (Some(ScorerKind::Mock), true, _) => Ok(ScorerKind::Mock),
            (Some(ScorerKind::Remote), _, true) => Ok(ScorerKind::Remote),
            (Some(k), _, _) => Err(Error::Config(format!("scorer kind {k:?} selected but not configured"))),
            (None, true, false) => Ok(ScorerKind::Mock),
            (None, false, true) => Ok(ScorerKind::Remote),
            (None, true, true) => Err(Error::Config(
                "both a mock and a remote scorer are configured; set scorer.kind".into(),
            )),
            (None, false, false) => Err(Error::Config("no scorer configured".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase2Config {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub n_init: usize,
    pub mode: VectorMode,
    /// Re-score template baselines with the active scorer.
    pub rescore_baselines: bool,
    pub neutral_term: String,
    /// Keep only terms tagged mostly NOUN or PROPN (needs tagged documents).
    pub pos_filter: bool,
    pub scan_min: usize,
    pub scan_max: usize,
}

impl Default for Phase2Config {
    fn default() -> Self {
        let km = KMeansParams::default();
        Phase2Config {
            k: km.k,
            max_iters: km.max_iters,
            tol: km.tol,
            n_init: km.n_init,
            mode: VectorMode::Raw,
            rescore_baselines: true,
            neutral_term: NEUTRAL_TERM.into(),
            pos_filter: false,
            scan_min: 3,
            scan_max: 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    /// Score the dataset with the configured scorer.
    #[default]
    Scorer,
    /// Use each example's `model_score`.
    Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsOptions {
    pub min_cell: usize,
    pub threshold: f64,
    pub score_source: ScoreSource,
    /// Restrict reports to terms with ten or more instances per label.
    pub eligible_only: bool,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        let m = MetricsConfig::default();
        MetricsOptions {
            min_cell: m.min_cell,
            threshold: m.threshold,
            score_source: ScoreSource::Scorer,
            eligible_only: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Corpus for phase 1 (newline-delimited JSON documents).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub documents: Option<PathBuf>,
    /// Labeled dataset for metrics and mitigation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Template fixture; the bundled set when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
    /// Term list for phase 2 instead of the phase-1 candidates.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub terms: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub shards: usize,
    pub normalization: NormalizationConfig,
    pub labels: LabelRule,
    pub saliency: SaliencyConfig,
    pub scorer: ScorerSelection,
    pub phase2: Phase2Config,
    pub metrics: MetricsOptions,
    pub mitigation: MitigationSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            documents: None,
            dataset: None,
            templates: None,
            terms: None,
            output_dir: PathBuf::from("lexaudit-out"),
            seed: 0,
            shards: 4,
            normalization: NormalizationConfig::default(),
            labels: LabelRule::default(),
            saliency: SaliencyConfig::default(),
            scorer: ScorerSelection::default(),
            phase2: Phase2Config::default(),
            metrics: MetricsOptions::default(),
            mitigation: MitigationSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.saliency.validate()?;
        self.mitigation.validate()?;
        if self.shards == 0 {
            return Err(Error::Config("shards must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.labels.threshold) || !(0.0..=1.0).contains(&self.metrics.threshold) {
            return Err(Error::Config("thresholds must lie in [0, 1]".into()));
        }
        let p = &self.phase2;
        if p.k == 0 || p.n_init == 0 || p.max_iters == 0 || p.tol.is_nan() || p.tol < 0.0 {
            return Err(Error::Config("phase2 needs k, n_init, max_iters >= 1 and tol >= 0".into()));
        }
        if p.scan_min == 0 || p.scan_min > p.scan_max {
            return Err(Error::Config("phase2 scan range must satisfy 1 <= scan_min <= scan_max".into()));
        }
        Ok(())
    }

    fn kmeans(&self) -> KMeansParams {
        KMeansParams {
            k: self.phase2.k,
            seed: self.seed,
            max_iters: self.phase2.max_iters,
            tol: self.phase2.tol,
            n_init: self.phase2.n_init,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Provenance for one stage run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub tool_version: String,
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scorer_id: Option<String>,
    /// Input files, as named in the configuration.
    pub inputs: Vec<FileDigest>,
    /// Upstream manifests, relative to the output directory.
    pub upstream: Vec<FileDigest>,
    /// Artifacts, relative to the stage directory.
    pub outputs: Vec<FileDigest>,
    #[serde(default)]
    pub details: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub diagnostics: Vec<String>,
}

impl RunManifest {
    pub fn output(&self, name: &str) -> Option<&FileDigest> {
        self.outputs.iter().find(|o| o.path == name)
    }
}

/// Summary returned by each stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: &'static str,
    pub dir: PathBuf,
    pub outputs: Vec<FileDigest>,
    pub diagnostics: Vec<String>,
}

struct StageWriter {
    stage: &'static str,
    dir: PathBuf,
    outputs: Vec<FileDigest>,
    inputs: Vec<FileDigest>,
    upstream: Vec<FileDigest>,
    details: BTreeMap<String, serde_json::Value>,
    diagnostics: Vec<String>,
    scorer_id: Option<String>,
}

impl StageWriter {
    fn new(stage: &'static str, dir: PathBuf) -> Result<Self> {
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        Ok(StageWriter {
            stage,
            dir,
            outputs: Vec::new(),
            inputs: Vec::new(),
            upstream: Vec::new(),
            details: BTreeMap::new(),
            diagnostics: Vec::new(),
            scorer_id: None,
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.outputs.push(FileDigest {
            path: name.to_owned(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    fn detail(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.details.insert(key.to_owned(), serde_json::to_value(value)?);
        Ok(())
    }

    fn finish(self, config: &RunConfig) -> Result<StageOutcome> {
        let manifest = RunManifest {
            stage: self.stage.to_owned(),
            tool_version: TOOL_VERSION.to_owned(),
            config: config.clone(),
            scorer_id: self.scorer_id,
            inputs: self.inputs,
            upstream: self.upstream,
            outputs: self.outputs.clone(),
            details: self.details,
            diagnostics: self.diagnostics.clone(),
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        fs::write(self.dir.join(MANIFEST), bytes)?;
        Ok(StageOutcome {
            stage: self.stage,
            dir: self.dir,
            outputs: self.outputs,
            diagnostics: self.diagnostics,
        })
    }
}

/// A configured audit run rooted at `base_dir`, against which relative
/// paths in the configuration resolve.
#[derive(Debug, Clone)]
pub struct Pipeline {
    config: RunConfig,
    base_dir: PathBuf,
    auth_token: Option<String>,
}

impl Pipeline {
    pub fn new(config: RunConfig, base_dir: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        config.scorer.resolved_kind()?;
        let p = Pipeline {
            config,
            base_dir: base_dir.into(),
            auth_token: None,
        };
        let c = &p.config;
        for (field, value) in [
            ("documents", &c.documents),
            ("dataset", &c.dataset),
            ("templates", &c.templates),
            ("terms", &c.terms),
            ("scorer.mock_lexicon", &c.scorer.mock_lexicon),
        ] {
            if value.is_some() {
                p.required(field, value)?;
            }
        }
        Ok(p)
    }

    /// Reads a TOML configuration; relative paths resolve against its
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<(RunConfig, PathBuf)> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let config = RunConfig::from_toml(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((config, base))
    }

    pub fn with_auth_token(mut self, token: Option<String>) -> Self {
        self.auth_token = token;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_owned()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output_dir)
    }

    fn stage_dir(&self, stage: &str) -> PathBuf {
        self.output_dir().join(stage)
    }

    fn required(&self, field: &str, value: &Option<PathBuf>) -> Result<PathBuf> {
        let p = value
            .as_ref()
            .ok_or_else(|| Error::Config(format!("`{field}` is not set")))?;
        let full = self.resolve(p);
        if !full.is_file() {
            return Err(Error::Config(format!("`{field}` file {} does not exist", full.display())));
        }
        Ok(full)
    }

    /// Reads an input file and records its digest.
    fn read_input(&self, w: &mut StageWriter, field: &str, value: &Option<PathBuf>) -> Result<Vec<u8>> {
        let full = self.required(field, value)?;
        let bytes = fs::read(&full)?;
        w.inputs.push(FileDigest {
            path: value.as_ref().expect("checked").display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(bytes)
    }

    fn upstream_manifest(&self, stage: &str) -> Result<RunManifest> {
        let path = self.stage_dir(stage).join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|_| {
            Error::Input(format!("no `{stage}` manifest at {}; run `{stage}` first", path.display()))
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Reads an upstream artifact after checking it against its manifest.
    fn read_upstream(&self, w: &mut StageWriter, stage: &str, name: &str) -> Result<String> {
        let manifest_path = self.stage_dir(stage).join(MANIFEST);
        let manifest = self.upstream_manifest(stage)?;
        let rel = format!("{stage}/{MANIFEST}");
        if !w.upstream.iter().any(|u| u.path == rel) {
            w.upstream.push(FileDigest {
                path: rel,
                sha256: sha256_hex(&fs::read(&manifest_path)?),
            });
        }
        let expected = manifest
            .output(name)
            .ok_or_else(|| Error::Input(format!("`{stage}` manifest lists no `{name}`")))?;
        let path = self.stage_dir(stage).join(name);
        let bytes = fs::read(&path)?;
        let actual = sha256_hex(&bytes);
        if actual != expected.sha256 {
            return Err(Error::DigestMismatch {
                path: path.display().to_string(),
                expected: expected.sha256.clone(),
                actual,
            });
        }
        String::from_utf8(bytes).map_err(|_| Error::Input(format!("{} is not UTF-8", path.display())))
    }

    fn record_timing(&self, stage: &str, seconds: f64) -> Result<()> {
        let path = self.output_dir().join(TIMINGS);
        let mut timings: BTreeMap<String, f64> = fs::read_to_string(&path)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default();
        timings.insert(stage.to_owned(), seconds);
        fs::write(&path, serde_json::to_vec_pretty(&timings)?)?;
        Ok(())
    }

    fn timed(&self, stage: &'static str, f: impl FnOnce() -> Result<StageOutcome>) -> Result<StageOutcome> {
        let start = Instant::now();
        let out = f()?;
        let secs = start.elapsed().as_secs_f64();
        info!("{stage} finished in {secs:.2}s");
        self.record_timing(stage, secs)?;
        Ok(out)
    }

    /// The configured scorer, wrapped in the score cache if one is set.
    pub fn scorer(&self) -> Result<Box<dyn Scorer>> {
        self.build_scorer(None)
    }

    fn build_scorer(&self, w: Option<&mut StageWriter>) -> Result<Box<dyn Scorer>> {
        let sel = &self.config.scorer;
        let inner: Box<dyn Scorer> = match sel.resolved_kind()? {
            ScorerKind::Mock => {
                let lexicon = match (&sel.mock, &sel.mock_lexicon) {
                    (Some(l), _) => l.clone(),
                    (None, p) => {
                        let bytes = match w {
                            Some(w) => self.read_input(w, "scorer.mock_lexicon", p)?,
                            None => fs::read(self.required("scorer.mock_lexicon", p)?)?,
                        };
                        serde_json::from_slice(&bytes)
                            .map_err(|e| Error::Config(format!("mock lexicon: {e}")))?
                    }
                };
                Box::new(MockScorer::new(lexicon)?)
            }
            ScorerKind::Remote => self.remote_scorer()?,
        };
        match &sel.cache {
            Some(path) => Ok(Box::new(CachedScorer::new(inner, ScoreCache::open(self.resolve(path))?))),
            None => Ok(inner),
        }
    }

    #[cfg(feature = "remote")]
    fn remote_scorer(&self) -> Result<Box<dyn Scorer>> {
        let mut cfg = self.config.scorer.remote.clone().expect("resolved kind is remote");
        cfg.auth_token = self.auth_token.clone();
        if cfg.auth_token.is_none() {
            log::warn!("{TOKEN_ENV} is not set; calling the scorer without credentials");
        }
        Ok(Box::new(crate::scorer::RemoteScorer::new(cfg)?))
    }

    #[cfg(not(feature = "remote"))]
    fn remote_scorer(&self) -> Result<Box<dyn Scorer>> {
        Err(Error::Config("this build has no remote scorer support".into()))
    }

    fn templates(&self, w: &mut StageWriter) -> Result<TemplateSet> {
        match &self.config.templates {
            Some(_) => {
                let bytes = self.read_input(w, "templates", &self.config.templates)?;
                let text = String::from_utf8(bytes).map_err(|_| Error::Input("templates file is not UTF-8".into()))?;
                TemplateSet::parse(&text, "templates")
            }
            None => Ok(TemplateSet::bundled()),
        }
    }

    fn documents(&self, w: &mut StageWriter) -> Result<Vec<Document>> {
        let bytes = self.read_input(w, "documents", &self.config.documents)?;
        let name = self.config.documents.as_ref().expect("checked").display().to_string();
        read_documents(BufReader::new(&bytes[..]), &name)
    }

    fn dataset(&self, w: &mut StageWriter) -> Result<Vec<LabeledExample>> {
        let bytes = self.read_input(w, "dataset", &self.config.dataset)?;
        let name = self.config.dataset.as_ref().expect("checked").display().to_string();
        read_examples(BufReader::new(&bytes[..]), &name)
    }

    /// Phase 1: per-country candidate terms.
    pub fn phase1(&self) -> Result<StageOutcome> {
        self.timed("phase1", || {
            let cfg = &self.config;
            let mut w = StageWriter::new("phase1", self.stage_dir("phase1"))?;
            let docs = self.documents(&mut w)?;
            if docs.is_empty() {
                return Err(Error::Input("no documents".into()));
            }
            let partition = CountryPartition::build(&docs, &cfg.normalization, &cfg.labels, cfg.shards)?;
            let balanced = build_balanced_toxic_corpus(&partition, cfg.seed)?;
            let candidates = phase1_select(&partition, &balanced, &cfg.saliency)?;

            let mut all = Vec::new();
            write_candidates(candidates.values().flatten(), &mut all)?;
            w.write("candidates.tsv", &all)?;
            let mut per_country = BTreeMap::new();
            for (country, list) in &candidates {
                let mut buf = Vec::new();
                write_candidates(list, &mut buf)?;
                w.write(&format!("candidates_{country}.tsv"), &buf)?;
                per_country.insert(country.to_string(), list.len());
                w.diagnostics.push(format!("{country}: {} candidate terms", list.len()));
            }
            for (country, cell) in partition.iter() {
                for (label, table) in [("toxic", &cell.toxic), ("nontoxic", &cell.nontoxic)] {
                    let mut buf = Vec::new();
                    table.write_tsv(&mut buf)?;
                    w.write(&format!("counts_{country}_{label}.tsv"), &buf)?;
                }
            }
            let mut buf = Vec::new();
            balanced.global.write_tsv(&mut buf)?;
            w.write("balanced_global.tsv", &buf)?;
            w.detail("documents", docs.len())?;
            w.detail("balanced_docs_per_country", balanced.docs_per_country)?;
            w.detail("candidates_per_country", per_country)?;
            w.finish(cfg)
        })
    }

    fn phase2_terms(&self, w: &mut StageWriter) -> Result<Vec<String>> {
        let text = match &self.config.terms {
            Some(_) => String::from_utf8(self.read_input(w, "terms", &self.config.terms)?)
                .map_err(|_| Error::Input("terms file is not UTF-8".into()))?,
            None => self.read_upstream(w, "phase1", "candidates.tsv")?,
        };
        let mut terms = read_terms(&text);
        terms.sort();
        terms.dedup();
        Ok(terms)
    }

    /// Phase 2: perturbation vectors, clusters and profiles.
    pub fn phase2(&self) -> Result<StageOutcome> {
        self.timed("phase2", || {
            let cfg = &self.config;
            let mut w = StageWriter::new("phase2", self.stage_dir("phase2"))?;
            let mut terms = self.phase2_terms(&mut w)?;
            if cfg.phase2.pos_filter {
                let docs = self.documents(&mut w)?;
                let before = terms.len();
                terms = filter_pos(&terms, &docs, &cfg.normalization, true)?;
                w.diagnostics.push(format!("POS filter kept {} of {before} terms", terms.len()));
            }
            let mut templates = self.templates(&mut w)?;
            let scorer = self.build_scorer(Some(&mut w))?;
            w.scorer_id = Some(scorer.id().to_owned());
            if cfg.phase2.rescore_baselines {
                templates = rescore_baselines(&templates, &scorer, &cfg.phase2.neutral_term)?;
            }
            let (vectors, failures) = build_vectors(&terms, &templates, &scorer)?;
            for f in &failures {
                w.diagnostics.push(format!(
                    "dropped `{}`: template {} failed: {}",
                    f.term,
                    f.template_index + 1,
                    f.error
                ));
            }
            if vectors.is_empty() {
                if let Some(f) = failures.into_iter().next() {
                    return Err(f.error.into());
                }
            }
            let model = cluster_vectors(&vectors, &templates, cfg.phase2.mode, &cfg.kmeans())?;
            let profiles = cluster_profile(&model, &templates)?;

            w.write("templates.tsv", templates.to_tsv().as_bytes())?;
            let mut buf = Vec::new();
            write_vectors(&vectors, &mut buf)?;
            w.write("vectors.csv", &buf)?;
            let mut buf = Vec::new();
            write_assignments(&model, &mut buf)?;
            w.write("assignments.csv", &buf)?;
            let mut buf = Vec::new();
            write_profiles(&profiles, &mut buf)?;
            w.write("profiles.csv", &buf)?;
            let mut model_json = serde_json::to_vec_pretty(&model)?;
            model_json.push(b'\n');
            w.write("model.json", &model_json)?;
            w.detail("terms", vectors.len())?;
            w.detail("cluster_sizes", model.sizes())?;
            w.detail("inertia", model.inertia)?;
            w.finish(cfg)
        })
    }

    /// Inertia across the configured range of k, on the phase-2 vectors.
    pub fn scan_k(&self) -> Result<StageOutcome> {
        self.timed("scan-k", || {
            let cfg = &self.config;
            let mut w = StageWriter::new("scan-k", self.stage_dir("scan-k"))?;
            let vectors = read_vectors(&self.read_upstream(&mut w, "phase2", "vectors.csv")?, "phase2/vectors.csv")?;
            let templates = TemplateSet::parse(
                &self.read_upstream(&mut w, "phase2", "templates.tsv")?,
                "phase2/templates.tsv",
            )?;
            let ks: Vec<usize> = (cfg.phase2.scan_min..=cfg.phase2.scan_max)
                .filter(|&k| {
                    let ok = k <= vectors.len();
                    if !ok {
                        w.diagnostics.push(format!("skipped k={k}: only {} vectors", vectors.len()));
                    }
                    ok
                })
                .collect();
            let scan = scan_k(&vectors, &templates, cfg.phase2.mode, &cfg.kmeans(), ks)?;
            let mut out = String::from("k,inertia\n");
            for (k, inertia) in &scan {
                let _ = writeln!(out, "{k},{inertia}");
            }
            w.write("inertia.csv", out.as_bytes())?;
            w.finish(cfg)
        })
    }

    /// Subgroup metrics per term and per cluster.
    pub fn metrics(&self) -> Result<StageOutcome> {
        self.timed("metrics", || {
            let cfg = &self.config;
            let mut w = StageWriter::new("metrics", self.stage_dir("metrics"))?;
            let dataset = self.dataset(&mut w)?;
            let assignments = read_assignments(
                &self.read_upstream(&mut w, "phase2", "assignments.csv")?,
                "phase2/assignments.csv",
            )?;
            let terms: Vec<String> = assignments.keys().cloned().collect();
            let scores = match cfg.metrics.score_source {
                ScoreSource::Dataset => scores_of(&dataset)?,
                ScoreSource::Scorer => {
                    let scorer = self.build_scorer(Some(&mut w))?;
                    w.scorer_id = Some(scorer.id().to_owned());
                    let texts: Vec<String> = dataset.iter().map(|e| e.text.clone()).collect();
                    scorer.score_batch(&texts).into_iter().collect::<std::result::Result<Vec<_>, _>>()?
                }
            };
            let terms = if cfg.metrics.eligible_only {
                let kept = eligible_terms(&dataset, &terms, &cfg.normalization);
                w.diagnostics.push(format!(
                    "{} of {} terms have at least {} toxic and non-toxic instances",
                    kept.len(),
                    terms.len(),
                    mitigation::MIN_INSTANCES_PER_LABEL
                ));
                kept
            } else {
                terms
            };
            let mcfg = MetricsConfig {
                min_cell: cfg.metrics.min_cell,
                threshold: cfg.metrics.threshold,
            };
            let reports = term_reports(&dataset, &scores, &terms, &cfg.normalization, &mcfg)?;
            let clusters = cluster_aggregate(&reports, &assignments)?;
            let all = MetricMeans::of(&reports);
            let overall = overall_performance(&dataset, &scores, cfg.metrics.threshold);

            let mut buf = Vec::new();
            write_reports(&reports, &mut buf)?;
            w.write("terms.csv", &buf)?;
            let mut buf = Vec::new();
            write_cluster_means(&clusters, &mut buf)?;
            w.write("clusters.csv", &buf)?;
            let mut buf = Vec::new();
            write_summary(&overall, &all, &clusters, &mut buf)?;
            w.write("summary.csv", &buf)?;
            let mut list = terms.join("\n");
            list.push('\n');
            w.write("eligible_terms.txt", list.as_bytes())?;
            w.detail("overall", &overall)?;
            w.finish(cfg)
        })
    }

    /// Mitigation dataset transform.
    pub fn mitigate(&self) -> Result<StageOutcome> {
        self.timed("mitigate", || {
            let cfg = &self.config;
            let mut w = StageWriter::new("mitigate", self.stage_dir("mitigate"))?;
            let dataset = self.dataset(&mut w)?;
            let mut spec = cfg.mitigation.clone();
            if spec.target_terms.is_empty() {
                spec.target_terms = read_terms(&self.read_upstream(&mut w, "metrics", "eligible_terms.txt")?);
            }
            let outcome = mitigation::apply(&dataset, &spec, &cfg.normalization)?;
            let mut buf = Vec::new();
            write_examples(&outcome.examples, &mut buf)?;
            w.write("dataset.jsonl", &buf)?;
            if !outcome.selections.is_empty() {
                let mut sel = serde_json::to_vec_pretty(&outcome.selections)?;
                sel.push(b'\n');
                w.write("selections.json", &sel)?;
            }
            w.diagnostics.extend(outcome.diagnostics);
            w.detail("strategy", spec.strategy)?;
            w.detail("terms", &spec.target_terms)?;
            w.detail("k", spec.k)?;
            w.detail("seed", spec.seed)?;
            w.detail("quota_formula", spec.quota_formula)?;
            w.detail("instances_in", dataset.len())?;
            w.detail("instances_out", outcome.examples.len())?;
            w.finish(cfg)
        })
    }

    /// A Markdown digest of every stage present, after verifying each
    /// stage's artifacts.
    pub fn report(&self) -> Result<StageOutcome> {
        self.timed("report", || {
            let cfg = &self.config;
            let mut w = StageWriter::new("report", self.stage_dir("report"))?;
            let mut md = String::from("# Lexical bias audit\n\n");
            let _ = writeln!(md, "Tool: {TOOL_VERSION}\n");
            let mut found = 0;
            for stage in ["phase1", "phase2", "scan-k", "metrics", "mitigate"] {
                let Ok(manifest) = self.upstream_manifest(stage) else {
                    continue;
                };
                found += 1;
                let _ = writeln!(md, "## {stage}\n");
                if let Some(id) = &manifest.scorer_id {
                    let _ = writeln!(md, "Scorer: `{id}`\n");
                }
                for o in &manifest.outputs {
                    self.read_upstream(&mut w, stage, &o.path)?;
                    let _ = writeln!(md, "- `{}` sha256 `{}`", o.path, &o.sha256[..16]);
                }
                md.push('\n');
                for d in &manifest.diagnostics {
                    let _ = writeln!(md, "> {d}");
                }
                if !manifest.diagnostics.is_empty() {
                    md.push('\n');
                }
                match stage {
                    "phase2" => {
                        let text = self.read_upstream(&mut w, stage, "assignments.csv")?;
                        let assignments = read_assignments(&text, "phase2/assignments.csv")?;
                        let mut by_cluster: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
                        for (t, c) in &assignments {
                            by_cluster.entry(*c).or_default().push(t);
                        }
                        for (c, members) in by_cluster {
                            let shown: Vec<&str> = members.iter().take(8).copied().collect();
                            let _ = writeln!(md, "- C{c} ({} terms): {}", members.len(), shown.join(", "));
                        }
                        md.push('\n');
                    }
                    "metrics" => {
                        let text = self.read_upstream(&mut w, stage, "summary.csv")?;
                        md.push_str(&csv_to_markdown(&text));
                        md.push('\n');
                    }
                    _ => {}
                }
            }
            if found == 0 {
                return Err(Error::Input("no stage manifests found; nothing to report".into()));
            }
            w.write("report.md", md.as_bytes())?;
            w.finish(cfg)
        })
    }

    /// Runs every stage whose inputs are configured.
    pub fn run_all(&self) -> Result<Vec<StageOutcome>> {
        let mut out = Vec::new();
        if self.config.documents.is_some() {
            out.push(self.phase1()?);
        }
        out.push(self.phase2()?);
        out.push(self.scan_k()?);
        if self.config.dataset.is_some() {
            out.push(self.metrics()?);
            out.push(self.mitigate()?);
        }
        out.push(self.report()?);
        Ok(out)
    }
}

fn csv_to_markdown(text: &str) -> String {
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
        if i == 0 {
            let _ = writeln!(out, "|{}", " --- |".repeat(cells.len()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scorer_selection_rules() {
        let mut s = ScorerSelection::default();
        assert!(s.resolved_kind().is_err());
        s.mock = Some(MockLexicon::new(0.0));
        assert_eq!(s.resolved_kind().unwrap(), ScorerKind::Mock);
        s.remote = Some(ScorerConfig {
            endpoint: "http://localhost:1".into(),
            ..Default::default()
        });
        assert!(s.resolved_kind().is_err());
        s.kind = Some(ScorerKind::Remote);
        assert_eq!(s.resolved_kind().unwrap(), ScorerKind::Remote);
        s.mock_lexicon = Some("x.json".into());
        assert!(s.resolved_kind().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut c = RunConfig {
            documents: Some("corpus.jsonl".into()),
            ..RunConfig::default()
        };
        c.scorer.mock = Some(MockLexicon::new(-2.0).with_weight("bad", 3.0));
        c.phase2.k = 3;
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::Input("x".into()).exit_code(), 3);
        assert_eq!(
            Error::Score(crate::ScoreError::Protocol("x".into())).exit_code(),
            4
        );
        assert_eq!(Error::Invariant("x".into()).exit_code(), 5);
    }
}
