use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;

use lexaudit::mitigation::{QuotaFormula, Strategy};
use lexaudit::perturbation::VectorMode;
use lexaudit::pipeline::{Pipeline, RunConfig, ScoreSource, ScorerKind, StageOutcome, TOKEN_ENV};
use lexaudit::saliency::{CountryTest, TailReading};
use lexaudit::scorer::ScorerConfig;
use lexaudit::synth::{write_workspace, WorkspaceSpec};
use lexaudit::Error;

#[derive(Parser, Debug)]
#[command(name = "lexaudit", version, about = "Audit a toxicity scorer for region-specific lexical bias")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(short, long, global = true, default_value = "lexaudit.toml")]
    config: PathBuf,

    /// Log progress; repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Select country-specific candidate terms from the corpus.
    Phase1,
    /// Score template perturbations and cluster the terms.
    Phase2,
    /// Report k-means inertia over the configured range of k.
    ScanK,
    /// Per-term and per-cluster subgroup bias metrics.
    Metrics,
    /// Transform the labeled dataset to mitigate term bias.
    Mitigate,
    /// Summarize every completed stage in Markdown.
    Report,
    /// Run every stage whose inputs are configured.
    Run,
    /// Write a synthetic example workspace with a config to run.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Directory to create.
    #[arg(long, default_value = "lexaudit-example")]
    dir: PathBuf,
    #[arg(long, default_value_t = 5_000)]
    docs_per_country: usize,
    #[arg(long, default_value_t = 5_000)]
    labeled: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Flags that override fields of the configuration file.
#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long, global = true)]
    documents: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    templates: Option<PathBuf>,
    #[arg(long, global = true)]
    terms: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    shards: Option<usize>,
    /// Score at or above which a corpus document is toxic.
    #[arg(long, global = true)]
    label_threshold: Option<f64>,
    #[arg(long, global = true)]
    z_threshold: Option<f64>,
    #[arg(long, global = true)]
    p_threshold: Option<f64>,
    #[arg(long, global = true)]
    min_count: Option<u64>,
    #[arg(long, global = true, value_enum)]
    tail: Option<TailArg>,
    #[arg(long, global = true, value_enum)]
    country_test: Option<CountryTestArg>,
    #[arg(long, global = true, value_enum)]
    scorer: Option<ScorerArg>,
    /// Remote scorer endpoint.
    #[arg(long, global = true)]
    endpoint: Option<String>,
    /// Score cache file.
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    /// Number of clusters.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Classification threshold for metrics.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    #[arg(long, global = true)]
    min_cell: Option<usize>,
    #[arg(long, global = true, value_enum)]
    score_source: Option<ScoreSourceArg>,
    #[arg(long, global = true, value_enum)]
    strategy: Option<StrategyArg>,
    #[arg(long, global = true, value_enum)]
    quota_formula: Option<QuotaArg>,
    /// Per-label target k for balanced selection.
    #[arg(long, global = true)]
    quota_k: Option<usize>,
    /// Comma-separated mitigation targets.
    #[arg(long, global = true, value_delimiter = ',')]
    target: Vec<String>,
}

macro_rules! mirror {
    ($name:ident => $target:ty { $($v:ident),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, ValueEnum)]
        enum $name { $($v),+ }
        impl From<$name> for $target {
            fn from(a: $name) -> Self {
                match a { $($name::$v => <$target>::$v),+ }
            }
        }
    };
}

mirror!(TailArg => TailReading { Upper, Lower });
mirror!(CountryTestArg => CountryTest { BetaPosterior, OneVsRestLogOdds });
mirror!(ScorerArg => ScorerKind { Mock, Remote });
mirror!(ModeArg => VectorMode { Raw, Deviation });
mirror!(ScoreSourceArg => ScoreSource { Scorer, Dataset });
mirror!(StrategyArg => Strategy { Deletion, Substitution, BalanceTune });
mirror!(QuotaArg => QuotaFormula { Max, Min });

impl Overrides {
    fn apply(self, c: &mut RunConfig) {
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value {
                    $field = v.into();
                }
            };
        }
        if self.documents.is_some() {
            c.documents = self.documents;
        }
        if self.dataset.is_some() {
            c.dataset = self.dataset;
        }
        if self.templates.is_some() {
            c.templates = self.templates;
        }
        if self.terms.is_some() {
            c.terms = self.terms;
        }
        set!(c.output_dir, self.out);
        set!(c.seed, self.seed);
        set!(c.shards, self.shards);
        set!(c.labels.threshold, self.label_threshold);
        set!(c.saliency.z_threshold, self.z_threshold);
        set!(c.saliency.p_threshold, self.p_threshold);
        set!(c.saliency.min_count, self.min_count);
        set!(c.saliency.tail, self.tail);
        set!(c.saliency.country_test, self.country_test);
        if let Some(kind) = self.scorer {
            c.scorer.kind = Some(kind.into());
        }
        if let Some(endpoint) = self.endpoint {
            c.scorer.remote.get_or_insert_with(ScorerConfig::default).endpoint = endpoint;
        }
        if self.cache.is_some() {
            c.scorer.cache = self.cache;
        }
        set!(c.phase2.k, self.k);
        set!(c.phase2.mode, self.mode);
        set!(c.metrics.threshold, self.threshold);
        set!(c.metrics.min_cell, self.min_cell);
        set!(c.metrics.score_source, self.score_source);
        set!(c.mitigation.strategy, self.strategy);
        set!(c.mitigation.quota_formula, self.quota_formula);
        set!(c.mitigation.k, self.quota_k);
        if !self.target.is_empty() {
            c.mitigation.target_terms = self.target;
        }
        // --seed also reseeds balanced sampling
        if let Some(seed) = self.seed {
            c.mitigation.seed = seed;
        }
    }
}

fn stage_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Phase1 => "phase1",
        Command::Phase2 => "phase2",
        Command::ScanK => "scan-k",
        Command::Metrics => "metrics",
        Command::Mitigate => "mitigate",
        Command::Report => "report",
        Command::Run => "run",
        Command::Synth(_) => "synth",
    }
}

fn print_outcome(o: &StageOutcome) {
    println!("{}: wrote {} files to {}", o.stage, o.outputs.len(), o.dir.display());
    for d in &o.diagnostics {
        println!("  {d}");
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Command::Synth(a) = &cli.command {
        let spec = WorkspaceSpec {
            docs_per_country: a.docs_per_country,
            labeled: a.labeled,
            seed: a.seed,
        };
        let config = write_workspace(&a.dir, &spec)?;
        println!("wrote example workspace; run `lexaudit -c {} run`", config.display());
        return Ok(());
    }
    let (mut config, base) = Pipeline::load(&cli.config)?;
    cli.overrides.apply(&mut config);
    let token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
    let pipeline = Pipeline::new(config, base)?.with_auth_token(token);
    let outcomes = match cli.command {
        Command::Phase1 => vec![pipeline.phase1()?],
        Command::Phase2 => vec![pipeline.phase2()?],
        Command::ScanK => vec![pipeline.scan_k()?],
        Command::Metrics => vec![pipeline.metrics()?],
        Command::Mitigate => vec![pipeline.mitigate()?],
        Command::Report => vec![pipeline.report()?],
        Command::Run => pipeline.run_all()?,
        Command::Synth(_) => unreachable!("handled above"),
    };
    outcomes.iter().for_each(print_outcome);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let stage = stage_name(&cli.command);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{stage} failed");
            eprintln!("lexaudit {stage}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn overrides_touch_only_given_fields() {
        let cli = Cli::try_parse_from([
            "lexaudit", "--seed", "9", "--tail", "lower", "--quota-formula", "min", "--endpoint", "http://x", "phase1",
        ])
        .unwrap();
        let mut c = RunConfig::default();
        cli.overrides.apply(&mut c);
        assert_eq!(c.seed, 9);
        assert_eq!(c.mitigation.seed, 9);
        assert_eq!(c.saliency.tail, TailReading::Lower);
        assert_eq!(c.mitigation.quota_formula, QuotaFormula::Min);
        assert_eq!(c.scorer.remote.unwrap().endpoint, "http://x");
        assert_eq!(c.phase2, RunConfig::default().phase2);
    }
}
