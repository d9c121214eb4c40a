use std::path::{Path, PathBuf};
use std::process::ExitCode;

use biasloupe::config::{validate_config, LexiconPaths, Resources, RunConfig};
use biasloupe::corpusgen::{load_corpus, save_corpus};
use biasloupe::fragments::Ranking;
use biasloupe::pipeline::{self, CalibrationRequest, ProviderChoice, RunOptions};
use biasloupe::report::{GroupLabels, ReportBundle, ReportFormat, RunMetadata};
use biasloupe::stats::{default_frequency_thresholds, BiasTable, FilterConfig};
use biasloupe::textnorm::NGramLimits;
use biasloupe::{sha256_hex, Error, Result};
use clap::{Args, Parser, Subcommand};

const EXIT_VALIDATION: u8 = 1;
const EXIT_GENERATION: u8 = 2;
const EXIT_ANALYSIS: u8 = 3;

/// Contrastive bias analysis of generated story corpora.
#[derive(Parser, Debug)]
#[command(name = "biasloupe", version)]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a minimal-pair story corpus.
    Generate(GenerateArgs),
    /// Score equivalence classes and write the filtered bias table.
    Analyze(AnalyzeArgs),
    /// Estimate the BiasScore spread under random relabeling.
    Calibrate(CalibrateArgs),
    /// Rank marker-centered fragments by summed BiasScore.
    Rank(RankArgs),
    /// Render class tables and ranked fragments.
    Report(ReportArgs),
    /// Every stage in sequence, with a manifest of artifact hashes.
    RunAll(RunAllArgs),
    /// Validate a config and print it with defaults resolved.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Samples per prompt; overrides the config.
    #[arg(long)]
    samples: Option<u32>,
    /// Offline deterministic provider.
    #[arg(long)]
    mock: bool,
    /// Where to write the generation manifest [default: next to --out].
    #[arg(long)]
    manifest: Option<PathBuf>,
}

/// Lexical resources. Explicit files override the ones named in --config.
#[derive(Args, Debug, Default)]
struct LexiconArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Tab-separated `form<TAB>lemma` dictionary.
    #[arg(long)]
    lemmas: Option<PathBuf>,
    #[arg(long)]
    stopwords: Option<PathBuf>,
    #[arg(long)]
    abbreviations: Option<PathBuf>,
    /// Words naming the attribute itself; classes containing them are dropped.
    #[arg(long)]
    intrinsic: Option<PathBuf>,
    /// Marker lexicon used to select fragments.
    #[arg(long)]
    markers: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    lexicon: LexiconArgs,
    /// Minimum |BS| for finite classes.
    #[arg(long)]
    min_bs: Option<f64>,
    /// Use the calibrated spread as the minimum |BS|.
    #[arg(long, conflicts_with = "min_bs")]
    calibrate: bool,
    #[arg(long)]
    partitions: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the unfiltered class table.
    #[arg(long)]
    classes: Option<PathBuf>,
    /// Also write one filter decision per class.
    #[arg(long)]
    audit: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    lexicon: LexiconArgs,
    #[arg(long)]
    partitions: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the summary here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RankArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    bias: PathBuf,
    #[command(flatten)]
    lexicon: LexiconArgs,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    top: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    ranked: PathBuf,
    #[arg(long)]
    bias: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// md, html or json.
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Rows per class table.
    #[arg(long)]
    rows: Option<usize>,
    /// Supplies group display names and defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunAllArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Analyze this corpus instead of generating one.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    mock: bool,
    #[arg(long)]
    samples: Option<u32>,
    #[arg(long)]
    format: Option<String>,
}

/// Settings for the analysis subcommands: a config when given, otherwise
/// tool defaults, with explicit flags applied on top.
struct Settings {
    config: Option<RunConfig>,
    resources: Resources,
    limits: NGramLimits,
}

impl Settings {
    fn load(args: &LexiconArgs, min_bs: Option<f64>) -> Result<Self> {
        let config = args.config.as_deref().map(validate_config).transpose()?;
        let base = config.as_ref().map(|c| c.lexicon.clone()).unwrap_or_default();
        let paths = LexiconPaths {
            lemmas: args.lemmas.clone().or(base.lemmas),
            stopwords: args.stopwords.clone().or(base.stopwords),
            abbreviations: args.abbreviations.clone().or(base.abbreviations),
            intrinsic: args.intrinsic.clone().or(base.intrinsic),
            markers: args.markers.clone().or(base.markers),
        };
        let normalizer = paths.normalizer()?;
        let (intrinsic_lemmas, intrinsic_list_id) = paths.intrinsic_lemmas(&normalizer)?;
        let filter = FilterConfig {
            intrinsic_lemmas,
            intrinsic_list_id,
            min_freq_by_content_count: config
                .as_ref()
                .map_or_else(default_frequency_thresholds, |c| c.min_freq_by_content_count.clone()),
            min_abs_bs: min_bs.or(config.as_ref().map(|c| c.min_abs_bs)).unwrap_or(0.5),
        };
        let problems = filter.validate();
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        if filter.min_abs_bs == 0.0 {
            log::warn!("min_abs_bs is 0: the BiasScore magnitude filter is disabled");
        }
        let markers = config.as_ref().map(|c| c.markers.as_slice()).unwrap_or_default();
        let marker_lexicon = paths.marker_lexicon(&normalizer, markers, &filter)?;
        let limits = config.as_ref().map_or_else(NGramLimits::default, |c| c.ngrams);
        Ok(Settings {
            config,
            resources: Resources {
                normalizer,
                filter,
                marker_lexicon,
            },
            limits,
        })
    }

    fn calibration(&self, partitions: Option<usize>, seed: Option<u64>) -> CalibrationRequest {
        let c = self.config.as_ref().map(|c| c.calibration);
        CalibrationRequest {
            partitions: partitions.or(c.map(|c| c.partitions)).unwrap_or(50),
            seed: seed.or(c.map(|c| c.seed)).unwrap_or(0),
        }
    }
}

fn parse_format(s: Option<&str>) -> Result<Option<ReportFormat>> {
    s.map(str::parse).transpose()
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let config = validate_config(&a.config)?;
    let choice = if a.mock {
        ProviderChoice::Mock
    } else {
        ProviderChoice::Http
    };
    let provider = pipeline::make_provider(&config, choice)?;
    let outcome = pipeline::generate(&config, provider.as_ref(), a.samples)?;
    save_corpus(&outcome.documents, &a.out)?;
    let manifest_path = a.manifest.clone().unwrap_or_else(|| {
        let stem = a
            .out
            .file_stem()
            .map_or("corpus".into(), |s| s.to_string_lossy().into_owned());
        a.out.with_file_name(format!("{stem}.manifest.json"))
    });
    outcome.manifest.save(&manifest_path)?;
    println!(
        "wrote {} documents to {} ({} skipped); manifest {}",
        outcome.documents.len(),
        a.out.display(),
        outcome.manifest.skipped.len(),
        manifest_path.display()
    );
    Ok(())
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    let settings = Settings::load(&a.lexicon, a.min_bs)?;
    let docs = load_corpus(&a.corpus)?;
    let calibration = a.calibrate.then(|| settings.calibration(a.partitions, a.seed));
    let analysis = pipeline::analyze(&docs, &settings.resources, settings.limits, calibration)?;
    analysis.bias.save(&a.out)?;
    if let Some(p) = &a.classes {
        analysis.classes.save(p)?;
    }
    if let Some(p) = &a.audit {
        pipeline::save_audit(&analysis.bias, p)?;
    }
    let fa = &analysis.bias.filters_applied;
    println!(
        "{} of {} classes kept (intrinsic {}, low frequency {}, low |BS| {}); min |BS| {:.4}",
        fa.kept, fa.classes_in, fa.dropped_intrinsic, fa.dropped_low_frequency, fa.dropped_low_bias, fa.min_abs_bs
    );
    Ok(())
}

fn cmd_calibrate(a: &CalibrateArgs) -> Result<()> {
    let settings = Settings::load(&a.lexicon, None)?;
    let docs = load_corpus(&a.corpus)?;
    let analyzed = settings.resources.normalizer.analyze_corpus(&docs);
    let req = settings.calibration(a.partitions, a.seed);
    let c = biasloupe::stats::calibrate_threshold(
        &analyzed,
        settings.limits,
        req.partitions,
        req.seed,
        &settings.resources.filter,
    )?;
    let json = serde_json::to_string_pretty(&pipeline::CalibrationSummary::from(&c))? + "\n";
    match &a.out {
        Some(p) => write_file(p, &json)?,
        None => print!("{json}"),
    }
    Ok(())
}

fn cmd_rank(a: &RankArgs) -> Result<()> {
    let settings = Settings::load(&a.lexicon, None)?;
    let docs = load_corpus(&a.corpus)?;
    let bias = BiasTable::load(&a.bias)?;
    let analyzed = settings.resources.normalizer.analyze_corpus(&docs);
    let fragments = settings.config.as_ref().map(|c| c.fragments);
    let window = a.window.or(fragments.map(|f| f.window)).unwrap_or(3);
    let top = a.top.or(fragments.map(|f| f.top_k)).unwrap_or(20);
    let ranking = pipeline::rank(&analyzed, &bias, &settings.resources, settings.limits, window, top)?;
    ranking.save(&a.out)?;
    println!(
        "ranked {} candidate fragments; wrote top/bottom {} to {}",
        ranking.candidates,
        ranking.k(),
        a.out.display()
    );
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let config = a.config.as_deref().map(validate_config).transpose()?;
    let format = parse_format(a.format.as_deref())?
        .or(config.as_ref().map(|c| c.report.format))
        .unwrap_or(ReportFormat::Md);
    let ranking = Ranking::load(&a.ranked)?;
    let bias = BiasTable::load(&a.bias)?;
    let docs = load_corpus(&a.corpus)?;
    let corpus_bytes = std::fs::read(&a.corpus).map_err(|e| Error::io(&a.corpus, e))?;
    let bundle = ReportBundle {
        table: &bias,
        ranking: &ranking,
        documents: &docs,
        rows: a.rows.or(config.as_ref().map(|c| c.report.rows)).unwrap_or(20),
        labels: config.as_ref().map_or_else(GroupLabels::default, |c| c.labels.clone()),
        run: RunMetadata {
            config_sha256: config.as_ref().map(|c| c.source_sha256.clone()),
            corpus_sha256: Some(sha256_hex(&corpus_bytes)),
            generation_manifest: None,
        },
    };
    write_file(&a.out, &bundle.render(format)?)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_run_all(a: &RunAllArgs) -> Result<()> {
    let config = validate_config(&a.config)?;
    let options = RunOptions {
        out_dir: a.out_dir.clone(),
        corpus: a.corpus.clone(),
        provider: if a.mock {
            ProviderChoice::Mock
        } else {
            ProviderChoice::Http
        },
        samples: a.samples,
        format: parse_format(a.format.as_deref())?,
    };
    let summary = pipeline::run_all(&config, &options)?;
    println!(
        "{} documents, {} candidate fragments; report {}",
        summary.manifest.documents,
        summary.ranking.candidates,
        summary.report_path.display()
    );
    Ok(())
}

fn cmd_validate(config: &Path) -> Result<()> {
    let c = validate_config(config)?;
    println!("{}", serde_json::to_string_pretty(&c)?);
    Ok(())
}

/// Exit status for an error: validation problems are 1, generation
/// failures 2, analysis failures 3. `fallback` applies to errors that
/// depend on the subcommand, such as I/O.
fn exit_code(e: &Error, fallback: u8) -> u8 {
    match e {
        Error::Stage { stage, source, .. } => {
            let by_stage = match *stage {
                "load" => EXIT_VALIDATION,
                "generate" => EXIT_GENERATION,
                _ => EXIT_ANALYSIS,
            };
            exit_code(source, by_stage)
        }
        Error::Config(_)
        | Error::Validation(_)
        | Error::Parse { .. }
        | Error::UnknownGroup(_)
        | Error::UnsupportedFormat(_)
        | Error::LexiconMismatch(_) => EXIT_VALIDATION,
        Error::Authentication(_) | Error::AllRequestsFailed { .. } => EXIT_GENERATION,
        _ => fallback,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "error",
        (false, 0) => "warn",
        (false, 1) => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let (result, fallback) = match &cli.command {
        Command::Generate(a) => (cmd_generate(a), EXIT_GENERATION),
        Command::Analyze(a) => (cmd_analyze(a), EXIT_ANALYSIS),
        Command::Calibrate(a) => (cmd_calibrate(a), EXIT_ANALYSIS),
        Command::Rank(a) => (cmd_rank(a), EXIT_ANALYSIS),
        Command::Report(a) => (cmd_report(a), EXIT_ANALYSIS),
        Command::RunAll(a) => (cmd_run_all(a), EXIT_ANALYSIS),
        Command::Validate { config } => (cmd_validate(config), EXIT_VALIDATION),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e, fallback))
        }
    }
}
