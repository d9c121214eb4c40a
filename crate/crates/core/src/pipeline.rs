//! Stage functions shared by the CLI subcommands, and `run_all`, which
//! chains them and persists every intermediate artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::classes::ClassTable;
use crate::config::{Provenance, Resources, RunConfig};
use crate::corpusgen::{
    generate_corpus, load_corpus, save_corpus, ChatCompletionsProvider, GeneratedDocument, GenerationOptions,
    GenerationOutcome, GenerationProvider, MockProvider,
};
use crate::fragments::{candidate_fragments, rank_fragments, score_fragments, Ranking};
use crate::report::{ReportBundle, ReportFormat, RunMetadata};
use crate::stats::{analyze_corpus, calibrate_threshold, BiasTable, Calibration, FilterConfig};
use crate::textnorm::{AnalyzedDocument, NGramLimits, Normalizer};
use crate::{sha256_hex, Error, Result};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const GENERATION_MANIFEST_FILE: &str = "generation_manifest.json";
pub const CLASSES_FILE: &str = "classes.jsonl";
pub const BIAS_FILE: &str = "bias.jsonl";
pub const AUDIT_FILE: &str = "filter_audit.jsonl";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const RANKED_FILE: &str = "ranked.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn report_file(format: ReportFormat) -> String {
    format!("report.{}", format.extension())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderChoice {
    /// Offline, deterministic; uses the config's story bank when present.
    Mock,
    /// Chat-completion endpoint from `BIASLOUPE_BASE_URL` or the config.
    Http,
}

pub fn make_provider(config: &RunConfig, choice: ProviderChoice) -> Result<Box<dyn GenerationProvider>> {
    Ok(match choice {
        ProviderChoice::Mock => match config.story_bank()? {
            Some(bank) => Box::new(MockProvider::stories(bank)),
            None => Box::new(MockProvider::echo()),
        },
        ProviderChoice::Http => {
            let base = config.base_url().ok_or_else(|| {
                Error::Config(format!(
                    "no endpoint configured; set generation.base_url or {}",
                    crate::corpusgen::BASE_URL_ENV
                ))
            })?;
            Box::new(ChatCompletionsProvider::from_env(
                &base,
                &config.generation.model,
                Duration::from_secs(config.generation.timeout_secs),
            )?)
        }
    })
}

pub fn generation_options(config: &RunConfig, samples: Option<u32>) -> GenerationOptions {
    GenerationOptions {
        samples_per_prompt: samples.unwrap_or(config.generation.samples_per_prompt),
        params: config.generation.params.clone(),
        retry: config.generation.retry.clone(),
        concurrency: config.generation.concurrency,
    }
}

pub fn generate(
    config: &RunConfig,
    provider: &dyn GenerationProvider,
    samples: Option<u32>,
) -> Result<GenerationOutcome> {
    let grid = config.prompt_grid()?;
    generate_corpus(&grid, provider, &generation_options(config, samples))
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub documents: Vec<AnalyzedDocument>,
    pub classes: ClassTable,
    pub bias: BiasTable,
    pub calibration: Option<Calibration>,
    /// The filter actually applied, after calibration.
    pub filter: FilterConfig,
}

/// Permutation settings used when `min_abs_bs` is calibrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CalibrationRequest {
    pub partitions: usize,
    pub seed: u64,
}

/// Normalizes the corpus and builds the filtered bias table. With a
/// calibration request, `min_abs_bs` is replaced by the permutation spread.
pub fn analyze(
    docs: &[GeneratedDocument],
    resources: &Resources,
    limits: NGramLimits,
    calibration: Option<CalibrationRequest>,
) -> Result<Analysis> {
    let documents = resources.normalizer.analyze_corpus(docs);
    let mut filter = resources.filter.clone();
    let calibration = match calibration {
        Some(req) => {
            let c = calibrate_threshold(&documents, limits, req.partitions, req.seed, &filter)?;
            log::info!(
                "calibrated min_abs_bs = {:.4} over {} partitions ({} classes)",
                c.std_dev,
                c.partitions,
                c.surviving_classes
            );
            filter.min_abs_bs = c.std_dev;
            Some(c)
        }
        None => None,
    };
    let fingerprint = resources.normalizer.fingerprint(limits);
    let (classes, bias) = analyze_corpus(&documents, limits, &filter, Some(fingerprint))?;
    Ok(Analysis {
        documents,
        classes,
        bias,
        calibration,
        filter,
    })
}

/// Fails when the bias table was built with different lexical resources or
/// n-gram limits than the ones about to be used for matching.
pub fn check_lexicon(bias: &BiasTable, normalizer: &Normalizer, limits: NGramLimits) -> Result<()> {
    let Some(recorded) = &bias.lexicon else {
        log::warn!("bias table has no lexicon fingerprint; cannot verify it matches");
        return Ok(());
    };
    let current = normalizer.fingerprint(limits);
    if *recorded != current {
        let mut diffs = Vec::new();
        if recorded.lemmas_sha256 != current.lemmas_sha256 {
            diffs.push("lemma dictionary");
        }
        if recorded.stopwords_sha256 != current.stopwords_sha256 {
            diffs.push("stopwords");
        }
        if recorded.abbreviations_sha256 != current.abbreviations_sha256 {
            diffs.push("abbreviations");
        }
        if recorded.limits != current.limits {
            diffs.push("n-gram limits");
        }
        return Err(Error::LexiconMismatch(format!(
            "bias table was built with a different {}",
            diffs.join(", ")
        )));
    }
    Ok(())
}

pub fn rank(
    documents: &[AnalyzedDocument],
    bias: &BiasTable,
    resources: &Resources,
    limits: NGramLimits,
    window: usize,
    top_k: usize,
) -> Result<Ranking> {
    check_lexicon(bias, &resources.normalizer, limits)?;
    let fragments = candidate_fragments(documents, &resources.marker_lexicon, window);
    if fragments.is_empty() {
        log::warn!("no candidate fragment: no interest story mentions a marker lemma in a center sentence");
    }
    let scores = score_fragments(&fragments, documents, bias, limits)?;
    Ok(rank_fragments(&scores, top_k))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Existing corpus; generation is skipped when set.
    pub corpus: Option<PathBuf>,
    pub provider: ProviderChoice,
    pub samples: Option<u32>,
    pub format: Option<ReportFormat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub std_dev: f64,
    pub partitions: usize,
    pub seed: u64,
    pub surviving_classes: usize,
    pub pooled_values: usize,
}

impl From<&Calibration> for CalibrationSummary {
    fn from(c: &Calibration) -> Self {
        CalibrationSummary {
            std_dev: c.std_dev,
            partitions: c.partitions,
            seed: c.seed,
            surviving_classes: c.surviving_classes,
            pooled_values: c.pooled.len(),
        }
    }
}

/// Written as `manifest.json`. Paths are relative to the output directory
/// so that two runs in different directories compare equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub config_sha256: String,
    pub corpus_source: String,
    pub provider: Option<ProviderChoice>,
    pub model_name: Option<String>,
    pub generation_seed: Option<u64>,
    pub samples_per_prompt: Option<u32>,
    pub documents: usize,
    pub min_abs_bs_applied: f64,
    pub calibration: Option<CalibrationSummary>,
    pub provenance: BTreeMap<String, Provenance>,
    /// File name to SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

struct Tracker<'a> {
    dir: &'a Path,
    artifacts: BTreeMap<String, String>,
    last: Option<PathBuf>,
}

impl Tracker<'_> {
    fn record(&mut self, name: &str) -> Result<()> {
        let path = self.dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.artifacts.insert(name.to_string(), sha256_hex(&bytes));
        self.last = Some(path);
        Ok(())
    }

    fn persist(&mut self, stage: &'static str, name: &str) -> Result<()> {
        let r = self.record(name);
        self.stage(stage, r)
    }

    fn stage<T>(&self, stage: &'static str, r: Result<T>) -> Result<T> {
        r.map_err(|e| Error::Stage {
            stage,
            last_artifact: self.last.clone(),
            source: Box::new(e),
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest: Manifest,
    pub out_dir: PathBuf,
    pub report_path: PathBuf,
    pub ranking: Ranking,
}

/// Generation (or loading), analysis, ranking and reporting, writing each
/// stage's output to `options.out_dir`.
pub fn run_all(config: &RunConfig, options: &RunOptions) -> Result<RunSummary> {
    let dir = options.out_dir.as_path();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut t = Tracker {
        dir,
        artifacts: BTreeMap::new(),
        last: None,
    };
    let resources = t.stage("load", config.resources())?;

    let (docs, corpus_source, provider, model_name, generation_manifest) = match &options.corpus {
        Some(path) => {
            let docs = t.stage("load", load_corpus(path))?;
            (docs, "supplied", None, None, None)
        }
        None => {
            let provider = t.stage("generate", make_provider(config, options.provider))?;
            let outcome = t.stage("generate", generate(config, provider.as_ref(), options.samples))?;
            t.stage("generate", outcome.manifest.save(&dir.join(GENERATION_MANIFEST_FILE)))?;
            t.persist("generate", GENERATION_MANIFEST_FILE)?;
            let model = outcome.manifest.model_name.clone();
            (
                outcome.documents,
                "generated",
                Some(options.provider),
                Some(model),
                Some(GENERATION_MANIFEST_FILE.to_string()),
            )
        }
    };
    t.stage("generate", save_corpus(&docs, &dir.join(CORPUS_FILE)))?;
    t.persist("generate", CORPUS_FILE)?;

    let calibration = config.calibration.apply.then_some(CalibrationRequest {
        partitions: config.calibration.partitions,
        seed: config.calibration.seed,
    });
    let analysis = t.stage("analyze", analyze(&docs, &resources, config.ngrams, calibration))?;
    if let Some(c) = &analysis.calibration {
        let json = serde_json::to_string_pretty(&CalibrationSummary::from(c))? + "\n";
        let p = dir.join(CALIBRATION_FILE);
        t.stage("calibrate", std::fs::write(&p, json).map_err(|e| Error::io(&p, e)))?;
        t.persist("calibrate", CALIBRATION_FILE)?;
    }
    t.stage("analyze", analysis.classes.save(&dir.join(CLASSES_FILE)))?;
    t.persist("analyze", CLASSES_FILE)?;
    t.stage("analyze", analysis.bias.save(&dir.join(BIAS_FILE)))?;
    t.persist("analyze", BIAS_FILE)?;
    t.stage("analyze", save_audit(&analysis.bias, &dir.join(AUDIT_FILE)))?;
    t.persist("analyze", AUDIT_FILE)?;

    let ranking = t.stage(
        "rank",
        rank(
            &analysis.documents,
            &analysis.bias,
            &resources,
            config.ngrams,
            config.fragments.window,
            config.fragments.top_k,
        ),
    )?;
    t.stage("rank", ranking.save(&dir.join(RANKED_FILE)))?;
    t.persist("rank", RANKED_FILE)?;

    let format = options.format.unwrap_or(config.report.format);
    let bundle = ReportBundle {
        table: &analysis.bias,
        ranking: &ranking,
        documents: &docs,
        rows: config.report.rows,
        labels: config.labels.clone(),
        run: RunMetadata {
            config_sha256: Some(config.source_sha256.clone()),
            corpus_sha256: t.artifacts.get(CORPUS_FILE).cloned(),
            generation_manifest,
        },
    };
    let rendered = t.stage("report", bundle.render(format))?;
    let report_name = report_file(format);
    let report_path = dir.join(&report_name);
    t.stage(
        "report",
        std::fs::write(&report_path, rendered).map_err(|e| Error::io(&report_path, e)),
    )?;
    t.persist("report", &report_name)?;

    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: config.source_sha256.clone(),
        corpus_source: corpus_source.to_string(),
        provider,
        model_name,
        generation_seed: config.generation.params.seed,
        samples_per_prompt: options
            .corpus
            .is_none()
            .then(|| options.samples.unwrap_or(config.generation.samples_per_prompt)),
        documents: docs.len(),
        min_abs_bs_applied: analysis.filter.min_abs_bs,
        calibration: analysis.calibration.as_ref().map(CalibrationSummary::from),
        provenance: config.provenance.clone(),
        artifacts: t.artifacts.clone(),
    };
    let p = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)? + "\n";
    t.stage("manifest", std::fs::write(&p, json).map_err(|e| Error::io(&p, e)))?;
    Ok(RunSummary {
        manifest,
        out_dir: dir.to_path_buf(),
        report_path,
        ranking,
    })
}

pub fn save_audit(bias: &BiasTable, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    bias.write_audit(&mut w)?;
    std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
}
