//! Run configuration: JSON on disk, validated and resolved with defaults.
//!
//! Relative paths are resolved against the directory of the config file.
//! Every defaulted setting is recorded in [`RunConfig::provenance`].

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpusgen::{build_prompt_grid, GenerationParams, Marker, PromptPair, RetryPolicy, Scenario, StoryBank};
use crate::fragments::MarkerLexicon;
use crate::report::{GroupLabels, ReportFormat};
use crate::stats::{default_frequency_thresholds, FilterConfig};
use crate::textnorm::{LemmaDictionary, NGramLimits, Normalizer, WordList};
use crate::{Error, Group, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    /// Set in the config file.
    Config,
    /// Default taken from the published method.
    PublishedDefault,
    /// Default chosen by this tool.
    ToolDefault,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMarker {
    id: String,
    text: String,
    group: String,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGeneration {
    model: Option<String>,
    base_url: Option<String>,
    temperature: Option<f64>,
    max_tokens: Option<u32>,
    seed: Option<u64>,
    samples_per_prompt: Option<u32>,
    concurrency: Option<usize>,
    max_retries: Option<u32>,
    initial_backoff_ms: Option<u64>,
    timeout_secs: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLexicon {
    lemmas: Option<PathBuf>,
    stopwords: Option<PathBuf>,
    abbreviations: Option<PathBuf>,
    intrinsic: Option<PathBuf>,
    markers: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFilters {
    min_freq_by_content_count: Option<BTreeMap<usize, u64>>,
    min_abs_bs: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNGrams {
    max_surface_len: Option<usize>,
    max_content: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFragments {
    window: Option<usize>,
    top_k: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCalibration {
    partitions: Option<usize>,
    seed: Option<u64>,
    apply: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawReport {
    format: Option<String>,
    rows: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    template: Option<String>,
    template_id: Option<String>,
    scenarios: Option<Vec<Scenario>>,
    markers: Option<Vec<RawMarker>>,
    names: Option<Vec<String>>,
    groups: Option<GroupLabels>,
    #[serde(default)]
    generation: RawGeneration,
    #[serde(default)]
    lexicon: RawLexicon,
    #[serde(default)]
    filters: RawFilters,
    #[serde(default)]
    ngrams: RawNGrams,
    #[serde(default)]
    fragments: RawFragments,
    #[serde(default)]
    calibration: RawCalibration,
    #[serde(default)]
    report: RawReport,
    mock_bank: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    pub model: String,
    /// Overridden by `BIASLOUPE_BASE_URL` when set.
    pub base_url: Option<String>,
    pub params: GenerationParams,
    pub samples_per_prompt: u32,
    pub concurrency: usize,
    pub retry: RetryPolicy,
    pub timeout_secs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LexiconPaths {
    pub lemmas: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub abbreviations: Option<PathBuf>,
    pub intrinsic: Option<PathBuf>,
    pub markers: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FragmentSettings {
    pub window: usize,
    pub top_k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationSettings {
    pub partitions: usize,
    pub seed: u64,
    /// Replace `min_abs_bs` with the calibrated value in `run-all`.
    pub apply: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportSettings {
    pub format: ReportFormat,
    pub rows: usize,
}

/// Fully resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub template: String,
    pub template_id: String,
    pub scenarios: Vec<Scenario>,
    pub markers: Vec<Marker>,
    pub names: Vec<String>,
    pub labels: GroupLabels,
    pub generation: GenerationSettings,
    pub lexicon: LexiconPaths,
    pub min_freq_by_content_count: BTreeMap<usize, u64>,
    pub min_abs_bs: f64,
    pub ngrams: NGramLimits,
    pub fragments: FragmentSettings,
    pub calibration: CalibrationSettings,
    pub report: ReportSettings,
    pub mock_bank: Option<PathBuf>,
    pub provenance: BTreeMap<String, Provenance>,
    /// SHA-256 of the config file bytes.
    pub source_sha256: String,
    #[serde(skip)]
    pub warnings: Vec<String>,
}

impl LexiconPaths {
    /// Missing files fall back to an empty dictionary and the bundled
    /// Spanish stopword and abbreviation lists.
    pub fn normalizer(&self) -> Result<Normalizer> {
        let dictionary = match &self.lemmas {
            Some(p) => LemmaDictionary::load(p)?,
            None => LemmaDictionary::default(),
        };
        let stopwords = match &self.stopwords {
            Some(p) => WordList::load(p)?,
            None => WordList::spanish_stopwords(),
        };
        let abbreviations = match &self.abbreviations {
            Some(p) => WordList::load(p)?,
            None => WordList::spanish_abbreviations(),
        };
        Ok(Normalizer::new(dictionary, stopwords, abbreviations))
    }

    /// Intrinsic words lemmatized by `normalizer`, and an id naming the
    /// list by file name and hash.
    pub fn intrinsic_lemmas(&self, normalizer: &Normalizer) -> Result<(BTreeSet<String>, Option<String>)> {
        let Some(p) = &self.intrinsic else {
            return Ok((BTreeSet::new(), None));
        };
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        let words = WordList::parse(&String::from_utf8_lossy(&bytes));
        let lemmas = words.iter().map(|w| normalizer.lemmatize(w)).collect();
        let name = p
            .file_name()
            .map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        Ok((lemmas, Some(format!("{name}#sha256:{}", crate::sha256_hex(&bytes)))))
    }

    /// The marker lexicon file when set, otherwise lemmas derived from the
    /// interest markers plus the intrinsic list.
    pub fn marker_lexicon(
        &self,
        normalizer: &Normalizer,
        markers: &[Marker],
        filter: &FilterConfig,
    ) -> Result<MarkerLexicon> {
        match &self.markers {
            Some(p) => MarkerLexicon::load(p, normalizer),
            None => Ok(MarkerLexicon::derive(normalizer, markers, &filter.intrinsic_lemmas)),
        }
    }
}

/// Lexical resources loaded from a config.
#[derive(Debug, Clone)]
pub struct Resources {
    pub normalizer: Normalizer,
    pub filter: FilterConfig,
    pub marker_lexicon: MarkerLexicon,
}

struct Resolver {
    provenance: BTreeMap<String, Provenance>,
}

impl Resolver {
    fn take<T>(&mut self, key: &str, value: Option<T>, default: T, source: Provenance) -> T {
        match value {
            Some(v) => {
                self.provenance.insert(key.to_string(), Provenance::Config);
                v
            }
            None => {
                self.provenance.insert(key.to_string(), source);
                default
            }
        }
    }
}

const DEFAULT_NAMES: [&str; 2] = ["Ana", "Juan"];

/// Reads, validates and resolves a config file. All problems are reported
/// together in one [`Error::Validation`].
pub fn validate_config(path: &Path) -> Result<RunConfig> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let raw: RawConfig = serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    resolve(raw, base, crate::sha256_hex(&bytes))
}

/// Same as [`validate_config`] for an in-memory document; relative paths
/// resolve against `base`.
pub fn parse_config(json: &str, base: &Path) -> Result<RunConfig> {
    let raw: RawConfig = serde_json::from_str(json).map_err(|e| Error::Parse {
        path: PathBuf::from("<config>"),
        line: e.line(),
        message: e.to_string(),
    })?;
    resolve(raw, base, crate::sha256_hex(json.as_bytes()))
}

fn resolve(raw: RawConfig, base: &Path, source_sha256: String) -> Result<RunConfig> {
    use Provenance::{PublishedDefault as Published, ToolDefault as Tool};
    let mut problems = Vec::new();
    let mut warnings = Vec::new();
    let mut r = Resolver {
        provenance: BTreeMap::new(),
    };

    let template = raw.template.unwrap_or_else(|| {
        problems.push("missing required field `template`".to_string());
        String::new()
    });
    let scenarios = raw.scenarios.unwrap_or_else(|| {
        problems.push("missing required field `scenarios`".to_string());
        Vec::new()
    });
    let raw_markers = raw.markers.unwrap_or_else(|| {
        problems.push("missing required field `markers`".to_string());
        Vec::new()
    });
    let template_id = r.take("template_id", raw.template_id, "default".to_string(), Tool);
    let names = r.take(
        "names",
        raw.names,
        DEFAULT_NAMES.iter().map(|s| s.to_string()).collect(),
        Tool,
    );
    let labels = r.take("groups", raw.groups, GroupLabels::default(), Tool);
    if labels.interest == labels.control {
        problems.push(format!(
            "group display names must differ (both are {:?})",
            labels.interest
        ));
    }

    let mut seen = HashSet::new();
    for s in &scenarios {
        if s.id.trim().is_empty() {
            problems.push("scenario with empty id".to_string());
        } else if !seen.insert(s.id.clone()) {
            problems.push(format!("duplicate scenario id {:?}", s.id));
        }
        if s.text.trim().is_empty() {
            problems.push(format!("scenario {:?} has empty text", s.id));
        }
    }
    if names.is_empty() || names.iter().any(|n| n.trim().is_empty()) {
        problems.push("`names` must be a non-empty list of non-empty names".to_string());
    }

    let mut markers = Vec::with_capacity(raw_markers.len());
    let mut seen = HashSet::new();
    for m in raw_markers {
        let group = match m.group.parse::<Group>() {
            Ok(g) => Some(g),
            Err(_) if m.group == labels.interest => Some(Group::Interest),
            Err(_) if m.group == labels.control => Some(Group::Control),
            Err(_) => {
                problems.push(format!(
                    "marker {:?} has group {:?}; expected one of {:?}, {:?}",
                    m.id, m.group, labels.interest, labels.control
                ));
                None
            }
        };
        if m.id.trim().is_empty() {
            problems.push("marker with empty id".to_string());
        } else if !seen.insert(m.id.clone()) {
            problems.push(format!("duplicate marker id {:?}", m.id));
        }
        if m.text.trim().is_empty() {
            problems.push(format!("marker {:?} has empty text", m.id));
        }
        if let Some(group) = group {
            markers.push(Marker {
                id: m.id,
                text: m.text,
                group,
            });
        }
    }
    if !template.is_empty() && !markers.is_empty() {
        if let Err(e) = build_prompt_grid(&[], &markers, &template, &template_id, &[]) {
            problems.push(match e {
                Error::Config(m) => m,
                other => other.to_string(),
            });
        }
    }

    let g = raw.generation;
    let gen_defaults = GenerationParams::default();
    let retry_defaults = RetryPolicy::default();
    let generation = GenerationSettings {
        model: r.take("generation.model", g.model, "mock".to_string(), Tool),
        base_url: g.base_url,
        params: GenerationParams {
            temperature: r.take("generation.temperature", g.temperature, gen_defaults.temperature, Tool),
            max_tokens: r.take("generation.max_tokens", g.max_tokens, gen_defaults.max_tokens, Tool),
            seed: g.seed,
        },
        samples_per_prompt: r.take("generation.samples_per_prompt", g.samples_per_prompt, 1, Tool),
        concurrency: r.take("generation.concurrency", g.concurrency, 4, Tool),
        retry: RetryPolicy {
            max_retries: r.take(
                "generation.max_retries",
                g.max_retries,
                retry_defaults.max_retries,
                Tool,
            ),
            initial_backoff_ms: r.take(
                "generation.initial_backoff_ms",
                g.initial_backoff_ms,
                retry_defaults.initial_backoff_ms,
                Tool,
            ),
            max_backoff_ms: retry_defaults.max_backoff_ms,
        },
        timeout_secs: r.take("generation.timeout_secs", g.timeout_secs, 120, Tool),
    };
    if !(generation.params.temperature.is_finite() && generation.params.temperature >= 0.0) {
        problems.push(format!(
            "temperature must be >= 0, got {}",
            generation.params.temperature
        ));
    }
    if generation.params.max_tokens == 0 {
        problems.push("max_tokens must be positive".to_string());
    }
    if generation.samples_per_prompt == 0 {
        problems.push("samples_per_prompt must be positive".to_string());
    }
    if generation.concurrency == 0 {
        problems.push("concurrency must be positive".to_string());
    }
    if generation.timeout_secs == 0 {
        problems.push("timeout_secs must be positive".to_string());
    }

    let resolve_path = |p: Option<PathBuf>, what: &str, problems: &mut Vec<String>| {
        p.map(|p| {
            let full = if p.is_absolute() { p } else { base.join(p) };
            if !full.is_file() {
                problems.push(format!("{what} file not found: {}", full.display()));
            }
            full
        })
    };
    let lexicon = LexiconPaths {
        lemmas: resolve_path(raw.lexicon.lemmas, "lemma dictionary", &mut problems),
        stopwords: resolve_path(raw.lexicon.stopwords, "stopword", &mut problems),
        abbreviations: resolve_path(raw.lexicon.abbreviations, "abbreviation", &mut problems),
        intrinsic: resolve_path(raw.lexicon.intrinsic, "intrinsic lemma", &mut problems),
        markers: resolve_path(raw.lexicon.markers, "marker lexicon", &mut problems),
    };
    for (key, set) in [
        ("lexicon.lemmas", lexicon.lemmas.is_some()),
        ("lexicon.stopwords", lexicon.stopwords.is_some()),
        ("lexicon.abbreviations", lexicon.abbreviations.is_some()),
        ("lexicon.intrinsic", lexicon.intrinsic.is_some()),
        ("lexicon.markers", lexicon.markers.is_some()),
    ] {
        r.provenance
            .insert(key.to_string(), if set { Provenance::Config } else { Tool });
    }
    if lexicon.lemmas.is_none() {
        warnings.push("no lemma dictionary configured; words are used as their own lemmas".to_string());
    }
    let mock_bank = resolve_path(raw.mock_bank, "mock story bank", &mut problems);

    let min_freq_by_content_count = r.take(
        "filters.min_freq_by_content_count",
        raw.filters.min_freq_by_content_count,
        default_frequency_thresholds(),
        Published,
    );
    let min_abs_bs = r.take("filters.min_abs_bs", raw.filters.min_abs_bs, 0.5, Published);
    let probe = FilterConfig {
        min_freq_by_content_count: min_freq_by_content_count.clone(),
        min_abs_bs,
        ..FilterConfig::default()
    };
    problems.extend(probe.validate());
    if min_abs_bs == 0.0 {
        warnings.push("min_abs_bs is 0: the BiasScore magnitude filter is disabled".to_string());
    }

    let default_limits = NGramLimits::default();
    let ngrams = NGramLimits {
        max_surface_len: r.take(
            "ngrams.max_surface_len",
            raw.ngrams.max_surface_len,
            default_limits.max_surface_len,
            Tool,
        ),
        max_content: r.take(
            "ngrams.max_content",
            raw.ngrams.max_content,
            default_limits.max_content,
            Tool,
        ),
    };
    if ngrams.max_content == 0 || ngrams.max_surface_len == 0 {
        problems.push("n-gram limits must be positive".to_string());
    } else if ngrams.max_content > ngrams.max_surface_len {
        problems.push("ngrams.max_content cannot exceed ngrams.max_surface_len".to_string());
    }

    let fragments = FragmentSettings {
        window: r.take("fragments.window", raw.fragments.window, 3, Published),
        top_k: r.take("fragments.top_k", raw.fragments.top_k, 20, Tool),
    };
    if fragments.window == 0 || fragments.top_k == 0 {
        problems.push("fragments.window and fragments.top_k must be positive".to_string());
    }

    let calibration = CalibrationSettings {
        partitions: r.take("calibration.partitions", raw.calibration.partitions, 50, Tool),
        seed: r.take("calibration.seed", raw.calibration.seed, 0, Tool),
        apply: r.take("calibration.apply", raw.calibration.apply, false, Tool),
    };
    if calibration.partitions < 2 {
        problems.push("calibration.partitions must be at least 2".to_string());
    }

    let format = match raw.report.format.as_deref().map(str::parse::<ReportFormat>) {
        Some(Ok(f)) => Some(f),
        Some(Err(e)) => {
            problems.push(e.to_string());
            None
        }
        None => None,
    };
    let report = ReportSettings {
        format: r.take("report.format", format, ReportFormat::Md, Tool),
        rows: r.take("report.rows", raw.report.rows, 20, Tool),
    };

    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(RunConfig {
        template,
        template_id,
        scenarios,
        markers,
        names,
        labels,
        generation,
        lexicon,
        min_freq_by_content_count,
        min_abs_bs,
        ngrams,
        fragments,
        calibration,
        report,
        mock_bank,
        provenance: r.provenance,
        source_sha256,
        warnings,
    })
}

impl RunConfig {
    pub fn prompt_grid(&self) -> Result<Vec<PromptPair>> {
        build_prompt_grid(
            &self.scenarios,
            &self.markers,
            &self.template,
            &self.template_id,
            &self.names,
        )
    }

    pub fn normalizer(&self) -> Result<Normalizer> {
        self.lexicon.normalizer()
    }

    pub fn filter_config(&self, normalizer: &Normalizer) -> Result<FilterConfig> {
        let (intrinsic_lemmas, intrinsic_list_id) = self.lexicon.intrinsic_lemmas(normalizer)?;
        Ok(FilterConfig {
            intrinsic_lemmas,
            intrinsic_list_id,
            min_freq_by_content_count: self.min_freq_by_content_count.clone(),
            min_abs_bs: self.min_abs_bs,
        })
    }

    pub fn marker_lexicon(&self, normalizer: &Normalizer, filter: &FilterConfig) -> Result<MarkerLexicon> {
        self.lexicon.marker_lexicon(normalizer, &self.markers, filter)
    }

    pub fn resources(&self) -> Result<Resources> {
        let normalizer = self.normalizer()?;
        let filter = self.filter_config(&normalizer)?;
        let marker_lexicon = self.marker_lexicon(&normalizer, &filter)?;
        if marker_lexicon.is_empty() {
            log::warn!("marker lexicon is empty; no fragment will be selected");
        }
        Ok(Resources {
            normalizer,
            filter,
            marker_lexicon,
        })
    }

    pub fn story_bank(&self) -> Result<Option<StoryBank>> {
        self.mock_bank
            .as_ref()
            .map(|p| {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Parse {
                    path: p.clone(),
                    line: e.line(),
                    message: e.to_string(),
                })
            })
            .transpose()
    }

    /// Endpoint base URL: `BIASLOUPE_BASE_URL`, then the config value.
    pub fn base_url(&self) -> Option<String> {
        std::env::var(crate::corpusgen::BASE_URL_ENV)
            .ok()
            .filter(|s| !s.is_empty())
            .or_else(|| self.generation.base_url.clone())
    }
}
