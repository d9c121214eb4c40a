//! Minimal-pair prompt grids and corpus generation.
//!
//! A prompt template has `{name}`, `{marker}` and `{scenario}` slots. Interest
//! and control markers are paired by position, so the two prompts of a pair
//! differ only in the marker span.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Group, Result};

pub const API_KEY_ENV: &str = "BIASLOUPE_API_KEY";
pub const BASE_URL_ENV: &str = "BIASLOUPE_BASE_URL";

const SLOTS: [&str; 3] = ["{name}", "{marker}", "{scenario}"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Marker {
    pub id: String,
    pub text: String,
    pub group: Group,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub scenario_id: String,
    pub name: String,
    pub interest_marker_id: String,
    pub control_marker_id: String,
    pub interest_marker: String,
    pub control_marker: String,
    pub interest_prompt: String,
    pub control_prompt: String,
    pub template_id: String,
    /// Byte offset of the marker in both prompts.
    pub marker_offset: usize,
}

impl PromptPair {
    /// Both prompts are byte-identical once their marker spans are removed.
    pub fn is_minimal(&self) -> bool {
        let strip = |prompt: &str, marker: &str| -> Option<String> {
            let end = self.marker_offset + marker.len();
            if prompt.get(self.marker_offset..end)? != marker {
                return None;
            }
            Some(format!("{}{}", &prompt[..self.marker_offset], &prompt[end..]))
        };
        match (
            strip(&self.interest_prompt, &self.interest_marker),
            strip(&self.control_prompt, &self.control_marker),
        ) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        }
    }

    pub fn prompt(&self, group: Group) -> &str {
        match group {
            Group::Interest => &self.interest_prompt,
            Group::Control => &self.control_prompt,
        }
    }

    pub fn marker_id(&self, group: Group) -> &str {
        match group {
            Group::Interest => &self.interest_marker_id,
            Group::Control => &self.control_marker_id,
        }
    }

    pub fn marker_text(&self, group: Group) -> &str {
        match group {
            Group::Interest => &self.interest_marker,
            Group::Control => &self.control_marker,
        }
    }
}

#[derive(Debug)]
enum Piece<'a> {
    Lit(&'a str),
    Slot(&'a str),
}

fn parse_template(template: &str) -> Result<Vec<Piece<'_>>> {
    for slot in SLOTS {
        let n = template.matches(slot).count();
        if n != 1 {
            return Err(Error::Config(format!(
                "template must contain {slot} exactly once (found {n})"
            )));
        }
    }
    let mut pieces = Vec::new();
    let mut rest = template;
    while let Some((pos, slot)) = SLOTS
        .iter()
        .filter_map(|s| rest.find(s).map(|p| (p, *s)))
        .min_by_key(|(p, _)| *p)
    {
        if pos > 0 {
            pieces.push(Piece::Lit(&rest[..pos]));
        }
        pieces.push(Piece::Slot(slot));
        rest = &rest[pos + slot.len()..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Lit(rest));
    }
    Ok(pieces)
}

/// Renders the template; returns the prompt and the marker's byte offset.
fn render(pieces: &[Piece<'_>], name: &str, marker: &str, scenario: &str) -> (String, usize) {
    let mut out = String::new();
    let mut offset = 0;
    for p in pieces {
        match p {
            Piece::Lit(s) => out.push_str(s),
            Piece::Slot("{name}") => out.push_str(name),
            Piece::Slot("{marker}") => {
                offset = out.len();
                out.push_str(marker);
            }
            Piece::Slot(_) => out.push_str(scenario),
        }
    }
    (out, offset)
}

/// One pair per scenario × positional marker pair × name.
pub fn build_prompt_grid(
    scenarios: &[Scenario],
    markers: &[Marker],
    template: &str,
    template_id: &str,
    names: &[String],
) -> Result<Vec<PromptPair>> {
    let pieces = parse_template(template)?;
    let interest: Vec<&Marker> = markers.iter().filter(|m| m.group == Group::Interest).collect();
    let control: Vec<&Marker> = markers.iter().filter(|m| m.group == Group::Control).collect();
    if interest.is_empty() || control.is_empty() {
        return Err(Error::Config("at least one marker per group is required".into()));
    }
    if interest.len() != control.len() {
        return Err(Error::Config(format!(
            "marker lists must have equal length for positional pairing ({} interest vs {} control)",
            interest.len(),
            control.len()
        )));
    }
    let mut grid = Vec::new();
    for sc in scenarios {
        for (mi, mc) in interest.iter().zip(&control) {
            for name in names {
                let (interest_prompt, offset) = render(&pieces, name, &mi.text, &sc.text);
                let (control_prompt, _) = render(&pieces, name, &mc.text, &sc.text);
                grid.push(PromptPair {
                    scenario_id: sc.id.clone(),
                    name: name.clone(),
                    interest_marker_id: mi.id.clone(),
                    control_marker_id: mc.id.clone(),
                    interest_marker: mi.text.clone(),
                    control_marker: mc.text.clone(),
                    interest_prompt,
                    control_prompt,
                    template_id: template_id.to_string(),
                    marker_offset: offset,
                });
            }
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            temperature: 0.8,
            max_tokens: 1024,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedDocument {
    pub doc_id: String,
    pub group: Group,
    pub scenario_id: String,
    pub marker_id: String,
    pub sample_index: u32,
    pub prompt: String,
    pub text: String,
    pub model_name: String,
    pub generation_params: GenerationParams,
}

/// What a provider sees for one completion. The metadata fields are ignored
/// by HTTP providers and used by the mock.
#[derive(Debug, Clone)]
pub struct CompletionRequest<'a> {
    pub prompt: &'a str,
    pub params: &'a GenerationParams,
    pub group: Group,
    pub scenario_id: &'a str,
    pub marker_id: &'a str,
    pub marker_text: &'a str,
    pub name: &'a str,
    pub sample_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderError {
    /// Credentials rejected; aborts the whole run.
    Authentication(String),
    /// Rate limits, timeouts, 5xx and transport failures.
    Transient(String),
    /// Any other failure for this request; not retried.
    Rejected(String),
}

impl std::fmt::Display for ProviderError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProviderError::Authentication(m) => write!(f, "authentication failed: {m}"),
            ProviderError::Transient(m) => write!(f, "transient failure: {m}"),
            ProviderError::Rejected(m) => write!(f, "request rejected: {m}"),
        }
    }
}

pub trait GenerationProvider: Sync {
    fn model_name(&self) -> &str;
    fn complete(&self, request: &CompletionRequest<'_>) -> std::result::Result<String, ProviderError>;
}

/// Chat-completion endpoint speaking the common `messages` → `choices` JSON
/// protocol.
pub struct ChatCompletionsProvider {
    agent: ureq::Agent,
    url: String,
    api_key: String,
    model: String,
}

impl ChatCompletionsProvider {
    pub fn new(base_url: &str, api_key: &str, model: &str, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build();
        let base = base_url.trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        };
        ChatCompletionsProvider {
            agent: ureq::Agent::new_with_config(config),
            url,
            api_key: api_key.to_string(),
            model: model.to_string(),
        }
    }

    /// Reads the key from `BIASLOUPE_API_KEY`.
    pub fn from_env(base_url: &str, model: &str, timeout: Duration) -> Result<Self> {
        let key = std::env::var(API_KEY_ENV)
            .map_err(|_| Error::Authentication(format!("{API_KEY_ENV} is not set; export it or run with --mock")))?;
        Ok(Self::new(base_url, &key, model, timeout))
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: Option<String>,
}

impl GenerationProvider for ChatCompletionsProvider {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> std::result::Result<String, ProviderError> {
        let body = ChatRequest {
            model: &self.model,
            messages: vec![ChatMessage {
                role: "user",
                content: request.prompt,
            }],
            temperature: request.params.temperature,
            max_tokens: request.params.max_tokens,
            seed: request.params.seed,
        };
        let resp = self
            .agent
            .post(&self.url)
            .header("Authorization", format!("Bearer {}", self.api_key))
            .send_json(&body);
        let mut resp = match resp {
            Ok(r) => r,
            Err(ureq::Error::Timeout(t)) => return Err(ProviderError::Transient(format!("timeout: {t}"))),
            Err(e) => return Err(ProviderError::Transient(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderError::Transient(format!("reading body: {e}")))?;
        match status {
            200..=299 => {}
            401 | 403 => {
                return Err(ProviderError::Authentication(format!(
                    "HTTP {status}: {}",
                    snippet(&text)
                )))
            }
            408 | 409 | 429 | 500..=599 => {
                return Err(ProviderError::Transient(format!("HTTP {status}: {}", snippet(&text))))
            }
            _ => return Err(ProviderError::Rejected(format!("HTTP {status}: {}", snippet(&text)))),
        }
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| ProviderError::Rejected(format!("malformed response: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ProviderError::Rejected("response has no choices[0].message.content".into()))
    }
}

fn snippet(s: &str) -> String {
    s.chars().take(200).collect()
}

/// Sentence banks for synthesizing stories offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryBank {
    #[serde(default)]
    pub seed: u64,
    /// Inclusive range of sentences per story, opener included.
    pub sentences: (usize, usize),
    /// First sentence; `{name}` and `{marker}` are substituted.
    pub openers: Vec<String>,
    pub shared: Vec<String>,
    pub interest: Vec<String>,
    pub control: Vec<String>,
    /// Interest-group sentences that mention the marker attribute.
    #[serde(default)]
    pub interest_mentions: Vec<String>,
    /// Probability of drawing from the story's own group bank.
    pub own_rate: f64,
    /// Probability of drawing from the other group's bank.
    pub cross_rate: f64,
    /// Probability (interest stories only) of a marker-mention sentence.
    #[serde(default)]
    pub mention_rate: f64,
}

#[derive(Debug, Clone)]
pub enum MockStyle {
    /// Returns `STORY(scenario_id, marker_id, k)`.
    Echo,
    Stories(StoryBank),
}

/// Deterministic offline provider.
#[derive(Debug, Clone)]
pub struct MockProvider {
    pub style: MockStyle,
}

impl MockProvider {
    pub fn echo() -> Self {
        MockProvider { style: MockStyle::Echo }
    }

    pub fn stories(bank: StoryBank) -> Self {
        MockProvider {
            style: MockStyle::Stories(bank),
        }
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, bank: &'a [String]) -> Option<&'a str> {
    if bank.is_empty() {
        None
    } else {
        Some(&bank[rng.random_range(0..bank.len())])
    }
}

impl StoryBank {
    pub fn write_story(&self, req: &CompletionRequest<'_>) -> String {
        let seed_material = format!(
            "{}\u{1f}{}\u{1f}{}\u{1f}{}\u{1f}{}\u{1f}{}",
            self.seed, req.group, req.scenario_id, req.marker_id, req.name, req.sample_index
        );
        let digest = crate::sha256_hex(seed_material.as_bytes());
        let seed = u64::from_str_radix(&digest[..16], 16).unwrap_or(0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = (self.sentences.0.max(1), self.sentences.1.max(self.sentences.0.max(1)));
        let n = rng.random_range(lo..=hi);
        let (own, other) = match req.group {
            Group::Interest => (&self.interest, &self.control),
            Group::Control => (&self.control, &self.interest),
        };
        let mut out: Vec<String> = Vec::with_capacity(n);
        if let Some(s) = pick(&mut rng, &self.openers) {
            out.push(s.to_string());
        }
        while out.len() < n {
            let r: f64 = rng.random();
            let mention: f64 = rng.random();
            let chosen = if req.group == Group::Interest && mention < self.mention_rate {
                pick(&mut rng, &self.interest_mentions)
            } else if r < self.own_rate {
                pick(&mut rng, own)
            } else if r < self.own_rate + self.cross_rate {
                pick(&mut rng, other)
            } else {
                pick(&mut rng, &self.shared)
            };
            match chosen {
                Some(s) => out.push(s.to_string()),
                None => break,
            }
        }
        out.join(" ")
            .replace("{name}", req.name)
            .replace("{marker}", req.marker_text)
    }
}

impl GenerationProvider for MockProvider {
    fn model_name(&self) -> &str {
        "mock"
    }

    fn complete(&self, req: &CompletionRequest<'_>) -> std::result::Result<String, ProviderError> {
        Ok(match &self.style {
            MockStyle::Echo => format!("STORY({}, {}, {})", req.scenario_id, req.marker_id, req.sample_index),
            MockStyle::Stories(bank) => bank.write_story(req),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            initial_backoff_ms: 500,
            max_backoff_ms: 8000,
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .initial_backoff_ms
            .saturating_mul(1u64 << attempt.min(16))
            .min(self.max_backoff_ms);
        Duration::from_millis(ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOptions {
    pub samples_per_prompt: u32,
    pub params: GenerationParams,
    pub retry: RetryPolicy,
    /// Maximum requests in flight.
    pub concurrency: usize,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        GenerationOptions {
            samples_per_prompt: 1,
            params: GenerationParams::default(),
            retry: RetryPolicy::default(),
            concurrency: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub doc_id: String,
    pub retries: u32,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedRequest {
    pub doc_id: String,
    pub group: Group,
    pub scenario_id: String,
    pub marker_id: String,
    pub sample_index: u32,
    pub retries: u32,
    pub reason: String,
}

/// Written next to a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub grid_size: usize,
    pub samples_per_prompt: u32,
    pub expected_documents: usize,
    pub generated_documents: usize,
    pub model_name: String,
    pub generation_params: GenerationParams,
    pub retry_policy: RetryPolicy,
    pub requests: Vec<RequestRecord>,
    pub skipped: Vec<SkippedRequest>,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct GenerationOutcome {
    pub documents: Vec<GeneratedDocument>,
    pub manifest: RunManifest,
}

struct Job<'a> {
    pair: &'a PromptPair,
    group: Group,
    sample_index: u32,
    doc_id: String,
}

enum JobResult {
    Done(GeneratedDocument, u32),
    Skipped(String, u32),
}

pub fn doc_id(scenario_id: &str, marker_id: &str, sample_index: u32) -> String {
    format!("{scenario_id}.{marker_id}.{sample_index:04}")
}

/// Generates `2 × |grid| × samples_per_prompt` documents. Failed requests
/// are retried with exponential backoff and then skipped; authentication
/// failures and a run where every request fails are fatal. Output order is
/// `(scenario_id, marker_id, sample_index)` regardless of completion order.
///
/// When several names share a scenario and marker, `sample_index` keeps
/// counting across them so the triple stays unique.
pub fn generate_corpus(
    grid: &[PromptPair],
    provider: &dyn GenerationProvider,
    options: &GenerationOptions,
) -> Result<GenerationOutcome> {
    if options.samples_per_prompt == 0 {
        return Err(Error::Config("samples_per_prompt must be at least 1".into()));
    }
    let mut next_index: HashMap<(String, String), u32> = HashMap::new();
    let mut jobs = Vec::with_capacity(grid.len() * 2 * options.samples_per_prompt as usize);
    for pair in grid {
        for group in Group::ALL {
            let key = (pair.scenario_id.clone(), pair.marker_id(group).to_string());
            let base = next_index.entry(key).or_insert(0);
            for _ in 0..options.samples_per_prompt {
                let sample_index = *base;
                *base += 1;
                jobs.push(Job {
                    pair,
                    group,
                    sample_index,
                    doc_id: doc_id(&pair.scenario_id, pair.marker_id(group), sample_index),
                });
            }
        }
    }

    let results: Vec<Mutex<Option<JobResult>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let cursor = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let auth_failure: Mutex<Option<String>> = Mutex::new(None);
    let workers = options.concurrency.max(1).min(jobs.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = cursor.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                match run_job(job, provider, options) {
                    Ok(r) => *results[i].lock().expect("result slot") = Some(r),
                    Err(msg) => {
                        abort.store(true, Ordering::SeqCst);
                        auth_failure.lock().expect("auth slot").get_or_insert(msg);
                        break;
                    }
                }
            });
        }
    });

    if let Some(msg) = auth_failure.into_inner().expect("auth slot") {
        return Err(Error::Authentication(msg));
    }

    let mut documents = Vec::new();
    let mut skipped = Vec::new();
    let mut requests = Vec::new();
    for (job, slot) in jobs.iter().zip(results) {
        match slot.into_inner().expect("result slot") {
            Some(JobResult::Done(doc, retries)) => {
                requests.push(RequestRecord {
                    doc_id: job.doc_id.clone(),
                    retries,
                    ok: true,
                });
                documents.push(doc);
            }
            Some(JobResult::Skipped(reason, retries)) => {
                requests.push(RequestRecord {
                    doc_id: job.doc_id.clone(),
                    retries,
                    ok: false,
                });
                skipped.push(SkippedRequest {
                    doc_id: job.doc_id.clone(),
                    group: job.group,
                    scenario_id: job.pair.scenario_id.clone(),
                    marker_id: job.pair.marker_id(job.group).to_string(),
                    sample_index: job.sample_index,
                    retries,
                    reason,
                });
            }
            None => unreachable!("every job runs unless the run aborted"),
        }
    }
    if documents.is_empty() && !skipped.is_empty() {
        return Err(Error::AllRequestsFailed {
            failed: skipped.len(),
            first: skipped[0].reason.clone(),
        });
    }
    for s in &skipped {
        log::warn!("skipped {} after {} retries: {}", s.doc_id, s.retries, s.reason);
    }
    sort_documents(&mut documents);
    requests.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    let manifest = RunManifest {
        grid_size: grid.len(),
        samples_per_prompt: options.samples_per_prompt,
        expected_documents: jobs.len(),
        generated_documents: documents.len(),
        model_name: provider.model_name().to_string(),
        generation_params: options.params.clone(),
        retry_policy: options.retry.clone(),
        requests,
        skipped,
    };
    Ok(GenerationOutcome { documents, manifest })
}

/// Runs one request with retries. `Err` carries a fatal authentication
/// failure.
fn run_job(
    job: &Job<'_>,
    provider: &dyn GenerationProvider,
    options: &GenerationOptions,
) -> std::result::Result<JobResult, String> {
    let req = CompletionRequest {
        prompt: job.pair.prompt(job.group),
        params: &options.params,
        group: job.group,
        scenario_id: &job.pair.scenario_id,
        marker_id: job.pair.marker_id(job.group),
        marker_text: job.pair.marker_text(job.group),
        name: &job.pair.name,
        sample_index: job.sample_index,
    };
    let mut retries = 0;
    loop {
        let failure = match provider.complete(&req) {
            Ok(text) if !text.trim().is_empty() => {
                let doc = GeneratedDocument {
                    doc_id: job.doc_id.clone(),
                    group: job.group,
                    scenario_id: job.pair.scenario_id.clone(),
                    marker_id: req.marker_id.to_string(),
                    sample_index: job.sample_index,
                    prompt: req.prompt.to_string(),
                    text,
                    model_name: provider.model_name().to_string(),
                    generation_params: options.params.clone(),
                };
                return Ok(JobResult::Done(doc, retries));
            }
            Ok(_) => ProviderError::Transient("empty completion".into()),
            Err(e) => e,
        };
        match failure {
            ProviderError::Authentication(m) => return Err(m),
            ProviderError::Rejected(m) => return Ok(JobResult::Skipped(m, retries)),
            ProviderError::Transient(m) => {
                if retries >= options.retry.max_retries {
                    return Ok(JobResult::Skipped(m, retries));
                }
                std::thread::sleep(options.retry.backoff(retries));
                retries += 1;
            }
        }
    }
}

pub fn sort_documents(docs: &mut [GeneratedDocument]) {
    docs.sort_by(|a, b| {
        (&a.scenario_id, &a.marker_id, a.sample_index).cmp(&(&b.scenario_id, &b.marker_id, b.sample_index))
    });
}

pub fn write_corpus<W: Write>(docs: &[GeneratedDocument], mut w: W) -> Result<()> {
    for d in docs {
        serde_json::to_writer(&mut w, d)?;
        writeln!(w).map_err(|e| Error::io("<corpus>", e))?;
    }
    Ok(())
}

pub fn save_corpus(docs: &[GeneratedDocument], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_corpus(docs, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mirror of [`GeneratedDocument`] with a free-form group, so that an
/// unknown label is reported as such rather than as a serde variant error.
#[derive(Deserialize)]
struct RawDocument {
    doc_id: String,
    group: String,
    scenario_id: String,
    marker_id: String,
    sample_index: u32,
    prompt: String,
    text: String,
    model_name: String,
    generation_params: GenerationParams,
}

pub fn read_corpus<R: BufRead>(r: R, path: &Path) -> Result<Vec<GeneratedDocument>> {
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let raw: RawDocument = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let group = raw.group.parse::<Group>().map_err(|e| err(e.to_string()))?;
        if !seen.insert((raw.scenario_id.clone(), raw.marker_id.clone(), raw.sample_index)) {
            return Err(err(format!(
                "duplicate (scenario_id, marker_id, sample_index) = ({}, {}, {})",
                raw.scenario_id, raw.marker_id, raw.sample_index
            )));
        }
        if raw.text.trim().is_empty() {
            log::warn!("{}:{}: document {} has empty text", path.display(), n + 1, raw.doc_id);
        }
        docs.push(GeneratedDocument {
            doc_id: raw.doc_id,
            group,
            scenario_id: raw.scenario_id,
            marker_id: raw.marker_id,
            sample_index: raw.sample_index,
            prompt: raw.prompt,
            text: raw.text,
            model_name: raw.model_name,
            generation_params: raw.generation_params,
        });
    }
    if docs.is_empty() {
        log::warn!("{}: corpus is empty", path.display());
    }
    Ok(docs)
}

pub fn load_corpus(path: &Path) -> Result<Vec<GeneratedDocument>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(std::io::BufReader::new(f), path)
}

/// Documents per group, for summaries.
pub fn group_sizes(docs: &[GeneratedDocument]) -> BTreeMap<Group, usize> {
    let mut m = BTreeMap::new();
    for d in docs {
        *m.entry(d.group).or_insert(0) += 1;
    }
    m
}
