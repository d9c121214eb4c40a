//! Tokenization, sentence splitting, dictionary lemmatization and n-gram
//! extraction.
//!
//! Tokens are maximal runs of letters and digits. Apostrophes and hyphens
//! stay inside a token when they sit between two word characters. Any other
//! non-space character is punctuation: it never becomes a token, but it marks
//! a break that n-grams may not span.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpusgen::GeneratedDocument;
use crate::{Error, Group, Result};

const DEFAULT_STOPWORDS_ES: &str = include_str!("../data/stopwords_es.txt");
const DEFAULT_ABBREVIATIONS_ES: &str = include_str!("../data/abbreviations_es.txt");

/// Byte offsets `[start, end)` into a document.
pub type ByteSpan = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub lower: String,
    pub lemma: String,
    pub is_stopword: bool,
    pub char_span: ByteSpan,
    /// Punctuation occurs between the previous token and this one.
    pub break_before: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub index: usize,
    pub tokens: Vec<Token>,
    pub char_span: ByteSpan,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NGramOccurrence {
    pub doc_id: String,
    pub sentence_index: usize,
    /// Token indices `[i, j)` within the sentence.
    pub token_span: (usize, usize),
    pub char_span: ByteSpan,
    pub surface: String,
    pub content_lemmas: Vec<String>,
    pub content_count: usize,
}

impl NGramOccurrence {
    pub fn surface_len(&self) -> usize {
        self.token_span.1 - self.token_span.0
    }
}

/// Bounds on extracted n-grams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NGramLimits {
    /// Maximum number of tokens, stopwords included.
    pub max_surface_len: usize,
    /// Maximum number of non-stopword tokens.
    pub max_content: usize,
}

impl Default for NGramLimits {
    fn default() -> Self {
        NGramLimits {
            max_surface_len: 7,
            max_content: 4,
        }
    }
}

/// Form to lemma map. Every lemma maps to itself, so lookup is idempotent.
#[derive(Debug, Clone, Default)]
pub struct LemmaDictionary {
    map: HashMap<String, String>,
}

impl LemmaDictionary {
    pub fn from_pairs<I, S1, S2>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S1, S2)>,
        S1: AsRef<str>,
        S2: AsRef<str>,
    {
        let mut map: HashMap<String, String> = HashMap::new();
        let mut lemmas = Vec::new();
        for (form, lemma) in pairs {
            let form = form.as_ref().trim().to_lowercase();
            let lemma = lemma.as_ref().trim().to_lowercase();
            if form.is_empty() || lemma.is_empty() {
                continue;
            }
            // First entry wins for ambiguous forms.
            map.entry(form).or_insert_with(|| lemma.clone());
            lemmas.push(lemma);
        }
        let mut overridden = 0usize;
        for lemma in lemmas {
            let prev = map.insert(lemma.clone(), lemma.clone());
            if prev.is_some_and(|p| p != lemma) {
                overridden += 1;
            }
        }
        if overridden > 0 {
            log::warn!("lemma dictionary: {overridden} forms that are also lemmas were remapped to themselves");
        }
        LemmaDictionary { map }
    }

    /// Parses `form<TAB>lemma` lines; `#` starts a comment line.
    pub fn parse_tsv(text: &str, source: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            match (cols.next(), cols.next()) {
                (Some(form), Some(lemma)) if !form.trim().is_empty() && !lemma.trim().is_empty() => {
                    pairs.push((form.to_string(), lemma.to_string()))
                }
                _ => {
                    return Err(Error::Parse {
                        path: source.to_path_buf(),
                        line: n + 1,
                        message: "expected `form<TAB>lemma`".into(),
                    })
                }
            }
        }
        Ok(Self::from_pairs(pairs))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text, path)
    }

    pub fn get(&self, lower: &str) -> Option<&str> {
        self.map.get(lower).map(String::as_str)
    }

    /// `dict[lower]` when present, `lower` otherwise.
    pub fn lemmatize<'a>(&'a self, lower: &'a str) -> &'a str {
        self.get(lower).unwrap_or(lower)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn fingerprint(&self) -> String {
        let mut entries: Vec<_> = self.map.iter().collect();
        entries.sort();
        let mut buf = String::new();
        for (f, l) in entries {
            buf.push_str(f);
            buf.push('\t');
            buf.push_str(l);
            buf.push('\n');
        }
        crate::sha256_hex(buf.as_bytes())
    }
}

/// Lowercased word list, one entry per line.
#[derive(Debug, Clone, Default)]
pub struct WordList {
    words: BTreeSet<String>,
}

impl WordList {
    pub fn parse(text: &str) -> Self {
        let words = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        WordList { words }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn spanish_stopwords() -> Self {
        Self::parse(DEFAULT_STOPWORDS_ES)
    }

    pub fn spanish_abbreviations() -> Self {
        Self::parse(DEFAULT_ABBREVIATIONS_ES)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    fn fingerprint(&self) -> String {
        let joined: Vec<&str> = self.iter().collect();
        crate::sha256_hex(joined.join("\n").as_bytes())
    }
}

impl FromIterator<String> for WordList {
    fn from_iter<T: IntoIterator<Item = String>>(iter: T) -> Self {
        WordList {
            words: iter.into_iter().map(|w| w.to_lowercase()).collect(),
        }
    }
}

/// Identifies the exact normalization used for counting, so a later stage
/// can refuse to match fragments tokenized differently.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconFingerprint {
    pub lemmas_sha256: String,
    pub stopwords_sha256: String,
    pub abbreviations_sha256: String,
    pub limits: NGramLimits,
}

/// Tokenizer, sentence splitter and lemmatizer bundled with their word lists.
#[derive(Debug, Clone)]
pub struct Normalizer {
    pub dictionary: LemmaDictionary,
    pub stopwords: WordList,
    /// Entries without the trailing period, lowercased.
    pub abbreviations: WordList,
}

impl Default for Normalizer {
    /// Empty dictionary, no stopwords, no abbreviations.
    fn default() -> Self {
        Normalizer {
            dictionary: LemmaDictionary::default(),
            stopwords: WordList::default(),
            abbreviations: WordList::default(),
        }
    }
}

impl Normalizer {
    pub fn new(dictionary: LemmaDictionary, stopwords: WordList, abbreviations: WordList) -> Self {
        let abbreviations = abbreviations
            .iter()
            .map(|a| a.trim_end_matches('.').to_string())
            .collect();
        Normalizer {
            dictionary,
            stopwords,
            abbreviations,
        }
    }

    pub fn fingerprint(&self, limits: NGramLimits) -> LexiconFingerprint {
        LexiconFingerprint {
            lemmas_sha256: self.dictionary.fingerprint(),
            stopwords_sha256: self.stopwords.fingerprint(),
            abbreviations_sha256: self.abbreviations.fingerprint(),
            limits,
        }
    }

    pub fn is_stopword(&self, lower: &str) -> bool {
        self.stopwords.contains(lower)
    }

    /// Stopwords are returned unchanged.
    pub fn lemmatize(&self, lower: &str) -> String {
        if self.is_stopword(lower) {
            lower.to_string()
        } else {
            self.dictionary.lemmatize(lower).to_string()
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<Token> {
        scan_words(text)
            .into_iter()
            .map(|w| {
                let surface = &text[w.start..w.end];
                let lower = surface.to_lowercase();
                let is_stopword = self.is_stopword(&lower);
                let lemma = if is_stopword {
                    lower.clone()
                } else {
                    self.dictionary.lemmatize(&lower).to_string()
                };
                Token {
                    surface: surface.to_string(),
                    lower,
                    lemma,
                    is_stopword,
                    char_span: (w.start, w.end),
                    break_before: w.break_before,
                }
            })
            .collect()
    }

    /// Byte offsets at which sentences end.
    fn sentence_ends(&self, text: &str) -> Vec<usize> {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let byte_at = |i: usize| chars.get(i).map_or(text.len(), |c| c.0);
        let mut ends = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            if !is_terminal(chars[i].1) {
                i += 1;
                continue;
            }
            let first_terminal = i;
            let mut j = i;
            while j < chars.len() && is_terminal(chars[j].1) {
                j += 1;
            }
            while j < chars.len() && is_closing(chars[j].1) {
                j += 1;
            }
            let end = byte_at(j);
            let mut k = j;
            while k < chars.len() && chars[k].1.is_whitespace() {
                k += 1;
            }
            let boundary = if k == chars.len() {
                true
            } else if k == j {
                false
            } else {
                let next = chars[k].1;
                next.is_uppercase() || is_opening(next)
            };
            let single_period = chars[first_terminal].1 == '.'
                && (first_terminal + 1 == chars.len() || chars[first_terminal + 1].1 != '.');
            if boundary && !(single_period && self.is_abbreviation(text, chars[first_terminal].0)) {
                ends.push(end);
            }
            i = j.max(i + 1);
        }
        ends
    }

    fn is_abbreviation(&self, text: &str, period_at: usize) -> bool {
        let before = &text[..period_at];
        let word_start = before
            .char_indices()
            .rev()
            .take_while(|(_, c)| c.is_alphanumeric())
            .last()
            .map(|(i, _)| i);
        match word_start {
            Some(s) => self.abbreviations.contains(&before[s..].to_lowercase()),
            None => false,
        }
    }

    pub fn split_sentences(&self, text: &str) -> Vec<Sentence> {
        let tokens = self.tokenize(text);
        let ends = self.sentence_ends(text);
        let mut sentences: Vec<Sentence> = Vec::new();
        let mut tokens = tokens.into_iter().peekable();
        let mut seg_start = 0usize;
        for seg_end in ends.into_iter().chain(std::iter::once(text.len())) {
            if seg_end < seg_start {
                continue;
            }
            let mut sent_tokens = Vec::new();
            while let Some(t) = tokens.next_if(|t| t.char_span.0 < seg_end) {
                sent_tokens.push(t);
            }
            if !sent_tokens.is_empty() {
                let segment = &text[seg_start..seg_end];
                let lead = segment.len() - segment.trim_start().len();
                let trail = segment.len() - segment.trim_end().len();
                sentences.push(Sentence {
                    index: sentences.len(),
                    tokens: sent_tokens,
                    char_span: (seg_start + lead, seg_end - trail),
                });
            }
            seg_start = seg_end;
        }
        sentences
    }

    pub fn analyze(&self, doc_id: &str, group: Group, text: &str) -> AnalyzedDocument {
        AnalyzedDocument {
            doc_id: doc_id.to_string(),
            group,
            text: text.to_string(),
            sentences: self.split_sentences(text),
        }
    }

    pub fn analyze_corpus(&self, docs: &[GeneratedDocument]) -> Vec<AnalyzedDocument> {
        docs.par_iter()
            .map(|d| self.analyze(&d.doc_id, d.group, &d.text))
            .collect()
    }

    /// Content lemmas of a short phrase, in order.
    pub fn content_lemmas(&self, phrase: &str) -> Vec<String> {
        self.tokenize(phrase)
            .into_iter()
            .filter(|t| !t.is_stopword)
            .map(|t| t.lemma)
            .collect()
    }
}

/// Tokenize with identity lemmatization and no stopwords.
pub fn tokenize(text: &str) -> Vec<Token> {
    Normalizer::default().tokenize(text)
}

/// Sentence split without abbreviations.
pub fn split_sentences(text: &str) -> Vec<Sentence> {
    Normalizer::default().split_sentences(text)
}

/// `dict[lower]` or `lower`; stopwords are returned unchanged.
pub fn lemmatize(lower: &str, dict: &LemmaDictionary, stopwords: &WordList) -> String {
    if stopwords.contains(lower) {
        lower.to_string()
    } else {
        dict.lemmatize(lower).to_string()
    }
}

/// A tokenized document with its source text and label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnalyzedDocument {
    pub doc_id: String,
    pub group: Group,
    pub text: String,
    pub sentences: Vec<Sentence>,
}

impl AnalyzedDocument {
    pub fn content_token_count(&self) -> u64 {
        self.sentences
            .iter()
            .flat_map(|s| &s.tokens)
            .filter(|t| !t.is_stopword)
            .count() as u64
    }
}

/// Calls `f(i, j)` for every valid n-gram span `[i, j)` of a token sequence:
/// both edges are content tokens, no punctuation break inside, at most
/// `max_surface_len` tokens and between 1 and `max_content` content tokens.
pub fn for_each_span(tokens: &[Token], limits: NGramLimits, mut f: impl FnMut(usize, usize)) {
    for i in 0..tokens.len() {
        if tokens[i].is_stopword {
            continue;
        }
        let mut content = 0;
        let end = tokens.len().min(i + limits.max_surface_len);
        for (j, tok) in tokens.iter().enumerate().take(end).skip(i) {
            if j > i && tok.break_before {
                break;
            }
            if !tok.is_stopword {
                content += 1;
                if content > limits.max_content {
                    break;
                }
                f(i, j + 1);
            }
        }
    }
}

pub fn extract_ngrams(doc_id: &str, sentence: &Sentence, limits: NGramLimits) -> Vec<NGramOccurrence> {
    let mut out = Vec::new();
    for_each_span(&sentence.tokens, limits, |i, j| {
        out.push(make_occurrence(doc_id, sentence, i, j));
    });
    out
}

pub(crate) fn make_occurrence(doc_id: &str, sentence: &Sentence, i: usize, j: usize) -> NGramOccurrence {
    let toks = &sentence.tokens[i..j];
    let content_lemmas: Vec<String> = toks
        .iter()
        .filter(|t| !t.is_stopword)
        .map(|t| t.lemma.clone())
        .collect();
    NGramOccurrence {
        doc_id: doc_id.to_string(),
        sentence_index: sentence.index,
        token_span: (i, j),
        char_span: (toks[0].char_span.0, toks[toks.len() - 1].char_span.1),
        surface: toks.iter().map(|t| t.surface.as_str()).collect::<Vec<_>>().join(" "),
        content_count: content_lemmas.len(),
        content_lemmas,
    }
}

struct WordSpan {
    start: usize,
    end: usize,
    break_before: bool,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || ('\u{0300}'..='\u{036F}').contains(&c)
}

fn is_joiner(c: char) -> bool {
    matches!(c, '\'' | '’' | '-' | '‐')
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | '…')
}

fn is_closing(c: char) -> bool {
    matches!(c, '"' | '\'' | '”' | '’' | '»' | ')' | ']')
}

fn is_opening(c: char) -> bool {
    matches!(
        c,
        '¿' | '¡' | '"' | '\'' | '“' | '‘' | '«' | '(' | '[' | '—' | '–' | '-'
    )
}

fn scan_words(text: &str) -> Vec<WordSpan> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let byte_at = |i: usize| chars.get(i).map_or(text.len(), |c| c.0);
    let mut out = Vec::new();
    let mut pending_break = false;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i].1;
        if c.is_alphanumeric() {
            let start = i;
            let mut j = i + 1;
            loop {
                if j < chars.len() && is_word_char(chars[j].1) {
                    j += 1;
                } else if j + 1 < chars.len() && is_joiner(chars[j].1) && chars[j + 1].1.is_alphanumeric() {
                    j += 2;
                } else {
                    break;
                }
            }
            out.push(WordSpan {
                start: byte_at(start),
                end: byte_at(j),
                break_before: pending_break,
            });
            pending_break = false;
            i = j;
        } else {
            if !c.is_whitespace() {
                pending_break = true;
            }
            i += 1;
        }
    }
    out
}

/// Content lemmas of every phrase, pooled.
pub fn lemma_set<'a>(normalizer: &Normalizer, phrases: impl IntoIterator<Item = &'a str>) -> BTreeSet<String> {
    phrases.into_iter().flat_map(|p| normalizer.content_lemmas(p)).collect()
}
