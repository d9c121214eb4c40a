//! Sliding sentence windows over interest-group stories, scored by the
//! BiasScores of the classes they contain.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classes::ClassKey;
use crate::corpusgen::Marker;
use crate::stats::BiasTable;
use crate::textnorm::{for_each_span, make_occurrence, AnalyzedDocument, ByteSpan, NGramLimits, Normalizer, WordList};
use crate::{Error, Group, Result};

/// Lemmas that identify the marked attribute in a story.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MarkerLexicon {
    lemmas: BTreeSet<String>,
}

impl MarkerLexicon {
    pub fn new<I, S>(lemmas: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        MarkerLexicon {
            lemmas: lemmas.into_iter().map(|l| l.into().to_lowercase()).collect(),
        }
    }

    /// Content lemmas of the interest markers that never occur in a control
    /// marker, plus the intrinsic lemmas.
    pub fn derive(normalizer: &Normalizer, markers: &[Marker], intrinsic: &BTreeSet<String>) -> Self {
        let lemmas_of = |g: Group| -> BTreeSet<String> {
            markers
                .iter()
                .filter(|m| m.group == g)
                .flat_map(|m| normalizer.content_lemmas(&m.text))
                .collect()
        };
        let control = lemmas_of(Group::Control);
        let mut lemmas: BTreeSet<String> = lemmas_of(Group::Interest).difference(&control).cloned().collect();
        lemmas.extend(intrinsic.iter().cloned());
        MarkerLexicon { lemmas }
    }

    /// One word per line; each is lemmatized with `normalizer`.
    pub fn load(path: &Path, normalizer: &Normalizer) -> Result<Self> {
        let words = WordList::load(path)?;
        Ok(MarkerLexicon {
            lemmas: words.iter().map(|w| normalizer.lemmatize(w)).collect(),
        })
    }

    pub fn contains(&self, lemma: &str) -> bool {
        self.lemmas.contains(lemma)
    }

    pub fn lemmas(&self) -> &BTreeSet<String> {
        &self.lemmas
    }

    pub fn is_empty(&self) -> bool {
        self.lemmas.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fragment {
    /// `{doc_id}:{first}-{last}`, sentence indices inclusive.
    pub fragment_id: String,
    pub doc_id: String,
    /// Sentence indices `[start, end)`.
    pub sentence_range: (usize, usize),
    /// Byte span within the document text.
    pub char_span: ByteSpan,
    pub text: String,
    /// Marker lemma found in the center sentence.
    pub center_marker: String,
}

/// Every window of `window` consecutive sentences in an interest document
/// whose center sentence mentions a marker lemma. Windows advance by one
/// sentence; documents shorter than `window` yield nothing.
pub fn candidate_fragments(docs: &[AnalyzedDocument], lexicon: &MarkerLexicon, window: usize) -> Vec<Fragment> {
    if window == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for doc in docs.iter().filter(|d| d.group == Group::Interest) {
        if doc.sentences.len() < window {
            continue;
        }
        for s in 0..=doc.sentences.len() - window {
            let center = &doc.sentences[s + window / 2];
            let Some(hit) = center.tokens.iter().find(|t| lexicon.contains(&t.lemma)) else {
                continue;
            };
            let e = s + window;
            let char_span = (doc.sentences[s].char_span.0, doc.sentences[e - 1].char_span.1);
            out.push(Fragment {
                fragment_id: format!("{}:{}-{}", doc.doc_id, s, e - 1),
                doc_id: doc.doc_id.clone(),
                sentence_range: (s, e),
                char_span,
                text: doc.text[char_span.0..char_span.1].to_string(),
                center_marker: hit.lemma.clone(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSpan {
    pub sentence_index: usize,
    /// Token indices `[i, j)` within the sentence.
    pub token_span: (usize, usize),
    /// Byte span within the document text.
    pub char_span: ByteSpan,
    pub surface: String,
    pub class_ref: ClassKey,
    #[serde(with = "crate::extreal")]
    pub bs: f64,
    /// `bs`, or the signed largest finite `|bs|` when `bs` is infinite.
    pub bs_contribution: f64,
}

impl MatchSpan {
    fn contains_strictly(&self, other: &MatchSpan) -> bool {
        self.sentence_index == other.sentence_index
            && self.token_span != other.token_span
            && self.token_span.0 <= other.token_span.0
            && other.token_span.1 <= self.token_span.1
    }
}

/// Occurrences inside the fragment whose class is in the table. A match
/// strictly contained in another match of the same sentence is dropped;
/// partially overlapping matches are both kept. Output is in text order.
pub fn match_classes(
    fragment: &Fragment,
    doc: &AnalyzedDocument,
    table: &BiasTable,
    limits: NGramLimits,
) -> Result<Vec<MatchSpan>> {
    let mut found = Vec::new();
    for sentence in &doc.sentences[fragment.sentence_range.0..fragment.sentence_range.1.min(doc.sentences.len())] {
        let mut failure = None;
        for_each_span(&sentence.tokens, limits, |i, j| {
            let key = ClassKey::new(
                sentence.tokens[i..j]
                    .iter()
                    .filter(|t| !t.is_stopword)
                    .map(|t| t.lemma.clone()),
            );
            let Some(entry) = table.get(&key) else { return };
            let Some(contribution) = table.contribution(entry.bs) else {
                failure.get_or_insert_with(|| Error::NoFiniteReplacement(fragment.fragment_id.clone()));
                return;
            };
            let occ = make_occurrence(&doc.doc_id, sentence, i, j);
            found.push(MatchSpan {
                sentence_index: sentence.index,
                token_span: (i, j),
                char_span: occ.char_span,
                surface: occ.surface,
                class_ref: key,
                bs: entry.bs,
                bs_contribution: contribution,
            });
        });
        if let Some(e) = failure {
            return Err(e);
        }
    }
    // Longest first, then leftmost, so each kept span is maximal.
    found.sort_by_key(|m| {
        (
            std::cmp::Reverse(m.token_span.1 - m.token_span.0),
            m.sentence_index,
            m.token_span.0,
        )
    });
    let mut kept: Vec<MatchSpan> = Vec::with_capacity(found.len());
    for m in found {
        if !kept.iter().any(|k| k.contains_strictly(&m)) {
            kept.push(m);
        }
    }
    kept.sort_by_key(|m| (m.sentence_index, m.token_span));
    Ok(kept)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragmentScore {
    #[serde(flatten)]
    pub fragment: Fragment,
    pub spans: Vec<MatchSpan>,
    pub score: f64,
}

pub fn score_fragment(
    fragment: &Fragment,
    doc: &AnalyzedDocument,
    table: &BiasTable,
    limits: NGramLimits,
) -> Result<FragmentScore> {
    let spans = match_classes(fragment, doc, table, limits)?;
    let score = spans.iter().map(|s| s.bs_contribution).sum();
    Ok(FragmentScore {
        fragment: fragment.clone(),
        spans,
        score,
    })
}

/// Scores fragments in parallel; order follows the input.
pub fn score_fragments(
    fragments: &[Fragment],
    docs: &[AnalyzedDocument],
    table: &BiasTable,
    limits: NGramLimits,
) -> Result<Vec<FragmentScore>> {
    let by_id: HashMap<&str, &AnalyzedDocument> = docs.iter().map(|d| (d.doc_id.as_str(), d)).collect();
    fragments
        .par_iter()
        .map(|f| {
            let doc = by_id.get(f.doc_id.as_str()).ok_or_else(|| Error::DanglingDocument {
                fragment: f.fragment_id.clone(),
                doc_id: f.doc_id.clone(),
            })?;
            score_fragment(f, doc, table, limits)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankList {
    Top,
    Bottom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFragment {
    pub list: RankList,
    /// 1-based position within its list.
    pub rank: usize,
    #[serde(flatten)]
    pub scored: FragmentScore,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Ranking {
    /// Highest scores first.
    pub top: Vec<RankedFragment>,
    /// Lowest scores first.
    pub bottom: Vec<RankedFragment>,
    pub candidates: usize,
}

fn tie_key(f: &FragmentScore) -> (&str, (usize, usize)) {
    (f.fragment.doc_id.as_str(), f.fragment.sentence_range)
}

/// The `k` highest and `k` lowest scoring fragments. Ties break on
/// `(doc_id, sentence_range)`. With fewer than `2k` candidates the lists
/// overlap.
pub fn rank_fragments(scores: &[FragmentScore], k: usize) -> Ranking {
    let mut desc: Vec<&FragmentScore> = scores.iter().collect();
    desc.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| tie_key(a).cmp(&tie_key(b))));
    let mut asc: Vec<&FragmentScore> = scores.iter().collect();
    asc.sort_by(|a, b| a.score.total_cmp(&b.score).then_with(|| tie_key(a).cmp(&tie_key(b))));
    let take = |v: Vec<&FragmentScore>, list| {
        v.into_iter()
            .take(k)
            .enumerate()
            .map(|(i, s)| RankedFragment {
                list,
                rank: i + 1,
                scored: s.clone(),
            })
            .collect()
    };
    Ranking {
        top: take(desc, RankList::Top),
        bottom: take(asc, RankList::Bottom),
        candidates: scores.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RankingHeader {
    kind: String,
    k: usize,
    candidates: usize,
}

impl Ranking {
    pub fn k(&self) -> usize {
        self.top.len().max(self.bottom.len())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = RankingHeader {
            kind: "header".into(),
            k: self.k(),
            candidates: self.candidates,
        };
        let io = |e| Error::io("<ranking>", e);
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w).map_err(io)?;
        for r in self.top.iter().chain(&self.bottom) {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w).map_err(io)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_jsonl(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut ranking = Ranking::default();
        let mut saw_header = false;
        for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |e: serde_json::Error| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            };
            if !saw_header {
                let h: RankingHeader = serde_json::from_str(&line).map_err(err)?;
                ranking.candidates = h.candidates;
                saw_header = true;
                continue;
            }
            let r: RankedFragment = serde_json::from_str(&line).map_err(err)?;
            match r.list {
                RankList::Top => ranking.top.push(r),
                RankList::Bottom => ranking.bottom.push(r),
            }
        }
        Ok(ranking)
    }
}
