//! PMI and BiasScore over equivalence classes, noise-threshold calibration by
//! label permutation, and table filtering.
//!
//! All logarithms are natural. Zero counts are not smoothed: a class seen in
//! only one group gets a signed infinite BiasScore, which is resolved later
//! when fragments are scored.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classes::{document_class_counts, ClassKey, ClassTable};
use crate::textnorm::{AnalyzedDocument, LexiconFingerprint, NGramLimits};
use crate::{Error, Group, GroupCounts, Result};

/// `ln( (freq_wG / total_G) / (freq_w_all / total_all) )`, `-inf` when the
/// unit never occurs in `G`.
pub fn pmi(freq_w_g: u64, total_g: u64, freq_w_all: u64, total_all: u64) -> Result<f64> {
    if total_g == 0 || total_all == 0 {
        return Err(Error::Statistic("PMI needs non-empty group and corpus totals".into()));
    }
    if freq_w_g > freq_w_all {
        return Err(Error::Statistic(format!(
            "group frequency {freq_w_g} exceeds corpus frequency {freq_w_all}"
        )));
    }
    if freq_w_g == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    let p_w_g = freq_w_g as f64 / total_g as f64;
    let p_w = freq_w_all as f64 / total_all as f64;
    Ok((p_w_g / p_w).ln())
}

/// `ln(freq_gi / m_gi) - ln(freq_gc / m_gc)`.
pub fn bias_score(freq_gi: u64, freq_gc: u64, m_gi: u64, m_gc: u64) -> Result<f64> {
    if m_gi == 0 || m_gc == 0 {
        return Err(Error::Statistic("BiasScore needs non-empty group totals".into()));
    }
    match (freq_gi, freq_gc) {
        (0, 0) => Err(Error::Statistic("class occurs in neither group".into())),
        (_, 0) => Ok(f64::INFINITY),
        (0, _) => Ok(f64::NEG_INFINITY),
        (a, b) => Ok((a as f64 / m_gi as f64).ln() - (b as f64 / m_gc as f64).ln()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasEntry {
    pub key: ClassKey,
    pub content_count: usize,
    pub members: BTreeSet<String>,
    pub freq_gi: u64,
    pub freq_gc: u64,
    #[serde(with = "crate::extreal")]
    pub pmi_gi: f64,
    #[serde(with = "crate::extreal")]
    pub pmi_gc: f64,
    #[serde(with = "crate::extreal")]
    pub bs: f64,
}

impl BiasEntry {
    pub fn combined_freq(&self) -> u64 {
        self.freq_gi + self.freq_gc
    }
}

/// BiasScore for every class of the table, in key order.
pub fn score_classes(table: &ClassTable) -> Result<Vec<BiasEntry>> {
    let totals = table.totals();
    let m_all = totals.total();
    table
        .iter()
        .map(|c| {
            let all = c.freq.total();
            Ok(BiasEntry {
                key: c.key.clone(),
                content_count: c.content_count,
                members: c.members.clone(),
                freq_gi: c.freq.interest,
                freq_gc: c.freq.control,
                pmi_gi: pmi(c.freq.interest, totals.interest, all, m_all)?,
                pmi_gc: pmi(c.freq.control, totals.control, all, m_all)?,
                bs: bias_score(c.freq.interest, c.freq.control, totals.interest, totals.control)?,
            })
        })
        .collect()
}

/// Thresholds and exclusion lists applied to the scored class table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub intrinsic_lemmas: BTreeSet<String>,
    /// Free-form identifier of the intrinsic list (path, hash), for audit.
    #[serde(default)]
    pub intrinsic_list_id: Option<String>,
    /// Minimum combined GI+GC frequency by number of content tokens. Orders
    /// above the largest key use the largest key's threshold.
    pub min_freq_by_content_count: BTreeMap<usize, u64>,
    pub min_abs_bs: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            intrinsic_lemmas: BTreeSet::new(),
            intrinsic_list_id: None,
            min_freq_by_content_count: default_frequency_thresholds(),
            min_abs_bs: 0.5,
        }
    }
}

pub fn default_frequency_thresholds() -> BTreeMap<usize, u64> {
    BTreeMap::from([(1, 40), (2, 20), (3, 15), (4, 10)])
}

impl FilterConfig {
    /// Keeps every class. Useful for building tables from hand-made entries.
    pub fn pass_through() -> Self {
        FilterConfig {
            intrinsic_lemmas: BTreeSet::new(),
            intrinsic_list_id: None,
            min_freq_by_content_count: BTreeMap::from([(1, 0)]),
            min_abs_bs: 0.0,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.min_freq_by_content_count.is_empty() {
            problems.push("min_freq_by_content_count must not be empty".to_string());
        }
        let mut prev: Option<u64> = None;
        for (&n, &t) in &self.min_freq_by_content_count {
            if n == 0 {
                problems.push("min_freq_by_content_count keys start at 1".to_string());
            }
            if t == 0 {
                problems.push(format!("frequency threshold for {n} content tokens must be positive"));
            }
            if prev.is_some_and(|p| t > p) {
                problems.push(format!(
                    "frequency threshold for {n} content tokens ({t}) exceeds the threshold for shorter classes"
                ));
            }
            prev = Some(t);
        }
        if !(self.min_abs_bs >= 0.0 && self.min_abs_bs.is_finite()) {
            problems.push(format!(
                "min_abs_bs must be a finite value >= 0, got {}",
                self.min_abs_bs
            ));
        }
        problems
    }

    pub fn threshold_for(&self, content_count: usize) -> u64 {
        self.min_freq_by_content_count
            .range(..=content_count)
            .next_back()
            .or_else(|| self.min_freq_by_content_count.iter().next())
            .map_or(1, |(_, &t)| t)
    }

    pub fn intrinsic_hit<'a>(&self, key: &'a ClassKey) -> Option<&'a str> {
        key.lemmas()
            .iter()
            .find(|l| self.intrinsic_lemmas.contains(l.as_str()))
            .map(String::as_str)
    }

    /// Passes the intrinsic and frequency filters; these do not depend on
    /// how documents are labelled.
    fn passes_label_free(&self, key: &ClassKey, combined: u64) -> bool {
        self.intrinsic_hit(key).is_none() && combined >= self.threshold_for(key.content_count())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum FilterOutcome {
    Kept,
    Intrinsic {
        lemma: String,
    },
    LowFrequency {
        freq: u64,
        threshold: u64,
    },
    LowBias {
        #[serde(with = "crate::extreal")]
        bs: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub key: ClassKey,
    #[serde(flatten)]
    pub outcome: FilterOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiltersApplied {
    pub min_freq_by_content_count: BTreeMap<usize, u64>,
    pub min_abs_bs: f64,
    pub intrinsic_list_id: Option<String>,
    pub intrinsic_lemmas: usize,
    pub classes_in: usize,
    pub dropped_intrinsic: usize,
    pub dropped_low_frequency: usize,
    pub dropped_low_bias: usize,
    pub kept: usize,
}

/// Filtered, scored classes.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasTable {
    entries: Vec<BiasEntry>,
    index: HashMap<ClassKey, usize>,
    max_finite_abs_bs: Option<f64>,
    pub totals: GroupCounts,
    pub filters_applied: FiltersApplied,
    pub lexicon: Option<LexiconFingerprint>,
    /// One decision per input class, in key order. Not persisted with the
    /// table; see [`BiasTable::write_audit`].
    pub audit: Vec<FilterDecision>,
}

impl BiasTable {
    pub fn entries(&self) -> &[BiasEntry] {
        &self.entries
    }

    pub fn get(&self, key: &ClassKey) -> Option<&BiasEntry> {
        self.index.get(key).map(|&i| &self.entries[i])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Largest `|bs|` over finite retained entries; `None` when every
    /// retained entry is infinite (or there are none).
    pub fn max_finite_abs_bs(&self) -> Option<f64> {
        self.max_finite_abs_bs
    }

    /// The value a class contributes to a fragment score: its BiasScore, or
    /// the signed largest finite magnitude when the BiasScore is infinite.
    pub fn contribution(&self, bs: f64) -> Option<f64> {
        if bs.is_finite() {
            Some(bs)
        } else {
            self.max_finite_abs_bs.map(|m| m.copysign(bs))
        }
    }

    fn from_parts(
        entries: Vec<BiasEntry>,
        totals: GroupCounts,
        filters_applied: FiltersApplied,
        lexicon: Option<LexiconFingerprint>,
        audit: Vec<FilterDecision>,
    ) -> Self {
        let max_finite_abs_bs = entries
            .iter()
            .filter(|e| e.bs.is_finite())
            .map(|e| e.bs.abs())
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
        let index = entries.iter().enumerate().map(|(i, e)| (e.key.clone(), i)).collect();
        BiasTable {
            entries,
            index,
            max_finite_abs_bs,
            totals,
            filters_applied,
            lexicon,
            audit,
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = BiasTableHeader {
            kind: "header".into(),
            max_finite_abs_bs: self.max_finite_abs_bs,
            filters_applied: self.filters_applied.clone(),
            totals: self.totals,
            lexicon: self.lexicon.clone(),
        };
        let io = |e| Error::io("<bias table>", e);
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w).map_err(io)?;
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
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

    pub fn write_audit<W: Write>(&self, mut w: W) -> Result<()> {
        for d in &self.audit {
            serde_json::to_writer(&mut w, d)?;
            writeln!(w).map_err(|e| Error::io("<audit>", e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut header: Option<BiasTableHeader> = None;
        let mut entries = Vec::new();
        for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |e: serde_json::Error| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            };
            if header.is_none() {
                header = Some(serde_json::from_str(&line).map_err(parse_err)?);
            } else {
                entries.push(serde_json::from_str::<BiasEntry>(&line).map_err(parse_err)?);
            }
        }
        let header = header.ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "missing header".into(),
        })?;
        let table = BiasTable::from_parts(
            entries,
            header.totals,
            header.filters_applied,
            header.lexicon,
            Vec::new(),
        );
        if table.max_finite_abs_bs != header.max_finite_abs_bs {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: "header max_finite_abs_bs disagrees with the entries".into(),
            });
        }
        Ok(table)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BiasTableHeader {
    kind: String,
    max_finite_abs_bs: Option<f64>,
    filters_applied: FiltersApplied,
    totals: GroupCounts,
    #[serde(default)]
    lexicon: Option<LexiconFingerprint>,
}

/// Drops intrinsic classes, rare classes and finite classes whose
/// `|bs| < min_abs_bs`; infinite classes are never dropped for low bias.
pub fn apply_filters(
    raw: &[BiasEntry],
    totals: GroupCounts,
    filter: &FilterConfig,
    lexicon: Option<LexiconFingerprint>,
) -> BiasTable {
    let mut kept = Vec::new();
    let mut audit = Vec::with_capacity(raw.len());
    let (mut n_int, mut n_freq, mut n_bias) = (0, 0, 0);
    for e in raw {
        let threshold = filter.threshold_for(e.content_count);
        let outcome = if let Some(lemma) = filter.intrinsic_hit(&e.key) {
            n_int += 1;
            FilterOutcome::Intrinsic {
                lemma: lemma.to_string(),
            }
        } else if e.combined_freq() < threshold {
            n_freq += 1;
            FilterOutcome::LowFrequency {
                freq: e.combined_freq(),
                threshold,
            }
        } else if e.bs.is_finite() && e.bs.abs() < filter.min_abs_bs {
            n_bias += 1;
            FilterOutcome::LowBias { bs: e.bs }
        } else {
            kept.push(e.clone());
            FilterOutcome::Kept
        };
        audit.push(FilterDecision {
            key: e.key.clone(),
            outcome,
        });
    }
    if kept.is_empty() {
        log::warn!("no equivalence class survived filtering");
    }
    let applied = FiltersApplied {
        min_freq_by_content_count: filter.min_freq_by_content_count.clone(),
        min_abs_bs: filter.min_abs_bs,
        intrinsic_list_id: filter.intrinsic_list_id.clone(),
        intrinsic_lemmas: filter.intrinsic_lemmas.len(),
        classes_in: raw.len(),
        dropped_intrinsic: n_int,
        dropped_low_frequency: n_freq,
        dropped_low_bias: n_bias,
        kept: kept.len(),
    };
    BiasTable::from_parts(kept, totals, applied, lexicon, audit)
}

/// Result of a permutation calibration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Population standard deviation of the pooled finite BiasScores.
    pub std_dev: f64,
    pub partitions: usize,
    pub seed: u64,
    pub surviving_classes: usize,
    /// Every finite BiasScore observed, partition by partition.
    pub pooled: Vec<f64>,
}

/// Shuffles document labels `n_partitions` times (group sizes preserved),
/// rescoring the classes that pass the intrinsic and frequency filters, and
/// returns the spread of the pooled finite BiasScores. `filter.min_abs_bs`
/// is ignored.
pub fn calibrate_threshold(
    docs: &[AnalyzedDocument],
    limits: NGramLimits,
    n_partitions: usize,
    seed: u64,
    filter: &FilterConfig,
) -> Result<Calibration> {
    if docs.len() < 2 {
        return Err(Error::Statistic("calibration needs at least two documents".into()));
    }
    if n_partitions < 2 {
        return Err(Error::Statistic("calibration needs at least two partitions".into()));
    }

    // Combined frequencies are label-invariant, so the classes passing the
    // intrinsic and frequency filters are fixed up front.
    let per_doc: Vec<(u64, HashMap<ClassKey, u64>)> = docs
        .par_iter()
        .map(|d| (d.content_token_count(), document_class_counts(d, limits)))
        .collect();
    let mut combined: BTreeMap<&ClassKey, u64> = BTreeMap::new();
    for (_, counts) in &per_doc {
        for (k, f) in counts {
            *combined.entry(k).or_insert(0) += f;
        }
    }
    let survivors: Vec<&ClassKey> = combined
        .into_iter()
        .filter(|(k, f)| filter.passes_label_free(k, *f))
        .map(|(k, _)| k)
        .collect();
    if survivors.is_empty() {
        return Err(Error::NothingSurvives);
    }
    let class_index: HashMap<&ClassKey, usize> = survivors.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let doc_counts: Vec<(u64, Vec<(usize, u64)>)> = per_doc
        .iter()
        .map(|(tokens, counts)| {
            let mut v: Vec<(usize, u64)> = counts
                .iter()
                .filter_map(|(k, f)| class_index.get(k).map(|&i| (i, *f)))
                .collect();
            v.sort_unstable();
            (*tokens, v)
        })
        .collect();

    let mut labels: Vec<Group> = docs.iter().map(|d| d.group).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shuffles: Vec<Vec<Group>> = (0..n_partitions)
        .map(|_| {
            labels.shuffle(&mut rng);
            labels.clone()
        })
        .collect();

    let per_partition: Vec<Vec<f64>> = shuffles
        .par_iter()
        .map(|labels| {
            let mut totals = GroupCounts::default();
            let mut freq = vec![GroupCounts::default(); survivors.len()];
            for ((tokens, counts), &g) in doc_counts.iter().zip(labels) {
                totals.add(g, *tokens);
                for &(i, f) in counts {
                    freq[i].add(g, f);
                }
            }
            freq.iter()
                .filter_map(|c| bias_score(c.interest, c.control, totals.interest, totals.control).ok())
                .filter(|bs| bs.is_finite())
                .collect()
        })
        .collect();
    let pooled: Vec<f64> = per_partition.into_iter().flatten().collect();
    if pooled.is_empty() {
        return Err(Error::NothingSurvives);
    }
    Ok(Calibration {
        std_dev: population_std(&pooled),
        partitions: n_partitions,
        seed,
        surviving_classes: survivors.len(),
        pooled,
    })
}

fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Scores and filters a corpus in one call.
pub fn analyze_corpus(
    docs: &[AnalyzedDocument],
    limits: NGramLimits,
    filter: &FilterConfig,
    lexicon: Option<LexiconFingerprint>,
) -> Result<(ClassTable, BiasTable)> {
    let classes = ClassTable::from_corpus(docs, limits)?;
    let raw = score_classes(&classes)?;
    let table = apply_filters(&raw, classes.totals(), filter, lexicon);
    Ok((classes, table))
}
