//! Lemma-multiset equivalence classes and their per-group frequencies.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::textnorm::{for_each_span, AnalyzedDocument, NGramLimits, NGramOccurrence, Sentence};
use crate::{Error, Group, GroupCounts, Result};

/// Sorted multiset of content lemmas. Word order and stopwords do not
/// participate, repeated lemmas do.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassKey(Vec<String>);

impl ClassKey {
    pub fn new<I, S>(lemmas: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v: Vec<String> = lemmas.into_iter().map(Into::into).collect();
        v.sort();
        ClassKey(v)
    }

    pub fn lemmas(&self) -> &[String] {
        &self.0
    }

    pub fn content_count(&self) -> usize {
        self.0.len()
    }

    pub fn contains(&self, lemma: &str) -> bool {
        self.0.iter().any(|l| l == lemma)
    }
}

impl fmt::Display for ClassKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.0.join(", "))
    }
}

pub fn class_key(occ: &NGramOccurrence) -> ClassKey {
    ClassKey::new(occ.content_lemmas.iter().cloned())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceClass {
    pub key: ClassKey,
    pub content_count: usize,
    /// Distinct lowercased surface n-grams.
    pub members: BTreeSet<String>,
    pub freq: GroupCounts,
}

/// All classes of a corpus plus the per-group content-token totals used as
/// the normalizer for every n-gram order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTable {
    classes: BTreeMap<ClassKey, EquivalenceClass>,
    totals: GroupCounts,
}

impl ClassTable {
    pub fn get(&self, key: &ClassKey) -> Option<&EquivalenceClass> {
        self.classes.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = &EquivalenceClass> {
        self.classes.values()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// `M_{·G}`: content tokens per group.
    pub fn totals(&self) -> GroupCounts {
        self.totals
    }

    pub fn from_corpus(docs: &[AnalyzedDocument], limits: NGramLimits) -> Result<Self> {
        docs.par_iter()
            .fold(ClassTableBuilder::default, |mut b, d| {
                b.add_document(d, limits);
                b
            })
            .reduce(ClassTableBuilder::default, |mut a, b| {
                a.merge(b);
                a
            })
            .finish()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = ClassTableHeader {
            kind: "header".into(),
            totals: self.totals,
            classes: self.classes.len(),
        };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w).map_err(|e| Error::io("<class table>", e))?;
        for class in self.classes.values() {
            serde_json::to_writer(&mut w, class)?;
            writeln!(w).map_err(|e| Error::io("<class table>", e))?;
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
        let mut totals = None;
        let mut classes = BTreeMap::new();
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
            if totals.is_none() {
                let h: ClassTableHeader = serde_json::from_str(&line).map_err(parse_err)?;
                totals = Some(h.totals);
                continue;
            }
            let c: EquivalenceClass = serde_json::from_str(&line).map_err(parse_err)?;
            classes.insert(c.key.clone(), c);
        }
        let totals = totals.ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "missing header".into(),
        })?;
        Ok(ClassTable { classes, totals })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassTableHeader {
    kind: String,
    totals: GroupCounts,
    classes: usize,
}

/// Accumulates class frequencies. Builders merge associatively, so documents
/// can be counted in any order or in parallel.
#[derive(Debug, Default, Clone)]
pub struct ClassTableBuilder {
    classes: HashMap<ClassKey, EquivalenceClass>,
    totals: GroupCounts,
}

impl ClassTableBuilder {
    pub fn add_occurrence(&mut self, occ: &NGramOccurrence, group: Group) {
        self.add(class_key(occ), occ.surface.to_lowercase(), group);
    }

    fn add(&mut self, key: ClassKey, member: String, group: Group) {
        if key.content_count() == 1 {
            self.totals.add(group, 1);
        }
        let entry = self.classes.entry(key).or_insert_with_key(|k| EquivalenceClass {
            key: k.clone(),
            content_count: k.content_count(),
            members: BTreeSet::new(),
            freq: GroupCounts::default(),
        });
        entry.freq.add(group, 1);
        entry.members.insert(member);
    }

    pub fn add_sentence(&mut self, sentence: &Sentence, group: Group, limits: NGramLimits) {
        let tokens = &sentence.tokens;
        for_each_span(tokens, limits, |i, j| {
            let span = &tokens[i..j];
            let key = ClassKey::new(span.iter().filter(|t| !t.is_stopword).map(|t| t.lemma.as_str()));
            let member = span.iter().map(|t| t.lower.as_str()).collect::<Vec<_>>().join(" ");
            self.add(key, member, group);
        });
    }

    pub fn add_document(&mut self, doc: &AnalyzedDocument, limits: NGramLimits) {
        for s in &doc.sentences {
            self.add_sentence(s, doc.group, limits);
        }
    }

    pub fn merge(&mut self, other: ClassTableBuilder) {
        self.totals.merge(&other.totals);
        for (key, class) in other.classes {
            match self.classes.entry(key) {
                std::collections::hash_map::Entry::Occupied(mut e) => {
                    let c = e.get_mut();
                    c.freq.merge(&class.freq);
                    c.members.extend(class.members);
                }
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(class);
                }
            }
        }
    }

    /// Fails when either group has no content tokens.
    pub fn finish(self) -> Result<ClassTable> {
        for g in Group::ALL {
            if self.totals.get(g) == 0 {
                return Err(Error::EmptyGroup(g));
            }
        }
        Ok(ClassTable {
            classes: self.classes.into_iter().collect(),
            totals: self.totals,
        })
    }
}

/// Occurrence count per class for one document, without member surfaces.
pub fn document_class_counts(doc: &AnalyzedDocument, limits: NGramLimits) -> HashMap<ClassKey, u64> {
    let mut counts = HashMap::new();
    for s in &doc.sentences {
        let tokens = &s.tokens;
        for_each_span(tokens, limits, |i, j| {
            let key = ClassKey::new(tokens[i..j].iter().filter(|t| !t.is_stopword).map(|t| t.lemma.as_str()));
            *counts.entry(key).or_insert(0) += 1;
        });
    }
    counts
}

/// Builds the table from a stream of labelled occurrences. Every content
/// token is itself a one-lemma occurrence, so `M_{·G}` is the number of
/// single-content occurrences seen for `G`.
pub fn build_class_table<I>(occurrences: I) -> Result<ClassTable>
where
    I: IntoIterator<Item = (NGramOccurrence, Group)>,
{
    let mut b = ClassTableBuilder::default();
    for (occ, g) in occurrences {
        b.add_occurrence(&occ, g);
    }
    b.finish()
}
