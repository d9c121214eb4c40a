//! Acceptance checks. Each check prints one PASS or FAIL line; the process
//! exits non-zero when any check fails.
//!
//! Reference values come from small brute-force implementations written
//! here against the definitions, not from the library.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use biasloupe::classes::{ClassKey, ClassTable};
use biasloupe::config::{parse_config, validate_config, RunConfig};
use biasloupe::fragments::{score_fragment, Fragment, MatchSpan};
use biasloupe::pipeline::{run_all, ProviderChoice, RunOptions};
use biasloupe::stats::{apply_filters, calibrate_threshold, score_classes, BiasEntry, BiasTable, FilterConfig};
use biasloupe::textnorm::{extract_ngrams, AnalyzedDocument, LemmaDictionary, NGramLimits, Normalizer, WordList};
use biasloupe::{Group, GroupCounts};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);
/// Kept spans as `(sentence, token span)` with their contributions.
type Scored = (Vec<(usize, (usize, usize))>, Vec<f64>);

fn main() {
    let checks: [Check; 7] = [
        ("oracle equivalence (counts/BS)", oracle_equivalence),
        ("equivalence class grouping", class_grouping),
        ("planted-bias recovery", planted_bias_recovery),
        ("calibration sanity", calibration_sanity),
        ("fragment scoring oracle", fragment_scoring_oracle),
        ("property suite", property_suite),
        ("end-to-end mock run", end_to_end_mock_run),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/disability_es")
}

// ---------------------------------------------------------------------------
// Micro-corpora built from a closed vocabulary, so the reference code knows
// every token without running the tokenizer.

const CONTENT: &[(&str, &str)] = &[
    ("gato", "gato"),
    ("gatos", "gato"),
    ("perro", "perro"),
    ("perros", "perro"),
    ("casa", "casa"),
    ("casas", "casa"),
    ("corre", "correr"),
    ("corría", "correr"),
    ("azul", "azul"),
    ("árbol", "árbol"),
    ("árboles", "árbol"),
    ("niño", "niño"),
    ("niña", "niño"),
    ("come", "comer"),
    ("sol", "sol"),
];
const STOP: &[&str] = &["el", "la", "los", "de", "y", "que", "en"];

#[derive(Debug, Clone)]
struct Word {
    form: &'static str,
    lemma: Option<&'static str>,
    comma_before: bool,
}

#[derive(Debug, Clone)]
struct MicroDoc {
    id: String,
    group: Group,
    sentences: Vec<Vec<Word>>,
}

impl MicroDoc {
    fn text(&self) -> String {
        let mut out = Vec::new();
        for s in &self.sentences {
            let mut line = String::new();
            for (i, w) in s.iter().enumerate() {
                if i > 0 {
                    line.push_str(if w.comma_before { ", " } else { " " });
                }
                if i == 0 {
                    let mut cs = w.form.chars();
                    let first = cs.next().unwrap();
                    line.extend(first.to_uppercase());
                    line.push_str(cs.as_str());
                } else {
                    line.push_str(w.form);
                }
            }
            line.push('.');
            out.push(line);
        }
        out.join(" ")
    }
}

fn micro_normalizer() -> Normalizer {
    Normalizer::new(
        LemmaDictionary::from_pairs(CONTENT.iter().copied()),
        WordList::parse(&STOP.join("\n")),
        WordList::parse(""),
    )
}

fn random_word(rng: &mut ChaCha8Rng, force_content: bool) -> Word {
    let comma_before = rng.random_bool(0.1);
    if force_content || rng.random_bool(0.65) {
        let (form, lemma) = *CONTENT.choose(rng).unwrap();
        Word {
            form,
            lemma: Some(lemma),
            comma_before,
        }
    } else {
        Word {
            form: STOP.choose(rng).unwrap(),
            lemma: None,
            comma_before,
        }
    }
}

fn random_sentence(rng: &mut ChaCha8Rng, len: usize) -> Vec<Word> {
    (0..len).map(|i| random_word(rng, i == 0)).collect()
}

/// 2 to 6 documents over both groups, at most `max_tokens` tokens in all.
fn micro_corpus(seed: u64, max_tokens: usize) -> Vec<MicroDoc> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_docs = rng.random_range(2..=6);
    let mut budget = max_tokens;
    let mut docs = Vec::new();
    for d in 0..n_docs {
        let group = if d % 2 == 0 { Group::Interest } else { Group::Control };
        let share = budget / (n_docs - d);
        let mut sentences = Vec::new();
        let mut used = 0;
        let n_sent = rng.random_range(1..=3);
        for _ in 0..n_sent {
            let room = share.saturating_sub(used);
            if room == 0 {
                break;
            }
            let len = rng.random_range(1..=room.min(12));
            used += len;
            sentences.push(random_sentence(&mut rng, len));
        }
        budget -= used;
        docs.push(MicroDoc {
            id: format!("d{d}"),
            group,
            sentences,
        });
    }
    docs
}

fn analyze_micro(norm: &Normalizer, docs: &[MicroDoc]) -> Vec<AnalyzedDocument> {
    docs.iter().map(|d| norm.analyze(&d.id, d.group, &d.text())).collect()
}

/// Every valid n-gram `[i, j)` of a sentence, by direct enumeration.
fn brute_spans(words: &[Word], limits: NGramLimits) -> Vec<(usize, usize, Vec<String>)> {
    let mut out = Vec::new();
    for i in 0..words.len() {
        for j in i + 1..=words.len() {
            if j - i > limits.max_surface_len {
                continue;
            }
            if words[i].lemma.is_none() || words[j - 1].lemma.is_none() {
                continue;
            }
            if words[i + 1..j].iter().any(|w| w.comma_before) {
                continue;
            }
            let mut key: Vec<String> = words[i..j].iter().filter_map(|w| w.lemma.map(String::from)).collect();
            if key.is_empty() || key.len() > limits.max_content {
                continue;
            }
            key.sort();
            out.push((i, j, key));
        }
    }
    out
}

struct BruteTable {
    freq: BTreeMap<Vec<String>, (u64, u64)>,
    m_gi: u64,
    m_gc: u64,
}

fn brute_table(docs: &[MicroDoc], limits: NGramLimits) -> BruteTable {
    let mut freq: BTreeMap<Vec<String>, (u64, u64)> = BTreeMap::new();
    let (mut m_gi, mut m_gc) = (0, 0);
    for d in docs {
        for s in &d.sentences {
            let content = s.iter().filter(|w| w.lemma.is_some()).count() as u64;
            match d.group {
                Group::Interest => m_gi += content,
                Group::Control => m_gc += content,
            }
            for (_, _, key) in brute_spans(s, limits) {
                let e = freq.entry(key).or_default();
                match d.group {
                    Group::Interest => e.0 += 1,
                    Group::Control => e.1 += 1,
                }
            }
        }
    }
    BruteTable { freq, m_gi, m_gc }
}

fn brute_bs(a: u64, b: u64, m_gi: u64, m_gc: u64) -> f64 {
    if b == 0 {
        f64::INFINITY
    } else if a == 0 {
        f64::NEG_INFINITY
    } else {
        (a as f64 / m_gi as f64).ln() - (b as f64 / m_gc as f64).ln()
    }
}

fn brute_pmi(f_g: u64, m_g: u64, f_all: u64, m_all: u64) -> f64 {
    if f_g == 0 {
        f64::NEG_INFINITY
    } else {
        ((f_g as f64 / m_g as f64) / (f_all as f64 / m_all as f64)).ln()
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    if a.is_infinite() || b.is_infinite() {
        a == b
    } else {
        (a - b).abs() <= tol
    }
}

fn has_both_groups(docs: &[MicroDoc]) -> bool {
    let content = |g: Group| {
        docs.iter()
            .filter(|d| d.group == g)
            .flat_map(|d| d.sentences.iter().flatten())
            .any(|w| w.lemma.is_some())
    };
    content(Group::Interest) && content(Group::Control)
}

fn compare_with_brute(norm: &Normalizer, docs: &[MicroDoc]) -> Result<usize, String> {
    let limits = NGramLimits::default();
    let analyzed = analyze_micro(norm, docs);
    let table = ClassTable::from_corpus(&analyzed, limits).map_err(|e| e.to_string())?;
    let scored = score_classes(&table).map_err(|e| e.to_string())?;
    let brute = brute_table(docs, limits);
    let totals = table.totals();
    ensure!(
        (totals.interest, totals.control) == (brute.m_gi, brute.m_gc),
        "totals {:?} vs brute ({}, {})",
        totals,
        brute.m_gi,
        brute.m_gc
    );
    let got: BTreeSet<Vec<String>> = scored.iter().map(|e| e.key.lemmas().to_vec()).collect();
    let want: BTreeSet<Vec<String>> = brute.freq.keys().cloned().collect();
    ensure!(
        got == want,
        "class keys differ: {:?}",
        got.symmetric_difference(&want).collect::<Vec<_>>()
    );
    let m_all = brute.m_gi + brute.m_gc;
    for e in &scored {
        let (a, b) = brute.freq[e.key.lemmas()];
        ensure!(
            (e.freq_gi, e.freq_gc) == (a, b),
            "{:?}: freq ({}, {}) vs ({a}, {b})",
            e.key,
            e.freq_gi,
            e.freq_gc
        );
        let bs = brute_bs(a, b, brute.m_gi, brute.m_gc);
        ensure!(close(e.bs, bs, 1e-12), "{:?}: bs {} vs {bs}", e.key, e.bs);
        let pmi_gi = brute_pmi(a, brute.m_gi, a + b, m_all);
        let pmi_gc = brute_pmi(b, brute.m_gc, a + b, m_all);
        ensure!(
            close(e.pmi_gi, pmi_gi, 1e-12),
            "{:?}: pmi_gi {} vs {pmi_gi}",
            e.key,
            e.pmi_gi
        );
        ensure!(
            close(e.pmi_gc, pmi_gc, 1e-12),
            "{:?}: pmi_gc {} vs {pmi_gc}",
            e.key,
            e.pmi_gc
        );
    }
    Ok(scored.len())
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let norm = micro_normalizer();
    let mut corpora = 0;
    let mut classes = 0;
    let mut seed = 0u64;
    while corpora < 20 {
        seed += 1;
        let docs = micro_corpus(seed, 60);
        if !has_both_groups(&docs) {
            continue;
        }
        let tokens: usize = docs.iter().flat_map(|d| &d.sentences).map(Vec::len).sum();
        ensure!(tokens <= 60, "generator produced {tokens} tokens");
        classes += compare_with_brute(&norm, &docs).map_err(|e| format!("corpus seed {seed}: {e}"))?;
        corpora += 1;
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("{corpora} corpora, {classes} classes matched, {elapsed:.2?}"))
}

// ---------------------------------------------------------------------------

fn fixture_normalizer() -> Normalizer {
    let dir = fixture_dir();
    Normalizer::new(
        LemmaDictionary::load(&dir.join("lemmas.tsv")).expect("fixture lemmas"),
        WordList::spanish_stopwords(),
        WordList::spanish_abbreviations(),
    )
}

fn class_grouping() -> Outcome {
    let norm = fixture_normalizer();
    let limits = NGramLimits::default();
    let phrases = [
        "enfrentado todos los obstáculos",
        "obstáculos que había enfrentado",
        "enfrentado varios obstáculos",
        "enfrentó varios obstáculos",
        "enfrentas obstáculos",
        "enfrentado obstáculos",
    ];
    let target = ClassKey::new(["enfrentar", "obstáculo"]);
    let mut docs = Vec::new();
    for (i, p) in phrases.iter().enumerate() {
        let doc = norm.analyze(&format!("f{i}"), Group::Interest, &format!("{p}."));
        let occs = extract_ngrams(&doc.doc_id, &doc.sentences[0], limits);
        let whole = occs
            .iter()
            .find(|o| o.surface == *p)
            .ok_or_else(|| format!("{p:?} not emitted as one n-gram"))?;
        let key = ClassKey::new(whole.content_lemmas.iter().cloned());
        ensure!(key == target, "{p:?} maps to {key:?}");
        docs.push(doc);
    }
    docs.push(norm.analyze("c", Group::Control, "Llegaron temprano."));
    let table = ClassTable::from_corpus(&docs, limits).map_err(|e| e.to_string())?;
    let class = table.get(&target).ok_or("class {enfrentar, obstáculo} missing")?;
    let members: BTreeSet<String> = phrases.iter().map(|p| p.to_string()).collect();
    ensure!(
        members.is_subset(&class.members),
        "members {:?} lack some of {:?}",
        class.members,
        members
    );

    let doc = norm.analyze("a", Group::Interest, "Los amigos y familia llegaron.");
    let surfaces: Vec<String> = extract_ngrams("a", &doc.sentences[0], limits)
        .into_iter()
        .map(|o| o.surface.to_lowercase())
        .collect();
    ensure!(
        !surfaces.iter().any(|s| s == "los amigos y"),
        "\"los amigos y\" emitted: {surfaces:?}"
    );
    let afy = extract_ngrams("a", &doc.sentences[0], limits)
        .into_iter()
        .find(|o| o.surface == "amigos y familia")
        .ok_or_else(|| format!("\"amigos y familia\" missing: {surfaces:?}"))?;
    ensure!(
        afy.content_lemmas == ["amigo", "familia"] && afy.surface_len() == 3,
        "amigos y familia -> {:?}",
        afy.content_lemmas
    );
    Ok(format!(
        "6 surfaces in one class, {} n-grams checked for the stopword-edge rule",
        surfaces.len()
    ))
}

// ---------------------------------------------------------------------------
// Template corpus with a planted expression.

const PLANTED: &str = "superar los obstáculos";
const P_GI: f64 = 0.02;
const Q_GC: f64 = 0.005;

fn filler_vocabulary(norm: &Normalizer, n: usize) -> Vec<String> {
    let consonants = ["b", "c", "d", "f", "g", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
    let vowels = ["a", "e", "i", "o", "u"];
    let syllables: Vec<String> = consonants
        .iter()
        .flat_map(|c| vowels.iter().map(move |v| format!("{c}{v}")))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut words = BTreeSet::new();
    while words.len() < n {
        let w: String = (0..3).map(|_| syllables.choose(&mut rng).unwrap().as_str()).collect();
        if !norm.is_stopword(&w) && w != "superar" {
            words.insert(w);
        }
    }
    words.into_iter().collect()
}

/// `per_group` documents per group. Each document holds `units` content
/// units; a unit is the planted expression with probability `r/(1+r)` chosen
/// so that planted occurrences per content token equal the target rate.
fn template_corpus(
    norm: &Normalizer,
    vocab: &[String],
    seed: u64,
    per_group: usize,
    units: usize,
    rate_gi: f64,
    rate_gc: f64,
) -> Vec<AnalyzedDocument> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stop = ["el", "la", "de", "y"];
    let mut docs = Vec::new();
    for (group, rate) in [(Group::Interest, rate_gi), (Group::Control, rate_gc)] {
        let unit_p = rate / (1.0 - rate);
        for d in 0..per_group {
            let mut text = String::new();
            let mut in_sentence = 0;
            for _ in 0..units {
                if in_sentence > 0 {
                    text.push(' ');
                    if rng.random_bool(0.3) {
                        text.push_str(stop.choose(&mut rng).unwrap());
                        text.push(' ');
                    }
                }
                if rng.random_bool(unit_p) {
                    text.push_str(PLANTED);
                } else {
                    text.push_str(vocab.choose(&mut rng).unwrap());
                }
                in_sentence += 1;
                if in_sentence >= 12 {
                    text.push_str(". ");
                    in_sentence = 0;
                }
            }
            text.push('.');
            docs.push(norm.analyze(&format!("{}{d:03}", group.as_str()), group, &text));
        }
    }
    docs
}

fn planted_norm() -> Normalizer {
    Normalizer::new(
        LemmaDictionary::from_pairs([("obstáculos", "obstáculo")]),
        WordList::spanish_stopwords(),
        WordList::spanish_abbreviations(),
    )
}

fn planted_key() -> ClassKey {
    ClassKey::new(["obstáculo", "superar"])
}

fn no_bias_filter() -> FilterConfig {
    FilterConfig {
        min_abs_bs: 0.0,
        ..FilterConfig::default()
    }
}

struct Planted {
    docs: Vec<AnalyzedDocument>,
    raw: Vec<BiasEntry>,
    totals: GroupCounts,
}

fn planted_corpus(norm: &Normalizer, vocab: &[String], seed: u64, gi: f64, gc: f64) -> Planted {
    let docs = template_corpus(norm, vocab, seed, 200, 300, gi, gc);
    let classes = ClassTable::from_corpus(&docs, NGramLimits::default()).expect("class table");
    let raw = score_classes(&classes).expect("scores");
    Planted {
        totals: classes.totals(),
        docs,
        raw,
    }
}

/// 1 + number of classes with a strictly larger BiasScore.
fn rank_of(table: &BiasTable, key: &ClassKey) -> Option<usize> {
    let bs = table.get(key)?.bs;
    Some(1 + table.entries().iter().filter(|e| e.bs > bs).count())
}

fn planted_bias_recovery() -> Outcome {
    let start = Instant::now();
    let norm = planted_norm();
    let vocab = filler_vocabulary(&norm, 500);
    let planted = planted_corpus(&norm, &vocab, 42, P_GI, Q_GC);
    let table = apply_filters(&planted.raw, planted.totals, &no_bias_filter(), None);
    let elapsed = start.elapsed();
    let key = planted_key();
    let entry = table
        .get(&key)
        .ok_or("planted class did not pass the frequency filter")?;
    let expected = (P_GI / Q_GC).ln();
    ensure!(
        (entry.bs - expected).abs() <= 0.25,
        "BS {:.4} vs ln(p/q) {expected:.4} (freq {}/{})",
        entry.bs,
        entry.freq_gi,
        entry.freq_gc
    );
    let rank = rank_of(&table, &key).unwrap();
    ensure!(rank <= 5, "planted class ranks {rank}");
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!(
        "BS {:.4} (target {expected:.4}, freq {}/{}), rank {rank} of {}, {elapsed:.2?}",
        entry.bs,
        entry.freq_gi,
        entry.freq_gc,
        table.len()
    ))
}

// ---------------------------------------------------------------------------

fn percentile(sorted: &[f64], q: f64) -> f64 {
    sorted[((sorted.len() - 1) as f64 * q).round() as usize]
}

fn calibration_sanity() -> Outcome {
    let norm = planted_norm();
    let vocab = filler_vocabulary(&norm, 500);
    let limits = NGramLimits::default();
    let null = planted_corpus(&norm, &vocab, 7, Q_GC, Q_GC);
    let cal = calibrate_threshold(&null.docs, limits, 50, 2024, &FilterConfig::default()).map_err(|e| e.to_string())?;
    let again =
        calibrate_threshold(&null.docs, limits, 50, 2024, &FilterConfig::default()).map_err(|e| e.to_string())?;
    ensure!(cal == again, "calibration is not deterministic for a fixed seed");
    let std = cal.std_dev;

    let mut mags: Vec<f64> = cal.pooled.iter().map(|b| b.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let (p5, p95) = (percentile(&mags, 0.05), percentile(&mags, 0.95));
    ensure!(std > p5 && std < p95, "std {std:.4} outside ({p5:.4}, {p95:.4})");

    let filter = FilterConfig {
        min_abs_bs: std,
        ..FilterConfig::default()
    };
    let planted = planted_corpus(&norm, &vocab, 42, P_GI, Q_GC);
    let kept = apply_filters(&planted.raw, planted.totals, &filter, None);
    ensure!(
        kept.get(&planted_key()).is_some(),
        "planted class removed at min_abs_bs={std:.4}"
    );

    let null_kept = apply_filters(&null.raw, null.totals, &filter, None);
    let dropped = 1.0 - null_kept.len() as f64 / null.raw.len() as f64;
    ensure!(dropped >= 0.9, "only {:.1}% of null classes dropped", dropped * 100.0);

    // Among null classes frequent enough to be reported, the share removed
    // by the BiasScore threshold alone.
    let frequent = apply_filters(&null.raw, null.totals, &no_bias_filter(), None);
    let bias_dropped = 1.0 - null_kept.len() as f64 / frequent.len().max(1) as f64;
    Ok(format!(
        "std {std:.4} in ({p5:.4}, {p95:.4}); planted class kept; {:.1}% of {} null classes dropped ({:.1}% of the {} frequent ones by |BS| alone)",
        dropped * 100.0,
        null.raw.len(),
        bias_dropped * 100.0,
        frequent.len()
    ))
}

// ---------------------------------------------------------------------------
// Fragment scoring against a reference scorer.

fn table_from(entries: &[(ClassKey, f64)]) -> BiasTable {
    let raw: Vec<BiasEntry> = entries
        .iter()
        .map(|(key, bs)| BiasEntry {
            key: key.clone(),
            content_count: key.content_count(),
            members: BTreeSet::new(),
            freq_gi: 1,
            freq_gc: 1,
            pmi_gi: 0.0,
            pmi_gc: 0.0,
            bs: *bs,
        })
        .collect();
    apply_filters(
        &raw,
        GroupCounts {
            interest: 1,
            control: 1,
        },
        &FilterConfig::pass_through(),
        None,
    )
}

struct FragmentCase {
    doc: AnalyzedDocument,
    words: Vec<Vec<Word>>,
    fragment: Fragment,
    table: Vec<(ClassKey, f64)>,
}

fn fragment_case(norm: &Normalizer, seed: u64, all_infinite: bool) -> FragmentCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let limits = NGramLimits::default();
    let total = rng.random_range(3..=30);
    let n_sent = rng.random_range(1..=3.min(total));
    let mut words = Vec::new();
    let mut left = total;
    for s in 0..n_sent {
        let len = if s + 1 == n_sent {
            left
        } else {
            rng.random_range(1..=left - (n_sent - s - 1))
        };
        left -= len;
        words.push(random_sentence(&mut rng, len));
    }
    let md = MicroDoc {
        id: format!("frag{seed}"),
        group: Group::Interest,
        sentences: words.clone(),
    };
    let text = md.text();
    let doc = norm.analyze(&md.id, Group::Interest, &text);

    let present: Vec<ClassKey> = words
        .iter()
        .flat_map(|s| brute_spans(s, limits))
        .map(|(_, _, k)| ClassKey::new(k))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut keys: BTreeSet<ClassKey> = present.choose_multiple(&mut rng, 7).cloned().collect();
    while keys.len() < 10 {
        let n = rng.random_range(1..=3);
        keys.insert(ClassKey::new((0..n).map(|_| CONTENT.choose(&mut rng).unwrap().1)));
    }
    let mut table: Vec<(ClassKey, f64)> = keys
        .into_iter()
        .map(|k| {
            let r: f64 = rng.random();
            let bs = if all_infinite || r < 0.15 {
                if rng.random_bool(0.5) {
                    f64::INFINITY
                } else {
                    f64::NEG_INFINITY
                }
            } else if r < 0.3 {
                f64::NEG_INFINITY
            } else {
                rng.random_range(-3.0..3.0)
            };
            (k, bs)
        })
        .collect();
    if !all_infinite && table.iter().all(|(_, b)| b.is_infinite()) {
        table[0].1 = 1.25;
    }
    let fragment = Fragment {
        fragment_id: format!("{}:0-{}", md.id, n_sent - 1),
        doc_id: md.id.clone(),
        sentence_range: (0, n_sent),
        char_span: (0, text.len()),
        text,
        center_marker: String::new(),
    };
    FragmentCase {
        doc,
        words,
        fragment,
        table,
    }
}

/// Matches kept by the reference scorer: in-table spans not strictly inside
/// another in-table span of the same sentence, in text order, with their
/// contributions.
fn brute_score(case: &FragmentCase) -> Option<Scored> {
    let limits = NGramLimits::default();
    let lookup: BTreeMap<&ClassKey, f64> = case.table.iter().map(|(k, b)| (k, *b)).collect();
    let max_finite = case
        .table
        .iter()
        .filter(|(_, b)| b.is_finite())
        .map(|(_, b)| b.abs())
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
    let mut spans = Vec::new();
    let mut contributions = Vec::new();
    for (si, words) in case.words.iter().enumerate() {
        let matched: Vec<(usize, usize, f64)> = brute_spans(words, limits)
            .into_iter()
            .filter_map(|(i, j, k)| lookup.get(&ClassKey::new(k)).map(|b| (i, j, *b)))
            .collect();
        for &(i, j, bs) in &matched {
            let inside = matched.iter().any(|&(a, b, _)| (a, b) != (i, j) && a <= i && j <= b);
            if inside {
                continue;
            }
            let c = if bs.is_finite() { bs } else { max_finite?.copysign(bs) };
            spans.push((si, (i, j)));
            contributions.push(c);
        }
    }
    Some((spans, contributions))
}

fn fragment_scoring_oracle() -> Outcome {
    let norm = micro_normalizer();
    let limits = NGramLimits::default();
    let mut matched = 0;
    let mut replaced = 0;
    for seed in 0..50u64 {
        let case = fragment_case(&norm, 1000 + seed, false);
        let tokens: usize = case.words.iter().map(Vec::len).sum();
        ensure!(tokens <= 30, "fragment with {tokens} tokens");
        ensure!(case.table.len() == 10, "table with {} classes", case.table.len());
        let table = table_from(&case.table);
        let got = score_fragment(&case.fragment, &case.doc, &table, limits).map_err(|e| format!("seed {seed}: {e}"))?;
        let (spans, contributions) = brute_score(&case).ok_or("reference found no finite entry")?;
        let got_spans: Vec<(usize, (usize, usize))> =
            got.spans.iter().map(|m| (m.sentence_index, m.token_span)).collect();
        ensure!(got_spans == spans, "seed {seed}: spans {got_spans:?} vs {spans:?}");
        let got_c: Vec<f64> = got.spans.iter().map(|m| m.bs_contribution).collect();
        ensure!(
            got_c == contributions,
            "seed {seed}: contributions {got_c:?} vs {contributions:?}"
        );
        let want: f64 = contributions.iter().sum();
        ensure!(got.score == want, "seed {seed}: score {} vs {want}", got.score);
        matched += spans.len();
        replaced += got.spans.iter().filter(|m| m.bs.is_infinite()).count();
    }

    // A table without any finite entry cannot replace an infinite one.
    let mut errors = 0;
    for seed in 0..10u64 {
        let case = fragment_case(&norm, 5000 + seed, true);
        let table = table_from(&case.table);
        let expect_error = brute_score(&case).is_none();
        match score_fragment(&case.fragment, &case.doc, &table, limits) {
            Err(_) if expect_error => errors += 1,
            Ok(s) if !expect_error && s.spans.is_empty() => {}
            other => return Err(format!("all-infinite table, seed {seed}: {other:?}")),
        }
    }
    Ok(format!(
        "50 fragments, {matched} matched spans ({replaced} infinite replaced); {errors} all-infinite tables rejected"
    ))
}

// ---------------------------------------------------------------------------

fn run_property<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<u32, String> {
    let mut runner = TestRunner::new(PropConfig {
        cases,
        failure_persistence: None,
        ..PropConfig::default()
    });
    runner.run(&strategy, test).map_err(|e| e.to_string())?;
    Ok(cases)
}

fn scored_micro(norm: &Normalizer, docs: &[MicroDoc]) -> Vec<BiasEntry> {
    let analyzed = analyze_micro(norm, docs);
    let table = ClassTable::from_corpus(&analyzed, NGramLimits::default()).unwrap();
    score_classes(&table).unwrap()
}

fn by_key(entries: &[BiasEntry]) -> BTreeMap<ClassKey, &BiasEntry> {
    entries.iter().map(|e| (e.key.clone(), e)).collect()
}

fn kept_keys(t: &BiasTable) -> BTreeSet<ClassKey> {
    t.entries().iter().map(|e| e.key.clone()).collect()
}

fn property_suite() -> Outcome {
    let norm = micro_normalizer();
    let mut total = 0;
    let mut parts = Vec::new();

    let n = run_property(300, any::<u64>(), |seed| {
        let docs = micro_corpus(seed, 60);
        prop_assume!(has_both_groups(&docs));
        let swapped: Vec<MicroDoc> = docs
            .iter()
            .map(|d| MicroDoc {
                group: d.group.other(),
                ..d.clone()
            })
            .collect();
        let a = scored_micro(&norm, &docs);
        let b = scored_micro(&norm, &swapped);
        let b = by_key(&b);
        prop_assert_eq!(a.len(), b.len());
        for e in &a {
            let s = b[&e.key];
            prop_assert!(close(e.bs, -s.bs, 1e-12), "{:?}: {} vs {}", e.key, e.bs, s.bs);
        }
        Ok(())
    })?;
    total += n;
    parts.push(format!("antisymmetry {n}"));

    let n = run_property(250, (any::<u64>(), 2usize..=4), |(seed, copies)| {
        let docs = micro_corpus(seed, 60);
        prop_assume!(has_both_groups(&docs));
        let scaled: Vec<MicroDoc> = (0..copies)
            .flat_map(|c| {
                docs.iter().map(move |d| MicroDoc {
                    id: format!("{}-{c}", d.id),
                    ..d.clone()
                })
            })
            .collect();
        let a = scored_micro(&norm, &docs);
        let b = scored_micro(&norm, &scaled);
        let b = by_key(&b);
        prop_assert_eq!(a.len(), b.len());
        for e in &a {
            let s = b[&e.key];
            prop_assert_eq!(
                (s.freq_gi, s.freq_gc),
                (e.freq_gi * copies as u64, e.freq_gc * copies as u64)
            );
            prop_assert!(close(e.bs, s.bs, 1e-12), "{:?}: {} vs {}", e.key, e.bs, s.bs);
        }
        Ok(())
    })?;
    total += n;
    parts.push(format!("scale invariance {n}"));

    let thresholds = prop::collection::vec(0u64..6, 4);
    let n = run_property(
        300,
        (any::<u64>(), thresholds, 0.0f64..2.0, 0.0f64..1.0, 0usize..3),
        |(seed, base, min_bs, bump, intrinsic)| {
            let docs = micro_corpus(seed, 60);
            prop_assume!(has_both_groups(&docs));
            let raw = scored_micro(&norm, &docs);
            let analyzed = analyze_micro(&norm, &docs);
            let totals = ClassTable::from_corpus(&analyzed, NGramLimits::default())
                .unwrap()
                .totals();
            let loose = FilterConfig {
                intrinsic_lemmas: BTreeSet::new(),
                intrinsic_list_id: None,
                min_freq_by_content_count: (1..=4).zip(base.iter().copied()).collect(),
                min_abs_bs: min_bs,
            };
            let strict = FilterConfig {
                intrinsic_lemmas: CONTENT.iter().take(intrinsic * 3).map(|(_, l)| l.to_string()).collect(),
                intrinsic_list_id: None,
                min_freq_by_content_count: loose
                    .min_freq_by_content_count
                    .iter()
                    .map(|(k, v)| (*k, v + 1))
                    .collect(),
                min_abs_bs: min_bs + bump,
            };
            let a = kept_keys(&apply_filters(&raw, totals, &loose, None));
            let b = kept_keys(&apply_filters(&raw, totals, &strict, None));
            prop_assert!(
                b.is_subset(&a),
                "stricter filter kept {:?}",
                b.difference(&a).collect::<Vec<_>>()
            );
            Ok(())
        },
    )?;
    total += n;
    parts.push(format!("filter monotonicity {n}"));

    let n = run_property(200, any::<u64>(), |seed| {
        let case = fragment_case(&norm, seed, false);
        let table = table_from(&case.table);
        let limits = NGramLimits::default();
        let got = score_fragment(&case.fragment, &case.doc, &table, limits).unwrap();
        let kept: &[MatchSpan] = &got.spans;
        for a in kept {
            for b in kept {
                let strictly_inside = a.sentence_index == b.sentence_index
                    && a.token_span != b.token_span
                    && b.token_span.0 <= a.token_span.0
                    && a.token_span.1 <= b.token_span.1;
                prop_assert!(!strictly_inside, "{:?} kept inside {:?}", a.token_span, b.token_span);
            }
        }
        let lookup: BTreeSet<&ClassKey> = case.table.iter().map(|(k, _)| k).collect();
        for (si, words) in case.words.iter().enumerate() {
            for (i, j, key) in brute_spans(words, limits) {
                if !lookup.contains(&ClassKey::new(key)) {
                    continue;
                }
                let covered = kept
                    .iter()
                    .any(|m| m.sentence_index == si && m.token_span.0 <= i && j <= m.token_span.1);
                prop_assert!(covered, "in-table span ({}, {}) neither kept nor covered", i, j);
            }
        }
        let sum: f64 = kept.iter().map(|m| m.bs_contribution).sum();
        prop_assert_eq!(got.score, sum);
        Ok(())
    })?;
    total += n;
    parts.push(format!("containment soundness {n}"));

    let n = run_property(
        8,
        (1u32..=3, any::<u64>(), any::<bool>()),
        |(samples, cal_seed, apply)| {
            let config = fixture_variant(samples, cal_seed, apply);
            let first = tempfile::tempdir().unwrap();
            let a =
                run_all(&config, &mock_options(first.path(), None)).map_err(|e| TestCaseError::fail(e.to_string()))?;
            // Replay from what the manifest recorded.
            let replay = fixture_variant(
                a.manifest.samples_per_prompt.unwrap(),
                a.manifest.calibration.as_ref().map_or(cal_seed, |c| c.seed),
                apply,
            );
            prop_assert_eq!(&replay.source_sha256, &a.manifest.config_sha256);
            let second = tempfile::tempdir().unwrap();
            let b =
                run_all(&replay, &mock_options(second.path(), None)).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(&a.manifest, &b.manifest);
            // Re-analysing the persisted corpus reproduces every data artifact.
            // The report is left out: it names the generation manifest only when
            // the corpus was generated in the same run.
            let third = tempfile::tempdir().unwrap();
            let corpus = first.path().join(biasloupe::pipeline::CORPUS_FILE);
            let c = run_all(&config, &mock_options(third.path(), Some(corpus)))
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            for (name, hash) in c.manifest.artifacts.iter().filter(|(n, _)| n.ends_with(".jsonl")) {
                prop_assert_eq!(Some(hash), a.manifest.artifacts.get(name), "{} differs", name);
            }
            Ok(())
        },
    )?;
    total += n;
    parts.push(format!("manifest determinism {n}"));

    ensure!(total >= 1000, "only {total} cases");
    Ok(format!("{total} cases: {}", parts.join(", ")))
}

fn fixture_variant(samples: u32, calibration_seed: u64, apply: bool) -> RunConfig {
    let dir = fixture_dir();
    let text = std::fs::read_to_string(dir.join("config.json")).unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["generation"]["samples_per_prompt"] = samples.into();
    value["calibration"]["seed"] = calibration_seed.into();
    value["calibration"]["apply"] = apply.into();
    parse_config(&value.to_string(), &dir).unwrap()
}

fn mock_options(out: &Path, corpus: Option<PathBuf>) -> RunOptions {
    RunOptions {
        out_dir: out.to_path_buf(),
        corpus,
        provider: ProviderChoice::Mock,
        samples: None,
        format: None,
    }
}

// ---------------------------------------------------------------------------

fn bank_lemmas(norm: &Normalizer, bank: &serde_json::Value, field: &str, names: &[String]) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    for s in bank[field].as_array().unwrap() {
        for name in names {
            let text = s.as_str().unwrap().replace("{name}", name);
            out.push(norm.content_lemmas(&text));
        }
    }
    out
}

fn within_any(key: &ClassKey, sentences: &[Vec<String>]) -> bool {
    sentences.iter().any(|s| key.lemmas().iter().all(|l| s.contains(l)))
}

fn end_to_end_mock_run() -> Outcome {
    let config = validate_config(&fixture_dir().join("config.json")).map_err(|e| e.to_string())?;
    let out = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let run = run_all(&config, &mock_options(out.path(), None)).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");

    let norm = config.normalizer().unwrap();
    let bank: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(config.mock_bank.as_ref().unwrap()).unwrap()).unwrap();
    let uplifting = bank_lemmas(&norm, &bank, "interest", &config.names);
    let everyday = bank_lemmas(&norm, &bank, "control", &config.names);

    let top = &run.ranking.top.first().ok_or("empty top list")?.scored;
    let bottom = &run.ranking.bottom.first().ok_or("empty bottom list")?.scored;
    let top_up = top
        .spans
        .iter()
        .filter(|m| m.bs_contribution > 0.0 && within_any(&m.class_ref, &uplifting))
        .count();
    let top_daily = top.spans.iter().filter(|m| within_any(&m.class_ref, &everyday)).count();
    ensure!(
        top_up > 0 && top_daily == 0,
        "top fragment {} highlights {top_up} overcoming/inspiration and {top_daily} everyday spans",
        top.fragment.fragment_id
    );
    let bottom_daily = bottom
        .spans
        .iter()
        .filter(|m| m.bs_contribution < 0.0 && within_any(&m.class_ref, &everyday))
        .count();
    let bottom_up = bottom
        .spans
        .iter()
        .filter(|m| within_any(&m.class_ref, &uplifting))
        .count();
    ensure!(
        bottom_daily > 0 && bottom_up == 0,
        "bottom fragment {} highlights {bottom_daily} everyday and {bottom_up} overcoming/inspiration spans",
        bottom.fragment.fragment_id
    );
    let report = std::fs::read_to_string(&run.report_path).map_err(|e| e.to_string())?;
    for f in [top, bottom] {
        ensure!(
            report.contains(&f.fragment.fragment_id),
            "report lacks {}",
            f.fragment.fragment_id
        );
    }
    Ok(format!(
        "{} documents in {elapsed:.2?}; top {} ({:+.2}) shows \"{}\", bottom {} ({:+.2}) shows \"{}\"",
        run.manifest.documents,
        top.fragment.fragment_id,
        top.score,
        top.spans
            .iter()
            .find(|m| m.bs_contribution > 0.0 && within_any(&m.class_ref, &uplifting))
            .map_or("", |m| m.surface.as_str()),
        bottom.fragment.fragment_id,
        bottom.score,
        bottom
            .spans
            .iter()
            .find(|m| m.bs_contribution < 0.0 && within_any(&m.class_ref, &everyday))
            .map_or("", |m| m.surface.as_str()),
    ))
}
