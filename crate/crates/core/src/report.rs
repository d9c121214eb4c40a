//! Human-readable reports: top classes by BiasScore and ranked fragments
//! with their matched spans highlighted.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpusgen::GeneratedDocument;
use crate::extreal;
use crate::fragments::{RankList, RankedFragment, Ranking};
use crate::stats::{BiasEntry, BiasTable};
use crate::{Error, Group, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[serde(alias = "markdown")]
    Md,
    Html,
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Md => "md",
            ReportFormat::Html => "html",
            ReportFormat::Json => "json",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "md" | "markdown" => Ok(ReportFormat::Md),
            "html" => Ok(ReportFormat::Html),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::UnsupportedFormat(s.to_string())),
        }
    }
}

/// Display names for the two groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupLabels {
    pub interest: String,
    pub control: String,
}

impl Default for GroupLabels {
    fn default() -> Self {
        GroupLabels {
            interest: "interest".into(),
            control: "control".into(),
        }
    }
}

impl GroupLabels {
    pub fn get(&self, g: Group) -> &str {
        match g {
            Group::Interest => &self.interest,
            Group::Control => &self.control,
        }
    }
}

const EMPTY_TABLE_WARNING: &str =
    "No equivalence class passed the filters. The corpus is probably too small for the frequency thresholds.";

/// Positive and negative classes, each sorted by `|bs|` descending and cut
/// to `rows`. Ties break on the class key. Zero scores appear in neither.
pub fn split_by_sign(table: &BiasTable, rows: usize) -> (Vec<&BiasEntry>, Vec<&BiasEntry>) {
    let pick = |positive: bool| {
        let mut v: Vec<&BiasEntry> = table
            .entries()
            .iter()
            .filter(|e| if positive { e.bs > 0.0 } else { e.bs < 0.0 })
            .collect();
        v.sort_by(|a, b| b.bs.abs().total_cmp(&a.bs.abs()).then_with(|| a.key.cmp(&b.key)));
        v.truncate(rows);
        v
    };
    (pick(true), pick(false))
}

fn members(e: &BiasEntry) -> String {
    e.members.iter().map(String::as_str).collect::<Vec<_>>().join(", ")
}

fn entry_json(e: &BiasEntry) -> serde_json::Value {
    json!({
        "class": e.key,
        "members": e.members,
        "bs": serde_json::to_value(ExtReal(e.bs)).expect("serializable"),
        "freq_interest": e.freq_gi,
        "freq_control": e.freq_gc,
    })
}

#[derive(Serialize)]
struct ExtReal(#[serde(with = "crate::extreal")] f64);

/// Class tables alone.
pub fn emit_class_tables(table: &BiasTable, rows: usize, format: ReportFormat, labels: &GroupLabels) -> String {
    let (pos, neg) = split_by_sign(table, rows);
    match format {
        ReportFormat::Json => {
            let v = class_tables_json(table, &pos, &neg);
            serde_json::to_string_pretty(&v).expect("serializable") + "\n"
        }
        ReportFormat::Md => {
            let mut out = String::new();
            md_class_tables(&mut out, table, &pos, &neg, labels);
            out
        }
        ReportFormat::Html => html_page("Bias classes", |out| html_class_tables(out, table, &pos, &neg, labels)),
    }
}

fn class_tables_json(table: &BiasTable, pos: &[&BiasEntry], neg: &[&BiasEntry]) -> serde_json::Value {
    json!({
        "warning": table.is_empty().then_some(EMPTY_TABLE_WARNING),
        "filters_applied": table.filters_applied,
        "positive": pos.iter().map(|e| entry_json(e)).collect::<Vec<_>>(),
        "negative": neg.iter().map(|e| entry_json(e)).collect::<Vec<_>>(),
    })
}

fn md_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if matches!(c, '\\' | '*' | '_' | '`' | '[' | ']' | '<' | '>' | '|' | '#') {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

fn html_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

fn md_class_tables(out: &mut String, table: &BiasTable, pos: &[&BiasEntry], neg: &[&BiasEntry], labels: &GroupLabels) {
    if table.is_empty() {
        let _ = writeln!(out, "> **Warning:** {EMPTY_TABLE_WARNING}\n");
    }
    for (title, rows) in [
        (format!("Classes associated with the {} group", labels.interest), pos),
        (format!("Classes associated with the {} group", labels.control), neg),
    ] {
        let _ = writeln!(out, "## {}\n", md_escape(&title));
        if rows.is_empty() {
            let _ = writeln!(out, "_none_\n");
            continue;
        }
        let _ = writeln!(
            out,
            "| # | Class | Members | BS | {} | {} |\n|---|---|---|---|---|---|",
            md_escape(&labels.interest),
            md_escape(&labels.control)
        );
        for (i, e) in rows.iter().enumerate() {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} |",
                i + 1,
                md_escape(&e.key.to_string()),
                md_escape(&members(e)),
                extreal::display(e.bs, 2),
                e.freq_gi,
                e.freq_gc
            );
        }
        out.push('\n');
    }
}

fn html_class_tables(
    out: &mut String,
    table: &BiasTable,
    pos: &[&BiasEntry],
    neg: &[&BiasEntry],
    labels: &GroupLabels,
) {
    if table.is_empty() {
        let _ = writeln!(
            out,
            "<p class=\"warning\"><strong>Warning:</strong> {}</p>",
            html_escape(EMPTY_TABLE_WARNING)
        );
    }
    for (title, rows) in [
        (format!("Classes associated with the {} group", labels.interest), pos),
        (format!("Classes associated with the {} group", labels.control), neg),
    ] {
        let _ = writeln!(out, "<h2>{}</h2>", html_escape(&title));
        if rows.is_empty() {
            let _ = writeln!(out, "<p><em>none</em></p>");
            continue;
        }
        let _ = writeln!(
            out,
            "<table>\n<tr><th>#</th><th>Class</th><th>Members</th><th>BS</th><th>{}</th><th>{}</th></tr>",
            html_escape(&labels.interest),
            html_escape(&labels.control)
        );
        for (i, e) in rows.iter().enumerate() {
            let _ = writeln!(
                out,
                "<tr><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td></tr>",
                i + 1,
                html_escape(&e.key.to_string()),
                html_escape(&members(e)),
                extreal::display(e.bs, 2),
                e.freq_gi,
                e.freq_gc
            );
        }
        out.push_str("</table>\n");
    }
}

fn html_page(title: &str, body: impl FnOnce(&mut String)) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<!DOCTYPE html>\n<html lang=\"es\">\n<head>\n<meta charset=\"utf-8\">\n<title>{}</title>\n<style>\nbody {{ font-family: sans-serif; max-width: 60em; margin: auto; }}\ntable {{ border-collapse: collapse; }}\ntd, th {{ border: 1px solid #ccc; padding: 0.2em 0.5em; }}\nmark {{ background: #ffe680; }}\n.warning {{ background: #fdd; padding: 0.5em; }}\n</style>\n</head>\n<body>\n<h1>{}</h1>",
        html_escape(title),
        html_escape(title)
    );
    body(&mut out);
    out.push_str("</body>\n</html>\n");
    out
}

/// Matched spans as byte ranges relative to the fragment, with overlapping
/// or touching ranges merged.
pub fn highlight_ranges(r: &RankedFragment) -> Vec<(usize, usize)> {
    let base = r.scored.fragment.char_span.0;
    let mut ranges: Vec<(usize, usize)> = r
        .scored
        .spans
        .iter()
        .map(|s| (s.char_span.0 - base, s.char_span.1 - base))
        .collect();
    ranges.sort();
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for (a, b) in ranges {
        match merged.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => merged.push((a, b)),
        }
    }
    merged
}

fn highlight(text: &str, ranges: &[(usize, usize)], open: &str, close: &str, escape: fn(&str) -> String) -> String {
    let mut out = String::new();
    let mut pos = 0;
    for &(a, b) in ranges {
        out.push_str(&escape(&text[pos..a]));
        out.push_str(open);
        out.push_str(&escape(&text[a..b]));
        out.push_str(close);
        pos = b;
    }
    out.push_str(&escape(&text[pos..]));
    out
}

/// Ids of fragments in the same list that share a sentence with this one.
fn overlaps(list: &[RankedFragment]) -> Vec<Vec<String>> {
    list.iter()
        .map(|a| {
            let fa = &a.scored.fragment;
            list.iter()
                .filter(|b| {
                    let fb = &b.scored.fragment;
                    fb.fragment_id != fa.fragment_id
                        && fb.doc_id == fa.doc_id
                        && fb.sentence_range.0 < fa.sentence_range.1
                        && fa.sentence_range.0 < fb.sentence_range.1
                })
                .map(|b| b.scored.fragment.fragment_id.clone())
                .collect()
        })
        .collect()
}

/// Everything a full report is rendered from.
pub struct ReportBundle<'a> {
    pub table: &'a BiasTable,
    pub ranking: &'a Ranking,
    pub documents: &'a [GeneratedDocument],
    pub rows: usize,
    pub labels: GroupLabels,
    pub run: RunMetadata,
}

/// Provenance shown at the top of a report.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_sha256: Option<String>,
    pub corpus_sha256: Option<String>,
    pub generation_manifest: Option<String>,
}

impl RunMetadata {
    fn lines(&self, table: &BiasTable) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        if let Some(h) = &self.config_sha256 {
            v.push(("config sha256", h.clone()));
        }
        if let Some(h) = &self.corpus_sha256 {
            v.push(("corpus sha256", h.clone()));
        }
        if let Some(m) = &self.generation_manifest {
            v.push(("generation manifest", m.clone()));
        }
        let fa = &table.filters_applied;
        let thresholds: Vec<String> = fa
            .min_freq_by_content_count
            .iter()
            .map(|(n, t)| format!("{n}:{t}"))
            .collect();
        v.push(("frequency thresholds", thresholds.join(" ")));
        v.push(("min |BS|", format!("{}", fa.min_abs_bs)));
        v.push(("classes kept", format!("{} of {}", fa.kept, fa.classes_in)));
        v.push((
            "largest finite |BS|",
            table.max_finite_abs_bs().map_or("none".into(), |m| format!("{m:.2}")),
        ));
        v
    }
}

struct DocMeta<'a> {
    scenario_id: &'a str,
    marker_id: &'a str,
}

impl ReportBundle<'_> {
    fn metadata(&self) -> Result<HashMap<&str, DocMeta<'_>>> {
        let by_id: HashMap<&str, DocMeta<'_>> = self
            .documents
            .iter()
            .map(|d| {
                (
                    d.doc_id.as_str(),
                    DocMeta {
                        scenario_id: &d.scenario_id,
                        marker_id: &d.marker_id,
                    },
                )
            })
            .collect();
        for r in self.ranking.top.iter().chain(&self.ranking.bottom) {
            let f = &r.scored.fragment;
            if !by_id.contains_key(f.doc_id.as_str()) {
                return Err(Error::DanglingDocument {
                    fragment: f.fragment_id.clone(),
                    doc_id: f.doc_id.clone(),
                });
            }
        }
        Ok(by_id)
    }

    /// Class tables followed by the top and bottom fragments.
    pub fn render(&self, format: ReportFormat) -> Result<String> {
        let meta = self.metadata()?;
        let (pos, neg) = split_by_sign(self.table, self.rows);
        Ok(match format {
            ReportFormat::Json => {
                let list = |l: &[RankedFragment]| -> Vec<serde_json::Value> {
                    let ov = overlaps(l);
                    l.iter().zip(ov).map(|(r, o)| fragment_json(r, &meta, o)).collect()
                };
                let v = json!({
                    "run": self.run,
                    "max_finite_abs_bs": self.table.max_finite_abs_bs(),
                    "classes": class_tables_json(self.table, &pos, &neg),
                    "fragments": {
                        "candidates": self.ranking.candidates,
                        "top": list(&self.ranking.top),
                        "bottom": list(&self.ranking.bottom),
                    },
                });
                serde_json::to_string_pretty(&v)? + "\n"
            }
            ReportFormat::Md => {
                let mut out = String::from("# Bias report\n\n");
                for (k, v) in self.run.lines(self.table) {
                    let _ = writeln!(out, "- {k}: {}", md_escape(&v));
                }
                out.push('\n');
                md_class_tables(&mut out, self.table, &pos, &neg, &self.labels);
                for (title, list) in self.fragment_lists() {
                    let _ = writeln!(out, "## {title}\n");
                    if list.is_empty() {
                        let _ = writeln!(out, "_none_\n");
                    }
                    for (r, ov) in list.iter().zip(overlaps(list)) {
                        md_fragment(&mut out, r, &meta[r.scored.fragment.doc_id.as_str()], &ov);
                    }
                }
                out
            }
            ReportFormat::Html => html_page("Bias report", |out| {
                out.push_str("<ul>\n");
                for (k, v) in self.run.lines(self.table) {
                    let _ = writeln!(out, "<li>{k}: {}</li>", html_escape(&v));
                }
                out.push_str("</ul>\n");
                html_class_tables(out, self.table, &pos, &neg, &self.labels);
                for (title, list) in self.fragment_lists() {
                    let _ = writeln!(out, "<h2>{}</h2>", html_escape(&title));
                    if list.is_empty() {
                        let _ = writeln!(out, "<p><em>none</em></p>");
                    }
                    for (r, ov) in list.iter().zip(overlaps(list)) {
                        html_fragment(out, r, &meta[r.scored.fragment.doc_id.as_str()], &ov);
                    }
                }
            }),
        })
    }

    fn fragment_lists(&self) -> [(String, &[RankedFragment]); 2] {
        [
            (
                format!("Highest scoring fragments ({})", self.labels.interest),
                &self.ranking.top,
            ),
            (
                format!("Lowest scoring fragments ({})", self.labels.interest),
                &self.ranking.bottom,
            ),
        ]
    }
}

fn list_name(l: RankList) -> &'static str {
    match l {
        RankList::Top => "top",
        RankList::Bottom => "bottom",
    }
}

fn fragment_json(r: &RankedFragment, meta: &HashMap<&str, DocMeta<'_>>, overlaps: Vec<String>) -> serde_json::Value {
    let f = &r.scored.fragment;
    let m = &meta[f.doc_id.as_str()];
    let chars = |byte: usize| f.text[..byte].chars().count();
    let base = f.char_span.0;
    let spans: Vec<serde_json::Value> = r
        .scored
        .spans
        .iter()
        .map(|s| {
            json!({
                "surface": s.surface,
                "class": s.class_ref,
                "bs": serde_json::to_value(ExtReal(s.bs)).expect("serializable"),
                "contribution": s.bs_contribution,
                "char_start": chars(s.char_span.0 - base),
                "char_end": chars(s.char_span.1 - base),
            })
        })
        .collect();
    json!({
        "list": list_name(r.list),
        "rank": r.rank,
        "fragment_id": f.fragment_id,
        "doc_id": f.doc_id,
        "scenario_id": m.scenario_id,
        "marker_id": m.marker_id,
        "sentence_range": f.sentence_range,
        "center_marker": f.center_marker,
        "score": r.scored.score,
        "text": f.text,
        "spans": spans,
        "overlaps": overlaps,
    })
}

fn span_lines(r: &RankedFragment) -> Vec<(String, String, String)> {
    r.scored
        .spans
        .iter()
        .map(|s| {
            let mut contribution = format!("{:+.2}", s.bs_contribution);
            if !s.bs.is_finite() {
                let _ = write!(contribution, " (BS {})", extreal::display(s.bs, 2));
            }
            (s.surface.clone(), s.class_ref.to_string(), contribution)
        })
        .collect()
}

fn md_fragment(out: &mut String, r: &RankedFragment, m: &DocMeta<'_>, overlaps: &[String]) {
    let f = &r.scored.fragment;
    let _ = writeln!(
        out,
        "### {}. `{}` (score {:+.2})\n\nscenario `{}`, marker `{}`, sentences {}-{}\n",
        r.rank,
        f.fragment_id,
        r.scored.score,
        m.scenario_id,
        m.marker_id,
        f.sentence_range.0,
        f.sentence_range.1 - 1
    );
    if !overlaps.is_empty() {
        let _ = writeln!(out, "_Overlaps with {}._\n", overlaps.join(", "));
    }
    let _ = writeln!(
        out,
        "> {}\n",
        highlight(&f.text, &highlight_ranges(r), "**", "**", md_escape).replace('\n', "\n> ")
    );
    for (surface, key, contribution) in span_lines(r) {
        let _ = writeln!(out, "- {}: {} {}", md_escape(&surface), md_escape(&key), contribution);
    }
    let _ = writeln!(out, "\nTotal: {:+.2}\n", r.scored.score);
}

fn html_fragment(out: &mut String, r: &RankedFragment, m: &DocMeta<'_>, overlaps: &[String]) {
    let f = &r.scored.fragment;
    let _ = writeln!(
        out,
        "<section>\n<h3>{}. <code>{}</code> (score {:+.2})</h3>\n<p>scenario <code>{}</code>, marker <code>{}</code>, sentences {}-{}</p>",
        r.rank,
        html_escape(&f.fragment_id),
        r.scored.score,
        html_escape(m.scenario_id),
        html_escape(m.marker_id),
        f.sentence_range.0,
        f.sentence_range.1 - 1
    );
    if !overlaps.is_empty() {
        let _ = writeln!(
            out,
            "<p><em>Overlaps with {}.</em></p>",
            html_escape(&overlaps.join(", "))
        );
    }
    let _ = writeln!(
        out,
        "<blockquote>{}</blockquote>\n<ul>",
        highlight(&f.text, &highlight_ranges(r), "<mark>", "</mark>", html_escape)
    );
    for (surface, key, contribution) in span_lines(r) {
        let _ = writeln!(
            out,
            "<li>{}: {} {}</li>",
            html_escape(&surface),
            html_escape(&key),
            html_escape(&contribution)
        );
    }
    let _ = writeln!(out, "</ul>\n<p>Total: {:+.2}</p>\n</section>", r.scored.score);
}

/// Report files written side by side, keyed by extension.
pub fn render_all(bundle: &ReportBundle<'_>, formats: &[ReportFormat]) -> Result<BTreeMap<&'static str, String>> {
    formats
        .iter()
        .map(|f| Ok((f.extension(), bundle.render(*f)?)))
        .collect()
}
