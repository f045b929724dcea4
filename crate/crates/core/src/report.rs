//! Findings report: markdown for people, JSON for scoring.
//!
//! Built only from the hypothesis store and the ingest cards, so the same
//! inputs always give the same bytes.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::beliefs::{Hypothesis, HypothesisDoc, Severity, Stance, Status};
use crate::error::Result;
use crate::ingest::Card;
use crate::project::Project;
use crate::storage::FileStore;

pub const REPORT_MD: &str = "report.md";
pub const REPORT_JSON: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRef {
    pub span: String,
    pub card_id: String,
    pub stance: Stance,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub id: String,
    pub title: String,
    pub severity: Severity,
    pub vuln_type: String,
    pub status: Status,
    pub confidence: f64,
    pub affected_files: Vec<String>,
    pub affected_functions: Vec<String>,
    pub reasoning: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa_reasoning: Option<String>,
    pub evidence: Vec<EvidenceRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDoc {
    pub findings: Vec<Finding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub open_items: Option<Vec<Finding>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub doc: ReportDoc,
    pub markdown: String,
}

fn finding(h: &Hypothesis, cards: &BTreeMap<&str, &Card>) -> Finding {
    let mut files: BTreeSet<String> = h.properties.source_files.clone();
    let evidence = h
        .evidence
        .iter()
        .map(|e| {
            let span = match cards.get(e.card_id.as_str()) {
                Some(c) => {
                    files.insert(c.relpath.clone());
                    c.span_label()
                }
                None => e.card_id.clone(),
            };
            EvidenceRef {
                span,
                card_id: e.card_id.clone(),
                stance: e.stance,
                note: e.note.clone(),
            }
        })
        .collect();
    Finding {
        id: h.id.clone(),
        title: h.title.clone(),
        severity: h.severity,
        vuln_type: h.vuln_type.clone(),
        status: h.status,
        confidence: h.confidence,
        affected_files: files.into_iter().collect(),
        affected_functions: h.properties.affected_functions.iter().cloned().collect(),
        reasoning: h.reasoning.clone(),
        qa_reasoning: h.verdict.as_ref().map(|v| v.reasoning.clone()),
        evidence,
    }
}

fn sorted(mut items: Vec<Finding>) -> Vec<Finding> {
    items.sort_by(|a, b| {
        (a.severity.rank(), &a.title, &a.id).cmp(&(b.severity.rank(), &b.title, &b.id))
    });
    items
}

fn severity_name(s: Severity) -> String {
    serde_json::to_value(s)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn render_items(out: &mut String, items: &[Finding]) {
    if items.is_empty() {
        out.push_str("(none)\n\n");
        return;
    }
    for (i, f) in items.iter().enumerate() {
        out.push_str(&format!("### {}. {}\n\n", i + 1, f.title));
        out.push_str(&format!("- Id: {}\n", f.id));
        out.push_str(&format!("- Severity: {}\n", severity_name(f.severity)));
        out.push_str(&format!("- Type: {}\n", f.vuln_type));
        out.push_str(&format!("- Status: {} (confidence {:.2})\n", f.status, f.confidence));
        if !f.affected_files.is_empty() {
            out.push_str(&format!("- Affected files: {}\n", f.affected_files.join(", ")));
        }
        if !f.affected_functions.is_empty() {
            out.push_str(&format!("- Affected functions: {}\n", f.affected_functions.join(", ")));
        }
        if !f.evidence.is_empty() {
            out.push_str("- Evidence:\n");
            for e in &f.evidence {
                let stance = serde_json::to_value(e.stance)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default();
                out.push_str(&format!("  - `{}` {}: {}\n", e.span, stance, e.note));
            }
        }
        out.push('\n');
        if !f.reasoning.trim().is_empty() {
            out.push_str(f.reasoning.trim());
            out.push_str("\n\n");
        }
        if let Some(qa) = f.qa_reasoning.as_deref().filter(|s| !s.trim().is_empty()) {
            out.push_str(&format!("QA: {}\n\n", qa.trim()));
        }
    }
}

/// Confirmed findings by severity rank then title; with `include_open`,
/// investigating and supported items follow under "Open items".
pub fn generate_report(doc: &HypothesisDoc, cards: &[Card], include_open: bool) -> Report {
    let by_id: BTreeMap<&str, &Card> = cards.iter().map(|c| (c.id.as_str(), c)).collect();
    let pick = |pred: &dyn Fn(Status) -> bool| {
        sorted(
            doc.hypotheses
                .values()
                .filter(|h| pred(h.status))
                .map(|h| finding(h, &by_id))
                .collect(),
        )
    };
    let findings = pick(&|s| s == Status::Confirmed);
    let open_items = include_open.then(|| pick(&|s| matches!(s, Status::Investigating | Status::Supported)));

    let mut md = String::from("# Audit report\n\n## Findings\n\n");
    render_items(&mut md, &findings);
    if let Some(open) = &open_items {
        md.push_str("## Open items\n\n");
        render_items(&mut md, open);
    }
    Report {
        doc: ReportDoc { findings, open_items },
        markdown: md,
    }
}

/// Generate from the project stores and write `report/report.{md,json}`.
pub fn write_report(project: &Project, include_open: bool) -> Result<Report> {
    let (_, cards) = project.load_ingest()?;
    let doc = project.hypotheses().load()?;
    let report = generate_report(&doc, &cards, include_open);
    let dir = project.report_dir();
    let files: FileStore = project.files();
    files.write(dir.join(REPORT_JSON), &report.doc)?;
    std::fs::create_dir_all(&dir).map_err(|e| crate::Error::io(&dir, e))?;
    let md_path = dir.join(REPORT_MD);
    std::fs::write(&md_path, &report.markdown).map_err(|e| crate::Error::io(&md_path, e))?;
    Ok(report)
}
